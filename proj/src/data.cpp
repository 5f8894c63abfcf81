#include "pcll/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace pcll {

using nlohmann::json;

std::string_view to_string(TaskKind kind) { return kind == TaskKind::intent ? "intent" : "slot"; }

TaskKind parse_task_kind(std::string_view text) {
  if (text == "intent") return TaskKind::intent;
  if (text == "slot") return TaskKind::slot;
  throw DataError("unknown task kind '" + std::string(text) + "' (expected intent or slot)");
}

std::string_view to_string(Provenance p) { return p == Provenance::real ? "real" : "pseudo"; }

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join(std::span<const std::string> tokens, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

std::string normalize_text(std::string_view text) {
  const auto toks = tokenize(text);
  return join(toks);
}

// ---------------------------------------------------------------- Vocab

Vocab::Vocab() {
  for (auto r : kReserved) {
    index_.emplace(std::string(r), static_cast<int>(tokens_.size()));
    tokens_.emplace_back(r);
  }
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 4) throw DataError("vocab: missing reserved tokens");
  for (int i = 0; i < 4; ++i)
    if (tokens[static_cast<std::size_t>(i)] != kReserved[i])
      throw DataError("vocab: reserved token " + std::string(kReserved[i]) + " must have id " + std::to_string(i));
  Vocab v;
  v.tokens_.clear();
  v.index_.clear();
  for (auto& t : tokens) {
    if (!v.index_.emplace(t, static_cast<int>(v.tokens_.size())).second) throw DataError("vocab: duplicate token '" + t + "'");
    v.tokens_.push_back(std::move(t));
  }
  return v;
}

bool Vocab::contains(std::string_view token) const { return index_.find(token) != index_.end(); }

int Vocab::id(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw DataError("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::span<const std::string> words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<std::string> Vocab::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (int i : ids) words.push_back(token(i));
  return words;
}

Vocab build_vocab(std::span<const TaskDataset> datasets, int min_count, std::span<const std::string> forced_tokens) {
  std::map<std::string, int> counts;
  std::set<std::string> keep;
  auto force = [&](const std::string& text) {
    for (auto& t : tokenize(text)) keep.insert(std::move(t));
  };
  for (const auto& ds : datasets) {
    for (const auto* split : {&ds.train, &ds.valid, &ds.test}) {
      for (const auto& s : *split) {
        for (const auto& w : s.utterance) ++counts[w];
        force(s.intent);
        for (const auto& p : s.slots) force(p.slot + " " + p.value);
      }
    }
  }
  for (const auto& [w, c] : counts)
    if (c >= min_count) keep.insert(w);
  for (const auto& t : forced_tokens) force(t);
  for (auto r : Vocab::kReserved) keep.erase(std::string(r));

  std::vector<std::string> tokens;
  for (auto r : Vocab::kReserved) tokens.emplace_back(r);
  tokens.insert(tokens.end(), keep.begin(), keep.end());
  return Vocab::from_tokens(std::move(tokens));
}

// ---------------------------------------------------------------- task files

namespace {

Sample parse_record(const json& rec, TaskKind kind, const std::string& where) {
  if (!rec.is_object()) throw DataError(where + ": record is not an object");
  if (!rec.contains("utterance") || !rec["utterance"].is_string()) throw DataError(where + ": missing string field 'utterance'");
  Sample s;
  s.utterance = tokenize(rec["utterance"].get<std::string>());
  if (s.utterance.empty()) throw DataError(where + ": empty utterance");
  if (kind == TaskKind::intent) {
    if (!rec.contains("intent") || !rec["intent"].is_string()) throw DataError(where + ": missing string field 'intent'");
    s.intent = normalize_text(rec["intent"].get<std::string>());
    if (s.intent.empty()) throw DataError(where + ": empty intent");
  } else {
    if (!rec.contains("slots") || !rec["slots"].is_array()) throw DataError(where + ": missing array field 'slots'");
    for (const auto& p : rec["slots"]) {
      if (!p.is_object() || !p.contains("slot") || !p.contains("value") || !p["slot"].is_string() ||
          !p["value"].is_string())
        throw DataError(where + ": slot entries need string 'slot' and 'value'");
      SlotPair pair{normalize_text(p["slot"].get<std::string>()), normalize_text(p["value"].get<std::string>())};
      if (pair.slot.empty()) throw DataError(where + ": empty slot name");
      if (pair.value.empty()) throw DataError(where + ": empty slot value");
      s.slots.push_back(std::move(pair));
    }
  }
  return s;
}

}  // namespace

TaskDataset load_task(const std::filesystem::path& path, TaskKind kind, std::string name) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open task file " + path.string());
  TaskDataset ds;
  ds.name = name.empty() ? path.stem().string() : std::move(name);
  ds.kind = kind;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": malformed record (" + e.what() + ")");
    }
    Sample s = parse_record(rec, kind, where);
    std::string split = "train";
    if (rec.contains("split")) {
      if (!rec["split"].is_string()) throw DataError(where + ": 'split' must be a string");
      split = rec["split"].get<std::string>();
    }
    if (split == "train") ds.train.push_back(std::move(s));
    else if (split == "valid") ds.valid.push_back(std::move(s));
    else if (split == "test") ds.test.push_back(std::move(s));
    else throw DataError(where + ": unknown split '" + split + "'");
  }
  if (ds.train.empty()) throw DataError(path.string() + ": empty train split");
  if (ds.test.empty()) throw DataError(path.string() + ": empty test split");
  return ds;
}

std::string sample_to_json_line(const Sample& sample, TaskKind kind, std::string_view split) {
  json rec;
  rec["utterance"] = join(sample.utterance);
  if (kind == TaskKind::intent) {
    rec["intent"] = sample.intent;
  } else {
    rec["slots"] = json::array();
    for (const auto& p : sample.slots) rec["slots"].push_back({{"slot", p.slot}, {"value", p.value}});
  }
  if (!split.empty()) rec["split"] = std::string(split);
  return rec.dump();
}

void save_task(const TaskDataset& task, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : task.train) out << sample_to_json_line(s, task.kind, "train") << '\n';
  for (const auto& s : task.valid) out << sample_to_json_line(s, task.kind, "valid") << '\n';
  for (const auto& s : task.test) out << sample_to_json_line(s, task.kind, "test") << '\n';
}

// ---------------------------------------------------------------- manifest

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  Manifest m;
  const auto base = path.parent_path();
  if (doc.contains("synthetic")) {
    const auto& s = doc["synthetic"];
    SyntheticSpec spec;
    spec.seed = s.value("seed", spec.seed);
    spec.n_tasks = s.value("n_tasks", spec.n_tasks);
    spec.n_per_task = s.value("n_per_task", spec.n_per_task);
    spec.vocab_size_per_task = s.value("vocab_size_per_task", spec.vocab_size_per_task);
    spec.kind = parse_task_kind(s.value("kind", std::string("intent")));
    m.synthetic.push_back(spec);
  }
  if (doc.contains("tasks")) {
    for (const auto& t : doc["tasks"]) {
      if (!t.contains("path")) throw DataError("manifest " + path.string() + ": task entry without 'path'");
      ManifestEntry e;
      e.path = t["path"].get<std::string>();
      if (e.path.is_relative()) e.path = base / e.path;
      e.name = t.value("name", e.path.stem().string());
      e.kind = parse_task_kind(t.value("kind", std::string("intent")));
      m.tasks.push_back(std::move(e));
    }
    // Optional reordering by task name.
    if (doc.contains("order")) {
      std::vector<ManifestEntry> ordered;
      for (const auto& n : doc["order"]) {
        const auto name = n.get<std::string>();
        auto it = std::find_if(m.tasks.begin(), m.tasks.end(), [&](const ManifestEntry& e) { return e.name == name; });
        if (it == m.tasks.end()) throw DataError("manifest order names unknown task '" + name + "'");
        ordered.push_back(*it);
      }
      if (ordered.size() != m.tasks.size()) throw DataError("manifest order must list every task exactly once");
      m.tasks = std::move(ordered);
    }
  }
  if (m.tasks.empty() && m.synthetic.empty()) throw DataError("manifest " + path.string() + " lists no tasks");
  return m;
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  json doc;
  if (!manifest.synthetic.empty()) {
    const auto& s = manifest.synthetic.front();
    doc["synthetic"] = {{"seed", s.seed},
                        {"n_tasks", s.n_tasks},
                        {"n_per_task", s.n_per_task},
                        {"vocab_size_per_task", s.vocab_size_per_task},
                        {"kind", std::string(to_string(s.kind))}};
  }
  if (!manifest.tasks.empty()) {
    doc["tasks"] = json::array();
    for (const auto& t : manifest.tasks)
      doc["tasks"].push_back({{"name", t.name}, {"path", t.path.string()}, {"kind", std::string(to_string(t.kind))}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

std::vector<TaskDataset> load_stream(const Manifest& manifest) {
  std::vector<TaskDataset> out;
  if (!manifest.synthetic.empty()) {
    out = gen_synthetic_stream(manifest.synthetic.front());
  }
  for (const auto& e : manifest.tasks) out.push_back(load_task(e.path, e.kind, e.name));
  return out;
}

// ---------------------------------------------------------------- synthetic

namespace {

constexpr std::string_view kSyllables[] = {"ba", "ko", "ri", "mu", "te", "la", "zo", "ne", "pi", "su", "da", "fe",
                                           "go", "hi", "ju", "ve", "wa", "yo", "ki", "ro", "ma", "tu", "se", "no"};

// Shared across tasks; none of these occur in any prompt template.
const std::vector<std::string> kFillers = {"i",   "want", "to",     "please", "my",  "can", "you", "me",
                                           "now", "some", "need",   "would",  "like", "get", "show", "about",
                                           "just", "again", "today", "really"};

std::string pseudo_word(std::mt19937_64& rng, int syllables) {
  std::uniform_int_distribution<std::size_t> pick(0, std::size(kSyllables) - 1);
  std::string w;
  for (int i = 0; i < syllables; ++i) w += kSyllables[pick(rng)];
  return w;
}

constexpr int kMaxAttempts = 100000;

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace

std::vector<TaskDataset> gen_synthetic_stream(std::uint64_t seed, int n_tasks, int n_per_task, int vocab_size_per_task,
                                              TaskKind kind) {
  if (n_tasks < 2) throw DataError("synthetic stream needs at least 2 tasks");
  if (n_per_task < 1) throw DataError("synthetic stream needs at least 1 sample per task");
  if (vocab_size_per_task < 4) throw DataError("synthetic stream needs vocab_size_per_task >= 4");

  std::mt19937_64 rng(seed);
  std::unordered_set<std::string> used(kFillers.begin(), kFillers.end());
  auto fresh_word = [&](int syllables) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      auto w = pseudo_word(rng, syllables);
      if (used.insert(w).second) return w;
    }
    throw DataError("synthetic stream: ran out of distinct pseudo-words");
  };

  const int n_labels = std::max(2, vocab_size_per_task / 4);
  const int n_valid = std::max(1, n_per_task / 10);
  const int n_test = std::max(10, n_per_task / 4);

  std::vector<TaskDataset> stream;
  for (int t = 0; t < n_tasks; ++t) {
    TaskDataset ds;
    ds.name = fresh_word(3);
    ds.kind = kind;
    std::vector<std::string> labels;
    for (int l = 0; l < n_labels; ++l) labels.push_back(fresh_word(2));
    // content words partitioned round-robin among labels
    std::vector<std::vector<std::string>> words(static_cast<std::size_t>(n_labels));
    for (int w = 0; w < vocab_size_per_task; ++w) words[static_cast<std::size_t>(w % n_labels)].push_back(fresh_word(2));

    std::unordered_set<std::string> seen;
    auto make_sample = [&]() {
      for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        Sample s;
        const int len = std::uniform_int_distribution<int>(3, 8)(rng);
        s.utterance.resize(static_cast<std::size_t>(len));
        for (auto& w : s.utterance) w = kFillers[uniform_index(rng, kFillers.size())];
        std::vector<std::size_t> positions(static_cast<std::size_t>(len));
        for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
        std::shuffle(positions.begin(), positions.end(), rng);
        if (kind == TaskKind::intent) {
          const std::size_t label = uniform_index(rng, labels.size());
          const int n_content = len >= 5 ? 2 : 1;
          for (int c = 0; c < n_content; ++c) {
            const auto& pool = words[label];
            s.utterance[positions[static_cast<std::size_t>(c)]] = pool[uniform_index(rng, pool.size())];
          }
          s.intent = labels[label];
        } else {
          // slot types are the label words; values are that type's content words
          const int n_slots = static_cast<int>(uniform_index(rng, 3));
          std::vector<std::size_t> chosen(positions.begin(), positions.begin() + n_slots);
          std::sort(chosen.begin(), chosen.end());
          for (std::size_t pos : chosen) {
            const std::size_t type = uniform_index(rng, labels.size());
            const auto& pool = words[type];
            s.utterance[pos] = pool[uniform_index(rng, pool.size())];
            s.slots.push_back({labels[type], s.utterance[pos]});
          }
        }
        if (seen.insert(join(s.utterance)).second) return s;
      }
      throw DataError("synthetic stream: cannot draw enough distinct utterances for task " + ds.name);
    };
    for (int i = 0; i < n_per_task; ++i) ds.train.push_back(make_sample());
    for (int i = 0; i < n_valid; ++i) ds.valid.push_back(make_sample());
    for (int i = 0; i < n_test; ++i) ds.test.push_back(make_sample());
    stream.push_back(std::move(ds));
  }
  return stream;
}

std::vector<TaskDataset> gen_synthetic_stream(const SyntheticSpec& spec) {
  return gen_synthetic_stream(spec.seed, spec.n_tasks, spec.n_per_task, spec.vocab_size_per_task, spec.kind);
}

}  // namespace pcll
