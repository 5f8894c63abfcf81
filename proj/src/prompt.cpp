#include "pcll/prompt.hpp"

#include <algorithm>
#include <set>

namespace pcll {
namespace {

const std::vector<std::string> kIntentTemplates = {
    "for an utterance from the {NAME} task , {x} has the following intent {y}",
    "in the {NAME} task , what intent best describes : {x} ? answer : {y}",
    "task {NAME} utterance {x} intent {y}",
    "in the task {NAME} , this utterance {x} has the intent of {y}",
    "if we consider the intent detection task , for a sample in the {NAME} task , what's the intent of the "
    "utterance {x} ? the intent is : {y}",
};

const std::string kSlotTemplate =
    "in the {NAME} task , if there are any slots and values , what are they in this sentence : {x} ? answer : {y}";

const std::vector<std::string> kNoSlot = {"no", "slot", "in", "this", "sentence", "."};

bool is_reserved(int id) { return id >= 0 && id < 4; }

}  // namespace

const std::string& intent_template(int preset) {
  if (preset < 1 || preset > kIntentTemplatePresets)
    throw DataError("intent template preset must be 1.." + std::to_string(kIntentTemplatePresets));
  return kIntentTemplates[static_cast<std::size_t>(preset - 1)];
}

const std::string& slot_template() { return kSlotTemplate; }

const std::string& default_template(TaskKind kind) {
  return kind == TaskKind::intent ? kIntentTemplates.front() : kSlotTemplate;
}

TaskSpec make_task_spec(const std::string& name, TaskKind kind, const std::string& template_text) {
  const auto words = tokenize(template_text);
  const auto name_words = tokenize(name);
  if (name_words.empty()) throw DataError("task name is empty");
  TaskSpec spec;
  spec.name = name;
  spec.kind = kind;
  spec.template_text = template_text;
  int stage = 0;  // 0: prefix, 1: postfix, 2: after {y}
  int names = 0;
  for (const auto& w : words) {
    if (w == "{name}") {
      if (stage != 0) throw DataError("template: {NAME} must precede {x}: " + template_text);
      spec.prefix.insert(spec.prefix.end(), name_words.begin(), name_words.end());
      ++names;
    } else if (w == "{x}") {
      if (stage != 0) throw DataError("template: repeated {x}: " + template_text);
      stage = 1;
    } else if (w == "{y}") {
      if (stage != 1) throw DataError("template: {y} must follow {x}: " + template_text);
      stage = 2;
    } else if (stage == 2) {
      throw DataError("template: nothing may follow {y}: " + template_text);
    } else {
      (stage == 0 ? spec.prefix : spec.postfix).push_back(w);
    }
  }
  if (stage != 2) throw DataError("template needs {x} and {y}: " + template_text);
  if (names != 1) throw DataError("template must contain {NAME} exactly once: " + template_text);
  if (spec.postfix.empty()) throw DataError("template needs words between {x} and {y}: " + template_text);
  return spec;
}

TaskSpec make_task_spec(const std::string& name, TaskKind kind) {
  return make_task_spec(name, kind, default_template(kind));
}

TaskSpec without_task_id(const TaskSpec& spec) {
  if (spec.template_text.empty()) throw DataError("task spec " + spec.name + " has no template to rewrite");
  TaskSpec out = make_task_spec(std::string(kGenericTaskName), spec.kind, spec.template_text);
  out.name = spec.name;
  return out;
}

TaskSpec make_token_spec(const std::string& name, TaskKind kind) {
  TaskSpec spec;
  spec.name = name;
  spec.kind = kind;
  spec.prefix = {"__" + normalize_text(name) + "__"};
  spec.postfix = {"__ans__"};
  return spec;
}

std::vector<std::string> prompt_tokens(std::span<const TaskSpec> specs) {
  std::set<std::string> out;
  for (const auto& s : specs) {
    out.insert(s.prefix.begin(), s.prefix.end());
    out.insert(s.postfix.begin(), s.postfix.end());
    if (s.kind == TaskKind::slot) {
      out.insert(kNoSlot.begin(), kNoSlot.end());
      out.insert({":", ";"});
    }
  }
  return {out.begin(), out.end()};
}

std::vector<std::string> serialize_output(TaskKind kind, const Sample& sample) {
  if (kind == TaskKind::intent) return tokenize(sample.intent);
  if (sample.slots.empty()) return kNoSlot;
  std::vector<std::string> y;
  for (std::size_t i = 0; i < sample.slots.size(); ++i) {
    if (i) y.emplace_back(";");
    for (auto& w : tokenize(sample.slots[i].slot)) y.push_back(std::move(w));
    y.emplace_back(":");
    for (auto& w : tokenize(sample.slots[i].value)) y.push_back(std::move(w));
  }
  y.emplace_back(".");
  return y;
}

RenderedPrompt render(const TaskSpec& task, const Vocab& vocab, std::span<const std::string> x,
                      const std::vector<std::string>* y, int max_len) {
  if (x.empty()) throw DataError("render: empty utterance for task " + task.name);
  const int fixed = 1 + static_cast<int>(task.prefix.size() + task.postfix.size()) +
                    (y ? static_cast<int>(y->size()) + 1 : 0);
  int x_len = static_cast<int>(x.size());
  if (max_len > 0 && fixed + x_len > max_len) {
    x_len = max_len - fixed;
    if (x_len < 1)
      throw DataError("render: templates and output of task " + task.name + " need " + std::to_string(fixed + 1) +
                      " tokens, context holds " + std::to_string(max_len));
  }
  RenderedPrompt r;
  r.ids.reserve(static_cast<std::size_t>(fixed + x_len));
  r.ids.push_back(Vocab::kBos);
  auto append = [&](std::span<const std::string> words) {
    TokenRange range{static_cast<int>(r.ids.size()), 0};
    for (const auto& w : words) r.ids.push_back(vocab.id(w));
    range.end = static_cast<int>(r.ids.size());
    return range;
  };
  r.prefix = append(task.prefix);
  r.x = append(x.first(static_cast<std::size_t>(x_len)));
  r.postfix = append(task.postfix);
  if (y) {
    r.y = append(*y);
    r.ids.push_back(Vocab::kEos);
    r.has_output = true;
  } else {
    r.y = {r.postfix.end, r.postfix.end};
  }
  return r;
}

RenderedPrompt render(const TaskSpec& task, const Vocab& vocab, const Sample& sample, bool with_output, int max_len) {
  if (!with_output) return render(task, vocab, sample.utterance, nullptr, max_len);
  const auto y = serialize_output(task.kind, sample);
  return render(task, vocab, sample.utterance, &y, max_len);
}

RenderedPrompt render_no_task_id(const TaskSpec& task, const Vocab& vocab, const Sample& sample, bool with_output,
                                 int max_len) {
  return render(without_task_id(task), vocab, sample, with_output, max_len);
}

std::string_view to_string(ParseStatus status) {
  switch (status) {
    case ParseStatus::ok: return "ok";
    case ParseStatus::no_prefix: return "no_prefix";
    case ParseStatus::no_postfix: return "no_postfix";
    case ParseStatus::empty_x: return "empty_x";
    case ParseStatus::empty_y: return "empty_y";
    case ParseStatus::bad_output: return "bad_output";
    case ParseStatus::special_token: return "special_token";
  }
  return "unknown";
}

bool parse_output(TaskKind kind, std::span<const std::string> y, Sample& out) {
  if (y.empty()) return false;
  if (kind == TaskKind::intent) {
    out.intent = join(y);
    out.slots.clear();
    return true;
  }
  std::vector<std::string> words(y.begin(), y.end());
  if (words == kNoSlot || std::equal(words.begin(), words.end(), kNoSlot.begin(), kNoSlot.end() - 1)) {
    out.slots.clear();
    return true;
  }
  if (words.back() == ".") words.pop_back();
  if (words.empty()) return false;
  std::vector<SlotPair> pairs;
  std::size_t start = 0;
  while (start <= words.size()) {
    auto end = std::find(words.begin() + static_cast<std::ptrdiff_t>(start), words.end(), std::string(";"));
    const std::size_t stop = static_cast<std::size_t>(end - words.begin());
    std::span<const std::string> seg(words.data() + start, stop - start);
    auto colon = std::find(seg.begin(), seg.end(), std::string(":"));
    if (colon == seg.end() || colon == seg.begin() || colon + 1 == seg.end()) return false;
    const std::span<const std::string> name(seg.begin(), colon);
    const std::span<const std::string> value(colon + 1, seg.end());
    pairs.push_back({join(name), join(value)});
    start = stop + 1;
  }
  out.slots = std::move(pairs);
  out.intent.clear();
  return true;
}

ParseResult parse_generated(const TaskSpec& task, const Vocab& vocab, std::span<const int> ids) {
  ParseResult res;
  std::size_t at = 0;
  if (!ids.empty() && ids[0] == Vocab::kBos) at = 1;
  const auto pre = vocab.encode(task.prefix);
  const auto post = vocab.encode(task.postfix);
  if (ids.size() < at + pre.size() || !std::equal(pre.begin(), pre.end(), ids.begin() + static_cast<std::ptrdiff_t>(at))) {
    res.status = ParseStatus::no_prefix;
    return res;
  }
  at += pre.size();
  auto rest = ids.subspan(at);
  auto hit = std::search(rest.begin(), rest.end(), post.begin(), post.end());
  if (hit == rest.end()) {
    res.status = ParseStatus::no_postfix;
    return res;
  }
  std::span<const int> x(rest.begin(), hit);
  std::span<const int> tail(hit + static_cast<std::ptrdiff_t>(post.size()), rest.end());
  auto eos = std::find(tail.begin(), tail.end(), Vocab::kEos);
  std::span<const int> y(tail.begin(), eos);
  if (x.empty()) {
    res.status = ParseStatus::empty_x;
    return res;
  }
  if (y.empty()) {
    res.status = ParseStatus::empty_y;
    return res;
  }
  if (std::any_of(x.begin(), x.end(), is_reserved) || std::any_of(y.begin(), y.end(), is_reserved)) {
    res.status = ParseStatus::special_token;
    return res;
  }
  Sample s;
  s.utterance = vocab.decode(x);
  s.provenance = Provenance::pseudo;
  const auto y_words = vocab.decode(y);
  if (!parse_output(task.kind, y_words, s)) {
    res.status = ParseStatus::bad_output;
    return res;
  }
  res.sample = std::move(s);
  return res;
}

}  // namespace pcll
