#include "pcll/experiment.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

namespace pcll {

using json = nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& field, const std::string& why) {
  throw std::invalid_argument(field + ": " + why);
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(section + "." + key, "has the wrong type");
  }
}

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> known) {
  if (!j.is_object()) fail(section, "must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) fail(section.empty() ? it.key() : section + "." + it.key(), "unknown field");
  }
}

}  // namespace

void ExperimentConfig::validate(int n_tasks) const {
  if (seeds.empty()) fail("seeds", "must list at least one seed");
  if (manifest.empty() && !synthetic) fail("manifest", "either a manifest or a synthetic block is required");
  if (synthetic) {
    if (synthetic->n_tasks < 2) fail("synthetic.n_tasks", "must be >= 2");
    if (synthetic->n_per_task < 1) fail("synthetic.n_per_task", "must be >= 1");
    if (synthetic->vocab_size_per_task < 4) fail("synthetic.vocab_size_per_task", "must be >= 4");
  }
  if (min_count < 1) fail("min_count", "must be >= 1");
  if (intent_template < 1 || intent_template > kIntentTemplatePresets)
    fail("intent_template", "must be a preset between 1 and " + std::to_string(kIntentTemplatePresets));
  replay.validate();
  loss.validate();
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = 5;  // filled from the data later
  m.validate();
  for (std::size_t k = 0; k < orders.size(); ++k) {
    const auto& o = orders[k];
    const std::string field = "orders[" + std::to_string(k) + "]";
    std::set<int> seen(o.begin(), o.end());
    if (seen.size() != o.size()) fail(field, "repeats a task index");
    if (!o.empty() && (*seen.begin() != 0 || *seen.rbegin() != static_cast<int>(o.size()) - 1))
      fail(field, "must be a permutation of 0..n-1");
    if (n_tasks >= 0 && static_cast<int>(o.size()) != n_tasks)
      fail(field, "has " + std::to_string(o.size()) + " entries, the stream has " + std::to_string(n_tasks) + " tasks");
  }
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j, "", {"manifest", "synthetic", "output_dir", "seeds", "orders", "replay", "loss", "model", "min_count",
                     "intent_template", "intent_template_text", "slot_template_text", "joint"});
  if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  read(j, "seeds", c.seeds, "");
  read(j, "orders", c.orders, "");
  read(j, "min_count", c.min_count, "");
  read(j, "intent_template", c.intent_template, "");
  read(j, "intent_template_text", c.intent_template_text, "");
  read(j, "slot_template_text", c.slot_template_text, "");
  read(j, "joint", c.joint, "");
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    check_keys(s, "synthetic", {"seed", "n_tasks", "n_per_task", "vocab_size_per_task", "kind"});
    SyntheticSpec spec;
    read(s, "seed", spec.seed, "synthetic");
    read(s, "n_tasks", spec.n_tasks, "synthetic");
    read(s, "n_per_task", spec.n_per_task, "synthetic");
    read(s, "vocab_size_per_task", spec.vocab_size_per_task, "synthetic");
    if (s.contains("kind")) {
      try {
        spec.kind = parse_task_kind(s.at("kind").get<std::string>());
      } catch (const std::exception& e) {
        fail("synthetic.kind", e.what());
      }
    }
    c.synthetic = spec;
  }
  if (j.contains("replay")) {
    const auto& r = j.at("replay");
    check_keys(r, "replay", {"strategy", "gamma", "top_k", "max_decode_len", "max_label_len", "er_fraction",
                             "no_latent", "no_task_id", "no_kd", "epochs", "batch_size", "lr", "clip_norm",
                             "eval_batch"});
    if (r.contains("strategy")) {
      try {
        c.replay.strategy = parse_strategy(r.at("strategy").get<std::string>());
      } catch (const std::invalid_argument& e) {
        fail("replay.strategy", e.what());
      }
    }
    read(r, "gamma", c.replay.gamma, "replay");
    read(r, "top_k", c.replay.top_k, "replay");
    read(r, "max_decode_len", c.replay.max_decode_len, "replay");
    read(r, "max_label_len", c.replay.max_label_len, "replay");
    read(r, "er_fraction", c.replay.er_fraction, "replay");
    read(r, "no_latent", c.replay.no_latent, "replay");
    read(r, "no_task_id", c.replay.no_task_id, "replay");
    read(r, "no_kd", c.replay.no_kd, "replay");
    read(r, "epochs", c.replay.epochs, "replay");
    read(r, "batch_size", c.replay.batch_size, "replay");
    read(r, "lr", c.replay.lr, "replay");
    read(r, "clip_norm", c.replay.clip_norm, "replay");
    read(r, "eval_batch", c.replay.eval_batch, "replay");
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_keys(l, "loss", {"lambda", "alpha", "beta_cycles_per_epoch", "beta_ramp_fraction"});
    read(l, "lambda", c.loss.lambda, "loss");
    read(l, "alpha", c.loss.alpha, "loss");
    read(l, "beta_cycles_per_epoch", c.loss.beta_cycles_per_epoch, "loss");
    read(l, "beta_ramp_fraction", c.loss.beta_ramp_fraction, "loss");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model", {"n_layers", "n_heads", "d_model", "d_ff", "context_len", "z_dim", "mlp_hidden",
                            "inject_all_positions"});
    read(m, "n_layers", c.model.n_layers, "model");
    read(m, "n_heads", c.model.n_heads, "model");
    read(m, "d_model", c.model.d_model, "model");
    read(m, "d_ff", c.model.d_ff, "model");
    read(m, "context_len", c.model.context_len, "model");
    read(m, "z_dim", c.model.z_dim, "model");
    read(m, "mlp_hidden", c.model.mlp_hidden, "model");
    read(m, "inject_all_positions", c.model.inject_all_positions, "model");
  }
  return c;
}

namespace {

// The double nearest the float's shortest decimal form, so 0.01f prints as 0.01.
double decimal(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
}

}  // namespace

json config_to_json(const ExperimentConfig& c) {
  json j;
  if (!c.manifest.empty()) j["manifest"] = c.manifest.string();
  if (c.synthetic) {
    const auto& s = *c.synthetic;
    j["synthetic"] = {{"seed", s.seed},
                      {"n_tasks", s.n_tasks},
                      {"n_per_task", s.n_per_task},
                      {"vocab_size_per_task", s.vocab_size_per_task},
                      {"kind", std::string(to_string(s.kind))}};
  }
  j["output_dir"] = c.output_dir.string();
  j["seeds"] = c.seeds;
  j["orders"] = c.orders;
  j["min_count"] = c.min_count;
  j["intent_template"] = c.intent_template;
  if (!c.intent_template_text.empty()) j["intent_template_text"] = c.intent_template_text;
  if (!c.slot_template_text.empty()) j["slot_template_text"] = c.slot_template_text;
  j["joint"] = c.joint;
  const auto& r = c.replay;
  j["replay"] = {{"strategy", std::string(to_string(r.strategy))},
                 {"gamma", decimal(r.gamma)},
                 {"top_k", r.top_k},
                 {"max_decode_len", r.max_decode_len},
                 {"max_label_len", r.max_label_len},
                 {"er_fraction", decimal(r.er_fraction)},
                 {"no_latent", r.no_latent},
                 {"no_task_id", r.no_task_id},
                 {"no_kd", r.no_kd},
                 {"epochs", r.epochs},
                 {"batch_size", r.batch_size},
                 {"lr", decimal(r.lr)},
                 {"clip_norm", decimal(r.clip_norm)},
                 {"eval_batch", r.eval_batch}};
  const auto& l = c.loss;
  j["loss"] = {{"lambda", decimal(l.lambda)},
               {"alpha", decimal(l.alpha)},
               {"beta_cycles_per_epoch", l.beta_cycles_per_epoch},
               {"beta_ramp_fraction", decimal(l.beta_ramp_fraction)}};
  const auto& m = c.model;
  j["model"] = {{"n_layers", m.n_layers},   {"n_heads", m.n_heads},       {"d_model", m.d_model},
                {"d_ff", m.d_ff},           {"context_len", m.context_len}, {"z_dim", m.z_dim},
                {"mlp_hidden", m.mlp_hidden}, {"inject_all_positions", m.inject_all_positions}};
  return j;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: " + path.string() + ": " + e.what());
  }
  auto c = config_from_json(j);
  if (!c.manifest.empty() && c.manifest.is_relative()) c.manifest = path.parent_path() / c.manifest;
  return c;
}

std::filesystem::path resolve_output_dir(const std::filesystem::path& dir) {
  const char* root = std::getenv("PCLL_OUTPUT_ROOT");
  if (root && *root && dir.is_relative()) return std::filesystem::path(root) / dir;
  return dir;
}

std::vector<TaskSpec> task_specs(const std::vector<TaskDataset>& stream, const ExperimentConfig& config) {
  std::vector<TaskSpec> specs;
  for (const auto& t : stream) {
    std::string text;
    if (t.kind == TaskKind::intent)
      text = config.intent_template_text.empty() ? intent_template(config.intent_template) : config.intent_template_text;
    else
      text = config.slot_template_text.empty() ? slot_template() : config.slot_template_text;
    specs.push_back(make_task_spec(t.name, t.kind, text));
  }
  return specs;
}

namespace {

std::vector<TaskDataset> experiment_stream(const ExperimentConfig& config) {
  if (!config.manifest.empty()) {
    if (!std::filesystem::exists(config.manifest))
      throw std::invalid_argument("manifest: no such file " + config.manifest.string());
    return load_stream(load_manifest(config.manifest));
  }
  return gen_synthetic_stream(*config.synthetic);
}

bool non_empty_dir(const std::filesystem::path& p) {
  return std::filesystem::is_directory(p) && !std::filesystem::is_empty(p);
}

}  // namespace

std::vector<RunSummary> cmd_run(const ExperimentConfig& config, bool force, std::ostream& log) {
  const auto stream = experiment_stream(config);
  config.validate(static_cast<int>(stream.size()));
  const auto out_dir = resolve_output_dir(config.output_dir);
  if (non_empty_dir(out_dir)) {
    if (!force) throw std::runtime_error("output directory " + out_dir.string() + " is not empty (use --force)");
    std::filesystem::remove_all(out_dir);
  }
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream cfg(out_dir / "config.json");
    cfg << config_to_json(config).dump(2) << '\n';
  }

  std::vector<std::vector<int>> orders = config.orders;
  if (orders.empty()) {
    std::vector<int> identity(stream.size());
    for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = static_cast<int>(i);
    orders.push_back(identity);
  }
  const auto base_specs = task_specs(stream, config);

  std::vector<RunSummary> runs;
  for (std::size_t k = 0; k < orders.size(); ++k) {
    std::vector<TaskDataset> ordered;
    std::vector<TaskSpec> specs;
    for (int idx : orders[k]) {
      ordered.push_back(stream[static_cast<std::size_t>(idx)]);
      specs.push_back(base_specs[static_cast<std::size_t>(idx)]);
    }
    for (auto seed : config.seeds) {
      ReplayConfig replay = config.replay;
      replay.seed = seed;
      StreamOptions opts;
      opts.output_dir = out_dir / ("order_" + std::to_string(k + 1)) / ("seed_" + std::to_string(seed));
      opts.min_count = config.min_count;
      opts.joint = config.joint;
      log << "run order " << k + 1 << " seed " << seed << " (" << to_string(replay.strategy) << ")\n";
      const auto res = run_stream(ordered, specs, config.model, config.loss, replay, opts);
      RunSummary s{static_cast<int>(k + 1), seed, score_avg(res.r), lca(res.r), opts.output_dir};
      log << std::fixed << std::setprecision(2) << "  score " << s.score << "  lca " << s.lca << '\n';
      log.unsetf(std::ios::floatfield);
      runs.push_back(s);
    }
  }

  std::ofstream agg(out_dir / "aggregate.csv");
  agg << "order,seed,score,lca\n" << std::setprecision(10);
  double score = 0, area = 0;
  for (const auto& r : runs) {
    agg << r.order << ',' << r.seed << ',' << r.score << ',' << r.lca << '\n';
    score += r.score;
    area += r.lca;
  }
  for (std::size_t k = 0; k < orders.size(); ++k) {
    double s = 0, a = 0;
    int n = 0;
    for (const auto& r : runs)
      if (r.order == static_cast<int>(k + 1)) {
        s += r.score;
        a += r.lca;
        ++n;
      }
    agg << "order_" << k + 1 << "_mean,," << s / n << ',' << a / n << '\n';
  }
  agg << "mean,," << score / static_cast<double>(runs.size()) << ',' << area / static_cast<double>(runs.size()) << '\n';
  return runs;
}

PseudoDump cmd_generate(const GenerateOptions& options, std::ostream& log) {
  if (options.count < 0) throw std::invalid_argument("count: must be >= 0");
  if (options.top_k < 1) throw std::invalid_argument("top_k: must be >= 1");
  const auto ck = load_checkpoint(options.checkpoint);
  auto it = std::find_if(ck.tasks.begin(), ck.tasks.end(), [&](const TaskSpec& t) { return t.name == options.task; });
  if (it == ck.tasks.end()) throw std::invalid_argument("task: '" + options.task + "' is not in the checkpoint");
  const TaskSpec& spec = *it;

  std::mt19937_64 rng(options.seed);
  TaskGenerationLog gl;
  gl.requested = options.count;
  gl.attempts = options.count;
  const auto inputs = generate_pseudo_inputs(ck.model, spec, ck.vocab, options.count, !options.no_latent,
                                             options.top_k, options.max_decode_len, rng);
  std::vector<std::vector<std::string>> xs;
  std::vector<std::size_t> which;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (inputs[i].status == PseudoStatus::ok) {
      xs.push_back(inputs[i].x);
      which.push_back(i);
    }
  const auto labeled = label_pseudo_inputs(ck.model, spec, ck.vocab, xs, options.max_label_len);
  std::vector<GenerationRecord> records(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) records[i] = {inputs[i].status, inputs[i].x, std::nullopt};
  for (std::size_t k = 0; k < labeled.size(); ++k) {
    auto& r = records[which[k]];
    switch (labeled[k].status) {
      case ParseStatus::ok: r.status = PseudoStatus::ok; break;
      case ParseStatus::no_prefix: r.status = PseudoStatus::no_prefix; break;
      case ParseStatus::no_postfix: r.status = PseudoStatus::no_postfix; break;
      case ParseStatus::empty_x: r.status = PseudoStatus::empty_x; break;
      case ParseStatus::empty_y: r.status = PseudoStatus::empty_y; break;
      case ParseStatus::bad_output: r.status = PseudoStatus::bad_output; break;
      case ParseStatus::special_token: r.status = PseudoStatus::special_token; break;
    }
    r.sample = labeled[k].sample;
  }
  for (const auto& r : records) {
    if (r.status == PseudoStatus::ok)
      ++gl.accepted;
    else
      ++gl.rejects[r.status];
  }
  gl.records = std::move(records);
  PseudoDump dump = make_dump(spec.name, gl);
  if (!options.output.empty()) write_pseudo_dump(options.output, dump, spec.kind);
  log << "task " << spec.name << ": " << dump.accepted << " of " << dump.attempts << " attempts accepted";
  if (dump.accepted > 0)
    log << ", dist-1.." << 4 << ": " << dump.dist[0] << ' ' << dump.dist[1] << ' ' << dump.dist[2] << ' '
        << dump.dist[3];
  log << '\n';
  return dump;
}

std::vector<EvalRow> cmd_eval(const EvalOptions& options, std::ostream& log) {
  if (!std::filesystem::exists(options.manifest))
    throw std::invalid_argument("manifest: no such file " + options.manifest.string());
  const auto ck = load_checkpoint(options.checkpoint);
  const auto stream = load_stream(load_manifest(options.manifest));

  auto require = [&](const std::string& word, const std::string& task) {
    if (!ck.vocab.contains(word))
      throw std::invalid_argument("vocab mismatch: token '" + word + "' of task " + task +
                                  " is not in the checkpoint vocabulary");
  };
  std::vector<EvalRow> rows;
  for (const auto& task : stream) {
    if (task.test.empty()) throw std::invalid_argument("task " + task.name + ": empty test split");
    auto it = std::find_if(ck.tasks.begin(), ck.tasks.end(), [&](const TaskSpec& t) { return t.name == task.name; });
    const TaskSpec spec = it != ck.tasks.end() ? *it : make_task_spec(task.name, task.kind);
    for (const auto& w : spec.prefix) require(w, task.name);
    for (const auto& w : spec.postfix) require(w, task.name);
    for (const auto& s : task.test) {
      for (const auto& w : s.utterance) require(w, task.name);
      for (const auto& w : serialize_output(task.kind, s)) require(w, task.name);
    }
    rows.push_back({task.name, evaluate(ck.model, spec, ck.vocab, task.test, options.max_label_len)});
  }
  std::ostringstream csv;
  csv << "task,score\n" << std::setprecision(10);
  for (const auto& r : rows) csv << r.task << ',' << r.score << '\n';
  log << csv.str();
  if (!options.output.empty()) {
    std::ofstream out(options.output);
    if (!out) throw std::runtime_error("cannot write " + options.output.string());
    out << csv.str();
  }
  return rows;
}

}  // namespace pcll
