#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pcll/experiment.hpp"

namespace {

struct RunFlags {
  std::string config;
  std::string manifest;
  std::string output;
  std::string strategy;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> orders;
  float gamma = -1, lambda = -1, alpha = -1, lr = -1;
  int top_k = -1, z_dim = -1, cycles = -1, epochs = -1, max_decode_len = -1, batch_size = -1;
  bool no_latent = false, no_task_id = false, no_kd = false, joint = false, force = false;
};

// "2,0,1" -> {2, 0, 1}
std::vector<int> parse_order(const std::string& text) {
  std::vector<int> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto cell = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    out.push_back(std::stoi(cell));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

pcll::ExperimentConfig build_config(const RunFlags& f) {
  pcll::ExperimentConfig c;
  if (!f.config.empty()) c = pcll::load_experiment_config(f.config);
  if (!f.manifest.empty()) c.manifest = f.manifest;
  if (c.manifest.empty() && !c.synthetic) c.synthetic = pcll::SyntheticSpec{};
  if (!f.output.empty()) c.output_dir = f.output;
  if (!f.strategy.empty()) c.replay.strategy = pcll::parse_strategy(f.strategy);
  if (!f.seeds.empty()) c.seeds = f.seeds;
  if (!f.orders.empty()) {
    c.orders.clear();
    for (const auto& o : f.orders) c.orders.push_back(parse_order(o));
  }
  if (f.gamma >= 0) c.replay.gamma = f.gamma;
  if (f.lambda >= 0) c.loss.lambda = f.lambda;
  if (f.alpha >= 0) c.loss.alpha = f.alpha;
  if (f.lr >= 0) c.replay.lr = f.lr;
  if (f.top_k >= 0) c.replay.top_k = f.top_k;
  if (f.z_dim >= 0) c.model.z_dim = f.z_dim;
  if (f.cycles >= 0) c.loss.beta_cycles_per_epoch = f.cycles;
  if (f.epochs >= 0) c.replay.epochs = f.epochs;
  if (f.max_decode_len >= 0) c.replay.max_decode_len = f.max_decode_len;
  if (f.batch_size >= 0) c.replay.batch_size = f.batch_size;
  c.replay.no_latent = c.replay.no_latent || f.no_latent;
  c.replay.no_task_id = c.replay.no_task_id || f.no_task_id;
  c.replay.no_kd = c.replay.no_kd || f.no_kd;
  c.joint = c.joint || f.joint;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-conditioned generative replay for lifelong language learning"};
  app.require_subcommand(1);

  RunFlags rf;
  auto* run = app.add_subcommand("run", "Train over a task stream for every (order, seed) pair");
  run->add_option("-c,--config", rf.config, "Experiment config (JSON)");
  run->add_option("-m,--manifest", rf.manifest, "Stream manifest; defaults to the synthetic stream");
  run->add_option("-o,--output", rf.output, "Output directory (relative paths honor PCLL_OUTPUT_ROOT)");
  run->add_option("--strategy", rf.strategy, "pcll, finetune, lamol_token or er");
  run->add_option("--seed", rf.seeds, "Seeds (repeatable)");
  run->add_option("--order", rf.orders, "Task order as comma-separated indices (repeatable)");
  run->add_option("--gamma", rf.gamma, "Pseudo-sample ratio");
  run->add_option("--lambda", rf.lambda, "Weight of the output term of the LM loss");
  run->add_option("--alpha", rf.alpha, "Distillation mix on pseudo samples");
  run->add_option("--lr", rf.lr, "Adam learning rate");
  run->add_option("--top-k", rf.top_k, "Candidates for input sampling");
  run->add_option("--z-dim", rf.z_dim, "Latent size");
  run->add_option("--cycles", rf.cycles, "Beta annealing cycles per epoch");
  run->add_option("--epochs", rf.epochs, "Epochs per task");
  run->add_option("--batch-size", rf.batch_size, "Training batch size");
  run->add_option("--max-decode-len", rf.max_decode_len, "Cap on generated input length");
  run->add_flag("--no-latent", rf.no_latent, "Ablation: no CVAE, generate from the prefix alone");
  run->add_flag("--no-task-id", rf.no_task_id, "Ablation: task name replaced by 'current'");
  run->add_flag("--no-kd", rf.no_kd, "Ablation: no distillation on pseudo samples");
  run->add_flag("--joint", rf.joint, "Train once on the union of all tasks");
  run->add_flag("-f,--force", rf.force, "Replace an existing output directory");

  pcll::GenerateOptions go;
  std::string go_checkpoint, go_output;
  auto* gen = app.add_subcommand("generate", "Sample pseudo data for one task from a checkpoint");
  gen->add_option("checkpoint", go_checkpoint, "Checkpoint file")->required();
  gen->add_option("-t,--task", go.task, "Task name")->required();
  gen->add_option("-n,--count", go.count, "Generation attempts")->required();
  gen->add_option("-o,--output", go_output, "Dump path (line-delimited JSON)");
  gen->add_option("--top-k", go.top_k, "Candidates for input sampling");
  gen->add_option("--max-decode-len", go.max_decode_len, "Cap on generated input length");
  gen->add_option("--seed", go.seed, "Sampling seed");
  gen->add_flag("--no-latent", go.no_latent, "Decode from the prompt prefix without z");

  pcll::EvalOptions eo;
  std::string eo_checkpoint, eo_manifest, eo_output;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on every task's test split");
  ev->add_option("checkpoint", eo_checkpoint, "Checkpoint file")->required();
  ev->add_option("-m,--manifest", eo_manifest, "Stream manifest")->required();
  ev->add_option("-o,--output", eo_output, "CSV path");

  pcll::SyntheticSpec ss;
  std::string ss_dir, ss_kind = "intent";
  auto* syn = app.add_subcommand("gen-synthetic", "Write a synthetic stream as task files plus a manifest");
  syn->add_option("dir", ss_dir, "Output directory")->required();
  syn->add_option("--seed", ss.seed, "Generator seed");
  syn->add_option("--tasks", ss.n_tasks, "Number of tasks");
  syn->add_option("--per-task", ss.n_per_task, "Training samples per task");
  syn->add_option("--vocab-per-task", ss.vocab_size_per_task, "Content words per task");
  syn->add_option("--kind", ss_kind, "intent or slot");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto config = build_config(rf);
      pcll::cmd_run(config, rf.force, std::cout);
    } else if (*gen) {
      go.checkpoint = go_checkpoint;
      go.output = go_output;
      pcll::cmd_generate(go, std::cout);
    } else if (*ev) {
      eo.checkpoint = eo_checkpoint;
      eo.manifest = eo_manifest;
      eo.output = eo_output;
      pcll::cmd_eval(eo, std::cout);
    } else if (*syn) {
      ss.kind = pcll::parse_task_kind(ss_kind);
      const auto stream = pcll::gen_synthetic_stream(ss);
      std::filesystem::create_directories(ss_dir);
      pcll::Manifest m;
      for (const auto& t : stream) {
        const auto file = t.name + ".jsonl";
        pcll::save_task(t, std::filesystem::path(ss_dir) / file);
        m.tasks.push_back({t.name, file, t.kind});
      }
      pcll::save_manifest(m, std::filesystem::path(ss_dir) / "manifest.json");
      std::cout << "wrote " << stream.size() << " tasks to " << ss_dir << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
