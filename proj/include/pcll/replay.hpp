#pragma once

// The lifelong-learning loop: per-task training over a task stream, teacher
// snapshots, two-step pseudo-sample generation, replay mixing and the
// baseline strategies.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcll/data.hpp"
#include "pcll/losses.hpp"
#include "pcll/metrics.hpp"
#include "pcll/model.hpp"
#include "pcll/prompt.hpp"

namespace pcll {

enum class Strategy { pcll, finetune, lamol_token, er };
std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view text);

struct ReplayConfig {
  Strategy strategy = Strategy::pcll;
  float gamma = 0.2f;
  int top_k = 20;
  int max_decode_len = 96;  // cap on generated input tokens
  int max_label_len = 24;   // cap on greedily decoded output tokens
  float er_fraction = 0.01f;
  bool no_latent = false;
  bool no_task_id = false;
  bool no_kd = false;
  int epochs = 10;
  int batch_size = 16;
  float lr = 2e-3f;
  float clip_norm = 1.0f;
  int eval_batch = 64;
  std::uint64_t seed = 1;

  void validate() const;  // throws std::invalid_argument naming the field

  bool uses_cvae() const { return strategy == Strategy::pcll && !no_latent; }
  bool uses_kd() const { return strategy == Strategy::pcll && !no_kd; }
  bool generates() const { return strategy == Strategy::pcll || strategy == Strategy::lamol_token; }
};

// The prompt spec a strategy trains and evaluates with.
TaskSpec effective_spec(const TaskSpec& base, const ReplayConfig& config);

// Every word any strategy's prompts can emit, for vocabulary forcing.
std::vector<std::string> all_prompt_tokens(std::span<const TaskSpec> base_specs);

// ---------------------------------------------------------------- decoding

// Called once per sampled token with the full next-token distribution.
using DecodeObserver = std::function<void(std::span<const float> probs, int token)>;

struct DecodeResult {
  std::vector<int> tokens;  // generated tokens, terminal excluded
  int terminal = -1;        // stop or reserved token that ended decoding; -1 if max_new was reached
};

// Batched autoregressive continuation. Decoding of a sequence ends at
// stop_token, at any reserved token, or after max_new tokens. top_k == 0 is
// greedy (ties to the lowest id); otherwise sampling renormalized over the
// top_k most probable tokens. z, when given, is [prompts, z_dim] and is added
// to the first inject_rows positions of each sequence.
std::vector<DecodeResult> decode(const Model& model, std::span<const std::vector<int>> prompts, int max_new,
                                 int stop_token, int top_k, std::mt19937_64* rng, const Tensor* z = nullptr,
                                 int inject_rows = 0, const DecodeObserver* observer = nullptr);

enum class PseudoStatus { ok, overflow, special_token, empty_x, no_prefix, no_postfix, empty_y, bad_output };
std::string_view to_string(PseudoStatus s);
PseudoStatus parse_pseudo_status(std::string_view text);

struct PseudoInput {
  PseudoStatus status = PseudoStatus::ok;
  std::vector<std::string> x;
};

// Step 1: sample z from the prior of the task's prompt prefix (or skip it
// when use_latent is false) and decode inputs with top-k sampling from
// [BOS] prefix until the postfix's first token.
std::vector<PseudoInput> generate_pseudo_inputs(const Model& model, const TaskSpec& spec, const Vocab& vocab,
                                                int count, bool use_latent, int top_k, int max_decode_len,
                                                std::mt19937_64& rng, const DecodeObserver* observer = nullptr);

// Step 2: greedy output decoding after g(x), parsed back into a pseudo sample.
std::vector<ParseResult> label_pseudo_inputs(const Model& model, const TaskSpec& spec, const Vocab& vocab,
                                             std::span<const std::vector<std::string>> xs, int max_label_len,
                                             int batch = 64);

// Greedy predictions for real inputs; a failed parse yields an empty prediction.
std::vector<Sample> predict(const Model& model, const TaskSpec& spec, const Vocab& vocab,
                            std::span<const Sample> samples, int max_label_len, int batch = 64);

// Test-set score: intent accuracy or slot macro-F1, in percent.
double evaluate(const Model& model, const TaskSpec& spec, const Vocab& vocab, std::span<const Sample> test,
                int max_label_len, int batch = 64);

// ---------------------------------------------------------------- replay

struct ReplaySample {
  int task = 0;  // index in the stream
  Sample sample;
};

struct GenerationRecord {
  PseudoStatus status = PseudoStatus::ok;
  std::vector<std::string> x;
  std::optional<Sample> sample;
};

struct TaskGenerationLog {
  int task = 0;
  int requested = 0;
  int attempts = 0;
  int accepted = 0;
  std::map<PseudoStatus, int> rejects;
  std::vector<GenerationRecord> records;

  int shortfall() const { return requested - accepted; }
};

struct ReplayMix {
  std::vector<ReplaySample> samples;
  std::vector<TaskGenerationLog> logs;  // one per previous task
};

// ceil(gamma * n_train) split equally over n_prev tasks; the remainder goes
// to the earliest tasks.
std::vector<int> replay_quotas(int n_train, int n_prev, float gamma);

struct CallCounters {
  long cvae_losses = 0;
  long kd_losses = 0;
  long generations = 0;
  long teacher_forwards = 0;
};

struct StepLog {
  int task = 0;
  int epoch = 0;
  int step = 0;
  float beta = 0.0f;
  float loss = 0.0f;
  int n_real = 0;
  int n_pseudo = 0;
};

// Owns the model and optimizer state for one pass over a task stream.
class Learner {
 public:
  Learner(ModelConfig model_config, LossConfig loss_config, ReplayConfig replay_config, Vocab vocab,
          std::vector<TaskSpec> base_specs);

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const Vocab& vocab() const { return vocab_; }
  const ReplayConfig& replay_config() const { return replay_; }
  const LossConfig& loss_config() const { return loss_; }
  const TaskSpec& spec(int task) const { return specs_.at(static_cast<std::size_t>(task)); }
  const std::vector<TaskSpec>& specs() const { return specs_; }
  const CallCounters& counters() const { return counters_; }
  std::mt19937_64& rng() { return rng_; }

  // Frozen deep copy of the current parameters.
  Model snapshot_teacher() const;

  // Pseudo samples (or stored real samples for ER) for the tasks before t.
  // generator is the pre-task model used for sampling.
  ReplayMix build_replay_mix(int t, int n_train, const Model& generator);

  // Trains on the task's real samples plus the mix. teacher is required when
  // the mix holds pseudo samples and distillation is on.
  std::vector<StepLog> train_task(int t, std::span<const Sample> train, std::span<const ReplaySample> mix,
                                  const Model* teacher);

  // Mean loss of one batch without updating parameters (exposed for tests).
  Tensor batch_loss(std::span<const ReplaySample> batch, const Model* teacher, float beta);

  // ER memory: keeps floor(er_fraction * N) samples of the finished task.
  void remember(int t, std::span<const Sample> train);
  const std::map<int, std::vector<Sample>>& memory() const { return memory_; }

  double evaluate_task(int t, std::span<const Sample> test) const;

 private:
  ModelConfig model_config_;
  LossConfig loss_;
  ReplayConfig replay_;
  Vocab vocab_;
  std::vector<TaskSpec> specs_;
  Model model_;
  std::mt19937_64 rng_;
  CallCounters counters_;
  std::map<int, std::vector<Sample>> memory_;
};

// ---------------------------------------------------------------- stream

struct StreamOptions {
  std::filesystem::path output_dir;  // empty: no artifacts
  bool save_checkpoints = true;
  int min_count = 1;
  bool joint = false;  // train once on the union of all tasks
};

struct StreamResult {
  ScoreMatrix r;
  std::vector<std::string> task_names;
  std::vector<StepLog> loss_log;
  std::vector<std::vector<TaskGenerationLog>> generation;  // per task index in order
  std::vector<std::vector<std::string>> pseudo_inputs;     // accepted inputs over the whole stream
  CallCounters counters;
  std::uint64_t final_hash = 0;
};

// Vocabulary over the stream with every prompt token forced in.
Vocab stream_vocab(std::span<const TaskDataset> stream, std::span<const TaskSpec> base_specs, int min_count);

// Tasks in stream order; base_specs[i] belongs to stream[i].
StreamResult run_stream(std::span<const TaskDataset> stream, std::span<const TaskSpec> base_specs,
                        ModelConfig model_config, const LossConfig& loss_config, const ReplayConfig& replay_config,
                        const StreamOptions& options = {});

// ---------------------------------------------------------------- artifacts

struct ReportRow {
  std::string metric;
  double value = 0.0;
};

std::vector<ReportRow> stream_report(const StreamResult& result);
void write_report_csv(const std::filesystem::path& path, std::span<const ReportRow> rows);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);
void write_loss_log(const std::filesystem::path& path, std::span<const StepLog> log);

struct PseudoDump {
  std::string task;
  int requested = 0;
  int attempts = 0;
  int accepted = 0;
  std::map<PseudoStatus, int> rejects;
  double dist[4] = {0, 0, 0, 0};
  std::vector<GenerationRecord> records;
};

// First line: header object; then one line per attempt.
void write_pseudo_dump(const std::filesystem::path& path, const PseudoDump& dump, TaskKind kind);
PseudoDump read_pseudo_dump(const std::filesystem::path& path, TaskKind kind);
PseudoDump make_dump(const std::string& task, const TaskGenerationLog& log);

}  // namespace pcll
