#pragma once

// Experiment configuration and the run / generate / eval commands.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "pcll/losses.hpp"
#include "pcll/model.hpp"
#include "pcll/replay.hpp"

namespace pcll {

struct ExperimentConfig {
  std::filesystem::path manifest;          // task files; empty means use `synthetic`
  std::optional<SyntheticSpec> synthetic;  // used when no manifest is given
  std::filesystem::path output_dir = "runs/default";
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::vector<int>> orders;  // permutations of task indices; empty means manifest order
  ReplayConfig replay;
  LossConfig loss;
  ModelConfig model;
  int min_count = 1;
  int intent_template = 1;        // preset 1..5
  std::string intent_template_text;  // overrides the preset when set
  std::string slot_template_text;
  bool joint = false;

  // Throws std::invalid_argument with a "section.field: reason" message.
  void validate(int n_tasks = -1) const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Output directory after applying the PCLL_OUTPUT_ROOT override to relative paths.
std::filesystem::path resolve_output_dir(const std::filesystem::path& dir);

// Base task specs for a stream under the config's templates.
std::vector<TaskSpec> task_specs(const std::vector<TaskDataset>& stream, const ExperimentConfig& config);

struct RunSummary {
  int order = 0;
  std::uint64_t seed = 0;
  double score = 0.0;
  double lca = 0.0;
  std::filesystem::path dir;
};

// Every (order, seed) pair under output_dir/order_k/seed_s plus aggregate.csv.
// Refuses a non-empty output directory unless force is set.
std::vector<RunSummary> cmd_run(const ExperimentConfig& config, bool force, std::ostream& log);

struct GenerateOptions {
  std::filesystem::path checkpoint;
  std::string task;
  int count = 0;
  int top_k = 20;
  int max_decode_len = 96;
  int max_label_len = 24;
  bool no_latent = false;
  std::uint64_t seed = 1;
  std::filesystem::path output;  // dump path
};

PseudoDump cmd_generate(const GenerateOptions& options, std::ostream& log);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::filesystem::path output;  // CSV path; empty prints only
  int max_label_len = 24;
};

struct EvalRow {
  std::string task;
  double score = 0.0;
};

std::vector<EvalRow> cmd_eval(const EvalOptions& options, std::ostream& log);

}  // namespace pcll
