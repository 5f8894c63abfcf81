#pragma once

// Datasets, the shared word-level vocabulary, and the synthetic task stream.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pcll {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { intent, slot };
enum class Provenance { real, pseudo };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);
std::string_view to_string(Provenance p);

struct SlotPair {
  std::string slot;
  std::string value;
  bool operator==(const SlotPair&) const = default;
  auto operator<=>(const SlotPair&) const = default;
};

struct Sample {
  std::vector<std::string> utterance;  // lowercased word tokens
  std::string intent;                  // intent tasks
  std::vector<SlotPair> slots;         // slot tasks, annotation order
  Provenance provenance = Provenance::real;

  bool operator==(const Sample&) const = default;
};

struct TaskDataset {
  std::string name;
  TaskKind kind = TaskKind::intent;
  std::vector<Sample> train;
  std::vector<Sample> valid;
  std::vector<Sample> test;

  std::size_t n_train() const { return train.size(); }
};

// Lowercases and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);
std::string join(std::span<const std::string> tokens, std::string_view sep = " ");
// Lowercase with runs of whitespace collapsed to single spaces.
std::string normalize_text(std::string_view text);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr std::string_view kReserved[4] = {"[PAD]", "[BOS]", "[EOS]", "[UNK]"};

  Vocab();
  // tokens must start with the four reserved tokens and be unique.
  static Vocab from_tokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(std::string_view token) const;
  int id(std::string_view token) const;  // kUnk when absent
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::span<const std::string> words) const;
  std::vector<std::string> decode(std::span<const int> ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

// Words with count >= min_count across all splits of all datasets, plus every
// forced token regardless of count. Output labels are always forced.
Vocab build_vocab(std::span<const TaskDataset> datasets, int min_count,
                  std::span<const std::string> forced_tokens = {});

// Line-delimited JSON records: {"utterance": ..., "intent": ...} or
// {"utterance": ..., "slots": [{"slot": ..., "value": ...}]}, each with an
// optional "split" of train (default), valid or test.
TaskDataset load_task(const std::filesystem::path& path, TaskKind kind, std::string name = {});
void save_task(const TaskDataset& task, const std::filesystem::path& path);

std::string sample_to_json_line(const Sample& sample, TaskKind kind, std::string_view split = {});

struct ManifestEntry {
  std::string name;
  std::filesystem::path path;
  TaskKind kind = TaskKind::intent;
};

struct SyntheticSpec {
  std::uint64_t seed = 7;
  int n_tasks = 3;
  int n_per_task = 300;
  int vocab_size_per_task = 20;
  TaskKind kind = TaskKind::intent;
};

// A stream manifest: explicit task files, or a synthetic stream description.
struct Manifest {
  std::vector<ManifestEntry> tasks;
  std::vector<SyntheticSpec> synthetic;  // zero or one entry
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
std::vector<TaskDataset> load_stream(const Manifest& manifest);

// Deterministic per seed. Each task has its own content words and its own
// label set; utterances are 3 to 8 words built from content and shared filler
// words. Test/valid sizes are n_per_task/4 and n_per_task/10 (at least 10 / 1).
std::vector<TaskDataset> gen_synthetic_stream(std::uint64_t seed, int n_tasks, int n_per_task,
                                              int vocab_size_per_task, TaskKind kind = TaskKind::intent);
std::vector<TaskDataset> gen_synthetic_stream(const SyntheticSpec& spec);

}  // namespace pcll
