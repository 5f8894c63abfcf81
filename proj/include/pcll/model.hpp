#pragma once

// Unidirectional transformer LM shared by the task solver and the CVAE
// decoder, plus the CVAE heads: attention-average pooling, the prior and
// recognition MLPs, and the latent projection added to prompt embeddings.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcll/data.hpp"
#include "pcll/prompt.hpp"
#include "pcll/tensor.hpp"

namespace pcll {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int d_ff = 256;
  int context_len = 128;
  int vocab_size = 0;
  int z_dim = 16;
  int mlp_hidden = 32;
  // Add z to every position instead of only [BOS] and the prompt prefix.
  bool inject_all_positions = false;

  void validate() const;  // throws std::invalid_argument naming the field
  bool operator==(const ModelConfig&) const = default;
};

// Diagonal Gaussian over z; both tensors are [batch, z_dim].
struct GaussianDiag {
  Tensor mu;
  Tensor logvar;
};

inline constexpr float kLogvarMin = -10.0f;
inline constexpr float kLogvarMax = 10.0f;

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [1, out]; undefined for bias-free maps

  Tensor operator()(const Tensor& x) const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  Tensor operator()(const Tensor& x) const;
};

struct Block {
  LayerNormParams ln1;
  Linear qkv;
  Linear proj;
  LayerNormParams ln2;
  Linear fc;
  Linear fc_out;
};

// Two-layer MLP emitting (mu, logvar).
struct GaussianMlp {
  Linear hidden;
  Linear out;

  GaussianDiag operator()(const Tensor& x) const;
};

// Several token sequences packed along the row axis.
struct PackedBatch {
  std::vector<int> ids;
  std::vector<int> offsets{0};
  std::vector<int> inject_len;  // leading rows of each sequence that receive z

  void add(std::span<const int> seq, int inject_rows = 0);
  int n_seq() const { return static_cast<int>(offsets.size()) - 1; }
  int n_tokens() const { return static_cast<int>(ids.size()); }
  int length(int s) const { return offsets[static_cast<std::size_t>(s) + 1] - offsets[static_cast<std::size_t>(s)]; }
};

struct LmOutput {
  Tensor hidden;  // [N, d_model], after the final layer norm
  Tensor logits;  // [N, vocab]
};

// Rows [begin, end) of a packed hidden-state matrix.
struct RowSpan {
  int begin = 0;
  int end = 0;
};

enum class PoolQuery { prefix, full };

// Keys and values of one sequence for incremental inference.
struct KvCache {
  std::vector<std::vector<float>> kv;  // per layer, [len, 2 * d_model]: k then v
  std::vector<float> z_emb;            // projected z, empty when none
  int inject_rows = 0;
  int len = 0;
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // z, when given, is [n_seq, z_dim].
  LmOutput forward(const PackedBatch& batch, const Tensor* z = nullptr) const;

  // Single sequence; inject_rows leading positions receive z.
  Tensor lm_forward(std::span<const int> ids, const Tensor* z = nullptr, int inject_rows = 0) const;

  // Incremental inference without autograd; matches forward() bit for bit.
  // z, when non-empty, has z_dim entries and is added to the first
  // inject_rows positions.
  KvCache start_cache(std::span<const float> z = {}, int inject_rows = 0) const;
  // Appends tokens and returns the logits row of the last one.
  std::vector<float> extend(KvCache& cache, std::span<const int> tokens) const;

  // One pooled row per span: [spans, d_model].
  Tensor pool(const Tensor& hidden, std::span<const RowSpan> spans, PoolQuery query) const;

  GaussianDiag prior_forward(const Tensor& pooled_prefix) const;
  GaussianDiag recognition_forward(const Tensor& pooled_full) const;

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::size_t parameter_count() const;

  // Deep copy with gradients disabled.
  Model frozen_copy() const;

  // FNV-1a over all parameter bytes.
  std::uint64_t hash() const;

  // Direct parameter access (tests and checkpoint code).
  Tensor tok_emb;
  Tensor pos_emb;
  std::vector<Block> blocks;
  LayerNormParams ln_f;
  Linear lm_head;
  Linear z_proj;
  Tensor prefix_query;  // [1, d_model]
  Tensor full_query;    // [1, d_model]
  GaussianMlp prior;
  GaussianMlp recognition;

 private:
  ModelConfig config_;
};

// softmax over the span of (q . h_i / sqrt(d)); returns [1, d] = sum_i w_i h_i.
Tensor attention_average_pool(const Tensor& span_hidden, const Tensor& query);
// The pooling weights alone, [1, span].
Tensor attention_pool_weights(const Tensor& span_hidden, const Tensor& query);

// z = mu + exp(0.5 * logvar) * noise
Tensor reparameterize(const GaussianDiag& g, const Tensor& noise);

// Closed-form KL(q || p) per row: [batch, 1].
Tensor kl_diag_gauss(const GaussianDiag& q, const GaussianDiag& p);

// ---------------------------------------------------------------- checkpoints

struct LoadedCheckpoint {
  Model model;
  Vocab vocab;
  std::vector<TaskSpec> tasks;  // tasks learned so far, in order
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                     std::span<const TaskSpec> tasks);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
// Loads parameters into an existing model; a config mismatch is an error.
void load_parameters(const std::filesystem::path& path, Model& model);

}  // namespace pcll
