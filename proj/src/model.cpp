#include "pcll/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"

#include "pcll/kernels.hpp"
#include "pcll/ops.hpp"

namespace pcll {

using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("model." + field + ": " + why);
  };
  if (n_layers < 1) fail("n_layers", "must be >= 1");
  if (n_heads < 1) fail("n_heads", "must be >= 1");
  if (d_model < 1) fail("d_model", "must be >= 1");
  if (d_model % n_heads != 0) fail("d_model", "must be divisible by n_heads");
  if (d_ff < 1) fail("d_ff", "must be >= 1");
  if (context_len < 2) fail("context_len", "must be >= 2");
  if (vocab_size < 5) fail("vocab_size", "must be >= 5");
  if (z_dim < 1) fail("z_dim", "must be > 0");
  if (mlp_hidden < 1) fail("mlp_hidden", "must be > 0");
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ops::matmul(x, weight);
  return bias.defined() ? ops::add(y, bias) : y;
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, 1e-5f); }

GaussianDiag GaussianMlp::operator()(const Tensor& x) const {
  const Tensor h = ops::tanh(hidden(x));
  const Tensor o = out(h);
  const int z = o.dim(1) / 2;
  return {ops::slice_cols(o, 0, z), ops::clamp(ops::slice_cols(o, z, 2 * z), kLogvarMin, kLogvarMax)};
}

void PackedBatch::add(std::span<const int> seq, int inject_rows) {
  if (seq.empty()) throw std::invalid_argument("PackedBatch: empty sequence");
  ids.insert(ids.end(), seq.begin(), seq.end());
  offsets.push_back(static_cast<int>(ids.size()));
  inject_len.push_back(inject_rows);
}

namespace {

Tensor normal(std::mt19937_64& rng, Shape shape, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear make_linear(std::mt19937_64& rng, int in, int out, bool bias = true, bool zero_weight = false) {
  Linear l;
  l.weight = zero_weight ? Tensor::zeros({in, out}, true) : normal(rng, {in, out}, 0.02f);
  if (bias) l.bias = Tensor::zeros({1, out}, true);
  return l;
}

LayerNormParams make_ln(int d) { return {Tensor::full({1, d}, 1.0f, true), Tensor::zeros({1, d}, true)}; }

GaussianMlp make_mlp(std::mt19937_64& rng, int in, int hidden, int z) {
  return {make_linear(rng, in, hidden), make_linear(rng, hidden, 2 * z, true, /*zero_weight=*/true)};
}

Tensor deep_copy(const Tensor& t) {
  if (!t.defined()) return t;
  return t.detach();
}

Linear copy(const Linear& l) { return {deep_copy(l.weight), deep_copy(l.bias)}; }
LayerNormParams copy(const LayerNormParams& l) { return {deep_copy(l.gamma), deep_copy(l.beta)}; }
GaussianMlp copy(const GaussianMlp& m) { return {copy(m.hidden), copy(m.out)}; }

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.d_model;
  tok_emb = normal(rng, {config_.vocab_size, d}, 0.02f);
  pos_emb = normal(rng, {config_.context_len, d}, 0.02f);
  for (int l = 0; l < config_.n_layers; ++l) {
    Block b;
    b.ln1 = make_ln(d);
    b.qkv = make_linear(rng, d, 3 * d);
    b.proj = make_linear(rng, d, d);
    b.ln2 = make_ln(d);
    b.fc = make_linear(rng, d, config_.d_ff);
    b.fc_out = make_linear(rng, config_.d_ff, d);
    blocks.push_back(std::move(b));
  }
  ln_f = make_ln(d);
  lm_head = make_linear(rng, d, config_.vocab_size, /*bias=*/false);
  z_proj = make_linear(rng, config_.z_dim, d, /*bias=*/false);
  prefix_query = normal(rng, {1, d}, 0.02f);
  full_query = normal(rng, {1, d}, 0.02f);
  prior = make_mlp(rng, d, config_.mlp_hidden, config_.z_dim);
  recognition = make_mlp(rng, d, config_.mlp_hidden, config_.z_dim);
}

LmOutput Model::forward(const PackedBatch& batch, const Tensor* z) const {
  const int n = batch.n_tokens();
  if (n == 0) throw std::invalid_argument("Model::forward: empty batch");
  std::vector<int> positions(static_cast<std::size_t>(n));
  for (int s = 0; s < batch.n_seq(); ++s) {
    const int len = batch.length(s);
    if (len > config_.context_len)
      throw std::invalid_argument("Model::forward: sequence of length " + std::to_string(len) +
                                  " exceeds context_len " + std::to_string(config_.context_len));
    for (int i = 0; i < len; ++i) positions[static_cast<std::size_t>(batch.offsets[static_cast<std::size_t>(s)] + i)] = i;
  }
  Tensor x = ops::add(ops::embedding(tok_emb, batch.ids), ops::gather_rows(pos_emb, positions));
  if (z) {
    if (z->rank() != 2 || z->dim(0) != batch.n_seq() || z->dim(1) != config_.z_dim)
      throw ShapeError("Model::forward(z)", z->shape(), Shape{batch.n_seq(), config_.z_dim});
    std::vector<int> rows(static_cast<std::size_t>(n), -1);
    for (int s = 0; s < batch.n_seq(); ++s) {
      const int len = batch.length(s);
      const int inj = config_.inject_all_positions ? len : std::min(len, batch.inject_len[static_cast<std::size_t>(s)]);
      for (int i = 0; i < inj; ++i) rows[static_cast<std::size_t>(batch.offsets[static_cast<std::size_t>(s)] + i)] = s;
    }
    x = ops::add(x, ops::gather_rows(z_proj(*z), rows));
  }
  for (const auto& b : blocks) {
    const Tensor a = ops::causal_attention(b.qkv(b.ln1(x)), batch.offsets, config_.n_heads);
    x = ops::add(x, b.proj(a));
    x = ops::add(x, b.fc_out(ops::gelu(b.fc(b.ln2(x)))));
  }
  LmOutput out;
  out.hidden = ln_f(x);
  out.logits = lm_head(out.hidden);
  return out;
}

KvCache Model::start_cache(std::span<const float> z, int inject_rows) const {
  KvCache cache;
  cache.kv.resize(blocks.size());
  cache.inject_rows = inject_rows;
  if (!z.empty()) {
    if (static_cast<int>(z.size()) != config_.z_dim)
      throw ShapeError("Model::start_cache(z)", Shape{static_cast<int>(z.size())}, Shape{config_.z_dim});
    cache.z_emb.assign(static_cast<std::size_t>(config_.d_model), 0.0f);
    kernels::matmul_nn(1, config_.d_model, config_.z_dim, z.data(), z_proj.weight.data().data(), cache.z_emb.data(),
                       false);
    if (z_proj.bias.defined())
      for (int c = 0; c < config_.d_model; ++c) cache.z_emb[static_cast<std::size_t>(c)] += z_proj.bias.data()[c];
  }
  return cache;
}

namespace {

// y = x W (+ b), the row-wise counterpart of Linear::operator().
void linear_rows(const Linear& l, int m, const float* x, float* y) {
  const int in = l.weight.dim(0);
  const int out = l.weight.dim(1);
  kernels::matmul_nn(m, out, in, x, l.weight.data().data(), y, false);
  if (!l.bias.defined()) return;
  const auto b = l.bias.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < out; ++j) y[static_cast<std::size_t>(i) * out + j] += b[static_cast<std::size_t>(j)];
}

void layer_norm_rows(const LayerNormParams& ln, int m, int d, const float* x, float* y) {
  std::vector<float> xhat(static_cast<std::size_t>(m) * d), inv_std(static_cast<std::size_t>(m));
  kernels::layer_norm_rows(m, d, x, ln.gamma.data().data(), ln.beta.data().data(), 1e-5f, xhat.data(), inv_std.data(),
                           y);
}

float gelu_value(float x) {
  constexpr float kC = 0.7978845608028654f;
  constexpr float kA = 0.044715f;
  return 0.5f * x * (1.0f + std::tanh(kC * (x + kA * x * x * x)));
}

}  // namespace

std::vector<float> Model::extend(KvCache& cache, std::span<const int> tokens) const {
  const int m = static_cast<int>(tokens.size());
  const int d = config_.d_model;
  if (m == 0) throw std::invalid_argument("Model::extend: no tokens");
  if (cache.kv.size() != blocks.size()) throw std::invalid_argument("Model::extend: cache from another model");
  if (cache.len + m > config_.context_len)
    throw std::invalid_argument("Model::extend: sequence of length " + std::to_string(cache.len + m) +
                                " exceeds context_len " + std::to_string(config_.context_len));
  const std::size_t md = static_cast<std::size_t>(m) * d;
  std::vector<float> x(md);
  const auto te = tok_emb.data();
  const auto pe = pos_emb.data();
  for (int i = 0; i < m; ++i) {
    const int tok = tokens[static_cast<std::size_t>(i)];
    if (tok < 0 || tok >= config_.vocab_size) throw std::out_of_range("Model::extend: token id out of range");
    const int pos = cache.len + i;
    const bool inject = !cache.z_emb.empty() && (config_.inject_all_positions || pos < cache.inject_rows);
    for (int c = 0; c < d; ++c) {
      float v = te[static_cast<std::size_t>(tok) * d + c] + pe[static_cast<std::size_t>(pos) * d + c];
      if (inject) v += cache.z_emb[static_cast<std::size_t>(c)];
      x[static_cast<std::size_t>(i) * d + c] = v;
    }
  }
  const int hd = d / config_.n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> h(md), qkv(md * 3), att(md), tmp(md);
  std::vector<float> ff(static_cast<std::size_t>(m) * config_.d_ff);
  std::vector<float> p;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const Block& b = blocks[l];
    auto& kv = cache.kv[l];
    layer_norm_rows(b.ln1, m, d, x.data(), h.data());
    linear_rows(b.qkv, m, h.data(), qkv.data());
    for (int i = 0; i < m; ++i) {
      const float* row = qkv.data() + static_cast<std::size_t>(i) * 3 * d;
      kv.insert(kv.end(), row + d, row + 3 * d);
    }
    // same loop order as the causal attention kernel
    for (int i = 0; i < m; ++i) {
      const int n = cache.len + i + 1;
      p.resize(static_cast<std::size_t>(n));
      for (int hh = 0; hh < config_.n_heads; ++hh) {
        const float* qi = qkv.data() + static_cast<std::size_t>(i) * 3 * d + hh * hd;
        float mx = -INFINITY;
        for (int j = 0; j < n; ++j) {
          const float* kj = kv.data() + static_cast<std::size_t>(j) * 2 * d + hh * hd;
          float dot = 0.0f;
          for (int c = 0; c < hd; ++c) dot += qi[c] * kj[c];
          p[static_cast<std::size_t>(j)] = dot * scale;
          mx = std::max(mx, p[static_cast<std::size_t>(j)]);
        }
        float sum = 0.0f;
        for (int j = 0; j < n; ++j) {
          p[static_cast<std::size_t>(j)] = std::exp(p[static_cast<std::size_t>(j)] - mx);
          sum += p[static_cast<std::size_t>(j)];
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < n; ++j) p[static_cast<std::size_t>(j)] *= inv;
        float* oi = att.data() + static_cast<std::size_t>(i) * d + hh * hd;
        std::fill(oi, oi + hd, 0.0f);
        for (int j = 0; j < n; ++j) {
          const float* vj = kv.data() + static_cast<std::size_t>(j) * 2 * d + d + hh * hd;
          for (int c = 0; c < hd; ++c) oi[c] += p[static_cast<std::size_t>(j)] * vj[c];
        }
      }
    }
    linear_rows(b.proj, m, att.data(), tmp.data());
    for (std::size_t k = 0; k < md; ++k) x[k] = x[k] + tmp[k];
    layer_norm_rows(b.ln2, m, d, x.data(), h.data());
    linear_rows(b.fc, m, h.data(), ff.data());
    for (auto& v : ff) v = gelu_value(v);
    linear_rows(b.fc_out, m, ff.data(), tmp.data());
    for (std::size_t k = 0; k < md; ++k) x[k] = x[k] + tmp[k];
  }
  cache.len += m;
  std::vector<float> last(static_cast<std::size_t>(d));
  layer_norm_rows(ln_f, 1, d, x.data() + md - d, last.data());
  std::vector<float> logits(static_cast<std::size_t>(config_.vocab_size));
  linear_rows(lm_head, 1, last.data(), logits.data());
  return logits;
}

Tensor Model::lm_forward(std::span<const int> ids, const Tensor* z, int inject_rows) const {
  PackedBatch b;
  b.add(ids, inject_rows);
  return forward(b, z).logits;
}

Tensor attention_pool_weights(const Tensor& span_hidden, const Tensor& query) {
  if (span_hidden.rank() != 2 || span_hidden.dim(0) == 0)
    throw ShapeError("attention_average_pool", "empty span");
  const float s = 1.0f / std::sqrt(static_cast<float>(span_hidden.dim(1)));
  return ops::softmax(ops::scale(ops::matmul(query, ops::transpose(span_hidden)), s));
}

Tensor attention_average_pool(const Tensor& span_hidden, const Tensor& query) {
  return ops::matmul(attention_pool_weights(span_hidden, query), span_hidden);
}

Tensor Model::pool(const Tensor& hidden, std::span<const RowSpan> spans, PoolQuery query) const {
  if (spans.empty()) throw ShapeError("Model::pool", "no spans");
  const Tensor& q = query == PoolQuery::prefix ? prefix_query : full_query;
  std::vector<Tensor> rows;
  rows.reserve(spans.size());
  for (const auto& sp : spans) {
    if (sp.end <= sp.begin) throw ShapeError("attention_average_pool", "empty span");
    rows.push_back(attention_average_pool(ops::slice_rows(hidden, sp.begin, sp.end), q));
  }
  return rows.size() == 1 ? rows.front() : ops::concat(rows, 0);
}

GaussianDiag Model::prior_forward(const Tensor& pooled_prefix) const { return prior(pooled_prefix); }
GaussianDiag Model::recognition_forward(const Tensor& pooled_full) const { return recognition(pooled_full); }

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto lin = [&](const std::string& name, const Linear& l) {
    out.emplace_back(name + ".weight", l.weight);
    if (l.bias.defined()) out.emplace_back(name + ".bias", l.bias);
  };
  auto ln = [&](const std::string& name, const LayerNormParams& l) {
    out.emplace_back(name + ".gamma", l.gamma);
    out.emplace_back(name + ".beta", l.beta);
  };
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("pos_emb", pos_emb);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i);
    ln(p + ".ln1", blocks[i].ln1);
    lin(p + ".qkv", blocks[i].qkv);
    lin(p + ".proj", blocks[i].proj);
    ln(p + ".ln2", blocks[i].ln2);
    lin(p + ".fc", blocks[i].fc);
    lin(p + ".fc_out", blocks[i].fc_out);
  }
  ln("ln_f", ln_f);
  lin("lm_head", lm_head);
  lin("z_proj", z_proj);
  out.emplace_back("prefix_query", prefix_query);
  out.emplace_back("full_query", full_query);
  lin("prior.hidden", prior.hidden);
  lin("prior.out", prior.out);
  lin("recognition.hidden", recognition.hidden);
  lin("recognition.out", recognition.out);
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

Model Model::frozen_copy() const {
  Model m = *this;
  m.tok_emb = deep_copy(tok_emb);
  m.pos_emb = deep_copy(pos_emb);
  for (auto& b : m.blocks) {
    b.ln1 = copy(b.ln1);
    b.qkv = copy(b.qkv);
    b.proj = copy(b.proj);
    b.ln2 = copy(b.ln2);
    b.fc = copy(b.fc);
    b.fc_out = copy(b.fc_out);
  }
  m.ln_f = copy(ln_f);
  m.lm_head = copy(lm_head);
  m.z_proj = copy(z_proj);
  m.prefix_query = deep_copy(prefix_query);
  m.full_query = deep_copy(full_query);
  m.prior = copy(prior);
  m.recognition = copy(recognition);
  return m;
}

std::uint64_t Model::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : parameters()) {
    const auto d = t.data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(d.data());
    for (std::size_t i = 0; i < d.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

Tensor reparameterize(const GaussianDiag& g, const Tensor& noise) {
  if (noise.shape() != g.mu.shape()) throw ShapeError("reparameterize", g.mu.shape(), noise.shape());
  return ops::add(g.mu, ops::mul(ops::exp(ops::scale(g.logvar, 0.5f)), noise));
}

Tensor kl_diag_gauss(const GaussianDiag& q, const GaussianDiag& p) {
  if (q.mu.shape() != p.mu.shape()) throw ShapeError("kl_diag_gauss", q.mu.shape(), p.mu.shape());
  // 0.5 * sum(lv_p - lv_q + (exp(lv_q) + (mu_q - mu_p)^2) * exp(-lv_p) - 1)
  const Tensor diff = ops::sub(q.mu, p.mu);
  const Tensor num = ops::add(ops::exp(q.logvar), ops::mul(diff, diff));
  const Tensor ratio = ops::mul(num, ops::exp(ops::scale(p.logvar, -1.0f)));
  const Tensor terms = ops::add_scalar(ops::add(ops::sub(p.logvar, q.logvar), ratio), -1.0f);
  return ops::scale(ops::sum(terms, 1), 0.5f);
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'P', 'C', 'L', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},   {"d_model", c.d_model},
          {"d_ff", c.d_ff},             {"context_len", c.context_len}, {"vocab_size", c.vocab_size},
          {"z_dim", c.z_dim},           {"mlp_hidden", c.mlp_hidden},
          {"inject_all_positions", c.inject_all_positions}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.d_model = j.at("d_model");
  c.d_ff = j.at("d_ff");
  c.context_len = j.at("context_len");
  c.vocab_size = j.at("vocab_size");
  c.z_dim = j.at("z_dim");
  c.mlp_hidden = j.at("mlp_hidden");
  c.inject_all_positions = j.at("inject_all_positions");
  return c;
}

struct RawCheckpoint {
  json header;
  std::vector<float> values;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
  if (version != kVersion)
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  RawCheckpoint raw;
  raw.header = json::parse(text);
  const std::size_t count = raw.header.at("value_count");
  raw.values.resize(count);
  in.read(reinterpret_cast<char*>(raw.values.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw std::runtime_error(path.string() + ": truncated checkpoint");
  return raw;
}

void apply_values(const RawCheckpoint& raw, Model& model, const std::string& where) {
  const auto named = model.named_parameters();
  const auto& entries = raw.header.at("tensors");
  if (entries.size() != named.size()) throw std::runtime_error(where + ": parameter count mismatch");
  std::size_t at = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto [name, t] = named[i];
    if (entries[i].at("name") != name) throw std::runtime_error(where + ": expected tensor " + name);
    const Shape shape = entries[i].at("shape").get<Shape>();
    if (shape != t.shape()) throw ShapeError(where + " " + name, t.shape(), shape);
    std::copy_n(raw.values.begin() + static_cast<std::ptrdiff_t>(at), t.numel(), t.data().begin());
    at += t.numel();
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                     std::span<const TaskSpec> tasks) {
  json header;
  header["config"] = config_to_json(model.config());
  header["vocab"] = vocab.tokens();
  header["tasks"] = json::array();
  for (const auto& t : tasks)
    header["tasks"].push_back({{"name", t.name},
                               {"kind", std::string(to_string(t.kind))},
                               {"template", t.template_text},
                               {"prefix", t.prefix},
                               {"postfix", t.postfix}});
  header["tensors"] = json::array();
  std::size_t count = 0;
  for (const auto& [name, t] : model.named_parameters()) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
    count += t.numel();
  }
  header["value_count"] = count;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(len));
  for (const auto& t : model.parameters())
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.data().size_bytes()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path);
  const ModelConfig config = config_from_json(raw.header.at("config"));
  LoadedCheckpoint out{Model(config, 0), Vocab::from_tokens(raw.header.at("vocab").get<std::vector<std::string>>()), {}};
  if (out.vocab.size() != config.vocab_size) throw std::runtime_error(path.string() + ": vocab size mismatch");
  for (const auto& t : raw.header.at("tasks")) {
    TaskSpec s;
    s.name = t.at("name");
    s.kind = parse_task_kind(t.at("kind").get<std::string>());
    s.template_text = t.at("template");
    s.prefix = t.at("prefix").get<std::vector<std::string>>();
    s.postfix = t.at("postfix").get<std::vector<std::string>>();
    out.tasks.push_back(std::move(s));
  }
  apply_values(raw, out.model, path.string());
  return out;
}

void load_parameters(const std::filesystem::path& path, Model& model) {
  const RawCheckpoint raw = read_raw(path);
  const ModelConfig config = config_from_json(raw.header.at("config"));
  if (!(config == model.config())) throw std::runtime_error(path.string() + ": model config does not match checkpoint");
  apply_values(raw, model, path.string());
}

}  // namespace pcll
