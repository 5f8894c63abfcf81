#include "pcll/replay.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "pcll/kernels.hpp"
#include "pcll/ops.hpp"
#include "pcll/optim.hpp"

namespace pcll {

using json = nlohmann::json;

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::pcll: return "pcll";
    case Strategy::finetune: return "finetune";
    case Strategy::lamol_token: return "lamol_token";
    case Strategy::er: return "er";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view text) {
  for (Strategy s : {Strategy::pcll, Strategy::finetune, Strategy::lamol_token, Strategy::er})
    if (to_string(s) == text) return s;
  throw std::invalid_argument("strategy: unknown value '" + std::string(text) +
                              "' (expected pcll, finetune, lamol_token or er)");
}

void ReplayConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("replay." + field + ": " + why);
  };
  if (!(gamma > 0.0f && gamma <= 1.0f)) fail("gamma", "must be in (0, 1]");
  if (top_k < 1) fail("top_k", "must be >= 1");
  if (max_decode_len < 1) fail("max_decode_len", "must be >= 1");
  if (max_label_len < 1) fail("max_label_len", "must be >= 1");
  if (!(er_fraction > 0.0f && er_fraction < 1.0f)) fail("er_fraction", "must be in (0, 1)");
  if (epochs < 0) fail("epochs", "must be >= 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(lr > 0.0f)) fail("lr", "must be > 0");
  if (!(clip_norm > 0.0f)) fail("clip_norm", "must be > 0");
  if (eval_batch < 1) fail("eval_batch", "must be >= 1");
}

TaskSpec effective_spec(const TaskSpec& base, const ReplayConfig& config) {
  if (config.strategy == Strategy::lamol_token) return make_token_spec(base.name, base.kind);
  if (config.no_task_id) return without_task_id(base);
  return base;
}

std::vector<std::string> all_prompt_tokens(std::span<const TaskSpec> base_specs) {
  std::vector<TaskSpec> specs(base_specs.begin(), base_specs.end());
  for (const auto& s : base_specs) {
    specs.push_back(without_task_id(s));
    specs.push_back(make_token_spec(s.name, s.kind));
  }
  return prompt_tokens(specs);
}

// ---------------------------------------------------------------- decoding

namespace {

bool is_reserved(int id) { return id >= 0 && id < 4; }

// Indices of the k largest probabilities, ties to the lower id.
std::vector<int> top_k_indices(std::span<const float> probs, int k) {
  std::vector<int> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min<int>(k, static_cast<int>(idx.size()));
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)] ||
           (probs[static_cast<std::size_t>(a)] == probs[static_cast<std::size_t>(b)] && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

int sample_top_k(std::span<const float> probs, int k, std::mt19937_64& rng) {
  const auto idx = top_k_indices(probs, k);
  double mass = 0.0;
  for (int i : idx) mass += probs[static_cast<std::size_t>(i)];
  const double u = std::uniform_real_distribution<double>(0.0, mass)(rng);
  double acc = 0.0;
  for (int i : idx) {
    acc += probs[static_cast<std::size_t>(i)];
    if (u < acc) return i;
  }
  return idx.back();
}

Tensor standard_normal(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = nd(rng);
  return Tensor::from({rows, cols}, std::move(v));
}

Tensor select_rows(const Tensor& t, std::span<const int> rows) {
  const int cols = t.dim(1);
  std::vector<float> v;
  v.reserve(rows.size() * static_cast<std::size_t>(cols));
  const auto d = t.data();
  for (int r : rows) v.insert(v.end(), d.begin() + static_cast<std::ptrdiff_t>(r) * cols,
                              d.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols);
  return Tensor::from({static_cast<int>(rows.size()), cols}, std::move(v));
}

}  // namespace

std::vector<DecodeResult> decode(const Model& model, std::span<const std::vector<int>> prompts, int max_new,
                                 int stop_token, int top_k, std::mt19937_64* rng, const Tensor* z, int inject_rows,
                                 const DecodeObserver* observer) {
  if (top_k > 0 && !rng) throw std::invalid_argument("decode: sampling needs an rng");
  const int vocab = model.config().vocab_size;
  const int ctx = model.config().context_len;
  const int z_dim = model.config().z_dim;
  if (z && (z->rank() != 2 || z->dim(0) != static_cast<int>(prompts.size()) || z->dim(1) != z_dim))
    throw ShapeError("decode(z)", z->shape(), Shape{static_cast<int>(prompts.size()), z_dim});
  std::vector<DecodeResult> out(prompts.size());
  std::vector<KvCache> caches;
  std::vector<std::vector<float>> logits;
  std::vector<int> active;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].empty()) throw std::invalid_argument("decode: empty prompt");
    std::span<const float> zi;
    if (z) zi = z->data().subspan(i * static_cast<std::size_t>(z_dim), static_cast<std::size_t>(z_dim));
    caches.push_back(model.start_cache(zi, inject_rows));
    logits.push_back(model.extend(caches.back(), prompts[i]));
    if (static_cast<int>(prompts[i].size()) < ctx) active.push_back(static_cast<int>(i));
  }
  std::vector<float> probs(static_cast<std::size_t>(vocab));
  for (int step = 0; step < max_new && !active.empty(); ++step) {
    std::vector<int> still;
    for (int i : active) {
      const auto& lr = logits[static_cast<std::size_t>(i)];
      int token;
      if (top_k == 0) {
        token = static_cast<int>(std::max_element(lr.begin(), lr.end()) - lr.begin());
        if (observer) {
          kernels::softmax_rows(1, vocab, lr.data(), probs.data());
          (*observer)(probs, token);
        }
      } else {
        kernels::softmax_rows(1, vocab, lr.data(), probs.data());
        token = sample_top_k(probs, top_k, *rng);
        if (observer) (*observer)(probs, token);
      }
      auto& res = out[static_cast<std::size_t>(i)];
      if (token == stop_token || is_reserved(token)) {
        res.terminal = token;
        continue;
      }
      res.tokens.push_back(token);
      auto& cache = caches[static_cast<std::size_t>(i)];
      // a full context is reported like reaching max_new
      if (step + 1 < max_new && cache.len + 1 < ctx) {
        const int t = token;
        logits[static_cast<std::size_t>(i)] = model.extend(cache, std::span<const int>(&t, 1));
        still.push_back(i);
      }
    }
    active = std::move(still);
  }
  return out;
}

std::string_view to_string(PseudoStatus s) {
  switch (s) {
    case PseudoStatus::ok: return "ok";
    case PseudoStatus::overflow: return "overflow";
    case PseudoStatus::special_token: return "special_token";
    case PseudoStatus::empty_x: return "empty_x";
    case PseudoStatus::no_prefix: return "no_prefix";
    case PseudoStatus::no_postfix: return "no_postfix";
    case PseudoStatus::empty_y: return "empty_y";
    case PseudoStatus::bad_output: return "bad_output";
  }
  return "unknown";
}

PseudoStatus parse_pseudo_status(std::string_view text) {
  for (int i = 0; i <= static_cast<int>(PseudoStatus::bad_output); ++i)
    if (to_string(static_cast<PseudoStatus>(i)) == text) return static_cast<PseudoStatus>(i);
  throw DataError("unknown pseudo-sample status '" + std::string(text) + "'");
}

namespace {

PseudoStatus from_parse(ParseStatus s) {
  switch (s) {
    case ParseStatus::ok: return PseudoStatus::ok;
    case ParseStatus::no_prefix: return PseudoStatus::no_prefix;
    case ParseStatus::no_postfix: return PseudoStatus::no_postfix;
    case ParseStatus::empty_x: return PseudoStatus::empty_x;
    case ParseStatus::empty_y: return PseudoStatus::empty_y;
    case ParseStatus::bad_output: return PseudoStatus::bad_output;
    case ParseStatus::special_token: return PseudoStatus::special_token;
  }
  return PseudoStatus::bad_output;
}

std::vector<int> prompt_prefix_ids(const TaskSpec& spec, const Vocab& vocab) {
  std::vector<int> ids{Vocab::kBos};
  const auto pre = vocab.encode(spec.prefix);
  ids.insert(ids.end(), pre.begin(), pre.end());
  return ids;
}

}  // namespace

std::vector<PseudoInput> generate_pseudo_inputs(const Model& model, const TaskSpec& spec, const Vocab& vocab,
                                                int count, bool use_latent, int top_k, int max_decode_len,
                                                std::mt19937_64& rng, const DecodeObserver* observer) {
  if (count <= 0) return {};
  if (spec.postfix.empty()) throw std::invalid_argument("generate_pseudo_inputs: task without postfix");
  NoGradGuard no_grad;
  const auto start = prompt_prefix_ids(spec, vocab);
  const int stop = vocab.id(spec.postfix.front());
  // room left for the postfix and at least one output token plus [EOS]
  const int room = model.config().context_len - static_cast<int>(start.size() + spec.postfix.size()) - 2;
  const int max_x = std::min(max_decode_len, room);
  if (max_x < 1) throw std::invalid_argument("generate_pseudo_inputs: prompt leaves no room for an input");

  Tensor z;
  if (use_latent) {
    PackedBatch pb;
    pb.add(start);
    const LmOutput o = model.forward(pb);
    const RowSpan span{1, static_cast<int>(start.size())};
    const GaussianDiag prior = model.prior_forward(model.pool(o.hidden, {&span, 1}, PoolQuery::prefix));
    const Tensor noise = standard_normal(rng, count, model.config().z_dim);
    std::vector<int> rep(static_cast<std::size_t>(count), 0);
    const GaussianDiag tiled{ops::gather_rows(prior.mu, rep), ops::gather_rows(prior.logvar, rep)};
    z = reparameterize(tiled, noise);
  }
  const std::vector<std::vector<int>> prompts(static_cast<std::size_t>(count), start);
  // one extra step so an input of exactly max_x tokens can still meet the postfix
  const auto res = decode(model, prompts, max_x + 1, stop, top_k, &rng, use_latent ? &z : nullptr,
                          static_cast<int>(start.size()), observer);
  std::vector<PseudoInput> out(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < res.size(); ++i) {
    auto& p = out[i];
    p.x = vocab.decode(res[i].tokens);
    if (res[i].terminal == -1 || static_cast<int>(res[i].tokens.size()) > max_x)
      p.status = PseudoStatus::overflow;
    else if (res[i].terminal != stop)
      p.status = PseudoStatus::special_token;
    else if (res[i].tokens.empty())
      p.status = PseudoStatus::empty_x;
    else
      p.status = PseudoStatus::ok;
  }
  return out;
}

namespace {

// Greedy outputs after g(x) for a list of inputs: full id sequences ending in
// the decoded output (plus [EOS] when it was produced).
std::vector<std::vector<int>> greedy_complete(const Model& model, const TaskSpec& spec, const Vocab& vocab,
                                              std::span<const std::vector<std::string>> xs, int max_label_len,
                                              int batch) {
  // leave room for the output tokens
  const int max_prompt = model.config().context_len - 1;
  std::vector<std::vector<int>> out;
  out.reserve(xs.size());
  for (std::size_t begin = 0; begin < xs.size(); begin += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(xs.size(), begin + static_cast<std::size_t>(batch));
    std::vector<std::vector<int>> prompts;
    for (std::size_t i = begin; i < end; ++i) {
      if (xs[i].empty()) {
        prompts.push_back({});
        continue;
      }
      prompts.push_back(render(spec, vocab, xs[i], nullptr, max_prompt).ids);
    }
    std::vector<std::size_t> nonempty;
    std::vector<std::vector<int>> live;
    for (std::size_t i = 0; i < prompts.size(); ++i)
      if (!prompts[i].empty()) {
        nonempty.push_back(i);
        live.push_back(prompts[i]);
      }
    const auto res = decode(model, live, max_label_len, Vocab::kEos, 0, nullptr);
    for (std::size_t j = 0; j < live.size(); ++j) {
      auto& p = prompts[nonempty[j]];
      p.insert(p.end(), res[j].tokens.begin(), res[j].tokens.end());
      if (res[j].terminal != -1) p.push_back(res[j].terminal);
    }
    for (auto& p : prompts) out.push_back(std::move(p));
  }
  return out;
}

Sample normalized_gold(const Sample& s) {
  Sample g = s;
  g.intent = normalize_text(s.intent);
  for (auto& p : g.slots) {
    p.slot = join(tokenize(p.slot));
    p.value = join(tokenize(p.value));
  }
  return g;
}

}  // namespace

std::vector<ParseResult> label_pseudo_inputs(const Model& model, const TaskSpec& spec, const Vocab& vocab,
                                             std::span<const std::vector<std::string>> xs, int max_label_len,
                                             int batch) {
  const auto full = greedy_complete(model, spec, vocab, xs, max_label_len, batch);
  std::vector<ParseResult> out;
  out.reserve(full.size());
  for (const auto& ids : full) {
    if (ids.empty()) {
      out.push_back({ParseStatus::empty_x, std::nullopt});
      continue;
    }
    out.push_back(parse_generated(spec, vocab, ids));
  }
  return out;
}

std::vector<Sample> predict(const Model& model, const TaskSpec& spec, const Vocab& vocab,
                            std::span<const Sample> samples, int max_label_len, int batch) {
  std::vector<std::vector<std::string>> xs;
  xs.reserve(samples.size());
  for (const auto& s : samples) xs.push_back(s.utterance);
  const auto parsed = label_pseudo_inputs(model, spec, vocab, xs, max_label_len, batch);
  std::vector<Sample> out;
  out.reserve(parsed.size());
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    Sample p;
    p.utterance = samples[i].utterance;
    p.provenance = Provenance::pseudo;
    if (parsed[i].sample) {
      p.intent = parsed[i].sample->intent;
      p.slots = parsed[i].sample->slots;
    }
    out.push_back(std::move(p));
  }
  return out;
}

double evaluate(const Model& model, const TaskSpec& spec, const Vocab& vocab, std::span<const Sample> test,
                int max_label_len, int batch) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test split for task " + spec.name);
  const auto preds = predict(model, spec, vocab, test, max_label_len, batch);
  if (spec.kind == TaskKind::intent) {
    std::vector<std::string> p, g;
    for (std::size_t i = 0; i < test.size(); ++i) {
      p.push_back(preds[i].intent);
      g.push_back(normalized_gold(test[i]).intent);
    }
    return intent_accuracy(p, g);
  }
  std::vector<std::vector<SlotPair>> p, g;
  for (std::size_t i = 0; i < test.size(); ++i) {
    p.push_back(preds[i].slots);
    g.push_back(normalized_gold(test[i]).slots);
  }
  return slot_macro_f1(p, g);
}

// ---------------------------------------------------------------- replay

std::vector<int> replay_quotas(int n_train, int n_prev, float gamma) {
  if (n_prev <= 0) return {};
  // tolerance keeps exact products such as 0.2 * 100 from rounding up
  const int total = static_cast<int>(std::ceil(static_cast<double>(gamma) * n_train - 1e-6));
  std::vector<int> q(static_cast<std::size_t>(n_prev), total / n_prev);
  for (int i = 0; i < total % n_prev; ++i) ++q[static_cast<std::size_t>(i)];
  return q;
}

Learner::Learner(ModelConfig model_config, LossConfig loss_config, ReplayConfig replay_config, Vocab vocab,
                 std::vector<TaskSpec> base_specs)
    : model_config_([&] {
        model_config.vocab_size = vocab.size();
        model_config.validate();
        return model_config;
      }()),
      loss_(loss_config),
      replay_(replay_config),
      vocab_(std::move(vocab)),
      model_(model_config_, replay_config.seed),
      rng_(replay_config.seed ^ 0x9e3779b97f4a7c15ULL) {
  loss_.validate();
  replay_.validate();
  for (const auto& s : base_specs) specs_.push_back(effective_spec(s, replay_));
}

Model Learner::snapshot_teacher() const { return model_.frozen_copy(); }

ReplayMix Learner::build_replay_mix(int t, int n_train, const Model& generator) {
  ReplayMix mix;
  if (t <= 0 || replay_.strategy == Strategy::finetune) return mix;
  const auto quotas = replay_quotas(n_train, t, replay_.gamma);
  for (int j = 0; j < t; ++j) {
    TaskGenerationLog log;
    log.task = j;
    log.requested = quotas[static_cast<std::size_t>(j)];
    if (replay_.strategy == Strategy::er) {
      const auto it = memory_.find(j);
      if (it != memory_.end() && !it->second.empty()) {
        for (int k = 0; k < log.requested; ++k) {
          const auto& s = it->second[std::uniform_int_distribution<std::size_t>(0, it->second.size() - 1)(rng_)];
          mix.samples.push_back({j, s});
          ++log.accepted;
        }
      }
      mix.logs.push_back(std::move(log));
      continue;
    }
    const TaskSpec& spec = specs_[static_cast<std::size_t>(j)];
    const bool latent = replay_.uses_cvae();
    const int cap = 5 * log.requested;
    while (log.accepted < log.requested && log.attempts < cap) {
      const int n = std::min(cap - log.attempts, log.requested - log.accepted);
      ++counters_.generations;
      const auto inputs =
          generate_pseudo_inputs(generator, spec, vocab_, n, latent, replay_.top_k, replay_.max_decode_len, rng_);
      log.attempts += n;
      std::vector<std::vector<std::string>> xs;
      std::vector<std::size_t> which;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].status == PseudoStatus::ok) {
          xs.push_back(inputs[i].x);
          which.push_back(i);
        } else {
          ++log.rejects[inputs[i].status];
          log.records.push_back({inputs[i].status, inputs[i].x, std::nullopt});
        }
      }
      const auto labeled = label_pseudo_inputs(generator, spec, vocab_, xs, replay_.max_label_len, replay_.eval_batch);
      for (std::size_t k = 0; k < labeled.size(); ++k) {
        const auto status = from_parse(labeled[k].status);
        if (status != PseudoStatus::ok || log.accepted >= log.requested) {
          if (status != PseudoStatus::ok) ++log.rejects[status];
          log.records.push_back({status, xs[k], std::nullopt});
          continue;
        }
        ++log.accepted;
        log.records.push_back({status, xs[k], labeled[k].sample});
        mix.samples.push_back({j, *labeled[k].sample});
      }
    }
    mix.logs.push_back(std::move(log));
  }
  return mix;
}

Tensor Learner::batch_loss(std::span<const ReplaySample> batch, const Model* teacher, float beta) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const int ctx = model_config_.context_len;
  const float w = 1.0f / static_cast<float>(batch.size());
  const bool cvae = replay_.uses_cvae();
  const bool kd = replay_.uses_kd();
  const float alpha = kd ? loss_.alpha : 0.0f;

  std::vector<RenderedPrompt> full;
  full.reserve(batch.size());
  PackedBatch lm;
  for (const auto& item : batch) {
    full.push_back(render(specs_[static_cast<std::size_t>(item.task)], vocab_, item.sample, true, ctx));
    lm.add(full.back().ids);
  }

  std::vector<ops::TokenTarget> lm_t;
  std::vector<ops::SoftTarget> lm_kd;
  PackedBatch teacher_lm;
  std::vector<int> pseudo_rows;  // batch indices of pseudo samples that are distilled
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool pseudo = batch[i].sample.provenance == Provenance::pseudo;
    const bool distill = pseudo && alpha > 0.0f;
    const float plain = distill ? 1.0f - alpha : 1.0f;
    if (plain > 0.0f) append_lm_targets(lm_t, full[i], lm.offsets[i], loss_.lambda, w * plain);
    if (distill) {
      append_lm_kd_targets(lm_kd, full[i], lm.offsets[i], teacher_lm.n_tokens(), w * alpha);
      teacher_lm.add(full[i].ids);
      pseudo_rows.push_back(static_cast<int>(i));
    }
  }
  if (!lm_kd.empty() && !teacher) throw std::invalid_argument("batch_loss: distillation needs a teacher");

  const LmOutput out = model_.forward(lm);
  Tensor loss = ops::weighted_nll(out.logits, lm_t);
  if (!lm_kd.empty()) {
    ++counters_.kd_losses;
    ++counters_.teacher_forwards;
    Tensor probs;
    {
      NoGradGuard g;
      probs = ops::softmax(teacher->forward(teacher_lm).logits);
    }
    loss = ops::add(loss, ops::weighted_soft_ce(out.logits, lm_kd, probs));
  }
  if (!cvae) return loss;

  ++counters_.cvae_losses;
  const int b = static_cast<int>(batch.size());
  std::vector<RowSpan> pre_spans, full_spans;
  PackedBatch dec;
  for (int i = 0; i < b; ++i) {
    const auto& r = full[static_cast<std::size_t>(i)];
    const int off = lm.offsets[static_cast<std::size_t>(i)];
    pre_spans.push_back({off + r.prefix.begin, off + r.prefix.end});
    full_spans.push_back({off + r.prefix.begin, off + r.x.end});
    dec.add(decoder_input(r).ids, r.prefix.end);
  }
  const GaussianDiag prior = model_.prior_forward(model_.pool(out.hidden, pre_spans, PoolQuery::prefix));
  const GaussianDiag post = model_.recognition_forward(model_.pool(out.hidden, full_spans, PoolQuery::full));
  const Tensor z = reparameterize(post, standard_normal(rng_, b, model_config_.z_dim));
  const LmOutput d = model_.forward(dec, &z);

  std::vector<ops::TokenTarget> rec_t;
  std::vector<ops::SoftTarget> rec_kd;
  PackedBatch teacher_dec;
  for (int i = 0; i < b; ++i) {
    const auto& r = full[static_cast<std::size_t>(i)];
    const bool distill = std::find(pseudo_rows.begin(), pseudo_rows.end(), i) != pseudo_rows.end();
    const float plain = distill ? 1.0f - alpha : 1.0f;
    if (plain > 0.0f) append_rec_targets(rec_t, r, dec.offsets[static_cast<std::size_t>(i)], w * plain);
    if (distill) {
      append_rec_kd_targets(rec_kd, r, dec.offsets[static_cast<std::size_t>(i)], teacher_dec.n_tokens(), w * alpha);
      teacher_dec.add(decoder_input(r).ids, r.prefix.end);
    }
  }
  if (!rec_t.empty()) loss = ops::add(loss, ops::weighted_nll(d.logits, rec_t));
  if (!rec_kd.empty()) {
    ++counters_.teacher_forwards;
    Tensor probs;
    {
      NoGradGuard g;
      const Tensor zt = select_rows(z.detach(), pseudo_rows);
      probs = ops::softmax(teacher->forward(teacher_dec, &zt).logits);
    }
    loss = ops::add(loss, ops::weighted_soft_ce(d.logits, rec_kd, probs));
  }
  // the KL term appears in both the plain and distilled CVAE losses, so its
  // weight is beta whatever alpha is
  const Tensor kl = kl_diag_gauss(post, prior);
  loss = ops::add(loss, ops::scale(ops::sum_all(kl), beta * w));
  return loss;
}

std::vector<StepLog> Learner::train_task(int t, std::span<const Sample> train, std::span<const ReplaySample> mix,
                                         const Model* teacher) {
  std::vector<ReplaySample> pool;
  pool.reserve(train.size() + mix.size());
  for (const auto& s : train) {
    ReplaySample r{t, s};
    r.sample.provenance = Provenance::real;
    pool.push_back(std::move(r));
  }
  pool.insert(pool.end(), mix.begin(), mix.end());
  std::vector<StepLog> log;
  if (pool.empty() || replay_.epochs == 0) return log;

  const int bs = replay_.batch_size;
  const int steps_per_epoch = static_cast<int>((pool.size() + static_cast<std::size_t>(bs) - 1) / static_cast<std::size_t>(bs));
  const BetaSchedule schedule{steps_per_epoch, loss_.beta_cycles_per_epoch, loss_.beta_ramp_fraction};
  Adam adam(AdamConfig{replay_.lr, 0.9f, 0.98f, 1e-8f});
  std::vector<Tensor> params = model_.parameters();
  int step = 0;
  for (int epoch = 0; epoch < replay_.epochs; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng_);
    for (std::size_t begin = 0; begin < pool.size(); begin += static_cast<std::size_t>(bs)) {
      const std::size_t end = std::min(pool.size(), begin + static_cast<std::size_t>(bs));
      const std::span<const ReplaySample> batch(pool.data() + begin, end - begin);
      const float beta = beta_at(step, schedule);
      const Tensor loss = batch_loss(batch, teacher, beta);
      const float value = loss.item();
      if (!std::isfinite(value))
        throw std::runtime_error("training diverged: non-finite loss at task " + std::to_string(t) + ", step " +
                                 std::to_string(step));
      loss.backward();
      clip_grad_norm(params, replay_.clip_norm);
      adam.step(params);
      zero_grads(params);
      StepLog entry{t, epoch, step, beta, value, 0, 0};
      for (const auto& s : batch) (s.sample.provenance == Provenance::real ? entry.n_real : entry.n_pseudo)++;
      log.push_back(entry);
      ++step;
    }
  }
  return log;
}

void Learner::remember(int t, std::span<const Sample> train) {
  if (replay_.strategy != Strategy::er) return;
  const auto keep = static_cast<std::size_t>(std::floor(static_cast<double>(replay_.er_fraction) * train.size()));
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng_);
  auto& mem = memory_[t];
  mem.clear();
  for (std::size_t i = 0; i < keep; ++i) mem.push_back(train[idx[i]]);
}

double Learner::evaluate_task(int t, std::span<const Sample> test) const {
  return evaluate(model_, spec(t), vocab_, test, replay_.max_label_len, replay_.eval_batch);
}

// ---------------------------------------------------------------- stream

Vocab stream_vocab(std::span<const TaskDataset> stream, std::span<const TaskSpec> base_specs, int min_count) {
  const auto forced = all_prompt_tokens(base_specs);
  return build_vocab(stream, min_count, forced);
}

namespace {

std::string checkpoint_name(int i) { return "task_" + std::to_string(i + 1) + ".ckpt"; }

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

StreamResult run_stream(std::span<const TaskDataset> stream, std::span<const TaskSpec> base_specs,
                        ModelConfig model_config, const LossConfig& loss_config, const ReplayConfig& replay_config,
                        const StreamOptions& options) {
  if (stream.empty()) throw std::invalid_argument("run_stream: empty task stream");
  if (stream.size() != base_specs.size()) throw std::invalid_argument("run_stream: one task spec per task required");
  const int n = static_cast<int>(stream.size());
  Learner learner(model_config, loss_config, replay_config, stream_vocab(stream, base_specs, options.min_count),
                  std::vector<TaskSpec>(base_specs.begin(), base_specs.end()));
  StreamResult result;
  result.r = ScoreMatrix(n);
  result.generation.resize(static_cast<std::size_t>(n));
  for (const auto& t : stream) result.task_names.push_back(t.name);
  const bool artifacts = !options.output_dir.empty();
  if (artifacts) {
    ensure_dir(options.output_dir);
    if (options.save_checkpoints) ensure_dir(options.output_dir / "checkpoints");
    ensure_dir(options.output_dir / "pseudo");
  }

  auto eval_row = [&](int i) {
    std::vector<double> row;
    for (int j = 0; j < n; ++j) row.push_back(learner.evaluate_task(j, stream[static_cast<std::size_t>(j)].test));
    result.r.set_row(i, row);
  };
  auto checkpoint = [&](int i) {
    if (artifacts && options.save_checkpoints)
      save_checkpoint(options.output_dir / "checkpoints" / checkpoint_name(i), learner.model(), learner.vocab(),
                      learner.specs());
  };

  if (options.joint) {
    std::vector<ReplaySample> all;
    for (int j = 1; j < n; ++j)
      for (const auto& s : stream[static_cast<std::size_t>(j)].train) all.push_back({j, s});
    auto log = learner.train_task(0, stream[0].train, all, nullptr);
    result.loss_log = std::move(log);
    for (int i = 0; i < n; ++i) {
      if (i == 0) {
        eval_row(0);
      } else {
        result.r.set_row(i, result.r.row(0));
      }
      checkpoint(i);
    }
  } else {
    for (int i = 0; i < n; ++i) {
      const auto& task = stream[static_cast<std::size_t>(i)];
      std::optional<Model> teacher;
      if (i > 0 && replay_config.uses_kd()) teacher = learner.snapshot_teacher();
      ReplayMix mix;
      if (i > 0 && replay_config.strategy != Strategy::finetune) {
        // the pre-task model; equal to the teacher when there is one
        const Model& generator = teacher ? *teacher : learner.model();
        mix = learner.build_replay_mix(i, static_cast<int>(task.n_train()), generator);
      }
      for (const auto& log : mix.logs)
        for (const auto& rec : log.records)
          if (rec.status == PseudoStatus::ok && rec.sample) result.pseudo_inputs.push_back(rec.x);
      auto log = learner.train_task(i, task.train, mix.samples, teacher ? &*teacher : nullptr);
      result.loss_log.insert(result.loss_log.end(), log.begin(), log.end());
      learner.remember(i, task.train);
      eval_row(i);
      checkpoint(i);
      if (artifacts && replay_config.generates()) {
        for (const auto& g : mix.logs)
          write_pseudo_dump(options.output_dir / "pseudo" /
                                ("before_task_" + std::to_string(i + 1) + "_" + stream[static_cast<std::size_t>(g.task)].name + ".jsonl"),
                            make_dump(stream[static_cast<std::size_t>(g.task)].name, g),
                            stream[static_cast<std::size_t>(g.task)].kind);
      }
      result.generation[static_cast<std::size_t>(i)] = std::move(mix.logs);
    }
  }
  result.counters = learner.counters();
  result.final_hash = learner.model().hash();

  if (artifacts) {
    std::ofstream r_csv(options.output_dir / "R.csv");
    r_csv << result.r.to_csv(result.task_names);
    write_report_csv(options.output_dir / "report.csv", stream_report(result));
    write_loss_log(options.output_dir / "loss_log.csv", result.loss_log);
  }
  return result;
}

// ---------------------------------------------------------------- artifacts

std::vector<ReportRow> stream_report(const StreamResult& result) {
  std::vector<ReportRow> rows;
  const auto& r = result.r;
  rows.push_back({"score", score_avg(r)});
  rows.push_back({"lca", lca(r, LcaMode::all_tasks)});
  rows.push_back({"lca_seen", lca(r, LcaMode::seen_tasks)});
  for (int i = 0; i < r.n_tasks(); ++i)
    for (int j = 0; j < r.n_tasks(); ++j)
      rows.push_back({"r_" + std::to_string(i + 1) + "_" + std::to_string(j + 1), r.at(i, j)});
  long attempts = 0, accepted = 0, requested = 0;
  for (const auto& per_task : result.generation)
    for (const auto& g : per_task) {
      attempts += g.attempts;
      accepted += g.accepted;
      requested += g.requested;
    }
  rows.push_back({"pseudo_requested", static_cast<double>(requested)});
  rows.push_back({"pseudo_attempts", static_cast<double>(attempts)});
  rows.push_back({"pseudo_accepted", static_cast<double>(accepted)});
  rows.push_back({"pseudo_reject_rate", attempts ? 1.0 - static_cast<double>(accepted) / attempts : 0.0});
  for (int k = 1; k <= 4; ++k)
    rows.push_back({"dist_" + std::to_string(k), result.pseudo_inputs.empty() ? 0.0 : dist_n(result.pseudo_inputs, k)});
  return rows;
}

void write_report_csv(const std::filesystem::path& path, std::span<const ReportRow> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "metric,value\n" << std::setprecision(10);
  for (const auto& r : rows) out << r.metric << ',' << r.value << '\n';
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "metric,value") throw DataError(path.string() + ": bad report header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError(path.string() + ": malformed report line '" + line + "'");
    rows.push_back({line.substr(0, comma), std::stod(line.substr(comma + 1))});
  }
  return rows;
}

void write_loss_log(const std::filesystem::path& path, std::span<const StepLog> log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "task,epoch,step,beta,loss,n_real,n_pseudo\n" << std::setprecision(9);
  for (const auto& s : log)
    out << s.task + 1 << ',' << s.epoch << ',' << s.step << ',' << s.beta << ',' << s.loss << ',' << s.n_real << ','
        << s.n_pseudo << '\n';
}

PseudoDump make_dump(const std::string& task, const TaskGenerationLog& log) {
  PseudoDump d;
  d.task = task;
  d.requested = log.requested;
  d.attempts = log.attempts;
  d.accepted = log.accepted;
  d.rejects = log.rejects;
  d.records = log.records;
  std::vector<std::vector<std::string>> accepted;
  for (const auto& r : log.records)
    if (r.status == PseudoStatus::ok && r.sample) accepted.push_back(r.x);
  if (!accepted.empty())
    for (int k = 0; k < 4; ++k) d.dist[k] = dist_n(accepted, k + 1);
  return d;
}

void write_pseudo_dump(const std::filesystem::path& path, const PseudoDump& dump, TaskKind kind) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  json header{{"task", dump.task},
              {"requested", dump.requested},
              {"count", dump.attempts},
              {"accepted", dump.accepted},
              {"dist", {dump.dist[0], dump.dist[1], dump.dist[2], dump.dist[3]}}};
  json rejects = json::object();
  for (const auto& [status, count] : dump.rejects) rejects[std::string(to_string(status))] = count;
  header["rejects"] = rejects;
  out << header.dump() << '\n';
  for (const auto& r : dump.records) {
    json line{{"status", to_string(r.status)}, {"provenance", "pseudo"}, {"x", join(r.x)}};
    if (r.sample) {
      const json s = json::parse(sample_to_json_line(*r.sample, kind));
      for (auto it = s.begin(); it != s.end(); ++it) line[it.key()] = it.value();
      line["provenance"] = "pseudo";
    }
    out << line.dump() << '\n';
  }
}

PseudoDump read_pseudo_dump(const std::filesystem::path& path, TaskKind kind) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": missing header");
  PseudoDump d;
  try {
    const json h = json::parse(line);
    d.task = h.at("task").get<std::string>();
    d.requested = h.at("requested").get<int>();
    d.attempts = h.at("count").get<int>();
    d.accepted = h.at("accepted").get<int>();
    for (int k = 0; k < 4; ++k) d.dist[k] = h.at("dist").at(static_cast<std::size_t>(k)).get<double>();
    for (auto it = h.at("rejects").begin(); it != h.at("rejects").end(); ++it)
      d.rejects[parse_pseudo_status(it.key())] = it.value().get<int>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": bad header: " + e.what());
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      GenerationRecord r;
      r.status = parse_pseudo_status(j.at("status").get<std::string>());
      r.x = tokenize(j.at("x").get<std::string>());
      if (j.contains("utterance")) {
        Sample s;
        s.utterance = tokenize(j.at("utterance").get<std::string>());
        s.provenance = Provenance::pseudo;
        if (kind == TaskKind::intent) {
          s.intent = j.at("intent").get<std::string>();
        } else {
          for (const auto& p : j.at("slots")) s.slots.push_back({p.at("slot").get<std::string>(), p.at("value").get<std::string>()});
        }
        r.sample = std::move(s);
      }
      d.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return d;
}

}  // namespace pcll
