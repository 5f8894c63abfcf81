#include <cmath>
#include <random>

#include "doctest.h"
#include "e2e_check.hpp"
#include "pcll/losses.hpp"
#include "pcll/replay.hpp"

using namespace pcll;

namespace {

struct Fixture {
  TaskSpec spec = make_task_spec("weather", TaskKind::intent);
  Vocab vocab;
  std::vector<Sample> samples;

  Fixture() {
    samples.push_back({tokenize("will it rain in paris tomorrow"), "get weather", {}, Provenance::real});
    samples.push_back({tokenize("play some jazz"), "play music", {}, Provenance::real});
    samples.push_back({tokenize("set an alarm for six in the morning please"), "set alarm", {}, Provenance::real});
    std::vector<std::string> forced = prompt_tokens({&spec, 1});
    for (const auto& s : samples) {
      forced.insert(forced.end(), s.utterance.begin(), s.utterance.end());
      const auto y = tokenize(s.intent);
      forced.insert(forced.end(), y.begin(), y.end());
    }
    vocab = build_vocab({}, 1, forced);
  }

  RenderedPrompt seq(std::size_t i) const { return render(spec, vocab, samples[i % samples.size()], true); }
};

Tensor random_logits(std::mt19937_64& rng, int rows, int cols, float scale = 2.0f) {
  std::normal_distribution<float> nd(0.0f, scale);
  std::vector<float> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = nd(rng);
  return Tensor::from({rows, cols}, std::move(v));
}

// Double-precision mean NLL of ids[begin, end) under row j-1 of the logits.
double span_nll(const Tensor& logits, const std::vector<int>& ids, int begin, int end) {
  const int v = logits.dim(1);
  double total = 0.0;
  for (int j = begin; j < end; ++j) {
    double mx = -1e300;
    for (int c = 0; c < v; ++c) mx = std::max(mx, static_cast<double>(logits.at(j - 1, c)));
    double z = 0.0;
    for (int c = 0; c < v; ++c) z += std::exp(logits.at(j - 1, c) - mx);
    total += -(logits.at(j - 1, ids[static_cast<std::size_t>(j)]) - mx - std::log(z));
  }
  return total / (end - begin);
}

// Double-precision mean over rows j-1, j in [begin, end), of CE(softmax(t), softmax(s)).
double span_ce(const Tensor& s, const Tensor& t, int begin, int end) {
  const int v = s.dim(1);
  double total = 0.0;
  for (int j = begin; j < end; ++j) {
    auto log_softmax = [&](const Tensor& m) {
      std::vector<double> out(static_cast<std::size_t>(v));
      double mx = -1e300, z = 0.0;
      for (int c = 0; c < v; ++c) mx = std::max(mx, static_cast<double>(m.at(j - 1, c)));
      for (int c = 0; c < v; ++c) z += std::exp(m.at(j - 1, c) - mx);
      for (int c = 0; c < v; ++c) out[static_cast<std::size_t>(c)] = m.at(j - 1, c) - mx - std::log(z);
      return out;
    };
    const auto ls = log_softmax(s), lt = log_softmax(t);
    for (int c = 0; c < v; ++c) total -= std::exp(lt[static_cast<std::size_t>(c)]) * ls[static_cast<std::size_t>(c)];
  }
  return total / (end - begin);
}

}  // namespace

TEST_CASE("loss config validation") {
  LossConfig c;
  CHECK(c.lambda == 0.25f);
  CHECK(c.alpha == 0.5f);
  CHECK(c.beta_cycles_per_epoch == 4);
  CHECK(c.beta_ramp_fraction == 0.5f);
  CHECK_NOTHROW(c.validate());
  c.lambda = -0.1f;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = LossConfig{};
  c.alpha = 1.5f;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = LossConfig{};
  c.beta_cycles_per_epoch = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = LossConfig{};
  c.beta_ramp_fraction = 0.0f;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("lm_loss on uniform logits is (1 + lambda) ln V") {
  const Fixture f;
  const auto s = f.seq(0);
  const int v = f.vocab.size();
  const Tensor uniform = Tensor::zeros({s.length(), v});
  for (float lambda : {0.0f, 0.25f, 1.0f, 3.0f})
    CHECK(lm_loss(uniform, s, lambda).item() == doctest::Approx((1 + lambda) * std::log(v)).epsilon(1e-6));
}

TEST_CASE("lm_loss matches the double reference; lambda 0 is the full-sequence NLL") {
  const Fixture f;
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto s = f.seq(i);
    const Tensor logits = random_logits(rng, s.length(), f.vocab.size());
    const double full = span_nll(logits, s.ids, 1, s.length());
    const double y = span_nll(logits, s.ids, s.y.begin, s.length());  // y span plus [EOS]
    CHECK(lm_loss(logits, s, 0.0f).item() == doctest::Approx(full).epsilon(1e-5));
    CHECK(lm_loss(logits, s, 0.25f).item() == doctest::Approx(full + 0.25 * y).epsilon(1e-5));
  }
}

TEST_CASE("lm_loss tends to zero on confident gold logits; empty y is an error") {
  const Fixture f;
  const auto s = f.seq(1);
  const int v = f.vocab.size();
  std::vector<float> v_logits(static_cast<std::size_t>(s.length()) * v, -30.0f);
  for (int j = 1; j < s.length(); ++j) v_logits[static_cast<std::size_t>(j - 1) * v + s.ids[static_cast<std::size_t>(j)]] = 30.0f;
  const Tensor logits = Tensor::from({s.length(), v}, v_logits);
  CHECK(lm_loss(logits, s, 0.25f).item() < 1e-6f);
  const auto no_output = render(f.spec, f.vocab, f.samples[1], false);
  CHECK_THROWS(lm_loss(Tensor::zeros({no_output.length(), v}), no_output, 0.25f));
}

TEST_CASE("beta schedule") {
  const BetaSchedule b{100, 4, 0.5f};
  CHECK(beta_at(0, b) == 0.0f);
  CHECK(beta_at(6.25, b) == doctest::Approx(0.5f));
  CHECK(beta_at(12.5, b) == 1.0f);
  CHECK(beta_at(20, b) == 1.0f);
  CHECK(beta_at(25, b) == 0.0f);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> step(0.0, 1000.0);
  for (int spe : {7, 19, 48, 100})
    for (float ramp : {0.25f, 0.5f, 1.0f}) {
      const BetaSchedule s{spe, 4, ramp};
      const double period = spe / 4.0;
      for (int trial = 0; trial < 50; ++trial) {
        const double t = step(rng);
        const float here = beta_at(t, s);
        CHECK(here >= 0.0f);
        CHECK(here <= 1.0f);
        CHECK(beta_at(t + period, s) == doctest::Approx(here).epsilon(1e-4));
      }
      // continuous within the ramp: small steps move beta by at most the slope
      const double slope = 1.0 / (ramp * period);
      for (double t = 0; t + 0.01 < ramp * period; t += 0.01)
        CHECK(std::abs(beta_at(t + 0.01, s) - beta_at(t, s)) <= 0.01 * slope + 1e-5);
    }
}

TEST_CASE("decoder input is the prefix, x and the first postfix token") {
  const Fixture f;
  const auto full = f.seq(2);
  const auto in = decoder_input(full);
  CHECK(in.length() == full.postfix.begin + 1);
  for (int j = 0; j < in.length(); ++j) CHECK(in.ids[static_cast<std::size_t>(j)] == full.ids[static_cast<std::size_t>(j)]);
  CHECK_FALSE(in.has_output);
  CHECK(in.x.begin == full.x.begin);
  CHECK(in.x.end == full.x.end);
}

TEST_CASE("reconstruction NLL covers x and the token that closes it") {
  const Fixture f;
  std::mt19937_64 rng(3);
  const auto in = decoder_input(f.seq(0));
  const Tensor logits = random_logits(rng, in.length(), f.vocab.size());
  const double expect = span_nll(logits, in.ids, in.x.begin, in.x.end + 1);
  CHECK(reconstruction_nll(logits, in).item() == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("ELBO combination") {
  const Tensor rec = Tensor::scalar(2.5f), kl = Tensor::scalar(0.8f);
  CHECK(cvae_elbo_loss(rec, kl, 0.0f).item() == 2.5f);
  CHECK(cvae_elbo_loss(rec, Tensor::scalar(0.0f), 0.7f).item() == 2.5f);
  CHECK(cvae_elbo_loss(rec, kl, 0.5f).item() == doctest::Approx(2.9f));
}

TEST_CASE("distillation against itself is the student's entropy") {
  const Fixture f;
  std::mt19937_64 rng(4);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto s = f.seq(i);
    const Tensor logits = random_logits(rng, s.length(), f.vocab.size());
    const double h_full = span_ce(logits, logits, 1, s.length());
    const double h_y = span_ce(logits, logits, s.y.begin, s.length());
    CHECK(kd_lm_loss(logits, logits, s).item() == doctest::Approx(h_full + h_y).epsilon(1e-5));
    const auto in = decoder_input(s);
    const Tensor rl = random_logits(rng, in.length(), f.vocab.size());
    CHECK(kd_rec_loss(rl, rl, in).item() == doctest::Approx(span_ce(rl, rl, in.x.begin, in.x.end + 1)).epsilon(1e-5));
  }
}

TEST_CASE("a one-hot teacher reproduces the supervised loss") {
  const Fixture f;
  std::mt19937_64 rng(5);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto s = f.seq(i);
    const int v = f.vocab.size();
    const Tensor student = random_logits(rng, s.length(), v);
    std::vector<float> t(static_cast<std::size_t>(s.length()) * v, -1e4f);
    for (int j = 1; j < s.length(); ++j) t[static_cast<std::size_t>(j - 1) * v + s.ids[static_cast<std::size_t>(j)]] = 0.0f;
    const Tensor teacher = Tensor::from({s.length(), v}, t);
    CHECK(std::abs(kd_lm_loss(student, teacher, s).item() - lm_loss(student, s, 1.0f).item()) < 1e-6f);
    const auto in = decoder_input(s);
    const Tensor rs = random_logits(rng, in.length(), v);
    std::vector<float> rt(static_cast<std::size_t>(in.length()) * v, -1e4f);
    for (int j = 1; j < in.length(); ++j) rt[static_cast<std::size_t>(j - 1) * v + in.ids[static_cast<std::size_t>(j)]] = 0.0f;
    CHECK(std::abs(kd_rec_loss(rs, Tensor::from({in.length(), v}, rt), in).item() - reconstruction_nll(rs, in).item()) <
          1e-6f);
  }
}

TEST_CASE("distillation is bounded below by the teacher's entropy (Gibbs)") {
  const Fixture f;
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const auto s = f.seq(static_cast<std::size_t>(trial));
    const Tensor student = random_logits(rng, s.length(), f.vocab.size());
    const Tensor teacher = random_logits(rng, s.length(), f.vocab.size(), 0.5f + trial % 3);
    const double entropy = span_ce(teacher, teacher, 1, s.length()) + span_ce(teacher, teacher, s.y.begin, s.length());
    CHECK(kd_lm_loss(student, teacher, s).item() >= entropy - 1e-5);
  }
  const auto s = f.seq(0);
  CHECK_THROWS(kd_lm_loss(Tensor::zeros({s.length(), f.vocab.size()}), Tensor::zeros({s.length(), 3}), s));
}

TEST_CASE("replay mixing") {
  const Tensor plain = Tensor::scalar(3.0f), kd = Tensor::scalar(1.0f);
  CHECK(replay_loss(plain, kd, 0.0f).item() == 3.0f);
  CHECK(replay_loss(plain, kd, 1.0f).item() == 1.0f);
  CHECK(replay_loss(plain, kd, 0.5f).item() == 2.0f);
  CHECK_THROWS(replay_loss(plain, kd, -0.1f));
  CHECK_THROWS(replay_loss(plain, kd, 1.1f));
}

TEST_CASE("losses are finite and non-negative on random inputs") {
  const Fixture f;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 60; ++trial) {
    const auto s = f.seq(static_cast<std::size_t>(trial));
    const float scale = 0.1f + 10.0f * u(rng);
    const Tensor a = random_logits(rng, s.length(), f.vocab.size(), scale);
    const Tensor b = random_logits(rng, s.length(), f.vocab.size(), scale);
    for (float value : {lm_loss(a, s, u(rng)).item(), kd_lm_loss(a, b, s).item()}) {
      CHECK(std::isfinite(value));
      CHECK(value >= 0.0f);
    }
    const auto in = decoder_input(s);
    const Tensor r = random_logits(rng, in.length(), f.vocab.size(), scale);
    const float rec = reconstruction_nll(r, in).item();
    CHECK(std::isfinite(rec));
    CHECK(rec >= 0.0f);
    const float elbo = cvae_elbo_loss(Tensor::scalar(rec), Tensor::scalar(u(rng)), u(rng)).item();
    CHECK(elbo >= 0.0f);
  }
}

TEST_CASE("full training loss passes an end-to-end finite-difference check") {
  for (std::uint64_t seed : {1, 2}) {
    const auto r = testing::end_to_end_gradcheck(seed);
    CAPTURE(seed);
    CAPTURE(r.worst_tensor);
    CHECK(r.grad_norm > 0.0);
    CHECK(r.rel_error < 1e-3);
  }
}

TEST_CASE("distilled reconstruction reaches the recognition network through z") {
  const auto stream = gen_synthetic_stream(3, 2, 20, 8);
  std::vector<TaskSpec> specs;
  for (const auto& t : stream) specs.push_back(make_task_spec(t.name, TaskKind::intent));
  ModelConfig mc;
  mc.n_layers = 1;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.z_dim = 4;
  mc.mlp_hidden = 8;
  const Vocab vocab = stream_vocab(stream, specs, 1);
  mc.vocab_size = vocab.size();
  ReplayConfig rc;
  LossConfig lc;
  lc.alpha = 1.0f;  // pseudo sample sees only the distilled objectives
  Learner learner(mc, lc, rc, vocab, specs);
  const Model teacher = learner.snapshot_teacher();
  auto named = learner.model().named_parameters();
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd(0.0f, 0.1f);
  for (auto& [name, p] : named)
    for (auto& x : p.data()) x += nd(rng);
  std::vector<ReplaySample> batch{{0, stream[0].train[0]}};
  batch[0].sample.provenance = Provenance::pseudo;
  for (auto& [name, p] : named) p.zero_grad();
  learner.batch_loss(batch, &teacher, 0.0f).backward();
  double norm = 0.0;
  for (auto& [name, p] : named)
    if (name.rfind("recognition.", 0) == 0)
      for (float g : p.grad()) norm += static_cast<double>(g) * g;
  CHECK(norm > 0.0);
}
