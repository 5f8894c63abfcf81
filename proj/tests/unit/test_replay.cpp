#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "pcll/replay.hpp"

using namespace pcll;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.context_len = 64;
  c.z_dim = 4;
  c.mlp_hidden = 8;
  return c;
}

struct Stream {
  std::vector<TaskDataset> data;
  std::vector<TaskSpec> specs;
  Vocab vocab;

  // The generator needs two tasks; single-task fixtures keep the first.
  Stream(std::uint64_t seed, int tasks, int per_task)
      : data(gen_synthetic_stream(seed, std::max(tasks, 2), per_task, 8)) {
    data.resize(static_cast<std::size_t>(tasks));
    for (const auto& t : data) specs.push_back(make_task_spec(t.name, t.kind));
    vocab = stream_vocab(data, specs, 1);
  }
};

ReplayConfig quick(Strategy s, int epochs = 1) {
  ReplayConfig rc;
  rc.strategy = s;
  rc.epochs = epochs;
  rc.max_decode_len = 24;
  rc.max_label_len = 8;
  return rc;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "pcll_replay_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("replay config validation") {
  ReplayConfig rc;
  CHECK(rc.gamma == 0.2f);
  CHECK(rc.top_k == 20);
  CHECK(rc.max_decode_len == 96);
  CHECK(rc.er_fraction == 0.01f);
  CHECK_NOTHROW(rc.validate());
  for (float g : {0.0f, 1.5f}) {
    rc = ReplayConfig{};
    rc.gamma = g;
    CHECK_THROWS_AS(rc.validate(), std::invalid_argument);
  }
  rc = ReplayConfig{};
  rc.top_k = 0;
  CHECK_THROWS_AS(rc.validate(), std::invalid_argument);
  rc = ReplayConfig{};
  rc.er_fraction = 1.0f;
  CHECK_THROWS_AS(rc.validate(), std::invalid_argument);
  CHECK(parse_strategy("lamol_token") == Strategy::lamol_token);
  CHECK(to_string(Strategy::er) == "er");
  CHECK_THROWS(parse_strategy("ewc"));
}

TEST_CASE("replay quotas split ceil(gamma N) over previous tasks") {
  CHECK(replay_quotas(100, 2, 0.2f) == std::vector<int>{10, 10});
  CHECK(replay_quotas(100, 3, 0.2f) == std::vector<int>{7, 7, 6});
  CHECK(replay_quotas(101, 1, 0.2f) == std::vector<int>{21});
  CHECK(replay_quotas(10, 4, 0.1f) == std::vector<int>{1, 0, 0, 0});
  for (int n = 1; n < 200; n += 7)
    for (int prev = 1; prev < 5; ++prev) {
      const auto q = replay_quotas(n, prev, 0.2f);
      CHECK(std::accumulate(q.begin(), q.end(), 0) == static_cast<int>(std::ceil(0.2 * n - 1e-9)));
      CHECK(*std::max_element(q.begin(), q.end()) - *std::min_element(q.begin(), q.end()) <= 1);
      CHECK(std::is_sorted(q.rbegin(), q.rend()));
    }
}

TEST_CASE("no replay before the second task or under finetuning") {
  const Stream s(1, 2, 40);
  ModelConfig mc = tiny_model();
  mc.vocab_size = s.vocab.size();
  Learner pcll(mc, LossConfig{}, quick(Strategy::pcll), s.vocab, s.specs);
  CHECK(pcll.build_replay_mix(0, 40, pcll.model()).samples.empty());
  Learner ft(mc, LossConfig{}, quick(Strategy::finetune), s.vocab, s.specs);
  const auto mix = ft.build_replay_mix(1, 40, ft.model());
  CHECK(mix.samples.empty());
  CHECK(mix.logs.empty());
}

TEST_CASE("pseudo budget: accepted never exceeds the quota; every attempt is accounted for") {
  const Stream s(2, 3, 40);
  ModelConfig mc = tiny_model();
  mc.vocab_size = s.vocab.size();
  Learner learner(mc, LossConfig{}, quick(Strategy::pcll), s.vocab, s.specs);
  const auto mix = learner.build_replay_mix(2, 100, learner.model());
  REQUIRE(mix.logs.size() == 2);
  int total = 0;
  for (const auto& log : mix.logs) {
    CHECK(log.requested == 10);
    CHECK(log.accepted <= log.requested);
    CHECK(log.attempts <= 5 * log.requested);
    int rejected = 0;
    for (const auto& [status, n] : log.rejects) rejected += n;
    CHECK(log.accepted + rejected <= log.attempts);
    CHECK(static_cast<int>(log.records.size()) == log.attempts);
    if (log.shortfall() > 0) CHECK(log.attempts == 5 * log.requested);
    total += log.accepted;
  }
  CHECK(static_cast<int>(mix.samples.size()) == total);
  CHECK(total <= 20);
  for (const auto& r : mix.samples) CHECK(r.sample.provenance == Provenance::pseudo);
}

TEST_CASE("top-k sampling only emits tokens from the k most probable") {
  const Stream s(3, 1, 20);
  ModelConfig mc = tiny_model();
  mc.vocab_size = s.vocab.size();
  Model m(mc, 3);
  std::mt19937_64 init(3);
  std::normal_distribution<float> nd(0.0f, 0.3f);
  for (auto& p : m.parameters())
    for (auto& x : p.data()) x += nd(init);
  const std::vector<std::vector<int>> prompts(4, std::vector<int>{Vocab::kBos});
  for (int k : {1, 3, 7}) {
    int steps = 0;
    bool within = true;
    const DecodeObserver observer = [&](std::span<const float> probs, int token) {
      ++steps;
      int higher = 0;
      for (float p : probs) higher += p > probs[static_cast<std::size_t>(token)];
      within &= higher < k;
    };
    std::mt19937_64 rng(static_cast<std::uint64_t>(k));
    decode(m, prompts, 20, -1, k, &rng, nullptr, 0, &observer);
    CHECK(steps > 0);
    CHECK(within);
  }
}

TEST_CASE("top_k = 1 is deterministic given z") {
  const Stream s(4, 1, 20);
  ModelConfig mc = tiny_model();
  mc.vocab_size = s.vocab.size();
  Model m(mc, 4);
  std::mt19937_64 init(4);
  std::normal_distribution<float> nd(0.0f, 0.3f);
  for (auto& p : m.parameters())
    for (auto& x : p.data()) x += nd(init);
  const std::vector<std::vector<int>> prompts{{Vocab::kBos, 5, 6}, {Vocab::kBos, 7}};
  const Tensor z = Tensor::from({2, 4}, {1, 0, -1, 0.5f, 0, 2, 0, -0.5f});
  std::mt19937_64 a(1), b(999);
  const auto ra = decode(m, prompts, 15, -1, 1, &a, &z, 3);
  const auto rb = decode(m, prompts, 15, -1, 1, &b, &z, 3);
  const auto greedy = decode(m, prompts, 15, -1, 0, nullptr, &z, 3);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    CHECK(ra[i].tokens == rb[i].tokens);
    CHECK(ra[i].tokens == greedy[i].tokens);
  }
  CHECK_THROWS(decode(m, prompts, 5, -1, 3, nullptr));
  const Tensor wrong = Tensor::zeros({3, 4});
  CHECK_THROWS(decode(m, prompts, 5, -1, 0, nullptr, &wrong, 3));
}

TEST_CASE("teacher snapshot: equal at capture, immutable during training") {
  const Stream s(5, 1, 60);
  ModelConfig mc = tiny_model();
  mc.vocab_size = s.vocab.size();
  Learner learner(mc, LossConfig{}, quick(Strategy::pcll, 27), s.vocab, s.specs);
  const Model teacher = learner.snapshot_teacher();
  const auto hash = teacher.hash();
  const auto ids = render(s.specs[0], s.vocab, s.data[0].train[0], true).ids;
  const Tensor a = teacher.lm_forward(ids), b = learner.model().lm_forward(ids);
  for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
  const auto logs = learner.train_task(0, s.data[0].train, {}, &teacher);
  CHECK(logs.size() >= 100);
  CHECK(teacher.hash() == hash);
  CHECK(learner.model().hash() != hash);
}

TEST_CASE("distilling a pseudo sample needs a teacher") {
  const Stream s(6, 1, 20);
  ModelConfig mc = tiny_model();
  mc.vocab_size = s.vocab.size();
  Learner learner(mc, LossConfig{}, quick(Strategy::pcll), s.vocab, s.specs);
  std::vector<ReplaySample> batch{{0, s.data[0].train[0]}};
  batch[0].sample.provenance = Provenance::pseudo;
  CHECK_THROWS(learner.batch_loss(batch, nullptr, 0.5f));
  CHECK_THROWS(learner.batch_loss({}, nullptr, 0.5f));
}

TEST_CASE("finetuning never touches the latent or distillation paths") {
  const Stream s(7, 2, 40);
  ModelConfig mc = tiny_model();
  const auto r = run_stream(s.data, s.specs, mc, LossConfig{}, quick(Strategy::finetune));
  CHECK(r.counters.cvae_losses == 0);
  CHECK(r.counters.kd_losses == 0);
  CHECK(r.counters.generations == 0);
  CHECK(r.counters.teacher_forwards == 0);
  // the no_latent ablation still distills but never builds the CVAE loss
  ReplayConfig nl = quick(Strategy::pcll);
  nl.no_latent = true;
  const auto rn = run_stream(s.data, s.specs, mc, LossConfig{}, nl);
  CHECK(rn.counters.cvae_losses == 0);
  CHECK(rn.counters.generations > 0);
  const auto rp = run_stream(s.data, s.specs, mc, LossConfig{}, quick(Strategy::pcll));
  CHECK(rp.counters.cvae_losses > 0);
}

TEST_CASE("ER memory holds at most er_fraction of each task") {
  const Stream s(8, 2, 300);
  ModelConfig mc = tiny_model();
  mc.vocab_size = s.vocab.size();
  ReplayConfig rc = quick(Strategy::er);
  Learner learner(mc, LossConfig{}, rc, s.vocab, s.specs);
  learner.remember(0, s.data[0].train);
  const auto n = static_cast<std::size_t>(std::floor(rc.er_fraction * s.data[0].train.size()));
  REQUIRE(learner.memory().count(0) == 1);
  CHECK(learner.memory().at(0).size() <= n);
  for (const auto& m : learner.memory().at(0))
    CHECK(std::find(s.data[0].train.begin(), s.data[0].train.end(), m) != s.data[0].train.end());
  const auto mix = learner.build_replay_mix(1, static_cast<int>(s.data[1].train.size()), learner.model());
  for (const auto& r : mix.samples) {
    CHECK(r.task == 0);
    CHECK(std::find(learner.memory().at(0).begin(), learner.memory().at(0).end(), r.sample) !=
          learner.memory().at(0).end());
  }
}

TEST_CASE("a seeded run is reproducible") {
  const Stream s(9, 2, 40);
  const auto a = run_stream(s.data, s.specs, tiny_model(), LossConfig{}, quick(Strategy::pcll));
  const auto b = run_stream(s.data, s.specs, tiny_model(), LossConfig{}, quick(Strategy::pcll));
  REQUIRE(a.loss_log.size() == b.loss_log.size());
  for (std::size_t i = 0; i < a.loss_log.size(); ++i) REQUIRE(a.loss_log[i].loss == b.loss_log[i].loss);
  CHECK(a.final_hash == b.final_hash);
  CHECK(a.r.to_csv(a.task_names) == b.r.to_csv(b.task_names));
  CHECK(a.pseudo_inputs == b.pseudo_inputs);
}

TEST_CASE("epochs = 0 leaves every row at the untrained scores") {
  const Stream s(10, 3, 30);
  const auto r = run_stream(s.data, s.specs, tiny_model(), LossConfig{}, quick(Strategy::pcll, 0));
  for (int i = 1; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(r.r.at(i, j) == r.r.at(0, j));
  CHECK(r.loss_log.empty());
}

TEST_CASE("a one-task stream writes a 1x1 matrix and its artifacts") {
  const Stream s(11, 1, 40);
  const auto dir = scratch("one_task");
  StreamOptions opt;
  opt.output_dir = dir;
  const auto r = run_stream(s.data, s.specs, tiny_model(), LossConfig{}, quick(Strategy::pcll), opt);
  CHECK(r.r.n_tasks() == 1);
  CHECK(score_avg(r.r) == r.r.at(0, 0));
  CHECK(std::filesystem::exists(dir / "R.csv"));
  CHECK(std::filesystem::exists(dir / "loss_log.csv"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "task_1.ckpt"));
  const auto report = read_report_csv(dir / "report.csv");
  const auto score = std::find_if(report.begin(), report.end(), [](const ReportRow& row) { return row.metric == "score"; });
  REQUIRE(score != report.end());
  CHECK(std::abs(score->value - score_avg(r.r)) < 1e-4);
}

TEST_CASE("pseudo dumps and reports round-trip") {
  const auto dir = scratch("dump");
  PseudoDump d;
  d.task = "alarm";
  d.requested = 3;
  d.attempts = 4;
  d.accepted = 2;
  d.rejects[PseudoStatus::overflow] = 1;
  d.rejects[PseudoStatus::bad_output] = 1;
  d.dist[0] = 0.5;
  d.dist[3] = 1.0;
  d.records.push_back({PseudoStatus::ok, {"wake", "me", "up"}, Sample{{"wake", "me", "up"}, "set alarm", {}, Provenance::pseudo}});
  d.records.push_back({PseudoStatus::overflow, {"la", "la"}, std::nullopt});
  d.records.push_back({PseudoStatus::bad_output, {"hm"}, std::nullopt});
  d.records.push_back({PseudoStatus::ok, {"alarm", "at", "six"}, Sample{{"alarm", "at", "six"}, "set alarm", {}, Provenance::pseudo}});
  write_pseudo_dump(dir / "d.jsonl", d, TaskKind::intent);
  const auto back = read_pseudo_dump(dir / "d.jsonl", TaskKind::intent);
  CHECK(back.task == d.task);
  CHECK(back.requested == 3);
  CHECK(back.attempts == 4);
  CHECK(back.accepted == 2);
  CHECK(back.rejects == d.rejects);
  CHECK(back.dist[0] == 0.5);
  CHECK(back.dist[3] == 1.0);
  REQUIRE(back.records.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.records[i].status == d.records[i].status);
    CHECK(back.records[i].x == d.records[i].x);
    CHECK(back.records[i].sample.has_value() == d.records[i].sample.has_value());
    if (d.records[i].sample) CHECK(back.records[i].sample->intent == d.records[i].sample->intent);
  }
  {
    std::ofstream bad(dir / "bad.jsonl");
    bad << "{not json\n";
  }
  CHECK_THROWS(read_pseudo_dump(dir / "bad.jsonl", TaskKind::intent));

  const std::vector<ReportRow> rows{{"score", 91.25}, {"lca", 60.5}, {"dist_1", 0.125}};
  write_report_csv(dir / "report.csv", rows);
  const auto rb = read_report_csv(dir / "report.csv");
  REQUIRE(rb.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(rb[i].metric == rows[i].metric);
    CHECK(rb[i].value == doctest::Approx(rows[i].value));
  }
}

TEST_CASE("the solver learns one task; it labels real inputs for the probe") {
  // Plain LM training isolates the solver; the latent terms are exercised by
  // the stream tests and the acceptance runs.
  const Stream s(12, 1, 300);
  ModelConfig mc;
  mc.vocab_size = s.vocab.size();
  Learner learner(mc, LossConfig{}, quick(Strategy::finetune, 5), s.vocab, s.specs);
  learner.train_task(0, s.data[0].train, {}, nullptr);
  CHECK(learner.evaluate_task(0, s.data[0].train) > 90.0);

  std::vector<std::vector<std::string>> xs;
  for (int i = 0; i < 50; ++i) xs.push_back(s.data[0].train[static_cast<std::size_t>(i)].utterance);
  const auto labeled = label_pseudo_inputs(learner.model(), learner.spec(0), s.vocab, xs, 8);
  int correct = 0;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    if (!labeled[i].sample) continue;
    CHECK(labeled[i].sample->provenance == Provenance::pseudo);
    correct += labeled[i].sample->intent == s.data[0].train[i].intent;
  }
  CHECK(correct >= 40);
}

TEST_CASE("unparseable generations are rejected with a reason") {
  const Stream s(13, 1, 20);
  ModelConfig mc = tiny_model();
  mc.vocab_size = s.vocab.size();
  const Model m(mc, 13);
  // an untrained model stops at the label cap without closing the output
  const std::vector<std::vector<std::string>> xs{{"hello"}, {"there"}};
  const auto labeled = label_pseudo_inputs(m, s.specs[0], s.vocab, xs, 1);
  for (const auto& r : labeled) {
    if (r.status == ParseStatus::ok) continue;
    CHECK_FALSE(r.sample.has_value());
  }
  CHECK(parse_pseudo_status(to_string(PseudoStatus::empty_y)) == PseudoStatus::empty_y);
  CHECK_THROWS(parse_pseudo_status("nope"));
}

// The prior only learns task structure if the posterior carries
// information; a collapsed posterior leaves every task prior at N(0, I).
TEST_SUITE("latent_separation") {
TEST_CASE("trained task priors are distinct") {
  const Stream s(5, 2, 150);
  ModelConfig mc;
  mc.vocab_size = s.vocab.size();
  Learner learner(mc, LossConfig{}, quick(Strategy::pcll, 5), s.vocab, s.specs);
  learner.train_task(0, s.data[0].train, {}, nullptr);
  const Model teacher = learner.snapshot_teacher();
  const auto mix = learner.build_replay_mix(1, static_cast<int>(s.data[1].train.size()), teacher);
  learner.train_task(1, s.data[1].train, mix.samples, &teacher);

  NoGradGuard no_grad;
  const Model& m = learner.model();
  auto prior_of = [&](int t) {
    std::vector<int> ids{Vocab::kBos};
    const auto pre = s.vocab.encode(learner.spec(t).prefix);
    ids.insert(ids.end(), pre.begin(), pre.end());
    PackedBatch pb;
    pb.add(ids);
    const RowSpan span{1, static_cast<int>(ids.size())};
    return m.prior_forward(m.pool(m.forward(pb).hidden, {&span, 1}, PoolQuery::prefix));
  };
  const GaussianDiag p0 = prior_of(0);
  const GaussianDiag p1 = prior_of(1);
  const float kl = kl_diag_gauss(p0, p1).data()[0];
  MESSAGE("KL(prior_0 || prior_1) = " << kl);
  CHECK(kl > 0.1f);
}
}  // TEST_SUITE
