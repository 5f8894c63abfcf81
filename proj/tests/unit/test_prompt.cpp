#include <random>

#include "doctest.h"
#include "pcll/data.hpp"
#include "pcll/prompt.hpp"

using namespace pcll;

namespace {

Vocab vocab_for(std::span<const TaskSpec> specs, const std::vector<std::vector<std::string>>& texts) {
  std::vector<std::string> forced = prompt_tokens(specs);
  for (const auto& t : texts) forced.insert(forced.end(), t.begin(), t.end());
  return build_vocab({}, 1, forced);
}

std::string words(const Vocab& v, const RenderedPrompt& r, TokenRange range) {
  std::vector<int> ids(r.ids.begin() + range.begin, r.ids.begin() + range.end);
  const auto w = v.decode(ids);
  return join(w);
}

}  // namespace

TEST_CASE("intent rendering follows the template") {
  const TaskSpec t = make_task_spec("banking", TaskKind::intent);
  const Sample s{tokenize("i already have one of your cards how do i link them"), "card linking", {}, Provenance::real};
  const Vocab v = vocab_for({&t, 1}, {s.utterance, tokenize(s.intent)});
  const auto r = render(t, v, s, true);
  CHECK(r.ids.front() == Vocab::kBos);
  CHECK(r.ids.back() == Vocab::kEos);
  const auto all = v.decode(std::vector<int>(r.ids.begin() + 1, r.ids.end() - 1));
  CHECK(join(all) ==
        "for an utterance from the banking task , i already have one of your cards how do i link them has the "
        "following intent card linking");
  CHECK(words(v, r, r.prefix) == "for an utterance from the banking task ,");
  CHECK(words(v, r, r.postfix) == "has the following intent");
  CHECK(words(v, r, r.y) == "card linking");
  // spans tile the sequence between [BOS] and [EOS]
  CHECK(r.prefix.begin == 1);
  CHECK(r.prefix.end == r.x.begin);
  CHECK(r.x.end == r.postfix.begin);
  CHECK(r.postfix.end == r.y.begin);
  CHECK(r.y.end == r.length() - 1);
}

TEST_CASE("slot rendering and serialization") {
  const TaskSpec t = make_task_spec("mit-restaurant", TaskKind::slot);
  const Sample s{tokenize("a table at casanova near kendall square"),
                 "",
                 {{"Restaurant_name", "casanova"}, {"Location", "kendall square"}},
                 Provenance::real};
  CHECK(join(serialize_output(TaskKind::slot, s)) == "restaurant_name : casanova ; location : kendall square .");
  Sample empty = s;
  empty.slots.clear();
  CHECK(join(serialize_output(TaskKind::slot, empty)) == "no slot in this sentence .");
  const Vocab v = vocab_for({&t, 1}, {s.utterance, tokenize("restaurant_name location")});
  const auto r = render(t, v, s, true);
  CHECK(words(v, r, r.prefix) ==
        "in the mit-restaurant task , if there are any slots and values , what are they in this sentence :");
  CHECK(words(v, r, r.postfix) == "? answer :");
}

TEST_CASE("render without output ends after the postfix") {
  const TaskSpec t = make_task_spec("banking", TaskKind::intent);
  const Sample s{tokenize("hello there"), "greet", {}, Provenance::real};
  const Vocab v = vocab_for({&t, 1}, {s.utterance, {"greet"}});
  const auto r = render(t, v, s, false);
  CHECK_FALSE(r.has_output);
  CHECK(r.postfix.end == r.length());
  CHECK(r.ids.back() != Vocab::kEos);
}

TEST_CASE("no-task-id rendering erases task identity") {
  const TaskSpec a = make_task_spec("banking", TaskKind::intent);
  const TaskSpec b = make_task_spec("clinc", TaskKind::intent);
  const Sample s{tokenize("hello there"), "greet", {}, Provenance::real};
  const std::vector<TaskSpec> specs{a, b, without_task_id(a)};
  const Vocab v = vocab_for(specs, {s.utterance, {"greet"}});
  const auto ra = render_no_task_id(a, v, s, true);
  const auto rb = render_no_task_id(b, v, s, true);
  CHECK(ra.ids == rb.ids);
  CHECK(words(v, ra, ra.prefix) == "for an utterance from the current task ,");
  const auto parsed = parse_generated(without_task_id(a), v, ra.ids);
  REQUIRE(parsed.sample);
  CHECK(parsed.sample->utterance == s.utterance);
  CHECK(parsed.sample->intent == "greet");
}

TEST_CASE("templates are validated") {
  CHECK_THROWS_AS(make_task_spec("t", TaskKind::intent, "{x} from {NAME} task {y}"), DataError);
  CHECK_THROWS_AS(make_task_spec("t", TaskKind::intent, "the {NAME} {NAME} task {x} {y}"), DataError);
  CHECK_THROWS_AS(make_task_spec("t", TaskKind::intent, "the {NAME} task {x} {y}"), DataError);
  for (int p = 1; p <= kIntentTemplatePresets; ++p) CHECK_NOTHROW(make_task_spec("t", TaskKind::intent, intent_template(p)));
}

TEST_CASE("x is truncated to the context; templates never are") {
  const TaskSpec t = make_task_spec("banking", TaskKind::intent);
  Sample s{tokenize("a b c d e f g h i j"), "greet", {}, Provenance::real};
  const Vocab v = vocab_for({&t, 1}, {s.utterance, {"greet"}});
  const int full = render(t, v, s, true).length();
  const auto r = render(t, v, s, true, full - 3);
  CHECK(r.length() == full - 3);
  CHECK(r.x.size() == 7);
  CHECK(words(v, r, r.postfix) == "has the following intent");
  CHECK_THROWS_AS(render(t, v, s, true, 10), DataError);
}

TEST_CASE("parse_generated rejects") {
  const TaskSpec t = make_task_spec("banking", TaskKind::intent);
  const Sample s{tokenize("hello there"), "greet", {}, Provenance::real};
  const Vocab v = vocab_for({&t, 1}, {s.utterance, {"greet"}});
  auto r = render(t, v, s, true);
  // missing postfix
  std::vector<int> no_post(r.ids.begin(), r.ids.begin() + r.postfix.begin);
  CHECK(parse_generated(t, v, no_post).status == ParseStatus::no_postfix);
  // wrong prefix
  std::vector<int> bad = r.ids;
  bad[2] = v.id("hello");
  CHECK(parse_generated(t, v, bad).status == ParseStatus::no_prefix);
  // empty y
  std::vector<int> no_y(r.ids.begin(), r.ids.begin() + r.postfix.end);
  no_y.push_back(Vocab::kEos);
  CHECK(parse_generated(t, v, no_y).status == ParseStatus::empty_y);
  // empty x
  auto ex = render(t, v, s, true);
  ex.ids.erase(ex.ids.begin() + ex.x.begin, ex.ids.begin() + ex.x.end);
  CHECK(parse_generated(t, v, ex.ids).status == ParseStatus::empty_x);
  // reserved token inside x
  auto sp = r.ids;
  sp[static_cast<std::size_t>(r.x.begin)] = Vocab::kUnk;
  CHECK(parse_generated(t, v, sp).status == ParseStatus::special_token);
  const auto ok = parse_generated(t, v, r.ids);
  REQUIRE(ok.status == ParseStatus::ok);
  CHECK(ok.sample->provenance == Provenance::pseudo);
}

TEST_CASE("slot output parsing") {
  Sample out;
  REQUIRE(parse_output(TaskKind::slot, tokenize("location : boston ; hours : open late ."), out));
  REQUIRE(out.slots.size() == 2);
  CHECK(out.slots[0] == SlotPair{"location", "boston"});
  CHECK(out.slots[1] == SlotPair{"hours", "open late"});
  REQUIRE(parse_output(TaskKind::slot, tokenize("no slot in this sentence ."), out));
  CHECK(out.slots.empty());
  CHECK_FALSE(parse_output(TaskKind::slot, tokenize("location boston ."), out));
  CHECK_FALSE(parse_output(TaskKind::slot, tokenize(": boston ."), out));
  CHECK_FALSE(parse_output(TaskKind::slot, tokenize("location : ; a : b"), out));
}

TEST_CASE("render then parse round-trips (fuzzed)") {
  std::mt19937_64 rng(42);
  const std::vector<std::string> pool{"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"};
  const std::vector<std::string> types{"loc", "time", "food"};
  for (TaskKind kind : {TaskKind::intent, TaskKind::slot}) {
    std::vector<TaskSpec> specs;
    if (kind == TaskKind::intent)
      for (int p = 1; p <= kIntentTemplatePresets; ++p) specs.push_back(make_task_spec("task" + std::to_string(p), kind, intent_template(p)));
    else
      specs.push_back(make_task_spec("slots", kind));
    std::vector<std::vector<std::string>> texts{pool, types};
    const Vocab v = vocab_for(specs, texts);
    for (int trial = 0; trial < 300; ++trial) {
      const auto& spec = specs[std::uniform_int_distribution<std::size_t>(0, specs.size() - 1)(rng)];
      Sample s;
      const int len = std::uniform_int_distribution<int>(1, 8)(rng);
      for (int i = 0; i < len; ++i) s.utterance.push_back(pool[rng() % pool.size()]);
      if (kind == TaskKind::intent) {
        s.intent = pool[rng() % pool.size()];
      } else {
        const int n = std::uniform_int_distribution<int>(0, 3)(rng);
        for (int i = 0; i < n; ++i) {
          std::string value = pool[rng() % pool.size()];
          if (rng() % 2) value += " " + pool[rng() % pool.size()];
          s.slots.push_back({types[rng() % types.size()], value});
        }
      }
      const auto r = render(spec, v, s, true);
      const auto parsed = parse_generated(spec, v, r.ids);
      REQUIRE(parsed.status == ParseStatus::ok);
      CHECK(parsed.sample->utterance == s.utterance);
      CHECK(parsed.sample->intent == s.intent);
      CHECK(parsed.sample->slots == s.slots);
    }
  }
}

TEST_CASE("token specs use single special tokens") {
  const TaskSpec t = make_token_spec("Banking", TaskKind::intent);
  CHECK(t.prefix == std::vector<std::string>{"__banking__"});
  CHECK(t.postfix == std::vector<std::string>{"__ans__"});
}
