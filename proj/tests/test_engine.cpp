#include <doctest.h>

#include <algorithm>
#include <memory>
#include <set>

#include "flowseg/engine.hpp"
#include "flowseg/errors.hpp"

using namespace flowseg;
using namespace flowseg::engine;

namespace {

std::shared_ptr<const ModelParams> tiny_params() {
  static auto p = std::make_shared<const ModelParams>(ModelConfig::tiny(), 5);
  return p;
}

Prompt mask_prompt(const Flow& f, std::size_t frame) {
  return auto_prompt(f.frames[frame].mask, PromptKind::mask, 0, frame);
}

void check_bank_invariants(const membank::MemoryBank& bank) {
  CHECK(bank.candidates().size() <= bank.config().capacity);
  for (const auto& t : bank.templates()) CHECK(t.is_template);
}

}  // namespace

TEST_CASE("visitation order") {
  const std::size_t three[] = {3};
  CHECK(visitation_order(FlowMode::volumetric, 8, three) == std::vector<std::size_t>{3, 4, 5, 6, 7, 2, 1, 0});
  CHECK(visitation_order(FlowMode::volumetric, 8, three, true) == std::vector<std::size_t>{3, 4, 5, 6, 7});
  CHECK(visitation_order(FlowMode::unordered, 6, three) == std::vector<std::size_t>{3, 4, 5, 0, 1, 2});
  const std::size_t two[] = {5, 2};
  CHECK(visitation_order(FlowMode::volumetric, 7, two) == std::vector<std::size_t>{2, 3, 4, 5, 6, 1, 0});
  const std::size_t zero[] = {0};
  CHECK(visitation_order(FlowMode::volumetric, 1, zero) == std::vector<std::size_t>{0});
}

TEST_CASE("session configuration") {
  const Flow v = generate_volume_flow(1, 4, TaskClass::ellipse, 16);
  const Flow u = generate_unordered_flow(1, 4, TaskClass::ellipse, 16);
  Session s = start_session(v, tiny_params(), default_session_config(FlowMode::volumetric));
  CHECK(std::none_of(s.predictions().begin(), s.predictions().end(), [](const auto& p) { return p.has_value(); }));
  CHECK(s.predictions().size() == 4);
  CHECK(s.bank().config().mode == membank::BankMode::fifo);
  CHECK(s.memory_use() == MemoryUse::uniform);
  CHECK_THROWS_AS(start_session(v, tiny_params(), default_session_config(FlowMode::unordered)), ConfigError);
  CHECK_THROWS_AS(start_session(u, tiny_params(), default_session_config(FlowMode::volumetric)), ConfigError);
  Session t = start_session(u, tiny_params(), default_session_config(FlowMode::unordered));
  CHECK(t.memory_use() == MemoryUse::similarity);
  CHECK(t.id() != s.id());
  SessionConfig loose = default_session_config(FlowMode::unordered);
  loose.enforce_mode_pairing = false;
  CHECK_NOTHROW(start_session(v, tiny_params(), loose));
  const Flow odd = generate_volume_flow(1, 2, TaskClass::ellipse, 18);
  CHECK_THROWS_AS(start_session(odd, tiny_params()), ShapeError);
}

TEST_CASE("session ids are unique") {
  const Flow v = generate_volume_flow(1, 1, TaskClass::ellipse, 16);
  std::set<std::string> ids;
  for (int i = 0; i < 200; ++i) ids.insert(start_session(v, tiny_params()).id());
  CHECK(ids.size() == 200);
}

TEST_CASE("prompting") {
  const Flow v = generate_volume_flow(2, 5, TaskClass::ring, 16);
  Session s = start_session(v, tiny_params());
  CHECK_THROWS_AS(propagate(s), UsageError);
  const auto first = add_prompt(s, 2, mask_prompt(v, 2));
  REQUIRE(s.predictions()[2]);
  CHECK(*s.predictions()[2] == first);
  CHECK(s.bank().templates().size() == 1);
  const auto second = add_prompt(s, 2, Prompt{2, PointPrompt{8, 8, true}});
  CHECK(*s.predictions()[2] == second);
  CHECK(s.prompt_log().size() == 2);
  CHECK(s.prompt_log()[0].frame_index == 2);
  CHECK_THROWS_AS(add_prompt(s, 5, Prompt{5, PointPrompt{1, 1, true}}), ArgumentError);
  CHECK_THROWS_AS(add_prompt(s, 1, Prompt{1, PointPrompt{16, 1, true}}), ArgumentError);
  CHECK(s.prompt_log().size() == 2);
}

TEST_CASE("propagation covers every frame, deterministically") {
  const Flow v = generate_volume_flow(3, 8, TaskClass::ellipse, 16);
  Session s = start_session(v, tiny_params());
  add_prompt(s, 3, mask_prompt(v, 3));
  const auto r1 = propagate(s);
  CHECK(r1.order == std::vector<std::size_t>{3, 4, 5, 6, 7, 2, 1, 0});
  CHECK(r1.masks.size() == 8);
  for (const auto& p : s.predictions()) CHECK(p.has_value());
  CHECK(r1.bank_snapshots.size() == r1.order.size());
  for (const auto& snap : r1.bank_snapshots) {
    CHECK(snap.entries.size() <= 1 + membank::BankConfig{}.capacity);
    CHECK(snap.entries.front().is_template);
  }
  const auto r2 = propagate(s);
  CHECK(r2.masks == r1.masks);
  CHECK(r2.bank_snapshots == r1.bank_snapshots);

  Session t = start_session(v, tiny_params());
  add_prompt(t, 3, mask_prompt(v, 3));
  CHECK(propagate(t).masks == r1.masks);
  check_bank_invariants(s.bank());
}

TEST_CASE("one prompt suffices for unordered flows") {
  const Flow u = generate_unordered_flow(4, 6, TaskClass::polygon_blob, 16);
  Session s = start_session(u, tiny_params(), default_session_config(FlowMode::unordered));
  add_prompt(s, 0, Prompt{0, PointPrompt{8, 8, true}});
  const auto r = propagate(s);
  CHECK(r.order == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
  for (const auto& m : r.masks) CHECK(m.mask.height == 16);
  double total = 0;
  for (const auto& pk : r.bank_snapshots.back().last_pickup) total += pk.weight;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  check_bank_invariants(s.bank());
  // similarity ordering visits every frame once, template first
  SessionConfig cfg = default_session_config(FlowMode::unordered);
  cfg.similarity_order = true;
  Session t = start_session(u, tiny_params(), cfg);
  add_prompt(t, 2, Prompt{2, PointPrompt{8, 8, true}});
  auto order = propagate(t).order;
  CHECK(order.front() == 2);
  std::sort(order.begin(), order.end());
  CHECK(order == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("single-frame flow") {
  const Flow v = generate_volume_flow(7, 1, TaskClass::ellipse, 16);
  Session s = start_session(v, tiny_params());
  const auto pred = add_prompt(s, 0, mask_prompt(v, 0));
  const auto r = propagate(s);
  REQUIRE(r.masks.size() == 1);
  CHECK(r.masks[0] == pred);
}

TEST_CASE("refinement") {
  const Flow v = generate_volume_flow(8, 6, TaskClass::ring, 16);
  auto fresh = [&] {
    Session s = start_session(v, tiny_params());
    add_prompt(s, 0, mask_prompt(v, 0));
    propagate(s);
    return s;
  };
  {
    Session s = fresh();
    CHECK_THROWS_AS(refine_from(s, 6, Prompt{6, PointPrompt{1, 1, true}}), ArgumentError);
  }
  {
    Session unpropagated = start_session(v, tiny_params());
    add_prompt(unpropagated, 0, mask_prompt(v, 0));
    CHECK_THROWS_AS(refine_from(unpropagated, 2, mask_prompt(v, 2)), UsageError);
  }
  {
    // last visited frame: only that frame changes
    Session s = fresh();
    const auto before = s.predictions();
    const auto r = refine_from(s, 5, mask_prompt(v, 5));
    CHECK(r.recomputed == std::vector<std::size_t>{5});
    for (std::size_t i = 0; i < 5; ++i) CHECK(*s.predictions()[i] == *before[i]);
    CHECK(s.bank().templates().size() >= 2);
  }
  {
    // first visited frame: every frame is recomputed
    Session s = fresh();
    auto r = refine_from(s, 0, Prompt{0, PointPrompt{8, 8, true}});
    std::sort(r.recomputed.begin(), r.recomputed.end());
    CHECK(r.recomputed == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
    CHECK(s.bank().templates().size() >= 2);
  }
  {
    // mid-stream: upstream frames keep their predictions, downstream are redone
    Session s = fresh();
    const auto before = s.predictions();
    const auto r = refine_from(s, 3, mask_prompt(v, 3));
    CHECK(r.recomputed == std::vector<std::size_t>{3, 4, 5});
    for (std::size_t i = 0; i < 3; ++i) CHECK(*s.predictions()[i] == *before[i]);
    CHECK(s.prompt_log().size() == 2);
    // refinement matches a replay of the same prompts for downstream frames
    CHECK(r.masks.size() == 6);
  }
}

TEST_CASE("run_frame refuses an unguided frame") {
  const Flow v = generate_volume_flow(1, 2, TaskClass::ellipse, 16);
  ad::Graph g(tiny_params()->tensors(), false);
  membank::MemoryBank bank(membank::BankConfig{});
  CHECK_THROWS_AS(run_frame(g, *tiny_params(), v.frames[0].image, nullptr, bank, MemoryUse::uniform),
                  UsageError);
  CHECK_NOTHROW(run_frame(g, *tiny_params(), v.frames[0].image, nullptr, bank, MemoryUse::none));
}
