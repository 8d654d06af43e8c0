#include <doctest.h>

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "flowseg/errors.hpp"
#include "flowseg/metrics.hpp"
#include "flowseg/trainer.hpp"

using namespace flowseg;
using namespace flowseg::trainer;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.model = ModelConfig::tiny();
  c.image_size = 16;
  c.frames_per_flow = 4;
  c.n_volumetric = 3;
  c.n_unordered = 3;
  c.steps = 3;
  c.log_every = 0;
  return c;
}

}  // namespace

TEST_CASE("seg_loss examples") {
  Mask gt(4, 4);
  for (std::size_t i = 0; i < 16; i += 3) gt.cells[i] = 1;
  Tensor sat(4, 4);
  for (std::size_t i = 0; i < 16; ++i) sat[i] = gt.cells[i] ? 20.0 : -20.0;
  CHECK(seg_loss(sat, gt) < 1e-6);
  CHECK(seg_loss(sat, gt) >= 0.0);

  const LossWeights bce_only{1, 0, 0};
  CHECK(seg_loss(Tensor(4, 4), gt, bce_only) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(std::abs(seg_loss(Tensor(4, 4), gt, bce_only) - std::log(2.0)) < 1e-14);

  // 2x2 against a long-double scalar evaluation
  const long double p[] = {0.8L, 0.2L, 0.6L, 0.4L};
  const int g[] = {1, 0, 1, 0};
  Tensor logits(2, 2);
  Mask m(2, 2);
  long double bce = 0, inter = 0, ps = 0, gs = 0;
  for (int i = 0; i < 4; ++i) {
    logits[i] = double(std::log(p[i] / (1 - p[i])));
    m.cells[i] = g[i];
    bce -= g[i] ? std::log(p[i]) : std::log(1 - p[i]);
    inter += p[i] * g[i];
    ps += p[i];
    gs += g[i];
  }
  const long double expect = bce / 4 + (1 - (2 * inter + 1) / (ps + gs + 1));
  CHECK(std::abs(seg_loss(logits, m) - double(expect)) < 1e-12);
  const LossWeights half{0.5, 2.0, 0};
  const long double expect_w = 0.5L * bce / 4 + 2.0L * (1 - (2 * inter + 1) / (ps + gs + 1));
  CHECK(std::abs(seg_loss(logits, m, half) - double(expect_w)) < 1e-12);

  Mask bad(2, 2);
  bad.cells[1] = 2;
  CHECK_THROWS_AS(seg_loss(logits, bad), ArgumentError);
  CHECK_THROWS_AS(seg_loss(Tensor(3, 3), m), ShapeError);
}

TEST_CASE("calib_loss examples") {
  CHECK(calib_loss(0.7, 0.7) == 0.0);
  CHECK(calib_loss(1.0, 0.0) == 1.0);
  CHECK(calib_loss(0.9, 0.6) == doctest::Approx(0.09).epsilon(1e-12));
  CHECK_THROWS_AS(calib_loss(1.1, 0.5), ArgumentError);
  CHECK_THROWS_AS(calib_loss(0.5, -0.1), ArgumentError);
}

TEST_CASE("prompt schedule") {
  Rng rng(1);
  const auto all = sample_prompts(8, 1.0, rng);
  CHECK(all.frames == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(!all.forced);
  const auto none = sample_prompts(8, 0.0, rng);
  CHECK(none.frames == std::vector<std::size_t>{0});
  CHECK(none.forced);
  CHECK_THROWS_AS(sample_prompts(0, 0.5, rng), ArgumentError);

  for (double p : {0.25, 0.3}) {
    Rng r(42);
    std::size_t drawn = 0;
    for (int i = 0; i < 10000; ++i) {
      const auto s = sample_prompts(8, p, r);
      if (!s.forced) drawn += s.frames.size();
    }
    CHECK(std::abs(double(drawn) / 80000.0 - p) <= 0.02);
  }
  TrainConfig cfg;
  Flow u;
  u.mode = FlowMode::unordered;
  u.frames.resize(4);
  Rng r2(3), r3(3);
  CHECK(sample_prompts(u, r2, cfg).frames == sample_prompts(4, 0.3, r3).frames);
}

TEST_CASE("datasets are generated per index") {
  const auto a = make_dataset(FlowMode::volumetric, 5, 3, 16, 9);
  const auto b = make_dataset(FlowMode::volumetric, 3, 3, 16, 9);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.flows[i] == b.flows[i]);
  CHECK(a.flows[0].task_class != a.flows[1].task_class);
  const auto u = make_dataset(FlowMode::unordered, 1, 3, 16, 9);
  CHECK(u.flows[0].mode == FlowMode::unordered);
  TrainConfig cfg;
  cfg.n_volumetric = 2;
  cfg.n_unordered = 2;
  const auto train = training_set(cfg);
  CHECK(train.flows.size() == 4);
  const auto held = heldout_volumetric(2);
  CHECK(held[0] != train.flows[0]);
  CHECK(held[0].size() == 8);
  CHECK(heldout_unordered(1)[0].size() == 16);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.prompt_prob_unordered = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_flows = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("training with zero steps returns the initial parameters") {
  TrainConfig c = tiny_config();
  c.steps = 0;
  const auto [params, log] = train(c);
  CHECK(params == ModelParams(c.model, c.seed));
  CHECK(log.steps.empty());
}

TEST_CASE("training is deterministic and logs every step") {
  const TrainConfig c = tiny_config();
  std::size_t seen = 0;
  const auto a = train(c, [&](const StepRecord&) { ++seen; });
  const auto b = train(c);
  CHECK(seen == 3);
  CHECK(encode_checkpoint(a.first) == encode_checkpoint(b.first));
  CHECK(a.first != ModelParams(c.model, c.seed));
  CHECK(a.first.step == 3);
  REQUIRE(a.second.steps.size() == 3);
  for (const auto& s : a.second.steps) {
    CHECK(std::isfinite(s.loss.total()));
    CHECK(s.loss.total() >= 0.0);
    CHECK(s.frames > 0);
  }
  std::ostringstream out;
  a.second.write_jsonl(out);
  std::istringstream in(out.str());
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    ++lines;
  }
  CHECK(lines == 3);

  TrainConfig other = c;
  other.seed = 1;
  CHECK(encode_checkpoint(train(other).first) != encode_checkpoint(a.first));
}

TEST_CASE("checkpoints are written during training") {
  TrainConfig c = tiny_config();
  c.steps = 2;
  c.checkpoint_every = 1;
  c.checkpoint_dir = std::filesystem::temp_directory_path() / "flowseg_ckpt_test";
  std::filesystem::remove_all(c.checkpoint_dir);
  const auto [params, log] = train(c);
  CHECK(std::filesystem::exists(c.checkpoint_dir / "step_1.ckpt"));
  CHECK(load_checkpoint(c.checkpoint_dir / "step_2.ckpt") == params);
  std::filesystem::remove_all(c.checkpoint_dir);
}

TEST_CASE("non-finite training aborts with a numeric error") {
  TrainConfig c = tiny_config();
  c.learning_rate = 1e300;
  c.clip_norm = 0;
  CHECK_THROWS_AS(train(c), NumericError);
}

TEST_CASE("flow loss and gradients") {
  const TrainConfig c = tiny_config();
  const ModelParams p(c.model, 0);
  const Flow f = generate_unordered_flow(3, 4, TaskClass::ring, 16);
  Rng rng(0);
  std::vector<Tensor> grads;
  for (const auto& t : p.tensors()) grads.push_back(Tensor::zeros_like(t));
  const LossParts parts = flow_loss(p, f, PromptSample{{0, 2}, false}, rng, c, &grads);
  CHECK(parts.bce > 0);
  CHECK(parts.dice > 0);
  CHECK(parts.cal >= 0);
  double norm = 0;
  for (const auto& g : grads) {
    CHECK(g.all_finite());
    for (double x : g.storage()) norm += x * x;
  }
  CHECK(norm > 0);
  Rng rng2(0);
  CHECK(flow_loss(p, f, PromptSample{{0, 2}, false}, rng2, c, nullptr).total() == parts.total());
}

TEST_CASE("gradient check") {
  GradCheckOptions o;
  o.n_weights = 48;
  const auto ok = grad_check(o);
  CHECK(ok.checked == 48);
  CHECK(ok.max_rel_error < 1e-4);
  CHECK(ok.grads_finite);

  GradCheckOptions bad = o;
  bad.corrupt_op = "matmul";
  CHECK(grad_check(bad).max_rel_error > 0.1);

  GradCheckOptions zero = o;
  zero.zero_images = true;
  const auto z = grad_check(zero);
  CHECK(z.grads_finite);
  CHECK(z.max_rel_error < 1e-4);
}

TEST_CASE("evaluate") {
  const auto empty = evaluate(std::vector<Flow>{}, [](const Flow&, const Prompt&) {
    return std::vector<net::MaskPrediction>{};
  });
  CHECK(empty.flows == 0);
  CHECK(empty.frames == 0);
  CHECK(empty.mean_dice == 0.0);
  CHECK(empty.mean_hd95 == 0.0);
  CHECK(empty.spearman == 0.0);

  const auto flows = make_dataset(FlowMode::unordered, 4, 5, 32, 2).flows;
  const FlowPredictor oracle = [](const Flow& f, const Prompt&) {
    std::vector<net::MaskPrediction> out;
    for (const auto& fr : f.frames) {
      net::MaskPrediction p;
      p.mask = fr.mask;
      p.probs = Tensor(fr.mask.height, fr.mask.width);
      for (std::size_t i = 0; i < fr.mask.cells.size(); ++i) p.probs[i] = fr.mask.cells[i];
      p.confidence = 1.0;
      out.push_back(p);
    }
    return out;
  };
  const auto perfect = evaluate(flows, oracle);
  CHECK(perfect.flows == 4);
  CHECK(perfect.frames == 16);
  CHECK(perfect.mean_dice == 1.0);
  CHECK(perfect.mean_iou == 1.0);
  CHECK(perfect.mean_hd95 == 0.0);
  EvalOptions with_prompted;
  with_prompted.include_prompted = true;
  CHECK(evaluate(flows, oracle, with_prompted).frames == 20);

  const FlowPredictor short_pred = [](const Flow&, const Prompt&) { return std::vector<net::MaskPrediction>(1); };
  CHECK_THROWS_AS(evaluate(flows, short_pred), ShapeError);

  CHECK(parse_eval_memory("none") == EvalMemory::none);
  CHECK(parse_eval_memory("confidence") == EvalMemory::confidence_first);
  CHECK(parse_eval_memory("fifo") == EvalMemory::fifo);
  CHECK_THROWS_AS(parse_eval_memory("lru"), ArgumentError);
}

TEST_CASE("engine-backed evaluation runs every memory mode") {
  auto p = std::make_shared<const ModelParams>(ModelConfig::tiny(), 1);
  const auto flows = make_dataset(FlowMode::unordered, 2, 4, 16, 5).flows;
  for (auto mode : {EvalMemory::none, EvalMemory::fifo, EvalMemory::confidence_first, EvalMemory::native}) {
    EvalOptions o;
    o.memory = mode;
    const auto s = evaluate(p, flows, o);
    CHECK(s.frames == 6);
    CHECK((s.mean_dice >= 0.0 && s.mean_dice <= 1.0));
    CHECK(s.hd95_frames + s.hd95_excluded == 6);
  }
}
