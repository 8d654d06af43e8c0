#include "flowseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "flowseg/errors.hpp"
#include "flowseg/metrics.hpp"

namespace flowseg::trainer {

using ad::Var;

void TrainConfig::validate() const {
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0,1]");
  };
  prob(prompt_prob_volumetric, "prompt_prob_volumetric");
  prob(prompt_prob_unordered, "prompt_prob_unordered");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_flows == 0) throw ConfigError("batch_flows must be at least 1");
  if (frames_per_flow == 0) throw ConfigError("frames_per_flow must be at least 1");
  if (n_volumetric + n_unordered == 0 && steps > 0) throw ConfigError("empty training set");
  if (loss.bce < 0 || loss.dice < 0 || loss.cal < 0) throw ConfigError("loss weights must be non-negative");
  if (clip_norm < 0) throw ConfigError("clip_norm must be non-negative");
  model.validate();
  bank.validate();
  if (image_size % model.patch) throw ConfigError("image size must be divisible by the patch size");
}

// ---- losses ------------------------------------------------------------------

Tensor mask_target(const Mask& m) {
  Tensor t(m.cells.size(), 1);
  for (std::size_t i = 0; i < m.cells.size(); ++i) {
    if (m.cells[i] > 1) throw ArgumentError("target mask is not binary");
    t[i] = m.cells[i];
  }
  return t;
}

Var seg_loss(ad::Graph& g, Var logits, const Tensor& target, const LossWeights& w, LossParts* parts) {
  const Var bce = ad::bce_with_logits(logits, target);
  const Var soft = ad::soft_dice(logits, target, 1.0);
  const Var dice_term = ad::scale(ad::sub(g.constant(Tensor(1, 1, 1.0)), soft), w.dice);
  if (parts) {
    parts->bce += w.bce * g.value(bce)[0];
    parts->dice += g.value(dice_term)[0];
  }
  return ad::add(ad::scale(bce, w.bce), dice_term);
}

double seg_loss(const Tensor& logits, const Mask& gt, const LossWeights& w) {
  if (logits.size() != gt.cells.size()) throw ShapeError("logits and mask differ in size");
  ad::Graph g({}, false);
  const Var l = g.constant(Tensor({logits.size(), 1}, logits.storage()));
  return g.value(seg_loss(g, l, mask_target(gt), w))[0];
}

double calib_loss(double confidence, double actual_dice) {
  if (!(confidence >= 0 && confidence <= 1) || !(actual_dice >= 0 && actual_dice <= 1)) {
    throw ArgumentError("confidence and dice must lie in [0,1]");
  }
  const double d = confidence - actual_dice;
  return d * d;
}

// ---- prompt schedule ---------------------------------------------------------------

PromptSample sample_prompts(std::size_t n_frames, double probability, Rng& rng) {
  if (n_frames == 0) throw ArgumentError("cannot sample prompts for an empty flow");
  PromptSample s;
  for (std::size_t i = 0; i < n_frames; ++i)
    if (rng.bernoulli(probability)) s.frames.push_back(i);
  if (s.frames.empty()) {
    s.frames.push_back(0);
    s.forced = true;
  }
  return s;
}

PromptSample sample_prompts(const Flow& flow, Rng& rng, const TrainConfig& config) {
  const double p = flow.mode == FlowMode::volumetric ? config.prompt_prob_volumetric : config.prompt_prob_unordered;
  return sample_prompts(flow.size(), p, rng);
}

// ---- data --------------------------------------------------------------------------

Dataset make_dataset(FlowMode mode, std::size_t count, std::size_t frames, std::size_t size, std::uint64_t seed) {
  Dataset d;
  d.flows.resize(count);
  const std::uint64_t base = mix_seed(seed, static_cast<std::uint64_t>(mode));
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < count; ++i) {
    const auto cls = static_cast<TaskClass>(i % kTaskClassCount);
    const std::uint64_t s = mix_seed(base, i);
    d.flows[i] = mode == FlowMode::volumetric ? generate_volume_flow(s, frames, cls, size)
                                              : generate_unordered_flow(s, frames, cls, size);
  }
  return d;
}

Dataset training_set(const TrainConfig& config) {
  Dataset all = make_dataset(FlowMode::volumetric, config.n_volumetric, config.frames_per_flow, config.image_size,
                             config.data_seed);
  Dataset un = make_dataset(FlowMode::unordered, config.n_unordered, config.frames_per_flow, config.image_size,
                            config.data_seed);
  std::move(un.flows.begin(), un.flows.end(), std::back_inserter(all.flows));
  return all;
}

namespace {

constexpr std::uint64_t kHeldoutSeed = 0x48454c444f5554ull;

Prompt training_prompt(const Mask& gt, std::size_t frame, Rng& rng) {
  auto kind = static_cast<PromptKind>(rng.below(3));
  if (gt.empty()) kind = PromptKind::mask;
  return auto_prompt(gt, kind, rng.next(), frame);
}

membank::BankConfig bank_for(const membank::BankConfig& base, FlowMode mode) {
  membank::BankConfig c = base;
  c.mode = mode == FlowMode::volumetric ? membank::BankMode::fifo : membank::BankMode::confidence_first;
  return c;
}

double hard_dice(const Tensor& logits, const Mask& gt) {
  Mask pred(gt.height, gt.width);
  for (std::size_t i = 0; i < logits.size(); ++i) pred.cells[i] = logits[i] >= 0.0 ? 1 : 0;
  return metrics::dice(pred, gt);
}

struct FrameTerms {
  Var loss;
  LossParts parts;
};

FrameTerms frame_terms(ad::Graph& g, const engine::FrameStep& st, const Mask& gt, const LossWeights& w,
                       double cal_target) {
  FrameTerms t;
  const Var seg = seg_loss(g, st.vars.logits, mask_target(gt), w, &t.parts);
  const Var diff = ad::sub(st.vars.confidence, g.constant(Tensor(1, 1, cal_target)));
  const Var cal = ad::scale(ad::square(diff), w.cal);
  t.parts.cal = g.value(cal)[0];
  t.loss = ad::add(seg, cal);
  return t;
}

}  // namespace

LossParts flow_loss(const ModelParams& params, const Flow& flow, const PromptSample& prompts, Rng& rng,
                    const TrainConfig& config, std::vector<Tensor>* grads) {
  const std::set<std::size_t> prompted(prompts.frames.begin(), prompts.frames.end());
  const auto order = engine::visitation_order(flow.mode, flow.size(), prompts.frames);
  membank::MemoryBank bank(bank_for(config.bank, flow.mode));
  const engine::MemoryUse use = engine::default_memory_use(bank.config().mode);
  LossParts sum;
  // One graph per flow: parameters are fixed across its frames, so memory
  // nodes are built once and shared by every later reader.
  ad::Graph g(params.tensors(), grads != nullptr);
  net::MemoryCache cache;
  std::optional<Var> total;
  for (std::size_t f : order) {
    const Frame& fr = flow.frames[f];
    std::optional<Prompt> prompt;
    if (prompted.count(f)) prompt = training_prompt(fr.mask, f, rng);
    const engine::FrameStep st =
        engine::run_frame(g, params, fr.image, prompt ? &*prompt : nullptr, bank, use, true, nullptr, &cache);
    const FrameTerms t = frame_terms(g, st, fr.mask, config.loss, hard_dice(g.value(st.vars.logits), fr.mask));
    sum.bce += t.parts.bce;
    sum.dice += t.parts.dice;
    sum.cal += t.parts.cal;
    total = total ? ad::add(*total, t.loss) : t.loss;
    bank.insert(net::make_entry(g, st.vars, params, fr.image.height, fr.image.width, f, prompt.has_value(), false));
  }
  if (grads) g.backward(*total, *grads);
  return sum;
}

void TrainLog::write_jsonl(std::ostream& out) const {
  for (const auto& s : steps) {
    nlohmann::json j{{"kind", "step"},   {"step", s.step},          {"loss", s.loss.total()},
                     {"bce", s.loss.bce}, {"dice_loss", s.loss.dice}, {"cal", s.loss.cal},
                     {"grad_norm", s.grad_norm}, {"frames", s.frames}};
    out << j.dump() << '\n';
  }
  for (const auto& e : evals) {
    nlohmann::json j{{"kind", "eval"}, {"step", e.step}, {"dice", e.dice},
                     {"iou", e.iou},   {"hd95", e.hd95}, {"spearman", e.spearman}};
    out << j.dump() << '\n';
  }
}

namespace {

struct Adam {
  double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<Tensor> m, v;
  std::size_t t = 0;

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (m.empty()) {
      m = ad::zero_gradients(params);
      v = ad::zero_gradients(params);
    }
    ++t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k].storage();
      const auto& gk = grads[k].storage();
      auto& mk = m[k].storage();
      auto& vk = v[k].storage();
      for (std::size_t i = 0; i < p.size(); ++i) {
        mk[i] = b1 * mk[i] + (1 - b1) * gk[i];
        vk[i] = b2 * vk[i] + (1 - b2) * gk[i] * gk[i];
        p[i] -= lr * (mk[i] / c1) / (std::sqrt(vk[i] / c2) + eps);
      }
    }
  }
};

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

// Endless shuffled pass over [offset, offset + n).
struct Queue {
  std::vector<std::size_t> items;
  std::size_t pos = 0;
  Queue(std::size_t offset, std::size_t n) : items(n) { std::iota(items.begin(), items.end(), offset); }
  std::size_t next(Rng& rng) {
    if (pos == 0) shuffle(items, rng);
    const std::size_t out = items[pos];
    pos = (pos + 1) % items.size();
    return out;
  }
};

}  // namespace

std::pair<ModelParams, TrainLog> train(const TrainConfig& config, const ProgressFn& progress) {
  config.validate();
  ModelParams params(config.model, config.seed);
  TrainLog log;
  if (config.steps == 0) return {std::move(params), std::move(log)};

  const Dataset data = training_set(config);
  Rng rng(mix_seed(config.seed, 0x7452));
  Queue vol(0, config.n_volumetric), un(config.n_volumetric, config.n_unordered);
  Adam adam;
  adam.lr = config.learning_rate;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    auto grads = ad::zero_gradients(params.tensors());
    StepRecord rec;
    rec.step = step;
    for (std::size_t b = 0; b < config.batch_flows; ++b) {
      // alternate modes so each batch mixes both pipelines
      const bool volumetric = un.items.empty() || (!vol.items.empty() && (step * config.batch_flows + b) % 2 == 0);
      const Flow& flow = data.flows[volumetric ? vol.next(rng) : un.next(rng)];
      const PromptSample prompts = sample_prompts(flow, rng, config);
      const LossParts p = flow_loss(params, flow, prompts, rng, config, &grads);
      rec.loss.bce += p.bce;
      rec.loss.dice += p.dice;
      rec.loss.cal += p.cal;
      rec.frames += flow.size();
    }
    const double inv = 1.0 / static_cast<double>(rec.frames);
    rec.loss.bce *= inv;
    rec.loss.dice *= inv;
    rec.loss.cal *= inv;
    if (!std::isfinite(rec.loss.total())) {
      std::ostringstream msg;
      msg << "loss is not finite at step " << step << " (bce=" << rec.loss.bce << ", dice=" << rec.loss.dice
          << ", cal=" << rec.loss.cal << ")";
      throw NumericError("trainer", msg.str());
    }
    double norm2 = 0;
    for (auto& g : grads) {
      g *= inv;
      for (double v : g.storage()) norm2 += v * v;
    }
    rec.grad_norm = std::sqrt(norm2);
    if (!std::isfinite(rec.grad_norm)) throw NumericError("trainer", "gradient is not finite at step " + std::to_string(step));
    if (config.clip_norm > 0 && rec.grad_norm > config.clip_norm) {
      for (auto& g : grads) g *= config.clip_norm / rec.grad_norm;
    }
    adam.step(params.mutable_tensors(), grads);
    params.step = step;
    log.steps.push_back(rec);
    if (progress) progress(rec);
    if (config.checkpoint_every && !config.checkpoint_dir.empty() &&
        (step % config.checkpoint_every == 0 || step == config.steps)) {
      std::filesystem::create_directories(config.checkpoint_dir);
      save_checkpoint(params, config.checkpoint_dir / ("step_" + std::to_string(step) + ".ckpt"));
    }
  }
  return {std::move(params), std::move(log)};
}

// ---- gradient check ---------------------------------------------------------------

GradCheckResult grad_check(const GradCheckOptions& options) {
  const ModelConfig cfg = ModelConfig::tiny();
  ModelParams params(cfg, mix_seed(options.seed, 1));
  // Perturb the init so no parameter sits at a symmetric point (LN gamma=1, zero biases).
  {
    Rng jitter(mix_seed(options.seed, 2));
    for (auto& t : params.mutable_tensors())
      for (double& v : t.storage()) v += jitter.normal(0.0, 0.05);
  }
  Flow flow = generate_volume_flow(mix_seed(options.seed, 3), 5, TaskClass::ellipse, 16);
  if (options.zero_images) {
    for (auto& fr : flow.frames) std::fill(fr.image.pixels.begin(), fr.image.pixels.end(), 0.0f);
  }
  const LossWeights w{};

  // Detached quantities are frozen at the base parameters: memory sources,
  // pick-up weights and calibration targets.
  struct Frozen {
    std::size_t frame;
    std::optional<Prompt> prompt;
    membank::MemoryBank bank;
    std::vector<double> weights;
    double cal_target;
  };
  std::vector<Frozen> frozen;
  {
    membank::BankConfig bc;
    bc.mode = membank::BankMode::confidence_first;
    bc.diversity_threshold = 1.0;
    membank::MemoryBank bank(bc);
    // mixed prompt kinds so every prompt-encoder path carries gradient
    std::vector<std::optional<Prompt>> prompts(flow.size());
    prompts[0] = auto_prompt(flow.frames[0].mask, PromptKind::mask, 0, 0);
    prompts[2] = auto_prompt(flow.frames[2].mask, PromptKind::point, 5, 2);
    prompts[4] = auto_prompt(flow.frames[4].mask, PromptKind::box, 0, 4);
    for (std::size_t f = 0; f < flow.size(); ++f) {
      const std::optional<Prompt>& pr = prompts[f];
      ad::Graph g(params.tensors(), false);
      const auto st = engine::run_frame(g, params, flow.frames[f].image, pr ? &*pr : nullptr, bank,
                                        engine::MemoryUse::similarity, true);
      frozen.push_back({f, pr, bank, st.weights, hard_dice(g.value(st.vars.logits), flow.frames[f].mask)});
      // threshold 1 keeps every entry in the bank
      bank.insert(net::make_entry(g, st.vars, params, 16, 16, f, pr.has_value(), false));
    }
  }

  auto run = [&](std::vector<Tensor>* grads) {
    ad::Graph g(params.tensors(), grads != nullptr);
    if (!options.corrupt_op.empty()) g.scale_backward_of(options.corrupt_op, options.corrupt_factor);
    net::MemoryCache cache;
    std::optional<Var> total;
    for (const auto& fz : frozen) {
      const auto st = engine::run_frame(g, params, flow.frames[fz.frame].image, fz.prompt ? &*fz.prompt : nullptr,
                                        fz.bank, engine::MemoryUse::similarity, true, &fz.weights, &cache);
      const FrameTerms t = frame_terms(g, st, flow.frames[fz.frame].mask, w, fz.cal_target);
      total = total ? ad::add(*total, t.loss) : t.loss;
    }
    if (grads) g.backward(*total, *grads);
    return g.value(*total)[0];
  };

  auto grads = ad::zero_gradients(params.tensors());
  run(&grads);
  GradCheckResult res;
  for (const auto& g : grads) res.grads_finite = res.grads_finite && g.all_finite();

  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t t = 0; t < params.tensors().size(); ++t)
    for (std::size_t i = 0; i < params.tensors()[t].size(); ++i) slots.emplace_back(t, i);
  Rng pick(mix_seed(options.seed, 4));
  for (std::size_t i = slots.size(); i > 1; --i) std::swap(slots[i - 1], slots[pick.below(i)]);
  const std::size_t n = std::min(options.n_weights, slots.size());
  auto& tensors = params.mutable_tensors();
  for (std::size_t k = 0; k < n; ++k) {
    const auto [t, i] = slots[k];
    const double keep = tensors[t][i];
    tensors[t][i] = keep + options.h;
    const double up = run(nullptr);
    tensors[t][i] = keep - options.h;
    const double down = run(nullptr);
    tensors[t][i] = keep;
    const double num = (up - down) / (2 * options.h);
    const double a = grads[t][i];
    const double rel = std::abs(a - num) / std::max(std::abs(a) + std::abs(num), options.floor);
    res.max_rel_error = std::max(res.max_rel_error, rel);
    ++res.checked;
  }
  return res;
}

// ---- evaluation ----------------------------------------------------------------------

EvalMemory parse_eval_memory(std::string_view text) {
  if (text == "none") return EvalMemory::none;
  if (text == "fifo") return EvalMemory::fifo;
  if (text == "confidence" || text == "confidence_first") return EvalMemory::confidence_first;
  if (text == "native") return EvalMemory::native;
  throw ArgumentError("unknown bank mode '" + std::string(text) + "'");
}

FlowPredictor engine_predictor(std::shared_ptr<const ModelParams> params, const EvalOptions& options) {
  return [params, options](const Flow& flow, const Prompt& prompt) {
    engine::SessionConfig sc = engine::default_session_config(flow.mode);
    sc.bank = options.bank;
    sc.bank.mode = engine::default_session_config(flow.mode).bank.mode;
    switch (options.memory) {
      case EvalMemory::native: break;
      case EvalMemory::fifo: sc.bank.mode = membank::BankMode::fifo; break;
      case EvalMemory::confidence_first: sc.bank.mode = membank::BankMode::confidence_first; break;
      case EvalMemory::none: sc.memory_use = engine::MemoryUse::none; break;
    }
    sc.enforce_mode_pairing = options.memory == EvalMemory::native;
    engine::Session s = engine::start_session(flow, params, sc);
    engine::add_prompt(s, prompt.frame_index, prompt);
    return engine::propagate(s).masks;
  };
}

MetricSummary evaluate(const std::vector<Flow>& flows, const FlowPredictor& predictor, const EvalOptions& options) {
  MetricSummary sum;
  std::vector<double> conf, dices;
  double hd_sum = 0;
  for (std::size_t i = 0; i < flows.size(); ++i) {
    const Flow& flow = flows[i];
    const std::size_t pf = std::min(options.prompt_frame, flow.size() - 1);
    const Prompt prompt = auto_prompt(flow.frames[pf].mask, options.prompt_kind, mix_seed(options.prompt_seed, i), pf);
    const auto preds = predictor(flow, prompt);
    if (preds.size() != flow.size()) throw ShapeError("predictor returned the wrong number of frames");
    ++sum.flows;
    for (std::size_t f = 0; f < flow.size(); ++f) {
      if (f == pf && !options.include_prompted) continue;
      FrameScore fs;
      fs.flow = i;
      fs.frame = f;
      fs.dice = metrics::dice(preds[f].mask, flow.frames[f].mask);
      fs.iou = metrics::iou(preds[f].mask, flow.frames[f].mask);
      fs.confidence = preds[f].confidence;
      if (!preds[f].mask.empty() && !flow.frames[f].mask.empty()) {
        fs.hd95 = metrics::hd95(preds[f].mask, flow.frames[f].mask);
        hd_sum += *fs.hd95;
        ++sum.hd95_frames;
      } else {
        ++sum.hd95_excluded;
      }
      sum.mean_dice += fs.dice;
      sum.mean_iou += fs.iou;
      conf.push_back(fs.confidence);
      dices.push_back(fs.dice);
      sum.per_frame.push_back(fs);
    }
  }
  sum.frames = sum.per_frame.size();
  if (sum.frames) {
    sum.mean_dice /= static_cast<double>(sum.frames);
    sum.mean_iou /= static_cast<double>(sum.frames);
  }
  if (sum.hd95_frames) sum.mean_hd95 = hd_sum / static_cast<double>(sum.hd95_frames);
  sum.spearman = metrics::spearman(conf, dices);
  return sum;
}

MetricSummary evaluate(std::shared_ptr<const ModelParams> params, const std::vector<Flow>& flows,
                       const EvalOptions& options) {
  return evaluate(flows, engine_predictor(std::move(params), options), options);
}

std::vector<Flow> heldout_volumetric(std::size_t count, std::size_t frames, std::size_t size) {
  return make_dataset(FlowMode::volumetric, count, frames, size, kHeldoutSeed).flows;
}

std::vector<Flow> heldout_unordered(std::size_t count, std::size_t frames, std::size_t size) {
  return make_dataset(FlowMode::unordered, count, frames, size, kHeldoutSeed).flows;
}

}  // namespace flowseg::trainer
