#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "flowseg/autodiff.hpp"
#include "flowseg/engine.hpp"
#include "flowseg/flowdata.hpp"
#include "flowseg/membank.hpp"
#include "flowseg/model.hpp"
#include "flowseg/network.hpp"
#include "flowseg/rng.hpp"

namespace flowseg::trainer {

struct LossWeights {
  double bce = 1.0;
  double dice = 1.0;
  double cal = 0.5;
};

struct TrainConfig {
  std::uint64_t seed = 0;       ///< initialisation, prompt sampling, flow order
  std::uint64_t data_seed = 0;  ///< training-set generation
  std::size_t steps = 3000;
  double learning_rate = 1e-3;
  std::size_t batch_flows = 2;
  double prompt_prob_volumetric = 0.25;
  double prompt_prob_unordered = 0.3;
  LossWeights loss;
  double clip_norm = 1.0;  ///< global gradient-norm clip; 0 disables
  std::size_t n_volumetric = 300;
  std::size_t n_unordered = 300;
  std::size_t frames_per_flow = 8;
  std::size_t image_size = 64;
  ModelConfig model;
  membank::BankConfig bank;  ///< mode is overridden per flow
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  std::size_t log_every = 50;

  void validate() const;
};

// ---- losses ---------------------------------------------------------------------

struct LossParts {
  double bce = 0, dice = 0, cal = 0;
  double total() const { return bce + dice + cal; }
};

/// lambda_bce * BCE + lambda_dice * (1 - softDice), eps = 1. Throws
/// ArgumentError on a non-binary target.
double seg_loss(const Tensor& logits, const Mask& gt, const LossWeights& w = {});
/// (confidence - dice)^2; throws ArgumentError outside [0,1].
double calib_loss(double confidence, double actual_dice);

ad::Var seg_loss(ad::Graph& g, ad::Var logits, const Tensor& target, const LossWeights& w, LossParts* parts = nullptr);

Tensor mask_target(const Mask& m);

// ---- prompt schedule --------------------------------------------------------------

struct PromptSample {
  std::vector<std::size_t> frames;  ///< ascending
  bool forced = false;              ///< frame 0 was forced because none was drawn
};

PromptSample sample_prompts(const Flow& flow, Rng& rng, const TrainConfig& config);
PromptSample sample_prompts(std::size_t n_frames, double probability, Rng& rng);

// ---- training -----------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  LossParts loss;
  double grad_norm = 0;
  std::size_t frames = 0;
};

struct EvalRecord {
  std::size_t step = 0;
  double dice = 0, iou = 0, hd95 = 0, spearman = 0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  void write_jsonl(std::ostream& out) const;
};

struct Dataset {
  std::vector<Flow> flows;
};

/// Deterministic per-index generation; every flow depends only on (seed, index).
Dataset make_dataset(FlowMode mode, std::size_t count, std::size_t frames, std::size_t size,
                     std::uint64_t seed);
Dataset training_set(const TrainConfig& config);

using ProgressFn = std::function<void(const StepRecord&)>;

/// Throws NumericError naming the step and loss breakdown when a loss is not finite.
std::pair<ModelParams, TrainLog> train(const TrainConfig& config, const ProgressFn& progress = {});

/// Loss of one flow under the training protocol, gradients accumulated into
/// `grads` when non-null. Exposed for tests.
LossParts flow_loss(const ModelParams& params, const Flow& flow, const PromptSample& prompts, Rng& rng,
                    const TrainConfig& config, std::vector<Tensor>* grads);

// ---- gradient check ----------------------------------------------------------------

struct GradCheckOptions {
  std::uint64_t seed = 0;
  std::size_t n_weights = 256;
  double h = 1e-5;
  /// relative error is |a - n| / max(|a| + |n|, floor)
  double floor = 1e-8;
  bool zero_images = false;
  std::string corrupt_op;  ///< empty: none
  double corrupt_factor = 2.0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  bool grads_finite = true;
};

GradCheckResult grad_check(const GradCheckOptions& options = {});

// ---- evaluation ----------------------------------------------------------------------

enum class EvalMemory { none, fifo, confidence_first, native };
EvalMemory parse_eval_memory(std::string_view text);

struct FrameScore {
  std::size_t flow = 0, frame = 0;
  double dice = 0, iou = 0;
  std::optional<double> hd95;
  double confidence = 0;
};

struct MetricSummary {
  std::size_t flows = 0, frames = 0;
  double mean_dice = 0, mean_iou = 0, mean_hd95 = 0;
  std::size_t hd95_frames = 0, hd95_excluded = 0;
  double spearman = 0;
  std::vector<FrameScore> per_frame;
};

struct EvalOptions {
  EvalMemory memory = EvalMemory::native;
  PromptKind prompt_kind = PromptKind::mask;
  std::size_t prompt_frame = 0;
  std::uint64_t prompt_seed = 0;
  bool include_prompted = false;
  membank::BankConfig bank;
};

/// Predicts every frame of `flow` from one prompt.
using FlowPredictor = std::function<std::vector<net::MaskPrediction>(const Flow&, const Prompt&)>;

FlowPredictor engine_predictor(std::shared_ptr<const ModelParams> params, const EvalOptions& options);
MetricSummary evaluate(const std::vector<Flow>& flows, const FlowPredictor& predictor, const EvalOptions& options = {});
MetricSummary evaluate(std::shared_ptr<const ModelParams> params, const std::vector<Flow>& flows,
                       const EvalOptions& options = {});

/// Held-out sets, disjoint from training data by seed.
std::vector<Flow> heldout_volumetric(std::size_t count = 30, std::size_t frames = 8, std::size_t size = 64);
std::vector<Flow> heldout_unordered(std::size_t count = 30, std::size_t frames = 16, std::size_t size = 64);

}  // namespace flowseg::trainer
