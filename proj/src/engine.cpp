#include "flowseg/engine.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <set>

#include "flowseg/errors.hpp"

namespace flowseg::engine {
namespace {

std::atomic<std::uint64_t> g_next_session{1};

std::vector<double> mean_tokens(const Tensor& tokens) {
  std::vector<double> out(tokens.cols(), 0.0);
  for (std::size_t r = 0; r < tokens.rows(); ++r)
    for (std::size_t c = 0; c < tokens.cols(); ++c) out[c] += tokens(r, c);
  for (double& v : out) v /= static_cast<double>(tokens.rows());
  return out;
}

membank::MemoryBank bank_from_templates(const membank::BankConfig& cfg,
                                        const std::vector<membank::MemoryEntry>& templates) {
  membank::MemoryBank bank(cfg);
  for (const auto& t : templates) bank.insert(t);
  return bank;
}

struct StepOutput {
  net::MaskPrediction prediction;
  membank::MemoryEntry entry;
  std::vector<double> weights;
};

StepOutput step(const Session& s, std::size_t frame, const Prompt* prompt, const membank::MemoryBank& bank) {
  const Image& image = s.flow().frames[frame].image;
  ad::Graph g(s.params().tensors(), false);
  FrameStep fs = run_frame(g, s.params(), image, prompt, bank, s.memory_use());
  StepOutput out;
  out.prediction = net::to_prediction(g.value(fs.vars.logits), image.height, image.width,
                                      g.value(fs.vars.confidence)[0]);
  out.entry = net::make_entry(g, fs.vars, s.params(), image.height, image.width, frame, prompt != nullptr, true);
  out.weights = std::move(fs.weights);
  return out;
}

std::vector<std::size_t> similarity_order(const Session& s, std::size_t first) {
  std::vector<std::vector<double>> summaries;
  for (const auto& fr : s.flow().frames) summaries.push_back(mean_tokens(net::image_encode(fr.image, s.params()).tokens));
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < s.flow().size(); ++i)
    if (i != first) rest.push_back(i);
  std::vector<double> sim(s.flow().size(), 0.0);
  for (std::size_t i : rest) sim[i] = membank::cosine_similarity(summaries[first], summaries[i]);
  std::stable_sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  rest.insert(rest.begin(), first);
  return rest;
}

}  // namespace

MemoryUse default_memory_use(membank::BankMode mode) {
  return mode == membank::BankMode::fifo ? MemoryUse::uniform : MemoryUse::similarity;
}

FrameStep run_frame(ad::Graph& g, const ModelParams& params, const Image& image, const Prompt* prompt,
                    const membank::MemoryBank& bank, MemoryUse use, bool from_source,
                    const std::vector<double>* fixed_weights, net::MemoryCache* cache) {
  const ModelConfig& cfg = params.config();
  if (!prompt && use != MemoryUse::none && bank.empty()) {
    throw UsageError("an unprompted frame needs at least one memory entry");
  }
  FrameStep out;
  out.vars.embedding = net::encode_image(g, params, image);
  std::vector<net::MemoryRef> refs;
  if (use != MemoryUse::none && !bank.empty()) {
    const auto entries = bank.entries();
    for (const auto* e : entries) {
      refs.push_back(net::memory_ref(*e, from_source));
      if (cache) refs.back().cache_key = e->frame_index;
    }
    if (fixed_weights) {
      out.weights = *fixed_weights;
    } else if (use == MemoryUse::uniform) {
      out.weights = membank::uniform_weights(bank);
    } else {
      out.weights = membank::pickup_weights(bank, mean_tokens(g.value(out.vars.embedding)),
                                            bank.config().pickup_temperature);
    }
  }
  out.vars.conditioned = net::condition_embedding(g, params, out.vars.embedding, image.height / cfg.patch,
                                                  image.width / cfg.patch, refs, out.weights, cache);
  net::PromptVars pv;
  if (prompt) pv = net::encode_prompt(g, params, *prompt, image.height, image.width);
  const net::DecoderVars d = net::decode_mask(g, params, out.vars.conditioned, pv, image);
  out.vars.logits = d.logits;
  out.vars.pointer = d.pointer;
  out.vars.confidence = d.confidence;
  return out;
}

std::vector<std::size_t> visitation_order(FlowMode mode, std::size_t n_frames,
                                          std::span<const std::size_t> prompted, bool forward_only) {
  if (prompted.empty()) throw UsageError("propagation needs a prompted frame");
  const std::size_t first = *std::min_element(prompted.begin(), prompted.end());
  if (first >= n_frames) throw ArgumentError("prompted frame out of range");
  std::vector<std::size_t> order;
  if (mode == FlowMode::volumetric) {
    for (std::size_t i = first; i < n_frames; ++i) order.push_back(i);
    if (!forward_only)
      for (std::size_t i = first; i-- > 0;) order.push_back(i);
  } else {
    for (std::size_t k = 0; k < n_frames; ++k) order.push_back((first + k) % n_frames);
  }
  return order;
}

SessionConfig default_session_config(FlowMode mode) {
  SessionConfig c;
  c.bank.mode = mode == FlowMode::volumetric ? membank::BankMode::fifo : membank::BankMode::confidence_first;
  return c;
}

Session::Session(Flow flow, std::shared_ptr<const ModelParams> params, SessionConfig config)
    : id_("s" + std::to_string(g_next_session.fetch_add(1))),
      flow_(std::move(flow)),
      params_(std::move(params)),
      config_(config),
      use_(config.memory_use.value_or(default_memory_use(config.bank.mode))),
      bank_(config.bank),
      predictions_(flow_.size()) {}

Session start_session(Flow flow, std::shared_ptr<const ModelParams> params, SessionConfig config) {
  if (!params) throw UsageError("no model parameters loaded");
  validate(flow);
  config.bank.validate();
  const std::size_t patch = params->config().patch;
  if (flow.height() % patch || flow.width() % patch) {
    throw ShapeError("flow frames are not divisible by the model patch size");
  }
  if (config.enforce_mode_pairing) {
    const auto expected = default_session_config(flow.mode).bank.mode;
    if (config.bank.mode != expected) {
      throw ConfigError(std::string(to_string(flow.mode)) + " flows require the " +
                        std::string(membank::to_string(expected)) + " bank mode");
    }
  }
  return Session(std::move(flow), std::move(params), config);
}

net::MaskPrediction add_prompt(Session& s, std::size_t frame_index, const Prompt& prompt) {
  if (frame_index >= s.flow_.size()) throw ArgumentError("frame index out of range");
  Prompt p = prompt;
  p.frame_index = frame_index;
  validate(p, s.flow_.size(), s.flow_.height(), s.flow_.width());
  StepOutput out = step(s, frame_index, &p, s.bank_);
  if (!out.weights.empty()) s.bank_.record_weights(out.weights);
  s.templates_.push_back(out.entry);
  s.bank_.insert(std::move(out.entry));
  s.predictions_[frame_index] = out.prediction;
  s.prompt_log_.push_back({frame_index, p});
  return out.prediction;
}

namespace {

std::set<std::size_t> prompted_frames(const std::vector<PromptRecord>& log) {
  std::set<std::size_t> out;
  for (const auto& r : log) out.insert(r.frame_index);
  return out;
}

// Visits last_order_ from `start`, recomputing every unprompted frame.
void run_from(Session& s, std::vector<membank::MemoryBank>& bank_before, membank::MemoryBank& bank,
              std::vector<std::optional<net::MaskPrediction>>& predictions, std::size_t start,
              const std::vector<std::size_t>& order, const std::set<std::size_t>& prompted,
              PropagationResult& result) {
  for (std::size_t pos = start; pos < order.size(); ++pos) {
    const std::size_t f = order[pos];
    bank_before.push_back(bank);
    if (!prompted.count(f)) {
      StepOutput out = step(s, f, nullptr, bank);
      if (!out.weights.empty()) bank.record_weights(out.weights);
      bank.insert(std::move(out.entry));
      predictions[f] = std::move(out.prediction);
      result.recomputed.push_back(f);
    }
    result.bank_snapshots.push_back(membank::snapshot(bank));
  }
}

}  // namespace

PropagationResult propagate(Session& s) {
  if (s.prompt_log_.empty()) throw UsageError("add a prompt before propagating");
  const auto prompted = prompted_frames(s.prompt_log_);
  const std::vector<std::size_t> pv(prompted.begin(), prompted.end());
  s.last_order_ = (s.config_.similarity_order && s.flow_.mode == FlowMode::unordered)
                      ? similarity_order(s, pv.front())
                      : visitation_order(s.flow_.mode, s.flow_.size(), pv, s.config_.forward_only);
  s.bank_ = bank_from_templates(s.config_.bank, s.templates_);
  s.bank_before_.clear();
  PropagationResult result;
  result.order = s.last_order_;
  run_from(s, s.bank_before_, s.bank_, s.predictions_, 0, s.last_order_, prompted, result);
  for (const auto& p : s.predictions_) {
    // forward_only leaves frames before the first prompt without a prediction
    result.masks.push_back(p.value_or(net::MaskPrediction{}));
  }
  return result;
}

PropagationResult refine_from(Session& s, std::size_t frame_index, const Prompt& prompt) {
  if (frame_index >= s.flow_.size()) throw ArgumentError("frame index out of range");
  if (!s.propagated()) throw UsageError("refine needs a completed propagation");
  const auto it = std::find(s.last_order_.begin(), s.last_order_.end(), frame_index);
  if (it == s.last_order_.end()) throw ArgumentError("frame was not visited by the last propagation");
  const std::size_t pos = static_cast<std::size_t>(it - s.last_order_.begin());

  Prompt p = prompt;
  p.frame_index = frame_index;
  validate(p, s.flow_.size(), s.flow_.height(), s.flow_.width());

  s.bank_ = s.bank_before_[pos];
  s.bank_before_.erase(s.bank_before_.begin() + static_cast<std::ptrdiff_t>(pos), s.bank_before_.end());
  s.bank_before_.push_back(s.bank_);
  StepOutput out = step(s, frame_index, &p, s.bank_);
  if (!out.weights.empty()) s.bank_.record_weights(out.weights);
  s.templates_.push_back(out.entry);
  s.bank_.insert(std::move(out.entry));
  s.predictions_[frame_index] = out.prediction;
  s.prompt_log_.push_back({frame_index, p});

  PropagationResult result;
  result.order = s.last_order_;
  result.recomputed.push_back(frame_index);
  result.bank_snapshots.push_back(membank::snapshot(s.bank_));
  run_from(s, s.bank_before_, s.bank_, s.predictions_, pos + 1, s.last_order_, prompted_frames(s.prompt_log_),
           result);
  for (const auto& pr : s.predictions_) result.masks.push_back(pr.value_or(net::MaskPrediction{}));
  return result;
}

}  // namespace flowseg::engine
