#pragma once

// Sessions over one flow: prompting, propagation and refinement.

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowseg/autodiff.hpp"
#include "flowseg/flowdata.hpp"
#include "flowseg/membank.hpp"
#include "flowseg/model.hpp"
#include "flowseg/network.hpp"

namespace flowseg::engine {

/// How the bank is read when conditioning a frame.
enum class MemoryUse {
  none,        ///< no conditioning at all (ablation)
  uniform,     ///< equal weights over every stored entry
  similarity,  ///< softmax-of-cosine pick-up weights
};

MemoryUse default_memory_use(membank::BankMode mode);

struct FrameStep {
  net::FrameVars vars;
  std::vector<double> weights;  ///< aligned with bank.entries(); empty when unused
};

/// Encodes `image`, reads the bank per `use`, decodes. Builds onto `g`, so a
/// recording graph makes the step differentiable. With `from_source`, memory
/// features are rebuilt inside `g` from each entry's stored source.
/// `fixed_weights` replaces the policy's weights (gradient checking holds
/// them constant). With a cache, entries are keyed by frame index, so a
/// flow graph must not hold two entries of one frame.
FrameStep run_frame(ad::Graph& g, const ModelParams& params, const Image& image, const Prompt* prompt,
                    const membank::MemoryBank& bank, MemoryUse use, bool from_source = false,
                    const std::vector<double>* fixed_weights = nullptr,
                    net::MemoryCache* cache = nullptr);

/// Visitation order of a propagation. Volumetric: ascending from the earliest
/// prompted frame, then descending below it (unless forward_only). Unordered:
/// index order from the earliest prompted frame with wrap-around.
std::vector<std::size_t> visitation_order(FlowMode mode, std::size_t n_frames,
                                          std::span<const std::size_t> prompted, bool forward_only = false);

struct SessionConfig {
  membank::BankConfig bank;
  /// Reject bank modes that do not belong to the flow's mode.
  bool enforce_mode_pairing = true;
  /// Override of the read policy; defaults to the bank mode's own policy.
  std::optional<MemoryUse> memory_use;
  bool forward_only = false;
  /// Unordered flows: visit frames by decreasing embedding similarity to the
  /// first template instead of index order.
  bool similarity_order = false;
};

struct PromptRecord {
  std::size_t frame_index;
  Prompt prompt;
};

struct PropagationResult {
  std::vector<net::MaskPrediction> masks;         ///< one per frame
  std::vector<membank::BankSnapshot> bank_snapshots;  ///< after each visited step
  std::vector<std::size_t> order;
  std::vector<std::size_t> recomputed;  ///< frames whose prediction was (re)computed
};

class Session {
 public:
  const std::string& id() const noexcept { return id_; }
  const Flow& flow() const noexcept { return flow_; }
  const ModelParams& params() const noexcept { return *params_; }
  const SessionConfig& config() const noexcept { return config_; }
  MemoryUse memory_use() const noexcept { return use_; }
  const membank::MemoryBank& bank() const noexcept { return bank_; }
  const std::vector<std::optional<net::MaskPrediction>>& predictions() const noexcept { return predictions_; }
  const std::vector<PromptRecord>& prompt_log() const noexcept { return prompt_log_; }
  bool propagated() const noexcept { return !last_order_.empty(); }
  const std::vector<std::size_t>& last_order() const noexcept { return last_order_; }

 private:
  friend Session start_session(Flow flow, std::shared_ptr<const ModelParams> params, SessionConfig config);
  friend net::MaskPrediction add_prompt(Session& s, std::size_t frame_index, const Prompt& prompt);
  friend PropagationResult propagate(Session& s);
  friend PropagationResult refine_from(Session& s, std::size_t frame_index, const Prompt& prompt);
  friend class SessionAccess;

  Session(Flow flow, std::shared_ptr<const ModelParams> params, SessionConfig config);

  std::string id_;
  Flow flow_;
  std::shared_ptr<const ModelParams> params_;
  SessionConfig config_;
  MemoryUse use_ = MemoryUse::uniform;
  membank::MemoryBank bank_;
  std::vector<membank::MemoryEntry> templates_;
  std::vector<std::optional<net::MaskPrediction>> predictions_;
  std::vector<PromptRecord> prompt_log_;
  std::vector<std::size_t> last_order_;
  // bank state right before each position of last_order_ was visited
  std::vector<membank::MemoryBank> bank_before_;
};

/// Throws ConfigError when the bank mode does not belong to the flow's mode.
Session start_session(Flow flow, std::shared_ptr<const ModelParams> params, SessionConfig config = {});
/// Config whose bank mode matches the flow's mode.
SessionConfig default_session_config(FlowMode mode);

net::MaskPrediction add_prompt(Session& s, std::size_t frame_index, const Prompt& prompt);
/// Re-runs every unprompted frame from the templates alone, so repeated
/// calls give identical results.
PropagationResult propagate(Session& s);
PropagationResult refine_from(Session& s, std::size_t frame_index, const Prompt& prompt);

}  // namespace flowseg::engine
