#pragma once

// Per-frame network: image encoder, prompt encoder, memory encoder, memory
// attention, mask decoder and calibration head.
//
// Every stage is available at two levels. The graph-level functions build
// onto an ad::Graph and are what training differentiates; the tensor-level
// wrappers run a value-only graph and return plain results.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "flowseg/autodiff.hpp"
#include "flowseg/flowdata.hpp"
#include "flowseg/membank.hpp"
#include "flowseg/model.hpp"
#include "flowseg/tensor.hpp"

namespace flowseg::net {

struct EmbeddingMap {
  Tensor tokens;  ///< (rows*cols x d)
  std::size_t rows = 0, cols = 0;
};

struct PromptTokens {
  Tensor sparse;                ///< (k x d)
  std::optional<Tensor> dense;  ///< (n_tokens x d), mask prompts only
};

struct MemoryFeature {
  Tensor tokens;  ///< (n_tokens x d)
};

struct ObjectPointer {
  Tensor vector;  ///< (1 x d)
};

struct DecoderOutput {
  Tensor logits;  ///< (H x W)
  ObjectPointer pointer;
  double confidence = 0.0;
};

struct MaskPrediction {
  Tensor probs;  ///< (H x W) foreground probability
  Mask mask;     ///< probs >= 0.5
  double confidence = 0.0;
  friend bool operator==(const MaskPrediction&, const MaskPrediction&) = default;
};

/// One memory item on the conditioning path.
struct MemoryRef {
  const Tensor* feature = nullptr;
  const Tensor* pointer = nullptr;
  /// When set, the feature is re-encoded from this source inside the graph.
  const membank::MemorySource* source = nullptr;
  /// Identifies the entry inside a MemoryCache.
  std::optional<std::size_t> cache_key;
};

MemoryRef memory_ref(const membank::MemoryEntry& entry, bool prefer_source = false);

// ---- reusable inputs --------------------------------------------------------

/// (n_patches x patch^2) matrix of non-overlapping patches, row-major patch order.
Tensor patchify(std::span<const double> plane, std::size_t height, std::size_t width,
                std::size_t patch);
Tensor image_plane(const Image& image);
/// Fourier positional encoding of a point given in [0,1]^2, length d.
std::vector<double> positional_encoding(double y, double x, std::size_t dim);
/// Encodings of the token-grid centres, (rows*cols x d).
Tensor grid_encoding(std::size_t rows, std::size_t cols, std::size_t dim);
/// (H*W x kPixelFeatures) per-pixel features for the mask head.
Tensor pixel_features(const Image& image);

// ---- primitive --------------------------------------------------------------

/// softmax(q k^T / sqrt(d) + bias) v, single head. q (m x d), k and v (n x d).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const double> logit_bias = {});

// ---- graph level --------------------------------------------------------------

struct PromptVars {
  std::optional<ad::Var> sparse;
  std::optional<ad::Var> dense;
};

struct FrameVars {
  ad::Var embedding;    ///< raw image-encoder output
  ad::Var conditioned;  ///< after memory attention
  ad::Var logits;       ///< (H*W x 1)
  ad::Var pointer;      ///< (1 x d)
  ad::Var confidence;   ///< (1 x 1)
};

ad::Var encode_image(ad::Graph& g, const ModelParams& params, const Image& image);
PromptVars encode_prompt(ad::Graph& g, const ModelParams& params, const Prompt& prompt,
                         std::size_t height, std::size_t width);
ad::Var encode_memory(ad::Graph& g, const ModelParams& params, ad::Var embedding,
                      ad::Var prob_patches);
/// Per-entry memory nodes reused by later frames built onto the same graph
/// (the parameters are fixed while that graph lives, so the cross-attention
/// key/value projections of an entry are the same for every reader).
struct MemoryCache {
  struct Item {
    std::vector<ad::Var> keys, values;  ///< projected, one per memory block
  };
  std::map<std::size_t, Item> items;
};

ad::Var condition_embedding(ad::Graph& g, const ModelParams& params, ad::Var embedding,
                            std::size_t rows, std::size_t cols, std::span<const MemoryRef> entries,
                            std::span<const double> weights, MemoryCache* cache = nullptr);

struct DecoderVars {
  ad::Var logits, pointer, confidence;
};
DecoderVars decode_mask(ad::Graph& g, const ModelParams& params, ad::Var conditioned,
                        const PromptVars& prompt, const Image& image);

/// Full frame. With `allow_unguided`, an unprompted frame with no memory is
/// decoded as-is (memory ablation); otherwise that raises UsageError.
FrameVars forward_frame_graph(ad::Graph& g, const ModelParams& params, const Image& image,
                              const Prompt* prompt, std::span<const MemoryRef> entries,
                              std::span<const double> weights, bool allow_unguided = false);

// ---- tensor level -------------------------------------------------------------

EmbeddingMap image_encode(const Image& image, const ModelParams& params);
PromptTokens prompt_encode(const Prompt& prompt, std::size_t height, std::size_t width,
                           const ModelParams& params);
MemoryFeature memory_encode(const EmbeddingMap& embedding, const Tensor& probs,
                            const ModelParams& params);
EmbeddingMap condition(const EmbeddingMap& embedding, std::span<const MemoryRef> entries,
                       std::span<const double> weights, const ModelParams& params);
DecoderOutput mask_decode(const EmbeddingMap& conditioned, const PromptTokens* prompt,
                          const Image& image, const ModelParams& params);

struct FrameResult {
  MaskPrediction prediction;
  membank::MemoryEntry entry;
};

/// encode -> condition -> decode -> memory-encode. The returned entry is a
/// template exactly when a prompt was given.
FrameResult forward_frame(const Image& image, const std::optional<Prompt>& prompt,
                          std::span<const MemoryRef> entries, std::span<const double> weights,
                          const ModelParams& params, std::size_t frame_index = 0,
                          bool allow_unguided = false);

/// Builds a memory entry from a finished frame graph.
/// With `encode_feature` the memory feature is computed now; otherwise only
/// the source is stored and consumers re-encode it.
membank::MemoryEntry make_entry(const ad::Graph& g, const FrameVars& vars,
                                const ModelParams& params, std::size_t height,
                                std::size_t width, std::size_t frame_index, bool is_template,
                                bool encode_feature);

MaskPrediction to_prediction(const Tensor& logits, std::size_t height, std::size_t width,
                             double confidence);

}  // namespace flowseg::net
