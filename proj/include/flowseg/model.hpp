#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowseg/tensor.hpp"

namespace flowseg {

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t patch = 8;
  std::size_t heads = 4;
  std::size_t encoder_blocks = 2;
  std::size_t memory_blocks = 2;
  std::size_t decoder_blocks = 2;
  std::size_t mlp_hidden = 128;
  std::size_t upscale_dim = 16;
  std::size_t pixel_hidden = 16;

  /// d=8, patch=4 configuration used for gradient checks on 16x16 images.
  static ModelConfig tiny();
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Number of per-pixel image features fed to the mask head.
inline constexpr std::size_t kPixelFeatures = 2;

namespace layout {

struct Linear {
  std::size_t w = 0, b = 0;
};
struct Norm {
  std::size_t gamma = 0, beta = 0;
};
struct Attention {
  Linear q, k, v, o;
};
struct Mlp {
  Linear fc1, fc2;
};
struct EncoderBlock {
  Norm norm_attn;
  Attention attn;
  Norm norm_mlp;
  Mlp mlp;
};
struct MemoryBlock {
  Norm norm_self;
  Attention self_attn;
  Norm norm_cross;
  Attention cross_attn;
  Norm norm_mlp;
  Mlp mlp;
};
struct DecoderBlock {
  Norm norm_tokens;
  Attention token_self;
  Norm norm_token_to_image;
  Attention token_to_image;
  Norm norm_token_mlp;
  Mlp token_mlp;
  Norm norm_image_to_token;
  Attention image_to_token;
};

struct Model {
  // image encoder
  Linear patch_embed;
  std::vector<EncoderBlock> encoder;
  Norm encoder_out;
  // prompt encoder
  std::size_t point_positive = 0, point_negative = 0, box_corner_a = 0, box_corner_b = 0,
              mask_summary = 0;
  Linear mask_down1, mask_down2;
  // memory encoder
  Linear memory_mask;
  Linear memory_fuse;
  Norm memory_out;
  std::size_t pointer_type = 0;
  // memory attention
  std::vector<MemoryBlock> memory;
  Norm memory_attention_out;
  // mask decoder
  std::size_t mask_token = 0, pointer_token = 0;
  std::vector<DecoderBlock> decoder;
  Norm norm_final;
  Attention final_token_to_image;
  Norm decoder_out;
  Linear upscale, mask_hyper, pixel_fc1, pixel_fc2;
  Linear pointer_proj;
  // calibration head
  Linear calib1, calib2;
};

}  // namespace layout

/// All learnable weights. Tensors are stored in a fixed order (the order of
/// `names()`), which is also the checkpoint blob order.
class ModelParams {
 public:
  ModelParams() = default;
  /// Deterministic initialisation from `seed`.
  ModelParams(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const layout::Model& layout() const noexcept { return layout_; }
  std::span<const Tensor> tensors() const noexcept { return tensors_; }
  std::vector<Tensor>& mutable_tensors() noexcept { return tensors_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t parameter_count() const;

  std::uint64_t seed = 0;
  std::uint64_t step = 0;

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.config_ == b.config_ && a.tensors_ == b.tensors_;
  }

 private:
  friend class LayoutBuilder;
  ModelConfig config_;
  layout::Model layout_;
  std::vector<Tensor> tensors_;
  std::vector<std::string> names_;
};

/// Checkpoint file, little-endian:
///   magic "FSEGCKPT", u32 version, 9 x u32 config dims (dim, patch, heads,
///   encoder/memory/decoder blocks, mlp_hidden, upscale_dim, pixel_hidden),
///   u64 seed, u64 step, u32 tensor count, then per tensor u32 rows, u32 cols
///   and rows*cols float64 values, in ModelParams order.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);
/// Rejects checkpoints whose config differs from `expected`.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);
std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace flowseg
