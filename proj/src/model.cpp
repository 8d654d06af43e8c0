#include "flowseg/model.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "flowseg/errors.hpp"
#include "flowseg/rng.hpp"

namespace flowseg {

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.dim = 8;
  c.patch = 4;
  c.heads = 2;
  c.mlp_hidden = 16;
  c.upscale_dim = 4;
  c.pixel_hidden = 4;
  return c;
}

void ModelConfig::validate() const {
  if (dim == 0 || patch == 0 || heads == 0 || mlp_hidden == 0 || upscale_dim == 0 ||
      pixel_hidden == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (dim % heads != 0) throw ConfigError("heads must divide dim");
  if (dim % 4 != 0) throw ConfigError("dim must be a multiple of 4 for positional encoding");
}

class LayoutBuilder {
 public:
  LayoutBuilder(ModelParams& p, std::uint64_t seed) : p_(p), rng_(seed) {}

  std::size_t tensor(const std::string& name, std::size_t rows, std::size_t cols, double stddev,
                     double fill = 0.0) {
    Tensor t(rows, cols, fill);
    if (stddev > 0)
      for (double& v : t.storage()) v = rng_.normal(0.0, stddev);
    p_.tensors_.push_back(std::move(t));
    p_.names_.push_back(name);
    return p_.tensors_.size() - 1;
  }

  layout::Linear linear(const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
    const double sd = gain * std::sqrt(2.0 / static_cast<double>(in + out));
    return {tensor(name + ".w", in, out, sd), tensor(name + ".b", 1, out, 0.0)};
  }

  layout::Norm norm(const std::string& name, std::size_t n) {
    return {tensor(name + ".gamma", 1, n, 0.0, 1.0), tensor(name + ".beta", 1, n, 0.0)};
  }

  layout::Attention attention(const std::string& name, std::size_t d) {
    return {linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d),
            linear(name + ".o", d, d, 0.5)};
  }

  layout::Mlp mlp(const std::string& name, std::size_t d, std::size_t hidden) {
    return {linear(name + ".fc1", d, hidden), linear(name + ".fc2", hidden, d, 0.5)};
  }

  void build() {
    const ModelConfig& c = p_.config_;
    const std::size_t d = c.dim;
    layout::Model& m = p_.layout_;
    m.patch_embed = linear("encoder.patch_embed", c.patch * c.patch, d);
    for (std::size_t i = 0; i < c.encoder_blocks; ++i) {
      const std::string n = "encoder.block" + std::to_string(i);
      m.encoder.push_back({norm(n + ".norm_attn", d), attention(n + ".attn", d),
                           norm(n + ".norm_mlp", d), mlp(n + ".mlp", d, c.mlp_hidden)});
    }
    m.encoder_out = norm("encoder.out", d);

    m.point_positive = tensor("prompt.point_positive", 1, d, 0.5);
    m.point_negative = tensor("prompt.point_negative", 1, d, 0.5);
    m.box_corner_a = tensor("prompt.box_corner_a", 1, d, 0.5);
    m.box_corner_b = tensor("prompt.box_corner_b", 1, d, 0.5);
    m.mask_summary = tensor("prompt.mask_summary", 1, d, 0.5);
    m.mask_down1 = linear("prompt.mask_down1", c.patch * c.patch, d);
    m.mask_down2 = linear("prompt.mask_down2", d, d);

    m.memory_mask = linear("memory_encoder.mask", c.patch * c.patch, d);
    m.memory_fuse = linear("memory_encoder.fuse", 2 * d, d);
    m.memory_out = norm("memory_encoder.out", d);
    m.pointer_type = tensor("memory_encoder.pointer_type", 1, d, 0.5);

    for (std::size_t i = 0; i < c.memory_blocks; ++i) {
      const std::string n = "memory_attention.block" + std::to_string(i);
      m.memory.push_back({norm(n + ".norm_self", d), attention(n + ".self_attn", d),
                          norm(n + ".norm_cross", d), attention(n + ".cross_attn", d),
                          norm(n + ".norm_mlp", d), mlp(n + ".mlp", d, c.mlp_hidden)});
    }
    m.memory_attention_out = norm("memory_attention.out", d);

    m.mask_token = tensor("decoder.mask_token", 1, d, 0.5);
    m.pointer_token = tensor("decoder.pointer_token", 1, d, 0.5);
    for (std::size_t i = 0; i < c.decoder_blocks; ++i) {
      const std::string n = "decoder.block" + std::to_string(i);
      m.decoder.push_back({norm(n + ".norm_tokens", d), attention(n + ".token_self", d),
                           norm(n + ".norm_token_to_image", d), attention(n + ".token_to_image", d),
                           norm(n + ".norm_token_mlp", d), mlp(n + ".token_mlp", d, c.mlp_hidden),
                           norm(n + ".norm_image_to_token", d), attention(n + ".image_to_token", d)});
    }
    m.norm_final = norm("decoder.norm_final", d);
    m.final_token_to_image = attention("decoder.final_token_to_image", d);
    m.decoder_out = norm("decoder.out", d);
    m.upscale = linear("decoder.upscale", d, c.upscale_dim);
    m.mask_hyper = linear("decoder.mask_hyper", d, c.pixel_hidden);
    m.pixel_fc1 = linear("decoder.pixel_fc1", c.upscale_dim + kPixelFeatures, c.pixel_hidden);
    m.pixel_fc2 = linear("decoder.pixel_fc2", c.pixel_hidden, 1);
    m.pointer_proj = linear("decoder.pointer_proj", d, d);

    m.calib1 = linear("calibration.fc1", 2 * d, d);
    m.calib2 = linear("calibration.fc2", d, 1);
  }

 private:
  ModelParams& p_;
  Rng rng_;
};

ModelParams::ModelParams(const ModelConfig& config, std::uint64_t seed_value)
    : seed(seed_value), config_(config) {
  config_.validate();
  LayoutBuilder builder(*this, seed_value);
  builder.build();
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

namespace {

constexpr std::array<char, 8> kCkptMagic{'F', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

struct Writer {
  std::vector<std::uint8_t> out;
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

struct Reader {
  std::span<const std::uint8_t> in;
  std::size_t off = 0;
  void need(std::size_t n, const char* what) {
    if (in.size() - off < n) throw FormatError(std::string("truncated checkpoint: ") + what, in.size());
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[off + i]) << (8 * i);
    off += 8;
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
  Writer w;
  w.out.insert(w.out.end(), kCkptMagic.begin(), kCkptMagic.end());
  w.u32(kCkptVersion);
  const ModelConfig& c = params.config();
  for (std::size_t v : {c.dim, c.patch, c.heads, c.encoder_blocks, c.memory_blocks, c.decoder_blocks,
                        c.mlp_hidden, c.upscale_dim, c.pixel_hidden}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u64(params.seed);
  w.u64(params.step);
  w.u32(static_cast<std::uint32_t>(params.tensors().size()));
  for (const Tensor& t : params.tensors()) {
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (double v : t.data()) w.u64(std::bit_cast<std::uint64_t>(v));
  }
  return std::move(w.out);
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  r.need(kCkptMagic.size(), "magic");
  if (!std::equal(kCkptMagic.begin(), kCkptMagic.end(), bytes.begin())) {
    throw FormatError("bad magic, expected 'FSEGCKPT'", 0);
  }
  r.off = kCkptMagic.size();
  if (r.u32("version") != kCkptVersion) throw FormatError("unsupported checkpoint version", 8);
  ModelConfig c;
  for (std::size_t* field : {&c.dim, &c.patch, &c.heads, &c.encoder_blocks, &c.memory_blocks,
                             &c.decoder_blocks, &c.mlp_hidden, &c.upscale_dim, &c.pixel_hidden}) {
    *field = r.u32("config");
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid config: ") + e.what(), 12);
  }
  const std::uint64_t seed = r.u64("seed");
  const std::uint64_t step = r.u64("step");
  ModelParams params(c, 0);
  params.seed = seed;
  params.step = step;
  const std::size_t count_off = r.off;
  const std::uint32_t count = r.u32("tensor count");
  auto& tensors = params.mutable_tensors();
  if (count != tensors.size()) throw FormatError("tensor count does not match config", count_off);
  for (Tensor& t : tensors) {
    const std::size_t dims_off = r.off;
    const std::uint32_t rows = r.u32("tensor rows");
    const std::uint32_t cols = r.u32("tensor cols");
    if (rows != t.rows() || cols != t.cols()) throw FormatError("tensor dimension mismatch", dims_off);
    r.need(t.size() * 8, "tensor data");
    for (double& v : t.storage()) {
      v = std::bit_cast<double>(r.u64("tensor data"));
      if (!std::isfinite(v)) throw FormatError("non-finite weight", r.off - 8);
    }
  }
  if (r.off != bytes.size()) throw FormatError("trailing bytes after checkpoint", r.off);
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  ModelParams p = load_checkpoint(path);
  if (!(p.config() == expected)) throw ConfigError("checkpoint dimensions differ from the expected config");
  return p;
}

}  // namespace flowseg
