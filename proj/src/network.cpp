#include "flowseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flowseg/errors.hpp"

namespace flowseg::net {
namespace {

using ad::Var;
namespace L = layout;

constexpr double kTwoPi = 6.283185307179586;

struct Ctx {
  ad::Graph& g;
  const ModelParams& params;

  Var p(std::size_t index) const { return g.param(index); }
  Var linear(Var x, const L::Linear& l) const { return ad::linear(x, p(l.w), p(l.b)); }
  Var norm(Var x, const L::Norm& n) const { return ad::layer_norm(x, p(n.gamma), p(n.beta)); }
  Var mlp(Var x, const L::Mlp& m) const { return linear(ad::gelu(linear(x, m.fc1)), m.fc2); }
  Var attend(const L::Attention& a, Var q_in, Var k_in, Var v_in,
             std::span<const double> bias = {}) const {
    const Var q = linear(q_in, a.q);
    const Var k = linear(k_in, a.k);
    const Var v = linear(v_in, a.v);
    return linear(ad::multi_head_attention(q, k, v, params.config().heads, bias), a.o);
  }
};

void check_divisible(std::size_t height, std::size_t width, std::size_t patch) {
  if (height % patch != 0 || width % patch != 0) {
    throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by patch " + std::to_string(patch));
  }
}

std::vector<double> mask_plane(const Mask& m) {
  return std::vector<double>(m.cells.begin(), m.cells.end());
}

}  // namespace

MemoryRef memory_ref(const membank::MemoryEntry& entry, bool prefer_source) {
  MemoryRef r;
  r.pointer = &entry.pointer;
  if ((prefer_source || entry.feature.empty()) && entry.source) {
    r.source = &*entry.source;
  } else {
    r.feature = &entry.feature;
  }
  return r;
}

Tensor patchify(std::span<const double> plane, std::size_t height, std::size_t width,
                std::size_t patch) {
  check_divisible(height, width, patch);
  if (plane.size() != height * width) throw ShapeError("patchify: plane size mismatch");
  const std::size_t gr = height / patch, gc = width / patch;
  Tensor out(gr * gc, patch * patch);
  for (std::size_t pr = 0; pr < gr; ++pr)
    for (std::size_t pc = 0; pc < gc; ++pc)
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          out(pr * gc + pc, y * patch + x) = plane[(pr * patch + y) * width + pc * patch + x];
  return out;
}

Tensor image_plane(const Image& image) {
  Tensor t(image.height, image.width);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = image.pixels[i];
  return t;
}

std::vector<double> positional_encoding(double y, double x, std::size_t dim) {
  const std::size_t nf = dim / 4;
  std::vector<double> pe(dim);
  for (std::size_t k = 0; k < nf; ++k) {
    const double f = nf == 1 ? 1.0
                             : 0.5 * std::pow(32.0, static_cast<double>(k) / static_cast<double>(nf - 1));
    pe[k] = std::sin(kTwoPi * f * y);
    pe[nf + k] = std::cos(kTwoPi * f * y);
    pe[2 * nf + k] = std::sin(kTwoPi * f * x);
    pe[3 * nf + k] = std::cos(kTwoPi * f * x);
  }
  return pe;
}

Tensor grid_encoding(std::size_t rows, std::size_t cols, std::size_t dim) {
  Tensor out(rows * cols, dim);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const auto pe = positional_encoding((static_cast<double>(r) + 0.5) / static_cast<double>(rows),
                                          (static_cast<double>(c) + 0.5) / static_cast<double>(cols), dim);
      std::copy(pe.begin(), pe.end(), out.row(r * cols + c).begin());
    }
  }
  return out;
}

Tensor pixel_features(const Image& image) {
  const std::size_t h = image.height, w = image.width;
  Tensor out(h * w, kPixelFeatures);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double s = 0.0;
      int n = 0;
      for (std::size_t y = (r == 0 ? 0 : r - 1); y <= std::min(h - 1, r + 1); ++y)
        for (std::size_t x = (c == 0 ? 0 : c - 1); x <= std::min(w - 1, c + 1); ++x, ++n)
          s += image.at(y, x);
      out(r * w + c, 0) = 2.0 * image.at(r, c) - 1.0;
      out(r * w + c, 1) = 2.0 * s / n - 1.0;
    }
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const double> logit_bias) {
  ad::Graph g({}, false);
  const Var out = ad::multi_head_attention(g.constant(q), g.constant(k), g.constant(v), 1, logit_bias);
  return g.value(out);
}

Var encode_image(ad::Graph& g, const ModelParams& params, const Image& image) {
  const ModelConfig& cfg = params.config();
  const L::Model& m = params.layout();
  const Ctx c{g, params};
  check_divisible(image.height, image.width, cfg.patch);
  const Tensor plane = image_plane(image);
  const std::size_t gr = image.height / cfg.patch, gc = image.width / cfg.patch;
  Var x = c.linear(g.constant(patchify(plane.data(), image.height, image.width, cfg.patch)), m.patch_embed);
  x = ad::add(x, g.constant(grid_encoding(gr, gc, cfg.dim)));
  for (const auto& blk : m.encoder) {
    const Var h = c.norm(x, blk.norm_attn);
    x = ad::add(x, c.attend(blk.attn, h, h, h));
    x = ad::add(x, c.mlp(c.norm(x, blk.norm_mlp), blk.mlp));
  }
  x = c.norm(x, m.encoder_out);
  g.check_finite(x, "image_encoder");
  return x;
}

PromptVars encode_prompt(ad::Graph& g, const ModelParams& params, const Prompt& prompt,
                         std::size_t height, std::size_t width) {
  const ModelConfig& cfg = params.config();
  const L::Model& m = params.layout();
  const Ctx c{g, params};
  validate(prompt, prompt.frame_index + 1, height, width);
  const double fh = static_cast<double>(height), fw = static_cast<double>(width);
  auto point_token = [&](double row, double col, std::size_t type) {
    const auto pe = positional_encoding((row + 0.5) / fh, (col + 0.5) / fw, cfg.dim);
    return ad::add(g.constant(Tensor({1, cfg.dim}, pe)), c.p(type));
  };
  PromptVars out;
  if (const auto* pt = std::get_if<PointPrompt>(&prompt.shape)) {
    out.sparse = point_token(static_cast<double>(pt->row), static_cast<double>(pt->col),
                             pt->positive ? m.point_positive : m.point_negative);
  } else if (const auto* box = std::get_if<BoxPrompt>(&prompt.shape)) {
    const Var parts[] = {
        point_token(static_cast<double>(box->r0), static_cast<double>(box->c0), m.box_corner_a),
        point_token(static_cast<double>(box->r1), static_cast<double>(box->c1), m.box_corner_b)};
    out.sparse = ad::concat_rows(parts);
  } else {
    const Mask& mask = std::get<MaskPrompt>(prompt.shape).mask;
    const Var patches = g.constant(patchify(mask_plane(mask), height, width, cfg.patch));
    const Var dense = c.linear(ad::gelu(c.linear(patches, m.mask_down1)), m.mask_down2);
    out.dense = dense;
    out.sparse = ad::add(ad::mean_rows(dense), c.p(m.mask_summary));
  }
  g.check_finite(*out.sparse, "prompt_encoder");
  return out;
}

Var encode_memory(ad::Graph& g, const ModelParams& params, Var embedding, Var prob_patches) {
  const L::Model& m = params.layout();
  const Ctx c{g, params};
  const Var mask_feat = ad::gelu(c.linear(prob_patches, m.memory_mask));
  const Var fused = c.linear(ad::concat_cols(embedding, mask_feat), m.memory_fuse);
  const Var out = c.norm(fused, m.memory_out);
  g.check_finite(out, "memory_encoder");
  return out;
}

Var condition_embedding(ad::Graph& g, const ModelParams& params, Var embedding, std::size_t rows,
                        std::size_t cols, std::span<const MemoryRef> entries,
                        std::span<const double> weights, MemoryCache* cache) {
  const ModelConfig& cfg = params.config();
  const L::Model& m = params.layout();
  const Ctx c{g, params};
  if (weights.size() != entries.size()) throw ArgumentError("one weight per memory entry required");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ArgumentError("memory weights must be finite and non-negative");
    total += w;
  }
  if (!entries.empty() && std::abs(total - 1.0) > 1e-6) throw ArgumentError("memory weights must sum to 1");

  const Var pe_var = g.constant(grid_encoding(rows, cols, cfg.dim));
  auto build_item = [&](const MemoryRef& ref) {
    Var feat;
    if (ref.source) {
      feat = encode_memory(g, params, g.constant(ref.source->embedding), g.constant(ref.source->prob_patches));
    } else if (ref.feature && !ref.feature->empty()) {
      feat = g.constant(*ref.feature);
    } else {
      throw ArgumentError("memory entry carries neither a feature nor a source");
    }
    if (g.value(feat).rows() != rows * cols || g.value(feat).cols() != cfg.dim) {
      throw ShapeError("memory feature grid differs from the frame grid");
    }
    if (!ref.pointer || ref.pointer->size() != cfg.dim) throw ShapeError("object pointer width mismatch");
    const Var ptr = ad::add(g.constant(Tensor({1, cfg.dim}, ref.pointer->storage())), c.p(m.pointer_type));
    const Var key_rows[] = {ad::add(feat, pe_var), ptr};
    const Var value_rows[] = {feat, ptr};
    const Var k_in = ad::concat_rows(key_rows), v_in = ad::concat_rows(value_rows);
    MemoryCache::Item item;
    for (const auto& blk : m.memory) {
      item.keys.push_back(c.linear(k_in, blk.cross_attn.k));
      item.values.push_back(c.linear(v_in, blk.cross_attn.v));
    }
    return item;
  };

  std::vector<const MemoryCache::Item*> kept;
  std::vector<MemoryCache::Item> local;
  local.reserve(entries.size());
  std::vector<double> bias;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    // Zero weight is a logit of -inf: the entry's keys are dropped outright.
    if (weights[i] == 0.0) continue;
    const MemoryRef& ref = entries[i];
    if (cache && ref.cache_key) {
      auto it = cache->items.find(*ref.cache_key);
      if (it == cache->items.end()) it = cache->items.emplace(*ref.cache_key, build_item(ref)).first;
      kept.push_back(&it->second);
    } else {
      local.push_back(build_item(ref));
      kept.push_back(&local.back());
    }
    bias.insert(bias.end(), rows * cols + 1, std::log(weights[i]));
  }

  Var x = embedding;
  for (std::size_t b = 0; b < m.memory.size(); ++b) {
    const auto& blk = m.memory[b];
    const Var h = c.norm(x, blk.norm_self);
    x = ad::add(x, c.attend(blk.self_attn, h, h, h));
    if (!kept.empty()) {
      std::vector<Var> ks, vs;
      for (const auto* item : kept) {
        ks.push_back(item->keys[b]);
        vs.push_back(item->values[b]);
      }
      const Var q = c.linear(ad::add(c.norm(x, blk.norm_cross), pe_var), blk.cross_attn.q);
      const Var att = ad::multi_head_attention(q, ad::concat_rows(ks), ad::concat_rows(vs), cfg.heads, bias);
      x = ad::add(x, c.linear(att, blk.cross_attn.o));
    }
    x = ad::add(x, c.mlp(c.norm(x, blk.norm_mlp), blk.mlp));
  }
  x = c.norm(x, m.memory_attention_out);
  g.check_finite(x, "memory_attention");
  return x;
}

DecoderVars decode_mask(ad::Graph& g, const ModelParams& params, Var conditioned,
                        const PromptVars& prompt, const Image& image) {
  const ModelConfig& cfg = params.config();
  const L::Model& m = params.layout();
  const Ctx c{g, params};
  const std::size_t gr = image.height / cfg.patch, gc = image.width / cfg.patch;
  if (g.value(conditioned).rows() != gr * gc) throw ShapeError("decoder: embedding grid mismatch");
  const Var pe = g.constant(grid_encoding(gr, gc, cfg.dim));

  Var src = prompt.dense ? ad::add(conditioned, *prompt.dense) : conditioned;
  std::vector<Var> token_parts{c.p(m.mask_token), c.p(m.pointer_token)};
  if (prompt.sparse) token_parts.push_back(*prompt.sparse);
  Var tokens = ad::concat_rows(token_parts);

  for (const auto& blk : m.decoder) {
    Var h = c.norm(tokens, blk.norm_tokens);
    tokens = ad::add(tokens, c.attend(blk.token_self, h, h, h));
    h = c.norm(tokens, blk.norm_token_to_image);
    tokens = ad::add(tokens, c.attend(blk.token_to_image, h, ad::add(src, pe), src));
    tokens = ad::add(tokens, c.mlp(c.norm(tokens, blk.norm_token_mlp), blk.token_mlp));
    const Var hs = ad::add(c.norm(src, blk.norm_image_to_token), pe);
    src = ad::add(src, c.attend(blk.image_to_token, hs, tokens, tokens));
  }
  const Var h = c.norm(tokens, m.norm_final);
  tokens = ad::add(tokens, c.attend(m.final_token_to_image, h, ad::add(src, pe), src));
  tokens = c.norm(tokens, m.decoder_out);
  g.check_finite(tokens, "mask_decoder");

  const Var mask_tok = ad::slice_rows(tokens, 0, 1);
  const Var ptr_tok = ad::slice_rows(tokens, 1, 1);

  const Var up = ad::upsample_bilinear(c.linear(src, m.upscale), gr, gc, image.height, image.width);
  const Var pixel_in = ad::concat_cols(up, g.constant(pixel_features(image)));
  const Var hidden = ad::gelu(ad::add_row(c.linear(pixel_in, m.pixel_fc1), c.linear(mask_tok, m.mask_hyper)));
  const Var logits = c.linear(hidden, m.pixel_fc2);
  g.check_finite(logits, "mask_head");

  const Var pointer = c.linear(ptr_tok, m.pointer_proj);
  const Var calib_in = ad::concat_cols(pointer, ad::mean_rows(src));
  const Var confidence = ad::sigmoid(c.linear(ad::gelu(c.linear(calib_in, m.calib1)), m.calib2));
  g.check_finite(confidence, "calibration_head");
  return {logits, pointer, confidence};
}

FrameVars forward_frame_graph(ad::Graph& g, const ModelParams& params, const Image& image,
                              const Prompt* prompt, std::span<const MemoryRef> entries,
                              std::span<const double> weights, bool allow_unguided) {
  if (!prompt && entries.empty() && !allow_unguided) {
    throw UsageError("an unprompted frame needs at least one memory entry");
  }
  const ModelConfig& cfg = params.config();
  check_divisible(image.height, image.width, cfg.patch);
  const std::size_t gr = image.height / cfg.patch, gc = image.width / cfg.patch;
  FrameVars v;
  v.embedding = encode_image(g, params, image);
  v.conditioned = condition_embedding(g, params, v.embedding, gr, gc, entries, weights);
  PromptVars pv;
  if (prompt) pv = encode_prompt(g, params, *prompt, image.height, image.width);
  const DecoderVars d = decode_mask(g, params, v.conditioned, pv, image);
  v.logits = d.logits;
  v.pointer = d.pointer;
  v.confidence = d.confidence;
  return v;
}

membank::MemoryEntry make_entry(const ad::Graph& g, const FrameVars& vars, const ModelParams& params,
                                std::size_t height, std::size_t width, std::size_t frame_index,
                                bool is_template, bool encode_feature) {
  const ModelConfig& cfg = params.config();
  const Tensor& emb = g.value(vars.embedding);
  const Tensor& logits = g.value(vars.logits);
  if (logits.size() != height * width) throw ShapeError("make_entry: logits do not match the image");
  const std::size_t n_tokens = emb.rows();

  membank::MemoryEntry e;
  e.frame_index = frame_index;
  e.is_template = is_template;
  e.confidence = g.value(vars.confidence)[0];
  e.pointer = g.value(vars.pointer);
  e.summary.assign(cfg.dim, 0.0);
  for (std::size_t r = 0; r < n_tokens; ++r)
    for (std::size_t c = 0; c < cfg.dim; ++c) e.summary[c] += emb(r, c);
  for (double& v : e.summary) v /= static_cast<double>(n_tokens);

  std::vector<double> probs(height * width);
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = 1.0 / (1.0 + std::exp(-logits[i]));
  membank::MemorySource src{emb, patchify(probs, height, width, cfg.patch)};
  if (encode_feature) {
    ad::Graph mg(params.tensors(), false);
    e.feature = mg.value(encode_memory(mg, params, mg.constant(src.embedding), mg.constant(src.prob_patches)));
  }
  e.source = std::move(src);
  return e;
}

MaskPrediction to_prediction(const Tensor& logits, std::size_t height, std::size_t width,
                             double confidence) {
  if (logits.size() != height * width) throw ShapeError("logit map does not match the image");
  MaskPrediction p;
  p.probs = Tensor(height, width);
  p.mask = Mask(height, width);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p.probs[i] = 1.0 / (1.0 + std::exp(-logits[i]));
    p.mask.cells[i] = p.probs[i] >= 0.5 ? 1 : 0;
  }
  p.confidence = confidence;
  return p;
}

// ---- tensor level ------------------------------------------------------------

EmbeddingMap image_encode(const Image& image, const ModelParams& params) {
  validate(image);
  ad::Graph g(params.tensors(), false);
  const std::size_t patch = params.config().patch;
  check_divisible(image.height, image.width, patch);
  return {g.value(encode_image(g, params, image)), image.height / patch, image.width / patch};
}

PromptTokens prompt_encode(const Prompt& prompt, std::size_t height, std::size_t width,
                           const ModelParams& params) {
  check_divisible(height, width, params.config().patch);
  ad::Graph g(params.tensors(), false);
  const PromptVars v = encode_prompt(g, params, prompt, height, width);
  PromptTokens out;
  out.sparse = g.value(*v.sparse);
  if (v.dense) out.dense = g.value(*v.dense);
  return out;
}

MemoryFeature memory_encode(const EmbeddingMap& embedding, const Tensor& probs, const ModelParams& params) {
  const std::size_t patch = params.config().patch;
  const std::size_t h = embedding.rows * patch, w = embedding.cols * patch;
  if (probs.size() != h * w) throw ShapeError("probability map does not match the embedding grid");
  for (double p : probs.storage()) {
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("probabilities must lie in [0,1]");
  }
  ad::Graph g(params.tensors(), false);
  const Var out = encode_memory(g, params, g.constant(embedding.tokens),
                                g.constant(patchify(probs.data(), h, w, patch)));
  return {g.value(out)};
}

EmbeddingMap condition(const EmbeddingMap& embedding, std::span<const MemoryRef> entries,
                       std::span<const double> weights, const ModelParams& params) {
  ad::Graph g(params.tensors(), false);
  const Var out = condition_embedding(g, params, g.constant(embedding.tokens), embedding.rows,
                                      embedding.cols, entries, weights);
  return {g.value(out), embedding.rows, embedding.cols};
}

DecoderOutput mask_decode(const EmbeddingMap& conditioned, const PromptTokens* prompt, const Image& image,
                          const ModelParams& params) {
  validate(image);
  ad::Graph g(params.tensors(), false);
  PromptVars pv;
  if (prompt) {
    pv.sparse = g.constant(prompt->sparse);
    if (prompt->dense) pv.dense = g.constant(*prompt->dense);
  }
  const DecoderVars d = decode_mask(g, params, g.constant(conditioned.tokens), pv, image);
  DecoderOutput out;
  Tensor logits = g.value(d.logits);
  out.logits = Tensor({image.height, image.width}, std::move(logits.storage()));
  out.pointer.vector = g.value(d.pointer);
  out.confidence = g.value(d.confidence)[0];
  return out;
}

FrameResult forward_frame(const Image& image, const std::optional<Prompt>& prompt,
                          std::span<const MemoryRef> entries, std::span<const double> weights,
                          const ModelParams& params, std::size_t frame_index, bool allow_unguided) {
  validate(image);
  ad::Graph g(params.tensors(), false);
  const FrameVars v = forward_frame_graph(g, params, image, prompt ? &*prompt : nullptr, entries, weights,
                                          allow_unguided);
  FrameResult r;
  r.prediction = to_prediction(g.value(v.logits), image.height, image.width, g.value(v.confidence)[0]);
  r.entry = make_entry(g, v, params, image.height, image.width, frame_index, prompt.has_value(), true);
  return r;
}

}  // namespace flowseg::net
