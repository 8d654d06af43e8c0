#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "flowseg/errors.hpp"
#include "flowseg/flowdata.hpp"
#include "flowseg/model.hpp"
#include "flowseg/network.hpp"
#include "flowseg/rng.hpp"

using namespace flowseg;
using namespace flowseg::net;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(r, c);
  for (auto& x : t.storage()) x = rng.normal();
  return t;
}

// softmax(q k^T / sqrt(d)) with per-key multiplicative weights, evaluated directly
Tensor reweighted_softmax_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const std::vector<double>& w) {
  const std::size_t m = q.rows(), n = k.rows(), d = q.cols();
  Tensor out(m, v.cols());
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<long double> p(n);
    long double z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0;
      for (std::size_t t = 0; t < d; ++t) s += (long double)q(i, t) * k(j, t);
      p[j] = w[j] * std::exp(s / std::sqrt((long double)d));
      z += p[j];
    }
    for (std::size_t c = 0; c < v.cols(); ++c) {
      long double acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += p[j] / z * v(j, c);
      out(i, c) = double(acc);
    }
  }
  return out;
}

Image random_image(Rng& rng, std::size_t h, std::size_t w) {
  Image im{h, w, std::vector<float>(h * w)};
  for (auto& p : im.pixels) p = float(rng.uniform());
  return im;
}

struct Fixture {
  std::shared_ptr<const ModelParams> params = std::make_shared<ModelParams>(ModelConfig::tiny(), 3);
  Flow flow = generate_volume_flow(4, 3, TaskClass::ring, 16);
};

}  // namespace

TEST_CASE("attention oracles") {
  Rng rng(1);
  // one key: output is that value row
  const Tensor q = random_tensor(rng, 3, 4), k1 = random_tensor(rng, 1, 4), v1 = random_tensor(rng, 1, 4);
  const Tensor o1 = attention(q, k1, v1);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(o1(i, c) == v1(0, c));

  // equal logits: mean of the value rows
  const Tensor zero(2, 4), k = random_tensor(rng, 5, 4), v = random_tensor(rng, 5, 4);
  const Tensor om = attention(zero, k, v);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0;
    for (std::size_t j = 0; j < 5; ++j) mean += v(j, c) / 5;
    CHECK(om(0, c) == doctest::Approx(mean).epsilon(1e-14));
  }

  // m=n=2, d=1 hand-chosen values against an independent scalar evaluation
  const Tensor qs({2, 1}, {0.5, -1.5}), ks({2, 1}, {2.0, -0.25}), vs({2, 1}, {3.0, -7.0});
  const Tensor os = attention(qs, ks, vs);
  for (std::size_t i = 0; i < 2; ++i) {
    const long double a = std::exp((long double)qs(i, 0) * 2.0L), b = std::exp((long double)qs(i, 0) * -0.25L);
    const long double expect = (a * 3.0L + b * -7.0L) / (a + b);
    CHECK(std::abs(os(i, 0) - double(expect)) < 1e-14);
  }

  // rows of the attention matrix sum to one: with v the identity, out = weights
  Tensor eye(6, 6);
  for (std::size_t i = 0; i < 6; ++i) eye(i, i) = 1;
  const Tensor qa = random_tensor(rng, 4, 6), ka = random_tensor(rng, 6, 6);
  const Tensor wts = attention(qa, ka, eye, std::vector<double>{0.1, -2, 0, 3, -0.5, 1});
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 6; ++j) s += wts(i, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  CHECK_THROWS_AS(attention(random_tensor(rng, 2, 3), k, v), ShapeError);
  CHECK_THROWS_AS(attention(q, k1, v1, std::vector<double>{0, 0}), ShapeError);
}

TEST_CASE("log-weight bias equals reweighting the softmax mass") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(5), n = 1 + rng.below(9), d = 1 + rng.below(6);
    const Tensor q = random_tensor(rng, m, d), k = random_tensor(rng, n, d), v = random_tensor(rng, n, d);
    std::vector<double> w(n), bias(n);
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = rng.uniform(0.01, 1.0);
      bias[j] = std::log(w[j]);
    }
    const Tensor got = attention(q, k, v, bias);
    const Tensor want = reweighted_softmax_oracle(q, k, v, w);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("image encoder contract") {
  const ModelParams params(ModelConfig{}, 1);
  Rng rng(3);
  const Image im = random_image(rng, 64, 64);
  const EmbeddingMap e = image_encode(im, params);
  CHECK(e.rows == 8);
  CHECK(e.cols == 8);
  CHECK(e.tokens.rows() == 64);
  CHECK(e.tokens.cols() == 64);
  CHECK(image_encode(im, params).tokens == e.tokens);
  Image other = im;
  for (std::size_t r = 8; r < 16; ++r)
    for (std::size_t c = 16; c < 24; ++c) other.pixels[r * 64 + c] = 1.0f - other.pixels[r * 64 + c];
  CHECK(image_encode(other, params).tokens != e.tokens);
  Image odd = random_image(rng, 60, 64);
  CHECK_THROWS_AS(image_encode(odd, params), ShapeError);
}

TEST_CASE("prompt encoder contract") {
  Fixture f;
  const auto& p = *f.params;
  const PromptTokens pt = prompt_encode(Prompt{0, PointPrompt{3, 4, true}}, 16, 16, p);
  CHECK(pt.sparse.rows() == 1);
  CHECK(!pt.dense);
  const PromptTokens neg = prompt_encode(Prompt{0, PointPrompt{3, 4, false}}, 16, 16, p);
  CHECK(neg.sparse != pt.sparse);
  const PromptTokens bx = prompt_encode(Prompt{0, BoxPrompt{1, 1, 9, 12}}, 16, 16, p);
  CHECK(bx.sparse.rows() == 2);
  CHECK(!bx.dense);
  Mask ones(16, 16);
  std::fill(ones.cells.begin(), ones.cells.end(), 1);
  const PromptTokens z = prompt_encode(Prompt{0, MaskPrompt{Mask(16, 16)}}, 16, 16, p);
  const PromptTokens o = prompt_encode(Prompt{0, MaskPrompt{ones}}, 16, 16, p);
  REQUIRE(z.dense);
  REQUIRE(o.dense);
  CHECK(z.sparse.rows() == 1);
  CHECK(z.dense->rows() == 16);
  CHECK(z.dense->cols() == 8);
  CHECK(*z.dense != *o.dense);
  CHECK_THROWS_AS(prompt_encode(Prompt{0, PointPrompt{16, 0, true}}, 16, 16, p), ArgumentError);
  CHECK_THROWS_AS(prompt_encode(Prompt{0, BoxPrompt{1, 1, 9, 16}}, 16, 16, p), ArgumentError);
}

TEST_CASE("memory encoder contract") {
  Fixture f;
  const EmbeddingMap e = image_encode(f.flow.frames[0].image, *f.params);
  const Tensor zeros(16, 16), ones(16, 16, 1.0);
  const MemoryFeature a = memory_encode(e, zeros, *f.params);
  const MemoryFeature b = memory_encode(e, ones, *f.params);
  CHECK(a.tokens.rows() == 16);
  CHECK(a.tokens != b.tokens);
  CHECK(memory_encode(e, zeros, *f.params).tokens == a.tokens);
  CHECK_THROWS_AS(memory_encode(e, Tensor(8, 16), *f.params), ShapeError);
  CHECK_THROWS_AS(memory_encode(e, Tensor(16, 16, 1.5), *f.params), ArgumentError);
}

TEST_CASE("conditioning on weighted memory") {
  Fixture f;
  const auto& p = *f.params;
  const Prompt pr = auto_prompt(f.flow.frames[0].mask, PromptKind::mask, 0);
  const FrameResult first = forward_frame(f.flow.frames[0].image, pr, {}, {}, p);
  const FrameResult second = forward_frame(f.flow.frames[1].image, std::nullopt,
                                           std::vector<MemoryRef>{memory_ref(first.entry)},
                                           std::vector<double>{1.0}, p, 1);
  const EmbeddingMap e = image_encode(f.flow.frames[2].image, p);
  const MemoryRef r1 = memory_ref(first.entry), r2 = memory_ref(second.entry);

  // no entries: memory-path weights do not matter
  ModelParams altered = p;
  const auto& L = altered.layout();
  for (const auto& blk : L.memory)
    for (auto idx : {blk.cross_attn.q.w, blk.cross_attn.k.w, blk.cross_attn.v.w, blk.cross_attn.o.w})
      altered.mutable_tensors()[idx] *= 3.0;
  altered.mutable_tensors()[L.memory_fuse.w] *= -1.0;
  CHECK(condition(e, {}, {}, p).tokens == condition(e, {}, {}, altered).tokens);
  CHECK(condition(e, std::vector{r1}, std::vector{1.0}, p).tokens !=
        condition(e, std::vector{r1}, std::vector{1.0}, altered).tokens);

  // one entry at weight 1 matches a bias of zero; a zero weight is masking
  const Tensor single = condition(e, std::vector{r1}, std::vector{1.0}, p).tokens;
  const Tensor masked = condition(e, std::vector{r1, r1}, std::vector{1.0, 0.0}, p).tokens;
  CHECK(max_abs_diff(single, masked) <= 1e-9);
  const Tensor other_masked = condition(e, std::vector{r1, r2}, std::vector{1.0, 0.0}, p).tokens;
  CHECK(max_abs_diff(single, other_masked) <= 1e-9);
  // duplicating an entry and splitting its weight changes nothing
  const Tensor halves = condition(e, std::vector{r1, r1}, std::vector{0.5, 0.5}, p).tokens;
  CHECK(max_abs_diff(single, halves) <= 1e-9);
  // different weights move the output
  const Tensor mix = condition(e, std::vector{r1, r2}, std::vector{0.2, 0.8}, p).tokens;
  CHECK(max_abs_diff(mix, single) > 1e-6);

  CHECK_THROWS_AS(condition(e, std::vector{r1, r2}, std::vector{1.5, -0.5}, p), ArgumentError);
  CHECK_THROWS_AS(condition(e, std::vector{r1}, std::vector{0.5, 0.5}, p), ArgumentError);
}

TEST_CASE("forward_frame contract") {
  Fixture f;
  const auto& p = *f.params;
  const Image& im = f.flow.frames[0].image;
  const Prompt pr{0, PointPrompt{8, 8, true}};
  const FrameResult a = forward_frame(im, pr, {}, {}, p);
  CHECK(a.prediction.mask.height == 16);
  CHECK(a.prediction.probs.rows() == 16);
  CHECK(a.entry.is_template);
  CHECK(a.entry.summary.size() == 8);
  CHECK(a.entry.feature.rows() == 16);
  CHECK(a.entry.pointer.size() == 8);
  for (std::size_t i = 0; i < 256; ++i) {
    CHECK(a.prediction.mask.cells[i] == (a.prediction.probs[i] >= 0.5 ? 1 : 0));
    REQUIRE((a.prediction.probs[i] > 0.0 && a.prediction.probs[i] < 1.0));
  }
  CHECK(forward_frame(im, pr, {}, {}, p).prediction == a.prediction);
  CHECK_THROWS_AS(forward_frame(im, std::nullopt, {}, {}, p), UsageError);
  CHECK_NOTHROW(forward_frame(im, std::nullopt, {}, {}, p, 0, true));
  const FrameResult b = forward_frame(f.flow.frames[1].image, std::nullopt,
                                      std::vector<MemoryRef>{memory_ref(a.entry)}, std::vector<double>{1.0}, p, 1);
  CHECK(!b.entry.is_template);
  CHECK(b.entry.frame_index == 1);
}

TEST_CASE("confidence stays in [0,1] across random models and inputs") {
  Rng rng(8);
  int checked = 0;
  for (int model = 0; model < 10; ++model) {
    ModelParams p(ModelConfig::tiny(), 100 + model);
    for (auto& t : p.mutable_tensors())
      for (auto& x : t.storage()) x += rng.normal(0.0, 0.5);
    for (int trial = 0; trial < 100; ++trial) {
      const Image im = random_image(rng, 16, 16);
      Prompt pr{0, PointPrompt{rng.below(16), rng.below(16), rng.bernoulli(0.8)}};
      if (trial % 3 == 1) pr.shape = BoxPrompt{1, 2, 10, 13};
      const FrameResult r = forward_frame(im, pr, {}, {}, p);
      CHECK((r.prediction.confidence >= 0.0 && r.prediction.confidence <= 1.0));
      ++checked;
    }
  }
  CHECK(checked == 1000);
}

TEST_CASE("memory cache leaves values and gradients unchanged") {
  Fixture f;
  const auto& p = *f.params;
  const Prompt pr = auto_prompt(f.flow.frames[0].mask, PromptKind::mask, 0);
  ad::Graph g0(p.tensors(), false);
  const FrameVars v0 = forward_frame_graph(g0, p, f.flow.frames[0].image, &pr, {}, {});
  const membank::MemoryEntry entry = make_entry(g0, v0, p, 16, 16, 0, true, false);
  REQUIRE(entry.source);

  auto run = [&](bool cached, std::vector<Tensor>& grads) {
    ad::Graph g(p.tensors(), true);
    MemoryCache cache;
    MemoryRef ref = memory_ref(entry, true);
    ref.cache_key = 0;
    const std::vector<MemoryRef> refs{ref};
    const std::vector<double> w{1.0};
    std::vector<ad::Var> outs;
    for (std::size_t fr = 1; fr < 3; ++fr) {
      const ad::Var e = encode_image(g, p, f.flow.frames[fr].image);
      outs.push_back(condition_embedding(g, p, e, 4, 4, refs, w, cached ? &cache : nullptr));
    }
    if (cached) CHECK(cache.items.size() == 1);
    const ad::Var loss = ad::add(ad::sum_all(ad::square(outs[0])), ad::sum_all(outs[1]));
    grads.clear();
    for (const auto& t : p.tensors()) grads.push_back(Tensor::zeros_like(t));
    g.backward(loss, grads);
    return std::pair{g.value(outs[0]), g.value(outs[1])};
  };
  std::vector<Tensor> ga, gb;
  const auto a = run(false, ga);
  const auto b = run(true, gb);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  double worst = 0;
  for (std::size_t i = 0; i < ga.size(); ++i) worst = std::max(worst, max_abs_diff(ga[i], gb[i]));
  CHECK(worst < 1e-10);
}

TEST_CASE("positional encoding and pixel features") {
  const auto pe = positional_encoding(0.25, 0.75, 8);
  REQUIRE(pe.size() == 8);
  // two frequencies, 0.5 and 16: layout sin y, cos y, sin x, cos x
  const double tau = 6.283185307179586;
  CHECK(pe[0] == doctest::Approx(std::sin(tau * 0.5 * 0.25)));
  CHECK(pe[3] == doctest::Approx(std::cos(tau * 16 * 0.25)));
  CHECK(pe[4] == doctest::Approx(std::sin(tau * 0.5 * 0.75)));
  const Tensor grid = grid_encoding(2, 2, 8);
  CHECK(grid.rows() == 4);
  const auto centre = positional_encoding(0.25, 0.75, 8);
  for (std::size_t c = 0; c < 8; ++c) CHECK(grid(1, c) == centre[c]);
  Image flat{8, 8, std::vector<float>(64, 1.0f)};
  const Tensor pf = pixel_features(flat);
  CHECK(pf.rows() == 64);
  CHECK(pf.cols() == kPixelFeatures);
  CHECK(pf(27, 0) == 1.0);
  CHECK(pf(27, 1) == doctest::Approx(1.0));
}

TEST_CASE("checkpoint round trip") {
  const ModelParams p(ModelConfig::tiny(), 9);
  const auto bytes = encode_checkpoint(p);
  const ModelParams q = decode_checkpoint(bytes);
  CHECK(q == p);
  CHECK(q.seed == p.seed);
  CHECK(ModelParams(ModelConfig::tiny(), 9) == p);
  CHECK(ModelParams(ModelConfig::tiny(), 10) != p);
  const auto path = std::filesystem::temp_directory_path() / "flowseg_tiny.ckpt";
  save_checkpoint(p, path);
  CHECK(load_checkpoint(path, ModelConfig::tiny()) == p);
  CHECK_THROWS_AS(load_checkpoint(path, ModelConfig{}), Error);
  std::filesystem::remove(path);
  auto cut = bytes;
  cut.resize(cut.size() / 2);
  CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
}
