#include "flowseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowseg/errors.hpp"
#include "flowseg/kernels.hpp"

namespace flowseg::metrics {
namespace {

void require_same_shape(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width || a.cells.size() != b.cells.size()) {
    throw ShapeError("masks differ in shape");
  }
}

struct Overlap {
  std::size_t inter = 0, pred = 0, gt = 0;
};

Overlap overlap(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt);
  Overlap o;
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    o.pred += pred.cells[i];
    o.gt += gt.cells[i];
    o.inter += pred.cells[i] & gt.cells[i];
  }
  return o;
}

// Nearest distances from every cell of `from` to the set `to`, via an exact
// distance transform of `to`'s indicator.
void directed_distances(const BoundarySet& from, const BoundarySet& to, std::size_t h,
                        std::size_t w, std::vector<double>& out) {
  std::vector<unsigned char> indicator(h * w, 0);
  for (const Cell& c : to) indicator[c.row * w + c.col] = 1;
  std::vector<double> sq(h * w);
  kernels::squared_edt(indicator, sq, h, w);
  for (const Cell& c : from) out.push_back(std::sqrt(sq[c.row * w + c.col]));
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double iou(const Mask& pred, const Mask& gt) {
  const Overlap o = overlap(pred, gt);
  const std::size_t uni = o.pred + o.gt - o.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(o.inter) / static_cast<double>(uni);
}

double dice(const Mask& pred, const Mask& gt) {
  const Overlap o = overlap(pred, gt);
  if (o.pred + o.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.pred + o.gt);
}

BoundarySet boundary(const Mask& mask) {
  validate(mask);
  BoundarySet out;
  const std::size_t h = mask.height, w = mask.width;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w || !mask.at(r - 1, c) ||
                        !mask.at(r + 1, c) || !mask.at(r, c - 1) || !mask.at(r, c + 1);
      if (edge) out.push_back({r, c});
    }
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double hd95(const Mask& pred, const Mask& gt, Hd95Pooling pooling) {
  require_same_shape(pred, gt);
  if (pred.empty() || gt.empty()) throw EmptyMask("hd95 needs two non-empty masks");
  const BoundarySet a = boundary(pred);
  const BoundarySet b = boundary(gt);
  std::vector<double> d;
  d.reserve(a.size() + b.size());
  directed_distances(a, b, pred.height, pred.width, d);
  if (pooling == Hd95Pooling::both_directions) directed_distances(b, a, pred.height, pred.width, d);
  return percentile(std::move(d), 0.95);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spearman: length mismatch");
  if (a.size() < 2) return 0.0;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace flowseg::metrics
