#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "flowseg/flowdata.hpp"

namespace flowseg::metrics {

struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Foreground cells with at least one background 4-neighbour; the image
/// border counts as background.
using BoundarySet = std::vector<Cell>;

/// Both-empty masks score 1; empty against non-empty scores 0.
double iou(const Mask& pred, const Mask& gt);
double dice(const Mask& pred, const Mask& gt);

BoundarySet boundary(const Mask& mask);

enum class Hd95Pooling {
  both_directions,  ///< pool pred->gt and gt->pred nearest distances
  pred_to_gt,       ///< directed, prediction boundary only
};

/// 95th percentile (linear interpolation at rank 0.95*(n-1)) of boundary
/// nearest-neighbour distances. Throws EmptyMask when either mask is empty.
double hd95(const Mask& pred, const Mask& gt, Hd95Pooling pooling = Hd95Pooling::both_directions);

/// Linear-interpolation percentile of unsorted values; q in [0, 1].
double percentile(std::vector<double> values, double q);

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side has zero variance or fewer than two samples.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace flowseg::metrics
