#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "densenn/tensor.hpp"

namespace densenn {

/// Fraction of voxels where (map >= t) disagrees with the binary label.
double pixel_error(const Volume& map, const Volume& labels, double t);

struct ThresholdResult {
  double threshold = 0.0;
  double error = 0.0;
};

/// Line search over t = 0, step, 2*step, ..., 1; lowest t wins ties.
ThresholdResult best_pixel_error(const Volume& map, const Volume& labels, double step = 0.01);

/// Per z-slice: voxels with map >= t become 0, the rest are split into
/// 4-connected components. Labels are unique across the whole volume.
Segmentation connected_components_2d(const Volume& map, double t);

/// Per z-slice priority-flood watershed. Seeds are the 4-connected components
/// of {map < t_low}; voxels with map >= t_high stay 0; basins smaller than
/// min_size are merged into the neighbour with the lowest shared boundary, or
/// dropped to 0 if they have none.
Segmentation watershed_2d(const Volume& map, double t_low, double t_high, std::size_t min_size);

struct RandScores {
  double merge = 0.0;
  double split = 0.0;
  double f = 0.0;
};

/// Rand merge/split/F over voxels labelled nonzero in both segmentations.
/// Throws NumericalError when no voxel qualifies.
RandScores rand_scores(const Segmentation& proposal, const Segmentation& truth);

/// Gives each (z, label) pair its own label so a 3D truth can be compared
/// with per-slice segmentations. 0 stays 0.
Segmentation split_by_slice(const Segmentation& truth);

struct CcParams {
  double threshold = 0.5;
};

struct WsParams {
  double t_low = 0.1;
  double t_high = 0.9;
  std::size_t min_size = 0;
};

using SegParams = std::variant<CcParams, WsParams>;

Segmentation segment(const Volume& map, const SegParams& params);
std::string describe(const SegParams& params);

struct CurvePoint {
  SegParams params;
  std::optional<RandScores> scores;  // empty when the point was undefined
  std::string note;
};

// The curve functions score 2D segmentations, so they compare against
// split_by_slice(truth).

/// One point per grid entry, sorted by split score; undefined points trail.
std::vector<CurvePoint> rand_pr_curve(const Volume& map, const Segmentation& truth, std::span<const SegParams> grid);

struct BestRand {
  SegParams params;
  RandScores scores;
};

/// First grid entry with the highest Rand F.
BestRand best_rand_f(const Volume& map, const Segmentation& truth, std::span<const SegParams> grid);

/// Threshold values lo, lo+step, ..., hi computed as integer multiples of step.
std::vector<double> linear_grid(double lo, double hi, double step);

/// `param..., split, merge, f` per line; skipped points become `# ...` lines.
std::string format_curve(const std::vector<CurvePoint>& curve, char delim = ',');

}  // namespace densenn
