#include "densenn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <queue>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include "densenn/parallel.hpp"

namespace densenn {

namespace {

void require_same_dims(const Vec3& a, const Vec3& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": dims " + to_string(a) + " and " + to_string(b) + " differ");
}

// Pixel indices of one z-slice and its 4-neighbours.
struct SliceView {
  std::size_t nx, ny;
  template <typename F>
  void neighbours(std::size_t p, F&& f) const {
    const std::size_t x = p % nx, y = p / nx;
    if (x > 0) f(p - 1);
    if (x + 1 < nx) f(p + 1);
    if (y > 0) f(p - nx);
    if (y + 1 < ny) f(p + nx);
  }
};

// Labels 4-connected components of `mask` in one slice with 1..k; returns k.
std::uint32_t label_components(const std::vector<char>& mask, const SliceView& view, std::vector<std::uint32_t>& labels) {
  std::uint32_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p] || labels[p] != 0) continue;
    labels[p] = ++next;
    stack.push_back(p);
    while (!stack.empty()) {
      const std::size_t q = stack.back();
      stack.pop_back();
      view.neighbours(q, [&](std::size_t r) {
        if (mask[r] && labels[r] == 0) {
          labels[r] = next;
          stack.push_back(r);
        }
      });
    }
  }
  return next;
}

// Runs per-slice labelling in parallel, then makes labels unique by offsetting
// each slice by the label count of the slices before it.
template <typename SliceFn>
Segmentation per_slice(const Volume& map, SliceFn&& fn) {
  const Vec3 d = map.dims();
  const std::size_t plane = d.x * d.y;
  std::vector<std::vector<std::uint32_t>> slices(d.z);
  std::vector<std::uint32_t> counts(d.z, 0);
  parallel_for(d.z, [&](std::size_t z) {
    std::vector<float> values(map.data() + z * plane, map.data() + (z + 1) * plane);
    slices[z].assign(plane, 0);
    counts[z] = fn(values, SliceView{d.x, d.y}, slices[z]);
  });
  Segmentation seg(d, 0);
  std::uint32_t offset = 0;
  for (std::size_t z = 0; z < d.z; ++z) {
    for (std::size_t p = 0; p < plane; ++p)
      if (slices[z][p] != 0) seg[z * plane + p] = slices[z][p] + offset;
    offset += counts[z];
  }
  return seg;
}

std::uint32_t watershed_slice(const std::vector<float>& map, const SliceView& view, float t_low, float t_high,
                              std::size_t min_size, std::vector<std::uint32_t>& labels) {
  const std::size_t n = map.size();
  std::vector<char> seed_mask(n);
  for (std::size_t p = 0; p < n; ++p) seed_mask[p] = map[p] < t_low && map[p] < t_high;
  const std::uint32_t basins = label_components(seed_mask, view, labels);

  // Flood: repeatedly take the lowest unassigned pixel bordering a basin.
  using Entry = std::tuple<float, std::uint64_t, std::size_t, std::uint32_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue;
  std::uint64_t order = 0;
  auto push_neighbours = [&](std::size_t p) {
    view.neighbours(p, [&](std::size_t q) {
      if (labels[q] == 0 && map[q] < t_high) queue.emplace(map[q], order++, q, labels[p]);
    });
  };
  for (std::size_t p = 0; p < n; ++p)
    if (labels[p] != 0) push_neighbours(p);
  while (!queue.empty()) {
    auto [value, ord, p, basin] = queue.top();
    queue.pop();
    if (labels[p] != 0) continue;
    labels[p] = basin;
    push_neighbours(p);
  }

  if (min_size == 0 || basins == 0) return basins;

  // Size-based merging over the basin adjacency graph.
  std::vector<std::size_t> size(basins + 1, 0);
  for (auto l : labels) ++size[l];
  std::vector<std::map<std::uint32_t, float>> edges(basins + 1);
  for (std::size_t p = 0; p < n; ++p) {
    if (labels[p] == 0) continue;
    view.neighbours(p, [&](std::size_t q) {
      const auto a = labels[p], b = labels[q];
      if (b == 0 || a == b) return;
      const float v = std::max(map[p], map[q]);
      auto [it, fresh] = edges[a].emplace(b, v);
      if (!fresh) it->second = std::min(it->second, v);
    });
  }
  std::vector<std::uint32_t> target(basins + 1);
  for (std::uint32_t b = 0; b <= basins; ++b) target[b] = b;
  std::vector<bool> alive(basins + 1, true);
  alive[0] = false;
  for (;;) {
    std::uint32_t small = 0;
    for (std::uint32_t b = 1; b <= basins; ++b)
      if (alive[b] && size[b] < min_size && (small == 0 || size[b] < size[small])) small = b;
    if (small == 0) break;
    alive[small] = false;
    if (edges[small].empty()) {
      target[small] = 0;
      continue;
    }
    std::uint32_t into = 0;
    float best = std::numeric_limits<float>::infinity();
    for (auto [b, v] : edges[small])
      if (v < best) {
        best = v;
        into = b;
      }
    target[small] = into;
    size[into] += size[small];
    for (auto [b, v] : edges[small]) {
      edges[b].erase(small);
      if (b == into) continue;
      auto [it, fresh] = edges[into].emplace(b, v);
      if (!fresh) it->second = std::min(it->second, v);
      auto [jt, fresh2] = edges[b].emplace(into, v);
      if (!fresh2) jt->second = std::min(jt->second, v);
    }
    edges[small].clear();
  }
  auto resolve = [&](std::uint32_t b) {
    while (target[b] != b) b = target[b];
    return b;
  };
  std::vector<std::uint32_t> compact(basins + 1, 0);
  std::uint32_t next = 0;
  for (auto& l : labels) {
    if (l == 0) continue;
    const auto r = resolve(l);
    if (r == 0) {
      l = 0;
      continue;
    }
    if (compact[r] == 0) compact[r] = ++next;
    l = compact[r];
  }
  return next;
}

}  // namespace

double pixel_error(const Volume& map, const Volume& labels, double t) {
  require_same_dims(map.dims(), labels.dims(), "pixel_error");
  const float tf = static_cast<float>(t);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < map.size(); ++i) wrong += (map[i] >= tf) != (labels[i] >= 0.5f);
  return double(wrong) / double(map.size());
}

std::vector<double> linear_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || hi < lo) throw std::invalid_argument("grid needs step > 0 and hi >= lo");
  std::vector<double> r;
  const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
  for (std::size_t k = 0; k <= count; ++k) r.push_back(lo + double(k) * step);
  return r;
}

ThresholdResult best_pixel_error(const Volume& map, const Volume& labels, double step) {
  ThresholdResult best{0.0, std::numeric_limits<double>::infinity()};
  const auto steps = static_cast<std::size_t>(std::llround(1.0 / step));
  for (std::size_t k = 0; k <= steps; ++k) {
    const double t = double(k) / double(steps);
    const double e = pixel_error(map, labels, t);
    if (e < best.error) best = {t, e};
  }
  return best;
}

Segmentation connected_components_2d(const Volume& map, double t) {
  const float tf = static_cast<float>(t);
  return per_slice(map, [tf](const std::vector<float>& values, const SliceView& view, std::vector<std::uint32_t>& labels) {
    std::vector<char> mask(values.size());
    for (std::size_t p = 0; p < values.size(); ++p) mask[p] = values[p] < tf;
    return label_components(mask, view, labels);
  });
}

Segmentation watershed_2d(const Volume& map, double t_low, double t_high, std::size_t min_size) {
  if (!(t_low >= 0.0 && t_low <= t_high && t_high <= 1.0))
    throw std::invalid_argument("watershed needs 0 <= t_low <= t_high <= 1");
  const float lo = static_cast<float>(t_low), hi = static_cast<float>(t_high);
  return per_slice(map, [=](const std::vector<float>& values, const SliceView& view, std::vector<std::uint32_t>& labels) {
    return watershed_slice(values, view, lo, hi, min_size, labels);
  });
}

RandScores rand_scores(const Segmentation& proposal, const Segmentation& truth) {
  require_same_dims(proposal.dims(), truth.dims(), "rand_scores");
  std::unordered_map<std::uint64_t, std::uint64_t> joint;
  std::unordered_map<std::uint32_t, std::uint64_t> rows, cols;
  for (std::size_t k = 0; k < proposal.size(); ++k) {
    const auto i = proposal[k], j = truth[k];
    if (i == 0 || j == 0) continue;
    ++joint[(std::uint64_t(i) << 32) | j];
    ++rows[i];
    ++cols[j];
  }
  if (joint.empty()) throw NumericalError("Rand score undefined: no voxel is labelled in both segmentations");
  std::uint64_t sum_joint = 0, sum_rows = 0, sum_cols = 0;
  for (auto [key, n] : joint) sum_joint += n * n;
  for (auto [key, n] : rows) sum_rows += n * n;
  for (auto [key, n] : cols) sum_cols += n * n;
  RandScores r;
  r.merge = double(sum_joint) / double(sum_rows);
  r.split = double(sum_joint) / double(sum_cols);
  r.f = 2.0 * r.merge * r.split / (r.merge + r.split);
  return r;
}

Segmentation split_by_slice(const Segmentation& truth) {
  const Vec3 d = truth.dims();
  Segmentation out(d, 0u);
  std::unordered_map<std::uint64_t, std::uint32_t> ids;
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const auto l = truth(x, y, z);
        if (l == 0) continue;
        auto [it, fresh] = ids.try_emplace((std::uint64_t(z) << 32) | l, std::uint32_t(ids.size() + 1));
        out(x, y, z) = it->second;
      }
  return out;
}

Segmentation segment(const Volume& map, const SegParams& params) {
  if (auto* cc = std::get_if<CcParams>(&params)) return connected_components_2d(map, cc->threshold);
  const auto& ws = std::get<WsParams>(params);
  return watershed_2d(map, ws.t_low, ws.t_high, ws.min_size);
}

std::string describe(const SegParams& params) {
  std::ostringstream os;
  if (auto* cc = std::get_if<CcParams>(&params))
    os << "cc t=" << cc->threshold;
  else {
    const auto& ws = std::get<WsParams>(params);
    os << "ws t_low=" << ws.t_low << " t_high=" << ws.t_high << " min_size=" << ws.min_size;
  }
  return os.str();
}

std::vector<CurvePoint> rand_pr_curve(const Volume& map, const Segmentation& truth, std::span<const SegParams> grid) {
  if (grid.empty()) throw std::invalid_argument("parameter grid is empty");
  require_same_dims(map.dims(), truth.dims(), "rand_pr_curve");
  const Segmentation truth2d = split_by_slice(truth);
  std::vector<CurvePoint> points(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    points[k].params = grid[k];
    try {
      points[k].scores = rand_scores(segment(map, grid[k]), truth2d);
    } catch (const NumericalError& e) {
      points[k].note = e.what();
    }
  }
  std::stable_sort(points.begin(), points.end(), [](const CurvePoint& a, const CurvePoint& b) {
    if (!a.scores || !b.scores) return a.scores.has_value() && !b.scores.has_value();
    return a.scores->split < b.scores->split;
  });
  return points;
}

BestRand best_rand_f(const Volume& map, const Segmentation& truth, std::span<const SegParams> grid) {
  if (grid.empty()) throw std::invalid_argument("parameter grid is empty");
  require_same_dims(map.dims(), truth.dims(), "best_rand_f");
  const Segmentation truth2d = split_by_slice(truth);
  std::optional<BestRand> best;
  for (const auto& p : grid) {
    try {
      const auto s = rand_scores(segment(map, p), truth2d);
      if (!best || s.f > best->scores.f) best = BestRand{p, s};
    } catch (const NumericalError&) {
    }
  }
  if (!best) throw NumericalError("Rand score undefined at every grid point");
  return *best;
}

std::string format_curve(const std::vector<CurvePoint>& curve, char delim) {
  std::ostringstream os;
  os.precision(10);
  for (const auto& pt : curve) {
    if (!pt.scores) {
      os << "# skipped " << describe(pt.params) << ": " << pt.note << "\n";
      continue;
    }
    if (auto* cc = std::get_if<CcParams>(&pt.params))
      os << cc->threshold << delim;
    else {
      const auto& ws = std::get<WsParams>(pt.params);
      os << ws.t_low << delim << ws.t_high << delim << ws.min_size << delim;
    }
    os << pt.scores->split << delim << pt.scores->merge << delim << pt.scores->f << "\n";
  }
  return os.str();
}

}  // namespace densenn
