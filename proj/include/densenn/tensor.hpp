#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "densenn/errors.hpp"

namespace densenn {

/// Integer extent or coordinate along (x, y, z).
struct Vec3 {
  std::size_t x = 1;
  std::size_t y = 1;
  std::size_t z = 1;

  constexpr std::size_t volume() const noexcept { return x * y * z; }
  constexpr std::size_t operator[](int axis) const noexcept { return axis == 0 ? x : axis == 1 ? y : z; }
  constexpr std::size_t& operator[](int axis) noexcept { return axis == 0 ? x : axis == 1 ? y : z; }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
  friend constexpr Vec3 operator+(Vec3 a, Vec3 b) noexcept { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend constexpr Vec3 operator*(Vec3 a, Vec3 b) noexcept { return {a.x * b.x, a.y * b.y, a.z * b.z}; }
};

inline std::string to_string(const Vec3& v) {
  return std::to_string(v.x) + "x" + std::to_string(v.y) + "x" + std::to_string(v.z);
}

inline std::ostream& operator<<(std::ostream& os, const Vec3& v) { return os << to_string(v); }

/// Physical voxel spacing in nanometres.
struct VoxelSize {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;
  friend bool operator==(const VoxelSize&, const VoxelSize&) = default;
};

/// Dense 3D grid stored x-fastest, then y, then z. All dims are at least 1.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() : dims_{1, 1, 1}, values_(1, T{}) {}

  explicit Grid(Vec3 dims, T fill = T{}) : dims_(dims) {
    check_dims(dims);
    values_.assign(dims.volume(), fill);
  }

  Grid(Vec3 dims, std::vector<T> values) : dims_(dims), values_(std::move(values)) {
    check_dims(dims);
    if (values_.size() != dims.volume())
      throw ShapeError("grid of dims " + to_string(dims) + " needs " + std::to_string(dims.volume()) +
                       " values, got " + std::to_string(values_.size()));
  }

  const Vec3& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
    return (z * dims_.y + y) * dims_.x + x;
  }

  T& operator()(std::size_t x, std::size_t y, std::size_t z) noexcept { return values_[index(x, y, z)]; }
  const T& operator()(std::size_t x, std::size_t y, std::size_t z) const noexcept {
    return values_[index(x, y, z)];
  }
  T& operator[](std::size_t i) noexcept { return values_[i]; }
  const T& operator[](std::size_t i) const noexcept { return values_[i]; }

  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  const std::vector<T>& storage() const noexcept { return values_; }

  void fill(T value) { std::fill(values_.begin(), values_.end(), value); }

  std::optional<VoxelSize> voxel_size;

  friend bool operator==(const Grid& a, const Grid& b) { return a.dims_ == b.dims_ && a.values_ == b.values_; }

 private:
  static void check_dims(const Vec3& d) {
    if (d.x == 0 || d.y == 0 || d.z == 0) throw ShapeError("grid dims must be positive, got " + to_string(d));
  }

  Vec3 dims_;
  std::vector<T> values_;
};

using Volume = Grid<float>;
/// Label grid; 0 marks boundary/background.
using Segmentation = Grid<std::uint32_t>;

/// Axis-aligned sub-box of a grid.
struct Window {
  Vec3 offset{0, 0, 0};
  Vec3 shape{1, 1, 1};
};

inline bool fits(const Window& w, const Vec3& dims) {
  for (int a = 0; a < 3; ++a)
    if (w.shape[a] == 0 || w.offset[a] + w.shape[a] > dims[a]) return false;
  return true;
}

template <typename T>
Grid<T> crop(const Grid<T>& v, const Window& w) {
  if (!fits(w, v.dims()))
    throw BoundsError("window at " + to_string(w.offset) + " of shape " + to_string(w.shape) +
                      " exceeds volume " + to_string(v.dims()));
  Grid<T> out(w.shape);
  for (std::size_t z = 0; z < w.shape.z; ++z)
    for (std::size_t y = 0; y < w.shape.y; ++y) {
      const T* src = &v(w.offset.x, w.offset.y + y, w.offset.z + z);
      std::copy(src, src + w.shape.x, &out(0, y, z));
    }
  out.voxel_size = v.voxel_size;
  return out;
}

/// Writes `src` into `dst` at `offset`.
template <typename T>
void paste(Grid<T>& dst, const Grid<T>& src, const Vec3& offset) {
  if (!fits(Window{offset, src.dims()}, dst.dims()))
    throw BoundsError("paste of " + to_string(src.dims()) + " at " + to_string(offset) + " exceeds " +
                      to_string(dst.dims()));
  for (std::size_t z = 0; z < src.dims().z; ++z)
    for (std::size_t y = 0; y < src.dims().y; ++y) {
      const T* s = &src(0, y, z);
      std::copy(s, s + src.dims().x, &dst(offset.x, offset.y + y, offset.z + z));
    }
}

// In-plane dihedral group. t = rotation + 4 * flip, rotation counted in quarter
// turns; the x-flip is applied after the rotation.
constexpr int kDihedralCount = 8;

inline void check_dihedral(int t) {
  if (t < 0 || t >= kDihedralCount) throw std::invalid_argument("dihedral index must be in 0..7, got " + std::to_string(t));
}

inline Vec3 dihedral_dims(const Vec3& d, int t) {
  check_dihedral(t);
  return (t % 4) % 2 == 1 ? Vec3{d.y, d.x, d.z} : d;
}

inline int dihedral_inverse(int t) {
  check_dihedral(t);
  if (t >= 4) return t;  // reflections are involutions
  return (4 - t) % 4;
}

namespace detail {

// Source (x, y) in the input plane for output (x, y) under one quarter turn.
// Rotating [[a,b],[c,d]] (rows are y) yields [[c,a],[d,b]].
inline std::pair<std::size_t, std::size_t> rot90_source(std::size_t x, std::size_t y, std::size_t in_ny) {
  return {y, in_ny - 1 - x};
}

}  // namespace detail

template <typename T>
Grid<T> dihedral_xy(const Grid<T>& v, int t) {
  check_dihedral(t);
  const int rot = t % 4;
  const bool flip = t >= 4;
  Grid<T> cur = v;
  for (int r = 0; r < rot; ++r) {
    const Vec3 d = cur.dims();
    Grid<T> next(Vec3{d.y, d.x, d.z});
    for (std::size_t z = 0; z < d.z; ++z)
      for (std::size_t y = 0; y < d.x; ++y)
        for (std::size_t x = 0; x < d.y; ++x) {
          auto [sx, sy] = detail::rot90_source(x, y, d.y);
          next(x, y, z) = cur(sx, sy, z);
        }
    cur = std::move(next);
  }
  if (flip) {
    const Vec3 d = cur.dims();
    for (std::size_t z = 0; z < d.z; ++z)
      for (std::size_t y = 0; y < d.y; ++y) {
        T* row = &cur(0, y, z);
        std::reverse(row, row + d.x);
      }
  }
  cur.voxel_size = v.voxel_size;
  if (cur.voxel_size && rot % 2 == 1) std::swap(cur.voxel_size->x, cur.voxel_size->y);
  return cur;
}

}  // namespace densenn
