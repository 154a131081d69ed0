#pragma once

// Independent oracles for the network engine.
//
// The reference evaluates the *strided* network: ordinary valid convolution
// and non-overlapping max-pooling, applied to one field-of-view window at a
// time. Scanning the window over the input gives what the dense engine must
// reproduce. Templated on the scalar so the same code serves as a bit-exact
// float oracle (summation order matches the engine) and as a double-precision
// loss for finite differences.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "densenn/netgraph.hpp"
#include "densenn/tensor.hpp"

namespace ref {

using densenn::Vec3;

template <typename T>
struct Grid {
  Vec3 d{1, 1, 1};
  std::vector<T> v;

  Grid() = default;
  explicit Grid(Vec3 dims) : d(dims), v(dims.volume(), T(0)) {}
  T& at(std::size_t x, std::size_t y, std::size_t z) { return v[(z * d.y + y) * d.x + x]; }
  T at(std::size_t x, std::size_t y, std::size_t z) const { return v[(z * d.y + y) * d.x + x]; }
};

template <typename T>
Grid<T> window(const densenn::Volume& src, const Vec3& at, const Vec3& shape) {
  Grid<T> g(shape);
  for (std::size_t z = 0; z < shape.z; ++z)
    for (std::size_t y = 0; y < shape.y; ++y)
      for (std::size_t x = 0; x < shape.x; ++x) g.at(x, y, z) = T(src(at.x + x, at.y + y, at.z + z));
  return g;
}

/// Per-layer parameters in scalar T, indexed by node like ParamState.
template <typename T>
struct Params {
  std::vector<std::vector<T>> w, b;
};

template <typename T>
Params<T> convert(const densenn::ParamState& p) {
  Params<T> out;
  for (const auto& l : p.layers) {
    out.w.emplace_back(l.weights.begin(), l.weights.end());
    out.b.emplace_back(l.bias.begin(), l.bias.end());
  }
  return out;
}

/// Records every relu sign and pooling winner, so finite differences can
/// tell whether a perturbation crossed a kink.
struct Signature {
  std::vector<std::uint32_t> bits;
  friend bool operator==(const Signature&, const Signature&) = default;
};

/// Class-1 probability of the strided network on a single window whose dims
/// equal the field of view.
template <typename T>
T window_output(const densenn::NetworkSpec& spec, const Params<T>& params, const std::map<std::string, Grid<T>>& inputs,
                Signature* sig = nullptr) {
  using densenn::NodeKind;
  const std::size_t n = spec.nodes.size();
  std::vector<std::vector<Grid<T>>> maps(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = spec.nodes[i];
    const std::vector<Grid<T>>* up = node.inputs.empty() ? nullptr : &maps[spec.index_of(node.inputs.front())];
    auto& out = maps[i];
    switch (node.kind) {
      case NodeKind::Input:
        out = {inputs.at(node.name)};
        break;
      case NodeKind::Conv: {
        const Vec3 k = node.filter;
        const Vec3 id = up->front().d;
        if (id.x < k.x || id.y < k.y || id.z < k.z) throw std::logic_error("reference: window too small at " + node.name);
        const Vec3 od{id.x - k.x + 1, id.y - k.y + 1, id.z - k.z + 1};
        const std::size_t in_maps = up->size(), taps = k.volume();
        for (std::size_t o = 0; o < node.out_maps; ++o) {
          Grid<T> g(od);
          for (std::size_t z = 0; z < od.z; ++z)
            for (std::size_t y = 0; y < od.y; ++y)
              for (std::size_t x = 0; x < od.x; ++x) {
                T acc = T(0);
                for (std::size_t c = 0; c < in_maps; ++c) {
                  const T* w = &params.w[i][(o * in_maps + c) * taps];
                  for (std::size_t qz = 0; qz < k.z; ++qz)
                    for (std::size_t qy = 0; qy < k.y; ++qy)
                      for (std::size_t qx = 0; qx < k.x; ++qx)
                        acc += w[(qz * k.y + qy) * k.x + qx] * (*up)[c].at(x + qx, y + qy, z + qz);
                }
                acc += params.b[i][o];
                g.at(x, y, z) = acc;
              }
          out.push_back(std::move(g));
        }
        break;
      }
      case NodeKind::MaxFilter: {
        const Vec3 w = node.filter;
        for (const auto& in : *up) {
          if (in.d.x % w.x || in.d.y % w.y || in.d.z % w.z)
            throw std::logic_error("reference: pooling window does not tile at " + node.name);
          Grid<T> g(Vec3{in.d.x / w.x, in.d.y / w.y, in.d.z / w.z});
          for (std::size_t z = 0; z < g.d.z; ++z)
            for (std::size_t y = 0; y < g.d.y; ++y)
              for (std::size_t x = 0; x < g.d.x; ++x) {
                T best = in.at(x * w.x, y * w.y, z * w.z);
                std::uint32_t arg = 0, q = 0;
                for (std::size_t qz = 0; qz < w.z; ++qz)
                  for (std::size_t qy = 0; qy < w.y; ++qy)
                    for (std::size_t qx = 0; qx < w.x; ++qx, ++q) {
                      const T v = in.at(x * w.x + qx, y * w.y + qy, z * w.z + qz);
                      if (v > best) {
                        best = v;
                        arg = q;
                      }
                    }
                g.at(x, y, z) = best;
                if (sig) sig->bits.push_back(arg);
              }
          out.push_back(std::move(g));
        }
        break;
      }
      case NodeKind::Activation:
        out = *up;
        for (auto& g : out)
          for (T& x : g.v) {
            if (node.activation == densenn::ActivationFn::Relu) {
              if (sig) sig->bits.push_back(x > T(0));
              x = std::max(x, T(0));
            } else {
              x = std::tanh(x);
            }
          }
        break;
      case NodeKind::Concat:
        for (const auto& name : node.inputs) {
          const auto& m = maps[spec.index_of(name)];
          out.insert(out.end(), m.begin(), m.end());
        }
        break;
      case NodeKind::Output: {
        if (up->at(0).d.volume() != 1) throw std::logic_error("reference: window does not reduce to one voxel");
        const T z0 = (*up)[0].v[0], z1 = (*up)[1].v[0];
        const T m = std::max(z0, z1);
        const T e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
        return e1 / (e0 + e1);
      }
    }
  }
  throw std::logic_error("reference: no output node");
}

/// Dense map of the strided network scanned over every window position.
template <typename T>
std::vector<T> dense_output(const densenn::NetworkSpec& spec, const Params<T>& params, const densenn::InputMap& inputs,
                            Vec3* out_dims = nullptr, Signature* sig = nullptr) {
  const Vec3 fov = densenn::field_of_view(spec);
  const Vec3 d = inputs.begin()->second.dims();
  const Vec3 m{d.x - fov.x + 1, d.y - fov.y + 1, d.z - fov.z + 1};
  if (out_dims) *out_dims = m;
  std::vector<T> out;
  out.reserve(m.volume());
  for (std::size_t z = 0; z < m.z; ++z)
    for (std::size_t y = 0; y < m.y; ++y)
      for (std::size_t x = 0; x < m.x; ++x) {
        std::map<std::string, Grid<T>> win;
        for (const auto& [name, v] : inputs) win.emplace(name, window<T>(v, Vec3{x, y, z}, fov));
        out.push_back(window_output(spec, params, win, sig));
      }
  return out;
}

/// Weighted cross-entropy of the dense output, unclamped, in double.
inline double dense_loss(const densenn::NetworkSpec& spec, const Params<double>& params, const densenn::InputMap& inputs,
                         const densenn::Volume& labels, const densenn::Volume& weights, Signature* sig = nullptr) {
  const auto p = dense_output(spec, params, inputs, nullptr, sig);
  double sum = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double y = labels[k];
    sum += double(weights[k]) * (-y * std::log(p[k]) - (1.0 - y) * std::log(1.0 - p[k]));
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Random network specs.

struct RandomSpecOptions {
  int max_pools = 2;
  std::size_t max_maps = 3;
  std::size_t max_kernel = 3;
  std::size_t max_kernel_z = 3;
  std::size_t max_pool_window = 3;
  std::size_t max_pool_window_z = 2;
  Vec3 max_fov{24, 24, 6};
  bool allow_branch = true;
};

/// Chain of conv (+ activation) and max-filter blocks ending in a 2-map
/// classifier, sometimes with a two-way branch joined by concat. Retries
/// until the field of view fits within opt.max_fov.
inline std::string random_spec(std::mt19937_64& rng, const RandomSpecOptions& opt) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  for (;;) {
    std::ostringstream os;
    os << "in input\n";
    std::string prev = "in";
    int id = 0;
    auto conv = [&](const std::string& up, std::size_t maps, Vec3 k) {
      const std::string name = "c" + std::to_string(id++);
      os << name << " conv " << k.x << "x" << k.y << "x" << k.z << " " << maps << " <- " << up << "\n";
      return name;
    };
    auto act = [&](const std::string& up) {
      const std::string name = "a" + std::to_string(id++);
      os << name << " activation " << (pick(0, 1) ? "relu" : "tanh") << " <- " << up << "\n";
      return name;
    };
    auto kernel = [&] { return Vec3{pick(1, opt.max_kernel), pick(1, opt.max_kernel), pick(1, opt.max_kernel_z)}; };

    const int pools = int(pick(0, std::size_t(opt.max_pools)));
    const bool branch = opt.allow_branch && pick(0, 3) == 0;
    for (int stage = 0; stage <= pools; ++stage) {
      const std::size_t convs = pick(1, 2);
      for (std::size_t c = 0; c < convs; ++c) {
        if (branch && stage == 0 && c == 0) {
          const Vec3 k = kernel();
          const std::string a = act(conv(prev, pick(1, opt.max_maps), k));
          const std::string b = conv(prev, pick(1, opt.max_maps), k);
          const std::string j = "j" + std::to_string(id++);
          os << j << " concat <- " << a << ", " << b << "\n";
          prev = j;
          continue;
        }
        prev = conv(prev, pick(1, opt.max_maps), kernel());
        if (pick(0, 2) != 0) prev = act(prev);
      }
      if (stage < pools) {
        const std::string name = "p" + std::to_string(id++);
        os << name << " max_filter " << pick(2, opt.max_pool_window) << "x" << pick(2, opt.max_pool_window) << "x"
           << pick(1, opt.max_pool_window_z) << " <- " << prev << "\n";
        prev = name;
      }
    }
    prev = conv(prev, 2, Vec3{pick(1, 2), pick(1, 2), 1});
    os << "out output <- " << prev << "\n";
    const std::string text = os.str();
    const auto spec = densenn::parse_spec(text);
    const Vec3 fov = densenn::field_of_view(spec);
    if (fov.x <= opt.max_fov.x && fov.y <= opt.max_fov.y && fov.z <= opt.max_fov.z) return text;
  }
}

/// Uniform random volume in [-1, 1].
inline densenn::Volume random_volume(std::mt19937_64& rng, const Vec3& dims) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  densenn::Volume v(dims, 0.0f);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = u(rng);
  return v;
}

/// Gives every bias a random value too (init_params zeroes them).
inline void randomize_biases(densenn::ParamState& p, std::mt19937_64& rng, float scale = 0.2f) {
  std::uniform_real_distribution<float> u(-scale, scale);
  for (auto& l : p.layers)
    for (float& b : l.bias) b = u(rng);
}

}  // namespace ref
