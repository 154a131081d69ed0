#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "densenn/tensor.hpp"

namespace densenn {

/// Per-axis spacing between filter taps. (1,1,1) is ordinary dense filtering.
struct Sparsity {
  std::size_t x = 1;
  std::size_t y = 1;
  std::size_t z = 1;

  constexpr std::size_t operator[](int axis) const noexcept { return axis == 0 ? x : axis == 1 ? y : z; }
  constexpr Vec3 vec() const noexcept { return {x, y, z}; }
  friend constexpr bool operator==(const Sparsity&, const Sparsity&) = default;
};

std::string to_string(const Sparsity& s);

/// Filter taps; the grid dims are the kernel shape.
using Kernel = Volume;

/// Extent covered by a kernel of `shape` with taps spaced by `s`: (k-1)*s+1.
Vec3 sparse_extent(const Vec3& shape, const Sparsity& s);

/// Valid-only output dims n - (k-1)*s. Throws ShapeError when the sparse
/// footprint does not fit.
Vec3 valid_dims(const Vec3& input, const Vec3& shape, const Sparsity& s);

enum class ConvMethod { Direct, Fft };

const char* to_string(ConvMethod m);

// Single-map operations. Cross-correlation convention:
//   out(p) = sum_q k(q) * in(p + q*s)

Volume conv_direct(const Volume& input, const Kernel& k, const Sparsity& s);
Volume conv_fft(const Volume& input, const Kernel& k, const Sparsity& s);

struct ConvGradients {
  Volume grad_input;
  Kernel grad_kernel;
};

/// Adjoints of conv_direct with respect to its input and its taps.
ConvGradients conv_backward(const Volume& input, const Kernel& k, const Sparsity& s, const Volume& grad_out);

struct MaxFilterResult {
  Volume out;
  /// Linear input index of the winning voxel per output voxel (lowest index on ties).
  std::vector<std::size_t> argmax;
};

MaxFilterResult max_filter(const Volume& input, const Vec3& window, const Sparsity& s);

/// Routes grad_out back to the recorded argmax positions, summing collisions.
Volume max_filter_backward(std::span<const std::size_t> argmax, const Volume& grad_out, const Vec3& input_dims);

// Multi-map layer operations used by the network graph. Weights are laid out
// [out_map][in_map][taps] with taps in Volume order.

struct ConvLayerShape {
  std::size_t in_maps = 1;
  std::size_t out_maps = 1;
  Vec3 kernel{1, 1, 1};
  Sparsity sparsity{};

  std::size_t taps() const noexcept { return kernel.volume(); }
  std::size_t weight_count() const noexcept { return in_maps * out_maps * taps(); }
};

/// out[o] = bias[o] + sum_i conv(in[i], w[o][i]).
std::vector<Volume> conv_layer_forward(std::span<const Volume> in, std::span<const float> weights,
                                       std::span<const float> bias, const ConvLayerShape& shape,
                                       ConvMethod method = ConvMethod::Direct);

struct ConvLayerGradients {
  std::vector<Volume> grad_input;  // empty when not requested
  std::vector<float> grad_weights;
  std::vector<float> grad_bias;
};

ConvLayerGradients conv_layer_backward(std::span<const Volume> in, std::span<const float> weights,
                                       std::span<const Volume> grad_out, const ConvLayerShape& shape,
                                       bool need_input_grad, ConvMethod method = ConvMethod::Direct);

struct TuneReport {
  ConvMethod choice = ConvMethod::Direct;
  bool timed = false;
  double direct_ms = 0.0;  // median
  double fft_ms = 0.0;     // median
  /// max|fft - direct| / max|direct| on the probe data.
  double max_rel_diff = 0.0;
};

/// Times direct and FFT forward passes of one layer on synthetic data and
/// picks the faster by median. trials == 0 returns Direct without timing.
TuneReport tune_layer(const Vec3& input_shape, const Vec3& kernel_shape, const Sparsity& s, int trials,
                      std::size_t in_maps = 1, std::size_t out_maps = 1);

}  // namespace densenn
