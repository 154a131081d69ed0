#include "densenn/convolution.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <mutex>
#include <random>
#include <stdexcept>
#include <tuple>

#include <fftw3.h>

#include "densenn/parallel.hpp"

namespace densenn {

std::string to_string(const Sparsity& s) {
  return std::to_string(s.x) + "," + std::to_string(s.y) + "," + std::to_string(s.z);
}

const char* to_string(ConvMethod m) { return m == ConvMethod::Direct ? "direct" : "fft"; }

Vec3 sparse_extent(const Vec3& shape, const Sparsity& s) {
  return {(shape.x - 1) * s.x + 1, (shape.y - 1) * s.y + 1, (shape.z - 1) * s.z + 1};
}

Vec3 valid_dims(const Vec3& input, const Vec3& shape, const Sparsity& s) {
  if (s.x == 0 || s.y == 0 || s.z == 0) throw ShapeError("sparsity must be positive, got " + to_string(s));
  if (shape.x == 0 || shape.y == 0 || shape.z == 0) throw ShapeError("empty filter shape " + to_string(shape));
  const Vec3 ext = sparse_extent(shape, s);
  if (ext.x > input.x || ext.y > input.y || ext.z > input.z)
    throw ShapeError("input " + to_string(input) + " smaller than sparse footprint " + to_string(ext) +
                     " (filter " + to_string(shape) + ", sparsity " + to_string(s) + ")");
  return {input.x - ext.x + 1, input.y - ext.y + 1, input.z - ext.z + 1};
}

namespace {

// out row (yo, zo) += sum_q taps(q) * in(. + q*s)
void correlate_row(const Volume& in, const float* taps, const Vec3& k, const Sparsity& s, Volume& out,
                   std::size_t yo, std::size_t zo) {
  const std::size_t mx = out.dims().x;
  float* o = &out(0, yo, zo);
  for (std::size_t qz = 0; qz < k.z; ++qz)
    for (std::size_t qy = 0; qy < k.y; ++qy) {
      const float* base = &in(0, yo + qy * s.y, zo + qz * s.z);
      const float* w = taps + (qz * k.y + qy) * k.x;
      for (std::size_t qx = 0; qx < k.x; ++qx) {
        const float wq = w[qx];
        const float* src = base + qx * s.x;
        for (std::size_t x = 0; x < mx; ++x) o[x] += wq * src[x];
      }
    }
}

// grad_in row (yi, zi) += adjoint of correlate_row applied to g.
void transpose_row(const Volume& g, const float* taps, const Vec3& k, const Sparsity& s, Volume& grad_in,
                   std::size_t yi, std::size_t zi) {
  const Vec3& m = g.dims();
  float* gi = &grad_in(0, yi, zi);
  for (std::size_t qz = 0; qz < k.z; ++qz) {
    if (zi < qz * s.z) break;
    const std::size_t zo = zi - qz * s.z;
    if (zo >= m.z) continue;
    for (std::size_t qy = 0; qy < k.y; ++qy) {
      if (yi < qy * s.y) break;
      const std::size_t yo = yi - qy * s.y;
      if (yo >= m.y) continue;
      const float* grow = &g(0, yo, zo);
      const float* w = taps + (qz * k.y + qy) * k.x;
      for (std::size_t qx = 0; qx < k.x; ++qx) {
        const float wq = w[qx];
        float* dst = gi + qx * s.x;
        for (std::size_t x = 0; x < m.x; ++x) dst[x] += wq * grow[x];
      }
    }
  }
}

// acc[q] += sum_p g(p) * in(p + q*s)
void kernel_gradient(const Volume& in, const Volume& g, const Vec3& k, const Sparsity& s, double* acc) {
  const Vec3& m = g.dims();
  for (std::size_t qz = 0; qz < k.z; ++qz)
    for (std::size_t qy = 0; qy < k.y; ++qy)
      for (std::size_t qx = 0; qx < k.x; ++qx) {
        double sum = 0.0;
        for (std::size_t z = 0; z < m.z; ++z)
          for (std::size_t y = 0; y < m.y; ++y) {
            const float* grow = &g(0, y, z);
            const float* src = &in(qx * s.x, y + qy * s.y, z + qz * s.z);
            for (std::size_t x = 0; x < m.x; ++x) sum += double(grow[x]) * double(src[x]);
          }
        acc[(qz * k.y + qy) * k.x + qx] += sum;
      }
}

double sum_of(const Volume& v) {
  double s = 0.0;
  for (float x : v.values()) s += x;
  return s;
}

// ---------------------------------------------------------------------------
// FFT support (FFTW single precision, real-to-complex).

using cfloat = std::complex<float>;

std::size_t good_fft_size(std::size_t n) {
  for (std::size_t m = n;; ++m) {
    std::size_t r = m;
    for (std::size_t p : {2, 3, 5, 7})
      while (r % p == 0) r /= p;
    if (r == 1) return m;
  }
}

Vec3 good_fft_dims(const Vec3& n) { return {good_fft_size(n.x), good_fft_size(n.y), good_fft_size(n.z)}; }

std::size_t spectrum_size(const Vec3& n) { return n.z * n.y * (n.x / 2 + 1); }

class PlanCache {
 public:
  struct Plans {
    fftwf_plan forward;
    fftwf_plan inverse;
  };

  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  Plans get(const Vec3& n) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(n.x, n.y, n.z);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    std::vector<float> real(n.volume());
    std::vector<cfloat> spec(spectrum_size(n));
    const int dims[3] = {int(n.z), int(n.y), int(n.x)};
    auto* c = reinterpret_cast<fftwf_complex*>(spec.data());
    Plans p{fftwf_plan_dft_r2c(3, dims, real.data(), c, FFTW_ESTIMATE | FFTW_UNALIGNED),
            fftwf_plan_dft_c2r(3, dims, c, real.data(), FFTW_ESTIMATE | FFTW_UNALIGNED)};
    if (!p.forward || !p.inverse) throw std::runtime_error("FFTW planning failed for " + to_string(n));
    plans_.emplace(key, p);
    return p;
  }

  ~PlanCache() {
    for (auto& [key, p] : plans_) {
      fftwf_destroy_plan(p.forward);
      fftwf_destroy_plan(p.inverse);
    }
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, Plans> plans_;
};

// Spectrum of `src` zero-padded to n.
std::vector<cfloat> rfft_padded(const Volume& src, const Vec3& n) {
  std::vector<float> real(n.volume(), 0.0f);
  const Vec3& d = src.dims();
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      std::copy_n(&src(0, y, z), d.x, real.data() + (z * n.y + y) * n.x);
  std::vector<cfloat> spec(spectrum_size(n));
  fftwf_execute_dft_r2c(PlanCache::instance().get(n).forward, real.data(),
                        reinterpret_cast<fftwf_complex*>(spec.data()));
  return spec;
}

// Spectrum of the tap-upsampled kernel embedded in an n-sized zero grid.
std::vector<cfloat> kernel_spectrum(const float* taps, const Vec3& k, const Sparsity& s, const Vec3& n) {
  std::vector<float> real(n.volume(), 0.0f);
  for (std::size_t qz = 0; qz < k.z; ++qz)
    for (std::size_t qy = 0; qy < k.y; ++qy)
      for (std::size_t qx = 0; qx < k.x; ++qx)
        real[((qz * s.z) * n.y + qy * s.y) * n.x + qx * s.x] = taps[(qz * k.y + qy) * k.x + qx];
  std::vector<cfloat> spec(spectrum_size(n));
  fftwf_execute_dft_r2c(PlanCache::instance().get(n).forward, real.data(),
                        reinterpret_cast<fftwf_complex*>(spec.data()));
  return spec;
}

// Inverse transform (destroys `spec`), scaled by 1/|n|.
std::vector<float> irfft(std::vector<cfloat>& spec, const Vec3& n) {
  std::vector<float> real(n.volume());
  fftwf_execute_dft_c2r(PlanCache::instance().get(n).inverse, reinterpret_cast<fftwf_complex*>(spec.data()),
                        real.data());
  const float scale = 1.0f / float(n.volume());
  for (float& v : real) v *= scale;
  return real;
}

void copy_out(const std::vector<float>& real, const Vec3& n, Volume& dst) {
  const Vec3& d = dst.dims();
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y) std::copy_n(real.data() + (z * n.y + y) * n.x, d.x, &dst(0, y, z));
}

void check_layer(std::span<const Volume> in, std::span<const float> weights, const ConvLayerShape& shape) {
  if (in.size() != shape.in_maps)
    throw ShapeError("layer expects " + std::to_string(shape.in_maps) + " input maps, got " +
                     std::to_string(in.size()));
  if (weights.size() != shape.weight_count())
    throw ShapeError("layer expects " + std::to_string(shape.weight_count()) + " weights, got " +
                     std::to_string(weights.size()));
  for (const auto& v : in)
    if (v.dims() != in.front().dims()) throw ShapeError("input maps of a layer must share dims");
}

}  // namespace

// ---------------------------------------------------------------------------
// Single-map operations

Volume conv_direct(const Volume& input, const Kernel& k, const Sparsity& s) {
  Volume out(valid_dims(input.dims(), k.dims(), s), 0.0f);
  const Vec3 m = out.dims();
  parallel_for(m.y * m.z, [&](std::size_t row) { correlate_row(input, k.data(), k.dims(), s, out, row % m.y, row / m.y); });
  return out;
}

Volume conv_fft(const Volume& input, const Kernel& k, const Sparsity& s) {
  const float zero_bias = 0.0f;
  ConvLayerShape shape{1, 1, k.dims(), s};
  auto out = conv_layer_forward(std::span<const Volume>(&input, 1), k.values(), std::span<const float>(&zero_bias, 1),
                                shape, ConvMethod::Fft);
  return std::move(out.front());
}

ConvGradients conv_backward(const Volume& input, const Kernel& k, const Sparsity& s, const Volume& grad_out) {
  const Vec3 m = valid_dims(input.dims(), k.dims(), s);
  if (grad_out.dims() != m)
    throw ShapeError("grad_out dims " + to_string(grad_out.dims()) + " do not match valid output " + to_string(m));
  ConvGradients g{Volume(input.dims(), 0.0f), Kernel(k.dims(), 0.0f)};
  const Vec3 n = input.dims();
  parallel_for(n.y * n.z, [&](std::size_t row) {
    transpose_row(grad_out, k.data(), k.dims(), s, g.grad_input, row % n.y, row / n.y);
  });
  std::vector<double> acc(k.size(), 0.0);
  kernel_gradient(input, grad_out, k.dims(), s, acc.data());
  for (std::size_t i = 0; i < acc.size(); ++i) g.grad_kernel[i] = float(acc[i]);
  return g;
}

MaxFilterResult max_filter(const Volume& input, const Vec3& window, const Sparsity& s) {
  const Vec3 m = valid_dims(input.dims(), window, s);
  MaxFilterResult r{Volume(m), std::vector<std::size_t>(m.volume())};
  parallel_for(m.y * m.z, [&](std::size_t row) {
    const std::size_t y = row % m.y, z = row / m.y;
    for (std::size_t x = 0; x < m.x; ++x) {
      std::size_t best = input.index(x, y, z);
      float best_value = input[best];
      // Window offsets visited in increasing linear index; strict > keeps the lowest on ties.
      for (std::size_t qz = 0; qz < window.z; ++qz)
        for (std::size_t qy = 0; qy < window.y; ++qy)
          for (std::size_t qx = 0; qx < window.x; ++qx) {
            const std::size_t idx = input.index(x + qx * s.x, y + qy * s.y, z + qz * s.z);
            if (input[idx] > best_value) {
              best_value = input[idx];
              best = idx;
            }
          }
      const std::size_t o = r.out.index(x, y, z);
      r.out[o] = best_value;
      r.argmax[o] = best;
    }
  });
  return r;
}

Volume max_filter_backward(std::span<const std::size_t> argmax, const Volume& grad_out, const Vec3& input_dims) {
  if (argmax.size() != grad_out.size())
    throw std::logic_error("argmax map has " + std::to_string(argmax.size()) + " entries for " +
                           std::to_string(grad_out.size()) + " gradients");
  Volume g(input_dims, 0.0f);
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    if (argmax[i] >= g.size())
      throw std::logic_error("argmax index " + std::to_string(argmax[i]) + " outside input " + to_string(input_dims));
    g[argmax[i]] += grad_out[i];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Layer operations

std::vector<Volume> conv_layer_forward(std::span<const Volume> in, std::span<const float> weights,
                                       std::span<const float> bias, const ConvLayerShape& shape,
                                       ConvMethod method) {
  check_layer(in, weights, shape);
  if (bias.size() != shape.out_maps) throw ShapeError("bias count does not match out_maps");
  const Vec3 n = in.front().dims();
  const Vec3 m = valid_dims(n, shape.kernel, shape.sparsity);
  const std::size_t taps = shape.taps();
  std::vector<Volume> out(shape.out_maps, Volume(m, 0.0f));

  if (method == ConvMethod::Direct) {
    const std::size_t rows = m.y * m.z;
    parallel_for(shape.out_maps * rows, [&](std::size_t job) {
      const std::size_t o = job / rows, row = job % rows;
      const std::size_t y = row % m.y, z = row / m.y;
      for (std::size_t i = 0; i < shape.in_maps; ++i)
        correlate_row(in[i], weights.data() + (o * shape.in_maps + i) * taps, shape.kernel, shape.sparsity, out[o],
                      y, z);
      float* r = &out[o](0, y, z);
      for (std::size_t x = 0; x < m.x; ++x) r[x] += bias[o];
    });
    return out;
  }

  const Vec3 nf = good_fft_dims(n);
  std::vector<std::vector<cfloat>> spectra(shape.in_maps);
  parallel_for(shape.in_maps, [&](std::size_t i) { spectra[i] = rfft_padded(in[i], nf); });
  parallel_for(shape.out_maps, [&](std::size_t o) {
    std::vector<cfloat> acc(spectrum_size(nf), cfloat{});
    for (std::size_t i = 0; i < shape.in_maps; ++i) {
      auto k = kernel_spectrum(weights.data() + (o * shape.in_maps + i) * taps, shape.kernel, shape.sparsity, nf);
      const auto& x = spectra[i];
      for (std::size_t f = 0; f < acc.size(); ++f) acc[f] += x[f] * std::conj(k[f]);
    }
    copy_out(irfft(acc, nf), nf, out[o]);
    for (float& v : out[o].values()) v += bias[o];
  });
  return out;
}

ConvLayerGradients conv_layer_backward(std::span<const Volume> in, std::span<const float> weights,
                                       std::span<const Volume> grad_out, const ConvLayerShape& shape,
                                       bool need_input_grad, ConvMethod method) {
  check_layer(in, weights, shape);
  const Vec3 n = in.front().dims();
  const Vec3 m = valid_dims(n, shape.kernel, shape.sparsity);
  if (grad_out.size() != shape.out_maps) throw ShapeError("grad_out map count does not match out_maps");
  for (const auto& g : grad_out)
    if (g.dims() != m) throw ShapeError("grad_out dims " + to_string(g.dims()) + " != " + to_string(m));

  const std::size_t taps = shape.taps();
  ConvLayerGradients r;
  r.grad_weights.assign(shape.weight_count(), 0.0f);
  r.grad_bias.assign(shape.out_maps, 0.0f);
  for (std::size_t o = 0; o < shape.out_maps; ++o) r.grad_bias[o] = float(sum_of(grad_out[o]));

  if (method == ConvMethod::Direct) {
    parallel_for(shape.out_maps * shape.in_maps, [&](std::size_t pair) {
      const std::size_t o = pair / shape.in_maps, i = pair % shape.in_maps;
      std::vector<double> acc(taps, 0.0);
      kernel_gradient(in[i], grad_out[o], shape.kernel, shape.sparsity, acc.data());
      float* dst = r.grad_weights.data() + pair * taps;
      for (std::size_t q = 0; q < taps; ++q) dst[q] = float(acc[q]);
    });
    if (need_input_grad) {
      r.grad_input.assign(shape.in_maps, Volume(n, 0.0f));
      const std::size_t rows = n.y * n.z;
      parallel_for(shape.in_maps * rows, [&](std::size_t job) {
        const std::size_t i = job / rows, row = job % rows;
        for (std::size_t o = 0; o < shape.out_maps; ++o)
          transpose_row(grad_out[o], weights.data() + (o * shape.in_maps + i) * taps, shape.kernel, shape.sparsity,
                        r.grad_input[i], row % n.y, row / n.y);
      });
    }
    return r;
  }

  const Vec3 nf = good_fft_dims(n);
  std::vector<std::vector<cfloat>> xs(shape.in_maps), gs(shape.out_maps);
  parallel_for(shape.in_maps, [&](std::size_t i) { xs[i] = rfft_padded(in[i], nf); });
  parallel_for(shape.out_maps, [&](std::size_t o) { gs[o] = rfft_padded(grad_out[o], nf); });

  parallel_for(shape.out_maps * shape.in_maps, [&](std::size_t pair) {
    const std::size_t o = pair / shape.in_maps, i = pair % shape.in_maps;
    std::vector<cfloat> prod(spectrum_size(nf));
    for (std::size_t f = 0; f < prod.size(); ++f) prod[f] = xs[i][f] * std::conj(gs[o][f]);
    const auto real = irfft(prod, nf);
    const Vec3& k = shape.kernel;
    const Sparsity& s = shape.sparsity;
    float* dst = r.grad_weights.data() + pair * taps;
    for (std::size_t qz = 0; qz < k.z; ++qz)
      for (std::size_t qy = 0; qy < k.y; ++qy)
        for (std::size_t qx = 0; qx < k.x; ++qx)
          dst[(qz * k.y + qy) * k.x + qx] = real[((qz * s.z) * nf.y + qy * s.y) * nf.x + qx * s.x];
  });

  if (need_input_grad) {
    r.grad_input.assign(shape.in_maps, Volume(n, 0.0f));
    parallel_for(shape.in_maps, [&](std::size_t i) {
      std::vector<cfloat> acc(spectrum_size(nf), cfloat{});
      for (std::size_t o = 0; o < shape.out_maps; ++o) {
        auto k = kernel_spectrum(weights.data() + (o * shape.in_maps + i) * taps, shape.kernel, shape.sparsity, nf);
        for (std::size_t f = 0; f < acc.size(); ++f) acc[f] += gs[o][f] * k[f];
      }
      copy_out(irfft(acc, nf), nf, r.grad_input[i]);
    });
  }
  return r;
}

// ---------------------------------------------------------------------------

TuneReport tune_layer(const Vec3& input_shape, const Vec3& kernel_shape, const Sparsity& s, int trials,
                      std::size_t in_maps, std::size_t out_maps) {
  TuneReport report;
  if (trials <= 0) return report;
  try {
    ConvLayerShape shape{in_maps, out_maps, kernel_shape, s};
    valid_dims(input_shape, kernel_shape, s);
    std::mt19937 rng(12345);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<Volume> in(in_maps, Volume(input_shape));
    for (auto& v : in)
      for (float& x : v.values()) x = u(rng);
    std::vector<float> w(shape.weight_count()), b(out_maps, 0.0f);
    for (float& x : w) x = u(rng);

    auto time_ms = [&](ConvMethod method, std::vector<Volume>* keep) {
      std::vector<double> samples;
      for (int t = 0; t < trials; ++t) {
        const auto start = std::chrono::steady_clock::now();
        auto out = conv_layer_forward(in, w, b, shape, method);
        const auto stop = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
        if (keep && t == 0) *keep = std::move(out);
      }
      std::sort(samples.begin(), samples.end());
      const std::size_t h = samples.size() / 2;
      return samples.size() % 2 ? samples[h] : 0.5 * (samples[h - 1] + samples[h]);
    };

    std::vector<Volume> direct, fft;
    report.direct_ms = time_ms(ConvMethod::Direct, &direct);
    report.fft_ms = time_ms(ConvMethod::Fft, &fft);
    double max_diff = 0.0, max_ref = 0.0;
    for (std::size_t o = 0; o < out_maps; ++o)
      for (std::size_t i = 0; i < direct[o].size(); ++i) {
        max_diff = std::max(max_diff, double(std::abs(direct[o][i] - fft[o][i])));
        max_ref = std::max(max_ref, double(std::abs(direct[o][i])));
      }
    report.max_rel_diff = max_ref > 0.0 ? max_diff / max_ref : max_diff;
    report.timed = true;
    report.choice = report.fft_ms < report.direct_ms ? ConvMethod::Fft : ConvMethod::Direct;
  } catch (const std::exception&) {
    report = TuneReport{};
  }
  return report;
}

}  // namespace densenn
