#include <doctest.h>

#include <cmath>
#include <random>

#include "densenn/convolution.hpp"

using namespace densenn;

namespace {

Volume line(std::vector<float> v) {
  const std::size_t n = v.size();
  return Volume({n, 1, 1}, std::move(v));
}

Volume random_volume(std::mt19937_64& rng, Vec3 d) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Volume v(d);
  for (auto& x : v.values()) x = u(rng);
  return v;
}

// Nested-loop oracle in double.
std::vector<double> naive_conv(const Volume& in, const Kernel& k, const Sparsity& s) {
  const Vec3 m = valid_dims(in.dims(), k.dims(), s);
  std::vector<double> out;
  for (std::size_t z = 0; z < m.z; ++z)
    for (std::size_t y = 0; y < m.y; ++y)
      for (std::size_t x = 0; x < m.x; ++x) {
        double acc = 0;
        for (std::size_t qz = 0; qz < k.dims().z; ++qz)
          for (std::size_t qy = 0; qy < k.dims().y; ++qy)
            for (std::size_t qx = 0; qx < k.dims().x; ++qx)
              acc += double(k(qx, qy, qz)) * in(x + qx * s.x, y + qy * s.y, z + qz * s.z);
        out.push_back(acc);
      }
  return out;
}

double dot(const Volume& a, const Volume& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
  return s;
}

}  // namespace

TEST_SUITE("convolution") {
  TEST_CASE("1D examples") {
    const Volume in = line({1, 2, 3, 4});
    const Kernel k = line({1, 1});
    CHECK(conv_direct(in, k, {1, 1, 1}).storage() == std::vector<float>{3, 5, 7});
    CHECK(conv_direct(in, k, {2, 1, 1}).storage() == std::vector<float>{4, 6});
  }

  TEST_CASE("identity tap") {
    std::mt19937_64 rng(1);
    const Volume in = random_volume(rng, {7, 5, 3});
    const Kernel one({1, 1, 1}, 1.0f);
    CHECK(conv_direct(in, one, {3, 2, 1}) == in);
    const Volume f = conv_fft(in, one, {3, 2, 1});
    for (std::size_t i = 0; i < in.size(); ++i) CHECK(std::abs(f[i] - in[i]) <= 1e-5f);
  }

  TEST_CASE("footprint larger than input is a shape error") {
    CHECK_THROWS_AS(conv_direct(line({1, 2, 3}), line({1, 1}), {3, 1, 1}), ShapeError);
    CHECK_THROWS_AS(max_filter(line({1, 2}), {2, 1, 1}, {2, 1, 1}), ShapeError);
  }

  TEST_CASE("direct and FFT agree with the nested-loop oracle") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> ext(1, 3), sp(1, 3);
    for (int trial = 0; trial < 30; ++trial) {
      const Vec3 kd{ext(rng), ext(rng), std::min<std::size_t>(ext(rng), 2)};
      const Sparsity s{sp(rng), sp(rng), 1};
      const Vec3 need = sparse_extent(kd, s);
      const Vec3 id{need.x + ext(rng) * 3, need.y + ext(rng) * 3, need.z + ext(rng)};
      const Volume in = random_volume(rng, id);
      const Kernel k = random_volume(rng, kd);
      const auto oracle = naive_conv(in, k, s);
      const Volume d = conv_direct(in, k, s);
      const Volume f = conv_fft(in, k, s);
      double peak = 0;
      for (double v : oracle) peak = std::max(peak, std::abs(v));
      for (std::size_t i = 0; i < oracle.size(); ++i) {
        CHECK(std::abs(d[i] - oracle[i]) <= 1e-5 * std::max(1.0, peak));
        CHECK(std::abs(f[i] - oracle[i]) <= 1e-4 * std::max(1.0, peak));
      }
    }
  }

  TEST_CASE("1D backward example") {
    const auto g = conv_backward(line({1, 2, 3}), line({2}), {1, 1, 1}, line({1, 1, 1}));
    CHECK(g.grad_kernel.storage() == std::vector<float>{6});
    CHECK(g.grad_input.storage() == std::vector<float>{2, 2, 2});
  }

  TEST_CASE("backward is the adjoint of forward") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      const Sparsity s{1 + std::size_t(trial % 3), 2, 1};
      const Kernel k = random_volume(rng, {3, 2, 2});
      const Volume x = random_volume(rng, {12, 9, 4});
      const Volume y = conv_direct(x, k, s);
      const Volume u = random_volume(rng, y.dims());
      const auto g = conv_backward(x, k, s, u);
      const double lhs = dot(y, u);
      CHECK(std::abs(lhs - dot(x, g.grad_input)) <= 1e-4 * std::max(1.0, std::abs(lhs)));
      CHECK(std::abs(lhs - dot(k, g.grad_kernel)) <= 1e-4 * std::max(1.0, std::abs(lhs)));
    }
  }

  TEST_CASE("max filter examples") {
    const Volume in = line({1, 3, 2, 5});
    CHECK(max_filter(in, {2, 1, 1}, {1, 1, 1}).out.storage() == std::vector<float>{3, 3, 5});
    const auto r = max_filter(in, {2, 1, 1}, {2, 1, 1});
    CHECK(r.out.storage() == std::vector<float>{2, 5});
    CHECK(r.argmax == std::vector<std::size_t>{2, 3});
  }

  TEST_CASE("max filter ties go to the lowest index and gradients accumulate") {
    const Volume in = line({4, 4, 1});
    const auto r = max_filter(in, {2, 1, 1}, {1, 1, 1});
    CHECK(r.argmax == std::vector<std::size_t>{0, 1});
    const Volume g = max_filter_backward(r.argmax, line({1, 1}), in.dims());
    CHECK(g.storage() == std::vector<float>{1, 1, 0});

    const auto r2 = max_filter(line({1, 9, 2}), {2, 1, 1}, {1, 1, 1});
    CHECK(max_filter_backward(r2.argmax, line({0.5f, 0.25f}), {3, 1, 1}).storage() ==
          std::vector<float>{0, 0.75f, 0});
  }

  TEST_CASE("layer forward sums single-map convolutions plus bias") {
    std::mt19937_64 rng(11);
    const ConvLayerShape shape{3, 2, {2, 2, 1}, {2, 1, 1}};
    std::vector<Volume> in;
    for (int i = 0; i < 3; ++i) in.push_back(random_volume(rng, {9, 6, 2}));
    const Volume w = random_volume(rng, {shape.weight_count(), 1, 1});
    const std::vector<float> bias{0.5f, -0.25f};
    for (auto method : {ConvMethod::Direct, ConvMethod::Fft}) {
      const auto out = conv_layer_forward(in, w.values(), bias, shape, method);
      REQUIRE(out.size() == 2);
      for (std::size_t o = 0; o < 2; ++o) {
        std::vector<double> expect(out[o].size(), bias[o]);
        for (std::size_t i = 0; i < 3; ++i) {
          Kernel k(shape.kernel);
          std::copy_n(w.data() + (o * 3 + i) * 4, 4, k.data());
          const auto part = naive_conv(in[i], k, shape.sparsity);
          for (std::size_t p = 0; p < part.size(); ++p) expect[p] += part[p];
        }
        for (std::size_t p = 0; p < expect.size(); ++p) CHECK(out[o][p] == doctest::Approx(expect[p]).epsilon(1e-4));
      }
    }
  }

  TEST_CASE("layer backward matches for both methods") {
    std::mt19937_64 rng(5);
    const ConvLayerShape shape{2, 3, {3, 3, 2}, {1, 2, 1}};
    std::vector<Volume> in, g;
    for (int i = 0; i < 2; ++i) in.push_back(random_volume(rng, {10, 11, 4}));
    const Volume w = random_volume(rng, {shape.weight_count(), 1, 1});
    const Vec3 m = valid_dims(in[0].dims(), shape.kernel, shape.sparsity);
    for (int o = 0; o < 3; ++o) g.push_back(random_volume(rng, m));
    const auto a = conv_layer_backward(in, w.values(), g, shape, true, ConvMethod::Direct);
    const auto b = conv_layer_backward(in, w.values(), g, shape, true, ConvMethod::Fft);
    for (std::size_t k = 0; k < a.grad_weights.size(); ++k)
      CHECK(b.grad_weights[k] == doctest::Approx(a.grad_weights[k]).epsilon(1e-4).scale(1.0));
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < a.grad_input[i].size(); ++k)
        CHECK(b.grad_input[i][k] == doctest::Approx(a.grad_input[i][k]).epsilon(1e-4).scale(1.0));
    const auto c = conv_layer_backward(in, w.values(), g, shape, false);
    CHECK(c.grad_input.empty());
    CHECK(c.grad_weights == a.grad_weights);
  }

  TEST_CASE("tuning") {
    const auto off = tune_layer({20, 20, 3}, {3, 3, 2}, {1, 1, 1}, 0);
    CHECK_FALSE(off.timed);
    CHECK(off.choice == ConvMethod::Direct);
    const auto on = tune_layer({20, 20, 3}, {3, 3, 2}, {2, 2, 1}, 2, 2, 2);
    CHECK(on.timed);
    CHECK(on.direct_ms > 0);
    CHECK(on.fft_ms > 0);
    CHECK(on.max_rel_diff <= 1e-4);
  }
}
