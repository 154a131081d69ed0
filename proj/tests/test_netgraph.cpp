#include <doctest.h>

#include <cmath>
#include <random>

#include "densenn/netgraph.hpp"
#include "densenn/training.hpp"
#include "reference_net.hpp"

using namespace densenn;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_spec(text);
  } catch (const SpecError& e) {
    return e.what();
  }
  return "";
}

const char* kMinimal = "in input\nc conv 1x1x1 2 <- in\nout output <- c\n";

}  // namespace

TEST_SUITE("netgraph") {
  TEST_CASE("minimal spec parses") {
    const auto spec = parse_spec(kMinimal);
    REQUIRE(spec.nodes.size() == 3);
    CHECK(spec.nodes[1].kind == NodeKind::Conv);
    CHECK(spec.nodes[1].out_maps == 2);
    CHECK(field_of_view(spec) == Vec3{1, 1, 1});
    CHECK(param_count(spec) == 4);
  }

  TEST_CASE("nodes are sorted topologically regardless of file order") {
    const auto spec = parse_spec("out output <- c\nc conv 1x1x1 2 <- in\nin input\n");
    CHECK(spec.nodes.front().name == "in");
    CHECK(spec.nodes.back().name == "out");
  }

  TEST_CASE("structural errors name the problem") {
    CHECK(error_of("in input\na conv 1x1x1 2 <- b\nb conv 1x1x1 2 <- a\nout output <- a\n").find("cycle") !=
          std::string::npos);
    const auto cyc = error_of("in input\nj concat <- in, b\na conv 1x1x1 2 <- j\nb conv 1x1x1 2 <- a\nout output <- b\n");
    CHECK(cyc.find("cycle") != std::string::npos);
    CHECK(cyc.find("a") != std::string::npos);
    CHECK(cyc.find("b") != std::string::npos);
    CHECK(error_of("in input\nin conv 1x1x1 2 <- in\nout output <- in\n").find("in") != std::string::npos);
    CHECK(error_of("in input\nc conv 1x1x1 2 <- nowhere\nout output <- c\n").find("nowhere") != std::string::npos);
    CHECK(!error_of("in input\nc conv 1x1x1 2 <- in\no1 output <- c\no2 output <- c\n").empty());
    CHECK(error_of("in input\nc conv 1x1x1 3 <- in\nout output <- c\n").find("2") != std::string::npos);
    CHECK(error_of("in input\nc conv 3x3 2 <- in\nout output <- c\n").find("line 2") != std::string::npos);
    CHECK(error_of("in input\nc sigmoid <- in\nout output <- c\n").find("line 2") != std::string::npos);
    CHECK_FALSE(error_of("a input\nb input\nc conv 1x1x1 2 <- a\nout output <- c\n").empty());
  }

  TEST_CASE("concat of different sparsities is rejected") {
    const char* text =
        "in input\n"
        "a conv 1x1x1 1 <- in\n"
        "p max_filter 2x1x1 <- a\n"
        "j concat <- a, p\n"
        "c conv 1x1x1 2 <- j\n"
        "out output <- c\n";
    CHECK(error_of(text).find("sparsity") != std::string::npos);
  }

  TEST_CASE("sparsity propagation") {
    const auto spec = parse_spec(
        "in input\na conv 3x3x1 2 <- in\np max_filter 2x2x1 <- a\nb conv 3x3x1 2 <- p\n"
        "q max_filter 3x2x1 <- b\nc conv 1x1x1 2 <- q\nout output <- c\n");
    const auto plan = infer_plan(spec);
    CHECK(plan.taps[spec.index_of("b")] == Sparsity{2, 2, 1});
    CHECK(plan.taps[spec.index_of("q")] == Sparsity{2, 2, 1});
    CHECK(plan.output[spec.index_of("q")] == Sparsity{6, 4, 1});
    CHECK(plan.taps[spec.index_of("c")] == Sparsity{6, 4, 1});
  }

  TEST_CASE("field of view of conv3, max2, conv3 along x is 8") {
    const auto spec = parse_spec(
        "in input\na conv 3x1x1 1 <- in\np max_filter 2x1x1 <- a\nb conv 3x1x1 2 <- p\nout output <- b\n");
    CHECK(field_of_view(spec) == Vec3{8, 1, 1});
  }

  TEST_CASE("parameter count formula") {
    const auto spec = parse_spec(
        "in input\na conv 3x3x2 4 <- in\nr activation relu <- a\nb conv 2x2x1 2 <- r\nout output <- b\n");
    CHECK(param_count(spec) == 4 * (1 * 18 + 1) + 2 * (4 * 4 + 1));
  }

  TEST_CASE("init_params is deterministic and bounded") {
    const auto spec = parse_spec("in input\na conv 3x3x2 4 <- in\nb conv 2x2x1 2 <- a\nout output <- b\n");
    const auto p = init_params(spec, 42);
    CHECK(p == init_params(spec, 42));
    CHECK_FALSE(p == init_params(spec, 43));
    const auto& a = p.layers[spec.index_of("a")];
    const float bound = std::sqrt(3.0f / 18.0f);
    for (float w : a.weights) CHECK(std::abs(w) <= bound);
    for (float b : a.bias) CHECK(b == 0.0f);
    CHECK(a.weight_velocity == std::vector<float>(a.weights.size(), 0.0f));
  }

  TEST_CASE("identity net reproduces its input") {
    // The class-1 logit channel carries the input unchanged.
    const auto spec = parse_spec(kMinimal);
    const Network net = Network::compile(spec);
    auto p = init_params(spec, 0);
    p.layers[1].weights = {0.0f, 1.0f};
    std::mt19937_64 rng(4);
    const Volume x = ref::random_volume(rng, {5, 4, 3});
    const auto acts = forward(net, p, {{"in", x}});
    CHECK(acts.node(net, "c")[1] == x);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(acts.boundary()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-double(x[i])))).epsilon(1e-6));
  }

  TEST_CASE("forward output dims equal input dims minus fov plus one") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 10; ++trial) {
      const auto spec = parse_spec(ref::random_spec(rng, {}));
      const Network net = Network::compile(spec);
      const Vec3 in = net.fov + Vec3{3, 2, 1};
      const auto acts = forward(net, init_params(spec, 1), {{"in", ref::random_volume(rng, in)}});
      CHECK(acts.boundary().dims() == Vec3{4, 3, 2});
    }
  }

  TEST_CASE("keep_maps off gives the same output") {
    std::mt19937_64 rng(2);
    const auto spec = parse_spec(ref::random_spec(rng, {}));
    const Network net = Network::compile(spec);
    const InputMap in{{"in", ref::random_volume(rng, net.fov + Vec3{5, 5, 1})}};
    const auto p = init_params(spec, 3);
    CHECK(forward(net, p, in, true).boundary() == forward(net, p, in, false).boundary());
  }

  TEST_CASE("input smaller than the field of view is rejected") {
    const auto spec = parse_spec("in input\nc conv 3x3x1 2 <- in\nout output <- c\n");
    const Network net = Network::compile(spec);
    CHECK_THROWS_AS(forward(net, init_params(spec, 0), {{"in", Volume({2, 5, 1})}}), ShapeError);
    CHECK_THROWS_AS(forward(net, init_params(spec, 0), {{"image", Volume({5, 5, 1})}}), ShapeError);
  }

  TEST_CASE("dense output equals the strided network on every window") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 5; ++trial) {
      const auto spec = parse_spec(ref::random_spec(rng, {}));
      const Network net = Network::compile(spec);
      auto params = init_params(spec, trial);
      ref::randomize_biases(params, rng);
      const InputMap in{{"in", ref::random_volume(rng, net.fov + Vec3{4, 3, 1})}};
      const auto dense = forward(net, params, in).boundary();
      const auto oracle = ref::dense_output(spec, ref::convert<float>(params), in);
      CHECK(dense.storage() == oracle);
    }
  }

  TEST_CASE("analytic gradients match finite differences") {
    std::mt19937_64 rng(31);
    ref::RandomSpecOptions opt;
    opt.max_fov = {12, 12, 3};
    opt.max_maps = 2;
    for (int trial = 0; trial < 3; ++trial) {
      const auto spec = parse_spec(ref::random_spec(rng, opt));
      const Network net = Network::compile(spec);
      auto params = init_params(spec, trial);
      ref::randomize_biases(params, rng);
      const InputMap in{{"in", ref::random_volume(rng, net.fov + Vec3{2, 2, 0})}};
      const auto acts = forward(net, params, in);
      Volume labels(acts.boundary().dims());
      for (auto& y : labels.values()) y = float(rng() % 2);
      const Volume weights = class_weights(labels);
      const Gradients g = backward(net, params, acts, labels, weights);
      auto dp = ref::convert<double>(params);
      for (std::size_t i = 0; i < spec.nodes.size(); ++i)
        for (std::size_t k = 0; k < dp.w[i].size(); ++k) {
          const double eps = 1e-3, saved = dp.w[i][k];
          ref::Signature s_plus, s_minus;
          dp.w[i][k] = saved + eps;
          const double lp = ref::dense_loss(spec, dp, in, labels, weights, &s_plus);
          dp.w[i][k] = saved - eps;
          const double lm = ref::dense_loss(spec, dp, in, labels, weights, &s_minus);
          dp.w[i][k] = saved;
          if (!(s_plus == s_minus)) continue;
          const double fd = (lp - lm) / (2 * eps), an = g.weights[i][k];
          if (std::max(std::abs(fd), std::abs(an)) > 1e-4)
            CHECK(std::abs(fd - an) <= 1e-2 * std::max(std::abs(fd), std::abs(an)));
        }
    }
  }
}
