#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "densenn/convolution.hpp"
#include "densenn/tensor.hpp"

namespace densenn {

enum class NodeKind { Input, Conv, MaxFilter, Activation, Concat, Output };
enum class ActivationFn { Relu, Tanh };

const char* to_string(NodeKind k);
const char* to_string(ActivationFn f);

struct NodeSpec {
  std::string name;
  NodeKind kind = NodeKind::Input;
  Vec3 filter{1, 1, 1};       // conv filter or max-filter window
  std::size_t out_maps = 0;   // conv only
  ActivationFn activation = ActivationFn::Relu;
  std::vector<std::string> inputs;
  int line = 0;               // source line, 0 when built in code
};

/// A validated DAG of nodes, stored in topological order.
struct NetworkSpec {
  std::vector<NodeSpec> nodes;
  std::string source;  // text the spec was parsed from, if any

  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;  // throws SpecError
  std::vector<std::size_t> inputs() const;
  std::size_t output() const;
};

/// Parses the line-oriented network format:
///
///     # comment
///     name kind args... <- upstream[,upstream]
///
/// kinds: `input`, `conv KXxKYxKZ MAPS`, `max_filter WXxWYxWZ`,
/// `activation relu|tanh`, `concat`, `output` (2-class softmax).
NetworkSpec parse_spec(std::string_view text);
NetworkSpec load_spec(const std::string& path);

/// Checks structure (names, arity, references, acyclicity, single output,
/// reachability, map counts) and returns the nodes topologically sorted.
NetworkSpec validate(NetworkSpec spec);

struct SparsityPlan {
  std::vector<Sparsity> taps;    // tap spacing used by each node's filter
  std::vector<Sparsity> output;  // cumulative sparsity of each node's output grid
};

SparsityPlan infer_plan(const NetworkSpec& spec);
Vec3 field_of_view(const NetworkSpec& spec);
std::size_t param_count(const NetworkSpec& spec);

/// Feature-map count produced by every node.
std::vector<std::size_t> map_counts(const NetworkSpec& spec);

/// Dims of every node's maps for the given (common) input dims.
std::vector<Vec3> node_dims(const NetworkSpec& spec, const Vec3& input_dims);

struct LayerParams {
  std::vector<float> weights;  // [out][in][taps]
  std::vector<float> bias;
  std::vector<float> weight_velocity;
  std::vector<float> bias_velocity;
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Indexed by node; non-conv nodes hold empty LayerParams.
struct ParamState {
  std::vector<LayerParams> layers;
  friend bool operator==(const ParamState&, const ParamState&) = default;
};

ParamState init_params(const NetworkSpec& spec, std::uint64_t seed);
ConvLayerShape layer_shape(const NetworkSpec& spec, const SparsityPlan& plan, std::size_t node);

/// Spec plus everything derived from it that forward/backward need.
struct Network {
  NetworkSpec spec;
  SparsityPlan plan;
  Vec3 fov;
  std::vector<std::size_t> maps;
  std::vector<ConvMethod> methods;  // per node; Direct unless tuned

  static Network compile(NetworkSpec spec);
  std::string input_name() const;  // first declared input
};

using InputMap = std::map<std::string, Volume>;

struct Activations {
  std::vector<std::vector<Volume>> maps;                         // per node
  std::vector<std::vector<std::vector<std::size_t>>> argmax;     // max-filter nodes only
  bool complete = false;                                         // every map retained
  std::size_t output_node = 0;

  /// Class-1 (boundary) probability map.
  const Volume& boundary() const;
  const std::vector<Volume>& node(const Network& net, std::string_view name) const;
};

Activations forward(const Network& net, const ParamState& params, const InputMap& inputs, bool keep_maps = true);

struct Gradients {
  std::vector<std::vector<float>> weights;  // per node
  std::vector<std::vector<float>> bias;
};

/// Gradient of the weighted cross-entropy with respect to every parameter.
/// Requires a keep_maps forward pass.
Gradients backward(const Network& net, const ParamState& params, const Activations& acts, const Volume& labels,
                   const Volume& weights);

}  // namespace densenn
