#include "densenn/netgraph.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>

namespace densenn {

const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Input: return "input";
    case NodeKind::Conv: return "conv";
    case NodeKind::MaxFilter: return "max_filter";
    case NodeKind::Activation: return "activation";
    case NodeKind::Concat: return "concat";
    case NodeKind::Output: return "output";
  }
  return "?";
}

const char* to_string(ActivationFn f) { return f == ActivationFn::Relu ? "relu" : "tanh"; }

std::optional<std::size_t> NetworkSpec::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].name == name) return i;
  return std::nullopt;
}

std::size_t NetworkSpec::index_of(std::string_view name) const {
  if (auto i = find(name)) return *i;
  throw SpecError("no node named '" + std::string(name) + "'");
}

std::vector<std::size_t> NetworkSpec::inputs() const {
  std::vector<std::size_t> r;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].kind == NodeKind::Input) r.push_back(i);
  return r;
}

std::size_t NetworkSpec::output() const {
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].kind == NodeKind::Output) return i;
  throw SpecError("network has no output node");
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

bool is_identifier(const std::string& s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

std::size_t parse_positive(const std::string& tok, int line, const char* what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(tok, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != tok.size() || v == 0 || tok.front() == '-')
    throw SpecError(std::string("expected positive integer for ") + what + ", got '" + tok + "'", line);
  return static_cast<std::size_t>(v);
}

Vec3 parse_extent(const std::string& tok, int line) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : tok) {
    if (c == 'x' || c == 'X' || c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  if (parts.size() != 3) throw SpecError("expected extent like 3x3x1, got '" + tok + "'", line);
  return {parse_positive(parts[0], line, "extent"), parse_positive(parts[1], line, "extent"),
          parse_positive(parts[2], line, "extent")};
}

NodeKind parse_kind(const std::string& tok, int line) {
  if (tok == "input") return NodeKind::Input;
  if (tok == "conv") return NodeKind::Conv;
  if (tok == "max_filter") return NodeKind::MaxFilter;
  if (tok == "activation") return NodeKind::Activation;
  if (tok == "concat") return NodeKind::Concat;
  if (tok == "output") return NodeKind::Output;
  throw SpecError("unknown node kind '" + tok + "'", line);
}

void expect_args(const std::vector<std::string>& tokens, std::size_t n, int line) {
  if (tokens.size() != n + 2)
    throw SpecError("node '" + tokens[0] + "' of kind " + tokens[1] + " takes " + std::to_string(n) +
                        " argument(s), got " + std::to_string(tokens.size() - 2),
                    line);
}

}  // namespace

NetworkSpec parse_spec(std::string_view text) {
  NetworkSpec spec;
  spec.source = std::string(text);
  std::istringstream in{std::string(text)};
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::string body = trim(raw);
    if (body.empty()) continue;

    std::string lhs = body, rhs;
    bool has_arrow = false;
    if (auto arrow = body.find("<-"); arrow != std::string::npos) {
      lhs = trim(body.substr(0, arrow));
      rhs = trim(body.substr(arrow + 2));
      has_arrow = true;
    }
    std::vector<std::string> tokens;
    {
      std::istringstream ts(lhs);
      for (std::string t; ts >> t;) tokens.push_back(t);
    }
    if (tokens.size() < 2) throw SpecError("expected 'name kind args... <- upstream'", line);

    NodeSpec node;
    node.name = tokens[0];
    node.line = line;
    if (!is_identifier(node.name)) throw SpecError("invalid node name '" + node.name + "'", line);
    node.kind = parse_kind(tokens[1], line);

    switch (node.kind) {
      case NodeKind::Input:
      case NodeKind::Concat:
      case NodeKind::Output:
        expect_args(tokens, 0, line);
        break;
      case NodeKind::Conv:
        expect_args(tokens, 2, line);
        node.filter = parse_extent(tokens[2], line);
        node.out_maps = parse_positive(tokens[3], line, "feature-map count");
        break;
      case NodeKind::MaxFilter:
        expect_args(tokens, 1, line);
        node.filter = parse_extent(tokens[2], line);
        break;
      case NodeKind::Activation:
        expect_args(tokens, 1, line);
        if (tokens[2] == "relu")
          node.activation = ActivationFn::Relu;
        else if (tokens[2] == "tanh")
          node.activation = ActivationFn::Tanh;
        else
          throw SpecError("unknown activation '" + tokens[2] + "' (expected relu or tanh)", line);
        break;
    }

    if (has_arrow) {
      std::string cur;
      std::istringstream us(rhs);
      while (std::getline(us, cur, ',')) {
        cur = trim(cur);
        if (!is_identifier(cur)) throw SpecError("invalid upstream reference '" + cur + "'", line);
        node.inputs.push_back(cur);
      }
      if (node.inputs.empty()) throw SpecError("empty upstream list", line);
    }
    spec.nodes.push_back(std::move(node));
  }
  return validate(std::move(spec));
}

NetworkSpec load_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open network spec '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_spec(ss.str());
}

NetworkSpec validate(NetworkSpec spec) {
  const std::size_t n = spec.nodes.size();
  if (n == 0) throw SpecError("network has no nodes");

  std::map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = spec.nodes[i];
    if (!by_name.emplace(node.name, i).second) throw SpecError("duplicate node name '" + node.name + "'", node.line);
  }

  std::size_t outputs = 0, inputs = 0;
  for (const auto& node : spec.nodes) {
    const std::size_t arity = node.inputs.size();
    const char* kind = to_string(node.kind);
    switch (node.kind) {
      case NodeKind::Input:
        ++inputs;
        if (arity != 0) throw SpecError("input node '" + node.name + "' cannot have upstream nodes", node.line);
        break;
      case NodeKind::Concat:
        if (arity < 2) throw SpecError("concat node '" + node.name + "' needs at least 2 upstream nodes", node.line);
        break;
      case NodeKind::Output:
        ++outputs;
        [[fallthrough]];
      default:
        if (arity != 1)
          throw SpecError(std::string(kind) + " node '" + node.name + "' needs exactly 1 upstream node", node.line);
    }
    if (node.kind == NodeKind::Conv && node.out_maps == 0)
      throw SpecError("conv node '" + node.name + "' needs a positive map count", node.line);
    for (const auto& up : node.inputs) {
      if (!by_name.count(up)) throw SpecError("node '" + node.name + "' references unknown node '" + up + "'", node.line);
      if (up == node.name) throw SpecError("cycle: " + node.name + " -> " + node.name, node.line);
    }
  }
  if (inputs == 0) throw SpecError("network has no input node");
  if (outputs != 1) throw SpecError("network needs exactly one output node, found " + std::to_string(outputs));

  // Stable Kahn sort.
  std::vector<std::vector<std::size_t>> consumers(n);
  std::vector<std::size_t> pending(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (const auto& up : spec.nodes[i].inputs) {
      consumers[by_name[up]].push_back(i);
      ++pending[i];
    }
  std::vector<std::size_t> order;
  std::vector<bool> done(n, false);
  while (order.size() < n) {
    bool progressed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (done[i] || pending[i] != 0) continue;
      done[i] = true;
      order.push_back(i);
      for (auto c : consumers[i]) --pending[c];
      progressed = true;
      break;
    }
    if (!progressed) {
      // Walk upstream from any blocked node until a node repeats.
      std::size_t cur = 0;
      while (done[cur]) ++cur;
      std::vector<std::size_t> path;
      std::vector<int> seen_at(n, -1);
      while (seen_at[cur] < 0) {
        seen_at[cur] = int(path.size());
        path.push_back(cur);
        for (const auto& up : spec.nodes[cur].inputs) {
          const std::size_t u = by_name[up];
          if (!done[u]) {
            cur = u;
            break;
          }
        }
      }
      std::string names;
      for (std::size_t k = std::size_t(seen_at[cur]); k < path.size(); ++k) names = spec.nodes[path[k]].name + (names.empty() ? "" : " -> ") + names;
      names += " -> " + spec.nodes[cur].name;
      throw SpecError("cycle: " + names, spec.nodes[cur].line);
    }
  }

  std::vector<NodeSpec> sorted;
  sorted.reserve(n);
  for (auto i : order) sorted.push_back(std::move(spec.nodes[i]));
  spec.nodes = std::move(sorted);

  // Output must be a sink reachable from every input.
  const std::size_t out = spec.output();
  for (const auto& node : spec.nodes)
    for (const auto& up : node.inputs)
      if (up == spec.nodes[out].name) throw SpecError("output node '" + up + "' cannot feed other nodes", node.line);
  std::vector<bool> reaches(spec.nodes.size(), false);
  reaches[out] = true;
  for (std::size_t i = spec.nodes.size(); i-- > 0;)
    if (reaches[i])
      for (const auto& up : spec.nodes[i].inputs) reaches[*spec.find(up)] = true;
  for (auto i : spec.inputs())
    if (!reaches[i]) throw SpecError("output is not reachable from input '" + spec.nodes[i].name + "'", spec.nodes[i].line);

  const auto maps = map_counts(spec);
  const auto& up = spec.nodes[out].inputs.front();
  if (maps[*spec.find(up)] != 2)
    throw SpecError("output node needs 2 upstream feature maps (2-class softmax), got " +
                        std::to_string(maps[*spec.find(up)]),
                    spec.nodes[out].line);
  field_of_view(spec);  // rejects concats that disagree in sparsity or field of view
  return spec;
}

std::vector<std::size_t> map_counts(const NetworkSpec& spec) {
  std::vector<std::size_t> maps(spec.nodes.size(), 0);
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& node = spec.nodes[i];
    switch (node.kind) {
      case NodeKind::Input: maps[i] = 1; break;
      case NodeKind::Conv: maps[i] = node.out_maps; break;
      case NodeKind::Output: maps[i] = 2; break;
      case NodeKind::Concat:
        for (const auto& up : node.inputs) maps[i] += maps[spec.index_of(up)];
        break;
      default: maps[i] = maps[spec.index_of(node.inputs.front())];
    }
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Geometry

SparsityPlan infer_plan(const NetworkSpec& spec) {
  const std::size_t n = spec.nodes.size();
  SparsityPlan plan{std::vector<Sparsity>(n), std::vector<Sparsity>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = spec.nodes[i];
    if (node.kind == NodeKind::Input) continue;
    const Sparsity up = plan.output[spec.index_of(node.inputs.front())];
    if (node.kind == NodeKind::Concat)
      for (const auto& name : node.inputs)
        if (plan.output[spec.index_of(name)] != up)
          throw SpecError("concat '" + node.name + "' joins inputs of different sparsity (" + to_string(up) + " vs " +
                              to_string(plan.output[spec.index_of(name)]) + ")",
                          node.line);
    plan.taps[i] = up;
    plan.output[i] = up;
    if (node.kind == NodeKind::MaxFilter)
      plan.output[i] = Sparsity{up.x * node.filter.x, up.y * node.filter.y, up.z * node.filter.z};
  }
  return plan;
}

Vec3 field_of_view(const NetworkSpec& spec) {
  const auto plan = infer_plan(spec);
  // Per-path accumulation; every path into a concat must agree.
  std::vector<Vec3> fov(spec.nodes.size(), Vec3{1, 1, 1});
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& node = spec.nodes[i];
    if (node.kind == NodeKind::Input) continue;
    Vec3 f = fov[spec.index_of(node.inputs.front())];
    for (const auto& up : node.inputs)
      if (fov[spec.index_of(up)] != f)
        throw SpecError("concat '" + node.name + "' joins paths with different fields of view (" + to_string(f) +
                            " vs " + to_string(fov[spec.index_of(up)]) + ")",
                        node.line);
    if (node.kind == NodeKind::Conv || node.kind == NodeKind::MaxFilter) {
      const Sparsity& s = plan.taps[i];
      f = f + Vec3{(node.filter.x - 1) * s.x, (node.filter.y - 1) * s.y, (node.filter.z - 1) * s.z};
    }
    fov[i] = f;
  }
  return fov[spec.output()];
}

std::size_t param_count(const NetworkSpec& spec) {
  const auto maps = map_counts(spec);
  std::size_t total = 0;
  for (const auto& node : spec.nodes)
    if (node.kind == NodeKind::Conv)
      total += node.out_maps * (maps[spec.index_of(node.inputs.front())] * node.filter.volume() + 1);
  return total;
}

std::vector<Vec3> node_dims(const NetworkSpec& spec, const Vec3& input_dims) {
  const auto plan = infer_plan(spec);
  std::vector<Vec3> dims(spec.nodes.size(), input_dims);
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& node = spec.nodes[i];
    if (node.kind == NodeKind::Input) continue;
    const Vec3 up = dims[spec.index_of(node.inputs.front())];
    for (const auto& name : node.inputs)
      if (dims[spec.index_of(name)] != up)
        throw ShapeError("concat '" + node.name + "' joins maps of different dims");
    dims[i] = (node.kind == NodeKind::Conv || node.kind == NodeKind::MaxFilter) ? valid_dims(up, node.filter, plan.taps[i])
                                                                                : up;
  }
  return dims;
}

// ---------------------------------------------------------------------------
// Parameters

ConvLayerShape layer_shape(const NetworkSpec& spec, const SparsityPlan& plan, std::size_t node) {
  const auto& n = spec.nodes[node];
  const auto maps = map_counts(spec);
  return ConvLayerShape{maps[spec.index_of(n.inputs.front())], n.out_maps, n.filter, plan.taps[node]};
}

ParamState init_params(const NetworkSpec& spec, std::uint64_t seed) {
  const auto maps = map_counts(spec);
  std::mt19937_64 rng(seed);
  ParamState state;
  state.layers.resize(spec.nodes.size());
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& node = spec.nodes[i];
    if (node.kind != NodeKind::Conv) continue;
    const std::size_t in_maps = maps[spec.index_of(node.inputs.front())];
    const std::size_t fan_in = in_maps * node.filter.volume();
    const float bound = std::sqrt(3.0f / float(fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    auto& layer = state.layers[i];
    layer.weights.resize(node.out_maps * fan_in);
    for (float& w : layer.weights) w = dist(rng);
    layer.bias.assign(node.out_maps, 0.0f);
    layer.weight_velocity.assign(layer.weights.size(), 0.0f);
    layer.bias_velocity.assign(node.out_maps, 0.0f);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Evaluation

Network Network::compile(NetworkSpec spec) {
  Network net;
  net.plan = infer_plan(spec);
  net.fov = field_of_view(spec);
  net.maps = map_counts(spec);
  net.methods.assign(spec.nodes.size(), ConvMethod::Direct);
  net.spec = std::move(spec);
  return net;
}

std::string Network::input_name() const { return spec.nodes[spec.inputs().front()].name; }

const Volume& Activations::boundary() const {
  if (output_node >= maps.size() || maps[output_node].size() != 2)
    throw std::logic_error("activations hold no output maps");
  return maps[output_node][1];
}

const std::vector<Volume>& Activations::node(const Network& net, std::string_view name) const {
  const std::size_t i = net.spec.index_of(name);
  if (maps[i].empty()) throw std::logic_error("feature maps of '" + std::string(name) + "' were not retained");
  return maps[i];
}

namespace {

void check_params(const Network& net, const ParamState& params) {
  if (params.layers.size() != net.spec.nodes.size()) throw ShapeError("parameter state does not match network");
  for (std::size_t i = 0; i < net.spec.nodes.size(); ++i) {
    if (net.spec.nodes[i].kind != NodeKind::Conv) continue;
    const auto shape = ConvLayerShape{net.maps[net.spec.index_of(net.spec.nodes[i].inputs.front())],
                                      net.spec.nodes[i].out_maps, net.spec.nodes[i].filter, net.plan.taps[i]};
    if (params.layers[i].weights.size() != shape.weight_count() || params.layers[i].bias.size() != shape.out_maps)
      throw ShapeError("parameters of '" + net.spec.nodes[i].name + "' do not match its layer shape");
  }
}

ConvLayerShape shape_of(const Network& net, std::size_t i) {
  const auto& node = net.spec.nodes[i];
  return ConvLayerShape{net.maps[net.spec.index_of(node.inputs.front())], node.out_maps, node.filter, net.plan.taps[i]};
}

void accumulate(std::vector<Volume>& dst, std::vector<Volume>&& src) {
  if (dst.empty()) {
    dst = std::move(src);
    return;
  }
  for (std::size_t m = 0; m < dst.size(); ++m) {
    auto d = dst[m].values();
    auto s = src[m].values();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
  }
}

}  // namespace

Activations forward(const Network& net, const ParamState& params, const InputMap& inputs, bool keep_maps) {
  const auto& spec = net.spec;
  const std::size_t n = spec.nodes.size();
  check_params(net, params);

  std::optional<Vec3> in_dims;
  for (auto i : spec.inputs()) {
    auto it = inputs.find(spec.nodes[i].name);
    if (it == inputs.end()) throw ShapeError("missing input '" + spec.nodes[i].name + "'");
    if (in_dims && it->second.dims() != *in_dims) throw ShapeError("all network inputs must share dims");
    in_dims = it->second.dims();
  }
  for (int a = 0; a < 3; ++a)
    if ((*in_dims)[a] < net.fov[a])
      throw ShapeError("input " + to_string(*in_dims) + " smaller than field of view " + to_string(net.fov));

  std::vector<std::size_t> consumers(n, 0);
  for (const auto& node : spec.nodes)
    for (const auto& up : node.inputs) ++consumers[spec.index_of(up)];

  Activations acts;
  acts.maps.resize(n);
  acts.argmax.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = spec.nodes[i];
    const std::vector<Volume>* up = node.inputs.empty() ? nullptr : &acts.maps[spec.index_of(node.inputs.front())];
    auto& out = acts.maps[i];
    switch (node.kind) {
      case NodeKind::Input:
        out = {inputs.at(node.name)};
        break;
      case NodeKind::Conv:
        out = conv_layer_forward(*up, params.layers[i].weights, params.layers[i].bias, shape_of(net, i), net.methods[i]);
        break;
      case NodeKind::MaxFilter:
        for (const auto& v : *up) {
          auto r = max_filter(v, node.filter, net.plan.taps[i]);
          out.push_back(std::move(r.out));
          if (keep_maps) acts.argmax[i].push_back(std::move(r.argmax));
        }
        break;
      case NodeKind::Activation:
        out = *up;
        for (auto& v : out)
          for (float& x : v.values())
            x = node.activation == ActivationFn::Relu ? std::max(x, 0.0f) : std::tanh(x);
        break;
      case NodeKind::Concat:
        for (const auto& name : node.inputs) {
          const auto& maps = acts.maps[spec.index_of(name)];
          out.insert(out.end(), maps.begin(), maps.end());
        }
        break;
      case NodeKind::Output: {
        const Volume& z0 = (*up)[0];
        const Volume& z1 = (*up)[1];
        Volume p0(z0.dims()), p1(z0.dims());
        for (std::size_t k = 0; k < z0.size(); ++k) {
          const float m = std::max(z0[k], z1[k]);
          const float e0 = std::exp(z0[k] - m), e1 = std::exp(z1[k] - m);
          p0[k] = e0 / (e0 + e1);
          p1[k] = e1 / (e0 + e1);
        }
        out = {std::move(p0), std::move(p1)};
        break;
      }
    }
    if (!keep_maps)
      for (const auto& name : node.inputs) {
        const std::size_t u = spec.index_of(name);
        if (--consumers[u] == 0) acts.maps[u].clear();
      }
  }
  acts.complete = keep_maps;
  acts.output_node = spec.output();
  return acts;
}

Gradients backward(const Network& net, const ParamState& params, const Activations& acts, const Volume& labels,
                   const Volume& weights) {
  const auto& spec = net.spec;
  const std::size_t n = spec.nodes.size();
  if (!acts.complete) throw std::logic_error("backward needs a forward pass with keep_maps");
  check_params(net, params);
  const std::size_t out = spec.output();
  const Volume& p1 = acts.maps[out][1];
  if (labels.dims() != p1.dims() || weights.dims() != p1.dims())
    throw ShapeError("labels/weights dims " + to_string(labels.dims()) + "/" + to_string(weights.dims()) +
                     " do not match output " + to_string(p1.dims()));

  Gradients grads;
  grads.weights.resize(n);
  grads.bias.resize(n);
  std::vector<std::vector<Volume>> g(n);

  {
    // Fused softmax + cross-entropy: d/dz1 = w (p1 - y), d/dz0 = -w (p1 - y).
    Volume d0(p1.dims()), d1(p1.dims());
    for (std::size_t k = 0; k < p1.size(); ++k) {
      const float d = weights[k] * (p1[k] - labels[k]);
      d1[k] = d;
      d0[k] = -d;
    }
    g[spec.index_of(spec.nodes[out].inputs.front())] = {std::move(d0), std::move(d1)};
  }

  for (std::size_t i = n; i-- > 0;) {
    const auto& node = spec.nodes[i];
    if (node.kind == NodeKind::Conv && g[i].empty()) {
      // Unused branch: zero gradient.
      grads.weights[i].assign(params.layers[i].weights.size(), 0.0f);
      grads.bias[i].assign(params.layers[i].bias.size(), 0.0f);
      continue;
    }
    if (g[i].empty() || node.kind == NodeKind::Input || node.kind == NodeKind::Output) continue;
    const std::size_t u = spec.index_of(node.inputs.front());
    const auto& up_maps = acts.maps[u];
    switch (node.kind) {
      case NodeKind::Conv: {
        const bool need_input = spec.nodes[u].kind != NodeKind::Input;
        auto r = conv_layer_backward(up_maps, params.layers[i].weights, g[i], shape_of(net, i), need_input, net.methods[i]);
        grads.weights[i] = std::move(r.grad_weights);
        grads.bias[i] = std::move(r.grad_bias);
        if (need_input) accumulate(g[u], std::move(r.grad_input));
        break;
      }
      case NodeKind::MaxFilter: {
        std::vector<Volume> gi;
        for (std::size_t m = 0; m < g[i].size(); ++m)
          gi.push_back(max_filter_backward(acts.argmax[i][m], g[i][m], up_maps[m].dims()));
        accumulate(g[u], std::move(gi));
        break;
      }
      case NodeKind::Activation: {
        std::vector<Volume> gi = std::move(g[i]);
        const auto& y = acts.maps[i];
        for (std::size_t m = 0; m < gi.size(); ++m) {
          auto gv = gi[m].values();
          auto yv = y[m].values();
          if (node.activation == ActivationFn::Relu)
            for (std::size_t k = 0; k < gv.size(); ++k) gv[k] = yv[k] > 0.0f ? gv[k] : 0.0f;
          else
            for (std::size_t k = 0; k < gv.size(); ++k) gv[k] *= 1.0f - yv[k] * yv[k];
        }
        accumulate(g[u], std::move(gi));
        break;
      }
      case NodeKind::Concat: {
        std::size_t offset = 0;
        for (const auto& name : node.inputs) {
          const std::size_t v = spec.index_of(name);
          std::vector<Volume> part(std::make_move_iterator(g[i].begin() + offset),
                                   std::make_move_iterator(g[i].begin() + offset + net.maps[v]));
          offset += net.maps[v];
          if (spec.nodes[v].kind != NodeKind::Input) accumulate(g[v], std::move(part));
        }
        break;
      }
      default:
        break;
    }
    g[i].clear();
  }
  return grads;
}

}  // namespace densenn
