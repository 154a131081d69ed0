#include "densenn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "densenn/errors.hpp"
#include "densenn/evaluation.hpp"

namespace densenn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (patch.x == 0 || patch.y == 0 || patch.z == 0) throw ConfigError("patch dims must be positive");
}

Volume derive_boundary_labels(const Segmentation& truth) {
  const Vec3 d = truth.dims();
  Volume out(d, 0.0f);
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const auto l = truth(x, y, z);
        bool edge = l == 0;
        if (!edge && x > 0) edge = truth(x - 1, y, z) != l;
        if (!edge && x + 1 < d.x) edge = truth(x + 1, y, z) != l;
        if (!edge && y > 0) edge = truth(x, y - 1, z) != l;
        if (!edge && y + 1 < d.y) edge = truth(x, y + 1, z) != l;
        out(x, y, z) = edge ? 1.0f : 0.0f;
      }
  return out;
}

StackPair StackPair::make(Volume image, Segmentation truth) {
  if (image.dims() != truth.dims())
    throw ShapeError("image " + to_string(image.dims()) + " and truth " + to_string(truth.dims()) + " differ in dims");
  StackPair p{std::move(image), std::move(truth), Volume{}};
  p.boundary_labels = derive_boundary_labels(p.truth);
  return p;
}

TrainStack to_train_stack(const StackPair& pair, const std::string& input_name) {
  TrainStack s;
  s.inputs.emplace(input_name, pair.image);
  s.labels = pair.boundary_labels;
  return s;
}

// ---------------------------------------------------------------------------

Vec3 output_origin(const Vec3& fov) { return {(fov.x - 1) / 2, (fov.y - 1) / 2, (fov.z - 1) / 2}; }

PatchSampler::PatchSampler(std::span<const TrainStack> stacks, const Vec3& fov, const Vec3& patch, bool augment)
    : stacks_(stacks), fov_(fov), patch_(patch) {
  if (stacks.empty()) throw ConfigError("no training stacks");
  window_ = Vec3{patch.x + fov.x - 1, patch.y + fov.y - 1, patch.z + fov.z - 1};
  for (std::size_t k = 0; k < stacks.size(); ++k) {
    const Vec3 d = stacks[k].labels.dims();
    for (const auto& [name, v] : stacks[k].inputs)
      if (v.dims() != d) throw ShapeError("input '" + name + "' of stack " + std::to_string(k) + " differs in dims from its labels");
    std::uint64_t count = 1;
    for (int a = 0; a < 3; ++a) count *= d[a] >= window_[a] ? d[a] - window_[a] + 1 : 0;
    if (count == 0)
      throw ConfigError("stack " + std::to_string(k) + " of dims " + to_string(d) + " admits no " + to_string(patch) +
                        " output patch (input window " + to_string(window_) + ")");
    placements_.push_back(count);
    total_ += count;
  }
  if (!augment)
    transforms_ = {0};
  else if (patch.x == patch.y && fov.x == fov.y)
    transforms_ = {0, 1, 2, 3, 4, 5, 6, 7};
  else
    transforms_ = {0, 2, 4, 6};  // shape-preserving subset
}

PatchSample PatchSampler::sample(std::mt19937_64& rng) const {
  std::uint64_t r = std::uniform_int_distribution<std::uint64_t>(0, total_ - 1)(rng);
  std::size_t k = 0;
  while (r >= placements_[k]) r -= placements_[k++];
  const Vec3 d = stacks_[k].labels.dims();
  const std::uint64_t cx = d.x - window_.x + 1, cy = d.y - window_.y + 1;
  PatchSample s;
  s.stack = k;
  s.offset = Vec3{r % cx, (r / cx) % cy, r / (cx * cy)};
  s.transform = transforms_[std::uniform_int_distribution<std::size_t>(0, transforms_.size() - 1)(rng)];
  for (const auto& [name, v] : stacks_[k].inputs)
    s.inputs.emplace(name, dihedral_xy(crop(v, Window{s.offset, window_}), s.transform));
  s.labels = dihedral_xy(crop(stacks_[k].labels, Window{s.offset + output_origin(fov_), patch_}), s.transform);
  return s;
}

Volume class_weights(const Volume& labels) {
  std::size_t positives = 0;
  for (float y : labels.values()) positives += y >= 0.5f;
  const std::size_t total = labels.size(), negatives = total - positives;
  Volume w(labels.dims(), 1.0f);
  if (positives == 0 || negatives == 0) return w;
  // Both weights are integer multiples of one step t: with N0 = g a and
  // N1 = g b, w0 = b t and w1 = a t, so N0 w0 == N1 w1 holds exactly in float.
  // t approximates P / (2 g a b) with a mantissa small enough that a t and
  // b t stay representable; the relative deviation is about max(a, b) / 2^24.
  const std::size_t g = std::gcd(negatives, positives), a = negatives / g, b = positives / g;
  const double target = double(total) / (2.0 * double(g) * double(a) * double(b));
  const double m_max = std::ldexp(1.0, 24) / double(std::max(a, b));
  int e = 0;
  std::frexp(target / m_max, &e);  // target / 2^e lies in [m_max / 2, m_max)
  const double m = std::min(std::round(std::ldexp(target, -e)), std::floor(m_max));
  const float w0 = float(std::ldexp(double(b) * m, e));
  const float w1 = float(std::ldexp(double(a) * m, e));
  for (std::size_t i = 0; i < total; ++i) w[i] = labels[i] >= 0.5f ? w1 : w0;
  return w;
}

double loss(const Volume& probs, const Volume& labels, const Volume& weights) {
  if (probs.dims() != labels.dims() || probs.dims() != weights.dims())
    throw ShapeError("loss operands differ in dims");
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(double(probs[i]), lo, hi);
    const double y = labels[i];
    sum += double(weights[i]) * (-y * std::log(p) - (1.0 - y) * std::log(1.0 - p));
  }
  return sum;
}

void sgd_step(ParamState& params, const Gradients& grads, const TrainConfig& cfg, std::size_t patch_pixels) {
  const float mu = float(cfg.momentum);
  const float rate = float(cfg.learning_rate / double(patch_pixels));
  auto update = [&](std::vector<float>& w, std::vector<float>& v, const std::vector<float>& g) {
    if (g.size() != w.size() || v.size() != w.size()) throw ShapeError("gradient shape does not match parameters");
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = mu * v[k] + rate * g[k];
      w[k] -= v[k];
    }
  };
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& layer = params.layers[i];
    if (layer.weights.empty()) continue;
    update(layer.weights, layer.weight_velocity, grads.weights.at(i));
    update(layer.bias, layer.bias_velocity, grads.bias.at(i));
  }
}

// ---------------------------------------------------------------------------

Trainer::Trainer(Network net, std::vector<TrainStack> stacks, TrainConfig cfg, ParamState params)
    : net_(std::move(net)),
      stacks_(std::move(stacks)),
      cfg_((cfg.validate(), cfg)),
      params_(std::move(params)),
      sampler_(stacks_, net_.fov, cfg_.patch, cfg_.augment),
      rng_(cfg_.seed) {
  for (const auto& s : stacks_)
    for (auto i : net_.spec.inputs())
      if (!s.inputs.count(net_.spec.nodes[i].name))
        throw ConfigError("training stack lacks network input '" + net_.spec.nodes[i].name + "'");
}

std::vector<TuneReport> Trainer::tune() {
  std::vector<TuneReport> reports(net_.spec.nodes.size());
  if (cfg_.deterministic || cfg_.tune_trials <= 0) return reports;
  const auto dims = node_dims(net_.spec, sampler_.input_window());
  for (std::size_t i = 0; i < net_.spec.nodes.size(); ++i) {
    const auto& node = net_.spec.nodes[i];
    if (node.kind != NodeKind::Conv) continue;
    const std::size_t up = net_.spec.index_of(node.inputs.front());
    reports[i] = tune_layer(dims[up], node.filter, net_.plan.taps[i], cfg_.tune_trials, net_.maps[up], node.out_maps);
    net_.methods[i] = reports[i].choice;
  }
  return reports;
}

void Trainer::run(std::size_t updates, const std::function<void(const LogRecord&)>& on_log) {
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < updates; ++step) {
    PatchSample s = sampler_.sample(rng_);
    const Volume weights = cfg_.rebalance ? class_weights(s.labels) : Volume(s.labels.dims(), 1.0f);
    const Activations acts = forward(net_, params_, s.inputs, true);
    const Volume& probs = acts.boundary();
    const double total = loss(probs, s.labels, weights);
    if (!std::isfinite(total)) throw NumericalError("non-finite loss at update " + std::to_string(update_ + 1));
    const Gradients grads = backward(net_, params_, acts, s.labels, weights);
    sgd_step(params_, grads, cfg_, s.labels.size());
    ++update_;

    const double per_voxel = total / double(s.labels.size());
    smoothed_ = smoothed_ < 0.0 ? per_voxel : 0.99 * smoothed_ + 0.01 * per_voxel;
    if (cfg_.log_every > 0 && update_ % cfg_.log_every == 0) {
      LogRecord rec{update_, smoothed_, pixel_error(probs, s.labels, 0.5),
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
      log_.push_back(rec);
      if (on_log) on_log(rec);
    }
  }
}

std::string Trainer::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void Trainer::restore(std::uint64_t update, const std::string& rng_state) {
  std::istringstream is(rng_state);
  is >> rng_;
  if (!is) throw FormatError("unreadable random-generator state");
  update_ = update;
}

TrainResult train(const NetworkSpec& spec, std::span<const StackPair> pairs, const TrainConfig& cfg) {
  Network net = Network::compile(spec);
  std::vector<TrainStack> stacks;
  for (const auto& p : pairs) stacks.push_back(to_train_stack(p, net.input_name()));
  ParamState init = init_params(spec, cfg.seed);
  Trainer trainer(std::move(net), std::move(stacks), cfg, std::move(init));
  trainer.tune();
  trainer.run(cfg.updates);
  return {trainer.params(), trainer.log()};
}

// ---------------------------------------------------------------------------

Volume infer(const Network& net, const ParamState& params, const InputMap& images, const Vec3& out_patch) {
  std::optional<Vec3> dims;
  for (auto i : net.spec.inputs()) {
    const auto& name = net.spec.nodes[i].name;
    auto it = images.find(name);
    if (it == images.end()) throw ShapeError("missing input '" + name + "'");
    if (dims && *dims != it->second.dims()) throw ShapeError("network inputs differ in dims");
    dims = it->second.dims();
  }
  const Vec3& fov = net.fov;
  for (int a = 0; a < 3; ++a)
    if ((*dims)[a] < fov[a]) throw ShapeError("image " + to_string(*dims) + " is smaller than the field of view " + to_string(fov));
  const Vec3 m{dims->x - fov.x + 1, dims->y - fov.y + 1, dims->z - fov.z + 1};
  const Vec3 p{std::clamp<std::size_t>(out_patch.x, 1, m.x), std::clamp<std::size_t>(out_patch.y, 1, m.y),
               std::clamp<std::size_t>(out_patch.z, 1, m.z)};
  Volume out(m, 0.0f);
  for (std::size_t z = 0; z < m.z; z += p.z)
    for (std::size_t y = 0; y < m.y; y += p.y)
      for (std::size_t x = 0; x < m.x; x += p.x) {
        const Vec3 at{x, y, z};
        const Vec3 size{std::min(p.x, m.x - x), std::min(p.y, m.y - y), std::min(p.z, m.z - z)};
        const Window window{at, size + Vec3{fov.x - 1, fov.y - 1, fov.z - 1}};
        InputMap tile;
        for (const auto& [name, v] : images)
          if (net.spec.find(name)) tile.emplace(name, crop(v, window));
        const Activations acts = forward(net, params, tile, false);
        paste(out, acts.boundary(), at);
      }
  return out;
}

Volume pad_map(const Volume& map, const Vec3& full, const Vec3& fov, float fill) {
  Volume out(full, fill);
  paste(out, map, output_origin(fov));
  return out;
}

std::uint64_t digest(std::span<const Volume> volumes) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& v : volumes) {
    const Vec3 d = v.dims();
    mix(&d, sizeof d);
    mix(v.data(), v.size() * sizeof(float));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Recursive two-stage training

std::string recursive_input_name(const Network& stage1, const Network& stage2) {
  const auto in1 = stage1.spec.inputs();
  const auto in2 = stage2.spec.inputs();
  if (in1.size() != 1) throw SpecError("stage-1 network must have exactly one input");
  if (in2.size() != 2) throw SpecError("stage-2 network must declare two inputs (image, recursive map)");
  const std::string& image = stage1.spec.nodes[in1.front()].name;
  const std::string& a = stage2.spec.nodes[in2[0]].name;
  const std::string& b = stage2.spec.nodes[in2[1]].name;
  if (a == image) return b;
  if (b == image) return a;
  throw SpecError("stage-2 inputs '" + a + "', '" + b + "' do not include the stage-1 input '" + image + "'");
}

ParamState warm_start(const Network& stage1, const ParamState& params1, const Network& stage2, std::uint64_t seed) {
  ParamState p2 = init_params(stage2.spec, seed);
  std::size_t shared = 0;
  for (std::size_t j = 0; j < stage2.spec.nodes.size(); ++j) {
    const auto& node2 = stage2.spec.nodes[j];
    if (node2.kind != NodeKind::Conv) continue;
    const auto i = stage1.spec.find(node2.name);
    if (!i || stage1.spec.nodes[*i].kind != NodeKind::Conv) continue;
    const auto& node1 = stage1.spec.nodes[*i];
    const auto s1 = layer_shape(stage1.spec, stage1.plan, *i);
    const auto s2 = layer_shape(stage2.spec, stage2.plan, j);
    const Vec3 k1 = node1.filter, k2 = node2.filter;
    if (s1.out_maps != s2.out_maps || k1.x != k2.x || k1.y != k2.y || (k1.z != k2.z && k1.z != 1) ||
        s2.in_maps < s1.in_maps)
      throw SpecError("layer '" + node2.name + "' cannot be warm-started: stage 1 has " + std::to_string(s1.in_maps) +
                      "->" + std::to_string(s1.out_maps) + " maps with filter " + to_string(k1) + ", stage 2 has " +
                      std::to_string(s2.in_maps) + "->" + std::to_string(s2.out_maps) + " with filter " + to_string(k2));
    const std::size_t plane = k1.z == k2.z ? 0 : (k2.z - 1) / 2;
    const std::size_t taps1 = k1.volume(), taps2 = k2.volume();
    auto& dst = p2.layers[j];
    const auto& src = params1.layers[*i];
    std::fill(dst.weights.begin(), dst.weights.end(), 0.0f);
    for (std::size_t o = 0; o < s1.out_maps; ++o)
      for (std::size_t c = 0; c < s1.in_maps; ++c)
        for (std::size_t qz = 0; qz < k1.z; ++qz)
          for (std::size_t qy = 0; qy < k1.y; ++qy)
            for (std::size_t qx = 0; qx < k1.x; ++qx)
              dst.weights[(o * s2.in_maps + c) * taps2 + ((plane + qz) * k2.y + qy) * k2.x + qx] =
                  src.weights[(o * s1.in_maps + c) * taps1 + (qz * k1.y + qy) * k1.x + qx];
    dst.bias = src.bias;
    ++shared;
  }
  if (shared == 0) throw SpecError("stage-2 network shares no conv layer names with stage 1; nothing to warm-start");
  return p2;
}

namespace {

Volume predict(const Network& net, const ParamState& params, const Volume& image, const Vec3& patch) {
  return pad_map(infer(net, params, InputMap{{net.input_name(), image}}, patch), image.dims(), net.fov);
}

}  // namespace

Volume infer_recursive(const Network& net1, const ParamState& params1, const Network& net2, const ParamState& params2,
                       const Volume& image, const Vec3& out_patch) {
  const std::string rec = recursive_input_name(net1, net2);
  InputMap inputs{{net1.input_name(), image}, {rec, predict(net1, params1, image, out_patch)}};
  return infer(net2, params2, inputs, out_patch);
}

RecursiveResult recursive_pipeline(const NetworkSpec& stage1, const NetworkSpec& stage2, std::span<const StackPair> pairs,
                                   std::span<const StackPair> extra_pairs, const RecursiveConfig& cfg) {
  RecursiveResult r;
  r.net1 = Network::compile(stage1);
  r.net2 = Network::compile(stage2);
  const std::string image_name = r.net1.input_name();
  const std::string rec_name = recursive_input_name(r.net1, r.net2);
  // Surface layer mismatches before spending time on training.
  warm_start(r.net1, init_params(stage1, 0), r.net2, 0);

  std::vector<TrainStack> stacks1;
  for (const auto& p : pairs) stacks1.push_back(to_train_stack(p, image_name));
  Trainer t1(r.net1, std::move(stacks1), cfg.stage1, init_params(stage1, cfg.stage1.seed));
  t1.tune();
  t1.run(cfg.stage1.updates);
  r.params1_handoff = t1.params();

  std::vector<const StackPair*> all;
  for (const auto& p : pairs) all.push_back(&p);
  for (const auto& p : extra_pairs) all.push_back(&p);
  for (const auto* p : all) r.preliminary_maps.push_back(predict(t1.network(), r.params1_handoff, p->image, cfg.infer_patch));
  r.preliminary_digest_before = digest(r.preliminary_maps);

  r.params2_init = warm_start(r.net1, r.params1_handoff, r.net2, cfg.stage2.seed);
  std::vector<TrainStack> stacks2;
  for (std::size_t k = 0; k < all.size(); ++k) {
    TrainStack s;
    s.inputs.emplace(image_name, all[k]->image);
    s.inputs.emplace(rec_name, r.preliminary_maps[k]);
    s.labels = all[k]->boundary_labels;
    stacks2.push_back(std::move(s));
  }
  Trainer t2(r.net2, std::move(stacks2), cfg.stage2, r.params2_init);
  t2.tune();
  t2.run(cfg.stage2.updates);
  r.params2 = t2.params();
  r.net2 = t2.network();
  {
    std::vector<Volume> used;
    for (const auto& s : t2.stacks()) used.push_back(s.inputs.at(rec_name));
    const std::uint64_t seen = digest(used);
    r.preliminary_digest_after = seen == digest(r.preliminary_maps) ? seen : 0;
  }
  r.log2 = t2.log();

  if (cfg.stage1_extra_updates > 0) {
    t1.run(cfg.stage1_extra_updates);
    for (const auto* p : all) r.final_maps.push_back(predict(t1.network(), t1.params(), p->image, cfg.infer_patch));
  } else {
    r.final_maps = r.preliminary_maps;
  }
  r.params1 = t1.params();
  r.net1 = t1.network();
  r.log1 = t1.log();
  return r;
}

}  // namespace densenn
