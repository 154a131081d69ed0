#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "densenn/netgraph.hpp"
#include "densenn/tensor.hpp"

namespace densenn {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t updates = 0;
  Vec3 patch{1, 1, 1};  // output patch
  std::uint64_t seed = 0;
  bool rebalance = true;
  bool augment = true;
  std::size_t log_every = 100;
  /// Forces direct convolution everywhere so runs are bit-reproducible.
  bool deterministic = false;
  /// Repetitions per method when self-tuning conv layers; 0 disables tuning.
  int tune_trials = 0;

  void validate() const;
};

/// 1 where the label is 0 or differs from any in-plane 4-neighbour.
Volume derive_boundary_labels(const Segmentation& truth);

struct StackPair {
  Volume image;
  Segmentation truth;
  Volume boundary_labels;

  static StackPair make(Volume image, Segmentation truth);
};

/// Generic training stack: one volume per network input plus binary labels,
/// all of the same dims.
struct TrainStack {
  InputMap inputs;
  Volume labels;
};

TrainStack to_train_stack(const StackPair& pair, const std::string& input_name);

struct PatchSample {
  InputMap inputs;  // windows of shape patch + fov - 1
  Volume labels;    // patch-shaped
  std::size_t stack = 0;
  Vec3 offset{0, 0, 0};  // input-window offset in the stack
  int transform = 0;     // dihedral index applied
};

/// Draws output patches uniformly over all legal placements of all stacks.
class PatchSampler {
 public:
  PatchSampler(std::span<const TrainStack> stacks, const Vec3& fov, const Vec3& patch, bool augment);

  PatchSample sample(std::mt19937_64& rng) const;
  const std::vector<std::uint64_t>& placements() const { return placements_; }
  Vec3 input_window() const { return window_; }

 private:
  std::span<const TrainStack> stacks_;
  Vec3 fov_, patch_, window_;
  std::vector<std::uint64_t> placements_;
  std::uint64_t total_ = 0;
  std::vector<int> transforms_;
};

/// Per-voxel weights close to P / (2 N_c), rounded jointly so that both
/// class totals are exactly equal; all ones when a class is absent.
Volume class_weights(const Volume& labels);

/// Weighted binary cross-entropy summed over voxels; p clamped to [1e-7, 1-1e-7].
double loss(const Volume& probs, const Volume& labels, const Volume& weights);

/// v <- momentum v + (lr / patch_pixels) g;  w <- w - v.
void sgd_step(ParamState& params, const Gradients& grads, const TrainConfig& cfg, std::size_t patch_pixels);

struct LogRecord {
  std::size_t update = 0;
  double loss = 0.0;         // exponential moving average of per-voxel loss
  double pixel_error = 0.0;  // on the current patch at threshold 0.5
  double wallclock_s = 0.0;
};

/// Stateful training loop; can be checkpointed and resumed bit-exactly in
/// deterministic mode.
class Trainer {
 public:
  Trainer(Network net, std::vector<TrainStack> stacks, TrainConfig cfg, ParamState params);
  Trainer(const Trainer&) = delete;  // the sampler views stacks_
  Trainer& operator=(const Trainer&) = delete;

  /// Runs `updates` more iterations; calls on_log every cfg.log_every updates.
  void run(std::size_t updates, const std::function<void(const LogRecord&)>& on_log = {});

  /// Self-tunes direct vs FFT per conv node for the training patch geometry.
  /// No-op in deterministic mode. Returns the per-node reports.
  std::vector<TuneReport> tune();

  const Network& network() const { return net_; }
  const ParamState& params() const { return params_; }
  ParamState& params() { return params_; }
  const TrainConfig& config() const { return cfg_; }
  std::uint64_t update_count() const { return update_; }
  const std::vector<LogRecord>& log() const { return log_; }
  const std::vector<TrainStack>& stacks() const { return stacks_; }

  std::string rng_state() const;
  void restore(std::uint64_t update, const std::string& rng_state);

 private:
  Network net_;
  std::vector<TrainStack> stacks_;
  TrainConfig cfg_;
  ParamState params_;
  PatchSampler sampler_;
  std::mt19937_64 rng_;
  std::uint64_t update_ = 0;
  double smoothed_ = -1.0;
  std::vector<LogRecord> log_;
};

struct TrainResult {
  ParamState params;
  std::vector<LogRecord> log;
};

TrainResult train(const NetworkSpec& spec, std::span<const StackPair> pairs, const TrainConfig& cfg);

/// Dense boundary-probability map of dims (image dims - fov + 1), computed
/// tile by tile with output tiles of at most `out_patch`.
Volume infer(const Network& net, const ParamState& params, const InputMap& images, const Vec3& out_patch);

/// Offset of output voxel 0 in input coordinates: (fov - 1) / 2 per axis.
Vec3 output_origin(const Vec3& fov);

/// Embeds `map` into a volume of `full` dims at output_origin(fov), filling the
/// margin with `fill`.
Volume pad_map(const Volume& map, const Vec3& full, const Vec3& fov, float fill = 0.5f);

struct RecursiveConfig {
  TrainConfig stage1;
  TrainConfig stage2;
  /// Further stage-1 updates after its maps were handed over (0 = none).
  std::size_t stage1_extra_updates = 0;
  Vec3 infer_patch{64, 64, 8};
};

struct RecursiveResult {
  Network net1, net2;
  ParamState params1;           // final stage-1 parameters
  ParamState params1_handoff;   // stage-1 parameters that produced the preliminary maps
  ParamState params2_init;      // warm-started stage-2 parameters before training
  ParamState params2;
  std::vector<Volume> preliminary_maps;  // padded, per pair then per extra pair
  std::vector<Volume> final_maps;        // from the final stage-1 parameters
  std::uint64_t preliminary_digest_before = 0;
  std::uint64_t preliminary_digest_after = 0;
  std::vector<LogRecord> log1, log2;
};

/// Name of the stage-2 input fed with the stage-1 map.
std::string recursive_input_name(const Network& stage1, const Network& stage2);

/// Stage-2 initial parameters: nodes sharing a name with a stage-1 conv node
/// copy its taps (2D taps embedded at z-plane (kz-1)/2, extra input channels
/// zero); everything else comes from init_params.
ParamState warm_start(const Network& stage1, const ParamState& params1, const Network& stage2, std::uint64_t seed);

RecursiveResult recursive_pipeline(const NetworkSpec& stage1, const NetworkSpec& stage2, std::span<const StackPair> pairs,
                                   std::span<const StackPair> extra_pairs, const RecursiveConfig& cfg);

/// Two-stage prediction: stage-1 map, padded, then stage 2 on (image, map).
Volume infer_recursive(const Network& net1, const ParamState& params1, const Network& net2, const ParamState& params2,
                       const Volume& image, const Vec3& out_patch);

std::uint64_t digest(std::span<const Volume> volumes);

}  // namespace densenn
