#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "densenn/netgraph.hpp"
#include "densenn/tensor.hpp"

namespace densenn {

enum class DType { U8, F32, U32 };
enum class VolumeRole { Image, Labels, BoundaryMap };

const char* to_string(DType t);
const char* to_string(VolumeRole r);
std::size_t dtype_width(DType t);

struct StackMeta {
  Vec3 dims{1, 1, 1};
  DType dtype = DType::F32;
  VoxelSize voxel_size_nm;
  VolumeRole role = VolumeRole::Image;
};

// A volume lives in two files: `<base>.raw` (little-endian, x-fastest) and a
// `<base>.meta` text sidecar of `key = value` lines. Paths may name either
// file or the bare base.

std::filesystem::path raw_path(const std::filesystem::path& p);
std::filesystem::path meta_path(const std::filesystem::path& p);

StackMeta read_meta(const std::filesystem::path& p);

/// dtype U8 stores round(clamp(v, 0, 1) * 255); F32 stores the bits as-is.
void write_volume(const std::filesystem::path& p, const Volume& v, StackMeta meta);
/// U8 payloads are scaled to [0, 1]; U32 payloads are rejected.
Volume read_volume(const std::filesystem::path& p, StackMeta* meta_out = nullptr);

void write_segmentation(const std::filesystem::path& p, const Segmentation& s, StackMeta meta);
/// Accepts U32 and U8 payloads.
Segmentation read_segmentation(const std::filesystem::path& p, StackMeta* meta_out = nullptr);

struct Checkpoint {
  std::string spec_text;
  ParamState params;
  bool has_momentum = false;
  std::uint64_t update = 0;
  std::string rng_state;
};

inline constexpr char kCheckpointMagic[] = "DNNCKPT1";

/// Writes weights and biases of every conv node in spec order, plus momentum
/// buffers when `with_momentum` (needed for an exact resume).
void save_checkpoint(const std::filesystem::path& p, const std::string& spec_text, const ParamState& params,
                     std::uint64_t update, const std::string& rng_state, bool with_momentum = true);

/// Checks every array against the shapes implied by the embedded spec.
/// Momentum buffers absent from the file come back zeroed.
Checkpoint load_checkpoint(const std::filesystem::path& p);

struct SynthParams {
  std::uint64_t seed = 1;
  Vec3 dims{96, 96, 16};
  std::size_t n_cells = 32;
  double z_blur = 1.0;    // max in-plane shift per slice, in pixels
  double noise_sd = 0.2;
  double z_weight = 0.25;  // distance scale along z; < 1 elongates cells in z
};

struct SynthStack {
  Volume image;
  Segmentation truth;
  Volume clean;  // the image before additive noise
};

/// Anisotropic Voronoi phantom with dark membranes on label transitions.
SynthStack synth_generate(const SynthParams& p);

}  // namespace densenn
