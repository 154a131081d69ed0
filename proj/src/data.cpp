#include "densenn/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "densenn/errors.hpp"
#include "densenn/training.hpp"

namespace densenn {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace fs = std::filesystem;

const char* to_string(DType t) {
  switch (t) {
    case DType::U8: return "u8";
    case DType::F32: return "f32";
    case DType::U32: return "u32";
  }
  return "?";
}

const char* to_string(VolumeRole r) {
  switch (r) {
    case VolumeRole::Image: return "image";
    case VolumeRole::Labels: return "labels";
    case VolumeRole::BoundaryMap: return "boundary_map";
  }
  return "?";
}

std::size_t dtype_width(DType t) { return t == DType::U8 ? 1 : 4; }

namespace {

fs::path base_of(const fs::path& p) {
  const auto ext = p.extension();
  if (ext == ".raw" || ext == ".meta") {
    fs::path b = p;
    return b.replace_extension();
  }
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const void* data, std::size_t bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(static_cast<const char*>(data), std::streamsize(bytes));
  if (!out) throw FormatError("write failed for " + p.string());
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

void write_meta(const fs::path& base, const StackMeta& m) {
  std::ostringstream os;
  os.precision(17);
  os << "dims = " << m.dims.x << ' ' << m.dims.y << ' ' << m.dims.z << '\n'
     << "dtype = " << to_string(m.dtype) << '\n'
     << "voxel_size_nm = " << m.voxel_size_nm.x << ' ' << m.voxel_size_nm.y << ' ' << m.voxel_size_nm.z << '\n'
     << "role = " << to_string(m.role) << '\n';
  const std::string text = os.str();
  write_file(meta_path(base), text.data(), text.size());
}

std::string read_payload(const fs::path& base, const StackMeta& m) {
  std::string bytes = read_file(raw_path(base));
  const std::size_t expected = m.dims.volume() * dtype_width(m.dtype);
  if (bytes.size() != expected)
    throw FormatError(raw_path(base).string() + ": expected " + std::to_string(expected) + " bytes for " +
                      to_string(m.dims) + " " + to_string(m.dtype) + ", found " + std::to_string(bytes.size()));
  return bytes;
}

}  // namespace

fs::path raw_path(const fs::path& p) {
  fs::path b = base_of(p);
  return b += ".raw";
}

fs::path meta_path(const fs::path& p) {
  fs::path b = base_of(p);
  return b += ".meta";
}

StackMeta read_meta(const fs::path& p) {
  const fs::path mp = meta_path(p);
  if (!fs::exists(mp)) throw FormatError("missing sidecar " + mp.string());
  std::istringstream in(read_file(mp));
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(mp.string() + ": expected 'key = value', got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(mp.string() + ": missing key '" + key + "'");
    return it->second;
  };
  StackMeta m;
  {
    std::istringstream v(need("dims"));
    long long x = 0, y = 0, z = 0;
    if (!(v >> x >> y >> z) || x <= 0 || y <= 0 || z <= 0) throw FormatError(mp.string() + ": bad dims");
    m.dims = Vec3{std::size_t(x), std::size_t(y), std::size_t(z)};
  }
  const std::string& dt = need("dtype");
  if (dt == "u8") m.dtype = DType::U8;
  else if (dt == "f32") m.dtype = DType::F32;
  else if (dt == "u32") m.dtype = DType::U32;
  else throw FormatError(mp.string() + ": unknown dtype '" + dt + "'");
  if (kv.count("voxel_size_nm")) {
    std::istringstream v(kv["voxel_size_nm"]);
    if (!(v >> m.voxel_size_nm.x >> m.voxel_size_nm.y >> m.voxel_size_nm.z))
      throw FormatError(mp.string() + ": bad voxel_size_nm");
  }
  if (kv.count("role")) {
    const std::string& r = kv["role"];
    if (r == "image") m.role = VolumeRole::Image;
    else if (r == "labels") m.role = VolumeRole::Labels;
    else if (r == "boundary_map") m.role = VolumeRole::BoundaryMap;
    else throw FormatError(mp.string() + ": unknown role '" + r + "'");
  }
  return m;
}

void write_volume(const fs::path& p, const Volume& v, StackMeta meta) {
  meta.dims = v.dims();
  if (v.voxel_size) meta.voxel_size_nm = *v.voxel_size;
  if (meta.dtype == DType::U8) {
    std::vector<std::uint8_t> bytes(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      bytes[i] = std::uint8_t(std::lround(std::clamp(v[i], 0.0f, 1.0f) * 255.0f));
    write_file(raw_path(p), bytes.data(), bytes.size());
  } else if (meta.dtype == DType::F32) {
    write_file(raw_path(p), v.data(), v.size() * sizeof(float));
  } else {
    throw FormatError("float volumes are written as u8 or f32, not u32");
  }
  write_meta(p, meta);
}

Volume read_volume(const fs::path& p, StackMeta* meta_out) {
  const StackMeta m = read_meta(p);
  if (m.dtype == DType::U32) throw FormatError(raw_path(p).string() + " holds u32 labels, not an image or map");
  const std::string bytes = read_payload(p, m);
  Volume v(m.dims, 0.0f);
  if (m.dtype == DType::U8) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(static_cast<unsigned char>(bytes[i])) / 255.0f;
  } else {
    std::memcpy(v.data(), bytes.data(), bytes.size());
  }
  v.voxel_size = m.voxel_size_nm;
  if (meta_out) *meta_out = m;
  return v;
}

void write_segmentation(const fs::path& p, const Segmentation& s, StackMeta meta) {
  meta.dims = s.dims();
  meta.dtype = DType::U32;
  if (s.voxel_size) meta.voxel_size_nm = *s.voxel_size;
  write_file(raw_path(p), s.data(), s.size() * sizeof(std::uint32_t));
  write_meta(p, meta);
}

Segmentation read_segmentation(const fs::path& p, StackMeta* meta_out) {
  const StackMeta m = read_meta(p);
  if (m.dtype == DType::F32) throw FormatError(raw_path(p).string() + " holds f32 values, not labels");
  const std::string bytes = read_payload(p, m);
  Segmentation s(m.dims, 0u);
  if (m.dtype == DType::U8) {
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<unsigned char>(bytes[i]);
  } else {
    std::memcpy(s.data(), bytes.data(), bytes.size());
  }
  s.voxel_size = m.voxel_size_nm;
  if (meta_out) *meta_out = m;
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  void array(const std::string& name, const std::vector<float>& a) {
    str(name);
    u64(a.size());
    bytes(a.data(), a.size() * sizeof(float));
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string buf, std::string where) : buf_(std::move(buf)), where_(std::move(where)) {}
  void bytes(void* p, std::size_t n) {
    if (n > buf_.size() - pos_) throw FormatError(where_ + ": truncated checkpoint");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(std::min<std::size_t>(n, buf_.size() - pos_), '\0');
    if (s.size() != n) throw FormatError(where_ + ": truncated checkpoint");
    bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string buf_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const fs::path& p, const std::string& spec_text, const ParamState& params, std::uint64_t update,
                     const std::string& rng_state, bool with_momentum) {
  const NetworkSpec spec = parse_spec(spec_text);
  if (params.layers.size() != spec.nodes.size()) throw ShapeError("parameter state does not match the spec");
  std::vector<std::pair<std::string, const std::vector<float>*>> arrays;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    if (spec.nodes[i].kind != NodeKind::Conv) continue;
    const auto& l = params.layers[i];
    const auto& n = spec.nodes[i].name;
    arrays.emplace_back(n + ".w", &l.weights);
    arrays.emplace_back(n + ".b", &l.bias);
    if (with_momentum) {
      arrays.emplace_back(n + ".vw", &l.weight_velocity);
      arrays.emplace_back(n + ".vb", &l.bias_velocity);
    }
  }
  Writer w;
  w.bytes(kCheckpointMagic, 8);
  w.str(spec_text);
  w.u32(std::uint32_t(arrays.size()));
  for (const auto& [name, a] : arrays) w.array(name, *a);
  w.u64(update);
  w.str(rng_state);
  // Write-then-rename so an interrupted save never clobbers the last good file.
  fs::path tmp = p;
  tmp += ".tmp";
  write_file(tmp, w.data().data(), w.data().size());
  fs::rename(tmp, p);
}

Checkpoint load_checkpoint(const fs::path& p) {
  Reader r(read_file(p), p.string());
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, "DNNCKPT", 7) != 0) throw FormatError(p.string() + ": not a checkpoint (bad magic)");
  if (magic[7] != kCheckpointMagic[7])
    throw FormatError(p.string() + ": unsupported checkpoint version '" + std::string(1, magic[7]) + "'");

  Checkpoint c;
  c.spec_text = r.str();
  const NetworkSpec spec = parse_spec(c.spec_text);
  c.params = init_params(spec, 0);

  std::map<std::string, std::vector<float>*> slots;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    if (spec.nodes[i].kind != NodeKind::Conv) continue;
    auto& l = c.params.layers[i];
    const auto& n = spec.nodes[i].name;
    slots[n + ".w"] = &l.weights;
    slots[n + ".b"] = &l.bias;
    slots[n + ".vw"] = &l.weight_velocity;
    slots[n + ".vb"] = &l.bias_velocity;
  }
  std::set<std::string> seen;
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str();
    const std::uint64_t n = r.u64();
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError(p.string() + ": array '" + name + "' does not belong to the embedded spec");
    if (!seen.insert(name).second) throw FormatError(p.string() + ": duplicate array '" + name + "'");
    auto& dst = *it->second;
    if (n != dst.size())
      throw ShapeError(p.string() + ": array '" + name + "' has " + std::to_string(n) + " values, spec implies " +
                       std::to_string(dst.size()));
    r.bytes(dst.data(), n * sizeof(float));
  }
  std::size_t momentum = 0;
  for (const auto& [name, slot] : slots) {
    const bool is_velocity = name.ends_with(".vw") || name.ends_with(".vb");
    if (seen.count(name)) {
      momentum += is_velocity;
    } else if (is_velocity) {
      std::fill(slot->begin(), slot->end(), 0.0f);
    } else {
      throw FormatError(p.string() + ": missing array '" + name + "'");
    }
  }
  if (momentum != 0 && momentum * 2 != slots.size()) throw FormatError(p.string() + ": incomplete momentum buffers");
  c.has_momentum = momentum != 0;
  c.update = r.u64();
  c.rng_state = r.str();
  if (!r.done()) throw FormatError(p.string() + ": trailing bytes after checkpoint");
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic data

SynthStack synth_generate(const SynthParams& p) {
  const Vec3 d = p.dims;
  if (p.n_cells < 2) throw ConfigError("synth needs at least 2 cells");
  if (d.x < 32 || d.y < 32 || d.z < 1) throw ConfigError("synth dims must be at least 32 in x and y");
  if (p.n_cells > d.volume()) throw ConfigError("more cells than voxels");
  if (!(p.z_blur >= 0.0) || !(p.noise_sd >= 0.0) || !(p.z_weight > 0.0))
    throw ConfigError("z_blur and noise_sd must be non-negative and z_weight positive");

  std::mt19937_64 rng(p.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Distinct seed voxels; every seed owns at least itself, so all labels occur.
  std::vector<std::array<double, 3>> seeds;
  std::set<std::size_t> taken;
  while (seeds.size() < p.n_cells) {
    const std::size_t x = std::size_t(unit(rng) * double(d.x)) % d.x;
    const std::size_t y = std::size_t(unit(rng) * double(d.y)) % d.y;
    const std::size_t z = std::size_t(unit(rng) * double(d.z)) % d.z;
    if (taken.insert((z * d.y + y) * d.x + x).second) seeds.push_back({double(x), double(y), double(z)});
  }

  Segmentation truth(d, 0u);
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t label = 0;
        for (std::size_t k = 0; k < seeds.size(); ++k) {
          const double dx = double(x) - seeds[k][0], dy = double(y) - seeds[k][1];
          const double dz = (double(z) - seeds[k][2]) * p.z_weight;
          const double dist = dx * dx + dy * dy + dz * dz;
          if (dist < best) {
            best = dist;
            label = std::uint32_t(k + 1);
          }
        }
        truth(x, y, z) = label;
      }

  std::vector<float> gray(p.n_cells + 1);
  for (auto& g : gray) g = float(0.45 + 0.4 * unit(rng));
  const Volume membranes = derive_boundary_labels(truth);
  Volume img(d, 0.0f);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = membranes[i] >= 0.5f ? 0.1f : gray[truth[i]];

  // [1 2 1] / 4 smoothing along x then y, edges clamped.
  auto smooth = [&](Volume& v, bool along_x) {
    Volume src = v;
    for (std::size_t z = 0; z < d.z; ++z)
      for (std::size_t y = 0; y < d.y; ++y)
        for (std::size_t x = 0; x < d.x; ++x) {
          const std::size_t n = along_x ? d.x : d.y, c = along_x ? x : y;
          const std::size_t lo = c > 0 ? c - 1 : c, hi = c + 1 < n ? c + 1 : c;
          const float a = along_x ? src(lo, y, z) : src(x, lo, z);
          const float b = along_x ? src(hi, y, z) : src(x, hi, z);
          v(x, y, z) = 0.25f * a + 0.5f * src(x, y, z) + 0.25f * b;
        }
  };
  smooth(img, true);
  smooth(img, false);

  // Per-slice degradation: brightness jitter and a bilinear sub-pixel shift.
  Volume clean(d, 0.0f);
  for (std::size_t z = 0; z < d.z; ++z) {
    const float offset = float(0.08 * (unit(rng) - 0.5));
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    const double radius = p.z_blur * unit(rng);
    const double sx = radius * std::cos(angle), sy = radius * std::sin(angle);
    auto at = [&](double fx, double fy) {
      fx = std::clamp(fx, 0.0, double(d.x - 1));
      fy = std::clamp(fy, 0.0, double(d.y - 1));
      const std::size_t x0 = std::size_t(fx), y0 = std::size_t(fy);
      const std::size_t x1 = std::min(x0 + 1, d.x - 1), y1 = std::min(y0 + 1, d.y - 1);
      const double ax = fx - double(x0), ay = fy - double(y0);
      return (1 - ay) * ((1 - ax) * img(x0, y0, z) + ax * img(x1, y0, z)) +
             ay * ((1 - ax) * img(x0, y1, z) + ax * img(x1, y1, z));
    };
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x)
        clean(x, y, z) = std::clamp(float(at(double(x) + sx, double(y) + sy)) + offset, 0.0f, 1.0f);
  }

  std::normal_distribution<double> noise(0.0, p.noise_sd);
  Volume image = clean;
  if (p.noise_sd > 0.0)
    for (std::size_t i = 0; i < image.size(); ++i) image[i] = std::clamp(float(image[i] + noise(rng)), 0.0f, 1.0f);

  const VoxelSize nm{7.0, 7.0, 40.0};
  image.voxel_size = clean.voxel_size = truth.voxel_size = nm;
  return {std::move(image), std::move(truth), std::move(clean)};
}

}  // namespace densenn
