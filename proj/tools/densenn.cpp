// Command-line front end: synth, train, infer, eval, recursive, bench, inspect.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "densenn/convolution.hpp"
#include "densenn/data.hpp"
#include "densenn/errors.hpp"
#include "densenn/evaluation.hpp"
#include "densenn/netgraph.hpp"
#include "densenn/parallel.hpp"
#include "densenn/training.hpp"

namespace fs = std::filesystem;
using namespace densenn;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Vec3 parse_vec3(const std::string& text, const char* what) {
  std::string s = text;
  std::replace(s.begin(), s.end(), 'x', ',');
  std::istringstream in(s);
  std::vector<long long> v;
  for (std::string tok; std::getline(in, tok, ',');) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoll(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError(std::string(what) + ": expected X,Y,Z, got '" + text + "'");
    }
  }
  if (v.size() != 3 || v[0] <= 0 || v[1] <= 0 || v[2] <= 0)
    throw UsageError(std::string(what) + ": expected three positive integers X,Y,Z, got '" + text + "'");
  return Vec3{std::size_t(v[0]), std::size_t(v[1]), std::size_t(v[2])};
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Every `<name>_image` volume with a matching `<name>_truth` in the given
/// directories, in sorted order.
std::vector<StackPair> load_pairs(const std::vector<std::string>& dirs) {
  std::vector<StackPair> pairs;
  for (const auto& dir : dirs) {
    if (!fs::is_directory(dir)) throw FormatError("data directory '" + dir + "' does not exist");
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(dir)) {
      const std::string name = e.path().filename().string();
      if (name.ends_with("_image.meta")) images.push_back(e.path());
    }
    std::sort(images.begin(), images.end());
    for (const auto& img : images) {
      std::string base = img.string();
      base.resize(base.size() - std::string("_image.meta").size());
      Volume image = read_volume(base + "_image");
      Segmentation truth = read_segmentation(base + "_truth");
      pairs.push_back(StackPair::make(std::move(image), std::move(truth)));
    }
    if (images.empty()) throw FormatError("no <name>_image/<name>_truth pairs in '" + dir + "'");
  }
  return pairs;
}

std::string config_line(const TrainConfig& c) {
  std::ostringstream os;
  os << "# lr " << c.learning_rate << " momentum " << c.momentum << " patch " << to_string(c.patch) << " seed "
     << c.seed << " updates " << c.updates << " rebalance " << c.rebalance << " augment " << c.augment
     << " deterministic " << c.deterministic;
  return os.str();
}

// Flags shared by train and recursive.
struct TrainFlags {
  double lr = 0.01;
  double momentum = 0.9;
  std::string patch = "16,16,1";
  std::uint64_t seed = 1;
  bool no_rebalance = false;
  bool no_augment = false;
  std::size_t log_every = 100;
  int tune_trials = 0;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "Learning rate")->capture_default_str();
    app->add_option("--momentum", momentum, "Momentum coefficient")->capture_default_str();
    app->add_option("--patch", patch, "Output patch PX,PY,PZ")->capture_default_str();
    app->add_option("--seed", seed, "Seed for initialization and patch sampling")->capture_default_str();
    app->add_flag("--no-rebalance", no_rebalance, "Disable class-rebalancing loss weights");
    app->add_flag("--no-augment", no_augment, "Disable dihedral augmentation");
    app->add_option("--log-every", log_every, "Log record interval in updates")->capture_default_str();
    app->add_option("--tune-trials", tune_trials, "Timing trials per conv layer for direct/FFT choice (0 = direct)")
        ->capture_default_str();
  }

  TrainConfig config(std::size_t updates, bool deterministic) const {
    TrainConfig c;
    c.learning_rate = lr;
    c.momentum = momentum;
    c.updates = updates;
    c.patch = parse_vec3(patch, "--patch");
    c.seed = seed;
    c.rebalance = !no_rebalance;
    c.augment = !no_augment;
    c.log_every = log_every;
    c.deterministic = deterministic;
    c.tune_trials = tune_trials;
    c.validate();
    return c;
  }
};

class LogFile {
 public:
  LogFile(const fs::path& p, const TrainConfig& c, bool append) : out_(p, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw FormatError("cannot write log " + p.string());
    if (!append) out_ << config_line(c) << "\n# update loss pixel_error wallclock_s\n";
    out_ << std::setprecision(8);
  }
  void operator()(const LogRecord& r) {
    out_ << r.update << ' ' << r.loss << ' ' << r.pixel_error << ' ' << r.wallclock_s << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

StackMeta map_meta() {
  StackMeta m;
  m.dtype = DType::F32;
  m.role = VolumeRole::BoundaryMap;
  return m;
}

InputMap network_inputs(const Network& net, const Volume& image, const std::string& recursive_map) {
  const auto inputs = net.spec.inputs();
  InputMap m{{net.input_name(), image}};
  if (inputs.size() == 2) {
    if (recursive_map.empty())
      throw ConfigError("network has two inputs; pass the stage-1 map (padded to image dims) with --recursive-map");
    const std::string& other = net.spec.nodes[inputs[1]].name;
    Volume map = read_volume(recursive_map);
    if (map.dims() != image.dims())
      throw ShapeError("recursive map " + to_string(map.dims()) + " must match the image " + to_string(image.dims()) +
                       " (use infer --pad for stage-1 maps)");
    m.emplace(other, std::move(map));
  } else if (inputs.size() > 2) {
    throw ConfigError("networks with more than two inputs are not supported by the CLI");
  }
  return m;
}

// ---------------------------------------------------------------------------

int run_synth(const fs::path& out, std::uint64_t seed, const std::string& dims, std::size_t cells, std::size_t count,
              double z_blur, double noise, double z_weight) {
  fs::create_directories(out);
  for (std::size_t k = 0; k < count; ++k) {
    SynthParams p;
    p.seed = seed + k;
    p.dims = parse_vec3(dims, "--dims");
    p.n_cells = cells;
    p.z_blur = z_blur;
    p.noise_sd = noise;
    p.z_weight = z_weight;
    const SynthStack s = synth_generate(p);
    const std::string base = (out / ("stack" + std::to_string(k))).string();
    StackMeta im;
    im.role = VolumeRole::Image;
    write_volume(base + "_image", s.image, im);
    StackMeta lm;
    lm.role = VolumeRole::Labels;
    write_segmentation(base + "_truth", s.truth, lm);
    std::cout << base << ": " << to_string(p.dims) << ", " << cells << " cells\n";
  }
  return 0;
}

struct TrainArgs {
  std::string net, out, log, resume;
  std::vector<std::string> data;
  std::size_t updates = 1000;
  std::size_t checkpoint_every = 0;
  TrainFlags flags;
};

int run_train(const TrainArgs& a, bool deterministic) {
  TrainConfig cfg = a.flags.config(a.updates, deterministic);
  std::string spec_text;
  ParamState params;
  std::uint64_t start = 0;
  std::string rng;
  if (!a.resume.empty()) {
    Checkpoint c = load_checkpoint(a.resume);
    if (!c.has_momentum) throw FormatError(a.resume + " holds weights only; resuming needs momentum buffers");
    if (!a.net.empty() && read_text(a.net) != c.spec_text)
      throw SpecError("--net differs from the network embedded in " + a.resume);
    spec_text = c.spec_text;
    params = std::move(c.params);
    start = c.update;
    rng = c.rng_state;
  } else {
    if (a.net.empty()) throw UsageError("train needs --net (or --resume)");
    spec_text = read_text(a.net);
  }
  const NetworkSpec spec = parse_spec(spec_text);
  if (a.resume.empty()) params = init_params(spec, cfg.seed);
  if (start > a.updates) throw ConfigError("checkpoint is already at update " + std::to_string(start));

  Network net = Network::compile(spec);
  std::vector<TrainStack> stacks;
  for (const auto& p : load_pairs(a.data)) stacks.push_back(to_train_stack(p, net.input_name()));
  Trainer trainer(std::move(net), std::move(stacks), cfg, std::move(params));
  if (!a.resume.empty()) trainer.restore(start, rng);
  for (const auto& r : trainer.tune())
    if (r.timed) std::cerr << "tuned: " << to_string(r.choice) << " (direct " << r.direct_ms << " ms, fft " << r.fft_ms << " ms)\n";

  const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log") : fs::path(a.log);
  LogFile log(log_path, cfg, !a.resume.empty());
  std::size_t left = a.updates - start;
  const std::size_t chunk = a.checkpoint_every > 0 ? a.checkpoint_every : std::max<std::size_t>(left, 1);
  while (left > 0) {
    const std::size_t n = std::min(chunk, left);
    trainer.run(n, [&](const LogRecord& r) { log(r); });
    left -= n;
    save_checkpoint(a.out, spec_text, trainer.params(), trainer.update_count(), trainer.rng_state());
  }
  if (a.updates == start) save_checkpoint(a.out, spec_text, trainer.params(), trainer.update_count(), trainer.rng_state());
  std::cout << "trained to update " << trainer.update_count() << "; checkpoint " << a.out << ", log " << log_path.string()
            << "\n";
  return 0;
}

int run_infer(const std::string& ckpt, const std::string& image_path, const std::string& rec, const std::string& out,
              const std::string& tile, bool pad) {
  const Checkpoint c = load_checkpoint(ckpt);
  const Network net = Network::compile(parse_spec(c.spec_text));
  const Volume image = read_volume(image_path);
  Volume map = infer(net, c.params, network_inputs(net, image, rec), parse_vec3(tile, "--tile"));
  if (pad) map = pad_map(map, image.dims(), net.fov);
  if (image.voxel_size) map.voxel_size = image.voxel_size;
  write_volume(out, map, map_meta());
  std::cout << "map " << to_string(map.dims()) << " (fov " << to_string(net.fov) << ") -> " << raw_path(out).string()
            << "\n";
  return 0;
}

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> v;
  std::istringstream in(s);
  for (std::string tok; std::getline(in, tok, ',');) {
    try {
      v.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw UsageError(std::string(what) + ": bad number '" + tok + "'");
    }
  }
  if (v.empty()) throw UsageError(std::string(what) + ": empty list");
  return v;
}

std::vector<double> parse_range(const std::string& s, const char* what) {
  const auto c1 = s.find(':');
  const auto c2 = c1 == std::string::npos ? std::string::npos : s.find(':', c1 + 1);
  if (c2 == std::string::npos) throw UsageError(std::string(what) + ": expected lo:hi:step, got '" + s + "'");
  try {
    return linear_grid(std::stod(s.substr(0, c1)), std::stod(s.substr(c1 + 1, c2 - c1 - 1)), std::stod(s.substr(c2 + 1)));
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string(what) + ": " + e.what());
  }
}

struct EvalArgs {
  std::string map, truth, algo = "cc", grid = "0.05:0.95:0.05", low = "0.05,0.1,0.2,0.3", high = "0.5,0.7,0.9",
                             min_size = "0,10,50", out;
};

int run_eval(const EvalArgs& a) {
  const Volume map = read_volume(a.map);
  Segmentation truth = read_segmentation(a.truth);
  const Vec3 md = map.dims(), td = truth.dims();
  if (md != td) {
    // An unpadded map covers the centered valid region of the truth.
    for (int ax = 0; ax < 3; ++ax)
      if (md[ax] > td[ax] || (td[ax] - md[ax]) % 2 != 0)
        throw ShapeError("map " + to_string(md) + " is not a centered crop of truth " + to_string(td));
    truth = crop(truth, Window{Vec3{(td.x - md.x) / 2, (td.y - md.y) / 2, (td.z - md.z) / 2}, md});
  }
  std::vector<SegParams> grid;
  if (a.algo == "cc") {
    for (double t : parse_range(a.grid, "--grid")) grid.push_back(CcParams{t});
  } else if (a.algo == "ws") {
    for (double lo : parse_list(a.low, "--low"))
      for (double hi : parse_list(a.high, "--high"))
        for (double ms : parse_list(a.min_size, "--min-size"))
          if (lo < hi) grid.push_back(WsParams{lo, hi, std::size_t(ms)});
    if (grid.empty()) throw UsageError("watershed grid is empty (need some --low < --high)");
  } else {
    throw UsageError("--algo must be cc or ws");
  }
  const Volume labels = derive_boundary_labels(truth);
  const ThresholdResult pe = best_pixel_error(map, labels);
  const auto curve = rand_pr_curve(map, truth, grid);
  const BestRand best = best_rand_f(map, truth, grid);
  std::ostringstream os;
  os << std::setprecision(6);
  os << "# best_pixel_error " << pe.error << " at threshold " << pe.threshold << "\n";
  os << "# best_rand_f " << best.scores.f << " (split " << best.scores.split << ", merge " << best.scores.merge << ") at "
     << describe(best.params) << "\n";
  os << (a.algo == "cc" ? "# threshold,split,merge,f\n" : "# t_low,t_high,min_size,split,merge,f\n");
  os << format_curve(curve);
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream(a.out) << os.str();
    std::cout << "# best_pixel_error " << pe.error << "\n# best_rand_f " << best.scores.f << "\n";
  }
  return 0;
}

struct RecursiveArgs {
  std::string net1, net2, out;
  std::vector<std::string> data, extra;
  std::size_t updates1 = 1000, updates2 = 1000, extra1 = 0;
  std::string patch2 = "16,16,2", tile = "64,64,8";
  TrainFlags flags;
};

int run_recursive(const RecursiveArgs& a, bool deterministic) {
  const std::string text1 = read_text(a.net1), text2 = read_text(a.net2);
  RecursiveConfig cfg;
  cfg.stage1 = a.flags.config(a.updates1, deterministic);
  cfg.stage2 = a.flags.config(a.updates2, deterministic);
  cfg.stage2.patch = parse_vec3(a.patch2, "--patch2");
  cfg.stage2.seed = a.flags.seed + 1;
  cfg.stage1_extra_updates = a.extra1;
  cfg.infer_patch = parse_vec3(a.tile, "--tile");
  const auto pairs = load_pairs(a.data);
  const auto extra = a.extra.empty() ? std::vector<StackPair>{} : load_pairs(a.extra);
  const RecursiveResult r = recursive_pipeline(parse_spec(text1), parse_spec(text2), pairs, extra, cfg);

  const fs::path out(a.out);
  fs::create_directories(out);
  save_checkpoint(out / "stage1.ckpt", text1, r.params1, cfg.stage1.updates + cfg.stage1_extra_updates, "");
  save_checkpoint(out / "stage2.ckpt", text2, r.params2, cfg.stage2.updates, "");
  for (std::size_t k = 0; k < r.preliminary_maps.size(); ++k) {
    write_volume(out / ("preliminary" + std::to_string(k)), r.preliminary_maps[k], map_meta());
    write_volume(out / ("final" + std::to_string(k)), r.final_maps[k], map_meta());
  }
  auto dump = [&](const char* name, const TrainConfig& c, const std::vector<LogRecord>& log) {
    LogFile f(out / name, c, false);
    for (const auto& rec : log) f(rec);
  };
  dump("stage1.log", cfg.stage1, r.log1);
  dump("stage2.log", cfg.stage2, r.log2);
  std::cout << "preliminary maps fixed: " << (r.preliminary_digest_before == r.preliminary_digest_after ? "yes" : "NO")
            << "\noutputs in " << out.string() << "\n";
  return r.preliminary_digest_before == r.preliminary_digest_after ? 0 : 3;
}

int run_bench(const std::string& net_path, const std::string& shape, int trials) {
  const Network net = Network::compile(load_spec(net_path));
  const Vec3 input = shape.empty() ? net.fov + Vec3{15, 15, net.fov.z > 1 ? 3u : 0u} : parse_vec3(shape, "--shape");
  const auto dims = node_dims(net.spec, input);
  std::cout << "# input " << to_string(input) << ", trials " << trials << "\n";
  std::cout << "node in_maps out_maps in_dims kernel sparsity direct_ms fft_ms choice max_rel_diff\n";
  for (std::size_t i = 0; i < net.spec.nodes.size(); ++i) {
    const auto& node = net.spec.nodes[i];
    if (node.kind != NodeKind::Conv) continue;
    const std::size_t up = net.spec.index_of(node.inputs.front());
    const TuneReport r = tune_layer(dims[up], node.filter, net.plan.taps[i], trials, net.maps[up], node.out_maps);
    std::cout << node.name << ' ' << net.maps[up] << ' ' << node.out_maps << ' ' << to_string(dims[up]) << ' '
              << to_string(node.filter) << ' ' << to_string(net.plan.taps[i]) << ' ' << r.direct_ms << ' ' << r.fft_ms
              << ' ' << to_string(r.choice) << ' ' << r.max_rel_diff << "\n";
  }
  return 0;
}

void write_pgm(const fs::path& p, const Volume& v, std::size_t z) {
  float lo = v(0, 0, z), hi = lo;
  for (std::size_t y = 0; y < v.dims().y; ++y)
    for (std::size_t x = 0; x < v.dims().x; ++x) {
      lo = std::min(lo, v(x, y, z));
      hi = std::max(hi, v(x, y, z));
    }
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << "P5\n" << v.dims().x << ' ' << v.dims().y << "\n255\n";
  const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
  for (std::size_t y = 0; y < v.dims().y; ++y)
    for (std::size_t x = 0; x < v.dims().x; ++x) out.put(char(std::lround((v(x, y, z) - lo) * scale)));
}

int run_inspect(const std::string& ckpt, const std::string& image_path, const std::string& rec, const std::string& node,
                const fs::path& out) {
  const Checkpoint c = load_checkpoint(ckpt);
  const Network net = Network::compile(parse_spec(c.spec_text));
  if (!net.spec.find(node)) throw SpecError("no node named '" + node + "' in the checkpoint's network");
  const Volume image = read_volume(image_path);
  const Activations acts = forward(net, c.params, network_inputs(net, image, rec), true);
  const auto& maps = acts.node(net, node);
  fs::create_directories(out);
  std::size_t files = 0;
  for (std::size_t m = 0; m < maps.size(); ++m)
    for (std::size_t z = 0; z < maps[m].dims().z; ++z, ++files)
      write_pgm(out / (node + "_m" + std::to_string(m) + "_z" + std::to_string(z) + ".pgm"), maps[m], z);
  std::cout << node << ": " << maps.size() << " maps of " << to_string(maps.front().dims()) << ", " << files
            << " slices in " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense-output 3D ConvNet boundary detection"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  std::size_t threads = 0;
  bool deterministic = false;
  app.add_option("--threads", threads, "Worker threads (0 = all available cores)")->capture_default_str();
  app.add_flag("--deterministic", deterministic, "Force direct convolution so runs are bit-reproducible");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate synthetic image/label stacks");
  std::string synth_out, synth_dims = "96,96,16";
  std::uint64_t synth_seed = 1;
  std::size_t synth_cells = 32, synth_count = 1;
  double z_blur = 1.0, noise = 0.2, z_weight = 0.25;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Seed of the first stack (stack k uses seed + k)")->capture_default_str();
  synth->add_option("--dims", synth_dims, "Stack dims X,Y,Z")->capture_default_str();
  synth->add_option("--cells", synth_cells, "Cells per stack")->capture_default_str();
  synth->add_option("--count", synth_count, "Number of stacks")->capture_default_str();
  synth->add_option("--z-blur", z_blur, "Max per-slice in-plane shift in pixels")->capture_default_str();
  synth->add_option("--noise", noise, "Additive Gaussian noise sd")->capture_default_str();
  synth->add_option("--z-weight", z_weight, "Voronoi distance scale along z (< 1 elongates cells)")->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network on image/truth stacks");
  TrainArgs ta;
  train_cmd->add_option("--net", ta.net, "Network spec file");
  train_cmd->add_option("--data", ta.data, "Directories of <name>_image/<name>_truth volumes")->required();
  train_cmd->add_option("--updates", ta.updates, "Total update count to reach")->capture_default_str();
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();
  train_cmd->add_option("--log", ta.log, "Training log path (default: <out>.log)");
  train_cmd->add_option("--resume", ta.resume, "Continue from this checkpoint (log is appended)");
  train_cmd->add_option("--checkpoint-every", ta.checkpoint_every, "Also checkpoint every N updates (0 = at end)")
      ->capture_default_str();
  ta.flags.add(train_cmd);

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "Compute a boundary map");
  std::string ckpt, image, rec_map, infer_out, tile = "64,64,8";
  bool pad = false;
  infer_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  infer_cmd->add_option("--image", image, "Image volume")->required();
  infer_cmd->add_option("--recursive-map", rec_map, "Stage-1 map at image dims, for two-input networks");
  infer_cmd->add_option("--out", infer_out, "Output volume")->required();
  infer_cmd->add_option("--tile", tile, "Output tile X,Y,Z")->capture_default_str();
  infer_cmd->add_flag("--pad", pad, "Pad the map to image dims with 0.5");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score a boundary map against a segmentation");
  EvalArgs ea;
  eval_cmd->add_option("--map", ea.map, "Boundary map (image dims, or the centered valid region)")->required();
  eval_cmd->add_option("--truth", ea.truth, "Ground-truth segmentation")->required();
  eval_cmd->add_option("--algo", ea.algo, "cc (connected components) or ws (watershed)")
      ->check(CLI::IsMember({"cc", "ws"}))
      ->capture_default_str();
  eval_cmd->add_option("--grid", ea.grid, "cc thresholds lo:hi:step")->capture_default_str();
  eval_cmd->add_option("--low", ea.low, "ws seed thresholds, comma list")->capture_default_str();
  eval_cmd->add_option("--high", ea.high, "ws flood limits, comma list")->capture_default_str();
  eval_cmd->add_option("--min-size", ea.min_size, "ws minimum basin sizes, comma list")->capture_default_str();
  eval_cmd->add_option("--out", ea.out, "Write the curve here instead of stdout");

  // recursive
  auto* rec_cmd = app.add_subcommand("recursive", "Two-stage training with a fixed stage-1 boundary map");
  RecursiveArgs ra;
  rec_cmd->add_option("--net1", ra.net1, "Stage-1 spec")->required();
  rec_cmd->add_option("--net2", ra.net2, "Stage-2 spec (two inputs)")->required();
  rec_cmd->add_option("--data", ra.data, "Training data directories")->required();
  rec_cmd->add_option("--extra-data", ra.extra, "Additional directories used only by stage 2");
  rec_cmd->add_option("--updates1", ra.updates1, "Stage-1 updates")->capture_default_str();
  rec_cmd->add_option("--updates2", ra.updates2, "Stage-2 updates")->capture_default_str();
  rec_cmd->add_option("--extra-updates1", ra.extra1, "Stage-1 updates after the hand-over")->capture_default_str();
  rec_cmd->add_option("--patch2", ra.patch2, "Stage-2 output patch")->capture_default_str();
  rec_cmd->add_option("--tile", ra.tile, "Inference tile for preliminary maps")->capture_default_str();
  rec_cmd->add_option("--out", ra.out, "Output directory")->required();
  ra.flags.add(rec_cmd);

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Time direct vs FFT convolution per layer");
  std::string bench_net, bench_shape;
  int bench_trials = 3;
  bench_cmd->add_option("--net", bench_net, "Network spec")->required();
  bench_cmd->add_option("--shape", bench_shape, "Input dims X,Y,Z (default: fov + 15,15,z)");
  bench_cmd->add_option("--trials", bench_trials, "Timing repetitions per method")->capture_default_str();

  // inspect
  auto* inspect_cmd = app.add_subcommand("inspect", "Dump a node's feature maps as PGM slices");
  std::string node, inspect_out;
  inspect_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  inspect_cmd->add_option("--image", image, "Image volume")->required();
  inspect_cmd->add_option("--recursive-map", rec_map, "Stage-1 map, for two-input networks");
  inspect_cmd->add_option("--node", node, "Node name")->required();
  inspect_cmd->add_option("--out", inspect_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return e.get_exit_code() == 0 ? app.exit(e) : (app.exit(e), 1);
  }

  try {
    set_thread_limit(threads);
    if (*synth) return run_synth(synth_out, synth_seed, synth_dims, synth_cells, synth_count, z_blur, noise, z_weight);
    if (*train_cmd) return run_train(ta, deterministic);
    if (*infer_cmd) return run_infer(ckpt, image, rec_map, infer_out, tile, pad);
    if (*eval_cmd) return run_eval(ea);
    if (*rec_cmd) return run_recursive(ra, deterministic);
    if (*bench_cmd) return run_bench(bench_net, bench_shape, bench_trials);
    if (*inspect_cmd) return run_inspect(ckpt, image, rec_map, node, inspect_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
