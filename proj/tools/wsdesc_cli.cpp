#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "wsdesc/wsdesc.hpp"

namespace fs = std::filesystem;
using namespace wsdesc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

/// Bad flag values discovered after parsing; reported with the usage exit code.
struct UsageError : Error {
  using Error::Error;
};

struct Shared {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string config;
  bool json = false;
};

void add_shared(CLI::App* cmd, Shared& s) {
  cmd->add_option("--seed", s.seed, "Random seed; fixes every stochastic choice");
  cmd->add_option("--threads", s.threads, "Worker threads for per-keypoint work")->check(CLI::PositiveNumber);
  cmd->add_option("--config", s.config,
                  "Flat key=value file; keys are flag names ('_' or '-'), later command-line flags override");
  cmd->add_flag("--json", s.json, "Emit machine-readable JSON on stdout");
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

/// Command-line spelling of a config key.
std::string flag_name(std::string key) {
  if (key == "h") return "--resolution";
  if (key == "n") return "--descriptor-dim";
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

/// Rewrites `--config FILE` into `--key=value` tokens placed right after the
/// subcommand, so flags given on the command line still win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  for (std::size_t i = 1; i < args.size(); ++i) {
    std::string path;
    std::size_t used = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      used = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      used = 1;
    } else {
      continue;
    }
    std::ifstream in(path);
    if (!in) throw ParseError(path, 0, "cannot open config file");
    std::vector<std::string> tokens;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      auto trim = [](const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(path, lineno, "expected key=value");
      tokens.push_back(flag_name(trim(line.substr(0, eq))) + "=" + trim(line.substr(eq + 1)));
    }
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + used));
    args.insert(args.begin() + 2, tokens.begin(), tokens.end());
    break;
  }
  return args;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string in, out;
  std::size_t count = 8;
  std::size_t shapes = 64;
  std::size_t points = 1024;
  double radius = 1.0;
  PairGenConfig gen;
};

int run_synth(const SynthArgs& a, const Shared& s) {
  std::vector<PointCloud> sources;
  if (!a.in.empty()) {
    if (!fs::is_directory(a.in)) throw InvalidArgument("--in is not a directory: " + a.in);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.in)) {
      const auto ext = io::detail::lower_extension(e.path());
      if (e.is_regular_file() && (ext == ".ply" || ext == ".off" || ext == ".xyz")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    bool failed = false;
    for (const auto& f : files) {
      try {
        auto c = io::load_point_cloud(f);
        c.id = f.stem().string();
        sources.push_back(std::move(c));
      } catch (const Error& e) {
        std::cerr << "error: " << f.string() << ": " << e.what() << "\n";
        failed = true;
      }
    }
    if (failed) return kExitRuntime;
    if (sources.empty()) throw InvalidArgument("no .ply/.off/.xyz files in " + a.in);
  } else {
    for (std::size_t i = 0; i < a.shapes; ++i) {
      sources.push_back(make_procedural_shape(detail::mix_seed(s.seed, 1000 + i), a.points, a.radius));
    }
  }
  fs::create_directories(a.out);
  std::ofstream manifest = open_output(fs::path(a.out) / "manifest.csv");
  manifest << "pair_id,shape,overlap,seed\n";
  manifest.precision(17);
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < a.count; ++i) {
    auto cfg = a.gen;
    cfg.seed = detail::mix_seed(s.seed, i);
    const auto& shape = sources[i % sources.size()];
    const auto pair = make_pair(shape, cfg);
    const auto dir = save_pair_directory(pair, a.out, i);
    const auto id = dir.filename().string();
    manifest << id << ',' << shape.id << ',' << pair.overlap << ',' << cfg.seed << '\n';
    rows.push_back({{"pair_id", id}, {"shape", shape.id}, {"overlap", pair.overlap}, {"seed", cfg.seed}});
  }
  if (s.json) std::cout << nlohmann::json{{"pairs", rows}}.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string pairs, out = "model.ckpt", log = "train_log.csv", init;
  std::map<std::string, std::string> values;  // key -> text for the TrainConfig options
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;
  bool quiet = false;
};

std::vector<PairSample> load_pairs(const std::string& root) {
  std::vector<PairSample> out;
  for (const auto& dir : list_pair_directories(root)) out.push_back(load_pair_directory(dir));
  if (out.empty()) throw InvalidArgument("no pair_* directories under " + root);
  return out;
}

int run_train(TrainArgs& a, const Shared& s) {
  TrainConfig cfg;
  try {
    for (const auto& [key, opt] : a.options) {
      if (opt->count() == 0) continue;
      if (a.flags.count(key)) {
        cfg.set(key, a.flags[key] ? "true" : "false");
      } else {
        cfg.set(key, a.values[key]);
      }
    }
    cfg.seed = s.seed;
    cfg.threads = s.threads;
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const auto dataset = load_pairs(a.pairs);
  NetworkParams params;
  if (!a.init.empty()) {
    const auto expected = cfg.network();
    params = load_checkpoint(a.init, &expected);
  } else {
    params = init_network<float>(cfg.seed, cfg.network());
  }
  std::ofstream log = open_output(a.log);
  write_train_log_header(log);
  TrainOptions opts;
  opts.checkpoint_path = a.out;
  opts.on_record = [&](const TrainLogRecord& r) {
    write_train_log_row(log, r);
    if (!a.quiet && (r.step % 100 == 0 || r.step == cfg.steps)) {
      std::cerr << "step " << r.step << " l_pcr " << r.l_pcr << " support " << r.support << "\n";
    }
  };
  opts.on_skip = [&](std::size_t step, const std::string& why) {
    if (!a.quiet) std::cerr << "step " << step << " skipped: " << why << "\n";
  };
  const auto result = train(dataset, std::move(params), cfg, opts);
  if (s.json) {
    nlohmann::json j{{"steps", cfg.steps},
                     {"updates", result.updates},
                     {"skipped", result.skipped_steps},
                     {"support", result.params.support()},
                     {"checkpoint", a.out}};
    if (!result.log.empty()) j["final_l_pcr"] = result.log.back().l_pcr;
    std::cout << j.dump(2) << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractArgs {
  std::string ckpt, cloud, out, keypoints, dump_voxels;
  std::size_t num_kp = 128;
  long long fps_start = -1;
};

std::vector<std::size_t> read_indices(const fs::path& path, std::size_t limit) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open keypoint file");
  std::vector<std::size_t> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    long long v = -1;
    std::string rest;
    if (!(ls >> v) || (ls >> rest) || v < 0 || static_cast<std::size_t>(v) >= limit) {
      throw ParseError(path.string(), lineno, "expected a point index below " + std::to_string(limit));
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

int run_extract(const ExtractArgs& a, const Shared& s) {
  const auto params = load_checkpoint(a.ckpt);
  auto cloud = io::load_point_cloud(a.cloud);
  const SpatialIndex index(cloud);
  std::vector<std::size_t> kps;
  if (!a.keypoints.empty()) {
    kps = read_indices(a.keypoints, cloud.size());
  } else {
    const std::size_t k = std::min(a.num_kp, cloud.size());
    kps = a.fps_start >= 0 ? farthest_point_sample_from(cloud, k, static_cast<std::size_t>(a.fps_start))
                           : farthest_point_sample(cloud, k, s.seed);
  }
  const auto d = extract_descriptors(cloud, index, kps, params, s.threads);
  save_descriptors(a.out, d);
  if (!a.dump_voxels.empty()) {
    fs::create_directories(a.dump_voxels);
    for (auto kp : d.keypoints) {
      const auto frame = estimate_lrf(cloud, index, kp, params.config.r_lrf);
      const auto grid = voxelize(cloud, &index, keypoint_grid_spec(params.config, frame, params.support()));
      std::ofstream out = open_output(fs::path(a.dump_voxels) / ("kp_" + std::to_string(kp) + ".txt"));
      dump_voxels(grid, out);
    }
  }
  if (s.json) {
    std::cout << nlohmann::json{{"descriptors", a.out},
                                {"count", d.keypoints.size()},
                                {"dim", params.config.descriptor_dim},
                                {"skipped", d.skipped}}
                     .dump(2)
              << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// register

struct RegisterArgs {
  std::string ckpt, src, dst, out, dump_corrs;
  std::size_t kp = 128;
  RansacConfig ransac;
  bool no_refine = false;
  double sigma_d = kDefaultSigmaD;
};

void write_corrs(const PairRegistration& reg, const PointCloud& p, const PointCloud& q, double sigma_d,
                 const fs::path& path) {
  auto c = match_descriptors(reg.source_descriptors, reg.target_descriptors);
  std::vector<Vec3> kp_p, kp_q;
  for (auto i : reg.source_keypoints) kp_p.push_back(p.points[i]);
  for (auto j : reg.target_keypoints) kp_q.push_back(q.points[j]);
  if (c.size() >= 2) {
    try {
      apply_spectral_weights(c, kp_p, kp_q, sigma_d);
    } catch (const DegenerateSpectrum&) {
      c.w_sm.assign(c.size(), 0.0);
    }
  }
  c = confidence(std::move(c));
  std::ofstream out = open_output(path);
  dump_correspondences(c, out);
}

int run_register(RegisterArgs& a, const Shared& s) {
  const auto params = load_checkpoint(a.ckpt);
  const auto p = io::load_point_cloud(a.src);
  const auto q = io::load_point_cloud(a.dst);
  a.ransac.seed = s.seed;
  a.ransac.refine = !a.no_refine;
  const std::size_t k = std::min({a.kp, p.size(), q.size()});
  const auto reg = register_pair(p, q, params, k, a.ransac, s.threads);
  if (!a.dump_corrs.empty()) write_corrs(reg, p, q, a.sigma_d, a.dump_corrs);
  const std::string text = s.json ? registration_json(reg.result).dump(2) + "\n" : format_registration(reg.result);
  if (!a.out.empty()) {
    std::ofstream out = open_output(a.out);
    out << text;
  }
  std::cout << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string pairs, ckpt, out;
  bool random_init = false;
  EvaluationConfig eval;
};

int run_evaluate(EvaluateArgs& a, const Shared& s) {
  NetworkParams params;
  if (a.random_init) {
    params = init_network<float>(s.seed, NetworkConfig{});
  } else {
    if (a.ckpt.empty()) throw InvalidArgument("evaluate needs --ckpt or --random-init");
    params = load_checkpoint(a.ckpt);
  }
  a.eval.ransac.seed = s.seed;
  a.eval.threads = s.threads;
  std::vector<PairEvaluation> rows;
  for (const auto& dir : list_pair_directories(a.pairs)) {
    rows.push_back(evaluate_pair(load_pair_directory(dir), dir.filename().string(), params, a.eval));
  }
  const auto summary = summarize(rows, a.eval.tau2, a.eval.recall_threshold);
  std::ostringstream text;
  if (s.json) {
    text << evaluation_json(rows, summary).dump(2) << "\n";
  } else {
    write_evaluation_csv(rows, summary, text);
  }
  if (!a.out.empty()) {
    std::ofstream out = open_output(a.out);
    out << text.str();
  }
  std::cout << text.str();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

int run_gradcheck(const std::string& mode, const Shared& s) {
  const auto results = gradsuite::run_all(s.seed, mode == "full");
  bool ok = true;
  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream table;
  table << std::left << std::setw(24) << "suite" << std::setw(16) << "max_rel_error" << std::setw(12) << "tolerance"
        << std::setw(8) << "coords" << "result\n";
  for (const auto& r : results) {
    ok = ok && r.passed();
    table << std::left << std::setw(24) << r.name << std::setw(16) << r.max_rel_error << std::setw(12) << r.tolerance
          << std::setw(8) << r.coordinates << (r.passed() ? "PASS" : "FAIL") << "\n";
    rows.push_back({{"suite", r.name},
                    {"max_rel_error", r.max_rel_error},
                    {"tolerance", r.tolerance},
                    {"coordinates", r.coordinates},
                    {"passed", r.passed()}});
  }
  if (s.json) {
    std::cout << nlohmann::json{{"mode", mode}, {"suites", rows}, {"passed", ok}}.dump(2) << "\n";
  } else {
    std::cout << table.str();
  }
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised local 3D descriptors: data synthesis, training, extraction, registration"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  Shared shared;

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate source/target pair directories and a manifest");
  add_shared(c_synth, shared);
  c_synth->add_option("--in", synth.in, "Directory of .ply/.off/.xyz shapes (procedural shapes when empty)");
  c_synth->add_option("--out", synth.out, "Output directory for pair_NNNN folders")->required();
  c_synth->add_option("--count", synth.count, "Number of pairs")->check(CLI::PositiveNumber);
  c_synth->add_option("--shapes", synth.shapes, "Procedural shapes to generate without --in")
      ->check(CLI::PositiveNumber);
  c_synth->add_option("--points", synth.points, "Points per procedural shape")->check(CLI::PositiveNumber);
  c_synth->add_option("--radius", synth.radius, "Procedural shape radius")->check(CLI::PositiveNumber);
  c_synth->add_option("--max-rot", synth.gen.max_rot_deg, "Maximum rotation per axis, degrees");
  c_synth->add_option("--trans", synth.gen.trans_range, "Translation range per axis");
  c_synth->add_option("--crop-k", synth.gen.crop_k, "Points kept in each cropped cloud");
  c_synth->add_option("--noise-std", synth.gen.noise_std, "Gaussian noise standard deviation");
  c_synth->add_option("--noise-clip", synth.gen.noise_clip, "Noise clamp per component");

  TrainArgs trn;
  auto* c_train = app.add_subcommand("train", "Train a descriptor network on pair directories");
  add_shared(c_train, shared);
  c_train->add_option("--pairs", trn.pairs, "Directory of pair_NNNN folders")->required();
  c_train->add_option("--out", trn.out, "Checkpoint path (written periodically and at the end)");
  c_train->add_option("--log", trn.log, "Training log CSV");
  c_train->add_option("--init", trn.init, "Start from this checkpoint instead of a seeded initialization");
  c_train->add_flag("--quiet", trn.quiet, "No progress lines on stderr");
  const std::map<std::string, std::string> help{
      {"steps", "Optimizer steps"},
      {"kp_per_cloud", "FPS keypoints per cloud in each step"},
      {"lr", "Adam learning rate"},
      {"lambda_o", "Weight of the orthogonality loss"},
      {"lambda_c", "Weight of the cycle-consistency loss"},
      {"sigma", "Sharpness of the point-in-voxel sigmoid"},
      {"r_lrf", "Local reference frame radius"},
      {"h", "Voxel grid resolution per axis"},
      {"n", "Descriptor dimension"},
      {"channels", "Conv layer widths, comma separated"},
      {"strides", "Conv layer strides, one per width"},
      {"cutoff", "Skip points whose in-voxel probability is below this"},
      {"sigma_d", "Spectral compatibility scale"},
      {"power_iters", "Power iterations for spectral weights"},
      {"damping", "Ridge added to the weighted normal equations"},
      {"checkpoint_every", "Write the checkpoint every this many steps"},
      {"fixed_support", "Freeze the local support size"},
      {"no_wf", "Drop descriptor-similarity weights"},
      {"no_wsm", "Drop spectral-matching weights"},
      {"no_lo", "Drop the orthogonality loss"},
      {"no_lc", "Drop the cycle-consistency loss"},
      {"soft_positions", "Use softmax-blended target positions instead of hard matches"},
  };
  for (const auto& [key, value] : TrainConfig{}.to_entries()) {
    if (key == "seed" || key == "threads") continue;
    const std::string flag = flag_name(key);
    if (value == "true" || value == "false") {
      trn.flags[key] = false;
      trn.options[key] = c_train->add_flag(flag, trn.flags[key], help.at(key));
    } else {
      trn.values[key] = value;
      trn.options[key] = c_train->add_option(flag, trn.values[key], help.at(key));
    }
  }

  ExtractArgs ext;
  auto* c_extract = app.add_subcommand("extract", "Compute descriptors at keypoints of a cloud");
  add_shared(c_extract, shared);
  c_extract->add_option("--ckpt", ext.ckpt, "Checkpoint")->required();
  c_extract->add_option("--cloud", ext.cloud, "Point cloud (.ply/.off/.xyz)")->required();
  c_extract->add_option("--out", ext.out, "Descriptor file; keypoints go to <out>.kp.txt")->required();
  c_extract->add_option("--keypoints", ext.keypoints, "Text file of point indices, one per line (FPS when empty)");
  c_extract->add_option("--num-kp", ext.num_kp, "FPS keypoint count")->check(CLI::PositiveNumber);
  c_extract->add_option("--fps-start", ext.fps_start, "Fixed FPS start index (-1 draws it from --seed)");
  c_extract->add_option("--dump-voxels", ext.dump_voxels, "Directory for per-keypoint 'h a b c value' grid dumps");

  RegisterArgs reg;
  auto* c_register = app.add_subcommand("register", "Estimate the rigid transform between two clouds");
  add_shared(c_register, shared);
  c_register->add_option("--ckpt", reg.ckpt, "Checkpoint")->required();
  c_register->add_option("--src", reg.src, "Source cloud")->required();
  c_register->add_option("--dst", reg.dst, "Target cloud")->required();
  c_register->add_option("--out", reg.out, "Also write the report to this file");
  c_register->add_option("--kp", reg.kp, "FPS keypoints per cloud")->check(CLI::PositiveNumber);
  c_register->add_option("--inlier-tau", reg.ransac.inlier_tau, "RANSAC inlier distance");
  c_register->add_option("--max-iters", reg.ransac.max_iters, "RANSAC iteration cap");
  c_register->add_option("--confidence", reg.ransac.confidence, "RANSAC early-stop confidence");
  c_register->add_flag("--no-refine", reg.no_refine, "Skip the inlier refit");
  c_register->add_option("--sigma-d", reg.sigma_d, "Spectral compatibility scale for --dump-corrs");
  c_register->add_option("--dump-corrs", reg.dump_corrs, "Write 'i j w_f w_sm w' correspondence lines here");

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Register every pair of a directory and report metrics");
  add_shared(c_eval, shared);
  c_eval->add_option("--pairs", ev.pairs, "Directory of pair_NNNN folders")->required();
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint");
  c_eval->add_flag("--random-init", ev.random_init, "Evaluate a seeded untrained network instead of --ckpt");
  c_eval->add_option("--out", ev.out, "Also write the report to this file");
  c_eval->add_option("--kp", ev.eval.kp_count, "FPS keypoints per cloud")->check(CLI::PositiveNumber);
  c_eval->add_option("--tau1", ev.eval.tau1, "Inlier distance for IR");
  c_eval->add_option("--tau2", ev.eval.tau2, "IR threshold for feature-match recall");
  c_eval->add_option("--threshold", ev.eval.recall_threshold, "RMSE threshold for registration recall");
  c_eval->add_option("--inlier-tau", ev.eval.ransac.inlier_tau, "RANSAC inlier distance");
  c_eval->add_option("--max-iters", ev.eval.ransac.max_iters, "RANSAC iteration cap");

  std::string mode = "quick";
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable stage");
  add_shared(c_grad, shared);
  c_grad->add_option("--mode", mode, "quick or full")->check(CLI::IsMember({"quick", "full"}));

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config(std::move(args));
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (c_synth->parsed()) return run_synth(synth, shared);
    if (c_train->parsed()) return run_train(trn, shared);
    if (c_extract->parsed()) return run_extract(ext, shared);
    if (c_register->parsed()) return run_register(reg, shared);
    if (c_eval->parsed()) return run_evaluate(ev, shared);
    if (c_grad->parsed()) return run_gradcheck(mode, shared);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
