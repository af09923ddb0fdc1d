#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wsdesc/alignment.hpp"
#include "wsdesc/autodiff.hpp"
#include "wsdesc/datagen.hpp"
#include "wsdesc/descriptor.hpp"
#include "wsdesc/lrf.hpp"
#include "wsdesc/matching.hpp"
#include "wsdesc/parallel.hpp"
#include "wsdesc/spatial_index.hpp"
#include "wsdesc/voxelizer.hpp"

namespace wsdesc {

struct TrainConfig {
  std::size_t steps = 16000;
  std::size_t kp_per_cloud = 128;
  double lr = 1e-3;
  double lambda_o = 1.0;
  double lambda_c = 1.0;
  double sigma = kDefaultSharpness;
  double r_lrf = kDefaultLrfRadius;
  int h = kDefaultResolution;
  int n = kDefaultDescriptorDim;
  std::vector<int> channels{32, 32, 64, 64, 128, 128};
  std::vector<int> strides{1, 1, 2, 1, 2, 1};
  double cutoff = kDefaultCutoff;
  double sigma_d = kDefaultSigmaD;
  int power_iters = kDefaultPowerIters;
  double damping = kDefaultDamping;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 500;
  std::size_t threads = 1;
  bool fixed_support = false;
  bool no_wf = false;
  bool no_wsm = false;
  bool no_lo = false;
  bool no_lc = false;
  bool soft_positions = false;

  double effective_lambda_o() const { return no_lo ? 0.0 : lambda_o; }
  double effective_lambda_c() const { return no_lc ? 0.0 : lambda_c; }

  NetworkConfig network() const {
    NetworkConfig c;
    c.resolution = h;
    c.descriptor_dim = n;
    c.channels = channels;
    c.strides = strides;
    c.r_lrf = r_lrf;
    c.sharpness = sigma;
    c.cutoff = cutoff;
    return c;
  }

  void validate() const {
    if (steps < 1) throw InvalidArgument("steps must be >= 1");
    if (kp_per_cloud < 4) throw InvalidArgument("kp_per_cloud must be >= 4");
    if (!(lr > 0.0) || !(sigma > 0.0) || !(r_lrf > 0.0) || !(sigma_d > 0.0)) {
      throw InvalidArgument("lr, sigma, r_lrf and sigma_d must be positive");
    }
    if (!(lambda_o >= 0.0) || !(lambda_c >= 0.0)) throw InvalidArgument("loss weights must be non-negative");
    if (power_iters < 1) throw InvalidArgument("power_iters must be >= 1");
    if (!(damping >= 0.0)) throw InvalidArgument("damping must be non-negative");
    if (checkpoint_every < 1) throw InvalidArgument("checkpoint_every must be >= 1");
    network().validate();
  }

  /// Sets one key from its text value.
  void set(const std::string& key, const std::string& value) {
    auto as_size = [&] { return static_cast<std::size_t>(std::stoull(value)); };
    auto as_bool = [&] {
      if (value == "1" || value == "true") return true;
      if (value == "0" || value == "false") return false;
      throw InvalidArgument("boolean expected for " + key + ": " + value);
    };
    auto as_ints = [&] {
      std::vector<int> out;
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
      return out;
    };
    try {
      if (key == "steps") steps = as_size();
      else if (key == "kp_per_cloud") kp_per_cloud = as_size();
      else if (key == "lr") lr = std::stod(value);
      else if (key == "lambda_o") lambda_o = std::stod(value);
      else if (key == "lambda_c") lambda_c = std::stod(value);
      else if (key == "sigma") sigma = std::stod(value);
      else if (key == "r_lrf") r_lrf = std::stod(value);
      else if (key == "h") h = std::stoi(value);
      else if (key == "n") n = std::stoi(value);
      else if (key == "channels") channels = as_ints();
      else if (key == "strides") strides = as_ints();
      else if (key == "cutoff") cutoff = std::stod(value);
      else if (key == "sigma_d") sigma_d = std::stod(value);
      else if (key == "power_iters") power_iters = std::stoi(value);
      else if (key == "damping") damping = std::stod(value);
      else if (key == "seed") seed = std::stoull(value);
      else if (key == "checkpoint_every") checkpoint_every = as_size();
      else if (key == "threads") threads = as_size();
      else if (key == "fixed_support") fixed_support = as_bool();
      else if (key == "no_wf") no_wf = as_bool();
      else if (key == "no_wsm") no_wsm = as_bool();
      else if (key == "no_lo") no_lo = as_bool();
      else if (key == "no_lc") no_lc = as_bool();
      else if (key == "soft_positions") soft_positions = as_bool();
      else throw InvalidArgument("unknown config key: " + key);
    } catch (const std::logic_error&) {
      throw InvalidArgument("bad value for " + key + ": " + value);
    }
  }

  /// Every key with its current value, in a form set() accepts.
  std::vector<std::pair<std::string, std::string>> to_entries() const {
    auto num = [](double v) {
      std::ostringstream os;
      os << v;
      return os.str();
    };
    auto ints = [](const std::vector<int>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
    return {{"steps", std::to_string(steps)},
            {"kp_per_cloud", std::to_string(kp_per_cloud)},
            {"lr", num(lr)},
            {"lambda_o", num(lambda_o)},
            {"lambda_c", num(lambda_c)},
            {"sigma", num(sigma)},
            {"r_lrf", num(r_lrf)},
            {"h", std::to_string(h)},
            {"n", std::to_string(n)},
            {"channels", ints(channels)},
            {"strides", ints(strides)},
            {"cutoff", num(cutoff)},
            {"sigma_d", num(sigma_d)},
            {"power_iters", std::to_string(power_iters)},
            {"damping", num(damping)},
            {"seed", std::to_string(seed)},
            {"checkpoint_every", std::to_string(checkpoint_every)},
            {"threads", std::to_string(threads)},
            {"fixed_support", flag(fixed_support)},
            {"no_wf", flag(no_wf)},
            {"no_wsm", flag(no_wsm)},
            {"no_lo", flag(no_lo)},
            {"no_lc", flag(no_lc)},
            {"soft_positions", flag(soft_positions)}};
  }

  /// Flat `key = value` lines; '#' starts a comment.
  void parse(std::istream& in, const std::string& origin = "<config>") {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(origin, lineno, "expected key=value");
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      try {
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const InvalidArgument& e) {
        throw ParseError(origin, lineno, e.what());
      }
    }
  }
};

struct TrainLogRecord {
  std::size_t step = 0;
  double l_pcr = 0.0;
  double l_o = 0.0;
  double l_c = 0.0;
  double support = 0.0;
  double seconds = 0.0;
};

inline void write_train_log_header(std::ostream& out) { out << "step,l_pcr,l_o,l_c,support,seconds\n"; }

inline void write_train_log_row(std::ostream& out, const TrainLogRecord& r) {
  const auto old = out.precision(9);
  out << r.step << ',' << r.l_pcr << ',' << r.l_o << ',' << r.l_c << ',' << r.support << ',' << r.seconds << '\n';
  out.precision(old);
}

template <typename T>
struct StepResult {
  bool skipped = false;
  std::string skip_reason;
  LossReport loss;
  std::vector<std::vector<T>> grads;  // aligned with params.tensors()
  std::size_t source_keypoints = 0;
  std::size_t target_keypoints = 0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Per-keypoint forward state kept alive until the seeded backward.
template <typename T>
struct KeypointPass {
  std::size_t point = 0;
  VoxelGridSpec spec;
  ad::Tape<T> tape;
  NetworkParamsT<T> params;  // aliases with private gradient buffers
  ad::Tensor<T> grid;
  ad::Tensor<T> descriptor;
};

template <typename T>
struct SidePasses {
  std::vector<std::unique_ptr<KeypointPass<T>>> passes;  // only keypoints with a valid frame
  std::vector<Vec3> positions;
};

template <typename T>
SidePasses<T> forward_side(const PointCloud& cloud, const SpatialIndex& index, const std::vector<std::size_t>& kps,
                           const NetworkParamsT<T>& params, const TrainConfig& cfg, bool need_grad) {
  std::vector<std::unique_ptr<KeypointPass<T>>> slots(kps.size());
  const double support = params.support();
  parallel_for(kps.size(), cfg.threads, [&](std::size_t i) {
    LrfFrame frame;
    try {
      frame = estimate_lrf(cloud, index, kps[i], params.config.r_lrf);
    } catch (const DegeneratePatch&) {
      return;
    } catch (const AmbiguousFrame&) {
      return;
    }
    auto pass = std::make_unique<KeypointPass<T>>();
    pass->point = kps[i];
    pass->spec = keypoint_grid_spec(params.config, frame, support);
    pass->params = params.alias();
    pass->params.set_requires_grad(need_grad);
    const auto grid = voxelize(cloud, &index, pass->spec);
    pass->grid = grid_tensor<T>(grid, need_grad && !cfg.fixed_support);
    pass->descriptor = forward(pass->tape, pass->grid, pass->params);
    slots[i] = std::move(pass);
  });
  SidePasses<T> side;
  for (auto& s : slots) {
    if (!s) continue;
    side.positions.push_back(cloud.points[s->point]);
    side.passes.push_back(std::move(s));
  }
  return side;
}

template <typename T>
ad::Tensor<double> stack_descriptors(const SidePasses<T>& side, std::size_t dim) {
  std::vector<double> v;
  v.reserve(side.passes.size() * dim);
  for (const auto& p : side.passes)
    for (auto x : p->descriptor.values()) v.push_back(static_cast<double>(x));
  return ad::Tensor<double>({side.passes.size(), dim}, std::move(v), true);
}

/// One direction: match, weight, fit. Returns the [3, 4] transform tensor.
inline ad::Tensor<double> directional_fit(ad::Tape<double>& tape, const ad::Tensor<double>& f_src,
                                          const ad::Tensor<double>& f_dst, const std::vector<Vec3>& src_pos,
                                          const std::vector<Vec3>& dst_pos, const TrainConfig& cfg) {
  const auto m = match_descriptors(tape, f_src, f_dst);
  const std::size_t c = m.targets.size();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < c; ++i) pairs.emplace_back(i, m.targets[i]);

  std::vector<double> w_sm(c, 1.0);
  if (!cfg.no_wsm) {
    const auto w = spectral_weights(compatibility_matrix(pairs, src_pos, dst_pos, cfg.sigma_d), cfg.power_iters);
    w_sm.assign(w.data(), w.data() + w.size());
  }
  ad::Tensor<double> weights;
  if (cfg.no_wf) {
    weights = ad::Tensor<double>({c}, w_sm, false);
  } else {
    weights = ad::mul_const<double>(tape, m.w_f, w_sm);
  }
  const auto positive = std::count_if(weights.values().begin(), weights.values().end(), [](double w) { return w > 0.0; });
  if (positive < 4) throw InvalidArgument("fewer than 4 positively weighted correspondences");

  ad::Tensor<double> target;
  if (cfg.soft_positions) {
    std::vector<double> kq;
    for (const auto& p : dst_pos) kq.insert(kq.end(), {p.x(), p.y(), p.z()});
    target = ad::matmul(tape, m.affinity, ad::Tensor<double>({dst_pos.size(), 3}, std::move(kq), false));
  } else {
    std::vector<double> t;
    for (auto j : m.targets) t.insert(t.end(), {dst_pos[j].x(), dst_pos[j].y(), dst_pos[j].z()});
    target = ad::Tensor<double>({c, 3}, std::move(t), false);
  }
  return fit_affine_weighted(tape, src_pos, target, weights, cfg.damping);
}

}  // namespace detail

/// Loss and parameter gradients for one pair. Steps that cannot form a
/// well-posed fit are reported as skipped with empty gradients.
template <typename T>
StepResult<T> training_step(const PairSample& pair, const NetworkParamsT<T>& params, const TrainConfig& cfg,
                            std::uint64_t step_seed, bool with_gradients = true) {
  StepResult<T> result;
  if (pair.source.size() < cfg.kp_per_cloud || pair.target.size() < cfg.kp_per_cloud) {
    throw InvalidArgument("pair clouds are smaller than kp_per_cloud");
  }
  const SpatialIndex ip(pair.source), iq(pair.target);
  const std::uint64_t fps_seed = detail::mix_seed(step_seed, 1);
  const auto kp_p = farthest_point_sample(pair.source, cfg.kp_per_cloud, fps_seed);
  const auto kp_q = farthest_point_sample(pair.target, cfg.kp_per_cloud, fps_seed);
  auto side_p = detail::forward_side(pair.source, ip, kp_p, params, cfg, with_gradients);
  auto side_q = detail::forward_side(pair.target, iq, kp_q, params, cfg, with_gradients);
  result.source_keypoints = side_p.passes.size();
  result.target_keypoints = side_q.passes.size();
  auto skip = [&](std::string why) {
    result.skipped = true;
    result.skip_reason = std::move(why);
    return result;
  };
  if (side_p.passes.size() < 4 || side_q.passes.size() < 4) return skip("fewer than 4 keypoints with a valid frame");

  const auto dim = static_cast<std::size_t>(params.config.descriptor_dim);
  ad::Tape<double> tape;
  const auto fp = detail::stack_descriptors(side_p, dim);
  const auto fq = detail::stack_descriptors(side_q, dim);
  TapeLoss<double> loss;
  try {
    const auto x_f = detail::directional_fit(tape, fp, fq, side_p.positions, side_q.positions, cfg);
    const auto x_b = detail::directional_fit(tape, fq, fp, side_q.positions, side_p.positions, cfg);
    loss = registration_loss(tape, x_f, x_b, cfg.effective_lambda_o(), cfg.effective_lambda_c());
  } catch (const DegenerateSpectrum& e) {
    return skip(e.what());
  } catch (const RankDeficient& e) {
    return skip(e.what());
  } catch (const InvalidArgument& e) {
    return skip(e.what());
  }
  result.loss.lambda_o = cfg.effective_lambda_o();
  result.loss.lambda_c = cfg.effective_lambda_c();
  result.loss.l_o = loss.l_o.item();
  result.loss.l_c = loss.l_c.item();
  result.loss.l_pcr = loss.l_pcr.item();
  if (!with_gradients) return result;
  tape.backward(loss.l_pcr);

  // Seed each keypoint tape with its descriptor row gradient.
  std::vector<detail::KeypointPass<T>*> all;
  std::vector<const PointCloud*> clouds;
  std::vector<const SpatialIndex*> indices;
  std::vector<const double*> seeds;
  const std::vector<double> zeros(side_p.passes.size() * dim + side_q.passes.size() * dim, 0.0);
  const double* gp = fp.has_grad() ? fp.grad().data() : zeros.data();
  const double* gq = fq.has_grad() ? fq.grad().data() : zeros.data();
  for (std::size_t i = 0; i < side_p.passes.size(); ++i) {
    all.push_back(side_p.passes[i].get());
    clouds.push_back(&pair.source);
    indices.push_back(&ip);
    seeds.push_back(gp + i * dim);
  }
  for (std::size_t i = 0; i < side_q.passes.size(); ++i) {
    all.push_back(side_q.passes[i].get());
    clouds.push_back(&pair.target);
    indices.push_back(&iq);
    seeds.push_back(gq + i * dim);
  }
  std::vector<double> d_support(all.size(), 0.0);
  parallel_for(all.size(), cfg.threads, [&](std::size_t k) {
    auto& pass = *all[k];
    std::vector<T> seed(seeds[k], seeds[k] + dim);
    pass.tape.backward(pass.descriptor, seed);
    if (!cfg.fixed_support && pass.grid.has_grad()) {
      const std::vector<double> up(pass.grid.grad().begin(), pass.grid.grad().end());
      d_support[k] = voxelize_backward(*clouds[k], indices[k], pass.spec, up).d_support;
    }
  });

  const auto master = params.tensors();
  result.grads.resize(master.size());
  for (std::size_t t = 0; t < master.size(); ++t) result.grads[t].assign(master[t].size(), T(0));
  for (std::size_t k = 0; k < all.size(); ++k) {
    const auto ts = all[k]->params.tensors();
    for (std::size_t t = 0; t < ts.size(); ++t) {
      if (!ts[t].has_grad()) continue;
      const auto g = ts[t].grad();
      for (std::size_t j = 0; j < g.size(); ++j) result.grads[t][j] += g[j];
    }
  }
  // log_support is last; its gradient arrives only through the grids.
  double d_log_s = 0.0;
  for (double d : d_support) d_log_s += d;
  result.grads.back()[0] = cfg.fixed_support ? T(0) : static_cast<T>(d_log_s * params.support());
  return result;
}

struct TrainOptions {
  std::filesystem::path checkpoint_path;  // empty disables checkpoints
  std::function<void(const TrainLogRecord&)> on_record;
  std::function<void(std::size_t, const std::string&)> on_skip;
};

struct TrainResult {
  NetworkParams params;
  std::vector<TrainLogRecord> log;
  std::size_t skipped_steps = 0;
  std::size_t updates = 0;
};

/// One pair per step, pairs visited in a seeded permutation per epoch, Adam
/// after every non-skipped step.
inline TrainResult train(const std::vector<PairSample>& dataset, NetworkParams params, const TrainConfig& cfg,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  if (dataset.empty()) throw InvalidArgument("training dataset is empty");
  params.validate();
  params = params.clone();  // the caller's tensors stay untouched
  TrainResult out;
  ad::AdamState<float> adam;
  ad::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  std::mt19937_64 order_rng(detail::mix_seed(cfg.seed, 0));
  std::vector<std::size_t> order(dataset.size());
  std::size_t consecutive_skips = 0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t pos = (step - 1) % dataset.size();
    if (pos == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), order_rng);
    }
    const auto r = training_step(dataset[order[pos]], params, cfg, detail::mix_seed(cfg.seed, step + 1));
    if (r.skipped) {
      ++out.skipped_steps;
      if (opts.on_skip) opts.on_skip(step, r.skip_reason);
      if (++consecutive_skips >= dataset.size()) {
        throw Error("every step of a full epoch was skipped (last reason: " + r.skip_reason + ")");
      }
    } else {
      consecutive_skips = 0;
      const auto ts = params.tensors();
      ad::adam_step<float>(ts, r.grads, adam, adam_cfg);
      ++out.updates;
      TrainLogRecord rec;
      rec.step = step;
      rec.l_pcr = r.loss.l_pcr;
      rec.l_o = r.loss.l_o;
      rec.l_c = r.loss.l_c;
      rec.support = params.support();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      out.log.push_back(rec);
      if (opts.on_record) opts.on_record(rec);
    }
    if (!opts.checkpoint_path.empty() && (step % cfg.checkpoint_every == 0 || step == cfg.steps)) {
      save_checkpoint(params, opts.checkpoint_path);
    }
  }
  out.params = std::move(params);
  return out;
}

/// Moving average of l_pcr over a trailing window.
inline std::vector<double> moving_average(const std::vector<TrainLogRecord>& log, std::size_t window) {
  std::vector<double> out;
  double sum = 0.0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    sum += log[i].l_pcr;
    if (i >= window) sum -= log[i - window].l_pcr;
    out.push_back(sum / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

}  // namespace wsdesc
