#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "wsdesc/autodiff.hpp"
#include "wsdesc/lrf.hpp"
#include "wsdesc/parallel.hpp"
#include "wsdesc/pointcloud.hpp"
#include "wsdesc/spatial_index.hpp"
#include "wsdesc/voxelizer.hpp"

namespace wsdesc {

inline constexpr int kDefaultDescriptorDim = 32;

/// Architecture and grid settings shared by training and inference.
struct NetworkConfig {
  int resolution = kDefaultResolution;
  int descriptor_dim = kDefaultDescriptorDim;
  std::vector<int> channels{32, 32, 64, 64, 128, 128};
  std::vector<int> strides{1, 1, 2, 1, 2, 1};
  int kernel = 3;
  int padding = 1;
  double norm_eps = 1e-5;
  double r_lrf = kDefaultLrfRadius;
  double sharpness = kDefaultSharpness;
  double cutoff = kDefaultCutoff;

  void validate() const {
    if (resolution < 2) throw InvalidArgument("resolution must be at least 2");
    if (descriptor_dim < 2) throw InvalidArgument("descriptor dimension must be at least 2");
    if (channels.empty() || channels.size() != strides.size()) {
      throw InvalidArgument("channels and strides must be non-empty and of equal length");
    }
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] < 1 || strides[i] < 1) throw InvalidArgument("channels and strides must be positive");
    }
    if (kernel < 1 || padding < 0) throw InvalidArgument("invalid kernel/padding");
    if (!(r_lrf > 0.0) || !(sharpness > 0.0) || !(norm_eps > 0.0)) {
      throw InvalidArgument("r_lrf, sharpness and norm_eps must be positive");
    }
    output_extent();
  }

  int output_extent() const {
    int e = resolution;
    for (int s : strides) {
      if (e + 2 * padding < kernel) throw InvalidArgument("grid too small for the convolution stack");
      e = (e + 2 * padding - kernel) / s + 1;
    }
    return e;
  }

  std::size_t flat_features() const {
    const auto e = static_cast<std::size_t>(output_extent());
    return e * e * e * static_cast<std::size_t>(channels.back());
  }

  double initial_support() const { return 2.0 * r_lrf / std::sqrt(3.0); }

  nlohmann::json to_json() const {
    return {{"resolution", resolution}, {"descriptor_dim", descriptor_dim}, {"channels", channels},
            {"strides", strides},       {"kernel", kernel},                 {"padding", padding},
            {"norm_eps", norm_eps},     {"r_lrf", r_lrf},                   {"sharpness", sharpness},
            {"cutoff", cutoff}};
  }

  static NetworkConfig from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.resolution = j.at("resolution").get<int>();
    c.descriptor_dim = j.at("descriptor_dim").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.strides = j.at("strides").get<std::vector<int>>();
    c.kernel = j.at("kernel").get<int>();
    c.padding = j.at("padding").get<int>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.r_lrf = j.at("r_lrf").get<double>();
    c.sharpness = j.at("sharpness").get<double>();
    c.cutoff = j.at("cutoff").get<double>();
    return c;
  }

  /// Shape of every parameter tensor, in storage order.
  std::vector<std::pair<std::string, ad::Shape>> tensor_shapes() const {
    std::vector<std::pair<std::string, ad::Shape>> out;
    std::size_t in = 1;
    const auto k = static_cast<std::size_t>(kernel);
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const auto co = static_cast<std::size_t>(channels[i]);
      out.emplace_back("conv" + std::to_string(i) + ".weight", ad::Shape{co, in, k, k, k});
      out.emplace_back("conv" + std::to_string(i) + ".bias", ad::Shape{co});
      in = co;
    }
    out.emplace_back("head.weight", ad::Shape{static_cast<std::size_t>(descriptor_dim), flat_features()});
    out.emplace_back("head.bias", ad::Shape{static_cast<std::size_t>(descriptor_dim)});
    out.emplace_back("log_support", ad::Shape{1});
    return out;
  }
};

/// Learnable state: convolution kernels and biases, the linear head and the
/// log of the grid support.
template <typename T>
struct NetworkParamsT {
  static constexpr std::uint32_t kVersion = 1;

  NetworkConfig config;
  std::uint32_t version = kVersion;
  std::vector<ad::Tensor<T>> kernels;
  std::vector<ad::Tensor<T>> biases;
  ad::Tensor<T> head_weight;
  ad::Tensor<T> head_bias;
  ad::Tensor<T> log_support;

  /// Tensors in the order of config.tensor_shapes().
  std::vector<ad::Tensor<T>> tensors() const {
    std::vector<ad::Tensor<T>> out;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      out.push_back(kernels[i]);
      out.push_back(biases[i]);
    }
    out.push_back(head_weight);
    out.push_back(head_bias);
    out.push_back(log_support);
    return out;
  }

  static NetworkParamsT from_tensors(const NetworkConfig& config, std::vector<ad::Tensor<T>> ts) {
    const std::size_t layers = config.channels.size();
    if (ts.size() != 2 * layers + 3) throw InvalidArgument("wrong number of parameter tensors");
    NetworkParamsT p;
    p.config = config;
    for (std::size_t i = 0; i < layers; ++i) {
      p.kernels.push_back(ts[2 * i]);
      p.biases.push_back(ts[2 * i + 1]);
    }
    p.head_weight = ts[2 * layers];
    p.head_bias = ts[2 * layers + 1];
    p.log_support = ts[2 * layers + 2];
    return p;
  }

  double support() const { return std::exp(static_cast<double>(log_support[0])); }

  /// Same value storage, fresh gradient buffers (one per concurrent tape).
  NetworkParamsT alias() const {
    std::vector<ad::Tensor<T>> ts;
    for (const auto& t : tensors()) ts.push_back(t.alias());
    auto p = from_tensors(config, std::move(ts));
    p.version = version;
    return p;
  }

  NetworkParamsT clone() const {
    std::vector<ad::Tensor<T>> ts;
    for (const auto& t : tensors()) ts.push_back(t.clone(t.requires_grad()));
    auto p = from_tensors(config, std::move(ts));
    p.version = version;
    return p;
  }

  template <typename U>
  NetworkParamsT<U> cast() const {
    std::vector<ad::Tensor<U>> ts;
    for (const auto& t : tensors()) ts.push_back(t.template cast<U>(t.requires_grad()));
    auto p = NetworkParamsT<U>::from_tensors(config, std::move(ts));
    p.version = version;
    return p;
  }

  void set_requires_grad(bool flag) const {
    for (const auto& t : tensors()) t.set_requires_grad(flag);
  }

  void validate() const {
    const auto shapes = config.tensor_shapes();
    const auto ts = tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (ts[i].shape() != shapes[i].second) {
        throw InvalidArgument(shapes[i].first + " has shape " + ad::shape_string(ts[i].shape()) + ", expected " +
                              ad::shape_string(shapes[i].second));
      }
      for (auto v : ts[i].values()) {
        if (!std::isfinite(static_cast<double>(v))) throw InvalidArgument(shapes[i].first + " is not finite");
      }
    }
  }
};

using NetworkParams = NetworkParamsT<float>;

/// Fan-in scaled uniform weights (He-uniform for convolutions, 1/sqrt(fan_in)
/// for the head), zero biases, support initialized to 2 r_lrf / sqrt(3).
template <typename T = float>
NetworkParamsT<T> init_network(std::uint64_t seed, const NetworkConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::vector<ad::Tensor<T>> ts;
  for (const auto& [name, shape] : config.tensor_shapes()) {
    const std::size_t n = ad::numel(shape);
    std::vector<T> values(n, T(0));
    if (name.ends_with(".weight")) {
      const double fan_in = static_cast<double>(n / shape[0]);
      const double bound = name.starts_with("conv") ? std::sqrt(6.0 / fan_in) : 1.0 / std::sqrt(fan_in);
      std::uniform_real_distribution<double> uni(-bound, bound);
      for (auto& v : values) v = static_cast<T>(uni(rng));
    } else if (name == "log_support") {
      values[0] = static_cast<T>(std::log(config.initial_support()));
    }
    ts.emplace_back(shape, std::move(values), true);
  }
  return NetworkParamsT<T>::from_tensors(config, std::move(ts));
}

template <typename T = float>
NetworkParamsT<T> init_network(std::uint64_t seed, int descriptor_dim) {
  NetworkConfig config;
  config.descriptor_dim = descriptor_dim;
  return init_network<T>(seed, config);
}

template <typename T>
ad::Tensor<T> grid_tensor(const VoxelGrid& grid, bool requires_grad = false) {
  const auto h = static_cast<std::size_t>(grid.spec.resolution);
  std::vector<T> v(grid.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(grid.values[i]);
  return ad::Tensor<T>({1, h, h, h}, std::move(v), requires_grad);
}

/// conv -> instance norm -> relu per layer, flatten, linear, l2 normalize.
/// grid is [1, h, h, h].
template <typename T>
ad::Tensor<T> forward(ad::Tape<T>& tape, const ad::Tensor<T>& grid, const NetworkParamsT<T>& params) {
  const auto& cfg = params.config;
  const auto h = static_cast<std::size_t>(cfg.resolution);
  if (grid.shape() != ad::Shape{1, h, h, h}) {
    throw InvalidArgument("grid shape " + ad::shape_string(grid.shape()) + " does not match network resolution " +
                          std::to_string(h));
  }
  ad::Tensor<T> x = grid;
  for (std::size_t i = 0; i < params.kernels.size(); ++i) {
    x = ad::conv3d(tape, x, params.kernels[i], params.biases[i], static_cast<std::size_t>(cfg.strides[i]),
                   static_cast<std::size_t>(cfg.padding));
    x = ad::instance_norm(tape, x, cfg.norm_eps);
    x = ad::relu(tape, x);
  }
  x = ad::reshape(tape, x, {x.size()});
  x = ad::linear(tape, x, params.head_weight, params.head_bias);
  return ad::l2_normalize(tape, x);
}

/// Inference-only descriptor of one grid.
template <typename T>
std::vector<float> compute_descriptor(const VoxelGrid& grid, const NetworkParamsT<T>& params) {
  ad::Tape<T> tape;
  const auto frozen = params.alias();
  frozen.set_requires_grad(false);
  const auto out = forward(tape, grid_tensor<T>(grid), frozen);
  return std::vector<float>(out.values().begin(), out.values().end());
}

/// Grid spec for a keypoint given the network's grid settings and support.
inline VoxelGridSpec keypoint_grid_spec(const NetworkConfig& cfg, const LrfFrame& frame, double support) {
  VoxelGridSpec spec;
  spec.center = frame.center;
  spec.frame = frame;
  spec.support = support;
  spec.resolution = cfg.resolution;
  spec.sharpness = cfg.sharpness;
  spec.cutoff = cfg.cutoff;
  return spec;
}

struct KeypointDescriptors {
  std::vector<std::size_t> keypoints;  // indices into the cloud, in input order
  std::vector<std::vector<float>> descriptors;
  std::size_t skipped = 0;  // keypoints dropped for degenerate or ambiguous frames
};

/// LRF, voxelization and forward for each keypoint. Keypoints whose frame
/// cannot be estimated are skipped and counted.
template <typename T>
KeypointDescriptors extract_descriptors(const PointCloud& cloud, const SpatialIndex& index,
                                        std::span<const std::size_t> keypoints, const NetworkParamsT<T>& params,
                                        std::size_t threads = 1) {
  const double support = params.support();
  std::vector<std::vector<float>> slots(keypoints.size());
  std::vector<char> ok(keypoints.size(), 0);
  parallel_for(keypoints.size(), threads, [&](std::size_t i) {
    LrfFrame frame;
    try {
      frame = estimate_lrf(cloud, index, keypoints[i], params.config.r_lrf);
    } catch (const DegeneratePatch&) {
      return;
    } catch (const AmbiguousFrame&) {
      return;
    }
    const auto grid = voxelize(cloud, &index, keypoint_grid_spec(params.config, frame, support));
    slots[i] = compute_descriptor(grid, params);
    ok[i] = 1;
  });
  KeypointDescriptors out;
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    if (!ok[i]) {
      ++out.skipped;
      continue;
    }
    out.keypoints.push_back(keypoints[i]);
    out.descriptors.push_back(std::move(slots[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'W', 'S', 'D', 'C', 'K', 'P', 'T', '1'};

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void write_f32_le(std::ostream& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline float read_f32_le(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

inline void write_u32_le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline std::vector<unsigned char> read_all_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes through a sibling temp file and renames it into place.
template <typename WriteFn>
void write_atomically(const std::filesystem::path& path, WriteFn&& write) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    write(out);
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// "WSDCKPT1", u64 little-endian header length, JSON header, float32 LE data.
inline void save_checkpoint(const NetworkParams& params, const std::filesystem::path& path) {
  params.validate();
  const auto shapes = params.config.tensor_shapes();
  const auto ts = params.tensors();
  nlohmann::json header;
  header["version"] = params.version;
  header["config"] = params.config.to_json();
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    header["tensors"].push_back({{"name", shapes[i].first},
                                 {"shape", ts[i].shape()},
                                 {"dtype", "float32"},
                                 {"offset", offset}});
    offset += 4 * ts[i].size();
  }
  const std::string text = header.dump();
  detail::write_atomically(path, [&](std::ostream& out) {
    out.write(detail::kCheckpointMagic, 8);
    detail::write_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ts)
      for (float v : t.values()) detail::write_f32_le(out, v);
  });
}

/// Loads and validates a checkpoint. When `expected` is given, every tensor
/// must have the shape that configuration implies.
inline NetworkParams load_checkpoint(const std::filesystem::path& path, const NetworkConfig* expected = nullptr) {
  const auto bytes = detail::read_all_bytes(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), detail::kCheckpointMagic, 8) != 0) {
    throw CheckpointError(where + "bad magic");
  }
  const std::uint64_t header_len = detail::read_u64_le(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw CheckpointError(where + "truncated header");
  nlohmann::json header;
  NetworkConfig config;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    if (header.at("version").get<std::uint32_t>() != NetworkParams::kVersion) {
      throw CheckpointError(where + "unsupported version " + header.at("version").dump());
    }
    config = NetworkConfig::from_json(header.at("config"));
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + "malformed header: " + e.what());
  } catch (const InvalidArgument& e) {
    throw CheckpointError(where + "invalid config: " + e.what());
  }
  const auto shapes = (expected ? *expected : config).tensor_shapes();
  const auto& entries = header.at("tensors");
  if (!entries.is_array() || entries.size() != shapes.size()) {
    throw CheckpointError(where + "tensor table has " + std::to_string(entries.size()) + " entries, expected " +
                          std::to_string(shapes.size()));
  }
  const std::size_t data_start = 16 + header_len;
  const std::size_t data_size = bytes.size() - data_start;
  std::vector<ad::Tensor<float>> ts;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& e = entries[i];
    std::string name;
    ad::Shape shape;
    std::uint64_t offset = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<ad::Shape>();
      offset = e.at("offset").get<std::uint64_t>();
      if (e.at("dtype").get<std::string>() != "float32") throw CheckpointError(where + name + ": dtype must be float32");
    } catch (const nlohmann::json::exception& ex) {
      throw CheckpointError(where + "malformed tensor entry " + std::to_string(i) + ": " + ex.what());
    }
    if (name != shapes[i].first) throw CheckpointError(where + "tensor " + std::to_string(i) + " is '" + name +
                                                       "', expected '" + shapes[i].first + "'");
    if (shape != shapes[i].second) {
      throw CheckpointError(where + "shape mismatch for tensor '" + name + "': " + ad::shape_string(shape) +
                            " vs expected " + ad::shape_string(shapes[i].second));
    }
    const std::size_t n = ad::numel(shape);
    if (offset > data_size || 4 * n > data_size - offset) throw CheckpointError(where + "truncated data for " + name);
    std::vector<float> values(n);
    const unsigned char* p = bytes.data() + data_start + offset;
    for (std::size_t j = 0; j < n; ++j) {
      values[j] = detail::read_f32_le(p + 4 * j);
      if (!std::isfinite(values[j])) throw CheckpointError(where + "non-finite value in " + name);
    }
    ts.emplace_back(std::move(shape), std::move(values), true);
  }
  return NetworkParams::from_tensors(expected ? *expected : config, std::move(ts));
}

// ---------------------------------------------------------------------------
// Descriptor export

/// u32 count, u32 dim, count*dim float32 LE; keypoint indices go to
/// `<path>.kp.txt`, one per line.
inline void save_descriptors(const std::filesystem::path& path, const KeypointDescriptors& d) {
  const std::uint32_t dim = d.descriptors.empty() ? 0 : static_cast<std::uint32_t>(d.descriptors[0].size());
  detail::write_atomically(path, [&](std::ostream& out) {
    detail::write_u32_le(out, static_cast<std::uint32_t>(d.descriptors.size()));
    detail::write_u32_le(out, dim);
    for (const auto& row : d.descriptors) {
      if (row.size() != dim) throw InvalidArgument("ragged descriptor batch");
      for (float v : row) detail::write_f32_le(out, v);
    }
  });
  auto kp = path;
  kp += ".kp.txt";
  detail::write_atomically(kp, [&](std::ostream& out) {
    for (auto k : d.keypoints) out << k << '\n';
  });
}

inline KeypointDescriptors load_descriptors(const std::filesystem::path& path) {
  const auto bytes = detail::read_all_bytes(path);
  if (bytes.size() < 8) throw ParseError(path.string(), bytes.size(), "truncated descriptor header");
  const std::uint32_t count = detail::read_u32_le(bytes.data());
  const std::uint32_t dim = detail::read_u32_le(bytes.data() + 4);
  if (bytes.size() != 8 + 4ull * count * dim) throw ParseError(path.string(), bytes.size(), "descriptor size mismatch");
  KeypointDescriptors d;
  d.descriptors.assign(count, std::vector<float>(dim));
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < dim; ++j) d.descriptors[i][j] = detail::read_f32_le(bytes.data() + 8 + 4 * (i * dim + j));
  auto kp = path;
  kp += ".kp.txt";
  std::ifstream in(kp);
  std::size_t k;
  while (in >> k) d.keypoints.push_back(k);
  if (d.keypoints.size() != count) throw ParseError(kp.string(), d.keypoints.size(), "keypoint count mismatch");
  return d;
}

}  // namespace wsdesc
