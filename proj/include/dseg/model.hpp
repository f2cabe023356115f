#pragma once

// Deferral-aware toy segmentor:
//
//   image -> conv3x3(1->8) -> ReLU -> conv3x3(8->C) -> ReLU = features U
//   U -> conv1x1(C->1) -> sigmoid                       = seg_prob
//   U -> conv1x1(C->J+1)                                = routing logits
//   U -> conv3x3(C->C') -> ReLU -> conv1x1(C'->1) -> sigmoid = deferral map

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/autodiff.hpp"
#include "dseg/errors.hpp"
#include "dseg/grid.hpp"
#include "dseg/rng.hpp"

namespace dseg {

inline constexpr std::size_t kStemChannels = 8;

enum ParamId : std::size_t {
  kEnc1W,
  kEnc1B,
  kEnc2W,
  kEnc2B,
  kSegW,
  kSegB,
  kRouteW,
  kRouteB,
  kAdp1W,
  kAdp1B,
  kAdp2W,
  kAdp2B,
  kParamCount
};

inline constexpr std::array<const char*, kParamCount> kParamNames = {
    "encoder.conv1.weight", "encoder.conv1.bias",  "encoder.conv2.weight", "encoder.conv2.bias",
    "seg_head.weight",      "seg_head.bias",       "routing_head.weight",  "routing_head.bias",
    "adp.conv3x3.weight",   "adp.conv3x3.bias",    "adp.conv1x1.weight",   "adp.conv1x1.bias"};

struct NetShape {
  std::size_t experts = 1;       // J
  std::size_t channels = 16;     // C
  std::size_t adp_channels = 8;  // C'
  std::size_t height = 64;       // training image size recorded in checkpoints
  std::size_t width = 64;

  bool operator==(const NetShape&) const = default;
};

class DeferralNet {
 public:
  using Params = std::array<ValueGrid, kParamCount>;

  DeferralNet() = default;
  // All-zero parameters.
  explicit DeferralNet(NetShape shape, std::uint64_t seed = 0) : shape_(shape), seed_(seed) {
    if (shape.experts < 1) throw ConfigError("DeferralNet: at least one expert channel is required");
    if (shape.channels < 1 || shape.adp_channels < 1) throw ConfigError("DeferralNet: channel counts must be >= 1");
    const std::size_t C = shape.channels, A = shape.adp_channels, R = shape.experts + 1;
    params_[kEnc1W] = ValueGrid(kStemChannels * 1, 3, 3);
    params_[kEnc1B] = ValueGrid(kStemChannels, 1, 1);
    params_[kEnc2W] = ValueGrid(C * kStemChannels, 3, 3);
    params_[kEnc2B] = ValueGrid(C, 1, 1);
    params_[kSegW] = ValueGrid(C, 1, 1);
    params_[kSegB] = ValueGrid(1, 1, 1);
    params_[kRouteW] = ValueGrid(R * C, 1, 1);
    params_[kRouteB] = ValueGrid(R, 1, 1);
    params_[kAdp1W] = ValueGrid(A * C, 3, 3);
    params_[kAdp1B] = ValueGrid(A, 1, 1);
    params_[kAdp2W] = ValueGrid(A, 1, 1);
    params_[kAdp2B] = ValueGrid(1, 1, 1);
  }

  const NetShape& shape() const { return shape_; }
  std::size_t experts() const { return shape_.experts; }
  std::uint64_t seed() const { return seed_; }

  Params& params() { return params_; }
  const Params& params() const { return params_; }
  ValueGrid& param(ParamId id) { return params_[id]; }
  const ValueGrid& param(ParamId id) const { return params_[id]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  // Input channel count times kernel area of each weight tensor.
  static std::size_t fan_in(ParamId id, const NetShape& s) {
    switch (id) {
      case kEnc1W: return 1 * 9;
      case kEnc2W: return kStemChannels * 9;
      case kSegW:
      case kRouteW: return s.channels;
      case kAdp1W: return s.channels * 9;
      case kAdp2W: return s.adp_channels;
      default: return 0;
    }
  }

  bool operator==(const DeferralNet&) const = default;

 private:
  NetShape shape_{};
  std::uint64_t seed_ = 0;
  Params params_{};
};

// Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)) (unit pre-activation variance on
// unit-variance input); biases zero.
inline DeferralNet init(std::uint64_t seed, NetShape shape) {
  DeferralNet net(shape, seed);
  Rng rng(seed);
  for (std::size_t k = 0; k < kParamCount; ++k) {
    const std::size_t fan = DeferralNet::fan_in(static_cast<ParamId>(k), shape);
    if (fan == 0) continue;
    const double a = std::sqrt(3.0 / static_cast<double>(fan));
    for (double& w : net.param(static_cast<ParamId>(k)).data()) w = a * (2.0 * uniform01(rng) - 1.0);
  }
  return net;
}

inline DeferralNet init(std::uint64_t seed, std::size_t experts, std::size_t channels = 16,
                        std::size_t adp_channels = 8) {
  return init(seed, NetShape{experts, channels, adp_channels});
}

// Parameters registered on a tape, in ParamId order.
struct ParamBinding {
  std::array<Var, kParamCount> vars;

  const Var& operator[](ParamId id) const { return vars[id]; }

  DeferralNet::Params gradients() const {
    DeferralNet::Params g;
    for (std::size_t k = 0; k < kParamCount; ++k) g[k] = vars[k].grad();
    return g;
  }
};

inline ParamBinding bind(const DeferralNet& net, Tape& tape, bool trainable = true) {
  ParamBinding b;
  for (std::size_t k = 0; k < kParamCount; ++k)
    b.vars[k] = trainable ? tape.variable(net.params()[k]) : tape.constant(net.params()[k]);
  return b;
}

struct ForwardVars {
  Var seg_prob;        // 1 x H x W
  Var routing_logits;  // (J+1) x H x W
  Var deferral_map;    // 1 x H x W
  Var features;        // C x H x W
};

struct ForwardOutputs {
  ValueGrid seg_prob;
  ValueGrid routing_logits;
  ValueGrid deferral_map;
  ValueGrid features;
};

inline void check_image(const ValueGrid& image) {
  if (image.channels() != 1) throw ShapeError("forward: image must have one channel, got " + image.shape().str());
  if (image.height() == 0 || image.width() == 0) throw ShapeError("forward: empty image");
}

inline ForwardVars forward(const ParamBinding& p, const Var& image) {
  check_image(image.value());
  Var h = relu(conv2d(image, p[kEnc1W], p[kEnc1B], 1));
  Var u = relu(conv2d(h, p[kEnc2W], p[kEnc2B], 1));
  ForwardVars out;
  out.features = u;
  out.seg_prob = sigmoid(conv2d(u, p[kSegW], p[kSegB], 0));
  out.routing_logits = conv2d(u, p[kRouteW], p[kRouteB], 0);
  Var a = relu(conv2d(u, p[kAdp1W], p[kAdp1B], 1));
  out.deferral_map = sigmoid(conv2d(a, p[kAdp2W], p[kAdp2B], 0));
  return out;
}

// Inference without gradient bookkeeping.
inline ForwardOutputs forward(const DeferralNet& net, const ValueGrid& image) {
  if (net.experts() < 1) throw ConfigError("forward: at least one expert channel is required");
  check_image(image);
  Tape tape;
  const ParamBinding p = bind(net, tape, false);
  const ForwardVars v = forward(p, tape.constant(image));
  return {v.seg_prob.value(), v.routing_logits.value(), v.deferral_map.value(), v.features.value()};
}

// --- checkpoint I/O -------------------------------------------------------
//
// Layout (all integers and floats little-endian):
//   char[8]  magic "DSEGNET1"
//   u32      format version (1)
//   u32      J, C, C', H, W
//   u64      init seed
//   u32      parameter tensor count (12)
//   then, per tensor in ParamId order: u64 element count, f64[count]
//
// A sidecar JSON (<checkpoint>.json) describes the architecture and tensor shapes.

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'E', 'G', 'N', 'E', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (pos + sizeof(U) > in.size()) throw DataError("checkpoint: truncated file");
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    u |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return std::bit_cast<T>(u);
}

}  // namespace detail

inline std::string serialize(const DeferralNet& net) {
  std::string out(kCheckpointMagic, kCheckpointMagic + 8);
  const NetShape& s = net.shape();
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  for (std::size_t v : {s.experts, s.channels, s.adp_channels, s.height, s.width})
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  detail::put_le<std::uint64_t>(out, net.seed());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kParamCount));
  for (const auto& p : net.params()) {
    detail::put_le<std::uint64_t>(out, p.size());
    for (double v : p.data()) detail::put_le<double>(out, v);
  }
  return out;
}

inline DeferralNet deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint: bad magic");
  std::size_t pos = 8;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  NetShape s;
  s.experts = detail::get_le<std::uint32_t>(bytes, pos);
  s.channels = detail::get_le<std::uint32_t>(bytes, pos);
  s.adp_channels = detail::get_le<std::uint32_t>(bytes, pos);
  s.height = detail::get_le<std::uint32_t>(bytes, pos);
  s.width = detail::get_le<std::uint32_t>(bytes, pos);
  const auto seed = detail::get_le<std::uint64_t>(bytes, pos);
  DeferralNet net(s, seed);
  const auto count = detail::get_le<std::uint32_t>(bytes, pos);
  if (count != kParamCount) throw DataError("checkpoint: unexpected tensor count");
  for (auto& p : net.params()) {
    const auto n = detail::get_le<std::uint64_t>(bytes, pos);
    if (n != p.size()) throw DataError("checkpoint: tensor size mismatch");
    for (double& v : p.data()) v = detail::get_le<double>(bytes, pos);
  }
  if (pos != bytes.size()) throw DataError("checkpoint: trailing bytes");
  return net;
}

inline nlohmann::json describe(const DeferralNet& net) {
  const NetShape& s = net.shape();
  nlohmann::json j = {{"format", "dseg-checkpoint"},
                      {"version", kCheckpointVersion},
                      {"experts", s.experts},
                      {"channels", s.channels},
                      {"adp_channels", s.adp_channels},
                      {"height", s.height},
                      {"width", s.width},
                      {"seed", net.seed()},
                      {"parameters", net.parameter_count()},
                      {"tensors", nlohmann::json::array()}};
  for (std::size_t k = 0; k < kParamCount; ++k) {
    const Shape sh = net.params()[k].shape();
    j["tensors"].push_back({{"name", kParamNames[k]}, {"shape", {sh.channels, sh.height, sh.width}}});
  }
  return j;
}

inline void save_checkpoint(const std::filesystem::path& path, const DeferralNet& net) {
  {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    const std::string bytes = serialize(net);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::ofstream side(path.string() + ".json");
  side << describe(net).dump(2) << '\n';
}

inline DeferralNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace dseg
