#pragma once

// Toy grayscale segmentation samples with blurred, noisy object boundaries.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/errors.hpp"
#include "dseg/grid.hpp"
#include "dseg/pgm.hpp"
#include "dseg/rng.hpp"

namespace dseg {

enum class ShapeFamily { Ellipse, Blob };

inline std::string to_string(ShapeFamily f) { return f == ShapeFamily::Blob ? "blob" : "ellipse"; }

inline ShapeFamily shape_family_from(const std::string& s) {
  if (s == "ellipse") return ShapeFamily::Ellipse;
  if (s == "blob") return ShapeFamily::Blob;
  throw ConfigError("unknown shape family '" + s + "' (expected ellipse|blob)");
}

struct DatasetSpec {
  std::size_t count = 200;
  std::size_t height = 64;
  std::size_t width = 64;
  ShapeFamily shape = ShapeFamily::Ellipse;
  double noise_sigma = 0.15;
  std::size_t blur_radius = 2;
  std::size_t band_width = 2;
  std::uint64_t seed = 7;

  void validate() const {
    if (count < 1) throw ConfigError("dataset.count must be >= 1");
    if (band_width < 1) throw ConfigError("dataset.band_width must be >= 1");
    if (height < 4 || width < 4) throw ConfigError("dataset height/width must be >= 4");
    if (noise_sigma < 0) throw ConfigError("dataset.noise_sigma must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"count", s.count},           {"height", s.height},           {"width", s.width},
       {"shape", to_string(s.shape)}, {"noise_sigma", s.noise_sigma}, {"blur_radius", s.blur_radius},
       {"band_width", s.band_width},  {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s.count = j.value("count", s.count);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  if (j.contains("shape")) s.shape = shape_family_from(j.at("shape").get<std::string>());
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.blur_radius = j.value("blur_radius", s.blur_radius);
  s.band_width = j.value("band_width", s.band_width);
  s.seed = j.value("seed", s.seed);
}

struct Sample {
  std::string id;
  std::uint64_t seed = 0;
  ValueGrid image;  // 1 x H x W, intensities in [0, 1]
  BinaryGrid mask;
  BinaryGrid band;
};

namespace detail {

// Max (or min) of `in` over a (2r+1)^2 window clipped to the grid, separable.
inline std::vector<std::uint8_t> window_extreme(const BinaryGrid& in, std::size_t r, bool take_max) {
  const std::size_t H = in.height(), W = in.width();
  auto pick = [take_max](std::uint8_t a, std::uint8_t b) { return take_max ? std::max(a, b) : std::min(a, b); };
  std::vector<std::uint8_t> tmp(H * W), out(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t lo = x >= r ? x - r : 0, hi = std::min(W - 1, x + r);
      std::uint8_t v = in.at(y, lo);
      for (std::size_t k = lo + 1; k <= hi; ++k) v = pick(v, in.at(y, k));
      tmp[y * W + x] = v;
    }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t lo = y >= r ? y - r : 0, hi = std::min(H - 1, y + r);
      std::uint8_t v = tmp[lo * W + x];
      for (std::size_t k = lo + 1; k <= hi; ++k) v = pick(v, tmp[k * W + x]);
      out[y * W + x] = v;
    }
  return out;
}

}  // namespace detail

// Pixels whose Chebyshev distance to the nearest opposite-label pixel is at
// most `band_width` (dilation minus erosion with a square structuring element).
inline BinaryGrid boundary_band(const BinaryGrid& mask, std::size_t band_width) {
  if (band_width < 1) throw ConfigError("boundary_band: band_width must be >= 1");
  const auto hi = detail::window_extreme(mask, band_width, true);
  const auto lo = detail::window_extreme(mask, band_width, false);
  BinaryGrid band(mask.height(), mask.width());
  for (std::size_t i = 0; i < mask.size(); ++i) band.set(i, hi[i] != lo[i]);
  return band;
}

namespace detail {

struct ShapeParams {
  double cy, cx, ry, rx, angle;
  std::vector<double> harmonics;  // amplitude/phase pairs for blobs
};

inline ShapeParams draw_shape(Rng& rng, const DatasetSpec& spec, int attempt) {
  const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
  const double m = std::min(H, W);
  // Later attempts shrink and recentre the shape.
  const double shrink = 1.0 / (1.0 + 0.25 * attempt);
  ShapeParams p;
  p.cy = H * (0.5 + (uniform01(rng) - 0.5) * 0.3 * shrink);
  p.cx = W * (0.5 + (uniform01(rng) - 0.5) * 0.3 * shrink);
  p.ry = m * (0.14 + 0.16 * uniform01(rng)) * shrink;
  p.rx = m * (0.14 + 0.16 * uniform01(rng)) * shrink;
  p.angle = std::numbers::pi * uniform01(rng);
  if (spec.shape == ShapeFamily::Blob) {
    for (int k = 2; k <= 4; ++k) {
      p.harmonics.push_back(0.18 * uniform01(rng) / (k - 1));
      p.harmonics.push_back(2.0 * std::numbers::pi * uniform01(rng));
    }
  }
  return p;
}

inline BinaryGrid rasterize(const ShapeParams& p, const DatasetSpec& spec) {
  BinaryGrid mask(spec.height, spec.width);
  const double ca = std::cos(p.angle), sa = std::sin(p.angle);
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double dy = (static_cast<double>(y) + 0.5) - p.cy;
      const double dx = (static_cast<double>(x) + 0.5) - p.cx;
      const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      double r = std::sqrt((u / p.rx) * (u / p.rx) + (v / p.ry) * (v / p.ry));
      double limit = 1.0;
      if (!p.harmonics.empty()) {
        const double theta = std::atan2(v / p.ry, u / p.rx);
        for (std::size_t k = 0; k < p.harmonics.size() / 2; ++k)
          limit += p.harmonics[2 * k] * std::cos(static_cast<double>(k + 2) * theta + p.harmonics[2 * k + 1]);
      }
      mask.set(y, x, r <= limit);
    }
  return mask;
}

// The object must be nonempty and may not touch the grid border.
inline bool well_formed(const BinaryGrid& mask) {
  const std::size_t fg = mask.count();
  if (fg == 0 || fg == mask.size()) return false;
  for (std::size_t x = 0; x < mask.width(); ++x)
    if (mask.at(0, x) || mask.at(mask.height() - 1, x)) return false;
  for (std::size_t y = 0; y < mask.height(); ++y)
    if (mask.at(y, 0) || mask.at(y, mask.width() - 1)) return false;
  return true;
}

inline ValueGrid box_blur(const ValueGrid& in, std::size_t r) {
  if (r == 0) return in;
  const std::size_t H = in.height(), W = in.width();
  ValueGrid out(in.shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double s = 0.0;
      std::size_t n = 0;
      for (std::size_t yy = y >= r ? y - r : 0; yy <= std::min(H - 1, y + r); ++yy)
        for (std::size_t xx = x >= r ? x - r : 0; xx <= std::min(W - 1, x + r); ++xx) {
          s += in.at(0, yy, xx);
          ++n;
        }
      out.at(0, y, x) = s / static_cast<double>(n);
    }
  return out;
}

}  // namespace detail

inline constexpr double kForegroundLevel = 0.7;
inline constexpr double kBackgroundLevel = 0.3;
inline constexpr int kMaxShapeAttempts = 16;

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", index);
  return buf;
}

inline Sample generate_one(const DatasetSpec& spec, std::size_t index) {
  Sample s;
  s.id = sample_id(index);
  s.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(index)});
  Rng rng(s.seed);
  bool ok = false;
  for (int attempt = 0; attempt < kMaxShapeAttempts && !ok; ++attempt) {
    s.mask = detail::rasterize(detail::draw_shape(rng, spec, attempt), spec);
    ok = detail::well_formed(s.mask);
  }
  if (!ok)
    throw DataError("generate: could not place a shape inside a " + std::to_string(spec.height) +
                    "x" + std::to_string(spec.width) + " grid for " + s.id);

  ValueGrid img(1, spec.height, spec.width);
  for (std::size_t i = 0; i < img.size(); ++i)
    img[i] = s.mask[i] ? kForegroundLevel : kBackgroundLevel;
  img = detail::box_blur(img, spec.blur_radius);
  if (spec.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::clamp(img[i] + noise(rng), 0.0, 1.0);
  }
  s.image = std::move(img);
  s.band = boundary_band(s.mask, spec.band_width);
  return s;
}

inline std::vector<Sample> generate(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(spec.count);
  for (std::size_t k = 0; k < spec.count; ++k) out.push_back(generate_one(spec, k));
  return out;
}

// 80/20 split keyed on a hash of the sample id. Both halves are nonempty
// whenever there are at least two samples.
struct Split {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

inline bool is_validation_id(const std::string& id) { return fnv1a(id) % 5 == 0; }

inline Split split_by_id(std::vector<Sample> samples) {
  Split s;
  for (auto& x : samples) (is_validation_id(x.id) ? s.val : s.train).push_back(std::move(x));
  if (s.val.empty() && s.train.size() > 1) {
    s.val.push_back(std::move(s.train.back()));
    s.train.pop_back();
  }
  if (s.train.empty() && s.val.size() > 1) {
    s.train.push_back(std::move(s.val.back()));
    s.val.pop_back();
  }
  return s;
}

// Dataset directory: manifest.json plus <id>_image.pgm, <id>_mask.pgm, <id>_band.pgm.
inline void save_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                         const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "dseg-dataset/1";
  manifest["spec"] = spec;
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : samples) {
    pgm::write(dir / (s.id + "_image.pgm"), pgm::from_values(s.image));
    pgm::write(dir / (s.id + "_mask.pgm"), pgm::from_mask(s.mask));
    pgm::write(dir / (s.id + "_band.pgm"), pgm::from_mask(s.band));
    manifest["samples"].push_back({{"id", s.id},
                                   {"seed", s.seed},
                                   {"image", s.id + "_image.pgm"},
                                   {"mask", s.id + "_mask.pgm"},
                                   {"band", s.id + "_band.pgm"}});
  }
  std::ofstream f(dir / "manifest.json");
  f << manifest.dump(2) << '\n';
}

struct LoadedDataset {
  DatasetSpec spec;
  std::vector<Sample> samples;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dataset manifest: ") + e.what());
  }
  LoadedDataset out;
  out.spec = manifest.at("spec").get<DatasetSpec>();
  for (const auto& e : manifest.at("samples")) {
    Sample s;
    s.id = e.at("id").get<std::string>();
    s.seed = e.at("seed").get<std::uint64_t>();
    s.image = pgm::to_values(pgm::read(dir / e.at("image").get<std::string>()));
    s.mask = pgm::to_mask(pgm::read(dir / e.at("mask").get<std::string>()));
    s.band = pgm::to_mask(pgm::read(dir / e.at("band").get<std::string>()));
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace dseg
