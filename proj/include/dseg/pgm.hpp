#pragma once

// Binary PGM (P5, maxval 255) and base64 helpers.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dseg/errors.hpp"
#include "dseg/grid.hpp"

namespace dseg::pgm {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Image from_values(const ValueGrid& g, std::size_t channel = 0) {
  Image img{g.height(), g.width(), {}};
  img.pixels.reserve(g.plane());
  for (double v : g.channel(channel)) img.pixels.push_back(to_byte(v));
  return img;
}

inline Image from_mask(const BinaryGrid& b) {
  Image img{b.height(), b.width(), {}};
  img.pixels.reserve(b.size());
  for (auto v : b.data()) img.pixels.push_back(v ? 255 : 0);
  return img;
}

// Label field {0..max_label} spread evenly over the gray range.
inline Image from_labels(const std::vector<int>& labels, std::size_t h, std::size_t w,
                         int max_label) {
  Image img{h, w, {}};
  img.pixels.reserve(labels.size());
  const double step = max_label > 0 ? 255.0 / max_label : 0.0;
  for (int v : labels) img.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * step)));
  return img;
}

inline std::string encode(const Image& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline Image decode(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::size_t {
    skip_ws();
    std::size_t v = 0, start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])))
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
    if (pos == start) throw DataError("pgm: malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes.substr(0, 2) != "P5") throw DataError("pgm: not a P5 file");
  pos = 2;
  Image img;
  img.width = read_int();
  img.height = read_int();
  const std::size_t maxval = read_int();
  if (maxval != 255) throw DataError("pgm: only maxval 255 is supported");
  ++pos;  // single whitespace after maxval
  const std::size_t n = img.width * img.height;
  if (bytes.size() < pos + n) throw DataError("pgm: truncated pixel data");
  img.pixels.assign(bytes.begin() + pos, bytes.begin() + pos + n);
  return img;
}

inline void write(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  const std::string s = encode(img);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline Image read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return decode(ss.str());
}

inline ValueGrid to_values(const Image& img) {
  ValueGrid g(1, img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) g[i] = img.pixels[i] / 255.0;
  return g;
}

inline BinaryGrid to_mask(const Image& img) {
  BinaryGrid b(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) b.set(i, img.pixels[i] >= 128);
  return b;
}

inline std::string base64(std::string_view in) {
  static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const unsigned v = (unsigned char)in[i] << 16 | (unsigned char)in[i + 1] << 8 | (unsigned char)in[i + 2];
    out += tbl[v >> 18];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  if (i < in.size()) {
    unsigned v = (unsigned char)in[i] << 16;
    if (i + 1 < in.size()) v |= (unsigned char)in[i + 1] << 8;
    out += tbl[v >> 18];
    out += tbl[(v >> 12) & 63];
    out += i + 1 < in.size() ? tbl[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string unbase64(std::string_view in) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::string out;
  unsigned buf = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=') break;
    const int v = val(c);
    if (v < 0) {
      if (std::isspace(static_cast<unsigned char>(c))) continue;
      throw DataError("base64: invalid character");
    }
    buf = buf << 6 | static_cast<unsigned>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((buf >> bits) & 0xFF);
    }
  }
  return out;
}

}  // namespace dseg::pgm
