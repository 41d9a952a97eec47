#pragma once

// PNG decoding/encoding, dataset loading and a procedural image generator.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddc/random.hpp"
#include "ddc/tensor.hpp"

namespace ddc {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

/// Decodes a PNG into a [3, H, W] tensor in [0, 1]. Grey is replicated to RGB,
/// alpha dropped, palettes expanded; 16-bit samples are divided by 65535.
/// Returns nullopt (and sets `error`) for unreadable or corrupt files.
inline std::optional<Tensor> read_png(const std::filesystem::path& path, std::string* error = nullptr) {
  auto fail = [&](const std::string& msg) -> std::optional<Tensor> {
    if (error) *error = msg;
    return std::nullopt;
  };
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) return fail("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) {
    return fail(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return fail("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return fail("libpng initialisation failed");
  }
  std::vector<std::uint8_t> buffer;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return fail(path.string() + " is corrupt");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  int color_type = png_get_color_type(png, info);
  bit_depth = png_get_bit_depth(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t h = height, w = width;
  std::vector<float> data(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double v;
        if (bit_depth == 16) {
          const std::uint8_t* p = rows[y] + (x * 3 + c) * 2;
          v = double((p[0] << 8) | p[1]) / 65535.0;  // PNG samples are big-endian
        } else {
          v = double(rows[y][x * 3 + c]) / 255.0;
        }
        data[(c * h + y) * w + x] = float(v);
      }
  return Tensor({3, h, w}, std::move(data));
}

/// Writes a [C, H, W] (C = 1 or 3) tensor in [0, 1] as an 8-bit PNG with fixed
/// encoder settings, so identical inputs produce identical bytes.
template <class T>
void write_png(const std::filesystem::path& path, const BasicTensor<T>& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
    throw ShapeError("write_png expects [1|3, H, W], got " + shape_string(img.shape()));
  }
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  std::vector<std::uint8_t> buffer(h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) {
        const double v = std::clamp(double(img[(k * h + y) * w + x]), 0.0, 1.0);
        buffer[(y * w + x) * c + k] = std::uint8_t(std::lround(v * 255.0));
      }
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buffer.data() + y * w * c;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("failed to encode " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8,
               c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Largest centred square crop followed by an area-weighted resize to size x size.
inline Tensor center_crop_resize(const Tensor& img, std::size_t size) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::size_t side = std::min(h, w);
  const std::size_t y0 = (h - side) / 2, x0 = (w - side) / 2;
  std::vector<float> out(c * size * size);
  const double scale = double(side) / double(size);
  // Overlap of source pixel [p, p+1) with target cell [lo, hi).
  auto weights = [&](std::size_t i) {
    std::vector<std::pair<std::size_t, double>> ws;
    const double lo = double(i) * scale, hi = double(i + 1) * scale;
    for (auto p = std::size_t(std::floor(lo)); p < std::min(side, std::size_t(std::ceil(hi))); ++p) {
      const double ov = std::min(hi, double(p + 1)) - std::max(lo, double(p));
      if (ov > 0) ws.push_back({p, ov / scale});
    }
    return ws;
  };
  std::vector<std::vector<std::pair<std::size_t, double>>> table(size);
  for (std::size_t i = 0; i < size; ++i) table[i] = weights(i);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double acc = 0;
        for (auto [py, wy] : table[y])
          for (auto [px, wx] : table[x]) acc += wy * wx * img[(k * h + y0 + py) * w + x0 + px];
        out[(k * size + y) * size + x] = float(acc);
      }
  return Tensor({c, size, size}, std::move(out));
}

struct Dataset {
  std::vector<Tensor> images;  // [3, size, size] in [0, 1]
  std::vector<std::string> names;
};

/// All decodable PNGs under `dir` (non-recursive) in lexicographic order.
/// Corrupt files are skipped with a warning on `warn`.
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t size,
                            std::ostream& warn = std::cerr) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DatasetError("dataset directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Dataset ds;
  for (const auto& f : files) {
    std::string err;
    auto img = read_png(f, &err);
    if (!img) {
      warn << "warning: skipping " << err << "\n";
      continue;
    }
    ds.images.push_back(center_crop_resize(*img, size));
    ds.names.push_back(f.filename().string());
  }
  if (ds.images.empty()) throw DatasetError("no readable PNG images in " + dir.string());
  return ds;
}

/// One procedural image: a two-colour gradient, a few filled shapes and,
/// with some probability, a sinusoidal texture patch.
inline Tensor synthetic_image(std::size_t size, Rng& rng) {
  const std::size_t n = size;
  std::vector<float> img(3 * n * n);
  auto colour = [&] { return std::array<double, 3>{rng.uniform(), rng.uniform(), rng.uniform()}; };
  auto set = [&](std::size_t y, std::size_t x, const std::array<double, 3>& c, double alpha) {
    for (std::size_t k = 0; k < 3; ++k) {
      float& v = img[(k * n + y) * n + x];
      v = float((1.0 - alpha) * v + alpha * c[k]);
    }
  };
  const auto c0 = colour(), c1 = colour();
  const double angle = rng.uniform(0.0, 2.0 * M_PI);
  const double dx = std::cos(angle), dy = std::sin(angle);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double u = ((double(x) / double(n - 1) - 0.5) * dx + (double(y) / double(n - 1) - 0.5) * dy) /
                           std::sqrt(2.0) + 0.5;
      for (std::size_t k = 0; k < 3; ++k) img[(k * n + y) * n + x] = float((1 - u) * c0[k] + u * c1[k]);
    }
  const auto shapes = rng.uniform_int(1, 3);
  for (std::int64_t s = 0; s < shapes; ++s) {
    const auto c = colour();
    const double cx = rng.uniform(0.15, 0.85) * double(n), cy = rng.uniform(0.15, 0.85) * double(n);
    const double r = rng.uniform(0.12, 0.3) * double(n);
    const bool circle = rng.bernoulli(0.5);
    const double aspect = rng.uniform(0.5, 1.5);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double px = double(x) + 0.5 - cx, py = double(y) + 0.5 - cy;
        // Soft one-pixel edge keeps shapes band-limited enough to be learnable.
        const double d = circle ? std::hypot(px, py * aspect) - r
                                : std::max(std::abs(px) - r, std::abs(py) - r * aspect);
        const double alpha = std::clamp(0.5 - d, 0.0, 1.0);
        if (alpha > 0) set(y, x, c, alpha);
      }
  }
  if (rng.bernoulli(0.5)) {
    const double freq = rng.uniform(0.15, 0.6), phase = rng.uniform(0.0, 2.0 * M_PI);
    const double th = rng.uniform(0.0, M_PI), amp = rng.uniform(0.05, 0.2);
    const std::size_t x0 = std::size_t(rng.uniform_int(0, std::int64_t(n / 2)));
    const std::size_t y0 = std::size_t(rng.uniform_int(0, std::int64_t(n / 2)));
    for (std::size_t y = y0; y < std::min(n, y0 + n / 2); ++y)
      for (std::size_t x = x0; x < std::min(n, x0 + n / 2); ++x) {
        const double v = amp * std::sin(freq * (double(x) * std::cos(th) + double(y) * std::sin(th)) + phase);
        for (std::size_t k = 0; k < 3; ++k) {
          float& p = img[(k * n + y) * n + x];
          p = float(std::clamp(double(p) + v, 0.0, 1.0));
        }
      }
  }
  return Tensor({3, n, n}, std::move(img));
}

/// N seeded procedural images; image i depends only on (seed, i).
inline Dataset synthetic_dataset(std::size_t count, std::size_t size, std::uint64_t seed) {
  if (size < 2) throw std::invalid_argument("synthetic images need size >= 2");
  Dataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::stream(seed, i);
    ds.images.push_back(synthetic_image(size, rng));
    ds.names.push_back("synthetic_" + std::to_string(i));
  }
  return ds;
}

}  // namespace ddc
