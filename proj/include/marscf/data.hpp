#pragma once

// Dataset ingestion and image IO.
//
// Supported on-disk formats (all integers noted LE = little-endian,
// BE = big-endian):
//
//   IDX (ubyte images): BE u32 magic 0x00000803, BE u32 count, BE u32 rows,
//     BE u32 cols, then count*rows*cols raw bytes. Always 1 channel.
//
//   Binary PGM ("P5") / PPM ("P6"): ASCII header (token whitespace, '#'
//     comments) width, height, maxval <= 255, then binary rows, 1 byte per
//     sample (3 interleaved samples per pixel for P6). A dataset path may be
//     one file or a directory scanned for *.pgm / *.ppm in sorted order.
//
//   Raw tensor: LE u32 magic 0x4D525431 ("MRT1"), u8 dtype (1 = uint8),
//     u8 rank, rank x LE u32 dims, then row-major payload. Image datasets use
//     rank 4: [count, channels, height, width].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"

namespace marscf {

struct Dataset {
  int channels = 1;
  int size = 8;
  int bits = 8;
  std::vector<std::vector<double>> images;  // integer-valued, [C*size*size] each

  std::int64_t dims() const { return static_cast<std::int64_t>(channels) * size * size; }
};

struct DatasetSpec {
  std::string path;
  std::string format = "idx";  // idx | pgm | raw
  int channels = 1;
  int size = 8;
  int bits = 8;
  double val_fraction = 0.2;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "data: cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

inline std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

}  // namespace detail

inline Dataset load_idx(const std::string& path) {
  const auto buf = detail::read_file(path);
  check(buf.size() >= 16, "data: " + path + ": IDX header truncated");
  check(detail::be32(buf.data()) == 0x00000803u,
        "data: " + path + ": bad IDX magic (want 0x00000803)");
  const std::uint32_t count = detail::be32(buf.data() + 4);
  const std::uint32_t rows = detail::be32(buf.data() + 8);
  const std::uint32_t cols = detail::be32(buf.data() + 12);
  check(rows == cols, "data: " + path + ": non-square IDX images unsupported");
  const std::uint64_t need = 16ull + std::uint64_t(count) * rows * cols;
  check(buf.size() >= need, "data: " + path + ": IDX payload truncated (record " +
                                std::to_string((buf.size() - 16) / (rows * cols)) + ")");
  Dataset ds;
  ds.channels = 1;
  ds.size = static_cast<int>(rows);
  ds.bits = 8;
  const std::uint8_t* p = buf.data() + 16;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::vector<double> img(rows * cols);
    for (std::uint32_t j = 0; j < rows * cols; ++j) img[j] = p[j];
    p += rows * cols;
    ds.images.push_back(std::move(img));
  }
  return ds;
}

namespace detail {

inline std::uint32_t pnm_token(const std::uint8_t* buf, size_t n, size_t& pos,
                               const std::string& path) {
  // skip whitespace and '#' comments
  while (pos < n) {
    if (std::isspace(buf[pos])) {
      ++pos;
    } else if (buf[pos] == '#') {
      while (pos < n && buf[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  check(pos < n && std::isdigit(buf[pos]), "data: " + path + ": malformed PNM header");
  std::uint64_t v = 0;
  while (pos < n && std::isdigit(buf[pos])) {
    v = v * 10 + (buf[pos] - '0');
    check(v <= 1u << 30, "data: " + path + ": PNM header value overflow");
    ++pos;
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

/// One binary PGM/PPM file -> one image [C*H*W] plus its geometry.
inline void load_pnm_file(const std::string& path, int& channels, int& height, int& width,
                          std::vector<double>& out) {
  const auto buf = detail::read_file(path);
  check(buf.size() >= 2, "data: " + path + ": truncated PNM");
  check(buf[0] == 'P' && (buf[1] == '5' || buf[1] == '6'),
        "data: " + path + ": expected binary PGM (P5) or PPM (P6)");
  channels = buf[1] == '5' ? 1 : 3;
  size_t pos = 2;
  width = static_cast<int>(detail::pnm_token(buf.data(), buf.size(), pos, path));
  height = static_cast<int>(detail::pnm_token(buf.data(), buf.size(), pos, path));
  const std::uint32_t maxval = detail::pnm_token(buf.data(), buf.size(), pos, path);
  check(maxval > 0 && maxval <= 255, "data: " + path + ": only 8-bit PNM supported");
  check(pos < buf.size() && std::isspace(buf[pos]), "data: " + path + ": malformed PNM header");
  ++pos;  // single whitespace byte separates header and raster
  const std::uint64_t count = std::uint64_t(channels) * height * width;
  check(buf.size() - pos >= count, "data: " + path + ": PNM payload truncated");
  out.assign(count, 0.0);
  // interleaved samples -> planar [C,H,W]
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c)
        out[(static_cast<size_t>(c) * height + y) * width + x] =
            buf[pos + (static_cast<size_t>(y) * width + x) * channels + c];
}

inline Dataset load_pnm(const std::string& path) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path)) {
      const std::string ext = e.path().extension().string();
      if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    check(!files.empty(), "data: no .pgm/.ppm files under " + path);
  } else {
    files.push_back(path);
  }
  Dataset ds;
  ds.bits = 8;
  for (size_t i = 0; i < files.size(); ++i) {
    int c, h, w;
    std::vector<double> img;
    load_pnm_file(files[i], c, h, w, img);
    check(h == w, "data: " + files[i] + ": non-square image");
    if (i == 0) {
      ds.channels = c;
      ds.size = h;
    } else {
      check(c == ds.channels && h == ds.size,
            "data: " + files[i] + ": shape differs from first image");
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

inline Dataset load_raw(const std::string& path) {
  const auto buf = detail::read_file(path);
  check(buf.size() >= 6, "data: " + path + ": raw header truncated");
  const std::uint32_t magic = std::uint32_t(buf[0]) | (std::uint32_t(buf[1]) << 8) |
                              (std::uint32_t(buf[2]) << 16) | (std::uint32_t(buf[3]) << 24);
  check(magic == 0x4D525431u, "data: " + path + ": bad raw-tensor magic");
  check(buf[4] == 1, "data: " + path + ": unsupported dtype code");
  const int rank = buf[5];
  check(rank == 4, "data: " + path + ": image datasets need rank 4");
  check(buf.size() >= 6 + 4u * rank, "data: " + path + ": raw dims truncated");
  std::uint32_t dims[4];
  for (int d = 0; d < 4; ++d) {
    const std::uint8_t* p = buf.data() + 6 + 4 * d;
    dims[d] = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
              (std::uint32_t(p[3]) << 24);
  }
  check(dims[2] == dims[3], "data: " + path + ": non-square raw images");
  const std::uint64_t per = std::uint64_t(dims[1]) * dims[2] * dims[3];
  const std::uint64_t need = 6 + 16 + std::uint64_t(dims[0]) * per;
  check(buf.size() >= need, "data: " + path + ": raw payload truncated (record " +
                                std::to_string((buf.size() - 22) / std::max<std::uint64_t>(per, 1)) +
                                ")");
  Dataset ds;
  ds.channels = static_cast<int>(dims[1]);
  ds.size = static_cast<int>(dims[2]);
  ds.bits = 8;
  const std::uint8_t* p = buf.data() + 22;
  for (std::uint32_t i = 0; i < dims[0]; ++i) {
    std::vector<double> img(per);
    for (std::uint64_t j = 0; j < per; ++j) img[j] = p[j];
    p += per;
    ds.images.push_back(std::move(img));
  }
  return ds;
}

inline void write_raw(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(out.good(), "data: cannot open " + path + " for writing");
  const std::uint32_t magic = 0x4D525431u;
  std::uint8_t head[6] = {std::uint8_t(magic & 0xff), std::uint8_t((magic >> 8) & 0xff),
                          std::uint8_t((magic >> 16) & 0xff), std::uint8_t(magic >> 24), 1, 4};
  out.write(reinterpret_cast<const char*>(head), 6);
  const std::uint32_t dims[4] = {static_cast<std::uint32_t>(ds.images.size()),
                                 static_cast<std::uint32_t>(ds.channels),
                                 static_cast<std::uint32_t>(ds.size),
                                 static_cast<std::uint32_t>(ds.size)};
  for (std::uint32_t d : dims) {
    std::uint8_t b[4] = {std::uint8_t(d & 0xff), std::uint8_t((d >> 8) & 0xff),
                         std::uint8_t((d >> 16) & 0xff), std::uint8_t(d >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  for (const auto& img : ds.images)
    for (double v : img) {
      const std::uint8_t b = static_cast<std::uint8_t>(v);
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  check(out.good(), "data: write failed for " + path);
}

/// Planar [C,H,W] values in [0,1) written as 8-bit PGM (C=1) or PPM (C=3).
inline void write_pnm(const std::string& path, const double* vals, int channels, int height,
                      int width) {
  check(channels == 1 || channels == 3, "data: PNM supports 1 or 3 channels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(out.good(), "data: cannot open " + path + " for writing");
  out << (channels == 1 ? "P5" : "P6") << "\n" << width << " " << height << "\n255\n";
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c) {
        const double v = vals[(static_cast<size_t>(c) * height + y) * width + x];
        const int q = static_cast<int>(std::lround(v * 256.0 - 0.5));
        const std::uint8_t b = static_cast<std::uint8_t>(std::clamp(q, 0, 255));
        out.write(reinterpret_cast<const char*>(&b), 1);
      }
  check(out.good(), "data: write failed for " + path);
}

inline Dataset load_dataset(const DatasetSpec& spec) {
  Dataset ds;
  if (spec.format == "idx")
    ds = load_idx(spec.path);
  else if (spec.format == "pgm")
    ds = load_pnm(spec.path);
  else if (spec.format == "raw")
    ds = load_raw(spec.path);
  else
    throw std::invalid_argument("data: unknown format '" + spec.format + "'");
  check(ds.channels == spec.channels && ds.size == spec.size,
        "data: " + spec.path + " has shape [" + std::to_string(ds.channels) + "," +
            std::to_string(ds.size) + "," + std::to_string(ds.size) + "], spec wants [" +
            std::to_string(spec.channels) + "," + std::to_string(spec.size) + "," +
            std::to_string(spec.size) + "]");
  ds.bits = spec.bits;
  const double maxv = std::pow(2.0, spec.bits) - 1.0;
  for (size_t i = 0; i < ds.images.size(); ++i)
    for (double v : ds.images[i])
      check(v >= 0.0 && v <= maxv,
            "data: " + spec.path + " record " + std::to_string(i) + " exceeds bit depth");
  return ds;
}

/// Anti-aliased random rectangles and discs on plain backgrounds; the smoke
/// training corpus. 4x4 supersampled coverage per pixel, values 0..255.
inline Dataset make_synthetic(int count, int size, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.channels = 1;
  ds.size = size;
  ds.bits = 8;
  for (int n = 0; n < count; ++n) {
    const double bg = 20.0 + 60.0 * rng.uniform();
    const double fg = 160.0 + 90.0 * rng.uniform();
    const bool disc = rng.uniform() < 0.5;
    const double cx = size * (0.25 + 0.5 * rng.uniform());
    const double cy = size * (0.25 + 0.5 * rng.uniform());
    const double rx = size * (0.12 + 0.25 * rng.uniform());
    const double ry = disc ? rx : size * (0.12 + 0.25 * rng.uniform());
    std::vector<double> img(static_cast<size_t>(size) * size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double cover = 0.0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx) {
            const double px = x + (sx + 0.5) / 4.0;
            const double py = y + (sy + 0.5) / 4.0;
            bool inside;
            if (disc) {
              const double dx = (px - cx) / rx, dy = (py - cy) / rx;
              inside = dx * dx + dy * dy <= 1.0;
            } else {
              inside = std::abs(px - cx) <= rx && std::abs(py - cy) <= ry;
            }
            if (inside) cover += 1.0;
          }
        cover /= 16.0;
        img[static_cast<size_t>(y) * size + x] = std::round(bg + (fg - bg) * cover);
      }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

/// (img + u)/2^bits with u ~ Uniform[0,1) per element: integer pixels become
/// a continuous density target on [0,1).
inline Tensor dequantize(const Tensor& img, int bits, Rng& rng) {
  check(bits >= 1 && bits <= 16, "dequantize: bad bit depth");
  const double maxv = std::pow(2.0, bits) - 1.0;
  const double inv = 1.0 / std::pow(2.0, bits);
  Tensor out(img.shape());
  for (std::int64_t i = 0; i < img.size(); ++i) {
    const double v = img.data()[i];
    check(v == std::floor(v) && v >= 0.0 && v <= maxv,
          "dequantize: value " + std::to_string(v) + " outside [0, 2^bits-1] integers");
    out.data()[i] = (v + rng.uniform()) * inv;
  }
  return out;
}

/// Stacks dataset records idx[0..k) into a [k,C,N,N] tensor.
inline Tensor gather_batch(const Dataset& ds, const std::vector<size_t>& idx) {
  check(!idx.empty(), "gather_batch: empty index list");
  Tensor out({static_cast<int>(idx.size()), ds.channels, ds.size, ds.size});
  const std::int64_t per = ds.dims();
  for (size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] < ds.images.size(), "gather_batch: index out of range");
    std::copy(ds.images[idx[i]].begin(), ds.images[idx[i]].end(), out.data() + i * per);
  }
  return out;
}

}  // namespace marscf
