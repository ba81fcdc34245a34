#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "prom/tensor.hpp"

namespace prom {

struct Dataset {
  FloatTensor images;       // N x C x H x W
  std::vector<int> labels;  // length N

  int size() const { return images.shape.rank() ? images.shape[0] : 0; }
};

// ---------------------------------------------------------------------------
// IDX container (byte layout in docs/dataset_formats.md): magic bytes
// 0x00 0x00 <dtype> <rank>, rank big-endian uint32 dims, then payload.
// dtype 0x08 = uint8, 0x0D = big-endian float32.
// ---------------------------------------------------------------------------

namespace detail {
inline void write_be32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("idx: truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}
}  // namespace detail

inline void save_idx_images(const std::string& path, const FloatTensor& images) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  detail::write_be32(os, 0x0000'0D04u);  // float32, rank 4
  for (int d : images.shape.dims) detail::write_be32(os, static_cast<std::uint32_t>(d));
  for (float v : images.data) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    detail::write_be32(os, u);
  }
}

inline void save_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  detail::write_be32(os, 0x0000'0801u);  // uint8, rank 1
  detail::write_be32(os, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) os.put(static_cast<char>(l));
}

/// Load an IDX image file. uint8 payloads are scaled to [0,1]; rank-3 files
/// (N,H,W) gain a singleton channel.
inline FloatTensor load_idx_images(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  const std::uint32_t magic = detail::read_be32(is);
  if ((magic & 0xffff0000u) != 0)
    throw std::runtime_error("idx: bad magic in " + path);
  const int dtype = static_cast<int>((magic >> 8) & 0xffu);
  const int rank = static_cast<int>(magic & 0xffu);
  if (rank != 3 && rank != 4) throw std::runtime_error("idx: image rank must be 3 or 4");
  std::vector<int> dims;
  for (int i = 0; i < rank; ++i) dims.push_back(static_cast<int>(detail::read_be32(is)));
  if (rank == 3) dims = {dims[0], 1, dims[1], dims[2]};
  FloatTensor t{Shape(dims)};
  if (dtype == 0x08) {
    std::vector<unsigned char> raw(static_cast<size_t>(t.size()));
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw std::runtime_error("idx: truncated payload in " + path);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = raw[static_cast<size_t>(i)] / 255.0f;
  } else if (dtype == 0x0D) {
    for (std::int64_t i = 0; i < t.size(); ++i) {
      const std::uint32_t u = detail::read_be32(is);
      float f;
      std::memcpy(&f, &u, 4);
      t[i] = f;
    }
  } else {
    throw std::runtime_error("idx: unsupported dtype in " + path);
  }
  return t;
}

inline std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  const std::uint32_t magic = detail::read_be32(is);
  if (magic != 0x0000'0801u) throw std::runtime_error("idx: bad label magic in " + path);
  const auto n = detail::read_be32(is);
  std::vector<int> labels(n);
  for (auto& l : labels) {
    const int c = is.get();
    if (c < 0) throw std::runtime_error("idx: truncated labels in " + path);
    l = c;
  }
  return labels;
}

inline void save_idx_dataset(const std::string& dir, const Dataset& ds,
                             const std::string& stem = "data") {
  std::filesystem::create_directories(dir);
  save_idx_images(dir + "/" + stem + "-images.idx", ds.images);
  save_idx_labels(dir + "/" + stem + "-labels.idx", ds.labels);
}

inline Dataset load_idx_dataset(const std::string& dir, const std::string& stem = "data") {
  Dataset ds;
  ds.images = load_idx_images(dir + "/" + stem + "-images.idx");
  ds.labels = load_idx_labels(dir + "/" + stem + "-labels.idx");
  if (ds.size() != static_cast<int>(ds.labels.size()))
    throw std::runtime_error("dataset: image/label count mismatch in " + dir);
  return ds;
}

// ---------------------------------------------------------------------------
// Directory-of-raw-tensors alternative: one little-endian float32 C*H*W blob
// per sample plus labels.csv rows "<filename>,<label>".
// ---------------------------------------------------------------------------

inline void save_raw_dataset(const std::string& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir + "/labels.csv");
  csv << "file,label\n";
  const std::int64_t per = ds.images.size() / ds.size();
  for (int i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05d.bin", i);
    std::ofstream os(dir + "/" + name, std::ios::binary);
    os.write(reinterpret_cast<const char*>(ds.images.data.data() + per * i),
             static_cast<std::streamsize>(per * 4));
    csv << name << ',' << ds.labels[static_cast<size_t>(i)] << "\n";
  }
}

inline Dataset load_raw_dataset(const std::string& dir, int channels, int height, int width) {
  std::ifstream csv(dir + "/labels.csv");
  if (!csv) throw std::runtime_error("cannot open " + dir + "/labels.csv");
  std::string line;
  std::getline(csv, line);  // header
  std::vector<std::string> files;
  std::vector<int> labels;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("labels.csv: malformed row");
    files.push_back(line.substr(0, comma));
    labels.push_back(std::stoi(line.substr(comma + 1)));
  }
  const std::int64_t per = static_cast<std::int64_t>(channels) * height * width;
  Dataset ds;
  ds.images = FloatTensor(Shape{static_cast<int>(files.size()), channels, height, width});
  ds.labels = std::move(labels);
  for (size_t i = 0; i < files.size(); ++i) {
    std::ifstream is(dir + "/" + files[i], std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + dir + "/" + files[i]);
    is.read(reinterpret_cast<char*>(ds.images.data.data() + per * static_cast<std::int64_t>(i)),
            static_cast<std::streamsize>(per * 4));
    if (!is) throw std::runtime_error("raw dataset: truncated " + files[i]);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic 10-class image set for desk-scale runs: each class combines a
// distinctive per-channel offset signature with an oriented sinusoid, plus
// per-sample phase jitter and Gaussian noise.
// ---------------------------------------------------------------------------

inline Dataset make_synthetic_dataset(int n, std::uint64_t seed, int classes = 10, int res = 32) {
  constexpr double kPi = 3.14159265358979323846;
  Rng rng(seed);
  Dataset ds;
  ds.images = FloatTensor(Shape{n, 3, res, res});
  ds.labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int k = i % classes;
    ds.labels[static_cast<size_t>(i)] = k;
    const double theta = kPi * k / classes;
    const double freq = 2.0 + (k % 3);
    const double phase = 2.0 * kPi * rng.uniform();
    const double jitter = 0.2 * rng.normal();
    for (int c = 0; c < 3; ++c) {
      const double dc = 0.6 * std::cos(2.0 * kPi * (k + 3.0 * c) / classes) + jitter;
      for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
          const double t = (x * std::cos(theta) + y * std::sin(theta)) / res;
          const double v =
              dc + 0.5 * std::sin(2.0 * kPi * freq * t + phase) + 0.15 * rng.normal();
          ds.images.at(i, c, y, x) = static_cast<float>(v);
        }
    }
  }
  // deterministic shuffle so class order is not an artifact of indexing
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_u32() % static_cast<std::uint32_t>(i + 1));
    std::swap(ds.labels[static_cast<size_t>(i)], ds.labels[static_cast<size_t>(j)]);
    for (std::int64_t d = 0; d < ds.images.size() / n; ++d)
      std::swap(ds.images.data[static_cast<size_t>(ds.images.size() / n * i + d)],
                ds.images.data[static_cast<size_t>(ds.images.size() / n * j + d)]);
  }
  return ds;
}

/// Rows i0..i0+count of a dataset as one batch.
inline void slice_batch(const Dataset& ds, const std::vector<int>& order, int i0, int count,
                        FloatTensor& x, std::vector<int>& y) {
  const std::int64_t per = ds.images.size() / ds.size();
  Shape s = ds.images.shape;
  s.dims[0] = count;
  x = FloatTensor(s);
  y.resize(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int src = order[static_cast<size_t>(i0 + i)];
    std::copy_n(ds.images.data.begin() + per * src, per, x.data.begin() + per * i);
    y[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
  }
}

}  // namespace prom
