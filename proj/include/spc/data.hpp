#pragma once

// Datasets: CIFAR-layout binary IO and a deterministic synthetic generator.
//
// Record layout (CIFAR-10 binary): one label byte (0..9) followed by
// 3 * side * side pixel bytes, planar channel-major (all of R, then G, then
// B, each row-major).  At side 32 a record is 3073 bytes and a 10,000-image
// batch file is 30,730,000 bytes.  Pixels map to [0,1] as byte/255.
//
// The synthetic generator emits that exact byte format: class-keyed oriented
// sinusoid gratings (orientation, frequency, per-channel amplitude/bias) plus
// a class-keyed center blob, with per-image phase/position jitter and pixel
// noise, quantized to bytes.  Image i of a split draws everything from
// stream (seed, synth tag, split, i), so any image can be regenerated in
// isolation and files are byte-reproducible.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "spc/common.hpp"
#include "spc/rng.hpp"

namespace spc {

template <class T>
struct Dataset {
  int image_side = 32;
  std::vector<T> images;   // count * 3 * side * side, planar, in [0,1]
  std::vector<int> labels;

  int count() const { return static_cast<int>(labels.size()); }
  const T* image(int i) const {
    return images.data() +
           static_cast<std::size_t>(i) * 3 * image_side * image_side;
  }
  void truncate(int n) {
    if (n >= count()) return;
    labels.resize(n);
    images.resize(static_cast<std::size_t>(n) * 3 * image_side * image_side);
  }
};

inline std::size_t cifar_record_bytes(int side) {
  return 1 + static_cast<std::size_t>(3) * side * side;
}

// ---------------------------------------------------------------------------
// Synthetic generation.

inline std::vector<std::uint8_t> synth_cifar_records(int count, int side,
                                                     std::uint64_t seed,
                                                     std::uint64_t split) {
  if (count < 0 || side < 2) throw ConfigError("synthetic dataset extents invalid");
  const std::size_t rec = cifar_record_bytes(side);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(count) * rec);
  const double tau = 6.283185307179586476925286766559;
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::stream({seed, static_cast<std::uint64_t>(StreamTag::kSynthData),
                           split, static_cast<std::uint64_t>(i)});
    const int k = i % 10;
    const double theta = tau / 2.0 * k / 10.0;
    const double freq = 3.0 + (k % 3);
    const double phase = tau * k / 10.0 + rng.next_uniform(-0.6, 0.6);
    const double cx = side / 2.0 + rng.next_uniform(-4.0, 4.0);
    const double cy = side / 2.0 + rng.next_uniform(-4.0, 4.0);
    const double rho = side / 4.0;
    std::uint8_t* p = out.data() + static_cast<std::size_t>(i) * rec;
    p[0] = static_cast<std::uint8_t>(k);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int c = 0; c < 3; ++c) {
      const double amp = 0.18 + 0.17 * ((k * 7 + c * 3) % 10) / 9.0;
      const double bias = 0.35 + 0.30 * ((k * 3 + c * 7) % 10) / 9.0;
      const double blob_sign = ((k + c) % 3) - 1.0;  // -1, 0, or +1
      std::uint8_t* plane = p + 1 + static_cast<std::size_t>(c) * side * side;
      for (int r = 0; r < side; ++r)
        for (int col = 0; col < side; ++col) {
          const double u = freq * tau / side * (r * ct + col * st) + phase;
          const double d2 = (r - cy) * (r - cy) + (col - cx) * (col - cx);
          double v = bias + amp * std::sin(u) +
                     0.15 * blob_sign * std::exp(-d2 / (2.0 * rho * rho)) +
                     0.03 * rng.next_gaussian();
          v = std::min(1.0, std::max(0.0, v));
          plane[static_cast<std::size_t>(r) * side + col] =
              static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
  }
  return out;
}

inline void write_bytes_file(const std::string& path,
                             const std::vector<std::uint8_t>& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("cannot write: " + path);
  const std::size_t n = bytes.empty() ? 0 : std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw DataError("short write: " + path);
}

// ---------------------------------------------------------------------------
// Loading.

template <class T>
Dataset<T> dataset_from_records(const std::vector<std::uint8_t>& bytes, int side) {
  const std::size_t rec = cifar_record_bytes(side);
  if (bytes.size() % rec != 0)
    throw DataError("dataset byte length " + std::to_string(bytes.size()) +
                    " is not a multiple of the record size " + std::to_string(rec));
  Dataset<T> d;
  d.image_side = side;
  const std::size_t n = bytes.size() / rec;
  d.labels.reserve(n);
  d.images.resize(n * (rec - 1));
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = bytes.data() + i * rec;
    if (p[0] > 9)
      throw DataError("record " + std::to_string(i) + " has label byte " +
                      std::to_string(int(p[0])) + " outside 0..9");
    d.labels.push_back(p[0]);
    T* dst = d.images.data() + i * (rec - 1);
    for (std::size_t j = 0; j + 1 < rec; ++j)
      dst[j] = static_cast<T>(p[j + 1]) / T(255);
  }
  return d;
}

inline std::vector<std::uint8_t> read_bytes_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot read: " + path);
  std::fseek(f, 0, SEEK_END);
  const long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<std::uint8_t> bytes(sz > 0 ? static_cast<std::size_t>(sz) : 0);
  const std::size_t n = bytes.empty() ? 0 : std::fread(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw DataError("short read: " + path);
  return bytes;
}

template <class T>
Dataset<T> load_cifar_files(const std::vector<std::string>& paths, int side = 32) {
  Dataset<T> all;
  all.image_side = side;
  for (const std::string& path : paths) {
    Dataset<T> part = dataset_from_records<T>(read_bytes_file(path), side);
    all.images.insert(all.images.end(), part.images.begin(), part.images.end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  return all;
}

// In-memory synthetic dataset; values equal what a write/load round trip
// through the byte format would produce.
template <class T>
Dataset<T> synth_dataset(int count, int side, std::uint64_t seed,
                         std::uint64_t split) {
  return dataset_from_records<T>(synth_cifar_records(count, side, seed, split),
                                 side);
}

}  // namespace spc
