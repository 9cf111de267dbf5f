#pragma once

// Dense patch grids over planar (C=3, N, N) images.
//
// A patch grid covers the image with n x n windows at stride S; per axis
// there are m = (N - n) / S + 1 windows (floor division, trailing pixels
// uncovered when S does not divide N - n).  Each patch is flattened
// channel-major: index c*n*n + r*n + col, channel outermost.  Patches are
// stored row-major over (i, j) grid position, so patch p = i*m + j.

#include <vector>

#include "spc/common.hpp"

namespace spc {

template <class T>
struct PatchGrid {
  int m = 0;       // windows per axis
  int n = 0;       // patch side
  int stride = 1;  // window stride
  int nbar = 0;    // flattened patch length, 3*n*n
  std::vector<T> data;  // count() rows of nbar values

  int count() const { return m * m; }
  T* patch(int p) { return data.data() + static_cast<std::size_t>(p) * nbar; }
  const T* patch(int p) const {
    return data.data() + static_cast<std::size_t>(p) * nbar;
  }
};

// image: planar C-major buffer of 3*N*N values (channel, row, col).
template <class T>
PatchGrid<T> extract_patches(const T* image, int N, int n, int S) {
  if (N <= 0 || n <= 0) throw ShapeError("patch/image sides must be positive");
  if (n > N) throw ShapeError("patch side exceeds image side");
  if (S < 1) throw ShapeError("patch stride must be >= 1");
  PatchGrid<T> g;
  g.n = n;
  g.stride = S;
  g.nbar = 3 * n * n;
  g.m = (N - n) / S + 1;
  g.data.resize(static_cast<std::size_t>(g.m) * g.m * g.nbar);
  for (int i = 0; i < g.m; ++i) {
    for (int j = 0; j < g.m; ++j) {
      T* out = g.patch(i * g.m + j);
      for (int c = 0; c < 3; ++c) {
        const T* plane = image + static_cast<std::size_t>(c) * N * N;
        for (int r = 0; r < n; ++r) {
          const T* src = plane + static_cast<std::size_t>(i * S + r) * N + j * S;
          T* dst = out + c * n * n + r * n;
          for (int col = 0; col < n; ++col) dst[col] = src[col];
        }
      }
    }
  }
  return g;
}

template <class T>
PatchGrid<T> extract_patches(const std::vector<T>& image, int N, int n, int S) {
  if (image.size() != static_cast<std::size_t>(3) * N * N)
    throw ShapeError("image buffer is not 3*N*N");
  return extract_patches(image.data(), N, n, S);
}

// Adjoint of extraction: accumulate per-patch values back onto the image
// plane (+= into out, overlapping windows sum).  out must hold 3*N*N values.
template <class T>
void scatter_patches_add(const PatchGrid<T>& g, int N, T* out) {
  if (g.n > N) throw ShapeError("patch side exceeds image side");
  for (int i = 0; i < g.m; ++i) {
    for (int j = 0; j < g.m; ++j) {
      const T* src = g.patch(i * g.m + j);
      for (int c = 0; c < 3; ++c) {
        T* plane = out + static_cast<std::size_t>(c) * N * N;
        for (int r = 0; r < g.n; ++r) {
          T* dst = plane + static_cast<std::size_t>(i * g.stride + r) * N +
                   j * g.stride;
          const T* row = src + c * g.n * g.n + r * g.n;
          for (int col = 0; col < g.n; ++col) dst[col] += row[col];
        }
      }
    }
  }
}

}  // namespace spc
