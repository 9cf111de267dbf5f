#pragma once

// Sparse front-end encoder.
//
// Per n x n patch (stride S) of a (3, N, N) image in [0,1]:
//   1. project onto every dictionary atom: proj_l = <d_l, patch>,
//   2. keep the T projections of largest magnitude (ties: lower channel id),
//   3. independently drop each kept entry with probability p (no rescaling);
//      the Bernoulli draw for (patch, channel) comes from its own RNG stream,
//      so masks depend only on the caller's stream prefix, never on order,
//   4. dead-zone ternary quantization: values with |proj| >= beta*eps*||d_l||_1
//      (inclusive) become sign(proj) * ||d_l||_1 (or +/-1 when scale_by_l1 is
//      off); everything closer to zero is squashed to exactly zero.
// With beta > 1 an adversary constrained to ||e||_inf <= eps can never flip
// the sign of an active output, only silence it or wake a silent one: the
// projection moves by at most eps*||d_l||_1 < threshold.
//
// Steps 2-4 can be disabled individually (ablations); with all three off the
// code equals the raw projections exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "spc/common.hpp"
#include "spc/dictionary.hpp"
#include "spc/patches.hpp"
#include "spc/rng.hpp"

namespace spc {

struct EncoderConfig {
  int n = 4;        // patch side
  int S = 2;        // patch stride
  int T = 50;       // entries kept per patch before dropout
  double p = 0.95;  // drop probability for each kept entry
  double beta = 3.0;
  double eps = 8.0 / 255.0;
  bool enable_topT = true;
  bool enable_dropout = true;
  bool enable_quant = true;
  bool scale_by_l1 = true;  // false: quantize to +/-1 instead of +/-||d_l||_1

  double threshold(double atom_l1) const { return beta * eps * atom_l1; }

  // Throws ConfigError on invalid values; returns soft warnings.
  std::vector<std::string> validate() const {
    if (n < 1 || S < 1) throw ConfigError("encoder patch side/stride must be >= 1");
    if (T < 0) throw ConfigError("encoder T must be >= 0");
    if (p < 0.0 || p > 1.0) throw ConfigError("encoder drop probability must be in [0,1]");
    if (beta < 0.0 || eps < 0.0) throw ConfigError("encoder beta/eps must be >= 0");
    std::vector<std::string> warnings;
    if (enable_quant && beta <= 1.0)
      warnings.push_back(
          "beta <= 1: active code signs are no longer provably stable under "
          "perturbations of sup-norm eps");
    return warnings;
  }
};

// Channel ids of the T largest-magnitude entries (ties: lower id), ascending.
inline std::vector<int> top_t_indices(const double* v, int L, int T) {
  std::vector<int> idx(L);
  for (int l = 0; l < L; ++l) idx[l] = l;
  if (T < L) {
    std::partial_sort(idx.begin(), idx.begin() + T, idx.end(),
                      [&](int a, int b) {
                        const double ma = std::abs(v[a]), mb = std::abs(v[b]);
                        if (ma != mb) return ma > mb;
                        return a < b;
                      });
    idx.resize(T);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

// Spec'd zeroing form of top-T (used by tests and ablation tooling).
inline std::vector<double> top_t(const std::vector<double>& v, int T) {
  std::vector<double> out(v.size(), 0.0);
  for (int l : top_t_indices(v.data(), static_cast<int>(v.size()), T))
    out[l] = v[l];
  return out;
}

// Dead-zone ternary quantizer for one value.  sign(0) == 0, boundary is
// inclusive (|v| == threshold quantizes to the nonzero level).
inline double dead_zone_quantize(double v, double atom_l1, double threshold,
                                 bool scale_by_l1) {
  if (std::abs(v) < threshold || v == 0.0) return 0.0;
  const double level = scale_by_l1 ? atom_l1 : 1.0;
  return v > 0.0 ? level : -level;
}

// The Bernoulli "dropped?" draw for one (patch, channel) slot.
inline bool dropout_dropped(std::uint64_t prefix_key, int patch, int channel,
                            double p) {
  if (p <= 0.0) return false;
  const std::uint64_t key =
      Rng::fold(Rng::fold(prefix_key, static_cast<std::uint64_t>(patch)),
                static_cast<std::uint64_t>(channel));
  return Rng::from_key(key).next_unit() < p;
}

template <class T>
struct SparseCode {
  int m = 0;  // patch grid side
  int L = 0;  // channels
  std::vector<int> offsets;   // m*m + 1 entries into channels/values
  std::vector<int> channels;  // ascending within each patch
  std::vector<T> values;

  int nnz() const { return static_cast<int>(channels.size()); }

  // Dense channel-plane layout (L, m, m): entry (l, i, j) at l*m*m + i*m + j.
  std::vector<T> to_dense() const {
    std::vector<T> out(static_cast<std::size_t>(L) * m * m, T(0));
    for (int pidx = 0; pidx < m * m; ++pidx)
      for (int k = offsets[pidx]; k < offsets[pidx + 1]; ++k)
        out[static_cast<std::size_t>(channels[k]) * m * m + pidx] = values[k];
    return out;
  }
};

// Survivors of steps 1-3 (pre-quantization), for gradient reconstruction and
// diagnostics: per patch, the channels that passed top-T and dropout along
// with their raw projections.
struct EncodeTrace {
  std::vector<int> offsets;
  std::vector<int> channels;
  std::vector<double> projections;
};

template <class T>
SparseCode<T> encode(const Dictionary& dict, const T* image, int N,
                     const EncoderConfig& cfg,
                     const std::vector<std::uint64_t>& dropout_prefix,
                     EncodeTrace* trace = nullptr) {
  cfg.validate();
  if (dict.nbar != 3 * cfg.n * cfg.n)
    throw ShapeError("dictionary atom length does not match encoder patch size");
  const PatchGrid<T> grid = extract_patches(image, N, cfg.n, cfg.S);
  const int L = dict.L;
  const std::uint64_t prefix_key =
      Rng::fold_words(dropout_prefix.data(), dropout_prefix.size());

  SparseCode<T> code;
  code.m = grid.m;
  code.L = L;
  code.offsets.assign(static_cast<std::size_t>(grid.count()) + 1, 0);
  if (trace) {
    trace->offsets.assign(static_cast<std::size_t>(grid.count()) + 1, 0);
    trace->channels.clear();
    trace->projections.clear();
  }

  std::vector<double> proj(L);
  for (int pidx = 0; pidx < grid.count(); ++pidx) {
    const T* x = grid.patch(pidx);
    for (int l = 0; l < L; ++l) {
      const double* d = dict.atom(l);
      double acc = 0.0;
      for (int j = 0; j < dict.nbar; ++j) acc += d[j] * static_cast<double>(x[j]);
      proj[l] = acc;
    }
    std::vector<int> kept;
    if (cfg.enable_topT && cfg.T < L) {
      kept = top_t_indices(proj.data(), L, cfg.T);
    } else {
      kept.resize(L);
      for (int l = 0; l < L; ++l) kept[l] = l;
    }
    for (int l : kept) {
      if (cfg.enable_dropout && dropout_dropped(prefix_key, pidx, l, cfg.p))
        continue;
      if (trace) {
        trace->channels.push_back(l);
        trace->projections.push_back(proj[l]);
      }
      double v = proj[l];
      if (cfg.enable_quant)
        v = dead_zone_quantize(v, dict.l1[l], cfg.threshold(dict.l1[l]),
                               cfg.scale_by_l1);
      if (v != 0.0) {
        code.channels.push_back(l);
        code.values.push_back(static_cast<T>(v));
      }
    }
    code.offsets[pidx + 1] = code.nnz();
    if (trace) trace->offsets[pidx + 1] = static_cast<int>(trace->channels.size());
  }
  return code;
}

template <class T>
SparseCode<T> encode(const Dictionary& dict, const std::vector<T>& image, int N,
                     const EncoderConfig& cfg,
                     const std::vector<std::uint64_t>& dropout_prefix,
                     EncodeTrace* trace = nullptr) {
  if (image.size() != static_cast<std::size_t>(3) * N * N)
    throw ShapeError("image buffer is not 3*N*N");
  return encode(dict, image.data(), N, cfg, dropout_prefix, trace);
}

// Debug dump: one row per stored entry, patch grid coordinates unflattened.
template <class T>
void dump_code_csv(const SparseCode<T>& code, std::ostream& os) {
  os << "i,j,l,value\n";
  const int prec = os.precision();
  os.precision(17);
  for (int pidx = 0; pidx < code.m * code.m; ++pidx)
    for (int k = code.offsets[pidx]; k < code.offsets[pidx + 1]; ++k)
      os << pidx / code.m << ',' << pidx % code.m << ',' << code.channels[k]
         << ',' << static_cast<double>(code.values[k]) << '\n';
  os.precision(prec);
}

}  // namespace spc
