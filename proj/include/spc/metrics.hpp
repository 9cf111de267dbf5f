#pragma once
// Evaluation statistics for trained models and attack outputs.
//
// evaluate_accuracy      fraction of images whose ensemble prediction matches
//                        the label; parallel across images, deterministic.
// corrupted_patch_distribution
//                        per-image histogram q_i(j) of how many coefficients
//                        enter the perturbed image's post-threshold top-T set
//                        without being in the clean image's set ("entrants"),
//                        counted per patch before dropout.  A patch stays
//                        clean under dropout iff all j entrants are dropped,
//                        so zeta_i = sum_j q_i(j) * p^j is the survival
//                        probability of a uniformly drawn patch and
//                        z_i = 1 - zeta_i the corrupted-patch probability.
// correlation_stats      normalized correlations of patches against dictionary
//                        atoms (rho) and against classifier stem filters
//                        zero-embedded into the patch frame (gamma).
//
// Histogram/quantile helpers are shared by the CSV outputs: histograms use
// uniform bins over an explicit or observed range, values on the upper edge
// fall into the last bin, and quantile() interpolates linearly between order
// statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "spc/attacks.hpp"
#include "spc/common.hpp"
#include "spc/data.hpp"
#include "spc/models.hpp"

namespace spc {

// ---------------------------------------------------------------------------
// Histograms and quantiles.

struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::int64_t> counts;
};

inline Histogram make_histogram(const std::vector<double>& values, int bins,
                                double lo, double hi) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  if (!(lo < hi)) throw ConfigError("histogram range must satisfy lo < hi");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.counts.assign(bins, 0);
  const double width = (hi - lo) / bins;
  for (double v : values) {
    if (!std::isfinite(v)) throw DataError("histogram input is not finite");
    int b = static_cast<int>(std::floor((v - lo) / width));
    if (b < 0) b = 0;
    if (b >= bins) b = bins - 1;  // upper edge lands in the last bin
    ++h.counts[b];
  }
  return h;
}

// Range chosen from the data; a constant sample widens to a unit interval so
// the bin width stays positive.
inline Histogram make_histogram(const std::vector<double>& values, int bins) {
  double lo = 0.0, hi = 1.0;
  if (!values.empty()) {
    lo = *std::min_element(values.begin(), values.end());
    hi = *std::max_element(values.begin(), values.end());
    if (!(lo < hi)) hi = lo + 1.0;
  }
  return make_histogram(values, bins, lo, hi);
}

inline void write_histogram_csv(std::ostream& os, const Histogram& h) {
  os.precision(17);
  os << "bin_lo,bin_hi,count\n";
  const int bins = static_cast<int>(h.counts.size());
  const double width = (h.hi - h.lo) / bins;
  for (int b = 0; b < bins; ++b) {
    const double lo = h.lo + width * b;
    const double hi = (b + 1 == bins) ? h.hi : h.lo + width * (b + 1);
    os << lo << ',' << hi << ',' << h.counts[b] << '\n';
  }
}

// Linear interpolation between order statistics: rank = q*(n-1).
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("quantile of an empty sample");
  if (q < 0.0 || q > 1.0) throw ConfigError("quantile level must be in [0,1]");
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

// ---------------------------------------------------------------------------
// Accuracy under the prediction ensemble.

// Fraction of the first `limit` images (0 = all) whose ensemble prediction
// over E dropout realizations matches the label.  Image identity for the
// dropout streams is the position in the evaluated set.  Work is split into
// contiguous chunks, one inference clone per chunk, so shared parameters are
// never touched concurrently; per-image hits are reduced in index order.
template <class T>
double evaluate_accuracy(const DefenseModel<T>& model, const Dataset<T>& data,
                         int E, std::uint64_t seed, std::size_t limit = 0) {
  if (E < 1) throw ConfigError("ensemble size must be >= 1");
  if (data.image_side != model.image_side)
    throw DataError("dataset side does not match the model input side");
  std::size_t n = static_cast<std::size_t>(data.count());
  if (limit > 0 && limit < n) n = limit;
  if (n == 0) throw DataError("accuracy over an empty image set");

  std::vector<char> hit(n, 0);
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(max_threads(), n));
  parallel_for(workers, [&](std::size_t w) {
    const std::size_t lo = n * w / workers;
    const std::size_t hi = n * (w + 1) / workers;
    if (lo >= hi) return;
    DefenseModel<T> local = inference_clone(model);
    for (std::size_t i = lo; i < hi; ++i) {
      std::vector<T> probs =
          ensemble_predict(local, data.image(static_cast<int>(i)), E, seed,
                           static_cast<std::uint64_t>(i));
      const int pred = static_cast<int>(
          std::max_element(probs.begin(), probs.end()) - probs.begin());
      hit[i] = (pred == data.labels[i]) ? 1 : 0;
    }
  });
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += hit[i];
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Corrupted-patch statistics.

struct CorruptionReport {
  int T = 0;     // histogram support is j = 0..T entrants per patch
  double p = 0;  // drop probability the closed form was evaluated at
  std::vector<std::vector<double>> q;  // per image: T+1 bins summing to 1
  std::vector<double> zeta;            // per image: sum_j q(j) * p^j
  std::vector<double> z;               // per image: 1 - zeta
  Histogram z_hist;                    // population histogram of z over [0,1]
};

// Closed-form patch-survival probability for one entrant histogram.  p^j is
// built by repeated multiplication so p=1 gives exactly sum_j q(j) and p=0
// gives exactly q(0).
inline double zeta_from_histogram(const std::vector<double>& q, double p) {
  double zeta = 0.0, pj = 1.0;
  for (double qj : q) {
    zeta += qj * pj;
    pj *= p;
  }
  return zeta;
}

// Entrant statistics for a batch of perturbed images.  For every archive
// record the clean and perturbed images are encoded with dropout disabled;
// per patch the entrant count j is the number of channels stored for the
// perturbed patch that the clean patch did not store.  Requires the sparse
// front end with top-T selection enabled (the histogram support is 0..T) and
// rejects perturbations beyond the front end's design budget.
template <class T>
CorruptionReport corrupted_patch_distribution(const DefenseModel<T>& model,
                                              const Dataset<T>& data,
                                              const PerturbationArchive& archive) {
  if (model.front != FrontEnd::kSparse)
    throw ConfigError("corruption statistics need the sparse front end");
  if (!model.enc.enable_topT)
    throw ConfigError("corruption statistics need top-T selection enabled");
  if (static_cast<int>(archive.side) != model.image_side ||
      data.image_side != model.image_side)
    throw DataError("perturbation side does not match the model input side");
  if (archive.records.empty())
    throw DataError("corruption statistics over an empty archive");
  const std::size_t plane =
      static_cast<std::size_t>(3) * model.image_side * model.image_side;
  const double budget = model.enc.eps + 1e-9;
  for (const PerturbationRecord& r : archive.records) {
    if (r.index >= static_cast<std::uint64_t>(data.count()))
      throw DataError("perturbation record index out of range");
    if (r.values.size() != plane)
      throw DataError("image/perturbation extent mismatch");
    for (float v : r.values)
      if (!(std::fabs(static_cast<double>(v)) <= budget))
        throw DataError("perturbation exceeds the front end budget");
  }

  EncoderConfig cfg = model.enc;
  cfg.enable_dropout = false;  // survivor identity is a pre-dropout notion

  CorruptionReport rep;
  rep.T = cfg.T;
  rep.p = model.enc.p;
  const std::size_t n = archive.records.size();
  rep.q.assign(n, {});
  rep.zeta.assign(n, 0.0);
  rep.z.assign(n, 0.0);

  parallel_for(n, [&](std::size_t i) {
    const PerturbationRecord& rec = archive.records[i];
    const T* x = data.image(static_cast<int>(rec.index));
    std::vector<T> adv(x, x + plane);
    for (std::size_t k = 0; k < plane; ++k)
      adv[k] += static_cast<T>(rec.values[k]);
    SparseCode<T> clean = encode(model.dict, x, model.image_side, cfg, {0});
    SparseCode<T> pert =
        encode(model.dict, adv.data(), model.image_side, cfg, {0});

    std::vector<double> q(static_cast<std::size_t>(rep.T) + 1, 0.0);
    const int patches = static_cast<int>(clean.offsets.size()) - 1;
    std::vector<int> base;
    for (int pidx = 0; pidx < patches; ++pidx) {
      base.assign(clean.channels.begin() + clean.offsets[pidx],
                  clean.channels.begin() + clean.offsets[pidx + 1]);
      std::sort(base.begin(), base.end());
      int entrants = 0;
      for (int k = pert.offsets[pidx]; k < pert.offsets[pidx + 1]; ++k)
        if (!std::binary_search(base.begin(), base.end(), pert.channels[k]))
          ++entrants;
      if (entrants > rep.T) entrants = rep.T;
      q[entrants] += 1.0;
    }
    for (double& v : q) v /= static_cast<double>(patches);
    rep.q[i] = std::move(q);
    rep.zeta[i] = zeta_from_histogram(rep.q[i], rep.p);
    rep.z[i] = 1.0 - rep.zeta[i];
  });

  rep.z_hist = make_histogram(rep.z, 100, 0.0, 1.0);
  return rep;
}

// ---------------------------------------------------------------------------
// Patch correlation against atoms and classifier stem filters.

struct CorrelationStats {
  std::vector<double> rho;    // patch-major over atoms: <x, d_l>, atoms unit
  std::vector<double> gamma;  // filter-major over patches: <x, f>/||f||^2
  int skipped_filters = 0;    // zero-norm stem filters left out of gamma
  std::vector<std::string> warnings;
};

// Correlates every patch with every dictionary atom (rho; atoms are unit
// norm, so this is the normalized correlation) and with every classifier
// stem filter zero-embedded into the top-left of the n x n x 3 patch frame
// (gamma; normalized by the filter's squared norm).  Filters with zero norm
// are skipped with a warning.
template <class T, class U>
CorrelationStats correlation_stats(const Dictionary& dict,
                                   const Tensor<T>& stem_kernel, const U* rows,
                                   int count, int n) {
  if (dict.nbar != 3 * n * n)
    throw ShapeError("dictionary and patch frame extents differ");
  const auto& ks = stem_kernel.shape();
  if (ks.size() != 4 || ks[1] != 3)
    throw ShapeError("stem kernel must be (filters, 3, kh, kw)");
  const int F = ks[0], kh = ks[2], kw = ks[3];
  if (kh > n || kw > n)
    throw ShapeError("stem filter does not fit into the patch frame");

  CorrelationStats out;
  out.rho.reserve(static_cast<std::size_t>(count) * dict.L);
  for (int pidx = 0; pidx < count; ++pidx) {
    const U* x = rows + static_cast<std::size_t>(pidx) * dict.nbar;
    for (int l = 0; l < dict.L; ++l) {
      const double* d = dict.atom(l);
      double acc = 0.0;
      for (int j = 0; j < dict.nbar; ++j)
        acc += static_cast<double>(x[j]) * d[j];
      out.rho.push_back(acc);
    }
  }

  std::vector<double> f(static_cast<std::size_t>(dict.nbar));
  const T* kdata = stem_kernel.value().data();
  for (int fi = 0; fi < F; ++fi) {
    std::fill(f.begin(), f.end(), 0.0);
    double norm2 = 0.0;
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < kh; ++r)
        for (int col = 0; col < kw; ++col) {
          const double v = static_cast<double>(
              kdata[((static_cast<std::size_t>(fi) * 3 + c) * kh + r) * kw +
                    col]);
          f[(static_cast<std::size_t>(c) * n + r) * n + col] = v;
          norm2 += v * v;
        }
    if (norm2 == 0.0) {
      ++out.skipped_filters;
      out.warnings.push_back("stem filter " + std::to_string(fi) +
                             " has zero norm; skipped");
      continue;
    }
    for (int pidx = 0; pidx < count; ++pidx) {
      const U* x = rows + static_cast<std::size_t>(pidx) * dict.nbar;
      double acc = 0.0;
      for (int j = 0; j < dict.nbar; ++j)
        acc += static_cast<double>(x[j]) * f[j];
      out.gamma.push_back(acc / norm2);
    }
  }
  return out;
}

template <class T, class U>
CorrelationStats correlation_stats(const Dictionary& dict,
                                   const Tensor<T>& stem_kernel,
                                   const PatchGrid<U>& patches) {
  if (dict.nbar != patches.nbar)
    throw ShapeError("dictionary and patch frame extents differ");
  return correlation_stats(dict, stem_kernel, patches.data.data(),
                           patches.count(), patches.n);
}

}  // namespace spc
