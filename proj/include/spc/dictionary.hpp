#pragma once

// Patch dictionary: learning, sparse coding, and file IO.
//
// A dictionary is an nbar x L matrix of unit-l2 atoms (stored column-major,
// i.e. atom-contiguous, fp64) plus a cache of per-atom l1 norms.  Learning
// minimizes sum_i [ 1/2 ||x_i - D a_i||^2 + lambda ||a_i||_1 ] by alternating
//   1. code refresh: per-patch LASSO via cyclic coordinate descent with
//      soft-thresholding, warm-started from the previous codes, and
//   2. dictionary update: per-atom block minimization (ball-constrained
//      closed form), then renormalization to the unit sphere with the
//      atom's codes rescaled to compensate.
// Both steps provably never increase the objective, so the recorded trace
// is non-increasing up to fp64 rounding.
//
// File format "SSD1" (little-endian): magic bytes 'S''S''D''1', u32 nbar,
// u32 L, nbar*L fp64 atom values column-major, L fp64 l1 norms.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "spc/common.hpp"
#include "spc/hash.hpp"
#include "spc/rng.hpp"

namespace spc {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

struct Dictionary {
  int nbar = 0;  // flattened patch length
  int L = 0;     // atom count
  std::vector<double> atoms;  // column-major: atom l occupies [l*nbar, (l+1)*nbar)
  std::vector<double> l1;     // cached l1 norm per atom

  double* atom(int l) { return atoms.data() + static_cast<std::size_t>(l) * nbar; }
  const double* atom(int l) const {
    return atoms.data() + static_cast<std::size_t>(l) * nbar;
  }

  void refresh_l1() {
    l1.assign(L, 0.0);
    for (int l = 0; l < L; ++l) {
      const double* d = atom(l);
      double s = 0.0;
      for (int j = 0; j < nbar; ++j) s += std::abs(d[j]);
      l1[l] = s;
    }
  }

  // Checks unit atom norms (1e-6) and l1 cache consistency (1e-9).
  void validate() const {
    if (nbar <= 0 || L <= 0) throw ShapeError("dictionary extents must be positive");
    if (atoms.size() != static_cast<std::size_t>(nbar) * L || l1.size() != static_cast<std::size_t>(L))
      throw ShapeError("dictionary buffer sizes inconsistent with extents");
    for (int l = 0; l < L; ++l) {
      const double* d = atom(l);
      double sq = 0.0, ab = 0.0;
      for (int j = 0; j < nbar; ++j) {
        sq += d[j] * d[j];
        ab += std::abs(d[j]);
      }
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-6)
        throw DataError("dictionary atom " + std::to_string(l) + " is not unit-norm");
      if (std::abs(ab - l1[l]) > 1e-9)
        throw DataError("dictionary l1 cache stale for atom " + std::to_string(l));
    }
  }
};

// ---------------------------------------------------------------------------
// LASSO: minimize 1/2 ||x - D a||^2 + lambda ||a||_1 by cyclic coordinate
// descent.  Convergence is declared from the KKT conditions on the gradient
// c = D^T (x - D a):  |c_l - lambda*sign(a_l)| <= tol on the support and
// |c_l| <= lambda + tol off it.

struct LassoResult {
  std::vector<double> alpha;
  double kkt_residual = 0.0;
  int sweeps = 0;
};

inline LassoResult lasso_solve(const Dictionary& dict, const double* x,
                               double lambda, double tol = 1e-6,
                               int max_iter = 1000,
                               const double* warm = nullptr) {
  if (lambda < 0.0) throw ConfigError("lasso lambda must be >= 0");
  if (tol <= 0.0 || max_iter < 1) throw ConfigError("lasso tol/max_iter invalid");
  const int L = dict.L, nb = dict.nbar;
  LassoResult res;
  res.alpha.assign(L, 0.0);
  if (warm) res.alpha.assign(warm, warm + L);

  std::vector<double> sq(L, 0.0);  // atom squared norms (unit by invariant; computed for robustness)
  for (int l = 0; l < L; ++l) {
    const double* d = dict.atom(l);
    double s = 0.0;
    for (int j = 0; j < nb; ++j) s += d[j] * d[j];
    sq[l] = s;
  }

  std::vector<double> r(x, x + nb);  // residual x - D a, maintained
  for (int l = 0; l < L; ++l) {
    if (res.alpha[l] == 0.0) continue;
    const double* d = dict.atom(l);
    const double a = res.alpha[l];
    for (int j = 0; j < nb; ++j) r[j] -= a * d[j];
  }

  for (int sweep = 1; sweep <= max_iter; ++sweep) {
    for (int l = 0; l < L; ++l) {
      if (sq[l] <= 0.0) continue;
      const double* d = dict.atom(l);
      double dot = 0.0;
      for (int j = 0; j < nb; ++j) dot += d[j] * r[j];
      const double z = dot + res.alpha[l] * sq[l];
      double next = 0.0;
      if (z > lambda)
        next = (z - lambda) / sq[l];
      else if (z < -lambda)
        next = (z + lambda) / sq[l];
      const double delta = res.alpha[l] - next;
      if (delta != 0.0) {
        for (int j = 0; j < nb; ++j) r[j] += delta * d[j];
        res.alpha[l] = next;
      }
    }
    double worst = 0.0;
    for (int l = 0; l < L; ++l) {
      const double* d = dict.atom(l);
      double c = 0.0;
      for (int j = 0; j < nb; ++j) c += d[j] * r[j];
      double viol;
      if (res.alpha[l] != 0.0)
        viol = std::abs(c - lambda * (res.alpha[l] > 0.0 ? 1.0 : -1.0));
      else
        viol = std::max(0.0, std::abs(c) - lambda);
      worst = std::max(worst, viol);
    }
    res.kkt_residual = worst;
    res.sweeps = sweep;
    if (worst <= tol) return res;
  }
  throw DivergenceError("lasso failed to reach KKT tolerance " +
                        std::to_string(tol) + " after " +
                        std::to_string(max_iter) + " sweeps (residual " +
                        std::to_string(res.kkt_residual) + ")");
}

// ---------------------------------------------------------------------------
// Objective sum_i 1/2||x_i - D a_i||^2 + lambda ||a_i||_1 over M patches.
// X row-major M x nbar, codes row-major M x L.

inline double dictionary_objective(const Dictionary& dict, const double* X,
                                   int M, const double* codes, double lambda) {
  const int nb = dict.nbar, L = dict.L;
  double total = 0.0;
  std::vector<double> r(nb);
  for (int i = 0; i < M; ++i) {
    const double* x = X + static_cast<std::size_t>(i) * nb;
    const double* a = codes + static_cast<std::size_t>(i) * L;
    std::copy(x, x + nb, r.begin());
    double l1 = 0.0;
    for (int l = 0; l < L; ++l) {
      if (a[l] == 0.0) continue;
      l1 += std::abs(a[l]);
      const double* d = dict.atom(l);
      const double al = a[l];
      for (int j = 0; j < nb; ++j) r[j] -= al * d[j];
    }
    double sq = 0.0;
    for (int j = 0; j < nb; ++j) sq += r[j] * r[j];
    total += 0.5 * sq + lambda * l1;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Dictionary update with codes held fixed (up to compensating rescale).
// Uses the sufficient statistics A = C^T C (L x L) and B = X^T C (nbar x L):
// per atom, the ball-constrained quadratic minimizer is the projection of
//   u = d_l + (B_l - D A_l) / A_ll
// onto the unit ball; the atom is then pushed to the unit sphere and the
// atom's codes are scaled by the projection's norm, which changes neither
// D*a products beyond the ball step nor increases the l1 term.  Atoms with
// zero usage are re-seeded from a random patch (codes already zero, so the
// objective is untouched) and reported via the log.

struct DictUpdateLog {
  std::vector<int> dead_reinit;  // atoms re-seeded from a random patch
  std::vector<int> degenerate;   // atoms left unchanged (zero block minimizer)
};

inline void dictionary_update(Dictionary& dict, const double* X, int M,
                              double* codes, Rng& rng,
                              DictUpdateLog* log = nullptr) {
  const int nb = dict.nbar, L = dict.L;
  if (M < 1) throw ShapeError("dictionary update needs at least one patch");

  std::vector<double> A(static_cast<std::size_t>(L) * L, 0.0);
  std::vector<double> B(static_cast<std::size_t>(nb) * L, 0.0);  // row-major nbar x L
  std::vector<int> nz;
  for (int i = 0; i < M; ++i) {
    const double* a = codes + static_cast<std::size_t>(i) * L;
    const double* x = X + static_cast<std::size_t>(i) * nb;
    nz.clear();
    for (int l = 0; l < L; ++l)
      if (a[l] != 0.0) nz.push_back(l);
    for (int p : nz) {
      const double ap = a[p];
      for (int q : nz) A[static_cast<std::size_t>(p) * L + q] += ap * a[q];
      for (int j = 0; j < nb; ++j)
        B[static_cast<std::size_t>(j) * L + p] += x[j] * ap;
    }
  }

  std::vector<double> u(nb);
  for (int l = 0; l < L; ++l) {
    const double usage = A[static_cast<std::size_t>(l) * L + l];
    if (usage <= 0.0) {
      // Dead atom: re-seed from a random patch (fall back to Gaussian if the
      // patch is all-zero).  Its codes are all zero already.
      double* d = dict.atom(l);
      double norm = 0.0;
      const double* x = X + static_cast<std::size_t>(rng.next_below(
                                static_cast<std::uint64_t>(M))) * nb;
      for (int j = 0; j < nb; ++j) {
        d[j] = x[j];
        norm += d[j] * d[j];
      }
      while (norm <= 0.0) {
        norm = 0.0;
        for (int j = 0; j < nb; ++j) {
          d[j] = rng.next_gaussian();
          norm += d[j] * d[j];
        }
      }
      norm = std::sqrt(norm);
      for (int j = 0; j < nb; ++j) d[j] /= norm;
      if (log) log->dead_reinit.push_back(l);
      continue;
    }

    double* d = dict.atom(l);
    for (int j = 0; j < nb; ++j) {
      double da = 0.0;
      const double* Bj = B.data() + static_cast<std::size_t>(j) * L;
      const double* Aj = A.data() + static_cast<std::size_t>(l) * L;
      for (int k = 0; k < L; ++k)
        da += dict.atoms[static_cast<std::size_t>(k) * nb + j] * Aj[k];
      u[j] = d[j] + (Bj[l] - da) / usage;
    }
    double norm = 0.0;
    for (int j = 0; j < nb; ++j) norm += u[j] * u[j];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      if (log) log->degenerate.push_back(l);
      continue;  // leave the atom as-is; a no-op never increases the objective
    }
    // Project onto the unit ball, record the projected norm s <= 1, put the
    // atom on the sphere, and scale its codes by s.
    const double s = std::min(norm, 1.0);
    for (int j = 0; j < nb; ++j) d[j] = u[j] / norm;
    if (s != 1.0) {
      for (int i = 0; i < M; ++i) codes[static_cast<std::size_t>(i) * L + l] *= s;
      for (int k = 0; k < L; ++k) {
        A[static_cast<std::size_t>(l) * L + k] *= s;
        A[static_cast<std::size_t>(k) * L + l] *= s;
      }
      for (int j = 0; j < nb; ++j) B[static_cast<std::size_t>(j) * L + l] *= s;
    }
  }
  dict.refresh_l1();
}

// ---------------------------------------------------------------------------
// Full alternation loop.

struct DictLearnOptions {
  int batch = 0;          // patches re-coded per alternation; 0 = all of them
  double lasso_tol = 1e-6;
  int lasso_max_iter = 1000;
};

struct DictLearnTrace {
  std::vector<double> objective_mid;  // after code refresh, before dict update
  std::vector<double> objective;      // after the dictionary update
  std::vector<int> dead_reinits;      // per alternation
};

struct DictLearnResult {
  Dictionary dict;
  std::vector<double> codes;  // M x L row-major (rescaled in step 2)
  DictLearnTrace trace;
};

inline Dictionary init_dictionary(const double* X, int M, int nbar, int L,
                                  Rng& rng) {
  Dictionary dict;
  dict.nbar = nbar;
  dict.L = L;
  dict.atoms.assign(static_cast<std::size_t>(nbar) * L, 0.0);
  std::vector<int> used;
  for (int l = 0; l < L; ++l) {
    double* d = dict.atom(l);
    double norm = 0.0;
    if (l < M) {
      // Sample distinct patch indices.
      int idx;
      for (;;) {
        idx = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(M)));
        if (std::find(used.begin(), used.end(), idx) == used.end()) break;
      }
      used.push_back(idx);
      const double* x = X + static_cast<std::size_t>(idx) * nbar;
      for (int j = 0; j < nbar; ++j) {
        d[j] = x[j];
        norm += d[j] * d[j];
      }
    }
    while (norm <= 0.0) {
      norm = 0.0;
      for (int j = 0; j < nbar; ++j) {
        d[j] = rng.next_gaussian();
        norm += d[j] * d[j];
      }
    }
    norm = std::sqrt(norm);
    for (int j = 0; j < nbar; ++j) d[j] /= norm;
  }
  dict.refresh_l1();
  return dict;
}

inline DictLearnResult learn_dictionary(const double* X, int M, int nbar,
                                        int L, double lambda, int iters,
                                        std::uint64_t seed,
                                        const DictLearnOptions& opts = {}) {
  if (M < 1 || nbar < 1 || L < 1) throw ShapeError("learn_dictionary extents invalid");
  if (lambda < 0.0 || iters < 0) throw ConfigError("learn_dictionary lambda/iters invalid");
  DictLearnResult out;
  {
    Rng rng = Rng::stream({seed, static_cast<std::uint64_t>(StreamTag::kDictInit)});
    out.dict = init_dictionary(X, M, nbar, L, rng);
  }
  out.codes.assign(static_cast<std::size_t>(M) * L, 0.0);

  const int batch = (opts.batch <= 0 || opts.batch >= M) ? M : opts.batch;
  std::vector<int> idx(M);
  for (int i = 0; i < M; ++i) idx[i] = i;

  for (int t = 0; t < iters; ++t) {
    // Pick which patches get their codes refreshed this alternation.
    std::vector<int> pick;
    if (batch == M) {
      pick = idx;
    } else {
      Rng rng = Rng::stream({seed, static_cast<std::uint64_t>(StreamTag::kPatchSample),
                             static_cast<std::uint64_t>(t)});
      std::vector<int> pool = idx;
      for (int i = 0; i < batch; ++i) {
        const int j = i + static_cast<int>(rng.next_below(
                              static_cast<std::uint64_t>(M - i)));
        std::swap(pool[i], pool[j]);
        pick.push_back(pool[i]);
      }
    }

    parallel_for(pick.size(), [&](std::size_t w) {
      const int i = pick[w];
      double* row = out.codes.data() + static_cast<std::size_t>(i) * L;
      LassoResult r = lasso_solve(out.dict, X + static_cast<std::size_t>(i) * nbar,
                                  lambda, opts.lasso_tol, opts.lasso_max_iter, row);
      std::copy(r.alpha.begin(), r.alpha.end(), row);
    });
    out.trace.objective_mid.push_back(
        dictionary_objective(out.dict, X, M, out.codes.data(), lambda));

    Rng rng = Rng::stream({seed, static_cast<std::uint64_t>(StreamTag::kDictInit),
                           static_cast<std::uint64_t>(t) + 1});
    DictUpdateLog log;
    dictionary_update(out.dict, X, M, out.codes.data(), rng, &log);
    out.trace.dead_reinits.push_back(static_cast<int>(log.dead_reinit.size()));
    out.trace.objective.push_back(
        dictionary_objective(out.dict, X, M, out.codes.data(), lambda));
  }
  return out;
}

// ---------------------------------------------------------------------------
// SSD1 file IO.

inline std::vector<std::uint8_t> serialize(const Dictionary& dict) {
  const std::size_t payload = static_cast<std::size_t>(dict.nbar) * dict.L + dict.L;
  std::vector<std::uint8_t> bytes(12 + payload * 8);
  std::uint8_t* p = bytes.data();
  std::memcpy(p, "SSD1", 4);
  const std::uint32_t nb = static_cast<std::uint32_t>(dict.nbar);
  const std::uint32_t L = static_cast<std::uint32_t>(dict.L);
  std::memcpy(p + 4, &nb, 4);
  std::memcpy(p + 8, &L, 4);
  std::memcpy(p + 12, dict.atoms.data(), dict.atoms.size() * 8);
  std::memcpy(p + 12 + dict.atoms.size() * 8, dict.l1.data(), dict.l1.size() * 8);
  return bytes;
}

inline Dictionary deserialize_dictionary(const std::uint8_t* p, std::size_t len) {
  if (len < 12 || std::memcmp(p, "SSD1", 4) != 0)
    throw DataError("not a dictionary file (bad magic or truncated header)");
  std::uint32_t nb = 0, L = 0;
  std::memcpy(&nb, p + 4, 4);
  std::memcpy(&L, p + 8, 4);
  if (nb == 0 || L == 0 || nb > (1u << 24) || L > (1u << 24))
    throw DataError("dictionary extents out of range");
  const std::size_t want = 12 + (static_cast<std::size_t>(nb) * L + L) * 8;
  if (len != want) throw DataError("dictionary file size mismatch");
  Dictionary d;
  d.nbar = static_cast<int>(nb);
  d.L = static_cast<int>(L);
  d.atoms.resize(static_cast<std::size_t>(nb) * L);
  d.l1.resize(L);
  std::memcpy(d.atoms.data(), p + 12, d.atoms.size() * 8);
  std::memcpy(d.l1.data(), p + 12 + d.atoms.size() * 8, d.l1.size() * 8);
  d.validate();
  return d;
}

inline void save_dictionary(const Dictionary& dict, const std::string& path) {
  const std::vector<std::uint8_t> bytes = serialize(dict);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("cannot write dictionary: " + path);
  const std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw DataError("short write: " + path);
}

inline Dictionary load_dictionary(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot read dictionary: " + path);
  std::fseek(f, 0, SEEK_END);
  const long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<std::uint8_t> bytes(sz > 0 ? static_cast<std::size_t>(sz) : 0);
  const std::size_t n = bytes.empty() ? 0 : std::fread(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw DataError("short read: " + path);
  return deserialize_dictionary(bytes.data(), bytes.size());
}

inline Sha256 dictionary_hash(const Dictionary& dict) {
  return sha256(serialize(dict));
}

}  // namespace spc
