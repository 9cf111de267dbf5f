#include "spc/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <vector>

#include "spc/data.hpp"
#include "spc/models.hpp"
#include "spc/rng.hpp"

namespace {

using spc::ClassifierGeometry;
using spc::CorruptionReport;
using spc::Dataset;
using spc::DecoderGeometry;
using spc::DefenseModel;
using spc::Dictionary;
using spc::FrontEnd;
using spc::Histogram;
using spc::PatchGrid;
using spc::PerturbationArchive;
using spc::PerturbationRecord;
using spc::Rng;
using spc::Tensor;

// ---------------------------------------------------------------------------
// Oracles, frozen before the implementations were consulted.
//
// 1. Survival formula by hand: q = {0: 0.5, 1: 0.5}, p = 0.95 gives
//    zeta = 0.5 + 0.5 * 0.95 = 0.975 and z = 0.025.  At p = 1 every entrant
//    is dropped, zeta = sum q = 1, z = 0.  At p = 0 nothing is dropped and
//    only untouched patches survive: zeta = q(0).
//
// 2. Survivor identity, reimplemented from the front-end definition: a
//    channel is stored for a patch iff it is among the T largest |<x, d_l>|
//    (ties to the lower index) and |<x, d_l>| >= beta * eps * ||d_l||_1.
//    Entrants are perturbed-set members absent from the clean set.
//
// 3. Monte Carlo dropout: a patch with j entrants stays clean iff all j are
//    dropped, so simulating independent Bernoulli(1 - p) survivals per
//    entrant estimates z as the mean corrupted-patch fraction.
//
// 4. Stem embedding layout: with patch side 4, a filter value at channel 1,
//    row 2, column 0 lands at flattened index (1*4 + 2)*4 + 0 = 24.
//
// 5. gamma = <x, f> / ||f||^2, so x = 2f gives exactly 2 (scaling by a power
//    of two is exact in binary floating point).

Dictionary random_unit_dict(int nbar, int L, std::uint64_t tag) {
  Rng rng = Rng::stream({0xA77, tag});
  Dictionary d;
  d.nbar = nbar;
  d.L = L;
  d.atoms.resize(static_cast<std::size_t>(nbar) * L);
  for (int l = 0; l < L; ++l) {
    double norm = 0.0;
    for (int j = 0; j < nbar; ++j) {
      d.atom(l)[j] = rng.next_gaussian();
      norm += d.atom(l)[j] * d.atom(l)[j];
    }
    norm = std::sqrt(norm);
    for (int j = 0; j < nbar; ++j) d.atom(l)[j] /= norm;
  }
  d.refresh_l1();
  return d;
}

DefenseModel<double> tiny_sparse_model(double drop_p, std::uint64_t seed) {
  DefenseModel<double> model;
  model.front = FrontEnd::kSparse;
  model.image_side = 8;
  model.dict = random_unit_dict(12, 6, seed);
  model.enc.n = 2;
  model.enc.S = 2;
  model.enc.T = 3;
  model.enc.p = drop_p;
  model.enc.beta = 3.0;
  model.enc.eps = 8.0 / 255.0;
  DecoderGeometry dg;
  dg.in_ch = 6;
  dg.layers = {{5, 2, 2, 0}, {4, 3, 1, 1}, {3, 3, 1, 1}};
  model.decoder = spc::make_decoder<double>(dg, seed + 1);
  ClassifierGeometry cg;
  cg.w0 = 4;
  cg.w1 = 6;
  cg.w2 = 8;
  model.classifier = spc::make_classifier<double>(cg, seed + 2);
  return model;
}

DefenseModel<double> tiny_identity_model(std::uint64_t seed) {
  DefenseModel<double> model;
  model.front = FrontEnd::kIdentity;
  model.image_side = 8;
  ClassifierGeometry cg;
  cg.w0 = 4;
  cg.w1 = 6;
  cg.w2 = 8;
  model.classifier = spc::make_classifier<double>(cg, seed);
  return model;
}

// In-budget archive over the first `n` images: record i perturbs image i
// with deterministic values in (-eps, eps).
PerturbationArchive random_archive(int n, int side, double eps,
                                   std::uint64_t tag) {
  Rng rng = Rng::stream({0xACE, tag});
  PerturbationArchive a;
  a.side = static_cast<std::uint32_t>(side);
  const std::size_t plane = static_cast<std::size_t>(3) * side * side;
  for (int i = 0; i < n; ++i) {
    PerturbationRecord r;
    r.index = static_cast<std::uint64_t>(i);
    r.values.resize(plane);
    for (float& v : r.values)
      v = static_cast<float>(eps * 0.999 * (2.0 * rng.next_unit() - 1.0));
    a.records.push_back(std::move(r));
  }
  return a;
}

// Independent survivor-set reimplementation (oracle 2).
std::vector<std::vector<int>> survivor_sets(const DefenseModel<double>& model,
                                            const double* image) {
  PatchGrid<double> grid = spc::extract_patches(image, model.image_side,
                                                model.enc.n, model.enc.S);
  std::vector<std::vector<int>> sets(grid.count());
  for (int pidx = 0; pidx < grid.count(); ++pidx) {
    const double* x = grid.patch(pidx);
    std::vector<std::pair<double, int>> mag(model.dict.L);
    std::vector<double> proj(model.dict.L);
    for (int l = 0; l < model.dict.L; ++l) {
      double acc = 0.0;
      for (int j = 0; j < model.dict.nbar; ++j)
        acc += x[j] * model.dict.atom(l)[j];
      proj[l] = acc;
      mag[l] = {std::fabs(acc), l};
    }
    std::sort(mag.begin(), mag.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (int k = 0; k < model.enc.T && k < model.dict.L; ++k) {
      const int l = mag[k].second;
      const double thr = model.enc.beta * model.enc.eps * model.dict.l1[l];
      if (std::fabs(proj[l]) >= thr) sets[pidx].push_back(l);
    }
    std::sort(sets[pidx].begin(), sets[pidx].end());
  }
  return sets;
}

// ---------------------------------------------------------------------------

TEST(CorruptionFormula, SpecSurvivalExampleAndEndpoints) {
  const std::vector<double> q = {0.5, 0.5};
  EXPECT_DOUBLE_EQ(spc::zeta_from_histogram(q, 0.95), 0.975);
  // 1 - repr(0.975) and repr(0.025) differ by a few ULP; the survival value
  // itself is checked exactly above.
  EXPECT_NEAR(1.0 - spc::zeta_from_histogram(q, 0.95), 0.025, 1e-15);
  EXPECT_DOUBLE_EQ(spc::zeta_from_histogram(q, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(spc::zeta_from_histogram(q, 0.0), 0.5);
  const std::vector<double> q2 = {0.25, 0.5, 0.25};
  EXPECT_DOUBLE_EQ(spc::zeta_from_histogram(q2, 0.5),
                   0.25 + 0.5 * 0.5 + 0.25 * 0.25);
}

TEST(CorruptedPatches, ZeroPerturbationMeansNoEntrants) {
  auto model = tiny_sparse_model(0.9, 41);
  Dataset<double> data = spc::synth_dataset<double>(3, 8, 77, 0);
  PerturbationArchive a;
  a.side = 8;
  for (int i = 0; i < 3; ++i) {
    PerturbationRecord r;
    r.index = static_cast<std::uint64_t>(i);
    r.values.assign(3 * 8 * 8, 0.0f);
    a.records.push_back(std::move(r));
  }
  CorruptionReport rep = spc::corrupted_patch_distribution(model, data, a);
  ASSERT_EQ(rep.q.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(rep.q[i][0], 1.0);
    for (std::size_t j = 1; j < rep.q[i].size(); ++j)
      EXPECT_DOUBLE_EQ(rep.q[i][j], 0.0);
    EXPECT_DOUBLE_EQ(rep.zeta[i], 1.0);
    EXPECT_DOUBLE_EQ(rep.z[i], 0.0);
  }
}

TEST(CorruptedPatches, MatchesBruteForceSurvivorSets) {
  auto model = tiny_sparse_model(0.9, 43);
  Dataset<double> data = spc::synth_dataset<double>(4, 8, 79, 0);
  PerturbationArchive a = random_archive(4, 8, model.enc.eps, 11);
  CorruptionReport rep = spc::corrupted_patch_distribution(model, data, a);

  double entrant_mass = 0.0;
  const std::size_t plane = 3 * 8 * 8;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> adv(data.image(i), data.image(i) + plane);
    for (std::size_t k = 0; k < plane; ++k)
      adv[k] += static_cast<double>(a.records[i].values[k]);
    auto clean = survivor_sets(model, data.image(i));
    auto pert = survivor_sets(model, adv.data());
    ASSERT_EQ(clean.size(), pert.size());
    std::vector<double> q(static_cast<std::size_t>(model.enc.T) + 1, 0.0);
    for (std::size_t pidx = 0; pidx < clean.size(); ++pidx) {
      int entrants = 0;
      for (int l : pert[pidx])
        if (!std::binary_search(clean[pidx].begin(), clean[pidx].end(), l))
          ++entrants;
      q[entrants] += 1.0 / static_cast<double>(clean.size());
    }
    ASSERT_EQ(rep.q[i].size(), q.size());
    for (std::size_t j = 0; j < q.size(); ++j) {
      EXPECT_NEAR(rep.q[i][j], q[j], 1e-12);
      if (j > 0) entrant_mass += q[j];
    }
    EXPECT_NEAR(rep.zeta[i], spc::zeta_from_histogram(q, 0.9), 1e-12);
  }
  // The fixture must actually exercise entrants, not just the empty case.
  EXPECT_GT(entrant_mass, 0.0);
}

TEST(CorruptedPatches, ClosedFormMatchesMonteCarloDropout) {
  auto model = tiny_sparse_model(0.7, 47);
  Dataset<double> data = spc::synth_dataset<double>(4, 8, 83, 0);
  PerturbationArchive a = random_archive(4, 8, model.enc.eps, 13);
  CorruptionReport rep = spc::corrupted_patch_distribution(model, data, a);

  std::mt19937_64 gen(0x5eedULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int draws = 100000;
  for (std::size_t i = 0; i < rep.q.size(); ++i) {
    // Reconstruct per-patch entrant counts from the normalized histogram.
    const int patches = 16;  // (8/2)^2 windows at stride 2
    std::vector<int> counts;
    for (std::size_t j = 0; j < rep.q[i].size(); ++j) {
      const int c =
          static_cast<int>(std::lround(rep.q[i][j] * patches));
      for (int k = 0; k < c; ++k) counts.push_back(static_cast<int>(j));
    }
    ASSERT_EQ(counts.size(), static_cast<std::size_t>(patches));

    double sum = 0.0, sumsq = 0.0;
    for (int d = 0; d < draws; ++d) {
      int corrupted = 0;
      for (int j : counts) {
        bool any = false;
        for (int k = 0; k < j; ++k)
          if (u(gen) >= rep.p) any = true;  // entrant survives w.p. 1 - p
        corrupted += any ? 1 : 0;
      }
      const double f = static_cast<double>(corrupted) / patches;
      sum += f;
      sumsq += f * f;
    }
    const double mean = sum / draws;
    const double var = std::max(0.0, sumsq / draws - mean * mean);
    const double sigma = std::sqrt(var / draws);
    if (sigma == 0.0) {
      EXPECT_DOUBLE_EQ(rep.z[i], mean);
    } else {
      EXPECT_NEAR(rep.z[i], mean, 3.0 * sigma);
    }
  }
}

TEST(CorruptedPatches, HonorsDropRateExactlyAtTheEndpoints) {
  Dataset<double> data = spc::synth_dataset<double>(3, 8, 89, 0);
  auto all = tiny_sparse_model(1.0, 53);
  PerturbationArchive a = random_archive(3, 8, all.enc.eps, 17);
  CorruptionReport drop_all = spc::corrupted_patch_distribution(all, data, a);
  for (double zi : drop_all.z) EXPECT_DOUBLE_EQ(zi, 0.0);

  auto none = tiny_sparse_model(0.0, 53);
  CorruptionReport drop_none = spc::corrupted_patch_distribution(none, data, a);
  for (std::size_t i = 0; i < drop_none.z.size(); ++i) {
    EXPECT_DOUBLE_EQ(drop_none.z[i], 1.0 - drop_none.q[i][0]);
    // Same dictionary and thresholds, so the entrant histograms agree.
    for (std::size_t j = 0; j < drop_none.q[i].size(); ++j)
      EXPECT_DOUBLE_EQ(drop_none.q[i][j], drop_all.q[i][j]);
  }
}

TEST(CorruptedPatches, NormalizationAndRangeInvariants) {
  auto model = tiny_sparse_model(0.9, 59);
  Dataset<double> data = spc::synth_dataset<double>(6, 8, 97, 0);
  PerturbationArchive a = random_archive(6, 8, model.enc.eps, 19);
  CorruptionReport rep = spc::corrupted_patch_distribution(model, data, a);
  ASSERT_EQ(rep.q.size(), 6u);
  std::int64_t binned = 0;
  for (std::int64_t c : rep.z_hist.counts) binned += c;
  EXPECT_EQ(binned, 6);
  EXPECT_DOUBLE_EQ(rep.z_hist.lo, 0.0);
  EXPECT_DOUBLE_EQ(rep.z_hist.hi, 1.0);
  for (std::size_t i = 0; i < rep.q.size(); ++i) {
    double mass = 0.0;
    for (double qj : rep.q[i]) {
      EXPECT_GE(qj, 0.0);
      mass += qj;
    }
    EXPECT_NEAR(mass, 1.0, 1e-12);
    EXPECT_GE(rep.zeta[i], 0.0);
    EXPECT_LE(rep.zeta[i], 1.0);
    EXPECT_GE(rep.z[i], 0.0);
    EXPECT_LE(rep.z[i], 1.0);
  }
}

TEST(CorruptedPatches, RejectsBadInputs) {
  auto model = tiny_sparse_model(0.9, 61);
  Dataset<double> data = spc::synth_dataset<double>(2, 8, 101, 0);
  PerturbationArchive ok = random_archive(2, 8, model.enc.eps, 23);

  PerturbationArchive hot = ok;
  hot.records[1].values[5] = static_cast<float>(2.0 * model.enc.eps);
  EXPECT_THROW(spc::corrupted_patch_distribution(model, data, hot),
               spc::DataError);

  PerturbationArchive oor = ok;
  oor.records[0].index = 9;
  EXPECT_THROW(spc::corrupted_patch_distribution(model, data, oor),
               spc::DataError);

  PerturbationArchive empty;
  empty.side = 8;
  EXPECT_THROW(spc::corrupted_patch_distribution(model, data, empty),
               spc::DataError);

  PerturbationArchive wrong_side = ok;
  wrong_side.side = 16;
  EXPECT_THROW(spc::corrupted_patch_distribution(model, data, wrong_side),
               spc::DataError);

  auto identity = tiny_identity_model(61);
  Dataset<double> data8 = spc::synth_dataset<double>(2, 8, 101, 0);
  EXPECT_THROW(spc::corrupted_patch_distribution(identity, data8, ok),
               spc::ConfigError);

  auto no_topt = tiny_sparse_model(0.9, 61);
  no_topt.enc.enable_topT = false;
  EXPECT_THROW(spc::corrupted_patch_distribution(no_topt, data, ok),
               spc::ConfigError);
}

// ---------------------------------------------------------------------------

TEST(EvaluateAccuracy, MatchesDirectEnsembleLoop) {
  auto model = tiny_sparse_model(0.5, 67);
  Dataset<double> data = spc::synth_dataset<double>(12, 8, 103, 0);
  const double acc = spc::evaluate_accuracy(model, data, 3, 999);

  int hits = 0;
  for (int i = 0; i < data.count(); ++i) {
    std::vector<double> probs = spc::ensemble_predict(
        model, data.image(i), 3, 999, static_cast<std::uint64_t>(i));
    const int pred = static_cast<int>(
        std::max_element(probs.begin(), probs.end()) - probs.begin());
    hits += (pred == data.labels[i]) ? 1 : 0;
  }
  EXPECT_DOUBLE_EQ(acc, static_cast<double>(hits) / data.count());
}

TEST(EvaluateAccuracy, LimitRestrictsTheEvaluatedPrefix) {
  auto model = tiny_identity_model(71);
  Dataset<double> data = spc::synth_dataset<double>(10, 8, 107, 0);
  const double acc3 = spc::evaluate_accuracy(model, data, 1, 5, 3);
  int hits = 0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> probs = spc::ensemble_predict(
        model, data.image(i), 1, 5, static_cast<std::uint64_t>(i));
    const int pred = static_cast<int>(
        std::max_element(probs.begin(), probs.end()) - probs.begin());
    hits += (pred == data.labels[i]) ? 1 : 0;
  }
  EXPECT_DOUBLE_EQ(acc3, hits / 3.0);
}

TEST(EvaluateAccuracy, EnsembleSizeIrrelevantWithoutDropout) {
  auto model = tiny_sparse_model(0.0, 73);
  Dataset<double> data = spc::synth_dataset<double>(8, 8, 109, 0);
  EXPECT_DOUBLE_EQ(spc::evaluate_accuracy(model, data, 1, 7),
                   spc::evaluate_accuracy(model, data, 7, 7));
}

TEST(EvaluateAccuracy, DeterministicAcrossWorkerCounts) {
  auto model = tiny_sparse_model(0.8, 79);
  Dataset<double> data = spc::synth_dataset<double>(9, 8, 113, 0);
  spc::max_threads() = 1;
  const double one = spc::evaluate_accuracy(model, data, 2, 31);
  spc::max_threads() = 3;
  const double three = spc::evaluate_accuracy(model, data, 2, 31);
  spc::max_threads() = 1;
  EXPECT_DOUBLE_EQ(one, three);
}

TEST(EvaluateAccuracy, UntrainedClassifierSitsAtChance) {
  auto model = tiny_identity_model(83);
  Dataset<double> data = spc::synth_dataset<double>(500, 8, 127, 0);
  // Labels drawn independently of the images; hits are Bernoulli(0.1), so
  // the accuracy must land within 3 binomial sigmas of chance.
  std::mt19937_64 gen(0xfacadeULL);
  std::uniform_int_distribution<int> lab(0, 9);
  for (int& l : data.labels) l = lab(gen);
  const double acc = spc::evaluate_accuracy(model, data, 1, 11);
  const double sigma = std::sqrt(0.1 * 0.9 / 500.0);
  EXPECT_NEAR(acc, 0.1, 3.0 * sigma);
}

TEST(EvaluateAccuracy, RejectsBadArguments) {
  auto model = tiny_identity_model(89);
  Dataset<double> data = spc::synth_dataset<double>(4, 8, 131, 0);
  EXPECT_THROW(spc::evaluate_accuracy(model, data, 0, 1), spc::ConfigError);
  Dataset<double> empty;
  empty.image_side = 8;
  EXPECT_THROW(spc::evaluate_accuracy(model, empty, 1, 1), spc::DataError);
  Dataset<double> wrong = spc::synth_dataset<double>(4, 16, 131, 0);
  EXPECT_THROW(spc::evaluate_accuracy(model, wrong, 1, 1), spc::DataError);
}

// ---------------------------------------------------------------------------

TEST(Correlations, OrthonormalAtomsRecoverUnitCorrelation) {
  Dictionary d;
  d.nbar = 12;
  d.L = 12;
  d.atoms.assign(144, 0.0);
  for (int l = 0; l < 12; ++l) d.atom(l)[l] = 1.0;
  d.refresh_l1();

  PatchGrid<double> patches;
  patches.m = 1;
  patches.n = 2;
  patches.nbar = 12;
  patches.data.assign(12, 0.0);
  patches.data[5] = 1.0;  // the patch is atom 5 itself

  Tensor<double> stem = Tensor<double>::zeros({1, 3, 2, 2});
  stem.value()[0] = 1.0;
  auto stats = spc::correlation_stats(d, stem, patches);
  ASSERT_EQ(stats.rho.size(), 12u);
  for (int l = 0; l < 12; ++l)
    EXPECT_DOUBLE_EQ(stats.rho[l], l == 5 ? 1.0 : 0.0);
}

TEST(Correlations, StemEmbeddingLayoutPinned) {
  Dictionary d = random_unit_dict(48, 4, 3);  // patch side 4
  Tensor<double> stem = Tensor<double>::zeros({1, 3, 3, 3});
  // Filter value at channel 1, row 2, column 0.
  stem.value()[(1 * 3 + 2) * 3 + 0] = 1.0;

  PatchGrid<double> patches;
  patches.m = 1;
  patches.n = 4;
  patches.nbar = 48;
  patches.data.assign(48, 0.0);
  patches.data[24] = 1.0;  // (1*4 + 2)*4 + 0
  auto hit = spc::correlation_stats(d, stem, patches);
  ASSERT_EQ(hit.gamma.size(), 1u);
  EXPECT_DOUBLE_EQ(hit.gamma[0], 1.0);

  patches.data[24] = 0.0;
  patches.data[23] = 1.0;
  auto miss = spc::correlation_stats(d, stem, patches);
  EXPECT_DOUBLE_EQ(miss.gamma[0], 0.0);
}

TEST(Correlations, GammaScalesByInverseSquaredNorm) {
  Dictionary d = random_unit_dict(48, 4, 5);
  Tensor<double> stem = Tensor<double>::zeros({1, 3, 3, 3});
  Rng rng = Rng::stream({0xF00, 9});
  for (int k = 0; k < 27; ++k) stem.value()[k] = rng.next_gaussian();

  // Patch = 2 * (embedded filter): gamma must be exactly 2.
  PatchGrid<double> patches;
  patches.m = 1;
  patches.n = 4;
  patches.nbar = 48;
  patches.data.assign(48, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col)
        patches.data[(c * 4 + r) * 4 + col] =
            2.0 * stem.value()[(c * 3 + r) * 3 + col];
  auto stats = spc::correlation_stats(d, stem, patches);
  ASSERT_EQ(stats.gamma.size(), 1u);
  EXPECT_DOUBLE_EQ(stats.gamma[0], 2.0);
}

TEST(Correlations, ZeroNormFiltersAreSkippedWithWarnings) {
  Dictionary d = random_unit_dict(12, 4, 7);
  Tensor<double> stem = Tensor<double>::zeros({2, 3, 2, 2});
  for (int k = 12; k < 24; ++k) stem.value()[k] = 0.5;  // filter 1 nonzero

  PatchGrid<double> patches;
  patches.m = 2;
  patches.n = 2;
  patches.nbar = 12;
  patches.data.assign(4 * 12, 0.25);
  auto stats = spc::correlation_stats(d, stem, patches);
  EXPECT_EQ(stats.skipped_filters, 1);
  ASSERT_EQ(stats.warnings.size(), 1u);
  EXPECT_NE(stats.warnings[0].find("filter 0"), std::string::npos);
  EXPECT_EQ(stats.gamma.size(), 4u);  // one surviving filter x four patches
  EXPECT_EQ(stats.rho.size(), 16u);
}

TEST(Correlations, RejectsMismatchedShapes) {
  Dictionary d = random_unit_dict(12, 4, 11);
  PatchGrid<double> patches;
  patches.m = 1;
  patches.n = 2;
  patches.nbar = 12;
  patches.data.assign(12, 0.0);

  Tensor<double> too_big = Tensor<double>::zeros({1, 3, 3, 3});
  EXPECT_THROW(spc::correlation_stats(d, too_big, patches), spc::ShapeError);
  Tensor<double> wrong_ch = Tensor<double>::zeros({1, 4, 2, 2});
  EXPECT_THROW(spc::correlation_stats(d, wrong_ch, patches), spc::ShapeError);
  Dictionary mismatched = random_unit_dict(48, 4, 11);
  Tensor<double> ok = Tensor<double>::zeros({1, 3, 2, 2});
  EXPECT_THROW(spc::correlation_stats(mismatched, ok, patches),
               spc::ShapeError);
}

TEST(Correlations, AtomAlignedPatchesOutscoreStemFilters) {
  // Patches drawn exactly from the dictionary: each is one atom.  The
  // top percentile of |rho| then sits at 1 while unit-norm random stem
  // filters only reach random-cosine territory.
  Dictionary d = random_unit_dict(12, 24, 13);
  PatchGrid<double> patches;
  patches.m = 14;  // 196 patches
  patches.n = 2;
  patches.nbar = 12;
  const int P = patches.count();
  patches.data.assign(static_cast<std::size_t>(P) * 12, 0.0);
  Rng pick = Rng::stream({0xD1C, 17});
  for (int i = 0; i < P; ++i) {
    const int l = static_cast<int>(pick.next_u64() % 24);
    for (int j = 0; j < 12; ++j) patches.data[i * 12 + j] = d.atom(l)[j];
  }

  Tensor<double> stem = Tensor<double>::zeros({8, 3, 2, 2});
  Rng rng = Rng::stream({0xF11, 19});
  for (int f = 0; f < 8; ++f) {
    double norm = 0.0;
    for (int k = 0; k < 12; ++k) {
      const double v = rng.next_gaussian();
      stem.value()[f * 12 + k] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (int k = 0; k < 12; ++k) stem.value()[f * 12 + k] /= norm;
  }

  auto stats = spc::correlation_stats(d, stem, patches);
  std::vector<double> abs_rho, abs_gamma;
  for (double v : stats.rho) abs_rho.push_back(std::fabs(v));
  for (double v : stats.gamma) abs_gamma.push_back(std::fabs(v));
  const double rho99 = spc::quantile(abs_rho, 0.99);
  const double gamma99 = spc::quantile(abs_gamma, 0.99);
  EXPECT_DOUBLE_EQ(rho99, 1.0);
  EXPECT_LT(gamma99, 0.95);
  EXPECT_GT(rho99, gamma99);
}

// ---------------------------------------------------------------------------

TEST(HistogramBins, GoldenBinningAndCsv) {
  Histogram h = spc::make_histogram({0.0, 0.5, 1.0}, 2, 0.0, 1.0);
  ASSERT_EQ(h.counts.size(), 2u);
  EXPECT_EQ(h.counts[0], 1);  // 0.0
  EXPECT_EQ(h.counts[1], 2);  // 0.5 and the upper edge 1.0
  std::ostringstream os;
  spc::write_histogram_csv(os, h);
  EXPECT_EQ(os.str(), "bin_lo,bin_hi,count\n0,0.5,1\n0.5,1,2\n");
}

TEST(HistogramBins, AutoRangeHandlesConstantSamples) {
  Histogram h = spc::make_histogram({2.0, 2.0, 2.0}, 4);
  EXPECT_DOUBLE_EQ(h.lo, 2.0);
  EXPECT_DOUBLE_EQ(h.hi, 3.0);
  EXPECT_EQ(h.counts[0], 3);
  Histogram empty = spc::make_histogram({}, 4);
  EXPECT_DOUBLE_EQ(empty.lo, 0.0);
  EXPECT_DOUBLE_EQ(empty.hi, 1.0);
}

TEST(HistogramBins, RejectsBadArguments) {
  EXPECT_THROW(spc::make_histogram({1.0}, 0, 0.0, 1.0), spc::ConfigError);
  EXPECT_THROW(spc::make_histogram({1.0}, 4, 1.0, 1.0), spc::ConfigError);
  EXPECT_THROW(
      spc::make_histogram({std::numeric_limits<double>::quiet_NaN()}, 4, 0.0,
                          1.0),
      spc::DataError);
}

TEST(Quantiles, LinearInterpolationOracle) {
  EXPECT_DOUBLE_EQ(spc::quantile({10.0, 20.0, 30.0, 40.0}, 0.0), 10.0);
  EXPECT_DOUBLE_EQ(spc::quantile({10.0, 20.0, 30.0, 40.0}, 1.0), 40.0);
  EXPECT_DOUBLE_EQ(spc::quantile({40.0, 10.0, 30.0, 20.0}, 0.5), 25.0);
  std::vector<double> ladder;
  for (int i = 1; i <= 100; ++i) ladder.push_back(i);
  EXPECT_NEAR(spc::quantile(ladder, 0.99), 99.01, 1e-9);
  EXPECT_THROW(spc::quantile({}, 0.5), spc::DataError);
  EXPECT_THROW(spc::quantile({1.0}, 1.5), spc::ConfigError);
}

}  // namespace
