#include "spc/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <vector>

#include "spc/checkpoint.hpp"
#include "spc/data.hpp"
#include "spc/models.hpp"
#include "spc/rng.hpp"

namespace {

using spc::ClassifierGeometry;
using spc::Dataset;
using spc::DecoderGeometry;
using spc::DefenseModel;
using spc::Dictionary;
using spc::FrontEnd;
using spc::Rng;
using spc::Tensor;
using spc::TrainMode;
using spc::TrainOptions;

// ---------------------------------------------------------------------------
// Oracle: two momentum steps by hand (mu = 0.9, lr = 0.1).
//   w0 = 1.0, g1 = 0.5:  v = 0.5,                w = 1.0 - 0.05  = 0.95
//   g2 = 0.25:           v = 0.45 + 0.25 = 0.7,  w = 0.95 - 0.07 = 0.88

TEST(MomentumSgd, TwoStepHandComputation) {
  Tensor<double> w = Tensor<double>::from({1}, std::vector<double>{1.0});
  w.set_requires_grad(true);
  std::vector<Tensor<double>> params = {w};
  spc::MomentumSgd<double> opt;
  opt.momentum = 0.9;
  w.grad()[0] = 0.5;
  opt.step(params, 0.1);
  EXPECT_DOUBLE_EQ(w.value()[0], 0.95);
  EXPECT_EQ(w.grad()[0], 0.0);  // consumed
  w.grad()[0] = 0.25;
  opt.step(params, 0.1);
  EXPECT_DOUBLE_EQ(w.value()[0], 0.88);
}

TEST(TrainMode, ParseAndNameRoundTrip) {
  for (const char* name : {"natural", "supervised-joint", "unsupervised-decoder",
                           "classifier-only", "pgd-adversarial"})
    EXPECT_EQ(spc::train_mode_name(spc::parse_train_mode(name)), name);
  EXPECT_THROW(spc::parse_train_mode("bogus"), spc::ConfigError);
}

TEST(TrainingCsv, GoldenLayout) {
  std::ostringstream os;
  spc::write_training_csv(os, {{0, "train", 2.5, 0.5, 0.01},
                               {0, "eval", 2.25, 0.75, 0.01}});
  EXPECT_EQ(os.str(),
            "epoch,split,loss,accuracy,lr\n"
            "0,train,2.5,0.5,0.01\n"
            "0,eval,2.25,0.75,0.01\n");
}

// ---------------------------------------------------------------------------
// Fixtures.

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

Dictionary random_unit_dict(int nbar, int L, std::uint64_t tag) {
  Rng rng = Rng::stream({0xD1C7, tag});
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

Dataset<double> tiny_data(int count, std::uint64_t seed) {
  return spc::synth_dataset<double>(count, 8, seed, 0);
}

std::vector<std::vector<double>> snapshot(std::vector<Tensor<double>> params) {
  std::vector<std::vector<double>> out;
  for (auto& p : params) out.push_back(p.value());
  return out;
}

// ---------------------------------------------------------------------------

TEST(TrainModel, RejectsModeFrontMismatches) {
  auto data = tiny_data(4, 1);
  TrainOptions opts;
  opts.epochs = 1;
  opts.mode = TrainMode::kNatural;
  auto sparse = tiny_sparse_model(0.0, 2);
  EXPECT_THROW(spc::train_model(sparse, data, opts), spc::ConfigError);
  opts.mode = TrainMode::kSupervisedJoint;
  auto identity = tiny_identity_model(3);
  EXPECT_THROW(spc::train_model(identity, data, opts), spc::ConfigError);
}

TEST(TrainModel, NaturalLossDecreasesOnSeparableData) {
  auto model = tiny_identity_model(5);
  auto data = tiny_data(24, 7);
  TrainOptions opts;
  opts.mode = TrainMode::kNatural;
  opts.epochs = 8;
  opts.batch = 8;
  opts.eta_max = 0.08;
  opts.seed = 11;
  auto log = spc::train_model(model, data, opts);
  ASSERT_EQ(log.rows.size(), 8u);
  EXPECT_EQ(log.steps, 8 * 3);
  EXPECT_LT(log.rows.back().loss, log.rows.front().loss);
  for (const auto& r : log.rows) {
    EXPECT_EQ(r.split, "train");
    EXPECT_TRUE(std::isfinite(r.loss));
  }
  EXPECT_TRUE(log.mask_hashes.empty());  // identity front has no masks
}

TEST(TrainModel, FixedSeedIsBitReproducible) {
  auto data = tiny_data(12, 9);
  TrainOptions opts;
  opts.mode = TrainMode::kNatural;
  opts.epochs = 3;
  opts.batch = 4;
  opts.eta_max = 0.05;
  opts.seed = 21;
  auto m1 = tiny_identity_model(13);
  auto m2 = tiny_identity_model(13);
  auto l1 = spc::train_model(m1, data, opts);
  auto l2 = spc::train_model(m2, data, opts);
  auto s1 = snapshot(m1.parameters());
  auto s2 = snapshot(m2.parameters());
  ASSERT_EQ(s1.size(), s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) EXPECT_EQ(s1[i], s2[i]);
  ASSERT_EQ(l1.rows.size(), l2.rows.size());
  for (std::size_t i = 0; i < l1.rows.size(); ++i) {
    EXPECT_EQ(l1.rows[i].loss, l2.rows[i].loss);
    EXPECT_EQ(l1.rows[i].accuracy, l2.rows[i].accuracy);
    EXPECT_EQ(l1.rows[i].lr, l2.rows[i].lr);
  }
}

TEST(TrainModel, OversubscribedWorkersAreDeterministicAndAccurate) {
  auto data = tiny_data(12, 15);
  TrainOptions opts;
  opts.mode = TrainMode::kNatural;
  opts.epochs = 2;
  opts.batch = 6;
  opts.eta_max = 0.05;
  opts.seed = 33;

  auto base = tiny_identity_model(17);
  auto l_base = spc::train_model(base, data, opts);

  spc::max_threads() = 4;  // oversubscribed on one core
  auto m1 = tiny_identity_model(17);
  auto m2 = tiny_identity_model(17);
  auto l1 = spc::train_model(m1, data, opts);
  auto l2 = spc::train_model(m2, data, opts);
  spc::max_threads() = 1;

  auto s1 = snapshot(m1.parameters());
  auto s2 = snapshot(m2.parameters());
  for (std::size_t i = 0; i < s1.size(); ++i)
    EXPECT_EQ(s1[i], s2[i]) << "param " << i;
  ASSERT_EQ(l1.rows.size(), l2.rows.size());
  for (std::size_t i = 0; i < l1.rows.size(); ++i)
    EXPECT_EQ(l1.rows[i].loss, l2.rows[i].loss);

  // Different worker counts regroup floating-point sums; results agree to
  // rounding, not bit-for-bit.
  auto sp = snapshot(base.parameters());
  double worst = 0.0;
  for (std::size_t i = 0; i < sp.size(); ++i)
    for (std::size_t j = 0; j < sp[i].size(); ++j)
      worst = std::max(worst, std::abs(sp[i][j] - s1[i][j]) /
                                  std::max(1.0, std::abs(sp[i][j])));
  EXPECT_LT(worst, 1e-9);
}

TEST(TrainModel, SupervisedJointLeavesDictionaryUntouched) {
  auto model = tiny_sparse_model(0.5, 19);
  const auto hash_before = spc::dictionary_hash(model.dict);
  auto data = tiny_data(8, 23);
  TrainOptions opts;
  opts.mode = TrainMode::kSupervisedJoint;
  opts.epochs = 3;
  opts.batch = 8;  // one batch per epoch -> one mask hash per epoch
  opts.eta_max = 0.02;
  opts.seed = 29;
  auto log = spc::train_model(model, data, opts);
  EXPECT_EQ(spc::dictionary_hash(model.dict), hash_before);
  ASSERT_EQ(log.mask_hashes.size(), 3u);
  std::set<std::uint64_t> distinct(log.mask_hashes.begin(), log.mask_hashes.end());
  EXPECT_EQ(distinct.size(), 3u) << "dropout masks must be resampled per epoch";
  for (const auto& r : log.rows) EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(TrainModel, MaskHashesConstantWhenDropoutInactive) {
  auto model = tiny_sparse_model(0.0, 31);
  auto data = tiny_data(6, 37);
  TrainOptions opts;
  opts.mode = TrainMode::kSupervisedJoint;
  opts.epochs = 2;
  opts.batch = 6;
  opts.eta_max = 0.01;
  auto log = spc::train_model(model, data, opts);
  ASSERT_EQ(log.mask_hashes.size(), 2u);
  EXPECT_EQ(log.mask_hashes[0], log.mask_hashes[1]);
}

TEST(TrainModel, UnsupervisedDecoderImprovesReconstructionOnly) {
  auto model = tiny_sparse_model(0.0, 41);
  const auto classifier_before = snapshot(model.classifier.parameters());
  const auto decoder_before = snapshot(model.decoder.parameters());
  auto data = tiny_data(16, 43);
  TrainOptions opts;
  opts.mode = TrainMode::kUnsupervisedDecoder;
  opts.epochs = 10;
  opts.batch = 8;
  opts.eta_max = 0.002;
  opts.seed = 47;
  auto log = spc::train_model(model, data, opts);
  EXPECT_LT(log.rows.back().loss, log.rows.front().loss);
  for (const auto& r : log.rows) EXPECT_EQ(r.accuracy, 0.0);
  EXPECT_EQ(snapshot(model.classifier.parameters()), classifier_before);
  EXPECT_NE(snapshot(model.decoder.parameters()), decoder_before);
}

TEST(TrainModel, ClassifierOnlyFreezesTheDecoder) {
  auto model = tiny_sparse_model(0.3, 53);
  const auto decoder_before = snapshot(model.decoder.parameters());
  const auto classifier_before = snapshot(model.classifier.parameters());
  auto data = tiny_data(8, 59);
  TrainOptions opts;
  opts.mode = TrainMode::kClassifierOnly;
  opts.epochs = 2;
  opts.batch = 4;
  opts.eta_max = 0.02;
  opts.seed = 61;
  spc::train_model(model, data, opts);
  EXPECT_EQ(snapshot(model.decoder.parameters()), decoder_before);
  EXPECT_NE(snapshot(model.classifier.parameters()), classifier_before);
}

TEST(TrainModel, AdversarialModeTrainsOnPerturbedInputs) {
  auto data = tiny_data(8, 67);
  TrainOptions opts;
  opts.epochs = 2;
  opts.batch = 4;
  opts.eta_max = 0.03;
  opts.seed = 71;

  auto natural = tiny_identity_model(73);
  opts.mode = TrainMode::kNatural;
  spc::train_model(natural, data, opts);

  auto robust = tiny_identity_model(73);
  opts.mode = TrainMode::kPgdAdversarial;
  opts.at_steps = 3;
  opts.at_delta = 2.0 / 255.0;
  opts.at_eps = 8.0 / 255.0;
  auto log = spc::train_model(robust, data, opts);
  for (const auto& r : log.rows) EXPECT_TRUE(std::isfinite(r.loss));

  // The inner attack must actually change what the classifier sees.
  EXPECT_NE(snapshot(natural.parameters()), snapshot(robust.parameters()));
}

TEST(TrainModel, SubsetRestrictsTheExampleCount) {
  auto model = tiny_identity_model(79);
  auto data = tiny_data(10, 83);
  TrainOptions opts;
  opts.mode = TrainMode::kNatural;
  opts.epochs = 2;
  opts.batch = 3;
  opts.subset = 4;
  opts.eta_max = 0.01;
  auto log = spc::train_model(model, data, opts);
  EXPECT_EQ(log.steps, 2 * 2);  // ceil(4/3) = 2 batches per epoch
}

TEST(TrainModel, LearningRateFollowsTheTriangle) {
  auto model = tiny_identity_model(89);
  auto data = tiny_data(4, 97);
  TrainOptions opts;
  opts.mode = TrainMode::kNatural;
  opts.epochs = 4;
  opts.batch = 4;  // one step per epoch, total 4 steps
  opts.eta_min = 0.0;
  opts.eta_max = 0.04;
  auto log = spc::train_model(model, data, opts);
  ASSERT_EQ(log.rows.size(), 4u);
  EXPECT_DOUBLE_EQ(log.rows[0].lr, 0.0);
  EXPECT_DOUBLE_EQ(log.rows[1].lr, 0.02);
  EXPECT_DOUBLE_EQ(log.rows[2].lr, 0.04);
  EXPECT_DOUBLE_EQ(log.rows[3].lr, 0.02);
}

TEST(TrainModel, NonFiniteLossRollsBackDumpsAndThrows) {
  auto model = tiny_identity_model(101);
  const auto init = snapshot(model.parameters());
  auto data = tiny_data(4, 103);
  TrainOptions opts;
  opts.mode = TrainMode::kNatural;
  opts.epochs = 2;
  opts.batch = 4;  // one step per epoch
  // A step this size overflows the parameters, so the second batch evaluates
  // non-finite while the only state that ever evaluated finite is the
  // initialization.
  opts.eta_min = 1e300;
  opts.eta_max = 2e300;
  opts.divergence_checkpoint = ::testing::TempDir() + "/diverged.ckpt";
  opts.config_json = "{\"probe\":1}";
  std::remove(opts.divergence_checkpoint.c_str());
  EXPECT_THROW(spc::train_model(model, data, opts), spc::DivergenceError);
  // Parameters rolled back to the last finite state (here: initialization).
  EXPECT_EQ(snapshot(model.parameters()), init);
  // The dump is a loadable checkpoint of exactly that state.
  auto dumped = spc::load_checkpoint_file(opts.divergence_checkpoint);
  EXPECT_EQ(dumped.config_json, "{\"probe\":1}");
  auto fresh = tiny_identity_model(999);
  spc::load_checkpoint_into_model(dumped, fresh);
  auto restored = snapshot(fresh.parameters());
  ASSERT_EQ(restored.size(), init.size());
  for (std::size_t i = 0; i < init.size(); ++i)
    for (std::size_t j = 0; j < init[i].size(); ++j)
      EXPECT_EQ(static_cast<float>(init[i][j]), static_cast<float>(restored[i][j]));
}

TEST(TrainModel, DivergenceWithoutCheckpointPathStillThrows) {
  auto model = tiny_identity_model(107);
  auto data = tiny_data(4, 109);
  TrainOptions opts;
  opts.mode = TrainMode::kNatural;
  opts.epochs = 3;
  opts.batch = 4;
  opts.eta_min = 1e300;
  opts.eta_max = 2e300;
  EXPECT_THROW(spc::train_model(model, data, opts), spc::DivergenceError);
}

TEST(TrainOptions, ValidationRejectsBadRanges) {
  TrainOptions opts;
  opts.epochs = 0;
  EXPECT_THROW(opts.validate(), spc::ConfigError);
  opts = TrainOptions{};
  opts.momentum = 1.0;
  EXPECT_THROW(opts.validate(), spc::ConfigError);
  opts = TrainOptions{};
  opts.at_delta = -1.0;
  EXPECT_THROW(opts.validate(), spc::ConfigError);
}

}  // namespace
