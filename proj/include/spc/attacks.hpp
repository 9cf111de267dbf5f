#pragma once

// Sup-norm-bounded iterative attacks against identity-front and sparse-front
// models.
//
// Every attack ascends a per-image objective (cross-entropy of the true
// label, or the logit margin max_{i != y} z_i - z_y) by signed gradient
// steps:
//   e <- clip_[-eps,eps](e + delta * sign(g)),  then  e <- clip(x+e,0,1) - x
// (sign(0) = 0; the second projection keeps the adversarial image a valid
// image and can only shrink |e|).
//
// Gradient estimators:
//   * identity front: exact input gradient through the classifier.
//   * full-chain (sparse front): backpropagate to the code tensor, map each
//     top-T/dropout survivor back through the quantizer via a surrogate
//     derivative, multiply by its atom, and scatter the per-patch gradients
//     onto the image (overlaps summing).  With quantization disabled this
//     chain is the exact gradient of the (locally) differentiable pipeline.
//   * autoencoder-image (sparse front): encode+decode without gradients,
//     then take the classifier's gradient at the decoded image as the
//     image-space direction.
//
// Expectation over dropout (EOT): per step, realization r of N_E draws its
// masks from stream (seed, dropout tag, image id, restart, step, r); the
// estimators' gradients are summed (optionally each normalized to unit l2
// first) before the sign.  With dropout inactive there is exactly one draw,
// so a single-draw EOT attack and a plain attack are the same code path and
// bit-identical.
//
// Multiple restarts keep the first restart that wins lexicographically
// (misclassified beats not, then higher objective); predictions/objectives
// for selection come from one fixed "selection" dropout realization so the
// choice is deterministic.
//
// Perturbation archive "SSPB" (little-endian): u32 version, u32 record
// count, u32 image side N, then per record a u64 image index followed by
// 3*N*N fp32 values (planar, matching image layout).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "spc/common.hpp"
#include "spc/models.hpp"
#include "spc/patches.hpp"
#include "spc/rng.hpp"
#include "spc/tensor.hpp"

namespace spc {

enum class AttackMode { kPgd, kFullChain, kAutoencoderImage };
enum class SurrogateKind { kIdentity, kSmooth };

struct AttackSpec {
  AttackMode mode = AttackMode::kPgd;
  int steps = 20;
  double delta = 1.0 / 255.0;
  double eps = 8.0 / 255.0;
  int restarts = 1;
  int eot = 1;  // dropout draws aggregated per step
  SurrogateKind surrogate = SurrogateKind::kSmooth;
  double sigma = 0.25;
  bool random_start = false;
  bool cw_loss = false;                 // margin objective instead of CE
  bool normalized_aggregation = false;  // l2-normalize each draw before summing

  void validate() const {
    if (steps < 0 || restarts < 1 || eot < 1)
      throw ConfigError("attack steps/restarts/eot out of range");
    if (delta < 0 || eps < 0) throw ConfigError("attack delta/eps must be >= 0");
    if (sigma <= 0) throw ConfigError("attack sigma must be > 0");
  }
};

// The dropout realization used for restart-selection forwards (disjoint
// from EOT draw indices, which are small integers).
inline constexpr std::uint64_t kSelectionDraw = 0xffffffffULL;

// ---------------------------------------------------------------------------
// Quantizer surrogates.  The dead-zone ternary quantizer is flat almost
// everywhere; attacks replace its backward by either the identity
// (straight-through) or the derivative of the smooth companion
//   f(v) = (level/2) * [tanh((v - thr)/sigma) + tanh((v + thr)/sigma)],
// which tracks the quantizer away from the thresholds and has mass near
// them.  `level` is ||d_l||_1 (or 1 when levels are unscaled), thr is the
// dead-zone threshold.

inline double smooth_quantizer(double v, double level, double thr, double sigma) {
  return 0.5 * level * (std::tanh((v - thr) / sigma) + std::tanh((v + thr) / sigma));
}

inline double smooth_quantizer_derivative(double v, double level, double thr,
                                          double sigma) {
  const double a = std::cosh((v - thr) / sigma);
  const double b = std::cosh((v + thr) / sigma);
  return 0.5 * level / sigma * (1.0 / (a * a) + 1.0 / (b * b));
}

inline double surrogate_derivative(SurrogateKind kind, double v, double level,
                                   double thr, double sigma) {
  return kind == SurrogateKind::kIdentity
             ? 1.0
             : smooth_quantizer_derivative(v, level, thr, sigma);
}

// ---------------------------------------------------------------------------
// Projection step.

template <class T>
void pgd_step(std::vector<T>& e, const std::vector<double>& g, const T* x,
              double delta, double eps) {
  if (e.size() != g.size()) throw ShapeError("pgd_step extent mismatch");
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double s = (g[i] > 0.0) ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    double v = static_cast<double>(e[i]) + delta * s;
    v = std::min(eps, std::max(-eps, v));
    const double xa =
        std::min(1.0, std::max(0.0, static_cast<double>(x[i]) + v));
    e[i] = static_cast<T>(xa - static_cast<double>(x[i]));
  }
}

// ---------------------------------------------------------------------------
// Objectives.

template <class T>
Tensor<T> attack_loss(Tape<T>& tape, const Tensor<T>& logits, int label,
                      bool cw) {
  if (!cw) return tape.cross_entropy(tape.softmax(logits), {label});
  const auto& z = logits.value();
  const int C = logits.shape()[1];
  int best = -1;
  for (int i = 0; i < C; ++i)
    if (i != label && (best < 0 || z[i] > z[best])) best = i;
  std::vector<T> w(static_cast<std::size_t>(C), T(0));
  w[best] = T(1);
  w[label] = T(-1);
  Tensor<T> selector = Tensor<T>::from({C, 1}, std::move(w));
  return tape.matmul(logits, selector);  // (1,1): margin z_best - z_label
}

template <class T>
int argmax_row(const Tensor<T>& logits) {
  const auto& z = logits.value();
  int best = 0;
  for (std::size_t i = 1; i < z.size(); ++i)
    if (z[i] > z[best]) best = static_cast<int>(i);
  return best;
}

// ---------------------------------------------------------------------------
// Per-realization gradient estimators.  All return the objective gradient
// with respect to the adversarial image (3*N*N planar doubles).

template <class T>
struct RealizationGrad {
  std::vector<double> grad;
  double loss = 0.0;
  int pred = -1;
};

template <class T>
RealizationGrad<T> input_gradient(const DefenseModel<T>& model,
                                  const std::vector<T>& x_adv, int label,
                                  bool cw) {
  const int N = model.image_side;
  Tensor<T> leaf = Tensor<T>::from({1, 3, N, N}, x_adv);
  leaf.set_requires_grad(true);
  Tape<T> tape;
  Tensor<T> logits = model.classifier.forward(tape, leaf);
  Tensor<T> loss = attack_loss(tape, logits, label, cw);
  RealizationGrad<T> out;
  out.pred = argmax_row(logits);
  out.loss = static_cast<double>(loss.value()[0]);
  tape.backward(loss);
  const auto& g = leaf.grad();
  out.grad.assign(g.begin(), g.end());
  return out;
}

template <class T>
RealizationGrad<T> full_chain_gradient(const DefenseModel<T>& model,
                                       const std::vector<T>& x_adv, int label,
                                       const AttackSpec& spec,
                                       const std::vector<std::uint64_t>& prefix) {
  const int N = model.image_side;
  EncodeTrace trace;
  SparseCode<T> code =
      encode(model.dict, x_adv.data(), N, model.enc, prefix, &trace);
  Tensor<T> ct = code_to_tensor(code);
  ct.set_requires_grad(true);
  Tape<T> tape;
  Tensor<T> decoded = model.decoder.forward(tape, ct);
  Tensor<T> logits = model.classifier.forward(tape, decoded);
  Tensor<T> loss = attack_loss(tape, logits, label, spec.cw_loss);
  RealizationGrad<T> out;
  out.pred = argmax_row(logits);
  out.loss = static_cast<double>(loss.value()[0]);
  tape.backward(loss);
  const auto& dcode = ct.grad();  // dense (1, L, m, m)

  const int m = code.m;
  PatchGrid<double> dpatch;
  dpatch.m = m;
  dpatch.n = model.enc.n;
  dpatch.stride = model.enc.S;
  dpatch.nbar = model.dict.nbar;
  dpatch.data.assign(static_cast<std::size_t>(m) * m * dpatch.nbar, 0.0);
  const bool through_quant = model.enc.enable_quant;
  for (int pidx = 0; pidx < m * m; ++pidx) {
    double* row = dpatch.patch(pidx);
    for (int k = trace.offsets[pidx]; k < trace.offsets[pidx + 1]; ++k) {
      const int l = trace.channels[k];
      const double upstream =
          static_cast<double>(dcode[static_cast<std::size_t>(l) * m * m + pidx]);
      if (upstream == 0.0) continue;
      double dproj = upstream;
      if (through_quant) {
        const double level = model.enc.scale_by_l1 ? model.dict.l1[l] : 1.0;
        dproj *= surrogate_derivative(spec.surrogate, trace.projections[k],
                                      level, model.enc.threshold(model.dict.l1[l]),
                                      spec.sigma);
      }
      if (dproj == 0.0) continue;
      const double* atom = model.dict.atom(l);
      for (int j = 0; j < dpatch.nbar; ++j) row[j] += dproj * atom[j];
    }
  }
  out.grad.assign(static_cast<std::size_t>(3) * N * N, 0.0);
  scatter_patches_add(dpatch, N, out.grad.data());
  return out;
}

template <class T>
RealizationGrad<T> autoencoder_image_gradient(
    const DefenseModel<T>& model, const std::vector<T>& x_adv, int label,
    bool cw, const std::vector<std::uint64_t>& prefix) {
  const int N = model.image_side;
  SparseCode<T> code = encode(model.dict, x_adv.data(), N, model.enc, prefix);
  Tensor<T> decoded_values;
  {
    Tape<T> decode_tape;
    decoded_values = model.decoder.forward(decode_tape, code_to_tensor(code));
  }
  Tensor<T> leaf = Tensor<T>::from(decoded_values.shape(), decoded_values.value());
  leaf.set_requires_grad(true);
  Tape<T> tape;
  Tensor<T> logits = model.classifier.forward(tape, leaf);
  Tensor<T> loss = attack_loss(tape, logits, label, cw);
  RealizationGrad<T> out;
  out.pred = argmax_row(logits);
  out.loss = static_cast<double>(loss.value()[0]);
  tape.backward(loss);
  const auto& g = leaf.grad();
  out.grad.assign(g.begin(), g.end());
  return out;
}

template <class T>
RealizationGrad<T> realization_gradient(const DefenseModel<T>& model,
                                        const std::vector<T>& x_adv, int label,
                                        const AttackSpec& spec,
                                        const std::vector<std::uint64_t>& prefix) {
  if (model.front == FrontEnd::kIdentity) {
    if (spec.mode != AttackMode::kPgd)
      throw ConfigError("front-end gradient estimators need a sparse-front model");
    return input_gradient(model, x_adv, label, spec.cw_loss);
  }
  switch (spec.mode) {
    case AttackMode::kFullChain:
      return full_chain_gradient(model, x_adv, label, spec, prefix);
    case AttackMode::kAutoencoderImage:
      return autoencoder_image_gradient(model, x_adv, label, spec.cw_loss, prefix);
    case AttackMode::kPgd:
      throw ConfigError("plain input-gradient attack is undefined through the "
                        "non-differentiable front end; pick an estimator");
  }
  throw ConfigError("unreachable attack mode");
}

// ---------------------------------------------------------------------------
// EOT aggregation and the step gradient.

inline void accumulate_draw(std::vector<double>& acc,
                            const std::vector<double>& g, bool normalized) {
  double scale = 1.0;
  if (normalized) {
    double sq = 0.0;
    for (double v : g) sq += v * v;
    if (sq <= 0.0) return;  // zero-gradient draw contributes nothing
    scale = 1.0 / std::sqrt(sq);
  }
  if (acc.empty()) acc.assign(g.size(), 0.0);
  if (acc.size() != g.size()) throw ShapeError("EOT draw extent mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) acc[i] += scale * g[i];
}

template <class T>
std::vector<double> step_gradient(const DefenseModel<T>& model,
                                  const std::vector<T>& x_adv, int label,
                                  const AttackSpec& spec, std::uint64_t seed,
                                  std::uint64_t image_id, std::uint64_t restart,
                                  std::uint64_t step) {
  const int draws = model.dropout_active() ? spec.eot : 1;
  std::vector<double> acc;
  for (int r = 0; r < draws; ++r) {
    RealizationGrad<T> g = realization_gradient(
        model, x_adv, label, spec,
        {seed, static_cast<std::uint64_t>(StreamTag::kDropout), image_id,
         restart, step, static_cast<std::uint64_t>(r)});
    accumulate_draw(acc, g.grad, spec.normalized_aggregation);
  }
  if (acc.empty()) acc.assign(x_adv.size(), 0.0);
  return acc;
}

// ---------------------------------------------------------------------------
// Full per-image attack.

struct RestartOutcome {
  bool success = false;
  double loss = 0.0;
  int pred = -1;
};

template <class T>
struct AttackOutcome {
  std::vector<T> perturbation;  // 3*N*N, sup-norm <= eps, x+e in [0,1]
  bool success = false;
  double loss = 0.0;
  int clean_pred = -1;
  int adv_pred = -1;
  std::vector<RestartOutcome> restarts;
};

template <class T>
std::pair<int, double> selection_forward(const DefenseModel<T>& model,
                                         const std::vector<T>& image, int label,
                                         bool cw, std::uint64_t seed,
                                         std::uint64_t image_id) {
  Tape<T> tape;
  Tensor<T> logits = model.forward_single(
      tape, image.data(),
      {seed, static_cast<std::uint64_t>(StreamTag::kDropout), image_id,
       kSelectionDraw});
  Tensor<T> loss = attack_loss(tape, logits, label, cw);
  return {argmax_row(logits), static_cast<double>(loss.value()[0])};
}

template <class T>
AttackOutcome<T> attack_image(const DefenseModel<T>& model, const T* x,
                              int label, const AttackSpec& spec,
                              std::uint64_t seed, std::uint64_t image_id) {
  spec.validate();
  const std::size_t n = static_cast<std::size_t>(3) * model.image_side *
                        model.image_side;
  const std::vector<T> clean(x, x + n);

  AttackOutcome<T> out;
  out.clean_pred =
      selection_forward(model, clean, label, spec.cw_loss, seed, image_id).first;

  std::vector<T> e(n), x_adv(n);
  for (int r = 0; r < spec.restarts; ++r) {
    if (spec.random_start) {
      Rng rng = Rng::stream({seed,
                             static_cast<std::uint64_t>(StreamTag::kAttackInit),
                             image_id, static_cast<std::uint64_t>(r)});
      for (std::size_t i = 0; i < n; ++i) {
        double v = rng.next_uniform(-spec.eps, spec.eps);
        const double xa = std::min(1.0, std::max(0.0, static_cast<double>(x[i]) + v));
        e[i] = static_cast<T>(xa - static_cast<double>(x[i]));
      }
    } else {
      std::fill(e.begin(), e.end(), T(0));
    }
    for (int s = 0; s < spec.steps; ++s) {
      for (std::size_t i = 0; i < n; ++i) x_adv[i] = static_cast<T>(x[i] + e[i]);
      std::vector<double> g =
          step_gradient(model, x_adv, label, spec, seed, image_id,
                        static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(s));
      pgd_step(e, g, x, spec.delta, spec.eps);
    }
    for (std::size_t i = 0; i < n; ++i) x_adv[i] = static_cast<T>(x[i] + e[i]);
    auto [pred, loss] =
        selection_forward(model, x_adv, label, spec.cw_loss, seed, image_id);
    RestartOutcome ro{pred != label, loss, pred};
    out.restarts.push_back(ro);
    const bool better =
        out.perturbation.empty() ||
        (ro.success && !out.success) ||
        (ro.success == out.success && ro.loss > out.loss);
    if (better) {
      out.perturbation = e;
      out.success = ro.success;
      out.loss = ro.loss;
      out.adv_pred = ro.pred;
    }
  }
  return out;
}

// Deep-copies a model so attack tapes never touch the trainable original:
// parameter tensors are cloned with gradients off.
template <class T>
DefenseModel<T> inference_clone(const DefenseModel<T>& model) {
  DefenseModel<T> copy = model;
  for (auto& layer : copy.decoder.layers) {
    layer.kernel = layer.kernel.clone_detached();
    layer.bias = layer.bias.clone_detached();
  }
  ClassifierNet<T>& c = copy.classifier;
  for (Conv2d<T>* conv : {&c.stem, &c.block1a, &c.block1b, &c.down1, &c.block2a,
                          &c.block2b, &c.down2, &c.block3a, &c.block3b}) {
    conv->kernel = conv->kernel.clone_detached();
    conv->bias = conv->bias.clone_detached();
  }
  c.fc_weight = c.fc_weight.clone_detached();
  c.fc_bias = c.fc_bias.clone_detached();
  return copy;
}

// ---------------------------------------------------------------------------
// Perturbation archive ("SSPB") and its CSV manifest.

inline constexpr std::uint32_t kPerturbationVersion = 1;

struct PerturbationRecord {
  std::uint64_t index = 0;
  std::vector<float> values;  // 3*N*N planar
};

struct PerturbationArchive {
  std::uint32_t version = kPerturbationVersion;
  std::uint32_t side = 32;
  std::vector<PerturbationRecord> records;
};

inline std::vector<std::uint8_t> serialize_perturbations(
    const PerturbationArchive& a) {
  const std::size_t plane = static_cast<std::size_t>(3) * a.side * a.side;
  std::vector<std::uint8_t> out;
  out.reserve(12 + a.records.size() * (8 + plane * 4));
  auto put = [&out](const void* p, std::size_t k) {
    const std::size_t at = out.size();
    out.resize(at + k);
    std::memcpy(out.data() + at, p, k);
  };
  put(&a.version, 4);
  const std::uint32_t count = static_cast<std::uint32_t>(a.records.size());
  put(&count, 4);
  put(&a.side, 4);
  for (const PerturbationRecord& r : a.records) {
    if (r.values.size() != plane)
      throw ShapeError("perturbation record extent mismatch");
    put(&r.index, 8);
    put(r.values.data(), plane * 4);
  }
  return out;
}

inline PerturbationArchive deserialize_perturbations(const std::uint8_t* p,
                                                     std::size_t len) {
  if (len < 12) throw DataError("perturbation archive truncated");
  PerturbationArchive a;
  std::memcpy(&a.version, p, 4);
  if (a.version != kPerturbationVersion)
    throw DataError("unsupported perturbation archive version");
  std::uint32_t count = 0;
  std::memcpy(&count, p + 4, 4);
  std::memcpy(&a.side, p + 8, 4);
  if (a.side == 0 || a.side > 4096)
    throw DataError("perturbation archive image side out of range");
  const std::size_t plane = static_cast<std::size_t>(3) * a.side * a.side;
  if (len != 12 + static_cast<std::size_t>(count) * (8 + plane * 4))
    throw DataError("perturbation archive size mismatch");
  std::size_t at = 12;
  for (std::uint32_t i = 0; i < count; ++i) {
    PerturbationRecord r;
    std::memcpy(&r.index, p + at, 8);
    at += 8;
    r.values.resize(plane);
    std::memcpy(r.values.data(), p + at, plane * 4);
    at += plane * 4;
    a.records.push_back(std::move(r));
  }
  return a;
}

inline void save_perturbations(const PerturbationArchive& a,
                               const std::string& path) {
  const auto bytes = serialize_perturbations(a);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("cannot write perturbation archive: " + path);
  const std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw DataError("short write: " + path);
}

inline PerturbationArchive load_perturbations(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot read perturbation archive: " + path);
  std::fseek(f, 0, SEEK_END);
  const long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<std::uint8_t> bytes(sz > 0 ? static_cast<std::size_t>(sz) : 0);
  const std::size_t n = bytes.empty() ? 0 : std::fread(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw DataError("short read: " + path);
  return deserialize_perturbations(bytes.data(), bytes.size());
}

struct AttackManifestRow {
  std::uint64_t index = 0;
  int true_label = -1, clean_pred = -1, adv_pred = -1;
  double loss = 0.0;
};

inline void write_attack_manifest(std::ostream& os,
                                  const std::vector<AttackManifestRow>& rows) {
  os << "index,true_label,clean_pred,adv_pred,loss\n";
  const auto prec = os.precision();
  os.precision(17);
  for (const AttackManifestRow& r : rows)
    os << r.index << ',' << r.true_label << ',' << r.clean_pred << ','
       << r.adv_pred << ',' << r.loss << '\n';
  os.precision(prec);
}

}  // namespace spc
