#pragma once

// Training loops.
//
// Five modes:
//   natural              identity front; classifier on clean images
//   supervised-joint     sparse front; decoder + classifier on the labels
//   unsupervised-decoder sparse front; decoder alone, squared-l2 reconstruction
//   classifier-only      sparse front; classifier on frozen decoder outputs
//   pgd-adversarial      identity front; classifier on PGD examples crafted
//                        against the current parameters each batch
//
// Optimization is minibatch SGD with momentum under a single triangular
// learning-rate cycle spanning the whole run.  Epoch e visits the examples
// in the order drawn from stream (seed, shuffle tag, e); the dropout masks
// for example i in epoch e come from stream (seed, dropout tag, i, e), so a
// fixed seed makes the run bit-reproducible for a fixed worker count.
//
// Each batch is split across workers in contiguous slices.  Every worker
// owns a deep copy of the parameters, runs forward/backward on its slice,
// and exports its gradients; the main thread reduces them in worker-index
// order (deterministic for a given worker count) and steps the shared
// parameters.  Slice losses are combined with weights slice_size/batch_size,
// so the reduced gradient matches the batch-mean objective.
//
// A non-finite batch loss aborts training: the parameters are rolled back
// to the last state that evaluated finite, that state is dumped as a
// checkpoint (when a path is configured), and DivergenceError is thrown.
//
// The dictionary is never touched; training only moves decoder/classifier
// parameters.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "spc/attacks.hpp"
#include "spc/checkpoint.hpp"
#include "spc/common.hpp"
#include "spc/data.hpp"
#include "spc/models.hpp"
#include "spc/rng.hpp"
#include "spc/schedule.hpp"
#include "spc/tensor.hpp"

namespace spc {

enum class TrainMode {
  kNatural,
  kSupervisedJoint,
  kUnsupervisedDecoder,
  kClassifierOnly,
  kPgdAdversarial,
};

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "natural") return TrainMode::kNatural;
  if (s == "supervised-joint") return TrainMode::kSupervisedJoint;
  if (s == "unsupervised-decoder") return TrainMode::kUnsupervisedDecoder;
  if (s == "classifier-only") return TrainMode::kClassifierOnly;
  if (s == "pgd-adversarial") return TrainMode::kPgdAdversarial;
  throw ConfigError("unknown training mode: " + s);
}

inline std::string train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kNatural: return "natural";
    case TrainMode::kSupervisedJoint: return "supervised-joint";
    case TrainMode::kUnsupervisedDecoder: return "unsupervised-decoder";
    case TrainMode::kClassifierOnly: return "classifier-only";
    case TrainMode::kPgdAdversarial: return "pgd-adversarial";
  }
  throw ConfigError("unreachable training mode");
}

inline bool mode_needs_sparse_front(TrainMode m) {
  return m == TrainMode::kSupervisedJoint ||
         m == TrainMode::kUnsupervisedDecoder ||
         m == TrainMode::kClassifierOnly;
}

// ---------------------------------------------------------------------------

template <class T>
struct MomentumSgd {
  double momentum = 0.9;
  std::vector<std::vector<T>> velocity;  // lazily sized to the params

  // v <- momentum*v + g;  w <- w - lr*v;  gradients are consumed (zeroed).
  void step(std::vector<Tensor<T>>& params, double lr) {
    if (velocity.empty()) velocity.resize(params.size());
    if (velocity.size() != params.size())
      throw ShapeError("optimizer state does not match parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::vector<T>& w = params[i].value();
      std::vector<T>& g = params[i].grad();
      std::vector<T>& v = velocity[i];
      if (v.empty()) v.assign(w.size(), T(0));
      if (v.size() != w.size())
        throw ShapeError("optimizer state does not match parameter extents");
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = static_cast<T>(momentum * v[j] + g[j]);
        w[j] -= static_cast<T>(lr) * v[j];
      }
      params[i].zero_grad();
    }
  }
};

// ---------------------------------------------------------------------------

struct TrainOptions {
  TrainMode mode = TrainMode::kSupervisedJoint;
  int epochs = 30;
  int batch = 32;
  double eta_min = 0.0;
  double eta_max = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  int subset = 0;  // use only the first `subset` examples when > 0
  // pgd-adversarial inner attack:
  int at_steps = 5;
  double at_delta = 2.0 / 255.0;
  double at_eps = 8.0 / 255.0;
  // divergence handling:
  std::string divergence_checkpoint;  // dump last-good state here ("" = skip)
  std::string config_json = "{}";     // embedded in that checkpoint

  void validate() const {
    if (epochs < 1 || batch < 1) throw ConfigError("epochs/batch must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ConfigError("momentum must be in [0, 1)");
    if (at_steps < 0 || at_delta < 0 || at_eps < 0)
      throw ConfigError("inner attack fields must be >= 0");
  }
};

struct TrainCsvRow {
  int epoch = 0;
  std::string split = "train";
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

inline void write_training_csv(std::ostream& os,
                               const std::vector<TrainCsvRow>& rows) {
  os << "epoch,split,loss,accuracy,lr\n";
  const auto prec = os.precision();
  os.precision(17);
  for (const TrainCsvRow& r : rows)
    os << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.accuracy
       << ',' << r.lr << '\n';
  os.precision(prec);
}

struct TrainLog {
  std::vector<TrainCsvRow> rows;            // one "train" row per epoch
  std::vector<std::uint64_t> mask_hashes;   // per batch; sparse fronts only
  long long steps = 0;                      // optimizer steps taken
};

// ---------------------------------------------------------------------------

namespace detail {

template <class T>
std::vector<Tensor<T>> trainable_params(DefenseModel<T>& model, TrainMode mode) {
  switch (mode) {
    case TrainMode::kNatural:
    case TrainMode::kPgdAdversarial:
    case TrainMode::kClassifierOnly:
      return model.classifier.parameters();
    case TrainMode::kUnsupervisedDecoder:
      return model.decoder.parameters();
    case TrainMode::kSupervisedJoint: {
      std::vector<Tensor<T>> out = model.decoder.parameters();
      for (auto& p : model.classifier.parameters()) out.push_back(p);
      return out;
    }
  }
  throw ConfigError("unreachable training mode");
}

// One worker's pass over a contiguous slice of the batch.
template <class T>
struct SlicePass {
  std::vector<std::vector<T>> grads;  // per trainable param
  double loss_sum = 0.0;              // per-example loss total for the slice
  int hits = 0;
  int count = 0;
  std::uint64_t mask_hash = 0;
};

// Digest of one example's survivor pattern.  Batch hashes XOR these
// per-image digests, so they identify the set of (image, mask) pairs
// independent of visiting order and worker count.
template <class T>
std::uint64_t code_identity_digest(std::uint64_t image_id,
                                   const SparseCode<T>& code) {
  std::uint64_t h = Rng::fold(Rng::kBasis, image_id);
  const int m2 = code.m * code.m;
  for (int p = 0; p < m2; ++p)
    for (int k = code.offsets[p]; k < code.offsets[p + 1]; ++k)
      h = Rng::fold(h, (static_cast<std::uint64_t>(p) << 32) |
                           static_cast<std::uint64_t>(code.channels[k]));
  return h;
}

template <class T>
SlicePass<T> run_slice(const DefenseModel<T>& shared, TrainMode mode,
                       const Dataset<T>& data, const std::vector<int>& order,
                       std::size_t lo, std::size_t hi, int epoch,
                       const TrainOptions& opts) {
  SlicePass<T> out;
  out.count = static_cast<int>(hi - lo);
  if (out.count == 0) return out;
  const int N = shared.image_side;
  const std::size_t plane = static_cast<std::size_t>(3) * N * N;

  DefenseModel<T> model = inference_clone(shared);  // gradients start clean
  const int B = out.count;
  std::vector<int> labels(B);
  for (int b = 0; b < B; ++b) labels[b] = data.labels[order[lo + b]];

  // Inputs: clean images, adversarial images, or stacked sparse codes.
  Tensor<T> input;
  Tensor<T> targets;  // reconstruction target for the decoder mode
  if (mode == TrainMode::kNatural || mode == TrainMode::kPgdAdversarial) {
    std::vector<T> x(static_cast<std::size_t>(B) * plane);
    for (int b = 0; b < B; ++b)
      std::copy(data.image(order[lo + b]), data.image(order[lo + b]) + plane,
                x.begin() + b * plane);
    if (mode == TrainMode::kPgdAdversarial && opts.at_steps > 0) {
      // Craft inside the worker while its parameter copies are still
      // gradient-free, so only the input leaf accumulates.
      std::vector<T> e(x.size(), T(0)), x_adv(x.size());
      for (int s = 0; s < opts.at_steps; ++s) {
        for (std::size_t i = 0; i < x.size(); ++i) x_adv[i] = x[i] + e[i];
        Tensor<T> leaf = Tensor<T>::from({B, 3, N, N}, x_adv);
        leaf.set_requires_grad(true);
        Tape<T> tape;
        Tensor<T> logits = model.classifier.forward(tape, leaf);
        Tensor<T> loss = tape.cross_entropy(tape.softmax(logits), labels);
        tape.backward(loss);
        const auto& g = leaf.grad();
        std::vector<double> gd(g.begin(), g.end());
        pgd_step(e, gd, x.data(), opts.at_delta, opts.at_eps);
      }
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += e[i];
    }
    input = Tensor<T>::from({B, 3, N, N}, std::move(x));
  } else {
    std::vector<SparseCode<T>> codes;
    codes.reserve(B);
    for (int b = 0; b < B; ++b) {
      const int idx = order[lo + b];
      SparseCode<T> code = encode(
          model.dict, data.image(idx), N, model.enc,
          {opts.seed, static_cast<std::uint64_t>(StreamTag::kDropout),
           static_cast<std::uint64_t>(idx), static_cast<std::uint64_t>(epoch)});
      out.mask_hash ^=
          code_identity_digest(static_cast<std::uint64_t>(idx), code);
      codes.push_back(std::move(code));
    }
    input = stack_codes(codes);
    if (mode == TrainMode::kUnsupervisedDecoder) {
      std::vector<T> x(static_cast<std::size_t>(B) * plane);
      for (int b = 0; b < B; ++b)
        std::copy(data.image(order[lo + b]), data.image(order[lo + b]) + plane,
                  x.begin() + b * plane);
      targets = Tensor<T>::from({B, 3, N, N}, std::move(x));
    }
  }

  std::vector<Tensor<T>> params = trainable_params(model, mode);
  for (auto& p : params) p.set_requires_grad(true);

  Tape<T> tape;
  Tensor<T> loss;
  if (mode == TrainMode::kUnsupervisedDecoder) {
    Tensor<T> decoded = model.decoder.forward(tape, input);
    loss = tape.squared_l2(decoded, targets);
  } else {
    Tensor<T> h = input;
    if (mode == TrainMode::kSupervisedJoint || mode == TrainMode::kClassifierOnly)
      h = model.decoder.forward(tape, h);
    Tensor<T> logits = model.classifier.forward(tape, h);
    const auto& z = logits.value();
    const int C = logits.shape()[1];
    for (int b = 0; b < B; ++b) {
      int best = 0;
      for (int c = 1; c < C; ++c)
        if (z[static_cast<std::size_t>(b) * C + c] >
            z[static_cast<std::size_t>(b) * C + best])
          best = c;
      if (best == labels[b]) ++out.hits;
    }
    loss = tape.cross_entropy(tape.softmax(logits), labels);
  }
  out.loss_sum = static_cast<double>(loss.value()[0]) * B;
  if (std::isfinite(out.loss_sum)) tape.backward(loss);
  for (auto& p : params)
    out.grads.push_back(p.has_grad() ? p.grad()
                                     : std::vector<T>(p.size(), T(0)));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------

template <class T>
TrainLog train_model(DefenseModel<T>& model, const Dataset<T>& data,
                     const TrainOptions& opts) {
  opts.validate();
  if (mode_needs_sparse_front(opts.mode) != (model.front == FrontEnd::kSparse))
    throw ConfigError(train_mode_name(opts.mode) + " training needs a " +
                      (mode_needs_sparse_front(opts.mode) ? "sparse" : "identity") +
                      "-front model");
  if (data.count() == 0) throw DataError("training dataset is empty");
  if (data.image_side != model.image_side)
    throw ShapeError("dataset/model image side mismatch");

  int used = data.count();
  if (opts.subset > 0 && opts.subset < used) used = opts.subset;
  const int batches_per_epoch = (used + opts.batch - 1) / opts.batch;

  CyclicLrSchedule sched;
  sched.eta_min = opts.eta_min;
  sched.eta_max = opts.eta_max;
  sched.total_steps =
      static_cast<long long>(opts.epochs) * batches_per_epoch;

  std::vector<Tensor<T>> params = detail::trainable_params(model, opts.mode);
  MomentumSgd<T> optimizer;
  optimizer.momentum = opts.momentum;

  // Last parameter state that evaluated to a finite loss.
  std::vector<std::vector<T>> last_good;
  last_good.reserve(params.size());
  for (auto& p : params) last_good.push_back(p.value());

  TrainLog log;
  const bool sparse = model.front == FrontEnd::kSparse;
  std::vector<int> order(static_cast<std::size_t>(used));

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    for (int i = 0; i < used; ++i) order[i] = i;
    Rng shuffle = Rng::stream(
        {opts.seed, static_cast<std::uint64_t>(StreamTag::kShuffle),
         static_cast<std::uint64_t>(epoch)});
    for (int i = used - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle.next_below(i + 1));
      std::swap(order[i], order[j]);
    }

    double epoch_loss = 0.0, epoch_lr = 0.0;
    int epoch_hits = 0;
    for (int start = 0; start < used; start += opts.batch) {
      const int bsz = std::min(opts.batch, used - start);
      const int workers =
          std::max(1, std::min(max_threads(), bsz));
      std::vector<detail::SlicePass<T>> passes(workers);
      parallel_for(workers, [&](int w) {
        const std::size_t lo = start + static_cast<std::size_t>(bsz) * w / workers;
        const std::size_t hi =
            start + static_cast<std::size_t>(bsz) * (w + 1) / workers;
        passes[w] = detail::run_slice(model, opts.mode, data, order, lo, hi,
                                      epoch, opts);
      });

      double batch_loss = 0.0;
      std::uint64_t mask_hash = 0;
      for (const auto& pass : passes) {  // fixed worker order
        batch_loss += pass.loss_sum;
        epoch_hits += pass.hits;
        if (sparse) mask_hash ^= pass.mask_hash;
      }
      batch_loss /= bsz;
      if (sparse) log.mask_hashes.push_back(mask_hash);

      if (!std::isfinite(batch_loss)) {
        for (std::size_t i = 0; i < params.size(); ++i)
          params[i].value() = last_good[i];
        if (!opts.divergence_checkpoint.empty())
          save_checkpoint_file(checkpoint_from_model(model, opts.config_json),
                               opts.divergence_checkpoint);
        throw DivergenceError(
            "non-finite loss in epoch " + std::to_string(epoch) +
            "; parameters rolled back to the last finite state");
      }
      epoch_loss += batch_loss * bsz;
      for (std::size_t i = 0; i < params.size(); ++i)
        last_good[i] = params[i].value();

      // Reduce worker gradients (weight = slice/batch) in worker order.
      for (std::size_t i = 0; i < params.size(); ++i) {
        std::vector<T>& g = params[i].grad();
        for (int w = 0; w < workers; ++w) {
          if (passes[w].count == 0) continue;
          const T scale = static_cast<T>(passes[w].count) / static_cast<T>(bsz);
          const std::vector<T>& wg = passes[w].grads[i];
          for (std::size_t j = 0; j < g.size(); ++j) g[j] += scale * wg[j];
        }
      }
      epoch_lr = cyclic_lr(sched, log.steps);
      optimizer.step(params, epoch_lr);
      ++log.steps;
    }

    TrainCsvRow row;
    row.epoch = epoch;
    row.split = "train";
    row.loss = epoch_loss / used;
    row.accuracy = opts.mode == TrainMode::kUnsupervisedDecoder
                       ? 0.0
                       : static_cast<double>(epoch_hits) / used;
    row.lr = epoch_lr;
    log.rows.push_back(row);
  }
  return log;
}

}  // namespace spc
