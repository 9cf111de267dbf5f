#pragma once

// Trainable networks behind the sparse front end, and the full defense model.
//
// DecoderNet: three transposed-conv layers, each followed by relu, with a
// final clip to [0,1] — maps a code volume (B, L, m, m) back to image space
// (B, 3, N, N).
//
// ClassifierNet: residual CNN — stride-2 stem into three stages (one
// identity-skip residual block each) joined by stride-2 downsample convs,
// global average pooling, and a linear head.  The documented default widths
// 24/48/96 put it at 271,690 parameters.
//
// DefenseModel bundles an optional sparse front end (dictionary + encoder +
// decoder) with a classifier.  Identity-front models (natural or
// adversarially trained baselines) classify the input directly.
//
// ensemble_predict averages softmax outputs over E dropout realizations,
// realization e drawing its masks from stream (seed, dropout tag, image id,
// e).  When dropout is inactive every realization is identical, so the
// single realization is computed once and the result is E-independent
// bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "spc/dictionary.hpp"
#include "spc/encoder.hpp"
#include "spc/rng.hpp"
#include "spc/tensor.hpp"

namespace spc {

template <class T>
struct Conv2d {
  Tensor<T> kernel;  // (Co, Ci, kh, kw)
  Tensor<T> bias;    // (Co)
  int stride = 1, pad = 0;

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return tape.add(tape.conv2d(x, kernel, stride, pad), bias);
  }
};

template <class T>
struct ConvT2d {
  Tensor<T> kernel;  // (Cin, Cout, kh, kw)
  Tensor<T> bias;    // (Cout)
  int stride = 1, pad = 0;

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return tape.add(tape.conv_transpose2d(x, kernel, stride, pad), bias);
  }
};

// ---------------------------------------------------------------------------

struct DecoderGeometry {
  struct Layer {
    int out_ch, k, stride, pad;
  };
  int in_ch = 500;
  std::vector<Layer> layers = {{256, 4, 2, 1}, {128, 3, 1, 0}, {3, 3, 1, 1}};
};

template <class T>
struct DecoderNet {
  std::vector<ConvT2d<T>> layers;

  // relu between layers; the final layer feeds the [0,1] clip directly
  // (a relu there would pin negative outputs exactly onto the clip
  // boundary, a non-differentiable point everywhere).
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& code) const {
    Tensor<T> h = code;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
      h = tape.relu(layers[i].forward(tape, h));
    h = layers.back().forward(tape, h);
    return tape.clip(h, T(0), T(1));
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& l : layers) {
      out.push_back(l.kernel);
      out.push_back(l.bias);
    }
    return out;
  }
};

struct ClassifierGeometry {
  int w0 = 24, w1 = 48, w2 = 96;
  int classes = 10;
};

template <class T>
struct ClassifierNet {
  Conv2d<T> stem;                    // 3 -> w0, stride 2
  Conv2d<T> block1a, block1b;        // w0 residual pair
  Conv2d<T> down1;                   // w0 -> w1, stride 2
  Conv2d<T> block2a, block2b;        // w1 residual pair
  Conv2d<T> down2;                   // w1 -> w2, stride 2
  Conv2d<T> block3a, block3b;        // w2 residual pair
  Tensor<T> fc_weight;               // (w2, classes)
  Tensor<T> fc_bias;                 // (classes)

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& image) const {
    Tensor<T> h = tape.relu(stem.forward(tape, image));
    h = residual(tape, h, block1a, block1b);
    h = tape.relu(down1.forward(tape, h));
    h = residual(tape, h, block2a, block2b);
    h = tape.relu(down2.forward(tape, h));
    h = residual(tape, h, block3a, block3b);
    Tensor<T> pooled = tape.mean(h, /*spatial=*/true);  // (B, w2)
    return tape.add(tape.matmul(pooled, fc_weight), fc_bias);
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (Conv2d<T>* c : {&stem, &block1a, &block1b, &down1, &block2a, &block2b,
                         &down2, &block3a, &block3b}) {
      out.push_back(c->kernel);
      out.push_back(c->bias);
    }
    out.push_back(fc_weight);
    out.push_back(fc_bias);
    return out;
  }

 private:
  static Tensor<T> residual(Tape<T>& tape, const Tensor<T>& x,
                            const Conv2d<T>& a, const Conv2d<T>& b) {
    Tensor<T> h = tape.relu(a.forward(tape, x));
    h = b.forward(tape, h);
    return tape.relu(tape.add(h, x));
  }
};

// ---------------------------------------------------------------------------
// Initialization: He-normal conv/linear weights (std = sqrt(2 / fan_in)),
// zero biases; the decoder's final bias starts at 0.5 so outputs begin in
// the interior of the [0,1] clip where gradients flow.  Each parameter draws
// from its own stream (seed, model-init tag, parameter index), so values
// depend only on the seed and the parameter's position, not on call order.

namespace detail {

template <class T>
inline void fill_gaussian(Tensor<T>& t, double std, std::uint64_t seed,
                          std::uint64_t param_idx) {
  Rng rng = Rng::stream({seed, static_cast<std::uint64_t>(StreamTag::kModelInit),
                         param_idx});
  for (T& v : t.value()) v = static_cast<T>(std * rng.next_gaussian());
}

}  // namespace detail

template <class T>
DecoderNet<T> make_decoder(const DecoderGeometry& geo, std::uint64_t seed) {
  if (geo.layers.empty()) throw ConfigError("decoder needs at least one layer");
  DecoderNet<T> net;
  int in_ch = geo.in_ch;
  std::uint64_t idx = 0;
  for (const auto& spec : geo.layers) {
    ConvT2d<T> layer;
    layer.kernel = Tensor<T>::zeros({in_ch, spec.out_ch, spec.k, spec.k});
    const double fan_in = static_cast<double>(in_ch) * spec.k * spec.k;
    detail::fill_gaussian(layer.kernel, std::sqrt(2.0 / fan_in), seed, idx++);
    layer.kernel.set_requires_grad(true);
    layer.bias = Tensor<T>::zeros({spec.out_ch});
    layer.bias.set_requires_grad(true);
    layer.stride = spec.stride;
    layer.pad = spec.pad;
    net.layers.push_back(layer);
    in_ch = spec.out_ch;
  }
  for (T& v : net.layers.back().bias.value()) v = T(0.5);
  return net;
}

template <class T>
ClassifierNet<T> make_classifier(const ClassifierGeometry& geo,
                                 std::uint64_t seed) {
  ClassifierNet<T> net;
  std::uint64_t idx = 1000;  // disjoint from decoder parameter indices
  auto conv = [&](int ci, int co, int k, int stride, int pad) {
    Conv2d<T> c;
    c.kernel = Tensor<T>::zeros({co, ci, k, k});
    detail::fill_gaussian(c.kernel, std::sqrt(2.0 / (ci * k * k)), seed, idx++);
    c.kernel.set_requires_grad(true);
    c.bias = Tensor<T>::zeros({co});
    c.bias.set_requires_grad(true);
    c.stride = stride;
    c.pad = pad;
    return c;
  };
  net.stem = conv(3, geo.w0, 3, 2, 1);
  net.block1a = conv(geo.w0, geo.w0, 3, 1, 1);
  net.block1b = conv(geo.w0, geo.w0, 3, 1, 1);
  net.down1 = conv(geo.w0, geo.w1, 3, 2, 1);
  net.block2a = conv(geo.w1, geo.w1, 3, 1, 1);
  net.block2b = conv(geo.w1, geo.w1, 3, 1, 1);
  net.down2 = conv(geo.w1, geo.w2, 3, 2, 1);
  net.block3a = conv(geo.w2, geo.w2, 3, 1, 1);
  net.block3b = conv(geo.w2, geo.w2, 3, 1, 1);
  net.fc_weight = Tensor<T>::zeros({geo.w2, geo.classes});
  detail::fill_gaussian(net.fc_weight, std::sqrt(2.0 / geo.w2), seed, idx++);
  net.fc_weight.set_requires_grad(true);
  net.fc_bias = Tensor<T>::zeros({geo.classes});
  net.fc_bias.set_requires_grad(true);
  return net;
}

template <class T>
std::size_t parameter_count(std::vector<Tensor<T>> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value().size();
  return n;
}

// ---------------------------------------------------------------------------
// Sparse codes as dense tensors.

template <class T>
Tensor<T> code_to_tensor(const SparseCode<T>& code) {
  Tensor<T> t = Tensor<T>::zeros({1, code.L, code.m, code.m});
  auto dense = code.to_dense();
  std::copy(dense.begin(), dense.end(), t.value().begin());
  return t;
}

template <class T>
Tensor<T> stack_codes(const std::vector<SparseCode<T>>& codes) {
  if (codes.empty()) throw ShapeError("cannot stack zero codes");
  const int L = codes[0].L, m = codes[0].m;
  const std::size_t plane = static_cast<std::size_t>(L) * m * m;
  Tensor<T> t = Tensor<T>::zeros({static_cast<int>(codes.size()), L, m, m});
  for (std::size_t b = 0; b < codes.size(); ++b) {
    if (codes[b].L != L || codes[b].m != m)
      throw ShapeError("codes in a batch must share extents");
    auto dense = codes[b].to_dense();
    std::copy(dense.begin(), dense.end(), t.value().begin() + b * plane);
  }
  return t;
}

// ---------------------------------------------------------------------------
// The full defense model.

enum class FrontEnd { kIdentity, kSparse };

inline std::string front_end_name(FrontEnd f) {
  return f == FrontEnd::kIdentity ? "identity" : "sparse";
}

template <class T>
struct DefenseModel {
  FrontEnd front = FrontEnd::kIdentity;
  Dictionary dict;           // kSparse only
  EncoderConfig enc;         // kSparse only
  DecoderNet<T> decoder;     // kSparse only
  ClassifierNet<T> classifier;
  int image_side = 32;

  bool dropout_active() const {
    return front == FrontEnd::kSparse && enc.enable_dropout && enc.p > 0.0;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    if (front == FrontEnd::kSparse)
      for (auto& p : decoder.parameters()) out.push_back(p);
    for (auto& p : classifier.parameters()) out.push_back(p);
    return out;
  }

  // Logits for one image under one dropout realization.
  Tensor<T> forward_single(Tape<T>& tape, const T* image,
                           const std::vector<std::uint64_t>& dropout_prefix) const {
    if (front == FrontEnd::kIdentity) {
      Tensor<T> x = Tensor<T>::from(
          {1, 3, image_side, image_side},
          std::vector<T>(image, image + 3 * image_side * image_side));
      return classifier.forward(tape, x);
    }
    SparseCode<T> code = encode(dict, image, image_side, enc, dropout_prefix);
    Tensor<T> ct = code_to_tensor(code);
    Tensor<T> decoded = decoder.forward(tape, ct);
    return classifier.forward(tape, decoded);
  }
};

// Mean softmax over E dropout realizations; realization e uses dropout
// stream (seed, dropout tag, image_id, e).  Inactive dropout short-circuits
// to one realization, making the output independent of E exactly.
template <class T>
std::vector<T> ensemble_predict(const DefenseModel<T>& model, const T* image,
                                int E, std::uint64_t seed,
                                std::uint64_t image_id) {
  if (E < 1) throw ConfigError("ensemble size must be >= 1");
  if (!model.dropout_active()) E = 1;
  const int C = model.classifier.fc_bias.shape()[0];
  std::vector<T> mean(C, T(0));
  for (int e = 0; e < E; ++e) {
    Tape<T> tape;
    Tensor<T> logits = model.forward_single(
        tape, image,
        {seed, static_cast<std::uint64_t>(StreamTag::kDropout), image_id,
         static_cast<std::uint64_t>(e)});
    Tensor<T> probs = tape.softmax(logits);
    for (int c = 0; c < C; ++c) mean[c] += probs.value()[c];
  }
  for (T& v : mean) v /= static_cast<T>(E);
  return mean;
}

}  // namespace spc
