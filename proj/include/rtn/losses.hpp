#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rtn/nn.hpp"
#include "rtn/ops.hpp"
#include "rtn/rng.hpp"
#include "rtn/tape.hpp"
#include "rtn/tensor.hpp"

namespace rtn::losses {

using ad::Tape;
using ad::Var;

struct LossWeights {
  double lambda_1 = 1.0;
  double lambda_p = 1.0;
  double lambda_g = 0.01;
};

// (1/T) * sum_t ||pred_t - target_t||_1, where the frame norm sums absolute
// differences over every pixel and channel.
template <class T>
Var<T> l1_loss(Tape<T>& t, const std::vector<Var<T>>& pred, const std::vector<Var<T>>& target) {
  if (pred.empty() || pred.size() != target.size())
    throw std::invalid_argument("l1_loss: mismatched frame counts");
  Var<T> acc = nullptr;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!pred[i]->val.same_shape(target[i]->val))
      throw std::invalid_argument("l1_loss: frame shape mismatch");
    Var<T> s = ad::sum_all(t, ad::abs_value(t, ad::sub(t, pred[i], target[i])));
    acc = acc ? ad::add(t, acc, s) : s;
  }
  return ad::scale(t, acc, T(1.0 / double(pred.size())));
}

// Layered feature maps for the perceptual distance. Implementations must be
// deterministic and frozen: nothing here may receive parameter updates.
template <class T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Var<T>> layers(Tape<T>& t, Var<T> frame) const = 0;
  virtual std::vector<double> layer_weights() const = 0;
};

// Default extractor: a fixed, seed-initialized pyramid of strided convs.
// Random deep features are a serviceable perceptual proxy when no pretrained
// backbone is available; weights live outside any ParamStore so they can
// never be trained.
template <class T>
class ConvPyramidFeatures : public FeatureExtractor<T> {
 public:
  explicit ConvPyramidFeatures(uint64_t seed = 0x70657263ull) {
    Rng rng(seed);
    std::vector<int64_t> chans = {3, 16, 32, 64, 128, 256};
    for (size_t i = 0; i + 1 < chans.size(); ++i) {
      ws_.push_back(nn::init::he_conv<T>(rng, chans[i + 1], chans[i], 3, 3));
      bs_.push_back(Tensor<T>({chans[i + 1]}));
    }
  }

  std::vector<Var<T>> layers(Tape<T>& t, Var<T> frame) const override {
    std::vector<Var<T>> out;
    Var<T> h = frame;
    for (size_t i = 0; i < ws_.size(); ++i) {
      Var<T> w = t.leaf(ws_[i], false);
      Var<T> b = t.leaf(bs_[i], false);
      h = ad::leaky_relu(t, ad::conv2d(t, h, w, b, 2, 1), T(0.2));
      out.push_back(h);
    }
    return out;
  }

  std::vector<double> layer_weights() const override {
    return std::vector<double>(ws_.size(), 1.0);
  }

 private:
  std::vector<Tensor<T>> ws_, bs_;
};

// (1/T) * sum_t sum_p w_p * mean|phi_p(pred_t) - phi_p(target_t)|
template <class T>
Var<T> perceptual_loss(Tape<T>& t, const FeatureExtractor<T>& fx,
                       const std::vector<Var<T>>& pred, const std::vector<Var<T>>& target) {
  if (pred.empty() || pred.size() != target.size())
    throw std::invalid_argument("perceptual_loss: mismatched frame counts");
  std::vector<double> w = fx.layer_weights();
  Var<T> acc = nullptr;
  for (size_t i = 0; i < pred.size(); ++i) {
    std::vector<Var<T>> fp = fx.layers(t, pred[i]);
    std::vector<Var<T>> ft = fx.layers(t, target[i]);
    if (fp.size() != w.size()) throw std::logic_error("perceptual_loss: layer/weight mismatch");
    for (size_t p = 0; p < fp.size(); ++p) {
      Var<T> d = ad::mean_all(t, ad::abs_value(t, ad::sub(t, fp[p], ft[p])));
      d = ad::scale(t, d, T(w[p]));
      acc = acc ? ad::add(t, acc, d) : d;
    }
  }
  return ad::scale(t, acc, T(1.0 / double(pred.size())));
}

// Spatio-temporal patch critic: four 3-D convs with (3,4,4) kernels; spatial
// extent halves at every layer, temporal extent halves once in the middle.
template <class T>
struct Discriminator {
  nn::Conv3d<T> l1, l2, l3, l4;

  static Discriminator create(nn::ParamStore<T>& ps, const std::string& name, Rng& rng) {
    Discriminator d;
    d.l1 = nn::Conv3d<T>::create(ps, name + ".l1", 3, 32, 3, 4, 4, 1, 2, 2, 1, 1, 1, rng);
    d.l2 = nn::Conv3d<T>::create(ps, name + ".l2", 32, 64, 3, 4, 4, 2, 2, 2, 1, 1, 1, rng);
    d.l3 = nn::Conv3d<T>::create(ps, name + ".l3", 64, 128, 3, 4, 4, 1, 2, 2, 1, 1, 1, rng);
    d.l4 = nn::Conv3d<T>::create(ps, name + ".l4", 128, 1, 3, 4, 4, 1, 2, 2, 1, 1, 1, rng);
    return d;
  }

  // clip: {3, T, H, W} with T >= 4 so every temporal kernel fits
  Var<T> score_map(Tape<T>& t, Var<T> clip) const {
    if (clip->val.ndim() != 4 || clip->val.dim(0) != 3)
      throw std::invalid_argument("discriminator: want {3,T,H,W} clip");
    if (clip->val.dim(1) < 4) throw std::invalid_argument("discriminator: clip too short");
    Var<T> h = ad::leaky_relu(t, l1(t, clip), T(0.2));
    h = ad::leaky_relu(t, l2(t, h), T(0.2));
    h = ad::leaky_relu(t, l3(t, h), T(0.2));
    return l4(t, h);
  }

  Var<T> operator()(Tape<T>& t, Var<T> clip) const {
    return ad::mean_all(t, score_map(t, clip));
  }
};

// L_D = ReLU(1 - D(real)) + ReLU(1 + D(fake)); scores are scalar mean scores
template <class T>
Var<T> d_hinge_loss(Tape<T>& t, Var<T> real_score, Var<T> fake_score) {
  Var<T> a = ad::relu(t, ad::affine(t, real_score, T(-1), T(1)));
  Var<T> b = ad::relu(t, ad::affine(t, fake_score, T(1), T(1)));
  return ad::add(t, a, b);
}

// L_G = -D(fake)
template <class T>
Var<T> g_adv_loss(Tape<T>& t, Var<T> fake_score) {
  return ad::scale(t, fake_score, T(-1));
}

// lambda_1 * L1 + lambda_p * L_perc + lambda_G * L_G; pass null for absent terms
template <class T>
Var<T> combine_losses(Tape<T>& t, Var<T> l1, Var<T> perc, Var<T> g_adv, const LossWeights& w) {
  Var<T> total = nullptr;
  auto push = [&](Var<T> part, double lam) {
    if (!part || lam == 0.0) return;
    Var<T> s = ad::scale(t, part, T(lam));
    total = total ? ad::add(t, total, s) : s;
  };
  push(l1, w.lambda_1);
  push(perc, w.lambda_p);
  push(g_adv, w.lambda_g);
  if (!total) total = t.leaf(Tensor<T>({1}), false);
  return total;
}

}  // namespace rtn::losses
