#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rtn/ops.hpp"
#include "rtn/rng.hpp"
#include "rtn/tape.hpp"
#include "rtn/tensor.hpp"

namespace rtn::nn {

using ad::Tape;
using ad::Var;

// Named parameter leaves with stable addresses. Layers capture Var pointers at
// build time; checkpoint loads overwrite values in place so the pointers stay
// good for the life of the store.
template <class T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (map_.count(name)) throw std::invalid_argument("param exists: " + name);
    ad::Node<T>& n = nodes_.emplace_back();
    n.val = std::move(init);
    n.requires_grad = true;
    order_.push_back(name);
    map_[name] = &n;
    return &n;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  Var<T> node(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("no such param: " + name);
    return it->second;
  }

  const Tensor<T>& get(const std::string& name) const { return node(name)->val; }

  void set_value(const std::string& name, const Tensor<T>& v) {
    Var<T> n = node(name);
    if (!n->val.same_shape(v))
      throw std::invalid_argument("param shape mismatch for " + name + ": have " +
                                  n->val.shape_str() + ", got " + v.shape_str());
    n->val = v;
  }

  const std::vector<std::string>& names() const { return order_; }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor<T>();
  }

  void set_requires_grad(bool on) {
    for (auto& n : nodes_) n.requires_grad = on;
  }

  void set_requires_grad(const std::string& prefix, bool on) {
    for (size_t i = 0; i < order_.size(); ++i)
      if (order_[i].rfind(prefix, 0) == 0) nodes_[i].requires_grad = on;
  }

  int64_t total_size() const {
    int64_t s = 0;
    for (const auto& n : nodes_) s += n.val.size();
    return s;
  }

 private:
  std::deque<ad::Node<T>> nodes_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, ad::Node<T>*> map_;
};

namespace init {

template <class T>
Tensor<T> normal(Rng& rng, std::vector<int64_t> shape, double stddev) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.normal(0.0, stddev));
  return t;
}

template <class T>
Tensor<T> he_conv(Rng& rng, int64_t cout, int64_t cin, int64_t kh, int64_t kw) {
  double stddev = std::sqrt(2.0 / double(cin * kh * kw));
  return normal<T>(rng, {cout, cin, kh, kw}, stddev);
}

template <class T>
Tensor<T> zeros(std::vector<int64_t> shape) {
  return Tensor<T>(std::move(shape));
}

}  // namespace init

template <class T>
struct Conv2d {
  Var<T> w = nullptr;
  Var<T> b = nullptr;
  int64_t stride = 1, pad = 1;

  static Conv2d create(ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t cout,
                       int64_t k, int64_t stride, int64_t pad, Rng& rng, bool zero_init = false) {
    Conv2d c;
    c.stride = stride;
    c.pad = pad;
    c.w = ps.add(name + ".w", zero_init ? init::zeros<T>({cout, cin, k, k})
                                        : init::he_conv<T>(rng, cout, cin, k, k));
    c.b = ps.add(name + ".b", init::zeros<T>({cout}));
    return c;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const { return ad::conv2d(t, x, w, b, stride, pad); }
};

template <class T>
struct Conv3d {
  Var<T> w = nullptr;
  Var<T> b = nullptr;
  int64_t st = 1, sh = 1, sw = 1, pt = 1, ph = 1, pw = 1;

  static Conv3d create(ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t cout,
                       int64_t kt, int64_t kh, int64_t kw, int64_t st, int64_t sh, int64_t sw,
                       int64_t pt, int64_t ph, int64_t pw, Rng& rng) {
    Conv3d c;
    c.st = st;
    c.sh = sh;
    c.sw = sw;
    c.pt = pt;
    c.ph = ph;
    c.pw = pw;
    double stddev = std::sqrt(2.0 / double(cin * kt * kh * kw));
    c.w = ps.add(name + ".w", init::normal<T>(rng, {cout, cin, kt, kh, kw}, stddev));
    c.b = ps.add(name + ".b", init::zeros<T>({cout}));
    return c;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    return ad::conv3d(t, x, w, b, st, sh, sw, pt, ph, pw);
  }
};

template <class T>
struct Linear {
  Var<T> w = nullptr;
  Var<T> b = nullptr;

  static Linear create(ParamStore<T>& ps, const std::string& name, int64_t in, int64_t out,
                       Rng& rng, double stddev = 0.02) {
    Linear l;
    l.w = ps.add(name + ".w", init::normal<T>(rng, {in, out}, stddev));
    l.b = ps.add(name + ".b", init::zeros<T>({out}));
    return l;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const { return ad::linear(t, x, w, b); }
};

template <class T>
struct LayerNorm {
  Var<T> gamma = nullptr;
  Var<T> beta = nullptr;

  static LayerNorm create(ParamStore<T>& ps, const std::string& name, int64_t dim) {
    LayerNorm l;
    l.gamma = ps.add(name + ".g", Tensor<T>::full({dim}, T(1)));
    l.beta = ps.add(name + ".b", init::zeros<T>({dim}));
    return l;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const { return ad::layernorm(t, x, gamma, beta); }
};

// Relative-position lookup indices for an MxM window: entry (i, j) addresses
// the bias table row for the offset between tokens i and j.
inline std::vector<int64_t> relative_position_index(int64_t M) {
  std::vector<int64_t> idx;
  idx.reserve(size_t(M * M * M * M));
  for (int64_t yi = 0; yi < M; ++yi)
    for (int64_t xi = 0; xi < M; ++xi)
      for (int64_t yj = 0; yj < M; ++yj)
        for (int64_t xj = 0; xj < M; ++xj) {
          int64_t dy = yi - yj + M - 1, dx = xi - xj + M - 1;
          idx.push_back(dy * (2 * M - 1) + dx);
        }
  return idx;
}

// Additive attention mask for cyclically shifted windows: token pairs that
// came from different image regions get -100 so softmax suppresses them.
template <class T>
Tensor<T> shifted_window_mask(int64_t H, int64_t W, int64_t M, int64_t shift) {
  auto band = [&](int64_t i, int64_t n) {
    return i < n - M ? 0 : (i < n - shift ? 1 : 2);
  };
  std::vector<int> region(size_t(H * W));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) region[size_t(y * W + x)] = band(y, H) * 3 + band(x, W);

  int64_t nwy = H / M, nwx = W / M, N = M * M;
  Tensor<T> mask({nwy * nwx, N, N});
  for (int64_t wy = 0; wy < nwy; ++wy)
    for (int64_t wx = 0; wx < nwx; ++wx) {
      int64_t wi = wy * nwx + wx;
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < N; ++j) {
          int64_t yi = wy * M + i / M, xi = wx * M + i % M;
          int64_t yj = wy * M + j / M, xj = wx * M + j % M;
          bool same = region[size_t(yi * W + xi)] == region[size_t(yj * W + xj)];
          mask[(wi * N + i) * N + j] = same ? T(0) : T(-100);
        }
    }
  return mask;
}

// Multi-head self-attention over window token batches {nWin, M*M, dim} with a
// learned relative-position bias shared across windows.
template <class T>
struct WindowAttention {
  Linear<T> qkv, proj;
  Var<T> bias_table = nullptr;  // {(2M-1)^2, heads}
  int64_t dim = 0, heads = 0, head_dim = 0, M = 0;
  std::vector<int64_t> rel_idx;

  static WindowAttention create(ParamStore<T>& ps, const std::string& name, int64_t dim,
                                int64_t heads, int64_t M, Rng& rng) {
    if (dim % heads != 0) throw std::invalid_argument("attention dim not divisible by heads");
    WindowAttention a;
    a.dim = dim;
    a.heads = heads;
    a.head_dim = dim / heads;
    a.M = M;
    a.qkv = Linear<T>::create(ps, name + ".qkv", dim, 3 * dim, rng);
    a.proj = Linear<T>::create(ps, name + ".proj", dim, dim, rng);
    a.bias_table =
        ps.add(name + ".bias_table", init::normal<T>(rng, {(2 * M - 1) * (2 * M - 1), heads}, 0.02));
    a.rel_idx = relative_position_index(M);
    return a;
  }

  // x: {nWin, N, dim}; mask: optional {nWin, N, N}; probs_out receives the
  // softmax attention weights {nWin*heads, N, N} when requested.
  Var<T> operator()(Tape<T>& t, Var<T> x, const Tensor<T>* mask = nullptr,
                    Tensor<T>* probs_out = nullptr) const {
    int64_t N = x->val.dim(1);
    Var<T> fused = qkv(t, x);
    Var<T> q = ad::split_heads(t, ad::slice_last(t, fused, 0, dim), heads);
    Var<T> k = ad::split_heads(t, ad::slice_last(t, fused, dim, 2 * dim), heads);
    Var<T> v = ad::split_heads(t, ad::slice_last(t, fused, 2 * dim, 3 * dim), heads);
    q = ad::scale(t, q, T(1.0 / std::sqrt(double(head_dim))));
    Var<T> logits = ad::bmm_nt(t, q, k);
    Var<T> bias = ad::tokens_to_chw(t, ad::gather_rows(t, bias_table, rel_idx), N, N);
    logits = ad::add_rel_bias(t, logits, bias, heads);
    if (mask) logits = ad::add_window_mask(t, logits, *mask, heads);
    Var<T> probs = ad::softmax_last(t, logits);
    if (probs_out) *probs_out = probs->val;
    Var<T> out = ad::merge_heads(t, ad::bmm(t, probs, v), heads);
    return proj(t, out);
  }
};

// Pre-norm transformer block on a {C, H, W} map: cyclic shift, window
// attention, and a 2x-GELU feed-forward, all under residual connections.
template <class T>
struct SwinBlock {
  LayerNorm<T> ln1, ln2;
  WindowAttention<T> attn;
  Linear<T> fc1, fc2;
  int64_t M = 0, shift = 0;

  static SwinBlock create(ParamStore<T>& ps, const std::string& name, int64_t dim, int64_t heads,
                          int64_t M, int64_t shift, Rng& rng) {
    SwinBlock b;
    b.M = M;
    b.shift = shift;
    b.ln1 = LayerNorm<T>::create(ps, name + ".ln1", dim);
    b.attn = WindowAttention<T>::create(ps, name + ".attn", dim, heads, M, rng);
    b.ln2 = LayerNorm<T>::create(ps, name + ".ln2", dim);
    b.fc1 = Linear<T>::create(ps, name + ".fc1", dim, 2 * dim, rng);
    b.fc2 = Linear<T>::create(ps, name + ".fc2", 2 * dim, dim, rng);
    return b;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x, Tensor<T>* probs_out = nullptr) const {
    int64_t H = x->val.dim(1), W = x->val.dim(2);
    if (H % M != 0 || W % M != 0)
      throw std::invalid_argument("feature map not divisible by window size");
    Var<T> h = x;
    if (shift > 0) h = ad::roll2d(t, h, -shift, -shift);
    Var<T> tok = ad::window_partition(t, h, M);
    Tensor<T> mask;
    const Tensor<T>* mask_ptr = nullptr;
    if (shift > 0) {
      mask = shifted_window_mask<T>(H, W, M, shift);
      mask_ptr = &mask;
    }
    Var<T> a = attn(t, ln1(t, tok), mask_ptr, probs_out);
    tok = ad::add(t, tok, a);
    Var<T> f = fc2(t, ad::gelu(t, fc1(t, ln2(t, tok))));
    tok = ad::add(t, tok, f);
    Var<T> merged = ad::window_merge(t, tok, M, H, W);
    if (shift > 0) merged = ad::roll2d(t, merged, shift, shift);
    return merged;
  }
};

}  // namespace rtn::nn
