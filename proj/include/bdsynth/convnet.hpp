#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bdsynth/error.hpp"
#include "bdsynth/tensor.hpp"

namespace bdsynth {

/// Stack of 3x3 same-padding conv + ReLU blocks (optional 2x2 max pool after each),
/// global average pooling and a linear head.
struct ConvNetSpec {
  int in_channels = 3;
  int input_size = 32;
  std::vector<int> channels = {8, 16, 32};
  std::vector<bool> pool = {true, true, false};
  int num_classes = 5;

  bool operator==(const ConvNetSpec&) const = default;
};

/// Called during backprop with a conv layer's post-activation features; returns
/// an extra gradient to add at that layer (or an empty tensor for none).
template <class T>
using FeatureGradFn = std::function<BasicTensor<T>(int layer, const BasicTensor<T>& features)>;

template <class T>
class ConvNet {
 public:
  using Tensor = BasicTensor<T>;
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

  /// Per-sample intermediate values kept for the backward pass.
  struct Trace {
    std::vector<std::vector<T>> cols;  // im2col of each conv input
    std::vector<std::vector<T>> pre;   // pre-activation per conv
    std::vector<Tensor> act;           // post-ReLU, post-mask features per conv
    std::vector<std::vector<int>> argmax;
    std::vector<T> pooled;  // global average pool output
    std::vector<T> logits;
  };

  /// What backward() should hand back besides parameter gradients.
  struct BackwardRequest {
    std::span<T> param_grad;  // accumulated into; empty to skip
    Tensor* input_grad = nullptr;
    int capture_layer = -1;
    Tensor* captured_grad = nullptr;  // d loss / d features of capture_layer
    FeatureGradFn<T> feature_grad;
  };

  ConvNet() = default;
  explicit ConvNet(ConvNetSpec spec) : spec_(std::move(spec)) {
    if (spec_.channels.empty()) throw ValidationError("convnet: at least one conv layer required");
    if (spec_.pool.size() != spec_.channels.size()) throw ValidationError("convnet: pool flags must match conv layers");
    if (spec_.num_classes < 2) throw ValidationError("convnet: num_classes must be >= 2");
    int in = spec_.in_channels, size = spec_.input_size;
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec_.channels.size(); ++l) {
      Layer L;
      L.in = in;
      L.out = spec_.channels[l];
      L.size = size;
      L.pool = spec_.pool[l];
      if (L.pool && size % 2) throw ValidationError("convnet: pooling needs even feature size at layer " + std::to_string(l + 1));
      L.w_off = off;
      off += static_cast<std::size_t>(L.out) * L.in * 9;
      L.b_off = off;
      off += L.out;
      layers_.push_back(L);
      masks_.emplace_back(L.out, T(1));
      in = L.out;
      size = L.pool ? size / 2 : size;
    }
    fc_w_ = off;
    off += static_cast<std::size_t>(spec_.num_classes) * in;
    fc_b_ = off;
    off += spec_.num_classes;
    params_.assign(off, T(0));
  }

  const ConvNetSpec& spec() const noexcept { return spec_; }
  std::size_t num_params() const noexcept { return params_.size(); }
  std::span<T> params() noexcept { return params_; }
  std::span<const T> params() const noexcept { return params_; }
  int num_layers() const noexcept { return static_cast<int>(layers_.size()); }
  int layer_channels(int l) const { return layers_.at(l).out; }
  int layer_size(int l) const { return layers_.at(l).size; }

  /// He-normal conv/linear weights, zero biases.
  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::fill(params_.begin(), params_.end(), T(0));
    for (const auto& L : layers_) {
      std::normal_distribution<double> d(0.0, std::sqrt(2.0 / (L.in * 9.0)));
      for (std::size_t i = 0; i < static_cast<std::size_t>(L.out) * L.in * 9; ++i) params_[L.w_off + i] = static_cast<T>(d(rng));
    }
    const int last = layers_.back().out;
    std::normal_distribution<double> d(0.0, std::sqrt(1.0 / last));
    for (std::size_t i = 0; i < static_cast<std::size_t>(spec_.num_classes) * last; ++i) params_[fc_w_ + i] = static_cast<T>(d(rng));
  }

  /// Per-channel multiplier on a conv layer's output (1 keeps, 0 prunes).
  std::span<const T> channel_mask(int l) const { return masks_.at(l); }
  void set_channel_mask(int l, std::vector<T> mask) {
    if (mask.size() != masks_.at(l).size()) throw ValidationError("convnet: channel mask size mismatch");
    masks_[l] = std::move(mask);
  }

  std::vector<T> forward(const Tensor& x, Trace* trace = nullptr) const {
    check_input(x);
    Trace local;
    Trace& t = trace ? *trace : local;
    const auto L = layers_.size();
    t.cols.resize(L);
    t.pre.resize(L);
    t.act.resize(L);
    t.argmax.resize(L);
    const Tensor* cur = &x;
    Tensor pooled_buf;
    for (std::size_t l = 0; l < L; ++l) {
      const auto& ly = layers_[l];
      const int P = ly.size * ly.size;
      im2col(*cur, t.cols[l]);
      t.pre[l].assign(static_cast<std::size_t>(ly.out) * P, T(0));
      ConstMatrixMap W(params_.data() + ly.w_off, ly.out, ly.in * 9);
      ConstMatrixMap col(t.cols[l].data(), ly.in * 9, P);
      MatrixMap Z(t.pre[l].data(), ly.out, P);
      Z.noalias() = W * col;
      ConstVectorMap b(params_.data() + ly.b_off, ly.out);
      Z.colwise() += b;
      Tensor& A = t.act[l];
      A = Tensor(ly.out, ly.size, ly.size);
      for (int o = 0; o < ly.out; ++o) {
        const T m = masks_[l][o];
        for (int p = 0; p < P; ++p) {
          const T z = t.pre[l][static_cast<std::size_t>(o) * P + p];
          A.data[static_cast<std::size_t>(o) * P + p] = z > T(0) ? z * m : T(0);
        }
      }
      if (ly.pool) {
        max_pool(A, pooled_buf, t.argmax[l]);
        cur = &pooled_buf;
      } else {
        t.argmax[l].clear();
        cur = &A;
      }
    }
    const Tensor& last = *cur;
    const int C = last.channels;
    const auto plane = static_cast<T>(last.plane());
    t.pooled.assign(C, T(0));
    for (int c = 0; c < C; ++c) {
      T s = 0;
      for (T v : last.channel(c)) s += v;
      t.pooled[c] = s / plane;
    }
    t.logits.assign(spec_.num_classes, T(0));
    ConstMatrixMap Wfc(params_.data() + fc_w_, spec_.num_classes, C);
    ConstVectorMap g(t.pooled.data(), C);
    ConstVectorMap bfc(params_.data() + fc_b_, spec_.num_classes);
    VectorMap out(t.logits.data(), spec_.num_classes);
    out.noalias() = Wfc * g + bfc;
    return t.logits;
  }

  /// Features of conv layer `l` (post-ReLU, post-mask) for input x.
  Tensor features(int l, const Tensor& x) const {
    Trace t;
    forward(x, &t);
    return t.act.at(l);
  }

  /// Backpropagates d loss / d logits through a trace produced by forward().
  void backward(const Trace& t, std::span<const T> dlogits, const BackwardRequest& req) const {
    const int K = spec_.num_classes;
    const auto L = layers_.size();
    const int C = layers_.back().out;
    const bool want_params = !req.param_grad.empty();
    if (want_params && req.param_grad.size() != params_.size()) throw ValidationError("convnet: gradient buffer size mismatch");

    ConstVectorMap dl(dlogits.data(), K);
    ConstVectorMap g(t.pooled.data(), C);
    if (want_params) {
      MatrixMap dWfc(req.param_grad.data() + fc_w_, K, C);
      dWfc.noalias() += dl * g.transpose();
      VectorMap dbfc(req.param_grad.data() + fc_b_, K);
      dbfc += dl;
    }
    ConstMatrixMap Wfc(params_.data() + fc_w_, K, C);
    Eigen::Matrix<T, Eigen::Dynamic, 1> dg = Wfc.transpose() * dl;

    // Gradient w.r.t. the output of the last block (pooled or not).
    const auto& lastL = layers_.back();
    const int out_size = lastL.pool ? lastL.size / 2 : lastL.size;
    Tensor dout(C, out_size, out_size);
    const T inv_plane = T(1) / static_cast<T>(dout.plane());
    for (int c = 0; c < C; ++c)
      for (auto& v : dout.channel(c)) v = dg[c] * inv_plane;

    for (std::size_t li = L; li-- > 0;) {
      const auto& ly = layers_[li];
      const int P = ly.size * ly.size;
      Tensor dA(ly.out, ly.size, ly.size);
      if (ly.pool) {
        const auto& am = t.argmax[li];
        for (std::size_t i = 0; i < dout.data.size(); ++i) dA.data[am[i]] += dout.data[i];
      } else {
        dA = std::move(dout);
      }
      if (req.feature_grad) {
        Tensor extra = req.feature_grad(static_cast<int>(li), t.act[li]);
        if (!extra.data.empty()) {
          if (!extra.same_shape(dA)) throw ValidationError("convnet: feature gradient shape mismatch");
          for (std::size_t i = 0; i < dA.data.size(); ++i) dA.data[i] += extra.data[i];
        }
      }
      if (req.captured_grad && req.capture_layer == static_cast<int>(li)) *req.captured_grad = dA;

      std::vector<T> dZ(static_cast<std::size_t>(ly.out) * P);
      for (int o = 0; o < ly.out; ++o) {
        const T m = masks_[li][o];
        for (int p = 0; p < P; ++p) {
          const auto i = static_cast<std::size_t>(o) * P + p;
          dZ[i] = t.pre[li][i] > T(0) ? dA.data[i] * m : T(0);
        }
      }
      ConstMatrixMap dZm(dZ.data(), ly.out, P);
      ConstMatrixMap col(t.cols[li].data(), ly.in * 9, P);
      if (want_params) {
        MatrixMap dW(req.param_grad.data() + ly.w_off, ly.out, ly.in * 9);
        dW.noalias() += dZm * col.transpose();
        VectorMap db(req.param_grad.data() + ly.b_off, ly.out);
        db += dZm.rowwise().sum();
      }
      const bool need_dx = li > 0 || req.input_grad != nullptr;
      if (!need_dx) break;
      ConstMatrixMap W(params_.data() + ly.w_off, ly.out, ly.in * 9);
      std::vector<T> dcol(static_cast<std::size_t>(ly.in) * 9 * P);
      MatrixMap dcolm(dcol.data(), ly.in * 9, P);
      dcolm.noalias() = W.transpose() * dZm;
      Tensor dx(ly.in, ly.size, ly.size);
      col2im(dcol, dx);
      if (li == 0) {
        if (req.input_grad) *req.input_grad = std::move(dx);
      } else {
        dout = std::move(dx);
      }
    }
  }

 private:
  struct Layer {
    int in = 0, out = 0, size = 0;
    bool pool = false;
    std::size_t w_off = 0, b_off = 0;
  };

  void check_input(const Tensor& x) const {
    if (x.channels != spec_.in_channels || x.height != spec_.input_size || x.width != spec_.input_size)
      throw ValidationError("convnet: input shape " + std::to_string(x.channels) + "x" + std::to_string(x.height) + "x" +
                            std::to_string(x.width) + " does not match " + std::to_string(spec_.in_channels) + "x" +
                            std::to_string(spec_.input_size) + "x" + std::to_string(spec_.input_size));
  }

  static void im2col(const Tensor& x, std::vector<T>& col) {
    const int C = x.channels, H = x.height, W = x.width;
    col.assign(static_cast<std::size_t>(C) * 9 * H * W, T(0));
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T* row = col.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * H * W;
          for (int y = 0; y < H; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= H) continue;
            const T* src = x.data.data() + (static_cast<std::size_t>(c) * H + sy) * W;
            T* dst = row + static_cast<std::size_t>(y) * W;
            const int x_lo = std::max(0, 1 - kx), x_hi = std::min(W, W + 1 - kx);
            for (int xx = x_lo; xx < x_hi; ++xx) dst[xx] = src[xx + kx - 1];
          }
        }
  }

  static void col2im(const std::vector<T>& col, Tensor& dx) {
    const int C = dx.channels, H = dx.height, W = dx.width;
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T* row = col.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * H * W;
          for (int y = 0; y < H; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= H) continue;
            T* dst = dx.data.data() + (static_cast<std::size_t>(c) * H + sy) * W;
            const T* src = row + static_cast<std::size_t>(y) * W;
            const int x_lo = std::max(0, 1 - kx), x_hi = std::min(W, W + 1 - kx);
            for (int xx = x_lo; xx < x_hi; ++xx) dst[xx + kx - 1] += src[xx];
          }
        }
  }

  // 2x2 stride-2 max pool; argmax holds flat indices into `a`. Ties keep the first element.
  static void max_pool(const Tensor& a, Tensor& out, std::vector<int>& argmax) {
    const int C = a.channels, H = a.height / 2, W = a.width / 2;
    out = Tensor(C, H, W);
    argmax.assign(out.data.size(), 0);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          int best = (c * a.height + 2 * y) * a.width + 2 * x;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              int i = (c * a.height + 2 * y + dy) * a.width + 2 * x + dx;
              if (a.data[i] > a.data[best]) best = i;
            }
          const auto o = (static_cast<std::size_t>(c) * H + y) * W + x;
          out.data[o] = a.data[best];
          argmax[o] = best;
        }
  }

  ConvNetSpec spec_;
  std::vector<Layer> layers_;
  std::vector<std::vector<T>> masks_;
  std::vector<T> params_;
  std::size_t fc_w_ = 0, fc_b_ = 0;
};

}  // namespace bdsynth
