#include "srnas/layers.hpp"

#include <cmath>
#include <cstring>

namespace srnas {

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

void require_rank(const Tensor& x, int rank, const std::string& who) {
  if (x.rank() != rank)
    throw ShapeError(who + ": expected rank-" + std::to_string(rank) + " input, got " +
                     shape_str(x.shape));
}

void require_channels(const Tensor& x, int c, const std::string& who) {
  if (x.dim(1) != c)
    throw ShapeError(who + ": expected " + std::to_string(c) + " channels, got " +
                     shape_str(x.shape));
}

Scalar stable_sigmoid(Scalar z) {
  if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int cin, int cout, int k, int stride, int groups)
    : Layer(std::move(name)),
      cin_(cin),
      cout_(cout),
      k_(k),
      stride_(stride),
      groups_(groups),
      pad_((k - 1) / 2) {
  if (cin % groups != 0 || cout % groups != 0)
    throw ShapeError(name_ + ": channels not divisible by groups");
  w = Param({cout, cin / groups, k, k});
  b = Param({cout});
}

void Conv2d::init_weights(Rng& rng) {
  const double fan_in = static_cast<double>(k_) * k_ * (cin_ / groups_);
  const double std = std::sqrt(2.0 / fan_in);
  for (std::int64_t i = 0; i < w.numel(); ++i)
    w.value[i] = static_cast<Scalar>(rng.normal(0.0, std));
  b.value.setZero();
}

void Conv2d::enable_spectral_norm(Rng& rng) {
  sn_ = true;
  const int rows = cout_;
  const int cols = static_cast<int>(w.numel() / cout_);
  u_ = Param({rows}, false);
  v_ = Param({cols}, false);
  for (int i = 0; i < rows; ++i) u_.value[i] = static_cast<Scalar>(rng.normal());
  for (int i = 0; i < cols; ++i) v_.value[i] = static_cast<Scalar>(rng.normal());
  u_.value /= u_.value.matrix().norm() + Scalar(1e-12);
  v_.value /= v_.value.matrix().norm() + Scalar(1e-12);
  power_iteration_step();
}

void Conv2d::power_iteration_step() {
  const int rows = cout_;
  const int cols = static_cast<int>(w.numel() / cout_);
  CMapRow M(w.value.data(), rows, cols);
  MapVec u(u_.value.data(), rows);
  MapVec v(v_.value.data(), cols);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> tv = M.transpose() * u;
  v = tv / (tv.norm() + Scalar(1e-12));
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> tu = M * v;
  u = tu / (tu.norm() + Scalar(1e-12));
}

double Conv2d::sigma_from_uv() const {
  const int rows = cout_;
  const int cols = static_cast<int>(w.numel() / cout_);
  CMapRow M(w.value.data(), rows, cols);
  CMapVec u(u_.value.data(), rows);
  CMapVec v(v_.value.data(), cols);
  return static_cast<double>(u.dot(M * v));
}

const Scalar* Conv2d::effective_weight(Mode mode) {
  if (!sn_) return w.value.data();
  if (mode == Mode::Train && sn_update_) power_iteration_step();
  sigma_ = sigma_from_uv();
  if (sigma_ < 1e-12) sigma_ = 1e-12;
  w_eff_ = w.value / static_cast<Scalar>(sigma_);
  return w_eff_.data();
}

namespace {

// Gathers the receptive fields of one (batch, group) slice into a
// (cg*k*k) x (ho*wo) row-major matrix. Out-of-range taps read zero.
void im2col(const Tensor& x, int n, int g, int cg, int k, int stride, int pad,
            int ho, int wo, RowMat& col) {
  const int H = x.dim(2), W = x.dim(3);
  col.resize(static_cast<Eigen::Index>(cg) * k * k, static_cast<Eigen::Index>(ho) * wo);
  Scalar* dst = col.data();
  for (int ci = 0; ci < cg; ++ci) {
    const int c = g * cg + ci;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) {
            std::memset(dst, 0, sizeof(Scalar) * static_cast<std::size_t>(wo));
            dst += wo;
            continue;
          }
          const Scalar* src = x.v.data() + x.idx(n, c, ih, 0);
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride - pad + kw;
            *dst++ = (iw >= 0 && iw < W) ? src[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

// Scatter-adds a column matrix back onto the input gradient.
void col2im_add(Tensor& dx, int n, int g, int cg, int k, int stride, int pad,
                int ho, int wo, const RowMat& col) {
  const int H = dx.dim(2), W = dx.dim(3);
  const Scalar* src = col.data();
  for (int ci = 0; ci < cg; ++ci) {
    const int c = g * cg + ci;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) {
            src += wo;
            continue;
          }
          Scalar* d = dx.v.data() + dx.idx(n, c, ih, 0);
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < W) d[iw] += src[ow];
          }
          src += wo;
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, name_);
  require_channels(x, cin_, name_);
  x_ = x;
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int ho = out_h(H), wo = out_w(W);
  if (ho <= 0 || wo <= 0) throw ShapeError(name_ + ": empty output");
  Tensor y({N, cout_, ho, wo});
  const Scalar* wptr = effective_weight(mode);
  const int cg = cin_ / groups_, cog = cout_ / groups_;
  const int krows = cg * k_ * k_;
  RowMat col;
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups_; ++g) {
      im2col(x, n, g, cg, k_, stride_, pad_, ho, wo, col);
      CMapRow Wm(wptr + static_cast<std::int64_t>(g) * cog * krows, cog, krows);
      MapRow Ym(y.v.data() + y.idx(n, g * cog, 0, 0), cog, static_cast<Eigen::Index>(ho) * wo);
      Ym.noalias() = Wm * col;
    }
    for (int c = 0; c < cout_; ++c) {
      MapVec plane(y.v.data() + y.idx(n, c, 0, 0), static_cast<Eigen::Index>(ho) * wo);
      plane.array() += b.value[c];
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const int N = x_.dim(0), H = x_.dim(2), W = x_.dim(3);
  const int ho = out_h(H), wo = out_w(W);
  Tensor dx(x_.shape);
  const int cg = cin_ / groups_, cog = cout_ / groups_;
  const int krows = cg * k_ * k_;
  ArrayX geff = ArrayX::Zero(w.numel());
  const Scalar* wptr = sn_ ? w_eff_.data() : w.value.data();
  RowMat col, dcol;
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups_; ++g) {
      im2col(x_, n, g, cg, k_, stride_, pad_, ho, wo, col);
      CMapRow dYm(dy.v.data() + dy.idx(n, g * cog, 0, 0), cog,
                  static_cast<Eigen::Index>(ho) * wo);
      MapRow Gm(geff.data() + static_cast<std::int64_t>(g) * cog * krows, cog, krows);
      Gm.noalias() += dYm * col.transpose();
      CMapRow Wm(wptr + static_cast<std::int64_t>(g) * cog * krows, cog, krows);
      dcol.noalias() = Wm.transpose() * dYm;
      col2im_add(dx, n, g, cg, k_, stride_, pad_, ho, wo, dcol);
    }
    for (int c = 0; c < cout_; ++c) {
      CMapVec plane(dy.v.data() + dy.idx(n, c, 0, 0), static_cast<Eigen::Index>(ho) * wo);
      b.grad[c] += plane.sum();
    }
  }
  if (sn_) {
    // W_sn = W / sigma with sigma = u^T W v:
    // dW = (G - <G, W_sn> u v^T) / sigma.
    const int rows = cout_;
    const int cols = static_cast<int>(w.numel() / cout_);
    const double dot = static_cast<double>((geff * w_eff_).sum());
    CMapVec u(u_.value.data(), rows);
    CMapVec v(v_.value.data(), cols);
    MapRow Wgrad(w.grad.data(), rows, cols);
    CMapRow Gm(geff.data(), rows, cols);
    Wgrad.noalias() +=
        (Gm - static_cast<Scalar>(dot) * (u * v.transpose())) / static_cast<Scalar>(sigma_);
  } else {
    w.grad += geff;
  }
  return dx;
}

void Conv2d::collect_params(std::vector<NamedParam>& out) {
  out.push_back({name_ + ".w", &w});
  out.push_back({name_ + ".b", &b});
  if (sn_) {
    out.push_back({name_ + ".sn_u", &u_});
    out.push_back({name_ + ".sn_v", &v_});
  }
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, int in, int out)
    : Layer(std::move(name)), in_(in), out_(out) {
  w = Param({out, in});
  b = Param({out});
}

void Linear::init_weights(Rng& rng) {
  const double std = std::sqrt(2.0 / in_);
  for (std::int64_t i = 0; i < w.numel(); ++i)
    w.value[i] = static_cast<Scalar>(rng.normal(0.0, std));
  b.value.setZero();
}

void Linear::enable_spectral_norm(Rng& rng) {
  sn_ = true;
  u_ = Param({out_}, false);
  v_ = Param({in_}, false);
  for (int i = 0; i < out_; ++i) u_.value[i] = static_cast<Scalar>(rng.normal());
  for (int i = 0; i < in_; ++i) v_.value[i] = static_cast<Scalar>(rng.normal());
  u_.value /= u_.value.matrix().norm() + Scalar(1e-12);
  v_.value /= v_.value.matrix().norm() + Scalar(1e-12);
  power_iteration_step();
}

void Linear::power_iteration_step() {
  CMapRow M(w.value.data(), out_, in_);
  MapVec u(u_.value.data(), out_);
  MapVec v(v_.value.data(), in_);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> tv = M.transpose() * u;
  v = tv / (tv.norm() + Scalar(1e-12));
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> tu = M * v;
  u = tu / (tu.norm() + Scalar(1e-12));
}

double Linear::sigma_from_uv() const {
  CMapRow M(w.value.data(), out_, in_);
  CMapVec u(u_.value.data(), out_);
  CMapVec v(v_.value.data(), in_);
  return static_cast<double>(u.dot(M * v));
}

const Scalar* Linear::effective_weight(Mode mode) {
  if (!sn_) return w.value.data();
  if (mode == Mode::Train && sn_update_) power_iteration_step();
  sigma_ = sigma_from_uv();
  if (sigma_ < 1e-12) sigma_ = 1e-12;
  w_eff_ = w.value / static_cast<Scalar>(sigma_);
  return w_eff_.data();
}

Tensor Linear::forward(const Tensor& x, Mode mode) {
  require_rank(x, 2, name_);
  if (x.dim(1) != in_)
    throw ShapeError(name_ + ": expected " + std::to_string(in_) + " features, got " +
                     shape_str(x.shape));
  x_ = x;
  const int N = x.dim(0);
  Tensor y({N, out_});
  const Scalar* wptr = effective_weight(mode);
  CMapRow Xm(x.v.data(), N, in_);
  CMapRow Wm(wptr, out_, in_);
  MapRow Ym(y.v.data(), N, out_);
  Ym.noalias() = Xm * Wm.transpose();
  Ym.rowwise() += CMapVec(b.value.data(), out_).transpose();
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  const int N = x_.dim(0);
  Tensor dx(x_.shape);
  CMapRow dYm(dy.v.data(), N, out_);
  CMapRow Xm(x_.v.data(), N, in_);
  ArrayX geff = ArrayX::Zero(w.numel());
  MapRow Gm(geff.data(), out_, in_);
  Gm.noalias() = dYm.transpose() * Xm;
  MapVec(b.grad.data(), out_).noalias() += dYm.colwise().sum().transpose();
  const Scalar* wptr = sn_ ? w_eff_.data() : w.value.data();
  CMapRow Wm(wptr, out_, in_);
  MapRow dXm(dx.v.data(), N, in_);
  dXm.noalias() = dYm * Wm;
  if (sn_) {
    const double dot = static_cast<double>((geff * w_eff_).sum());
    CMapVec u(u_.value.data(), out_);
    CMapVec v(v_.value.data(), in_);
    MapRow Wgrad(w.grad.data(), out_, in_);
    Wgrad.noalias() +=
        (Gm - static_cast<Scalar>(dot) * (u * v.transpose())) / static_cast<Scalar>(sigma_);
  } else {
    w.grad += geff;
  }
  return dx;
}

void Linear::collect_params(std::vector<NamedParam>& out) {
  out.push_back({name_ + ".w", &w});
  out.push_back({name_ + ".b", &b});
  if (sn_) {
    out.push_back({name_ + ".sn_u", &u_});
    out.push_back({name_ + ".sn_v", &v_});
  }
}

// ---------------------------------------------------------------------------
// PReLU

PReLU::PReLU(std::string name, int channels)
    : Layer(std::move(name)), channels_(channels) {
  a = Param({channels});
  a.value.setConstant(Scalar(0.25));
}

Tensor PReLU::forward(const Tensor& x, Mode) {
  if (x.rank() != 2 && x.rank() != 4) throw ShapeError(name_ + ": rank 2 or 4 only");
  require_channels(x, channels_, name_);
  x_ = x;
  Tensor y(x.shape);
  const std::int64_t plane = x.rank() == 4 ? static_cast<std::int64_t>(x.dim(2)) * x.dim(3) : 1;
  const int N = x.dim(0);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < channels_; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * channels_ + c) * plane;
      const Scalar ac = a.value[c];
      for (std::int64_t i = 0; i < plane; ++i) {
        const Scalar xv = x.v[off + i];
        y.v[off + i] = xv > 0 ? xv : ac * xv;
      }
    }
  }
  return y;
}

Tensor PReLU::backward(const Tensor& dy) {
  Tensor dx(x_.shape);
  const std::int64_t plane =
      x_.rank() == 4 ? static_cast<std::int64_t>(x_.dim(2)) * x_.dim(3) : 1;
  const int N = x_.dim(0);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < channels_; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * channels_ + c) * plane;
      const Scalar ac = a.value[c];
      double da = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) {
        const Scalar xv = x_.v[off + i];
        const Scalar g = dy.v[off + i];
        if (xv > 0) {
          dx.v[off + i] = g;
        } else {
          dx.v[off + i] = ac * g;
          da += static_cast<double>(xv) * g;
        }
      }
      a.grad[c] += static_cast<Scalar>(da);
    }
  }
  return dx;
}

void PReLU::collect_params(std::vector<NamedParam>& out) {
  out.push_back({name_ + ".a", &a});
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(std::string name, int channels, double momentum, double eps)
    : Layer(std::move(name)), channels_(channels), momentum_(momentum), eps_(eps) {
  gamma = Param({channels});
  gamma.value.setConstant(Scalar(1));
  beta = Param({channels});
  run_mean = Param({channels}, false);
  run_var = Param({channels}, false);
  run_var.value.setConstant(Scalar(1));
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, name_);
  require_channels(x, channels_, name_);
  fwd_mode_ = mode;
  in_shape_ = x.shape;
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const double cnt = static_cast<double>(N) * plane;
  xhat_ = Tensor(x.shape);
  invstd_ = ArrayX(channels_);
  Tensor y(x.shape);
  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double s = 0.0, s2 = 0.0;
      for (int n = 0; n < N; ++n) {
        const std::int64_t off = x.idx(n, c, 0, 0);
        for (std::int64_t i = 0; i < plane; ++i) {
          const double v = x.v[off + i];
          s += v;
          s2 += v * v;
        }
      }
      mean = s / cnt;
      var = s2 / cnt - mean * mean;
      if (var < 0) var = 0;
      run_mean.value[c] = static_cast<Scalar>((1.0 - momentum_) * run_mean.value[c] +
                                              momentum_ * mean);
      run_var.value[c] = static_cast<Scalar>((1.0 - momentum_) * run_var.value[c] +
                                             momentum_ * var);
    } else {
      mean = run_mean.value[c];
      var = run_var.value[c];
    }
    const Scalar istd = static_cast<Scalar>(1.0 / std::sqrt(var + eps_));
    invstd_[c] = istd;
    const Scalar g = gamma.value[c], bt = beta.value[c], m = static_cast<Scalar>(mean);
    for (int n = 0; n < N; ++n) {
      const std::int64_t off = x.idx(n, c, 0, 0);
      for (std::int64_t i = 0; i < plane; ++i) {
        const Scalar xh = (x.v[off + i] - m) * istd;
        xhat_.v[off + i] = xh;
        y.v[off + i] = g * xh + bt;
      }
    }
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& dy) {
  const int N = in_shape_[0], H = in_shape_[2], W = in_shape_[3];
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const double cnt = static_cast<double>(N) * plane;
  Tensor dx(in_shape_);
  for (int c = 0; c < channels_; ++c) {
    double s1 = 0.0, s2 = 0.0;
    for (int n = 0; n < N; ++n) {
      const std::int64_t off = xhat_.idx(n, c, 0, 0);
      for (std::int64_t i = 0; i < plane; ++i) {
        s1 += dy.v[off + i];
        s2 += static_cast<double>(dy.v[off + i]) * xhat_.v[off + i];
      }
    }
    gamma.grad[c] += static_cast<Scalar>(s2);
    beta.grad[c] += static_cast<Scalar>(s1);
    const Scalar gi = gamma.value[c] * invstd_[c];
    if (fwd_mode_ == Mode::Train) {
      const Scalar m1 = static_cast<Scalar>(s1 / cnt), m2 = static_cast<Scalar>(s2 / cnt);
      for (int n = 0; n < N; ++n) {
        const std::int64_t off = xhat_.idx(n, c, 0, 0);
        for (std::int64_t i = 0; i < plane; ++i)
          dx.v[off + i] = gi * (dy.v[off + i] - m1 - xhat_.v[off + i] * m2);
      }
    } else {
      for (int n = 0; n < N; ++n) {
        const std::int64_t off = xhat_.idx(n, c, 0, 0);
        for (std::int64_t i = 0; i < plane; ++i) dx.v[off + i] = gi * dy.v[off + i];
      }
    }
  }
  return dx;
}

void BatchNorm::collect_params(std::vector<NamedParam>& out) {
  out.push_back({name_ + ".gamma", &gamma});
  out.push_back({name_ + ".beta", &beta});
  out.push_back({name_ + ".run_mean", &run_mean});
  out.push_back({name_ + ".run_var", &run_var});
}

// ---------------------------------------------------------------------------
// PixelShuffle

PixelShuffle::PixelShuffle(std::string name, int r) : Layer(std::move(name)), r_(r) {}

Tensor PixelShuffle::forward(const Tensor& x, Mode) {
  require_rank(x, 4, name_);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % (r_ * r_) != 0)
    throw ShapeError(name_ + ": channels not divisible by r^2");
  in_shape_ = x.shape;
  const int co = C / (r_ * r_);
  Tensor y({N, co, H * r_, W * r_});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < co; ++c)
      for (int h = 0; h < H * r_; ++h)
        for (int w = 0; w < W * r_; ++w)
          y.at(n, c, h, w) =
              x.at(n, c * r_ * r_ + (h % r_) * r_ + (w % r_), h / r_, w / r_);
  return y;
}

Tensor PixelShuffle::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  const int N = dy.dim(0), co = dy.dim(1), Ho = dy.dim(2), Wo = dy.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < co; ++c)
      for (int h = 0; h < Ho; ++h)
        for (int w = 0; w < Wo; ++w)
          dx.at(n, c * r_ * r_ + (h % r_) * r_ + (w % r_), h / r_, w / r_) =
              dy.at(n, c, h, w);
  return dx;
}

// ---------------------------------------------------------------------------
// Sigmoid

Tensor Sigmoid::forward(const Tensor& x, Mode) {
  y_ = Tensor(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) y_.v[i] = stable_sigmoid(x.v[i]);
  return y_;
}

Tensor Sigmoid::backward(const Tensor& dy) {
  Tensor dx(y_.shape);
  dx.v = dy.v * y_.v * (Scalar(1) - y_.v);
  return dx;
}

// ---------------------------------------------------------------------------
// GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
  require_rank(x, 4, name_);
  in_shape_ = x.shape;
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor y({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      CMapVec p(x.v.data() + x.idx(n, c, 0, 0), plane);
      y.v[static_cast<std::int64_t>(n) * C + c] =
          static_cast<Scalar>(p.sum() / static_cast<double>(plane));
    }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  const int N = in_shape_[0], C = in_shape_[1];
  const std::int64_t plane = static_cast<std::int64_t>(in_shape_[2]) * in_shape_[3];
  const Scalar inv = static_cast<Scalar>(1.0 / static_cast<double>(plane));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const Scalar g = dy.v[static_cast<std::int64_t>(n) * C + c] * inv;
      MapVec p(dx.v.data() + dx.idx(n, c, 0, 0), plane);
      p.array().setConstant(g);
    }
  return dx;
}

// ---------------------------------------------------------------------------
// Flatten

Tensor Flatten::forward(const Tensor& x, Mode) {
  require_rank(x, 4, name_);
  in_shape_ = x.shape;
  Tensor y({x.dim(0), static_cast<int>(x.numel() / x.dim(0))});
  y.v = x.v;
  return y;
}

Tensor Flatten::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  dx.v = dy.v;
  return dx;
}

// ---------------------------------------------------------------------------
// DSepConv

DSepConv::DSepConv(std::string name, int channels, int k)
    : Layer(name),
      dw_(name + ".dw", channels, channels, k, 1, channels),
      act_(name + ".mid_act", channels),
      pw_(name + ".pw", channels, channels, 1) {}

Tensor DSepConv::forward(const Tensor& x, Mode mode) {
  return pw_.forward(act_.forward(dw_.forward(x, mode), mode), mode);
}

Tensor DSepConv::backward(const Tensor& dy) {
  return dw_.backward(act_.backward(pw_.backward(dy)));
}

void DSepConv::collect_params(std::vector<NamedParam>& out) {
  dw_.collect_params(out);
  act_.collect_params(out);
  pw_.collect_params(out);
}

void DSepConv::init_weights(Rng& rng) {
  dw_.init_weights(rng);
  pw_.init_weights(rng);
}

void DSepConv::enable_spectral_norm(Rng& rng) {
  dw_.enable_spectral_norm(rng);
  pw_.enable_spectral_norm(rng);
}

void DSepConv::set_sn_update(bool on) {
  dw_.set_sn_update(on);
  pw_.set_sn_update(on);
}

// ---------------------------------------------------------------------------
// InvBottleneck

InvBottleneck::InvBottleneck(std::string name, int channels, int k)
    : Layer(name),
      expand_(name + ".expand", channels, 2 * channels, 1),
      act1_(name + ".act1", 2 * channels),
      dw_(name + ".dw", 2 * channels, 2 * channels, k, 1, 2 * channels),
      act2_(name + ".act2", 2 * channels),
      project_(name + ".project", 2 * channels, channels, 1) {}

Tensor InvBottleneck::forward(const Tensor& x, Mode mode) {
  Tensor t = expand_.forward(x, mode);
  t = act1_.forward(t, mode);
  t = dw_.forward(t, mode);
  t = act2_.forward(t, mode);
  return project_.forward(t, mode);
}

Tensor InvBottleneck::backward(const Tensor& dy) {
  Tensor d = project_.backward(dy);
  d = act2_.backward(d);
  d = dw_.backward(d);
  d = act1_.backward(d);
  return expand_.backward(d);
}

void InvBottleneck::collect_params(std::vector<NamedParam>& out) {
  expand_.collect_params(out);
  act1_.collect_params(out);
  dw_.collect_params(out);
  act2_.collect_params(out);
  project_.collect_params(out);
}

void InvBottleneck::init_weights(Rng& rng) {
  expand_.init_weights(rng);
  dw_.init_weights(rng);
  project_.init_weights(rng);
}

void InvBottleneck::enable_spectral_norm(Rng& rng) {
  expand_.enable_spectral_norm(rng);
  dw_.enable_spectral_norm(rng);
  project_.enable_spectral_norm(rng);
}

void InvBottleneck::set_sn_update(bool on) {
  expand_.set_sn_update(on);
  dw_.set_sn_update(on);
  project_.set_sn_update(on);
}

// ---------------------------------------------------------------------------
// ChannelGate

ChannelGate::ChannelGate(std::string name, int channels, int reduction)
    : Layer(name),
      channels_(channels),
      fc1_(name + ".fc1", channels, channels >= reduction ? channels / reduction : 1),
      fc2_(name + ".fc2", channels >= reduction ? channels / reduction : 1, channels) {}

Tensor ChannelGate::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, name_);
  require_channels(x, channels_, name_);
  x_ = x;
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor pooled({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      CMapVec p(x.v.data() + x.idx(n, c, 0, 0), plane);
      pooled.v[static_cast<std::int64_t>(n) * C + c] =
          static_cast<Scalar>(p.sum() / static_cast<double>(plane));
    }
  z1_ = fc1_.forward(pooled, mode);
  Tensor r(z1_.shape);
  r.v = z1_.v.max(Scalar(0));
  Tensor z2 = fc2_.forward(r, mode);
  gate_ = Tensor(z2.shape);
  for (std::int64_t i = 0; i < z2.numel(); ++i) gate_.v[i] = stable_sigmoid(z2.v[i]);
  Tensor y(x.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const Scalar g = gate_.v[static_cast<std::int64_t>(n) * C + c];
      const std::int64_t off = x.idx(n, c, 0, 0);
      for (std::int64_t i = 0; i < plane; ++i) y.v[off + i] = x.v[off + i] * g;
    }
  return y;
}

Tensor ChannelGate::backward(const Tensor& dy) {
  const int N = x_.dim(0), C = x_.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x_.dim(2)) * x_.dim(3);
  Tensor dx(x_.shape);
  Tensor dgate({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::int64_t off = x_.idx(n, c, 0, 0);
      const Scalar g = gate_.v[static_cast<std::int64_t>(n) * C + c];
      double acc = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) {
        dx.v[off + i] = dy.v[off + i] * g;
        acc += static_cast<double>(dy.v[off + i]) * x_.v[off + i];
      }
      dgate.v[static_cast<std::int64_t>(n) * C + c] = static_cast<Scalar>(acc);
    }
  Tensor dz2(dgate.shape);
  dz2.v = dgate.v * gate_.v * (Scalar(1) - gate_.v);
  Tensor dr = fc2_.backward(dz2);
  Tensor dz1(dr.shape);
  for (std::int64_t i = 0; i < dr.numel(); ++i)
    dz1.v[i] = z1_.v[i] > 0 ? dr.v[i] : Scalar(0);
  Tensor dpool = fc1_.backward(dz1);
  const Scalar inv = static_cast<Scalar>(1.0 / static_cast<double>(plane));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const Scalar g = dpool.v[static_cast<std::int64_t>(n) * C + c] * inv;
      const std::int64_t off = dx.idx(n, c, 0, 0);
      for (std::int64_t i = 0; i < plane; ++i) dx.v[off + i] += g;
    }
  return dx;
}

void ChannelGate::collect_params(std::vector<NamedParam>& out) {
  fc1_.collect_params(out);
  fc2_.collect_params(out);
}

void ChannelGate::init_weights(Rng& rng) {
  fc1_.init_weights(rng);
  fc2_.init_weights(rng);
}

void ChannelGate::enable_spectral_norm(Rng& rng) {
  fc1_.enable_spectral_norm(rng);
  fc2_.enable_spectral_norm(rng);
}

void ChannelGate::set_sn_update(bool on) {
  fc1_.set_sn_update(on);
  fc2_.set_sn_update(on);
}

// ---------------------------------------------------------------------------
// Network

int Network::add_layer(LayerPtr layer, int input) {
  if (input < -1 || input >= static_cast<int>(nodes_.size()))
    throw StateError("network: bad input node");
  nodes_.push_back(Node{std::move(layer), {input}});
  output_ = static_cast<int>(nodes_.size()) - 1;
  return output_;
}

int Network::add_sum(std::vector<int> inputs) {
  if (inputs.empty()) throw StateError("network: sum node needs inputs");
  for (int i : inputs)
    if (i < -1 || i >= static_cast<int>(nodes_.size()))
      throw StateError("network: bad input node");
  nodes_.push_back(Node{nullptr, std::move(inputs)});
  output_ = static_cast<int>(nodes_.size()) - 1;
  return output_;
}

Tensor Network::forward(const Tensor& x, Mode mode) {
  return forward_node(x, output_, mode);
}

Tensor Network::forward_node(const Tensor& x, int node, Mode mode) {
  if (node < 0 || node >= static_cast<int>(nodes_.size()))
    throw StateError("network: no such node");
  input_ = x;
  outs_.assign(nodes_.size(), Tensor{});
  for (int i = 0; i <= node; ++i) {
    Node& nd = nodes_[static_cast<std::size_t>(i)];
    auto src = [&](int j) -> const Tensor& { return j == -1 ? input_ : outs_[static_cast<std::size_t>(j)]; };
    if (nd.layer) {
      outs_[static_cast<std::size_t>(i)] = nd.layer->forward(src(nd.inputs[0]), mode);
    } else {
      Tensor acc = src(nd.inputs[0]);
      for (std::size_t k = 1; k < nd.inputs.size(); ++k) {
        const Tensor& t = src(nd.inputs[k]);
        check_same_shape(acc, t, "network sum");
        acc.v += t.v;
      }
      outs_[static_cast<std::size_t>(i)] = std::move(acc);
    }
  }
  evaluated_upto_ = node;
  return outs_[static_cast<std::size_t>(node)];
}

void Network::backward(const Tensor& dloss_dy) { backward_from(output_, dloss_dy); }

void Network::backward_from(int node, const Tensor& dloss_dnode) {
  if (evaluated_upto_ < node) throw StateError("network: backward before forward");
  std::vector<Tensor> grads(nodes_.size());
  input_grad_ = Tensor(input_.shape);
  grads[static_cast<std::size_t>(node)] = dloss_dnode;
  auto add_to = [&](int j, const Tensor& g) {
    if (j == -1) {
      input_grad_.v += g.v;
      return;
    }
    Tensor& slot = grads[static_cast<std::size_t>(j)];
    if (slot.numel() == 0)
      slot = g;
    else
      slot.v += g.v;
  };
  for (int i = node; i >= 0; --i) {
    Tensor& g = grads[static_cast<std::size_t>(i)];
    if (g.numel() == 0) continue;
    Node& nd = nodes_[static_cast<std::size_t>(i)];
    if (nd.layer) {
      Tensor dx = nd.layer->backward(g);
      add_to(nd.inputs[0], dx);
    } else {
      for (int j : nd.inputs) add_to(j, g);
    }
    g = Tensor{};  // free as we go
  }
}

std::vector<NamedParam> Network::parameters(bool trainable_only) {
  std::vector<NamedParam> all;
  for (auto& nd : nodes_)
    if (nd.layer) nd.layer->collect_params(all);
  if (!trainable_only) return all;
  std::vector<NamedParam> out;
  for (auto& p : all)
    if (p.param->trainable) out.push_back(p);
  return out;
}

std::int64_t Network::param_count(bool trainable_only) {
  std::int64_t n = 0;
  for (auto& p : parameters(trainable_only)) n += p.param->numel();
  return n;
}

void Network::zero_grad() {
  for (auto& p : parameters(false)) p.param->zero_grad();
}

void Network::init_weights(Rng& rng) {
  for (auto& nd : nodes_)
    if (nd.layer) nd.layer->init_weights(rng);
}

void Network::enable_spectral_norm(Rng& rng) {
  for (auto& nd : nodes_)
    if (nd.layer) nd.layer->enable_spectral_norm(rng);
}

void Network::set_sn_update(bool on) {
  for (auto& nd : nodes_)
    if (nd.layer) nd.layer->set_sn_update(on);
}

bool Network::activations_finite() const {
  for (int i = 0; i <= evaluated_upto_; ++i)
    if (!outs_[static_cast<std::size_t>(i)].all_finite()) return false;
  return true;
}

}  // namespace srnas
