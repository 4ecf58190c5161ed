#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace marscf {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

struct FlowResult {
  Tensor value;
  Tensor logdet;  // [B]
};

// ---------------------------------------------------------------------------
// ActNorm
// ---------------------------------------------------------------------------

/// Per-channel affine y = (x + bias) * exp(logscale) with data-dependent
/// initialization to zero mean / unit variance on the first batch.
class ActNorm {
 public:
  explicit ActNorm(int channels) : logscale_({channels}), bias_({channels}) {}

  bool initialized() const { return initialized_; }
  void mark_initialized() { initialized_ = true; }
  int channels() const { return logscale_.dim(0); }

  void init_from_batch(const Tensor& x) {
    detail::check_bchw(x, "actnorm init");
    check(x.dim(1) == channels(), "actnorm init: channel mismatch");
    const int B = x.dim(0), C = x.dim(1);
    const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    const double n = static_cast<double>(B) * static_cast<double>(HW);
    for (int c = 0; c < C; ++c) {
      double s = 0.0, ss = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = x.data() + (static_cast<std::int64_t>(b) * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          s += p[i];
          ss += p[i] * p[i];
        }
      }
      const double mean = s / n;
      const double var = std::max(ss / n - mean * mean, 0.0);
      bias_.data()[c] = -mean;
      logscale_.data()[c] = -0.5 * std::log(var + 1e-6);
    }
    initialized_ = true;
  }

  FlowResult forward(const Tensor& x, bool allow_init = false) {
    if (!initialized_) {
      check(allow_init, "actnorm: forward before initialization (enable init mode)");
      init_from_batch(x);
    }
    check(x.dim(1) == channels(), "actnorm: channel mismatch");
    const double hw = static_cast<double>(x.dim(2)) * x.dim(3);
    Tensor y = mul_channel(add_channel(x, bias_), exp_(logscale_));
    Tensor logdet = broadcast_to_batch(scale(sum(logscale_), hw), x.dim(0));
    return {y, logdet};
  }

  Tensor inverse(const Tensor& y) const {
    check(initialized_, "actnorm: inverse before initialization");
    check(y.dim(1) == channels(), "actnorm: channel mismatch");
    return add_channel(mul_channel(y, exp_(neg(logscale_))), neg(bias_));
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".logscale", logscale_);
    fn(prefix + ".bias", bias_);
  }

  Tensor& logscale() { return logscale_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor logscale_, bias_;
  bool initialized_ = false;
};

// ---------------------------------------------------------------------------
// Invertible 1x1 convolution, LU-parameterized
// ---------------------------------------------------------------------------

namespace detail {

inline int strict_lower_index(int i, int j, int /*C*/) { return i * (i - 1) / 2 + j; }
inline int strict_upper_index(int i, int j, int C) {
  return i * C - i * (i + 1) / 2 + (j - i - 1);
}

/// W = P L U assembled from the packed factors; rows scattered by piv so that
/// W[piv[i], :] = (L U)[i, :].
inline Tensor assemble_plu(const Tensor& lower, const Tensor& upper, const Tensor& logdiag,
                           const std::vector<int>& piv, const std::vector<double>& sign) {
  const int C = logdiag.dim(0);
  auto Lat = [&](int i, int j) -> double {
    if (i == j) return 1.0;
    if (i > j) return lower.data()[strict_lower_index(i, j, C)];
    return 0.0;
  };
  auto Uat = [&](int i, int j) -> double {
    if (i == j) return sign[static_cast<size_t>(i)] * std::exp(logdiag.data()[i]);
    if (i < j) return upper.data()[strict_upper_index(i, j, C)];
    return 0.0;
  };
  Tensor W({C, C});
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j) {
      double acc = 0.0;
      for (int k = 0; k <= i && k <= j; ++k) acc += Lat(i, k) * Uat(k, j);
      W.data()[piv[static_cast<size_t>(i)] * C + j] = acc;
    }
  const bool rec = Tape::active() && (lower.requires_grad() || upper.requires_grad() ||
                                      logdiag.requires_grad());
  if (rec) {
    W.set_requires_grad(true);
    Tape::active()->record([lower, upper, logdiag, W, piv, sign, C]() mutable {
      Tensor lo = lower, up = upper, ld = logdiag, Wm = W;
      auto Lat2 = [&](int i, int j) -> double {
        if (i == j) return 1.0;
        if (i > j) return lo.data()[strict_lower_index(i, j, C)];
        return 0.0;
      };
      auto Uat2 = [&](int i, int j) -> double {
        if (i == j) return sign[static_cast<size_t>(i)] * std::exp(ld.data()[i]);
        if (i < j) return up.data()[strict_upper_index(i, j, C)];
        return 0.0;
      };
      const double* gW = Wm.grad();
      // gM[i][j] = gW[piv[i]][j]; gL = gM U^T, gU = L^T gM
      double* glo = lo.requires_grad() ? lo.grad() : nullptr;
      double* gup = up.requires_grad() ? up.grad() : nullptr;
      double* gld = ld.requires_grad() ? ld.grad() : nullptr;
      for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j) {
          if (glo && i > j) {
            double acc = 0.0;
            for (int k = 0; k < C; ++k)
              acc += gW[piv[static_cast<size_t>(i)] * C + k] * Uat2(j, k);
            glo[strict_lower_index(i, j, C)] += acc;
          }
          if ((gup || gld) && i <= j) {
            double acc = 0.0;
            for (int k = 0; k < C; ++k)
              acc += Lat2(k, i) * gW[piv[static_cast<size_t>(k)] * C + j];
            if (i < j) {
              if (gup) gup[strict_upper_index(i, j, C)] += acc;
            } else if (gld) {
              gld[i] += acc * sign[static_cast<size_t>(i)] * std::exp(ld.data()[i]);
            }
          }
        }
    });
  }
  return W;
}

}  // namespace detail

/// Per-site channel mixing by W = P L U. The log-determinant is
/// H*W*sum(logdiag); the inverse runs triangular solves, never forming W^-1.
class InvConv1x1 {
 public:
  InvConv1x1(int channels, Rng& rng)
      : C_(channels),
        lower_({std::max(1, channels * (channels - 1) / 2)}),
        upper_({std::max(1, channels * (channels - 1) / 2)}),
        logdiag_({channels}) {
    // random orthogonal init via Gram-Schmidt, then one-time LU with pivoting
    std::vector<std::vector<double>> A(static_cast<size_t>(C_),
                                       std::vector<double>(static_cast<size_t>(C_)));
    for (auto& row : A)
      for (auto& v : row) v = rng.normal();
    for (int j = 0; j < C_; ++j) {
      for (int k = 0; k < j; ++k) {
        double d = 0.0;
        for (int i = 0; i < C_; ++i) d += A[i][j] * A[i][k];
        for (int i = 0; i < C_; ++i) A[i][j] -= d * A[i][k];
      }
      double nrm = 0.0;
      for (int i = 0; i < C_; ++i) nrm += A[i][j] * A[i][j];
      nrm = std::sqrt(std::max(nrm, 1e-12));
      for (int i = 0; i < C_; ++i) A[i][j] /= nrm;
    }
    factorize(A);
  }

  /// Factorizes a given (invertible) weight matrix.
  explicit InvConv1x1(const std::vector<std::vector<double>>& W)
      : C_(static_cast<int>(W.size())),
        lower_({std::max<int>(1, C_ * (C_ - 1) / 2)}),
        upper_({std::max<int>(1, C_ * (C_ - 1) / 2)}),
        logdiag_({C_}) {
    factorize(W);
  }

  int channels() const { return C_; }

  FlowResult forward(const Tensor& x) const {
    check(x.dim(1) == C_, "invconv: channel mismatch");
    check_diag();
    Tensor W = detail::assemble_plu(lower_, upper_, logdiag_, piv_, sign_);
    Tensor y = channel_matmul(x, W);
    const double hw = static_cast<double>(x.dim(2)) * x.dim(3);
    Tensor logdet = broadcast_to_batch(scale(sum(logdiag_), hw), x.dim(0));
    return {y, logdet};
  }

  /// Solves W x = y per spatial site via the triangular factors.
  /// Differentiable with respect to the input only.
  Tensor inverse(const Tensor& y) const {
    check(y.dim(1) == C_, "invconv: channel mismatch");
    check_diag();
    Tensor x(y.shape());
    solve_into(y.data(), x.data(), y.dim(0),
               static_cast<std::int64_t>(y.dim(2)) * y.dim(3));
    if (tracing(y)) {
      x.set_requires_grad(true);
      // capture the factor tensors by value so the closure does not depend on
      // the layer object's lifetime
      Tape::active()->record([y, x, lo = lower_, up = upper_, ld = logdiag_, piv = piv_,
                              sign = sign_, C = C_]() mutable {
        Tensor ym = y, xm = x;
        transpose_solve_acc(xm.grad(), ym.grad(), ym.dim(0),
                            static_cast<std::int64_t>(ym.dim(2)) * ym.dim(3), lo, up, ld, piv,
                            sign, C);
      });
    }
    return x;
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".lower", lower_);
    fn(prefix + ".upper", upper_);
    fn(prefix + ".logdiag", logdiag_);
  }

  // The pivot order and diagonal signs are fixed structure chosen at
  // factorization time; serialization has to carry them alongside the
  // parameter tensors.
  const std::vector<int>& pivots() const { return piv_; }
  const std::vector<double>& signs() const { return sign_; }
  void set_factor_structure(const std::vector<int>& piv, const std::vector<double>& sign) {
    check(static_cast<int>(piv.size()) == C_ && static_cast<int>(sign.size()) == C_,
          "invconv: bad factor structure size");
    for (int v : piv) check(0 <= v && v < C_, "invconv: pivot out of range");
    for (double s : sign) check(s == 1.0 || s == -1.0, "invconv: sign must be +-1");
    piv_ = piv;
    sign_ = sign;
  }

  /// Dense weight, for tests.
  Tensor weight_dense() const {
    NoGradScope ng;
    return detail::assemble_plu(lower_, upper_, logdiag_, piv_, sign_);
  }

 private:
  void check_diag() const {
    for (int c = 0; c < C_; ++c)
      check(std::exp(logdiag_.data()[c]) >= 1e-12,
            "invconv: numerically singular diagonal at channel " + std::to_string(c));
  }

  void factorize(std::vector<std::vector<double>> A) {
    piv_.resize(static_cast<size_t>(C_));
    sign_.resize(static_cast<size_t>(C_));
    std::vector<int> rows(static_cast<size_t>(C_));
    for (int i = 0; i < C_; ++i) rows[static_cast<size_t>(i)] = i;
    for (int k = 0; k < C_; ++k) {
      int p = k;
      for (int i = k + 1; i < C_; ++i)
        if (std::abs(A[static_cast<size_t>(i)][static_cast<size_t>(k)]) >
            std::abs(A[static_cast<size_t>(p)][static_cast<size_t>(k)]))
          p = i;
      std::swap(A[static_cast<size_t>(k)], A[static_cast<size_t>(p)]);
      std::swap(rows[static_cast<size_t>(k)], rows[static_cast<size_t>(p)]);
      for (int i = k + 1; i < C_; ++i) {
        const double f = A[static_cast<size_t>(i)][static_cast<size_t>(k)] /
                         A[static_cast<size_t>(k)][static_cast<size_t>(k)];
        A[static_cast<size_t>(i)][static_cast<size_t>(k)] = f;
        for (int j = k + 1; j < C_; ++j)
          A[static_cast<size_t>(i)][static_cast<size_t>(j)] -=
              f * A[static_cast<size_t>(k)][static_cast<size_t>(j)];
      }
    }
    // rows[i] is the original row sitting at factored row i: W[rows[i],:] = (LU)[i,:]
    for (int i = 0; i < C_; ++i) piv_[static_cast<size_t>(i)] = rows[static_cast<size_t>(i)];
    for (int i = 0; i < C_; ++i) {
      const double d = A[static_cast<size_t>(i)][static_cast<size_t>(i)];
      sign_[static_cast<size_t>(i)] = d >= 0 ? 1.0 : -1.0;
      logdiag_.data()[i] = std::log(std::abs(d));
      for (int j = 0; j < i; ++j)
        lower_.data()[detail::strict_lower_index(i, j, C_)] =
            A[static_cast<size_t>(i)][static_cast<size_t>(j)];
      for (int j = i + 1; j < C_; ++j)
        upper_.data()[detail::strict_upper_index(i, j, C_)] =
            A[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
  }

  // x = U^-1 L^-1 (y permuted): per site over all batches
  void solve_into(const double* y, double* x, int B, std::int64_t HW) const {
    std::vector<double> t(static_cast<size_t>(C_));
    for (int b = 0; b < B; ++b)
      for (std::int64_t s = 0; s < HW; ++s) {
        const double* yb = y + static_cast<std::int64_t>(b) * C_ * HW;
        double* xb = x + static_cast<std::int64_t>(b) * C_ * HW;
        for (int i = 0; i < C_; ++i) {
          double acc = yb[piv_[static_cast<size_t>(i)] * HW + s];
          for (int j = 0; j < i; ++j)
            acc -= lower_.data()[detail::strict_lower_index(i, j, C_)] * t[static_cast<size_t>(j)];
          t[static_cast<size_t>(i)] = acc;
        }
        for (int i = C_ - 1; i >= 0; --i) {
          double acc = t[static_cast<size_t>(i)];
          for (int j = i + 1; j < C_; ++j)
            acc -= upper_.data()[detail::strict_upper_index(i, j, C_)] * xb[j * HW + s];
          xb[i * HW + s] =
              acc / (sign_[static_cast<size_t>(i)] * std::exp(logdiag_.data()[i]));
        }
      }
  }

  // gy += W^-T gx: solve U^T a = gx, L^T b = a, scatter by piv
  static void transpose_solve_acc(const double* gx, double* gy, int B, std::int64_t HW,
                                  const Tensor& lower, const Tensor& upper,
                                  const Tensor& logdiag, const std::vector<int>& piv,
                                  const std::vector<double>& sign, int C) {
    std::vector<double> a(static_cast<size_t>(C)), bb(static_cast<size_t>(C));
    for (int n = 0; n < B; ++n)
      for (std::int64_t s = 0; s < HW; ++s) {
        const double* gxb = gx + static_cast<std::int64_t>(n) * C * HW;
        double* gyb = gy + static_cast<std::int64_t>(n) * C * HW;
        for (int i = 0; i < C; ++i) {
          double acc = gxb[i * HW + s];
          for (int j = 0; j < i; ++j)
            acc -= upper.data()[detail::strict_upper_index(j, i, C)] * a[static_cast<size_t>(j)];
          a[static_cast<size_t>(i)] =
              acc / (sign[static_cast<size_t>(i)] * std::exp(logdiag.data()[i]));
        }
        for (int i = C - 1; i >= 0; --i) {
          double acc = a[static_cast<size_t>(i)];
          for (int j = i + 1; j < C; ++j)
            acc -= lower.data()[detail::strict_lower_index(j, i, C)] * bb[static_cast<size_t>(j)];
          bb[static_cast<size_t>(i)] = acc;
        }
        for (int i = 0; i < C; ++i)
          gyb[piv[static_cast<size_t>(i)] * HW + s] += bb[static_cast<size_t>(i)];
      }
  }

  int C_;
  std::vector<int> piv_;
  std::vector<double> sign_;
  Tensor lower_, upper_, logdiag_;
};

// ---------------------------------------------------------------------------
// Coupling parameter network: 3x3 -> relu -> 1x1 -> relu -> 3x3 (zero-init)
// ---------------------------------------------------------------------------

class ConvNet {
 public:
  ConvNet(int cin, int width, int cout, Rng& rng)
      : w1_({width, cin, 3, 3}),
        b1_({width}),
        w2_({width, width, 1, 1}),
        b2_({width}),
        w3_({cout, width, 3, 3}),
        b3_({cout}) {
    rng.fill_normal(w1_, std::sqrt(2.0 / (cin * 9.0)));
    rng.fill_normal(w2_, std::sqrt(2.0 / width));
    // final layer stays zero so the coupling starts as the identity
  }

  Tensor operator()(const Tensor& x) const {
    Tensor h = relu(conv2d(x, w1_, b1_));
    h = relu(conv2d(h, w2_, b2_));
    return conv2d(h, w3_, b3_);
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w1", w1_);
    fn(prefix + ".b1", b1_);
    fn(prefix + ".w2", w2_);
    fn(prefix + ".b2", b2_);
    fn(prefix + ".w3", w3_);
    fn(prefix + ".b3", b3_);
  }

 private:
  Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

// ---------------------------------------------------------------------------
// Couplings
// ---------------------------------------------------------------------------

enum class CouplingKind { affine, mixlogcdf };

inline CouplingKind coupling_kind_from_string(const std::string& s) {
  if (s == "affine") return CouplingKind::affine;
  if (s == "mixlogcdf") return CouplingKind::mixlogcdf;
  throw std::invalid_argument("unknown coupling kind: " + s);
}

inline std::string to_string(CouplingKind k) {
  return k == CouplingKind::affine ? "affine" : "mixlogcdf";
}

constexpr double kScaleClamp = 2.0;  // alpha in alpha*tanh(s/alpha)

namespace detail {

struct MixLogParams {
  std::vector<Tensor> logits, means, logscales;  // K tensors each, [B,Cb,H,W]
  Tensor a, b;
};

inline MixLogParams split_mixlog_params(const Tensor& p, int Cb, int K) {
  MixLogParams out;
  for (int k = 0; k < K; ++k) out.logits.push_back(slice_channels(p, k * Cb, (k + 1) * Cb));
  for (int k = 0; k < K; ++k)
    out.means.push_back(slice_channels(p, (K + k) * Cb, (K + k + 1) * Cb));
  for (int k = 0; k < K; ++k)
    out.logscales.push_back(slice_channels(p, (2 * K + k) * Cb, (2 * K + k + 1) * Cb));
  out.a = soft_clamp(slice_channels(p, 3 * K * Cb, (3 * K + 1) * Cb), kScaleClamp);
  out.b = slice_channels(p, (3 * K + 1) * Cb, (3 * K + 2) * Cb);
  return out;
}

/// Elementwise logistic-mixture CDF coupling: y = logit(F(x)) * exp(a) + b.
/// Returns y and the per-element log |dy/dx| contribution.
inline std::pair<Tensor, Tensor> mixlog_transform(const Tensor& x, const MixLogParams& mp) {
  const int K = static_cast<int>(mp.logits.size());
  // softmax over the K mixture logits
  Tensor m = mp.logits[0];
  for (int k = 1; k < K; ++k) m = maximum(m, mp.logits[static_cast<size_t>(k)]);
  std::vector<Tensor> e(static_cast<size_t>(K));
  Tensor Z;
  for (int k = 0; k < K; ++k) {
    e[static_cast<size_t>(k)] = exp_(sub(mp.logits[static_cast<size_t>(k)], m));
    Z = k == 0 ? e[0] : add(Z, e[static_cast<size_t>(k)]);
  }
  Tensor F, pdf;
  for (int k = 0; k < K; ++k) {
    Tensor pi = div(e[static_cast<size_t>(k)], Z);
    Tensor inv_s = exp_(neg(mp.logscales[static_cast<size_t>(k)]));
    Tensor sig = sigmoid_(mul(sub(x, mp.means[static_cast<size_t>(k)]), inv_s));
    Tensor cdf_term = mul(pi, sig);
    Tensor pdf_term = mul(mul(pi, inv_s), mul(sig, sub(Tensor(sig.shape(), 1.0), sig)));
    F = k == 0 ? cdf_term : add(F, cdf_term);
    pdf = k == 0 ? pdf_term : add(pdf, pdf_term);
  }
  Tensor logF = log_(F);
  Tensor log1mF = log1p_(neg(F));
  Tensor y = add(mul(sub(logF, log1mF), exp_(mp.a)), mp.b);
  Tensor ld = sub(add(log_(pdf), mp.a), add(logF, log1mF));
  return {y, ld};
}

}  // namespace detail

/// Channel-split coupling: the first half of the channels passes through and
/// parameterizes an elementwise invertible transform of the second half.
class Coupling {
 public:
  Coupling(CouplingKind kind, int channels, int width, Rng& rng, int mixture_components = 4)
      : kind_(kind),
        channels_(channels),
        K_(mixture_components),
        net_(make_net(kind, channels, width, mixture_components, rng)) {
    check(channels % 2 == 0, "coupling: odd channel count " + std::to_string(channels));
  }

  FlowResult forward(const Tensor& x) const {
    check(x.dim(1) == channels_, "coupling: channel mismatch");
    const int Cb = channels_ / 2;
    Tensor xa = slice_channels(x, 0, Cb);
    Tensor xb = slice_channels(x, Cb, channels_);
    Tensor p = net_(xa);
    if (kind_ == CouplingKind::affine) {
      Tensor s = soft_clamp(slice_channels(p, 0, Cb), kScaleClamp);
      Tensor t = slice_channels(p, Cb, 2 * Cb);
      Tensor yb = add(mul(xb, exp_(s)), t);
      return {concat_channels({xa, yb}), sum_batch(s)};
    }
    auto mp = detail::split_mixlog_params(p, Cb, K_);
    auto [yb, ld] = detail::mixlog_transform(xb, mp);
    return {concat_channels({xa, yb}), sum_batch(ld)};
  }

  Tensor inverse(const Tensor& y) const {
    check(y.dim(1) == channels_, "coupling: channel mismatch");
    const int Cb = channels_ / 2;
    Tensor ya = slice_channels(y, 0, Cb);
    Tensor yb = slice_channels(y, Cb, channels_);
    if (kind_ == CouplingKind::affine) {
      Tensor p = net_(ya);
      Tensor s = soft_clamp(slice_channels(p, 0, Cb), kScaleClamp);
      Tensor t = slice_channels(p, Cb, 2 * Cb);
      Tensor xb = mul(sub(yb, t), exp_(neg(s)));
      return concat_channels({ya, xb});
    }
    return mixlog_inverse(ya, yb);
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    net_.visit_params(prefix + ".net", fn);
  }

  CouplingKind kind() const { return kind_; }

 private:
  static ConvNet make_net(CouplingKind kind, int channels, int width, int K, Rng& rng) {
    const int Cb = channels / 2;
    const int cout = kind == CouplingKind::affine ? 2 * Cb : (3 * K + 2) * Cb;
    return ConvNet(Cb, width, cout, rng);
  }

  Tensor mixlog_inverse(const Tensor& ya, const Tensor& yb) const {
    const int Cb = channels_ / 2;
    // detached bisection pass
    Tensor xb_root(yb.shape());
    {
      NoGradScope ng;
      Tensor p = net_(ya);
      auto mp = detail::split_mixlog_params(p, Cb, K_);
      bisect(yb, mp, xb_root);
    }
    Tensor xb = xb_root;
    if (tracing(ya, yb)) {
      // implicit-function correction: x = x0 + (y - g(x0, params)) / g'(x0),
      // with x0 and g'(x0) held constant. Exact value, first-order gradients.
      Tensor p = net_(ya);
      auto mp = detail::split_mixlog_params(p, Cb, K_);
      auto [y_at_root, ld] = detail::mixlog_transform(xb_root, mp);
      Tensor dydx;
      {
        NoGradScope ng;
        dydx = exp_(ld).detach();  // |dy/dx| > 0 and dy/dx > 0 (monotone increasing)
      }
      xb = add(xb_root, div(sub(yb, y_at_root), dydx));
    }
    return concat_channels({ya, xb});
  }

  void bisect(const Tensor& yb, const detail::MixLogParams& mp, Tensor& out) const {
    const std::int64_t n = yb.size();
    // per-element target CDF value: sigmoid((y - b) * exp(-a))
    std::vector<double> target(static_cast<size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      const double z = (yb.data()[i] - mp.b.data()[i]) * std::exp(-mp.a.data()[i]);
      target[static_cast<size_t>(i)] =
          z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    const int K = K_;
    auto cdf = [&](std::int64_t i, double x) {
      double m = mp.logits[0].data()[i];
      for (int k = 1; k < K; ++k) m = std::max(m, mp.logits[static_cast<size_t>(k)].data()[i]);
      double z = 0.0, f = 0.0;
      for (int k = 0; k < K; ++k) {
        const double w = std::exp(mp.logits[static_cast<size_t>(k)].data()[i] - m);
        const double u = (x - mp.means[static_cast<size_t>(k)].data()[i]) *
                         std::exp(-mp.logscales[static_cast<size_t>(k)].data()[i]);
        const double sig = u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
        z += w;
        f += w * sig;
      }
      return f / z;
    };
    for (std::int64_t i = 0; i < n; ++i) {
      double lo = -15.0, hi = 15.0;
      int expand = 0;
      while (cdf(i, lo) > target[static_cast<size_t>(i)] && expand < 60) {
        lo *= 2.0;
        ++expand;
      }
      while (cdf(i, hi) < target[static_cast<size_t>(i)] && expand < 60) {
        hi *= 2.0;
        ++expand;
      }
      check(expand < 60, "mixlogcdf inverse: could not bracket the root (element " +
                             std::to_string(i) + ")");
      int iters = 0;
      while (hi - lo > 1e-10 && iters < 200) {
        const double mid = 0.5 * (lo + hi);
        if (cdf(i, mid) < target[static_cast<size_t>(i)])
          lo = mid;
        else
          hi = mid;
        ++iters;
      }
      if (hi - lo > 1e-8)
        throw std::runtime_error(
            "mixlogcdf inverse: bisection failed to converge (element " + std::to_string(i) +
            ", residual interval " + std::to_string(hi - lo) + ")");
      out.data()[i] = 0.5 * (lo + hi);
    }
  }

  CouplingKind kind_;
  int channels_;
  int K_;
  ConvNet net_;
};

// ---------------------------------------------------------------------------
// FlowStep: actnorm -> invconv -> coupling
// ---------------------------------------------------------------------------

class FlowStep {
 public:
  FlowStep(CouplingKind kind, int channels, int width, Rng& rng, int mixture_components = 4)
      : actnorm_(channels), invconv_(channels, rng),
        coupling_(kind, channels, width, rng, mixture_components) {}

  FlowResult forward(const Tensor& x, bool allow_init = false) {
    auto a = actnorm_.forward(x, allow_init);
    auto w = invconv_.forward(a.value);
    auto c = coupling_.forward(w.value);
    return {c.value, add(add(a.logdet, w.logdet), c.logdet)};
  }

  Tensor inverse(const Tensor& y) const {
    return actnorm_.inverse(invconv_.inverse(coupling_.inverse(y)));
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    actnorm_.visit_params(prefix + ".actnorm", fn);
    invconv_.visit_params(prefix + ".invconv", fn);
    coupling_.visit_params(prefix + ".coupling", fn);
  }

  ActNorm& actnorm() { return actnorm_; }
  const ActNorm& actnorm() const { return actnorm_; }
  InvConv1x1& invconv() { return invconv_; }
  Coupling& coupling() { return coupling_; }

 private:
  ActNorm actnorm_;
  InvConv1x1 invconv_;
  Coupling coupling_;
};

/// Channel split into equal halves; concat restores exactly.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& h) {
  detail::check_bchw(h, "split");
  check(h.dim(1) % 2 == 0, "split: odd channel count " + std::to_string(h.dim(1)));
  const int half = h.dim(1) / 2;
  return {slice_channels(h, 0, half), slice_channels(h, half, h.dim(1))};
}

}  // namespace marscf
