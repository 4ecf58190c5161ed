#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace marscf {

namespace detail {

// C[M,N] += A[M,K] * B[K,N], all row-major.
inline void gemm_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const double* a = A + static_cast<std::ptrdiff_t>(i) * K;
    double* c = C + static_cast<std::ptrdiff_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + static_cast<std::ptrdiff_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T
inline void gemm_nt_acc(const double* A, const double* B, double* C, int M, int N, int K) {
  for (int i = 0; i < M; ++i) {
    const double* a = A + static_cast<std::ptrdiff_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const double* b = B + static_cast<std::ptrdiff_t>(k) * N;
      double acc = 0.0;
      for (int j = 0; j < N; ++j) acc += a[j] * b[j];
      C[static_cast<std::ptrdiff_t>(i) * K + k] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
inline void gemm_tn_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const double* a = A + static_cast<std::ptrdiff_t>(m) * K;
    const double* b = B + static_cast<std::ptrdiff_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      double* c = C + static_cast<std::ptrdiff_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

inline std::vector<double>& scratch_buffer() {
  thread_local std::vector<double> buf;
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

// f: value -> value; d: (x, y) -> dy/dx
template <class F, class D>
Tensor unary_op(const Tensor& x, F f, D d) {
  Tensor y(x.shape());
  const double* xs = x.data();
  double* ys = y.data();
  const auto n = x.size();
  for (std::int64_t i = 0; i < n; ++i) ys[i] = f(xs[i]);
  if (tracing(x)) {
    y.set_requires_grad(true);
    Tape::active()->record([x, y, d]() mutable {
      Tensor xm = x, ym = y;
      const double* g = ym.grad();
      double* gx = xm.grad();
      const double* xs2 = xm.data();
      const double* ys2 = ym.data();
      for (std::int64_t i = 0; i < xm.size(); ++i) gx[i] += g[i] * d(xs2[i], ys2[i]);
    });
  }
  return y;
}

// f: (a,b) -> y; da/db: (a,b,y) -> partials
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, F f, DA da, DB db, const char* name) {
  check(a.same_shape(b), std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
  Tensor y(a.shape());
  const double* as = a.data();
  const double* bs = b.data();
  double* ys = y.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ys[i] = f(as[i], bs[i]);
  if (tracing(a, b)) {
    y.set_requires_grad(true);
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    Tape::active()->record([a, b, y, da, db, ga, gb]() mutable {
      Tensor am = a, bm = b, ym = y;
      const double* g = ym.grad();
      const double* as2 = am.data();
      const double* bs2 = bm.data();
      const double* ys2 = ym.data();
      double* gav = ga ? am.grad() : nullptr;
      double* gbv = gb ? bm.grad() : nullptr;
      for (std::int64_t i = 0; i < am.size(); ++i) {
        if (gav) gav[i] += g[i] * da(as2[i], bs2[i], ys2[i]);
        if (gbv) gbv[i] += g[i] * db(as2[i], bs2[i], ys2[i]);
      }
    });
  }
  return y;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; },
      "mul");
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double v) { return -v / y; }, "div");
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; }, "maximum");
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; }, "minimum");
}

inline Tensor neg(const Tensor& x) {
  return unary_op(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor scale(const Tensor& x, double c) {
  return unary_op(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_const(const Tensor& x, double c) {
  return unary_op(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor exp_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

inline Tensor log1p_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log1p(v); },
                  [](double v, double) { return 1.0 / (1.0 + v); });
}

inline Tensor tanh_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); },
                  [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid_(const Tensor& x) {
  return unary_op(
      x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0 ? v : 0.0; },
                  [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor sqrt_(const Tensor& x) {
  return unary_op(x, [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& x) {
  return unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// Smooth clamp alpha*tanh(x/alpha); identity near zero, bounded by +/-alpha.
inline Tensor soft_clamp(const Tensor& x, double alpha) {
  return scale(tanh_(scale(x, 1.0 / alpha)), alpha);
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  Tensor y({1});
  double acc = 0.0;
  const double* xs = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) acc += xs[i];
  y.data()[0] = acc;
  if (tracing(x)) {
    y.set_requires_grad(true);
    Tape::active()->record([x, y]() mutable {
      Tensor xm = x, ym = y;
      const double g = ym.grad()[0];
      double* gx = xm.grad();
      for (std::int64_t i = 0; i < xm.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Sum over all non-batch axes: [B, ...] -> [B].
inline Tensor sum_batch(const Tensor& x) {
  check(x.rank() >= 1, "sum_batch: rank 0");
  const int B = x.dim(0);
  const std::int64_t per = x.size() / B;
  Tensor y({B});
  const double* xs = x.data();
  double* ys = y.data();
  for (int b = 0; b < B; ++b) {
    double acc = 0.0;
    const double* p = xs + b * per;
    for (std::int64_t i = 0; i < per; ++i) acc += p[i];
    ys[b] = acc;
  }
  if (tracing(x)) {
    y.set_requires_grad(true);
    Tape::active()->record([x, y, B, per]() mutable {
      Tensor xm = x, ym = y;
      const double* g = ym.grad();
      double* gx = xm.grad();
      for (int b = 0; b < B; ++b) {
        double* p = gx + b * per;
        for (std::int64_t i = 0; i < per; ++i) p[i] += g[b];
      }
    });
  }
  return y;
}

/// [1] -> [B], all entries equal.
inline Tensor broadcast_to_batch(const Tensor& s, int B) {
  check(s.size() == 1, "broadcast_to_batch: source must be scalar");
  Tensor y({B}, s.item());
  if (tracing(s)) {
    y.set_requires_grad(true);
    Tape::active()->record([s, y, B]() mutable {
      Tensor sm = s, ym = y;
      const double* g = ym.grad();
      double acc = 0.0;
      for (int b = 0; b < B; ++b) acc += g[b];
      sm.grad()[0] += acc;
    });
  }
  return y;
}

/// [1, ...] -> [B, ...] by repetition.
inline Tensor repeat_batch(const Tensor& x, int B) {
  check(x.rank() >= 1 && x.dim(0) == 1, "repeat_batch: leading dim must be 1");
  Shape s = x.shape();
  s[0] = B;
  Tensor y(s);
  const std::int64_t per = x.size();
  const double* xs = x.data();
  double* ys = y.data();
  for (int b = 0; b < B; ++b) std::copy(xs, xs + per, ys + b * per);
  if (tracing(x)) {
    y.set_requires_grad(true);
    Tape::active()->record([x, y, B, per]() mutable {
      Tensor xm = x, ym = y;
      const double* g = ym.grad();
      double* gx = xm.grad();
      for (int b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < per; ++i) gx[i] += g[b * per + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Channel-broadcast arithmetic for [B,C,H,W] against [C]
// ---------------------------------------------------------------------------

namespace detail {
inline void check_bchw(const Tensor& x, const char* name) {
  check(x.rank() == 4, std::string(name) + ": expected rank-4 [B,C,H,W], got " +
                           shape_str(x.shape()));
}
}  // namespace detail

inline Tensor add_channel(const Tensor& x, const Tensor& b) {
  detail::check_bchw(x, "add_channel");
  check(b.rank() == 1 && b.dim(0) == x.dim(1), "add_channel: bias shape mismatch");
  const int B = x.dim(0), C = x.dim(1);
  const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor y(x.shape());
  const double* xs = x.data();
  const double* bs = b.data();
  double* ys = y.data();
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      const double bv = bs[c];
      const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) ys[off + i] = xs[off + i] + bv;
    }
  if (tracing(x, b)) {
    y.set_requires_grad(true);
    const bool gx_on = x.requires_grad(), gb_on = b.requires_grad();
    Tape::active()->record([x, b, y, B, C, HW, gx_on, gb_on]() mutable {
      Tensor xm = x, bm = b, ym = y;
      const double* g = ym.grad();
      double* gx = gx_on ? xm.grad() : nullptr;
      double* gb = gb_on ? bm.grad() : nullptr;
      for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
          const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * HW;
          double acc = 0.0;
          for (std::int64_t i = 0; i < HW; ++i) {
            if (gx) gx[off + i] += g[off + i];
            acc += g[off + i];
          }
          if (gb) gb[c] += acc;
        }
    });
  }
  return y;
}

inline Tensor mul_channel(const Tensor& x, const Tensor& s) {
  detail::check_bchw(x, "mul_channel");
  check(s.rank() == 1 && s.dim(0) == x.dim(1), "mul_channel: scale shape mismatch");
  const int B = x.dim(0), C = x.dim(1);
  const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor y(x.shape());
  const double* xs = x.data();
  const double* ss = s.data();
  double* ys = y.data();
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      const double sv = ss[c];
      const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) ys[off + i] = xs[off + i] * sv;
    }
  if (tracing(x, s)) {
    y.set_requires_grad(true);
    const bool gx_on = x.requires_grad(), gs_on = s.requires_grad();
    Tape::active()->record([x, s, y, B, C, HW, gx_on, gs_on]() mutable {
      Tensor xm = x, sm = s, ym = y;
      const double* g = ym.grad();
      const double* xs2 = xm.data();
      const double* ss2 = sm.data();
      double* gx = gx_on ? xm.grad() : nullptr;
      double* gs = gs_on ? sm.grad() : nullptr;
      for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
          const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * HW;
          double acc = 0.0;
          for (std::int64_t i = 0; i < HW; ++i) {
            if (gx) gx[off + i] += g[off + i] * ss2[c];
            acc += g[off + i] * xs2[off + i];
          }
          if (gs) gs[c] += acc;
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Channel concat / slice
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_channels: empty input");
  detail::check_bchw(parts[0], "concat_channels");
  const int B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  int Ctot = 0;
  bool rec = false;
  for (const auto& p : parts) {
    detail::check_bchw(p, "concat_channels");
    check(p.dim(0) == B && p.dim(2) == H && p.dim(3) == W,
          "concat_channels: incompatible shapes");
    Ctot += p.dim(1);
    rec = rec || tracing(p);
  }
  const std::int64_t HW = static_cast<std::int64_t>(H) * W;
  Tensor y({B, Ctot, H, W});
  double* ys = y.data();
  int coff = 0;
  for (const auto& p : parts) {
    const int C = p.dim(1);
    const double* ps = p.data();
    for (int n = 0; n < B; ++n)
      std::copy(ps + static_cast<std::int64_t>(n) * C * HW,
                ps + static_cast<std::int64_t>(n + 1) * C * HW,
                ys + (static_cast<std::int64_t>(n) * Ctot + coff) * HW);
    coff += C;
  }
  if (rec) {
    y.set_requires_grad(true);
    Tape::active()->record([parts, y, B, Ctot, HW]() mutable {
      Tensor ym = y;
      const double* g = ym.grad();
      int coff2 = 0;
      for (auto p : parts) {
        const int C = p.dim(1);
        if (p.requires_grad()) {
          double* gp = p.grad();
          for (int n = 0; n < B; ++n) {
            const double* src = g + (static_cast<std::int64_t>(n) * Ctot + coff2) * HW;
            double* dst = gp + static_cast<std::int64_t>(n) * C * HW;
            for (std::int64_t i = 0; i < C * HW; ++i) dst[i] += src[i];
          }
        }
        coff2 += C;
      }
    });
  }
  return y;
}

/// Channels [c0, c1) of x.
inline Tensor slice_channels(const Tensor& x, int c0, int c1) {
  detail::check_bchw(x, "slice_channels");
  check(0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_channels: bad range");
  const int B = x.dim(0), C = x.dim(1), Cs = c1 - c0;
  const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor y({B, Cs, x.dim(2), x.dim(3)});
  const double* xs = x.data();
  double* ys = y.data();
  for (int n = 0; n < B; ++n)
    std::copy(xs + (static_cast<std::int64_t>(n) * C + c0) * HW,
              xs + (static_cast<std::int64_t>(n) * C + c1) * HW,
              ys + static_cast<std::int64_t>(n) * Cs * HW);
  if (tracing(x)) {
    y.set_requires_grad(true);
    Tape::active()->record([x, y, B, C, c0, Cs, HW]() mutable {
      Tensor xm = x, ym = y;
      const double* g = ym.grad();
      double* gx = xm.grad();
      for (int n = 0; n < B; ++n) {
        const double* src = g + static_cast<std::int64_t>(n) * Cs * HW;
        double* dst = gx + (static_cast<std::int64_t>(n) * C + c0) * HW;
        for (std::int64_t i = 0; i < Cs * HW; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Space-to-depth permutations
// ---------------------------------------------------------------------------

namespace detail {
// Index map for squeeze: out[b, c*4+k, i, j] = in[b, c, 2i+di, 2j+dj],
// k in {0:TL, 1:TR, 2:BL, 3:BR}.
inline void squeeze_copy(const double* in, double* out, int B, int C, int H, int W, bool fwd) {
  const int Ho = H / 2, Wo = W / 2;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int k = 0; k < 4; ++k) {
        const int di = k / 2, dj = k % 2;
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            const std::int64_t src =
                ((static_cast<std::int64_t>(b) * C + c) * H + 2 * i + di) * W + 2 * j + dj;
            const std::int64_t dst =
                ((static_cast<std::int64_t>(b) * 4 * C + c * 4 + k) * Ho + i) * Wo + j;
            if (fwd)
              out[dst] = in[src];
            else
              out[src] = in[dst];
          }
      }
}
}  // namespace detail

/// [B,C,H,W] -> [B,4C,H/2,W/2]; volume-preserving permutation, logdet 0.
inline Tensor squeeze2x2(const Tensor& x) {
  detail::check_bchw(x, "squeeze");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H % 2 == 0 && W % 2 == 0, "squeeze: H and W must be even, got " + shape_str(x.shape()));
  Tensor y({B, 4 * C, H / 2, W / 2});
  detail::squeeze_copy(x.data(), y.data(), B, C, H, W, true);
  if (tracing(x)) {
    y.set_requires_grad(true);
    Tape::active()->record([x, y, B, C, H, W]() mutable {
      Tensor xm = x, ym = y;
      // grads flow through the inverse permutation; accumulate manually
      std::vector<double> tmp(static_cast<size_t>(xm.size()), 0.0);
      detail::squeeze_copy(ym.grad(), tmp.data(), B, C, H, W, false);
      double* gx = xm.grad();
      for (std::int64_t i = 0; i < xm.size(); ++i) gx[i] += tmp[i];
    });
  }
  return y;
}

/// Exact inverse of squeeze2x2.
inline Tensor unsqueeze2x2(const Tensor& x) {
  detail::check_bchw(x, "unsqueeze");
  const int B = x.dim(0), C4 = x.dim(1), Ho = x.dim(2), Wo = x.dim(3);
  check(C4 % 4 == 0, "unsqueeze: channels must be divisible by 4");
  const int C = C4 / 4, H = 2 * Ho, W = 2 * Wo;
  Tensor y({B, C, H, W});
  detail::squeeze_copy(x.data(), y.data(), B, C, H, W, false);
  if (tracing(x)) {
    y.set_requires_grad(true);
    Tape::active()->record([x, y, B, C, H, W]() mutable {
      Tensor xm = x, ym = y;
      std::vector<double> tmp(static_cast<size_t>(xm.size()), 0.0);
      detail::squeeze_copy(ym.grad(), tmp.data(), B, C, H, W, true);
      double* gx = xm.grad();
      for (std::int64_t i = 0; i < xm.size(); ++i) gx[i] += tmp[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv2d, same padding, via im2col + GEMM
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, double* col, int C, int H, int W, int kh, int kw) {
  const int ph = kh / 2, pw = kw / 2;
  const std::int64_t HW = static_cast<std::int64_t>(H) * W;
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v, ++row) {
        double* dst = col + row * HW;
        const int ioff = u - ph, joff = v - pw;
        for (int i = 0; i < H; ++i) {
          const int si = i + ioff;
          if (si < 0 || si >= H) {
            std::fill(dst + static_cast<std::int64_t>(i) * W,
                      dst + static_cast<std::int64_t>(i + 1) * W, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::int64_t>(c) * H + si) * W;
          for (int j = 0; j < W; ++j) {
            const int sj = j + joff;
            dst[static_cast<std::int64_t>(i) * W + j] = (sj < 0 || sj >= W) ? 0.0 : src[sj];
          }
        }
      }
}

inline void col2im_acc(const double* col, double* gx, int C, int H, int W, int kh, int kw) {
  const int ph = kh / 2, pw = kw / 2;
  const std::int64_t HW = static_cast<std::int64_t>(H) * W;
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v, ++row) {
        const double* src = col + row * HW;
        const int ioff = u - ph, joff = v - pw;
        for (int i = 0; i < H; ++i) {
          const int si = i + ioff;
          if (si < 0 || si >= H) continue;
          double* dst = gx + (static_cast<std::int64_t>(c) * H + si) * W;
          for (int j = 0; j < W; ++j) {
            const int sj = j + joff;
            if (sj >= 0 && sj < W) dst[sj] += src[static_cast<std::int64_t>(i) * W + j];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation with same padding. input [B,Cin,H,W],
/// kernel [Cout,Cin,kh,kw] (kh, kw odd), bias [Cout] (optional, pass
/// undefined Tensor for none).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  detail::check_bchw(x, "conv2d input");
  check(w.rank() == 4, "conv2d: kernel must be rank-4, got " + shape_str(w.shape()));
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(1) == Cin, "conv2d: kernel expects " + std::to_string(w.dim(1)) +
                             " input channels, input has " + std::to_string(Cin));
  check(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel sides must be odd");
  const bool has_bias = bias.defined();
  if (has_bias)
    check(bias.rank() == 1 && bias.dim(0) == Cout, "conv2d: bias shape mismatch");

  const std::int64_t HW = static_cast<std::int64_t>(H) * W;
  const int K = Cin * kh * kw;
  Tensor y({B, Cout, H, W});
  double* ys = y.data();
  const double* xs = x.data();
  const double* ws = w.data();
  const bool one_by_one = (kh == 1 && kw == 1);

  if (!one_by_one) {
    auto& col = detail::scratch_buffer();
    col.resize(static_cast<size_t>(K) * HW);
    for (int b = 0; b < B; ++b) {
      detail::im2col(xs + static_cast<std::int64_t>(b) * Cin * HW, col.data(), Cin, H, W, kh, kw);
      double* yb = ys + static_cast<std::int64_t>(b) * Cout * HW;
      std::fill(yb, yb + static_cast<std::int64_t>(Cout) * HW, 0.0);
      detail::gemm_acc(ws, col.data(), yb, Cout, K, static_cast<int>(HW));
    }
  } else {
    for (int b = 0; b < B; ++b) {
      const double* xb = xs + static_cast<std::int64_t>(b) * Cin * HW;
      double* yb = ys + static_cast<std::int64_t>(b) * Cout * HW;
      std::fill(yb, yb + static_cast<std::int64_t>(Cout) * HW, 0.0);
      detail::gemm_acc(ws, xb, yb, Cout, Cin, static_cast<int>(HW));
    }
  }
  if (has_bias) {
    const double* bs = bias.data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < Cout; ++c) {
        double* p = ys + (static_cast<std::int64_t>(b) * Cout + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) p[i] += bs[c];
      }
  }

  const bool rec = Tape::active() &&
                   (x.requires_grad() || w.requires_grad() || (has_bias && bias.requires_grad()));
  if (rec) {
    y.set_requires_grad(true);
    Tape::active()->record([x, w, bias, y, B, Cin, Cout, H, W, kh, kw, K, HW, has_bias,
                            one_by_one]() mutable {
      Tensor xm = x, wm = w, ym = y;
      const double* g = ym.grad();
      const double* xs2 = xm.data();
      const double* ws2 = wm.data();
      double* gx = xm.requires_grad() ? xm.grad() : nullptr;
      double* gw = wm.requires_grad() ? wm.grad() : nullptr;
      double* gb = nullptr;
      Tensor bm = bias;
      if (has_bias && bm.requires_grad()) gb = bm.grad();

      if (gb) {
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < Cout; ++c) {
            const double* p = g + (static_cast<std::int64_t>(b) * Cout + c) * HW;
            double acc = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
            gb[c] += acc;
          }
      }
      if (one_by_one) {
        for (int b = 0; b < B; ++b) {
          const double* gyb = g + static_cast<std::int64_t>(b) * Cout * HW;
          const double* xb = xs2 + static_cast<std::int64_t>(b) * Cin * HW;
          if (gw) detail::gemm_nt_acc(gyb, xb, gw, Cout, static_cast<int>(HW), Cin);
          if (gx)
            detail::gemm_tn_acc(ws2, gyb, gx + static_cast<std::int64_t>(b) * Cin * HW, Cout,
                                Cin, static_cast<int>(HW));
        }
        return;
      }
      std::vector<double> col(static_cast<size_t>(K) * HW);
      std::vector<double> gcol;
      if (gx) gcol.resize(static_cast<size_t>(K) * HW);
      for (int b = 0; b < B; ++b) {
        const double* gyb = g + static_cast<std::int64_t>(b) * Cout * HW;
        detail::im2col(xs2 + static_cast<std::int64_t>(b) * Cin * HW, col.data(), Cin, H, W, kh,
                       kw);
        if (gw) detail::gemm_nt_acc(gyb, col.data(), gw, Cout, static_cast<int>(HW), K);
        if (gx) {
          std::fill(gcol.begin(), gcol.end(), 0.0);
          detail::gemm_tn_acc(ws2, gyb, gcol.data(), Cout, K, static_cast<int>(HW));
          detail::col2im_acc(gcol.data(), gx + static_cast<std::int64_t>(b) * Cin * HW, Cin, H,
                             W, kh, kw);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Per-site channel mixing: y[b,:,h,w] = W x[b,:,h,w]
// ---------------------------------------------------------------------------

inline Tensor channel_matmul(const Tensor& x, const Tensor& W) {
  detail::check_bchw(x, "channel_matmul");
  const int B = x.dim(0), C = x.dim(1);
  check(W.rank() == 2 && W.dim(0) == C && W.dim(1) == C,
        "channel_matmul: weight must be [C,C] with C=" + std::to_string(C));
  const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor y(x.shape());
  const double* xs = x.data();
  const double* ws = W.data();
  double* ys = y.data();
  for (int b = 0; b < B; ++b) {
    double* yb = ys + static_cast<std::int64_t>(b) * C * HW;
    std::fill(yb, yb + C * HW, 0.0);
    detail::gemm_acc(ws, xs + static_cast<std::int64_t>(b) * C * HW, yb, C, C,
                     static_cast<int>(HW));
  }
  if (tracing(x, W)) {
    y.set_requires_grad(true);
    Tape::active()->record([x, W, y, B, C, HW]() mutable {
      Tensor xm = x, wm = W, ym = y;
      const double* g = ym.grad();
      const double* xs2 = xm.data();
      const double* ws2 = wm.data();
      double* gx = xm.requires_grad() ? xm.grad() : nullptr;
      double* gw = wm.requires_grad() ? wm.grad() : nullptr;
      for (int b = 0; b < B; ++b) {
        const double* gyb = g + static_cast<std::int64_t>(b) * C * HW;
        const double* xb = xs2 + static_cast<std::int64_t>(b) * C * HW;
        if (gw) detail::gemm_nt_acc(gyb, xb, gw, C, static_cast<int>(HW), C);
        if (gx)
          detail::gemm_tn_acc(ws2, gyb, gx + static_cast<std::int64_t>(b) * C * HW, C, C,
                              static_cast<int>(HW));
      }
    });
  }
  return y;
}

}  // namespace marscf
