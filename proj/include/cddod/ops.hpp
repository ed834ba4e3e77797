#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "cddod/graph.hpp"
#include "cddod/rng.hpp"
#include "cddod/tensor.hpp"

namespace cddod {

// Probabilities are clamped to [kProbEps, 1 - kProbEps] before any log.
inline constexpr double kProbEps = 1e-7;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace detail {

inline std::vector<double>& scratch_a() {
  thread_local std::vector<double> buf;
  return buf;
}
inline std::vector<double>& scratch_b() {
  thread_local std::vector<double> buf;
  return buf;
}

// col is (C*K*K) x (Hout*Wout), row-major, for one sample.
inline void im2col(const double* x, int C, int H, int W, int K, int stride, int pad, int dil, int Hout, int Wout,
                   double* col) {
  const int64_t plane = static_cast<int64_t>(Hout) * Wout;
  for (int c = 0; c < C; ++c) {
    const double* xc = x + static_cast<int64_t>(c) * H * W;
    for (int ki = 0; ki < K; ++ki) {
      for (int kj = 0; kj < K; ++kj) {
        double* row = col + ((static_cast<int64_t>(c) * K + ki) * K + kj) * plane;
        for (int oh = 0; oh < Hout; ++oh) {
          const int ih = oh * stride - pad + ki * dil;
          double* dst = row + static_cast<int64_t>(oh) * Wout;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wout, 0.0);
            continue;
          }
          const double* src = xc + static_cast<int64_t>(ih) * W;
          for (int ow = 0; ow < Wout; ++ow) {
            const int iw = ow * stride - pad + kj * dil;
            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, int C, int H, int W, int K, int stride, int pad, int dil, int Hout, int Wout,
                       double* dx) {
  const int64_t plane = static_cast<int64_t>(Hout) * Wout;
  for (int c = 0; c < C; ++c) {
    double* xc = dx + static_cast<int64_t>(c) * H * W;
    for (int ki = 0; ki < K; ++ki) {
      for (int kj = 0; kj < K; ++kj) {
        const double* row = col + ((static_cast<int64_t>(c) * K + ki) * K + kj) * plane;
        for (int oh = 0; oh < Hout; ++oh) {
          const int ih = oh * stride - pad + ki * dil;
          if (ih < 0 || ih >= H) continue;
          const double* src = row + static_cast<int64_t>(oh) * Wout;
          double* dst = xc + static_cast<int64_t>(ih) * W;
          for (int ow = 0; ow < Wout; ++ow) {
            const int iw = ow * stride - pad + kj * dil;
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename Fwd, typename Bwd>
Value unary_elementwise(Value x, Fwd fwd, Bwd bwd_factor) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  Tensor out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = fwd(xv[i]);
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(x.id), [xid, oid, bwd_factor](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const Tensor& dy = gg.grad_buf(oid);
    const Tensor& xv2 = gg.val(xid);
    const Tensor& yv = gg.val(oid);
    Tensor& dx = gg.grad_buf(xid);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * bwd_factor(xv2[i], yv[i]);
  });
  return Value{&g, oid};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

inline Value add(Value a, Value b) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  check(av.shape == bv.shape, "add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  const int aid = a.id, bid = b.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(aid) || g.needs_grad(bid), [aid, bid, oid](Graph& gg) {
    const Tensor& dy = gg.grad_buf(oid);
    if (gg.needs_grad(aid)) {
      Tensor& da = gg.grad_buf(aid);
      for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
    }
    if (gg.needs_grad(bid)) {
      Tensor& db = gg.grad_buf(bid);
      for (int64_t i = 0; i < dy.numel(); ++i) db[i] += dy[i];
    }
  });
  return Value{&g, oid};
}

inline Value sub(Value a, Value b) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  check(av.shape == bv.shape, "sub: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
  const int aid = a.id, bid = b.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(aid) || g.needs_grad(bid), [aid, bid, oid](Graph& gg) {
    const Tensor& dy = gg.grad_buf(oid);
    if (gg.needs_grad(aid)) {
      Tensor& da = gg.grad_buf(aid);
      for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
    }
    if (gg.needs_grad(bid)) {
      Tensor& db = gg.grad_buf(bid);
      for (int64_t i = 0; i < dy.numel(); ++i) db[i] -= dy[i];
    }
  });
  return Value{&g, oid};
}

inline Value mul(Value a, Value b) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  check(av.shape == bv.shape, "mul: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
  const int aid = a.id, bid = b.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(aid) || g.needs_grad(bid), [aid, bid, oid](Graph& gg) {
    const Tensor& dy = gg.grad_buf(oid);
    const Tensor& av2 = gg.val(aid);
    const Tensor& bv2 = gg.val(bid);
    if (gg.needs_grad(aid)) {
      Tensor& da = gg.grad_buf(aid);
      for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * bv2[i];
    }
    if (gg.needs_grad(bid)) {
      Tensor& db = gg.grad_buf(bid);
      for (int64_t i = 0; i < dy.numel(); ++i) db[i] += dy[i] * av2[i];
    }
  });
  return Value{&g, oid};
}

inline Value scale(Value x, double c) {
  return detail::unary_elementwise(
      x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Value neg(Value x) { return scale(x, -1.0); }

inline Value log(Value x) {
  return detail::unary_elementwise(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Value pow_const(Value x, double p) {
  return detail::unary_elementwise(
      x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

inline Value clamp(Value x, double lo, double hi) {
  return detail::unary_elementwise(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

inline Value relu(Value x) {
  return detail::unary_elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Value sigmoid(Value x) {
  return detail::unary_elementwise(
      x, [](double v) { return sigmoid_scalar(v); }, [](double, double y) { return y * (1.0 - y); });
}

/// Softmax over axis 1 of an NxC or NxCxHxW tensor; each class column sums to
/// 1 over the channel axis.
inline Value softmax_channels(Value x) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  check(xv.ndim() == 2 || xv.ndim() == 4, "softmax_channels: expected NxC or NxCxHxW, got " + shape_str(xv.shape));
  const int N = xv.dim(0), C = xv.dim(1);
  const int64_t inner = xv.ndim() == 4 ? static_cast<int64_t>(xv.dim(2)) * xv.dim(3) : 1;
  Tensor out(xv.shape);
  for (int n = 0; n < N; ++n) {
    for (int64_t k = 0; k < inner; ++k) {
      const int64_t base = static_cast<int64_t>(n) * C * inner + k;
      double mx = xv[base];
      for (int c = 1; c < C; ++c) mx = std::max(mx, xv[base + c * inner]);
      double sum = 0.0;
      for (int c = 0; c < C; ++c) {
        const double e = std::exp(xv[base + c * inner] - mx);
        out[base + c * inner] = e;
        sum += e;
      }
      for (int c = 0; c < C; ++c) out[base + c * inner] /= sum;
    }
  }
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(xid), [xid, oid, N, C, inner](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const Tensor& dy = gg.grad_buf(oid);
    const Tensor& y = gg.val(oid);
    Tensor& dx = gg.grad_buf(xid);
    for (int n = 0; n < N; ++n) {
      for (int64_t k = 0; k < inner; ++k) {
        const int64_t base = static_cast<int64_t>(n) * C * inner + k;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += dy[base + c * inner] * y[base + c * inner];
        for (int c = 0; c < C; ++c) dx[base + c * inner] += y[base + c * inner] * (dy[base + c * inner] - dot);
      }
    }
  });
  return Value{&g, oid};
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

inline Value reshape(Value x, Shape s) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  check(numel_of(s) == xv.numel(), "reshape: element count mismatch " + shape_str(xv.shape) + " -> " + shape_str(s));
  Tensor out(std::move(s));
  out.data = xv.data;
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(xid), [xid, oid](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const Tensor& dy = gg.grad_buf(oid);
    Tensor& dx = gg.grad_buf(xid);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
  });
  return Value{&g, oid};
}

/// Stacks R vectors (each [F] or [1,F]) into an [R,F] matrix.
inline Value stack_rows(const std::vector<Value>& rows) {
  check(!rows.empty(), "stack_rows: no rows");
  Graph& g = *rows[0].g;
  const int64_t F = g.val(rows[0].id).numel();
  const int R = static_cast<int>(rows.size());
  Tensor out(Shape{R, static_cast<int>(F)});
  bool rg = false;
  std::vector<int> ids(rows.size());
  for (int r = 0; r < R; ++r) {
    const Tensor& rv = g.val(rows[static_cast<size_t>(r)].id);
    check(rv.numel() == F, "stack_rows: row " + std::to_string(r) + " has " + std::to_string(rv.numel()) +
                               " elements, expected " + std::to_string(F));
    std::copy(rv.data.begin(), rv.data.end(), out.data.begin() + static_cast<int64_t>(r) * F);
    ids[static_cast<size_t>(r)] = rows[static_cast<size_t>(r)].id;
    rg = rg || g.needs_grad(rows[static_cast<size_t>(r)].id);
  }
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), rg, [ids, oid, F](Graph& gg) {
    const Tensor& dy = gg.grad_buf(oid);
    for (size_t r = 0; r < ids.size(); ++r) {
      if (!gg.needs_grad(ids[r])) continue;
      Tensor& dr = gg.grad_buf(ids[r]);
      const double* src = dy.data.data() + static_cast<int64_t>(r) * F;
      for (int64_t i = 0; i < F; ++i) dr[i] += src[i];
    }
  });
  return Value{&g, oid};
}

/// out[k] = x.data[idx[k]], reshaped to out_shape. Backward scatter-adds.
inline Value gather(Value x, std::vector<int64_t> idx, Shape out_shape) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  check(numel_of(out_shape) == static_cast<int64_t>(idx.size()), "gather: out_shape does not match index count");
  Tensor out(std::move(out_shape));
  for (size_t k = 0; k < idx.size(); ++k) {
    check(idx[k] >= 0 && idx[k] < xv.numel(), "gather: index out of range");
    out[static_cast<int64_t>(k)] = xv[idx[k]];
  }
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(xid), [xid, oid, idx = std::move(idx)](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const Tensor& dy = gg.grad_buf(oid);
    Tensor& dx = gg.grad_buf(xid);
    for (size_t k = 0; k < idx.size(); ++k) dx[idx[k]] += dy[static_cast<int64_t>(k)];
  });
  return Value{&g, oid};
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Value sum_all(Value x) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  double s = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(Tensor::scalar(s), g.needs_grad(xid), [xid, oid](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const double d = gg.grad_buf(oid).data[0];
    Tensor& dx = gg.grad_buf(xid);
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += d;
  });
  return Value{&g, oid};
}

inline Value mean_all(Value x) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const int64_t n = xv.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += xv[i];
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(Tensor::scalar(s / static_cast<double>(n)), g.needs_grad(xid), [xid, oid, n](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const double d = gg.grad_buf(oid).data[0] / static_cast<double>(n);
    Tensor& dx = gg.grad_buf(xid);
    for (int64_t i = 0; i < n; ++i) dx[i] += d;
  });
  return Value{&g, oid};
}

// ---------------------------------------------------------------------------
// neural-net ops
// ---------------------------------------------------------------------------

inline Value conv2d(Value x, Value w, Value b, int stride, int padding, int dilation = 1) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const Tensor& wv = g.val(w.id);
  const Tensor& bv = g.val(b.id);
  check(xv.ndim() == 4, "conv2d: input must be NCHW, got " + shape_str(xv.shape));
  check(wv.ndim() == 4 && wv.dim(2) == wv.dim(3), "conv2d: weight must be OIKK, got " + shape_str(wv.shape));
  check(stride >= 1 && dilation >= 1 && padding >= 0, "conv2d: bad stride/padding/dilation");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int O = wv.dim(0), K = wv.dim(2);
  check(wv.dim(1) == C, "conv2d: input channels (" + std::to_string(C) + ") do not match weight channels (" +
                            std::to_string(wv.dim(1)) + ")");
  check(bv.ndim() == 1 && bv.dim(0) == O, "conv2d: bias must be [O], got " + shape_str(bv.shape));
  const int ext = dilation * (K - 1) + 1;
  check(H + 2 * padding >= ext && W + 2 * padding >= ext,
        "conv2d: spatial dims " + shape_str({H, W}) + " too small for kernel extent " + std::to_string(ext));
  const int Hout = (H + 2 * padding - dilation * (K - 1) - 1) / stride + 1;
  const int Wout = (W + 2 * padding - dilation * (K - 1) - 1) / stride + 1;

  const int64_t ckk = static_cast<int64_t>(C) * K * K;
  const int64_t plane = static_cast<int64_t>(Hout) * Wout;
  Tensor out(Shape{N, O, Hout, Wout});
  std::vector<double>& col = detail::scratch_a();
  col.resize(static_cast<size_t>(ckk * plane));
  CMapRM Wm(wv.data.data(), O, ckk);
  for (int n = 0; n < N; ++n) {
    detail::im2col(xv.data.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, K, stride, padding, dilation, Hout,
                   Wout, col.data());
    CMapRM colm(col.data(), ckk, plane);
    MapRM Ym(out.data.data() + static_cast<int64_t>(n) * O * plane, O, plane);
    Ym.noalias() = Wm * colm;
    for (int o = 0; o < O; ++o) Ym.row(o).array() += bv[o];
  }

  const int xid = x.id, wid = w.id, bid = b.id;
  const int oid = static_cast<int>(g.size());
  const bool rg = g.needs_grad(xid) || g.needs_grad(wid) || g.needs_grad(bid);
  g.emit(std::move(out), rg, [=](Graph& gg) {
    const Tensor& dy = gg.grad_buf(oid);
    const Tensor& xv2 = gg.val(xid);
    const Tensor& wv2 = gg.val(wid);
    std::vector<double>& col2 = detail::scratch_a();
    std::vector<double>& dcol = detail::scratch_b();
    for (int n = 0; n < N; ++n) {
      CMapRM dYm(dy.data.data() + static_cast<int64_t>(n) * O * plane, O, plane);
      if (gg.needs_grad(bid)) {
        Tensor& db = gg.grad_buf(bid);
        for (int o = 0; o < O; ++o) db[o] += dYm.row(o).sum();
      }
      if (gg.needs_grad(wid)) {
        col2.resize(static_cast<size_t>(ckk * plane));
        detail::im2col(xv2.data.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, K, stride, padding, dilation,
                       Hout, Wout, col2.data());
        CMapRM colm(col2.data(), ckk, plane);
        MapRM dWm(gg.grad_buf(wid).data.data(), O, ckk);
        dWm.noalias() += dYm * colm.transpose();
      }
      if (gg.needs_grad(xid)) {
        dcol.resize(static_cast<size_t>(ckk * plane));
        MapRM dcolm(dcol.data(), ckk, plane);
        CMapRM Wm2(wv2.data.data(), O, ckk);
        dcolm.noalias() = Wm2.transpose() * dYm;
        detail::col2im_add(dcol.data(), C, H, W, K, stride, padding, dilation, Hout, Wout,
                           gg.grad_buf(xid).data.data() + static_cast<int64_t>(n) * C * H * W);
      }
    }
  });
  return Value{&g, oid};
}

/// Nearest-neighbour 2x upsampling: every input pixel becomes a 2x2 block.
inline Value upsample_nearest2x(Value x) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  check(xv.ndim() == 4, "upsample_nearest2x: input must be NCHW, got " + shape_str(xv.shape));
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor out(Shape{N, C, 2 * H, 2 * W});
  for (int nc = 0; nc < N * C; ++nc) {
    const double* src = xv.data.data() + static_cast<int64_t>(nc) * H * W;
    double* dst = out.data.data() + static_cast<int64_t>(nc) * 4 * H * W;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const double v = src[static_cast<int64_t>(i) * W + j];
        double* d0 = dst + (static_cast<int64_t>(2 * i) * 2 * W + 2 * j);
        d0[0] = v;
        d0[1] = v;
        d0[2 * W] = v;
        d0[2 * W + 1] = v;
      }
    }
  }
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(xid), [xid, oid, N, C, H, W](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const Tensor& dy = gg.grad_buf(oid);
    Tensor& dx = gg.grad_buf(xid);
    for (int nc = 0; nc < N * C; ++nc) {
      const double* src = dy.data.data() + static_cast<int64_t>(nc) * 4 * H * W;
      double* dst = dx.data.data() + static_cast<int64_t>(nc) * H * W;
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          const double* s0 = src + (static_cast<int64_t>(2 * i) * 2 * W + 2 * j);
          dst[static_cast<int64_t>(i) * W + j] += s0[0] + s0[1] + s0[2 * W] + s0[2 * W + 1];
        }
      }
    }
  });
  return Value{&g, oid};
}

/// Affine map: x [N,F], w [G,F], b [G] -> [N,G].
inline Value linear(Value x, Value w, Value b) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const Tensor& wv = g.val(w.id);
  const Tensor& bv = g.val(b.id);
  check(xv.ndim() == 2 && wv.ndim() == 2, "linear: expected 2-d input and weight");
  const int N = xv.dim(0), F = xv.dim(1), G = wv.dim(0);
  check(wv.dim(1) == F,
        "linear: input features (" + std::to_string(F) + ") do not match weight (" + std::to_string(wv.dim(1)) + ")");
  check(bv.ndim() == 1 && bv.dim(0) == G, "linear: bias must be [G], got " + shape_str(bv.shape));
  Tensor out(Shape{N, G});
  CMapRM Xm(xv.data.data(), N, F);
  CMapRM Wm(wv.data.data(), G, F);
  MapRM Ym(out.data.data(), N, G);
  Ym.noalias() = Xm * Wm.transpose();
  for (int n = 0; n < N; ++n)
    for (int j = 0; j < G; ++j) out.at2(n, j) += bv[j];
  const int xid = x.id, wid = w.id, bid = b.id;
  const int oid = static_cast<int>(g.size());
  const bool rg = g.needs_grad(xid) || g.needs_grad(wid) || g.needs_grad(bid);
  g.emit(std::move(out), rg, [=](Graph& gg) {
    const Tensor& dy = gg.grad_buf(oid);
    CMapRM dYm(dy.data.data(), N, G);
    if (gg.needs_grad(xid)) {
      CMapRM Wm2(gg.val(wid).data.data(), G, F);
      MapRM dXm(gg.grad_buf(xid).data.data(), N, F);
      dXm.noalias() += dYm * Wm2;
    }
    if (gg.needs_grad(wid)) {
      CMapRM Xm2(gg.val(xid).data.data(), N, F);
      MapRM dWm(gg.grad_buf(wid).data.data(), G, F);
      dWm.noalias() += dYm.transpose() * Xm2;
    }
    if (gg.needs_grad(bid)) {
      Tensor& db = gg.grad_buf(bid);
      for (int n = 0; n < N; ++n)
        for (int j = 0; j < G; ++j) db[j] += dy.at2(n, j);
    }
  });
  return Value{&g, oid};
}

/// Inverted dropout: kept units scaled by 1/(1-rate) during training,
/// identity in inference. rate==0 or training==false return the input
/// untouched without consuming randomness.
inline Value dropout(Value x, double rate, bool training, std::mt19937_64& rng) {
  check(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factor(static_cast<size_t>(xv.numel()));
  Tensor out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) {
    const double f = uniform(rng) >= rate ? keep_scale : 0.0;
    factor[static_cast<size_t>(i)] = f;
    out[i] = xv[i] * f;
  }
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(xid), [xid, oid, factor = std::move(factor)](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const Tensor& dy = gg.grad_buf(oid);
    Tensor& dx = gg.grad_buf(xid);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * factor[static_cast<size_t>(i)];
  });
  return Value{&g, oid};
}

/// Gradient reversal: forward is the bitwise identity, backward multiplies
/// the upstream gradient by -1 exactly.
inline Value grad_reverse(Value x) {
  Graph& g = *x.g;
  Tensor out = g.val(x.id);
  const int xid = x.id;
  const int oid = static_cast<int>(g.size());
  g.emit(std::move(out), g.needs_grad(xid), [xid, oid](Graph& gg) {
    if (!gg.needs_grad(xid)) return;
    const Tensor& dy = gg.grad_buf(oid);
    Tensor& dx = gg.grad_buf(xid);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] -= dy[i];
  });
  return Value{&g, oid};
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy of probabilities against {0,1} targets.
inline Value bce_loss(Value probs, const Tensor& targets) {
  Graph& g = *probs.g;
  const Tensor& pv = g.val(probs.id);
  check(pv.shape == targets.shape, "bce_loss: target shape mismatch");
  for (double t : targets.data) check(t == 0.0 || t == 1.0, "bce_loss: targets must be 0 or 1");
  const int64_t n = pv.numel();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double p = std::min(std::max(pv[i], kProbEps), 1.0 - kProbEps);
    const double t = targets[i];
    loss -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  const int pid = probs.id;
  const int oid = static_cast<int>(g.size());
  g.emit(Tensor::scalar(loss / static_cast<double>(n)), g.needs_grad(pid),
         [pid, oid, n, targets](Graph& gg) {
           if (!gg.needs_grad(pid)) return;
           const double d = gg.grad_buf(oid).data[0] / static_cast<double>(n);
           const Tensor& pv2 = gg.val(pid);
           Tensor& dp = gg.grad_buf(pid);
           for (int64_t i = 0; i < n; ++i) {
             const double p = pv2[i];
             if (p <= kProbEps || p >= 1.0 - kProbEps) continue;  // clamp active: flat
             dp[i] += d * (p - targets[i]) / (p * (1.0 - p));
           }
         });
  return Value{&g, oid};
}

/// Mean negative log-likelihood of the true class. probs is [N,C] with
/// `targets.size()==N`, or [N,C,H,W] with targets in (n,h,w) row-major order.
inline Value ce_loss(Value probs, const std::vector<int>& targets) {
  Graph& g = *probs.g;
  const Tensor& pv = g.val(probs.id);
  check(pv.ndim() == 2 || pv.ndim() == 4, "ce_loss: expected NxC or NxCxHxW, got " + shape_str(pv.shape));
  const int N = pv.dim(0), C = pv.dim(1);
  check(C >= 2, "ce_loss: need at least 2 classes");
  const int64_t inner = pv.ndim() == 4 ? static_cast<int64_t>(pv.dim(2)) * pv.dim(3) : 1;
  const int64_t M = static_cast<int64_t>(N) * inner;
  check(static_cast<int64_t>(targets.size()) == M, "ce_loss: expected " + std::to_string(M) + " targets, got " +
                                                       std::to_string(targets.size()));
  std::vector<int64_t> flat(targets.size());
  double loss = 0.0;
  for (int64_t m = 0; m < M; ++m) {
    const int t = targets[static_cast<size_t>(m)];
    check(t >= 0 && t < C, "ce_loss: class index " + std::to_string(t) + " out of range [0," + std::to_string(C) + ")");
    const int64_t nidx = m / inner, k = m % inner;
    const int64_t fi = (nidx * C + t) * inner + k;
    flat[static_cast<size_t>(m)] = fi;
    loss -= std::log(std::max(pv[fi], kProbEps));
  }
  const int pid = probs.id;
  const int oid = static_cast<int>(g.size());
  g.emit(Tensor::scalar(loss / static_cast<double>(M)), g.needs_grad(pid),
         [pid, oid, M, flat = std::move(flat)](Graph& gg) {
           if (!gg.needs_grad(pid)) return;
           const double d = gg.grad_buf(oid).data[0] / static_cast<double>(M);
           const Tensor& pv2 = gg.val(pid);
           Tensor& dp = gg.grad_buf(pid);
           for (int64_t m = 0; m < M; ++m) {
             const double p = pv2[flat[static_cast<size_t>(m)]];
             if (p <= kProbEps) continue;
             dp[flat[static_cast<size_t>(m)]] += -d / p;
           }
         });
  return Value{&g, oid};
}

/// Weighted smooth-L1: (1/normalizer) * sum_i w_i * rho(pred_i - target_i)
/// with rho(u) = u^2/2 for |u|<1 and |u|-1/2 otherwise.
inline Value smooth_l1(Value pred, const Tensor& target, const Tensor& weights, double normalizer) {
  Graph& g = *pred.g;
  const Tensor& pv = g.val(pred.id);
  check(pv.shape == target.shape && pv.shape == weights.shape, "smooth_l1: shape mismatch");
  check(normalizer > 0.0, "smooth_l1: normalizer must be positive");
  double loss = 0.0;
  for (int64_t i = 0; i < pv.numel(); ++i) {
    const double u = pv[i] - target[i];
    const double a = std::abs(u);
    loss += weights[i] * (a < 1.0 ? 0.5 * u * u : a - 0.5);
  }
  const int pid = pred.id;
  const int oid = static_cast<int>(g.size());
  g.emit(Tensor::scalar(loss / normalizer), g.needs_grad(pid), [pid, oid, normalizer, target, weights](Graph& gg) {
    if (!gg.needs_grad(pid)) return;
    const double d = gg.grad_buf(oid).data[0] / normalizer;
    const Tensor& pv2 = gg.val(pid);
    Tensor& dp = gg.grad_buf(pid);
    for (int64_t i = 0; i < pv2.numel(); ++i) {
      const double u = pv2[i] - target[i];
      dp[i] += d * weights[i] * (std::abs(u) < 1.0 ? u : (u > 0.0 ? 1.0 : -1.0));
    }
  });
  return Value{&g, oid};
}

}  // namespace cddod
