#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "curlip/errors.hpp"
#include "curlip/rng.hpp"
#include "curlip/tensor.hpp"

namespace curlip {

namespace detail {

// c(M,N) += a(M,K) * b(K,N)
template <typename T>
void mm_nn_acc(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const T* arow = a + i * K;
    T* crow = c + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const T aik = arow[k];
      const T* brow = b + k * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c(M,N) += a(M,K) * b(N,K)^T
template <typename T>
void mm_nt_acc(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const T* arow = a + i * K;
    T* crow = c + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const T* brow = b + j * K;
      T acc = T(0);
      for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

// c(K,N) += a(M,K)^T * b(M,N)
template <typename T>
void mm_tn_acc(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const T* arow = a + i * K;
    const T* brow = b + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const T aik = arow[k];
      T* crow = c + k * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
    }
  }
}

inline Shape drop_batch(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace detail

// Reverse-mode tape. Each op appends a node holding the forward value and a
// closure that scatters the node's gradient into its inputs. Gradients are
// allocated lazily so forward-only evaluation costs no extra memory.
template <typename T>
class Tape {
 public:
  struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  // ---- leaves -------------------------------------------------------------

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, nullptr);
  }
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& val(Var v) const { return node(v.id).value; }

  // Gradient of a node; zeros if backward never reached it.
  Tensor<T> grad(Var v) const {
    const Node& n = node(v.id);
    if (n.grad.empty()) return Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  double scalar(Var v) const {
    const Tensor<T>& t = val(v);
    if (t.numel() != 1) throw ShapeMismatch("scalar() on tensor of shape " + shape_str(t.shape()));
    return (double)t.at(0);
  }

  // ---- elementwise --------------------------------------------------------

  Var add(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    require(av.same_shape(bv), "add", av.shape(), bv.shape());
    Tensor<T> y = av;
    y.add_(bv);
    return push(std::move(y), rg(a) || rg(b), [a, b](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      t.acc(a, up);
      t.acc(b, up);
    });
  }

  Var mul(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    require(av.same_shape(bv), "mul", av.shape(), bv.shape());
    Tensor<T> y(av.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y.at(i) = av.at(i) * bv.at(i);
    return push(std::move(y), rg(a) || rg(b), [a, b](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const auto& av2 = t.val(a);
      const auto& bv2 = t.val(b);
      if (t.rg(a)) {
        Tensor<T> g(av2.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g.at(i) = up.at(i) * bv2.at(i);
        t.acc(a, g);
      }
      if (t.rg(b)) {
        Tensor<T> g(bv2.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g.at(i) = up.at(i) * av2.at(i);
        t.acc(b, g);
      }
    });
  }

  Var scale(Var x, double c) {
    const auto& xv = val(x);
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y.at(i) = (T)(xv.at(i) * (T)c);
    return push(std::move(y), rg(x), [x, c](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(up.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g.at(i) = (T)(up.at(i) * (T)c);
      t.acc(x, g);
    });
  }

  Var add_scalar(Var x, double c) {
    const auto& xv = val(x);
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y.at(i) = (T)(xv.at(i) + (T)c);
    return push(std::move(y), rg(x), [x](Tape& t, int32_t self) {
      t.acc(x, t.node(self).grad);
    });
  }

  Var relu(Var x) {
    const auto& xv = val(x);
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < y.numel(); ++i) {
      const bool pos = xv.at(i) > T(0);
      sign_hash_ = (sign_hash_ ^ (uint64_t)pos) * 1099511628211ULL;
      y.at(i) = pos ? xv.at(i) : T(0);
    }
    return push(std::move(y), rg(x), [x](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const auto& xv2 = t.val(x);
      Tensor<T> g(xv2.shape());
      // gradient at exactly 0 is defined as 0
      for (int64_t i = 0; i < g.numel(); ++i) g.at(i) = xv2.at(i) > T(0) ? up.at(i) : T(0);
      t.acc(x, g);
    });
  }

  Var gelu(Var x) {
    const auto& xv = val(x);
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < y.numel(); ++i) {
      const double v = (double)xv.at(i);
      y.at(i) = (T)(0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)));
    }
    return push(std::move(y), rg(x), [x](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const auto& xv2 = t.val(x);
      Tensor<T> g(xv2.shape());
      constexpr double kInvSqrt2Pi = 0.3989422804014327;
      for (int64_t i = 0; i < g.numel(); ++i) {
        const double v = (double)xv2.at(i);
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        g.at(i) = (T)((double)up.at(i) * (cdf + v * pdf));
      }
      t.acc(x, g);
    });
  }

  // ---- matmul family ------------------------------------------------------

  // a(M,K) x b(K,N), or batched a(Bt,M,K) x b(Bt,K,N).
  Var matmul(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.rank() == 2 && bv.rank() == 2) {
      require(av.dim(1) == bv.dim(0), "matmul", av.shape(), bv.shape());
      const int64_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
      Tensor<T> y({M, N});
      detail::mm_nn_acc(av.data(), bv.data(), y.data(), M, K, N);
      return push(std::move(y), rg(a) || rg(b), [a, b, M, K, N](Tape& t, int32_t self) {
        const Tensor<T>& up = t.node(self).grad;
        if (t.rg(a)) {
          Tensor<T> g({M, K});
          detail::mm_nt_acc(up.data(), t.val(b).data(), g.data(), M, N, K);
          t.acc(a, g);
        }
        if (t.rg(b)) {
          Tensor<T> g({K, N});
          detail::mm_tn_acc(t.val(a).data(), up.data(), g.data(), M, K, N);
          t.acc(b, g);
        }
      });
    }
    require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(1),
            "matmul", av.shape(), bv.shape());
    const int64_t Bt = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(2);
    Tensor<T> y({Bt, M, N});
    for (int64_t t = 0; t < Bt; ++t)
      detail::mm_nn_acc(av.data() + t * M * K, bv.data() + t * K * N, y.data() + t * M * N, M, K, N);
    return push(std::move(y), rg(a) || rg(b), [a, b, Bt, M, K, N](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      if (t.rg(a)) {
        Tensor<T> g({Bt, M, K});
        for (int64_t u = 0; u < Bt; ++u)
          detail::mm_nt_acc(up.data() + u * M * N, t.val(b).data() + u * K * N,
                            g.data() + u * M * K, M, N, K);
        t.acc(a, g);
      }
      if (t.rg(b)) {
        Tensor<T> g({Bt, K, N});
        for (int64_t u = 0; u < Bt; ++u)
          detail::mm_tn_acc(t.val(a).data() + u * M * K, up.data() + u * M * N,
                            g.data() + u * K * N, M, K, N);
        t.acc(b, g);
      }
    });
  }

  // a(M,K) x b(N,K)^T, or batched; used for attention score and similarity maps.
  Var matmul_nt(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.rank() == 2 && bv.rank() == 2) {
      require(av.dim(1) == bv.dim(1), "matmul_nt", av.shape(), bv.shape());
      const int64_t M = av.dim(0), K = av.dim(1), N = bv.dim(0);
      Tensor<T> y({M, N});
      detail::mm_nt_acc(av.data(), bv.data(), y.data(), M, K, N);
      return push(std::move(y), rg(a) || rg(b), [a, b, M, K, N](Tape& t, int32_t self) {
        const Tensor<T>& up = t.node(self).grad;
        if (t.rg(a)) {
          Tensor<T> g({M, K});
          detail::mm_nn_acc(up.data(), t.val(b).data(), g.data(), M, N, K);
          t.acc(a, g);
        }
        if (t.rg(b)) {
          Tensor<T> g({N, K});
          detail::mm_tn_acc(up.data(), t.val(a).data(), g.data(), M, N, K);
          t.acc(b, g);
        }
      });
    }
    require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2),
            "matmul_nt", av.shape(), bv.shape());
    const int64_t Bt = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(1);
    Tensor<T> y({Bt, M, N});
    for (int64_t t = 0; t < Bt; ++t)
      detail::mm_nt_acc(av.data() + t * M * K, bv.data() + t * N * K, y.data() + t * M * N, M, K, N);
    return push(std::move(y), rg(a) || rg(b), [a, b, Bt, M, K, N](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      if (t.rg(a)) {
        Tensor<T> g({Bt, M, K});
        for (int64_t u = 0; u < Bt; ++u)
          detail::mm_nn_acc(up.data() + u * M * N, t.val(b).data() + u * N * K,
                            g.data() + u * M * K, M, N, K);
        t.acc(a, g);
      }
      if (t.rg(b)) {
        Tensor<T> g({Bt, N, K});
        for (int64_t u = 0; u < Bt; ++u)
          detail::mm_tn_acc(up.data() + u * M * N, t.val(a).data() + u * M * K,
                            g.data() + u * N * K, M, N, K);
        t.acc(b, g);
      }
    });
  }

  // x(..., K) * w(K, N) + b(N). Leading dims are flattened into rows.
  Var linear(Var x, Var w, Var b = Var{}) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    require(wv.rank() == 2 && xv.rank() >= 1 && xv.dim(xv.rank() - 1) == wv.dim(0), "linear",
            xv.shape(), wv.shape());
    const int64_t K = wv.dim(0), N = wv.dim(1);
    const int64_t R = xv.numel() / K;
    Shape out_shape = xv.shape();
    out_shape.back() = N;
    Tensor<T> y(out_shape);
    detail::mm_nn_acc(xv.data(), wv.data(), y.data(), R, K, N);
    if (b.valid()) {
      const auto& bvv = val(b);
      require(bvv.rank() == 1 && bvv.dim(0) == N, "linear bias", bvv.shape(), wv.shape());
      for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < N; ++j) y.at(r * N + j) += bvv.at(j);
    }
    const bool need = rg(x) || rg(w) || (b.valid() && rg(b));
    return push(std::move(y), need, [x, w, b, R, K, N](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      if (t.rg(x)) {
        Tensor<T> g(t.val(x).shape());
        detail::mm_nt_acc(up.data(), t.val(w).data(), g.data(), R, N, K);
        t.acc(x, g);
      }
      if (t.rg(w)) {
        Tensor<T> g({K, N});
        detail::mm_tn_acc(t.val(x).data(), up.data(), g.data(), R, K, N);
        t.acc(w, g);
      }
      if (b.valid() && t.rg(b)) {
        Tensor<T> g({N});
        for (int64_t r = 0; r < R; ++r)
          for (int64_t j = 0; j < N; ++j) g.at(j) += up.at(r * N + j);
        t.acc(b, g);
      }
    });
  }

  // ---- conv / norm / pool -------------------------------------------------

  // 3x3 convolution, stride 1, zero padding 1: spatial dims are preserved.
  // x(B,Cin,H,W), w(Cout,Cin,3,3), optional b(Cout). Blocks that feed straight
  // into batchnorm skip the bias (the affine shift lives in beta).
  Var conv2d(Var x, Var w, Var b = Var{}) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    require(xv.rank() == 4 && wv.rank() == 4 && wv.dim(2) == 3 && wv.dim(3) == 3 &&
                wv.dim(1) == xv.dim(1),
            "conv2d", xv.shape(), wv.shape());
    if (b.valid()) {
      const auto& bv0 = val(b);
      require(bv0.rank() == 1 && bv0.dim(0) == wv.dim(0), "conv2d bias", bv0.shape(), wv.shape());
    }
    const int64_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int64_t Cout = wv.dim(0);
    Tensor<T> y({B, Cout, H, W});
    for (int64_t n = 0; n < B; ++n) {
      for (int64_t co = 0; co < Cout; ++co) {
        T* yc = y.data() + (n * Cout + co) * H * W;
        const T bias = b.valid() ? val(b).at(co) : T(0);
        for (int64_t i = 0; i < H * W; ++i) yc[i] = bias;
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const T* xc = xv.data() + (n * Cin + ci) * H * W;
          const T* wk = wv.data() + (co * Cin + ci) * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const int64_t dy = ky - 1;
            for (int64_t yy = std::max<int64_t>(0, -dy); yy < std::min(H, H - dy); ++yy) {
              T* __restrict yr = yc + yy * W;
              const T* __restrict xr = xc + (yy + dy) * W;
              const T w0 = wk[ky * 3 + 0], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
              if (W == 1) {
                yr[0] += w1 * xr[0];
                continue;
              }
              yr[0] += w1 * xr[0] + w2 * xr[1];
              for (int64_t xx = 1; xx + 1 < W; ++xx)
                yr[xx] += w0 * xr[xx - 1] + w1 * xr[xx] + w2 * xr[xx + 1];
              yr[W - 1] += w0 * xr[W - 2] + w1 * xr[W - 1];
            }
          }
        }
      }
    }
    const bool need = rg(x) || rg(w) || (b.valid() && rg(b));
    return push(std::move(y), need,
                [x, w, b, B, Cin, Cout, H, W](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const auto& xv2 = t.val(x);
      const auto& wv2 = t.val(w);
      const bool nx = t.rg(x), nw = t.rg(w), nb = b.valid() && t.rg(b);
      Tensor<T> gx = nx ? Tensor<T>::zeros(xv2.shape()) : Tensor<T>();
      Tensor<T> gw = nw ? Tensor<T>::zeros(wv2.shape()) : Tensor<T>();
      Tensor<T> gb = nb ? Tensor<T>::zeros({Cout}) : Tensor<T>();
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t co = 0; co < Cout; ++co) {
          const T* uc = up.data() + (n * Cout + co) * H * W;
          if (nb) {
            T s = T(0);
            for (int64_t i = 0; i < H * W; ++i) s += uc[i];
            gb.at(co) += s;
          }
          for (int64_t ci = 0; ci < Cin; ++ci) {
            const T* xc = xv2.data() + (n * Cin + ci) * H * W;
            T* gxc = nx ? gx.data() + (n * Cin + ci) * H * W : nullptr;
            const T* wk = wv2.data() + (co * Cin + ci) * 9;
            T* gwk = nw ? gw.data() + (co * Cin + ci) * 9 : nullptr;
            for (int ky = 0; ky < 3; ++ky) {
              const int64_t dy = ky - 1;
              for (int kx = 0; kx < 3; ++kx) {
                const int64_t dx = kx - 1;
                const int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(H, H - dy);
                const int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min(W, W - dx);
                const T wv9 = wk[ky * 3 + kx];
                T wacc = T(0);
                for (int64_t yy = y0; yy < y1; ++yy) {
                  const T* ur = uc + yy * W;
                  const T* xr = xc + (yy + dy) * W + dx;
                  T* gxr = nx ? gxc + (yy + dy) * W + dx : nullptr;
                  if (nw)
                    for (int64_t xx = x0; xx < x1; ++xx) wacc += ur[xx] * xr[xx];
                  if (nx)
                    for (int64_t xx = x0; xx < x1; ++xx) gxr[xx] += wv9 * ur[xx];
                }
                if (nw) gwk[ky * 3 + kx] += wacc;
              }
            }
          }
        }
      }
      if (nx) t.acc(x, gx);
      if (nw) t.acc(w, gw);
      if (nb) t.acc(b, gb);
    });
  }

  struct BnBatchStats {
    Tensor<T> mean;          // (C)
    Tensor<T> var_biased;    // (C), used for normalization
    Tensor<T> var_unbiased;  // (C), used for the running estimate
  };

  // Batch normalization over axis 1 of a (B,C) or (B,C,H,W) tensor.
  // Training mode normalizes with batch statistics and optionally reports them;
  // inference mode uses the provided running statistics.
  Var batchnorm(Var x, Var gamma, Var beta, const Tensor<T>& running_mean,
                const Tensor<T>& running_var, bool training, double eps = 1e-6,
                BnBatchStats* stats_out = nullptr) {
    const auto& xv = val(x);
    require(xv.rank() == 2 || xv.rank() == 4, "batchnorm input", xv.shape(), {});
    const int64_t C = xv.dim(1);
    const auto& gv = val(gamma);
    const auto& bv = val(beta);
    require(gv.numel() == C && bv.numel() == C, "batchnorm params", gv.shape(), bv.shape());
    const int64_t B = xv.dim(0);
    const int64_t S = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;  // spatial per channel
    const int64_t Nn = B * S;

    Tensor<T> mean({C}), var({C});
    if (training) {
      for (int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (int64_t n = 0; n < B; ++n) {
          const T* p = xv.data() + (n * C + c) * S;
          for (int64_t i = 0; i < S; ++i) s += (double)p[i];
        }
        mean.at(c) = (T)(s / (double)Nn);
      }
      for (int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        const double m = (double)mean.at(c);
        for (int64_t n = 0; n < B; ++n) {
          const T* p = xv.data() + (n * C + c) * S;
          for (int64_t i = 0; i < S; ++i) {
            const double d = (double)p[i] - m;
            s += d * d;
          }
        }
        var.at(c) = (T)(s / (double)Nn);
      }
      if (stats_out) {
        stats_out->mean = mean;
        stats_out->var_biased = var;
        Tensor<T> vu({C});
        const double corr = Nn > 1 ? (double)Nn / (double)(Nn - 1) : 1.0;
        for (int64_t c = 0; c < C; ++c) vu.at(c) = (T)((double)var.at(c) * corr);
        stats_out->var_unbiased = vu;
      }
    } else {
      require(running_mean.numel() == C && running_var.numel() == C, "batchnorm running stats",
              running_mean.shape(), running_var.shape());
      mean = running_mean;
      var = running_var;
    }

    Tensor<T> y(xv.shape());
    for (int64_t n = 0; n < B; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const T inv = (T)(1.0 / std::sqrt((double)var.at(c) + eps));
        const T m = mean.at(c), g = gv.at(c), be = bv.at(c);
        const T* p = xv.data() + (n * C + c) * S;
        T* q = y.data() + (n * C + c) * S;
        for (int64_t i = 0; i < S; ++i) q[i] = g * ((p[i] - m) * inv) + be;
      }

    auto mean_c = std::make_shared<Tensor<T>>(std::move(mean));
    auto var_c = std::make_shared<Tensor<T>>(std::move(var));
    return push(std::move(y), rg(x) || rg(gamma) || rg(beta),
                [x, gamma, beta, mean_c, var_c, training, eps, B, C, S,
                 Nn](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const auto& xv2 = t.val(x);
      const auto& gv2 = t.val(gamma);
      Tensor<T> gg({C}), gb({C});
      Tensor<T> gx = t.rg(x) ? Tensor<T>::zeros(xv2.shape()) : Tensor<T>();
      for (int64_t c = 0; c < C; ++c) {
        const double inv = 1.0 / std::sqrt((double)var_c->at(c) + eps);
        const double m = (double)mean_c->at(c);
        double sum_up = 0.0, sum_up_xhat = 0.0;
        for (int64_t n = 0; n < B; ++n) {
          const T* px = xv2.data() + (n * C + c) * S;
          const T* pu = up.data() + (n * C + c) * S;
          for (int64_t i = 0; i < S; ++i) {
            const double xh = ((double)px[i] - m) * inv;
            sum_up += (double)pu[i];
            sum_up_xhat += (double)pu[i] * xh;
          }
        }
        gb.at(c) = (T)sum_up;
        gg.at(c) = (T)sum_up_xhat;
        if (t.rg(x)) {
          const double gch = (double)gv2.at(c);
          if (training) {
            const double mu_d = sum_up / (double)Nn;          // mean of upstream
            const double mu_dx = sum_up_xhat / (double)Nn;    // mean of upstream*xhat
            for (int64_t n = 0; n < B; ++n) {
              const T* px = xv2.data() + (n * C + c) * S;
              const T* pu = up.data() + (n * C + c) * S;
              T* pg = gx.data() + (n * C + c) * S;
              for (int64_t i = 0; i < S; ++i) {
                const double xh = ((double)px[i] - m) * inv;
                pg[i] = (T)(gch * inv * ((double)pu[i] - mu_d - xh * mu_dx));
              }
            }
          } else {
            for (int64_t n = 0; n < B; ++n) {
              const T* pu = up.data() + (n * C + c) * S;
              T* pg = gx.data() + (n * C + c) * S;
              for (int64_t i = 0; i < S; ++i) pg[i] = (T)(gch * inv * (double)pu[i]);
            }
          }
        }
      }
      if (t.rg(x)) t.acc(x, gx);
      if (t.rg(gamma)) t.acc(gamma, gg);
      if (t.rg(beta)) t.acc(beta, gb);
    });
  }

  // Layer normalization over the last axis.
  Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const auto& xv = val(x);
    const int64_t D = xv.dim(xv.rank() - 1);
    const auto& gv = val(gamma);
    const auto& bv = val(beta);
    require(gv.numel() == D && bv.numel() == D, "layernorm params", gv.shape(), bv.shape());
    const int64_t R = xv.numel() / D;
    Tensor<T> y(xv.shape());
    auto inv_std = std::make_shared<Tensor<T>>(Shape{R});
    auto mean_r = std::make_shared<Tensor<T>>(Shape{R});
    for (int64_t r = 0; r < R; ++r) {
      const T* p = xv.data() + r * D;
      double s = 0.0;
      for (int64_t i = 0; i < D; ++i) s += (double)p[i];
      const double m = s / (double)D;
      double v = 0.0;
      for (int64_t i = 0; i < D; ++i) {
        const double d = (double)p[i] - m;
        v += d * d;
      }
      v /= (double)D;
      const double inv = 1.0 / std::sqrt(v + eps);
      mean_r->at(r) = (T)m;
      inv_std->at(r) = (T)inv;
      T* q = y.data() + r * D;
      for (int64_t i = 0; i < D; ++i)
        q[i] = gv.at(i) * (T)(((double)p[i] - m) * inv) + bv.at(i);
    }
    return push(std::move(y), rg(x) || rg(gamma) || rg(beta),
                [x, gamma, beta, inv_std, mean_r, R, D](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const auto& xv2 = t.val(x);
      const auto& gv2 = t.val(gamma);
      Tensor<T> gg({D}), gb({D});
      Tensor<T> gx = t.rg(x) ? Tensor<T>::zeros(xv2.shape()) : Tensor<T>();
      for (int64_t r = 0; r < R; ++r) {
        const T* px = xv2.data() + r * D;
        const T* pu = up.data() + r * D;
        const double m = (double)mean_r->at(r);
        const double inv = (double)inv_std->at(r);
        double mu_d = 0.0, mu_dx = 0.0;
        for (int64_t i = 0; i < D; ++i) {
          const double xh = ((double)px[i] - m) * inv;
          const double d = (double)pu[i] * (double)gv2.at(i);
          gb.at(i) += pu[i];
          gg.at(i) += (T)((double)pu[i] * xh);
          mu_d += d;
          mu_dx += d * xh;
        }
        mu_d /= (double)D;
        mu_dx /= (double)D;
        if (t.rg(x)) {
          T* pg = gx.data() + r * D;
          for (int64_t i = 0; i < D; ++i) {
            const double xh = ((double)px[i] - m) * inv;
            const double d = (double)pu[i] * (double)gv2.at(i);
            pg[i] = (T)(inv * (d - mu_d - xh * mu_dx));
          }
        }
      }
      if (t.rg(x)) t.acc(x, gx);
      if (t.rg(gamma)) t.acc(gamma, gg);
      if (t.rg(beta)) t.acc(beta, gb);
    });
  }

  // Softmax along one axis.
  Var softmax(Var x, int axis) {
    const auto& xv = val(x);
    const int r = xv.rank();
    if (axis < 0) axis += r;
    require(axis >= 0 && axis < r, "softmax axis", xv.shape(), {});
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= xv.dim(i);
    const int64_t n = xv.dim(axis);
    Tensor<T> y(xv.shape());
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * n * inner + in;
        double mx = -1e300;
        for (int64_t i = 0; i < n; ++i) mx = std::max(mx, (double)xv.at(base + i * inner));
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          const double e = std::exp((double)xv.at(base + i * inner) - mx);
          y.at(base + i * inner) = (T)e;
          s += e;
        }
        const double invs = 1.0 / s;
        for (int64_t i = 0; i < n; ++i) y.at(base + i * inner) = (T)((double)y.at(base + i * inner) * invs);
      }
    return push(std::move(y), rg(x), [x, outer, inner, n](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const Tensor<T>& yv = t.node(self).value;
      Tensor<T> g(yv.shape());
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * n * inner + in;
          double dot = 0.0;
          for (int64_t i = 0; i < n; ++i)
            dot += (double)up.at(base + i * inner) * (double)yv.at(base + i * inner);
          for (int64_t i = 0; i < n; ++i)
            g.at(base + i * inner) =
                (T)((double)yv.at(base + i * inner) * ((double)up.at(base + i * inner) - dot));
        }
      t.acc(x, g);
    });
  }

  // Log-softmax over the last axis.
  Var log_softmax(Var x) {
    const auto& xv = val(x);
    const int64_t D = xv.dim(xv.rank() - 1);
    const int64_t R = xv.numel() / D;
    Tensor<T> y(xv.shape());
    for (int64_t r = 0; r < R; ++r) {
      const T* p = xv.data() + r * D;
      double mx = -1e300;
      for (int64_t i = 0; i < D; ++i) mx = std::max(mx, (double)p[i]);
      double s = 0.0;
      for (int64_t i = 0; i < D; ++i) s += std::exp((double)p[i] - mx);
      const double lse = mx + std::log(s);
      T* q = y.data() + r * D;
      for (int64_t i = 0; i < D; ++i) q[i] = (T)((double)p[i] - lse);
    }
    return push(std::move(y), rg(x), [x, R, D](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const Tensor<T>& yv = t.node(self).value;
      Tensor<T> g(yv.shape());
      for (int64_t r = 0; r < R; ++r) {
        const T* pu = up.data() + r * D;
        const T* py = yv.data() + r * D;
        double s = 0.0;
        for (int64_t i = 0; i < D; ++i) s += (double)pu[i];
        T* pg = g.data() + r * D;
        for (int64_t i = 0; i < D; ++i) pg[i] = (T)((double)pu[i] - std::exp((double)py[i]) * s);
      }
      t.acc(x, g);
    });
  }

  // Inverted dropout: kept activations are scaled by 1/(1-p) so inference is
  // the identity. The mask is drawn at build time from the caller's stream.
  Var dropout(Var x, double p, Rng& rng) {
    require(p >= 0.0 && p < 1.0, "dropout rate", {}, {});
    if (p == 0.0) return x;
    const auto& xv = val(x);
    auto mask = std::make_shared<Tensor<T>>(xv.shape());
    const T keep_scale = (T)(1.0 / (1.0 - p));
    for (int64_t i = 0; i < xv.numel(); ++i)
      mask->at(i) = rng.bernoulli(p) ? T(0) : keep_scale;
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y.at(i) = xv.at(i) * mask->at(i);
    return push(std::move(y), rg(x), [x, mask](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(up.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g.at(i) = up.at(i) * mask->at(i);
      t.acc(x, g);
    });
  }

  // Adaptive average pooling with the standard overlapping-bin windows:
  // output cell (i,j) averages rows [floor(iH/P), ceil((i+1)H/P)).
  Var adaptive_avg_pool2d(Var x, int64_t P, int64_t Q) {
    const auto& xv = val(x);
    require(xv.rank() == 4, "adaptive_avg_pool2d input", xv.shape(), {});
    const int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (P > H || Q > W)
      throw ShapeMismatch("adaptive_avg_pool2d: target (" + std::to_string(P) + ", " +
                          std::to_string(Q) + ") exceeds input " + shape_str(xv.shape()));
    Tensor<T> y({B, C, P, Q});
    for (int64_t n = 0; n < B; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const T* xc = xv.data() + (n * C + c) * H * W;
        T* yc = y.data() + (n * C + c) * P * Q;
        for (int64_t i = 0; i < P; ++i) {
          const int64_t r0 = (i * H) / P;
          const int64_t r1 = ((i + 1) * H + P - 1) / P;
          for (int64_t j = 0; j < Q; ++j) {
            const int64_t c0 = (j * W) / Q;
            const int64_t c1 = ((j + 1) * W + Q - 1) / Q;
            double s = 0.0;
            for (int64_t yy = r0; yy < r1; ++yy)
              for (int64_t xx = c0; xx < c1; ++xx) s += (double)xc[yy * W + xx];
            yc[i * Q + j] = (T)(s / (double)((r1 - r0) * (c1 - c0)));
          }
        }
      }
    return push(std::move(y), rg(x), [x, B, C, H, W, P, Q](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g({B, C, H, W});
      for (int64_t n = 0; n < B; ++n)
        for (int64_t c = 0; c < C; ++c) {
          T* gc = g.data() + (n * C + c) * H * W;
          const T* uc = up.data() + (n * C + c) * P * Q;
          for (int64_t i = 0; i < P; ++i) {
            const int64_t r0 = (i * H) / P;
            const int64_t r1 = ((i + 1) * H + P - 1) / P;
            for (int64_t j = 0; j < Q; ++j) {
              const int64_t c0 = (j * W) / Q;
              const int64_t c1 = ((j + 1) * W + Q - 1) / Q;
              const T u = (T)((double)uc[i * Q + j] / (double)((r1 - r0) * (c1 - c0)));
              for (int64_t yy = r0; yy < r1; ++yy)
                for (int64_t xx = c0; xx < c1; ++xx) gc[yy * W + xx] += u;
            }
          }
        }
      t.acc(x, g);
    });
  }

  // ---- reductions / movement ----------------------------------------------

  // Sum over one axis; the reduced axis is kept with size 1.
  Var reduce_sum(Var x, int axis) { return reduce_impl(x, axis, false); }
  // Mean over one axis; the reduced axis is kept with size 1.
  Var reduce_mean(Var x, int axis) { return reduce_impl(x, axis, true); }

  Var reshape(Var x, Shape s) {
    const auto& xv = val(x);
    Tensor<T> y = xv.reshaped(std::move(s));
    Shape orig = xv.shape();
    return push(std::move(y), rg(x), [x, orig](Tape& t, int32_t self) {
      t.acc(x, t.node(self).grad.reshaped(orig));
    });
  }

  Var permute(Var x, std::vector<int> perm) {
    const auto& xv = val(x);
    const int r = xv.rank();
    require((int)perm.size() == r, "permute", xv.shape(), {});
    Shape out_shape(r);
    for (int i = 0; i < r; ++i) out_shape[(size_t)i] = xv.dim(perm[(size_t)i]);
    Tensor<T> y = permute_data(xv, perm, out_shape);
    std::vector<int> inv(perm.size());
    for (int i = 0; i < r; ++i) inv[(size_t)perm[(size_t)i]] = i;
    Shape in_shape = xv.shape();
    return push(std::move(y), rg(x), [x, inv, in_shape](Tape& t, int32_t self) {
      t.acc(x, permute_data(t.node(self).grad, inv, in_shape));
    });
  }

  // Stack n same-shape (B, rest...) tensors into (B, n, rest...).
  Var stack_dim1(const std::vector<Var>& xs) {
    require(!xs.empty(), "stack_dim1 needs inputs", {}, {});
    const auto& first = val(xs[0]);
    const int64_t B = first.dim(0);
    const int64_t R = first.numel() / B;
    const int64_t n = (int64_t)xs.size();
    bool need = false;
    for (Var v : xs) {
      require(val(v).same_shape(first), "stack_dim1", val(v).shape(), first.shape());
      need = need || rg(v);
    }
    Shape out_shape{B, n};
    for (int i = 1; i < first.rank(); ++i) out_shape.push_back(first.dim(i));
    Tensor<T> y(out_shape);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < n; ++i)
        std::copy_n(val(xs[(size_t)i]).data() + b * R, R, y.data() + (b * n + i) * R);
    auto ids = xs;
    return push(std::move(y), need, [ids, B, R, n](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      for (int64_t i = 0; i < n; ++i) {
        if (!t.rg(ids[(size_t)i])) continue;
        Tensor<T> g(t.val(ids[(size_t)i]).shape());
        for (int64_t b = 0; b < B; ++b)
          std::copy_n(up.data() + (b * n + i) * R, R, g.data() + b * R);
        t.acc(ids[(size_t)i], g);
      }
    });
  }

  Var concat_lastdim(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    require(av.rank() == bv.rank(), "concat_lastdim", av.shape(), bv.shape());
    for (int i = 0; i + 1 < av.rank(); ++i)
      require(av.dim(i) == bv.dim(i), "concat_lastdim", av.shape(), bv.shape());
    const int64_t d1 = av.dim(av.rank() - 1), d2 = bv.dim(bv.rank() - 1);
    const int64_t R = av.numel() / d1;
    Shape out_shape = av.shape();
    out_shape.back() = d1 + d2;
    Tensor<T> y(out_shape);
    for (int64_t r = 0; r < R; ++r) {
      std::copy_n(av.data() + r * d1, d1, y.data() + r * (d1 + d2));
      std::copy_n(bv.data() + r * d2, d2, y.data() + r * (d1 + d2) + d1);
    }
    return push(std::move(y), rg(a) || rg(b), [a, b, R, d1, d2](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      if (t.rg(a)) {
        Tensor<T> g(t.val(a).shape());
        for (int64_t r = 0; r < R; ++r)
          std::copy_n(up.data() + r * (d1 + d2), d1, g.data() + r * d1);
        t.acc(a, g);
      }
      if (t.rg(b)) {
        Tensor<T> g(t.val(b).shape());
        for (int64_t r = 0; r < R; ++r)
          std::copy_n(up.data() + r * (d1 + d2) + d1, d2, g.data() + r * d2);
        t.acc(b, g);
      }
    });
  }

  Var narrow_lastdim(Var x, int64_t start, int64_t len) {
    const auto& xv = val(x);
    const int64_t D = xv.dim(xv.rank() - 1);
    require(start >= 0 && len >= 1 && start + len <= D, "narrow_lastdim", xv.shape(), {});
    const int64_t R = xv.numel() / D;
    Shape out_shape = xv.shape();
    out_shape.back() = len;
    Tensor<T> y(out_shape);
    for (int64_t r = 0; r < R; ++r)
      std::copy_n(xv.data() + r * D + start, len, y.data() + r * len);
    return push(std::move(y), rg(x), [x, R, D, start, len](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(t.val(x).shape());
      for (int64_t r = 0; r < R; ++r)
        std::copy_n(up.data() + r * len, len, g.data() + r * D + start);
      t.acc(x, g);
    });
  }

  // Zero-pad axis 1 of (B, C, rest...) up to new_size channels.
  Var pad_dim1(Var x, int64_t new_size) {
    const auto& xv = val(x);
    require(xv.rank() >= 2 && new_size >= xv.dim(1), "pad_dim1", xv.shape(), {});
    const int64_t B = xv.dim(0), C = xv.dim(1);
    const int64_t R = xv.numel() / (B * C);
    Shape out_shape = xv.shape();
    out_shape[1] = new_size;
    Tensor<T> y(out_shape);
    for (int64_t b = 0; b < B; ++b)
      std::copy_n(xv.data() + b * C * R, C * R, y.data() + b * new_size * R);
    return push(std::move(y), rg(x), [x, B, C, R, new_size](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(t.val(x).shape());
      for (int64_t b = 0; b < B; ++b)
        std::copy_n(up.data() + b * new_size * R, C * R, g.data() + b * C * R);
      t.acc(x, g);
    });
  }

  Var narrow_dim1(Var x, int64_t start, int64_t len) {
    const auto& xv = val(x);
    require(xv.rank() >= 2 && start >= 0 && len >= 1 && start + len <= xv.dim(1), "narrow_dim1",
            xv.shape(), {});
    const int64_t B = xv.dim(0), C = xv.dim(1);
    const int64_t R = xv.numel() / (B * C);
    Shape out_shape = xv.shape();
    out_shape[1] = len;
    Tensor<T> y(out_shape);
    for (int64_t b = 0; b < B; ++b)
      std::copy_n(xv.data() + (b * C + start) * R, len * R, y.data() + b * len * R);
    return push(std::move(y), rg(x), [x, B, C, R, start, len](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(t.val(x).shape());
      for (int64_t b = 0; b < B; ++b)
        std::copy_n(up.data() + b * len * R, len * R, g.data() + (b * C + start) * R);
      t.acc(x, g);
    });
  }

  // ---- lookup / masking ---------------------------------------------------

  // Row gather from an embedding table: ids index (B*T) rows of table (V,D).
  Var embedding(Var table, std::shared_ptr<const std::vector<int32_t>> ids, int64_t B, int64_t Tl) {
    const auto& tv = val(table);
    require(tv.rank() == 2 && (int64_t)ids->size() == B * Tl, "embedding", tv.shape(), {});
    const int64_t V = tv.dim(0), D = tv.dim(1);
    Tensor<T> y({B, Tl, D});
    for (int64_t i = 0; i < B * Tl; ++i) {
      const int32_t id = (*ids)[(size_t)i];
      if (id < 0 || id >= V)
        throw ShapeMismatch("embedding id " + std::to_string(id) + " outside table " +
                            shape_str(tv.shape()));
      std::copy_n(tv.data() + (int64_t)id * D, D, y.data() + i * D);
    }
    return push(std::move(y), rg(table), [table, ids, B, Tl, D](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(t.val(table).shape());
      for (int64_t i = 0; i < B * Tl; ++i) {
        const int64_t id = (*ids)[(size_t)i];
        T* row = g.data() + id * D;
        const T* u = up.data() + i * D;
        for (int64_t d = 0; d < D; ++d) row[d] += u[d];
      }
      t.acc(table, g);
    });
  }

  // x(B,T,D) + pos(T,D), broadcast over the batch.
  Var add_pos(Var x, Var pos) {
    const auto& xv = val(x);
    const auto& pv = val(pos);
    require(xv.rank() == 3 && pv.rank() == 2 && xv.dim(1) == pv.dim(0) && xv.dim(2) == pv.dim(1),
            "add_pos", xv.shape(), pv.shape());
    const int64_t B = xv.dim(0), R = pv.numel();
    Tensor<T> y(xv.shape());
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < R; ++i) y.at(b * R + i) = xv.at(b * R + i) + pv.at(i);
    return push(std::move(y), rg(x) || rg(pos), [x, pos, B, R](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      if (t.rg(x)) t.acc(x, up);
      if (t.rg(pos)) {
        Tensor<T> g(t.val(pos).shape());
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < R; ++i) g.at(i) += up.at(b * R + i);
        t.acc(pos, g);
      }
    });
  }

  // x(B,T,D) * m(B,T) broadcast over D; m is a constant 0/1 mask.
  Var mask_rows(Var x, std::shared_ptr<const Tensor<T>> m) {
    const auto& xv = val(x);
    require(xv.rank() == 3 && m->rank() == 2 && xv.dim(0) == m->dim(0) && xv.dim(1) == m->dim(1),
            "mask_rows", xv.shape(), m->shape());
    const int64_t BT = m->numel(), D = xv.dim(2);
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < BT; ++i) {
      const T mi = m->at(i);
      const T* p = xv.data() + i * D;
      T* q = y.data() + i * D;
      for (int64_t d = 0; d < D; ++d) q[d] = p[d] * mi;
    }
    return push(std::move(y), rg(x), [x, m, BT, D](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(up.shape());
      for (int64_t i = 0; i < BT; ++i) {
        const T mi = m->at(i);
        const T* p = up.data() + i * D;
        T* q = g.data() + i * D;
        for (int64_t d = 0; d < D; ++d) q[d] = p[d] * mi;
      }
      t.acc(x, g);
    });
  }

  // logits(B*H, T, T) + bias(B, T) broadcast over heads and query positions.
  // Used for additive attention masking of padded key columns.
  Var add_key_bias(Var logits, std::shared_ptr<const Tensor<T>> bias) {
    const auto& lv = val(logits);
    require(lv.rank() == 3 && bias->rank() == 2 && lv.dim(1) == lv.dim(2) &&
                lv.dim(2) == bias->dim(1) && lv.dim(0) % bias->dim(0) == 0,
            "add_key_bias", lv.shape(), bias->shape());
    const int64_t BH = lv.dim(0), Tl = lv.dim(1), B = bias->dim(0);
    const int64_t H = BH / B;
    Tensor<T> y(lv.shape());
    for (int64_t bh = 0; bh < BH; ++bh) {
      const int64_t b = bh / H;
      const T* br = bias->data() + b * Tl;
      for (int64_t i = 0; i < Tl; ++i) {
        const T* p = lv.data() + (bh * Tl + i) * Tl;
        T* q = y.data() + (bh * Tl + i) * Tl;
        for (int64_t j = 0; j < Tl; ++j) q[j] = p[j] + br[j];
      }
    }
    return push(std::move(y), rg(logits), [logits](Tape& t, int32_t self) {
      t.acc(logits, t.node(self).grad);
    });
  }

  // Normalize the final axis to unit L2 norm (clamped at a tiny floor).
  Var l2_normalize_rows(Var x) {
    const auto& xv = val(x);
    const int64_t D = xv.dim(xv.rank() - 1);
    const int64_t R = xv.numel() / D;
    Tensor<T> y(xv.shape());
    auto inv_norm = std::make_shared<Tensor<T>>(Shape{R});
    for (int64_t r = 0; r < R; ++r) {
      const T* p = xv.data() + r * D;
      double s = 0.0;
      for (int64_t i = 0; i < D; ++i) s += (double)p[i] * (double)p[i];
      const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
      inv_norm->at(r) = (T)inv;
      T* q = y.data() + r * D;
      for (int64_t i = 0; i < D; ++i) q[i] = (T)((double)p[i] * inv);
    }
    return push(std::move(y), rg(x), [x, inv_norm, R, D](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      const Tensor<T>& yv = t.node(self).value;
      Tensor<T> g(yv.shape());
      for (int64_t r = 0; r < R; ++r) {
        const T* pu = up.data() + r * D;
        const T* py = yv.data() + r * D;
        double dot = 0.0;
        for (int64_t i = 0; i < D; ++i) dot += (double)pu[i] * (double)py[i];
        const double inv = (double)inv_norm->at(r);
        T* pg = g.data() + r * D;
        for (int64_t i = 0; i < D; ++i)
          pg[i] = (T)(((double)pu[i] - (double)py[i] * dot) * inv);
      }
      t.acc(x, g);
    });
  }

  // Gather x(R,C) at (rows[k], cols[k]) into a (K) vector.
  Var pick(Var x, std::shared_ptr<const std::vector<int64_t>> rows,
           std::shared_ptr<const std::vector<int64_t>> cols) {
    const auto& xv = val(x);
    require(xv.rank() == 2 && rows->size() == cols->size() && !rows->empty(), "pick", xv.shape(),
            {});
    const int64_t C = xv.dim(1);
    const int64_t K = (int64_t)rows->size();
    Tensor<T> y({K});
    for (int64_t k = 0; k < K; ++k) y.at(k) = xv.at((*rows)[(size_t)k] * C + (*cols)[(size_t)k]);
    return push(std::move(y), rg(x), [x, rows, cols, C, K](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(t.val(x).shape());
      for (int64_t k = 0; k < K; ++k)
        g.at((*rows)[(size_t)k] * C + (*cols)[(size_t)k]) += up.at(k);
      t.acc(x, g);
    });
  }

  // Token-axis mixing: y[b,p,c] = sum_q w[p,q] x[b,q,c] + bias[p].
  Var token_mix(Var x, Var w, Var b) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    const auto& bv = val(b);
    require(xv.rank() == 3 && wv.rank() == 2 && wv.dim(0) == wv.dim(1) && wv.dim(0) == xv.dim(1) &&
                bv.numel() == xv.dim(1),
            "token_mix", xv.shape(), wv.shape());
    const int64_t B = xv.dim(0), P = xv.dim(1), C = xv.dim(2);
    Tensor<T> y({B, P, C});
    for (int64_t n = 0; n < B; ++n) {
      detail::mm_nn_acc(wv.data(), xv.data() + n * P * C, y.data() + n * P * C, P, P, C);
      for (int64_t p = 0; p < P; ++p) {
        T* q = y.data() + (n * P + p) * C;
        const T add = bv.at(p);
        for (int64_t c = 0; c < C; ++c) q[c] += add;
      }
    }
    return push(std::move(y), rg(x) || rg(w) || rg(b), [x, w, b, B, P, C](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      if (t.rg(x)) {
        Tensor<T> g({B, P, C});
        for (int64_t n = 0; n < B; ++n)
          detail::mm_tn_acc(t.val(w).data(), up.data() + n * P * C, g.data() + n * P * C, P, P, C);
        t.acc(x, g);
      }
      if (t.rg(w)) {
        Tensor<T> g({P, P});
        for (int64_t n = 0; n < B; ++n)
          detail::mm_nt_acc(up.data() + n * P * C, t.val(x).data() + n * P * C, g.data(), P, C, P);
        t.acc(w, g);
      }
      if (t.rg(b)) {
        Tensor<T> g({P});
        for (int64_t n = 0; n < B; ++n)
          for (int64_t p = 0; p < P; ++p) {
            const T* u = up.data() + (n * P + p) * C;
            T s = T(0);
            for (int64_t c = 0; c < C; ++c) s += u[c];
            g.at(p) += s;
          }
        t.acc(b, g);
      }
    });
  }

  // Per-block scaling: y[b,n,...] = x[b,n,...] * s[b,n].
  Var block_scale(Var x, Var s) {
    const auto& xv = val(x);
    const auto& sv = val(s);
    require(xv.rank() >= 2 && sv.rank() == 2 && xv.dim(0) == sv.dim(0) && xv.dim(1) == sv.dim(1),
            "block_scale", xv.shape(), sv.shape());
    const int64_t BN = sv.numel();
    const int64_t R = xv.numel() / BN;
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < BN; ++i) {
      const T f = sv.at(i);
      const T* p = xv.data() + i * R;
      T* q = y.data() + i * R;
      for (int64_t r = 0; r < R; ++r) q[r] = p[r] * f;
    }
    return push(std::move(y), rg(x) || rg(s), [x, s, BN, R](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      if (t.rg(x)) {
        Tensor<T> g(t.val(x).shape());
        const auto& sv2 = t.val(s);
        for (int64_t i = 0; i < BN; ++i) {
          const T f = sv2.at(i);
          const T* p = up.data() + i * R;
          T* q = g.data() + i * R;
          for (int64_t r = 0; r < R; ++r) q[r] = p[r] * f;
        }
        t.acc(x, g);
      }
      if (t.rg(s)) {
        Tensor<T> g(t.val(s).shape());
        const auto& xv2 = t.val(x);
        for (int64_t i = 0; i < BN; ++i) {
          const T* p = up.data() + i * R;
          const T* q = xv2.data() + i * R;
          double acc = 0.0;
          for (int64_t r = 0; r < R; ++r) acc += (double)p[r] * (double)q[r];
          g.at(i) = (T)acc;
        }
        t.acc(s, g);
      }
    });
  }

  // ---- backward -----------------------------------------------------------

  void backward(Var root) {
    const auto& rv = val(root);
    backward(root, Tensor<T>::full(rv.shape(), T(1)));
  }

  void backward(Var root, Tensor<T> seed) {
    Node& rn = node_mut(root.id);
    if (!seed.same_shape(rn.value))
      throw ShapeMismatch("backward seed shape " + shape_str(seed.shape()) + " vs value " +
                          shape_str(rn.value.shape()));
    if (rn.grad.empty())
      rn.grad = std::move(seed);
    else
      rn.grad.add_(seed);
    for (int32_t id = root.id; id >= 0; --id) {
      Node& n = nodes_[(size_t)id];
      if (n.grad.empty() || !n.backfn) continue;
      n.backfn(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

  // Hash of every relu branch decision taken on this tape. Two evaluations
  // with equal signatures followed the same piecewise-linear region, so a
  // finite-difference stencil between them never straddles a kink.
  uint64_t activation_signature() const { return sign_hash_; }

  bool rg(Var v) const { return node(v.id).requires_grad; }

  void acc(Var v, const Tensor<T>& g) {
    Node& n = node_mut(v.id);
    if (!n.requires_grad) return;
    if (n.grad.empty())
      n.grad = g;
    else
      n.grad.add_(g);
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backfn;
  };

  const Node& node(int32_t id) const { return nodes_[(size_t)id]; }
  Node& node_mut(int32_t id) { return nodes_[(size_t)id]; }

  Var push(Tensor<T> value, bool requires_grad, std::function<void(Tape&, int32_t)> backfn) {
    const int32_t id = (int32_t)nodes_.size();
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    if (requires_grad && backfn)
      nodes_[(size_t)id].backfn = [fn = std::move(backfn), id](Tape& t) { fn(t, id); };
    return Var{id};
  }

  static void require(bool ok, const char* what, const Shape& a, const Shape& b) {
    if (!ok)
      throw ShapeMismatch(std::string(what) + ": incompatible shapes " + shape_str(a) + " and " +
                          shape_str(b));
  }

  static Tensor<T> permute_data(const Tensor<T>& x, const std::vector<int>& perm,
                                const Shape& out_shape) {
    const int r = x.rank();
    std::vector<int64_t> in_stride((size_t)r, 1);
    for (int i = r - 2; i >= 0; --i)
      in_stride[(size_t)i] = in_stride[(size_t)i + 1] * x.dim(i + 1);
    std::vector<int64_t> src_stride((size_t)r);  // stride in input for each output axis
    for (int i = 0; i < r; ++i) src_stride[(size_t)i] = in_stride[(size_t)perm[(size_t)i]];
    Tensor<T> y(out_shape);
    std::vector<int64_t> idx((size_t)r, 0);
    const int64_t n = x.numel();
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
      y.at(i) = x.at(src);
      for (int a = r - 1; a >= 0; --a) {
        idx[(size_t)a]++;
        src += src_stride[(size_t)a];
        if (idx[(size_t)a] < out_shape[(size_t)a]) break;
        src -= src_stride[(size_t)a] * out_shape[(size_t)a];
        idx[(size_t)a] = 0;
      }
    }
    return y;
  }

  Var reduce_impl(Var x, int axis, bool mean) {
    const auto& xv = val(x);
    const int r = xv.rank();
    if (axis < 0) axis += r;
    require(axis >= 0 && axis < r, "reduce axis", xv.shape(), {});
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= xv.dim(i);
    const int64_t n = xv.dim(axis);
    Shape out_shape = xv.shape();
    out_shape[(size_t)axis] = 1;
    Tensor<T> y(out_shape);
    const double inv = mean ? 1.0 / (double)n : 1.0;
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += (double)xv.at((o * n + i) * inner + in);
        y.at(o * inner + in) = (T)(s * inv);
      }
    return push(std::move(y), rg(x), [x, outer, inner, n, inv](Tape& t, int32_t self) {
      const Tensor<T>& up = t.node(self).grad;
      Tensor<T> g(t.val(x).shape());
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const T u = (T)((double)up.at(o * inner + in) * inv);
          for (int64_t i = 0; i < n; ++i) g.at((o * n + i) * inner + in) = u;
        }
      t.acc(x, g);
    });
  }

  std::vector<Node> nodes_;
  uint64_t sign_hash_ = 14695981039346656037ULL;
};

// Cosine similarity of two equal-length vectors. Errors on zero-norm input.
template <typename T>
double cosine_sim(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.numel() != v.numel())
    throw ShapeMismatch("cosine_sim: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (int64_t i = 0; i < u.numel(); ++i) {
    uu += (double)u.at(i) * (double)u.at(i);
    vv += (double)v.at(i) * (double)v.at(i);
    uv += (double)u.at(i) * (double)v.at(i);
  }
  if (uu <= 0.0 || vv <= 0.0) throw DegenerateVector("cosine_sim: zero-norm input");
  const double s = uv / (std::sqrt(uu) * std::sqrt(vv));
  return std::min(1.0, std::max(-1.0, s));
}

}  // namespace curlip
