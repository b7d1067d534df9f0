#pragma once

// Reverse-mode automatic differentiation over dense tensors: a define-by-run
// tape whose nodes hold the forward value and a backward closure. The op set
// is exactly what the decomposition network needs (convolution, pooling,
// nearest upsampling, concatenation, ReLU, dropout) plus the elementwise and
// reduction pieces the losses are assembled from.
//
// All kernels write disjoint output slices per worker and accumulate in a
// fixed order, so results are bit-identical for any thread count. Float is
// the training precision; the double instantiation exists for gradient
// checking.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "xdecomp/parallel.hpp"
#include "xdecomp/rng.hpp"
#include "xdecomp/tensor.hpp"

namespace xdecomp {

enum class Pad { same, valid };
enum class RunMode { train, eval };

namespace detail {

// Test hook for the self-check's fault-injection mode: flips the sign of the
// ReLU backward rule so grad_check must fail.
inline std::atomic<bool> g_fault_flip_relu_backward{false};

template <typename T>
void conv2d_forward_kernel(const T* x, int B, int IC, int IH, int IW, const T* w,
                           int OC, int KH, int KW, const T* bias, T* y, int OH,
                           int OW, int stride, int ph, int pw) {
  const std::int64_t x_c = std::int64_t(IH) * IW, x_b = x_c * IC;
  const std::int64_t y_c = std::int64_t(OH) * OW, y_b = y_c * OC;
  const std::int64_t w_ic = std::int64_t(KH) * KW, w_oc = w_ic * IC;
  parallel_for(std::int64_t(B) * OC, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t idx = i0; idx < i1; ++idx) {
      const int b = int(idx / OC), oc = int(idx % OC);
      T* yp = y + b * y_b + oc * y_c;
      const T bv = bias ? bias[oc] : T(0);
      for (std::int64_t i = 0; i < y_c; ++i) yp[i] = bv;
      const T* woc = w + oc * w_oc;
      const T* xb = x + b * x_b;
      for (int ic = 0; ic < IC; ++ic) {
        const T* xc = xb + ic * x_c;
        for (int kh = 0; kh < KH; ++kh) {
          for (int kw = 0; kw < KW; ++kw) {
            const T wv = woc[ic * w_ic + kh * KW + kw];
            if (stride == 1) {
              const int oh_lo = std::max(0, ph - kh);
              const int oh_hi = std::min(OH, IH + ph - kh);
              const int ow_lo = std::max(0, pw - kw);
              const int ow_hi = std::min(OW, IW + pw - kw);
              for (int oh = oh_lo; oh < oh_hi; ++oh) {
                const T* xrow = xc + std::int64_t(oh - ph + kh) * IW + (ow_lo - pw + kw);
                T* yrow = yp + std::int64_t(oh) * OW + ow_lo;
                const int n = ow_hi - ow_lo;
                for (int i = 0; i < n; ++i) yrow[i] += wv * xrow[i];
              }
            } else {
              for (int oh = 0; oh < OH; ++oh) {
                const int ih = oh * stride - ph + kh;
                if (ih < 0 || ih >= IH) continue;
                for (int ow = 0; ow < OW; ++ow) {
                  const int iw = ow * stride - pw + kw;
                  if (iw < 0 || iw >= IW) continue;
                  yp[std::int64_t(oh) * OW + ow] += wv * xc[std::int64_t(ih) * IW + iw];
                }
              }
            }
          }
        }
      }
    }
  });
}

// Gradient w.r.t. the input: for stride 1 this is a shifted axpy per kernel
// tap; each (b, ic) slice is owned by one worker.
template <typename T>
void conv2d_backward_input_kernel(T* dx, int B, int IC, int IH, int IW, const T* w,
                                  int OC, int KH, int KW, const T* gy, int OH,
                                  int OW, int stride, int ph, int pw) {
  const std::int64_t x_c = std::int64_t(IH) * IW, x_b = x_c * IC;
  const std::int64_t y_c = std::int64_t(OH) * OW, y_b = y_c * OC;
  const std::int64_t w_ic = std::int64_t(KH) * KW, w_oc = w_ic * IC;
  parallel_for(std::int64_t(B) * IC, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t idx = i0; idx < i1; ++idx) {
      const int b = int(idx / IC), ic = int(idx % IC);
      T* dxc = dx + b * x_b + ic * x_c;
      const T* gyb = gy + b * y_b;
      for (int oc = 0; oc < OC; ++oc) {
        const T* gyc = gyb + oc * y_c;
        const T* woc = w + oc * w_oc + ic * w_ic;
        for (int kh = 0; kh < KH; ++kh) {
          for (int kw = 0; kw < KW; ++kw) {
            const T wv = woc[kh * KW + kw];
            if (stride == 1) {
              const int ih_lo = std::max(0, kh - ph);
              const int ih_hi = std::min(IH, OH + kh - ph);
              const int iw_lo = std::max(0, kw - pw);
              const int iw_hi = std::min(IW, OW + kw - pw);
              for (int ih = ih_lo; ih < ih_hi; ++ih) {
                const T* gyrow = gyc + std::int64_t(ih + ph - kh) * OW + (iw_lo + pw - kw);
                T* dxrow = dxc + std::int64_t(ih) * IW + iw_lo;
                const int n = iw_hi - iw_lo;
                for (int i = 0; i < n; ++i) dxrow[i] += wv * gyrow[i];
              }
            } else {
              for (int ih = 0; ih < IH; ++ih) {
                const int oh_num = ih + ph - kh;
                if (oh_num < 0 || oh_num % stride != 0) continue;
                const int oh = oh_num / stride;
                if (oh >= OH) continue;
                for (int iw = 0; iw < IW; ++iw) {
                  const int ow_num = iw + pw - kw;
                  if (ow_num < 0 || ow_num % stride != 0) continue;
                  const int ow = ow_num / stride;
                  if (ow >= OW) continue;
                  dxc[std::int64_t(ih) * IW + iw] += wv * gyc[std::int64_t(oh) * OW + ow];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv2d_backward_params_kernel(const T* x, int B, int IC, int IH, int IW, T* dw,
                                   int OC, int KH, int KW, T* db, const T* gy,
                                   int OH, int OW, int stride, int ph, int pw) {
  const std::int64_t x_c = std::int64_t(IH) * IW, x_b = x_c * IC;
  const std::int64_t y_c = std::int64_t(OH) * OW, y_b = y_c * OC;
  const std::int64_t w_ic = std::int64_t(KH) * KW, w_oc = w_ic * IC;
  parallel_for(OC, [&](std::int64_t o0, std::int64_t o1) {
    for (int oc = int(o0); oc < int(o1); ++oc) {
      T db_acc = 0;
      for (int b = 0; b < B; ++b) {
        const T* gyc = gy + b * y_b + oc * y_c;
        for (std::int64_t i = 0; i < y_c; ++i) db_acc += gyc[i];
        for (int ic = 0; ic < IC; ++ic) {
          const T* xc = x + b * x_b + ic * x_c;
          for (int kh = 0; kh < KH; ++kh) {
            for (int kw = 0; kw < KW; ++kw) {
              T acc = 0;
              if (stride == 1) {
                const int oh_lo = std::max(0, ph - kh);
                const int oh_hi = std::min(OH, IH + ph - kh);
                const int ow_lo = std::max(0, pw - kw);
                const int ow_hi = std::min(OW, IW + pw - kw);
                for (int oh = oh_lo; oh < oh_hi; ++oh) {
                  const T* xrow = xc + std::int64_t(oh - ph + kh) * IW + (ow_lo - pw + kw);
                  const T* gyrow = gyc + std::int64_t(oh) * OW + ow_lo;
                  const int n = ow_hi - ow_lo;
                  for (int i = 0; i < n; ++i) acc += gyrow[i] * xrow[i];
                }
              } else {
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * stride - ph + kh;
                  if (ih < 0 || ih >= IH) continue;
                  for (int ow = 0; ow < OW; ++ow) {
                    const int iw = ow * stride - pw + kw;
                    if (iw < 0 || iw >= IW) continue;
                    acc += gyc[std::int64_t(oh) * OW + ow] * xc[std::int64_t(ih) * IW + iw];
                  }
                }
              }
              dw[oc * w_oc + ic * w_ic + kh * KW + kw] += acc;
            }
          }
        }
      }
      if (db) db[oc] += db_acc;
    }
  });
}

}  // namespace detail

inline void set_fault_flip_relu_backward(bool on) {
  detail::g_fault_flip_relu_backward.store(on);
}

template <typename T>
class GraphT {
 public:
  using Tensor = TensorT<T>;

  struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  explicit GraphT(std::uint64_t seed = 0) : rng_(seed) {}
  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;

  Value leaf(Tensor v, bool requires_grad = false) {
    return push(std::move(v), {}, nullptr, requires_grad);
  }

  const Tensor& value(Value v) const { return node(v).val; }

  // Valid after backward(); zeros for nodes the root does not depend on.
  const Tensor& grad(Value v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor(n.val.shape());
    return n.grad;
  }

  int size() const { return int(nodes_.size()); }

  // ---- operators ------------------------------------------------------

  Value conv2d(Value xv, Value wv, Value bv, int stride = 1, Pad pad = Pad::same) {
    const Tensor& x = node(xv).val;
    const Tensor& w = node(wv).val;
    const Tensor& b = node(bv).val;
    if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1)
      throw std::invalid_argument("conv2d: x and w must be rank 4, bias rank 1");
    const int B = x.dim(0), IC = x.dim(1), IH = x.dim(2), IW = x.dim(3);
    const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    if (w.dim(1) != IC) throw std::invalid_argument("conv2d: channel mismatch");
    if (b.dim(0) != OC) throw std::invalid_argument("conv2d: bias size mismatch");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    int ph = 0, pw = 0;
    if (pad == Pad::same) {
      if (KH % 2 == 0 || KW % 2 == 0)
        throw std::invalid_argument("conv2d: same padding needs odd kernels");
      ph = (KH - 1) / 2;
      pw = (KW - 1) / 2;
    }
    const int OH = (IH + 2 * ph - KH) / stride + 1;
    const int OW = (IW + 2 * pw - KW) / stride + 1;
    if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: kernel larger than input");

    Tensor y({B, OC, OH, OW});
    detail::conv2d_forward_kernel(x.data(), B, IC, IH, IW, w.data(), OC, KH, KW,
                                  b.data(), y.data(), OH, OW, stride, ph, pw);
    const int xid = xv.id, wid = wv.id, bid = bv.id;
    auto back = [=](GraphT& g, int self) {
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      const Tensor& xt = g.nodes_[std::size_t(xid)].val;
      const Tensor& wt = g.nodes_[std::size_t(wid)].val;
      if (g.nodes_[std::size_t(xid)].needs_grad) {
        Tensor& dx = g.grad_ref(xid);
        detail::conv2d_backward_input_kernel(dx.data(), B, IC, IH, IW, wt.data(), OC,
                                             KH, KW, gy.data(), OH, OW, stride, ph, pw);
      }
      if (g.nodes_[std::size_t(wid)].needs_grad || g.nodes_[std::size_t(bid)].needs_grad) {
        Tensor& dw = g.grad_ref(wid);
        Tensor& db = g.grad_ref(bid);
        detail::conv2d_backward_params_kernel(xt.data(), B, IC, IH, IW, dw.data(), OC,
                                              KH, KW, db.data(), gy.data(), OH, OW,
                                              stride, ph, pw);
      }
    };
    return push(std::move(y), {xid, wid, bid}, back);
  }

  Value maxpool2(Value xv) {
    const Tensor& x = node(xv).val;
    require_rank4(x, "maxpool2");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
      throw std::invalid_argument("maxpool2: spatial dims must be even");
    const int OH = H / 2, OW = W / 2;
    Tensor y({B, C, OH, OW});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(std::size_t(y.numel()));
    const T* xp = x.data();
    T* yp = y.data();
    const std::int64_t planes = std::int64_t(B) * C;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      const T* xs = xp + pl * H * W;
      T* ys = yp + pl * OH * OW;
      std::int64_t* as = argmax->data() + pl * OH * OW;
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
          // Row-major scan; ties keep the first index.
          std::int64_t best = std::int64_t(2 * oh) * W + 2 * ow;
          T bestv = xs[best];
          const std::int64_t cands[3] = {std::int64_t(2 * oh) * W + 2 * ow + 1,
                                         std::int64_t(2 * oh + 1) * W + 2 * ow,
                                         std::int64_t(2 * oh + 1) * W + 2 * ow + 1};
          for (std::int64_t c : cands)
            if (xs[c] > bestv) {
              bestv = xs[c];
              best = c;
            }
          ys[std::int64_t(oh) * OW + ow] = bestv;
          as[std::int64_t(oh) * OW + ow] = pl * H * W + best;
        }
      }
    }
    const int xid = xv.id;
    auto back = [xid, argmax](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      Tensor& dx = g.grad_ref(xid);
      for (std::int64_t i = 0; i < gy.numel(); ++i) dx[(*argmax)[std::size_t(i)]] += gy[i];
    };
    return push(std::move(y), {xid}, back);
  }

  Value upsample2(Value xv) {
    const Tensor& x = node(xv).val;
    require_rank4(x, "upsample2");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({B, C, 2 * H, 2 * W});
    const T* xp = x.data();
    T* yp = y.data();
    const std::int64_t planes = std::int64_t(B) * C;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      const T* xs = xp + pl * H * W;
      T* ys = yp + pl * 4 * H * W;
      for (int h = 0; h < 2 * H; ++h) {
        const T* xrow = xs + std::int64_t(h / 2) * W;
        T* yrow = ys + std::int64_t(h) * 2 * W;
        for (int w = 0; w < 2 * W; ++w) yrow[w] = xrow[w / 2];
      }
    }
    const int xid = xv.id;
    auto back = [xid, B, C, H, W](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      Tensor& dx = g.grad_ref(xid);
      const std::int64_t planes = std::int64_t(B) * C;
      for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* gys = gy.data() + pl * 4 * H * W;
        T* dxs = dx.data() + pl * H * W;
        for (int h = 0; h < 2 * H; ++h) {
          const T* gyrow = gys + std::int64_t(h) * 2 * W;
          T* dxrow = dxs + std::int64_t(h / 2) * W;
          for (int w = 0; w < 2 * W; ++w) dxrow[w / 2] += gyrow[w];
        }
      }
    };
    return push(std::move(y), {xid}, back);
  }

  Value relu(Value xv) {
    const Tensor& x = node(xv).val;
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    const int xid = xv.id;
    auto back = [xid](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      const Tensor& xt = g.nodes_[std::size_t(xid)].val;
      Tensor& dx = g.grad_ref(xid);
      // Subgradient 0 at exactly 0.
      const T sign = detail::g_fault_flip_relu_backward.load() ? T(-1) : T(1);
      for (std::int64_t i = 0; i < gy.numel(); ++i)
        if (xt[i] > T(0)) dx[i] += sign * gy[i];
    };
    return push(std::move(y), {xid}, back);
  }

  Value concat_channels(Value av, Value bv) {
    const Tensor& a = node(av).val;
    const Tensor& b = node(bv).val;
    require_rank4(a, "concat_channels");
    require_rank4(b, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
      throw std::invalid_argument("concat_channels: non-channel dims must match");
    const int B = a.dim(0), CA = a.dim(1), CB = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor y({B, CA + CB, H, W});
    const std::int64_t plane = std::int64_t(H) * W;
    for (int n = 0; n < B; ++n) {
      std::copy_n(a.data() + std::int64_t(n) * CA * plane, CA * plane,
                  y.data() + std::int64_t(n) * (CA + CB) * plane);
      std::copy_n(b.data() + std::int64_t(n) * CB * plane, CB * plane,
                  y.data() + std::int64_t(n) * (CA + CB) * plane + CA * plane);
    }
    const int aid = av.id, bid = bv.id;
    auto back = [aid, bid, B, CA, CB, plane](GraphT& g, int self) {
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      if (g.nodes_[std::size_t(aid)].needs_grad) {
        Tensor& da = g.grad_ref(aid);
        for (int n = 0; n < B; ++n) {
          const T* src = gy.data() + std::int64_t(n) * (CA + CB) * plane;
          T* dst = da.data() + std::int64_t(n) * CA * plane;
          for (std::int64_t i = 0; i < CA * plane; ++i) dst[i] += src[i];
        }
      }
      if (g.nodes_[std::size_t(bid)].needs_grad) {
        Tensor& db = g.grad_ref(bid);
        for (int n = 0; n < B; ++n) {
          const T* src = gy.data() + std::int64_t(n) * (CA + CB) * plane + CA * plane;
          T* dst = db.data() + std::int64_t(n) * CB * plane;
          for (std::int64_t i = 0; i < CB * plane; ++i) dst[i] += src[i];
        }
      }
    };
    return push(std::move(y), {aid, bid}, back);
  }

  // Inverted dropout: train mode zeroes with probability p and scales
  // survivors by 1/(1-p); eval mode is the identity (the input value is
  // returned unchanged).
  Value dropout(Value xv, double p, RunMode mode) {
    if (!(p >= 0.0 && p < 1.0))
      throw std::invalid_argument("dropout: p must be in [0, 1)");
    if (mode == RunMode::eval || p == 0.0) return xv;
    const Tensor& x = node(xv).val;
    auto mask = std::make_shared<Tensor>(x.shape());
    const T keep_scale = T(1.0 / (1.0 - p));
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const T m = rng_.uniform() < p ? T(0) : keep_scale;
      (*mask)[i] = m;
      y[i] = x[i] * m;
    }
    const int xid = xv.id;
    auto back = [xid, mask](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      Tensor& dx = g.grad_ref(xid);
      for (std::int64_t i = 0; i < gy.numel(); ++i) dx[i] += gy[i] * (*mask)[i];
    };
    return push(std::move(y), {xid}, back);
  }

  Value add(Value av, Value bv) { return add_scaled(av, T(1), bv, T(1)); }
  Value sub(Value av, Value bv) { return add_scaled(av, T(1), bv, T(-1)); }

  // Elementwise ca*a + cb*b.
  Value add_scaled(Value av, T ca, Value bv, T cb) {
    const Tensor& a = node(av).val;
    const Tensor& b = node(bv).val;
    if (!a.same_shape(b)) throw std::invalid_argument("add_scaled: shape mismatch");
    Tensor y(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = ca * a[i] + cb * b[i];
    const int aid = av.id, bid = bv.id;
    auto back = [aid, bid, ca, cb](GraphT& g, int self) {
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      if (g.nodes_[std::size_t(aid)].needs_grad) {
        Tensor& da = g.grad_ref(aid);
        for (std::int64_t i = 0; i < gy.numel(); ++i) da[i] += ca * gy[i];
      }
      if (g.nodes_[std::size_t(bid)].needs_grad) {
        Tensor& db = g.grad_ref(bid);
        for (std::int64_t i = 0; i < gy.numel(); ++i) db[i] += cb * gy[i];
      }
    };
    return push(std::move(y), {aid, bid}, back);
  }

  Value scale(Value xv, T c) {
    const Tensor& x = node(xv).val;
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = c * x[i];
    const int xid = xv.id;
    auto back = [xid, c](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      Tensor& dx = g.grad_ref(xid);
      for (std::int64_t i = 0; i < gy.numel(); ++i) dx[i] += c * gy[i];
    };
    return push(std::move(y), {xid}, back);
  }

  Value square(Value xv) {
    const Tensor& x = node(xv).val;
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] * x[i];
    const int xid = xv.id;
    auto back = [xid](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      const Tensor& xt = g.nodes_[std::size_t(xid)].val;
      Tensor& dx = g.grad_ref(xid);
      for (std::int64_t i = 0; i < gy.numel(); ++i) dx[i] += T(2) * xt[i] * gy[i];
    };
    return push(std::move(y), {xid}, back);
  }

  Value abs(Value xv) {
    const Tensor& x = node(xv).val;
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] < T(0) ? -x[i] : x[i];
    const int xid = xv.id;
    auto back = [xid](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      const Tensor& xt = g.nodes_[std::size_t(xid)].val;
      Tensor& dx = g.grad_ref(xid);
      // Subgradient 0 at exactly 0.
      for (std::int64_t i = 0; i < gy.numel(); ++i) {
        if (xt[i] > T(0))
          dx[i] += gy[i];
        else if (xt[i] < T(0))
          dx[i] -= gy[i];
      }
    };
    return push(std::move(y), {xid}, back);
  }

  Value sum_all(Value xv) {
    const Tensor& x = node(xv).val;
    T acc = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    Tensor y({1});
    y[0] = acc;
    const int xid = xv.id;
    auto back = [xid](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const T gy = g.nodes_[std::size_t(self)].grad[0];
      Tensor& dx = g.grad_ref(xid);
      for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += gy;
    };
    return push(std::move(y), {xid}, back);
  }

  Value mean_all(Value xv) {
    const Tensor& x = node(xv).val;
    const T inv_n = T(1) / T(x.numel());
    T acc = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    Tensor y({1});
    y[0] = acc * inv_n;
    const int xid = xv.id;
    auto back = [xid, inv_n](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const T gy = g.nodes_[std::size_t(self)].grad[0] * inv_n;
      Tensor& dx = g.grad_ref(xid);
      for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += gy;
    };
    return push(std::move(y), {xid}, back);
  }

  Value sqrt_scalar(Value xv) {
    const Tensor& x = node(xv).val;
    if (x.numel() != 1) throw std::invalid_argument("sqrt_scalar: input must be scalar");
    Tensor y({1});
    y[0] = std::sqrt(x[0]);
    const int xid = xv.id;
    auto back = [xid](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const T yv = g.nodes_[std::size_t(self)].val[0];
      if (yv <= T(0)) return;  // subgradient 0 at the root's kink
      g.grad_ref(xid)[0] += g.nodes_[std::size_t(self)].grad[0] / (T(2) * yv);
    };
    return push(std::move(y), {xid}, back);
  }

  // Channel reduction (B,C,H,W) -> (B,1,H,W), accumulated in ascending
  // channel order.
  Value sum_channels(Value xv) {
    const Tensor& x = node(xv).val;
    require_rank4(x, "sum_channels");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({B, 1, H, W});
    const std::int64_t plane = std::int64_t(H) * W;
    for (int n = 0; n < B; ++n) {
      T* yp = y.data() + std::int64_t(n) * plane;
      for (std::int64_t i = 0; i < plane; ++i) yp[i] = T(0);
      for (int c = 0; c < C; ++c) {
        const T* xp = x.data() + (std::int64_t(n) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) yp[i] += xp[i];
      }
    }
    const int xid = xv.id;
    auto back = [xid, B, C, plane](GraphT& g, int self) {
      if (!g.nodes_[std::size_t(xid)].needs_grad) return;
      const Tensor& gy = g.nodes_[std::size_t(self)].grad;
      Tensor& dx = g.grad_ref(xid);
      for (int n = 0; n < B; ++n) {
        const T* gyp = gy.data() + std::int64_t(n) * plane;
        for (int c = 0; c < C; ++c) {
          T* dxp = dx.data() + (std::int64_t(n) * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) dxp[i] += gyp[i];
        }
      }
    };
    return push(std::move(y), {xid}, back);
  }

  // ---- backward -------------------------------------------------------

  void backward(Value root) {
    Node& r = node(root);
    if (r.val.numel() != 1)
      throw std::logic_error("backward requires a scalar output");
    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<int> stack{root.id};
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      if (reachable[std::size_t(id)]) continue;
      reachable[std::size_t(id)] = 1;
      for (int p : nodes_[std::size_t(id)].parents) stack.push_back(p);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id)
      if (reachable[id] && nodes_[id].grad.empty() && nodes_[id].needs_grad)
        nodes_[id].grad = Tensor(nodes_[id].val.shape());
    grad_ref(root.id)[0] = T(1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[std::size_t(id)];
      if (reachable[std::size_t(id)] && n.needs_grad && n.back) n.back(*this, id);
    }
  }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    std::vector<int> parents;
    std::function<void(GraphT&, int)> back;
    bool needs_grad = false;
  };

  Node& node(Value v) {
    if (!v.valid() || v.id >= int(nodes_.size()))
      throw std::logic_error("invalid graph value handle");
    return nodes_[std::size_t(v.id)];
  }
  const Node& node(Value v) const {
    return const_cast<GraphT*>(this)->node(v);
  }

  Tensor& grad_ref(int id) {
    Node& n = nodes_[std::size_t(id)];
    if (n.grad.empty()) n.grad = Tensor(n.val.shape());
    return n.grad;
  }

  Value push(Tensor val, std::vector<int> parents,
             std::function<void(GraphT&, int)> back, bool leaf_requires_grad = false) {
    Node n;
    n.val = std::move(val);
    n.parents = std::move(parents);
    n.back = std::move(back);
    n.needs_grad = leaf_requires_grad;
    for (int p : n.parents)
      if (nodes_[std::size_t(p)].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Value{int(nodes_.size()) - 1};
  }

  static void require_rank4(const Tensor& t, const char* op) {
    if (t.rank() != 4)
      throw std::invalid_argument(std::string(op) + ": tensor must be rank 4");
  }

  std::vector<Node> nodes_;
  Rng rng_;
};

using Graph = GraphT<float>;

// ---- gradient checking -------------------------------------------------

template <typename T>
struct GradCheckReport {
  T max_rel_err = 0;
  int worst_param = -1;
  std::int64_t worst_elem = -1;
  std::int64_t checked = 0;
  bool pass = false;
};

// Central-difference check of every element of every parameter tensor.
// `eval` must rebuild the graph from the current parameter contents and
// return the scalar objective; when `grads` is non-null it must also run
// backward and append one gradient tensor per parameter, in order. The
// evaluation has to be deterministic (fixed RNG seed) so the two forward
// passes of each difference see the same dropout masks.
//
// Elements whose gradient is near zero would otherwise divide FD roundoff by
// a near-zero denominator, so relative errors are measured against a floor
// tied to the largest gradient magnitude seen in the run. Only use this on
// objectives that are smooth along every element's difference window; kinks
// (relu, pool argmax) that land inside a window read as O(1) errors.
template <typename T>
GradCheckReport<T> grad_check(
    std::span<TensorT<T>* const> params,
    const std::function<T(std::vector<TensorT<T>>* grads)>& eval, T step, T tol) {
  std::vector<TensorT<T>> analytic;
  eval(&analytic);
  if (analytic.size() != params.size())
    throw std::logic_error("grad_check: eval returned wrong gradient count");

  std::vector<std::vector<T>> fds(params.size());
  T biggest = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    TensorT<T>& p = *params[pi];
    fds[pi].resize(std::size_t(p.numel()));
    for (std::int64_t e = 0; e < p.numel(); ++e) {
      const T saved = p[e];
      const T h = step * std::max(T(1), std::abs(saved));
      p[e] = saved + h;
      const T f_plus = eval(nullptr);
      p[e] = saved - h;
      const T f_minus = eval(nullptr);
      p[e] = saved;
      const T fd = (f_plus - f_minus) / (2 * h);
      fds[pi][std::size_t(e)] = fd;
      biggest = std::max({biggest, std::abs(fd), std::abs(analytic[pi][e])});
    }
  }

  GradCheckReport<T> report;
  const T floor = std::max(T(1e-8), T(1e-3) * biggest);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::int64_t e = 0; e < params[pi]->numel(); ++e) {
      const T fd = fds[pi][std::size_t(e)];
      const T an = analytic[pi][e];
      const T denom = std::max({std::abs(fd), std::abs(an), floor});
      const T rel = std::abs(fd - an) / denom;
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = int(pi);
        report.worst_elem = e;
      }
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

template <typename T>
struct DirGradCheckReport {
  T max_rel_err = 0;
  int worst_dir = -1;
  int directions = 0;
  int retries = 0;
  bool pass = false;
};

// Full-network variant: projects the gradient onto random unit directions and
// compares each projection with a central difference along that direction.
// One direction is one difference line through parameter space instead of one
// per element, which keeps the odds of clipping a relu/argmax kink low, and
// the projected derivative is O(|g|/sqrt(n)) rather than per-element, so FD
// roundoff never dominates the denominator. A direction whose error exceeds
// tol is re-measured twice with the step shrunk 32x each time: a genuine
// backward bug reproduces at any step size, while a kink inside the original
// window almost surely escapes the smaller one.
template <typename T>
DirGradCheckReport<T> grad_check_directional(
    std::span<TensorT<T>* const> params,
    const std::function<T(std::vector<TensorT<T>>* grads)>& eval,
    int directions, T step, T tol, std::uint64_t seed) {
  std::vector<TensorT<T>> analytic;
  eval(&analytic);
  if (analytic.size() != params.size())
    throw std::logic_error("grad_check_directional: eval returned wrong gradient count");

  std::vector<std::vector<T>> saved(params.size());
  T pmax = 1;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const TensorT<T>& p = *params[pi];
    saved[pi].assign(p.data(), p.data() + p.numel());
    for (std::int64_t e = 0; e < p.numel(); ++e)
      pmax = std::max(pmax, std::abs(p[e]));
  }

  DirGradCheckReport<T> report;
  report.directions = directions;
  for (int k = 0; k < directions; ++k) {
    Rng rng(derive_seed(seed, 0xD12ull, std::uint64_t(k)));
    std::vector<std::vector<T>> u(params.size());
    double norm2 = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      u[pi].resize(saved[pi].size());
      for (std::size_t e = 0; e < u[pi].size(); ++e) {
        const double g = rng.normal();
        u[pi][e] = T(g);
        norm2 += g * g;
      }
    }
    const T inv = T(1.0 / std::sqrt(std::max(norm2, 1e-300)));
    T dot = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi)
      for (std::size_t e = 0; e < u[pi].size(); ++e) {
        u[pi][e] *= inv;
        dot += analytic[pi][std::int64_t(e)] * u[pi][e];
      }

    T h = step * pmax;
    T err = 0;
    for (int attempt = 0; attempt < 3; ++attempt) {
      if (attempt > 0) {
        h /= 32;
        ++report.retries;
      }
      for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::size_t e = 0; e < u[pi].size(); ++e)
          (*params[pi])[std::int64_t(e)] = saved[pi][e] + h * u[pi][e];
      const T f_plus = eval(nullptr);
      for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::size_t e = 0; e < u[pi].size(); ++e)
          (*params[pi])[std::int64_t(e)] = saved[pi][e] - h * u[pi][e];
      const T f_minus = eval(nullptr);
      for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::size_t e = 0; e < u[pi].size(); ++e)
          (*params[pi])[std::int64_t(e)] = saved[pi][e];
      const T fd = (f_plus - f_minus) / (2 * h);
      err = std::abs(fd - dot) / std::max({std::abs(fd), std::abs(dot), T(1e-10)});
      if (err <= tol) break;
    }
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_dir = k;
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace xdecomp
