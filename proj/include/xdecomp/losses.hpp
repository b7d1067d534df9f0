#pragma once

// Training objective: an elastic-net penalty on the per-layer decomposition
// plus an l2 reconstruction consistency term, combined as
//   total = decomposition + lambda_r * reconstruction.
// lambda_d blends the decomposition's l2 and l1 parts (lambda_d = 1 is pure
// l2, lambda_d = 0 pure l1); lambda_r = 0 switches the consistency term off
// entirely.
//
// Two normalizations are supported. `mean` (the default everywhere) uses
// mean-square / mean-absolute reductions so magnitudes are comparable across
// image sizes and batch shapes. `root` uses the unnormalized vector norms
// (sqrt of sum of squares, plain sum of absolutes).

#include <stdexcept>

#include "xdecomp/autodiff.hpp"
#include "xdecomp/tensor.hpp"

namespace xdecomp {

enum class LossNorm { mean, root };

struct LossWeights {
  double lambda_r = 0.5;  // reconstruction weight
  double lambda_d = 0.1;  // l2 share of the elastic net

  void validate() const {
    if (!(lambda_r >= 0.0))
      throw std::invalid_argument("LossWeights: lambda_r must be >= 0");
    if (!(lambda_d >= 0.0 && lambda_d <= 1.0))
      throw std::invalid_argument("LossWeights: lambda_d must be in [0, 1]");
  }
};

template <typename T>
typename GraphT<T>::Value decomposition_loss_node(GraphT<T>& g,
                                                  typename GraphT<T>::Value pred,
                                                  typename GraphT<T>::Value target,
                                                  T lambda_d,
                                                  LossNorm norm = LossNorm::mean) {
  if (!(lambda_d >= T(0) && lambda_d <= T(1)))
    throw std::invalid_argument("decomposition_loss: lambda_d must be in [0, 1]");
  auto diff = g.sub(pred, target);
  typename GraphT<T>::Value l2, l1;
  if (norm == LossNorm::mean) {
    l2 = g.mean_all(g.square(diff));
    l1 = g.mean_all(g.abs(diff));
  } else {
    l2 = g.sqrt_scalar(g.sum_all(g.square(diff)));
    l1 = g.sum_all(g.abs(diff));
  }
  return g.add_scaled(l2, lambda_d, l1, T(1) - lambda_d);
}

template <typename T>
typename GraphT<T>::Value reconstruction_loss_node(GraphT<T>& g,
                                                   typename GraphT<T>::Value fused,
                                                   typename GraphT<T>::Value input,
                                                   LossNorm norm = LossNorm::mean) {
  auto diff = g.sub(fused, input);
  if (norm == LossNorm::mean) return g.mean_all(g.square(diff));
  return g.sqrt_scalar(g.sum_all(g.square(diff)));
}

// lambda_r == 0 skips the reconstruction branch so the total is *identical*
// (not just close) to the decomposition loss.
template <typename T>
typename GraphT<T>::Value total_loss_node(GraphT<T>& g,
                                          typename GraphT<T>::Value pred,
                                          typename GraphT<T>::Value target,
                                          typename GraphT<T>::Value fused,
                                          typename GraphT<T>::Value input,
                                          const LossWeights& w,
                                          LossNorm norm = LossNorm::mean) {
  w.validate();
  auto ld = decomposition_loss_node(g, pred, target, T(w.lambda_d), norm);
  if (w.lambda_r == 0.0) return ld;
  auto lr = reconstruction_loss_node(g, fused, input, norm);
  return g.add_scaled(ld, T(1), lr, T(w.lambda_r));
}

// Plain evaluations (no gradients); each builds a small throwaway graph so
// every loss number in the project comes from the same code path.

template <typename T>
T decomposition_loss(const TensorT<T>& pred, const TensorT<T>& target, T lambda_d,
                     LossNorm norm = LossNorm::mean) {
  GraphT<T> g;
  auto v = decomposition_loss_node(g, g.leaf(pred), g.leaf(target), lambda_d, norm);
  return g.value(v)[0];
}

template <typename T>
T reconstruction_loss(const TensorT<T>& fused, const TensorT<T>& input,
                      LossNorm norm = LossNorm::mean) {
  GraphT<T> g;
  auto v = reconstruction_loss_node(g, g.leaf(fused), g.leaf(input), norm);
  return g.value(v)[0];
}

template <typename T>
T total_loss(const TensorT<T>& pred, const TensorT<T>& target,
             const TensorT<T>& fused, const TensorT<T>& input,
             const LossWeights& w, LossNorm norm = LossNorm::mean) {
  GraphT<T> g;
  auto v = total_loss_node(g, g.leaf(pred), g.leaf(target), g.leaf(fused),
                           g.leaf(input), w, norm);
  return g.value(v)[0];
}

}  // namespace xdecomp
