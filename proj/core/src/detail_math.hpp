#pragma once

#include <cmath>

namespace pttt::detail {

inline constexpr double kLayerNormEps = 1e-5;

// Exact GELU, x * Phi(x).
template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865475)));
}

// d/dx gelu = Phi(x) + x * phi(x).
template <typename S>
S gelu_grad(S x) {
  const S phi = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
  const S Phi = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475)));
  return Phi + x * phi;
}

}  // namespace pttt::detail
