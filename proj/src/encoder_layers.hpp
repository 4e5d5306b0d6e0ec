#pragma once

// Layer kernels shared by the encoder and its gradient tests.

#include "uisearch/encoder.hpp"

namespace uisearch::nn::detail {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kLayerNormEps = 1e-5;

// Uses t.neighbours and t.log_weight for the attention mask.
void gat_forward(const GatLayer& layer, const Mat& x, const ForwardTrace& t, ForwardTrace::Gat& out);
// Accumulates into grad; returns d loss / d input.
Mat gat_backward(const GatLayer& layer, const ForwardTrace& t, const ForwardTrace::Gat& rec,
                 const Mat& dy, GatLayer& grad);

Mat layernorm_forward(const LayerNorm& ln, const Mat& x, ForwardTrace::Norm& rec);
Mat layernorm_backward(const LayerNorm& ln, const ForwardTrace::Norm& rec, const Mat& dy,
                       LayerNorm& grad);

}  // namespace uisearch::nn::detail
