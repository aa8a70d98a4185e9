#pragma once

#include <cstdint>
#include <string>

#include "nowcast/tensor.hpp"

namespace nowcast {

// Valid-convolution output extent: floor((in - k) / s) + 1.
// Errors if the input is smaller than the kernel; `where` names the layer.
std::int64_t conv_output_extent(std::int64_t in, std::int64_t k, std::int64_t s,
                                const std::string& where = "conv");

// out[b,i,j,co] = sum_{di,dj,ci} x[b, i*s+di, j*s+dj, ci] * w[di,dj,ci,co].
// Accumulation order per output element is fixed (di, dj, ci ascending) so
// results are bit-reproducible; optimized variants must keep this order.
void conv2d_forward(const Tensor& x, const Tensor& w, std::int64_t stride, Tensor& out);

// Adjoints of conv2d_forward. Both accumulate (+=) into their outputs.
void conv2d_backward_input(const Tensor& w, const Tensor& gout, std::int64_t stride,
                           Tensor& gx);
void conv2d_backward_weight(const Tensor& x, const Tensor& gout, std::int64_t stride,
                            Tensor& gw);

// out[b,i,j,c] = x[b,i,j,c] + bias[c]
void bias_add_forward(const Tensor& x, const Tensor& bias, Tensor& out);
void bias_add_backward(const Tensor& gout, Tensor& gx, Tensor& gbias);

// Eager valid convolution with bias, the reference entry point:
// out = conv2d(x, w, stride) + b broadcast over channels.
Tensor conv2d_valid(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride);

// Nearest-neighbour upsampling: out[b,i,j,c] = x[b, i/f, j/f, c].
void upsample_nearest_forward(const Tensor& x, std::int64_t factor, Tensor& out);
void upsample_nearest_backward(const Tensor& gout, std::int64_t factor, Tensor& gx);

// Center crop to (h, w): removes floor((H-h)/2) rows on top, the remainder at
// the bottom (same for columns).
void center_crop_forward(const Tensor& x, std::int64_t h, std::int64_t w, Tensor& out);
void center_crop_backward(const Tensor& gout, Tensor& gx);
std::int64_t crop_offset(std::int64_t in, std::int64_t target);

// Non-overlapping average pooling by integer factor; extents must divide.
void avgpool_forward(const Tensor& x, std::int64_t factor, Tensor& out);
void avgpool_backward(const Tensor& gout, std::int64_t factor, Tensor& gx);

void relu_forward(const Tensor& x, Tensor& out);
// ReLU subgradient at 0 is 0.
void relu_backward(const Tensor& x, const Tensor& gout, Tensor& gx);

// Mean squared error over the concentric (h, w) center crop of both inputs,
// averaged over every retained element (batch, space, channels).
Scalar mse_cropped(const Tensor& pred, const Tensor& truth, std::int64_t h, std::int64_t w);
void mse_cropped_backward(const Tensor& pred, const Tensor& truth, std::int64_t h,
                          std::int64_t w, Scalar gout, Tensor& gpred, Tensor& gtruth);

void concat_channels_forward(const Tensor& a, const Tensor& b, Tensor& out);

} // namespace nowcast
