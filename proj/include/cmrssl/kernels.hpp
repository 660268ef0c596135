#pragma once

// U-net building blocks.
//
// `kernels::` holds the OpenMP-parallel implementations used for training:
// convolutions are lowered to im2col + GEMM and parallelised over the batch.
// Weight gradients are accumulated per sample and reduced in sample order, so
// results do not depend on the thread count.
//
// `reference::` holds direct serial loops with the same signatures; tests and
// the benchmark compare the two.
//
// Weight layouts:
//   conv3x3   [cout][cin][3][3]            (3x3, stride 1, zero padding 1)
//   upconv2x2 [cout][2][2][cin]            (transposed 2x2, stride 2)
//   conv1x1   [cout][cin]
// Backward functions accumulate into dw/db and overwrite dx when non-null.

#include <cstdint>
#include <span>
#include <vector>

#include "cmrssl/tensor.hpp"

namespace cmrssl {

#define CMRSSL_KERNEL_DECLS                                                                       \
    template <typename T>                                                                         \
    void conv3x3_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b, int cout, \
                         Tensor<T>& y);                                                           \
    template <typename T>                                                                         \
    void conv3x3_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,          \
                          std::span<T> dw, std::span<T> db, Tensor<T>* dx);                       \
    template <typename T>                                                                         \
    void upconv2x2_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b,        \
                           int cout, Tensor<T>& y);                                               \
    template <typename T>                                                                         \
    void upconv2x2_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,        \
                            std::span<T> dw, std::span<T> db, Tensor<T>* dx);                     \
    template <typename T>                                                                         \
    void conv1x1_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b, int cout, \
                         Tensor<T>& y);                                                           \
    template <typename T>                                                                         \
    void conv1x1_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,          \
                          std::span<T> dw, std::span<T> db, Tensor<T>* dx);                       \
    template <typename T>                                                                         \
    void relu_forward(Tensor<T>& x);                                                              \
    template <typename T>                                                                         \
    void relu_backward(const Tensor<T>& y, Tensor<T>& dy);                                        \
    template <typename T>                                                                         \
    void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<std::uint8_t>& argmax);   \
    template <typename T>                                                                         \
    void maxpool2_backward(const Tensor<T>& dy, const std::vector<std::uint8_t>& argmax,          \
                           Tensor<T>& dx);                                                        \
    /* Mean over all pixels of -log softmax(logits)[label]. Fills dlogits when non-null. */       \
    template <typename T>                                                                         \
    double softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels,   \
                                 Tensor<T>* dlogits);

namespace kernels {
CMRSSL_KERNEL_DECLS

/// Concatenates along channels: y = [a, b].
template <typename T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y);
/// Splits a channel-concatenated gradient into its first `ca` channels and the rest.
template <typename T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>* da, Tensor<T>* db);
} // namespace kernels

namespace reference {
CMRSSL_KERNEL_DECLS
} // namespace reference

#undef CMRSSL_KERNEL_DECLS

} // namespace cmrssl
