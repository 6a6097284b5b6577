#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hvqa/tensor.hpp"

namespace hvqa {

enum class ElementwiseKind { kAdd, kSub, kMul, kRelu, kSigmoid };
enum class Padding { kSame, kValid };

// Binary element-wise ops accept equal shapes, or operands whose shapes differ
// only by a leading run of size-1 (or missing) extents. [d] + [w,h,d] and
// [1,d] + [n,d] broadcast; [n,1] + [n,d] is rejected.
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>* b = nullptr);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// [m,k] x [k,n] -> [m,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// [m,n] -> [n,m].
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

/// Input [H,W,C] or [N,H,W,C], kernel [kh,kw,C,Cout]. Same padding gives
/// ceil(H/stride) outputs with symmetric zero padding, the odd pixel on the high side.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, Padding padding);

/// Output extent of conv2d along one spatial axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Plain-array softmax over all elements (used by selection code, no graph).
template <typename T>
std::vector<T> softmax_values(std::span<const T> x);

/// L2 norm over the last axis: [..., d] -> [...]. The all-zero row has subgradient 0.
template <typename T>
Tensor<T> l2_norm_map(const Tensor<T>& m);

/// Indices of the k largest values, by descending value, ties by ascending index.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> p, std::size_t k);

/// Rows of m (all leading axes flattened into cells) at `indices` -> [k, d].
/// Backward scatters into the selected cells and leaves every other cell untouched.
template <typename T>
Tensor<T> gather_cells(const Tensor<T>& m, std::span<const std::size_t> indices);

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x);

/// Forward value is `hard` exactly; backward sends the upstream gradient to g unchanged.
/// Equivalent to g + stop(hard - g) without the rounding of the round trip.
template <typename T>
Tensor<T> straight_through(const Tensor<T>& g, const Array<T>& hard);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> sum_squares(const Tensor<T>& x);

/// [k,d] -> [d], rows added in order 0..k-1.
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x);

/// [r,d] with segment boundaries offsets[0]=0 < ... < offsets[S]=r -> [S,d].
template <typename T>
Tensor<T> segment_sum(const Tensor<T>& x, std::span<const std::size_t> offsets);

/// Multiplies row i of [r,d] by w[i].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

/// Multiply-accumulate counter for matrix products on the calling thread.
namespace instrument {
std::uint64_t mac_count();
void reset_mac_count();
void add_macs(std::uint64_t n);
}  // namespace instrument

}  // namespace hvqa
