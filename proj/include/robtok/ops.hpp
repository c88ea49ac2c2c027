#pragma once

#include "robtok/tensor.hpp"

#include <span>
#include <vector>

namespace robtok {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// [.., m, k] x [.., k, n] -> [.., m, n]; batch extents broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);
/// Euclidean norm of all elements.
Tensor l2_norm(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
/// Swap the last two axes.
Tensor transpose(const Tensor& x);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
inline Tensor concat(const Tensor& a, const Tensor& b, int axis) { return concat(std::vector<Tensor>{a, b}, axis); }
Tensor slice(const Tensor& x, int axis, Index begin, Index end);
/// out.flat[i] = x.flat[index[i]]; backward scatters.
Tensor gather(const Tensor& x, std::span<const Index> index, Shape out_shape);

/// Cosine of two 1-d vectors. Throws ContractError on an exact zero vector.
Tensor cosine_similarity(const Tensor& u, const Tensor& v);

/// Cosine along the last axis: [.., D] x [.., D] -> [..]. Norms carry a
/// 1e-12 guard so an all-zero row yields 0 instead of NaN.
Tensor cosine_similarity_rows(const Tensor& a, const Tensor& b);

inline constexpr double kNormGuard = 1e-12;

enum class Reduction { Mean, Sum };
Tensor mse(const Tensor& x, const Tensor& y, Reduction reduction = Reduction::Mean);

/// Mean cross-entropy of logits [N, K] against class indices.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace robtok
