#pragma once

#include <span>
#include <vector>

#include "dscm/tensor.hpp"

namespace dscm {

// Elementwise binary ops broadcast with trailing-dimension alignment: each
// aligned dimension must match or be 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws DomainError if any divisor element is exactly zero.
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor square(const Tensor& x);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x W + b for x [m,k], W [k,n], b [1,n].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Sum of all elements, rank-0 result.
Tensor sum(const Tensor& x);
/// Sum along one axis of a rank-2 tensor, keeping the axis with size 1.
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);

/// Concatenates rank-2 tensors along `axis`.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Columns [begin, end) of a rank-2 tensor (axis 1) or rows (axis 0).
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Stacks `times` copies of a rank-2 tensor along axis 0.
Tensor repeat_rows(const Tensor& x, std::size_t times);

/// Row-wise softmax / log-softmax over the last axis of a rank-2 tensor.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
/// out[n] = x[n, index[n]] as an [N,1] column.
Tensor pick(const Tensor& x, std::span<const std::size_t> index);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& x);
Tensor operator+(const Tensor& a, double b);
Tensor operator-(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator/(const Tensor& a, double b);
Tensor operator+(double a, const Tensor& b);
Tensor operator-(double a, const Tensor& b);
Tensor operator*(double a, const Tensor& b);

}  // namespace dscm
