#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moelab/ndgrad/tensor.hpp"

// Differentiable operations. Everything except the elementwise suite expects
// rank-2 operands. Broadcasting is limited to a [1x1] scalar operand in the
// binary elementwise ops and the explicit row-bias / row-scale ops.
namespace moelab::ndgrad {

// Elementwise (any rank, equal shapes or one side a single element).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// log(max(x, eps)); clamped entries receive zero gradient.
Tensor log_clamped(const Tensor& x, double eps);

// Reductions to [1x1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Keep-dim reductions along axis 0 (result [1xC]) or axis 1 (result [Rx1]).
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean_axis(const Tensor& x, int axis);
// Max along an axis; gradient flows to the arg-max, lowest index on ties.
Tensor maxpool(const Tensor& x, int axis);

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// x[RxC] + bias[1xC] on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
// Row r of x[RxC] multiplied by w[Rx1](r).
Tensor scale_rows(const Tensor& x, const Tensor& w);
// Each row divided by its sum.
Tensor row_normalize(const Tensor& x);

Tensor softmax(const Tensor& x, int axis = 1);
Tensor log_softmax(const Tensor& x);
// Row softmax over entries with mask != 0; masked entries are exactly 0.
// Every row needs at least one unmasked entry.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);
// Element (rows[i], cols[i]) for each i, as [nx1].
Tensor gather_elements(const Tensor& x, std::span<const std::size_t> rows,
                       std::span<const std::size_t> cols);
// [out_rows x C] result with parts[p] row i added into row index[p][i].
Tensor scatter_rows_sum(std::span<const Tensor> parts,
                        std::span<const std::vector<std::size_t>> index, std::size_t out_rows);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// A contiguous run of rows belonging to one sequence.
struct Segment {
  std::size_t begin = 0;
  std::size_t length = 0;
};

// Multi-head scaled dot-product attention over row-packed sequences. Query
// segment s attends only to key segment s; with `causal` set, local query i
// sees local keys 0..i (query and key segments must then have equal length).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const Segment> q_segments, std::span<const Segment> kv_segments,
                 bool causal);

// Row t of each segment becomes the mean of rows [begin, begin + t) of that
// segment; the first row of a segment is zero.
Tensor prefix_mean(const Tensor& x, std::span<const Segment> segments);

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
// Targets < 0 are ignored; throws ValidationError when every row is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);

}  // namespace moelab::ndgrad
