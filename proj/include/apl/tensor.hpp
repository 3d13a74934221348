// Copyright 2025 The APL Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "apl/common.hpp"

namespace apl {

namespace detail {

/// One recorded op (or leaf) of the computation graph. Nodes are created in
/// execution order; `seq` is that order, and backward() replays it in exact
/// reverse. A node is single-use: once its backward rule has fired the node is
/// marked consumed and its closure (with saved intermediates) is released.
struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same size as data
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Receives this node's output gradient and accumulates into parents' grads.
    std::function<void(const std::vector<double>&)> backward_fn;
    bool consumed = false;

    std::size_t numel() const { return data.size(); }
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff. Copies are
/// shallow (shared node). Values are immutable after creation; only grad
/// buffers mutate. Any primitive producing a non-finite value from finite
/// inputs throws NumericError.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor identity(std::size_t n, bool requires_grad = false);
    static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t rows() const;  // rank-2 only
    std::size_t cols() const;  // rank-2 only

    const std::vector<double>& data() const;
    double at(std::size_t flat) const;
    double at(std::size_t r, std::size_t c) const;
    double value() const;  // numel()==1 only

    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;  // throws if absent
    void zero_grad();

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }

    /// Internal: wraps an existing graph node.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// ---- primitives (elementwise ops require identical shapes) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // throws on any zero divisor
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // throws on non-positive input
Tensor relu(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Rank-1 inputs: flat concatenation. Rank-2 inputs: row concatenation
/// (column counts must agree).
Tensor concat(const std::vector<Tensor>& parts);
/// n scalar tensors -> shape {n}.
Tensor stack(const std::vector<Tensor>& scalars);
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
Tensor row(const Tensor& a, std::size_t r);       // rank-2 -> rank-1
Tensor pick(const Tensor& a, std::size_t flat);   // -> scalar

Tensor row_softmax(const Tensor& a);
/// Per-row minimum with argmin saved at forward time; gradient routes only to
/// the argmin element, lowest column index on ties. Rank-2 {m,n} -> {m}.
Tensor row_min(const Tensor& a);
Tensor min_all(const Tensor& a);  // -> scalar, lowest flat index on ties

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // mean over axis 0: {m,n} -> {n}
Tensor l2_normalize_rows(const Tensor& a);  // zero rows stay zero (zero grad)
/// Cosine similarity of two equal-numel tensors viewed flat. A zero vector on
/// either side yields similarity 0 with zero gradient (warning logged).
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
/// log(sum(exp(x))) over all elements, computed in stabilized form.
Tensor logsumexp(const Tensor& a);
/// Row r multiplied by the constant factors[r] (factors carry no gradient).
Tensor scale_rows(const Tensor& a, const std::vector<double>& factors);
/// Each row of a divided by the matching element of s (numel(s)==rows(a)).
Tensor div_rows(const Tensor& a, const Tensor& s);

/// Forward identity; contributes zero gradient to its input.
Tensor stop_gradient(const Tensor& a);

/// Reverse accumulation from a scalar loss into all requires_grad leaves.
/// The traversed graph is consumed; a second backward through any part of it
/// throws NumericError.
void backward(const Tensor& loss);

/// Test hook: flips the sign of the named op's backward rule ("" disables).
void set_backward_sabotage(const std::string& op_name);

// Eager helpers on values (no graph).
std::size_t argmax_flat(const std::vector<double>& v);  // lowest index on ties

struct GradCheckResult {
    bool pass = false;
    double max_rel_error = 0.0;
    std::string worst_site;  // "input k, element i"
};

/// Compares reverse-mode gradients of the scalar function f against central
/// finite differences at the given step, element by element, for every input
/// marked requires_grad. Relative error is |a-n| / max(1, |a|, |n|). Failures
/// are reported, never thrown. f must be pure (it is re-evaluated ~2k times).
GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          const std::vector<Tensor>& inputs, double step = 1e-5,
                          double tol = 1e-4);

}  // namespace apl
