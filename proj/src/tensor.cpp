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

#include "apl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <unordered_set>

namespace apl {

namespace {

std::atomic<std::uint64_t> g_seq{0};
std::string g_sabotage_op;
std::atomic<int> g_warn_budget{8};

using NodePtr = std::shared_ptr<detail::Node>;

std::size_t product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

[[noreturn]] void fail(const char* op, const std::string& msg) {
    throw NumericError(std::string(op) + ": " + msg);
}

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) fail(op, "non-finite output");
    }
}

void ensure_grad(detail::Node& n) {
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
}

void require_rank2(const char* op, const Tensor& t) {
    if (t.rank() != 2) fail(op, "expected a rank-2 tensor");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) fail(op, "shape mismatch");
}

/// Builds the output node. `fn` (which captures parent node pointers) is kept
/// only when some input requires grad.
Tensor finish(const char* op, std::vector<std::size_t> shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs,
              std::function<void(const std::vector<double>&)> fn) {
    check_finite(op, data);
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->seq = ++g_seq;
    node->op = op;
    bool rg = false;
    for (const Tensor* t : inputs) rg = rg || t->requires_grad();
    if (rg) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) node->parents.push_back(t->node_ptr());
        node->backward_fn = std::move(fn);
    }
    return Tensor(node);
}

/// Accumulates v into parent's grad slot if it participates in the graph.
inline void accum(const NodePtr& p, std::size_t idx, double v) {
    if (!p->requires_grad) return;
    ensure_grad(*p);
    p->grad[idx] += v;
}

inline bool wants_grad(const NodePtr& p) { return p->requires_grad; }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
    if (product(shape) != data.size()) {
        throw NumericError("Tensor: shape does not match data length");
    }
    check_finite("Tensor", data);
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = ++g_seq;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::vector<double> d(product(shape), 0.0);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::vector<double> d(product(shape), value);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return Tensor({n, n}, std::move(d), requires_grad);
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
    if (rows.empty()) throw NumericError("Tensor::matrix: empty");
    std::size_t c = rows[0].size();
    std::vector<double> d;
    d.reserve(rows.size() * c);
    for (const auto& r : rows) {
        if (r.size() != c) throw NumericError("Tensor::matrix: ragged rows");
        d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), c}, std::move(d), requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
    if (!node_) throw NumericError("Tensor: undefined");
    return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::size_t Tensor::rows() const {
    require_rank2("rows", *this);
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require_rank2("cols", *this);
    return node_->shape[1];
}

const std::vector<double>& Tensor::data() const {
    if (!node_) throw NumericError("Tensor: undefined");
    return node_->data;
}

double Tensor::at(std::size_t flat) const {
    if (flat >= numel()) throw NumericError("Tensor::at: index out of range");
    return node_->data[flat];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    require_rank2("at", *this);
    if (r >= node_->shape[0] || c >= node_->shape[1]) {
        throw NumericError("Tensor::at: index out of range");
    }
    return node_->data[r * node_->shape[1] + c];
}

double Tensor::value() const {
    if (numel() != 1) throw NumericError("Tensor::value: not a scalar");
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw NumericError("Tensor::grad: gradient not populated");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    NodePtr pa = a.node_ptr(), pb = b.node_ptr();
    return finish("add", a.shape(), std::move(out), {&a, &b},
                  [pa, pb](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          accum(pa, i, g[i]);
                          accum(pb, i, g[i]);
                      }
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    NodePtr pa = a.node_ptr(), pb = b.node_ptr();
    return finish("sub", a.shape(), std::move(out), {&a, &b},
                  [pa, pb](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          accum(pa, i, g[i]);
                          accum(pb, i, -g[i]);
                      }
                  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    NodePtr pa = a.node_ptr(), pb = b.node_ptr();
    return finish("mul", a.shape(), std::move(out), {&a, &b},
                  [pa, pb](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          accum(pa, i, g[i] * pb->data[i]);
                          accum(pb, i, g[i] * pa->data[i]);
                      }
                  });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (b.data()[i] == 0.0) fail("div", "division by zero");
        out[i] = a.data()[i] / b.data()[i];
    }
    NodePtr pa = a.node_ptr(), pb = b.node_ptr();
    return finish("div", a.shape(), std::move(out), {&a, &b},
                  [pa, pb](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          double bi = pb->data[i];
                          accum(pa, i, g[i] / bi);
                          accum(pb, i, -g[i] * pa->data[i] / (bi * bi));
                      }
                  });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    NodePtr pa = a.node_ptr();
    return finish("add_scalar", a.shape(), std::move(out), {&a},
                  [pa](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) accum(pa, i, g[i]);
                  });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    NodePtr pa = a.node_ptr();
    return finish("mul_scalar", a.shape(), std::move(out), {&a},
                  [pa, s](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) accum(pa, i, g[i] * s);
                  });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    NodePtr pa = a.node_ptr();
    std::vector<double> saved = out;
    return finish("exp", a.shape(), std::move(out), {&a},
                  [pa, saved = std::move(saved)](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) accum(pa, i, g[i] * saved[i]);
                  });
}

Tensor log(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.data()[i] <= 0.0) fail("log", "log of non-positive value");
        out[i] = std::log(a.data()[i]);
    }
    NodePtr pa = a.node_ptr();
    return finish("log", a.shape(), std::move(out), {&a},
                  [pa](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) accum(pa, i, g[i] / pa->data[i]);
                  });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.data()[i]);
    NodePtr pa = a.node_ptr();
    return finish("relu", a.shape(), std::move(out), {&a},
                  [pa](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          if (pa->data[i] > 0.0) accum(pa, i, g[i]);
                      }
                  });
}

// ---------------------------------------------------------------------------
// Matrix / shape primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) fail("matmul", "inner dimensions do not match");
    std::vector<double> out(m * n, 0.0);
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double av = da[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * db[p * n + j];
        }
    }
    NodePtr pa = a.node_ptr(), pb = b.node_ptr();
    return finish("matmul", {m, n}, std::move(out), {&a, &b},
                  [pa, pb, m, k, n](const std::vector<double>& g) {
                      if (wants_grad(pa)) {
                          ensure_grad(*pa);
                          for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < n; ++j)
                                      s += g[i * n + j] * pb->data[p * n + j];
                                  pa->grad[i * k + p] += s;
                              }
                      }
                      if (wants_grad(pb)) {
                          ensure_grad(*pb);
                          for (std::size_t p = 0; p < k; ++p)
                              for (std::size_t j = 0; j < n; ++j) {
                                  double s = 0.0;
                                  for (std::size_t i = 0; i < m; ++i)
                                      s += pa->data[i * k + p] * g[i * n + j];
                                  pb->grad[p * n + j] += s;
                              }
                      }
                  });
}

Tensor transpose(const Tensor& a) {
    require_rank2("transpose", a);
    std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    NodePtr pa = a.node_ptr();
    return finish("transpose", {n, m}, std::move(out), {&a},
                  [pa, m, n](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j)
                              accum(pa, i * n + j, g[j * m + i]);
                  });
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("concat", "no inputs");
    std::size_t rank = parts[0].rank();
    std::vector<double> out;
    std::vector<std::size_t> shape;
    if (rank == 1) {
        for (const auto& p : parts) {
            if (p.rank() != 1) fail("concat", "mixed ranks");
            out.insert(out.end(), p.data().begin(), p.data().end());
        }
        shape = {out.size()};
    } else if (rank == 2) {
        std::size_t c = parts[0].cols(), m = 0;
        for (const auto& p : parts) {
            if (p.rank() != 2 || p.cols() != c) fail("concat", "column counts differ");
            out.insert(out.end(), p.data().begin(), p.data().end());
            m += p.rows();
        }
        shape = {m, c};
    } else {
        fail("concat", "rank must be 1 or 2");
    }
    std::vector<NodePtr> ps;
    ps.reserve(parts.size());
    for (const auto& p : parts) ps.push_back(p.node_ptr());

    check_finite("concat", out);
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(out);
    node->seq = ++g_seq;
    node->op = "concat";
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    if (rg) {
        node->requires_grad = true;
        node->parents.assign(ps.begin(), ps.end());
        node->backward_fn = [ps](const std::vector<double>& g) {
            std::size_t off = 0;
            for (const auto& p : ps) {
                for (std::size_t i = 0; i < p->data.size(); ++i) accum(p, i, g[off + i]);
                off += p->data.size();
            }
        };
    }
    return Tensor(node);
}

Tensor stack(const std::vector<Tensor>& scalars) {
    if (scalars.empty()) fail("stack", "no inputs");
    std::vector<double> out;
    out.reserve(scalars.size());
    std::vector<NodePtr> ps;
    ps.reserve(scalars.size());
    bool rg = false;
    for (const auto& s : scalars) {
        if (s.numel() != 1) fail("stack", "inputs must be scalars");
        out.push_back(s.data()[0]);
        ps.push_back(s.node_ptr());
        rg = rg || s.requires_grad();
    }
    check_finite("stack", out);
    auto node = std::make_shared<detail::Node>();
    node->shape = {out.size()};
    node->data = std::move(out);
    node->seq = ++g_seq;
    node->op = "stack";
    if (rg) {
        node->requires_grad = true;
        node->parents.assign(ps.begin(), ps.end());
        node->backward_fn = [ps](const std::vector<double>& g) {
            for (std::size_t i = 0; i < ps.size(); ++i) accum(ps[i], 0, g[i]);
        };
    }
    return Tensor(node);
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (product(shape) != a.numel()) fail("reshape", "element count mismatch");
    NodePtr pa = a.node_ptr();
    std::vector<double> out = a.data();
    return finish("reshape", std::move(shape), std::move(out), {&a},
                  [pa](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i) accum(pa, i, g[i]);
                  });
}

Tensor row(const Tensor& a, std::size_t r) {
    require_rank2("row", a);
    if (r >= a.rows()) fail("row", "row index out of range");
    std::size_t n = a.cols();
    std::vector<double> out(a.data().begin() + r * n, a.data().begin() + (r + 1) * n);
    NodePtr pa = a.node_ptr();
    return finish("row", {n}, std::move(out), {&a},
                  [pa, r, n](const std::vector<double>& g) {
                      for (std::size_t j = 0; j < n; ++j) accum(pa, r * n + j, g[j]);
                  });
}

Tensor pick(const Tensor& a, std::size_t flat) {
    if (flat >= a.numel()) fail("pick", "index out of range");
    NodePtr pa = a.node_ptr();
    return finish("pick", {1}, {a.data()[flat]}, {&a},
                  [pa, flat](const std::vector<double>& g) { accum(pa, flat, g[0]); });
}

// ---------------------------------------------------------------------------
// Softmax / reductions / norms
// ---------------------------------------------------------------------------

Tensor row_softmax(const Tensor& a) {
    require_rank2("row_softmax", a);
    std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = a.data().data() + i * n;
        double mx = *std::max_element(x, x + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(x[j] - mx);
            s += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
    }
    NodePtr pa = a.node_ptr();
    std::vector<double> y = out;
    return finish("row_softmax", {m, n}, std::move(out), {&a},
                  [pa, y = std::move(y), m, n](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i) {
                          double dot = 0.0;
                          for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                          for (std::size_t j = 0; j < n; ++j)
                              accum(pa, i * n + j, y[i * n + j] * (g[i * n + j] - dot));
                      }
                  });
}

Tensor row_min(const Tensor& a) {
    require_rank2("row_min", a);
    std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m);
    std::vector<std::size_t> arg(m);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j) {
            if (a.data()[i * n + j] < a.data()[i * n + best]) best = j;
        }
        arg[i] = best;
        out[i] = a.data()[i * n + best];
    }
    NodePtr pa = a.node_ptr();
    return finish("row_min", {m}, std::move(out), {&a},
                  [pa, arg = std::move(arg), n](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < g.size(); ++i)
                          accum(pa, i * n + arg[i], g[i]);
                  });
}

Tensor min_all(const Tensor& a) {
    if (a.numel() == 0) fail("min_all", "empty tensor");
    std::size_t best = 0;
    for (std::size_t i = 1; i < a.numel(); ++i) {
        if (a.data()[i] < a.data()[best]) best = i;
    }
    NodePtr pa = a.node_ptr();
    return finish("min_all", {1}, {a.data()[best]}, {&a},
                  [pa, best](const std::vector<double>& g) { accum(pa, best, g[0]); });
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    NodePtr pa = a.node_ptr();
    return finish("sum_all", {1}, {s}, {&a},
                  [pa](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < pa->data.size(); ++i) accum(pa, i, g[0]);
                  });
}

Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) fail("mean_all", "empty tensor");
    double s = 0.0;
    for (double x : a.data()) s += x;
    double inv = 1.0 / static_cast<double>(a.numel());
    NodePtr pa = a.node_ptr();
    return finish("mean_all", {1}, {s * inv}, {&a},
                  [pa, inv](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < pa->data.size(); ++i) accum(pa, i, g[0] * inv);
                  });
}

Tensor mean_rows(const Tensor& a) {
    require_rank2("mean_rows", a);
    std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
    double inv = 1.0 / static_cast<double>(m);
    for (auto& x : out) x *= inv;
    NodePtr pa = a.node_ptr();
    return finish("mean_rows", {n}, std::move(out), {&a},
                  [pa, m, n, inv](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j) accum(pa, i * n + j, g[j] * inv);
                  });
}

Tensor l2_normalize_rows(const Tensor& a) {
    require_rank2("l2_normalize_rows", a);
    std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a.data()[i * n + j] * a.data()[i * n + j];
        norms[i] = std::sqrt(s);
        if (norms[i] == 0.0) {
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] = 0.0;
        } else {
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] / norms[i];
        }
    }
    NodePtr pa = a.node_ptr();
    std::vector<double> y = out;
    return finish("l2_normalize_rows", {m, n}, std::move(out), {&a},
                  [pa, y = std::move(y), norms = std::move(norms), m,
                   n](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i) {
                          if (norms[i] == 0.0) continue;
                          double dot = 0.0;
                          for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                          for (std::size_t j = 0; j < n; ++j)
                              accum(pa, i * n + j, (g[i * n + j] - dot * y[i * n + j]) / norms[i]);
                      }
                  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) fail("cosine_similarity", "element counts differ");
    std::size_t n = a.numel();
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    NodePtr pa = a.node_ptr(), pb = b.node_ptr();
    if (na == 0.0 || nb == 0.0) {
        if (g_warn_budget.fetch_sub(1) > 0) {
            log_warn("cosine_similarity: zero vector input, returning 0 with zero gradient");
        }
        return finish("cosine_similarity", {1}, {0.0}, {&a, &b},
                      [](const std::vector<double>&) {});
    }
    double c = dot / (na * nb);
    return finish("cosine_similarity", {1}, {c}, {&a, &b},
                  [pa, pb, na, nb, c, n](const std::vector<double>& g) {
                      double inv = 1.0 / (na * nb);
                      for (std::size_t i = 0; i < n; ++i) {
                          accum(pa, i, g[0] * (pb->data[i] * inv - c * pa->data[i] / (na * na)));
                          accum(pb, i, g[0] * (pa->data[i] * inv - c * pb->data[i] / (nb * nb)));
                      }
                  });
}

Tensor logsumexp(const Tensor& a) {
    if (a.numel() == 0) fail("logsumexp", "empty tensor");
    double mx = *std::max_element(a.data().begin(), a.data().end());
    double s = 0.0;
    for (double x : a.data()) s += std::exp(x - mx);
    double out = mx + std::log(s);
    NodePtr pa = a.node_ptr();
    return finish("logsumexp", {1}, {out}, {&a},
                  [pa, out](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < pa->data.size(); ++i)
                          accum(pa, i, g[0] * std::exp(pa->data[i] - out));
                  });
}

Tensor scale_rows(const Tensor& a, const std::vector<double>& factors) {
    require_rank2("scale_rows", a);
    std::size_t m = a.rows(), n = a.cols();
    if (factors.size() != m) fail("scale_rows", "factor count does not match rows");
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] * factors[i];
    NodePtr pa = a.node_ptr();
    return finish("scale_rows", {m, n}, std::move(out), {&a},
                  [pa, factors, n](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < factors.size(); ++i)
                          for (std::size_t j = 0; j < n; ++j)
                              accum(pa, i * n + j, g[i * n + j] * factors[i]);
                  });
}

Tensor div_rows(const Tensor& a, const Tensor& s) {
    require_rank2("div_rows", a);
    std::size_t m = a.rows(), n = a.cols();
    if (s.numel() != m) fail("div_rows", "divisor count does not match rows");
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        if (s.data()[i] == 0.0) fail("div_rows", "division by zero");
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] / s.data()[i];
    }
    NodePtr pa = a.node_ptr(), ps = s.node_ptr();
    return finish("div_rows", {m, n}, std::move(out), {&a, &s},
                  [pa, ps, m, n](const std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i) {
                          double si = ps->data[i];
                          double dsi = 0.0;
                          for (std::size_t j = 0; j < n; ++j) {
                              accum(pa, i * n + j, g[i * n + j] / si);
                              dsi -= g[i * n + j] * pa->data[i * n + j] / (si * si);
                          }
                          accum(ps, i, dsi);
                      }
                  });
}

Tensor stop_gradient(const Tensor& a) {
    // Fresh constant node: no parents, no gradient path.
    return Tensor(a.shape(), a.data(), false);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

void set_backward_sabotage(const std::string& op_name) { g_sabotage_op = op_name; }

void backward(const Tensor& loss) {
    if (!loss.defined()) throw NumericError("backward: undefined loss");
    if (loss.numel() != 1) throw NumericError("backward: loss must be a scalar");
    auto root = loss.node_ptr();
    if (!root->requires_grad) return;  // no learnable leaves reachable

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> work{root.get()};
    seen.insert(root.get());
    while (!work.empty()) {
        detail::Node* n = work.back();
        work.pop_back();
        if (n->consumed) {
            throw NumericError("backward: graph already consumed (graphs are single-use)");
        }
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) work.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

    ensure_grad(*root);
    root->grad[0] = 1.0;

    for (detail::Node* n : order) {
        if (!n->backward_fn) continue;  // leaf
        if (!n->grad.empty()) {
            if (!g_sabotage_op.empty() && g_sabotage_op == n->op) {
                for (auto& g : n->grad) g = -g;
            }
            n->backward_fn(n->grad);
        }
        n->consumed = true;
        n->backward_fn = nullptr;
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

std::size_t argmax_flat(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          const std::vector<Tensor>& inputs, double step, double tol) {
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.emplace_back(t.shape(), t.data(), t.requires_grad());
    Tensor loss = f(leaves);
    if (loss.numel() != 1) throw NumericError("gradcheck: f must be scalar-valued");
    backward(loss);

    auto eval_at = [&](std::size_t k, std::size_t elem, double delta) {
        std::vector<Tensor> probe;
        probe.reserve(inputs.size());
        for (std::size_t j = 0; j < inputs.size(); ++j) {
            if (j == k) {
                std::vector<double> d = inputs[j].data();
                d[elem] += delta;
                probe.emplace_back(inputs[j].shape(), std::move(d), false);
            } else {
                probe.emplace_back(inputs[j].shape(), inputs[j].data(), false);
            }
        }
        return f(probe).value();
    };

    GradCheckResult res;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        bool have = leaves[k].has_grad();
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            double analytic = have ? leaves[k].grad()[i] : 0.0;
            double numeric = (eval_at(k, i, step) - eval_at(k, i, -step)) / (2.0 * step);
            double err = std::abs(analytic - numeric) /
                         std::max({1.0, std::abs(analytic), std::abs(numeric)});
            if (err >= res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_site = "input " + std::to_string(k) + ", element " + std::to_string(i);
            }
        }
    }
    res.pass = res.max_rel_error <= tol;
    return res;
}

void log_warn(const std::string& msg) { std::cerr << "[apl] warning: " << msg << "\n"; }

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) k = n;
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + index(n - i);
        std::swap(pool[i], pool[j]);
        out.push_back(pool[i]);
    }
    return out;
}

}  // namespace apl
