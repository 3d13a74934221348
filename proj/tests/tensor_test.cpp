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

#include <doctest.h>

#include <cmath>

#include "apl/tensor.hpp"

using namespace apl;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, bool requires_grad,
                     double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> d(n);
    for (auto& x : d) x = lo + (hi - lo) * rng.uniform();
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

}  // namespace

TEST_CASE("row_softmax is symmetric on equal inputs") {
    Tensor t({1, 2}, {0.0, 0.0});
    Tensor y = row_softmax(t);
    CHECK(y.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y.at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("matmul against the identity is the identity map") {
    Rng rng(7);
    Tensor x = random_tensor(rng, {3, 5}, false);
    Tensor y = matmul(Tensor::identity(3), x);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("cosine similarity of a vector with itself is 1") {
    Rng rng(11);
    for (int k = 0; k < 10; ++k) {
        Tensor v = random_tensor(rng, {6}, false, 0.1, 2.0);
        CHECK(cosine_similarity(v, v).value() == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("cosine similarity of a zero vector is 0 with zero gradient") {
    Tensor z = Tensor::zeros({3}, true);
    Tensor v({3}, {1.0, 2.0, 3.0}, true);
    Tensor c = cosine_similarity(z, v);
    CHECK(c.value() == 0.0);
    backward(c);
    CHECK_FALSE(z.has_grad());
    CHECK_FALSE(v.has_grad());
}

TEST_CASE("stop_gradient forward identity, blocked backward") {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor y = stop_gradient(x);
    CHECK(y.at(0) == 1.0);
    CHECK(y.at(1) == 2.0);
    CHECK_FALSE(y.requires_grad());

    // d/dx [sg(x) * x] at x=3 is 3, not 6.
    Tensor x3 = Tensor::scalar(3.0, true);
    Tensor loss = mul(stop_gradient(x3), x3);
    backward(loss);
    CHECK(x3.grad()[0] == doctest::Approx(3.0).epsilon(1e-15));

    Tensor x2({3}, {1.0, -2.0, 0.5}, true);
    Tensor s = sum_all(stop_gradient(x2));
    backward(s);  // nothing requires grad downstream of sg; x2 untouched
    CHECK_FALSE(x2.has_grad());
}

TEST_CASE("backward of sum of squares") {
    Tensor x({3}, {1.0, 2.0, 3.0}, true);
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("softmax-pick gradient matches the softmax Jacobian row") {
    // loss = softmax([a, b])[0]; d/da = y0(1-y0), d/db = -y0*y1.
    Tensor x({1, 2}, {0.3, -0.7}, true);
    Tensor loss = pick(row_softmax(x), 0);
    backward(loss);
    double y0 = std::exp(0.3) / (std::exp(0.3) + std::exp(-0.7));
    double y1 = 1.0 - y0;
    CHECK(x.grad()[0] == doctest::Approx(y0 * (1.0 - y0)).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(-y0 * y1).epsilon(1e-12));

    // And against central finite differences.
    auto f = [](const std::vector<Tensor>& in) { return pick(row_softmax(in[0]), 0); };
    auto res = gradcheck(f, {Tensor({1, 2}, {0.3, -0.7}, true)}, 1e-5, 1e-4);
    CHECK(res.pass);
}

TEST_CASE("matmul+softmax+log chain matches finite differences") {
    Rng rng(23);
    auto f = [](const std::vector<Tensor>& in) {
        Tensor z = matmul(in[0], in[1]);
        Tensor p = row_softmax(z);
        return neg(mean_all(log(p)));
    };
    std::vector<Tensor> inputs = {random_tensor(rng, {4, 4}, true),
                                  random_tensor(rng, {4, 4}, true)};
    auto res = gradcheck(f, inputs, 1e-5, 1e-4);
    INFO("max rel error ", res.max_rel_error, " at ", res.worst_site);
    CHECK(res.pass);
}

TEST_CASE("gradcheck: sum of squares passes at 1e-6") {
    Rng rng(3);
    auto f = [](const std::vector<Tensor>& in) { return sum_all(mul(in[0], in[0])); };
    auto res = gradcheck(f, {random_tensor(rng, {3, 3}, true)}, 1e-5, 1e-6);
    CHECK(res.pass);
}

TEST_CASE("gradcheck: functions containing stop_gradient compare only the live path") {
    Rng rng(5);
    auto f = [](const std::vector<Tensor>& in) {
        // sg blocks the first term entirely; only the mul(x,x) path counts.
        Tensor blocked = sum_all(mul(stop_gradient(in[0]), stop_gradient(in[0])));
        return add(mul_scalar(blocked, 0.0), sum_all(mul(in[0], in[0])));
    };
    auto res = gradcheck(f, {random_tensor(rng, {4}, true)}, 1e-5, 1e-6);
    CHECK(res.pass);
}

TEST_CASE("every primitive matches central finite differences on random tensors") {
    // 100 random instances spread across the primitive set; smooth ops get
    // unrestricted inputs, piecewise ones rely on generic (off-kink) samples.
    Rng rng(101);
    int instances = 0;
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<Tensor> ab = {random_tensor(rng, {3, 4}, true),
                                  random_tensor(rng, {3, 4}, true)};
        std::vector<Tensor> pos = {random_tensor(rng, {3, 4}, true, 0.2, 2.0),
                                   random_tensor(rng, {3, 4}, true, 0.3, 1.5)};
        std::vector<Tensor> mm = {random_tensor(rng, {3, 4}, true),
                                  random_tensor(rng, {4, 2}, true)};
        std::vector<Tensor> vecs = {random_tensor(rng, {5}, true, 0.1, 1.0),
                                    random_tensor(rng, {5}, true, -1.0, -0.1)};
        std::vector<double> factors = {0.5, -1.5, 2.0};

        struct Case {
            const char* name;
            std::function<Tensor(const std::vector<Tensor>&)> f;
            std::vector<Tensor> in;
            double tol;
        };
        std::vector<Case> cases = {
            {"add", [](const std::vector<Tensor>& in) { return sum_all(add(in[0], in[1])); }, ab, 1e-6},
            {"sub", [](const std::vector<Tensor>& in) { return sum_all(mul(sub(in[0], in[1]), in[0])); }, ab, 1e-5},
            {"mul", [](const std::vector<Tensor>& in) { return sum_all(mul(in[0], in[1])); }, ab, 1e-5},
            {"div", [](const std::vector<Tensor>& in) { return sum_all(div(in[0], in[1])); }, pos, 1e-4},
            {"add_scalar", [](const std::vector<Tensor>& in) { return sum_all(mul(add_scalar(in[0], 1.5), in[0])); }, ab, 1e-5},
            {"mul_scalar", [](const std::vector<Tensor>& in) { return sum_all(mul_scalar(in[0], -2.5)); }, ab, 1e-6},
            {"exp", [](const std::vector<Tensor>& in) { return sum_all(apl::exp(in[0])); }, ab, 1e-4},
            {"log", [](const std::vector<Tensor>& in) { return sum_all(apl::log(in[0])); }, pos, 1e-4},
            {"relu", [](const std::vector<Tensor>& in) { return sum_all(relu(in[0])); }, ab, 1e-4},
            {"matmul", [](const std::vector<Tensor>& in) { return sum_all(mul(matmul(in[0], in[1]), matmul(in[0], in[1]))); }, mm, 1e-4},
            {"transpose", [](const std::vector<Tensor>& in) { return sum_all(mul(transpose(in[0]), transpose(in[1]))); }, ab, 1e-5},
            {"concat", [](const std::vector<Tensor>& in) { return sum_all(mul(concat({in[0], in[1]}), concat({in[1], in[0]}))); }, ab, 1e-5},
            {"stack", [](const std::vector<Tensor>& in) {
                 return sum_all(mul(stack({pick(in[0], 0), pick(in[0], 3), pick(in[1], 2)}),
                                    stack({pick(in[1], 0), pick(in[0], 1), pick(in[0], 2)})));
             }, ab, 1e-5},
            {"reshape", [](const std::vector<Tensor>& in) { return sum_all(mul(reshape(in[0], {4, 3}), reshape(in[1], {4, 3}))); }, ab, 1e-5},
            {"row", [](const std::vector<Tensor>& in) { return sum_all(mul(row(in[0], 1), row(in[1], 2))); }, ab, 1e-5},
            {"row_softmax", [](const std::vector<Tensor>& in) { return sum_all(mul(row_softmax(in[0]), in[1])); }, ab, 1e-4},
            {"row_min", [](const std::vector<Tensor>& in) { return sum_all(mul(row_min(in[0]), row_min(in[1]))); }, ab, 1e-4},
            {"min_all", [](const std::vector<Tensor>& in) { return mul(min_all(in[0]), min_all(in[1])); }, ab, 1e-4},
            {"mean_all", [](const std::vector<Tensor>& in) { return mul(mean_all(in[0]), mean_all(in[1])); }, ab, 1e-5},
            {"mean_rows", [](const std::vector<Tensor>& in) { return sum_all(mul(mean_rows(in[0]), mean_rows(in[1]))); }, ab, 1e-5},
            {"l2_normalize_rows", [](const std::vector<Tensor>& in) { return sum_all(mul(l2_normalize_rows(in[0]), in[1])); }, ab, 1e-4},
            {"cosine_similarity", [](const std::vector<Tensor>& in) { return cosine_similarity(in[0], in[1]); }, vecs, 1e-4},
            {"logsumexp", [](const std::vector<Tensor>& in) { return mul(logsumexp(in[0]), logsumexp(in[1])); }, ab, 1e-4},
            {"scale_rows", [&factors](const std::vector<Tensor>& in) { return sum_all(mul(scale_rows(in[0], factors), in[1])); }, ab, 1e-5},
            {"div_rows", [](const std::vector<Tensor>& in) {
                 return sum_all(div_rows(in[0], stack({pick(in[1], 0), pick(in[1], 1), pick(in[1], 2)})));
             }, pos, 1e-4},
        };
        for (auto& c : cases) {
            auto res = gradcheck(c.f, c.in, 1e-5, c.tol);
            INFO(c.name, " rep ", rep, ": max rel error ", res.max_rel_error, " at ",
                 res.worst_site);
            CHECK(res.pass);
            ++instances;
        }
    }
    CHECK(instances >= 100);
}

TEST_CASE("row_softmax rows are non-negative and sum to 1") {
    Rng rng(17);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor y = row_softmax(random_tensor(rng, {4, 6}, false, -30.0, 30.0));
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 6; ++j) {
                CHECK(y.at(i, j) >= 0.0);
                s += y.at(i, j);
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("l2_normalize_rows produces unit rows for nonzero input") {
    Rng rng(19);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor y = l2_normalize_rows(random_tensor(rng, {3, 5}, false, 0.1, 4.0));
        for (std::size_t i = 0; i < 3; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 5; ++j) s += y.at(i, j) * y.at(i, j);
            CHECK(std::abs(std::sqrt(s) - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("backward accumulation is linear across independent sub-losses") {
    Rng rng(29);
    Tensor base = random_tensor(rng, {4}, false);
    auto fresh = [&] { return Tensor(base.shape(), base.data(), true); };

    Tensor xa = fresh();
    backward(sum_all(mul(xa, xa)));
    std::vector<double> ga = xa.grad();

    Tensor xb = fresh();
    backward(sum_all(apl::exp(xb)));
    std::vector<double> gb = xb.grad();

    // Sum of separate backwards, accumulated into one leaf.
    Tensor xc = fresh();
    backward(sum_all(mul(xc, xc)));
    backward(sum_all(apl::exp(xc)));
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(xc.grad()[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12));
    }

    // Equals backward of the combined loss as well.
    Tensor xd = fresh();
    backward(add(sum_all(mul(xd, xd)), sum_all(apl::exp(xd))));
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(xd.grad()[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12));
    }
}

TEST_CASE("row_min keeps argmin and breaks ties toward the lowest index") {
    Tensor a({2, 3}, {3.0, 1.0, 1.0, 5.0, 5.0, 5.0}, true);
    Tensor m = row_min(a);
    CHECK(m.at(0) == 1.0);
    CHECK(m.at(1) == 5.0);
    backward(sum_all(m));
    // Gradient routed only to the first minimal element of each row.
    CHECK(a.grad() == std::vector<double>{0.0, 1.0, 0.0, 1.0, 0.0, 0.0});
}

TEST_CASE("error paths") {
    Tensor a({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor b({3}, {1.0, 2.0, 3.0});
    CHECK_THROWS_AS((void)add(a, b), NumericError);
    CHECK_THROWS_AS((void)apl::log(Tensor({2}, {1.0, 0.0})), NumericError);
    CHECK_THROWS_AS((void)div(Tensor({1}, {1.0}), Tensor({1}, {0.0})), NumericError);
    CHECK_THROWS_AS((void)matmul(a, b), NumericError);

    // Non-scalar loss.
    Tensor x({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), NumericError);

    // Consumed graph reuse.
    Tensor y = sum_all(mul(x, x));
    backward(y);
    CHECK_THROWS_AS(backward(y), NumericError);

    // Reusing a consumed intermediate from another loss fails too.
    Tensor z = mul(x, x);
    Tensor l1 = sum_all(z);
    backward(l1);
    CHECK_THROWS_AS(backward(mean_all(z)), NumericError);
}

TEST_CASE("backward sabotage hook flips one rule (negative control support)") {
    Tensor x({2}, {1.0, 2.0}, true);
    set_backward_sabotage("exp");
    backward(sum_all(apl::exp(x)));
    CHECK(x.grad()[0] == doctest::Approx(-std::exp(1.0)));
    set_backward_sabotage("");
    Tensor x2({2}, {1.0, 2.0}, true);
    backward(sum_all(apl::exp(x2)));
    CHECK(x2.grad()[0] == doctest::Approx(std::exp(1.0)));
}
