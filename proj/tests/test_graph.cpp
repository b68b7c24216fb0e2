#include <doctest.h>

#include <cmath>
#include <functional>

#include "testutil.hpp"
#include "unlearn/graph.hpp"

using namespace unlearn;
using testutil::central_difference;
using testutil::rel_err;

namespace {

Tensor rand_tensor(std::vector<int> shape, uint64_t seed, real scale = 1.0) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

// Checks d(loss)/d(x) against central differences on a sample of coordinates.
void check_grad(const Tensor& x, std::function<ValueId(Graph&, ValueId)> build,
                real tol = 1e-6, real h = 1e-6) {
    Graph g;
    ValueId xi = g.input(x, true);
    ValueId loss = build(g, xi);
    REQUIRE(g.value(loss).size() == 1);
    g.backward(loss);
    const Tensor& analytic = g.grad(xi);
    REQUIRE(analytic.size() == x.size());

    auto f = [&](const Tensor& xv) {
        Graph g2;
        ValueId xi2 = g2.input(xv, false);
        return g2.value(build(g2, xi2))[0];
    };
    Rng pick(909);
    const int samples = static_cast<int>(std::min<size_t>(x.size(), 12));
    for (int s = 0; s < samples; ++s) {
        const size_t c = static_cast<size_t>(pick.uniform_int(static_cast<int>(x.size())));
        const real fd = central_difference(f, x, c, h);
        CHECK(rel_err(analytic[c], fd) < tol);
    }
}

}  // namespace

TEST_CASE("conv/relu/pool/linear gradients match finite differences") {
    const Tensor x = rand_tensor({2, 3, 6, 6}, 1);
    const Tensor w = rand_tensor({4, 3, 3, 3}, 2, 0.5);
    const Tensor b = rand_tensor({4}, 3, 0.1);
    const Tensor pw = rand_tensor({5, 4}, 4, 0.5);
    const Tensor pb = rand_tensor({5}, 5, 0.1);

    auto tower = [&](Graph& g, ValueId xi, ValueId wi, ValueId bi) {
        ValueId y = g.conv2d(xi, wi, bi, 2, 1);
        y = g.relu(y);
        y = g.global_avg_pool(y);
        y = g.linear(y, g.constant(pw), g.constant(pb));
        return g.mean_all(g.mul(y, y));
    };

    SUBCASE("wrt input") {
        check_grad(x, [&](Graph& g, ValueId xi) {
            return tower(g, xi, g.constant(w), g.constant(b));
        });
    }
    SUBCASE("wrt conv weight") {
        check_grad(w, [&](Graph& g, ValueId wi) {
            return tower(g, g.constant(x), wi, g.constant(b));
        });
    }
    SUBCASE("wrt conv bias") {
        check_grad(b, [&](Graph& g, ValueId bi) {
            return tower(g, g.constant(x), g.constant(w), bi);
        });
    }
}

TEST_CASE("batch-mode batchnorm gradients match finite differences") {
    const Tensor x = rand_tensor({3, 4, 3, 3}, 10);
    const Tensor gamma = rand_tensor({4}, 11, 0.5);
    const Tensor beta = rand_tensor({4}, 12, 0.2);

    // Smooth, symmetry-breaking composite. A relu would flip masks under
    // finite differences, and a loss built only from per-channel moments of
    // the normalized output is near-constant in x; weighting by a fixed
    // random tensor keeps O(1) per-element gradients.
    const Tensor mix = rand_tensor({3, 4, 3, 3}, 99);
    auto net = [&](Graph& g, ValueId xi, ValueId gi, ValueId bi) {
        ValueId y = g.batchnorm_batch(xi, gi, bi, 1e-5, nullptr, nullptr);
        ValueId wy = g.mul(y, g.constant(mix));
        return g.add(g.mean_all(g.mul(wy, wy)), g.scale(g.sum_all(wy), 0.25));
    };
    SUBCASE("wrt input") {
        check_grad(x, [&](Graph& g, ValueId xi) {
            return net(g, xi, g.constant(gamma), g.constant(beta));
        }, 1e-5);
    }
    SUBCASE("wrt gamma") {
        check_grad(gamma, [&](Graph& g, ValueId gi) {
            return net(g, g.constant(x), gi, g.constant(beta));
        }, 1e-5);
    }
    SUBCASE("wrt beta") {
        check_grad(beta, [&](Graph& g, ValueId bi) {
            return net(g, g.constant(x), g.constant(gamma), bi);
        }, 1e-5);
    }
}

TEST_CASE("frozen batchnorm gradients match finite differences") {
    const Tensor x = rand_tensor({2, 3, 4, 4}, 20);
    const Tensor gamma = rand_tensor({3}, 21, 0.5);
    const Tensor beta = rand_tensor({3}, 22, 0.2);
    Tensor rm = rand_tensor({3}, 23, 0.3);
    Tensor rv({3});
    for (size_t i = 0; i < rv.size(); ++i) rv[i] = 0.5 + 0.4 * i;

    check_grad(x, [&](Graph& g, ValueId xi) {
        ValueId y = g.batchnorm_eval(xi, g.constant(gamma), g.constant(beta), rm, rv, 1e-5);
        return g.sum_all(g.mul(y, y));
    });
}

TEST_CASE("normalize/similarity/cross-entropy gradients match finite differences") {
    const Tensor a = rand_tensor({3, 5}, 30);
    const Tensor b = rand_tensor({4, 5}, 31);

    check_grad(a, [&](Graph& g, ValueId ai) {
        ValueId an = g.l2_normalize_rows(ai);
        ValueId bn = g.l2_normalize_rows(g.constant(b));
        ValueId logits = g.scale(g.matmul_nt(an, bn), 10.0);
        return g.cross_entropy_rows(logits, {0, 2, 1});
    });

    check_grad(a, [&](Graph& g, ValueId ai) {
        ValueId logits = g.matmul_nt(ai, g.constant(b));
        return g.cross_entropy_rows(g.transpose2d(logits), {0, 2, 1, 0});
    });
}

TEST_CASE("embedding gather gradients match finite differences") {
    const Tensor table = rand_tensor({6, 4}, 40);
    check_grad(table, [&](Graph& g, ValueId ti) {
        ValueId rows = g.embedding_rows(ti, {1, 3, 1});
        ValueId n = g.l2_normalize_rows(rows);
        return g.mean_all(g.mul(n, n));
    });
    Graph g;
    CHECK_THROWS_AS(g.embedding_rows(g.constant(table), {6}), VocabError);
    CHECK_THROWS_AS(g.embedding_rows(g.constant(table), {-1}), VocabError);
}

TEST_CASE("channel statistics and norms match finite differences") {
    const Tensor x = rand_tensor({3, 2, 3, 3}, 50);
    const Tensor target_m = rand_tensor({2}, 51, 0.3);
    Tensor target_v({2});
    target_v[0] = 0.7;
    target_v[1] = 1.3;

    // Alignment-style loss: ||mean - target|| + ||var - target||.
    check_grad(x, [&](Graph& g, ValueId xi) {
        ValueId m = g.channel_mean(xi);
        ValueId v = g.channel_var(xi);
        ValueId lm = g.vec_l2(g.sub(m, g.constant(target_m)));
        ValueId lv = g.vec_l2(g.sub(v, g.constant(target_v)));
        return g.add(lm, lv);
    }, 1e-5);

    check_grad(x, [&](Graph& g, ValueId xi) {
        ValueId flat = g.reshape(xi, {6, 9});
        return g.mean_all(g.rowwise_l2(flat));
    });
}

TEST_CASE("rowwise and elementwise op gradients match finite differences") {
    const Tensor a = rand_tensor({4, 3}, 60);
    const Tensor b = rand_tensor({4, 3}, 61);
    check_grad(a, [&](Graph& g, ValueId ai) {
        ValueId d = g.rowwise_dot(ai, g.constant(b));
        return g.sum_all(g.mul(d, d));
    });
    check_grad(a, [&](Graph& g, ValueId ai) {
        ValueId s = g.sub(g.scale(ai, 2.5), g.constant(b));
        return g.mean_all(g.mul(s, s));
    });
    // matmul_nn and reshape.
    const Tensor m = rand_tensor({3, 4}, 62);
    check_grad(m, [&](Graph& g, ValueId mi) {
        ValueId p = g.matmul_nn(mi, g.constant(rand_tensor({4, 2}, 63)));
        return g.sum_all(g.mul(p, p));
    });
}

TEST_CASE("clamp passes gradient only strictly inside the interval") {
    Tensor x({4});
    x[0] = -0.5;  // below
    x[1] = 0.25;  // inside
    x[2] = 0.75;  // inside
    x[3] = 1.5;   // above
    Graph g;
    ValueId xi = g.input(x, true);
    ValueId loss = g.sum_all(g.clamp01(xi));
    g.backward(loss);
    const Tensor& gr = g.grad(xi);
    CHECK(gr[0] == 0.0);
    CHECK(gr[1] == 1.0);
    CHECK(gr[2] == 1.0);
    CHECK(gr[3] == 0.0);

    CHECK(g.value(loss)[0] == doctest::Approx(0.0 + 0.25 + 0.75 + 1.0));
}

TEST_CASE("backward accumulates through shared subexpressions") {
    Tensor x({2});
    x[0] = 1.5;
    x[1] = -2.0;
    Graph g;
    ValueId xi = g.input(x, true);
    ValueId y = g.add(xi, xi);              // 2x
    ValueId loss = g.sum_all(g.mul(y, y));  // sum 4x^2 -> d/dx = 8x
    g.backward(loss);
    CHECK(g.grad(xi)[0] == doctest::Approx(12.0));
    CHECK(g.grad(xi)[1] == doctest::Approx(-16.0));
}

TEST_CASE("backward requires a scalar loss") {
    Graph g;
    ValueId x = g.input(rand_tensor({2, 2}, 70), true);
    CHECK_THROWS_AS(g.backward(x), ShapeError);
}
