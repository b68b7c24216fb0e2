#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "unlearn/tensor.hpp"

using namespace unlearn;

TEST_CASE("tensor shape bookkeeping") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    for (size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);

    Tensor r = t.reshaped({3, 2});
    CHECK(r.dim(0) == 3);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
    CHECK_THROWS_AS(t.add_scaled(Tensor({3}), 1.0), ShapeError);
}

TEST_CASE("rng streams are deterministic and label-separated") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(derive_seed(42, "x")), d(derive_seed(42, "y"));
    CHECK(c.next_u64() != d.next_u64());
    CHECK(derive_seed(1, "s", 0) != derive_seed(1, "s", 1));

    Rng u(7);
    for (int i = 0; i < 1000; ++i) {
        const real v = u.uniform();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }

    // Normal stream: sane first and second moments.
    Rng n(11);
    real mean = 0.0, var = 0.0;
    const int N = 20000;
    std::vector<real> xs;
    for (int i = 0; i < N; ++i) xs.push_back(n.normal());
    for (real x : xs) mean += x;
    mean /= N;
    for (real x : xs) var += (x - mean) * (x - mean);
    var /= N;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("shuffle is a permutation and seed-stable") {
    std::vector<int> v(50), w(50);
    for (int i = 0; i < 50; ++i) v[static_cast<size_t>(i)] = w[static_cast<size_t>(i)] = i;
    Rng a(3), b(3);
    a.shuffle(v);
    b.shuffle(w);
    CHECK(v == w);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);
}

TEST_CASE("fnv hashing distinguishes content") {
    CHECK(fnv1a64_str("a") != fnv1a64_str("b"));
    CHECK(fnv1a64_str("ab") != fnv1a64_str("ba"));
    CHECK(hex64(0).size() == 16);
}
