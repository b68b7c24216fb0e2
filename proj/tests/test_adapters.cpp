#include <doctest.h>

#include <cmath>

#include "testutil.hpp"
#include "unlearn/adapters.hpp"
#include "unlearn/optim.hpp"

using namespace unlearn;

namespace {

struct Fixture {
    DualEncoder enc{testutil::tiny_spec()};
    ParameterSet base;
    Tensor batch = testutil::random_images(3, 3, 8, 55);
    Fixture() : base(enc.init_params(8)) { base.meta().provenance = "original"; }
};

Tensor adapted_embeddings(const DualEncoder& enc, const AdaptedModel& m, const Tensor& batch) {
    Graph g;
    auto bind = enc.bind(g, m.base, {});
    AdapterOverlay overlay = bind_adapters(g, m);
    auto fwd = enc.image_forward(g, bind, m.base, g.constant(batch), BnMode::Frozen, &overlay);
    return g.value(fwd.embed);
}

}  // namespace

TEST_CASE("attach starts at the identity and freezes the base") {
    Fixture f;
    AdaptedModel m = attach_adapters(f.enc, f.base, {"img.block0.conv", "img.proj"}, 2, 1.0, 4);

    Tensor before = f.enc.encode_image(f.base, f.batch);
    Tensor after = adapted_embeddings(f.enc, m, f.batch);
    REQUIRE(before.size() == after.size());
    for (size_t i = 0; i < before.size(); ++i) {
        CHECK(std::fabs(before[i] - after[i]) < 1e-6);
    }

    SUBCASE("base parameters receive no gradient during adapted training") {
        Graph g;
        auto bind = f.enc.bind(g, m.base, {});
        std::map<std::string, std::pair<ValueId, ValueId>> nodes;
        AdapterOverlay overlay = bind_adapters(g, m, &nodes);
        auto fwd = f.enc.image_forward(g, bind, m.base, g.constant(f.batch), BnMode::Frozen,
                                       &overlay);
        ValueId te = f.enc.text_forward(g, bind, {0, 1, 2});
        ValueId loss = g.mean_all(g.rowwise_dot(fwd.embed, te));
        g.backward(loss);
        for (const auto& [path, node] : bind.params) {
            CHECK(g.grad(node).empty());  // frozen: no gradient buffer at all
        }
        // Adapter tensors do receive gradients.
        CHECK_FALSE(g.grad(nodes.at("img.proj").first).empty());
        CHECK_FALSE(g.grad(nodes.at("img.proj").second).empty());
    }

    SUBCASE("rank must stay below the matrix dimensions") {
        CHECK_THROWS_AS(attach_adapters(f.enc, f.base, {"img.proj"}, 8, 1.0, 4), ConfigError);
        CHECK_THROWS_AS(attach_adapters(f.enc, f.base, {"img.block0.bn"}, 2, 1.0, 4),
                        ConfigError);  // not a matrix layer
        CHECK_THROWS_AS(attach_adapters(f.enc, f.base, {}, 2, 1.0, 4), ConfigError);
    }
}

TEST_CASE("folding bakes the low-rank delta into the flat weights") {
    Fixture f;

    SUBCASE("zero adapters fold to the base bitwise") {
        AdaptedModel m = attach_adapters(f.enc, f.base, {"img.proj"}, 2, 1.0, 4);
        ParameterSet folded = fold_adapters(f.enc, m);
        for (const auto& [path, t] : f.base.entries()) {
            const Tensor& u = folded.at(path);
            for (size_t i = 0; i < t.size(); ++i) CHECK(u[i] == t[i]);
        }
    }

    SUBCASE("rank-1 fold matches the hand-computed outer product") {
        AdaptedModel m = attach_adapters(f.enc, f.base, {"img.proj"}, 1, 0.5, 4);
        LoraAdapter& ad = m.adapters.at("img.proj");
        for (size_t i = 0; i < ad.a.size(); ++i) ad.a[i] = 0.1 * (static_cast<real>(i) + 1.0);
        for (size_t i = 0; i < ad.b.size(); ++i) ad.b[i] = 0.2 * (static_cast<real>(i) + 1.0);
        ParameterSet folded = fold_adapters(f.enc, m);
        const Tensor& w0 = f.base.at("img.proj.weight");
        const Tensor& w1 = folded.at("img.proj.weight");
        const int out = w0.dim(0), in = w0.dim(1);
        for (int i = 0; i < out; ++i) {
            for (int j = 0; j < in; ++j) {
                const real expect = w0[static_cast<size_t>(i) * in + j] +
                                    0.5 * ad.a[static_cast<size_t>(i)] * ad.b[static_cast<size_t>(j)];
                CHECK(w1[static_cast<size_t>(i) * in + j] == doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }

    SUBCASE("random adapters: folded forward equals adapted forward within 1e-5") {
        AdaptedModel m =
            attach_adapters(f.enc, f.base, {"img.block0.conv", "img.block1.conv", "img.proj"}, 2,
                            1.0, 4);
        Rng rng(77);
        for (auto& [path, ad] : m.adapters) {
            for (size_t i = 0; i < ad.a.size(); ++i) ad.a[i] = 0.05 * rng.normal();
            for (size_t i = 0; i < ad.b.size(); ++i) ad.b[i] = 0.05 * rng.normal();
        }
        Tensor adapted = adapted_embeddings(f.enc, m, f.batch);
        Tensor folded = f.enc.encode_image(fold_adapters(f.enc, m), f.batch);
        for (size_t i = 0; i < adapted.size(); ++i) {
            CHECK(std::fabs(adapted[i] - folded[i]) < 1e-5);
        }

        // fold(attach(fold(...))) is idempotent on the produced parameters.
        ParameterSet once = fold_adapters(f.enc, m);
        AdaptedModel again = attach_adapters(f.enc, once, {"img.proj"}, 2, 1.0, 9);
        ParameterSet twice = fold_adapters(f.enc, again);
        for (const auto& [path, t] : once.entries()) {
            const Tensor& u = twice.at(path);
            for (size_t i = 0; i < t.size(); ++i) CHECK(u[i] == t[i]);
        }
    }
}

TEST_CASE("adapter training leaves the base checksum-stable") {
    Fixture f;
    AdaptedModel m = attach_adapters(f.enc, f.base, {"img.proj"}, 2, 1.0, 4);
    const std::string base_hash = checkpoint_hash(f.base);

    Adam adam(1e-2);
    for (int step = 0; step < 5; ++step) {
        Graph g;
        auto bind = f.enc.bind(g, m.base, {});
        std::map<std::string, std::pair<ValueId, ValueId>> nodes;
        AdapterOverlay overlay = bind_adapters(g, m, &nodes);
        auto fwd = f.enc.image_forward(g, bind, m.base, g.constant(f.batch), BnMode::Frozen,
                                       &overlay);
        ValueId te = f.enc.text_forward(g, bind, {1, 1, 1});
        ValueId loss = g.mean_all(g.rowwise_dot(fwd.embed, te));
        g.backward(loss);
        adam.step({{"a", &m.adapters.at("img.proj").a}, {"b", &m.adapters.at("img.proj").b}},
                  {{"a", &g.grad(nodes.at("img.proj").first)},
                   {"b", &g.grad(nodes.at("img.proj").second)}});
    }
    CHECK(checkpoint_hash(m.base) == base_hash);
    CHECK(m.adapters.at("img.proj").a.l2_norm() > 0.0);  // training actually moved the adapter
}
