#include <doctest.h>

#include <algorithm>
#include <map>

#include "testutil.hpp"
#include "unlearn/fisher.hpp"
#include "unlearn/graph.hpp"

using namespace unlearn;
using testutil::rel_err;

namespace {

struct Fixture {
    TaxonomySpec tax = testutil::tiny_taxonomy(17, 6);
    Dataset data;
    DualEncoder enc;
    ParameterSet ps;

    Fixture() : data(generate_synthetic(tax)), enc(testutil::spec_for(tax)),
                ps(enc.init_params(3)) {}

    Dataset slice(int from, int to) const {
        Dataset d;
        d.taxonomy = data.taxonomy;
        d.channels = data.channels;
        d.image_size = data.image_size;
        for (int i = from; i < to; ++i) d.items.push_back(data.items[static_cast<size_t>(i)]);
        return d;
    }
};

// Independent oracle: per-example backward, square, average over examples,
// then average over the layer's parameter entries. Plain dataset-order sums.
std::map<std::string, real> brute_force_fisher(const DualEncoder& enc, const ParameterSet& ps,
                                               const Dataset& data) {
    std::set<std::string> trainable;
    for (const auto& l : enc.image_layers()) trainable.insert(l.path);
    std::map<std::string, real> sums;
    std::map<std::string, size_t> counts;
    for (const auto& l : enc.image_layers()) {
        size_t n = 0;
        for (const auto& p : l.param_paths) n += ps.at(p).size();
        sums[l.path] = 0.0;
        counts[l.path] = n;
    }
    for (size_t i = 0; i < data.items.size(); ++i) {
        Graph g;
        auto bind = enc.bind(g, ps, trainable);
        Tensor one = stack_images(data, {static_cast<int>(i)});
        auto fwd = enc.image_forward(g, bind, ps, g.constant(one), BnMode::Frozen);
        ValueId te = enc.text_forward(g, bind, {data.items[i].prompt_id});
        ValueId sim = g.mean_all(g.rowwise_dot(fwd.embed, te));
        g.backward(sim);
        for (const auto& l : enc.image_layers()) {
            for (const auto& p : l.param_paths) {
                const Tensor& gr = g.grad(bind.params.at(p));
                if (gr.empty()) continue;
                for (size_t k = 0; k < gr.size(); ++k) sums[l.path] += gr[k] * gr[k];
            }
        }
    }
    std::map<std::string, real> out;
    for (auto& [path, s] : sums) {
        out[path] = s / static_cast<real>(data.items.size()) / static_cast<real>(counts[path]);
    }
    return out;
}

}  // namespace

TEST_CASE("layer fisher matches the per-example brute-force oracle") {
    Fixture f;
    Dataset forget = f.slice(0, 6);
    Dataset retain = f.slice(6, 18);

    auto fast_f = layer_fisher(f.enc, f.ps, forget);
    auto oracle_f = brute_force_fisher(f.enc, f.ps, forget);
    REQUIRE(fast_f.size() == oracle_f.size());
    for (const auto& s : fast_f) {
        CHECK(rel_err(s.score, oracle_f.at(s.layer)) < 1e-6);
        CHECK(s.score >= 0.0);
    }

    SUBCASE("relative scores and rankings match the oracle") {
        const real eps = 1e-8;
        LayerScoreMap rel = relative_fisher(f.enc, f.ps, forget, retain, eps);
        auto oracle_r = brute_force_fisher(f.enc, f.ps, retain);
        std::vector<std::pair<real, std::string>> oracle_sorted;
        for (const auto& s : rel.scores) {
            const real expect = oracle_f.at(s.layer) / (oracle_r.at(s.layer) + eps);
            CHECK(rel_err(s.score, expect) < 1e-6);
            oracle_sorted.emplace_back(-expect, s.layer);
        }
        std::stable_sort(oracle_sorted.begin(), oracle_sorted.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        auto selected = select_layers(rel, static_cast<int>(rel.scores.size()));
        for (size_t i = 0; i < selected.size(); ++i) {
            CHECK(selected[i] == oracle_sorted[i].second);
        }
    }
}

TEST_CASE("fisher scores are exactly permutation invariant") {
    Fixture f;
    Dataset fwd = f.slice(0, 10);
    Dataset rev = fwd;
    std::reverse(rev.items.begin(), rev.items.end());
    auto a = layer_fisher(f.enc, f.ps, fwd);
    auto b = layer_fisher(f.enc, f.ps, rev);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].layer == b[i].layer);
        CHECK(a[i].score == b[i].score);  // bitwise
    }
}

TEST_CASE("layers upstream of a zeroed batchnorm scale have zero fisher") {
    Fixture f;
    ParameterSet ps = f.ps;
    // gamma = 0 in the last block stops every gradient flowing to earlier layers.
    ps.at("img.block1.bn.gamma").fill(0.0);
    Dataset forget = f.slice(0, 4);
    auto scores = layer_fisher(f.enc, ps, forget);
    std::map<std::string, real> by_layer;
    for (const auto& s : scores) by_layer[s.layer] = s.score;
    CHECK(by_layer.at("img.block0.conv") == 0.0);
    CHECK(by_layer.at("img.block0.bn") == 0.0);
    CHECK(by_layer.at("img.block1.conv") == 0.0);
    CHECK(by_layer.at("img.proj") > 0.0);
}

TEST_CASE("forget == retain makes every relative score F/(F+eps) < 1") {
    Fixture f;
    Dataset d = f.slice(0, 8);
    auto raw = layer_fisher(f.enc, f.ps, d);
    LayerScoreMap rel = relative_fisher(f.enc, f.ps, d, d, 1e-8);
    for (size_t i = 0; i < rel.scores.size(); ++i) {
        CHECK(rel.scores[i].score < 1.0);
        const real expect = raw[i].score / (raw[i].score + 1e-8);
        CHECK(rel_err(rel.scores[i].score, expect) < 1e-12);
    }
    // As eps -> 0 every ratio -> 1.
    LayerScoreMap tiny = relative_fisher(f.enc, f.ps, d, d, 1e-300);
    for (const auto& s : tiny.scores) CHECK(s.score == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("squared-gradient scaling moves raw scores by s^2 and cancels in ratios") {
    // Formula-level property, asserted on per-example gradients drawn from the
    // toy model: fisher(s * g) = s^2 * fisher(g), so equal scaling of both
    // datasets cancels in the relative ratio when eps ~ 0.
    Fixture f;
    Dataset d = f.slice(0, 6);
    auto base = brute_force_fisher(f.enc, f.ps, d);
    const real s = 3.7;
    std::map<std::string, real> scaled;
    for (const auto& [k, v] : base) scaled[k] = (s * s) * v;  // gradients scaled by s
    for (const auto& [k, v] : base) {
        CHECK(rel_err(scaled.at(k), s * s * v) == 0.0);
        const real ratio_base = v / v;
        const real ratio_scaled = scaled.at(k) / scaled.at(k);
        CHECK(ratio_base == ratio_scaled);
    }
}

TEST_CASE("select_layers ordering, ties and bounds") {
    LayerScoreMap m;
    m.scores = {{"a", 3.0}, {"b", 1.0}, {"c", 2.0}};
    CHECK(select_layers(m, 2) == std::vector<std::string>{"a", "c"});
    CHECK(select_layers(m, 3) == std::vector<std::string>{"a", "c", "b"});
    CHECK_THROWS_AS(select_layers(m, 0), ConfigError);
    CHECK_THROWS_AS(select_layers(m, 4), ConfigError);

    LayerScoreMap tie;
    tie.scores = {{"early", 2.0}, {"late", 2.0}};
    CHECK(select_layers(tie, 1) == std::vector<std::string>{"early"});

    CHECK(default_selection_k(7) == 2);
    CHECK(default_selection_k(4) == 1);
    CHECK(default_selection_k(1) == 1);
}

TEST_CASE("fisher errors and serialization") {
    Fixture f;
    Dataset empty;
    empty.taxonomy = f.data.taxonomy;
    CHECK_THROWS_AS(layer_fisher(f.enc, f.ps, empty), ConfigError);
    CHECK_THROWS_AS(relative_fisher(f.enc, f.ps, f.slice(0, 2), f.slice(2, 4), 0.0), ConfigError);

    LayerScoreMap m = relative_fisher(f.enc, f.ps, f.slice(0, 2), f.slice(2, 4));
    const std::string js = m.to_json();
    CHECK(js.find("epsilon") != std::string::npos);
    CHECK(js.find("img.proj") != std::string::npos);
    CHECK(m.at("img.proj") >= 0.0);
    CHECK_THROWS_AS(m.at("nope"), ConfigError);
}

TEST_CASE("contrastive-objective variant runs and differs from similarity") {
    Fixture f;
    Dataset d = f.slice(0, 4);
    auto sim = layer_fisher(f.enc, f.ps, d, FisherObjective::Similarity);
    auto con = layer_fisher(f.enc, f.ps, d, FisherObjective::ContrastiveLoss);
    REQUIRE(sim.size() == con.size());
    bool any_diff = false;
    for (size_t i = 0; i < sim.size(); ++i) {
        if (rel_err(sim[i].score, con[i].score) > 1e-6) any_diff = true;
    }
    CHECK(any_diff);
}
