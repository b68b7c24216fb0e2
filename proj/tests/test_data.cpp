#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "testutil.hpp"
#include "unlearn/data.hpp"
#include "unlearn/graph.hpp"
#include "unlearn/optim.hpp"

using namespace unlearn;

TEST_CASE("generation is a pure function of spec and seed") {
    TaxonomySpec spec = testutil::tiny_taxonomy(11, 5);
    Dataset a = generate_synthetic(spec);
    Dataset b = generate_synthetic(spec);
    CHECK(a.fingerprint() == b.fingerprint());

    TaxonomySpec other = spec;
    other.seed = 12;
    CHECK(generate_synthetic(other).fingerprint() != a.fingerprint());

    REQUIRE(a.size() == 2 * 2 * 5);
    for (size_t i = 0; i < a.size(); ++i) {
        const auto& ex = a.items[i];
        CHECK(ex.id == static_cast<int>(i));
        CHECK(ex.superclass == a.taxonomy.superclass_of(ex.subgroup));
        for (size_t p = 0; p < ex.image.size(); ++p) {
            CHECK(ex.image[p] >= 0.0);
            CHECK(ex.image[p] <= 1.0);
        }
    }
}

TEST_CASE("overlap parameter blends subgroup and shared texture factors") {
    TaxonomySpec spec = testutil::tiny_taxonomy(3, 2);
    TaxonomySpec disjoint = spec, shared = spec, half = spec;
    disjoint.overlap = 0.0;
    shared.overlap = 1.0;
    half.overlap = 0.5;

    Tensor own = subgroup_texture_field(disjoint, 0, 1);
    Tensor common = subgroup_texture_field(shared, 0, 1);
    Tensor mix = subgroup_texture_field(half, 0, 1);
    REQUIRE(own.same_shape(mix));
    for (size_t i = 0; i < mix.size(); ++i) {
        CHECK(mix[i] == doctest::Approx(0.5 * own[i] + 0.5 * common[i]).epsilon(1e-12));
    }

    // overlap = 1: sibling subgroups share the generative factors entirely.
    Tensor sib0 = subgroup_texture_field(shared, 0, 0);
    Tensor sib1 = subgroup_texture_field(shared, 0, 1);
    for (size_t i = 0; i < sib0.size(); ++i) CHECK(sib0[i] == sib1[i]);

    // overlap = 0: the shared factor contributes nothing.
    CHECK(subgroup_shared_weight(disjoint) == 0.0);
    Tensor sib0d = subgroup_texture_field(disjoint, 0, 0);
    Tensor sib1d = subgroup_texture_field(disjoint, 0, 1);
    real diff = 0.0;
    for (size_t i = 0; i < sib0d.size(); ++i) diff += std::fabs(sib0d[i] - sib1d[i]);
    CHECK(diff > 1e-3);  // distinct factors actually differ
}

TEST_CASE("style transforms") {
    TaxonomySpec spec = testutil::tiny_taxonomy(4, 3);
    Dataset d = generate_synthetic(spec);

    SUBCASE("grayscale leaves all channels equal and is exactly idempotent") {
        Dataset g = apply_style(d, 3);
        const int hw = d.image_size * d.image_size;
        for (const auto& ex : g.items) {
            CHECK(ex.style == 3);
            for (int p = 0; p < hw; ++p) {
                CHECK(ex.image[static_cast<size_t>(p)] ==
                      ex.image[static_cast<size_t>(hw + p)]);
                CHECK(ex.image[static_cast<size_t>(p)] ==
                      ex.image[static_cast<size_t>(2 * hw + p)]);
            }
        }
        Dataset gg = apply_style(g, 3);
        for (size_t i = 0; i < g.size(); ++i) {
            for (size_t p = 0; p < g.items[i].image.size(); ++p) {
                CHECK(gg.items[i].image[p] == g.items[i].image[p]);
            }
        }
    }
    SUBCASE("posterize is exactly idempotent") {
        Dataset p1 = apply_style(d, 2);
        Dataset p2 = apply_style(p1, 2);
        for (size_t i = 0; i < p1.size(); ++i) {
            for (size_t p = 0; p < p1.items[i].image.size(); ++p) {
                CHECK(p2.items[i].image[p] == p1.items[i].image[p]);
            }
        }
    }
    SUBCASE("edge-sketch of a flat image is all zero") {
        Tensor flat({3, 8, 8}, 0.37);
        Tensor e = styled_image(flat, 1);
        for (size_t i = 0; i < e.size(); ++i) CHECK(e[i] == 0.0);
    }
    SUBCASE("labels are unchanged") {
        Dataset s = apply_style(d, 1);
        for (size_t i = 0; i < d.size(); ++i) {
            CHECK(s.items[i].superclass == d.items[i].superclass);
            CHECK(s.items[i].subgroup == d.items[i].subgroup);
            CHECK(s.items[i].id == d.items[i].id);
        }
    }
    SUBCASE("unknown style id") { CHECK_THROWS_AS(apply_style(d, 9), ConfigError); }
}

TEST_CASE("unlearn task splits hold their invariants across seeds") {
    TaxonomySpec spec = testutil::tiny_taxonomy(21, 20);
    Dataset d = generate_synthetic(spec);
    const int target = 1;

    for (uint64_t seed = 0; seed < 50; ++seed) {
        SplitFractions fr;  // defaults
        UnlearnTask task = split_unlearn_task(d, spec, target, fr, seed);

        std::set<int> forget_ids, ft_ids, cal_ids;
        for (const auto& ex : task.forget.items) forget_ids.insert(ex.id);
        for (const auto& ex : task.retain_ft.items) ft_ids.insert(ex.id);
        for (const auto& ex : task.calibration.items) cal_ids.insert(ex.id);

        for (int id : forget_ids) CHECK(ft_ids.count(id) == 0);   // D^f disjoint from D^r
        for (int id : cal_ids) CHECK(ft_ids.count(id) == 0);      // D_m disjoint from D^r ft part

        // The target subgroup never appears in the retain or calibration splits.
        for (const auto& ex : task.retain_ft.items) CHECK(ex.subgroup != target);
        for (const auto& ex : task.calibration.items) CHECK(ex.subgroup != target);

        // Coarse-label constraint: forgetting examples carry the superclass prompt.
        for (const auto& ex : task.forget.items) {
            CHECK(ex.prompt_id == d.taxonomy.coarse_prompt_id(task.target_superclass));
        }
        // Retain split keeps fine labels.
        for (const auto& ex : task.retain_ft.items) {
            CHECK(ex.prompt_id == d.taxonomy.fine_prompt_id(ex.subgroup));
        }
    }
}

TEST_CASE("split counts match an independent re-count") {
    TaxonomySpec spec = testutil::tiny_taxonomy(33, 40);
    Dataset d = generate_synthetic(spec);
    SplitFractions fr;
    fr.forget = 0.7;
    fr.retain_ft = 0.6;
    fr.calibration = 0.1;
    UnlearnTask task = split_unlearn_task(d, spec, 2, fr, 9);

    // Independent splitter arithmetic: pool sizes counted from raw labels.
    size_t target_pool = 0, sibling_pool = 0;
    for (const auto& ex : d.items) {
        if (ex.subgroup == 2) ++target_pool;
        else if (ex.superclass == d.taxonomy.superclass_of(2)) ++sibling_pool;
    }
    CHECK(task.forget.size() == static_cast<size_t>(0.7 * static_cast<real>(target_pool)));
    CHECK(task.retain_ft.size() == static_cast<size_t>(0.6 * static_cast<real>(sibling_pool)));
    CHECK(task.calibration.size() == static_cast<size_t>(0.1 * static_cast<real>(sibling_pool)));
    CHECK(task.suites.at("retain").data.size() ==
          sibling_pool - task.retain_ft.size() - task.calibration.size());

    SUBCASE("forget fraction 1.0 keeps every target example") {
        SplitFractions all = fr;
        all.forget = 1.0;
        UnlearnTask t2 = split_unlearn_task(d, spec, 2, all, 9);
        CHECK(t2.forget.size() == target_pool);
    }
    SUBCASE("invalid fractions raise configuration errors") {
        SplitFractions bad = fr;
        bad.retain_ft = 0.95;
        bad.calibration = 0.2;
        CHECK_THROWS_AS(split_unlearn_task(d, spec, 2, bad, 9), ConfigError);
        CHECK_THROWS_AS(split_unlearn_task(d, spec, 99, fr, 9), ConfigError);
    }
}

TEST_CASE("eval suites cover the protocol axes") {
    TaxonomySpec spec = testutil::tiny_taxonomy(5, 20);
    Dataset d = generate_synthetic(spec);
    UnlearnTask task = split_unlearn_task(d, spec, 0, SplitFractions{}, 3);

    for (const char* name : {"target", "retain", "all", "unseen_shift", "unseen_texture",
                             "unseen_gray"}) {
        REQUIRE(task.suites.count(name) == 1);
        const EvalSuite& s = task.suites.at(name);
        CHECK_FALSE(s.data.empty());
        REQUIRE(s.targets.size() == s.data.size());
        for (int t : s.targets) {
            CHECK(t >= 0);
            CHECK(t < static_cast<int>(s.class_prompt_ids.size()));
        }
    }
    CHECK(task.suites.at("target").direction == Direction::Forget);
    CHECK(task.suites.at("retain").direction == Direction::Retain);
    // The gray suite really is grayscale.
    const Dataset& gray = task.suites.at("unseen_gray").data;
    const int hw = gray.image_size * gray.image_size;
    CHECK(gray.items[0].image[0] == gray.items[0].image[static_cast<size_t>(hw)]);
}

TEST_CASE("task archive round-trips") {
    TaxonomySpec spec = testutil::tiny_taxonomy(6, 12);
    Dataset d = generate_synthetic(spec);
    UnlearnTask task = split_unlearn_task(d, spec, 3, SplitFractions{}, 4);

    const std::string dir =
        (std::filesystem::temp_directory_path() / "unlearn_task_rt").string();
    std::filesystem::remove_all(dir);
    save_task(task, dir);
    UnlearnTask rt = load_task(dir);

    CHECK(rt.target_subgroup == task.target_subgroup);
    CHECK(rt.target_superclass == task.target_superclass);
    CHECK(rt.split_seed == task.split_seed);
    CHECK(rt.source_spec_json == task.source_spec_json);
    CHECK(rt.forget.fingerprint() == task.forget.fingerprint());
    CHECK(rt.retain_ft.fingerprint() == task.retain_ft.fingerprint());
    CHECK(rt.calibration.fingerprint() == task.calibration.fingerprint());
    REQUIRE(rt.suites.size() == task.suites.size());
    for (const auto& [name, suite] : task.suites) {
        const EvalSuite& o = rt.suites.at(name);
        CHECK(o.direction == suite.direction);
        CHECK(o.class_prompt_ids == suite.class_prompt_ids);
        CHECK(o.targets == suite.targets);
        CHECK(o.data.fingerprint() == suite.data.fingerprint());
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("a linear probe separates subgroups on the default taxonomy") {
    TaxonomySpec spec;  // defaults: 4x4, 200 images per subgroup
    spec.seed = 0;
    Dataset d = generate_synthetic(spec);
    const int n_classes = d.taxonomy.n_subgroups();
    const int dim = d.channels * d.image_size * d.image_size;

    std::vector<int> order(d.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng(1234);
    rng.shuffle(order);
    const size_t n_test = order.size() / 5;
    std::vector<int> test_idx(order.begin(), order.begin() + static_cast<long>(n_test));
    std::vector<int> train_idx(order.begin() + static_cast<long>(n_test), order.end());

    Tensor w({n_classes, dim});
    Tensor b({n_classes});
    Adam adam(0.05);
    const int batch = 256;
    for (int epoch = 0; epoch < 30; ++epoch) {
        rng.shuffle(train_idx);
        for (size_t off = 0; off < train_idx.size(); off += batch) {
            const size_t end = std::min(train_idx.size(), off + batch);
            const int n = static_cast<int>(end - off);
            Tensor x({n, dim});
            std::vector<int> y(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                const auto& ex = d.items[static_cast<size_t>(train_idx[off + i])];
                std::copy(ex.image.data(), ex.image.data() + dim,
                          x.data() + static_cast<size_t>(i) * dim);
                y[static_cast<size_t>(i)] = ex.subgroup;
            }
            Graph g;
            ValueId wi = g.input(w, true);
            ValueId bi = g.input(b, true);
            ValueId loss = g.cross_entropy_rows(g.linear(g.constant(x), wi, bi), y);
            g.backward(loss);
            adam.step({{"w", &w}, {"b", &b}}, {{"w", &g.grad(wi)}, {"b", &g.grad(bi)}});
        }
    }

    int ok = 0;
    for (int ti : test_idx) {
        const auto& ex = d.items[static_cast<size_t>(ti)];
        int best = 0;
        real best_v = -1e300;
        for (int c = 0; c < n_classes; ++c) {
            real v = b[static_cast<size_t>(c)];
            for (int p = 0; p < dim; ++p) {
                v += w[static_cast<size_t>(c) * dim + p] * ex.image[static_cast<size_t>(p)];
            }
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        if (best == ex.subgroup) ++ok;
    }
    const real acc = static_cast<real>(ok) / static_cast<real>(n_test);
    MESSAGE("linear probe subgroup accuracy: " << acc);
    CHECK(acc >= 0.9);
}

TEST_CASE("stack and prompt helpers") {
    TaxonomySpec spec = testutil::tiny_taxonomy(2, 3);
    Dataset d = generate_synthetic(spec);
    Tensor s = stack_images(d, {0, 5});
    CHECK(s.shape() == std::vector<int>{2, 3, spec.image_size, spec.image_size});
    CHECK_THROWS_AS(stack_images(d, {}), ConfigError);
    auto pr = prompt_ids_of(d, {0});
    CHECK(pr[0] == d.taxonomy.fine_prompt_id(d.items[0].subgroup));
}
