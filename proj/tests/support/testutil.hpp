#pragma once

// Shared helpers for the test suite: small model/dataset builders and the
// central-difference oracle used to check analytic gradients.

#include <cmath>
#include <functional>
#include <vector>

#include "unlearn/data.hpp"
#include "unlearn/model.hpp"

namespace testutil {

using namespace unlearn;

// Two-block model on small images; the second block carries batch norm.
inline ModelSpec tiny_spec(int image_size = 8, int embed_dim = 8, int vocab = 6) {
    ModelSpec m;
    m.image_channels = 3;
    m.image_size = image_size;
    m.blocks = {{6, 3, 1, true}, {8, 3, 2, true}};
    m.embed_dim = embed_dim;
    m.temperature = 0.1;
    for (int i = 0; i < vocab; ++i) m.vocab.push_back("p" + std::to_string(i));
    return m;
}

inline TaxonomySpec tiny_taxonomy(uint64_t seed = 7, int per_subgroup = 6, int image_size = 8) {
    TaxonomySpec s;
    s.n_superclasses = 2;
    s.subgroups_per_superclass = 2;
    s.images_per_subgroup = per_subgroup;
    s.image_size = image_size;
    s.overlap = 0.3;
    s.seed = seed;
    return s;
}

inline ModelSpec spec_for(const TaxonomySpec& t, int embed_dim = 8) {
    ModelSpec m;
    m.image_channels = 3;
    m.image_size = t.image_size;
    m.blocks = {{6, 3, 1, true}, {8, 3, 2, true}};
    m.embed_dim = embed_dim;
    m.temperature = 0.1;
    Taxonomy tax;
    tax.n_superclasses = t.n_superclasses;
    tax.subgroups_per_superclass = t.subgroups_per_superclass;
    m.vocab = tax.vocab();
    return m;
}

inline Tensor random_images(int n, int c, int hw, uint64_t seed) {
    Tensor t({n, c, hw, hw});
    Rng rng(seed);
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
    return t;
}

// Overwrites each BN layer's running statistics with the pre-BN batch
// statistics of `images`, layer by layer (earlier assignments change deeper
// activations, so this walks the tower in order). Afterwards the alignment
// loss of `images` at delta = 0 is ~0.
inline void calibrate_bn_to_batch(const DualEncoder& enc, ParameterSet& ps, const Tensor& images) {
    const auto bn_paths = enc.bn_layer_paths();
    for (size_t l = 0; l < bn_paths.size(); ++l) {
        Graph g;
        auto bind = enc.bind(g, ps, {});
        auto fwd = enc.image_forward(g, bind, ps, g.constant(images), BnMode::Frozen);
        Tensor m = g.value(g.channel_mean(fwd.pre_bn[l]));
        Tensor v = g.value(g.channel_var(fwd.pre_bn[l]));
        ps.at(bn_paths[l] + ".running_mean") = m;
        ps.at(bn_paths[l] + ".running_var") = v;
    }
}

// Central finite difference of f around x, one coordinate at a time.
inline real central_difference(std::function<real(const Tensor&)> f, Tensor x, size_t coord,
                               real h) {
    Tensor hi = x, lo = x;
    hi[coord] += h;
    lo[coord] -= h;
    return (f(hi) - f(lo)) / (2.0 * h);
}

inline real rel_err(real a, real b) {
    const real denom = std::max({std::fabs(a), std::fabs(b), 1e-10});
    return std::fabs(a - b) / denom;
}

}  // namespace testutil
