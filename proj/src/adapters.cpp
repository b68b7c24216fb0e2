#include "unlearn/adapters.hpp"

#include <algorithm>

namespace unlearn {

AdaptedModel attach_adapters(const DualEncoder& enc, const ParameterSet& base,
                             const std::vector<std::string>& layer_paths, int rank, real scaling,
                             uint64_t seed) {
    if (layer_paths.empty()) throw ConfigError("attach_adapters needs at least one layer");
    if (rank < 1) throw ConfigError("adapter rank must be positive");
    enc.check_params(base);

    AdaptedModel m;
    m.base = base;
    m.rank = rank;
    m.scaling = scaling;
    for (const auto& path : layer_paths) {
        const LayerInfo& info = enc.layer(path);
        if (!info.matrix_capable) {
            throw ConfigError("layer '" + path + "' has no matrix view; cannot attach an adapter");
        }
        if (rank >= std::min(info.matrix_out, info.matrix_in)) {
            throw ConfigError("adapter rank " + std::to_string(rank) +
                              " must be below min dimension of layer '" + path + "' (" +
                              std::to_string(std::min(info.matrix_out, info.matrix_in)) + ")");
        }
        LoraAdapter ad;
        ad.a = Tensor({info.matrix_out, rank});  // zero start
        ad.b = Tensor({rank, info.matrix_in});
        Rng rng(derive_seed(seed, "adapter." + path));
        for (size_t i = 0; i < ad.b.size(); ++i) ad.b[i] = 0.02 * rng.normal();
        ad.scaling = scaling;
        m.adapters.emplace(path, std::move(ad));
    }
    return m;
}

ParameterSet fold_adapters(const DualEncoder& enc, const AdaptedModel& model) {
    ParameterSet out = model.base;
    for (const auto& [path, ad] : model.adapters) {
        const LayerInfo& info = enc.layer(path);
        Tensor& w = out.at(path + ".weight");
        // W' = W + scaling * A x B through the unrolled view.
        const int rows = info.matrix_out, cols = info.matrix_in, r = ad.a.dim(1);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) {
                real acc = 0.0;
                for (int k = 0; k < r; ++k) {
                    acc += ad.a[static_cast<size_t>(i) * r + k] *
                           ad.b[static_cast<size_t>(k) * cols + j];
                }
                w[static_cast<size_t>(i) * cols + j] += ad.scaling * acc;
            }
        }
    }
    return out;
}

AdapterOverlay bind_adapters(Graph& g, const AdaptedModel& model,
                             std::map<std::string, std::pair<ValueId, ValueId>>* nodes) {
    AdapterOverlay overlay;
    for (const auto& [path, ad] : model.adapters) {
        ValueId a = g.input(ad.a, true);
        ValueId b = g.input(ad.b, true);
        overlay[path] = AdapterNodeRef{a, b, ad.scaling};
        if (nodes) (*nodes)[path] = {a, b};
    }
    return overlay;
}

}  // namespace unlearn
