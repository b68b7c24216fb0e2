#include "unlearn/fisher.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace unlearn {

using nlohmann::json;

real LayerScoreMap::at(const std::string& layer) const {
    for (const auto& s : scores) {
        if (s.layer == layer) return s.score;
    }
    throw ConfigError("no score for layer '" + layer + "'");
}

std::string LayerScoreMap::to_json() const {
    json j;
    j["epsilon"] = epsilon;
    j["forget_fingerprint"] = forget_fingerprint;
    j["retain_fingerprint"] = retain_fingerprint;
    json s = json::object();
    json order = json::array();
    for (const auto& e : scores) {
        s[e.layer] = e.score;
        order.push_back(e.layer);
    }
    j["scores"] = s;
    j["tower_order"] = order;
    return j.dump(2);
}

std::vector<LayerScore> layer_fisher(const DualEncoder& enc, const ParameterSet& ps,
                                     const Dataset& dataset, FisherObjective objective) {
    if (dataset.empty()) throw ConfigError("fisher scoring needs a non-empty dataset");
    enc.check_params(ps);

    const auto& layers = enc.image_layers();
    // Per-example contributions are accumulated in a canonical (sorted) order
    // so scores are exactly invariant to dataset permutation.
    std::vector<std::vector<real>> per_example(layers.size());
    std::set<std::string> trainable;
    for (const auto& l : layers) trainable.insert(l.path);

    std::vector<int> all_prompts;
    if (objective == FisherObjective::ContrastiveLoss) {
        for (size_t v = 0; v < enc.spec().vocab.size(); ++v) {
            all_prompts.push_back(static_cast<int>(v));
        }
    }

    for (size_t n = 0; n < dataset.items.size(); ++n) {
        const auto& ex = dataset.items[n];
        Graph g;
        DualEncoder::Binding b = enc.bind(g, ps, trainable);
        Tensor one = stack_images(dataset, {static_cast<int>(n)});
        auto f = enc.image_forward(g, b, ps, g.constant(one), BnMode::Frozen);
        ValueId loss;
        if (objective == FisherObjective::Similarity) {
            ValueId te = enc.text_forward(g, b, {ex.prompt_id});
            loss = g.mean_all(g.rowwise_dot(f.embed, te));
        } else {
            ValueId te = enc.text_forward(g, b, all_prompts);
            ValueId logits = g.scale(g.matmul_nt(f.embed, te), 1.0 / enc.spec().temperature);
            loss = g.cross_entropy_rows(logits, {ex.prompt_id});
        }
        g.backward(loss);
        for (size_t li = 0; li < layers.size(); ++li) {
            real acc = 0.0;
            for (const auto& p : layers[li].param_paths) {
                const Tensor& gr = g.grad(b.params.at(p));
                if (gr.empty()) continue;
                for (size_t i = 0; i < gr.size(); ++i) acc += gr[i] * gr[i];
            }
            per_example[li].push_back(acc);
        }
    }

    std::vector<LayerScore> out;
    const real inv_n = 1.0 / static_cast<real>(dataset.items.size());
    for (size_t li = 0; li < layers.size(); ++li) {
        std::sort(per_example[li].begin(), per_example[li].end());
        real sum = 0.0;
        for (real v : per_example[li]) sum += v;
        size_t n_params = 0;
        for (const auto& p : layers[li].param_paths) n_params += ps.at(p).size();
        out.push_back({layers[li].path, sum * inv_n / static_cast<real>(n_params)});
    }
    return out;
}

LayerScoreMap relative_fisher(const DualEncoder& enc, const ParameterSet& ps,
                              const Dataset& forget_set, const Dataset& retain_set, real epsilon,
                              FisherObjective objective) {
    if (epsilon <= 0.0) throw ConfigError("relative fisher epsilon must be positive");
    auto ff = layer_fisher(enc, ps, forget_set, objective);
    auto fr = layer_fisher(enc, ps, retain_set, objective);
    LayerScoreMap m;
    m.epsilon = epsilon;
    m.forget_fingerprint = hex64(forget_set.fingerprint());
    m.retain_fingerprint = hex64(retain_set.fingerprint());
    for (size_t i = 0; i < ff.size(); ++i) {
        m.scores.push_back({ff[i].layer, ff[i].score / (fr[i].score + epsilon)});
    }
    return m;
}

std::vector<std::string> select_layers(const LayerScoreMap& scores, int k) {
    const int n = static_cast<int>(scores.scores.size());
    if (k < 1 || k > n) {
        throw ConfigError("selection width k=" + std::to_string(k) + " out of range [1," +
                          std::to_string(n) + "]");
    }
    // Stable sort on descending score keeps tower order among ties.
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores.scores[static_cast<size_t>(a)].score >
               scores.scores[static_cast<size_t>(b)].score;
    });
    std::vector<std::string> out;
    for (int i = 0; i < k; ++i) {
        out.push_back(scores.scores[static_cast<size_t>(order[static_cast<size_t>(i)])].layer);
    }
    return out;
}

int default_selection_k(int n_layers) {
    return std::max(1, (n_layers + 3) / 4);
}

}  // namespace unlearn
