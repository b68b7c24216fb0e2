#pragma once

#include <string>
#include <vector>

#include "unlearn/data.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Relative Fisher layer scoring. Scores are diagonal empirical Fisher values:
// per layer, the mean over examples of the squared gradient of the image-text
// similarity objective, averaged over the layer's parameter entries so wide
// and narrow layers are comparable.
// ---------------------------------------------------------------------------

enum class FisherObjective {
    Similarity,       // cosine similarity of the paired embeddings
    ContrastiveLoss,  // image->text cross entropy over the full vocab
};

struct LayerScore {
    std::string layer;
    real score = 0.0;
};

struct LayerScoreMap {
    std::vector<LayerScore> scores;  // tower order
    real epsilon = 0.0;
    std::string forget_fingerprint;
    std::string retain_fingerprint;

    real at(const std::string& layer) const;
    std::string to_json() const;
};

// Per-layer raw Fisher on one dataset. Every trainable image-tower layer is
// present in the result, in tower order.
std::vector<LayerScore> layer_fisher(const DualEncoder& enc, const ParameterSet& ps,
                                     const Dataset& dataset,
                                     FisherObjective objective = FisherObjective::Similarity);

// Relative Fisher: forget / (retain + epsilon), per layer.
LayerScoreMap relative_fisher(const DualEncoder& enc, const ParameterSet& ps,
                              const Dataset& forget_set, const Dataset& retain_set,
                              real epsilon = 1e-8,
                              FisherObjective objective = FisherObjective::Similarity);

// The k highest-scoring layers, descending; ties break toward earlier tower
// order. k must be in [1, |scores|].
std::vector<std::string> select_layers(const LayerScoreMap& scores, int k);

// Default selection width: 25% of the image-tower layers, rounded up.
int default_selection_k(int n_layers);

}  // namespace unlearn
