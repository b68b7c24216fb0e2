#pragma once

#include <map>
#include <string>
#include <vector>

#include "unlearn/model.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Low-rank adapters on selected layers. The base stays frozen; the adapted
// forward uses W + scaling * A x B through the unrolled matrix view of each
// layer, and fold_adapters bakes that delta back into a flat ParameterSet.
// A starts at zero so the adapted model equals the base at attach time.
// ---------------------------------------------------------------------------

struct LoraAdapter {
    Tensor a;  // (out, rank), zero-initialized
    Tensor b;  // (rank, in), small gaussian
    real scaling = 1.0;
};

struct AdaptedModel {
    ParameterSet base;
    std::map<std::string, LoraAdapter> adapters;  // keyed by layer path
    int rank = 4;
    real scaling = 1.0;
};

AdaptedModel attach_adapters(const DualEncoder& enc, const ParameterSet& base,
                             const std::vector<std::string>& layer_paths, int rank, real scaling,
                             uint64_t seed);

ParameterSet fold_adapters(const DualEncoder& enc, const AdaptedModel& model);

// Binds adapter tensors into a graph as trainable inputs and returns the
// overlay image_forward consumes. `nodes` receives the (a, b) node per layer
// for gradient readout.
AdapterOverlay bind_adapters(Graph& g, const AdaptedModel& model,
                             std::map<std::string, std::pair<ValueId, ValueId>>* nodes = nullptr);

}  // namespace unlearn
