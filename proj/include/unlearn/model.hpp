#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "unlearn/checkpoint.hpp"
#include "unlearn/data.hpp"
#include "unlearn/graph.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Dual encoder: image tower of conv+BN+ReLU blocks with global pooling and a
// linear projection; text tower as an embedding table over whole prompts.
// Both towers emit unit-normalized embeddings of the same width.
// ---------------------------------------------------------------------------

struct BlockSpec {
    int channels = 16;
    int kernel = 3;
    int stride = 1;
    bool has_batchnorm = true;
};

struct ModelSpec {
    int image_channels = 3;
    int image_size = 16;
    std::vector<BlockSpec> blocks;
    int embed_dim = 32;
    std::vector<std::string> vocab;
    real temperature = 0.1;  // contrastive logit scale: logits = sim / temperature
    real bn_eps = 1e-5;
    real bn_momentum = 0.1;  // running = (1-m)*running + m*batch, pre-training only

    void validate() const;
    std::string fingerprint() const;
    std::string to_json() const;
    static ModelSpec from_json(const std::string& s);
};

// A "layer" is the unit of Fisher scoring, selection and adaptation: a named
// module owning one or more parameter tensors.
struct LayerInfo {
    std::string path;                     // e.g. img.block0.conv
    std::vector<std::string> param_paths; // tensors owned by this layer
    bool matrix_capable = false;          // can take a low-rank adapter
    int matrix_out = 0, matrix_in = 0;    // unrolled matrix view dims
};

enum class BnMode { Frozen, Batch };

// Low-rank adapter overlay used while building a graph: effective weight is
// W + scaling * reshape(A x B).
struct AdapterNodeRef {
    ValueId a;
    ValueId b;
    real scaling = 1.0;
};
using AdapterOverlay = std::map<std::string, AdapterNodeRef>;

struct PretrainConfig {
    int epochs = 25;
    int batch = 64;
    real lr = 3e-3;
    real adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    real coarse_prompt_prob = 0.5;  // pair with superclass vs subgroup prompt
    real holdout_fraction = 0.1;
    uint64_t seed = 0;
};

struct PretrainLog {
    std::vector<real> losses;          // per step
    real holdout_accuracy_coarse = 0;  // superclass zero-shot on the holdout
    real holdout_accuracy_fine = 0;    // subgroup zero-shot on the holdout
};

class DualEncoder {
public:
    explicit DualEncoder(ModelSpec spec);
    static DualEncoder from_checkpoint(const ParameterSet& ps);

    const ModelSpec& spec() const { return spec_; }
    const std::vector<LayerInfo>& image_layers() const { return image_layers_; }
    const LayerInfo& layer(const std::string& path) const;
    std::vector<std::string> image_layer_paths() const;
    std::vector<std::string> adapter_capable_paths() const;
    std::vector<std::string> bn_layer_paths() const;
    const std::string& text_layer_path() const { return text_layer_; }

    ParameterSet init_params(uint64_t seed) const;
    void check_params(const ParameterSet& ps) const;

    // --- graph building ---
    struct Binding {
        std::map<std::string, ValueId> params;  // parameter path -> node
        std::set<std::string> trainable;        // layer paths bound with grad
    };
    Binding bind(Graph& g, const ParameterSet& ps,
                 const std::set<std::string>& trainable_layers) const;

    struct ImageForward {
        ValueId embed;                 // (N, embed_dim), unit rows
        std::vector<ValueId> pre_bn;   // pre-BN activations, tower order
    };
    ImageForward image_forward(Graph& g, const Binding& bind, const ParameterSet& ps,
                               ValueId images, BnMode mode,
                               const AdapterOverlay* adapters = nullptr,
                               std::vector<Tensor>* batch_means = nullptr,
                               std::vector<Tensor>* batch_vars = nullptr) const;
    ValueId text_forward(Graph& g, const Binding& bind,
                         const std::vector<int>& prompt_ids) const;

    // Symmetric contrastive loss over in-batch similarities.
    ValueId contrastive_loss(Graph& g, ValueId img_embed, ValueId txt_embed) const;

    // --- plain inference ---
    Tensor encode_image(const ParameterSet& ps, const Tensor& images) const;
    Tensor encode_text(const ParameterSet& ps, const std::vector<int>& prompt_ids) const;

    struct Classification {
        std::vector<int> predicted;  // index into class_prompt_ids
        Tensor similarities;         // (N, n_classes)
    };
    Classification zero_shot_classify(const ParameterSet& ps, const Tensor& images,
                                      const std::vector<int>& class_prompt_ids) const;

    // Contrastive pre-training on a synthetic dataset; returns the "original"
    // model every experiment starts from.
    ParameterSet pretrain_toy(const Dataset& dataset, const PretrainConfig& cfg,
                              PretrainLog* log = nullptr) const;

    void check_image_batch(const Tensor& images) const;

private:
    ModelSpec spec_;
    std::vector<LayerInfo> image_layers_;
    std::string text_layer_ = "txt.embed";
    std::vector<int> block_input_channels_;  // per block
    int final_channels_ = 0;
};

real cosine_similarity(const Tensor& a, const Tensor& b);

}  // namespace unlearn
