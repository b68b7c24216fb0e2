#pragma once

#include <string>
#include <vector>

#include "unlearn/adapters.hpp"
#include "unlearn/data.hpp"
#include "unlearn/fisher.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Three-stage subgroup unlearning: forgetting (low-rank adaptation of the
// Fisher-selected layers against the coarse prompt), reminding (aligned
// fine-tuning on the retain set with an EMA anchored at the original), and
// restoration (merge-coefficient search on the calibration set). Plus
// checkpoint merging utilities for continuous multi-target forgetting.
// ---------------------------------------------------------------------------

struct StageConfig {
    real lr = 1e-6;
    int steps = 100;
    int batch = 32;
    real adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    int adapter_rank = 4;
    real adapter_scaling = 1.0;
    // Forgetting stops once the batch mean similarity falls to this value;
    // values <= -1 disable the stop. Keeps the folded delta small instead of
    // driving the cosine all the way to -1.
    real forget_stop_similarity = -2.0;

    real ema_decay = 0.9;   // weight-averaging decay
    int align_steps = 20;
    real align_lr = 0.1;
    real delta_bound = 1.0;  // max |delta| per pixel before [0,1] clipping

    // Layers reminding may touch; empty means the whole image tower.
    std::vector<std::string> remind_layers;

    uint64_t seed = 0;

    void validate() const;
};

struct StageLog {
    std::string stage;
    std::vector<real> losses;
    std::vector<std::string> selected_layers;
    std::vector<real> grid_alphas;      // restore: weight on the original model
    std::vector<real> grid_accuracies;
    real alpha_best = -1.0;
    real metric_before = 0.0;
    real metric_after = 0.0;
    std::string to_json() const;
};

struct AlignedBatch {
    Tensor originals;
    Tensor delta;
    real loss_initial = 0.0;
    real loss_final = 0.0;
    Tensor aligned() const;  // clip01(originals + delta)
};

// Mean cosine similarity between the images of `ds` and their text prompts.
real mean_pair_similarity(const DualEncoder& enc, const ParameterSet& ps, const Dataset& ds);

// Alignment loss of a perturbed batch against the original model's BN
// running statistics (no gradient).
real alignment_loss(const DualEncoder& enc, const ParameterSet& original, const Tensor& images,
                    const Tensor* delta = nullptr);

AlignedBatch align_batch(const DualEncoder& enc, const ParameterSet& original,
                         const Tensor& images, const StageConfig& cfg);

ParameterSet forget_stage(const DualEncoder& enc, const ParameterSet& original,
                          const UnlearnTask& task, const std::vector<std::string>& selected_layers,
                          const StageConfig& cfg, StageLog* log = nullptr);

ParameterSet remind_stage(const DualEncoder& enc, const ParameterSet& forgotten,
                          const ParameterSet& original, const UnlearnTask& task,
                          const StageConfig& cfg, StageLog* log = nullptr);

// Elementwise convex combination: alpha weights theta_f, (1-alpha) weights
// theta_ori. Endpoints return the respective input bitwise.
ParameterSet merge_models(const ParameterSet& theta_f, const ParameterSet& theta_ori, real alpha);

// ema = decay * ema + (1 - decay) * theta, every entry.
void ema_update(ParameterSet& ema, const ParameterSet& theta, real decay);

struct RestoreResult {
    real alpha_best = 0.0;  // weight on the ORIGINAL model
    ParameterSet restored;
};

// Evaluates zero-shot accuracy on the calibration set for every grid weight
// and returns the accuracy-maximizing merge; ties break toward the smaller
// weight (closer to the unlearned model). Grid weights are on the original:
// restored(a) = merge_models(reminded, original, 1 - a).
RestoreResult restore_stage(const DualEncoder& enc, const ParameterSet& reminded,
                            const ParameterSet& original, const Dataset& calibration,
                            const std::vector<int>& class_prompt_ids,
                            const std::vector<real>& grid, StageLog* log = nullptr);

// Uniform elementwise average of unlearned checkpoints (Appendix-style
// continuous forgetting); `reference` is only used for compatibility checks.
ParameterSet continuous_merge(const std::vector<ParameterSet>& unlearned,
                              const ParameterSet& reference);

// ------------------------- full pipeline orchestration ----------------------

struct PipelineConfig {
    StageConfig forget;
    StageConfig remind;
    std::vector<real> merge_grid;  // weights on the original model
    int select_k = 0;              // 0 -> default_selection_k(image tower size)
    // Optional restriction of the adapter candidate pool (layer paths);
    // empty means every matrix-capable layer.
    std::vector<std::string> select_candidates;
    real fisher_epsilon = 1e-8;
    FisherObjective objective = FisherObjective::Similarity;
    bool remind_selected_only = false;
    uint64_t seed = 0;
};

std::vector<real> default_merge_grid();  // {0.0, 0.05, ..., 1.0}

struct PipelineResult {
    LayerScoreMap scores;
    std::vector<std::string> selected;
    ParameterSet forgotten;
    ParameterSet reminded;
    ParameterSet restored;
    real alpha_best = 0.0;
    StageLog forget_log, remind_log, restore_log;
};

PipelineResult run_unlearn_pipeline(const DualEncoder& enc, const ParameterSet& original,
                                    const UnlearnTask& task, const PipelineConfig& cfg);

}  // namespace unlearn
