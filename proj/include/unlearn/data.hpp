#pragma once

#include <map>
#include <string>
#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Synthetic datasets with superclass/subgroup structure. Subgroup ids are
// global (superclass * subgroups_per_superclass + local index) and determine
// the superclass uniquely.
// ---------------------------------------------------------------------------

struct Taxonomy {
    int n_superclasses = 4;
    int subgroups_per_superclass = 4;

    int n_subgroups() const { return n_superclasses * subgroups_per_superclass; }
    int superclass_of(int subgroup) const { return subgroup / subgroups_per_superclass; }
    int coarse_prompt_id(int superclass) const { return superclass; }
    int fine_prompt_id(int subgroup) const { return n_superclasses + subgroup; }
    int vocab_size() const { return n_superclasses + n_subgroups(); }
    // Prompt strings: superclass names first, then subgroup names.
    std::vector<std::string> vocab() const;
};

struct LabeledExample {
    Tensor image;        // (C,H,W), values in [0,1]
    int superclass = 0;
    int subgroup = 0;    // global subgroup id
    int style = 0;       // 0 = none
    int id = -1;         // stable example id, assigned at generation
    int prompt_id = -1;  // text label used for pairing; fine by default
};

struct Dataset {
    Taxonomy taxonomy;
    int channels = 3;
    int image_size = 16;
    std::vector<LabeledExample> items;

    size_t size() const { return items.size(); }
    bool empty() const { return items.empty(); }
    uint64_t fingerprint() const;
};

// TaxonomySpec: generation recipe. `overlap` in [0,1] controls how much of a
// subgroup's texture field is shared with its superclass siblings (0 =
// disjoint generative factors, 1 = identical). The render profile knobs
// produce the out-of-domain variants.
struct TaxonomySpec {
    int n_superclasses = 4;
    int subgroups_per_superclass = 4;
    int images_per_subgroup = 200;
    real overlap = 0.3;
    int image_size = 16;
    int channels = 3;
    uint64_t seed = 0;

    int texture_family = 0;   // 0 = gaussian blobs, 1 = sinusoidal gratings
    real noise_scale = 0.04;
    real contrast = 1.0;
    real brightness = 0.0;
    int render_size = 0;      // render at this size then rescale; 0 = image_size
    int example_stream = 0;   // separates per-example noise streams between variants

    void validate() const;
};

Dataset generate_synthetic(const TaxonomySpec& spec);

// Test/introspection hooks: the texture field a subgroup renders with (before
// per-example jitter), and the share of it that comes from the superclass.
Tensor subgroup_texture_field(const TaxonomySpec& spec, int superclass, int local_subgroup);
real subgroup_shared_weight(const TaxonomySpec& spec);

// Deterministic style transforms. 1 = edge-sketch, 2 = posterize,
// 3 = grayscale; labels are unchanged and the style field is set.
Dataset apply_style(const Dataset& d, int style_id);
Tensor styled_image(const Tensor& image, int style_id);

// ---------------------------------------------------------------------------
// Unlearn task: forget/retain/calibration splits plus named evaluation suites.
// ---------------------------------------------------------------------------

enum class Direction { Forget, Retain };

enum class LabelKind { Superclass, Subgroup };

struct EvalSuite {
    std::string name;
    Direction direction = Direction::Retain;
    Dataset data;
    std::vector<int> class_prompt_ids;  // candidate prompts for zero-shot
    std::vector<int> targets;           // index into class_prompt_ids per example
};

struct SplitFractions {
    real forget = 0.7;        // of the target subgroup pool; rest is the target eval suite
    real retain_ft = 0.6;     // of the sibling pool, used for reminding
    real calibration = 0.1;   // of the sibling pool, disjoint from retain_ft
    void validate() const;
};

struct UnlearnTask {
    int target_superclass = 0;
    int target_subgroup = 0;       // global id
    uint64_t split_seed = 0;
    std::string source_spec_json;  // generating TaxonomySpec, for the archive
    Dataset forget;                // coarse prompt ids
    Dataset retain_ft;             // fine prompt ids
    Dataset calibration;           // fine prompt ids, disjoint from retain_ft
    std::map<std::string, EvalSuite> suites;
};

// Carves the unlearn task out of `dataset` (splits) and builds the evaluation
// suites, regenerating shifted out-of-domain variants from `spec`.
UnlearnTask split_unlearn_task(const Dataset& dataset, const TaxonomySpec& spec,
                               int target_subgroup, const SplitFractions& fractions,
                               uint64_t seed);

// Batch helpers.
Tensor stack_images(const Dataset& d, const std::vector<int>& idx);
std::vector<int> prompt_ids_of(const Dataset& d, const std::vector<int>& idx);

// Dataset archive: JSON manifest + one binary tensor file per split.
void save_task(const UnlearnTask& task, const std::string& dir);
UnlearnTask load_task(const std::string& dir);

}  // namespace unlearn
