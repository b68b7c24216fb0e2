#pragma once

#include <string>
#include <vector>

#include "unlearn/data.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Evaluation protocol: per-suite zero-shot accuracy, capped restoration
// ratios, the directional aggregate Score, and prompt-based retrieval.
// ---------------------------------------------------------------------------

struct SuiteResult {
    std::string suite;
    Direction direction = Direction::Retain;
    real acc_original = 0.0;
    real acc_candidate = 0.0;
    real ratio = 0.0;  // min(acc_candidate / acc_original, 1)
    std::string dataset_fingerprint;
};

struct EvalReport {
    std::vector<SuiteResult> rows;
    real score = 0.0;  // 0..100, forget suites contribute (1 - ratio)
    std::string original_provenance, candidate_provenance;
    std::string original_hash, candidate_hash;

    const SuiteResult& row(const std::string& suite) const;
    std::string to_json() const;
    static EvalReport from_json(const std::string& s);
    std::string to_csv() const;
};

real accuracy(const DualEncoder& enc, const ParameterSet& ps, const EvalSuite& suite);

real restoration_ratio(real acc_unlearn, real acc_ori);

real aggregate_score(const std::vector<std::pair<real, Direction>>& entries);

// Gallery examples ranked by descending cosine similarity to the prompt
// embedding; ties break toward the smaller example id. Returns example ids.
std::vector<int> retrieve(const DualEncoder& enc, const ParameterSet& ps, int prompt_id,
                          const Dataset& gallery, int k);

// Fraction of the top-k retrieved ids that belong to `subgroup`.
real retrieval_hit_rate(const DualEncoder& enc, const ParameterSet& ps, int prompt_id,
                        const Dataset& gallery, int k, int subgroup);

EvalReport build_report(const DualEncoder& enc, const ParameterSet& original,
                        const ParameterSet& candidate, const UnlearnTask& task);

}  // namespace unlearn
