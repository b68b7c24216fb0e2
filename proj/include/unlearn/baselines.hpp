#pragma once

#include <string>

#include "unlearn/data.hpp"
#include "unlearn/model.hpp"
#include "unlearn/pipeline.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Reference unlearning baselines sharing the dual encoder, task and report
// formats: retain-set fine-tuning (FT), gradient ascent on the forget set
// (GA), Fisher-derived parameter noise, Lipschitz-style smoothing over noisy
// copies (LIP), and joint error min-max (EMMN). Only the image tower is ever
// updated; the text tower stays bitwise unchanged.
// ---------------------------------------------------------------------------

enum class BaselineMethod { FT, GA, FisherNoise, LIP, EMMN };

BaselineMethod baseline_from_string(const std::string& name);
std::string baseline_name(BaselineMethod m);
std::vector<std::string> baseline_names();

struct BaselineConfig {
    BaselineMethod method = BaselineMethod::FT;
    real lr = 1e-6;
    int epochs = -1;  // negative -> per-method default: FT 2, GA 2, LIP 2, EMMN 5
    int batch = 128;
    real adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    int noise_copies = 10;   // LIP
    real noise_sigma = 0.1;  // LIP
    real fisher_alpha_var = 0.2;
    bool fisher_direct_convention = false;  // default: high Fisher -> less noise
    real ga_loss_clip = 50.0;

    uint64_t seed = 0;

    int effective_epochs() const;
    void validate() const;
};

ParameterSet run_baseline(const DualEncoder& enc, const ParameterSet& original,
                          const UnlearnTask& task, const BaselineConfig& cfg,
                          StageLog* log = nullptr);

}  // namespace unlearn
