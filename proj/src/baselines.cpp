#include "unlearn/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "unlearn/optim.hpp"

namespace unlearn {

BaselineMethod baseline_from_string(const std::string& name) {
    if (name == "FT" || name == "ft") return BaselineMethod::FT;
    if (name == "GA" || name == "ga") return BaselineMethod::GA;
    if (name == "FISHER_NOISE" || name == "fisher_noise") return BaselineMethod::FisherNoise;
    if (name == "LIP" || name == "lip") return BaselineMethod::LIP;
    if (name == "EMMN" || name == "emmn") return BaselineMethod::EMMN;
    throw ConfigError("unknown baseline method '" + name +
                      "' (expected one of FT, GA, FISHER_NOISE, LIP, EMMN)");
}

std::string baseline_name(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::FT: return "ft";
        case BaselineMethod::GA: return "ga";
        case BaselineMethod::FisherNoise: return "fisher_noise";
        case BaselineMethod::LIP: return "lip";
        case BaselineMethod::EMMN: return "emmn";
    }
    return "?";
}

std::vector<std::string> baseline_names() {
    return {"FT", "GA", "FISHER_NOISE", "LIP", "EMMN"};
}

int BaselineConfig::effective_epochs() const {
    if (epochs >= 0) return epochs;
    switch (method) {
        case BaselineMethod::EMMN: return 5;
        case BaselineMethod::FT:
        case BaselineMethod::GA:
        case BaselineMethod::LIP:
        case BaselineMethod::FisherNoise: return 2;
    }
    return 2;
}

void BaselineConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("baseline learning rate must be positive");
    if (batch < 1) throw ConfigError("baseline batch must be positive");
    if (method == BaselineMethod::LIP) {
        if (noise_copies < 1) throw ConfigError("LIP needs at least one noisy copy");
        if (noise_sigma <= 0.0) throw ConfigError("LIP noise sigma must be positive");
    }
    if (fisher_alpha_var < 0.0) throw ConfigError("fisher variance scale must be non-negative");
}

namespace {

std::set<std::string> image_tower_layers(const DualEncoder& enc) {
    std::set<std::string> s;
    for (const auto& p : enc.image_layer_paths()) s.insert(p);
    return s;
}

void adam_step_image_tower(const DualEncoder& enc, ParameterSet& ps,
                           const DualEncoder::Binding& bind, Graph& g, Adam& adam) {
    std::map<std::string, Tensor*> params;
    std::map<std::string, const Tensor*> grads;
    for (const auto& l : enc.image_layers()) {
        for (const auto& p : l.param_paths) {
            params[p] = &ps.at(p);
            grads[p] = &g.grad(bind.params.at(p));
        }
    }
    adam.step(params, grads);
}

struct BatchSampler {
    std::vector<int> order;
    size_t cursor;
    Rng rng;

    BatchSampler(size_t n, uint64_t seed) : cursor(n), rng(seed) {
        order.resize(n);
        for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    }
    std::vector<int> next(int batch) {
        std::vector<int> idx;
        for (int b = 0; b < batch; ++b) {
            if (cursor >= order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        return idx;
    }
};

// Zero-shot classification surrogate: image -> text cross entropy against the
// class-prompt set the batch's labels live in (superclass prompts for coarse
// labels, subgroup prompts for fine labels). This is the "probability from
// the zero-shot classification task" stand-in for classification logits.
ValueId classification_loss(Graph& g, const DualEncoder& enc, const DualEncoder::Binding& bind,
                            ValueId img_embed, const std::vector<int>& prompts,
                            const Taxonomy& tax) {
    const bool coarse = prompts.front() < tax.n_superclasses;
    std::vector<int> classes;
    if (coarse) {
        for (int c = 0; c < tax.n_superclasses; ++c) classes.push_back(tax.coarse_prompt_id(c));
    } else {
        for (int s = 0; s < tax.n_subgroups(); ++s) classes.push_back(tax.fine_prompt_id(s));
    }
    std::vector<int> targets;
    for (int p : prompts) {
        const bool p_coarse = p < tax.n_superclasses;
        if (p_coarse != coarse) throw ConfigError("mixed coarse/fine labels in one batch");
        targets.push_back(coarse ? p : p - tax.n_superclasses);
    }
    ValueId te = enc.text_forward(g, bind, classes);
    ValueId logits = g.scale(g.matmul_nt(img_embed, te), 1.0 / enc.spec().temperature);
    return g.cross_entropy_rows(logits, targets);
}

// Shared fine-tuning loop: sign=+1 minimizes the surrogate classification
// loss, sign=-1 ascends it. `clip` bounds the optimized scalar when positive.
ParameterSet classification_tune(const DualEncoder& enc, const ParameterSet& original,
                                 const Dataset& data, const BaselineConfig& cfg, real sign,
                                 real clip, StageLog* log) {
    if (data.empty()) throw ConfigError("baseline dataset is empty");
    ParameterSet ps = original;
    const int batch = std::min<int>(cfg.batch, static_cast<int>(data.size()));
    const int steps_per_epoch =
        static_cast<int>((data.size() + static_cast<size_t>(batch) - 1) / batch);
    const int total_steps = cfg.effective_epochs() * steps_per_epoch;

    Adam adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    BatchSampler sampler(data.size(), derive_seed(cfg.seed, "baseline.order"));
    const std::set<std::string> trainable = image_tower_layers(enc);

    for (int step = 0; step < total_steps; ++step) {
        std::vector<int> idx = sampler.next(batch);
        Tensor images = stack_images(data, idx);
        std::vector<int> prompts = prompt_ids_of(data, idx);

        Graph g;
        DualEncoder::Binding bind = enc.bind(g, ps, trainable);
        auto fwd = enc.image_forward(g, bind, ps, g.constant(images), BnMode::Frozen);
        ValueId loss = classification_loss(g, enc, bind, fwd.embed, prompts, data.taxonomy);
        if (sign < 0.0) loss = g.scale(loss, -1.0);
        if (clip > 0.0) loss = g.clamp_scalar(loss, -clip, clip);
        const real loss_v = g.value(loss)[0];
        if (!std::isfinite(loss_v)) throw TrainingError("baseline loss diverged", step);
        if (log) log->losses.push_back(loss_v);
        g.backward(loss);
        adam_step_image_tower(enc, ps, bind, g, adam);
    }
    return ps;
}

ParameterSet ft_baseline(const DualEncoder& enc, const ParameterSet& original,
                         const UnlearnTask& task, const BaselineConfig& cfg, StageLog* log) {
    return classification_tune(enc, original, task.retain_ft, cfg, +1.0, 0.0, log);
}

ParameterSet ga_baseline(const DualEncoder& enc, const ParameterSet& original,
                         const UnlearnTask& task, const BaselineConfig& cfg, StageLog* log) {
    if (task.forget.empty()) throw ConfigError("gradient ascent needs a forgetting set");
    return classification_tune(enc, original, task.forget, cfg, -1.0, cfg.ga_loss_clip, log);
}

ParameterSet fisher_noise_baseline(const DualEncoder& enc, const ParameterSet& original,
                                   const UnlearnTask& task, const BaselineConfig& cfg,
                                   StageLog* log) {
    if (task.forget.empty()) throw ConfigError("fisher noise needs a forgetting set");
    ParameterSet ps = original;
    if (cfg.fisher_alpha_var == 0.0) return ps;  // exactly unchanged

    // Per-parameter diagonal Fisher on the forgetting set.
    const std::set<std::string> trainable = image_tower_layers(enc);
    std::map<std::string, Tensor> fisher;
    for (const auto& l : enc.image_layers()) {
        for (const auto& p : l.param_paths) fisher.emplace(p, Tensor(ps.at(p).shape()));
    }
    for (size_t n = 0; n < task.forget.items.size(); ++n) {
        Graph g;
        DualEncoder::Binding bind = enc.bind(g, ps, trainable);
        Tensor one = stack_images(task.forget, {static_cast<int>(n)});
        auto fwd = enc.image_forward(g, bind, ps, g.constant(one), BnMode::Frozen);
        ValueId te = enc.text_forward(g, bind, {task.forget.items[n].prompt_id});
        ValueId loss = g.mean_all(g.rowwise_dot(fwd.embed, te));
        g.backward(loss);
        for (auto& [p, acc] : fisher) {
            const Tensor& gr = g.grad(bind.params.at(p));
            if (gr.empty()) continue;
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += gr[i] * gr[i];
        }
    }
    const real inv_n = 1.0 / static_cast<real>(task.forget.items.size());

    // Noise variance = alpha_var * F^(-1/2) (or F^(+1/2) under the direct
    // convention); the diagonal is floored to keep the inverse finite.
    Rng rng(derive_seed(cfg.seed, "fisher.noise"));
    real mean_std = 0.0;
    size_t count = 0;
    for (auto& [p, f] : fisher) {
        Tensor& t = ps.at(p);
        for (size_t i = 0; i < t.size(); ++i) {
            const real fi = std::max(f[i] * inv_n, 1e-12);
            const real exponent = cfg.fisher_direct_convention ? 0.5 : -0.5;
            const real variance = cfg.fisher_alpha_var * std::pow(fi, exponent);
            const real std_dev = std::sqrt(variance);
            t[i] += std_dev * rng.normal();
            mean_std += std_dev;
            ++count;
        }
    }
    if (log) log->metric_after = mean_std / static_cast<real>(count);
    return ps;
}

ParameterSet lip_baseline(const DualEncoder& enc, const ParameterSet& original,
                          const UnlearnTask& task, const BaselineConfig& cfg, StageLog* log) {
    if (task.forget.empty()) throw ConfigError("LIP needs a forgetting set");
    ParameterSet ps = original;
    const int n_copies = cfg.noise_copies;

    // Class prompts for the similarity logits: the superclass vocabulary.
    std::vector<int> class_ids;
    for (int c = 0; c < task.forget.taxonomy.n_superclasses; ++c) {
        class_ids.push_back(task.forget.taxonomy.coarse_prompt_id(c));
    }

    Adam adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng noise_rng(derive_seed(cfg.seed, "lip.noise"));
    const std::set<std::string> trainable = image_tower_layers(enc);
    const size_t pixels = task.forget.items.front().image.size();

    long step = 0;
    for (int epoch = 0; epoch < cfg.effective_epochs(); ++epoch) {
        for (size_t n = 0; n < task.forget.items.size(); ++n) {
            const Tensor& x = task.forget.items[n].image;
            // Rows 0..N-1 are the clean image, rows N..2N-1 its noisy copies.
            Tensor batch({2 * n_copies, x.dim(0), x.dim(1), x.dim(2)});
            Tensor inv_eps_norm({n_copies});
            for (int i = 0; i < n_copies; ++i) {
                std::copy(x.data(), x.data() + pixels, batch.data() + static_cast<size_t>(i) * pixels);
            }
            for (int i = 0; i < n_copies; ++i) {
                real norm_sq = 0.0;
                real* dst = batch.data() + (static_cast<size_t>(n_copies) + i) * pixels;
                for (size_t p = 0; p < pixels; ++p) {
                    const real eps = cfg.noise_sigma * noise_rng.normal();
                    dst[p] = x[p] + eps;
                    norm_sq += eps * eps;
                }
                inv_eps_norm[static_cast<size_t>(i)] = 1.0 / std::sqrt(std::max(norm_sq, 1e-24));
            }

            Graph g;
            DualEncoder::Binding bind = enc.bind(g, ps, trainable);
            auto fwd = enc.image_forward(g, bind, ps, g.constant(batch), BnMode::Frozen);
            const int d = enc.spec().embed_dim;
            ValueId clean = g.reshape(fwd.embed, {2 * n_copies, d});
            // Split via constant masks is avoided; instead rebuild the two
            // halves with row gathers through matmul with selector matrices.
            Tensor sel_top({n_copies, 2 * n_copies});
            Tensor sel_bot({n_copies, 2 * n_copies});
            for (int i = 0; i < n_copies; ++i) {
                sel_top[static_cast<size_t>(i) * 2 * n_copies + i] = 1.0;
                sel_bot[static_cast<size_t>(i) * 2 * n_copies + n_copies + i] = 1.0;
            }
            ValueId e_clean = g.matmul_nn(g.constant(sel_top), clean);
            ValueId e_noisy = g.matmul_nn(g.constant(sel_bot), clean);
            ValueId w = g.constant(inv_eps_norm);
            ValueId l_emb = g.mean_all(g.mul(g.rowwise_l2(g.sub(e_clean, e_noisy)), w));

            ValueId te = enc.text_forward(g, bind, class_ids);
            ValueId logits_clean = g.matmul_nt(e_clean, te);
            ValueId logits_noisy = g.matmul_nt(e_noisy, te);
            ValueId l_cls = g.mean_all(g.mul(g.rowwise_l2(g.sub(logits_clean, logits_noisy)), w));

            ValueId loss = g.add(l_emb, l_cls);
            const real loss_v = g.value(loss)[0];
            if (!std::isfinite(loss_v)) throw TrainingError("LIP loss diverged", step);
            if (log) log->losses.push_back(loss_v);
            g.backward(loss);
            adam_step_image_tower(enc, ps, bind, g, adam);
            ++step;
        }
    }
    return ps;
}

ParameterSet emmn_baseline(const DualEncoder& enc, const ParameterSet& original,
                           const UnlearnTask& task, const BaselineConfig& cfg, StageLog* log) {
    if (task.retain_ft.empty()) throw ConfigError("EMMN needs a retain set");
    ParameterSet ps = original;
    const bool has_forget = !task.forget.empty();

    const int batch = std::min<int>(
        cfg.batch, static_cast<int>(std::max(task.retain_ft.size(),
                                             has_forget ? task.forget.size() : size_t{1})));
    const size_t largest = std::max(task.retain_ft.size(), has_forget ? task.forget.size() : 0);
    const int steps_per_epoch =
        static_cast<int>((largest + static_cast<size_t>(batch) - 1) / batch);
    const int total_steps = cfg.effective_epochs() * steps_per_epoch;

    Adam adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    BatchSampler sampler_f(has_forget ? task.forget.size() : 0,
                           derive_seed(cfg.seed, "emmn.forget"));
    BatchSampler sampler_r(task.retain_ft.size(), derive_seed(cfg.seed, "emmn.retain"));
    const std::set<std::string> trainable = image_tower_layers(enc);

    for (int step = 0; step < total_steps; ++step) {
        std::vector<int> idx_r = sampler_r.next(std::min<int>(batch, static_cast<int>(task.retain_ft.size())));

        Graph g;
        DualEncoder::Binding bind = enc.bind(g, ps, trainable);

        Tensor images_r = stack_images(task.retain_ft, idx_r);
        auto fwd_r = enc.image_forward(g, bind, ps, g.constant(images_r), BnMode::Frozen);
        ValueId loss = classification_loss(g, enc, bind, fwd_r.embed,
                                           prompt_ids_of(task.retain_ft, idx_r),
                                           task.retain_ft.taxonomy);

        if (has_forget) {
            std::vector<int> idx_f =
                sampler_f.next(std::min<int>(batch, static_cast<int>(task.forget.size())));
            Tensor images_f = stack_images(task.forget, idx_f);
            auto fwd_f = enc.image_forward(g, bind, ps, g.constant(images_f), BnMode::Frozen);
            ValueId loss_f = classification_loss(g, enc, bind, fwd_f.embed,
                                                 prompt_ids_of(task.forget, idx_f),
                                                 task.forget.taxonomy);
            loss = g.add(loss, g.clamp_scalar(g.scale(loss_f, -1.0), -cfg.ga_loss_clip,
                                              cfg.ga_loss_clip));
        }

        const real loss_v = g.value(loss)[0];
        if (!std::isfinite(loss_v)) throw TrainingError("EMMN loss diverged", step);
        if (log) log->losses.push_back(loss_v);
        g.backward(loss);
        adam_step_image_tower(enc, ps, bind, g, adam);
    }
    return ps;
}

}  // namespace

ParameterSet run_baseline(const DualEncoder& enc, const ParameterSet& original,
                          const UnlearnTask& task, const BaselineConfig& cfg, StageLog* log) {
    cfg.validate();
    enc.check_params(original);
    if (log) log->stage = "baseline:" + baseline_name(cfg.method);

    ParameterSet out;
    switch (cfg.method) {
        case BaselineMethod::FT: out = ft_baseline(enc, original, task, cfg, log); break;
        case BaselineMethod::GA: out = ga_baseline(enc, original, task, cfg, log); break;
        case BaselineMethod::FisherNoise:
            out = fisher_noise_baseline(enc, original, task, cfg, log);
            break;
        case BaselineMethod::LIP: out = lip_baseline(enc, original, task, cfg, log); break;
        case BaselineMethod::EMMN: out = emmn_baseline(enc, original, task, cfg, log); break;
    }
    out.meta().provenance = "baseline:" + baseline_name(cfg.method);
    out.meta().seed = cfg.seed;
    return out;
}

}  // namespace unlearn
