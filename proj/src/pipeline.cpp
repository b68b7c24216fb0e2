#include "unlearn/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "unlearn/optim.hpp"

namespace unlearn {

using nlohmann::json;

void StageConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("stage learning rate must be positive");
    if (steps < 0 || batch < 1) throw ConfigError("bad stage step/batch configuration");
    if (ema_decay < 0.0 || ema_decay > 1.0) throw ConfigError("ema decay must be in [0,1]");
    if (align_steps < 0 || align_lr <= 0.0) throw ConfigError("bad alignment configuration");
    if (adapter_rank < 1) throw ConfigError("adapter rank must be positive");
}

std::string StageLog::to_json() const {
    json j;
    j["stage"] = stage;
    j["losses"] = losses;
    if (!selected_layers.empty()) j["selected_layers"] = selected_layers;
    if (!grid_alphas.empty()) {
        j["grid_alphas"] = grid_alphas;
        j["grid_accuracies"] = grid_accuracies;
    }
    if (alpha_best >= 0.0) j["alpha_best"] = alpha_best;
    j["metric_before"] = metric_before;
    j["metric_after"] = metric_after;
    return j.dump(2);
}

Tensor AlignedBatch::aligned() const {
    Tensor out(originals.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = std::clamp(originals[i] + delta[i], 0.0, 1.0);
    }
    return out;
}

real mean_pair_similarity(const DualEncoder& enc, const ParameterSet& ps, const Dataset& ds) {
    if (ds.empty()) throw ConfigError("similarity over an empty dataset");
    std::vector<int> idx(ds.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Tensor ie = enc.encode_image(ps, stack_images(ds, idx));
    Tensor te = enc.encode_text(ps, prompt_ids_of(ds, idx));
    const int n = ie.dim(0), d = ie.dim(1);
    real acc = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < d; ++k) {
            acc += ie[static_cast<size_t>(i) * d + k] * te[static_cast<size_t>(i) * d + k];
        }
    }
    return acc / static_cast<real>(n);
}

// ------------------------------ forgetting ----------------------------------

ParameterSet forget_stage(const DualEncoder& enc, const ParameterSet& original,
                          const UnlearnTask& task, const std::vector<std::string>& selected_layers,
                          const StageConfig& cfg, StageLog* log) {
    cfg.validate();
    if (selected_layers.empty()) throw ConfigError("forgetting needs at least one selected layer");
    if (task.forget.empty()) throw ConfigError("forgetting set is empty");

    AdaptedModel model = attach_adapters(enc, original, selected_layers, cfg.adapter_rank,
                                         cfg.adapter_scaling, derive_seed(cfg.seed, "adapters"));

    if (log) {
        log->stage = "forget";
        log->selected_layers = selected_layers;
        log->metric_before = mean_pair_similarity(enc, original, task.forget);
    }

    Adam adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng order_rng(derive_seed(cfg.seed, "forget.order"));
    std::vector<int> order(task.forget.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    size_t cursor = order.size();  // triggers an initial shuffle
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<int> idx;
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor >= order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        Tensor images = stack_images(task.forget, idx);
        std::vector<int> prompts = prompt_ids_of(task.forget, idx);

        Graph g;
        DualEncoder::Binding bind = enc.bind(g, model.base, {});
        std::map<std::string, std::pair<ValueId, ValueId>> adapter_nodes;
        AdapterOverlay overlay = bind_adapters(g, model, &adapter_nodes);
        auto fwd = enc.image_forward(g, bind, model.base, g.constant(images), BnMode::Frozen,
                                     &overlay);
        ValueId te = enc.text_forward(g, bind, prompts);
        // Forgetting objective: minimize the mean cosine similarity to the
        // coarse prompt.
        ValueId loss = g.mean_all(g.rowwise_dot(fwd.embed, te));
        const real loss_v = g.value(loss)[0];
        if (!std::isfinite(loss_v)) throw TrainingError("forgetting loss diverged", step);
        if (log) log->losses.push_back(loss_v);
        if (loss_v <= cfg.forget_stop_similarity) break;
        g.backward(loss);

        std::map<std::string, Tensor*> params;
        std::map<std::string, const Tensor*> grads;
        for (auto& [path, ad] : model.adapters) {
            params["adapter." + path + ".a"] = &ad.a;
            params["adapter." + path + ".b"] = &ad.b;
            grads["adapter." + path + ".a"] = &g.grad(adapter_nodes.at(path).first);
            grads["adapter." + path + ".b"] = &g.grad(adapter_nodes.at(path).second);
        }
        adam.step(params, grads);
    }

    ParameterSet folded = fold_adapters(enc, model);
    folded.meta().provenance = "forgotten";
    folded.meta().seed = cfg.seed;
    if (log) log->metric_after = mean_pair_similarity(enc, folded, task.forget);
    return folded;
}

// ------------------------------ alignment -----------------------------------

namespace {

struct AlignEval {
    real loss = 0.0;
    Tensor delta_grad;
};

AlignEval eval_alignment(const DualEncoder& enc, const ParameterSet& original,
                         const Tensor& images, const Tensor& delta, bool want_grad) {
    Graph g;
    DualEncoder::Binding bind = enc.bind(g, original, {});
    ValueId delta_node = g.input(delta, want_grad);
    ValueId aligned = g.clamp01(g.add(g.constant(images), delta_node));
    auto fwd = enc.image_forward(g, bind, original, aligned, BnMode::Frozen);

    const auto bn_paths = enc.bn_layer_paths();
    ValueId loss{};
    bool first = true;
    for (size_t l = 0; l < bn_paths.size(); ++l) {
        ValueId mean_term = g.vec_l2(g.sub(g.channel_mean(fwd.pre_bn[l]),
                                           g.constant(original.at(bn_paths[l] + ".running_mean"))));
        ValueId var_term = g.vec_l2(g.sub(g.channel_var(fwd.pre_bn[l]),
                                          g.constant(original.at(bn_paths[l] + ".running_var"))));
        ValueId term = g.add(mean_term, var_term);
        loss = first ? term : g.add(loss, term);
        first = false;
    }
    AlignEval out;
    out.loss = g.value(loss)[0];
    if (want_grad) {
        g.backward(loss);
        out.delta_grad = g.grad(delta_node);
        if (out.delta_grad.empty()) out.delta_grad = Tensor(delta.shape());
    }
    return out;
}

}  // namespace

real alignment_loss(const DualEncoder& enc, const ParameterSet& original, const Tensor& images,
                    const Tensor* delta) {
    Tensor zero(images.shape());
    return eval_alignment(enc, original, images, delta ? *delta : zero, false).loss;
}

AlignedBatch align_batch(const DualEncoder& enc, const ParameterSet& original,
                         const Tensor& images, const StageConfig& cfg) {
    enc.check_image_batch(images);
    if (images.dim(0) < 2) {
        throw ConfigError("alignment needs a batch of at least 2 (batch variance undefined)");
    }

    AlignedBatch out;
    out.originals = images;
    out.delta = Tensor(images.shape());
    out.loss_initial = eval_alignment(enc, original, images, out.delta, false).loss;
    out.loss_final = out.loss_initial;

    // Plain gradient descent on delta; the step is normalized so align_lr is
    // the per-step pixel budget. Steps that would increase the loss are
    // halved and ultimately rejected, so the loss never rises above L(0).
    real lr = cfg.align_lr;
    Tensor delta = out.delta;
    real current = out.loss_initial;
    for (int step = 0; step < cfg.align_steps; ++step) {
        AlignEval ev = eval_alignment(enc, original, images, delta, true);
        const real gmax = ev.delta_grad.max_abs();
        if (gmax < 1e-15) break;  // flat: already optimal
        bool accepted = false;
        for (int attempt = 0; attempt < 6; ++attempt) {
            Tensor cand(delta.shape());
            const real scale = lr / gmax;
            for (size_t i = 0; i < delta.size(); ++i) {
                cand[i] = std::clamp(delta[i] - scale * ev.delta_grad[i], -cfg.delta_bound,
                                     cfg.delta_bound);
            }
            const real cand_loss = eval_alignment(enc, original, images, cand, false).loss;
            if (cand_loss <= current) {  // accept only non-increasing steps
                delta = std::move(cand);
                current = cand_loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if (!accepted) break;
        if (current < out.loss_final) {
            out.loss_final = current;
            out.delta = delta;
        }
    }
    return out;
}

// ------------------------------- reminding ----------------------------------

ParameterSet remind_stage(const DualEncoder& enc, const ParameterSet& forgotten,
                          const ParameterSet& original, const UnlearnTask& task,
                          const StageConfig& cfg, StageLog* log) {
    cfg.validate();
    if (task.retain_ft.empty()) throw ConfigError("retain set is empty");
    if (!forgotten.merge_compatible(original)) {
        throw IncompatibleError("forgotten and original checkpoints are incompatible");
    }

    ParameterSet theta = forgotten;
    ParameterSet ema = original;  // the average is anchored at the original

    std::set<std::string> trainable;
    if (cfg.remind_layers.empty()) {
        for (const auto& p : enc.image_layer_paths()) trainable.insert(p);
    } else {
        for (const auto& p : cfg.remind_layers) {
            enc.layer(p);  // rejects unknown layer names
            trainable.insert(p);
        }
    }

    if (log) {
        log->stage = "remind";
        log->metric_before = mean_pair_similarity(enc, theta, task.retain_ft);
    }

    Adam adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng order_rng(derive_seed(cfg.seed, "remind.order"));
    std::vector<int> order(task.retain_ft.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    size_t cursor = order.size();

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<int> idx;
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor >= order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        Tensor images = stack_images(task.retain_ft, idx);
        std::vector<int> prompts = prompt_ids_of(task.retain_ft, idx);

        // Align the batch to the pre-training distribution carried by the
        // ORIGINAL model's BN statistics, then fine-tune on the aligned batch.
        AlignedBatch ab = align_batch(enc, original, images, cfg);
        Tensor aligned = ab.aligned();

        Graph g;
        DualEncoder::Binding bind = enc.bind(g, theta, trainable);
        auto fwd = enc.image_forward(g, bind, theta, g.constant(aligned), BnMode::Frozen);
        ValueId te = enc.text_forward(g, bind, prompts);
        ValueId loss = enc.contrastive_loss(g, fwd.embed, te);
        const real loss_v = g.value(loss)[0];
        if (!std::isfinite(loss_v)) throw TrainingError("reminding loss diverged", step);
        if (log) log->losses.push_back(loss_v);
        g.backward(loss);

        std::map<std::string, Tensor*> params;
        std::map<std::string, const Tensor*> grads;
        for (const auto& l : enc.image_layers()) {
            if (!trainable.count(l.path)) continue;
            for (const auto& p : l.param_paths) {
                params[p] = &theta.at(p);
                grads[p] = &g.grad(bind.params.at(p));
            }
        }
        adam.step(params, grads);
        ema_update(ema, theta, cfg.ema_decay);
    }

    ema.meta().provenance = "reminded";
    ema.meta().seed = cfg.seed;
    if (log) log->metric_after = mean_pair_similarity(enc, ema, task.retain_ft);
    return ema;
}

// ------------------------------ merge / EMA ----------------------------------

ParameterSet merge_models(const ParameterSet& theta_f, const ParameterSet& theta_ori, real alpha) {
    if (!theta_f.merge_compatible(theta_ori)) {
        throw IncompatibleError("cannot merge: fingerprints or shapes disagree");
    }
    if (alpha == 0.0) {
        ParameterSet out = theta_ori;
        out.meta().provenance = "merged";
        return out;
    }
    if (alpha == 1.0) {
        ParameterSet out = theta_f;
        out.meta().provenance = "merged";
        return out;
    }
    ParameterSet out = theta_f;
    for (auto& [path, t] : out.entries()) {
        const Tensor& o = theta_ori.at(path);
        for (size_t i = 0; i < t.size(); ++i) {
            t[i] = alpha * t[i] + (1.0 - alpha) * o[i];
        }
    }
    out.meta().provenance = "merged";
    return out;
}

void ema_update(ParameterSet& ema, const ParameterSet& theta, real decay) {
    if (decay == 1.0) return;  // fixed point: ema stays put
    if (!ema.merge_compatible(theta)) {
        throw IncompatibleError("ema update over incompatible parameter sets");
    }
    if (decay == 0.0) {
        const CheckpointMeta meta = ema.meta();
        ema = theta;
        ema.meta() = meta;
        return;
    }
    for (auto& [path, t] : ema.entries()) {
        const Tensor& s = theta.at(path);
        for (size_t i = 0; i < t.size(); ++i) {
            t[i] = decay * t[i] + (1.0 - decay) * s[i];
        }
    }
}

// ------------------------------- restoring ----------------------------------

RestoreResult restore_stage(const DualEncoder& enc, const ParameterSet& reminded,
                            const ParameterSet& original, const Dataset& calibration,
                            const std::vector<int>& class_prompt_ids,
                            const std::vector<real>& grid, StageLog* log) {
    if (calibration.empty()) throw ConfigError("calibration set is empty");
    if (grid.empty()) throw ConfigError("merge grid is empty");
    for (real a : grid) {
        if (a < 0.0 || a > 1.0) throw ConfigError("merge grid values must lie in [0,1]");
    }
    std::vector<real> sorted = grid;
    std::sort(sorted.begin(), sorted.end());

    std::vector<int> idx(calibration.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Tensor images = stack_images(calibration, idx);
    std::vector<int> prompts = prompt_ids_of(calibration, idx);
    std::vector<int> targets(prompts.size(), -1);
    for (size_t i = 0; i < prompts.size(); ++i) {
        for (size_t c = 0; c < class_prompt_ids.size(); ++c) {
            if (class_prompt_ids[c] == prompts[i]) targets[i] = static_cast<int>(c);
        }
        if (targets[i] < 0) throw ConfigError("calibration example's prompt not in class list");
    }

    if (log) log->stage = "restore";
    RestoreResult best;
    real best_acc = -1.0;
    for (real a : sorted) {
        // a is the weight on the ORIGINAL model.
        ParameterSet merged = merge_models(reminded, original, 1.0 - a);
        auto cls = enc.zero_shot_classify(merged, images, class_prompt_ids);
        int ok = 0;
        for (size_t i = 0; i < targets.size(); ++i) {
            if (cls.predicted[i] == targets[i]) ++ok;
        }
        const real acc = static_cast<real>(ok) / static_cast<real>(targets.size());
        if (log) {
            log->grid_alphas.push_back(a);
            log->grid_accuracies.push_back(acc);
        }
        if (acc > best_acc) {  // strict: ties keep the smaller weight
            best_acc = acc;
            best.alpha_best = a;
            best.restored = std::move(merged);
        }
    }
    best.restored.meta().provenance = "restored";
    if (log) log->alpha_best = best.alpha_best;
    return best;
}

ParameterSet continuous_merge(const std::vector<ParameterSet>& unlearned,
                              const ParameterSet& reference) {
    if (unlearned.empty()) throw IncompatibleError("continuous merge needs checkpoints");
    for (const auto& u : unlearned) {
        if (!u.merge_compatible(reference)) {
            throw IncompatibleError("checkpoint incompatible with the reference model");
        }
    }
    ParameterSet out = unlearned.front();
    if (unlearned.size() > 1) {
        const real inv = 1.0 / static_cast<real>(unlearned.size());
        for (auto& [path, t] : out.entries()) {
            for (size_t i = 0; i < t.size(); ++i) t[i] *= inv;
            for (size_t u = 1; u < unlearned.size(); ++u) {
                const Tensor& s = unlearned[u].at(path);
                for (size_t i = 0; i < t.size(); ++i) t[i] += inv * s[i];
            }
        }
    }
    out.meta().provenance = "continuous";
    return out;
}

// ----------------------------- orchestration --------------------------------

std::vector<real> default_merge_grid() {
    std::vector<real> g;
    for (int i = 0; i <= 20; ++i) g.push_back(0.05 * i);
    return g;
}

PipelineResult run_unlearn_pipeline(const DualEncoder& enc, const ParameterSet& original,
                                    const UnlearnTask& task, const PipelineConfig& cfg) {
    PipelineResult r;
    r.scores = relative_fisher(enc, original, task.forget, task.retain_ft, cfg.fisher_epsilon,
                               cfg.objective);

    // Adapters need a matrix view, so selection runs over the adapter-capable
    // subset of the scored layers.
    LayerScoreMap capable;
    capable.epsilon = r.scores.epsilon;
    capable.forget_fingerprint = r.scores.forget_fingerprint;
    capable.retain_fingerprint = r.scores.retain_fingerprint;
    for (const auto& s : r.scores.scores) {
        if (!enc.layer(s.layer).matrix_capable) continue;
        if (!cfg.select_candidates.empty() &&
            std::find(cfg.select_candidates.begin(), cfg.select_candidates.end(), s.layer) ==
                cfg.select_candidates.end()) {
            continue;
        }
        capable.scores.push_back(s);
    }
    if (capable.scores.empty()) throw ConfigError("no adapter-capable layers in the candidate pool");
    int k = cfg.select_k > 0 ? cfg.select_k
                             : default_selection_k(static_cast<int>(r.scores.scores.size()));
    k = std::min(k, static_cast<int>(capable.scores.size()));
    r.selected = select_layers(capable, k);

    StageConfig fcfg = cfg.forget;
    fcfg.seed = derive_seed(cfg.seed, "stage.forget");
    r.forgotten = forget_stage(enc, original, task, r.selected, fcfg, &r.forget_log);

    StageConfig rcfg = cfg.remind;
    rcfg.seed = derive_seed(cfg.seed, "stage.remind");
    if (cfg.remind_selected_only) rcfg.remind_layers = r.selected;
    r.reminded = remind_stage(enc, r.forgotten, original, task, rcfg, &r.remind_log);

    std::vector<int> cal_prompts;
    const Taxonomy& tax = task.retain_ft.taxonomy;
    for (int local = 0; local < tax.subgroups_per_superclass; ++local) {
        cal_prompts.push_back(
            tax.fine_prompt_id(task.target_superclass * tax.subgroups_per_superclass + local));
    }
    const auto grid = cfg.merge_grid.empty() ? default_merge_grid() : cfg.merge_grid;
    RestoreResult rr = restore_stage(enc, r.reminded, original, task.calibration, cal_prompts,
                                     grid, &r.restore_log);
    r.restored = std::move(rr.restored);
    r.alpha_best = rr.alpha_best;
    r.restored.meta().seed = cfg.seed;
    return r;
}

}  // namespace unlearn
