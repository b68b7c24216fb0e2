// unlearn_lab: experiment runner for desk-scale dual-encoder subgroup
// unlearning. Subcommands: pretrain, unlearn, baseline, eval, sweep,
// continuous. Every run writes runs/<run-id>/{manifest.json, checkpoints/,
// logs/, reports/}; artifacts are content-hashed and runs are reproducible
// from (config, seed).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "unlearn/baselines.hpp"
#include "unlearn/checkpoint.hpp"
#include "unlearn/config.hpp"
#include "unlearn/data.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/eval.hpp"
#include "unlearn/fisher.hpp"
#include "unlearn/model.hpp"
#include "unlearn/pipeline.hpp"
#include "unlearn/store.hpp"

namespace {

using namespace unlearn;
using nlohmann::json;

// ------------------------------ config schema -------------------------------

const std::map<std::string, std::set<std::string>>& config_schema() {
    static const std::map<std::string, std::set<std::string>> schema = {
        {"run", {"seed", "out_dir", "name"}},
        {"dataset",
         {"n_superclasses", "subgroups_per_superclass", "images_per_subgroup", "overlap",
          "image_size", "noise_scale", "texture_family", "style_fraction"}},
        {"model", {"blocks", "embed_dim", "temperature", "bn_momentum"}},
        {"pretrain", {"epochs", "batch", "lr", "holdout_fraction", "coarse_prompt_prob"}},
        {"task",
         {"target_subgroup", "eval_images_per_subgroup", "forget_fraction", "retain_ft_fraction",
          "calibration_fraction"}},
        {"select", {"k", "epsilon", "objective", "candidates"}},
        {"adapters", {"rank", "scaling"}},
        {"forget", {"steps", "lr", "batch", "stop_similarity"}},
        {"remind",
         {"steps", "lr", "batch", "ema_decay", "align_steps", "align_lr", "delta_bound",
          "selected_only", "layers"}},
        {"restore", {"grid"}},
        {"baseline",
         {"method", "lr", "epochs", "batch", "noise_copies", "noise_sigma", "fisher_alpha_var",
          "fisher_convention"}},
        {"sweep", {"axis", "values", "fixed_alpha"}},
        {"io",
         {"original_checkpoint", "forgotten_checkpoint", "reminded_checkpoint", "task_dir",
          "candidate_checkpoint", "reference_checkpoint", "checkpoints"}},
    };
    return schema;
}

struct CliOptions {
    std::string config_path;
    std::string out_dir;       // override of run.out_dir
    long seed = -1;            // override of run.seed
};

Config load_config(const CliOptions& opt) {
    Config cfg = Config::parse_file(opt.config_path);
    cfg.check_schema(config_schema());
    if (opt.seed >= 0) cfg.set("run", "seed", std::to_string(opt.seed));
    if (!opt.out_dir.empty()) cfg.set("run", "out_dir", opt.out_dir);
    if (!cfg.has("run", "seed")) {
        throw ConfigError(cfg.origin() + ": missing required key 'seed' in [run]");
    }
    return cfg;
}

// ------------------------------ config -> types -----------------------------

TaxonomySpec dataset_spec(const Config& c) {
    TaxonomySpec s;
    s.n_superclasses = static_cast<int>(c.get_int("dataset", "n_superclasses", 4));
    s.subgroups_per_superclass =
        static_cast<int>(c.get_int("dataset", "subgroups_per_superclass", 4));
    s.images_per_subgroup = static_cast<int>(c.get_int("dataset", "images_per_subgroup", 200));
    s.overlap = c.get_real("dataset", "overlap", 0.3);
    s.image_size = static_cast<int>(c.get_int("dataset", "image_size", 16));
    s.noise_scale = c.get_real("dataset", "noise_scale", 0.04);
    s.texture_family = static_cast<int>(c.get_int("dataset", "texture_family", 0));
    s.seed = static_cast<uint64_t>(c.get_int("run", "seed", 0));
    s.validate();
    return s;
}

std::vector<BlockSpec> parse_blocks(const std::string& text) {
    std::vector<BlockSpec> blocks;
    std::istringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        BlockSpec b;
        int fields = 0;
        std::istringstream bs(item);
        std::string tok;
        while (std::getline(bs, tok, ':')) {
            switch (fields) {
                case 0: b.channels = std::stoi(tok); break;
                case 1: b.kernel = std::stoi(tok); break;
                case 2: b.stride = std::stoi(tok); break;
                case 3: b.has_batchnorm = (tok == "bn"); break;
                default: throw ConfigError("too many fields in block spec '" + item + "'");
            }
            ++fields;
        }
        if (fields < 3) throw ConfigError("block spec '" + item + "' needs channels:kernel:stride");
        if (fields < 4) b.has_batchnorm = true;
        blocks.push_back(b);
    }
    if (blocks.empty()) throw ConfigError("empty block list");
    return blocks;
}

ModelSpec model_spec(const Config& c, const TaxonomySpec& ds) {
    ModelSpec m;
    m.image_channels = 3;
    m.image_size = ds.image_size;
    m.blocks = parse_blocks(c.get_str("model", "blocks", "16:3:1:bn,32:3:2:bn,32:3:2:bn"));
    m.embed_dim = static_cast<int>(c.get_int("model", "embed_dim", 32));
    m.temperature = c.get_real("model", "temperature", 0.1);
    m.bn_momentum = c.get_real("model", "bn_momentum", 0.1);
    Taxonomy tax;
    tax.n_superclasses = ds.n_superclasses;
    tax.subgroups_per_superclass = ds.subgroups_per_superclass;
    m.vocab = tax.vocab();
    m.validate();
    return m;
}

UnlearnTask build_task(const Config& c, const TaxonomySpec& ds) {
    TaxonomySpec pool = ds;
    pool.images_per_subgroup =
        static_cast<int>(c.get_int("task", "eval_images_per_subgroup", 60));
    pool.example_stream = 3;
    Dataset eval_pool = generate_synthetic(pool);
    SplitFractions fr;
    fr.forget = c.get_real("task", "forget_fraction", 0.7);
    fr.retain_ft = c.get_real("task", "retain_ft_fraction", 0.6);
    fr.calibration = c.get_real("task", "calibration_fraction", 0.1);
    const int target = static_cast<int>(c.get_int("task", "target_subgroup", 0));
    return split_unlearn_task(eval_pool, pool, target, fr, derive_seed(pool.seed, "task"));
}

PipelineConfig pipeline_config(const Config& c) {
    PipelineConfig p;
    p.seed = static_cast<uint64_t>(c.get_int("run", "seed", 0));
    p.select_k = static_cast<int>(c.get_int("select", "k", 0));
    if (c.has("select", "candidates")) {
        std::istringstream ss(c.get_str("select", "candidates"));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item.erase(0, item.find_first_not_of(" \t"));
            item.erase(item.find_last_not_of(" \t") + 1);
            if (!item.empty()) p.select_candidates.push_back(item);
        }
    }
    p.fisher_epsilon = c.get_real("select", "epsilon", 1e-8);
    const std::string obj = c.get_str("select", "objective", "similarity");
    if (obj == "similarity") {
        p.objective = FisherObjective::Similarity;
    } else if (obj == "contrastive") {
        p.objective = FisherObjective::ContrastiveLoss;
    } else {
        throw ConfigError("unknown fisher objective '" + obj + "'");
    }
    p.forget.adapter_rank = static_cast<int>(c.get_int("adapters", "rank", 4));
    p.forget.adapter_scaling = c.get_real("adapters", "scaling", 1.0);
    p.forget.steps = static_cast<int>(c.get_int("forget", "steps", 300));
    p.forget.lr = c.get_real("forget", "lr", 1e-6);
    p.forget.batch = static_cast<int>(c.get_int("forget", "batch", 32));
    p.forget.forget_stop_similarity = c.get_real("forget", "stop_similarity", -2.0);
    p.remind.steps = static_cast<int>(c.get_int("remind", "steps", 60));
    p.remind.lr = c.get_real("remind", "lr", 1e-6);
    p.remind.batch = static_cast<int>(c.get_int("remind", "batch", 32));
    p.remind.ema_decay = c.get_real("remind", "ema_decay", 0.9);
    p.remind.align_steps = static_cast<int>(c.get_int("remind", "align_steps", 20));
    p.remind.align_lr = c.get_real("remind", "align_lr", 0.1);
    p.remind.delta_bound = c.get_real("remind", "delta_bound", 1.0);
    p.remind_selected_only = c.get_bool("remind", "selected_only", false);
    if (c.has("remind", "layers")) {
        std::istringstream ss(c.get_str("remind", "layers"));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item.erase(0, item.find_first_not_of(" \t"));
            item.erase(item.find_last_not_of(" \t") + 1);
            if (!item.empty()) p.remind.remind_layers.push_back(item);
        }
    }
    p.merge_grid = c.get_real_list("restore", "grid", default_merge_grid());
    return p;
}

BaselineConfig baseline_config(const Config& c, const std::string& method_override) {
    BaselineConfig b;
    const std::string method =
        method_override.empty() ? c.get_str("baseline", "method") : method_override;
    b.method = baseline_from_string(method);
    b.lr = c.get_real("baseline", "lr", 1e-6);
    b.epochs = static_cast<int>(c.get_int("baseline", "epochs", -1));
    b.batch = static_cast<int>(c.get_int("baseline", "batch", 128));
    b.noise_copies = static_cast<int>(c.get_int("baseline", "noise_copies", 10));
    b.noise_sigma = c.get_real("baseline", "noise_sigma", 0.1);
    b.fisher_alpha_var = c.get_real("baseline", "fisher_alpha_var", 0.2);
    b.fisher_direct_convention =
        c.get_str("baseline", "fisher_convention", "inverse") == "direct";
    b.seed = static_cast<uint64_t>(c.get_int("run", "seed", 0));
    return b;
}

std::string run_id_for(const Config& c, const std::string& cmd) {
    const std::string name = c.get_str("run", "name", cmd);
    return name + "-" + c.content_hash().substr(0, 12) + "-s" +
           std::to_string(c.get_int("run", "seed", 0));
}

std::string out_root(const Config& c) { return c.get_str("run", "out_dir", "runs"); }

// ------------------------------- subcommands --------------------------------

int cmd_pretrain(const CliOptions& opt) {
    Config c = load_config(opt);
    Stopwatch total;
    TaxonomySpec ds = dataset_spec(c);
    ModelSpec ms = model_spec(c, ds);
    DualEncoder enc(ms);

    ArtifactStore store(out_root(c), run_id_for(c, "pretrain"));
    RunManifest manifest;
    manifest.run_id = run_id_for(c, "pretrain");
    manifest.command = "pretrain";
    manifest.config_hash = c.content_hash();
    manifest.seed = ds.seed;

    Stopwatch sw_data;
    Dataset train = generate_synthetic(ds);
    manifest.timings_sec["generate"] = sw_data.seconds();

    PretrainConfig pc;
    pc.epochs = static_cast<int>(c.get_int("pretrain", "epochs", 25));
    pc.batch = static_cast<int>(c.get_int("pretrain", "batch", 64));
    pc.lr = c.get_real("pretrain", "lr", 3e-3);
    pc.holdout_fraction = c.get_real("pretrain", "holdout_fraction", 0.1);
    pc.coarse_prompt_prob = c.get_real("pretrain", "coarse_prompt_prob", 0.5);
    pc.seed = ds.seed;

    Stopwatch sw_train;
    PretrainLog plog;
    ParameterSet original = enc.pretrain_toy(train, pc, &plog);
    manifest.timings_sec["pretrain"] = sw_train.seconds();

    const std::string ckpt = store.checkpoint_path("original.ckpt");
    save_checkpoint(original, ckpt);
    manifest.outputs["original.ckpt"] = file_content_hash(ckpt);

    Stopwatch sw_task;
    UnlearnTask task = build_task(c, ds);
    save_task(task, store.run_dir() + "/task");
    manifest.timings_sec["task"] = sw_task.seconds();
    manifest.outputs["task"] = file_content_hash(store.run_dir() + "/task/manifest.json");

    json jlog;
    jlog["losses"] = plog.losses;
    jlog["holdout_accuracy_coarse"] = plog.holdout_accuracy_coarse;
    jlog["holdout_accuracy_fine"] = plog.holdout_accuracy_fine;
    store.write_text(store.log_path("pretrain.json"), jlog.dump(2) + "\n");

    manifest.timings_sec["total"] = total.seconds();
    store.write_manifest(manifest);
    std::cout << "pretrained: holdout coarse=" << plog.holdout_accuracy_coarse
              << " fine=" << plog.holdout_accuracy_fine << "\n"
              << "run dir: " << store.run_dir() << "\n";
    return 0;
}

// Loads the task artifact when [io] names one; otherwise rebuilds it from the
// config deterministically and persists it under the run directory.
UnlearnTask obtain_task(const Config& c, const ArtifactStore& store, RunManifest& manifest) {
    if (c.has("io", "task_dir")) {
        const std::string task_dir = c.get_str("io", "task_dir");
        manifest.inputs["task"] = file_content_hash(task_dir + "/manifest.json");
        return load_task(task_dir);
    }
    UnlearnTask task = build_task(c, dataset_spec(c));
    save_task(task, store.run_dir() + "/task");
    manifest.outputs["task"] = file_content_hash(store.run_dir() + "/task/manifest.json");
    return task;
}

int cmd_unlearn(const CliOptions& opt) {
    Config c = load_config(opt);
    Stopwatch total;
    const std::string orig_path = c.get_str("io", "original_checkpoint");

    ParameterSet original = load_checkpoint(orig_path);
    DualEncoder enc = DualEncoder::from_checkpoint(original);
    PipelineConfig pc = pipeline_config(c);

    ArtifactStore store(out_root(c), run_id_for(c, "unlearn"));
    RunManifest manifest;
    manifest.run_id = run_id_for(c, "unlearn");
    manifest.command = "unlearn";
    manifest.config_hash = c.content_hash();
    manifest.seed = pc.seed;
    manifest.inputs["original.ckpt"] = file_content_hash(orig_path);
    UnlearnTask task = obtain_task(c, store, manifest);

    Stopwatch sw;
    PipelineResult r = run_unlearn_pipeline(enc, original, task, pc);
    manifest.timings_sec["pipeline"] = sw.seconds();

    for (const auto& [name, ps] :
         std::vector<std::pair<std::string, const ParameterSet*>>{{"forgotten.ckpt", &r.forgotten},
                                                                  {"reminded.ckpt", &r.reminded},
                                                                  {"restored.ckpt", &r.restored}}) {
        const std::string path = store.checkpoint_path(name);
        save_checkpoint(*ps, path);
        manifest.outputs[name] = file_content_hash(path);
    }
    store.write_text(store.log_path("layer_scores.json"), r.scores.to_json() + "\n");
    store.write_text(store.log_path("forget.json"), r.forget_log.to_json() + "\n");
    store.write_text(store.log_path("remind.json"), r.remind_log.to_json() + "\n");
    store.write_text(store.log_path("restore.json"), r.restore_log.to_json() + "\n");

    manifest.timings_sec["total"] = total.seconds();
    store.write_manifest(manifest);
    std::cout << "unlearned subgroup " << task.target_subgroup << ": alpha_best=" << r.alpha_best
              << " (weight on original)\nrun dir: " << store.run_dir() << "\n";
    return 0;
}

int cmd_baseline(const CliOptions& opt, const std::string& method) {
    Config c = load_config(opt);
    Stopwatch total;
    ParameterSet original = load_checkpoint(c.get_str("io", "original_checkpoint"));
    DualEncoder enc = DualEncoder::from_checkpoint(original);
    BaselineConfig bc = baseline_config(c, method);

    ArtifactStore store(out_root(c), run_id_for(c, "baseline-" + baseline_name(bc.method)));
    RunManifest manifest;
    manifest.run_id = run_id_for(c, "baseline-" + baseline_name(bc.method));
    manifest.command = "baseline";
    manifest.config_hash = c.content_hash();
    manifest.seed = bc.seed;
    manifest.inputs["original.ckpt"] = file_content_hash(c.get_str("io", "original_checkpoint"));
    UnlearnTask task = obtain_task(c, store, manifest);

    Stopwatch sw;
    StageLog log;
    ParameterSet out = run_baseline(enc, original, task, bc, &log);
    manifest.timings_sec["baseline"] = sw.seconds();

    const std::string name = baseline_name(bc.method) + ".ckpt";
    save_checkpoint(out, store.checkpoint_path(name));
    manifest.outputs[name] = file_content_hash(store.checkpoint_path(name));
    store.write_text(store.log_path("baseline.json"), log.to_json() + "\n");
    manifest.timings_sec["total"] = total.seconds();
    store.write_manifest(manifest);
    std::cout << "baseline " << baseline_name(bc.method) << " written to " << store.run_dir()
              << "\n";
    return 0;
}

int cmd_eval(const CliOptions& opt, std::string original_path, std::string candidate_path,
             std::string task_path) {
    Config c = load_config(opt);
    Stopwatch total;
    if (original_path.empty()) original_path = c.get_str("io", "original_checkpoint");
    if (candidate_path.empty()) candidate_path = c.get_str("io", "candidate_checkpoint");
    if (task_path.empty()) task_path = c.get_str("io", "task_dir");

    ParameterSet original = load_checkpoint(original_path);
    ParameterSet candidate = load_checkpoint(candidate_path);
    DualEncoder enc = DualEncoder::from_checkpoint(original);
    UnlearnTask task = load_task(task_path);

    ArtifactStore store(out_root(c), run_id_for(c, "eval"));
    RunManifest manifest;
    manifest.run_id = run_id_for(c, "eval");
    manifest.command = "eval";
    manifest.config_hash = c.content_hash();
    manifest.seed = static_cast<uint64_t>(c.get_int("run", "seed", 0));
    manifest.inputs["original.ckpt"] = file_content_hash(original_path);
    manifest.inputs["candidate.ckpt"] = file_content_hash(candidate_path);

    EvalReport rep = build_report(enc, original, candidate, task);
    store.write_text(store.report_path("report.json"), rep.to_json() + "\n");
    store.write_text(store.report_path("report.csv"), rep.to_csv());
    manifest.outputs["report.json"] = file_content_hash(store.report_path("report.json"));

    // Retrieval lists for the target subgroup and its superclass prompts.
    const Taxonomy& tax = task.retain_ft.taxonomy;
    const Dataset& gallery = task.suites.at("all").data;
    const int k = std::min<int>(20, static_cast<int>(gallery.size()));
    json retr;
    for (int pid : {tax.fine_prompt_id(task.target_subgroup),
                    tax.coarse_prompt_id(task.target_superclass)}) {
        retr[std::to_string(pid)] = {
            {"original", retrieve(enc, original, pid, gallery, k)},
            {"candidate", retrieve(enc, candidate, pid, gallery, k)},
        };
    }
    store.write_text(store.report_path("retrieval.json"), retr.dump(2) + "\n");

    manifest.timings_sec["total"] = total.seconds();
    store.write_manifest(manifest);
    std::printf("score: %.1f (candidate %s vs original %s)\n", rep.score,
                rep.candidate_provenance.c_str(), rep.original_provenance.c_str());
    std::cout << "run dir: " << store.run_dir() << "\n";
    return 0;
}

struct SweepRow {
    real value;
    real acc_forget, acc_retain, acc_all, acc_unseen;
};

SweepRow sweep_eval(const DualEncoder& enc, const ParameterSet& ps, const UnlearnTask& task,
                    real value) {
    SweepRow row{};
    row.value = value;
    row.acc_forget = accuracy(enc, ps, task.suites.at("target"));
    row.acc_retain = accuracy(enc, ps, task.suites.at("retain"));
    row.acc_all = accuracy(enc, ps, task.suites.at("all"));
    real unseen = 0.0;
    int n = 0;
    for (const auto& [name, suite] : task.suites) {
        if (name.rfind("unseen", 0) == 0) {
            unseen += accuracy(enc, ps, suite);
            ++n;
        }
    }
    row.acc_unseen = n > 0 ? unseen / n : 0.0;
    return row;
}

int cmd_sweep(const CliOptions& opt, const std::string& axis_flag, const std::string& values_flag) {
    Config c = load_config(opt);
    Stopwatch total;
    const std::string axis = axis_flag.empty() ? c.get_str("sweep", "axis") : axis_flag;
    if (axis != "remind_steps" && axis != "alpha_merge") {
        throw ConfigError("sweep axis must be remind_steps or alpha_merge");
    }
    std::vector<real> values;
    if (!values_flag.empty()) {
        Config tmp = Config::parse_string("[sweep]\nvalues = " + values_flag, "<--values>");
        values = tmp.get_real_list("sweep", "values", {});
    } else {
        values = c.get_real_list("sweep", "values", {});
    }
    std::sort(values.begin(), values.end());

    ParameterSet original = load_checkpoint(c.get_str("io", "original_checkpoint"));
    DualEncoder enc = DualEncoder::from_checkpoint(original);
    UnlearnTask task = load_task(c.get_str("io", "task_dir"));

    ArtifactStore store(out_root(c), run_id_for(c, "sweep-" + axis));
    RunManifest manifest;
    manifest.run_id = run_id_for(c, "sweep-" + axis);
    manifest.command = "sweep";
    manifest.config_hash = c.content_hash();
    manifest.seed = static_cast<uint64_t>(c.get_int("run", "seed", 0));

    std::vector<SweepRow> rows;
    if (axis == "alpha_merge") {
        ParameterSet reminded = load_checkpoint(c.get_str("io", "reminded_checkpoint"));
        for (real a : values) {
            // a is the weight on the original model.
            ParameterSet merged = merge_models(reminded, original, 1.0 - a);
            rows.push_back(sweep_eval(enc, merged, task, a));
        }
    } else {
        ParameterSet forgotten = load_checkpoint(c.get_str("io", "forgotten_checkpoint"));
        PipelineConfig pc = pipeline_config(c);
        const real fixed_alpha = c.get_real("sweep", "fixed_alpha", 0.65);
        for (real v : values) {
            StageConfig rc = pc.remind;
            rc.steps = static_cast<int>(v);
            rc.seed = derive_seed(pc.seed, "stage.remind");
            ParameterSet reminded = remind_stage(enc, forgotten, original, task, rc);
            ParameterSet merged = merge_models(reminded, original, 1.0 - fixed_alpha);
            rows.push_back(sweep_eval(enc, merged, task, v));
        }
    }

    std::string csv = "value,acc_forget,acc_retain,acc_all,acc_unseen\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.4g,%.4f,%.4f,%.4f,%.4f\n", r.value, r.acc_forget,
                      r.acc_retain, r.acc_all, r.acc_unseen);
        csv += buf;
    }
    store.write_text(store.report_path("sweep_" + axis + ".csv"), csv);
    manifest.outputs["sweep_" + axis + ".csv"] =
        file_content_hash(store.report_path("sweep_" + axis + ".csv"));
    manifest.timings_sec["total"] = total.seconds();
    store.write_manifest(manifest);
    std::cout << csv << "run dir: " << store.run_dir() << "\n";
    return 0;
}

int cmd_continuous(const CliOptions& opt, const std::vector<std::string>& ckpt_flags,
                   const std::string& reference_flag) {
    Config c = load_config(opt);
    Stopwatch total;
    std::vector<std::string> ckpt_paths = ckpt_flags;
    if (ckpt_paths.empty()) {
        std::istringstream ss(c.get_str("io", "checkpoints"));
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) ckpt_paths.push_back(item);
        }
    }
    if (ckpt_paths.empty()) throw ConfigError("continuous merge needs checkpoint paths");
    const std::string ref_path =
        reference_flag.empty() ? c.get_str("io", "reference_checkpoint") : reference_flag;

    ParameterSet reference = load_checkpoint(ref_path);
    DualEncoder enc = DualEncoder::from_checkpoint(reference);
    UnlearnTask task = load_task(c.get_str("io", "task_dir"));

    std::vector<ParameterSet> unlearned;
    for (const auto& p : ckpt_paths) unlearned.push_back(load_checkpoint(p));
    ParameterSet merged = continuous_merge(unlearned, reference);

    ArtifactStore store(out_root(c), run_id_for(c, "continuous"));
    RunManifest manifest;
    manifest.run_id = run_id_for(c, "continuous");
    manifest.command = "continuous";
    manifest.config_hash = c.content_hash();
    manifest.seed = static_cast<uint64_t>(c.get_int("run", "seed", 0));
    for (size_t i = 0; i < ckpt_paths.size(); ++i) {
        manifest.inputs["checkpoint" + std::to_string(i)] = file_content_hash(ckpt_paths[i]);
    }

    save_checkpoint(merged, store.checkpoint_path("continuous.ckpt"));
    manifest.outputs["continuous.ckpt"] =
        file_content_hash(store.checkpoint_path("continuous.ckpt"));

    // Per-subgroup cross-forget table over the broad suite, fine prompts.
    const Taxonomy& tax = task.retain_ft.taxonomy;
    const Dataset& gallery = task.suites.at("all").data;
    std::vector<int> fine_ids;
    for (int s = 0; s < tax.n_subgroups(); ++s) fine_ids.push_back(tax.fine_prompt_id(s));
    std::vector<int> idx(gallery.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Tensor images = stack_images(gallery, idx);
    auto cls_ref = enc.zero_shot_classify(reference, images, fine_ids);
    auto cls_mrg = enc.zero_shot_classify(merged, images, fine_ids);

    std::string csv = "subgroup,superclass,acc_reference,acc_merged,ratio_pct\n";
    char buf[160];
    for (int s = 0; s < tax.n_subgroups(); ++s) {
        int n = 0, ok_ref = 0, ok_mrg = 0;
        for (size_t i = 0; i < gallery.items.size(); ++i) {
            if (gallery.items[i].subgroup != s) continue;
            ++n;
            if (cls_ref.predicted[i] == s) ++ok_ref;
            if (cls_mrg.predicted[i] == s) ++ok_mrg;
        }
        const real ar = n ? static_cast<real>(ok_ref) / n : 0.0;
        const real am = n ? static_cast<real>(ok_mrg) / n : 0.0;
        const real ratio = ar > 0.0 ? std::min(am / ar, 1.0) : 0.0;
        std::snprintf(buf, sizeof(buf), "%d,%d,%.4f,%.4f,%.1f\n", s, tax.superclass_of(s), ar, am,
                      100.0 * ratio);
        csv += buf;
    }
    store.write_text(store.report_path("continuous.csv"), csv);
    manifest.outputs["continuous.csv"] = file_content_hash(store.report_path("continuous.csv"));
    manifest.timings_sec["total"] = total.seconds();
    store.write_manifest(manifest);
    std::cout << csv << "run dir: " << store.run_dir() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale dual-encoder subgroup unlearning lab"};
    app.require_subcommand(1);

    CliOptions opt;
    std::string method, axis, values, reference;
    std::string eval_original, eval_candidate, eval_task;
    std::vector<std::string> ckpts;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "config file")->required();
        sub->add_option("--out-dir", opt.out_dir, "output root (overrides run.out_dir)");
        sub->add_option("--seed", opt.seed, "seed override");
    };

    CLI::App* sub_pretrain = app.add_subcommand("pretrain", "generate data and pre-train");
    add_common(sub_pretrain);
    CLI::App* sub_unlearn = app.add_subcommand("unlearn", "run the three-stage pipeline");
    add_common(sub_unlearn);
    CLI::App* sub_baseline = app.add_subcommand("baseline", "run a baseline method");
    add_common(sub_baseline);
    sub_baseline->add_option("--method", method, "FT|GA|FISHER_NOISE|LIP|EMMN");
    CLI::App* sub_eval = app.add_subcommand("eval", "evaluate a candidate against the original");
    add_common(sub_eval);
    sub_eval->add_option("--original", eval_original, "original checkpoint");
    sub_eval->add_option("--candidate", eval_candidate, "candidate checkpoint");
    sub_eval->add_option("--task", eval_task, "task directory");
    CLI::App* sub_sweep = app.add_subcommand("sweep", "ablation sweep");
    add_common(sub_sweep);
    sub_sweep->add_option("--axis", axis, "remind_steps|alpha_merge");
    sub_sweep->add_option("--values", values, "comma-separated values");
    CLI::App* sub_cont = app.add_subcommand("continuous", "merge unlearned checkpoints");
    add_common(sub_cont);
    sub_cont->add_option("--checkpoints", ckpts, "unlearned checkpoints");
    sub_cont->add_option("--reference", reference, "reference (original) checkpoint");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sub_pretrain->parsed()) return cmd_pretrain(opt);
        if (sub_unlearn->parsed()) return cmd_unlearn(opt);
        if (sub_baseline->parsed()) return cmd_baseline(opt, method);
        if (sub_eval->parsed()) return cmd_eval(opt, eval_original, eval_candidate, eval_task);
        if (sub_sweep->parsed()) return cmd_sweep(opt, axis, values);
        if (sub_cont->parsed()) return cmd_continuous(opt, ckpts, reference);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const CoverageError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const TrainingError& e) {
        std::cerr << "training failure: " << e.what() << "\n";
        return 3;
    } catch (const IncompatibleError& e) {
        std::cerr << "artifact incompatibility: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
