#include "unlearn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "unlearn/checkpoint.hpp"

namespace unlearn {

using nlohmann::json;

const SuiteResult& EvalReport::row(const std::string& suite) const {
    for (const auto& r : rows) {
        if (r.suite == suite) return r;
    }
    throw ConfigError("report has no suite '" + suite + "'");
}

std::string EvalReport::to_json() const {
    json j;
    j["score"] = score;
    j["original_provenance"] = original_provenance;
    j["candidate_provenance"] = candidate_provenance;
    j["original_hash"] = original_hash;
    j["candidate_hash"] = candidate_hash;
    j["suites"] = json::array();
    for (const auto& r : rows) {
        j["suites"].push_back({{"suite", r.suite},
                               {"direction", r.direction == Direction::Forget ? "forget" : "retain"},
                               {"acc_original", r.acc_original},
                               {"acc_candidate", r.acc_candidate},
                               {"ratio", r.ratio},
                               {"dataset_fingerprint", r.dataset_fingerprint}});
    }
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& s) {
    json j = json::parse(s);
    EvalReport r;
    r.score = j.at("score").get<real>();
    r.original_provenance = j.at("original_provenance").get<std::string>();
    r.candidate_provenance = j.at("candidate_provenance").get<std::string>();
    r.original_hash = j.at("original_hash").get<std::string>();
    r.candidate_hash = j.at("candidate_hash").get<std::string>();
    for (const auto& e : j.at("suites")) {
        SuiteResult row;
        row.suite = e.at("suite").get<std::string>();
        row.direction =
            e.at("direction").get<std::string>() == "forget" ? Direction::Forget : Direction::Retain;
        row.acc_original = e.at("acc_original").get<real>();
        row.acc_candidate = e.at("acc_candidate").get<real>();
        row.ratio = e.at("ratio").get<real>();
        row.dataset_fingerprint = e.value("dataset_fingerprint", std::string());
        r.rows.push_back(std::move(row));
    }
    return r;
}

std::string EvalReport::to_csv() const {
    std::string out = "suite,direction,acc_original,acc_candidate,ratio_pct\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.4f,%.4f,%.1f\n", r.suite.c_str(),
                      r.direction == Direction::Forget ? "forget" : "retain", r.acc_original,
                      r.acc_candidate, 100.0 * r.ratio);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "score,,,,%.1f\n", score);
    out += buf;
    return out;
}

real accuracy(const DualEncoder& enc, const ParameterSet& ps, const EvalSuite& suite) {
    if (suite.data.empty()) throw ConfigError("suite '" + suite.name + "' is empty");
    std::vector<int> idx(suite.data.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    auto cls = enc.zero_shot_classify(ps, stack_images(suite.data, idx), suite.class_prompt_ids);
    int ok = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
        if (cls.predicted[i] == suite.targets[i]) ++ok;
    }
    return static_cast<real>(ok) / static_cast<real>(idx.size());
}

real restoration_ratio(real acc_unlearn, real acc_ori) {
    if (acc_ori <= 0.0) {
        throw UndefinedBaselineError("restoration ratio undefined: original accuracy is zero");
    }
    return std::min(acc_unlearn / acc_ori, 1.0);
}

real aggregate_score(const std::vector<std::pair<real, Direction>>& entries) {
    if (entries.empty()) throw ConfigError("aggregate score of an empty entry list");
    real acc = 0.0;
    for (const auto& [ratio, dir] : entries) {
        acc += dir == Direction::Forget ? (1.0 - ratio) : ratio;
    }
    return 100.0 * acc / static_cast<real>(entries.size());
}

std::vector<int> retrieve(const DualEncoder& enc, const ParameterSet& ps, int prompt_id,
                          const Dataset& gallery, int k) {
    if (gallery.empty()) throw ConfigError("retrieval gallery is empty");
    if (k < 1 || k > static_cast<int>(gallery.size())) {
        throw ConfigError("retrieval k=" + std::to_string(k) + " out of range [1," +
                          std::to_string(gallery.size()) + "]");
    }
    std::vector<int> idx(gallery.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Tensor ie = enc.encode_image(ps, stack_images(gallery, idx));
    Tensor te = enc.encode_text(ps, {prompt_id});
    const int d = ie.dim(1);
    std::vector<std::pair<real, int>> ranked;  // (-similarity, example id)
    ranked.reserve(gallery.size());
    for (size_t i = 0; i < gallery.size(); ++i) {
        real s = 0.0;
        for (int j = 0; j < d; ++j) s += ie[i * static_cast<size_t>(d) + j] * te[static_cast<size_t>(j)];
        ranked.emplace_back(-s, gallery.items[i].id);
    }
    std::sort(ranked.begin(), ranked.end());
    std::vector<int> out;
    for (int i = 0; i < k; ++i) out.push_back(ranked[static_cast<size_t>(i)].second);
    return out;
}

real retrieval_hit_rate(const DualEncoder& enc, const ParameterSet& ps, int prompt_id,
                        const Dataset& gallery, int k, int subgroup) {
    auto top = retrieve(enc, ps, prompt_id, gallery, k);
    std::map<int, int> sub_by_id;
    for (const auto& ex : gallery.items) sub_by_id[ex.id] = ex.subgroup;
    int hits = 0;
    for (int id : top) {
        if (sub_by_id.at(id) == subgroup) ++hits;
    }
    return static_cast<real>(hits) / static_cast<real>(k);
}

EvalReport build_report(const DualEncoder& enc, const ParameterSet& original,
                        const ParameterSet& candidate, const UnlearnTask& task) {
    if (!original.merge_compatible(candidate)) {
        throw IncompatibleError("report needs architecture-compatible checkpoints");
    }
    if (task.suites.empty()) throw ConfigError("task defines no evaluation suites");

    EvalReport rep;
    rep.original_provenance = original.meta().provenance;
    rep.candidate_provenance = candidate.meta().provenance;
    rep.original_hash = checkpoint_hash(original);
    rep.candidate_hash = checkpoint_hash(candidate);

    std::vector<std::pair<real, Direction>> entries;
    for (const auto& [name, suite] : task.suites) {
        SuiteResult r;
        r.suite = name;
        r.direction = suite.direction;
        r.acc_original = accuracy(enc, original, suite);
        r.acc_candidate = accuracy(enc, candidate, suite);
        r.ratio = restoration_ratio(r.acc_candidate, r.acc_original);
        r.dataset_fingerprint = hex64(suite.data.fingerprint());
        entries.emplace_back(r.ratio, r.direction);
        rep.rows.push_back(std::move(r));
    }
    rep.score = aggregate_score(entries);
    return rep;
}

}  // namespace unlearn
