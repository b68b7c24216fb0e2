#include "unlearn/store.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "unlearn/errors.hpp"

namespace unlearn {

using nlohmann::json;
namespace fs = std::filesystem;

std::string RunManifest::to_json() const {
    json j;
    j["run_id"] = run_id;
    j["command"] = command;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["timings_sec"] = timings_sec;
    return j.dump(2);
}

ArtifactStore::ArtifactStore(std::string root, std::string run_id)
    : run_dir_(std::move(root) + "/" + std::move(run_id)) {
    fs::create_directories(run_dir_ + "/checkpoints");
    fs::create_directories(run_dir_ + "/logs");
    fs::create_directories(run_dir_ + "/reports");
}

std::string ArtifactStore::checkpoint_path(const std::string& name) const {
    return run_dir_ + "/checkpoints/" + name;
}

std::string ArtifactStore::log_path(const std::string& name) const {
    return run_dir_ + "/logs/" + name;
}

std::string ArtifactStore::report_path(const std::string& name) const {
    return run_dir_ + "/reports/" + name;
}

void ArtifactStore::write_text(const std::string& path, const std::string& content) const {
    atomic_write_text(path, content);
}

void ArtifactStore::write_manifest(const RunManifest& m) const {
    atomic_write_text(run_dir_ + "/manifest.json", m.to_json() + "\n");
}

void atomic_write_text(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc | std::ios::binary);
        if (!f) throw ConfigError("cannot open '" + tmp + "' for writing");
        f << content;
        if (!f) throw ConfigError("short write to '" + tmp + "'");
    }
    fs::rename(tmp, path);
}

std::string file_content_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot hash missing file '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

Stopwatch::Stopwatch()
    : start_ns_(std::chrono::duration_cast<std::chrono::nanoseconds>(
                    std::chrono::steady_clock::now().time_since_epoch())
                    .count()) {}

double Stopwatch::seconds() const {
    const long long now = std::chrono::duration_cast<std::chrono::nanoseconds>(
                              std::chrono::steady_clock::now().time_since_epoch())
                              .count();
    return static_cast<double>(now - start_ns_) * 1e-9;
}

}  // namespace unlearn
