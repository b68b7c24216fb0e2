#pragma once

#include <map>
#include <string>

#include "unlearn/tensor.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Filesystem artifact store: runs/<run-id>/{manifest.json, checkpoints/,
// logs/, reports/}. All writes go through write-temp-then-rename so partially
// written artifacts are never visible.
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string run_id;
    std::string command;
    std::string config_hash;
    uint64_t seed = 0;
    std::map<std::string, std::string> inputs;   // name -> content hash
    std::map<std::string, std::string> outputs;  // name -> content hash
    std::map<std::string, double> timings_sec;

    std::string to_json() const;
};

class ArtifactStore {
public:
    ArtifactStore(std::string root, std::string run_id);

    const std::string& run_dir() const { return run_dir_; }
    std::string checkpoint_path(const std::string& name) const;
    std::string log_path(const std::string& name) const;
    std::string report_path(const std::string& name) const;

    void write_text(const std::string& path, const std::string& content) const;
    void write_manifest(const RunManifest& m) const;

private:
    std::string run_dir_;
};

void atomic_write_text(const std::string& path, const std::string& content);
std::string file_content_hash(const std::string& path);

// Simple wall-clock stopwatch for manifest timings.
class Stopwatch {
public:
    Stopwatch();
    double seconds() const;

private:
    long long start_ns_;
};

}  // namespace unlearn
