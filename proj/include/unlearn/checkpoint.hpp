#pragma once

#include <map>
#include <string>
#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// ParameterSet: named map layer-path -> tensor, plus provenance metadata.
// This is the unit of checkpointing, merging, EMA and Fisher attribution.
// Entries are kept in a sorted map so every iteration order is deterministic.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    std::string fingerprint;              // architecture fingerprint (hex)
    std::vector<std::string> vocab;       // prompt strings, in id order
    uint64_t seed = 0;
    std::string provenance;               // original | forgotten | reminded | restored | baseline:<name> | ...
    std::vector<std::string> bn_layers;   // BN layer paths, in tower order
    std::string spec_json;                // serialized ModelSpec, opaque here
};

class ParameterSet {
public:
    ParameterSet() = default;

    Tensor& at(const std::string& path);
    const Tensor& at(const std::string& path) const;
    bool has(const std::string& path) const { return entries_.count(path) > 0; }
    void put(const std::string& path, Tensor t);

    const std::map<std::string, Tensor>& entries() const { return entries_; }
    std::map<std::string, Tensor>& entries() { return entries_; }

    CheckpointMeta& meta() { return meta_; }
    const CheckpointMeta& meta() const { return meta_; }

    // True iff fingerprints match and every entry has the same shape.
    bool merge_compatible(const ParameterSet& o) const;

    size_t total_parameters() const;

private:
    std::map<std::string, Tensor> entries_;
    CheckpointMeta meta_;
};

// Binary checkpoint format: magic, length-prefixed UTF-8 JSON header, then
// named tensor records (name length + name + dtype code + rank + dims +
// little-endian row-major payload). Round-trips bit-exactly.
std::vector<unsigned char> serialize_checkpoint(const ParameterSet& ps);
ParameterSet deserialize_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const ParameterSet& ps, const std::string& path);
ParameterSet load_checkpoint(const std::string& path);

// Content hash of the serialized form (hex string).
std::string checkpoint_hash(const ParameterSet& ps);

}  // namespace unlearn
