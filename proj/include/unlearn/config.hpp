#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Flat key-value configuration with [section] headers, '#' comments and
// strict schema checking: unknown or duplicate keys are rejected with line
// diagnostics, and required keys raise named validation errors.
// ---------------------------------------------------------------------------

class Config {
public:
    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text, const std::string& origin = "<config>");

    bool has(const std::string& section, const std::string& key) const;

    std::string get_str(const std::string& section, const std::string& key) const;
    std::string get_str(const std::string& section, const std::string& key,
                        const std::string& fallback) const;
    long get_int(const std::string& section, const std::string& key, long fallback) const;
    long require_int(const std::string& section, const std::string& key) const;
    real get_real(const std::string& section, const std::string& key, real fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<real> get_real_list(const std::string& section, const std::string& key,
                                    const std::vector<real>& fallback) const;

    // Rejects any key not listed in `allowed` (section -> keys).
    void check_schema(const std::map<std::string, std::set<std::string>>& allowed) const;

    // Overrides from the command line (applied after parsing, pre-hash).
    void set(const std::string& section, const std::string& key, const std::string& value);

    // Hash of the normalized key-value content.
    std::string content_hash() const;

    const std::string& origin() const { return origin_; }

private:
    struct Entry {
        std::string value;
        int line = 0;
    };
    std::map<std::string, std::map<std::string, Entry>> sections_;
    std::string origin_;

    const Entry* find(const std::string& section, const std::string& key) const;
    [[noreturn]] void missing(const std::string& section, const std::string& key) const;
};

}  // namespace unlearn
