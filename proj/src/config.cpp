#include "unlearn/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "unlearn/errors.hpp"

namespace unlearn {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str(), path);
}

Config Config::parse_string(const std::string& text, const std::string& origin) {
    Config c;
    c.origin_ = origin;
    std::string section;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": malformed section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) {
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty section name");
            }
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
        }
        if (section.empty()) {
            throw ConfigError(origin + ":" + std::to_string(line_no) +
                              ": key '" + key + "' outside any [section]");
        }
        auto& sec = c.sections_[section];
        if (sec.count(key)) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key +
                              "' in [" + section + "]");
        }
        sec[key] = Entry{value, line_no};
    }
    return c;
}

const Config::Entry* Config::find(const std::string& section, const std::string& key) const {
    auto sit = sections_.find(section);
    if (sit == sections_.end()) return nullptr;
    auto kit = sit->second.find(key);
    if (kit == sit->second.end()) return nullptr;
    return &kit->second;
}

void Config::missing(const std::string& section, const std::string& key) const {
    throw ConfigError(origin_ + ": missing required key '" + key + "' in [" + section + "]");
}

bool Config::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

std::string Config::get_str(const std::string& section, const std::string& key) const {
    const Entry* e = find(section, key);
    if (!e) missing(section, key);
    return e->value;
}

std::string Config::get_str(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
    const Entry* e = find(section, key);
    return e ? e->value : fallback;
}

long Config::get_int(const std::string& section, const std::string& key, long fallback) const {
    const Entry* e = find(section, key);
    if (!e) return fallback;
    try {
        size_t pos = 0;
        long v = std::stol(e->value, &pos);
        if (pos != e->value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": '" + key +
                          "' is not an integer");
    }
}

long Config::require_int(const std::string& section, const std::string& key) const {
    if (!has(section, key)) missing(section, key);
    return get_int(section, key, 0);
}

real Config::get_real(const std::string& section, const std::string& key, real fallback) const {
    const Entry* e = find(section, key);
    if (!e) return fallback;
    try {
        size_t pos = 0;
        real v = std::stod(e->value, &pos);
        if (pos != e->value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": '" + key +
                          "' is not a number");
    }
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const Entry* e = find(section, key);
    if (!e) return fallback;
    if (e->value == "true" || e->value == "1") return true;
    if (e->value == "false" || e->value == "0") return false;
    throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": '" + key +
                      "' is not a boolean (true/false)");
}

std::vector<real> Config::get_real_list(const std::string& section, const std::string& key,
                                        const std::vector<real>& fallback) const {
    const Entry* e = find(section, key);
    if (!e) return fallback;
    std::vector<real> out;
    std::istringstream ss(e->value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": '" + key +
                              "' has a non-numeric list entry '" + item + "'");
        }
    }
    if (out.empty()) {
        throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": '" + key + "' list is empty");
    }
    return out;
}

void Config::check_schema(const std::map<std::string, std::set<std::string>>& allowed) const {
    for (const auto& [section, keys] : sections_) {
        auto sit = allowed.find(section);
        if (sit == allowed.end()) {
            throw ConfigError(origin_ + ": unknown section [" + section + "]");
        }
        for (const auto& [key, entry] : keys) {
            if (!sit->second.count(key)) {
                throw ConfigError(origin_ + ":" + std::to_string(entry.line) + ": unknown key '" +
                                  key + "' in [" + section + "]");
            }
        }
    }
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = Entry{value, 0};
}

std::string Config::content_hash() const {
    std::string normalized;
    for (const auto& [section, keys] : sections_) {
        normalized += "[" + section + "]\n";
        for (const auto& [key, entry] : keys) {
            normalized += key + "=" + entry.value + "\n";
        }
    }
    return hex64(fnv1a64_str(normalized));
}

}  // namespace unlearn
