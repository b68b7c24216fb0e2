#include "unlearn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "unlearn/errors.hpp"

namespace unlearn {

using nlohmann::json;

Tensor& ParameterSet::at(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw ConfigError("no parameter entry named '" + path + "'");
    return it->second;
}

const Tensor& ParameterSet::at(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw ConfigError("no parameter entry named '" + path + "'");
    return it->second;
}

void ParameterSet::put(const std::string& path, Tensor t) {
    if (entries_.count(path)) throw ConfigError("duplicate parameter entry '" + path + "'");
    entries_.emplace(path, std::move(t));
}

bool ParameterSet::merge_compatible(const ParameterSet& o) const {
    if (meta_.fingerprint != o.meta_.fingerprint) return false;
    if (entries_.size() != o.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = o.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
        if (a->first != b->first || !a->second.same_shape(b->second)) return false;
    }
    return true;
}

size_t ParameterSet::total_parameters() const {
    size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
}

// ------------------------------ serialization -------------------------------

namespace {

constexpr char kMagic[8] = {'U', 'N', 'L', 'C', 'K', 'P', 'T', '1'};
constexpr unsigned char kDtypeF64 = 1;

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<unsigned char>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<unsigned char>& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(out, bits);
}

struct Reader {
    const std::vector<unsigned char>& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw IncompatibleError("truncated checkpoint");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }
    unsigned char byte() {
        need(1);
        return buf[pos++];
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const ParameterSet& ps) {
    json header;
    header["fingerprint"] = ps.meta().fingerprint;
    header["vocab"] = ps.meta().vocab;
    header["seed"] = ps.meta().seed;
    header["provenance"] = ps.meta().provenance;
    header["bn_layers"] = ps.meta().bn_layers;
    header["spec"] = ps.meta().spec_json;
    const std::string hs = header.dump();

    std::vector<unsigned char> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u64(out, hs.size());
    out.insert(out.end(), hs.begin(), hs.end());
    put_u32(out, static_cast<uint32_t>(ps.entries().size()));
    for (const auto& [name, t] : ps.entries()) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(kDtypeF64);
        out.push_back(static_cast<unsigned char>(t.rank()));
        for (int d : t.shape()) put_u32(out, static_cast<uint32_t>(d));
        for (size_t i = 0; i < t.size(); ++i) put_f64(out, t[i]);
    }
    return out;
}

ParameterSet deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
    Reader r{bytes};
    const std::string magic = r.str(8);
    if (std::memcmp(magic.data(), kMagic, 8) != 0) {
        throw IncompatibleError("not a checkpoint file (bad magic)");
    }
    const uint64_t hlen = r.u64();
    json header = json::parse(r.str(hlen));

    ParameterSet ps;
    ps.meta().fingerprint = header.at("fingerprint").get<std::string>();
    ps.meta().vocab = header.at("vocab").get<std::vector<std::string>>();
    ps.meta().seed = header.at("seed").get<uint64_t>();
    ps.meta().provenance = header.at("provenance").get<std::string>();
    ps.meta().bn_layers = header.at("bn_layers").get<std::vector<std::string>>();
    ps.meta().spec_json = header.at("spec").get<std::string>();

    const uint32_t n_records = r.u32();
    for (uint32_t i = 0; i < n_records; ++i) {
        const uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        const unsigned char dtype = r.byte();
        if (dtype != kDtypeF64) throw IncompatibleError("unsupported dtype code in checkpoint");
        const int rank = static_cast<int>(r.byte());
        std::vector<int> shape(static_cast<size_t>(rank));
        for (int d = 0; d < rank; ++d) shape[static_cast<size_t>(d)] = static_cast<int>(r.u32());
        Tensor t(shape);
        for (size_t j = 0; j < t.size(); ++j) t[j] = r.f64();
        ps.put(name, std::move(t));
    }
    return ps;
}

void save_checkpoint(const ParameterSet& ps, const std::string& path) {
    const auto bytes = serialize_checkpoint(ps);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw ConfigError("cannot open '" + tmp + "' for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
        if (!f) throw ConfigError("short write to '" + tmp + "'");
    }
    std::remove(path.c_str());
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw ConfigError("cannot rename '" + tmp + "' to '" + path + "'");
    }
}

ParameterSet load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open checkpoint '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

std::string checkpoint_hash(const ParameterSet& ps) {
    const auto bytes = serialize_checkpoint(ps);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace unlearn
