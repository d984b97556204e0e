#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cffa {

constexpr std::uint32_t kCheckpointVersion = 1;

/// Named-tensor container behind the `CFFA` binary checkpoint format:
/// magic, u32 LE version, u32 LE tensor count, then per tensor
/// name length / name bytes / rank / dims (u32 LE each) / values (f64 LE).
struct NamedTensorFile {
    struct Entry {
        std::string name;
        std::vector<std::size_t> dims;
        std::vector<double> values;
    };
    std::vector<Entry> entries;

    void add(std::string name, std::vector<std::size_t> dims, std::vector<double> values) {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        if (n != values.size())
            throw std::invalid_argument("checkpoint entry " + name + ": dims/value mismatch");
        entries.push_back({std::move(name), std::move(dims), std::move(values)});
    }

    const Entry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    const Entry& get(const std::string& name) const {
        const Entry* e = find(name);
        if (!e) throw std::runtime_error("checkpoint: missing entry " + name);
        return *e;
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}
    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline std::string serialize_checkpoint(const NamedTensorFile& f) {
    std::string out = "CFFA";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(f.entries.size()));
    for (const auto& e : f.entries) {
        detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        detail::put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
        for (auto d : e.dims) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : e.values) detail::put_f64(out, v);
    }
    return out;
}

inline NamedTensorFile deserialize_checkpoint(const std::string& buf) {
    detail::Reader r(buf);
    if (r.bytes(4) != "CFFA") throw std::runtime_error("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    NamedTensorFile f;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensorFile::Entry e;
        e.name = r.bytes(r.u32());
        const std::uint32_t rank = r.u32();
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            e.dims.push_back(r.u32());
            n *= e.dims.back();
        }
        e.values.resize(n);
        for (auto& v : e.values) v = r.f64();
        f.entries.push_back(std::move(e));
    }
    if (r.pos != buf.size()) throw std::runtime_error("checkpoint: trailing bytes");
    return f;
}

inline void save_checkpoint_file(const NamedTensorFile& f, const std::string& path) {
    const std::string bytes = serialize_checkpoint(f);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline NamedTensorFile load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(buf);
}

/// Strings (config snapshots, ids) ride along as one f64 per byte.
inline std::vector<double> bytes_to_doubles(const std::string& s) {
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        out[i] = static_cast<double>(static_cast<unsigned char>(s[i]));
    return out;
}

inline std::string doubles_to_bytes(const std::vector<double>& v) {
    std::string out(v.size(), '\0');
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<char>(static_cast<int>(v[i]));
    return out;
}

/// 64-bit generator state words round-trip through the f64 payload bit-exactly.
inline double u64_to_f64_bits(std::uint64_t v) {
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

inline std::uint64_t f64_bits_to_u64(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    return v;
}

}  // namespace cffa
