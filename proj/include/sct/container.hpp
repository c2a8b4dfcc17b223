#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sct/errors.hpp"
#include "sct/tensor.hpp"

namespace sct {

// Binary named-tensor container, little-endian throughout:
//   magic "SCTW" | u32 version=1 | u32 tensor count
//   per tensor: u16 name length | name bytes | u8 rank | u64 extents...
//               | u8 dtype (0=float32, 1=uint32) | raw row-major payload
// No padding, no alignment. Carries checkpoints, datasets and trained
// artifacts alike.

enum class Dtype : std::uint8_t { F32 = 0, U32 = 1 };

struct NamedTensor {
    Dtype dtype = Dtype::F32;
    Shape shape;
    Tensor f32;                     // valid when dtype == F32
    std::vector<std::uint32_t> u32; // valid when dtype == U32
};

class Container {
  public:
    static constexpr char kMagic[4] = {'S', 'C', 'T', 'W'};
    static constexpr std::uint32_t kVersion = 1;

    void put(const std::string& name, Tensor t) {
        check_new(name);
        NamedTensor nt;
        nt.dtype = Dtype::F32;
        nt.shape = t.shape;
        nt.f32 = std::move(t);
        order_.push_back(name);
        entries_.emplace(name, std::move(nt));
    }

    void put_u32(const std::string& name, Shape shape, std::vector<std::uint32_t> v) {
        if (numel(shape) != v.size()) throw ShapeError("container: shape/data mismatch for " + name);
        check_new(name);
        NamedTensor nt;
        nt.dtype = Dtype::U32;
        nt.shape = std::move(shape);
        nt.u32 = std::move(v);
        order_.push_back(name);
        entries_.emplace(name, std::move(nt));
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        const NamedTensor& nt = find(name);
        if (nt.dtype != Dtype::F32)
            throw FormatError("container: tensor '" + name + "' is not float32");
        return nt.f32;
    }

    Tensor& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw FormatError("container: missing tensor '" + name + "'");
        if (it->second.dtype != Dtype::F32)
            throw FormatError("container: tensor '" + name + "' is not float32");
        return it->second.f32;
    }

    const std::vector<std::uint32_t>& get_u32(const std::string& name) const {
        const NamedTensor& nt = find(name);
        if (nt.dtype != Dtype::U32)
            throw FormatError("container: tensor '" + name + "' is not uint32");
        return nt.u32;
    }

    const Shape& shape_of(const std::string& name) const { return find(name).shape; }
    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open for writing: " + path);
        os.write(kMagic, 4);
        write_u32(os, kVersion);
        write_u32(os, static_cast<std::uint32_t>(order_.size()));
        for (const std::string& name : order_) {
            const NamedTensor& nt = entries_.at(name);
            if (name.size() > 0xffff) throw FormatError("tensor name too long: " + name);
            write_u16(os, static_cast<std::uint16_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            const std::uint8_t rank = static_cast<std::uint8_t>(nt.shape.size());
            os.write(reinterpret_cast<const char*>(&rank), 1);
            for (std::size_t e : nt.shape) write_u64(os, static_cast<std::uint64_t>(e));
            const std::uint8_t dt = static_cast<std::uint8_t>(nt.dtype);
            os.write(reinterpret_cast<const char*>(&dt), 1);
            if (nt.dtype == Dtype::F32)
                os.write(reinterpret_cast<const char*>(nt.f32.data.data()),
                         static_cast<std::streamsize>(nt.f32.data.size() * 4));
            else
                os.write(reinterpret_cast<const char*>(nt.u32.data()),
                         static_cast<std::streamsize>(nt.u32.size() * 4));
        }
        if (!os) throw IoError("write failed: " + path);
    }

    static Container load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open: " + path);
        char magic[4];
        if (!is.read(magic, 4)) throw FormatError(path + ": truncated header");
        if (std::memcmp(magic, kMagic, 4) != 0)
            throw FormatError(path + ": bad magic, not an SCTW container");
        const std::uint32_t version = read_u32(is, path);
        if (version != kVersion)
            throw FormatError(path + ": unsupported format version " + std::to_string(version));
        const std::uint32_t count = read_u32(is, path);
        Container c;
        for (std::uint32_t t = 0; t < count; ++t) {
            const std::uint16_t nlen = read_u16(is, path);
            std::string name(nlen, '\0');
            if (!is.read(name.data(), nlen)) throw FormatError(path + ": truncated tensor name");
            if (c.has(name)) throw FormatError(path + ": duplicate tensor name '" + name + "'");
            std::uint8_t rank = 0;
            if (!is.read(reinterpret_cast<char*>(&rank), 1))
                throw FormatError(path + ": truncated tensor record");
            Shape shape(rank);
            for (std::uint8_t i = 0; i < rank; ++i)
                shape[i] = static_cast<std::size_t>(read_u64(is, path));
            std::uint8_t dt = 0;
            if (!is.read(reinterpret_cast<char*>(&dt), 1))
                throw FormatError(path + ": truncated tensor record");
            const std::size_t n = numel(shape);
            if (dt == 0) {
                Tensor tv(shape);
                if (!is.read(reinterpret_cast<char*>(tv.data.data()),
                             static_cast<std::streamsize>(n * 4)))
                    throw FormatError(path + ": truncated payload for '" + name + "'");
                c.put(name, std::move(tv));
            } else if (dt == 1) {
                std::vector<std::uint32_t> v(n);
                if (!is.read(reinterpret_cast<char*>(v.data()),
                             static_cast<std::streamsize>(n * 4)))
                    throw FormatError(path + ": truncated payload for '" + name + "'");
                c.put_u32(name, shape, std::move(v));
            } else {
                throw FormatError(path + ": unknown dtype tag " + std::to_string(dt));
            }
        }
        return c;
    }

  private:
    void check_new(const std::string& name) {
        if (entries_.count(name)) throw FormatError("container: duplicate tensor name '" + name + "'");
    }

    const NamedTensor& find(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw FormatError("container: missing tensor '" + name + "'");
        return it->second;
    }

    static void write_u16(std::ostream& os, std::uint16_t v) {
        char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
        os.write(b, 2);
    }
    static void write_u32(std::ostream& os, std::uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        os.write(b, 4);
    }
    static void write_u64(std::ostream& os, std::uint64_t v) {
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        os.write(b, 8);
    }
    static std::uint16_t read_u16(std::istream& is, const std::string& path) {
        unsigned char b[2];
        if (!is.read(reinterpret_cast<char*>(b), 2)) throw FormatError(path + ": truncated file");
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    static std::uint32_t read_u32(std::istream& is, const std::string& path) {
        unsigned char b[4];
        if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path + ": truncated file");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    static std::uint64_t read_u64(std::istream& is, const std::string& path) {
        unsigned char b[8];
        if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError(path + ": truncated file");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }

    std::vector<std::string> order_;
    std::map<std::string, NamedTensor> entries_;
};

// 64-bit FNV-1a; used for manifest fingerprints of input files.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for fingerprint: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (is.eof()) break;
    }
    return h;
}

} // namespace sct
