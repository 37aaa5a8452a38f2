#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ebwm/tape.hpp"
#include "ebwm/tensor.hpp"

namespace ebwm {

struct ParamFlags {
    bool no_decay = false;
    bool alpha_group = false;  // trained with lr * alpha_lr_multiplier, no decay
};

template <class S>
struct Param {
    std::string name;
    Tensor<S> value;
    ParamFlags flags;
};

// Owns the canonical tensor handles for a model's parameters. Forward code
// reads parameters through the store so that watch_all() binds the same
// handles the graph later differentiates.
template <class S>
class ParamStore {
public:
    int64_t add(const std::string& name, Tensor<S> init, ParamFlags flags = {}) {
        if (index_.count(name)) {
            throw ConfigError("duplicate parameter '" + name + "'");
        }
        index_[name] = static_cast<int64_t>(items_.size());
        items_.push_back(Param<S>{name, std::move(init), flags});
        return static_cast<int64_t>(items_.size()) - 1;
    }

    Tensor<S>& operator[](int64_t idx) { return items_[static_cast<size_t>(idx)].value; }
    const Tensor<S>& operator[](int64_t idx) const {
        return items_[static_cast<size_t>(idx)].value;
    }

    Param<S>& param(size_t i) { return items_[i]; }
    const Param<S>& param(size_t i) const { return items_[i]; }
    size_t size() const { return items_.size(); }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Tensor<S>& by_name(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("no parameter '" + name + "'");
        return items_[static_cast<size_t>(it->second)].value;
    }

    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& p : items_) n += p.value.numel();
        return n;
    }

    void watch_all(Tape<S>& tape) {
        for (auto& p : items_) tape.watch(p.value);
    }

    std::vector<Tensor<S>> all_values() const {
        std::vector<Tensor<S>> vs;
        vs.reserve(items_.size());
        for (const auto& p : items_) vs.push_back(p.value);
        return vs;
    }

private:
    std::vector<Param<S>> items_;
    std::map<std::string, int64_t> index_;
};

// ---------------------------------------------------------------------------
// checkpoint format: version byte, then a manifest of (name, dtype, shape)
// per parameter, then the raw little-endian buffers in manifest order.
// ---------------------------------------------------------------------------

namespace detail {

constexpr uint8_t kCheckpointVersion = 1;

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

template <class S>
void write_buffer(std::ostream& os, const Tensor<S>& t) {
    // serialize each scalar as its little-endian byte pattern
    for (int64_t i = 0; i < t.numel(); ++i) {
        S v = t.data()[i];
        unsigned char bytes[sizeof(S)];
        std::memcpy(bytes, &v, sizeof(S));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
        std::reverse(bytes, bytes + sizeof(S));
#endif
        os.write(reinterpret_cast<const char*>(bytes), sizeof(S));
    }
}

template <class S>
void read_buffer(std::istream& is, Tensor<S>& t) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        unsigned char bytes[sizeof(S)];
        is.read(reinterpret_cast<char*>(bytes), sizeof(S));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
        std::reverse(bytes, bytes + sizeof(S));
#endif
        std::memcpy(&t.data()[i], bytes, sizeof(S));
    }
}

}  // namespace detail

template <class S>
void checkpoint_save(const std::string& path, const ParamStore<S>& store) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("checkpoint: cannot open '" + path + "' for writing");
    os.put(static_cast<char>(detail::kCheckpointVersion));
    detail::write_u32(os, static_cast<uint32_t>(store.size()));
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& p = store.param(i);
        detail::write_u32(os, static_cast<uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        os.put(static_cast<char>(dtype_of<S>()));
        os.put(static_cast<char>(p.value.ndim()));
        for (int64_t d : p.value.shape()) {
            detail::write_u32(os, static_cast<uint32_t>(d));
        }
    }
    for (size_t i = 0; i < store.size(); ++i) {
        detail::write_buffer(os, store.param(i).value);
    }
    if (!os) throw Error("checkpoint: write failed for '" + path + "'");
}

// Loads into an existing store; names, shapes and dtype must match the
// manifest exactly.
template <class S>
void checkpoint_load(const std::string& path, ParamStore<S>& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("checkpoint: cannot open '" + path + "'");
    const int version = is.get();
    if (version != detail::kCheckpointVersion) {
        throw Error(strf("checkpoint: unsupported version %d", version));
    }
    const uint32_t count = detail::read_u32(is);
    if (count != store.size()) {
        throw Error(strf("checkpoint: has %u parameters, model has %zu", count,
                         store.size()));
    }
    struct Entry {
        std::string name;
        Shape shape;
    };
    std::vector<Entry> manifest;
    for (uint32_t i = 0; i < count; ++i) {
        Entry e;
        const uint32_t name_len = detail::read_u32(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        const int dtype = is.get();
        if (dtype != static_cast<int>(dtype_of<S>())) {
            throw Error("checkpoint: dtype mismatch for '" + e.name + "'");
        }
        const int ndim = is.get();
        for (int d = 0; d < ndim; ++d) {
            e.shape.push_back(detail::read_u32(is));
        }
        manifest.push_back(std::move(e));
    }
    for (uint32_t i = 0; i < count; ++i) {
        auto& p = store.param(i);
        if (p.name != manifest[i].name) {
            throw Error("checkpoint: parameter order mismatch at '" + manifest[i].name + "'");
        }
        if (p.value.shape() != manifest[i].shape) {
            throw Error("checkpoint: shape mismatch for '" + p.name + "'");
        }
        detail::read_buffer(is, p.value);
    }
    if (!is) throw Error("checkpoint: truncated file '" + path + "'");
}

}  // namespace ebwm
