#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace genemoe {

// Binary layout, all integers and floats little-endian:
//   "GMOECKPT" u32 version
//   str config_text
//   u64 n, n x (str name, tensor)
//   u64 n, n x (str name, u64 step, u64 m, m x tensor first, m x tensor second)
//   str rng_state, u64 epoch, str metadata_text
// where str = u64 length + bytes and tensor = u32 rank, rank x u64 extent,
// f64 values.
inline constexpr char checkpoint_magic[8] = {'G', 'M', 'O', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct Checkpoint {
    GeneMoeConfig config;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::vector<std::pair<std::string, AdamState>> optimizers;
    std::string rng_state;
    std::uint64_t epoch = 0;
    KeyValues metadata;

    const Tensor* find(const std::string& name) const
    {
        for (const auto& [n, t] : tensors)
            if (n == name)
                return &t;
        return nullptr;
    }

    const AdamState* optimizer(const std::string& name) const
    {
        for (const auto& [n, s] : optimizers)
            if (n == name)
                return &s;
        return nullptr;
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i)
            bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i)
            bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(const char* p, std::size_t n) { bytes_.append(p, n); }
    void str(const std::string& s)
    {
        u64(s.size());
        bytes_ += s;
    }
    void tensor(const Tensor& t)
    {
        u32(static_cast<std::uint32_t>(t.shape().size()));
        for (std::size_t e : t.shape())
            u64(e);
        for (double v : t.values())
            f64(v);
    }
    const std::string& bytes() const noexcept { return bytes_; }

private:
    std::string bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

    std::uint64_t uint(int width)
    {
        need(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        pos_ += static_cast<std::size_t>(width);
        return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
    std::uint64_t u64() { return uint(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string raw(std::size_t n)
    {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str() { return raw(count(1)); }
    Tensor tensor()
    {
        const std::uint32_t rank = u32();
        if (rank < 1 || rank > 2)
            throw CheckpointFormatError("checkpoint tensor has unsupported rank " + std::to_string(rank));
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& e : shape) {
            e = static_cast<std::size_t>(u64());
            if (e == 0)
                throw CheckpointFormatError("checkpoint tensor has a zero extent");
            n *= e;
        }
        if (n > remaining() / 8)
            throw CheckpointTruncatedError("checkpoint ends inside a tensor");
        std::vector<double> values(n);
        for (auto& v : values)
            v = f64();
        return Tensor(std::move(shape), std::move(values));
    }
    /// Element count that must fit in the remaining bytes.
    std::size_t count(std::size_t min_bytes_each)
    {
        const std::uint64_t n = u64();
        if (n > remaining() / min_bytes_each)
            throw CheckpointTruncatedError("checkpoint ends before " + std::to_string(n) + " announced entries");
        return static_cast<std::size_t>(n);
    }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const
    {
        if (remaining() < n)
            throw CheckpointTruncatedError("checkpoint is truncated");
    }

    std::string bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c)
{
    detail::ByteWriter w;
    w.raw(checkpoint_magic, sizeof checkpoint_magic);
    w.u32(checkpoint_version);
    w.str(kv::to_text(c.config.to_key_values()));
    w.u64(c.tensors.size());
    for (const auto& [name, t] : c.tensors) {
        w.str(name);
        w.tensor(t);
    }
    w.u64(c.optimizers.size());
    for (const auto& [name, s] : c.optimizers) {
        w.str(name);
        w.u64(s.step);
        w.u64(s.first_moment.size());
        for (const auto& t : s.first_moment)
            w.tensor(t);
        for (const auto& t : s.second_moment)
            w.tensor(t);
    }
    w.str(c.rng_state);
    w.u64(c.epoch);
    w.str(kv::to_text(c.metadata));
    return w.bytes();
}

inline Checkpoint deserialize_checkpoint(std::string bytes)
{
    detail::ByteReader r(std::move(bytes));
    if (r.remaining() < sizeof checkpoint_magic + 4)
        throw CheckpointTruncatedError("checkpoint is shorter than its header");
    if (r.raw(sizeof checkpoint_magic) != std::string(checkpoint_magic, sizeof checkpoint_magic))
        throw CheckpointFormatError("not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != checkpoint_version)
        throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                    std::to_string(checkpoint_version) + ")");
    Checkpoint c;
    try {
        c.config.apply(kv::from_text(r.str()));
    } catch (const ConfigError& e) {
        throw CheckpointFormatError(std::string("checkpoint config: ") + e.what());
    } catch (const ParseError& e) {
        throw CheckpointFormatError(std::string("checkpoint config: ") + e.what());
    }
    const std::size_t n_tensors = r.count(12);
    for (std::size_t i = 0; i < n_tensors; ++i) {
        std::string name = r.str();
        c.tensors.emplace_back(std::move(name), r.tensor());
    }
    const std::size_t n_opt = r.count(24);
    for (std::size_t i = 0; i < n_opt; ++i) {
        std::string name = r.str();
        AdamState s;
        s.step = r.u64();
        const std::size_t m = r.count(24);
        for (std::size_t k = 0; k < m; ++k)
            s.first_moment.push_back(r.tensor());
        for (std::size_t k = 0; k < m; ++k)
            s.second_moment.push_back(r.tensor());
        c.optimizers.emplace_back(std::move(name), std::move(s));
    }
    c.rng_state = r.str();
    c.epoch = r.u64();
    try {
        c.metadata = kv::from_text(r.str());
    } catch (const ParseError& e) {
        throw CheckpointFormatError(std::string("checkpoint metadata: ") + e.what());
    }
    if (r.remaining() != 0)
        throw CheckpointFormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
    return c;
}

/// Writes atomically through a sibling temporary file.
inline void save_checkpoint(const std::string& path, const Checkpoint& c)
{
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot write checkpoint " + path);
        const std::string bytes = serialize_checkpoint(c);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw IoError("write failed for checkpoint " + path);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

/// Snapshot of every model parameter under its own name.
inline Checkpoint checkpoint_of(GeneMoeModel& model)
{
    Checkpoint c;
    c.config = model.config();
    for (Parameter* p : model.all_parameters())
        c.tensors.emplace_back(p->name, p->value);
    return c;
}

/// Copies named tensors into the parameters; every parameter must be present
/// with its exact shape.
inline void load_parameters(std::span<Parameter* const> params, const Checkpoint& c)
{
    for (Parameter* p : params) {
        const Tensor* t = c.find(p->name);
        if (!t)
            throw CheckpointShapeError("checkpoint has no tensor '" + p->name + "'");
        if (t->shape() != p->value.shape())
            throw CheckpointShapeError("tensor '" + p->name + "' has shape " + shape_string(t->shape()) +
                                       " in the checkpoint but " + shape_string(p->value.shape()) + " in the model");
        p->value = *t;
    }
}

inline void load_into(GeneMoeModel& model, const Checkpoint& c) { load_parameters(model.all_parameters(), c); }

/// Model rebuilt from the checkpoint's own config.
inline GeneMoeModel model_from_checkpoint(const Checkpoint& c)
{
    GeneMoeModel m(c.config);
    load_into(m, c);
    return m;
}

} // namespace genemoe
