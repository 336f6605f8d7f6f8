#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace genemoe {

/// Seeded random stream. The full engine state round-trips through
/// state()/restore(), so a resumed run continues the exact same sequence.
class Rng {
public:
    static constexpr const char* algorithm = "mt19937_64";

    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    double normal(double mean = 0.0, double stddev = 1.0)
    {
        ++counter_;
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    /// Uniform on [0, 1).
    double uniform()
    {
        ++counter_;
        return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
    }

    /// Uniform on {0, ..., n - 1}.
    std::size_t uniform_index(std::size_t n)
    {
        ++counter_;
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    double exponential(double rate)
    {
        ++counter_;
        return std::exponential_distribution<double>(rate)(engine_);
    }

    template <typename T>
    void shuffle(std::vector<T>& v)
    {
        ++counter_;
        std::shuffle(v.begin(), v.end(), engine_);
    }

    /// Independent child stream; advances this stream by one draw.
    Rng fork()
    {
        ++counter_;
        return Rng(engine_());
    }

    std::string state() const
    {
        std::ostringstream os;
        os << algorithm << ' ' << seed_ << ' ' << counter_ << ' ' << engine_;
        return os.str();
    }

    void restore(const std::string& state)
    {
        std::istringstream is(state);
        std::string algo;
        is >> algo >> seed_ >> counter_ >> engine_;
        if (!is || algo != algorithm)
            throw ParseError("malformed rng state");
    }

    friend bool operator==(const Rng& a, const Rng& b)
    {
        return a.seed_ == b.seed_ && a.counter_ == b.counter_ && a.engine_ == b.engine_;
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    std::mt19937_64 engine_;
};

/// I.i.d. normal samples. stddev == 0 yields the constant mean without
/// consuming any draws.
inline Tensor sample_gaussian(Rng& rng, const Shape& shape, double mean, double stddev)
{
    if (!(stddev >= 0.0))
        throw DomainError("sample_gaussian: negative stddev " + std::to_string(stddev));
    Tensor out(shape, mean);
    if (stddev == 0.0)
        return out;
    for (auto& v : out.values())
        v = rng.normal(mean, stddev);
    return out;
}

} // namespace genemoe
