#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace flare {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("ShapeError: " + msg) {}
};
struct NumericalBreakdown : std::runtime_error {
    explicit NumericalBreakdown(const std::string& msg) : std::runtime_error("NumericalBreakdown: " + msg) {}
};
struct NotPositiveDefinite : std::runtime_error {
    explicit NotPositiveDefinite(const std::string& msg) : std::runtime_error("NotPositiveDefinite: " + msg) {}
};
struct RankDeficient : std::runtime_error {
    explicit RankDeficient(const std::string& msg) : std::runtime_error("RankDeficient: " + msg) {}
};
struct InvalidArgument : std::runtime_error {
    explicit InvalidArgument(const std::string& msg) : std::runtime_error("InvalidArgument: " + msg) {}
};
struct ResourceLimit : std::runtime_error {
    explicit ResourceLimit(const std::string& msg) : std::runtime_error("ResourceLimit: " + msg) {}
};
struct SchemaError : std::runtime_error {
    explicit SchemaError(const std::string& msg) : std::runtime_error("SchemaError: " + msg) {}
};
struct UndefinedBaseline : std::runtime_error {
    explicit UndefinedBaseline(const std::string& msg) : std::runtime_error("UndefinedBaseline: " + msg) {}
};

using Rng = std::mt19937_64;

// Derive an independent stream from a base seed, e.g. one per sample/trial.
// splitmix64 finalizer over seed and index.
inline Rng derived_rng(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= z >> 31;
    return Rng(z);
}

}  // namespace flare
