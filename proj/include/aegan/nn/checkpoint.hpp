#pragma once

#include "aegan/nn/layers.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace aegan::nn {

/// Single-file blob: "AEGANCK1", u64 header length, JSON header, then the
/// float32 payloads in header order.
struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor<float>> tensors;

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

    bool has_prefix(const std::string& prefix) const;
};

/// Copies every parameter and buffer of `state` into `ck` under `prefix`.
void store_state(Checkpoint& ck, const std::string& prefix, StateList<float>& state);
/// Inverse of store_state. Missing names or shape mismatches raise
/// CheckpointError; nothing is written unless every entry matches.
void restore_state(const Checkpoint& ck, const std::string& prefix, StateList<float>& state);

} // namespace aegan::nn
