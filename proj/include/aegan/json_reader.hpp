#pragma once

#include "aegan/error.hpp"
#include "aegan/tensor.hpp"

#include <nlohmann/json.hpp>

#include <set>
#include <string>
#include <utility>
#include <vector>

namespace aegan {

/// Fail-closed view over a JSON object. Every key read is recorded and
/// `finish()` rejects the rest; all errors carry the dotted key path.
class JsonReader {
public:
    JsonReader(const nlohmann::json& j, std::string path) : j_(&j), path_(std::move(path)) {
        if (!j.is_object()) throw SchemaError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    const std::string& path() const noexcept { return path_; }
    std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) const { return j_->contains(key); }

    template <typename T>
    T get(const std::string& key) {
        seen_.insert(key);
        if (!j_->contains(key)) throw SchemaError(key_path(key), "missing required key");
        return convert<T>(key);
    }

    template <typename T>
    T get_or(const std::string& key, T fallback) {
        seen_.insert(key);
        if (!j_->contains(key)) return fallback;
        return convert<T>(key);
    }

    JsonReader child(const std::string& key) {
        seen_.insert(key);
        if (!j_->contains(key)) throw SchemaError(key_path(key), "missing required section");
        return JsonReader(j_->at(key), key_path(key));
    }

    /// Elements of an array of objects, each with its own indexed path.
    std::vector<JsonReader> objects(const std::string& key) {
        seen_.insert(key);
        std::vector<JsonReader> out;
        if (!j_->contains(key)) return out;
        const auto& arr = j_->at(key);
        if (!arr.is_array()) throw SchemaError(key_path(key), "expected an array");
        for (std::size_t i = 0; i < arr.size(); ++i)
            out.emplace_back(arr[i], key_path(key) + "[" + std::to_string(i) + "]");
        return out;
    }

    Extent3 extent(const std::string& key) {
        const auto v = get<std::vector<Index>>(key);
        if (v.size() != 3) fail(key, "expected 3 integers");
        return Extent3{v[0], v[1], v[2]};
    }

    void finish() const {
        for (const auto& [k, v] : j_->items())
            if (!seen_.contains(k)) throw SchemaError(key_path(k), "unknown key");
    }

    [[noreturn]] void fail(const std::string& key, const std::string& what) const {
        throw SchemaError(key_path(key), what);
    }

private:
    template <typename T>
    T convert(const std::string& key) const {
        const auto& v = j_->at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw SchemaError(key_path(key), "expected a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw SchemaError(key_path(key), "expected an integer");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw SchemaError(key_path(key), "expected a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw SchemaError(key_path(key), "expected a string");
        }
        try {
            return v.template get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(key_path(key), std::string("wrong type: ") + e.what());
        }
    }

    const nlohmann::json* j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace aegan
