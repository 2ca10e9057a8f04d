#include "aegan/nn/checkpoint.hpp"

#include "aegan/error.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace aegan::nn {

namespace {

constexpr char kMagic[8] = {'A', 'E', 'G', 'A', 'N', 'C', 'K', '1'};

std::string key(const std::string& prefix, const std::string& name) { return prefix.empty() ? name : prefix + "/" + name; }

bool same_shape(const Tensor<float>& a, const Tensor<float>& b) { return a.same_shape(b); }

} // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
    nlohmann::json header{{"meta", meta}, {"tensors", nlohmann::json::array()}};
    for (const auto& [name, t] : tensors)
        header["tensors"].push_back(
            {{"name", name}, {"shape", {t.batch(), t.channels(), t.extent().x, t.extent().y, t.extent().z}}});
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!out) throw IoError("short write on checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw CheckpointError(path.string() + " is not a checkpoint");
    if (len > (std::uint64_t(1) << 30)) throw CheckpointError(path.string() + " has an implausible header");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(path.string() + ": bad header: " + e.what());
    }
    Checkpoint ck;
    ck.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
        const auto s = entry.at("shape").get<std::vector<Index>>();
        if (s.size() != 5) throw CheckpointError(path.string() + ": bad tensor shape");
        Tensor<float> t(s[0], s[1], Extent3{s[2], s[3], s[4]});
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!in) throw CheckpointError(path.string() + " is truncated");
        ck.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    return ck;
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
    const auto it = tensors.lower_bound(prefix + "/");
    return it != tensors.end() && it->first.compare(0, prefix.size() + 1, prefix + "/") == 0;
}

void store_state(Checkpoint& ck, const std::string& prefix, StateList<float>& state) {
    for (auto& p : state.params) ck.tensors[key(prefix, p.name)] = p.var.value();
    for (auto& b : state.buffers) ck.tensors[key(prefix, b.name)] = *b.tensor;
}

void restore_state(const Checkpoint& ck, const std::string& prefix, StateList<float>& state) {
    auto lookup = [&](const std::string& name, const Tensor<float>& like) -> const Tensor<float>& {
        const auto it = ck.tensors.find(key(prefix, name));
        if (it == ck.tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + key(prefix, name) + "'");
        if (!same_shape(it->second, like))
            throw CheckpointError("checkpoint tensor '" + key(prefix, name) + "' has a different shape");
        return it->second;
    };
    for (auto& p : state.params) (void)lookup(p.name, p.var.value());
    for (auto& b : state.buffers) (void)lookup(b.name, *b.tensor);
    for (auto& p : state.params) p.var.mutable_value() = lookup(p.name, p.var.value());
    for (auto& b : state.buffers) *b.tensor = lookup(b.name, *b.tensor);
}

} // namespace aegan::nn
