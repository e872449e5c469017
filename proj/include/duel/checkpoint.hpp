#pragma once

// Single-file model archive: magic, version, JSON header, then little-endian
// float32 blobs in header order. Writes go to a temp file renamed into place.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "duel/denoiser.hpp"
#include "duel/diffusion.hpp"
#include "duel/nn.hpp"

namespace duel {

inline constexpr char kCheckpointMagic[8] = {'D', 'U', 'E', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Progress of a training run, enough to resume it exactly.
struct TrainState {
    int stage = 0;        // 0: untrained
    std::int64_t step = 0;  // completed steps of the current stage
    double initial_loss = 0;  // mean of the first window of losses, 0 until known
    std::int64_t above_guard = 0;
    std::vector<double> first_losses;

    friend bool operator==(const TrainState&, const TrainState&) = default;
};

inline nlohmann::json to_json(const TrainState& s) {
    return {{"stage", s.stage}, {"step", s.step}, {"initial_loss", s.initial_loss},
            {"above_guard", s.above_guard}, {"first_losses", s.first_losses}};
}

inline TrainState train_state_from_json(const nlohmann::json& j) {
    TrainState s;
    s.stage = j.at("stage").get<int>();
    s.step = j.at("step").get<std::int64_t>();
    s.initial_loss = j.at("initial_loss").get<double>();
    s.above_guard = j.at("above_guard").get<std::int64_t>();
    s.first_losses = j.at("first_losses").get<std::vector<double>>();
    return s;
}

struct Checkpoint {
    NetConfig net;
    std::string topology = "body18";
    NoiseSchedule schedule = make_schedule();
    OptimizerConfig optimizer;
    std::int64_t optimizer_steps = 0;
    TrainState train;
    nlohmann::json extra = nlohmann::json::object();  // free-form run metadata
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(std::uint8_t(in[at + i])) << (8 * i);
    return v;
}

inline void put_floats(std::string& out, const Tensor<float>& t) {
    for (float f : t.vec()) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

}  // namespace detail

inline nlohmann::json optimizer_json(const OptimizerConfig& o) {
    return {{"learning_rate", o.learning_rate}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}};
}

inline OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
    OptimizerConfig o;
    o.learning_rate = j.value("learning_rate", o.learning_rate);
    o.beta1 = j.value("beta1", o.beta1);
    o.beta2 = j.value("beta2", o.beta2);
    o.eps = j.value("eps", o.eps);
    return o;
}

/// Serializes parameters and, if given, optimizer moments.
inline std::string checkpoint_bytes(const Checkpoint& meta, const Denoiser<float>& net,
                                    const AdaptiveOptimizer<float>* opt) {
    std::vector<std::pair<std::string, const Tensor<float>*>> blobs;
    net.params().for_each([&](const std::string& name, const ag::Var<float>& p) { blobs.emplace_back(name, &p->value); });
    if (opt)
        for (const auto& [name, mom] : opt->state()) {
            if (!mom.m.empty()) blobs.emplace_back("opt.m." + name, &mom.m);
            if (!mom.v.empty()) blobs.emplace_back("opt.v." + name, &mom.v);
        }
    nlohmann::json tensors = nlohmann::json::array();
    std::int64_t offset = 0;
    for (const auto& [name, t] : blobs) {
        tensors.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
        offset += t->numel();
    }
    nlohmann::json net_json = meta.net;
    nlohmann::json header = {{"format_version", kCheckpointVersion},
                             {"net", net_json},
                             {"topology", meta.topology},
                             {"schedule", schedule_json(meta.schedule)},
                             {"optimizer", optimizer_json(opt ? opt->config() : meta.optimizer)},
                             {"optimizer_steps", opt ? opt->step_count() : meta.optimizer_steps},
                             {"has_optimizer_state", opt != nullptr},
                             {"train", to_json(meta.train)},
                             {"extra", meta.extra},
                             {"tensors", tensors}};
    const std::string head = header.dump();
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, head.size());
    out += head;
    out.reserve(out.size() + std::size_t(offset) * 4);
    for (const auto& [name, t] : blobs) detail::put_floats(out, *t);
    return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& meta, const Denoiser<float>& net,
                            const AdaptiveOptimizer<float>* opt = nullptr) {
    const std::string bytes = checkpoint_bytes(meta, net, opt);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(bool(out), ErrorKind::io, "cannot write checkpoint " + path.string());
        out.write(bytes.data(), std::streamsize(bytes.size()));
        require(bool(out), ErrorKind::io, "failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
    Checkpoint meta;
    Denoiser<float> net;
    std::optional<AdaptiveOptimizer<float>> optimizer;  // present when moments were saved
};

namespace detail {

inline LoadedCheckpoint parse_checkpoint(const std::string& bytes, const std::string& what) {
    auto bad = [&](bool ok, const std::string& msg) { require(ok, ErrorKind::parse, what + ": " + msg); };
    bad(bytes.size() >= 20 && std::memcmp(bytes.data(), kCheckpointMagic, 8) == 0, "not a checkpoint file");
    const auto version = std::uint32_t(detail::get_le(bytes, 8, 4));
    bad(version == kCheckpointVersion, "unsupported format version " + std::to_string(version));
    const auto head_len = detail::get_le(bytes, 12, 8);
    bad(20 + head_len <= bytes.size(), "truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(20, head_len));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::parse, what + ": header: " + e.what());
    }
    Checkpoint meta;
    meta.net = header.at("net").get<NetConfig>();
    meta.topology = header.at("topology").get<std::string>();
    meta.schedule = schedule_from_json(header.at("schedule"));
    meta.optimizer = optimizer_from_json(header.at("optimizer"));
    meta.optimizer_steps = header.at("optimizer_steps").get<std::int64_t>();
    meta.train = train_state_from_json(header.at("train"));
    meta.extra = header.at("extra");
    LoadedCheckpoint out{meta, Denoiser<float>(meta.net), std::nullopt};
    if (header.at("has_optimizer_state").get<bool>()) {
        out.optimizer.emplace(meta.optimizer);
        out.optimizer->set_step_count(meta.optimizer_steps);
    }
    const std::size_t base = 20 + head_len;
    std::size_t seen = 0;
    for (const auto& tj : header.at("tensors")) {
        const auto name = tj.at("name").get<std::string>();
        const auto shape = tj.at("shape").get<Shape>();
        const auto offset = tj.at("offset").get<std::int64_t>();
        Tensor<float> t(shape);
        bad(base + std::size_t(offset + t.numel()) * 4 <= bytes.size(), "truncated blob " + name);
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t[i] = std::bit_cast<float>(std::uint32_t(detail::get_le(bytes, base + std::size_t(offset + i) * 4, 4)));
        if (name.rfind("opt.", 0) == 0) {
            bad(out.optimizer.has_value(), "moment blob without optimizer state");
            const std::string pname = name.substr(6);
            bad(out.net.params().contains(pname), "moment for unknown parameter " + pname);
            auto& mom = out.optimizer->state()[pname];
            (name[4] == 'm' ? mom.m : mom.v) = std::move(t);
        } else {
            bad(out.net.params().contains(name), "unknown parameter " + name);
            auto& p = out.net.params().at(name)->value;
            bad(p.shape() == shape, "shape of " + name + " is " + shape_str(shape) + ", net expects " +
                                        shape_str(p.shape()));
            p = std::move(t);
            ++seen;
        }
    }
    bad(seen == out.net.params().names().size(), "checkpoint is missing parameters");
    return out;
}

}  // namespace detail

inline LoadedCheckpoint parse_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
    try {
        return detail::parse_checkpoint(bytes, what);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, what + ": header: " + e.what());
    }
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(bool(in), ErrorKind::io, "cannot read checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes, path.string());
}

}  // namespace duel
