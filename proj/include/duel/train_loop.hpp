#pragma once

// Two-stage training: freeze policies, mixture batches, the optimisation loop
// with a divergence guard, loss traces and resumable checkpoints.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "duel/checkpoint.hpp"
#include "duel/data_forge.hpp"
#include "duel/denoiser.hpp"
#include "duel/diffusion.hpp"
#include "duel/nn.hpp"

namespace duel {

inline const std::vector<std::string>& parameter_groups() {
    static const std::vector<std::string> g = {"time", "prompt", "reference", "pose_guider",
                                               "unet", "id_attn", "temporal"};
    return g;
}

struct StagePolicy {
    int stage = 1;
    std::vector<std::string> trainable;
    std::vector<std::string> frozen;
};

/// Stage 1 trains everything but the temporal layers; stage 2 trains only them.
inline StagePolicy apply_freeze_policy(ParamStore<float>& params, int stage) {
    require(stage == 1 || stage == 2, ErrorKind::parameter, "stage must be 1 or 2, got " + std::to_string(stage));
    StagePolicy policy{stage, {}, {}};
    const auto& groups = parameter_groups();
    for (const auto& name : params.names()) {
        const std::string group = Denoiser<float>::group_of(name);
        require(std::find(groups.begin(), groups.end(), group) != groups.end(), ErrorKind::policy,
                "parameter '" + name + "' belongs to no known group");
        const bool temporal = group == "temporal";
        const bool train = stage == 1 ? !temporal : temporal;
        params.set_trainable(name, train);
        (train ? policy.trainable : policy.frozen).push_back(name);
    }
    return policy;
}

struct TrainConfig {
    int stage = 1;
    std::int64_t steps = 5000;
    int batch_size = 1;
    double mixture_ratio = 0.5;  // fraction of batches from the fashion source
    int frame_interval = 2;
    int clip_len = 20;
    std::uint64_t seed = 0;
    OptimizerConfig optimizer{};
    std::string preset = "full";  // full | incremental
    std::int64_t incremental_after = 0;  // step at which the incremental manifest joins
    double divergence_factor = 10.0;
    std::int64_t divergence_patience = 100;
    int initial_window = 20;
    std::int64_t checkpoint_every = 0;  // 0: only at the end
    std::string loss_weighting = "x0";  // eps | v | x0

    void validate() const {
        auto bad = [](bool ok, const std::string& m) { require(ok, ErrorKind::parameter, "train config: " + m); };
        bad(stage == 1 || stage == 2, "stage must be 1 or 2");
        bad(steps >= 0 && batch_size > 0, "steps >= 0 and batch_size > 0");
        bad(mixture_ratio >= 0 && mixture_ratio <= 1, "mixture_ratio must be in [0,1]");
        bad(frame_interval > 0 && clip_len > 0, "frame_interval and clip_len must be positive");
        bad(optimizer.learning_rate > 0 && optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 > 0 &&
                optimizer.beta2 < 1 && optimizer.eps > 0,
            "optimizer settings out of range");
        bad(preset == "full" || preset == "incremental", "preset must be full or incremental");
        bad(incremental_after >= 0, "incremental_after must be non-negative");
        bad(divergence_factor > 1 && divergence_patience > 0 && initial_window > 0, "divergence guard settings");
        bad(checkpoint_every >= 0, "checkpoint_every must be non-negative");
        bad(loss_weighting == "eps" || loss_weighting == "v" || loss_weighting == "x0",
            "loss_weighting must be eps, v or x0");
    }
};

/// Constants for finetuning large pretrained weights: tiny learning rate,
/// interval 6, 20000 stage-1 / 10000 stage-2 steps, batch 2.
inline TrainConfig finetune_preset(int stage) {
    TrainConfig c;
    c.stage = stage;
    c.steps = stage == 1 ? 20000 : 10000;
    c.batch_size = 2;
    c.frame_interval = 6;
    c.optimizer.learning_rate = 2e-6;
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"stage", c.stage},
            {"steps", c.steps},
            {"batch_size", c.batch_size},
            {"mixture_ratio", c.mixture_ratio},
            {"frame_interval", c.frame_interval},
            {"clip_len", c.clip_len},
            {"seed", c.seed},
            {"learning_rate", c.optimizer.learning_rate},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"preset", c.preset},
            {"incremental_after", c.incremental_after},
            {"divergence_factor", c.divergence_factor},
            {"divergence_patience", c.divergence_patience},
            {"initial_window", c.initial_window},
            {"checkpoint_every", c.checkpoint_every},
            {"loss_weighting", c.loss_weighting}};
}

/// Applies the keys of `j` on top of `base`; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
    require(j.is_object(), ErrorKind::schema, "train config must be an object");
    const nlohmann::json known = to_json(base);
    for (const auto& [key, _] : j.items())
        require(known.contains(key), ErrorKind::schema, "unknown train config key '" + key + "'");
    try {
        TrainConfig& c = base;
        c.stage = j.value("stage", c.stage);
        c.steps = j.value("steps", c.steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.mixture_ratio = j.value("mixture_ratio", c.mixture_ratio);
        c.frame_interval = j.value("frame_interval", c.frame_interval);
        c.clip_len = j.value("clip_len", c.clip_len);
        c.seed = j.value("seed", c.seed);
        c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
        c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
        c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
        c.optimizer.eps = j.value("eps", c.optimizer.eps);
        c.preset = j.value("preset", c.preset);
        c.incremental_after = j.value("incremental_after", c.incremental_after);
        c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
        c.divergence_patience = j.value("divergence_patience", c.divergence_patience);
        c.initial_window = j.value("initial_window", c.initial_window);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.loss_weighting = j.value("loss_weighting", c.loss_weighting);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::schema, std::string("train config: ") + e.what());
    }
    base.validate();
    return base;
}

// ---------------------------------------------------------------------------
// Batches

struct Sources {
    const Dataset* kff = nullptr;
    const Dataset* fashion = nullptr;
    const Dataset* incremental = nullptr;  // joins the kff pool under the incremental preset
};

struct Batch {
    std::string source;  // kff | fashion
    std::vector<TrainingSample> samples;
};

/// Picks a source by a Bernoulli(mixture_ratio) draw, then batch_size uniform videos from it.
inline Batch next_batch(const Sources& sources, double mixture_ratio, int stage, const TrainConfig& cfg, Rng& rng,
                        bool incremental_active = false) {
    require(mixture_ratio >= 0 && mixture_ratio <= 1, ErrorKind::parameter, "mixture_ratio must be in [0,1]");
    const bool fashion = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < mixture_ratio;
    Batch batch{fashion ? "fashion" : "kff", {}};
    std::vector<std::pair<const Dataset*, std::size_t>> pool;
    auto add = [&](const Dataset* d) {
        if (d)
            for (std::size_t i = 0; i < d->size(); ++i) pool.emplace_back(d, i);
    };
    if (fashion) {
        add(sources.fashion);
    } else {
        add(sources.kff);
        if (incremental_active) add(sources.incremental);
    }
    require(!pool.empty(), ErrorKind::data, "the " + batch.source + " source has no videos");
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& [d, i] = pool[pick(rng)];
        batch.samples.push_back(d->sample(i, stage, cfg.frame_interval, cfg.clip_len, rng));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Loop

struct TraceRow {
    int stage = 1;
    std::int64_t step = 0;
    double loss = 0;
    std::string source;
};

inline std::string trace_csv_header() { return "stage,step,loss,source_tag\n"; }

inline std::string trace_csv_row(const TraceRow& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d,%lld,%.9g,", r.stage, static_cast<long long>(r.step), r.loss);
    return buf + r.source + "\n";
}

inline std::vector<TraceRow> read_trace_csv(const std::filesystem::path& path) {
    std::vector<TraceRow> out;
    std::istringstream in(read_text(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        TraceRow r;
        char src[32] = {0};
        long long step = 0;
        require(std::sscanf(line.c_str(), "%d,%lld,%lf,%31s", &r.stage, &step, &r.loss, src) == 4, ErrorKind::parse,
                "bad trace line: " + line);
        r.step = step;
        r.source = src;
        out.push_back(r);
    }
    return out;
}

struct TrainHooks {
    std::function<void(const TraceRow&)> on_step;
    std::function<void(const TrainState&)> on_checkpoint;  // every checkpoint_every steps and at the end
};

inline double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
    double s = 0;
    for (std::size_t i = begin; i < end; ++i) s += v[i];
    return end > begin ? s / double(end - begin) : 0.0;
}

/// Divergence guard: records the initial window, then raises once the loss has stayed
/// above divergence_factor times its mean for divergence_patience consecutive steps.
inline void observe_loss(TrainState& state, double loss, const TrainConfig& cfg, std::int64_t step) {
    require(std::isfinite(loss), ErrorKind::divergence,
            "stage " + std::to_string(cfg.stage) + " step " + std::to_string(step) + ": non-finite loss");
    if (int(state.first_losses.size()) < cfg.initial_window) {
        state.first_losses.push_back(loss);
        if (int(state.first_losses.size()) == cfg.initial_window)
            state.initial_loss = mean_of(state.first_losses, 0, state.first_losses.size());
        return;
    }
    state.above_guard = loss > cfg.divergence_factor * state.initial_loss ? state.above_guard + 1 : 0;
    if (state.above_guard >= cfg.divergence_patience) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "stage %d step %lld: loss %.6g above %.3gx the initial mean %.6g for %lld steps",
                      cfg.stage, static_cast<long long>(step), loss, cfg.divergence_factor, state.initial_loss,
                      static_cast<long long>(state.above_guard));
        fail(ErrorKind::divergence, buf);
    }
}

/// Runs the stage from state.step to cfg.steps. Every step draws from its own
/// generator seeded by (seed, stage, step), so a resumed run repeats an unbroken one.
inline std::vector<TraceRow> train(Denoiser<float>& net, AdaptiveOptimizer<float>& opt, const NoiseSchedule& schedule,
                                   const TrainConfig& cfg, const Sources& sources, TrainState& state,
                                   const TrainHooks& hooks = {}) {
    cfg.validate();
    if (state.stage != cfg.stage) state = TrainState{cfg.stage, 0, 0.0, 0, {}};
    apply_freeze_policy(net.params(), cfg.stage);
    const LossWeighting weighting = cfg.loss_weighting == "v"    ? LossWeighting::v
                                    : cfg.loss_weighting == "x0" ? LossWeighting::x0
                                                                 : LossWeighting::eps;
    std::vector<TraceRow> trace;
    while (state.step < cfg.steps) {
        const std::int64_t step = state.step;
        Rng rng = make_rng({cfg.seed, std::uint64_t(cfg.stage), std::uint64_t(step), 0x7374ull});
        const bool incremental = cfg.preset == "incremental" && step >= cfg.incremental_after;
        const Batch batch = next_batch(sources, cfg.mixture_ratio, cfg.stage, cfg, rng, incremental);
        net.params().zero_grad();
        double loss = 0;
        for (const auto& sample : batch.samples) {
            const Conditioning<float> cond = make_conditioning(net, sample.inputs);
            const LossDraw<float> draw = training_loss(net, schedule, sample.x0, cond, rng, weighting);
            const auto scaled = ag::scale(draw.loss, 1.0f / float(batch.samples.size()));
            ag::backward(scaled);
            loss += double(draw.loss->value[0]) / double(batch.samples.size());
        }
        observe_loss(state, loss, cfg, step);
        opt.step(net.params());
        ++state.step;
        const TraceRow row{cfg.stage, step, loss, batch.source};
        trace.push_back(row);
        if (hooks.on_step) hooks.on_step(row);
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 &&
            state.step < cfg.steps)
            hooks.on_checkpoint(state);
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(state);
    return trace;
}

}  // namespace duel
