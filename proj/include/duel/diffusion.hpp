#pragma once

// Linear DDPM schedule, forward noising, the noise-prediction loss, the
// deterministic DDIM update and the clip-fusion long-video sampler.

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "duel/autograd.hpp"
#include "duel/denoiser.hpp"
#include "duel/nn.hpp"

namespace duel {

struct NoiseSchedule {
    int steps = 0;  // T
    double beta_start = 0;
    double beta_end = 0;
    std::string kind = "linear";
    // Index k holds the value for diffusion step t = k + 1.
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    /// Cumulative product at step t; t = 0 is the clean signal (1).
    double alpha_bar(int t) const {
        require(t >= 0 && t <= steps, ErrorKind::parameter,
                "timestep " + std::to_string(t) + " outside [0," + std::to_string(steps) + "]");
        return t == 0 ? 1.0 : alpha_bars[std::size_t(t - 1)];
    }
};

inline NoiseSchedule make_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2,
                                   const std::string& kind = "linear") {
    require(kind == "linear", ErrorKind::parameter, "unsupported schedule kind '" + kind + "'");
    require(steps >= 1, ErrorKind::parameter, "schedule needs at least one step");
    require(0 < beta_start && beta_start < beta_end && beta_end < 1, ErrorKind::parameter,
            "need 0 < beta_start < beta_end < 1");
    NoiseSchedule s{steps, beta_start, beta_end, kind, {}, {}, {}};
    double bar = 1.0;
    for (int k = 0; k < steps; ++k) {
        const double beta = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * k / (steps - 1);
        s.betas.push_back(beta);
        s.alphas.push_back(1.0 - beta);
        bar *= 1.0 - beta;
        s.alpha_bars.push_back(bar);
    }
    return s;
}

inline nlohmann::json schedule_json(const NoiseSchedule& s) {
    return {{"T", s.steps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}, {"kind", s.kind}};
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>(),
                         j.value("kind", std::string("linear")));
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
    require(t >= 1 && t <= schedule.steps, ErrorKind::parameter,
            "add_noise timestep " + std::to_string(t) + " outside [1," + std::to_string(schedule.steps) + "]");
    require(x0.shape() == eps.shape(), ErrorKind::shape, "noise shape differs from x0");
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor<T> out(x0.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
    return out;
}

/// One DDIM update from t to t_prev. eta = 0 is deterministic; eta > 0 needs `rng`.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, int t_prev, const NoiseSchedule& schedule,
                    double eta = 0.0, Rng* rng = nullptr) {
    require(t > t_prev && t_prev >= 0 && t <= schedule.steps, ErrorKind::parameter,
            "ddim_step needs T >= t > t_prev >= 0, got t=" + std::to_string(t) + " t_prev=" + std::to_string(t_prev));
    require(x_t.shape() == eps_hat.shape(), ErrorKind::shape, "eps_hat shape differs from x_t");
    require(eta == 0.0 || rng != nullptr, ErrorKind::parameter, "stochastic DDIM needs a generator");
    const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t_prev);
    double sigma = 0.0;
    if (eta > 0) sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor<T> out(x_t.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const double x0_hat = (x_t[i] - std::sqrt(1.0 - ab) * eps_hat[i]) / std::sqrt(ab);
        double v = std::sqrt(ab_prev) * x0_hat + dir * eps_hat[i];
        if (sigma > 0) v += sigma * normal(*rng);
        out[i] = static_cast<T>(v);
    }
    return out;
}

/// Uniformly spaced descending timesteps T, ..., T/steps.
inline std::vector<int> ddim_timesteps(int train_steps, int steps) {
    require(steps >= 1 && steps <= train_steps, ErrorKind::parameter,
            "sampling steps must lie in [1, T], got " + std::to_string(steps));
    std::vector<int> ts;
    for (int i = 0; i < steps; ++i)
        ts.push_back(int(std::lround(double(train_steps) * (steps - i) / steps)));
    return ts;
}

// ---------------------------------------------------------------------------
// Training objective

template <typename T>
struct LossDraw {
    ag::Var<T> loss;  // objective to differentiate
    int t = 0;
    double eps_mse = 0;  // plain noise MSE, whatever the weighting
};

/// "eps": plain noise MSE. "v": the same error measured on the velocity target,
/// noise MSE / alpha_bar(t). "x0": measured on the clean latent,
/// noise MSE * (1 - alpha_bar(t)) / alpha_bar(t).
enum class LossWeighting { eps, v, x0 };

/// Draws t ~ U{1..T} and eps ~ N(0, I), noises x0 and scores the predictor's
/// estimate of eps by mean squared error.
template <typename T, typename Predict>
LossDraw<T> diffusion_loss(const Tensor<T>& x0, const NoiseSchedule& schedule, Rng& rng, Predict&& predict,
                           LossWeighting weighting = LossWeighting::eps) {
    std::uniform_int_distribution<int> pick(1, schedule.steps);
    const int t = pick(rng);
    const Tensor<T> eps = normal_tensor<T>(x0.shape(), rng);
    const auto x_t = ag::constant(add_noise(x0, t, eps, schedule));
    const ag::Var<T> eps_hat = predict(x_t, t);
    const auto mse = ag::mse(eps_hat, eps);
    const double plain = double(mse->value[0]);
    const double ab = schedule.alpha_bar(t);
    if (weighting == LossWeighting::eps) return {mse, t, plain};
    if (weighting == LossWeighting::v) return {ag::scale(mse, T(1.0 / ab)), t, plain};
    return {ag::scale(mse, T((1.0 - ab) / ab)), t, plain};
}

/// training_loss for the denoiser: x0 [F,12,h,w] with its conditioning.
template <typename T>
LossDraw<T> training_loss(const Denoiser<T>& net, const NoiseSchedule& schedule, const Tensor<T>& x0,
                          const Conditioning<T>& cond, Rng& rng, LossWeighting weighting = LossWeighting::eps) {
    return diffusion_loss<T>(
        x0, schedule, rng,
        [&](const ag::Var<T>& x_t, int t) { return net.predict_noise(x_t, t, cond, schedule.alpha_bar(t)); },
        weighting);
}

// ---------------------------------------------------------------------------
// Sampling

enum class Fusion { replace, fade };

struct SamplerConfig {
    int steps = 25;
    int clip_len = 24;
    int overlap = 4;
    int stride = 20;
    double eta = 0.0;
    std::uint64_t seed = 0;
    Fusion fusion = Fusion::replace;
    double guidance_scale = 1.0;  // 1: no guidance

    void validate() const {
        require(steps >= 1, ErrorKind::parameter, "steps must be positive");
        require(overlap >= 1 && clip_len > overlap && stride == clip_len - overlap, ErrorKind::parameter,
                "need clip_len > overlap >= 1 and stride == clip_len - overlap");
        require(eta >= 0.0, ErrorKind::parameter, "eta must be non-negative");
    }
};

/// Noise predictor over one window: x_t [F,12,h,w] at step t -> eps_hat.
using EpsPredictor = std::function<Tensor<float>(const Tensor<float>& x_t, int t)>;

/// x_t of the trailing overlap frames at each retained step (the carry), and
/// the leading overlap frames as they entered the denoiser (after fusion).
struct SamplerCarry {
    std::vector<int> timesteps;
    std::vector<Tensor<float>> tail;
    std::vector<Tensor<float>> head;
};

struct ClipSample {
    LatentClip clip;
    SamplerCarry carry;
};

inline Tensor<float> initial_noise(const Shape& shape, std::uint64_t seed, std::uint64_t clip_index) {
    Rng rng = make_rng({seed, clip_index, 0x6e6f697365ull});
    return normal_tensor<float>(shape, rng);
}

namespace detail {

inline void overwrite_frames(Tensor<float>& x, std::int64_t begin, const Tensor<float>& src,
                             const std::vector<double>* weights) {
    const std::int64_t per = x.numel() / x.dim(0);
    for (std::int64_t f = 0; f < src.dim(0); ++f) {
        float* dst = x.data() + (begin + f) * per;
        const float* s = src.data() + f * per;
        if (!weights) {
            std::copy_n(s, per, dst);
        } else {
            const double w = (*weights)[std::size_t(f) % weights->size()];
            for (std::int64_t i = 0; i < per; ++i) dst[i] = float(w * s[i] + (1.0 - w) * dst[i]);
        }
    }
}

inline std::vector<double> fade_weights(int overlap) {
    std::vector<double> w;
    for (int j = 0; j < overlap; ++j) w.push_back(1.0 - double(j) / overlap);
    return w;
}

}  // namespace detail

/// Runs the DDIM chain on one window. With `incoming`, the first overlap frames'
/// x_t are overwritten from it at every step before the predictor is called.
inline ClipSample sample_window(const EpsPredictor& predict, Tensor<float> x, const NoiseSchedule& schedule,
                                const SamplerConfig& config, const SamplerCarry* incoming, Rng* eta_rng = nullptr) {
    const auto ts = ddim_timesteps(schedule.steps, config.steps);
    const std::int64_t frames = x.dim(0);
    const std::int64_t keep = std::min<std::int64_t>(config.overlap, frames);
    const auto fade = detail::fade_weights(config.overlap);
    ClipSample out;
    for (std::size_t s = 0; s < ts.size(); ++s) {
        const int t = ts[s];
        const int t_prev = s + 1 < ts.size() ? ts[s + 1] : 0;
        if (incoming) {
            require(incoming->tail.size() == ts.size(), ErrorKind::sampling, "carry does not match step count");
            detail::overwrite_frames(x, 0, incoming->tail[s],
                                     config.fusion == Fusion::fade ? &fade : nullptr);
        }
        out.carry.timesteps.push_back(t);
        out.carry.tail.push_back(x.slice0(frames - keep, frames));
        out.carry.head.push_back(x.slice0(0, keep));
        const Tensor<float> eps = predict(x, t);
        require(eps.shape() == x.shape(), ErrorKind::shape, "predictor returned " + shape_str(eps.shape()));
        x = ddim_step(x, eps, t, t_prev, schedule, config.eta, eta_rng);
    }
    out.clip.frames = std::move(x);
    out.clip.timestep = 0;
    return out;
}

/// Single clip from seeded noise.
inline ClipSample sample_clip(const EpsPredictor& predict, const Shape& shape, const NoiseSchedule& schedule,
                              const SamplerConfig& config) {
    config.validate();
    Rng eta_rng = make_rng({config.seed, 0x657461ull});
    return sample_window(predict, initial_noise(shape, config.seed, 0), schedule, config, nullptr, &eta_rng);
}

struct LongSample {
    Tensor<float> latents;                  // [N,12,h,w]
    std::vector<std::int64_t> clip_starts;  // first frame of each window
    std::vector<ClipSample> clips;
    int predictor_calls = 0;

    /// Frame indices where a window's fresh frames begin.
    std::vector<std::int64_t> boundaries(int overlap) const {
        std::vector<std::int64_t> out;
        for (std::size_t k = 1; k < clip_starts.size(); ++k) out.push_back(clip_starts[k] + overlap);
        return out;
    }
};

/// Window predictor factory: frames [begin, end) of the long sequence.
using WindowPredictor = std::function<EpsPredictor(std::int64_t begin, std::int64_t end)>;

/// Clip-fusion sampling of N frames: a first window of clip_len frames, then
/// windows of overlap carried + stride fresh frames. Carried frames are taken
/// from their first occurrence when stitching.
inline LongSample sample_long(const WindowPredictor& window, std::int64_t n_frames, const Shape& frame_shape,
                              const NoiseSchedule& schedule, const SamplerConfig& config) {
    config.validate();
    require(n_frames >= 1, ErrorKind::shape, "need at least one frame");
    require(frame_shape.size() == 3, ErrorKind::shape, "frame shape must be [c,h,w]");
    LongSample out;
    int calls = 0;
    auto counted = [&](EpsPredictor p) {
        return EpsPredictor([&calls, p = std::move(p)](const Tensor<float>& x, int t) {
            ++calls;
            return p(x, t);
        });
    };
    const std::int64_t first = std::min<std::int64_t>(n_frames, config.clip_len);
    Shape shape{first, frame_shape[0], frame_shape[1], frame_shape[2]};
    out.clips.push_back(sample_clip(counted(window(0, first)), shape, schedule, config));
    out.clip_starts.push_back(0);
    std::vector<Tensor<float>> pieces{out.clips.back().clip.frames};
    std::int64_t covered = first;
    Rng eta_rng = make_rng({config.seed, 0x657461ull, 1});
    for (std::uint64_t k = 1; covered < n_frames; ++k) {
        const std::int64_t begin = covered - config.overlap;
        const std::int64_t end = std::min<std::int64_t>(n_frames, begin + config.clip_len);
        shape[0] = end - begin;
        Tensor<float> x = initial_noise(shape, config.seed, k);
        out.clips.push_back(sample_window(counted(window(begin, end)), std::move(x), schedule, config,
                                          &out.clips.back().carry, &eta_rng));
        out.clip_starts.push_back(begin);
        pieces.push_back(out.clips.back().clip.frames.slice0(config.overlap, end - begin));
        covered = end;
    }
    out.latents = concat0(pieces);
    out.predictor_calls = calls;
    return out;
}

// ---------------------------------------------------------------------------
// Denoiser adapters

/// Predictor over frames [begin, end) of a prepared conditioning.
inline EpsPredictor denoiser_predictor(const Denoiser<float>& net, const Conditioning<float>& cond,
                                       const NoiseSchedule& schedule, double guidance_scale = 1.0) {
    std::optional<Conditioning<float>> uncond;
    if (guidance_scale != 1.0) {
        uncond = cond;
        ag::NoGradGuard ng;
        uncond->prompt = net.embed_prompt("");
    }
    return [&net, &schedule, cond, uncond, guidance_scale](const Tensor<float>& x, int t) {
        ag::NoGradGuard ng;
        const double ab = schedule.alpha_bar(t);
        Tensor<float> eps = net.predict_noise(ag::constant(x), t, cond, ab)->value;
        if (uncond) {
            const Tensor<float> e0 = net.predict_noise(ag::constant(x), t, *uncond, ab)->value;
            for (std::int64_t i = 0; i < eps.numel(); ++i)
                eps[i] = float(e0[i] + guidance_scale * (eps[i] - e0[i]));
        }
        return eps;
    };
}

inline Shape latent_frame_shape(const ClipInputs& in) {
    return {kLatentChannels, in.refs[0].dim(1) / 2, in.refs[0].dim(2) / 2};
}

/// Generates one clip covering every frame of `in`.
inline ClipSample generate_clip(const Denoiser<float>& net, const NoiseSchedule& schedule, const ClipInputs& in,
                                const SamplerConfig& config) {
    ag::NoGradGuard ng;
    const Conditioning<float> cond = make_conditioning(net, in);
    const Shape fs = latent_frame_shape(in);
    return sample_clip(denoiser_predictor(net, cond, schedule, config.guidance_scale), {in.frames(), fs[0], fs[1], fs[2]},
                       schedule, config);
}

/// Generates an arbitrarily long sequence by clip fusion.
inline LongSample generate_long(const Denoiser<float>& net, const NoiseSchedule& schedule, const ClipInputs& in,
                                const SamplerConfig& config) {
    ag::NoGradGuard ng;
    const Conditioning<float> cond = make_conditioning(net, in);
    auto window = [&](std::int64_t b, std::int64_t e) {
        return denoiser_predictor(net, slice_frames(cond, b, e), schedule, config.guidance_scale);
    };
    return sample_long(window, in.frames(), latent_frame_shape(in), schedule, config);
}

}  // namespace duel
