#pragma once

// Toy video denoiser: a small UNet over latent frames with
//   - identity attention blocks that blend cross-attention to two reference
//     feature maps with self-attention under per-ID region masks,
//   - a zero-initialised multi-stage pose guider whose residuals are added to
//     the encoder features,
//   - temporal attention across frames at each spatial site,
//   - hashed prompt tokens read by cross-attention at the coarsest level,
//   - background latents concatenated to the noisy input on channels.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "duel/autograd.hpp"
#include "duel/latent_codec.hpp"
#include "duel/nn.hpp"
#include "duel/pose_kit.hpp"

namespace duel {

struct NetConfig {
    int latent_channels = kLatentChannels;
    std::vector<int> channels{16, 32, 64};
    std::vector<int> attention_levels{1, 2};
    std::vector<int> temporal_levels{1, 2};
    int heads = 2;
    int norm_groups = 8;
    int time_dim = 64;
    int prompt_width = 32;
    int prompt_len = 32;
    int prompt_vocab = 509;
    int stem_channels = 8;
    // "eps": direct; "v": eps_hat = sqrt(abar) v + sqrt(1 - abar) z_t;
    // "x0": eps_hat = (z_t - sqrt(abar) x0_hat) / sqrt(1 - abar)
    std::string head = "x0";

    int levels() const { return int(channels.size()); }
    int in_channels() const { return 2 * latent_channels; }
    bool attention_at(int level) const {
        return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
    }
    bool temporal_at(int level) const {
        return std::find(temporal_levels.begin(), temporal_levels.end(), level) != temporal_levels.end();
    }

    void validate() const {
        auto bad = [](bool ok, const std::string& msg) { require(ok, ErrorKind::parameter, "net config: " + msg); };
        bad(!channels.empty(), "at least one resolution level");
        for (int c : channels) {
            bad(c > 0 && c % norm_groups == 0, "channels must be divisible by norm_groups");
            bad(c % heads == 0, "heads must divide every channel count");
        }
        for (const auto* lv : {&attention_levels, &temporal_levels})
            for (int l : *lv) bad(l >= 0 && l < levels(), "level index out of range");
        bad(latent_channels == kLatentChannels, "latent channel count is fixed by the codec");
        bad(time_dim > 0 && time_dim % 2 == 0, "time_dim must be even and positive");
        bad(prompt_width > 0 && prompt_len > 0 && prompt_vocab > 0, "prompt sizes must be positive");
        bad(stem_channels > 0, "stem_channels must be positive");
        bad(head == "v" || head == "eps" || head == "x0", "head must be eps, v or x0");
    }

    /// Attention grid of level l for a latent of lh x lw.
    std::pair<int, int> grid(int level, int lh, int lw) const { return {lh >> level, lw >> level}; }

    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const NetConfig& c) {
    j = {{"latent_channels", c.latent_channels}, {"channels", c.channels},
         {"attention_levels", c.attention_levels}, {"temporal_levels", c.temporal_levels},
         {"heads", c.heads}, {"norm_groups", c.norm_groups}, {"time_dim", c.time_dim},
         {"prompt_width", c.prompt_width}, {"prompt_len", c.prompt_len},
         {"prompt_vocab", c.prompt_vocab}, {"stem_channels", c.stem_channels}, {"head", c.head}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
    static const std::vector<std::string> known = {
        "latent_channels", "channels", "attention_levels", "temporal_levels", "heads", "norm_groups",
        "time_dim", "prompt_width", "prompt_len", "prompt_vocab", "stem_channels", "head"};
    for (const auto& [key, _] : j.items())
        require(std::find(known.begin(), known.end(), key) != known.end(), ErrorKind::parameter,
                "net config: unknown key '" + key + "'");
    NetConfig d;
    c.latent_channels = j.value("latent_channels", d.latent_channels);
    c.channels = j.value("channels", d.channels);
    c.attention_levels = j.value("attention_levels", d.attention_levels);
    c.temporal_levels = j.value("temporal_levels", d.temporal_levels);
    c.heads = j.value("heads", d.heads);
    c.norm_groups = j.value("norm_groups", d.norm_groups);
    c.time_dim = j.value("time_dim", d.time_dim);
    c.prompt_width = j.value("prompt_width", d.prompt_width);
    c.prompt_len = j.value("prompt_len", d.prompt_len);
    c.prompt_vocab = j.value("prompt_vocab", d.prompt_vocab);
    c.stem_channels = j.value("stem_channels", d.stem_channels);
    c.head = j.value("head", d.head);
    c.validate();
}

// ---------------------------------------------------------------------------
// Layer parameter bundles

template <typename T>
struct Conv {
    ag::Var<T> w, b;
    int stride = 1;
    int pad = 1;
    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct Norm {
    ag::Var<T> gamma, beta;
    int groups = 1;
    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

template <typename T>
struct Linear {
    ag::Var<T> w, b;
    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, w, b); }
};

template <typename T>
struct ResBlock {
    Norm<T> norm1;
    Conv<T> conv1;
    Linear<T> time;        // shift after norm2
    Linear<T> time_scale;  // scale after norm2
    Norm<T> norm2;
    Conv<T> conv2;
    std::optional<Conv<T>> skip;
};

/// Projections of one identity-attention layer: Q/K/V from the frame itself and
/// K/V from the reference features.
template <typename T>
struct IdAttnLayer {
    Linear<T> q, k_self, v_self, k_ref, v_ref;
    int heads = 1;
};

template <typename T>
struct IdAttnBlock {
    Norm<T> norm;
    IdAttnLayer<T> layer;
    Linear<T> out;
};

template <typename T>
struct TemporalBlock {
    Norm<T> norm;
    Linear<T> q, k, v, out;
    int heads = 1;
};

template <typename T>
struct PromptBlock {
    Norm<T> norm;
    Linear<T> q, k, v, out;
    int heads = 1;
};

/// Shared layout of the pose guider and the reference encoder: an image-resolution
/// stem followed by one stride-2 stage per resolution level.
template <typename T>
struct ConvPyramid {
    Conv<T> stem;
    std::vector<Conv<T>> down;
    std::vector<Conv<T>> body;
    std::vector<std::optional<Conv<T>>> proj;
};

// ---------------------------------------------------------------------------
// Conditioning bundles

/// Per attention level, features of both reference images as [2,C_l,h_l,w_l]
/// (slot 0 is ID 1, slot 1 is ID 2). Non-attention levels are null.
template <typename T>
struct ReferenceFeatureBank {
    std::vector<ag::Var<T>> levels;
};

template <typename T>
struct PromptEmbedding {
    ag::Var<T> tokens;   // [1, prompt_len, prompt_width]
    ag::Var<T> summary;  // [1, prompt_width]
};

/// Everything predict_noise consumes besides the noisy latent and timestep.
template <typename T>
struct Conditioning {
    ReferenceFeatureBank<T> bank;
    std::vector<Tensor<T>> m1, m2;  // per level [F, h_l*w_l]; empty at non-attention levels
    std::vector<ag::Var<T>> pose;   // per level [F, C_l, h_l, w_l]; empty vector: no pose residuals
    PromptEmbedding<T> prompt;
    ag::Var<T> background;  // [1, 12, h, w]
};

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

/// Lower-cased whitespace tokens of a prompt.
inline std::vector<std::string> prompt_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

/// Table rows for a prompt: hashed tokens truncated to `len`, padded with row `vocab`.
inline std::vector<std::int64_t> prompt_ids(const std::string& text, int vocab, int len) {
    std::vector<std::int64_t> ids;
    for (const auto& tok : prompt_tokens(text)) {
        if (int(ids.size()) == len) break;
        ids.push_back(std::int64_t(fnv1a(tok) % std::uint64_t(vocab)));
    }
    ids.resize(std::size_t(len), vocab);
    return ids;
}

template <typename T>
Tensor<T> timestep_embedding(double t, int dim) {
    Tensor<T> out({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double f = std::exp(-std::log(10000.0) * i / half);
        out[i] = static_cast<T>(std::sin(t * f));
        out[half + i] = static_cast<T>(std::cos(t * f));
    }
    return out;
}

/// Sinusoidal frame-position code [F, C].
template <typename T>
Tensor<T> frame_position_code(std::int64_t frames, std::int64_t c) {
    Tensor<T> pe({frames, c});
    for (std::int64_t f = 0; f < frames; ++f)
        for (std::int64_t i = 0; i < c; ++i) {
            const double freq = std::pow(10000.0, -double(2 * (i / 2)) / double(c));
            pe.at(f, i) = static_cast<T>(i % 2 == 0 ? std::sin(f * freq) : std::cos(f * freq));
        }
    return pe;
}

/// Eq.-style identity attention on tokens: per-query convex blend of
/// cross-attention to r1 and r2 and self-attention, weighted by m1, m2 and
/// 1 - m1 - m2. x [F,n,C], r_i [1,n_r,C], m_i [F,n]. Returns [F,n,C].
template <typename T>
ag::Var<T> id_attn_forward(const IdAttnLayer<T>& layer, const ag::Var<T>& x, const ag::Var<T>& r1,
                           const ag::Var<T>& r2, const Tensor<T>& m1, const Tensor<T>& m2) {
    const auto& xs = x->value.shape();
    require(xs.size() == 3 && r1->value.rank() == 3 && r2->value.rank() == 3 &&
                r1->value.dim(2) == xs[2] && r2->value.dim(2) == xs[2],
            ErrorKind::shape,
            "id_attn: x " + shape_str(xs) + " r1 " + shape_str(r1->value.shape()) + " r2 " +
                shape_str(r2->value.shape()));
    require(m1.numel() == xs[0] * xs[1] && m2.numel() == xs[0] * xs[1], ErrorKind::shape,
            "id_attn: mask level has " + std::to_string(m1.numel()) + " weights for " +
                std::to_string(xs[0] * xs[1]) + " tokens");
    const auto q = layer.q(x);
    const auto self = ag::attention(q, layer.k_self(x), layer.v_self(x), layer.heads);
    const auto a1 = ag::attention(q, layer.k_ref(r1), layer.v_ref(r1), layer.heads);
    const auto a2 = ag::attention(q, layer.k_ref(r2), layer.v_ref(r2), layer.heads);
    return ag::mask_mix(a1, a2, self, m1, m2);
}

/// Scaled dot-product attention returning the full output for every query.
/// The mask is validated here but applied by the caller's blend.
template <typename T>
Tensor<T> mask_attn(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::span<const T> mask) {
    require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 && q.dim(1) == k.dim(1) && k.dim(0) == v.dim(0),
            ErrorKind::shape,
            "mask_attn: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " + shape_str(v.shape()));
    require(std::int64_t(mask.size()) == q.dim(0), ErrorKind::shape, "mask_attn: mask length differs from n_q");
    Tensor<T> out = ag::attention_forward<T>(q.reshaped({1, q.dim(0), q.dim(1)}), k.reshaped({1, k.dim(0), k.dim(1)}),
                                          v.reshaped({1, v.dim(0), v.dim(1)}), 1, nullptr);
    return std::move(out).reshaped({q.dim(0), v.dim(1)});
}

// ---------------------------------------------------------------------------

template <typename T>
class Denoiser {
public:
    explicit Denoiser(NetConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
        config_.validate();
        Rng rng = make_rng({seed, 0x6e6574ull});
        build(rng);
    }

    Denoiser(const Denoiser&) = delete;
    Denoiser& operator=(const Denoiser&) = delete;
    Denoiser(Denoiser&&) = default;
    Denoiser& operator=(Denoiser&&) = default;

    const NetConfig& config() const { return config_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    /// Adds N(0, stddev) noise to every parameter, so zero-initialised
    /// projections carry signal (used by gradient checks).
    void perturb(std::uint64_t seed, double stddev) {
        Rng rng = make_rng({seed, 0x70657274ull});
        std::normal_distribution<double> dist(0.0, stddev);
        params_.for_each([&](const std::string&, const ag::Var<T>& p) {
            for (auto& v : p->value.vec()) v = static_cast<T>(v + dist(rng));
        });
    }

    /// Both reference images run through the encoder as a batch of two;
    /// convolutions are per-sample, so the IDs never mix.
    ReferenceFeatureBank<T> encode_references(std::span<const Tensor<T>> refs) const {
        require(refs.size() == 2, ErrorKind::arity,
                "encode_references needs exactly two images, got " + std::to_string(refs.size()));
        require(refs[0].shape() == refs[1].shape() && refs[0].rank() == 3 && refs[0].dim(0) == 3,
                ErrorKind::shape,
                "reference images differ: " + shape_str(refs[0].shape()) + " vs " + shape_str(refs[1].shape()));
        check_image_dims(refs[0].dim(1), refs[0].dim(2), "reference image");
        const Shape one{1, 3, refs[0].dim(1), refs[0].dim(2)};
        const auto x = ag::constant(duel::concat0<T>({refs[0].reshaped(one), refs[1].reshaped(one)}));
        auto feats = run_pyramid(reference_, x);
        ReferenceFeatureBank<T> bank;
        bank.levels.resize(std::size_t(config_.levels()));
        for (int l = 0; l < config_.levels(); ++l)
            if (config_.attention_at(l)) bank.levels[l] = feats[l];
        return bank;
    }

    /// pose maps [F,3,H,W] at image resolution -> one residual per level.
    std::vector<ag::Var<T>> pose_guider_forward(const ag::Var<T>& pose_maps) const {
        const auto& s = pose_maps->value.shape();
        require(s.size() == 4 && s[1] == 3, ErrorKind::shape, "pose maps must be [F,3,H,W], got " + shape_str(s));
        check_image_dims(s[2], s[3], "pose map");
        return run_pyramid(guider_, pose_maps);
    }

    PromptEmbedding<T> embed_prompt(const std::string& text) const {
        const auto ids = prompt_ids(text, config_.prompt_vocab, config_.prompt_len);
        const auto rows = ag::embedding(prompt_table_, ids);
        return {ag::reshape(rows, {1, config_.prompt_len, config_.prompt_width}), ag::mean_rows(rows)};
    }

    /// Full forward pass: z_t [F,12,h,w] at diffusion index t -> predicted noise.
    /// alpha_bar is abar_t of the noise schedule; the v and x0 heads need it.
    ag::Var<T> predict_noise(const ag::Var<T>& z_t, double t, const Conditioning<T>& cond,
                             std::optional<double> alpha_bar = std::nullopt) const {
        const auto& zs = z_t->value.shape();
        require(zs.size() == 4 && zs[1] == config_.latent_channels, ErrorKind::shape,
                "z_t must be [F,12,h,w], got " + shape_str(zs));
        const std::int64_t frames = zs[0], lh = zs[2], lw = zs[3];
        check_latent_dims(lh, lw);
        require(cond.background && cond.background->value.shape() == Shape{1, config_.latent_channels, lh, lw},
                ErrorKind::shape,
                "background latent " + (cond.background ? shape_str(cond.background->value.shape()) : "missing") +
                    " does not match z_t " + shape_str(zs));
        require(cond.pose.empty() || int(cond.pose.size()) == config_.levels(), ErrorKind::shape,
                "pose residual level count " + std::to_string(cond.pose.size()) + " != " +
                    std::to_string(config_.levels()));

        auto temb = time_mlp_(t);
        if (cond.prompt.summary) temb = ag::add(temb, prompt_time_(cond.prompt.summary));

        auto h = conv_in_(ag::concat_channels(z_t, cond.background));
        std::vector<ag::Var<T>> skips;
        for (int l = 0; l < config_.levels(); ++l) {
            if (l > 0) h = down_[l](h);
            if (!cond.pose.empty()) {
                require(cond.pose[l]->value.shape() == h->value.shape(), ErrorKind::shape,
                        "pose residual level " + std::to_string(l) + " is " + shape_str(cond.pose[l]->value.shape()) +
                            ", expected " + shape_str(h->value.shape()));
                h = ag::add(h, cond.pose[l]);
            }
            h = resblock(enc_res_[l], h, temb);
            if (config_.attention_at(l)) h = id_attn_block(enc_id_[l], h, cond, l, frames);
            if (config_.temporal_at(l)) h = temporal_block(enc_temporal_[l], h);
            skips.push_back(h);
        }
        h = resblock(mid_res_, h, temb);
        if (cond.prompt.tokens) h = prompt_block(h, cond.prompt.tokens);
        for (int l = config_.levels() - 1; l >= 0; --l) {
            h = resblock(dec_res_[l], ag::concat_channels(h, skips[l]), temb);
            if (config_.attention_at(l)) h = id_attn_block(dec_id_[l], h, cond, l, frames);
            if (config_.temporal_at(l)) h = temporal_block(dec_temporal_[l], h);
            if (l > 0) h = up_[l](ag::upsample2x(h));
        }
        auto out = conv_out_(ag::silu(norm_out_(h)));
        if (config_.head == "eps") return out;
        if (config_.head == "x0") {
            require(alpha_bar && *alpha_bar > 0 && *alpha_bar < 1, ErrorKind::parameter,
                    "x0 head needs alpha_bar in (0,1)");
            const double inv = 1.0 / std::sqrt(1 - *alpha_bar);
            return ag::add(ag::scale(z_t, T(inv)), ag::scale(out, T(-std::sqrt(*alpha_bar) * inv)));
        }
        require(alpha_bar && *alpha_bar > 0 && *alpha_bar <= 1, ErrorKind::parameter,
                "v head needs alpha_bar in (0,1]");
        return ag::add(ag::scale(out, T(std::sqrt(*alpha_bar))), ag::scale(z_t, T(std::sqrt(1 - *alpha_bar))));
    }

    /// Temporal layer alone (exposed for tests): x [F,C,h,w] -> same shape.
    ag::Var<T> temporal_forward(int level, bool decoder, const ag::Var<T>& x) const {
        return temporal_block((decoder ? dec_temporal_ : enc_temporal_).at(level), x);
    }

    const IdAttnLayer<T>& id_attn_layer(int level, bool decoder = false) const {
        return (decoder ? dec_id_ : enc_id_).at(level).layer;
    }

    /// Group of a parameter name: its first dotted component.
    static std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

private:
    struct TimeMlp {
        Linear<T> l1, l2;
        int dim;
        ag::Var<T> operator()(double t) const {
            return l2(ag::silu(l1(ag::constant(timestep_embedding<T>(t, dim)))));
        }
    };

    void check_latent_dims(std::int64_t lh, std::int64_t lw) const {
        const std::int64_t unit = std::int64_t(1) << (config_.levels() - 1);
        require(lh % unit == 0 && lw % unit == 0, ErrorKind::shape,
                "latent " + std::to_string(lh) + "x" + std::to_string(lw) + " not divisible by " +
                    std::to_string(unit));
    }
    void check_image_dims(std::int64_t h, std::int64_t w, const std::string& what) const {
        const std::int64_t unit = std::int64_t(2) << (config_.levels() - 1);
        require(h % unit == 0 && w % unit == 0, ErrorKind::shape,
                what + " " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                    std::to_string(unit));
    }

    // -- construction ---------------------------------------------------------

    Conv<T> conv(const std::string& name, int cin, int cout, int k, int stride, Rng& rng, bool zero = false) {
        const double bound = 1.0 / std::sqrt(double(cin * k * k));
        Conv<T> c;
        c.w = params_.add(name + ".w", zero ? Tensor<T>({cout, cin, k, k})
                                            : uniform_tensor<T>({cout, cin, k, k}, rng, bound));
        c.b = params_.add(name + ".b", zero ? Tensor<T>({cout}) : uniform_tensor<T>({cout}, rng, bound));
        c.stride = stride;
        c.pad = k / 2;
        return c;
    }
    Norm<T> norm(const std::string& name, int c) {
        return {params_.add(name + ".gamma", Tensor<T>({c}, T(1))), params_.add(name + ".beta", Tensor<T>({c})),
                config_.norm_groups};
    }
    Linear<T> linear(const std::string& name, int din, int dout, Rng& rng, bool zero = false) {
        const double bound = 1.0 / std::sqrt(double(din));
        return {params_.add(name + ".w", zero ? Tensor<T>({din, dout}) : uniform_tensor<T>({din, dout}, rng, bound)),
                params_.add(name + ".b", zero ? Tensor<T>({dout}) : uniform_tensor<T>({dout}, rng, bound))};
    }
    ResBlock<T> res(const std::string& name, int cin, int cout, Rng& rng) {
        ResBlock<T> r{Norm<T>{}, Conv<T>{}, Linear<T>{}, Linear<T>{}, Norm<T>{}, Conv<T>{}, std::nullopt};
        // norm1 needs cin divisible by groups; cin is a sum of level widths
        r.norm1 = norm(name + ".norm1", cin);
        r.conv1 = conv(name + ".conv1", cin, cout, 3, 1, rng);
        r.time = linear(name + ".time", config_.time_dim, cout, rng);
        r.time_scale = linear(name + ".time_scale", config_.time_dim, cout, rng, true);
        r.norm2 = norm(name + ".norm2", cout);
        r.conv2 = conv(name + ".conv2", cout, cout, 3, 1, rng);
        if (cin != cout) r.skip = conv(name + ".skip", cin, cout, 1, 1, rng);
        return r;
    }
    IdAttnBlock<T> id_block(const std::string& name, int c, Rng& rng) {
        IdAttnBlock<T> b;
        b.norm = norm(name + ".norm", c);
        b.layer.q = linear(name + ".q", c, c, rng);
        b.layer.k_self = linear(name + ".k_self", c, c, rng);
        b.layer.v_self = linear(name + ".v_self", c, c, rng);
        b.layer.k_ref = linear(name + ".k_ref", c, c, rng);
        b.layer.v_ref = linear(name + ".v_ref", c, c, rng);
        b.layer.heads = config_.heads;
        b.out = linear(name + ".out", c, c, rng);
        return b;
    }
    TemporalBlock<T> temporal(const std::string& name, int c, Rng& rng) {
        TemporalBlock<T> b;
        b.norm = norm(name + ".norm", c);
        b.q = linear(name + ".q", c, c, rng);
        b.k = linear(name + ".k", c, c, rng);
        b.v = linear(name + ".v", c, c, rng);
        b.out = linear(name + ".out", c, c, rng, /*zero=*/true);
        b.heads = config_.heads;
        return b;
    }
    ConvPyramid<T> pyramid(const std::string& name, bool zero_proj, bool attention_only, Rng& rng) {
        ConvPyramid<T> p;
        p.stem = conv(name + ".stem", 3, config_.stem_channels, 3, 1, rng);
        int prev = config_.stem_channels;
        for (int l = 0; l < config_.levels(); ++l) {
            const int c = config_.channels[l];
            const std::string lv = name + ".l" + std::to_string(l);
            p.down.push_back(conv(lv + ".down", prev, c, 3, 2, rng));
            p.body.push_back(conv(lv + ".body", c, c, 3, 1, rng));
            if (!attention_only || config_.attention_at(l))
                p.proj.push_back(conv(lv + ".proj", c, c, 1, 1, rng, zero_proj));
            else
                p.proj.push_back(std::nullopt);
            prev = c;
        }
        return p;
    }

    void build(Rng& rng) {
        const auto& ch = config_.channels;
        const int levels = config_.levels();
        time_mlp_ = {linear("time.l1", config_.time_dim, config_.time_dim, rng),
                     linear("time.l2", config_.time_dim, config_.time_dim, rng), config_.time_dim};
        prompt_table_ = params_.add("prompt.table",
                                    normal_tensor<T>({config_.prompt_vocab + 1, config_.prompt_width}, rng));
        prompt_time_ = linear("prompt.to_time", config_.prompt_width, config_.time_dim, rng);
        reference_ = pyramid("reference", false, true, rng);
        guider_ = pyramid("pose_guider", true, false, rng);

        conv_in_ = conv("unet.conv_in", config_.in_channels(), ch[0], 3, 1, rng);
        down_.resize(std::size_t(levels));
        up_.resize(std::size_t(levels));
        enc_id_.resize(std::size_t(levels));
        dec_id_.resize(std::size_t(levels));
        enc_temporal_.resize(std::size_t(levels));
        dec_temporal_.resize(std::size_t(levels));
        for (int l = 0; l < levels; ++l) {
            const std::string lv = std::to_string(l);
            if (l > 0) down_[l] = conv("unet.enc" + lv + ".down", ch[l - 1], ch[l], 3, 2, rng);
            enc_res_.push_back(res("unet.enc" + lv + ".res", ch[l], ch[l], rng));
            if (config_.attention_at(l)) enc_id_[l] = id_block("id_attn.enc" + lv, ch[l], rng);
            if (config_.temporal_at(l)) enc_temporal_[l] = temporal("temporal.enc" + lv, ch[l], rng);
        }
        mid_res_ = res("unet.mid.res", ch.back(), ch.back(), rng);
        const int c = ch.back();
        prompt_block_ = {norm("prompt.attn.norm", c), linear("prompt.attn.q", c, c, rng),
                         linear("prompt.attn.k", config_.prompt_width, c, rng),
                         linear("prompt.attn.v", config_.prompt_width, c, rng), linear("prompt.attn.out", c, c, rng),
                         config_.heads};
        dec_res_.resize(std::size_t(levels));
        for (int l = levels - 1; l >= 0; --l) {
            const std::string lv = std::to_string(l);
            dec_res_[l] = res("unet.dec" + lv + ".res", 2 * ch[l], ch[l], rng);
            if (config_.attention_at(l)) dec_id_[l] = id_block("id_attn.dec" + lv, ch[l], rng);
            if (config_.temporal_at(l)) dec_temporal_[l] = temporal("temporal.dec" + lv, ch[l], rng);
            if (l > 0) up_[l] = conv("unet.dec" + lv + ".up", ch[l], ch[l - 1], 3, 1, rng);
        }
        norm_out_ = norm("unet.norm_out", ch[0]);
        conv_out_ = conv("unet.conv_out", ch[0], config_.latent_channels, 3, 1, rng, /*zero=*/true);
    }

    // -- forward pieces -------------------------------------------------------

    std::vector<ag::Var<T>> run_pyramid(const ConvPyramid<T>& p, const ag::Var<T>& x) const {
        std::vector<ag::Var<T>> out;
        auto g = ag::silu(p.stem(x));
        for (int l = 0; l < config_.levels(); ++l) {
            g = ag::silu(p.down[l](g));
            g = ag::silu(p.body[l](g));
            out.push_back(p.proj[l] ? (*p.proj[l])(g) : nullptr);
        }
        return out;
    }

    ag::Var<T> resblock(const ResBlock<T>& r, const ag::Var<T>& x, const ag::Var<T>& temb) const {
        const auto t = ag::silu(temb);
        auto h = r.conv1(ag::silu(r.norm1(x)));
        h = ag::scale_shift(r.norm2(h), r.time_scale(t), r.time(t));
        h = r.conv2(ag::silu(h));
        return ag::add(r.skip ? (*r.skip)(x) : x, h);
    }

    ag::Var<T> id_attn_block(const IdAttnBlock<T>& b, const ag::Var<T>& x, const Conditioning<T>& cond, int level,
                             std::int64_t frames) const {
        const auto& xs = x->value.shape();
        require(std::size_t(level) < cond.bank.levels.size() && cond.bank.levels[level], ErrorKind::shape,
                "reference bank has no features for level " + std::to_string(level));
        const auto& bank = cond.bank.levels[level];
        require(bank->value.shape() == Shape{2, xs[1], xs[2], xs[3]}, ErrorKind::shape,
                "reference features " + shape_str(bank->value.shape()) + " do not match level grid " +
                    shape_str(xs));
        require(std::size_t(level) < cond.m1.size() && cond.m1[level].numel() == frames * xs[2] * xs[3] &&
                    cond.m2[level].numel() == frames * xs[2] * xs[3],
                ErrorKind::shape, "mask pyramid level " + std::to_string(level) + " does not match " + shape_str(xs));
        const auto tokens = ag::to_tokens(b.norm(x));
        const auto refs = ag::to_tokens(bank);
        const auto o = id_attn_forward(b.layer, tokens, ag::slice0(refs, 0, 1), ag::slice0(refs, 1, 2),
                                       cond.m1[level], cond.m2[level]);
        return ag::add(x, ag::from_tokens(b.out(o), xs[2], xs[3]));
    }

    ag::Var<T> temporal_block(const TemporalBlock<T>& b, const ag::Var<T>& x) const {
        const auto& xs = x->value.shape();
        const std::int64_t f = xs[0], c = xs[1], h = xs[2], w = xs[3];
        auto tokens = ag::reshape(ag::permute(b.norm(x), {2, 3, 0, 1}), {h * w, f, c});
        const Tensor<T> pe = frame_position_code<T>(f, c);
        Tensor<T> tiled({h * w, f, c});
        for (std::int64_t s = 0; s < h * w; ++s) std::copy_n(pe.data(), f * c, tiled.data() + s * f * c);
        const auto qk_in = ag::add(tokens, ag::constant(std::move(tiled)));
        const auto a = ag::attention(b.q(qk_in), b.k(qk_in), b.v(tokens), b.heads);
        const auto o = ag::permute(ag::reshape(b.out(a), {h, w, f, c}), {2, 3, 0, 1});
        return ag::add(x, o);
    }

    ag::Var<T> prompt_block(const ag::Var<T>& x, const ag::Var<T>& prompt) const {
        const auto& b = prompt_block_;
        const auto& xs = x->value.shape();
        const auto q = b.q(ag::to_tokens(b.norm(x)));
        const auto a = ag::attention(q, b.k(prompt), b.v(prompt), b.heads);
        return ag::add(x, ag::from_tokens(b.out(a), xs[2], xs[3]));
    }

    NetConfig config_;
    ParamStore<T> params_;
    TimeMlp time_mlp_;
    ag::Var<T> prompt_table_;
    Linear<T> prompt_time_;
    ConvPyramid<T> reference_;
    ConvPyramid<T> guider_;
    Conv<T> conv_in_;
    std::vector<Conv<T>> down_, up_;
    std::vector<ResBlock<T>> enc_res_, dec_res_;
    ResBlock<T> mid_res_;
    PromptBlock<T> prompt_block_;
    std::vector<IdAttnBlock<T>> enc_id_, dec_id_;
    std::vector<TemporalBlock<T>> enc_temporal_, dec_temporal_;
    Norm<T> norm_out_;
    Conv<T> conv_out_;
};

// ---------------------------------------------------------------------------
// Assembling conditions from images, poses and masks

/// Stacks per-frame pyramids into the [F, h_l*w_l] weights of each attention level.
template <typename T>
void set_masks(Conditioning<T>& cond, const NetConfig& config, const std::vector<MaskPyramid>& frames) {
    cond.m1.assign(std::size_t(config.levels()), Tensor<T>());
    cond.m2.assign(std::size_t(config.levels()), Tensor<T>());
    for (std::size_t a = 0; a < config.attention_levels.size(); ++a) {
        const int l = config.attention_levels[a];
        std::vector<T> m1, m2;
        std::int64_t n = 0;
        for (const auto& pyr : frames) {
            require(a < pyr.levels.size(), ErrorKind::shape, "mask pyramid is missing attention levels");
            const auto& lvl = pyr.levels[a];
            n = lvl.m1.numel();
            m1.insert(m1.end(), lvl.m1.vec().begin(), lvl.m1.vec().end());
            m2.insert(m2.end(), lvl.m2.vec().begin(), lvl.m2.vec().end());
        }
        const auto f = std::int64_t(frames.size());
        cond.m1[l] = Tensor<T>({f, n}, std::move(m1));
        cond.m2[l] = Tensor<T>({f, n}, std::move(m2));
    }
}

/// Attention-level resolutions (in order of config.attention_levels) for an image of H x W.
inline std::vector<std::pair<int, int>> attention_resolutions(const NetConfig& config, int height, int width) {
    std::vector<std::pair<int, int>> out;
    for (int l : config.attention_levels) out.push_back(config.grid(l, height / 2, width / 2));
    return out;
}

/// Inputs that describe one clip to denoise.
struct ClipInputs {
    std::vector<Image> pose_maps;      // per frame, 3xHxW
    std::vector<RegionMasks> masks;    // per frame, HxW
    std::array<Image, 2> refs;         // reference images of ID 1 and ID 2
    std::optional<Image> background;   // nullopt: pure white
    std::string prompt;

    std::int64_t frames() const { return std::int64_t(pose_maps.size()); }

    ClipInputs slice(std::int64_t begin, std::int64_t end) const {
        ClipInputs out{{pose_maps.begin() + begin, pose_maps.begin() + end},
                       {masks.begin() + begin, masks.begin() + end}, refs, background, prompt};
        return out;
    }
};

/// Runs the condition encoders once; the result is reused across denoising steps.
template <typename T>
Conditioning<T> make_conditioning(const Denoiser<T>& net, const ClipInputs& in) {
    const auto& cfg = net.config();
    require(!in.pose_maps.empty() && in.pose_maps.size() == in.masks.size(), ErrorKind::shape,
            "clip has " + std::to_string(in.pose_maps.size()) + " pose maps and " + std::to_string(in.masks.size()) +
                " mask sets");
    const std::int64_t h = in.refs[0].dim(1), w = in.refs[0].dim(2);
    for (std::size_t f = 0; f < in.pose_maps.size(); ++f) {
        require(in.pose_maps[f].shape() == in.refs[0].shape(), ErrorKind::shape,
                "pose map " + std::to_string(f) + " is " + shape_str(in.pose_maps[f].shape()) +
                    " but reference is " + shape_str(in.refs[0].shape()));
        require(in.masks[f].height() == h && in.masks[f].width() == w, ErrorKind::shape,
                "mask " + std::to_string(f) + " resolution differs from the reference images");
    }
    Conditioning<T> cond;
    const std::array<Tensor<T>, 2> refs{in.refs[0].template cast<T>(), in.refs[1].template cast<T>()};
    cond.bank = net.encode_references(refs);
    std::vector<Tensor<T>> maps;
    for (const auto& m : in.pose_maps) maps.push_back(m.template cast<T>().reshaped({1, 3, h, w}));
    cond.pose = net.pose_guider_forward(ag::constant(concat0(maps)));
    std::vector<MaskPyramid> pyramids;
    const auto res = attention_resolutions(cfg, int(h), int(w));
    for (const auto& m : in.masks) pyramids.push_back(build_mask_pyramid(m, res));
    set_masks(cond, cfg, pyramids);
    cond.prompt = net.embed_prompt(in.prompt);
    const Latent bg = background_latent(in.background, int(h), int(w));
    cond.background = ag::constant(bg.template cast<T>().reshaped({1, bg.dim(0), bg.dim(1), bg.dim(2)}));
    return cond;
}

/// Conditions restricted to frames [begin, end) of an already-built clip conditioning.
template <typename T>
Conditioning<T> slice_frames(const Conditioning<T>& cond, std::int64_t begin, std::int64_t end) {
    Conditioning<T> out = cond;
    for (auto& p : out.pose) p = ag::constant(p->value.slice0(begin, end));
    for (auto* ms : {&out.m1, &out.m2})
        for (auto& m : *ms)
            if (!m.empty()) m = m.slice0(begin, end);
    return out;
}

}  // namespace duel
