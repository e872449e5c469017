#include <gtest/gtest.h>

#include <map>
#include <numeric>

#include "duel/denoiser.hpp"
#include "oracles.hpp"

using namespace duel;
using ag::Var;

namespace {

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
Tensor<T> run_id_attn(const oracle::IdAttnCase<T>& c) {
    ag::NoGradGuard ng;
    return id_attn_forward(c.layer, ag::constant(c.x), ag::constant(c.r1), ag::constant(c.r2), c.m1, c.m2)->value;
}

ClipInputs small_inputs(int frames, std::uint64_t seed, int H = 32, int W = 32) {
    Rng rng = make_rng({seed, 7});
    ClipInputs in;
    for (int f = 0; f < frames; ++f) {
        in.pose_maps.push_back(uniform_tensor<float>({3, H, W}, rng, 1.0));
        RegionMasks m{Tensor<double>({H, W}), Tensor<double>({H, W})};
        for (int y = 0; y < H / 2; ++y)
            for (int x = 0; x < W / 2; ++x) m.m1.at(y, x) = 1;
        for (int y = H / 2; y < H; ++y)
            for (int x = W / 2; x < W; ++x) m.m2.at(y, x) = 1;
        in.masks.push_back(m);
    }
    in.refs = {uniform_tensor<float>({3, H, W}, rng, 1.0), uniform_tensor<float>({3, H, W}, rng, 1.0)};
    in.prompt = "punch in arena";
    return in;
}

}  // namespace

TEST(MaskAttn, EqualLogitsGiveColumnMean) {
    Tensor<double> q({3, 4}), k({5, 4});
    for (int j = 0; j < 5; ++j) k.at(j, 0) = 1.0 + j;  // q orthogonal to k: all logits zero
    for (int i = 0; i < 3; ++i) q.at(i, 1) = 2.0 + i;
    Rng rng = make_rng({1});
    const auto v = normal_tensor<double>({5, 3}, rng);
    const std::vector<double> mask(3, 1.0);
    const auto out = mask_attn<double>(q, k, v, mask);
    for (int i = 0; i < 3; ++i)
        for (int e = 0; e < 3; ++e) {
            double mean = 0;
            for (int j = 0; j < 5; ++j) mean += v.at(j, e) / 5;
            EXPECT_NEAR(out.at(i, e), mean, 1e-12);
        }
}

TEST(MaskAttn, SingleKeyAndRowSums) {
    Rng rng = make_rng({2});
    const auto q = normal_tensor<double>({4, 6}, rng);
    const auto k1 = normal_tensor<double>({1, 6}, rng);
    const auto v1 = normal_tensor<double>({1, 2}, rng);
    const std::vector<double> mask(4, 0.5);
    const auto out = mask_attn<double>(q, k1, v1, mask);
    for (int i = 0; i < 4; ++i)
        for (int e = 0; e < 2; ++e) EXPECT_DOUBLE_EQ(out.at(i, e), v1.at(0, e));
    Tensor<double> probs;
    const auto k = normal_tensor<double>({1, 7, 6}, rng);
    ag::attention_forward(q.reshaped({1, 4, 6}), k, normal_tensor<double>({1, 7, 6}, rng), 2, &probs);
    for (std::int64_t r = 0; r < probs.numel() / 7; ++r) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += probs[r * 7 + j];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
    EXPECT_THROW(mask_attn<double>(q, normal_tensor<double>({3, 5}, rng), v1, mask), Error);
}

TEST(IdAttn, MatchesBruteForce) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto c = oracle::random_id_attn_case<double>(s);
        EXPECT_LE(max_abs_diff(run_id_attn(c), oracle::id_attention(c.layer, c.x, c.r1, c.r2, c.m1, c.m2)), 1e-9);
    }
}

TEST(IdAttn, Endpoints) {
    auto c = oracle::random_id_attn_case<double>(42);
    ag::NoGradGuard ng;
    const auto x = ag::constant(c.x);
    const auto q = c.layer.q(x);
    const auto self = ag::attention(q, c.layer.k_self(x), c.layer.v_self(x), 2)->value;
    const auto r1 = ag::constant(c.r1);
    const auto cross = ag::attention(q, c.layer.k_ref(r1), c.layer.v_ref(r1), 2)->value;
    c.m1.fill(0);
    c.m2.fill(0);
    EXPECT_LE(max_abs_diff(run_id_attn(c), self), 1e-12);
    c.m1.fill(1);
    EXPECT_LE(max_abs_diff(run_id_attn(c), cross), 1e-12);
}

TEST(IdAttn, LocalityConvexityAndRelabel) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        auto c = oracle::random_id_attn_case<float>(100 + s);
        const auto base = run_id_attn(c);
        auto moved = c;
        Rng rng = make_rng({s, 3});
        for (auto& v : moved.r2.vec()) v += float(std::normal_distribution<double>(0, 1)(rng));
        const auto out = run_id_attn(moved);
        const std::int64_t ch = c.x.dim(2);
        for (std::int64_t t = 0; t < c.m2.numel(); ++t)
            if (c.m2[t] == 0) {
                for (std::int64_t e = 0; e < ch; ++e) EXPECT_LE(std::abs(out[t * ch + e] - base[t * ch + e]), 1e-6f);
            }

        auto swapped = c;
        std::swap(swapped.r1, swapped.r2);
        std::swap(swapped.m1, swapped.m2);
        EXPECT_EQ(run_id_attn(swapped), base);
    }
    const auto c = oracle::random_id_attn_case<double>(7);
    ag::NoGradGuard ng;
    const auto x = ag::constant(c.x);
    const auto q = c.layer.q(x);
    const auto parts = {
        ag::attention(q, c.layer.k_ref(ag::constant(c.r1)), c.layer.v_ref(ag::constant(c.r1)), 2)->value,
        ag::attention(q, c.layer.k_ref(ag::constant(c.r2)), c.layer.v_ref(ag::constant(c.r2)), 2)->value,
        ag::attention(q, c.layer.k_self(x), c.layer.v_self(x), 2)->value};
    const auto out = run_id_attn(c);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double lo = 1e300, hi = -1e300;
        for (const auto& p : parts) lo = std::min(lo, p[i]), hi = std::max(hi, p[i]);
        EXPECT_GE(out[i], lo - 1e-12);
        EXPECT_LE(out[i], hi + 1e-12);
    }
}

TEST(Denoiser, ReferenceEncoder) {
    Denoiser<double> net(oracle::gradcheck_config(), 1);
    Rng rng = make_rng({3});
    const auto img = uniform_tensor<double>({3, 32, 32}, rng, 1.0);
    ag::NoGradGuard ng;
    const std::array<Tensor<double>, 2> same{img, img};
    const auto bank = net.encode_references(same);
    const auto& lv = bank.levels[1]->value;
    EXPECT_EQ(lv.shape(), (Shape{2, 16, 8, 8}));
    EXPECT_EQ(lv.slice0(0, 1).vec(), lv.slice0(1, 2).vec());
    auto other = img;
    other[5] += 0.5;
    const std::array<Tensor<double>, 2> diff{img, other};
    const auto bank2 = net.encode_references(diff);
    EXPECT_EQ(bank2.levels[1]->value.slice0(0, 1).vec(), lv.slice0(0, 1).vec());
    EXPECT_NE(bank2.levels[1]->value.slice0(1, 2).vec(), lv.slice0(1, 2).vec());
    EXPECT_FALSE(bank.levels[0]);
    const std::array<Tensor<double>, 1> one{img};
    try {
        net.encode_references(one);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::arity);
    }
}

TEST(Denoiser, PoseGuiderZeroInitThenLearns) {
    NetConfig cfg = oracle::gradcheck_config();
    Denoiser<float> net(cfg, 2);
    auto in = small_inputs(1, 4);
    const auto black = ag::constant(Tensor<float>({1, 3, 32, 32}, -1.0f));
    const auto white = ag::constant(Tensor<float>({1, 3, 32, 32}, 1.0f));
    {
        ag::NoGradGuard ng;
        const auto res = net.pose_guider_forward(black);
        EXPECT_EQ(int(res.size()), cfg.levels());
        for (const auto& r : res)
            for (float v : r->value.vec()) EXPECT_EQ(v, 0.0f);
        // Output independent of the pose map at init.
        Rng rng = make_rng({5});
        const auto z = ag::constant(normal_tensor<float>({1, 12, 16, 16}, rng));
        auto c1 = make_conditioning(net, in);
        const auto e1 = net.predict_noise(z, 500, c1, 0.08)->value;
        in.pose_maps[0] = Tensor<float>({3, 32, 32}, 0.3f);
        const auto e2 = net.predict_noise(z, 500, make_conditioning(net, in), 0.08)->value;
        EXPECT_EQ(e1, e2);
    }
    // The zero output convolution absorbs the first update; from the second on
    // the guider's projections receive gradient.
    AdaptiveOptimizer<float> opt;
    Rng rng = make_rng({6});
    for (int step = 0; step < 2; ++step) {
        net.params().zero_grad();
        const auto cond = make_conditioning(net, in);
        const auto z = normal_tensor<float>({1, 12, 16, 16}, rng);
        ag::backward(ag::mse(net.predict_noise(ag::constant(z), 300, cond, 0.3), normal_tensor<float>(z.shape(), rng)));
        opt.step(net.params());
    }
    ag::NoGradGuard ng;
    EXPECT_NE(net.pose_guider_forward(black)[0]->value, net.pose_guider_forward(white)[0]->value);
}

TEST(Denoiser, TemporalLayer) {
    Denoiser<double> net(oracle::gradcheck_config(), 3);
    Rng rng = make_rng({7});
    ag::NoGradGuard ng;
    const auto one = normal_tensor<double>({1, 8, 4, 4}, rng);
    EXPECT_EQ(net.temporal_forward(0, false, ag::constant(one))->value, one);
    net.perturb(8, 0.2);
    // Spatial permutation (a transpose of the square grid) commutes.
    const auto x = normal_tensor<double>({3, 8, 4, 4}, rng);
    auto transpose = [](const Tensor<double>& t) {
        Tensor<double> o(t.shape());
        for (std::int64_t f = 0; f < t.dim(0); ++f)
            for (std::int64_t c = 0; c < t.dim(1); ++c)
                for (std::int64_t y = 0; y < 4; ++y)
                    for (std::int64_t xx = 0; xx < 4; ++xx) o.at(f, c, y, xx) = t.at(f, c, xx, y);
        return o;
    };
    const auto a = transpose(net.temporal_forward(0, false, ag::constant(x))->value);
    const auto b = net.temporal_forward(0, false, ag::constant(transpose(x)))->value;
    EXPECT_LE(max_abs_diff(a, b), 1e-12);
    // Frame-constant input stays frame-constant.
    Tensor<double> rep({3, 8, 4, 4});
    for (std::int64_t f = 0; f < 3; ++f) std::copy_n(one.data(), one.numel(), rep.data() + f * one.numel());
    const auto out = net.temporal_forward(0, true, ag::constant(rep))->value;
    EXPECT_NE(out.slice0(0, 1).vec(), one.vec());
    EXPECT_LE(max_abs_diff(out.slice0(0, 1), out.slice0(2, 3)), 1e-12);
}

TEST(Denoiser, PromptEmbedding) {
    Denoiser<float> net(NetConfig{}, 4);
    ag::NoGradGuard ng;
    const auto empty = net.embed_prompt("");
    EXPECT_EQ(empty.tokens->value, net.embed_prompt("").tokens->value);
    const auto ids = prompt_ids("", 509, 32);
    EXPECT_TRUE(std::all_of(ids.begin(), ids.end(), [](auto i) { return i == 509; }));
    EXPECT_NE(net.embed_prompt("city night").tokens->value, net.embed_prompt("desert noon").tokens->value);
    EXPECT_EQ(prompt_ids("Kick  IN dojo", 509, 32), prompt_ids("kick in dojo", 509, 32));
    // Toy vocabulary hashes to distinct rows.
    std::set<std::int64_t> rows;
    const std::vector<std::string> words = {"punch", "kick", "dodge", "block", "uppercut", "sweep", "jump", "step",
                                            "walk", "in", "dojo", "arena", "city", "night", "desert", "noon",
                                            "studio", "rooftop", "temple", "street"};
    for (const auto& w : words) rows.insert(prompt_ids(w, 509, 1)[0]);
    EXPECT_EQ(rows.size(), words.size());
}

TEST(Denoiser, ForwardShapeAndDeterminism) {
    Denoiser<float> net(oracle::gradcheck_config(), 5);
    net.perturb(1, 0.02);
    const auto in = small_inputs(3, 9);
    Rng rng = make_rng({10});
    const auto z = ag::constant(normal_tensor<float>({3, 12, 16, 16}, rng));
    ag::NoGradGuard ng;
    const auto cond = make_conditioning(net, in);
    const auto a = net.predict_noise(z, 250, cond, 0.4)->value;
    EXPECT_EQ(a.shape(), z->value.shape());
    EXPECT_EQ(a, net.predict_noise(z, 250, cond, 0.4)->value);
    EXPECT_EQ(a, net.predict_noise(z, 250, make_conditioning(net, in), 0.4)->value);
    EXPECT_THROW(net.predict_noise(ag::constant(normal_tensor<float>({3, 12, 12, 12}, rng)), 1, cond, 0.99), Error);
    auto bad = in;
    bad.pose_maps[1] = Image({3, 32, 16});
    EXPECT_THROW(make_conditioning(net, bad), Error);
}

TEST(Denoiser, OutputHeads) {
    const auto in = small_inputs(2, 3);
    Rng rng = make_rng({12});
    const auto z = ag::constant(normal_tensor<float>({2, 12, 16, 16}, rng));
    std::map<std::string, Tensor<float>> out;
    for (const std::string head : {"eps", "v", "x0"}) {
        NetConfig c = oracle::gradcheck_config();
        c.head = head;
        Denoiser<float> net(c, 5);
        net.perturb(1, 0.05);
        ag::NoGradGuard ng;
        out[head] = net.predict_noise(z, 250, make_conditioning(net, in), 0.36)->value;
        if (head != "eps") EXPECT_THROW(net.predict_noise(z, 250, make_conditioning(net, in)), Error);
    }
    for (std::int64_t i = 0; i < z->value.numel(); ++i) {
        const double r = out["eps"][i], zt = z->value[i];
        EXPECT_NEAR(out["v"][i], 0.6 * r + 0.8 * zt, 1e-5);
        EXPECT_NEAR(out["x0"][i], (zt - 0.6 * r) / 0.8, 1e-5);
    }
    NetConfig bad = oracle::gradcheck_config();
    bad.head = "score";
    EXPECT_THROW(bad.validate(), Error);
}

TEST(Denoiser, FiniteDifferenceGradients) {
    const auto res = oracle::denoiser_gradcheck(11, 0.0005, 3);
    for (const auto& [group, err] : res.max_rel_error) EXPECT_LT(err, 1e-5) << group;
    EXPECT_EQ(res.max_rel_error.size(), 7u);
}

TEST(NetConfig, JsonRoundTrip) {
    NetConfig c = oracle::gradcheck_config();
    nlohmann::json j = c;
    EXPECT_EQ(j.get<NetConfig>(), c);
    j["bogus"] = 1;
    EXPECT_THROW(j.get<NetConfig>(), Error);
}
