#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "duel/train_loop.hpp"

using namespace duel;
namespace fs = std::filesystem;

namespace {

NetConfig tiny_net() {
    NetConfig c;
    c.channels = {8, 16};
    c.attention_levels = {1};
    c.temporal_levels = {0, 1};
    c.norm_groups = 4;
    c.time_dim = 16;
    c.prompt_width = 8;
    c.prompt_len = 4;
    c.prompt_vocab = 31;
    c.stem_channels = 4;
    return c;
}

struct Data {
    fs::path root;
    Dataset kff, fashion;
};

// Small forged sets shared by the tests in this file.
const Data& data() {
    static const Data d = [] {
        const fs::path root = fs::temp_directory_path() / ("duel_train_" + std::to_string(::getpid()));
        fs::remove_all(root);
        ForgeConfig fc;
        fc.n_videos = 6;
        fc.frames_per_video = 24;
        fc.width = 32;
        fc.height = 32;
        fc.seed = 3;
        forge_synthetic(fc, root / "kff");
        FashionConfig sc;
        sc.n_walkers = 4;
        sc.n_videos = 4;
        sc.frames_per_clip = 24;
        sc.width = 16;
        sc.height = 32;
        forge_fashion(sc, root / "fashion");
        return Data{root, Dataset(root / "kff"), Dataset(root / "fashion")};
    }();
    return d;
}

TrainConfig quick(int stage, std::int64_t steps) {
    TrainConfig c;
    c.stage = stage;
    c.steps = steps;
    c.mixture_ratio = 0.0;
    c.clip_len = 4;
    c.seed = 11;
    return c;
}

std::map<std::string, Tensor<float>> snapshot(const Denoiser<float>& net) {
    std::map<std::string, Tensor<float>> out;
    net.params().for_each([&](const std::string& n, const ag::Var<float>& p) { out[n] = p->value; });
    return out;
}

}  // namespace

TEST(Freeze, PartitionsParameters) {
    Denoiser<float> net(tiny_net());
    const auto names = net.params().names();
    for (int stage : {1, 2}) {
        const StagePolicy p = apply_freeze_policy(net.params(), stage);
        std::set<std::string> t(p.trainable.begin(), p.trainable.end()), f(p.frozen.begin(), p.frozen.end());
        EXPECT_EQ(t.size() + f.size(), names.size());
        for (const auto& n : names) EXPECT_NE(t.contains(n), f.contains(n)) << n;
        for (const auto& n : p.trainable) EXPECT_EQ(Denoiser<float>::group_of(n) == "temporal", stage == 2) << n;
        EXPECT_FALSE(p.trainable.empty());
        EXPECT_FALSE(p.frozen.empty());
    }
}

TEST(Freeze, UnknownGroupIsPolicyError) {
    ParamStore<float> store;
    store.add("mystery.w", Tensor<float>({2}));
    try {
        apply_freeze_policy(store, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::policy);
    }
    ParamStore<float> ok;
    ok.add("temporal.w", Tensor<float>({2}));
    EXPECT_THROW(apply_freeze_policy(ok, 3), Error);
}

TEST(Freeze, StagesLeaveFrozenBitsAlone) {
    Denoiser<float> net(tiny_net(), 1);
    AdaptiveOptimizer<float> opt;
    const auto schedule = make_schedule();
    TrainState state;
    const auto init = snapshot(net);
    train(net, opt, schedule, quick(1, 6), Sources{&data().kff}, state);
    const auto after1 = snapshot(net);
    int changed = 0;
    for (const auto& [n, v] : init) {
        if (Denoiser<float>::group_of(n) == "temporal")
            EXPECT_EQ(after1.at(n), v) << n;
        else
            changed += !(after1.at(n) == v);
    }
    EXPECT_GT(changed, 0);
    train(net, opt, schedule, quick(2, 4), Sources{&data().kff}, state);
    const auto after2 = snapshot(net);
    changed = 0;
    for (const auto& [n, v] : after1) {
        if (Denoiser<float>::group_of(n) != "temporal")
            EXPECT_EQ(after2.at(n), v) << n;
        else
            changed += !(after2.at(n) == v);
    }
    EXPECT_GT(changed, 0);
}

TEST(Mixture, EndpointsAndRatio) {
    const Sources src{&data().kff, &data().fashion};
    TrainConfig cfg = quick(1, 0);
    Rng rng = make_rng({21});
    int fashion = 0;
    for (int i = 0; i < 1000; ++i) fashion += next_batch(src, 0.5, 1, cfg, rng).source == "fashion";
    EXPECT_NEAR(fashion / 1000.0, 0.5, 0.05);
    for (int i = 0; i < 50; ++i) {
        EXPECT_EQ(next_batch(src, 0.0, 1, cfg, rng).source, "kff");
        const Batch b = next_batch(src, 1.0, 1, cfg, rng);
        EXPECT_EQ(b.source, "fashion");
        EXPECT_EQ(b.samples[0].source, "fashion");
    }
    try {
        next_batch(Sources{&data().kff}, 1.0, 1, cfg, rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::data);
    }
}

TEST(Mixture, IncrementalPoolJoinsLater) {
    const Sources src{&data().kff, nullptr, &data().fashion};
    TrainConfig cfg = quick(1, 0);
    Rng rng = make_rng({4});
    std::set<std::string> before, after;
    for (int i = 0; i < 60; ++i) before.insert(next_batch(src, 0.0, 1, cfg, rng, false).samples[0].video_id);
    for (int i = 0; i < 60; ++i) after.insert(next_batch(src, 0.0, 1, cfg, rng, true).samples[0].video_id);
    for (const auto& v : before) EXPECT_EQ(v[0], 'v');
    EXPECT_TRUE(std::any_of(after.begin(), after.end(), [](const std::string& v) { return v[0] == 'f'; }));
}

TEST(Checkpoint, ByteIdenticalRoundTrip) {
    Denoiser<float> net(tiny_net(), 5);
    AdaptiveOptimizer<float> opt;
    TrainState state;
    train(net, opt, make_schedule(), quick(1, 3), Sources{&data().kff}, state);
    Checkpoint meta;
    meta.net = net.config();
    meta.train = state;
    meta.extra = {{"note", "x"}};
    const fs::path p = data().root / "a.ckpt";
    save_checkpoint(p, meta, net, &opt);
    const auto loaded = load_checkpoint(p);
    EXPECT_EQ(loaded.meta.train, state);
    EXPECT_EQ(loaded.meta.net, net.config());
    ASSERT_TRUE(loaded.optimizer.has_value());
    EXPECT_EQ(loaded.optimizer->step_count(), 3);
    EXPECT_EQ(checkpoint_bytes(loaded.meta, loaded.net, &*loaded.optimizer), read_text(p));
    EXPECT_FALSE(fs::exists(p.string() + ".tmp"));

    std::string bytes = read_text(p);
    bytes[0] = 'X';
    EXPECT_THROW(parse_checkpoint(bytes), Error);
    EXPECT_THROW(parse_checkpoint(read_text(p).substr(0, 200)), Error);
}

TEST(Train, ResumeMatchesUnbrokenRun) {
    const auto schedule = make_schedule();
    const Sources src{&data().kff, &data().fashion};
    TrainConfig cfg = quick(1, 10);
    cfg.mixture_ratio = 0.5;

    Denoiser<float> a(tiny_net(), 2);
    AdaptiveOptimizer<float> oa;
    TrainState sa;
    const auto full = train(a, oa, schedule, cfg, src, sa);

    Denoiser<float> b(tiny_net(), 2);
    AdaptiveOptimizer<float> ob;
    TrainState sb;
    TrainConfig half = cfg;
    half.steps = 4;
    auto trace = train(b, ob, schedule, half, src, sb);
    Checkpoint meta;
    meta.net = b.config();
    meta.train = sb;
    const fs::path p = data().root / "resume.ckpt";
    save_checkpoint(p, meta, b, &ob);
    auto loaded = load_checkpoint(p);
    const auto rest = train(loaded.net, *loaded.optimizer, schedule, cfg, src, loaded.meta.train);
    trace.insert(trace.end(), rest.begin(), rest.end());

    ASSERT_EQ(trace.size(), full.size());
    for (std::size_t i = 0; i < full.size(); ++i) {
        EXPECT_EQ(trace[i].loss, full[i].loss) << i;
        EXPECT_EQ(trace[i].source, full[i].source);
        EXPECT_EQ(trace[i].step, std::int64_t(i));
    }
    EXPECT_EQ(snapshot(loaded.net), snapshot(a));
}

TEST(Train, SmokeLossDrops) {
    Denoiser<float> net(tiny_net(), 7);
    AdaptiveOptimizer<float> opt;
    TrainState state;
    const auto trace = train(net, opt, make_schedule(), quick(1, 200), Sources{&data().kff}, state);
    std::vector<double> l;
    for (const auto& r : trace) l.push_back(r.loss);
    const double first = mean_of(l, 0, 20), last = mean_of(l, l.size() - 20, l.size());
    EXPECT_LT(last, 0.8 * first) << first << " -> " << last;
    EXPECT_NEAR(state.initial_loss, first, 1e-12);
}

TEST(Train, DivergenceGuard) {
    TrainConfig cfg = quick(1, 0);
    TrainState st;
    for (int i = 0; i < 20; ++i) observe_loss(st, 1.0, cfg, i);
    EXPECT_EQ(st.initial_loss, 1.0);
    // 99 high steps, one reset, then 99 more: no abort
    for (int i = 0; i < 99; ++i) observe_loss(st, 11.0, cfg, 20 + i);
    observe_loss(st, 10.0, cfg, 119);
    EXPECT_EQ(st.above_guard, 0);
    for (int i = 0; i < 99; ++i) observe_loss(st, 11.0, cfg, 120 + i);
    try {
        observe_loss(st, 11.0, cfg, 219);
        FAIL() << "guard did not fire";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::divergence);
        EXPECT_NE(std::string(e.what()).find("step 219"), std::string::npos) << e.what();
    }
    TrainState fresh;
    EXPECT_THROW(observe_loss(fresh, std::nan(""), cfg, 0), Error);
}

TEST(Train, ConfigAndTrace) {
    TrainConfig c = finetune_preset(1);
    EXPECT_EQ(c.optimizer.learning_rate, 2e-6);
    EXPECT_EQ(c.frame_interval, 6);
    const auto back = train_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(train_config_from_json({{"steps", 5}}).steps, 5);
    EXPECT_THROW(train_config_from_json({{"stepz", 5}}), Error);
    EXPECT_THROW(train_config_from_json({{"mixture_ratio", 1.5}}), Error);

    const fs::path p = data().root / "trace.csv";
    std::string text = trace_csv_header();
    text += trace_csv_row({1, 0, 0.5, "kff"});
    text += trace_csv_row({2, 7, 0.125, "fashion"});
    write_text_atomic(p, text);
    const auto rows = read_trace_csv(p);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1].step, 7);
    EXPECT_EQ(rows[1].loss, 0.125);
    EXPECT_EQ(rows[1].source, "fashion");
}
