#include <gtest/gtest.h>

#include <filesystem>

#include "duel/data_forge.hpp"

using namespace duel;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("duel_forge_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_text(e.path());
    return out;
}

ForgeConfig small_config(int videos, int frames) {
    ForgeConfig c;
    c.n_videos = videos;
    c.frames_per_video = frames;
    c.seed = 7;
    return c;
}

void expect_kind(ErrorKind kind, const std::function<void()>& fn) {
    try {
        fn();
        ADD_FAILURE() << "expected " << kind_name(kind);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

}  // namespace

TEST(Forge, ConfigValidation) {
    ForgeConfig c;
    c.width = 127;
    expect_kind(ErrorKind::parameter, [&] { c.validate(); });
    c = ForgeConfig{};
    c.n_actions = 9;
    expect_kind(ErrorKind::parameter, [&] { c.validate(); });
    c = ForgeConfig{};
    const auto back = forge_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    expect_kind(ErrorKind::schema, [] { forge_config_from_json({{"videos", 3}}); });
}

TEST(Forge, IdentityColorsDistinctAndGrayEquidistant) {
    const auto ids = identity_table(16);
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = i + 1; j < ids.size(); ++j) EXPECT_NE(ids[i].color, ids[j].color);
    for (int g : {51, 128, 217}) {
        std::vector<double> d;
        for (const auto& id : ids) {
            double s = 0;
            for (int c = 0; c < 3; ++c) s += (id.color[c] - g) * (id.color[c] - g);
            d.push_back(std::sqrt(s));
        }
        const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
        EXPECT_LT(*hi - *lo, 2.0) << "gray " << g;
    }
}

TEST(Forge, SmallDatasetContract) {
    const fs::path root = scratch("small");
    const auto entries = forge_synthetic(small_config(2, 8), root);
    ASSERT_EQ(entries.size(), 2u);
    const auto loaded = load_manifest(root);
    ASSERT_EQ(loaded.size(), 2u);
    for (const auto& e : loaded) {
        const VideoData v = load_video(root, e);
        EXPECT_EQ(v.poses.frames.size(), 8u);
        EXPECT_EQ(v.frames.size(), 8u);
        EXPECT_EQ(v.refs[0].width, 128);
        EXPECT_EQ(v.refs[1].height, 96);
        EXPECT_NE(e.characters[0], e.characters[1]);
        EXPECT_EQ(e.prompt(), e.action + " in " + e.scene);
        for (const auto& f : v.poses.frames) EXPECT_EQ(f.people.size(), 2u);
    }
    fs::remove_all(root);
}

TEST(Forge, ByteIdenticalTrees) {
    const fs::path a = scratch("a"), b = scratch("b");
    forge_synthetic(small_config(3, 6), a);
    forge_synthetic(small_config(3, 6), b);
    const auto ta = tree_bytes(a), tb = tree_bytes(b);
    EXPECT_EQ(ta.size(), 3u * (6 + 4) + 1);
    EXPECT_TRUE(ta == tb);
    fs::remove_all(a);
    fs::remove_all(b);
}

// Every drawn pixel of a fighter should fall inside that fighter's pose box.
TEST(Forge, SilhouettesInsidePoseBoxes) {
    ForgeConfig cfg = small_config(16, 48);
    for (const auto& plan : plan_videos(cfg)) {
        const Clip clip = forge_clip(cfg, plan);
        for (std::size_t f = 0; f < clip.frames.size(); ++f)
            for (int p = 0; p < 2; ++p) {
                const auto box = bbox_mask(clip.poses.frames[f].people[p], cfg.width, cfg.height);
                std::int64_t drawn = 0, inside = 0;
                for (std::size_t i = 0; i < clip.silhouettes[f][p].size(); ++i)
                    if (clip.silhouettes[f][p][i]) {
                        ++drawn;
                        inside += box[std::int64_t(i)] > 0;
                    }
                ASSERT_GT(drawn, 0);
                EXPECT_GE(double(inside) / drawn, 0.95) << plan.video_id << " frame " << f << " person " << p;
            }
    }
}

TEST(Forge, PoseMapsOverlapSilhouettes) {
    ForgeConfig cfg = small_config(16, 48);
    const Topology topo = topology_by_name("body18");
    double worst = 1.0;
    for (const auto& plan : plan_videos(cfg)) {
        const Clip clip = forge_clip(cfg, plan);
        for (std::size_t f = 0; f < clip.frames.size(); ++f)
            for (int p = 0; p < 2; ++p) {
                RgbImage map(cfg.width, cfg.height);
                draw_person(map, clip.poses.frames[f].people[p], topo, {});
                std::int64_t inter = 0, uni = 0;
                for (std::size_t i = 0; i < clip.silhouettes[f][p].size(); ++i) {
                    const bool a = clip.silhouettes[f][p][i] != 0;
                    const std::uint8_t* px = map.pixels.data() + 3 * i;
                    const bool b = px[0] || px[1] || px[2];
                    inter += a && b;
                    uni += a || b;
                }
                worst = std::min(worst, double(inter) / double(uni));
            }
    }
    EXPECT_GE(worst, 0.5);
}

TEST(Forge, GroundTruthColorsInExclusiveRegions) {
    // mean color of each fighter's exclusive box region is nearest its own color
    ForgeConfig cfg = small_config(8, 12);
    for (const auto& plan : plan_videos(cfg)) {
        const Clip clip = forge_clip(cfg, plan);
        for (std::size_t f = 0; f < clip.frames.size(); ++f) {
            const auto m = build_region_masks(clip.poses.frames[f], cfg.width, cfg.height);
            for (int p = 0; p < 2; ++p) {
                const auto& mine = m.of(p + 1);
                const auto& other = m.of(2 - p);
                double sum[3] = {0, 0, 0};
                int n = 0;
                for (int y = 0; y < cfg.height; ++y)
                    for (int x = 0; x < cfg.width; ++x)
                        if (mine.at(y, x) == 1.0 && other.at(y, x) == 0.0) {
                            ++n;
                            for (int c = 0; c < 3; ++c) sum[c] += clip.frames[f].at(x, y)[c];
                        }
                if (n == 0) continue;
                auto dist = [&](const Rgb& a) {
                    double s = 0;
                    for (int c = 0; c < 3; ++c) s += (sum[c] / n - a[c]) * (sum[c] / n - a[c]);
                    return s;
                };
                EXPECT_LT(dist(plan.fighters[p].identity.color), dist(plan.fighters[1 - p].identity.color));
            }
        }
    }
}

TEST(Splice, ShapeContract) {
    FashionConfig fc;
    const Clip a = forge_walker(fc, 0, 10), b = forge_walker(fc, 1, 12);
    const Clip s = splice_fashion(a, b);
    ASSERT_EQ(s.frames.size(), 10u);
    EXPECT_EQ(s.frames[0].width, 128);
    EXPECT_EQ(s.frames[0].height, 96);
    EXPECT_EQ(s.poses.width, 128);
    for (std::size_t f = 0; f < 10; ++f) {
        ASSERT_EQ(s.poses.frames[f].people.size(), 2u);
        EXPECT_EQ(s.poses.frames[f].people[0].id_index, 1);
        EXPECT_EQ(s.poses.frames[f].people[1].id_index, 2);
        for (std::size_t k = 0; k < 18; ++k) {
            EXPECT_EQ(s.poses.frames[f].people[1].keypoints[k].x, b.poses.frames[f].people[0].keypoints[k].x + 64);
            EXPECT_EQ(s.poses.frames[f].people[0].keypoints[k], a.poses.frames[f].people[0].keypoints[k]);
        }
    }
}

TEST(Splice, ShiftArithmetic) {
    FashionConfig fc;
    Clip a = forge_walker(fc, 0, 1), b = forge_walker(fc, 1, 1);
    b.poses.frames[0].people[0].keypoints[0].x = 5;
    EXPECT_EQ(splice_fashion(a, b).poses.frames[0].people[1].keypoints[0].x, 69);
}

TEST(Splice, SelfSpliceHalvesIdentical) {
    FashionConfig fc;
    const Clip a = forge_walker(fc, 3, 6);
    const Clip s = splice_fashion(a, a);
    for (const auto& img : s.frames)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < 64; ++x)
                for (int c = 0; c < 3; ++c) ASSERT_EQ(img.at(x, y)[c], img.at(x + 64, y)[c]);
    for (std::size_t f = 0; f < s.frames.size(); ++f)
        for (int y = 0; y < 96; ++y)
            for (int x = 0; x < 64; ++x)
                for (int c = 0; c < 3; ++c) ASSERT_EQ(s.frames[f].at(x, y)[c], a.frames[f].at(x, y)[c]);
}

TEST(Splice, HeightMismatch) {
    FashionConfig fc;
    const Clip a = forge_walker(fc, 0, 2);
    fc.height = 64;
    const Clip b = forge_walker(fc, 1, 2);
    expect_kind(ErrorKind::shape, [&] { splice_fashion(a, b); });
}

TEST(Splice, FashionDataset) {
    const fs::path root = scratch("fashion");
    FashionConfig fc;
    fc.n_walkers = 4;
    fc.n_videos = 3;
    fc.frames_per_clip = 6;
    const auto entries = forge_fashion(fc, root);
    ASSERT_EQ(entries.size(), 3u);
    Dataset ds(root);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(ds.entries()[i].source, "fashion");
        EXPECT_NE(ds.entries()[i].characters[0], ds.entries()[i].characters[1]);
        EXPECT_EQ(ds.video(i).frames[0].width, 128);
    }
    EXPECT_TRUE(fs::exists(root / "walkers" / "w0000" / "poses.json"));
    fs::remove_all(root);
}

TEST(Loader, StagesAndErrors) {
    const fs::path root = scratch("loader");
    forge_synthetic(small_config(2, 48), root);
    Dataset ds(root);
    Rng rng = make_rng({5});
    const auto s1 = ds.sample(0, 1, 6, 20, rng);
    EXPECT_EQ(s1.x0.shape(), (Shape{1, 12, 48, 64}));
    EXPECT_EQ(s1.inputs.frames(), 1);
    EXPECT_EQ(s1.frame_indices[0] % 6, 0);
    EXPECT_EQ(s1.inputs.refs[1].shape(), (Shape{3, 96, 128}));
    EXPECT_TRUE(s1.inputs.background.has_value());
    EXPECT_EQ(s1.inputs.prompt, ds.entries()[0].prompt());
    try {
        ds.sample(0, 2, 6, 20, rng);
        ADD_FAILURE();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::sampling);
        EXPECT_NE(std::string(e.what()).find("v0000"), std::string::npos);
    }
    const auto s2 = ds.sample(1, 2, 2, 20, rng);
    EXPECT_EQ(s2.x0.dim(0), 20);
    EXPECT_EQ(s2.inputs.masks.size(), 20u);
    for (std::size_t k = 1; k < s2.frame_indices.size(); ++k)
        EXPECT_EQ(s2.frame_indices[k] - s2.frame_indices[k - 1], 2);

    Rng r1 = make_rng({9}), r2 = make_rng({9});
    const auto a = load_sample(root, ds.entries()[1], 2, 2, 20, r1);
    const auto b = ds.sample(1, 2, 2, 20, r2);
    EXPECT_EQ(a.frame_indices, b.frame_indices);
    EXPECT_EQ(a.x0, b.x0);
    fs::remove_all(root);
}

TEST(Loader, ManifestValidation) {
    const fs::path root = scratch("manifest");
    forge_synthetic(small_config(1, 2), root);
    fs::remove(root / "v0000" / "ref_2.png");
    expect_kind(ErrorKind::data, [&] { load_manifest(root); });
    write_text_atomic(root / "manifest.json", "[{\"video_id\": 3}]");
    expect_kind(ErrorKind::schema, [&] { load_manifest(root); });
    write_text_atomic(root / "manifest.json", "[");
    expect_kind(ErrorKind::parse, [&] { load_manifest(root); });
    fs::remove_all(root);
}
