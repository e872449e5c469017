#include <gtest/gtest.h>

#include <random>
#include <set>

#include "duel/nn.hpp"
#include "duel/pose_kit.hpp"

using namespace duel;

namespace {

PersonPose random_person(int id, Rng& rng, double cx = 60, double cy = 50, double spread = 20) {
    std::normal_distribution<double> n(0.0, spread);
    PersonPose p{id, {}};
    for (int j = 0; j < 18; ++j) p.keypoints.push_back({cx + n(rng), cy + n(rng), 0.9});
    return p;
}

PoseSequence random_sequence(Rng& rng, int frames) {
    PoseSequence seq;
    seq.width = 128;
    seq.height = 96;
    std::uniform_real_distribution<double> conf(0.0, 1.0);
    for (int f = 0; f < frames; ++f) {
        PoseFrame fr;
        for (int id : {1, 2}) {
            auto p = random_person(id, rng, id == 1 ? 40 : 90);
            for (auto& k : p.keypoints) k.confidence = conf(rng);
            fr.people.push_back(p);
        }
        seq.frames.push_back(fr);
    }
    return seq;
}

int expect_error(ErrorKind kind, const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
        return 1;
    }
    ADD_FAILURE() << "expected " << kind_name(kind) << " error";
    return 0;
}

}  // namespace

TEST(PoseJson, EmptyFrames) {
    const auto seq = parse_pose_sequence(R"({"fps":24,"width":64,"height":48,"topology":"body18","frames":[]})");
    EXPECT_TRUE(seq.frames.empty());
    EXPECT_EQ(seq.width, 64);
}

TEST(PoseJson, RoundTrip) {
    Rng rng = make_rng({1});
    for (int trial = 0; trial < 20; ++trial) {
        const auto seq = random_sequence(rng, 3);
        const auto back = parse_pose_sequence(serialize_pose_sequence(seq));
        EXPECT_EQ(back, seq);
        EXPECT_EQ(serialize_pose_sequence(back), serialize_pose_sequence(seq));
    }
}

TEST(PoseJson, SchemaErrors) {
    nlohmann::json doc = {{"fps", 24}, {"width", 64}, {"height", 48}, {"topology", "body18"}};
    nlohmann::json kps = nlohmann::json::array();
    for (int j = 0; j < 17; ++j) kps.push_back({1.0, 2.0, 0.5});
    doc["frames"] = {{{"people", {{{"id", 1}, {"keypoints", kps}}}}}};
    try {
        parse_pose_sequence(doc.dump());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::schema);
        EXPECT_NE(std::string(e.what()).find("frame 0"), std::string::npos) << e.what();
    }
    kps.push_back({1.0, 2.0, 0.5});
    doc["frames"] = {{{"people", {{{"id", 3}, {"keypoints", kps}}}}}};
    expect_error(ErrorKind::schema, [&] { parse_pose_sequence(doc.dump()); });
    doc["frames"] = {{{"people", {{{"id", 1}, {"keypoints", kps}}, {{"id", 1}, {"keypoints", kps}}}}}};
    expect_error(ErrorKind::schema, [&] { parse_pose_sequence(doc.dump()); });
    expect_error(ErrorKind::parse, [] { parse_pose_sequence("{\"fps\": 24,"); });
}

TEST(PoseJson, Topologies) {
    EXPECT_EQ(topology_by_name("body18").joints, 18);
    EXPECT_EQ(topology_by_name("body18").limbs.size(), 17u);
    const auto full = topology_by_name("body18+hands+feet");
    EXPECT_GT(full.joints, 18);
    for (auto [a, b] : full.limbs) {
        EXPECT_LT(a, full.joints);
        EXPECT_LT(b, full.joints);
    }
    expect_error(ErrorKind::schema, [] { topology_by_name("coco17"); });
}

TEST(Rasterize, BlankWhenNothingVisible) {
    Rng rng = make_rng({2});
    PoseFrame fr{{random_person(1, rng)}};
    for (auto& k : fr.people[0].keypoints) k.confidence = 0;
    const auto img = rasterize_pose(fr, 32, 24);
    for (auto v : img.pixels) EXPECT_EQ(v, 0);
}

TEST(Rasterize, HorizontalSegmentMatchesBruteForce) {
    PersonPose p{1, std::vector<Keypoint>(18)};
    p.keypoints[neck] = {10, 10, 1};
    p.keypoints[r_shoulder] = {20, 10, 1};
    const auto img = rasterize_pose({{p}}, 32, 32, {1.0, {}});
    // Pixels whose centre lies within 0.5 of the segment (10,10)-(20,10).
    std::set<std::pair<int, int>> oracle;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const double cx = std::clamp(double(x), 10.0, 20.0);
            if ((cx - x) * (cx - x) + (10.0 - y) * (10.0 - y) <= 0.25) oracle.insert({x, y});
        }
    ASSERT_EQ(oracle.size(), 11u);
    std::set<std::pair<int, int>> drawn;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const auto* px = img.at(x, y);
            if (px[0] || px[1] || px[2]) drawn.insert({x, y});
        }
    EXPECT_EQ(drawn, oracle);
}

TEST(Rasterize, ClipsOffCanvas) {
    PersonPose p{1, std::vector<Keypoint>(18)};
    p.keypoints[neck] = {-5, -5, 1};
    p.keypoints[r_shoulder] = {3, 3, 1};
    const auto img = rasterize_pose({{p}}, 16, 16, {1.0, {}});
    EXPECT_NE(img.at(0, 0)[0] + img.at(0, 0)[1] + img.at(0, 0)[2], 0);
    EXPECT_NE(img.at(3, 3)[0] + img.at(3, 3)[1] + img.at(3, 3)[2], 0);
}

TEST(Rasterize, Deterministic) {
    Rng rng = make_rng({3});
    const auto seq = random_sequence(rng, 2);
    EXPECT_EQ(rasterize_pose(seq.frames[0], 128, 96), rasterize_pose(seq.frames[0], 128, 96));
}

TEST(Masks, BoxWithPad) {
    PersonPose p{1, std::vector<Keypoint>(18)};
    p.keypoints[0] = {10, 20, 1};
    p.keypoints[1] = {30, 60, 1};
    // 5 px absolute pad on a 100x80 canvas.
    const auto m = bbox_mask(p, 100, 80, 0.05);
    for (int y = 0; y < 80; ++y)
        for (int x = 0; x < 100; ++x) {
            const bool in = x >= 5 && x <= 35 && y >= 15 && y <= 65;
            EXPECT_EQ(m.at(y, x), in ? 1.0 : 0.0) << x << "," << y;
        }
}

TEST(Masks, SinglePointAndEmpty) {
    PersonPose p{1, std::vector<Keypoint>(18)};
    p.keypoints[0] = {50, 50, 1};
    const auto m = bbox_mask(p, 100, 100, 0.0);
    double sum = 0;
    for (double v : m.vec()) sum += v;
    EXPECT_EQ(sum, 1.0);
    EXPECT_EQ(m.at(50, 50), 1.0);
    p.keypoints[0].confidence = 0;
    expect_error(ErrorKind::empty_pose, [&] { bbox_mask(p, 100, 100); });
}

TEST(Masks, OverlapAndAbsence) {
    Rng rng = make_rng({4});
    auto a = random_person(1, rng, 30, 40, 5);
    auto b = a;
    b.id_index = 2;
    const auto same = build_region_masks({{a, b}}, 96, 80);
    for (std::int64_t i = 0; i < same.m1.numel(); ++i) {
        EXPECT_EQ(same.m1[i], same.m2[i]);
        EXPECT_TRUE(same.m1[i] == 0.0 || same.m1[i] == 0.5);
    }
    const auto one = build_region_masks({{a}}, 96, 80);
    for (double v : one.m2.vec()) EXPECT_EQ(v, 0.0);
    expect_error(ErrorKind::empty_pose, [] { build_region_masks(PoseFrame{}, 16, 16); });

    auto far = random_person(2, rng, 80, 40, 3);
    const auto disjoint = build_region_masks({{a, far}}, 128, 80, 0.0);
    for (std::int64_t i = 0; i < disjoint.m1.numel(); ++i) {
        const double bg = 1 - disjoint.m1[i] - disjoint.m2[i];
        EXPECT_TRUE(bg == 0.0 || bg == 1.0);
    }
}

TEST(Masks, PyramidConservation) {
    Rng rng = make_rng({5});
    std::uniform_int_distribution<int> coin(0, 1);
    RegionMasks m{Tensor<double>({48, 64}), Tensor<double>({48, 64})};
    for (std::int64_t i = 0; i < m.m1.numel(); ++i) {
        const int a = coin(rng), b = coin(rng);
        m.m1[i] = a && b ? 0.5 : a;
        m.m2[i] = a && b ? 0.5 : b;
    }
    const auto pyr = build_mask_pyramid(m, {{24, 32}, {12, 16}, {6, 8}});
    auto sum = [](const Tensor<double>& t) {
        double s = 0;
        for (double v : t.vec()) s += v;
        return s;
    };
    for (const auto& lv : pyr.levels) {
        const double ratio = double(lv.m1.numel()) / double(m.m1.numel());
        EXPECT_NEAR(sum(lv.m1), sum(m.m1) * ratio, 1e-9);
        EXPECT_NEAR(sum(lv.m2), sum(m.m2) * ratio, 1e-9);
        for (std::int64_t i = 0; i < lv.m1.numel(); ++i) EXPECT_LE(lv.m1[i] + lv.m2[i], 1.0 + 1e-12);
    }
    RegionMasks ones{Tensor<double>({4, 4}, 1.0), Tensor<double>({4, 4})};
    const auto ones_pyr = build_mask_pyramid(ones, {{2, 2}, {1, 1}});
    for (const auto& lv : ones_pyr.levels)
        for (double v : lv.m1.vec()) EXPECT_EQ(v, 1.0);
    RegionMasks half{Tensor<double>({2, 2}, std::vector<double>{1, 1, 0, 0}), Tensor<double>({2, 2})};
    EXPECT_EQ(build_mask_pyramid(half, {{1, 1}}).levels[0].m1[0], 0.5);
    expect_error(ErrorKind::resolution, [&] { build_mask_pyramid(m, {{5, 8}}); });
}

TEST(Retarget, HandComputedScale) {
    PoseSequence seq;
    seq.width = 400;
    seq.height = 400;
    PersonPose cond{1, std::vector<Keypoint>(18)};
    PersonPose ref{1, std::vector<Keypoint>(18)};
    // x-RMS 50 around 200 vs 100 around 100; y-RMS 10 in both.
    cond.keypoints[0] = {150, 190, 1};
    cond.keypoints[1] = {250, 210, 1};
    ref.keypoints[0] = {0, 40, 1};
    ref.keypoints[1] = {200, 60, 1};
    seq.frames.push_back({{cond}});
    const auto plan = plan_retarget(ref, seq, 1);
    ASSERT_TRUE(plan[0]);
    EXPECT_NEAR(plan[0]->s_x, 2.0, 1e-12);
    EXPECT_NEAR(plan[0]->s_y, 1.0, 1e-12);
    PoseSequence centred = seq;
    centred.frames[0].people[0].keypoints[2] = {200, 200, 0.01};  // invisible, sits on the centroid
    const auto out = retarget(ref, centred, 1);
    EXPECT_NEAR(out.frames[0].people[0].keypoints[2].x, 200, 1e-12);
    EXPECT_NEAR(out.frames[0].people[0].keypoints[0].x, 100, 1e-12);
}

TEST(Retarget, Properties) {
    Rng rng = make_rng({6});
    std::uniform_real_distribution<double> shift(-30, 30);
    for (int trial = 0; trial < 20; ++trial) {
        auto seq = random_sequence(rng, 4);
        for (auto& f : seq.frames)
            for (auto& p : f.people)
                for (auto& k : p.keypoints) k.confidence = 1;
        const PersonPose ref = random_person(1, rng, 50, 50, 30);
        const auto once = retarget(ref, seq, 1);
        for (const auto& tf : plan_retarget(ref, once, 1)) {
            EXPECT_NEAR(tf->s_x, 1.0, 1e-9);
            EXPECT_NEAR(tf->s_y, 1.0, 1e-9);
        }
        // ID 2 untouched.
        for (std::size_t f = 0; f < seq.frames.size(); ++f)
            EXPECT_EQ(*once.frames[f].find(2), *seq.frames[f].find(2));
        const double dx = shift(rng), dy = shift(rng);
        auto moved = seq;
        for (auto& f : moved.frames)
            for (auto& k : f.find(1)->keypoints) k.x += dx, k.y += dy;
        const auto moved_out = retarget(ref, moved, 1);
        for (std::size_t f = 0; f < seq.frames.size(); ++f)
            for (int j = 0; j < 18; ++j) {
                EXPECT_NEAR(moved_out.frames[f].find(1)->keypoints[j].x, once.frames[f].find(1)->keypoints[j].x + dx,
                            1e-9);
                EXPECT_NEAR(moved_out.frames[f].find(1)->keypoints[j].y, once.frames[f].find(1)->keypoints[j].y + dy,
                            1e-9);
            }
    }
}

TEST(Retarget, DegenerateSpread) {
    PersonPose flat{1, std::vector<Keypoint>(18)};
    flat.keypoints[0] = {10, 10, 1};
    flat.keypoints[1] = {20, 10, 1};
    PoseSequence seq;
    seq.frames.push_back({{flat}});
    Rng rng = make_rng({7});
    expect_error(ErrorKind::degenerate_pose, [&] { retarget(random_person(1, rng), seq, 1); });
}
