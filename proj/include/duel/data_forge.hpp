#pragma once

// Procedural two-fighter clips, single-walker clips for splicing, the dataset
// manifest and the training-sample loader.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "duel/denoiser.hpp"
#include "duel/image.hpp"
#include "duel/latent_codec.hpp"
#include "duel/nn.hpp"
#include "duel/pose_kit.hpp"

namespace duel {

namespace fs = std::filesystem;

inline const std::vector<std::string>& action_vocabulary() {
    static const std::vector<std::string> v = {"punch", "kick", "dodge", "block",
                                               "uppercut", "sweep", "jump", "step"};
    return v;
}

struct BackgroundSpec {
    std::string scene = "dojo";
    std::string kind = "flat";  // flat | gradient (vertical, top to bottom)
    int top = 217;              // gray levels
    int bottom = 217;

    RgbImage render(int width, int height) const {
        RgbImage img(width, height);
        for (int y = 0; y < height; ++y) {
            const double t = kind == "flat" || height == 1 ? 0.0 : double(y) / (height - 1);
            const auto v = static_cast<std::uint8_t>(std::lround(top + t * (bottom - top)));
            for (int x = 0; x < width; ++x) img.set(x, y, {v, v, v});
        }
        return img;
    }
};

inline std::vector<BackgroundSpec> default_backgrounds() {
    return {{"dojo", "flat", 217, 217}, {"arena", "flat", 51, 51}};
}

inline std::vector<BackgroundSpec> preset_backgrounds() {
    return {{"dojo", "flat", 217, 217},
            {"arena", "flat", 51, 51},
            {"street", "gradient", 180, 90},
            {"temple", "gradient", 60, 160}};
}

struct ForgeConfig {
    int n_videos = 64;
    int frames_per_video = 48;
    int width = 128;
    int height = 96;
    int n_identities = 16;
    int n_actions = 8;
    std::vector<BackgroundSpec> backgrounds = default_backgrounds();
    std::uint64_t seed = 0;
    int fps = 24;

    void validate() const {
        auto bad = [](bool ok, const std::string& m) { require(ok, ErrorKind::parameter, "forge config: " + m); };
        bad(n_videos > 0 && frames_per_video > 0 && fps > 0, "counts must be positive");
        bad(width > 0 && height > 0 && width % 2 == 0 && height % 2 == 0, "width and height must be positive and even");
        bad(n_identities >= 2, "need at least two identities");
        bad(n_actions > 0 && n_actions <= int(action_vocabulary().size()),
            "n_actions must be in 1.." + std::to_string(action_vocabulary().size()));
        bad(!backgrounds.empty(), "at least one background");
        for (const auto& b : backgrounds) {
            bad(b.kind == "flat" || b.kind == "gradient", "background kind must be flat or gradient");
            bad(b.top >= 0 && b.top <= 255 && b.bottom >= 0 && b.bottom <= 255, "gray levels in 0..255");
            bad(!b.scene.empty(), "background needs a scene tag");
        }
    }
};

inline nlohmann::json to_json(const ForgeConfig& c) {
    nlohmann::json bgs = nlohmann::json::array();
    for (const auto& b : c.backgrounds)
        bgs.push_back({{"scene", b.scene}, {"kind", b.kind}, {"top", b.top}, {"bottom", b.bottom}});
    return {{"n_videos", c.n_videos}, {"frames_per_video", c.frames_per_video}, {"width", c.width},
            {"height", c.height}, {"n_identities", c.n_identities}, {"n_actions", c.n_actions},
            {"backgrounds", bgs}, {"seed", c.seed}, {"fps", c.fps}};
}

inline ForgeConfig forge_config_from_json(const nlohmann::json& j) {
    require(j.is_object(), ErrorKind::schema, "forge config must be an object");
    ForgeConfig c;
    static const std::vector<std::string> keys = {"n_videos", "frames_per_video", "width", "height", "n_identities",
                                                  "n_actions", "backgrounds", "seed", "fps"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(std::find(keys.begin(), keys.end(), it.key()) != keys.end(), ErrorKind::schema,
                "unknown forge config key '" + it.key() + "'");
    try {
        c.n_videos = j.value("n_videos", c.n_videos);
        c.frames_per_video = j.value("frames_per_video", c.frames_per_video);
        c.width = j.value("width", c.width);
        c.height = j.value("height", c.height);
        c.n_identities = j.value("n_identities", c.n_identities);
        c.n_actions = j.value("n_actions", c.n_actions);
        c.seed = j.value("seed", c.seed);
        c.fps = j.value("fps", c.fps);
        if (j.contains("backgrounds")) {
            c.backgrounds.clear();
            for (const auto& b : j["backgrounds"])
                c.backgrounds.push_back({b.at("scene").get<std::string>(), b.value("kind", std::string("flat")),
                                         b.at("top").get<int>(), b.value("bottom", b.at("top").get<int>())});
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::schema, std::string("forge config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Identities

struct Identity {
    int index = 0;
    Rgb color{};
    int head_shape = 0;  // 0 circle, 1 square, 2 diamond
    int thickness = 3;   // limb width in pixels at height 96
    double scale = 1.0;  // body size relative to the default figure

    std::string tag() const {
        char buf[16];
        std::snprintf(buf, sizeof buf, "fighter_%02d", index);
        return buf;
    }
};

/// Colors sit on a circle around mid-gray, orthogonal to the gray axis, so any gray
/// background is equally far from every identity color.
inline std::vector<Identity> identity_table(int n) {
    require(n >= 1, ErrorKind::parameter, "identity table needs n >= 1");
    const double e1[3] = {2 / std::sqrt(6.0), -1 / std::sqrt(6.0), -1 / std::sqrt(6.0)};
    const double e2[3] = {0.0, 1 / std::sqrt(2.0), -1 / std::sqrt(2.0)};
    std::vector<Identity> out;
    for (int i = 0; i < n; ++i) {
        const double th = 2 * std::numbers::pi * i / n;
        Identity id;
        id.index = i;
        for (int c = 0; c < 3; ++c) {
            const double v = 0.5 + 0.5 * (std::cos(th) * e1[c] + std::sin(th) * e2[c]);
            id.color[c] = static_cast<std::uint8_t>(std::lround(255 * v));
        }
        id.head_shape = i % 3;
        id.thickness = 3 + (i / 3) % 3;
        id.scale = 0.88 + 0.2 * double((i * 7) % n) / std::max(1, n - 1);
        out.push_back(id);
    }
    return out;
}

inline int identity_from_tag(const std::string& tag) {
    const std::string digits = tag.rfind("fighter_", 0) == 0 ? tag.substr(8) : "";
    require(!digits.empty() && digits.size() <= 4 &&
                std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }),
            ErrorKind::schema, "unknown character tag '" + tag + "'");
    return std::stoi(digits);
}

// ---------------------------------------------------------------------------
// Skeleton

/// Joint angles are absolute: 0 points down, pi up, positive toward the facing side.
struct Stance {
    double x = 0, y = 0;  // pelvis
    double lean = 0.1;
    double tilt = 0;
    std::array<double, 2> front_arm{0.5, 2.6};
    std::array<double, 2> back_arm{0.3, 2.4};
    std::array<double, 2> front_leg{0.35, 0.1};
    std::array<double, 2> back_leg{-0.35, -0.15};
};

struct Figure {
    PersonPose pose;
    double head_x = 0, head_y = 0, head_r = 5;
};

/// Forward kinematics for a figure facing +x (facing=1) or -x (facing=-1).
inline Figure pose_figure(const Stance& s, double scale, int facing, int id_index) {
    const double f = facing;
    auto dir = [&](double a) { return std::array<double, 2>{f * std::sin(a), std::cos(a)}; };
    std::vector<Keypoint> k(18, Keypoint{0, 0, 1});
    auto put = [&](int j, double x, double y) { k[j] = {x, y, 1.0}; };
    auto chain = [&](int root, int mid, int end, double l1, double l2, std::array<double, 2> a) {
        const auto d1 = dir(a[0]), d2 = dir(a[1]);
        put(mid, k[root].x + scale * l1 * d1[0], k[root].y + scale * l1 * d1[1]);
        put(end, k[mid].x + scale * l2 * d2[0], k[mid].y + scale * l2 * d2[1]);
    };
    const double nx = s.x + scale * 18 * f * std::sin(s.lean), ny = s.y - scale * 18 * std::cos(s.lean);
    put(neck, nx, ny);
    const double hx = nx + scale * 7 * f * std::sin(s.lean + s.tilt), hy = ny - scale * 7 * std::cos(s.lean + s.tilt);
    put(nose, hx + f * 2.5 * scale, hy + 0.5 * scale);
    put(r_eye, hx + (f * 1.6 - 0.9) * scale, hy - 1.4 * scale);
    put(l_eye, hx + (f * 1.6 + 0.9) * scale, hy - 1.4 * scale);
    put(r_ear, hx - 2.6 * scale, hy - 0.3 * scale);
    put(l_ear, hx + 2.6 * scale, hy - 0.3 * scale);
    put(r_shoulder, nx - 4.5 * scale, ny + scale);
    put(l_shoulder, nx + 4.5 * scale, ny + scale);
    put(r_hip, s.x - 3.5 * scale, s.y);
    put(l_hip, s.x + 3.5 * scale, s.y);
    // the limbs on the image side the figure faces are the front ones
    const bool left_front = facing > 0;
    chain(r_shoulder, r_elbow, r_wrist, 11, 10, left_front ? s.back_arm : s.front_arm);
    chain(l_shoulder, l_elbow, l_wrist, 11, 10, left_front ? s.front_arm : s.back_arm);
    chain(r_hip, r_knee, r_ankle, 13, 13, left_front ? s.back_leg : s.front_leg);
    chain(l_hip, l_knee, l_ankle, 13, 13, left_front ? s.front_leg : s.back_leg);
    return {PersonPose{id_index, std::move(k)}, hx, hy, 5 * scale};
}

inline double pulse(double phase) { return 0.5 - 0.5 * std::cos(phase); }

/// The partner's move for each action.
inline std::string reaction_to(const std::string& action) {
    static const std::map<std::string, std::string> m = {
        {"punch", "dodge"}, {"kick", "block"},  {"dodge", "punch"}, {"block", "kick"},
        {"uppercut", "dodge"}, {"sweep", "jump"}, {"jump", "sweep"}, {"step", "step"}, {"walk", "walk"}};
    const auto it = m.find(action);
    require(it != m.end(), ErrorKind::schema, "unknown action '" + action + "'");
    return it->second;
}

/// Stance at a phase of an action; x and y are offsets from the rest pelvis, in unscaled units.
inline Stance action_stance(const std::string& action, double phase) {
    Stance s;
    const double u = pulse(phase);
    auto lerp = [u](double a, double b) { return a + u * (b - a); };
    if (action == "punch") {
        s.front_arm = {lerp(0.5, 1.57), lerp(2.6, 1.57)};
        s.lean += 0.15 * u;
    } else if (action == "kick") {
        s.front_leg = {lerp(0.35, 1.4), lerp(0.1, 1.6)};
        s.lean -= 0.2 * u;
    } else if (action == "dodge") {
        s.lean = lerp(0.1, -0.45);
        s.x = -6 * u;
    } else if (action == "block") {
        s.front_arm = {lerp(0.5, 0.9), lerp(2.6, 2.9)};
        s.back_arm = {lerp(0.3, 0.8), lerp(2.4, 2.9)};
        s.lean -= 0.1 * u;
    } else if (action == "uppercut") {
        s.front_arm = {lerp(0.5, 2.4), lerp(2.6, 3.0)};
        s.y = 4 * std::sin(phase);
    } else if (action == "sweep") {
        s.y = 10 * u;
        s.front_leg = {lerp(0.35, 1.3), lerp(0.1, 1.45)};
        s.back_leg = {lerp(-0.35, -0.9), lerp(-0.15, 0.3)};
    } else if (action == "jump") {
        s.y = -12 * std::max(0.0, std::sin(phase));
        s.front_leg = {0.35 + 0.6 * u, 0.1 - 0.5 * u};
        s.back_leg = {-0.35 + 0.6 * u, -0.15 - 0.5 * u};
    } else if (action == "step") {
        s.x = 5 * std::sin(phase);
        s.front_leg[0] = 0.35 + 0.3 * std::sin(phase);
        s.back_leg[0] = -0.35 + 0.3 * std::sin(phase);
    } else if (action == "walk") {
        s.lean = 0;
        s.front_arm = {-0.3 * std::sin(phase), -0.3 * std::sin(phase) + 0.2};
        s.back_arm = {0.3 * std::sin(phase), 0.3 * std::sin(phase) + 0.2};
        s.front_leg = {0.4 * std::sin(phase), 0.4 * std::sin(phase) - 0.1};
        s.back_leg = {-0.4 * std::sin(phase), -0.4 * std::sin(phase) - 0.1};
    } else {
        fail(ErrorKind::schema, "unknown action '" + action + "'");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Rendering

/// Paints a figure in its identity color; marks its silhouette in `mask` (0/1 per pixel) if given.
inline void render_figure(RgbImage& img, const Figure& fig, const Identity& id, double unit,
                          std::vector<std::uint8_t>* mask = nullptr) {
    RgbImage canvas(img.width, img.height);
    const Topology topo = topology_by_name("body18");
    const double width = id.thickness * unit;
    for (const auto& [a, b] : topo.limbs) {
        if (a == nose || b == nose || a >= r_eye || b >= r_eye) continue;  // the head shape covers the face
        const auto& ka = fig.pose.keypoints[a];
        const auto& kb = fig.pose.keypoints[b];
        draw_segment(canvas, ka.x, ka.y, kb.x, kb.y, width, {255, 255, 255});
    }
    const double r = fig.head_r;
    for (int y = std::max(0, int(fig.head_y - r - 1)); y <= std::min(img.height - 1, int(fig.head_y + r + 1)); ++y)
        for (int x = std::max(0, int(fig.head_x - r - 1)); x <= std::min(img.width - 1, int(fig.head_x + r + 1));
             ++x) {
            const double dx = x - fig.head_x, dy = y - fig.head_y;
            bool in = false;
            switch (id.head_shape) {
                case 0: in = dx * dx + dy * dy <= r * r; break;
                case 1: in = std::abs(dx) <= 0.9 * r && std::abs(dy) <= 0.9 * r; break;
                default: in = std::abs(dx) + std::abs(dy) <= 1.2 * r; break;
            }
            if (in) canvas.set(x, y, {255, 255, 255});
        }
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (canvas.at(x, y)[0]) {
                img.set(x, y, id.color);
                if (mask) (*mask)[std::size_t(y) * img.width + x] = 1;
            }
}

struct FighterSpec {
    Identity identity;
    std::string action;
    int facing = 1;
    double rest_x = 0, rest_y = 0;  // pelvis rest position in pixels
    double period = 16;             // frames per action cycle
    double phase = 0;
};

/// Pose and silhouette of one fighter at frame f, in a canvas of the given height.
inline Figure fighter_at(const FighterSpec& s, int frame, int canvas_height, int id_index) {
    const double unit = canvas_height / 96.0;
    const double scale = s.identity.scale * unit;
    Stance st = action_stance(s.action, 2 * std::numbers::pi * frame / s.period + s.phase);
    st.x = s.rest_x + s.facing * st.x * scale;
    st.y = s.rest_y + st.y * scale;
    return pose_figure(st, scale, s.facing, id_index);
}

inline double ground_pelvis_y(int height, double scale) { return 0.86 * height - 25.5 * scale; }

// ---------------------------------------------------------------------------
// Clips

/// A clip held in memory: frames, poses and one reference image per person.
struct Clip {
    std::vector<RgbImage> frames;
    PoseSequence poses;
    std::vector<RgbImage> refs;
    RgbImage background;
    std::vector<std::array<std::vector<std::uint8_t>, 2>> silhouettes;  // per frame, per person
};

struct VideoPlan {
    std::string video_id;
    std::array<FighterSpec, 2> fighters;
    BackgroundSpec background;
    std::string action;  // fighter 1's move; the tag
};

inline Clip render_clip(const VideoPlan& plan, int frames, int width, int height, int fps, int people = 2) {
    Clip clip;
    clip.background = plan.background.render(width, height);
    clip.poses.fps = fps;
    clip.poses.width = width;
    clip.poses.height = height;
    const double unit = height / 96.0;
    for (int f = 0; f < frames; ++f) {
        RgbImage img = clip.background;
        PoseFrame pf;
        std::array<std::vector<std::uint8_t>, 2> sil;
        for (int p = 0; p < people; ++p) {
            sil[p].assign(std::size_t(width) * height, 0);
            const Figure fig = fighter_at(plan.fighters[p], f, height, p + 1);
            render_figure(img, fig, plan.fighters[p].identity, unit, &sil[p]);
            pf.people.push_back(fig.pose);
        }
        clip.frames.push_back(std::move(img));
        clip.poses.frames.push_back(std::move(pf));
        clip.silhouettes.push_back(std::move(sil));
    }
    for (int p = 0; p < people; ++p) {
        RgbImage ref(width, height, {255, 255, 255});
        render_figure(ref, fighter_at(plan.fighters[p], 0, height, p + 1), plan.fighters[p].identity, unit);
        clip.refs.push_back(std::move(ref));
    }
    return clip;
}

inline std::string video_name(const std::string& prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%04d", prefix.c_str(), i);
    return buf;
}

/// Deterministic plans for every forged video; pairs of identities are distinct within each video.
inline std::vector<VideoPlan> plan_videos(const ForgeConfig& cfg) {
    cfg.validate();
    const auto ids = identity_table(cfg.n_identities);
    std::vector<std::pair<int, int>> pairs;
    for (int a = 0; a < cfg.n_identities; ++a)
        for (int b = a + 1; b < cfg.n_identities; ++b) pairs.emplace_back(a, b);
    Rng shuffle = make_rng({cfg.seed, 0x70616972ull});
    std::shuffle(pairs.begin(), pairs.end(), shuffle);
    std::vector<VideoPlan> plans;
    for (int v = 0; v < cfg.n_videos; ++v) {
        Rng rng = make_rng({cfg.seed, std::uint64_t(v), 0x766964ull});
        auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
        auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
        auto [a, b] = pairs[std::size_t(v) % pairs.size()];
        if (pick(2)) std::swap(a, b);
        VideoPlan plan;
        plan.video_id = video_name("v", v);
        plan.action = action_vocabulary()[std::size_t(pick(cfg.n_actions))];
        plan.background = cfg.backgrounds[std::size_t(pick(int(cfg.backgrounds.size())))];
        const double unit = cfg.height / 96.0;
        const double period = uni(12, 20), phase = uni(0, 2 * std::numbers::pi);
        const std::array<std::string, 2> moves{plan.action, reaction_to(plan.action)};
        const std::array<double, 2> xs{0.34, 0.66};
        for (int p = 0; p < 2; ++p) {
            FighterSpec& f = plan.fighters[p];
            f.identity = ids[std::size_t(p == 0 ? a : b)];
            f.action = moves[p];
            f.facing = p == 0 ? 1 : -1;
            f.rest_x = xs[p] * cfg.width + uni(-3, 3) * unit;
            f.rest_y = ground_pelvis_y(cfg.height, f.identity.scale * unit);
            f.period = period;
            f.phase = phase + (p == 0 ? 0.0 : std::numbers::pi / 3);
        }
        plans.push_back(plan);
    }
    return plans;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
    std::string video_id;
    std::string source = "kff";  // kff | fashion
    std::string scene;
    std::string action;
    std::array<std::string, 2> characters;
    std::string frames_dir;
    std::string poses;
    std::array<std::string, 2> refs;
    std::string background;
    int frame_count = 0;

    std::string prompt() const { return action + " in " + scene; }
};

inline nlohmann::json to_json(const ManifestEntry& e) {
    return {{"video_id", e.video_id},  {"source", e.source},      {"scene", e.scene},
            {"action", e.action},      {"characters", e.characters}, {"frames", e.frames_dir},
            {"poses", e.poses},        {"refs", e.refs},          {"background", e.background},
            {"frame_count", e.frame_count}};
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
    ManifestEntry e;
    try {
        e.video_id = j.at("video_id").get<std::string>();
        e.source = j.value("source", std::string("kff"));
        e.scene = j.at("scene").get<std::string>();
        e.action = j.at("action").get<std::string>();
        const auto& ch = j.at("characters");
        const auto& refs = j.at("refs");
        require(ch.is_array() && ch.size() == 2, ErrorKind::schema, e.video_id + ": need exactly two characters");
        require(refs.is_array() && refs.size() == 2, ErrorKind::schema, e.video_id + ": need exactly two refs");
        e.characters = {ch[0].get<std::string>(), ch[1].get<std::string>()};
        e.refs = {refs[0].get<std::string>(), refs[1].get<std::string>()};
        e.frames_dir = j.at("frames").get<std::string>();
        e.poses = j.at("poses").get<std::string>();
        e.background = j.at("background").get<std::string>();
        e.frame_count = j.at("frame_count").get<int>();
    } catch (const nlohmann::json::exception& ex) {
        fail(ErrorKind::schema, std::string("manifest entry: ") + ex.what());
    }
    require(e.source == "kff" || e.source == "fashion", ErrorKind::schema,
            e.video_id + ": source must be kff or fashion");
    return e;
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        require(bool(out), ErrorKind::io, "cannot write " + path.string());
        out << text;
        require(bool(out), ErrorKind::io, "failed writing " + path.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(bool(in), ErrorKind::io, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_manifest(const fs::path& root, const std::vector<ManifestEntry>& entries) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries) arr.push_back(to_json(e));
    write_text_atomic(root / "manifest.json", arr.dump(1) + "\n");
}

/// Reads and validates manifest.json: referenced files exist and tags come from the vocabularies.
inline std::vector<ManifestEntry> load_manifest(const fs::path& root) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_text(root / "manifest.json"));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::parse, "manifest.json: " + std::string(e.what()));
    }
    require(doc.is_array(), ErrorKind::schema, "manifest must be a JSON array");
    std::vector<ManifestEntry> out;
    const auto& actions = action_vocabulary();
    for (const auto& j : doc) {
        ManifestEntry e = manifest_entry_from_json(j);
        require(e.action == "walk" || std::find(actions.begin(), actions.end(), e.action) != actions.end(),
                ErrorKind::schema, e.video_id + ": unknown action '" + e.action + "'");
        for (const auto& c : e.characters) identity_from_tag(c);
        for (const auto& p : {e.frames_dir, e.poses, e.refs[0], e.refs[1], e.background})
            require(fs::exists(root / p), ErrorKind::data, e.video_id + ": missing " + p);
        out.push_back(std::move(e));
    }
    return out;
}

/// Writes {id}/{frames/, poses.json, ref_1.png, ref_2.png, bg.png} and returns the entry.
inline ManifestEntry write_clip(const fs::path& root, const Clip& clip, const std::string& id,
                                const std::string& source, const std::string& scene, const std::string& action,
                                const std::array<std::string, 2>& characters) {
    require(clip.refs.size() == 2, ErrorKind::arity, id + ": a dataset clip needs two reference images");
    std::error_code ec;
    fs::create_directories(root / id / "frames", ec);
    require(!ec, ErrorKind::io, "cannot create " + (root / id).string() + ": " + ec.message());
    for (std::size_t f = 0; f < clip.frames.size(); ++f)
        write_png(root / id / "frames" / frame_filename(int(f)), clip.frames[f]);
    write_text_atomic(root / id / "poses.json", serialize_pose_sequence(clip.poses));
    write_png(root / id / "ref_1.png", clip.refs[0]);
    write_png(root / id / "ref_2.png", clip.refs[1]);
    write_png(root / id / "bg.png", clip.background);
    ManifestEntry e;
    e.video_id = id;
    e.source = source;
    e.scene = scene;
    e.action = action;
    e.characters = characters;
    e.frames_dir = id + "/frames";
    e.poses = id + "/poses.json";
    e.refs = {id + "/ref_1.png", id + "/ref_2.png"};
    e.background = id + "/bg.png";
    e.frame_count = int(clip.frames.size());
    return e;
}

inline Clip forge_clip(const ForgeConfig& cfg, const VideoPlan& plan) {
    return render_clip(plan, cfg.frames_per_video, cfg.width, cfg.height, cfg.fps);
}

/// Forges the two-fighter dataset under root; returns the manifest entries.
inline std::vector<ManifestEntry> forge_synthetic(const ForgeConfig& cfg, const fs::path& root) {
    std::vector<ManifestEntry> entries;
    for (const auto& plan : plan_videos(cfg)) {
        const Clip clip = forge_clip(cfg, plan);
        entries.push_back(write_clip(root, clip, plan.video_id, "kff", plan.background.scene, plan.action,
                                     {plan.fighters[0].identity.tag(), plan.fighters[1].identity.tag()}));
    }
    write_manifest(root, entries);
    return entries;
}

// ---------------------------------------------------------------------------
// Fashion-style walkers and splicing

struct FashionConfig {
    int n_walkers = 16;     // single-person clips
    int n_videos = 16;      // spliced pairs
    int frames_per_clip = 48;
    int width = 64;         // per walker; spliced clips are twice as wide
    int height = 96;
    int n_identities = 16;
    std::uint64_t seed = 1;
    int fps = 24;

    void validate() const {
        auto bad = [](bool ok, const std::string& m) { require(ok, ErrorKind::parameter, "fashion config: " + m); };
        bad(n_walkers >= 2 && n_videos > 0 && frames_per_clip > 0 && fps > 0, "counts must be positive");
        bad(width > 0 && height > 0 && width % 2 == 0 && height % 2 == 0, "width and height must be positive and even");
        bad(n_identities >= 2, "need at least two identities");
    }
};

/// One walker on white, facing a random side.
inline VideoPlan walker_plan(const FashionConfig& cfg, int index) {
    const auto ids = identity_table(cfg.n_identities);
    Rng rng = make_rng({cfg.seed, std::uint64_t(index), 0x77616c6bull});
    auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    VideoPlan plan;
    plan.video_id = video_name("w", index);
    plan.action = "walk";
    plan.background = {"studio", "flat", 255, 255};
    FighterSpec& f = plan.fighters[0];
    f.identity = ids[std::size_t(std::uniform_int_distribution<int>(0, cfg.n_identities - 1)(rng))];
    f.action = "walk";
    f.facing = uni(0, 1) < 0.5 ? 1 : -1;
    const double unit = cfg.height / 96.0;
    f.rest_x = 0.5 * cfg.width + uni(-3, 3) * unit;
    f.rest_y = ground_pelvis_y(cfg.height, f.identity.scale * unit);
    f.period = uni(14, 22);
    f.phase = uni(0, 2 * std::numbers::pi);
    return plan;
}

inline Clip forge_walker(const FashionConfig& cfg, int index, int frames) {
    return render_clip(walker_plan(cfg, index), frames, cfg.width, cfg.height, cfg.fps, 1);
}

/// Places clip B to the right of clip A. Frames are copied without resampling.
inline Clip splice_fashion(const Clip& a, const Clip& b) {
    const auto dims = [](const Clip& c) {
        require(!c.frames.empty(), ErrorKind::shape, "splice needs at least one frame per clip");
        return std::pair{c.frames[0].width, c.frames[0].height};
    };
    const auto [wa, ha] = dims(a);
    const auto [wb, hb] = dims(b);
    require(ha == hb, ErrorKind::shape,
            "splice heights differ: " + std::to_string(ha) + " vs " + std::to_string(hb));
    require(a.poses.frames.size() >= a.frames.size() && b.poses.frames.size() >= b.frames.size(), ErrorKind::shape,
            "splice needs one pose frame per image frame");
    const std::size_t n = std::min(a.frames.size(), b.frames.size());
    auto join = [&](const RgbImage& l, const RgbImage& r) {
        RgbImage out(wa + wb, ha);
        for (int y = 0; y < ha; ++y) {
            std::copy(l.at(0, y), l.at(0, y) + 3 * wa, out.at(0, y));
            std::copy(r.at(0, y), r.at(0, y) + 3 * wb, out.at(wa, y));
        }
        return out;
    };
    auto first_person = [](const PoseFrame& f) {
        require(!f.people.empty(), ErrorKind::empty_pose, "splice source frame has no person");
        return f.people.front();
    };
    Clip out;
    out.poses.fps = a.poses.fps;
    out.poses.width = wa + wb;
    out.poses.height = ha;
    out.poses.topology = a.poses.topology;
    for (std::size_t f = 0; f < n; ++f) {
        out.frames.push_back(join(a.frames[f], b.frames[f]));
        PersonPose pa = first_person(a.poses.frames[f]);
        PersonPose pb = first_person(b.poses.frames[f]);
        pa.id_index = 1;
        pb.id_index = 2;
        for (auto& k : pb.keypoints) k.x += wa;
        out.poses.frames.push_back(PoseFrame{{pa, pb}});
    }
    const RgbImage white_a(wa, ha, {255, 255, 255}), white_b(wb, hb, {255, 255, 255});
    if (!a.refs.empty() && !b.refs.empty()) {
        out.refs.push_back(join(a.refs[0], white_b));
        out.refs.push_back(join(white_a, b.refs[0]));
    }
    out.background = join(a.background.width ? a.background : white_a, b.background.width ? b.background : white_b);
    return out;
}

/// Walkers are kept under root/walkers; spliced pairs go to the manifest.
inline std::vector<ManifestEntry> forge_fashion(const FashionConfig& cfg, const fs::path& root) {
    cfg.validate();
    std::vector<Clip> walkers;
    std::vector<int> who;
    const auto ids = identity_table(cfg.n_identities);
    for (int i = 0; i < cfg.n_walkers; ++i) {
        const VideoPlan plan = walker_plan(cfg, i);
        walkers.push_back(render_clip(plan, cfg.frames_per_clip, cfg.width, cfg.height, cfg.fps, 1));
        who.push_back(plan.fighters[0].identity.index);
        const fs::path dir = root / "walkers" / video_name("w", i);
        fs::create_directories(dir / "frames");
        for (std::size_t f = 0; f < walkers.back().frames.size(); ++f)
            write_png(dir / "frames" / frame_filename(int(f)), walkers.back().frames[f]);
        write_text_atomic(dir / "poses.json", serialize_pose_sequence(walkers.back().poses));
        write_png(dir / "ref_1.png", walkers.back().refs[0]);
    }
    std::vector<ManifestEntry> entries;
    Rng rng = make_rng({cfg.seed, 0x73706c6963ull});
    std::uniform_int_distribution<int> pick(0, cfg.n_walkers - 1);
    for (int v = 0; v < cfg.n_videos; ++v) {
        int a = pick(rng), b = pick(rng);
        while (who[std::size_t(b)] == who[std::size_t(a)]) b = pick(rng);
        const Clip clip = splice_fashion(walkers[std::size_t(a)], walkers[std::size_t(b)]);
        entries.push_back(write_clip(root, clip, video_name("f", v), "fashion", "studio", "walk",
                                     {ids[std::size_t(who[std::size_t(a)])].tag(),
                                      ids[std::size_t(who[std::size_t(b)])].tag()}));
    }
    write_manifest(root, entries);
    return entries;
}

/// Reads a single-person clip directory (frames/, poses.json, ref_1.png).
inline Clip read_single_clip(const fs::path& dir) {
    Clip c;
    for (const auto& p : list_frames(dir / "frames")) c.frames.push_back(read_png(p));
    c.poses = parse_pose_sequence(read_text(dir / "poses.json"));
    if (fs::exists(dir / "ref_1.png")) c.refs.push_back(read_png(dir / "ref_1.png"));
    if (fs::exists(dir / "bg.png")) c.background = read_png(dir / "bg.png");
    require(!c.frames.empty(), ErrorKind::data, dir.string() + ": no frames");
    return c;
}

// ---------------------------------------------------------------------------
// Training samples

struct VideoData {
    std::vector<RgbImage> frames;
    PoseSequence poses;
    std::array<RgbImage, 2> refs;
    RgbImage background;
};

inline VideoData load_video(const fs::path& root, const ManifestEntry& e) {
    VideoData v;
    for (const auto& p : list_frames(root / e.frames_dir)) v.frames.push_back(read_png(p));
    v.poses = parse_pose_sequence(read_text(root / e.poses));
    v.refs = {read_png(root / e.refs[0]), read_png(root / e.refs[1])};
    v.background = read_png(root / e.background);
    require(!v.frames.empty() && v.poses.frames.size() >= v.frames.size(), ErrorKind::data,
            e.video_id + ": " + std::to_string(v.frames.size()) + " frames but " +
                std::to_string(v.poses.frames.size()) + " pose frames");
    return v;
}

struct TrainingSample {
    std::string video_id;
    std::string source;
    std::vector<int> frame_indices;
    Tensor<float> x0;  // [F,12,h,w]
    ClipInputs inputs;
};

/// Frame indices for one draw: a single grid frame (stage 1) or clip_len frames `interval` apart (stage 2).
inline std::vector<int> sample_frame_indices(int n_frames, int stage, int interval, int clip_len, Rng& rng,
                                             const std::string& name) {
    require(stage == 1 || stage == 2, ErrorKind::parameter, "stage must be 1 or 2");
    require(interval > 0 && clip_len > 0, ErrorKind::parameter, "interval and clip_len must be positive");
    if (stage == 1) {
        const int slots = (n_frames - 1) / interval + 1;
        return {interval * std::uniform_int_distribution<int>(0, slots - 1)(rng)};
    }
    const int span = (clip_len - 1) * interval + 1;
    require(n_frames >= span, ErrorKind::sampling,
            name + ": " + std::to_string(n_frames) + " frames, stage 2 needs " + std::to_string(span) +
                " (clip_len " + std::to_string(clip_len) + ", interval " + std::to_string(interval) + ")");
    const int start = std::uniform_int_distribution<int>(0, n_frames - span)(rng);
    std::vector<int> idx;
    for (int k = 0; k < clip_len; ++k) idx.push_back(start + k * interval);
    return idx;
}

/// Conditions for arbitrary frames of a pose sequence: pose maps, masks, refs, background, prompt.
inline ClipInputs clip_inputs(const PoseSequence& poses, const std::vector<int>& indices,
                              const std::array<RgbImage, 2>& refs, const std::optional<RgbImage>& background,
                              const std::string& prompt) {
    ClipInputs in;
    for (int f : indices) {
        in.pose_maps.push_back(to_float(rasterize_pose(poses.frames[std::size_t(f)], poses.width, poses.height, {},
                                                       poses.topology)));
        in.masks.push_back(build_region_masks(poses.frames[std::size_t(f)], poses.width, poses.height));
    }
    in.refs = {to_float(refs[0]), to_float(refs[1])};
    if (background) in.background = to_float(*background);
    in.prompt = prompt;
    return in;
}

inline TrainingSample sample_from_video(const VideoData& v, const ManifestEntry& e, int stage, int interval,
                                        int clip_len, Rng& rng) {
    TrainingSample s;
    s.video_id = e.video_id;
    s.source = e.source;
    s.frame_indices = sample_frame_indices(int(v.frames.size()), stage, interval, clip_len, rng, e.video_id);
    std::vector<Image> imgs;
    for (int f : s.frame_indices) imgs.push_back(to_float(v.frames[std::size_t(f)]));
    s.x0 = encode_frames(imgs);
    s.inputs = clip_inputs(v.poses, s.frame_indices, v.refs, v.background, e.prompt());
    return s;
}

inline TrainingSample load_sample(const fs::path& root, const ManifestEntry& entry, int stage, int frame_interval,
                                  int clip_len, Rng& rng) {
    return sample_from_video(load_video(root, entry), entry, stage, frame_interval, clip_len, rng);
}

/// A manifest with decoded videos cached on first use.
class Dataset {
public:
    Dataset() = default;
    explicit Dataset(fs::path root) : root_(std::move(root)), entries_(load_manifest(root_)) {}

    const fs::path& root() const { return root_; }
    const std::vector<ManifestEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    const VideoData& video(std::size_t i) const {
        auto it = cache_.find(i);
        if (it == cache_.end()) it = cache_.emplace(i, load_video(root_, entries_.at(i))).first;
        return it->second;
    }

    TrainingSample sample(std::size_t i, int stage, int interval, int clip_len, Rng& rng) const {
        return sample_from_video(video(i), entries_.at(i), stage, interval, clip_len, rng);
    }

private:
    fs::path root_;
    std::vector<ManifestEntry> entries_;
    mutable std::map<std::size_t, VideoData> cache_;
};

}  // namespace duel
