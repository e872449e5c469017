#pragma once

// Two-person pose sequences: JSON schema, pose-map rasterization, bounding-box
// region masks with their attention-resolution pyramid, and body-shape
// adaptive retargeting.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "duel/image.hpp"
#include "duel/tensor.hpp"

namespace duel {

/// Joints at or below this confidence are treated as missing.
inline constexpr double kVisibleConfidence = 0.05;
inline constexpr double kDefaultPadFrac = 0.05;

struct Keypoint {
    double x = 0;
    double y = 0;
    double confidence = 0;

    bool visible() const { return confidence > kVisibleConfidence; }
    friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct PersonPose {
    int id_index = 1;  // 1 or 2
    std::vector<Keypoint> keypoints;
    friend bool operator==(const PersonPose&, const PersonPose&) = default;
};

struct PoseFrame {
    std::vector<PersonPose> people;

    const PersonPose* find(int id_index) const {
        for (const auto& p : people)
            if (p.id_index == id_index) return &p;
        return nullptr;
    }
    PersonPose* find(int id_index) {
        for (auto& p : people)
            if (p.id_index == id_index) return &p;
        return nullptr;
    }
    friend bool operator==(const PoseFrame&, const PoseFrame&) = default;
};

struct PoseSequence {
    int fps = 24;
    int width = 0;
    int height = 0;
    std::string topology = "body18";
    std::vector<PoseFrame> frames;
    friend bool operator==(const PoseSequence&, const PoseSequence&) = default;
};

// ---------------------------------------------------------------------------
// Skeleton topology

/// OpenPose 18-joint body order.
enum Body18 : int {
    nose, neck, r_shoulder, r_elbow, r_wrist, l_shoulder, l_elbow, l_wrist,
    r_hip, r_knee, r_ankle, l_hip, l_knee, l_ankle, r_eye, l_eye, r_ear, l_ear,
};

struct Topology {
    std::string name;
    int joints = 0;
    std::vector<std::pair<int, int>> limbs;
    std::vector<Rgb> colors;  // one per limb
};

namespace detail {

inline const std::vector<std::pair<int, int>>& body18_limbs() {
    static const std::vector<std::pair<int, int>> limbs = {
        {1, 2}, {1, 5}, {2, 3}, {3, 4}, {5, 6}, {6, 7}, {1, 8}, {8, 9}, {9, 10},
        {1, 11}, {11, 12}, {12, 13}, {1, 0}, {0, 14}, {14, 16}, {0, 15}, {15, 17},
    };
    return limbs;
}

inline const std::vector<Rgb>& body18_colors() {
    static const std::vector<Rgb> colors = {
        {255, 0, 0},   {255, 85, 0},   {255, 170, 0}, {255, 255, 0}, {170, 255, 0}, {85, 255, 0},
        {0, 255, 0},   {0, 255, 85},   {0, 255, 170}, {0, 255, 255}, {0, 170, 255}, {0, 85, 255},
        {0, 0, 255},   {85, 0, 255},   {170, 0, 255}, {255, 0, 255}, {255, 0, 170},
    };
    return colors;
}

inline void append_hand(Topology& t, int base) {
    for (int finger = 0; finger < 5; ++finger) {
        int prev = base;
        for (int k = 1; k <= 4; ++k) {
            const int j = base + finger * 4 + k;
            t.limbs.emplace_back(prev, j);
            const auto hue = static_cast<std::uint8_t>(40 * finger + 10 * k);
            t.colors.push_back({hue, static_cast<std::uint8_t>(255 - hue), 200});
            prev = j;
        }
    }
}

inline void append_feet(Topology& t, int base) {
    // big toe, small toe, heel per foot; right foot first
    for (int foot = 0; foot < 2; ++foot) {
        const int ankle = foot == 0 ? r_ankle : l_ankle;
        for (int k = 0; k < 3; ++k) {
            t.limbs.emplace_back(ankle, base + foot * 3 + k);
            t.colors.push_back({200, 200, static_cast<std::uint8_t>(60 * k)});
        }
    }
}

}  // namespace detail

/// Known topologies: "body18", optionally extended with "+hands" (2x21) and "+feet" (2x3).
inline Topology topology_by_name(const std::string& name) {
    Topology t{name, 18, detail::body18_limbs(), detail::body18_colors()};
    std::string rest = name.substr(0, 6) == "body18" ? name.substr(6) : std::string("?");
    auto take = [&](const std::string& block) {
        if (rest.rfind(block, 0) == 0) {
            rest = rest.substr(block.size());
            return true;
        }
        return false;
    };
    if (take("+hands")) {
        detail::append_hand(t, t.joints);
        detail::append_hand(t, t.joints + 21);
        t.joints += 42;
    }
    if (take("+feet")) {
        detail::append_feet(t, t.joints);
        t.joints += 6;
    }
    require(rest.empty(), ErrorKind::schema, "unknown topology '" + name + "'");
    return t;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const PoseSequence& seq) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : seq.frames) {
        nlohmann::json people = nlohmann::json::array();
        for (const auto& p : f.people) {
            nlohmann::json kps = nlohmann::json::array();
            for (const auto& k : p.keypoints) kps.push_back({k.x, k.y, k.confidence});
            people.push_back({{"id", p.id_index}, {"keypoints", std::move(kps)}});
        }
        frames.push_back({{"people", std::move(people)}});
    }
    return {{"fps", seq.fps}, {"width", seq.width}, {"height", seq.height},
            {"topology", seq.topology}, {"frames", std::move(frames)}};
}

inline std::string serialize_pose_sequence(const PoseSequence& seq) { return to_json(seq).dump(); }

inline PoseSequence pose_sequence_from_json(const nlohmann::json& doc) {
    auto schema = [](bool ok, const std::string& msg) { require(ok, ErrorKind::schema, msg); };
    schema(doc.is_object(), "pose document must be an object");
    for (const char* key : {"fps", "width", "height", "frames"})
        schema(doc.contains(key), std::string("missing field '") + key + "'");
    schema(doc["fps"].is_number_integer() && doc["width"].is_number_integer() &&
               doc["height"].is_number_integer(),
           "fps, width, height must be integers");
    PoseSequence seq;
    seq.fps = doc["fps"].get<int>();
    seq.width = doc["width"].get<int>();
    seq.height = doc["height"].get<int>();
    seq.topology = doc.value("topology", std::string("body18"));
    schema(seq.fps > 0, "fps must be positive");
    schema(seq.width > 0 && seq.height > 0, "width and height must be positive");
    const Topology topo = topology_by_name(seq.topology);
    schema(doc["frames"].is_array(), "'frames' must be an array");
    const auto& frames = doc["frames"];
    for (std::size_t fi = 0; fi < frames.size(); ++fi) {
        const std::string where = "frame " + std::to_string(fi) + ": ";
        const auto& fj = frames[fi];
        schema(fj.is_object() && fj.contains("people") && fj["people"].is_array(),
               where + "missing 'people' array");
        PoseFrame frame;
        schema(fj["people"].size() <= 2, where + "more than two people");
        for (const auto& pj : fj["people"]) {
            schema(pj.is_object() && pj.contains("id") && pj["id"].is_number_integer(),
                   where + "person without integer 'id'");
            PersonPose person;
            person.id_index = pj["id"].get<int>();
            schema(person.id_index == 1 || person.id_index == 2,
                   where + "id " + std::to_string(person.id_index) + " outside {1,2}");
            schema(frame.find(person.id_index) == nullptr,
                   where + "duplicate id " + std::to_string(person.id_index));
            schema(pj.contains("keypoints") && pj["keypoints"].is_array(), where + "missing keypoints");
            const auto& kps = pj["keypoints"];
            schema(int(kps.size()) == topo.joints,
                   where + "expected " + std::to_string(topo.joints) + " keypoints, got " +
                       std::to_string(kps.size()));
            for (const auto& kj : kps) {
                schema(kj.is_array() && kj.size() == 3 && kj[0].is_number() && kj[1].is_number() &&
                           kj[2].is_number(),
                       where + "keypoint must be [x, y, confidence]");
                Keypoint k{kj[0].get<double>(), kj[1].get<double>(), kj[2].get<double>()};
                schema(std::isfinite(k.x) && std::isfinite(k.y), where + "non-finite coordinate");
                schema(k.confidence >= 0.0 && k.confidence <= 1.0, where + "confidence outside [0,1]");
                person.keypoints.push_back(k);
            }
            frame.people.push_back(std::move(person));
        }
        seq.frames.push_back(std::move(frame));
    }
    return seq;
}

inline PoseSequence parse_pose_sequence(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::parse, std::string("pose JSON: ") + e.what());
    }
    return pose_sequence_from_json(doc);
}

// ---------------------------------------------------------------------------
// Rasterization

struct PoseMapStyle {
    double limb_width = 4.0;
    std::vector<Rgb> color_per_limb;  // empty: topology defaults
};

/// Paints a capsule of the given width between two points; pixel centres at integer coordinates.
inline void draw_segment(RgbImage& img, double ax, double ay, double bx, double by, double width, Rgb color) {
    const double r = width / 2.0;
    const int x0 = std::max(0, int(std::floor(std::min(ax, bx) - r)));
    const int x1 = std::min(img.width - 1, int(std::ceil(std::max(ax, bx) + r)));
    const int y0 = std::max(0, int(std::floor(std::min(ay, by) - r)));
    const int y1 = std::min(img.height - 1, int(std::ceil(std::max(ay, by) + r)));
    const double dx = bx - ax, dy = by - ay, len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double t = len2 > 0 ? ((x - ax) * dx + (y - ay) * dy) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const double ex = ax + t * dx - x, ey = ay + t * dy - y;
            if (ex * ex + ey * ey <= r * r + 1e-9) img.set(x, y, color);
        }
}

inline void draw_person(RgbImage& img, const PersonPose& person, const Topology& topo, const PoseMapStyle& style) {
    const auto& colors = style.color_per_limb.empty() ? topo.colors : style.color_per_limb;
    for (std::size_t li = 0; li < topo.limbs.size(); ++li) {
        const auto [a, b] = topo.limbs[li];
        if (a >= int(person.keypoints.size()) || b >= int(person.keypoints.size())) continue;
        const Keypoint& ka = person.keypoints[a];
        const Keypoint& kb = person.keypoints[b];
        if (!ka.visible() || !kb.visible()) continue;
        draw_segment(img, ka.x, ka.y, kb.x, kb.y, style.limb_width, colors[li % colors.size()]);
    }
}

inline RgbImage rasterize_pose(const PoseFrame& frame, int width, int height, const PoseMapStyle& style = {},
                               const std::string& topology = "body18") {
    require(width > 0 && height > 0, ErrorKind::shape, "pose map needs a positive canvas");
    const Topology topo = topology_by_name(topology);
    RgbImage img(width, height);
    for (const auto& p : frame.people) draw_person(img, p, topo, style);
    return img;
}

// ---------------------------------------------------------------------------
// Region masks

/// Per-ID soft masks at one resolution; m1, m2 are [h,w].
struct RegionMasks {
    Tensor<double> m1;
    Tensor<double> m2;

    std::int64_t height() const { return m1.dim(0); }
    std::int64_t width() const { return m1.dim(1); }
    const Tensor<double>& of(int id_index) const { return id_index == 1 ? m1 : m2; }
};

/// One RegionMasks per attention resolution, finest first as given.
struct MaskPyramid {
    std::vector<RegionMasks> levels;
};

inline Tensor<double> bbox_mask(const PersonPose& person, int width, int height, double pad_frac = kDefaultPadFrac) {
    require(pad_frac >= 0, ErrorKind::parameter, "pad_frac must be non-negative");
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    bool any = false;
    for (const auto& k : person.keypoints) {
        if (!k.visible()) continue;
        any = true;
        xmin = std::min(xmin, k.x);
        xmax = std::max(xmax, k.x);
        ymin = std::min(ymin, k.y);
        ymax = std::max(ymax, k.y);
    }
    require(any, ErrorKind::empty_pose,
            "person " + std::to_string(person.id_index) + " has no confident keypoints");
    const double pad = pad_frac * std::max(width, height);
    constexpr double slack = 1e-9;
    const long x0 = std::max(0L, long(std::ceil(xmin - pad - slack)));
    const long x1 = std::min(long(width) - 1, long(std::floor(xmax + pad + slack)));
    const long y0 = std::max(0L, long(std::ceil(ymin - pad - slack)));
    const long y1 = std::min(long(height) - 1, long(std::floor(ymax + pad + slack)));
    Tensor<double> mask({height, width});
    for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) mask.at(y, x) = 1.0;
    return mask;
}

inline bool has_visible_keypoint(const PersonPose& p) {
    return std::any_of(p.keypoints.begin(), p.keypoints.end(), [](const Keypoint& k) { return k.visible(); });
}

/// Masks for IDs 1 and 2; overlapping box pixels are split 0.5/0.5 so m1 + m2 <= 1.
inline RegionMasks build_region_masks(const PoseFrame& frame, int width, int height,
                                      double pad_frac = kDefaultPadFrac) {
    RegionMasks out{Tensor<double>({height, width}), Tensor<double>({height, width})};
    int present = 0;
    for (int id : {1, 2}) {
        const PersonPose* p = frame.find(id);
        if (!p || !has_visible_keypoint(*p)) continue;
        ++present;
        (id == 1 ? out.m1 : out.m2) = bbox_mask(*p, width, height, pad_frac);
    }
    require(present > 0, ErrorKind::empty_pose, "frame has no person with confident keypoints");
    for (std::int64_t i = 0; i < out.m1.numel(); ++i)
        if (out.m1[i] > 0 && out.m2[i] > 0) out.m1[i] = out.m2[i] = 0.5;
    return out;
}

inline Tensor<double> area_downsample(const Tensor<double>& m, std::int64_t h, std::int64_t w) {
    const std::int64_t fy = m.dim(0) / h, fx = m.dim(1) / w;
    Tensor<double> out({h, w});
    const double inv = 1.0 / double(fy * fx);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0;
            for (std::int64_t dy = 0; dy < fy; ++dy)
                for (std::int64_t dx = 0; dx < fx; ++dx) acc += m.at(y * fy + dy, x * fx + dx);
            out.at(y, x) = acc * inv;
        }
    return out;
}

inline MaskPyramid build_mask_pyramid(const RegionMasks& masks,
                                      const std::vector<std::pair<int, int>>& resolutions) {
    MaskPyramid pyr;
    for (const auto& [h, w] : resolutions) {
        require(h > 0 && w > 0 && masks.height() % h == 0 && masks.width() % w == 0, ErrorKind::resolution,
                std::to_string(h) + "x" + std::to_string(w) + " does not divide base " +
                    std::to_string(masks.height()) + "x" + std::to_string(masks.width()));
        pyr.levels.push_back({area_downsample(masks.m1, h, w), area_downsample(masks.m2, h, w)});
    }
    return pyr;
}

// ---------------------------------------------------------------------------
// Body-shape adaptive retargeting

struct RetargetTransform {
    double s_x = 1;
    double s_y = 1;
    double anchor_x = 0;
    double anchor_y = 0;
};

struct BodyExtent {
    double cx = 0, cy = 0;      // centroid of confident keypoints
    double rms_x = 0, rms_y = 0;  // RMS deviation about the centroid per axis
    int count = 0;
};

inline BodyExtent body_extent(const PersonPose& p) {
    BodyExtent e;
    for (const auto& k : p.keypoints)
        if (k.visible()) {
            e.cx += k.x;
            e.cy += k.y;
            ++e.count;
        }
    if (e.count == 0) return e;
    e.cx /= e.count;
    e.cy /= e.count;
    for (const auto& k : p.keypoints)
        if (k.visible()) {
            e.rms_x += (k.x - e.cx) * (k.x - e.cx);
            e.rms_y += (k.y - e.cy) * (k.y - e.cy);
        }
    e.rms_x = std::sqrt(e.rms_x / e.count);
    e.rms_y = std::sqrt(e.rms_y / e.count);
    return e;
}

namespace detail {
inline void require_spread(const BodyExtent& e, const std::string& what) {
    require(e.count >= 2, ErrorKind::degenerate_pose, what + ": fewer than two confident keypoints");
    require(e.rms_x > 0 && e.rms_y > 0, ErrorKind::degenerate_pose, what + ": zero spread on an axis");
}
}  // namespace detail

/// One transform per frame: the scale pair is shared across the sequence, the
/// anchor is that frame's conditioned centroid. Frames lacking the ID get nullopt.
inline std::vector<std::optional<RetargetTransform>> plan_retarget(const PersonPose& ref_pose,
                                                                   const PoseSequence& cond_seq, int id_index) {
    const BodyExtent ref = body_extent(ref_pose);
    detail::require_spread(ref, "reference pose");
    std::vector<std::optional<BodyExtent>> extents;
    double sum_x = 0, sum_y = 0;
    int n = 0;
    for (std::size_t fi = 0; fi < cond_seq.frames.size(); ++fi) {
        const PersonPose* p = cond_seq.frames[fi].find(id_index);
        if (!p) {
            extents.emplace_back();
            continue;
        }
        const BodyExtent e = body_extent(*p);
        detail::require_spread(e, "frame " + std::to_string(fi));
        sum_x += e.rms_x;
        sum_y += e.rms_y;
        ++n;
        extents.emplace_back(e);
    }
    require(n > 0, ErrorKind::degenerate_pose, "id " + std::to_string(id_index) + " absent from every frame");
    const double s_x = ref.rms_x / (sum_x / n);
    const double s_y = ref.rms_y / (sum_y / n);
    std::vector<std::optional<RetargetTransform>> out;
    for (const auto& e : extents) {
        if (e)
            out.push_back(RetargetTransform{s_x, s_y, e->cx, e->cy});
        else
            out.emplace_back();
    }
    return out;
}

inline PoseSequence retarget(const PersonPose& ref_pose, const PoseSequence& cond_seq, int id_index) {
    const auto plan = plan_retarget(ref_pose, cond_seq, id_index);
    PoseSequence out = cond_seq;
    for (std::size_t fi = 0; fi < out.frames.size(); ++fi) {
        if (!plan[fi]) continue;
        const RetargetTransform& tf = *plan[fi];
        for (auto& k : out.frames[fi].find(id_index)->keypoints) {
            k.x = tf.anchor_x + tf.s_x * (k.x - tf.anchor_x);
            k.y = tf.anchor_y + tf.s_y * (k.y - tf.anchor_y);
        }
    }
    return out;
}

}  // namespace duel
