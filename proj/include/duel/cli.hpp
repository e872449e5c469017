#pragma once

// Command-line front end. run() never exits the process; it returns the exit
// code: 0 success, 2 bad input, 3 internal failure. Errors print one line:
//   duel: error: <kind>: <message>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "duel/checkpoint.hpp"
#include "duel/data_forge.hpp"
#include "duel/diffusion.hpp"
#include "duel/eval_bench.hpp"
#include "duel/pose_kit.hpp"
#include "duel/train_loop.hpp"

namespace duel::cli {

namespace fs = std::filesystem;

inline constexpr std::uint64_t kDefaultSeed = 1234;
inline constexpr const char* kDataRootEnv = "DUEL_DATA_ROOT";

inline std::optional<std::string> env_data_root() {
    const char* v = std::getenv(kDataRootEnv);
    if (v && *v) return std::string(v);
    return std::nullopt;
}

/// key=value pairs; values parse as JSON when they can, else as strings.
inline nlohmann::json parse_overrides(const std::vector<std::string>& sets) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        require(eq != std::string::npos && eq > 0, ErrorKind::parameter, "override '" + s + "' is not key=value");
        const std::string key = s.substr(0, eq), value = s.substr(eq + 1);
        try {
            out[key] = nlohmann::json::parse(value);
        } catch (const nlohmann::json::parse_error&) {
            out[key] = value;
        }
    }
    return out;
}

inline nlohmann::json read_json_file(const fs::path& p) {
    try {
        return nlohmann::json::parse(read_text(p));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::parse, p.string() + ": " + e.what());
    }
}

/// Config file values, then --set overrides; flags are applied by the caller afterwards.
inline nlohmann::json layered_config(const std::string& config_path, const std::vector<std::string>& sets) {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
        j = read_json_file(config_path);
        require(j.is_object(), ErrorKind::schema, config_path + ": config must be a JSON object");
    }
    const nlohmann::json over = parse_overrides(sets);
    for (const auto& [k, v] : over.items()) j[k] = v;
    return j;
}

// ---------------------------------------------------------------------------
// Contact sheets

namespace detail {

inline const std::array<const char*, 10>& digit_glyphs() {
    // 3x5 bitmaps, rows top to bottom
    static const std::array<const char*, 10> g = {"111101101101111", "010110010010111", "111001111100111",
                                                  "111001111001111", "101101111001001", "111100111001111",
                                                  "111100111101111", "111001001001001", "111101111101111",
                                                  "111101111001111"};
    return g;
}

inline void draw_number(RgbImage& img, int x0, int y0, int value, Rgb color) {
    const std::string s = std::to_string(value);
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char* glyph = digit_glyphs()[std::size_t(s[i] - '0')];
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 3; ++c)
                if (glyph[r * 3 + c] == '1') {
                    const int x = x0 + int(i) * 4 + c, y = y0 + r;
                    if (img.contains(x, y)) img.set(x, y, color);
                }
    }
}

}  // namespace detail

struct SheetLayout {
    std::vector<int> frames;  // source indices in tile order
    int columns = 0;
    int rows = 0;
};

inline SheetLayout sheet_layout(int n_frames, int every, int columns) {
    require(n_frames >= 1, ErrorKind::data, "no frames to preview");
    require(every >= 1 && columns >= 1, ErrorKind::parameter, "every and columns must be positive");
    SheetLayout l;
    for (int f = 0; f < n_frames; f += every) l.frames.push_back(f);
    l.columns = std::min(columns, int(l.frames.size()));
    l.rows = (int(l.frames.size()) + l.columns - 1) / l.columns;
    return l;
}

/// Grid of every k-th frame, each captioned with its index underneath.
inline RgbImage contact_sheet(const std::vector<RgbImage>& frames, int every, int columns) {
    const SheetLayout l = sheet_layout(int(frames.size()), every, columns);
    const int tw = frames[0].width, th = frames[0].height, caption = 9, gap = 2;
    for (const auto& f : frames)
        require(f.width == tw && f.height == th, ErrorKind::shape, "preview frames differ in size");
    RgbImage sheet(gap + l.columns * (tw + gap), gap + l.rows * (th + caption + gap), {255, 255, 255});
    for (std::size_t t = 0; t < l.frames.size(); ++t) {
        const int col = int(t) % l.columns, row = int(t) / l.columns;
        const int x0 = gap + col * (tw + gap), y0 = gap + row * (th + caption + gap);
        const RgbImage& src = frames[std::size_t(l.frames[t])];
        for (int y = 0; y < th; ++y) std::copy(src.at(0, y), src.at(0, y) + 3 * tw, sheet.at(x0, y0 + y));
        detail::draw_number(sheet, x0 + 1, y0 + th + 2, l.frames[t], {0, 0, 0});
    }
    return sheet;
}

// ---------------------------------------------------------------------------
// Shared helpers

inline std::vector<RgbImage> read_frames(const fs::path& dir) {
    std::vector<RgbImage> out;
    for (const auto& p : list_frames(dir)) out.push_back(read_png(p));
    require(!out.empty(), ErrorKind::data, dir.string() + ": no PNG frames");
    return out;
}

inline void write_frames(const fs::path& dir, const std::vector<RgbImage>& frames) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t f = 0; f < frames.size(); ++f) write_png(dir / frame_filename(int(f)), frames[f]);
}

inline std::vector<RgbImage> latents_to_frames(const Tensor<float>& latents) {
    std::vector<RgbImage> out;
    for (const auto& img : decode_frames(latents)) out.push_back(to_rgb(img));
    return out;
}

/// Inputs of generate / extend: either a video directory or explicit files (explicit wins).
struct ConditionFiles {
    std::string video;
    std::string poses;
    std::string ref1;
    std::string ref2;
    std::string background;
    std::string prompt;
    bool prompt_set = false;
};

struct LoadedConditions {
    PoseSequence poses;
    std::array<RgbImage, 2> refs;
    std::optional<RgbImage> background;
    std::string prompt;
};

inline LoadedConditions load_conditions(const ConditionFiles& f) {
    auto pick = [&](const std::string& explicit_path, const char* name) -> std::string {
        if (!explicit_path.empty()) return explicit_path;
        require(!f.video.empty(), ErrorKind::parameter, std::string("missing --") + name + " (or --video)");
        return (fs::path(f.video) / (std::string(name) == "poses"  ? "poses.json"
                                     : std::string(name) == "ref1" ? "ref_1.png"
                                                                   : "ref_2.png"))
            .string();
    };
    LoadedConditions c;
    c.poses = parse_pose_sequence(read_text(pick(f.poses, "poses")));
    c.refs = {read_png(pick(f.ref1, "ref1")), read_png(pick(f.ref2, "ref2"))};
    std::string bg = f.background;
    if (bg.empty() && !f.video.empty() && fs::exists(fs::path(f.video) / "bg.png"))
        bg = (fs::path(f.video) / "bg.png").string();
    if (!bg.empty()) c.background = read_png(bg);
    c.prompt = f.prompt;
    if (!f.prompt_set && !f.video.empty()) {
        const fs::path dir = fs::weakly_canonical(fs::path(f.video));
        const fs::path manifest = dir.parent_path() / "manifest.json";
        if (fs::exists(manifest))
            for (const auto& j : read_json_file(manifest))
                if (j.value("video_id", std::string()) == dir.filename().string())
                    c.prompt = manifest_entry_from_json(j).prompt();
    }
    require(!c.poses.frames.empty(), ErrorKind::data, "pose sequence has no frames");
    for (int i = 0; i < 2; ++i)
        require(c.refs[i].width == c.poses.width && c.refs[i].height == c.poses.height, ErrorKind::shape,
                "resolution mismatch: poses are " + std::to_string(c.poses.width) + "x" +
                    std::to_string(c.poses.height) + " but ref" + std::to_string(i + 1) + " is " +
                    std::to_string(c.refs[i].width) + "x" + std::to_string(c.refs[i].height));
    if (c.background)
        require(c.background->width == c.poses.width && c.background->height == c.poses.height, ErrorKind::shape,
                "resolution mismatch: background is " + std::to_string(c.background->width) + "x" +
                    std::to_string(c.background->height) + ", poses are " + std::to_string(c.poses.width) + "x" +
                    std::to_string(c.poses.height));
    return c;
}

inline ClipInputs inputs_for(const LoadedConditions& c, int n_frames) {
    require(n_frames >= 1 && n_frames <= int(c.poses.frames.size()), ErrorKind::parameter,
            "requested " + std::to_string(n_frames) + " frames but the pose sequence has " +
                std::to_string(c.poses.frames.size()));
    std::vector<int> idx(static_cast<std::size_t>(n_frames));
    for (int i = 0; i < n_frames; ++i) idx[std::size_t(i)] = i;
    return clip_inputs(c.poses, idx, c.refs, c.background, c.prompt);
}

struct SamplerFlags {
    int steps = 25;
    std::uint64_t seed = kDefaultSeed;
    double eta = 0.0;
    double guidance = 1.0;
    int clip_len = 24;
    int overlap = 4;
    int stride = 20;
    std::string fusion = "replace";

    SamplerConfig config() const {
        SamplerConfig c;
        c.steps = steps;
        c.seed = seed;
        c.eta = eta;
        c.guidance_scale = guidance;
        c.clip_len = clip_len;
        c.overlap = overlap;
        c.stride = stride;
        require(fusion == "replace" || fusion == "fade", ErrorKind::parameter, "fusion must be replace or fade");
        c.fusion = fusion == "fade" ? Fusion::fade : Fusion::replace;
        c.validate();
        return c;
    }
};

inline void add_sampler_flags(CLI::App* app, SamplerFlags& s) {
    app->add_option("--steps", s.steps, "DDIM steps");
    app->add_option("--seed", s.seed, "sampling seed");
    app->add_option("--eta", s.eta, "DDIM eta (0: deterministic)");
    app->add_option("--guidance", s.guidance, "prompt guidance scale (1: off)");
}

inline void add_condition_flags(CLI::App* app, ConditionFiles& c) {
    app->add_option("--video", c.video, "dataset video directory supplying poses, refs, background");
    app->add_option("--poses", c.poses, "pose JSON");
    app->add_option("--ref1", c.ref1, "reference image of ID 1");
    app->add_option("--ref2", c.ref2, "reference image of ID 2");
    app->add_option("--bg", c.background, "background image (default: white)");
    app->add_option("--prompt", c.prompt, "text prompt");
}

// ---------------------------------------------------------------------------
// Subcommands

struct Context {
    std::ostream& out;
    std::ostream& err;
};

inline void cmd_forge(Context& ctx, const std::string& out_dir, const std::string& kind, const nlohmann::json& layered,
                      const CLI::App& app, int videos, int frames, int width, int height, int identities,
                      int actions, int walkers, std::uint64_t seed) {
    const fs::path root = !out_dir.empty() ? fs::path(out_dir) : fs::path(env_data_root().value_or("data"));
    auto set = [&](const char* flag) { return app.count(flag) > 0; };
    std::error_code ec;
    fs::create_directories(root, ec);
    require(!ec && fs::is_directory(root), ErrorKind::io, "cannot create " + root.string());
    if (kind == "fashion") {
        FashionConfig c;
        for (const auto& [k, v] : layered.items()) {
            if (k == "n_walkers") c.n_walkers = v.get<int>();
            else if (k == "n_videos") c.n_videos = v.get<int>();
            else if (k == "frames_per_clip") c.frames_per_clip = v.get<int>();
            else if (k == "width") c.width = v.get<int>();
            else if (k == "height") c.height = v.get<int>();
            else if (k == "n_identities") c.n_identities = v.get<int>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else fail(ErrorKind::schema, "unknown fashion config key '" + k + "'");
        }
        if (set("--videos")) c.n_videos = videos;
        if (set("--walkers")) c.n_walkers = walkers;
        if (set("--frames")) c.frames_per_clip = frames;
        if (set("--width")) c.width = width;
        if (set("--height")) c.height = height;
        if (set("--identities")) c.n_identities = identities;
        if (set("--seed")) c.seed = seed;
        const auto entries = forge_fashion(c, root);
        ctx.out << "forged " << entries.size() << " spliced videos in " << root.string() << "\n";
        return;
    }
    require(kind == "kff", ErrorKind::parameter, "--kind must be kff or fashion");
    ForgeConfig c = forge_config_from_json(layered.empty() ? nlohmann::json::object() : layered);
    if (!layered.contains("seed")) c.seed = kDefaultSeed;
    if (set("--videos")) c.n_videos = videos;
    if (set("--frames")) c.frames_per_video = frames;
    if (set("--width")) c.width = width;
    if (set("--height")) c.height = height;
    if (set("--identities")) c.n_identities = identities;
    if (set("--actions")) c.n_actions = actions;
    if (set("--seed")) c.seed = seed;
    const auto entries = forge_synthetic(c, root);
    ctx.out << "forged " << entries.size() << " videos in " << root.string() << "\n";
}

inline void cmd_splice(Context& ctx, const std::string& a, const std::string& b, const std::string& out) {
    const Clip ca = read_single_clip(a), cb = read_single_clip(b);
    Clip s = splice_fashion(ca, cb);
    require(s.refs.size() == 2, ErrorKind::data, "both clips need a ref_1.png");
    const fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir / "frames", ec);
    require(!ec, ErrorKind::io, "cannot create " + dir.string());
    write_frames(dir / "frames", s.frames);
    write_text_atomic(dir / "poses.json", serialize_pose_sequence(s.poses));
    write_png(dir / "ref_1.png", s.refs[0]);
    write_png(dir / "ref_2.png", s.refs[1]);
    write_png(dir / "bg.png", s.background);
    ctx.out << "spliced " << s.frames.size() << " frames of " << s.poses.width << "x" << s.poses.height << " into "
            << dir.string() << "\n";
}

inline void cmd_retarget(Context& ctx, const std::string& ref_path, int ref_frame, const std::string& cond_path,
                         std::vector<int> ids, const std::string& out) {
    const PoseSequence ref = parse_pose_sequence(read_text(ref_path));
    PoseSequence seq = parse_pose_sequence(read_text(cond_path));
    require(ref_frame >= 0 && ref_frame < int(ref.frames.size()), ErrorKind::parameter,
            "reference frame " + std::to_string(ref_frame) + " out of range");
    if (ids.empty()) ids = {1, 2};
    for (int id : ids) {
        require(id == 1 || id == 2, ErrorKind::parameter, "--id must be 1 or 2");
        const PersonPose* p = ref.frames[std::size_t(ref_frame)].find(id);
        require(p != nullptr, ErrorKind::empty_pose,
                "reference frame " + std::to_string(ref_frame) + " has no person " + std::to_string(id));
        seq = retarget(*p, seq, id);
    }
    write_text_atomic(out, serialize_pose_sequence(seq));
    ctx.out << "retargeted " << seq.frames.size() << " frames to " << out << "\n";
}

inline void cmd_rasterize(Context& ctx, const std::string& poses, const std::string& out, double limb_width) {
    const PoseSequence seq = parse_pose_sequence(read_text(poses));
    PoseMapStyle style;
    style.limb_width = limb_width;
    std::vector<RgbImage> maps;
    for (const auto& f : seq.frames) maps.push_back(rasterize_pose(f, seq.width, seq.height, style, seq.topology));
    write_frames(out, maps);
    ctx.out << "rasterized " << maps.size() << " pose maps into " << out << "\n";
}

struct TrainFlags {
    int stage = 1;
    std::string data;
    std::string fashion;
    std::string incremental;
    std::string init;
    std::string resume;
    std::string out = "model.ckpt";
    std::string trace;
    std::string net;
    std::int64_t steps = 0;
    double lr = 0;
    std::uint64_t seed = 0;
    int batch = 0;
    double mixture = 0;
    int interval = 0;
    int clip_len = 0;
    std::string preset;
    std::int64_t checkpoint_every = 0;
};

inline void cmd_train(Context& ctx, const TrainFlags& f, const nlohmann::json& layered, const CLI::App& app) {
    auto set = [&](const char* flag) { return app.count(flag) > 0; };
    TrainConfig base = f.preset == "finetune" ? finetune_preset(f.stage) : TrainConfig{};
    require(f.preset.empty() || f.preset == "finetune" || f.preset == "toy", ErrorKind::parameter,
            "--preset must be toy or finetune");
    base.stage = f.stage;
    if (f.stage == 2 && f.preset != "finetune") base.steps = 1000;
    base.seed = kDefaultSeed;
    if (f.fashion.empty()) base.mixture_ratio = 0.0;
    TrainConfig cfg = train_config_from_json(layered, base);
    require(cfg.stage == f.stage, ErrorKind::parameter, "config stage disagrees with --stage");
    if (set("--steps")) cfg.steps = f.steps;
    if (set("--lr")) cfg.optimizer.learning_rate = f.lr;
    if (set("--seed")) cfg.seed = f.seed;
    if (set("--batch")) cfg.batch_size = f.batch;
    if (set("--mixture")) cfg.mixture_ratio = f.mixture;
    if (set("--interval")) cfg.frame_interval = f.interval;
    if (set("--clip-len")) cfg.clip_len = f.clip_len;
    if (set("--checkpoint-every")) cfg.checkpoint_every = f.checkpoint_every;
    if (!f.incremental.empty()) cfg.preset = "incremental";
    cfg.validate();

    const std::string data_root = !f.data.empty() ? f.data : env_data_root().value_or("");
    require(!data_root.empty(), ErrorKind::parameter, std::string("no dataset: pass --data or set ") + kDataRootEnv);
    const Dataset kff(data_root);
    std::optional<Dataset> fashion, incremental;
    if (!f.fashion.empty()) fashion.emplace(f.fashion);
    if (!f.incremental.empty()) incremental.emplace(f.incremental);
    const Sources sources{&kff, fashion ? &*fashion : nullptr, incremental ? &*incremental : nullptr};

    require(f.init.empty() || f.resume.empty(), ErrorKind::parameter, "use --init or --resume, not both");
    std::optional<LoadedCheckpoint> loaded;
    if (!f.resume.empty()) loaded.emplace(load_checkpoint(f.resume));
    if (!f.init.empty()) loaded.emplace(load_checkpoint(f.init));
    NetConfig net_cfg;
    if (!f.net.empty()) net_cfg = read_json_file(f.net).get<NetConfig>();
    Denoiser<float> net = loaded ? std::move(loaded->net) : Denoiser<float>(net_cfg, cfg.seed);
    Checkpoint meta = loaded ? loaded->meta : Checkpoint{};
    meta.net = net.config();
    const bool resuming = !f.resume.empty() && loaded->optimizer && meta.train.stage == cfg.stage;
    require(f.resume.empty() || resuming, ErrorKind::parameter,
            f.resume + " holds no resumable stage-" + std::to_string(cfg.stage) + " state");
    AdaptiveOptimizer<float> opt = resuming ? std::move(*loaded->optimizer) : AdaptiveOptimizer<float>(cfg.optimizer);
    if (!resuming) meta.train = TrainState{};
    meta.extra["stage" + std::to_string(cfg.stage)] = to_json(cfg);

    const std::string trace_path = !f.trace.empty() ? f.trace : f.out + ".trace.csv";
    std::ofstream trace(trace_path, resuming ? std::ios::app : std::ios::trunc);
    require(bool(trace), ErrorKind::io, "cannot write " + trace_path);
    if (!resuming) trace << trace_csv_header();
    TrainHooks hooks;
    hooks.on_step = [&](const TraceRow& r) {
        trace << trace_csv_row(r);
        trace.flush();
        if ((r.step + 1) % 100 == 0) ctx.err << "stage " << r.stage << " step " << r.step + 1 << " loss " << r.loss << "\n";
    };
    hooks.on_checkpoint = [&](const TrainState& st) {
        meta.train = st;
        save_checkpoint(f.out, meta, net, &opt);
    };
    const auto rows = train(net, opt, meta.schedule, cfg, sources, meta.train, hooks);
    ctx.out << "stage " << cfg.stage << ": " << rows.size() << " steps, checkpoint " << f.out << ", trace "
            << trace_path << "\n";
}

inline void cmd_generate(Context& ctx, const std::string& ckpt, const ConditionFiles& files, const SamplerFlags& sf,
                         const std::string& out, int frames) {
    const LoadedCheckpoint model = load_checkpoint(ckpt);
    const LoadedConditions cond = load_conditions(files);
    SamplerFlags s = sf;
    const int n = frames > 0 ? frames : int(cond.poses.frames.size());
    s.clip_len = n;
    s.stride = std::max(1, n - s.overlap);
    s.overlap = std::min(s.overlap, n - 1);
    SamplerConfig sc = s.config();
    const ClipSample clip = generate_clip(model.net, model.meta.schedule, inputs_for(cond, n), sc);
    write_frames(out, latents_to_frames(clip.clip.frames));
    ctx.out << "generated " << n << " frames into " << out << "\n";
}

inline void cmd_extend(Context& ctx, const std::string& ckpt, const ConditionFiles& files, const SamplerFlags& s,
                       const std::string& out, int frames) {
    const LoadedCheckpoint model = load_checkpoint(ckpt);
    const LoadedConditions cond = load_conditions(files);
    const int n = frames > 0 ? frames : int(cond.poses.frames.size());
    const LongSample ls = generate_long(model.net, model.meta.schedule, inputs_for(cond, n), s.config());
    write_frames(out, latents_to_frames(ls.latents));
    const nlohmann::json info = {{"frames", n},
                                 {"clip_starts", ls.clip_starts},
                                 {"boundaries", ls.boundaries(s.overlap)},
                                 {"overlap", s.overlap},
                                 {"fusion", s.fusion}};
    write_text_atomic(fs::path(out) / "boundaries.json", info.dump(1) + "\n");
    ctx.out << "extended to " << n << " frames in " << ls.clip_starts.size() << " windows into " << out << "\n";
}

struct EvalFlags {
    std::string pred;
    std::string gt;
    std::string poses;
    std::string ref1;
    std::string ref2;
    std::string video;
    std::vector<std::int64_t> boundaries;
    std::string json_out;
    std::string name;
};

inline MetricReport evaluate(const EvalFlags& f) {
    const std::vector<RgbImage> pred = read_frames(f.pred);
    std::vector<Image> pf;
    for (const auto& p : pred) pf.push_back(to_float(p));
    VideoMetrics m;
    m.video_id = !f.name.empty() ? f.name : fs::path(f.pred).filename().string();
    std::string gt = f.gt, poses = f.poses, ref1 = f.ref1, ref2 = f.ref2;
    if (!f.video.empty()) {
        const fs::path v(f.video);
        if (gt.empty()) gt = (v / "frames").string();
        if (poses.empty()) poses = (v / "poses.json").string();
        if (ref1.empty()) ref1 = (v / "ref_1.png").string();
        if (ref2.empty()) ref2 = (v / "ref_2.png").string();
    }
    if (!gt.empty()) {
        const auto g = read_frames(gt);
        require(g.size() >= pred.size(), ErrorKind::shape,
                "ground truth has " + std::to_string(g.size()) + " frames, prediction " + std::to_string(pred.size()));
        double s = 0, p = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const Image gi = to_float(g[i]);
            s += ssim(pf[i], gi);
            p += psnr(pf[i], gi);
        }
        m.ssim = s / double(pred.size());
        m.psnr = p / double(pred.size());
    }
    std::vector<std::int64_t> bounds = f.boundaries;
    const fs::path bfile = fs::path(f.pred) / "boundaries.json";
    if (bounds.empty() && fs::exists(bfile))
        bounds = read_json_file(bfile).at("boundaries").get<std::vector<std::int64_t>>();
    if (!bounds.empty()) m.boundary_continuity = boundary_continuity(pf, bounds);
    if (!poses.empty()) {
        require(!ref1.empty() && !ref2.empty(), ErrorKind::parameter, "id attribution needs --ref1 and --ref2");
        const PoseSequence seq = parse_pose_sequence(read_text(poses));
        require(seq.frames.size() >= pred.size(), ErrorKind::shape, "fewer pose frames than predicted frames");
        std::vector<RegionMasks> masks;
        for (std::size_t i = 0; i < pred.size(); ++i)
            masks.push_back(build_region_masks(seq.frames[i], seq.width, seq.height));
        m.id_attribution = id_attribution(pf, masks, {anchor_from_ref(read_png(ref1)), anchor_from_ref(read_png(ref2))});
    }
    MetricReport r;
    r.videos.push_back(m);
    return r;
}

inline void cmd_eval(Context& ctx, const EvalFlags& f) {
    const MetricReport r = evaluate(f);
    ctx.out << format_table(r);
    if (!f.json_out.empty()) write_text_atomic(f.json_out, to_json(r).dump(1) + "\n");
}

inline void cmd_preview(Context& ctx, const std::string& frames, int every, int columns, const std::string& out) {
    std::vector<RgbImage> imgs;
    for (const auto& p : list_frames(frames)) imgs.push_back(read_png(p));
    require(!imgs.empty(), ErrorKind::data, frames + ": no PNG frames");
    const RgbImage sheet = contact_sheet(imgs, every, columns);
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_png(out, sheet);
    const SheetLayout l = sheet_layout(int(imgs.size()), every, columns);
    ctx.out << "preview " << l.frames.size() << " tiles in " << l.rows << " rows: " << out << "\n";
}

// ---------------------------------------------------------------------------

inline std::string one_line(std::string s) {
    for (auto& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    Context ctx{out, err};
    CLI::App app{"Two-person pose-conditioned video diffusion toolkit", "duel"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", sets, "key=value override (repeatable)");
    };

    // forge
    auto* forge = app.add_subcommand("forge", "forge a synthetic dataset");
    std::string forge_out, forge_kind = "kff";
    int videos = 0, frames = 0, width = 0, height = 0, identities = 0, actions = 0, walkers = 0;
    std::uint64_t forge_seed = 0;
    forge->add_option("--out", forge_out, "dataset root (default: $DUEL_DATA_ROOT or ./data)");
    forge->add_option("--kind", forge_kind, "kff (two fighters) or fashion (spliced walkers)");
    forge->add_option("--videos", videos, "number of videos");
    forge->add_option("--frames", frames, "frames per video");
    forge->add_option("--width", width, "frame width");
    forge->add_option("--height", height, "frame height");
    forge->add_option("--identities", identities, "identity table size");
    forge->add_option("--actions", actions, "number of actions used");
    forge->add_option("--walkers", walkers, "single-person clips (fashion)");
    forge->add_option("--seed", forge_seed, "seed");
    add_config(forge);

    // splice
    auto* splice = app.add_subcommand("splice", "place two single-person clips side by side");
    std::string sa, sb, sout;
    splice->add_option("--a", sa, "left clip directory")->required();
    splice->add_option("--b", sb, "right clip directory")->required();
    splice->add_option("--out", sout, "output clip directory")->required();

    // retarget
    auto* rt = app.add_subcommand("retarget", "adapt a pose sequence to the reference body shapes");
    std::string rt_ref, rt_cond, rt_out;
    int rt_frame = 0;
    std::vector<int> rt_ids;
    rt->add_option("--ref", rt_ref, "pose JSON holding the reference poses")->required();
    rt->add_option("--ref-frame", rt_frame, "frame of --ref to use");
    rt->add_option("--cond", rt_cond, "pose JSON to retarget")->required();
    rt->add_option("--id", rt_ids, "IDs to retarget (default both)");
    rt->add_option("--out", rt_out, "output pose JSON")->required();

    // rasterize
    auto* ras = app.add_subcommand("rasterize", "render pose maps");
    std::string ras_poses, ras_out;
    double limb = 4.0;
    ras->add_option("--poses", ras_poses, "pose JSON")->required();
    ras->add_option("--out", ras_out, "output frame directory")->required();
    ras->add_option("--limb-width", limb, "limb width in pixels");

    // train
    auto* tr = app.add_subcommand("train", "train one stage");
    TrainFlags tf;
    tr->add_option("--stage", tf.stage, "1 (spatial) or 2 (temporal)")->required()->check(CLI::IsMember({1, 2}));
    tr->add_option("--data", tf.data, "dataset root (default: $DUEL_DATA_ROOT)");
    tr->add_option("--fashion", tf.fashion, "spliced fashion dataset root");
    tr->add_option("--incremental", tf.incremental, "dataset joining after incremental_after steps");
    tr->add_option("--init", tf.init, "start from this checkpoint");
    tr->add_option("--resume", tf.resume, "continue an interrupted run of the same stage");
    tr->add_option("--out", tf.out, "checkpoint path");
    tr->add_option("--trace", tf.trace, "loss trace CSV (default: <out>.trace.csv)");
    tr->add_option("--net", tf.net, "network config JSON");
    tr->add_option("--steps", tf.steps, "steps");
    tr->add_option("--lr", tf.lr, "learning rate");
    tr->add_option("--seed", tf.seed, "seed");
    tr->add_option("--batch", tf.batch, "batch size");
    tr->add_option("--mixture", tf.mixture, "fraction of fashion batches");
    tr->add_option("--interval", tf.interval, "frame interval");
    tr->add_option("--clip-len", tf.clip_len, "stage-2 clip length");
    tr->add_option("--preset", tf.preset, "toy (default) or finetune");
    tr->add_option("--checkpoint-every", tf.checkpoint_every, "save every k steps");
    add_config(tr);

    // generate / extend
    auto* gen = app.add_subcommand("generate", "sample one clip");
    auto* ext = app.add_subcommand("extend", "sample a long video by clip fusion");
    std::string ckpt, gen_out;
    int gen_frames = 0;
    ConditionFiles cf;
    SamplerFlags sf;
    for (auto* sub : {gen, ext}) {
        sub->add_option("--ckpt", ckpt, "checkpoint")->required();
        sub->add_option("--out", gen_out, "output frame directory")->required();
        sub->add_option("--frames", gen_frames, "number of frames (default: all pose frames)");
        add_condition_flags(sub, cf);
        add_sampler_flags(sub, sf);
    }
    ext->add_option("--clip-len", sf.clip_len, "frames per window");
    ext->add_option("--overlap", sf.overlap, "carried frames per window");
    ext->add_option("--stride", sf.stride, "fresh frames per window");
    ext->add_option("--fusion", sf.fusion, "replace or fade");

    // eval
    auto* ev = app.add_subcommand("eval", "score generated frames");
    EvalFlags ef;
    ev->add_option("--pred", ef.pred, "generated frame directory")->required();
    ev->add_option("--gt", ef.gt, "ground-truth frame directory");
    ev->add_option("--video", ef.video, "dataset video directory (gt, poses, refs)");
    ev->add_option("--poses", ef.poses, "pose JSON for masks");
    ev->add_option("--ref1", ef.ref1, "reference image of ID 1");
    ev->add_option("--ref2", ef.ref2, "reference image of ID 2");
    ev->add_option("--boundaries", ef.boundaries, "clip-join frame indices (default: <pred>/boundaries.json)");
    ev->add_option("--json", ef.json_out, "write the report as JSON");
    ev->add_option("--name", ef.name, "row label");

    // preview
    auto* pv = app.add_subcommand("preview", "contact sheet of every k-th frame");
    std::string pv_frames, pv_out;
    int every = 4, columns = 6;
    pv->add_option("--frames", pv_frames, "frame directory")->required();
    pv->add_option("--every", every, "frame step");
    pv->add_option("--columns", columns, "tiles per row");
    pv->add_option("--out", pv_out, "output PNG")->required();

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "duel: error: usage: " << one_line(e.what()) << "\n";
        return 2;
    }

    try {
        if (forge->parsed()) {
            cmd_forge(ctx, forge_out, forge_kind, layered_config(config_path, sets), *forge, videos, frames, width,
                      height, identities, actions, walkers, forge_seed);
        } else if (splice->parsed()) {
            cmd_splice(ctx, sa, sb, sout);
        } else if (rt->parsed()) {
            cmd_retarget(ctx, rt_ref, rt_frame, rt_cond, rt_ids, rt_out);
        } else if (ras->parsed()) {
            cmd_rasterize(ctx, ras_poses, ras_out, limb);
        } else if (tr->parsed()) {
            cmd_train(ctx, tf, layered_config(config_path, sets), *tr);
        } else if (gen->parsed()) {
            cf.prompt_set = gen->count("--prompt") > 0;
            cmd_generate(ctx, ckpt, cf, sf, gen_out, gen_frames);
        } else if (ext->parsed()) {
            cf.prompt_set = ext->count("--prompt") > 0;
            cmd_extend(ctx, ckpt, cf, sf, gen_out, gen_frames);
        } else if (ev->parsed()) {
            cmd_eval(ctx, ef);
        } else if (pv->parsed()) {
            cmd_preview(ctx, pv_frames, every, columns, pv_out);
        }
    } catch (const Error& e) {
        err << "duel: error: " << kind_name(e.kind()) << ": " << one_line(e.what()) << "\n";
        return e.kind() == ErrorKind::invariant ? 3 : 2;
    } catch (const nlohmann::json::exception& e) {
        err << "duel: error: schema: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        err << "duel: error: io: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "duel: error: internal: " << one_line(e.what()) << "\n";
        return 3;
    }
    return 0;
}

}  // namespace duel::cli
