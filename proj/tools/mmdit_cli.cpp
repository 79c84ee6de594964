// Command-line front end: gen-data, train, animate, retarget, filter, verify.

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
#include "mmdit/animate.hpp"
#include "mmdit/datafilter.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/image.hpp"
#include "mmdit/ops.hpp"
#include "mmdit/retarget.hpp"
#include "mmdit/synthface.hpp"
#include "mmdit/training.hpp"
#include "mmdit/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmdit;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// "a.b.c=value"; the value is parsed as JSON when possible, else kept as a string.
void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &config;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
  }
  (*node)[parts.back()] = value;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MMDIT_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("MMDIT_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---- gen-data ----

struct GenDataArgs {
  std::size_t n_clips = 8;
  std::size_t frames = 8;
  std::string profiles = "speech";
  std::size_t size = 32;
  double rotation_jitter = 2.0;
  double translation_jitter = 0.5;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed);
  std::vector<MotionProfile> profiles;
  for (const auto& p : split_list(a.profiles)) profiles.push_back(parse_motion_profile(p));
  if (profiles.empty()) throw ConfigError("--profiles is empty");
  if (a.n_clips == 0 || a.frames == 0) throw ConfigError("--n-clips and --frames must be positive");
  ClipOptions opt;
  opt.size = a.size;
  opt.rotation_jitter_deg = a.rotation_jitter;
  opt.translation_jitter = a.translation_jitter;
  const fs::path out(a.out);
  std::string manifest;
  Rng rng(seed);
  for (std::size_t i = 0; i < a.n_clips; ++i) {
    const std::uint64_t clip_seed = rng.next_u64();
    const MotionProfile profile = profiles[i % profiles.size()];
    char id[32];
    std::snprintf(id, sizeof id, "clip_%04zu", i);
    const ClipSample clip = make_clip(clip_seed, a.frames, profile, opt);
    export_clip(clip, out / "clips" / id);
    manifest += json{{"clip_id", id},
                     {"dir", std::string("clips/") + id},
                     {"profile", motion_profile_name(profile)},
                     {"seed", clip_seed},
                     {"frames", a.frames}}
                    .dump() +
                "\n";
  }
  write_text(out / "manifest.jsonl", manifest);
  std::cout << "wrote " << a.n_clips << " clips to " << out.string() << "\n";
  return 0;
}

std::vector<ClipSample> load_corpus(const fs::path& dir) {
  std::ifstream in(dir / "manifest.jsonl");
  if (!in) throw IoError("cannot open " + (dir / "manifest.jsonl").string());
  std::vector<ClipSample> clips;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      clips.push_back(import_clip(dir / json::parse(line).at("dir").get<std::string>()));
    } catch (const json::exception& e) {
      throw IoError((dir / "manifest.jsonl").string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (clips.empty()) throw ConfigError("corpus " + dir.string() + " has no clips");
  return clips;
}

// ---- train ----

struct TrainArgs {
  std::string config;
  int stage = 1;
  std::string data;
  std::string out;
  std::string init;
  std::string resume;
  bool from_scratch = false;
  bool ablate = false;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed);
  json config = a.config.empty() ? json::object() : read_json(a.config);
  for (const auto& o : a.overrides) apply_override(config, o);
  if (a.ablate) config["model"]["masked_attention"] = false;
  const ModelConfig cfg = ModelConfig::from_json(config.value("model", json::object()));
  const json train = config.value("train", json::object());
  const json stage_cfg = train.value("stage" + std::to_string(a.stage), json::object());
  auto pick = [&](const char* key) -> std::optional<json> {
    if (stage_cfg.contains(key)) return stage_cfg.at(key);
    if (train.contains(key)) return train.at(key);
    return std::nullopt;
  };

  PlanOverrides po;
  try {
    if (auto v = pick("steps")) po.steps = v->get<std::size_t>();
    if (auto v = pick("lr")) po.lr = v->get<double>();
    if (auto v = pick("warmup_steps")) po.warmup_steps = v->get<std::size_t>();
    if (auto v = pick("weight_decay")) po.weight_decay = v->get<double>();
    if (auto v = pick("frames_per_sample")) po.frames_per_sample = v->get<std::size_t>();
    if (auto v = pick("mix")) {
      po.mix = ModalityMix{v->at("visual_dropout").get<double>(), v->at("audio_only").get<double>(),
                           v->at("mixed").get<double>()};
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid train config: ") + e.what());
  }
  const StagePlan plan = make_stage_plan(a.stage, po);

  const fs::path out(a.out);
  std::optional<MixedModalDiT> model;
  if (!a.resume.empty()) {
    model.emplace(MixedModalDiT::load(a.resume, cfg));
  } else if (a.stage == 1) {
    if (!a.from_scratch && a.init.empty()) {
      throw ConfigError("stage 1 needs --from-scratch or --init <checkpoint>");
    }
    if (a.init.empty()) model.emplace(cfg, seed);
    else model.emplace(MixedModalDiT::load(a.init, cfg));
  } else {
    const fs::path prev = a.init.empty() ? out / ("stage" + std::to_string(a.stage - 1) + ".ckpt") : fs::path(a.init);
    if (!fs::exists(prev)) {
      throw ConfigError("stage " + std::to_string(a.stage) + " needs a stage " + std::to_string(a.stage - 1) +
                        " checkpoint (looked for " + prev.string() + ")");
    }
    model.emplace(MixedModalDiT::load(prev, cfg));
  }
  prepare_model_for_stage(*model, a.stage, seed + static_cast<std::uint64_t>(a.stage));

  if (a.data.empty()) throw ConfigError("--data <corpus dir> is required");
  const TrainingCorpus corpus(load_corpus(a.data), cfg, train.value("audio_seed", std::uint64_t{0}));
  fs::create_directories(out);
  std::ofstream log(out / ("stage" + std::to_string(a.stage) + ".log.jsonl"), std::ios::binary);
  if (!log) throw IoError("cannot write training log in " + out.string());
  TrainOptions opt;
  opt.seed = seed;
  opt.log = &log;
  opt.log_every = train.value("log_every", std::size_t{10});
  opt.checkpoint_every = train.value("checkpoint_every", std::size_t{0});
  opt.checkpoint_path = out / ("stage" + std::to_string(a.stage) + ".ckpt");
  opt.augment = train.value("augment", true);
  const auto losses = train_stage(*model, corpus, plan, NoiseSchedule::linear(), opt);
  double tail = 0.0;
  const std::size_t n = std::min<std::size_t>(50, losses.size());
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) tail += losses[i];
  std::cout << "stage " << a.stage << ": " << losses.size() << " steps";
  if (n) std::cout << ", mean loss of last " << n << " = " << tail / static_cast<double>(n);
  std::cout << "\ncheckpoint: " << opt.checkpoint_path->string() << "\n";
  return 0;
}

// ---- animate ----

struct AnimateArgs {
  std::string checkpoint;
  std::string ref_clip;
  std::size_t ref_frame = 0;
  std::string ref_image;
  std::string ref_landmarks;
  std::string modality = "V";
  std::string driving;
  std::string audio;
  std::string selection = "eye+mouth";
  double alpha = 1.0;
  std::string mode = "identity_anchored";
  double audio_scale = 1.0;
  int steps = 50;
  std::string sampler = "deterministic";
  std::uint64_t audio_seed = 0;
  std::optional<std::uint64_t> seed;
  std::string out;
};

DrivingSelection parse_selection(const std::string& s) {
  if (s == "eye") return DrivingSelection::eye_only();
  if (s == "mouth") return DrivingSelection::mouth_only();
  if (s == "eye+mouth") return DrivingSelection::eye_and_mouth();
  throw ConfigError("unknown driving selection '" + s + "' (eye, mouth, eye+mouth)");
}

int cmd_animate(const AnimateArgs& a) {
  AnimateRequest req;
  req.modality = parse_control_modality(a.modality);
  const bool visual = req.modality != ControlModality::kAudio;
  const bool audio = req.modality != ControlModality::kVisual;
  std::vector<std::string> missing;
  if (a.ref_clip.empty() && a.ref_image.empty()) missing.push_back("--ref-clip or --ref-image");
  if (visual && a.driving.empty()) missing.push_back("--driving (modality " + a.modality + ")");
  if (audio && a.audio.empty()) missing.push_back("--audio (modality " + a.modality + ")");
  if (!missing.empty()) {
    std::string msg = "missing inputs:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }
  const MixedModalDiT model = MixedModalDiT::load(a.checkpoint);
  if (!a.ref_clip.empty()) {
    const ClipSample ref = import_clip(a.ref_clip);
    req.reference_image = ref.frame(a.ref_frame);
    req.reference_landmarks = ref.landmarks.at(a.ref_frame);
  } else {
    req.reference_image = read_ppm(a.ref_image);
    if (!a.ref_landmarks.empty()) req.reference_landmarks = read_landmarks_json(a.ref_landmarks).at(0);
  }
  if (visual) {
    const ClipSample drive = import_clip(a.driving);
    req.driving_frames = drive.frames;
    req.driving_landmarks = drive.landmarks;
  }
  if (audio) req.audio_track = read_audio_csv(a.audio);
  req.selection = parse_selection(a.selection);
  req.alpha = a.alpha;
  req.rescale_mode = parse_rescale_mode(a.mode);
  req.audio_scale = a.audio_scale;
  req.audio_seed = a.audio_seed;
  req.sampler.steps = a.steps;
  req.sampler.mode = parse_sampler_mode(a.sampler);
  req.sampler.seed = resolve_seed(a.seed);
  const AnimateResult res = animate(model, req, NoiseSchedule::linear());
  write_video(a.out, res.frames, req.sampler.seed, model.config().to_json());
  std::cout << "wrote " << res.frames.dim(0) << " frames to " << a.out << "\n";
  return 0;
}

// ---- retarget ----

struct RetargetArgs {
  std::string clip;
  double alpha = 1.0;
  std::string mode = "identity_anchored";
  std::string out;
};

int cmd_retarget(const RetargetArgs& a) {
  const ClipSample clip = import_clip(a.clip);
  const RetargetedClip r = retarget_clip(clip.frames, clip.landmarks, a.alpha, parse_rescale_mode(a.mode));
  const fs::path out(a.out);
  fs::create_directories(out / "frames");
  for (std::size_t i = 0; i < r.landmarks.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.ppm", i);
    write_ppm(out / "frames" / name, reshape(slice(r.frames, 0, i, i + 1), {3, r.frames.dim(2), r.frames.dim(3)}));
  }
  write_landmarks_json(out / "landmarks.json", r.landmarks);
  std::cout << "retargeted " << r.landmarks.size() << " frames (alpha " << a.alpha << ", " << a.mode << ")\n";
  return 0;
}

// ---- filter ----

struct FilterArgs {
  std::string manifest;
  std::string thresholds;
  bool lenient = false;
  std::string out;
};

int cmd_filter(const FilterArgs& a) {
  FilterThresholds th;
  for (const auto& kv : split_list(a.thresholds)) th.apply_override(kv);
  const Manifest m = read_manifest(a.manifest, a.lenient);
  for (const auto& e : m.errors) std::cerr << a.manifest << ":" << e.line << ": skipped: " << e.message << "\n";
  if (m.empty()) throw ContractError("manifest " + a.manifest + " has no usable lines");
  std::vector<DatasetSummary> rows = m.summaries;
  if (!m.records.empty()) {
    const auto from_records = summarize(m.records, th);
    rows.insert(rows.end(), from_records.begin(), from_records.end());
  }
  const FilterReport rep = aggregate(rows);
  const std::string table = rep.render_table();
  if (!a.out.empty()) {
    write_text(fs::path(a.out) / "report.json", rep.to_json().dump(2) + "\n");
    write_text(fs::path(a.out) / "report.txt", table);
  }
  std::cout << table;
  return 0;
}

// ---- verify ----

int cmd_verify(const std::string& suite, std::optional<std::uint64_t> seed) {
  const auto results = run_verify(suite, resolve_seed(seed));
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed;
    std::printf("%-4s %-9s %-44s value=%.3e tol=%.1e %s\n", r.passed ? "PASS" : "FAIL", r.suite.c_str(),
                r.name.c_str(), r.value, r.tolerance, r.detail.c_str());
  }
  std::printf("%zu properties, %s\n", results.size(), ok ? "all passed" : "FAILURES");
  return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-modal portrait animation toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Render a synthetic clip corpus");
  g->add_option("--n-clips", gen.n_clips, "Number of clips");
  g->add_option("--frames", gen.frames, "Frames per clip");
  g->add_option("--profiles", gen.profiles, "Comma-separated motion profiles (speech, silent)");
  g->add_option("--size", gen.size, "Image size in pixels");
  g->add_option("--rotation-jitter", gen.rotation_jitter, "Head rotation random-walk step (degrees)");
  g->add_option("--translation-jitter", gen.translation_jitter, "Translation random-walk step (pixels)");
  g->add_option("--seed", gen.seed, "Seed (falls back to MMDIT_SEED)");
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("--config", tr.config, "JSON config file");
  t->add_option("--stage", tr.stage, "Stage (1, 2 or 3)")->check(CLI::Range(1, 3));
  t->add_option("--data", tr.data, "Corpus directory written by gen-data");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--init", tr.init, "Checkpoint of the previous stage");
  t->add_option("--resume", tr.resume, "Continue this stage from a checkpoint (optimizer state restarts)");
  t->add_flag("--from-scratch", tr.from_scratch, "Start stage 1 from random weights");
  t->add_flag("--ablate-ma-ml", tr.ablate, "Train without masked attention and masked loss");
  t->add_option("--set", tr.overrides, "Dotted config override key=value (repeatable)");
  t->add_option("--seed", tr.seed, "Seed (falls back to MMDIT_SEED)");

  AnimateArgs an;
  auto* a = app.add_subcommand("animate", "Generate a video from a checkpoint");
  a->add_option("--checkpoint", an.checkpoint, "Model checkpoint")->required();
  a->add_option("--ref-clip", an.ref_clip, "Clip directory supplying the reference frame and landmarks");
  a->add_option("--ref-frame", an.ref_frame, "Frame index within --ref-clip");
  a->add_option("--ref-image", an.ref_image, "Reference PPM image");
  a->add_option("--ref-landmarks", an.ref_landmarks, "Landmarks JSON for --ref-image");
  a->add_option("--modality", an.modality, "A, V or A+V");
  a->add_option("--driving", an.driving, "Driving clip directory");
  a->add_option("--audio", an.audio, "Audio track CSV");
  a->add_option("--drive-regions", an.selection, "eye, mouth or eye+mouth");
  a->add_option("--alpha", an.alpha, "Visual amplitude factor");
  a->add_option("--mode", an.mode, "Rescale mode: identity_anchored or literal");
  a->add_option("--audio-scale", an.audio_scale, "Audio attention scale");
  a->add_option("--steps", an.steps, "Sampling steps");
  a->add_option("--sampler", an.sampler, "deterministic or ancestral");
  a->add_option("--audio-seed", an.audio_seed, "Seed of the audio projection");
  a->add_option("--seed", an.seed, "Seed (falls back to MMDIT_SEED)");
  a->add_option("--out", an.out, "Output directory")->required();

  RetargetArgs rt;
  auto* r = app.add_subcommand("retarget", "Amplitude-adjust a driving clip");
  r->add_option("--clip", rt.clip, "Clip directory")->required();
  r->add_option("--alpha", rt.alpha, "Amplitude factor");
  r->add_option("--mode", rt.mode, "identity_anchored or literal");
  r->add_option("--out", rt.out, "Output directory")->required();

  FilterArgs fl;
  auto* f = app.add_subcommand("filter", "Gate clips and report retention per dataset");
  f->add_option("--manifest", fl.manifest, "JSON-lines manifest")->required();
  f->add_option("--thresholds", fl.thresholds, "Comma-separated overrides, e.g. sync_c=7,angle=25");
  f->add_flag("--lenient", fl.lenient, "Skip malformed lines instead of aborting");
  f->add_option("--out", fl.out, "Directory for report.json and report.txt");

  std::string suite = "all";
  std::optional<std::uint64_t> verify_seed;
  auto* v = app.add_subcommand("verify", "Run the built-in property checks");
  v->add_option("--suite", suite, "grad, attention, retarget or all");
  v->add_option("--seed", verify_seed, "Seed (falls back to MMDIT_SEED)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) return cmd_train(tr);
    if (a->parsed()) return cmd_animate(an);
    if (r->parsed()) return cmd_retarget(rt);
    if (f->parsed()) return cmd_filter(fl);
    if (v->parsed()) return cmd_verify(suite, verify_seed);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
