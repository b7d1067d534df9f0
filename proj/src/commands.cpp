#include "xdecomp/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "xdecomp/dataset.hpp"
#include "xdecomp/io.hpp"
#include "xdecomp/losses.hpp"
#include "xdecomp/metrics.hpp"
#include "xdecomp/model.hpp"
#include "xdecomp/parallel.hpp"
#include "xdecomp/projection.hpp"
#include "xdecomp/rng.hpp"
#include "xdecomp/tensor.hpp"
#include "xdecomp/trainer.hpp"
#include "xdecomp/volume.hpp"

namespace xdecomp {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void apply_threads(int threads) {
  if (threads < 1 || threads > 256)
    throw std::invalid_argument("--threads must be between 1 and 256");
  set_max_threads(threads);
}

json json_file(const fs::path& path) {
  const auto raw = io::slurp(path);
  return json::parse(raw.begin(), raw.end());
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ||
            c == '(' || c == ')')
               ? c
               : '_';
  return out.empty() ? std::string("run") : out;
}

// manifest.json goes to out_dir before any artifact; inputs are recorded
// with content hashes, outputs as the planned relative paths.
void write_manifest(const fs::path& out_dir, const std::string& command,
                    const json& config, const std::vector<fs::path>& inputs,
                    const std::vector<std::string>& outputs) {
  fs::create_directories(out_dir);
  json m{{"tool", kToolName},
         {"version", kToolVersion},
         {"command", command},
         {"config", config}};
  m["inputs"] = json::array();
  for (const auto& in : inputs)
    m["inputs"].push_back(
        {{"path", in.string()}, {"fnv1a", io::hash_hex(io::hash_file(in))}});
  m["outputs"] = outputs;
  io::spill(out_dir / "manifest.json", m.dump(2) + "\n");
}

Vec3 vec3_from(const json& a) {
  if (!a.is_array() || a.size() != 3)
    throw std::invalid_argument("expected a 3-element array");
  return {a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()};
}

json vec3_to(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }

PhantomSpec phantom_spec_from_json(const json& j, std::uint64_t seed) {
  PhantomSpec s = PhantomSpec::sample(seed);
  auto rd = [](const json& obj, const char* key, double& ref) {
    if (obj.contains(key)) ref = obj.at(key).get<double>();
  };
  auto ri = [](const json& obj, const char* key, int& ref) {
    if (obj.contains(key)) ref = obj.at(key).get<int>();
  };
  auto rv = [](const json& obj, const char* key, Vec3& ref) {
    if (obj.contains(key)) ref = vec3_from(obj.at(key));
  };
  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    if (p.contains("body")) {
      const auto& b = p.at("body");
      rv(b, "center", s.body.center);
      rv(b, "radii", s.body.radii);
      rd(b, "attenuation", s.body.attenuation);
    }
    if (p.contains("spine")) {
      const auto& sp = p.at("spine");
      rd(sp, "center_x", s.spine.center_x);
      rd(sp, "center_y", s.spine.center_y);
      rd(sp, "radius", s.spine.radius);
      rd(sp, "z_half_extent", s.spine.z_half_extent);
      rd(sp, "bump_amplitude", s.spine.bump_amplitude);
      rd(sp, "bump_period", s.spine.bump_period);
      rd(sp, "attenuation", s.spine.attenuation);
    }
    if (p.contains("ribs")) {
      const auto& r = p.at("ribs");
      ri(r, "count", s.ribs.count);
      rd(r, "minor_radius", s.ribs.minor_radius);
      rd(r, "major_scale", s.ribs.major_scale);
      rd(r, "z_span", s.ribs.z_span);
      rd(r, "front_gap_deg", s.ribs.front_gap_deg);
      rd(r, "attenuation", s.ribs.attenuation);
    }
    if (p.contains("vessels")) {
      const auto& v = p.at("vessels");
      ri(v, "depth", s.vessels.depth);
      rd(v, "root_radius", s.vessels.root_radius);
      rd(v, "radius_decay", s.vessels.radius_decay);
      rd(v, "segment_length", s.vessels.segment_length);
      rd(v, "length_decay", s.vessels.length_decay);
      rd(v, "spread_deg", s.vessels.spread_deg);
      rv(v, "root", s.vessels.root);
      rd(v, "attenuation", s.vessels.attenuation);
    }
  }
  s.validate();
  return s;
}

json phantom_spec_to_json(const PhantomSpec& s) {
  return {{"seed", s.seed},
          {"body",
           {{"center", vec3_to(s.body.center)},
            {"radii", vec3_to(s.body.radii)},
            {"attenuation", s.body.attenuation}}},
          {"spine",
           {{"center_x", s.spine.center_x},
            {"center_y", s.spine.center_y},
            {"radius", s.spine.radius},
            {"z_half_extent", s.spine.z_half_extent},
            {"bump_amplitude", s.spine.bump_amplitude},
            {"bump_period", s.spine.bump_period},
            {"attenuation", s.spine.attenuation}}},
          {"ribs",
           {{"count", s.ribs.count},
            {"minor_radius", s.ribs.minor_radius},
            {"major_scale", s.ribs.major_scale},
            {"z_span", s.ribs.z_span},
            {"front_gap_deg", s.ribs.front_gap_deg},
            {"attenuation", s.ribs.attenuation}}},
          {"vessels",
           {{"depth", s.vessels.depth},
            {"root_radius", s.vessels.root_radius},
            {"radius_decay", s.vessels.radius_decay},
            {"segment_length", s.vessels.segment_length},
            {"length_decay", s.vessels.length_decay},
            {"spread_deg", s.vessels.spread_deg},
            {"root", vec3_to(s.vessels.root)},
            {"attenuation", s.vessels.attenuation}}}};
}

CameraIntrinsics intrinsics_from_config(const json& j) {
  CameraIntrinsics intr = CameraIntrinsics::desk_64();
  if (j.contains("preset")) {
    const std::string p = j.at("preset");
    if (p == "desk_64")
      intr = CameraIntrinsics::desk_64();
    else if (p == "clinical_256")
      intr = CameraIntrinsics::clinical_256();
    else
      throw std::invalid_argument("unknown intrinsics preset: " + p);
  }
  if (j.contains("detector")) {
    intr.detector_u = j.at("detector").at(0).get<int>();
    intr.detector_v = j.at("detector").at(1).get<int>();
    if (!j.contains("principal_point")) {
      intr.principal_u = intr.detector_u / 2.0;
      intr.principal_v = intr.detector_v / 2.0;
    }
  }
  if (j.contains("pixel_pitch_mm")) intr.pixel_pitch_mm = j.at("pixel_pitch_mm");
  if (j.contains("sdd_mm")) intr.sdd_mm = j.at("sdd_mm");
  if (j.contains("sid_mm")) intr.sid_mm = j.at("sid_mm");
  if (j.contains("principal_point")) {
    intr.principal_u = j.at("principal_point").at(0).get<double>();
    intr.principal_v = j.at("principal_point").at(1).get<double>();
  }
  intr.validate();
  return intr;
}

// Max |sum of targets - input| relative to the input's maximum, over a
// sample set; the additivity figure printed by render --verify.
double additivity_rel_error(const std::vector<DecompositionSample>& samples) {
  double worst = 0.0;
  for (const auto& s : samples) {
    double peak = 0.0;
    for (float v : s.input.data) peak = std::max(peak, double(v));
    if (!(peak > 0.0)) peak = 1.0;
    for (std::size_t i = 0; i < s.input.data.size(); ++i) {
      double sum = 0.0;
      for (const auto& t : s.targets) sum += double(t.data[i]);
      worst = std::max(worst, std::abs(sum - double(s.input.data[i])) / peak);
    }
  }
  return worst;
}

}  // namespace

int cmd_gen(const GenOptions& opt) {
  apply_threads(opt.threads);
  const json j = json_file(opt.spec_file);

  const std::uint64_t seed =
      opt.seed ? *opt.seed : j.value("seed", std::uint64_t(1));
  std::array<int, 3> dims{96, 96, 96};
  if (j.contains("dims"))
    for (int i = 0; i < 3; ++i) dims[std::size_t(i)] = j.at("dims").at(std::size_t(i));
  Vec3 spacing{2.0, 2.0, 2.0};
  if (j.contains("spacing")) spacing = vec3_from(j.at("spacing"));
  const std::string label = j.value("label", "phantom" + std::to_string(seed));

  ClipPlan plan;
  plan.axis = 1;
  plan.boundaries = {-12.0, 18.0};
  if (j.contains("clip")) {
    const auto& c = j.at("clip");
    plan.axis = c.value("axis", plan.axis);
    if (c.contains("boundaries"))
      plan.boundaries = c.at("boundaries").get<std::vector<double>>();
  }

  const PhantomSpec spec = phantom_spec_from_json(j, seed);
  const Volume vol = make_phantom(spec, dims, spacing);
  const std::vector<Volume> subs = clip_volume(vol, plan);

  std::vector<std::string> outputs{"phantom.xdv"};
  for (std::size_t k = 0; k < subs.size(); ++k)
    outputs.push_back("layer" + std::to_string(k) + ".xdv");
  json config{{"label", label},
              {"seed", seed},
              {"dims", dims},
              {"spacing", vec3_to(spacing)},
              {"clip", {{"axis", plan.axis}, {"boundaries", plan.boundaries}}},
              {"phantom", phantom_spec_to_json(spec)}};
  write_manifest(opt.out_dir, "gen", config, {opt.spec_file}, outputs);

  save_xdv1(opt.out_dir / "phantom.xdv", vol);
  for (std::size_t k = 0; k < subs.size(); ++k)
    save_xdv1(opt.out_dir / ("layer" + std::to_string(k) + ".xdv"), subs[k]);

  std::int64_t nonzero = 0;
  for (float v : vol.data) nonzero += v > 0.0f;
  std::printf("gen: %s %dx%dx%d, %lld voxels (%.1f%% occupied), %d layers\n",
              label.c_str(), dims[0], dims[1], dims[2],
              static_cast<long long>(vol.numel()),
              100.0 * double(nonzero) / double(vol.numel()), plan.components());

  if (opt.verify) {
    const Volume re = load_xdv1(opt.out_dir / "phantom.xdv");
    re.validate();
    bool exact = re.data == vol.data;
    std::vector<float> sum(vol.data.size(), 0.0f);
    for (std::size_t k = 0; k < subs.size(); ++k) {
      const Volume sub = load_xdv1(opt.out_dir / ("layer" + std::to_string(k) + ".xdv"));
      sub.validate();
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += sub.data[i];
    }
    exact = exact && sum == vol.data;
    std::printf("gen: verify %s (round-trip and layer partition %s)\n",
                exact ? "ok" : "FAILED", exact ? "exact" : "broken");
    if (!exact) return 1;
  }
  return 0;
}

int cmd_render(const RenderOptions& opt) {
  apply_threads(opt.threads);

  std::string label = opt.volumes_dir.filename().string();
  const fs::path vol_manifest = opt.volumes_dir / "manifest.json";
  if (fs::exists(vol_manifest)) {
    const json m = json_file(vol_manifest);
    label = m.at("config").value("label", label);
  }

  const Volume full = load_xdv1(opt.volumes_dir / "phantom.xdv");
  std::vector<Volume> layers;
  for (int k = 0;; ++k) {
    const fs::path p = opt.volumes_dir / ("layer" + std::to_string(k) + ".xdv");
    if (!fs::exists(p)) break;
    layers.push_back(load_xdv1(p));
  }
  if (layers.empty())
    throw std::runtime_error("no layer volumes in " + opt.volumes_dir.string());
  for (const auto& l : layers)
    if (l.dims != full.dims || l.spacing != full.spacing || l.origin != full.origin)
      throw std::runtime_error("layer volume grid differs from phantom.xdv");

  const json tj = json_file(opt.trajectory_file);
  const CameraIntrinsics intr =
      intrinsics_from_config(tj.value("intrinsics", json::object()));
  std::array<double, 2> cranial{0.0, 20.0}, lateral{-40.0, 40.0};
  if (tj.contains("cranial_range_deg")) {
    cranial[0] = tj.at("cranial_range_deg").at(0);
    cranial[1] = tj.at("cranial_range_deg").at(1);
  }
  if (tj.contains("lao_rao_range_deg")) {
    lateral[0] = tj.at("lao_rao_range_deg").at(0);
    lateral[1] = tj.at("lao_rao_range_deg").at(1);
  }
  const int n_cranial = tj.value("n_cranial", 5);
  const int n_lateral = tj.value("n_lateral", 9);
  const double step_mm = tj.value("step_mm", default_step_mm(full));

  const auto poses = generate_trajectory(intr, cranial, lateral, n_cranial, n_lateral);

  json config{{"phantom", label},
              {"n_views", poses.size()},
              {"d", layers.size()},
              {"step_mm", step_mm},
              {"cranial_range_deg", cranial},
              {"lao_rao_range_deg", lateral},
              {"n_cranial", n_cranial},
              {"n_lateral", n_lateral},
              {"intrinsics", json::parse(pose_to_json_string(poses[0])).at("intrinsics")}};
  std::vector<fs::path> inputs{opt.trajectory_file, opt.volumes_dir / "phantom.xdv"};
  for (std::size_t k = 0; k < layers.size(); ++k)
    inputs.push_back(opt.volumes_dir / ("layer" + std::to_string(k) + ".xdv"));
  write_manifest(opt.out_dir, "render", config, inputs, {"index.json"});

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<DecompositionSample> samples;
  samples.reserve(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    DecompositionSample s;
    s.phantom = label;
    s.view = int(i);
    s.input = render_drr(full, poses[i], step_mm);
    s.input.label = "total";
    for (std::size_t k = 0; k < layers.size(); ++k) {
      ProjectionImage t = render_drr(layers[k], poses[i], step_mm);
      t.label = "layer" + std::to_string(k);
      s.targets.push_back(std::move(t));
    }
    samples.push_back(std::move(s));
  }
  save_dataset(opt.out_dir, samples);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("render: %s, %zu views x %zu layers, %dx%d px, step %.3g mm (%.1fs)\n",
              label.c_str(), poses.size(), layers.size(), intr.detector_u,
              intr.detector_v, step_mm, secs);

  if (opt.verify) {
    const double rel = additivity_rel_error(samples);
    std::printf("render: verify additivity max rel err %.3e (%s)\n", rel,
                rel <= 1e-4 ? "ok" : "FAILED");
    if (!(rel <= 1e-4)) return 1;
  }
  return 0;
}

int cmd_train(const TrainCmdOptions& opt) {
  apply_threads(opt.threads);
  const auto raw = io::slurp(opt.config_file);
  const std::string raw_text(raw.begin(), raw.end());
  const json cj = json::parse(raw_text);

  TrainConfig cfg = TrainConfig::from_json_string(raw_text);
  if (opt.seed) cfg.seed = *opt.seed;

  auto samples = load_datasets(opt.data_dirs);
  const int d = int(samples[0].targets.size());
  const int h = samples[0].input.nv, w = samples[0].input.nu;

  NetworkConfig net_cfg;
  if (cj.contains("network"))
    net_cfg = NetworkConfig::from_json_string(cj.at("network").dump());
  if (cj.contains("network") && cj.at("network").contains("components") &&
      net_cfg.components != d)
    throw std::invalid_argument("config asks for " +
                                std::to_string(net_cfg.components) +
                                " components but the data has " + std::to_string(d));
  net_cfg.components = d;
  if (cj.contains("network") && cj.at("network").contains("input_h") &&
      (net_cfg.input_h != h || net_cfg.input_w != w))
    throw std::invalid_argument("config input size does not match the data");
  net_cfg.input_h = h;
  net_cfg.input_w = w;
  net_cfg.validate();

  NetworkParams warm;
  const NetworkParams* warm_ptr = nullptr;
  if (opt.warm_start) {
    if (cfg.protocol != Protocol::intra_op)
      throw std::invalid_argument("--warm-start is only supported for intra_op");
    Checkpoint ck = load_checkpoint(*opt.warm_start);
    if (ck.config.to_json_string() != net_cfg.to_json_string())
      throw std::invalid_argument(
          "warm-start checkpoint network config does not match this run");
    warm = std::move(ck.params);
    warm_ptr = &warm;
  }

  json config{{"train", json::parse(cfg.to_json_string())},
              {"network", json::parse(net_cfg.to_json_string())},
              {"samples", samples.size()}};
  std::vector<fs::path> inputs{opt.config_file};
  for (const auto& dir : opt.data_dirs) inputs.push_back(dir / "index.json");
  if (opt.warm_start) inputs.push_back(*opt.warm_start);
  write_manifest(opt.out_dir, "train", config, inputs,
                 {"report.json", "report.txt", "runs/"});

  const auto t0 = std::chrono::steady_clock::now();
  ProtocolResult result;
  if (cfg.protocol == Protocol::intra_op) {
    auto split = split_dataset(samples, cfg.split, cfg.seed);
    result.runs.push_back(train(cfg, net_cfg, split, "intra_op", warm_ptr));
    result.overall = result.runs.back().report;
  } else {
    result = run_protocol(cfg.protocol, cfg, net_cfg, samples);
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (const auto& run : result.runs) {
    const fs::path rdir = opt.out_dir / "runs" / sanitize(run.label);
    fs::create_directories(rdir);
    save_checkpoint(rdir / "checkpoint.xdc", run.best_params, net_cfg);
    io::spill(rdir / "losses.csv", run.losses_csv());
    json rr{{"label", run.label},
            {"best_epoch", run.best_epoch},
            {"best_val_loss", run.best_val_loss},
            {"config", json::parse(run.config_json)},
            {"report", run.report.rows.empty()
                           ? json(nullptr)
                           : json::parse(run.report.to_json_string())}};
    rr["epochs"] = json::array();
    double run_secs = 0.0;
    for (const auto& e : run.epochs) {
      rr["epochs"].push_back({{"train_loss", e.train_loss},
                              {"val_loss", e.val_loss},
                              {"seconds", e.seconds}});
      run_secs += e.seconds;
    }
    rr["wall_time_seconds"] = run_secs;
    io::spill(rdir / "runrecord.json", rr.dump(2) + "\n");
    if (!run.report.rows.empty())
      io::spill(rdir / "report.txt", run.report.to_table());
    std::printf(
        "train: %s, %zu epochs, train %.5g -> %.5g, best val %.5g (epoch %d)\n",
        run.label.c_str(), run.epochs.size(), run.epochs.front().train_loss,
        run.epochs.back().train_loss, run.best_val_loss, run.best_epoch);
  }
  io::spill(opt.out_dir / "report.json", result.overall.to_json_string() + "\n");
  io::spill(opt.out_dir / "report.txt", result.overall.to_table());
  std::printf("train: overall test metrics\n%s", result.overall.to_table().c_str());
  std::printf("train: wall time %.1fs\n", wall);
  return 0;
}

int cmd_eval(const EvalOptions& opt) {
  apply_threads(opt.threads);
  Checkpoint ck = load_checkpoint(opt.checkpoint);
  auto samples = load_datasets(opt.data_dirs);
  if (int(samples[0].targets.size()) != ck.config.components)
    throw std::invalid_argument("dataset has " +
                                std::to_string(samples[0].targets.size()) +
                                " components, checkpoint expects " +
                                std::to_string(ck.config.components));
  if (samples[0].input.nv != ck.config.input_h ||
      samples[0].input.nu != ck.config.input_w)
    throw std::invalid_argument(
        "dataset image size does not match the checkpoint network");

  json config{{"checkpoint", opt.checkpoint.string()},
              {"network", json::parse(ck.config.to_json_string())},
              {"samples", samples.size()}};
  std::vector<fs::path> inputs{opt.checkpoint};
  for (const auto& dir : opt.data_dirs) inputs.push_back(dir / "index.json");
  write_manifest(opt.out_dir, "eval", config, inputs, {"report.json", "report.txt"});

  std::vector<const DecompositionSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const MetricReport report = evaluate(
      [&](const DecompositionSample& s) {
        return predict_decomposition(ck.params, ck.config, s.input).components;
      },
      ptrs);
  io::spill(opt.out_dir / "report.json", report.to_json_string() + "\n");
  io::spill(opt.out_dir / "report.txt", report.to_table());
  std::printf("%s", report.to_table().c_str());
  return 0;
}

int cmd_decompose(const DecomposeOptions& opt) {
  apply_threads(opt.threads);
  Checkpoint ck = load_checkpoint(opt.checkpoint);

  Tensor t = load_xdt1(opt.image);
  if (t.rank() != 2)
    throw std::invalid_argument("decompose expects a rank-2 image tensor");
  ProjectionImage img;
  img.nv = t.dim(0);
  img.nu = t.dim(1);
  img.data = t.raw();
  img.label = "total";
  img.pose = pose_from_angles(CameraIntrinsics::desk_64(), 0.0, 0.0);
  const fs::path sidecar = fs::path(opt.image).replace_extension(".json");
  if (fs::exists(sidecar)) {
    const json sj = json_file(sidecar);
    img.label = sj.value("label", img.label);
    if (sj.contains("pose")) img.pose = pose_from_json_string(sj.at("pose").dump());
  }
  const bool resized =
      img.nv != ck.config.input_h || img.nu != ck.config.input_w;
  if (resized) img = resize_bilinear(img, ck.config.input_w, ck.config.input_h);

  std::vector<std::string> outputs{"summary.json", "reconstruction.xdt",
                                   "reconstruction.pgm", "reconstruction.json"};
  for (int c = 0; c < ck.config.components; ++c)
    for (const char* ext : {".xdt", ".pgm", ".json"})
      outputs.push_back("layer_" + std::to_string(c) + ext);
  json config{{"checkpoint", opt.checkpoint.string()},
              {"image", opt.image.string()},
              {"resized", resized},
              {"network", json::parse(ck.config.to_json_string())}};
  write_manifest(opt.out_dir, "decompose", config, {opt.checkpoint, opt.image},
                 outputs);

  const Prediction pred = predict_decomposition(ck.params, ck.config, img);
  auto save_image = [&](const fs::path& base, const ProjectionImage& im) {
    save_xdt1(fs::path(base).replace_extension(".xdt"),
              Tensor({im.nv, im.nu}, im.data));
    save_pgm16_with_sidecar(fs::path(base).replace_extension(".pgm"), im);
  };
  for (int c = 0; c < ck.config.components; ++c)
    save_image(opt.out_dir / ("layer_" + std::to_string(c)),
               pred.components[std::size_t(c)]);
  save_image(opt.out_dir / "reconstruction", pred.reconstruction);

  double dev_sum = 0.0, dev_max = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double dv =
        std::abs(double(pred.reconstruction.data[i]) - double(img.data[i]));
    dev_sum += dv;
    dev_max = std::max(dev_max, dv);
  }
  json summary{{"components", ck.config.components},
               {"images_written", ck.config.components + 1},
               {"resized_input", resized},
               {"layer_sum_deviation_mean", dev_sum / double(img.data.size())},
               {"layer_sum_deviation_max", dev_max}};
  io::spill(opt.out_dir / "summary.json", summary.dump(2) + "\n");
  std::printf(
      "decompose: wrote %d layer images + reconstruction; |sum-in| mean %.3e, "
      "max %.3e%s\n",
      ck.config.components, dev_sum / double(img.data.size()), dev_max,
      resized ? " (input resized)" : "");
  return 0;
}

// ---- selfcheck ---------------------------------------------------------

namespace {

struct CheckResult {
  bool ok = false;
  std::string detail;
};

double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

CheckResult check_rng(std::uint64_t seed) {
  Rng a(seed), b(seed);
  for (int i = 0; i < 64; ++i)
    if (a.next_u64() != b.next_u64()) return {false, "streams diverge"};
  Rng r(seed);
  for (int i = 0; i < 256; ++i) {
    const double u = r.uniform();
    if (!(u >= 0.0 && u < 1.0)) return {false, "uniform out of range"};
    if (r.below(10) >= 10) return {false, "below(10) out of range"};
    if (!std::isfinite(r.normal())) return {false, "non-finite normal draw"};
  }
  std::vector<int> perm(23);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = int(i);
  r.shuffle(std::span<int>(perm));
  auto sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i)
    if (sorted[i] != int(i)) return {false, "shuffle is not a permutation"};
  return {true, "repeatable streams, bounded draws, valid shuffle"};
}

CheckResult check_tensor_roundtrip(std::uint64_t seed) {
  Rng r(seed);
  for (const auto& shape : std::vector<std::vector<int>>{{7}, {5, 3}, {2, 3, 4, 5}}) {
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = float(r.normal());
    std::ostringstream os(std::ios::binary);
    write_xdt1(os, t);
    std::istringstream is(os.str(), std::ios::binary);
    const Tensor back = read_xdt1(is);
    if (!back.same_shape(t) || back.raw() != t.raw())
      return {false, "round-trip mismatch"};
  }
  return {true, "3 shapes bit-exact through the container"};
}

CheckResult check_volume_partition(std::uint64_t seed) {
  const Volume v = make_phantom(PhantomSpec::sample(seed), {32, 32, 32},
                                {5.0, 5.0, 5.0});
  ClipPlan plan;
  plan.axis = 1;
  plan.boundaries = {v.origin[1] + 55.0, v.origin[1] + 105.0};
  const auto subs = clip_volume(v, plan);
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    float sum = 0.0f;
    int owners = 0;
    for (const auto& s : subs) {
      const float sv = s.data[std::size_t(i)];
      sum += sv;
      owners += sv != 0.0f;
      if (sv != 0.0f && sv != v.data[std::size_t(i)])
        return {false, "voxel value changed by clipping"};
    }
    if (sum != v.data[std::size_t(i)]) return {false, "layer sum is not exact"};
    if (owners > 1) return {false, "voxel assigned to two slabs"};
  }
  return {true, "bit-exact partition into " + std::to_string(subs.size()) + " slabs"};
}

CheckResult check_cube_integral() {
  Volume v = make_centered_volume({40, 40, 40}, {1.0, 1.0, 1.0});
  for (int z = 10; z < 30; ++z)
    for (int y = 10; y < 30; ++y)
      for (int x = 10; x < 30; ++x) v.at(x, y, z) = 0.01f;
  CameraIntrinsics intr;
  intr.detector_u = 65;
  intr.detector_v = 65;
  intr.pixel_pitch_mm = 4.0;
  intr.principal_u = 32.5;
  intr.principal_v = 32.5;
  const ProjectionImage img =
      render_drr(v, pose_from_angles(intr, 0.0, 0.0), 0.5);
  const double got = img.at(32, 32);
  // Attenuation times path length, with mu as quantized by f32 storage. The
  // integrator accumulates its 40 samples in f32 too, so allow a few ulp of
  // rounding per step.
  const double want = double(v.at(15, 15, 15)) * 20.0;
  char buf[96];
  std::snprintf(buf, sizeof buf, "central ray %.12g vs %.12g", got, want);
  return {rel_diff(got, want) <= 1e-6, buf};
}

CheckResult check_projection_additivity(std::uint64_t seed) {
  const Volume v = make_phantom(PhantomSpec::sample(seed), {48, 48, 48},
                                {3.5, 3.5, 3.5});
  ClipPlan plan;
  plan.axis = 1;
  plan.boundaries = {v.origin[1] + 60.0, v.origin[1] + 100.0};
  const auto poses = generate_trajectory(CameraIntrinsics::desk_64(), {0.0, 16.0},
                                         {-24.0, 24.0}, 2, 3);
  const auto samples = render_dataset(v, plan, poses, default_step_mm(v), "check");
  const double rel = additivity_rel_error(samples);
  char buf[64];
  std::snprintf(buf, sizeof buf, "max rel err %.3e over %zu views", rel,
                samples.size());
  return {rel <= 1e-4, buf};
}

CheckResult check_loss_endpoints(std::uint64_t seed) {
  Rng r(seed);
  Tensor pred({2, 3, 6, 6}), target(pred.shape());
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    pred[i] = float(r.normal());
    target[i] = float(r.normal());
  }
  double mse = 0.0, mae = 0.0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double dd = double(pred[i]) - double(target[i]);
    mse += dd * dd;
    mae += std::abs(dd);
  }
  mse /= double(pred.numel());
  mae /= double(pred.numel());
  const double l2 = double(decomposition_loss(pred, target, 1.0f));
  const double l1 = double(decomposition_loss(pred, target, 0.0f));
  if (rel_diff(l2, mse) > 1e-6) return {false, "lambda_d=1 does not match MSE"};
  if (rel_diff(l1, mae) > 1e-6) return {false, "lambda_d=0 does not match MAE"};
  LossWeights off;
  off.lambda_r = 0.0;
  const float with_recon = total_loss(pred, target, pred, target, off);
  const float alone = decomposition_loss(pred, target, float(off.lambda_d));
  if (with_recon != alone)
    return {false, "lambda_r=0 total differs from decomposition loss"};
  return {true, "elastic-net endpoints match MSE/MAE; lambda_r=0 is exact"};
}

CheckResult check_metric_fixed_points(std::uint64_t seed) {
  Rng r(seed);
  ProjectionImage a;
  a.nu = a.nv = 32;
  a.data.resize(std::size_t(a.numel()));
  for (auto& v : a.data) v = float(r.uniform());
  ProjectionImage b = a;
  const float offset = 0.125f;
  for (auto& v : b.data) v += offset;
  const double p = psnr(a, b, double(offset) * 10.0);
  if (std::abs(p - 20.0) > 1e-3)
    return {false, "constant-offset PSNR is " + std::to_string(p) + " dB"};
  if (ssim(a, a, 1.0) != 1.0) return {false, "SSIM(a, a) != 1.0 exactly"};
  const double peak = 0.7;
  ProjectionImage zero = a, flat = a;
  std::fill(zero.data.begin(), zero.data.end(), 0.0f);
  std::fill(flat.data.begin(), flat.data.end(), float(peak));
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double want = c1 / (peak * peak + c1);
  if (std::abs(ssim(zero, flat, peak) - want) > 1e-9)
    return {false, "SSIM(0, peak) does not match the closed form"};
  return {true, "20 dB offset, exact self-SSIM, closed-form floor"};
}

CheckResult check_grad_network(std::uint64_t seed, bool expect_fail) {
  NetworkConfig cfg;
  cfg.input_h = cfg.input_w = 16;
  cfg.levels = 2;
  cfg.base_channels = 2;
  cfg.components = 2;
  cfg.dropout_p = 0.5;
  NetworkParamsT<double> params = build_network(cfg, seed).cast<double>();
  auto ptrs = params.trainable(cfg.fusion);
  // Fresh init leaves exact zeros (biases) that park relu kinks right at the
  // evaluation point; jitter moves every pre-activation off its kink.
  Rng jitter(derive_seed(seed, 13));
  for (auto* p : ptrs)
    for (std::int64_t i = 0; i < p->numel(); ++i)
      (*p)[i] += 0.1 * (jitter.uniform() - 0.5);
  Rng r(derive_seed(seed, 7));
  TensorT<double> x({1, 1, 16, 16}), t({1, 2, 16, 16});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = r.uniform();
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = r.uniform();
  LossWeights w;
  auto eval = [&](std::vector<TensorT<double>>* grads) -> double {
    GraphT<double> g(derive_seed(seed, 11));
    auto leaves = register_params(g, params, cfg, grads != nullptr);
    auto xb = g.leaf(x);
    auto tb = g.leaf(t);
    auto nodes = build_forward(g, cfg, leaves, xb, RunMode::train);
    auto loss = total_loss_node(g, nodes.decomposition, tb, nodes.reconstruction,
                                xb, w, LossNorm::mean);
    const double v = g.value(loss)[0];
    if (grads) {
      g.backward(loss);
      for (std::size_t i = 0; i < ptrs.size(); ++i)
        grads->push_back(g.grad(leaves[i]));
    }
    return v;
  };
  const auto rep = grad_check_directional<double>(
      std::span<TensorT<double>* const>(ptrs.data(), ptrs.size()), eval, 8,
      1e-5, 1e-5, seed);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%d directions, max rel err %.3e",
                rep.directions, double(rep.max_rel_err));
  if (expect_fail)
    return {!rep.pass, std::string("fault injected; checker ") +
                           (rep.pass ? "MISSED it" : "caught it") + " (" + buf + ")"};
  return {rep.pass, buf};
}

CheckResult check_thread_invariance(std::uint64_t seed) {
  const int saved = max_threads();
  Rng r(seed);
  TensorT<float> x({2, 3, 12, 12}), w({4, 3, 3, 3}), b({4});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = float(r.normal());
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = float(r.normal());
  for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = float(r.normal());
  auto run = [&](int threads) {
    set_max_threads(threads);
    Graph g;
    auto xv = g.leaf(x, true);
    auto wv = g.leaf(w, true);
    auto bv = g.leaf(b, true);
    auto y = g.mean_all(g.square(g.conv2d(xv, wv, bv)));
    g.backward(y);
    std::vector<float> out = g.value(y).raw();
    auto append = [&](const Tensor& t) {
      out.insert(out.end(), t.raw().begin(), t.raw().end());
    };
    append(g.grad(xv));
    append(g.grad(wv));
    append(g.grad(bv));
    return out;
  };
  const auto one = run(1), four = run(4);
  set_max_threads(saved);
  return {one == four, "conv forward+backward bitwise equal with 1 and 4 workers"};
}

CheckResult check_train_determinism(std::uint64_t seed) {
  Rng r(seed);
  auto mk = [&](const std::string& phantom, int view) {
    DecompositionSample s;
    s.phantom = phantom;
    s.view = view;
    s.input.nu = s.input.nv = 16;
    s.input.data.resize(256);
    for (auto& v : s.input.data) v = float(r.uniform());
    for (int c = 0; c < 2; ++c) {
      ProjectionImage t = s.input;
      t.label = "layer" + std::to_string(c);
      for (auto& v : t.data) v *= 0.5f;
      s.targets.push_back(std::move(t));
    }
    return s;
  };
  SplitDataset data;
  for (int i = 0; i < 8; ++i) data.train.push_back(mk("p", i));
  for (int i = 8; i < 10; ++i) data.val.push_back(mk("p", i));
  for (int i = 10; i < 12; ++i) data.test.push_back(mk("p", i));
  NetworkConfig net;
  net.input_h = net.input_w = 16;
  net.levels = 2;
  net.base_channels = 2;
  net.components = 2;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = seed;
  const RunRecord r1 = train(cfg, net, data, "det");
  const RunRecord r2 = train(cfg, net, data, "det");
  if (r1.losses_csv() != r2.losses_csv())
    return {false, "loss curves differ between identical runs"};
  const auto p1 = r1.best_params.all_tensors();
  const auto p2 = r2.best_params.all_tensors();
  for (std::size_t i = 0; i < p1.size(); ++i)
    if (p1[i]->raw() != p2[i]->raw())
      return {false, "best checkpoints differ between identical runs"};
  return {true, "2-epoch runs bitwise identical (losses and weights)"};
}

}  // namespace

int cmd_selfcheck(const SelfcheckOptions& opt) {
  apply_threads(opt.threads);
  struct Item {
    const char* name;
    std::function<CheckResult()> fn;
  };
  const std::uint64_t seed = opt.seed;
  std::vector<Item> items{
      {"rng determinism", [&] { return check_rng(seed); }},
      {"tensor container round-trip", [&] { return check_tensor_roundtrip(seed); }},
      {"volume clip partition", [&] { return check_volume_partition(seed); }},
      {"uniform cube line integral", [&] { return check_cube_integral(); }},
      {"projection additivity", [&] { return check_projection_additivity(seed); }},
      {"loss endpoints", [&] { return check_loss_endpoints(seed); }},
      {"metric fixed points", [&] { return check_metric_fixed_points(seed); }},
      {"network gradient check",
       [&] {
         if (opt.inject_fault) {
           set_fault_flip_relu_backward(true);
           auto res = check_grad_network(seed, true);
           set_fault_flip_relu_backward(false);
           return res;
         }
         return check_grad_network(seed, false);
       }},
      {"thread-count invariance", [&] { return check_thread_invariance(seed); }},
      {"training determinism", [&] { return check_train_determinism(seed); }},
  };
  int failures = 0;
  for (const auto& item : items) {
    CheckResult res;
    try {
      res = item.fn();
    } catch (const std::exception& e) {
      res = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] %s — %s\n", res.ok ? " ok " : "FAIL", item.name,
                res.detail.c_str());
    failures += !res.ok;
  }
  if (failures) std::printf("selfcheck: %d of %zu checks failed\n", failures, items.size());
  else std::printf("selfcheck: all %zu checks passed\n", items.size());
  return failures ? 1 : 0;
}

}  // namespace xdecomp
