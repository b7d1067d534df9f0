#include "xdecomp/dataset.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "xdecomp/io.hpp"
#include "xdecomp/tensor.hpp"

namespace xdecomp {

namespace {

namespace fs = std::filesystem;

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')
               ? c
               : '_';
  return out.empty() ? std::string("sample") : out;
}

std::string sample_dir_name(const DecompositionSample& s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_v%04d", s.view);
  return sanitize(s.phantom) + buf;
}

Tensor image_to_tensor(const ProjectionImage& img) {
  return Tensor({img.nv, img.nu}, img.data);
}

ProjectionImage load_image(const fs::path& base) {
  Tensor t = load_xdt1(fs::path(base).replace_extension(".xdt"));
  if (t.rank() != 2)
    throw std::runtime_error("expected a rank-2 image tensor in " + base.string() +
                             ".xdt");
  ProjectionImage img;
  img.nv = t.dim(0);
  img.nu = t.dim(1);
  img.data = t.raw();

  const fs::path sidecar = fs::path(base).replace_extension(".json");
  const auto raw = io::slurp(sidecar);
  const auto j = nlohmann::json::parse(raw.begin(), raw.end());
  img.label = j.value("label", std::string("total"));
  img.pose = pose_from_json_string(j.at("pose").dump());
  return img;
}

void save_image(const fs::path& base, const ProjectionImage& img) {
  save_xdt1(fs::path(base).replace_extension(".xdt"), image_to_tensor(img));
  save_pgm16_with_sidecar(fs::path(base).replace_extension(".pgm"), img);
}

}  // namespace

void save_dataset(const fs::path& dir, const std::vector<DecompositionSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("save_dataset: no samples");
  const int d = int(samples[0].targets.size());
  for (const auto& s : samples) {
    if (int(s.targets.size()) != d)
      throw std::invalid_argument("save_dataset: inconsistent component count");
    for (const auto& t : s.targets)
      if (t.nu != s.input.nu || t.nv != s.input.nv)
        throw std::invalid_argument("save_dataset: target size mismatch in " + s.id());
  }
  fs::create_directories(dir);

  nlohmann::json index{{"format", "xdecomp-dataset"}, {"version", 1}, {"d", d}};
  index["samples"] = nlohmann::json::array();
  for (const auto& s : samples)
    index["samples"].push_back(
        {{"dir", sample_dir_name(s)}, {"phantom", s.phantom}, {"view", s.view}});
  io::spill(dir / "index.json", index.dump(2) + "\n");

  for (const auto& s : samples) {
    const fs::path sdir = dir / sample_dir_name(s);
    fs::create_directories(sdir);
    save_image(sdir / "input", s.input);
    for (int k = 0; k < d; ++k)
      save_image(sdir / ("target_" + std::to_string(k)), s.targets[std::size_t(k)]);
  }
}

std::vector<DecompositionSample> load_dataset(const fs::path& dir) {
  const auto raw = io::slurp(dir / "index.json");
  const auto index = nlohmann::json::parse(raw.begin(), raw.end());
  if (index.value("format", std::string()) != "xdecomp-dataset")
    throw std::runtime_error("not a dataset directory: " + dir.string());
  const int d = index.at("d").get<int>();
  if (d < 1) throw std::runtime_error("dataset has no components: " + dir.string());

  std::vector<DecompositionSample> samples;
  for (const auto& e : index.at("samples")) {
    DecompositionSample s;
    s.phantom = e.at("phantom").get<std::string>();
    s.view = e.at("view").get<int>();
    const fs::path sdir = dir / e.at("dir").get<std::string>();
    s.input = load_image(sdir / "input");
    for (int k = 0; k < d; ++k) {
      ProjectionImage t = load_image(sdir / ("target_" + std::to_string(k)));
      if (t.nu != s.input.nu || t.nv != s.input.nv)
        throw std::runtime_error("target size mismatch in " + sdir.string());
      s.targets.push_back(std::move(t));
    }
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw std::runtime_error("dataset is empty: " + dir.string());
  return samples;
}

std::vector<DecompositionSample> load_datasets(const std::vector<fs::path>& dirs) {
  if (dirs.empty()) throw std::invalid_argument("load_datasets: no directories");
  std::vector<DecompositionSample> all;
  for (const auto& dir : dirs) {
    auto part = load_dataset(dir);
    if (!all.empty()) {
      if (part[0].targets.size() != all[0].targets.size())
        throw std::runtime_error("component count differs across datasets");
      if (part[0].input.nu != all[0].input.nu || part[0].input.nv != all[0].input.nv)
        throw std::runtime_error("image size differs across datasets");
    }
    for (auto& s : part) all.push_back(std::move(s));
  }
  return all;
}

}  // namespace xdecomp
