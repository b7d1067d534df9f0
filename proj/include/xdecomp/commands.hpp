#pragma once

// Subcommand implementations behind the xdecomp CLI. Every command that
// writes artifacts creates its output directory, writes manifest.json first
// (tool version, resolved config, input content hashes, planned outputs),
// and only then produces the artifacts, so a partial run is recognizable.
// Nothing is ever written outside the requested output directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace xdecomp {

inline constexpr const char* kToolName = "xdecomp";
inline constexpr const char* kToolVersion = "0.1.0";

struct GenOptions {
  std::filesystem::path spec_file;  // JSON phantom description
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;  // overrides the file's seed
  bool verify = false;
  int threads = 1;
};
int cmd_gen(const GenOptions& opt);

struct RenderOptions {
  std::filesystem::path volumes_dir;  // a gen output directory
  std::filesystem::path trajectory_file;
  std::filesystem::path out_dir;
  bool verify = false;
  int threads = 1;
};
int cmd_render(const RenderOptions& opt);

struct TrainCmdOptions {
  std::filesystem::path config_file;
  std::vector<std::filesystem::path> data_dirs;
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;  // overrides the config's seed
  std::optional<std::filesystem::path> warm_start;
  int threads = 1;
};
int cmd_train(const TrainCmdOptions& opt);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> data_dirs;
  std::filesystem::path out_dir;
  int threads = 1;
};
int cmd_eval(const EvalOptions& opt);

struct DecomposeOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path image;  // .xdt projection (rank 2)
  std::filesystem::path out_dir;
  int threads = 1;
};
int cmd_decompose(const DecomposeOptions& opt);

struct SelfcheckOptions {
  bool inject_fault = false;  // flip a backward kernel to prove detection
  std::uint64_t seed = 1;
  int threads = 1;
};
int cmd_selfcheck(const SelfcheckOptions& opt);

}  // namespace xdecomp
