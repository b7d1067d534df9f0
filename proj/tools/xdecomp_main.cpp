#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "xdecomp/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "xdecomp: layer decomposition of transmission projections — phantom "
      "generation, projection rendering, training, and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(xdecomp::kToolName) + " " +
                                        xdecomp::kToolVersion);

  int rc = 0;

  xdecomp::GenOptions gen;
  std::uint64_t gen_seed = 0;
  auto* cg = app.add_subcommand("gen",
                                "Generate a phantom volume and its clipped layers");
  cg->add_option("--spec", gen.spec_file, "Phantom description JSON")
      ->required()
      ->check(CLI::ExistingFile);
  cg->add_option("--out", gen.out_dir, "Output directory")->required();
  auto* gen_seed_opt =
      cg->add_option("--seed", gen_seed, "Override the seed in the spec file");
  cg->add_flag("--verify", gen.verify,
               "Re-read the outputs and check the layer partition");
  cg->add_option("--threads", gen.threads, "Worker threads (default 1)");
  cg->callback([&] {
    if (*gen_seed_opt) gen.seed = gen_seed;
    rc = cmd_gen(gen);
  });

  xdecomp::RenderOptions render;
  auto* cr = app.add_subcommand(
      "render", "Render a projection dataset from generated volumes");
  cr->add_option("--volumes", render.volumes_dir, "A gen output directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  cr->add_option("--trajectory", render.trajectory_file, "Trajectory JSON")
      ->required()
      ->check(CLI::ExistingFile);
  cr->add_option("--out", render.out_dir, "Output dataset directory")->required();
  cr->add_flag("--verify", render.verify,
               "Check that layer projections sum to the full projection");
  cr->add_option("--threads", render.threads, "Worker threads (default 1)");
  cr->callback([&] { rc = cmd_render(render); });

  xdecomp::TrainCmdOptions tr;
  std::uint64_t tr_seed = 0;
  std::string warm;
  auto* ct = app.add_subcommand("train", "Train the decomposition network");
  ct->add_option("--config", tr.config_file, "Training config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  ct->add_option("--data", tr.data_dirs, "Dataset directories (repeatable)")
      ->required()
      ->check(CLI::ExistingDirectory);
  ct->add_option("--out", tr.out_dir, "Output directory")->required();
  auto* tr_seed_opt =
      ct->add_option("--seed", tr_seed, "Override the seed in the config");
  ct->add_option("--warm-start", warm, "Checkpoint to continue from")
      ->check(CLI::ExistingFile);
  ct->add_option("--threads", tr.threads, "Worker threads (default 1)");
  ct->callback([&] {
    if (*tr_seed_opt) tr.seed = tr_seed;
    if (!warm.empty()) tr.warm_start = warm;
    rc = cmd_train(tr);
  });

  xdecomp::EvalOptions ev;
  auto* ce = app.add_subcommand("eval", "Evaluate a checkpoint on datasets");
  ce->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  ce->add_option("--data", ev.data_dirs, "Dataset directories (repeatable)")
      ->required()
      ->check(CLI::ExistingDirectory);
  ce->add_option("--out", ev.out_dir, "Output directory")->required();
  ce->add_option("--threads", ev.threads, "Worker threads (default 1)");
  ce->callback([&] { rc = cmd_eval(ev); });

  xdecomp::DecomposeOptions dec;
  auto* cd = app.add_subcommand("decompose",
                                "Decompose a single projection image");
  cd->add_option("--checkpoint", dec.checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  cd->add_option("--image", dec.image, "Projection image (.xdt)")
      ->required()
      ->check(CLI::ExistingFile);
  cd->add_option("--out", dec.out_dir, "Output directory")->required();
  cd->add_option("--threads", dec.threads, "Worker threads (default 1)");
  cd->callback([&] { rc = cmd_decompose(dec); });

  xdecomp::SelfcheckOptions sc;
  auto* cs = app.add_subcommand("selfcheck",
                                "Run built-in consistency checks and exit");
  cs->add_flag("--inject-fault", sc.inject_fault,
               "Deliberately corrupt a backward kernel to prove the gradient "
               "checker catches it");
  cs->add_option("--seed", sc.seed, "Seed for the synthetic check data");
  cs->add_option("--threads", sc.threads, "Worker threads (default 1)");
  cs->callback([&] { rc = cmd_selfcheck(sc); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return rc;
}
