#pragma once

// SGD training loop with classical momentum, seeded shuffling, and
// best-validation checkpoint selection. The per-epoch train loss recorded in
// the curve is a frozen evaluation: every batch's objective is computed with
// the epoch-start weights (and the same dropout masks the update sweep will
// use) before any step of that epoch is applied, so re-evaluating later with
// the same seeds reproduces the number exactly.
//
// Two evaluation protocols: intra_op pools all phantoms and splits by
// sample, so train/val/test share phantoms but never share a view; lopo
// (leave-one-phantom-out) holds out every phantom in turn and trains on the
// rest, reporting per-fold and combined metrics.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xdecomp/losses.hpp"
#include "xdecomp/metrics.hpp"
#include "xdecomp/model.hpp"
#include "xdecomp/projection.hpp"

namespace xdecomp {

enum class Protocol { intra_op, lopo };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct TrainConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int batch_size = 16;
  int epochs = 30;
  LossWeights weights;  // lambda_r = 0.5, lambda_d = 0.1 by default
  LossNorm norm = LossNorm::mean;
  std::uint64_t seed = 42;
  std::array<double, 3> split{0.6, 0.2, 0.2};  // train/val/test fractions
  Protocol protocol = Protocol::intra_op;

  void validate() const;
  std::string to_json_string() const;
  static TrainConfig from_json_string(const std::string& s);

  // Desk-scale defaults (identical to the member initializers): small
  // images, a run finishes in minutes on one core.
  static TrainConfig desk();
  // Full-scale schedule for clinical-size data: lr 1e-6, batch 16,
  // 200 epochs.
  static TrainConfig clinical();
};

struct SplitDataset {
  std::vector<DecompositionSample> train, val, test;
};

// Seeded shuffle, then contiguous train/val/test chunks with rounded counts.
// Throws if any part rounds to empty.
SplitDataset split_dataset(std::vector<DecompositionSample> samples,
                           std::array<double, 3> fractions, std::uint64_t seed);

// Classical momentum: v <- momentum*v - lr*grad; p <- p + v.
void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
              std::vector<Tensor>& velocity, double lr, double momentum);

struct EpochStat {
  double train_loss = 0.0;  // frozen evaluation at epoch start
  double val_loss = 0.0;
  double seconds = 0.0;
};

struct RunRecord {
  std::string label;
  std::vector<EpochStat> epochs;
  int best_epoch = -1;  // 0-based epoch with the lowest validation loss
  double best_val_loss = 0.0;
  NetworkParams best_params;
  MetricReport report;  // test-set metrics with best_params (empty test -> no rows)
  std::string config_json;

  // epoch,train_loss,val_loss rows; no timing columns, so two identical
  // runs produce byte-identical files.
  std::string losses_csv() const;
};

RunRecord train(const TrainConfig& cfg, const NetworkConfig& net_cfg,
                const SplitDataset& data, const std::string& label = "run",
                const NetworkParams* warm_start = nullptr);

struct ProtocolResult {
  std::vector<RunRecord> runs;
  MetricReport overall;
};

ProtocolResult run_protocol(Protocol protocol, const TrainConfig& cfg,
                            const NetworkConfig& net_cfg,
                            const std::vector<DecompositionSample>& samples);

}  // namespace xdecomp
