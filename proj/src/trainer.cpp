#include "xdecomp/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "xdecomp/rng.hpp"

namespace xdecomp {

std::string to_string(Protocol p) {
  return p == Protocol::lopo ? "lopo" : "intra_op";
}

Protocol protocol_from_string(const std::string& s) {
  if (s == "intra_op") return Protocol::intra_op;
  if (s == "lopo") return Protocol::lopo;
  throw std::invalid_argument("unknown protocol: " + s);
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("TrainConfig: learning_rate must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  weights.validate();
  double sum = 0.0;
  for (double f : split) {
    if (!(f >= 0.0)) throw std::invalid_argument("TrainConfig: split fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("TrainConfig: split fractions must sum to 1");
}

std::string TrainConfig::to_json_string() const {
  nlohmann::json j{{"learning_rate", learning_rate},
                   {"momentum", momentum},
                   {"batch_size", batch_size},
                   {"epochs", epochs},
                   {"lambda_r", weights.lambda_r},
                   {"lambda_d", weights.lambda_d},
                   {"loss_norm", norm == LossNorm::root ? "root" : "mean"},
                   {"seed", seed},
                   {"split", split},
                   {"protocol", to_string(protocol)}};
  return j.dump();
}

TrainConfig TrainConfig::from_json_string(const std::string& s) {
  const auto j = nlohmann::json::parse(s);
  TrainConfig c;
  if (j.contains("preset")) {
    const std::string p = j.at("preset");
    if (p == "desk")
      c = desk();
    else if (p == "clinical")
      c = clinical();
    else
      throw std::invalid_argument("unknown preset: " + p);
  }
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.weights.lambda_r = j.value("lambda_r", c.weights.lambda_r);
  c.weights.lambda_d = j.value("lambda_d", c.weights.lambda_d);
  if (j.contains("loss_norm")) {
    const std::string n = j.at("loss_norm");
    if (n == "mean")
      c.norm = LossNorm::mean;
    else if (n == "root")
      c.norm = LossNorm::root;
    else
      throw std::invalid_argument("unknown loss_norm: " + n);
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("split")) {
    const auto& sp = j.at("split");
    if (sp.size() != 3) throw std::invalid_argument("split must have 3 fractions");
    for (int i = 0; i < 3; ++i) c.split[std::size_t(i)] = sp.at(std::size_t(i));
  }
  if (j.contains("protocol")) c.protocol = protocol_from_string(j.at("protocol"));
  c.validate();
  return c;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::clinical() {
  TrainConfig c;
  c.learning_rate = 1e-6;
  c.momentum = 0.9;
  c.batch_size = 16;
  c.epochs = 200;
  return c;
}

SplitDataset split_dataset(std::vector<DecompositionSample> samples,
                           std::array<double, 3> fractions, std::uint64_t seed) {
  if (samples.empty()) throw std::invalid_argument("split_dataset: no samples");
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0))
      throw std::invalid_argument("split_dataset: fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split_dataset: fractions must sum to 1");

  const std::int64_t n = std::int64_t(samples.size());
  std::vector<std::int64_t> order(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n; ++i) order[std::size_t(i)] = i;
  Rng rng(derive_seed(seed, 0x5711));
  rng.shuffle(std::span<std::int64_t>(order));

  const std::int64_t n_train = std::llround(fractions[0] * double(n));
  const std::int64_t n_val = std::llround(fractions[1] * double(n));
  const std::int64_t n_test = n - n_train - n_val;
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw std::invalid_argument(
        "split_dataset: a split is empty after rounding (n=" + std::to_string(n) +
        " -> " + std::to_string(n_train) + "/" + std::to_string(n_val) + "/" +
        std::to_string(n_test) + ")");

  SplitDataset out;
  for (std::int64_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.push_back(std::move(samples[std::size_t(order[std::size_t(i)])]));
  }
  return out;
}

void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
              std::vector<Tensor>& velocity, double lr, double momentum) {
  if (params.size() != grads.size())
    throw std::invalid_argument("sgd_step: parameter/gradient count mismatch");
  if (velocity.empty())
    for (const Tensor* p : params) velocity.emplace_back(p->shape());
  if (velocity.size() != params.size())
    throw std::invalid_argument("sgd_step: velocity count mismatch");
  const float m = float(momentum), step = float(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& v = velocity[i];
    if (!p.same_shape(g) || !p.same_shape(v))
      throw std::invalid_argument("sgd_step: tensor shape mismatch");
    for (std::int64_t e = 0; e < p.numel(); ++e) {
      v[e] = m * v[e] - step * g[e];
      p[e] += v[e];
    }
  }
}

std::string RunRecord::losses_csv() const {
  std::string out = "epoch,train_loss,val_loss\n";
  char buf[96];
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", e, epochs[e].train_loss,
                  epochs[e].val_loss);
    out += buf;
  }
  return out;
}

namespace {

void check_samples(const std::vector<DecompositionSample>& samples,
                   const NetworkConfig& net_cfg, const char* which) {
  for (const auto& s : samples) {
    if (int(s.targets.size()) != net_cfg.components)
      throw std::invalid_argument(std::string("train: ") + which + " sample " +
                                  s.id() + " has " +
                                  std::to_string(s.targets.size()) +
                                  " targets, network expects " +
                                  std::to_string(net_cfg.components));
    if (s.input.nv != net_cfg.input_h || s.input.nu != net_cfg.input_w)
      throw std::invalid_argument(std::string("train: ") + which + " sample " +
                                  s.id() + " image size does not match the network");
  }
}

void check_leakage(const SplitDataset& data) {
  auto ids = [](const std::vector<DecompositionSample>& v) {
    std::set<std::string> out;
    for (const auto& s : v) out.insert(s.id());
    return out;
  };
  const auto tr = ids(data.train), va = ids(data.val), te = ids(data.test);
  auto overlap = [](const std::set<std::string>& a, const std::set<std::string>& b,
                    const char* what) {
    for (const auto& id : a)
      if (b.count(id))
        throw std::invalid_argument(std::string("train: sample ") + id +
                                    " appears in " + what);
  };
  overlap(tr, va, "both train and val");
  overlap(tr, te, "both train and test");
  overlap(va, te, "both val and test");
}

Tensor batch_inputs(const std::vector<const DecompositionSample*>& batch, int h, int w) {
  Tensor x({int(batch.size()), 1, h, w});
  const std::int64_t plane = std::int64_t(h) * w;
  for (std::size_t i = 0; i < batch.size(); ++i)
    std::copy_n(batch[i]->input.data.data(), plane, x.data() + std::int64_t(i) * plane);
  return x;
}

Tensor batch_targets(const std::vector<const DecompositionSample*>& batch, int d,
                     int h, int w) {
  Tensor t({int(batch.size()), d, h, w});
  const std::int64_t plane = std::int64_t(h) * w;
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (int c = 0; c < d; ++c)
      std::copy_n(batch[i]->targets[std::size_t(c)].data.data(), plane,
                  t.data() + (std::int64_t(i) * d + c) * plane);
  return t;
}

// One forward pass over a batch; returns the scalar total loss. With `out`
// non-null also runs backward and fills gradients for the first
// `out->size()` registered leaves.
double batch_loss(const NetworkParams& params, const NetworkConfig& net_cfg,
                  const TrainConfig& cfg,
                  const std::vector<const DecompositionSample*>& batch,
                  std::uint64_t graph_seed, RunMode mode,
                  std::vector<Tensor>* out) {
  GraphT<float> g(graph_seed);
  auto leaves = register_params(g, params, net_cfg, out != nullptr);
  auto x = g.leaf(batch_inputs(batch, net_cfg.input_h, net_cfg.input_w));
  auto t = g.leaf(batch_targets(batch, net_cfg.components, net_cfg.input_h,
                                net_cfg.input_w));
  auto nodes = build_forward(g, net_cfg, leaves, x, mode);
  auto loss = total_loss_node(g, nodes.decomposition, t, nodes.reconstruction, x,
                              cfg.weights, cfg.norm);
  const double value = double(g.value(loss)[0]);
  if (out) {
    g.backward(loss);
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = g.grad(leaves[i]);
  }
  return value;
}

std::vector<std::vector<const DecompositionSample*>> make_batches(
    const std::vector<DecompositionSample>& samples,
    const std::vector<std::int64_t>& order, int batch_size) {
  std::vector<std::vector<const DecompositionSample*>> batches;
  for (std::size_t i = 0; i < order.size(); i += std::size_t(batch_size)) {
    std::vector<const DecompositionSample*> b;
    for (std::size_t k = i; k < std::min(order.size(), i + std::size_t(batch_size)); ++k)
      b.push_back(&samples[std::size_t(order[k])]);
    batches.push_back(std::move(b));
  }
  return batches;
}

[[noreturn]] void diverged(const char* where, double value, int epoch, int batch,
                           const TrainConfig& cfg) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "training diverged: non-finite %s loss (%g) at epoch %d, batch %d "
                "(lr=%g, momentum=%g, batch_size=%d); lower the learning rate",
                where, value, epoch, batch, cfg.learning_rate, cfg.momentum,
                cfg.batch_size);
  throw std::runtime_error(buf);
}

}  // namespace

RunRecord train(const TrainConfig& cfg, const NetworkConfig& net_cfg,
                const SplitDataset& data, const std::string& label,
                const NetworkParams* warm_start) {
  cfg.validate();
  net_cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty training set");
  if (data.val.empty()) throw std::invalid_argument("train: empty validation set");
  check_samples(data.train, net_cfg, "train");
  check_samples(data.val, net_cfg, "val");
  check_samples(data.test, net_cfg, "test");
  check_leakage(data);

  RunRecord rec;
  rec.label = label;
  {
    nlohmann::json j{{"label", label},
                     {"train", nlohmann::json::parse(cfg.to_json_string())},
                     {"network", nlohmann::json::parse(net_cfg.to_json_string())},
                     {"samples",
                      {{"train", data.train.size()},
                       {"val", data.val.size()},
                       {"test", data.test.size()}}}};
    rec.config_json = j.dump(2);
  }

  NetworkParams params =
      warm_start ? *warm_start : build_network(net_cfg, cfg.seed);
  auto trainable = params.trainable(net_cfg.fusion);
  std::vector<Tensor> velocity;
  std::vector<Tensor> grads(trainable.size());

  // Fixed-order validation batches (no shuffling needed for evaluation).
  std::vector<std::int64_t> val_order(data.val.size());
  for (std::size_t i = 0; i < val_order.size(); ++i) val_order[i] = std::int64_t(i);
  const auto val_batches = make_batches(data.val, val_order, cfg.batch_size);

  double best_val = std::numeric_limits<double>::infinity();
  rec.best_params = params;

  std::vector<std::int64_t> order(data.train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = std::int64_t(i);
    Rng shuffler(derive_seed(cfg.seed, 0xE70C, std::uint64_t(epoch)));
    shuffler.shuffle(std::span<std::int64_t>(order));
    const auto batches = make_batches(data.train, order, cfg.batch_size);

    // Frozen evaluation: every batch objective under the epoch-start
    // weights, with the same per-batch graph seeds (hence dropout masks)
    // that the update sweep below will draw.
    auto graph_seed = [&](std::size_t k) {
      return derive_seed(cfg.seed, 0xD0u + std::uint64_t(epoch), std::uint64_t(k));
    };
    double train_loss = 0.0;
    std::int64_t train_n = 0;
    for (std::size_t k = 0; k < batches.size(); ++k) {
      const double l = batch_loss(params, net_cfg, cfg, batches[k], graph_seed(k),
                                  RunMode::train, nullptr);
      if (!std::isfinite(l)) diverged("train", l, epoch, int(k), cfg);
      train_loss += l * double(batches[k].size());
      train_n += std::int64_t(batches[k].size());
    }
    train_loss /= double(train_n);

    // Update sweep.
    for (std::size_t k = 0; k < batches.size(); ++k) {
      const double l = batch_loss(params, net_cfg, cfg, batches[k], graph_seed(k),
                                  RunMode::train, &grads);
      if (!std::isfinite(l)) diverged("update", l, epoch, int(k), cfg);
      sgd_step(trainable, grads, velocity, cfg.learning_rate, cfg.momentum);
    }

    // Validation with the post-update weights, eval mode.
    double val_loss = 0.0;
    std::int64_t val_n = 0;
    for (std::size_t k = 0; k < val_batches.size(); ++k) {
      const double l = batch_loss(params, net_cfg, cfg, val_batches[k],
                                  derive_seed(cfg.seed, 0xA11, std::uint64_t(epoch)),
                                  RunMode::eval, nullptr);
      if (!std::isfinite(l)) diverged("validation", l, epoch, int(k), cfg);
      val_loss += l * double(val_batches[k].size());
      val_n += std::int64_t(val_batches[k].size());
    }
    val_loss /= double(val_n);

    if (val_loss < best_val) {
      best_val = val_loss;
      rec.best_epoch = epoch;
      rec.best_params = params;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.epochs.push_back({train_loss, val_loss, secs});
  }
  rec.best_val_loss = best_val;

  if (!data.test.empty()) {
    std::vector<const DecompositionSample*> test_ptrs;
    for (const auto& s : data.test) test_ptrs.push_back(&s);
    const NetworkParams& best = rec.best_params;
    rec.report = evaluate(
        [&](const DecompositionSample& s) {
          return predict_decomposition(best, net_cfg, s.input).components;
        },
        test_ptrs);
  }
  return rec;
}

ProtocolResult run_protocol(Protocol protocol, const TrainConfig& cfg,
                            const NetworkConfig& net_cfg,
                            const std::vector<DecompositionSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("run_protocol: no samples");
  {
    std::set<std::string> ids;
    for (const auto& s : samples)
      if (!ids.insert(s.id()).second)
        throw std::invalid_argument("run_protocol: duplicate sample id " + s.id());
  }

  ProtocolResult result;
  if (protocol == Protocol::intra_op) {
    auto split = split_dataset(samples, cfg.split, cfg.seed);
    result.runs.push_back(train(cfg, net_cfg, split, "intra_op"));
    result.overall = result.runs.back().report;
    return result;
  }

  // Leave-one-phantom-out.
  std::vector<std::string> phantoms;
  for (const auto& s : samples)
    if (std::find(phantoms.begin(), phantoms.end(), s.phantom) == phantoms.end())
      phantoms.push_back(s.phantom);
  if (phantoms.size() < 2)
    throw std::invalid_argument("run_protocol: lopo needs at least 2 phantoms");

  for (std::size_t f = 0; f < phantoms.size(); ++f) {
    const std::string& held = phantoms[f];
    std::vector<DecompositionSample> rest, held_out;
    for (const auto& s : samples)
      (s.phantom == held ? held_out : rest).push_back(s);

    // Train/val drawn from the remaining phantoms with the train:val ratio
    // of cfg.split; the held-out phantom is the entire test set.
    const double denom = cfg.split[0] + cfg.split[1];
    if (!(denom > 0.0))
      throw std::invalid_argument("run_protocol: train and val fractions are both 0");
    std::vector<std::int64_t> order(rest.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = std::int64_t(i);
    Rng rng(derive_seed(cfg.seed, 0x10F0, f));
    rng.shuffle(std::span<std::int64_t>(order));
    std::int64_t n_val = std::llround(cfg.split[1] / denom * double(rest.size()));
    n_val = std::clamp<std::int64_t>(n_val, 1, std::int64_t(rest.size()) - 1);

    SplitDataset split;
    for (std::size_t i = 0; i < order.size(); ++i) {
      auto& dst = std::int64_t(i) < n_val ? split.val : split.train;
      dst.push_back(std::move(rest[std::size_t(order[i])]));
    }
    split.test = std::move(held_out);
    result.runs.push_back(train(cfg, net_cfg, split, "test(" + held + ")"));
  }

  // Combined report over every held-out set, dispatching each sample to the
  // fold that excluded its phantom.
  std::vector<const DecompositionSample*> all_ptrs;
  for (const auto& s : samples) all_ptrs.push_back(&s);
  result.overall = evaluate(
      [&](const DecompositionSample& s) {
        for (std::size_t f = 0; f < phantoms.size(); ++f)
          if (phantoms[f] == s.phantom)
            return predict_decomposition(result.runs[f].best_params, net_cfg,
                                         s.input)
                .components;
        throw std::runtime_error("run_protocol: unknown phantom " + s.phantom);
      },
      all_ptrs);
  return result;
}

}  // namespace xdecomp
