#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "data.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace marscf {

/// Training aborted because the objective stayed non-finite.
struct numerical_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 64;
  double lr = 8e-4;
  std::uint64_t seed = 0;
  double clip_norm = 50.0;
  int checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
  int init_batch = 64;       // images used for actnorm data-dependent init
  std::string out_dir;       // metrics + checkpoints land here when non-empty

  void validate() const {
    check(epochs >= 1, "train config: epochs must be >= 1");
    check(batch_size >= 1, "train config: batch size must be >= 1");
    check(lr >= 0.0, "train config: lr must be >= 0");  // 0 = frozen diagnostic run
    check(clip_norm > 0.0, "train config: clip norm must be > 0");
    check(init_batch >= 1, "train config: init batch must be >= 1");
  }
};

struct MetricRecord {
  int epoch;
  std::string split;  // "train" | "val"
  double bpd;
  double loss;
  double grad_norm;
  double elapsed;  // seconds; the one nondeterministic field
};

struct TrainResult {
  std::vector<MetricRecord> metrics;
  double post_init_val_bpd = 0.0;
  double final_val_bpd = 0.0;
  int nonfinite_skipped = 0;
};

/// bpd = -logp/(dims*ln2) + bits; the +bits accounts for scaling discrete
/// pixels into a density on [0,1).
inline Tensor bits_per_dim(const Tensor& logp_nats, std::int64_t dims, int bits) {
  check(dims > 0, "bits_per_dim: dims must be > 0");
  return add_const(scale(logp_nats, -1.0 / (static_cast<double>(dims) * std::log(2.0))),
                   static_cast<double>(bits));
}

/// Mean bits/dim over a dataset split under a fixed dequantization seed.
inline double evaluate(Model& model, const Dataset& ds, std::uint64_t dequant_seed,
                       int batch_size = 64) {
  check(!ds.images.empty(), "evaluate: empty split");
  check(model.initialized(), "evaluate: model not initialized");
  NoGradScope ng;
  double total = 0.0;
  const std::int64_t dims = ds.dims();
  for (size_t at = 0; at < ds.images.size(); at += static_cast<size_t>(batch_size)) {
    std::vector<size_t> idx;
    for (size_t i = at; i < std::min(at + batch_size, ds.images.size()); ++i) idx.push_back(i);
    // the noise stream restarts per image, so the metric does not depend on
    // dataset order
    Tensor x({static_cast<int>(idx.size()), ds.channels, ds.size, ds.size});
    for (size_t i = 0; i < idx.size(); ++i) {
      Rng deq(dequant_seed);
      Tensor img = Tensor::from({ds.channels, ds.size, ds.size}, ds.images[idx[i]]);
      Tensor d = dequantize(img, ds.bits, deq);
      std::copy(d.data(), d.data() + dims, x.data() + static_cast<std::int64_t>(i) * dims);
    }
    Tensor bpd = bits_per_dim(model.logprob(x), dims, ds.bits);
    for (std::int64_t i = 0; i < bpd.size(); ++i) total += bpd.data()[i];
  }
  return total / static_cast<double>(ds.images.size());
}

inline void write_metrics(const std::string& path, const std::vector<MetricRecord>& metrics) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "train: cannot open metrics log " + path);
  out.setf(std::ios::fmtflags(0), std::ios::floatfield);
  out.precision(17);
  for (const auto& m : metrics)
    out << "{\"epoch\":" << m.epoch << ",\"split\":\"" << m.split << "\",\"bpd\":" << m.bpd
        << ",\"loss\":" << m.loss << ",\"grad_norm\":" << m.grad_norm
        << ",\"elapsed\":" << m.elapsed << "}\n";
  check(out.good(), "train: metrics write failed for " + path);
}

/// Maximum-likelihood training: dequantize, forward, loss = -mean(logp),
/// clip to a global gradient norm, Adamax step. The first batch only performs
/// actnorm data-dependent initialization (no optimizer step). Non-finite
/// losses skip the step; three consecutive ones abort.
inline TrainResult train(Model& model, const Dataset& train_ds, const Dataset& val_ds,
                         const TrainConfig& cfg) {
  cfg.validate();
  check(!train_ds.images.empty(), "train: empty training set");
  check(!val_ds.images.empty(), "train: empty validation set");

  std::vector<std::pair<std::string, Tensor>> params;
  model.visit_params([&](const std::string& name, Tensor& t) {
    t.set_requires_grad(true);
    params.emplace_back(name, t);
  });

  Rng shuffle_rng(cfg.seed);
  Rng dequant_rng(cfg.seed + 1);
  const std::uint64_t eval_seed = cfg.seed + 2;
  Adamax opt(cfg.lr);
  const std::int64_t dims = train_ds.dims();
  const double ln2 = std::log(2.0);

  // actnorm init pass: first init_batch images, no optimizer step
  {
    NoGradScope ng;
    std::vector<size_t> idx;
    for (size_t i = 0; i < std::min<size_t>(cfg.init_batch, train_ds.images.size()); ++i)
      idx.push_back(i);
    Tensor x = dequantize(gather_batch(train_ds, idx), train_ds.bits, dequant_rng);
    model.forward(x, true);
  }

  TrainResult result;
  result.post_init_val_bpd = evaluate(model, val_ds, eval_seed);
  result.metrics.push_back({0, "val", result.post_init_val_bpd, 0.0, 0.0, 0.0});

  std::vector<size_t> order(train_ds.images.size());
  std::iota(order.begin(), order.end(), 0);
  int consecutive_nonfinite = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0, norm_sum = 0.0;
    int batches = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
      std::vector<size_t> idx(order.begin() + at,
                              order.begin() + std::min(at + cfg.batch_size, order.size()));
      Tensor x = dequantize(gather_batch(train_ds, idx), train_ds.bits, dequant_rng);
      Tensor loss;
      {
        TapeScope ts;
        loss = scale(mean(model.logprob(x)), -1.0);
        if (!std::isfinite(loss.item())) {
          ++result.nonfinite_skipped;
          if (++consecutive_nonfinite >= 3)
            throw numerical_error("train: 3 consecutive non-finite losses at epoch " +
                                  std::to_string(epoch));
          continue;
        }
        consecutive_nonfinite = 0;
        for (auto& [name, t] : params) t.zero_grad();
        ts.tape.backward(loss);
      }
      // global-norm gradient clipping
      double sq = 0.0;
      for (auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (double g : t.grad_values()) sq += g * g;
      }
      const double norm = std::sqrt(sq);
      if (std::isfinite(norm) && norm > cfg.clip_norm) {
        const double s = cfg.clip_norm / norm;
        for (auto& [name, t] : params) {
          if (!t.has_grad()) continue;
          double* g = t.grad();
          for (std::int64_t i = 0; i < t.size(); ++i) g[i] *= s;
        }
      }
      opt.step(params);
      loss_sum += loss.item();
      norm_sum += norm;
      ++batches;
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double mean_loss = batches ? loss_sum / batches : 0.0;
    const double train_bpd = mean_loss / (static_cast<double>(dims) * ln2) + train_ds.bits;
    const double mean_norm = batches ? norm_sum / batches : 0.0;
    result.metrics.push_back({epoch, "train", train_bpd, mean_loss, mean_norm, elapsed});
    const double val_bpd = evaluate(model, val_ds, eval_seed);
    result.metrics.push_back({epoch, "val", val_bpd, 0.0, 0.0, 0.0});
    result.final_val_bpd = val_bpd;

    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
        (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs))
      save_checkpoint(cfg.out_dir + "/ckpt_epoch" + std::to_string(epoch) + ".mscf", model,
                      &opt);
  }

  if (!cfg.out_dir.empty()) {
    write_metrics(cfg.out_dir + "/metrics.jsonl", result.metrics);
    save_checkpoint(cfg.out_dir + "/model.mscf", model, &opt);
  }
  return result;
}

}  // namespace marscf
