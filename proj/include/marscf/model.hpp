#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "layers.hpp"
#include "ops.hpp"
#include "prior.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace marscf {

struct FlowConfig {
  int channels = 1;  // C
  int size = 8;      // N (square input)
  int levels = 2;    // n
  int flow_steps = 2;
  CouplingKind coupling = CouplingKind::affine;
  int width = 32;           // coupling parameter-network hidden width
  int mix_components = 4;   // K for mixlogcdf couplings
  int prior_hidden = 32;    // Conv-LSTM filters per layer
  int prior_cond = 8;       // conditioning-convolution output channels
  int prior_layers = 3;     // Conv-LSTM depth

  void validate() const {
    check(channels >= 1, "config: channels must be >= 1");
    check(levels >= 1, "config: levels must be >= 1");
    check(size >= 1, "config: size must be >= 1");
    check(size % (1 << levels) == 0,
          "config: size " + std::to_string(size) + " not divisible by 2^" +
              std::to_string(levels));
    check(flow_steps >= 1, "config: flow_steps must be >= 1");
    check(width >= 1, "config: width must be >= 1");
    check(mix_components >= 1, "config: mix_components must be >= 1");
    check(prior_hidden >= 1 && prior_layers >= 1 && prior_cond >= 1,
          "config: prior hyperparameters must be >= 1");
  }
};

struct LevelShape {
  int channels, height, width;
  std::int64_t elements() const {
    return static_cast<std::int64_t>(channels) * height * width;
  }
};

/// Latent shapes l_1..l_{n-1} then h_n. l_i: [2^i C, N/2^i, N/2^i];
/// h_n: [2^{n+1} C, N/2^n, N/2^n]. Element counts always sum to C*N^2.
inline std::vector<LevelShape> channel_dims(const FlowConfig& cfg) {
  cfg.validate();
  std::vector<LevelShape> out;
  std::int64_t total = 0;
  for (int i = 1; i < cfg.levels; ++i) {
    LevelShape s{(1 << i) * cfg.channels, cfg.size >> i, cfg.size >> i};
    total += s.elements();
    out.push_back(s);
  }
  LevelShape top{(1 << (cfg.levels + 1)) * cfg.channels, cfg.size >> cfg.levels,
                 cfg.size >> cfg.levels};
  total += top.elements();
  out.push_back(top);
  check(total == static_cast<std::int64_t>(cfg.channels) * cfg.size * cfg.size,
        "channel_dims: latent elements do not conserve dimensionality");
  return out;
}

/// Critical path of sequential channel-sampling steps: T = C*(3*2^n - 2),
/// bounded by 3*C*N whenever the config is valid (2^n <= N).
inline std::int64_t critical_path_steps(const FlowConfig& cfg) {
  cfg.validate();
  const std::int64_t T =
      static_cast<std::int64_t>(cfg.channels) * (3LL * (1LL << cfg.levels) - 2);
  check(T <= 3LL * cfg.channels * cfg.size, "critical_path_steps: 3CN bound violated");
  return T;
}

using LatentPyramid = std::vector<Tensor>;

/// The full multi-scale flow: per level squeeze -> flow steps -> split, with
/// channel-autoregressive priors scoring each split-off latent and the top.
class Model {
 public:
  Model(const FlowConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    int ch = cfg.channels;
    int hw = cfg.size;
    for (int i = 1; i <= cfg.levels; ++i) {
      ch *= 4;  // squeeze
      hw /= 2;
      std::vector<FlowStep> level;
      for (int s = 0; s < cfg.flow_steps; ++s)
        level.emplace_back(cfg.coupling, ch, cfg.width, rng, cfg.mix_components);
      steps_.push_back(std::move(level));
      if (i < cfg.levels) {
        ch /= 2;  // split: half exits as l_i, half continues as r_i
        priors_.emplace_back(ch, ch, hw, hw, cfg.prior_hidden, cfg.prior_cond,
                             cfg.prior_layers, rng);
      } else {
        priors_.emplace_back(ch, 0, hw, hw, cfg.prior_hidden, cfg.prior_cond,
                             cfg.prior_layers, rng);
      }
    }
  }

  const FlowConfig& config() const { return cfg_; }
  int num_levels() const { return cfg_.levels; }
  std::vector<FlowStep>& level_steps(int i) { return steps_[i]; }
  PriorLevel& prior(int i) { return priors_[i]; }

  /// Change of variables: z plus log p(x) = sum of prior terms and all layer logdets.
  std::pair<LatentPyramid, Tensor> forward(const Tensor& x, bool allow_init = false) {
    check_input(x);
    LatentPyramid z;
    Tensor h = x;
    Tensor logp;
    for (int i = 0; i < cfg_.levels; ++i) {
      h = squeeze2x2(h);
      for (auto& step : steps_[i]) {
        auto res = step.forward(h, allow_init);
        h = res.value;
        logp = logp.defined() ? add(logp, res.logdet) : res.logdet;
      }
      Tensor term;
      if (i + 1 < cfg_.levels) {
        auto [l, r] = split_channels(h);
        term = priors_[i].logprob(l, &r);
        z.push_back(l);
        h = r;
      } else {
        term = priors_[i].logprob(h, nullptr);
        z.push_back(h);
      }
      logp = add(logp, term);
    }
    return {std::move(z), logp};
  }

  Tensor logprob(const Tensor& x, bool allow_init = false) {
    return forward(x, allow_init).second;
  }

  /// Latents only; requires initialized actnorms. Not taped.
  LatentPyramid encode(const Tensor& x) {
    NoGradScope ng;
    check_input(x);
    LatentPyramid z;
    Tensor h = x;
    for (int i = 0; i < cfg_.levels; ++i) {
      h = squeeze2x2(h);
      for (auto& step : steps_[i]) h = step.forward(h).value;
      if (i + 1 < cfg_.levels) {
        auto [l, r] = split_channels(h);
        z.push_back(l);
        h = r;
      } else {
        z.push_back(h);
      }
    }
    return z;
  }

  /// Inverse flow; differentiable with respect to the latents.
  Tensor decode(const LatentPyramid& z) const { return decode_impl(z, nullptr); }

  /// Decode plus log p_phi(z) accumulated from the same pass; the r_i each
  /// intermediate prior conditions on is recovered during inversion.
  std::pair<Tensor, Tensor> decode_with_logprob(const LatentPyramid& z) const {
    Tensor prior_lp;
    Tensor x = decode_impl(z, &prior_lp);
    return {x, prior_lp};
  }

  Tensor prior_logprob(const LatentPyramid& z) const {
    Tensor lp;
    decode_impl(z, &lp);
    return lp;
  }

  /// Algorithm "multi-scale autoregressive prior sampling": draw the top
  /// latent, then per level draw l_i given r_i, concatenate, invert the flow
  /// steps, and unsqueeze. step_counter ticks once per sampled channel.
  Tensor marps_sample(int batch, double temperature, Rng& rng,
                      std::int64_t* step_counter = nullptr,
                      LatentPyramid* latents = nullptr) const {
    NoGradScope ng;
    check(batch >= 1, "sample: batch must be >= 1");
    if (latents) latents->assign(static_cast<size_t>(cfg_.levels), Tensor());
    Tensor cur = priors_.back().sample(nullptr, temperature, rng, batch, step_counter);
    if (latents) latents->back() = cur;
    for (int i = cfg_.levels - 1; i >= 0; --i) {
      if (i + 1 < cfg_.levels) {
        Tensor l = priors_[i].sample(&cur, temperature, rng, 0, step_counter);
        if (latents) (*latents)[static_cast<size_t>(i)] = l;
        cur = concat_channels({l, cur});
      }
      for (auto it = steps_[i].rbegin(); it != steps_[i].rend(); ++it)
        cur = it->inverse(cur);
      cur = unsqueeze2x2(cur);
    }
    return cur;
  }

  void visit_params(const ParamVisitor& fn) {
    for (size_t i = 0; i < steps_.size(); ++i) {
      for (size_t s = 0; s < steps_[i].size(); ++s)
        steps_[i][s].visit_params(
            "level" + std::to_string(i) + ".step" + std::to_string(s), fn);
      priors_[i].visit_params("level" + std::to_string(i) + ".prior", fn);
    }
  }

  void mark_initialized() {
    for (auto& level : steps_)
      for (auto& step : level) step.actnorm().mark_initialized();
  }

  bool initialized() const {
    for (const auto& level : steps_)
      for (const auto& step : level)
        if (!step.actnorm().initialized()) return false;
    return true;
  }

 private:
  void check_input(const Tensor& x) const {
    detail::check_bchw(x, "model");
    check(x.dim(1) == cfg_.channels && x.dim(2) == cfg_.size && x.dim(3) == cfg_.size,
          "model: input shape " + shape_str(x.shape()) + " does not match config");
  }

  Tensor decode_impl(const LatentPyramid& z, Tensor* prior_lp) const {
    const auto dims = channel_dims(cfg_);
    check(z.size() == dims.size(), "decode: wrong number of latent levels");
    const int B = z.back().dim(0);
    for (size_t i = 0; i < z.size(); ++i) {
      detail::check_bchw(z[i], "decode");
      check(z[i].dim(0) == B && z[i].dim(1) == dims[i].channels &&
                z[i].dim(2) == dims[i].height && z[i].dim(3) == dims[i].width,
            "decode: latent " + std::to_string(i) + " has shape " +
                shape_str(z[i].shape()) + ", expected [" + std::to_string(B) + "," +
                std::to_string(dims[i].channels) + "," + std::to_string(dims[i].height) +
                "," + std::to_string(dims[i].width) + "]");
    }
    Tensor cur = z.back();
    if (prior_lp) *prior_lp = priors_.back().logprob(cur, nullptr);
    for (int i = cfg_.levels - 1; i >= 0; --i) {
      if (i + 1 < cfg_.levels) {
        if (prior_lp) *prior_lp = add(*prior_lp, priors_[i].logprob(z[i], &cur));
        cur = concat_channels({z[i], cur});
      }
      for (auto it = steps_[i].rbegin(); it != steps_[i].rend(); ++it)
        cur = it->inverse(cur);
      cur = unsqueeze2x2(cur);
    }
    return cur;
  }

  FlowConfig cfg_;
  std::vector<std::vector<FlowStep>> steps_;
  std::vector<PriorLevel> priors_;
};

}  // namespace marscf
