#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "layers.hpp"
#include "ops.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace marscf {

constexpr double kLogSigmaClamp = 7.0;
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)

struct ConvLSTMState {
  std::vector<Tensor> h, c;  // per layer, [B, hidden, H, W]
};

/// Stack of convolutional LSTM layers with 3x3 input-to-state and
/// state-to-state maps. Gate order: input, forget, cell candidate, output.
class ConvLSTMStack {
 public:
  ConvLSTMStack(int cin, int hidden, int num_layers, Rng& rng) : hidden_(hidden) {
    for (int l = 0; l < num_layers; ++l) {
      const int in = l == 0 ? cin : hidden;
      Layer layer{Tensor({4 * hidden, in, 3, 3}), Tensor({4 * hidden}),
                  Tensor({4 * hidden, hidden, 3, 3})};
      rng.fill_normal(layer.wx, std::sqrt(1.0 / (in * 9.0)));
      rng.fill_normal(layer.wh, std::sqrt(1.0 / (hidden * 9.0)));
      layers_.push_back(std::move(layer));
    }
  }

  int hidden() const { return hidden_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }

  ConvLSTMState zero_state(int B, int H, int W) const {
    ConvLSTMState s;
    for (size_t l = 0; l < layers_.size(); ++l) {
      s.h.emplace_back(Shape{B, hidden_, H, W});
      s.c.emplace_back(Shape{B, hidden_, H, W});
    }
    return s;
  }

  /// One recurrence step; returns the top layer's hidden state.
  Tensor step(const Tensor& input, ConvLSTMState& state) const {
    check(state.h.size() == layers_.size(), "convlstm: state/layer count mismatch");
    Tensor x = input;
    for (size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      check(x.dim(2) == state.h[l].dim(2) && x.dim(3) == state.h[l].dim(3),
            "convlstm: input spatial size does not match state");
      Tensor gates = add(conv2d(x, L.wx, L.bx), conv2d(state.h[l], L.wh, Tensor()));
      const int Hn = hidden_;
      Tensor gi = sigmoid_(slice_channels(gates, 0, Hn));
      Tensor gf = sigmoid_(slice_channels(gates, Hn, 2 * Hn));
      Tensor gg = tanh_(slice_channels(gates, 2 * Hn, 3 * Hn));
      Tensor go = sigmoid_(slice_channels(gates, 3 * Hn, 4 * Hn));
      Tensor c_new = add(mul(gf, state.c[l]), mul(gi, gg));
      Tensor h_new = mul(go, tanh_(c_new));
      state.c[l] = c_new;
      state.h[l] = h_new;
      x = h_new;
    }
    return x;
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    for (size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = prefix + ".lstm" + std::to_string(l);
      fn(p + ".wx", layers_[l].wx);
      fn(p + ".bx", layers_[l].bx);
      fn(p + ".wh", layers_[l].wh);
    }
  }

 private:
  struct Layer {
    Tensor wx, bx, wh;
  };
  int hidden_;
  std::vector<Layer> layers_;
};

/// Channel-autoregressive prior over one latent level. A Conv-LSTM consumes
/// the channels in order (a learned start token first); each step's hidden
/// state maps to per-location (mu, log sigma) for the next channel. When
/// conditional, a convolution of r is concatenated to every step's input.
class PriorLevel {
 public:
  PriorLevel(int channels, int r_channels, int height, int width, int hidden,
             int cond_channels, int num_layers, Rng& rng)
      : channels_(channels),
        height_(height),
        width_(width),
        conditional_(r_channels > 0),
        cond_channels_(conditional_ ? cond_channels : 0),
        start_token_({1, 1, height, width}),
        lstm_(1 + cond_channels_, hidden, num_layers, rng),
        head_w_({2, hidden, 1, 1}),
        head_b_({2}) {
    if (conditional_) {
      cond_w_ = Tensor({cond_channels_, r_channels, 3, 3});
      cond_b_ = Tensor({cond_channels_});
      rng.fill_normal(cond_w_, std::sqrt(1.0 / (r_channels * 9.0)));
    }
    // head stays zero-initialized: the prior starts as a standard normal
  }

  int channels() const { return channels_; }
  bool conditional() const { return conditional_; }

  /// Exact log p(l | r) summed over channels and locations, per sample.
  Tensor logprob(const Tensor& l, const Tensor* r) const {
    validate(l, r);
    const int B = l.dim(0);
    Tensor cond = conditioning(r);
    ConvLSTMState state = lstm_.zero_state(B, height_, width_);
    Tensor logp;
    for (int j = 0; j < channels_; ++j) {
      auto [mu, logsig] = next_params(l, j, cond, state, B);
      Tensor lj = slice_channels(l, j, j + 1);
      Tensor z = mul(sub(lj, mu), exp_(neg(logsig)));
      Tensor elem = add_const(sub(scale(square(z), -0.5), logsig), -kHalfLog2Pi);
      Tensor term = sum_batch(elem);
      logp = j == 0 ? term : add(logp, term);
    }
    return logp;
  }

  /// Per-channel conditional (mu, sigma) under teacher forcing; diagnostic
  /// surface for the causality properties. Not taped.
  std::vector<std::pair<Tensor, Tensor>> cond_params(const Tensor& l, const Tensor* r) const {
    NoGradScope ng;
    validate(l, r);
    const int B = l.dim(0);
    Tensor cond = conditioning(r);
    ConvLSTMState state = lstm_.zero_state(B, height_, width_);
    std::vector<std::pair<Tensor, Tensor>> out;
    for (int j = 0; j < channels_; ++j) {
      auto [mu, logsig] = next_params(l, j, cond, state, B);
      out.emplace_back(mu, exp_(logsig));
    }
    return out;
  }

  /// Ancestral sampling: channels in order, all locations within a channel
  /// drawn in parallel from N(mu, (temperature*sigma)^2). One counter tick
  /// per channel is the unit of the critical-path accounting.
  Tensor sample(const Tensor* r, double temperature, Rng& rng, int batch,
                std::int64_t* step_counter = nullptr) const {
    check(temperature >= 0.0, "prior sample: temperature must be >= 0");
    NoGradScope ng;
    if (conditional_)
      check(r != nullptr, "prior sample: conditional level requires r");
    Tensor cond = conditioning(r);
    const int B = conditional_ ? r->dim(0) : batch;
    ConvLSTMState state = lstm_.zero_state(B, height_, width_);
    Tensor drawn({B, channels_, height_, width_});
    for (int j = 0; j < channels_; ++j) {
      Tensor prev = j == 0 ? repeat_batch(start_token_, B)
                           : slice_channels(drawn, j - 1, j);
      Tensor input = conditional_ ? concat_channels({prev, cond}) : prev;
      Tensor h = lstm_.step(input, state);
      Tensor params = conv2d(h, head_w_, head_b_);
      Tensor mu = slice_channels(params, 0, 1);
      Tensor logsig = soft_clamp(slice_channels(params, 1, 2), kLogSigmaClamp);
      const std::int64_t n = mu.size();
      for (std::int64_t i = 0; i < n; ++i) {
        const double m = mu.data()[i];
        const double s = std::exp(logsig.data()[i]);
        check(std::isfinite(m) && std::isfinite(s),
              "prior sample: non-finite (mu, sigma) at channel " + std::to_string(j) +
                  " element " + std::to_string(i));
        const double v = temperature == 0.0 ? m : m + temperature * s * rng.normal();
        // scatter into channel j
        const std::int64_t b = i / (static_cast<std::int64_t>(height_) * width_);
        const std::int64_t hw = i % (static_cast<std::int64_t>(height_) * width_);
        drawn.data()[(b * channels_ + j) * height_ * width_ + hw] = v;
      }
      if (step_counter) ++*step_counter;
    }
    return drawn;
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".start", start_token_);
    if (conditional_) {
      fn(prefix + ".cond.w", cond_w_);
      fn(prefix + ".cond.b", cond_b_);
    }
    lstm_.visit_params(prefix, fn);
    fn(prefix + ".head.w", head_w_);
    fn(prefix + ".head.b", head_b_);
  }

 private:
  void validate(const Tensor& l, const Tensor* r) const {
    detail::check_bchw(l, "prior");
    check(l.dim(1) == channels_, "prior: expected " + std::to_string(channels_) +
                                     " channels, got " + std::to_string(l.dim(1)));
    check(l.dim(2) == height_ && l.dim(3) == width_, "prior: spatial size mismatch");
    if (conditional_) {
      check(r != nullptr, "prior: conditional level requires r");
      check(r->dim(2) == height_ && r->dim(3) == width_, "prior: r spatial size mismatch");
    } else {
      check(r == nullptr, "prior: top level takes no conditioning input");
    }
  }

  Tensor conditioning(const Tensor* r) const {
    if (!conditional_ || r == nullptr) return Tensor();
    return conv2d(*r, cond_w_, cond_b_);
  }

  /// Consumes channel j-1 (start token for j = 0) and emits (mu, log sigma)
  /// for channel j. The current channel's own values never enter.
  std::pair<Tensor, Tensor> next_params(const Tensor& l, int j, const Tensor& cond,
                                        ConvLSTMState& state, int B) const {
    Tensor prev = j == 0 ? repeat_batch(start_token_, B) : slice_channels(l, j - 1, j);
    Tensor input = cond.defined() ? concat_channels({prev, cond}) : prev;
    Tensor h = lstm_.step(input, state);
    Tensor params = conv2d(h, head_w_, head_b_);
    Tensor mu = slice_channels(params, 0, 1);
    Tensor logsig = soft_clamp(slice_channels(params, 1, 2), kLogSigmaClamp);
    return {mu, logsig};
  }

  int channels_, height_, width_;
  bool conditional_;
  int cond_channels_;
  Tensor cond_w_, cond_b_;
  Tensor start_token_;
  ConvLSTMStack lstm_;
  Tensor head_w_, head_b_;
};

}  // namespace marscf
