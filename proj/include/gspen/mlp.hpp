#pragma once

// Fixed-family multilayer perceptron with hand-written forward/backward.
// Weights live in an external flat vector; the Mlp only knows offsets.

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gspen/errors.hpp"

namespace gspen {

enum class Activation { relu, softplus };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "softplus"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  throw InvalidArgument("unknown activation '" + s + "'");
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Hidden widths and one activation per hidden layer. Input/output widths are
/// fixed by the owner.
struct MlpSpec {
  std::vector<std::size_t> hidden;
  std::vector<Activation> activations;

  Activation activation(std::size_t i) const {
    if (activations.empty()) return Activation::softplus;
    return i < activations.size() ? activations[i] : activations.back();
  }
};

class Mlp {
 public:
  struct Layer {
    std::size_t in = 0, out = 0;
    std::size_t weight_offset = 0;  // row-major [out][in]
    std::size_t bias_offset = 0;
  };

  /// Per-evaluation activations. act[0] is the input; act[i + 1] the output of layer i.
  struct Tape {
    std::vector<std::vector<double>> pre;
    std::vector<std::vector<double>> act;
  };

  Mlp() = default;

  Mlp(std::size_t input, const MlpSpec& spec, std::size_t output, std::size_t base_offset) {
    std::size_t in = input, offset = base_offset;
    std::vector<std::size_t> widths = spec.hidden;
    widths.push_back(output);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] == 0) throw InvalidArgument("mlp: zero-width layer");
      Layer l{in, widths[i], offset, offset + in * widths[i]};
      offset = l.bias_offset + widths[i];
      layers_.push_back(l);
      if (i + 1 < widths.size()) acts_.push_back(spec.activation(i));
      in = widths[i];
    }
    num_weights_ = offset - base_offset;
  }

  std::size_t input_size() const { return layers_.front().in; }
  std::size_t output_size() const { return layers_.back().out; }
  std::size_t num_weights() const { return num_weights_; }
  const std::vector<Layer>& layers() const { return layers_; }

  void forward(std::span<const double> w, std::span<const double> input, Tape& tape) const {
    if (input.size() != input_size()) throw InvalidArgument("mlp: input width mismatch");
    tape.pre.resize(layers_.size());
    tape.act.resize(layers_.size() + 1);
    tape.act[0].assign(input.begin(), input.end());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      const auto& x = tape.act[i];
      auto& z = tape.pre[i];
      z.assign(w.begin() + static_cast<std::ptrdiff_t>(l.bias_offset),
               w.begin() + static_cast<std::ptrdiff_t>(l.bias_offset + l.out));
      for (std::size_t o = 0; o < l.out; ++o) {
        const double* row = w.data() + l.weight_offset + o * l.in;
        double s = 0.0;
        for (std::size_t j = 0; j < l.in; ++j) s += row[j] * x[j];
        z[o] += s;
      }
      auto& a = tape.act[i + 1];
      a = z;
      if (i + 1 < layers_.size()) {
        if (acts_[i] == Activation::relu) {
          for (auto& v : a) v = std::max(v, 0.0);
        } else {
          for (auto& v : a) v = softplus(v);
        }
      }
    }
  }

  std::vector<double> forward(std::span<const double> w, std::span<const double> input) const {
    Tape t;
    forward(w, input, t);
    return t.act.back();
  }

  /// Backpropagates dL/d(output). Accumulates dL/dw into grad_w (indexed like
  /// the full weight vector) and writes dL/d(input) into grad_in; either span
  /// may be empty to skip it.
  void backward(std::span<const double> w, const Tape& tape, std::span<const double> grad_out,
                std::span<double> grad_in, std::span<double> grad_w) const {
    std::vector<double> delta(grad_out.begin(), grad_out.end());
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const Layer& l = layers_[i];
      if (i + 1 < layers_.size()) {
        const auto& z = tape.pre[i];
        for (std::size_t o = 0; o < l.out; ++o)
          delta[o] *= acts_[i] == Activation::relu ? (z[o] > 0.0 ? 1.0 : 0.0) : sigmoid(z[o]);
      }
      const auto& x = tape.act[i];
      if (!grad_w.empty()) {
        for (std::size_t o = 0; o < l.out; ++o) {
          const double d = delta[o];
          if (d == 0.0) continue;
          double* row = grad_w.data() + l.weight_offset + o * l.in;
          for (std::size_t j = 0; j < l.in; ++j) row[j] += d * x[j];
          grad_w[l.bias_offset + o] += d;
        }
      }
      if (i == 0 && grad_in.empty()) break;
      std::vector<double> next(l.in, 0.0);
      for (std::size_t o = 0; o < l.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row = w.data() + l.weight_offset + o * l.in;
        for (std::size_t j = 0; j < l.in; ++j) next[j] += d * row[j];
      }
      if (i == 0) {
        for (std::size_t j = 0; j < l.in; ++j) grad_in[j] = next[j];
      }
      delta.swap(next);
    }
  }

  /// Smallest |preactivation| over relu units (infinity when there are none).
  double min_relu_margin(const Tape& tape) const {
    double m = INFINITY;
    for (std::size_t i = 0; i < acts_.size(); ++i)
      if (acts_[i] == Activation::relu)
        for (double z : tape.pre[i]) m = std::min(m, std::abs(z));
    return m;
  }

  /// Glorot-uniform weights, zero biases. With zero_output the last layer's
  /// weights are zero too.
  void initialize(std::span<double> w, std::mt19937_64& rng, bool zero_output) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      const bool zero = zero_output && i + 1 == layers_.size();
      const double bound = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (std::size_t j = 0; j < l.in * l.out; ++j) w[l.weight_offset + j] = zero ? 0.0 : u(rng);
      for (std::size_t o = 0; o < l.out; ++o) w[l.bias_offset + o] = 0.0;
    }
  }

 private:
  std::vector<Layer> layers_;
  std::vector<Activation> acts_;
  std::size_t num_weights_ = 0;
};

}  // namespace gspen
