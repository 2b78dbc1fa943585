#pragma once

// Dense feedforward networks with hand-written reverse mode and Adam.
// Batches are column-major: one sample per column.

#include <cstdint>
#include <string>
#include <vector>

#include "nrlab/common.hpp"
#include "nrlab/random.hpp"

namespace nrlab {

enum class Activation { kGelu, kRelu, kLinear };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct Mlp {
  std::vector<int> widths;             // input, hidden..., output
  std::vector<Mat> w;                  // w[l] is widths[l+1] x widths[l]
  std::vector<Vec> b;
  std::vector<Activation> activation;  // per layer; the last is linear
  std::vector<double> dropout;         // per layer, applied after the activation

  std::size_t layers() const { return w.size(); }
  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  std::size_t param_count() const;

  // Flat parameter view: per layer, w column-major then b.
  Vec flat() const;
  void set_flat(const Vec& theta);
};

// Uniform(+-sqrt(3 / fan_in)) weights, zero biases. Hidden layers use
// `hidden`; the output layer is linear.
Mlp mlp_init(const std::vector<int>& widths, std::uint64_t seed, Activation hidden = Activation::kGelu,
             const std::vector<double>& dropout = {});

struct ForwardCache {
  Mat input;
  std::vector<Mat> pre;   // affine outputs
  std::vector<Mat> post;  // after activation and dropout
  std::vector<Mat> mask;  // scaled dropout masks (empty when inactive)
};

// Forward pass over a batch. Dropout is sampled from `rng` only when
// `train` is set; pass cache to enable mlp_backward.
Mat mlp_forward(const Mlp& m, const Mat& x, bool train = false, Rng* rng = nullptr, ForwardCache* cache = nullptr);
Vec mlp_forward(const Mlp& m, const Vec& x);

// Accumulates d(loss)/d(params) into grad (flat layout) given d(loss)/d(output)
// and returns d(loss)/d(input).
Mat mlp_backward(const Mlp& m, const ForwardCache& cache, const Mat& d_out, Vec& grad);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

// Adam over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t n, AdamConfig cfg);
  void step(Vec& params, const Vec& grad);
  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  Vec m_, v_;
  long t_ = 0;
};

// Rescales grad so its norm is at most max_norm; returns the original norm.
double clip_grad_norm(Vec& grad, double max_norm);

// Self-describing text checkpoint. Extra key/value lines ride along.
std::string mlp_serialize(const Mlp& m);
Mlp mlp_deserialize(const std::string& text);

}  // namespace nrlab
