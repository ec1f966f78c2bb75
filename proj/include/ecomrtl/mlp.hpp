#pragma once

// Fully connected tanh network over a flat parameter vector, with a manual
// backward pass. Samples are columns: inputs are (in x batch).
//
// Parameter layout, layer by layer: W (out x in, column-major) then b.

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

#include "ecomrtl/rng.hpp"

namespace ecomrtl {

class Mlp {
 public:
  struct Cache {
    // activations[0] is the input; activations[k] the output of layer k
    // (post-tanh for hidden layers, linear for the last).
    std::vector<Eigen::MatrixXd> activations;
  };

  Mlp() = default;
  Mlp(int inputs, std::vector<int> hidden, int outputs);

  int inputs() const { return inputs_; }
  int outputs() const { return outputs_; }
  const std::vector<int>& hidden() const { return hidden_; }
  Eigen::Index param_count() const { return param_count_; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases; the
  /// output layer is set to exactly zero when `zero_output` is true.
  Eigen::VectorXd init(Rng& rng, bool zero_output) const;

  Eigen::MatrixXd forward(const Eigen::Ref<const Eigen::VectorXd>& params, const Eigen::MatrixXd& x,
                          Cache* cache = nullptr) const;

  /// Adds d(loss)/d(params) to `grad` given d(loss)/d(output).
  void backward(const Eigen::Ref<const Eigen::VectorXd>& params, const Cache& cache, const Eigen::MatrixXd& d_out,
                Eigen::Ref<Eigen::VectorXd> grad) const;

  /// Offsets of the last layer's weights and bias inside the parameter vector.
  Eigen::Index output_layer_offset() const { return layers_.back().w_offset; }

 private:
  struct Layer {
    int in = 0;
    int out = 0;
    Eigen::Index w_offset = 0;
    Eigen::Index b_offset = 0;
  };

  int inputs_ = 0;
  int outputs_ = 0;
  std::vector<int> hidden_;
  std::vector<Layer> layers_;
  Eigen::Index param_count_ = 0;
};

/// Adam with bias correction.
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index size, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grad);
  long steps() const { return t_; }

 private:
  double lr_ = 0.0;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long t_ = 0;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
};

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_grad_norm(Eigen::Ref<Eigen::VectorXd> grad, double max_norm);

}  // namespace ecomrtl
