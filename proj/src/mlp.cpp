#include "ecomrtl/mlp.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace ecomrtl {

Mlp::Mlp(int inputs, std::vector<int> hidden, int outputs)
    : inputs_(inputs), outputs_(outputs), hidden_(std::move(hidden)) {
  if (inputs_ < 1 || outputs_ < 1) throw std::invalid_argument("mlp: sizes must be >= 1");
  int prev = inputs_;
  Eigen::Index offset = 0;
  std::vector<int> sizes = hidden_;
  sizes.push_back(outputs_);
  for (const int n : sizes) {
    if (n < 1) throw std::invalid_argument("mlp: layer sizes must be >= 1");
    Layer l;
    l.in = prev;
    l.out = n;
    l.w_offset = offset;
    offset += static_cast<Eigen::Index>(n) * prev;
    l.b_offset = offset;
    offset += n;
    layers_.push_back(l);
    prev = n;
  }
  param_count_ = offset;
}

Eigen::VectorXd Mlp::init(Rng& rng, bool zero_output) const {
  Eigen::VectorXd p(param_count_);
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Layer& l = layers_[k];
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    const Eigen::Index end = l.b_offset + l.out;
    for (Eigen::Index i = l.w_offset; i < end; ++i) p[i] = rng.uniform(-bound, bound);
    if (zero_output && k + 1 == layers_.size()) p.segment(l.w_offset, end - l.w_offset).setZero();
  }
  return p;
}

Eigen::MatrixXd Mlp::forward(const Eigen::Ref<const Eigen::VectorXd>& params, const Eigen::MatrixXd& x,
                             Cache* cache) const {
  if (x.rows() != inputs_) throw std::invalid_argument("mlp: input has wrong size");
  if (params.size() != param_count_) throw std::invalid_argument("mlp: parameter vector has wrong size");
  if (cache != nullptr) {
    cache->activations.resize(layers_.size() + 1);
    cache->activations[0] = x;
  }
  Eigen::MatrixXd a = x;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Layer& l = layers_[k];
    const Eigen::Map<const Eigen::MatrixXd> w(params.data() + l.w_offset, l.out, l.in);
    const Eigen::Map<const Eigen::VectorXd> b(params.data() + l.b_offset, l.out);
    Eigen::MatrixXd z = w * a;
    z.colwise() += b;
    if (k + 1 < layers_.size()) z = z.array().tanh().matrix();
    a = std::move(z);
    if (cache != nullptr) cache->activations[k + 1] = a;
  }
  return a;
}

void Mlp::backward(const Eigen::Ref<const Eigen::VectorXd>& params, const Cache& cache,
                   const Eigen::MatrixXd& d_out, Eigen::Ref<Eigen::VectorXd> grad) const {
  if (cache.activations.size() != layers_.size() + 1) throw std::invalid_argument("mlp: cache does not match");
  Eigen::MatrixXd delta = d_out;  // d loss / d pre-activation of the current layer
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const Layer& l = layers_[k];
    const Eigen::MatrixXd& input = cache.activations[k];
    Eigen::Map<Eigen::MatrixXd> gw(grad.data() + l.w_offset, l.out, l.in);
    Eigen::Map<Eigen::VectorXd> gb(grad.data() + l.b_offset, l.out);
    gw.noalias() += delta * input.transpose();
    gb += delta.rowwise().sum();
    if (k == 0) break;
    const Eigen::Map<const Eigen::MatrixXd> w(params.data() + l.w_offset, l.out, l.in);
    Eigen::MatrixXd back = w.transpose() * delta;
    // input is tanh output of layer k-1: d tanh = 1 - y^2
    delta = (back.array() * (1.0 - input.array().square())).matrix();
  }
}

Adam::Adam(Eigen::Index size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)) {}

void Adam::step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grad) {
  if (grad.size() != m_.size() || params.size() != m_.size()) throw std::invalid_argument("adam: size mismatch");
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

double clip_grad_norm(Eigen::Ref<Eigen::VectorXd> grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm && norm > 0.0) grad *= max_norm / norm;
  return norm;
}

}  // namespace ecomrtl
