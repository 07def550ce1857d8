#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "cdnet/errors.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

/// L2-regularized logistic regression on standardized features, fit by Newton iterations.
class LinearProbe {
 public:
  explicit LinearProbe(double ridge = 1e-2, int iterations = 25) : ridge_(ridge), iterations_(iterations) {}

  void fit(const Tensor& features, const std::vector<int>& labels) {
    const auto N = static_cast<Eigen::Index>(features.rows());
    const auto d = static_cast<Eigen::Index>(features.cols());
    if (static_cast<std::size_t>(N) != labels.size()) throw DimensionError("LinearProbe: label count mismatch");
    Eigen::MatrixXd X = to_matrix(features);
    mean_ = X.colwise().mean();
    std_ = ((X.rowwise() - mean_).array().square().colwise().sum() / static_cast<double>(N)).sqrt();
    for (Eigen::Index j = 0; j < d; ++j) std_[j] = std_[j] > 1e-12 ? std_[j] : 1.0;
    const Eigen::MatrixXd Z = design(X);
    Eigen::VectorXd y(N);
    for (Eigen::Index i = 0; i < N; ++i) y[i] = labels[static_cast<std::size_t>(i)];
    w_ = Eigen::VectorXd::Zero(d + 1);
    Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, ridge_);
    reg[d] = 0.0;  // intercept
    for (int it = 0; it < iterations_; ++it) {
      const Eigen::VectorXd prob = (1.0 / (1.0 + (-(Z * w_).array()).exp())).matrix();
      const Eigen::VectorXd grad = Z.transpose() * (prob - y) + reg.cwiseProduct(w_);
      const Eigen::VectorXd s = (prob.array() * (1.0 - prob.array())).matrix();
      Eigen::MatrixXd H = Z.transpose() * s.asDiagonal() * Z;
      H.diagonal() += reg + Eigen::VectorXd::Constant(d + 1, 1e-9);
      const Eigen::VectorXd step = H.ldlt().solve(grad);
      w_ -= step;
      if (step.norm() < 1e-10) break;
    }
  }

  std::vector<double> predict_proba(const Tensor& features) const {
    const Eigen::VectorXd z = design(to_matrix(features)) * w_;
    std::vector<double> out(static_cast<std::size_t>(z.size()));
    for (Eigen::Index i = 0; i < z.size(); ++i) out[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-z[i]));
    return out;
  }

  double accuracy(const Tensor& features, const std::vector<int>& labels) const {
    const auto p = predict_proba(features);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < p.size(); ++i) correct += static_cast<int>(p[i] >= 0.5) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(p.size());
  }

 private:
  static Eigen::MatrixXd to_matrix(const Tensor& t) {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < t.cols(); ++j)
        X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t[i * t.cols() + j];
    return X;
  }

  Eigen::MatrixXd design(const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd Z(X.rows(), X.cols() + 1);
    Z.leftCols(X.cols()) = (X.rowwise() - mean_).array().rowwise() / std_.array();
    Z.col(X.cols()).setOnes();
    return Z;
  }

  double ridge_;
  int iterations_;
  Eigen::RowVectorXd mean_;
  Eigen::RowVectorXd std_;
  Eigen::VectorXd w_;
};

}  // namespace cdnet
