#include "robtok/probe.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <string>

namespace robtok {

namespace {

void check_labels(std::span<const int> labels, Index rows, int num_classes) {
  if (static_cast<Index>(labels.size()) != rows) {
    throw ShapeError("probe: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ContractError("probe: label out of range: " + std::to_string(y));
  }
}

// Row-wise softmax in place; returns the mean negative log-likelihood.
double softmax_nll(RowMatrix& logits, std::span<const int> labels) {
  double nll = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    const double mx = row.maxCoeff();
    row.array() = (row.array() - mx).exp();
    const double z = row.sum();
    row /= z;
    nll -= std::log(std::max(row(labels[static_cast<std::size_t>(i)]), 1e-300));
  }
  return logits.rows() > 0 ? nll / static_cast<double>(logits.rows()) : 0.0;
}

}  // namespace

RowMatrix ProbeHead::logits(const RowMatrix& features) const {
  RowMatrix out = features * weight;
  out.rowwise() += bias.transpose();
  return out;
}

std::vector<int> ProbeHead::predict(const RowMatrix& features) const {
  const RowMatrix z = logits(features);
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Index i = 0; i < z.rows(); ++i) {
    Index arg = 0;
    z.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

double ProbeHead::accuracy(const RowMatrix& features, std::span<const int> labels) const {
  check_labels(labels, features.rows(), static_cast<int>(num_classes()));
  if (labels.empty()) return 0.0;
  const auto pred = predict(features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

Linear ProbeHead::as_linear() const {
  Vector w = Eigen::Map<const Vector>(weight.data(), weight.size());
  return Linear{Tensor({weight.rows(), weight.cols()}, w), Tensor({bias.size()}, bias)};
}

ProbeFit fit_linear_probe(const RowMatrix& features, std::span<const int> labels, int num_classes,
                          const ProbeConfig& cfg) {
  if (num_classes < 1) throw ContractError("probe: num_classes must be positive");
  const Index n = features.rows();
  const Index d = features.cols();
  check_labels(labels, n, num_classes);

  ProbeFit fit;
  fit.head.weight = RowMatrix::Zero(d, num_classes);
  fit.head.bias = Vector::Zero(num_classes);
  if (n == 0) return fit;

  // Softmax cross-entropy is (1/2)·λmax(ZᵀZ/N)-smooth in the weights, Z = [X, 1].
  RowMatrix gram(d + 1, d + 1);
  gram.topLeftCorner(d, d) = features.transpose() * features;
  const Vector col_sum = features.colwise().sum().transpose();
  gram.topRightCorner(d, 1) = col_sum;
  gram.bottomLeftCorner(1, d) = col_sum.transpose();
  gram(d, d) = static_cast<double>(n);
  gram /= static_cast<double>(n);
  const double lmax = Eigen::SelfAdjointEigenSolver<RowMatrix>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  const double step = 1.0 / (0.5 * std::max(lmax, 1e-12));

  RowMatrix onehot = RowMatrix::Zero(n, num_classes);
  for (Index i = 0; i < n; ++i) onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;

  double previous = 0.0;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    RowMatrix p = fit.head.logits(features);
    const double loss = softmax_nll(p, labels);
    fit.final_loss = loss;
    fit.iterations = it;
    if (it > 0 && std::abs(previous - loss) < cfg.tolerance) break;
    previous = loss;
    p -= onehot;
    p /= static_cast<double>(n);
    fit.head.weight.noalias() -= step * (features.transpose() * p);
    fit.head.bias -= step * p.colwise().sum().transpose();
  }
  return fit;
}

RowMatrix class_features(const ModelWeights& model, const Tensor& images, const std::optional<Tensor>& rob,
                         Index chunk) {
  const Index n = images.dim(0);
  const Index d = model.config.dim;
  RowMatrix out(n, d);
  std::optional<Tensor> frozen_rob;
  if (rob) frozen_rob = rob->detach();
  for (Index b = 0; b < n; b += chunk) {
    const Index e = std::min(n, b + chunk);
    const Tensor cls = features(model, slice(images, 0, b, e).detach(), frozen_rob).class_feature();
    out.middleRows(b, e - b) = ConstMatrixMap(cls.value().data(), e - b, d);
  }
  return out;
}

ProbeHead train_linear_probe(const ModelWeights& model, const std::optional<Tensor>& rob, const Tensor& images,
                             std::span<const int> labels, int num_classes, const ProbeConfig& cfg) {
  return fit_linear_probe(class_features(model, images, rob), labels, num_classes, cfg).head;
}

}  // namespace robtok
