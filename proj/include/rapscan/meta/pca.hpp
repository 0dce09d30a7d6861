#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <vector>

#include "json.hpp"
#include "rapscan/errors.hpp"
#include "rapscan/numerics.hpp"

namespace rapscan::meta {

using json = nlohmann::json;

struct PcaModel {
  std::vector<double> mean;
  DenseMatrix components;  // k x d, orthonormal rows
  std::vector<double> explained_variance;

  int k() const { return static_cast<int>(components.rows()); }
  int dim() const { return static_cast<int>(mean.size()); }
};

// Top-k eigenvectors of the sample covariance (n - 1 denominator). Each
// component's largest-magnitude entry is made positive so fits are
// reproducible.
inline PcaModel pca_fit(const std::vector<std::vector<double>>& rows, int k) {
  const int n = static_cast<int>(rows.size());
  require(n >= 2, "pca_fit: need at least two rows");
  const int d = static_cast<int>(rows[0].size());
  require(k >= 1 && k <= std::min(n - 1, d), "pca_fit: k must be in [1, min(n-1, d)]");

  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i) {
    require(static_cast<int>(rows[i].size()) == d, "pca_fit: ragged rows");
    for (int j = 0; j < d; ++j) x(i, j) = rows[i][j];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  require(solver.info() == Eigen::Success, "pca_fit: eigendecomposition failed");

  PcaModel m;
  m.mean.assign(mu.data(), mu.data() + d);
  m.components = DenseMatrix(k, d);
  // Eigen returns ascending eigenvalues.
  for (int c = 0; c < k; ++c) {
    const int src = d - 1 - c;
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (int j = 0; j < d; ++j) m.components(c, j) = v(j);
    m.explained_variance.push_back(std::max(0.0, solver.eigenvalues()(src)));
  }
  return m;
}

inline std::vector<double> pca_transform(const PcaModel& m, std::span<const double> x) {
  require(static_cast<int>(x.size()) == m.dim(), "pca_transform: dimension mismatch");
  std::vector<double> out(m.k(), 0.0);
  for (int c = 0; c < m.k(); ++c) {
    double s = 0.0;
    for (int j = 0; j < m.dim(); ++j) s += m.components(c, j) * (x[j] - m.mean[j]);
    out[c] = s;
  }
  return out;
}

inline void to_json(json& j, const PcaModel& m) {
  std::vector<std::vector<double>> comps;
  for (int c = 0; c < m.k(); ++c) {
    auto r = m.components.row(c);
    comps.emplace_back(r.begin(), r.end());
  }
  j = json{{"mean", m.mean}, {"components", comps}, {"explained_variance", m.explained_variance}};
}

inline void from_json(const json& j, PcaModel& m) {
  m.mean = j.at("mean").get<std::vector<double>>();
  const auto comps = j.at("components").get<std::vector<std::vector<double>>>();
  m.components = DenseMatrix(comps.size(), m.mean.size());
  for (std::size_t c = 0; c < comps.size(); ++c) {
    if (comps[c].size() != m.mean.size()) throw FormatError("pca: component size mismatch");
    for (std::size_t i = 0; i < comps[c].size(); ++i) m.components(c, i) = comps[c][i];
  }
  m.explained_variance = j.at("explained_variance").get<std::vector<double>>();
}

}  // namespace rapscan::meta
