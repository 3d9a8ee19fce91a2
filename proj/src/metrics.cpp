#include "diffnas/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "diffnas/error.hpp"

namespace diffnas::metrics {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat as_rows(const Tensor& t) {
  if (t.rank() < 1) throw DimensionError("metrics need a batch axis");
  const int n = t.dim(0);
  const auto d = n == 0 ? 0 : static_cast<Eigen::Index>(t.numel() / static_cast<std::size_t>(n));
  Mat m(n, d);
  const float* p = t.ptr();
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = p[i];
  return m;
}

}  // namespace

MmdResult mmd2_rbf_detail(const Tensor& generated, const Tensor& reference) {
  const Mat x = as_rows(generated);
  const Mat y = as_rows(reference);
  const Eigen::Index m = x.rows(), n = y.rows();
  if (m < 2 || n < 2) throw ContractError("mmd2_rbf needs at least 2 samples on each side");
  if (x.cols() != y.cols()) throw DimensionError("mmd2_rbf: sample dimensions differ");

  Mat pooled(m + n, x.cols());
  pooled << x, y;
  const Eigen::VectorXd sq = pooled.rowwise().squaredNorm();
  Mat d2 = (-2.0 * pooled * pooled.transpose()).eval();
  d2.colwise() += sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);

  const Eigen::Index total = m + n;
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(total * (total - 1) / 2));
  for (Eigen::Index i = 0; i < total; ++i)
    for (Eigen::Index j = i + 1; j < total; ++j) dist.push_back(std::sqrt(d2(i, j)));
  auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double h = *mid;
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), mid);
    h = 0.5 * (h + lower);
  }
  MmdResult res;
  if (!(h > 0.0)) {
    // More than half the pairs coincide; fall back to the mean distance.
    double s = 0.0;
    for (double v : dist) s += v;
    h = s / static_cast<double>(dist.size());
    if (!(h > 0.0)) return res;  // every sample identical
  }
  res.bandwidth = h;
  const double inv = 1.0 / (2.0 * h * h);
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (Eigen::Index i = 0; i < total; ++i) {
    for (Eigen::Index j = i + 1; j < total; ++j) {
      const double k = std::exp(-d2(i, j) * inv);
      if (j < m) {
        kxx += k;
      } else if (i >= m) {
        kyy += k;
      } else {
        kxy += k;
      }
    }
  }
  const double md = static_cast<double>(m), nd = static_cast<double>(n);
  res.mmd2 = 2.0 * kxx / (md * (md - 1.0)) + 2.0 * kyy / (nd * (nd - 1.0)) - 2.0 * kxy / (md * nd);
  return res;
}

double mmd2_rbf(const Tensor& generated, const Tensor& reference) { return mmd2_rbf_detail(generated, reference).mmd2; }

double frechet_diag(const Tensor& generated, const Tensor& reference) {
  const Mat x = as_rows(generated);
  const Mat y = as_rows(reference);
  if (x.rows() < 1 || y.rows() < 1) throw ContractError("frechet_diag needs non-empty samples");
  if (x.cols() != y.cols()) throw DimensionError("frechet_diag: sample dimensions differ");
  const Eigen::RowVectorXd mx = x.colwise().mean(), my = y.colwise().mean();
  const Eigen::RowVectorXd sx = ((x.rowwise() - mx).array().square().colwise().mean()).sqrt();
  const Eigen::RowVectorXd sy = ((y.rowwise() - my).array().square().colwise().mean()).sqrt();
  return (mx - my).squaredNorm() + (sx - sy).squaredNorm();
}

}  // namespace diffnas::metrics
