#include "tsv/linalg.hpp"

#include <cmath>

#include "tsv/errors.hpp"

namespace tsv {

namespace {

// Flip column pairs so the largest |u_ij| of each left vector is positive.
void normalize_signs(Eigen::MatrixXd& u, Eigen::MatrixXd& v) {
    for (Eigen::Index j = 0; j < u.cols(); ++j) {
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < u.rows(); ++i) {
            double a = std::abs(u(i, j));
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        if (u(arg, j) < 0.0) {
            u.col(j) = -u.col(j);
            v.col(j) = -v.col(j);
        }
    }
}

}  // namespace

SVDFactors svd(const Eigen::MatrixXd& a) {
    if (!a.allFinite()) throw NumericError("svd: input contains NaN or Inf");
    if (a.size() == 0) throw InvalidArgument("svd: empty matrix");

    Eigen::BDCSVD<Eigen::MatrixXd> solver(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (solver.info() != Eigen::Success) throw NumericError("svd: solver failed to converge");

    Eigen::MatrixXd u = solver.matrixU();
    Eigen::MatrixXd v = solver.matrixV();
    Eigen::VectorXd s = solver.singularValues();
    if (!u.allFinite() || !v.allFinite() || !s.allFinite()) throw NumericError("svd: non-finite factors");
    normalize_signs(u, v);

    return SVDFactors{u.cast<float>(), s.cast<float>(), v.cast<float>()};
}

SVDFactors svd(const Eigen::MatrixXf& a) {
    return svd(Eigen::MatrixXd(a.cast<double>()));
}

SVDFactors truncate(const SVDFactors& f, Eigen::Index k) {
    if (k < 1 || k > f.rank()) {
        throw InvalidArgument("truncate: k=" + std::to_string(k) + " outside [1, " + std::to_string(f.rank()) + "]");
    }
    return SVDFactors{f.U.leftCols(k), f.S.head(k), f.V.leftCols(k)};
}

Eigen::MatrixXd reconstruct_d(const SVDFactors& f) {
    const Eigen::MatrixXd u = f.U.cast<double>();
    const Eigen::MatrixXd v = f.V.cast<double>();
    return u * f.S.cast<double>().asDiagonal() * v.transpose();
}

Eigen::MatrixXf reconstruct(const SVDFactors& f) {
    return reconstruct_d(f).cast<float>();
}

Eigen::MatrixXd procrustes(const Eigen::MatrixXd& x) {
    if (x.size() == 0) return x;
    Eigen::BDCSVD<Eigen::MatrixXd> solver(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (solver.info() != Eigen::Success) throw NumericError("procrustes: SVD failed to converge");
    return solver.matrixU() * solver.matrixV().transpose();
}

Eigen::MatrixXd whiten_eigen(const Eigen::MatrixXd& x, double eps) {
    if (x.size() == 0) return x;
    const Eigen::MatrixXd gram = x.transpose() * x;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    if (solver.info() != Eigen::Success) throw NumericError("whiten_eigen: eigensolver failed");
    const Eigen::MatrixXd& q = solver.eigenvectors();
    const Eigen::VectorXd inv_sqrt =
        solver.eigenvalues().unaryExpr([eps](double l) { return 1.0 / std::sqrt(std::abs(l) + eps); });
    return x * (q * inv_sqrt.asDiagonal() * q.transpose());
}

void WelfordMean::update(const std::vector<float>& x) {
    if (count_ == 0) {
        mean_.assign(x.size(), 0.0);
    } else if (x.size() != mean_.size()) {
        throw ShapeMismatchError("welford_update: size " + std::to_string(x.size()) + " does not match " +
                                     std::to_string(mean_.size()),
                                 "");
    }
    const double n = static_cast<double>(count_ + 1);
    for (std::size_t i = 0; i < x.size(); ++i) mean_[i] += (static_cast<double>(x[i]) - mean_[i]) / n;
    ++count_;
}

WelfordMean welford_update(WelfordMean acc, const std::vector<float>& x) {
    acc.update(x);
    return acc;
}

double orthonormality_error(const Eigen::MatrixXd& a) {
    return (a.transpose() * a - Eigen::MatrixXd::Identity(a.cols(), a.cols())).norm();
}

double relative_frobenius(const Eigen::MatrixXd& approx, const Eigen::MatrixXd& reference) {
    const double denom = reference.norm();
    const double diff = (approx - reference).norm();
    return denom > 0.0 ? diff / denom : diff;
}

}  // namespace tsv
