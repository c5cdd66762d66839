#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace tsv {

/// Thin (possibly truncated) SVD: A ≈ U · diag(S) · Vᵀ.
/// U is d×r, V is m×r, S holds r non-increasing, non-negative values.
struct SVDFactors {
    Eigen::MatrixXf U;
    Eigen::VectorXf S;
    Eigen::MatrixXf V;

    Eigen::Index rank() const { return S.size(); }
    Eigen::Index rows() const { return U.rows(); }
    Eigen::Index cols() const { return V.rows(); }
};

/// Thin SVD with r = min(d, m), computed in double and stored as float.
///
/// Column signs are normalized so the largest-magnitude entry of every left
/// singular vector is positive (ties go to the lowest row index). This makes
/// the factors reproducible for a fixed build and stable when a matrix is
/// decomposed again after a reconstruct round trip.
///
/// Throws NumericError on non-finite input or if the solver does not converge.
SVDFactors svd(const Eigen::MatrixXf& a);
SVDFactors svd(const Eigen::MatrixXd& a);

/// Keeps the leading k components. Throws InvalidArgument unless 1 <= k <= rank.
SVDFactors truncate(const SVDFactors& f, Eigen::Index k);

/// U · diag(S) · Vᵀ, accumulated in double.
Eigen::MatrixXd reconstruct_d(const SVDFactors& f);
Eigen::MatrixXf reconstruct(const SVDFactors& f);

/// Nearest matrix with orthonormal columns (Frobenius): X = P D Qᵀ -> P Qᵀ.
/// For wide inputs (c > d) the result has orthonormal rows instead, i.e. it is
/// the nearest partial isometry. Rank-deficient inputs are accepted; the
/// null-space part then depends on the backend SVD.
Eigen::MatrixXd procrustes(const Eigen::MatrixXd& x);

/// X · (XᵀX)^{-1/2} through the eigendecomposition XᵀX = QΛQᵀ with
/// Λ^{-1/2} = diag(1 / sqrt(|λ| + eps)).
Eigen::MatrixXd whiten_eigen(const Eigen::MatrixXd& x, double eps = 1e-12);

/// Streaming arithmetic mean (Welford): mean += (x - mean) / (count + 1).
class WelfordMean {
public:
    void update(const std::vector<float>& x);

    std::int64_t count() const { return count_; }
    const std::vector<double>& mean() const { return mean_; }

private:
    std::int64_t count_ = 0;
    std::vector<double> mean_;
};

WelfordMean welford_update(WelfordMean acc, const std::vector<float>& x);

/// ‖AᵀA − I‖_F.
double orthonormality_error(const Eigen::MatrixXd& a);

double relative_frobenius(const Eigen::MatrixXd& approx, const Eigen::MatrixXd& reference);

}  // namespace tsv
