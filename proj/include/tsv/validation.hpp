#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

namespace tsv {

struct TaskAccuracy {
    std::string task;
    double merged = 0.0;      // accuracy of the multi-task model on this task
    double fine_tuned = 0.0;  // accuracy of the task's own fine-tuned model
};

using AccuracyTable = std::vector<TaskAccuracy>;

/// Mean over tasks of merged / fine_tuned. Throws InvalidArgument on an empty
/// table or a non-positive fine-tuned accuracy.
double normalized_accuracy(const AccuracyTable& table);

/// ‖U − X‖_F for U = [U_1 … U_T] of T square n×n orthogonal blocks:
/// UUᵀ = T·I, so every singular value is √T and the error is √n(√T − 1).
double fullrank_procrustes_error(int n, int tasks);

/// √(n + kT − 2√(kT)), an upper bound on ‖Û − X̂‖_F for k-column truncations.
double truncated_procrustes_bound(int n, int k, int tasks);

/// n(T − 2√T)/T. Ranks at or below it guarantee ‖U − X‖_F >= ‖Û − X̂‖_F.
/// Only meaningful for T > 4; smaller T throws InvalidArgument.
double truncation_rank_threshold(int n, int tasks);

struct BoundTrial {
    double fullrank_error = 0.0;   // ‖U − X‖_F
    double truncated_error = 0.0;  // ‖Û − X̂‖_F
    double sigma_sum = 0.0;        // Σ σ̂_i of Û
    double trace = 0.0;            // tr(ÛᵀÛ)
};

struct BoundReport {
    int n = 0;
    int tasks = 0;
    int k = 0;
    int trials = 0;
    std::uint64_t seed = 0;

    double exact_fullrank_error = 0.0;  // closed form √n(√T − 1)
    double upper_bound = 0.0;
    double threshold_k = 0.0;

    double max_fullrank_rel_deviation = 0.0;  // vs the closed form
    double max_truncated_error = 0.0;
    double min_error_gap = 0.0;  // min over trials of fullrank - truncated

    bool inequality_holds = true;     // fullrank >= truncated every trial
    bool closed_form_matches = true;  // within 1e-6 relative every trial
    bool within_upper_bound = true;   // truncated <= bound + 1e-6 every trial
    bool sigma_sum_bound = true;      // Σσ̂ >= √(kT) every trial
    bool trace_matches = true;        // tr(ÛᵀÛ) = kT every trial
    bool no_data = false;             // trials == 0
    bool above_threshold = false;     // k > threshold_k: inequality not guaranteed

    std::vector<BoundTrial> per_trial;

    bool passed() const {
        return inequality_holds && closed_form_matches && within_upper_bound && sigma_sum_bound && trace_matches;
    }
};

/// Haar-distributed n×n orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
Eigen::MatrixXd random_orthogonal(int n, std::uint64_t seed);

/// Seed for trial `index` of a run seeded with `seed`; trials draw from
/// independent streams so they can run in any order.
std::uint64_t trial_seed(std::uint64_t seed, std::uint64_t index);

/// Samples T random orthogonal blocks per trial and checks the Procrustes
/// error inequality, the closed-form full-rank error and the upper bound.
/// Requires T > 4 and 1 <= k <= n. Ranks above the threshold are still run
/// (the bound chain may hold anyway) and flagged in `above_threshold`.
BoundReport procrustes_bound_experiment(int n, int k, int tasks, int trials, std::uint64_t seed, unsigned threads = 0);

struct ProbeReport {
    int d = 0;
    int r = 0;
    int k = 0;
    int tasks = 0;
    int trials = 0;
    double mean_fullrank_error = 0.0;
    double mean_truncated_error = 0.0;
    int trials_inequality_held = 0;
};

/// Exploratory variant on rectangular blocks (d×r with orthonormal columns,
/// as real layer factors are). Nothing is asserted; it only measures.
ProbeReport rectangular_bound_probe(int d, int r, int k, int tasks, int trials, std::uint64_t seed);

struct GramCheck {
    double min_eigenvalue = 0.0;
    double max_eigenvalue = 0.0;
    bool positive_definite = false;
    bool invertible = false;
};

/// Eigenvalues of XᵀX; an eigenvalue counts as positive when it exceeds
/// rel_tol · max eigenvalue.
GramCheck gram_pd_check(const Eigen::MatrixXd& x, double rel_tol = 1e-8);

struct EquivalenceReport {
    int trials = 0;
    double max_scaled_deviation = 0.0;  // ‖procrustes − whiten‖_F / max(1, ‖X‖_F)
    bool holds = true;                  // every trial <= tolerance
};

/// Compares procrustes(X) against whiten_eigen(X, 1e-12) on random
/// well-conditioned X with d drawn from `dims` and 1 <= c <= d.
EquivalenceReport whitening_equivalence(int trials, const std::vector<int>& dims, std::uint64_t seed,
                                        double tolerance = 1e-4);

/// Random d×c matrix with singular values in [min_sv, max_sv].
Eigen::MatrixXd random_well_conditioned(int d, int c, double min_sv, double max_sv, std::uint64_t seed);

nlohmann::json to_json(const BoundReport& report);
nlohmann::json to_json(const ProbeReport& report);
nlohmann::json to_json(const EquivalenceReport& report);
nlohmann::json to_json(const GramCheck& check);

}  // namespace tsv
