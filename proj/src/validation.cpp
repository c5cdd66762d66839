#include "tsv/validation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <nlohmann/json.hpp>

#include "tsv/errors.hpp"
#include "tsv/linalg.hpp"
#include "tsv/parallel.hpp"

namespace tsv {

using json = nlohmann::json;

namespace {

Eigen::MatrixXd gaussian(int rows, int cols, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd a(rows, cols);
    for (int j = 0; j < cols; ++j) {
        for (int i = 0; i < rows; ++i) a(i, j) = normal(rng);
    }
    return a;
}

Eigen::MatrixXd random_orthogonal(int n, std::mt19937_64& rng) {
    const Eigen::MatrixXd a = gaussian(n, n, rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j) {
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    }
    return q;
}

// Concatenates the first `cols` columns of every block.
Eigen::MatrixXd concat_leading(const std::vector<Eigen::MatrixXd>& blocks, int cols) {
    const auto rows = blocks.front().rows();
    Eigen::MatrixXd out(rows, cols * static_cast<Eigen::Index>(blocks.size()));
    for (std::size_t i = 0; i < blocks.size(); ++i) out.middleCols(static_cast<Eigen::Index>(i) * cols, cols) = blocks[i].leftCols(cols);
    return out;
}

}  // namespace

double normalized_accuracy(const AccuracyTable& table) {
    if (table.empty()) throw InvalidArgument("normalized_accuracy: empty table");
    double sum = 0.0;
    for (const auto& row : table) {
        if (!(row.fine_tuned > 0.0)) {
            throw InvalidArgument("normalized_accuracy: fine-tuned accuracy of '" + row.task + "' must be > 0");
        }
        sum += row.merged / row.fine_tuned;
    }
    return sum / static_cast<double>(table.size());
}

double fullrank_procrustes_error(int n, int tasks) {
    if (n < 1 || tasks < 1) throw InvalidArgument("fullrank_procrustes_error: n and T must be >= 1");
    return std::sqrt(static_cast<double>(n)) * (std::sqrt(static_cast<double>(tasks)) - 1.0);
}

double truncated_procrustes_bound(int n, int k, int tasks) {
    if (k < 1 || k > n) throw InvalidArgument("truncated_procrustes_bound: need 1 <= k <= n");
    if (tasks < 1) throw InvalidArgument("truncated_procrustes_bound: T must be >= 1");
    const double kt = static_cast<double>(k) * tasks;
    return std::sqrt(n + kt - 2.0 * std::sqrt(kt));
}

double truncation_rank_threshold(int n, int tasks) {
    if (tasks <= 4) throw InvalidArgument("truncation_rank_threshold: only meaningful for T > 4, got T=" + std::to_string(tasks));
    if (n < 1) throw InvalidArgument("truncation_rank_threshold: n must be >= 1");
    const double t = tasks;
    return n * (t - 2.0 * std::sqrt(t)) / t;
}

Eigen::MatrixXd random_orthogonal(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return random_orthogonal(n, rng);
}

std::uint64_t trial_seed(std::uint64_t seed, std::uint64_t index) {
    // splitmix64 over the pair
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

BoundReport procrustes_bound_experiment(int n, int k, int tasks, int trials, std::uint64_t seed, unsigned threads) {
    BoundReport r;
    r.threshold_k = truncation_rank_threshold(n, tasks);
    if (k < 1 || k > n) throw InvalidArgument("procrustes_bound_experiment: need 1 <= k <= n");
    if (trials < 0) throw InvalidArgument("procrustes_bound_experiment: trials must be >= 0");
    r.n = n;
    r.k = k;
    r.tasks = tasks;
    r.trials = trials;
    r.seed = seed;
    r.exact_fullrank_error = fullrank_procrustes_error(n, tasks);
    r.upper_bound = truncated_procrustes_bound(n, k, tasks);
    r.above_threshold = k > r.threshold_k;
    r.no_data = trials == 0;
    r.per_trial.resize(static_cast<std::size_t>(trials));

    parallel_for(r.per_trial.size(), threads, [&](std::size_t t) {
        std::mt19937_64 rng(trial_seed(seed, t));
        std::vector<Eigen::MatrixXd> blocks;
        for (int i = 0; i < tasks; ++i) blocks.push_back(random_orthogonal(n, rng));
        const Eigen::MatrixXd full = concat_leading(blocks, n);
        const Eigen::MatrixXd trunc = concat_leading(blocks, k);

        BoundTrial& out = r.per_trial[t];
        out.fullrank_error = (full - procrustes(full)).norm();
        out.truncated_error = (trunc - procrustes(trunc)).norm();
        Eigen::BDCSVD<Eigen::MatrixXd> sv(trunc);
        out.sigma_sum = sv.singularValues().sum();
        out.trace = trunc.squaredNorm();
    });

    const double kt = static_cast<double>(k) * tasks;
    r.min_error_gap = trials ? std::numeric_limits<double>::infinity() : 0.0;
    for (const auto& t : r.per_trial) {
        const double dev = std::abs(t.fullrank_error - r.exact_fullrank_error) / std::max(r.exact_fullrank_error, 1e-300);
        const double dev_abs = std::abs(t.fullrank_error - r.exact_fullrank_error);
        r.max_fullrank_rel_deviation = std::max(r.max_fullrank_rel_deviation, r.exact_fullrank_error > 0 ? dev : dev_abs);
        r.max_truncated_error = std::max(r.max_truncated_error, t.truncated_error);
        r.min_error_gap = std::min(r.min_error_gap, t.fullrank_error - t.truncated_error);
        if (t.fullrank_error < t.truncated_error) r.inequality_holds = false;
        if ((r.exact_fullrank_error > 0 ? dev : dev_abs) > 1e-6) r.closed_form_matches = false;
        if (t.truncated_error > r.upper_bound + 1e-6) r.within_upper_bound = false;
        if (t.sigma_sum < std::sqrt(kt) - 1e-9 * kt) r.sigma_sum_bound = false;
        if (std::abs(t.trace - kt) > 1e-9 * kt) r.trace_matches = false;
    }
    return r;
}

ProbeReport rectangular_bound_probe(int d, int r, int k, int tasks, int trials, std::uint64_t seed) {
    if (r < 1 || r > d || k < 1 || k > r || tasks < 1 || trials < 0) {
        throw InvalidArgument("rectangular_bound_probe: need 1 <= k <= r <= d, T >= 1, trials >= 0");
    }
    ProbeReport p{d, r, k, tasks, trials, 0.0, 0.0, 0};
    for (int t = 0; t < trials; ++t) {
        std::mt19937_64 rng(trial_seed(seed, static_cast<std::uint64_t>(t)));
        std::vector<Eigen::MatrixXd> blocks;
        for (int i = 0; i < tasks; ++i) blocks.push_back(random_orthogonal(d, rng).leftCols(r));
        const Eigen::MatrixXd full = concat_leading(blocks, r);
        const Eigen::MatrixXd trunc = concat_leading(blocks, k);
        const double ef = (full - procrustes(full)).norm();
        const double et = (trunc - procrustes(trunc)).norm();
        p.mean_fullrank_error += ef;
        p.mean_truncated_error += et;
        if (ef >= et) ++p.trials_inequality_held;
    }
    if (trials > 0) {
        p.mean_fullrank_error /= trials;
        p.mean_truncated_error /= trials;
    }
    return p;
}

GramCheck gram_pd_check(const Eigen::MatrixXd& x, double rel_tol) {
    GramCheck g;
    if (x.cols() == 0) return g;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(x.transpose() * x, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw NumericError("gram_pd_check: eigensolver failed");
    g.min_eigenvalue = solver.eigenvalues().minCoeff();
    g.max_eigenvalue = solver.eigenvalues().maxCoeff();
    g.positive_definite = g.max_eigenvalue > 0.0 && g.min_eigenvalue > rel_tol * g.max_eigenvalue;
    g.invertible = g.positive_definite;
    return g;
}

Eigen::MatrixXd random_well_conditioned(int d, int c, double min_sv, double max_sv, std::uint64_t seed) {
    if (c < 1 || c > d) throw InvalidArgument("random_well_conditioned: need 1 <= c <= d");
    std::mt19937_64 rng(seed);
    const Eigen::MatrixXd left = random_orthogonal(d, rng).leftCols(c);
    const Eigen::MatrixXd right = random_orthogonal(c, rng);
    std::uniform_real_distribution<double> sv(min_sv, max_sv);
    Eigen::VectorXd s(c);
    for (int i = 0; i < c; ++i) s(i) = sv(rng);
    return left * s.asDiagonal() * right.transpose();
}

EquivalenceReport whitening_equivalence(int trials, const std::vector<int>& dims, std::uint64_t seed, double tolerance) {
    if (dims.empty()) throw InvalidArgument("whitening_equivalence: no dimensions given");
    EquivalenceReport rep;
    rep.trials = trials;
    for (int t = 0; t < trials; ++t) {
        const std::uint64_t s = trial_seed(seed, static_cast<std::uint64_t>(t));
        const int d = dims[static_cast<std::size_t>(t) % dims.size()];
        std::mt19937_64 rng(s);
        const int c = std::uniform_int_distribution<int>(1, d)(rng);
        const Eigen::MatrixXd x = random_well_conditioned(d, c, 0.05, 5.0, s ^ 0xabcdefULL);
        const double dev = (procrustes(x) - whiten_eigen(x, 1e-12)).norm() / std::max(1.0, x.norm());
        rep.max_scaled_deviation = std::max(rep.max_scaled_deviation, dev);
        if (dev > tolerance) rep.holds = false;
    }
    return rep;
}

json to_json(const BoundReport& r) {
    json trials = json::array();
    for (const auto& t : r.per_trial) {
        trials.push_back({{"fullrank_error", t.fullrank_error},
                          {"truncated_error", t.truncated_error},
                          {"sigma_sum", t.sigma_sum},
                          {"trace", t.trace}});
    }
    return {{"n", r.n},
            {"T", r.tasks},
            {"k", r.k},
            {"trials", r.trials},
            {"seed", r.seed},
            {"exact_fullrank_error", r.exact_fullrank_error},
            {"upper_bound", r.upper_bound},
            {"threshold_k", r.threshold_k},
            {"above_threshold", r.above_threshold},
            {"max_fullrank_rel_deviation", r.max_fullrank_rel_deviation},
            {"max_truncated_error", r.max_truncated_error},
            {"min_error_gap", r.min_error_gap},
            {"inequality_holds", r.inequality_holds},
            {"closed_form_matches", r.closed_form_matches},
            {"within_upper_bound", r.within_upper_bound},
            {"sigma_sum_bound", r.sigma_sum_bound},
            {"trace_matches", r.trace_matches},
            {"status", r.no_data ? "no-data" : (r.passed() ? "ok" : "violated")},
            {"per_trial", trials}};
}

json to_json(const ProbeReport& p) {
    return {{"d", p.d},
            {"r", p.r},
            {"k", p.k},
            {"T", p.tasks},
            {"trials", p.trials},
            {"mean_fullrank_error", p.mean_fullrank_error},
            {"mean_truncated_error", p.mean_truncated_error},
            {"trials_inequality_held", p.trials_inequality_held},
            {"exploratory", true}};
}

json to_json(const EquivalenceReport& r) {
    return {{"trials", r.trials}, {"max_scaled_deviation", r.max_scaled_deviation}, {"holds", r.holds}};
}

json to_json(const GramCheck& g) {
    return {{"min_eigenvalue", g.min_eigenvalue},
            {"max_eigenvalue", g.max_eigenvalue},
            {"positive_definite", g.positive_definite},
            {"invertible", g.invertible}};
}

}  // namespace tsv
