#include "tsv/merge.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "tsv/errors.hpp"
#include "tsv/linalg.hpp"
#include "tsv/parallel.hpp"

namespace tsv {

using json = nlohmann::json;

const char* ortho_method_name(OrthoMethod method) {
    return method == OrthoMethod::Procrustes ? "procrustes" : "eigen";
}

OrthoMethod ortho_method_from_name(const std::string& name) {
    if (name == "procrustes") return OrthoMethod::Procrustes;
    if (name == "eigen") return OrthoMethod::EigenWhiten;
    throw InvalidArgument("unknown orthogonalization method '" + name + "'");
}

RankPolicy MergeConfig::effective_policy(std::size_t tasks) const {
    if (!low_rank) return RankPolicy::FullRank();
    return rank_policy.value_or(RankPolicy::PerTask(static_cast<int>(tasks)));
}

namespace {

Eigen::MatrixXd orthogonalize(const Eigen::MatrixXd& x, const MergeConfig& cfg) {
    return cfg.ortho_method == OrthoMethod::Procrustes ? procrustes(x) : whiten_eigen(x, cfg.eps);
}

}  // namespace

Eigen::MatrixXd merge_layer(const std::vector<Eigen::MatrixXf>& deltas, const MergeConfig& cfg,
                            LayerMergeDiagnostics* diagnostics) {
    if (deltas.empty()) throw InvalidArgument("merge_layer: no task matrices");
    const Eigen::Index d = deltas.front().rows();
    const Eigen::Index m = deltas.front().cols();
    for (const auto& delta : deltas) {
        if (delta.rows() != d || delta.cols() != m) throw ShapeMismatchError("merge_layer: task matrices differ in shape", "");
    }
    const RankPolicy policy = cfg.effective_policy(deltas.size());
    const auto k = policy.rank_for(d, m);

    std::vector<SVDFactors> factors;
    factors.reserve(deltas.size());
    for (const auto& delta : deltas) factors.push_back(truncate(svd(delta), k));
    const ConcatBasis basis = concat_basis(factors);

    LayerMergeDiagnostics diag;
    diag.rank = k;
    diag.sti_before = sti(basis, cfg.norm);
    diag.sti_after = diag.sti_before;

    Eigen::MatrixXd merged;
    if (!cfg.low_rank && !cfg.interference_reduction) {
        merged = Eigen::MatrixXd::Zero(d, m);
        for (const auto& delta : deltas) merged += delta.cast<double>();
        merged /= static_cast<double>(deltas.size());
    } else if (cfg.interference_reduction) {
        const Eigen::MatrixXd u_perp = orthogonalize(basis.U, cfg);
        const Eigen::MatrixXd v_perp = orthogonalize(basis.V, cfg);
        diag.ortho_err_u = (basis.U - u_perp).norm();
        diag.ortho_err_v = (basis.V - v_perp).norm();
        diag.sti_after = sti(u_perp, basis.S, v_perp, cfg.norm);
        merged = u_perp * basis.S.asDiagonal() * v_perp.transpose();
    } else {
        merged = reconstruct(basis);
    }
    if (!merged.allFinite()) throw NumericError("merge_layer: merged matrix is not finite");
    if (diagnostics) *diagnostics = diag;
    return merged;
}

double MergeResult::mean_ortho_error() const {
    if (layers.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& [name, diag] : layers) sum += diag.ortho_err_u + diag.ortho_err_v;
    return sum / static_cast<double>(layers.size());
}

MergeResult merge(const TensorMap& pre, const std::vector<TaskDelta>& deltas, const MergeConfig& cfg) {
    if (deltas.empty()) throw InvalidArgument("merge: need at least one task");
    if (!std::isfinite(cfg.alpha)) throw InvalidArgument("merge: alpha must be finite");
    check_aligned(pre, deltas);

    std::vector<std::string> names;
    for (const auto& [name, _] : pre.entries) names.push_back(name);

    struct Slot {
        Tensor weights;
        bool matrix = false;
        LayerMergeDiagnostics diag;
    };
    std::vector<Slot> slots(names.size());

    parallel_for(names.size(), cfg.threads, [&](std::size_t i) {
        const std::string& name = names[i];
        const Tensor& base = pre.entries.at(name);
        const bool matrix =
            deltas.front().layers.at(name).kind == LayerKind::Matrix && !cfg.force_vector.count(name);
        std::vector<double> update;  // row-major merged delta
        if (matrix) {
            std::vector<Eigen::MatrixXf> mats;
            for (const auto& td : deltas) mats.push_back(to_matrix(td.layers.at(name).delta));
            Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> merged;
            try {
                merged = merge_layer(mats, cfg, &slots[i].diag);
            } catch (const InvalidArgument& e) {
                throw InvalidArgument("layer '" + name + "': " + e.what());
            } catch (const NumericError& e) {
                throw NumericError("layer '" + name + "': " + e.what());
            }
            update.assign(merged.data(), merged.data() + merged.size());
        } else {
            WelfordMean mean;
            for (const auto& td : deltas) mean.update(td.layers.at(name).delta.data);
            update = mean.mean();
        }
        std::vector<float> out(base.data.size());
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] = static_cast<float>(static_cast<double>(base.data[j]) + cfg.alpha * update[j]);
        }
        slots[i].weights = Tensor(base.shape, std::move(out));
        slots[i].matrix = matrix;
    });

    MergeResult result;
    result.weights.metadata = pre.metadata;
    const std::string policy = cfg.effective_policy(deltas.size()).to_string();
    for (auto* report : {&result.sti_before, &result.sti_after}) {
        report->norm = cfg.norm;
        report->rank_policy = policy;
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
        result.weights.entries.emplace(names[i], std::move(slots[i].weights));
        if (!slots[i].matrix) continue;
        const auto& diag = slots[i].diag;
        result.layers.emplace(names[i], diag);
        result.sti_before.layers.emplace(names[i], diag.sti_before);
        result.sti_before.total += diag.sti_before;
        result.sti_after.layers.emplace(names[i], diag.sti_after);
        result.sti_after.total += diag.sti_after;
    }
    return result;
}

std::vector<AblationRow> ablation_suite(const TensorMap& pre, const std::vector<TaskDelta>& deltas,
                                        const MergeConfig& cfg) {
    struct Toggle {
        const char* tag;
        bool low_rank;
        bool ir;
    };
    constexpr Toggle grid[] = {{"ta", false, false}, {"lr", true, false}, {"ir", false, true}, {"tsvm", true, true}};
    std::vector<AblationRow> rows;
    for (const auto& t : grid) {
        MergeConfig c = cfg;
        c.low_rank = t.low_rank;
        c.interference_reduction = t.ir;
        rows.push_back(AblationRow{t.tag, t.low_rank, t.ir, merge(pre, deltas, c)});
    }
    return rows;
}

json to_json(const MergeResult& result, const MergeConfig& cfg, std::size_t tasks) {
    json per_layer = json::object();
    double err_u = 0.0;
    double err_v = 0.0;
    for (const auto& [name, d] : result.layers) {
        per_layer[name] = {{"rank", d.rank},
                           {"ortho_err_u", d.ortho_err_u},
                           {"ortho_err_v", d.ortho_err_v},
                           {"sti_before", d.sti_before},
                           {"sti_after", d.sti_after}};
        err_u += d.ortho_err_u;
        err_v += d.ortho_err_v;
    }
    return {{"alpha", cfg.alpha},
            {"tasks", tasks},
            {"rank_policy", cfg.effective_policy(tasks).to_string()},
            {"norm", norm_name(cfg.norm)},
            {"toggles",
             {{"low_rank", cfg.low_rank},
              {"interference_reduction", cfg.interference_reduction},
              {"ortho_method", ortho_method_name(cfg.ortho_method)}}},
            {"per_layer", per_layer},
            {"totals",
             {{"sti_before", result.sti_before.total},
              {"sti_after", result.sti_after.total},
              {"ortho_err_u", err_u},
              {"ortho_err_v", err_v},
              {"mean_ortho_err", result.mean_ortho_error()}}}};
}

json ablation_json(const std::vector<AblationRow>& rows, const MergeConfig& cfg, std::size_t tasks) {
    json configs = json::array();
    for (const auto& row : rows) {
        MergeConfig c = cfg;
        c.low_rank = row.low_rank;
        c.interference_reduction = row.interference_reduction;
        configs.push_back({{"tag", row.tag},
                           {"low_rank", row.low_rank},
                           {"interference_reduction", row.interference_reduction},
                           {"rank_policy", c.effective_policy(tasks).to_string()},
                           {"mean_ortho_err", row.result.mean_ortho_error()},
                           {"sti_before", row.result.sti_before.total},
                           {"sti_after", row.result.sti_after.total}});
    }
    return {{"alpha", cfg.alpha}, {"tasks", tasks}, {"configs", configs}};
}

}  // namespace tsv
