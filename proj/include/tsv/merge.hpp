#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "tsv/interference.hpp"
#include "tsv/rank_policy.hpp"
#include "tsv/tensor.hpp"

namespace tsv {

enum class OrthoMethod { Procrustes, EigenWhiten };

const char* ortho_method_name(OrthoMethod method);
OrthoMethod ortho_method_from_name(const std::string& name);

struct MergeConfig {
    double alpha = 1.0;
    std::optional<RankPolicy> rank_policy;  // unset: PerTask(T)
    bool low_rank = true;
    bool interference_reduction = true;
    OrthoMethod ortho_method = OrthoMethod::Procrustes;
    double eps = 1e-12;                 // EigenWhiten only
    std::set<std::string> force_vector; // matrix layers merged as plain means
    NormKind norm = NormKind::Entrywise;
    unsigned threads = 0;

    RankPolicy effective_policy(std::size_t tasks) const;
};

struct LayerMergeDiagnostics {
    std::int64_t rank = 0;       // components kept per task
    double ortho_err_u = 0.0;    // ‖U − U⊥‖_F
    double ortho_err_v = 0.0;    // ‖V − V⊥‖_F
    double sti_before = 0.0;
    double sti_after = 0.0;
};

/// Merges one matrix layer.
///
/// Both toggles off: the plain mean Σ Δ_i / T.
/// Otherwise the (optionally truncated) task factors are concatenated, U and V
/// are optionally replaced by their orthogonalizations, and the layer becomes
/// U⊥ · Σ · V⊥ᵀ. This path sums over tasks; there is no division by T.
Eigen::MatrixXd merge_layer(const std::vector<Eigen::MatrixXf>& deltas, const MergeConfig& cfg,
                            LayerMergeDiagnostics* diagnostics = nullptr);

struct MergeResult {
    TensorMap weights;
    std::map<std::string, LayerMergeDiagnostics> layers;  // matrix layers
    InterferenceReport sti_before;
    InterferenceReport sti_after;

    double mean_ortho_error() const;  // mean over layers of err_u + err_v
};

/// θ_pre + α · merged delta. Matrix layers go through merge_layer, vector
/// layers (and forced ones) use the running mean of the task deltas.
MergeResult merge(const TensorMap& pre, const std::vector<TaskDelta>& deltas, const MergeConfig& cfg = {});

struct AblationRow {
    std::string tag;  // ta, lr, ir, tsvm
    bool low_rank = false;
    bool interference_reduction = false;
    MergeResult result;
};

/// The four low-rank × interference-reduction combinations, sharing every
/// other setting of `cfg`.
std::vector<AblationRow> ablation_suite(const TensorMap& pre, const std::vector<TaskDelta>& deltas,
                                        const MergeConfig& cfg = {});

nlohmann::json to_json(const MergeResult& result, const MergeConfig& cfg, std::size_t tasks);
nlohmann::json ablation_json(const std::vector<AblationRow>& rows, const MergeConfig& cfg, std::size_t tasks);

}  // namespace tsv
