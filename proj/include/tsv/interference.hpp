#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "tsv/linalg.hpp"
#include "tsv/rank_policy.hpp"
#include "tsv/tensor.hpp"

namespace tsv {

/// Task factors laid side by side: U = [U_1 … U_T], S = [S_1 … S_T],
/// V = [V_1 … V_T]. U·diag(S)·Vᵀ equals the sum of the per-task products.
struct ConcatBasis {
    Eigen::MatrixXd U;
    Eigen::VectorXd S;
    Eigen::MatrixXd V;
    std::vector<Eigen::Index> task_offsets;  // first column of each task's block

    std::size_t tasks() const { return task_offsets.size(); }
    Eigen::Index columns() const { return S.size(); }
};

ConcatBasis concat_basis(const std::vector<SVDFactors>& factors);
Eigen::MatrixXd reconstruct(const ConcatBasis& basis);

enum class NormKind { Entrywise, Induced };

const char* norm_name(NormKind norm);
NormKind norm_from_name(const std::string& name);

/// Singular task interference ‖(UᵀU − I) diag(S) (VᵀV − I)‖.
/// Entrywise: sum of absolute values. Induced: max absolute column sum.
double sti(const Eigen::MatrixXd& u, const Eigen::VectorXd& s, const Eigen::MatrixXd& v,
           NormKind norm = NormKind::Entrywise);
double sti(const ConcatBasis& basis, NormKind norm = NormKind::Entrywise);

struct SimilarityBlocks {
    Eigen::MatrixXd uu;  // UᵀU
    Eigen::MatrixXd vv;  // VᵀV
    std::vector<Eigen::Index> task_offsets;
};

SimilarityBlocks similarity_blocks(const ConcatBasis& basis);

struct InterferenceReport {
    std::map<std::string, double> layers;  // matrix layers only
    double total = 0.0;
    std::map<std::string, double> blocks;  // filled when grouping was requested
    NormKind norm = NormKind::Entrywise;
    std::string rank_policy;
};

struct StiOptions {
    std::optional<RankPolicy> rank_policy;  // unset: PerTask(T)
    NormKind norm = NormKind::Entrywise;
    bool group_blocks = false;
    unsigned threads = 0;
};

/// Transformer-block key of a parameter name: everything up to and including
/// the first purely numeric dotted component ("blocks.3.attn.qkv.weight" ->
/// "blocks.3"). Names without one form their own group.
std::string block_key(const std::string& name);

std::map<std::string, double> group_by_block(const std::map<std::string, double>& per_layer);

/// Per-layer STI across tasks. Needs at least two tasks.
InterferenceReport model_sti_report(const std::vector<TaskDelta>& deltas, const StiOptions& opts = {});

nlohmann::json to_json(const InterferenceReport& report);

}  // namespace tsv
