#include "tsv/interference.hpp"

#include <algorithm>
#include <cctype>

#include <nlohmann/json.hpp>

#include "tsv/errors.hpp"
#include "tsv/parallel.hpp"

namespace tsv {

ConcatBasis concat_basis(const std::vector<SVDFactors>& factors) {
    if (factors.empty()) throw InvalidArgument("concat_basis: no factors");
    const Eigen::Index d = factors.front().rows();
    const Eigen::Index m = factors.front().cols();
    Eigen::Index total = 0;
    for (std::size_t i = 0; i < factors.size(); ++i) {
        const auto& f = factors[i];
        if (f.rows() != d || f.cols() != m) {
            throw ShapeMismatchError("concat_basis: task " + std::to_string(i) + " has shape " +
                                         std::to_string(f.rows()) + "x" + std::to_string(f.cols()) + ", expected " +
                                         std::to_string(d) + "x" + std::to_string(m),
                                     "");
        }
        if (f.U.cols() != f.rank() || f.V.cols() != f.rank()) {
            throw InvalidArgument("concat_basis: inconsistent factor ranks in task " + std::to_string(i));
        }
        total += f.rank();
    }

    ConcatBasis b;
    b.U.resize(d, total);
    b.V.resize(m, total);
    b.S.resize(total);
    Eigen::Index off = 0;
    for (const auto& f : factors) {
        b.task_offsets.push_back(off);
        b.U.middleCols(off, f.rank()) = f.U.cast<double>();
        b.V.middleCols(off, f.rank()) = f.V.cast<double>();
        b.S.segment(off, f.rank()) = f.S.cast<double>();
        off += f.rank();
    }
    return b;
}

Eigen::MatrixXd reconstruct(const ConcatBasis& basis) {
    return basis.U * basis.S.asDiagonal() * basis.V.transpose();
}

const char* norm_name(NormKind norm) {
    return norm == NormKind::Entrywise ? "entrywise-l1" : "induced-l1";
}

NormKind norm_from_name(const std::string& name) {
    if (name == "entrywise" || name == "entrywise-l1") return NormKind::Entrywise;
    if (name == "induced" || name == "induced-l1") return NormKind::Induced;
    throw InvalidArgument("unknown norm '" + name + "'");
}

double sti(const Eigen::MatrixXd& u, const Eigen::VectorXd& s, const Eigen::MatrixXd& v, NormKind norm) {
    const Eigen::Index n = s.size();
    if (u.cols() != n || v.cols() != n) throw InvalidArgument("sti: U, S, V column counts differ");
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
    const Eigen::MatrixXd left = u.transpose() * u - eye;
    const Eigen::MatrixXd right = v.transpose() * v - eye;
    const Eigen::MatrixXd product = left * s.asDiagonal() * right;
    if (norm == NormKind::Entrywise) return product.cwiseAbs().sum();
    return n == 0 ? 0.0 : product.cwiseAbs().colwise().sum().maxCoeff();
}

double sti(const ConcatBasis& basis, NormKind norm) {
    return sti(basis.U, basis.S, basis.V, norm);
}

SimilarityBlocks similarity_blocks(const ConcatBasis& basis) {
    return SimilarityBlocks{basis.U.transpose() * basis.U, basis.V.transpose() * basis.V, basis.task_offsets};
}

std::string block_key(const std::string& name) {
    std::size_t start = 0;
    while (start <= name.size()) {
        std::size_t dot = name.find('.', start);
        if (dot == std::string::npos) dot = name.size();
        const std::string part = name.substr(start, dot - start);
        if (!part.empty() && std::all_of(part.begin(), part.end(), [](unsigned char c) { return std::isdigit(c); })) {
            return name.substr(0, dot);
        }
        start = dot + 1;
    }
    return name;
}

std::map<std::string, double> group_by_block(const std::map<std::string, double>& per_layer) {
    std::map<std::string, double> out;
    for (const auto& [name, value] : per_layer) out[block_key(name)] += value;
    return out;
}

InterferenceReport model_sti_report(const std::vector<TaskDelta>& deltas, const StiOptions& opts) {
    if (deltas.size() < 2) throw InvalidArgument("need >= 2 tasks to measure interference");
    const RankPolicy policy = opts.rank_policy.value_or(RankPolicy::PerTask(static_cast<int>(deltas.size())));

    std::vector<std::string> names;
    for (const auto& [name, layer] : deltas.front().layers) {
        if (layer.kind == LayerKind::Matrix) names.push_back(name);
    }
    for (const auto& td : deltas) {
        for (const auto& name : names) {
            auto it = td.layers.find(name);
            if (it == td.layers.end()) throw NameSetMismatchError("task '" + td.task_id + "' lacks layer '" + name + "'", name);
            if (it->second.delta.shape != deltas.front().layers.at(name).delta.shape) {
                throw ShapeMismatchError("task '" + td.task_id + "': shape mismatch for '" + name + "'", name);
            }
        }
    }

    std::vector<double> values(names.size());
    parallel_for(names.size(), opts.threads, [&](std::size_t i) {
        const auto& name = names[i];
        std::vector<SVDFactors> factors;
        factors.reserve(deltas.size());
        for (const auto& td : deltas) {
            const Tensor& t = td.layers.at(name).delta;
            try {
                const auto k = policy.rank_for(t.rows(), t.cols());
                factors.push_back(truncate(svd(to_matrix(t)), k));
            } catch (const InvalidArgument& e) {
                throw InvalidArgument("layer '" + name + "': " + e.what());
            } catch (const NumericError& e) {
                throw NumericError("layer '" + name + "': " + e.what());
            }
        }
        values[i] = sti(concat_basis(factors), opts.norm);
    });

    InterferenceReport report;
    report.norm = opts.norm;
    report.rank_policy = policy.to_string();
    for (std::size_t i = 0; i < names.size(); ++i) {
        report.layers.emplace(names[i], values[i]);
        report.total += values[i];
    }
    if (opts.group_blocks) report.blocks = group_by_block(report.layers);
    return report;
}

nlohmann::json to_json(const InterferenceReport& report) {
    nlohmann::json j;
    j["layers"] = report.layers;
    j["total"] = report.total;
    j["norm"] = norm_name(report.norm);
    j["rank_policy"] = report.rank_policy;
    if (!report.blocks.empty()) j["blocks"] = report.blocks;
    return j;
}

}  // namespace tsv
