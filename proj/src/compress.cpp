#include "tsv/compress.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "tsv/errors.hpp"
#include "tsv/parallel.hpp"
#include "tsv/safetensors.hpp"

namespace tsv {

using json = nlohmann::json;

namespace {

const std::string kSuffixU = ".U";
const std::string kSuffixS = ".S";
const std::string kSuffixVt = ".Vt";
const std::string kSuffixVec = ".vec";

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::string> matrix_layer_names(const TaskDelta& delta) {
    std::vector<std::string> names;
    for (const auto& [name, layer] : delta.layers) {
        if (layer.kind == LayerKind::Matrix) names.push_back(name);
    }
    return names;
}

Tensor vector_tensor(const Eigen::VectorXf& v) {
    return Tensor({v.size()}, std::vector<float>(v.data(), v.data() + v.size()));
}

}  // namespace

std::map<std::string, std::int64_t> CompressedTask::ranks() const {
    std::map<std::string, std::int64_t> out;
    for (const auto& [name, layer] : layers) out.emplace(name, layer.factors.rank());
    return out;
}

std::int64_t CompressedTask::stored_params() const {
    std::int64_t n = 0;
    for (const auto& [name, layer] : layers) {
        n += layer.factors.U.size() + layer.factors.S.size() + layer.factors.V.size();
    }
    for (const auto& [name, t] : vector_layers) n += t.numel();
    return n;
}

CompressedTask compress(const TaskDelta& delta, const RankPolicy& policy, unsigned threads) {
    CompressedTask ct;
    ct.task_id = delta.task_id;
    ct.rank_policy = policy;

    const auto names = matrix_layer_names(delta);
    std::vector<CompressedLayer> out(names.size());
    parallel_for(names.size(), threads, [&](std::size_t i) {
        const Tensor& t = delta.layers.at(names[i]).delta;
        try {
            const auto k = policy.rank_for(t.rows(), t.cols());
            out[i] = CompressedLayer{truncate(svd(to_matrix(t)), k), t.rows(), t.cols()};
        } catch (const InvalidArgument& e) {
            throw InvalidArgument("layer '" + names[i] + "': " + e.what());
        } catch (const NumericError& e) {
            throw NumericError("layer '" + names[i] + "': " + e.what());
        }
    });
    for (std::size_t i = 0; i < names.size(); ++i) ct.layers.emplace(names[i], std::move(out[i]));
    for (const auto& [name, layer] : delta.layers) {
        if (layer.kind == LayerKind::Vector) ct.vector_layers.emplace(name, layer.delta);
    }
    return ct;
}

TensorMap expand(const CompressedTask& ct, const TensorMap& pre, double alpha) {
    if (!std::isfinite(alpha)) throw InvalidArgument("alpha must be finite");
    TensorMap out;
    out.metadata = pre.metadata;
    for (const auto& [name, base] : pre.entries) {
        Tensor result(base.shape, base.data);
        if (auto it = ct.layers.find(name); it != ct.layers.end()) {
            const auto& layer = it->second;
            if (base.shape != Shape{layer.rows, layer.cols}) {
                throw ShapeMismatchError("expand: shape mismatch for '" + name + "'", name);
            }
            using RowMajorD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
            const RowMajorD approx = reconstruct_d(layer.factors);
            for (std::size_t j = 0; j < result.data.size(); ++j) {
                result.data[j] = static_cast<float>(static_cast<double>(base.data[j]) + alpha * approx.data()[j]);
            }
        } else if (auto vt = ct.vector_layers.find(name); vt != ct.vector_layers.end()) {
            if (vt->second.shape != base.shape) {
                throw ShapeMismatchError("expand: shape mismatch for '" + name + "'", name);
            }
            for (std::size_t j = 0; j < result.data.size(); ++j) {
                result.data[j] =
                    static_cast<float>(static_cast<double>(base.data[j]) + alpha * static_cast<double>(vt->second.data[j]));
            }
        }
        out.entries.emplace(name, std::move(result));
    }
    for (const auto& [name, _] : ct.layers) {
        if (!pre.entries.count(name)) throw NameSetMismatchError("expand: '" + name + "' not in pre-trained model", name);
    }
    for (const auto& [name, _] : ct.vector_layers) {
        if (!pre.entries.count(name)) throw NameSetMismatchError("expand: '" + name + "' not in pre-trained model", name);
    }
    return out;
}

TensorMap to_checkpoint(const CompressedTask& ct) {
    TensorMap map;
    json shapes = json::object();
    for (const auto& [name, layer] : ct.layers) {
        const auto& f = layer.factors;
        map.entries.emplace(name + kSuffixU, from_matrix(f.U));
        map.entries.emplace(name + kSuffixS, vector_tensor(f.S));
        map.entries.emplace(name + kSuffixVt, from_matrix(f.V.transpose()));
        shapes[name] = {layer.rows, layer.cols};
    }
    for (const auto& [name, t] : ct.vector_layers) map.entries.emplace(name + kSuffixVec, Tensor(t.shape, t.data));
    map.metadata["task_id"] = ct.task_id;
    map.metadata["rank_policy"] = ct.rank_policy.to_string();
    map.metadata["original_shapes"] = shapes.dump();
    return map;
}

CompressedTask from_checkpoint(const TensorMap& map) {
    auto meta = [&](const char* key) -> const std::string& {
        auto it = map.metadata.find(key);
        if (it == map.metadata.end()) throw MalformedHeaderError(std::string("compressed task lacks metadata '") + key + "'");
        return it->second;
    };
    CompressedTask ct;
    ct.task_id = meta("task_id");
    ct.rank_policy = RankPolicy::parse(meta("rank_policy"));

    json shapes;
    try {
        shapes = json::parse(meta("original_shapes"));
    } catch (const json::exception& e) {
        throw MalformedHeaderError(std::string("original_shapes is not valid JSON: ") + e.what());
    }
    if (!shapes.is_object()) throw MalformedHeaderError("original_shapes must be an object");

    std::size_t consumed = 0;
    for (const auto& [name, shape] : shapes.items()) {
        if (!shape.is_array() || shape.size() != 2) throw MalformedHeaderError("bad original shape for '" + name + "'");
        const auto d = shape[0].get<std::int64_t>();
        const auto m = shape[1].get<std::int64_t>();
        auto find = [&](const std::string& key) -> const Tensor& {
            auto it = map.entries.find(key);
            if (it == map.entries.end()) throw MalformedHeaderError("compressed task lacks tensor '" + key + "'");
            ++consumed;
            return it->second;
        };
        const Tensor& u = find(name + kSuffixU);
        const Tensor& s = find(name + kSuffixS);
        const Tensor& vt = find(name + kSuffixVt);
        const std::int64_t k = s.numel();
        if (s.shape.size() != 1 || u.shape != Shape{d, k} || vt.shape != Shape{k, m}) {
            throw MalformedHeaderError("factor shapes for '" + name + "' are inconsistent");
        }
        SVDFactors f;
        f.U = to_matrix(u);
        f.S = Eigen::Map<const Eigen::VectorXf>(s.data.data(), k);
        f.V = to_matrix(vt).transpose();
        ct.layers.emplace(name, CompressedLayer{std::move(f), d, m});
    }
    for (const auto& [key, t] : map.entries) {
        if (ends_with(key, kSuffixVec)) {
            ct.vector_layers.emplace(key.substr(0, key.size() - kSuffixVec.size()), Tensor(t.shape, t.data));
            ++consumed;
        }
    }
    if (consumed != map.entries.size()) throw MalformedHeaderError("compressed task contains unrecognized tensors");
    return ct;
}

void save_compressed(const CompressedTask& ct, const std::filesystem::path& path) {
    save_checkpoint(to_checkpoint(ct), path);
}

CompressedTask load_compressed(const std::filesystem::path& path) {
    return from_checkpoint(load_checkpoint(path));
}

bool StorageReport::all_within_threshold() const {
    for (const auto& l : layers) {
        if (!l.within_threshold) return false;
    }
    return true;
}

std::int64_t storage_rank_threshold(std::int64_t d, std::int64_t m) {
    return (d * m - 1) / (d + m + 1);
}

StorageReport storage_report(const std::vector<NamedShape>& shapes, const RankPolicy& policy) {
    if (shapes.empty()) throw InvalidArgument("storage_report: no layers");
    StorageReport r;
    for (const auto& [name, shape] : shapes) {
        if (classify_param(name, shape) == LayerKind::Vector) {
            r.vector_params += element_count(shape);
            continue;
        }
        LayerStorage l;
        l.name = name;
        l.d = shape[0];
        l.m = shape[1];
        l.k = policy.rank_for(l.d, l.m);
        l.params_nn = l.d * l.m;
        l.params_tsv = l.d * l.k + l.k + l.k * l.m;
        l.k_max = storage_rank_threshold(l.d, l.m);
        l.within_threshold = l.k <= l.k_max;
        r.params_nn += l.params_nn;
        r.params_tsv += l.params_tsv;
        r.layers.push_back(std::move(l));
    }
    r.params_nn += r.vector_params;
    r.params_tsv += r.vector_params;
    r.ratio = static_cast<double>(r.params_tsv) / static_cast<double>(r.params_nn);
    return r;
}

StorageReport storage_report(const TensorMap& model, const RankPolicy& policy) {
    std::vector<NamedShape> shapes;
    for (const auto& [name, t] : model.entries) shapes.emplace_back(name, t.shape);
    return storage_report(shapes, policy);
}

std::vector<SweepPoint> rank_sweep(const TaskDelta& delta, const std::vector<double>& fractions, unsigned threads) {
    std::vector<RankPolicy> policies;
    for (double f : fractions) policies.push_back(RankPolicy::Fraction(f));

    const auto names = matrix_layer_names(delta);
    // errors[layer][fraction]
    std::vector<std::vector<double>> errors(names.size());
    parallel_for(names.size(), threads, [&](std::size_t i) {
        const Tensor& t = delta.layers.at(names[i]).delta;
        const Eigen::VectorXd s = svd(to_matrix(t)).S.cast<double>();
        // squared tail energy: tail[k] = sum_{j >= k} s_j^2
        Eigen::VectorXd tail(s.size() + 1);
        tail(s.size()) = 0.0;
        for (Eigen::Index j = s.size() - 1; j >= 0; --j) tail(j) = tail(j + 1) + s(j) * s(j);
        const double total = tail(0);
        for (const auto& p : policies) {
            const auto k = p.rank_for(t.rows(), t.cols());
            errors[i].push_back(total > 0.0 ? std::sqrt(tail(k) / total) : 0.0);
        }
    });

    std::vector<SweepPoint> out;
    for (std::size_t f = 0; f < fractions.size(); ++f) {
        double sum = 0.0;
        for (const auto& e : errors) sum += e[f];
        out.push_back({fractions[f], names.empty() ? 0.0 : sum / static_cast<double>(names.size())});
    }
    return out;
}

json to_json(const StorageReport& report) {
    json layers = json::array();
    for (const auto& l : report.layers) {
        layers.push_back({{"name", l.name},
                          {"d", l.d},
                          {"m", l.m},
                          {"k", l.k},
                          {"params_nn", l.params_nn},
                          {"params_tsv", l.params_tsv},
                          {"k_max", l.k_max},
                          {"within_threshold", l.within_threshold}});
    }
    return {{"params_nn", report.params_nn},
            {"params_tsv", report.params_tsv},
            {"vector_params", report.vector_params},
            {"ratio", report.ratio},
            {"within_threshold", report.all_within_threshold()},
            {"layers", layers}};
}

}  // namespace tsv
