#include "tsv/tensor.hpp"

#include <cmath>
#include <sstream>

#include "tsv/errors.hpp"

namespace tsv {

const char* dtype_name(DType dtype) {
    switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    }
    return "?";
}

DType dtype_from_name(const std::string& name) {
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    throw UnsupportedDtypeError("unsupported dtype '" + name + "'");
}

std::size_t dtype_size(DType dtype) {
    return dtype == DType::F32 ? 4 : 2;
}

std::int64_t element_count(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<float> d, DType dt) : shape(std::move(s)), dtype(dt), data(std::move(d)) {
    for (auto dim : shape) {
        if (dim < 1) throw InvalidArgument("tensor dimensions must be >= 1, got " + shape_string(shape));
    }
    if (static_cast<std::int64_t>(data.size()) != element_count(shape)) {
        throw InvalidArgument("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                              shape_string(shape));
    }
}

Tensor Tensor::zeros(Shape s) {
    auto n = element_count(s);
    return Tensor(std::move(s), std::vector<float>(static_cast<std::size_t>(n), 0.0f));
}

bool Tensor::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::int64_t Tensor::rows() const {
    if (shape.size() != 2) throw InvalidArgument("rows() on non-matrix tensor " + shape_string(shape));
    return shape[0];
}

std::int64_t Tensor::cols() const {
    if (shape.size() != 2) throw InvalidArgument("cols() on non-matrix tensor " + shape_string(shape));
    return shape[1];
}

Eigen::MatrixXf to_matrix(const Tensor& t) {
    using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    return Eigen::Map<const RowMajor>(t.data.data(), t.rows(), t.cols());
}

Tensor from_matrix(const Eigen::MatrixXf& m, DType dtype) {
    using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    std::vector<float> data(static_cast<std::size_t>(m.size()));
    Eigen::Map<RowMajor>(data.data(), m.rows(), m.cols()) = m;
    return Tensor({m.rows(), m.cols()}, std::move(data), dtype);
}

const char* layer_kind_name(LayerKind kind) {
    return kind == LayerKind::Matrix ? "matrix" : "vector";
}

LayerKind classify_param(const std::string& /*name*/, const Shape& shape) {
    if (shape.size() == 2 && shape[0] >= 2 && shape[1] >= 2) return LayerKind::Matrix;
    return LayerKind::Vector;
}

LayerKind classify_param(const std::string& name, const Shape& shape, const std::set<std::string>& force_vector) {
    if (force_vector.count(name)) return LayerKind::Vector;
    return classify_param(name, shape);
}

namespace {

void check_same_names_and_shapes(const TensorMap& pre, const TensorMap& ft, std::size_t index) {
    const std::string which = "fine-tuned checkpoint #" + std::to_string(index);
    for (const auto& [name, t] : pre.entries) {
        auto it = ft.entries.find(name);
        if (it == ft.entries.end()) {
            throw NameSetMismatchError(which + " is missing parameter '" + name + "'", name);
        }
        if (it->second.shape != t.shape) {
            throw ShapeMismatchError(which + ": shape mismatch for '" + name + "': expected " +
                                         shape_string(t.shape) + ", got " + shape_string(it->second.shape),
                                     name);
        }
    }
    for (const auto& [name, t] : ft.entries) {
        if (!pre.entries.count(name)) {
            throw NameSetMismatchError(which + " has unexpected parameter '" + name + "'", name);
        }
    }
}

}  // namespace

std::vector<TaskDelta> compute_task_deltas(const TensorMap& pre, const std::vector<TensorMap>& fts,
                                           const std::vector<std::string>& task_ids,
                                           const std::set<std::string>& force_vector) {
    if (!task_ids.empty() && task_ids.size() != fts.size()) {
        throw InvalidArgument("task id count does not match number of fine-tuned checkpoints");
    }
    std::vector<TaskDelta> out;
    out.reserve(fts.size());
    for (std::size_t i = 0; i < fts.size(); ++i) {
        check_same_names_and_shapes(pre, fts[i], i);
        TaskDelta td;
        td.task_id = task_ids.empty() ? "task" + std::to_string(i) : task_ids[i];
        for (const auto& [name, base] : pre.entries) {
            const Tensor& ft = fts[i].entries.at(name);
            std::vector<float> diff(base.data.size());
            for (std::size_t j = 0; j < diff.size(); ++j) diff[j] = ft.data[j] - base.data[j];
            td.layers.emplace(name, LayerDelta{classify_param(name, base.shape, force_vector),
                                               Tensor(base.shape, std::move(diff))});
        }
        out.push_back(std::move(td));
    }
    return out;
}

void check_aligned(const TensorMap& pre, const std::vector<TaskDelta>& deltas) {
    for (const auto& td : deltas) {
        if (td.layers.size() != pre.entries.size()) {
            for (const auto& [name, _] : pre.entries) {
                if (!td.layers.count(name)) {
                    throw NameSetMismatchError("task '" + td.task_id + "' is missing layer '" + name + "'", name);
                }
            }
        }
        for (const auto& [name, layer] : td.layers) {
            auto it = pre.entries.find(name);
            if (it == pre.entries.end()) {
                throw NameSetMismatchError("task '" + td.task_id + "' has unknown layer '" + name + "'", name);
            }
            if (it->second.shape != layer.delta.shape) {
                throw ShapeMismatchError("task '" + td.task_id + "': shape mismatch for '" + name + "'", name);
            }
        }
    }
    for (std::size_t i = 1; i < deltas.size(); ++i) {
        for (const auto& [name, layer] : deltas[i].layers) {
            if (deltas[0].layers.at(name).kind != layer.kind) {
                throw ShapeMismatchError("layer '" + name + "' classified differently across tasks", name);
            }
        }
    }
}

}  // namespace tsv
