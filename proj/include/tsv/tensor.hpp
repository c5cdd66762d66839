#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tsv {

enum class DType { F32, F16, BF16 };

const char* dtype_name(DType dtype);
DType dtype_from_name(const std::string& name);
std::size_t dtype_size(DType dtype);

using Shape = std::vector<std::int64_t>;

std::int64_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense tensor held in 32-bit working precision. `dtype` remembers how it was
/// stored on disk; data is always row-major float.
struct Tensor {
    Shape shape;
    DType dtype = DType::F32;
    std::vector<float> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<float> d, DType dt = DType::F32);

    static Tensor zeros(Shape s);

    std::int64_t numel() const { return element_count(shape); }
    bool all_finite() const;

    // Only valid for 2-D tensors.
    std::int64_t rows() const;
    std::int64_t cols() const;

    bool operator==(const Tensor& other) const = default;
};

/// Row-major 2-D view as an Eigen matrix (copies).
Eigen::MatrixXf to_matrix(const Tensor& t);
Tensor from_matrix(const Eigen::MatrixXf& m, DType dtype = DType::F32);

/// Named collection of tensors. std::map keeps iteration lexicographic.
struct TensorMap {
    std::map<std::string, Tensor> entries;
    std::map<std::string, std::string> metadata;

    bool operator==(const TensorMap& other) const = default;
};

enum class LayerKind { Matrix, Vector };

const char* layer_kind_name(LayerKind kind);

/// Matrix iff the shape is 2-D with both dimensions >= 2.
LayerKind classify_param(const std::string& name, const Shape& shape);

/// Same as above, but names listed in `force_vector` are always Vector.
LayerKind classify_param(const std::string& name, const Shape& shape,
                         const std::set<std::string>& force_vector);

struct LayerDelta {
    LayerKind kind = LayerKind::Vector;
    Tensor delta;
};

struct TaskDelta {
    std::string task_id;
    std::map<std::string, LayerDelta> layers;
};

/// Per-task weight differences ft - pre. Every fine-tuned map must carry the
/// same names and shapes as `pre`; otherwise NameSetMismatchError or
/// ShapeMismatchError naming the parameter.
std::vector<TaskDelta> compute_task_deltas(const TensorMap& pre, const std::vector<TensorMap>& fts,
                                           const std::vector<std::string>& task_ids = {},
                                           const std::set<std::string>& force_vector = {});

/// Checks that all deltas carry the same layer names, kinds and shapes as `pre`.
void check_aligned(const TensorMap& pre, const std::vector<TaskDelta>& deltas);

}  // namespace tsv
