#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "tsv/linalg.hpp"
#include "tsv/rank_policy.hpp"
#include "tsv/tensor.hpp"

namespace tsv {

struct CompressedLayer {
    SVDFactors factors;  // rank k'
    std::int64_t rows = 0;
    std::int64_t cols = 0;
};

/// One task's delta with every matrix layer replaced by its top-k' factors.
/// Vector layers are kept verbatim.
struct CompressedTask {
    std::string task_id;
    std::map<std::string, CompressedLayer> layers;
    std::map<std::string, Tensor> vector_layers;
    RankPolicy rank_policy;

    std::map<std::string, std::int64_t> ranks() const;
    std::int64_t stored_params() const;
};

CompressedTask compress(const TaskDelta& delta, const RankPolicy& policy, unsigned threads = 0);

/// pre + alpha · Δ̂ for every layer. Layers absent from the compressed task
/// are copied from `pre` unchanged.
TensorMap expand(const CompressedTask& ct, const TensorMap& pre, double alpha = 1.0);

/*
 * Compressed task file layout (a regular safetensors container):
 *
 *   <layer>.U    d×k'   left singular vectors
 *   <layer>.S    k'     singular values
 *   <layer>.Vt   k'×m   right singular vectors, transposed
 *   <layer>.vec  any    vector layer delta, original shape
 *
 * "__metadata__" carries task_id, rank_policy and original_shapes (a JSON
 * object mapping each matrix layer to [d, m]).
 */
TensorMap to_checkpoint(const CompressedTask& ct);
CompressedTask from_checkpoint(const TensorMap& map);
void save_compressed(const CompressedTask& ct, const std::filesystem::path& path);
CompressedTask load_compressed(const std::filesystem::path& path);

struct LayerStorage {
    std::string name;
    std::int64_t d = 0;
    std::int64_t m = 0;
    std::int64_t k = 0;
    std::int64_t params_nn = 0;   // d·m
    std::int64_t params_tsv = 0;  // d·k + k + k·m
    std::int64_t k_max = 0;       // largest k with k·(d+m+1) < d·m
    bool within_threshold = false;
};

struct StorageReport {
    std::int64_t params_nn = 0;
    std::int64_t params_tsv = 0;
    std::int64_t vector_params = 0;  // N·c term, included in both totals
    double ratio = 0.0;
    std::vector<LayerStorage> layers;

    bool all_within_threshold() const;
};

/// Largest integer k' with k'·(d + m + 1) < d·m.
std::int64_t storage_rank_threshold(std::int64_t d, std::int64_t m);

using NamedShape = std::pair<std::string, Shape>;

StorageReport storage_report(const std::vector<NamedShape>& shapes, const RankPolicy& policy);
StorageReport storage_report(const TensorMap& model, const RankPolicy& policy);

struct SweepPoint {
    double fraction = 0.0;
    double mean_relative_error = 0.0;
};

/// Mean relative Frobenius error of the rank-k' approximation over matrix
/// layers, for k' = Fraction(f) at each requested f.
std::vector<SweepPoint> rank_sweep(const TaskDelta& delta, const std::vector<double>& fractions, unsigned threads = 0);

nlohmann::json to_json(const StorageReport& report);

}  // namespace tsv
