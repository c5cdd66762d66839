#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tsv/tensor.hpp"

namespace tsv::fixtures {

inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("tsv_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd a(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) a(i, j) = n(rng);
    return a;
}

/// Matrix of exact rank r built as a product of Gaussian factors.
inline Eigen::MatrixXf random_rank(Eigen::Index d, Eigen::Index m, Eigen::Index r, std::mt19937_64& rng) {
    return (gaussian(d, r, rng) * gaussian(r, m, rng)).cast<float>();
}

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, float scale = 1.0f) {
    std::normal_distribution<float> n(0.0f, scale);
    std::vector<float> data(static_cast<std::size_t>(element_count(shape)));
    for (auto& v : data) v = n(rng);
    return Tensor(shape, std::move(data));
}

/// Frobenius distance between two column sets, allowing a sign flip per column.
inline double sign_invariant_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
        double plus = (a.col(j) - b.col(j)).squaredNorm();
        double minus = (a.col(j) + b.col(j)).squaredNorm();
        total += std::min(plus, minus);
    }
    return std::sqrt(total);
}

}  // namespace tsv::fixtures
