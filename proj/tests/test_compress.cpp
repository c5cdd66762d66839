#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "test_helpers.hpp"
#include "tsv/compress.hpp"
#include "tsv/errors.hpp"
#include "tsv/safetensors.hpp"

using namespace tsv;

namespace {

struct Model {
    TensorMap pre;
    TaskDelta delta;
};

Model make_model(std::mt19937_64& rng, Eigen::Index rank) {
    Model m;
    m.pre.entries.emplace("enc.0.w", fixtures::random_tensor({10, 8}, rng));
    m.pre.entries.emplace("enc.0.b", fixtures::random_tensor({8}, rng));
    m.pre.entries.emplace("enc.1.w", fixtures::random_tensor({8, 12}, rng));
    m.pre.metadata["format"] = "pt";
    m.delta.task_id = "cars";
    m.delta.layers.emplace("enc.0.w", LayerDelta{LayerKind::Matrix, from_matrix(fixtures::random_rank(10, 8, rank, rng))});
    m.delta.layers.emplace("enc.0.b", LayerDelta{LayerKind::Vector, fixtures::random_tensor({8}, rng, 0.1f)});
    m.delta.layers.emplace("enc.1.w", LayerDelta{LayerKind::Matrix, from_matrix(fixtures::random_rank(8, 12, rank, rng))});
    return m;
}

}  // namespace

TEST(Compress, LosslessWhenRankCoversDelta) {
    std::mt19937_64 rng(1);
    auto m = make_model(rng, 3);
    auto ct = compress(m.delta, RankPolicy::Explicit(3));
    EXPECT_EQ(ct.ranks(), (std::map<std::string, std::int64_t>{{"enc.0.w", 3}, {"enc.1.w", 3}}));
    for (const auto& [name, layer] : ct.layers) {
        const Eigen::MatrixXd ref = to_matrix(m.delta.layers.at(name).delta).cast<double>();
        EXPECT_LE(relative_frobenius(reconstruct_d(layer.factors), ref), 1e-5) << name;
    }
    EXPECT_EQ(ct.vector_layers.at("enc.0.b"), m.delta.layers.at("enc.0.b").delta);
}

TEST(Compress, DiagonalLayerKeepsLeadingValue) {
    TaskDelta td{"t", {}};
    Eigen::MatrixXf a = Eigen::MatrixXf::Zero(3, 3);
    a.diagonal() << 5, 2, 1;
    td.layers.emplace("w", LayerDelta{LayerKind::Matrix, from_matrix(a)});
    auto ct = compress(td, RankPolicy::Explicit(1));
    const auto& f = ct.layers.at("w").factors;
    EXPECT_FLOAT_EQ(f.S(0), 5.0f);
    Eigen::MatrixXf expected = Eigen::MatrixXf::Zero(3, 3);
    expected(0, 0) = 5;
    EXPECT_LE((reconstruct(f) - expected).norm(), 1e-6f);
}

TEST(Compress, RankTooLarge) {
    std::mt19937_64 rng(2);
    auto m = make_model(rng, 2);
    try {
        compress(m.delta, RankPolicy::Explicit(9));
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("enc.0.w"), std::string::npos);
    }
}

TEST(Compress, StoredParams) {
    std::mt19937_64 rng(3);
    auto m = make_model(rng, 4);
    auto ct = compress(m.delta, RankPolicy::Explicit(2));
    EXPECT_EQ(ct.stored_params(), (10 * 2 + 2 + 2 * 8) + (8 * 2 + 2 + 2 * 12) + 8);
}

TEST(Expand, AlphaZeroReturnsPre) {
    std::mt19937_64 rng(4);
    auto m = make_model(rng, 2);
    auto out = expand(compress(m.delta, RankPolicy::Explicit(2)), m.pre, 0.0);
    EXPECT_EQ(out, m.pre);
}

TEST(Expand, AddsScaledApproximation) {
    std::mt19937_64 rng(5);
    auto m = make_model(rng, 2);
    auto out = expand(compress(m.delta, RankPolicy::Explicit(2)), m.pre, 0.5);
    for (const auto& [name, base] : m.pre.entries) {
        const auto& delta = m.delta.layers.at(name).delta.data;
        for (std::size_t j = 0; j < base.data.size(); ++j) {
            EXPECT_NEAR(out.entries.at(name).data[j], base.data[j] + 0.5f * delta[j], 1e-4f) << name;
        }
    }
    EXPECT_EQ(out.metadata, m.pre.metadata);
}

TEST(Expand, ShapeMismatch) {
    std::mt19937_64 rng(6);
    auto m = make_model(rng, 2);
    auto ct = compress(m.delta, RankPolicy::Explicit(2));
    m.pre.entries.erase("enc.1.w");
    m.pre.entries.emplace("enc.1.w", Tensor::zeros({12, 8}));
    EXPECT_THROW(expand(ct, m.pre), ShapeMismatchError);
}

TEST(CompressedFile, RoundTripIsBitExact) {
    std::mt19937_64 rng(7);
    auto m = make_model(rng, 5);
    auto ct = compress(m.delta, RankPolicy::PerTask(2));
    auto dir = fixtures::temp_dir("compressed_rt");
    save_compressed(ct, dir / "a.tsvc");
    auto back = load_compressed(dir / "a.tsvc");
    EXPECT_EQ(back.task_id, "cars");
    EXPECT_EQ(back.rank_policy, RankPolicy::PerTask(2));
    ASSERT_EQ(back.layers.size(), ct.layers.size());
    for (const auto& [name, layer] : ct.layers) {
        const auto& b = back.layers.at(name);
        EXPECT_EQ(b.rows, layer.rows);
        EXPECT_EQ(b.cols, layer.cols);
        EXPECT_TRUE(b.factors.U == layer.factors.U);
        EXPECT_TRUE(b.factors.S == layer.factors.S);
        EXPECT_TRUE(b.factors.V == layer.factors.V);
    }
    EXPECT_EQ(back.vector_layers, ct.vector_layers);
    save_compressed(back, dir / "b.tsvc");
    EXPECT_EQ(fixtures::read_bytes(dir / "a.tsvc"), fixtures::read_bytes(dir / "b.tsvc"));
}

TEST(CompressedFile, RejectsForeignTensors) {
    std::mt19937_64 rng(8);
    auto map = to_checkpoint(compress(make_model(rng, 2).delta, RankPolicy::Explicit(1)));
    map.entries.emplace("stray", Tensor::zeros({1}));
    EXPECT_THROW(from_checkpoint(map), MalformedHeaderError);
    map.entries.erase("stray");
    map.metadata.erase("task_id");
    EXPECT_THROW(from_checkpoint(map), MalformedHeaderError);
}

TEST(CompressedFile, ExpandThenRecompressGivesSameFactors) {
    std::mt19937_64 rng(9);
    auto m = make_model(rng, 3);
    auto ct = compress(m.delta, RankPolicy::Explicit(3));
    TensorMap zero;
    for (const auto& [name, t] : m.pre.entries) zero.entries.emplace(name, Tensor::zeros(t.shape));
    auto expanded = expand(ct, zero);
    auto again = compress(compute_task_deltas(zero, {expanded}, {"cars"})[0], RankPolicy::Explicit(3));
    for (const auto& [name, layer] : ct.layers) {
        const auto& b = again.layers.at(name).factors;
        EXPECT_LE((b.U - layer.factors.U).norm(), 1e-4f * layer.factors.U.norm());
        EXPECT_LE((b.S - layer.factors.S).norm(), 1e-4f * layer.factors.S.norm());
        EXPECT_LE((b.V - layer.factors.V).norm(), 1e-4f * layer.factors.V.norm());
    }
}

TEST(Storage, TenPercentOfSquareLayer) {
    auto r = storage_report(std::vector<NamedShape>{{"w", {768, 768}}}, RankPolicy::Fraction(0.1));
    ASSERT_EQ(r.layers.size(), 1u);
    EXPECT_EQ(r.layers[0].k, 76);
    EXPECT_EQ(r.layers[0].params_tsv, 768 * 76 + 76 + 76 * 768);
    EXPECT_EQ(r.layers[0].params_nn, 768 * 768);
    EXPECT_EQ(r.layers[0].k_max, 383);
    EXPECT_TRUE(r.all_within_threshold());
}

TEST(Storage, FullRankDoesNotSave) {
    auto r = storage_report(std::vector<NamedShape>{{"w", {64, 64}}}, RankPolicy::FullRank());
    EXPECT_FALSE(r.all_within_threshold());
    EXPECT_GT(r.params_tsv, r.params_nn);
}

TEST(Storage, VectorLayersCountedInBothTotals) {
    auto r = storage_report(std::vector<NamedShape>{{"w", {8, 8}}, {"b", {8}}, {"cls", {1, 8}}}, RankPolicy::Explicit(1));
    EXPECT_EQ(r.vector_params, 16);
    EXPECT_EQ(r.params_nn, 64 + 16);
    EXPECT_EQ(r.params_tsv, 17 + 16);
    EXPECT_DOUBLE_EQ(r.ratio, 33.0 / 80.0);
}

TEST(Storage, ThresholdMatchesInequality) {
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<std::int64_t> dim(2, 300);
    for (int trial = 0; trial < 200; ++trial) {
        const auto d = dim(rng), m = dim(rng);
        std::uniform_int_distribution<std::int64_t> kd(1, std::min(d, m));
        const auto k = kd(rng);
        const bool saves = d * k + k + k * m < d * m;
        auto r = storage_report(std::vector<NamedShape>{{"w", {d, m}}}, RankPolicy::Explicit(k));
        EXPECT_EQ(r.layers[0].within_threshold, saves) << d << "x" << m << " k=" << k;
        EXPECT_EQ(r.params_tsv < r.params_nn, saves);
    }
}

TEST(Storage, PerTaskPolicySavesOnSquareLayers) {
    for (int t = 3; t <= 20; ++t) {
        for (std::int64_t n : {3, 4, 7, 64, 768, 1024}) {
            auto r = storage_report(std::vector<NamedShape>{{"w", {n, n}}}, RankPolicy::PerTask(t));
            EXPECT_TRUE(r.all_within_threshold()) << "n=" << n << " T=" << t;
        }
    }
}

// rank 1 is the floor, and a rank-1 factorization of a 2x2 layer takes 5 values
TEST(Storage, TwoByTwoLayerCannotSave) {
    auto r = storage_report(std::vector<NamedShape>{{"w", {2, 2}}}, RankPolicy::PerTask(3));
    EXPECT_EQ(r.layers[0].k, 1);
    EXPECT_EQ(r.layers[0].k_max, 0);
    EXPECT_FALSE(r.all_within_threshold());
}

TEST(RankSweep, MatchesDirectTruncation) {
    std::mt19937_64 rng(11);
    auto m = make_model(rng, 8);
    auto sweep = rank_sweep(m.delta, {0.25, 0.5, 1.0});
    ASSERT_EQ(sweep.size(), 3u);
    for (const auto& p : sweep) {
        double sum = 0.0;
        for (const auto& name : {"enc.0.w", "enc.1.w"}) {
            const Eigen::MatrixXd a = to_matrix(m.delta.layers.at(name).delta).cast<double>();
            auto k = RankPolicy::Fraction(p.fraction).rank_for(a.rows(), a.cols());
            sum += relative_frobenius(reconstruct_d(truncate(svd(a), k)), a);
        }
        EXPECT_NEAR(p.mean_relative_error, sum / 2.0, 1e-5);
    }
    EXPECT_GE(sweep[0].mean_relative_error, sweep[1].mean_relative_error);
    EXPECT_NEAR(sweep[2].mean_relative_error, 0.0, 1e-9);
}

TEST(Storage, JsonShape) {
    auto j = to_json(storage_report(std::vector<NamedShape>{{"w", {8, 8}}}, RankPolicy::Explicit(2)));
    EXPECT_EQ(j["layers"][0]["k"], 2);
    EXPECT_TRUE(j.contains("ratio"));
}
