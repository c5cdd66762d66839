#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "test_helpers.hpp"
#include "tsv/errors.hpp"
#include "tsv/interference.hpp"

using namespace tsv;

namespace {

SVDFactors unit_factors(const Eigen::MatrixXd& u, const Eigen::VectorXd& s, const Eigen::MatrixXd& v) {
    return SVDFactors{u.cast<float>(), s.cast<float>(), v.cast<float>()};
}

Eigen::MatrixXd columns(Eigen::Index n, std::initializer_list<Eigen::Index> idx) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(idx.size()));
    Eigen::Index j = 0;
    for (auto i : idx) out(i, j++) = 1.0;
    return out;
}

TaskDelta task_from(const std::string& id, const std::map<std::string, Eigen::MatrixXf>& layers) {
    TaskDelta td{id, {}};
    for (const auto& [name, m] : layers) td.layers.emplace(name, LayerDelta{LayerKind::Matrix, from_matrix(m)});
    return td;
}

}  // namespace

TEST(Sti, SingleTaskIsZero) {
    std::mt19937_64 rng(1);
    auto f = truncate(svd(fixtures::gaussian(8, 6, rng)), 3);
    EXPECT_NEAR(sti(concat_basis({f})), 0.0, 1e-6);
}

TEST(Sti, IdenticalRankOneTasksGiveTwo) {
    Eigen::VectorXd u = Eigen::VectorXd::Zero(4);
    u(0) = 0.6;
    u(2) = 0.8;
    Eigen::VectorXd v = Eigen::VectorXd::Ones(3) / std::sqrt(3.0);
    auto f = unit_factors(u, Eigen::VectorXd::Ones(1), v);
    auto basis = concat_basis({f, f});
    EXPECT_NEAR(sti(basis), 2.0, 1e-6);
    EXPECT_NEAR(sti(basis, NormKind::Induced), 1.0, 1e-6);
}

TEST(Sti, OrthogonalSubspacesGiveZero) {
    auto f1 = unit_factors(columns(6, {0, 1}), Eigen::Vector2d(3, 1), columns(5, {0, 1}));
    auto f2 = unit_factors(columns(6, {2, 3}), Eigen::Vector2d(2, 2), columns(5, {2, 3}));
    EXPECT_EQ(sti(concat_basis({f1, f2})), 0.0);
}

TEST(Sti, InvariantToColumnSignFlips) {
    std::mt19937_64 rng(2);
    auto b = concat_basis({truncate(svd(fixtures::gaussian(7, 5, rng)), 2), truncate(svd(fixtures::gaussian(7, 5, rng)), 2)});
    const double before = sti(b);
    for (Eigen::Index j = 0; j < b.columns(); j += 2) {
        b.U.col(j) *= -1;
        b.V.col(j) *= -1;
    }
    EXPECT_NEAR(sti(b), before, 1e-9 * before);
    // flipping only U changes the sign of a single factor, which |.| absorbs as well
    b.U.col(1) *= -1;
    b.V.col(1) *= -1;
    EXPECT_NEAR(sti(b), before, 1e-9 * before);
}

TEST(Sti, ScalesLinearlyWithSigma) {
    std::mt19937_64 rng(3);
    auto b = concat_basis({truncate(svd(fixtures::gaussian(6, 6, rng)), 3), truncate(svd(fixtures::gaussian(6, 6, rng)), 3)});
    const double base = sti(b);
    b.S *= 2.5;
    EXPECT_NEAR(sti(b), 2.5 * base, 1e-9 * base);
}

TEST(Sti, VanishesAfterOrthogonalization) {
    std::mt19937_64 rng(4);
    const int tasks = 3;
    const Eigen::Index k = 2;
    std::vector<SVDFactors> fs;
    for (int t = 0; t < tasks; ++t) fs.push_back(truncate(svd(fixtures::gaussian(12, 10, rng)), k));
    auto b = concat_basis(fs);
    EXPECT_GT(sti(b), 1e-3);
    b.U = procrustes(b.U);
    b.V = procrustes(b.V);
    EXPECT_LE(sti(b), 1e-6 * double(tasks * k) * double(tasks * k));
}

TEST(ConcatBasis, ReconstructsSumOfTasks) {
    std::mt19937_64 rng(5);
    auto a = fixtures::gaussian(5, 4, rng);
    auto c = fixtures::gaussian(5, 4, rng);
    auto b = concat_basis({svd(a), svd(c)});
    EXPECT_EQ(b.task_offsets, (std::vector<Eigen::Index>{0, 4}));
    EXPECT_LE((reconstruct(b) - (a + c)).norm(), 1e-5 * (a + c).norm());
    auto blocks = similarity_blocks(b);
    EXPECT_LE((blocks.uu.topLeftCorner(4, 4) - Eigen::MatrixXd::Identity(4, 4)).norm(), 1e-5);
}

TEST(ConcatBasis, ShapeMismatch) {
    std::mt19937_64 rng(6);
    EXPECT_THROW(concat_basis({svd(fixtures::gaussian(5, 4, rng)), svd(fixtures::gaussian(4, 5, rng))}), ShapeMismatchError);
}

TEST(BlockKey, Grouping) {
    EXPECT_EQ(block_key("blocks.3.attn.qkv.weight"), "blocks.3");
    EXPECT_EQ(block_key("model.layers.11.mlp.fc1"), "model.layers.11");
    EXPECT_EQ(block_key("proj"), "proj");
    auto g = group_by_block({{"blocks.0.a", 1.0}, {"blocks.0.b", 2.0}, {"blocks.1.a", 4.0}, {"head", 8.0}});
    EXPECT_EQ(g, (std::map<std::string, double>{{"blocks.0", 3.0}, {"blocks.1", 4.0}, {"head", 8.0}}));
}

TEST(ModelStiReport, NeedsTwoTasks) {
    std::mt19937_64 rng(7);
    auto t = task_from("a", {{"w", fixtures::random_rank(4, 4, 2, rng)}});
    EXPECT_THROW(model_sti_report({t}), InvalidArgument);
}

TEST(ModelStiReport, PerLayerAndBlocks) {
    std::mt19937_64 rng(8);
    std::vector<TaskDelta> tasks;
    for (int i = 0; i < 3; ++i) {
        tasks.push_back(task_from("t" + std::to_string(i), {{"blocks.0.w", fixtures::random_rank(9, 9, 9, rng)},
                                                              {"blocks.1.w", fixtures::random_rank(9, 6, 6, rng)}}));
        tasks.back().layers.emplace("bias", LayerDelta{LayerKind::Vector, Tensor::zeros({9})});
    }
    StiOptions opts;
    opts.group_blocks = true;
    auto rep = model_sti_report(tasks, opts);
    EXPECT_EQ(rep.rank_policy, "per-task:3");
    ASSERT_EQ(rep.layers.size(), 2u);
    EXPECT_EQ(rep.blocks.size(), 2u);
    EXPECT_NEAR(rep.total, rep.layers.at("blocks.0.w") + rep.layers.at("blocks.1.w"), 1e-12);

    // direct computation of one layer
    std::vector<SVDFactors> fs;
    for (const auto& t : tasks) fs.push_back(truncate(svd(to_matrix(t.layers.at("blocks.1.w").delta)), 2));
    EXPECT_NEAR(rep.layers.at("blocks.1.w"), sti(concat_basis(fs)), 1e-9);

    auto j = to_json(rep);
    EXPECT_EQ(j["norm"], "entrywise-l1");
    EXPECT_TRUE(j.contains("blocks"));
}

TEST(ModelStiReport, IdenticalTasksInterfere) {
    std::mt19937_64 rng(9);
    auto m = fixtures::random_rank(6, 6, 6, rng);
    StiOptions opts;
    opts.rank_policy = RankPolicy::FullRank();
    auto rep = model_sti_report({task_from("a", {{"w", m}}), task_from("b", {{"w", m}})}, opts);
    // U = [Q Q]: UᵀU − I = [[0 I],[I 0]], so the product is diag(S) placed twice
    const Eigen::VectorXd s = svd(m).S.cast<double>();
    EXPECT_NEAR(rep.total, 2.0 * s.sum(), 1e-4 * s.sum());
}

TEST(Norm, Names) {
    EXPECT_EQ(norm_from_name("induced"), NormKind::Induced);
    EXPECT_EQ(norm_from_name("entrywise"), NormKind::Entrywise);
    EXPECT_THROW(norm_from_name("frobenius"), InvalidArgument);
}
