#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tsv/compress.hpp"
#include "tsv/errors.hpp"
#include "tsv/interference.hpp"
#include "tsv/merge.hpp"
#include "tsv/safetensors.hpp"
#include "tsv/validation.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tsv;

namespace {

struct Options {
    std::string pre;
    std::vector<std::string> ft;
    std::string in;
    std::string out;
    std::string report;
    double alpha = 1.0;

    std::optional<double> rank_fraction;
    std::optional<int> rank_per_task;
    std::optional<std::int64_t> rank;
    bool full_rank = false;

    bool no_low_rank = false;
    bool no_ortho = false;
    std::string ortho_method = "procrustes";
    double eps = 1e-12;
    std::string norm = "entrywise";
    bool group_blocks = false;
    bool ablation = false;
    std::vector<std::string> force_vector;
    std::string save_dtype = "f32";

    std::uint64_t seed = 0;
    unsigned threads = 0;

    // verify
    std::optional<int> n;
    std::optional<int> k;
    std::optional<int> tasks;
    int trials = 50;
};

std::optional<RankPolicy> rank_policy(const Options& o) {
    if (o.rank_fraction) return RankPolicy::Fraction(*o.rank_fraction);
    if (o.rank_per_task) return RankPolicy::PerTask(*o.rank_per_task);
    if (o.rank) return RankPolicy::Explicit(*o.rank);
    if (o.full_rank) return RankPolicy::FullRank();
    return std::nullopt;
}

SaveOptions save_options(const Options& o) {
    if (o.save_dtype == "f32") return {DType::F32};
    if (o.save_dtype == "f16") return {DType::F16};
    return {DType::BF16};
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write report '" + path.string() + "'");
    f << j.dump(2) << '\n';
    if (!f) throw IoError("failed writing report '" + path.string() + "'");
}

void require_inputs(const Options& o, std::size_t min_ft) {
    if (o.pre.empty()) throw InvalidArgument("--pre is required");
    if (o.ft.size() < min_ft) {
        throw InvalidArgument(min_ft >= 2 ? "need >= 2 tasks (got " + std::to_string(o.ft.size()) + " --ft)"
                                          : "--ft is required");
    }
}

std::vector<TaskDelta> load_deltas(const Options& o, const TensorMap& pre) {
    std::vector<TensorMap> fts;
    std::vector<std::string> ids;
    for (const auto& p : o.ft) {
        fts.push_back(load_checkpoint(p));
        ids.push_back(fs::path(p).stem().string());
    }
    const std::set<std::string> forced(o.force_vector.begin(), o.force_vector.end());
    return compute_task_deltas(pre, fts, ids, forced);
}

// m.st + "ta" -> m.ta.st
fs::path tagged(const fs::path& out, const std::string& tag) {
    return out.parent_path() / (out.stem().string() + "." + tag + out.extension().string());
}

fs::path report_path(const Options& o) {
    return o.report.empty() ? fs::path(o.out + ".report.json") : fs::path(o.report);
}

int cmd_merge(const Options& o) {
    require_inputs(o, 1);
    if (o.out.empty()) throw InvalidArgument("--out is required");
    const TensorMap pre = load_checkpoint(o.pre);
    const auto deltas = load_deltas(o, pre);

    MergeConfig cfg;
    cfg.alpha = o.alpha;
    cfg.rank_policy = rank_policy(o);
    cfg.low_rank = !o.no_low_rank;
    cfg.interference_reduction = !o.no_ortho;
    cfg.ortho_method = ortho_method_from_name(o.ortho_method);
    cfg.eps = o.eps;
    cfg.norm = norm_from_name(o.norm);
    cfg.force_vector = {o.force_vector.begin(), o.force_vector.end()};
    cfg.threads = o.threads;

    if (o.ablation) {
        const auto rows = ablation_suite(pre, deltas, cfg);
        json j = ablation_json(rows, cfg, deltas.size());
        std::printf("%-6s %-9s %-9s %14s %14s %14s\n", "config", "low_rank", "ortho", "sti_before", "sti_after",
                    "ortho_err");
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& r = rows[i];
            const fs::path path = tagged(o.out, r.tag);
            save_checkpoint(r.result.weights, path, save_options(o));
            j["configs"][i]["output"] = path.filename().string();
            std::printf("%-6s %-9s %-9s %14.6g %14.6g %14.6g\n", r.tag.c_str(), r.low_rank ? "on" : "off",
                        r.interference_reduction ? "on" : "off", r.result.sti_before.total, r.result.sti_after.total,
                        r.result.mean_ortho_error());
        }
        write_json(j, report_path(o));
        return 0;
    }

    const auto result = merge(pre, deltas, cfg);
    save_checkpoint(result.weights, o.out, save_options(o));
    write_json(to_json(result, cfg, deltas.size()), report_path(o));
    std::printf("tasks %zu  rank policy %s\n", deltas.size(), cfg.effective_policy(deltas.size()).to_string().c_str());
    std::printf("STI before %.6g\nSTI after  %.6g\n", result.sti_before.total, result.sti_after.total);
    return 0;
}

int cmd_compress(const Options& o) {
    require_inputs(o, 1);
    if (o.ft.size() != 1) throw InvalidArgument("compress takes exactly one --ft");
    if (o.out.empty()) throw InvalidArgument("--out is required");
    const RankPolicy policy = rank_policy(o).value_or(RankPolicy::Fraction(0.1));

    const TensorMap pre = load_checkpoint(o.pre);
    const auto deltas = load_deltas(o, pre);
    const auto ct = compress(deltas.front(), policy, o.threads);

    std::vector<NamedShape> shapes;
    for (const auto& [name, layer] : deltas.front().layers) {
        // forced vector layers count as vectors in the storage totals
        shapes.emplace_back(name, layer.kind == LayerKind::Matrix ? layer.delta.shape : Shape{layer.delta.numel()});
    }
    const auto storage = storage_report(shapes, policy);
    for (const auto& l : storage.layers) {
        if (!l.within_threshold) {
            std::fprintf(stderr, "warning: %s: rank %lld exceeds storage threshold %lld for %lldx%lld\n",
                         l.name.c_str(), static_cast<long long>(l.k), static_cast<long long>(l.k_max),
                         static_cast<long long>(l.d), static_cast<long long>(l.m));
        }
    }

    save_compressed(ct, o.out);
    json j = to_json(storage);
    j["task_id"] = ct.task_id;
    j["rank_policy"] = policy.to_string();
    write_json(j, report_path(o));
    std::printf("%s  policy %s  params %lld -> %lld (%.2f%%)\n", ct.task_id.c_str(), policy.to_string().c_str(),
                static_cast<long long>(storage.params_nn), static_cast<long long>(storage.params_tsv),
                100.0 * storage.ratio);
    return 0;
}

int cmd_expand(const Options& o) {
    if (o.in.empty() || o.pre.empty() || o.out.empty()) throw InvalidArgument("expand needs --in, --pre and --out");
    const auto ct = load_compressed(o.in);
    const TensorMap pre = load_checkpoint(o.pre);
    save_checkpoint(expand(ct, pre, o.alpha), o.out, save_options(o));
    if (!o.report.empty()) {
        write_json({{"task_id", ct.task_id}, {"rank_policy", ct.rank_policy.to_string()}, {"alpha", o.alpha},
                    {"ranks", ct.ranks()}},
                   o.report);
    }
    std::printf("%s expanded with alpha %g\n", ct.task_id.c_str(), o.alpha);
    return 0;
}

int cmd_interference(const Options& o) {
    require_inputs(o, 2);
    StiOptions opts;
    opts.rank_policy = rank_policy(o);
    opts.norm = norm_from_name(o.norm);
    opts.group_blocks = o.group_blocks;
    opts.threads = o.threads;

    const TensorMap pre = load_checkpoint(o.pre);
    const auto report = model_sti_report(load_deltas(o, pre), opts);
    const auto& rows = o.group_blocks ? report.blocks : report.layers;
    std::size_t width = 5;
    for (const auto& [name, _] : rows) width = std::max(width, name.size());
    std::printf("%-*s  %s\n", static_cast<int>(width), o.group_blocks ? "block" : "layer", "sti");
    for (const auto& [name, value] : rows) std::printf("%-*s  %.6g\n", static_cast<int>(width), name.c_str(), value);
    std::printf("%-*s  %.6g\n", static_cast<int>(width), "total", report.total);
    if (!o.report.empty()) write_json(to_json(report), o.report);
    return 0;
}

int cmd_verify(const Options& o) {
    struct Config {
        int n, k, tasks;
    };
    std::vector<Config> configs = {{6, 2, 9}, {12, 4, 10}, {16, 5, 8}};
    if (o.n || o.k || o.tasks) {
        if (!(o.n && o.k && o.tasks)) throw InvalidArgument("--n, --k and --tasks go together");
        configs = {{*o.n, *o.k, *o.tasks}};
    }

    bool ok = true;
    json bounds = json::array();
    for (const auto& c : configs) {
        const auto r = procrustes_bound_experiment(c.n, c.k, c.tasks, o.trials, o.seed, o.threads);
        ok = ok && r.passed();
        json j = to_json(r);
        j.erase("per_trial");
        bounds.push_back(j);
    }

    const auto equiv = whitening_equivalence(100, {8, 32, 128}, o.seed);
    ok = ok && equiv.holds;

    json gram = json::array();
    const Eigen::MatrixXd q = random_orthogonal(12, o.seed);
    gram.push_back({{"case", "orthonormal"}, {"check", to_json(gram_pd_check(q.leftCols(4)))}});
    Eigen::MatrixXd dup(12, 2);
    dup << q.col(0), q.col(0);
    gram.push_back({{"case", "duplicated-column"}, {"check", to_json(gram_pd_check(dup))}});

    const auto probe = rectangular_bound_probe(32, 8, 2, 6, o.trials, o.seed);

    const json out = {{"bounds", bounds},
                      {"whitening_equivalence", to_json(equiv)},
                      {"gram", gram},
                      {"rectangular_probe", to_json(probe)},
                      {"status", ok ? "ok" : "violated"}};
    std::cout << out.dump(2) << '\n';
    if (!o.report.empty()) write_json(out, o.report);
    return ok ? 0 : 1;
}

int cmd_info(const Options& o) {
    if (o.in.empty()) throw InvalidArgument("info needs --in");
    const TensorMap map = load_checkpoint(o.in);
    json j = {{"path", o.in}, {"metadata", map.metadata}, {"tensors", json::array()}};
    std::int64_t total = 0;
    for (const auto& [name, t] : map.entries) {
        const bool matrix = classify_param(name, t.shape) == LayerKind::Matrix;
        std::printf("%-48s %-5s %-16s %s\n", name.c_str(), dtype_name(t.dtype), shape_string(t.shape).c_str(),
                    matrix ? "matrix" : "vector");
        j["tensors"].push_back({{"name", name},
                                {"dtype", dtype_name(t.dtype)},
                                {"shape", t.shape},
                                {"kind", matrix ? "matrix" : "vector"}});
        total += t.numel();
    }
    std::printf("%zu tensors, %lld values\n", map.entries.size(), static_cast<long long>(total));
    for (const auto& [key, value] : map.metadata) std::printf("  %s = %s\n", key.c_str(), value.c_str());
    if (!o.report.empty()) write_json(j, o.report);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Task singular vector merging and compression"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--report", o.report, "JSON report path");
        sub->add_option("--threads", o.threads, "worker threads (0 = all cores)");
    };
    auto add_inputs = [&](CLI::App* sub) {
        sub->add_option("--pre", o.pre, "pre-trained checkpoint")->check(CLI::ExistingFile);
        sub->add_option("--ft", o.ft, "fine-tuned checkpoint(s)")->expected(1, -1)->check(CLI::ExistingFile);
        sub->add_option("--force-vector", o.force_vector, "merge this matrix parameter as a plain mean");
    };
    auto add_rank = [&](CLI::App* sub) {
        auto* f = sub->add_option("--rank-fraction", o.rank_fraction, "keep floor(f*min(d,m)) components")
                      ->check(CLI::Range(0.0, 1.0));
        auto* t = sub->add_option("--rank-per-task,--tasks", o.rank_per_task, "keep min(d,m)/T components")
                      ->check(CLI::PositiveNumber);
        auto* r = sub->add_option("--rank", o.rank, "fixed rank per layer")->check(CLI::PositiveNumber);
        auto* full = sub->add_flag("--full-rank", o.full_rank, "keep every component");
        f->excludes(t)->excludes(r)->excludes(full);
        t->excludes(r)->excludes(full);
        r->excludes(full);
    };
    auto add_save = [&](CLI::App* sub) {
        sub->add_option("--out", o.out, "output path");
        sub->add_option("--save-dtype", o.save_dtype, "stored dtype")->check(CLI::IsMember({"f32", "f16", "bf16"}));
    };
    auto add_norm = [&](CLI::App* sub) {
        sub->add_option("--norm", o.norm, "STI norm")->check(CLI::IsMember({"entrywise", "induced"}));
    };

    auto* merge_cmd = app.add_subcommand("merge", "merge fine-tuned checkpoints");
    add_inputs(merge_cmd);
    add_rank(merge_cmd);
    add_save(merge_cmd);
    add_norm(merge_cmd);
    add_common(merge_cmd);
    merge_cmd->add_option("--alpha", o.alpha, "scale of the merged update");
    auto* nlr = merge_cmd->add_flag("--no-low-rank", o.no_low_rank, "skip per-task truncation");
    auto* nor = merge_cmd->add_flag("--no-ortho", o.no_ortho, "skip orthogonalization");
    merge_cmd->add_option("--ortho-method", o.ortho_method)->check(CLI::IsMember({"procrustes", "eigen"}));
    merge_cmd->add_option("--eps", o.eps, "eigenvalue floor for --ortho-method eigen");
    merge_cmd->add_flag("--ablation", o.ablation, "write all four toggle combinations")->excludes(nlr)->excludes(nor);

    auto* compress_cmd = app.add_subcommand("compress", "store one task delta as truncated factors");
    add_inputs(compress_cmd);
    add_rank(compress_cmd);
    add_common(compress_cmd);
    compress_cmd->add_option("--out", o.out, "compressed task path");

    auto* expand_cmd = app.add_subcommand("expand", "rebuild a checkpoint from compressed factors");
    expand_cmd->add_option("--in", o.in, "compressed task")->check(CLI::ExistingFile);
    expand_cmd->add_option("--pre", o.pre, "pre-trained checkpoint")->check(CLI::ExistingFile);
    expand_cmd->add_option("--alpha", o.alpha, "scale of the delta");
    add_save(expand_cmd);
    add_common(expand_cmd);

    auto* sti_cmd = app.add_subcommand("interference", "per-layer singular task interference");
    add_inputs(sti_cmd);
    add_rank(sti_cmd);
    add_norm(sti_cmd);
    add_common(sti_cmd);
    sti_cmd->add_flag("--group-blocks", o.group_blocks, "aggregate by transformer block");

    auto* verify_cmd = app.add_subcommand("verify", "numerical checks of the orthogonalization bounds");
    add_common(verify_cmd);
    verify_cmd->add_option("--seed", o.seed);
    verify_cmd->add_option("--trials", o.trials)->check(CLI::NonNegativeNumber);
    verify_cmd->add_option("--n", o.n)->check(CLI::PositiveNumber);
    verify_cmd->add_option("--k", o.k)->check(CLI::PositiveNumber);
    verify_cmd->add_option("--tasks", o.tasks)->check(CLI::PositiveNumber);

    auto* info_cmd = app.add_subcommand("info", "list tensors in a checkpoint");
    info_cmd->add_option("--in", o.in, "checkpoint")->check(CLI::ExistingFile);
    add_common(info_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*merge_cmd) return cmd_merge(o);
        if (*compress_cmd) return cmd_compress(o);
        if (*expand_cmd) return cmd_expand(o);
        if (*sti_cmd) return cmd_interference(o);
        if (*verify_cmd) return cmd_verify(o);
        if (*info_cmd) return cmd_info(o);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
