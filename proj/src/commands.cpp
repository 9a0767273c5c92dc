// SPDX-License-Identifier: Apache-2.0
#include "lalora/commands.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "lalora/csv.hpp"

namespace lalora {

namespace fs = std::filesystem;

namespace {

constexpr const char* kStageKey = "meta.stage";
constexpr const char* kHashKey = "meta.config_hash";

void require_dir(const fs::path& dir) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) {
        throw IoError(fmt::format("{}: output directory does not exist", dir.string()));
    }
}

// The stored base network must have the shape the config describes.
void check_shape(const Network& net, const RunConfig& config, const fs::path& path) {
    std::vector<std::size_t> widths;
    for (const auto& layer : net.layers) {
        widths.push_back(layer.out_dim());
    }
    std::vector<std::size_t> expected = config.model.hidden_dims;
    expected.push_back(config.model.num_classes);
    if (net.input_dim() != config.model.input_dim || widths != expected) {
        throw ValidationError(fmt::format("{}: network shape does not match the config", path.string()));
    }
}

Network load_base(const RunConfig& config, const fs::path& path) {
    const TensorFile file = load_tensors(path);
    expect_stage(file, Stage::kPretrained, path);
    Network net = get_network(file);
    check_shape(net, config, path);
    return net;
}

struct LoadedPosterior {
    Network adapted;
    LaplacePosterior posterior;
};

LoadedPosterior load_posterior(const fs::path& path) {
    const TensorFile file = load_tensors(path);
    expect_stage(file, Stage::kPosterior, path);
    LoadedPosterior out{get_network(file), get_posterior(file)};
    out.posterior.check_compatible(out.adapted);
    return out;
}

AdapterParams load_adapters(const fs::path& path) {
    const TensorFile file = load_tensors(path);
    if (!file.contains(kStageKey)) {
        throw ValidationError(fmt::format("{}: not a network checkpoint", path.string()));
    }
    const Network net = get_network(file);
    if (net.adapter_count() == 0) {
        throw ValidationError(fmt::format("{}: network has no adapters", path.string()));
    }
    return snapshot_adapters(net);
}

void write_posterior(const fs::path& path, const RunConfig& config, const Network& adapted,
                     const LaplacePosterior& posterior, std::uint64_t seed) {
    TensorFile file = network_checkpoint(adapted, config, Stage::kPosterior);
    file.add_u64("meta.seed", seed);
    put_posterior(file, posterior);
    save_tensors(path, file);
}

void write_cell(const fs::path& dir, const RunConfig& config, const Network& adapted, const CellResult& cell,
                std::size_t sources) {
    const auto& r = cell.record;
    write_text_atomic(dir / run_filename(r.kind, r.lambda, r.seed),
                      history_csv(cell.history, r.lambda, r.seed, r.kind, sources));
    Network tuned = adapted;
    restore_adapters(tuned, cell.final_params);
    TensorFile file = network_checkpoint(tuned, config, Stage::kFinetuned);
    file.add_scalar("meta.lambda", r.lambda);
    file.add_u64("meta.seed", r.seed);
    save_tensors(dir / adapters_filename(r.kind, r.lambda, r.seed), file);
}

}  // namespace

TensorFile network_checkpoint(const Network& network, const RunConfig& config, Stage stage) {
    TensorFile file;
    file.add_scalar(kStageKey, static_cast<double>(stage));
    file.add_u64(kHashKey, config_hash(config));
    put_network(file, network);
    return file;
}

void expect_stage(const TensorFile& file, Stage stage, const fs::path& path) {
    if (!file.contains(kStageKey) || file.scalar(kStageKey) != static_cast<double>(stage)) {
        static constexpr const char* kNames[] = {"pretrained model", "posterior", "fine-tuned model"};
        throw ValidationError(
            fmt::format("{}: expected a {} checkpoint", path.string(), kNames[static_cast<int>(stage)]));
    }
}

std::string record_filename(CurvatureKind kind, double lambda, std::uint64_t seed) {
    return fmt::format("record_{}_{}_{}.csv", to_string(kind), lambda_tag(lambda), seed);
}

std::string adapters_filename(CurvatureKind kind, double lambda, std::uint64_t seed) {
    return fmt::format("adapters_{}_{}_{}.lalr", to_string(kind), lambda_tag(lambda), seed);
}

std::string posterior_filename(CurvatureKind kind, std::uint64_t seed) {
    return fmt::format("posterior_{}_{}.lalr", to_string(kind), seed);
}

void cmd_pretrain(const RunConfig& config, const fs::path& out) {
    config.validate();
    const TaskSuite suite = build_suite(config);
    const Network net = build_pretrained(config, suite);
    save_tensors(out, network_checkpoint(net, config, Stage::kPretrained));
}

void cmd_fit_laplace(const RunConfig& config, const fs::path& model, const fs::path& out, CurvatureKind kind,
                     std::uint64_t seed) {
    config.validate();
    const Network base = load_base(config, model);
    const TaskSuite suite = build_suite(config);
    const Network adapted = attach_adapters(config, base, seed);
    const LaplacePosterior posterior = fit_posterior(config, adapted, suite, kind, seed);
    write_posterior(out, config, adapted, posterior, seed);
}

CellResult cmd_train(const RunConfig& config, const fs::path& model, const fs::path& posterior,
                     const fs::path& out_dir, double lambda, std::uint64_t seed) {
    config.validate();
    require_dir(out_dir);
    const Network base = load_base(config, model);
    const LoadedPosterior loaded = load_posterior(posterior);
    if (base_weights_hash(base) != base_weights_hash(loaded.adapted)) {
        throw ValidationError(
            fmt::format("{}: posterior was fitted on a different base model than {}", posterior.string(),
                        model.string()));
    }
    const TaskSuite suite = build_suite(config);
    const Baseline baseline = measure_baseline(base, eval_suite_of(suite));
    CellResult cell = run_cell(config, loaded.adapted, loaded.posterior, suite, baseline, lambda, seed);
    const std::size_t sources = suite.sources.size();
    write_cell(out_dir, config, loaded.adapted, cell, sources);
    const auto& r = cell.record;
    write_text_atomic(out_dir / record_filename(r.kind, r.lambda, r.seed),
                      records_csv(std::span(&cell.record, 1), sources));
    return cell;
}

ExitCode cmd_sweep(const RunConfig& config, const std::optional<fs::path>& model, const fs::path& out_dir,
                   std::size_t threads) {
    config.validate();
    require_dir(out_dir);
    const TaskSuite suite = build_suite(config);
    Network base;
    if (model) {
        base = load_base(config, *model);
    } else {
        base = build_pretrained(config, suite);
        save_tensors(out_dir / "pretrained.lalr", network_checkpoint(base, config, Stage::kPretrained));
    }
    const SweepOutput out = sweep(config, base, suite, threads);
    const std::size_t sources = suite.sources.size();

    for (std::size_t i = 0; i < out.posteriors.size(); ++i) {
        const auto [kind, seed] = out.posterior_keys[i];
        write_posterior(out_dir / posterior_filename(kind, seed), config, attach_adapters(config, base, seed),
                        out.posteriors[i], seed);
    }

    std::vector<SweepRecord> records;
    ExitCode code = ExitCode::kSuccess;
    for (const auto& cell : out.cells) {
        records.push_back(cell.record);
        if (!cell.record.ok) {
            if (code == ExitCode::kSuccess) {
                code = cell.record.failure;
            }
            continue;
        }
        write_cell(out_dir, config, attach_adapters(config, base, cell.record.seed), cell, sources);
    }
    write_text_atomic(out_dir / "records.csv", records_csv(records, sources));
    for (auto kind : config.laplace.kinds) {
        const auto points = average_by_lambda(records, kind);
        if (!points.empty()) {
            write_text_atomic(out_dir / fmt::format("sb_{}.csv", to_string(kind)), sb_csv(points));
        }
    }
    return code;
}

void cmd_analyze(const AnalyzeInputs& inputs, const fs::path& out_dir) {
    require_dir(out_dir);
    const TensorFile file = load_tensors(inputs.posterior);
    expect_stage(file, Stage::kPosterior, inputs.posterior);
    const LaplacePosterior posterior = get_posterior(file);

    auto rows = cost_report(posterior);
    for (auto& row : rows) {
        const std::size_t serialized = stored_curvature_values(file, row.adapter);
        if (serialized != row.formula_values) {
            throw ContractError(fmt::format("{}: adapter {} serializes {} curvature values, expected {}",
                                            inputs.posterior.string(), row.adapter, serialized,
                                            row.formula_values));
        }
        row.stored_values = serialized;
    }
    write_text_atomic(out_dir / "cost.csv", cost_report_csv(rows));
    write_text_atomic(out_dir / "cost.txt", cost_report_text(rows));

    if (!inputs.after_regularized && !inputs.after_baseline) {
        return;
    }
    if (!inputs.after_regularized || !inputs.after_baseline) {
        throw ValidationError("group analysis needs both the regularized and the baseline checkpoint");
    }
    if (posterior.curvature.kind != CurvatureKind::kDiag) {
        throw ValidationError(fmt::format("group analysis needs a diag posterior, got {}",
                                          to_string(posterior.curvature.kind)));
    }
    const AdapterParams before = inputs.before ? load_adapters(*inputs.before) : posterior.means;
    const AdapterParams after_reg = load_adapters(*inputs.after_regularized);
    const AdapterParams after_base = load_adapters(*inputs.after_baseline);
    posterior.check_compatible(before);
    posterior.check_compatible(after_reg);
    posterior.check_compatible(after_base);
    const GroupReport report = group_analysis(posterior, before, after_reg, after_base);
    write_text_atomic(out_dir / "group_report.csv", group_report_csv(report));
}

std::string sb_csv(std::span<const SbInput> points) {
    const SbResult sb = score_sb(points);
    const auto front = pareto_front(points);
    CsvWriter csv({"lambda", "target_acc", "source_acc", "l_norm", "f_norm", "s_b", "pareto", "role"});
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& s = sb.scores[i];
        std::string role;
        if (s.lambda == sb.lambda_stability) {
            role = "stability";
        }
        if (s.lambda == sb.lambda_plasticity) {
            role += role.empty() ? "plasticity" : "+plasticity";
        }
        const bool on_front = std::find(front.begin(), front.end(), i) != front.end();
        csv.row({format_real(points[i].lambda), format_real(points[i].target_acc), format_real(points[i].source_acc),
                 format_real(s.l_norm), format_real(s.f_norm), format_real(s.score), on_front ? "1" : "0", role});
    }
    return csv.text();
}

}  // namespace lalora
