// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "lalora/checkpoint.hpp"
#include "lalora/checks.hpp"
#include "lalora/commands.hpp"
#include "lalora/config.hpp"
#include "lalora/errors.hpp"

namespace fs = std::filesystem;
using namespace lalora;

namespace {

int code(ExitCode c) { return static_cast<int>(c); }

// A single λ on the command line overrides the config; otherwise the config must hold exactly one.
double single_lambda(const RunConfig& config, const std::string& text) {
    if (!text.empty()) {
        const auto values = parse_lambda_list(text);
        if (values.size() != 1) {
            throw ValidationError("--lambda takes a single value");
        }
        return values.front();
    }
    if (config.train.lambdas.size() != 1) {
        throw ValidationError("config has a lambda grid; pass --lambda");
    }
    return config.train.lambdas.front();
}

std::uint64_t single_seed(const RunConfig& config, std::optional<std::uint64_t> seed) {
    if (seed) {
        return *seed;
    }
    if (config.train.seeds.size() != 1) {
        throw ValidationError("config has several seeds; pass --seed");
    }
    return config.train.seeds.front();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Laplace-regularized LoRA fine-tuning"};
    app.require_subcommand(1);

    std::string config_path;
    std::string model_path;
    std::string posterior_path;
    std::string out;
    std::string lambda_text;
    std::string grid_text;
    std::string kind_text;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 0;
    AnalyzeInputs analyze;
    std::string before_path;
    std::string after_reg_path;
    std::string after_base_path;
    std::uint64_t check_seed = 1;

    auto* pretrain = app.add_subcommand("pretrain", "Train the base network on the source tasks");
    pretrain->add_option("--config", config_path, "Run config (JSON)")->required();
    pretrain->add_option("--out", out, "Output checkpoint")->required();

    auto* fit = app.add_subcommand("fit-laplace", "Attach adapters and fit the Laplace posterior");
    fit->add_option("--config", config_path)->required();
    fit->add_option("--model", model_path, "Pretrained checkpoint")->required();
    fit->add_option("--out", out, "Output posterior checkpoint")->required();
    fit->add_option("--curvature", kind_text, "diag, bkfac, btrikfac or identity (default: first configured)");
    fit->add_option("--seed", seed, "Adapter initialization seed (default: the config seed)");

    auto* train = app.add_subcommand("train", "One regularized fine-tuning run");
    train->add_option("--config", config_path)->required();
    train->add_option("--model", model_path)->required();
    train->add_option("--posterior", posterior_path)->required();
    train->add_option("--out-dir", out)->required();
    train->add_option("--lambda", lambda_text, "Regularization strength, e.g. 1e4");
    train->add_option("--seed", seed);

    auto* sweep_cmd = app.add_subcommand("sweep", "Every curvature kind, lambda and seed in the config");
    sweep_cmd->add_option("--config", config_path)->required();
    sweep_cmd->add_option("--model", model_path, "Pretrained checkpoint (pretrains when omitted)");
    sweep_cmd->add_option("--out-dir", out)->required();
    sweep_cmd->add_option("--lambda-grid", grid_text, "Comma list overriding the config grid");
    sweep_cmd->add_option("--threads", threads, "Worker count (default: LALORA_THREADS or all cores)");

    auto* analyze_cmd = app.add_subcommand("analyze", "Cost table and precision-group report");
    analyze_cmd->add_option("--posterior", posterior_path)->required();
    analyze_cmd->add_option("--before", before_path, "Adapters before fine-tuning (default: posterior means)");
    analyze_cmd->add_option("--after", after_reg_path, "Adapters after regularized fine-tuning");
    analyze_cmd->add_option("--baseline", after_base_path, "Adapters after unregularized fine-tuning");
    analyze_cmd->add_option("--out-dir", out)->required();

    auto* oracle_cmd = app.add_subcommand("oracle-check", "Run the oracle suite and print pass/fail");
    oracle_cmd->add_option("--seed", check_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : code(ExitCode::kValidation);
    }

    try {
        if (*pretrain) {
            cmd_pretrain(load_config(config_path), out);
        } else if (*fit) {
            const RunConfig config = load_config(config_path);
            const CurvatureKind kind = kind_text.empty() ? config.laplace.kinds.front() : parse_curvature_kind(kind_text);
            cmd_fit_laplace(config, model_path, out, kind, single_seed(config, seed));
        } else if (*train) {
            const RunConfig config = load_config(config_path);
            const auto cell =
                cmd_train(config, model_path, posterior_path, out, single_lambda(config, lambda_text),
                          single_seed(config, seed));
            fmt::print("target {:.4f}  source {:.4f}  forgetting {:.2f}pp  learning {:.2f}pp\n",
                       cell.record.final_target_acc, cell.record.final_source_acc_mean, cell.record.forgetting_pp,
                       cell.record.learning_pp);
        } else if (*sweep_cmd) {
            RunConfig config = load_config(config_path);
            if (!grid_text.empty()) {
                config.train.lambdas = parse_lambda_list(grid_text);
            }
            const std::size_t n = threads > 0 ? threads : thread_cap_from_env();
            std::optional<fs::path> model;
            if (!model_path.empty()) {
                model = model_path;
            }
            const ExitCode rc = cmd_sweep(config, model, out, n);
            if (rc != ExitCode::kSuccess) {
                std::fprintf(stderr, "error: some cells failed; see the status column of records.csv\n");
            }
            return code(rc);
        } else if (*analyze_cmd) {
            analyze.posterior = posterior_path;
            if (!before_path.empty()) {
                analyze.before = before_path;
            }
            if (!after_reg_path.empty()) {
                analyze.after_regularized = after_reg_path;
            }
            if (!after_base_path.empty()) {
                analyze.after_baseline = after_base_path;
            }
            cmd_analyze(analyze, out);
            const auto text = read_file(fs::path(out) / "cost.txt");
            std::fwrite(text.data(), 1, text.size(), stdout);
        } else if (*oracle_cmd) {
            bool ok = true;
            for (const auto& r : checks::run_oracle_suite(check_seed)) {
                fmt::print("{}\n", checks::format_line(r));
                ok = ok && r.passed;
            }
            return ok ? 0 : 1;
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return code(e.exit_code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
