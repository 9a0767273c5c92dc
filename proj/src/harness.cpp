// SPDX-License-Identifier: Apache-2.0
#include "lalora/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <map>
#include <numeric>
#include <thread>

#include <fmt/format.h>

#include "lalora/csv.hpp"

namespace lalora {

Baseline measure_baseline(const Network& network, const EvalSuite& eval) {
    Baseline b;
    b.target_acc = evaluate_accuracy(network, eval.target);
    for (const auto& s : eval.sources) {
        b.source_acc.push_back(evaluate_accuracy(network, s));
    }
    b.source_acc_mean = std::accumulate(b.source_acc.begin(), b.source_acc.end(), 0.0) /
                        static_cast<double>(std::max<std::size_t>(b.source_acc.size(), 1));
    return b;
}

SweepRecord make_record(const Baseline& baseline, const Network& finetuned, const EvalSuite& eval, double lambda,
                        std::uint64_t seed, CurvatureKind kind, std::size_t n_s) {
    const Baseline now = measure_baseline(finetuned, eval);
    SweepRecord r;
    r.lambda = lambda;
    r.seed = seed;
    r.kind = kind;
    r.n_s = n_s;
    r.final_target_acc = now.target_acc;
    r.final_source_acc_mean = now.source_acc_mean;
    r.per_subdataset_source_acc = now.source_acc;
    r.forgetting_pp = 100.0 * (baseline.source_acc_mean - now.source_acc_mean);
    r.learning_pp = 100.0 * (now.target_acc - baseline.target_acc);
    return r;
}

TaskSuite build_suite(const RunConfig& config) {
    return make_suite(config.data.source_seeds, config.data.target_seed, config.task_spec());
}

std::vector<LabeledDataset> source_train_sets(const TaskSuite& suite) {
    std::vector<LabeledDataset> out;
    for (const auto& s : suite.sources) {
        out.push_back(s.train);
    }
    return out;
}

Network build_pretrained(const RunConfig& config, const TaskSuite& suite) {
    std::vector<std::size_t> dims{config.model.input_dim};
    dims.insert(dims.end(), config.model.hidden_dims.begin(), config.model.hidden_dims.end());
    Network net = init_network(dims, config.model.num_classes, config.model.seed);
    const auto sources = source_train_sets(suite);
    return pretrain(std::move(net), sources, config.pretrain);
}

Network attach_adapters(const RunConfig& config, const Network& base, std::uint64_t seed) {
    return attach_lora(base, config.lora.target_layers, config.lora.rank, config.lora.alpha, seed,
                       config.lora.dropout_p);
}

SourceBatches laplace_batches(const RunConfig& config, const TaskSuite& suite, std::uint64_t seed) {
    const auto sources = source_train_sets(suite);
    return draw_source_batches(sources, config.laplace.batches_per_subdataset, config.laplace.batch_size, seed);
}

LaplacePosterior fit_posterior(const RunConfig& config, const Network& adapted, const TaskSuite& suite,
                               CurvatureKind kind, std::uint64_t seed) {
    if (kind == CurvatureKind::kIdentity) {
        return make_posterior(adapted, identity_curvature());
    }
    return make_posterior(adapted,
                          fit_curvature(adapted, kind, laplace_batches(config, suite, seed), config.diag_options()));
}

CellResult run_cell(const RunConfig& config, const Network& adapted, const LaplacePosterior& posterior,
                    const TaskSuite& suite, const Baseline& baseline, double lambda, std::uint64_t seed) {
    const EvalSuite eval = eval_suite_of(suite);
    Network net = adapted;
    CellResult out;
    out.history = finetune(net, suite.target.train, &posterior, config.train_config(lambda, seed), eval);
    out.record = make_record(baseline, net, eval, lambda, seed, posterior.curvature.kind,
                             config.laplace.batches_per_subdataset);
    out.final_params = snapshot_adapters(net);
    return out;
}

std::vector<SweepCell> sweep_cells(const RunConfig& config) {
    std::vector<double> lambdas = config.train.lambdas;
    std::vector<std::uint64_t> seeds = config.train.seeds;
    std::sort(lambdas.begin(), lambdas.end());
    std::sort(seeds.begin(), seeds.end());
    std::vector<SweepCell> cells;
    for (auto kind : config.laplace.kinds) {
        for (double l : lambdas) {
            for (auto s : seeds) {
                cells.push_back(SweepCell{kind, l, s});
            }
        }
    }
    return cells;
}

bool SweepOutput::any_failed() const {
    return std::any_of(cells.begin(), cells.end(), [](const CellResult& c) { return !c.record.ok; });
}

namespace {

SweepRecord failed_record(const SweepCell& cell, std::size_t n_s, const Error& error) {
    SweepRecord r;
    r.lambda = cell.lambda;
    r.seed = cell.seed;
    r.kind = cell.kind;
    r.n_s = n_s;
    r.ok = false;
    r.failure = error.exit_code();
    r.error = error.what();
    return r;
}

}  // namespace

SweepOutput sweep(const RunConfig& config, const Network& base, const TaskSuite& suite, std::size_t threads) {
    const EvalSuite eval = eval_suite_of(suite);
    SweepOutput out;
    out.baseline = measure_baseline(base, eval);
    const auto cells = sweep_cells(config);

    // One posterior per (kind, seed), fitted before any cell runs.
    std::map<std::pair<CurvatureKind, std::uint64_t>, std::size_t> posterior_index;
    std::map<std::pair<CurvatureKind, std::uint64_t>, SweepRecord> prepare_error;
    std::map<std::uint64_t, Network> adapted;
    for (const auto& c : cells) {
        const auto key = std::make_pair(c.kind, c.seed);
        if (posterior_index.contains(key) || prepare_error.contains(key)) {
            continue;
        }
        try {
            if (!adapted.contains(c.seed)) {
                adapted.emplace(c.seed, attach_adapters(config, base, c.seed));
            }
            out.posteriors.push_back(fit_posterior(config, adapted.at(c.seed), suite, c.kind, c.seed));
            posterior_index.emplace(key, out.posteriors.size() - 1);
            out.posterior_keys.push_back(key);
        } catch (const Error& e) {
            prepare_error.emplace(key, failed_record(c, config.laplace.batches_per_subdataset, e));
        }
    }

    out.cells.resize(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            const auto& c = cells[i];
            const auto key = std::make_pair(c.kind, c.seed);
            const std::size_t n_s = config.laplace.batches_per_subdataset;
            if (auto it = prepare_error.find(key); it != prepare_error.end()) {
                out.cells[i].record = it->second;
                out.cells[i].record.lambda = c.lambda;
                continue;
            }
            try {
                out.cells[i] = run_cell(config, adapted.at(c.seed), out.posteriors[posterior_index.at(key)], suite,
                                        out.baseline, c.lambda, c.seed);
            } catch (const Error& e) {
                out.cells[i].record = failed_record(c, n_s, e);
            }
        }
    };
    const std::size_t n = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(cells.size(), 1));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n; ++t) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    return out;
}

std::size_t thread_cap_from_env() {
    if (const char* env = std::getenv("LALORA_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) {
            return static_cast<std::size_t>(v);
        }
        throw ValidationError(fmt::format("LALORA_THREADS must be a positive integer, got '{}'", env));
    }
    return std::max(1U, std::thread::hardware_concurrency());
}

std::string run_filename(CurvatureKind kind, double lambda, std::uint64_t seed) {
    return fmt::format("run_{}_{}_{}.csv", to_string(kind), lambda_tag(lambda), seed);
}

std::string history_csv(const TrainHistory& history, double lambda, std::uint64_t seed, CurvatureKind kind,
                        std::size_t sources) {
    std::vector<std::string> header{"epoch",      "lambda",    "seed",       "curvature",
                                    "train_loss", "reg_value", "target_acc", "source_acc_mean"};
    for (std::size_t i = 0; i < sources; ++i) {
        header.push_back(fmt::format("source_acc_{}", i));
    }
    CsvWriter csv(header);
    for (const auto& row : history.rows) {
        if (row.source_acc.size() != sources) {
            throw ValidationError("history row has the wrong number of source accuracies");
        }
        std::vector<std::string> f{std::to_string(row.epoch),     format_real(lambda),
                                   std::to_string(seed),          std::string(to_string(kind)),
                                   format_real(row.train_loss),   format_real(row.reg_value),
                                   format_real(row.target_acc),   format_real(row.source_acc_mean)};
        for (double a : row.source_acc) {
            f.push_back(format_real(a));
        }
        csv.row(f);
    }
    return csv.text();
}

std::string records_csv(std::span<const SweepRecord> records, std::size_t sources) {
    std::vector<std::string> header{"curvature",       "lambda",      "seed",          "n_s",
                                    "status",          "target_acc",  "source_acc_mean", "forgetting_pp",
                                    "learning_pp"};
    for (std::size_t i = 0; i < sources; ++i) {
        header.push_back(fmt::format("source_acc_{}", i));
    }
    header.emplace_back("error");
    CsvWriter csv(header);
    for (const auto& r : records) {
        std::vector<std::string> f{std::string(to_string(r.kind)), format_real(r.lambda), std::to_string(r.seed),
                                   std::to_string(r.n_s), r.ok ? "ok" : "failed"};
        if (r.ok) {
            if (r.per_subdataset_source_acc.size() != sources) {
                throw ValidationError("record has the wrong number of source accuracies");
            }
            for (double v : {r.final_target_acc, r.final_source_acc_mean, r.forgetting_pp, r.learning_pp}) {
                f.push_back(format_real(v));
            }
            for (double a : r.per_subdataset_source_acc) {
                f.push_back(format_real(a));
            }
        } else {
            f.resize(f.size() + 4 + sources);
        }
        f.push_back(r.error);
        csv.row(f);
    }
    return csv.text();
}

std::vector<SweepRecord> parse_records_csv(std::string_view text) {
    const auto rows = parse_csv(text);
    if (rows.empty() || rows.front().size() < 10 || rows.front().front() != "curvature") {
        throw ValidationError("records CSV: missing or malformed header");
    }
    const std::size_t sources = rows.front().size() - 10;
    std::vector<SweepRecord> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& f = rows[i];
        if (f.size() != rows.front().size()) {
            throw ValidationError(fmt::format("records CSV: row {} has {} fields", i, f.size()));
        }
        SweepRecord r;
        try {
            r.kind = parse_curvature_kind(f[0]);
            r.lambda = std::stod(f[1]);
            r.seed = std::stoull(f[2]);
            r.n_s = std::stoull(f[3]);
            r.ok = f[4] == "ok";
            if (r.ok) {
                r.final_target_acc = std::stod(f[5]);
                r.final_source_acc_mean = std::stod(f[6]);
                r.forgetting_pp = std::stod(f[7]);
                r.learning_pp = std::stod(f[8]);
                for (std::size_t s = 0; s < sources; ++s) {
                    r.per_subdataset_source_acc.push_back(std::stod(f[9 + s]));
                }
            }
        } catch (const std::logic_error&) {
            throw ValidationError(fmt::format("records CSV: row {} has a malformed number", i));
        }
        r.error = f.back();
        out.push_back(std::move(r));
    }
    return out;
}

SbResult score_sb(std::span<const SbInput> points, double alpha) {
    if (points.empty()) {
        throw ValidationError("score_sb: no records");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ValidationError("score_sb: alpha must lie in [0, 1]");
    }
    auto [l_min, l_max] = std::minmax_element(points.begin(), points.end(),
                                              [](const auto& a, const auto& b) { return a.target_acc < b.target_acc; });
    auto [f_min, f_max] = std::minmax_element(points.begin(), points.end(),
                                              [](const auto& a, const auto& b) { return a.source_acc < b.source_acc; });
    const double l_lo = l_min->target_acc;
    const double l_span = l_max->target_acc - l_lo;
    const double f_lo = f_min->source_acc;
    const double f_span = f_max->source_acc - f_lo;
    SbResult out;
    std::size_t best_f = 0;
    std::size_t best_s = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        SbScore s;
        s.lambda = points[i].lambda;
        s.l_norm = l_span > 0.0 ? (points[i].target_acc - l_lo) / l_span : 0.0;
        s.f_norm = f_span > 0.0 ? (points[i].source_acc - f_lo) / f_span : 0.0;
        s.score = alpha * s.l_norm + (1.0 - alpha) * s.f_norm;
        out.scores.push_back(s);
        if (points[i].source_acc > points[best_f].source_acc) {
            best_f = i;
        }
        if (s.score > out.scores[best_s].score) {
            best_s = i;
        }
    }
    out.lambda_stability = points[best_f].lambda;
    out.lambda_plasticity = points[best_s].lambda;
    return out;
}

std::vector<SbInput> average_by_lambda(std::span<const SweepRecord> records, CurvatureKind kind) {
    std::map<double, std::pair<SbInput, std::size_t>> acc;
    for (const auto& r : records) {
        if (!r.ok || r.kind != kind) {
            continue;
        }
        auto& [point, count] = acc[r.lambda];
        point.lambda = r.lambda;
        point.target_acc += r.final_target_acc;
        point.source_acc += r.final_source_acc_mean;
        ++count;
    }
    std::vector<SbInput> out;
    for (auto& [lambda, entry] : acc) {
        auto [point, count] = entry;
        point.target_acc /= static_cast<double>(count);
        point.source_acc /= static_cast<double>(count);
        out.push_back(point);
    }
    return out;
}

std::vector<std::size_t> pareto_front(std::span<const SbInput> points) {
    std::vector<std::size_t> front;
    for (std::size_t i = 0; i < points.size(); ++i) {
        bool dominated = false;
        for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
            const auto& a = points[j];
            const auto& b = points[i];
            dominated = a.source_acc >= b.source_acc && a.target_acc >= b.target_acc &&
                        (a.source_acc > b.source_acc || a.target_acc > b.target_acc);
        }
        if (!dominated) {
            front.push_back(i);
        }
    }
    return front;
}

namespace {

Vector flat_params(const AdapterParams& params) {
    Vector out;
    for (const auto& p : params) {
        const Vector a = vec(p.a);
        const Vector b = vec(p.b);
        out.insert(out.end(), a.begin(), a.end());
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

}  // namespace

GroupReport group_analysis(const LaplacePosterior& posterior, const AdapterParams& before,
                           const AdapterParams& after_regularized, const AdapterParams& after_baseline) {
    if (posterior.curvature.kind != CurvatureKind::kDiag) {
        throw ValidationError("group_analysis needs a diagonal posterior");
    }
    posterior.check_compatible(before);
    posterior.check_compatible(after_regularized);
    posterior.check_compatible(after_baseline);
    Vector precision;
    for (const auto& d : posterior.curvature.diag()) {
        precision.insert(precision.end(), d.d_a.begin(), d.d_a.end());
        precision.insert(precision.end(), d.d_b.begin(), d.d_b.end());
    }
    const Vector p0 = flat_params(before);
    const Vector p_reg = flat_params(after_regularized);
    const Vector p_base = flat_params(after_baseline);
    const std::size_t n = precision.size();
    if (n == 0) {
        throw ValidationError("group_analysis: no parameters");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return precision[a] < precision[b]; });
    const std::size_t cut60 = n * 6 / 10;
    const std::size_t cut90 = n * 9 / 10;
    GroupReport report;
    report.p60 = precision[order[std::min(cut60, n - 1)]];
    report.p90 = precision[order[std::min(cut90, n - 1)]];
    const std::array<std::pair<std::size_t, std::size_t>, 3> ranges{
        std::pair{std::size_t{0}, cut60}, std::pair{cut60, cut90}, std::pair{cut90, n}};
    for (std::size_t g = 0; g < 3; ++g) {
        auto& s = report.groups[g];
        const auto [lo, hi] = ranges[g];
        s.count = hi - lo;
        if (s.count == 0) {
            continue;
        }
        s.min_precision = precision[order[lo]];
        s.max_precision = precision[order[hi - 1]];
        for (std::size_t k = lo; k < hi; ++k) {
            const std::size_t i = order[k];
            s.mean_precision += precision[i];
            s.mean_change_regularized += std::abs(p_reg[i] - p0[i]);
            s.mean_change_baseline += std::abs(p_base[i] - p0[i]);
        }
        const double inv = 1.0 / static_cast<double>(s.count);
        s.mean_precision *= inv;
        s.mean_change_regularized *= inv;
        s.mean_change_baseline *= inv;
    }
    return report;
}

std::string group_report_csv(const GroupReport& report) {
    CsvWriter csv({"group", "count", "mean_precision", "min_precision", "max_precision", "mean_abs_change_regularized",
                   "mean_abs_change_baseline", "p60", "p90"});
    for (std::size_t g = 0; g < 3; ++g) {
        const auto& s = report.groups[g];
        csv.row({kGroupNames[g], std::to_string(s.count), format_real(s.mean_precision), format_real(s.min_precision),
                 format_real(s.max_precision), format_real(s.mean_change_regularized),
                 format_real(s.mean_change_baseline), format_real(report.p60), format_real(report.p90)});
    }
    return csv.text();
}

std::size_t expected_storage(CurvatureKind kind, std::size_t r, std::size_t d_in, std::size_t d_out) {
    switch (kind) {
        case CurvatureKind::kIdentity:
            return 0;
        case CurvatureKind::kDiag:
            return r * (d_in + d_out);
        case CurvatureKind::kBlockKfac:
            return d_in * d_in + d_out * d_out + 2 * r * r;
        case CurvatureKind::kBlockTriKfac:
            return d_in * d_in + d_out * d_out + 2 * r * r + d_in * r + r * d_out;
    }
    return 0;
}

std::size_t multiply_count(CurvatureKind kind, std::size_t r, std::size_t d_in, std::size_t d_out) {
    switch (kind) {
        case CurvatureKind::kIdentity:
            return r * (d_in + d_out);
        case CurvatureKind::kDiag:
            return 2 * r * (d_in + d_out);
        case CurvatureKind::kBlockKfac:
        case CurvatureKind::kBlockTriKfac: {
            // R·X·Lᵀ then ⟨X, ·⟩ for each block.
            std::size_t m = r * r * d_in + r * d_in * d_in + r * d_in;
            m += d_out * d_out * r + d_out * r * r + d_out * r;
            if (kind == CurvatureKind::kBlockTriKfac) {
                m += r * r * d_out + r * r * d_in + r * d_in;
            }
            return m;
        }
    }
    return 0;
}

std::vector<CostRow> cost_report(const LaplacePosterior& posterior) {
    std::vector<CostRow> rows;
    const auto& cur = posterior.curvature;
    for (std::size_t i = 0; i < posterior.means.size(); ++i) {
        CostRow row;
        row.adapter = i;
        row.kind = cur.kind;
        row.rank = posterior.means[i].a.rows();
        row.d_in = posterior.means[i].a.cols();
        row.d_out = posterior.means[i].b.rows();
        if (cur.kind == CurvatureKind::kDiag) {
            row.stored_values = cur.diag()[i].d_a.size() + cur.diag()[i].d_b.size();
        } else if (cur.kind != CurvatureKind::kIdentity) {
            const auto& f = cur.kfac()[i];
            row.stored_values = f.l00.size() + f.r11.size() + f.l11.size() + f.r22.size();
            if (f.has_cross()) {
                row.stored_values += f.l01->size() + f.r12->size();
            }
        }
        row.formula_values = expected_storage(cur.kind, row.rank, row.d_in, row.d_out);
        row.multiplies = multiply_count(cur.kind, row.rank, row.d_in, row.d_out);
        if (row.stored_values != row.formula_values) {
            throw ContractError(fmt::format("adapter {} stores {} values, expected {}", i, row.stored_values,
                                            row.formula_values));
        }
        rows.push_back(row);
    }
    return rows;
}

std::string cost_report_csv(std::span<const CostRow> rows) {
    CsvWriter csv({"adapter", "curvature", "rank", "d_in", "d_out", "stored_values", "formula_values", "multiplies"});
    for (const auto& r : rows) {
        csv.row({std::to_string(r.adapter), std::string(to_string(r.kind)), std::to_string(r.rank),
                 std::to_string(r.d_in), std::to_string(r.d_out), std::to_string(r.stored_values),
                 std::to_string(r.formula_values), std::to_string(r.multiplies)});
    }
    return csv.text();
}

std::string cost_report_text(std::span<const CostRow> rows) {
    std::string out = fmt::format("{:>7} {:>9} {:>5} {:>5} {:>6} {:>13} {:>11}\n", "adapter", "curvature", "rank",
                                  "d_in", "d_out", "stored_values", "multiplies");
    for (const auto& r : rows) {
        out += fmt::format("{:>7} {:>9} {:>5} {:>5} {:>6} {:>13} {:>11}\n", r.adapter, to_string(r.kind), r.rank,
                           r.d_in, r.d_out, r.stored_values, r.multiplies);
    }
    return out;
}

}  // namespace lalora
