// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance run: the oracle suite, a full sweep of
// configs/desk.json and a byte-level determinism replay. One line per
// criterion; exits nonzero if any fails.
#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "lalora/checks.hpp"
#include "lalora/commands.hpp"

namespace fs = std::filesystem;
using namespace lalora;

namespace {

constexpr std::uint64_t kOracleSeed = 1;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot read {}", p.string()));
    }
    return {std::istreambuf_iterator<char>(in), {}};
}

template <typename F>
checks::CheckResult guarded(int id, const char* name, F&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        return checks::CheckResult{id, name, false, fmt::format("threw: {}", e.what()), 0.0};
    }
}

}  // namespace

int main() {
    const fs::path root(LALORA_SOURCE_DIR);
    std::vector<checks::CheckResult> results = checks::run_oracle_suite(kOracleSeed);

    try {
        const RunConfig config = load_config(root / "configs" / "desk.json");
        const auto fixture = parse_records_csv(slurp(root / "tests" / "fixtures" / "desk_records.csv"));
        const TaskSuite suite = build_suite(config);
        const Network base = build_pretrained(config, suite);
        const SweepOutput output = sweep(config, base, suite, thread_cap_from_env());
        std::vector<SweepRecord> records;
        for (const auto& c : output.cells) {
            records.push_back(c.record);
        }
        results.push_back(guarded(6, "learning-forgetting trend", [&] {
            return checks::learning_forgetting(records, CurvatureKind::kDiag, fixture);
        }));
        results.push_back(
            guarded(8, "update-pattern separation", [&] { return checks::update_separation(config, output); }));
        const fs::path scratch = fs::temp_directory_path() / "lalora_acceptance";
        fs::remove_all(scratch);
        fs::create_directories(scratch);
        results.push_back(guarded(10, "determinism", [&] { return checks::determinism(config, scratch); }));
        fs::remove_all(scratch);
    } catch (const std::exception& e) {
        for (int id : {6, 8, 10}) {
            results.push_back(checks::CheckResult{id, "sweep", false, fmt::format("threw: {}", e.what()), 0.0});
        }
    }

    std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::size_t failed = 0;
    for (const auto& r : results) {
        std::printf("%s\n", checks::format_line(r).c_str());
        failed += r.passed ? 0 : 1;
    }
    std::printf("%zu of %zu criteria passed\n", results.size() - failed, results.size());
    return failed == 0 ? 0 : 1;
}
