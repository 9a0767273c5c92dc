// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <iterator>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "lalora/config.hpp"
#include "lalora/errors.hpp"
#include "support.hpp"

namespace lalora {
namespace {

using nlohmann::json;

const std::filesystem::path kDesk = std::filesystem::path(LALORA_SOURCE_DIR) / "configs" / "desk.json";

std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), {}};
}

json desk_json() { return json::parse(read_text(kDesk)); }

TEST(Config, LoadsShippedConfig) {
    const RunConfig c = load_config(kDesk);
    EXPECT_EQ(c.model.input_dim, 20U);
    EXPECT_EQ(c.model.hidden_dims, (std::vector<std::size_t>{128, 128}));
    EXPECT_EQ(c.lora.rank, 8U);
    EXPECT_DOUBLE_EQ(c.lora.alpha, 16.0);
    EXPECT_EQ(c.laplace.kinds, std::vector<CurvatureKind>{CurvatureKind::kDiag});
    EXPECT_EQ(c.train.lambdas.size(), 8U);
    EXPECT_DOUBLE_EQ(c.train.lambdas.back(), 1e6);
    EXPECT_EQ(c.train.base.schedule, Schedule::kLinearDecay);
    EXPECT_EQ(c.pretrain.seed, 5U);
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, CanonicalJsonRoundTrips) {
    const RunConfig c = load_config(kDesk);
    const RunConfig again = parse_config(canonical_json(c));
    EXPECT_EQ(canonical_json(again), canonical_json(c));
    EXPECT_EQ(config_hash(again), config_hash(c));
}

TEST(Config, HashIgnoresFormattingButNotValues) {
    json j = desk_json();
    const RunConfig a = parse_config(j.dump());
    const RunConfig b = parse_config(j.dump(4));
    EXPECT_EQ(config_hash(a), config_hash(b));
    j["train"]["lr"] = 1e-3;
    EXPECT_NE(config_hash(parse_config(j.dump())), config_hash(a));
}

TEST(Config, SingleLambdaAndSeedForms) {
    json j = desk_json();
    j["train"].erase("lambda_grid");
    j["train"]["lambda"] = 1e4;
    j["train"].erase("seeds");
    j["train"]["seed"] = 3;
    const RunConfig c = parse_config(j.dump());
    EXPECT_EQ(c.train.lambdas, std::vector<double>{1e4});
    EXPECT_EQ(c.train.seeds, std::vector<std::uint64_t>{3});
    j["train"]["seeds"] = {1, 2};
    EXPECT_THROW(parse_config(j.dump()), ValidationError);
}

TEST(Config, CurvatureKindList) {
    json j = desk_json();
    j["laplace"]["curvature_kind"] = {"diag", "bkfac", "btrikfac"};
    EXPECT_EQ(parse_config(j.dump()).laplace.kinds.size(), 3U);
    j["laplace"]["curvature_kind"] = {"diag", "diag"};
    EXPECT_THROW(parse_config(j.dump()), ValidationError);
    j["laplace"]["curvature_kind"] = "fisher";
    EXPECT_THROW(parse_config(j.dump()), ValidationError);
}

struct BadEdit {
    const char* name;
    void (*edit)(json&);
};

class ConfigRejects : public ::testing::TestWithParam<BadEdit> {};

TEST_P(ConfigRejects, Throws) {
    json j = desk_json();
    GetParam().edit(j);
    EXPECT_THROW(parse_config(j.dump()), ValidationError) << GetParam().name;
}

INSTANTIATE_TEST_SUITE_P(
    Edits, ConfigRejects,
    ::testing::Values(BadEdit{"unknown_root", [](json& j) { j["extra"] = 1; }},
                      BadEdit{"unknown_nested", [](json& j) { j["lora"]["scale"] = 2; }},
                      BadEdit{"missing_model", [](json& j) { j.erase("model"); }},
                      BadEdit{"negative_rank", [](json& j) { j["lora"]["rank"] = -1; }},
                      BadEdit{"zero_rank", [](json& j) { j["lora"]["rank"] = 0; }},
                      BadEdit{"fractional_count", [](json& j) { j["train"]["epochs"] = 1.5; }},
                      BadEdit{"string_lr", [](json& j) { j["train"]["lr"] = "fast"; }},
                      BadEdit{"layer_out_of_range", [](json& j) { j["lora"]["target_layers"] = {0, 3}; }},
                      BadEdit{"dropout_one", [](json& j) { j["lora"]["dropout_p"] = 1.0; }},
                      BadEdit{"target_is_source", [](json& j) { j["data"]["target_seed"] = 11; }},
                      BadEdit{"negative_lambda", [](json& j) { j["train"]["lambda_grid"] = {0, -1}; }},
                      BadEdit{"repeated_lambda", [](json& j) { j["train"]["lambda_grid"] = {1, 1}; }},
                      BadEdit{"both_lambda_forms",
                              [](json& j) {
                                  j["train"]["lambda"] = 1;
                              }},
                      BadEdit{"no_hidden", [](json& j) { j["model"]["hidden_dims"] = json::array(); }},
                      BadEdit{"one_class", [](json& j) { j["model"]["num_classes"] = 1; }},
                      BadEdit{"flag_not_bool", [](json& j) { j["laplace"]["per_example_flag"] = 1; }},
                      BadEdit{"unknown_schedule", [](json& j) { j["train"]["schedule"] = "cosine"; }},
                      BadEdit{"pretrain_without_seed", [](json& j) { j["pretrain"].erase("seed"); }},
                      BadEdit{"zero_epochs", [](json& j) { j["train"]["epochs"] = 0; }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Config, MalformedJsonAndMissingFile) {
    EXPECT_THROW(parse_config("{\"model\": "), ValidationError);
    EXPECT_THROW(parse_config("[]"), ValidationError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), IoError);
}

TEST(Config, DerivedSettings) {
    const RunConfig c = load_config(kDesk);
    const TrainConfig t = c.train_config(1e3, 2);
    EXPECT_DOUBLE_EQ(t.lambda, 1e3);
    EXPECT_EQ(t.seed, 2U);
    EXPECT_EQ(t.epochs, 15U);
    const TaskSpec s = c.task_spec();
    EXPECT_EQ(s.dim, 20U);
    EXPECT_EQ(s.classes, 10U);
    EXPECT_DOUBLE_EQ(s.noise_scale, 0.8);
}

TEST(LambdaList, Parsing) {
    EXPECT_EQ(parse_lambda_list("0, 1e3,10"), (std::vector<double>{0.0, 1e3, 10.0}));
    EXPECT_EQ(parse_lambda_list("5"), std::vector<double>{5.0});
    EXPECT_THROW(parse_lambda_list(""), ValidationError);
    EXPECT_THROW(parse_lambda_list("1,,2"), ValidationError);
    EXPECT_THROW(parse_lambda_list("-1"), ValidationError);
    EXPECT_THROW(parse_lambda_list("inf"), ValidationError);
    EXPECT_THROW(parse_lambda_list("1e3x"), ValidationError);
}

TEST(LambdaTag, ShortRenderings) {
    EXPECT_EQ(lambda_tag(0.0), "0");
    EXPECT_EQ(lambda_tag(10.0), "10");
    EXPECT_EQ(lambda_tag(1e6), "1e+06");
    EXPECT_EQ(lambda_tag(0.5), "0.5");
}

TEST(Fnv1a, KnownVectors) {
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

}  // namespace
}  // namespace lalora
