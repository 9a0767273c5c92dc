// SPDX-License-Identifier: Apache-2.0
#include "lalora/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "lalora/errors.hpp"

namespace lalora {

using nlohmann::json;

namespace {

void require_object(const json& j, std::string_view where) {
    if (!j.is_object()) {
        throw ValidationError(fmt::format("config: '{}' must be an object", where));
    }
}

void reject_unknown(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ValidationError(fmt::format("config: unknown key '{}.{}'", where, key));
        }
    }
}

const json& required(const json& j, std::string_view where, const char* key) {
    if (!j.contains(key)) {
        throw ValidationError(fmt::format("config: missing key '{}.{}'", where, key));
    }
    return j.at(key);
}

std::uint64_t as_u64(const json& v, std::string_view what) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        throw ValidationError(fmt::format("config: '{}' must be a nonnegative integer", what));
    }
    return v.get<std::uint64_t>();
}

std::size_t as_count(const json& v, std::string_view what) { return static_cast<std::size_t>(as_u64(v, what)); }

double as_real(const json& v, std::string_view what) {
    if (!v.is_number()) {
        throw ValidationError(fmt::format("config: '{}' must be a number", what));
    }
    const double d = v.get<double>();
    if (!std::isfinite(d)) {
        throw ValidationError(fmt::format("config: '{}' must be finite", what));
    }
    return d;
}

std::string as_string(const json& v, std::string_view what) {
    if (!v.is_string()) {
        throw ValidationError(fmt::format("config: '{}' must be a string", what));
    }
    return v.get<std::string>();
}

template <typename T, typename F>
std::vector<T> as_list(const json& v, std::string_view what, F&& element) {
    if (!v.is_array()) {
        throw ValidationError(fmt::format("config: '{}' must be a list", what));
    }
    std::vector<T> out;
    for (const auto& e : v) {
        out.push_back(element(e, what));
    }
    return out;
}

void read_model(const json& j, ModelConfig& m) {
    require_object(j, "model");
    reject_unknown(j, "model", {"input_dim", "hidden_dims", "num_classes", "seed"});
    if (j.contains("input_dim")) {
        m.input_dim = as_count(j["input_dim"], "model.input_dim");
    }
    if (j.contains("hidden_dims")) {
        m.hidden_dims = as_list<std::size_t>(j["hidden_dims"], "model.hidden_dims", as_count);
    }
    if (j.contains("num_classes")) {
        m.num_classes = as_count(j["num_classes"], "model.num_classes");
    }
    m.seed = as_u64(required(j, "model", "seed"), "model.seed");
}

void read_lora(const json& j, LoraConfig& l) {
    require_object(j, "lora");
    reject_unknown(j, "lora", {"rank", "alpha", "dropout_p", "target_layers"});
    if (j.contains("rank")) {
        l.rank = as_count(j["rank"], "lora.rank");
    }
    if (j.contains("alpha")) {
        l.alpha = as_real(j["alpha"], "lora.alpha");
    }
    if (j.contains("dropout_p")) {
        l.dropout_p = as_real(j["dropout_p"], "lora.dropout_p");
    }
    if (j.contains("target_layers")) {
        l.target_layers = as_list<std::size_t>(j["target_layers"], "lora.target_layers", as_count);
    }
}

void read_data(const json& j, DataConfig& d) {
    require_object(j, "data");
    reject_unknown(j, "data", {"source_seeds", "target_seed", "samples", "eval_samples", "noise_scale"});
    d.source_seeds = as_list<std::uint64_t>(required(j, "data", "source_seeds"), "data.source_seeds", as_u64);
    d.target_seed = as_u64(required(j, "data", "target_seed"), "data.target_seed");
    if (j.contains("samples")) {
        d.samples = as_count(j["samples"], "data.samples");
    }
    if (j.contains("eval_samples")) {
        d.eval_samples = as_count(j["eval_samples"], "data.eval_samples");
    }
    if (j.contains("noise_scale")) {
        d.noise_scale = as_real(j["noise_scale"], "data.noise_scale");
    }
}

void read_laplace(const json& j, LaplaceConfig& l) {
    require_object(j, "laplace");
    reject_unknown(j, "laplace", {"curvature_kind", "batches_per_subdataset", "batch_size", "per_example_flag"});
    if (j.contains("curvature_kind")) {
        const auto& k = j["curvature_kind"];
        auto parse_one = [](const json& e, std::string_view what) {
            return parse_curvature_kind(as_string(e, what));
        };
        l.kinds = k.is_array() ? as_list<CurvatureKind>(k, "laplace.curvature_kind", parse_one)
                               : std::vector<CurvatureKind>{parse_one(k, "laplace.curvature_kind")};
    }
    if (j.contains("batches_per_subdataset")) {
        l.batches_per_subdataset = as_count(j["batches_per_subdataset"], "laplace.batches_per_subdataset");
    }
    if (j.contains("batch_size")) {
        l.batch_size = as_count(j["batch_size"], "laplace.batch_size");
    }
    if (j.contains("per_example_flag")) {
        if (!j["per_example_flag"].is_boolean()) {
            throw ValidationError("config: 'laplace.per_example_flag' must be a boolean");
        }
        l.per_example = j["per_example_flag"].get<bool>();
    }
}

void read_optimizer_fields(const json& j, std::string_view where, TrainConfig& t) {
    if (j.contains("lr")) {
        t.learning_rate = as_real(j["lr"], fmt::format("{}.lr", where));
    }
    if (j.contains("schedule")) {
        t.schedule = parse_schedule(as_string(j["schedule"], fmt::format("{}.schedule", where)));
    }
    if (j.contains("epochs")) {
        t.epochs = as_count(j["epochs"], fmt::format("{}.epochs", where));
    }
    if (j.contains("batch_size")) {
        t.batch_size = as_count(j["batch_size"], fmt::format("{}.batch_size", where));
    }
    if (j.contains("optimizer")) {
        t.optimizer = parse_optimizer(as_string(j["optimizer"], fmt::format("{}.optimizer", where)));
    }
}

void read_train(const json& j, TrainSection& t) {
    require_object(j, "train");
    reject_unknown(j, "train",
                   {"lr", "schedule", "epochs", "batch_size", "lambda", "lambda_grid", "optimizer", "seed", "seeds",
                    "eval_every"});
    read_optimizer_fields(j, "train", t.base);
    if (j.contains("eval_every")) {
        t.base.eval_every = as_count(j["eval_every"], "train.eval_every");
    }
    if (j.contains("lambda") == j.contains("lambda_grid")) {
        throw ValidationError("config: 'train' needs exactly one of 'lambda' and 'lambda_grid'");
    }
    t.lambdas = j.contains("lambda") ? std::vector<double>{as_real(j["lambda"], "train.lambda")}
                                     : as_list<double>(j["lambda_grid"], "train.lambda_grid", as_real);
    if (j.contains("seed") == j.contains("seeds")) {
        throw ValidationError("config: 'train' needs exactly one of 'seed' and 'seeds'");
    }
    t.seeds = j.contains("seed") ? std::vector<std::uint64_t>{as_u64(j["seed"], "train.seed")}
                                 : as_list<std::uint64_t>(j["seeds"], "train.seeds", as_u64);
}

void read_pretrain(const json& j, TrainConfig& t) {
    require_object(j, "pretrain");
    reject_unknown(j, "pretrain", {"lr", "schedule", "epochs", "batch_size", "optimizer", "seed"});
    read_optimizer_fields(j, "pretrain", t);
    t.seed = as_u64(required(j, "pretrain", "seed"), "pretrain.seed");
}

}  // namespace

void RunConfig::validate() const {
    if (model.hidden_dims.empty()) {
        throw ValidationError("config: model.hidden_dims must be nonempty");
    }
    if (model.input_dim == 0 || model.num_classes < 2 ||
        std::find(model.hidden_dims.begin(), model.hidden_dims.end(), std::size_t{0}) != model.hidden_dims.end()) {
        throw ValidationError("config: model widths must be positive and num_classes >= 2");
    }
    const std::size_t layer_count = model.hidden_dims.size() + 1;
    if (lora.target_layers.empty()) {
        throw ValidationError("config: lora.target_layers must be nonempty");
    }
    for (std::size_t t : lora.target_layers) {
        if (t >= layer_count) {
            throw ValidationError(fmt::format("config: lora target layer {} but the model has {} layers", t,
                                              layer_count));
        }
    }
    if (lora.rank == 0) {
        throw ValidationError("config: lora.rank must be >= 1");
    }
    if (!(lora.alpha > 0.0)) {
        throw ValidationError("config: lora.alpha must be positive");
    }
    if (!(lora.dropout_p >= 0.0 && lora.dropout_p < 1.0)) {
        throw ValidationError("config: lora.dropout_p must lie in [0, 1)");
    }
    if (data.source_seeds.empty()) {
        throw ValidationError("config: data.source_seeds must be nonempty");
    }
    std::set<std::uint64_t> seeds(data.source_seeds.begin(), data.source_seeds.end());
    if (seeds.size() != data.source_seeds.size() || seeds.contains(data.target_seed)) {
        throw ValidationError("config: source and target seeds must be distinct");
    }
    if (data.eval_samples == 0) {
        throw ValidationError("config: data.eval_samples must be >= 1");
    }
    task_spec().validate();
    if (laplace.kinds.empty()) {
        throw ValidationError("config: laplace.curvature_kind must name at least one kind");
    }
    if (std::set<CurvatureKind>(laplace.kinds.begin(), laplace.kinds.end()).size() != laplace.kinds.size()) {
        throw ValidationError("config: laplace.curvature_kind lists a kind twice");
    }
    if (laplace.batches_per_subdataset == 0 || laplace.batch_size == 0) {
        throw ValidationError("config: laplace batch counts must be >= 1");
    }
    if (train.lambdas.empty() || train.seeds.empty()) {
        throw ValidationError("config: train needs at least one lambda and one seed");
    }
    for (double l : train.lambdas) {
        if (!(l >= 0.0)) {
            throw ValidationError(fmt::format("config: lambda {} must be >= 0", l));
        }
    }
    if (std::set<double>(train.lambdas.begin(), train.lambdas.end()).size() != train.lambdas.size() ||
        std::set<std::uint64_t>(train.seeds.begin(), train.seeds.end()).size() != train.seeds.size()) {
        throw ValidationError("config: lambda grid and seeds must not repeat");
    }
    if (train.base.epochs == 0) {
        throw ValidationError("config: train.epochs must be >= 1");
    }
    train.base.validate();
    pretrain.validate();
}

TaskSpec RunConfig::task_spec() const {
    TaskSpec spec;
    spec.dim = model.input_dim;
    spec.classes = model.num_classes;
    spec.samples = data.samples;
    spec.eval_samples = data.eval_samples;
    spec.noise_scale = data.noise_scale;
    return spec;
}

TrainConfig RunConfig::train_config(double lambda, std::uint64_t seed) const {
    TrainConfig t = train.base;
    t.lambda = lambda;
    t.seed = seed;
    return t;
}

DiagOptions RunConfig::diag_options() const {
    return DiagOptions{laplace.per_example ? DiagReduction::kPerExample : DiagReduction::kPerBatch,
                       DiagAccumulation::kSum};
}

RunConfig parse_config(std::string_view json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ValidationError(fmt::format("config: malformed JSON: {}", e.what()));
    }
    require_object(root, "<root>");
    reject_unknown(root, "<root>", {"model", "lora", "data", "laplace", "train", "pretrain"});
    RunConfig cfg;
    read_model(required(root, "<root>", "model"), cfg.model);
    read_lora(required(root, "<root>", "lora"), cfg.lora);
    read_data(required(root, "<root>", "data"), cfg.data);
    read_laplace(required(root, "<root>", "laplace"), cfg.laplace);
    read_train(required(root, "<root>", "train"), cfg.train);
    if (root.contains("pretrain")) {
        read_pretrain(root["pretrain"], cfg.pretrain);
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot read config '{}'", path.string()));
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string canonical_json(const RunConfig& c) {
    json kinds = json::array();
    for (auto k : c.laplace.kinds) {
        kinds.push_back(std::string(to_string(k)));
    }
    auto optimizer_fields = [](const TrainConfig& t) {
        return json{{"lr", t.learning_rate},
                    {"schedule", std::string(to_string(t.schedule))},
                    {"epochs", t.epochs},
                    {"batch_size", t.batch_size},
                    {"optimizer", std::string(to_string(t.optimizer))}};
    };
    json train = optimizer_fields(c.train.base);
    train["eval_every"] = c.train.base.eval_every;
    train["lambda_grid"] = c.train.lambdas;
    train["seeds"] = c.train.seeds;
    json pre = optimizer_fields(c.pretrain);
    pre["seed"] = c.pretrain.seed;
    // nlohmann::json objects keep keys sorted, so dump() is canonical.
    json root{
        {"model",
         {{"input_dim", c.model.input_dim},
          {"hidden_dims", c.model.hidden_dims},
          {"num_classes", c.model.num_classes},
          {"seed", c.model.seed}}},
        {"lora",
         {{"rank", c.lora.rank},
          {"alpha", c.lora.alpha},
          {"dropout_p", c.lora.dropout_p},
          {"target_layers", c.lora.target_layers}}},
        {"data",
         {{"source_seeds", c.data.source_seeds},
          {"target_seed", c.data.target_seed},
          {"samples", c.data.samples},
          {"eval_samples", c.data.eval_samples},
          {"noise_scale", c.data.noise_scale}}},
        {"laplace",
         {{"curvature_kind", kinds},
          {"batches_per_subdataset", c.laplace.batches_per_subdataset},
          {"batch_size", c.laplace.batch_size},
          {"per_example_flag", c.laplace.per_example}}},
        {"train", train},
        {"pretrain", pre},
    };
    return root.dump();
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t config_hash(const RunConfig& config) { return fnv1a64(canonical_json(config)); }

std::vector<double> parse_lambda_list(std::string_view text) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = std::min(text.find(',', pos), text.size());
        std::string item(text.substr(pos, comma - pos));
        item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char ch) { return std::isspace(ch); }),
                   item.end());
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (item.empty() || used != item.size() || !std::isfinite(v) || v < 0.0) {
            throw ValidationError(fmt::format("invalid lambda '{}'", item));
        }
        out.push_back(v);
        pos = comma + 1;
    }
    return out;
}

std::string lambda_tag(double lambda) { return fmt::format("{:g}", lambda); }

}  // namespace lalora
