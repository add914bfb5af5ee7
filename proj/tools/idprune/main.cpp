// idprune: train, prune, fine-tune, evaluate and inspect small networks.
//
// Every command reads an optional JSON config (see README.md for the schema);
// the long flags override the matching config entries. Outputs are staged in
// memory and only written once the whole command succeeded.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "idprune/architectures.hpp"
#include "idprune/data.hpp"
#include "idprune/format.hpp"
#include "idprune/model_io.hpp"
#include "idprune/pruning.hpp"
#include "idprune/theory.hpp"
#include "idprune/training.hpp"

#ifndef IDPRUNE_VERSION
#define IDPRUNE_VERSION "dev"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace idprune;

namespace {

struct Flags {
    std::string config;
    std::string model;
    std::string baseline;
    std::string out;
    std::uint64_t seed = 0;
    std::string method;
    std::string mode;
    double fraction = 0.0;
    double epsilon = 0.0;
    bool certify = false;
    std::string skip_layers;
    std::size_t prune_set_size = 0;
    std::string prune_set_policy;
    std::size_t epochs = 0;
    double lr = 0.0;
    std::size_t batch_size = 0;
};

struct Options {
    CLI::Option* seed = nullptr;
    CLI::Option* method = nullptr;
    CLI::Option* mode = nullptr;
    CLI::Option* fraction = nullptr;
    CLI::Option* epsilon = nullptr;
    CLI::Option* skip_layers = nullptr;
    CLI::Option* prune_set_size = nullptr;
    CLI::Option* prune_set_policy = nullptr;
    CLI::Option* epochs = nullptr;
    CLI::Option* lr = nullptr;
    CLI::Option* batch_size = nullptr;
};

json read_config(const std::string& path) {
    if (path.empty()) return json::object();
    if (!fs::exists(path)) throw InvalidInput("config file '" + path + "' does not exist");
    std::ifstream f(path);
    try {
        json j = json::parse(f);
        if (!j.is_object()) throw InvalidInput("config '" + path + "' must hold a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        throw InvalidInput("config '" + path + "': " + e.what());
    }
}

std::vector<std::size_t> parse_index_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != item.size()) throw InvalidInput("--skip-layers expects comma-separated layer indices, got '" + text + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

// Folds the flags into the config so the config hash covers what actually ran.
json effective_config(const Flags& f, const Options& o, const std::string& train_section) {
    json cfg = read_config(f.config);
    if (!f.model.empty()) cfg["model"] = f.model;
    if (!f.baseline.empty()) cfg["baseline"] = f.baseline;
    if (!f.out.empty()) cfg["output_dir"] = f.out;
    if (o.seed && *o.seed) cfg["seed"] = f.seed;
    if (o.method && *o.method) cfg["prune"]["method"] = f.method;
    if (o.mode && *o.mode) cfg["prune"]["mode"] = f.mode;
    if (o.fraction && *o.fraction) cfg["prune"]["fraction"] = f.fraction;
    if (o.epsilon && *o.epsilon) {
        cfg["prune"]["epsilon"] = f.epsilon;
        if (!(o.mode && *o.mode)) cfg["prune"]["mode"] = "epsilon";
    }
    if (f.certify) cfg["prune"]["certify"] = true;
    if (o.skip_layers && *o.skip_layers) cfg["prune"]["skip_layers"] = parse_index_list(f.skip_layers);
    if (o.prune_set_size && *o.prune_set_size) cfg["prune"]["prune_set_size"] = f.prune_set_size;
    if (o.prune_set_policy && *o.prune_set_policy) cfg["prune"]["prune_set_policy"] = f.prune_set_policy;
    if (o.epochs && *o.epochs) cfg[train_section]["epochs"] = f.epochs;
    if (o.lr && *o.lr) cfg[train_section]["lr"] = f.lr;
    if (o.batch_size && *o.batch_size) cfg[train_section]["batch_size"] = f.batch_size;
    return cfg;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.is_object() || !j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("config entry '") + key + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Run context: effective config, provenance and staged outputs.

class Run {
public:
    Run(std::string command, json cfg) : command_(std::move(command)), cfg_(std::move(cfg)) {
        seed_ = get_or<std::uint64_t>(cfg_, "seed", 0);
        // Input files enter the hash by content, so relocated copies hash alike.
        json hashed = cfg_;
        hashed.erase("output_dir");
        auto by_content = [](json& j, const char* key) {
            if (!j.is_object() || !j.contains(key) || !j.at(key).is_string()) return;
            const std::string p = j.at(key).get<std::string>();
            if (fs::is_regular_file(p)) j[key] = "content:" + fnv1a_hex(detail::read_file(p));
        };
        by_content(hashed, "model");
        by_content(hashed, "baseline");
        if (hashed.contains("data")) {
            by_content(hashed["data"], "train");
            by_content(hashed["data"], "test");
        }
        hash_ = fnv1a_hex(hashed.dump());
        out_dir_ = get_or<std::string>(cfg_, "output_dir", ".");
    }

    const json& cfg() const { return cfg_; }
    json section(const char* name) const { return cfg_.contains(name) ? cfg_.at(name) : json::object(); }
    std::uint64_t seed() const { return seed_; }

    std::string require_path(const char* key) {
        const std::string p = get_or<std::string>(cfg_, key, "");
        if (p.empty()) throw InvalidInput(std::string("no '") + key + "' given (config entry or --" + key + ")");
        if (!fs::exists(p)) throw InvalidInput(std::string(key) + " file '" + p + "' does not exist");
        inputs_.push_back(p);
        return p;
    }
    void note_input(const std::string& p) { inputs_.push_back(p); }

    void stamp(Model& m) const {
        m.metadata["config_hash"] = hash_;
        m.metadata["seed"] = std::to_string(seed_);
        m.metadata["version"] = IDPRUNE_VERSION;
        m.metadata["command"] = command_;
    }
    void stamp(json& j) const {
        j["config_hash"] = hash_;
        j["seed"] = seed_;
        j["version"] = IDPRUNE_VERSION;
        j["command"] = command_;
    }
    std::string csv_preamble() const {
        return "# idprune " + std::string(IDPRUNE_VERSION) + " command=" + command_ + " config_hash=" + hash_ +
               " seed=" + std::to_string(seed_) + "\n";
    }

    void add(const std::string& name, std::string bytes) { staged_.emplace_back(fs::path(out_dir_) / name, std::move(bytes)); }
    void add_json(const std::string& name, json j) {
        stamp(j);
        add(name, j.dump(2) + "\n");
    }
    void add_csv(const std::string& name, const std::string& body) { add(name, csv_preamble() + body); }

    // Temp file + rename per output, after checking no output would overwrite an input.
    void commit() {
        std::error_code ec;
        fs::create_directories(out_dir_, ec);
        if (ec) throw Error("cannot create output directory '" + out_dir_ + "': " + ec.message());
        for (const auto& [path, bytes] : staged_)
            for (const std::string& in : inputs_)
                if (fs::exists(path) && fs::equivalent(path, in))
                    throw InvalidInput("output '" + path.string() + "' would overwrite input '" + in + "'");
        std::vector<fs::path> temps;
        try {
            for (const auto& [path, bytes] : staged_) {
                fs::path tmp = path;
                tmp += ".partial";
                temps.push_back(tmp);
                std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
                f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
                f.close();
                if (!f) throw Error("failed writing '" + tmp.string() + "'");
            }
            for (std::size_t i = 0; i < staged_.size(); ++i) fs::rename(temps[i], staged_[i].first);
        } catch (...) {
            for (const fs::path& t : temps) fs::remove(t, ec);
            throw;
        }
    }

private:
    std::string command_;
    json cfg_;
    std::uint64_t seed_ = 0;
    std::string hash_;
    std::string out_dir_;
    std::vector<std::string> inputs_;
    std::vector<std::pair<fs::path, std::string>> staged_;
};

// ---------------------------------------------------------------------------
// Config sections.

struct Datasets {
    LabeledDataset train;
    LabeledDataset test;
};

LabeledDataset truncated(const LabeledDataset& ds, std::size_t limit) {
    if (limit == 0 || limit >= ds.size()) return ds;
    std::vector<std::size_t> idx(limit);
    for (std::size_t i = 0; i < limit; ++i) idx[i] = i;
    return ds.subset(idx);
}

CircleSpec circle_spec(const json& d, std::uint64_t seed, bool test) {
    CircleSpec s;
    s.n = test ? get_or<std::size_t>(d, "n_test", 2000) : get_or<std::size_t>(d, "n_train", 1000);
    s.num_vectors = get_or<std::size_t>(d, "num_vectors", 2);
    s.vector_seed = get_or<std::uint64_t>(d, "vector_seed", 0);
    const std::uint64_t base = get_or<std::uint64_t>(d, "seed", seed);
    s.seed = test ? base + 1000003 : base;
    s.validate();
    return s;
}

Datasets load_data(Run& run) {
    const json d = run.section("data");
    const std::string kind = get_or<std::string>(d, "kind", "");
    Datasets out;
    if (kind == "circle") {
        out.train = generate_circle(circle_spec(d, run.seed(), false));
        out.test = generate_circle(circle_spec(d, run.seed(), true));
    } else if (kind == "idx") {
        const std::string dir = get_or<std::string>(d, "dir", "");
        if (dir.empty() || !fs::is_directory(dir)) throw InvalidInput("idx data directory '" + dir + "' does not exist");
        run.note_input(dir);
        const bool flatten = get_or<bool>(d, "flatten", false);
        out.train = load_idx_dir(dir, true, flatten);
        out.test = load_idx_dir(dir, false, flatten);
    } else if (kind == "files") {
        for (const char* key : {"train", "test"}) {
            const std::string p = get_or<std::string>(d, key, "");
            if (p.empty() || !fs::exists(p)) throw InvalidInput(std::string("data ") + key + " file '" + p + "' does not exist");
            run.note_input(p);
            (std::string(key) == "train" ? out.train : out.test) = load_dataset(p);
        }
    } else {
        throw InvalidInput("data.kind must be one of circle, idx, files (got '" + kind + "')");
    }
    out.train = truncated(out.train, get_or<std::size_t>(d, "train_limit", 0));
    out.test = truncated(out.test, get_or<std::size_t>(d, "test_limit", 0));
    return out;
}

TrainConfig train_config(const Run& run, const char* section, const LabeledDataset& data, std::size_t default_epochs) {
    const json t = run.section(section);
    TrainConfig c;
    c.epochs = get_or<std::size_t>(t, "epochs", default_epochs);
    c.batch_size = get_or<std::size_t>(t, "batch_size", c.batch_size);
    c.lr = get_or<double>(t, "lr", c.lr);
    c.lr_decay = get_or<double>(t, "lr_decay", c.lr_decay);
    c.momentum = get_or<double>(t, "momentum", c.momentum);
    c.init_scale = get_or<double>(t, "init_scale", c.init_scale);
    c.seed = get_or<std::uint64_t>(t, "seed", run.seed());
    const std::string loss = get_or<std::string>(run.section("train"), "loss", "");
    c.loss = loss.empty() ? (data.is_regression() ? Loss::mse : Loss::cross_entropy) : parse_loss(loss);
    c.validate();
    return c;
}

Loss resolve_loss(const Run& run, const LabeledDataset& data) { return train_config(run, "train", data, 0).loss; }

Model build_model(const Run& run, const LabeledDataset& data) {
    const json a = run.section("architecture");
    const std::string type = get_or<std::string>(a, "type", "mlp");
    const Shape in = data.inputs.rank() > 0 ? Shape(data.inputs.shape().begin() + 1, data.inputs.shape().end()) : Shape{};
    const std::size_t outputs =
        get_or<std::size_t>(a, "outputs", data.is_regression() ? data.targets.cols()
                                                                : static_cast<std::size_t>(*std::max_element(
                                                                      data.labels.begin(), data.labels.end())) + 1);
    const auto hidden = get_or<std::vector<std::size_t>>(a, "hidden", {});
    if (type == "mlp") {
        std::size_t d = 1;
        for (std::size_t s : in) d *= s;
        if (in.size() != 1) throw InvalidInput("mlp needs flat inputs; set data.flatten = true");
        return make_mlp(d, hidden, outputs);
    }
    if (type == "convnet") {
        std::vector<ConvBlockSpec> blocks;
        for (const json& b : get_or<json>(a, "conv", json::array())) {
            ConvBlockSpec s;
            s.channels = get_or<std::size_t>(b, "channels", s.channels);
            s.kernel = get_or<std::size_t>(b, "kernel", s.kernel);
            s.padding = get_or<std::size_t>(b, "padding", s.padding);
            s.pool = get_or<std::size_t>(b, "pool", s.pool);
            blocks.push_back(s);
        }
        return make_convnet(in, blocks, hidden, outputs);
    }
    throw InvalidInput("architecture.type must be mlp or convnet (got '" + type + "')");
}

struct PruneSettings {
    PruneConfig config;
    PruneMethod method = PruneMethod::id;
    std::size_t prune_set_size = 1000;
    PruneSetPolicy policy = PruneSetPolicy::held_out_from_test;
    double delta = 0.05;
    double zeta = 1.0;
};

PruneSettings prune_settings(const Run& run) {
    const json p = run.section("prune");
    PruneSettings s;
    const std::string method = get_or<std::string>(p, "method", "id");
    if (method == "id") s.method = PruneMethod::id;
    else if (method == "magnitude") s.method = PruneMethod::magnitude;
    else throw InvalidInput("--method must be id or magnitude (got '" + method + "')");
    const std::string mode = get_or<std::string>(p, "mode", "fraction");
    if (mode == "fraction") s.config.mode = PruneConfig::Mode::fraction;
    else if (mode == "epsilon") s.config.mode = PruneConfig::Mode::epsilon;
    else throw InvalidInput("prune.mode must be fraction or epsilon (got '" + mode + "')");
    s.config.fraction = get_or<double>(p, "fraction", s.config.fraction);
    s.config.epsilon = get_or<double>(p, "epsilon", s.config.epsilon);
    s.config.certify = get_or<bool>(p, "certify", false);
    for (std::size_t l : get_or<std::vector<std::size_t>>(p, "skip_layers", {})) s.config.skip_layers.insert(l);
    for (const auto& [k, v] : get_or<std::map<std::string, double>>(p, "layer_fractions", {}))
        s.config.layer_fractions[parse_index_list(k).at(0)] = v;
    for (const auto& [k, v] : get_or<std::map<std::string, std::size_t>>(p, "layer_ranks", {}))
        s.config.layer_ranks[parse_index_list(k).at(0)] = v;
    const std::string deficiency = get_or<std::string>(p, "on_rank_deficiency", "truncate");
    if (deficiency == "truncate") s.config.on_rank_deficiency = RankDeficiencyPolicy::truncate;
    else if (deficiency == "fail") s.config.on_rank_deficiency = RankDeficiencyPolicy::fail;
    else throw InvalidInput("prune.on_rank_deficiency must be truncate or fail");
    s.prune_set_size = get_or<std::size_t>(p, "prune_set_size", s.prune_set_size);
    const std::string policy = get_or<std::string>(p, "prune_set_policy", "held_out_from_test");
    if (policy == "held_out_from_test") s.policy = PruneSetPolicy::held_out_from_test;
    else if (policy == "from_train") s.policy = PruneSetPolicy::from_train;
    else throw InvalidInput("--prune-set-policy must be held_out_from_test or from_train");
    s.delta = get_or<double>(p, "delta", s.delta);
    s.zeta = get_or<double>(p, "zeta", s.zeta);
    s.config.validate();
    if (s.method == PruneMethod::magnitude && s.config.mode == PruneConfig::Mode::epsilon)
        throw InvalidInput("magnitude pruning needs fraction mode");
    return s;
}

json eval_json(const EvalResult& r, Loss loss, std::size_t n) {
    return {{"loss_name", loss_name(loss)},
            {"loss", r.loss},
            {"accuracy", std::isnan(r.accuracy) ? json() : json(r.accuracy)},
            {"samples", n}};
}

bool one_hidden_layer(const Model& m) {
    return m.layers.size() == 3 && std::holds_alternative<FullyConnected>(m.layers[0]) &&
           std::holds_alternative<ReLU>(m.layers[1]) && std::holds_alternative<FullyConnected>(m.layers[2]);
}

// ---------------------------------------------------------------------------
// Commands.

int cmd_train(Run& run) {
    const Datasets data = load_data(run);
    const TrainConfig tc = train_config(run, "train", data.train, 50);
    Model model = build_model(run, data.train);
    Rng rng(run.seed());
    initialize_parameters(model, tc.init_scale, rng);
    TrainResult r = train(model, data.train, tc, &data.test);
    run.stamp(r.model);
    const EvalResult ev = evaluate(r.model, data.test, tc.loss);
    run.add("model.idnet", serialize_model(r.model));
    run.add_csv("train_log.csv", r.log.to_csv());
    run.add_json("train.json", {{"test", eval_json(ev, tc.loss, data.test.size())}, {"model", r.model.name}});
    run.commit();
    return 0;
}

int cmd_prune(Run& run) {
    Model model = load_model(run.require_path("model"));
    if (has_batchnorm(model)) model = absorb_batchnorm(model);
    const PruneSettings s = prune_settings(run);
    const Datasets data = load_data(run);
    const DataSplit split = split_pruning_set(data.train, data.test, s.prune_set_size, s.policy, run.seed());
    if (split.prune.size() == 0) throw InvalidInput("pruning set is empty; set --prune-set-size");

    PruneResult r = s.method == PruneMethod::id ? prune_model(model, split.prune, s.config)
                                                : magnitude_prune_model(model, split.prune, s.config);
    const Loss loss = resolve_loss(run, split.test);
    const EvalResult full = evaluate(model, split.test, loss);
    const EvalResult pruned = evaluate(r.model, split.test, loss);

    if (s.method == PruneMethod::id && one_hidden_layer(model) && loss == Loss::mse && !r.report.layers.front().skipped) {
        const LayerReport& lr = r.report.layers.front();
        const Matrix z = forward_prefix(model, split.prune.inputs, 1).as_matrix();
        // Exact relative error of the selection that was applied.
        const LayerSelection sel = id_select(z, RankCriterion::fixed(lr.width_after, true), s.config.on_rank_deficiency);
        const double znorm = spectral_norm(z, 1e-10, 5000);
        BoundInputs in;
        in.epsilon = znorm > 0.0 ? sel.id.achieved_error / znorm : 0.0;
        in.delta = s.delta;
        in.zeta = s.zeta;
        in.r0 = full.loss;
        in.t_norm = lr.t_norm;
        r.report.theory = theorem1_report(model, r.model, split.prune.inputs, in).to_json();
    }

    run.stamp(r.model);
    json report = r.report.to_json();
    report["evaluation"] = {{"before_fine_tune", eval_json(pruned, loss, split.test.size())},
                            {"full_model", eval_json(full, loss, split.test.size())}};
    report["prune_set_policy"] = s.policy == PruneSetPolicy::held_out_from_test ? "held_out_from_test" : "from_train";
    run.add("pruned.idnet", serialize_model(r.model));
    run.add_json("prune_report.json", report);
    run.add_csv("prune_report.csv", r.report.to_csv());
    run.commit();
    std::cout << "method=" << method_name(s.method) << " flops_reduction=" << format_double(r.report.flops_reduction())
              << " loss=" << format_double(pruned.loss) << " accuracy=" << format_double(pruned.accuracy)
              << " full_loss=" << format_double(full.loss) << " full_accuracy=" << format_double(full.accuracy) << "\n";
    return 0;
}

int cmd_finetune(Run& run) {
    const Model model = load_model(run.require_path("model"));
    const Datasets data = load_data(run);
    const TrainConfig tc = train_config(run, "finetune", data.train, 10);
    TrainResult r = fine_tune(model, data.train, tc, &data.test);
    run.stamp(r.model);
    const EvalResult ev = evaluate(r.model, data.test, tc.loss);
    run.add("finetuned.idnet", serialize_model(r.model));
    run.add_csv("finetune_log.csv", r.log.to_csv());
    run.add_json("finetune.json", {{"test", eval_json(ev, tc.loss, data.test.size())}});
    run.commit();
    return 0;
}

int cmd_eval(Run& run) {
    const Model model = load_model(run.require_path("model"));
    const Datasets data = load_data(run);
    const Loss loss = resolve_loss(run, data.test);
    const EvalResult ev = evaluate(model, data.test, loss);
    run.add_json("eval.json", eval_json(ev, loss, data.test.size()));
    run.commit();
    std::cout << "loss=" << format_double(ev.loss) << " accuracy=" << format_double(ev.accuracy)
              << " samples=" << data.test.size() << "\n";
    return 0;
}

int cmd_flops(Run& run) {
    const Model model = load_model(run.require_path("model"));
    const FlopsReport f = count_flops(model);
    json j = {{"flops", f.total}};
    json per = json::array();
    for (const auto& [layer, n] : f.per_layer) per.push_back({{"layer", layer}, {"flops", n}});
    j["per_layer"] = per;
    std::cout << "flops=" << f.total;
    if (!get_or<std::string>(run.cfg(), "baseline", "").empty()) {
        const FlopsReport b = count_flops(load_model(run.require_path("baseline")));
        const double red = flops_reduction(b.total, f.total);
        j["baseline_flops"] = b.total;
        j["flops_reduction"] = red;
        std::cout << " baseline_flops=" << b.total << " flops_reduction=" << format_double(red);
    }
    std::cout << "\n";
    run.add_json("flops.json", j);
    run.commit();
    return 0;
}

int cmd_inspect(Run& run) {
    Model model = load_model(run.require_path("model"));
    if (has_batchnorm(model)) model = absorb_batchnorm(model);
    const PruneSettings s = prune_settings(run);
    const Datasets data = load_data(run);
    const DataSplit split = split_pruning_set(data.train, data.test, s.prune_set_size, s.policy, run.seed());
    if (split.prune.size() == 0) throw InvalidInput("pruning set is empty; set --prune-set-size");
    const auto weighted = model.weighted_layers();
    json index = json::array();
    for (std::size_t l : weighted) {
        if (l == weighted.back()) continue;
        const Tensor act = forward_prefix(model, split.prune.inputs, detail::group_end(model, l));
        const Matrix z = act.rank() == 4 ? reshape_channels(act) : act.as_matrix();
        std::string csv = "k,proxy,trailing_ratio\n";
        for (const ProfilePoint& p : singular_value_profile(z))
            csv += std::to_string(p.k) + "," + format_double(p.proxy) + "," + format_double(p.trailing_ratio) + "\n";
        const std::string name = "profile_layer" + std::to_string(l) + ".csv";
        run.add_csv(name, csv);
        index.push_back({{"layer", l}, {"kind", layer_kind(model.layers[l])}, {"file", name}});
    }
    run.add_json("inspect.json", {{"profiles", index}});
    run.commit();
    return 0;
}

int cmd_gen_data(Run& run) {
    const json d = run.section("data");
    if (get_or<std::string>(d, "kind", "circle") != "circle") throw InvalidInput("gen-data only generates circle data");
    const LabeledDataset train = generate_circle(circle_spec(d, run.seed(), false));
    const LabeledDataset test = generate_circle(circle_spec(d, run.seed(), true));
    run.add("train.iddata", serialize_dataset(train));
    run.add("test.iddata", serialize_dataset(test));
    run.add_json("data.json", {{"train_samples", train.size()}, {"test_samples", test.size()}});
    run.commit();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Interpolative-decomposition pruning toolkit"};
    app.set_version_flag("--version", IDPRUNE_VERSION);
    app.require_subcommand(1);
    Flags f;

    struct Cmd {
        const char* name;
        const char* help;
        int (*fn)(Run&);
        const char* train_section;
    };
    const std::vector<Cmd> cmds = {
        {"train", "Train a model from an architecture + data config", cmd_train, "train"},
        {"prune", "Prune a model with ID or magnitude selection", cmd_prune, "train"},
        {"finetune", "Fine-tune a (pruned) model", cmd_finetune, "finetune"},
        {"eval", "Evaluate a model on the test set", cmd_eval, "train"},
        {"flops", "Count forward FLOPs, optionally against a baseline", cmd_flops, "train"},
        {"inspect", "Write per-layer rank profiles of the activations", cmd_inspect, "train"},
        {"gen-data", "Generate the synthetic circle dataset", cmd_gen_data, "train"},
    };
    std::vector<std::pair<CLI::App*, const Cmd*>> subs;
    for (const Cmd& c : cmds) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", f.config, "JSON config file");
        sub->add_option("--out", f.out, "Output directory");
        sub->add_option("--seed", f.seed, "Random seed");
        if (std::string(c.name) != "gen-data") sub->add_option("--model", f.model, "Input model (IDNET)");
        if (std::string(c.name) == "flops") sub->add_option("--baseline", f.baseline, "Baseline model for the reduction");
        if (std::string(c.name) == "prune" || std::string(c.name) == "inspect") {
            sub->add_option("--method", f.method, "id or magnitude");
            sub->add_option("--mode", f.mode, "fraction or epsilon");
            sub->add_option("--fraction", f.fraction, "Fraction of neurons/channels to remove");
            sub->add_option("--epsilon", f.epsilon, "Relative ID accuracy (selects epsilon mode)");
            sub->add_flag("--certify", f.certify, "Use exact trailing norms");
            sub->add_option("--skip-layers", f.skip_layers, "Comma-separated layer indices to keep");
            sub->add_option("--prune-set-size", f.prune_set_size, "Pruning set size");
            sub->add_option("--prune-set-policy", f.prune_set_policy, "held_out_from_test or from_train");
        }
        if (std::string(c.name) == "train" || std::string(c.name) == "finetune") {
            sub->add_option("--epochs", f.epochs, "Epochs");
            sub->add_option("--lr", f.lr, "Initial learning rate");
            sub->add_option("--batch-size", f.batch_size, "Mini-batch size");
        }
        subs.emplace_back(sub, &c);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    for (const auto& [sub, c] : subs) {
        if (!sub->parsed()) continue;
        Options parsed;
        auto opt = [&](const char* name) -> CLI::Option* {
            try {
                return sub->get_option(name);
            } catch (const CLI::OptionNotFound&) {
                return nullptr;
            }
        };
        parsed.seed = opt("--seed");
        parsed.method = opt("--method");
        parsed.mode = opt("--mode");
        parsed.fraction = opt("--fraction");
        parsed.epsilon = opt("--epsilon");
        parsed.skip_layers = opt("--skip-layers");
        parsed.prune_set_size = opt("--prune-set-size");
        parsed.prune_set_policy = opt("--prune-set-policy");
        parsed.epochs = opt("--epochs");
        parsed.lr = opt("--lr");
        parsed.batch_size = opt("--batch-size");
        try {
            Run run(c->name, effective_config(f, parsed, c->train_section));
            return c->fn(run);
        } catch (const std::exception& e) {
            std::cerr << "idprune " << c->name << ": " << e.what() << "\n";
            return 1;
        }
    }
    return 1;
}
