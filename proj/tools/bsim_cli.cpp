#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "bsim/equilibrium.hpp"
#include "bsim/evalkit.hpp"
#include "bsim/gradcheck.hpp"
#include "bsim/trainkit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DatasetSpec {
    std::string bin_path;  // CIFAR-style binary; empty = synthetic benchmark
    int64_t classes = 4;
    int64_t per_class = 250;
    int64_t test_per_class = 50;
    int64_t size = 32;
    uint64_t seed = 7;

    json to_json() const {
        json j;
        if (!bin_path.empty()) {
            j["bin"] = bin_path;
        } else {
            j["classes"] = classes;
            j["per_class"] = per_class;
            j["test_per_class"] = test_per_class;
            j["size"] = size;
            j["seed"] = seed;
        }
        return j;
    }

    void from_json(const json& j) {
        for (const auto& [key, value] : j.items()) {
            if (key == "bin") bin_path = value.get<std::string>();
            else if (key == "classes") classes = value.get<int64_t>();
            else if (key == "per_class") per_class = value.get<int64_t>();
            else if (key == "test_per_class") test_per_class = value.get<int64_t>();
            else if (key == "size") size = value.get<int64_t>();
            else if (key == "seed") seed = value.get<uint64_t>();
            else throw bsim::ValidationError("unknown dataset key: " + key);
        }
    }

    bsim::LabeledImageSet train_set() const {
        if (!bin_path.empty()) return bsim::load_cifar_binary(bin_path);
        return bsim::synth_shapes(classes, per_class, size, seed);
    }
    bsim::LabeledImageSet test_set() const {
        if (!bin_path.empty()) return bsim::load_cifar_binary(bin_path);
        return bsim::synth_shapes(classes, test_per_class, size, seed + 1);
    }
};

void add_dataset_flags(CLI::App* cmd, DatasetSpec& spec) {
    cmd->add_option("--data-bin", spec.bin_path, "CIFAR-style binary dataset file");
    cmd->add_option("--data-classes", spec.classes, "synthetic: number of shape classes");
    cmd->add_option("--data-per-class", spec.per_class, "synthetic: training images per class");
    cmd->add_option("--data-test-per-class", spec.test_per_class,
                    "synthetic: test images per class");
    cmd->add_option("--data-size", spec.size, "synthetic: image side length");
    cmd->add_option("--data-seed", spec.seed, "synthetic: dataset seed");
}

uint64_t env_seed_default() {
    if (const char* env = std::getenv("BSIM_SEED")) return std::strtoull(env, nullptr, 10);
    return 7;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw bsim::IoError("cannot write " + path.string());
    out << text;
}

bsim::Method parse_method(const std::string& s) {
    if (s == "simclr") return bsim::Method::simclr;
    if (s == "moco") return bsim::Method::moco;
    if (s == "byol") return bsim::Method::byol;
    throw bsim::ValidationError("unknown method: " + s);
}

bsim::MixStrategy parse_mix(const std::string& s) {
    if (s == "cutmix") return bsim::MixStrategy::cutmix;
    if (s == "mixup") return bsim::MixStrategy::mixup;
    if (s == "none") return bsim::MixStrategy::none;
    throw bsim::ValidationError("unknown mix: " + s);
}

bsim::ByolVariant parse_variant(const std::string& s) {
    if (s == "v0") return bsim::ByolVariant::v0;
    if (s == "v1") return bsim::ByolVariant::v1;
    throw bsim::ValidationError("unknown byol variant: " + s);
}

// Raw flag values; merged over the config file only when actually passed.
struct TrainFlags {
    std::string method = "simclr", mix = "cutmix", variant = "v1";
    double alpha = 1.0, temperature = 0.2, w1 = 1.0, w2 = 0.0;
    int64_t batch = 32, epochs = 10, warmup_epochs = 1, queue = 256;
    double lr = 0.5, momentum = 0.9, weight_decay = 1e-4, tau_base = 0.996;
    double force_lambda = -1.0;
    uint64_t seed = 7;
};

void merge_flags(const CLI::App* cmd, const TrainFlags& f, bsim::TrainConfig& cfg) {
    auto passed = [cmd](const std::string& name) { return cmd->count(name) > 0; };
    if (passed("--method")) cfg.method = parse_method(f.method);
    if (passed("--mix")) cfg.mix = parse_mix(f.mix);
    if (passed("--byol-variant")) cfg.byol_variant = parse_variant(f.variant);
    if (passed("--alpha")) cfg.alpha = f.alpha;
    if (passed("--temperature")) cfg.temperature = f.temperature;
    if (passed("--w1")) cfg.w1 = f.w1;
    if (passed("--w2")) cfg.w2 = f.w2;
    if (passed("--batch")) cfg.batch = f.batch;
    if (passed("--epochs")) cfg.epochs = f.epochs;
    if (passed("--lr")) cfg.lr = f.lr;
    if (passed("--momentum")) cfg.momentum = f.momentum;
    if (passed("--weight-decay")) cfg.weight_decay = f.weight_decay;
    if (passed("--warmup-epochs")) cfg.warmup_epochs = f.warmup_epochs;
    if (passed("--queue")) cfg.queue_capacity = f.queue;
    if (passed("--tau-base")) cfg.tau_base = f.tau_base;
    if (passed("--seed")) cfg.seed = f.seed;
    if (passed("--force-lambda")) cfg.force_lambda = f.force_lambda;
}

// TrainConfig plus the "dataset" block, strict on unknown keys.
void apply_config_file(const std::string& path, bsim::TrainConfig& cfg, DatasetSpec& data) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw bsim::IoError("cannot read config file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw bsim::ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
    if (j.contains("dataset")) {
        data.from_json(j["dataset"]);
        j.erase("dataset");
    }
    cfg = bsim::train_config_from_json(j.dump());
}

int cmd_train(bsim::TrainConfig cfg, const DatasetSpec& data_spec, const std::string& out_dir) {
    cfg.validate_and_normalize();
    fs::create_directories(out_dir);

    json resolved = json::parse(bsim::train_config_to_json(cfg));
    resolved["dataset"] = data_spec.to_json();
    write_text(fs::path(out_dir) / "resolved_config.json", resolved.dump(2) + "\n");

    bsim::LabeledImageSet data = data_spec.train_set();

    std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw bsim::IoError("cannot open metrics file");
    bsim::TrainOptions opts;
    opts.on_metrics = [&metrics](const bsim::MetricsRecord& rec) {
        metrics << bsim::metrics_jsonl_line(rec, false) << "\n";
        std::cout << bsim::metrics_jsonl_line(rec, true) << "\n";
    };
    bsim::TrainResult result = bsim::train(cfg, data, opts);
    metrics.close();
    const std::string ckpt = (fs::path(out_dir) / "checkpoint.bsim").string();
    bsim::save_checkpoint(ckpt, result.checkpoint);
    std::cout << "{\"final_step\":" << result.checkpoint.step << ",\"checkpoint\":\"" << ckpt
              << "\"}" << std::endl;
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const DatasetSpec& data_spec,
             const std::string& features, int64_t knn_k, const bsim::ProbeOptions& probe) {
    bsim::Checkpoint cp = bsim::load_checkpoint(ckpt_path);
    bsim::ModelState model = bsim::model_from_checkpoint(cp);
    bsim::LabeledImageSet train = data_spec.train_set();
    bsim::LabeledImageSet test = data_spec.test_set();

    bsim::FeatureSet ftr, fte;
    if (features == "encoder") {
        ftr = bsim::encoder_features(model, train);
        fte = bsim::encoder_features(model, test);
    } else if (features == "colorhist") {
        ftr = bsim::color_histogram_features(train);
        fte = bsim::color_histogram_features(test);
    } else {
        throw bsim::ValidationError("unknown feature extractor: " + features);
    }
    json out;
    out["features"] = features;
    out["linear_probe"] = bsim::linear_probe(ftr, fte, probe);
    out["linear_probe_train"] = bsim::linear_probe(ftr, ftr, probe);
    out["knn"] = bsim::knn_eval(ftr, fte, knn_k);
    out["knn_k"] = knn_k;
    std::cout << out.dump() << std::endl;
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    using namespace bsim;
    Rng rng(seed);
    const int64_t n = 8, d = 6;
    auto random_matrix = [&rng](int64_t r, int64_t c) {
        Tensor t({r, c});
        for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
        return t;
    };
    auto random_unit = [&rng](int64_t dd) {
        Tensor v({dd});
        double s = 0.0;
        for (int64_t i = 0; i < dd; ++i) {
            v[i] = rng.normal();
            s += v[i] * v[i];
        }
        for (int64_t i = 0; i < dd; ++i) v[i] /= std::sqrt(s);
        return v;
    };

    Tensor zm1 = random_matrix(n, d), zb = random_matrix(n, d);
    Tensor zm2 = random_matrix(n, d), zd = random_matrix(n, d);
    std::vector<double> lambdas(n);
    for (auto& l : lambdas) l = rng.uniform();
    std::vector<int64_t> pairing(n);
    for (int64_t i = 0; i < n; ++i) pairing[i] = n - 1 - i;

    json out;
    double worst = 0.0;
    auto run = [&out, &worst](const char* name, const Objective& obj,
                              const std::vector<std::pair<std::string, Tensor>>& params) {
        GradReport rep = grad_check(obj, params, 1e-5);
        out[name] = rep.max_rel_err;
        worst = std::max(worst, rep.max_rel_err);
    };

    run("simclr_bsim",
        [&](Tape& t, const std::vector<Var>& p) {
            BatchEmbeddings e{p[0], p[1], p[2], p[3], lambdas, pairing};
            return simclr_bsim_loss(t, e, 0.2).node;
        },
        {{"zm1", zm1}, {"zb", zb}, {"zm2", zm2}, {"zd", zd}});
    run("nt_xent",
        [&](Tape& t, const std::vector<Var>& p) {
            return nt_xent_baseline(t, p[0], p[1], 0.2).node;
        },
        {{"za", zm1}, {"zb", zb}});

    Tensor qk = l2_normalize_rows(random_matrix(8, d));
    FeatureQueue queue(8, d);
    queue.push(qk);
    Tensor q0 = random_unit(d), k1 = random_unit(d), k2 = random_unit(d);
    run("moco_bsim",
        [&](Tape& t, const std::vector<Var>& p) {
            return moco_bsim_loss(t, l2normalize_rows(p[0]), t.constant(k1), t.constant(k2),
                                  queue, 0.4, 0.2)
                .node;
        },
        {{"q", q0}});

    Tensor z1 = random_unit(d), z2 = random_unit(d);
    run("byol_v0",
        [&](Tape& t, const std::vector<Var>& p) {
            return byol_bsim_v0(t, p[0], p[1], p[2], 0.35).node;
        },
        {{"q", q0}, {"z1", z1}, {"z2", z2}});
    run("byol_v1",
        [&](Tape& t, const std::vector<Var>& p) {
            return byol_bsim_v1(t, p[0], p[1], p[2], 0.35).node;
        },
        {{"q", q0}, {"z1", z1}, {"z2", z2}});
    run("wbsim",
        [&](Tape& t, const std::vector<Var>& p) {
            BatchEmbeddings e{p[0], p[1], p[2], p[3], lambdas, pairing};
            LossNode lb = simclr_bsim_loss(t, e, 0.2);
            LossNode ls = nt_xent_baseline(t, p[3], p[1], 0.2);
            return wbsim_combine(t, lb, ls, 0.7, 0.3).node;
        },
        {{"zm1", zm1}, {"zb", zb}, {"zm2", zm2}, {"zd", zd}});

    out["max"] = worst;
    out["tolerance"] = 1e-4;
    std::cout << out.dump() << std::endl;
    return worst < 1e-4 ? 0 : 2;
}

int cmd_equilibrium(double lambda, int64_t dim, uint64_t seed, double eta, int64_t max_iters,
                    double tol, const std::string& out_dir) {
    using namespace bsim;
    Rng rng = derive_rng(seed, "equilibrium_problem", 0);
    SphereProblem base = random_sphere_problem(dim, rng);
    SphereProblem p(base.z1, base.z2, lambda);
    fs::create_directories(out_dir);

    Trajectory t0 = projected_gd(p, ByolVariant::v0, eta, max_iters, tol, seed);
    Trajectory t1 = projected_gd(p, ByolVariant::v1, eta, max_iters, tol, seed);
    write_trajectory_csv((fs::path(out_dir) / "trajectory_v0.csv").string(), t0, p);
    write_trajectory_csv((fs::path(out_dir) / "trajectory_v1.csv").string(), t1, p);

    json out;
    out["s"] = gradient_scale(p);
    out["cosdist_v0"] = t0.final_cos_distance;
    out["cosdist_v1"] = t1.final_cos_distance;
    out["converged_v0"] = t0.converged;
    out["converged_v1"] = t1.converged;
    out["iters_v0"] = t0.iterates.size() - 1;
    out["iters_v1"] = t1.iterates.size() - 1;
    std::cout << out.dump() << std::endl;
    return (t0.converged && t1.converged) ? 0 : 2;
}

int cmd_datagen(const DatasetSpec& spec, const std::string& out_dir) {
    fs::create_directories(out_dir);
    bsim::LabeledImageSet train = bsim::synth_shapes(spec.classes, spec.per_class, 32, spec.seed);
    bsim::LabeledImageSet test =
        bsim::synth_shapes(spec.classes, spec.test_per_class, 32, spec.seed + 1);
    bsim::save_cifar_binary((fs::path(out_dir) / "train.bin").string(), train);
    bsim::save_cifar_binary((fs::path(out_dir) / "test.bin").string(), test);
    json meta;
    meta["classes"] = spec.classes;
    meta["per_class"] = spec.per_class;
    meta["test_per_class"] = spec.test_per_class;
    meta["size"] = 32;
    meta["seed"] = spec.seed;
    meta["class_names"] = train.class_names;
    write_text(fs::path(out_dir) / "meta.json", meta.dump(2) + "\n");
    std::cout << "{\"train\":" << train.size() << ",\"test\":" << test.size() << "}" << std::endl;
    return 0;
}

int cmd_export(const std::string& ckpt_path, const DatasetSpec& data_spec,
               const std::string& out_file) {
    bsim::Checkpoint cp = bsim::load_checkpoint(ckpt_path);
    bsim::ModelState model = bsim::model_from_checkpoint(cp);
    bsim::LabeledImageSet data = data_spec.train_set();
    bsim::export_embeddings(model, data, out_file);
    std::cout << "{\"rows\":" << data.size() << ",\"out\":\"" << out_file << "\"}" << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bsim: mixed-instance contrastive learning laboratory"};
    app.require_subcommand(1);

    auto* train_cmd = app.add_subcommand("train", "run self-supervised training");
    TrainFlags flags;
    flags.seed = env_seed_default();
    DatasetSpec train_data;
    std::string config_path, out_dir = "run";
    train_cmd->add_option("--config", config_path, "JSON config (keys mirror the flags)");
    train_cmd->add_option("--method", flags.method, "simclr|moco|byol");
    train_cmd->add_option("--mix", flags.mix, "cutmix|mixup|none");
    train_cmd->add_option("--alpha", flags.alpha, "Beta(alpha,alpha) mixing parameter");
    train_cmd->add_option("--temperature", flags.temperature, "softmax temperature");
    train_cmd->add_option("--w1", flags.w1, "weight on the mixed-pair loss");
    train_cmd->add_option("--w2", flags.w2, "weight on the single-instance loss");
    train_cmd->add_option("--batch", flags.batch, "batch size (even)");
    train_cmd->add_option("--epochs", flags.epochs, "training epochs");
    train_cmd->add_option("--lr", flags.lr, "peak learning rate");
    train_cmd->add_option("--momentum", flags.momentum, "SGD momentum");
    train_cmd->add_option("--weight-decay", flags.weight_decay, "SGD weight decay");
    train_cmd->add_option("--warmup-epochs", flags.warmup_epochs, "linear warmup epochs");
    train_cmd->add_option("--queue", flags.queue, "feature queue capacity (moco)");
    train_cmd->add_option("--tau-base", flags.tau_base, "EMA base momentum");
    train_cmd->add_option("--byol-variant", flags.variant, "v0|v1");
    train_cmd->add_option("--force-lambda", flags.force_lambda, "pin every mixing ratio");
    train_cmd->add_option("--seed", flags.seed, "run seed (BSIM_SEED env as fallback)");
    train_cmd->add_option("--out", out_dir, "output directory");
    add_dataset_flags(train_cmd, train_data);

    auto* eval_cmd = app.add_subcommand("eval", "frozen-feature probes on a checkpoint");
    std::string eval_ckpt, eval_features = "encoder";
    int64_t knn_k = 5;
    bsim::ProbeOptions probe;
    DatasetSpec eval_data;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--features", eval_features, "encoder|colorhist");
    eval_cmd->add_option("--knn-k", knn_k, "neighbors for the kNN probe");
    eval_cmd->add_option("--probe-lr", probe.lr, "probe learning rate");
    eval_cmd->add_option("--probe-iters", probe.iters, "probe iteration budget");
    eval_cmd->add_option("--probe-l2", probe.l2, "probe L2 penalty");
    add_dataset_flags(eval_cmd, eval_data);

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference checks for every loss");
    uint64_t grad_seed = env_seed_default();
    grad_cmd->add_option("--seed", grad_seed, "probe seed");

    auto* eq_cmd = app.add_subcommand("equilibrium", "verify the shared sphere minimizer");
    double eq_lambda = 0.5, eq_eta = 0.1, eq_tol = 1e-6;
    int64_t eq_dim = 16, eq_iters = 100000;
    uint64_t eq_seed = env_seed_default();
    std::string eq_out = "equilibrium_out";
    eq_cmd->add_option("--lambda", eq_lambda, "mixing ratio");
    eq_cmd->add_option("--dim", eq_dim, "embedding dimension");
    eq_cmd->add_option("--seed", eq_seed, "problem/init seed");
    eq_cmd->add_option("--eta", eq_eta, "step size");
    eq_cmd->add_option("--max-iters", eq_iters, "iteration cap");
    eq_cmd->add_option("--tol", eq_tol, "cosine-distance tolerance");
    eq_cmd->add_option("--out", eq_out, "output directory for trajectory CSVs");

    auto* data_cmd = app.add_subcommand("datagen", "write the synthetic benchmark as binaries");
    DatasetSpec gen_spec;
    std::string gen_out = "data";
    data_cmd->add_option("--classes", gen_spec.classes, "shape classes");
    data_cmd->add_option("--per-class", gen_spec.per_class, "training images per class");
    data_cmd->add_option("--test-per-class", gen_spec.test_per_class, "test images per class");
    data_cmd->add_option("--seed", gen_spec.seed, "dataset seed");
    data_cmd->add_option("--out", gen_out, "output directory");

    auto* exp_cmd = app.add_subcommand("export-embeddings", "dump encoder features as CSV");
    std::string exp_ckpt, exp_out = "embeddings.csv";
    DatasetSpec exp_data;
    exp_cmd->add_option("--checkpoint", exp_ckpt, "checkpoint file")->required();
    exp_cmd->add_option("--out", exp_out, "CSV path");
    add_dataset_flags(exp_cmd, exp_data);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
        app.exit(e);
        return 1;
    }

    try {
        if (*train_cmd) {
            bsim::TrainConfig cfg;
            cfg.seed = flags.seed;  // env fallback already folded in
            if (!config_path.empty()) apply_config_file(config_path, cfg, train_data);
            merge_flags(train_cmd, flags, cfg);
            return cmd_train(cfg, train_data, out_dir);
        }
        if (*eval_cmd) return cmd_eval(eval_ckpt, eval_data, eval_features, knn_k, probe);
        if (*grad_cmd) return cmd_gradcheck(grad_seed);
        if (*eq_cmd)
            return cmd_equilibrium(eq_lambda, eq_dim, eq_seed, eq_eta, eq_iters, eq_tol, eq_out);
        if (*data_cmd) return cmd_datagen(gen_spec, gen_out);
        if (*exp_cmd) return cmd_export(exp_ckpt, exp_data, exp_out);
    } catch (const bsim::ValidationError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 1;
}
