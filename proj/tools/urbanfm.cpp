// Command-line front end: dataset generation, training, inference,
// evaluation, method comparison and gradient self-checks.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "urbanfm/checkpoint.hpp"
#include "urbanfm/inferencers.hpp"
#include "urbanfm/nn/grad_check.hpp"
#include "urbanfm/nn/init.hpp"
#include "urbanfm/runtime.hpp"
#include "urbanfm/train.hpp"

namespace fs = std::filesystem;
using namespace urbanfm;

namespace {

// "WxH" geometry string -> (width, height).
std::pair<int, int> parse_geometry(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos || x == 0 || x + 1 >= s.size())
        throw ConfigError("geometry must be WxH, e.g. 16x16 (got '" + s + "')");
    try {
        const int w = std::stoi(s.substr(0, x));
        const int h = std::stoi(s.substr(x + 1));
        if (w < 1 || h < 1) throw ConfigError("geometry dimensions must be >= 1");
        return {w, h};
    } catch (const std::invalid_argument&) {
        throw ConfigError("geometry must be WxH, e.g. 16x16 (got '" + s + "')");
    } catch (const std::out_of_range&) {
        throw ConfigError("geometry out of range: '" + s + "'");
    }
}

std::vector<std::string> split_csv_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

double scaler_from(const nlohmann::json& extra, const char* key, double fallback) {
    if (extra.contains(key)) return extra.at(key).get<double>();
    return fallback;
}

int cmd_generate(unsigned seed, const std::string& coarse, int scale, int steps, bool stationary,
                 double noise, const std::string& out) {
    auto [w, h] = parse_geometry(coarse);
    SynthConfig cfg;
    cfg.coarse_w = w;
    cfg.coarse_h = h;
    cfg.scale = scale;
    cfg.steps = steps;
    cfg.seed = seed;
    cfg.noise = noise;
    cfg.stationary = stationary;
    auto gen = synth_generate(cfg);
    Dataset d = split_filter(std::move(gen.samples), gen.manifest);
    write_dataset(d, out);
    std::cout << "wrote dataset '" << out << "': train=" << d.train.size()
              << " valid=" << d.valid.size() << " test=" << d.test.size()
              << " coarse=" << d.manifest.J << "x" << d.manifest.I << " scale=" << d.manifest.N
              << " coarse_scaler=" << d.manifest.coarse_scaler
              << " fine_scaler=" << d.manifest.fine_scaler << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& variant, int m, int f, int epochs,
              double lr, int batch, unsigned seed, double lambda, const std::string& out) {
    Dataset d = read_dataset(data);
    UrbanFMConfig mcfg;
    mcfg.M = m;
    mcfg.F = f;
    mcfg.N = d.manifest.N;
    mcfg.I = d.manifest.I;
    mcfg.J = d.manifest.J;
    mcfg.variant = variant_from_name(variant);
    if (mcfg.variant != Variant::NoExternal) mcfg.external = d.manifest.external_schema;
    auto model = UrbanFMModel::build(mcfg, seed);

    TrainConfig tcfg;
    tcfg.epochs = epochs;
    tcfg.batch = batch;
    tcfg.lr = lr;
    tcfg.seed = seed;
    tcfg.lambda = lambda;
    tcfg.coarse_scaler = d.manifest.coarse_scaler;
    tcfg.fine_scaler = d.manifest.fine_scaler;
    tcfg.out_dir = out;
    TrainHistory h = train_loop(model, d.train, d.valid, tcfg);
    std::cout << "trained " << variant << " (M=" << m << ", F=" << f << ", "
              << model.param_count() << " params) for " << epochs
              << " epochs; best val rmse " << h.best_val_rmse << " at epoch " << h.best_epoch
              << "; artifacts in '" << out << "'\n";
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& input, const std::string& externals,
              const std::string& out) {
    LoadedCheckpoint lc = load_checkpoint(ckpt);
    auto coarse = read_flow_stack(input);
    std::vector<ExternalRecord> records;
    if (lc.model.cfg.has_external()) {
        if (externals.empty())
            throw ConfigError("this checkpoint needs --externals (its variant fuses them)");
        records = read_externals_csv(externals);
        if (records.size() != coarse.size())
            throw DomainError("got " + std::to_string(coarse.size()) + " coarse maps but " +
                              std::to_string(records.size()) + " external records");
    }
    const double cs = scaler_from(lc.extra, "coarse_scaler", 1500.0);
    const double fsc = scaler_from(lc.extra, "fine_scaler", 100.0);
    auto res = lc.model.infer(coarse, lc.model.cfg.has_external() ? &records : nullptr, cs, fsc);

    fs::create_directories(out);
    write_flow_stack((fs::path(out) / "fine.txt").string(), res.fine);
    if (!res.dist.empty()) {
        std::vector<FlowMap> dist_maps;
        for (const auto& d : res.dist)
            dist_maps.push_back(FlowMap(d.height, d.width, d.values));
        write_flow_stack((fs::path(out) / "dist.txt").string(), dist_maps);
    }
    std::cout << "inferred " << res.fine.size() << " fine maps (" << res.fine[0].width << "x"
              << res.fine[0].height << ") into '" << out << "'\n";
    return 0;
}

// Shared by evaluate and compare: run one method over the test split and
// write report.txt / report.kv (plus optional error grids) under dir.
MetricsReport run_method(Inferencer& inf, const Dataset& d, const std::string& dir,
                         bool dump_errors) {
    MetricsReport r = evaluate(inf, d.test, d.manifest.N);
    fs::create_directories(dir);
    std::ofstream((fs::path(dir) / "report.txt").string()) << format_report(r, inf.name());
    write_report_kv((fs::path(dir) / "report.kv").string(), r, inf.name());
    if (dump_errors) {
        std::vector<FlowMap> preds, targets;
        for (size_t i = 0; i < d.test.size(); ++i) {
            std::vector<Sample> one = {d.test[i]};
            preds.push_back(inf.infer_batch(one)[0]);
            targets.push_back(d.test[i].fine);
        }
        write_error_grids((fs::path(dir) / "errors.txt").string(), preds, targets);
    }
    return r;
}

std::unique_ptr<Inferencer> make_baseline(const std::string& name, const Dataset& d) {
    if (name == "mean") return std::make_unique<MeanInferencer>(d.manifest.N);
    if (name == "ha") {
        std::vector<FlowMap> train_fine;
        for (const auto& s : d.train) train_fine.push_back(s.fine);
        return std::make_unique<HAInferencer>(ha_fit(train_fine, ScaleFactor(d.manifest.N)));
    }
    throw ConfigError("unknown baseline '" + name + "' (expected mean|ha)");
}

int cmd_evaluate(const std::string& data, const std::string& ckpt, const std::string& baseline,
                 const std::string& out, bool dump_errors) {
    if (ckpt.empty() == baseline.empty())
        throw ConfigError("evaluate needs exactly one of --ckpt or --baseline");
    Dataset d = read_dataset(data);
    MetricsReport r;
    std::string method;
    if (!ckpt.empty()) {
        LoadedCheckpoint lc = load_checkpoint(ckpt);
        ModelInferencer inf(lc.model, scaler_from(lc.extra, "coarse_scaler", 1500.0),
                            scaler_from(lc.extra, "fine_scaler", 100.0));
        method = inf.name();
        r = run_method(inf, d, out, dump_errors);
    } else {
        auto inf = make_baseline(baseline, d);
        method = inf->name();
        r = run_method(*inf, d, out, dump_errors);
    }
    std::cout << format_report(r, method);
    return 0;
}

int cmd_compare(const std::string& data, const std::string& ckpt, const std::string& baselines,
                const std::string& out) {
    Dataset d = read_dataset(data);
    struct Row {
        std::string method;
        MetricsReport r;
    };
    std::vector<Row> rows;
    if (!ckpt.empty()) {
        LoadedCheckpoint lc = load_checkpoint(ckpt);
        ModelInferencer inf(lc.model, scaler_from(lc.extra, "coarse_scaler", 1500.0),
                            scaler_from(lc.extra, "fine_scaler", 100.0));
        rows.push_back({inf.name(), run_method(inf, d, (fs::path(out) / inf.name()).string(),
                                               /*dump_errors=*/false)});
    }
    for (const auto& b : split_csv_list(baselines)) {
        auto inf = make_baseline(b, d);
        rows.push_back({inf->name(), run_method(*inf, d, (fs::path(out) / inf->name()).string(),
                                                /*dump_errors=*/false)});
    }
    if (rows.empty()) throw ConfigError("compare needs --ckpt and/or --baselines");

    std::ostringstream table;
    table << "method rmse mae mape structural_residual\n";
    for (const auto& row : rows) {
        table << row.method << ' ' << row.r.rmse << ' ' << row.r.mae << ' ';
        if (row.r.mape_defined)
            table << row.r.mape;
        else
            table << "undefined";
        table << ' ' << row.r.structural_residual << '\n';
    }
    fs::create_directories(out);
    std::ofstream((fs::path(out) / "summary.txt").string()) << table.str();
    std::cout << table.str();
    return 0;
}

int cmd_gradcheck(unsigned seed) {
    using nn::TensorD;
    std::mt19937 rng(seed);
    auto rnd = [&](std::vector<int> shape, double lo, double hi) {
        TensorD t(shape);
        nn::init_uniform(t, lo, hi, rng);
        return t;
    };
    auto reduce = [](const TensorD& x) {
        TensorD target(x.shape(), 0.25);
        return nn::mse_loss(x, target);
    };

    struct Probe {
        std::string name;
        double err;
    };
    std::vector<Probe> probes;
    {
        auto x = rnd({2, 2, 4, 4}, -1, 1);
        auto w = rnd({3, 2, 3, 3}, -1, 1);
        auto b = rnd({3}, -1, 1);
        probes.push_back({"conv2d", nn::grad_check(
                                        [&](std::vector<TensorD>& l) {
                                            return reduce(nn::conv2d(l[0], l[1], l[2]));
                                        },
                                        {x, w, b})});
    }
    {
        auto x = rnd({3, 2, 2, 2}, -1, 1);
        auto g = rnd({2}, 0.5, 1.5);
        auto b = rnd({2}, -1, 1);
        probes.push_back({"batch_norm2d", nn::grad_check(
                                              [&](std::vector<TensorD>& l) {
                                                  nn::BatchNormState<double> st;
                                                  st.running_mean.assign(2, 0.0);
                                                  st.running_var.assign(2, 1.0);
                                                  return reduce(nn::batch_norm2d(
                                                      l[0], l[1], l[2], st, true));
                                              },
                                              {x, g, b})});
    }
    {
        auto x = rnd({2, 8, 2, 2}, -1, 1);
        probes.push_back({"pixel_shuffle", nn::grad_check(
                                               [&](std::vector<TensorD>& l) {
                                                   return reduce(nn::pixel_shuffle(l[0], 2));
                                               },
                                               {x})});
    }
    {
        auto x = rnd({3, 4}, -1, 1);
        auto w = rnd({5, 4}, -1, 1);
        auto b = rnd({5}, -1, 1);
        probes.push_back({"dense", nn::grad_check(
                                       [&](std::vector<TensorD>& l) {
                                           return reduce(nn::dense(l[0], l[1], l[2]));
                                       },
                                       {x, w, b})});
    }
    {
        auto x = rnd({2, 1, 4, 4}, 0.3, 2.0);
        probes.push_back({"block_normalize", nn::grad_check(
                                                 [&](std::vector<TensorD>& l) {
                                                     return reduce(
                                                         nn::block_normalize(l[0], 2, 1e-7));
                                                 },
                                                 {x})});
    }
    {
        auto t = rnd({4, 3}, -1, 1);
        probes.push_back({"embedding_lookup", nn::grad_check(
                                                  [&](std::vector<TensorD>& l) {
                                                      return reduce(nn::embedding_lookup(
                                                          l[0], {1, 3, 1}, "probe"));
                                                  },
                                                  {t})});
    }

    bool ok = true;
    for (const auto& p : probes) {
        const bool pass = p.err <= 1e-4;
        ok = ok && pass;
        std::cout << p.name << ": max relative error " << p.err << (pass ? " (ok)" : " (FAIL)")
                  << "\n";
    }
    if (!ok) throw DomainError("gradient check failed (see per-op errors above)");
    std::cout << "all gradient checks passed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    tune_process_for_compute(argv);
    CLI::App app{"Fine-grained urban flow inference toolkit"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "Create a synthetic dataset directory");
    unsigned g_seed = 0;
    std::string g_coarse = "16x16", g_out;
    int g_scale = 2, g_steps = 600;
    bool g_stationary = false;
    double g_noise = 0.05;
    gen->add_option("--seed", g_seed, "RNG seed");
    gen->add_option("--coarse", g_coarse, "Coarse grid geometry WxH")->capture_default_str();
    gen->add_option("--scale", g_scale, "Upscaling factor N")->capture_default_str();
    gen->add_option("--steps", g_steps, "Number of hourly steps")->capture_default_str();
    gen->add_flag("--stationary", g_stationary, "Time-invariant allocation weights");
    gen->add_option("--noise", g_noise, "Multiplicative noise level")->capture_default_str();
    gen->add_option("--out", g_out, "Output dataset directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
    std::string t_data, t_variant = "full", t_out;
    int t_m = 16, t_f = 128, t_epochs = 200, t_batch = 16;
    double t_lr = 1e-4, t_lambda = 1.0;
    unsigned t_seed = 0;
    tr->add_option("--data", t_data, "Dataset directory")->required();
    tr->add_option("--variant", t_variant, "Model variant")
        ->check(CLI::IsMember({"full", "ne", "sl"}))
        ->capture_default_str();
    tr->add_option("--m", t_m, "Residual blocks")->capture_default_str();
    tr->add_option("--f", t_f, "Filters per conv")->capture_default_str();
    tr->add_option("--epochs", t_epochs, "Training epochs")->capture_default_str();
    tr->add_option("--lr", t_lr, "Base learning rate")->capture_default_str();
    tr->add_option("--batch", t_batch, "Mini-batch size")->capture_default_str();
    tr->add_option("--seed", t_seed, "RNG seed (init + shuffling + dropout)");
    tr->add_option("--lambda", t_lambda, "Structural loss weight (variant sl)")
        ->capture_default_str();
    tr->add_option("--out", t_out, "Output run directory")->required();

    // infer
    auto* in = app.add_subcommand("infer", "Run a checkpoint over coarse flow maps");
    std::string i_ckpt, i_input, i_ext, i_out;
    in->add_option("--ckpt", i_ckpt, "Checkpoint file")->required();
    in->add_option("--input", i_input, "Coarse flow-map stack (grid text)")->required();
    in->add_option("--externals", i_ext, "External records CSV (variants that fuse them)");
    in->add_option("--out", i_out, "Output directory")->required();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Evaluate one method on a dataset's test split");
    std::string e_data, e_ckpt, e_baseline, e_out;
    bool e_dump = false;
    ev->add_option("--data", e_data, "Dataset directory")->required();
    ev->add_option("--ckpt", e_ckpt, "Checkpoint file");
    ev->add_option("--baseline", e_baseline, "Baseline method")
        ->check(CLI::IsMember({"mean", "ha"}));
    ev->add_option("--out", e_out, "Output report directory")->required();
    ev->add_flag("--dump-errors", e_dump, "Also write per-cell absolute error grids");

    // compare
    auto* cp = app.add_subcommand("compare", "Evaluate a checkpoint against baselines");
    std::string c_data, c_ckpt, c_baselines, c_out;
    cp->add_option("--data", c_data, "Dataset directory")->required();
    cp->add_option("--ckpt", c_ckpt, "Checkpoint file");
    cp->add_option("--baselines", c_baselines, "Comma-separated baselines (mean,ha)");
    cp->add_option("--out", c_out, "Output report directory")->required();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient self-check");
    unsigned gc_seed = 0;
    gc->add_option("--seed", gc_seed, "RNG seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*gen)
            return cmd_generate(g_seed, g_coarse, g_scale, g_steps, g_stationary, g_noise, g_out);
        if (*tr)
            return cmd_train(t_data, t_variant, t_m, t_f, t_epochs, t_lr, t_batch, t_seed,
                             t_lambda, t_out);
        if (*in) return cmd_infer(i_ckpt, i_input, i_ext, i_out);
        if (*ev) return cmd_evaluate(e_data, e_ckpt, e_baseline, e_out, e_dump);
        if (*cp) return cmd_compare(c_data, c_ckpt, c_baselines, c_out);
        if (*gc) return cmd_gradcheck(gc_seed);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
