// s4cf: simulate cohorts, train and evaluate deep S4 models, run sweeps and
// ablations, and render plots.
#include "s4cf/experiment.hpp"
#include "s4cf/report.hpp"
#include "s4cf/util.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>

namespace ex = s4cf::experiment;
namespace fs = std::filesystem;

namespace {

struct SimFlags {
    int n = 0;
    double gamma_c = 0, gamma_r = 0, kappa = 1, horizon = 60, dt = 0.25;
    std::uint64_t seed = 0;
    std::string config_file;
    std::string out;
};

struct TrainFlags {
    std::optional<int> epochs, batch_size, layers, hidden, state, max_len;
    int max_steps = 0;
    std::optional<double> lr_ssm, lr_other;
    double mu = 0.5;
    std::uint64_t seed = 0;
    std::int64_t model_seed = -1;
    std::string adversarial = "reversal", target = "any", activation = "gelu_tanh";
    bool no_timing = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--epochs", f.epochs, "Training epochs (desk 10, full 50)");
    cmd->add_option("--batch-size", f.batch_size, "Patients per batch");
    cmd->add_option("--lr-ssm", f.lr_ssm, "Learning rate for lambda, P, Q, B, C");
    cmd->add_option("--lr-other", f.lr_other, "Learning rate for every other parameter");
    cmd->add_option("--mu", f.mu, "Treatment-loss trade-off weight")->capture_default_str();
    cmd->add_option("--seed", f.seed, "Shuffling and window seed")->capture_default_str();
    cmd->add_option("--model-seed", f.model_seed, "Initialization seed (default: --seed)");
    cmd->add_option("--layers", f.layers, "S4 layers");
    cmd->add_option("--hidden", f.hidden, "Latent width H");
    cmd->add_option("--state", f.state, "State size N per channel");
    cmd->add_option("--max-len", f.max_len, "Training window length, 0 for whole sequences");
    cmd->add_option("--max-steps", f.max_steps, "Stop after this many optimizer steps (0: no cap)");
    cmd->add_option("--adversarial", f.adversarial, "reversal | literal")->capture_default_str();
    cmd->add_option("--treatment-target", f.target, "any | chemo | radio")->capture_default_str();
    cmd->add_option("--activation", f.activation, "gelu_tanh | tanh | relu | identity")->capture_default_str();
    cmd->add_flag("--no-timing", f.no_timing, "Write wall_seconds as 0 (byte-reproducible output)");
}

ex::RunOptions run_options(const TrainFlags& f, const ex::Profile& p) {
    ex::RunOptions o;
    o.model = p.model_config();
    o.train = p.train_config();
    if (f.epochs) o.train.epochs = *f.epochs;
    if (f.batch_size) o.train.batch_size = *f.batch_size;
    if (f.lr_ssm) o.train.lr_ssm = *f.lr_ssm;
    if (f.lr_other) o.train.lr_other = *f.lr_other;
    if (f.max_len) o.train.max_len = *f.max_len;
    o.train.max_steps = f.max_steps;
    o.train.mu = f.mu;
    o.train.seed = f.seed;
    o.train.record_timing = !f.no_timing;
    try {
        o.train.adversarial = s4cf::nn::adversarial_mode_from_string(f.adversarial);
        o.train.target = s4cf::train::treatment_target_from_string(f.target);
        o.model.activation = s4cf::nn::activation_from_string(f.activation);
    } catch (const std::invalid_argument& e) {
        throw ex::ValidationError(e.what());
    }
    if (f.layers) o.model.layers = *f.layers;
    if (f.hidden) o.model.hidden = *f.hidden;
    if (f.state) o.model.state = *f.state;
    o.model_seed = f.model_seed >= 0 ? static_cast<std::uint64_t>(f.model_seed) : f.seed;
    try {
        o.model.validate();
        o.train.validate();
    } catch (const std::invalid_argument& e) {
        throw ex::ValidationError(e.what());
    }
    return o;
}

fs::path existing_dir(const std::string& path, const char* what) {
    if (path.empty()) throw ex::ValidationError(std::string("--") + what + " is required");
    const fs::path p(path);
    if (!fs::is_directory(p)) throw ex::ValidationError(std::string(what) + " directory not found: " + path);
    return p;
}

int cmd_simulate(const SimFlags& f, bool n_given, bool full) {
    s4cf::sim::SimConfig c;
    if (!f.config_file.empty()) {
        try {
            c = s4cf::sim::SimConfig::from_json(nlohmann::json::parse(s4cf::read_file(f.config_file)));
        } catch (const std::exception& e) {
            throw ex::ValidationError("config file: " + std::string(e.what()));
        }
    }
    c.n = n_given ? f.n : (full ? ex::Profile::full().n : ex::Profile::desk().n);
    c.gamma_c = f.gamma_c;
    c.gamma_r = f.gamma_r;
    c.kappa = f.kappa;
    c.horizon = f.horizon;
    c.dt_sim = f.dt;
    c.seed = f.seed;
    const fs::path out = ex::resolve_output(f.out, "data");
    const auto r = ex::simulate_to_dir(c, out);
    std::cout << nlohmann::json({{"out", out.string()},
                                 {"train", r.sizes[0]},
                                 {"val", r.sizes[1]},
                                 {"test", r.sizes[2]},
                                 {"config_hash", r.config_hash}})
                     .dump()
              << "\n";
    return ex::kExitOk;
}

int cmd_train(const std::string& data, const std::string& out_flag, const TrainFlags& f, bool full) {
    const auto splits = ex::load_splits(existing_dir(data, "data"));
    const auto opts = run_options(f, full ? ex::Profile::full() : ex::Profile::desk());
    const fs::path out = ex::resolve_output(out_flag, "train");
    const auto r = ex::train_run(splits, opts, out);
    std::cout << r.history.back().to_json().dump() << "\n";
    return ex::kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& split,
             const std::string& mode, const std::vector<std::string>& predictors, const std::string& out_flag) {
    const auto splits = ex::load_splits(existing_dir(data, "data"));
    const s4cf::sim::Dataset* ds = nullptr;
    try {
        switch (s4cf::sim::split_from_string(split)) {
            case s4cf::sim::Split::train: ds = &splits.train; break;
            case s4cf::sim::Split::val: ds = &splits.val; break;
            case s4cf::sim::Split::test: ds = &splits.test; break;
        }
    } catch (const std::invalid_argument& e) {
        throw ex::ValidationError(e.what());
    }
    if (ds->empty()) throw ex::ValidationError("split '" + split + "' is empty");
    s4cf::train::EvalOptions eo;
    try {
        eo.mode = s4cf::train::eval_mode_from_string(mode);
    } catch (const std::invalid_argument& e) {
        throw ex::ValidationError(e.what());
    }

    std::optional<s4cf::nn::DeepS4Model> model;
    std::vector<ex::PredictorKind> kinds;
    for (const auto& p : predictors) kinds.push_back(ex::predictor_kind_from_string(p));
    for (auto k : kinds) {
        if (k != ex::PredictorKind::model || model) continue;
        if (checkpoint.empty()) throw ex::ValidationError("--checkpoint is required for the model predictor");
        if (!fs::exists(checkpoint)) throw ex::ValidationError("checkpoint not found: " + checkpoint);
        model = s4cf::nn::load_checkpoint(checkpoint);
        eo.mu = model->config().mu;
    }

    std::string csv = std::string(ex::kEvalHeader) + "\n";
    nlohmann::json results = nlohmann::json::array();
    for (auto k : kinds) {
        s4cf::train::Predictor pred;
        switch (k) {
            case ex::PredictorKind::model: pred = s4cf::train::model_predictor(*model); break;
            case ex::PredictorKind::lvcf: pred = s4cf::train::lvcf_predictor(); break;
            case ex::PredictorKind::mean: pred = s4cf::train::mean_predictor(); break;
            case ex::PredictorKind::oracle: pred = s4cf::train::oracle_predictor(); break;
        }
        const auto r = s4cf::train::evaluate(pred, *ds, eo);
        csv += ex::eval_csv_row(ex::to_string(k), split, r, eo.mode);
        auto j = r.to_json();
        j.erase("epoch");
        j.erase("wall_seconds");
        j["predictor"] = ex::to_string(k);
        results.push_back(j);
    }
    const fs::path out = ex::resolve_output(out_flag, "eval/eval.csv");
    s4cf::atomic_write(out, csv);
    std::cout << nlohmann::json({{"split", split}, {"mode", mode}, {"results", results}}).dump() << "\n";
    return ex::kExitOk;
}

int cmd_sweep(const std::string& spec_file, const std::string& out_flag, int jobs, bool no_timing, bool full) {
    if (spec_file.empty() || !fs::exists(spec_file)) throw ex::ValidationError("spec file not found: " + spec_file);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(s4cf::read_file(spec_file));
    } catch (const nlohmann::json::exception& e) {
        throw ex::ValidationError("spec file: " + std::string(e.what()));
    }
    auto spec = ex::ExperimentSpec::from_json(j, full ? ex::Profile::full() : ex::Profile::desk());
    if (no_timing) spec.train.record_timing = false;
    const fs::path out = ex::resolve_output(out_flag.empty() ? spec.output_dir : out_flag, "sweep");
    const auto s = ex::run_sweep(spec, out, jobs, &std::cerr);
    std::cout << nlohmann::json({{"out", out.string()},
                                 {"cells", s.rows.size()},
                                 {"computed", s.computed},
                                 {"skipped", s.skipped},
                                 {"failed", s.failed}})
                     .dump()
              << "\n";
    return ex::kExitOk;
}

int cmd_ablate(const std::string& axis_flag, const std::vector<int>& values, const std::string& data,
               const std::string& out_flag, const TrainFlags& f, bool full) {
    const auto axis = ex::ablation_axis_from_string(axis_flag);
    const auto splits = ex::load_splits(existing_dir(data, "data"));
    const auto opts = run_options(f, full ? ex::Profile::full() : ex::Profile::desk());
    const fs::path out = ex::resolve_output(out_flag, "ablate");
    const auto rows = ex::run_ablation(splits, axis, values, opts, out, &std::cerr);
    std::cout << ex::ablation_csv(rows);
    return ex::kExitOk;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out_flag, bool linear,
               const std::string& metric) {
    if (dirs.empty()) throw ex::ValidationError("at least one run directory is required");
    std::vector<fs::path> in(dirs.begin(), dirs.end());
    const fs::path out = ex::resolve_output(out_flag, "report");
    const auto r = ex::make_report(in, out, !linear, metric, &std::cerr);
    std::cout << nlohmann::json({{"runs", r.runs},
                                 {"loss_curves", r.loss_svg.string()},
                                 {"rmse_bars", r.bars_svg.string()}})
                     .dump()
              << "\n";
    return r.runs == 0 ? ex::kExitValidation : ex::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep S4 counterfactual outcome models on simulated tumor cohorts"};
    app.require_subcommand(1);
    bool full = false;
    app.add_flag("--full-scale", full, "Use the full sizes (n = 10000, H = 128, 50 epochs)");

    SimFlags sf;
    auto* sim = app.add_subcommand("simulate", "Generate train/val/test JSONL files and a manifest");
    auto* n_opt = sim->add_option("--n", sf.n, "Patients (desk 500)");
    sim->add_option("--gamma-c", sf.gamma_c, "Chemotherapy confounding strength")->capture_default_str();
    sim->add_option("--gamma-r", sf.gamma_r, "Radiotherapy confounding strength")->capture_default_str();
    sim->add_option("--kappa", sf.kappa, "Stage-dependent sampling intensity")->capture_default_str();
    sim->add_option("--horizon", sf.horizon, "Days")->capture_default_str();
    sim->add_option("--dt", sf.dt, "Latent integration step in days")->capture_default_str();
    sim->add_option("--seed", sf.seed)->capture_default_str();
    sim->add_option("--config", sf.config_file, "JSON file with simulator constants");
    sim->add_option("--out", sf.out, "Output directory");
    sim->add_flag("--full-scale", full);

    TrainFlags tf;
    std::string data, out;
    auto* trn = app.add_subcommand("train", "Train a model; write history.csv and checkpoints");
    trn->add_option("--data", data, "Directory written by simulate")->required();
    trn->add_option("--out", out, "Run directory");
    add_train_flags(trn, tf);
    trn->add_flag("--full-scale", full);

    std::string checkpoint, split = "test", mode = "factual";
    std::vector<std::string> predictors{"model"};
    auto* ev = app.add_subcommand("eval", "Score a checkpoint or a baseline");
    ev->add_option("--checkpoint", checkpoint, "checkpoint.json from a training run");
    ev->add_option("--data", data, "Directory written by simulate")->required();
    ev->add_option("--split", split, "train | val | test")->capture_default_str();
    ev->add_option("--mode", mode, "factual | counterfactual")->capture_default_str();
    ev->add_option("--predictor", predictors, "model | lvcf | mean | oracle (repeatable)")->delimiter(',');
    ev->add_option("--out", out, "CSV file");

    std::string spec_file;
    int jobs = 1;
    bool sweep_no_timing = false;
    auto* sw = app.add_subcommand("sweep", "Run a kappa x gamma x seed grid from a JSON spec");
    sw->add_option("--spec", spec_file, "Experiment spec (JSON)")->required();
    sw->add_option("--out", out, "Sweep directory (overrides output_dir in the sweep file)");
    sw->add_option("--jobs", jobs, "Runs in parallel")->capture_default_str();
    sw->add_flag("--no-timing", sweep_no_timing, "Write wall_seconds as 0");
    sw->add_flag("--full-scale", full);

    std::string axis;
    std::vector<int> values;
    TrainFlags af;
    auto* ab = app.add_subcommand("ablate", "Vary layer count or latent width");
    ab->add_option("--axis", axis, "layers | latent")->required();
    ab->add_option("--values", values, "Comma-separated settings")->delimiter(',')->required();
    ab->add_option("--data", data, "Directory written by simulate")->required();
    ab->add_option("--out", out, "Ablation directory");
    add_train_flags(ab, af);
    ab->add_flag("--full-scale", full);

    std::vector<std::string> dirs;
    bool linear = false;
    std::string metric = "loss_sum";
    auto* rep = app.add_subcommand("report", "Plot loss curves and treated/untreated RMSE");
    rep->add_option("dirs", dirs, "Run or sweep directories")->required();
    rep->add_option("--out", out, "Directory for the SVG files");
    rep->add_flag("--linear", linear, "Linear y axis (default is log)");
    rep->add_option("--metric", metric, "loss_sum | loss_total | loss_y | loss_a | nrmse")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return ex::kExitValidation;
    }

    try {
        if (*sim) return cmd_simulate(sf, n_opt->count() > 0, full);
        if (*trn) return cmd_train(data, out, tf, full);
        if (*ev) return cmd_eval(checkpoint, data, split, mode, predictors, out);
        if (*sw) return cmd_sweep(spec_file, out, jobs, sweep_no_timing, full);
        if (*ab) return cmd_ablate(axis, values, data, out, af, full);
        if (*rep) return cmd_report(dirs, out, linear, metric);
    } catch (const ex::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return ex::kExitValidation;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return ex::kExitValidation;
    } catch (const s4cf::train::NonFiniteLossError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return ex::kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return ex::kExitRuntime;
    }
    return ex::kExitValidation;
}
