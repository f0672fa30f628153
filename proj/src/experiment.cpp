#include "s4cf/experiment.hpp"

#include "s4cf/report.hpp"
#include "s4cf/util.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <thread>

namespace s4cf::experiment {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
double number_or_nan(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return kNaN;
    return j.at(key).get<double>();
}

nlohmann::json model_json(const nn::ModelConfig& m) {
    return {{"layers", m.layers},
            {"hidden", m.hidden},
            {"state", m.state},
            {"features", m.features},
            {"activation", nn::to_string(m.activation)}};
}

std::string run_label(double kappa, double gamma) { return format_double(kappa) + "-" + format_double(gamma); }

}  // namespace

Profile Profile::desk() { return Profile{}; }

Profile Profile::full() {
    Profile p;
    p.n = 10000;
    p.hidden = 128;
    p.epochs = 50;
    p.max_len = 0;
    p.lr_ssm = 5e-4;
    p.lr_other = 2e-5;
    return p;
}

nn::ModelConfig Profile::model_config() const {
    nn::ModelConfig m;
    m.layers = layers;
    m.hidden = hidden;
    m.state = state;
    m.features = train::kFeatureWidth;
    return m;
}

train::TrainConfig Profile::train_config() const {
    train::TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.max_len = max_len;
    t.lr_ssm = lr_ssm;
    t.lr_other = lr_other;
    return t;
}

fs::path output_root() {
    const char* env = std::getenv(kOutputRootEnv);
    return (env && *env) ? fs::path(env) : fs::path("runs");
}

fs::path resolve_output(const std::string& path, const std::string& fallback) {
    if (path.empty()) return output_root() / fallback;
    const fs::path p(path);
    const char* env = std::getenv(kOutputRootEnv);
    return (p.is_absolute() || !env || !*env) ? p : fs::path(env) / p;
}

std::string config_hash(const nlohmann::json& config) { return hex64(fnv1a64(config.dump())); }

SimulateResult simulate_to_dir(const sim::SimConfig& config, const fs::path& out) {
    try {
        config.validate();
    } catch (const std::invalid_argument& e) {
        throw ValidationError(e.what());
    }
    const sim::DatasetSplits splits = sim::generate_dataset(config);
    SimulateResult r;
    r.config_hash = config_hash(config.to_json());
    nlohmann::json files = nlohmann::json::object();
    const std::pair<const char*, const sim::Dataset*> parts[] = {
        {"train", &splits.train}, {"val", &splits.val}, {"test", &splits.test}};
    std::size_t i = 0;
    for (const auto& [name, d] : parts) {
        const std::string body = sim::serialize_jsonl(*d);
        const std::string file = std::string(name) + ".jsonl";
        atomic_write(out / file, body);
        files[name] = {{"path", file}, {"patients", d->size()}, {"fnv1a64", hex64(fnv1a64(body))}};
        r.sizes[i++] = d->size();
    }
    const nlohmann::json manifest = {
        {"schema_version", sim::kSchemaVersion},
        {"config", config.to_json()},
        {"config_hash", r.config_hash},
        {"files", files},
    };
    atomic_write(out / "manifest.json", manifest.dump(2) + "\n");
    return r;
}

sim::DatasetSplits load_splits(const fs::path& dir) {
    sim::DatasetSplits s;
    sim::Dataset* parts[] = {&s.train, &s.val, &s.test};
    const char* names[] = {"train", "val", "test"};
    for (int i = 0; i < 3; ++i) {
        const fs::path p = dir / (std::string(names[i]) + ".jsonl");
        if (!fs::exists(p)) throw ValidationError("missing dataset file " + p.string());
        *parts[i] = sim::read_jsonl(p.string());
    }
    if (s.train.empty()) throw ValidationError("training split in " + dir.string() + " is empty");
    return s;
}

RunResult train_run(const sim::DatasetSplits& data, const RunOptions& options, const fs::path& out) {
    nn::ModelConfig mc = options.model;
    mc.features = train::kFeatureWidth;
    train::TrainConfig tc = options.train;
    try {
        mc.validate();
        tc.validate();
    } catch (const std::invalid_argument& e) {
        throw ValidationError(e.what());
    }
    fs::create_directories(out);
    tc.checkpoint_path = (out / "checkpoint.json").string();
    tc.history_path = (out / "history.csv").string();

    nn::DeepS4Model model(mc, options.model_seed);
    RunResult r;
    r.history = train::train(model, data.train, data.val, tc);

    const sim::Dataset& scored = !data.test.empty() ? data.test : (!data.val.empty() ? data.val : data.train);
    train::EvalOptions eo;
    eo.mu = tc.mu;
    eo.target = tc.target;
    r.test = train::evaluate(model, scored, eo);

    const auto& sc = data.train.config;
    nlohmann::json run = {
        {"label", run_label(sc.kappa, sc.gamma_c)},
        {"kappa", sc.kappa},
        {"gamma_c", sc.gamma_c},
        {"gamma_r", sc.gamma_r},
        {"data_seed", sc.seed},
        {"model_seed", options.model_seed},
        {"model", model_json(mc)},
        {"train", tc.to_json()},
        {"final", r.history.back().to_json()},
        {"test", r.test.to_json()},
    };
    atomic_write(out / "run.json", run.dump(2) + "\n");
    return r;
}

std::string to_string(PredictorKind k) {
    switch (k) {
        case PredictorKind::model: return "model";
        case PredictorKind::lvcf: return "lvcf";
        case PredictorKind::mean: return "mean";
        case PredictorKind::oracle: return "oracle";
    }
    return "model";
}

PredictorKind predictor_kind_from_string(const std::string& s) {
    if (s == "model") return PredictorKind::model;
    if (s == "lvcf") return PredictorKind::lvcf;
    if (s == "mean") return PredictorKind::mean;
    if (s == "oracle") return PredictorKind::oracle;
    throw ValidationError("unknown predictor: " + s);
}

std::string eval_csv_row(const std::string& predictor, const std::string& split, const train::LossReport& r,
                         train::EvalMode mode) {
    std::vector<std::string> f = {predictor, split, train::to_string(mode)};
    for (double v : {r.loss_y, r.loss_a, r.loss_total, r.loss_sum, r.nrmse, r.rmse, r.rmse_treated,
                     r.rmse_untreated}) {
        f.push_back(format_double(v));
    }
    f.push_back(std::to_string(r.n_treated));
    f.push_back(std::to_string(r.n_untreated));
    return report::csv_line(f);
}

void ExperimentSpec::validate() const {
    if (kappas.empty() || gammas.empty() || seeds.empty()) {
        throw ValidationError("sweep spec: kappa, gamma and seed lists must be non-empty");
    }
    if (mus.empty()) throw ValidationError("sweep spec: mu list must be non-empty");
    try {
        for (double k : kappas) {
            sim::SimConfig c = sim;
            c.kappa = k;
            for (double g : gammas) {
                c.gamma_c = c.gamma_r = g;
                c.validate();
            }
        }
        model.validate();
        train.validate();
    } catch (const std::invalid_argument& e) {
        throw ValidationError(std::string("sweep spec: ") + e.what());
    }
    for (double m : mus)
        if (!(m >= 0.0)) throw ValidationError("sweep spec: mu must be >= 0");
}

ExperimentSpec ExperimentSpec::from_json(const nlohmann::json& j, const Profile& base) {
    try {
        ExperimentSpec s;
        s.kappas = j.value("kappa", std::vector<double>{});
        s.gammas = j.value("gamma", std::vector<double>{});
        s.seeds = j.value("seeds", std::vector<std::uint64_t>{});
        s.sim = sim::SimConfig::from_json(j.value("sim", nlohmann::json::object()));
        if (!j.contains("sim") || !j.at("sim").contains("n")) s.sim.n = base.n;
        s.model = base.model_config();
        if (j.contains("model")) {
            const auto& m = j.at("model");
            s.model.layers = m.value("layers", s.model.layers);
            s.model.hidden = m.value("hidden", s.model.hidden);
            s.model.state = m.value("state", s.model.state);
            if (m.contains("activation")) s.model.activation = nn::activation_from_string(m.at("activation"));
        }
        s.train = base.train_config();
        if (j.contains("train")) {
            const auto defaults = s.train.to_json();
            auto merged = defaults;
            merged.update(j.at("train"));
            s.train = train::TrainConfig::from_json(merged);
        }
        s.mus = j.value("mu", std::vector<double>{s.train.mu});
        s.output_dir = j.value("output_dir", std::string());
        s.counterfactual = j.value("counterfactual", false);
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("sweep spec: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ValidationError(std::string("sweep spec: ") + e.what());
    }
}

SweepRow::SweepRow()
    : nrmse(kNaN), cf_nrmse(kNaN), lvcf_nrmse(kNaN), loss_y(kNaN), loss_a(kNaN), loss_total(kNaN),
      loss_sum(kNaN), rmse_treated(kNaN), rmse_untreated(kNaN), wall_seconds(kNaN) {}

nlohmann::json SweepRow::to_json() const {
    return {{"kappa", kappa},
            {"gamma", gamma},
            {"mu", mu},
            {"seed", seed},
            {"status", status},
            {"nrmse", number_or_null(nrmse)},
            {"cf_nrmse", number_or_null(cf_nrmse)},
            {"lvcf_nrmse", number_or_null(lvcf_nrmse)},
            {"loss_y", number_or_null(loss_y)},
            {"loss_a", number_or_null(loss_a)},
            {"loss_total", number_or_null(loss_total)},
            {"loss_sum", number_or_null(loss_sum)},
            {"rmse_treated", number_or_null(rmse_treated)},
            {"rmse_untreated", number_or_null(rmse_untreated)},
            {"wall_seconds", number_or_null(wall_seconds)},
            {"error", error}};
}

SweepRow SweepRow::from_json(const nlohmann::json& j) {
    SweepRow r;
    r.kappa = j.at("kappa").get<double>();
    r.gamma = j.at("gamma").get<double>();
    r.mu = j.at("mu").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.status = j.at("status").get<std::string>();
    r.nrmse = number_or_nan(j, "nrmse");
    r.cf_nrmse = number_or_nan(j, "cf_nrmse");
    r.lvcf_nrmse = number_or_nan(j, "lvcf_nrmse");
    r.loss_y = number_or_nan(j, "loss_y");
    r.loss_a = number_or_nan(j, "loss_a");
    r.loss_total = number_or_nan(j, "loss_total");
    r.loss_sum = number_or_nan(j, "loss_sum");
    r.rmse_treated = number_or_nan(j, "rmse_treated");
    r.rmse_untreated = number_or_nan(j, "rmse_untreated");
    r.wall_seconds = number_or_nan(j, "wall_seconds");
    r.error = j.value("error", std::string());
    return r;
}

std::string cell_key(double kappa, double gamma, double mu, std::uint64_t seed) {
    return "k" + format_double(kappa) + "_g" + format_double(gamma) + "_mu" + format_double(mu) + "_s" +
           std::to_string(seed);
}

namespace {

std::string sweep_row_csv(const SweepRow& r) {
    std::vector<std::string> f = {format_double(r.kappa), format_double(r.gamma), format_double(r.mu),
                                  std::to_string(r.seed), r.status};
    for (double v : {r.nrmse, r.cf_nrmse, r.lvcf_nrmse, r.loss_y, r.loss_a, r.loss_total, r.loss_sum,
                     r.rmse_treated, r.rmse_untreated, r.wall_seconds}) {
        f.push_back(format_double(v));
    }
    return report::csv_line(f);
}

struct Cell {
    double kappa, gamma, mu;
    std::uint64_t seed;
    std::string key, hash;
    sim::SimConfig sim;
    RunOptions run;
};

SweepRow run_cell(const Cell& c, const fs::path& dir, bool counterfactual) {
    const sim::DatasetSplits data = sim::generate_dataset(c.sim);
    const RunResult rr = train_run(data, c.run, dir);
    SweepRow row;
    row.kappa = c.kappa;
    row.gamma = c.gamma;
    row.mu = c.mu;
    row.seed = c.seed;
    row.status = "ok";
    row.nrmse = rr.test.nrmse;
    row.loss_y = rr.test.loss_y;
    row.loss_a = rr.test.loss_a;
    row.loss_total = rr.test.loss_total;
    row.loss_sum = rr.test.loss_sum;
    row.rmse_treated = rr.test.rmse_treated;
    row.rmse_untreated = rr.test.rmse_untreated;
    row.wall_seconds = 0.0;
    for (const auto& h : rr.history) row.wall_seconds += h.wall_seconds;
    const sim::Dataset& scored = data.test.empty() ? data.train : data.test;
    row.lvcf_nrmse = train::evaluate(train::lvcf_predictor(), scored).nrmse;
    if (counterfactual) {
        const nn::DeepS4Model model = nn::load_checkpoint((dir / "checkpoint.json").string());
        train::EvalOptions eo;
        eo.mode = train::EvalMode::counterfactual;
        eo.mu = c.mu;
        eo.target = c.run.train.target;
        row.cf_nrmse = train::evaluate(model, scored, eo).nrmse;
    }
    return row;
}

}  // namespace

std::string pivot_csv(const std::vector<SweepRow>& rows, const std::vector<double>& kappas,
                      const std::vector<double>& gammas, double mu) {
    std::vector<std::string> header = {"kappa"};
    for (double g : gammas) header.push_back("gamma=" + format_double(g));
    std::string out = report::csv_line(header);
    for (double k : kappas) {
        std::vector<std::string> line = {format_double(k)};
        for (double g : gammas) {
            double sum = 0.0;
            int n = 0;
            for (const auto& r : rows) {
                if (r.kappa == k && r.gamma == g && r.mu == mu && r.status == "ok" && std::isfinite(r.nrmse)) {
                    sum += r.nrmse;
                    ++n;
                }
            }
            line.push_back(format_double(n ? sum / n : kNaN));
        }
        out += report::csv_line(line);
    }
    return out;
}

SweepSummary run_sweep(const ExperimentSpec& spec, const fs::path& out, int jobs, std::ostream* log) {
    spec.validate();
    if (jobs < 1) throw ValidationError("--jobs must be >= 1");
    fs::create_directories(out);
    atomic_write(out / "spec.json",
                 nlohmann::json({{"kappa", spec.kappas},
                                 {"gamma", spec.gammas},
                                 {"seeds", spec.seeds},
                                 {"mu", spec.mus},
                                 {"sim", spec.sim.to_json()},
                                 {"model", model_json(spec.model)},
                                 {"train", spec.train.to_json()},
                                 {"counterfactual", spec.counterfactual}})
                         .dump(2) +
                     "\n");

    std::vector<Cell> cells;
    for (double k : spec.kappas)
        for (double g : spec.gammas)
            for (double mu : spec.mus)
                for (std::uint64_t seed : spec.seeds) {
                    Cell c{k, g, mu, seed, cell_key(k, g, mu, seed), "", spec.sim, {}};
                    c.sim.kappa = k;
                    c.sim.gamma_c = c.sim.gamma_r = g;
                    c.sim.seed = seed;
                    c.run.model = spec.model;
                    c.run.train = spec.train;
                    c.run.train.mu = mu;
                    c.run.train.seed = seed;
                    c.run.model_seed = seed;
                    c.hash = config_hash({{"sim", c.sim.to_json()},
                                          {"model", model_json(c.run.model)},
                                          {"train", c.run.train.to_json()},
                                          {"counterfactual", spec.counterfactual}});
                    cells.push_back(std::move(c));
                }

    const fs::path manifest_path = out / "sweep_manifest.json";
    nlohmann::json manifest = {{"cells", nlohmann::json::object()}};
    if (fs::exists(manifest_path)) {
        try {
            manifest = nlohmann::json::parse(read_file(manifest_path));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("corrupt sweep manifest " + manifest_path.string() + ": " + e.what());
        }
    }

    SweepSummary summary;
    summary.rows.resize(cells.size());
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& cm = manifest["cells"];
        if (cm.contains(cells[i].key)) {
            const auto& rec = cm.at(cells[i].key);
            if (rec.value("hash", std::string()) == cells[i].hash && rec.value("status", std::string()) == "ok") {
                summary.rows[i] = SweepRow::from_json(rec.at("row"));
                ++summary.skipped;
                continue;
            }
        }
        todo.push_back(i);
    }

    std::mutex mu;
    std::string errors_text;
    if (fs::exists(out / "errors.log")) errors_text = read_file(out / "errors.log");
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t t = next.fetch_add(1);
            if (t >= todo.size()) return;
            const Cell& c = cells[todo[t]];
            SweepRow row;
            try {
                row = run_cell(c, out / "cells" / c.key, spec.counterfactual);
            } catch (const std::exception& e) {
                row = SweepRow();
                row.kappa = c.kappa;
                row.gamma = c.gamma;
                row.mu = c.mu;
                row.seed = c.seed;
                row.status = "failed";
                row.error = e.what();
            }
            std::lock_guard<std::mutex> lock(mu);
            summary.rows[todo[t]] = row;
            ++summary.computed;
            if (row.status != "ok") {
                ++summary.failed;
                errors_text += c.key + ": " + row.error + "\n";
                atomic_write(out / "errors.log", errors_text);
            }
            manifest["cells"][c.key] = {{"hash", c.hash}, {"status", row.status}, {"row", row.to_json()}};
            atomic_write(manifest_path, manifest.dump(2) + "\n");
            if (log) *log << "[" << c.key << "] " << row.status << " nrmse=" << format_double(row.nrmse) << std::endl;
        }
    };
    const int threads = std::min<int>(jobs, static_cast<int>(std::max<std::size_t>(todo.size(), 1)));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    std::string results = std::string(kSweepHeader) + "\n";
    for (const auto& r : summary.rows) results += sweep_row_csv(r);
    atomic_write(out / "results.csv", results);
    for (double m : spec.mus) {
        const std::string name = spec.mus.size() == 1 ? "pivot_nrmse.csv" : "pivot_nrmse_mu" + format_double(m) + ".csv";
        atomic_write(out / name, pivot_csv(summary.rows, spec.kappas, spec.gammas, m));
    }
    return summary;
}

AblationAxis ablation_axis_from_string(const std::string& s) {
    if (s == "layers") return AblationAxis::layers;
    if (s == "latent") return AblationAxis::latent;
    throw ValidationError("unknown ablation axis '" + s + "' (expected layers or latent)");
}

std::string to_string(AblationAxis a) { return a == AblationAxis::layers ? "layers" : "latent"; }

std::vector<AblationRow> run_ablation(const sim::DatasetSplits& data, AblationAxis axis,
                                      const std::vector<int>& values, const RunOptions& base,
                                      const fs::path& out, std::ostream* log) {
    if (values.empty()) throw ValidationError("ablation needs at least one value");
    for (int v : values)
        if (v < 1) throw ValidationError("ablation values must be >= 1");
    std::vector<AblationRow> rows;
    for (int v : values) {
        RunOptions o = base;
        if (axis == AblationAxis::layers) {
            o.model.layers = v;
        } else {
            o.model.hidden = v;
        }
        const RunResult rr = train_run(data, o, out / (to_string(axis) + "_" + std::to_string(v)));
        AblationRow row;
        row.value = v;
        row.treatment_loss = rr.test.loss_a;
        row.outcome_loss = rr.test.loss_y;
        row.total_loss = rr.test.loss_y + rr.test.loss_a;
        rows.push_back(row);
        if (log) {
            *log << to_string(axis) << "=" << v << " outcome_loss=" << format_double(row.outcome_loss)
                 << " treatment_loss=" << format_double(row.treatment_loss) << std::endl;
        }
    }
    atomic_write(out / ("ablation_" + to_string(axis) + ".csv"), ablation_csv(rows));
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = std::string(kAblationHeader) + "\n";
    for (const auto& r : rows) {
        out += report::csv_line({std::to_string(r.value), format_double(r.treatment_loss),
                                 format_double(r.outcome_loss), format_double(r.total_loss)});
    }
    return out;
}

ReportResult make_report(const std::vector<fs::path>& inputs, const fs::path& out, bool log_y,
                         const std::string& metric, std::ostream* errors) {
    static const std::set<std::string> metrics = {"loss_y", "loss_a", "loss_total", "loss_sum", "nrmse"};
    if (!metrics.count(metric)) throw ValidationError("unknown metric: " + metric);
    std::vector<fs::path> runs;
    for (const auto& in : inputs) {
        if (!fs::exists(in)) throw ValidationError("no such run directory: " + in.string());
        if (fs::exists(in / "history.csv")) {
            runs.push_back(in);
            continue;
        }
        std::vector<fs::path> found;
        for (const auto& e : fs::recursive_directory_iterator(in)) {
            if (e.is_regular_file() && e.path().filename() == "history.csv") found.push_back(e.path().parent_path());
        }
        std::sort(found.begin(), found.end());
        if (found.empty() && errors) *errors << in.string() << ": no history.csv found\n";
        runs.insert(runs.end(), found.begin(), found.end());
    }

    std::vector<report::LineSeries> series;
    std::vector<report::BarGroup> groups;
    for (const auto& dir : runs) {
        std::vector<train::LossReport> h;
        try {
            h = report::read_history_csv((dir / "history.csv").string());
        } catch (const std::exception& e) {
            if (errors) *errors << e.what() << "\n";
            continue;
        }
        if (h.empty()) {
            if (errors) *errors << (dir / "history.csv").string() << ": no data rows\n";
            continue;
        }
        std::string label = dir.filename().string();
        if (fs::exists(dir / "run.json")) {
            try {
                const auto run = nlohmann::json::parse(read_file(dir / "run.json"));
                label = run.value("label", label);
            } catch (const nlohmann::json::exception&) {
            }
        }
        report::LineSeries s;
        s.label = label;
        for (const auto& r : h) {
            s.x.push_back(r.epoch);
            double v = r.loss_sum;
            if (metric == "loss_y") v = r.loss_y;
            if (metric == "loss_a") v = r.loss_a;
            if (metric == "loss_total") v = r.loss_total;
            if (metric == "nrmse") v = r.nrmse;
            s.y.push_back(v);
        }
        series.push_back(std::move(s));
        groups.push_back({label, {h.back().rmse_treated, h.back().rmse_untreated}});
    }

    ReportResult res;
    res.runs = series.size();
    fs::create_directories(out);
    report::LinePlotOptions lo;
    lo.title = metric + " vs epoch";
    lo.y_label = metric;
    lo.log_y = log_y;
    res.loss_svg = out / "loss_curves.svg";
    atomic_write(res.loss_svg, report::svg_line_plot(series, lo));
    report::BarChartOptions bo;
    bo.title = "Treated vs untreated RMSE (final epoch)";
    bo.series_names = {"treated", "untreated"};
    res.bars_svg = out / "rmse_bars.svg";
    atomic_write(res.bars_svg, report::svg_grouped_bars(groups, bo));
    return res;
}

}  // namespace s4cf::experiment
