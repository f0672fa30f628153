// Orchestration behind the command-line tool: dataset directories, training
// runs, evaluation, the kappa x gamma sweep, ablations and plots.
#pragma once

#include "s4cf/model.hpp"
#include "s4cf/sim.hpp"
#include "s4cf/train.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace s4cf::experiment {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitValidation = 2, kExitRuntime = 3 };

/// Bad flags, bad spec files, missing inputs: exit code 2.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Out-of-the-box sizes. `full` restores the full-size hyperparameters.
struct Profile {
    int n = 500;
    int hidden = 64;
    int state = 16;
    int layers = 4;
    int epochs = 10;
    int batch_size = 32;
    int max_len = 128;
    double lr_ssm = 5e-3;
    double lr_other = 2e-3;

    static Profile desk();
    static Profile full();
    nn::ModelConfig model_config() const;
    train::TrainConfig train_config() const;
};

inline constexpr const char* kOutputRootEnv = "S4CF_OUTPUT_ROOT";
/// $S4CF_OUTPUT_ROOT, else "runs".
fs::path output_root();
/// An empty path becomes output_root()/fallback. Relative paths land under
/// $S4CF_OUTPUT_ROOT when it is set, else the working directory.
fs::path resolve_output(const std::string& path, const std::string& fallback);

std::string config_hash(const nlohmann::json& config);

struct SimulateResult {
    std::array<std::size_t, 3> sizes{};
    std::string config_hash;
};
/// Writes train/val/test JSONL plus manifest.json.
SimulateResult simulate_to_dir(const sim::SimConfig& config, const fs::path& out);
/// Throws ValidationError when a split file is missing.
sim::DatasetSplits load_splits(const fs::path& dir);

struct RunOptions {
    nn::ModelConfig model;
    train::TrainConfig train;
    std::uint64_t model_seed = 0;
};

struct RunResult {
    std::vector<train::LossReport> history;
    train::LossReport test;  // factual, on the test split
};

/// Trains a fresh model; writes history.csv, checkpoint.json (every epoch)
/// and run.json into `out`.
RunResult train_run(const sim::DatasetSplits& data, const RunOptions& options, const fs::path& out);

enum class PredictorKind { model, lvcf, mean, oracle };
std::string to_string(PredictorKind k);
PredictorKind predictor_kind_from_string(const std::string& s);

inline constexpr const char* kEvalHeader =
    "predictor,split,mode,loss_y,loss_a,loss_total,loss_sum,nrmse,rmse,rmse_treated,rmse_untreated,"
    "n_treated,n_untreated";
std::string eval_csv_row(const std::string& predictor, const std::string& split,
                         const train::LossReport& r, train::EvalMode mode);

struct ExperimentSpec {
    std::vector<double> kappas;
    std::vector<double> gammas;  // applied to both gamma_c and gamma_r
    std::vector<std::uint64_t> seeds;
    std::vector<double> mus;  // defaults to {train.mu}
    sim::SimConfig sim;
    nn::ModelConfig model;
    train::TrainConfig train;
    std::string output_dir;
    bool counterfactual = false;

    void validate() const;
    /// Human-editable JSON; unset fields fall back to `base`.
    static ExperimentSpec from_json(const nlohmann::json& j, const Profile& base);
};

struct SweepRow {
    double kappa = 0, gamma = 0, mu = 0;
    std::uint64_t seed = 0;
    std::string status;  // ok | failed
    double nrmse, cf_nrmse, lvcf_nrmse, loss_y, loss_a, loss_total, loss_sum, rmse_treated,
        rmse_untreated, wall_seconds;
    std::string error;

    SweepRow();
    nlohmann::json to_json() const;
    static SweepRow from_json(const nlohmann::json& j);
};

inline constexpr const char* kSweepHeader =
    "kappa,gamma,mu,seed,status,nrmse,cf_nrmse,lvcf_nrmse,loss_y,loss_a,loss_total,loss_sum,"
    "rmse_treated,rmse_untreated,wall_seconds";

struct SweepSummary {
    std::vector<SweepRow> rows;  // grid order
    std::size_t computed = 0;
    std::size_t skipped = 0;
    std::size_t failed = 0;
};

std::string cell_key(double kappa, double gamma, double mu, std::uint64_t seed);

/// Runs every (kappa, gamma, mu, seed) cell not already completed according to
/// sweep_manifest.json. Writes results.csv, one pivot CSV per mu
/// (kappa rows x gamma columns, mean nrmse over seeds) and errors.log.
SweepSummary run_sweep(const ExperimentSpec& spec, const fs::path& out, int jobs, std::ostream* log);

/// Pivot of `rows` for one mu: header "kappa,gamma=<g>..." and mean nrmse.
std::string pivot_csv(const std::vector<SweepRow>& rows, const std::vector<double>& kappas,
                      const std::vector<double>& gammas, double mu);

enum class AblationAxis { layers, latent };
AblationAxis ablation_axis_from_string(const std::string& s);
std::string to_string(AblationAxis a);

struct AblationRow {
    int value = 0;
    double treatment_loss = 0, outcome_loss = 0, total_loss = 0;
};
inline constexpr const char* kAblationHeader = "value,treatment_loss,outcome_loss,total_loss";

/// Trains one model per value and scores it on the test split;
/// total_loss = outcome_loss + treatment_loss.
std::vector<AblationRow> run_ablation(const sim::DatasetSplits& data, AblationAxis axis,
                                      const std::vector<int>& values, const RunOptions& base,
                                      const fs::path& out, std::ostream* log);
std::string ablation_csv(const std::vector<AblationRow>& rows);

struct ReportResult {
    fs::path loss_svg;
    fs::path bars_svg;
    std::size_t runs = 0;
};

/// Each input is a run directory (has history.csv) or a directory of them.
/// Unreadable histories are reported to `errors` and skipped.
ReportResult make_report(const std::vector<fs::path>& inputs, const fs::path& out, bool log_y,
                         const std::string& metric, std::ostream* errors);

}  // namespace s4cf::experiment
