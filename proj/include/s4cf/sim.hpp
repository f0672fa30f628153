// Synthetic longitudinal lung-tumor cohorts.
//
// Latent dynamics: Gompertz growth with chemotherapy (one-compartment drug
// concentration) and radiotherapy (linear-quadratic dose) kill terms, Euler
// integrated on a fixed grid. Treatments are assigned once per day by a
// diameter-dependent logistic policy whose slope sets the confounding
// strength. Observation times come from a self-exciting (Hawkes) process
// whose base rate grows with cancer stage.
#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace s4cf::sim {

inline constexpr double kPi = 3.14159265358979323846;

/// Sphere volume (cm^3) from diameter (cm), and the inverse.
double volume_from_diameter(double diameter);
double diameter_from_volume(double volume);

struct TumorParams {
    double rho = 7e-5 * 30.0;  // day^-1
    double carrying_diameter = 13.0;  // K is the volume of this sphere
    double beta_c = 0.028;
    double alpha_r = 0.0398;
    double beta_r = 0.0398 / 10.0;
    double sigma = 0.01;
    double v_min = 0.001;
    double chemo_half_life = 1.0;  // days
    double chemo_impulse = 5.0;
    double radio_dose = 2.0;  // Gy on a treated day

    double carrying_capacity() const { return volume_from_diameter(carrying_diameter); }
};

struct HawkesParams {
    double base_rate = 0.5;  // events/day at stage 1
    double alpha = 0.2;      // jump size of the excitation
    double beta = 1.0;       // excitation decay, day^-1
};

struct SimConfig {
    int n = 500;
    double gamma_c = 0.0;
    double gamma_r = 0.0;
    double kappa = 1.0;
    double horizon = 60.0;  // days
    double dt_sim = 0.25;   // days
    std::uint64_t seed = 0;
    double d_max = 13.0;  // policy reference diameter, cm
    double init_diameter_min = 1.0;
    double init_diameter_max = 10.0;
    double response_min = 0.5;  // per-patient multiplier on treatment kill terms
    double response_max = 1.5;
    TumorParams tumor;
    HawkesParams hawkes;

    /// Throws std::invalid_argument on any violated invariant.
    void validate() const;
    nlohmann::json to_json() const;
    static SimConfig from_json(const nlohmann::json& j);
};

/// One Euler-Maruyama step of
///   dV = (rho log(K/V) - beta_c c - (alpha_r d + beta_r d^2)) V dt + sigma V sqrt(dt) eps,
/// clamped to [v_min, K]. `treatment_scale` multiplies both kill terms.
double tumor_step(double volume, double chemo_conc, double radio_dose, double dt,
                  const TumorParams& params, double eps, double treatment_scale = 1.0);
double tumor_step(double volume, double chemo_conc, double radio_dose, double dt,
                  const TumorParams& params, std::mt19937_64& rng, double treatment_scale = 1.0);

/// Concentration after `elapsed` days of first-order elimination.
double chemo_decay(double conc, double elapsed, double half_life);

/// P(treat) = sigmoid((gamma / d_max) (diameter - d_max / 2)).
double treatment_probability(double diameter, double gamma, double d_max = 13.0);
int treatment_policy(double diameter, double gamma, std::mt19937_64& rng, double d_max = 13.0);
/// Same decision from a pre-drawn uniform in [0, 1).
int treatment_policy(double diameter, double gamma, double uniform, double d_max = 13.0);

/// 1 below 3 cm, 2 below 5 cm, 3 below 7 cm, else 4.
int stage_of(double diameter);

/// Stage as a step function on a uniform grid.
struct StagePath {
    std::vector<int> stages;
    double dt = 0.25;

    int at(double t) const;
    int max_stage() const;
    static StagePath constant(int stage, double horizon, double dt = 0.25);
};

/// Ogata thinning for
///   lambda(t) = base_rate kappa^((stage(t) - 1)/3) + sum_{t_j < t} alpha exp(-beta (t - t_j))
/// on (0, horizon]. The returned times start with a forced observation at 0.
std::vector<double> hawkes_sample(const StagePath& stage_path, double kappa, double horizon,
                                  const HawkesParams& params, std::mt19937_64& rng);

struct DailyDecision {
    int chemo = 0;
    int radio = 0;
};

/// Treatment overrides applied at every daily decision point t >= start.
struct TreatmentPlan {
    enum class Kind { factual, always, never, custom };
    Kind kind = Kind::factual;
    double start = 0.0;
    std::vector<DailyDecision> custom;  // indexed by day, for Kind::custom

    static TreatmentPlan factual() { return {}; }
    static TreatmentPlan always_treat(double start) { return {Kind::always, start, {}}; }
    static TreatmentPlan never_treat(double start) { return {Kind::never, start, {}}; }
};

std::string to_string(TreatmentPlan::Kind k);

struct PatientSetup {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    double initial_diameter = 0.0;
    double response = 1.0;
};

/// Deterministic per (config.seed, index).
PatientSetup patient_setup(const SimConfig& config, std::size_t index);
std::uint64_t patient_seed(std::uint64_t config_seed, std::size_t index);

/// Full latent path on the integration grid.
struct LatentPath {
    double dt = 0.25;
    std::vector<double> times;       // grid, size steps + 1
    std::vector<double> volumes;     // at grid points
    std::vector<double> chemo_conc;  // at grid points, before that point's impulse
    std::vector<int> stages;
    std::vector<DailyDecision> decisions;  // one per day 0..floor(horizon)
    std::vector<std::size_t> decision_index;  // grid index of each day's decision
};

LatentPath simulate_latent(const SimConfig& config, const PatientSetup& setup,
                           const TreatmentPlan& plan = TreatmentPlan::factual());

struct PatientTrajectory {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    std::vector<double> obs_times;
    std::vector<double> volumes;
    std::vector<double> diameters;
    std::vector<int> chemo;  // decision at the first daily decision point >= obs time
    std::vector<int> radio;
    std::vector<int> stage;
    std::vector<double> static_features;  // initial diameter / d_max, treatment response

    std::size_t size() const { return obs_times.size(); }
    /// Observed covariate row: [volume, diameter, static features...].
    std::vector<double> covariates(std::size_t k) const;
    int any_treatment(std::size_t k) const { return (chemo[k] || radio[k]) ? 1 : 0; }

    nlohmann::json to_json() const;
    static PatientTrajectory from_json(const nlohmann::json& j);
};

/// Observation record of a latent path at the given times (snapped to grid).
PatientTrajectory observe(const SimConfig& config, const PatientSetup& setup,
                          const LatentPath& path, const std::vector<double>& times);

PatientTrajectory simulate_patient(const SimConfig& config, std::size_t index);

struct Normalization {
    double mean = 0.0;
    double std = 1.0;

    double normalize(double v) const { return (v - mean) / std; }
    double denormalize(double z) const { return z * std + mean; }
};

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Dataset {
    std::vector<PatientTrajectory> trajectories;
    Normalization normalization;
    SimConfig config;
    Split split = Split::train;

    bool empty() const { return trajectories.empty(); }
    std::size_t size() const { return trajectories.size(); }
};

struct DatasetSplits {
    Dataset train, val, test;
};

/// Train/val/test sizes under the 8:1:1 rule (train gets at least one patient).
std::array<std::size_t, 3> split_sizes(int n);

/// Mean and std (floored at 1e-6) of every observed volume.
Normalization compute_normalization(const std::vector<PatientTrajectory>& train);

DatasetSplits generate_dataset(const SimConfig& config);

/// Ground-truth volumes at the next `horizon_k` observation times after
/// `t_split`, re-simulated with the patient's noise stream under `plan`
/// (plan.start is set to t_split).
std::vector<double> counterfactual_rollout(const SimConfig& config,
                                           const PatientTrajectory& trajectory, double t_split,
                                           TreatmentPlan plan, std::size_t horizon_k);

/// Pearson correlation between diameter on day d and the chemo decision on
/// day d + 1, pooled over patients.
struct ConfoundingCheck {
    double correlation = 0.0;
    std::size_t patient_days = 0;
};
ConfoundingCheck diameter_treatment_correlation(const SimConfig& config);

// JSON Lines with a header line {schema_version, split, config, normalization}.
inline constexpr int kSchemaVersion = 1;
void write_jsonl(const Dataset& dataset, const std::string& path);
Dataset read_jsonl(const std::string& path);
std::string serialize_jsonl(const Dataset& dataset);

}  // namespace s4cf::sim
