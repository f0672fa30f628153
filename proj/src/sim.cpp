#include "s4cf/sim.hpp"

#include "s4cf/util.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace s4cf::sim {

namespace {

constexpr std::uint64_t kNoiseStream = 1;
constexpr std::uint64_t kPolicyStream = 2;
constexpr std::uint64_t kHawkesStream = 3;
constexpr std::uint64_t kSetupStream = 4;

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t which) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(which)));
}

std::size_t grid_steps(double horizon, double dt) {
    return static_cast<std::size_t>(std::ceil(horizon / dt - 1e-9));
}

}  // namespace

double volume_from_diameter(double diameter) {
    return kPi / 6.0 * diameter * diameter * diameter;
}

double diameter_from_volume(double volume) { return std::cbrt(6.0 * volume / kPi); }

void SimConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("SimConfig: " + msg); };
    if (n < 1) fail("n must be >= 1");
    if (!(gamma_c >= 0.0) || !(gamma_r >= 0.0)) fail("gamma_c and gamma_r must be >= 0");
    if (!(kappa >= 1.0)) fail("kappa must be >= 1");
    if (!(horizon > 0.0)) fail("horizon must be > 0");
    if (!(dt_sim > 0.0 && dt_sim <= 1.0)) fail("dt_sim must be in (0, 1]");
    if (!(d_max > 0.0)) fail("d_max must be > 0");
    if (!(init_diameter_min > 0.0 && init_diameter_min <= init_diameter_max &&
          init_diameter_max <= tumor.carrying_diameter)) {
        fail("initial diameter range must satisfy 0 < min <= max <= carrying diameter");
    }
    if (!(response_min >= 0.0 && response_min <= response_max)) fail("invalid response range");
    if (!(tumor.v_min > 0.0 && tumor.v_min < tumor.carrying_capacity())) fail("invalid volume bounds");
    if (!(tumor.sigma >= 0.0)) fail("sigma must be >= 0");
    if (!(tumor.chemo_half_life > 0.0)) fail("chemo half-life must be > 0");
    if (!(hawkes.base_rate > 0.0)) fail("hawkes base rate must be > 0");
    if (!(hawkes.beta > 0.0) || !(hawkes.alpha >= 0.0)) fail("hawkes alpha >= 0 and beta > 0 required");
    if (hawkes.alpha / hawkes.beta >= 1.0) fail("hawkes branching ratio alpha/beta must be < 1");
}

nlohmann::json SimConfig::to_json() const {
    return {
        {"n", n},
        {"gamma_c", gamma_c},
        {"gamma_r", gamma_r},
        {"kappa", kappa},
        {"horizon", horizon},
        {"dt_sim", dt_sim},
        {"seed", seed},
        {"d_max", d_max},
        {"init_diameter_min", init_diameter_min},
        {"init_diameter_max", init_diameter_max},
        {"response_min", response_min},
        {"response_max", response_max},
        {"tumor",
         {{"rho", tumor.rho},
          {"carrying_diameter", tumor.carrying_diameter},
          {"beta_c", tumor.beta_c},
          {"alpha_r", tumor.alpha_r},
          {"beta_r", tumor.beta_r},
          {"sigma", tumor.sigma},
          {"v_min", tumor.v_min},
          {"chemo_half_life", tumor.chemo_half_life},
          {"chemo_impulse", tumor.chemo_impulse},
          {"radio_dose", tumor.radio_dose}}},
        {"hawkes",
         {{"base_rate", hawkes.base_rate}, {"alpha", hawkes.alpha}, {"beta", hawkes.beta}}},
    };
}

SimConfig SimConfig::from_json(const nlohmann::json& j) {
    SimConfig c;
    c.n = j.value("n", c.n);
    c.gamma_c = j.value("gamma_c", c.gamma_c);
    c.gamma_r = j.value("gamma_r", c.gamma_r);
    c.kappa = j.value("kappa", c.kappa);
    c.horizon = j.value("horizon", c.horizon);
    c.dt_sim = j.value("dt_sim", c.dt_sim);
    c.seed = j.value("seed", c.seed);
    c.d_max = j.value("d_max", c.d_max);
    c.init_diameter_min = j.value("init_diameter_min", c.init_diameter_min);
    c.init_diameter_max = j.value("init_diameter_max", c.init_diameter_max);
    c.response_min = j.value("response_min", c.response_min);
    c.response_max = j.value("response_max", c.response_max);
    if (j.contains("tumor")) {
        const auto& t = j.at("tumor");
        c.tumor.rho = t.value("rho", c.tumor.rho);
        c.tumor.carrying_diameter = t.value("carrying_diameter", c.tumor.carrying_diameter);
        c.tumor.beta_c = t.value("beta_c", c.tumor.beta_c);
        c.tumor.alpha_r = t.value("alpha_r", c.tumor.alpha_r);
        c.tumor.beta_r = t.value("beta_r", c.tumor.beta_r);
        c.tumor.sigma = t.value("sigma", c.tumor.sigma);
        c.tumor.v_min = t.value("v_min", c.tumor.v_min);
        c.tumor.chemo_half_life = t.value("chemo_half_life", c.tumor.chemo_half_life);
        c.tumor.chemo_impulse = t.value("chemo_impulse", c.tumor.chemo_impulse);
        c.tumor.radio_dose = t.value("radio_dose", c.tumor.radio_dose);
    }
    if (j.contains("hawkes")) {
        const auto& h = j.at("hawkes");
        c.hawkes.base_rate = h.value("base_rate", c.hawkes.base_rate);
        c.hawkes.alpha = h.value("alpha", c.hawkes.alpha);
        c.hawkes.beta = h.value("beta", c.hawkes.beta);
    }
    return c;
}

double tumor_step(double volume, double chemo_conc, double radio_dose, double dt,
                  const TumorParams& p, double eps, double treatment_scale) {
    if (!(volume > 0.0)) throw std::invalid_argument("tumor_step: volume must be > 0");
    if (!(dt > 0.0)) throw std::invalid_argument("tumor_step: dt must be > 0");
    const double K = p.carrying_capacity();
    const double growth = p.rho * std::log(K / volume);
    const double chemo = p.beta_c * chemo_conc;
    const double radio = p.alpha_r * radio_dose + p.beta_r * radio_dose * radio_dose;
    const double drift = (growth - treatment_scale * (chemo + radio)) * volume * dt;
    const double diffusion = p.sigma * volume * std::sqrt(dt) * eps;
    return std::clamp(volume + drift + diffusion, p.v_min, K);
}

double tumor_step(double volume, double chemo_conc, double radio_dose, double dt,
                  const TumorParams& params, std::mt19937_64& rng, double treatment_scale) {
    std::normal_distribution<double> normal(0.0, 1.0);
    return tumor_step(volume, chemo_conc, radio_dose, dt, params, normal(rng), treatment_scale);
}

double chemo_decay(double conc, double elapsed, double half_life) {
    return conc * std::exp2(-elapsed / half_life);
}

double treatment_probability(double diameter, double gamma, double d_max) {
    const double x = gamma / d_max * (diameter - d_max / 2.0);
    return 1.0 / (1.0 + std::exp(-x));
}

int treatment_policy(double diameter, double gamma, double uniform, double d_max) {
    return uniform < treatment_probability(diameter, gamma, d_max) ? 1 : 0;
}

int treatment_policy(double diameter, double gamma, std::mt19937_64& rng, double d_max) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return treatment_policy(diameter, gamma, u(rng), d_max);
}

int stage_of(double diameter) {
    if (!(diameter > 0.0)) throw std::invalid_argument("stage_of: diameter must be > 0");
    if (diameter < 3.0) return 1;
    if (diameter < 5.0) return 2;
    if (diameter < 7.0) return 3;
    return 4;
}

int StagePath::at(double t) const {
    if (stages.empty()) throw std::logic_error("StagePath: empty path");
    const auto i = static_cast<long long>(std::floor(t / dt + 1e-9));
    const auto clamped = std::clamp<long long>(i, 0, static_cast<long long>(stages.size()) - 1);
    return stages[static_cast<std::size_t>(clamped)];
}

int StagePath::max_stage() const { return *std::max_element(stages.begin(), stages.end()); }

StagePath StagePath::constant(int stage, double horizon, double dt) {
    StagePath p;
    p.dt = dt;
    p.stages.assign(grid_steps(horizon, dt) + 1, stage);
    return p;
}

std::vector<double> hawkes_sample(const StagePath& stage_path, double kappa, double horizon,
                                  const HawkesParams& params, std::mt19937_64& rng) {
    if (!(kappa >= 1.0)) throw std::invalid_argument("hawkes_sample: kappa must be >= 1");
    if (!(params.beta > 0.0) || params.alpha / params.beta >= 1.0) {
        throw std::invalid_argument("hawkes_sample: branching ratio alpha/beta must be < 1");
    }
    if (!(horizon > 0.0)) throw std::invalid_argument("hawkes_sample: horizon must be > 0");

    auto base = [&](int stage) { return params.base_rate * std::pow(kappa, (stage - 1) / 3.0); };
    const double base_bound = base(stage_path.max_stage());

    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<double> times{0.0};
    double t = 0.0;
    double excitation = 0.0;  // sum over accepted events of alpha exp(-beta (t - t_j))
    for (;;) {
        const double upper = base_bound + excitation;
        std::exponential_distribution<double> wait(upper);
        const double w = wait(rng);
        t += w;
        if (t > horizon) break;
        excitation *= std::exp(-params.beta * w);
        const double intensity = base(stage_path.at(t)) + excitation;
        if (uniform(rng) * upper <= intensity) {
            times.push_back(t);
            excitation += params.alpha;
        }
    }
    return times;
}

std::string to_string(TreatmentPlan::Kind k) {
    switch (k) {
        case TreatmentPlan::Kind::factual: return "factual";
        case TreatmentPlan::Kind::always: return "always";
        case TreatmentPlan::Kind::never: return "never";
        case TreatmentPlan::Kind::custom: return "custom";
    }
    return "factual";
}

std::uint64_t patient_seed(std::uint64_t config_seed, std::size_t index) {
    return splitmix64(config_seed ^ splitmix64(0x51ED270B27F1ULL + index));
}

PatientSetup patient_setup(const SimConfig& config, std::size_t index) {
    PatientSetup s;
    s.index = index;
    s.seed = patient_seed(config.seed, index);
    auto rng = stream(s.seed, kSetupStream);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    s.initial_diameter =
        config.init_diameter_min + (config.init_diameter_max - config.init_diameter_min) * u(rng);
    s.response = config.response_min + (config.response_max - config.response_min) * u(rng);
    return s;
}

LatentPath simulate_latent(const SimConfig& config, const PatientSetup& setup,
                           const TreatmentPlan& plan) {
    const TumorParams& tp = config.tumor;
    const double dt = config.dt_sim;
    const std::size_t steps = grid_steps(config.horizon, dt);
    const std::size_t days = static_cast<std::size_t>(std::floor(config.horizon)) + 1;

    LatentPath path;
    path.dt = dt;
    path.times.resize(steps + 1);
    path.volumes.resize(steps + 1);
    path.chemo_conc.resize(steps + 1);
    path.stages.resize(steps + 1);
    path.decisions.resize(days);
    path.decision_index.resize(days);
    for (std::size_t d = 0; d < days; ++d) {
        path.decision_index[d] =
            std::min(steps, static_cast<std::size_t>(std::ceil(static_cast<double>(d) / dt - 1e-9)));
    }

    auto noise_rng = stream(setup.seed, kNoiseStream);
    auto policy_rng = stream(setup.seed, kPolicyStream);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    const double K = tp.carrying_capacity();
    double volume = std::clamp(volume_from_diameter(setup.initial_diameter), tp.v_min, K);
    double conc = 0.0;
    int radio_today = 0;
    std::size_t next_day = 0;

    for (std::size_t i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) * dt;
        path.times[i] = t;
        path.volumes[i] = volume;
        path.chemo_conc[i] = conc;
        const double diameter = diameter_from_volume(volume);
        path.stages[i] = stage_of(diameter);

        while (next_day < days && path.decision_index[next_day] == i) {
            const double uc = uniform(policy_rng);
            const double ur = uniform(policy_rng);
            DailyDecision dec{treatment_policy(diameter, config.gamma_c, uc, config.d_max),
                              treatment_policy(diameter, config.gamma_r, ur, config.d_max)};
            if (plan.kind != TreatmentPlan::Kind::factual && t >= plan.start - 1e-12) {
                switch (plan.kind) {
                    case TreatmentPlan::Kind::always: dec = {1, 1}; break;
                    case TreatmentPlan::Kind::never: dec = {0, 0}; break;
                    case TreatmentPlan::Kind::custom:
                        if (next_day < plan.custom.size()) dec = plan.custom[next_day];
                        break;
                    case TreatmentPlan::Kind::factual: break;
                }
            }
            path.decisions[next_day] = dec;
            if (dec.chemo) conc += tp.chemo_impulse;
            radio_today = dec.radio;
            ++next_day;
        }
        if (i == steps) break;

        const double eps = normal(noise_rng);
        volume = tumor_step(volume, conc, radio_today ? tp.radio_dose : 0.0, dt, tp, eps, setup.response);
        conc = chemo_decay(conc, dt, tp.chemo_half_life);
    }
    return path;
}

std::vector<double> PatientTrajectory::covariates(std::size_t k) const {
    std::vector<double> row{volumes.at(k), diameters.at(k)};
    row.insert(row.end(), static_features.begin(), static_features.end());
    return row;
}

nlohmann::json PatientTrajectory::to_json() const {
    return {
        {"index", index},
        {"seed", seed},
        {"obs_times", obs_times},
        {"volumes", volumes},
        {"diameters", diameters},
        {"chemo", chemo},
        {"radio", radio},
        {"stage", stage},
        {"static", static_features},
    };
}

PatientTrajectory PatientTrajectory::from_json(const nlohmann::json& j) {
    PatientTrajectory p;
    p.index = j.at("index").get<std::size_t>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.obs_times = j.at("obs_times").get<std::vector<double>>();
    p.volumes = j.at("volumes").get<std::vector<double>>();
    p.diameters = j.at("diameters").get<std::vector<double>>();
    p.chemo = j.at("chemo").get<std::vector<int>>();
    p.radio = j.at("radio").get<std::vector<int>>();
    p.stage = j.at("stage").get<std::vector<int>>();
    p.static_features = j.at("static").get<std::vector<double>>();
    const auto n = p.obs_times.size();
    if (p.volumes.size() != n || p.diameters.size() != n || p.chemo.size() != n ||
        p.radio.size() != n || p.stage.size() != n) {
        throw std::runtime_error("trajectory " + std::to_string(p.index) + ": field lengths differ");
    }
    return p;
}

PatientTrajectory observe(const SimConfig& config, const PatientSetup& setup,
                          const LatentPath& path, const std::vector<double>& times) {
    const std::size_t last = path.times.size() - 1;
    std::vector<std::size_t> grid;
    for (double t : times) {
        const auto i = static_cast<std::size_t>(
            std::clamp<long long>(std::llround(t / path.dt), 0, static_cast<long long>(last)));
        if (grid.empty() || i > grid.back()) grid.push_back(i);
    }
    PatientTrajectory p;
    p.index = setup.index;
    p.seed = setup.seed;
    p.static_features = {setup.initial_diameter / config.d_max, setup.response};
    std::size_t day = 0;
    for (std::size_t i : grid) {
        while (day < path.decision_index.size() && path.decision_index[day] < i) ++day;
        const DailyDecision dec = day < path.decisions.size() ? path.decisions[day] : DailyDecision{};
        const double v = path.volumes[i];
        p.obs_times.push_back(path.times[i]);
        p.volumes.push_back(v);
        p.diameters.push_back(diameter_from_volume(v));
        p.stage.push_back(path.stages[i]);
        p.chemo.push_back(dec.chemo);
        p.radio.push_back(dec.radio);
    }
    return p;
}

PatientTrajectory simulate_patient(const SimConfig& config, std::size_t index) {
    const PatientSetup setup = patient_setup(config, index);
    const LatentPath path = simulate_latent(config, setup);
    StagePath stages;
    stages.dt = path.dt;
    stages.stages = path.stages;
    auto rng = stream(setup.seed, kHawkesStream);
    const auto times = hawkes_sample(stages, config.kappa, config.horizon, config.hawkes, rng);
    return observe(config, setup, path, times);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split: " + s);
}

std::array<std::size_t, 3> split_sizes(int n) {
    if (n < 1) throw std::invalid_argument("split_sizes: n must be >= 1");
    const auto total = static_cast<std::size_t>(n);
    const std::size_t train = std::max<std::size_t>(1, total * 8 / 10);
    const std::size_t val = std::min(total - train, total / 10);
    return {train, val, total - train - val};
}

Normalization compute_normalization(const std::vector<PatientTrajectory>& train) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& p : train)
        for (double v : p.volumes) {
            sum += v;
            ++count;
        }
    if (count == 0) throw std::invalid_argument("compute_normalization: no training observations");
    Normalization n;
    n.mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const auto& p : train)
        for (double v : p.volumes) sq += (v - n.mean) * (v - n.mean);
    n.std = std::max(std::sqrt(sq / static_cast<double>(count)), 1e-6);
    return n;
}

DatasetSplits generate_dataset(const SimConfig& config) {
    config.validate();
    const auto sizes = split_sizes(config.n);
    DatasetSplits out;
    Dataset* targets[3] = {&out.train, &out.val, &out.test};
    const Split tags[3] = {Split::train, Split::val, Split::test};
    std::size_t index = 0;
    for (int s = 0; s < 3; ++s) {
        targets[s]->config = config;
        targets[s]->split = tags[s];
        for (std::size_t k = 0; k < sizes[static_cast<std::size_t>(s)]; ++k, ++index) {
            targets[s]->trajectories.push_back(simulate_patient(config, index));
        }
    }
    const Normalization norm = compute_normalization(out.train.trajectories);
    for (auto* d : targets) d->normalization = norm;
    return out;
}

std::vector<double> counterfactual_rollout(const SimConfig& config,
                                           const PatientTrajectory& trajectory, double t_split,
                                           TreatmentPlan plan, std::size_t horizon_k) {
    if (trajectory.obs_times.empty() || t_split < trajectory.obs_times.front() ||
        t_split > trajectory.obs_times.back()) {
        throw std::invalid_argument("counterfactual_rollout: t_split outside the observed range");
    }
    const PatientSetup setup = patient_setup(config, trajectory.index);
    if (setup.seed != trajectory.seed) {
        throw std::invalid_argument("counterfactual_rollout: trajectory seed does not match config");
    }
    plan.start = t_split;
    const LatentPath path = simulate_latent(config, setup, plan);
    std::vector<double> out;
    for (double t : trajectory.obs_times) {
        if (out.size() >= horizon_k) break;
        if (t <= t_split) continue;
        const auto i = static_cast<std::size_t>(std::llround(t / path.dt));
        out.push_back(path.volumes.at(i));
    }
    return out;
}

ConfoundingCheck diameter_treatment_correlation(const SimConfig& config) {
    config.validate();
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    std::size_t n = 0;
    for (int i = 0; i < config.n; ++i) {
        const LatentPath path = simulate_latent(config, patient_setup(config, static_cast<std::size_t>(i)));
        for (std::size_t d = 0; d + 1 < path.decisions.size(); ++d) {
            const double x = diameter_from_volume(path.volumes[path.decision_index[d]]);
            const double y = path.decisions[d + 1].chemo;
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            ++n;
        }
    }
    ConfoundingCheck out;
    out.patient_days = n;
    if (n < 2) return out;
    const double dn = static_cast<double>(n);
    const double cov = sxy / dn - (sx / dn) * (sy / dn);
    const double vx = sxx / dn - (sx / dn) * (sx / dn);
    const double vy = syy / dn - (sy / dn) * (sy / dn);
    out.correlation = (vx > 0 && vy > 0) ? cov / std::sqrt(vx * vy) : 0.0;
    return out;
}

std::string serialize_jsonl(const Dataset& dataset) {
    std::string out;
    const nlohmann::json header = {
        {"schema_version", kSchemaVersion},
        {"split", to_string(dataset.split)},
        {"config", dataset.config.to_json()},
        {"normalization", {{"mean", dataset.normalization.mean}, {"std", dataset.normalization.std}}},
    };
    out += header.dump();
    out += '\n';
    for (const auto& p : dataset.trajectories) {
        out += p.to_json().dump();
        out += '\n';
    }
    return out;
}

void write_jsonl(const Dataset& dataset, const std::string& path) {
    atomic_write(path, serialize_jsonl(dataset));
}

Dataset read_jsonl(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty dataset file");
    const auto header = nlohmann::json::parse(line);
    if (header.at("schema_version").get<int>() != kSchemaVersion) {
        throw std::runtime_error(path + ": unsupported schema version");
    }
    Dataset d;
    d.split = split_from_string(header.at("split").get<std::string>());
    d.config = SimConfig::from_json(header.at("config"));
    d.normalization.mean = header.at("normalization").at("mean").get<double>();
    d.normalization.std = header.at("normalization").at("std").get<double>();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        d.trajectories.push_back(PatientTrajectory::from_json(nlohmann::json::parse(line)));
    }
    return d;
}

}  // namespace s4cf::sim
