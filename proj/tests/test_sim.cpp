#include "doctest.h"

#include "s4cf/sim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

using namespace s4cf::sim;

namespace {

SimConfig quiet_config(int n = 20) {
    SimConfig c;
    c.n = n;
    c.seed = 5;
    c.tumor.sigma = 0.0;
    return c;
}

double mean_count(const StagePath& path, double kappa, const HawkesParams& hp, int runs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double total = 0;
    for (int r = 0; r < runs; ++r) total += static_cast<double>(hawkes_sample(path, kappa, 60.0, hp, rng).size());
    return total / runs;
}

}  // namespace

TEST_CASE("tumor step") {
    TumorParams p;
    p.sigma = 0.0;
    const double k = p.carrying_capacity();
    CHECK(k == doctest::Approx(kPi / 6.0 * 13.0 * 13.0 * 13.0));
    CHECK(tumor_step(k, 0, 0, 0.25, p, 0.0) == doctest::Approx(k).epsilon(1e-15));
    for (double v : {0.01, 1.0, 50.0, 1000.0}) CHECK(tumor_step(v, 0, 0, 0.25, p, 0.0) > v);

    const double v = 0.5, dt = 0.25;
    CHECK(tumor_step(v, 0, 0, dt, p, 0.0) == doctest::Approx(v * (1 + p.rho * std::log(k / v) * dt)).epsilon(1e-14));

    // Treatment kills and the clamp.
    CHECK(tumor_step(v, 5.0, 0, dt, p, 0.0) < tumor_step(v, 0, 0, dt, p, 0.0));
    CHECK(tumor_step(v, 0, 2.0, dt, p, 0.0) < tumor_step(v, 0, 0, dt, p, 0.0));
    CHECK(tumor_step(p.v_min, 1e6, 0, dt, p, 0.0) == p.v_min);
    CHECK(tumor_step(k, 0, 0, dt, p, 50.0) == k);

    CHECK_THROWS(tumor_step(0.0, 0, 0, dt, p, 0.0));
    CHECK_THROWS(tumor_step(1.0, 0, 0, 0.0, p, 0.0));
}

TEST_CASE("chemo concentration halves each half-life") {
    CHECK(chemo_decay(5.0, 2.0, 1.0) == doctest::Approx(1.25));
    CHECK(chemo_decay(5.0, 0.0, 1.0) == 5.0);

    // Impulse at day 0 under an always-treat plan with all later days untreated.
    SimConfig c = quiet_config(1);
    TreatmentPlan plan;
    plan.kind = TreatmentPlan::Kind::custom;
    plan.custom.assign(61, DailyDecision{});
    plan.custom[0].chemo = 1;
    const LatentPath path = simulate_latent(c, patient_setup(c, 0), plan);
    const auto i2 = static_cast<std::size_t>(std::llround(2.0 / path.dt));
    CHECK(path.chemo_conc[i2] == doctest::Approx(1.25).epsilon(1e-12));
}

TEST_CASE("treatment policy") {
    for (double d : {0.5, 3.0, 12.9}) CHECK(treatment_probability(d, 0.0) == 0.5);
    for (double g : {0.0, 1.0, 10.0, 100.0}) CHECK(treatment_probability(6.5, g) == 0.5);
    CHECK(treatment_probability(13.0, 10.0) == doctest::Approx(1.0 / (1.0 + std::exp(-5.0))).epsilon(1e-14));
    CHECK(treatment_probability(13.0, 10.0) == doctest::Approx(0.9933).epsilon(1e-4));

    for (double g : {0.5, 5.0, 20.0}) {
        double prev = 0.0;
        for (double d = 0.1; d <= 13.0; d += 0.1) {
            const double p = treatment_probability(d, g);
            CHECK(p >= prev);
            prev = p;
        }
    }
    CHECK(treatment_policy(6.5, 0.0, 0.49) == 1);
    CHECK(treatment_policy(6.5, 0.0, 0.51) == 0);

    std::mt19937_64 rng(1);
    int treated = 0;
    for (int i = 0; i < 20000; ++i) treated += treatment_policy(13.0, 10.0, rng);
    CHECK(treated / 20000.0 == doctest::Approx(0.9933).epsilon(0.01));
}

TEST_CASE("staging thresholds") {
    CHECK(stage_of(2.0) == 1);
    CHECK(stage_of(2.999) == 1);
    CHECK(stage_of(3.0) == 2);
    CHECK(stage_of(5.0) == 3);
    CHECK(stage_of(7.0) == 4);
    CHECK(stage_of(12.9) == 4);
    CHECK_THROWS(stage_of(0.0));
}

TEST_CASE("homogeneous Poisson count") {
    HawkesParams hp;
    hp.alpha = 0.0;
    const int runs = 1000;
    const double m = mean_count(StagePath::constant(1, 60.0), 1.0, hp, runs, 77) - 1.0;  // forced t = 0
    const double se = std::sqrt(30.0 / runs);
    CHECK(std::abs(m - 30.0) <= 3 * se);
}

TEST_CASE("sampling intensity grows with kappa at high stage") {
    HawkesParams hp;
    const StagePath stage4 = StagePath::constant(4, 60.0);
    const double k1 = mean_count(stage4, 1.0, hp, 500, 78);
    const double k5 = mean_count(stage4, 5.0, hp, 500, 79);
    const double k20 = mean_count(stage4, 20.0, hp, 500, 80);
    CHECK(k20 > k5);
    CHECK(k5 > k1);

    // At kappa = 1 stage does not matter.
    HawkesParams poisson;
    poisson.alpha = 0.0;
    const double s1 = mean_count(StagePath::constant(1, 60.0), 1.0, poisson, 1000, 81) - 1.0;
    const double s4 = mean_count(stage4, 1.0, poisson, 1000, 82) - 1.0;
    CHECK(std::abs(s4 / s1 - 1.0) < 3 * std::sqrt(2.0 / (30.0 * 1000)) * 1.5);
}

TEST_CASE("hawkes sample contract") {
    HawkesParams hp;
    const StagePath path = StagePath::constant(2, 60.0);
    std::mt19937_64 a(9), b(9);
    const auto ta = hawkes_sample(path, 3.0, 60.0, hp, a);
    CHECK(ta == hawkes_sample(path, 3.0, 60.0, hp, b));
    REQUIRE_FALSE(ta.empty());
    CHECK(ta.front() == 0.0);
    for (std::size_t i = 1; i < ta.size(); ++i) CHECK(ta[i] > ta[i - 1]);
    CHECK(ta.back() <= 60.0);

    HawkesParams explosive = hp;
    explosive.alpha = 1.0;
    CHECK_THROWS(hawkes_sample(path, 1.0, 60.0, explosive, a));
    CHECK_THROWS(hawkes_sample(path, 0.5, 60.0, hp, a));
}

TEST_CASE("config validation") {
    SimConfig c;
    CHECK_NOTHROW(c.validate());
    auto bad = [](auto edit) {
        SimConfig c;
        edit(c);
        return c;
    };
    CHECK_THROWS(bad([](SimConfig& c) { c.n = 0; }).validate());
    CHECK_THROWS(bad([](SimConfig& c) { c.gamma_c = -1; }).validate());
    CHECK_THROWS(bad([](SimConfig& c) { c.gamma_r = -1; }).validate());
    CHECK_THROWS(bad([](SimConfig& c) { c.kappa = 0.5; }).validate());
    CHECK_THROWS(bad([](SimConfig& c) { c.horizon = 0; }).validate());
    CHECK_THROWS(bad([](SimConfig& c) { c.dt_sim = 0; }).validate());
    CHECK_THROWS(bad([](SimConfig& c) { c.dt_sim = 1.5; }).validate());

    SimConfig custom;
    custom.kappa = 7.5;
    custom.tumor.beta_c = 0.05;
    custom.hawkes.alpha = 0.3;
    const SimConfig back = SimConfig::from_json(custom.to_json());
    CHECK(back.to_json() == custom.to_json());
}

TEST_CASE("generated trajectories satisfy the invariants") {
    SimConfig c;
    c.n = 60;
    c.kappa = 10.0;
    c.gamma_c = c.gamma_r = 5.0;
    c.seed = 3;
    const DatasetSplits s = generate_dataset(c);
    CHECK(s.train.size() == 48);
    CHECK(s.val.size() == 6);
    CHECK(s.test.size() == 6);
    const double k = c.tumor.carrying_capacity();
    for (const Dataset* d : {&s.train, &s.val, &s.test}) {
        for (const auto& t : d->trajectories) {
            const std::size_t n = t.size();
            REQUIRE(n >= 1);
            CHECK(t.volumes.size() == n);
            CHECK(t.diameters.size() == n);
            CHECK(t.chemo.size() == n);
            CHECK(t.radio.size() == n);
            CHECK(t.stage.size() == n);
            CHECK(t.obs_times.front() == 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                if (i > 0) CHECK(t.obs_times[i] > t.obs_times[i - 1]);
                CHECK(t.obs_times[i] <= c.horizon);
                CHECK(t.volumes[i] >= c.tumor.v_min);
                CHECK(t.volumes[i] <= k * (1 + 1e-12));
                CHECK(t.stage[i] == stage_of(t.diameters[i]));
                CHECK(t.diameters[i] == doctest::Approx(diameter_from_volume(t.volumes[i])));
                CHECK((t.chemo[i] == 0 || t.chemo[i] == 1));
                CHECK((t.radio[i] == 0 || t.radio[i] == 1));
            }
        }
    }
    // Normalization comes from the training split alone.
    const Normalization norm = compute_normalization(s.train.trajectories);
    CHECK(s.train.normalization.mean == norm.mean);
    CHECK(s.test.normalization.std == norm.std);
    CHECK(norm.std > 0);
    std::vector<double> vols;
    for (const auto& t : s.train.trajectories) vols.insert(vols.end(), t.volumes.begin(), t.volumes.end());
    const double mean = std::accumulate(vols.begin(), vols.end(), 0.0) / static_cast<double>(vols.size());
    CHECK(norm.mean == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("split sizes") {
    CHECK(split_sizes(10) == std::array<std::size_t, 3>{8, 1, 1});
    CHECK(split_sizes(1) == std::array<std::size_t, 3>{1, 0, 0});
    CHECK(split_sizes(100) == std::array<std::size_t, 3>{80, 10, 10});
    for (int n = 1; n < 200; ++n) {
        const auto s = split_sizes(n);
        CHECK(s[0] + s[1] + s[2] == static_cast<std::size_t>(n));
        CHECK(s[0] >= 1);
    }
    CHECK_THROWS(split_sizes(0));
}

TEST_CASE("generation is deterministic and serialization is lossless") {
    SimConfig c;
    c.n = 10;
    c.seed = 7;
    const DatasetSplits a = generate_dataset(c);
    const DatasetSplits b = generate_dataset(c);
    CHECK(serialize_jsonl(a.train) == serialize_jsonl(b.train));
    CHECK(serialize_jsonl(a.test) == serialize_jsonl(b.test));

    // Patients depend only on (seed, index).
    SimConfig bigger = c;
    bigger.n = 30;
    CHECK(simulate_patient(c, 4).to_json() == simulate_patient(bigger, 4).to_json());
    CHECK(patient_seed(7, 4) != patient_seed(7, 5));
    CHECK(patient_seed(7, 4) != patient_seed(8, 4));

    const auto path = (std::filesystem::temp_directory_path() / "s4cf_sim_roundtrip.jsonl").string();
    write_jsonl(a.train, path);
    const Dataset r = read_jsonl(path);
    std::filesystem::remove(path);
    REQUIRE(r.size() == a.train.size());
    CHECK(r.split == Split::train);
    CHECK(r.normalization.mean == a.train.normalization.mean);
    CHECK(r.normalization.std == a.train.normalization.std);
    CHECK(r.config.to_json() == c.to_json());
    for (std::size_t i = 0; i < r.size(); ++i) {
        const auto& x = r.trajectories[i];
        const auto& y = a.train.trajectories[i];
        CHECK(x.obs_times == y.obs_times);
        CHECK(x.volumes == y.volumes);
        CHECK(x.diameters == y.diameters);
        CHECK(x.chemo == y.chemo);
        CHECK(x.radio == y.radio);
        CHECK(x.stage == y.stage);
        CHECK(x.static_features == y.static_features);
        CHECK(x.seed == y.seed);
    }
    CHECK(serialize_jsonl(r) == serialize_jsonl(a.train));
}

TEST_CASE("confounding strength controls the diameter-treatment correlation") {
    SimConfig c;
    c.n = 200;
    c.seed = 11;
    const ConfoundingCheck none = diameter_treatment_correlation(c);
    CHECK(none.patient_days >= 5000);
    CHECK(std::abs(none.correlation) <= 0.05);

    c.gamma_c = 10.0;
    const ConfoundingCheck strong = diameter_treatment_correlation(c);
    CHECK(strong.correlation > 0.3);
}

TEST_CASE("counterfactual rollouts") {
    SimConfig c = quiet_config(10);
    c.tumor.sigma = 0.01;
    c.gamma_c = c.gamma_r = 2.0;
    const PatientTrajectory t = simulate_patient(c, 3);
    REQUIRE(t.size() >= 4);
    const double split = t.obs_times[1];
    const std::size_t k = t.size() - 2;
    const auto same = counterfactual_rollout(c, t, split, TreatmentPlan::factual(), k);
    REQUIRE(same.size() == k);
    for (std::size_t i = 0; i < k; ++i) CHECK(same[i] == t.volumes[i + 2]);

    // A custom plan replaying the factual decisions is the factual path.
    const LatentPath latent = simulate_latent(c, patient_setup(c, 3));
    TreatmentPlan replay;
    replay.kind = TreatmentPlan::Kind::custom;
    replay.custom = latent.decisions;
    CHECK(counterfactual_rollout(c, t, split, replay, k) == same);

    CHECK_THROWS(counterfactual_rollout(c, t, -1.0, TreatmentPlan::factual(), 1));
    CHECK_THROWS(counterfactual_rollout(c, t, c.horizon + 1, TreatmentPlan::factual(), 1));
}

TEST_CASE("treatment never increases volume without noise") {
    const SimConfig c = quiet_config(15);
    for (std::size_t i = 0; i < 15; ++i) {
        const PatientTrajectory t = simulate_patient(c, i);
        if (t.size() < 2) continue;
        const double split = t.obs_times[0];
        const auto never = counterfactual_rollout(c, t, split, TreatmentPlan::never_treat(0), t.size());
        const auto always = counterfactual_rollout(c, t, split, TreatmentPlan::always_treat(0), t.size());
        REQUIRE(never.size() == always.size());
        for (std::size_t s = 0; s < never.size(); ++s) CHECK(never[s] >= always[s]);
    }
}

TEST_CASE("untreated latent step matches the Euler formula") {
    const SimConfig c = quiet_config(1);
    const PatientSetup setup = patient_setup(c, 0);
    const LatentPath path = simulate_latent(c, setup, TreatmentPlan::never_treat(0));
    const double k = c.tumor.carrying_capacity();
    const double v0 = path.volumes[0];
    CHECK(path.volumes[1] == doctest::Approx(v0 * (1 + c.tumor.rho * std::log(k / v0) * c.dt_sim)).epsilon(1e-14));
    CHECK(v0 == doctest::Approx(volume_from_diameter(setup.initial_diameter)));
}
