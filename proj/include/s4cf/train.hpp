// Losses, Adam, the training loop and evaluation metrics.
#pragma once

#include "s4cf/model.hpp"
#include "s4cf/sim.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace s4cf::train {

using s4cf::Matrix;
using nn::Var;
using s4cf::Vector;

/// Which treatment the treatment head is trained to predict.
enum class TreatmentTarget { any, chemo, radio };
std::string to_string(TreatmentTarget t);
TreatmentTarget treatment_target_from_string(const std::string& s);

// [normalized volume, stage one-hot (4), chemo, radio, dt, static (2)]
inline constexpr int kFeatureWidth = 10;

struct Features {
    Matrix inputs;    // L x kFeatureWidth
    Vector target_y;  // normalized volume at k + 1
    Vector target_a;  // treatment indicator at k + 1
    Vector mask;      // 1 where a target exists

    Eigen::Index length() const { return inputs.rows(); }
    std::size_t unmasked() const;
};

/// One-step-ahead features; `begin`/`max_len` select a window of observations
/// (max_len 0 keeps everything from `begin`).
Features featurize(const sim::PatientTrajectory& trajectory, const sim::Normalization& norm,
                   TreatmentTarget target = TreatmentTarget::any, std::size_t begin = 0,
                   std::size_t max_len = 0);

/// Mean squared error over unmasked positions. Throws on an empty mask.
double outcome_loss(const Vector& y, const Vector& yhat, const Vector& mask);
/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
double treatment_loss(const Vector& a, const Vector& ahat, const Vector& mask);
/// loss_y - mu * loss_a.
double total_loss(double loss_y, double loss_a, double mu);

// Tape versions; yhat and ahat are L x 1 nodes.
Var outcome_loss(Var yhat, const Vector& y, const Vector& mask);
Var treatment_loss(Var ahat, const Vector& a, const Vector& mask);

inline constexpr double kProbabilityClamp = 1e-7;

struct AdamMoments {
    Matrix m;
    Matrix v;
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update of `param` in place; t >= 1.
void adam_step(Matrix& param, const Matrix& grad, AdamMoments& state, double lr, long t,
               const AdamHyper& hyper = {});

/// Adam over a model's parameters with one learning rate per group.
class Adam {
public:
    Adam(double lr_ssm, double lr_other, AdamHyper hyper = {});
    /// grads are aligned with params (same order and shapes).
    void step(const std::vector<nn::ParameterRef>& params, const std::vector<Matrix>& grads);
    long steps() const { return t_; }

private:
    double lr_ssm_, lr_other_;
    AdamHyper hyper_;
    long t_ = 0;
    std::vector<AdamMoments> state_;
};

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double lr_ssm = 5e-4;
    double lr_other = 2e-5;
    double mu = 0.5;
    std::uint64_t seed = 0;
    int max_len = 0;  // 0: no truncation
    int max_steps = 0;  // 0: no cap on optimizer steps
    nn::AdversarialMode adversarial = nn::AdversarialMode::reversal;
    TreatmentTarget target = TreatmentTarget::any;
    bool record_timing = true;
    std::string checkpoint_path;  // written after every epoch when set
    std::string history_path;     // CSV rewritten after every epoch when set

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct LossReport {
    int epoch = 0;
    double loss_y = 0.0;
    double loss_a = 0.0;
    double loss_total = 0.0;  // loss_y - mu * loss_a
    double loss_sum = 0.0;    // loss_y + loss_a
    double nrmse = 0.0;
    double rmse = 0.0;
    double rmse_treated = 0.0;
    double rmse_untreated = 0.0;
    std::size_t n_treated = 0;
    std::size_t n_untreated = 0;
    double wall_seconds = 0.0;

    nlohmann::json to_json() const;
};

inline constexpr const char* kHistoryHeader =
    "epoch,loss_y,loss_a,loss_total,nrmse,rmse_treated,rmse_untreated,wall_seconds";
std::string history_csv(const std::vector<LossReport>& history);

class NonFiniteLossError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Trains in place. `validation` (may be empty) supplies the per-epoch metrics;
/// the training split is used when it is empty.
std::vector<LossReport> train(nn::DeepS4Model& model, const sim::Dataset& train_set,
                              const sim::Dataset& validation, const TrainConfig& config);

/// A model, a baseline, or an oracle: (trajectory features) -> (yhat, ahat),
/// both normalized and of the feature length.
struct PredictorOutput {
    Vector yhat;
    Vector ahat;
};
using Predictor = std::function<PredictorOutput(const Features&)>;

Predictor model_predictor(const nn::DeepS4Model& model);
/// Next volume = current volume.
Predictor lvcf_predictor();
/// Next volume = training mean (0 after normalization).
Predictor mean_predictor();
/// Returns the true targets.
Predictor oracle_predictor();

enum class EvalMode { factual, counterfactual };
std::string to_string(EvalMode m);
EvalMode eval_mode_from_string(const std::string& s);

struct EvalOptions {
    EvalMode mode = EvalMode::factual;
    double mu = 0.5;  // only for loss_total
    TreatmentTarget target = TreatmentTarget::any;
    std::size_t split_points = 3;  // per patient, counterfactual mode
};

/// nrmse = RMSE of denormalized predictions / (max - min of the true values).
/// Factual strata split on the next-step treatment indicator; counterfactual
/// strata are the always-treat and never-treat plans.
LossReport evaluate(const Predictor& predictor, const sim::Dataset& dataset,
                    const EvalOptions& options = {});
LossReport evaluate(const nn::DeepS4Model& model, const sim::Dataset& dataset,
                    const EvalOptions& options = {});

}  // namespace s4cf::train
