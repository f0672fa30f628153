#include "s4cf/train.hpp"

#include "s4cf/util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace s4cf::train {

std::string to_string(TreatmentTarget t) {
    switch (t) {
        case TreatmentTarget::any: return "any";
        case TreatmentTarget::chemo: return "chemo";
        case TreatmentTarget::radio: return "radio";
    }
    return "any";
}

TreatmentTarget treatment_target_from_string(const std::string& s) {
    if (s == "any") return TreatmentTarget::any;
    if (s == "chemo") return TreatmentTarget::chemo;
    if (s == "radio") return TreatmentTarget::radio;
    throw std::invalid_argument("unknown treatment target: " + s);
}

namespace {

int treatment_indicator(const sim::PatientTrajectory& p, std::size_t k, TreatmentTarget t) {
    switch (t) {
        case TreatmentTarget::chemo: return p.chemo[k];
        case TreatmentTarget::radio: return p.radio[k];
        case TreatmentTarget::any: break;
    }
    return p.any_treatment(k);
}

void check_lengths(const Vector& a, const Vector& b, const Vector& mask, const char* what) {
    if (a.size() != b.size() || a.size() != mask.size()) {
        throw DimensionError(std::string(what) + ": length mismatch");
    }
}

double mask_count(const Vector& mask, const char* what) {
    const double n = mask.sum();
    if (!(n > 0.0)) throw std::invalid_argument(std::string(what) + ": empty mask");
    return n;
}

}  // namespace

std::size_t Features::unmasked() const {
    return static_cast<std::size_t>(std::llround(mask.sum()));
}

Features featurize(const sim::PatientTrajectory& trajectory, const sim::Normalization& norm,
                   TreatmentTarget target, std::size_t begin, std::size_t max_len) {
    const std::size_t total = trajectory.size();
    if (total < 2) throw std::invalid_argument("featurize: need at least 2 observations");
    if (begin + 1 >= total) throw std::invalid_argument("featurize: window starts past the end");
    std::size_t end = total;
    if (max_len > 0) end = std::min(total, begin + max_len);
    if (end - begin < 2) throw std::invalid_argument("featurize: window shorter than 2");
    const auto L = static_cast<Eigen::Index>(end - begin);

    Features f;
    f.inputs = Matrix::Zero(L, kFeatureWidth);
    f.target_y = Vector::Zero(L);
    f.target_a = Vector::Zero(L);
    f.mask = Vector::Zero(L);
    for (Eigen::Index r = 0; r < L; ++r) {
        const std::size_t k = begin + static_cast<std::size_t>(r);
        f.inputs(r, 0) = norm.normalize(trajectory.volumes[k]);
        f.inputs(r, trajectory.stage[k]) = 1.0;  // columns 1..4
        f.inputs(r, 5) = trajectory.chemo[k];
        f.inputs(r, 6) = trajectory.radio[k];
        f.inputs(r, 7) = r == 0 ? 0.0 : trajectory.obs_times[k] - trajectory.obs_times[k - 1];
        for (std::size_t s = 0; s < 2 && s < trajectory.static_features.size(); ++s) {
            f.inputs(r, 8 + static_cast<Eigen::Index>(s)) = trajectory.static_features[s];
        }
        if (r + 1 < L) {
            f.target_y(r) = norm.normalize(trajectory.volumes[k + 1]);
            f.target_a(r) = treatment_indicator(trajectory, k + 1, target);
            f.mask(r) = 1.0;
        }
    }
    return f;
}

double outcome_loss(const Vector& y, const Vector& yhat, const Vector& mask) {
    check_lengths(y, yhat, mask, "outcome_loss");
    const double n = mask_count(mask, "outcome_loss");
    return ((y - yhat).array().square() * mask.array()).sum() / n;
}

double treatment_loss(const Vector& a, const Vector& ahat, const Vector& mask) {
    check_lengths(a, ahat, mask, "treatment_loss");
    const double n = mask_count(mask, "treatment_loss");
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (mask(i) == 0.0) continue;
        const double p = std::clamp(ahat(i), kProbabilityClamp, 1.0 - kProbabilityClamp);
        s -= mask(i) * (a(i) * std::log(p) + (1.0 - a(i)) * std::log(1.0 - p));
    }
    return s / n;
}

double total_loss(double loss_y, double loss_a, double mu) { return loss_y - mu * loss_a; }

Var outcome_loss(Var yhat, const Vector& y, const Vector& mask) {
    if (yhat.cols() != 1 || yhat.rows() != y.size()) throw DimensionError("outcome_loss: shape mismatch");
    check_lengths(y, y, mask, "outcome_loss");
    const double n = mask_count(mask, "outcome_loss");
    nn::Tape& t = *yhat.tape;
    const Var err = mul(sub(yhat, t.constant(y)), t.constant(mask));
    return scale(sum(square(err)), 1.0 / n);
}

Var treatment_loss(Var ahat, const Vector& a, const Vector& mask) {
    if (ahat.cols() != 1 || ahat.rows() != a.size()) throw DimensionError("treatment_loss: shape mismatch");
    check_lengths(a, a, mask, "treatment_loss");
    const double n = mask_count(mask, "treatment_loss");
    nn::Tape& t = *ahat.tape;
    const Var p = clamp(ahat, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const Vector wa = a.cwiseProduct(mask);
    const Vector wb = (Vector::Ones(a.size()) - a).cwiseProduct(mask);
    const Var ll = add(mul(t.constant(wa), log(p)),
                       mul(t.constant(wb), log(add_scalar(scale(p, -1.0), 1.0))));
    return scale(sum(ll), -1.0 / n);
}

void adam_step(Matrix& param, const Matrix& grad, AdamMoments& state, double lr, long t,
               const AdamHyper& h) {
    if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
    if (grad.rows() != param.rows() || grad.cols() != param.cols()) {
        throw DimensionError("adam_step: gradient shape does not match parameter");
    }
    if (state.m.size() == 0) {
        state.m = Matrix::Zero(param.rows(), param.cols());
        state.v = Matrix::Zero(param.rows(), param.cols());
    }
    if (state.m.rows() != param.rows() || state.m.cols() != param.cols()) {
        throw DimensionError("adam_step: moment shape does not match parameter");
    }
    state.m = h.beta1 * state.m + (1.0 - h.beta1) * grad;
    state.v = h.beta2 * state.v + (1.0 - h.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    param.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + h.eps);
}

Adam::Adam(double lr_ssm, double lr_other, AdamHyper hyper)
    : lr_ssm_(lr_ssm), lr_other_(lr_other), hyper_(hyper) {
    if (!(lr_ssm > 0.0) || !(lr_other > 0.0)) throw std::invalid_argument("Adam: learning rates must be > 0");
}

void Adam::step(const std::vector<nn::ParameterRef>& params, const std::vector<Matrix>& grads) {
    if (params.size() != grads.size()) throw DimensionError("Adam: one gradient per parameter required");
    if (state_.empty()) state_.resize(params.size());
    if (state_.size() != params.size()) throw DimensionError("Adam: parameter list changed");
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double lr = params[i].group == nn::ParamGroup::ssm ? lr_ssm_ : lr_other_;
        adam_step(*params[i].value, grads[i], state_[i], lr, t_, hyper_);
    }
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(lr_ssm > 0.0) || !(lr_other > 0.0)) fail("learning rates must be > 0");
    if (!(mu >= 0.0)) fail("mu must be >= 0");
    if (max_len < 0 || max_len == 1) fail("max_len must be 0 or >= 2");
    if (max_steps < 0) fail("max_steps must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
    return {
        {"epochs", epochs},
        {"batch_size", batch_size},
        {"lr_ssm", lr_ssm},
        {"lr_other", lr_other},
        {"mu", mu},
        {"seed", seed},
        {"max_len", max_len},
        {"max_steps", max_steps},
        {"adversarial", nn::to_string(adversarial)},
        {"treatment_target", to_string(target)},
    };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_ssm = j.value("lr_ssm", c.lr_ssm);
    c.lr_other = j.value("lr_other", c.lr_other);
    c.mu = j.value("mu", c.mu);
    c.seed = j.value("seed", c.seed);
    c.max_len = j.value("max_len", c.max_len);
    c.max_steps = j.value("max_steps", c.max_steps);
    if (j.contains("adversarial")) c.adversarial = nn::adversarial_mode_from_string(j.at("adversarial"));
    if (j.contains("treatment_target")) c.target = treatment_target_from_string(j.at("treatment_target"));
    return c;
}

nlohmann::json LossReport::to_json() const {
    return {
        {"epoch", epoch},
        {"loss_y", loss_y},
        {"loss_a", loss_a},
        {"loss_total", loss_total},
        {"loss_sum", loss_sum},
        {"nrmse", nrmse},
        {"rmse", rmse},
        {"rmse_treated", rmse_treated},
        {"rmse_untreated", rmse_untreated},
        {"n_treated", n_treated},
        {"n_untreated", n_untreated},
        {"wall_seconds", wall_seconds},
    };
}

std::string history_csv(const std::vector<LossReport>& history) {
    std::string out = kHistoryHeader;
    out += '\n';
    for (const auto& r : history) {
        out += std::to_string(r.epoch);
        for (double v : {r.loss_y, r.loss_a, r.loss_total, r.nrmse, r.rmse_treated, r.rmse_untreated,
                         r.wall_seconds}) {
            out += ',';
            out += format_double(v);
        }
        out += '\n';
    }
    return out;
}

namespace {

std::vector<std::size_t> usable(const sim::Dataset& d) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.trajectories.size(); ++i) {
        if (d.trajectories[i].size() >= 2) idx.push_back(i);
    }
    return idx;
}

void dump_nonfinite(const nn::DeepS4Model& model, const TrainConfig& cfg, int epoch, long step,
                    double ly, double la, const std::vector<std::size_t>& patients) {
    std::ostringstream msg;
    msg << "non-finite loss at epoch " << epoch << ", step " << step << " (loss_y=" << ly
        << ", loss_a=" << la << ")";
    if (!cfg.checkpoint_path.empty()) {
        nlohmann::json diag = {
            {"epoch", epoch}, {"step", step},       {"loss_y", std::isfinite(ly) ? ly : 0.0},
            {"loss_a", std::isfinite(la) ? la : 0.0}, {"loss_y_finite", std::isfinite(ly)},
            {"loss_a_finite", std::isfinite(la)},      {"patients", patients},
        };
        nlohmann::json norms = nlohmann::json::object();
        for (const auto& [name, m] : model.parameters()) {
            norms[name] = m->allFinite() ? nlohmann::json(m->norm()) : nlohmann::json("non-finite");
        }
        diag["parameter_norms"] = norms;
        const std::string path = cfg.checkpoint_path + ".nonfinite.json";
        atomic_write(path, diag.dump(2));
        msg << "; state dumped to " << path;
    }
    throw NonFiniteLossError(msg.str());
}

}  // namespace

std::vector<LossReport> train(nn::DeepS4Model& model, const sim::Dataset& train_set,
                              const sim::Dataset& validation, const TrainConfig& cfg) {
    cfg.validate();
    if (model.config().features != kFeatureWidth) {
        throw std::invalid_argument("train: model must take " + std::to_string(kFeatureWidth) +
                                    " input features");
    }
    std::vector<std::size_t> order = usable(train_set);
    if (order.empty()) throw std::invalid_argument("train: no trajectory with at least 2 observations");
    const sim::Dataset& monitor = validation.empty() ? train_set : validation;

    model.set_mu(cfg.mu);
    model.set_adversarial_mode(cfg.adversarial);
    Adam opt(cfg.lr_ssm, cfg.lr_other);
    std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x7A11ULL));
    const auto batch = static_cast<std::size_t>(cfg.batch_size);

    EvalOptions eval_opts;
    eval_opts.mu = cfg.mu;
    eval_opts.target = cfg.target;

    std::vector<LossReport> history;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);
        double sum_y = 0.0, sum_a = 0.0;
        std::size_t seen = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
            if (cfg.max_steps > 0 && opt.steps() >= cfg.max_steps) break;
            const std::size_t b1 = std::min(order.size(), b0 + batch);
            nn::Tape tape;
            const nn::BoundModel bound = model.bind(tape);
            std::vector<Var> ly, la;
            for (std::size_t i = b0; i < b1; ++i) {
                const auto& traj = train_set.trajectories[order[i]];
                std::size_t begin = 0;
                const auto max_len = static_cast<std::size_t>(cfg.max_len);
                if (max_len > 0 && traj.size() > max_len) {
                    std::uniform_int_distribution<std::size_t> pick(0, traj.size() - max_len);
                    begin = pick(rng);
                }
                const Features f = featurize(traj, train_set.normalization, cfg.target, begin, max_len);
                const nn::ModelOutputs out = model.forward(bound, f.inputs);
                ly.push_back(outcome_loss(out.yhat, f.target_y, f.mask));
                la.push_back(treatment_loss(out.ahat, f.target_a, f.mask));
            }
            const double inv = 1.0 / static_cast<double>(ly.size());
            Var Ly = ly[0], La = la[0];
            for (std::size_t i = 1; i < ly.size(); ++i) {
                Ly = add(Ly, ly[i]);
                La = add(La, la[i]);
            }
            Ly = scale(Ly, inv);
            La = scale(La, inv);
            const double vy = Ly.scalar(), va = La.scalar();
            if (!std::isfinite(vy) || !std::isfinite(va)) {
                dump_nonfinite(model, cfg, epoch, opt.steps() + 1, vy, va,
                               std::vector<std::size_t>(order.begin() + static_cast<long>(b0),
                                                        order.begin() + static_cast<long>(b1)));
            }
            const Var objective = cfg.adversarial == nn::AdversarialMode::reversal
                                      ? add(Ly, La)
                                      : sub(Ly, scale(La, cfg.mu));
            tape.backward(objective);
            std::vector<Matrix> grads;
            grads.reserve(bound.leaves.size());
            for (const Var& leaf : bound.leaves) grads.push_back(tape.grad(leaf));
            opt.step(model.parameters(), grads);

            sum_y += vy * static_cast<double>(ly.size());
            sum_a += va * static_cast<double>(ly.size());
            seen += ly.size();
        }

        LossReport r = evaluate(model, monitor, eval_opts);
        r.epoch = epoch;
        if (seen > 0) {
            r.loss_y = sum_y / static_cast<double>(seen);
            r.loss_a = sum_a / static_cast<double>(seen);
        }
        r.loss_total = total_loss(r.loss_y, r.loss_a, cfg.mu);
        r.loss_sum = r.loss_y + r.loss_a;
        if (cfg.record_timing) {
            r.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        }
        history.push_back(r);

        if (!cfg.checkpoint_path.empty()) nn::save_checkpoint(model, cfg.checkpoint_path);
        if (!cfg.history_path.empty()) atomic_write(cfg.history_path, history_csv(history));
    }
    return history;
}

Predictor model_predictor(const nn::DeepS4Model& model) {
    return [&model](const Features& f) {
        nn::Prediction p = model.predict(f.inputs);
        return PredictorOutput{std::move(p.yhat), std::move(p.ahat)};
    };
}

Predictor lvcf_predictor() {
    return [](const Features& f) {
        return PredictorOutput{f.inputs.col(0), Vector::Constant(f.length(), 0.5)};
    };
}

Predictor mean_predictor() {
    return [](const Features& f) {
        return PredictorOutput{Vector::Zero(f.length()), Vector::Constant(f.length(), 0.5)};
    };
}

Predictor oracle_predictor() {
    return [](const Features& f) {
        Vector a = f.target_a.cwiseMax(kProbabilityClamp).cwiseMin(1.0 - kProbabilityClamp);
        return PredictorOutput{f.target_y, std::move(a)};
    };
}

std::string to_string(EvalMode m) { return m == EvalMode::factual ? "factual" : "counterfactual"; }

EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "factual") return EvalMode::factual;
    if (s == "counterfactual") return EvalMode::counterfactual;
    throw std::invalid_argument("unknown evaluation mode: " + s);
}

namespace {

struct Accumulator {
    double sq = 0.0, sq_norm = 0.0, sq_treated = 0.0, sq_untreated = 0.0, bce = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    std::size_t n = 0, n_treated = 0, n_untreated = 0;

    void add(double y_true, double y_pred, double norm_err, double a, double ahat) {
        const double e = y_pred - y_true;
        sq += e * e;
        sq_norm += norm_err * norm_err;
        if (a > 0.5) {
            sq_treated += e * e;
            ++n_treated;
        } else {
            sq_untreated += e * e;
            ++n_untreated;
        }
        const double p = std::clamp(ahat, kProbabilityClamp, 1.0 - kProbabilityClamp);
        bce -= a * std::log(p) + (1.0 - a) * std::log(1.0 - p);
        lo = std::min(lo, y_true);
        hi = std::max(hi, y_true);
        ++n;
    }

    LossReport report(double mu) const {
        LossReport r;
        if (n == 0) throw std::invalid_argument("evaluate: no scored positions");
        const double dn = static_cast<double>(n);
        r.rmse = std::sqrt(sq / dn);
        const double range = hi - lo;
        r.nrmse = range > 0.0 ? r.rmse / range : (r.rmse == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
        r.loss_y = sq_norm / dn;
        r.loss_a = bce / dn;
        r.loss_total = total_loss(r.loss_y, r.loss_a, mu);
        r.loss_sum = r.loss_y + r.loss_a;
        r.n_treated = n_treated;
        r.n_untreated = n_untreated;
        r.rmse_treated = n_treated ? std::sqrt(sq_treated / static_cast<double>(n_treated)) : 0.0;
        r.rmse_untreated = n_untreated ? std::sqrt(sq_untreated / static_cast<double>(n_untreated)) : 0.0;
        return r;
    }
};

std::vector<std::size_t> split_indices(std::size_t length, std::size_t count) {
    std::vector<std::size_t> out;
    if (length < 2 || count == 0) return out;
    const std::size_t last = length - 2;
    for (std::size_t j = 0; j < count; ++j) {
        const std::size_t s = (j + 1) * (length - 1) / (count + 1);
        const std::size_t c = std::min(s, last);
        if (out.empty() || c > out.back()) out.push_back(c);
    }
    return out;
}

}  // namespace

LossReport evaluate(const Predictor& predictor, const sim::Dataset& dataset, const EvalOptions& opt) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const sim::Normalization& norm = dataset.normalization;
    Accumulator acc;
    for (const auto& traj : dataset.trajectories) {
        if (traj.size() < 2) continue;
        Features f = featurize(traj, norm, opt.target);
        if (opt.mode == EvalMode::factual) {
            const PredictorOutput p = predictor(f);
            if (p.yhat.size() != f.length() || p.ahat.size() != f.length()) {
                throw DimensionError("evaluate: predictor output length mismatch");
            }
            for (Eigen::Index k = 0; k < f.length(); ++k) {
                if (f.mask(k) == 0.0) continue;
                acc.add(norm.denormalize(f.target_y(k)), norm.denormalize(p.yhat(k)),
                        p.yhat(k) - f.target_y(k), f.target_a(k), p.ahat(k));
            }
            continue;
        }
        for (std::size_t s : split_indices(traj.size(), opt.split_points)) {
            for (int treated = 1; treated >= 0; --treated) {
                const double t_split = traj.obs_times[s];
                const auto plan = treated ? sim::TreatmentPlan::always_treat(t_split)
                                          : sim::TreatmentPlan::never_treat(t_split);
                const auto truth = sim::counterfactual_rollout(dataset.config, traj, t_split, plan, 1);
                if (truth.empty()) continue;
                Features g;
                const auto rows = static_cast<Eigen::Index>(s + 1);
                g.inputs = f.inputs.topRows(rows);
                g.inputs(rows - 1, 5) = treated;
                g.inputs(rows - 1, 6) = treated;
                g.target_y = f.target_y.head(rows);
                g.target_y(rows - 1) = norm.normalize(truth[0]);
                g.target_a = f.target_a.head(rows);
                g.target_a(rows - 1) = treated;
                g.mask = f.mask.head(rows);
                const PredictorOutput p = predictor(g);
                if (p.yhat.size() != rows || p.ahat.size() != rows) {
                    throw DimensionError("evaluate: predictor output length mismatch");
                }
                const double yhat = p.yhat(rows - 1);
                acc.add(truth[0], norm.denormalize(yhat), yhat - g.target_y(rows - 1), treated,
                        p.ahat(rows - 1));
            }
        }
    }
    return acc.report(opt.mu);
}

LossReport evaluate(const nn::DeepS4Model& model, const sim::Dataset& dataset, const EvalOptions& options) {
    return evaluate(model_predictor(model), dataset, options);
}

}  // namespace s4cf::train
