// Deep S4 network: input encoder, stacked S4 layers (H independent SSM
// channels, position-wise mixing, smooth activation, residual), and two
// linear heads for outcome and treatment.
#pragma once

#include "s4cf/linalg.hpp"
#include "s4cf/ssm.hpp"
#include "s4cf/tape.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace s4cf::nn {

enum class Activation { gelu_tanh, tanh, relu, identity };
enum class AdversarialMode { reversal, literal };
enum class ParamGroup { ssm, other };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);
std::string to_string(AdversarialMode m);
AdversarialMode adversarial_mode_from_string(const std::string& s);

Var activate(Var x, Activation a);

struct ModelConfig {
    int layers = 4;
    int hidden = 64;   // H
    int state = 16;    // N
    int features = 1;  // F, width of each input row
    Activation activation = Activation::gelu_tanh;
    double mu = 0.5;
    AdversarialMode adversarial = AdversarialMode::reversal;

    void validate() const;
};

/// One S4 layer. Channel h uses row h of each H x N block.
struct S4Layer {
    Matrix lambda;     // H x N, real parameters of the normal part
    Matrix P;          // H x N
    Matrix Q;          // H x N
    Matrix B;          // H x N
    Matrix C;          // H x N
    Matrix log_delta;  // H x 1, fixed after init
    Matrix W;          // H x H, mixing applied as Y * W
    Matrix bias;       // 1 x H
};

/// Tape handles for one layer's discretized channels and mixing weights.
struct BoundLayer {
    std::vector<Var> abar;
    std::vector<Var> bbar;
    std::vector<Var> c;
    Var W;
    Var bias;
    Activation activation = Activation::gelu_tanh;
};

/// act(scan(u) * W + bias) + u for u of shape L x H.
Var s4_layer_forward(const BoundLayer& layer, Var u);

struct ParameterRef {
    std::string name;
    Matrix* value;
    ParamGroup group;
};

struct ModelOutputs {
    Var yhat;  // L x 1
    Var ahat;  // L x 1, in (0, 1)
    Var z;     // L x H
};

struct Prediction {
    Vector yhat;
    Vector ahat;
    Matrix z;
};

class DeepS4Model;

/// All model parameters registered as leaves on one tape, with the
/// discretized channel systems built once and shared by every sequence.
struct BoundModel {
    const DeepS4Model* model = nullptr;
    Tape* tape = nullptr;
    std::vector<Var> leaves;  // same order as DeepS4Model::parameters()
    Var encoder_weight, encoder_bias;
    std::vector<BoundLayer> layers;
    Var outcome_weight, outcome_bias;
    Var treatment_weight, treatment_bias;
};

class DeepS4Model {
public:
    DeepS4Model() = default;
    /// HiPPO-LegS initialization; deterministic given the seed.
    DeepS4Model(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    void set_mu(double mu);
    void set_adversarial_mode(AdversarialMode mode) { config_.adversarial = mode; }

    /// Trainable parameters in a fixed order. The non-const overload drops the
    /// cached discretizations, since the caller may write through the pointers.
    std::vector<ParameterRef> parameters();
    std::vector<std::pair<std::string, const Matrix*>> parameters() const;
    std::size_t trainable_count() const;
    /// layers * (H * 5N + H^2 + H) + 2 (H + 1) + (F H + H).
    static std::size_t expected_trainable_count(const ModelConfig& config);

    const std::vector<S4Layer>& layers() const { return layers_; }
    std::vector<S4Layer>& layers_mut();
    const Matrix& nplr_basis() const { return basis_; }
    Matrix& encoder_weight_mut() { invalidate(); return encoder_weight_; }
    Matrix& outcome_weight_mut() { invalidate(); return outcome_weight_; }
    Matrix& outcome_bias_mut() { invalidate(); return outcome_bias_; }
    Matrix& treatment_weight_mut() { invalidate(); return treatment_weight_; }
    Matrix& treatment_bias_mut() { invalidate(); return treatment_bias_; }

    /// Step size of (layer, channel); always exp(log_delta) > 0.
    double delta(int layer, int channel) const;
    /// Continuous system of (layer, channel) assembled from the NPLR parameters.
    ssm::ContinuousSsm channel_system(int layer, int channel) const;

    BoundModel bind(Tape& tape) const;
    /// inputs: L x F. Treatment head reads grad_reverse(z, mu) in reversal mode.
    ModelOutputs forward(const BoundModel& bound, const Matrix& inputs) const;

    /// Tape-free forward using cached discrete systems.
    Prediction predict(const Matrix& inputs) const;

    nlohmann::json to_json() const;
    static DeepS4Model from_json(const nlohmann::json& j);

private:
    template <class Self, class F>
    static void visit_parameters(Self& self, F&& f);
    void invalidate() { cache_.clear(); }
    void ensure_cache() const;

    ModelConfig config_;
    std::uint64_t seed_ = 0;
    Matrix basis_;  // N^2 x N
    Matrix encoder_weight_, encoder_bias_;
    std::vector<S4Layer> layers_;
    Matrix outcome_weight_, outcome_bias_;
    Matrix treatment_weight_, treatment_bias_;

    mutable std::vector<std::vector<ssm::DiscreteSsm>> cache_;
};

/// Convenience wrapper over the model constructor.
DeepS4Model init_model(int layers, int hidden, int state, int features, std::uint64_t seed);

void save_checkpoint(const DeepS4Model& model, const std::string& path);
DeepS4Model load_checkpoint(const std::string& path);

}  // namespace s4cf::nn
