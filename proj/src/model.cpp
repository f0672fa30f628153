#include "s4cf/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

namespace s4cf::nn {

std::string to_string(Activation a) {
    switch (a) {
        case Activation::gelu_tanh: return "gelu_tanh";
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
    }
    return "gelu_tanh";
}

Activation activation_from_string(const std::string& s) {
    if (s == "gelu_tanh" || s == "gelu") return Activation::gelu_tanh;
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw std::invalid_argument("unknown activation: " + s);
}

std::string to_string(AdversarialMode m) {
    return m == AdversarialMode::reversal ? "reversal" : "literal";
}

AdversarialMode adversarial_mode_from_string(const std::string& s) {
    if (s == "reversal") return AdversarialMode::reversal;
    if (s == "literal") return AdversarialMode::literal;
    throw std::invalid_argument("unknown adversarial mode: " + s);
}

Var activate(Var x, Activation a) {
    switch (a) {
        case Activation::gelu_tanh: return gelu(x);
        case Activation::tanh: return tanh(x);
        case Activation::relu: return relu(x);
        case Activation::identity: return x;
    }
    return x;
}

namespace {

double activation_value(double x, Activation a) {
    switch (a) {
        case Activation::gelu_tanh: return scalar::gelu(x);
        case Activation::tanh: return std::tanh(x);
        case Activation::relu: return x > 0 ? x : 0.0;
        case Activation::identity: return x;
    }
    return x;
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1 || hidden < 1 || state < 1 || features < 1) {
        throw std::invalid_argument("ModelConfig: layers, hidden, state and features must be >= 1");
    }
    if (!(mu >= 0.0)) throw std::invalid_argument("ModelConfig: mu must be >= 0");
}

Var s4_layer_forward(const BoundLayer& layer, Var u) {
    const Eigen::Index h = u.cols();
    if (static_cast<Eigen::Index>(layer.abar.size()) != h) {
        throw DimensionError("s4_layer_forward: input width does not match channel count");
    }
    if (u.rows() < 1) throw DimensionError("s4_layer_forward: empty sequence");
    Var y = ssm_scan_channels(layer.abar, layer.bbar, layer.c, u);
    Var mixed = add_row(matmul(y, layer.W), layer.bias);
    return add(activate(mixed, layer.activation), u);
}

DeepS4Model::DeepS4Model(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
    config_.validate();
    const int H = config_.hidden;
    const int N = config_.state;
    const int F = config_.features;

    const ssm::ContinuousSsm legs = ssm::hippo_legs(N);
    const ssm::NplrForm nplr = ssm::nplr_decompose(legs);
    const ssm::RealNplrBasis real = ssm::real_nplr_basis(nplr);
    basis_ = real.basis;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
    auto randn = [&](Eigen::Index r, Eigen::Index c, double s) {
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = s * normal(rng);
        return m;
    };

    encoder_weight_ = randn(F, H, 1.0 / std::sqrt(static_cast<double>(F)));
    encoder_bias_ = Matrix::Zero(1, H);
    layers_.resize(config_.layers);
    for (auto& layer : layers_) {
        layer.lambda.resize(H, N);
        layer.P.resize(H, N);
        layer.Q.resize(H, N);
        layer.B.resize(H, N);
        for (int h = 0; h < H; ++h) {
            layer.lambda.row(h) = real.params.transpose();
            layer.P.row(h) = nplr.P.col(0).transpose();
            layer.Q.row(h) = nplr.Q.col(0).transpose();
            layer.B.row(h) = legs.B.col(0).transpose();
        }
        layer.C = randn(H, N, 1.0 / std::sqrt(static_cast<double>(N)));
        layer.log_delta.resize(H, 1);
        for (int h = 0; h < H; ++h) layer.log_delta(h, 0) = log_dt(rng);
        layer.W = randn(H, H, 1.0 / std::sqrt(static_cast<double>(H)));
        layer.bias = Matrix::Zero(1, H);
    }
    outcome_weight_ = randn(H, 1, 1.0 / std::sqrt(static_cast<double>(H)));
    outcome_bias_ = Matrix::Zero(1, 1);
    treatment_weight_ = randn(H, 1, 1.0 / std::sqrt(static_cast<double>(H)));
    treatment_bias_ = Matrix::Zero(1, 1);
}

void DeepS4Model::set_mu(double mu) {
    if (!(mu >= 0.0)) throw std::invalid_argument("mu must be >= 0");
    config_.mu = mu;
}

template <class Self, class F>
void DeepS4Model::visit_parameters(Self& self, F&& f) {
    f("encoder.weight", self.encoder_weight_, ParamGroup::other);
    f("encoder.bias", self.encoder_bias_, ParamGroup::other);
    for (std::size_t l = 0; l < self.layers_.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        auto& layer = self.layers_[l];
        f(p + "lambda", layer.lambda, ParamGroup::ssm);
        f(p + "P", layer.P, ParamGroup::ssm);
        f(p + "Q", layer.Q, ParamGroup::ssm);
        f(p + "B", layer.B, ParamGroup::ssm);
        f(p + "C", layer.C, ParamGroup::ssm);
        f(p + "W", layer.W, ParamGroup::other);
        f(p + "bias", layer.bias, ParamGroup::other);
    }
    f("outcome_head.weight", self.outcome_weight_, ParamGroup::other);
    f("outcome_head.bias", self.outcome_bias_, ParamGroup::other);
    f("treatment_head.weight", self.treatment_weight_, ParamGroup::other);
    f("treatment_head.bias", self.treatment_bias_, ParamGroup::other);
}

std::vector<ParameterRef> DeepS4Model::parameters() {
    invalidate();
    std::vector<ParameterRef> out;
    visit_parameters(*this, [&](const std::string& name, Matrix& m, ParamGroup g) {
        out.push_back({name, &m, g});
    });
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> DeepS4Model::parameters() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    visit_parameters(*this, [&](const std::string& name, const Matrix& m, ParamGroup) {
        out.emplace_back(name, &m);
    });
    return out;
}

std::size_t DeepS4Model::trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : parameters()) n += static_cast<std::size_t>(m->size());
    return n;
}

std::size_t DeepS4Model::expected_trainable_count(const ModelConfig& c) {
    const std::size_t H = c.hidden, N = c.state, F = c.features, layers = c.layers;
    return layers * (H * 5 * N + H * H + H) + 2 * (H + 1) + (F * H + H);
}

std::vector<S4Layer>& DeepS4Model::layers_mut() {
    invalidate();
    return layers_;
}

double DeepS4Model::delta(int layer, int channel) const {
    return std::exp(layers_.at(layer).log_delta(channel, 0));
}

ssm::ContinuousSsm DeepS4Model::channel_system(int layer, int channel) const {
    const S4Layer& L = layers_.at(layer);
    ssm::ContinuousSsm out;
    out.A = ssm::assemble_state_matrix(basis_, L.lambda.row(channel).transpose(),
                                       L.P.row(channel).transpose(), L.Q.row(channel).transpose());
    out.B = L.B.row(channel).transpose();
    out.C = L.C.row(channel);
    return out;
}

BoundModel DeepS4Model::bind(Tape& tape) const {
    BoundModel b;
    b.model = this;
    b.tape = &tape;
    visit_parameters(*this, [&](const std::string&, const Matrix& m, ParamGroup) {
        b.leaves.push_back(tape.leaf(m, true));
    });
    std::size_t k = 0;
    b.encoder_weight = b.leaves[k++];
    b.encoder_bias = b.leaves[k++];

    const int H = config_.hidden;
    const int N = config_.state;
    const Var basis = tape.constant(basis_);
    const Var eye = tape.constant(Matrix::Identity(N, N));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Var lambda = b.leaves[k++];
        const Var P = b.leaves[k++];
        const Var Q = b.leaves[k++];
        const Var B = b.leaves[k++];
        const Var C = b.leaves[k++];
        BoundLayer bl;
        bl.W = b.leaves[k++];
        bl.bias = b.leaves[k++];
        bl.activation = config_.activation;
        for (int h = 0; h < H; ++h) {
            const double d = std::exp(layers_[l].log_delta(h, 0));
            const Var lam = transpose(row(lambda, h));
            const Var p = transpose(row(P, h));
            const Var q = transpose(row(Q, h));
            const Var bvec = transpose(row(B, h));
            const Var A = sub(reshape(matmul(basis, lam), N, N), matmul(p, transpose(q)));
            const Var half = scale(A, 0.5 * d);
            const Var lhs = sub(eye, half);
            bl.abar.push_back(solve(lhs, add(eye, half)));
            bl.bbar.push_back(solve(lhs, scale(bvec, d)));
            bl.c.push_back(row(C, h));
        }
        b.layers.push_back(std::move(bl));
    }
    b.outcome_weight = b.leaves[k++];
    b.outcome_bias = b.leaves[k++];
    b.treatment_weight = b.leaves[k++];
    b.treatment_bias = b.leaves[k++];
    return b;
}

ModelOutputs DeepS4Model::forward(const BoundModel& bound, const Matrix& inputs) const {
    if (inputs.cols() != config_.features) {
        throw DimensionError("forward: input width " + std::to_string(inputs.cols()) +
                             " does not match model features " + std::to_string(config_.features));
    }
    if (inputs.rows() < 1) throw DimensionError("forward: empty sequence");
    Tape& tape = *bound.tape;
    Var x = add_row(matmul(tape.constant(inputs), bound.encoder_weight), bound.encoder_bias);
    for (const auto& layer : bound.layers) x = s4_layer_forward(layer, x);
    ModelOutputs out;
    out.z = x;
    out.yhat = add_row(matmul(x, bound.outcome_weight), bound.outcome_bias);
    const Var head_in =
        config_.adversarial == AdversarialMode::reversal ? grad_reverse(x, config_.mu) : x;
    out.ahat = sigmoid(add_row(matmul(head_in, bound.treatment_weight), bound.treatment_bias));
    return out;
}

void DeepS4Model::ensure_cache() const {
    if (!cache_.empty()) return;
    std::vector<std::vector<ssm::DiscreteSsm>> built(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (int h = 0; h < config_.hidden; ++h) {
            built[l].push_back(ssm::discretize_bilinear(channel_system(static_cast<int>(l), h),
                                                        delta(static_cast<int>(l), h)));
        }
    }
    cache_ = std::move(built);
}

Prediction DeepS4Model::predict(const Matrix& inputs) const {
    if (inputs.cols() != config_.features) throw DimensionError("predict: input width mismatch");
    if (inputs.rows() < 1) throw DimensionError("predict: empty sequence");
    ensure_cache();
    const Eigen::Index L = inputs.rows();
    const int H = config_.hidden;
    Matrix x = (inputs * encoder_weight_).rowwise() + encoder_bias_.row(0);
    Matrix y(L, H);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (int h = 0; h < H; ++h) {
            const Vector col = x.col(h);
            const auto out = ssm::ssm_scan(cache_[l][h], std::span<const double>(col.data(), col.size()));
            for (Eigen::Index k = 0; k < L; ++k) y(k, h) = out[static_cast<std::size_t>(k)];
        }
        Matrix mixed = (y * layers_[l].W).rowwise() + layers_[l].bias.row(0);
        mixed = mixed.unaryExpr([&](double v) { return activation_value(v, config_.activation); });
        x += mixed;
    }
    Prediction p;
    p.yhat = (x * outcome_weight_).col(0).array() + outcome_bias_(0, 0);
    const Vector logits = (x * treatment_weight_).col(0).array() + treatment_bias_(0, 0);
    p.ahat = logits.unaryExpr([](double v) { return scalar::sigmoid(v); });
    p.z = std::move(x);
    return p;
}

namespace {

nlohmann::json matrix_json(const Matrix& m) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Matrix matrix_from_json(const nlohmann::json& j, const std::string& name) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto& data = j.at("data");
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
        throw std::runtime_error("checkpoint: element count mismatch for " + name);
    }
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = data[static_cast<std::size_t>(i * cols + k)].get<double>();
    return m;
}

}  // namespace

nlohmann::json DeepS4Model::to_json() const {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, m] : parameters()) params[name] = matrix_json(*m);
    nlohmann::json buffers = nlohmann::json::object();
    buffers["nplr_basis"] = matrix_json(basis_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        buffers["layers." + std::to_string(l) + ".log_delta"] = matrix_json(layers_[l].log_delta);
    }
    return {
        {"format", "s4cf-checkpoint"},
        {"version", 1},
        {"config",
         {{"layers", config_.layers},
          {"hidden", config_.hidden},
          {"state", config_.state},
          {"features", config_.features},
          {"activation", to_string(config_.activation)},
          {"mu", config_.mu},
          {"adversarial", to_string(config_.adversarial)}}},
        {"seed", seed_},
        {"parameters", params},
        {"buffers", buffers},
    };
}

DeepS4Model DeepS4Model::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "s4cf-checkpoint") throw std::runtime_error("checkpoint: unrecognized format");
    const auto& c = j.at("config");
    ModelConfig config;
    config.layers = c.at("layers").get<int>();
    config.hidden = c.at("hidden").get<int>();
    config.state = c.at("state").get<int>();
    config.features = c.at("features").get<int>();
    config.activation = activation_from_string(c.at("activation").get<std::string>());
    config.mu = c.at("mu").get<double>();
    config.adversarial = adversarial_mode_from_string(c.at("adversarial").get<std::string>());
    config.validate();

    DeepS4Model m;
    m.config_ = config;
    m.seed_ = j.at("seed").get<std::uint64_t>();
    m.layers_.resize(config.layers);
    const auto& buffers = j.at("buffers");
    m.basis_ = matrix_from_json(buffers.at("nplr_basis"), "nplr_basis");
    for (std::size_t l = 0; l < m.layers_.size(); ++l) {
        const std::string name = "layers." + std::to_string(l) + ".log_delta";
        m.layers_[l].log_delta = matrix_from_json(buffers.at(name), name);
    }
    const auto& params = j.at("parameters");
    visit_parameters(m, [&](const std::string& name, Matrix& value, ParamGroup) {
        value = matrix_from_json(params.at(name), name);
    });
    return m;
}

DeepS4Model init_model(int layers, int hidden, int state, int features, std::uint64_t seed) {
    ModelConfig c;
    c.layers = layers;
    c.hidden = hidden;
    c.state = state;
    c.features = features;
    return DeepS4Model(c, seed);
}

void save_checkpoint(const DeepS4Model& model, const std::string& path) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp.string());
        out << model.to_json().dump() << '\n';
    }
    fs::rename(tmp, target);
}

DeepS4Model load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    return DeepS4Model::from_json(nlohmann::json::parse(in));
}

}  // namespace s4cf::nn
