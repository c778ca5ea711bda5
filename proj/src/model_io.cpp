#include "rhoflow/model_io.hpp"

#include <fstream>

namespace rhoflow {

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json values = nlohmann::json::array();
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) values.push_back(m(i, j));
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(values)}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
    const Index rows = j.at("rows").get<Index>();
    const Index cols = j.at("cols").get<Index>();
    const auto& data = j.at("data");
    if (static_cast<Index>(data.size()) != rows * cols)
        throw DataError("model file: matrix shape does not match its data length");
    Matrix m(rows, cols);
    Index idx = 0;
    for (Index i = 0; i < rows; ++i)
        for (Index j2 = 0; j2 < cols; ++j2) m(i, j2) = data[static_cast<std::size_t>(idx++)];
    return m;
}

nlohmann::json vector_to_json(const Vector& v) {
    nlohmann::json out = nlohmann::json::array();
    for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

Vector vector_from_json(const nlohmann::json& j) {
    Vector v(static_cast<Index>(j.size()));
    for (Index i = 0; i < v.size(); ++i) v(i) = j[static_cast<std::size_t>(i)];
    return v;
}

std::string target_name(LikelihoodTarget t) {
    return t == LikelihoodTarget::kPrediction ? "prediction" : "post_update";
}

LikelihoodTarget target_from(const std::string& s) {
    if (s == "prediction") return LikelihoodTarget::kPrediction;
    if (s == "post_update") return LikelihoodTarget::kPostUpdate;
    throw DataError("model file: unknown likelihood_target '" + s + "'");
}

std::string init_name(InitState s) {
    return s == InitState::kContextMixture ? "context_mixture" : "maximally_mixed";
}

InitState init_from(const std::string& s) {
    if (s == "context_mixture") return InitState::kContextMixture;
    if (s == "maximally_mixed") return InitState::kMaximallyMixed;
    throw DataError("model file: unknown init_state '" + s + "'");
}

}  // namespace

nlohmann::json params_to_json(const ModelParams& params) {
    nlohmann::json j;
    j["rff"] = {{"dim_in", params.rff.dim_in},
                {"dim_out", params.rff.dim_out},
                {"bandwidth", params.rff.bandwidth},
                {"seed", params.rff.seed},
                {"weights", matrix_to_json(params.rff.weights)},
                {"offsets", vector_to_json(params.rff.offsets)},
                {"input_mean", vector_to_json(params.rff.input_norm.mean)},
                {"input_scale", vector_to_json(params.rff.input_norm.scale)}};
    nlohmann::json profiles = nlohmann::json::array();
    for (const auto& factor : params.profiles) {
        const DensityMatrix rho = realize(factor);
        profiles.push_back(
            {{"rank", factor.rank()}, {"factor", matrix_to_json(factor.b)},
             {"realized", matrix_to_json(rho.m)}});
    }
    j["profiles"] = std::move(profiles);
    nlohmann::json betas = nlohmann::json::array();
    for (const auto& beta : params.betas) betas.push_back(vector_to_json(beta));
    j["betas"] = std::move(betas);
    j["alpha_raw"] = params.alpha_raw;
    j["eta_raw"] = params.eta_raw;
    j["context_norm"] = {{"mean", vector_to_json(params.context_norm.mean)},
                         {"scale", vector_to_json(params.context_norm.scale)}};
    j["settings"] = {{"likelihood_target", target_name(params.likelihood_target)},
                     {"init_state", init_name(params.init_state)},
                     {"epsilon", params.epsilon}};
    return j;
}

ModelParams params_from_json(const nlohmann::json& j) {
    ModelParams params;
    const auto& rff = j.at("rff");
    params.rff.dim_in = rff.at("dim_in").get<Index>();
    params.rff.dim_out = rff.at("dim_out").get<Index>();
    params.rff.bandwidth = rff.at("bandwidth").get<double>();
    params.rff.seed = rff.at("seed").get<std::uint64_t>();
    params.rff.weights = matrix_from_json(rff.at("weights"));
    params.rff.offsets = vector_from_json(rff.at("offsets"));
    params.rff.input_norm.mean = vector_from_json(rff.at("input_mean"));
    params.rff.input_norm.scale = vector_from_json(rff.at("input_scale"));
    if (params.rff.weights.rows() != params.rff.dim_out ||
        params.rff.weights.cols() != params.rff.dim_in ||
        params.rff.offsets.size() != params.rff.dim_out)
        throw DataError("model file: feature map shapes are inconsistent");

    for (const auto& p : j.at("profiles")) {
        ProfileFactor factor{matrix_from_json(p.at("factor"))};
        if (factor.dim() != params.rff.dim_out)
            throw DataError("model file: profile dimension does not match the feature map");
        params.profiles.push_back(std::move(factor));
    }
    for (const auto& b : j.at("betas")) params.betas.push_back(vector_from_json(b));
    if (params.betas.size() != params.profiles.size())
        throw DataError("model file: profile and beta counts differ");
    params.alpha_raw = j.at("alpha_raw").get<double>();
    params.eta_raw = j.at("eta_raw").get<double>();
    params.context_norm.mean = vector_from_json(j.at("context_norm").at("mean"));
    params.context_norm.scale = vector_from_json(j.at("context_norm").at("scale"));
    for (const auto& beta : params.betas)
        if (beta.size() != params.context_norm.dim())
            throw DataError("model file: beta dimension does not match the context normalization");
    const auto& settings = j.at("settings");
    params.likelihood_target = target_from(settings.at("likelihood_target").get<std::string>());
    params.init_state = init_from(settings.at("init_state").get<std::string>());
    params.epsilon = settings.at("epsilon").get<double>();
    return params;
}

void save_model(const ModelFile& model, const std::string& path) {
    nlohmann::json j = params_to_json(model.params);
    j["format"] = "rhoflow-model";
    j["version"] = kModelFormatVersion;
    j["provenance"] = {{"seed", model.provenance.seed},
                       {"config_hash", model.provenance.config_hash},
                       {"final_nll_per_obs", model.provenance.final_nll_per_obs},
                       {"delta_v_convention", model.provenance.delta_v_convention},
                       {"source", model.provenance.source}};
    if (model.provenance.behavioral_ranges.size() > 0)
        j["provenance"]["behavioral_ranges"] = matrix_to_json(model.provenance.behavioral_ranges);

    std::ofstream out(path);
    if (!out) throw DataError("save_model: cannot open " + path);
    out << j.dump(2) << '\n';
}

ModelFile load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("load_model: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_model: " + path + " is not valid JSON: " + e.what());
    }
    if (j.value("format", std::string{}) != "rhoflow-model")
        throw DataError("load_model: " + path + " is not a model file");
    const int version = j.value("version", -1);
    if (version != kModelFormatVersion)
        throw DataError("load_model: unsupported model format version " +
                        std::to_string(version));

    ModelFile model;
    model.params = params_from_json(j);
    if (j.contains("provenance")) {
        const auto& prov = j.at("provenance");
        model.provenance.seed = prov.value("seed", std::uint64_t{0});
        model.provenance.config_hash = prov.value("config_hash", std::string{});
        model.provenance.final_nll_per_obs = prov.value("final_nll_per_obs", 0.0);
        model.provenance.delta_v_convention =
            prov.value("delta_v_convention", std::string{"leader_minus_ego"});
        model.provenance.source = prov.value("source", std::string{});
        if (prov.contains("behavioral_ranges"))
            model.provenance.behavioral_ranges = matrix_from_json(prov.at("behavioral_ranges"));
    }
    return model;
}

}  // namespace rhoflow
