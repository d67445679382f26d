#ifndef EPISAMPLE_LEARNERS_HPP
#define EPISAMPLE_LEARNERS_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "datagen.hpp"
#include "error.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace episample {

enum class Algorithm { proto_euclidean, proto_cosine, maml, anil };

inline std::string to_string(Algorithm a) {
    switch (a) {
    case Algorithm::proto_euclidean: return "proto_euclidean";
    case Algorithm::proto_cosine: return "proto_cosine";
    case Algorithm::maml: return "maml";
    case Algorithm::anil: return "anil";
    }
    return "unknown";
}

inline Algorithm algorithm_from_string(const std::string& s) {
    if (s == "proto_euclidean") return Algorithm::proto_euclidean;
    if (s == "proto_cosine") return Algorithm::proto_cosine;
    if (s == "maml") return Algorithm::maml;
    if (s == "anil") return Algorithm::anil;
    throw ConfigError("unknown algorithm '" + s + "' (expected proto_euclidean, proto_cosine, maml or anil)");
}

inline bool uses_head(Algorithm a) { return a == Algorithm::maml || a == Algorithm::anil; }

/// weight: out x in, bias: 1 x out.
struct LinearLayer {
    Tensor weight;
    Tensor bias;

    friend bool operator==(const LinearLayer&, const LinearLayer&) = default;
};

struct LearnerParams {
    Algorithm algorithm = Algorithm::proto_euclidean;
    std::vector<LinearLayer> encoder;
    std::optional<LinearLayer> head;    // maml / anil: way x embed_dim
    std::optional<Tensor> cosine_scale; // proto_cosine: shape {1}
    double adaptation_rate = 0.01;
    std::size_t adaptation_steps = 5;

    std::size_t input_dim() const { return encoder.front().weight.shape[1]; }
    std::size_t embed_dim() const { return encoder.back().weight.shape[0]; }

    /// Canonical parameter order: encoder.0.weight, encoder.0.bias, ...,
    /// head.weight, head.bias, cosine_scale.
    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out;
        for (auto& layer : encoder) {
            out.push_back(&layer.weight);
            out.push_back(&layer.bias);
        }
        if (head) {
            out.push_back(&head->weight);
            out.push_back(&head->bias);
        }
        if (cosine_scale) {
            out.push_back(&*cosine_scale);
        }
        return out;
    }

    std::vector<const Tensor*> tensors() const {
        std::vector<const Tensor*> out;
        for (auto* t : const_cast<LearnerParams*>(this)->tensors()) {
            out.push_back(t);
        }
        return out;
    }

    std::vector<std::string> tensor_names() const {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < encoder.size(); ++i) {
            out.push_back("encoder." + std::to_string(i) + ".weight");
            out.push_back("encoder." + std::to_string(i) + ".bias");
        }
        if (head) {
            out.push_back("head.weight");
            out.push_back("head.bias");
        }
        if (cosine_scale) {
            out.push_back("cosine_scale");
        }
        return out;
    }

    friend bool operator==(const LearnerParams&, const LearnerParams&) = default;
};

struct LearnerConfig {
    Algorithm algorithm = Algorithm::proto_euclidean;
    std::size_t input_dim = 8;
    std::vector<std::size_t> widths{64, 64, 64};
    std::size_t way = 5;
    std::optional<double> adaptation_rate; // default 0.01 (maml) / 0.1 (anil)
    std::size_t adaptation_steps = 5;
    double cosine_scale = 10.0;
};

inline double default_adaptation_rate(Algorithm a) { return a == Algorithm::anil ? 0.1 : 0.01; }

inline void validate(const LearnerParams& p) {
    if (p.encoder.empty()) {
        throw ConfigError("learner: encoder needs at least one layer");
    }
    if (p.head.has_value() != uses_head(p.algorithm)) {
        throw ConfigError("learner: a classification head is required for maml/anil and only for them");
    }
    if (p.cosine_scale.has_value() != (p.algorithm == Algorithm::proto_cosine)) {
        throw ConfigError("learner: cosine_scale is required for proto_cosine and only for it");
    }
    if (!(p.adaptation_rate > 0.0)) {
        throw ConfigError("learner: adaptation_rate must be positive");
    }
    if (p.adaptation_steps < 1) {
        throw ConfigError("learner: adaptation_steps must be at least 1");
    }
    std::size_t in = p.input_dim();
    for (const auto& layer : p.encoder) {
        if (layer.weight.rank() != 2 || layer.weight.shape[1] != in || layer.bias.shape != Shape{1, layer.weight.shape[0]}) {
            throw ShapeError("learner: encoder layer shapes are inconsistent");
        }
        in = layer.weight.shape[0];
    }
    if (p.head && (p.head->weight.rank() != 2 || p.head->weight.shape[1] != in ||
                   p.head->bias.shape != Shape{1, p.head->weight.shape[0]})) {
        throw ShapeError("learner: head shape does not match the embedding width");
    }
}

/// He-normal encoder weights, zero biases, zero head.
inline LearnerParams init_learner(const LearnerConfig& cfg, RandomStream& rng) {
    if (cfg.widths.empty()) {
        throw ConfigError("learner: encoder widths must not be empty");
    }
    LearnerParams p;
    p.algorithm = cfg.algorithm;
    p.adaptation_rate = cfg.adaptation_rate.value_or(default_adaptation_rate(cfg.algorithm));
    p.adaptation_steps = cfg.adaptation_steps;
    std::size_t in = cfg.input_dim;
    for (auto width : cfg.widths) {
        std::vector<double> w(width * in);
        const double sd = std::sqrt(2.0 / static_cast<double>(in));
        for (auto& x : w) {
            x = sd * rng.normal();
        }
        p.encoder.push_back({Tensor({width, in}, std::move(w)), Tensor::zeros({1, width})});
        in = width;
    }
    if (uses_head(cfg.algorithm)) {
        p.head = LinearLayer{Tensor::zeros({cfg.way, in}), Tensor::zeros({1, cfg.way})};
    }
    if (cfg.algorithm == Algorithm::proto_cosine) {
        p.cosine_scale = Tensor::scalar(cfg.cosine_scale);
    }
    validate(p);
    return p;
}

// ---------------------------------------------------------------------------
// Differentiable forward pass

/// Parameters placed on a graph, in LearnerParams::tensors() order.
struct BoundParams {
    std::vector<Var> vars;
    std::size_t encoder_layers = 0;
    bool has_head = false;
    bool has_scale = false;

    bool attached() const {
        return std::any_of(vars.begin(), vars.end(), [](const Var& v) { return v.attached(); });
    }
};

inline BoundParams bind(Graph& g, const LearnerParams& p, bool requires_grad) {
    BoundParams b;
    for (const auto* t : p.tensors()) {
        b.vars.push_back(g.leaf(*t, requires_grad));
    }
    b.encoder_layers = p.encoder.size();
    b.has_head = p.head.has_value();
    b.has_scale = p.cosine_scale.has_value();
    return b;
}

inline Var linear(const Var& x, const Var& weight, const Var& bias) {
    const Var ones(Tensor::ones({x.shape()[0], 1}));
    return add(matmul(x, transpose(weight)), matmul(ones, bias));
}

/// MLP with relu between layers; `layers` holds weight/bias pairs.
inline Var encode(std::span<const Var> layers, const Var& x) {
    Var h = x;
    const std::size_t n = layers.size() / 2;
    for (std::size_t l = 0; l < n; ++l) {
        h = linear(h, layers[2 * l], layers[2 * l + 1]);
        if (l + 1 < n) {
            h = relu(h);
        }
    }
    return h;
}

/// n x (n*k) matrix whose product with support embeddings gives class means.
inline Tensor averaging_matrix(const std::vector<std::size_t>& labels, std::size_t k) {
    if (k == 0 || labels.empty()) {
        throw DomainError("compute_prototypes: empty support set");
    }
    const std::size_t n = *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<std::size_t> counts(n, 0);
    for (auto l : labels) {
        ++counts[l];
    }
    for (std::size_t c = 0; c < n; ++c) {
        if (counts[c] != k) {
            throw DomainError("compute_prototypes: class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                              " support embeddings, expected " + std::to_string(k));
        }
    }
    Tensor a = Tensor::zeros({n, labels.size()});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        a.at(labels[i], i) = 1.0 / static_cast<double>(k);
    }
    return a;
}

/// Row c is the mean of the support embeddings labelled c.
inline Tensor compute_prototypes(const Tensor& embeddings, const std::vector<std::size_t>& labels, std::size_t k) {
    if (embeddings.rank() != 2 || embeddings.rows() != labels.size()) {
        throw ShapeError("compute_prototypes: " + std::to_string(labels.size()) + " labels for embeddings of shape " +
                         shape_str(embeddings.shape));
    }
    return detail::matmul_values(averaging_matrix(labels, k), embeddings);
}

struct EpisodeForward {
    Var logits;          // |query| x n
    Var nll;             // per-query negative log-likelihood, {|query|}
    Var difficulty;      // mean nll, {1}
};

namespace detail {

inline Var unit_rows(const Var& x, const char* what) {
    for (std::size_t i = 0; i < x.shape()[0]; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < x.shape()[1]; ++j) {
            const double v = x.value().data[i * x.shape()[1] + j];
            norm += v * v;
        }
        if (!(norm > 0.0)) {
            throw DomainError(std::string("cosine similarity: zero-norm ") + what + " embedding (row " +
                              std::to_string(i) + ")");
        }
    }
    return scale_rows(x, exp(scale(log(rowsum(mul(x, x))), -0.5)));
}

inline Var proto_logits(const LearnerParams& p, const BoundParams& b, const Episode& ep) {
    const std::span<const Var> enc(b.vars.data(), 2 * b.encoder_layers);
    const Var support = encode(enc, Var(ep.support));
    const Var query = encode(enc, Var(ep.query));
    const Var protos = matmul(Var(averaging_matrix(ep.support_labels, ep.shot)), support);
    if (p.algorithm == Algorithm::proto_euclidean) {
        return scale(sqdist(query, protos), -1.0);
    }
    const Var s = b.vars.back();
    return scalar_mul(s, matmul(unit_rows(query, "query"), transpose(unit_rows(protos, "prototype"))));
}

inline Var gradient_logits(const LearnerParams& p, const BoundParams& b, const Episode& ep) {
    Graph* g = nullptr;
    for (const auto& v : b.vars) {
        if (v.attached()) {
            g = v.graph();
        }
    }
    const bool outer = g != nullptr;
    Graph scratch;
    Graph& tape = outer ? *g : scratch;

    const std::size_t enc_vars = 2 * b.encoder_layers;
    const bool anil = p.algorithm == Algorithm::anil;
    const Var xs(ep.support);
    const Var xq(ep.query);

    // Inputs to the inner loop: head only (ANIL) or every parameter (MAML).
    std::vector<Var> fast;
    Var support_features = xs;
    Var query_features = xq;
    if (anil) {
        const std::span<const Var> enc(b.vars.data(), enc_vars);
        support_features = encode(enc, xs);
        query_features = encode(enc, xq);
        fast = {b.vars[enc_vars], b.vars[enc_vars + 1]};
    } else {
        fast.assign(b.vars.begin(), b.vars.begin() + static_cast<std::ptrdiff_t>(enc_vars + 2));
    }

    auto logits_with = [&](const std::vector<Var>& w, const Var& features) {
        if (anil) {
            return linear(features, w[0], w[1]);
        }
        const std::span<const Var> enc(w.data(), enc_vars);
        return linear(encode(enc, features), w[enc_vars], w[enc_vars + 1]);
    };

    for (std::size_t step = 0; step < p.adaptation_steps; ++step) {
        std::vector<Var> wrt = fast;
        if (!outer) {
            for (auto& w : wrt) {
                w = tape.leaf(w.value());
            }
        }
        const Var loss = sum(softmax_cross_entropy(logits_with(wrt, support_features), ep.support_labels));
        if (!std::isfinite(loss.item())) {
            throw DomainError("inner loop: non-finite support loss at adaptation step " + std::to_string(step));
        }
        // Descent on the support NLL, i.e. ascent on its log-likelihood.
        const auto grads = gradients(loss, wrt, outer);
        for (std::size_t i = 0; i < wrt.size(); ++i) {
            fast[i] = sub(wrt[i], scale(grads[i], p.adaptation_rate));
        }
    }
    if (!outer) {
        for (auto& w : fast) {
            w = w.detach();
        }
    }
    return logits_with(fast, query_features);
}

} // namespace detail

/// Query logits, per-query NLL and episode difficulty for any algorithm. When
/// `b` is attached, the result is differentiable with respect to it
/// (second order through MAML/ANIL adaptation).
inline EpisodeForward forward_episode(const LearnerParams& p, const BoundParams& b, const Episode& ep) {
    if (uses_head(p.algorithm) && p.head->weight.shape[0] != ep.way) {
        throw ShapeError("learner: head has " + std::to_string(p.head->weight.shape[0]) + " outputs but episode is " +
                         std::to_string(ep.way) + "-way");
    }
    if (ep.support.cols() != p.input_dim()) {
        throw ShapeError("learner: expects " + std::to_string(p.input_dim()) + "-dimensional inputs, episode has " +
                         std::to_string(ep.support.cols()));
    }
    EpisodeForward out;
    out.logits = uses_head(p.algorithm) ? detail::gradient_logits(p, b, ep) : detail::proto_logits(p, b, ep);
    out.nll = softmax_cross_entropy(out.logits, ep.query_labels);
    out.difficulty = mean(out.nll);
    return out;
}

inline std::vector<double> query_log_likelihoods(const LearnerParams& p, const Episode& ep) {
    Graph g;
    const auto out = forward_episode(p, bind(g, p, false), ep);
    std::vector<double> ll;
    ll.reserve(out.nll.size());
    for (double v : out.nll.value().data) {
        ll.push_back(-v);
    }
    return ll;
}

/// Log-likelihood of each query's true label under the ProtoNet rule.
inline std::vector<double> proto_log_likelihoods(const LearnerParams& p, const Episode& ep) {
    if (uses_head(p.algorithm)) {
        throw ConfigError("proto_log_likelihoods: algorithm " + to_string(p.algorithm) + " is not a ProtoNet variant");
    }
    return query_log_likelihoods(p, ep);
}

/// Log-likelihood of each query's true label after inner-loop adaptation.
inline std::vector<double> gradient_log_likelihoods(const LearnerParams& p, const Episode& ep) {
    if (!uses_head(p.algorithm)) {
        throw ConfigError("gradient_log_likelihoods: algorithm " + to_string(p.algorithm) + " has no adaptation head");
    }
    return query_log_likelihoods(p, ep);
}

/// |query| x n matrix of log class probabilities.
inline Tensor class_log_probabilities(const LearnerParams& p, const Episode& ep) {
    Graph g;
    const auto out = forward_episode(p, bind(g, p, false), ep);
    Tensor z = out.logits.value();
    const std::size_t m = z.rows(), n = z.cols();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = z.data.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            total += std::exp(row[j] - mx);
        }
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < n; ++j) {
            row[j] -= lse;
        }
    }
    return z;
}

struct EpisodeDifficulty {
    double value = 0.0; // nats
};

inline EpisodeDifficulty episode_difficulty(std::span<const double> log_likelihoods) {
    if (log_likelihoods.empty()) {
        throw DomainError("episode_difficulty: no query log-likelihoods");
    }
    double m = 0.0;
    std::size_t k = 0;
    for (double ll : log_likelihoods) {
        if (!std::isfinite(ll) || ll > 0.0) {
            throw DomainError("episode_difficulty: log-likelihoods must be finite and non-positive");
        }
        m += (ll - m) / static_cast<double>(++k);
    }
    return {-m};
}

/// Fraction of queries whose arg-max logit is the true label; ties go to the lowest class id.
inline double accuracy_from_logits(const Tensor& logits, const std::vector<std::size_t>& labels) {
    const std::size_t m = logits.rows(), n = logits.cols();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j) {
            if (logits.at(i, j) > logits.at(i, best)) {
                best = j;
            }
        }
        correct += best == labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(m);
}

inline double episode_accuracy(const LearnerParams& p, const Episode& ep) {
    Graph g;
    const auto out = forward_episode(p, bind(g, p, false), ep);
    return accuracy_from_logits(out.logits.value(), ep.query_labels);
}

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.json manifest + <stem>.csv with rows `tensor,index,value`
// in the canonical order of LearnerParams::tensors().

inline void save_checkpoint(const LearnerParams& p, const std::filesystem::path& stem,
                            const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json m;
    m["algorithm"] = to_string(p.algorithm);
    m["input_dim"] = p.input_dim();
    std::vector<std::size_t> widths;
    for (const auto& layer : p.encoder) {
        widths.push_back(layer.weight.shape[0]);
    }
    m["encoder_widths"] = widths;
    m["way"] = p.head ? nlohmann::json(p.head->weight.shape[0]) : nlohmann::json(nullptr);
    m["adaptation_rate"] = p.adaptation_rate;
    m["adaptation_steps"] = p.adaptation_steps;
    m["has_cosine_scale"] = p.cosine_scale.has_value();
    nlohmann::json layout = nlohmann::json::array();
    const auto names = p.tensor_names();
    const auto tensors = p.tensors();
    for (std::size_t i = 0; i < names.size(); ++i) {
        layout.push_back({{"name", names[i]}, {"shape", tensors[i]->shape}});
    }
    m["tensors"] = layout;
    for (const auto& [k, v] : extra.items()) {
        m[k] = v;
    }
    auto json_path = stem;
    json_path += ".json";
    auto csv_path = stem;
    csv_path += ".csv";
    io::write_file(json_path, m.dump(2) + "\n");

    std::string csv = "tensor,index,value\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
        for (std::size_t j = 0; j < tensors[i]->size(); ++j) {
            csv += names[i] + "," + std::to_string(j) + "," + io::format_double(tensors[i]->data[j]) + "\n";
        }
    }
    io::write_file(csv_path, csv);
}

inline LearnerParams load_checkpoint(const std::filesystem::path& stem) {
    auto json_path = stem;
    json_path += ".json";
    auto csv_path = stem;
    csv_path += ".csv";
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(io::read_file(json_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(json_path.string(), 0, e.what());
    }
    LearnerParams p;
    try {
        p.algorithm = algorithm_from_string(m.at("algorithm").get<std::string>());
        p.adaptation_rate = m.at("adaptation_rate").get<double>();
        p.adaptation_steps = m.at("adaptation_steps").get<std::size_t>();
        std::size_t in = m.at("input_dim").get<std::size_t>();
        for (auto w : m.at("encoder_widths").get<std::vector<std::size_t>>()) {
            p.encoder.push_back({Tensor::zeros({w, in}), Tensor::zeros({1, w})});
            in = w;
        }
        if (uses_head(p.algorithm)) {
            const auto way = m.at("way").get<std::size_t>();
            p.head = LinearLayer{Tensor::zeros({way, in}), Tensor::zeros({1, way})};
        }
        if (m.at("has_cosine_scale").get<bool>()) {
            p.cosine_scale = Tensor::scalar(0.0);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(json_path.string(), 0, std::string("checkpoint manifest: ") + e.what());
    }
    const auto names = p.tensor_names();
    auto tensors = p.tensors();
    const auto file = csv_path.string();
    const auto lines = io::lines_of(io::read_file(csv_path));
    if (lines.empty() || lines[0] != "tensor,index,value") {
        throw ParseError(file, 1, "unexpected header");
    }
    std::size_t t = 0, j = 0, line_no = 1;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        line_no = li + 1;
        if (lines[li].empty()) {
            continue;
        }
        const auto f = io::split_csv_line(lines[li]);
        if (f.size() != 3) {
            throw ParseError(file, line_no, "expected 3 columns");
        }
        if (t >= names.size() || f[0] != names[t] || io::parse_int<std::size_t>(f[1], file, line_no) != j) {
            throw ParseError(file, line_no, "parameter out of canonical order");
        }
        tensors[t]->data[j] = io::parse_double(f[2], file, line_no);
        if (++j == tensors[t]->size()) {
            ++t;
            j = 0;
        }
    }
    if (t != names.size()) {
        throw ParseError(file, line_no, "checkpoint ends before all parameters were read");
    }
    validate(p);
    return p;
}

} // namespace episample

#endif
