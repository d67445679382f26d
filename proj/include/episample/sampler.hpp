#ifndef EPISAMPLE_SAMPLER_HPP
#define EPISAMPLE_SAMPLER_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace episample {

/// Half-width of every truncated support, in standard deviations.
inline constexpr double kTruncation = 2.58;
inline constexpr double kVarianceFloor = 1e-8;
inline constexpr double kWeightCap = 1e6;
inline constexpr double kProposalFloor = 1e-300;

inline double normal_pdf(double x, double mu, double var) {
    if (!(var > 0.0)) {
        throw DomainError("normal_pdf: variance must be positive, got " + std::to_string(var));
    }
    const double z = x - mu;
    return std::exp(-z * z / (2.0 * var)) / std::sqrt(2.0 * std::numbers::pi * var);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Running normal model N(mu, var) of the difficulty induced by the proposal.
///
/// Online use: the first `warmup_remaining` observations are buffered and
/// then replaced by their sample mean / unbiased variance; every later
/// observation applies the exponential moving average with decay `lambda`.
struct DifficultyModel {
    double mu = 0.0;
    double var = 1.0;
    double lambda = 0.9;
    std::size_t warmup_remaining = 0;
    std::vector<double> warmup_buffer;
    bool estimated = false;

    static DifficultyModel online(std::size_t warmup_observations, double lambda = 0.9) {
        if (!(lambda >= 0.0 && lambda <= 1.0)) {
            throw DomainError("DifficultyModel: lambda must lie in [0, 1]");
        }
        DifficultyModel m;
        m.lambda = lambda;
        m.warmup_remaining = warmup_observations;
        return m;
    }

    /// Past warm-up and holding an estimate.
    bool ready() const noexcept { return estimated && warmup_remaining == 0; }
    double sigma() const { return std::sqrt(var); }
    double lower() const { return mu - kTruncation * sigma(); }
    double upper() const { return mu + kTruncation * sigma(); }
};

namespace detail {

inline void sample_moments(std::span<const double> xs, double& mean, double& var) {
    double total = 0.0;
    for (double x : xs) {
        total += x;
    }
    mean = total / static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) {
        ss += (x - mean) * (x - mean);
    }
    var = xs.size() > 1 ? ss / static_cast<double>(xs.size() - 1) : 0.0;
}

} // namespace detail

inline DifficultyModel update_online(DifficultyModel model, double omega) {
    if (!std::isfinite(omega)) {
        throw DomainError("update_online: non-finite difficulty");
    }
    if (model.warmup_remaining > 0) {
        model.warmup_buffer.push_back(omega);
        if (--model.warmup_remaining == 0) {
            detail::sample_moments(model.warmup_buffer, model.mu, model.var);
            model.var = std::max(model.var, kVarianceFloor);
            model.warmup_buffer.clear();
            model.estimated = true;
        }
        return model;
    }
    if (!model.estimated) {
        // No warm-up configured: the first observation seeds the mean.
        model.mu = omega;
        model.var = kVarianceFloor;
        model.estimated = true;
        return model;
    }
    const double l = model.lambda;
    model.mu = l * model.mu + (1.0 - l) * omega;
    model.var = l * model.var + (1.0 - l) * (omega - model.mu) * (omega - model.mu);
    model.var = std::max(model.var, kVarianceFloor);
    return model;
}

inline DifficultyModel estimate_offline(std::span<const double> difficulties, double lambda = 0.9) {
    if (difficulties.size() < 2) {
        throw DomainError("estimate_offline: need at least 2 difficulties, got " + std::to_string(difficulties.size()));
    }
    for (double d : difficulties) {
        if (!std::isfinite(d)) {
            throw DomainError("estimate_offline: non-finite difficulty");
        }
    }
    DifficultyModel m;
    m.lambda = lambda;
    detail::sample_moments(difficulties, m.mu, m.var);
    m.var = std::max(m.var, kVarianceFloor);
    m.estimated = true;
    return m;
}

enum class SchemeKind { baseline, easy, hard, curriculum, uniform };
enum class EstimationMode { online, offline };

inline std::string to_string(SchemeKind k) {
    switch (k) {
    case SchemeKind::baseline: return "baseline";
    case SchemeKind::easy: return "easy";
    case SchemeKind::hard: return "hard";
    case SchemeKind::curriculum: return "curriculum";
    case SchemeKind::uniform: return "uniform";
    }
    return "unknown";
}

inline std::string to_string(EstimationMode m) { return m == EstimationMode::online ? "online" : "offline"; }

inline SchemeKind scheme_from_string(const std::string& s) {
    if (s == "baseline") return SchemeKind::baseline;
    if (s == "easy") return SchemeKind::easy;
    if (s == "hard") return SchemeKind::hard;
    if (s == "curriculum") return SchemeKind::curriculum;
    if (s == "uniform") return SchemeKind::uniform;
    throw ConfigError("unknown sampling scheme '" + s + "' (expected baseline, easy, hard, curriculum or uniform)");
}

inline EstimationMode mode_from_string(const std::string& s) {
    if (s == "online") return EstimationMode::online;
    if (s == "offline") return EstimationMode::offline;
    throw ConfigError("unknown estimation mode '" + s + "' (expected online or offline)");
}

struct SamplingScheme {
    SchemeKind kind = SchemeKind::baseline;
    EstimationMode mode = EstimationMode::online;
    double progress = 0.0; // curriculum only: iteration / total iterations
};

/// Curriculum centre: moves linearly from the lower to the upper support bound.
inline double curriculum_center(const DifficultyModel& model, double progress) {
    return model.lower() + progress * (model.upper() - model.lower());
}

/// Target density over difficulty, normalized on its truncated support.
/// The baseline target is the proposal density itself.
inline double target_density(double omega, const SamplingScheme& scheme, const DifficultyModel& model) {
    const double sigma = model.sigma();
    const double lo = model.lower();
    const double hi = model.upper();
    switch (scheme.kind) {
    case SchemeKind::baseline:
        return normal_pdf(omega, model.mu, model.var);
    case SchemeKind::easy:
        return (omega >= lo && omega <= model.mu) ? 1.0 / (kTruncation * sigma) : 0.0;
    case SchemeKind::hard:
        return (omega >= model.mu && omega <= hi) ? 1.0 / (kTruncation * sigma) : 0.0;
    case SchemeKind::uniform:
        return (omega >= lo && omega <= hi) ? 1.0 / (2.0 * kTruncation * sigma) : 0.0;
    case SchemeKind::curriculum: {
        if (!(scheme.progress >= 0.0 && scheme.progress <= 1.0)) {
            throw DomainError("target_density: curriculum progress must lie in [0, 1]");
        }
        if (omega < lo || omega > hi) {
            return 0.0;
        }
        const double center = curriculum_center(model, scheme.progress);
        const double mass = normal_cdf((hi - center) / sigma) - normal_cdf((lo - center) / sigma);
        return normal_pdf(omega, center, model.var) / mass;
    }
    }
    return 0.0;
}

struct ImportanceWeight {
    double weight = 1.0;
    bool proposal_clamped = false; // proposal density underflowed and was clamped
    bool capped = false;           // weight hit kWeightCap
};

/// w = target / proposal, with the un-truncated normal as proposal. Weights
/// are exactly 1 for the baseline scheme and while the model is not ready.
inline ImportanceWeight importance_weight(double omega, const SamplingScheme& scheme, const DifficultyModel& model) {
    ImportanceWeight w;
    if (scheme.kind == SchemeKind::baseline || !model.ready()) {
        return w;
    }
    double proposal = normal_pdf(omega, model.mu, model.var);
    if (proposal < kProposalFloor) {
        proposal = kProposalFloor;
        w.proposal_clamped = true;
    }
    w.weight = target_density(omega, scheme, model) / proposal;
    if (w.weight > kWeightCap) {
        w.weight = kWeightCap;
        w.capped = true;
    }
    return w;
}

/// (sum w)^2 / sum w^2, clamped to [1, |w|].
inline double effective_sample_size(std::span<const double> weights) {
    if (weights.empty()) {
        throw DomainError("effective_sample_size: empty weight vector");
    }
    double s = 0.0, s2 = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w) || w < 0.0) {
            throw DomainError("effective_sample_size: weights must be finite and non-negative");
        }
        s += w;
        s2 += w * w;
    }
    if (s == 0.0) {
        throw DomainError("effective_sample_size: all weights are zero");
    }
    const double ess = s * s / s2;
    return std::clamp(ess, 1.0, static_cast<double>(weights.size()));
}

} // namespace episample

#endif
