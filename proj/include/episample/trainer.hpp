#ifndef EPISAMPLE_TRAINER_HPP
#define EPISAMPLE_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <exception>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "autodiff.hpp"
#include "datagen.hpp"
#include "error.hpp"
#include "io.hpp"
#include "learners.hpp"
#include "rng.hpp"
#include "sampler.hpp"
#include "stats.hpp"

namespace episample {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
};

/// Bias-corrected Adam update, in place.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state,
                      double learning_rate) {
    if (params.size() != grads.size()) {
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
    }
    if (state.first_moment.empty()) {
        for (const auto* p : params) {
            state.first_moment.push_back(Tensor::zeros(p->shape));
            state.second_moment.push_back(Tensor::zeros(p->shape));
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state holds " + std::to_string(state.first_moment.size()) +
                         " tensors, parameters " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape != grads[i].shape || params[i]->shape != state.first_moment[i].shape) {
            throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i) + " " +
                             shape_str(params[i]->shape) + " vs gradient " + shape_str(grads[i].shape));
        }
        for (double g : grads[i].data) {
            if (!std::isfinite(g)) {
                throw DomainError("adam_step: non-finite gradient for parameter " + std::to_string(i));
            }
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.first_moment[i].data;
        auto& v = state.second_moment[i].data;
        auto& p = params[i]->data;
        const auto& g = grads[i].data;
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            p[j] -= learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration and records

struct TrainConfig {
    std::size_t iterations = 20000;
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    std::size_t validation_interval = 1000;
    std::size_t validation_episodes = 1000;
    std::size_t test_episodes = 1000;
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t query = 15;
    SamplingScheme scheme;
    double lambda = 0.9;
    std::size_t warmup_iterations = 100;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

inline void validate(const TrainConfig& c) {
    if (c.batch_size == 0 || c.validation_interval == 0 || c.validation_episodes == 0 || c.test_episodes == 0 ||
        c.way == 0 || c.shot == 0 || c.query == 0 || c.workers == 0) {
        throw ConfigError("train: all counts must be positive");
    }
    if (c.iterations % c.validation_interval != 0) {
        throw ConfigError("train: validation_interval (" + std::to_string(c.validation_interval) +
                          ") must divide iterations (" + std::to_string(c.iterations) + ")");
    }
    if (!(c.learning_rate > 0.0)) {
        throw ConfigError("train: learning_rate must be positive");
    }
}

struct EpisodeRecord {
    double omega = 0.0;  // difficulty used for the weight
    double weight = 1.0;
    double nll = 0.0;    // training loss of the episode
    bool proposal_clamped = false;
};

struct TrainRecord {
    std::size_t iteration = 0;
    double batch_mean_omega = 0.0;
    std::vector<EpisodeRecord> episodes;
    double ess = 0.0;
    double loss = 0.0; // (1 / ESS) * sum w * NLL
    double mu = 0.0;   // difficulty model used for this batch's weights
    double sigma2 = 0.0;
    bool fallback = false;
    std::optional<double> val_accuracy;
};

struct TrainResult {
    LearnerParams best;
    std::size_t best_iteration = 0;
    double best_val_accuracy = -1.0;
    std::vector<TrainRecord> history;
    DifficultyModel model;
    bool aborted = false;
    std::string diagnostic;
};

struct TrainOptions {
    /// Frozen scorer for offline mode; its difficulties drive the weights.
    std::optional<LearnerParams> proposal;
    /// Called after every validation with (iteration, params, validation accuracy).
    std::function<void(std::size_t, const LearnerParams&, double)> on_validation;
};

struct Evaluation {
    double mean = 0.0;
    double ci95 = 0.0; // 1.96 * sample std / sqrt(N)
    std::vector<double> accuracies;
};

inline Evaluation summarize_accuracies(std::vector<double> accuracies) {
    if (accuracies.size() < 2) {
        throw DomainError("evaluate: need at least 2 episodes for a confidence interval");
    }
    Evaluation e;
    double total = 0.0;
    for (double a : accuracies) {
        total += a;
    }
    e.mean = total / static_cast<double>(accuracies.size());
    e.ci95 = 1.96 * sample_std(accuracies) / std::sqrt(static_cast<double>(accuracies.size()));
    e.accuracies = std::move(accuracies);
    return e;
}

inline Evaluation evaluate(const LearnerParams& params, const BaseDataset& ds, std::size_t n, std::size_t k,
                           std::size_t q, std::size_t num_episodes, RandomStream& rng) {
    if (num_episodes < 2) {
        throw DomainError("evaluate: need at least 2 episodes for a confidence interval");
    }
    std::vector<double> acc;
    acc.reserve(num_episodes);
    for (std::size_t e = 0; e < num_episodes; ++e) {
        acc.push_back(episode_accuracy(params, sample_episode(ds, n, k, q, rng)));
    }
    return summarize_accuracies(std::move(acc));
}

/// Difficulty (mean query NLL) of each episode under `params`.
inline std::vector<double> score_episodes(const LearnerParams& params, const std::vector<Episode>& episodes) {
    std::vector<double> out;
    out.reserve(episodes.size());
    for (const auto& ep : episodes) {
        Graph g;
        out.push_back(forward_episode(params, bind(g, params, false), ep).difficulty.item());
    }
    return out;
}

/// Offline proposal model: difficulties of `num_episodes` training episodes under a pre-trained scorer.
inline DifficultyModel estimate_offline_model(const LearnerParams& scorer, const BaseDataset& ds, std::size_t n,
                                              std::size_t k, std::size_t q, std::size_t num_episodes,
                                              RandomStream& rng, double lambda = 0.9) {
    std::vector<Episode> episodes;
    for (std::size_t e = 0; e < num_episodes; ++e) {
        episodes.push_back(sample_episode(ds, n, k, q, rng));
    }
    const auto omegas = score_episodes(scorer, episodes);
    return estimate_offline(omegas, lambda);
}

namespace detail {

template <typename F>
void parallel_for(std::size_t count, std::size_t workers, F&& f) {
    if (workers <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) {
            f(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += workers) {
                    f(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

struct EpisodeGradient {
    double nll = 0.0;
    std::vector<Tensor> grads;
};

inline EpisodeGradient episode_gradient(const LearnerParams& params, const Episode& ep) {
    Graph g;
    const BoundParams b = bind(g, params, true);
    const auto out = forward_episode(params, b, ep);
    EpisodeGradient eg;
    eg.nll = out.difficulty.item();
    if (!std::isfinite(eg.nll)) {
        return eg;
    }
    for (const auto& v : gradients(out.difficulty, b.vars)) {
        eg.grads.push_back(v.value());
    }
    return eg;
}

} // namespace detail

/// Episodic training with importance-weighted, ESS-normalized batch losses.
///
/// Per iteration: sample |B| episodes, score each (mean query NLL), weight
/// each by target/proposal density of its difficulty under the current
/// difficulty model, minimize (1/ESS) * sum w * NLL with Adam, then feed the
/// batch difficulties to the online model in episode order. Validation runs
/// every `validation_interval` iterations; the best validation accuracy wins.
inline TrainResult train(const TrainConfig& config, LearnerParams params, const BaseDataset& train_split,
                         const BaseDataset& val_split, DifficultyModel model, const TrainOptions& options = {}) {
    validate(config);
    validate(params);
    if (uses_head(params.algorithm) && params.head->weight.shape[0] != config.way) {
        throw ConfigError("train: learner head is " + std::to_string(params.head->weight.shape[0]) +
                          "-way but episodes are " + std::to_string(config.way) + "-way");
    }
    const bool offline = config.scheme.mode == EstimationMode::offline;
    if (offline && config.scheme.kind != SchemeKind::baseline && !options.proposal) {
        throw ConfigError("train: offline mode needs a proposal scorer");
    }

    TrainResult result;
    result.best = params;
    const RandomStream root(config.seed);
    RandomStream episode_rng = root.split(1);
    RandomStream val_rng = root.split(2);
    AdamState adam;
    const std::size_t b = config.batch_size;

    for (std::size_t t = 1; t <= config.iterations; ++t) {
        std::vector<Episode> batch;
        batch.reserve(b);
        for (std::size_t i = 0; i < b; ++i) {
            batch.push_back(sample_episode(train_split, config.way, config.shot, config.query, episode_rng));
        }

        std::vector<detail::EpisodeGradient> per_episode(b);
        detail::parallel_for(b, config.workers,
                             [&](std::size_t i) { per_episode[i] = detail::episode_gradient(params, batch[i]); });

        TrainRecord rec;
        rec.iteration = t;
        rec.mu = model.mu;
        rec.sigma2 = model.var;
        SamplingScheme scheme = config.scheme;
        scheme.progress = static_cast<double>(t) / static_cast<double>(config.iterations);

        std::vector<double> omegas(b);
        if (offline && options.proposal) {
            const auto scored = score_episodes(*options.proposal, batch);
            omegas = scored;
        } else {
            for (std::size_t i = 0; i < b; ++i) {
                omegas[i] = per_episode[i].nll;
            }
        }

        bool finite = true;
        std::vector<double> weights(b);
        double omega_total = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            finite = finite && std::isfinite(per_episode[i].nll) && std::isfinite(omegas[i]);
            const auto w = finite ? importance_weight(omegas[i], scheme, model) : ImportanceWeight{};
            weights[i] = w.weight;
            rec.episodes.push_back({omegas[i], w.weight, per_episode[i].nll, w.proposal_clamped});
            omega_total += omegas[i];
        }
        rec.batch_mean_omega = omega_total / static_cast<double>(b);
        if (!finite) {
            result.aborted = true;
            result.diagnostic = "non-finite episode loss at iteration " + std::to_string(t);
            result.history.push_back(std::move(rec));
            return result;
        }
        if (std::all_of(weights.begin(), weights.end(), [](double w) { return w == 0.0; })) {
            std::fill(weights.begin(), weights.end(), 1.0);
            for (auto& e : rec.episodes) {
                e.weight = 1.0;
            }
            rec.fallback = true;
        }
        rec.ess = effective_sample_size(weights);
        double loss = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            loss += weights[i] * per_episode[i].nll;
        }
        rec.loss = loss / rec.ess;
        if (!std::isfinite(rec.loss)) {
            result.aborted = true;
            result.diagnostic = "non-finite weighted loss at iteration " + std::to_string(t);
            result.history.push_back(std::move(rec));
            return result;
        }

        // Fixed, index-ordered reduction.
        auto tensors = params.tensors();
        std::vector<Tensor> grads;
        for (const auto* p : tensors) {
            grads.push_back(Tensor::zeros(p->shape));
        }
        for (std::size_t i = 0; i < b; ++i) {
            const double c = weights[i] / rec.ess;
            if (c == 0.0) {
                continue;
            }
            for (std::size_t p = 0; p < grads.size(); ++p) {
                const auto& g = per_episode[i].grads[p].data;
                auto& acc = grads[p].data;
                for (std::size_t j = 0; j < acc.size(); ++j) {
                    acc[j] += c * g[j];
                }
            }
        }

        if (!offline) {
            for (double omega : omegas) {
                model = update_online(model, omega);
            }
        }
        try {
            adam_step(tensors, grads, adam, config.learning_rate);
        } catch (const DomainError& e) {
            result.aborted = true;
            result.diagnostic = std::string(e.what()) + " at iteration " + std::to_string(t);
            result.history.push_back(std::move(rec));
            return result;
        }

        if (t % config.validation_interval == 0) {
            const auto eval = evaluate(params, val_split, config.way, config.shot, config.query,
                                       config.validation_episodes, val_rng);
            rec.val_accuracy = eval.mean;
            if (eval.mean > result.best_val_accuracy) {
                result.best_val_accuracy = eval.mean;
                result.best = params;
                result.best_iteration = t;
            }
            if (options.on_validation) {
                options.on_validation(t, params, eval.mean);
            }
        }
        result.history.push_back(std::move(rec));
    }
    result.model = model;
    return result;
}

/// Initial difficulty model for a run: online warm-up of `warmup_iterations`
/// batches, or the offline estimate from `proposal`.
inline DifficultyModel initial_model(const TrainConfig& config, const LearnerParams* proposal,
                                     const BaseDataset& train_split, std::size_t offline_episodes = 1000) {
    if (config.scheme.mode == EstimationMode::online) {
        return DifficultyModel::online(config.warmup_iterations * config.batch_size, config.lambda);
    }
    if (proposal == nullptr) {
        throw ConfigError("offline mode requires a proposal checkpoint");
    }
    RandomStream rng = RandomStream(config.seed).split(4);
    return estimate_offline_model(*proposal, train_split, config.way, config.shot, config.query, offline_episodes, rng,
                                  config.lambda);
}

// ---------------------------------------------------------------------------
// History files

inline std::string history_csv(const std::vector<TrainRecord>& history) {
    std::string s = "iteration,loss,ess,mu,sigma2,fallback,val_accuracy\n";
    for (const auto& r : history) {
        s += std::to_string(r.iteration) + "," + io::format_double(r.loss) + "," + io::format_double(r.ess) + "," +
             io::format_double(r.mu) + "," + io::format_double(r.sigma2) + "," + (r.fallback ? "1" : "0") + "," +
             (r.val_accuracy ? io::format_double(*r.val_accuracy) : "") + "\n";
    }
    return s;
}

/// Per-episode sampler state: `iteration,episode,omega,weight,nll,clamped`.
inline std::string episodes_csv(const std::vector<TrainRecord>& history) {
    std::string s = "iteration,episode,omega,weight,nll,clamped\n";
    for (const auto& r : history) {
        for (std::size_t e = 0; e < r.episodes.size(); ++e) {
            const auto& ep = r.episodes[e];
            s += std::to_string(r.iteration) + "," + std::to_string(e) + "," + io::format_double(ep.omega) + "," +
                 io::format_double(ep.weight) + "," + io::format_double(ep.nll) + "," +
                 (ep.proposal_clamped ? "1" : "0") + "\n";
        }
    }
    return s;
}

inline WeightedLossRun weighted_losses(const std::vector<TrainRecord>& history) {
    WeightedLossRun run;
    for (const auto& r : history) {
        std::vector<double> batch;
        for (const auto& e : r.episodes) {
            batch.push_back(e.weight * e.nll);
        }
        run.push_back(std::move(batch));
    }
    return run;
}

inline WeightedLossRun load_weighted_losses(const std::filesystem::path& episodes_file) {
    const auto file = episodes_file.string();
    const auto lines = io::lines_of(io::read_file(episodes_file));
    if (lines.empty() || lines[0] != "iteration,episode,omega,weight,nll,clamped") {
        throw ParseError(file, 1, "unexpected header");
    }
    WeightedLossRun run;
    std::size_t current = 0;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        if (lines[li].empty()) {
            continue;
        }
        const auto f = io::split_csv_line(lines[li]);
        if (f.size() != 6) {
            throw ParseError(file, li + 1, "expected 6 columns");
        }
        const auto it = io::parse_int<std::size_t>(f[0], file, li + 1);
        if (run.empty() || it != current) {
            run.emplace_back();
            current = it;
        }
        run.back().push_back(io::parse_double(f[3], file, li + 1) * io::parse_double(f[4], file, li + 1));
    }
    return run;
}

} // namespace episample

#endif
