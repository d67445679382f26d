#ifndef EPISAMPLE_STATS_HPP
#define EPISAMPLE_STATS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace episample {

/// Inverse standard normal CDF, Wichura's AS 241 (PPND16); relative accuracy about 1e-16.
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw DomainError("normal_quantile: probability must lie in (0, 1)");
    }
    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q *
               (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r + 6.7265770927008700853e4) * r +
                    4.5921953931549871457e4) * r + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
                 1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
               (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r + 3.9307895800092710610e4) * r +
                    2.1213794301586595867e4) * r + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
                 4.2313330701600911252e1) * r + 1.0);
    }
    double r = q < 0.0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double val = 0.0;
    if (r <= 5.0) {
        r -= 1.6;
        val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r + 2.41780725177450611770e-1) * r +
                   1.27045825245236838258e0) * r + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
                4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
              (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r + 1.51986665636164571966e-2) * r +
                   1.48103976427480074590e-1) * r + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
                2.05319162663775882187e0) * r + 1.0);
    } else {
        r -= 5.0;
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 1.24266094738807843860e-3) * r +
                   2.65321895265761230930e-2) * r + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
                5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
              (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r + 1.84631831751005468180e-5) * r +
                   7.86869131145613259100e-4) * r + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
                5.99832206555887937690e-1) * r + 1.0);
    }
    return q < 0.0 ? -val : val;
}

// ---------------------------------------------------------------------------
// Spearman

/// 1-based ranks; tied values share the average of their ranks.
inline std::vector<double> average_ranks(std::span<const double> xs) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i + 1;
        while (j < order.size() && xs[order[j]] == xs[order[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t) {
            ranks[order[t]] = r;
        }
        i = j;
    }
    return ranks;
}

/// Pearson correlation of average ranks.
inline double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) {
        throw DomainError("spearman: inputs differ in length");
    }
    if (xs.size() < 2) {
        throw DomainError("spearman: need at least 2 pairs");
    }
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    const double n = static_cast<double>(xs.size());
    const double mean = (n + 1.0) / 2.0; // average ranks always have this mean
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        const double dx = rx[i] - mean;
        const double dy = ry[i] - mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw DomainError("spearman: zero rank variance, correlation undefined");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Shapiro-Wilk, Royston's AS R94 algorithm in double precision.

struct ShapiroWilkResult {
    double w = 1.0;
    double p = 1.0;
};

namespace detail {

inline double poly(std::span<const double> c, double x) {
    double result = 0.0;
    for (std::size_t i = c.size(); i-- > 0;) {
        result = result * x + c[i];
    }
    return result;
}

} // namespace detail

inline ShapiroWilkResult shapiro_wilk(std::span<const double> sample) {
    const std::size_t n = sample.size();
    if (n < 3 || n > 5000) {
        throw DomainError("shapiro_wilk: sample size must lie in [3, 5000], got " + std::to_string(n));
    }
    std::vector<double> x(sample.begin(), sample.end());
    for (double v : x) {
        if (!std::isfinite(v)) {
            throw DomainError("shapiro_wilk: non-finite value");
        }
    }
    std::sort(x.begin(), x.end());
    const double range = x.back() - x.front();
    if (!(range > 1e-19 * std::max(1.0, std::abs(x.front())))) {
        throw DomainError("shapiro_wilk: sample is constant");
    }

    // Coefficients a[0..n/2), antisymmetric: weight a[i] on x[n-1-i] - x[i].
    const std::size_t half = n / 2;
    std::vector<double> a(half);
    const double an = static_cast<double>(n);
    if (n == 3) {
        a[0] = std::numbers::sqrt2 / 2.0;
    } else {
        static constexpr double c1[] = {0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056};
        static constexpr double c2[] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
        std::vector<double> m(half);
        double summ2 = 0.0;
        for (std::size_t i = 0; i < half; ++i) {
            m[i] = normal_quantile((static_cast<double>(i + 1) - 0.375) / (an + 0.25));
            summ2 += m[i] * m[i];
        }
        summ2 *= 2.0;
        const double ssumm2 = std::sqrt(summ2);
        const double rsn = 1.0 / std::sqrt(an);
        const double a1 = detail::poly(c1, rsn) - m[0] / ssumm2;
        std::size_t first = 0;
        double fac = 0.0;
        if (n > 5) {
            const double a2 = -m[1] / ssumm2 + detail::poly(c2, rsn);
            fac = std::sqrt((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2));
            a[1] = a2;
            first = 2;
        } else {
            fac = std::sqrt((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1));
            first = 1;
        }
        a[0] = a1;
        for (std::size_t i = first; i < half; ++i) {
            a[i] = -m[i] / fac;
        }
    }

    // W on the sample mapped to [0, 1].
    const double origin = x.front();
    double mean = 0.0;
    for (double& v : x) {
        v = (v - origin) / range;
        mean += v;
    }
    mean /= an;
    double ssq = 0.0;
    for (double v : x) {
        ssq += (v - mean) * (v - mean);
    }
    double num = 0.0;
    for (std::size_t i = 0; i < half; ++i) {
        num += a[i] * (x[n - 1 - i] - x[i]);
    }
    double w = std::min(1.0, num * num / ssq);

    ShapiroWilkResult res;
    res.w = w;
    if (n == 3) {
        constexpr double pi6 = 6.0 / std::numbers::pi;
        constexpr double stqr = std::numbers::pi / 3.0;
        res.p = std::max(0.0, pi6 * (std::asin(std::sqrt(w)) - stqr));
        return res;
    }
    double w1 = std::log(1.0 - w);
    const double xx = std::log(an);
    double mean_z = 0.0, sd_z = 0.0;
    if (n <= 11) {
        const double gamma = -2.273 + 0.459 * an;
        if (w1 >= gamma) {
            res.p = 1e-99;
            return res;
        }
        static constexpr double c3[] = {0.544, -0.39978, 0.025054, -6.714e-4};
        static constexpr double c4[] = {1.3822, -0.77857, 0.062767, -0.0020322};
        w1 = -std::log(gamma - w1);
        mean_z = detail::poly(c3, an);
        sd_z = std::exp(detail::poly(c4, an));
    } else {
        static constexpr double c5[] = {-1.5861, -0.31082, -0.083751, 0.0038915};
        static constexpr double c6[] = {-0.4803, -0.082676, 0.0030302};
        mean_z = detail::poly(c5, xx);
        sd_z = std::exp(detail::poly(c6, xx));
    }
    res.p = 0.5 * std::erfc((w1 - mean_z) / sd_z / std::numbers::sqrt2);
    return res;
}

struct RejectionRate {
    double rate = 0.0;
    std::size_t degenerate = 0; // constant subsamples, counted as not rejected
};

/// Fraction of `repetitions` random subsamples (without replacement) whose
/// Shapiro-Wilk p-value falls below alpha.
inline RejectionRate normality_rejection_rate(std::span<const double> omegas, RandomStream& rng,
                                              std::size_t subsample_size = 50, std::size_t repetitions = 100,
                                              double alpha = 0.05) {
    if (repetitions == 0) {
        throw DomainError("normality_rejection_rate: repetitions must be positive");
    }
    if (omegas.size() < subsample_size) {
        throw DomainError("normality_rejection_rate: " + std::to_string(omegas.size()) +
                          " values, subsample size is " + std::to_string(subsample_size));
    }
    RejectionRate out;
    std::size_t rejected = 0;
    std::vector<double> sub(subsample_size);
    for (std::size_t r = 0; r < repetitions; ++r) {
        const auto idx = rng.sample_without_replacement(omegas.size(), subsample_size);
        for (std::size_t i = 0; i < subsample_size; ++i) {
            sub[i] = omegas[idx[i]];
        }
        try {
            rejected += shapiro_wilk(sub).p < alpha ? 1 : 0;
        } catch (const DomainError&) {
            ++out.degenerate;
        }
    }
    out.rate = static_cast<double>(rejected) / static_cast<double>(repetitions);
    return out;
}

// ---------------------------------------------------------------------------
// Density and Q-Q exports

struct HistogramRow {
    double bin_left = 0.0;
    double density = 0.0;
};

struct QQRow {
    double theoretical_q = 0.0; // standard normal quantile at (i - 0.5) / N
    double sample_q = 0.0;      // i-th smallest sample value
};

/// Equal-width bins over [min, max]; densities integrate to 1.
inline std::vector<HistogramRow> density_histogram(std::span<const double> xs, std::size_t bins, double* width_out = nullptr) {
    if (xs.size() < 2 || bins < 1) {
        throw DomainError("density_histogram: need at least 2 values and 1 bin");
    }
    auto [lo_it, hi_it] = std::minmax_element(xs.begin(), xs.end());
    double lo = *lo_it;
    double width = (*hi_it - lo) / static_cast<double>(bins);
    if (!(width > 0.0)) {
        lo -= 0.5;
        width = 1.0 / static_cast<double>(bins);
    }
    std::vector<double> counts(bins, 0.0);
    for (double x : xs) {
        auto b = static_cast<std::size_t>(std::floor((x - lo) / width));
        counts[std::min(b, bins - 1)] += 1.0;
    }
    std::vector<HistogramRow> rows(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        rows[b].bin_left = lo + static_cast<double>(b) * width;
        rows[b].density = counts[b] / (static_cast<double>(xs.size()) * width);
    }
    if (width_out) {
        *width_out = width;
    }
    return rows;
}

inline std::vector<QQRow> normal_qq(std::span<const double> xs) {
    if (xs.size() < 2) {
        throw DomainError("normal_qq: need at least 2 values");
    }
    std::vector<double> sorted(xs.begin(), xs.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    std::vector<QQRow> rows(sorted.size());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        rows[i] = {normal_quantile((static_cast<double>(i) + 0.5) / n), sorted[i]};
    }
    return rows;
}

struct DensityAndQQ {
    std::vector<HistogramRow> histogram;
    std::vector<QQRow> qq;
};

inline DensityAndQQ export_density_and_qq(std::span<const double> omegas, std::size_t bins) {
    return {density_histogram(omegas, bins), normal_qq(omegas)};
}

/// Number of strict local maxima after a centred moving average of `window` bins.
inline std::size_t count_modes(const std::vector<HistogramRow>& hist, std::size_t window = 5) {
    const std::size_t n = hist.size();
    std::vector<double> smooth(n, 0.0);
    const auto half = static_cast<std::ptrdiff_t>(window / 2);
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        std::size_t used = 0;
        for (auto d = -half; d <= half; ++d) {
            const auto j = static_cast<std::ptrdiff_t>(i) + d;
            if (j >= 0 && j < static_cast<std::ptrdiff_t>(n)) {
                total += hist[static_cast<std::size_t>(j)].density;
                ++used;
            }
        }
        smooth[i] = total / static_cast<double>(used);
    }
    // Plateaus count once: compare against the nearest differing neighbour.
    std::size_t modes = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && smooth[j + 1] == smooth[i]) {
            ++j;
        }
        const bool left_lower = i == 0 || smooth[i - 1] < smooth[i];
        const bool right_lower = j + 1 == n || smooth[j + 1] < smooth[i];
        if (left_lower && right_lower && smooth[i] > 0.0) {
            ++modes;
        }
        i = j + 1;
    }
    return modes;
}

// ---------------------------------------------------------------------------
// Extremes tracking

struct ExtremesRow {
    std::size_t checkpoint = 0;
    double easy_mean = 0.0;
    double hard_mean = 0.0;
};

/// Picks the m lowest- and m highest-difficulty episodes under `selection`
/// and reports each group's mean difficulty at every checkpoint
/// (`per_checkpoint[c][e]` scores episode e at checkpoint c).
inline std::vector<ExtremesRow> track_extremes(std::span<const double> selection,
                                               const std::vector<std::vector<double>>& per_checkpoint,
                                               std::size_t m = 50) {
    if (m == 0 || selection.size() < 2 * m) {
        throw DomainError("track_extremes: pool of " + std::to_string(selection.size()) + " episodes cannot supply " +
                          std::to_string(m) + " easiest and " + std::to_string(m) + " hardest");
    }
    std::vector<std::size_t> order(selection.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return selection[a] < selection[b]; });
    const std::vector<std::size_t> easy(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
    const std::vector<std::size_t> hard(order.end() - static_cast<std::ptrdiff_t>(m), order.end());
    std::vector<ExtremesRow> rows;
    for (std::size_t c = 0; c < per_checkpoint.size(); ++c) {
        const auto& scores = per_checkpoint[c];
        if (scores.size() != selection.size()) {
            throw DomainError("track_extremes: checkpoint " + std::to_string(c) + " scored a different episode set");
        }
        double e = 0.0, h = 0.0;
        for (auto i : easy) {
            e += scores[i];
        }
        for (auto i : hard) {
            h += scores[i];
        }
        rows.push_back({c, e / static_cast<double>(m), h / static_cast<double>(m)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Weighted-loss dispersion

inline double sample_std(std::span<const double> xs) {
    if (xs.size() < 2) {
        throw DomainError("sample_std: need at least 2 values");
    }
    double mean = 0.0;
    for (double x : xs) {
        mean += x;
    }
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) {
        ss += (x - mean) * (x - mean);
    }
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

/// One run: for every iteration, the batch's w * NLL products.
using WeightedLossRun = std::vector<std::vector<double>>;

/// Per run, the mean over iterations of the per-batch sample std of w * NLL.
inline std::vector<double> weighted_loss_std(const std::vector<WeightedLossRun>& runs) {
    std::vector<double> out;
    for (const auto& run : runs) {
        if (run.empty()) {
            throw DomainError("weighted_loss_std: run has no iterations");
        }
        double total = 0.0;
        for (const auto& batch : run) {
            if (batch.size() < 2) {
                throw DomainError("weighted_loss_std: batch size 1 has no standard deviation");
            }
            total += sample_std(batch);
        }
        out.push_back(total / static_cast<double>(run.size()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV writers

inline std::string histogram_csv(const std::vector<HistogramRow>& rows) {
    std::string s = "bin_left,density\n";
    for (const auto& r : rows) {
        s += io::format_double(r.bin_left) + "," + io::format_double(r.density) + "\n";
    }
    return s;
}

inline std::string qq_csv(const std::vector<QQRow>& rows) {
    std::string s = "theoretical_q,sample_q\n";
    for (const auto& r : rows) {
        s += io::format_double(r.theoretical_q) + "," + io::format_double(r.sample_q) + "\n";
    }
    return s;
}

inline std::string extremes_csv(const std::vector<ExtremesRow>& rows, const std::vector<std::string>& labels = {}) {
    std::string s = "checkpoint,easy_mean,hard_mean\n";
    for (const auto& r : rows) {
        s += (r.checkpoint < labels.size() ? labels[r.checkpoint] : std::to_string(r.checkpoint)) + "," +
             io::format_double(r.easy_mean) + "," + io::format_double(r.hard_mean) + "\n";
    }
    return s;
}

inline std::string dispersion_csv(const std::vector<std::string>& run_ids, const std::vector<double>& stds) {
    std::string s = "run_id,mean_batch_std\n";
    for (std::size_t i = 0; i < stds.size(); ++i) {
        s += run_ids.at(i) + "," + io::format_double(stds[i]) + "\n";
    }
    return s;
}

} // namespace episample

#endif
