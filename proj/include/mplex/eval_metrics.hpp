#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mplex/common.hpp"
#include "mplex/rng.hpp"
#include "mplex/rollout_engine.hpp"

namespace mplex {

// Per-question sampled outcomes (true = correct).
struct RunOutcomes {
    std::vector<bool> results;

    int n() const { return static_cast<int>(results.size()); }
    int c() const {
        int s = 0;
        for (bool r : results) {
            s += r ? 1 : 0;
        }
        return s;
    }
};

// 1 - C(n-c, k) / C(n, k) in product form. Real may be an exact rational type.
template <class Real = double>
Real pass_at_k_unbiased(int n, int c, int k) {
    if (k < 1 || k > n) {
        throw ParameterError("pass@k needs 1 <= k <= n");
    }
    if (c < 0 || c > n) {
        throw ParameterError("pass@k needs 0 <= c <= n");
    }
    if (n - c < k) {
        return Real(1);
    }
    Real prod(1);
    for (int i = n - c + 1; i <= n; ++i) {
        prod *= Real(1) - Real(k) / Real(i);
    }
    return Real(1) - prod;
}

struct MeanStderr {
    double mean = 0.0;
    double stderr = 0.0;
};

inline MeanStderr summarize(const std::vector<double>& xs) {
    MeanStderr out;
    if (xs.empty()) {
        return out;
    }
    for (double x : xs) {
        out.mean += x;
    }
    out.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) {
            ss += (x - out.mean) * (x - out.mean);
        }
        out.stderr = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return out;
}

// B resamples of size n with replacement; each resample is scored with the
// unbiased estimator. stderr is the spread of the bootstrap replicates.
inline MeanStderr pass_at_k_bootstrap(const RunOutcomes& outcomes, int k, int B, Rng& rng) {
    const int n = outcomes.n();
    if (k < 1 || k > n) {
        throw ParameterError("pass@k needs 1 <= k <= n");
    }
    if (B < 1) {
        throw ParameterError("bootstrap needs B >= 1");
    }
    std::vector<double> reps(B);
    for (int b = 0; b < B; ++b) {
        int c = 0;
        for (int i = 0; i < n; ++i) {
            c += outcomes.results[rng.below(static_cast<std::uint64_t>(n))] ? 1 : 0;
        }
        reps[b] = pass_at_k_unbiased(n, c, k);
    }
    return summarize(reps);
}

struct PassAtKPoint {
    int k = 1;
    double mean = 0.0;
    double stderr = 0.0;
};

// k = 1, 2, 4, ... up to the smallest per-question sample count.
inline std::vector<int> power_of_two_ks(int max_k) {
    std::vector<int> ks;
    for (int k = 1; k <= max_k; k *= 2) {
        ks.push_back(k);
    }
    return ks;
}

// Macro-average over questions; stderr from B bootstrap replicates that
// resample every question's outcomes independently.
inline std::vector<PassAtKPoint> pass_at_k_curve(const std::vector<RunOutcomes>& questions, const std::vector<int>& ks,
                                                 int B, std::uint64_t seed) {
    if (questions.empty()) {
        throw ParameterError("pass@k curve needs at least one question");
    }
    std::vector<PassAtKPoint> out;
    for (int k : ks) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(k)}));
        std::vector<double> reps(B, 0.0);
        for (int b = 0; b < B; ++b) {
            double acc = 0.0;
            for (const auto& q : questions) {
                const int n = q.n();
                int c = 0;
                for (int i = 0; i < n; ++i) {
                    c += q.results[rng.below(static_cast<std::uint64_t>(n))] ? 1 : 0;
                }
                acc += pass_at_k_unbiased(n, c, k);
            }
            reps[b] = acc / static_cast<double>(questions.size());
        }
        const auto s = summarize(reps);
        out.push_back({k, s.mean, s.stderr});
    }
    return out;
}

// Plain macro-averaged unbiased estimate (no resampling).
inline double pass_at_k_macro(const std::vector<RunOutcomes>& questions, int k) {
    if (questions.empty()) {
        throw ParameterError("pass@k needs at least one question");
    }
    double acc = 0.0;
    for (const auto& q : questions) {
        acc += pass_at_k_unbiased(q.n(), q.c(), k);
    }
    return acc / static_cast<double>(questions.size());
}

// (H_start - H_end) / H_start * 100 over the first and last `window` entries.
inline double entropy_reduction_ratio(const std::vector<double>& series, int window = 10) {
    if (window < 1) {
        throw ParameterError("window must be positive");
    }
    if (series.size() < 2 * static_cast<std::size_t>(window)) {
        throw ParameterError("entropy series shorter than two windows");
    }
    double start = 0.0, end = 0.0;
    for (int i = 0; i < window; ++i) {
        start += series[i];
        end += series[series.size() - window + i];
    }
    start /= window;
    end /= window;
    if (start == 0.0) {
        throw InvariantError("entropy-reduction ratio undefined for zero starting entropy");
    }
    return (start - end) / start * 100.0;
}

struct LengthDiversityStats {
    double mean_think_len = 0.0;
    double mean_answer_len = 0.0;
    std::size_t think_steps = 0;
    double consensus_frac = 0.0;
    double majority21_frac = 0.0;
    double distinct_frac = 0.0;
    double other_frac = 0.0;
};

inline LengthDiversityStats length_and_diversity_stats(const std::vector<Trajectory>& log) {
    if (log.empty()) {
        throw SchemaError("trajectory log is empty");
    }
    LengthDiversityStats s;
    std::size_t consensus = 0, majority = 0, distinct = 0, other = 0;
    for (const auto& tr : log) {
        s.mean_think_len += tr.think_len();
        s.mean_answer_len += tr.answer_len();
        for (const auto& st : tr.steps) {
            ++s.think_steps;
            switch (st.diversity.cls) {
                case DiversityClass::Consensus:
                    ++consensus;
                    break;
                case DiversityClass::Majority21:
                    ++majority;
                    break;
                case DiversityClass::AllDistinct:
                    ++distinct;
                    break;
                default:
                    ++other;
                    break;
            }
        }
    }
    s.mean_think_len /= static_cast<double>(log.size());
    s.mean_answer_len /= static_cast<double>(log.size());
    if (s.think_steps > 0) {
        const double n = static_cast<double>(s.think_steps);
        s.consensus_frac = consensus / n;
        s.majority21_frac = majority / n;
        s.distinct_frac = distinct / n;
        s.other_frac = other / n;
    }
    return s;
}

// Groups a trajectory log by task id (in first-appearance order) into
// per-question outcomes.
inline std::vector<RunOutcomes> outcomes_by_task(const std::vector<Trajectory>& log) {
    std::vector<std::uint64_t> ids;
    std::vector<RunOutcomes> out;
    for (const auto& tr : log) {
        std::size_t idx = 0;
        while (idx < ids.size() && ids[idx] != tr.task_id) {
            ++idx;
        }
        if (idx == ids.size()) {
            ids.push_back(tr.task_id);
            out.emplace_back();
        }
        out[idx].results.push_back(tr.reward > 0.5);
    }
    return out;
}

}  // namespace mplex
