#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mplex/common.hpp"
#include "mplex/eval_metrics.hpp"
#include "mplex/multiplex_sampler.hpp"
#include "mplex/policy_model.hpp"
#include "mplex/rollout_engine.hpp"
#include "mplex/task_suite.hpp"

namespace mplex {

struct TrainConfig {
    int batch_questions = 16;
    int group_size = 8;
    double learning_rate = 1e-4;
    double kl_coeff = 0.0;
    double entropy_coeff = 0.0;
    double clip_epsilon = 0.2;
    double grad_clip = 1.0;
    int total_steps = 200;
    RolloutConfig rollout;
    TaskKind task_kind = TaskKind::ChainApply;
    TaskParams task_params;
    std::uint64_t seed = 0;
    int validation_interval = 25;
    int validation_k = 4;
    int validation_samples = 8;
    int validation_questions = 32;
    int threads = 0;

    // Table-scale GRPO settings: 128 questions, 8 rollouts, lr 1e-6, K=3,
    // T = top-p = 1, 300 steps, 4096-token responses.
    static TrainConfig paper_preset() {
        TrainConfig c;
        c.batch_questions = 128;
        c.group_size = 8;
        c.learning_rate = 1e-6;
        c.total_steps = 300;
        c.rollout.K = 3;
        c.rollout.temperature = 1.0;
        c.rollout.top_p = 1.0;
        c.rollout.max_think = 4096 - 64;
        c.rollout.max_answer = 64;
        return c;
    }

    void validate() const {
        if (group_size < 2) {
            throw ConfigError("group_size must be >= 2");
        }
        if (batch_questions < 1) {
            throw ConfigError("batch_questions must be >= 1");
        }
        if (learning_rate < 0.0 || entropy_coeff < 0.0 || kl_coeff < 0.0 || clip_epsilon < 0.0) {
            throw ConfigError("learning rate and loss coefficients must be >= 0");
        }
        if (kl_coeff != 0.0) {
            throw ConfigError("kl_coeff must be 0: no frozen reference policy is kept");
        }
        if (total_steps < 0) {
            throw ConfigError("total_steps must be >= 0");
        }
        if (validation_interval < 0 || validation_k < 1 || validation_samples < validation_k ||
            validation_questions < 1) {
            throw ConfigError("validation needs interval >= 0, 1 <= k <= samples and >= 1 question");
        }
        rollout.validate();
        try {
            task_params.validate(task_kind);
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
    }
};

// (r - mean) / (std + 1e-6) with the population std; all-equal groups give
// exact zeros.
inline std::vector<double> group_advantages(const std::vector<double>& rewards) {
    if (rewards.size() < 2) {
        throw ParameterError("a group needs at least two rewards");
    }
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) {
        mean += r;
    }
    mean /= n;
    std::vector<double> adv(rewards.size(), 0.0);
    if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); })) {
        return adv;
    }
    double var = 0.0;
    for (double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double sd = std::sqrt(var / n);
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        adv[i] = (rewards[i] - mean) / (sd + 1e-6);
    }
    return adv;
}

struct GroupBatch {
    TaskInstance task;
    std::vector<Trajectory> trajectories;
    std::vector<double> rewards;
    std::vector<double> advantages;
};

template <class T>
struct ObjectiveResult {
    double loss = 0.0;
    ModelGrads<T> grads;
    std::size_t terms = 0;
    double max_abs_log_ratio = 0.0;
};

// Number of constituent discrete samples: K per thinking step, one per answer
// token (plus the stop draws under the any-sampled rule).
inline std::size_t count_terms(const Trajectory& tr) {
    std::size_t n = tr.stop_sample.token_ids.size() + tr.answer.size();
    for (const auto& st : tr.steps) {
        n += st.sample.token_ids.size();
    }
    return n;
}

// Clipped-ratio surrogate
//   loss = -(1/normalizer) sum_traj sum_terms min(rho A, clip(rho, 1 +- eps) A)
//          - entropy_coeff/normalizer * sum_terms H(pi at the term's position)
// with per-trajectory weights A. Multiplex inputs are rebuilt from the stored
// coefficients and the current embedding table; the coefficients themselves
// are held constant. Gradients of all trajectories are summed in fixed-size
// chunks in index order.
template <class T>
ObjectiveResult<T> surrogate_objective(const PolicyModel<T>& model, const std::vector<const Trajectory*>& trajs,
                                       const std::vector<double>& weights, double normalizer, double clip_epsilon,
                                       double entropy_coeff, int threads) {
    if (trajs.size() != weights.size()) {
        throw ParameterError("one weight per trajectory required");
    }
    if (!(normalizer > 0.0)) {
        throw ParameterError("normalizer must be positive");
    }
    constexpr std::size_t kChunk = 4;
    const std::size_t chunks = (trajs.size() + kChunk - 1) / kChunk;
    std::vector<ModelGrads<T>> partial(chunks, ModelGrads<T>(model.config()));
    std::vector<double> losses(trajs.size(), 0.0), max_lr(trajs.size(), 0.0);
    std::vector<std::size_t> terms(trajs.size(), 0);
    const int V = model.vocab_size();
    const int d = model.dim();

    parallel_for(chunks, threads, [&](std::size_t c) {
        for (std::size_t i = c * kChunk; i < std::min(trajs.size(), (c + 1) * kChunk); ++i) {
            const Trajectory& tr = *trajs[i];
            const double A = weights[i];
            const ScoringView view = scoring_view(tr);
            terms[i] = view.terms.size();
            if ((A == 0.0 && entropy_coeff == 0.0) || view.terms.empty()) {
                continue;
            }
            const auto& cfg = tr.config;
            const auto ctx = build_context(model.embedding(), view);
            typename PolicyModel<T>::Tape tape;
            model.forward_train(ctx, tape);
            std::vector<double> dl(static_cast<std::size_t>(tape.n) * V, 0.0);
            double loss = 0.0;
            for (const auto& term : view.terms) {
                std::span<const T> row(tape.logits.data() + static_cast<std::size_t>(term.position) * V, V);
                ProbVector q = shape_distribution<T>(row, cfg.temperature, cfg.top_p);
                if (term.mask_eot && q[cfg.eot] > 0.0) {
                    q = mask_token(q, cfg.eot);
                }
                if (!(q[term.token] > 0.0)) {
                    throw ReplayMismatchError("token " + std::to_string(term.token) + " left the support");
                }
                const double log_ratio = std::log(q[term.token]) - term.behavior_logprob;
                max_lr[i] = std::max(max_lr[i], std::abs(log_ratio));
                const double rho = std::exp(log_ratio);
                const double unclipped = rho * A;
                const double clipped = std::clamp(rho, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * A;
                loss -= std::min(unclipped, clipped) / normalizer;
                double* g = dl.data() + static_cast<std::size_t>(term.position) * V;
                if (unclipped <= clipped && A != 0.0) {
                    // d(-rho A / N)/dz_u = -(A rho / N) (1[u = v] - q_u) / T
                    const double s = -A * rho / normalizer / cfg.temperature;
                    for (int u = 0; u < V; ++u) {
                        g[u] += s * ((u == term.token ? 1.0 : 0.0) - q[u]);
                    }
                }
                if (entropy_coeff > 0.0) {
                    const double H = shannon_entropy(q);
                    loss -= entropy_coeff * H / normalizer;
                    // dH/dz_u = -q_u (log q_u + H) / T
                    const double s = -entropy_coeff / normalizer / cfg.temperature;
                    for (int u = 0; u < V; ++u) {
                        if (q[u] > 0.0) {
                            g[u] += s * (-q[u] * (std::log(q[u]) + H));
                        }
                    }
                }
            }
            losses[i] = loss;
            std::vector<T> dlogits(dl.begin(), dl.end());
            std::vector<T> dinputs;
            model.backward(tape, dlogits, partial[c], &dinputs);
            for (std::size_t p = 0; p < view.inputs.size(); ++p) {
                for (const auto& [v, a] : view.inputs[p]) {
                    T* de = partial[c].wte.data() + static_cast<std::size_t>(v) * d;
                    const T* di = dinputs.data() + p * d;
                    for (int j = 0; j < d; ++j) {
                        de[j] += static_cast<T>(a) * di[j];
                    }
                }
            }
        }
    });

    ObjectiveResult<T> out;
    out.grads = ModelGrads<T>(model.config());
    for (const auto& p : partial) {
        out.grads.add(p);
    }
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        out.loss += losses[i];
        out.terms += terms[i];
        out.max_abs_log_ratio = std::max(out.max_abs_log_ratio, max_lr[i]);
    }
    return out;
}

// GRPO loss over a batch of groups, token-mean normalized by the total number
// of constituent samples. Trajectories must come from the current policy or
// the one immediately before the last update.
template <class T>
ObjectiveResult<T> policy_loss(const PolicyModel<T>& model, const std::vector<GroupBatch>& batch,
                               const TrainConfig& cfg) {
    std::vector<const Trajectory*> trajs;
    std::vector<double> weights;
    double total_terms = 0.0;
    for (const auto& g : batch) {
        if (g.trajectories.size() != g.advantages.size()) {
            throw InvariantError("group has mismatched trajectory and advantage counts");
        }
        for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
            const auto& tr = g.trajectories[i];
            if (model.version() > tr.policy_version + 1) {
                throw StaleBatchError("trajectory generated " + std::to_string(model.version() - tr.policy_version) +
                                      " updates ago");
            }
            trajs.push_back(&tr);
            weights.push_back(g.advantages[i]);
            total_terms += static_cast<double>(count_terms(tr));
        }
    }
    if (total_terms == 0.0) {
        ObjectiveResult<T> empty;
        empty.grads = ModelGrads<T>(model.config());
        return empty;
    }
    return surrogate_objective(model, trajs, weights, total_terms, cfg.clip_epsilon, cfg.entropy_coeff, cfg.threads);
}

struct StepMetrics {
    int step = 0;
    double mean_reward = 0.0;
    double loss = 0.0;
    double mean_step_entropy = 0.0;
    double mean_think_len = 0.0;
    double mean_answer_len = 0.0;
    double consensus_frac = 0.0;
    double majority21_frac = 0.0;
    double distinct_frac = 0.0;
};

inline StepMetrics summarize_step(int step, const std::vector<Trajectory>& trajs, double loss) {
    StepMetrics m;
    m.step = step;
    m.loss = loss;
    if (trajs.empty()) {
        return m;
    }
    for (const auto& tr : trajs) {
        m.mean_reward += tr.reward;
        m.mean_step_entropy += tr.mean_entropy();
    }
    m.mean_reward /= static_cast<double>(trajs.size());
    m.mean_step_entropy /= static_cast<double>(trajs.size());
    const auto s = length_and_diversity_stats(trajs);
    m.mean_think_len = s.mean_think_len;
    m.mean_answer_len = s.mean_answer_len;
    m.consensus_frac = s.consensus_frac;
    m.majority21_frac = s.majority21_frac;
    m.distinct_frac = s.distinct_frac;
    return m;
}

// Rollout seed namespaces.
inline constexpr std::uint64_t kTrainStream = 0x7472616Eull;
inline constexpr std::uint64_t kValidStream = 0x76616C69ull;

// One GRPO update: G rollouts per question, group advantages, one optimizer
// step on the full batch.
template <class T>
StepMetrics train_step(PolicyModel<T>& model, Adam<T>& opt, const std::vector<TaskInstance>& tasks,
                       const TrainConfig& cfg, int step_index) {
    const std::size_t G = static_cast<std::size_t>(cfg.group_size);
    std::vector<const TaskInstance*> task_ptrs;
    std::vector<std::uint64_t> episodes;
    for (std::size_t q = 0; q < tasks.size(); ++q) {
        for (std::size_t g = 0; g < G; ++g) {
            task_ptrs.push_back(&tasks[q]);
            episodes.push_back((static_cast<std::uint64_t>(step_index) * tasks.size() + q) * G + g);
        }
    }
    auto trajs = rollout_batch(model, task_ptrs, episodes, cfg.rollout, derive_seed(cfg.seed, {kTrainStream}),
                               cfg.threads);
    std::vector<GroupBatch> batch(tasks.size());
    for (std::size_t q = 0; q < tasks.size(); ++q) {
        auto& gb = batch[q];
        gb.task = tasks[q];
        for (std::size_t g = 0; g < G; ++g) {
            gb.trajectories.push_back(std::move(trajs[q * G + g]));
            gb.rewards.push_back(gb.trajectories.back().reward);
        }
        gb.advantages = group_advantages(gb.rewards);
    }
    auto obj = policy_loss(model, batch, cfg);
    if (!std::isfinite(obj.loss) || !obj.grads.finite()) {
        throw DivergenceError("non-finite GRPO loss or gradient at step " + std::to_string(step_index));
    }
    if (cfg.learning_rate > 0.0) {
        opt.step(model, obj.grads, cfg.learning_rate);
    }
    std::vector<Trajectory> flat;
    for (auto& gb : batch) {
        for (auto& tr : gb.trajectories) {
            flat.push_back(std::move(tr));
        }
    }
    return summarize_step(step_index + 1, flat, obj.loss);
}

struct ValidationRecord {
    int step = 0;
    int k = 1;
    double pass_at_1 = 0.0;
    double pass_at_k = 0.0;
    double mean_reward = 0.0;
};

// n rollouts per task under the given config; returns the trajectories in
// (task, sample) order.
template <class T>
std::vector<Trajectory> sample_tasks(const PolicyModel<T>& model, const std::vector<TaskInstance>& tasks,
                                     const RolloutConfig& cfg, int samples, std::uint64_t seed, int threads) {
    std::vector<const TaskInstance*> ptrs;
    std::vector<std::uint64_t> episodes;
    for (std::size_t q = 0; q < tasks.size(); ++q) {
        for (int s = 0; s < samples; ++s) {
            ptrs.push_back(&tasks[q]);
            episodes.push_back(q * static_cast<std::uint64_t>(samples) + s);
        }
    }
    return rollout_batch(model, ptrs, episodes, cfg, seed, threads);
}

template <class T>
ValidationRecord run_validation(const PolicyModel<T>& model, const std::vector<TaskInstance>& tasks, const TrainConfig& cfg,
                          int step) {
    const auto trajs = sample_tasks(model, tasks, cfg.rollout, cfg.validation_samples,
                                    derive_seed(cfg.seed, {kValidStream, static_cast<std::uint64_t>(step)}),
                                    cfg.threads);
    const auto outcomes = outcomes_by_task(trajs);
    ValidationRecord r;
    r.step = step;
    r.k = cfg.validation_k;
    r.pass_at_1 = pass_at_k_macro(outcomes, 1);
    r.pass_at_k = pass_at_k_macro(outcomes, cfg.validation_k);
    for (const auto& tr : trajs) {
        r.mean_reward += tr.reward;
    }
    r.mean_reward /= static_cast<double>(trajs.size());
    return r;
}

struct TrainingResult {
    std::vector<StepMetrics> series;
    std::vector<ValidationRecord> validations;

    std::vector<double> entropy_series() const {
        std::vector<double> h;
        for (const auto& m : series) {
            h.push_back(m.mean_step_entropy);
        }
        return h;
    }
};

struct TrainingHooks {
    std::function<void(const StepMetrics&)> on_step;
    std::function<void(const ValidationRecord&)> on_validation;
    // Receives the model as it was when training diverged.
    std::function<void(const std::string&)> on_divergence;
};

// Training questions for step s are instances [s*B, (s+1)*B) of the stream;
// validation runs every validation_interval steps on a frozen set.
template <class T>
TrainingResult run_training(PolicyModel<T>& model, const TrainConfig& cfg, const TaskStream& stream,
                            const std::vector<TaskInstance>& validation_set, const TrainingHooks& hooks = {}) {
    cfg.validate();
    TrainingResult result;
    typename Adam<T>::Options opt_cfg;
    opt_cfg.clip_norm = cfg.grad_clip;
    Adam<T> opt(model.config(), opt_cfg);
    for (int s = 0; s < cfg.total_steps; ++s) {
        const auto tasks = stream.take(static_cast<std::uint64_t>(s) * cfg.batch_questions, cfg.batch_questions);
        const std::string snapshot = hooks.on_divergence ? serialize_checkpoint(model) : std::string();
        StepMetrics m;
        try {
            m = train_step(model, opt, tasks, cfg, s);
        } catch (const DivergenceError&) {
            if (hooks.on_divergence) {
                hooks.on_divergence(snapshot);
            }
            throw;
        }
        result.series.push_back(m);
        if (hooks.on_step) {
            hooks.on_step(m);
        }
        if (cfg.validation_interval > 0 && (s + 1) % cfg.validation_interval == 0 && !validation_set.empty()) {
            result.validations.push_back(run_validation(model, validation_set, cfg, s + 1));
            if (hooks.on_validation) {
                hooks.on_validation(result.validations.back());
            }
        }
    }
    return result;
}

}  // namespace mplex
