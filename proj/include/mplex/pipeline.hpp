#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mplex/config.hpp"
#include "mplex/eval_metrics.hpp"
#include "mplex/grpo_trainer.hpp"
#include "mplex/io.hpp"
#include "mplex/policy_model.hpp"
#include "mplex/pretrain.hpp"
#include "mplex/render.hpp"
#include "mplex/rollout_engine.hpp"
#include "mplex/task_suite.hpp"
#include "mplex/trajectory_io.hpp"

// Command implementations shared by the CLI and the acceptance suite. Every
// command is a pure function of its inputs and seed that returns the files it
// would write; nothing touches the disk until the caller commits.
namespace mplex::pipeline {

using Real = float;
using Model = PolicyModel<Real>;

// Seed namespaces below the configured run seed.
inline constexpr std::uint64_t kInitStream = 0x696E6974ull;
inline constexpr std::uint64_t kTrainTaskStream = 0x74726E74ull;
inline constexpr std::uint64_t kValidTaskStream = 0x766C6474ull;
inline constexpr std::uint64_t kEvalStream = 0x6576616Cull;
inline constexpr std::uint64_t kBootstrapStream = 0x62747370ull;

inline std::string num(double x) { return format_number(x, 10); }

inline void check_prompts(const std::vector<TaskInstance>& tasks, const RunConfig& cfg) {
    for (const auto& t : tasks) {
        if (static_cast<int>(t.prompt.size()) > cfg.max_prompt_length) {
            throw ConfigError("task " + std::to_string(t.id) + " prompt has " + std::to_string(t.prompt.size()) +
                              " tokens, above max_prompt_length " + std::to_string(cfg.max_prompt_length));
        }
        for (const auto* seq : {&t.prompt, &t.ground_truth}) {
            for (TokenId v : *seq) {
                if (v >= cfg.model.vocab) {
                    throw SchemaError("task token " + std::to_string(v) + " outside the model vocabulary");
                }
            }
        }
    }
}

inline void check_model(const Model& model, const RunConfig& cfg) {
    if (model.vocab_size() < Vocabulary::kMinSize) {
        throw SchemaError("checkpoint vocabulary smaller than the task vocabulary");
    }
    if (cfg.max_prompt_length + cfg.max_response_length > model.config().n_ctx) {
        throw ConfigError("max_prompt_length + max_response_length exceeds the checkpoint context");
    }
}

inline TaskStream train_stream(const RunConfig& cfg) {
    return {cfg.train.task_kind, cfg.train.task_params, derive_seed(cfg.train.seed, {kTrainTaskStream})};
}

inline std::vector<TaskInstance> validation_set(const RunConfig& cfg) {
    TaskStream s{cfg.train.task_kind, cfg.train.task_params, derive_seed(cfg.train.seed, {kValidTaskStream})};
    return s.take(0, static_cast<std::size_t>(cfg.train.validation_questions));
}

// ---- gen-tasks ----

inline std::vector<TaskInstance> generate_tasks(const RunConfig& cfg, int count) {
    if (count < 1) {
        throw ConfigError("task count must be >= 1");
    }
    TaskStream s{cfg.train.task_kind, cfg.train.task_params, cfg.train.seed};
    auto tasks = s.take(0, static_cast<std::size_t>(count));
    check_prompts(tasks, cfg);
    return tasks;
}

inline ArtifactSet gen_tasks(const RunConfig& cfg, int count, const std::string& out) {
    ArtifactSet a;
    a.add(out, dump_tasks(generate_tasks(cfg, count)));
    return a;
}

// ---- pretrain ----

struct PretrainOutput {
    Model model;
    std::vector<double> losses;
};

inline PretrainOutput run_pretrain(const RunConfig& cfg) {
    PretrainOutput out{Model(cfg.model, derive_seed(cfg.train.seed, {kInitStream})), {}};
    Adam<Real>::Options opt;
    opt.clip_norm = cfg.train.grad_clip;
    Adam<Real> adam(cfg.model, opt);
    out.losses = pretrain(out.model, adam, cfg.pretrain);
    out.model.set_version(0);
    return out;
}

inline ArtifactSet pretrain_cmd(const RunConfig& cfg, const std::string& checkpoint_out, const std::string& loss_csv) {
    const auto r = run_pretrain(cfg);
    std::string csv = "step,loss\n";
    for (std::size_t s = 0; s < r.losses.size(); ++s) {
        csv += std::to_string(s + 1) + "," + num(r.losses[s]) + "\n";
    }
    ArtifactSet a;
    a.add(checkpoint_out, serialize_checkpoint(r.model));
    a.add(loss_csv, csv);
    return a;
}

// ---- train-rl ----

inline const char* kMetricsHeader =
    "step,mean_reward,loss,mean_step_entropy,mean_think_len,mean_answer_len,consensus_frac,majority21_frac,"
    "distinct_frac";

inline std::string metrics_row(const StepMetrics& m) {
    return std::to_string(m.step) + "," + num(m.mean_reward) + "," + num(m.loss) + "," + num(m.mean_step_entropy) +
           "," + num(m.mean_think_len) + "," + num(m.mean_answer_len) + "," + num(m.consensus_frac) + "," +
           num(m.majority21_frac) + "," + num(m.distinct_frac);
}

inline std::string metrics_csv(const std::vector<StepMetrics>& series) {
    std::string csv = std::string(kMetricsHeader) + "\n";
    for (const auto& m : series) {
        csv += metrics_row(m) + "\n";
    }
    return csv;
}

inline std::string validation_csv(const std::vector<ValidationRecord>& v) {
    std::string csv = "step,k,pass_at_1,pass_at_k,mean_reward\n";
    for (const auto& r : v) {
        csv += std::to_string(r.step) + "," + std::to_string(r.k) + "," + num(r.pass_at_1) + "," + num(r.pass_at_k) +
               "," + num(r.mean_reward) + "\n";
    }
    return csv;
}

struct TrainRlPaths {
    std::string checkpoint_out;
    std::string metrics_csv;
    std::string validation_csv;
    std::string diagnostic_checkpoint;  // written immediately if training diverges
};

inline ArtifactSet train_rl_cmd(const RunConfig& cfg, Model model, const TrainRlPaths& paths) {
    check_model(model, cfg);
    check_prompts(validation_set(cfg), cfg);
    TrainingHooks hooks;
    if (!paths.diagnostic_checkpoint.empty()) {
        hooks.on_divergence = [&](const std::string& snapshot) {
            ArtifactSet diag;
            diag.add(paths.diagnostic_checkpoint, snapshot);
            diag.commit();
        };
    }
    const auto result = run_training(model, cfg.train, train_stream(cfg), validation_set(cfg), hooks);
    ArtifactSet a;
    a.add(paths.checkpoint_out, serialize_checkpoint(model));
    a.add(paths.metrics_csv, metrics_csv(result.series));
    if (!paths.validation_csv.empty()) {
        a.add(paths.validation_csv, validation_csv(result.validations));
    }
    return a;
}

// ---- eval ----

inline std::vector<Trajectory> evaluate(const Model& model, const std::vector<TaskInstance>& tasks,
                                        const RunConfig& cfg, int samples) {
    if (samples < 1) {
        throw ConfigError("samples per task must be >= 1");
    }
    check_model(model, cfg);
    check_prompts(tasks, cfg);
    return sample_tasks(model, tasks, cfg.train.rollout, samples, derive_seed(cfg.train.seed, {kEvalStream}),
                        cfg.train.threads);
}

inline std::string eval_csv(const std::vector<Trajectory>& log) {
    std::string csv = "task_id,n,correct,pass_at_1,mean_think_len,mean_answer_len,mean_entropy\n";
    std::vector<std::uint64_t> ids;
    for (const auto& tr : log) {
        if (std::find(ids.begin(), ids.end(), tr.task_id) == ids.end()) {
            ids.push_back(tr.task_id);
        }
    }
    for (std::uint64_t id : ids) {
        int n = 0, c = 0;
        double think = 0.0, answer = 0.0, ent = 0.0;
        for (const auto& tr : log) {
            if (tr.task_id != id) {
                continue;
            }
            ++n;
            c += tr.reward > 0.5 ? 1 : 0;
            think += tr.think_len();
            answer += tr.answer_len();
            ent += tr.mean_entropy();
        }
        csv += std::to_string(id) + "," + std::to_string(n) + "," + std::to_string(c) + "," +
               num(static_cast<double>(c) / n) + "," + num(think / n) + "," + num(answer / n) + "," + num(ent / n) +
               "\n";
    }
    return csv;
}

inline ArtifactSet eval_cmd(const RunConfig& cfg, const Model& model, const std::vector<TaskInstance>& tasks,
                            int samples, const std::string& log_out, const std::string& csv_out) {
    const auto log = evaluate(model, tasks, cfg, samples);
    ArtifactSet a;
    a.add(log_out, dump_trajectories(log));
    a.add(csv_out, eval_csv(log));
    return a;
}

// ---- passk ----

inline std::string passk_csv(const std::vector<PassAtKPoint>& curve) {
    std::string csv = "k,mean,stderr\n";
    for (const auto& p : curve) {
        csv += std::to_string(p.k) + "," + num(p.mean) + "," + num(p.stderr) + "\n";
    }
    return csv;
}

inline std::vector<PassAtKPoint> passk_from_log(const std::vector<Trajectory>& log, int max_k, int bootstrap,
                                                std::uint64_t seed) {
    const auto outcomes = outcomes_by_task(log);
    if (outcomes.empty()) {
        throw SchemaError("trajectory log is empty");
    }
    int n_min = outcomes.front().n();
    for (const auto& o : outcomes) {
        n_min = std::min(n_min, o.n());
    }
    const int top = max_k > 0 ? std::min(max_k, n_min) : n_min;
    return pass_at_k_curve(outcomes, power_of_two_ks(top), bootstrap, derive_seed(seed, {kBootstrapStream}));
}

inline ArtifactSet passk_cmd(const std::vector<Trajectory>& log, int max_k, int bootstrap, std::uint64_t seed,
                             const std::string& out) {
    ArtifactSet a;
    a.add(out, passk_csv(passk_from_log(log, max_k, bootstrap, seed)));
    return a;
}

// ---- viz ----

inline std::string viz_text(const std::vector<Trajectory>& log, const Vocabulary& vocab, int limit,
                            const RenderOptions& opt) {
    std::string out;
    const std::size_t n = limit > 0 ? std::min<std::size_t>(log.size(), static_cast<std::size_t>(limit)) : log.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& tr = log[i];
        out += "== episode " + std::to_string(tr.episode_id) + " task " + std::to_string(tr.task_id) + " reward " +
               num(tr.reward) + " ==\n";
        out += render_trajectory(tr, vocab, opt);
    }
    return out;
}

// ---- export ----

inline ArtifactSet export_cmd(const std::string& csv_text, const std::string& out_dir) {
    ArtifactSet a;
    for (auto& [name, content] : plot_export(parse_csv(csv_text))) {
        a.add(out_dir + "/" + name, content);
    }
    return a;
}

// ---- compare ----

struct CompareOptions {
    std::vector<DecodeMode> modes = {DecodeMode::Multiplex, DecodeMode::DiscreteCoT};
    std::vector<int> ks = {1, 3};
    int steps = 0;       // GRPO steps per variant before evaluation
    int samples = 64;    // rollouts per evaluation question
    int questions = 16;  // evaluation questions when no task file is given
    int bootstrap = 1000;
    int window = 10;
};

struct Variant {
    std::string name;
    DecodeMode mode = DecodeMode::Multiplex;
    int K = 1;
};

inline std::vector<Variant> compare_variants(const CompareOptions& o) {
    std::vector<Variant> out;
    for (DecodeMode m : o.modes) {
        if (m == DecodeMode::Multiplex) {
            for (int k : o.ks) {
                out.push_back({"multiplex-K" + std::to_string(k), m, k});
            }
        } else {
            out.push_back({to_string(m), m, 1});
        }
    }
    if (out.empty()) {
        throw ConfigError("compare needs at least one mode");
    }
    return out;
}

inline ArtifactSet compare_cmd(const RunConfig& cfg, const Model& base, const std::vector<TaskInstance>& eval_tasks,
                               const CompareOptions& opt, const std::string& out_dir) {
    using nlohmann::json;
    if (opt.samples < 1 || opt.steps < 0 || opt.window < 1 || opt.bootstrap < 1) {
        throw ConfigError("compare needs samples >= 1, steps >= 0, window >= 1 and bootstrap >= 1");
    }
    check_model(base, cfg);
    check_prompts(eval_tasks, cfg);
    const auto variants = compare_variants(opt);
    const std::string cols = "variant,mode,K,";
    std::string passk = cols + "k,mean,stderr\n";
    std::string ratio = cols + "steps,window,h_start,h_end,reduction_pct\n";
    std::string lengths = cols + "step,mean_think_len,mean_answer_len,mean_response_len\n";
    std::string training = cols + kMetricsHeader + "\n";
    json report = {{"seed", cfg.train.seed},
                   {"config", run_config_to_json(cfg)},
                   {"steps", opt.steps},
                   {"samples_per_question", opt.samples},
                   {"questions", eval_tasks.size()},
                   {"bootstrap", opt.bootstrap},
                   {"entropy_window", opt.window},
                   {"variants", json::array()}};
    json ratios = json::object();

    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
        const auto& v = variants[vi];
        const std::string prefix = v.name + "," + to_string(v.mode) + "," + std::to_string(v.K) + ",";
        RunConfig vc = cfg;
        vc.train.rollout.mode = v.mode;
        vc.train.rollout.K = v.K;
        vc.train.total_steps = v.mode == DecodeMode::SoftThinking ? 0 : opt.steps;
        vc.train.validation_interval = 0;
        Model model = base;
        const auto result = run_training(model, vc.train, train_stream(vc), {});

        for (const auto& m : result.series) {
            training += prefix + metrics_row(m) + "\n";
            lengths += prefix + std::to_string(m.step) + "," + num(m.mean_think_len) + "," + num(m.mean_answer_len) +
                       "," + num(m.mean_think_len + m.mean_answer_len) + "\n";
        }
        json ratio_value = nullptr;
        const auto h = result.entropy_series();
        if (h.size() >= 2 * static_cast<std::size_t>(opt.window)) {
            double hs = 0.0, he = 0.0;
            for (int i = 0; i < opt.window; ++i) {
                hs += h[i];
                he += h[h.size() - opt.window + i];
            }
            hs /= opt.window;
            he /= opt.window;
            const double r = hs > 0.0 ? entropy_reduction_ratio(h, opt.window) : std::nan("");
            ratio += prefix + std::to_string(h.size()) + "," + std::to_string(opt.window) + "," + num(hs) + "," +
                     num(he) + "," + num(r) + "\n";
            if (hs > 0.0) {
                ratio_value = r;
            }
        } else {
            ratio += prefix + std::to_string(h.size()) + "," + std::to_string(opt.window) + ",nan,nan,nan\n";
        }
        ratios[v.name] = ratio_value;

        const auto log = evaluate(model, eval_tasks, vc, opt.samples);
        const auto eval_seed = derive_seed(cfg.train.seed, {kBootstrapStream, vi});
        const auto curve = passk_from_log(log, 0, opt.bootstrap, eval_seed);
        for (const auto& p : curve) {
            passk += prefix + std::to_string(p.k) + "," + num(p.mean) + "," + num(p.stderr) + "\n";
        }
        const auto stats = length_and_diversity_stats(log);
        if (result.series.empty()) {
            lengths += prefix + "0," + num(stats.mean_think_len) + "," + num(stats.mean_answer_len) + "," +
                       num(stats.mean_think_len + stats.mean_answer_len) + "\n";
        }
        report["variants"].push_back({{"name", v.name},
                                      {"mode", to_string(v.mode)},
                                      {"K", v.K},
                                      {"trained_steps", result.series.size()},
                                      {"train_seed", derive_seed(cfg.train.seed, {kTrainStream})},
                                      {"eval_seed", derive_seed(cfg.train.seed, {kEvalStream})},
                                      {"bootstrap_seed", eval_seed},
                                      {"pass_at_1", curve.front().mean},
                                      {"max_k", curve.back().k},
                                      {"pass_at_max_k", curve.back().mean},
                                      {"mean_think_len", stats.mean_think_len},
                                      {"mean_answer_len", stats.mean_answer_len},
                                      {"entropy_reduction_pct", ratio_value}});
    }
    report["entropy_reduction_pct"] = ratios;
    if (ratios.contains("multiplex-K1") && ratios.contains("multiplex-K3") && !ratios["multiplex-K1"].is_null() &&
        !ratios["multiplex-K3"].is_null()) {
        const double r1 = ratios["multiplex-K1"], r3 = ratios["multiplex-K3"];
        report["k3_vs_k1_entropy_reduction"] = r3 < r1 ? "K=3 lower" : (r3 > r1 ? "K=3 higher" : "equal");
    } else {
        report["k3_vs_k1_entropy_reduction"] = nullptr;
    }

    ArtifactSet a;
    a.add(out_dir + "/passk.csv", passk);
    a.add(out_dir + "/entropy_reduction.csv", ratio);
    a.add(out_dir + "/length_curves.csv", lengths);
    a.add(out_dir + "/training_metrics.csv", training);
    a.add(out_dir + "/report.json", report.dump(2) + "\n");
    return a;
}

}  // namespace mplex::pipeline
