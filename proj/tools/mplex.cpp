// mplex: command-line front end for pretraining, GRPO training, evaluation,
// Pass@k estimation, trajectory rendering and comparison reports.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mplex/pipeline.hpp"

namespace {

using namespace mplex;
namespace pl = mplex::pipeline;

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Overrides {
    std::string config;
    std::optional<int> k, max_think, max_answer, steps, group_size, threads, batch_questions;
    std::optional<int> length, modulus, depth;
    std::optional<double> top_p, temperature, lr;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> scheme, mode, stop_rule, task;
};

void add_overrides(CLI::App* app, Overrides& o) {
    app->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile)->envname("MPLEX_CONFIG");
    app->add_option("--k", o.k, "multiplex width K");
    app->add_option("--scheme", o.scheme, "aggregation scheme")->check(CLI::IsMember({"uniform", "reweighted"}));
    app->add_option("--mode", o.mode, "decoding mode")->check(CLI::IsMember({"multiplex", "discrete", "soft"}));
    app->add_option("--top-p", o.top_p, "nucleus mass");
    app->add_option("--temperature", o.temperature, "sampling temperature");
    app->add_option("--max-think", o.max_think, "thinking-step budget");
    app->add_option("--max-answer", o.max_answer, "answer-token budget");
    app->add_option("--seed", o.seed, "run seed");
    app->add_option("--steps", o.steps, "training steps");
    app->add_option("--group-size", o.group_size, "rollouts per question");
    app->add_option("--stop-rule", o.stop_rule, "thinking stop rule")->check(CLI::IsMember({"argmax", "any-sampled"}));
    app->add_option("--threads", o.threads, "worker threads (0 = all cores)");
    app->add_option("--batch-questions", o.batch_questions, "questions per GRPO step");
    app->add_option("--lr", o.lr, "GRPO learning rate");
    app->add_option("--task", o.task, "task kind")->check(CLI::IsMember({"copy", "reverse", "modadd", "chain"}));
    app->add_option("--length", o.length, "copy/reverse payload length");
    app->add_option("--modulus", o.modulus, "modulus for modadd/chain");
    app->add_option("--depth", o.depth, "chain depth");
}

enum class StepsTarget { Pretrain, Train };

RunConfig resolve(const Overrides& o, StepsTarget target) {
    RunConfig c = o.config.empty() ? RunConfig{} : parse_run_config(read_file(o.config));
    auto& t = c.train;
    auto& r = t.rollout;
    if (o.k) r.K = *o.k;
    if (o.scheme) r.scheme = parse_scheme(*o.scheme);
    if (o.mode) r.mode = parse_mode(*o.mode);
    if (o.stop_rule) r.stop_rule = parse_stop_rule(*o.stop_rule);
    if (o.top_p) r.top_p = *o.top_p;
    if (o.temperature) r.temperature = *o.temperature;
    if (o.max_answer) r.max_answer = *o.max_answer;
    if (o.max_think) r.max_think = *o.max_think;
    if (o.seed) t.seed = *o.seed;
    if (o.group_size) t.group_size = *o.group_size;
    if (o.threads) t.threads = *o.threads;
    if (o.batch_questions) t.batch_questions = *o.batch_questions;
    if (o.lr) t.learning_rate = *o.lr;
    if (o.steps) {
        (target == StepsTarget::Pretrain ? c.pretrain.steps : t.total_steps) = *o.steps;
    }
    const bool task_changed = o.task || o.length || o.modulus || o.depth;
    if (o.task) t.task_kind = parse_task_kind(*o.task);
    if (o.length) t.task_params.length = *o.length;
    if (o.modulus) t.task_params.modulus = *o.modulus;
    if (o.depth) t.task_params.depth = *o.depth;
    if (task_changed && o.config.empty()) {
        c.pretrain.mix = {{t.task_kind, t.task_params}};
    }
    if (o.max_think || o.max_answer) {
        c.max_response_length = std::max(c.max_response_length, r.max_think + 1 + r.max_answer);
    }
    c.pretrain.seed = t.seed;
    c.pretrain.threads = t.threads;
    c.validate();
    return c;
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multiplex thinking: sampling, GRPO training and evaluation"};
    app.require_subcommand(1);

    Overrides ov;
    int count = 64, samples = 8, max_k = 0, bootstrap = 1000, limit = 0;
    bool color = false, show_prompt = false;
    std::string out, out_dir, checkpoint, tasks_path, log_path, csv_out, metrics_out, validation_out, diag_out;
    std::string input;
    std::string modes = "multiplex,discrete", ks = "1,3";
    pl::CompareOptions copt;

    auto* gen = app.add_subcommand("gen-tasks", "write a frozen task set as JSONL");
    add_overrides(gen, ov);
    gen->add_option("--count", count, "number of tasks");
    gen->add_option("--out", out, "task JSONL")->required()->envname("MPLEX_TASKS_OUT");

    auto* pre = app.add_subcommand("pretrain", "supervised pretraining from scratch");
    add_overrides(pre, ov);
    pre->add_option("--out", out, "checkpoint to write")->required()->envname("MPLEX_CHECKPOINT_OUT");
    pre->add_option("--loss-csv", csv_out, "loss curve CSV")->required()->envname("MPLEX_LOSS_CSV");

    auto* rl = app.add_subcommand("train-rl", "GRPO training on multiplex rollouts");
    add_overrides(rl, ov);
    rl->add_option("--checkpoint", checkpoint, "starting checkpoint")
        ->required()
        ->check(CLI::ExistingFile)
        ->envname("MPLEX_CHECKPOINT");
    rl->add_option("--out", out, "checkpoint to write")->required()->envname("MPLEX_CHECKPOINT_OUT");
    rl->add_option("--metrics", metrics_out, "per-step metrics CSV")->required()->envname("MPLEX_METRICS");
    rl->add_option("--validation", validation_out, "validation Pass@k CSV")->envname("MPLEX_VALIDATION");
    rl->add_option("--diagnostic", diag_out, "checkpoint written if training diverges")->envname("MPLEX_DIAGNOSTIC");

    auto* ev = app.add_subcommand("eval", "sample trajectories on a task set");
    add_overrides(ev, ov);
    ev->add_option("--checkpoint", checkpoint, "checkpoint")->required()->check(CLI::ExistingFile)->envname(
        "MPLEX_CHECKPOINT");
    ev->add_option("--tasks", tasks_path, "task JSONL")->required()->check(CLI::ExistingFile)->envname("MPLEX_TASKS");
    ev->add_option("--samples", samples, "rollouts per task");
    ev->add_option("--log-out", log_path, "trajectory JSONL")->required()->envname("MPLEX_LOG");
    ev->add_option("--csv-out", csv_out, "per-task metrics CSV")->required()->envname("MPLEX_EVAL_CSV");

    auto* pk = app.add_subcommand("passk", "Pass@k curve from a trajectory log");
    add_overrides(pk, ov);
    pk->add_option("--log", log_path, "trajectory JSONL")->required()->check(CLI::ExistingFile)->envname("MPLEX_LOG");
    pk->add_option("--max-k", max_k, "largest k (0 = per-question sample count)");
    pk->add_option("--bootstrap", bootstrap, "bootstrap replicates");
    pk->add_option("--out", out, "Pass@k CSV")->required()->envname("MPLEX_PASSK_CSV");

    auto* viz = app.add_subcommand("viz", "render trajectories as tagged text");
    add_overrides(viz, ov);
    viz->add_option("--log", log_path, "trajectory JSONL")->required()->check(CLI::ExistingFile)->envname("MPLEX_LOG");
    viz->add_option("--limit", limit, "render at most this many trajectories (0 = all)");
    viz->add_flag("--color", color, "ANSI colors for the divergence tags");
    viz->add_flag("--show-prompt", show_prompt, "print the prompt tokens");
    viz->add_option("--out", out, "text file (default stdout)")->envname("MPLEX_VIZ_OUT");

    auto* cmp = app.add_subcommand("compare", "train and evaluate decoding variants side by side");
    add_overrides(cmp, ov);
    cmp->add_option("--checkpoint", checkpoint, "starting checkpoint")
        ->required()
        ->check(CLI::ExistingFile)
        ->envname("MPLEX_CHECKPOINT");
    cmp->add_option("--tasks", tasks_path, "evaluation task JSONL (default: generated)")
        ->check(CLI::ExistingFile)
        ->envname("MPLEX_TASKS");
    cmp->add_option("--modes", modes, "comma-separated modes");
    cmp->add_option("--ks", ks, "comma-separated multiplex widths");
    cmp->add_option("--samples", copt.samples, "rollouts per evaluation question");
    cmp->add_option("--questions", copt.questions, "generated evaluation questions");
    cmp->add_option("--bootstrap", copt.bootstrap, "bootstrap replicates");
    cmp->add_option("--window", copt.window, "entropy-reduction window");
    cmp->add_option("--out-dir", out_dir, "report directory")->required()->envname("MPLEX_OUT_DIR");

    auto* ex = app.add_subcommand("export", "gnuplot data files from a metrics or Pass@k CSV");
    ex->add_option("--input", input, "CSV")->required()->check(CLI::ExistingFile)->envname("MPLEX_EXPORT_INPUT");
    ex->add_option("--out-dir", out_dir, "output directory")->required()->envname("MPLEX_OUT_DIR");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        ArtifactSet artifacts;
        if (*gen) {
            const auto cfg = resolve(ov, StepsTarget::Train);
            artifacts = pl::gen_tasks(cfg, count, out);
        } else if (*pre) {
            const auto cfg = resolve(ov, StepsTarget::Pretrain);
            artifacts = pl::pretrain_cmd(cfg, out, csv_out);
        } else if (*rl) {
            const auto cfg = resolve(ov, StepsTarget::Train);
            auto model = load_checkpoint<pl::Real>(checkpoint);
            artifacts = pl::train_rl_cmd(cfg, std::move(model), {out, metrics_out, validation_out, diag_out});
        } else if (*ev) {
            const auto cfg = resolve(ov, StepsTarget::Train);
            const auto model = load_checkpoint<pl::Real>(checkpoint);
            const auto tasks = parse_tasks(read_file(tasks_path), Vocabulary(model.vocab_size()));
            artifacts = pl::eval_cmd(cfg, model, tasks, samples, log_path, csv_out);
        } else if (*pk) {
            const auto cfg = resolve(ov, StepsTarget::Train);
            const auto log = parse_trajectories(read_file(log_path));
            artifacts = pl::passk_cmd(log, max_k, bootstrap, cfg.train.seed, out);
        } else if (*viz) {
            const auto cfg = resolve(ov, StepsTarget::Train);
            const auto log = parse_trajectories(read_file(log_path));
            const std::string text = pl::viz_text(log, Vocabulary(cfg.model.vocab), limit, {show_prompt, color});
            if (out.empty()) {
                std::fwrite(text.data(), 1, text.size(), stdout);
            } else {
                artifacts.add(out, text);
            }
        } else if (*cmp) {
            const auto cfg = resolve(ov, StepsTarget::Train);
            copt.steps = ov.steps.value_or(0);
            copt.modes.clear();
            for (const auto& m : split(modes)) {
                copt.modes.push_back(parse_mode(m));
            }
            copt.ks.clear();
            for (const auto& k : split(ks)) {
                try {
                    copt.ks.push_back(std::stoi(k));
                } catch (const std::exception&) {
                    throw ConfigError("bad multiplex width '" + k + "'");
                }
            }
            const auto model = load_checkpoint<pl::Real>(checkpoint);
            const auto tasks = tasks_path.empty()
                                   ? pl::generate_tasks(cfg, copt.questions)
                                   : parse_tasks(read_file(tasks_path), Vocabulary(model.vocab_size()));
            artifacts = pl::compare_cmd(cfg, model, tasks, copt, out_dir);
        } else if (*ex) {
            artifacts = pl::export_cmd(read_file(input), out_dir);
        }
        artifacts.commit();
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const SchemaError& e) {
        std::cerr << "schema error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
