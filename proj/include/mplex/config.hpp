#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "mplex/common.hpp"
#include "mplex/grpo_trainer.hpp"
#include "mplex/policy_model.hpp"
#include "mplex/pretrain.hpp"

namespace mplex {

// Everything a command can be configured with. The flat GRPO keys follow the
// usual hyper-parameter table names; model, task and pretraining settings
// live in nested objects.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    PretrainConfig pretrain;
    int max_prompt_length = 64;
    int max_response_length = 25;  // thinking steps + <eot> + answer tokens
    std::string model_dtype = "float32";

    RunConfig() {
        train.rollout.max_think = max_response_length - 1 - train.rollout.max_answer;
        pretrain.mix = {{TaskKind::ChainApply, train.task_params}};
    }

    void validate() const {
        try {
            model.validate();
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
        if (model.vocab < Vocabulary::kMinSize) {
            throw ConfigError("model.vocab must be >= " + std::to_string(Vocabulary::kMinSize));
        }
        train.validate();
        if (model_dtype != "float32") {
            throw ConfigError("model_dtype '" + model_dtype + "' unsupported (only float32)");
        }
        if (max_prompt_length < 1 || max_response_length < 2) {
            throw ConfigError("max_prompt_length must be >= 1 and max_response_length >= 2");
        }
        const auto& r = train.rollout;
        if (r.max_think + 1 + r.max_answer > max_response_length) {
            throw ConfigError("max_think + 1 + max_answer exceeds max_response_length");
        }
        if (max_prompt_length + max_response_length > model.n_ctx) {
            throw ConfigError("max_prompt_length + max_response_length exceeds the model context");
        }
        if (pretrain.steps < 0 || pretrain.batch < 1 || pretrain.learning_rate < 0.0 || pretrain.warmup < 0 ||
            pretrain.mix.empty()) {
            throw ConfigError("pretrain needs steps >= 0, batch >= 1, lr >= 0, warmup >= 0 and a task mix");
        }
        for (const auto& m : pretrain.mix) {
            try {
                m.params.validate(m.kind);
            } catch (const ParameterError& e) {
                throw ConfigError(std::string("pretrain mix: ") + e.what());
            }
        }
    }
};

namespace detail {

class ConfigReader {
public:
    ConfigReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) {
            throw ConfigError(where_ + " must be an object");
        }
    }

    template <class V>
    void read(const std::string& key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        const auto& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<V, bool>) {
                if (!v.is_boolean()) {
                    throw ConfigError("");
                }
            } else if constexpr (std::is_integral_v<V>) {
                if (!v.is_number_integer()) {
                    throw ConfigError("");
                }
            } else if constexpr (std::is_floating_point_v<V>) {
                if (!v.is_number()) {
                    throw ConfigError("");
                }
            } else {
                if (!v.is_string()) {
                    throw ConfigError("");
                }
            }
            out = v.get<V>();
        } catch (const std::exception&) {
            throw ConfigError(where_ + "." + key + " has the wrong type");
        }
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const nlohmann::json& sub(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) {
                throw ConfigError("unknown config key '" + where_ + "." + k + "'");
            }
        }
    }

private:
    const nlohmann::json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline void read_task_params(ConfigReader& r, TaskParams& p) {
    r.read("length", p.length);
    r.read("modulus", p.modulus);
    r.read("depth", p.depth);
}

}  // namespace detail

// Strict reader: unknown keys, wrong types and out-of-range values are all
// ConfigError.
inline RunConfig parse_run_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    auto& t = c.train;
    auto& r = t.rollout;
    detail::ConfigReader top(j, "config");

    int mini_batch = -1;
    top.read("batch_size", t.batch_questions);
    top.read("ppo_mini_batch_size", mini_batch);
    top.read("rollout_number", t.group_size);
    top.read("learning_rate", t.learning_rate);
    top.read("sampling_temperature", r.temperature);
    top.read("sampling_top_p", r.top_p);
    top.read("multiplex_width", r.K);
    top.read("max_prompt_length", c.max_prompt_length);
    top.read("max_response_length", c.max_response_length);
    top.read("entropy_loss_coefficient", t.entropy_coeff);
    top.read("kl_loss_coefficient", t.kl_coeff);
    top.read("model_dtype", c.model_dtype);
    if (mini_batch != -1 && mini_batch != t.batch_questions) {
        throw ConfigError("ppo_mini_batch_size must equal batch_size (one update per batch)");
    }

    std::string scheme = to_string(r.scheme), mode = to_string(r.mode), stop = to_string(r.stop_rule);
    top.read("scheme", scheme);
    top.read("mode", mode);
    top.read("stop_rule", stop);
    r.scheme = parse_scheme(scheme);
    r.mode = parse_mode(mode);
    r.stop_rule = parse_stop_rule(stop);
    top.read("literal_coefficients", r.literal_coefficients);
    top.read("max_answer", r.max_answer);
    r.max_think = c.max_response_length - 1 - r.max_answer;
    top.read("max_think", r.max_think);
    top.read("clip_epsilon", t.clip_epsilon);
    top.read("grad_clip", t.grad_clip);
    top.read("total_steps", t.total_steps);
    top.read("seed", t.seed);
    top.read("threads", t.threads);
    top.read("validation_interval", t.validation_interval);
    top.read("validation_k", t.validation_k);
    top.read("validation_samples", t.validation_samples);
    top.read("validation_questions", t.validation_questions);

    if (top.has("model")) {
        detail::ConfigReader m(top.sub("model"), "model");
        m.read("n_layer", c.model.n_layer);
        m.read("n_head", c.model.n_head);
        m.read("d_model", c.model.d_model);
        m.read("d_ff", c.model.d_ff);
        m.read("n_ctx", c.model.n_ctx);
        m.read("vocab", c.model.vocab);
        m.finish();
    }
    if (top.has("task")) {
        detail::ConfigReader tr(top.sub("task"), "task");
        std::string kind = to_string(t.task_kind);
        tr.read("kind", kind);
        t.task_kind = parse_task_kind(kind);
        detail::read_task_params(tr, t.task_params);
        tr.finish();
    }
    c.pretrain.mix = {{t.task_kind, t.task_params}};
    if (top.has("pretrain")) {
        detail::ConfigReader p(top.sub("pretrain"), "pretrain");
        p.read("steps", c.pretrain.steps);
        p.read("batch", c.pretrain.batch);
        p.read("learning_rate", c.pretrain.learning_rate);
        p.read("warmup", c.pretrain.warmup);
        if (p.has("mix")) {
            const auto& mix = p.sub("mix");
            if (!mix.is_array() || mix.empty()) {
                throw ConfigError("pretrain.mix must be a non-empty array");
            }
            c.pretrain.mix.clear();
            for (const auto& e : mix) {
                detail::ConfigReader er(e, "pretrain.mix[]");
                std::string kind = "chain";
                TaskMixEntry entry;
                er.read("kind", kind);
                entry.kind = parse_task_kind(kind);
                detail::read_task_params(er, entry.params);
                er.finish();
                c.pretrain.mix.push_back(entry);
            }
        }
        p.finish();
    }
    c.pretrain.seed = t.seed;
    c.pretrain.threads = t.threads;
    top.finish();
    c.validate();
    return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    const auto& t = c.train;
    const auto& r = t.rollout;
    nlohmann::json mix = nlohmann::json::array();
    for (const auto& m : c.pretrain.mix) {
        mix.push_back({{"kind", to_string(m.kind)},
                       {"length", m.params.length},
                       {"modulus", m.params.modulus},
                       {"depth", m.params.depth}});
    }
    return {{"batch_size", t.batch_questions},
            {"ppo_mini_batch_size", t.batch_questions},
            {"rollout_number", t.group_size},
            {"learning_rate", t.learning_rate},
            {"sampling_temperature", r.temperature},
            {"sampling_top_p", r.top_p},
            {"multiplex_width", r.K},
            {"max_prompt_length", c.max_prompt_length},
            {"max_response_length", c.max_response_length},
            {"entropy_loss_coefficient", t.entropy_coeff},
            {"kl_loss_coefficient", t.kl_coeff},
            {"model_dtype", c.model_dtype},
            {"scheme", to_string(r.scheme)},
            {"mode", to_string(r.mode)},
            {"stop_rule", to_string(r.stop_rule)},
            {"literal_coefficients", r.literal_coefficients},
            {"max_think", r.max_think},
            {"max_answer", r.max_answer},
            {"clip_epsilon", t.clip_epsilon},
            {"grad_clip", t.grad_clip},
            {"total_steps", t.total_steps},
            {"seed", t.seed},
            {"validation_interval", t.validation_interval},
            {"validation_k", t.validation_k},
            {"validation_samples", t.validation_samples},
            {"validation_questions", t.validation_questions},
            {"model",
             {{"n_layer", c.model.n_layer},
              {"n_head", c.model.n_head},
              {"d_model", c.model.d_model},
              {"d_ff", c.model.d_ff},
              {"n_ctx", c.model.n_ctx},
              {"vocab", c.model.vocab}}},
            {"task",
             {{"kind", to_string(t.task_kind)},
              {"length", t.task_params.length},
              {"modulus", t.task_params.modulus},
              {"depth", t.task_params.depth}}},
            {"pretrain",
             {{"steps", c.pretrain.steps},
              {"batch", c.pretrain.batch},
              {"learning_rate", c.pretrain.learning_rate},
              {"warmup", c.pretrain.warmup},
              {"mix", mix}}}};
}

}  // namespace mplex
