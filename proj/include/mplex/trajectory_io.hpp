#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mplex/common.hpp"
#include "mplex/rollout_engine.hpp"

namespace mplex {

// One JSON object per trajectory. token_vector is not stored; it can be
// rebuilt from the coefficients and a checkpoint.
inline nlohmann::json trajectory_to_json(const Trajectory& tr) {
    using nlohmann::json;
    const auto& c = tr.config;
    json steps = json::array();
    for (const auto& st : tr.steps) {
        json coeffs = json::array();
        for (const auto& [v, a] : st.coefficients) {
            coeffs.push_back(json::array({v, a}));
        }
        steps.push_back({{"samples", st.sample.token_ids},
                         {"logprobs", st.sample.logprobs},
                         {"coefficients", coeffs},
                         {"entropy", st.dist_entropy},
                         {"diversity", st.diversity.label()}});
    }
    return {{"episode_id", tr.episode_id},
            {"task_id", tr.task_id},
            {"mode", to_string(c.mode)},
            {"K", c.K},
            {"scheme", to_string(c.scheme)},
            {"stop_rule", to_string(c.stop_rule)},
            {"temperature", c.temperature},
            {"top_p", c.top_p},
            {"max_think", c.max_think},
            {"max_answer", c.max_answer},
            {"literal_coefficients", c.literal_coefficients},
            {"eot", c.eot},
            {"eos", c.eos},
            {"policy_version", tr.policy_version},
            {"prompt_tokens", tr.prompt},
            {"steps", steps},
            {"stop_samples", tr.stop_sample.token_ids},
            {"stop_logprobs", tr.stop_sample.logprobs},
            {"answer_tokens", tr.answer},
            {"answer_logprobs", tr.answer_logprobs},
            {"answer_entropy", tr.answer_entropy},
            {"total_logprob", tr.total_logprob},
            {"reward", tr.reward},
            {"termination", to_string(tr.termination)}};
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
    try {
        if (!j.is_object()) {
            throw SchemaError("trajectory record must be an object");
        }
        Trajectory tr;
        auto& c = tr.config;
        tr.episode_id = j.at("episode_id").get<std::uint64_t>();
        tr.task_id = j.at("task_id").get<std::uint64_t>();
        c.mode = parse_mode(j.at("mode").get<std::string>());
        c.K = j.at("K").get<int>();
        c.scheme = parse_scheme(j.at("scheme").get<std::string>());
        c.stop_rule = parse_stop_rule(j.at("stop_rule").get<std::string>());
        c.temperature = j.at("temperature").get<double>();
        c.top_p = j.at("top_p").get<double>();
        c.max_think = j.at("max_think").get<int>();
        c.max_answer = j.at("max_answer").get<int>();
        c.literal_coefficients = j.at("literal_coefficients").get<bool>();
        c.eot = j.at("eot").get<TokenId>();
        c.eos = j.at("eos").get<TokenId>();
        c.validate();
        tr.policy_version = j.at("policy_version").get<std::uint64_t>();
        tr.prompt = j.at("prompt_tokens").get<TokenSeq>();
        for (const auto& s : j.at("steps")) {
            MultiplexStep st;
            st.sample.token_ids = s.at("samples").get<TokenSeq>();
            st.sample.logprobs = s.at("logprobs").get<std::vector<double>>();
            if (st.sample.token_ids.size() != st.sample.logprobs.size()) {
                throw SchemaError("step samples and logprobs differ in length");
            }
            for (const auto& e : s.at("coefficients")) {
                if (!e.is_array() || e.size() != 2) {
                    throw SchemaError("coefficient entries must be [token, weight] pairs");
                }
                st.coefficients.emplace_back(e[0].get<TokenId>(), e[1].get<double>());
            }
            st.dist_entropy = s.at("entropy").get<double>();
            st.diversity = parse_diversity(s.at("diversity").get<std::string>());
            if (st.diversity.cls != DiversityClass::Soft && !st.sample.token_ids.empty()) {
                if (static_cast<int>(st.sample.token_ids.size()) != c.width()) {
                    throw SchemaError("step sample count differs from K");
                }
                st.diversity = classify_diversity(build_selection(st.sample));
            }
            tr.steps.push_back(std::move(st));
        }
        tr.stop_sample.token_ids = j.at("stop_samples").get<TokenSeq>();
        tr.stop_sample.logprobs = j.at("stop_logprobs").get<std::vector<double>>();
        tr.answer = j.at("answer_tokens").get<TokenSeq>();
        tr.answer_logprobs = j.at("answer_logprobs").get<std::vector<double>>();
        tr.answer_entropy = j.at("answer_entropy").get<std::vector<double>>();
        if (tr.answer.size() != tr.answer_logprobs.size() || tr.answer.size() != tr.answer_entropy.size()) {
            throw SchemaError("answer tokens, logprobs and entropies differ in length");
        }
        if (tr.stop_sample.token_ids.size() != tr.stop_sample.logprobs.size()) {
            throw SchemaError("stop samples and logprobs differ in length");
        }
        tr.total_logprob = j.at("total_logprob").get<double>();
        tr.reward = j.at("reward").get<double>();
        tr.termination = parse_termination(j.at("termination").get<std::string>());
        return tr;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed trajectory record: ") + e.what());
    } catch (const ConfigError& e) {
        throw SchemaError(std::string("bad trajectory config: ") + e.what());
    }
}

inline std::string dump_trajectories(const std::vector<Trajectory>& log) {
    std::string out;
    for (const auto& tr : log) {
        out += trajectory_to_json(tr).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<Trajectory> parse_trajectories(const std::string& text) {
    std::vector<Trajectory> out;
    std::size_t start = 0, line_no = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        ++line_no;
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("trajectory line " + std::to_string(line_no) + " is not JSON: " + e.what());
        }
        out.push_back(trajectory_from_json(j));
    }
    return out;
}

}  // namespace mplex
