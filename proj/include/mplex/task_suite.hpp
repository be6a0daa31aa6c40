#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mplex/common.hpp"
#include "mplex/rng.hpp"

namespace mplex {

// Fixed token layout. Ids 13-15 and everything past the digits are unused
// payload slots, kept so the vocabulary size is a free model parameter.
struct Vocabulary {
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kBos = 1;
    static constexpr TokenId kBot = 2;  // begin of thinking
    static constexpr TokenId kEot = 3;  // end of thinking
    static constexpr TokenId kEos = 4;  // end of answer
    static constexpr TokenId kSep = 5;
    static constexpr TokenId kCopy = 6;
    static constexpr TokenId kReverse = 7;
    static constexpr TokenId kModAdd = 8;
    static constexpr TokenId kChain = 9;
    static constexpr TokenId kMul = 10;
    static constexpr TokenId kPlus = 11;
    static constexpr TokenId kMod = 12;
    static constexpr TokenId kDigit0 = 16;
    static constexpr int kMinSize = kDigit0 + 10;

    int size = 32;

    Vocabulary() = default;
    explicit Vocabulary(int v) : size(v) {
        if (v < kMinSize) {
            throw ParameterError("vocabulary needs at least " + std::to_string(kMinSize) + " tokens");
        }
    }

    static constexpr TokenId digit(int d) { return kDigit0 + d; }
    static constexpr bool is_digit(TokenId t) { return t >= kDigit0 && t < kDigit0 + 10; }

    bool contains(TokenId t) const { return t >= 0 && t < size; }

    std::string name(TokenId t) const {
        static const std::array<const char*, 13> names = {"<pad>", "<bos>", "<bot>", "<eot>", "<eos>", "|",  "COPY",
                                                           "REV",   "ADD",   "CHAIN", "*",     "+",     "%"};
        if (!contains(t)) {
            throw RangeError("token id " + std::to_string(t) + " outside vocabulary");
        }
        if (t < static_cast<TokenId>(names.size())) {
            return names[t];
        }
        if (is_digit(t)) {
            return std::string(1, static_cast<char>('0' + (t - kDigit0)));
        }
        return "<u" + std::to_string(t) + ">";
    }
};

inline TokenSeq encode(std::int64_t value) {
    if (value < 0) {
        throw ParameterError("only non-negative values can be encoded");
    }
    TokenSeq out;
    do {
        out.push_back(Vocabulary::digit(static_cast<int>(value % 10)));
        value /= 10;
    } while (value > 0);
    std::reverse(out.begin(), out.end());
    return out;
}

inline std::int64_t decode(const TokenSeq& tokens) {
    if (tokens.empty()) {
        throw SchemaError("cannot decode an empty token sequence");
    }
    if (tokens.size() > 18) {
        throw SchemaError("digit sequence too long to decode");
    }
    std::int64_t v = 0;
    for (TokenId t : tokens) {
        if (!Vocabulary::is_digit(t)) {
            throw SchemaError("token " + std::to_string(t) + " is not a digit");
        }
        v = v * 10 + (t - Vocabulary::kDigit0);
    }
    return v;
}

enum class TaskKind { Copy, Reverse, ModularAdd, ChainApply };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::Copy:
            return "copy";
        case TaskKind::Reverse:
            return "reverse";
        case TaskKind::ModularAdd:
            return "modadd";
        case TaskKind::ChainApply:
            return "chain";
    }
    return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "copy") {
        return TaskKind::Copy;
    }
    if (s == "reverse") {
        return TaskKind::Reverse;
    }
    if (s == "modadd") {
        return TaskKind::ModularAdd;
    }
    if (s == "chain") {
        return TaskKind::ChainApply;
    }
    throw ConfigError("unknown task kind '" + s + "' (expected copy|reverse|modadd|chain)");
}

struct TaskParams {
    int length = 3;    // Copy / Reverse payload length
    int modulus = 10;  // ModularAdd / ChainApply
    int depth = 3;     // ChainApply number of affine maps

    void validate(TaskKind kind) const {
        switch (kind) {
            case TaskKind::Copy:
            case TaskKind::Reverse:
                if (length < 1 || length > 32) {
                    throw ParameterError("payload length must lie in [1, 32]");
                }
                break;
            case TaskKind::ModularAdd:
                if (modulus < 2 || modulus > 100) {
                    throw ParameterError("modulus must lie in [2, 100]");
                }
                break;
            case TaskKind::ChainApply:
                if (modulus < 2 || modulus > 100) {
                    throw ParameterError("modulus must lie in [2, 100]");
                }
                if (depth < 1 || depth > 6) {
                    throw ParameterError("chain depth must lie in [1, 6]");
                }
                break;
        }
    }

    friend bool operator==(const TaskParams&, const TaskParams&) = default;
};

struct TaskInstance {
    std::uint64_t id = 0;
    TaskKind kind = TaskKind::Copy;
    TaskParams params;
    TokenSeq prompt;        // ends with <bot>
    TokenSeq ground_truth;  // answer without <eos>
    TokenSeq reference_thinking;  // supervised trace used for pretraining only

    friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

// Tokenized chain: x * a1 + b1 * a2 + b2 ... ; every map is v -> (a v + b) mod m.
inline TaskInstance generate(TaskKind kind, const TaskParams& params, Rng& rng, std::uint64_t id = 0) {
    params.validate(kind);
    TaskInstance t;
    t.id = id;
    t.kind = kind;
    t.params = params;
    t.prompt = {Vocabulary::kBos};
    auto append = [](TokenSeq& dst, const TokenSeq& src) { dst.insert(dst.end(), src.begin(), src.end()); };
    switch (kind) {
        case TaskKind::Copy:
        case TaskKind::Reverse: {
            t.prompt.push_back(kind == TaskKind::Copy ? Vocabulary::kCopy : Vocabulary::kReverse);
            TokenSeq payload;
            for (int i = 0; i < params.length; ++i) {
                payload.push_back(Vocabulary::digit(static_cast<int>(rng.below(10))));
            }
            append(t.prompt, payload);
            t.ground_truth = payload;
            if (kind == TaskKind::Reverse) {
                std::reverse(t.ground_truth.begin(), t.ground_truth.end());
            }
            break;
        }
        case TaskKind::ModularAdd: {
            const auto m = static_cast<std::int64_t>(params.modulus);
            const auto a = static_cast<std::int64_t>(rng.below(m));
            const auto b = static_cast<std::int64_t>(rng.below(m));
            t.prompt.push_back(Vocabulary::kModAdd);
            append(t.prompt, encode(a));
            t.prompt.push_back(Vocabulary::kPlus);
            append(t.prompt, encode(b));
            t.prompt.push_back(Vocabulary::kMod);
            append(t.prompt, encode(m));
            t.ground_truth = encode((a + b) % m);
            break;
        }
        case TaskKind::ChainApply: {
            const auto m = static_cast<std::int64_t>(params.modulus);
            std::int64_t x = static_cast<std::int64_t>(rng.below(m));
            t.prompt.push_back(Vocabulary::kChain);
            append(t.prompt, encode(x));
            for (int i = 0; i < params.depth; ++i) {
                const auto a = static_cast<std::int64_t>(rng.below(m));
                const auto b = static_cast<std::int64_t>(rng.below(m));
                t.prompt.push_back(Vocabulary::kMul);
                append(t.prompt, encode(a));
                t.prompt.push_back(Vocabulary::kPlus);
                append(t.prompt, encode(b));
                x = (a * x + b) % m;
                if (i > 0 && m > 10) {
                    t.reference_thinking.push_back(Vocabulary::kSep);
                }
                append(t.reference_thinking, encode(x));
            }
            t.ground_truth = encode(x);
            break;
        }
    }
    t.prompt.push_back(Vocabulary::kBot);
    return t;
}

// 1 iff the answer, cut at the first <eos> and stripped of trailing padding,
// equals the ground truth exactly.
inline double verify(const TokenSeq& answer, const TaskInstance& task) {
    TokenSeq a = answer;
    if (auto it = std::find(a.begin(), a.end(), Vocabulary::kEos); it != a.end()) {
        a.erase(it, a.end());
    }
    while (!a.empty() && a.back() == Vocabulary::kPad) {
        a.pop_back();
    }
    return a == task.ground_truth ? 1.0 : 0.0;
}

// Deterministic source of task instances: instance i of a stream depends only
// on (seed, i).
struct TaskStream {
    TaskKind kind = TaskKind::ChainApply;
    TaskParams params;
    std::uint64_t seed = 0;

    TaskInstance at(std::uint64_t index) const {
        Rng rng(derive_seed(seed, {index}));
        return generate(kind, params, rng, index);
    }

    std::vector<TaskInstance> take(std::uint64_t first, std::size_t count) const {
        std::vector<TaskInstance> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            out.push_back(at(first + i));
        }
        return out;
    }
};

// ---- line-delimited task dumps ----

inline nlohmann::json task_to_json(const TaskInstance& t) {
    return {{"id", t.id},
            {"kind", to_string(t.kind)},
            {"params", {{"length", t.params.length}, {"modulus", t.params.modulus}, {"depth", t.params.depth}}},
            {"prompt", t.prompt},
            {"ground_truth", t.ground_truth},
            {"thinking", t.reference_thinking}};
}

inline TaskInstance task_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
    try {
        TaskInstance t;
        t.id = j.at("id").get<std::uint64_t>();
        t.kind = parse_task_kind(j.at("kind").get<std::string>());
        const auto& p = j.at("params");
        t.params.length = p.at("length").get<int>();
        t.params.modulus = p.at("modulus").get<int>();
        t.params.depth = p.at("depth").get<int>();
        t.prompt = j.at("prompt").get<TokenSeq>();
        t.ground_truth = j.at("ground_truth").get<TokenSeq>();
        t.reference_thinking = j.value("thinking", TokenSeq{});
        if (t.prompt.empty() || t.prompt.back() != Vocabulary::kBot) {
            throw SchemaError("task prompt must end with <bot>");
        }
        if (t.ground_truth.empty()) {
            throw SchemaError("task ground truth is empty");
        }
        for (const auto* seq : {&t.prompt, &t.ground_truth, &t.reference_thinking}) {
            for (TokenId v : *seq) {
                if (!vocab.contains(v)) {
                    throw SchemaError("task token " + std::to_string(v) + " outside vocabulary");
                }
            }
        }
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed task record: ") + e.what());
    } catch (const ConfigError& e) {
        throw SchemaError(e.what());
    }
}

inline std::string dump_tasks(const std::vector<TaskInstance>& tasks) {
    std::string out;
    for (const auto& t : tasks) {
        out += task_to_json(t).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<TaskInstance> parse_tasks(const std::string& text, const Vocabulary& vocab) {
    std::vector<TaskInstance> out;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        const std::string line = text.substr(start, end - start);
        if (!line.empty()) {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw SchemaError(std::string("task dump line is not JSON: ") + e.what());
            }
            out.push_back(task_from_json(j, vocab));
        }
        start = end + 1;
    }
    return out;
}

}  // namespace mplex
