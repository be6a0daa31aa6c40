#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mplex/common.hpp"
#include "mplex/rollout_engine.hpp"
#include "mplex/task_suite.hpp"

namespace mplex {

inline std::string format_number(double x, int digits = 10) {
    if (std::isnan(x)) {
        return "nan";
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, x);
    return buf;
}

struct RenderOptions {
    bool show_prompt = false;
    bool color = false;
};

namespace detail {

inline std::string paint(const std::string& s, const char* code, bool color) {
    return color ? std::string("\x1b[") + code + "m" + s + "\x1b[0m" : s;
}

}  // namespace detail

// Text rendering of one trajectory, one line per thinking step:
//   consensus    7
//   majority21   [M]7 [m]9
//   distinct     [1]4 [2]5 [3]6        (draw order)
//   other        {2}7 {1}8 {1}9        (multiplicity, first-draw order)
//   soft         ~7:0.5 ~8:0.3 ...     (mixture weights)
// followed by the answer section.
inline std::string render_trajectory(const Trajectory& tr, const Vocabulary& vocab, const RenderOptions& opt = {}) {
    std::string out;
    auto names = [&](const TokenSeq& seq) {
        std::string s;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            s += (i ? " " : "") + vocab.name(seq[i]);
        }
        return s;
    };
    if (opt.show_prompt) {
        out += "prompt: " + names(tr.prompt) + "\n";
    }
    for (const auto& st : tr.steps) {
        std::string line;
        const auto& ids = st.sample.token_ids;
        switch (st.diversity.cls) {
            case DiversityClass::Consensus:
                if (ids.empty()) {
                    throw SchemaError("consensus step without samples");
                }
                line = vocab.name(ids.front());
                break;
            case DiversityClass::Majority21: {
                std::map<TokenId, int> count;
                for (TokenId v : ids) {
                    ++count[v];
                }
                TokenId major = -1, minor = -1;
                for (const auto& [v, m] : count) {
                    (m == 2 ? major : minor) = v;
                }
                line = detail::paint("[M]" + vocab.name(major), "33", opt.color) + " " +
                       detail::paint("[m]" + vocab.name(minor), "35", opt.color);
                break;
            }
            case DiversityClass::AllDistinct:
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    line += (i ? " " : "") +
                            detail::paint("[" + std::to_string(i + 1) + "]" + vocab.name(ids[i]), "36", opt.color);
                }
                break;
            case DiversityClass::Other: {
                std::vector<std::pair<TokenId, int>> order;
                for (TokenId v : ids) {
                    auto it = std::find_if(order.begin(), order.end(), [&](const auto& e) { return e.first == v; });
                    if (it == order.end()) {
                        order.emplace_back(v, 1);
                    } else {
                        ++it->second;
                    }
                }
                for (std::size_t i = 0; i < order.size(); ++i) {
                    line += (i ? " " : "") + std::string("{") + std::to_string(order[i].second) + "}" +
                            vocab.name(order[i].first);
                }
                break;
            }
            case DiversityClass::Soft:
                for (std::size_t i = 0; i < st.coefficients.size(); ++i) {
                    line += (i ? " " : "") + std::string("~") + vocab.name(st.coefficients[i].first) + ":" +
                            format_number(st.coefficients[i].second, 3);
                }
                break;
        }
        out += line + "\n";
    }
    out += "---- answer ----\n";
    if (!tr.reached_answer()) {
        out += "(thinking budget exhausted)\n";
    } else {
        out += names(tr.answer) + "\n";
    }
    return out;
}

// ---- CSV tables and plot data ----

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) {
                return static_cast<int>(i);
            }
        }
        return -1;
    }

    int require(const std::string& name) const {
        const int c = column(name);
        if (c < 0) {
            throw SchemaError("CSV lacks column '" + name + "'");
        }
        return c;
    }

    std::string to_string() const {
        std::string out;
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                out += (i ? "," : "") + cells[i];
            }
            out += '\n';
        };
        line(header);
        for (const auto& r : rows) {
            line(r);
        }
        return out;
    }
};

// Plain comma-separated values: no quoting, first line is the header.
inline CsvTable parse_csv(const std::string& text) {
    CsvTable t;
    std::size_t start = 0, line_no = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::size_t p = 0;
        while (true) {
            const std::size_t q = line.find(',', p);
            cells.push_back(line.substr(p, q == std::string::npos ? std::string::npos : q - p));
            if (q == std::string::npos) {
                break;
            }
            p = q + 1;
        }
        if (t.header.empty()) {
            t.header = std::move(cells);
        } else if (cells.size() != t.header.size()) {
            throw SchemaError("CSV line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                              " cells, header has " + std::to_string(t.header.size()));
        } else {
            t.rows.push_back(std::move(cells));
        }
    }
    if (t.header.empty()) {
        throw SchemaError("CSV is empty");
    }
    return t;
}

namespace detail {

inline double csv_number(const std::string& cell) {
    try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) {
            throw SchemaError("");
        }
        return v;
    } catch (const std::exception&) {
        throw SchemaError("CSV cell '" + cell + "' is not a number");
    }
}

// gnuplot data: one block per series label, blocks separated by two blank
// lines so they can be addressed with `index`.
inline std::string series_blocks(const CsvTable& t, const std::vector<std::string>& columns) {
    std::vector<int> idx;
    for (const auto& c : columns) {
        idx.push_back(t.require(c));
    }
    const int label_col = t.column("variant") >= 0 ? t.column("variant") : t.column("mode");
    std::vector<std::string> labels;
    std::vector<std::string> blocks;
    for (const auto& r : t.rows) {
        const std::string label = label_col >= 0 ? r[label_col] : "all";
        std::size_t b = 0;
        while (b < labels.size() && labels[b] != label) {
            ++b;
        }
        if (b == labels.size()) {
            labels.push_back(label);
            std::string head = "# " + label + "\n#";
            for (const auto& c : columns) {
                head += " " + c;
            }
            blocks.push_back(head + "\n");
        }
        std::string row;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            csv_number(r[idx[i]]);
            row += (i ? " " : "") + r[idx[i]];
        }
        blocks[b] += row + "\n";
    }
    std::string out;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        out += (b ? "\n\n" : "") + blocks[b];
    }
    return out;
}

}  // namespace detail

// Series files for the three figure types. Pass@k tables (column k) give
// passk.dat; training-metric tables (column step) give length.dat and
// entropy.dat. Returns (file name, content) pairs.
inline std::vector<std::pair<std::string, std::string>> plot_export(const CsvTable& t) {
    std::vector<std::pair<std::string, std::string>> out;
    if (t.column("k") >= 0) {
        out.emplace_back("passk.dat", detail::series_blocks(t, {"k", "mean", "stderr"}));
    }
    if (t.column("step") >= 0) {
        if (t.column("mean_think_len") >= 0) {
            out.emplace_back("length.dat", detail::series_blocks(t, {"step", "mean_think_len", "mean_answer_len"}));
        }
        if (t.column("mean_step_entropy") >= 0) {
            out.emplace_back("entropy.dat", detail::series_blocks(t, {"step", "mean_step_entropy"}));
        }
    }
    if (out.empty()) {
        throw SchemaError("CSV has neither a 'k' nor a 'step' column with plottable series");
    }
    return out;
}

}  // namespace mplex
