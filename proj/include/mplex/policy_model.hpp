#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mplex/common.hpp"
#include "mplex/embedding_table.hpp"
#include "mplex/rng.hpp"

namespace mplex {

struct ModelConfig {
    int n_layer = 2;
    int n_head = 4;
    int d_model = 64;
    int d_ff = 256;
    int n_ctx = 256;
    int vocab = 32;

    void validate() const {
        if (n_layer < 1 || n_head < 1 || d_model < 1 || d_ff < 1 || n_ctx < 1) {
            throw ParameterError("model dimensions must be positive");
        }
        if (d_model % n_head != 0) {
            throw ParameterError("d_model must be divisible by n_head");
        }
        if (vocab < 4) {
            throw ParameterError("vocab must be >= 4");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Ordered list of d-vectors fed to the model: discrete embeddings or
// multiplex tokens, one position each.
template <class T>
class ContextSequence {
public:
    explicit ContextSequence(int dim) : dim_(dim) {}

    void push(std::span<const T> v) {
        if (static_cast<int>(v.size()) != dim_) {
            throw ParameterError("context vector has wrong dimension");
        }
        for (const T& x : v) {
            if (!std::isfinite(static_cast<double>(x))) {
                throw InvariantError("context vector is not finite");
            }
        }
        data_.insert(data_.end(), v.begin(), v.end());
    }
    void pop() { data_.resize(data_.size() - dim_); }

    int dim() const { return dim_; }
    int size() const { return dim_ == 0 ? 0 : static_cast<int>(data_.size() / dim_); }
    std::span<const T> at(int pos) const {
        return {data_.data() + static_cast<std::size_t>(pos) * dim_, static_cast<std::size_t>(dim_)};
    }
    std::span<T> at(int pos) {
        return {data_.data() + static_cast<std::size_t>(pos) * dim_, static_cast<std::size_t>(dim_)};
    }

private:
    int dim_;
    std::vector<T> data_;
};

// Offsets of every tensor inside the flat non-embedding parameter buffer.
struct ParamLayout {
    struct Layer {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_pr, b_pr;
    };
    std::vector<Layer> layers;
    std::size_t wpe = 0, lnf_g = 0, lnf_b = 0, total = 0;

    explicit ParamLayout(const ModelConfig& c) {
        const std::size_t d = c.d_model, f = c.d_ff;
        std::size_t off = 0;
        auto take = [&](std::size_t n) {
            const std::size_t o = off;
            off += n;
            return o;
        };
        for (int l = 0; l < c.n_layer; ++l) {
            Layer L{};
            L.ln1_g = take(d);
            L.ln1_b = take(d);
            L.w_qkv = take(d * 3 * d);
            L.b_qkv = take(3 * d);
            L.w_o = take(d * d);
            L.b_o = take(d);
            L.ln2_g = take(d);
            L.ln2_b = take(d);
            L.w_fc = take(d * f);
            L.b_fc = take(f);
            L.w_pr = take(f * d);
            L.b_pr = take(d);
            layers.push_back(L);
        }
        wpe = take(static_cast<std::size_t>(c.n_ctx) * d);
        lnf_g = take(d);
        lnf_b = take(d);
        total = off;
    }
};

struct TensorInfo {
    std::string name;
    std::vector<std::uint32_t> shape;
    bool embedding = false;  // lives in the embedding table rather than the body buffer
    std::size_t offset = 0;
    std::size_t size() const {
        std::size_t n = 1;
        for (auto s : shape) {
            n *= s;
        }
        return n;
    }
};

inline std::vector<TensorInfo> tensor_infos(const ModelConfig& c) {
    const ParamLayout lay(c);
    const auto d = static_cast<std::uint32_t>(c.d_model);
    const auto f = static_cast<std::uint32_t>(c.d_ff);
    std::vector<TensorInfo> out;
    out.push_back({"wte", {static_cast<std::uint32_t>(c.vocab), d}, true, 0});
    for (int l = 0; l < c.n_layer; ++l) {
        const auto& L = lay.layers[l];
        const std::string p = "h" + std::to_string(l) + ".";
        out.push_back({p + "ln1.g", {d}, false, L.ln1_g});
        out.push_back({p + "ln1.b", {d}, false, L.ln1_b});
        out.push_back({p + "attn.w_qkv", {d, 3 * d}, false, L.w_qkv});
        out.push_back({p + "attn.b_qkv", {3 * d}, false, L.b_qkv});
        out.push_back({p + "attn.w_o", {d, d}, false, L.w_o});
        out.push_back({p + "attn.b_o", {d}, false, L.b_o});
        out.push_back({p + "ln2.g", {d}, false, L.ln2_g});
        out.push_back({p + "ln2.b", {d}, false, L.ln2_b});
        out.push_back({p + "mlp.w_fc", {d, f}, false, L.w_fc});
        out.push_back({p + "mlp.b_fc", {f}, false, L.b_fc});
        out.push_back({p + "mlp.w_proj", {f, d}, false, L.w_pr});
        out.push_back({p + "mlp.b_proj", {d}, false, L.b_pr});
    }
    out.push_back({"wpe", {static_cast<std::uint32_t>(c.n_ctx), d}, false, lay.wpe});
    out.push_back({"lnf.g", {d}, false, lay.lnf_g});
    out.push_back({"lnf.b", {d}, false, lay.lnf_b});
    return out;
}

// Gradient buffers mirroring the parameter layout.
template <class T>
struct ModelGrads {
    std::vector<T> wte;
    std::vector<T> body;

    ModelGrads() = default;
    explicit ModelGrads(const ModelConfig& c)
        : wte(static_cast<std::size_t>(c.vocab) * c.d_model, T(0)), body(ParamLayout(c).total, T(0)) {}

    void zero() {
        std::fill(wte.begin(), wte.end(), T(0));
        std::fill(body.begin(), body.end(), T(0));
    }
    void add(const ModelGrads& o) {
        for (std::size_t i = 0; i < wte.size(); ++i) {
            wte[i] += o.wte[i];
        }
        for (std::size_t i = 0; i < body.size(); ++i) {
            body[i] += o.body[i];
        }
    }
    void scale(T s) {
        for (auto& g : wte) {
            g *= s;
        }
        for (auto& g : body) {
            g *= s;
        }
    }
    double norm() const {
        double s = 0.0;
        for (auto g : wte) {
            s += static_cast<double>(g) * g;
        }
        for (auto g : body) {
            s += static_cast<double>(g) * g;
        }
        return std::sqrt(s);
    }
    bool finite() const {
        for (auto g : wte) {
            if (!std::isfinite(static_cast<double>(g))) {
                return false;
            }
        }
        for (auto g : body) {
            if (!std::isfinite(static_cast<double>(g))) {
                return false;
            }
        }
        return true;
    }
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

// y[0..out) = b + x[0..in) * W, W row-major in x out.
template <class T>
void matvec(const T* x, const T* W, const T* b, T* y, int in, int out) {
    for (int j = 0; j < out; ++j) {
        y[j] = b[j];
    }
    for (int i = 0; i < in; ++i) {
        const T xi = x[i];
        const T* w = W + static_cast<std::size_t>(i) * out;
        for (int j = 0; j < out; ++j) {
            y[j] += xi * w[j];
        }
    }
}

// dx += dy * W^T ; dW += x^T dy ; db += dy
template <class T>
void matvec_backward(const T* x, const T* W, const T* dy, T* dx, T* dW, T* db, int in, int out) {
    for (int j = 0; j < out; ++j) {
        db[j] += dy[j];
    }
    for (int i = 0; i < in; ++i) {
        const T* w = W + static_cast<std::size_t>(i) * out;
        T* dw = dW + static_cast<std::size_t>(i) * out;
        const T xi = x[i];
        T acc = T(0);
        for (int j = 0; j < out; ++j) {
            acc += dy[j] * w[j];
            dw[j] += xi * dy[j];
        }
        dx[i] += acc;
    }
}

template <class T>
void layernorm(const T* x, const T* g, const T* b, T* y, T* xhat, T& rstd_out, int n) {
    T mean = T(0);
    for (int i = 0; i < n; ++i) {
        mean += x[i];
    }
    mean /= T(n);
    T var = T(0);
    for (int i = 0; i < n; ++i) {
        const T c = x[i] - mean;
        var += c * c;
    }
    var /= T(n);
    const T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (int i = 0; i < n; ++i) {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = g[i] * xhat[i] + b[i];
    }
    rstd_out = rstd;
}

template <class T>
void layernorm_backward(const T* dy, const T* xhat, T rstd, const T* g, T* dx, T* dg, T* db, int n) {
    T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
    for (int i = 0; i < n; ++i) {
        const T dxh = dy[i] * g[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    mean_dxhat /= T(n);
    mean_dxhat_xhat /= T(n);
    for (int i = 0; i < n; ++i) {
        const T dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

template <class T>
T gelu(T x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(T(c) * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
    constexpr double c = 0.7978845608028654;
    const T u = T(c) * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(u);
    const T du = T(c) * (T(1) + T(3 * 0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace detail

template <class T>
class PolicyModel {
public:
    // Cached keys/values of already-processed positions, one buffer per layer.
    struct DecodeState {
        std::vector<std::vector<T>> k, v;
        int length = 0;
    };

    // Activations recorded for backpropagation, flat [position x width].
    struct Tape {
        int n = 0;
        std::vector<T> inputs;  // raw input vectors (before positional embedding)
        struct LayerActs {
            std::vector<T> x_in, xhat1, rstd1, ln1, qkv, probs, att, x_mid, xhat2, rstd2, ln2, fc_pre, fc_act;
        };
        std::vector<LayerActs> layers;
        std::vector<T> x_out, xhatf, rstdf, hf, logits;
        DecodeState cache;
    };

    PolicyModel() = default;

    PolicyModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), layout_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        wte_ = EmbeddingTable<T>::random(cfg.vocab, cfg.d_model, rng);
        body_.assign(layout_.total, T(0));
        const double std_w = 0.02;
        const double std_res = 0.02 / std::sqrt(2.0 * cfg.n_layer);
        auto fill_normal = [&](std::size_t off, std::size_t n, double sd) {
            for (std::size_t i = 0; i < n; ++i) {
                body_[off + i] = static_cast<T>(sd * rng.normal());
            }
        };
        auto fill_const = [&](std::size_t off, std::size_t n, T val) {
            std::fill(body_.begin() + off, body_.begin() + off + n, val);
        };
        const std::size_t d = cfg.d_model, f = cfg.d_ff;
        for (const auto& L : layout_.layers) {
            fill_const(L.ln1_g, d, T(1));
            fill_normal(L.w_qkv, d * 3 * d, std_w);
            fill_normal(L.w_o, d * d, std_res);
            fill_const(L.ln2_g, d, T(1));
            fill_normal(L.w_fc, d * f, std_w);
            fill_normal(L.w_pr, f * d, std_res);
        }
        fill_normal(layout_.wpe, static_cast<std::size_t>(cfg.n_ctx) * d, std_w);
        fill_const(layout_.lnf_g, d, T(1));
    }

    const ModelConfig& config() const { return cfg_; }
    int dim() const { return cfg_.d_model; }
    int vocab_size() const { return cfg_.vocab; }

    const EmbeddingTable<T>& embedding() const { return wte_; }
    EmbeddingTable<T>& embedding() { return wte_; }
    std::span<const T> body() const { return body_; }
    std::span<T> body() { return body_; }

    std::size_t parameter_count() const { return wte_.weights().size() + body_.size(); }

    // Number of optimizer updates applied; rollouts record it to detect stale batches.
    std::uint64_t version() const { return version_; }
    void bump_version() { ++version_; }
    void set_version(std::uint64_t v) { version_ = v; }

    bool finite() const {
        for (auto w : wte_.weights()) {
            if (!std::isfinite(static_cast<double>(w))) {
                return false;
            }
        }
        for (auto w : body_) {
            if (!std::isfinite(static_cast<double>(w))) {
                return false;
            }
        }
        return true;
    }

    DecodeState new_state() const {
        DecodeState s;
        s.k.resize(cfg_.n_layer);
        s.v.resize(cfg_.n_layer);
        return s;
    }

    // Appends one input vector to the decode state and writes the logits for
    // the next token. Positions computed here and in forward_train are
    // bit-identical.
    void step(DecodeState& state, std::span<const T> x, std::span<T> logits) const {
        if (state.length >= cfg_.n_ctx) {
            throw LengthError("context length " + std::to_string(cfg_.n_ctx) + " exceeded");
        }
        forward_position(state, x.data(), state.length, logits.data(), nullptr);
        ++state.length;
    }

    std::vector<T> next_token_logits(const ContextSequence<T>& ctx) const {
        if (ctx.size() < 1) {
            throw LengthError("context must hold at least one vector");
        }
        if (ctx.size() > cfg_.n_ctx) {
            throw LengthError("context longer than model context length");
        }
        auto state = new_state();
        std::vector<T> logits(cfg_.vocab);
        for (int t = 0; t < ctx.size(); ++t) {
            step(state, ctx.at(t), logits);
        }
        return logits;
    }

    // Logits for every position, [n x V].
    std::vector<T> all_logits(const ContextSequence<T>& ctx) const {
        Tape tape;
        forward_train(ctx, tape);
        return tape.logits;
    }

    void forward_train(const ContextSequence<T>& ctx, Tape& tape) const {
        const int n = ctx.size();
        if (n < 1 || n > cfg_.n_ctx) {
            throw LengthError("context length out of range");
        }
        const std::size_t d = cfg_.d_model, f = cfg_.d_ff, H = cfg_.n_head, V = cfg_.vocab;
        tape.n = n;
        tape.inputs.assign(static_cast<std::size_t>(n) * d, T(0));
        tape.layers.resize(cfg_.n_layer);
        for (auto& A : tape.layers) {
            A.x_in.assign(n * d, T(0));
            A.xhat1.assign(n * d, T(0));
            A.rstd1.assign(n, T(0));
            A.ln1.assign(n * d, T(0));
            A.qkv.assign(n * 3 * d, T(0));
            A.probs.assign(static_cast<std::size_t>(n) * H * n, T(0));
            A.att.assign(n * d, T(0));
            A.x_mid.assign(n * d, T(0));
            A.xhat2.assign(n * d, T(0));
            A.rstd2.assign(n, T(0));
            A.ln2.assign(n * d, T(0));
            A.fc_pre.assign(n * f, T(0));
            A.fc_act.assign(n * f, T(0));
        }
        tape.x_out.assign(n * d, T(0));
        tape.xhatf.assign(n * d, T(0));
        tape.rstdf.assign(n, T(0));
        tape.hf.assign(n * d, T(0));
        tape.logits.assign(static_cast<std::size_t>(n) * V, T(0));
        tape.cache = new_state();
        for (int t = 0; t < n; ++t) {
            auto x = ctx.at(t);
            std::copy(x.begin(), x.end(), tape.inputs.begin() + t * d);
            forward_position(tape.cache, x.data(), t, tape.logits.data() + t * V, &tape);
            ++tape.cache.length;
        }
    }

    // Backpropagates dlogits ([n x V]) through a recorded forward pass.
    // Parameter gradients accumulate into grads; gradients with respect to the
    // raw input vectors are written to dinputs ([n x d]) when non-null.
    void backward(const Tape& tape, std::span<const T> dlogits, ModelGrads<T>& grads, std::vector<T>* dinputs) const {
        const int n = tape.n;
        const int d = cfg_.d_model, f = cfg_.d_ff, H = cfg_.n_head, V = cfg_.vocab;
        const int hd = d / H;
        const T scale = T(1) / std::sqrt(T(hd));
        const T* E = wte_.weights().data();
        T* dE = grads.wte.data();
        T* dB = grads.body.data();
        const T* B = body_.data();

        // Residual stream gradient, [n x d].
        std::vector<T> dx(static_cast<std::size_t>(n) * d, T(0));
        std::vector<T> dhf(d);
        for (int t = 0; t < n; ++t) {
            const T* dl = dlogits.data() + static_cast<std::size_t>(t) * V;
            const T* hf = tape.hf.data() + static_cast<std::size_t>(t) * d;
            std::fill(dhf.begin(), dhf.end(), T(0));
            bool any = false;
            for (int v = 0; v < V; ++v) {
                const T g = dl[v];
                if (g == T(0)) {
                    continue;
                }
                any = true;
                const T* e = E + static_cast<std::size_t>(v) * d;
                T* de = dE + static_cast<std::size_t>(v) * d;
                for (int j = 0; j < d; ++j) {
                    dhf[j] += g * e[j];
                    de[j] += g * hf[j];
                }
            }
            if (!any) {
                continue;
            }
            detail::layernorm_backward(dhf.data(), tape.xhatf.data() + t * d, tape.rstdf[t], B + layout_.lnf_g,
                                       dx.data() + t * d, dB + layout_.lnf_g, dB + layout_.lnf_b, d);
        }

        std::vector<T> dtmp(std::max(f, 3 * d));
        std::vector<T> dln(d);
        std::vector<T> datt(static_cast<std::size_t>(n) * d);
        std::vector<T> dqkv(static_cast<std::size_t>(n) * 3 * d);
        std::vector<T> dp(n);
        for (int l = cfg_.n_layer - 1; l >= 0; --l) {
            const auto& L = layout_.layers[l];
            const auto& A = tape.layers[l];
            // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
            for (int t = 0; t < n; ++t) {
                T* dxt = dx.data() + t * d;
                std::fill(dtmp.begin(), dtmp.begin() + f, T(0));
                detail::matvec_backward(A.fc_act.data() + t * f, B + L.w_pr, dxt, dtmp.data(), dB + L.w_pr,
                                        dB + L.b_pr, f, d);
                for (int j = 0; j < f; ++j) {
                    dtmp[j] *= detail::gelu_grad(A.fc_pre[t * f + j]);
                }
                std::fill(dln.begin(), dln.end(), T(0));
                detail::matvec_backward(A.ln2.data() + t * d, B + L.w_fc, dtmp.data(), dln.data(), dB + L.w_fc,
                                        dB + L.b_fc, d, f);
                detail::layernorm_backward(dln.data(), A.xhat2.data() + t * d, A.rstd2[t], B + L.ln2_g, dxt,
                                           dB + L.ln2_g, dB + L.ln2_b, d);
            }
            // Attention output projection.
            std::fill(datt.begin(), datt.end(), T(0));
            for (int t = 0; t < n; ++t) {
                detail::matvec_backward(A.att.data() + t * d, B + L.w_o, dx.data() + t * d, datt.data() + t * d,
                                        dB + L.w_o, dB + L.b_o, d, d);
            }
            // Scaled dot-product attention.
            std::fill(dqkv.begin(), dqkv.end(), T(0));
            for (int t = 0; t < n; ++t) {
                for (int h = 0; h < H; ++h) {
                    const T* p = A.probs.data() + (static_cast<std::size_t>(t) * H + h) * n;
                    const T* q = A.qkv.data() + t * 3 * d + h * hd;
                    const T* dout = datt.data() + t * d + h * hd;
                    T dot_sum = T(0);
                    for (int j = 0; j <= t; ++j) {
                        const T* vj = A.qkv.data() + j * 3 * d + 2 * d + h * hd;
                        T* dvj = dqkv.data() + j * 3 * d + 2 * d + h * hd;
                        T acc = T(0);
                        for (int i = 0; i < hd; ++i) {
                            acc += dout[i] * vj[i];
                            dvj[i] += p[j] * dout[i];
                        }
                        dp[j] = acc;
                        dot_sum += p[j] * acc;
                    }
                    T* dq = dqkv.data() + t * 3 * d + h * hd;
                    for (int j = 0; j <= t; ++j) {
                        const T ds = p[j] * (dp[j] - dot_sum) * scale;
                        const T* kj = A.qkv.data() + j * 3 * d + d + h * hd;
                        T* dkj = dqkv.data() + j * 3 * d + d + h * hd;
                        for (int i = 0; i < hd; ++i) {
                            dq[i] += ds * kj[i];
                            dkj[i] += ds * q[i];
                        }
                    }
                }
            }
            // QKV projection and first layer norm.
            for (int t = 0; t < n; ++t) {
                std::fill(dln.begin(), dln.end(), T(0));
                detail::matvec_backward(A.ln1.data() + t * d, B + L.w_qkv, dqkv.data() + t * 3 * d, dln.data(),
                                        dB + L.w_qkv, dB + L.b_qkv, d, 3 * d);
                detail::layernorm_backward(dln.data(), A.xhat1.data() + t * d, A.rstd1[t], B + L.ln1_g,
                                           dx.data() + t * d, dB + L.ln1_g, dB + L.ln1_b, d);
            }
        }
        for (int t = 0; t < n; ++t) {
            T* dpe = dB + layout_.wpe + static_cast<std::size_t>(t) * d;
            for (int j = 0; j < d; ++j) {
                dpe[j] += dx[t * d + j];
            }
        }
        if (dinputs != nullptr) {
            *dinputs = std::move(dx);
        }
    }

    // Flat views in checkpoint order.
    std::span<T> tensor_data(const TensorInfo& info) {
        if (info.embedding) {
            return wte_.weights();
        }
        return {body_.data() + info.offset, info.size()};
    }
    std::span<const T> tensor_data(const TensorInfo& info) const {
        if (info.embedding) {
            return wte_.weights();
        }
        return {body_.data() + info.offset, info.size()};
    }

    const ParamLayout& layout() const { return layout_; }

private:
    void forward_position(DecodeState& st, const T* x_raw, int t, T* logits, Tape* tape) const {
        const int d = cfg_.d_model, f = cfg_.d_ff, H = cfg_.n_head, V = cfg_.vocab;
        const int hd = d / H;
        const T scale = T(1) / std::sqrt(T(hd));
        const T* B = body_.data();

        std::vector<T> x(d), xhat(d), ln(d), qkv(3 * d), att(d), tmp(d), fc(f), fca(f);
        std::vector<T> sc(t + 1);
        const T* pe = B + layout_.wpe + static_cast<std::size_t>(t) * d;
        for (int j = 0; j < d; ++j) {
            x[j] = x_raw[j] + pe[j];
        }
        for (int l = 0; l < cfg_.n_layer; ++l) {
            const auto& L = layout_.layers[l];
            typename Tape::LayerActs* A = tape ? &tape->layers[l] : nullptr;
            if (A) {
                std::copy(x.begin(), x.end(), A->x_in.begin() + t * d);
            }
            T rstd;
            detail::layernorm(x.data(), B + L.ln1_g, B + L.ln1_b, ln.data(), xhat.data(), rstd, d);
            detail::matvec(ln.data(), B + L.w_qkv, B + L.b_qkv, qkv.data(), d, 3 * d);
            auto& kc = st.k[l];
            auto& vc = st.v[l];
            kc.resize(static_cast<std::size_t>(t + 1) * d);
            vc.resize(static_cast<std::size_t>(t + 1) * d);
            std::copy(qkv.begin() + d, qkv.begin() + 2 * d, kc.begin() + t * d);
            std::copy(qkv.begin() + 2 * d, qkv.end(), vc.begin() + t * d);
            for (int h = 0; h < H; ++h) {
                const T* q = qkv.data() + h * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j <= t; ++j) {
                    const T* kj = kc.data() + j * d + h * hd;
                    T s = T(0);
                    for (int i = 0; i < hd; ++i) {
                        s += q[i] * kj[i];
                    }
                    sc[j] = s * scale;
                    mx = std::max(mx, sc[j]);
                }
                T z = T(0);
                for (int j = 0; j <= t; ++j) {
                    sc[j] = std::exp(sc[j] - mx);
                    z += sc[j];
                }
                T* o = att.data() + h * hd;
                std::fill(o, o + hd, T(0));
                for (int j = 0; j <= t; ++j) {
                    sc[j] /= z;
                    const T* vj = vc.data() + j * d + h * hd;
                    for (int i = 0; i < hd; ++i) {
                        o[i] += sc[j] * vj[i];
                    }
                }
                if (A) {
                    std::copy(sc.begin(), sc.end(), A->probs.begin() + (static_cast<std::size_t>(t) * H + h) * tape->n);
                }
            }
            if (A) {
                std::copy(xhat.begin(), xhat.end(), A->xhat1.begin() + t * d);
                A->rstd1[t] = rstd;
                std::copy(ln.begin(), ln.end(), A->ln1.begin() + t * d);
                std::copy(qkv.begin(), qkv.end(), A->qkv.begin() + t * 3 * d);
                std::copy(att.begin(), att.end(), A->att.begin() + t * d);
            }
            detail::matvec(att.data(), B + L.w_o, B + L.b_o, tmp.data(), d, d);
            for (int j = 0; j < d; ++j) {
                x[j] += tmp[j];
            }
            if (A) {
                std::copy(x.begin(), x.end(), A->x_mid.begin() + t * d);
            }
            detail::layernorm(x.data(), B + L.ln2_g, B + L.ln2_b, ln.data(), xhat.data(), rstd, d);
            detail::matvec(ln.data(), B + L.w_fc, B + L.b_fc, fc.data(), d, f);
            for (int j = 0; j < f; ++j) {
                fca[j] = detail::gelu(fc[j]);
            }
            detail::matvec(fca.data(), B + L.w_pr, B + L.b_pr, tmp.data(), f, d);
            for (int j = 0; j < d; ++j) {
                x[j] += tmp[j];
            }
            if (A) {
                std::copy(xhat.begin(), xhat.end(), A->xhat2.begin() + t * d);
                A->rstd2[t] = rstd;
                std::copy(ln.begin(), ln.end(), A->ln2.begin() + t * d);
                std::copy(fc.begin(), fc.end(), A->fc_pre.begin() + t * f);
                std::copy(fca.begin(), fca.end(), A->fc_act.begin() + t * f);
            }
        }
        T rstd;
        detail::layernorm(x.data(), B + layout_.lnf_g, B + layout_.lnf_b, ln.data(), xhat.data(), rstd, d);
        const T* E = wte_.weights().data();
        for (int v = 0; v < V; ++v) {
            const T* e = E + static_cast<std::size_t>(v) * d;
            T s = T(0);
            for (int j = 0; j < d; ++j) {
                s += ln[j] * e[j];
            }
            logits[v] = s;
        }
        if (tape) {
            std::copy(x.begin(), x.end(), tape->x_out.begin() + t * d);
            std::copy(xhat.begin(), xhat.end(), tape->xhatf.begin() + t * d);
            tape->rstdf[t] = rstd;
            std::copy(ln.begin(), ln.end(), tape->hf.begin() + t * d);
        }
    }

    ModelConfig cfg_;
    ParamLayout layout_{ModelConfig{}};
    EmbeddingTable<T> wte_;
    std::vector<T> body_;
    std::uint64_t version_ = 0;
};

// Adam with bias correction and optional global-norm gradient clipping.
template <class T>
class Adam {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 1.0;  // <= 0 disables clipping
    };

    Adam() = default;
    Adam(const ModelConfig& c, Options opt) : opt_(opt), m_(c), v_(c) {}

    std::uint64_t steps() const { return t_; }

    void step(PolicyModel<T>& model, const ModelGrads<T>& g, double lr) {
        if (!g.finite()) {
            throw DivergenceError("non-finite gradient");
        }
        double factor = 1.0;
        if (opt_.clip_norm > 0.0) {
            const double n = g.norm();
            if (n > opt_.clip_norm) {
                factor = opt_.clip_norm / n;
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        auto update = [&](std::span<T> w, const std::vector<T>& gr, std::vector<T>& m, std::vector<T>& v) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(gr[i]) * factor;
                const double mi = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
                const double vi = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + opt_.eps));
            }
        };
        update(model.embedding().weights(), g.wte, m_.wte, v_.wte);
        update(model.body(), g.body, m_.body, v_.body);
        model.bump_version();
        if (!model.finite()) {
            throw DivergenceError("parameters became non-finite after update");
        }
    }

private:
    Options opt_;
    ModelGrads<T> m_, v_;
    std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "MPLXCKPT", u32 format version, u32 scalar bytes, six i32 config
// fields, u64 policy version, u32 tensor count, then per tensor: u32 name
// length, name bytes, u32 rank, u32 dims, raw little-endian scalars.

inline constexpr char kCheckpointMagic[8] = {'M', 'P', 'L', 'X', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <class V>
void put(std::string& out, V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out.append(buf, sizeof(V));
}
template <class V>
V get(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(V) > in.size()) {
        throw SchemaError("checkpoint truncated");
    }
    V v;
    std::memcpy(&v, in.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
}
}  // namespace detail

template <class T>
std::string serialize_checkpoint(const PolicyModel<T>& model) {
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    const auto& c = model.config();
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put<std::uint32_t>(out, sizeof(T));
    for (int x : {c.n_layer, c.n_head, c.d_model, c.d_ff, c.n_ctx, c.vocab}) {
        detail::put<std::int32_t>(out, x);
    }
    detail::put<std::uint64_t>(out, model.version());
    const auto infos = tensor_infos(c);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(infos.size()));
    for (const auto& info : infos) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(info.name.size()));
        out.append(info.name);
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(info.shape.size()));
        for (auto s : info.shape) {
            detail::put<std::uint32_t>(out, s);
        }
        auto data = model.tensor_data(info);
        out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(T));
    }
    return out;
}

template <class T>
PolicyModel<T> deserialize_checkpoint(const std::string& in) {
    if (in.size() < sizeof(kCheckpointMagic) || std::memcmp(in.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw SchemaError("not a checkpoint file");
    }
    std::size_t pos = sizeof(kCheckpointMagic);
    if (detail::get<std::uint32_t>(in, pos) != kCheckpointVersion) {
        throw SchemaError("unsupported checkpoint version");
    }
    if (detail::get<std::uint32_t>(in, pos) != sizeof(T)) {
        throw SchemaError("checkpoint scalar width mismatch");
    }
    ModelConfig c;
    c.n_layer = detail::get<std::int32_t>(in, pos);
    c.n_head = detail::get<std::int32_t>(in, pos);
    c.d_model = detail::get<std::int32_t>(in, pos);
    c.d_ff = detail::get<std::int32_t>(in, pos);
    c.n_ctx = detail::get<std::int32_t>(in, pos);
    c.vocab = detail::get<std::int32_t>(in, pos);
    try {
        c.validate();
    } catch (const ParameterError& e) {
        throw SchemaError(std::string("bad checkpoint config: ") + e.what());
    }
    const auto version = detail::get<std::uint64_t>(in, pos);
    PolicyModel<T> model(c, 0);
    model.set_version(version);
    const auto infos = tensor_infos(c);
    if (detail::get<std::uint32_t>(in, pos) != infos.size()) {
        throw SchemaError("checkpoint tensor count mismatch");
    }
    for (const auto& info : infos) {
        const auto len = detail::get<std::uint32_t>(in, pos);
        if (pos + len > in.size() || in.compare(pos, len, info.name) != 0 || len != info.name.size()) {
            throw SchemaError("checkpoint tensor name mismatch, expected " + info.name);
        }
        pos += len;
        const auto rank = detail::get<std::uint32_t>(in, pos);
        if (rank != info.shape.size()) {
            throw SchemaError("checkpoint rank mismatch for " + info.name);
        }
        for (auto s : info.shape) {
            if (detail::get<std::uint32_t>(in, pos) != s) {
                throw SchemaError("checkpoint shape mismatch for " + info.name);
            }
        }
        auto data = model.tensor_data(info);
        const std::size_t bytes = data.size() * sizeof(T);
        if (pos + bytes > in.size()) {
            throw SchemaError("checkpoint truncated in " + info.name);
        }
        std::memcpy(data.data(), in.data() + pos, bytes);
        pos += bytes;
    }
    if (pos != in.size()) {
        throw SchemaError("trailing bytes in checkpoint");
    }
    if (!model.finite()) {
        throw SchemaError("checkpoint holds non-finite parameters");
    }
    return model;
}

template <class T>
PolicyModel<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw Error("cannot open checkpoint " + path);
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_checkpoint<T>(ss.str());
}

}  // namespace mplex
