#pragma once

// Layer modules over the tensor engine. Modules own their parameter leaves and
// register them (plus running-stat buffers) through ParamCollector for the
// optimizer, EMA, and checkpointing.

#include <array>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "detlab/rng.hpp"
#include "detlab/tensor.hpp"

namespace detlab::nn {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor = nullptr;
    double lr_mult = 1.0;
};

template <typename T>
struct NamedBuffer {
    std::string name;
    std::vector<T>* data = nullptr;
};

template <typename T>
struct ParamCollector {
    std::vector<NamedParam<T>> params;
    std::vector<NamedBuffer<T>> buffers;
    std::string prefix;
    double lr_mult = 1.0;

    void add(const std::string& name, Tensor<T>& t) {
        if (t.defined()) params.push_back({prefix + name, &t, lr_mult});
    }
    void add_buffer(const std::string& name, std::vector<T>& v) { buffers.push_back({prefix + name, &v}); }
    template <class M>
    void sub(const std::string& name, M& m) {
        const std::string saved = prefix;
        prefix += name + ".";
        m.collect(*this);
        prefix = saved;
    }
    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& p : params) n += p.tensor->numel();
        return n;
    }
};

namespace init {

template <typename T>
Tensor<T> uniform(Shape shape, double limit, Xorshift64Star& rng) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

// xavier-uniform
template <typename T>
Tensor<T> linear_weight(int in, int out, Xorshift64Star& rng) {
    return uniform<T>({in, out}, std::sqrt(6.0 / (in + out)), rng);
}

template <typename T>
Tensor<T> conv_weight(int out_c, int in_c, int k, Xorshift64Star& rng) {
    return uniform<T>({out_c, in_c, k, k}, std::sqrt(6.0 / (in_c * k * k + out_c * k * k)), rng);
}

}  // namespace init

// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    Linear() = default;
    Linear(int in, int out, Xorshift64Star& rng, bool with_bias = true)
        : weight(init::linear_weight<T>(in, out, rng)),
          bias(with_bias ? Tensor<T>::zeros({out}, true) : Tensor<T>()) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        auto y = matmul(x, weight);
        return bias.defined() ? add_rowvec(y, bias) : y;
    }
    void collect(ParamCollector<T>& pc) {
        pc.add("weight", weight);
        pc.add("bias", bias);
    }
};

template <typename T>
struct Conv2d {
    Tensor<T> weight;  // [O,C,kh,kw]
    Tensor<T> bias;    // [O], optional
    int stride = 1;
    std::array<int, 4> pad{0, 0, 0, 0};  // top/bottom/left/right

    Conv2d() = default;
    // stride-2 3x3 halves even extents exactly via trailing-edge padding
    Conv2d(int in, int out, int k, int stride_, Xorshift64Star& rng, bool with_bias = true)
        : weight(init::conv_weight<T>(out, in, k, rng)),
          bias(with_bias ? Tensor<T>::zeros({out}, true) : Tensor<T>()),
          stride(stride_) {
        if (stride_ == 1) {
            const int p = (k - 1) / 2;
            pad = {p, p, p, p};
        } else {
            const int total = k - stride_ >= 0 ? k - stride_ : 0;
            pad = {total / 2, total - total / 2, total / 2, total - total / 2};
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad[0], pad[1], pad[2], pad[3]); }
    void collect(ParamCollector<T>& pc) {
        pc.add("weight", weight);
        pc.add("bias", bias);
    }
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gain, bias;  // [C]
    std::vector<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2d() = default;
    explicit BatchNorm2d(int c)
        : gain(Tensor<T>::filled({c}, T(1), true)),
          bias(Tensor<T>::zeros({c}, true)),
          running_mean(static_cast<size_t>(c), T(0)),
          running_var(static_cast<size_t>(c), T(1)) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        if (!training) return batch_norm_inference(x, running_mean, running_var, gain, bias, eps);
        std::vector<T> m, v;
        auto y = batch_norm_train(x, gain, bias, &m, &v, eps);
        const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
        const T unbias = hw > 1 ? static_cast<T>(hw) / static_cast<T>(hw - 1) : T(1);
        for (size_t c = 0; c < running_mean.size(); ++c) {
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m[c];
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * v[c] * unbias;
        }
        return y;
    }
    void collect(ParamCollector<T>& pc) {
        pc.add("gain", gain);
        pc.add("bias", bias);
        pc.add_buffer("running_mean", running_mean);
        pc.add_buffer("running_var", running_var);
    }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gain, bias;

    LayerNorm() = default;
    explicit LayerNorm(int c) : gain(Tensor<T>::filled({c}, T(1), true)), bias(Tensor<T>::zeros({c}, true)) {}

    Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
    void collect(ParamCollector<T>& pc) {
        pc.add("gain", gain);
        pc.add("bias", bias);
    }
};

// stack of Linear layers with ReLU between (not after the last)
template <typename T>
struct Mlp {
    std::vector<Linear<T>> layers;

    Mlp() = default;
    Mlp(int in, int hidden, int out, int num_layers, Xorshift64Star& rng) {
        for (int i = 0; i < num_layers; ++i)
            layers.emplace_back(i == 0 ? in : hidden, i == num_layers - 1 ? out : hidden, rng);
    }

    Tensor<T> forward(Tensor<T> x) const {
        for (size_t i = 0; i + 1 < layers.size(); ++i) x = relu(layers[i].forward(x));
        return layers.back().forward(x);
    }
    void collect(ParamCollector<T>& pc) {
        for (size_t i = 0; i < layers.size(); ++i) pc.sub(str_cat("l", i), layers[i]);
    }
};

// ---------------------------------------------------------------------------
// attention

template <typename T>
struct MultiheadAttention {
    Linear<T> wq, wk, wv, wo;
    int heads = 8;

    MultiheadAttention() = default;
    MultiheadAttention(int dim, int heads_, Xorshift64Star& rng)
        : wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng), heads(heads_) {
        if (dim % heads_ != 0) throw ConfigError(str_cat("embed dim ", dim, " not divisible by ", heads_, " heads"));
    }

    // Self attention over tokens [N,C]. `pos` is added to the query/key inputs;
    // `mask` (additive, [N,N]) lands on the logits; `attn` captures the per-head
    // softmax matrices when provided.
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>* pos = nullptr, const Tensor<T>* mask = nullptr,
                      std::vector<Tensor<T>>* attn = nullptr) const {
        const int c = x.dim(1);
        const int dh = c / heads;
        const Tensor<T> qk_in = pos ? add(x, *pos) : x;
        auto q = wq.forward(qk_in);
        auto k = wk.forward(qk_in);
        auto v = wv.forward(x);
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<Tensor<T>> outs;
        outs.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            auto qh = slice(q, 1, h * dh, dh);
            auto kh = slice(k, 1, h * dh, dh);
            auto vh = slice(v, 1, h * dh, dh);
            auto logits = mul_scalar(matmul(qh, transpose(kh)), scale);
            if (mask) logits = add(logits, *mask);
            auto a = softmax_lastdim(logits);
            if (attn) attn->push_back(a);
            outs.push_back(matmul(a, vh));
        }
        return wo.forward(concat(outs, 1));
    }
    void collect(ParamCollector<T>& pc) {
        pc.sub("q", wq);
        pc.sub("k", wk);
        pc.sub("v", wv);
        pc.sub("o", wo);
    }
};

// pre-norm transformer encoder layer: x + MHA(LN(x)), then x + FFN(LN(x))
template <typename T>
struct TransformerLayer {
    MultiheadAttention<T> attn;
    LayerNorm<T> norm1, norm2;
    Linear<T> ffn1, ffn2;

    TransformerLayer() = default;
    TransformerLayer(int dim, int heads, int ffn_dim, Xorshift64Star& rng)
        : attn(dim, heads, rng), norm1(dim), norm2(dim), ffn1(dim, ffn_dim, rng), ffn2(ffn_dim, dim, rng) {}

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>* pos = nullptr,
                      std::vector<Tensor<T>>* attn_out = nullptr) const {
        auto h = add(x, attn.forward(norm1.forward(x), pos, nullptr, attn_out));
        return add(h, ffn2.forward(relu(ffn1.forward(norm2.forward(h)))));
    }
    void collect(ParamCollector<T>& pc) {
        pc.sub("attn", attn);
        pc.sub("norm1", norm1);
        pc.sub("norm2", norm2);
        pc.sub("ffn1", ffn1);
        pc.sub("ffn2", ffn2);
    }
};

// ---------------------------------------------------------------------------
// RepConv: 3x3 + 1x1 (+ identity) branches with batch norms at train time,
// folded into one 3x3 kernel + bias for deployment.

template <typename T>
struct RepConv {
    Conv2d<T> conv3, conv1;
    BatchNorm2d<T> bn3, bn1, bnid;
    bool with_identity = false;
    Act act = Act::Silu;

    bool deployed = false;
    Tensor<T> fused_weight, fused_bias;

    RepConv() = default;
    RepConv(int in, int out, Xorshift64Star& rng, bool identity = true)
        : conv3(in, out, 3, 1, rng, false),
          conv1(in, out, 1, 1, rng, false),
          bn3(out),
          bn1(out),
          with_identity(identity && in == out) {
        if (with_identity) bnid = BatchNorm2d<T>(out);
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        if (deployed) return activation(conv2d(x, fused_weight, fused_bias, 1, 1), act);
        auto y = add(bn3.forward(conv3.forward(x), training), bn1.forward(conv1.forward(x), training));
        if (with_identity) y = add(y, bnid.forward(x, training));
        return activation(y, act);
    }

    // Folds the branch norms (running statistics) into a single kernel.
    // Arithmetic in double keeps the fold within 1e-5 of the branch sum.
    void reparameterize() {
        if (deployed) return;
        const int out_c = conv3.weight.dim(0), in_c = conv3.weight.dim(1);
        std::vector<double> w(static_cast<size_t>(out_c) * in_c * 9, 0.0);
        std::vector<double> b(static_cast<size_t>(out_c), 0.0);
        auto fold = [&](const Tensor<T>* conv_w, const BatchNorm2d<T>& bn, bool is_identity, int k) {
            for (int o = 0; o < out_c; ++o) {
                const double is = 1.0 / std::sqrt(static_cast<double>(bn.running_var[static_cast<size_t>(o)]) +
                                                  static_cast<double>(bn.eps));
                const double g = static_cast<double>(bn.gain.data()[o]) * is;
                b[static_cast<size_t>(o)] += static_cast<double>(bn.bias.data()[o]) -
                                             static_cast<double>(bn.running_mean[static_cast<size_t>(o)]) * g;
                for (int c = 0; c < in_c; ++c) {
                    if (is_identity) {
                        if (o == c) w[(static_cast<size_t>(o) * in_c + c) * 9 + 4] += g;
                        continue;
                    }
                    for (int i = 0; i < k * k; ++i) {
                        const double kv = static_cast<double>(conv_w->data()[(static_cast<size_t>(o) * in_c + c) * k * k + i]);
                        const int pos = (k == 3) ? i : 4;  // center a 1x1 kernel
                        w[(static_cast<size_t>(o) * in_c + c) * 9 + pos] += g * kv;
                    }
                }
            }
        };
        fold(&conv3.weight, bn3, false, 3);
        fold(&conv1.weight, bn1, false, 1);
        if (with_identity) fold(nullptr, bnid, true, 0);
        std::vector<T> wt(w.size()), bt(b.size());
        for (size_t i = 0; i < w.size(); ++i) wt[i] = static_cast<T>(w[i]);
        for (size_t i = 0; i < b.size(); ++i) bt[i] = static_cast<T>(b[i]);
        fused_weight = Tensor<T>::from({out_c, in_c, 3, 3}, std::move(wt), true);
        fused_bias = Tensor<T>::from({out_c}, std::move(bt), true);
        deployed = true;
    }

    void collect(ParamCollector<T>& pc) {
        if (deployed) {
            pc.add("fused.weight", fused_weight);
            pc.add("fused.bias", fused_bias);
            return;
        }
        pc.sub("conv3", conv3);
        pc.sub("conv1", conv1);
        pc.sub("bn3", bn3);
        pc.sub("bn1", bn1);
        if (with_identity) pc.sub("bnid", bnid);
    }
};

// ---------------------------------------------------------------------------
// 2D sine positional embedding (temperature 10000, half the dims per axis),
// a pure function of (h, w, dim); cached and bit-stable.

template <typename T>
Tensor<T> sincos_position_embedding(int h, int w, int dim) {
    if (dim % 4 != 0) throw ConfigError(str_cat("positional embedding dim ", dim, " must be divisible by 4"));
    static std::map<std::tuple<int, int, int>, Tensor<T>> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_tuple(h, w, dim);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    const int quarter = dim / 4;
    std::vector<T> vals(static_cast<size_t>(h) * w * dim);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T* row = vals.data() + (static_cast<size_t>(y) * w + x) * dim;
            for (int i = 0; i < quarter; ++i) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
                row[i] = static_cast<T>(std::sin(x * omega));
                row[quarter + i] = static_cast<T>(std::cos(x * omega));
                row[2 * quarter + i] = static_cast<T>(std::sin(y * omega));
                row[3 * quarter + i] = static_cast<T>(std::cos(y * omega));
            }
        }
    auto t = Tensor<T>::from({h * w, dim}, std::move(vals), false);
    cache.emplace(key, t);
    return t;
}

// [C,H,W] -> [H*W, C] token layout (row-major spatial flattening) and back
template <typename T>
Tensor<T> tokens_from_chw(const Tensor<T>& x) {
    return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}
template <typename T>
Tensor<T> chw_from_tokens(const Tensor<T>& t, int c, int h, int w) {
    return reshape(transpose(t), {c, h, w});
}

}  // namespace detlab::nn
