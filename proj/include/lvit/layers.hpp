#pragma once

#include <map>
#include <string>

#include "lvit/image_ops.hpp"
#include "lvit/tensor.hpp"

namespace lvit {

// Named parameter storage. Iteration is lexicographic over the dotted paths,
// so enumeration order (and therefore checkpoint layout and optimizer state)
// is deterministic. Non-trainable entries hold state like BatchNorm running
// statistics; they are checkpointed but never optimized.
template <typename Real>
class ParameterBank {
public:
    struct Entry {
        Tensor<Real> tensor;
        bool trainable = true;
    };

    Tensor<Real> add(const std::string& name, Tensor<Real> t, bool trainable = true) {
        if (entries_.count(name)) throw std::invalid_argument("parameter name not unique: " + name);
        t.set_requires_grad(trainable);
        entries_[name] = Entry{t, trainable};
        return t;
    }

    Tensor<Real> at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return it->second.tensor;
    }

    bool contains(const std::string& name) const { return entries_.count(name) > 0; }

    const std::map<std::string, Entry>& entries() const { return entries_; }

    std::int64_t parameter_count(bool trainable_only = true) const {
        std::int64_t n = 0;
        for (const auto& [name, e] : entries_)
            if (!trainable_only || e.trainable) n += e.tensor.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, e] : entries_) e.tensor.zero_grad();
    }

    // Value snapshot keyed by name, for best-epoch checkpoints.
    std::map<std::string, std::vector<Real>> snapshot() const {
        std::map<std::string, std::vector<Real>> out;
        for (const auto& [name, e] : entries_) out[name] = e.tensor.values();
        return out;
    }

    void restore(const std::map<std::string, std::vector<Real>>& snap) {
        for (const auto& [name, values] : snap) {
            auto it = entries_.find(name);
            if (it == entries_.end()) throw std::invalid_argument("restore: unknown parameter " + name);
            if (it->second.tensor.values().size() != values.size())
                throw std::invalid_argument("restore: size mismatch for " + name);
            it->second.tensor.values() = values;
        }
    }

private:
    std::map<std::string, Entry> entries_;
};

namespace init {

// He-uniform: U(-b, b) with b = sqrt(6 / fan_in).
template <typename Real>
void kaiming_uniform(Tensor<Real>& t, int fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<Real>(rng.uniform(-bound, bound));
}

template <typename Real>
void normal(Tensor<Real>& t, double stddev, Rng& rng) {
    for (auto& v : t.values()) v = static_cast<Real>(stddev * rng.normal());
}

}  // namespace init

// Controls BatchNorm statistics per forward pass. Training uses batch
// statistics and refreshes the running averages; evaluation and the
// unlabeled optimization phase run on frozen running statistics; gradient
// checking needs batch statistics without the state mutation.
struct BnPolicy {
    bool batch_stats = false;
    bool update_running = false;

    static BnPolicy train() { return {true, true}; }
    static BnPolicy eval() { return {false, false}; }
    static BnPolicy frozen() { return {false, false}; }
    static BnPolicy grad_check() { return {true, false}; }
};

template <typename Real>
struct Linear {
    Tensor<Real> weight;  // (in, out)
    Tensor<Real> bias;    // (out)

    Linear() = default;
    Linear(ParameterBank<Real>& bank, const std::string& prefix, int in, int out, Rng& rng) {
        Tensor<Real> w(Shape{in, out});
        init::kaiming_uniform(w, in, rng);
        weight = bank.add(prefix + ".weight", w);
        bias = bank.add(prefix + ".bias", Tensor<Real>(Shape{out}));
    }

    // x (..., in) -> (..., out)
    Tensor<Real> operator()(const Tensor<Real>& x) const {
        Shape lead = x.shape();
        const int in = lead.back();
        lead.pop_back();
        const std::int64_t rows = x.size() / in;
        auto flat = reshape(x, {static_cast<int>(rows), in});
        auto y = add(matmul(flat, weight), bias);
        Shape out_shape = lead;
        out_shape.push_back(weight.dim(1));
        return reshape(y, out_shape);
    }
};

template <typename Real>
struct Conv2dLayer {
    Tensor<Real> weight;  // (K, C, S, S)
    Tensor<Real> bias;    // (K)
    int stride = 1;
    int pad = 0;
    PadMode mode = PadMode::Zero;

    Conv2dLayer() = default;
    Conv2dLayer(ParameterBank<Real>& bank, const std::string& prefix, int in_ch, int out_ch, int ksize, int pad_,
                Rng& rng, PadMode mode_ = PadMode::Zero)
        : pad(pad_), mode(mode_) {
        Tensor<Real> w(Shape{out_ch, in_ch, ksize, ksize});
        init::kaiming_uniform(w, in_ch * ksize * ksize, rng);
        weight = bank.add(prefix + ".weight", w);
        bias = bank.add(prefix + ".bias", Tensor<Real>(Shape{out_ch}));
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        auto y = conv2d(x, weight, stride, pad, mode);
        return add(y, reshape(bias, {1, bias.dim(0), 1, 1}));
    }
};

// BatchNorm over every axis except `channel_axis`. Covers the 2-D case
// (N,C,H,W), axis 1, and the token case (N,T,D), axis 2.
template <typename Real>
struct BatchNorm {
    Tensor<Real> gamma, beta;
    Tensor<Real> running_mean, running_var;
    int channel_axis = 1;
    Real momentum = Real(0.1);
    Real eps = Real(1e-5);

    BatchNorm() = default;
    BatchNorm(ParameterBank<Real>& bank, const std::string& prefix, int channels, int channel_axis_)
        : channel_axis(channel_axis_) {
        gamma = bank.add(prefix + ".weight", Tensor<Real>(Shape{channels}, Real(1)));
        beta = bank.add(prefix + ".bias", Tensor<Real>(Shape{channels}));
        running_mean = bank.add(prefix + ".running_mean", Tensor<Real>(Shape{channels}), false);
        running_var = bank.add(prefix + ".running_var", Tensor<Real>(Shape{channels}, Real(1)), false);
    }

    Tensor<Real> operator()(const Tensor<Real>& x, const BnPolicy& policy) {
        const int r = x.rank();
        std::vector<int> axes;
        Shape bshape(static_cast<size_t>(r), 1);
        bshape[static_cast<size_t>(channel_axis)] = gamma.dim(0);
        for (int d = 0; d < r; ++d)
            if (d != channel_axis) axes.push_back(d);

        auto gamma_b = reshape(gamma, bshape);
        auto beta_b = reshape(beta, bshape);

        // Single-sample training batches fall back to the running statistics.
        const bool use_batch = policy.batch_stats && x.dim(0) > 1;

        if (use_batch) {
            auto mean = mean_axes(x, axes, true);
            auto centered = sub(x, mean);
            auto var = mean_axes(mul(centered, centered), axes, true);
            auto denom = sqrt(add_scalar(var, eps));
            auto normed = div(centered, denom);

            if (policy.update_running) {
                const std::int64_t n = x.size() / gamma.dim(0);
                const double unbias = n > 1 ? static_cast<double>(n) / (n - 1) : 1.0;
                auto& rm = running_mean.values();
                auto& rv = running_var.values();
                for (size_t c = 0; c < rm.size(); ++c) {
                    rm[c] = (Real(1) - momentum) * rm[c] + momentum * mean.data()[c];
                    rv[c] = (Real(1) - momentum) * rv[c] +
                            momentum * static_cast<Real>(unbias * static_cast<double>(var.data()[c]));
                }
            }
            return add(mul(normed, gamma_b), beta_b);
        }

        // Frozen statistics: affine in x with constant mean/var.
        Tensor<Real> inv_std(Shape{gamma.dim(0)});
        for (int c = 0; c < gamma.dim(0); ++c)
            inv_std.data()[c] = Real(1) / std::sqrt(running_var.data()[c] + eps);
        auto centered = sub(x, reshape(running_mean, bshape));
        auto normed = mul(centered, reshape(inv_std, bshape));
        return add(mul(normed, gamma_b), beta_b);
    }
};

// LayerNorm over the trailing dimension.
template <typename Real>
struct LayerNorm {
    Tensor<Real> gamma, beta;
    Real eps = Real(1e-5);

    LayerNorm() = default;
    LayerNorm(ParameterBank<Real>& bank, const std::string& prefix, int dim) {
        gamma = bank.add(prefix + ".weight", Tensor<Real>(Shape{dim}, Real(1)));
        beta = bank.add(prefix + ".bias", Tensor<Real>(Shape{dim}));
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        const int last = x.rank() - 1;
        auto mean = mean_axes(x, {last}, true);
        auto centered = sub(x, mean);
        auto var = mean_axes(mul(centered, centered), {last}, true);
        auto normed = div(centered, sqrt(add_scalar(var, eps)));
        return add(mul(normed, gamma), beta);
    }
};

// Conv(3x3, pad 1) -> BatchNorm -> ReLU, twice; spatial size preserved.
template <typename Real>
struct ConvBlock {
    Conv2dLayer<Real> conv1, conv2;
    BatchNorm<Real> bn1, bn2;

    ConvBlock() = default;
    ConvBlock(ParameterBank<Real>& bank, const std::string& prefix, int in_ch, int out_ch, Rng& rng)
        : conv1(bank, prefix + ".conv1", in_ch, out_ch, 3, 1, rng),
          conv2(bank, prefix + ".conv2", out_ch, out_ch, 3, 1, rng),
          bn1(bank, prefix + ".bn1", out_ch, 1),
          bn2(bank, prefix + ".bn2", out_ch, 1) {}

    Tensor<Real> operator()(const Tensor<Real>& x, const BnPolicy& policy) {
        auto h = relu(bn1(conv1(x), policy));
        return relu(bn2(conv2(h), policy));
    }
};

}  // namespace lvit
