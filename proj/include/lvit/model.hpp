#pragma once

#include "lvit/layers.hpp"
#include "lvit/text.hpp"

namespace lvit {

struct LViTConfig {
    int in_channels = 1;
    int image_size = 64;
    int levels = 4;
    std::vector<int> channels_per_level = {16, 32, 64, 128};
    int patch_size = 2;
    int heads = 4;
    int vit_layers_per_module = 1;  // 1/4/6 for the T/S/B sizes
    int text_embed_dim = 32;
    int max_tokens = 16;
    int num_classes = 1;
    bool use_gelu = true;
    bool positional_embeddings = true;  // switch off to test permutation equivariance

    void validate() const {
        if (levels < 1) throw std::invalid_argument("config: levels must be >= 1");
        if (static_cast<int>(channels_per_level.size()) != levels)
            throw std::invalid_argument("config: channels_per_level must have one entry per level");
        for (size_t i = 1; i < channels_per_level.size(); ++i)
            if (channels_per_level[i] <= channels_per_level[i - 1])
                throw std::invalid_argument("config: channels_per_level must be strictly increasing");
        if (image_size % (1 << levels) != 0)
            throw std::invalid_argument("config: image_size " + std::to_string(image_size) +
                                        " not divisible by 2^levels");
        const int deepest = image_size >> levels;
        if (deepest % patch_size != 0 || deepest / patch_size < 1)
            throw std::invalid_argument("config: deepest feature map " + std::to_string(deepest) +
                                        " incompatible with patch size " + std::to_string(patch_size));
        for (const int c : channels_per_level)
            if (c % heads != 0)
                throw std::invalid_argument("config: channel count " + std::to_string(c) +
                                            " not divisible by head count " + std::to_string(heads));
        if (num_classes < 1) throw std::invalid_argument("config: num_classes must be >= 1");
        if (max_tokens < 1) throw std::invalid_argument("config: max_tokens must be >= 1");
    }

    // Small configuration used by the gradient-fidelity harness.
    static LViTConfig mini() {
        LViTConfig c;
        c.image_size = 16;
        c.levels = 2;
        c.channels_per_level = {4, 8};
        c.heads = 2;
        c.vit_layers_per_module = 1;
        c.text_embed_dim = 8;
        return c;
    }
};

enum class RunMode {
    Train,      // batch statistics, running averages refreshed
    Eval,       // frozen statistics
    Frozen,     // frozen statistics, used when optimizing unlabeled batches
    GradCheck,  // batch statistics without state mutation
};

inline BnPolicy bn_policy(RunMode mode) {
    switch (mode) {
        case RunMode::Train: return BnPolicy::train();
        case RunMode::GradCheck: return BnPolicy::grad_check();
        default: return BnPolicy::eval();
    }
}

namespace detail {

// (N,T,D) tokens laid out on a g x g grid -> (N,D,g,g).
template <typename Real>
Tensor<Real> tokens_to_grid(const Tensor<Real>& x, int g) {
    return permute(reshape(x, {x.dim(0), g, g, x.dim(2)}), {0, 3, 1, 2});
}

template <typename Real>
Tensor<Real> grid_to_tokens(const Tensor<Real>& x) {
    auto p = permute(x, {0, 2, 3, 1});
    return reshape(p, {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

}  // namespace detail

// Pre-norm transformer block: x' = MHSA(LN(x)) + x; y = MLP(LN(x')) + x'.
template <typename Real>
struct VitBlock {
    LayerNorm<Real> ln1, ln2;
    Linear<Real> q, k, v, o, mlp1, mlp2;
    int heads = 1;
    bool use_gelu = true;

    VitBlock() = default;
    VitBlock(ParameterBank<Real>& bank, const std::string& prefix, int dim, int heads_, bool use_gelu_, Rng& rng)
        : ln1(bank, prefix + ".ln1", dim),
          ln2(bank, prefix + ".ln2", dim),
          q(bank, prefix + ".q", dim, dim, rng),
          k(bank, prefix + ".k", dim, dim, rng),
          v(bank, prefix + ".v", dim, dim, rng),
          o(bank, prefix + ".o", dim, dim, rng),
          mlp1(bank, prefix + ".mlp1", dim, 4 * dim, rng),
          mlp2(bank, prefix + ".mlp2", 4 * dim, dim, rng),
          heads(heads_),
          use_gelu(use_gelu_) {
        if (dim % heads != 0) throw std::invalid_argument("vit block: dim not divisible by heads");
    }

    // attention_out, when given, receives the (N*heads, T, T) attention map.
    Tensor<Real> operator()(const Tensor<Real>& x, Tensor<Real>* attention_out = nullptr) const {
        const int n = x.dim(0), t = x.dim(1), d = x.dim(2);
        const int dh = d / heads;

        auto split = [&](const Tensor<Real>& z) {
            return reshape(permute(reshape(z, {n, t, heads, dh}), {0, 2, 1, 3}), {n * heads, t, dh});
        };

        auto h = ln1(x);
        auto qs = split(q(h));
        auto ks = split(k(h));
        auto vs = split(v(h));
        auto scores = mul_scalar(bmm(qs, transpose_last2(ks)), static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh))));
        auto att = softmax(scores, 2);
        if (attention_out) *attention_out = att;
        auto mixed = bmm(att, vs);
        auto merged = reshape(permute(reshape(mixed, {n, heads, t, dh}), {0, 2, 1, 3}), {n, t, d});
        auto x1 = add(x, o(merged));

        auto h2 = ln2(x1);
        auto inner = mlp1(h2);
        auto act = use_gelu ? gelu(inner) : relu(inner);
        return add(x1, mlp2(act));
    }
};

// Patch embedding with a learned positional table: non-overlapping SxS
// patches projected to the level dimension.
template <typename Real>
struct PatchEmbed {
    Linear<Real> proj;
    Tensor<Real> pos;  // (T, D); undefined when positional embeddings are off
    int patch = 2;
    int tokens = 0;

    PatchEmbed() = default;
    PatchEmbed(ParameterBank<Real>& bank, const std::string& prefix, int channels, int spatial, int patch_,
               bool positional, Rng& rng)
        : proj(bank, prefix + ".proj", channels * patch_ * patch_, channels, rng), patch(patch_) {
        if (spatial % patch != 0)
            throw std::invalid_argument("patch_embed: spatial extent " + std::to_string(spatial) +
                                        " not divisible by patch size " + std::to_string(patch));
        const int g = spatial / patch;
        tokens = g * g;
        if (positional) {
            Tensor<Real> p(Shape{tokens, channels});
            init::normal(p, 0.02, rng);
            pos = bank.add(prefix + ".pos", p);
        }
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        if (h % patch != 0 || w % patch != 0)
            throw std::invalid_argument("patch_embed: input " + shape_str(x.shape()) +
                                        " not divisible by patch " + std::to_string(patch));
        const int gh = h / patch, gw = w / patch;
        // (N,C,gh,S,gw,S) -> (N,gh,gw,C,S,S) -> (N,T,C*S*S)
        auto r = reshape(x, {n, c, gh, patch, gw, patch});
        auto p = permute(r, {0, 2, 4, 1, 3, 5});
        auto flat = reshape(p, {n, gh * gw, c * patch * patch});
        auto out = proj(flat);
        if (pos.defined()) out = add(out, pos);
        return out;
    }
};

// Conv-BatchNorm-ReLU projection of text embeddings, then a linear token
// resample so the result is addable to the first level's image tokens.
template <typename Real>
struct CtbnBlock {
    Linear<Real> proj;  // 1x1 conv over the token axis
    BatchNorm<Real> bn;

    CtbnBlock() = default;
    CtbnBlock(ParameterBank<Real>& bank, const std::string& prefix, int text_dim, int out_dim, Rng& rng)
        : proj(bank, prefix + ".proj", text_dim, out_dim, rng), bn(bank, prefix + ".bn", out_dim, 2) {}

    Tensor<Real> operator()(const Tensor<Real>& x_text, int target_tokens, const BnPolicy& policy) {
        if (x_text.dim(1) < 1) throw std::invalid_argument("ctbn: empty token sequence");
        auto h = relu(bn(proj(x_text), policy));
        return resample_linear_tokens(h, target_tokens);
    }
};

// ViT tokens folded back onto the CNN grid: upsample, 1x1 conv, BatchNorm,
// ReLU, then a residual add onto the CNN features.
template <typename Real>
struct InteractBlock {
    Conv2dLayer<Real> conv;
    BatchNorm<Real> bn;
    int patch = 2;

    InteractBlock() = default;
    InteractBlock(ParameterBank<Real>& bank, const std::string& prefix, int channels, int patch_, Rng& rng)
        : conv(bank, prefix + ".conv", channels, channels, 1, 0, rng), bn(bank, prefix + ".bn", channels, 1),
          patch(patch_) {}

    Tensor<Real> operator()(const Tensor<Real>& tokens, const Tensor<Real>& cnn_feat, const BnPolicy& policy) {
        const int c = cnn_feat.dim(1), h = cnn_feat.dim(2), w = cnn_feat.dim(3);
        const int g = h / patch;
        if (tokens.dim(1) != g * (w / patch) || tokens.dim(2) != c)
            throw std::invalid_argument("cnn_vit_interact: token grid " + shape_str(tokens.shape()) +
                                        " does not match feature map " + shape_str(cnn_feat.shape()));
        auto grid = detail::tokens_to_grid(tokens, g);
        auto up = upsample_bilinear(grid, patch);
        auto mixed = relu(bn(conv(up), policy));
        return add(cnn_feat, mixed);
    }
};

// Pixel-level attention: channel attention from parallel GAP/GMP branches
// (a concat path and an add path, summed), then spatial attention from
// per-pixel mean/max maps through a 3x3 conv.
template <typename Real>
struct Plam {
    Linear<Real> cat1, cat2, add1, add2;
    Conv2dLayer<Real> spatial;

    Plam() = default;
    Plam(ParameterBank<Real>& bank, const std::string& prefix, int channels, Rng& rng)
        : cat1(bank, prefix + ".cat1", 2 * channels, channels, rng),
          cat2(bank, prefix + ".cat2", channels, channels, rng),
          add1(bank, prefix + ".add1", channels, channels, rng),
          add2(bank, prefix + ".add2", channels, channels, rng),
          // circular padding keeps the attention map constant on constant
          // input, which zero padding would break at the borders
          spatial(bank, prefix + ".spatial", 2, 1, 3, 1, rng, PadMode::Circular) {}

    Tensor<Real> operator()(const Tensor<Real>& feat) const {
        const int n = feat.dim(0), c = feat.dim(1);
        auto gap = mean_axes(feat, {2, 3});  // (N,C)
        auto gmp = max_axes(feat, {2, 3});
        auto cat_path = cat2(relu(cat1(concat<Real>({gap, gmp}, 1))));
        auto add_path = add2(relu(add1(add(gap, gmp))));
        auto channel_w = sigmoid(add(cat_path, add_path));
        auto attended = mul(feat, reshape(channel_w, {n, c, 1, 1}));

        auto mean_map = mean_axes(attended, {1}, true);  // (N,1,H,W)
        auto max_map = max_axes(attended, {1}, true);
        auto spatial_w = sigmoid(spatial(concat<Real>({mean_map, max_map}, 1)));
        return mul(attended, spatial_w);
    }
};

// The Double-U model: a U-shaped CNN branch carrying the image and the
// segmentation head, and a U-shaped ViT branch merging image tokens with
// text tokens, exchanging features with the CNN at every level.
template <typename Real>
class LViT {
public:
    using TokenBatch = std::vector<std::vector<int>>;

    struct Capture {
        std::map<std::string, Tensor<Real>> activations;  // on-path named activations
        Tensor<Real> logits;                              // pre-sigmoid head output
    };

    LViT(LViTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed, "init");
        const int L = cfg_.levels;
        const auto& ch = cfg_.channels_per_level;

        down_cnn_.reserve(static_cast<size_t>(L));
        for (int i = 0; i < L; ++i)
            down_cnn_.emplace_back(bank_, "down_cnn." + std::to_string(i),
                                   i == 0 ? cfg_.in_channels : ch[static_cast<size_t>(i - 1)],
                                   ch[static_cast<size_t>(i)], rng);

        for (int i = 0; i < L; ++i)
            patch_embed_.emplace_back(bank_, "patch_embed." + std::to_string(i), ch[static_cast<size_t>(i)],
                                      level_extent(i), cfg_.patch_size, cfg_.positional_embeddings, rng);

        {
            Tensor<Real> table(Shape{text::vocab_size(), cfg_.text_embed_dim});
            init::normal(table, 0.02, rng);
            text_table_ = bank_.add("text_embed.table", table);
        }
        ctbn_ = CtbnBlock<Real>(bank_, "ctbn", cfg_.text_embed_dim, ch[0], rng);

        auto make_blocks = [&](const std::string& prefix, int dim) {
            std::vector<VitBlock<Real>> blocks;
            for (int j = 0; j < cfg_.vit_layers_per_module; ++j)
                blocks.emplace_back(bank_, prefix + ".blocks." + std::to_string(j), dim, cfg_.heads,
                                    cfg_.use_gelu, rng);
            return blocks;
        };

        down_vit_blocks_.resize(static_cast<size_t>(L));
        for (int i = 0; i < L; ++i) {
            down_vit_blocks_[static_cast<size_t>(i)] = make_blocks("down_vit." + std::to_string(i), ch[static_cast<size_t>(i)]);
            if (i > 0)
                down_vit_proj_.emplace_back(bank_, "down_vit." + std::to_string(i) + ".proj",
                                            ch[static_cast<size_t>(i - 1)], ch[static_cast<size_t>(i)], rng);
        }
        up_vit_blocks_.resize(static_cast<size_t>(L > 1 ? L - 1 : 0));
        for (int i = L - 2; i >= 0; --i) {
            up_vit_blocks_[static_cast<size_t>(i)] = make_blocks("up_vit." + std::to_string(i), ch[static_cast<size_t>(i)]);
            up_vit_proj_.insert(up_vit_proj_.begin(),
                                Linear<Real>(bank_, "up_vit." + std::to_string(i) + ".proj",
                                             ch[static_cast<size_t>(i + 1)], ch[static_cast<size_t>(i)], rng));
        }

        for (int i = 0; i < L; ++i) {
            interact_.emplace_back(bank_, "interact." + std::to_string(i), ch[static_cast<size_t>(i)],
                                   cfg_.patch_size, rng);
            plam_.emplace_back(bank_, "plam." + std::to_string(i), ch[static_cast<size_t>(i)], rng);
        }

        for (int i = L - 2; i >= 0; --i)
            decoder_.insert(decoder_.begin(),
                            ConvBlock<Real>(bank_, "decoder." + std::to_string(i),
                                            ch[static_cast<size_t>(i + 1)] + ch[static_cast<size_t>(i)],
                                            ch[static_cast<size_t>(i)], rng));
        final_block_ = ConvBlock<Real>(bank_, "final_block", ch[0], ch[0], rng);
        head_ = Conv2dLayer<Real>(bank_, "head", ch[0], cfg_.num_classes, 1, 0, rng);
    }

    const LViTConfig& config() const { return cfg_; }
    ParameterBank<Real>& bank() { return bank_; }
    const ParameterBank<Real>& bank() const { return bank_; }
    Tensor<Real> text_table() const { return text_table_; }

    // Probability maps in [0,1], shaped like the input with num_classes
    // channels. `text` may be null: the ViT branch then runs on image tokens
    // alone.
    Tensor<Real> forward(const Tensor<Real>& image, const TokenBatch* text, RunMode mode,
                         Capture* capture = nullptr) {
        check_input(image, text);
        const BnPolicy policy = bn_policy(mode);
        const int L = cfg_.levels;

        // contracting CNN path
        std::vector<Tensor<Real>> cnn_feat(static_cast<size_t>(L));
        Tensor<Real> cur = image;
        for (int i = 0; i < L; ++i) {
            cur = maxpool2d(down_cnn_[static_cast<size_t>(i)](cur, policy), 2);
            cnn_feat[static_cast<size_t>(i)] = cur;
            if (capture) capture->activations["down_cnn." + std::to_string(i + 1)] = cur;
        }

        // contracting ViT path with the text merge at the first level
        std::vector<Tensor<Real>> vit_down(static_cast<size_t>(L));
        Tensor<Real> tokens = patch_embed_[0](cnn_feat[0]);
        if (text) {
            auto x_text = embedding(text_table_, *text, text::kPadId);
            tokens = add(tokens, ctbn_(x_text, patch_embed_[0].tokens, policy));
        }
        for (const auto& block : down_vit_blocks_[0]) tokens = block(tokens);
        vit_down[0] = tokens;
        if (capture) capture->activations["down_vit.1"] = tokens;
        for (int i = 1; i < L; ++i) {
            auto pooled = token_pool2(tokens, token_grid(i - 1));
            auto merged = add(down_vit_proj_[static_cast<size_t>(i - 1)](pooled), patch_embed_[static_cast<size_t>(i)](cnn_feat[static_cast<size_t>(i)]));
            for (const auto& block : down_vit_blocks_[static_cast<size_t>(i)]) merged = block(merged);
            vit_down[static_cast<size_t>(i)] = merged;
            tokens = merged;
        }

        // expanding ViT path; the deepest level feeds the interaction directly
        std::vector<Tensor<Real>> vit_out(static_cast<size_t>(L));
        vit_out[static_cast<size_t>(L - 1)] = vit_down[static_cast<size_t>(L - 1)];
        for (int i = L - 2; i >= 0; --i) {
            auto up = token_up2(vit_out[static_cast<size_t>(i + 1)], token_grid(i + 1));
            auto merged = add(up_vit_proj_[static_cast<size_t>(i)](up), vit_down[static_cast<size_t>(i)]);
            for (const auto& block : up_vit_blocks_[static_cast<size_t>(i)]) merged = block(merged);
            vit_out[static_cast<size_t>(i)] = merged;
        }

        // per-level interaction + pixel-level attention on the skip path
        std::vector<Tensor<Real>> skip(static_cast<size_t>(L));
        for (int i = 0; i < L; ++i)
            skip[static_cast<size_t>(i)] = plam_[static_cast<size_t>(i)](
                interact_[static_cast<size_t>(i)](vit_out[static_cast<size_t>(i)], cnn_feat[static_cast<size_t>(i)], policy));

        // expanding CNN path with concatenated skips
        Tensor<Real> dec = skip[static_cast<size_t>(L - 1)];
        for (int i = L - 2; i >= 0; --i) {
            auto up = upsample_bilinear(dec, 2);
            dec = decoder_[static_cast<size_t>(i)](concat<Real>({up, skip[static_cast<size_t>(i)]}, 1), policy);
        }
        dec = final_block_(upsample_bilinear(dec, 2), policy);
        auto logits = head_(dec);
        if (capture) capture->logits = logits;
        return sigmoid(logits);
    }

    // Gradient-weighted class activation map for a named layer, normalized to
    // [0,1] at input resolution. Valid names: down_cnn.1..levels, down_vit.1.
    Tensor<Real> saliency(const Tensor<Real>& image, const TokenBatch* text, const std::string& layer) {
        validate_layer_name(layer);
        if (image.dim(0) != 1) throw std::invalid_argument("saliency: expects a single-image batch");
        Capture cap;
        Tensor<Real> act;
        {
            Tape<Real> tape;
            forward(image, text, RunMode::Eval, &cap);
            act = cap.activations.at(layer);
            tape.backward(sum_all(cap.logits));
        }

        // channel weights = GAP of gradients; activation map layouts differ
        // between grid features (N,C,H,W) and tokens (N,T,D)
        std::vector<Real> values = act.values();
        std::vector<Real> grads = act.grad().values();
        int c, h, w;
        std::vector<Real> plane_vals, plane_grads;
        if (act.rank() == 4) {
            c = act.dim(1);
            h = act.dim(2);
            w = act.dim(3);
            plane_vals = values;
            plane_grads = grads;
        } else {  // tokens (1,T,D): transpose to channel-major planes
            const int t = act.dim(1), d = act.dim(2);
            const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(t))));
            c = d;
            h = g;
            w = g;
            plane_vals.resize(static_cast<size_t>(d) * t);
            plane_grads.resize(static_cast<size_t>(d) * t);
            for (int tok = 0; tok < t; ++tok)
                for (int dim = 0; dim < d; ++dim) {
                    plane_vals[static_cast<size_t>(dim) * t + tok] = values[static_cast<size_t>(tok) * d + dim];
                    plane_grads[static_cast<size_t>(dim) * t + tok] = grads[static_cast<size_t>(tok) * d + dim];
                }
        }

        const int hw = h * w;
        Tensor<Real> cam(Shape{1, 1, h, w});
        for (int ch = 0; ch < c; ++ch) {
            double weight = 0;
            for (int i = 0; i < hw; ++i) weight += static_cast<double>(plane_grads[static_cast<size_t>(ch) * hw + i]);
            weight /= hw;
            for (int i = 0; i < hw; ++i)
                cam.data()[i] += static_cast<Real>(weight) * plane_vals[static_cast<size_t>(ch) * hw + i];
        }
        for (int i = 0; i < hw; ++i) cam.data()[i] = std::max(cam.data()[i], Real(0));

        auto up = upsample_bilinear(cam, cfg_.image_size / h);
        // min-max normalize; a constant map becomes all zeros
        Real lo = up.data()[0], hi = up.data()[0];
        for (const Real v : up.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        Tensor<Real> out(Shape{cfg_.image_size, cfg_.image_size});
        if (hi - lo > Real(1e-12))
            for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = (up.data()[i] - lo) / (hi - lo);
        return out;
    }

    void validate_layer_name(const std::string& layer) const {
        for (int i = 1; i <= cfg_.levels; ++i)
            if (layer == "down_cnn." + std::to_string(i)) return;
        if (layer == "down_vit.1") return;
        throw std::invalid_argument("saliency: unknown layer '" + layer + "'; valid: down_cnn.1.." +
                                    std::to_string(cfg_.levels) + ", down_vit.1");
    }

    // Spatial extent of the level-i feature map (after its pooling step).
    int level_extent(int i) const { return cfg_.image_size >> (i + 1); }
    int token_grid(int i) const { return level_extent(i) / cfg_.patch_size; }

private:
    void check_input(const Tensor<Real>& image, const TokenBatch* text) const {
        if (image.rank() != 4 || image.dim(1) != cfg_.in_channels || image.dim(2) != cfg_.image_size ||
            image.dim(3) != cfg_.image_size)
            throw std::invalid_argument("forward: expected image (N," + std::to_string(cfg_.in_channels) + "," +
                                        std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                                        "), got " + shape_str(image.shape()));
        if (text) {
            if (static_cast<int>(text->size()) != image.dim(0))
                throw std::invalid_argument("forward: text batch size does not match image batch size");
            for (const auto& seq : *text)
                if (static_cast<int>(seq.size()) != cfg_.max_tokens)
                    throw std::invalid_argument("forward: token sequences must be padded to max_tokens");
        }
    }

    Tensor<Real> token_pool2(const Tensor<Real>& tokens, int g) const {
        return detail::grid_to_tokens(avgpool2d(detail::tokens_to_grid(tokens, g), 2));
    }
    Tensor<Real> token_up2(const Tensor<Real>& tokens, int g) const {
        return detail::grid_to_tokens(upsample_nearest(detail::tokens_to_grid(tokens, g), 2));
    }

    LViTConfig cfg_;
    ParameterBank<Real> bank_;
    std::vector<ConvBlock<Real>> down_cnn_;
    std::vector<PatchEmbed<Real>> patch_embed_;
    Tensor<Real> text_table_;
    CtbnBlock<Real> ctbn_;
    std::vector<std::vector<VitBlock<Real>>> down_vit_blocks_;
    std::vector<Linear<Real>> down_vit_proj_;  // level i-1 -> i, indexed i-1
    std::vector<std::vector<VitBlock<Real>>> up_vit_blocks_;
    std::vector<Linear<Real>> up_vit_proj_;  // level i+1 -> i, indexed i
    std::vector<InteractBlock<Real>> interact_;
    std::vector<Plam<Real>> plam_;
    std::vector<ConvBlock<Real>> decoder_;  // indexed by target level
    ConvBlock<Real> final_block_;
    Conv2dLayer<Real> head_;
};

}  // namespace lvit
