#include <catch2/catch.hpp>

#include "lvit/grad_harness.hpp"
#include "lvit/gradcheck.hpp"
#include "lvit/losses.hpp"
#include "lvit/model.hpp"

using lvit::BnPolicy;
using lvit::LViT;
using lvit::LViTConfig;
using lvit::ParameterBank;
using lvit::RunMode;
using lvit::Shape;
using lvit::Tape;
using lvit::Tensor;

namespace {

template <typename Real>
Tensor<Real> randu(Shape shape, lvit::Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<Real> t(shape);
    for (auto& v : t.values()) v = static_cast<Real>(rng.uniform(lo, hi));
    return t;
}

std::vector<std::vector<int>> tokens_for(const std::string& raw, int n, int max_tokens) {
    const auto rep = lvit::text::parse_report(raw, max_tokens);
    return std::vector<std::vector<int>>(static_cast<size_t>(n), rep.tokens);
}

const char* kBilateralRaw =
    "Bilateral pulmonary infection, two infected areas, upper left lung and upper right lung.";

}  // namespace

TEST_CASE("config validation catches bad geometry", "[model]") {
    LViTConfig bad = LViTConfig::mini();
    bad.image_size = 20;  // not divisible by 2^levels * patch grid
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    LViTConfig nonmono = LViTConfig::mini();
    nonmono.channels_per_level = {8, 8};
    CHECK_THROWS_AS(nonmono.validate(), std::invalid_argument);

    LViTConfig badheads = LViTConfig::mini();
    badheads.heads = 3;
    CHECK_THROWS_AS(badheads.validate(), std::invalid_argument);

    CHECK_NOTHROW(LViTConfig{}.validate());
    CHECK_NOTHROW(LViTConfig::mini().validate());
}

TEST_CASE("conv block: shape contract, zero propagation, gradients", "[model]") {
    lvit::Rng rng(1);
    ParameterBank<double> bank;
    lvit::Rng init_rng(7, "init");
    lvit::ConvBlock<double> block(bank, "blk", 1, 16, init_rng);

    auto x = randu<double>({1, 1, 16, 16}, rng);
    auto y = block(x, BnPolicy::eval());
    CHECK(y.shape() == Shape{1, 16, 16, 16});

    // zero input with zero BN shift stays zero through ReLU(BN(Conv))
    auto zero = Tensor<double>(Shape{2, 1, 8, 8});
    auto yz = block(zero, BnPolicy::grad_check());
    for (const double v : yz.values()) CHECK(v == 0.0);

    // conv weight gradients against central differences (batch stats active)
    auto w = bank.at("blk.conv1.weight");
    auto x2 = randu<double>({2, 1, 6, 6}, rng);
    auto loss_of = [&]() {
        return lvit::mean_all(lvit::mul(block(x2, BnPolicy::grad_check()), block(x2, BnPolicy::grad_check())));
    };
    {
        Tape<double> tape;
        tape.backward(loss_of());
    }
    const auto grad = w.grad();
    double max_err = 0;
    for (std::int64_t i = 0; i < w.size(); i += 7) {
        const double orig = w.data()[i];
        const double eps = 1e-5;
        w.data()[i] = orig + eps;
        const double fp = loss_of().item();
        w.data()[i] = orig - eps;
        const double fm = loss_of().item();
        w.data()[i] = orig;
        const double numeric = (fp - fm) / (2 * eps);
        const double a = grad.data()[i];
        if (std::abs(a - numeric) <= 1e-9) continue;
        max_err = std::max(max_err, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
    CHECK(max_err < 1e-6);
}

TEST_CASE("down path halves spatial extents level by level", "[model]") {
    LViTConfig cfg;  // 64, levels 4
    LViT<double> model(cfg, 99);
    lvit::Rng rng(2);
    auto img = randu<double>({1, 1, 64, 64}, rng);
    typename LViT<double>::Capture cap;
    model.forward(img, nullptr, RunMode::Eval, &cap);
    CHECK(cap.activations.at("down_cnn.1").shape() == Shape{1, 16, 32, 32});
    CHECK(cap.activations.at("down_cnn.2").shape() == Shape{1, 32, 16, 16});
    CHECK(cap.activations.at("down_cnn.3").shape() == Shape{1, 64, 8, 8});
    CHECK(cap.activations.at("down_cnn.4").shape() == Shape{1, 128, 4, 4});  // 64 -> 4 over four steps
    CHECK(cap.activations.at("down_vit.1").shape() == Shape{1, 256, 16});    // 32x32 map, patch 2
}

TEST_CASE("gradients reach the first-level conv weights", "[model]") {
    LViTConfig cfg = LViTConfig::mini();
    LViT<double> model(cfg, 5);
    lvit::Rng rng(3);
    auto img = randu<double>({2, 1, 16, 16}, rng);
    {
        Tape<double> tape;
        auto p = model.forward(img, nullptr, RunMode::GradCheck);
        tape.backward(lvit::mean_all(p));
    }
    const auto g = model.bank().at("down_cnn.0.conv1.weight").grad();
    double mag = 0;
    for (const double v : g.values()) mag += std::abs(v);
    CHECK(mag > 0.0);

    const auto gp = model.bank().at("down_vit.1.proj.weight").grad();
    double mag2 = 0;
    for (const double v : gp.values()) mag2 += std::abs(v);
    CHECK(mag2 > 0.0);
}

TEST_CASE("patch embedding counts tokens and zeroes out with zero inputs", "[model]") {
    ParameterBank<double> bank;
    lvit::Rng rng(7, "init");
    lvit::PatchEmbed<double> pe(bank, "pe", 16, 32, 2, true, rng);
    CHECK(pe.tokens == 256);  // 32x32 map, patch 2 -> 16x16 grid

    lvit::Rng drng(4);
    auto x = randu<double>({1, 16, 32, 32}, drng);
    CHECK(pe(x).shape() == Shape{1, 256, 16});

    // zero input + zero positional embedding + zero bias -> zero tokens
    for (auto& v : bank.at("pe.pos").values()) v = 0.0;
    for (auto& v : bank.at("pe.proj.bias").values()) v = 0.0;
    auto z = pe(Tensor<double>(Shape{1, 16, 32, 32}));
    for (const double v : z.values()) CHECK(v == 0.0);

    CHECK_THROWS_AS(pe(Tensor<double>(Shape{1, 16, 31, 31})), std::invalid_argument);
}

TEST_CASE("patchify with identity projection reproduces the input", "[model]") {
    // choose D == C*S*S and set the projection to the identity
    ParameterBank<double> bank;
    lvit::Rng rng(7, "init");
    const int c = 4, s = 2, d = c * s * s;
    lvit::Linear<double> proj(bank, "p", d, d, rng);
    for (std::int64_t i = 0; i < proj.weight.size(); ++i) proj.weight.data()[i] = 0.0;
    for (int i = 0; i < d; ++i) proj.weight.data()[i * d + i] = 1.0;
    for (auto& v : proj.bias.values()) v = 0.0;

    lvit::Rng drng(8);
    auto x = randu<double>({1, c, 6, 6}, drng);
    // patchify exactly as the embedding does
    auto r = lvit::reshape(x, {1, c, 3, s, 3, s});
    auto perm = lvit::permute(r, {0, 2, 4, 1, 3, 5});
    auto tokens = proj(lvit::reshape(perm, {1, 9, d}));
    // unpatchify: inverse permutation returns the original layout
    auto back = lvit::permute(lvit::reshape(tokens, {1, 3, 3, c, s, s}), {0, 3, 1, 4, 2, 5});
    auto x2 = lvit::reshape(back, {1, c, 6, 6});
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(x2.data()[i] == Approx(x.data()[i]).margin(1e-15));
}

TEST_CASE("ctbn merge: shape, zero text, constant resampling", "[model]") {
    ParameterBank<double> bank;
    lvit::Rng rng(7, "init");
    lvit::CtbnBlock<double> ctbn(bank, "ctbn", 8, 16, rng);

    lvit::Rng drng(9);
    auto x_text = randu<double>({2, 5, 8}, drng);
    auto merged = ctbn(x_text, 64, BnPolicy::eval());
    CHECK(merged.shape() == Shape{2, 64, 16});

    // zero embedding with zero BN shift contributes nothing
    auto zeros = Tensor<double>(Shape{2, 5, 8});
    auto mz = ctbn(zeros, 64, BnPolicy::eval());
    for (const double v : mz.values()) CHECK(v == 0.0);

    CHECK_THROWS_AS(ctbn(Tensor<double>(Shape{1, 0, 8}), 64, BnPolicy::eval()), std::invalid_argument);
}

TEST_CASE("vit block: shape preserved, zero weights give the identity", "[model]") {
    ParameterBank<double> bank;
    lvit::Rng rng(7, "init");
    lvit::VitBlock<double> block(bank, "vb", 16, 4, true, rng);

    lvit::Rng drng(10);
    auto x = randu<double>({1, 8, 16}, drng);
    CHECK(block(x).shape() == Shape{1, 8, 16});

    // zero every projection: both residual branches vanish
    for (const auto& [name, entry] : bank.entries())
        if (name.find(".weight") != std::string::npos || name.find(".bias") != std::string::npos) {
            auto t = entry.tensor;
            for (auto& v : t.values()) v = 0.0;
        }
    auto y = block(x);
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("a single token attends to itself with weight exactly one", "[model]") {
    ParameterBank<double> bank;
    lvit::Rng rng(7, "init");
    lvit::VitBlock<double> block(bank, "vb", 8, 2, true, rng);
    lvit::Rng drng(11);
    auto x = randu<double>({1, 1, 8}, drng);
    Tensor<double> att;
    block(x, &att);
    CHECK(att.shape() == Shape{2, 1, 1});  // one probability per head
    for (const double v : att.values()) CHECK(v == 1.0);
}

TEST_CASE("vit block without positional input is permutation-equivariant", "[model]") {
    ParameterBank<double> bank;
    lvit::Rng rng(7, "init");
    lvit::VitBlock<double> block(bank, "vb", 16, 4, true, rng);
    lvit::Rng drng(12);
    const int t = 10;
    auto x = randu<double>({1, t, 16}, drng);

    std::vector<int> perm(t);
    for (int i = 0; i < t; ++i) perm[static_cast<size_t>(i)] = i;
    lvit::Rng prng(13);
    prng.shuffle(perm);

    auto permute_tokens = [&](const Tensor<double>& in) {
        Tensor<double> out(in.shape());
        for (int i = 0; i < t; ++i)
            for (int d = 0; d < 16; ++d)
                out.data()[i * 16 + d] = in.data()[perm[static_cast<size_t>(i)] * 16 + d];
        return out;
    };

    auto direct = block(permute_tokens(x));
    auto swapped = permute_tokens(block(x));
    for (std::int64_t i = 0; i < direct.size(); ++i)
        CHECK(direct.data()[i] == Approx(swapped.data()[i]).margin(1e-6));
}

TEST_CASE("interaction block: zero tokens pass the CNN features through", "[model]") {
    ParameterBank<double> bank;
    lvit::Rng rng(7, "init");
    lvit::InteractBlock<double> inter(bank, "ia", 16, 2, rng);
    lvit::Rng drng(14);
    auto feat = randu<double>({1, 16, 32, 32}, drng);
    auto tokens = Tensor<double>(Shape{1, 256, 16});
    auto out = inter(tokens, feat, BnPolicy::eval());
    CHECK(out.shape() == feat.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == feat.data()[i]);

    // constant tokens upsample to a constant field before the conv
    auto ct = Tensor<double>(Shape{1, 256, 16}, 0.35);
    auto grid = lvit::detail::tokens_to_grid(ct, 16);
    auto up = lvit::upsample_bilinear(grid, 2);
    for (const double v : up.values()) CHECK(v == Approx(0.35));

    CHECK_THROWS_AS(inter(Tensor<double>(Shape{1, 64, 16}), feat, BnPolicy::eval()), std::invalid_argument);
}

TEST_CASE("plam preserves shape, keeps attention in (0,1), honors symmetry", "[model]") {
    ParameterBank<double> bank;
    lvit::Rng rng(7, "init");
    lvit::Plam<double> plam(bank, "pl", 8, rng);
    lvit::Rng drng(15);
    auto feat = randu<double>({2, 8, 8, 8}, drng, 0.1, 0.9);
    auto out = plam(feat);
    CHECK(out.shape() == feat.shape());

    // attention is multiplicative with factors in (0,1): |out| < |in| elementwise
    for (std::int64_t i = 0; i < out.size(); ++i) {
        CHECK(std::abs(out.data()[i]) < std::abs(feat.data()[i]) + 1e-12);
        CHECK(out.data()[i] >= 0.0);
    }

    // spatially uniform input -> spatially uniform output per channel
    Tensor<double> uniform(Shape{1, 8, 4, 4});
    for (int c = 0; c < 8; ++c)
        for (int i = 0; i < 16; ++i) uniform.data()[c * 16 + i] = 0.1 * (c + 1);
    auto uout = plam(uniform);
    for (int c = 0; c < 8; ++c)
        for (int i = 1; i < 16; ++i)
            CHECK(uout.data()[c * 16 + i] == Approx(uout.data()[c * 16]).margin(1e-12));
}

TEST_CASE("forward contract: shape, range, determinism", "[model]") {
    LViTConfig cfg;
    LViT<float> model(cfg, 1234);
    lvit::Rng rng(16);
    auto img = randu<float>({1, 1, 64, 64}, rng);
    const auto toks = tokens_for(kBilateralRaw, 1, cfg.max_tokens);

    auto p1 = model.forward(img, &toks, RunMode::Eval);
    CHECK(p1.shape() == Shape{1, 1, 64, 64});
    for (const float v : p1.values()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    auto p2 = model.forward(img, &toks, RunMode::Eval);
    CHECK(p1.values() == p2.values());  // eval mode is deterministic

    CHECK_THROWS_AS(model.forward(Tensor<float>(Shape{1, 1, 32, 32}), nullptr, RunMode::Eval),
                    std::invalid_argument);
}

TEST_CASE("a batch of two equals two independent forwards in eval mode", "[model]") {
    LViTConfig cfg = LViTConfig::mini();
    LViT<double> model(cfg, 77);
    lvit::Rng rng(17);
    auto a = randu<double>({1, 1, 16, 16}, rng);
    auto b = randu<double>({1, 1, 16, 16}, rng);
    Tensor<double> both(Shape{2, 1, 16, 16});
    std::copy(a.values().begin(), a.values().end(), both.data());
    std::copy(b.values().begin(), b.values().end(), both.data() + 256);

    const auto toks2 = tokens_for(kBilateralRaw, 2, cfg.max_tokens);
    const auto toks1 = tokens_for(kBilateralRaw, 1, cfg.max_tokens);

    auto pb = model.forward(both, &toks2, RunMode::Eval);
    auto pa = model.forward(a, &toks1, RunMode::Eval);
    auto pbb = model.forward(b, &toks1, RunMode::Eval);
    for (int i = 0; i < 256; ++i) {
        CHECK(pb.data()[i] == Approx(pa.data()[i]).margin(1e-12));
        CHECK(pb.data()[256 + i] == Approx(pbb.data()[i]).margin(1e-12));
    }
}

TEST_CASE("parameter counts grow strictly with the transformer depth", "[model]") {
    auto count_for = [](int layers) {
        LViTConfig cfg;
        cfg.vit_layers_per_module = layers;
        LViT<float> model(cfg, 1);
        return model.bank().parameter_count(true);
    };
    const auto t = count_for(1), s = count_for(4), b = count_for(6);
    CHECK(t < s);
    CHECK(s < b);
}

TEST_CASE("with the interaction path zeroed, text cannot affect the output", "[model]") {
    LViTConfig cfg = LViTConfig::mini();
    LViT<double> model(cfg, 31);
    // zero the ViT-to-CNN couplings: everything the ViT branch contributes
    // flows through interact.*; zeroing conv and BN affine kills it exactly
    for (const auto& [name, entry] : model.bank().entries())
        if (name.rfind("interact.", 0) == 0 && (name.find(".weight") != std::string::npos ||
                                                name.find(".bias") != std::string::npos)) {
            auto t = entry.tensor;
            for (auto& v : t.values()) v = 0.0;
        }

    lvit::Rng rng(18);
    auto img = randu<double>({2, 1, 16, 16}, rng);
    const auto toks = tokens_for(kBilateralRaw, 2, cfg.max_tokens);
    auto with_text = model.forward(img, &toks, RunMode::Eval);
    auto without = model.forward(img, nullptr, RunMode::Eval);
    CHECK(with_text.values() == without.values());  // exact equality
}

TEST_CASE("end-to-end gradients match finite differences on the mini config", "[model]") {
    // sampled coordinates per group; the acceptance harness runs every one
    const auto report = lvit::model_grad_check<double>(LViTConfig::mini(), 2024, 1e-6, 1e-9, 3);
    for (const auto& row : report.rows) {
        INFO(row.name << " max_rel_error=" << row.max_rel_error);
        CHECK(row.max_rel_error < 1e-6);
    }
    CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("the 32-bit gradients hold up against the double-precision oracle", "[model]") {
    const auto report = lvit::model_grad_check<float>(LViTConfig::mini(), 2024, 1e-6, 1e-6, 2);
    CHECK(report.max_rel_error < 1e-3);
}

TEST_CASE("saliency maps: contract, degenerate rule, text sensitivity", "[model]") {
    LViTConfig cfg = LViTConfig::mini();
    LViT<double> model(cfg, 44);
    lvit::Rng rng(21);
    auto img = randu<double>({1, 1, 16, 16}, rng);
    // a synthetic bilateral pattern: bright blobs left and right
    for (int y = 4; y < 8; ++y)
        for (int x = 2; x < 5; ++x) img.data()[y * 16 + x] = 0.95;
    for (int y = 4; y < 8; ++y)
        for (int x = 11; x < 14; ++x) img.data()[y * 16 + x] = 0.95;

    const auto toks = tokens_for(kBilateralRaw, 1, cfg.max_tokens);
    for (const std::string layer : {"down_cnn.1", "down_cnn.2", "down_vit.1"}) {
        auto map = model.saliency(img, &toks, layer);
        CHECK(map.shape() == Shape{16, 16});
        for (const double v : map.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }

    // text on vs off changes the map
    auto with_text = model.saliency(img, &toks, "down_vit.1");
    auto without = model.saliency(img, nullptr, "down_vit.1");
    double l1 = 0;
    for (std::int64_t i = 0; i < with_text.size(); ++i)
        l1 += std::abs(with_text.data()[i] - without.data()[i]);
    CHECK(l1 > 0.0);

    CHECK_THROWS_AS(model.saliency(img, &toks, "decoder.0"), std::invalid_argument);
}

TEST_CASE("min-max normalization maps a constant field to zeros", "[model]") {
    // degenerate saliency: a model whose head weights are zero produces a
    // constant (zero) CAM, which must normalize to all zeros
    LViTConfig cfg = LViTConfig::mini();
    LViT<double> model(cfg, 45);
    for (auto& v : model.bank().at("head.weight").values()) v = 0.0;
    for (auto& v : model.bank().at("head.bias").values()) v = 0.0;
    lvit::Rng rng(22);
    auto img = randu<double>({1, 1, 16, 16}, rng);
    auto map = model.saliency(img, nullptr, "down_cnn.1");
    for (const double v : map.values()) CHECK(v == 0.0);
}

TEST_CASE("model initialization is reproducible from the seed", "[model]") {
    LViTConfig cfg = LViTConfig::mini();
    LViT<double> a(cfg, 321), b(cfg, 321), c(cfg, 322);
    bool all_equal = true, any_diff = false;
    for (const auto& [name, entry] : a.bank().entries()) {
        if (entry.tensor.values() != b.bank().at(name).values()) all_equal = false;
        if (entry.tensor.values() != c.bank().at(name).values()) any_diff = true;
    }
    CHECK(all_equal);
    CHECK(any_diff);
}
