#include <catch2/catch.hpp>

#include "lvit/persist.hpp"

using lvit::Checkpoint;
using lvit::LViT;
using lvit::LViTConfig;
using lvit::Shape;

TEST_CASE("crc32 matches the reference vector", "[persist]") {
    // the classic "123456789" check value
    CHECK(lvit::crc32("123456789", 9) == 0xCBF43926u);
    CHECK(lvit::crc32("", 0) == 0u);
}

TEST_CASE("checkpoint round-trip is byte-identical", "[persist]") {
    LViTConfig cfg = LViTConfig::mini();
    LViT<float> model(cfg, 17);
    nlohmann::json j;
    j["model"] = cfg;
    const auto ck = lvit::make_checkpoint(j.dump(), model.bank());
    const auto bytes = lvit::encode_checkpoint(ck);

    const auto decoded = lvit::decode_checkpoint(bytes);
    CHECK(decoded.config_json == ck.config_json);
    CHECK(decoded.names == ck.names);
    const auto bytes2 = lvit::encode_checkpoint(decoded);
    CHECK(bytes == bytes2);
}

TEST_CASE("any single-bit flip is rejected by the CRC", "[persist]") {
    LViTConfig cfg = LViTConfig::mini();
    cfg.vit_layers_per_module = 1;
    LViT<float> model(cfg, 3);
    auto bytes = lvit::encode_checkpoint(lvit::make_checkpoint("{}", model.bank()));

    lvit::Rng rng(5);
    for (int trial = 0; trial < 32; ++trial) {
        auto corrupted = bytes;
        // keep the magic intact so we exercise the CRC path, not the magic check
        const size_t pos = 4 + rng.below(corrupted.size() - 8);
        corrupted[pos] = static_cast<char>(corrupted[pos] ^ (1 << rng.below(8)));
        CHECK_THROWS_WITH(lvit::decode_checkpoint(corrupted), Catch::Contains("CRC"));
    }

    CHECK_THROWS_WITH(lvit::decode_checkpoint("not a checkpoint"), Catch::Contains("magic"));
}

TEST_CASE("parameters restore exactly through a checkpoint", "[persist]") {
    LViTConfig cfg = LViTConfig::mini();
    LViT<float> a(cfg, 11);
    const auto bytes = lvit::encode_checkpoint(lvit::make_checkpoint("{}", a.bank()));

    LViT<float> b(cfg, 12);  // different init
    bool differed = false;
    for (const auto& [name, entry] : a.bank().entries())
        if (entry.tensor.values() != b.bank().at(name).values()) differed = true;
    CHECK(differed);

    lvit::apply_checkpoint(lvit::decode_checkpoint(bytes), b.bank());
    for (const auto& [name, entry] : a.bank().entries())
        CHECK(entry.tensor.values() == b.bank().at(name).values());
}

TEST_CASE("checkpoint names must match the model enumeration", "[persist]") {
    LViTConfig cfg = LViTConfig::mini();
    LViT<float> model(cfg, 1);
    auto ck = lvit::make_checkpoint("{}", model.bank());
    ck.names[0] = "imposter";
    CHECK_THROWS_WITH(lvit::apply_checkpoint(ck, model.bank()), Catch::Contains("enumeration"));

    // a different architecture cannot absorb this checkpoint
    LViTConfig other = LViTConfig::mini();
    other.vit_layers_per_module = 4;
    LViT<float> deeper(other, 1);
    CHECK_THROWS_AS(lvit::apply_checkpoint(lvit::make_checkpoint("{}", model.bank()), deeper.bank()),
                    std::runtime_error);
}

TEST_CASE("config json round-trips through the serializers", "[persist]") {
    LViTConfig cfg;
    cfg.image_size = 32;
    cfg.vit_layers_per_module = 4;
    cfg.positional_embeddings = false;
    lvit::TrainConfig tc;
    tc.lr = 1e-3;
    tc.label_ratio = 0.25;
    tc.use_text = false;
    lvit::LossConfig lc;
    lc.alpha = 0.05;

    nlohmann::json j;
    j["model"] = cfg;
    j["train"] = tc;
    j["loss"] = lc;
    const auto text = j.dump();

    const auto parsed = nlohmann::json::parse(text);
    const auto cfg2 = parsed.at("model").get<LViTConfig>();
    const auto tc2 = parsed.at("train").get<lvit::TrainConfig>();
    const auto lc2 = parsed.at("loss").get<lvit::LossConfig>();
    CHECK(cfg2.image_size == 32);
    CHECK(cfg2.vit_layers_per_module == 4);
    CHECK(cfg2.positional_embeddings == false);
    CHECK(tc2.lr == 1e-3);
    CHECK(tc2.label_ratio == 0.25);
    CHECK(tc2.use_text == false);
    CHECK(lc2.alpha == 0.05);

    // serialization is deterministic (sorted keys), so dumps are stable
    nlohmann::json j2;
    j2["model"] = cfg;
    j2["train"] = tc;
    j2["loss"] = lc;
    CHECK(j2.dump() == text);
}
