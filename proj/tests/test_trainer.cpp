#include <catch2/catch.hpp>

#include <filesystem>

#include "lvit/trainer.hpp"

using lvit::LViT;
using lvit::LViTConfig;
using lvit::TrainConfig;
using lvit::Trainer;
using namespace lvit::synth;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("lvit_train_" + std::to_string(lvit::mix64(
                   std::chrono::steady_clock::now().time_since_epoch().count())));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// A small 32x32 dataset keeps these loops fast while leaving the lesion
// geometry feasible in every grid cell.
template <typename Real>
Dataset<Real> tiny_dataset(const TempDir& tmp, std::uint64_t seed, int n, double label_ratio) {
    GenParams params;
    params.image_size = 32;
    params.max_lesions = 2;
    return generate_dataset<Real>(seed, n, {0.6, 0.2, 0.2}, label_ratio, params, tmp.path.string());
}

LViTConfig tiny_config() {
    LViTConfig cfg = LViTConfig::mini();  // 2 levels, 4/8 channels
    cfg.image_size = 32;
    return cfg;
}

}  // namespace

TEST_CASE("full label ratio skips the pseudo-label phases", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<double>(tmp, 3, 12, 1.0);
    LViT<double> model(tiny_config(), 5);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.use_text = true;
    Trainer<double> trainer(model, data, tc);
    const auto rec = trainer.run_epoch(1);
    CHECK(trainer.store().size() == 0);  // no unlabeled cases, no store entries
    CHECK(rec.unsup_loss == 0.0);
    CHECK(rec.sup_loss > 0.0);
}

TEST_CASE("store iteration counters equal the epoch index", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<double>(tmp, 4, 14, 0.3);
    LViT<double> model(tiny_config(), 6);
    TrainConfig tc;
    tc.batch_size = 4;
    Trainer<double> trainer(model, data, tc);
    for (int epoch = 1; epoch <= 3; ++epoch) {
        trainer.run_epoch(epoch);
        for (const auto& [id, entry] : trainer.store().entries()) CHECK(entry.iteration == epoch);
    }
    CHECK(trainer.store().size() == data.unlabeled_train().size());
}

TEST_CASE("warm-up epochs keep the pseudo-label phases dormant", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<double>(tmp, 12, 14, 0.3);
    LViT<double> model(tiny_config(), 13);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.warmup_epochs = 2;
    Trainer<double> trainer(model, data, tc);
    auto r1 = trainer.run_epoch(1);
    CHECK(trainer.store().size() == 0);
    CHECK(r1.unsup_loss == 0.0);
    trainer.run_epoch(2);
    CHECK(trainer.store().size() == 0);
    auto r3 = trainer.run_epoch(3);
    CHECK(trainer.store().size() == data.unlabeled_train().size());
    CHECK(r3.unsup_loss > 0.0);
    for (const auto& [id, entry] : trainer.store().entries()) CHECK(entry.iteration == 1);
}

TEST_CASE("an empty labeled split is rejected", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<double>(tmp, 5, 12, 1.0);
    for (auto& c : data.cases) c.labeled = false;
    LViT<double> model(tiny_config(), 7);
    CHECK_THROWS_AS(Trainer<double>(model, data, TrainConfig{}), std::invalid_argument);
}

TEST_CASE("identical seeds give bit-identical histories", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<double>(tmp, 6, 14, 0.5);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_epochs = 2;
    tc.patience = 5;
    tc.seed = 1234;

    auto run = [&]() {
        LViT<double> model(tiny_config(), 99);
        Trainer<double> trainer(model, data, tc);
        return trainer.fit();
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].sup_loss == b.history[i].sup_loss);  // exact, 64-bit
        CHECK(a.history[i].unsup_loss == b.history[i].unsup_loss);
        CHECK(a.history[i].val_dice == b.history[i].val_dice);
        CHECK(a.history[i].val_miou == b.history[i].val_miou);
    }
}

TEST_CASE("text-free training never touches the text pipeline", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<double>(tmp, 7, 14, 0.5);
    LViT<double> model(tiny_config(), 8);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.use_text = false;
    tc.max_epochs = 2;
    Trainer<double> trainer(model, data, tc);
    const auto before = lvit::text::ops_count().load();
    trainer.run_epoch(1);
    trainer.run_epoch(2);
    CHECK(lvit::text::ops_count().load() == before);
}

TEST_CASE("early stopping with patience one stops a frozen model after two epochs", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<double>(tmp, 8, 12, 1.0);
    LViT<double> model(tiny_config(), 9);
    // freeze the observable model: zero head + zero learning rate pin the
    // validation Dice, so no epoch can improve on the first
    for (auto& v : model.bank().at("head.weight").values()) v = 0.0;
    for (auto& v : model.bank().at("head.bias").values()) v = 0.0;
    TrainConfig tc;
    tc.batch_size = 4;
    tc.patience = 1;
    tc.max_epochs = 50;
    tc.lr = 0.0;
    Trainer<double> trainer(model, data, tc);
    const auto result = trainer.fit();
    CHECK(result.history.size() == 2);
    CHECK(result.best_epoch == 1);
}

TEST_CASE("fit returns the best-epoch parameters, not the last", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<double>(tmp, 9, 14, 1.0);
    LViT<double> model(tiny_config(), 10);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_epochs = 4;
    tc.patience = 10;
    tc.lr = 3e-3;
    Trainer<double> trainer(model, data, tc);
    const auto result = trainer.fit();

    double best = -1;
    for (const auto& rec : result.history) best = std::max(best, rec.val_dice);
    CHECK(result.best_val_dice == Approx(best));
    CHECK(result.best_val_dice >= result.history.back().val_dice);

    // the model now holds the snapshot: re-evaluating reproduces the best dice
    const auto [dice, iou] = trainer.evaluate(Split::Val);
    CHECK(dice == Approx(result.best_val_dice).margin(1e-12));
}

TEST_CASE("a short supervised run reduces the training loss", "[trainer]") {
    TempDir tmp;
    auto data = tiny_dataset<float>(tmp, 10, 12, 1.0);
    LViT<float> model(tiny_config(), 11);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.lr = 3e-3;
    Trainer<float> trainer(model, data, tc);
    const auto first = trainer.run_epoch(1);
    lvit::EpochRecord last;
    for (int e = 2; e <= 8; ++e) last = trainer.run_epoch(e);
    CHECK(last.sup_loss < first.sup_loss);
}
