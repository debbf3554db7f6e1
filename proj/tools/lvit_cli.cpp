// Command-line surface: dataset generation, training, evaluation, saliency
// maps and the gradient-fidelity harness, all reproducible from a single
// seed.

#include <chrono>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "lvit/grad_harness.hpp"
#include "lvit/persist.hpp"
#include "lvit/synth.hpp"
#include "lvit/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct MergedConfig {
    lvit::LViTConfig model;
    lvit::TrainConfig train;
    lvit::LossConfig loss;
};

MergedConfig load_config_file(const std::string& path) {
    MergedConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file: " + path);
    json j;
    f >> j;
    if (j.contains("model")) cfg.model = j.at("model").get<lvit::LViTConfig>();
    if (j.contains("train")) cfg.train = j.at("train").get<lvit::TrainConfig>();
    if (j.contains("loss")) cfg.loss = j.at("loss").get<lvit::LossConfig>();
    return cfg;
}

json config_json(const MergedConfig& cfg) {
    json j;
    j["model"] = cfg.model;
    j["train"] = cfg.train;
    j["loss"] = cfg.loss;
    return j;
}

int vit_layers_for_size(const std::string& size) {
    if (size == "T") return 1;
    if (size == "S") return 4;
    if (size == "B") return 6;
    throw std::runtime_error("unknown model size '" + size + "', expected T, S or B");
}

void write_heatmap_pgm(const std::string& path, const lvit::Tensor<float>& map) {
    lvit::pgm::Image img{map.dim(1), map.dim(0), 65535, {}};
    img.samples.resize(map.values().size());
    for (size_t i = 0; i < img.samples.size(); ++i)
        img.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(
            static_cast<double>(map.data()[i]), 0.0, 1.0) * 65535.0));
    lvit::pgm::write(path, img);
}

// Pads a case's stored tokens to the model's max_tokens.
std::vector<int> padded_tokens(const lvit::text::StructuredReport& rep, int max_tokens) {
    std::vector<int> out(static_cast<size_t>(max_tokens), lvit::text::kPadId);
    for (size_t i = 0; i < rep.tokens.size() && i < static_cast<size_t>(max_tokens); ++i) out[i] = rep.tokens[i];
    return out;
}

// Mean per-case metrics of a model over one split.
std::pair<double, double> evaluate_split(lvit::LViT<float>& model, const lvit::synth::Dataset<float>& data,
                                         lvit::synth::Split split, bool use_text) {
    const auto idx = data.indices(split);
    if (idx.empty()) throw std::runtime_error("split has no cases");
    double dice = 0, iou = 0;
    for (const size_t i : idx) {
        const auto& c = data.cases[i];
        const int n = data.image_size();
        lvit::Tensor<float> img(lvit::Shape{1, 1, n, n});
        std::copy(c.image.values().begin(), c.image.values().end(), img.data());
        lvit::LViT<float>::TokenBatch toks;
        const lvit::LViT<float>::TokenBatch* toks_ptr = nullptr;
        if (use_text) {
            toks.push_back(padded_tokens(c.report, model.config().max_tokens));
            toks_ptr = &toks;
        }
        auto p = model.forward(img, toks_ptr, lvit::RunMode::Eval);
        lvit::Tensor<float> bin(lvit::Shape{1, n, n});
        for (std::int64_t k = 0; k < bin.size(); ++k) bin.data()[k] = p.data()[k] > 0.5f ? 1.0f : 0.0f;
        dice += lvit::dice_score(bin, c.mask);
        iou += lvit::miou(bin, c.mask);
    }
    return {dice / static_cast<double>(idx.size()), iou / static_cast<double>(idx.size())};
}

int cmd_gen_data(std::uint64_t seed, int count, int image_size, double label_ratio, const std::string& out) {
    lvit::synth::GenParams params;
    params.image_size = image_size;
    auto ds = lvit::synth::generate_dataset<float>(seed, count, {0.6, 0.2, 0.2}, label_ratio, params, out);
    std::cout << "manifest " << (fs::path(out) / "manifest.json").string() << "\n";
    std::cout << "cases " << ds.cases.size() << " train " << ds.indices(lvit::synth::Split::Train).size()
              << " val " << ds.indices(lvit::synth::Split::Val).size() << " test "
              << ds.indices(lvit::synth::Split::Test).size() << " labeled " << ds.labeled_train().size() << "\n";
    std::cout << "hash " << ds.manifest.hash << "\n";
    return 0;
}

int cmd_train(const std::string& data_path, const std::string& config_path, const std::string& model_size,
              bool no_text, double label_ratio, std::int64_t seed, const std::string& out) {
    const auto t0 = std::chrono::steady_clock::now();
    MergedConfig cfg = load_config_file(config_path);
    if (!model_size.empty()) cfg.model.vit_layers_per_module = vit_layers_for_size(model_size);
    if (no_text) cfg.train.use_text = false;
    if (seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed);
    if (label_ratio > 0) cfg.train.label_ratio = label_ratio;

    auto data = lvit::synth::load_dataset<float>(data_path);
    cfg.model.image_size = data.image_size();
    if (label_ratio > 0) data.override_label_ratio(label_ratio);
    cfg.model.validate();
    cfg.train.validate();

    lvit::LViT<float> model(cfg.model, cfg.train.seed);
    lvit::Trainer<float> trainer(model, data, cfg.train, cfg.loss);
    auto result = trainer.fit();

    // the model now holds the best-epoch parameters
    const auto [test_dice, test_miou] = trainer.evaluate(lvit::synth::Split::Test);

    fs::create_directories(out);
    const auto ckpt_path = (fs::path(out) / "checkpoint.lvit").string();
    lvit::write_file(ckpt_path,
                     lvit::encode_checkpoint(lvit::make_checkpoint(config_json(cfg).dump(), model.bank())));

    {
        std::ofstream hist(fs::path(out) / "history.jsonl");
        for (const auto& rec : result.history) {
            json hj = {{"epoch", rec.epoch},       {"sup_loss", rec.sup_loss}, {"unsup_loss", rec.unsup_loss},
                       {"val_dice", rec.val_dice}, {"val_miou", rec.val_miou}};
            hist << hj.dump() << "\n";
        }
    }

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json report = config_json(cfg);
    report["dataset"] = {{"manifest", data_path}, {"hash", data.manifest.hash}};
    report["history"] = json::array();
    for (const auto& rec : result.history)
        report["history"].push_back({{"epoch", rec.epoch},
                                     {"sup_loss", rec.sup_loss},
                                     {"unsup_loss", rec.unsup_loss},
                                     {"val_dice", rec.val_dice},
                                     {"val_miou", rec.val_miou}});
    report["best_epoch"] = result.best_epoch;
    report["best_val_dice"] = result.best_val_dice;
    report["test_dice"] = test_dice;
    report["test_miou"] = test_miou;
    report["param_count"] = model.bank().parameter_count(true);
    report["wall_clock_seconds"] = wall;
    report["seed"] = cfg.train.seed;
    report["text_used"] = cfg.train.use_text;
    std::ofstream(fs::path(out) / "report.json") << report.dump(2) << "\n";

    std::cout << "params " << model.bank().parameter_count(true) << "\n";
    std::cout << "best_epoch " << result.best_epoch << " best_val_dice " << result.best_val_dice << "\n";
    std::cout << "test_dice " << test_dice << " test_miou " << test_miou << "\n";
    std::cout << "checkpoint " << ckpt_path << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& split_name,
             std::string report_path) {
    const auto ck = lvit::decode_checkpoint(lvit::read_file(ckpt_path));
    const auto cj = json::parse(ck.config_json);
    const auto mcfg = cj.at("model").get<lvit::LViTConfig>();
    const bool use_text = cj.contains("train") ? cj.at("train").get<lvit::TrainConfig>().use_text : true;

    lvit::LViT<float> model(mcfg, 0);
    lvit::apply_checkpoint(ck, model.bank());
    auto data = lvit::synth::load_dataset<float>(data_path);
    if (data.image_size() != mcfg.image_size)
        throw std::runtime_error("dataset image size does not match the checkpoint configuration");

    const auto split = lvit::synth::split_from_name(split_name);
    const auto [dice, iou] = evaluate_split(model, data, split, use_text);
    std::cout << "split " << split_name << " dice " << dice << " miou " << iou << "\n";

    if (report_path.empty()) report_path = ckpt_path + ".eval_" + split_name + ".json";
    json rj = {{"checkpoint", ckpt_path}, {"dataset", data_path}, {"split", split_name},
               {"dice", dice},            {"miou", iou},          {"text_used", use_text}};
    std::ofstream(report_path) << rj.dump(2) << "\n";
    return 0;
}

int cmd_saliency(const std::string& ckpt_path, const std::string& data_path, const std::string& case_id,
                 const std::string& layer, const std::string& out) {
    const auto ck = lvit::decode_checkpoint(lvit::read_file(ckpt_path));
    const auto cj = json::parse(ck.config_json);
    const auto mcfg = cj.at("model").get<lvit::LViTConfig>();
    const bool use_text = cj.contains("train") ? cj.at("train").get<lvit::TrainConfig>().use_text : true;

    lvit::LViT<float> model(mcfg, 0);
    model.validate_layer_name(layer);
    lvit::apply_checkpoint(ck, model.bank());
    auto data = lvit::synth::load_dataset<float>(data_path);

    const lvit::synth::SynthCase<float>* found = nullptr;
    for (const auto& c : data.cases)
        if (c.id == case_id) found = &c;
    if (!found) throw std::runtime_error("case id not found in dataset: " + case_id);

    const int n = data.image_size();
    lvit::Tensor<float> img(lvit::Shape{1, 1, n, n});
    std::copy(found->image.values().begin(), found->image.values().end(), img.data());
    lvit::LViT<float>::TokenBatch toks;
    const lvit::LViT<float>::TokenBatch* toks_ptr = nullptr;
    if (use_text) {
        toks.push_back(padded_tokens(found->report, mcfg.max_tokens));
        toks_ptr = &toks;
    }
    const auto map = model.saliency(img, toks_ptr, layer);
    write_heatmap_pgm(out, map);
    std::cout << "saliency " << out << " layer " << layer << " case " << case_id << "\n";
    return 0;
}

int cmd_grad_check(int precision, int max_coords, int image_size) {
    lvit::LViTConfig cfg = lvit::LViTConfig::mini();
    cfg.image_size = image_size;
    cfg.validate();
    const double tol = precision == 64 ? 1e-6 : 1e-3;
    const double atol = precision == 64 ? 1e-9 : 1e-6;
    lvit::GradCheckReport report;
    if (precision == 64) {
        report = lvit::model_grad_check<double>(cfg, 2024, 1e-6, atol, max_coords);
    } else if (precision == 32) {
        report = lvit::model_grad_check<float>(cfg, 2024, 1e-6, atol, max_coords);
    } else {
        throw std::runtime_error("precision must be 32 or 64");
    }

    std::cout << "gradient check, " << precision << "-bit, tolerance " << tol << "\n";
    for (const auto& row : report.rows)
        std::cout << (row.max_rel_error < tol ? "  ok   " : "  FAIL ") << row.name << "  coords "
                  << row.coords_checked << "  max_rel_err " << row.max_rel_error << "\n";
    std::cout << "kink_margin " << report.kink_margin << " draws " << report.data_draws << "\n";
    std::cout << "max_rel_error " << report.max_rel_error << "\n";
    std::cout << "runtime_seconds " << report.runtime_seconds << "\n";
    std::cout << (report.passes(tol) ? "PASS" : "FAIL") << "\n";
    return report.passes(tol) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text-augmented lung segmentation at desk scale"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::uint64_t g_seed = 42;
    int g_count = 100;
    int g_size = 64;
    double g_ratio = 1.0;
    std::string g_out;
    gen->add_option("--seed", g_seed, "dataset seed");
    gen->add_option("--count", g_count, "number of cases")->required();
    gen->add_option("--image-size", g_size, "square image size");
    gen->add_option("--label-ratio", g_ratio, "fraction of train cases flagged labeled");
    gen->add_option("--out", g_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train a model on a generated dataset");
    std::string t_data, t_config, t_size, t_out;
    bool t_no_text = false;
    double t_ratio = 0.0;
    std::int64_t t_seed = -1;
    train->add_option("--data", t_data, "path to manifest.json")->required();
    train->add_option("--config", t_config, "JSON config file (flags override it)");
    train->add_option("--model-size", t_size, "T, S or B (1/4/6 transformer layers)");
    auto* text_flag = train->add_flag("--text", "use text annotations (default)");
    train->add_flag("--no-text", t_no_text, "train without text annotations")->excludes(text_flag);
    train->add_option("--label-ratio", t_ratio, "override the labeled fraction of the train split");
    train->add_option("--seed", t_seed, "training seed (init, shuffles)");
    train->add_option("--out", t_out, "output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    std::string e_ckpt, e_data, e_split = "test", e_report;
    eval->add_option("--checkpoint", e_ckpt, "checkpoint file")->required();
    eval->add_option("--data", e_data, "path to manifest.json")->required();
    eval->add_option("--split", e_split, "train, val or test");
    eval->add_option("--report", e_report, "report file path");

    // saliency
    auto* sal = app.add_subcommand("saliency", "write a gradient activation heatmap");
    std::string s_ckpt, s_data, s_case, s_layer = "down_vit.1", s_out;
    sal->add_option("--checkpoint", s_ckpt, "checkpoint file")->required();
    sal->add_option("--data", s_data, "path to manifest.json")->required();
    sal->add_option("--case-id", s_case, "case id from the manifest")->required();
    sal->add_option("--layer", s_layer, "down_cnn.1..levels or down_vit.1");
    sal->add_option("--out", s_out, "output P5 file")->required();

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient fidelity harness");
    int c_precision = 64;
    int c_max_coords = 0;
    int c_size = 16;
    gc->add_flag("--config-mini", "use the built-in mini configuration (always on)");
    gc->add_option("--precision", c_precision, "32 or 64");
    gc->add_option("--max-coords", c_max_coords, "coordinates per parameter group, 0 = all");
    gc->add_option("--image-size", c_size, "input size of the mini configuration");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(g_seed, g_count, g_size, g_ratio, g_out);
        if (train->parsed()) return cmd_train(t_data, t_config, t_size, t_no_text, t_ratio, t_seed, t_out);
        if (eval->parsed()) return cmd_eval(e_ckpt, e_data, e_split, e_report);
        if (sal->parsed()) return cmd_saliency(s_ckpt, s_data, s_case, s_layer, s_out);
        if (gc->parsed()) return cmd_grad_check(c_precision, c_max_coords, c_size);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
