#pragma once

#include <atomic>
#include <chrono>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "lvit/losses.hpp"
#include "lvit/model.hpp"

namespace lvit {

struct GradCheckRow {
    std::string name;
    std::int64_t coords_checked = 0;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;
    double max_rel_error = 0.0;
    double runtime_seconds = 0.0;
    double kink_margin = 0.0;  // relative distance to the nearest ReLU/argmax/clamp boundary
    int data_draws = 1;        // 1 unless degenerate draws had to be rejected

    bool passes(double tol) const { return max_rel_error < tol; }
};

// Whole-model gradient fidelity check on a fixed input/target pair. The
// analytic gradients come from one backward pass at precision Real; the
// central differences are evaluated by a double-precision twin holding the
// same parameter values, so the oracle stays accurate even when the model
// under test runs in 32-bit.
//
// Per-coordinate error is |analytic - numeric| / (|analytic| + |numeric| +
// 1e-12), except that a discrepancy below `atol` counts as exact agreement:
// central differences carry round-off of about u*|loss|/eps (1e-11 at
// eps=1e-5 in double), and some parameters have mathematically zero
// gradients (a conv bias feeding BatchNorm, an attention key bias under the
// softmax shift invariance) where both sides are pure noise.
//
// The check point must be differentiable with margin: an activation sitting
// within the cross-precision wobble of a ReLU sign, a pooling argmax, or a
// clamp edge would make the subgradient choice precision-dependent and the
// comparison meaningless. Degenerate draws are rejected and redrawn
// deterministically. max_coords_per_group = 0 checks every coordinate.
template <typename Real>
GradCheckReport model_grad_check(const LViTConfig& cfg, std::uint64_t seed, double eps, double atol,
                                 int max_coords_per_group = 0, double min_kink_margin = 2e-5) {
    const auto t_start = std::chrono::steady_clock::now();

    LViT<Real> model(cfg, seed);
    LViT<double> oracle(cfg, seed);
    // the oracle holds the model's exact values (float -> double is lossless)
    for (const auto& [name, entry] : model.bank().entries()) {
        auto dst = oracle.bank().at(name);
        for (std::int64_t i = 0; i < dst.size(); ++i)
            dst.data()[i] = static_cast<double>(entry.tensor.data()[i]);
    }

    const auto rep = text::parse_report(
        "Bilateral pulmonary infection, two infected areas, upper left lung and upper right lung.",
        cfg.max_tokens);
    const std::vector<std::vector<int>> tokens = {rep.tokens, rep.tokens};

    GradCheckReport report;
    Tensor<Real> image(Shape{2, cfg.in_channels, cfg.image_size, cfg.image_size});
    Tensor<double> image_d(image.shape());
    Tensor<Real> target(image.shape());
    Tensor<double> target_d(image.shape());
    for (int draw = 0; draw < 64; ++draw) {
        Rng rng(seed, "grad-check-data." + std::to_string(draw));
        for (std::int64_t i = 0; i < image.size(); ++i) {
            const double v = rng.uniform();
            image.data()[i] = static_cast<Real>(v);
            image_d.data()[i] = v;
        }
        for (std::int64_t i = 0; i < target.size(); ++i) {
            const double v = rng.uniform() < 0.3 ? 1.0 : 0.0;
            target.data()[i] = static_cast<Real>(v);
            target_d.data()[i] = v;
        }
        KinkMargin margin;
        KinkMargin::active() = &margin;
        auto p = oracle.forward(image_d, &tokens, RunMode::GradCheck);
        sup_loss(p, target_d);
        KinkMargin::active() = nullptr;
        report.kink_margin = margin.value;
        report.data_draws = draw + 1;
        if (margin.value >= min_kink_margin) break;
        if (draw == 63)
            throw std::runtime_error("model_grad_check: no differentiable-with-margin point found");
    }

    // analytic gradients at precision Real
    {
        Tape<Real> tape;
        auto p = model.forward(image, &tokens, RunMode::GradCheck);
        tape.backward(sup_loss(p, target));
    }

    // collect the work list: (group, coordinate) pairs
    struct Item {
        size_t group;
        std::int64_t coord;
    };
    std::vector<std::string> group_names;
    std::vector<Tensor<Real>> group_grads;
    std::vector<Item> items;
    {
        Rng pick(seed, "grad-check-pick");
        size_t g = 0;
        for (const auto& [name, entry] : model.bank().entries()) {
            if (!entry.trainable) continue;
            group_names.push_back(name);
            group_grads.push_back(entry.tensor.grad());
            if (max_coords_per_group <= 0 || entry.tensor.size() <= max_coords_per_group) {
                for (std::int64_t i = 0; i < entry.tensor.size(); ++i) items.push_back({g, i});
            } else {
                for (int k = 0; k < max_coords_per_group; ++k)
                    items.push_back({g, static_cast<std::int64_t>(
                                            pick.below(static_cast<std::uint64_t>(entry.tensor.size())))});
            }
            ++g;
        }
    }

    // central differences are independent per coordinate; workers own a
    // full twin each and split the list
    const unsigned n_workers = std::max(1u, std::min(std::thread::hardware_concurrency(), 4u));
    std::vector<double> numeric(items.size());
    std::atomic<size_t> cursor{0};
    auto worker = [&](unsigned wid) {
#ifdef _OPENMP
        omp_set_num_threads(1);  // the parallelism lives at the coordinate level here
#endif
        LViT<double> twin_model(cfg, seed);
        for (const auto& [name, entry] : oracle.bank().entries()) {
            auto dst = twin_model.bank().at(name);
            dst.values() = entry.tensor.values();
        }
        std::map<std::string, Tensor<double>> twin_params;
        for (const auto& name : group_names) twin_params.emplace(name, twin_model.bank().at(name));
        (void)wid;
        while (true) {
            const size_t idx = cursor.fetch_add(1);
            if (idx >= items.size()) break;
            auto t = twin_params.at(group_names[items[idx].group]);
            const auto i = items[idx].coord;
            const double orig = t.data()[i];
            t.data()[i] = orig + eps;
            auto pp = twin_model.forward(image_d, &tokens, RunMode::GradCheck);
            const double fp = sup_loss(pp, target_d).item();
            t.data()[i] = orig - eps;
            auto pm = twin_model.forward(image_d, &tokens, RunMode::GradCheck);
            const double fm = sup_loss(pm, target_d).item();
            t.data()[i] = orig;
            numeric[idx] = (fp - fm) / (2.0 * eps);
        }
    };
    {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker, w);
        for (auto& th : pool) th.join();
    }

    report.rows.resize(group_names.size());
    for (size_t g = 0; g < group_names.size(); ++g) report.rows[g].name = group_names[g];
    for (size_t idx = 0; idx < items.size(); ++idx) {
        auto& row = report.rows[items[idx].group];
        const double a = static_cast<double>(group_grads[items[idx].group].data()[items[idx].coord]);
        const double n = numeric[idx];
        ++row.coords_checked;
        if (std::abs(a - n) <= atol) continue;
        const double err = std::abs(a - n) / (std::abs(a) + std::abs(n) + 1e-12);
        row.max_rel_error = std::max(row.max_rel_error, err);
    }
    for (const auto& row : report.rows) report.max_rel_error = std::max(report.max_rel_error, row.max_rel_error);

    report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

}  // namespace lvit
