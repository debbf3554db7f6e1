#pragma once

#include <array>
#include <filesystem>
#include <iomanip>

#include "lvit/pgm.hpp"
#include "lvit/tensor.hpp"
#include "lvit/text.hpp"

#include <json.hpp>

namespace lvit {
namespace synth {

enum class Split { Train, Val, Test };

inline std::string split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw std::invalid_argument("unknown split name: " + s);
}

template <typename Real>
struct SynthCase {
    std::string id;
    Tensor<Real> image;  // (1,H,W) in [0,1]
    Tensor<Real> mask;   // (1,H,W) binary
    text::StructuredReport report;
    Split split = Split::Train;
    bool labeled = true;
};

struct GenParams {
    int image_size = 64;
    int min_lesions = 1;
    int max_lesions = 3;
    double radius_lo = 0.045;  // lesion semi-axis range, fraction of image size
    double radius_hi = 0.09;
    double contrast_lo = 0.2;  // lesion brightness above lung tissue
    double contrast_hi = 0.5;
    double noise_sigma = 0.02;
};

struct ManifestCase {
    std::string id;
    std::string image_path;
    std::string mask_path;
    std::string report;
    Split split = Split::Train;
    bool labeled = true;
};

struct DatasetManifest {
    int version = 1;
    std::uint64_t seed = 0;
    int image_size = 0;
    std::vector<ManifestCase> cases;
    std::string hash;
};

// ---------------------------------------------------------------------------
// Mask analysis shared by the generator and the load-time validation
// ---------------------------------------------------------------------------

// 4-connected component labels in row-major discovery order; returns count.
template <typename Real>
int connected_components(const Tensor<Real>& mask, std::vector<int>& labels) {
    const int h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
    labels.assign(static_cast<size_t>(h) * w, -1);
    const Real* m = mask.data();
    int count = 0;
    std::vector<int> stack;
    for (int start = 0; start < h * w; ++start) {
        if (m[start] <= Real(0.5) || labels[static_cast<size_t>(start)] >= 0) continue;
        stack.push_back(start);
        labels[static_cast<size_t>(start)] = count;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            const int y = p / w, x = p % w;
            const int neigh[4] = {p - w, p + w, p - 1, p + 1};
            const bool ok[4] = {y > 0, y < h - 1, x > 0, x < w - 1};
            for (int i = 0; i < 4; ++i) {
                if (!ok[i]) continue;
                const int q = neigh[i];
                if (m[q] > Real(0.5) && labels[static_cast<size_t>(q)] < 0) {
                    labels[static_cast<size_t>(q)] = count;
                    stack.push_back(q);
                }
            }
        }
        ++count;
    }
    return count;
}

// Per-component location phrases: thirds spanned by the component's rows
// plus the centroid's side, in discovery order. A component covering all
// three thirds reads as "all".
template <typename Real>
std::vector<text::Location> derive_locations(const Tensor<Real>& mask) {
    const int h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
    std::vector<int> labels;
    const int count = connected_components(mask, labels);
    std::vector<text::Location> out(static_cast<size_t>(count));
    std::vector<std::int64_t> sum_x(static_cast<size_t>(count), 0), area(static_cast<size_t>(count), 0);
    auto third_of = [h](int row) { return row < h / 3 ? 0 : row < 2 * h / 3 ? 1 : 2; };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int l = labels[static_cast<size_t>(y) * w + x];
            if (l < 0) continue;
            auto& loc = out[static_cast<size_t>(l)];
            const int t = third_of(y);
            if (t == 0) loc.upper = true;
            if (t == 1) loc.middle = true;
            if (t == 2) loc.lower = true;
            sum_x[static_cast<size_t>(l)] += x;
            area[static_cast<size_t>(l)] += 1;
        }
    for (int l = 0; l < count; ++l) {
        const double cx = static_cast<double>(sum_x[static_cast<size_t>(l)]) / static_cast<double>(area[static_cast<size_t>(l)]);
        out[static_cast<size_t>(l)].side = cx < w / 2.0 ? text::Side::Left : text::Side::Right;
    }
    return out;
}

template <typename Real>
text::StructuredReport report_for_mask(const Tensor<Real>& mask, int max_tokens = 16) {
    const auto locations = derive_locations(mask);
    if (locations.empty()) throw std::runtime_error("report_for_mask: empty mask has no report");
    bool left = false, right = false;
    for (const auto& l : locations) (l.side == text::Side::Left ? left : right) = true;
    const auto lat = left && right ? text::Laterality::Bilateral : text::Laterality::Unilateral;
    return text::parse_report(text::render_report(lat, locations), max_tokens);
}

// ---------------------------------------------------------------------------
// Case generation
// ---------------------------------------------------------------------------

namespace detail {

struct Ellipse {
    double cx, cy, rx, ry;
    double norm(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy;
    }
    bool contains(double x, double y) const { return norm(x, y) <= 1.0; }
};

}  // namespace detail

// One synthetic chest case: two smooth lung fields on a dark background,
// one to three bright lesions confined to sampled (vertical third, side)
// grid cells inside the lungs, Gaussian pixel noise on the image only.
// The mask is the exact union of the lesion ellipses and the report is
// rendered from the mask itself.
template <typename Real>
SynthCase<Real> generate_case(std::uint64_t case_seed, const std::string& id, const GenParams& p) {
    Rng rng(case_seed);
    const int n = p.image_size;
    SynthCase<Real> out;
    out.id = id;

    const double bg = rng.uniform(0.06, 0.10);
    const double lung_base = rng.uniform(0.30, 0.38);

    detail::Ellipse lungs[2];
    for (int side = 0; side < 2; ++side) {
        const double cx = (side == 0 ? 0.30 : 0.70) + rng.uniform(-0.02, 0.02);
        lungs[side] = {cx * n, (0.50 + rng.uniform(-0.02, 0.02)) * n, (0.17 + rng.uniform(-0.01, 0.01)) * n,
                       (0.34 + rng.uniform(-0.02, 0.02)) * n};
    }

    // sample distinct (third, side) cells
    const int k = rng.range(p.min_lesions, p.max_lesions);
    std::vector<int> cells = {0, 1, 2, 3, 4, 5};  // cell = third*2 + side
    rng.shuffle(cells);
    cells.resize(static_cast<size_t>(k));

    std::vector<char> mask(static_cast<size_t>(n) * n, 0);
    std::vector<double> contrast_map(static_cast<size_t>(n) * n, 0.0);

    auto cell_of = [n](int y, int x) {
        const int third = y < n / 3 ? 0 : y < 2 * n / 3 ? 1 : 2;
        return third * 2 + (x < n / 2 ? 0 : 1);
    };

    for (const int cell : cells) {
        const int third = cell / 2, side = cell % 2;
        const detail::Ellipse& lung = lungs[side];
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            // radii shrink as attempts accumulate; tight cells (a lung tip in
            // the upper third) only admit small lesions
            const double shrink = 1.0 - 0.6 * attempt / 100.0;
            const double r_floor = std::max(p.radius_lo * n * shrink, 1.3);
            const double r_ceil = std::max(p.radius_hi * n * shrink, r_floor);
            const double rx = rng.uniform(r_floor, r_ceil);
            const double ry = rng.uniform(r_floor, r_ceil);

            // centre rows where the lesion fits vertically inside the lung
            // and the centroid stays in the target third
            const double y_lo = std::max(third * n / 3.0, lung.cy - (lung.ry - ry));
            const double y_hi = std::min((third + 1) * n / 3.0, lung.cy + (lung.ry - ry));
            if (y_lo >= y_hi) continue;
            const double cy = rng.uniform(y_lo, y_hi);

            // lung half-width at that row bounds the horizontal placement
            const double rel = (cy - lung.cy) / lung.ry;
            const double half_w = lung.rx * std::sqrt(std::max(0.0, 1.0 - rel * rel));
            const double slack = 0.9 * half_w - rx;
            if (slack <= 0) continue;
            detail::Ellipse lesion{lung.cx + rng.uniform(-slack, slack), cy, rx, ry};
            const double contrast = rng.uniform(p.contrast_lo, p.contrast_hi);

            // rasterize and verify: inside the lung, centroid in the target
            // cell, no contact with previous lesions
            std::vector<int> pixels;
            bool ok = true;
            double sx = 0, sy = 0;
            const int x0 = std::max(0, static_cast<int>(lesion.cx - lesion.rx) - 1);
            const int x1 = std::min(n - 1, static_cast<int>(lesion.cx + lesion.rx) + 1);
            const int y0 = std::max(0, static_cast<int>(lesion.cy - lesion.ry) - 1);
            const int y1 = std::min(n - 1, static_cast<int>(lesion.cy + lesion.ry) + 1);
            for (int y = y0; y <= y1 && ok; ++y)
                for (int x = x0; x <= x1 && ok; ++x) {
                    if (!lesion.contains(x + 0.5, y + 0.5)) continue;
                    if (!lung.contains(x + 0.5, y + 0.5)) {
                        ok = false;
                        break;
                    }
                    pixels.push_back(y * n + x);
                    sx += x;
                    sy += y;
                }
            if (!ok || pixels.size() < 4) continue;
            const int ccell = cell_of(static_cast<int>(sy / static_cast<double>(pixels.size())),
                                      static_cast<int>(sx / static_cast<double>(pixels.size())));
            if (ccell != cell) continue;
            // 4-neighbourhood clearance against existing lesions
            for (const int px : pixels) {
                const int y = px / n, x = px % n;
                if (mask[static_cast<size_t>(px)] || (y > 0 && mask[static_cast<size_t>(px - n)]) ||
                    (y < n - 1 && mask[static_cast<size_t>(px + n)]) || (x > 0 && mask[static_cast<size_t>(px - 1)]) ||
                    (x < n - 1 && mask[static_cast<size_t>(px + 1)])) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            for (const int px : pixels) {
                mask[static_cast<size_t>(px)] = 1;
                contrast_map[static_cast<size_t>(px)] = contrast;
            }
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("generate_case: infeasible lesion placement after 100 attempts (case " +
                                     id + ")");
    }

    // render: smooth lung edge over ~1.5 px, hard lesion edge, noise on the
    // image only, then quantization to the 16-bit storage grid
    out.image = Tensor<Real>(Shape{1, n, n});
    out.mask = Tensor<Real>(Shape{1, n, n});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const size_t i = static_cast<size_t>(y) * n + x;
            double v = bg;
            for (const auto& lung : lungs) {
                const double r = std::sqrt(lung.norm(x + 0.5, y + 0.5));
                const double edge = 1.5 / std::min(lung.rx, lung.ry);
                const double t = std::clamp((1.0 - r) / edge, 0.0, 1.0);
                v = std::max(v, bg + (lung_base - bg) * t);
            }
            if (mask[i]) v = lung_base + contrast_map[i];
            v += p.noise_sigma * rng.normal();
            const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
            out.image.data()[i] = static_cast<Real>(q) / Real(65535);
            out.mask.data()[i] = mask[i] ? Real(1) : Real(0);
        }

    out.report = report_for_mask(out.mask);
    return out;
}

// ---------------------------------------------------------------------------
// Dataset assembly, persistence and loading
// ---------------------------------------------------------------------------

inline std::uint64_t case_seed(std::uint64_t dataset_seed, int index) {
    std::uint64_t h = fnv1a64(&dataset_seed, sizeof(dataset_seed));
    h = fnv1a64(&index, sizeof(index), h);
    return mix64(h);
}

inline std::string manifest_digest(const DatasetManifest& m) {
    std::ostringstream os;
    os << m.version << "|" << m.seed << "|" << m.image_size;
    for (const auto& c : m.cases)
        os << "|" << c.id << ";" << c.image_path << ";" << c.mask_path << ";" << c.report << ";"
           << split_name(c.split) << ";" << (c.labeled ? 1 : 0);
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(os.str());
    return hex.str();
}

template <typename Real>
struct Dataset {
    DatasetManifest manifest;
    std::vector<SynthCase<Real>> cases;  // manifest order

    int image_size() const { return manifest.image_size; }

    std::vector<size_t> indices(Split s) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < cases.size(); ++i)
            if (cases[i].split == s) out.push_back(i);
        return out;
    }

    std::vector<size_t> labeled_train() const {
        std::vector<size_t> out;
        for (size_t i = 0; i < cases.size(); ++i)
            if (cases[i].split == Split::Train && cases[i].labeled) out.push_back(i);
        return out;
    }

    std::vector<size_t> unlabeled_train() const {
        std::vector<size_t> out;
        for (size_t i = 0; i < cases.size(); ++i)
            if (cases[i].split == Split::Train && !cases[i].labeled) out.push_back(i);
        return out;
    }

    // Re-mark the labeled flags: the first ceil(ratio * |train|) train cases
    // in manifest order become the labeled subset, so smaller ratios are
    // nested inside larger ones.
    void override_label_ratio(double ratio) {
        if (ratio <= 0.0 || ratio > 1.0) throw std::invalid_argument("label ratio must be in (0, 1]");
        const auto train = indices(Split::Train);
        const auto want = static_cast<size_t>(std::ceil(ratio * static_cast<double>(train.size())));
        for (size_t i = 0; i < train.size(); ++i) cases[train[i]].labeled = i < want;
    }
};

// Deterministic dataset: cases generated from per-case seeds, split by a
// shuffled index, the first ceil(label_ratio * n_train) shuffled train cases
// flagged labeled. Images and masks are written as P5 files next to the
// manifest.
template <typename Real>
Dataset<Real> generate_dataset(std::uint64_t seed, int n_cases, const std::array<double, 3>& split_ratios,
                               double label_ratio, const GenParams& params, const std::string& out_dir) {
    if (n_cases < 10) throw std::invalid_argument("generate_dataset: need at least 10 cases");
    const double rsum = split_ratios[0] + split_ratios[1] + split_ratios[2];
    if (std::abs(rsum - 1.0) > 1e-9) throw std::invalid_argument("generate_dataset: split ratios must sum to 1");
    if (label_ratio <= 0.0 || label_ratio > 1.0)
        throw std::invalid_argument("generate_dataset: label ratio must be in (0, 1]");

    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    const int n_train = static_cast<int>(std::llround(split_ratios[0] * n_cases));
    const int n_val = static_cast<int>(std::llround(split_ratios[1] * n_cases));

    std::vector<int> order(static_cast<size_t>(n_cases));
    for (int i = 0; i < n_cases; ++i) order[static_cast<size_t>(i)] = i;
    Rng shuffle_rng(seed, "split-shuffle");
    shuffle_rng.shuffle(order);

    std::vector<Split> splits(static_cast<size_t>(n_cases), Split::Test);
    std::vector<bool> labeled(static_cast<size_t>(n_cases), false);
    const auto n_labeled = static_cast<int>(std::ceil(label_ratio * n_train));
    for (int pos = 0; pos < n_cases; ++pos) {
        const int idx = order[static_cast<size_t>(pos)];
        if (pos < n_train) {
            splits[static_cast<size_t>(idx)] = Split::Train;
            labeled[static_cast<size_t>(idx)] = pos < n_labeled;
        } else if (pos < n_train + n_val) {
            splits[static_cast<size_t>(idx)] = Split::Val;
        }
    }

    Dataset<Real> ds;
    ds.manifest.version = 1;
    ds.manifest.seed = seed;
    ds.manifest.image_size = params.image_size;

    for (int i = 0; i < n_cases; ++i) {
        std::ostringstream idos;
        idos << "case_" << std::setw(5) << std::setfill('0') << i;
        auto c = generate_case<Real>(case_seed(seed, i), idos.str(), params);
        c.split = splits[static_cast<size_t>(i)];
        c.labeled = c.split == Split::Train && labeled[static_cast<size_t>(i)];

        const std::string img_rel = "images/" + c.id + ".pgm";
        const std::string mask_rel = "masks/" + c.id + ".pgm";
        pgm::Image img{params.image_size, params.image_size, 65535, {}};
        img.samples.resize(c.image.values().size());
        for (size_t j = 0; j < img.samples.size(); ++j)
            img.samples[j] = static_cast<std::uint16_t>(std::lround(static_cast<double>(c.image.data()[j]) * 65535.0));
        pgm::write((fs::path(out_dir) / img_rel).string(), img);

        pgm::Image msk{params.image_size, params.image_size, 1, {}};
        msk.samples.resize(c.mask.values().size());
        for (size_t j = 0; j < msk.samples.size(); ++j)
            msk.samples[j] = c.mask.data()[j] > Real(0.5) ? 1 : 0;
        pgm::write((fs::path(out_dir) / mask_rel).string(), msk);

        ds.manifest.cases.push_back(
            ManifestCase{c.id, img_rel, mask_rel, c.report.raw, c.split, c.labeled});
        ds.cases.push_back(std::move(c));
    }

    ds.manifest.hash = manifest_digest(ds.manifest);

    nlohmann::json j;
    j["version"] = ds.manifest.version;
    j["seed"] = ds.manifest.seed;
    j["image_size"] = ds.manifest.image_size;
    j["hash"] = ds.manifest.hash;
    auto& arr = j["cases"] = nlohmann::json::array();
    for (const auto& c : ds.manifest.cases)
        arr.push_back({{"id", c.id},
                       {"image", c.image_path},
                       {"mask", c.mask_path},
                       {"report", c.report},
                       {"split", split_name(c.split)},
                       {"labeled", c.labeled}});
    std::ofstream mf(fs::path(out_dir) / "manifest.json");
    mf << j.dump(2) << "\n";
    if (!mf) throw std::runtime_error("generate_dataset: cannot write manifest");
    return ds;
}

// SynthCase invariants: component count equals the reported lesion count,
// each derived location matches the reported phrase, laterality matches the
// sides covered.
template <typename Real>
void validate_case(const SynthCase<Real>& c) {
    const auto derived = derive_locations(c.mask);
    if (static_cast<int>(derived.size()) != c.report.lesion_count)
        throw std::runtime_error("case " + c.id + ": mask has " + std::to_string(derived.size()) +
                                 " components but the report says " + std::to_string(c.report.lesion_count));
    if (derived.size() != c.report.locations.size())
        throw std::runtime_error("case " + c.id + ": location phrase count mismatch");
    for (size_t i = 0; i < derived.size(); ++i)
        if (!(derived[i] == c.report.locations[i]))
            throw std::runtime_error("case " + c.id + ": location phrase " + std::to_string(i) +
                                     " does not match the mask");
    bool left = false, right = false;
    for (const auto& l : derived) (l.side == text::Side::Left ? left : right) = true;
    const bool bilateral = left && right;
    if (bilateral != (c.report.laterality == text::Laterality::Bilateral))
        throw std::runtime_error("case " + c.id + ": laterality inconsistent with component sides");
}

// Load and re-validate: the stored hash must match the recomputed digest and
// every case must still satisfy the mask/report consistency invariants.
template <typename Real>
Dataset<Real> load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error("load_dataset: cannot open manifest: " + manifest_path);
    nlohmann::json j;
    mf >> j;

    Dataset<Real> ds;
    ds.manifest.version = j.at("version").get<int>();
    ds.manifest.seed = j.at("seed").get<std::uint64_t>();
    ds.manifest.image_size = j.at("image_size").get<int>();
    for (const auto& cj : j.at("cases"))
        ds.manifest.cases.push_back(ManifestCase{cj.at("id").get<std::string>(), cj.at("image").get<std::string>(),
                                                 cj.at("mask").get<std::string>(),
                                                 cj.at("report").get<std::string>(),
                                                 split_from_name(cj.at("split").get<std::string>()),
                                                 cj.at("labeled").get<bool>()});
    ds.manifest.hash = manifest_digest(ds.manifest);
    if (j.at("hash").get<std::string>() != ds.manifest.hash)
        throw std::runtime_error("load_dataset: manifest hash mismatch (file edited or corrupted)");

    const fs::path base = fs::path(manifest_path).parent_path();
    const int n = ds.manifest.image_size;
    for (const auto& mc : ds.manifest.cases) {
        SynthCase<Real> c;
        c.id = mc.id;
        c.split = mc.split;
        c.labeled = mc.labeled;

        const auto img = pgm::read((base / mc.image_path).string());
        if (img.width != n || img.height != n || img.maxval != 65535)
            throw std::runtime_error("load_dataset: unexpected image geometry for case " + mc.id);
        c.image = Tensor<Real>(Shape{1, n, n});
        for (size_t i = 0; i < img.samples.size(); ++i)
            c.image.data()[i] = static_cast<Real>(img.samples[i]) / Real(65535);

        const auto msk = pgm::read((base / mc.mask_path).string());
        if (msk.width != n || msk.height != n || msk.maxval != 1)
            throw std::runtime_error("load_dataset: unexpected mask geometry for case " + mc.id);
        c.mask = Tensor<Real>(Shape{1, n, n});
        for (size_t i = 0; i < msk.samples.size(); ++i) c.mask.data()[i] = msk.samples[i] ? Real(1) : Real(0);

        c.report = text::parse_report(mc.report);
        validate_case(c);
        ds.cases.push_back(std::move(c));
    }
    return ds;
}

}  // namespace synth
}  // namespace lvit
