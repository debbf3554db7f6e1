#pragma once

#include "lvit/tensor.hpp"

namespace lvit {

struct LossConfig {
    double alpha = 0.1;     // weight of the language-vision term; 0 for labeled batches
    double smooth = 1e-5;   // Dice smoothing, defines the empty-mask case
    double ce_clamp = 1e-7; // probability clamp before the logs

    void validate() const {
        if (alpha < 0.0) throw std::invalid_argument("loss config: alpha must be >= 0");
        if (smooth <= 0.0) throw std::invalid_argument("loss config: smooth must be > 0");
        if (ce_clamp <= 0.0 || ce_clamp >= 0.5) throw std::invalid_argument("loss config: bad ce_clamp");
    }
};

namespace detail {

template <typename Real>
void check_same_shape(const Tensor<Real>& p, const Tensor<Real>& y, const char* what) {
    if (p.shape() != y.shape())
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(p.shape()) + " vs " +
                                    shape_str(y.shape()));
}

}  // namespace detail

// Soft Dice loss over (N,C,H,W): 1 - mean over batch and classes of
// (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth), sums over pixels.
// Soft targets are allowed, so pseudo-labels can be used directly.
template <typename Real>
Tensor<Real> dice_loss(const Tensor<Real>& p, const Tensor<Real>& y, const LossConfig& cfg = {}) {
    detail::check_same_shape(p, y, "dice_loss");
    const Real smooth = static_cast<Real>(cfg.smooth);
    std::vector<int> spatial;
    for (int d = 2; d < p.rank(); ++d) spatial.push_back(d);
    if (spatial.empty()) spatial.push_back(p.rank() - 1);
    auto inter = sum_axes(mul(p, y), spatial);
    auto denom = add(sum_axes(p, spatial), sum_axes(y, spatial));
    auto dice = div(add_scalar(mul_scalar(inter, Real(2)), smooth), add_scalar(denom, smooth));
    return affine(mean_all(dice), Real(-1), Real(1));
}

// Binary cross-entropy, two-term form for a single foreground class; the
// prediction is clamped away from {0,1} before the logs.
template <typename Real>
Tensor<Real> ce_loss(const Tensor<Real>& p, const Tensor<Real>& y, const LossConfig& cfg = {}) {
    detail::check_same_shape(p, y, "ce_loss");
    const Real lo = static_cast<Real>(cfg.ce_clamp);
    auto pc = clamp(p, lo, Real(1) - lo);
    auto pos = mul(y, log(pc));
    auto neg_term = mul(affine(y, Real(-1), Real(1)), log(affine(pc, Real(-1), Real(1))));
    return neg(mean_all(add(pos, neg_term)));
}

// L_sup = (L_Dice + L_CE) / 2
template <typename Real>
Tensor<Real> sup_loss(const Tensor<Real>& p, const Tensor<Real>& y, const LossConfig& cfg = {}) {
    return mul_scalar(add(dice_loss(p, y, cfg), ce_loss(p, y, cfg)), Real(0.5));
}

// Language-vision loss: 1 - cosine(flat(pseudo), flat(mask)) in [0, 2].
// A zero-norm operand makes the similarity 0 by convention, so the loss is 1.
template <typename Real>
Tensor<Real> lv_loss(const Tensor<Real>& pseudo, const Tensor<Real>& contrastive_mask) {
    detail::check_same_shape(pseudo, contrastive_mask, "lv_loss");
    const int n = static_cast<int>(pseudo.size());
    auto a = reshape(pseudo, {n});
    auto b = reshape(contrastive_mask, {n});
    auto dot = sum_all(mul(a, b));
    auto na2 = sum_all(mul(a, a));
    auto nb2 = sum_all(mul(b, b));
    if (std::sqrt(static_cast<double>(na2.item())) < 1e-12 ||
        std::sqrt(static_cast<double>(nb2.item())) < 1e-12)
        return Tensor<Real>::scalar(Real(1));
    auto sim = div(dot, mul(sqrt(na2), sqrt(nb2)));
    return affine(sim, Real(-1), Real(1));
}

// L_unsup = (L_Dice + L_CE)/2 + alpha * L_LV, targets come from the
// pseudo-label store.
template <typename Real>
Tensor<Real> unsup_loss(const Tensor<Real>& p, const Tensor<Real>& pseudo_target, const Tensor<Real>& lv,
                        const LossConfig& cfg) {
    auto base = sup_loss(p, pseudo_target, cfg);
    return add(base, mul_scalar(lv, static_cast<Real>(cfg.alpha)));
}

// Overlap metrics on binary masks (after 0.5 thresholding upstream).
// Both-empty inputs score 1 by convention.
template <typename Real>
double dice_score(const Tensor<Real>& p_bin, const Tensor<Real>& y_bin) {
    detail::check_same_shape(p_bin, y_bin, "dice_score");
    std::int64_t inter = 0, np = 0, ny = 0;
    for (std::int64_t i = 0; i < p_bin.size(); ++i) {
        const bool a = p_bin.data()[i] > Real(0.5);
        const bool b = y_bin.data()[i] > Real(0.5);
        inter += a && b;
        np += a;
        ny += b;
    }
    if (np + ny == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ny);
}

template <typename Real>
double miou(const Tensor<Real>& p_bin, const Tensor<Real>& y_bin) {
    detail::check_same_shape(p_bin, y_bin, "miou");
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < p_bin.size(); ++i) {
        const bool a = p_bin.data()[i] > Real(0.5);
        const bool b = y_bin.data()[i] > Real(0.5);
        inter += a && b;
        uni += a || b;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace lvit
