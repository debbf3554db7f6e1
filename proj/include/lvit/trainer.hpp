#pragma once

#include "lvit/losses.hpp"
#include "lvit/model.hpp"
#include "lvit/synth.hpp"

namespace lvit {

struct TrainConfig {
    double beta = 0.99;       // EMA momentum of the pseudo-label iteration
    double lr = 3e-4;
    int batch_size = 8;
    int patience = 10;        // non-improving epochs before the early stop
    int max_epochs = 60;
    int warmup_epochs = 0;    // labeled-only epochs before the pseudo-label phases engage
    double label_ratio = 1.0;
    bool use_text = true;
    std::uint64_t seed = 42;

    void validate() const {
        if (beta <= 0.0 || beta >= 1.0) throw std::invalid_argument("train config: beta must be in (0,1)");
        if (patience < 1) throw std::invalid_argument("train config: patience must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
        if (warmup_epochs < 0) throw std::invalid_argument("train config: warmup epochs must be >= 0");
        if (label_ratio <= 0.0 || label_ratio > 1.0)
            throw std::invalid_argument("train config: label ratio must be in (0, 1]");
    }
};

// ---------------------------------------------------------------------------
// Exponential pseudo-label iteration
// ---------------------------------------------------------------------------

// One EMA step: beta * old + (1 - beta) * fresh.
template <typename Real>
Tensor<Real> epi_update(const Tensor<Real>& old_probs, const Tensor<Real>& new_pred, Real beta) {
    if (old_probs.shape() != new_pred.shape())
        throw std::invalid_argument("epi_update: shape mismatch " + shape_str(old_probs.shape()) + " vs " +
                                    shape_str(new_pred.shape()));
    Tensor<Real> out(old_probs.shape());
    for (std::int64_t i = 0; i < out.size(); ++i)
        out.data()[i] = beta * old_probs.data()[i] + (Real(1) - beta) * new_pred.data()[i];
    return out;
}

// Closed-form expansion of the iteration after n updates:
//   beta^n * P0 + (1-beta) * sum_i beta^(n-i) * P_i,   preds oldest first.
// Exists as the test oracle for the iterated update.
template <typename Real>
Tensor<Real> epi_closed_form(const Tensor<Real>& p0, const std::vector<Tensor<Real>>& preds, Real beta) {
    if (preds.empty()) throw std::invalid_argument("epi_closed_form: empty prediction list");
    const int n = static_cast<int>(preds.size());
    std::vector<double> acc(static_cast<size_t>(p0.size()));
    const double bn = std::pow(static_cast<double>(beta), n);
    for (std::int64_t i = 0; i < p0.size(); ++i) acc[static_cast<size_t>(i)] = bn * static_cast<double>(p0.data()[i]);
    for (int t = 1; t <= n; ++t) {
        const double w = (1.0 - static_cast<double>(beta)) * std::pow(static_cast<double>(beta), n - t);
        const auto& p = preds[static_cast<size_t>(t - 1)];
        if (p.shape() != p0.shape()) throw std::invalid_argument("epi_closed_form: shape mismatch in preds");
        for (std::int64_t i = 0; i < p.size(); ++i) acc[static_cast<size_t>(i)] += w * static_cast<double>(p.data()[i]);
    }
    Tensor<Real> out(p0.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<Real>(acc[static_cast<size_t>(i)]);
    return out;
}

// Per-unlabeled-case probability fields with their iteration counters. The
// first update for a case initializes the entry to the prediction itself.
template <typename Real>
class PseudoLabelStore {
public:
    struct Entry {
        Tensor<Real> probs;
        int iteration = 0;
    };

    bool contains(const std::string& id) const { return entries_.count(id) > 0; }
    size_t size() const { return entries_.size(); }

    const Entry& at(const std::string& id) const {
        auto it = entries_.find(id);
        if (it == entries_.end()) throw std::runtime_error("pseudo-label store: unknown case " + id);
        return it->second;
    }

    const Tensor<Real>& update(const std::string& id, const Tensor<Real>& new_pred, Real beta) {
        auto it = entries_.find(id);
        if (it == entries_.end()) {
            auto copy = Tensor<Real>::from(new_pred.shape(), new_pred.values());
            it = entries_.emplace(id, Entry{copy, 0}).first;
        } else {
            it->second.probs = epi_update(it->second.probs, new_pred, beta);
        }
        it->second.iteration += 1;
        return it->second.probs;
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }

private:
    std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer
// ---------------------------------------------------------------------------

template <typename Real>
struct AdamState {
    struct Moments {
        std::vector<Real> m, v;
    };
    std::map<std::string, Moments> moments;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected adaptive-moment update. The grads map must carry exactly
// the keys of params; state is created on first use and must mirror them
// afterwards.
template <typename Real>
void adam_step(std::map<std::string, Tensor<Real>>& params, const std::map<std::string, Tensor<Real>>& grads,
               AdamState<Real>& state, Real lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads key mismatch");
    for (const auto& [name, p] : params)
        if (!grads.count(name)) throw std::invalid_argument("adam_step: missing gradient for " + name);
    if (!state.moments.empty() && state.moments.size() != params.size())
        throw std::invalid_argument("adam_step: optimizer state does not mirror the parameter set");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

    for (auto& [name, p] : params) {
        const auto& g = grads.at(name);
        if (g.size() != p.size()) throw std::invalid_argument("adam_step: gradient size mismatch for " + name);
        auto mit = state.moments.find(name);
        if (mit == state.moments.end()) {
            mit = state.moments
                      .emplace(name, typename AdamState<Real>::Moments{
                                         std::vector<Real>(static_cast<size_t>(p.size()), Real(0)),
                                         std::vector<Real>(static_cast<size_t>(p.size()), Real(0))})
                      .first;
        }
        auto& m = mit->second.m;
        auto& v = mit->second.v;
        Real* pv = p.data();
        const Real* gv = g.data();
        for (std::int64_t i = 0; i < p.size(); ++i) {
            m[static_cast<size_t>(i)] = static_cast<Real>(state.beta1) * m[static_cast<size_t>(i)] +
                                        (Real(1) - static_cast<Real>(state.beta1)) * gv[i];
            v[static_cast<size_t>(i)] = static_cast<Real>(state.beta2) * v[static_cast<size_t>(i)] +
                                        (Real(1) - static_cast<Real>(state.beta2)) * gv[i] * gv[i];
            const double mh = static_cast<double>(m[static_cast<size_t>(i)]) / bc1;
            const double vh = static_cast<double>(v[static_cast<size_t>(i)]) / bc2;
            pv[i] -= static_cast<Real>(static_cast<double>(lr) * mh / (std::sqrt(vh) + state.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;  // 1-based
    double sup_loss = 0.0;
    double unsup_loss = 0.0;
    double val_dice = 0.0;
    double val_miou = 0.0;
};

template <typename Real>
struct FitResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val_dice = 0.0;
    std::map<std::string, std::vector<Real>> best_params;  // full bank snapshot
};

// Drives one model over one dataset. An epoch runs in three phases:
// labeled supervision, pseudo-label refresh over the unlabeled split, and
// unlabeled supervision against the refreshed store (with the LV term when
// text is in use), followed by validation.
template <typename Real>
class Trainer {
public:
    Trainer(LViT<Real>& model, const synth::Dataset<Real>& data, TrainConfig tcfg, LossConfig lcfg = {})
        : model_(model), data_(data), tcfg_(tcfg), lcfg_(lcfg) {
        tcfg_.validate();
        lcfg_.validate();
        labeled_ = data_.labeled_train();
        unlabeled_ = data_.unlabeled_train();
        val_ = data_.indices(synth::Split::Val);
        if (labeled_.empty()) throw std::invalid_argument("trainer: labeled train split is empty");

        if (tcfg_.use_text) {
            std::vector<std::pair<std::string, const text::StructuredReport*>> reports;
            std::vector<Tensor<Real>> masks;
            for (const size_t i : labeled_) {
                reports.emplace_back(data_.cases[i].id, &data_.cases[i].report);
                masks.push_back(data_.cases[i].mask);
            }
            bank_ = text::ContrastiveBank<Real>(reports, masks, model_.text_table());
        }
    }

    const PseudoLabelStore<Real>& store() const { return store_; }
    const text::ContrastiveBank<Real>& contrastive_bank() const { return bank_; }

    EpochRecord run_epoch(int epoch_index) {
        EpochRecord rec;
        rec.epoch = epoch_index;

        // phase 1: labeled supervision
        auto order = labeled_;
        Rng shuffle_rng(tcfg_.seed, "shuffle." + std::to_string(epoch_index));
        shuffle_rng.shuffle(order);
        double sup_sum = 0.0;
        int sup_batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tcfg_.batch_size)) {
            const auto batch = slice(order, start);
            Tape<Real> tape;
            auto p = model_.forward(stack_images(batch), tokens_for(batch), RunMode::Train);
            auto loss = sup_loss(p, stack_masks(batch), lcfg_);
            sup_sum += static_cast<double>(loss.item());
            ++sup_batches;
            tape.backward(loss);
            optimize();
        }
        rec.sup_loss = sup_batches ? sup_sum / sup_batches : 0.0;

        // the pseudo-label iteration starts from the predictions of a model
        // that has already seen the labeled data; before that the unlabeled
        // phases stay dormant
        const bool epi_active = epoch_index > tcfg_.warmup_epochs;

        if (!unlabeled_.empty() && epi_active) {
            // phase 2: refresh the pseudo-label store from eval-mode predictions
            for (size_t start = 0; start < unlabeled_.size(); start += static_cast<size_t>(tcfg_.batch_size)) {
                const auto batch = slice(unlabeled_, start);
                auto p = model_.forward(stack_images(batch), tokens_for(batch), RunMode::Eval);
                for (size_t bi = 0; bi < batch.size(); ++bi)
                    store_.update(data_.cases[batch[bi]].id, slice_sample(p, static_cast<int>(bi)),
                                  static_cast<Real>(tcfg_.beta));
            }
            if (store_.size() != unlabeled_.size())
                throw std::runtime_error("trainer: pseudo-label store does not cover the unlabeled split");

            // phase 3: unlabeled supervision against the store
            auto uorder = unlabeled_;
            Rng ushuffle(tcfg_.seed, "shuffle-unlabeled." + std::to_string(epoch_index));
            ushuffle.shuffle(uorder);
            double unsup_sum = 0.0;
            int unsup_batches = 0;
            for (size_t start = 0; start < uorder.size(); start += static_cast<size_t>(tcfg_.batch_size)) {
                const auto batch = slice(uorder, start);
                double lv_mean = 0.0;
                if (tcfg_.use_text) {
                    for (const size_t idx : batch) {
                        const auto query = bank_.embed_query(data_.cases[idx].report);
                        auto [mask, sim] = text::select_contrastive(query, bank_);
                        (void)sim;
                        lv_mean += static_cast<double>(
                            lv_loss(store_.at(data_.cases[idx].id).probs, mask).item());
                    }
                    lv_mean /= static_cast<double>(batch.size());
                }
                Tape<Real> tape;
                auto p = model_.forward(stack_images(batch), tokens_for(batch), RunMode::Frozen);
                auto total = unsup_loss(p, stack_store_targets(batch),
                                        Tensor<Real>::scalar(static_cast<Real>(lv_mean)), lcfg_);
                unsup_sum += static_cast<double>(total.item());
                ++unsup_batches;
                tape.backward(total);
                optimize();
            }
            rec.unsup_loss = unsup_batches ? unsup_sum / unsup_batches : 0.0;
        }

        const auto [dice, iou] = evaluate(synth::Split::Val);
        rec.val_dice = dice;
        rec.val_miou = iou;
        return rec;
    }

    // Mean per-case Dice and mIoU of the current parameters on a split,
    // thresholded at 0.5, eval-mode statistics.
    std::pair<double, double> evaluate(synth::Split split) {
        const auto idx = data_.indices(split);
        if (idx.empty()) return {0.0, 0.0};
        double dice = 0.0, iou = 0.0;
        for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(tcfg_.batch_size)) {
            const auto batch = slice(idx, start);
            auto p = model_.forward(stack_images(batch), tokens_for(batch), RunMode::Eval);
            for (size_t bi = 0; bi < batch.size(); ++bi) {
                auto pred = slice_sample(p, static_cast<int>(bi));
                Tensor<Real> bin(pred.shape());
                for (std::int64_t i = 0; i < pred.size(); ++i)
                    bin.data()[i] = pred.data()[i] > Real(0.5) ? Real(1) : Real(0);
                dice += dice_score(bin, data_.cases[batch[bi]].mask);
                iou += miou(bin, data_.cases[batch[bi]].mask);
            }
        }
        return {dice / static_cast<double>(idx.size()), iou / static_cast<double>(idx.size())};
    }

    // Full loop with best-epoch tracking; the model is left holding the
    // best-validation parameters, not the last ones.
    FitResult<Real> fit() {
        FitResult<Real> result;
        int since_best = 0;
        for (int epoch = 1; epoch <= tcfg_.max_epochs; ++epoch) {
            auto rec = run_epoch(epoch);
            result.history.push_back(rec);
            if (result.history.size() == 1 || rec.val_dice > result.best_val_dice) {
                result.best_val_dice = rec.val_dice;
                result.best_epoch = epoch;
                result.best_params = model_.bank().snapshot();
                since_best = 0;
            } else {
                ++since_best;
                if (since_best >= tcfg_.patience) break;
            }
        }
        if (!result.best_params.empty()) model_.bank().restore(result.best_params);
        return result;
    }

    // Batch helpers are public so harnesses can drive custom loops.
    std::vector<size_t> slice(const std::vector<size_t>& idx, size_t start) const {
        const size_t stop = std::min(idx.size(), start + static_cast<size_t>(tcfg_.batch_size));
        return std::vector<size_t>(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                   idx.begin() + static_cast<std::ptrdiff_t>(stop));
    }

    Tensor<Real> stack_images(const std::vector<size_t>& batch) const {
        const int n = data_.image_size();
        Tensor<Real> out(Shape{static_cast<int>(batch.size()), 1, n, n});
        for (size_t bi = 0; bi < batch.size(); ++bi)
            std::copy(data_.cases[batch[bi]].image.values().begin(), data_.cases[batch[bi]].image.values().end(),
                      out.data() + static_cast<std::int64_t>(bi) * n * n);
        return out;
    }

    Tensor<Real> stack_masks(const std::vector<size_t>& batch) const {
        const int n = data_.image_size();
        Tensor<Real> out(Shape{static_cast<int>(batch.size()), 1, n, n});
        for (size_t bi = 0; bi < batch.size(); ++bi)
            std::copy(data_.cases[batch[bi]].mask.values().begin(), data_.cases[batch[bi]].mask.values().end(),
                      out.data() + static_cast<std::int64_t>(bi) * n * n);
        return out;
    }

private:
    Tensor<Real> stack_store_targets(const std::vector<size_t>& batch) const {
        const int n = data_.image_size();
        Tensor<Real> out(Shape{static_cast<int>(batch.size()), 1, n, n});
        for (size_t bi = 0; bi < batch.size(); ++bi) {
            const auto& probs = store_.at(data_.cases[batch[bi]].id).probs;
            std::copy(probs.values().begin(), probs.values().end(),
                      out.data() + static_cast<std::int64_t>(bi) * n * n);
        }
        return out;
    }

    Tensor<Real> slice_sample(const Tensor<Real>& batch_out, int bi) const {
        const int c = batch_out.dim(1), h = batch_out.dim(2), w = batch_out.dim(3);
        Tensor<Real> out(Shape{c, h, w});
        std::copy(batch_out.data() + static_cast<std::int64_t>(bi) * c * h * w,
                  batch_out.data() + static_cast<std::int64_t>(bi + 1) * c * h * w, out.data());
        return out;
    }

    // Token batch padded to the model's max_tokens; null when text is off.
    const typename LViT<Real>::TokenBatch* tokens_for(const std::vector<size_t>& batch) {
        if (!tcfg_.use_text) return nullptr;
        token_scratch_.clear();
        const int m = model_.config().max_tokens;
        for (const size_t idx : batch) {
            std::vector<int> padded(static_cast<size_t>(m), text::kPadId);
            const auto& toks = data_.cases[idx].report.tokens;
            for (size_t i = 0; i < toks.size() && i < static_cast<size_t>(m); ++i) padded[i] = toks[i];
            token_scratch_.push_back(std::move(padded));
        }
        return &token_scratch_;
    }

    void optimize() {
        std::map<std::string, Tensor<Real>> params, grads;
        for (const auto& [name, entry] : model_.bank().entries()) {
            if (!entry.trainable) continue;
            params.emplace(name, entry.tensor);
            grads.emplace(name, entry.tensor.grad());
        }
        adam_step(params, grads, adam_, static_cast<Real>(tcfg_.lr));
        model_.bank().zero_grad();
    }

    LViT<Real>& model_;
    const synth::Dataset<Real>& data_;
    TrainConfig tcfg_;
    LossConfig lcfg_;
    std::vector<size_t> labeled_, unlabeled_, val_;
    PseudoLabelStore<Real> store_;
    text::ContrastiveBank<Real> bank_;
    AdamState<Real> adam_;
    typename LViT<Real>::TokenBatch token_scratch_;
};

}  // namespace lvit
