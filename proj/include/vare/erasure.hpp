#pragma once

// Concept-erasure fine-tuning: auxiliary-context framework, filtered
// cross-entropy erase loss with the token-level (gamma, alpha) filter,
// Bernoulli-KL preservation, and the adapted baseline losses selectable by
// config. The teacher is frozen throughout; only configured parameter
// groups are updated.

#include <functional>
#include <string>
#include <vector>

#include "vare/model.hpp"

namespace vare {

enum class EraseLoss { FCE, MSE, KL, ESD, ACM, FMN };
enum class PreserveLoss { KL, CE, off };

std::string erase_loss_name(EraseLoss e);
std::string preserve_loss_name(PreserveLoss p);

struct ErasureConfig {
    double alpha = 0.25;                 // token-level incorrect-bit ratio threshold
    double gamma = 0.6931471805599453;   // bit-level loss threshold, -log(1/2)
    double preserve_weight = 1.0;
    ContextMode context_mode = ContextMode::neutral;
    GroupSet trainable = {ParamGroup::CA, ParamGroup::FFN};
    EraseLoss erase = EraseLoss::FCE;
    PreserveLoss preserve = PreserveLoss::KL;
    double lr = 2e-3;
    int iterations = 500;
    int batch = 2;
    int n_pairs = 50;
    float esd_eta = 1.0f;  // guidance strength for the ESD target

    void validate() const;
    std::string to_json() const;
    static ErasureConfig from_json(const std::string& text);
};

// Per-scale boolean token filter derived from a per-bit loss field.
struct FilterMask {
    std::vector<std::vector<uint8_t>> scales;  // h_i x w_i each, 1 = token in loss

    int64_t selected() const {
        int64_t n = 0;
        for (const auto& s : scales)
            for (uint8_t v : s) n += v;
        return n;
    }
    int64_t total() const {
        int64_t n = 0;
        for (const auto& s : scales) n += int64_t(s.size());
        return n;
    }
};

// mask_i(token) = 1 iff (#bits with loss >= gamma)/d > alpha (strict).
FilterMask filter_mask(const std::vector<double>& bit_losses, const ScaleSchedule& schedule,
                       int bit_depth, double gamma, double alpha);

// ---------------------------------------------------------------------------
// Cached per-pair teacher data. Everything the iteration loop needs from the
// frozen teacher is computed once: the auxiliary context, quantized targets
// and teacher probabilities under both prompts.
// ---------------------------------------------------------------------------

template <typename T>
struct PairData {
    PromptPair pair;
    AuxiliaryContext ctx;
    TokenMaps target_bits;               // teacher bits under (c, ctx)
    std::vector<T> teacher_probs_c;      // sigmoid of teacher logits under (c, ctx)
    std::vector<T> teacher_probs_cstar;  // under (c*, ctx)
};

// Teacher forward bits under the neutral prompt with the given context.
// Enforces neutral provenance (targets must come from the neutral prompt).
template <typename T>
TokenMaps quantize_teacher_targets(const ParamsT<T>& teacher, const PromptTokenSeq& neutral,
                                   const AuxiliaryContext& ctx);

template <typename T>
PairData<T> prepare_pair(const ParamsT<T>& teacher, const PromptPair& pair, ContextMode mode);

// ---------------------------------------------------------------------------
// Losses. Each returns a scalar graph node over the student forward(s).
// The *_parts variants accept precomputed student logits so one batched
// forward can serve several pairs.
// ---------------------------------------------------------------------------

template <typename T>
struct EraseTerms {
    ArrayT<T> loss;        // scalar
    FilterMask mask;       // populated for FCE
    bool mask_valid = false;
};

// Per-bit BCE field of student logits under c* against the quantized targets.
template <typename T>
ArrayT<T> per_bit_ce(const ArrayT<T>& student_logits_cstar, const TokenMaps& targets);

// Mean of the per-bit CE field over bits of mask-selected tokens, all scales
// pooled; zero when nothing is selected. The mask enters as a constant.
template <typename T>
ArrayT<T> masked_ce_mean(const ArrayT<T>& ce_field, const FilterMask& mask, int bit_depth);

// Filtered cross entropy: per-bit CE against the quantized targets, filtered
// by the (gamma, alpha) token mask derived from the current loss values.
// No gradient flows through the indicator.
template <typename T>
EraseTerms<T> loss_fce_parts(const ArrayT<T>& student_logits_cstar, const PairData<T>& pd,
                             const ErasureConfig& cfg);

// Bernoulli KL(teacher || student), both under the neutral prompt/context.
template <typename T>
ArrayT<T> loss_pre_parts(const ArrayT<T>& student_logits_c, const PairData<T>& pd);

// Preservation via quantized cross entropy (loss-swap ablation).
template <typename T>
ArrayT<T> loss_pre_ce_parts(const ArrayT<T>& student_logits_c, const PairData<T>& pd);

// MSE between student probabilities under c* and teacher probabilities
// under c (the auxiliary-context regression baseline).
template <typename T>
ArrayT<T> vare_mse_parts(const ArrayT<T>& student_logits_cstar, const PairData<T>& pd);

// KL-formulated erase loss (loss-swap ablation): KL(teacher under c ||
// student under c*), unfiltered.
template <typename T>
ArrayT<T> erase_kl_parts(const ArrayT<T>& student_logits_cstar, const PairData<T>& pd);

// Guided-target regression: MSE(student probs under c*,
// clamp(p(c) - eta*(p(c*) - p(c)), 0, 1)) with frozen teacher probabilities.
template <typename T>
ArrayT<T> loss_esd_parts(const ArrayT<T>& student_logits_cstar, const PairData<T>& pd, float eta);

// Anchor-free regression: MSE(student probs under c*,
// stop_gradient(student probs under c)).
template <typename T>
ArrayT<T> loss_acm_parts(const ArrayT<T>& student_logits_cstar, const ArrayT<T>& student_logits_c);

// Attention suppression: sum of squared cross-attention weights at the
// concept-span prompt columns, over all blocks and query positions.
template <typename T>
ArrayT<T> loss_fmn_parts(const std::vector<ArrayT<T>>& ca_attn, const PromptTokenSeq& cstar,
                         int batch, int batch_index, int heads, int prompt_len);

// Convenience single-pair entry points (run their own student forwards).
template <typename T>
EraseTerms<T> loss_fce(ParamsT<T>& student, const PairData<T>& pd, const ErasureConfig& cfg);
template <typename T>
ArrayT<T> loss_pre(ParamsT<T>& student, const PairData<T>& pd);
template <typename T>
ArrayT<T> vare_mse_loss(ParamsT<T>& student, const PairData<T>& pd);

// ---------------------------------------------------------------------------
// Optimization loop
// ---------------------------------------------------------------------------

struct EraseStepStats {
    double l_erase = 0;
    double l_pre = 0;
    double total = 0;
    std::vector<double> mask_fraction;  // per scale, selected/total (FCE only)
};

// One update over a batch of pairs. Student must be initialized from the
// teacher by the caller; only cfg.trainable groups change.
template <typename T>
EraseStepStats svare_step(ParamsT<T>& student, const std::vector<const PairData<T>*>& batch,
                          const ErasureConfig& cfg, AdamW<T>& opt);

struct EraseRunResult {
    Params student;
    std::vector<EraseStepStats> log;  // one row per iteration
};

using EraseProgressFn = std::function<void(int iter, const EraseStepStats&)>;

// Full run: prepares pair caches, cycles batches deterministically, returns
// the tuned student and the per-iteration log.
EraseRunResult run_erasure(const Params& teacher, const std::vector<PromptPair>& pairs,
                           const ErasureConfig& cfg, const EraseProgressFn& progress = nullptr);

// Per-iteration loss log as CSV (iter, erase, preserve, total, mask fraction per scale).
std::string erase_log_csv(const std::vector<EraseStepStats>& log);

}  // namespace vare

#include "vare/erasure_impl.hpp"
