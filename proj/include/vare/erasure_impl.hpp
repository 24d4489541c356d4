#pragma once

// Template implementation for erasure.hpp.

namespace vare {

namespace erasedet {

// Teacher-forced greedy bits for (prompt, ctx), no provenance gate. The
// public quantize_teacher_targets wraps this with the neutral-only check.
template <typename T>
TokenMaps teacher_bits_under(const ParamsT<T>& teacher, const PromptTokenSeq& prompt,
                             const TokenMaps& ctx) {
    NoGrad ng;
    const ModelConfig& cfg = teacher.cfg;
    auto fwd = forward_batch(teacher, {prompt}, {&ctx}, cfg.levels());
    TokenMaps out;
    int off = 0;
    for (int i = 0; i < cfg.levels(); ++i) {
        auto [h, w] = cfg.schedule.resolutions[size_t(i)];
        BitTokenMap m(i, h, w, cfg.bit_depth);
        const T* l = fwd.logits.values().data() + size_t(off) * cfg.bit_depth;
        for (int64_t j = 0; j < int64_t(h) * w * cfg.bit_depth; ++j)
            m.bits[size_t(j)] = l[j] > T(0) ? 1 : 0;  // sigmoid(l) > 0.5
        out.push_back(std::move(m));
        off += h * w;
    }
    return out;
}

template <typename T>
std::vector<T> teacher_probs_under(const ParamsT<T>& teacher, const PromptTokenSeq& prompt,
                                   const TokenMaps& ctx) {
    NoGrad ng;
    auto fwd = forward_batch(teacher, {prompt}, {&ctx}, teacher.cfg.levels());
    std::vector<T> probs(fwd.logits.values().size());
    for (size_t i = 0; i < probs.size(); ++i) {
        const T l = fwd.logits.values()[i];
        probs[i] = l >= T(0) ? T(1) / (T(1) + std::exp(-l)) : std::exp(l) / (T(1) + std::exp(l));
    }
    return probs;
}

template <typename T>
ArrayT<T> clamped_prob_graph(const ArrayT<T>& logits) {
    return clamp(sigmoid(logits), T(1e-6), T(1) - T(1e-6));
}

// mean over everything of p*(ln p - ln q) + (1-p)*(ln(1-p) - ln(1-q)) with a
// constant p side and a graph q side.
template <typename T>
ArrayT<T> bernoulli_kl_mean(const std::vector<T>& teacher_probs, const ArrayT<T>& student_logits) {
    const Shape shape = student_logits.shape();
    std::vector<T> pc(teacher_probs.size()), pm(teacher_probs.size());
    std::vector<T> lp(teacher_probs.size()), lpm(teacher_probs.size());
    for (size_t i = 0; i < teacher_probs.size(); ++i) {
        T p = std::min(T(1) - T(1e-6), std::max(T(1e-6), teacher_probs[i]));
        pc[i] = p;
        pm[i] = T(1) - p;
        lp[i] = std::log(p);
        lpm[i] = std::log(T(1) - p);
    }
    auto p_arr = ArrayT<T>::from(shape, std::move(pc));
    auto pm_arr = ArrayT<T>::from(shape, std::move(pm));
    auto lp_arr = ArrayT<T>::from(shape, std::move(lp));
    auto lpm_arr = ArrayT<T>::from(shape, std::move(lpm));
    auto q = clamped_prob_graph(student_logits);
    auto qm = add_const(scale(q, T(-1)), T(1));
    auto t1 = mul(p_arr, sub(lp_arr, vare::log(q)));
    auto t2 = mul(pm_arr, sub(lpm_arr, vare::log(qm)));
    return mean(add(t1, t2));
}

}  // namespace erasedet

template <typename T>
TokenMaps quantize_teacher_targets(const ParamsT<T>& teacher, const PromptTokenSeq& neutral,
                                   const AuxiliaryContext& ctx) {
    if (ctx.provenance != ContextMode::neutral)
        throw ShapeError("quantize_teacher_targets: context provenance must be neutral(c), got " +
                         context_mode_name(ctx.provenance));
    return erasedet::teacher_bits_under(teacher, neutral, ctx.maps);
}

template <typename T>
PairData<T> prepare_pair(const ParamsT<T>& teacher, const PromptPair& pair, ContextMode mode) {
    PairData<T> pd;
    pd.pair = pair;
    pd.ctx = generate_aux_context(teacher, pair, mode);
    if (mode == ContextMode::neutral)
        pd.target_bits = quantize_teacher_targets(teacher, pair.neutral_prompt, pd.ctx);
    else
        pd.target_bits = erasedet::teacher_bits_under(teacher, pair.neutral_prompt, pd.ctx.maps);
    pd.teacher_probs_c = erasedet::teacher_probs_under(teacher, pair.neutral_prompt, pd.ctx.maps);
    pd.teacher_probs_cstar = erasedet::teacher_probs_under(teacher, pair.concept_prompt, pd.ctx.maps);
    return pd;
}

template <typename T>
ArrayT<T> per_bit_ce(const ArrayT<T>& student_logits_cstar, const TokenMaps& targets) {
    return bce_bits_field(student_logits_cstar, flatten_bits(targets));
}

template <typename T>
ArrayT<T> masked_ce_mean(const ArrayT<T>& ce_field, const FilterMask& mask, int bit_depth) {
    const int64_t selected_tokens = mask.selected();
    if (selected_tokens == 0) return ArrayT<T>::scalar(T(0));  // no token selected
    std::vector<T> mask_bits(ce_field.values().size(), T(0));
    int64_t off = 0;
    for (const auto& grid : mask.scales) {
        for (size_t t = 0; t < grid.size(); ++t)
            if (grid[t])
                for (int b = 0; b < bit_depth; ++b)
                    mask_bits[size_t(off + int64_t(t) * bit_depth + b)] = T(1);
        off += int64_t(grid.size()) * bit_depth;
    }
    if (off != int64_t(ce_field.values().size()))
        throw ShapeError("masked_ce_mean: mask does not match the loss field");
    auto mask_arr = ArrayT<T>::from(ce_field.shape(), std::move(mask_bits));
    return scale(sum(mul(ce_field, mask_arr)), T(1) / T(selected_tokens * bit_depth));
}

template <typename T>
EraseTerms<T> loss_fce_parts(const ArrayT<T>& student_logits_cstar, const PairData<T>& pd,
                             const ErasureConfig& cfg) {
    EraseTerms<T> out;
    auto ce = per_bit_ce(student_logits_cstar, pd.target_bits);
    std::vector<double> vals(ce.values().begin(), ce.values().end());
    ScaleSchedule s;  // scale shapes come from the target maps themselves
    for (const auto& m : pd.target_bits) s.resolutions.emplace_back(m.h, m.w);
    const int d = pd.target_bits.front().d;
    out.mask = filter_mask(vals, s, d, cfg.gamma, cfg.alpha);
    out.mask_valid = true;
    out.loss = masked_ce_mean(ce, out.mask, d);
    return out;
}

template <typename T>
ArrayT<T> loss_pre_parts(const ArrayT<T>& student_logits_c, const PairData<T>& pd) {
    return erasedet::bernoulli_kl_mean(pd.teacher_probs_c, student_logits_c);
}

template <typename T>
ArrayT<T> loss_pre_ce_parts(const ArrayT<T>& student_logits_c, const PairData<T>& pd) {
    return bce_bits_mean(student_logits_c, flatten_bits(pd.target_bits));
}

template <typename T>
ArrayT<T> vare_mse_parts(const ArrayT<T>& student_logits_cstar, const PairData<T>& pd) {
    auto q = sigmoid(student_logits_cstar);
    auto p = ArrayT<T>::from(q.shape(), std::vector<T>(pd.teacher_probs_c.begin(), pd.teacher_probs_c.end()));
    auto diff = sub(q, p);
    return mean(mul(diff, diff));
}

template <typename T>
ArrayT<T> erase_kl_parts(const ArrayT<T>& student_logits_cstar, const PairData<T>& pd) {
    return erasedet::bernoulli_kl_mean(pd.teacher_probs_c, student_logits_cstar);
}

template <typename T>
ArrayT<T> loss_esd_parts(const ArrayT<T>& student_logits_cstar, const PairData<T>& pd, float eta) {
    std::vector<T> target(pd.teacher_probs_c.size());
    for (size_t i = 0; i < target.size(); ++i) {
        const T pc = pd.teacher_probs_c[i];
        const T ps = pd.teacher_probs_cstar[i];
        T t = pc - T(eta) * (ps - pc);
        target[i] = std::min(T(1), std::max(T(0), t));  // keep targets in probability space
    }
    auto q = sigmoid(student_logits_cstar);
    auto t_arr = ArrayT<T>::from(q.shape(), std::move(target));
    auto diff = sub(q, t_arr);
    return mean(mul(diff, diff));
}

template <typename T>
ArrayT<T> loss_acm_parts(const ArrayT<T>& student_logits_cstar, const ArrayT<T>& student_logits_c) {
    auto q = sigmoid(student_logits_cstar);
    auto anchor = stop_gradient(sigmoid(student_logits_c));
    auto diff = sub(q, anchor);
    return mean(mul(diff, diff));
}

template <typename T>
ArrayT<T> loss_fmn_parts(const std::vector<ArrayT<T>>& ca_attn, const PromptTokenSeq& cstar,
                         int batch, int batch_index, int heads, int prompt_len) {
    if (!cstar.has_span()) throw ShapeError("fmn: concept span is empty");
    if (ca_attn.empty()) throw ShapeError("fmn: attention recording is off");
    ArrayT<T> total;
    for (const auto& attn : ca_attn) {
        const Shape& s = attn.shape();  // [B*H, S, P]
        if (s.size() != 3 || s[0] != batch * heads || s[2] != prompt_len)
            throw ShapeError("fmn: unexpected attention shape " + shape_str(s));
        auto span = slice(attn, {batch_index * heads, 0, cstar.span_begin},
                          {heads, s[1], cstar.span_end - cstar.span_begin});
        auto sq = sum(mul(span, span));
        total = total.defined() ? add(total, sq) : sq;
    }
    return total;
}

template <typename T>
EraseTerms<T> loss_fce(ParamsT<T>& student, const PairData<T>& pd, const ErasureConfig& cfg) {
    auto fwd = forward_batch(student, {pd.pair.concept_prompt}, {&pd.ctx.maps}, student.cfg.levels());
    return loss_fce_parts(fwd.logits, pd, cfg);
}

template <typename T>
ArrayT<T> loss_pre(ParamsT<T>& student, const PairData<T>& pd) {
    auto fwd = forward_batch(student, {pd.pair.neutral_prompt}, {&pd.ctx.maps}, student.cfg.levels());
    return loss_pre_parts(fwd.logits, pd);
}

template <typename T>
ArrayT<T> vare_mse_loss(ParamsT<T>& student, const PairData<T>& pd) {
    auto fwd = forward_batch(student, {pd.pair.concept_prompt}, {&pd.ctx.maps}, student.cfg.levels());
    return vare_mse_parts(fwd.logits, pd);
}

template <typename T>
EraseStepStats svare_step(ParamsT<T>& student, const std::vector<const PairData<T>*>& batch,
                          const ErasureConfig& cfg, AdamW<T>& opt) {
    cfg.validate();
    const ModelConfig& mcfg = student.cfg;
    const int n = int(batch.size());
    if (n == 0) throw ShapeError("svare_step: empty batch");
    const bool need_c_branch = cfg.preserve != PreserveLoss::off || cfg.erase == EraseLoss::ACM;
    const bool record_attn = cfg.erase == EraseLoss::FMN;
    const int rows_per_pair = need_c_branch ? 2 : 1;

    student.set_trainable(cfg.trainable);
    student.zero_grads();

    std::vector<PromptTokenSeq> prompts;
    std::vector<const TokenMaps*> ctxs;
    for (const auto* pd : batch) {
        prompts.push_back(pd->pair.concept_prompt);
        ctxs.push_back(&pd->ctx.maps);
        if (need_c_branch) {
            prompts.push_back(pd->pair.neutral_prompt);
            ctxs.push_back(&pd->ctx.maps);
        }
    }
    auto fwd = forward_batch(student, prompts, ctxs, mcfg.levels(), record_attn);
    const int S = mcfg.seq_len();
    const int d = mcfg.bit_depth;
    auto l3 = reshape(fwd.logits, {int(prompts.size()), S, d});
    auto row_logits = [&](int row) {
        return reshape(slice(l3, {row, 0, 0}, {1, S, d}), {S, d});
    };

    EraseStepStats stats;
    ArrayT<T> total;
    auto acc = [&](const ArrayT<T>& term) { total = total.defined() ? add(total, term) : term; };

    for (int j = 0; j < n; ++j) {
        const PairData<T>& pd = *batch[size_t(j)];
        const int row_cstar = j * rows_per_pair;
        auto logits_cstar = row_logits(row_cstar);

        ArrayT<T> erase;
        switch (cfg.erase) {
            case EraseLoss::FCE: {
                auto terms = loss_fce_parts(logits_cstar, pd, cfg);
                erase = terms.loss;
                if (terms.mask_valid) {
                    if (stats.mask_fraction.empty()) stats.mask_fraction.assign(terms.mask.scales.size(), 0.0);
                    for (size_t si = 0; si < terms.mask.scales.size(); ++si) {
                        int64_t sel = 0;
                        for (uint8_t v : terms.mask.scales[si]) sel += v;
                        stats.mask_fraction[si] += double(sel) / double(terms.mask.scales[si].size()) / n;
                    }
                }
                break;
            }
            case EraseLoss::MSE:
                erase = vare_mse_parts(logits_cstar, pd);
                break;
            case EraseLoss::KL:
                erase = erase_kl_parts(logits_cstar, pd);
                break;
            case EraseLoss::ESD:
                erase = loss_esd_parts(logits_cstar, pd, cfg.esd_eta);
                break;
            case EraseLoss::ACM:
                erase = loss_acm_parts(logits_cstar, row_logits(row_cstar + 1));
                break;
            case EraseLoss::FMN:
                erase = loss_fmn_parts(fwd.ca_attn, pd.pair.concept_prompt, int(prompts.size()),
                                       row_cstar, mcfg.heads, mcfg.prompt_len);
                break;
        }
        stats.l_erase += double(erase.item()) / n;
        acc(erase);

        if (cfg.preserve != PreserveLoss::off) {
            auto logits_c = row_logits(row_cstar + 1);
            auto pre = cfg.preserve == PreserveLoss::KL ? loss_pre_parts(logits_c, pd)
                                                        : loss_pre_ce_parts(logits_c, pd);
            stats.l_pre += double(pre.item()) / n;
            acc(scale(pre, T(cfg.preserve_weight)));
        }
    }
    total = scale(total, T(1) / T(n));
    stats.total = double(total.item());
    if (!std::isfinite(stats.total))
        throw DomainError("svare_step: non-finite loss " + std::to_string(stats.total));
    backward(total);
    opt.step(student, cfg.trainable);
    student.zero_grads();
    return stats;
}

}  // namespace vare
