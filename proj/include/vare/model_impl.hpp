#pragma once

// Template implementation for model.hpp.

namespace vare {

template <typename T>
ParamsT<T> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng = Rng::stream(seed, "model.init");
    ParamsT<T> p;
    p.cfg = cfg;
    const int D = cfg.dim, d = cfg.bit_depth, hid = cfg.ffn_mult * cfg.dim;
    const auto [hk, wk] = cfg.schedule.resolutions.back();
    const T base = T(0.02);
    const T resid = T(0.02 / std::sqrt(2.0 * cfg.depth));

    auto add_t = [&](const std::string& name, Shape s, T stddev) {
        p.tensors.emplace_back(name, ArrayT<T>::randn(std::move(s), rng, stddev));
    };
    auto add_const_t = [&](const std::string& name, Shape s, T v) {
        p.tensors.emplace_back(name, ArrayT<T>::filled(std::move(s), v));
    };

    add_t("emb.in_proj", {d, D}, base);
    add_t("emb.start", {D}, base);
    add_t("emb.scale", {cfg.levels(), D}, base);
    add_t("emb.row", {hk, D}, base);
    add_t("emb.col", {wk, D}, base);
    add_t("emb.prompt", {cfg.prompt_vocab, D}, base);
    add_t("emb.prompt_pos", {cfg.prompt_len, D}, base);
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string b = "blk" + std::to_string(i);
        add_const_t(b + ".sa.norm.g", {D}, T(1));
        add_const_t(b + ".sa.norm.b", {D}, T(0));
        add_t(b + ".sa.wq", {D, D}, base);
        add_t(b + ".sa.wk", {D, D}, base);
        add_t(b + ".sa.wv", {D, D}, base);
        add_t(b + ".sa.wo", {D, D}, resid);
        add_const_t(b + ".ca.norm.g", {D}, T(1));
        add_const_t(b + ".ca.norm.b", {D}, T(0));
        add_t(b + ".ca.wq", {D, D}, base);
        add_t(b + ".ca.wk", {D, D}, base);
        add_t(b + ".ca.wv", {D, D}, base);
        add_t(b + ".ca.wo", {D, D}, resid);
        add_const_t(b + ".ffn.norm.g", {D}, T(1));
        add_const_t(b + ".ffn.norm.b", {D}, T(0));
        add_t(b + ".ffn.w1", {D, hid}, base);
        add_const_t(b + ".ffn.b1", {hid}, T(0));
        add_t(b + ".ffn.w2", {hid, D}, resid);
        add_const_t(b + ".ffn.b2", {D}, T(0));
    }
    add_const_t("emb.out_norm.g", {D}, T(1));
    add_const_t("emb.out_norm.b", {D}, T(0));
    add_const_t("emb.head.w", {D, d}, T(0));  // neutral start: p = 0.5 everywhere
    add_const_t("emb.head.b", {d}, T(0));
    for (auto& [n, a] : p.tensors) group_of_name(n);  // audit the partition
    return p;
}

namespace modeldet {

template <typename T>
std::vector<int> tile_ids(const std::vector<int>& ids, int batch) {
    std::vector<int> out;
    out.reserve(ids.size() * size_t(batch));
    for (int b = 0; b < batch; ++b) out.insert(out.end(), ids.begin(), ids.end());
    return out;
}

}  // namespace modeldet

template <typename T>
ForwardOut<T> forward_batch(const ParamsT<T>& params,
                            const std::vector<PromptTokenSeq>& prompts,
                            const std::vector<const TokenMaps*>& contexts,
                            int scales, bool record_attn) {
    const ModelConfig& cfg = params.cfg;
    const int B = int(prompts.size());
    if (B == 0 || contexts.size() != size_t(B))
        throw ShapeError("forward: prompt/context batch mismatch");
    if (scales < 1 || scales > cfg.levels())
        throw ShapeError("forward: scales out of range for the schedule");
    const int S = cfg.seq_len(scales);
    const int D = cfg.dim, H = cfg.heads, dh = D / H, d = cfg.bit_depth, P = cfg.prompt_len;

    // constant per-position input features from the contexts
    std::vector<T> feats(static_cast<size_t>(B) * S * d);
    for (int b = 0; b < B; ++b) {
        auto f = modeldet::context_features(cfg, *contexts[size_t(b)], scales);
        std::copy(f.begin(), f.end(), feats.begin() + size_t(b) * S * d);
    }
    auto x = matmul(ArrayT<T>::from({B * S, d}, std::move(feats)), params.at("emb.in_proj"));

    x = add(x, embedding(params.at("emb.scale"), modeldet::tile_ids<T>(modeldet::scale_ids(cfg, scales), B)));
    x = add(x, embedding(params.at("emb.row"), modeldet::tile_ids<T>(modeldet::row_ids(cfg, scales), B)));
    x = add(x, embedding(params.at("emb.col"), modeldet::tile_ids<T>(modeldet::col_ids(cfg, scales), B)));

    {  // learned start embedding on the scale-1 position
        auto x3 = reshape(x, {B, S, D});
        auto first = add(slice(x3, {0, 0, 0}, {B, 1, D}), params.at("emb.start"));
        if (S > 1) {
            auto rest = slice(x3, {0, 1, 0}, {B, S - 1, D});
            x3 = concat<T>({first, rest}, 1);
        } else {
            x3 = first;
        }
        x = reshape(x3, {B * S, D});
    }

    // prompt tokens: shared embedding + position table; pads are masked in CA
    std::vector<int> pids;
    pids.reserve(size_t(B) * P);
    for (const auto& pr : prompts)
        for (int k = 0; k < P; ++k) pids.push_back(pr.ids[size_t(k)]);
    std::vector<int> ppos(static_cast<size_t>(P));
    for (int k = 0; k < P; ++k) ppos[size_t(k)] = k;
    auto pe = embedding(params.at("emb.prompt"), pids);
    pe = add(pe, embedding(params.at("emb.prompt_pos"), modeldet::tile_ids<T>(ppos, B)));

    auto bc = modeldet::block_causal_mask(cfg, scales);
    auto sa_mask = ArrayT<T>::from({S, S}, std::vector<T>(bc.begin(), bc.end()));
    std::vector<T> cam(static_cast<size_t>(B) * H * S * P, T(0));
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < P; ++k)
            if (prompts[size_t(b)].ids[size_t(k)] == cfg.pad_id)
                for (int h = 0; h < H; ++h) {
                    T* base = cam.data() + ((size_t(b) * H + h) * S) * P;
                    for (int s = 0; s < S; ++s) base[size_t(s) * P + k] = T(-1e9);
                }
    auto ca_mask = ArrayT<T>::from({B * H, S, P}, std::move(cam));

    auto split_heads = [&](ArrayT<T> t, int rows) {
        return reshape(permute(reshape(t, {B, rows, H, dh}), {0, 2, 1, 3}), {B * H, rows, dh});
    };
    auto merge_heads = [&](ArrayT<T> t, int rows) {
        return reshape(permute(reshape(t, {B, H, rows, dh}), {0, 2, 1, 3}), {B * rows, D});
    };

    ForwardOut<T> out;
    out.batch = B;
    out.scales = scales;
    auto h = x;
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string blk = "blk" + std::to_string(i);
        {
            auto t = layer_norm(h, params.at(blk + ".sa.norm.g"), params.at(blk + ".sa.norm.b"));
            auto q = matmul(t, params.at(blk + ".sa.wq"));
            auto k = matmul(t, params.at(blk + ".sa.wk"));
            auto v = matmul(t, params.at(blk + ".sa.wv"));
            auto att = multihead_attention(q, k, v, sa_mask, B, H);
            h = add(h, matmul(att, params.at(blk + ".sa.wo")));
        }
        {
            auto t = layer_norm(h, params.at(blk + ".ca.norm.g"), params.at(blk + ".ca.norm.b"));
            auto q = matmul(t, params.at(blk + ".ca.wq"));
            auto k = matmul(pe, params.at(blk + ".ca.wk"));
            auto v = matmul(pe, params.at(blk + ".ca.wv"));
            ArrayT<T> ca_out;
            if (record_attn) {
                // composite path keeps the softmax weights as a graph node
                auto att = attention(split_heads(q, S), split_heads(k, P), split_heads(v, P), ca_mask);
                out.ca_attn.push_back(att.attn);
                ca_out = merge_heads(att.out, S);
            } else {
                ca_out = multihead_attention(q, k, v, ca_mask, B, H);
            }
            h = add(h, matmul(ca_out, params.at(blk + ".ca.wo")));
        }
        {
            auto t = layer_norm(h, params.at(blk + ".ffn.norm.g"), params.at(blk + ".ffn.norm.b"));
            auto f1 = add(matmul(t, params.at(blk + ".ffn.w1")), params.at(blk + ".ffn.b1"));
            auto act = mul(f1, sigmoid(f1));
            h = add(h, add(matmul(act, params.at(blk + ".ffn.w2")), params.at(blk + ".ffn.b2")));
        }
    }
    auto tn = layer_norm(h, params.at("emb.out_norm.g"), params.at("emb.out_norm.b"));
    out.logits = add(matmul(tn, params.at("emb.head.w")), params.at("emb.head.b"));
    return out;
}

template <typename T>
ArrayT<T> logits_for_scale(const ModelConfig& cfg, const ForwardOut<T>& fwd, int batch_index, int scale) {
    if (scale < 0 || scale >= fwd.scales) throw ShapeError("logits_for_scale: scale out of range");
    const int S = cfg.seq_len(fwd.scales);
    const int off = cfg.seq_len(scale);
    auto [h, w] = cfg.schedule.resolutions[size_t(scale)];
    const int len = h * w;
    auto l3 = reshape(fwd.logits, {fwd.batch, S, cfg.bit_depth});
    auto part = slice(l3, {batch_index, off, 0}, {1, len, cfg.bit_depth});
    return reshape(part, {len, cfg.bit_depth});
}

template <typename T>
std::vector<TokenMaps> sample_tokens(const ParamsT<T>& params,
                                     const std::vector<PromptTokenSeq>& prompts,
                                     const SampleOptions& opt) {
    NoGrad ng;
    const ModelConfig& cfg = params.cfg;
    const int B = int(prompts.size());
    const int d = cfg.bit_depth;
    std::vector<TokenMaps> maps(static_cast<size_t>(B));
    std::vector<const TokenMaps*> ctx(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) ctx[size_t(b)] = &maps[size_t(b)];

    std::vector<Rng> streams;
    for (int b = 0; b < B; ++b)
        streams.push_back(Rng::stream(opt.seed + uint64_t(b) * 0x9e3779b9ULL, "sample"));

    PromptTokenSeq uncond;
    uncond.ids.fill(cfg.pad_id);
    uncond.ids[0] = 1;  // "a": keeps at least one unmasked prompt key
    std::vector<PromptTokenSeq> uncond_b(static_cast<size_t>(B), uncond);

    for (int i = 0; i < cfg.levels(); ++i) {
        auto fwd = forward_batch(params, prompts, ctx, i + 1);
        ForwardOut<T> fwd_u;
        if (opt.cfg_eta != 0.0f) fwd_u = forward_batch(params, uncond_b, ctx, i + 1);
        auto [h, w] = cfg.schedule.resolutions[size_t(i)];
        const int off = cfg.seq_len(i);
        const int S = cfg.seq_len(i + 1);
        for (int b = 0; b < B; ++b) {
            BitTokenMap map(i, h, w, d);
            const T* l = fwd.logits.values().data() + (size_t(b) * S + off) * d;
            const T* lu = opt.cfg_eta != 0.0f
                              ? fwd_u.logits.values().data() + (size_t(b) * S + off) * d
                              : nullptr;
            for (int64_t j = 0; j < int64_t(h) * w * d; ++j) {
                double logit = double(l[j]);
                if (lu) logit = logit + double(opt.cfg_eta) * (logit - double(lu[j]));
                uint8_t bit;
                if (opt.mode == SampleMode::greedy) {
                    bit = logit > 0.0 ? 1 : 0;  // p > 0.5
                } else {
                    const double p = 1.0 / (1.0 + std::exp(-logit));
                    bit = streams[size_t(b)].bernoulli(p) ? 1 : 0;
                }
                map.bits[size_t(j)] = bit;
            }
            maps[size_t(b)].push_back(std::move(map));
        }
    }
    return maps;
}

template <typename T>
AuxiliaryContext generate_aux_context(const ParamsT<T>& teacher, const PromptPair& pair,
                                      ContextMode mode) {
    AuxiliaryContext ctx;
    ctx.provenance = mode;
    if (mode == ContextMode::none) {
        ctx.prompt = pair.neutral_prompt;
        return ctx;  // empty-context sentinel
    }
    ctx.prompt = (mode == ContextMode::neutral) ? pair.neutral_prompt : pair.concept_prompt;
    NoGrad ng;
    SampleOptions opt;  // greedy, no guidance
    ctx.maps = sample_tokens(teacher, {ctx.prompt}, opt)[0];
    return ctx;
}

template <typename T>
ArrayT<T> bce_bits_field(const ArrayT<T>& logits, const std::vector<uint8_t>& bits) {
    if (int64_t(bits.size()) != logits.size())
        throw ShapeError("bce: logits/targets size mismatch " + std::to_string(logits.size()) + " vs " +
                         std::to_string(bits.size()));
    std::vector<T> b(bits.size()), bm(bits.size());
    for (size_t i = 0; i < bits.size(); ++i) {
        b[i] = T(bits[i]);
        bm[i] = T(1) - T(bits[i]);
    }
    auto tb = ArrayT<T>::from(logits.shape(), std::move(b));
    auto tbm = ArrayT<T>::from(logits.shape(), std::move(bm));
    auto p = clamp(sigmoid(logits), T(1e-6), T(1) - T(1e-6));
    auto pm = add_const(scale(p, T(-1)), T(1));
    return scale(add(mul(tb, vare::log(p)), mul(tbm, vare::log(pm))), T(-1));
}

template <typename T>
ArrayT<T> bce_bits_mean(const ArrayT<T>& logits, const std::vector<uint8_t>& bits) {
    return mean(bce_bits_field(logits, bits));
}

template <typename T>
void AdamW<T>::step(ParamsT<T>& params, const GroupSet& trainable) {
    if (trainable.empty()) throw ShapeError("optimizer: no trainable groups configured");
    ++step_count;
    const T bc1 = T(1) - std::pow(beta1, T(step_count));
    const T bc2 = T(1) - std::pow(beta2, T(step_count));
    for (auto& [name, a] : params.tensors) {
        if (!trainable.count(group_of_name(name))) continue;
        auto& [m, v] = moments[name];
        if (m.size() != a.values().size()) {
            m.assign(a.values().size(), T(0));
            v.assign(a.values().size(), T(0));
        }
        const auto& g = a.grad();
        auto& x = a.values();
        for (size_t i = 0; i < x.size(); ++i) {
            m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
            v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
            const T mh = m[i] / bc1;
            const T vh = v[i] / bc2;
            x[i] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * x[i]);
        }
    }
}

template <typename T>
TrainStats base_train_step(ParamsT<T>& params, const Tokenizer& tok,
                           const std::vector<const Grid*>& images,
                           const std::vector<PromptTokenSeq>& prompts,
                           AdamW<T>& opt, Rng& rng) {
    const ModelConfig& cfg = params.cfg;
    const int B = int(images.size());
    if (B == 0 || prompts.size() != size_t(B)) throw ShapeError("train step: batch mismatch");

    std::vector<TokenMaps> targets(static_cast<size_t>(B));
    std::vector<TokenMaps> flipped(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        targets[size_t(b)] = tok.encode_multiscale(tok.patch_encode(*images[size_t(b)]));
        const double rho = cfg.self_correct_lo +
                           rng.uniform() * (cfg.self_correct_hi - cfg.self_correct_lo);
        flipped[size_t(b)] = targets[size_t(b)];
        for (auto& map : flipped[size_t(b)])
            for (auto& bit : map.bits)
                if (rng.uniform() < rho) bit = uint8_t(1 - bit);
    }

    std::vector<const TokenMaps*> ctx(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) ctx[size_t(b)] = &flipped[size_t(b)];

    params.set_trainable_all(true);
    params.zero_grads();
    auto fwd = forward_batch(params, prompts, ctx, cfg.levels());

    std::vector<uint8_t> bits;
    bits.reserve(size_t(B) * cfg.seq_len() * cfg.bit_depth);
    for (int b = 0; b < B; ++b) {
        auto fb = flatten_bits(targets[size_t(b)]);
        bits.insert(bits.end(), fb.begin(), fb.end());
    }
    auto loss = bce_bits_mean(fwd.logits, bits);
    const double lv = double(loss.item());
    if (!std::isfinite(lv)) {
        throw DomainError("train step: non-finite loss " + std::to_string(lv) + " at optimizer step " +
                          std::to_string(opt.step_count + 1));
    }
    backward(loss);
    opt.step(params, {ParamGroup::EMB, ParamGroup::SA, ParamGroup::CA, ParamGroup::FFN});
    params.zero_grads();
    return {lv};
}

}  // namespace vare
