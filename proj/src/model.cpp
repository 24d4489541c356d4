#include "vare/model.hpp"

#include <json.hpp>

namespace vare {

std::string group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::EMB: return "EMB";
        case ParamGroup::SA: return "SA";
        case ParamGroup::CA: return "CA";
        case ParamGroup::FFN: return "FFN";
    }
    return "?";
}

ParamGroup group_of_name(const std::string& name) {
    if (name.rfind("emb.", 0) == 0) return ParamGroup::EMB;
    if (name.find(".sa.") != std::string::npos) return ParamGroup::SA;
    if (name.find(".ca.") != std::string::npos) return ParamGroup::CA;
    if (name.find(".ffn.") != std::string::npos) return ParamGroup::FFN;
    throw ShapeError("parameter '" + name + "' does not belong to any group");
}

std::string context_mode_name(ContextMode m) {
    switch (m) {
        case ContextMode::neutral: return "neutral";
        case ContextMode::concept_form: return "concept";
        case ContextMode::none: return "none";
    }
    return "?";
}

int ModelConfig::seq_len(int upto_scales) const {
    const int n = upto_scales < 0 ? levels() : upto_scales;
    int s = 0;
    for (int i = 0; i < n; ++i) {
        auto [h, w] = schedule.resolutions[size_t(i)];
        s += h * w;
    }
    return s;
}

void ModelConfig::validate() const {
    if (depth < 1) throw ShapeError("model: depth must be >= 1");
    if (dim < 1 || heads < 1 || dim % heads != 0)
        throw ShapeError("model: dim must be divisible by heads");
    if (prompt_vocab < 1) throw ShapeError("model: prompt vocabulary is empty");
    if (bit_depth < 1) throw ShapeError("model: bit depth must be >= 1");
    if (!(self_correct_lo >= 0.f && self_correct_hi <= 0.5f && self_correct_lo <= self_correct_hi))
        throw ShapeError("model: self-correction range must satisfy 0 <= lo <= hi <= 0.5");
    if (schedule.resolutions.empty()) throw ShapeError("model: schedule is empty");
    if (!schedule.calibrated()) throw ShapeError("model: schedule gains not calibrated");
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["depth"] = depth;
    j["dim"] = dim;
    j["heads"] = heads;
    j["ffn_mult"] = ffn_mult;
    j["prompt_vocab"] = prompt_vocab;
    j["prompt_len"] = prompt_len;
    j["pad_id"] = pad_id;
    j["bit_depth"] = bit_depth;
    j["self_correct_lo"] = self_correct_lo;
    j["self_correct_hi"] = self_correct_hi;
    auto& res = j["schedule"]["resolutions"];
    for (auto [h, w] : schedule.resolutions) res.push_back({h, w});
    j["schedule"]["gains"] = schedule.gains;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.depth = j.at("depth").get<int>();
    c.dim = j.at("dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.prompt_vocab = j.at("prompt_vocab").get<int>();
    c.prompt_len = j.at("prompt_len").get<int>();
    c.pad_id = j.at("pad_id").get<int>();
    c.bit_depth = j.at("bit_depth").get<int>();
    c.self_correct_lo = j.at("self_correct_lo").get<float>();
    c.self_correct_hi = j.at("self_correct_hi").get<float>();
    for (const auto& r : j.at("schedule").at("resolutions"))
        c.schedule.resolutions.emplace_back(r.at(0).get<int>(), r.at(1).get<int>());
    c.schedule.gains = j.at("schedule").at("gains").get<std::vector<float>>();
    return c;
}

std::vector<uint8_t> flatten_bits(const TokenMaps& maps) {
    std::vector<uint8_t> out;
    for (const auto& m : maps) out.insert(out.end(), m.bits.begin(), m.bits.end());
    return out;
}

std::vector<uint8_t> greedy_bits(const std::vector<float>& logits) {
    std::vector<uint8_t> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] > 0.f ? 1 : 0;
    return out;
}

std::vector<uint8_t> greedy_bits(const std::vector<double>& logits) {
    std::vector<uint8_t> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] > 0.0 ? 1 : 0;
    return out;
}

namespace modeldet {

std::vector<float> context_features(const ModelConfig& cfg, const TokenMaps& ctx, int scales) {
    const int d = cfg.bit_depth;
    const int S = cfg.seq_len(scales);
    std::vector<float> out(size_t(S) * d, 0.f);
    if (!ctx.empty() && int(ctx.size()) < scales - 1)
        throw ShapeError("context/schedule mismatch: " + std::to_string(ctx.size()) +
                         " maps for " + std::to_string(scales) + " scales");
    int off = 0;
    for (int i = 0; i < scales; ++i) {
        auto [h, w] = cfg.schedule.resolutions[size_t(i)];
        if (i > 0 && !ctx.empty()) {
            Grid acc(h, w, d);
            for (int j = 0; j < i; ++j) {
                const BitTokenMap& m = ctx[size_t(j)];
                auto [hj, wj] = cfg.schedule.resolutions[size_t(j)];
                if (m.h != hj || m.w != wj || m.d != d)
                    throw ShapeError("context/schedule mismatch at scale " + std::to_string(j));
                const float gain = cfg.schedule.gains[size_t(j)];
                Grid code(hj, wj, d);
                for (int r = 0; r < hj; ++r)
                    for (int c = 0; c < wj; ++c) {
                        const uint8_t* bp = m.loc(r, c);
                        float* cp = code.loc(r, c);
                        for (int k = 0; k < d; ++k) cp[k] = bit_to_code(bp[k], d) * gain;
                    }
                Grid up = bilinear_resize(code, h, w);
                for (size_t t = 0; t < acc.v.size(); ++t) acc.v[t] += up.v[t];
            }
            std::copy(acc.v.begin(), acc.v.end(), out.begin() + size_t(off) * d);
        }
        off += h * w;
    }
    return out;
}

std::vector<float> block_causal_mask(const ModelConfig& cfg, int scales) {
    const int S = cfg.seq_len(scales);
    auto sid = scale_ids(cfg, scales);
    std::vector<float> m(size_t(S) * S, 0.f);
    for (int q = 0; q < S; ++q)
        for (int k = 0; k < S; ++k)
            if (sid[size_t(k)] > sid[size_t(q)]) m[size_t(q) * S + k] = -1e9f;
    return m;
}

std::vector<int> scale_ids(const ModelConfig& cfg, int scales) {
    std::vector<int> out;
    for (int i = 0; i < scales; ++i) {
        auto [h, w] = cfg.schedule.resolutions[size_t(i)];
        out.insert(out.end(), size_t(h) * w, i);
    }
    return out;
}

std::vector<int> row_ids(const ModelConfig& cfg, int scales) {
    const auto [hk, wk] = cfg.schedule.resolutions.back();
    std::vector<int> out;
    for (int i = 0; i < scales; ++i) {
        auto [h, w] = cfg.schedule.resolutions[size_t(i)];
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) out.push_back(r * (hk / h));
    }
    return out;
}

std::vector<int> col_ids(const ModelConfig& cfg, int scales) {
    const auto [hk, wk] = cfg.schedule.resolutions.back();
    std::vector<int> out;
    for (int i = 0; i < scales; ++i) {
        auto [h, w] = cfg.schedule.resolutions[size_t(i)];
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) out.push_back(c * (wk / w));
    }
    return out;
}

}  // namespace modeldet

}  // namespace vare
