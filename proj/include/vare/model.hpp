#pragma once

// Scale-causal conditional transformer over bit-token maps: per-bit logits
// for every scale under a block-causal mask, cross-attention on prompt
// tokens, greedy/stochastic next-scale sampling, base training with bit-wise
// self-correction.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "vare/array.hpp"
#include "vare/scenegen.hpp"
#include "vare/tokenizer.hpp"

namespace vare {

enum class ParamGroup { EMB, SA, CA, FFN };

std::string group_name(ParamGroup g);
ParamGroup group_of_name(const std::string& param_name);  // audited by name; throws on unknown

using GroupSet = std::set<ParamGroup>;

struct ModelConfig {
    int depth = 4;
    int dim = 128;
    int heads = 4;
    int ffn_mult = 2;
    int prompt_vocab = 0;
    int prompt_len = kPromptLen;
    int pad_id = 0;
    int bit_depth = 12;
    ScaleSchedule schedule;
    float self_correct_lo = 0.0f;
    float self_correct_hi = 0.3f;

    int levels() const { return schedule.levels(); }
    int seq_len(int upto_scales = -1) const;  // total positions over the first n scales
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

template <typename T>
struct ParamsT {
    ModelConfig cfg;
    std::vector<std::pair<std::string, ArrayT<T>>> tensors;  // fixed insertion order

    ArrayT<T>& at(const std::string& name) {
        for (auto& [n, a] : tensors)
            if (n == name) return a;
        throw ShapeError("params: unknown tensor '" + name + "'");
    }
    const ArrayT<T>& at(const std::string& name) const {
        return const_cast<ParamsT*>(this)->at(name);
    }

    void set_trainable(const GroupSet& groups) {
        for (auto& [n, a] : tensors) a.set_requires_grad(groups.count(group_of_name(n)) > 0);
    }
    void set_trainable_all(bool on) {
        for (auto& [n, a] : tensors) a.set_requires_grad(on);
    }
    void zero_grads() {
        for (auto& [n, a] : tensors) a.zero_grad();
    }

    ParamsT clone() const {
        ParamsT copy;
        copy.cfg = cfg;
        for (const auto& [n, a] : tensors) {
            auto dup = ArrayT<T>::from(a.shape(), a.values());
            copy.tensors.emplace_back(n, dup);
        }
        return copy;
    }

    template <typename U>
    ParamsT<U> cast() const {
        ParamsT<U> out;
        out.cfg = cfg;
        for (const auto& [n, a] : tensors) {
            std::vector<U> v(a.values().begin(), a.values().end());
            out.tensors.emplace_back(n, ArrayT<U>::from(a.shape(), std::move(v)));
        }
        return out;
    }
};

using Params = ParamsT<float>;

template <typename T>
ParamsT<T> init_params(const ModelConfig& cfg, uint64_t seed);

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

using TokenMaps = std::vector<BitTokenMap>;

template <typename T>
struct ForwardOut {
    ArrayT<T> logits;                  // [B*S, d]
    std::vector<ArrayT<T>> ca_attn;    // per block [B*heads, S, prompt_len], only when recorded
    int batch = 0;
    int scales = 0;
};

// Teacher-forced parallel evaluation over the first `scales` scales.
// contexts[b] must provide at least scales-1 maps (scale i consumes scales
// < i; an empty context feeds zero features everywhere).
template <typename T>
ForwardOut<T> forward_batch(const ParamsT<T>& params,
                            const std::vector<PromptTokenSeq>& prompts,
                            const std::vector<const TokenMaps*>& contexts,
                            int scales, bool record_attn = false);

// Single-sample logits for one scale: rows [offset(scale), offset(scale+1)).
template <typename T>
ArrayT<T> logits_for_scale(const ModelConfig& cfg, const ForwardOut<T>& fwd, int batch_index, int scale);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

enum class SampleMode { greedy, stochastic };

struct SampleOptions {
    SampleMode mode = SampleMode::greedy;
    float cfg_eta = 0.0f;  // final = cond + eta*(cond - uncond); 0 disables guidance
    uint64_t seed = 0;
};

// Autoregressive over scales; returns one token-map stack per prompt.
template <typename T>
std::vector<TokenMaps> sample_tokens(const ParamsT<T>& params,
                                     const std::vector<PromptTokenSeq>& prompts,
                                     const SampleOptions& opt);

// ---------------------------------------------------------------------------
// Auxiliary context (frozen-model generations fed back as inputs)
// ---------------------------------------------------------------------------

enum class ContextMode { neutral, concept_form, none };

std::string context_mode_name(ContextMode m);

struct AuxiliaryContext {
    PromptTokenSeq prompt;
    TokenMaps maps;  // empty for ContextMode::none
    ContextMode provenance = ContextMode::none;
};

template <typename T>
AuxiliaryContext generate_aux_context(const ParamsT<T>& teacher, const PromptPair& pair,
                                      ContextMode mode);

// ---------------------------------------------------------------------------
// Base training
// ---------------------------------------------------------------------------

template <typename T>
struct AdamW {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.95);
    T eps = T(1e-8);
    T weight_decay = T(0);
    int64_t step_count = 0;
    std::map<std::string, std::pair<std::vector<T>, std::vector<T>>> moments;

    void step(ParamsT<T>& params, const GroupSet& trainable);
};

struct TrainStats {
    double loss = 0;  // mean nats per bit
};

// One optimizer update on all groups. Context bits are the targets with each
// bit flipped with probability rho ~ U[self_correct range] per sample; the
// loss targets stay unflipped.
template <typename T>
TrainStats base_train_step(ParamsT<T>& params, const Tokenizer& tok,
                           const std::vector<const Grid*>& images,
                           const std::vector<PromptTokenSeq>& prompts,
                           AdamW<T>& opt, Rng& rng);

// Mean per-bit BCE of logits against constant bit targets (clamped probs).
template <typename T>
ArrayT<T> bce_bits_mean(const ArrayT<T>& logits, const std::vector<uint8_t>& bits);

// Elementwise per-bit BCE field (same shape as logits).
template <typename T>
ArrayT<T> bce_bits_field(const ArrayT<T>& logits, const std::vector<uint8_t>& bits);

// Flatten a token-map stack to one bit vector in sequence order.
std::vector<uint8_t> flatten_bits(const TokenMaps& maps);

// Greedy bit quantization of logits (bit = 1 iff p > 0.5).
std::vector<uint8_t> greedy_bits(const std::vector<float>& logits);
std::vector<uint8_t> greedy_bits(const std::vector<double>& logits);

// Internal helpers shared with losses/tests.
namespace modeldet {
// Per-position constant input features for the first `scales` scales of the
// sequence: cumulative decode of context maps below each scale, resized to
// that scale. Returns [S, d] floats.
std::vector<float> context_features(const ModelConfig& cfg, const TokenMaps& ctx, int scales);
// Block-causal additive mask [S, S].
std::vector<float> block_causal_mask(const ModelConfig& cfg, int scales);
std::vector<int> scale_ids(const ModelConfig& cfg, int scales);
std::vector<int> row_ids(const ModelConfig& cfg, int scales);
std::vector<int> col_ids(const ModelConfig& cfg, int scales);
}  // namespace modeldet

}  // namespace vare

#include "vare/model_impl.hpp"
