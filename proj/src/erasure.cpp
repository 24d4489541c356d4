#include "vare/erasure.hpp"

#include <sstream>

#include <json.hpp>

namespace vare {

std::string erase_loss_name(EraseLoss e) {
    switch (e) {
        case EraseLoss::FCE: return "fce";
        case EraseLoss::MSE: return "mse";
        case EraseLoss::KL: return "kl";
        case EraseLoss::ESD: return "esd";
        case EraseLoss::ACM: return "acm";
        case EraseLoss::FMN: return "fmn";
    }
    return "?";
}

std::string preserve_loss_name(PreserveLoss p) {
    switch (p) {
        case PreserveLoss::KL: return "kl";
        case PreserveLoss::CE: return "ce";
        case PreserveLoss::off: return "off";
    }
    return "?";
}

namespace {

EraseLoss erase_loss_from(const std::string& s) {
    for (EraseLoss e : {EraseLoss::FCE, EraseLoss::MSE, EraseLoss::KL, EraseLoss::ESD,
                        EraseLoss::ACM, EraseLoss::FMN})
        if (erase_loss_name(e) == s) return e;
    throw ShapeError("erasure config: unknown erase loss '" + s + "'");
}

PreserveLoss preserve_loss_from(const std::string& s) {
    for (PreserveLoss p : {PreserveLoss::KL, PreserveLoss::CE, PreserveLoss::off})
        if (preserve_loss_name(p) == s) return p;
    throw ShapeError("erasure config: unknown preserve loss '" + s + "'");
}

ContextMode context_mode_from(const std::string& s) {
    for (ContextMode m : {ContextMode::neutral, ContextMode::concept_form, ContextMode::none})
        if (context_mode_name(m) == s) return m;
    throw ShapeError("erasure config: unknown context mode '" + s + "'");
}

}  // namespace

void ErasureConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ShapeError("erasure config: alpha must be in [0,1], got " + std::to_string(alpha));
    if (!(gamma > 0.0)) throw ShapeError("erasure config: gamma must be positive");
    if (!(preserve_weight >= 0.0)) throw ShapeError("erasure config: preserve weight must be >= 0");
    if (trainable.empty()) throw ShapeError("erasure config: no trainable groups (all groups frozen)");
    if (!(lr > 0.0)) throw ShapeError("erasure config: learning rate must be positive");
    if (iterations < 1 || batch < 1 || n_pairs < 1)
        throw ShapeError("erasure config: iterations, batch and pairs must be >= 1");
}

std::string ErasureConfig::to_json() const {
    nlohmann::json j;
    j["alpha"] = alpha;
    j["gamma"] = gamma;
    j["preserve_weight"] = preserve_weight;
    j["context_mode"] = context_mode_name(context_mode);
    std::vector<std::string> groups;
    for (auto g : trainable) groups.push_back(group_name(g));
    j["trainable"] = groups;
    j["erase"] = erase_loss_name(erase);
    j["preserve"] = preserve_loss_name(preserve);
    j["lr"] = lr;
    j["iterations"] = iterations;
    j["batch"] = batch;
    j["n_pairs"] = n_pairs;
    j["esd_eta"] = esd_eta;
    return j.dump(2);
}

ErasureConfig ErasureConfig::from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    ErasureConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("alpha", c.alpha);
    get("gamma", c.gamma);
    get("preserve_weight", c.preserve_weight);
    if (j.contains("context_mode")) c.context_mode = context_mode_from(j.at("context_mode"));
    if (j.contains("trainable")) {
        c.trainable.clear();
        for (const auto& g : j.at("trainable")) {
            const std::string s = g.get<std::string>();
            bool known = false;
            for (auto pg : {ParamGroup::EMB, ParamGroup::SA, ParamGroup::CA, ParamGroup::FFN})
                if (group_name(pg) == s) {
                    c.trainable.insert(pg);
                    known = true;
                }
            if (!known) throw ShapeError("erasure config: trainable: unknown group '" + s + "'");
        }
    }
    if (j.contains("erase")) c.erase = erase_loss_from(j.at("erase"));
    if (j.contains("preserve")) c.preserve = preserve_loss_from(j.at("preserve"));
    get("lr", c.lr);
    get("iterations", c.iterations);
    get("batch", c.batch);
    get("n_pairs", c.n_pairs);
    get("esd_eta", c.esd_eta);
    c.validate();
    return c;
}

FilterMask filter_mask(const std::vector<double>& bit_losses, const ScaleSchedule& schedule,
                       int bit_depth, double gamma, double alpha) {
    FilterMask mask;
    int64_t off = 0;
    for (const auto& [h, w] : schedule.resolutions) {
        std::vector<uint8_t> grid(size_t(h) * w, 0);
        for (int64_t t = 0; t < int64_t(h) * w; ++t) {
            int incorrect = 0;
            for (int b = 0; b < bit_depth; ++b) {
                const double loss = bit_losses[size_t(off + t * bit_depth + b)];
                if (!std::isfinite(loss)) throw DomainError("filter_mask: non-finite loss field");
                if (loss >= gamma) ++incorrect;
            }
            grid[size_t(t)] = (double(incorrect) / double(bit_depth)) > alpha ? 1 : 0;
        }
        mask.scales.push_back(std::move(grid));
        off += int64_t(h) * w * bit_depth;
    }
    if (off != int64_t(bit_losses.size()))
        throw ShapeError("filter_mask: loss field size does not match the schedule");
    return mask;
}

EraseRunResult run_erasure(const Params& teacher, const std::vector<PromptPair>& pairs,
                           const ErasureConfig& cfg, const EraseProgressFn& progress) {
    cfg.validate();
    if (pairs.empty()) throw ShapeError("run_erasure: no prompt pairs");

    // contexts, targets and teacher probabilities are generated once per pair
    std::vector<PairData<float>> cache;
    cache.reserve(pairs.size());
    for (const auto& p : pairs) cache.push_back(prepare_pair(teacher, p, cfg.context_mode));

    EraseRunResult result;
    result.student = teacher.clone();
    AdamW<float> opt;
    opt.lr = float(cfg.lr);

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        std::vector<const PairData<float>*> batch;
        for (int b = 0; b < cfg.batch; ++b)
            batch.push_back(&cache[size_t((int64_t(iter) * cfg.batch + b) % int64_t(cache.size()))]);
        auto stats = svare_step(result.student, batch, cfg, opt);
        result.log.push_back(stats);
        if (progress) progress(iter, stats);
    }
    return result;
}

std::string erase_log_csv(const std::vector<EraseStepStats>& log) {
    std::ostringstream os;
    size_t scales = 0;
    for (const auto& row : log) scales = std::max(scales, row.mask_fraction.size());
    os << "iter,erase,preserve,total";
    for (size_t s = 0; s < scales; ++s) os << ",mask_frac_s" << (s + 1);
    os << "\n";
    for (size_t i = 0; i < log.size(); ++i) {
        const auto& r = log[i];
        os << i << "," << r.l_erase << "," << r.l_pre << "," << r.total;
        for (size_t s = 0; s < scales; ++s)
            os << "," << (s < r.mask_fraction.size() ? r.mask_fraction[s] : 0.0);
        os << "\n";
    }
    return os.str();
}

}  // namespace vare
