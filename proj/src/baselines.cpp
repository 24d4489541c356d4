#include "vare/baselines.hpp"

#include <cmath>

namespace vare {

const std::vector<std::string>& BaselineConfig::methods() {
    static const std::vector<std::string> m{"svare", "vare-mse", "esd-u", "esd-x", "ac-m", "fmn", "uce"};
    return m;
}

ErasureConfig BaselineConfig::to_erasure_config() const {
    ErasureConfig cfg;
    cfg.esd_eta = eta;
    if (method == "svare") {
        cfg.erase = EraseLoss::FCE;
        cfg.preserve = PreserveLoss::KL;
        cfg.trainable = {ParamGroup::CA, ParamGroup::FFN};
    } else if (method == "vare-mse") {
        cfg.erase = EraseLoss::MSE;
        cfg.preserve = PreserveLoss::off;
        cfg.trainable = {ParamGroup::CA, ParamGroup::FFN};
    } else if (method == "esd-u") {
        cfg.erase = EraseLoss::ESD;
        cfg.preserve = PreserveLoss::off;
        cfg.trainable = {ParamGroup::SA, ParamGroup::FFN};
    } else if (method == "esd-x") {
        cfg.erase = EraseLoss::ESD;
        cfg.preserve = PreserveLoss::off;
        cfg.trainable = {ParamGroup::CA, ParamGroup::FFN};
    } else if (method == "ac-m") {
        cfg.erase = EraseLoss::ACM;
        cfg.preserve = PreserveLoss::off;
        cfg.trainable = {ParamGroup::CA, ParamGroup::FFN};
    } else if (method == "fmn") {
        cfg.erase = EraseLoss::FMN;
        cfg.preserve = PreserveLoss::off;
        cfg.trainable = {ParamGroup::CA, ParamGroup::FFN};
    } else if (method == "uce") {
        throw ShapeError("uce is closed-form; it has no fine-tuning configuration");
    } else {
        throw ShapeError("unknown method '" + method + "'");
    }
    return cfg;
}

namespace {

// Solve A x = b in place for n x n A (partial-pivot LU). A and b are copies.
std::vector<double> lu_solve(std::vector<double> a, std::vector<double> b, int n, double lambda) {
    std::vector<int> piv(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) piv[size_t(i)] = i;
    for (int col = 0; col < n; ++col) {
        int best = col;
        double best_abs = std::abs(a[size_t(col) * n + col]);
        for (int r = col + 1; r < n; ++r) {
            const double v = std::abs(a[size_t(r) * n + col]);
            if (v > best_abs) {
                best_abs = v;
                best = r;
            }
        }
        if (best_abs < 1e-12)
            throw DomainError("uce: singular system at column " + std::to_string(col) +
                              (lambda == 0.0 ? "; set lambda > 0 for invertibility" : ""));
        if (best != col) {
            for (int k = 0; k < n; ++k) std::swap(a[size_t(col) * n + k], a[size_t(best) * n + k]);
            std::swap(b[size_t(col)], b[size_t(best)]);
        }
        const double inv = 1.0 / a[size_t(col) * n + col];
        for (int r = col + 1; r < n; ++r) {
            const double f = a[size_t(r) * n + col] * inv;
            if (f == 0.0) continue;
            a[size_t(r) * n + col] = 0.0;
            for (int k = col + 1; k < n; ++k) a[size_t(r) * n + k] -= f * a[size_t(col) * n + k];
            b[size_t(r)] -= f * b[size_t(col)];
        }
    }
    std::vector<double> x(static_cast<size_t>(n));
    for (int r = n - 1; r >= 0; --r) {
        double acc = b[size_t(r)];
        for (int k = r + 1; k < n; ++k) acc -= a[size_t(r) * n + k] * x[size_t(k)];
        x[size_t(r)] = acc / a[size_t(r) * n + r];
    }
    return x;
}

}  // namespace

std::vector<double> uce_update_matrix(
    const std::vector<double>& w, int n,
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& erase_pairs,
    const std::vector<std::vector<double>>& preserve, double lambda) {
    if (int64_t(w.size()) != int64_t(n) * n) throw ShapeError("uce: W must be n x n");
    std::vector<double> S(static_cast<size_t>(int64_t(n) * n), 0.0);
    std::vector<double> Gt(static_cast<size_t>(int64_t(n) * n), 0.0);
    auto outer_add = [&](std::vector<double>& m, const std::vector<double>& a, const std::vector<double>& b) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) m[size_t(i) * n + j] += a[size_t(i)] * b[size_t(j)];
    };
    for (const auto& [cstar, c] : erase_pairs) {
        if (int(cstar.size()) != n || int(c.size()) != n) throw ShapeError("uce: embedding size mismatch");
        outer_add(S, cstar, cstar);
        outer_add(Gt, cstar, c);
    }
    for (const auto& c : preserve) {
        if (int(c.size()) != n) throw ShapeError("uce: embedding size mismatch");
        outer_add(S, c, c);
        outer_add(Gt, c, c);
    }
    for (int i = 0; i < n; ++i) S[size_t(i) * n + i] += lambda;

    // R = G^T W, then solve S W_new = R column by column
    std::vector<double> R(static_cast<size_t>(int64_t(n) * n), 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double g = Gt[size_t(i) * n + k];
            if (g == 0.0) continue;
            for (int j = 0; j < n; ++j) R[size_t(i) * n + j] += g * w[size_t(k) * n + j];
        }
    std::vector<double> out(static_cast<size_t>(int64_t(n) * n), 0.0);
    std::vector<double> col(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) col[size_t(i)] = R[size_t(i) * n + j];
        auto x = lu_solve(S, col, n, lambda);
        for (int i = 0; i < n; ++i) out[size_t(i) * n + j] = x[size_t(i)];
    }
    return out;
}

UceResult uce_closed_form(const Params& teacher,
                          const std::vector<std::pair<int, int>>& erase_word_ids,
                          std::vector<int> preserve_ids, double lambda) {
    const ModelConfig& cfg = teacher.cfg;
    const int D = cfg.dim;
    const auto& table = teacher.at("emb.prompt");
    const int V = table.shape()[0];

    auto embed = [&](int id) {
        if (id < 0 || id >= V) throw ShapeError("uce: word id out of vocabulary");
        std::vector<double> e(static_cast<size_t>(D));
        for (int k = 0; k < D; ++k) e[size_t(k)] = double(table.values()[size_t(id) * D + size_t(k)]);
        return e;
    };

    if (preserve_ids.empty()) {
        for (int id = 0; id < V; ++id) {
            bool excluded = false;
            for (auto [cs, c] : erase_word_ids) excluded = excluded || id == cs;
            if (!excluded) preserve_ids.push_back(id);
        }
    }
    std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs;
    for (auto [cs, c] : erase_word_ids) pairs.emplace_back(embed(cs), embed(c));
    std::vector<std::vector<double>> preserve;
    for (int id : preserve_ids) preserve.push_back(embed(id));

    UceResult result;
    result.params = teacher.clone();
    for (int b = 0; b < cfg.depth; ++b) {
        for (const char* which : {".ca.wk", ".ca.wv"}) {
            const std::string name = "blk" + std::to_string(b) + which;
            auto& tensor = result.params.at(name);
            std::vector<double> w(tensor.values().begin(), tensor.values().end());
            auto w_new = uce_update_matrix(w, D, pairs, preserve, lambda);

            // normal-equation residual: S w_new - G^T w
            std::vector<double> S(w.size(), 0.0), Gt(w.size(), 0.0);
            auto outer_add = [&](std::vector<double>& m, const std::vector<double>& x,
                                 const std::vector<double>& y) {
                for (int i = 0; i < D; ++i)
                    for (int j = 0; j < D; ++j) m[size_t(i) * D + j] += x[size_t(i)] * y[size_t(j)];
            };
            for (const auto& [cs, c] : pairs) {
                outer_add(S, cs, cs);
                outer_add(Gt, cs, c);
            }
            for (const auto& c : preserve) {
                outer_add(S, c, c);
                outer_add(Gt, c, c);
            }
            for (int i = 0; i < D; ++i) S[size_t(i) * D + i] += lambda;
            for (int i = 0; i < D; ++i)
                for (int j = 0; j < D; ++j) {
                    double lhs = 0, rhs = 0;
                    for (int k = 0; k < D; ++k) {
                        lhs += S[size_t(i) * D + k] * w_new[size_t(k) * D + j];
                        rhs += Gt[size_t(i) * D + k] * w[size_t(k) * D + j];
                    }
                    result.max_residual = std::max(result.max_residual, std::abs(lhs - rhs));
                }

            // preserve distortion ||e W* - e W|| / ||e W|| per preserved embedding
            for (const auto& c : preserve) {
                double num = 0, den = 0;
                for (int j = 0; j < D; ++j) {
                    double before = 0, after = 0;
                    for (int i = 0; i < D; ++i) {
                        before += c[size_t(i)] * w[size_t(i) * D + j];
                        after += c[size_t(i)] * w_new[size_t(i) * D + j];
                    }
                    num += (after - before) * (after - before);
                    den += before * before;
                }
                if (den > 0)
                    result.max_preserve_distortion =
                        std::max(result.max_preserve_distortion, std::sqrt(num / den));
            }
            for (size_t i = 0; i < w_new.size(); ++i) tensor.values()[i] = float(w_new[i]);
        }
    }
    return result;
}

}  // namespace vare
