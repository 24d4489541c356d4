#pragma once

// Adapted baseline erasure methods. The gradient-based ones are erase-loss
// variants dispatched through the erasure loop; UCE edits cross-attention
// key/value projections with a closed-form ridge solve.

#include <string>
#include <utility>
#include <vector>

#include "vare/erasure.hpp"

namespace vare {

struct BaselineConfig {
    std::string method = "svare";  // svare|vare-mse|esd-u|esd-x|ac-m|fmn|uce
    float eta = 1.0f;              // ESD guidance
    double lambda = 1e-4;          // UCE ridge

    static const std::vector<std::string>& methods();
    bool closed_form() const { return method == "uce"; }

    // Per-method loss selection and trainable-group defaults.
    ErasureConfig to_erasure_config() const;
};

// Closed-form update of one row-acting projection (y = e * W, W is n x n):
//   W_new = S^{-1} G^T W,  S = sum c* c*^T + sum c_j c_j^T + lambda I,
//   G^T   = sum c* c^T + sum c_j c_j^T
// solved densely with partial-pivot LU in 64-bit. Throws on a singular
// system and suggests lambda > 0.
std::vector<double> uce_update_matrix(const std::vector<double>& w, int n,
                                      const std::vector<std::pair<std::vector<double>, std::vector<double>>>&
                                          erase_pairs,  // (concept c*, replacement c)
                                      const std::vector<std::vector<double>>& preserve, double lambda);

struct UceResult {
    Params params;
    double max_residual = 0;            // normal-equation residual over all edited matrices
    double max_preserve_distortion = 0;  // max_j ||W* c_j - W c_j|| / ||W c_j||
};

// Applies the update to W_k/W_v of every block's cross-attention. Condition
// embeddings come from the prompt-embedding table rows of the word ids;
// preserve_ids defaults to all other vocabulary words when empty.
UceResult uce_closed_form(const Params& teacher,
                          const std::vector<std::pair<int, int>>& erase_word_ids,  // (concept, replacement)
                          std::vector<int> preserve_ids, double lambda);

}  // namespace vare
