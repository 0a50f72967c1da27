#pragma once

#include <vector>

#include "collapse_lab/arch/forward.hpp"
#include "collapse_lab/numerics/matrix.hpp"

namespace collapse_lab {

using Labels = std::vector<int>;

/// Groups of sample indices forced to share one feature vector (the relation R).
using Equivalence = std::vector<std::vector<Index>>;

[[nodiscard]] Equivalence singleton_classes(Index N);

/// Columns that are bit-identical form one class; classes ordered by first index.
[[nodiscard]] Equivalence identical_columns(const Matrix& X);

/// Positions (flattened as in TokenBatch) with identical prefixes.
[[nodiscard]] Equivalence identical_contexts(const TokenBatch& tokens);

/// Either vector inputs (X0) or token sequences; one label per sample.
struct Dataset {
    Matrix X0;  // d0 x N; empty for token data
    TokenBatch tokens;
    Index vocab = 0;
    Index context = 0;
    Labels labels;
    Index classes = 0;
    Equivalence equivalence;

    [[nodiscard]] bool is_tokens() const { return !tokens.sequences.empty(); }
    [[nodiscard]] Index samples() const { return static_cast<Index>(labels.size()); }
    [[nodiscard]] Matrix targets() const { return one_hot(labels, classes); }
};

}  // namespace collapse_lab
