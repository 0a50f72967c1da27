#include "collapse_lab/data.hpp"

#include <map>

namespace collapse_lab {

Equivalence singleton_classes(Index N) {
    Equivalence e(static_cast<std::size_t>(N));
    for (Index i = 0; i < N; ++i) e[static_cast<std::size_t>(i)] = {i};
    return e;
}

Equivalence identical_columns(const Matrix& X) {
    Equivalence e;
    std::map<std::vector<double>, std::size_t> seen;
    for (Index j = 0; j < X.cols(); ++j) {
        std::vector<double> key(static_cast<std::size_t>(X.rows()));
        for (Index i = 0; i < X.rows(); ++i) key[static_cast<std::size_t>(i)] = X(i, j);
        auto [it, fresh] = seen.emplace(std::move(key), e.size());
        if (fresh) e.emplace_back();
        e[it->second].push_back(j);
    }
    return e;
}

Equivalence identical_contexts(const TokenBatch& tokens) {
    Equivalence e;
    std::map<std::vector<int>, std::size_t> seen;
    const Index T = tokens.length();
    for (std::size_t s = 0; s < tokens.sequences.size(); ++s) {
        const auto& seq = tokens.sequences[s];
        for (Index t = 0; t < T; ++t) {
            std::vector<int> prefix(seq.begin(), seq.begin() + t + 1);
            auto [it, fresh] = seen.emplace(std::move(prefix), e.size());
            if (fresh) e.emplace_back();
            e[it->second].push_back(static_cast<Index>(s) * T + t);
        }
    }
    return e;
}

}  // namespace collapse_lab
