#include "collapse_lab/rng.hpp"

namespace collapse_lab {

Matrix gaussian_matrix(Rng& rng, Index rows, Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
    return m;
}

}  // namespace collapse_lab
