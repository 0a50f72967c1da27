#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "collapse_lab/numerics/matrix.hpp"
#include "collapse_lab/numerics/ops.hpp"

namespace collapse_lab::ad {

class Tape;

/// Handle to a node on a tape. Only meaningful together with its tape.
struct Var {
    std::uint32_t id = 0;
};

/// Reverse-mode autodiff record. Nodes are appended in evaluation order, so
/// parents always precede children and backward() is a single reverse sweep.
///
/// A tape is single-owner; build one per forward pass.
class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

    Var constant(Matrix value);
    Var parameter(Matrix value);

    /// Appends a derived node. `backward` receives d(loss)/d(this) and must
    /// accumulate into its parents via accumulate(). Pass an empty function if
    /// no parent requires a gradient.
    Var record(Matrix value, bool requires_grad, Backward backward);

    [[nodiscard]] const Matrix& value(Var v) const { return nodes_[v.id].value; }
    [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    [[nodiscard]] bool is_parameter(Var v) const { return nodes_[v.id].parameter; }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    void accumulate(Var v, const Matrix& g);

    /// Seeds d(loss)/d(loss) = 1 on a 1x1 node and sweeps the tape once.
    void backward(Var loss);

    /// Gradient of a node after backward(); zeros if the node was not reached.
    [[nodiscard]] Matrix grad(Var v) const;

private:
    struct Node {
        Matrix value;
        Matrix grad;
        Backward backward;
        bool requires_grad = false;
        bool parameter = false;
    };
    std::vector<Node> nodes_;
};

// Primitive operations. All shapes are checked; mismatches raise ShapeMismatch.
Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
/// a (d x N) + bias (d x 1) broadcast across columns.
Var add_bias(Tape& t, Var a, Var bias);
Var scale(Tape& t, Var a, double s);
Var transpose(Tape& t, Var a);
Var relu(Tape& t, Var a);
Var layer_norm(Tape& t, Var a, NormMode mode);
Var masked_softmax(Tape& t, Var scores, Index segment);
/// Squared Frobenius norm as a 1x1 node.
Var sum_squares(Tape& t, Var a);
Var cross_entropy(Tape& t, Var logits, const Matrix& targets);
Var mse(Tape& t, Var logits, const Matrix& targets);

}  // namespace collapse_lab::ad
