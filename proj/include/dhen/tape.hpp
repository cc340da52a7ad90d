#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "dhen/tensor.hpp"

namespace dhen {

using NodeId = std::size_t;
using IdBags = std::vector<std::vector<std::size_t>>;

enum class OpKind {
  kConstant,
  kParam,
  kMatMul,
  kAdd,
  kMul,
  kTranspose,
  kConcat,
  kSlice,
  kRelu,
  kSigmoid,
  kSoftmax,
  kLayerNorm,
  kMean,
  kReshape,
  kSum,
  kScale,
  kScaleBy,
  kConv2d,
  kGather,
  kEmbeddingBag,
  kLogLoss,
};

const char* op_name(OpKind op);

struct OpAttrs {
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  double scalar = 0.0;
  Shape shape;
  std::vector<std::size_t> indices;
  std::shared_ptr<const IdBags> bags;
};

// One primitive application. Entries are stored in creation order, so every
// input id precedes the entry's own id.
struct TapeEntry {
  OpKind op = OpKind::kConstant;
  std::vector<NodeId> inputs;
  OpAttrs attrs;
  Tensor value;
  Tensor saved;
  Param* param = nullptr;
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  NodeId id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

class Tape {
 public:
  static constexpr double kDefaultLayerNormEpsilon = 1e-5;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(Param& p);

  Var record(OpKind op, std::vector<NodeId> inputs, OpAttrs attrs);

  std::size_t size() const { return entries_.size(); }
  const TapeEntry& entry(NodeId id) const;
  const Tensor& value(NodeId id) const { return entry(id).value; }

  // Reverse sweep from a scalar node. Parameter gradients are added to
  // Param::grad, so repeated calls accumulate.
  void backward(NodeId loss);

  // Recomputes every node from the recorded leaves.
  std::vector<Tensor> replay() const;

  // Multiply-adds performed by matmul and conv2d entries so far.
  std::uint64_t multiply_adds() const { return multiply_adds_; }

 private:
  // A deque keeps references to earlier entries valid while recording.
  std::deque<TapeEntry> entries_;
  std::uint64_t multiply_adds_ = 0;
};

// Primitive operations. Every op validates shapes and throws ShapeError or
// AxisError naming the op.

// [p,q]x[q,r], [B,p,q]x[q,r] and [B,p,q]x[B,q,r].
Var matmul(Var a, Var b);
// Same shapes, or b a vector matching the last axis of a.
Var add(Var a, Var b);
Var mul(Var a, Var b);
// Swaps the last two axes.
Var transpose(Var x);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
Var relu(Var x);
Var sigmoid(Var x);
Var softmax(Var x, std::size_t axis);
// Normalizes over the last axis; no affine term.
Var layer_norm(Var x, double epsilon = Tape::kDefaultLayerNormEpsilon);
// Removes the reduced axis (a rank-1 input reduces to shape {1}).
Var mean(Var x, std::size_t axis);
Var reshape(Var x, Shape shape);
Var sum(Var x);
Var scale(Var x, double factor);
// Multiplies x by a one-element node.
Var scale_by(Var x, Var factor);
// x [B,H,W], filters [C,kh,kw] with odd extents, same padding -> [B,C,H,W].
Var conv2d(Var x, Var filters);
// Picks flat positions from each sample's trailing block: [B,...] -> [B,n].
Var gather(Var x, std::vector<std::size_t> flat_indices);
// Sum-pools table rows per bag: table [rows,d] -> [bags, d].
Var embedding_bag(Var table, std::shared_ptr<const IdBags> bags);
// Mean binary cross-entropy of probabilities against constant labels, with
// probabilities clamped to [kProbClamp, 1 - kProbClamp].
Var log_loss(Var probs, Var labels);

inline constexpr double kProbClamp = 1e-12;

// Central-difference estimate of d f / d p, one coordinate at a time.
Tensor finite_diff_grad(const std::function<double()>& f, Param& p, double step = 1e-5);

// Same estimate restricted to the listed flat coordinates.
std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Param& p,
                                        std::span<const std::size_t> coords, double step = 1e-5);

// Unbiased rounding onto the grid {k * grid_step}.
double stochastic_round(double x, double grid_step, std::mt19937_64& rng);

}  // namespace dhen
