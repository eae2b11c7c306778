#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every op records a backward closure when at least one input
// requires a gradient; pure inference builds no graph.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

namespace avit::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Mat& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false);

  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  /// Seeds d(this)/d(this) = 1 (scalar only) and propagates to all leaves.
  void backward() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Segment of a stacked batch: rows [offset, offset + length).
struct Segment {
  int offset = 0;
  int length = 0;
};

std::vector<Segment> uniform_segments(int count, int length);

Var constant(Mat value);
Var scalar(double v);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Multiplies every entry of `a` by the 1x1 variable `s`.
Var scale_by(const Var& a, const Var& s);
Var add_row(const Var& a, const Var& row);

Var gelu(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
/// exp(a) for a 1x1 input, clipped from above at `ceiling` (zero gradient once clipped).
Var exp_clamped(const Var& a, double ceiling);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Divides each row by its L2 norm.
Var row_normalize(const Var& a, double eps = 1e-12);

Var slice_rows(const Var& a, int start, int count);
Var slice_cols(const Var& a, int start, int count);
Var gather_rows(const Var& a, const std::vector<int>& index);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// One output row per segment holding the mean of that segment's rows.
Var segment_mean(const Var& a, const std::vector<Segment>& segments);

Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& pred, const Var& target);
/// Mean over rows with target >= 0 of -log softmax(logits_row)[target].
Var cross_entropy(const Var& logits, const std::vector<int>& targets);

/// Multi-head scaled dot-product attention. Queries of segment i attend only
/// to keys of segment i. With `causal`, query row r of a segment sees key rows
/// [0, r + k_len - q_len].
Var attention(const Var& q, const Var& k, const Var& v, int heads,
              const std::vector<Segment>& q_segments, const std::vector<Segment>& k_segments,
              bool causal);

/// Length-preserving 1-D unfold: row t becomes the concatenation of rows
/// t - k/2 .. t + k/2 of its segment, edge rows repeated past either end.
Var unfold1d(const Var& x, int kernel, const std::vector<Segment>& segments);

}  // namespace avit::ad
