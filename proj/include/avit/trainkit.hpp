#pragma once

// Training substrate: named parameter container, Adam, finite-difference
// gradient checker.

#include "avit/autograd.hpp"
#include "avit/rng.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace avit {

using ad::Mat;
using ad::Var;

class ParamSet {
 public:
  /// Registers a trainable tensor. Names must be unique.
  Var add(const std::string& name, Mat init);

  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  Eigen::Index numel() const;

  Eigen::VectorXd flat_values() const;
  void set_flat_values(const Eigen::VectorXd& flat);
  /// Gradient of every tensor, zeros where nothing was accumulated.
  Eigen::VectorXd flat_grads() const;

  /// Overwrites a tensor's value in place; shapes are immutable.
  void assign(const std::string& name, const Mat& value);
  void zero_grad();

  /// Appends every tensor of `other` under `prefix`, sharing storage.
  void merge(const ParamSet& other, const std::string& prefix = "");

 private:
  std::vector<std::string> names_;
  std::vector<Var> vars_;
  std::map<std::string, std::size_t> index_;
};

using GradMap = std::map<std::string, Mat>;

/// Snapshot of the autograd gradients held by `params` (zeros if untouched).
GradMap collect_grads(const ParamSet& params);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  long step = 0;
  std::map<std::string, Mat> m;
  std::map<std::string, Mat> v;
};

/// Bias-corrected Adam update applied in place to every tensor in `grads`.
void adam_step(ParamSet& params, const GradMap& grads, AdamState& state);

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
void clip_grad_norm(GradMap& grads, double max_norm);

// Value-and-gradient over a flat parameter vector.
using FlatObjective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every coordinate; otherwise a seeded random subset of this size.
  int max_coords = 0;
  std::uint64_t seed = 0;
};

/// Central-difference check. Returns max |a-n| / max(1, |a|, |n|).
double grad_check(const FlatObjective& objective, const Eigen::VectorXd& x0,
                  const GradCheckOptions& options = {});

/// Same check for a scalar autograd loss built from `params`.
double grad_check(const std::function<Var()>& loss_fn, ParamSet& params,
                  const GradCheckOptions& options = {});

namespace init {
Mat normal(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev);
/// Glorot-style scaled normal for a rows x cols weight.
Mat xavier(Rng& rng, Eigen::Index rows, Eigen::Index cols);
}  // namespace init

}  // namespace avit
