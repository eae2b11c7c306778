#include "avit/trainkit.hpp"

#include "avit/errors.hpp"

#include <algorithm>
#include <cmath>

namespace avit {

Var ParamSet::add(const std::string& name, Mat init) {
  if (index_.count(name)) throw ParameterError("duplicate parameter name: " + name);
  index_[name] = vars_.size();
  names_.push_back(name);
  vars_.emplace_back(std::move(init), true);
  return vars_.back();
}

const Var& ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter: " + name);
  return vars_[it->second];
}

Eigen::Index ParamSet::numel() const {
  Eigen::Index n = 0;
  for (const auto& v : vars_) n += v.value().size();
  return n;
}

Eigen::VectorXd ParamSet::flat_values() const {
  Eigen::VectorXd out(numel());
  Eigen::Index at = 0;
  for (const auto& v : vars_) {
    out.segment(at, v.value().size()) = Eigen::Map<const Eigen::VectorXd>(v.value().data(), v.value().size());
    at += v.value().size();
  }
  return out;
}

void ParamSet::set_flat_values(const Eigen::VectorXd& flat) {
  if (flat.size() != numel()) throw ParameterError("set_flat_values: size mismatch");
  Eigen::Index at = 0;
  for (auto& v : vars_) {
    Mat& m = v.mutable_value();
    Eigen::Map<Eigen::VectorXd>(m.data(), m.size()) = flat.segment(at, m.size());
    at += m.size();
  }
}

Eigen::VectorXd ParamSet::flat_grads() const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(numel());
  Eigen::Index at = 0;
  for (const auto& v : vars_) {
    const Eigen::Index n = v.value().size();
    if (v.grad().size() == n) out.segment(at, n) = Eigen::Map<const Eigen::VectorXd>(v.grad().data(), n);
    at += n;
  }
  return out;
}

void ParamSet::assign(const std::string& name, const Mat& value) {
  Var v = get(name);
  if (v.rows() != value.rows() || v.cols() != value.cols()) {
    throw FormatError("shape mismatch assigning parameter " + name);
  }
  v.mutable_value() = value;
}

void ParamSet::zero_grad() {
  for (auto& v : vars_) v.zero_grad();
}

void ParamSet::merge(const ParamSet& other, const std::string& prefix) {
  for (std::size_t i = 0; i < other.names_.size(); ++i) {
    const std::string name = prefix + other.names_[i];
    if (index_.count(name)) throw ParameterError("duplicate parameter name: " + name);
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(other.vars_[i]);
  }
}

GradMap collect_grads(const ParamSet& params) {
  GradMap out;
  for (const auto& name : params.names()) {
    const Var& v = params.get(name);
    out[name] = v.grad().size() == v.value().size() ? v.grad() : Mat::Zero(v.rows(), v.cols());
  }
  return out;
}

void adam_step(ParamSet& params, const GradMap& grads, AdamState& state) {
  const auto& c = state.config;
  for (const auto& [name, g] : grads) {
    const Var& p = params.get(name);
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw ParameterError("adam_step: shape mismatch for " + name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Var p = params.get(name);
    auto [mit, m_new] = state.m.try_emplace(name, Mat::Zero(g.rows(), g.cols()));
    auto [vit, v_new] = state.v.try_emplace(name, Mat::Zero(g.rows(), g.cols()));
    Mat& m = mit->second;
    Mat& v = vit->second;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    auto mhat = m.array() / bc1;
    auto vhat = v.array() / bc2;
    p.mutable_value().array() -= c.lr * mhat / (vhat.sqrt() + c.eps);
  }
}

void clip_grad_norm(GradMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    for (auto& [_, g] : grads) g *= max_norm / norm;
  }
}

double grad_check(const FlatObjective& objective, const Eigen::VectorXd& x0, const GradCheckOptions& options) {
  if (options.eps < 1e-6 || options.eps > 1e-3) throw ParameterError("grad_check: eps must lie in [1e-6, 1e-3]");
  Eigen::VectorXd analytic(x0.size());
  const double f0 = objective(x0, &analytic);
  if (!std::isfinite(f0)) throw NumericError("grad_check: non-finite loss");

  std::vector<int> coords(static_cast<std::size_t>(x0.size()));
  for (int i = 0; i < x0.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
  if (options.max_coords > 0 && options.max_coords < x0.size()) {
    Rng rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(options.max_coords));
  }

  double worst = 0.0;
  Eigen::VectorXd x = x0;
  for (int i : coords) {
    x(i) = x0(i) + options.eps;
    const double fp = objective(x, nullptr);
    x(i) = x0(i) - options.eps;
    const double fm = objective(x, nullptr);
    x(i) = x0(i);
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: non-finite loss");
    const double numeric = (fp - fm) / (2.0 * options.eps);
    const double a = analytic(i);
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

double grad_check(const std::function<Var()>& loss_fn, ParamSet& params, const GradCheckOptions& options) {
  const Eigen::VectorXd saved = params.flat_values();
  FlatObjective objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    params.set_flat_values(x);
    params.zero_grad();
    Var loss = loss_fn();
    if (grad) {
      loss.backward();
      *grad = params.flat_grads();
    }
    return loss.item();
  };
  const double err = grad_check(objective, saved, options);
  params.set_flat_values(saved);
  params.zero_grad();
  return err;
}

namespace init {

Mat normal(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Mat m(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat xavier(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  return normal(rng, rows, cols, std::sqrt(2.0 / static_cast<double>(rows + cols)));
}

}  // namespace init

}  // namespace avit
