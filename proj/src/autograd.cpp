#include "avit/autograd.hpp"

#include "avit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace avit::ad {

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  if (node_->value.size() != 1) throw ParameterError("item() on non-scalar");
  return node_->value(0, 0);
}

void Var::zero_grad() {
  if (node_) node_->grad.resize(0, 0);
}

void Var::backward() const {
  if (node_->value.size() != 1) throw ParameterError("backward() requires a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad = Mat::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) {
      n->backward_fn(*n);
      // Interior gradients are no longer needed once propagated.
      n->grad.resize(0, 0);
    }
  }
}

namespace {

Var make(Mat value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  Var out(std::move(value), false);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    auto& n = *out.node();
    n.requires_grad = true;
    for (auto& in : inputs) n.parents.push_back(in.node());
    n.backward_fn = std::move(fn);
  }
  return out;
}

inline void push(const Var& v, const Mat& g) {
  if (v.requires_grad()) v.node()->accumulate(g);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ParameterError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

std::vector<Segment> uniform_segments(int count, int length) {
  std::vector<Segment> s(count);
  for (int i = 0; i < count; ++i) s[i] = {i * length, length};
  return s;
}

Var constant(Mat value) { return Var(std::move(value), false); }

Var scalar(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return Var(std::move(m), false);
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ParameterError("matmul: inner dimension mismatch");
  Mat v = a.value() * b.value();
  return make(std::move(v), {a, b}, [a, b](Node& n) {
    if (a.requires_grad()) push(a, n.grad * b.value().transpose());
    if (b.requires_grad()) push(b, a.value().transpose() * n.grad);
  });
}

Var transpose(const Var& a) {
  Mat v = a.value().transpose();
  return make(std::move(v), {a}, [a](Node& n) { push(a, n.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Mat v = a.value() + b.value();
  return make(std::move(v), {a, b}, [a, b](Node& n) {
    push(a, n.grad);
    push(b, n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Mat v = a.value() - b.value();
  return make(std::move(v), {a, b}, [a, b](Node& n) {
    push(a, n.grad);
    if (b.requires_grad()) push(b, -n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Mat v = a.value().cwiseProduct(b.value());
  return make(std::move(v), {a, b}, [a, b](Node& n) {
    if (a.requires_grad()) push(a, n.grad.cwiseProduct(b.value()));
    if (b.requires_grad()) push(b, n.grad.cwiseProduct(a.value()));
  });
}

Var scale(const Var& a, double s) {
  Mat v = a.value() * s;
  return make(std::move(v), {a}, [a, s](Node& n) { push(a, n.grad * s); });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.value().size() != 1) throw ParameterError("scale_by: scale must be 1x1");
  const double sv = s.value()(0, 0);
  Mat v = a.value() * sv;
  return make(std::move(v), {a, s}, [a, s, sv](Node& n) {
    if (a.requires_grad()) push(a, n.grad * sv);
    if (s.requires_grad()) {
      Mat g(1, 1);
      g(0, 0) = n.grad.cwiseProduct(a.value()).sum();
      push(s, g);
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ParameterError("add_row: shape mismatch");
  Mat v = a.value().rowwise() + row.value().row(0);
  return make(std::move(v), {a, row}, [a, row](Node& n) {
    push(a, n.grad);
    if (row.requires_grad()) push(row, n.grad.colwise().sum());
  });
}

Var gelu(const Var& a) {
  static constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double k = 0.044715;
  const Mat& x = a.value();
  Mat th = (c * (x.array() + k * x.array().cube())).tanh().matrix();
  Mat v = (0.5 * x.array() * (1.0 + th.array())).matrix();
  return make(std::move(v), {a}, [a, th](Node& n) {
    const auto& x = a.value().array();
    auto d = 0.5 * (1.0 + th.array()) +
             0.5 * x * (1.0 - th.array().square()) * c * (1.0 + 3.0 * k * x.square());
    push(a, (n.grad.array() * d).matrix());
  });
}

Var tanh(const Var& a) {
  Mat v = a.value().array().tanh().matrix();
  return make(v, {a}, [a, v](Node& n) {
    push(a, (n.grad.array() * (1.0 - v.array().square())).matrix());
  });
}

Var exp(const Var& a) {
  Mat v = a.value().array().exp().matrix();
  return make(v, {a}, [a, v](Node& n) { push(a, n.grad.cwiseProduct(v)); });
}

Var exp_clamped(const Var& a, double ceiling) {
  if (a.value().size() != 1) throw ParameterError("exp_clamped: expects 1x1");
  const double e = std::exp(a.value()(0, 0));
  const bool clipped = e > ceiling;
  Mat v(1, 1);
  v(0, 0) = clipped ? ceiling : e;
  return make(std::move(v), {a}, [a, e, clipped](Node& n) {
    if (!clipped) push(a, n.grad * e);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index r = x.rows(), c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw ParameterError("layer_norm: shape mismatch");
  Mat xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Mat v = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  v.rowwise() += beta.value().row(0);
  return make(std::move(v), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Node& n) {
    const Eigen::Index c = xhat.cols();
    if (gamma.requires_grad()) push(gamma, n.grad.cwiseProduct(xhat).colwise().sum());
    if (beta.requires_grad()) push(beta, n.grad.colwise().sum());
    if (x.requires_grad()) {
      Mat dxhat = (n.grad.array().rowwise() * gamma.value().row(0).array()).matrix();
      Mat dx(xhat.rows(), c);
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(c);
        dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
      push(x, dx);
    }
  });
}

Var row_normalize(const Var& a, double eps) {
  Eigen::VectorXd norms = (a.value().rowwise().squaredNorm().array() + eps).sqrt();
  Mat v = a.value();
  for (Eigen::Index i = 0; i < v.rows(); ++i) v.row(i) /= norms(i);
  return make(v, {a}, [a, v, norms](Node& n) {
    Mat g(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      const double d = v.row(i).dot(n.grad.row(i));
      g.row(i) = (n.grad.row(i) - v.row(i) * d) / norms(i);
    }
    push(a, g);
  });
}

Var slice_rows(const Var& a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ParameterError("slice_rows: out of range");
  Mat v = a.value().middleRows(start, count);
  return make(std::move(v), {a}, [a, start, count](Node& n) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    g.middleRows(start, count) = n.grad;
    push(a, g);
  });
}

Var slice_cols(const Var& a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ParameterError("slice_cols: out of range");
  Mat v = a.value().middleCols(start, count);
  return make(std::move(v), {a}, [a, start, count](Node& n) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    g.middleCols(start, count) = n.grad;
    push(a, g);
  });
}

Var gather_rows(const Var& a, const std::vector<int>& index) {
  Mat v(static_cast<Eigen::Index>(index.size()), a.cols());
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw ParameterError("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return make(std::move(v), {a}, [a, index](Node& n) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    for (size_t i = 0; i < index.size(); ++i) g.row(index[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    push(a, g);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ParameterError("concat_rows: empty");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ParameterError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make(std::move(v), parts, [parts](Node& n) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) push(p, n.grad.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ParameterError("concat_cols: empty");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ParameterError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make(std::move(v), parts, [parts](Node& n) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) push(p, n.grad.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

Var segment_mean(const Var& a, const std::vector<Segment>& segments) {
  Mat v(static_cast<Eigen::Index>(segments.size()), a.cols());
  for (size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.length <= 0 || seg.offset + seg.length > a.rows()) throw ParameterError("segment_mean: bad segment");
    v.row(static_cast<Eigen::Index>(s)) = a.value().middleRows(seg.offset, seg.length).colwise().mean();
  }
  return make(std::move(v), {a}, [a, segments](Node& n) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    for (size_t s = 0; s < segments.size(); ++s) {
      const auto& seg = segments[s];
      g.middleRows(seg.offset, seg.length).rowwise() +=
          n.grad.row(static_cast<Eigen::Index>(s)) / static_cast<double>(seg.length);
    }
    push(a, g);
  });
}

Var sum(const Var& a) {
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  return make(std::move(v), {a}, [a](Node& n) {
    push(a, Mat::Constant(a.rows(), a.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / count);
}

Var mse(const Var& pred, const Var& target) {
  check_same_shape(pred, target, "mse");
  Mat diff = pred.value() - target.value();
  const double count = static_cast<double>(diff.size());
  Mat v(1, 1);
  v(0, 0) = diff.squaredNorm() / count;
  return make(std::move(v), {pred, target}, [pred, target, diff, count](Node& n) {
    const double s = 2.0 * n.grad(0, 0) / count;
    if (pred.requires_grad()) push(pred, diff * s);
    if (target.requires_grad()) push(target, diff * (-s));
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw ParameterError("cross_entropy: target count mismatch");
  }
  const Eigen::Index r = logits.rows(), c = logits.cols();
  Mat probs(r, c);
  double total = 0.0;
  int valid = 0;
  for (Eigen::Index i = 0; i < r; ++i) {
    const double mx = logits.value().row(i).maxCoeff();
    auto e = (logits.value().row(i).array() - mx).exp();
    const double z = e.sum();
    probs.row(i) = e / z;
    const int t = targets[static_cast<size_t>(i)];
    if (t >= 0) {
      if (t >= c) throw ParameterError("cross_entropy: target out of range");
      total += -(logits.value()(i, t) - mx - std::log(z));
      ++valid;
    }
  }
  Mat v(1, 1);
  v(0, 0) = valid > 0 ? total / valid : 0.0;
  return make(std::move(v), {logits}, [logits, targets, probs, valid](Node& n) {
    Mat g = Mat::Zero(probs.rows(), probs.cols());
    if (valid == 0) return;
    const double s = n.grad(0, 0) / valid;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      const int t = targets[static_cast<size_t>(i)];
      if (t < 0) continue;
      g.row(i) = probs.row(i) * s;
      g(i, t) -= s;
    }
    push(logits, g);
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads,
              const std::vector<Segment>& q_segments, const std::vector<Segment>& k_segments,
              bool causal) {
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw ParameterError("attention: shape mismatch");
  if (heads <= 0 || d % heads != 0) throw ParameterError("attention: width not divisible by heads");
  if (q_segments.size() != k_segments.size()) throw ParameterError("attention: segment count mismatch");
  const int dh = static_cast<int>(d / heads);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Mat>>();
  probs->reserve(q_segments.size() * static_cast<size_t>(heads));
  Mat out = Mat::Zero(q.rows(), d);
  for (size_t s = 0; s < q_segments.size(); ++s) {
    const auto& qs = q_segments[s];
    const auto& ks = k_segments[s];
    if (ks.length <= 0) throw ParameterError("attention: empty key segment");
    for (int h = 0; h < heads; ++h) {
      auto qh = q.value().block(qs.offset, h * dh, qs.length, dh);
      auto kh = k.value().block(ks.offset, h * dh, ks.length, dh);
      auto vh = v.value().block(ks.offset, h * dh, ks.length, dh);
      Mat sco = (qh * kh.transpose()) * sc;
      for (int i = 0; i < qs.length; ++i) {
        int limit = ks.length;
        if (causal) limit = std::min(ks.length, i + ks.length - qs.length + 1);
        const double mx = sco.row(i).head(limit).maxCoeff();
        double z = 0.0;
        for (int j = 0; j < ks.length; ++j) {
          const double e = j < limit ? std::exp(sco(i, j) - mx) : 0.0;
          sco(i, j) = e;
          z += e;
        }
        sco.row(i) /= z;
      }
      out.block(qs.offset, h * dh, qs.length, dh) = sco * vh;
      probs->push_back(std::move(sco));
    }
  }
  return make(std::move(out), {q, k, v},
              [q, k, v, heads, dh, sc, q_segments, k_segments, probs](Node& n) {
                Mat gq = Mat::Zero(q.rows(), q.cols());
                Mat gk = Mat::Zero(k.rows(), k.cols());
                Mat gv = Mat::Zero(v.rows(), v.cols());
                size_t idx = 0;
                for (size_t s = 0; s < q_segments.size(); ++s) {
                  const auto& qs = q_segments[s];
                  const auto& ks = k_segments[s];
                  for (int h = 0; h < heads; ++h, ++idx) {
                    const Mat& p = (*probs)[idx];
                    auto qh = q.value().block(qs.offset, h * dh, qs.length, dh);
                    auto kh = k.value().block(ks.offset, h * dh, ks.length, dh);
                    auto vh = v.value().block(ks.offset, h * dh, ks.length, dh);
                    auto go = n.grad.block(qs.offset, h * dh, qs.length, dh);
                    gv.block(ks.offset, h * dh, ks.length, dh) += p.transpose() * go;
                    Mat dp = go * vh.transpose();
                    Eigen::VectorXd rs = dp.cwiseProduct(p).rowwise().sum();
                    Mat ds = p.cwiseProduct(dp.colwise() - rs) * sc;
                    gq.block(qs.offset, h * dh, qs.length, dh) += ds * kh;
                    gk.block(ks.offset, h * dh, ks.length, dh) += ds.transpose() * qh;
                  }
                }
                push(q, gq);
                push(k, gk);
                push(v, gv);
              });
}

Var unfold1d(const Var& x, int kernel, const std::vector<Segment>& segments) {
  if (kernel <= 0 || kernel % 2 == 0) throw ParameterError("unfold1d: kernel must be odd and positive");
  const Eigen::Index c = x.cols();
  const int half = kernel / 2;
  Mat v = Mat::Zero(x.rows(), c * kernel);
  for (const auto& seg : segments) {
    for (int t = 0; t < seg.length; ++t) {
      for (int j = 0; j < kernel; ++j) {
        const int src = std::clamp(t + j - half, 0, seg.length - 1);
        v.block(seg.offset + t, j * c, 1, c) = x.value().row(seg.offset + src);
      }
    }
  }
  return make(std::move(v), {x}, [x, kernel, half, segments](Node& n) {
    const Eigen::Index c = x.cols();
    Mat g = Mat::Zero(x.rows(), c);
    for (const auto& seg : segments) {
      for (int t = 0; t < seg.length; ++t) {
        for (int j = 0; j < kernel; ++j) {
          const int src = std::clamp(t + j - half, 0, seg.length - 1);
          g.row(seg.offset + src) += n.grad.block(seg.offset + t, j * c, 1, c);
        }
      }
    }
    push(x, g);
  });
}

}  // namespace avit::ad
