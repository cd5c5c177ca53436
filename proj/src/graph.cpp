#include "moesplit/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "moesplit/ops.hpp"

namespace moesplit {

// ---------------------------------------------------------------------------
// ParamSet

template <typename T>
void ParamSet<T>::add(std::string name, Tensor<T>& value) {
  if (index_.count(&value)) throw ContractError("parameter registered twice: " + name);
  index_.emplace(&value, entries_.size());
  entries_.push_back(Entry{std::move(name), &value, Tensor<T>(value.shape())});
}

template <typename T>
typename ParamSet<T>::Entry* ParamSet<T>::find(const Tensor<T>* value) {
  auto it = index_.find(value);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

template <typename T>
const typename ParamSet<T>::Entry* ParamSet<T>::find(const Tensor<T>* value) const {
  auto it = index_.find(value);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

template <typename T>
std::size_t ParamSet<T>::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value->size();
  return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& e : entries_) e.grad.fill(T(0));
}

template <typename T>
double ParamSet<T>::grad_norm() const {
  double ss = 0;
  for (const auto& e : entries_)
    for (T g : e.grad.data()) ss += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(ss);
}

template <typename T>
void ParamSet<T>::scale_grad(double factor) {
  for (auto& e : entries_)
    for (T& g : e.grad.data()) g = static_cast<T>(g * factor);
}

// ---------------------------------------------------------------------------
// Graph plumbing

template <typename T>
Graph<T>::Graph(ParamSet<T>* params, bool record) : params_(params), record_(record) {
  nodes_.reserve(512);
}

template <typename T>
Var Graph<T>::push(Tensor<T> value, bool requires_grad, std::function<void(Graph&)> back) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  return push(std::move(value), false, nullptr);
}

template <typename T>
Var Graph<T>::constant_ref(const Tensor<T>& value) {
  Node n;
  n.ext = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::weight(const Tensor<T>& value) {
  if (auto it = bound_.find(&value); it != bound_.end()) return Var{it->second};
  Var v = constant_ref(value);
  if (record_ && params_ != nullptr) {
    if (auto* e = params_->find(&value)) {
      nodes_[v.id].requires_grad = true;
      nodes_[v.id].param = static_cast<long>(e - params_->entries().data());
    }
  }
  bound_.emplace(&value, v.id);
  return v;
}

template <typename T>
Var Graph<T>::detach(Var x) {
  return constant(value(x));
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.ext ? *n.ext : n.own;
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var v) const {
  return nodes_.at(v.id).grad;
}

template <typename T>
bool Graph<T>::requires_grad(Var v) const {
  return nodes_.at(v.id).requires_grad;
}

template <typename T>
Tensor<T>& Graph<T>::grad_buf(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor<T>((n.ext ? *n.ext : n.own).shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
  }
  visits_.clear();
  if (!nodes_[loss.id].requires_grad) return;
  grad_buf(loss.id)[0] = T(1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    visits_.push_back(id);
    if (n.back) n.back(*this);
  }
  if (params_ == nullptr) return;
  for (const Node& n : nodes_) {
    if (n.param < 0 || n.grad.size() == 0) continue;
    auto& slot = params_->entries()[static_cast<std::size_t>(n.param)].grad;
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += n.grad[i];
  }
}

template <typename T>
void Graph<T>::note_decision(std::uint64_t token) {
  decision_hash_ ^= token + 0x9e3779b97f4a7c15ULL + (decision_hash_ << 6) + (decision_hash_ >> 2);
}

// ---------------------------------------------------------------------------
// Operations

template <typename T>
Var Graph<T>::matmul(Var x, Var w) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& wv = value(w);
  if (wv.rank() != 2 || xv.cols() != wv.shape()[0]) {
    throw DimensionError("matmul: input " + shape_str(xv.shape()) + " incompatible with weight " +
                         shape_str(wv.shape()));
  }
  const std::size_t m = xv.rows(), k = wv.shape()[0], n = wv.shape()[1];
  Tensor<T> y({m, n});
  kernels::matmul_acc(xv.data().data(), wv.data().data(), y.data().data(), m, k, n);
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(x) || needs(w), [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    if (g.nodes_[x.id].requires_grad) {
      kernels::matmul_acc_bt(gy.data().data(), g.value(w).data().data(), g.grad_buf(x.id).data().data(),
                             m, k, n);
    }
    if (g.nodes_[w.id].requires_grad) {
      kernels::matmul_acc_at(g.value(x).data().data(), gy.data().data(), g.grad_buf(w.id).data().data(),
                             m, k, n);
    }
  });
}

template <typename T>
Var Graph<T>::add_bias(Var x, Var b) {
  Tensor<T> y = moesplit::add_bias(value(x), value(b));
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(x) || needs(b), [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    if (g.nodes_[x.id].requires_grad) {
      auto& gx = g.grad_buf(x.id);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (g.nodes_[b.id].requires_grad) {
      auto& gb = g.grad_buf(b.id);
      const std::size_t n = gb.size();
      for (std::size_t r = 0; r < gy.size() / n; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += gy[r * n + j];
    }
  });
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  Tensor<T> y = moesplit::add(value(a), value(b));
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(a) || needs(b), [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    for (Var in : {a, b}) {
      if (!g.nodes_[in.id].requires_grad) continue;
      auto& gi = g.grad_buf(in.id);
      for (std::size_t i = 0; i < gy.size(); ++i) gi[i] += gy[i];
    }
  });
}

template <typename T>
Var Graph<T>::sub(Var a, Var b) {
  const Tensor<T>& av = value(a);
  const Tensor<T>& bv = value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("sub: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor<T> y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(a) || needs(b), [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    if (g.nodes_[a.id].requires_grad) {
      auto& ga = g.grad_buf(a.id);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (g.nodes_[b.id].requires_grad) {
      auto& gb = g.grad_buf(b.id);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  });
}

template <typename T>
Var Graph<T>::scale(Var x, T factor) {
  Tensor<T> y = value(x);
  for (auto& v : y.data()) v *= factor;
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(x), [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    auto& gx = g.grad_buf(x.id);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
  });
}

template <typename T>
Var Graph<T>::silu(Var x) {
  Tensor<T> y = moesplit::silu(value(x));
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(x), [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    const Tensor<T>& xv = g.value(x);
    auto& gx = g.grad_buf(x.id);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * silu_grad_scalar(xv[i]);
  });
}

template <typename T>
Var Graph<T>::rms_norm(Var x, Var scale, Var shift, T eps) {
  Tensor<T> y = moesplit::rms_norm(value(x), value(scale), value(shift), eps);
  const std::size_t out = nodes_.size();
  const bool req = needs(x) || needs(scale) || needs(shift);
  return push(std::move(y), req, [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& sv = g.value(scale);
    const std::size_t n = xv.cols();
    const bool gx_on = g.nodes_[x.id].requires_grad;
    const bool gs_on = g.nodes_[scale.id].requires_grad;
    const bool gb_on = g.nodes_[shift.id].requires_grad;
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      const T* xr = xv.data().data() + r * n;
      const T* gr = gy.data().data() + r * n;
      T ss = 0;
      for (std::size_t j = 0; j < n; ++j) ss += xr[j] * xr[j];
      const T inv = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
      if (gs_on) {
        auto& gs = g.grad_buf(scale.id);
        for (std::size_t j = 0; j < n; ++j) gs[j] += gr[j] * xr[j] * inv;
      }
      if (gb_on) {
        auto& gb = g.grad_buf(shift.id);
        for (std::size_t j = 0; j < n; ++j) gb[j] += gr[j];
      }
      if (gx_on) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * sv[j] * xr[j];
        const T coef = inv * inv * inv * dot / static_cast<T>(n);
        T* gxr = g.grad_buf(x.id).data().data() + r * n;
        for (std::size_t j = 0; j < n; ++j) gxr[j] += inv * gr[j] * sv[j] - coef * xr[j];
      }
    }
  });
}

template <typename T>
Var Graph<T>::softmax(Var logits, std::size_t groups) {
  Tensor<T> y = moesplit::softmax_grouped(value(logits), groups);
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(logits), [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    const Tensor<T>& yv = g.value(Var{out});
    auto& gx = g.grad_buf(logits.id);
    const std::size_t n = yv.cols();
    const std::size_t width = n / groups;
    const T r_groups = static_cast<T>(groups);
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      for (std::size_t grp = 0; grp < groups; ++grp) {
        const std::size_t base = r * n + grp * width;
        T dot = 0;
        for (std::size_t j = 0; j < width; ++j) dot += gy[base + j] * yv[base + j];
        for (std::size_t j = 0; j < width; ++j)
          gx[base + j] += yv[base + j] * (gy[base + j] - r_groups * dot);
      }
    }
  });
}

template <typename T>
Var Graph<T>::log_clamped(Var x, T floor) {
  Tensor<T> y = value(x);
  for (auto& v : y.data()) v = std::log(std::max(v, floor));
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(x), [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    const Tensor<T>& xv = g.value(x);
    auto& gx = g.grad_buf(x.id);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (xv[i] > floor) gx[i] += gy[i] / xv[i];
  });
}

template <typename T>
Var Graph<T>::mul_const(Var x, Tensor<T> c) {
  const Tensor<T>& xv = value(x);
  if (xv.size() != c.size()) {
    throw DimensionError("mul_const: " + shape_str(xv.shape()) + " vs " + shape_str(c.shape()));
  }
  Tensor<T> y = xv;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(x), [=, c = std::move(c)](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    auto& gx = g.grad_buf(x.id);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * c[i];
  });
}

template <typename T>
Var Graph<T>::sum_all(Var x) {
  T s = 0;
  for (T v : value(x).data()) s += v;
  const std::size_t out = nodes_.size();
  return push(Tensor<T>({}, {s}), needs(x), [=](Graph& g) {
    const T gy = g.nodes_[out].grad[0];
    auto& gx = g.grad_buf(x.id);
    for (auto& v : gx.data()) v += gy;
  });
}

template <typename T>
Var Graph<T>::mean_sq_diff(Var a, Var b) {
  const Tensor<T>& av = value(a);
  const Tensor<T>& bv = value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("mean_sq_diff: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    s += d * d;
  }
  const T count = static_cast<T>(av.size());
  const std::size_t out = nodes_.size();
  return push(Tensor<T>({}, {s / count}), needs(a) || needs(b), [=](Graph& g) {
    const T gy = g.nodes_[out].grad[0];
    const Tensor<T>& a2 = g.value(a);
    const Tensor<T>& b2 = g.value(b);
    const bool ga_on = g.nodes_[a.id].requires_grad;
    const bool gb_on = g.nodes_[b.id].requires_grad;
    for (std::size_t i = 0; i < a2.size(); ++i) {
      const T d = T(2) * (a2[i] - b2[i]) * gy / count;
      if (ga_on) g.grad_buf(a.id)[i] += d;
      if (gb_on) g.grad_buf(b.id)[i] -= d;
    }
  });
}

template <typename T>
Var Graph<T>::cross_entropy(Var logits, std::vector<int> labels) {
  const Tensor<T>& lv = value(logits);
  const double loss = moesplit::cross_entropy(lv, labels);
  const std::size_t out = nodes_.size();
  return push(Tensor<T>({}, {static_cast<T>(loss)}), needs(logits),
              [=, labels = std::move(labels)](Graph& g) {
                const T gy = g.nodes_[out].grad[0];
                const Tensor<T> p = moesplit::softmax(g.value(logits));
                auto& gx = g.grad_buf(logits.id);
                const std::size_t c = p.cols();
                const T inv_m = gy / static_cast<T>(labels.size());
                for (std::size_t r = 0; r < labels.size(); ++r) {
                  for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += p[r * c + j] * inv_m;
                  gx[r * c + static_cast<std::size_t>(labels[r])] -= inv_m;
                }
              });
}

template <typename T>
Var Graph<T>::gather_rows(Var table, std::vector<int> ids) {
  const Tensor<T>& tv = value(table);
  const std::size_t d = tv.cols();
  Tensor<T> y({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw ContractError("gather_rows: index " + std::to_string(ids[r]) + " outside table of " +
                          std::to_string(tv.rows()) + " rows");
    }
    const auto src = tv.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), y.row(r).begin());
  }
  const std::size_t out = nodes_.size();
  return push(std::move(y), needs(table), [=, ids = std::move(ids)](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    auto& gt = g.grad_buf(table.id);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      T* dst = gt.data().data() + static_cast<std::size_t>(ids[r]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += gy[r * d + j];
    }
  });
}

template <typename T>
Var Graph<T>::causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq,
                               std::size_t heads) {
  const Tensor<T>& qv = value(q);
  const Tensor<T>& kv = value(k);
  const Tensor<T>& vv = value(v);
  const std::size_t d = qv.cols();
  if (qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != batch * seq ||
      heads == 0 || d % heads != 0) {
    throw DimensionError("causal_attention: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) +
                         ", v " + shape_str(vv.shape()) + " for batch " + std::to_string(batch) +
                         " x seq " + std::to_string(seq) + " with " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  // probs[b][h][i][j], j <= i, stored densely as seq x seq
  auto probs = std::make_shared<std::vector<T>>(batch * heads * seq * seq, T(0));
  Tensor<T> y({batch * seq, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs->data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = qv.data().data() + (b * seq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kv.data().data() + (b * seq + j) * d + h * dh;
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt;
          p[i * seq + j] = s;
          mx = std::max(mx, s);
        }
        T sum = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * seq + j] = std::exp(p[i * seq + j] - mx);
          sum += p[i * seq + j];
        }
        T* yi = y.data().data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * seq + j] /= sum;
          const T pij = p[i * seq + j];
          const T* vj = vv.data().data() + (b * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) yi[c] += pij * vj[c];
        }
      }
    }
  }
  const std::size_t out = nodes_.size();
  const bool req = needs(q) || needs(k) || needs(v);
  return push(std::move(y), req, [=](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    const Tensor<T>& q2 = g.value(q);
    const Tensor<T>& k2 = g.value(k);
    const Tensor<T>& v2 = g.value(v);
    const bool gq_on = g.nodes_[q.id].requires_grad;
    const bool gk_on = g.nodes_[k.id].requires_grad;
    const bool gv_on = g.nodes_[v.id].requires_grad;
    T* gq = gq_on ? g.grad_buf(q.id).data().data() : nullptr;
    T* gk = gk_on ? g.grad_buf(k.id).data().data() : nullptr;
    T* gv = gv_on ? g.grad_buf(v.id).data().data() : nullptr;
    std::vector<T> dp(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const T* p = probs->data() + (b * heads + h) * seq * seq;
        for (std::size_t i = 0; i < seq; ++i) {
          const T* gyi = gy.data().data() + (b * seq + i) * d + h * dh;
          T dot = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* vj = v2.data().data() + (b * seq + j) * d + h * dh;
            T s = 0;
            for (std::size_t c = 0; c < dh; ++c) s += gyi[c] * vj[c];
            dp[j] = s;
            dot += p[i * seq + j] * s;
            if (gv_on) {
              T* gvj = gv + (b * seq + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[i * seq + j] * gyi[c];
            }
          }
          if (!gq_on && !gk_on) continue;
          const T* qi = q2.data().data() + (b * seq + i) * d + h * dh;
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = p[i * seq + j] * (dp[j] - dot) * inv_sqrt;
            const T* kj = k2.data().data() + (b * seq + j) * d + h * dh;
            if (gq_on) {
              T* gqi = gq + (b * seq + i) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
            }
            if (gk_on) {
              T* gkj = gk + (b * seq + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var Graph<T>::expert_mix(const std::vector<Var>& acts, const std::vector<Var>& w2s,
                         std::vector<std::vector<std::uint8_t>> masks) {
  if (acts.empty() || acts.size() != w2s.size() || acts.size() != masks.size()) {
    throw ContractError("expert_mix: need one activation, weight and mask per expert");
  }
  const std::size_t m = value(acts[0]).rows();
  const std::size_t d = value(w2s[0]).cols();
  Tensor<T> y({m, d});
  bool req = false;
  for (std::size_t i = 0; i < acts.size(); ++i) {
    const Tensor<T>& a = value(acts[i]);
    const Tensor<T>& w = value(w2s[i]);
    if (a.rows() != m || w.rank() != 2 || a.cols() != w.shape()[0] || w.cols() != d || masks[i].size() != m) {
      throw DimensionError("expert_mix: expert " + std::to_string(i) + " activation " + shape_str(a.shape()) +
                           " incompatible with weight " + shape_str(w.shape()));
    }
    kernels::matmul_acc_masked(a.data().data(), w.data().data(), y.data().data(), m, a.cols(), d,
                               masks[i].data());
    req = req || needs(acts[i]) || needs(w2s[i]);
  }
  const std::size_t out = nodes_.size();
  return push(std::move(y), req, [=, masks = std::move(masks)](Graph& g) {
    const Tensor<T>& gy = g.nodes_[out].grad;
    Tensor<T> gm({m, d});
    for (std::size_t i = 0; i < acts.size(); ++i) {
      const bool ga_on = g.nodes_[acts[i].id].requires_grad;
      const bool gw_on = g.nodes_[w2s[i].id].requires_grad;
      if (!ga_on && !gw_on) continue;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < d; ++j) gm[r * d + j] = masks[i][r] ? gy[r * d + j] : T(0);
      const Tensor<T>& a = g.value(acts[i]);
      const Tensor<T>& w = g.value(w2s[i]);
      if (ga_on) {
        kernels::matmul_acc_bt(gm.data().data(), w.data().data(), g.grad_buf(acts[i].id).data().data(), m,
                               a.cols(), d);
      }
      if (gw_on) {
        kernels::matmul_acc_at(a.data().data(), gm.data().data(), g.grad_buf(w2s[i].id).data().data(), m,
                               a.cols(), d);
      }
    }
  });
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace moesplit
