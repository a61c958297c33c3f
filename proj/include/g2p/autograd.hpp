#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph records every operation of one forward pass in creation order; node
// ids are therefore a topological order and backward() walks them in reverse.
// Parameters enter the graph by reference and receive gradients directly in
// their own grad buffers. A Graph built with record=false keeps only values,
// which is what inference uses.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "g2p/tensor.hpp"

namespace g2p::nn {

struct Var {
  std::size_t id = 0;
};

namespace detail {

// Splits a shape around `axis` into (outer, axis length, inner) extents.
inline void axis_extents(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& len,
                         std::size_t& inner) {
  if (axis >= shape.size()) throw TensorError("axis out of range for " + shape_string(shape));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

template <class T>
void softmax_forward(const T* in, T* out, std::size_t outer, std::size_t len, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t s = 0; s < inner; ++s) {
      const T* x = in + o * len * inner + s;
      T* y = out + o * len * inner + s;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, x[i * inner]);
      T total = 0;
      for (std::size_t i = 0; i < len; ++i) {
        y[i * inner] = std::exp(x[i * inner] - mx);
        total += y[i * inner];
      }
      const T inv = T{1} / total;
      for (std::size_t i = 0; i < len; ++i) y[i * inner] *= inv;
    }
  }
}

struct BroadcastMaps {
  Shape shape;
  std::vector<std::size_t> a;
  std::vector<std::size_t> b;
};

// Numpy-style broadcasting: maps each output element to its source element
// in each operand.
inline BroadcastMaps broadcast_maps(const Shape& sa, const Shape& sb) {
  const std::size_t rank = std::max(sa.size(), sb.size());
  Shape pa(rank, 1), pb(rank, 1), out(rank);
  std::copy(sa.begin(), sa.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - sa.size()));
  std::copy(sb.begin(), sb.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - sb.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw TensorError("shapes " + shape_string(sa) + " and " + shape_string(sb) +
                        " do not broadcast");
    }
    out[i] = std::max(pa[i], pb[i]);
  }
  std::vector<std::size_t> stride_a(rank), stride_b(rank);
  std::size_t ra = 1, rb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    stride_a[i] = pa[i] == 1 ? 0 : ra;
    stride_b[i] = pb[i] == 1 ? 0 : rb;
    ra *= pa[i];
    rb *= pb[i];
  }
  BroadcastMaps m;
  m.shape = out;
  const std::size_t n = element_count(out);
  m.a.resize(n);
  m.b.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    m.a[flat] = oa;
    m.b[flat] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += stride_a[d];
      ob += stride_b[d];
      if (idx[d] < out[d]) break;
      oa -= stride_a[d] * out[d];
      ob -= stride_b[d] * out[d];
      idx[d] = 0;
    }
  }
  return m;
}

inline bool is_suffix(const Shape& whole, const Shape& part) {
  return part.size() <= whole.size() &&
         std::equal(part.rbegin(), part.rend(), whole.rbegin());
}

}  // namespace detail

// Numerically stabilized softmax along `axis`; rejects NaN input.
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& logits, std::size_t axis) {
  for (T v : logits.data()) {
    if (std::isnan(v)) throw TensorError("softmax input contains NaN");
  }
  std::size_t outer, len, inner;
  detail::axis_extents(logits.shape(), axis, outer, len, inner);
  Tensor<T> out(logits.shape());
  detail::softmax_forward(logits.data().data(), out.data().data(), outer, len, inner);
  return out;
}

template <std::floating_point T>
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  // Binds a parameter by reference; it must outlive the graph.
  Var parameter(Tensor<T>& p) {
    Node n;
    n.param = &p;
    n.requires_grad = record_;
    if (record_) p.enable_grad();
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? *n.param : n.value;
  }

  const Shape& shape(Var v) const { return value(v).shape(); }

  std::span<const T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.param) return n.param->grad();
    return n.grad;
  }

  void backward(Var root) {
    if (!record_) throw TensorError("backward on a graph built without recording");
    if (value(root).size() != 1) throw TensorError("backward needs a scalar root");
    if (!nodes_[root.id].requires_grad) return;
    grad_buffer(root.id)[0] += T{1};
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  // ---- operations -------------------------------------------------------

  // x[..., K] * w[K, N] -> [..., N]
  Var matmul(Var x, Var w) {
    const auto& X = value(x);
    const auto& W = value(w);
    if (W.rank() != 2 || X.shape().back() != W.dim(0)) {
      throw TensorError("matmul shape mismatch " + shape_string(X.shape()) + " x " +
                        shape_string(W.shape()));
    }
    const std::size_t k = W.dim(0), n = W.dim(1), m = X.size() / k;
    Shape out_shape = X.shape();
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    kernels::gemm_accumulate(m, n, k, X.data().data(), W.data().data(), out.data().data());
    return make(std::move(out), {x, w}, [this, x, w, m, n, k](std::size_t self) {
      const T* gout = nodes_[self].grad.data();
      const auto& W = value(w);
      if (needs(x)) {
        std::vector<T> wt(k * n);
        kernels::transpose(k, n, W.data().data(), wt.data());
        kernels::gemm_accumulate(m, k, n, gout, wt.data(), grad_buffer(x.id).data());
      }
      if (needs(w)) {
        kernels::gemm_tn_accumulate(m, n, k, value(x).data().data(), gout,
                                    grad_buffer(w.id).data());
      }
    });
  }

  // Batched a[G,M,K] * b[G,K,N], or a * b^T with b[G,N,K] when transpose_b.
  Var bmm(Var a, Var b, bool transpose_b = false) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0)) {
      throw TensorError("bmm expects rank-3 operands with equal batch");
    }
    const std::size_t g = A.dim(0), m = A.dim(1), k = A.dim(2);
    const std::size_t n = transpose_b ? B.dim(1) : B.dim(2);
    if ((transpose_b ? B.dim(2) : B.dim(1)) != k) {
      throw TensorError("bmm inner dimension mismatch " + shape_string(A.shape()) + " x " +
                        shape_string(B.shape()));
    }
    Tensor<T> out({g, m, n});
    std::vector<T> bt(transpose_b ? k * n : 0);
    for (std::size_t s = 0; s < g; ++s) {
      const T* bs = B.data().data() + s * k * n;
      if (transpose_b) {
        kernels::transpose(n, k, bs, bt.data());
        bs = bt.data();
      }
      kernels::gemm_accumulate(m, n, k, A.data().data() + s * m * k, bs,
                               out.data().data() + s * m * n);
    }
    return make(std::move(out), {a, b}, [this, a, b, g, m, n, k, transpose_b](std::size_t self) {
      const T* gout = nodes_[self].grad.data();
      const T* av = value(a).data().data();
      const T* bv = value(b).data().data();
      T* ga = needs(a) ? grad_buffer(a.id).data() : nullptr;
      T* gb = needs(b) ? grad_buffer(b.id).data() : nullptr;
      std::vector<T> tmp(k * n);
      for (std::size_t s = 0; s < g; ++s) {
        const T* go = gout + s * m * n;
        const T* as = av + s * m * k;
        const T* bs = bv + s * k * n;
        if (transpose_b) {
          // C = A * Bt^T, Bt[N,K]
          if (ga) kernels::gemm_accumulate(m, k, n, go, bs, ga + s * m * k);
          if (gb) kernels::gemm_tn_accumulate(m, k, n, go, as, gb + s * n * k);
        } else {
          if (ga) {
            kernels::transpose(k, n, bs, tmp.data());
            kernels::gemm_accumulate(m, k, n, go, tmp.data(), ga + s * m * k);
          }
          if (gb) kernels::gemm_tn_accumulate(m, n, k, as, go, gb + s * k * n);
        }
      }
    });
  }

  Var add(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape() == B.shape() || (detail::is_suffix(A.shape(), B.shape()) && A.size() >= B.size())) {
      // Same shape or b repeated along leading dimensions of a (bias add).
      const std::size_t period = B.size();
      Tensor<T> out = A;
      auto o = out.data();
      auto bv = B.data();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % period];
      return make(std::move(out), {a, b}, [this, a, b, period](std::size_t self) {
        const auto& gout = nodes_[self].grad;
        if (needs(a)) {
          auto ga = grad_buffer(a.id);
          for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
        }
        if (needs(b)) {
          auto gb = grad_buffer(b.id);
          for (std::size_t i = 0; i < gout.size(); ++i) gb[i % period] += gout[i];
        }
      });
    }
    auto maps = std::make_shared<detail::BroadcastMaps>(detail::broadcast_maps(A.shape(), B.shape()));
    Tensor<T> out(maps->shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[maps->a[i]] + B[maps->b[i]];
    return make(std::move(out), {a, b}, [this, a, b, maps](std::size_t self) {
      const auto& gout = nodes_[self].grad;
      if (needs(a)) {
        auto ga = grad_buffer(a.id);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[maps->a[i]] += gout[i];
      }
      if (needs(b)) {
        auto gb = grad_buffer(b.id);
        for (std::size_t i = 0; i < gout.size(); ++i) gb[maps->b[i]] += gout[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    auto maps =
        std::make_shared<detail::BroadcastMaps>(detail::broadcast_maps(shape(a), shape(b)));
    const auto& A = value(a);
    const auto& B = value(b);
    Tensor<T> out(maps->shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[maps->a[i]] * B[maps->b[i]];
    return make(std::move(out), {a, b}, [this, a, b, maps](std::size_t self) {
      const auto& gout = nodes_[self].grad;
      const auto& A = value(a);
      const auto& B = value(b);
      if (needs(a)) {
        auto ga = grad_buffer(a.id);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[maps->a[i]] += gout[i] * B[maps->b[i]];
      }
      if (needs(b)) {
        auto gb = grad_buffer(b.id);
        for (std::size_t i = 0; i < gout.size(); ++i) gb[maps->b[i]] += gout[i] * A[maps->a[i]];
      }
    });
  }

  Var scale(Var a, T factor) {
    Tensor<T> out = value(a);
    for (auto& v : out.data()) v *= factor;
    return make(std::move(out), {a}, [this, a, factor](std::size_t self) {
      const auto& gout = nodes_[self].grad;
      auto ga = grad_buffer(a.id);
      for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += factor * gout[i];
    });
  }

  Var relu(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data()) v = v > T{0} ? v : T{0};
    return make(std::move(out), {a}, [this, a](std::size_t self) {
      const auto& gout = nodes_[self].grad;
      const auto& in = value(a);
      auto ga = grad_buffer(a.id);
      for (std::size_t i = 0; i < gout.size(); ++i) {
        if (in[i] > T{0}) ga[i] += gout[i];
      }
    });
  }

  // Normalizes over the last dimension, then applies gamma/beta.
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-6)) {
    const auto& X = value(x);
    const std::size_t h = X.shape().back();
    if (value(gamma).size() != h || value(beta).size() != h) {
      throw TensorError("layer_norm parameter size mismatch");
    }
    const std::size_t rows = X.size() / h;
    auto xhat = std::make_shared<std::vector<T>>(X.size());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    Tensor<T> out(X.shape());
    const T* g = value(gamma).data().data();
    const T* bt = value(beta).data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = X.data().data() + r * h;
      T mean = 0;
      for (std::size_t i = 0; i < h; ++i) mean += xr[i];
      mean /= static_cast<T>(h);
      T var = 0;
      for (std::size_t i = 0; i < h; ++i) var += (xr[i] - mean) * (xr[i] - mean);
      var /= static_cast<T>(h);
      const T rs = T{1} / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      T* xh = xhat->data() + r * h;
      T* o = out.data().data() + r * h;
      for (std::size_t i = 0; i < h; ++i) {
        xh[i] = (xr[i] - mean) * rs;
        o[i] = xh[i] * g[i] + bt[i];
      }
    }
    return make(std::move(out), {x, gamma, beta},
                [this, x, gamma, beta, xhat, rstd, rows, h](std::size_t self) {
                  const T* gout = nodes_[self].grad.data();
                  const T* g = value(gamma).data().data();
                  T* gg = needs(gamma) ? grad_buffer(gamma.id).data() : nullptr;
                  T* gb = needs(beta) ? grad_buffer(beta.id).data() : nullptr;
                  T* gx = needs(x) ? grad_buffer(x.id).data() : nullptr;
                  std::vector<T> dxhat(h);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const T* go = gout + r * h;
                    const T* xh = xhat->data() + r * h;
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t i = 0; i < h; ++i) {
                      if (gb) gb[i] += go[i];
                      if (gg) gg[i] += go[i] * xh[i];
                      dxhat[i] = go[i] * g[i];
                      mean_d += dxhat[i];
                      mean_dx += dxhat[i] * xh[i];
                    }
                    if (!gx) continue;
                    mean_d /= static_cast<T>(h);
                    mean_dx /= static_cast<T>(h);
                    const T rs = (*rstd)[r];
                    T* gxr = gx + r * h;
                    for (std::size_t i = 0; i < h; ++i) {
                      gxr[i] += rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
                    }
                  }
                });
  }

  Var softmax(Var x, std::size_t axis) {
    Tensor<T> out = nn::softmax(value(x), axis);
    std::size_t outer, len, inner;
    detail::axis_extents(out.shape(), axis, outer, len, inner);
    return make(std::move(out), {x}, [this, x, outer, len, inner](std::size_t self) {
      const T* gout = nodes_[self].grad.data();
      const T* y = nodes_[self].value.data().data();
      T* gx = grad_buffer(x.id).data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t s = 0; s < inner; ++s) {
          const std::size_t base = o * len * inner + s;
          T dot = 0;
          for (std::size_t i = 0; i < len; ++i) dot += gout[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) {
            gx[base + i * inner] += y[base + i * inner] * (gout[base + i * inner] - dot);
          }
        }
      }
    });
  }

  // Inverted dropout: identity unless training with p > 0.
  template <class Rng>
  Var dropout(Var x, T p, Rng& rng, bool train) {
    if (!train || p <= T{0}) return x;
    if (p >= T{1}) throw TensorError("dropout probability must be < 1");
    const T keep_scale = T{1} / (T{1} - p);
    auto mask = std::make_shared<std::vector<T>>(value(x).size());
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (auto& m : *mask) m = uniform(rng) < static_cast<double>(p) ? T{0} : keep_scale;
    Tensor<T> out = value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
    return make(std::move(out), {x}, [this, x, mask](std::size_t self) {
      const auto& gout = nodes_[self].grad;
      auto gx = grad_buffer(x.id);
      for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i] * (*mask)[i];
    });
  }

  // Row lookup: table[V,H], ids -> [ids.size(), H].
  Var embedding(Var table, std::span<const std::int32_t> ids) {
    const auto& E = value(table);
    if (E.rank() != 2) throw TensorError("embedding table must be rank 2");
    const std::size_t v = E.dim(0), h = E.dim(1);
    if (ids.empty()) throw TensorError("embedding lookup with no ids");
    Tensor<T> out({ids.size(), h});
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
        throw TensorError("embedding id " + std::to_string(ids[r]) + " out of range");
      }
      std::copy_n(E.data().data() + static_cast<std::size_t>(ids[r]) * h, h,
                  out.data().data() + r * h);
    }
    auto kept = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
    return make(std::move(out), {table}, [this, table, kept, h](std::size_t self) {
      const T* gout = nodes_[self].grad.data();
      T* gt = grad_buffer(table.id).data();
      for (std::size_t r = 0; r < kept->size(); ++r) {
        T* row = gt + static_cast<std::size_t>((*kept)[r]) * h;
        for (std::size_t i = 0; i < h; ++i) row[i] += gout[r * h + i];
      }
    });
  }

  Var reshape(Var x, Shape shape) {
    Tensor<T> out = value(x);
    out.reshape(std::move(shape));
    return make(std::move(out), {x}, [this, x](std::size_t self) {
      const auto& gout = nodes_[self].grad;
      auto gx = grad_buffer(x.id);
      for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i];
    });
  }

  // out.shape[d] = in.shape[perm[d]]
  Var permute(Var x, std::vector<std::size_t> perm) {
    const auto& X = value(x);
    const std::size_t rank = X.rank();
    if (perm.size() != rank) throw TensorError("permutation rank mismatch");
    std::vector<bool> seen(rank, false);
    for (auto p : perm) {
      if (p >= rank || seen[p]) throw TensorError("invalid permutation");
      seen[p] = true;
    }
    std::vector<std::size_t> in_stride(rank);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
      in_stride[d] = s;
      s *= X.dim(d);
    }
    Shape out_shape(rank);
    std::vector<std::size_t> stride(rank);
    for (std::size_t d = 0; d < rank; ++d) {
      out_shape[d] = X.dim(perm[d]);
      stride[d] = in_stride[perm[d]];
    }
    auto offsets = std::make_shared<std::vector<std::size_t>>(X.size());
    {
      std::vector<std::size_t> idx(rank, 0);
      std::size_t off = 0;
      for (std::size_t flat = 0; flat < X.size(); ++flat) {
        (*offsets)[flat] = off;
        for (std::size_t d = rank; d-- > 0;) {
          ++idx[d];
          off += stride[d];
          if (idx[d] < out_shape[d]) break;
          off -= stride[d] * out_shape[d];
          idx[d] = 0;
        }
      }
    }
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[(*offsets)[i]];
    return make(std::move(out), {x}, [this, x, offsets](std::size_t self) {
      const auto& gout = nodes_[self].grad;
      auto gx = grad_buffer(x.id);
      for (std::size_t i = 0; i < gout.size(); ++i) gx[(*offsets)[i]] += gout[i];
    });
  }

  Var concat(std::span<const Var> xs, std::size_t axis) {
    if (xs.empty()) throw TensorError("concat of nothing");
    Shape out_shape = shape(xs[0]);
    if (axis >= out_shape.size()) throw TensorError("concat axis out of range");
    std::size_t total = 0;
    for (auto v : xs) {
      Shape s = shape(v);
      if (s.size() != out_shape.size()) throw TensorError("concat rank mismatch");
      total += s[axis];
      s[axis] = out_shape[axis];
      if (s != out_shape) throw TensorError("concat shape mismatch");
    }
    out_shape[axis] = total;
    std::size_t outer, len, inner;
    detail::axis_extents(out_shape, axis, outer, len, inner);
    Tensor<T> out(out_shape);
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (auto v : xs) {
      const auto& X = value(v);
      const std::size_t l = X.dim(axis);
      offsets.push_back(offset);
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(X.data().data() + o * l * inner, l * inner,
                    out.data().data() + (o * len + offset) * inner);
      }
      offset += l;
    }
    std::vector<Var> inputs(xs.begin(), xs.end());
    return make(std::move(out), inputs,
                [this, inputs, offsets, outer, len, inner, axis](std::size_t self) {
                  const T* gout = nodes_[self].grad.data();
                  for (std::size_t k = 0; k < inputs.size(); ++k) {
                    if (!needs(inputs[k])) continue;
                    const std::size_t l = value(inputs[k]).dim(axis);
                    T* gx = grad_buffer(inputs[k].id).data();
                    for (std::size_t o = 0; o < outer; ++o) {
                      const T* src = gout + (o * len + offsets[k]) * inner;
                      T* dst = gx + o * l * inner;
                      for (std::size_t i = 0; i < l * inner; ++i) dst[i] += src[i];
                    }
                  }
                });
  }

  Var sum(Var x) {
    T total = 0;
    for (T v : value(x).data()) total += v;
    return make(Tensor<T>({1}, std::vector<T>{total}), {x}, [this, x](std::size_t self) {
      const T g = nodes_[self].grad[0];
      for (auto& v : grad_buffer(x.id)) v += g;
    });
  }

  // Mean token-level negative log-likelihood over rows whose target is not
  // pad_id. logits [..., V]; targets has one id per row. With smoothing > 0
  // the target distribution is (1-s) one-hot + s/V uniform.
  Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t pad_id,
                    T smoothing = T{0}) {
    const auto& L = value(logits);
    const std::size_t v = L.shape().back();
    const std::size_t rows = L.size() / v;
    if (targets.size() != rows) throw TensorError("cross_entropy target count mismatch");
    std::size_t counted = 0;
    for (auto t : targets) {
      if (t < 0 || static_cast<std::size_t>(t) >= v) {
        throw TensorError("target id " + std::to_string(t) + " out of range");
      }
      if (t != pad_id) ++counted;
    }
    if (counted == 0) throw TensorError("cross_entropy: every position is padding");
    auto probs = std::make_shared<std::vector<T>>(L.size());
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (targets[r] == pad_id) continue;
      const T* x = L.data().data() + r * v;
      T* p = probs->data() + r * v;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < v; ++i) mx = std::max(mx, x[i]);
      T z = 0;
      for (std::size_t i = 0; i < v; ++i) {
        p[i] = std::exp(x[i] - mx);
        z += p[i];
      }
      const T log_z = std::log(z) + mx;
      for (std::size_t i = 0; i < v; ++i) p[i] /= z;
      T row = (T{1} - smoothing) * (log_z - x[targets[r]]);
      if (smoothing > T{0}) {
        T sum_nll = 0;
        for (std::size_t i = 0; i < v; ++i) sum_nll += log_z - x[i];
        row += smoothing / static_cast<T>(v) * sum_nll;
      }
      total += row;
    }
    const T denom = static_cast<T>(counted);
    auto kept = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
    return make(Tensor<T>({1}, std::vector<T>{total / denom}), {logits},
                [this, logits, probs, kept, pad_id, smoothing, v, rows, denom](std::size_t self) {
                  const T g = nodes_[self].grad[0] / denom;
                  T* gl = grad_buffer(logits.id).data();
                  const T uniform = smoothing / static_cast<T>(v);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const auto t = (*kept)[r];
                    if (t == pad_id) continue;
                    const T* p = probs->data() + r * v;
                    T* gr = gl + r * v;
                    for (std::size_t i = 0; i < v; ++i) gr[i] += g * (p[i] - uniform);
                    gr[t] -= g * (T{1} - smoothing);
                  }
                });
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  std::span<T> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.param) return n.param->grad();
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  template <class Backward>
  Var make(Tensor<T> out, std::initializer_list<Var> inputs, Backward&& backward) {
    return make(std::move(out), std::vector<Var>(inputs), std::forward<Backward>(backward));
  }

  template <class Backward>
  Var make(Tensor<T> out, const std::vector<Var>& inputs, Backward&& backward) {
    Node n;
    n.value = std::move(out);
    n.requires_grad = record_ && std::any_of(inputs.begin(), inputs.end(),
                                             [this](Var v) { return needs(v); });
    const std::size_t self = nodes_.size();
    if (n.requires_grad) {
      n.backward = [fn = std::forward<Backward>(backward), self]() { fn(self); };
    }
    return push(std::move(n));
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace g2p::nn
