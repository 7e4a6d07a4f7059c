#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unigrid/tensor.hpp"

namespace unigrid {

// Reverse-mode autodiff over a tape of dense tensor ops.
//
// Ops append nodes in creation order, so creation order is a topological
// order and backward() is a single reverse sweep visiting each node once.
// Tapes are single-threaded; independent tapes may live on separate threads.
template <typename T>
class Graph {
 public:
  using Var = int;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor<T> v, bool needs_grad = true) {
    return push(std::move(v), needs_grad, {}, nullptr);
  }
  Var constant(Tensor<T> v) { return leaf(std::move(v), false); }

  const Tensor<T>& value(Var v) const { return nodes_[check(v)].value; }
  const Tensor<T>& grad(Var v) const { return nodes_[check(v)].grad; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise and linear algebra ----

  Var matmul(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
      throw std::invalid_argument("matmul: incompatible shapes " + Tensor<T>::shape_str(A.shape) +
                                  " x " + Tensor<T>::shape_str(B.shape));
    const int m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor<T> out({m, n});
    matmul_raw(A.data.data(), B.data.data(), out.data.data(), m, k, n);
    return push(std::move(out), needs(a) || needs(b), {a, b}, [a, b, m, k, n](Graph& g, Var o) {
      const auto& G = g.nodes_[o].grad;
      if (g.needs(a)) {
        // dA = G * B^T
        const auto& B2 = g.value(b);
        auto& dA = g.nodes_[a].grad;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gij = G.data[static_cast<size_t>(i) * n + j];
            if (gij == T(0)) continue;
            const T* brow = B2.row_ptr(j);
            T* darow = dA.row_ptr(i);
            for (int p = 0; p < k; ++p) darow[p] += gij * brow[p];
          }
      }
      if (g.needs(b)) {
        // dB = A^T * G
        const auto& A2 = g.value(a);
        auto& dB = g.nodes_[b].grad;
        for (int i = 0; i < m; ++i) {
          const T* arow = A2.row_ptr(i);
          const T* grow = G.row_ptr(i);
          for (int p = 0; p < k; ++p) {
            const T ap = arow[p];
            if (ap == T(0)) continue;
            T* dbrow = dB.row_ptr(p);
            for (int j = 0; j < n; ++j) dbrow[j] += ap * grow[j];
          }
        }
      }
    });
  }

  // a + b. Shapes must match, or b may be a length-n vector (or 1 x n row)
  // broadcast over the rows of a (m x n).
  Var add(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape == B.shape) {
      Tensor<T> out = A;
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
      return push(std::move(out), needs(a) || needs(b), {a, b}, [a, b](Graph& g, Var o) {
        const auto& G = g.nodes_[o].grad;
        if (g.needs(a)) accumulate(g.nodes_[a].grad, G);
        if (g.needs(b)) accumulate(g.nodes_[b].grad, G);
      });
    }
    if (A.shape.size() == 2 && B.numel() == A.shape[1]) {
      const int m = A.shape[0], n = A.shape[1];
      Tensor<T> out = A;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += B.data[j];
      return push(std::move(out), needs(a) || needs(b), {a, b}, [a, b, m, n](Graph& g, Var o) {
        const auto& G = g.nodes_[o].grad;
        if (g.needs(a)) accumulate(g.nodes_[a].grad, G);
        if (g.needs(b)) {
          auto& dB = g.nodes_[b].grad;
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) dB.data[j] += G.data[static_cast<size_t>(i) * n + j];
        }
      });
    }
    throw std::invalid_argument("add: incompatible shapes " + Tensor<T>::shape_str(A.shape) +
                                " and " + Tensor<T>::shape_str(B.shape));
  }

  Var mul(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape != B.shape)
      throw std::invalid_argument("multiply: incompatible shapes " + Tensor<T>::shape_str(A.shape) +
                                  " and " + Tensor<T>::shape_str(B.shape));
    Tensor<T> out = A;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
    return push(std::move(out), needs(a) || needs(b), {a, b}, [a, b](Graph& g, Var o) {
      const auto& G = g.nodes_[o].grad;
      if (g.needs(a)) {
        const auto& B2 = g.value(b);
        auto& dA = g.nodes_[a].grad;
        for (size_t i = 0; i < G.data.size(); ++i) dA.data[i] += G.data[i] * B2.data[i];
      }
      if (g.needs(b)) {
        const auto& A2 = g.value(a);
        auto& dB = g.nodes_[b].grad;
        for (size_t i = 0; i < G.data.size(); ++i) dB.data[i] += G.data[i] * A2.data[i];
      }
    });
  }

  Var scale(Var a, T s) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v *= s;
    return push(std::move(out), needs(a), {a}, [a, s](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (size_t i = 0; i < G.data.size(); ++i) dA.data[i] += s * G.data[i];
    });
  }

  // a + c with c a plain tensor (no gradient into c). The one op that may
  // introduce -inf, for attention masks and vocabulary-range masks.
  Var add_const(Var a, const Tensor<T>& c) {
    const auto& A = value(a);
    if (A.shape != c.shape)
      throw std::invalid_argument("add_const: incompatible shapes " + Tensor<T>::shape_str(A.shape) +
                                  " and " + Tensor<T>::shape_str(c.shape));
    Tensor<T> out = A;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += c.data[i];
    return push(std::move(out), needs(a), {a}, [a](Graph& g, Var o) {
      if (g.needs(a)) accumulate(g.nodes_[a].grad, g.nodes_[o].grad);
    });
  }

  // Repeat a length-n vector m times into an (m x n) matrix.
  Var broadcast_rows(Var v, int m) {
    const auto& V = value(v);
    const int n = static_cast<int>(V.numel());
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i)
      std::copy(V.data.begin(), V.data.end(), out.data.begin() + static_cast<size_t>(i) * n);
    return push(std::move(out), needs(v), {v}, [v, m, n](Graph& g, Var o) {
      if (!g.needs(v)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dV = g.nodes_[v].grad;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) dV.data[j] += G.data[static_cast<size_t>(i) * n + j];
    });
  }

  // ---- embeddings, indexing, assembly ----

  Var gather_rows(Var table, const std::vector<int>& ids) {
    const auto& Tb = value(table);
    if (Tb.shape.size() != 2)
      throw std::invalid_argument("gather: table must be 2-d, got " + Tensor<T>::shape_str(Tb.shape));
    const int v = Tb.shape[0], d = Tb.shape[1];
    for (size_t i = 0; i < ids.size(); ++i)
      if (ids[i] < 0 || ids[i] >= v)
        throw std::invalid_argument("gather: id " + std::to_string(ids[i]) + " at position " +
                                    std::to_string(i) + " outside table rows [0," + std::to_string(v) + ")");
    Tensor<T> out({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy(Tb.row_ptr(ids[i]), Tb.row_ptr(ids[i]) + d, out.row_ptr(static_cast<int>(i)));
    return push(std::move(out), needs(table), {table}, [table, ids, d](Graph& g, Var o) {
      if (!g.needs(table)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dT = g.nodes_[table].grad;
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* grow = G.row_ptr(static_cast<int>(i));
        T* drow = dT.row_ptr(ids[i]);
        for (int j = 0; j < d; ++j) drow[j] += grow[j];
      }
    });
  }

  Var slice_rows(Var a, int r0, int r1) {
    const auto& A = value(a);
    if (A.shape.size() != 2 || r0 < 0 || r1 > A.shape[0] || r0 >= r1)
      throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) + "," +
                                  std::to_string(r1) + ") for " + Tensor<T>::shape_str(A.shape));
    const int n = A.shape[1];
    Tensor<T> out({r1 - r0, n});
    std::copy(A.row_ptr(r0), A.row_ptr(r0) + static_cast<size_t>(r1 - r0) * n, out.data.begin());
    return push(std::move(out), needs(a), {a}, [a, r0, n](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      const int rows = G.shape[0];
      for (int i = 0; i < rows; ++i) {
        const T* grow = G.row_ptr(i);
        T* drow = dA.row_ptr(r0 + i);
        for (int j = 0; j < n; ++j) drow[j] += grow[j];
      }
    });
  }

  Var slice_cols(Var a, int c0, int c1) {
    const auto& A = value(a);
    if (A.shape.size() != 2 || c0 < 0 || c1 > A.shape[1] || c0 >= c1)
      throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                  std::to_string(c1) + ") for " + Tensor<T>::shape_str(A.shape));
    const int m = A.shape[0], n = A.shape[1], w = c1 - c0;
    Tensor<T> out({m, w});
    for (int i = 0; i < m; ++i)
      std::copy(A.row_ptr(i) + c0, A.row_ptr(i) + c1, out.row_ptr(i));
    return push(std::move(out), needs(a), {a}, [a, c0, m, n, w](Graph& g, Var o) {
      (void)n;
      if (!g.needs(a)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (int i = 0; i < m; ++i) {
        const T* grow = G.row_ptr(i);
        T* drow = dA.row_ptr(i) + c0;
        for (int j = 0; j < w; ++j) drow[j] += grow[j];
      }
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    const int n = value(parts[0]).shape.size() == 2 ? value(parts[0]).shape[1]
                                                    : static_cast<int>(value(parts[0]).numel());
    int m = 0;
    for (Var p : parts) {
      const auto& P = value(p);
      const int pn = P.shape.size() == 2 ? P.shape[1] : static_cast<int>(P.numel());
      if (pn != n)
        throw std::invalid_argument("concat_rows: width mismatch " + std::to_string(pn) + " vs " +
                                    std::to_string(n));
      m += P.shape.size() == 2 ? P.shape[0] : 1;
    }
    Tensor<T> out({m, n});
    int r = 0;
    bool any = false;
    for (Var p : parts) {
      const auto& P = value(p);
      std::copy(P.data.begin(), P.data.end(), out.row_ptr(r));
      r += P.shape.size() == 2 ? P.shape[0] : 1;
      any = any || needs(p);
    }
    return push(std::move(out), any, parts, [parts, n](Graph& g, Var o) {
      const auto& G = g.nodes_[o].grad;
      int r = 0;
      for (Var p : parts) {
        const auto& P = g.value(p);
        const int pr = P.shape.size() == 2 ? P.shape[0] : 1;
        if (g.needs(p)) {
          auto& dP = g.nodes_[p].grad;
          for (size_t i = 0; i < dP.data.size(); ++i)
            dP.data[i] += G.data[static_cast<size_t>(r) * n + i];
        }
        r += pr;
      }
    });
  }

  // Gather entries by flat index; result is a length-k vector.
  Var pick_flat(Var a, const std::vector<int64_t>& idx) {
    const auto& A = value(a);
    Tensor<T> out({static_cast<int>(idx.size())});
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= A.numel())
        throw std::invalid_argument("pick: flat index " + std::to_string(idx[i]) + " outside " +
                                    Tensor<T>::shape_str(A.shape));
      out.data[i] = A.data[static_cast<size_t>(idx[i])];
    }
    return push(std::move(out), needs(a), {a}, [a, idx](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (size_t i = 0; i < idx.size(); ++i) dA.data[static_cast<size_t>(idx[i])] += G.data[i];
    });
  }

  // ---- shape ops ----

  Var reshape(Var a, std::vector<int> s) {
    const auto& A = value(a);
    if (Tensor<T>::numel_of(s) != A.numel())
      throw std::invalid_argument("reshape: cannot view " + Tensor<T>::shape_str(A.shape) + " as " +
                                  Tensor<T>::shape_str(s));
    Tensor<T> out = A;
    out.shape = std::move(s);
    return push(std::move(out), needs(a), {a}, [a](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (size_t i = 0; i < G.data.size(); ++i) dA.data[i] += G.data[i];
    });
  }

  Var transpose(Var a) {
    const auto& A = value(a);
    if (A.shape.size() != 2)
      throw std::invalid_argument("transpose: needs 2-d, got " + Tensor<T>::shape_str(A.shape));
    const int m = A.shape[0], n = A.shape[1];
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(j) * m + i] = A.data[static_cast<size_t>(i) * n + j];
    return push(std::move(out), needs(a), {a}, [a, m, n](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          dA.data[static_cast<size_t>(i) * n + j] += G.data[static_cast<size_t>(j) * m + i];
    });
  }

  // ---- nonlinearities ----

  Var softmax_rows(Var a) {
    Tensor<T> out = rows_softmax(value(a), /*log=*/false);
    return push(std::move(out), needs(a), {a}, [a](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& Y = g.nodes_[o].value;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      const int n = Y.shape.back();
      const int m = static_cast<int>(Y.numel()) / n;
      for (int i = 0; i < m; ++i) {
        const T* y = Y.data.data() + static_cast<size_t>(i) * n;
        const T* gr = G.data.data() + static_cast<size_t>(i) * n;
        T dot = 0;
        for (int j = 0; j < n; ++j) dot += y[j] * gr[j];
        T* da = dA.data.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) da[j] += y[j] * (gr[j] - dot);
      }
    });
  }

  Var log_softmax_rows(Var a) {
    Tensor<T> out = rows_softmax(value(a), /*log=*/true);
    return push(std::move(out), needs(a), {a}, [a](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& LY = g.nodes_[o].value;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      const int n = LY.shape.back();
      const int m = static_cast<int>(LY.numel()) / n;
      for (int i = 0; i < m; ++i) {
        const T* ly = LY.data.data() + static_cast<size_t>(i) * n;
        const T* gr = G.data.data() + static_cast<size_t>(i) * n;
        T gsum = 0;
        for (int j = 0; j < n; ++j) gsum += gr[j];
        T* da = dA.data.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) da[j] += gr[j] - std::exp(ly[j]) * gsum;
      }
    });
  }

  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const auto& X = value(x);
    if (X.shape.size() != 2)
      throw std::invalid_argument("layer_norm: needs 2-d input, got " + Tensor<T>::shape_str(X.shape));
    const int m = X.shape[0], n = X.shape[1];
    if (value(gain).numel() != n || value(bias).numel() != n)
      throw std::invalid_argument("layer_norm: gain/bias length must be " + std::to_string(n));
    Tensor<T> out({m, n});
    Tensor<T> xhat({m, n});
    Tensor<T> inv_std({m});
    const auto& Gn = value(gain);
    const auto& Bs = value(bias);
    for (int i = 0; i < m; ++i) {
      const T* xr = X.row_ptr(i);
      T mean = 0;
      for (int j = 0; j < n; ++j) mean += xr[j];
      mean /= static_cast<T>(n);
      T var = 0;
      for (int j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= static_cast<T>(n);
      const T istd = T(1) / std::sqrt(var + eps);
      inv_std.data[i] = istd;
      T* xh = xhat.row_ptr(i);
      T* orow = out.row_ptr(i);
      for (int j = 0; j < n; ++j) {
        xh[j] = (xr[j] - mean) * istd;
        orow[j] = Gn.data[j] * xh[j] + Bs.data[j];
      }
    }
    auto xhat_s = std::make_shared<Tensor<T>>(std::move(xhat));
    auto istd_s = std::make_shared<Tensor<T>>(std::move(inv_std));
    return push(std::move(out), needs(x) || needs(gain) || needs(bias), {x, gain, bias},
                [x, gain, bias, m, n, xhat_s, istd_s](Graph& g, Var o) {
                  const auto& G = g.nodes_[o].grad;
                  const auto& Gn = g.value(gain);
                  for (int i = 0; i < m; ++i) {
                    const T* gr = G.row_ptr(i);
                    const T* xh = xhat_s->row_ptr(i);
                    if (g.needs(gain)) {
                      auto& dG = g.nodes_[gain].grad;
                      for (int j = 0; j < n; ++j) dG.data[j] += gr[j] * xh[j];
                    }
                    if (g.needs(bias)) {
                      auto& dB = g.nodes_[bias].grad;
                      for (int j = 0; j < n; ++j) dB.data[j] += gr[j];
                    }
                    if (g.needs(x)) {
                      T mean_dxhat = 0, mean_dxhat_xhat = 0;
                      for (int j = 0; j < n; ++j) {
                        const T dxh = gr[j] * Gn.data[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                      }
                      mean_dxhat /= static_cast<T>(n);
                      mean_dxhat_xhat /= static_cast<T>(n);
                      auto& dX = g.nodes_[x].grad;
                      T* dxr = dX.row_ptr(i);
                      const T istd = istd_s->data[i];
                      for (int j = 0; j < n; ++j) {
                        const T dxh = gr[j] * Gn.data[j];
                        dxr[j] += istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                      }
                    }
                  }
                });
  }

  Var gelu(Var a) {
    const auto& A = value(a);
    Tensor<T> out = A;
    for (auto& v : out.data) {
      const double x = static_cast<double>(v);
      v = static_cast<T>(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))));
    }
    return push(std::move(out), needs(a), {a}, [a](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& A2 = g.value(a);
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (size_t i = 0; i < G.data.size(); ++i) {
        const double x = static_cast<double>(A2.data[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        dA.data[i] += G.data[i] * static_cast<T>(cdf + x * pdf);
      }
    });
  }

  Var exp_elem(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::exp(v);
    return push(std::move(out), needs(a), {a}, [a](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& Y = g.nodes_[o].value;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (size_t i = 0; i < G.data.size(); ++i) dA.data[i] += G.data[i] * Y.data[i];
    });
  }

  // ---- losses and reductions ----

  // Per-row negative log-likelihood of the target column. Returns a length-m vector.
  Var cross_entropy_rows(Var logits, const std::vector<int>& targets) {
    const auto& L = value(logits);
    if (L.shape.size() != 2)
      throw std::invalid_argument("cross_entropy: logits must be 2-d, got " + Tensor<T>::shape_str(L.shape));
    const int m = L.shape[0], n = L.shape[1];
    if (static_cast<int>(targets.size()) != m)
      throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                  " targets for " + std::to_string(m) + " rows");
    for (int t : targets)
      if (t < 0 || t >= n) throw std::invalid_argument("cross_entropy: target " + std::to_string(t) + " out of range");
    Tensor<T> probs = rows_softmax(L, /*log=*/false);
    Tensor<T> logprobs = rows_softmax(L, /*log=*/true);
    Tensor<T> out({m});
    for (int i = 0; i < m; ++i) out.data[i] = -logprobs.at(i, targets[i]);
    auto probs_s = std::make_shared<Tensor<T>>(std::move(probs));
    return push(std::move(out), needs(logits), {logits}, [logits, targets, m, n, probs_s](Graph& g, Var o) {
      if (!g.needs(logits)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dL = g.nodes_[logits].grad;
      for (int i = 0; i < m; ++i) {
        const T gi = G.data[i];
        if (gi == T(0)) continue;
        const T* p = probs_s->row_ptr(i);
        T* dl = dL.row_ptr(i);
        for (int j = 0; j < n; ++j) dl[j] += gi * p[j];
        dl[targets[i]] -= gi;
      }
    });
  }

  Var reduce_sum(Var a) {
    const auto& A = value(a);
    T s = 0;
    for (T v : A.data) s += v;
    return push(Tensor<T>::scalar(s), needs(a), {a}, [a](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const T gi = g.nodes_[o].grad.data[0];
      auto& dA = g.nodes_[a].grad;
      for (auto& v : dA.data) v += gi;
    });
  }

  Var reduce_mean(Var a) {
    const auto& A = value(a);
    if (A.numel() == 0) throw std::invalid_argument("reduce_mean: empty tensor");
    T s = 0;
    for (T v : A.data) s += v;
    const T inv = T(1) / static_cast<T>(A.numel());
    return push(Tensor<T>::scalar(s * inv), needs(a), {a}, [a, inv](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const T gi = g.nodes_[o].grad.data[0] * inv;
      auto& dA = g.nodes_[a].grad;
      for (auto& v : dA.data) v += gi;
    });
  }

  // Sum over the last axis of a 2-d tensor; returns a length-m vector.
  Var row_sum(Var a) {
    const auto& A = value(a);
    if (A.shape.size() != 2)
      throw std::invalid_argument("row_sum: needs 2-d, got " + Tensor<T>::shape_str(A.shape));
    const int m = A.shape[0], n = A.shape[1];
    Tensor<T> out({m});
    for (int i = 0; i < m; ++i) {
      T s = 0;
      const T* r = A.row_ptr(i);
      for (int j = 0; j < n; ++j) s += r[j];
      out.data[i] = s;
    }
    return push(std::move(out), needs(a), {a}, [a, m, n](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (int i = 0; i < m; ++i) {
        const T gi = G.data[i];
        T* dr = dA.row_ptr(i);
        for (int j = 0; j < n; ++j) dr[j] += gi;
      }
    });
  }

  Var clip_elem(Var a, T lo, T hi) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::min(std::max(v, lo), hi);
    return push(std::move(out), needs(a), {a}, [a, lo, hi](Graph& g, Var o) {
      if (!g.needs(a)) return;
      const auto& A2 = g.value(a);
      const auto& G = g.nodes_[o].grad;
      auto& dA = g.nodes_[a].grad;
      for (size_t i = 0; i < G.data.size(); ++i)
        if (A2.data[i] > lo && A2.data[i] < hi) dA.data[i] += G.data[i];
    });
  }

  // Elementwise min; ties route the gradient to a.
  Var min_elem(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape != B.shape)
      throw std::invalid_argument("min: incompatible shapes " + Tensor<T>::shape_str(A.shape) +
                                  " and " + Tensor<T>::shape_str(B.shape));
    Tensor<T> out = A;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(A.data[i], B.data[i]);
    return push(std::move(out), needs(a) || needs(b), {a, b}, [a, b](Graph& g, Var o) {
      const auto& A2 = g.value(a);
      const auto& B2 = g.value(b);
      const auto& G = g.nodes_[o].grad;
      for (size_t i = 0; i < G.data.size(); ++i) {
        if (A2.data[i] <= B2.data[i]) {
          if (g.needs(a)) g.nodes_[a].grad.data[i] += G.data[i];
        } else if (g.needs(b)) {
          g.nodes_[b].grad.data[i] += G.data[i];
        }
      }
    });
  }

  // ---- straight-through ----

  // Forward: one-hot at the argmax of each row (lowest index wins ties).
  // Backward: gradients pass through unchanged, as if the output were y.
  Var st_hard_rows(Var y) {
    const auto& Y = value(y);
    const int n = Y.shape.back();
    const int m = static_cast<int>(Y.numel()) / n;
    Tensor<T> out = Y;
    for (int i = 0; i < m; ++i) {
      T* r = out.data.data() + static_cast<size_t>(i) * n;
      int best = 0;
      for (int j = 1; j < n; ++j)
        if (r[j] > r[best]) best = j;
      for (int j = 0; j < n; ++j) r[j] = (j == best) ? T(1) : T(0);
    }
    return push(std::move(out), needs(y), {y}, [y](Graph& g, Var o) {
      if (g.needs(y)) accumulate(g.nodes_[y].grad, g.nodes_[o].grad);
    });
  }

  // Straight-through with the forward one-hot forced to the given ids.
  // Used when the hard sample was drawn on a separate inference path.
  Var st_hard_rows_forced(Var y, const std::vector<int>& ids) {
    const auto& Y = value(y);
    const int n = Y.shape.back();
    const int m = static_cast<int>(Y.numel()) / n;
    if (static_cast<int>(ids.size()) != m)
      throw std::invalid_argument("st_forced: " + std::to_string(ids.size()) + " ids for " +
                                  std::to_string(m) + " rows");
    Tensor<T> out(Y.shape);
    for (int i = 0; i < m; ++i) {
      if (ids[i] < 0 || ids[i] >= n)
        throw std::invalid_argument("st_forced: id " + std::to_string(ids[i]) + " out of range");
      out.data[static_cast<size_t>(i) * n + ids[i]] = T(1);
    }
    return push(std::move(out), needs(y), {y}, [y](Graph& g, Var o) {
      if (g.needs(y)) accumulate(g.nodes_[y].grad, g.nodes_[o].grad);
    });
  }

  // ---- backward ----

  void backward(Var loss_var) {
    auto& loss = nodes_[check(loss_var)];
    if (!loss.value.is_scalar())
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  Tensor<T>::shape_str(loss.value.shape));
    loss.grad.data[0] = T(1);
    for (int i = loss_var; i >= 0; --i) {
      if (nodes_[i].backprop && nodes_[i].needs_grad) nodes_[i].backprop(*this, i);
    }
  }

  bool needs(Var v) const { return nodes_[check(v)].needs_grad; }

  static void matmul_raw(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
      T* crow = c + static_cast<size_t>(i) * n;
      const T* arow = a + static_cast<size_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const T ap = arow[p];
        if (ap == T(0)) continue;
        const T* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += ap * brow[j];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<Var> parents;
    std::function<void(Graph&, Var)> backprop;
    bool needs_grad = false;
  };

  Var check(Var v) const {
    if (v < 0 || v >= static_cast<Var>(nodes_.size()))
      throw std::invalid_argument("graph: invalid var " + std::to_string(v));
    return v;
  }

  Var push(Tensor<T> value, bool needs_grad, std::vector<Var> parents,
           std::function<void(Graph&, Var)> backprop) {
    Node n;
    n.grad = Tensor<T>::zeros(value.shape);
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backprop = std::move(backprop);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
  }

  static void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
  }

  // Stable row softmax / log-softmax. -inf entries carry exactly zero mass.
  static Tensor<T> rows_softmax(const Tensor<T>& a, bool log) {
    if (a.numel() == 0 || a.shape.back() == 0)
      throw std::invalid_argument("softmax: empty axis in " + Tensor<T>::shape_str(a.shape));
    const int n = a.shape.back();
    const int m = static_cast<int>(a.numel()) / n;
    Tensor<T> out = a;
    for (int i = 0; i < m; ++i) {
      T* r = out.data.data() + static_cast<size_t>(i) * n;
      T mx = r[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, r[j]);
      if (!(mx > -std::numeric_limits<T>::infinity()))
        throw std::invalid_argument("softmax: all entries of row " + std::to_string(i) + " are -inf");
      T sum = 0;
      for (int j = 0; j < n; ++j) sum += std::exp(r[j] - mx);
      if (log) {
        const T lse = mx + std::log(sum);
        for (int j = 0; j < n; ++j) r[j] = r[j] - lse;
      } else {
        const T inv = T(1) / sum;
        for (int j = 0; j < n; ++j) r[j] = std::exp(r[j] - mx) * inv;
      }
    }
    return out;
  }

  std::vector<Node> nodes_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace unigrid
