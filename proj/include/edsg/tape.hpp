#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive application as a node holding the output
// value, the operand node ids, a backward rule, and a recompute rule. Nodes
// are appended in topological order, so backward() is a reverse sweep and
// replay() is a forward sweep. Replaying after poking a leaf re-runs the
// exact same kernels in the same order, which is what grad_check relies on
// for its central-difference oracle.
//
// The tape is confined to one thread. Instantiate with T = float for
// training and T = double for finite-difference verification.

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "edsg/common.hpp"
#include "edsg/tensor.hpp"

namespace edsg {

template <typename T>
class Tape {
 public:
  struct Val {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  // ---- node access ----

  const Tensor<T>& value(Val v) const { return node(v).value; }

  // Gradient of a node after backward(); zeros if the loss never reached it.
  Tensor<T> grad_of(Val v) const {
    const Node& n = node(v);
    if (n.grad.data.empty()) return Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  // Mutable leaf storage, used by grad_check to poke inputs between replays.
  Tensor<T>& leaf_data(Val v) {
    Node& n = node(v);
    if (!n.is_leaf) throw TapeError("leaf_data: node is not a leaf");
    return n.value;
  }

  // ---- leaves ----

  Val leaf(Tensor<T> t, bool requires_grad) {
    Node n;
    n.value = std::move(t);
    n.value.requires_grad = requires_grad;
    n.needs_grad = requires_grad;
    n.is_leaf = true;
    return push(std::move(n));
  }

  Val constant(Tensor<T> t) { return leaf(std::move(t), false); }

  // ---- primitives ----

  // [m,k] x [k,n] -> [m,n]
  Val matmul(Val a, Val b) {
    const Tensor<T>&ta = value(a), &tb = value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
      throw ShapeError(cat("matmul: ", shape_str(ta.shape), " x ", shape_str(tb.shape)));
    const int64_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    kernels::matmul_acc(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
    return record(
        std::move(out), {a, b},
        [a, b, m, k, n](Tape& tp, int32_t self) {
          const Tensor<T>& g = tp.nodes_[self].grad;
          if (tp.node(a).needs_grad) {
            // dA += dC * B^T
            Tensor<T> bt = Tensor<T>::zeros({n, k});
            kernels::transpose(tp.value(b).data.data(), bt.data.data(), k, n);
            kernels::matmul_acc(g.data.data(), bt.data.data(), tp.grad_buf(a).data.data(), m, n, k);
          }
          if (tp.node(b).needs_grad) {
            // dB += A^T * dC
            Tensor<T> at = Tensor<T>::zeros({k, m});
            kernels::transpose(tp.value(a).data.data(), at.data.data(), m, k);
            kernels::matmul_acc(at.data.data(), g.data.data(), tp.grad_buf(b).data.data(), k, m, n);
          }
        },
        [a, b, m, k, n](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          std::fill(out.data.begin(), out.data.end(), T(0));
          kernels::matmul_acc(tp.value(a).data.data(), tp.value(b).data.data(), out.data.data(), m,
                              k, n);
        });
  }

  Val add(Val a, Val b) { return binary_elemwise("add", a, b, /*is_mul=*/false); }
  Val mul(Val a, Val b) { return binary_elemwise("multiply", a, b, /*is_mul=*/true); }

  Val scale(Val a, double c) {
    Tensor<T> out = value(a);
    const T cc = static_cast<T>(c);
    for (auto& x : out.data) x *= cc;
    return record(
        std::move(out), {a},
        [a, cc](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& g = tp.nodes_[self].grad;
          Tensor<T>& da = tp.grad_buf(a);
          for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += cc * g.data[i];
        },
        [a, cc](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& in = tp.value(a);
          for (size_t i = 0; i < in.data.size(); ++i) out.data[i] = cc * in.data[i];
        });
  }

  // Softmax over the last axis of a 2-D tensor.
  Val row_softmax(Val a) {
    const Tensor<T>& ta = value(a);
    require_2d("row-softmax", ta);
    const int64_t r = ta.shape[0], c = ta.shape[1];
    Tensor<T> out = Tensor<T>::zeros({r, c});
    for (int64_t i = 0; i < r; ++i)
      kernels::softmax_row(ta.data.data() + i * c, out.data.data() + i * c, c);
    return record(
        std::move(out), {a},
        [a, r, c](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& y = tp.nodes_[self].value;
          const Tensor<T>& g = tp.nodes_[self].grad;
          Tensor<T>& da = tp.grad_buf(a);
          for (int64_t i = 0; i < r; ++i) {
            const T* yr = y.data.data() + i * c;
            const T* gr = g.data.data() + i * c;
            T dot = T(0);
            for (int64_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
            T* dr = da.data.data() + i * c;
            for (int64_t j = 0; j < c; ++j) dr[j] += yr[j] * (gr[j] - dot);
          }
        },
        [a, r, c](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& in = tp.value(a);
          for (int64_t i = 0; i < r; ++i)
            kernels::softmax_row(in.data.data() + i * c, out.data.data() + i * c, c);
        });
  }

  Val row_log_softmax(Val a) {
    const Tensor<T>& ta = value(a);
    require_2d("row-log-softmax", ta);
    const int64_t r = ta.shape[0], c = ta.shape[1];
    Tensor<T> out = Tensor<T>::zeros({r, c});
    for (int64_t i = 0; i < r; ++i)
      kernels::log_softmax_row(ta.data.data() + i * c, out.data.data() + i * c, c);
    return record(
        std::move(out), {a},
        [a, r, c](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& y = tp.nodes_[self].value;  // log-probabilities
          const Tensor<T>& g = tp.nodes_[self].grad;
          Tensor<T>& da = tp.grad_buf(a);
          for (int64_t i = 0; i < r; ++i) {
            const T* yr = y.data.data() + i * c;
            const T* gr = g.data.data() + i * c;
            T gsum = T(0);
            for (int64_t j = 0; j < c; ++j) gsum += gr[j];
            T* dr = da.data.data() + i * c;
            for (int64_t j = 0; j < c; ++j) dr[j] += gr[j] - std::exp(yr[j]) * gsum;
          }
        },
        [a, r, c](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& in = tp.value(a);
          for (int64_t i = 0; i < r; ++i)
            kernels::log_softmax_row(in.data.data() + i * c, out.data.data() + i * c, c);
        });
  }

  // y = x / sqrt(mean(x^2) + eps) * gamma, rows of a 2-D x, gamma shape [d].
  Val rms_norm(Val x, Val gamma, double eps) {
    const Tensor<T>&tx = value(x), &tg = value(gamma);
    require_2d("rms-normalize", tx);
    if (tg.rank() != 1 || tg.shape[0] != tx.shape[1])
      throw ShapeError(cat("rms-normalize: x ", shape_str(tx.shape), " vs gamma ", shape_str(tg.shape)));
    const int64_t r = tx.shape[0], c = tx.shape[1];
    const T te = static_cast<T>(eps);
    Tensor<T> out = Tensor<T>::zeros({r, c});
    for (int64_t i = 0; i < r; ++i)
      kernels::rms_norm_row(tx.data.data() + i * c, tg.data.data(), out.data.data() + i * c, c, te);
    return record(
        std::move(out), {x, gamma},
        [x, gamma, r, c, te](Tape& tp, int32_t self) {
          const Tensor<T>& g = tp.nodes_[self].grad;
          const Tensor<T>& xv = tp.value(x);
          const Tensor<T>& gv = tp.value(gamma);
          const bool need_x = tp.node(x).needs_grad, need_g = tp.node(gamma).needs_grad;
          for (int64_t i = 0; i < r; ++i) {
            const T* xr = xv.data.data() + i * c;
            const T* gr = g.data.data() + i * c;
            T ms = T(0);
            for (int64_t j = 0; j < c; ++j) ms += xr[j] * xr[j];
            ms = ms / static_cast<T>(c) + te;
            const T inv = T(1) / std::sqrt(ms);
            if (need_x) {
              // dx_j = inv * g_j * gamma_j - (inv^3 / c) * x_j * sum(g * gamma * x)
              T dot = T(0);
              for (int64_t j = 0; j < c; ++j) dot += gr[j] * gv.data[static_cast<size_t>(j)] * xr[j];
              const T coef = inv * inv * inv * dot / static_cast<T>(c);
              T* dx = tp.grad_buf(x).data.data() + i * c;
              for (int64_t j = 0; j < c; ++j)
                dx[j] += inv * gr[j] * gv.data[static_cast<size_t>(j)] - coef * xr[j];
            }
            if (need_g) {
              T* dg = tp.grad_buf(gamma).data.data();
              for (int64_t j = 0; j < c; ++j) dg[j] += gr[j] * xr[j] * inv;
            }
          }
        },
        [x, gamma, r, c, te](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& xv = tp.value(x);
          const Tensor<T>& gv = tp.value(gamma);
          for (int64_t i = 0; i < r; ++i)
            kernels::rms_norm_row(xv.data.data() + i * c, gv.data.data(),
                                  out.data.data() + i * c, c, te);
        });
  }

  Val gelu(Val a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = kernels::gelu(v);
    return record(
        std::move(out), {a},
        [a](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& g = tp.nodes_[self].grad;
          const Tensor<T>& in = tp.value(a);
          Tensor<T>& da = tp.grad_buf(a);
          for (size_t i = 0; i < g.data.size(); ++i)
            da.data[i] += g.data[i] * kernels::gelu_grad(in.data[i]);
        },
        [a](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& in = tp.value(a);
          for (size_t i = 0; i < in.data.size(); ++i) out.data[i] = kernels::gelu(in.data[i]);
        });
  }

  Val log_elem(Val a) {
    const Tensor<T>& ta = value(a);
    Tensor<T> out = ta;
    for (auto& v : out.data) {
      if (!(v > T(0))) throw NumericsError("log: input must be strictly positive");
      v = std::log(v);
    }
    return record(
        std::move(out), {a},
        [a](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& g = tp.nodes_[self].grad;
          const Tensor<T>& in = tp.value(a);
          Tensor<T>& da = tp.grad_buf(a);
          for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] / in.data[i];
        },
        [a](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& in = tp.value(a);
          for (size_t i = 0; i < in.data.size(); ++i) out.data[i] = std::log(in.data[i]);
        });
  }

  Val exp_elem(Val a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::exp(v);
    return record(
        std::move(out), {a},
        [a](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& g = tp.nodes_[self].grad;
          const Tensor<T>& y = tp.nodes_[self].value;
          Tensor<T>& da = tp.grad_buf(a);
          for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * y.data[i];
        },
        [a](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& in = tp.value(a);
          for (size_t i = 0; i < in.data.size(); ++i) out.data[i] = std::exp(in.data[i]);
        });
  }

  // Embedding lookup: out[i, :] = table[ids[i], :]. ids are captured by value
  // and are not a differentiable input.
  Val gather_rows(Val table, std::vector<int32_t> ids) {
    const Tensor<T>& tt = value(table);
    require_2d("embedding-gather", tt);
    const int64_t rows = tt.shape[0], c = tt.shape[1];
    for (int32_t id : ids)
      if (id < 0 || id >= rows)
        throw InputError(cat("embedding-gather: id ", id, " out of range [0, ", rows, ")"));
    const int64_t n = static_cast<int64_t>(ids.size());
    Tensor<T> out = Tensor<T>::zeros({n, c});
    for (int64_t i = 0; i < n; ++i)
      std::copy_n(tt.data.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * c, c,
                  out.data.data() + i * c);
    return record(
        std::move(out), {table},
        [table, ids, c](Tape& tp, int32_t self) {
          if (!tp.node(table).needs_grad) return;
          const Tensor<T>& g = tp.nodes_[self].grad;
          Tensor<T>& dt = tp.grad_buf(table);
          for (size_t i = 0; i < ids.size(); ++i) {
            const T* gr = g.data.data() + static_cast<int64_t>(i) * c;
            T* tr = dt.data.data() + static_cast<int64_t>(ids[i]) * c;
            for (int64_t j = 0; j < c; ++j) tr[j] += gr[j];
          }
        },
        [table, ids, c](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& tt = tp.value(table);
          for (size_t i = 0; i < ids.size(); ++i)
            std::copy_n(tt.data.data() + static_cast<int64_t>(ids[i]) * c, c,
                        out.data.data() + static_cast<int64_t>(i) * c);
        });
  }

  Val transpose(Val a) {
    const Tensor<T>& ta = value(a);
    require_2d("transpose", ta);
    const int64_t r = ta.shape[0], c = ta.shape[1];
    Tensor<T> out = Tensor<T>::zeros({c, r});
    kernels::transpose(ta.data.data(), out.data.data(), r, c);
    return record(
        std::move(out), {a},
        [a, r, c](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& g = tp.nodes_[self].grad;  // [c, r]
          Tensor<T> gt = Tensor<T>::zeros({r, c});
          kernels::transpose(g.data.data(), gt.data.data(), c, r);
          Tensor<T>& da = tp.grad_buf(a);
          for (size_t i = 0; i < gt.data.size(); ++i) da.data[i] += gt.data[i];
        },
        [a, r, c](Tape& tp, int32_t self) {
          kernels::transpose(tp.value(a).data.data(), tp.nodes_[self].value.data.data(), r, c);
        });
  }

  Val reshape(Val a, Shape shape) {
    const Tensor<T>& ta = value(a);
    if (numel_of(shape) != ta.numel())
      throw ShapeError(cat("reshape: ", shape_str(ta.shape), " -> ", shape_str(shape),
                           " changes element count"));
    Tensor<T> out = ta;
    out.shape = shape;
    return record(
        std::move(out), {a},
        [a](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& g = tp.nodes_[self].grad;
          Tensor<T>& da = tp.grad_buf(a);
          for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
        },
        [a](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          std::copy(tp.value(a).data.begin(), tp.value(a).data.end(), out.data.begin());
        });
  }

  Val sum(Val a) { return reduce(a, /*mean=*/false); }
  Val mean(Val a) { return reduce(a, /*mean=*/true); }

  // Columns [c0, c0+w) of a 2-D tensor.
  Val slice_cols(Val a, int64_t c0, int64_t w) {
    const Tensor<T>& ta = value(a);
    require_2d("slice", ta);
    const int64_t r = ta.shape[0], c = ta.shape[1];
    if (c0 < 0 || w <= 0 || c0 + w > c)
      throw ShapeError(cat("slice: cols [", c0, ", ", c0 + w, ") out of ", shape_str(ta.shape)));
    Tensor<T> out = Tensor<T>::zeros({r, w});
    for (int64_t i = 0; i < r; ++i)
      std::copy_n(ta.data.data() + i * c + c0, w, out.data.data() + i * w);
    return record(
        std::move(out), {a},
        [a, c0, w, r, c](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const Tensor<T>& g = tp.nodes_[self].grad;
          Tensor<T>& da = tp.grad_buf(a);
          for (int64_t i = 0; i < r; ++i) {
            const T* gr = g.data.data() + i * w;
            T* dr = da.data.data() + i * c + c0;
            for (int64_t j = 0; j < w; ++j) dr[j] += gr[j];
          }
        },
        [a, c0, w, r, c](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>& in = tp.value(a);
          for (int64_t i = 0; i < r; ++i)
            std::copy_n(in.data.data() + i * c + c0, w, out.data.data() + i * w);
        });
  }

  // Horizontal concatenation of 2-D tensors with equal row counts.
  Val concat_cols(const std::vector<Val>& parts) {
    if (parts.empty()) throw ShapeError("concatenate: no operands");
    const int64_t r = value(parts[0]).shape[0];
    int64_t total = 0;
    for (Val p : parts) {
      const Tensor<T>& tp_ = value(p);
      require_2d("concatenate", tp_);
      if (tp_.shape[0] != r)
        throw ShapeError(cat("concatenate: row mismatch ", shape_str(value(parts[0]).shape), " vs ",
                             shape_str(tp_.shape)));
      total += tp_.shape[1];
    }
    Tensor<T> out = Tensor<T>::zeros({r, total});
    int64_t off = 0;
    for (Val p : parts) {
      const Tensor<T>& t = value(p);
      const int64_t w = t.shape[1];
      for (int64_t i = 0; i < r; ++i)
        std::copy_n(t.data.data() + i * w, w, out.data.data() + i * total + off);
      off += w;
    }
    std::vector<int64_t> widths;
    for (Val p : parts) widths.push_back(value(p).shape[1]);
    return record(
        std::move(out), parts,
        [parts, widths, r, total](Tape& tp, int32_t self) {
          const Tensor<T>& g = tp.nodes_[self].grad;
          int64_t off = 0;
          for (size_t pi = 0; pi < parts.size(); ++pi) {
            const int64_t w = widths[pi];
            if (tp.node(parts[pi]).needs_grad) {
              Tensor<T>& dp = tp.grad_buf(parts[pi]);
              for (int64_t i = 0; i < r; ++i) {
                const T* gr = g.data.data() + i * total + off;
                T* dr = dp.data.data() + i * w;
                for (int64_t j = 0; j < w; ++j) dr[j] += gr[j];
              }
            }
            off += w;
          }
        },
        [parts, widths, r, total](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          int64_t off = 0;
          for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor<T>& t = tp.value(parts[pi]);
            const int64_t w = widths[pi];
            for (int64_t i = 0; i < r; ++i)
              std::copy_n(t.data.data() + i * w, w, out.data.data() + i * total + off);
            off += w;
          }
        });
  }

  // Rotary position embedding over a [seq, heads*d_head] tensor. Consecutive
  // value pairs (2p, 2p+1) within each head rotate by
  // positions[i] * base^(-2p / d_head). The map is orthogonal per pair, so
  // the backward rule is the rotation by the negated angle.
  Val rope(Val a, std::vector<int32_t> positions, int64_t heads, int64_t d_head, double base) {
    const Tensor<T>& ta = value(a);
    require_2d("rope", ta);
    if (d_head % 2 != 0) throw ConfigError(cat("rope: d_head ", d_head, " must be even"));
    if (ta.shape[1] != heads * d_head)
      throw ShapeError(cat("rope: ", shape_str(ta.shape), " vs heads*d_head ", heads * d_head));
    if (static_cast<int64_t>(positions.size()) != ta.shape[0])
      throw ShapeError(cat("rope: ", positions.size(), " positions for ", ta.shape[0], " rows"));
    Tensor<T> out = ta;
    rope_rows(out, positions, heads, d_head, base, /*invert=*/false);
    return record(
        std::move(out), {a},
        [a, positions, heads, d_head, base](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          Tensor<T> g = tp.nodes_[self].grad;
          rope_rows(g, positions, heads, d_head, base, /*invert=*/true);
          Tensor<T>& da = tp.grad_buf(a);
          for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
        },
        [a, positions, heads, d_head, base](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          std::copy(tp.value(a).data.begin(), tp.value(a).data.end(), out.data.begin());
          rope_rows(out, positions, heads, d_head, base, /*invert=*/false);
        });
  }

  // ---- backward and replay ----

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Call once per
  // recorded forward; a second call would accumulate on top of the first.
  void backward(Val loss) {
    if (loss.id < 0 || loss.id >= static_cast<int32_t>(nodes_.size()))
      throw TapeError("backward: loss is not on this tape");
    Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (!ln.value.is_scalar())
      throw ContractError(cat("backward: loss must be scalar, got ", shape_str(ln.value.shape)));
    grad_buf(loss).data[0] += T(1);
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || n.grad.data.empty() || !n.backward_fn) continue;
      n.backward_fn(*this, id);
    }
  }

  // Recomputes every non-leaf value in recording order.
  void replay() {
    for (int32_t id = 0; id < static_cast<int32_t>(nodes_.size()); ++id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.recompute_fn) n.recompute_fn(*this, id);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until first write during backward
    std::vector<Val> inputs;
    std::function<void(Tape&, int32_t)> backward_fn;
    std::function<void(Tape&, int32_t)> recompute_fn;
    bool needs_grad = false;
    bool is_leaf = false;
  };

  std::vector<Node> nodes_;

  const Node& node(Val v) const {
    if (v.id < 0 || v.id >= static_cast<int32_t>(nodes_.size()))
      throw TapeError(cat("node id ", v.id, " is not on this tape"));
    return nodes_[static_cast<size_t>(v.id)];
  }
  Node& node(Val v) { return const_cast<Node&>(static_cast<const Tape*>(this)->node(v)); }

  Tensor<T>& grad_buf(Val v) {
    Node& n = node(v);
    if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  Val push(Node n) {
    nodes_.push_back(std::move(n));
    return Val{static_cast<int32_t>(nodes_.size() - 1)};
  }

  Val record(Tensor<T> out, std::vector<Val> inputs, std::function<void(Tape&, int32_t)> bwd,
             std::function<void(Tape&, int32_t)> recompute) {
    Node n;
    n.value = std::move(out);
    n.inputs = std::move(inputs);
    for (Val in : n.inputs) n.needs_grad = n.needs_grad || node(in).needs_grad;
    if (n.needs_grad) n.backward_fn = std::move(bwd);
    n.recompute_fn = std::move(recompute);
    return push(std::move(n));
  }

  static void require_2d(const char* prim, const Tensor<T>& t) {
    if (t.rank() != 2) throw ShapeError(cat(prim, ": expected 2-D tensor, got ", shape_str(t.shape)));
  }

  Val binary_elemwise(const char* prim, Val a, Val b, bool is_mul) {
    const Tensor<T>&ta = value(a), &tb = value(b);
    if (!same_shape(ta.shape, tb.shape))
      throw ShapeError(cat(prim, ": ", shape_str(ta.shape), " vs ", shape_str(tb.shape)));
    Tensor<T> out = ta;
    if (is_mul)
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    else
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    return record(
        std::move(out), {a, b},
        [a, b, is_mul](Tape& tp, int32_t self) {
          const Tensor<T>& g = tp.nodes_[self].grad;
          if (tp.node(a).needs_grad) {
            Tensor<T>& da = tp.grad_buf(a);
            if (is_mul) {
              const Tensor<T>& bv = tp.value(b);
              for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * bv.data[i];
            } else {
              for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
            }
          }
          if (tp.node(b).needs_grad) {
            Tensor<T>& db = tp.grad_buf(b);
            if (is_mul) {
              const Tensor<T>& av = tp.value(a);
              for (size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * av.data[i];
            } else {
              for (size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i];
            }
          }
        },
        [a, b, is_mul](Tape& tp, int32_t self) {
          Tensor<T>& out = tp.nodes_[self].value;
          const Tensor<T>&av = tp.value(a), &bv = tp.value(b);
          if (is_mul)
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
          else
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
        });
  }

  Val reduce(Val a, bool take_mean) {
    const Tensor<T>& ta = value(a);
    const T denom = take_mean ? static_cast<T>(ta.numel()) : T(1);
    T acc = T(0);
    for (const T& v : ta.data) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc / denom);
    return record(
        std::move(out), {a},
        [a, denom](Tape& tp, int32_t self) {
          if (!tp.node(a).needs_grad) return;
          const T g = tp.nodes_[self].grad.data[0] / denom;
          Tensor<T>& da = tp.grad_buf(a);
          for (auto& v : da.data) v += g;
        },
        [a, denom](Tape& tp, int32_t self) {
          const Tensor<T>& in = tp.value(a);
          T acc = T(0);
          for (const T& v : in.data) acc += v;
          tp.nodes_[self].value.data[0] = acc / denom;
        });
  }

  static void rope_rows(Tensor<T>& t, const std::vector<int32_t>& positions, int64_t heads,
                        int64_t d_head, double base, bool invert) {
    kernels::rope_rows(t.data.data(), t.shape[0], positions.data(), heads, d_head, base, invert);
  }
};

// Central-difference gradient verification. `build` records a scalar loss on
// the given tape from leaf handles made from `inputs`; the numeric side pokes
// each input element and replays the tape. Returns
// max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Run with T = double; binary32 round-off swamps the comparison otherwise.
template <typename T, typename Fn>
double grad_check(Fn&& build, const std::vector<Tensor<T>>& inputs, double epsilon = 1e-3) {
  if (!(epsilon > 0)) throw ContractError("grad_check: epsilon must be positive");
  Tape<T> tape;
  std::vector<typename Tape<T>::Val> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor<T>& t : inputs) leaves.push_back(tape.leaf(t, true));
  typename Tape<T>::Val loss = build(tape, leaves);
  if (!tape.value(loss).is_scalar())
    throw ContractError(cat("grad_check: output must be scalar, got ",
                            shape_str(tape.value(loss).shape)));
  tape.backward(loss);

  std::vector<Tensor<T>> analytic;
  analytic.reserve(leaves.size());
  for (auto l : leaves) analytic.push_back(tape.grad_of(l));

  double max_err = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor<T>& store = tape.leaf_data(leaves[li]);
    for (size_t e = 0; e < store.data.size(); ++e) {
      const T orig = store.data[e];
      store.data[e] = orig + static_cast<T>(epsilon);
      tape.replay();
      const double f_plus = static_cast<double>(tape.value(loss).data[0]);
      store.data[e] = orig - static_cast<T>(epsilon);
      tape.replay();
      const double f_minus = static_cast<double>(tape.value(loss).data[0]);
      store.data[e] = orig;
      const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
      const double a = static_cast<double>(analytic[li].data[e]);
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, err);
    }
  }
  tape.replay();
  return max_err;
}

}  // namespace edsg
