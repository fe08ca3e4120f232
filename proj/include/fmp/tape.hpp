#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmp/matrix.hpp"

namespace fmp {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  inline const Matrix& value() const;
  inline bool requires_grad() const;

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode recorder. Nodes are appended in evaluation order, so parents always have
// smaller ids than children and a descending sweep is a reverse topological order.
class Tape {
 public:
  // Called as backward(tape, grad_of_node, value_of_node).
  using Backward = std::function<void(Tape&, const Matrix&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, true});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Matrix value) { return leaf(std::move(value), false); }

  // Appends the result of a primitive op. The backward closure receives the gradient of the
  // node and must accumulate into its parents; it is dropped when no parent needs gradients.
  Var record(const char* op, Matrix value, std::initializer_list<Var> parents, Backward backward) {
    return record(op, std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(backward));
  }

  Var record(const char* op, Matrix value, std::span<const Var> parents, Backward backward) {
    if (!all_finite(value)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
    bool needs = false;
    for (const Var& p : parents) {
      if (p.tape() != this) throw Error(std::string("op '") + op + "' mixes vars from different tapes");
      needs = needs || nodes_[p.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs, false});
    return Var(this, nodes_.size() - 1);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      require_same_shape(n.value, g, "accumulate");
      n.grad = g;
    } else {
      require_same_shape(n.grad, g, "accumulate");
      auto dst = n.grad.values();
      auto src = g.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }

  // Seeds d(out)/d(out) = 1 for a 1x1 output and sweeps backwards once. Gradients of
  // intermediate nodes are released after use; leaf gradients stay readable via grad().
  void backward(const Var& out) {
    if (out.tape() != this) throw Error("backward: var belongs to another tape");
    const Matrix& v = nodes_[out.id()].value;
    if (v.rows() != 1 || v.cols() != 1) throw ShapeError("backward: output must be 1x1, got " + shape_str(v));
    nodes_[out.id()].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.is_leaf || !n.backward || n.grad.empty()) continue;
      Matrix g = std::move(n.grad);
      n.grad = Matrix();
      n.backward(*this, g, n.value);
    }
  }

  // Gradient of the last backward() output with respect to a leaf; zeros if unreached.
  Matrix grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? Matrix(n.value.rows(), n.value.cols()) : n.grad;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// ---- helpers shared by code templated over Matrix and Var ----

template <class T>
concept Tensor = std::same_as<T, Matrix> || std::same_as<T, Var>;

inline const Matrix& value_of(const Matrix& m) { return m; }
inline const Matrix& value_of(const Var& v) { return v.value(); }

// Wraps a plain matrix as the same kind of tensor as `like` (a constant for Vars).
inline Matrix lift_like(const Matrix&, Matrix m) { return m; }
inline Var lift_like(const Var& like, Matrix m) { return like.tape()->constant(std::move(m)); }

// ---- differentiable primitives ----

inline Var matmul(const Var& a, const Var& b) {
  return a.tape()->record("matmul", matmul(a.value(), b.value()), {a, b},
                          [ia = a.id(), ib = b.id()](Tape& t, const Matrix& g, const Matrix&) {
                            if (t.requires_grad(ia)) t.accumulate(ia, matmul_nt(g, t.value(ib)));
                            if (t.requires_grad(ib)) t.accumulate(ib, matmul_tn(t.value(ia), g));
                          });
}

inline Var matmul_nt(const Var& a, const Var& b) {
  return a.tape()->record("matmul_nt", matmul_nt(a.value(), b.value()), {a, b},
                          [ia = a.id(), ib = b.id()](Tape& t, const Matrix& g, const Matrix&) {
                            if (t.requires_grad(ia)) t.accumulate(ia, matmul(g, t.value(ib)));
                            if (t.requires_grad(ib)) t.accumulate(ib, matmul_tn(g, t.value(ia)));
                          });
}

inline Var matmul_tn(const Var& a, const Var& b) {
  return a.tape()->record("matmul_tn", matmul_tn(a.value(), b.value()), {a, b},
                          [ia = a.id(), ib = b.id()](Tape& t, const Matrix& g, const Matrix&) {
                            if (t.requires_grad(ia)) t.accumulate(ia, matmul_nt(t.value(ib), g));
                            if (t.requires_grad(ib)) t.accumulate(ib, matmul(t.value(ia), g));
                          });
}

inline Var transpose(const Var& a) {
  return a.tape()->record("transpose", transpose(a.value()), {a},
                          [ia = a.id()](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(ia, transpose(g)); });
}

inline Var add(const Var& a, const Var& b) {
  return a.tape()->record("add", add(a.value(), b.value()), {a, b},
                          [ia = a.id(), ib = b.id()](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(ia, g);
                            t.accumulate(ib, g);
                          });
}

inline Var sub(const Var& a, const Var& b) {
  return a.tape()->record("sub", sub(a.value(), b.value()), {a, b},
                          [ia = a.id(), ib = b.id()](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(ia, g);
                            if (t.requires_grad(ib)) t.accumulate(ib, scale(g, -1.0));
                          });
}

inline Var hadamard(const Var& a, const Var& b) {
  return a.tape()->record("hadamard", hadamard(a.value(), b.value()), {a, b},
                          [ia = a.id(), ib = b.id()](Tape& t, const Matrix& g, const Matrix&) {
                            if (t.requires_grad(ia)) t.accumulate(ia, hadamard(g, t.value(ib)));
                            if (t.requires_grad(ib)) t.accumulate(ib, hadamard(g, t.value(ia)));
                          });
}

inline Var divide(const Var& a, const Var& b) {
  return a.tape()->record("divide", divide(a.value(), b.value()), {a, b},
                          [ia = a.id(), ib = b.id()](Tape& t, const Matrix& g, const Matrix&) {
                            const Matrix& bv = t.value(ib);
                            if (t.requires_grad(ia)) t.accumulate(ia, divide(g, bv));
                            if (t.requires_grad(ib)) {
                              const Matrix& av = t.value(ia);
                              Matrix gb(bv.rows(), bv.cols());
                              for (std::size_t i = 0; i < gb.size(); ++i) {
                                const double b = bv.values()[i];
                                gb.values()[i] = -g.values()[i] * av.values()[i] / (b * b);
                              }
                              t.accumulate(ib, gb);
                            }
                          });
}

inline Var scale(const Var& a, double s) {
  return a.tape()->record("scale", scale(a.value(), s), {a},
                          [ia = a.id(), s](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(ia, scale(g, s)); });
}

inline Var add_scalar(const Var& a, double s) {
  return a.tape()->record("add_scalar", add_scalar(a.value(), s), {a},
                          [ia = a.id()](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(ia, g); });
}

inline Var tanh(const Var& a) {
  return a.tape()->record("tanh", tanh(a.value()), {a}, [ia = a.id()](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix ga(y.rows(), y.cols());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double v = y.values()[i];
      ga.values()[i] = g.values()[i] * (1.0 - v * v);
    }
    t.accumulate(ia, ga);
  });
}

inline Var gelu(const Var& a) {
  return a.tape()->record("gelu", gelu(a.value()), {a}, [ia = a.id()](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(ia);
    Matrix ga(x.rows(), x.cols());
    for (std::size_t i = 0; i < ga.size(); ++i) ga.values()[i] = g.values()[i] * detail::gelu_grad(x.values()[i]);
    t.accumulate(ia, ga);
  });
}

// d sqrt(x) is taken as 0 at x = 0 (an Adam second moment that never moved).
inline Var sqrt(const Var& a) {
  Matrix y = sqrt(a.value());
  return a.tape()->record("sqrt", y, {a}, [ia = a.id()](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(ia);
    Matrix ga(x.rows(), x.cols());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double r = std::sqrt(x.values()[i]);
      ga.values()[i] = r > 0.0 ? g.values()[i] * 0.5 / r : 0.0;
    }
    t.accumulate(ia, ga);
  });
}

inline Var abs(const Var& a) {
  return a.tape()->record("abs", abs(a.value()), {a}, [ia = a.id()](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(ia);
    Matrix ga(x.rows(), x.cols());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double v = x.values()[i];
      ga.values()[i] = v > 0.0 ? g.values()[i] : (v < 0.0 ? -g.values()[i] : 0.0);
    }
    t.accumulate(ia, ga);
  });
}

inline Var add_row(const Var& a, const Var& row) {
  return a.tape()->record("add_row", add_row(a.value(), row.value()), {a, row},
                          [ia = a.id(), ir = row.id()](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(ia, g);
                            if (t.requires_grad(ir)) t.accumulate(ir, col_sums(g));
                          });
}

inline Var col_sums(const Var& a) {
  return a.tape()->record("col_sums", col_sums(a.value()), {a}, [ia = a.id()](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(ia);
    Matrix ga(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) ga(i, j) = g(0, j);
    t.accumulate(ia, ga);
  });
}

inline Var row_sums(const Var& a) {
  return a.tape()->record("row_sums", row_sums(a.value()), {a}, [ia = a.id()](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(ia);
    Matrix ga(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) ga(i, j) = g(i, 0);
    t.accumulate(ia, ga);
  });
}

// Sum of all entries as a 1x1 node.
inline Var sum_all(const Var& a) {
  return a.tape()->record("sum", Matrix(1, 1, sum(a.value())), {a}, [ia = a.id()](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, Matrix(x.rows(), x.cols(), g(0, 0)));
  });
}

inline Matrix sum_all(const Matrix& a) { return Matrix(1, 1, sum(a)); }

inline Var softmax_rows(const Var& a, double temperature = 1.0) {
  return a.tape()->record("softmax_rows", softmax_rows(a.value(), temperature), {a},
                          [ia = a.id(), temperature](Tape& t, const Matrix& g, const Matrix& y) {
                            Matrix ga(y.rows(), y.cols());
                            for (std::size_t i = 0; i < y.rows(); ++i) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
                              for (std::size_t j = 0; j < y.cols(); ++j)
                                ga(i, j) = y(i, j) * (g(i, j) - dot) / temperature;
                            }
                            t.accumulate(ia, ga);
                          });
}

inline Var log_softmax_rows(const Var& a) {
  return a.tape()->record("log_softmax_rows", log_softmax_rows(a.value()), {a},
                          [ia = a.id()](Tape& t, const Matrix& g, const Matrix& y) {
                            Matrix ga(y.rows(), y.cols());
                            for (std::size_t i = 0; i < y.rows(); ++i) {
                              double gs = 0.0;
                              for (std::size_t j = 0; j < y.cols(); ++j) gs += g(i, j);
                              for (std::size_t j = 0; j < y.cols(); ++j)
                                ga(i, j) = g(i, j) - std::exp(y(i, j)) * gs;
                            }
                            t.accumulate(ia, ga);
                          });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  std::vector<Matrix> values;
  values.reserve(parts.size());
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  return parts.front().tape()->record(
      "concat_rows", concat_rows(std::span<const Matrix>(values)), parts, [ids](Tape& t, const Matrix& g, const Matrix&) {
        std::size_t off = 0;
        for (std::size_t id : ids) {
          const std::size_t r = t.value(id).rows();
          if (t.requires_grad(id)) t.accumulate(id, slice_rows(g, off, r));
          off += r;
        }
      });
}

inline Var concat_rows(const Var& a, const Var& b) {
  const Var parts[] = {a, b};
  return concat_rows(std::span<const Var>(parts));
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  std::vector<Matrix> values;
  values.reserve(parts.size());
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  return parts.front().tape()->record(
      "concat_cols", concat_cols(std::span<const Matrix>(values)), parts, [ids](Tape& t, const Matrix& g, const Matrix&) {
        std::size_t off = 0;
        for (std::size_t id : ids) {
          const std::size_t c = t.value(id).cols();
          if (t.requires_grad(id)) t.accumulate(id, slice_cols(g, off, c));
          off += c;
        }
      });
}

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  return a.tape()->record("slice_cols", slice_cols(a.value(), begin, count), {a},
                          [ia = a.id(), begin](Tape& t, const Matrix& g, const Matrix&) {
                            const Matrix& x = t.value(ia);
                            Matrix ga(x.rows(), x.cols());
                            for (std::size_t i = 0; i < g.rows(); ++i)
                              for (std::size_t j = 0; j < g.cols(); ++j) ga(i, begin + j) = g(i, j);
                            t.accumulate(ia, ga);
                          });
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  return a.tape()->record("slice_rows", slice_rows(a.value(), begin, count), {a},
                          [ia = a.id(), begin](Tape& t, const Matrix& g, const Matrix&) {
                            const Matrix& x = t.value(ia);
                            Matrix ga(x.rows(), x.cols());
                            for (std::size_t i = 0; i < g.rows(); ++i)
                              for (std::size_t j = 0; j < g.cols(); ++j) ga(begin + i, j) = g(i, j);
                            t.accumulate(ia, ga);
                          });
}

inline Var gather_rows(const Var& a, std::span<const std::size_t> index) {
  std::vector<std::size_t> idx(index.begin(), index.end());
  return a.tape()->record("gather_rows", gather_rows(a.value(), index), {a},
                          [ia = a.id(), idx = std::move(idx)](Tape& t, const Matrix& g, const Matrix&) {
                            const Matrix& x = t.value(ia);
                            Matrix ga(x.rows(), x.cols());
                            for (std::size_t i = 0; i < idx.size(); ++i)
                              for (std::size_t j = 0; j < x.cols(); ++j) ga(idx[i], j) += g(i, j);
                            t.accumulate(ia, ga);
                          });
}

inline double scalar(const Var& v) { return v.value()(0, 0); }
inline double scalar(const Matrix& m) { return m(0, 0); }

// Value and gradient of a scalar function recorded on a fresh tape.
template <class F>
std::pair<double, Matrix> value_and_grad(F&& f, const Matrix& at) {
  Tape tape;
  Var x = tape.leaf(at);
  Var y = f(x);
  tape.backward(y);
  return {scalar(y), tape.grad(x)};
}

}  // namespace fmp
