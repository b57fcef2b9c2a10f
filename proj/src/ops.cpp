#include "dscm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace dscm {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// Index maps from the broadcast output back into both operands.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
  bool same = false;
  bool b_scalar = false;
  bool a_scalar = false;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  if (numel(b) == 1 && b.size() <= a.size()) {
    bc.out = a;
    bc.b_scalar = true;
    return bc;
  }
  if (numel(a) == 1 && a.size() <= b.size()) {
    bc.out = b;
    bc.a_scalar = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast shapes " + shape_str(a) +
                       " and " + shape_str(b));
    }
    bc.out[d] = std::max(pa[d], pb[d]);
  }
  auto strides = [&](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t d = rank; d-- > 0;) {
      st[d] = s[d] == 1 ? 0 : acc;
      acc *= s[d];
    }
    return st;
  };
  const auto sa = strides(pa);
  const auto sb = strides(pb);
  const std::size_t n = numel(bc.out);
  bc.a_index.resize(n);
  bc.b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bc.a_index[i] = ia;
    bc.b_index[i] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < bc.out[d]) break;
      ia -= sa[d] * idx[d];
      ib -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

inline std::size_t ai(const Broadcast& bc, std::size_t i) {
  return bc.same || bc.b_scalar ? i : (bc.a_scalar ? 0 : bc.a_index[i]);
}
inline std::size_t bi(const Broadcast& bc, std::size_t i) {
  return bc.same || bc.a_scalar ? i : (bc.b_scalar ? 0 : bc.b_index[i]);
}

// f(a, b) -> value; da(a, b, g) and db(a, b, g) -> partial contributions.
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), name));
  const std::size_t n = numel(bc->out);
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ai(*bc, i)], bv[bi(*bc, i)]);
  Tensor ac = a, bcopy = b;
  return Tensor::make_result(
      bc->out, std::move(out), {a, b},
      [bc, ac, bcopy, da, db, n](std::span<const double> g, std::span<std::span<double>> gi) {
        const auto av = ac.data();
        const auto bv = bcopy.data();
        if (!gi[0].empty()) {
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = ai(*bc, i);
            gi[0][ia] += da(av[ia], bv[bi(*bc, i)], g[i]);
          }
        }
        if (!gi[1].empty()) {
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ib = bi(*bc, i);
            gi[1][ib] += db(av[ai(*bc, i)], bv[ib], g[i]);
          }
        }
      });
}

// Elementwise unary op; the derivative may use the input and the output.
template <class F, class D>
Tensor unary(const Tensor& x, F f, D d) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  auto y = std::make_shared<std::vector<double>>(out);
  Tensor xc = x;
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [xc, y, d](std::span<const double> g, std::span<std::span<double>> gi) {
                               const auto xv = xc.data();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 gi[0][i] += g[i] * d(xv[i], (*y)[i]);
                               }
                             });
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw ShapeError(std::string(op) + " needs a rank-2 tensor, got " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(v)); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ for shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  Tensor ac = a, bc = b;
  return Tensor::make_result(
      Shape{m, n}, std::move(out), {a, b},
      [ac, bc, m, k, n](std::span<const double> g, std::span<std::span<double>> gi) {
        ConstMap G(g.data(), m, n);
        if (!gi[0].empty()) {
          MutMap(gi[0].data(), m, k).noalias() += G * ConstMap(bc.data().data(), k, n).transpose();
        }
        if (!gi[1].empty()) {
          MutMap(gi[1].data(), k, n).noalias() += ConstMap(ac.data().data(), m, k).transpose() * G;
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k) {
    throw ShapeError("linear: input shape " + shape_str(x.shape()) + " does not match weight shape " +
                     shape_str(w.shape()));
  }
  if (b.size() != n) {
    throw ShapeError("linear: bias shape " + shape_str(b.shape()) + " does not match weight shape " +
                     shape_str(w.shape()));
  }
  std::vector<double> out(m * n);
  MutMap o(out.data(), m, n);
  o.noalias() = ConstMap(x.data().data(), m, k) * ConstMap(w.data().data(), k, n);
  o.rowwise() += ConstMap(b.data().data(), 1, n).row(0);
  Tensor xc = x, wc = w;
  return Tensor::make_result(
      Shape{m, n}, std::move(out), {x, w, b},
      [xc, wc, m, k, n](std::span<const double> g, std::span<std::span<double>> gi) {
        ConstMap G(g.data(), m, n);
        if (!gi[0].empty()) {
          MutMap(gi[0].data(), m, k).noalias() += G * ConstMap(wc.data().data(), k, n).transpose();
        }
        if (!gi[1].empty()) {
          MutMap(gi[1].data(), k, n).noalias() += ConstMap(xc.data().data(), m, k).transpose() * G;
        }
        if (!gi[2].empty()) MutMap(gi[2].data(), 1, n) += G.colwise().sum();
      });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result(Shape{}, {s}, {x},
                             [](std::span<const double> g, std::span<std::span<double>> gi) {
                               for (double& v : gi[0]) v += g[0];
                             });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  require_rank2(x, "sum(axis)");
  const std::size_t r = x.rows(), c = x.cols();
  const auto xv = x.data();
  if (axis == 1) {
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j];
      out[i] = s;
    }
    return Tensor::make_result(Shape{r, 1}, std::move(out), {x},
                               [r, c](std::span<const double> g, std::span<std::span<double>> gi) {
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[i];
                               });
  }
  if (axis == 0) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
    return Tensor::make_result(Shape{1, c}, std::move(out), {x},
                               [r, c](std::span<const double> g, std::span<std::span<double>> gi) {
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j];
                               });
  }
  throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for rank 2");
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of an empty tensor");
  return sum(x) * (1.0 / static_cast<double>(x.size()));
}

Tensor mean(const Tensor& x, std::size_t axis) {
  require_rank2(x, "mean(axis)");
  const double n = static_cast<double>(x.shape()[axis]);
  return sum(x, axis) * (1.0 / n);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  for (const auto& p : parts) require_rank2(p, "concat");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  const std::size_t other = axis == 1 ? parts[0].rows() : parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t o = axis == 1 ? p.rows() : p.cols();
    if (o != other) {
      throw ShapeError("concat: shape " + shape_str(p.shape()) + " does not match " +
                       shape_str(parts[0].shape()) + " off axis " + std::to_string(axis));
    }
    offsets.push_back(total);
    total += p.shape()[axis];
  }
  const Shape out_shape = axis == 1 ? Shape{other, total} : Shape{total, other};
  std::vector<double> out(numel(out_shape));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].data();
    const std::size_t pr = parts[k].rows(), pc = parts[k].cols();
    for (std::size_t i = 0; i < pr; ++i)
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t oi = axis == 0 ? offsets[k] + i : i;
        const std::size_t oj = axis == 1 ? offsets[k] + j : j;
        out[oi * out_shape[1] + oj] = v[i * pc + j];
      }
  }
  std::vector<Shape> shapes;
  for (const auto& p : parts) shapes.push_back(p.shape());
  const std::size_t out_cols = out_shape[1];
  return Tensor::make_result(
      out_shape, std::move(out), parts,
      [shapes, offsets, axis, out_cols](std::span<const double> g, std::span<std::span<double>> gi) {
        for (std::size_t k = 0; k < shapes.size(); ++k) {
          if (gi[k].empty()) continue;
          const std::size_t pr = shapes[k][0], pc = shapes[k][1];
          for (std::size_t i = 0; i < pr; ++i)
            for (std::size_t j = 0; j < pc; ++j) {
              const std::size_t oi = axis == 0 ? offsets[k] + i : i;
              const std::size_t oj = axis == 1 ? offsets[k] + j : j;
              gi[k][i * pc + j] += g[oi * out_cols + oj];
            }
        }
      });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice");
  if (axis > 1 || begin > end || end > x.shape()[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of shape " + shape_str(x.shape()));
  }
  const std::size_t r = x.rows(), c = x.cols();
  const std::size_t orows = axis == 0 ? end - begin : r;
  const std::size_t ocols = axis == 1 ? end - begin : c;
  std::vector<double> out(orows * ocols);
  const auto xv = x.data();
  for (std::size_t i = 0; i < orows; ++i)
    for (std::size_t j = 0; j < ocols; ++j) {
      const std::size_t si = axis == 0 ? begin + i : i;
      const std::size_t sj = axis == 1 ? begin + j : j;
      out[i * ocols + j] = xv[si * c + sj];
    }
  return Tensor::make_result(
      Shape{orows, ocols}, std::move(out), {x},
      [=](std::span<const double> g, std::span<std::span<double>> gi) {
        for (std::size_t i = 0; i < orows; ++i)
          for (std::size_t j = 0; j < ocols; ++j) {
            const std::size_t si = axis == 0 ? begin + i : i;
            const std::size_t sj = axis == 1 ? begin + j : j;
            gi[0][si * c + sj] += g[i * ocols + j];
          }
      });
}

Tensor repeat_rows(const Tensor& x, std::size_t times) {
  require_rank2(x, "repeat_rows");
  if (times == 1) return x;
  std::vector<Tensor> parts(times, x);
  return concat(parts, 0);
}

Tensor softmax(const Tensor& x) {
  require_rank2(x, "softmax");
  const std::size_t r = x.rows(), c = x.cols();
  const auto xv = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double m = *std::max_element(xv.begin() + i * c, xv.begin() + (i + 1) * c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(xv[i * c + j] - m));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result(
      x.shape(), std::move(out), {x},
      [y, r, c](std::span<const double> g, std::span<std::span<double>> gi) {
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * (*y)[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            gi[0][i * c + j] += (*y)[i * c + j] * (g[i * c + j] - dot);
        }
      });
}

Tensor log_softmax(const Tensor& x) {
  require_rank2(x, "log_softmax");
  const std::size_t r = x.rows(), c = x.cols();
  const auto xv = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double m = *std::max_element(xv.begin() + i * c, xv.begin() + (i + 1) * c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xv[i * c + j] - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] - lse;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result(
      x.shape(), std::move(out), {x},
      [y, r, c](std::span<const double> g, std::span<std::span<double>> gi) {
        for (std::size_t i = 0; i < r; ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            gi[0][i * c + j] += g[i * c + j] - std::exp((*y)[i * c + j]) * gs;
        }
      });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  require_rank2(x, "pick");
  const std::size_t r = x.rows(), c = x.cols();
  if (index.size() != r) {
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for " +
                     std::to_string(r) + " rows");
  }
  std::vector<double> out(r);
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (std::size_t i = 0; i < r; ++i) {
    if (idx[i] >= c) {
      throw DomainError("pick: index " + std::to_string(idx[i]) + " out of range for " +
                        std::to_string(c) + " columns");
    }
    out[i] = x.data()[i * c + idx[i]];
  }
  return Tensor::make_result(Shape{r, 1}, std::move(out), {x},
                             [idx, c](std::span<const double> g, std::span<std::span<double>> gi) {
                               for (std::size_t i = 0; i < idx.size(); ++i) gi[0][i * c + idx[i]] += g[i];
                             });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& x) { return neg(x); }

Tensor operator+(const Tensor& a, double b) {
  return unary(a, [b](double v) { return v + b; }, [](double, double) { return 1.0; });
}
Tensor operator-(const Tensor& a, double b) { return a + (-b); }
Tensor operator*(const Tensor& a, double b) {
  return unary(a, [b](double v) { return v * b; }, [b](double, double) { return b; });
}
Tensor operator/(const Tensor& a, double b) {
  if (b == 0.0) throw DomainError("div: division by zero");
  return a * (1.0 / b);
}
Tensor operator+(double a, const Tensor& b) { return b + a; }
Tensor operator-(double a, const Tensor& b) {
  return unary(b, [a](double v) { return a - v; }, [](double, double) { return -1.0; });
}
Tensor operator*(double a, const Tensor& b) { return b * a; }

}  // namespace dscm
