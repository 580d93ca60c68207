#include "malsf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "malsf/rng.hpp"

namespace malsf {

namespace {

// Accumulating micro-kernels: C += A*B with the usual transpose variants.
// Dot products use explicit lane accumulators so the compiler can emit
// packed SIMD without reassociating a serial chain; results stay
// deterministic for a given build.
constexpr int kLanes = 8;

double lane_dot(const double* __restrict a, const double* __restrict b, int k) {
  double lanes[kLanes] = {0, 0, 0, 0, 0, 0, 0, 0};
  int t = 0;
  for (; t + kLanes <= k; t += kLanes) {
    for (int l = 0; l < kLanes; ++l) lanes[l] += a[t + l] * b[t + l];
  }
  double s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) +
             ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
  for (; t < k; ++t) s += a[t] * b[t];
  return s;
}

void mm_nn(const double* __restrict A, const double* __restrict B, double* __restrict C,
           int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int t = 0; t < k; ++t) {
      const double av = a[t];
      const double* b = B + static_cast<size_t>(t) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void mm_nt(const double* __restrict A, const double* __restrict B, double* __restrict C,
           int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      c[j] += lane_dot(a, B + static_cast<size_t>(j) * k, k);
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
void mm_tn(const double* __restrict A, const double* __restrict B, double* __restrict C,
           int m, int k, int n) {
  for (int t = 0; t < k; ++t) {
    const double* a = A + static_cast<size_t>(t) * m;
    const double* b = B + static_cast<size_t>(t) * n;
    for (int i = 0; i < m; ++i) {
      const double av = a[i];
      double* c = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

using GradFn = std::function<void(Graph&, const Graph::Node&)>;

Tensor record(const char* op, std::vector<Tensor> inputs, Tensor out, GradFn fn) {
  Graph* g = current_graph();
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  if (g && rg) {
    out.set_requires_grad(true);
    g->add_node(op, std::move(inputs), out, std::move(fn));
  } else {
    out.set_requires_grad(false);
  }
  return out;
}

const std::vector<double>& out_grad(Graph& g, const Graph::Node& n) {
  const auto* p = g.local_grad(n.output);
  if (!p) throw std::runtime_error("backward: missing output gradient");
  return *p;
}

// Shared body for elementwise binary ops with locally computable partials.
template <typename Fwd, typename Bwd>
Tensor ew_binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  check_same_shape(op, a, b);
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> od(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) od[i] = fwd(ad[i], bd[i]);
  Tensor out(a.shape(), std::move(od));
  return record(op, {a, b}, out, [bwd](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    const Tensor& a = n.inputs[0];
    const Tensor& b = n.inputs[1];
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    std::vector<double>* ga = need_a ? &g.grad_of(a.impl(), a.data().size()) : nullptr;
    std::vector<double>* gb = need_b ? &g.grad_of(b.impl(), b.data().size()) : nullptr;
    for (size_t i = 0; i < go.size(); ++i) {
      auto [da, db] = bwd(a.data()[i], b.data()[i]);
      if (ga) (*ga)[i] += go[i] * da;
      if (gb) (*gb)[i] += go[i] * db;
    }
  });
}

template <typename Fwd, typename Bwd>
Tensor ew_unary(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
  const auto& ad = a.data();
  std::vector<double> od(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) od[i] = fwd(ad[i]);
  Tensor out(a.shape(), std::move(od));
  return record(op, {a}, out, [bwd](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const auto& go = out_grad(g, n);
    auto& ga = g.grad_of(a.impl(), a.data().size());
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bwd(a.data()[i], n.output.data()[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary("mul", a, b, [](double x, double y) { return x * y; },
                   [](double x, double y) { return std::pair{y, x}; });
}

Tensor div_t(const Tensor& a, const Tensor& b) {
  return ew_binary("div", a, b, [](double x, double y) { return x / y; },
                   [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

Tensor emin(const Tensor& a, const Tensor& b) {
  return ew_binary("emin", a, b, [](double x, double y) { return x <= y ? x : y; },
                   [](double x, double y) {
                     return x <= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0};
                   });
}

Tensor emax(const Tensor& a, const Tensor& b) {
  return ew_binary("emax", a, b, [](double x, double y) { return x >= y ? x : y; },
                   [](double x, double y) {
                     return x >= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0};
                   });
}

Tensor scale(const Tensor& a, double c) {
  return ew_unary("scale", a, [c](double x) { return c * x; },
                  [c](double, double) { return c; });
}

Tensor add_const(const Tensor& a, double c) {
  return ew_unary("add_const", a, [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) {
  return scale(a, -1.0);
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar: scale must have one element");
  const double sv = s.data()[0];
  std::vector<double> od(a.data().size());
  for (size_t i = 0; i < od.size(); ++i) od[i] = a.data()[i] * sv;
  Tensor out(a.shape(), std::move(od));
  return record("mul_scalar", {a, s}, out, [](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    const Tensor& a = n.inputs[0];
    const Tensor& s = n.inputs[1];
    if (a.requires_grad()) {
      auto& ga = g.grad_of(a.impl(), a.data().size());
      const double sv = s.data()[0];
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * sv;
    }
    if (s.requires_grad()) {
      auto& gs = g.grad_of(s.impl(), 1);
      double acc = 0.0;
      for (size_t i = 0; i < go.size(); ++i) acc += go[i] * a.data()[i];
      gs[0] += acc;
    }
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  const int m = a.rows(), nc = a.cols();
  if (b.size() != nc) {
    throw ShapeError("add_rowvec: row vector " + shape_str(b.shape()) +
                     " does not match " + shape_str(a.shape()));
  }
  std::vector<double> od(a.data().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nc; ++j)
      od[static_cast<size_t>(i) * nc + j] = a.data()[static_cast<size_t>(i) * nc + j] + b.data()[j];
  Tensor out(a.shape(), std::move(od));
  return record("add_rowvec", {a, b}, out, [m, nc](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    const Tensor& a = n.inputs[0];
    const Tensor& b = n.inputs[1];
    if (a.requires_grad()) {
      auto& ga = g.grad_of(a.impl(), a.data().size());
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto& gb = g.grad_of(b.impl(), b.data().size());
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nc; ++j) gb[j] += go[static_cast<size_t>(i) * nc + j];
    }
  });
}

Tensor mul_rowwise(const Tensor& a, const Tensor& c) {
  const int m = a.rows(), nc = a.cols();
  if (c.size() != m) {
    throw ShapeError("mul_rowwise: row scale " + shape_str(c.shape()) +
                     " does not match " + shape_str(a.shape()));
  }
  std::vector<double> od(a.data().size());
  for (int i = 0; i < m; ++i) {
    const double cv = c.data()[static_cast<size_t>(i)];
    for (int j = 0; j < nc; ++j)
      od[static_cast<size_t>(i) * nc + j] = a.data()[static_cast<size_t>(i) * nc + j] * cv;
  }
  Tensor out(a.shape(), std::move(od));
  return record("mul_rowwise", {a, c}, out, [m, nc](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    const Tensor& a = n.inputs[0];
    const Tensor& c = n.inputs[1];
    if (a.requires_grad()) {
      auto& ga = g.grad_of(a.impl(), a.data().size());
      for (int i = 0; i < m; ++i) {
        const double cv = c.data()[static_cast<size_t>(i)];
        for (int j = 0; j < nc; ++j)
          ga[static_cast<size_t>(i) * nc + j] += go[static_cast<size_t>(i) * nc + j] * cv;
      }
    }
    if (c.requires_grad()) {
      auto& gc = g.grad_of(c.impl(), c.data().size());
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < nc; ++j)
          acc += go[static_cast<size_t>(i) * nc + j] * a.data()[static_cast<size_t>(i) * nc + j];
        gc[static_cast<size_t>(i)] += acc;
      }
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() > 2 || b.ndim() > 2) throw ShapeError("matmul: operands must be 1-d or 2-d");
  const int m = a.rows(), k = a.cols();
  const int k2 = b.rows(), nc = b.cols();
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  std::vector<double> od(static_cast<size_t>(m) * nc, 0.0);
  mm_nn(a.data().data(), b.data().data(), od.data(), m, k, nc);
  Tensor out({m, nc}, std::move(od));
  return record("matmul", {a, b}, out, [m, k, nc](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    const Tensor& a = n.inputs[0];
    const Tensor& b = n.inputs[1];
    if (a.requires_grad()) {
      auto& ga = g.grad_of(a.impl(), a.data().size());
      mm_nt(go.data(), b.data().data(), ga.data(), m, nc, k);
    }
    if (b.requires_grad()) {
      auto& gb = g.grad_of(b.impl(), b.data().size());
      mm_tn(a.data().data(), go.data(), gb.data(), k, m, nc);
    }
  });
}

Tensor transpose(const Tensor& a) {
  const int m = a.rows(), nc = a.cols();
  std::vector<double> od(a.data().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nc; ++j)
      od[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * nc + j];
  Tensor out({nc, m}, std::move(od));
  return record("transpose", {a}, out, [m, nc](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const auto& go = out_grad(g, n);
    auto& ga = g.grad_of(a.impl(), a.data().size());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < nc; ++j)
        ga[static_cast<size_t>(i) * nc + j] += go[static_cast<size_t>(j) * m + i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  return record("sum", {a}, out, [](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const double go = out_grad(g, n)[0];
    auto& ga = g.grad_of(a.impl(), a.data().size());
    for (auto& v : ga) v += go;
  });
}

Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s * inv);
  return record("mean_all", {a}, out, [inv](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const double go = out_grad(g, n)[0] * inv;
    auto& ga = g.grad_of(a.impl(), a.data().size());
    for (auto& v : ga) v += go;
  });
}

Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
  }
  Tensor out(std::move(s), a.data());
  return record("reshape", {a}, out, [](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const auto& go = out_grad(g, n);
    auto& ga = g.grad_of(a.impl(), a.data().size());
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

Tensor slice_rows(const Tensor& a, int row0, int len) {
  const int m = a.rows(), nc = a.cols();
  if (row0 < 0 || len <= 0 || row0 + len > m) {
    throw ShapeError("slice_rows: rows [" + std::to_string(row0) + "," +
                     std::to_string(row0 + len) + ") out of " + shape_str(a.shape()));
  }
  std::vector<double> od(a.data().begin() + static_cast<size_t>(row0) * nc,
                         a.data().begin() + static_cast<size_t>(row0 + len) * nc);
  Tensor out({len, nc}, std::move(od));
  return record("slice_rows", {a}, out, [row0, nc](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const auto& go = out_grad(g, n);
    auto& ga = g.grad_of(a.impl(), a.data().size());
    const size_t off = static_cast<size_t>(row0) * nc;
    for (size_t i = 0; i < go.size(); ++i) ga[off + i] += go[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int nc = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    if (p.cols() != nc) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  std::vector<double> od;
  od.reserve(static_cast<size_t>(total) * nc);
  for (const auto& p : parts) od.insert(od.end(), p.data().begin(), p.data().end());
  Tensor out({total, nc}, std::move(od));
  return record("concat_rows", parts, out, [](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    size_t off = 0;
    for (const Tensor& p : n.inputs) {
      const size_t len = p.data().size();
      if (p.requires_grad()) {
        auto& gp = g.grad_of(p.impl(), len);
        for (size_t i = 0; i < len; ++i) gp[i] += go[off + i];
      }
      off += len;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int m = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<double> od(static_cast<size_t>(m) * total);
  int c0 = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < pc; ++j)
        od[static_cast<size_t>(i) * total + c0 + j] = p.data()[static_cast<size_t>(i) * pc + j];
    c0 += pc;
  }
  Tensor out({m, total}, std::move(od));
  return record("concat_cols", parts, out, [m, total](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    int c0 = 0;
    for (const Tensor& p : n.inputs) {
      const int pc = p.cols();
      if (p.requires_grad()) {
        auto& gp = g.grad_of(p.impl(), p.data().size());
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < pc; ++j)
            gp[static_cast<size_t>(i) * pc + j] += go[static_cast<size_t>(i) * total + c0 + j];
      }
      c0 += pc;
    }
  });
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("stack_scalars: no inputs");
  std::vector<double> od;
  od.reserve(xs.size());
  for (const auto& x : xs) {
    if (x.size() != 1) throw ShapeError("stack_scalars: inputs must be single-element");
    od.push_back(x.data()[0]);
  }
  Tensor out({static_cast<int>(xs.size())}, std::move(od));
  return record("stack_scalars", xs, out, [](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    for (size_t i = 0; i < n.inputs.size(); ++i) {
      const Tensor& x = n.inputs[i];
      if (x.requires_grad()) g.grad_of(x.impl(), 1)[0] += go[i];
    }
  });
}

Tensor pick(const Tensor& a, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= a.size()) {
    throw std::out_of_range("pick: index " + std::to_string(flat_index) + " out of " +
                            std::to_string(a.size()) + " elements");
  }
  Tensor out = Tensor::scalar(a.data()[static_cast<size_t>(flat_index)]);
  return record("pick", {a}, out, [flat_index](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    g.grad_of(a.impl(), a.data().size())[static_cast<size_t>(flat_index)] += out_grad(g, n)[0];
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  const int v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " out of range " +
                              std::to_string(v));
    }
  }
  std::vector<double> od(ids.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().begin() + static_cast<size_t>(ids[i]) * d, d,
                od.begin() + i * static_cast<size_t>(d));
  Tensor out({static_cast<int>(ids.size()), d}, std::move(od));
  return record("gather_rows", {table}, out, [ids, d](Graph& g, const Graph::Node& n) {
    const Tensor& table = n.inputs[0];
    if (!table.requires_grad()) return;
    const auto& go = out_grad(g, n);
    auto& gt = g.grad_of(table.impl(), table.data().size());
    for (size_t i = 0; i < ids.size(); ++i) {
      const size_t dst = static_cast<size_t>(ids[i]) * d;
      for (int j = 0; j < d; ++j) gt[dst + j] += go[i * static_cast<size_t>(d) + j];
    }
  });
}

namespace {
void softmax_row(const double* x, double* y, int n) {
  double mx = x[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (int j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    z += y[j];
  }
  const double inv = 1.0 / z;
  for (int j = 0; j < n; ++j) y[j] *= inv;
}
}  // namespace

Tensor softmax_lastdim(const Tensor& a) {
  const int nc = a.cols();
  if (nc < 1) throw ShapeError("softmax: empty last dim");
  const int m = static_cast<int>(a.size() / nc);
  std::vector<double> od(a.data().size());
  for (int i = 0; i < m; ++i)
    softmax_row(a.data().data() + static_cast<size_t>(i) * nc,
                od.data() + static_cast<size_t>(i) * nc, nc);
  Tensor out(a.shape(), std::move(od));
  return record("softmax", {a}, out, [m, nc](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const auto& go = out_grad(g, n);
    const auto& y = n.output.data();
    auto& ga = g.grad_of(a.impl(), a.data().size());
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * nc;
      double dot = 0.0;
      for (int j = 0; j < nc; ++j) dot += go[off + j] * y[off + j];
      for (int j = 0; j < nc; ++j) ga[off + j] += y[off + j] * (go[off + j] - dot);
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& a) {
  const int nc = a.cols();
  if (nc < 1) throw ShapeError("log_softmax: empty last dim");
  const int m = static_cast<int>(a.size() / nc);
  std::vector<double> od(a.data().size());
  for (int i = 0; i < m; ++i) {
    const double* x = a.data().data() + static_cast<size_t>(i) * nc;
    double* y = od.data() + static_cast<size_t>(i) * nc;
    double mx = x[0];
    for (int j = 1; j < nc; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < nc; ++j) z += std::exp(x[j] - mx);
    const double lz = mx + std::log(z);
    for (int j = 0; j < nc; ++j) y[j] = x[j] - lz;
  }
  Tensor out(a.shape(), std::move(od));
  return record("log_softmax", {a}, out, [m, nc](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const auto& go = out_grad(g, n);
    const auto& y = n.output.data();
    auto& ga = g.grad_of(a.impl(), a.data().size());
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * nc;
      double tot = 0.0;
      for (int j = 0; j < nc; ++j) tot += go[off + j];
      for (int j = 0; j < nc; ++j) ga[off + j] += go[off + j] - std::exp(y[off + j]) * tot;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: affine params must have " + std::to_string(d) + " elements");
  }
  if (eps < 0.0) throw std::invalid_argument("layer_norm: eps must be non-negative");
  const int m = static_cast<int>(x.size() / d);
  auto xhat = std::make_shared<std::vector<double>>(x.data().size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  std::vector<double> od(x.data().size());
  for (int i = 0; i < m; ++i) {
    const size_t off = static_cast<size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x.data()[off + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x.data()[off + j] - mean;
      var += c * c;
    }
    var /= d;  // biased
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const double h = (x.data()[off + j] - mean) * is;
      (*xhat)[off + j] = h;
      od[off + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  Tensor out(x.shape(), std::move(od));
  return record("layer_norm", {x, gamma, beta}, out,
                [m, d, xhat, inv_std](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    const Tensor& x = n.inputs[0];
    const Tensor& gamma = n.inputs[1];
    const Tensor& beta = n.inputs[2];
    if (gamma.requires_grad()) {
      auto& gg = g.grad_of(gamma.impl(), gamma.data().size());
      for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) gg[j] += go[off + j] * (*xhat)[off + j];
      }
    }
    if (beta.requires_grad()) {
      auto& gb = g.grad_of(beta.impl(), beta.data().size());
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) gb[j] += go[static_cast<size_t>(i) * d + j];
    }
    if (x.requires_grad()) {
      auto& gx = g.grad_of(x.impl(), x.data().size());
      for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * d;
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (int j = 0; j < d; ++j) {
          const double dh = go[off + j] * gamma.data()[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[off + j];
        }
        mean_dh /= d;
        mean_dh_h /= d;
        const double is = (*inv_std)[static_cast<size_t>(i)];
        for (int j = 0; j < d; ++j) {
          const double dh = go[off + j] * gamma.data()[j];
          gx[off + j] += is * (dh - mean_dh - (*xhat)[off + j] * mean_dh_h);
        }
      }
    }
  });
}

namespace {
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  const auto& ad = a.data();
  auto tanh_u = std::make_shared<std::vector<double>>(ad.size());
  std::vector<double> od(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) {
    const double x = ad[i];
    const double t = std::tanh(kGeluC0 * (x + kGeluC1 * x * x * x));
    (*tanh_u)[i] = t;
    od[i] = 0.5 * x * (1.0 + t);
  }
  Tensor out(a.shape(), std::move(od));
  return record("gelu", {a}, out, [tanh_u](Graph& g, const Graph::Node& n) {
    const Tensor& a = n.inputs[0];
    if (!a.requires_grad()) return;
    const auto& go = out_grad(g, n);
    auto& ga = g.grad_of(a.impl(), a.data().size());
    for (size_t i = 0; i < go.size(); ++i) {
      const double x = a.data()[i];
      const double t = (*tanh_u)[i];
      const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
      ga[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  return ew_unary(
      "sigmoid", a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return ew_unary(
      "softplus", a,
      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Tensor relu(const Tensor& a) {
  return ew_unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs_val(const Tensor& a) {
  return ew_unary("abs", a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

AttentionParams make_attention_params(int d_model, int n_heads, Rng& rng, double init_std) {
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw ShapeError("attention: n_heads must divide d_model (" + std::to_string(d_model) +
                     " % " + std::to_string(n_heads) + ")");
  }
  AttentionParams p;
  p.d_model = d_model;
  p.n_heads = n_heads;
  auto mat = [&] {
    std::vector<double> w(static_cast<size_t>(d_model) * d_model);
    for (auto& v : w) v = rng.normal(0.0, init_std);
    return Tensor({d_model, d_model}, std::move(w), true);
  };
  p.w_q = mat();
  p.w_k = mat();
  p.w_v = mat();
  p.w_o = mat();
  p.b_q = Tensor::zeros({d_model}, true);
  p.b_k = Tensor::zeros({d_model}, true);
  p.b_v = Tensor::zeros({d_model}, true);
  p.b_o = Tensor::zeros({d_model}, true);
  return p;
}

Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttentionParams& p, const std::vector<uint8_t>* key_mask,
                       AttnTrace* trace) {
  const int d = p.d_model;
  const int h = p.n_heads;
  if (h < 1 || d % h != 0) throw ShapeError("attention: n_heads must divide d_model");
  if (q.cols() != d || k.cols() != d || v.cols() != d) {
    throw ShapeError("attention: feature dims " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()) +
                     " must end in d_model=" + std::to_string(d));
  }
  if (k.rows() != v.rows()) throw ShapeError("attention: key/value length mismatch");
  const int lq = q.rows(), lk = k.rows();
  if (lk < 1) throw ShapeError("attention: empty key set");
  if (key_mask) {
    if (static_cast<int>(key_mask->size()) != lk)
      throw ShapeError("attention: key mask length mismatch");
    bool any = false;
    for (uint8_t m : *key_mask) any = any || m;
    if (!any) throw ShapeError("attention: all keys masked");
  }
  const int dh = d / h;
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor bq = p.b_q.defined() ? p.b_q : Tensor::zeros({d});
  Tensor bk = p.b_k.defined() ? p.b_k : Tensor::zeros({d});
  Tensor bv = p.b_v.defined() ? p.b_v : Tensor::zeros({d});
  Tensor bo = p.b_o.defined() ? p.b_o : Tensor::zeros({d});

  auto project = [d](const Tensor& x, const Tensor& w, const Tensor& b, int len) {
    auto out = std::make_shared<std::vector<double>>(static_cast<size_t>(len) * d, 0.0);
    mm_nn(x.data().data(), w.data().data(), out->data(), len, d, d);
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < d; ++j) (*out)[static_cast<size_t>(i) * d + j] += b.data()[j];
    return out;
  };
  auto qp = project(q, p.w_q, bq, lq);
  auto kp = project(k, p.w_k, bk, lk);
  auto vp = project(v, p.w_v, bv, lk);

  // attention probabilities, head-major [h x lq x lk]
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(h) * lq * lk);
  std::vector<double> logits(static_cast<size_t>(lk));
  for (int hd = 0; hd < h; ++hd) {
    const int ho = hd * dh;
    for (int i = 0; i < lq; ++i) {
      const double* qi = qp->data() + static_cast<size_t>(i) * d + ho;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < lk; ++j) {
        if (key_mask && !(*key_mask)[static_cast<size_t>(j)]) continue;
        const double s = alpha * lane_dot(qi, kp->data() + static_cast<size_t>(j) * d + ho, dh);
        logits[static_cast<size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      double* prow = probs->data() + (static_cast<size_t>(hd) * lq + i) * lk;
      for (int j = 0; j < lk; ++j) {
        if (key_mask && !(*key_mask)[static_cast<size_t>(j)]) {
          prow[j] = 0.0;
          continue;
        }
        prow[j] = std::exp(logits[static_cast<size_t>(j)] - mx);
        z += prow[j];
      }
      const double inv = 1.0 / z;
      for (int j = 0; j < lk; ++j) prow[j] *= inv;
    }
  }

  // per-head attention-weighted values, concatenated back to [lq x d]
  auto ctx = std::make_shared<std::vector<double>>(static_cast<size_t>(lq) * d, 0.0);
  for (int hd = 0; hd < h; ++hd) {
    const int ho = hd * dh;
    for (int i = 0; i < lq; ++i) {
      const double* prow = probs->data() + (static_cast<size_t>(hd) * lq + i) * lk;
      double* crow = ctx->data() + static_cast<size_t>(i) * d + ho;
      for (int j = 0; j < lk; ++j) {
        const double pw = prow[j];
        if (pw == 0.0) continue;
        const double* vj = vp->data() + static_cast<size_t>(j) * d + ho;
        for (int t = 0; t < dh; ++t) crow[t] += pw * vj[t];
      }
    }
  }

  std::vector<double> od(static_cast<size_t>(lq) * d, 0.0);
  mm_nn(ctx->data(), p.w_o.data().data(), od.data(), lq, d, d);
  for (int i = 0; i < lq; ++i)
    for (int j = 0; j < d; ++j) od[static_cast<size_t>(i) * d + j] += bo.data()[j];
  Tensor out({lq, d}, std::move(od));

  if (trace) {
    trace->lq = lq;
    trace->lk = lk;
    trace->probs.assign(static_cast<size_t>(lq) * lk, 0.0);
    for (int hd = 0; hd < h; ++hd)
      for (size_t i = 0; i < static_cast<size_t>(lq) * lk; ++i)
        trace->probs[i] += (*probs)[static_cast<size_t>(hd) * lq * lk + i] / h;
  }

  // input order: q k v wq bq wk bk wv bv wo bo
  std::vector<Tensor> inputs{q, k, v, p.w_q, bq, p.w_k, bk, p.w_v, bv, p.w_o, bo};
  return record("cross_attention", std::move(inputs), out,
                [lq, lk, d, h, dh, alpha, qp, kp, vp, probs, ctx](Graph& g, const Graph::Node& n) {
    const auto& go = out_grad(g, n);
    const Tensor& q = n.inputs[0];
    const Tensor& k = n.inputs[1];
    const Tensor& v = n.inputs[2];
    const Tensor& wq = n.inputs[3];
    const Tensor& bq = n.inputs[4];
    const Tensor& wk = n.inputs[5];
    const Tensor& bk = n.inputs[6];
    const Tensor& wv = n.inputs[7];
    const Tensor& bv = n.inputs[8];
    const Tensor& wo = n.inputs[9];
    const Tensor& bo = n.inputs[10];

    if (wo.requires_grad()) {
      auto& gwo = g.grad_of(wo.impl(), wo.data().size());
      mm_tn(ctx->data(), go.data(), gwo.data(), d, lq, d);
    }
    if (bo.requires_grad()) {
      auto& gbo = g.grad_of(bo.impl(), bo.data().size());
      for (int i = 0; i < lq; ++i)
        for (int j = 0; j < d; ++j) gbo[j] += go[static_cast<size_t>(i) * d + j];
    }

    std::vector<double> dctx(static_cast<size_t>(lq) * d, 0.0);
    mm_nt(go.data(), wo.data().data(), dctx.data(), lq, d, d);

    std::vector<double> dqp(static_cast<size_t>(lq) * d, 0.0);
    std::vector<double> dkp(static_cast<size_t>(lk) * d, 0.0);
    std::vector<double> dvp(static_cast<size_t>(lk) * d, 0.0);
    std::vector<double> dprow(static_cast<size_t>(lk));
    for (int hd = 0; hd < h; ++hd) {
      const int ho = hd * dh;
      for (int i = 0; i < lq; ++i) {
        const double* prow = probs->data() + (static_cast<size_t>(hd) * lq + i) * lk;
        const double* dci = dctx.data() + static_cast<size_t>(i) * d + ho;
        // dP and dV
        for (int j = 0; j < lk; ++j) {
          const double* vj = vp->data() + static_cast<size_t>(j) * d + ho;
          dprow[static_cast<size_t>(j)] = lane_dot(dci, vj, dh);
          const double pw = prow[j];
          if (pw != 0.0) {
            double* dvj = dvp.data() + static_cast<size_t>(j) * d + ho;
            for (int t = 0; t < dh; ++t) dvj[t] += pw * dci[t];
          }
        }
        // softmax backward, then scale
        double dot = 0.0;
        for (int j = 0; j < lk; ++j) dot += dprow[static_cast<size_t>(j)] * prow[j];
        double* dqi = dqp.data() + static_cast<size_t>(i) * d + ho;
        const double* qi = qp->data() + static_cast<size_t>(i) * d + ho;
        for (int j = 0; j < lk; ++j) {
          const double ds = alpha * prow[j] * (dprow[static_cast<size_t>(j)] - dot);
          if (ds == 0.0) continue;
          const double* kj = kp->data() + static_cast<size_t>(j) * d + ho;
          double* dkj = dkp.data() + static_cast<size_t>(j) * d + ho;
          for (int t = 0; t < dh; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
    }

    auto unproject = [&](const Tensor& x, const Tensor& w, const Tensor& b,
                         const std::vector<double>& dproj, int len) {
      if (x.requires_grad()) {
        auto& gx = g.grad_of(x.impl(), x.data().size());
        mm_nt(dproj.data(), w.data().data(), gx.data(), len, d, d);
      }
      if (w.requires_grad()) {
        auto& gw = g.grad_of(w.impl(), w.data().size());
        mm_tn(x.data().data(), dproj.data(), gw.data(), d, len, d);
      }
      if (b.requires_grad()) {
        auto& gb = g.grad_of(b.impl(), b.data().size());
        for (int i = 0; i < len; ++i)
          for (int j = 0; j < d; ++j) gb[j] += dproj[static_cast<size_t>(i) * d + j];
      }
    };
    unproject(q, wq, bq, dqp, lq);
    unproject(k, wk, bk, dkp, lk);
    unproject(v, wv, bv, dvp, lk);
  });
}

}  // namespace malsf
