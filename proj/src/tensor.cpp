#include "clix/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace clix {

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Tensor::Tensor(std::vector<int> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw std::invalid_argument("Tensor: data length does not match shape");
}

Tensor Tensor::zeros(const std::vector<int>& shape) {
  Tensor t;
  t.shape = shape;
  t.data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  return t;
}

Tensor Tensor::full(const std::vector<int>& shape, double v) {
  Tensor t = zeros(shape);
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::row(const std::vector<double>& v) {
  return Tensor({static_cast<int>(v.size())}, v);
}

Tensor Tensor::matrix(int n, int m, const std::vector<double>& v) {
  return Tensor({n, m}, v);
}

int64_t Tensor::numel() const { return shape_numel(shape); }

double Tensor::item() const {
  if (data.size() != 1) throw std::logic_error("Tensor::item on non-scalar");
  return data[0];
}

Tape::Id Tape::push(Tensor value, bool requires_grad, std::function<void()> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.grad = Tensor::zeros(n.value.shape);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

Tape::Id Tape::add(Id a, Id b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = va;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, a, b]() {
      const Tensor& g = grad(id);
      if (requires_grad(a)) {
        Tensor& ga = grad_buf(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
      }
      if (requires_grad(b)) {
        Tensor& gb = grad_buf(b);
        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
      }
    };
  }
  return id;
}

Tape::Id Tape::sub(Id a, Id b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = va;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, a, b]() {
      const Tensor& g = grad(id);
      if (requires_grad(a)) {
        Tensor& ga = grad_buf(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
      }
      if (requires_grad(b)) {
        Tensor& gb = grad_buf(b);
        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
      }
    };
  }
  return id;
}

Tape::Id Tape::mul(Id a, Id b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = va;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, a, b]() {
      const Tensor& g = grad(id);
      const Tensor& va2 = value(a);
      const Tensor& vb2 = value(b);
      if (requires_grad(a)) {
        Tensor& ga = grad_buf(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
      }
      if (requires_grad(b)) {
        Tensor& gb = grad_buf(b);
        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * va2.data[i];
      }
    };
  }
  return id;
}

Tape::Id Tape::scale(Id a, double s) {
  Tensor out = value(a);
  for (double& v : out.data) v *= s;
  const bool rg = requires_grad(a);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, a, s]() {
      const Tensor& g = grad(id);
      Tensor& ga = grad_buf(a);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
    };
  }
  return id;
}

namespace {

// C[n,m] += A[n,k] * B[k,m]
void gemm_acc(const double* A, const double* B, double* C, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* a = A + static_cast<int64_t>(i) * k;
    double* c = C + static_cast<int64_t>(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      const double av = a[kk];
      if (av == 0.0) continue;
      const double* b = B + static_cast<int64_t>(kk) * m;
      for (int j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

// C[n,m] += A[n,d] * B[m,d]^T
void gemm_nt_acc(const double* A, const double* B, double* C, int n, int d, int m) {
  for (int i = 0; i < n; ++i) {
    const double* a = A + static_cast<int64_t>(i) * d;
    double* c = C + static_cast<int64_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* b = B + static_cast<int64_t>(j) * d;
      double acc = 0.0;
      for (int kk = 0; kk < d; ++kk) acc += a[kk] * b[kk];
      c[j] += acc;
    }
  }
}

// C[k,m] += A[n,k]^T * B[n,m]
void gemm_tn_acc(const double* A, const double* B, double* C, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* a = A + static_cast<int64_t>(i) * k;
    const double* b = B + static_cast<int64_t>(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      const double av = a[kk];
      if (av == 0.0) continue;
      double* c = C + static_cast<int64_t>(kk) * m;
      for (int j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Tape::Id Tape::matmul(Id a, Id b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
    throw std::invalid_argument("matmul: shape mismatch");
  const int n = va.dim(0), k = va.dim(1), m = vb.dim(1);
  Tensor out = Tensor::zeros({n, m});
  gemm_acc(va.data.data(), vb.data.data(), out.data.data(), n, k, m);
  const bool rg = requires_grad(a) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, a, b, n, k, m]() {
      const Tensor& g = grad(id);
      if (requires_grad(a))
        gemm_nt_acc(g.data.data(), value(b).data.data(), grad_buf(a).data.data(), n, m, k);
      if (requires_grad(b))
        gemm_tn_acc(value(a).data.data(), g.data.data(), grad_buf(b).data.data(), n, k, m);
    };
  }
  return id;
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(1))
    throw std::invalid_argument("matmul_nt: shape mismatch");
  const int n = va.dim(0), d = va.dim(1), m = vb.dim(0);
  Tensor out = Tensor::zeros({n, m});
  gemm_nt_acc(va.data.data(), vb.data.data(), out.data.data(), n, d, m);
  const bool rg = requires_grad(a) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, a, b, n, d, m]() {
      const Tensor& g = grad(id);
      if (requires_grad(a))
        gemm_acc(g.data.data(), value(b).data.data(), grad_buf(a).data.data(), n, m, d);
      if (requires_grad(b))
        gemm_tn_acc(g.data.data(), value(a).data.data(), grad_buf(b).data.data(), n, m, d);
    };
  }
  return id;
}

Tape::Id Tape::linear(Id x, Id w, Id b) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  const Tensor& vb = value(b);
  if (vx.ndim() != 2 || vw.ndim() != 2 || vb.ndim() != 1 || vx.dim(1) != vw.dim(0) ||
      vw.dim(1) != vb.dim(0))
    throw std::invalid_argument("linear: shape mismatch");
  const int n = vx.dim(0), k = vx.dim(1), m = vw.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < n; ++i)
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + static_cast<int64_t>(i) * m);
  gemm_acc(vx.data.data(), vw.data.data(), out.data.data(), n, k, m);
  const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x, w, b, n, k, m]() {
      const Tensor& g = grad(id);
      if (requires_grad(x))
        gemm_nt_acc(g.data.data(), value(w).data.data(), grad_buf(x).data.data(), n, m, k);
      if (requires_grad(w))
        gemm_tn_acc(value(x).data.data(), g.data.data(), grad_buf(w).data.data(), n, k, m);
      if (requires_grad(b)) {
        Tensor& gb = grad_buf(b);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) gb.data[j] += g.data[static_cast<int64_t>(i) * m + j];
      }
    };
  }
  return id;
}

Tape::Id Tape::relu(Id x) {
  Tensor out = value(x);
  for (double& v : out.data)
    if (v < 0) v = 0;
  const bool rg = requires_grad(x);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x]() {
      const Tensor& g = grad(id);
      const Tensor& vx = value(x);
      Tensor& gx = grad_buf(x);
      for (size_t i = 0; i < g.data.size(); ++i)
        if (vx.data[i] > 0) gx.data[i] += g.data[i];
    };
  }
  return id;
}

Tape::Id Tape::sigmoid(Id x) {
  Tensor out = value(x);
  for (double& v : out.data) v = stable_sigmoid(v);
  const bool rg = requires_grad(x);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x]() {
      const Tensor& g = grad(id);
      const Tensor& y = value(id);
      Tensor& gx = grad_buf(x);
      for (size_t i = 0; i < g.data.size(); ++i)
        gx.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
    };
  }
  return id;
}

Tape::Id Tape::sum(Id x) {
  double s = 0.0;
  for (double v : value(x).data) s += v;
  const bool rg = requires_grad(x);
  Id id = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x]() {
      const double g = grad(id).data[0];
      Tensor& gx = grad_buf(x);
      for (double& v : gx.data) v += g;
    };
  }
  return id;
}

Tape::Id Tape::mean(Id x) {
  const int64_t n = value(x).numel();
  if (n == 0) return leaf(Tensor::scalar(0.0));
  double s = 0.0;
  for (double v : value(x).data) s += v;
  const bool rg = requires_grad(x);
  Id id = push(Tensor::scalar(s / static_cast<double>(n)), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x, n]() {
      const double g = grad(id).data[0] / static_cast<double>(n);
      Tensor& gx = grad_buf(x);
      for (double& v : gx.data) v += g;
    };
  }
  return id;
}

Tape::Id Tape::reshape(Id x, const std::vector<int>& shape) {
  if (shape_numel(shape) != value(x).numel())
    throw std::invalid_argument("reshape: numel mismatch");
  Tensor out(shape, value(x).data);
  const bool rg = requires_grad(x);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x]() {
      const Tensor& g = grad(id);
      Tensor& gx = grad_buf(x);
      for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
    };
  }
  return id;
}

Tape::Id Tape::concat_cols(Id a, Id b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(0) != vb.dim(0))
    throw std::invalid_argument("concat_cols: shape mismatch");
  const int n = va.dim(0), p = va.dim(1), q = vb.dim(1);
  Tensor out = Tensor::zeros({n, p + q});
  for (int i = 0; i < n; ++i) {
    std::copy(va.data.begin() + static_cast<int64_t>(i) * p,
              va.data.begin() + static_cast<int64_t>(i + 1) * p,
              out.data.begin() + static_cast<int64_t>(i) * (p + q));
    std::copy(vb.data.begin() + static_cast<int64_t>(i) * q,
              vb.data.begin() + static_cast<int64_t>(i + 1) * q,
              out.data.begin() + static_cast<int64_t>(i) * (p + q) + p);
  }
  const bool rg = requires_grad(a) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, a, b, n, p, q]() {
      const Tensor& g = grad(id);
      if (requires_grad(a)) {
        Tensor& ga = grad_buf(a);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < p; ++j)
            ga.data[static_cast<int64_t>(i) * p + j] +=
                g.data[static_cast<int64_t>(i) * (p + q) + j];
      }
      if (requires_grad(b)) {
        Tensor& gb = grad_buf(b);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < q; ++j)
            gb.data[static_cast<int64_t>(i) * q + j] +=
                g.data[static_cast<int64_t>(i) * (p + q) + p + j];
      }
    };
  }
  return id;
}

Tape::Id Tape::gather_rows(Id x, std::vector<int> rows) {
  const Tensor& vx = value(x);
  if (vx.ndim() != 2) throw std::invalid_argument("gather_rows: need 2D input");
  const int m = vx.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), m});
  for (size_t r = 0; r < rows.size(); ++r) {
    const int src = rows[r];
    std::copy(vx.data.begin() + static_cast<int64_t>(src) * m,
              vx.data.begin() + static_cast<int64_t>(src + 1) * m,
              out.data.begin() + static_cast<int64_t>(r) * m);
  }
  const bool rg = requires_grad(x);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x, rows = std::move(rows), m]() {
      const Tensor& g = grad(id);
      Tensor& gx = grad_buf(x);
      for (size_t r = 0; r < rows.size(); ++r)
        for (int j = 0; j < m; ++j)
          gx.data[static_cast<int64_t>(rows[r]) * m + j] +=
              g.data[static_cast<int64_t>(r) * m + j];
    };
  }
  return id;
}

Tape::Id Tape::gather_elems(Id x, std::vector<int64_t> idx, std::vector<int> out_shape) {
  if (shape_numel(out_shape) != static_cast<int64_t>(idx.size()))
    throw std::invalid_argument("gather_elems: index count/shape mismatch");
  const Tensor& vx = value(x);
  Tensor out = Tensor::zeros(out_shape);
  for (size_t i = 0; i < idx.size(); ++i) out.data[i] = vx.data[static_cast<size_t>(idx[i])];
  const bool rg = requires_grad(x);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x, idx = std::move(idx)]() {
      const Tensor& g = grad(id);
      Tensor& gx = grad_buf(x);
      for (size_t i = 0; i < idx.size(); ++i)
        gx.data[static_cast<size_t>(idx[i])] += g.data[i];
    };
  }
  return id;
}

Tape::Id Tape::segment_max(Id x, std::vector<int> seg_of_row, int n_segments) {
  const Tensor& vx = value(x);
  if (vx.ndim() != 2 || static_cast<int>(seg_of_row.size()) != vx.dim(0))
    throw std::invalid_argument("segment_max: bad segment map");
  const int m = vx.dim(1);
  Tensor out = Tensor::zeros({n_segments, m});
  std::vector<int> armax(static_cast<size_t>(n_segments) * m, -1);
  for (int r = 0; r < vx.dim(0); ++r) {
    const int s = seg_of_row[static_cast<size_t>(r)];
    if (s < 0) continue;
    for (int j = 0; j < m; ++j) {
      const double v = vx.at(r, j);
      int& am = armax[static_cast<size_t>(s) * m + j];
      if (am < 0 || v > out.at(s, j)) {
        out.at(s, j) = v;
        am = r;
      }
    }
  }
  const bool rg = requires_grad(x);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x, armax = std::move(armax), m]() {
      const Tensor& g = grad(id);
      Tensor& gx = grad_buf(x);
      for (size_t i = 0; i < armax.size(); ++i)
        if (armax[i] >= 0)
          gx.data[static_cast<int64_t>(armax[i]) * m + static_cast<int64_t>(i % m)] += g.data[i];
    };
  }
  return id;
}

Tape::Id Tape::segment_mean(Id x, std::vector<int> seg_of_row, int n_segments) {
  const Tensor& vx = value(x);
  if (vx.ndim() != 2 || static_cast<int>(seg_of_row.size()) != vx.dim(0))
    throw std::invalid_argument("segment_mean: bad segment map");
  const int m = vx.dim(1);
  Tensor out = Tensor::zeros({n_segments, m});
  std::vector<int> counts(static_cast<size_t>(n_segments), 0);
  for (int r = 0; r < vx.dim(0); ++r) {
    const int s = seg_of_row[static_cast<size_t>(r)];
    if (s < 0) continue;
    ++counts[static_cast<size_t>(s)];
    for (int j = 0; j < m; ++j) out.at(s, j) += vx.at(r, j);
  }
  for (int s = 0; s < n_segments; ++s)
    if (counts[static_cast<size_t>(s)] > 0)
      for (int j = 0; j < m; ++j) out.at(s, j) /= counts[static_cast<size_t>(s)];
  const bool rg = requires_grad(x);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x, seg = std::move(seg_of_row),
                              counts = std::move(counts), m]() {
      const Tensor& g = grad(id);
      Tensor& gx = grad_buf(x);
      for (size_t r = 0; r < seg.size(); ++r) {
        const int s = seg[r];
        if (s < 0) continue;
        const double inv = 1.0 / counts[static_cast<size_t>(s)];
        for (int j = 0; j < m; ++j)
          gx.data[r * m + j] += g.data[static_cast<int64_t>(s) * m + j] * inv;
      }
    };
  }
  return id;
}

Tape::Id Tape::l2_normalize_rows(Id x, double eps) {
  const Tensor& vx = value(x);
  if (vx.ndim() != 2) throw std::invalid_argument("l2_normalize_rows: need 2D input");
  const int n = vx.dim(0), m = vx.dim(1);
  Tensor out = Tensor::zeros({n, m});
  std::vector<double> inv_norm(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < m; ++j) s += vx.at(i, j) * vx.at(i, j);
    inv_norm[static_cast<size_t>(i)] = 1.0 / std::sqrt(s + eps);
    for (int j = 0; j < m; ++j) out.at(i, j) = vx.at(i, j) * inv_norm[static_cast<size_t>(i)];
  }
  const bool rg = requires_grad(x);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, x, inv_norm = std::move(inv_norm), n, m]() {
      const Tensor& g = grad(id);
      const Tensor& y = value(id);
      Tensor& gx = grad_buf(x);
      for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int j = 0; j < m; ++j) dot += y.at(i, j) * g.at(i, j);
        for (int j = 0; j < m; ++j)
          gx.at(i, j) += (g.at(i, j) - y.at(i, j) * dot) * inv_norm[static_cast<size_t>(i)];
      }
    };
  }
  return id;
}

Tape::Id Tape::conv2d_3x3(Id img, Id w, Id b, int stride) {
  const Tensor& vi = value(img);
  const Tensor& vw = value(w);
  const Tensor& vb = value(b);
  if (vi.ndim() != 3 || vw.ndim() != 4 || vw.dim(0) != 3 || vw.dim(1) != 3 ||
      vw.dim(2) != vi.dim(2) || vb.ndim() != 1 || vb.dim(0) != vw.dim(3))
    throw std::invalid_argument("conv2d_3x3: shape mismatch");
  if (stride < 1) throw std::invalid_argument("conv2d_3x3: bad stride");
  const int H = vi.dim(0), W = vi.dim(1), Ci = vi.dim(2), Co = vw.dim(3);
  const int Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
  Tensor out = Tensor::zeros({Ho, Wo, Co});
  const double* in = vi.data.data();
  const double* wt = vw.data.data();
  double* op = out.data.data();
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      double* acc = op + (static_cast<int64_t>(oy) * Wo + ox) * Co;
      std::copy(vb.data.begin(), vb.data.end(), acc);
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride - 1 + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride - 1 + kx;
          if (ix < 0 || ix >= W) continue;
          const double* px = in + (static_cast<int64_t>(iy) * W + ix) * Ci;
          const double* wk = wt + (static_cast<int64_t>(ky) * 3 + kx) * Ci * Co;
          for (int ci = 0; ci < Ci; ++ci) {
            const double a = px[ci];
            if (a == 0.0) continue;
            const double* wr = wk + static_cast<int64_t>(ci) * Co;
            for (int co = 0; co < Co; ++co) acc[co] += a * wr[co];
          }
        }
      }
    }
  }
  const bool rg = requires_grad(img) || requires_grad(w) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, img, w, b, stride, H, W, Ci, Co, Ho, Wo]() {
      const Tensor& g = grad(id);
      const double* gp = g.data.data();
      if (requires_grad(b)) {
        Tensor& gb = grad_buf(b);
        for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i)
          for (int co = 0; co < Co; ++co) gb.data[co] += gp[i * Co + co];
      }
      if (requires_grad(w)) {
        Tensor& gw = grad_buf(w);
        const double* in = value(img).data.data();
        for (int oy = 0; oy < Ho; ++oy) {
          for (int ox = 0; ox < Wo; ++ox) {
            const double* go = gp + (static_cast<int64_t>(oy) * Wo + ox) * Co;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * stride - 1 + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ox * stride - 1 + kx;
                if (ix < 0 || ix >= W) continue;
                const double* px = in + (static_cast<int64_t>(iy) * W + ix) * Ci;
                double* wk = gw.data.data() + (static_cast<int64_t>(ky) * 3 + kx) * Ci * Co;
                for (int ci = 0; ci < Ci; ++ci) {
                  const double a = px[ci];
                  if (a == 0.0) continue;
                  double* wr = wk + static_cast<int64_t>(ci) * Co;
                  for (int co = 0; co < Co; ++co) wr[co] += a * go[co];
                }
              }
            }
          }
        }
      }
      if (requires_grad(img)) {
        Tensor& gi = grad_buf(img);
        const double* wt = value(w).data.data();
        for (int oy = 0; oy < Ho; ++oy) {
          for (int ox = 0; ox < Wo; ++ox) {
            const double* go = gp + (static_cast<int64_t>(oy) * Wo + ox) * Co;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * stride - 1 + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ox * stride - 1 + kx;
                if (ix < 0 || ix >= W) continue;
                double* px = gi.data.data() + (static_cast<int64_t>(iy) * W + ix) * Ci;
                const double* wk = wt + (static_cast<int64_t>(ky) * 3 + kx) * Ci * Co;
                for (int ci = 0; ci < Ci; ++ci) {
                  const double* wr = wk + static_cast<int64_t>(ci) * Co;
                  double acc = 0.0;
                  for (int co = 0; co < Co; ++co) acc += wr[co] * go[co];
                  px[ci] += acc;
                }
              }
            }
          }
        }
      }
    };
  }
  return id;
}

Tape::Id Tape::patch_pool(Id fmap, std::vector<PatchRef> patches) {
  const Tensor& vf = value(fmap);
  if (vf.ndim() != 3) throw std::invalid_argument("patch_pool: need [H,W,C] input");
  const int H = vf.dim(0), W = vf.dim(1), C = vf.dim(2);
  const int n = static_cast<int>(patches.size());
  Tensor out = Tensor::zeros({n, C});
  for (int r = 0; r < n; ++r) {
    const PatchRef& p = patches[static_cast<size_t>(r)];
    if (!p.valid || p.w <= 0 || p.h <= 0) continue;
    if (p.u0 < 0 || p.v0 < 0 || p.u0 + p.w > W || p.v0 + p.h > H)
      throw std::out_of_range("patch_pool: patch not clipped to feature map");
    double* dst = out.data.data() + static_cast<int64_t>(r) * C;
    for (int y = p.v0; y < p.v0 + p.h; ++y)
      for (int x = p.u0; x < p.u0 + p.w; ++x) {
        const double* src = vf.data.data() + (static_cast<int64_t>(y) * W + x) * C;
        for (int c = 0; c < C; ++c) dst[c] += src[c];
      }
    const double inv = 1.0 / (p.w * p.h);
    for (int c = 0; c < C; ++c) dst[c] *= inv;
  }
  const bool rg = requires_grad(fmap);
  Id id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, fmap, patches = std::move(patches), W, C]() {
      const Tensor& g = grad(id);
      Tensor& gf = grad_buf(fmap);
      for (size_t r = 0; r < patches.size(); ++r) {
        const PatchRef& p = patches[r];
        if (!p.valid || p.w <= 0 || p.h <= 0) continue;
        const double inv = 1.0 / (p.w * p.h);
        const double* go = g.data.data() + static_cast<int64_t>(r) * C;
        for (int y = p.v0; y < p.v0 + p.h; ++y)
          for (int x = p.u0; x < p.u0 + p.w; ++x) {
            double* dst = gf.data.data() + (static_cast<int64_t>(y) * W + x) * C;
            for (int c = 0; c < C; ++c) dst[c] += go[c] * inv;
          }
      }
    };
  }
  return id;
}

Tape::Id Tape::bce_logits(Id logits, Tensor targets, Tensor weights) {
  const Tensor& vz = value(logits);
  if (vz.numel() != targets.numel() || vz.numel() != weights.numel())
    throw std::invalid_argument("bce_logits: size mismatch");
  double loss = 0.0;
  for (size_t i = 0; i < vz.data.size(); ++i) {
    const double z = vz.data[i];
    const double y = targets.data[i];
    const double w = weights.data[i];
    if (w == 0.0) continue;
    loss += w * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z))));
  }
  const bool rg = requires_grad(logits);
  Id id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, logits, targets = std::move(targets),
                              weights = std::move(weights)]() {
      const double g = grad(id).data[0];
      const Tensor& vz = value(logits);
      Tensor& gz = grad_buf(logits);
      for (size_t i = 0; i < vz.data.size(); ++i) {
        const double w = weights.data[i];
        if (w == 0.0) continue;
        gz.data[i] += g * w * (stable_sigmoid(vz.data[i]) - targets.data[i]);
      }
    };
  }
  return id;
}

Tape::Id Tape::softmax_xent(Id logits, std::vector<int> target, Tensor row_w) {
  const Tensor& vz = value(logits);
  if (vz.ndim() != 2 || static_cast<int>(target.size()) != vz.dim(0) ||
      row_w.numel() != vz.dim(0))
    throw std::invalid_argument("softmax_xent: shape mismatch");
  const int n = vz.dim(0), m = vz.dim(1);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = row_w.data[static_cast<size_t>(i)];
    if (w == 0.0) continue;
    double mx = vz.at(i, 0);
    for (int j = 1; j < m; ++j) mx = std::max(mx, vz.at(i, j));
    double se = 0.0;
    for (int j = 0; j < m; ++j) se += std::exp(vz.at(i, j) - mx);
    loss += w * (mx + std::log(se) - vz.at(i, target[static_cast<size_t>(i)]));
  }
  const bool rg = requires_grad(logits);
  Id id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, logits, target = std::move(target),
                              row_w = std::move(row_w), n, m]() {
      const double g = grad(id).data[0];
      const Tensor& vz = value(logits);
      Tensor& gz = grad_buf(logits);
      for (int i = 0; i < n; ++i) {
        const double w = row_w.data[static_cast<size_t>(i)];
        if (w == 0.0) continue;
        double mx = vz.at(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, vz.at(i, j));
        double se = 0.0;
        for (int j = 0; j < m; ++j) se += std::exp(vz.at(i, j) - mx);
        for (int j = 0; j < m; ++j) {
          const double p = std::exp(vz.at(i, j) - mx) / se;
          gz.at(i, j) += g * w * (p - (j == target[static_cast<size_t>(i)] ? 1.0 : 0.0));
        }
      }
    };
  }
  return id;
}

Tape::Id Tape::smooth_l1(Id pred, Tensor target, Tensor weights) {
  const Tensor& vp = value(pred);
  if (vp.numel() != target.numel() || vp.numel() != weights.numel())
    throw std::invalid_argument("smooth_l1: size mismatch");
  double loss = 0.0;
  for (size_t i = 0; i < vp.data.size(); ++i) {
    const double w = weights.data[i];
    if (w == 0.0) continue;
    const double d = vp.data[i] - target.data[i];
    loss += w * (std::fabs(d) < 1.0 ? 0.5 * d * d : std::fabs(d) - 0.5);
  }
  const bool rg = requires_grad(pred);
  Id id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, pred, target = std::move(target),
                              weights = std::move(weights)]() {
      const double g = grad(id).data[0];
      const Tensor& vp = value(pred);
      Tensor& gp = grad_buf(pred);
      for (size_t i = 0; i < vp.data.size(); ++i) {
        const double w = weights.data[i];
        if (w == 0.0) continue;
        const double d = vp.data[i] - target.data[i];
        gp.data[i] += g * w * (std::fabs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
      }
    };
  }
  return id;
}

Tape::Id Tape::sigmoid_bce_pairs(Id sims, Tensor pos_w, Tensor neg_w) {
  const Tensor& vs = value(sims);
  if (vs.numel() != pos_w.numel() || vs.numel() != neg_w.numel())
    throw std::invalid_argument("sigmoid_bce_pairs: size mismatch");
  double loss = 0.0;
  for (size_t i = 0; i < vs.data.size(); ++i) {
    const double pw = pos_w.data[i], nw = neg_w.data[i];
    if (pw == 0.0 && nw == 0.0) continue;
    const double s = stable_sigmoid(vs.data[i]);
    if (pw != 0.0) loss -= pw * std::log(s);
    if (nw != 0.0) loss -= nw * std::log(1.0 - s);
  }
  const bool rg = requires_grad(sims);
  Id id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, sims, pos_w = std::move(pos_w),
                              neg_w = std::move(neg_w)]() {
      const double g = grad(id).data[0];
      const Tensor& vs = value(sims);
      Tensor& gs = grad_buf(sims);
      for (size_t i = 0; i < vs.data.size(); ++i) {
        const double pw = pos_w.data[i], nw = neg_w.data[i];
        if (pw == 0.0 && nw == 0.0) continue;
        const double s = stable_sigmoid(vs.data[i]);
        gs.data[i] += g * (-pw * (1.0 - s) + nw * s);
      }
    };
  }
  return id;
}

Tape::Id Tape::add_many(const std::vector<Id>& ids) {
  if (ids.empty()) return leaf(Tensor::scalar(0.0));
  double s = 0.0;
  bool rg = false;
  for (Id i : ids) {
    s += value(i).item();
    rg = rg || requires_grad(i);
  }
  Id id = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    nodes_.back().backward = [this, id, ids]() {
      const double g = grad(id).data[0];
      for (Id i : ids)
        if (requires_grad(i)) grad_buf(i).data[0] += g;
    };
  }
  return id;
}

void Tape::backward(Id loss) {
  Node& ln = nodes_[static_cast<size_t>(loss)];
  if (ln.value.numel() != 1) throw std::logic_error("backward: loss must be scalar");
  if (!ln.requires_grad) return;
  ln.grad.data[0] = 1.0;
  for (Id id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.requires_grad && n.backward) n.backward();
  }
}

}  // namespace clix
