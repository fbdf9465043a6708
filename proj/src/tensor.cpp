#include "nnbf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace nnbf {

std::atomic<std::uint64_t> Tensor::next_id_{1};

namespace detail {
std::atomic<bool> gelu_backward_fault{false};
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

static void check_shape_positive(const Shape& s) {
  for (auto d : s)
    if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_positive(shape);
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = shape_numel(t.shape_);
  t.data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(t.numel_), 0.0);
  t.requires_grad_ = requires_grad;
  t.id_ = next_id_++;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data_->begin(), t.data_->end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape_positive(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw DimensionError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = static_cast<std::int64_t>(values.size());
  t.data_ = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad_ = requires_grad;
  t.id_ = next_id_++;
  return t;
}

Tensor Tensor::scalar_tensor(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::wrap(Shape shape, std::shared_ptr<std::vector<double>> buf,
                    bool requires_grad) {
  check_shape_positive(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(buf->size()))
    throw DimensionError("buffer length does not match shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = static_cast<std::int64_t>(buf->size());
  t.data_ = std::move(buf);
  t.requires_grad_ = requires_grad;
  t.id_ = next_id_++;
  return t;
}

double Tensor::scalar() const {
  if (numel_ != 1) throw ContractError("scalar() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank())
    throw DimensionError("index rank mismatch for shape " + shape_str(shape_));
  std::int64_t off = 0;
  int i = 0;
  for (auto v : idx) {
    off = off * shape_[static_cast<size_t>(i)] + v;
    ++i;
  }
  return (*data_)[static_cast<size_t>(off)];
}

bool Tensor::all_finite() const {
  for (double v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- tape ------------------------------------------------------------------

void GradTape::record(const Tensor& out, std::function<void(GradTape&)> fn) {
  if (consumed_) throw ContractError("recording on a consumed tape");
  tracked_.insert(out.id());
  op_outputs_.insert(out.id());
  records_.push_back({out.id(), std::move(fn)});
}

void GradTape::accumulate(std::uint64_t id, const Shape& shape, const double* g,
                          std::int64_t n) {
  auto it = grads_.find(id);
  if (it == grads_.end()) {
    grads_.emplace(id, std::vector<double>(g, g + n));
    grad_shapes_.emplace(id, shape);
    return;
  }
  double* dst = it->second.data();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

const std::vector<double>* GradTape::grad_ptr(std::uint64_t id) const {
  auto it = grads_.find(id);
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor GradTape::grad(const Tensor& t) const {
  if (!consumed_) throw ContractError("grad() before backward()");
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return Tensor::from_data(t.shape(), it->second);
}

void backward(GradTape& tape, const Tensor& loss) {
  if (tape.consumed_) throw ContractError("backward() on a consumed tape");
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  if (tape.op_outputs_.count(loss.id()) == 0)
    throw ContractError("loss tensor is not a recorded op output on this tape");
  tape.consumed_ = true;
  double one = 1.0;
  tape.accumulate(loss.id(), loss.shape(), &one, 1);
  for (auto it = tape.records_.rbegin(); it != tape.records_.rend(); ++it) {
    auto g = tape.grads_.find(it->out_id);
    if (g == tape.grads_.end()) continue;  // branch not reached from loss
    it->backward(tape);
    // op-output grads are never read again once their producer has run
    tape.grads_.erase(it->out_id);
    tape.grad_shapes_.erase(it->out_id);
  }
}

// ---- op helpers ------------------------------------------------------------

namespace {

bool want_tape(GradTape* tape, const Tensor& a) { return tape && tape->tracked(a); }
bool want_tape(GradTape* tape, const Tensor& a, const Tensor& b) {
  return tape && (tape->tracked(a) || tape->tracked(b));
}

struct BcastPlan {
  Shape out;
  std::vector<std::int64_t> sa, sb;  // operand strides, 0 where broadcast
  std::int64_t n = 0;
  bool same = false;
};

BcastPlan bcast_plan(const Tensor& a, const Tensor& b, const char* opname) {
  if (a.rank() != b.rank())
    throw DimensionError(std::string(opname) + ": rank mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  BcastPlan p;
  int r = a.rank();
  p.out.resize(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    std::int64_t da = a.dim(i), db = b.dim(i);
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(opname) + ": incompatible shapes " +
                           shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    p.out[static_cast<size_t>(i)] = std::max(da, db);
  }
  p.n = shape_numel(p.out);
  p.same = (a.shape() == b.shape());
  if (p.same) return p;
  p.sa.assign(static_cast<size_t>(r), 0);
  p.sb.assign(static_cast<size_t>(r), 0);
  std::int64_t ra = 1, rb = 1;
  for (int i = r - 1; i >= 0; --i) {
    p.sa[static_cast<size_t>(i)] = (a.dim(i) == 1) ? 0 : ra;
    p.sb[static_cast<size_t>(i)] = (b.dim(i) == 1) ? 0 : rb;
    ra *= a.dim(i);
    rb *= b.dim(i);
  }
  return p;
}

// Walk the broadcast output space applying f(out_index, a_index, b_index).
template <typename F>
void bcast_walk(const BcastPlan& p, F&& f) {
  int r = static_cast<int>(p.out.size());
  std::vector<std::int64_t> idx(static_cast<size_t>(r), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < p.n; ++o) {
    f(o, ia, ib);
    for (int ax = r - 1; ax >= 0; --ax) {
      idx[static_cast<size_t>(ax)]++;
      ia += p.sa[static_cast<size_t>(ax)];
      ib += p.sb[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < p.out[static_cast<size_t>(ax)]) break;
      ia -= p.sa[static_cast<size_t>(ax)] * p.out[static_cast<size_t>(ax)];
      ib -= p.sb[static_cast<size_t>(ax)] * p.out[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_op(GradTape* tape, const Tensor& a, const Tensor& b, BinOp op,
                 const char* name) {
  BcastPlan p = bcast_plan(a, b, name);
  Tensor out = Tensor::zeros(p.out);
  double* o = out.mutable_data();
  const double* pa = a.data();
  const double* pb = b.data();
  auto apply = [op](double x, double y) {
    switch (op) {
      case BinOp::Add: return x + y;
      case BinOp::Sub: return x - y;
      case BinOp::Mul: return x * y;
      default: return x / y;
    }
  };
  if (p.same) {
    for (std::int64_t i = 0; i < p.n; ++i) o[i] = apply(pa[i], pb[i]);
  } else {
    bcast_walk(p, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
      o[io] = apply(pa[ia], pb[ib]);
    });
  }
  if (want_tape(tape, a, b)) {
    out.set_requires_grad(true);
    bool need_a = tape->tracked(a), need_b = tape->tracked(b);
    auto abuf = (op == BinOp::Mul || op == BinOp::Div) ? a.buffer() : nullptr;
    auto bbuf = (op == BinOp::Mul || op == BinOp::Div) ? b.buffer() : nullptr;
    Shape ash = a.shape(), bsh = b.shape();
    std::uint64_t aid = a.id(), bid = b.id(), oid = out.id();
    std::int64_t an = a.numel(), bn = b.numel();
    tape->record(out, [=](GradTape& t) {
      const std::vector<double>* g = t.grad_ptr(oid);
      std::vector<double> ga, gb;
      if (need_a) ga.assign(static_cast<size_t>(an), 0.0);
      if (need_b) gb.assign(static_cast<size_t>(bn), 0.0);
      const double* gp = g->data();
      auto acc = [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
        double gv = gp[io];
        switch (op) {
          case BinOp::Add:
            if (need_a) ga[static_cast<size_t>(ia)] += gv;
            if (need_b) gb[static_cast<size_t>(ib)] += gv;
            break;
          case BinOp::Sub:
            if (need_a) ga[static_cast<size_t>(ia)] += gv;
            if (need_b) gb[static_cast<size_t>(ib)] -= gv;
            break;
          case BinOp::Mul:
            if (need_a) ga[static_cast<size_t>(ia)] += gv * (*bbuf)[static_cast<size_t>(ib)];
            if (need_b) gb[static_cast<size_t>(ib)] += gv * (*abuf)[static_cast<size_t>(ia)];
            break;
          case BinOp::Div: {
            double bv = (*bbuf)[static_cast<size_t>(ib)];
            if (need_a) ga[static_cast<size_t>(ia)] += gv / bv;
            if (need_b)
              gb[static_cast<size_t>(ib)] -=
                  gv * (*abuf)[static_cast<size_t>(ia)] / (bv * bv);
            break;
          }
        }
      };
      if (p.same) {
        for (std::int64_t i = 0; i < p.n; ++i) acc(i, i, i);
      } else {
        bcast_walk(p, acc);
      }
      if (need_a) t.accumulate(aid, ash, ga.data(), an);
      if (need_b) t.accumulate(bid, bsh, gb.data(), bn);
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(GradTape* tape, const Tensor& a, Fwd fwd, Bwd mk_backward) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* o = out.mutable_data();
  std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = fwd(pa[i]);
  if (want_tape(tape, a)) {
    out.set_requires_grad(true);
    mk_backward(*tape, a, out);
  }
  return out;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(GradTape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, a, b, BinOp::Add, "add");
}
Tensor sub(GradTape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, a, b, BinOp::Sub, "sub");
}
Tensor mul(GradTape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, a, b, BinOp::Mul, "mul");
}
Tensor div(GradTape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, a, b, BinOp::Div, "div");
}

Tensor add_scalar(GradTape* tape, const Tensor& a, double c) {
  return unary_op(
      tape, a, [c](double x) { return x + c; },
      [](GradTape& t, const Tensor& in, const Tensor& out) {
        std::uint64_t iid = in.id(), oid = out.id();
        Shape ish = in.shape();
        std::int64_t n = in.numel();
        t.record(out, [=](GradTape& tt) {
          const auto* g = tt.grad_ptr(oid);
          tt.accumulate(iid, ish, g->data(), n);
        });
      });
}

Tensor mul_scalar(GradTape* tape, const Tensor& a, double c) {
  return unary_op(
      tape, a, [c](double x) { return x * c; },
      [c](GradTape& t, const Tensor& in, const Tensor& out) {
        std::uint64_t iid = in.id(), oid = out.id();
        Shape ish = in.shape();
        std::int64_t n = in.numel();
        t.record(out, [=](GradTape& tt) {
          const auto* g = tt.grad_ptr(oid);
          std::vector<double> gi(static_cast<size_t>(n));
          for (std::int64_t i = 0; i < n; ++i) gi[static_cast<size_t>(i)] = (*g)[static_cast<size_t>(i)] * c;
          tt.accumulate(iid, ish, gi.data(), n);
        });
      });
}

Tensor exp(GradTape* tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return std::exp(x); },
      [](GradTape& t, const Tensor& in, const Tensor& out) {
        auto ybuf = out.buffer();
        std::uint64_t iid = in.id(), oid = out.id();
        Shape ish = in.shape();
        std::int64_t n = in.numel();
        t.record(out, [=](GradTape& tt) {
          const auto* g = tt.grad_ptr(oid);
          std::vector<double> gi(static_cast<size_t>(n));
          for (std::int64_t i = 0; i < n; ++i)
            gi[static_cast<size_t>(i)] = (*g)[static_cast<size_t>(i)] * (*ybuf)[static_cast<size_t>(i)];
          tt.accumulate(iid, ish, gi.data(), n);
        });
      });
}

Tensor log(GradTape* tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return std::log(x); },
      [](GradTape& t, const Tensor& in, const Tensor& out) {
        auto xbuf = in.buffer();
        std::uint64_t iid = in.id(), oid = out.id();
        Shape ish = in.shape();
        std::int64_t n = in.numel();
        t.record(out, [=](GradTape& tt) {
          const auto* g = tt.grad_ptr(oid);
          std::vector<double> gi(static_cast<size_t>(n));
          for (std::int64_t i = 0; i < n; ++i)
            gi[static_cast<size_t>(i)] = (*g)[static_cast<size_t>(i)] / (*xbuf)[static_cast<size_t>(i)];
          tt.accumulate(iid, ish, gi.data(), n);
        });
      });
}

Tensor log1p(GradTape* tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return std::log1p(x); },
      [](GradTape& t, const Tensor& in, const Tensor& out) {
        auto xbuf = in.buffer();
        std::uint64_t iid = in.id(), oid = out.id();
        Shape ish = in.shape();
        std::int64_t n = in.numel();
        t.record(out, [=](GradTape& tt) {
          const auto* g = tt.grad_ptr(oid);
          std::vector<double> gi(static_cast<size_t>(n));
          for (std::int64_t i = 0; i < n; ++i)
            gi[static_cast<size_t>(i)] = (*g)[static_cast<size_t>(i)] / (1.0 + (*xbuf)[static_cast<size_t>(i)]);
          tt.accumulate(iid, ish, gi.data(), n);
        });
      });
}

Tensor sqrt(GradTape* tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return std::sqrt(x); },
      [](GradTape& t, const Tensor& in, const Tensor& out) {
        auto ybuf = out.buffer();
        std::uint64_t iid = in.id(), oid = out.id();
        Shape ish = in.shape();
        std::int64_t n = in.numel();
        t.record(out, [=](GradTape& tt) {
          const auto* g = tt.grad_ptr(oid);
          std::vector<double> gi(static_cast<size_t>(n));
          for (std::int64_t i = 0; i < n; ++i)
            gi[static_cast<size_t>(i)] =
                (*g)[static_cast<size_t>(i)] * 0.5 / (*ybuf)[static_cast<size_t>(i)];
          tt.accumulate(iid, ish, gi.data(), n);
        });
      });
}

Tensor clamp_min(GradTape* tape, const Tensor& a, double c) {
  return unary_op(
      tape, a, [c](double x) { return x > c ? x : c; },
      [c](GradTape& t, const Tensor& in, const Tensor& out) {
        auto xbuf = in.buffer();
        std::uint64_t iid = in.id(), oid = out.id();
        Shape ish = in.shape();
        std::int64_t n = in.numel();
        t.record(out, [=](GradTape& tt) {
          const auto* g = tt.grad_ptr(oid);
          std::vector<double> gi(static_cast<size_t>(n), 0.0);
          for (std::int64_t i = 0; i < n; ++i)
            if ((*xbuf)[static_cast<size_t>(i)] > c)
              gi[static_cast<size_t>(i)] = (*g)[static_cast<size_t>(i)];
          tt.accumulate(iid, ish, gi.data(), n);
        });
      });
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
}  // namespace

Tensor gelu(GradTape* tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return x * norm_cdf(x); },
      [](GradTape& t, const Tensor& in, const Tensor& out) {
        auto xbuf = in.buffer();
        std::uint64_t iid = in.id(), oid = out.id();
        Shape ish = in.shape();
        std::int64_t n = in.numel();
        t.record(out, [=](GradTape& tt) {
          const auto* g = tt.grad_ptr(oid);
          std::vector<double> gi(static_cast<size_t>(n));
          double fault = detail::gelu_backward_fault.load() ? 1.01 : 1.0;
          for (std::int64_t i = 0; i < n; ++i) {
            double x = (*xbuf)[static_cast<size_t>(i)];
            double d = norm_cdf(x) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
            gi[static_cast<size_t>(i)] = (*g)[static_cast<size_t>(i)] * d * fault;
          }
          tt.accumulate(iid, ish, gi.data(), n);
        });
      });
}

// ---- structure -------------------------------------------------------------

Tensor reshape(GradTape* tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " +
                         shape_str(shape) + ": element count differs");
  Tensor out = Tensor::wrap(std::move(shape), a.buffer(), false);
  if (want_tape(tape, a)) {
    out.set_requires_grad(true);
    std::uint64_t iid = a.id(), oid = out.id();
    Shape ish = a.shape();
    std::int64_t n = a.numel();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      t.accumulate(iid, ish, g->data(), n);
    });
  }
  return out;
}

namespace {
std::vector<std::int64_t> row_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

void permute_copy(const double* src, double* dst, const Shape& in_shape,
                  const std::vector<int>& axes) {
  // dst index iterates row-major over the permuted shape; src offset follows
  // the permuted strides of the input.
  int r = static_cast<int>(in_shape.size());
  auto ist = row_strides(in_shape);
  Shape oshape(static_cast<size_t>(r));
  std::vector<std::int64_t> ost(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    oshape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    ost[static_cast<size_t>(i)] = ist[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  }
  std::int64_t n = shape_numel(in_shape);
  std::vector<std::int64_t> idx(static_cast<size_t>(r), 0);
  std::int64_t so = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    dst[o] = src[so];
    for (int ax = r - 1; ax >= 0; --ax) {
      idx[static_cast<size_t>(ax)]++;
      so += ost[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < oshape[static_cast<size_t>(ax)]) break;
      so -= ost[static_cast<size_t>(ax)] * oshape[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
}
}  // namespace

Tensor permute(GradTape* tape, const Tensor& a, const std::vector<int>& axes) {
  int r = a.rank();
  if (static_cast<int>(axes.size()) != r)
    throw DimensionError("permute: axes rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape oshape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int ax = axes[static_cast<size_t>(i)];
    if (ax < 0 || ax >= r || seen[static_cast<size_t>(ax)])
      throw DimensionError("permute: invalid axis list");
    seen[static_cast<size_t>(ax)] = true;
    oshape[static_cast<size_t>(i)] = a.dim(ax);
  }
  Tensor out = Tensor::zeros(oshape);
  permute_copy(a.data(), out.mutable_data(), a.shape(), axes);
  if (want_tape(tape, a)) {
    out.set_requires_grad(true);
    std::vector<int> inv(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) inv[static_cast<size_t>(axes[static_cast<size_t>(i)])] = i;
    std::uint64_t iid = a.id(), oid = out.id();
    Shape ish = a.shape();
    std::int64_t n = a.numel();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      std::vector<double> gi(static_cast<size_t>(n));
      permute_copy(g->data(), gi.data(), oshape, inv);
      t.accumulate(iid, ish, gi.data(), n);
    });
  }
  return out;
}

Tensor slice(GradTape* tape, const Tensor& a, int axis, std::int64_t start,
             std::int64_t len) {
  if (axis < 0 || axis >= a.rank())
    throw DimensionError("slice: bad axis for " + shape_str(a.shape()));
  if (start < 0 || len <= 0 || start + len > a.dim(axis))
    throw DimensionError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds axis extent " +
                         std::to_string(a.dim(axis)));
  Shape oshape = a.shape();
  oshape[static_cast<size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  std::int64_t in_ax = a.dim(axis);
  Tensor out = Tensor::zeros(oshape);
  const double* src = a.data();
  double* dst = out.mutable_data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(dst + o * len * inner, src + (o * in_ax + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(double));
  if (want_tape(tape, a)) {
    out.set_requires_grad(true);
    std::uint64_t iid = a.id(), oid = out.id();
    Shape ish = a.shape();
    std::int64_t n = a.numel();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      std::vector<double> gi(static_cast<size_t>(n), 0.0);
      for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(gi.data() + (o * in_ax + start) * inner,
                    g->data() + o * len * inner,
                    static_cast<size_t>(len * inner) * sizeof(double));
      t.accumulate(iid, ish, gi.data(), n);
    });
  }
  return out;
}

Tensor concat(GradTape* tape, const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= parts[0].rank())
    throw DimensionError("concat: bad axis");
  std::int64_t total_ax = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank())
      throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      if (i != axis && p.dim(i) != s0[static_cast<size_t>(i)])
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) +
                             " vs " + shape_str(s0));
    total_ax += p.dim(axis);
  }
  Shape oshape = s0;
  oshape[static_cast<size_t>(axis)] = total_ax;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int i = axis + 1; i < parts[0].rank(); ++i) inner *= s0[static_cast<size_t>(i)];
  Tensor out = Tensor::zeros(oshape);
  double* dst = out.mutable_data();
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::int64_t len = p.dim(axis);
    const double* src = p.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(dst + (o * total_ax + off) * inner, src + o * len * inner,
                  static_cast<size_t>(len * inner) * sizeof(double));
    off += len;
  }
  bool any = false;
  if (tape)
    for (const auto& p : parts) any = any || tape->tracked(p);
  if (any) {
    out.set_requires_grad(true);
    struct PartInfo {
      std::uint64_t id;
      Shape shape;
      std::int64_t len, n;
      bool need;
    };
    std::vector<PartInfo> info;
    for (const auto& p : parts)
      info.push_back({p.id(), p.shape(), p.dim(axis), p.numel(), tape->tracked(p)});
    std::uint64_t oid = out.id();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      std::int64_t off2 = 0;
      for (const auto& pi : info) {
        if (pi.need) {
          std::vector<double> gi(static_cast<size_t>(pi.n));
          for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(gi.data() + o * pi.len * inner,
                        g->data() + (o * total_ax + off2) * inner,
                        static_cast<size_t>(pi.len * inner) * sizeof(double));
          t.accumulate(pi.id, pi.shape, gi.data(), pi.n);
        }
        off2 += pi.len;
      }
    });
  }
  return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum_all(GradTape* tape, const Tensor& a) {
  double s = 0.0;
  const double* p = a.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) s += p[i];
  Tensor out = Tensor::from_data({1}, {s});
  if (want_tape(tape, a)) {
    out.set_requires_grad(true);
    std::uint64_t iid = a.id(), oid = out.id();
    Shape ish = a.shape();
    std::int64_t n = a.numel();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      std::vector<double> gi(static_cast<size_t>(n), (*g)[0]);
      t.accumulate(iid, ish, gi.data(), n);
    });
  }
  return out;
}

Tensor sum_axis(GradTape* tape, const Tensor& a, int axis, bool keepdim) {
  if (axis < 0 || axis >= a.rank()) throw DimensionError("sum_axis: bad axis");
  std::int64_t outer = 1, inner = 1, ax = a.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Shape oshape;
  for (int i = 0; i < a.rank(); ++i) {
    if (i == axis) {
      if (keepdim) oshape.push_back(1);
    } else {
      oshape.push_back(a.dim(i));
    }
  }
  if (oshape.empty()) oshape.push_back(1);
  Tensor out = Tensor::zeros(oshape);
  double* o = out.mutable_data();
  const double* p = a.data();
  for (std::int64_t u = 0; u < outer; ++u)
    for (std::int64_t i = 0; i < inner; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < ax; ++j) s += p[(u * ax + j) * inner + i];
      o[u * inner + i] = s;
    }
  if (want_tape(tape, a)) {
    out.set_requires_grad(true);
    std::uint64_t iid = a.id(), oid = out.id();
    Shape ish = a.shape();
    std::int64_t n = a.numel();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      std::vector<double> gi(static_cast<size_t>(n));
      for (std::int64_t u = 0; u < outer; ++u)
        for (std::int64_t j = 0; j < ax; ++j)
          for (std::int64_t i = 0; i < inner; ++i)
            gi[static_cast<size_t>((u * ax + j) * inner + i)] = (*g)[static_cast<size_t>(u * inner + i)];
      t.accumulate(iid, ish, gi.data(), n);
    });
  }
  return out;
}

// ---- softmax ---------------------------------------------------------------

namespace {
// Vector-friendly exp for the softmax hot loop: Cody-Waite reduction plus a
// degree-10 Taylor core keeps relative error under 1e-12. Inputs are
// max-subtracted, so only the (-inf, 0] range matters.
inline double softmax_exp(double x) {
  constexpr double kLog2e = 1.4426950408889634074;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  double nf = std::floor(x * kLog2e + 0.5);
  double r = (x - nf * kLn2Hi) - nf * kLn2Lo;
  double p = 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  std::uint64_t bits;
  std::memcpy(&bits, &p, 8);
  bits += static_cast<std::uint64_t>(static_cast<std::int64_t>(nf)) << 52;
  double out;
  std::memcpy(&out, &bits, 8);
  return x < -700.0 ? 0.0 : out;
}
}  // namespace

Tensor softmax(GradTape* tape, const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank()) throw DimensionError("softmax: bad axis");
  std::int64_t outer = 1, inner = 1, ax = a.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Tensor out = Tensor::zeros(a.shape());
  const double* p = a.data();
  double* o = out.mutable_data();
#pragma omp parallel for schedule(static) if (outer > 4 && ax * inner > 1024)
  for (std::int64_t u = 0; u < outer; ++u) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const double* row = p + u * ax * inner + i;
      double* orow = o + u * ax * inner + i;
      double m = row[0];
      for (std::int64_t j = 1; j < ax; ++j) m = std::max(m, row[j * inner]);
      double s = 0.0;
      if (inner == 1) {
        for (std::int64_t j = 0; j < ax; ++j) {
          double e = softmax_exp(row[j] - m);
          orow[j] = e;
          s += e;
        }
      } else {
        for (std::int64_t j = 0; j < ax; ++j) {
          double e = softmax_exp(row[j * inner] - m);
          orow[j * inner] = e;
          s += e;
        }
      }
      double inv = 1.0 / s;
      for (std::int64_t j = 0; j < ax; ++j) orow[j * inner] *= inv;
    }
  }
  if (want_tape(tape, a)) {
    out.set_requires_grad(true);
    auto ybuf = out.buffer();
    std::uint64_t iid = a.id(), oid = out.id();
    Shape ish = a.shape();
    std::int64_t n = a.numel();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      std::vector<double> gi(static_cast<size_t>(n));
      const double* gp = g->data();
      const double* y = ybuf->data();
      double* gd = gi.data();
#pragma omp parallel for schedule(static) if (outer > 4 && ax * inner > 1024)
      for (std::int64_t u = 0; u < outer; ++u) {
        for (std::int64_t i = 0; i < inner; ++i) {
          std::int64_t base = u * ax * inner + i;
          double dot = 0.0;
          for (std::int64_t j = 0; j < ax; ++j)
            dot += gp[base + j * inner] * y[base + j * inner];
          for (std::int64_t j = 0; j < ax; ++j)
            gd[base + j * inner] = y[base + j * inner] * (gp[base + j * inner] - dot);
        }
      }
      t.accumulate(iid, ish, gi.data(), n);
    });
  }
  return out;
}

// ---- matmul ----------------------------------------------------------------

namespace {

// C[m,q] += A[m,p] * B[p,q], contiguous row-major blocks.
void mm_acc(const double* A, const double* B, double* C, std::int64_t m,
            std::int64_t p, std::int64_t q) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* a = A + i * p;
    double* c = C + i * q;
    for (std::int64_t k = 0; k < p; ++k) {
      double av = a[k];
      const double* b = B + k * q;
      for (std::int64_t j = 0; j < q; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,q] += A[m,p] * B^T where Bt is [q,p] row-major.
void mm_bt_acc(const double* A, const double* Bt, double* C, std::int64_t m,
               std::int64_t p, std::int64_t q) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* a = A + i * p;
    double* c = C + i * q;
    for (std::int64_t j = 0; j < q; ++j) {
      const double* b = Bt + j * p;
      double s = 0.0;
      for (std::int64_t k = 0; k < p; ++k) s += a[k] * b[k];
      c[j] += s;
    }
  }
}

// C[p,q] += A^T * B where A is [m,p], B is [m,q].
void mm_at_acc(const double* A, const double* B, double* C, std::int64_t m,
               std::int64_t p, std::int64_t q) {
  for (std::int64_t k = 0; k < m; ++k) {
    const double* a = A + k * p;
    const double* b = B + k * q;
    for (std::int64_t i = 0; i < p; ++i) {
      double av = a[i];
      double* c = C + i * q;
      for (std::int64_t j = 0; j < q; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() == 3 && b.rank() == 3) return bmm(tape, a, b);
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: need 2-D operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  std::int64_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
  Tensor out = Tensor::zeros({m, q});
  mm_acc(a.data(), b.data(), out.mutable_data(), m, p, q);
  if (want_tape(tape, a, b)) {
    out.set_requires_grad(true);
    bool need_a = tape->tracked(a), need_b = tape->tracked(b);
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    std::uint64_t aid = a.id(), bid = b.id(), oid = out.id();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      if (need_a) {  // dA = G * B^T  (G is m x q, B^T is q x p)
        std::vector<double> ga(static_cast<size_t>(m * p), 0.0);
        mm_bt_acc(g->data(), bbuf->data(), ga.data(), m, q, p);
        t.accumulate(aid, {m, p}, ga.data(), m * p);
      }
      if (need_b) {  // dB = A^T * G
        std::vector<double> gb(static_cast<size_t>(p * q), 0.0);
        mm_at_acc(abuf->data(), g->data(), gb.data(), m, p, q);
        t.accumulate(bid, {p, q}, gb.data(), p * q);
      }
    });
  }
  return out;
}

Tensor bmm(GradTape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw DimensionError("bmm: need 3-D operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  std::int64_t B = a.dim(0), m = a.dim(1), p = a.dim(2), q = b.dim(2);
  Tensor out = Tensor::zeros({B, m, q});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
#pragma omp parallel for schedule(static) if (B > 1 && m * p * q > 8192)
  for (std::int64_t i = 0; i < B; ++i)
    mm_acc(pa + i * m * p, pb + i * p * q, po + i * m * q, m, p, q);
  if (want_tape(tape, a, b)) {
    out.set_requires_grad(true);
    bool need_a = tape->tracked(a), need_b = tape->tracked(b);
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    std::uint64_t aid = a.id(), bid = b.id(), oid = out.id();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      const double* gp = g->data();
      if (need_a) {
        std::vector<double> ga(static_cast<size_t>(B * m * p), 0.0);
        double* gap = ga.data();
        const double* bp = bbuf->data();
#pragma omp parallel for schedule(static) if (B > 1 && m * p * q > 8192)
        for (std::int64_t i = 0; i < B; ++i)
          mm_bt_acc(gp + i * m * q, bp + i * p * q, gap + i * m * p, m, q, p);
        t.accumulate(aid, {B, m, p}, ga.data(), B * m * p);
      }
      if (need_b) {
        std::vector<double> gb(static_cast<size_t>(B * p * q), 0.0);
        double* gbp = gb.data();
        const double* ap = abuf->data();
#pragma omp parallel for schedule(static) if (B > 1 && m * p * q > 8192)
        for (std::int64_t i = 0; i < B; ++i)
          mm_at_acc(ap + i * m * p, gp + i * m * q, gbp + i * p * q, m, p, q);
        t.accumulate(bid, {B, p, q}, gb.data(), B * p * q);
      }
    });
  }
  return out;
}

Tensor linear(GradTape* tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2)
    throw DimensionError("linear: need 2-D input and weight, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(0))
    throw DimensionError("linear: feature extents differ, " + shape_str(x.shape()) +
                         " vs " + shape_str(w.shape()));
  std::int64_t n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != dout))
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()) +
                         " does not match output width " + std::to_string(dout));
  Tensor out = Tensor::zeros({n, dout});
  double* o = out.mutable_data();
  if (has_bias) {
    const double* bp = bias.data();
    for (std::int64_t i = 0; i < n; ++i)
      std::memcpy(o + i * dout, bp, static_cast<size_t>(dout) * sizeof(double));
  }
  mm_acc(x.data(), w.data(), o, n, din, dout);
  bool track = tape && (tape->tracked(x) || tape->tracked(w) ||
                        (has_bias && tape->tracked(bias)));
  if (track) {
    out.set_requires_grad(true);
    bool need_x = tape->tracked(x), need_w = tape->tracked(w);
    bool need_b = has_bias && tape->tracked(bias);
    auto xbuf = x.buffer();
    auto wbuf = w.buffer();
    std::uint64_t xid = x.id(), wid = w.id(), bid2 = has_bias ? bias.id() : 0,
                  oid = out.id();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      if (need_x) {
        std::vector<double> gx(static_cast<size_t>(n * din), 0.0);
        mm_bt_acc(g->data(), wbuf->data(), gx.data(), n, dout, din);
        t.accumulate(xid, {n, din}, gx.data(), n * din);
      }
      if (need_w) {
        std::vector<double> gw(static_cast<size_t>(din * dout), 0.0);
        mm_at_acc(xbuf->data(), g->data(), gw.data(), n, din, dout);
        t.accumulate(wid, {din, dout}, gw.data(), din * dout);
      }
      if (need_b) {
        std::vector<double> gb(static_cast<size_t>(dout), 0.0);
        const double* gp = g->data();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < dout; ++j) gb[static_cast<size_t>(j)] += gp[i * dout + j];
        t.accumulate(bid2, {dout}, gb.data(), dout);
      }
    });
  }
  return out;
}

// ---- padding + convolution -------------------------------------------------

namespace {
// mirror index into [0, n), edge not repeated; n == 1 collapses to 0
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}
}  // namespace

Tensor reflect_pad2d(GradTape* tape, const Tensor& x, int pad_h, int pad_w) {
  if (x.rank() != 4)
    throw DimensionError("reflect_pad2d: need (B,C,H,W), got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::int64_t Ho = H + 2 * pad_h, Wo = W + 2 * pad_w;
  Tensor out = Tensor::zeros({B, C, Ho, Wo});
  const double* src = x.data();
  double* dst = out.mutable_data();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* s = src + bc * H * W;
    double* d = dst + bc * Ho * Wo;
    for (std::int64_t i = 0; i < Ho; ++i) {
      std::int64_t si = reflect_index(i - pad_h, H);
      for (std::int64_t j = 0; j < Wo; ++j)
        d[i * Wo + j] = s[si * W + reflect_index(j - pad_w, W)];
    }
  }
  if (want_tape(tape, x)) {
    out.set_requires_grad(true);
    std::uint64_t iid = x.id(), oid = out.id();
    Shape ish = x.shape();
    std::int64_t n = x.numel();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      std::vector<double> gi(static_cast<size_t>(n), 0.0);
      const double* gp = g->data();
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        double* gd = gi.data() + bc * H * W;
        const double* gs = gp + bc * Ho * Wo;
        for (std::int64_t i = 0; i < Ho; ++i) {
          std::int64_t si = reflect_index(i - pad_h, H);
          for (std::int64_t j = 0; j < Wo; ++j)
            gd[si * W + reflect_index(j - pad_w, W)] += gs[i * Wo + j];
        }
      }
      t.accumulate(iid, ish, gi.data(), n);
    });
  }
  return out;
}

namespace {

struct ConvDims {
  std::int64_t B, Cin, H, W, Cout, kh, kw, cin_g, cout_g;
  int groups;
};

// valid cross-correlation on a padded input
void conv_forward(const double* xp, const double* f, const double* bias,
                  double* y, const ConvDims& d, std::int64_t Hp, std::int64_t Wp,
                  std::int64_t Ho, std::int64_t Wo) {
#pragma omp parallel for collapse(2) schedule(static) if (d.B * d.Cout > 2)
  for (std::int64_t b = 0; b < d.B; ++b) {
    for (std::int64_t co = 0; co < d.Cout; ++co) {
      std::int64_t g = co / d.cout_g;
      double* yrow = y + (b * d.Cout + co) * Ho * Wo;
      double bv = bias ? bias[co] : 0.0;
      for (std::int64_t i = 0; i < Ho * Wo; ++i) yrow[i] = bv;
      for (std::int64_t cg = 0; cg < d.cin_g; ++cg) {
        std::int64_t ci = g * d.cin_g + cg;
        const double* xrow = xp + (b * d.Cin + ci) * Hp * Wp;
        const double* frow = f + (co * d.cin_g + cg) * d.kh * d.kw;
        for (std::int64_t dy = 0; dy < d.kh; ++dy)
          for (std::int64_t dx = 0; dx < d.kw; ++dx) {
            double fv = frow[dy * d.kw + dx];
            for (std::int64_t i = 0; i < Ho; ++i) {
              const double* xs = xrow + (i + dy) * Wp + dx;
              double* ys = yrow + i * Wo;
              for (std::int64_t j = 0; j < Wo; ++j) ys[j] += fv * xs[j];
            }
          }
      }
    }
  }
}

}  // namespace

Tensor conv2d(GradTape* tape, const Tensor& x, const Tensor& filters,
              const Tensor& bias, int groups, PadMode padding) {
  if (x.rank() != 4)
    throw DimensionError("conv2d: need (B,C,H,W) input, got " + shape_str(x.shape()));
  if (filters.rank() != 4)
    throw DimensionError("conv2d: need (Cout,Cin/g,kh,kw) filters, got " +
                         shape_str(filters.shape()));
  ConvDims d;
  d.B = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = filters.dim(0);
  d.kh = filters.dim(2);
  d.kw = filters.dim(3);
  d.groups = groups;
  if (groups < 1 || d.Cin % groups != 0 || d.Cout % groups != 0)
    throw ConfigError("conv2d: channel counts (" + std::to_string(d.Cin) + "," +
                      std::to_string(d.Cout) + ") not divisible by groups " +
                      std::to_string(groups));
  if (d.kh % 2 == 0 || d.kw % 2 == 0)
    throw ConfigError("conv2d: kernel extents must be odd, got " +
                      shape_str(filters.shape()));
  d.cin_g = d.Cin / groups;
  d.cout_g = d.Cout / groups;
  if (filters.dim(1) != d.cin_g)
    throw DimensionError("conv2d: filters " + shape_str(filters.shape()) +
                         " inconsistent with input " + shape_str(x.shape()) +
                         " at groups " + std::to_string(groups));
  bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != d.Cout))
    throw DimensionError("conv2d: bias shape mismatch");

  // The padded input is an internal tape node when padding is Reflect, so the
  // convolution itself only ever sees the valid case.
  Tensor xp = (padding == PadMode::Reflect)
                  ? reflect_pad2d(tape, x, static_cast<int>(d.kh / 2),
                                  static_cast<int>(d.kw / 2))
                  : x;
  std::int64_t Hp = xp.dim(2), Wp = xp.dim(3);
  std::int64_t Ho = Hp - d.kh + 1, Wo = Wp - d.kw + 1;
  if (Ho <= 0 || Wo <= 0)
    throw DimensionError("conv2d: kernel larger than input");
  Tensor out = Tensor::zeros({d.B, d.Cout, Ho, Wo});
  conv_forward(xp.data(), filters.data(), has_bias ? bias.data() : nullptr,
               out.mutable_data(), d, Hp, Wp, Ho, Wo);

  bool track = tape && (tape->tracked(xp) || tape->tracked(filters) ||
                        (has_bias && tape->tracked(bias)));
  if (track) {
    out.set_requires_grad(true);
    bool need_x = tape->tracked(xp), need_f = tape->tracked(filters);
    bool need_b = has_bias && tape->tracked(bias);
    auto xbuf = xp.buffer();
    auto fbuf = filters.buffer();
    std::uint64_t xid = xp.id(), fid = filters.id(),
                  bid = has_bias ? bias.id() : 0, oid = out.id();
    Shape xsh = xp.shape(), fsh = filters.shape();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      const double* gp = g->data();
      if (need_x) {
        std::vector<double> gx(static_cast<size_t>(d.B * d.Cin * Hp * Wp), 0.0);
        double* gxp = gx.data();
        const double* f = fbuf->data();
#pragma omp parallel for collapse(2) schedule(static) if (d.B * d.Cin > 2)
        for (std::int64_t b = 0; b < d.B; ++b)
          for (std::int64_t ci = 0; ci < d.Cin; ++ci) {
            std::int64_t grp = ci / d.cin_g, cg = ci % d.cin_g;
            double* gxrow = gxp + (b * d.Cin + ci) * Hp * Wp;
            for (std::int64_t cog = 0; cog < d.cout_g; ++cog) {
              std::int64_t co = grp * d.cout_g + cog;
              const double* grow = gp + (b * d.Cout + co) * Ho * Wo;
              const double* frow = f + (co * d.cin_g + cg) * d.kh * d.kw;
              for (std::int64_t dy = 0; dy < d.kh; ++dy)
                for (std::int64_t dx = 0; dx < d.kw; ++dx) {
                  double fv = frow[dy * d.kw + dx];
                  for (std::int64_t i = 0; i < Ho; ++i) {
                    double* gxs = gxrow + (i + dy) * Wp + dx;
                    const double* gs = grow + i * Wo;
                    for (std::int64_t j = 0; j < Wo; ++j) gxs[j] += fv * gs[j];
                  }
                }
            }
          }
        t.accumulate(xid, xsh, gx.data(), d.B * d.Cin * Hp * Wp);
      }
      if (need_f) {
        std::vector<double> gf(static_cast<size_t>(d.Cout * d.cin_g * d.kh * d.kw), 0.0);
        double* gfp = gf.data();
        const double* xp2 = xbuf->data();
#pragma omp parallel for schedule(static) if (d.Cout > 2)
        for (std::int64_t co = 0; co < d.Cout; ++co) {
          std::int64_t grp = co / d.cout_g;
          for (std::int64_t cg = 0; cg < d.cin_g; ++cg) {
            std::int64_t ci = grp * d.cin_g + cg;
            double* gfrow = gfp + (co * d.cin_g + cg) * d.kh * d.kw;
            for (std::int64_t b = 0; b < d.B; ++b) {
              const double* grow = gp + (b * d.Cout + co) * Ho * Wo;
              const double* xrow = xp2 + (b * d.Cin + ci) * Hp * Wp;
              for (std::int64_t dy = 0; dy < d.kh; ++dy)
                for (std::int64_t dx = 0; dx < d.kw; ++dx) {
                  double s = 0.0;
                  for (std::int64_t i = 0; i < Ho; ++i) {
                    const double* xs = xrow + (i + dy) * Wp + dx;
                    const double* gs = grow + i * Wo;
                    for (std::int64_t j = 0; j < Wo; ++j) s += xs[j] * gs[j];
                  }
                  gfrow[dy * d.kw + dx] += s;
                }
            }
          }
        }
        t.accumulate(fid, fsh, gf.data(), d.Cout * d.cin_g * d.kh * d.kw);
      }
      if (need_b) {
        std::vector<double> gb(static_cast<size_t>(d.Cout), 0.0);
        for (std::int64_t b = 0; b < d.B; ++b)
          for (std::int64_t co = 0; co < d.Cout; ++co) {
            const double* grow = gp + (b * d.Cout + co) * Ho * Wo;
            double s = 0.0;
            for (std::int64_t i = 0; i < Ho * Wo; ++i) s += grow[i];
            gb[static_cast<size_t>(co)] += s;
          }
        t.accumulate(bid, {d.Cout}, gb.data(), d.Cout);
      }
    });
  }
  return out;
}

// ---- normalization ---------------------------------------------------------

Tensor batch_norm(GradTape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, BatchNormState& state, bool training) {
  if (x.rank() != 4)
    throw DimensionError("batch_norm: need (B,C,H,W), got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError("batch_norm: scale/shift extent mismatch");
  if (static_cast<std::int64_t>(state.running_mean.size()) != C)
    throw ConfigError("batch_norm: running stats not sized to channel count");
  if (training && B < 2)
    throw ConfigError("batch_norm: training mode needs batch extent >= 2, got " +
                      std::to_string(B));
  std::int64_t S = H * W;
  std::int64_t cnt = B * S;
  Tensor out = Tensor::zeros(x.shape());
  const double* p = x.data();
  double* o = out.mutable_data();
  const double* gm = gamma.data();
  const double* bt = beta.data();

  if (!training) {
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c) {
        double inv = 1.0 / std::sqrt(state.running_var[static_cast<size_t>(c)] + state.eps);
        double sc = gm[c] * inv;
        double sh = bt[c] - state.running_mean[static_cast<size_t>(c)] * sc;
        const double* xr = p + (b * C + c) * S;
        double* orow = o + (b * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) orow[i] = xr[i] * sc + sh;
      }
    if (want_tape(tape, x) || (tape && (tape->tracked(gamma) || tape->tracked(beta)))) {
      out.set_requires_grad(true);
      bool need_x = tape->tracked(x), need_g = tape->tracked(gamma),
           need_b = tape->tracked(beta);
      auto xbuf = x.buffer();
      std::vector<double> rm = state.running_mean, rv = state.running_var;
      double eps = state.eps;
      std::uint64_t xid = x.id(), gid = gamma.id(), bid = beta.id(), oid = out.id();
      Shape xsh = x.shape();
      tape->record(out, [=](GradTape& t) {
        const auto* g = t.grad_ptr(oid);
        const double* gp = g->data();
        if (need_x) {
          std::vector<double> gx(static_cast<size_t>(B * C * S));
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
              double sc = gm[c] / std::sqrt(rv[static_cast<size_t>(c)] + eps);
              for (std::int64_t i = 0; i < S; ++i)
                gx[static_cast<size_t>((b * C + c) * S + i)] = gp[(b * C + c) * S + i] * sc;
            }
          t.accumulate(xid, xsh, gx.data(), B * C * S);
        }
        if (need_g || need_b) {
          std::vector<double> gg(static_cast<size_t>(C), 0.0), gb(static_cast<size_t>(C), 0.0);
          const double* xr = xbuf->data();
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
              double inv = 1.0 / std::sqrt(rv[static_cast<size_t>(c)] + eps);
              for (std::int64_t i = 0; i < S; ++i) {
                double gv = gp[(b * C + c) * S + i];
                gg[static_cast<size_t>(c)] +=
                    gv * (xr[(b * C + c) * S + i] - rm[static_cast<size_t>(c)]) * inv;
                gb[static_cast<size_t>(c)] += gv;
              }
            }
          if (need_g) t.accumulate(gid, {C}, gg.data(), C);
          if (need_b) t.accumulate(bid, {C}, gb.data(), C);
        }
      });
    }
    return out;
  }

  // training: batch statistics, biased variance for normalization,
  // unbiased for the running estimate
  std::vector<double> mean(static_cast<size_t>(C), 0.0), var(static_cast<size_t>(C), 0.0);
  std::vector<double> xhat(static_cast<size_t>(B * C * S));
#pragma omp parallel for schedule(static) if (C > 8)
  for (std::int64_t c = 0; c < C; ++c) {
    double m = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
      const double* xr = p + (b * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) m += xr[i];
    }
    m /= static_cast<double>(cnt);
    double v = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
      const double* xr = p + (b * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) {
        double d2 = xr[i] - m;
        v += d2 * d2;
      }
    }
    v /= static_cast<double>(cnt);
    mean[static_cast<size_t>(c)] = m;
    var[static_cast<size_t>(c)] = v;
    double inv = 1.0 / std::sqrt(v + state.eps);
    for (std::int64_t b = 0; b < B; ++b) {
      const double* xr = p + (b * C + c) * S;
      double* xh = xhat.data() + (b * C + c) * S;
      double* orow = o + (b * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) {
        xh[i] = (xr[i] - m) * inv;
        orow[i] = xh[i] * gm[c] + bt[c];
      }
    }
  }
  double unbias = static_cast<double>(cnt) / static_cast<double>(cnt - 1);
  for (std::int64_t c = 0; c < C; ++c) {
    state.running_mean[static_cast<size_t>(c)] =
        (1.0 - state.momentum) * state.running_mean[static_cast<size_t>(c)] +
        state.momentum * mean[static_cast<size_t>(c)];
    state.running_var[static_cast<size_t>(c)] =
        (1.0 - state.momentum) * state.running_var[static_cast<size_t>(c)] +
        state.momentum * var[static_cast<size_t>(c)] * unbias;
  }

  bool track = tape && (tape->tracked(x) || tape->tracked(gamma) || tape->tracked(beta));
  if (track) {
    out.set_requires_grad(true);
    bool need_x = tape->tracked(x), need_g = tape->tracked(gamma),
         need_b = tape->tracked(beta);
    auto xhat_s = std::make_shared<std::vector<double>>(std::move(xhat));
    auto var_s = std::make_shared<std::vector<double>>(std::move(var));
    auto gmbuf = gamma.buffer();
    double eps = state.eps;
    std::uint64_t xid = x.id(), gid = gamma.id(), bid = beta.id(), oid = out.id();
    Shape xsh = x.shape();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      const double* gp = g->data();
      const double* xh = xhat_s->data();
      std::vector<double> gg(static_cast<size_t>(C), 0.0), gb(static_cast<size_t>(C), 0.0);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const double* grow = gp + (b * C + c) * S;
          const double* xrow = xh + (b * C + c) * S;
          double sg = 0.0, sb = 0.0;
          for (std::int64_t i = 0; i < S; ++i) {
            sg += grow[i] * xrow[i];
            sb += grow[i];
          }
          gg[static_cast<size_t>(c)] += sg;
          gb[static_cast<size_t>(c)] += sb;
        }
      if (need_x) {
        std::vector<double> gx(static_cast<size_t>(B * C * S));
        const double* gmp = gmbuf->data();
#pragma omp parallel for schedule(static) if (C > 8)
        for (std::int64_t c = 0; c < C; ++c) {
          double inv = 1.0 / std::sqrt((*var_s)[static_cast<size_t>(c)] + eps);
          double k1 = gb[static_cast<size_t>(c)] / static_cast<double>(cnt);
          double k2 = gg[static_cast<size_t>(c)] / static_cast<double>(cnt);
          for (std::int64_t b = 0; b < B; ++b) {
            const double* grow = gp + (b * C + c) * S;
            const double* xrow = xh + (b * C + c) * S;
            double* gxr = gx.data() + (b * C + c) * S;
            for (std::int64_t i = 0; i < S; ++i)
              gxr[i] = gmp[c] * inv * (grow[i] - k1 - xrow[i] * k2);
          }
        }
        t.accumulate(xid, xsh, gx.data(), B * C * S);
      }
      if (need_g) t.accumulate(gid, {C}, gg.data(), C);
      if (need_b) t.accumulate(bid, {C}, gb.data(), C);
    });
  }
  return out;
}

Tensor layer_norm(GradTape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  int r = x.rank();
  std::int64_t d = x.dim(r - 1);
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: scale/shift extent mismatch with feature axis " +
                         std::to_string(d));
  std::int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(static_cast<size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const double* p = x.data();
  double* o = out.mutable_data();
  const double* gm = gamma.data();
  const double* bt = beta.data();
#pragma omp parallel for schedule(static) if (rows > 16 && d > 8)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* xr = p + i * d;
    double m = 0.0;
    for (std::int64_t j = 0; j < d; ++j) m += xr[j];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double dd = xr[j] - m;
      v += dd * dd;
    }
    v /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(v + eps);
    inv_std[static_cast<size_t>(i)] = inv;
    double* xh = xhat.data() + i * d;
    double* orow = o + i * d;
    for (std::int64_t j = 0; j < d; ++j) {
      xh[j] = (xr[j] - m) * inv;
      orow[j] = xh[j] * gm[j] + bt[j];
    }
  }
  bool track = tape && (tape->tracked(x) || tape->tracked(gamma) || tape->tracked(beta));
  if (track) {
    out.set_requires_grad(true);
    bool need_x = tape->tracked(x), need_g = tape->tracked(gamma),
         need_b = tape->tracked(beta);
    auto xhat_s = std::make_shared<std::vector<double>>(std::move(xhat));
    auto inv_s = std::make_shared<std::vector<double>>(std::move(inv_std));
    auto gmbuf = gamma.buffer();
    std::uint64_t xid = x.id(), gid = gamma.id(), bid = beta.id(), oid = out.id();
    Shape xsh = x.shape();
    std::int64_t n = x.numel();
    tape->record(out, [=](GradTape& t) {
      const auto* g = t.grad_ptr(oid);
      const double* gp = g->data();
      const double* xh = xhat_s->data();
      const double* gmp = gmbuf->data();
      if (need_x) {
        std::vector<double> gx(static_cast<size_t>(n));
#pragma omp parallel for schedule(static) if (rows > 16 && d > 8)
        for (std::int64_t i = 0; i < rows; ++i) {
          const double* grow = gp + i * d;
          const double* xrow = xh + i * d;
          double* gxr = gx.data() + i * d;
          double s1 = 0.0, s2 = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            double gj = grow[j] * gmp[j];
            s1 += gj;
            s2 += gj * xrow[j];
          }
          s1 /= static_cast<double>(d);
          s2 /= static_cast<double>(d);
          double inv = (*inv_s)[static_cast<size_t>(i)];
          for (std::int64_t j = 0; j < d; ++j)
            gxr[j] = inv * (grow[j] * gmp[j] - s1 - xrow[j] * s2);
        }
        t.accumulate(xid, xsh, gx.data(), n);
      }
      if (need_g || need_b) {
        std::vector<double> gg(static_cast<size_t>(d), 0.0), gb(static_cast<size_t>(d), 0.0);
        for (std::int64_t i = 0; i < rows; ++i) {
          const double* grow = gp + i * d;
          const double* xrow = xh + i * d;
          for (std::int64_t j = 0; j < d; ++j) {
            gg[static_cast<size_t>(j)] += grow[j] * xrow[j];
            gb[static_cast<size_t>(j)] += grow[j];
          }
        }
        if (need_g) t.accumulate(gid, {d}, gg.data(), d);
        if (need_b) t.accumulate(bid, {d}, gb.data(), d);
      }
    });
  }
  return out;
}

}  // namespace nnbf
