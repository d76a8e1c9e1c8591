#include "advpnml/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>

namespace advpnml {
namespace {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Matrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Matrix<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require(bool cond, const std::string& message) {
  if (!cond) throw DimensionError(message);
}

struct ConvGeometry {
  std::size_t batch, c_in, height, width, c_out, k, pad, out_h, out_w;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

// cols[(c*k + ki)*k + kj, oy*out_w + ox] = padded_input[c, oy + ki, ox + kj]
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * g.out_pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ki) - pad;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kj) - pad;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * g.out_pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ki) - pad;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kj) - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_labels(std::span<const int> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) {
    throw DimensionError("expected " + std::to_string(rows) + " labels, got " + std::to_string(labels.size()));
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw IndexError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// (rows, classes) view of rank-1 or rank-2 logits.
template <typename T>
std::pair<std::size_t, std::size_t> logit_rows(const Tensor<T>& logits) {
  if (logits.rank() == 1) return {1, logits.dim(0)};
  if (logits.rank() == 2) return {logits.dim(0), logits.dim(1)};
  throw DimensionError("logits must be rank 1 or 2, got " + to_string(logits.shape()));
}

template <typename T>
double row_logsumexp(const T* row, std::size_t n) {
  const double m = *std::max_element(row, row + n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(static_cast<double>(row[j]) - m);
  return m + std::log(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var Tape<T>::leaf(Tensor<T> value, std::string name) {
  Var v{static_cast<std::uint32_t>(nodes_.size())};
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  leaves_.push_back({v, std::move(name)});
  return v;
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  Var v{static_cast<std::uint32_t>(nodes_.size())};
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return v;
}

template <typename T>
Var Tape<T>::leaf_ref(const Tensor<T>& value, std::string name) {
  Var v{static_cast<std::uint32_t>(nodes_.size())};
  nodes_.push_back(Node{Tensor<T>{}, {}, {}, true, &value});
  leaves_.push_back({v, std::move(name)});
  return v;
}

template <typename T>
Var Tape<T>::constant_ref(const Tensor<T>& value) {
  Var v{static_cast<std::uint32_t>(nodes_.size())};
  nodes_.push_back(Node{Tensor<T>{}, {}, {}, false, &value});
  return v;
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
  bool needs = false;
  for (Var p : parents) needs = needs || node(p).requires_grad;
  Var v{static_cast<std::uint32_t>(nodes_.size())};
  Node n{std::move(value), std::vector<Var>(parents), needs ? std::move(fn) : BackwardFn{}, needs};
  nodes_.push_back(std::move(n));
  return v;
}

template <typename T>
void Tape<T>::accumulate(Var target, const Tensor<T>& grad) {
  if (!nodes_[target.index].requires_grad) return;
  if (grad.shape() != value(target).shape()) {
    throw DimensionError("gradient shape " + to_string(grad.shape()) + " != value shape " +
                         to_string(value(target).shape()));
  }
  if (!has_grad_[target.index]) {
    grads_[target.index] = grad;
    has_grad_[target.index] = true;
    return;
  }
  auto dst = grads_[target.index].data();
  auto src = grad.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::accumulate(Var target, Tensor<T>&& grad) {
  if (!nodes_[target.index].requires_grad) return;
  if (!has_grad_[target.index] && grad.shape() == value(target).shape()) {
    grads_[target.index] = std::move(grad);
    has_grad_[target.index] = true;
    return;
  }
  accumulate(target, static_cast<const Tensor<T>&>(grad));
}

template <typename T>
GradientMap<T> Tape<T>::backward(Var loss) {
  const Node& root = node(loss);
  if (value(loss).size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + to_string(value(loss).shape()));
  }
  grads_.assign(nodes_.size(), Tensor<T>{});
  has_grad_.assign(nodes_.size(), false);
  if (root.requires_grad) {
    grads_[loss.index] = Tensor<T>(value(loss).shape(), T{1});
    has_grad_[loss.index] = true;
  }
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!has_grad_[i] || !nodes_[i].backward) continue;
    nodes_[i].backward(*this, grads_[i]);
    grads_[i] = Tensor<T>{};  // interior gradients are no longer needed
  }
  GradientMap<T> out;
  for (const LeafInfo& leaf : leaves_) {
    const std::size_t i = leaf.var.index;
    out.insert(leaf.var, leaf.name,
               has_grad_[i] ? std::move(grads_[i]) : Tensor<T>(value(leaf.var).shape(), T{0}));
  }
  grads_.clear();
  has_grad_.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  require(A.rank() == 2 && B.rank() == 2, "matmul expects rank-2 operands");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  require(B.dim(0) == k, "matmul inner extents differ: " + to_string(A.shape()) + " . " + to_string(B.shape()));
  Tensor<T> C({m, n});
  as_matrix(C, m, n).noalias() = as_matrix(A, m, k) * as_matrix(B, k, n);
  return tape.record(std::move(C), {a, b}, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& dC) {
    const auto G = as_matrix(dC, m, n);
    if (t.requires_grad(a)) {
      Tensor<T> dA({m, k});
      as_matrix(dA, m, k).noalias() = G * as_matrix(t.value(b), k, n).transpose();
      t.accumulate(a, std::move(dA));
    }
    if (t.requires_grad(b)) {
      Tensor<T> dB({k, n});
      as_matrix(dB, k, n).noalias() = as_matrix(t.value(a), m, k).transpose() * G;
      t.accumulate(b, std::move(dB));
    }
  });
}

template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& Wt = tape.value(weight);
  const Tensor<T>& Bs = tape.value(bias);
  require(X.rank() == 2 && Wt.rank() == 2 && Bs.rank() == 1, "linear expects x[N x in], w[out x in], b[out]");
  const std::size_t n = X.dim(0), in = X.dim(1), out = Wt.dim(0);
  require(Wt.dim(1) == in && Bs.dim(0) == out,
          "linear shape mismatch: x " + to_string(X.shape()) + ", w " + to_string(Wt.shape()));
  Tensor<T> Y({n, out});
  auto y = as_matrix(Y, n, out);
  y.noalias() = as_matrix(X, n, in) * as_matrix(Wt, out, in).transpose();
  y.rowwise() += as_matrix(Bs, 1, out).row(0);
  return tape.record(std::move(Y), {x, weight, bias},
                     [x, weight, bias, n, in, out](Tape<T>& t, const Tensor<T>& dY) {
                       const auto G = as_matrix(dY, n, out);
                       if (t.requires_grad(x)) {
                         Tensor<T> dX({n, in});
                         as_matrix(dX, n, in).noalias() = G * as_matrix(t.value(weight), out, in);
                         t.accumulate(x, std::move(dX));
                       }
                       if (t.requires_grad(weight)) {
                         Tensor<T> dW({out, in});
                         as_matrix(dW, out, in).noalias() = G.transpose() * as_matrix(t.value(x), n, in);
                         t.accumulate(weight, std::move(dW));
                       }
                       if (t.requires_grad(bias)) {
                         Tensor<T> dB({out});
                         as_matrix(dB, 1, out) = G.colwise().sum();
                         t.accumulate(bias, std::move(dB));
                       }
                     });
}

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernels, Var bias, std::size_t padding) {
  const Tensor<T>& X = tape.value(input);
  const Tensor<T>& K = tape.value(kernels);
  const Tensor<T>& Bs = tape.value(bias);
  require(X.rank() == 3 || X.rank() == 4, "conv2d input must be [C x H x W] or [N x C x H x W]");
  require(K.rank() == 4 && K.dim(2) == K.dim(3), "conv2d kernels must be [C_out x C_in x k x k]");
  const bool batched = X.rank() == 4;
  ConvGeometry g{};
  g.batch = batched ? X.dim(0) : 1;
  g.c_in = X.dim(batched ? 1 : 0);
  g.height = X.dim(batched ? 2 : 1);
  g.width = X.dim(batched ? 3 : 2);
  g.c_out = K.dim(0);
  g.k = K.dim(2);
  g.pad = padding;
  require(K.dim(1) == g.c_in, "conv2d channel mismatch: input " + to_string(X.shape()) + ", kernels " +
                                  to_string(K.shape()));
  require(Bs.rank() == 1 && Bs.dim(0) == g.c_out, "conv2d bias must be [C_out]");
  require(g.k <= g.height + 2 * padding && g.k <= g.width + 2 * padding,
          "conv2d kernel larger than padded input");
  g.out_h = g.height + 2 * padding - g.k + 1;
  g.out_w = g.width + 2 * padding - g.k + 1;

  Shape out_shape = batched ? Shape{g.batch, g.c_out, g.out_h, g.out_w} : Shape{g.c_out, g.out_h, g.out_w};
  Tensor<T> Y(out_shape);
  AlignedVector<T> cols(g.patch() * g.out_pixels());
  const auto kmat = as_matrix(K, g.c_out, g.patch());
  const auto bvec = as_matrix(Bs, g.c_out, 1);
  const std::size_t in_stride = g.c_in * g.height * g.width;
  const std::size_t out_stride = g.c_out * g.out_pixels();
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(X.data().data() + n * in_stride, g, cols.data());
    MatMap<T> y(Y.data().data() + n * out_stride, static_cast<Eigen::Index>(g.c_out),
                static_cast<Eigen::Index>(g.out_pixels()));
    y.noalias() = kmat * ConstMatMap<T>(cols.data(), static_cast<Eigen::Index>(g.patch()),
                                        static_cast<Eigen::Index>(g.out_pixels()));
    y.colwise() += bvec.col(0);
  }

  return tape.record(std::move(Y), {input, kernels, bias},
                     [input, kernels, bias, g, in_stride, out_stride](Tape<T>& t, const Tensor<T>& dY) {
                       const bool want_x = t.requires_grad(input);
                       const bool want_k = t.requires_grad(kernels);
                       const bool want_b = t.requires_grad(bias);
                       const Tensor<T>& Xv = t.value(input);
                       const auto kmat = as_matrix(t.value(kernels), g.c_out, g.patch());
                       Tensor<T> dX = want_x ? Tensor<T>(Xv.shape()) : Tensor<T>{};
                       Tensor<T> dK = want_k ? Tensor<T>(t.value(kernels).shape()) : Tensor<T>{};
                       Tensor<T> dB = want_b ? Tensor<T>(t.value(bias).shape()) : Tensor<T>{};
                       AlignedVector<T> cols(g.patch() * g.out_pixels());
                       const auto P = static_cast<Eigen::Index>(g.patch());
                       const auto Q = static_cast<Eigen::Index>(g.out_pixels());
                       for (std::size_t n = 0; n < g.batch; ++n) {
                         ConstMatMap<T> gy(dY.data().data() + n * out_stride,
                                           static_cast<Eigen::Index>(g.c_out), Q);
                         if (want_k) {
                           im2col(Xv.data().data() + n * in_stride, g, cols.data());
                           as_matrix(dK, g.c_out, g.patch()).noalias() +=
                               gy * ConstMatMap<T>(cols.data(), P, Q).transpose();
                         }
                         if (want_b) as_matrix(dB, g.c_out, 1) += gy.rowwise().sum();
                         if (want_x) {
                           MatMap<T>(cols.data(), P, Q).noalias() = kmat.transpose() * gy;
                           col2im_add(cols.data(), g, dX.data().data() + n * in_stride);
                         }
                       }
                       if (want_x) t.accumulate(input, std::move(dX));
                       if (want_k) t.accumulate(kernels, std::move(dK));
                       if (want_b) t.accumulate(bias, std::move(dB));
                     });
}

template <typename T>
Var maxpool2d(Tape<T>& tape, Var input) {
  const Tensor<T>& X = tape.value(input);
  require(X.rank() == 3 || X.rank() == 4, "maxpool2d input must be [C x H x W] or [N x C x H x W]");
  const std::size_t H = X.dim(X.rank() - 2), W = X.dim(X.rank() - 1);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2d requires even spatial extents, got " + to_string(X.shape()));
  const std::size_t planes = X.size() / (H * W);
  const std::size_t Ho = H / 2, Wo = W / 2;
  Shape out_shape = X.shape();
  out_shape[out_shape.size() - 2] = Ho;
  out_shape[out_shape.size() - 1] = Wo;
  Tensor<T> Y(out_shape);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(Y.size());
  const T* x = X.data().data();
  T* y = Y.data().data();
  std::size_t o = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
        const std::size_t cells[4] = {base + 2 * oy * W + 2 * ox, base + 2 * oy * W + 2 * ox + 1,
                                      base + (2 * oy + 1) * W + 2 * ox, base + (2 * oy + 1) * W + 2 * ox + 1};
        std::size_t best = cells[0];
        for (int c = 1; c < 4; ++c) {
          if (x[cells[c]] > x[best]) best = cells[c];
        }
        y[o] = x[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return tape.record(std::move(Y), {input}, [input, argmax](Tape<T>& t, const Tensor<T>& dY) {
    Tensor<T> dX(t.value(input).shape());
    for (std::size_t i = 0; i < dY.size(); ++i) dX[(*argmax)[i]] += dY[i];
    t.accumulate(input, std::move(dX));
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  Tensor<T> Y = tape.value(input);
  for (T& v : Y.data()) v = v > T{0} ? v : T{0};
  return tape.record(std::move(Y), {input}, [input](Tape<T>& t, const Tensor<T>& dY) {
    Tensor<T> dX = dY;
    const auto x = t.value(input).data();
    auto d = dX.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(x[i] > T{0})) d[i] = T{0};
    }
    t.accumulate(input, std::move(dX));
  });
}

template <typename T>
Var reshape(Tape<T>& tape, Var input, Shape shape) {
  Tensor<T> Y = tape.value(input).reshaped(std::move(shape));
  return tape.record(std::move(Y), {input}, [input](Tape<T>& t, const Tensor<T>& dY) {
    t.accumulate(input, dY.reshaped(t.value(input).shape()));
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var input) {
  const auto x = tape.value(input).data();
  T total{0};
  for (T v : x) total += v;
  return tape.record(Tensor<T>::scalar(total), {input}, [input](Tape<T>& t, const Tensor<T>& dY) {
    t.accumulate(input, Tensor<T>(t.value(input).shape(), dY.item()));
  });
}

template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels, Reduction reduction) {
  const Tensor<T>& L = tape.value(logits);
  const auto [rows, classes] = logit_rows(L);
  check_labels<T>(labels, rows, classes);
  std::vector<int> owned(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = L.data().data() + r * classes;
    total += row_logsumexp(row, classes) - static_cast<double>(row[owned[r]]);
  }
  const double scale = reduction == Reduction::kMean ? 1.0 / static_cast<double>(rows) : 1.0;
  return tape.record(Tensor<T>::scalar(static_cast<T>(total * scale)), {logits},
                     [logits, owned = std::move(owned), rows, classes, scale](Tape<T>& t, const Tensor<T>& dY) {
                       const Tensor<T>& Lv = t.value(logits);
                       Tensor<T> dL(Lv.shape());
                       const double g = static_cast<double>(dY.item()) * scale;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const T* row = Lv.data().data() + r * classes;
                         const double lse = row_logsumexp(row, classes);
                         T* d = dL.data().data() + r * classes;
                         for (std::size_t j = 0; j < classes; ++j) {
                           double p = std::exp(static_cast<double>(row[j]) - lse);
                           if (static_cast<int>(j) == owned[r]) p -= 1.0;
                           d[j] = static_cast<T>(g * p);
                         }
                       }
                       t.accumulate(logits, std::move(dL));
                     });
}

template <typename T>
Var log_softmax(Tape<T>& tape, Var input) {
  const Tensor<T>& X = tape.value(input);
  require(X.rank() == 2, "log_softmax expects [N x C]");
  const std::size_t rows = X.dim(0), classes = X.dim(1);
  Tensor<T> Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = X.data().data() + r * classes;
    const double lse = row_logsumexp(row, classes);
    for (std::size_t j = 0; j < classes; ++j) Y[r * classes + j] = static_cast<T>(row[j] - lse);
  }
  return tape.record(std::move(Y), {input}, [input, rows, classes](Tape<T>& t, const Tensor<T>& dY) {
    const Tensor<T>& Xv = t.value(input);
    Tensor<T> dX(Xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = Xv.data().data() + r * classes;
      const double lse = row_logsumexp(row, classes);
      double gsum = 0.0;
      for (std::size_t j = 0; j < classes; ++j) gsum += dY[r * classes + j];
      for (std::size_t j = 0; j < classes; ++j) {
        const std::size_t i = r * classes + j;
        dX[i] = static_cast<T>(dY[i] - std::exp(static_cast<double>(row[j]) - lse) * gsum);
      }
    }
    t.accumulate(input, std::move(dX));
  });
}

template <typename T>
Var pick(Tape<T>& tape, Var input, std::span<const int> columns) {
  const Tensor<T>& X = tape.value(input);
  require(X.rank() == 2, "pick expects [M x C]");
  const std::size_t rows = X.dim(0), classes = X.dim(1);
  check_labels<T>(columns, rows, classes);
  std::vector<int> owned(columns.begin(), columns.end());
  Tensor<T> Y({rows});
  for (std::size_t r = 0; r < rows; ++r) Y[r] = X[r * classes + owned[r]];
  return tape.record(std::move(Y), {input}, [input, owned = std::move(owned), classes](Tape<T>& t, const Tensor<T>& dY) {
    Tensor<T> dX(t.value(input).shape());
    for (std::size_t r = 0; r < owned.size(); ++r) dX[r * classes + owned[r]] = dY[r];
    t.accumulate(input, std::move(dX));
  });
}

template <typename T>
Var gather_rows(Tape<T>& tape, Var input, std::span<const std::size_t> rows) {
  const Tensor<T>& X = tape.value(input);
  require(X.rank() >= 1 && !rows.empty(), "gather_rows expects a non-empty row list");
  const std::size_t width = X.size() / X.dim(0);
  Shape shape = X.shape();
  shape[0] = rows.size();
  std::vector<T> data(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= X.dim(0)) throw IndexError("gather_rows index " + std::to_string(rows[r]) + " out of range");
    std::copy_n(X.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                data.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  std::vector<std::size_t> owned(rows.begin(), rows.end());
  return tape.record(Tensor<T>(std::move(shape), std::move(data)), {input},
                     [input, owned = std::move(owned), width](Tape<T>& t, const Tensor<T>& dY) {
                       Tensor<T> dX(t.value(input).shape());
                       for (std::size_t r = 0; r < owned.size(); ++r) {
                         for (std::size_t j = 0; j < width; ++j) dX[owned[r] * width + j] += dY[r * width + j];
                       }
                       t.accumulate(input, std::move(dX));
                     });
}

template <typename T>
Var straight_through(Tape<T>& tape, Var input, Tensor<T> forward) {
  require(forward.shape() == tape.value(input).shape(), "straight_through: forward value shape mismatch");
  return tape.record(std::move(forward), {input},
                     [input](Tape<T>& t, const Tensor<T>& dY) { t.accumulate(input, dY); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const auto [rows, classes] = logit_rows(logits);
  Tensor<T> out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.data().data() + r * classes;
    const double lse = row_logsumexp(row, classes);
    for (std::size_t j = 0; j < classes; ++j) out[r * classes + j] = static_cast<T>(std::exp(row[j] - lse));
  }
  return out;
}

template <typename T>
std::vector<double> cross_entropy_per_row(const Tensor<T>& logits, std::span<const int> labels) {
  const auto [rows, classes] = logit_rows(logits);
  check_labels<T>(labels, rows, classes);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.data().data() + r * classes;
    out[r] = row_logsumexp(row, classes) - static_cast<double>(row[labels[r]]);
  }
  return out;
}

#define ADVPNML_INSTANTIATE(T)                                                                    \
  template class Tape<T>;                                                                         \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                     \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                                \
  template Var conv2d<T>(Tape<T>&, Var, Var, Var, std::size_t);                                   \
  template Var maxpool2d<T>(Tape<T>&, Var);                                                       \
  template Var relu<T>(Tape<T>&, Var);                                                            \
  template Var reshape<T>(Tape<T>&, Var, Shape);                                                  \
  template Var sum<T>(Tape<T>&, Var);                                                             \
  template Var softmax_cross_entropy<T>(Tape<T>&, Var, std::span<const int>, Reduction);          \
  template Var log_softmax<T>(Tape<T>&, Var);                                                     \
  template Var pick<T>(Tape<T>&, Var, std::span<const int>);                                      \
  template Var straight_through<T>(Tape<T>&, Var, Tensor<T>);                                     \
  template Var gather_rows<T>(Tape<T>&, Var, std::span<const std::size_t>);                        \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                \
  template std::vector<double> cross_entropy_per_row<T>(const Tensor<T>&, std::span<const int>);

ADVPNML_INSTANTIATE(float)
ADVPNML_INSTANTIATE(double)

#undef ADVPNML_INSTANTIATE

}  // namespace advpnml
