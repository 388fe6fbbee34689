#include "hsi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

namespace hsi {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

void ActivationSpec::validate() const {
  if (!(selu_alpha > 0)) throw ValidationError("activation: selu_alpha must be positive");
  if (!(selu_lambda > 1)) throw ValidationError("activation: selu_lambda must exceed 1");
}

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
NodePtr<T> make_node(Shape shape, std::vector<T> values, const char* op,
                     std::vector<NodePtr<T>> parents) {
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->op = op;
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  return n;
}

// Valid output range [lo, hi) so that lo*stride + offset lands in [0, extent).
inline void conv_range(int64_t offset, int64_t extent, int64_t stride, int64_t out_extent,
                       int64_t& lo, int64_t& hi) {
  lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  int64_t last = extent - 1 - offset;
  hi = last < 0 ? lo : std::min(out_extent - 1, last / stride) + 1;
  if (hi < lo) hi = lo;
}

}  // namespace

// --- Tensor handle -------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  int64_t n = numel(shape);
  require(n > 0, "tensor: shape must have positive volume");
  auto node = make_node<T>(std::move(shape), std::vector<T>(static_cast<size_t>(n), value),
                           "leaf", {});
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  require(numel(shape) == static_cast<int64_t>(values.size()),
          "tensor: value count does not match shape");
  auto node = make_node<T>(std::move(shape), std::move(values), "leaf", {});
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
T Tensor<T>::item() const {
  if (!node_ || node_->values.size() != 1)
    throw RuntimeError("tensor: item() requires a single-element tensor");
  return node_->values[0];
}

template <typename T>
void Tensor<T>::backward() const {
  if (!node_) throw ValidationError("tensor: backward on undefined tensor");
  if (node_->values.size() != 1)
    throw ValidationError("tensor: backward starts from a scalar");
  if (!node_->requires_grad) return;

  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  struct Frame {
    detail::Node<T>* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  seen.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      detail::Node<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// --- convolutions --------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride, int pad) {
  require(x.defined() && kernel.defined() && bias.defined(), "conv2d: undefined operand");
  require(x.shape().size() == 4, "conv2d: input must be N x C x h x w");
  require(kernel.shape().size() == 4, "conv2d: kernel must be O x C x kh x kw");
  require(bias.shape().size() == 1, "conv2d: bias must be 1-d");
  require(stride >= 1, "conv2d: stride must be at least 1");
  require(pad >= 0, "conv2d: pad must be non-negative");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
  require(kernel.dim(1) == C, "conv2d: kernel channels do not match input");
  require(bias.dim(0) == O, "conv2d: bias length does not match kernel count");
  const int64_t OH = (H + 2 * pad - KH) / stride + 1;
  const int64_t OW = (W + 2 * pad - KW) / stride + 1;
  require(H + 2 * pad >= KH && W + 2 * pad >= KW, "conv2d: kernel larger than padded input");

  std::vector<T> out(static_cast<size_t>(N * O * OH * OW));
  const T* xp = x.values().data();
  const T* kp = kernel.values().data();
  const T* bp = bias.values().data();
  const int64_t s = stride, p = pad;

  parallel_for(N * O, [&](int64_t idx) {
    const int64_t n = idx / O, o = idx % O;
    T* op = out.data() + idx * OH * OW;
    std::fill(op, op + OH * OW, bp[o]);
    for (int64_t c = 0; c < C; ++c) {
      const T* in_plane = xp + (n * C + c) * H * W;
      const T* kplane = kp + (o * C + c) * KH * KW;
      for (int64_t ky = 0; ky < KH; ++ky)
        for (int64_t kx = 0; kx < KW; ++kx) {
          const T wv = kplane[ky * KW + kx];
          int64_t ylo, yhi, xlo, xhi;
          conv_range(ky - p, H, s, OH, ylo, yhi);
          conv_range(kx - p, W, s, OW, xlo, xhi);
          for (int64_t oy = ylo; oy < yhi; ++oy) {
            const T* irow = in_plane + (oy * s + ky - p) * W + (kx - p);
            T* orow = op + oy * OW;
            for (int64_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * irow[ox * s];
          }
        }
    }
  });

  auto node = make_node<T>({N, O, OH, OW}, std::move(out), "conv2d",
                           {x.handle(), kernel.handle(), bias.handle()});
  if (node->requires_grad) {
    node->backward_fn = [N, C, H, W, O, KH, KW, OH, OW, s, p](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& kn = *self.parents[1];
      auto& bn = *self.parents[2];
      const T* go = self.grad.data();
      if (xn.requires_grad) {
        xn.ensure_grad();
        T* gx = xn.grad.data();
        const T* kp = kn.values.data();
        parallel_for(N * C, [&](int64_t idx) {
          const int64_t n = idx / C, c = idx % C;
          T* gplane = gx + idx * H * W;
          for (int64_t o = 0; o < O; ++o) {
            const T* gop = go + (n * O + o) * OH * OW;
            const T* kplane = kp + (o * C + c) * KH * KW;
            for (int64_t ky = 0; ky < KH; ++ky)
              for (int64_t kx = 0; kx < KW; ++kx) {
                const T wv = kplane[ky * KW + kx];
                int64_t ylo, yhi, xlo, xhi;
                conv_range(ky - p, H, s, OH, ylo, yhi);
                conv_range(kx - p, W, s, OW, xlo, xhi);
                for (int64_t oy = ylo; oy < yhi; ++oy) {
                  T* grow = gplane + (oy * s + ky - p) * W + (kx - p);
                  const T* gorow = gop + oy * OW;
                  for (int64_t ox = xlo; ox < xhi; ++ox) grow[ox * s] += wv * gorow[ox];
                }
              }
          }
        });
      }
      if (kn.requires_grad) {
        kn.ensure_grad();
        T* gk = kn.grad.data();
        const T* xp = xn.values.data();
        parallel_for(O * C, [&](int64_t idx) {
          const int64_t o = idx / C, c = idx % C;
          for (int64_t ky = 0; ky < KH; ++ky)
            for (int64_t kx = 0; kx < KW; ++kx) {
              int64_t ylo, yhi, xlo, xhi;
              conv_range(ky - p, H, s, OH, ylo, yhi);
              conv_range(kx - p, W, s, OW, xlo, xhi);
              T acc = 0;
              for (int64_t n = 0; n < N; ++n) {
                const T* in_plane = xp + (n * C + c) * H * W;
                const T* gop = go + (n * O + o) * OH * OW;
                for (int64_t oy = ylo; oy < yhi; ++oy) {
                  const T* irow = in_plane + (oy * s + ky - p) * W + (kx - p);
                  const T* gorow = gop + oy * OW;
                  for (int64_t ox = xlo; ox < xhi; ++ox) acc += irow[ox * s] * gorow[ox];
                }
              }
              gk[idx * KH * KW + ky * KW + kx] += acc;
            }
        });
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        T* gb = bn.grad.data();
        parallel_for(O, [&](int64_t o) {
          T acc = 0;
          for (int64_t n = 0; n < N; ++n) {
            const T* gop = go + (n * O + o) * OH * OW;
            for (int64_t i = 0; i < OH * OW; ++i) acc += gop[i];
          }
          gb[o] += acc;
        });
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                           const Tensor<T>& bias, int stride, int pad) {
  require(x.defined() && kernel.defined() && bias.defined(),
          "depthwise_conv2d: undefined operand");
  require(x.shape().size() == 4, "depthwise_conv2d: input must be N x C x h x w");
  require(kernel.shape().size() == 3, "depthwise_conv2d: kernel must be C x kh x kw");
  require(bias.shape().size() == 1, "depthwise_conv2d: bias must be 1-d");
  require(stride >= 1, "depthwise_conv2d: stride must be at least 1");
  require(pad >= 0, "depthwise_conv2d: pad must be non-negative");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t KH = kernel.dim(1), KW = kernel.dim(2);
  require(kernel.dim(0) == C, "depthwise_conv2d: kernel channels do not match input");
  require(bias.dim(0) == C, "depthwise_conv2d: bias length does not match channels");
  const int64_t OH = (H + 2 * pad - KH) / stride + 1;
  const int64_t OW = (W + 2 * pad - KW) / stride + 1;
  require(H + 2 * pad >= KH && W + 2 * pad >= KW,
          "depthwise_conv2d: kernel larger than padded input");

  std::vector<T> out(static_cast<size_t>(N * C * OH * OW));
  const T* xp = x.values().data();
  const T* kp = kernel.values().data();
  const T* bp = bias.values().data();
  const int64_t s = stride, p = pad;

  parallel_for(N * C, [&](int64_t idx) {
    const int64_t c = idx % C;
    T* op = out.data() + idx * OH * OW;
    std::fill(op, op + OH * OW, bp[c]);
    const T* in_plane = xp + idx * H * W;
    const T* kplane = kp + c * KH * KW;
    for (int64_t ky = 0; ky < KH; ++ky)
      for (int64_t kx = 0; kx < KW; ++kx) {
        const T wv = kplane[ky * KW + kx];
        int64_t ylo, yhi, xlo, xhi;
        conv_range(ky - p, H, s, OH, ylo, yhi);
        conv_range(kx - p, W, s, OW, xlo, xhi);
        for (int64_t oy = ylo; oy < yhi; ++oy) {
          const T* irow = in_plane + (oy * s + ky - p) * W + (kx - p);
          T* orow = op + oy * OW;
          for (int64_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * irow[ox * s];
        }
      }
  });

  auto node = make_node<T>({N, C, OH, OW}, std::move(out), "depthwise_conv2d",
                           {x.handle(), kernel.handle(), bias.handle()});
  if (node->requires_grad) {
    node->backward_fn = [N, C, H, W, KH, KW, OH, OW, s, p](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& kn = *self.parents[1];
      auto& bn = *self.parents[2];
      const T* go = self.grad.data();
      if (xn.requires_grad) {
        xn.ensure_grad();
        T* gx = xn.grad.data();
        const T* kp = kn.values.data();
        parallel_for(N * C, [&](int64_t idx) {
          const int64_t c = idx % C;
          T* gplane = gx + idx * H * W;
          const T* gop = go + idx * OH * OW;
          const T* kplane = kp + c * KH * KW;
          for (int64_t ky = 0; ky < KH; ++ky)
            for (int64_t kx = 0; kx < KW; ++kx) {
              const T wv = kplane[ky * KW + kx];
              int64_t ylo, yhi, xlo, xhi;
              conv_range(ky - p, H, s, OH, ylo, yhi);
              conv_range(kx - p, W, s, OW, xlo, xhi);
              for (int64_t oy = ylo; oy < yhi; ++oy) {
                T* grow = gplane + (oy * s + ky - p) * W + (kx - p);
                const T* gorow = gop + oy * OW;
                for (int64_t ox = xlo; ox < xhi; ++ox) grow[ox * s] += wv * gorow[ox];
              }
            }
        });
      }
      if (kn.requires_grad) {
        kn.ensure_grad();
        T* gk = kn.grad.data();
        const T* xp = xn.values.data();
        parallel_for(C, [&](int64_t c) {
          for (int64_t ky = 0; ky < KH; ++ky)
            for (int64_t kx = 0; kx < KW; ++kx) {
              int64_t ylo, yhi, xlo, xhi;
              conv_range(ky - p, H, s, OH, ylo, yhi);
              conv_range(kx - p, W, s, OW, xlo, xhi);
              T acc = 0;
              for (int64_t n = 0; n < N; ++n) {
                const T* in_plane = xp + (n * C + c) * H * W;
                const T* gop = go + (n * C + c) * OH * OW;
                for (int64_t oy = ylo; oy < yhi; ++oy) {
                  const T* irow = in_plane + (oy * s + ky - p) * W + (kx - p);
                  const T* gorow = gop + oy * OW;
                  for (int64_t ox = xlo; ox < xhi; ++ox) acc += irow[ox * s] * gorow[ox];
                }
              }
              gk[c * KH * KW + ky * KW + kx] += acc;
            }
        });
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        T* gb = bn.grad.data();
        parallel_for(C, [&](int64_t c) {
          T acc = 0;
          for (int64_t n = 0; n < N; ++n) {
            const T* gop = go + (n * C + c) * OH * OW;
            for (int64_t i = 0; i < OH * OW; ++i) acc += gop[i];
          }
          gb[c] += acc;
        });
      }
    };
  }
  return Tensor<T>(std::move(node));
}

// --- normalization -------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps) {
  require(x.defined() && gain.defined() && bias.defined(), "layer_norm: undefined operand");
  require(x.shape().size() == 4, "layer_norm: input must be N x C x h x w");
  require(eps > 0, "layer_norm: eps must be positive");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gain.shape().size() == 1 && gain.dim(0) == C, "layer_norm: gain length mismatch");
  require(bias.shape().size() == 1 && bias.dim(0) == C, "layer_norm: bias length mismatch");

  const int64_t P = N * H * W, HW = H * W;
  auto xhat = std::make_shared<std::vector<T>>(x.values().size());
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(P));
  std::vector<T> out(x.values().size());
  const T* xp = x.values().data();
  const T* gp = gain.values().data();
  const T* bp = bias.values().data();
  const T e = static_cast<T>(eps);

  parallel_for(P, [&](int64_t pi) {
    const int64_t n = pi / HW, rem = pi % HW;
    const int64_t base = n * C * HW + rem;
    T mean = 0;
    for (int64_t c = 0; c < C; ++c) mean += xp[base + c * HW];
    mean /= static_cast<T>(C);
    T var = 0;
    for (int64_t c = 0; c < C; ++c) {
      const T d = xp[base + c * HW] - mean;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T is = T(1) / std::sqrt(var + e);
    (*invstd)[pi] = is;
    for (int64_t c = 0; c < C; ++c) {
      const T xh = (xp[base + c * HW] - mean) * is;
      (*xhat)[base + c * HW] = xh;
      out[base + c * HW] = gp[c] * xh + bp[c];
    }
  });

  auto node = make_node<T>(x.shape(), std::move(out), "layer_norm",
                           {x.handle(), gain.handle(), bias.handle()});
  if (node->requires_grad) {
    node->backward_fn = [N, C, HW, P, xhat, invstd](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& gn = *self.parents[1];
      auto& bn = *self.parents[2];
      const T* go = self.grad.data();
      const T* gp = gn.values.data();
      const T* xh = xhat->data();
      if (xn.requires_grad) {
        xn.ensure_grad();
        T* gx = xn.grad.data();
        parallel_for(P, [&](int64_t pi) {
          const int64_t n = pi / HW, rem = pi % HW;
          const int64_t base = n * C * HW + rem;
          T s1 = 0, s2 = 0;
          for (int64_t c = 0; c < C; ++c) {
            const T u = gp[c] * go[base + c * HW];
            s1 += u;
            s2 += u * xh[base + c * HW];
          }
          s1 /= static_cast<T>(C);
          s2 /= static_cast<T>(C);
          const T is = (*invstd)[pi];
          for (int64_t c = 0; c < C; ++c) {
            const T u = gp[c] * go[base + c * HW];
            gx[base + c * HW] += is * (u - s1 - xh[base + c * HW] * s2);
          }
        });
      }
      if (gn.requires_grad || bn.requires_grad) {
        if (gn.requires_grad) gn.ensure_grad();
        if (bn.requires_grad) bn.ensure_grad();
        parallel_for(C, [&](int64_t c) {
          T sg = 0, sb = 0;
          for (int64_t n = 0; n < N; ++n) {
            const int64_t off = (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
              sg += go[off + i] * xh[off + i];
              sb += go[off + i];
            }
          }
          if (gn.requires_grad) gn.grad[c] += sg;
          if (bn.requires_grad) bn.grad[c] += sb;
        });
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     BatchNormState<T>& state, bool training, double momentum,
                     double eps) {
  require(x.defined() && gain.defined() && bias.defined(), "batch_norm: undefined operand");
  require(x.shape().size() == 4, "batch_norm: input must be N x C x h x w");
  require(eps > 0, "batch_norm: eps must be positive");
  require(momentum > 0 && momentum <= 1, "batch_norm: momentum must lie in (0, 1]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gain.shape().size() == 1 && gain.dim(0) == C, "batch_norm: gain length mismatch");
  require(bias.shape().size() == 1 && bias.dim(0) == C, "batch_norm: bias length mismatch");
  if (!training && !state.initialized)
    throw RuntimeError("batch_norm: eval mode before any training step initialized stats");

  const int64_t HW = H * W, NE = N * HW;
  auto xhat = std::make_shared<std::vector<T>>(x.values().size());
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  std::vector<T> out(x.values().size());
  const T* xp = x.values().data();
  const T* gp = gain.values().data();
  const T* bp = bias.values().data();
  const T e = static_cast<T>(eps);

  std::vector<T> batch_mean(static_cast<size_t>(C)), batch_var(static_cast<size_t>(C));
  if (training) {
    parallel_for(C, [&](int64_t c) {
      T mean = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* plane = xp + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) mean += plane[i];
      }
      mean /= static_cast<T>(NE);
      T var = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* plane = xp + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const T d = plane[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<T>(NE);
      batch_mean[c] = mean;
      batch_var[c] = var;
    });
    if (!state.initialized) {
      state.mean = batch_mean;
      state.var = batch_var;
      state.initialized = true;
    } else {
      require(static_cast<int64_t>(state.mean.size()) == C,
              "batch_norm: stored stats channel count mismatch");
      const T m = static_cast<T>(momentum);
      for (int64_t c = 0; c < C; ++c) {
        state.mean[c] = (T(1) - m) * state.mean[c] + m * batch_mean[c];
        state.var[c] = (T(1) - m) * state.var[c] + m * batch_var[c];
      }
    }
  } else {
    require(static_cast<int64_t>(state.mean.size()) == C,
            "batch_norm: stored stats channel count mismatch");
    batch_mean = state.mean;
    batch_var = state.var;
  }

  parallel_for(C, [&](int64_t c) {
    const T is = T(1) / std::sqrt(batch_var[c] + e);
    (*invstd)[c] = is;
    const T mu = batch_mean[c], g = gp[c], b = bp[c];
    for (int64_t n = 0; n < N; ++n) {
      const int64_t off = (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        const T xh = (xp[off + i] - mu) * is;
        (*xhat)[off + i] = xh;
        out[off + i] = g * xh + b;
      }
    }
  });

  auto node = make_node<T>(x.shape(), std::move(out), "batch_norm",
                           {x.handle(), gain.handle(), bias.handle()});
  if (node->requires_grad) {
    node->backward_fn = [N, C, HW, NE, xhat, invstd, training](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& gn = *self.parents[1];
      auto& bn = *self.parents[2];
      const T* go = self.grad.data();
      const T* gp = gn.values.data();
      const T* xh = xhat->data();
      if (xn.requires_grad) {
        xn.ensure_grad();
        T* gx = xn.grad.data();
        parallel_for(C, [&](int64_t c) {
          const T gi = gp[c] * (*invstd)[c];
          if (training) {
            T sgo = 0, sgx = 0;
            for (int64_t n = 0; n < N; ++n) {
              const int64_t off = (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                sgo += go[off + i];
                sgx += go[off + i] * xh[off + i];
              }
            }
            sgo /= static_cast<T>(NE);
            sgx /= static_cast<T>(NE);
            for (int64_t n = 0; n < N; ++n) {
              const int64_t off = (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i)
                gx[off + i] += gi * (go[off + i] - sgo - xh[off + i] * sgx);
            }
          } else {
            for (int64_t n = 0; n < N; ++n) {
              const int64_t off = (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) gx[off + i] += gi * go[off + i];
            }
          }
        });
      }
      if (gn.requires_grad || bn.requires_grad) {
        if (gn.requires_grad) gn.ensure_grad();
        if (bn.requires_grad) bn.ensure_grad();
        parallel_for(C, [&](int64_t c) {
          T sg = 0, sb = 0;
          for (int64_t n = 0; n < N; ++n) {
            const int64_t off = (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
              sg += go[off + i] * xh[off + i];
              sb += go[off + i];
            }
          }
          if (gn.requires_grad) gn.grad[c] += sg;
          if (bn.requires_grad) bn.grad[c] += sb;
        });
      }
    };
  }
  return Tensor<T>(std::move(node));
}

// --- activations and dropout --------------------------------------------

template <typename T>
Tensor<T> activate(const Tensor<T>& x, const ActivationSpec& spec) {
  require(x.defined(), "activate: undefined operand");
  spec.validate();
  const int64_t n = x.size();
  std::vector<T> out(static_cast<size_t>(n));
  const T* xp = x.values().data();
  const T al = static_cast<T>(spec.selu_alpha);
  const T lam = static_cast<T>(spec.selu_lambda);
  const Activation kind = spec.kind;

  parallel_for(n, [&](int64_t i) {
    const T v = xp[i];
    switch (kind) {
      case Activation::Selu:
        out[i] = v > 0 ? lam * v : lam * al * (std::exp(v) - T(1));
        break;
      case Activation::Silu:
        out[i] = v / (T(1) + std::exp(-v));
        break;
      case Activation::Gelu:
        out[i] = T(0.5) * v * (T(1) + std::erf(v * static_cast<T>(M_SQRT1_2)));
        break;
    }
  });

  auto node = make_node<T>(x.shape(), std::move(out), "activate", {x.handle()});
  if (node->requires_grad) {
    node->backward_fn = [n, kind, al, lam](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      if (!xn.requires_grad) return;
      xn.ensure_grad();
      const T* go = self.grad.data();
      const T* xp = xn.values.data();
      T* gx = xn.grad.data();
      parallel_for(n, [&](int64_t i) {
        const T v = xp[i];
        T d = 0;
        switch (kind) {
          case Activation::Selu:
            d = v >= 0 ? lam : lam * al * std::exp(v);
            break;
          case Activation::Silu: {
            const T sg = T(1) / (T(1) + std::exp(-v));
            d = sg * (T(1) + v * (T(1) - sg));
            break;
          }
          case Activation::Gelu: {
            const T phi = std::exp(T(-0.5) * v * v) /
                          static_cast<T>(2.5066282746310005024);
            const T Phi = T(0.5) * (T(1) + std::erf(v * static_cast<T>(M_SQRT1_2)));
            d = Phi + v * phi;
            break;
          }
        }
        gx[i] += d * go[i];
      });
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  require(x.defined(), "dropout: undefined operand");
  require(p >= 0 && p < 1, "dropout: p must lie in [0, 1)");
  if (!training || p == 0) return x;
  const int64_t n = x.size();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto factor = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    (*factor)[i] = rng.next_double() < p ? T(0) : keep_scale;

  std::vector<T> out(static_cast<size_t>(n));
  const T* xp = x.values().data();
  parallel_for(n, [&](int64_t i) { out[i] = xp[i] * (*factor)[i]; });

  auto node = make_node<T>(x.shape(), std::move(out), "dropout", {x.handle()});
  if (node->requires_grad) {
    node->backward_fn = [n, factor](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      if (!xn.requires_grad) return;
      xn.ensure_grad();
      const T* go = self.grad.data();
      T* gx = xn.grad.data();
      parallel_for(n, [&](int64_t i) { gx[i] += go[i] * (*factor)[i]; });
    };
  }
  return Tensor<T>(std::move(node));
}

// --- elementwise and reductions ------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined(), "add: undefined operand");
  require(a.shape() == b.shape(), "add: shapes differ");
  const int64_t n = a.size();
  std::vector<T> out(static_cast<size_t>(n));
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  parallel_for(n, [&](int64_t i) { out[i] = ap[i] + bp[i]; });
  auto node = make_node<T>(a.shape(), std::move(out), "add", {a.handle(), b.handle()});
  if (node->requires_grad) {
    node->backward_fn = [n](detail::Node<T>& self) {
      const T* go = self.grad.data();
      for (auto& pn : self.parents) {
        if (!pn->requires_grad) continue;
        pn->ensure_grad();
        T* g = pn->grad.data();
        parallel_for(n, [&](int64_t i) { g[i] += go[i]; });
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined(), "mul: undefined operand");
  require(a.shape() == b.shape(), "mul: shapes differ");
  const int64_t n = a.size();
  std::vector<T> out(static_cast<size_t>(n));
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  parallel_for(n, [&](int64_t i) { out[i] = ap[i] * bp[i]; });
  auto node = make_node<T>(a.shape(), std::move(out), "mul", {a.handle(), b.handle()});
  if (node->requires_grad) {
    node->backward_fn = [n](detail::Node<T>& self) {
      const T* go = self.grad.data();
      auto& an = *self.parents[0];
      auto& bn = *self.parents[1];
      if (an.requires_grad) {
        an.ensure_grad();
        T* g = an.grad.data();
        const T* other = bn.values.data();
        parallel_for(n, [&](int64_t i) { g[i] += go[i] * other[i]; });
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        T* g = bn.grad.data();
        const T* other = an.values.data();
        parallel_for(n, [&](int64_t i) { g[i] += go[i] * other[i]; });
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  require(a.defined(), "scale: undefined operand");
  const int64_t n = a.size();
  std::vector<T> out(static_cast<size_t>(n));
  const T* ap = a.values().data();
  parallel_for(n, [&](int64_t i) { out[i] = ap[i] * factor; });
  auto node = make_node<T>(a.shape(), std::move(out), "scale", {a.handle()});
  if (node->requires_grad) {
    node->backward_fn = [n, factor](detail::Node<T>& self) {
      auto& an = *self.parents[0];
      if (!an.requires_grad) return;
      an.ensure_grad();
      const T* go = self.grad.data();
      T* g = an.grad.data();
      parallel_for(n, [&](int64_t i) { g[i] += go[i] * factor; });
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  require(a.defined(), "sum: undefined operand");
  const int64_t n = a.size();
  const T* ap = a.values().data();
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += ap[i];
  auto node = make_node<T>({1}, std::vector<T>{acc}, "sum", {a.handle()});
  if (node->requires_grad) {
    node->backward_fn = [n](detail::Node<T>& self) {
      auto& an = *self.parents[0];
      if (!an.requires_grad) return;
      an.ensure_grad();
      const T go = self.grad[0];
      T* g = an.grad.data();
      parallel_for(n, [&](int64_t i) { g[i] += go; });
    };
  }
  return Tensor<T>(std::move(node));
}

// --- squeeze-excite building blocks --------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require(x.defined(), "global_avg_pool: undefined operand");
  require(x.shape().size() == 4, "global_avg_pool: input must be N x C x h x w");
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> out(static_cast<size_t>(N * C));
  const T* xp = x.values().data();
  parallel_for(N * C, [&](int64_t idx) {
    T acc = 0;
    const T* plane = xp + idx * HW;
    for (int64_t i = 0; i < HW; ++i) acc += plane[i];
    out[idx] = acc / static_cast<T>(HW);
  });
  auto node = make_node<T>({N, C}, std::move(out), "global_avg_pool", {x.handle()});
  if (node->requires_grad) {
    node->backward_fn = [N, C, HW](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      if (!xn.requires_grad) return;
      xn.ensure_grad();
      const T* go = self.grad.data();
      T* gx = xn.grad.data();
      parallel_for(N * C, [&](int64_t idx) {
        const T g = go[idx] / static_cast<T>(HW);
        T* plane = gx + idx * HW;
        for (int64_t i = 0; i < HW; ++i) plane[i] += g;
      });
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.defined() && weight.defined() && bias.defined(), "linear: undefined operand");
  require(x.shape().size() == 2, "linear: input must be N x C_in");
  require(weight.shape().size() == 2, "linear: weight must be C_out x C_in");
  require(bias.shape().size() == 1, "linear: bias must be 1-d");
  const int64_t N = x.dim(0), I = x.dim(1), O = weight.dim(0);
  require(weight.dim(1) == I, "linear: weight columns do not match input");
  require(bias.dim(0) == O, "linear: bias length does not match weight rows");
  std::vector<T> out(static_cast<size_t>(N * O));
  const T* xp = x.values().data();
  const T* wp = weight.values().data();
  const T* bp = bias.values().data();
  parallel_for(N, [&](int64_t n) {
    const T* row = xp + n * I;
    for (int64_t o = 0; o < O; ++o) {
      T acc = bp[o];
      const T* wrow = wp + o * I;
      for (int64_t i = 0; i < I; ++i) acc += row[i] * wrow[i];
      out[n * O + o] = acc;
    }
  });
  auto node = make_node<T>({N, O}, std::move(out), "linear",
                           {x.handle(), weight.handle(), bias.handle()});
  if (node->requires_grad) {
    node->backward_fn = [N, I, O](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& wn = *self.parents[1];
      auto& bn = *self.parents[2];
      const T* go = self.grad.data();
      if (xn.requires_grad) {
        xn.ensure_grad();
        T* gx = xn.grad.data();
        const T* wp = wn.values.data();
        parallel_for(N, [&](int64_t n) {
          for (int64_t o = 0; o < O; ++o) {
            const T g = go[n * O + o];
            const T* wrow = wp + o * I;
            T* grow = gx + n * I;
            for (int64_t i = 0; i < I; ++i) grow[i] += g * wrow[i];
          }
        });
      }
      if (wn.requires_grad) {
        wn.ensure_grad();
        T* gw = wn.grad.data();
        const T* xp = xn.values.data();
        parallel_for(O, [&](int64_t o) {
          for (int64_t n = 0; n < N; ++n) {
            const T g = go[n * O + o];
            const T* row = xp + n * I;
            T* grow = gw + o * I;
            for (int64_t i = 0; i < I; ++i) grow[i] += g * row[i];
          }
        });
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        T* gb = bn.grad.data();
        parallel_for(O, [&](int64_t o) {
          T acc = 0;
          for (int64_t n = 0; n < N; ++n) acc += go[n * O + o];
          gb[o] += acc;
        });
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  require(x.defined(), "sigmoid: undefined operand");
  const int64_t n = x.size();
  auto sv = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const T* xp = x.values().data();
  parallel_for(n, [&](int64_t i) { (*sv)[i] = T(1) / (T(1) + std::exp(-xp[i])); });
  auto node = make_node<T>(x.shape(), std::vector<T>(*sv), "sigmoid", {x.handle()});
  if (node->requires_grad) {
    node->backward_fn = [n, sv](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      if (!xn.requires_grad) return;
      xn.ensure_grad();
      const T* go = self.grad.data();
      T* gx = xn.grad.data();
      parallel_for(n, [&](int64_t i) {
        const T s = (*sv)[i];
        gx[i] += go[i] * s * (T(1) - s);
      });
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s) {
  require(x.defined() && s.defined(), "channel_scale: undefined operand");
  require(x.shape().size() == 4, "channel_scale: input must be N x C x h x w");
  require(s.shape().size() == 2, "channel_scale: scales must be N x C");
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(s.dim(0) == N && s.dim(1) == C, "channel_scale: scale dims do not match input");
  std::vector<T> out(x.values().size());
  const T* xp = x.values().data();
  const T* sp = s.values().data();
  parallel_for(N * C, [&](int64_t idx) {
    const T f = sp[idx];
    const T* plane = xp + idx * HW;
    T* op = out.data() + idx * HW;
    for (int64_t i = 0; i < HW; ++i) op[i] = plane[i] * f;
  });
  auto node = make_node<T>(x.shape(), std::move(out), "channel_scale",
                           {x.handle(), s.handle()});
  if (node->requires_grad) {
    node->backward_fn = [N, C, HW](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& sn = *self.parents[1];
      const T* go = self.grad.data();
      if (xn.requires_grad) {
        xn.ensure_grad();
        T* gx = xn.grad.data();
        const T* sp = sn.values.data();
        parallel_for(N * C, [&](int64_t idx) {
          const T f = sp[idx];
          const T* gop = go + idx * HW;
          T* plane = gx + idx * HW;
          for (int64_t i = 0; i < HW; ++i) plane[i] += gop[i] * f;
        });
      }
      if (sn.requires_grad) {
        sn.ensure_grad();
        T* gs = sn.grad.data();
        const T* xp = xn.values.data();
        parallel_for(N * C, [&](int64_t idx) {
          T acc = 0;
          const T* gop = go + idx * HW;
          const T* plane = xp + idx * HW;
          for (int64_t i = 0; i < HW; ++i) acc += gop[i] * plane[i];
          gs[idx] += acc;
        });
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> se_module(const Tensor<T>& x, const Tensor<T>& w_reduce,
                    const Tensor<T>& b_reduce, const Tensor<T>& w_expand,
                    const Tensor<T>& b_expand, const ActivationSpec& act) {
  require(x.defined(), "se_module: undefined operand");
  require(x.shape().size() == 4, "se_module: input must be N x C x h x w");
  const int64_t C = x.dim(1);
  require(w_reduce.shape().size() == 2 && w_reduce.dim(1) == C,
          "se_module: reduce weight must be C_r x C");
  const int64_t Cr = w_reduce.dim(0);
  require(w_expand.shape().size() == 2 && w_expand.dim(0) == C && w_expand.dim(1) == Cr,
          "se_module: expand weight must be C x C_r");
  Tensor<T> pooled = global_avg_pool(x);
  Tensor<T> z = activate(linear(pooled, w_reduce, b_reduce), act);
  Tensor<T> gates = sigmoid(linear(z, w_expand, b_expand));
  return channel_scale(x, gates);
}

// --- loss ----------------------------------------------------------------

template <typename T>
Tensor<T> masked_softmax_ce(const Tensor<T>& logits,
                            const std::vector<uint16_t>& labels,
                            const std::vector<uint8_t>& mask) {
  require(logits.defined(), "masked_softmax_ce: undefined logits");
  require(logits.shape().size() == 4, "masked_softmax_ce: logits must be N x K x h x w");
  const int64_t N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const int64_t P = N * H * W, HW = H * W;
  require(static_cast<int64_t>(labels.size()) == P,
          "masked_softmax_ce: label count does not match logits");
  require(static_cast<int64_t>(mask.size()) == P,
          "masked_softmax_ce: mask length does not match logits");

  auto positions = std::make_shared<std::vector<int64_t>>();
  for (int64_t pi = 0; pi < P; ++pi) {
    if (!mask[pi]) continue;
    if (labels[pi] < 1 || labels[pi] > K)
      throw ValidationError("masked_softmax_ce: label " + std::to_string(labels[pi]) +
                            " at masked position " + std::to_string(pi) +
                            " outside 1.." + std::to_string(K));
    positions->push_back(pi);
  }
  const int64_t M = static_cast<int64_t>(positions->size());
  if (M == 0) {
    std::fprintf(stderr, "warning: masked_softmax_ce called with empty mask, loss is 0\n");
    auto node = make_node<T>({1}, std::vector<T>{T(0)}, "masked_softmax_ce",
                             {logits.handle()});
    return Tensor<T>(std::move(node));
  }

  const T* lp = logits.values().data();
  auto flat_base = [HW, K](int64_t pi) {
    const int64_t n = pi / HW, rem = pi % HW;
    return n * K * HW + rem;
  };
  T total = 0;
  for (int64_t m = 0; m < M; ++m) {
    const int64_t pi = (*positions)[m];
    const int64_t base = flat_base(pi);
    T mx = lp[base];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, lp[base + k * HW]);
    T se = 0;
    for (int64_t k = 0; k < K; ++k) se += std::exp(lp[base + k * HW] - mx);
    total += mx + std::log(se) - lp[base + (labels[pi] - 1) * HW];
  }
  total /= static_cast<T>(M);

  auto labels_copy = std::make_shared<std::vector<uint16_t>>(labels);
  auto node = make_node<T>({1}, std::vector<T>{total}, "masked_softmax_ce",
                           {logits.handle()});
  if (node->requires_grad) {
    node->backward_fn = [K, HW, M, positions, labels_copy, flat_base](detail::Node<T>& self) {
      auto& ln = *self.parents[0];
      if (!ln.requires_grad) return;
      ln.ensure_grad();
      const T go = self.grad[0] / static_cast<T>(M);
      const T* lp = ln.values.data();
      T* gl = ln.grad.data();
      parallel_for(M, [&](int64_t m) {
        const int64_t pi = (*positions)[m];
        const int64_t base = flat_base(pi);
        T mx = lp[base];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, lp[base + k * HW]);
        T se = 0;
        for (int64_t k = 0; k < K; ++k) se += std::exp(lp[base + k * HW] - mx);
        const int64_t target = (*labels_copy)[pi] - 1;
        for (int64_t k = 0; k < K; ++k) {
          const T prob = std::exp(lp[base + k * HW] - mx) / se;
          gl[base + k * HW] += go * (prob - (k == target ? T(1) : T(0)));
        }
      });
    };
  }
  return Tensor<T>(std::move(node));
}

// --- explicit instantiations ---------------------------------------------

template class Tensor<float>;
template class Tensor<double>;

#define HSI_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,  \
                            int);                                                       \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&,               \
                                      const Tensor<T>&, int, int);                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                double);                                                \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                BatchNormState<T>&, bool, double, double);              \
  template Tensor<T> activate(const Tensor<T>&, const ActivationSpec&);                 \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&, bool);                     \
  template Tensor<T> se_module(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                               const Tensor<T>&, const Tensor<T>&,                      \
                               const ActivationSpec&);                                  \
  template Tensor<T> masked_softmax_ce(const Tensor<T>&, const std::vector<uint16_t>&,  \
                                       const std::vector<uint8_t>&);                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> scale(const Tensor<T>&, T);                                        \
  template Tensor<T> sum(const Tensor<T>&);                                             \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> sigmoid(const Tensor<T>&);                                         \
  template Tensor<T> channel_scale(const Tensor<T>&, const Tensor<T>&);

HSI_INSTANTIATE_OPS(float)
HSI_INSTANTIATE_OPS(double)

#undef HSI_INSTANTIATE_OPS

}  // namespace hsi
