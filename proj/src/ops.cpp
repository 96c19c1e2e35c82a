#include "dn4/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>

namespace dn4::ops {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
Node<T>& in(Node<T>& self, std::size_t i) {
    return *self.inputs[i];
}

// Reductions over contiguous runs use eight independent double lanes so the
// compiler can vectorize them; the summation order is fixed, so results stay
// deterministic.
template <class T>
double lane_sum(const T* __restrict p, std::size_t n) {
    double acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(p[i + l]);
    }
    for (; i < n; ++i) acc[0] += static_cast<double>(p[i]);
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <class T>
double lane_sq_dev(const T* __restrict p, std::size_t n, double mu) {
    double acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int l = 0; l < 8; ++l) {
            const double d = static_cast<double>(p[i + l]) - mu;
            acc[l] += d * d;
        }
    }
    for (; i < n; ++i) {
        const double d = static_cast<double>(p[i]) - mu;
        acc[0] += d * d;
    }
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <class T>
double lane_dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
    double acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(a[i + l]) * static_cast<double>(b[i + l]);
    }
    for (; i < n; ++i) acc[0] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

void require_same(const Shape& a, const Shape& b, const char* what) {
    if (a != b) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                             shape_string(b));
    }
}

// Row r = ci*9 + ky*3 + kx, column = y*W + x. Out-of-image taps are zero.
template <class T>
void im2col3x3(const T* image, std::size_t channels, std::size_t h, std::size_t w, T* cols) {
    const std::size_t hw = h * w;
    for (std::size_t ci = 0; ci < channels; ++ci) {
        const T* plane = image + ci * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* row = cols + (ci * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    const long iy = static_cast<long>(y) + ky - 1;
                    T* dst = row + y * w;
                    if (iy < 0 || iy >= static_cast<long>(h)) {
                        std::fill(dst, dst + w, T{0});
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * w;
                    for (std::size_t x = 0; x < w; ++x) {
                        const long ix = static_cast<long>(x) + kx - 1;
                        dst[x] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im3x3(const T* cols, std::size_t channels, std::size_t h, std::size_t w, T* image) {
    const std::size_t hw = h * w;
    for (std::size_t ci = 0; ci < channels; ++ci) {
        T* plane = image + ci * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = cols + (ci * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    const long iy = static_cast<long>(y) + ky - 1;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    const T* src = row + y * w;
                    T* dst = plane + static_cast<std::size_t>(iy) * w;
                    for (std::size_t x = 0; x < w; ++x) {
                        const long ix = static_cast<long>(x) + kx - 1;
                        if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[x];
                    }
                }
            }
        }
    }
}

}  // namespace

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    require_same(a.shape(), b.shape(), "add");
    BasicTensor<T> out(a.shape());
    const auto x = a.value().data();
    const auto y = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return tape.record(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (in(self, k).requires_grad) in(self, k).accumulate(self.grad.data());
        }
    });
}

template <class T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    require_same(a.shape(), b.shape(), "mul");
    BasicTensor<T> out(a.shape());
    const auto x = a.value().data();
    const auto y = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return tape.record(std::move(out), {a, b}, [](Node<T>& self) {
        auto& na = in(self, 0);
        auto& nb = in(self, 1);
        const auto g = self.grad.data();
        if (na.requires_grad) {
            auto ga = na.grad_buffer().data();
            const auto vb = nb.value.data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (nb.requires_grad) {
            auto gb = nb.grad_buffer().data();
            const auto va = na.value.data();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

template <class T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor) {
    BasicTensor<T> out(a.shape());
    const auto x = a.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    return tape.record(std::move(out), {a}, [factor](Node<T>& self) {
        auto ga = in(self, 0).grad_buffer().data();
        const auto g = self.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
}

template <class T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    require_rank(a.shape(), 2, "matmul lhs");
    require_rank(b.shape(), 2, "matmul rhs");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw DimensionError("matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    BasicTensor<T> out(Shape{m, n});
    MatMap<T>(out.data().data(), m, n).noalias() =
        ConstMatMap<T>(a.value().data().data(), m, k) * ConstMatMap<T>(b.value().data().data(), k, n);
    return tape.record(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        auto& na = in(self, 0);
        auto& nb = in(self, 1);
        ConstMatMap<T> g(self.grad.data().data(), m, n);
        if (na.requires_grad) {
            MatMap<T>(na.grad_buffer().data().data(), m, k).noalias() +=
                g * ConstMatMap<T>(nb.value.data().data(), k, n).transpose();
        }
        if (nb.requires_grad) {
            MatMap<T>(nb.grad_buffer().data().data(), k, n).noalias() +=
                ConstMatMap<T>(na.value.data().data(), m, k).transpose() * g;
        }
    });
}

template <class T>
Var<T> sum(Tape<T>& tape, const Var<T>& a) {
    const T total = static_cast<T>(lane_sum(a.value().data().data(), a.value().size()));
    return tape.record(BasicTensor<T>::scalar(total), {a}, [](Node<T>& self) {
        const T g = self.grad[0];
        for (auto& v : in(self, 0).grad_buffer().data()) v += g;
    });
}

template <class T>
Var<T> mean(Tape<T>& tape, const Var<T>& a) {
    const T n = static_cast<T>(a.value().size());
    const T total = static_cast<T>(lane_sum(a.value().data().data(), a.value().size()));
    return tape.record(BasicTensor<T>::scalar(total / n), {a}, [n](Node<T>& self) {
        const T g = self.grad[0] / n;
        for (auto& v : in(self, 0).grad_buffer().data()) v += g;
    });
}

template <class T>
Var<T> log(Tape<T>& tape, const Var<T>& a) {
    BasicTensor<T> out(a.shape());
    const auto x = a.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(x[i] > T{0})) throw NumericError("log of non-positive value");
        out[i] = std::log(x[i]);
    }
    return tape.record(std::move(out), {a}, [](Node<T>& self) {
        auto& na = in(self, 0);
        auto ga = na.grad_buffer().data();
        const auto x = na.value.data();
        const auto g = self.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    });
}

template <class T>
Var<T> reshape(Tape<T>& tape, const Var<T>& a, Shape shape) {
    auto out = a.value().reshaped(std::move(shape));
    return tape.record(std::move(out), {a}, [](Node<T>& self) {
        in(self, 0).accumulate(self.grad.data());
    });
}

template <class T>
Var<T> softmax(Tape<T>& tape, const Var<T>& logits) {
    require_rank(logits.shape(), 2, "softmax");
    const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
    BasicTensor<T> out(logits.shape());
    const auto z = logits.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* zr = z.data() + r * cols;
        T* yr = out.data().data() + r * cols;
        const T mx = *std::max_element(zr, zr + cols);
        T total{0};
        for (std::size_t c = 0; c < cols; ++c) total += (yr[c] = std::exp(zr[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
    }
    auto saved = std::make_shared<BasicTensor<T>>(out);
    return tape.record(std::move(out), {logits}, [saved, rows, cols](Node<T>& self) {
        auto gx = in(self, 0).grad_buffer().data();
        const auto g = self.grad.data();
        const auto y = saved->data();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot{0};
            for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
                gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
            }
        }
    });
}

template <class T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels) {
    require_rank(logits.shape(), 2, "cross_entropy");
    const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
    if (labels.size() != rows) {
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(rows) + " rows");
    }
    auto probs = std::make_shared<BasicTensor<T>>(logits.shape());
    std::vector<int> lab(labels.begin(), labels.end());
    const auto z = logits.value().data();
    T loss{0};
    for (std::size_t r = 0; r < rows; ++r) {
        if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= cols) {
            throw ContractError("cross_entropy: label " + std::to_string(lab[r]) + " out of range [0," +
                                std::to_string(cols) + ")");
        }
        const T* zr = z.data() + r * cols;
        T* pr = probs->data().data() + r * cols;
        const T mx = *std::max_element(zr, zr + cols);
        T total{0};
        for (std::size_t c = 0; c < cols; ++c) total += (pr[c] = std::exp(zr[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) pr[c] /= total;
        loss += mx + std::log(total) - zr[lab[r]];
    }
    loss /= static_cast<T>(rows);
    return tape.record(BasicTensor<T>::scalar(loss), {logits},
                       [probs, lab = std::move(lab), rows, cols](Node<T>& self) {
                           const T g = self.grad[0] / static_cast<T>(rows);
                           auto gx = in(self, 0).grad_buffer().data();
                           const auto p = probs->data();
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const T target = static_cast<int>(c) == lab[r] ? T{1} : T{0};
                                   gx[r * cols + c] += g * (p[r * cols + c] - target);
                               }
                           }
                       });
}

template <class T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
    require_rank(input.shape(), 4, "conv2d input");
    require_rank(weight.shape(), 4, "conv2d weight");
    const std::size_t n = input.shape()[0], cin = input.shape()[1], h = input.shape()[2],
                      w = input.shape()[3];
    const std::size_t cout = weight.shape()[0];
    if (weight.shape()[1] != cin) {
        throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                             std::to_string(weight.shape()[1]));
    }
    if (weight.shape()[2] != 3 || weight.shape()[3] != 3) {
        throw DimensionError("conv2d: only 3x3 kernels are supported, got " + shape_string(weight.shape()));
    }
    require_shape(bias.shape(), Shape{cout}, "conv2d bias");

    const std::size_t hw = h * w, kdim = cin * 9;
    BasicTensor<T> out(Shape{n, cout, h, w});
    std::vector<T> cols(kdim * hw);
    ConstMatMap<T> wm(weight.value().data().data(), cout, kdim);
    const T* b = bias.value().data().data();
    for (std::size_t i = 0; i < n; ++i) {
        im2col3x3(input.value().data().data() + i * cin * hw, cin, h, w, cols.data());
        MatMap<T> o(out.data().data() + i * cout * hw, cout, hw);
        o.noalias() = wm * ConstMatMap<T>(cols.data(), kdim, hw);
        for (std::size_t c = 0; c < cout; ++c) o.row(c).array() += b[c];
    }

    return tape.record(std::move(out), {input, weight, bias}, [=](Node<T>& self) {
        auto& nx = in(self, 0);
        auto& nw = in(self, 1);
        auto& nb = in(self, 2);
        const T* g = self.grad.data().data();
        if (nb.requires_grad) {
            auto gb = nb.grad_buffer().data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t c = 0; c < cout; ++c) {
                    gb[c] += static_cast<T>(lane_sum(g + (i * cout + c) * hw, hw));
                }
            }
        }
        if (!nw.requires_grad && !nx.requires_grad) return;
        std::vector<T> buf(kdim * hw);
        ConstMatMap<T> wmat(nw.value.data().data(), cout, kdim);
        for (std::size_t i = 0; i < n; ++i) {
            ConstMatMap<T> gi(g + i * cout * hw, cout, hw);
            if (nw.requires_grad) {
                im2col3x3(nx.value.data().data() + i * cin * hw, cin, h, w, buf.data());
                MatMap<T>(nw.grad_buffer().data().data(), cout, kdim).noalias() +=
                    gi * ConstMatMap<T>(buf.data(), kdim, hw).transpose();
            }
            if (nx.requires_grad) {
                MatMap<T>(buf.data(), kdim, hw).noalias() = wmat.transpose() * gi;
                col2im3x3(buf.data(), cin, h, w, nx.grad_buffer().data().data() + i * cin * hw);
            }
        }
    });
}

template <class T>
Var<T> batchnorm2d(Tape<T>& tape, const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                   std::type_identity_t<RunningStats<T>>* running, const BatchNormOptions& options) {
    require_rank(input.shape(), 4, "batchnorm2d input");
    const std::size_t n = input.shape()[0], c = input.shape()[1], hw = input.shape()[2] * input.shape()[3];
    require_shape(gamma.shape(), Shape{c}, "batchnorm2d gamma");
    require_shape(beta.shape(), Shape{c}, "batchnorm2d beta");
    const std::size_t count = n * hw;
    const bool batch_mode = options.mode == BatchNormMode::batch_stats;
    if (batch_mode && count < 2) {
        throw ContractError("batchnorm2d: batch statistics need at least 2 values per channel");
    }
    if (!batch_mode && running == nullptr) {
        throw ConfigError("batchnorm2d: running-stats mode without running statistics");
    }
    if (running != nullptr) {
        require_shape(running->mean.shape(), Shape{c}, "batchnorm2d running mean");
    }

    const T eps = static_cast<T>(options.eps);
    const auto x = input.value().data();
    auto xhat = std::make_shared<BasicTensor<T>>(input.shape());
    auto inv_std = std::make_shared<std::vector<T>>(c);
    BasicTensor<T> out(input.shape());
    const auto g = gamma.value().data();
    const auto bt = beta.value().data();

    for (std::size_t ch = 0; ch < c; ++ch) {
        T mu, var;
        if (batch_mode) {
            // Two-pass statistics, accumulated in double for stability in float mode.
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += lane_sum(x.data() + (i * c + ch) * hw, hw);
            const double mu_d = s / static_cast<double>(count);
            double ss = 0;
            for (std::size_t i = 0; i < n; ++i) ss += lane_sq_dev(x.data() + (i * c + ch) * hw, hw, mu_d);
            const double var_d = ss / static_cast<double>(count);
            mu = static_cast<T>(mu_d);
            var = static_cast<T>(var_d);
            if (running != nullptr && options.update_running) {
                const T mom = static_cast<T>(options.momentum);
                const T unbiased = static_cast<T>(var_d * static_cast<double>(count) / (count - 1));
                running->mean[ch] = (T{1} - mom) * running->mean[ch] + mom * mu;
                running->var[ch] = (T{1} - mom) * running->var[ch] + mom * unbiased;
            }
        } else {
            mu = running->mean[ch];
            var = running->var[ch];
        }
        const T is = T{1} / std::sqrt(var + eps);
        (*inv_std)[ch] = is;
        const T gc = g[ch], bc = bt[ch];
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            const T* __restrict xp = x.data() + off;
            T* __restrict hp = xhat->data().data() + off;
            T* __restrict op = out.data().data() + off;
            for (std::size_t j = 0; j < hw; ++j) {
                const T xh = (xp[j] - mu) * is;
                hp[j] = xh;
                op[j] = gc * xh + bc;
            }
        }
    }

    return tape.record(std::move(out), {input, gamma, beta}, [=](Node<T>& self) {
        auto& nx = in(self, 0);
        auto& ng = in(self, 1);
        auto& nb = in(self, 2);
        const auto gy = self.grad.data();
        const auto xh = xhat->data();
        const auto gam = ng.value.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc_g = 0, acc_gx = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t off = (i * c + ch) * hw;
                acc_g += lane_sum(gy.data() + off, hw);
                acc_gx += lane_dot(gy.data() + off, xh.data() + off, hw);
            }
            const T sum_g = static_cast<T>(acc_g), sum_gx = static_cast<T>(acc_gx);
            if (ng.requires_grad) ng.grad_buffer()[ch] += sum_gx;
            if (nb.requires_grad) nb.grad_buffer()[ch] += sum_g;
            if (!nx.requires_grad) continue;
            auto gx = nx.grad_buffer().data();
            const T is = (*inv_std)[ch];
            if (batch_mode) {
                // dx = gamma*is/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                const T m = static_cast<T>(count);
                const T factor = gam[ch] * is / m;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t off = (i * c + ch) * hw;
                    T* __restrict gp = gx.data() + off;
                    const T* __restrict yp = gy.data() + off;
                    const T* __restrict hp = xh.data() + off;
                    for (std::size_t j = 0; j < hw; ++j) gp[j] += factor * (m * yp[j] - sum_g - hp[j] * sum_gx);
                }
            } else {
                const T factor = gam[ch] * is;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t off = (i * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) gx[off + j] += factor * gy[off + j];
                }
            }
        }
    });
}

template <class T>
Var<T> leaky_relu(Tape<T>& tape, const Var<T>& input, T slope) {
    BasicTensor<T> out(input.shape());
    const std::size_t n = out.size();
    {
        const T* __restrict x = input.value().data().data();
        T* __restrict y = out.data().data();
        // x * (slope + (1 - slope) * [x > 0]) is exact in both branches and vectorizes.
        const T rest = T{1} - slope;
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * (slope + rest * static_cast<T>(x[i] > T{0}));
    }
    return tape.record(std::move(out), {input}, [slope, n](Node<T>& self) {
        auto& nx = in(self, 0);
        T* __restrict gx = nx.grad_buffer().data().data();
        const T* __restrict x = nx.value.data().data();
        const T* __restrict g = self.grad.data().data();
        // Locals, so the loop does not reload captures through a possibly aliased closure.
        const T s = slope;
        const std::size_t len = n;
        for (std::size_t i = 0; i < len; ++i) gx[i] += g[i] * (x[i] > T{0} ? T{1} : s);
    });
}

template <class T>
Var<T> maxpool2d(Tape<T>& tape, const Var<T>& input) {
    require_rank(input.shape(), 4, "maxpool2d input");
    const std::size_t n = input.shape()[0], c = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
    if (h % 2 != 0 || w % 2 != 0) {
        throw DimensionError("maxpool2d: spatial extents must be even, got " + shape_string(input.shape()));
    }
    const std::size_t oh = h / 2, ow = w / 2;
    BasicTensor<T> out(Shape{n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const auto x = input.value().data();
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xo = 0; xo < ow; ++xo) {
                std::size_t best = base + (2 * y) * w + 2 * xo;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if (x[idx] > x[best]) best = idx;
                    }
                }
                const std::size_t o = plane * oh * ow + y * ow + xo;
                out[o] = x[best];
                (*argmax)[o] = best;
            }
        }
    }
    return tape.record(std::move(out), {input}, [argmax](Node<T>& self) {
        auto gx = in(self, 0).grad_buffer().data();
        const auto g = self.grad.data();
        for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
    });
}

template <class T>
Var<T> global_average_pool(Tape<T>& tape, const Var<T>& input) {
    require_rank(input.shape(), 4, "global_average_pool input");
    const std::size_t n = input.shape()[0], c = input.shape()[1], hw = input.shape()[2] * input.shape()[3];
    BasicTensor<T> out(Shape{n, c});
    const auto x = input.value().data();
    for (std::size_t p = 0; p < n * c; ++p) {
        T acc{0};
        for (std::size_t j = 0; j < hw; ++j) acc += x[p * hw + j];
        out[p] = acc / static_cast<T>(hw);
    }
    return tape.record(std::move(out), {input}, [n, c, hw](Node<T>& self) {
        auto gx = in(self, 0).grad_buffer().data();
        const auto g = self.grad.data();
        for (std::size_t p = 0; p < n * c; ++p) {
            const T v = g[p] / static_cast<T>(hw);
            for (std::size_t j = 0; j < hw; ++j) gx[p * hw + j] += v;
        }
    });
}

template <class T>
Var<T> fully_connected(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require_rank(x.shape(), 2, "fully_connected input");
    require_rank(weight.shape(), 2, "fully_connected weight");
    const std::size_t n = x.shape()[0], fin = x.shape()[1], fout = weight.shape()[0];
    if (weight.shape()[1] != fin) {
        throw DimensionError("fully_connected: input width " + std::to_string(fin) + " vs weight " +
                             shape_string(weight.shape()));
    }
    require_shape(bias.shape(), Shape{fout}, "fully_connected bias");
    BasicTensor<T> out(Shape{n, fout});
    MatMap<T> o(out.data().data(), n, fout);
    o.noalias() = ConstMatMap<T>(x.value().data().data(), n, fin) *
                  ConstMatMap<T>(weight.value().data().data(), fout, fin).transpose();
    const T* b = bias.value().data().data();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < fout; ++j) o(r, j) += b[j];
    }
    return tape.record(std::move(out), {x, weight, bias}, [n, fin, fout](Node<T>& self) {
        auto& nx = in(self, 0);
        auto& nw = in(self, 1);
        auto& nb = in(self, 2);
        ConstMatMap<T> g(self.grad.data().data(), n, fout);
        if (nx.requires_grad) {
            MatMap<T>(nx.grad_buffer().data().data(), n, fin).noalias() +=
                g * ConstMatMap<T>(nw.value.data().data(), fout, fin);
        }
        if (nw.requires_grad) {
            MatMap<T>(nw.grad_buffer().data().data(), fout, fin).noalias() +=
                g.transpose() * ConstMatMap<T>(nx.value.data().data(), n, fin);
        }
        if (nb.requires_grad) {
            auto gb = nb.grad_buffer().data();
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t j = 0; j < fout; ++j) gb[j] += g(r, j);
            }
        }
    });
}

#define DN4_INSTANTIATE_OPS(T)                                                                        \
    template Var<T> add(Tape<T>&, const Var<T>&, const Var<T>&);                                      \
    template Var<T> mul(Tape<T>&, const Var<T>&, const Var<T>&);                                      \
    template Var<T> scale(Tape<T>&, const Var<T>&, T);                                                \
    template Var<T> matmul(Tape<T>&, const Var<T>&, const Var<T>&);                                   \
    template Var<T> sum(Tape<T>&, const Var<T>&);                                                     \
    template Var<T> mean(Tape<T>&, const Var<T>&);                                                    \
    template Var<T> log(Tape<T>&, const Var<T>&);                                                     \
    template Var<T> reshape(Tape<T>&, const Var<T>&, Shape);                                          \
    template Var<T> softmax(Tape<T>&, const Var<T>&);                                                 \
    template Var<T> cross_entropy(Tape<T>&, const Var<T>&, std::span<const int>);                     \
    template Var<T> conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                    \
    template Var<T> batchnorm2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,                \
                                std::type_identity_t<RunningStats<T>>*, const BatchNormOptions&);                         \
    template Var<T> leaky_relu(Tape<T>&, const Var<T>&, T);                                           \
    template Var<T> maxpool2d(Tape<T>&, const Var<T>&);                                               \
    template Var<T> global_average_pool(Tape<T>&, const Var<T>&);                                     \
    template Var<T> fully_connected(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);

DN4_INSTANTIATE_OPS(float)
DN4_INSTANTIATE_OPS(double)

#undef DN4_INSTANTIATE_OPS

}  // namespace dn4::ops
