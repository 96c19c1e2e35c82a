#pragma once

#include <span>
#include <type_traits>

#include "dn4/autograd.hpp"

namespace dn4 {

enum class BatchNormMode { batch_stats, running_stats };

template <class T>
struct RunningStats {
    BasicTensor<T> mean;
    BasicTensor<T> var;

    explicit RunningStats(std::size_t channels = 1)
        : mean(Shape{channels}, T{0}), var(Shape{channels}, T{1}) {}
};

struct BatchNormOptions {
    BatchNormMode mode = BatchNormMode::batch_stats;
    double eps = 1e-5;
    double momentum = 0.1;
    bool update_running = false;  // batch-stats mode only
};

namespace ops {

template <class T> Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor);
/// a[M,K] x b[K,N] -> [M,N]
template <class T> Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sum(Tape<T>& tape, const Var<T>& a);
template <class T> Var<T> mean(Tape<T>& tape, const Var<T>& a);
template <class T> Var<T> log(Tape<T>& tape, const Var<T>& a);
template <class T> Var<T> reshape(Tape<T>& tape, const Var<T>& a, Shape shape);

/// Row-wise softmax over the last axis of a [N,C] tensor.
template <class T> Var<T> softmax(Tape<T>& tape, const Var<T>& logits);

/// Mean over rows of -log softmax(logits)[label]. Computed with a fused,
/// max-shifted log-sum-exp.
template <class T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels);

/// 3x3 cross-correlation, zero padding 1, stride 1.
/// input [N,Cin,H,W], weight [Cout,Cin,3,3], bias [Cout] -> [N,Cout,H,W]
template <class T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

template <class T>
Var<T> batchnorm2d(Tape<T>& tape, const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                   std::type_identity_t<RunningStats<T>>* running, const BatchNormOptions& options);

/// max(x, slope*x); the gradient at exactly 0 is `slope`.
template <class T> Var<T> leaky_relu(Tape<T>& tape, const Var<T>& input, T slope);

/// 2x2 window, stride 2. Gradient goes to the first maximum in row-major window order.
template <class T> Var<T> maxpool2d(Tape<T>& tape, const Var<T>& input);

/// [N,C,H,W] -> [N,C]
template <class T> Var<T> global_average_pool(Tape<T>& tape, const Var<T>& input);

/// x[N,in], weight[out,in], bias[out] -> [N,out]
template <class T>
Var<T> fully_connected(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

}  // namespace ops
}  // namespace dn4
