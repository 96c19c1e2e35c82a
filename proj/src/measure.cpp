#include "dn4/measure.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace dn4 {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;

// Column-normalizes a [d, n] matrix; norms[j] receives max(|x_j|, eps).
template <class T>
BasicTensor<T> normalize_columns(const BasicTensor<T>& x, double eps, std::vector<T>* norms = nullptr) {
    const std::size_t d = x.dim(0), n = x.dim(1);
    BasicTensor<T> out(x.shape());
    std::vector<T> local(n, T{0});
    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t j = 0; j < n; ++j) local[j] += x[r * n + j] * x[r * n + j];
    }
    for (auto& v : local) v = std::max(std::sqrt(v), static_cast<T>(eps));
    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / local[j];
    }
    if (norms) *norms = std::move(local);
    return out;
}

// Backward of x_hat = x / max(|x|, eps) for one vector of length `len` with stride `stride`.
template <class T>
void normalize_backward(const T* xhat, const T* dxhat, T norm, double eps, std::size_t len, std::size_t stride,
                        T* dx) {
    if (norm > static_cast<T>(eps)) {
        T dot{0};
        for (std::size_t r = 0; r < len; ++r) dot += xhat[r * stride] * dxhat[r * stride];
        for (std::size_t r = 0; r < len; ++r) dx[r * stride] += (dxhat[r * stride] - xhat[r * stride] * dot) / norm;
    } else {
        for (std::size_t r = 0; r < len; ++r) dx[r * stride] += dxhat[r * stride] / norm;
    }
}

template <class T>
T sum_top_k_rows(const BasicTensor<T>& sim, std::size_t begin, std::size_t end, std::size_t k) {
    const std::size_t rows = sim.dim(0), cols = sim.dim(1);
    std::vector<std::uint32_t> sel(k);
    T total{0};
    for (std::size_t i = 0; i < rows; ++i) {
        std::span<const T> row(sim.data().data() + i * cols, cols);
        top_k(row, begin, end, k, sel.data());
        for (std::size_t j = 0; j < k; ++j) total += row[sel[j]];
    }
    return total;
}

void check_k(std::size_t k, std::size_t available, const char* what) {
    if (k < 1) throw ConfigError("k_neighbors must be >= 1");
    if (k > available) {
        throw ConfigError(std::string("k_neighbors=") + std::to_string(k) + " exceeds " + what + " of " +
                          std::to_string(available) + " descriptors");
    }
}

template <class T>
void check_query_pool(const BasicDescriptorSet<T>& query, const BasicClassPool<T>& pool) {
    if (query.dim() != pool.dim()) {
        throw DimensionError("descriptor dimension mismatch: query " + std::to_string(query.dim()) + " vs pool " +
                             std::to_string(pool.dim()));
    }
}

}  // namespace

const char* variant_name(MeasureVariant v) {
    switch (v) {
        case MeasureVariant::dn4: return "DN4";
        case MeasureVariant::ioi1: return "DN4-IoI-1";
        case MeasureVariant::ioi2: return "DN4-IoI-2";
    }
    return "?";
}

MeasureVariant parse_variant(const std::string& name) {
    if (name == "dn4" || name == "DN4") return MeasureVariant::dn4;
    if (name == "ioi1" || name == "DN4-IoI-1") return MeasureVariant::ioi1;
    if (name == "ioi2" || name == "DN4-IoI-2") return MeasureVariant::ioi2;
    throw ConfigError("unknown measure variant '" + name + "' (expected dn4, ioi1 or ioi2)");
}

template <class T>
BasicClassPool<T> make_pool(int class_id, std::span<const BasicDescriptorSet<T>> support) {
    if (support.empty()) throw ContractError("class pool needs at least one support image");
    const std::size_t d = support[0].dim();
    std::size_t total = 0;
    for (const auto& s : support) {
        if (s.dim() != d) throw DimensionError("support images disagree on descriptor dimension");
        total += s.count();
    }
    BasicClassPool<T> pool;
    pool.class_id = class_id;
    pool.descriptors = BasicTensor<T>(Shape{d, total});
    std::size_t offset = 0;
    for (const auto& s : support) {
        const std::size_t m = s.count();
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t j = 0; j < m; ++j) pool.descriptors[r * total + offset + j] = s(r, j);
        }
        pool.ranges.emplace_back(offset, offset + m);
        offset += m;
    }
    return pool;
}

template <class T>
std::size_t BasicSimilarityVector<T>::prediction() const {
    if (scores.empty()) throw ContractError("prediction on an empty similarity vector");
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c) {
        if (scores[c] > scores[best]) best = c;
    }
    return best;
}

template <class T>
BasicTensor<T> cosine_matrix(const BasicTensor<T>& queries, const BasicTensor<T>& pool, double eps) {
    require_rank(queries.shape(), 2, "cosine_matrix queries");
    require_rank(pool.shape(), 2, "cosine_matrix pool");
    const std::size_t d = queries.dim(0), m = queries.dim(1), p = pool.dim(1);
    if (pool.dim(0) != d) {
        throw DimensionError("cosine_matrix: descriptor dimensions differ " + shape_string(queries.shape()) +
                             " vs " + shape_string(pool.shape()));
    }
    const auto qn = normalize_columns(queries, eps);
    const auto pn = normalize_columns(pool, eps);
    BasicTensor<T> out(Shape{m, p});
    MatMap<T>(out.data().data(), m, p).noalias() =
        ConstMatMap<T>(qn.data().data(), d, m).transpose() * ConstMatMap<T>(pn.data().data(), d, p);
    return out;
}

template <class T>
void top_k(std::span<const T> row, std::size_t begin, std::size_t end, std::size_t k, std::uint32_t* out) {
    // Scanning in increasing index, a later element displaces a kept one only
    // when strictly larger, which yields the lowest-index tie-break.
    std::size_t filled = 0;
    for (std::size_t j = begin; j < end; ++j) {
        const T v = row[j];
        if (filled == k && !(v > row[out[k - 1]])) continue;
        std::size_t pos = filled < k ? filled++ : k - 1;
        while (pos > 0 && v > row[out[pos - 1]]) {
            out[pos] = out[pos - 1];
            --pos;
        }
        out[pos] = static_cast<std::uint32_t>(j);
    }
}

template <class T>
T image_to_class(const BasicDescriptorSet<T>& query, const BasicClassPool<T>& pool, const MeasureConfig& cfg) {
    check_query_pool(query, pool);
    check_k(cfg.k_neighbors, pool.columns(), "class pool");
    const auto sim = cosine_matrix(query.descriptors, pool.descriptors, cfg.zero_norm_eps);
    return sum_top_k_rows(sim, 0, pool.columns(), cfg.k_neighbors);
}


template <class T>
Var<T> cosine_matrix(Tape<T>& tape, const Var<T>& queries, const Var<T>& pool, double eps) {
    const auto& qv = queries.value();
    const auto& pv = pool.value();
    auto out = cosine_matrix(qv, pv, eps);
    return tape.record(std::move(out), {queries, pool}, [queries, pool, eps](Node<T>& self) {
        const auto& qv = queries.value();
        const auto& pv = pool.value();
        const std::size_t d = qv.dim(0), m = qv.dim(1), p = pv.dim(1);
        std::vector<T> qnorm, pnorm;
        const auto qn = normalize_columns(qv, eps, &qnorm);
        const auto pn = normalize_columns(pv, eps, &pnorm);
        ConstMatMap<T> g(self.grad.data().data(), m, p);
        if (queries.requires_grad()) {
            RowMat<T> dqn = ConstMatMap<T>(pn.data().data(), d, p) * g.transpose();  // [d, m]
            auto dq = queries.node()->grad_buffer().data().data();
            for (std::size_t j = 0; j < m; ++j) {
                normalize_backward(qn.data().data() + j, dqn.data() + j, qnorm[j], eps, d, m, dq + j);
            }
        }
        if (pool.requires_grad()) {
            RowMat<T> dpn = ConstMatMap<T>(qn.data().data(), d, m) * g;  // [d, p]
            auto dp = pool.node()->grad_buffer().data().data();
            for (std::size_t j = 0; j < p; ++j) {
                normalize_backward(pn.data().data() + j, dpn.data() + j, pnorm[j], eps, d, p, dp + j);
            }
        }
    });
}

template <class T>
Var<T> image_to_class(Tape<T>& tape, const Var<T>& queries, const Var<T>& pool, const MeasureConfig& cfg) {
    require_rank(queries.shape(), 2, "image_to_class queries");
    require_rank(pool.shape(), 2, "image_to_class pool");
    const std::size_t p = pool.shape()[1];
    check_k(cfg.k_neighbors, p, "class pool");
    auto sim = cosine_matrix(tape, queries, pool, cfg.zero_norm_eps);
    const std::size_t m = sim.shape()[0], k = cfg.k_neighbors;
    std::vector<std::uint32_t> sel(m * k);
    T total{0};
    for (std::size_t i = 0; i < m; ++i) {
        std::span<const T> row(sim.value().data().data() + i * p, p);
        top_k(row, 0, p, k, sel.data() + i * k);
        for (std::size_t j = 0; j < k; ++j) total += row[sel[i * k + j]];
    }
    return tape.record(BasicTensor<T>::scalar(total), {sim}, [sim, sel = std::move(sel), m, k, p](Node<T>& self) {
        const T g = self.grad[0];
        auto ds = sim.node()->grad_buffer().data();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < k; ++j) ds[i * p + sel[i * k + j]] += g;
        }
    });
}

template <class T>
T ioi1_score(const BasicDescriptorSet<T>& query, const BasicDescriptorSet<T>& support, double eps) {
    if (query.descriptors.size() != support.descriptors.size() || query.count() != support.count()) {
        throw DimensionError("ioi1_score: query has " + std::to_string(query.descriptors.size()) +
                             " values, support has " + std::to_string(support.descriptors.size()));
    }
    // Descriptor-major concatenation; the cosine only depends on pairing
    // entries by (spatial index, channel), which both layouts share.
    T dot{0}, nq{0}, ns{0};
    const auto q = query.descriptors.data();
    const auto s = support.descriptors.data();
    for (std::size_t i = 0; i < q.size(); ++i) {
        dot += q[i] * s[i];
        nq += q[i] * q[i];
        ns += s[i] * s[i];
    }
    const T e = static_cast<T>(eps);
    return dot / (std::max(std::sqrt(nq), e) * std::max(std::sqrt(ns), e));
}

template <class T>
T ioi1_class_score(const BasicDescriptorSet<T>& query, const BasicClassPool<T>& pool, double eps) {
    check_query_pool(query, pool);
    const std::size_t d = pool.dim(), p = pool.columns();
    T best = -std::numeric_limits<T>::infinity();
    for (const auto& [b, e] : pool.ranges) {
        BasicTensor<T> img(Shape{d, e - b});
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t j = b; j < e; ++j) img[r * (e - b) + (j - b)] = pool.descriptors[r * p + j];
        }
        const T s = ioi1_score(query, BasicDescriptorSet<T>(std::move(img), 1, e - b), eps);
        if (s > best) best = s;
    }
    return best;
}

template <class T>
T ioi2_score(const BasicDescriptorSet<T>& query, const BasicClassPool<T>& pool, const MeasureConfig& cfg) {
    check_query_pool(query, pool);
    for (const auto& [b, e] : pool.ranges) check_k(cfg.k_neighbors, e - b, "a support image");
    const auto sim = cosine_matrix(query.descriptors, pool.descriptors, cfg.zero_norm_eps);
    T total{0};
    for (const auto& [b, e] : pool.ranges) total += sum_top_k_rows(sim, b, e, cfg.k_neighbors);
    return total;
}

template <class T>
BasicSimilarityVector<T> classify(const BasicDescriptorSet<T>& query, std::span<const BasicClassPool<T>> pools,
                                  const MeasureConfig& cfg, MeasureVariant variant) {
    if (pools.empty()) throw ContractError("classify needs at least one class pool");
    BasicSimilarityVector<T> z;
    z.scores.reserve(pools.size());
    for (const auto& pool : pools) {
        switch (variant) {
            case MeasureVariant::dn4: z.scores.push_back(image_to_class(query, pool, cfg)); break;
            case MeasureVariant::ioi1: z.scores.push_back(ioi1_class_score(query, pool, cfg.zero_norm_eps)); break;
            case MeasureVariant::ioi2: z.scores.push_back(ioi2_score(query, pool, cfg)); break;
        }
    }
    return z;
}

namespace {

template <class T>
Var<T> episode_scores_local(Tape<T>& tape, const Var<T>& features, const EpisodeLayout& layout,
                            const MeasureConfig& cfg, bool per_image) {
    const Shape& s = features.shape();
    const std::size_t n_img = s[0], d = s[1], m = s[2] * s[3], per = d * m;
    const std::size_t classes = layout.support.size(), queries = layout.queries.size();
    const std::size_t k = cfg.k_neighbors;
    const double eps = cfg.zero_norm_eps;

    // Normalize every descriptor of every image once.
    auto xn = std::make_shared<std::vector<T>>(n_img * per);
    auto norms = std::make_shared<std::vector<T>>(n_img * m);
    const auto x = features.value().data();
    for (std::size_t n = 0; n < n_img; ++n) {
        std::vector<T> acc(m, T{0});
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t j = 0; j < m; ++j) acc[j] += x[n * per + r * m + j] * x[n * per + r * m + j];
        }
        for (std::size_t j = 0; j < m; ++j) {
            const T nrm = std::max(std::sqrt(acc[j]), static_cast<T>(eps));
            (*norms)[n * m + j] = nrm;
            for (std::size_t r = 0; r < d; ++r) (*xn)[n * per + r * m + j] = x[n * per + r * m + j] / nrm;
        }
    }

    // All class pools side by side: columns [class_begin[c], class_begin[c+1]).
    std::vector<std::size_t> class_begin{0};
    std::vector<std::size_t> col_image;
    for (const auto& imgs : layout.support) {
        if (imgs.empty()) throw ContractError("episode class without support images");
        for (auto img : imgs) {
            for (std::size_t j = 0; j < m; ++j) col_image.push_back(img);
        }
        class_begin.push_back(col_image.size());
        if (per_image) {
            check_k(k, m, "a support image");
        } else {
            check_k(k, imgs.size() * m, "class pool");
        }
    }
    const std::size_t total_cols = col_image.size();
    RowMat<T> pool(d, total_cols);
    for (std::size_t col = 0; col < total_cols; ++col) {
        const std::size_t img = col_image[col], j = col % m;
        for (std::size_t r = 0; r < d; ++r) pool(r, col) = (*xn)[img * per + r * m + j];
    }

    // selections[q][c] flattened as (query descriptor i, pool column) pairs.
    auto sel_offsets = std::make_shared<std::vector<std::size_t>>();
    auto sel_cols = std::make_shared<std::vector<std::uint32_t>>();
    sel_offsets->reserve(queries * classes + 1);
    sel_offsets->push_back(0);

    BasicTensor<T> out(Shape{queries, classes});
    RowMat<T> sim(m, total_cols);
    std::vector<std::uint32_t> buf(k);
    for (std::size_t q = 0; q < queries; ++q) {
        const std::size_t qi = layout.queries[q];
        sim.noalias() = ConstMatMap<T>(xn->data() + qi * per, d, m).transpose() * pool;
        for (std::size_t c = 0; c < classes; ++c) {
            T score{0};
            const std::size_t cb = class_begin[c], ce = class_begin[c + 1];
            std::vector<std::pair<std::size_t, std::size_t>> ranges;
            if (per_image) {
                for (std::size_t b = cb; b < ce; b += m) ranges.emplace_back(b, b + m);
            } else {
                ranges.emplace_back(cb, ce);
            }
            for (const auto& [b, e] : ranges) {
                T range_score{0};
                for (std::size_t i = 0; i < m; ++i) {
                    std::span<const T> row(sim.data() + i * total_cols, total_cols);
                    top_k(row, b, e, k, buf.data());
                    for (std::size_t j = 0; j < k; ++j) {
                        range_score += row[buf[j]];
                        sel_cols->push_back(static_cast<std::uint32_t>(i));
                        sel_cols->push_back(buf[j]);
                    }
                }
                score += range_score;
            }
            out[q * classes + c] = score;
            sel_offsets->push_back(sel_cols->size());
        }
    }

    auto col_img = std::make_shared<std::vector<std::size_t>>(std::move(col_image));
    auto q_imgs = layout.queries;
    return tape.record(std::move(out), {features}, [=](Node<T>& self) {
        std::vector<T> dxn(n_img * per, T{0});
        const auto g = self.grad.data();
        for (std::size_t q = 0; q < queries; ++q) {
            const std::size_t qi = q_imgs[q];
            for (std::size_t c = 0; c < classes; ++c) {
                const T gv = g[q * classes + c];
                if (gv == T{0}) continue;
                const std::size_t b = (*sel_offsets)[q * classes + c], e = (*sel_offsets)[q * classes + c + 1];
                for (std::size_t t = b; t < e; t += 2) {
                    const std::size_t i = (*sel_cols)[t], col = (*sel_cols)[t + 1];
                    const std::size_t si = (*col_img)[col], sj = col % m;
                    for (std::size_t r = 0; r < d; ++r) {
                        dxn[qi * per + r * m + i] += gv * (*xn)[si * per + r * m + sj];
                        dxn[si * per + r * m + sj] += gv * (*xn)[qi * per + r * m + i];
                    }
                }
            }
        }
        auto gx = self.inputs[0]->grad_buffer().data();
        for (std::size_t n = 0; n < n_img; ++n) {
            for (std::size_t j = 0; j < m; ++j) {
                const std::size_t off = n * per + j;
                normalize_backward(xn->data() + off, dxn.data() + off, (*norms)[n * m + j], eps, d, m,
                                   gx.data() + off);
            }
        }
    });
}

template <class T>
Var<T> episode_scores_global(Tape<T>& tape, const Var<T>& features, const EpisodeLayout& layout,
                             const MeasureConfig& cfg) {
    const Shape& s = features.shape();
    const std::size_t n_img = s[0], per = s[1] * s[2] * s[3];
    const std::size_t classes = layout.support.size(), queries = layout.queries.size();
    const double eps = cfg.zero_norm_eps;
    const auto x = features.value().data();

    auto vn = std::make_shared<std::vector<T>>(n_img * per);
    auto norms = std::make_shared<std::vector<T>>(n_img);
    for (std::size_t n = 0; n < n_img; ++n) {
        T acc{0};
        for (std::size_t i = 0; i < per; ++i) acc += x[n * per + i] * x[n * per + i];
        const T nrm = std::max(std::sqrt(acc), static_cast<T>(eps));
        (*norms)[n] = nrm;
        for (std::size_t i = 0; i < per; ++i) (*vn)[n * per + i] = x[n * per + i] / nrm;
    }
    BasicTensor<T> out(Shape{queries, classes});
    auto best_img = std::make_shared<std::vector<std::size_t>>(queries * classes);
    for (std::size_t q = 0; q < queries; ++q) {
        const T* vq = vn->data() + layout.queries[q] * per;
        for (std::size_t c = 0; c < classes; ++c) {
            if (layout.support[c].empty()) throw ContractError("episode class without support images");
            T best = -std::numeric_limits<T>::infinity();
            std::size_t arg = layout.support[c][0];
            for (auto img : layout.support[c]) {
                const T* vs = vn->data() + img * per;
                T dot{0};
                for (std::size_t i = 0; i < per; ++i) dot += vq[i] * vs[i];
                if (dot > best) {
                    best = dot;
                    arg = img;
                }
            }
            out[q * classes + c] = best;
            (*best_img)[q * classes + c] = arg;
        }
    }
    auto q_imgs = layout.queries;
    return tape.record(std::move(out), {features}, [=](Node<T>& self) {
        std::vector<T> dvn(n_img * per, T{0});
        const auto g = self.grad.data();
        for (std::size_t q = 0; q < queries; ++q) {
            const std::size_t qi = q_imgs[q];
            for (std::size_t c = 0; c < classes; ++c) {
                const T gv = g[q * classes + c];
                const std::size_t si = (*best_img)[q * classes + c];
                for (std::size_t i = 0; i < per; ++i) {
                    dvn[qi * per + i] += gv * (*vn)[si * per + i];
                    dvn[si * per + i] += gv * (*vn)[qi * per + i];
                }
            }
        }
        auto gx = self.inputs[0]->grad_buffer().data();
        for (std::size_t n = 0; n < n_img; ++n) {
            normalize_backward(vn->data() + n * per, dvn.data() + n * per, (*norms)[n], eps, per, 1,
                               gx.data() + n * per);
        }
    });
}

}  // namespace

template <class T>
Var<T> episode_scores(Tape<T>& tape, const Var<T>& features, const EpisodeLayout& layout, const MeasureConfig& cfg,
                      MeasureVariant variant) {
    require_rank(features.shape(), 4, "episode_scores features");
    if (layout.support.empty()) throw ContractError("episode_scores needs at least one class");
    const std::size_t n_img = features.shape()[0];
    for (auto q : layout.queries) {
        if (q >= n_img) throw ContractError("episode layout query index out of range");
    }
    for (const auto& imgs : layout.support) {
        for (auto i : imgs) {
            if (i >= n_img) throw ContractError("episode layout support index out of range");
        }
    }
    switch (variant) {
        case MeasureVariant::dn4: return episode_scores_local(tape, features, layout, cfg, false);
        case MeasureVariant::ioi2: return episode_scores_local(tape, features, layout, cfg, true);
        case MeasureVariant::ioi1: return episode_scores_global(tape, features, layout, cfg);
    }
    throw ContractError("unknown measure variant");
}

#define DN4_INSTANTIATE_MEASURE(T)                                                                           \
    template struct BasicSimilarityVector<T>;                                                                \
    template BasicClassPool<T> make_pool(int, std::span<const BasicDescriptorSet<T>>);                       \
    template BasicTensor<T> cosine_matrix(const BasicTensor<T>&, const BasicTensor<T>&, double);              \
    template Var<T> cosine_matrix(Tape<T>&, const Var<T>&, const Var<T>&, double);                           \
    template Var<T> image_to_class(Tape<T>&, const Var<T>&, const Var<T>&, const MeasureConfig&);            \
    template void top_k(std::span<const T>, std::size_t, std::size_t, std::size_t, std::uint32_t*);           \
    template T image_to_class(const BasicDescriptorSet<T>&, const BasicClassPool<T>&, const MeasureConfig&);  \
    template T ioi1_score(const BasicDescriptorSet<T>&, const BasicDescriptorSet<T>&, double);                \
    template T ioi1_class_score(const BasicDescriptorSet<T>&, const BasicClassPool<T>&, double);              \
    template T ioi2_score(const BasicDescriptorSet<T>&, const BasicClassPool<T>&, const MeasureConfig&);      \
    template BasicSimilarityVector<T> classify(const BasicDescriptorSet<T>&, std::span<const BasicClassPool<T>>, \
                                               const MeasureConfig&, MeasureVariant);                        \
    template Var<T> episode_scores(Tape<T>&, const Var<T>&, const EpisodeLayout&, const MeasureConfig&,       \
                                   MeasureVariant);

DN4_INSTANTIATE_MEASURE(float)
DN4_INSTANTIATE_MEASURE(double)

#undef DN4_INSTANTIATE_MEASURE

}  // namespace dn4
