// Training loop (cross-entropy + Adam), baselines, and the parallel sweep
// that trains many side-networks against one shared cache.

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "last/cache.hpp"
#include "last/dataset.hpp"
#include "last/optim.hpp"
#include "last/rng.hpp"
#include "last/side.hpp"
#include "last/tensor.hpp"
#include "last/vit.hpp"

namespace last {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// -log softmax(logits)[label], stable via log-sum-exp. Accepts [C] with one
// label or [B, C] with B labels (mean over the batch).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    std::size_t C = logits.dim(logits.rank() - 1);
    std::size_t B = logits.size() / C;
    if (labels.size() != B)
        throw ShapeError("cross_entropy: " + std::to_string(B) + " rows but " +
                         std::to_string(labels.size()) + " labels");
    for (std::size_t b = 0; b < B; ++b)
        if (labels[b] >= C)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[b]) +
                                        " out of range for " + std::to_string(C) + " classes");
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* l = logits.data().data() + b * C;
        double m = l[0];
        for (std::size_t j = 1; j < C; ++j) m = std::max(m, l[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < C; ++j) sum += std::exp(l[j] - m);
        total += m + std::log(sum) - l[labels[b]];
    }
    Tensor y({1}, {total / static_cast<double>(B)});
    if (detail::grad_enabled({logits})) {
        y.set_requires_grad(true);
        detail::retain(logits);
        auto li = logits.impl();
        y.impl()->parents = {li};
        y.impl()->backward_fn = [li, labels, B, C](TensorImpl& self) {
            if (!li->requires_grad) return;
            li->ensure_grad();
            double g = self.grad[0] / static_cast<double>(B);
            for (std::size_t b = 0; b < B; ++b) {
                const double* l = li->data.data() + b * C;
                double m = l[0];
                for (std::size_t j = 1; j < C; ++j) m = std::max(m, l[j]);
                double sum = 0.0;
                for (std::size_t j = 0; j < C; ++j) sum += std::exp(l[j] - m);
                for (std::size_t j = 0; j < C; ++j) {
                    double p = std::exp(l[j] - m) / sum;
                    li->grad[b * C + j] += g * (p - (j == labels[b] ? 1.0 : 0.0));
                }
            }
        };
    }
    return y;
}

inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    return cross_entropy(logits, std::vector<std::size_t>{label});
}

// Round through float32, matching the cache's at-rest precision. Live-forward
// training uses this so cached and live runs see bit-identical inputs.
inline Tensor quantize_f32(const Tensor& t) {
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<double>(static_cast<float>(t.data()[i]));
    return Tensor(t.shape(), std::move(out));
}

// Source of batched taps: either a FeatureCache or live backbone forwards.
class TapSource {
public:
    virtual ~TapSource() = default;
    virtual std::size_t size() const = 0;
    virtual std::size_t width() const = 0;
    virtual std::size_t depth() const = 0;
    virtual std::vector<Tensor> batch_taps(const std::vector<std::size_t>& indices,
                                           std::size_t gap) const = 0;
    virtual std::vector<std::size_t> batch_labels(const std::vector<std::size_t>& indices) const = 0;
};

class CacheTapSource : public TapSource {
public:
    explicit CacheTapSource(const FeatureCache& cache) : cache_(cache) {}
    std::size_t size() const override { return cache_.size(); }
    std::size_t width() const override { return cache_.manifest().backbone.width; }
    std::size_t depth() const override { return cache_.manifest().backbone.depth; }
    std::vector<Tensor> batch_taps(const std::vector<std::size_t>& indices,
                                   std::size_t gap) const override {
        return cache_.batch_taps(indices, gap);
    }
    std::vector<std::size_t> batch_labels(const std::vector<std::size_t>& indices) const override {
        return cache_.batch_labels(indices);
    }

private:
    const FeatureCache& cache_;
};

class LiveTapSource : public TapSource {
public:
    LiveTapSource(const std::vector<Sample>& dataset, const ViTWeights& backbone)
        : dataset_(dataset), backbone_(backbone) {}
    std::size_t size() const override { return dataset_.size(); }
    std::size_t width() const override { return backbone_.config.width; }
    std::size_t depth() const override { return backbone_.config.depth; }
    std::vector<Tensor> batch_taps(const std::vector<std::size_t>& indices,
                                   std::size_t gap) const override {
        TapSchedule sched(backbone_.config.depth, gap);
        std::size_t B = indices.size();
        std::size_t L = backbone_.config.seq_len(), d = backbone_.config.width;
        std::vector<std::vector<Tensor>> per_sample;
        for (std::size_t i : indices)
            per_sample.push_back(forward_with_taps(dataset_.at(i).image, backbone_, sched));
        std::vector<Tensor> out;
        for (std::size_t t = 0; t <= sched.groups; ++t) {
            std::vector<double> data(B * L * d);
            for (std::size_t b = 0; b < B; ++b) {
                Tensor q = quantize_f32(per_sample[b][t]);
                std::copy(q.data().begin(), q.data().end(), data.begin() + b * L * d);
            }
            out.emplace_back(Shape{B, L, d}, std::move(data));
        }
        return out;
    }
    std::vector<std::size_t> batch_labels(const std::vector<std::size_t>& indices) const override {
        std::vector<std::size_t> out;
        for (std::size_t i : indices) out.push_back(dataset_.at(i).label);
        return out;
    }

private:
    const std::vector<Sample>& dataset_;
    const ViTWeights& backbone_;
};

struct EpochMetric {
    double train_loss = 0.0;
    double eval_acc = 0.0;
};

struct TrainRun {
    std::string run_id = "run";
    SideConfig side;
    std::uint64_t seed = 0;
    double lr = 1e-3;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;

    // filled in by train()
    std::vector<EpochMetric> metrics;
    double final_eval_acc = 0.0;
    double final_train_loss = 0.0;
    std::size_t retained_elements_first_step = 0;
    bool failed = false;
    std::string error;
    std::shared_ptr<SideState> state;
};

struct TrainOptions {
    std::size_t train_count = 0;  // 0 = 80/20 split
};

namespace detail {

inline std::size_t argmax(const double* v, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

inline std::size_t resolve_train_count(const TapSource& src, const TrainOptions& opts) {
    std::size_t n = src.size();
    std::size_t tc = opts.train_count ? opts.train_count : n - n / 5;
    if (tc == 0 || tc > n)
        throw ConfigError("invalid train split " + std::to_string(tc) + " of " + std::to_string(n));
    return tc;
}

}  // namespace detail

inline double evaluate(SideState& state, const TapSource& src, std::size_t begin, std::size_t end,
                       std::size_t batch_size) {
    NoGradGuard no_grad;
    std::size_t correct = 0, total = 0;
    for (std::size_t start = begin; start < end; start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(end, start + batch_size); ++i) idx.push_back(i);
        Tensor logits = side_logits(src.batch_taps(idx, state.config.gap), state);
        auto labels = src.batch_labels(idx);
        std::size_t C = state.config.num_classes;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            if (detail::argmax(logits.data().data() + b * C, C) == labels[b]) ++correct;
            ++total;
        }
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// Deterministic under run.seed: init, shuffling and updates all derive from
// it. Trains on the first train_count samples, evaluates on the rest.
inline void train(TrainRun& run, const TapSource& src, const TrainOptions& opts = {}) {
    std::size_t train_count = detail::resolve_train_count(src, opts);
    SideState state = init_side(run.side, src.depth(), src.width(), run.seed);
    auto params = state.parameters(true);
    Adam opt(params, {.lr = run.lr});
    Rng order_rng(run.seed ^ 0x5deece66dull);

    std::vector<std::size_t> order(train_count);
    for (std::size_t i = 0; i < train_count; ++i) order[i] = i;

    run.metrics.clear();
    bool measured = false;
    for (std::size_t epoch = 0; epoch < run.epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < train_count; start += run.batch_size) {
            std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(train_count,
                                                                  start + run.batch_size));
            if (!measured) tape().reset_stats();
            Tensor loss = cross_entropy(side_logits(src.batch_taps(idx, run.side.gap), state),
                                        src.batch_labels(idx));
            if (!std::isfinite(loss.item()))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(batches) + " of run " + run.run_id);
            backward(loss);
            if (!measured) {
                run.retained_elements_first_step = tape().stats().retained_elements;
                measured = true;
            }
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        EpochMetric m;
        m.train_loss = loss_sum / static_cast<double>(batches);
        m.eval_acc = evaluate(state, src, train_count, src.size(), run.batch_size);
        run.metrics.push_back(m);
    }
    run.final_train_loss = run.metrics.empty() ? 0.0 : run.metrics.back().train_loss;
    run.final_eval_acc = run.metrics.empty() ? 0.0 : run.metrics.back().eval_acc;
    run.state = std::make_shared<SideState>(std::move(state));
}

inline void train(TrainRun& run, const FeatureCache& cache, const TrainOptions& opts = {}) {
    CacheTapSource src(cache);
    train(run, src, opts);
}

// ---------------------------------------------------------------------------
// sweep

struct SweepPlan {
    std::vector<TrainRun> runs;
    std::size_t max_concurrency = 1;
    TrainOptions options;
};

inline std::string sweep_summary_csv(const std::vector<TrainRun>& runs) {
    std::vector<const TrainRun*> order;
    for (const auto& r : runs) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(), [](const TrainRun* a, const TrainRun* b) {
        if (a->failed != b->failed) return !a->failed;
        if (a->final_eval_acc != b->final_eval_acc) return a->final_eval_acc > b->final_eval_acc;
        return a->run_id < b->run_id;
    });
    std::ostringstream csv;
    csv << "run_id,g,T,r,n_head,bias_correction,ffn_hidden,seed,final_eval_acc,final_train_loss,"
           "status\n";
    for (const TrainRun* r : order) {
        csv << r->run_id << ',' << r->side.gap << ',' << r->side.stack << ',' << r->side.rank
            << ',' << r->side.n_head << ',' << (r->side.bias_correction ? 1 : 0) << ','
            << (r->side.ffn_hidden ? std::to_string(*r->side.ffn_hidden) : std::string("-")) << ','
            << r->seed << ',';
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,", r->final_eval_acc, r->final_train_loss);
        csv << buf << (r->failed ? "failed" : "ok") << '\n';
    }
    return csv.str();
}

// Runs execute on up to max_concurrency threads. Each run owns its state,
// optimizer and RNG; the cache is shared read-only, so results are identical
// at any concurrency level. A failing run is recorded and does not stop the
// others.
inline std::vector<TrainRun> sweep(SweepPlan plan, const FeatureCache& cache) {
    std::atomic<std::size_t> next{0};
    std::size_t workers = std::max<std::size_t>(1, std::min(plan.max_concurrency, plan.runs.size()));
    auto work = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= plan.runs.size()) break;
            TrainRun& run = plan.runs[i];
            try {
                CacheTapSource src(cache);
                train(run, src, plan.options);
            } catch (const std::exception& e) {
                run.failed = true;
                run.error = e.what();
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> threads;
        for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work);
        for (auto& t : threads) t.join();
    }
    return std::move(plan.runs);
}

inline std::string metrics_jsonl(const TrainRun& run) {
    std::ostringstream out;
    for (std::size_t e = 0; e < run.metrics.size(); ++e) {
        nlohmann::json rec = {{"run_id", run.run_id},
                              {"epoch", e},
                              {"loss", run.metrics[e].train_loss},
                              {"acc", run.metrics[e].eval_acc}};
        out << rec.dump() << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// baselines

struct BaselineResult {
    std::string name;
    std::vector<EpochMetric> metrics;
    double final_eval_acc = 0.0;
    std::size_t trainable_params = 0;
    std::size_t retained_elements_first_step = 0;
};

// Head-only training on the class token of z_m.
inline BaselineResult linear_probe(const TapSource& src, std::size_t num_classes,
                                   std::uint64_t seed, double lr, std::size_t epochs,
                                   std::size_t batch_size, const TrainOptions& opts = {}) {
    std::size_t train_count = detail::resolve_train_count(src, opts);
    std::size_t d = src.width();
    Rng rng(seed);
    ClassifierHead head;
    head.ln_gamma = make_const_param("probe.ln.gamma", {d}, 1.0);
    head.ln_beta = make_zeros_param("probe.ln.beta", {d});
    head.w = make_param("probe.w", {d, num_classes}, rng, kInitStd);
    head.b = make_zeros_param("probe.b", {num_classes});
    std::vector<Parameter*> params = {&head.ln_gamma, &head.ln_beta, &head.w, &head.b};
    Adam opt(params, {.lr = lr});
    Rng order_rng(seed ^ 0x5deece66dull);
    std::size_t gap = src.depth();  // only the final tap is needed

    BaselineResult res;
    res.name = "linear_probe";
    for (Parameter* p : params) res.trainable_params += p->size();

    std::vector<std::size_t> order(train_count);
    for (std::size_t i = 0; i < train_count; ++i) order[i] = i;
    bool measured = false;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < train_count; start += batch_size) {
            std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(train_count, start + batch_size));
            auto taps = src.batch_taps(idx, gap);
            if (!measured) tape().reset_stats();
            Tensor loss = cross_entropy(classify(taps.back(), head), src.batch_labels(idx));
            backward(loss);
            if (!measured) {
                res.retained_elements_first_step = tape().stats().retained_elements;
                measured = true;
            }
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        EpochMetric m;
        m.train_loss = loss_sum / static_cast<double>(batches);
        {
            NoGradGuard no_grad;
            std::size_t correct = 0, total = 0;
            for (std::size_t start = train_count; start < src.size(); start += batch_size) {
                std::vector<std::size_t> idx;
                for (std::size_t i = start; i < std::min(src.size(), start + batch_size); ++i)
                    idx.push_back(i);
                auto taps = src.batch_taps(idx, gap);
                Tensor logits = classify(taps.back(), head);
                auto labels = src.batch_labels(idx);
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    if (detail::argmax(logits.data().data() + b * num_classes, num_classes) ==
                        labels[b])
                        ++correct;
                    ++total;
                }
            }
            m.eval_acc = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
        }
        res.metrics.push_back(m);
    }
    res.final_eval_acc = res.metrics.empty() ? 0.0 : res.metrics.back().eval_acc;
    return res;
}

// All backbone parameters plus a head are trainable, with live recorded
// forwards. Used for memory-accounting comparisons, not accuracy racing.
inline BaselineResult full_finetune(const std::vector<Sample>& dataset, const BackboneConfig& cfg,
                                    std::size_t num_classes, std::uint64_t seed, double lr,
                                    std::size_t epochs, std::size_t batch_size,
                                    std::size_t train_count) {
    ViTWeights weights = init_synthetic(cfg, seed);
    weights.set_frozen(false);
    std::size_t d = cfg.width;
    Rng rng(seed + 1);
    ClassifierHead head;
    head.ln_gamma = make_const_param("ft.head.ln.gamma", {d}, 1.0);
    head.ln_beta = make_zeros_param("ft.head.ln.beta", {d});
    head.w = make_param("ft.head.w", {d, num_classes}, rng, kInitStd);
    head.b = make_zeros_param("ft.head.b", {num_classes});
    std::vector<Parameter*> params = weights.parameters();
    for (Parameter* p : {&head.ln_gamma, &head.ln_beta, &head.w, &head.b}) params.push_back(p);
    Adam opt(params, {.lr = lr});
    Rng order_rng(seed ^ 0x5deece66dull);

    BaselineResult res;
    res.name = "full_finetune";
    for (Parameter* p : params) res.trainable_params += p->size();

    std::vector<std::size_t> order(train_count);
    for (std::size_t i = 0; i < train_count; ++i) order[i] = i;
    bool measured = false;
    auto batch_images = [&](const std::vector<std::size_t>& idx) {
        std::size_t C = cfg.channels, S = cfg.image_size;
        std::vector<double> data(idx.size() * C * S * S);
        for (std::size_t b = 0; b < idx.size(); ++b)
            std::copy(dataset[idx[b]].image.data().begin(), dataset[idx[b]].image.data().end(),
                      data.begin() + b * C * S * S);
        return Tensor({idx.size(), C, S, S}, std::move(data));
    };
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < train_count; start += batch_size) {
            std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(train_count, start + batch_size));
            if (!measured) tape().reset_stats();
            Tensor tokens = forward_recorded(batch_images(idx), weights);
            Tensor logits = classify(tokens, head);
            std::vector<std::size_t> labels;
            for (std::size_t i : idx) labels.push_back(dataset[i].label);
            Tensor loss = cross_entropy(logits, labels);
            backward(loss);
            if (!measured) {
                res.retained_elements_first_step = tape().stats().retained_elements;
                measured = true;
            }
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        EpochMetric m;
        m.train_loss = loss_sum / static_cast<double>(batches);
        {
            NoGradGuard no_grad;
            std::size_t correct = 0, total = 0;
            for (std::size_t start = train_count; start < dataset.size(); start += batch_size) {
                std::vector<std::size_t> idx;
                for (std::size_t i = start; i < std::min(dataset.size(), start + batch_size); ++i)
                    idx.push_back(i);
                Tensor logits = classify(forward_recorded(batch_images(idx), weights), head);
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    if (detail::argmax(logits.data().data() + b * num_classes, num_classes) ==
                        dataset[idx[b]].label)
                        ++correct;
                    ++total;
                }
            }
            m.eval_acc = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
        }
        res.metrics.push_back(m);
    }
    res.final_eval_acc = res.metrics.empty() ? 0.0 : res.metrics.back().eval_acc;
    return res;
}

}  // namespace last
