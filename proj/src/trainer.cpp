#include "gnak/trainer.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace gnak {

void FineTuneConfig::validate() const {
    if (!(schedule.initial > 0.0) || !(schedule.decayed > 0.0)) {
        throw std::invalid_argument("learning rates must be positive");
    }
    if (iterations < 1) throw std::invalid_argument("fine-tuning needs at least one iteration");
    weights.validate();
}

FineTuneDiverged::FineTuneDiverged(std::size_t iteration)
    : std::runtime_error(fmt::format("fine-tuning diverged at iteration {}", iteration)),
      iteration_(iteration) {}

ObjectiveResult evaluate_objective(const Network& net, const Tensor& batch,
                                   std::span<const std::size_t> labels,
                                   const GroupAssignment& assignment, const LossWeights& weights,
                                   const ComponentScales& scales, EmbeddingSource embedding,
                                   bool with_grads) {
    const ForwardResult fw = forward(net, batch);
    const auto& record = fw.record;
    ObjectiveResult out;

    const LossValue ce = cross_entropy(fw.logits, labels);
    const ActivationLoss intra = intra_group_loss(net, record, assignment);
    const ActivationLoss inter = inter_group_loss(net, record, assignment);

    const std::size_t head = net.head_index();
    const bool on_logits = embedding == EmbeddingSource::logits || head == 0;
    const Tensor& emb_src = on_logits ? fw.logits : record.outputs[head - 1];
    const Tensor emb = emb_src.reshaped({record.batch_size(), emb_src.row_size()});
    const LossValue metric = metric_loss(emb, labels, weights);

    out.parts = {ce.loss, intra.loss, inter.loss, metric.loss};
    out.total = scales.class_loss * ce.loss + scales.intra * intra.loss + scales.inter * inter.loss +
                scales.metric * metric.loss;
    if (!with_grads) return out;

    Tensor logits_grad = ce.grad;
    if (scales.class_loss != 1.0) {
        for (double& g : logits_grad.values()) g *= scales.class_loss;
    }
    std::vector<Tensor> extra(net.layer_count());
    bool any_extra = false;
    auto inject = [&](std::size_t slot, const Tensor& grad, double scale) {
        if (grad.empty() || scale == 0.0) return;
        if (extra[slot].empty()) extra[slot] = Tensor(grad.shape());
        for (std::size_t i = 0; i < grad.size(); ++i) extra[slot][i] += scale * grad[i];
        any_extra = true;
    };
    for (std::size_t slot = 0; slot < net.layer_count(); ++slot) {
        inject(slot, intra.activation_grads[slot], scales.intra);
        inject(slot, inter.activation_grads[slot], scales.inter);
    }
    if (scales.metric != 0.0) {
        if (on_logits) {
            for (std::size_t i = 0; i < logits_grad.size(); ++i) logits_grad[i] += scales.metric * metric.grad[i];
        } else {
            inject(head - 1, metric.grad.reshaped(emb_src.shape()), scales.metric);
        }
    }
    out.grads = any_extra ? backward(net, record, logits_grad, extra) : backward(net, record, logits_grad);
    return out;
}

GroupAssignment restrict_assignment(const Network& net, const GroupAssignment& assignment,
                                    std::size_t prefix) {
    const auto layers = net.clusterable_layers();
    GroupAssignment out;
    for (std::size_t i = 0; i < std::min(prefix, layers.size()); ++i) {
        if (const auto* g = assignment.find(layers[i])) out.layers.push_back(*g);
    }
    return out;
}

GradientSet average_group_gradients(const GradientSet& grads, const GroupAssignment& assignment) {
    GradientSet out = grads;
    for (const auto& groups : assignment.layers) {
        if (groups.layer >= out.layers.size()) {
            throw std::invalid_argument(fmt::format("assignment names layer {} beyond the network", groups.layer));
        }
        LayerParams& g = out.layers[groups.layer];
        if (g.weight.rank() == 0 || g.weight.dim(0) != groups.filter_count ||
            (!g.bias.empty() && g.bias.size() != groups.filter_count)) {
            throw std::invalid_argument(fmt::format("layer {}: gradient shape does not match {} grouped filters",
                                                    groups.layer, groups.filter_count));
        }
        const std::size_t fan_in = g.weight.row_size();
        const bool bias = !g.bias.empty();
        std::vector<double> mean(fan_in);
        for (const auto& members : groups.members) {
            if (members.size() < 2) continue;
            const double inv = static_cast<double>(members.size());
            std::fill(mean.begin(), mean.end(), 0.0);
            double bias_mean = 0.0;
            for (auto f : members) {
                auto row = grads.layers[groups.layer].weight.row(f);
                for (std::size_t j = 0; j < fan_in; ++j) mean[j] += row[j];
                if (bias) bias_mean += grads.layers[groups.layer].bias[f];
            }
            for (double& v : mean) v /= inv;
            bias_mean /= inv;
            for (auto f : members) {
                std::copy(mean.begin(), mean.end(), g.weight.row(f).begin());
                if (bias) g.bias[f] = bias_mean;
            }
        }
    }
    return out;
}

void sgd_step(Network& net, const GradientSet& grads, double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (grads.layers.size() != net.layer_count()) throw std::invalid_argument("gradient set does not match network");
    if (!grads.all_finite()) throw std::runtime_error("non-finite gradient; aborting update");
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        auto step = [lr](Tensor& p, const Tensor& g) {
            if (p.size() != g.size()) throw std::invalid_argument("gradient tensor size mismatch");
            for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
        };
        step(net.params(l).weight, grads.layers[l].weight);
        step(net.params(l).bias, grads.layers[l].bias);
    }
}

double snap_to_group_lattice(double value) {
    return std::ldexp(std::nearbyint(std::ldexp(value, kGroupLatticeExponent)), -kGroupLatticeExponent);
}

namespace {

// Marks filters that belong to a group with at least two members.
std::vector<std::vector<bool>> grouped_filter_mask(const Network& net, const GroupAssignment& assignment) {
    std::vector<std::vector<bool>> mask(net.layer_count());
    for (const auto& groups : assignment.layers) {
        auto& m = mask.at(groups.layer);
        m.assign(groups.filter_count, false);
        for (const auto& members : groups.members) {
            if (members.size() < 2) continue;
            for (auto f : members) m[f] = true;
        }
    }
    return mask;
}

}  // namespace

void snap_grouped_parameters(Network& net, const GroupAssignment& assignment) {
    const auto mask = grouped_filter_mask(net, assignment);
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        if (mask[l].empty()) continue;
        LayerParams& p = net.params(l);
        for (std::size_t f = 0; f < mask[l].size(); ++f) {
            if (!mask[l][f]) continue;
            for (double& w : p.weight.row(f)) w = snap_to_group_lattice(w);
            if (!p.bias.empty()) p.bias[f] = snap_to_group_lattice(p.bias[f]);
        }
    }
}

void grouped_sgd_step(Network& net, const GradientSet& averaged, const GroupAssignment& assignment,
                      double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (averaged.layers.size() != net.layer_count()) throw std::invalid_argument("gradient set does not match network");
    if (!averaged.all_finite()) throw std::runtime_error("non-finite gradient; aborting update");
    const auto mask = grouped_filter_mask(net, assignment);
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        LayerParams& p = net.params(l);
        const LayerParams& g = averaged.layers[l];
        if (mask[l].empty()) {
            for (std::size_t i = 0; i < p.weight.size(); ++i) p.weight[i] -= lr * g.weight[i];
            for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] -= lr * g.bias[i];
            continue;
        }
        for (std::size_t f = 0; f < mask[l].size(); ++f) {
            auto w = p.weight.row(f);
            auto gw = g.weight.row(f);
            if (mask[l][f]) {
                for (std::size_t j = 0; j < w.size(); ++j) w[j] -= snap_to_group_lattice(lr * gw[j]);
                if (!p.bias.empty()) p.bias[f] -= snap_to_group_lattice(lr * g.bias[f]);
            } else {
                for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * gw[j];
                if (!p.bias.empty()) p.bias[f] -= lr * g.bias[f];
            }
        }
    }
}

FineTuneResult fine_tune(const Network& net, const GroupAssignment& assignment_in,
                         const Dataset& kshot, const Dataset& validation, const FineTuneConfig& cfg) {
    cfg.validate();
    if (kshot.size() == 0) throw std::invalid_argument("k-shot data is empty");
    if (net.output_size() != kshot.classes) {
        throw std::invalid_argument(fmt::format("head has {} outputs but the task has {} classes",
                                                net.output_size(), kshot.classes));
    }
    const std::size_t head = net.head_index();
    for (const auto& g : assignment_in.layers) {
        if (g.layer >= head) throw std::invalid_argument("the classification head cannot be grouped");
    }
    const GroupAssignment assignment =
        cfg.cluster_prefix ? restrict_assignment(net, assignment_in, *cfg.cluster_prefix) : assignment_in;

    FineTuneResult result;
    result.network = net;
    Network& model = result.network;
    snap_grouped_parameters(model, assignment);
    const ComponentScales scales = ComponentScales::from(cfg.weights);
    result.trace.reserve(cfg.iterations);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        ObjectiveResult obj = evaluate_objective(model, kshot.images, kshot.labels, assignment,
                                                 cfg.weights, scales, cfg.embedding, true);
        const double lr = cfg.schedule.at(it);
        result.trace.push_back({it, obj.parts, obj.total, lr});
        if (!std::isfinite(obj.total) || !obj.grads.all_finite()) throw FineTuneDiverged(it);
        const GradientSet averaged = average_group_gradients(obj.grads, assignment);
        grouped_sgd_step(model, averaged, assignment, lr);
    }
    result.accuracy = validation.size() > 0 ? evaluate(model, validation) : 0.0;
    return result;
}

FineTuneResult plain_fine_tune(const Network& net, const Dataset& kshot, const Dataset& validation,
                               const FineTuneConfig& cfg) {
    cfg.validate();
    FineTuneResult result;
    result.network = net;
    Network& model = result.network;
    const std::size_t head = model.head_index();
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const ForwardResult fw = forward(model, kshot.images);
        const LossValue ce = cross_entropy(fw.logits, kshot.labels);
        const Tensor& penultimate = head == 0 ? fw.logits : fw.record.outputs[head - 1];
        const Tensor emb = penultimate.reshaped({kshot.size(), penultimate.row_size()});
        LossParts parts;
        parts.class_loss = ce.loss;
        parts.intra = 0.0;
        // Reported for comparability with the grouped trace; never trained on.
        parts.inter = inter_group_loss(model, fw.record, GroupAssignment::singletons(model)).loss;
        parts.triplet = metric_loss(emb, kshot.labels, cfg.weights).loss;
        const double lr = cfg.schedule.at(it);
        result.trace.push_back({it, parts, ce.loss, lr});
        if (!std::isfinite(ce.loss)) throw FineTuneDiverged(it);
        const GradientSet grads = backward(model, fw.record, ce.grad);
        if (!grads.all_finite()) throw FineTuneDiverged(it);
        sgd_step(model, grads, lr);
    }
    result.accuracy = validation.size() > 0 ? evaluate(model, validation) : 0.0;
    return result;
}

double evaluate(const Network& net, const Dataset& dataset) {
    if (dataset.size() == 0) throw std::invalid_argument("cannot evaluate on an empty dataset");
    constexpr std::size_t kChunk = 256;
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < dataset.size(); start += kChunk) {
        const std::size_t end = std::min(dataset.size(), start + kChunk);
        idx.resize(end - start);
        for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
        const Dataset chunk = dataset.subset(idx);
        const ForwardResult fw = forward(net, chunk.images);
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            auto row = fw.logits.row(b);
            const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            if (best == chunk.labels[b]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

void write_loss_trace_csv(std::ostream& out, std::span<const LossTraceRow> trace) {
    out << "iteration,L_class,L_intra,L_inter,L_triplet,L_total,lr\n";
    for (const auto& r : trace) {
        fmt::print(out, "{},{},{},{},{},{},{}\n", r.iteration, r.parts.class_loss, r.parts.intra,
                   r.parts.inter, r.parts.triplet, r.total, r.lr);
    }
}

}  // namespace gnak
