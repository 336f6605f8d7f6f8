#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"

namespace genemoe {

/// Mean over rows of -alpha_y (1 - p_y)^gamma log p_y with p = softmax(logits).
/// Empty class_weights means alpha = 1 for every class.
inline Var focal_loss(const Var& logits, std::span<const std::size_t> labels, double gamma,
                      std::span<const double> class_weights = {})
{
    const Tensor& z = logits.value();
    const std::size_t rows = z.rows(), classes = z.cols();
    if (labels.size() != rows)
        throw DimensionError("focal_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                             " rows");
    if (!class_weights.empty() && class_weights.size() != classes)
        throw DimensionError("focal_loss: class weight count must equal the number of classes");
    if (gamma < 0.0)
        throw DomainError("focal_loss: gamma must be non-negative");
    for (std::size_t y : labels)
        if (y >= classes)
            throw DomainError("focal_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) +
                              ")");

    Tensor probs(z.shape());
    std::vector<double> coeff(rows); // dL_b / d log p_y
    double loss = 0.0;
    for (std::size_t b = 0; b < rows; ++b) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < classes; ++c)
            m = std::max(m, z(b, c));
        double s = 0.0;
        for (std::size_t c = 0; c < classes; ++c)
            s += std::exp(z(b, c) - m);
        const double lse = m + std::log(s);
        for (std::size_t c = 0; c < classes; ++c)
            probs(b, c) = std::exp(z(b, c) - lse);

        const double alpha = class_weights.empty() ? 1.0 : class_weights[labels[b]];
        const double log_p = z(b, labels[b]) - lse;
        const double q = -std::expm1(log_p); // 1 - p_y
        const double p = 1.0 - q;
        const double w = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
        loss += -alpha * w * log_p;
        double dw = 0.0; // d (1-p)^gamma / d log p = -gamma (1-p)^(gamma-1) p
        if (gamma != 0.0 && q > 0.0)
            dw = -gamma * std::pow(q, gamma - 1.0) * p;
        coeff[b] = -alpha * (w + dw * log_p);
    }
    const double inv = 1.0 / static_cast<double>(rows);
    loss *= inv;

    const std::size_t iz = logits.id();
    std::vector<std::size_t> y(labels.begin(), labels.end());
    return logits.tape()->record(Tensor::scalar(loss), {logits},
                                 [iz, inv, probs = std::move(probs), coeff = std::move(coeff),
                                  y = std::move(y)](Tape& tp, std::size_t self) {
                                     const double g = tp.grad(self).item() * inv;
                                     Tensor& gz = tp.grad(iz);
                                     const std::size_t classes = gz.cols();
                                     for (std::size_t b = 0; b < y.size(); ++b)
                                         for (std::size_t c = 0; c < classes; ++c) {
                                             const double dlogp = (c == y[b] ? 1.0 : 0.0) - probs(b, c);
                                             gz(b, c) += g * coeff[b] * dlogp;
                                         }
                                 });
}

/// Rows are true classes, columns predicted classes.
using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                        std::size_t classes)
{
    if (truth.size() != predicted.size())
        throw DimensionError("confusion_matrix: label counts differ");
    ConfusionMatrix m(classes, std::vector<std::uint64_t>(classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= classes || predicted[i] >= classes)
            throw DomainError("confusion_matrix: label outside [0, " + std::to_string(classes) + ")");
        ++m[truth[i]][predicted[i]];
    }
    return m;
}

struct MetricsReport {
    double accuracy_overall = 0.0;
    double accuracy_macro = 0.0; // mean over classes of (TP_i + TN_i) / N
    double precision_macro = 0.0;
    double recall_macro = 0.0;
    double f1_macro = 0.0; // 2PR / (P + R) of the macro averages
    ConfusionMatrix confusion;
    std::vector<std::size_t> undefined_precision; // classes never predicted
    std::vector<std::size_t> undefined_recall;    // classes absent from the truth
};

inline MetricsReport metrics_from_confusion(const ConfusionMatrix& confusion)
{
    const std::size_t c = confusion.size();
    if (c < 2)
        throw ContractError("metrics need at least two classes");
    std::vector<double> row(c, 0.0), col(c, 0.0);
    double total = 0.0, trace = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        if (confusion[i].size() != c)
            throw DimensionError("confusion matrix must be square");
        for (std::size_t j = 0; j < c; ++j) {
            const double v = static_cast<double>(confusion[i][j]);
            row[i] += v;
            col[j] += v;
            total += v;
        }
        trace += static_cast<double>(confusion[i][i]);
    }
    if (total == 0.0)
        throw UndefinedStatisticError("metrics of an all-zero confusion matrix");

    MetricsReport r;
    r.confusion = confusion;
    r.accuracy_overall = trace / total;
    double acc = 0.0, prec = 0.0, rec = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        const double tp = static_cast<double>(confusion[i][i]);
        const double fp = col[i] - tp, fn = row[i] - tp;
        const double tn = total - tp - fp - fn;
        acc += (tp + tn) / total;
        if (col[i] > 0.0)
            prec += tp / col[i];
        else
            r.undefined_precision.push_back(i);
        if (row[i] > 0.0)
            rec += tp / row[i];
        else
            r.undefined_recall.push_back(i);
    }
    const double dc = static_cast<double>(c);
    r.accuracy_macro = acc / dc;
    r.precision_macro = prec / dc;
    r.recall_macro = rec / dc;
    const double pr = r.precision_macro + r.recall_macro;
    r.f1_macro = pr > 0.0 ? 2.0 * r.precision_macro * r.recall_macro / pr : 0.0;
    return r;
}

/// Index of the largest entry per row, lowest index on ties.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores)
{
    std::vector<std::size_t> out(scores.rows());
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < scores.cols(); ++c)
            if (scores(r, c) > scores(r, best))
                best = c;
        out[r] = best;
    }
    return out;
}

} // namespace genemoe
