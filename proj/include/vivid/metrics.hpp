#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vivid/common.hpp"

namespace vivid {

// Mann-Whitney AUC with average-rank tie handling: (wins + 0.5*ties) over
// positive x negative pairs, computed from rank sums in O(n log n).
inline double auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size()) {
        throw ShapeError("auc: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
    }
    for (double s : scores) {
        if (!std::isfinite(s)) throw DomainError("auc: non-finite score");
    }
    std::size_t pos = 0;
    for (bool b : labels) pos += b ? 1 : 0;
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) {
        throw DomainError("auc needs at least one positive and one negative");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) rank_sum_pos += avg_rank;
        }
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);
}

// Thresholded F1: predictions = score >= threshold; 0 when precision and
// recall are both degenerate.
inline double f1_score(const std::vector<double>& scores, const std::vector<bool>& labels,
                       double threshold = 0.5) {
    if (scores.size() != labels.size()) {
        throw ShapeError("f1: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
    }
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        if (pred && labels[i]) ++tp;
        if (pred && !labels[i]) ++fp;
        if (!pred && labels[i]) ++fn;
    }
    if (tp == 0 && (fp > 0 || fn > 0)) return 0.0;
    if (tp == 0) return 0.0;  // no positives anywhere
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

// Per-class scores/labels for one evaluation set. Classes whose AUC is
// undefined (single-class labels) or whose F1 is out of scope (no actual
// positives) are excluded from the corresponding macro mean and listed.
struct ClassEval {
    std::string name;
    std::vector<double> scores;
    std::vector<bool> labels;
};

struct ClassReport {
    std::string name;
    std::optional<double> auc;
    std::optional<double> f1;
    std::size_t support_pos = 0;
    std::size_t support_neg = 0;
};

struct MetricsReport {
    std::vector<ClassReport> per_class;
    std::optional<double> macro_auc;
    std::optional<double> macro_f1;
    std::vector<std::string> skipped_auc;  // classes without both label kinds
    std::vector<std::string> skipped_f1;   // classes without actual positives

    nlohmann::json to_json() const {
        nlohmann::json classes = nlohmann::json::array();
        for (const auto& c : per_class) {
            nlohmann::json j = {{"name", c.name},
                                {"support_pos", c.support_pos},
                                {"support_neg", c.support_neg}};
            if (c.auc) j["auc"] = *c.auc;
            if (c.f1) j["f1"] = *c.f1;
            classes.push_back(j);
        }
        nlohmann::json out;
        out["classes"] = classes;
        if (macro_auc) out["macro_auc"] = *macro_auc;
        if (macro_f1) out["macro_f1"] = *macro_f1;
        out["skipped_auc"] = skipped_auc;
        out["skipped_f1"] = skipped_f1;
        return out;
    }
};

inline MetricsReport evaluate_classes(const std::vector<ClassEval>& classes,
                                      double f1_threshold = 0.5) {
    MetricsReport report;
    double auc_sum = 0.0, f1_sum = 0.0;
    std::size_t auc_n = 0, f1_n = 0;
    for (const auto& c : classes) {
        ClassReport cr;
        cr.name = c.name;
        for (bool b : c.labels) (b ? cr.support_pos : cr.support_neg) += 1;
        if (cr.support_pos > 0 && cr.support_neg > 0) {
            cr.auc = auc(c.scores, c.labels);
            auc_sum += *cr.auc;
            auc_n += 1;
        } else {
            report.skipped_auc.push_back(c.name);
        }
        if (cr.support_pos > 0) {
            cr.f1 = f1_score(c.scores, c.labels, f1_threshold);
            f1_sum += *cr.f1;
            f1_n += 1;
        } else {
            report.skipped_f1.push_back(c.name);
        }
        report.per_class.push_back(std::move(cr));
    }
    if (auc_n > 0) report.macro_auc = auc_sum / static_cast<double>(auc_n);
    if (f1_n > 0) report.macro_f1 = f1_sum / static_cast<double>(f1_n);
    return report;
}

}  // namespace vivid
