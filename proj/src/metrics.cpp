#include "byb/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace byb {

double auroc_binary(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ContractError("auroc_binary: size mismatch");
    std::size_t pos = 0, neg = 0;
    for (int l : labels) (l != 0 ? pos : neg)++;
    if (pos == 0 || neg == 0)
        throw MetricError("auroc_binary needs both classes, got " + std::to_string(pos) +
                          " positives / " + std::to_string(neg) + " negatives");

    // Rank-sum with midranks for ties: AUC = (R_pos - P(P+1)/2) / (P*N).
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t t = i; t < j; ++t)
            if (labels[idx[t]] != 0) rank_sum_pos += midrank;
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);
}

double auroc_macro(const std::vector<std::vector<double>>& scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ContractError("auroc_macro: size mismatch");
    if (scores.empty()) throw MetricError("auroc_macro on empty input");
    const std::size_t num_classes = scores[0].size();
    std::vector<std::size_t> counts(num_classes, 0);
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
            throw ContractError("auroc_macro: label " + std::to_string(l) + " out of range");
        ++counts[static_cast<std::size_t>(l)];
    }
    double total = 0.0;
    std::size_t used = 0;
    std::vector<double> class_scores(labels.size());
    std::vector<int> binary(labels.size());
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (counts[c] == 0 || counts[c] == labels.size()) continue;  // absent class or no negatives
        for (std::size_t i = 0; i < labels.size(); ++i) {
            class_scores[i] = scores[i][c];
            binary[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
        }
        total += auroc_binary(class_scores, binary);
        ++used;
    }
    if (used == 0) throw MetricError("auroc_macro: no class admits a one-vs-rest comparison");
    return total / static_cast<double>(used);
}

double ks_score(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ContractError("ks_score: size mismatch");
    std::size_t pos = 0, neg = 0;
    for (int l : labels) (l != 0 ? pos : neg)++;
    if (pos == 0 || neg == 0) throw MetricError("ks_score needs both classes");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double best = 0.0;
    double cum_pos = 0.0, cum_neg = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        for (std::size_t t = i; t < j; ++t) (labels[idx[t]] != 0 ? cum_pos : cum_neg) += 1.0;
        best = std::max(best, std::abs(cum_pos / static_cast<double>(pos) -
                                       cum_neg / static_cast<double>(neg)));
        i = j;
    }
    return best;
}

std::string EvalReport::to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& m : metrics) {
        nlohmann::json e;
        e["task"] = m.task;
        e["metric"] = m.metric;
        e["value"] = m.value;
        e["samples"] = m.samples;
        if (m.positive_rate >= 0.0) e["positive_rate"] = m.positive_rate;
        if (!m.class_histogram.empty()) e["class_histogram"] = m.class_histogram;
        j.push_back(std::move(e));
    }
    return j.dump(2);
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "task,metric,value,samples,positive_rate\n";
    for (const auto& m : metrics) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", m.value);
        os << m.task << ',' << m.metric << ',' << buf << ',' << m.samples << ',';
        if (m.positive_rate >= 0.0) os << m.positive_rate;
        os << '\n';
    }
    return os.str();
}

}  // namespace byb
