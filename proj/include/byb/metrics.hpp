#pragma once

// Ranking metrics: binary AUROC (Mann-Whitney, ties at half credit), macro
// AUROC over one-vs-rest, and the Kolmogorov-Smirnov statistic.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "byb/errors.hpp"

namespace byb {

// P(random positive outranks random negative), ties counted 0.5.
double auroc_binary(std::span<const double> scores, std::span<const int> labels);

// Unweighted mean of one-vs-rest binary AUROCs over the classes present in
// `labels`. scores is row-major [n, num_classes].
double auroc_macro(const std::vector<std::vector<double>>& scores, std::span<const int> labels);

// max over thresholds of |ECDF_pos(t) - ECDF_neg(t)|.
double ks_score(std::span<const double> scores, std::span<const int> labels);

struct TaskMetric {
    std::string task;
    std::string metric;     // "auroc", "macro_auroc", "ks"
    double value = 0.0;
    std::size_t samples = 0;
    double positive_rate = -1.0;          // binary tasks
    std::vector<std::size_t> class_histogram;  // multi-class tasks
};

struct EvalReport {
    std::vector<TaskMetric> metrics;

    std::string to_json() const;
    std::string to_csv() const;
};

}  // namespace byb
