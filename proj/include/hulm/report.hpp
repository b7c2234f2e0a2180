#pragma once

#include <map>
#include <string>
#include <vector>

#include "hulm/metrics.hpp"

namespace hulm {

// One evaluated run entering a comparison.
struct RunEval {
    std::string name;
    std::map<std::string, double> metrics;                 // metric name -> value
    std::map<std::string, PredictionSet> predictions;      // task -> rows
    std::string split_hash;                                // comparability guard
};

// true when larger is better for this metric name (r / f1 / accuracy up,
// ppl / mse / med down)
bool metric_higher_is_better_name(const std::string& metric);

struct CompareReport {
    std::string text;  // aligned plain-text table with best-in-column markers
    std::string json;  // machine-readable record
};

// All runs must be evaluated on identical splits: equal split hashes (when
// present) and identical prediction id sets per shared task. Significance
// against the best run uses a paired t-test on per-row squared errors for
// author-unit predictions and McNemar's test for document-unit predictions.
CompareReport compare_report(const std::vector<RunEval>& runs);

}  // namespace hulm
