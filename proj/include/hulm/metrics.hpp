#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hulm/corpus.hpp"
#include "hulm/human_context.hpp"

namespace hulm {

class TransformerModel;

struct PredictionRow {
    std::string id;
    double prediction = 0.0;
    double gold = 0.0;
    std::string bucket;  // optional bucket key
};

struct PredictionSet {
    enum class Unit { author, document };
    Unit unit = Unit::author;
    std::vector<PredictionRow> rows;
    void validate() const;  // ids unique
};

// Named ordered buckets over a numeric attribute; default is the five age
// buckets <18, 18-21, 21-30, 30-45, 45+.
struct BucketScheme {
    std::vector<double> bounds;
    std::vector<std::string> names;  // bounds.size() + 1 entries
    static BucketScheme default_age();
    const std::string& name_for(double v) const;
};

// exp(total NLL / total non-padded next-token predictions) over a split
double perplexity(TransformerModel& model, const std::vector<BlockSequence>& split,
                  ForwardMode mode);

double pearson_r(const std::vector<double>& preds, const std::vector<double>& golds);

// r / sqrt(rel_pred * rel_gold), clipped to [-1, 1]; *clipped reports whether
// clipping fired
double disattenuated_r(const std::vector<double>& preds, const std::vector<double>& golds,
                       double rel_pred, double rel_gold, bool* clipped = nullptr);

double mse(const std::vector<double>& preds, const std::vector<double>& golds);

enum class F1Average { weighted, macro };
double f1_score(const std::vector<int>& preds, const std::vector<int>& golds, F1Average average);

enum class BucketMetric { pearson, disattenuated_pearson, mse };

struct BucketScore {
    std::string bucket;
    int n = 0;
    double score = 0.0;
    bool defined = true;  // correlation buckets with n < 2 are excluded
};
// one score per bucket present in the rows, ordered by scheme then extras
std::vector<BucketScore> bucketed_metric(const PredictionSet& preds, BucketMetric metric,
                                         const BucketScheme& scheme, double rel_pred = 1.0,
                                         double rel_gold = 1.0);

// mean |score_i - score_j| over all unordered bucket pairs
double mean_error_disparity(const std::vector<double>& per_bucket_scores);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    long n = 0;
};
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct McNemarResult {
    long b = 0;  // a correct, b wrong
    long c = 0;  // a wrong, b correct
    double p = 1.0;
    bool exact = true;
    std::string note;
};
// exact binomial by default; the continuity-corrected chi-square variant is
// used when b + c >= 25 unless force_exact
McNemarResult mcnemar_test(const std::vector<uint8_t>& correct_a,
                           const std::vector<uint8_t>& correct_b, bool force_exact = false);

// ---- prediction file io ----
// '#'-prefixed "key=value" metadata lines, a header row, then CSV records
// id,prediction,gold,bucket. Fields must not contain commas or newlines.
void write_predictions(const std::string& path, const PredictionSet& preds,
                       const std::map<std::string, std::string>& metadata = {});
PredictionSet read_predictions(const std::string& path,
                               std::map<std::string, std::string>* metadata = nullptr);

}  // namespace hulm
