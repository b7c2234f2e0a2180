#include "hulm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "hulm/errors.hpp"
#include "hulm/model.hpp"
#include "hulm/objectives.hpp"
#include "hulm/stats.hpp"
#include "hulm/util.hpp"

namespace hulm {

void PredictionSet::validate() const {
    std::set<std::string> ids;
    for (const auto& r : rows) {
        if (!ids.insert(r.id).second) {
            throw DataError("prediction set has duplicate id '" + r.id + "'");
        }
    }
}

BucketScheme BucketScheme::default_age() {
    BucketScheme s;
    s.bounds = {18.0, 21.0, 30.0, 45.0};
    s.names = {"<18", "18-21", "21-30", "30-45", "45+"};
    return s;
}

const std::string& BucketScheme::name_for(double v) const {
    return names[static_cast<size_t>(bucket_index(v, bounds))];
}

double perplexity(TransformerModel& model, const std::vector<BlockSequence>& split,
                  ForwardMode mode) {
    if (split.empty()) {
        throw ContractError("perplexity: empty split");
    }
    model.set_train(false);
    double total_nll = 0.0;
    long total_count = 0;
    for (const BlockSequence& seq : split) {
        if (seq.blocks.empty()) {
            continue;
        }
        AuthorPass pass = process_author(model, seq, mode);
        long count = 0;
        Tensor nll = hulm_nll_sum(pass, seq, &count);
        total_nll += nll.item();
        total_count += count;
    }
    if (total_count == 0) {
        throw ContractError("perplexity: no next-token predictions in split");
    }
    return std::exp(total_nll / static_cast<double>(total_count));
}

namespace {

struct Moments {
    double mean_a = 0, mean_b = 0, var_a = 0, var_b = 0, cov = 0;
};

Moments moments(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    Moments m;
    for (size_t i = 0; i < n; ++i) {
        m.mean_a += a[i];
        m.mean_b += b[i];
    }
    m.mean_a /= static_cast<double>(n);
    m.mean_b /= static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
        const double da = a[i] - m.mean_a;
        const double db = b[i] - m.mean_b;
        m.var_a += da * da;
        m.var_b += db * db;
        m.cov += da * db;
    }
    return m;
}

}  // namespace

double pearson_r(const std::vector<double>& preds, const std::vector<double>& golds) {
    if (preds.size() != golds.size()) {
        throw ContractError("pearson_r: size mismatch");
    }
    if (preds.size() < 2) {
        throw ContractError("pearson_r: need at least 2 points");
    }
    const Moments m = moments(preds, golds);
    if (m.var_a <= 0.0 || m.var_b <= 0.0) {
        throw NumericError("pearson_r: zero variance makes the metric undefined");
    }
    return m.cov / std::sqrt(m.var_a * m.var_b);
}

double disattenuated_r(const std::vector<double>& preds, const std::vector<double>& golds,
                       double rel_pred, double rel_gold, bool* clipped) {
    if (rel_pred <= 0.0 || rel_pred > 1.0 || rel_gold <= 0.0 || rel_gold > 1.0) {
        throw ConfigError("disattenuated_r: reliabilities must be in (0, 1]");
    }
    double r = pearson_r(preds, golds) / std::sqrt(rel_pred * rel_gold);
    bool did_clip = false;
    if (r > 1.0) {
        r = 1.0;
        did_clip = true;
    } else if (r < -1.0) {
        r = -1.0;
        did_clip = true;
    }
    if (clipped != nullptr) {
        *clipped = did_clip;
    }
    return r;
}

double mse(const std::vector<double>& preds, const std::vector<double>& golds) {
    if (preds.size() != golds.size() || preds.empty()) {
        throw ContractError("mse: inputs must align and be non-empty");
    }
    double acc = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const double d = preds[i] - golds[i];
        acc += d * d;
    }
    return acc / static_cast<double>(preds.size());
}

double f1_score(const std::vector<int>& preds, const std::vector<int>& golds, F1Average average) {
    if (preds.size() != golds.size() || preds.empty()) {
        throw ContractError("f1_score: inputs must align and be non-empty");
    }
    std::set<int> labels(golds.begin(), golds.end());
    labels.insert(preds.begin(), preds.end());

    double weighted_sum = 0.0;
    double macro_sum = 0.0;
    long total_support = 0;
    for (int label : labels) {
        long tp = 0, fp = 0, fn = 0, support = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            const bool p = preds[i] == label;
            const bool g = golds[i] == label;
            tp += p && g;
            fp += p && !g;
            fn += !p && g;
            support += g;
        }
        // zero-support classes contribute F1 = 0
        const double f1 = (2 * tp + fp + fn) > 0
                              ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn)
                              : 0.0;
        macro_sum += f1;
        weighted_sum += f1 * static_cast<double>(support);
        total_support += support;
    }
    if (average == F1Average::macro) {
        return macro_sum / static_cast<double>(labels.size());
    }
    return weighted_sum / static_cast<double>(total_support);
}

std::vector<BucketScore> bucketed_metric(const PredictionSet& preds, BucketMetric metric,
                                         const BucketScheme& scheme, double rel_pred,
                                         double rel_gold) {
    preds.validate();
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (const auto& r : preds.rows) {
        if (r.bucket.empty()) {
            throw DataError("bucketed_metric: row '" + r.id + "' has no bucket key");
        }
        groups[r.bucket].first.push_back(r.prediction);
        groups[r.bucket].second.push_back(r.gold);
    }
    // scheme order first, then any extra bucket keys in sorted order
    std::vector<std::string> order;
    for (const std::string& name : scheme.names) {
        if (groups.count(name)) {
            order.push_back(name);
        }
    }
    for (const auto& [name, _] : groups) {
        if (std::find(order.begin(), order.end(), name) == order.end()) {
            order.push_back(name);
        }
    }

    std::vector<BucketScore> out;
    for (const std::string& name : order) {
        auto& [p, g] = groups[name];
        BucketScore bs;
        bs.bucket = name;
        bs.n = static_cast<int>(p.size());
        if (metric == BucketMetric::mse) {
            bs.score = mse(p, g);
        } else if (bs.n < 2) {
            bs.defined = false;  // excluded with a warning downstream
        } else {
            try {
                bs.score = metric == BucketMetric::pearson
                               ? pearson_r(p, g)
                               : disattenuated_r(p, g, rel_pred, rel_gold);
            } catch (const NumericError&) {
                bs.defined = false;
            }
        }
        out.push_back(bs);
    }
    return out;
}

double mean_error_disparity(const std::vector<double>& per_bucket_scores) {
    const size_t n = per_bucket_scores.size();
    if (n < 2) {
        throw ContractError("mean_error_disparity: need at least 2 buckets");
    }
    double total = 0.0;
    long pairs = 0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            total += std::abs(per_bucket_scores[i] - per_bucket_scores[j]);
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw ContractError("paired_t_test: samples must be paired");
    }
    const long n = static_cast<long>(a.size());
    if (n < 2) {
        throw ContractError("paired_t_test: need n >= 2");
    }
    double mean_d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        mean_d += a[i] - b[i];
    }
    mean_d /= static_cast<double>(n);
    double ss = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i] - mean_d;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));

    TTestResult res;
    res.n = n;
    if (sd == 0.0) {
        // degenerate: zero variance of differences
        res.t = mean_d == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
        res.p = mean_d == 0.0 ? 1.0 : 0.0;
        return res;
    }
    res.t = mean_d / (sd / std::sqrt(static_cast<double>(n)));
    res.p = stats::t_two_sided_p(res.t, static_cast<double>(n - 1));
    return res;
}

McNemarResult mcnemar_test(const std::vector<uint8_t>& correct_a,
                           const std::vector<uint8_t>& correct_b, bool force_exact) {
    if (correct_a.size() != correct_b.size()) {
        throw ContractError("mcnemar_test: item sets must align");
    }
    McNemarResult res;
    for (size_t i = 0; i < correct_a.size(); ++i) {
        res.b += correct_a[i] && !correct_b[i];
        res.c += !correct_a[i] && correct_b[i];
    }
    const long n = res.b + res.c;
    if (n == 0) {
        res.p = 1.0;
        res.note = "no discordant pairs";
        return res;
    }
    if (!force_exact && n >= 25) {
        // continuity-corrected chi-square
        const double num = std::abs(static_cast<double>(res.b - res.c)) - 1.0;
        const double x = num * num / static_cast<double>(n);
        res.p = stats::chi2_sf(x, 1.0);
        res.exact = false;
        return res;
    }
    const long k = std::min(res.b, res.c);
    res.p = std::min(1.0, 2.0 * stats::binom_cdf_leq(static_cast<int>(n), static_cast<int>(k), 0.5));
    res.exact = true;
    return res;
}

// ----------------------------------------------------------------------------
// prediction file io
// ----------------------------------------------------------------------------

namespace {

void check_field(const std::string& s, const char* what) {
    if (s.find(',') != std::string::npos || s.find('\n') != std::string::npos) {
        throw DataError(std::string("prediction ") + what + " must not contain commas or newlines: '" +
                        s + "'");
    }
}

}  // namespace

void write_predictions(const std::string& path, const PredictionSet& preds,
                       const std::map<std::string, std::string>& metadata) {
    preds.validate();
    std::string out;
    for (const auto& [k, v] : metadata) {
        check_field(k, "metadata key");
        check_field(v, "metadata value");
        out += "# " + k + "=" + v + "\n";
    }
    out += "# unit=";
    out += preds.unit == PredictionSet::Unit::author ? "author" : "document";
    out += "\n";
    out += "id,prediction,gold,bucket\n";
    for (const auto& r : preds.rows) {
        check_field(r.id, "id");
        check_field(r.bucket, "bucket");
        out += r.id + "," + format_double(r.prediction) + "," + format_double(r.gold) + "," +
               r.bucket + "\n";
    }
    write_file(path, out);
}

PredictionSet read_predictions(const std::string& path,
                               std::map<std::string, std::string>* metadata) {
    std::istringstream in(read_file(path));
    std::string line;
    PredictionSet ps;
    int lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            const size_t eq = line.find('=');
            if (eq != std::string::npos) {
                std::string key = line.substr(1, eq - 1);
                key.erase(0, key.find_first_not_of(' '));
                const std::string value = line.substr(eq + 1);
                if (key == "unit") {
                    ps.unit = value == "document" ? PredictionSet::Unit::document
                                                  : PredictionSet::Unit::author;
                }
                if (metadata != nullptr) {
                    (*metadata)[key] = value;
                }
            }
            continue;
        }
        if (!header_seen) {
            if (line != "id,prediction,gold,bucket") {
                throw ParseError("prediction file line " + std::to_string(lineno) +
                                 ": bad header '" + line + "'");
            }
            header_seen = true;
            continue;
        }
        std::vector<std::string> fields;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        fields.push_back(cur);
        if (fields.size() != 4) {
            throw ParseError("prediction file line " + std::to_string(lineno) + ": expected 4 fields");
        }
        PredictionRow r;
        r.id = fields[0];
        try {
            r.prediction = std::stod(fields[1]);
            r.gold = std::stod(fields[2]);
        } catch (const std::exception&) {
            throw ParseError("prediction file line " + std::to_string(lineno) + ": bad number");
        }
        r.bucket = fields[3];
        ps.rows.push_back(std::move(r));
    }
    if (!header_seen) {
        throw ParseError("prediction file missing header row: " + path);
    }
    ps.validate();
    return ps;
}

}  // namespace hulm
