#include "hulm/report.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hulm/errors.hpp"
#include "hulm/util.hpp"

namespace hulm {

using ordered_json = nlohmann::ordered_json;

bool metric_higher_is_better_name(const std::string& metric) {
    for (const char* down : {"ppl", "mse", "med", "loss"}) {
        if (metric.find(down) != std::string::npos) {
            return false;
        }
    }
    return true;
}

namespace {

void check_comparable(const std::vector<RunEval>& runs) {
    // split hashes, when present, must agree
    std::string hash;
    for (const auto& r : runs) {
        if (r.split_hash.empty()) {
            continue;
        }
        if (hash.empty()) {
            hash = r.split_hash;
        } else if (hash != r.split_hash) {
            throw ContractError("compare: runs were evaluated on different splits (hash " + hash +
                                " vs " + r.split_hash + ")");
        }
    }
    // prediction id sets must match task-wise
    for (size_t i = 0; i < runs.size(); ++i) {
        for (size_t j = i + 1; j < runs.size(); ++j) {
            for (const auto& [task, ps] : runs[i].predictions) {
                auto it = runs[j].predictions.find(task);
                if (it == runs[j].predictions.end()) {
                    continue;
                }
                std::set<std::string> ids_a, ids_b;
                for (const auto& row : ps.rows) {
                    ids_a.insert(row.id);
                }
                for (const auto& row : it->second.rows) {
                    ids_b.insert(row.id);
                }
                if (ids_a != ids_b) {
                    throw ContractError("compare: runs '" + runs[i].name + "' and '" +
                                        runs[j].name + "' score different items for task '" +
                                        task + "'");
                }
            }
        }
    }
}

// p-value of run vs best on a shared task, or nan when not computable
double significance(const RunEval& run, const RunEval& best, const std::string& task) {
    auto ita = run.predictions.find(task);
    auto itb = best.predictions.find(task);
    if (ita == run.predictions.end() || itb == best.predictions.end()) {
        return std::nan("");
    }
    std::map<std::string, const PredictionRow*> by_id;
    for (const auto& r : itb->second.rows) {
        by_id[r.id] = &r;
    }
    if (ita->second.unit == PredictionSet::Unit::author) {
        std::vector<double> err_a, err_b;
        for (const auto& r : ita->second.rows) {
            const PredictionRow* o = by_id.at(r.id);
            err_a.push_back((r.prediction - r.gold) * (r.prediction - r.gold));
            err_b.push_back((o->prediction - o->gold) * (o->prediction - o->gold));
        }
        if (err_a.size() < 2) {
            return std::nan("");
        }
        return paired_t_test(err_a, err_b).p;
    }
    std::vector<uint8_t> correct_a, correct_b;
    for (const auto& r : ita->second.rows) {
        const PredictionRow* o = by_id.at(r.id);
        correct_a.push_back(r.prediction == r.gold ? 1 : 0);
        correct_b.push_back(o->prediction == o->gold ? 1 : 0);
    }
    return mcnemar_test(correct_a, correct_b).p;
}

}  // namespace

CompareReport compare_report(const std::vector<RunEval>& runs) {
    if (runs.empty()) {
        throw ContractError("compare: no runs");
    }
    check_comparable(runs);

    // union of metric names, stable order
    std::vector<std::string> metric_names;
    for (const auto& r : runs) {
        for (const auto& [name, _] : r.metrics) {
            if (std::find(metric_names.begin(), metric_names.end(), name) == metric_names.end()) {
                metric_names.push_back(name);
            }
        }
    }
    std::sort(metric_names.begin(), metric_names.end());

    // best run per metric
    std::map<std::string, size_t> best_of;
    for (const auto& name : metric_names) {
        const bool up = metric_higher_is_better_name(name);
        size_t best = runs.size();
        for (size_t i = 0; i < runs.size(); ++i) {
            auto it = runs[i].metrics.find(name);
            if (it == runs[i].metrics.end()) {
                continue;
            }
            if (best == runs.size() ||
                (up ? it->second > runs[best].metrics.at(name)
                    : it->second < runs[best].metrics.at(name))) {
                best = i;
            }
        }
        if (best < runs.size()) {
            best_of[name] = best;
        }
    }

    // task union for significance columns
    std::vector<std::string> tasks;
    for (const auto& r : runs) {
        for (const auto& [t, _] : r.predictions) {
            if (std::find(tasks.begin(), tasks.end(), t) == tasks.end()) {
                tasks.push_back(t);
            }
        }
    }
    std::sort(tasks.begin(), tasks.end());

    ordered_json j;
    j["runs"] = ordered_json::array();
    std::ostringstream text;
    text << "run";
    for (const auto& m : metric_names) {
        text << "\t" << m;
    }
    for (const auto& t : tasks) {
        text << "\tp(" << t << ")";
    }
    text << "\n";

    for (size_t i = 0; i < runs.size(); ++i) {
        const RunEval& r = runs[i];
        ordered_json jr;
        jr["name"] = r.name;
        jr["metrics"] = ordered_json::object();
        text << r.name;
        for (const auto& m : metric_names) {
            auto it = r.metrics.find(m);
            if (it == r.metrics.end()) {
                text << "\t-";
                continue;
            }
            const bool is_best = best_of.count(m) && best_of[m] == i;
            // '*' marks best in column in the plain-text table
            text << "\t" << format_double(it->second) << (is_best ? "*" : "");
            jr["metrics"][m] = {{"value", it->second}, {"best", is_best}};
        }
        jr["significance"] = ordered_json::object();
        for (const auto& t : tasks) {
            // compare against the run marked best on any metric that shares
            // the task name prefix; fall back to run 0
            size_t best_idx = 0;
            for (const auto& [mname, bidx] : best_of) {
                if (mname.rfind(t, 0) == 0) {
                    best_idx = bidx;
                    break;
                }
            }
            if (i == best_idx) {
                text << "\t-";
                jr["significance"][t] = nullptr;
                continue;
            }
            const double p = significance(r, runs[best_idx], t);
            if (std::isnan(p)) {
                text << "\t-";
                jr["significance"][t] = nullptr;
            } else {
                text << "\t" << format_double(p) << (p < 0.05 ? "" : " (n.s.)");
                jr["significance"][t] = {{"p", p}, {"vs", runs[best_idx].name},
                                         {"significant", p < 0.05}};
            }
        }
        text << "\n";
        j["runs"].push_back(jr);
    }

    CompareReport rep;
    rep.text = text.str();
    rep.json = j.dump(2) + "\n";
    return rep;
}

}  // namespace hulm
