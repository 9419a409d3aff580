#include "icufeat/treelab.hpp"

#include "icufeat/errors.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

namespace icufeat::treelab {

namespace {

using i128 = __int128;

// Split quality ordered by the exact rational
//   S = (l0^2 + l1^2)/nL + (r0^2 + r1^2)/nR,
// larger is better (equivalent to smaller weighted Gini at fixed n).
// Integer cross-multiplication keeps comparisons float-free so tie-breaking
// is reproducible across platforms.
struct SplitScore {
    i128 num = -1; // A*nR + B*nL
    i128 den = 1;  // nL*nR

    bool better_than(const SplitScore& o) const {
        if (o.num < 0) return num >= 0;
        if (num < 0) return false;
        return num * o.den > o.num * den;
    }
};

SplitScore score_counts(long l0, long l1, long r0, long r1) {
    const i128 nl = l0 + l1, nr = r0 + r1;
    SplitScore s;
    s.num = (i128(l0) * l0 + i128(l1) * l1) * nr + (i128(r0) * r0 + i128(r1) * r1) * nl;
    s.den = nl * nr;
    return s;
}

double gini(long n0, long n1) {
    const double n = static_cast<double>(n0 + n1);
    if (n <= 0) return 0.0;
    const double p0 = n0 / n, p1 = n1 / n;
    return 1.0 - p0 * p0 - p1 * p1;
}

struct Grower {
    const FeatureTable& table;
    std::vector<int> rows; // unflagged row indices used for fitting
    int min_leaf;
    int max_depth;
    std::vector<TreeNode> nodes;

    int grow(const std::vector<int>& node_rows, int depth) {
        long n0 = 0, n1 = 0;
        for (int i : node_rows) (table.rows[i].class_label == 1 ? n1 : n0)++;

        TreeNode node;
        node.depth = depth;
        node.samples = static_cast<int>(node_rows.size());
        node.histogram = {n0, n1};
        node.impurity = gini(n0, n1);
        const int id = static_cast<int>(nodes.size());
        nodes.push_back(node);

        const bool pure = n0 == 0 || n1 == 0;
        if (pure || depth >= max_depth ||
            node_rows.size() < static_cast<size_t>(2 * min_leaf)) {
            return id;
        }

        int best_feature = -1;
        double best_threshold = 0.0;
        SplitScore best_score;

        const int n_features = static_cast<int>(table.columns.size());
        std::vector<std::pair<double, int>> vals(node_rows.size());
        for (int f = 0; f < n_features; ++f) {
            for (size_t i = 0; i < node_rows.size(); ++i) {
                const auto& row = table.rows[node_rows[i]];
                vals[i] = {row.values[f], row.class_label};
            }
            std::sort(vals.begin(), vals.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });

            long l0 = 0, l1 = 0;
            size_t i = 0;
            while (i < vals.size()) {
                const double v = vals[i].first;
                while (i < vals.size() && vals[i].first == v) {
                    (vals[i].second == 1 ? l1 : l0)++;
                    ++i;
                }
                if (i >= vals.size()) break; // no distinct value after v
                const long nl = l0 + l1;
                const long nr = static_cast<long>(vals.size()) - nl;
                if (nl < min_leaf || nr < min_leaf) continue;
                SplitScore s = score_counts(l0, l1, n0 - l0, n1 - l1);
                if (s.better_than(best_score)) {
                    best_score = s;
                    best_feature = f;
                    best_threshold = (v + vals[i].first) / 2.0;
                }
            }
        }

        if (best_feature < 0) return id;

        std::vector<int> left_rows, right_rows;
        for (int i : node_rows) {
            (table.rows[i].values[best_feature] <= best_threshold ? left_rows : right_rows)
                .push_back(i);
        }
        const int left = grow(left_rows, depth + 1);
        const int right = grow(right_rows, depth + 1);
        nodes[id].feature = best_feature;
        nodes[id].threshold = best_threshold;
        nodes[id].left = left;
        nodes[id].right = right;
        return id;
    }
};

TreeModel fit_rows(const FeatureTable& table, const std::vector<int>& rows, int min_leaf,
                   int max_depth) {
    if (min_leaf < 1) throw ParamError("fit_tree: min_leaf must be >= 1");
    if (max_depth < 0) throw ParamError("fit_tree: max_depth must be >= 0");
    long n0 = 0, n1 = 0;
    for (int i : rows) {
        const int y = table.rows[i].class_label;
        if (y != 0 && y != 1) {
            throw DataError("fit_tree: row " + table.rows[i].image_id +
                            " has class label outside {0,1}");
        }
        (y == 1 ? n1 : n0)++;
    }
    if (n0 == 0 || n1 == 0) {
        throw DegenerateTreeError("fit_tree: single-class input (class0=" + std::to_string(n0) +
                                  " class1=" + std::to_string(n1) + ")");
    }
    if (rows.size() < static_cast<size_t>(2 * min_leaf)) {
        throw ParamError("fit_tree: need at least 2*min_leaf = " + std::to_string(2 * min_leaf) +
                         " samples, got " + std::to_string(rows.size()));
    }

    Grower g{table, rows, min_leaf, max_depth, {}};
    g.grow(rows, 0);

    TreeModel model;
    model.nodes = std::move(g.nodes);
    model.feature_names = table.columns;
    model.min_leaf = min_leaf;
    model.max_depth = max_depth;
    model.mode = table.mode;
    return model;
}

} // namespace

int TreeModel::tree_depth() const {
    int d = 0;
    for (const auto& n : nodes) d = std::max(d, n.depth);
    return d;
}

TreeModel fit_tree(const FeatureTable& table, int min_leaf, int max_depth, uint64_t) {
    std::vector<int> rows;
    for (size_t i = 0; i < table.rows.size(); ++i) {
        if (!table.rows[i].flagged) rows.push_back(static_cast<int>(i));
    }
    return fit_rows(table, rows, min_leaf, max_depth);
}

std::vector<int> resolve_feature_map(const TreeModel& model,
                                     const std::vector<std::string>& columns) {
    std::map<std::string, int> lookup;
    for (size_t i = 0; i < columns.size(); ++i) lookup.emplace(columns[i], static_cast<int>(i));

    std::vector<int> fmap(model.feature_names.size(), -1);
    for (const auto& node : model.nodes) {
        if (node.is_leaf()) continue;
        const std::string& name = model.feature_names[node.feature];
        auto it = lookup.find(name);
        if (it == lookup.end()) {
            throw DataError("predict: row lacks feature '" + name + "'");
        }
        fmap[node.feature] = it->second;
    }
    return fmap;
}

int predict_mapped(const TreeModel& model, const std::vector<int>& feature_map,
                   std::span<const double> values) {
    if (model.nodes.empty()) throw DataError("predict: empty tree");
    int id = 0;
    while (!model.nodes[id].is_leaf()) {
        const TreeNode& n = model.nodes[id];
        const double v = values[feature_map[n.feature]];
        id = v <= n.threshold ? n.left : n.right;
    }
    const auto& h = model.nodes[id].histogram;
    return h[1] > h[0] ? 1 : 0;
}

int predict(const TreeModel& model, const std::vector<std::string>& columns,
            std::span<const double> values) {
    return predict_mapped(model, resolve_feature_map(model, columns), values);
}

EvalResult metrics(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) {
        throw ParamError("metrics: predictions and labels differ in length");
    }
    if (predictions.empty()) throw ParamError("metrics: empty input");
    EvalResult r;
    for (size_t i = 0; i < predictions.size(); ++i) {
        r.confusion[labels[i] ? 1 : 0][predictions[i] ? 1 : 0]++;
    }
    const long tn = r.confusion[0][0], fp = r.confusion[0][1];
    const long fn = r.confusion[1][0], tp = r.confusion[1][1];
    r.accuracy = static_cast<double>(tp + tn) / static_cast<double>(predictions.size());
    const long f1_den = 2 * tp + fp + fn;
    r.f1 = f1_den == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(f1_den);
    return r;
}

EvalResult leave_two_out_cv(const FeatureTable& table, int min_leaf, int max_depth, uint64_t) {
    struct Group {
        int cls = -1;
        std::vector<int> rows;
    };
    std::map<std::string, Group> groups; // ordered by id
    for (size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        if (row.flagged) continue;
        auto& g = groups[row.group_id];
        if (g.cls >= 0 && g.cls != row.class_label) {
            throw DataError("leave_two_out_cv: group " + row.group_id + " straddles classes");
        }
        g.cls = row.class_label;
        g.rows.push_back(static_cast<int>(i));
    }

    std::vector<std::string> by_class[2];
    for (const auto& [id, g] : groups) {
        if (g.cls == 0 || g.cls == 1) by_class[g.cls].push_back(id);
    }
    const size_t folds = std::min(by_class[0].size(), by_class[1].size());
    if (folds == 0) {
        throw DataError("leave_two_out_cv: smallest class has no groups (class0=" +
                        std::to_string(by_class[0].size()) + " class1=" +
                        std::to_string(by_class[1].size()) + ")");
    }

    EvalResult agg;
    std::vector<int> all_preds, all_labels;
    for (size_t k = 0; k < folds; ++k) {
        const std::string& g0 = by_class[0][k];
        const std::string& g1 = by_class[1][k];

        std::vector<int> train_rows;
        for (size_t i = 0; i < table.rows.size(); ++i) {
            const auto& row = table.rows[i];
            if (row.flagged || row.group_id == g0 || row.group_id == g1) continue;
            train_rows.push_back(static_cast<int>(i));
        }
        TreeModel model = fit_rows(table, train_rows, min_leaf, max_depth);
        auto fmap = resolve_feature_map(model, table.columns);

        FoldRecord fold;
        fold.fold = static_cast<int>(k);
        fold.held_group_c0 = g0;
        fold.held_group_c1 = g1;
        for (const std::string& gid : {g0, g1}) {
            for (int i : groups[gid].rows) {
                const auto& row = table.rows[i];
                if (row.augmented) continue; // only source images are scored
                const int pred = predict_mapped(model, fmap, row.values);
                all_preds.push_back(pred);
                all_labels.push_back(row.class_label);
                fold.scored++;
                fold.correct += pred == row.class_label;
            }
        }
        agg.per_fold.push_back(fold);
    }

    EvalResult scored = metrics(all_preds, all_labels);
    scored.per_fold = std::move(agg.per_fold);
    return scored;
}

std::vector<std::pair<std::string, int>> rank_features(const TreeModel& model) {
    struct Entry {
        std::string name;
        int samples;
        int depth;
    };
    std::vector<Entry> entries;
    for (const auto& n : model.nodes) {
        if (n.is_leaf()) continue;
        entries.push_back({model.feature_names[n.feature], n.samples, n.depth});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.samples != b.samples) return a.samples > b.samples;
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.name < b.name;
    });
    std::vector<std::pair<std::string, int>> out;
    out.reserve(entries.size());
    for (auto& e : entries) out.emplace_back(std::move(e.name), e.samples);
    return out;
}

nlohmann::json tree_to_json(const TreeModel& model) {
    nlohmann::json j;
    j["constraints"] = {{"min_leaf", model.min_leaf}, {"max_depth", model.max_depth}};
    j["mode"] = model.mode;
    j["feature_names"] = model.feature_names;

    // parent indices derived from child links
    std::vector<int> parent(model.nodes.size(), -1);
    for (size_t i = 0; i < model.nodes.size(); ++i) {
        const auto& n = model.nodes[i];
        if (n.is_leaf()) continue;
        parent[n.left] = static_cast<int>(i);
        parent[n.right] = static_cast<int>(i);
    }

    nlohmann::json nodes = nlohmann::json::array();
    for (size_t i = 0; i < model.nodes.size(); ++i) {
        const auto& n = model.nodes[i];
        nlohmann::json nj;
        nj["id"] = i;
        nj["parent"] = parent[i];
        nj["depth"] = n.depth;
        nj["samples"] = n.samples;
        nj["histogram"] = {n.histogram[0], n.histogram[1]};
        nj["impurity"] = n.impurity;
        if (n.is_leaf()) {
            nj["leaf"] = true;
        } else {
            nj["leaf"] = false;
            nj["feature"] = model.feature_names[n.feature];
            nj["threshold"] = n.threshold;
            nj["left"] = n.left;
            nj["right"] = n.right;
        }
        nodes.push_back(nj);
    }
    j["nodes"] = nodes;
    return j;
}

TreeModel tree_from_json(const nlohmann::json& j) {
    TreeModel model;
    model.min_leaf = j.at("constraints").at("min_leaf").get<int>();
    model.max_depth = j.at("constraints").at("max_depth").get<int>();
    model.mode = j.value("mode", "");
    model.feature_names = j.at("feature_names").get<std::vector<std::string>>();

    std::map<std::string, int> name_to_idx;
    for (size_t i = 0; i < model.feature_names.size(); ++i) {
        name_to_idx[model.feature_names[i]] = static_cast<int>(i);
    }

    for (const auto& nj : j.at("nodes")) {
        TreeNode n;
        n.depth = nj.at("depth").get<int>();
        n.samples = nj.at("samples").get<int>();
        n.histogram = {nj.at("histogram")[0].get<long>(), nj.at("histogram")[1].get<long>()};
        n.impurity = nj.at("impurity").get<double>();
        if (!nj.at("leaf").get<bool>()) {
            const std::string name = nj.at("feature").get<std::string>();
            auto it = name_to_idx.find(name);
            if (it == name_to_idx.end()) {
                throw SchemaError("tree json: feature '" + name + "' not in feature_names");
            }
            n.feature = it->second;
            n.threshold = nj.at("threshold").get<double>();
            n.left = nj.at("left").get<int>();
            n.right = nj.at("right").get<int>();
        }
        model.nodes.push_back(n);
    }
    if (model.nodes.empty()) throw SchemaError("tree json: no nodes");
    return model;
}

nlohmann::json eval_to_json(const EvalResult& r) {
    nlohmann::json j;
    j["accuracy"] = r.accuracy;
    j["f1"] = r.f1;
    j["confusion"] = {{r.confusion[0][0], r.confusion[0][1]},
                      {r.confusion[1][0], r.confusion[1][1]}};
    if (!r.per_fold.empty()) {
        nlohmann::json folds = nlohmann::json::array();
        for (const auto& f : r.per_fold) {
            folds.push_back({{"fold", f.fold},
                             {"held_group_c0", f.held_group_c0},
                             {"held_group_c1", f.held_group_c1},
                             {"scored", f.scored},
                             {"correct", f.correct}});
        }
        j["per_fold"] = folds;
    }
    return j;
}

} // namespace icufeat::treelab
