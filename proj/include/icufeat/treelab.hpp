#pragma once

#include "icufeat/featuretable.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace icufeat::treelab {

struct TreeNode {
    int feature = -1;       // column index into TreeModel::feature_names; -1 for leaves
    double threshold = 0.0; // rows with value <= threshold go left
    double impurity = 0.0;  // Gini at the node
    int samples = 0;
    std::array<long, 2> histogram{0, 0}; // class counts [n0, n1]
    int left = -1;
    int right = -1;
    int depth = 0;

    bool is_leaf() const { return left < 0; }
};

/// Axis-aligned binary decision tree with pruning constraints.
struct TreeModel {
    std::vector<TreeNode> nodes; // nodes[0] is the root
    std::vector<std::string> feature_names;
    int min_leaf = 20;
    int max_depth = 4;
    std::string mode;

    int tree_depth() const;
};

/// Greedy CART growth minimizing Gini impurity. Split candidates are the
/// midpoints between consecutive sorted unique feature values; score ties
/// break to the lower feature index, then the lower threshold. Flagged rows
/// are excluded. The seed is accepted for interface stability; fitting is
/// fully deterministic and does not consume it.
TreeModel fit_tree(const FeatureTable& table, int min_leaf, int max_depth, uint64_t seed = 0);

/// Majority class of the reached leaf; exact ties predict class 0.
/// `columns` describes the layout of `values`; a referenced feature missing
/// from it is a DataError naming the feature.
int predict(const TreeModel& model, const std::vector<std::string>& columns,
            std::span<const double> values);

/// One resolved index per model feature (-1 when absent and unreferenced).
std::vector<int> resolve_feature_map(const TreeModel& model,
                                     const std::vector<std::string>& columns);
int predict_mapped(const TreeModel& model, const std::vector<int>& feature_map,
                   std::span<const double> values);

struct FoldRecord {
    int fold = 0;
    std::string held_group_c0;
    std::string held_group_c1;
    int scored = 0;
    int correct = 0;
};

struct EvalResult {
    double accuracy = 0.0;
    double f1 = 0.0; // positive class 1
    std::array<std::array<long, 2>, 2> confusion{{{0, 0}, {0, 0}}}; // [[TN,FP],[FN,TP]]
    std::vector<FoldRecord> per_fold;
};

/// Group-level leave-two-out: fold count equals the smaller class's group
/// count; fold k holds out the k-th group of each class (groups sorted by
/// id). Augmented rows follow their group out of the training side and only
/// source (non-augmented) rows of held-out groups are scored.
EvalResult leave_two_out_cv(const FeatureTable& table, int min_leaf, int max_depth,
                            uint64_t seed = 0);

EvalResult metrics(std::span<const int> predictions, std::span<const int> labels);

/// Internal nodes ranked by training samples under the node, descending;
/// ties by shallower depth, then feature name.
std::vector<std::pair<std::string, int>> rank_features(const TreeModel& model);

nlohmann::json tree_to_json(const TreeModel& model);
TreeModel tree_from_json(const nlohmann::json& j);
nlohmann::json eval_to_json(const EvalResult& r);

} // namespace icufeat::treelab
