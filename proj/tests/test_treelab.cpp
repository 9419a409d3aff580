#include <doctest.h>

#include "fixtures.hpp"
#include "icufeat/errors.hpp"
#include "icufeat/treelab.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

using namespace icufeat;
using namespace icufeat::treelab;

namespace {

// Exhaustive depth-1 split search, recomputing counts from scratch per
// candidate. Ordering and tie-breaking per the fitting contract: best score,
// then lowest feature index, then lowest threshold.
struct OracleSplit {
    int feature = -1;
    double threshold = 0;
};

OracleSplit brute_force_split(const FeatureTable& t, int min_leaf) {
    using i128 = __int128;
    OracleSplit best;
    i128 best_num = -1, best_den = 1;
    const long n = static_cast<long>(t.rows.size());
    for (int f = 0; f < static_cast<int>(t.columns.size()); ++f) {
        std::vector<double> uniq;
        for (const auto& row : t.rows) uniq.push_back(row.values[f]);
        std::sort(uniq.begin(), uniq.end());
        uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
        for (size_t u = 0; u + 1 < uniq.size(); ++u) {
            const double thr = (uniq[u] + uniq[u + 1]) / 2.0;
            long l0 = 0, l1 = 0, r0 = 0, r1 = 0;
            for (const auto& row : t.rows) {
                const bool left = row.values[f] <= thr;
                if (left) {
                    (row.class_label ? l1 : l0)++;
                } else {
                    (row.class_label ? r1 : r0)++;
                }
            }
            const long nl = l0 + l1, nr = r0 + r1;
            if (nl < min_leaf || nr < min_leaf || nl + nr != n) continue;
            const i128 A = i128(l0) * l0 + i128(l1) * l1;
            const i128 B = i128(r0) * r0 + i128(r1) * r1;
            const i128 num = A * nr + B * nl;
            const i128 den = i128(nl) * nr;
            if (best_num < 0 || num * best_den > best_num * den) {
                best_num = num;
                best_den = den;
                best.feature = f;
                best.threshold = thr;
            }
        }
    }
    return best;
}

void audit_constraints(const TreeModel& m, const FeatureTable& t) {
    // route every training row; leaves must hold >= min_leaf of them
    std::vector<long> leaf_rows(m.nodes.size(), 0);
    for (const auto& row : t.rows) {
        int id = 0;
        while (!m.nodes[id].is_leaf()) {
            const auto& n = m.nodes[id];
            id = row.values[n.feature] <= n.threshold ? n.left : n.right;
        }
        leaf_rows[id]++;
    }
    for (size_t i = 0; i < m.nodes.size(); ++i) {
        CHECK(m.nodes[i].depth <= m.max_depth);
        if (m.nodes[i].is_leaf()) {
            CHECK(leaf_rows[i] >= m.min_leaf);
            CHECK(leaf_rows[i] == m.nodes[i].samples);
        }
    }
}

} // namespace

TEST_CASE("fit_tree separates a 1-D separable table at depth 1") {
    FeatureTable t = fixtures::separable_table(40, 1, 5);
    TreeModel m = fit_tree(t, 10, 4);
    CHECK(m.tree_depth() == 1);
    int correct = 0;
    for (const auto& row : t.rows) {
        correct += predict(m, t.columns, row.values) == row.class_label;
    }
    CHECK(correct == 80);
}

TEST_CASE("depth-1 greedy split equals the brute-force Gini minimizer") {
    for (uint64_t seed = 0; seed < 60; ++seed) {
        const int rows = 8 + static_cast<int>(seed * 7 % 57);
        const int feats = 1 + static_cast<int>(seed % 4);
        const int quant = seed % 3 == 0 ? 6 : 0; // duplicate-prone every third table
        FeatureTable t = fixtures::random_table(rows, feats, 1000 + seed, quant);
        const int min_leaf = 1 + static_cast<int>(seed % 3);
        if (t.rows.size() < static_cast<size_t>(2 * min_leaf)) continue;

        OracleSplit want = brute_force_split(t, min_leaf);
        TreeModel m = fit_tree(t, min_leaf, 1);
        if (want.feature < 0) {
            CHECK(m.nodes[0].is_leaf());
        } else {
            REQUIRE_FALSE(m.nodes[0].is_leaf());
            CHECK(m.nodes[0].feature == want.feature);
            CHECK(m.nodes[0].threshold == want.threshold);
        }
    }
}

TEST_CASE("fitted trees respect min_leaf and max_depth on random tables") {
    for (uint64_t seed = 0; seed < 40; ++seed) {
        FeatureTable t = fixtures::random_table(30 + static_cast<int>(seed % 50), 3, seed,
                                                seed % 2 ? 8 : 0);
        const int min_leaf = 2 + static_cast<int>(seed % 5);
        const int max_depth = 1 + static_cast<int>(seed % 4);
        if (t.rows.size() < static_cast<size_t>(2 * min_leaf)) continue;
        TreeModel m = fit_tree(t, min_leaf, max_depth);
        audit_constraints(m, t);
    }
}

TEST_CASE("training predictions are invariant under strictly increasing transforms") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        FeatureTable t = fixtures::random_table(40, 3, 7000 + seed, seed % 2 ? 5 : 0);
        TreeModel m = fit_tree(t, 3, 3);
        std::vector<int> before;
        for (const auto& row : t.rows) before.push_back(predict(m, t.columns, row.values));

        FeatureTable warped = t;
        for (auto& row : warped.rows) {
            row.values[0] = std::exp(3.0 * row.values[0]);          // strictly increasing
            row.values[1] = std::atan(8.0 * (row.values[1] - 0.5)); // strictly increasing
            if (row.values.size() > 2) row.values[2] = row.values[2] * 5.0 - 2.0;
        }
        TreeModel m2 = fit_tree(warped, 3, 3);
        for (size_t i = 0; i < warped.rows.size(); ++i) {
            CHECK(predict(m2, warped.columns, warped.rows[i].values) == before[i]);
        }
    }
}

TEST_CASE("predict follows thresholds and breaks leaf ties toward class 0") {
    FeatureTable t;
    t.columns = {"x"};
    auto add = [&](double v, int y, const std::string& id) {
        FeatureTable::Row r;
        r.image_id = id;
        r.group_id = id;
        r.class_label = y;
        r.values = {v};
        t.rows.push_back(r);
    };
    for (int i = 0; i < 20; ++i) add(0.1 + i * 0.001, 0, "a" + std::to_string(i));
    for (int i = 0; i < 20; ++i) add(0.9 + i * 0.001, 1, "b" + std::to_string(i));
    TreeModel m = fit_tree(t, 20, 1);
    REQUIRE_FALSE(m.nodes[0].is_leaf());
    CHECK(predict(m, t.columns, std::vector<double>{0.7}) == 1);
    CHECK(predict(m, t.columns, std::vector<double>{0.2}) == 0);

    // root-only tree with a (30,10) histogram always answers 0
    TreeModel root;
    root.feature_names = {"x"};
    TreeNode leaf;
    leaf.samples = 40;
    leaf.histogram = {30, 10};
    root.nodes = {leaf};
    CHECK(predict(root, t.columns, std::vector<double>{0.0}) == 0);

    // exact tie answers 0
    root.nodes[0].histogram = {10, 10};
    CHECK(predict(root, t.columns, std::vector<double>{0.0}) == 0);
}

TEST_CASE("predict names the missing feature") {
    FeatureTable t = fixtures::separable_table(25, 2, 3);
    TreeModel m = fit_tree(t, 5, 2);
    CHECK_THROWS_WITH_AS(predict(m, {"unrelated"}, std::vector<double>{1.0}),
                         doctest::Contains("f0"), DataError);
}

TEST_CASE("fit_tree rejects degenerate inputs") {
    FeatureTable t = fixtures::separable_table(30, 2, 1);
    for (auto& row : t.rows) row.class_label = 0;
    CHECK_THROWS_AS(fit_tree(t, 5, 3), DegenerateTreeError);

    FeatureTable small = fixtures::separable_table(3, 2, 2);
    CHECK_THROWS_AS(fit_tree(small, 20, 3), ParamError);
}

TEST_CASE("flagged rows are excluded from fitting") {
    FeatureTable t = fixtures::separable_table(30, 1, 9);
    // poison flagged rows with inverted labels; they must not affect the split
    for (int i = 0; i < 10; ++i) {
        FeatureTable::Row r = t.rows[i];
        r.image_id += "_flagged";
        r.group_id = r.image_id;
        r.class_label = 1 - r.class_label;
        r.flagged = true;
        t.rows.push_back(r);
    }
    TreeModel m = fit_tree(t, 10, 2);
    int correct = 0, considered = 0;
    for (const auto& row : t.rows) {
        if (row.flagged) continue;
        ++considered;
        correct += predict(m, t.columns, row.values) == row.class_label;
    }
    CHECK(considered == 60);
    CHECK(correct == 60);
    CHECK(m.nodes[0].samples == 60);
}

TEST_CASE("metrics matches the worked examples") {
    {
        std::vector<int> p = {0, 1, 0, 1}, l = {0, 1, 0, 1};
        auto r = metrics(p, l);
        CHECK(r.accuracy == 1.0);
        CHECK(r.f1 == 1.0);
    }
    {
        std::vector<int> p = {0, 0, 0, 0}, l = {0, 0, 1, 1};
        auto r = metrics(p, l);
        CHECK(r.accuracy == 0.5);
        CHECK(r.f1 == 0.0); // undefined F1 degrades to 0
    }
    {
        std::vector<int> p = {1, 1, 0, 0}, l = {1, 0, 1, 0};
        auto r = metrics(p, l);
        CHECK(r.accuracy == 0.5);
        CHECK(r.f1 == 0.5);
        CHECK(r.confusion[0][0] == 1);
        CHECK(r.confusion[0][1] == 1);
        CHECK(r.confusion[1][0] == 1);
        CHECK(r.confusion[1][1] == 1);
    }
    std::vector<int> p = {0}, l2 = {0, 1};
    CHECK_THROWS_AS(metrics(p, l2), ParamError);
}

TEST_CASE("leave_two_out_cv: fold count is the smaller class's group count") {
    FeatureTable t;
    t.columns = {"f0"};
    Rng rng(44);
    auto add_group = [&](int cls, int idx) {
        FeatureTable::Row r;
        r.group_id = "c" + std::to_string(cls) + "_g" + std::to_string(idx);
        r.image_id = r.group_id;
        r.class_label = cls;
        r.values = {rng.next_double()};
        t.rows.push_back(r);
    };
    for (int g = 0; g < 60; ++g) add_group(0, g);
    for (int g = 0; g < 40; ++g) add_group(1, g);
    auto eval = leave_two_out_cv(t, 1, 2);
    CHECK(eval.per_fold.size() == 40);
    long scored = 0;
    for (const auto& f : eval.per_fold) scored += f.scored;
    CHECK(scored == 80); // one source image per held-out group, both classes
    const auto& c = eval.confusion;
    CHECK(c[0][0] + c[0][1] + c[1][0] + c[1][1] == 80);
}

TEST_CASE("leave_two_out_cv scores only source images and keeps groups intact") {
    FeatureTable t = fixtures::grouped_table(8, 4, 2, 77, true);
    auto eval = leave_two_out_cv(t, 2, 3);
    CHECK(eval.per_fold.size() == 8);
    for (const auto& fold : eval.per_fold) {
        CHECK(fold.scored == 2);
        CHECK(fold.held_group_c0 != fold.held_group_c1);
    }
    CHECK(eval.accuracy == 1.0); // separable
    std::set<std::string> held0, held1;
    for (const auto& fold : eval.per_fold) {
        CHECK(held0.insert(fold.held_group_c0).second); // each group held out once
        CHECK(held1.insert(fold.held_group_c1).second);
    }
}

TEST_CASE("leave_two_out_cv does not leak augmented copies into training") {
    // augmented rows are exact copies of their source; leakage would let a
    // deep tree memorize the held-out source and score near-perfectly
    Rng rng(99);
    FeatureTable t;
    for (int f = 0; f < 3; ++f) t.columns.push_back("f" + std::to_string(f));
    for (int cls = 0; cls <= 1; ++cls) {
        for (int g = 0; g < 12; ++g) {
            std::vector<double> v = {rng.next_double(), rng.next_double(), rng.next_double()};
            const std::string gid = "c" + std::to_string(cls) + "_g" + std::to_string(g);
            for (int k = 0; k < 4; ++k) {
                FeatureTable::Row r;
                r.group_id = gid;
                r.image_id = gid + (k ? "_aug" + std::to_string(k) : "");
                r.augmented = k != 0;
                r.class_label = cls; // random labels w.r.t. features
                r.values = v;
                t.rows.push_back(r);
            }
        }
    }
    auto eval = leave_two_out_cv(t, 1, 12);
    CHECK(eval.accuracy < 0.8); // memorization would give ~1.0
}

TEST_CASE("leave_two_out_cv accuracy hovers near 0.5 on random labels") {
    double sum = 0;
    int n = 0;
    for (uint64_t seed = 0; seed < 6; ++seed) {
        FeatureTable t = fixtures::grouped_table(15, 1, 4, 300 + seed, false);
        auto eval = leave_two_out_cv(t, 3, 3);
        sum += eval.accuracy;
        ++n;
    }
    const double mean = sum / n;
    CHECK(mean > 0.3);
    CHECK(mean < 0.7);
}

TEST_CASE("rank_features orders internal nodes by samples, depth, name") {
    FeatureTable t = fixtures::separable_table(40, 3, 13);
    // second-level structure: make feature 1 split one side
    TreeModel m = fit_tree(t, 5, 3);
    auto ranked = rank_features(m);
    REQUIRE_FALSE(ranked.empty());
    CHECK(ranked[0].second == static_cast<int>(t.rows.size()));
    for (size_t i = 1; i < ranked.size(); ++i) CHECK(ranked[i - 1].second >= ranked[i].second);

    TreeModel root;
    root.feature_names = {"x"};
    TreeNode leaf;
    leaf.samples = 10;
    leaf.histogram = {7, 3};
    root.nodes = {leaf};
    CHECK(rank_features(root).empty());
}

TEST_CASE("tree json round trip preserves predictions and metadata") {
    FeatureTable t = fixtures::random_table(50, 3, 888, 4);
    TreeModel m = fit_tree(t, 4, 3);
    auto j = tree_to_json(m);
    TreeModel back = tree_from_json(j);
    CHECK(back.min_leaf == m.min_leaf);
    CHECK(back.max_depth == m.max_depth);
    CHECK(back.nodes.size() == m.nodes.size());
    for (const auto& row : t.rows) {
        CHECK(predict(back, t.columns, row.values) == predict(m, t.columns, row.values));
    }
    // parent indices consistent
    for (const auto& nj : j["nodes"]) {
        if (nj["parent"].get<int>() >= 0) {
            const auto& pj = j["nodes"][nj["parent"].get<int>()];
            const int id = nj["id"].get<int>();
            CHECK((pj["left"].get<int>() == id || pj["right"].get<int>() == id));
        }
    }
}
