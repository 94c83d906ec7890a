#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ecan/probe.hpp"

using namespace ecan;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

// Unlabeled Gaussian blob: rows ~ N(mean, I).
Dataset gaussian_blob(int n, int D, const Vector& mean, std::uint64_t seed,
                      const std::string& domain) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Dataset ds;
    ds.domain = domain;
    ds.features.resize(n, D);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < D; ++d) ds.features(i, d) = mean(d) + normal(rng);
    return ds;
}

// Two balanced classes at -sep/2 and +sep/2 along the first coordinate.
Dataset two_class_blob(int n, int D, double sep, std::uint64_t seed, const std::string& domain) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    Dataset ds;
    ds.domain = domain;
    ds.features.resize(n, D);
    Labels y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int label = coin(rng) ? 1 : 0;
        y[static_cast<std::size_t>(i)] = label;
        for (int d = 0; d < D; ++d) ds.features(i, d) = normal(rng);
        ds.features(i, 0) += (label == 1 ? sep / 2.0 : -sep / 2.0);
    }
    ds.labels = y;
    return ds;
}

}  // namespace

TEST_CASE("dataset recognition sits at chance for identical generators", "[probe]") {
    // Three independent draws from the same N(0, I) generator in 8 dimensions.
    const Vector zero = Vector::Zero(8);
    std::vector<Dataset> sets = {gaussian_blob(800, 8, zero, 11, "a"),
                                 gaussian_blob(800, 8, zero, 22, "b"),
                                 gaussian_blob(800, 8, zero, 33, "c")};
    const RecognitionResult r = dataset_recognition(sets, 500, 200, 10, 7);

    // Chance level for 3 datasets is 33.3%; indistinguishable
    // generators must score within 5 points of it.
    CHECK(std::abs(r.mean_accuracy - 1.0 / 3.0) <= 0.05);

    // Bookkeeping: 10 trials, confusion rows sum to trials * n_test.
    REQUIRE(r.per_trial.size() == 10);
    REQUIRE(r.confusion.rows() == 3);
    REQUIRE(r.confusion.cols() == 3);
    for (int i = 0; i < 3; ++i) CHECK(r.confusion.row(i).sum() == 10 * 200);
    double mean = 0.0;
    for (double a : r.per_trial) mean += a;
    CHECK_THAT(r.mean_accuracy, Catch::Matchers::WithinAbs(mean / 10.0, 1e-15));
    // accuracy is recoverable from the confusion diagonal
    CHECK_THAT(r.mean_accuracy,
               Catch::Matchers::WithinAbs(
                   static_cast<double>(r.confusion.diagonal().sum()) / (3.0 * 10.0 * 200.0),
                   1e-12));
}

TEST_CASE("dataset recognition separates generators two sigmas apart", "[probe]") {
    // Generator k is displaced by 2*sigma*k in every coordinate (sigma = 1).
    std::vector<Dataset> sets;
    for (int k = 0; k < 3; ++k) {
        Vector mean = Vector::Constant(8, 2.0 * k);
        sets.push_back(gaussian_blob(800, 8, mean, 100 + static_cast<std::uint64_t>(k),
                                     std::string(1, static_cast<char>('a' + k))));
    }
    const RecognitionResult r = dataset_recognition(sets, 500, 200, 10, 7);
    // Well-separated generators must be recognized at >= 90%.
    CHECK(r.mean_accuracy >= 0.90);
}

TEST_CASE("dataset recognition is deterministic and validates inputs", "[probe]") {
    const Vector zero = Vector::Zero(4);
    std::vector<Dataset> sets = {gaussian_blob(120, 4, zero, 1, "a"),
                                 gaussian_blob(120, 4, zero, 2, "b")};

    SECTION("same seed reproduces accuracy and confusion exactly") {
        const RecognitionResult r1 = dataset_recognition(sets, 80, 30, 3, 42);
        const RecognitionResult r2 = dataset_recognition(sets, 80, 30, 3, 42);
        CHECK(r1.mean_accuracy == r2.mean_accuracy);
        CHECK(r1.confusion == r2.confusion);
        CHECK(r1.per_trial == r2.per_trial);
    }
    SECTION("fewer samples than n_train + n_test") {
        CHECK_THROWS_MATCHES(dataset_recognition(sets, 100, 30, 3, 42), ContractViolation,
                             MessageMatches(ContainsSubstring("fewer than 130")));
    }
    SECTION("a single dataset is rejected") {
        std::vector<Dataset> one = {sets[0]};
        CHECK_THROWS_AS(dataset_recognition(one, 10, 10, 1, 0), ContractViolation);
    }
    SECTION("dimension mismatch is rejected") {
        std::vector<Dataset> bad = {sets[0], gaussian_blob(120, 5, Vector::Zero(5), 3, "c")};
        CHECK_THROWS_MATCHES(dataset_recognition(bad, 10, 10, 1, 0), ContractViolation,
                             MessageMatches(ContainsSubstring("dimensions")));
    }
    SECTION("non-positive protocol sizes are rejected") {
        CHECK_THROWS_AS(dataset_recognition(sets, 0, 30, 3, 42), ContractViolation);
        CHECK_THROWS_AS(dataset_recognition(sets, 80, 30, 0, 42), ContractViolation);
    }
}

TEST_CASE("cross-dataset matrix shows no drop for duplicated datasets", "[probe]") {
    // Two independent draws from one well-separated 2-class generator: the
    // cross accuracy should match the in-dataset accuracy (drop <= 1 point).
    std::vector<Dataset> sets = {two_class_blob(400, 4, 4.0, 5, "left"),
                                 two_class_blob(400, 4, 4.0, 6, "right")};
    const CrossMatrix cm = cross_dataset_matrix(sets, 19);

    REQUIRE(cm.accuracy.rows() == 2);
    REQUIRE(cm.names == std::vector<std::string>{"left", "right"});
    for (int i = 0; i < 2; ++i) {
        INFO("row " << i << " self " << cm.accuracy(i, i) << " others " << cm.mean_others(i));
        CHECK(cm.percent_drop(i) <= 1.0);
    }

    // Summary columns are recomputable from the accuracy matrix.
    for (int i = 0; i < 2; ++i) {
        double others = 0.0;
        int cnt = 0;
        for (int j = 0; j < 2; ++j)
            if (j != i) {
                others += cm.accuracy(i, j);
                ++cnt;
            }
        others /= cnt;
        CHECK_THAT(cm.mean_others(i), Catch::Matchers::WithinAbs(others, 1e-15));
        CHECK(cm.percent_drop(i) ==
              std::round((cm.accuracy(i, i) - others) / cm.accuracy(i, i) * 100.0));
    }
}

TEST_CASE("cross-dataset matrix flags a label-shuffled dataset", "[probe]") {
    std::vector<Dataset> sets = {two_class_blob(400, 4, 4.0, 5, "a"),
                                 two_class_blob(400, 4, 4.0, 6, "b"),
                                 two_class_blob(400, 4, 4.0, 7, "scrambled")};
    // Destroy the label-feature association in the third dataset.
    std::mt19937_64 rng(99);
    std::shuffle(sets[2].labels->begin(), sets[2].labels->end(), rng);

    const CrossMatrix cm = cross_dataset_matrix(sets, 19);
    // Models trained on the clean datasets score near chance (50%) on the
    // scrambled one, while scoring high on each other.
    for (int i = 0; i < 2; ++i) {
        CHECK(std::abs(cm.accuracy(i, 2) - 0.5) <= 0.10);
        for (int j = 0; j < 2; ++j) CHECK(cm.accuracy(i, j) >= 0.9);
    }
    // The scrambled dataset cannot even predict itself.
    CHECK(std::abs(cm.accuracy(2, 2) - 0.5) <= 0.20);
}

TEST_CASE("cross-dataset matrix validates inputs and is deterministic", "[probe]") {
    std::vector<Dataset> sets = {two_class_blob(100, 3, 3.0, 1, "a"),
                                 two_class_blob(100, 3, 3.0, 2, "b")};

    SECTION("deterministic for a fixed seed") {
        const CrossMatrix c1 = cross_dataset_matrix(sets, 4);
        const CrossMatrix c2 = cross_dataset_matrix(sets, 4);
        CHECK(c1.accuracy == c2.accuracy);
        CHECK(c1.percent_drop == c2.percent_drop);
    }
    SECTION("unlabeled dataset is rejected") {
        std::vector<Dataset> bad = sets;
        bad[1].labels.reset();
        CHECK_THROWS_MATCHES(cross_dataset_matrix(bad, 4), ContractViolation,
                             MessageMatches(ContainsSubstring("unlabeled")));
    }
    SECTION("single dataset is rejected") {
        std::vector<Dataset> one = {sets[0]};
        CHECK_THROWS_AS(cross_dataset_matrix(one, 4), ContractViolation);
    }
    SECTION("tiny dataset is rejected") {
        std::vector<Dataset> bad = sets;
        bad[0].features = bad[0].features.topRows(3);
        bad[0].labels = Labels{0, 1, 0};
        CHECK_THROWS_MATCHES(cross_dataset_matrix(bad, 4), ContractViolation,
                             MessageMatches(ContainsSubstring("80/20")));
    }
}

TEST_CASE("probe CSV writers emit parseable tables", "[probe]") {
    std::vector<Dataset> sets = {two_class_blob(100, 3, 3.0, 1, "a"),
                                 two_class_blob(100, 3, 3.0, 2, "b")};
    const CrossMatrix cm = cross_dataset_matrix(sets, 4);

    const std::string mpath = "probe_matrix_tmp.csv";
    const std::string spath = "probe_summary_tmp.csv";
    write_cross_matrix_csv(cm, mpath, spath);

    std::ifstream m(mpath);
    REQUIRE(m.good());
    std::string line;
    std::getline(m, line);
    CHECK(line == "train,a,b");
    std::getline(m, line);
    // first cell of the first data row is the name, second parses back to
    // the stored double exactly
    REQUIRE(line.rfind("a,", 0) == 0);
    const std::string cell = line.substr(2, line.find(',', 2) - 2);
    double parsed = 0.0;
    std::from_chars(cell.data(), cell.data() + cell.size(), parsed);
    CHECK(parsed == cm.accuracy(0, 0));

    std::ifstream s(spath);
    REQUIRE(s.good());
    std::getline(s, line);
    CHECK(line == "dataset,self,mean_others,percent_drop");
    int rows = 0;
    while (std::getline(s, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);

    // confusion writer round-trips integers
    Eigen::MatrixXi conf(2, 2);
    conf << 190, 10, 4, 196;
    write_confusion_csv(conf, {"a", "b"}, mpath);
    std::ifstream c(mpath);
    std::getline(c, line);
    CHECK(line == "true,a,b");
    std::getline(c, line);
    CHECK(line == "a,190,10");
    std::getline(c, line);
    CHECK(line == "b,4,196");

    std::remove(mpath.c_str());
    std::remove(spath.c_str());
}
