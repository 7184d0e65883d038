// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ilab/geometry.hpp"

using namespace ilab;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(Shape{r, c});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

CosineMatrix raw(Tensor values, std::size_t task = 1) {
  CosineMatrix m;
  m.task = task;
  m.values = std::move(values);
  return m;
}

}  // namespace

TEST_CASE("class centres are per-class means", "[geometry]") {
  const Tensor f = Tensor::matrix(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor c = class_centers(f, {1, 0, 1, 2}, 3);
  CHECK(c == Tensor::matrix(3, 2, {3, 4, 3, 4, 7, 8}));
  CHECK_THROWS_AS(class_centers(f, {0, 0, 0, 0}, 2), DataError);
  CHECK_THROWS_AS(class_centers(f, {0, 1, 5, 0}, 2), InputError);
  CHECK_THROWS_AS(class_centers(f, {0, 1}, 2), DimensionError);

  // order of samples within a class changes nothing beyond rounding
  Rng rng(3);
  const Tensor g = random_matrix(rng, 30, 4);
  std::vector<std::size_t> labels(30);
  for (std::size_t i = 0; i < 30; ++i) labels[i] = i % 3;
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Tensor gp(Shape{30, 4});
  std::vector<std::size_t> lp(30);
  for (std::size_t i = 0; i < 30; ++i) {
    std::copy_n(g.row(perm[i]).data(), 4, gp.row(i).data());
    lp[i] = labels[perm[i]];
  }
  const Tensor a = class_centers(g, labels, 3), b = class_centers(gp, lp, 3);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::abs(a[k] - b[k]) <= 1e-12);
}

TEST_CASE("cosine matrices compare every centre with every embedding", "[geometry]") {
  const Tensor centers = Tensor::matrix(3, 2, {1, 0, 0, 2, -1, 0});
  const Tensor emb = Tensor::matrix(2, 2, {3, 0, 1, 1});
  const CosineMatrix m = cosine_matrix(emb, centers, 2, 4, {7, 8});
  REQUIRE(m.values.shape() == Shape{3, 2});
  CHECK(m.values.at(0, 0) == Catch::Approx(1.0));
  CHECK(m.values.at(1, 0) == Catch::Approx(0.0).margin(1e-15));
  CHECK(m.values.at(2, 0) == Catch::Approx(-1.0));
  CHECK(m.values.at(1, 1) == Catch::Approx(1.0 / std::sqrt(2.0)));
  CHECK(m.task == 2);
  CHECK(m.measured_at == 4);
  CHECK_THROWS_AS(cosine_matrix(Tensor(Shape{2, 3}), centers), ContractError);
  // a zero vector is guarded, not divided by zero
  CHECK(cosine_matrix(Tensor(Shape{1, 2}), centers).values.at(0, 0) == 0.0);
}

TEST_CASE("moving distance examples", "[geometry]") {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  CHECK(moving_distance(raw(eye), raw(eye)) == 0.0);
  CHECK(moving_distance(raw(eye), raw(Tensor::matrix(2, 2, {0.5, 0.5, 0.5, 0.5}))) == 0.5);
  CHECK_THROWS_AS(moving_distance(raw(eye), raw(Tensor(Shape{2, 3}))), ContractError);
  CHECK_THROWS_AS(moving_distance(raw(eye, 1), raw(eye, 2)), ContractError);
}

TEST_CASE("moving distance equals a brute-force double loop", "[geometry][oracle]") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.index(20), n = 1 + rng.index(6);
    Tensor a(Shape{m, n}), b(Shape{m, n});
    for (auto& v : a.values()) v = 2.0 * rng.uniform() - 1.0;
    for (auto& v : b.values()) v = 2.0 * rng.uniform() - 1.0;
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) s += std::abs(b.at(i, j) - a.at(i, j));
    const double md = moving_distance(raw(a), raw(b));
    CHECK(std::abs(md - s / static_cast<double>(m * n)) <= 1e-12);
    CHECK(md >= 0.0);
    CHECK(moving_distance(raw(b), raw(b)) == 0.0);
  }
}

TEST_CASE("moving distance report is zero on the diagonal and for unchanged snapshots", "[geometry]") {
  TaskStream s;
  s.label_names = {"a", "b", "c", "d"};
  s.tasks = {Task{0, {0, 1}, {}, {}}, Task{1, {2, 3}, {}, {}}};
  Rng rng(2);
  const Tensor centers = random_matrix(rng, 4, 3);
  ClassifierBank bank(Scenario::CIL, 3);
  bank.allocate({{0, {0, 1}}, {1, {2, 3}}}, HeadKind::Linear, 5);
  const auto report = moving_distance_report(s, {centers, centers}, {bank.heads(), bank.heads()}, "observed");
  REQUIRE(report.size() == 3);
  for (const auto& e : report) {
    CHECK(e.value == 0.0);
    CHECK(e.source == "observed");
  }
  CHECK(report[1].task == 1);
  CHECK(report[1].at == 2);

  ClassifierBank moved = bank;
  for (auto& v : moved.head(0).weights.values()) v += 0.5;
  const auto drift = moving_distance_report(s, {centers, centers}, {bank.heads(), moved.heads()}, "observed");
  CHECK(drift[1].value > 0.0);
  CHECK(drift[2].value == 0.0);  // task 2 at task 2
  CHECK_THROWS_AS(moving_distance_report(s, {centers}, {bank.heads()}, "observed"), ContractError);
}

TEST_CASE("norm report averages row norms per head", "[geometry]") {
  ClassifierBank bank(Scenario::CIL, 2);
  bank.allocate({{0, {0, 1}}, {1, {2, 3}}}, HeadKind::Linear, 1);
  bank.head(0).weights = Tensor::matrix(2, 2, {1, 0, 0, 1});
  bank.head(1).weights = Tensor::matrix(2, 2, {3, 4, 0, 0});
  const NormReport r = norm_report(bank);
  CHECK(r.task_ids == std::vector<std::size_t>{1, 2});
  CHECK(r.mean_norm == std::vector<double>{1.0, 2.5});
  CHECK(r.class_norms[1] == std::vector<double>{5.0, 0.0});
  bank.head(0).weights = Tensor::matrix(2, 2, {0, 0, 2, 0});
  CHECK(norm_report(bank).sorted_class_norms()[0] == std::vector<double>{2.0, 0.0});
  CHECK_THROWS_AS(norm_report(ClassifierBank(Scenario::CIL, 2)), ContractError);
}

TEST_CASE("histograms of identical and orthonormal populations", "[geometry][histogram]") {
  const Tensor same = Tensor::matrix(4, 3, {1, 2, 3, 1, 2, 3, 2, 4, 6, 1, 2, 3});
  const Tensor ortho = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const HistogramReport rep = geometry_histograms({{"same", &same}, {"ortho", &ortho}}, kDefaultPairCap, 1);
  // cosine: same-same, same-ortho, ortho-ortho; then two norm histograms
  REQUIRE(rep.histograms.size() == 5);
  const Histogram& ss = rep.histograms[0];
  CHECK(ss.counts.size() == kHistogramBins);
  CHECK(ss.total() == 6);
  CHECK(ss.counts.back() == 6);
  const Histogram& oo = rep.histograms[2];
  CHECK(oo.population_a == "ortho");
  CHECK(oo.total() == 3);
  CHECK(oo.counts[kHistogramBins / 2] == 3);  // the bin starting at 0.0
  CHECK(oo.edge(kHistogramBins / 2) == Catch::Approx(0.0).margin(1e-15));
  CHECK(rep.histograms[1].total() == 12);
  const Histogram& norms = rep.histograms[3];
  CHECK(norms.metric == "norm");
  CHECK(norms.total() == 4);
  CHECK(norms.lo == Catch::Approx(std::sqrt(14.0)));
  CHECK(norms.hi == Catch::Approx(2.0 * std::sqrt(14.0)));
}

TEST_CASE("histograms subsample above the cap, deterministically", "[geometry][histogram]") {
  Rng rng(8);
  const Tensor a = random_matrix(rng, 60, 4);
  const auto r1 = geometry_histograms({{"a", &a}}, 500, 3);
  const auto r2 = geometry_histograms({{"a", &a}}, 500, 3);
  CHECK(r1.histograms[0].total() == 500);
  CHECK(r1.histograms[0].counts == r2.histograms[0].counts);
  CHECK_FALSE(geometry_histograms({{"a", &a}}, 500, 4).histograms[0].counts == r1.histograms[0].counts);
  CHECK(geometry_histograms({{"a", &a}}, 2000, 3).histograms[0].total() == 60 * 59 / 2);

  const Tensor narrow = random_matrix(rng, 5, 3);
  CHECK_THROWS_AS(geometry_histograms({{"a", &a}, {"b", &narrow}}, 10, 1), ContractError);
  CHECK_THROWS_AS(geometry_histograms({}, 10, 1), ContractError);
  CHECK_THROWS_AS(geometry_histograms({{"a", &a}}, 0, 1), ConfigError);
}
