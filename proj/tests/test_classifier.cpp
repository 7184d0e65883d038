// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ilab/classifier.hpp"

using namespace ilab;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(Shape{r, c});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

ClassifierBank two_task_bank(Scenario s, HeadKind kind, double scale = 1.0) {
  ClassifierBank bank(s, 5, LogitOptions{scale, false});
  bank.allocate({{0, {0, 1}}, {1, {2, 3, 4}}}, kind, 9);
  return bank;
}

}  // namespace

TEST_CASE("head kind names round-trip", "[classifier]") {
  for (HeadKind k : kAllHeadKinds) CHECK(parse_head_kind(head_kind_name(k)) == k);
  CHECK_THROWS(parse_head_kind("softmax"));
  CHECK(is_cosine(HeadKind::CosinePrototype));
  CHECK_FALSE(is_cosine(HeadKind::Prototype));
  CHECK(is_prototype(HeadKind::CosinePrototype));
}

TEST_CASE("allocation assigns slots in order and rejects duplicates", "[classifier]") {
  ClassifierBank bank = two_task_bank(Scenario::CIL, HeadKind::Linear);
  CHECK(bank.total_slots() == 5);
  for (std::size_t c = 0; c < 5; ++c) CHECK(bank.slot_of(c) == c);
  CHECK_THROWS_AS(bank.slot_of(7), LookupError);
  CHECK_THROWS_AS(bank.allocate({{1, {7}}}, HeadKind::Linear, 0), AllocationError);
  CHECK_THROWS_AS(bank.allocate({{2, {4, 5}}}, HeadKind::Linear, 0), AllocationError);
  CHECK_THROWS_AS(bank.allocate({{2, {5}}, {3, {5}}}, HeadKind::Linear, 0), AllocationError);
  CHECK_THROWS_AS(bank.allocate({{2, {}}}, HeadKind::Linear, 0), AllocationError);
  CHECK(bank.total_slots() == 5);
  CHECK_THROWS_AS(ClassifierBank().allocate({{0, {0}}}, HeadKind::Linear, 0), ContractError);

  // the same class id may reappear across tasks in TIL
  ClassifierBank til(Scenario::TIL, 3);
  til.allocate({{0, {0, 1}}, {1, {0, 1}}}, HeadKind::Linear, 0);
  CHECK(til.heads().size() == 2);
}

TEST_CASE("initialization is seeded and prototypes start at zero", "[classifier]") {
  const auto a = two_task_bank(Scenario::CIL, HeadKind::Linear);
  const auto b = two_task_bank(Scenario::CIL, HeadKind::Linear);
  CHECK(a.head_hash(1) == b.head_hash(1));
  CHECK(a.head_hash(0) != a.head_hash(1));
  const auto p = two_task_bank(Scenario::CIL, HeadKind::Prototype);
  for (double v : p.head(1).weights.values()) CHECK(v == 0.0);
  CHECK_FALSE(p.head(0).trainable());
}

TEST_CASE("CIL logits concatenate every head; linear logits are x W^T", "[classifier]") {
  Rng rng(4);
  ClassifierBank bank = two_task_bank(Scenario::CIL, HeadKind::Linear);
  const Tensor x = random_matrix(rng, 3, 5);
  const Tensor all = bank.logits(x);
  REQUIRE(all.cols() == 5);
  for (std::size_t r = 0; r < 3; ++r) {
    std::size_t col = 0;
    for (const TaskHead& h : bank.heads())
      for (std::size_t i = 0; i < h.class_ids.size(); ++i, ++col)
        CHECK(all.at(r, col) == Catch::Approx(dot(x.row(r), h.weights.row(i))).margin(1e-14));
  }
  CHECK_THROWS_AS(bank.logits(x, 0), ContractError);
  CHECK_THROWS_AS(bank.logits(random_matrix(rng, 3, 4)), DimensionError);
}

TEST_CASE("TIL logits use only the requested task's head", "[classifier]") {
  Rng rng(5);
  ClassifierBank bank = two_task_bank(Scenario::TIL, HeadKind::Linear);
  const Tensor x = random_matrix(rng, 2, 5);
  CHECK_THROWS_AS(bank.logits(x), ContractError);
  const Tensor one = bank.logits(x, 1);
  REQUIRE(one.cols() == 3);
  const Tensor all = bank.logits_over(x, {0, 1});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 3; ++i) CHECK(one.at(r, i) == all.at(r, 2 + i));
  CHECK_THROWS_AS(bank.logits(x, 4), LookupError);
}

TEST_CASE("cosine logits equal scale times cosine similarity", "[classifier]") {
  Rng rng(6);
  for (double scale : {1.0, 3.5}) {
    ClassifierBank bank = two_task_bank(Scenario::CIL, HeadKind::CosineLinear, scale);
    const Tensor x = random_matrix(rng, 4, 5);
    const Tensor l = bank.logits(x);
    std::size_t col = 0;
    for (const TaskHead& h : bank.heads())
      for (std::size_t i = 0; i < h.class_ids.size(); ++i, ++col)
        for (std::size_t r = 0; r < 4; ++r) {
          CHECK(l.at(r, col) == Catch::Approx(scale * cosine(x.row(r), h.weights.row(i))).margin(1e-12));
          CHECK(std::abs(l.at(r, col)) <= scale + 1e-12);
        }
  }
}

TEST_CASE("cosine predictions are invariant to positive feature rescaling", "[classifier][property]") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const HeadKind kind = trial % 2 ? HeadKind::CosineLinear : HeadKind::CosinePrototype;
    ClassifierBank bank(Scenario::CIL, 6, LogitOptions{0.5 + rng.uniform() * 4.0, false});
    bank.allocate({{0, {0, 1, 2}}, {1, {3, 4}}}, kind, static_cast<std::uint64_t>(trial));
    for (auto& h : bank.heads())
      for (auto& v : h.weights.values()) v = rng.normal();
    const Tensor x = random_matrix(rng, 4, 6);
    Tensor y = x;
    const double c = std::exp(10.0 * rng.uniform() - 5.0);
    for (auto& v : y.values()) v *= c;
    CHECK(argmax_rows(bank.logits(x)) == argmax_rows(bank.logits(y)));
  }
}

TEST_CASE("prototype heads are class means", "[classifier]") {
  const Tensor f = Tensor::matrix(5, 2, {1, 0, 3, 0, 0, 2, 0, 4, 9, 9});
  const std::vector<std::size_t> labels{7, 7, 8, 8, 5};
  const TaskHead h = fit_prototype_head(f, labels, {8, 7}, 3);
  CHECK(h.task_id == 3);
  CHECK(h.weights == Tensor::matrix(2, 2, {0, 3, 2, 0}));
  CHECK_THROWS_AS(fit_prototype_head(f, labels, {8, 6}), DataError);
  CHECK_THROWS_AS(fit_prototype_head(f, {7, 7}, {7}), DimensionError);
}

TEST_CASE("euclidean prototype logits pick the nearest centre", "[classifier][property]") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    ClassifierBank bank(Scenario::CIL, 3, LogitOptions{1.0, true});
    bank.allocate({{0, {0, 1, 2, 3}}}, HeadKind::Prototype, 0);
    bank.head(0).weights = random_matrix(rng, 4, 3);
    const Tensor x = random_matrix(rng, 5, 3);
    const auto pred = argmax_rows(bank.logits(x));
    for (std::size_t r = 0; r < 5; ++r) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < 4; ++i) {
        double d = 0.0;
        for (std::size_t k = 0; k < 3; ++k) d += std::pow(x.at(r, k) - bank.head(0).weights.at(i, k), 2);
        if (d < best_d) best_d = d, best = i;
      }
      CHECK(pred[r] == best);
    }
  }
}

TEST_CASE("freezing marks heads and unknown tasks are rejected", "[classifier]") {
  ClassifierBank bank = two_task_bank(Scenario::CIL, HeadKind::Linear);
  CHECK_THROWS_AS(bank.freeze({0, 5}), LookupError);
  CHECK_FALSE(bank.head(0).frozen);
  bank.freeze({0});
  CHECK(bank.head(0).frozen);
  CHECK_FALSE(bank.head(0).trainable());
  CHECK(bank.head(1).trainable());
}

TEST_CASE("bank export writes one row per class embedding", "[classifier][io]") {
  const auto path = std::filesystem::temp_directory_path() / "ilab_test_heads.csv";
  const ClassifierBank bank = two_task_bank(Scenario::CIL, HeadKind::Linear);
  bank.export_csv(path.string());
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "format_version,task_id,class_id,w0,w1,w2,w3,w4");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 5);
  std::filesystem::remove(path);
}
