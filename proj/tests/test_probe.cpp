// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ilab/probe.hpp"

using namespace ilab;

namespace {

// Two tasks of two classes each; examples live in FeatureSets.
TaskStream label_stream(Scenario scenario = Scenario::CIL) {
  TaskStream s;
  s.scenario = scenario;
  s.label_names = {"a", "b", "c", "d"};
  s.vocab_size = 10;
  s.tasks = {Task{0, {0, 1}, {}, {}}, Task{1, {2, 3}, {}, {}}};
  return s;
}

// Gaussian blobs around orthogonal means; linearly separable with margin.
FeatureSet blobs(std::size_t per_class, double spread, std::uint64_t seed, std::size_t d = 6) {
  Rng rng(seed);
  FeatureSet fs;
  fs.tag = seed;
  fs.features = Tensor(Shape{4 * per_class, d});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = c * per_class + i;
      for (std::size_t k = 0; k < d; ++k) fs.features.at(r, k) = (k == c ? 3.0 : 0.0) + spread * rng.normal();
      fs.labels.push_back(c);
    }
  return fs;
}

}  // namespace

TEST_CASE("a linear probe fits a separable problem like logistic regression", "[probe][oracle]") {
  const TaskStream s = label_stream();
  const FeatureSet train = blobs(40, 0.3, 1);
  ProbeConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 5e-2;
  const TaskHead head = train_probe(train, s, cfg);
  CHECK(head.class_ids == std::vector<std::size_t>{0, 1, 2, 3});
  const ProbeReport on_train = probe_accuracy(head, train, s);
  CHECK(on_train.average >= 0.95);
  CHECK(probe_accuracy(head, blobs(40, 0.3, 2), s).average >= 0.95);
}

TEST_CASE("probes on label-independent features sit at chance", "[probe][property]") {
  // 20 Monte-Carlo probes on two-class TIL tasks with pure-noise features
  const TaskStream s = label_stream(Scenario::TIL);
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    FeatureSet train = blobs(50, 1.0, 100 + seed), test = blobs(100, 1.0, 200 + seed);
    Rng rng(300 + seed);
    for (auto* fs : {&train, &test})
      for (auto& v : fs->features.values()) v = rng.normal();
    ProbeConfig cfg;
    cfg.seed = seed;
    mean += probe_accuracy(train_probe(train, s, cfg), test, s).average / 20.0;
  }
  CHECK(mean == Catch::Approx(0.5).margin(0.05));
}

TEST_CASE("prototype probes are fit, not trained", "[probe]") {
  const TaskStream s = label_stream();
  const FeatureSet train = blobs(10, 0.5, 3);
  for (HeadKind kind : {HeadKind::Prototype, HeadKind::CosinePrototype}) {
    ProbeConfig cfg;
    cfg.kind = kind;
    const TaskHead head = train_probe(train, s, cfg);
    const TaskHead expect = fit_prototype_head(train.features, train.labels, all_classes(s), 0, kind);
    CHECK(head.weights == expect.weights);
    CHECK(head.kind == kind);
  }
}

TEST_CASE("probe training is deterministic in its seed and leaves the input intact", "[probe]") {
  const TaskStream s = label_stream();
  const FeatureSet train = blobs(10, 0.5, 4);
  const std::uint64_t before = hash_tensor(train.features);
  ProbeConfig cfg;
  cfg.kind = HeadKind::CosineLinear;
  const TaskHead a = train_probe(train, s, cfg), b = train_probe(train, s, cfg);
  CHECK(a.weights == b.weights);
  cfg.seed = 1;
  CHECK_FALSE(train_probe(train, s, cfg).weights == a.weights);
  CHECK(hash_tensor(train.features) == before);
}

TEST_CASE("probe accuracy averages per-task accuracies", "[probe][metrics]") {
  // identity head on one-hot features: predictions are exact, then we corrupt two rows
  const TaskStream s = label_stream();
  TaskHead head;
  head.class_ids = {0, 1, 2, 3};
  head.weights = Tensor::matrix(4, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  FeatureSet test;
  test.features = Tensor(Shape{8, 4});
  for (std::size_t r = 0; r < 8; ++r) {
    test.labels.push_back(r / 2);
    test.features.at(r, r / 2) = 1.0;
  }
  test.features.at(0, 0) = 0.0;
  test.features.at(0, 3) = 1.0;  // task-1 sample predicted as class 3
  test.features.at(4, 2) = 0.0;
  test.features.at(4, 3) = 1.0;  // task-2 sample predicted as class 3
  const ProbeReport cil = probe_accuracy(head, test, s);
  CHECK(cil.task_accuracy == std::vector<double>{0.75, 0.75});
  CHECK(cil.average == 0.75);
  // TIL restricts to the sample's own task: row 0 falls back within {0, 1}
  const ProbeReport til = probe_accuracy(head, test, label_stream(Scenario::TIL));
  CHECK(til.task_accuracy[0] == 1.0);  // tie between 0 and 1 resolves to class 0, which is right
  CHECK(til.task_accuracy[1] == 0.75);

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> acc(1 + rng.index(12));
    double s2 = 0.0;
    for (auto& a : acc) s2 += (a = rng.uniform());
    CHECK(std::abs(probe_average(acc) - s2 / static_cast<double>(acc.size())) <= 1e-12);
  }
  CHECK_THROWS_AS(probe_average({}), ContractError);
}

TEST_CASE("probe inputs are validated", "[probe]") {
  const TaskStream s = label_stream();
  const FeatureSet train = blobs(5, 0.5, 6);
  CHECK_THROWS_AS(train_probe(train, TaskStream{}, {}), ContractError);
  ProbeConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train_probe(train, s, cfg), ConfigError);
  TaskHead partial;
  partial.class_ids = {0, 1};
  partial.weights = Tensor(Shape{2, 6});
  CHECK_THROWS_AS(probe_accuracy(partial, train, s), ContractError);
}

TEST_CASE("feature caches round-trip and reject damaged files", "[probe][io]") {
  const auto path = std::filesystem::temp_directory_path() / "ilab_test_features.bin";
  const FeatureSet fs = blobs(3, 0.5, 7);
  save_features(fs, path.string());
  const FeatureSet back = load_features(path.string());
  CHECK(back.tag == fs.tag);
  CHECK(back.labels == fs.labels);
  CHECK(back.features == fs.features);

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 5);
  CHECK_THROWS_AS(load_features(path.string()), IoError);
  std::ofstream(path) << "garbage";
  CHECK_THROWS_AS(load_features(path.string()), IoError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_features(path.string()), IoError);
}

TEST_CASE("snapshot probing over a real backbone", "[probe]") {
  SyntheticSpec spec;
  spec.n_tasks = 2;
  spec.classes_per_task = 2;
  spec.train_per_class = 20;
  spec.test_per_class = 10;
  spec.vocab_size = 40;
  spec.max_words = 8;
  spec.seed = 2;
  const TaskStream s = build_synthetic_stream(spec);
  BackboneConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 40;
  c.max_seq_len = 10;
  const Backbone bb = init_backbone(c);
  const SnapshotFeatures f = extract_snapshot_features(bb, s, 9);
  CHECK(f.train.count() == 80);
  CHECK(f.test.count() == 40);
  CHECK(f.train.tag == 9);

  std::vector<ProbeConfig> configs;
  for (HeadKind k : kAllHeadKinds) configs.push_back(ProbeConfig{k});
  const auto reports = probe_snapshot(f, s, configs);
  REQUIRE(reports.size() == 4);
  for (const auto& r : reports) {
    CHECK(r.task_accuracy.size() == 2);
    CHECK(r.average >= 0.0);
    CHECK(r.average <= 1.0);
  }
  const auto curve = probing_curve({{9, &bb}, {1, &bb}}, s, configs);
  REQUIRE(curve.size() == 8);
  CHECK(curve[0].average == reports[0].average);
}
