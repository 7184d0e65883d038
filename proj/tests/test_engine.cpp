// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "ilab/engine.hpp"

using namespace ilab;

namespace {

TaskStream small_stream(Scenario scenario = Scenario::CIL) {
  SyntheticSpec spec;
  spec.n_tasks = 3;
  spec.classes_per_task = 2;
  spec.train_per_class = 30;
  spec.test_per_class = 10;
  spec.vocab_size = 60;
  spec.min_words = 4;
  spec.max_words = 8;
  spec.scenario = scenario;
  spec.seed = 21;
  return build_synthetic_stream(spec);
}

Backbone small_backbone() {
  BackboneConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 60;
  c.max_seq_len = 10;
  c.init_seed = 4;
  return init_backbone(c);
}

StrategyConfig quick(const std::string& name, Scenario scenario = Scenario::CIL) {
  StrategyConfig s = preset(name);
  s.epochs_per_task = 4;
  s.batch_size = 16;
  s.head_lr = 2e-2;  // few steps per task at this size
  s.scenario = scenario;
  return s;
}

}  // namespace

TEST_CASE("every grid preset parses", "[engine][preset]") {
  for (const auto& name : preset_names()) {
    const StrategyConfig s = preset(name);
    CHECK(s.name == name);
    CHECK(s.epochs_per_task == 5);
    CHECK(s.backbone_lr == 1e-5);
    CHECK(s.head_lr == 1e-3);
  }
  const StrategyConfig star = preset("SEQ*(P+W+FixBC+Cos)");
  CHECK(star.preallocate_future);
  CHECK(star.freeze_backbone);
  CHECK(star.freeze_old_heads);
  CHECK(star.warmup_epochs == 3);
  CHECK(star.head_kind == HeadKind::CosineLinear);
  CHECK(star.replay_per_class == 0);
  CHECK(preset("SEQ*(W+FixBC+Lin)").replay_per_class == 1);
  CHECK(preset("SEQ(W+FixBC+Lin)").replay_per_class == 0);
  CHECK(preset("SEQ(W+Lin)", AttentionMode::Bidirectional).warmup_epochs == 1);
  CHECK(preset("SEQ(ER+Lin)").replay_per_class == 1);
  CHECK(preset("SEQ(FixB+Cos)").freeze_backbone);
  CHECK_FALSE(preset("SEQ(FixB+Cos)").freeze_old_heads);
}

TEST_CASE("malformed preset names are validation errors", "[engine][preset]") {
  for (const char* bad : {"SEQ", "SEQ(Lin", "SEQ()", "SEQ(P+W)", "SEQ(Lin+Foo)", "ER(Lin)", "SEQ**(Lin)"})
    CHECK_THROWS_AS(preset(bad), ValidationError);
}

TEST_CASE("accuracy matrix bounds and metrics", "[engine][metrics]") {
  AccuracyMatrix m(2);
  CHECK(std::isnan(m.at(2, 1)));
  CHECK_THROWS_AS(m.at(1, 2), ContractError);
  CHECK_THROWS_AS(m.set(3, 1, 0.5), ContractError);
  CHECK_THROWS_AS(m.set(0, 0, 0.5), ContractError);
  CHECK_THROWS_AS(m.set(1, 1, 1.5), ContractError);
  m.set(1, 1, 0.9);
  CHECK(average_accuracy(m, 1) == Catch::Approx(0.9));
  CHECK_THROWS_AS(average_accuracy(m, 2), ContractError);
  CHECK_THROWS_AS(avg_incremental_accuracy(m), ContractError);
  m.set(2, 1, 0.5);
  m.set(2, 2, 0.7);
  CHECK(m.entry_count() == 3);
  CHECK(average_accuracy(m, 2) == Catch::Approx(0.6));
  CHECK(avg_incremental_accuracy(m) == Catch::Approx(0.75));
  CHECK_THROWS_AS(avg_incremental_accuracy(AccuracyMatrix()), ContractError);
}

TEST_CASE("metric averages agree with brute force", "[engine][metrics][property]") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng.index(10);
    AccuracyMatrix m(T);
    std::vector<std::vector<double>> raw(T);
    for (std::size_t t = 1; t <= T; ++t)
      for (std::size_t i = 1; i <= t; ++i) {
        raw[t - 1].push_back(rng.uniform());
        m.set(t, i, raw[t - 1].back());
      }
    double abar = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0.0;
      for (double v : raw[t]) s += v;
      CHECK(std::abs(average_accuracy(m, t + 1) - s / static_cast<double>(t + 1)) <= 1e-12);
      abar += s / static_cast<double>(t + 1);
    }
    CHECK(std::abs(avg_incremental_accuracy(m) - abar / static_cast<double>(T)) <= 1e-12);
  }
}

TEST_CASE("tasks must be trained in order with allocated heads", "[engine]") {
  const TaskStream s = small_stream();
  const Backbone bb = small_backbone();
  IlState state{bb, ClassifierBank(Scenario::CIL, 16), ReplayBuffer(), 0};
  CHECK_THROWS_AS(train_task(state, s, 0, quick("SEQ(Lin)"), 1), ContractError);
  state.bank.allocate({{0, s.tasks[0].classes}}, HeadKind::Linear, 1);
  CHECK_THROWS_AS(train_task(state, s, 1, quick("SEQ(Lin)"), 1), ContractError);
  CHECK_THROWS_AS(train_task(state, s, 0, quick("SEQ(P+Lin)"), 1), ContractError);
  CHECK_THROWS_AS(evaluate_observed(state, s, 1), ContractError);
  const TaskStats st = train_task(state, s, 0, quick("SEQ(Lin)"), 1);
  CHECK(st.task == 1);
  CHECK(st.epoch_losses.size() == 4);
  CHECK(st.epoch_losses.back() < st.epoch_losses.front());
  CHECK(st.trainable_parameters == bb.num_parameters() + 2 * 16);
  CHECK(evaluate_observed(state, s, 1).size() == 1);
}

TEST_CASE("run_experiment checks its inputs", "[engine]") {
  const TaskStream s = small_stream();
  CHECK_THROWS_AS(run_experiment(s, small_backbone(), quick("SEQ(Lin)", Scenario::TIL), 1), ContractError);
  BackboneConfig c = small_backbone().config();
  c.vocab_size = 30;
  CHECK_THROWS_AS(run_experiment(s, init_backbone(c), quick("SEQ(Lin)"), 1), ConfigError);
  c = small_backbone().config();
  c.max_seq_len = 6;
  CHECK_THROWS_AS(run_experiment(s, init_backbone(c), quick("SEQ(Lin)"), 1), ConfigError);
}

TEST_CASE("SEQ learns each task and the record is complete", "[engine]") {
  const TaskStream s = small_stream();
  std::vector<std::string> lines;
  const ExperimentRecord rec =
      run_experiment(s, small_backbone(), quick("SEQ(Lin)"), 3, [&](const std::string& l) { lines.push_back(l); });
  CHECK(rec.accuracy.entry_count() == 6);
  CHECK(rec.snapshots.size() == 4);
  CHECK(rec.snapshots[0].task == 0);
  CHECK(rec.snapshots[0].bank.empty());
  CHECK(rec.average_accuracy.size() == 3);
  CHECK(rec.avg_incremental_accuracy == Catch::Approx(avg_incremental_accuracy(rec.accuracy)));
  CHECK(rec.accuracy.at(3, 3) >= 0.8);
  CHECK(rec.warnings.empty());
  CHECK_FALSE(lines.empty());
  for (const auto& st : rec.stats) CHECK(st.epoch_losses.back() < st.epoch_losses.front());
}

TEST_CASE("runs are deterministic for a fixed seed", "[engine]") {
  const TaskStream s = small_stream();
  const auto a = run_experiment(s, small_backbone(), quick("SEQ(ER+Lin)"), 5);
  const auto b = run_experiment(s, small_backbone(), quick("SEQ(ER+Lin)"), 5);
  for (std::size_t t = 1; t <= 3; ++t) CHECK(a.accuracy.row(t) == b.accuracy.row(t));
  CHECK(a.snapshots.back().backbone == b.snapshots.back().backbone);
}

TEST_CASE("FixBC after warm-up freezes the backbone and every old head", "[engine]") {
  const TaskStream s = small_stream();
  const Backbone init = small_backbone();
  const ExperimentRecord rec = run_experiment(s, init, quick("SEQ*(W+FixBC+Cos)"), 2);
  CHECK(rec.snapshots[1].backbone.weight_hash() != init.weight_hash());  // warm-up trained it
  for (std::size_t t = 2; t <= 3; ++t) {
    CHECK(rec.snapshots[t].backbone == rec.snapshots[1].backbone);
    for (std::size_t old = 0; old + 1 < t; ++old)
      CHECK(rec.snapshots[t].bank.head_hash(old) == rec.snapshots[old + 1].bank.head_hash(old));
  }
  // only the current head trains once the backbone is frozen
  CHECK(rec.stats[1].trainable_parameters == 2 * 16);
  CHECK(rec.snapshots.back().backbone.frozen());
}

TEST_CASE("FixB without warm-up never touches the backbone", "[engine]") {
  const TaskStream s = small_stream();
  const Backbone init = small_backbone();
  const ExperimentRecord rec = run_experiment(s, init, quick("SEQ(FixB+Lin)"), 2);
  for (const auto& snap : rec.snapshots) CHECK(snap.backbone.params() == init.params());
}

TEST_CASE("SEQ moves old heads, FixC keeps them", "[engine]") {
  const TaskStream s = small_stream();
  const auto seq = run_experiment(s, small_backbone(), quick("SEQ(Cos)"), 2);
  const auto fixc = run_experiment(s, small_backbone(), quick("SEQ(FixC+Cos)"), 2);
  CHECK(seq.snapshots[3].bank.head_hash(0) != seq.snapshots[1].bank.head_hash(0));
  CHECK(fixc.snapshots[3].bank.head_hash(0) == fixc.snapshots[1].bank.head_hash(0));
}

TEST_CASE("pre-allocated future heads exist and train from the first task", "[engine]") {
  const TaskStream s = small_stream();
  const auto rec = run_experiment(s, small_backbone(), quick("SEQ(P+Lin)"), 2);
  REQUIRE(rec.snapshots[0].bank.heads().size() == 3);
  CHECK(rec.snapshots[1].bank.head_hash(2) != rec.snapshots[0].bank.head_hash(2));
  // evaluation after task 1 scores task 1 only, so future slots cannot win
  CHECK(rec.accuracy.row(1).size() == 1);
  const auto plain = run_experiment(s, small_backbone(), quick("SEQ(Lin)"), 2);
  CHECK(plain.snapshots[1].bank.heads().size() == 1);
}

TEST_CASE("observed CIL evaluation ignores pre-allocated slots", "[engine]") {
  // a future head that scores every sample highest must not change task-1 accuracy
  const TaskStream s = small_stream();
  auto rec = run_experiment(s, small_backbone(), quick("SEQ(P+Lin)"), 2);
  IlState state{rec.snapshots[1].backbone, rec.snapshots[1].bank, ReplayBuffer(), 1};
  for (auto& v : state.bank.head(2).weights.values()) v = 100.0;
  CHECK(evaluate_observed(state, s, 1) == rec.accuracy.row(1));
}

TEST_CASE("replay stores one sample per class and warns only without it", "[engine]") {
  const TaskStream s = small_stream();
  auto st = quick("SEQ*(W+FixBC+Lin)");
  REQUIRE(st.replay_per_class == 1);
  const auto rec = run_experiment(s, small_backbone(), st, 2);
  CHECK(rec.warnings.empty());
  st.replay_per_class = 0;
  CHECK(run_experiment(s, small_backbone(), st, 2).warnings.size() == 1);
}

TEST_CASE("prototype heads are fit to class means after each task", "[engine]") {
  const TaskStream s = small_stream();
  StrategyConfig st = quick("SEQ(FixB+Lin)");
  st.head_kind = HeadKind::Prototype;
  const auto rec = run_experiment(s, small_backbone(), st, 2);
  const Backbone& bb = rec.snapshots[1].backbone;
  std::vector<std::size_t> labels;
  for (const auto& e : s.tasks[0].train) labels.push_back(e.label);
  const TaskHead expect =
      fit_prototype_head(extract_features(bb, detail::pointers(s.tasks[0].train)), labels, s.tasks[0].classes);
  CHECK(rec.snapshots[1].bank.head(0).weights == expect.weights);
  CHECK(rec.stats[0].trainable_parameters == 0);
}

TEST_CASE("TIL runs score each sample within its own task", "[engine]") {
  const TaskStream s = small_stream(Scenario::TIL);
  const auto rec = run_experiment(s, small_backbone(), quick("SEQ(Lin)", Scenario::TIL), 2);
  // two-way decisions inside a task are easy on this stream
  for (std::size_t i = 1; i <= 3; ++i) CHECK(rec.accuracy.at(3, i) >= 0.6);
}
