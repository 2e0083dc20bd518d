#include <doctest.h>

#include <cmath>

#include "densesiam/config.hpp"
#include "densesiam/errors.hpp"
#include "densesiam/trainer.hpp"
#include "support.hpp"

using namespace dsiam;

namespace {

TrainConfig tiny(Mode mode) {
  TrainConfig c;
  c.mode = mode;
  c.batch_size = 4;
  c.epochs = 2;
  c.stage_channels = {4, 8};
  c.output_stride = 4;
  c.head_width = 8;
  c.region_dim = 8;
  c.global_dim = 8;
  c.view_size = 16;
  c.N = mode == Mode::Pretrain ? 6 : 0;
  c.N_aux = 8;
  c.K = 3;
  c.seed = 5;
  return c;
}

const Dataset& tiny_data() {
  static const Dataset d = gen_shapes_dataset(12, 3, 16, 3);
  return d;
}

std::vector<std::string> run_rows(Trainer& t, std::optional<std::int64_t> until = std::nullopt) {
  std::vector<std::string> rows;
  t.on_step([&](const StepMetrics& m) { rows.push_back(metrics_row(m)); });
  t.run(until);
  return rows;
}

std::vector<std::vector<float>> trainable_values(const ModelF& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.params())
    if (p.trainable()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("effective_lr: linear scaling") {
  CHECK(effective_lr(0.05, 512) == 0.1);
  CHECK(effective_lr(0.05, 256) == 0.05);
  CHECK(effective_lr(0.05, 64) == doctest::Approx(0.0125).epsilon(1e-15));
  CHECK_THROWS_AS(effective_lr(0.05, 0), ConfigError);
}

TEST_CASE("lr_at: cosine and constant schedules") {
  CHECK(lr_at(0.4, 0, 100, Schedule::Cosine) == 0.4);
  CHECK(lr_at(0.4, 50, 100, Schedule::Cosine) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(std::abs(lr_at(0.4, 100, 100, Schedule::Cosine)) < 1e-15);
  CHECK(lr_at(0.4, 73, 100, Schedule::Constant) == 0.4);
}

TEST_CASE("sgd_update: closed forms") {
  std::vector<float> p{1.0f, -2.0f}, buf;
  std::vector<float> g{0.5f, 0.25f};
  sgd_update(p, g, buf, 1.0, 0.0, 0.0);
  CHECK(p[0] == 0.5f);
  CHECK(p[1] == -2.25f);

  std::vector<float> q{0.0f}, qbuf;
  std::vector<float> gc{0.5f};
  sgd_update(q, gc, qbuf, 1.0, 0.9, 0.0);
  sgd_update(q, gc, qbuf, 1.0, 0.9, 0.0);
  CHECK(q[0] == doctest::Approx(-(0.5 + 1.9 * 0.5)));

  std::vector<float> w{2.0f}, wbuf;
  for (int i = 0; i < 3; ++i) sgd_update(w, {}, wbuf, 0.5, 0.0, 0.1);
  CHECK(w[0] == doctest::Approx(2.0 * std::pow(1 - 0.5 * 0.1, 3)).epsilon(1e-6));

  std::vector<float> wrong{1.0f, 2.0f, 3.0f};
  CHECK_THROWS_AS(sgd_update(p, wrong, buf, 1.0, 0.0, 0.0), UsageError);
}

TEST_CASE("collapse_metric: closed forms") {
  CHECK(collapse_metric(TensorF(Shape{5, 3}, std::vector<float>(15, 0.7f))) == 0.0);
  const std::size_t d = 8;
  std::vector<float> eye(d * d, 0.0f);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0f;
  CHECK(collapse_metric(TensorF(Shape{d, d}, eye)) == doctest::Approx(std::sqrt(1.0 / d * (1.0 - 1.0 / d))));
  Rng rng(1);
  const std::size_t dim = 16;
  auto z = test::randn<float>(Shape{20000, dim}, rng);
  CHECK(std::abs(collapse_metric(z) - 1.0 / std::sqrt(dim)) < 0.01);
}

TEST_CASE("config: parsing, defaults and errors") {
  auto c = parse_config("# comment\nbase_lr = 0.2\nepochs=3  # trailing\n\nK = 5\n", Mode::Pretrain);
  CHECK(c.base_lr == 0.2);
  CHECK(c.epochs == 3);
  CHECK(c.K == 5);
  CHECK(c.momentum == 0.9);
  CHECK(c.weight_decay == 1e-4);
  CHECK(c.region_start_fraction == 0.5);
  CHECK(c.lambda1 == 1.0);
  CHECK(c.lambda2 == 0.1);
  CHECK(c.tau == 0.1);
  CHECK(resolved_schedule(c) == Schedule::Cosine);
  CHECK(resolved_output_stride(c) == 8);
  CHECK(resolved_num_classes(c, 0) == 32);
  CHECK_THROWS_AS(parse_config("bogus = 1\n", Mode::Pretrain), ConfigError);
  CHECK_THROWS_AS(parse_config("K = 3\nK = 4\n", Mode::Pretrain), ConfigError);
  CHECK_THROWS_AS(parse_config("K = three\n", Mode::Pretrain), ConfigError);
  CHECK_THROWS_AS(parse_config("no equals sign\n", Mode::Pretrain), ConfigError);
  CHECK_THROWS_AS(validate(parse_config("base_lr = 0\n", Mode::Pretrain)), ConfigError);
  CHECK_THROWS_AS(validate(parse_config("region_start_fraction = 1.5\n", Mode::Pretrain)), ConfigError);
  CHECK_THROWS_AS(validate(parse_config("K = 0\n", Mode::Pretrain)), ConfigError);

  auto s = parse_config("", Mode::Seg);
  CHECK(resolved_schedule(s) == Schedule::Constant);
  CHECK(resolved_output_stride(s) == 4);
  CHECK(resolved_num_classes(s, 3) == 3);
  auto bad_n = parse_config("N = 4\n", Mode::Seg);
  CHECK_THROWS_AS(resolved_num_classes(bad_n, 3), ConfigError);
}

TEST_CASE("config: text round trip") {
  auto c = tiny(Mode::Seg);
  c.grid_strategy = GridStrategy::Biased;
  c.dist = Distance::Cosine;
  c.schedule = Schedule::Cosine;
  auto back = parse_config(to_text(c), Mode::Seg);
  CHECK(to_text(back) == to_text(c));
  CHECK(back.stage_channels == c.stage_channels);
  CHECK(back.grid_strategy == GridStrategy::Biased);
}

TEST_CASE("seg loss weights follow the log ratio") {
  auto c = tiny(Mode::Seg);
  c.N_aux = 128;
  auto w = loss_weights(c, 27);
  CHECK(std::abs(w.lambda4 - 0.4045) < 1e-4);
  CHECK(std::abs(w.lambda1 + w.lambda4 - 1.0) < 1e-12);
}

TEST_CASE("lr = 0 leaves the parameters untouched") {
  for (auto mode : {Mode::Pretrain, Mode::Seg}) {
    Trainer t(tiny(mode), tiny_data());
    const auto before = trainable_values(t.model());
    t.override_lr(0.0);
    t.train_epoch();
    CHECK(trainable_values(t.model()) == before);
  }
}

TEST_CASE("same seed gives identical metrics; different seeds differ") {
  for (auto mode : {Mode::Pretrain, Mode::Seg}) {
    Trainer a(tiny(mode), tiny_data()), b(tiny(mode), tiny_data());
    auto ra = run_rows(a), rb = run_rows(b);
    CHECK(ra.size() == 6);
    CHECK(ra == rb);
    auto other = tiny(mode);
    other.seed = 6;
    Trainer c(other, tiny_data());
    CHECK(run_rows(c) != ra);
  }
}

TEST_CASE("worker count does not change the run") {
  auto cfg = tiny(Mode::Pretrain);
  Trainer a(cfg, tiny_data());
  cfg.num_workers = 3;
  Trainer b(cfg, tiny_data());
  CHECK(run_rows(a) == run_rows(b));
}

TEST_CASE("epochs before the region start match a run without the region term") {
  auto cfg = tiny(Mode::Pretrain);
  cfg.epochs = 4;
  Trainer with(cfg, tiny_data());
  cfg.lambda2 = 0.0;
  Trainer without(cfg, tiny_data());
  CHECK_FALSE(with.region_active(1));
  CHECK(with.region_active(2));
  auto a = run_rows(with), b = run_rows(without);
  const std::size_t before = 2 * static_cast<std::size_t>(with.steps_per_epoch());
  CHECK(std::vector<std::string>(a.begin(), a.begin() + before) ==
        std::vector<std::string>(b.begin(), b.begin() + before));
  CHECK(a[before] != b[before]);
}

TEST_CASE("all loss weights zero: only weight decay moves the parameters") {
  auto cfg = tiny(Mode::Pretrain);
  cfg.lambda_sim = cfg.lambda1 = cfg.lambda2 = 0.0;
  cfg.schedule = Schedule::Constant;
  Trainer t(cfg, tiny_data());
  auto expect = trainable_values(t.model());
  std::vector<std::vector<float>> bufs(expect.size());
  const double lr = effective_lr(cfg.base_lr, cfg.batch_size);
  for (int s = 0; s < 3; ++s) {
    t.train_step();
    for (std::size_t i = 0; i < expect.size(); ++i) sgd_update(expect[i], {}, bufs[i], lr, 0.9, 1e-4);
  }
  CHECK(trainable_values(t.model()) == expect);
}

TEST_CASE("resume from a checkpoint reproduces the uninterrupted run") {
  for (auto mode : {Mode::Pretrain, Mode::Seg}) {
    auto cfg = tiny(mode);
    cfg.epochs = 3;
    Trainer full(cfg, tiny_data());
    auto all = run_rows(full);

    Trainer first(cfg, tiny_data());
    auto head = run_rows(first, 1);
    const auto bytes = first.checkpoint().encode();
    Trainer second = Trainer::resume(dst1::Container::decode(bytes), tiny_data());
    CHECK(second.step() == first.step());
    auto tail = run_rows(second);
    head.insert(head.end(), tail.begin(), tail.end());
    CHECK(head == all);
    // Same final parameters, bit for bit.
    CHECK(trainable_values(second.model()) == trainable_values(full.model()));
  }
}

TEST_CASE("epochs = 0 checkpoints the initialization") {
  auto cfg = tiny(Mode::Pretrain);
  cfg.epochs = 0;
  Trainer t(cfg, tiny_data());
  CHECK(t.finished());
  run_rows(t);
  ModelF fresh(model_config(cfg, 6), cfg.seed);
  auto loaded = load_model(t.checkpoint());
  CHECK(trainable_values(loaded) == trainable_values(fresh));
}

TEST_CASE("losses stay finite and the metrics are complete") {
  auto cfg = tiny(Mode::Seg);
  cfg.epochs = 3;
  Trainer t(cfg, tiny_data());
  std::vector<StepMetrics> ms;
  t.on_step([&](const StepMetrics& m) { ms.push_back(m); });
  t.run();
  REQUIRE(ms.size() == 9);
  for (const auto& m : ms) {
    CHECK(std::isfinite(m.total));
    CHECK(m.l_seg > 0.0);
    CHECK(m.l_aux > 0.0);
    CHECK(m.l_sim == 0.0);  // no global branch term in seg mode
  }
  CHECK(ms.back().l_region > 0.0);
  CHECK(ms.front().l_region == 0.0);
}

TEST_CASE("trainer input errors") {
  Dataset few = gen_shapes_dataset(2, 3, 16, 0);
  CHECK_THROWS_AS(Trainer(tiny(Mode::Pretrain), few), ConfigError);
  auto seg = tiny(Mode::Seg);
  seg.N = 5;
  CHECK_THROWS_AS(Trainer(seg, tiny_data()), ConfigError);
  Dataset unlabeled = tiny_data();
  unlabeled.class_kinds.clear();
  CHECK_THROWS_AS(Trainer(tiny(Mode::Seg), unlabeled), ConfigError);
}

}  // TEST_SUITE
