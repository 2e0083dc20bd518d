#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "densesiam/errors.hpp"
#include "densesiam/evaluation.hpp"
#include "support.hpp"

using namespace dsiam;

namespace {

ConfusionMatrix make_cm(std::size_t n, std::vector<std::int64_t> counts) {
  ConfusionMatrix cm(n, n);
  cm.counts = std::move(counts);
  return cm;
}

std::vector<double> random_costs(Rng& rng, std::size_t n, int hi) {
  std::vector<double> c(n * n);
  for (auto& v : c) v = static_cast<double>(uniform_int(rng, 0, hi));
  return c;
}

const std::vector<ClassKind> kKinds3{ClassKind::Stuff, ClassKind::Thing, ClassKind::Thing};

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("accumulate_confusion: examples and additivity") {
  ConfusionMatrix perfect(2, 2);
  std::vector<std::int64_t> labels{0, 1, 1, 0, 1};
  accumulate_confusion(labels, labels, perfect);
  CHECK(perfect.at(0, 0) == 2);
  CHECK(perfect.at(1, 1) == 3);
  CHECK(perfect.at(0, 1) == 0);
  CHECK(perfect.at(1, 0) == 0);

  ConfusionMatrix one(2, 2);
  accumulate_confusion(std::vector<std::int64_t>{1}, std::vector<std::int64_t>{0}, one);
  CHECK(one.at(1, 0) == 1);
  CHECK(one.total() == 1);

  Rng rng(1);
  std::vector<std::int64_t> p1(50), g1(50), p2(30), g2(30);
  for (auto* v : {&p1, &g1, &p2, &g2})
    for (auto& x : *v) x = uniform_int(rng, 0, 3);
  ConfusionMatrix a(4, 4), b(4, 4), both(4, 4);
  accumulate_confusion(p1, g1, a);
  accumulate_confusion(p2, g2, b);
  auto pc = p1, gc = g1;
  pc.insert(pc.end(), p2.begin(), p2.end());
  gc.insert(gc.end(), g2.begin(), g2.end());
  accumulate_confusion(pc, gc, both);
  a += b;
  CHECK(a.counts == both.counts);

  CHECK_THROWS_AS(accumulate_confusion(p1, g2, a), DimensionError);
  CHECK_THROWS_AS(accumulate_confusion(std::vector<std::int64_t>{4}, std::vector<std::int64_t>{0}, a), InputError);
}

TEST_CASE("hungarian_assign: examples") {
  std::vector<double> c{1, 2, 3, 1};
  auto a = hungarian_assign(c, 2, 2);
  CHECK(a == std::vector<std::size_t>{0, 1});
  CHECK(assignment_cost(c, 2, a) == 2.0);

  std::vector<double> diag(25, 10.0);
  for (std::size_t i = 0; i < 5; ++i) diag[i * 5 + i] = 0.0;
  CHECK(hungarian_assign(diag, 5, 5) == std::vector<std::size_t>{0, 1, 2, 3, 4});

  std::vector<double> anti{5, 0, 0, 5};
  CHECK(hungarian_assign(anti, 2, 2) == std::vector<std::size_t>{1, 0});

  CHECK_THROWS_AS(hungarian_assign(std::vector<double>(6, 1.0), 2, 3), UsageError);
  std::vector<double> bad{1, std::numeric_limits<double>::quiet_NaN(), 0, 1};
  CHECK_THROWS_AS(hungarian_assign(bad, 2, 2), InputError);
}

TEST_CASE("hungarian_assign: equals exhaustive search for n <= 7") {
  Rng rng(2);
  for (std::size_t n = 1; n <= 7; ++n)
    for (int trial = 0; trial < 200; ++trial) {
      // Small ranges produce many ties, which exercises the tie rule.
      auto c = random_costs(rng, n, trial % 2 == 0 ? 3 : 1000);
      auto h = hungarian_assign(c, n, n), b = brute_force_assign(c, n);
      REQUIRE(h == b);
    }
}

TEST_CASE("compute_miou: perfect prediction and the 2x2 example") {
  auto perfect = make_cm(3, {5, 0, 0, 0, 2, 0, 0, 0, 7});
  auto m = evaluate(perfect, kKinds3);
  CHECK(m.miou == 1.0);
  CHECK(m.miou_st == 1.0);
  CHECK(m.miou_th == 1.0);

  std::vector<ClassKind> two{ClassKind::Stuff, ClassKind::Thing};
  auto cm = make_cm(2, {3, 1, 1, 3});
  std::vector<std::size_t> id{0, 1};
  auto r = compute_miou(cm, id, two);
  CHECK(r.iou[0] == doctest::Approx(0.6));
  CHECK(r.iou[1] == doctest::Approx(0.6));
  CHECK(r.miou == doctest::Approx(0.6));
  CHECK(format_report(r, two).find("mIoU=0.6000 mIoU_St=0.6000 mIoU_Th=0.6000") != std::string::npos);
}

TEST_CASE("compute_miou: mapping must be one-to-one") {
  auto cm = make_cm(2, {3, 1, 1, 3});
  std::vector<ClassKind> two{ClassKind::Stuff, ClassKind::Thing};
  std::vector<std::size_t> dup{0, 0};
  CHECK_THROWS(compute_miou(cm, dup, two));
}

TEST_CASE("relabeling invariance") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3, pixels = 400;
    std::vector<std::int64_t> gt(pixels), pred(pixels);
    for (std::size_t i = 0; i < pixels; ++i) {
      gt[i] = uniform_int(rng, 0, 2);
      pred[i] = bernoulli(rng, 0.7) ? gt[i] : uniform_int(rng, 0, 2);
    }
    std::vector<std::int64_t> perm{0, 1, 2};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::int64_t> relabeled(pixels);
    for (std::size_t i = 0; i < pixels; ++i) relabeled[i] = perm[static_cast<std::size_t>(pred[i])];
    ConfusionMatrix a(n, n), b(n, n);
    accumulate_confusion(pred, gt, a);
    accumulate_confusion(relabeled, gt, b);
    auto ma = evaluate(a, kKinds3), mb = evaluate(b, kKinds3);
    CHECK(ma.miou == mb.miou);
    CHECK(ma.iou == mb.iou);
    for (std::size_t k = 0; k < n; ++k) CHECK(mb.mapping[static_cast<std::size_t>(perm[k])] == ma.mapping[k]);
  }
}

TEST_CASE("mIoU monotonicity: correct pixels never lower a class IoU") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::int64_t> counts(9);
    for (auto& v : counts) v = uniform_int(rng, 0, 20);
    auto cm = make_cm(3, counts);
    const std::vector<std::size_t> id{0, 1, 2};
    auto before = compute_miou(cm, id, kKinds3);
    const auto c = static_cast<std::size_t>(uniform_int(rng, 0, 2));
    cm.at(c, c) += uniform_int(rng, 1, 10);
    auto after = compute_miou(cm, id, kKinds3);
    for (std::size_t k = 0; k < 3; ++k)
      if (before.scored[k]) CHECK(after.iou[k] >= before.iou[k]);
  }
}

TEST_CASE("empty classes are excluded; padding handles unequal class counts") {
  // Class 2 never occurs and is never predicted.
  auto cm = make_cm(3, {4, 1, 0, 1, 4, 0, 0, 0, 0});
  auto m = evaluate(cm, kKinds3);
  CHECK_FALSE(m.scored[2]);
  CHECK(m.miou == doctest::Approx(2.0 / 3));
  CHECK(m.miou_th == doctest::Approx(2.0 / 3));  // only class 1 among things

  std::vector<ClassKind> stuff_only{ClassKind::Stuff, ClassKind::Stuff};
  auto s = evaluate(make_cm(2, {2, 0, 0, 2}), stuff_only);
  CHECK(std::isnan(s.miou_th));

  // Four predicted clusters against three classes: the extra cluster counts as misses.
  ConfusionMatrix wide(4, 3);
  wide.at(0, 0) = 5;
  wide.at(1, 1) = 5;
  wide.at(2, 2) = 5;
  wide.at(3, 0) = 5;
  auto w = evaluate(wide, kKinds3);
  CHECK(w.iou[0] == doctest::Approx(0.5));
  CHECK(w.iou[1] == 1.0);
  CHECK(w.miou == doctest::Approx(2.5 / 3));
}

TEST_CASE("report and CSV formats") {
  auto cm = make_cm(3, {5, 1, 0, 0, 3, 1, 1, 0, 4});
  auto m = evaluate(cm, kKinds3);
  const auto report = format_report(m, kKinds3);
  CHECK(report.rfind("class  kind   IoU", 0) == 0);
  char summary[128];
  std::snprintf(summary, sizeof summary, "mIoU=%.4f mIoU_St=%.4f mIoU_Th=%.4f", m.miou, m.miou_st, m.miou_th);
  CHECK(report.find(summary) != std::string::npos);
  const auto csv = format_csv(m, kKinds3);
  CHECK(csv.rfind("name,kind,value\n", 0) == 0);
  CHECK(csv.find("class1,thing,") != std::string::npos);
  CHECK(csv.find("mIoU_St,stuff,") != std::string::npos);
}

TEST_CASE("random baseline matches the marginal formula") {
  // For i.i.d. labels with marginals q, E[IoU_c] ~ q^2 / (2q - q^2) for large samples.
  auto data = gen_shapes_dataset(60, 3, 32, 5);
  const auto counts = class_pixel_counts(data);
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  double expected = 0;
  for (auto c : counts) {
    const double q = c / total;
    expected += q / (2 - q);
  }
  expected /= 3;
  const double got = random_baseline_miou(data, 5, 11);
  CHECK(std::abs(got - expected) < 0.01);
  CHECK(random_baseline_miou(data, 5, 11) == got);
}

TEST_CASE("predict_labels and confusion_for") {
  ModelConfig c;
  c.encoder.stage_channels = {4, 8};
  c.encoder.output_stride = 4;
  c.encoder.input_size = 16;
  c.head_width = 8;
  c.num_classes = 3;
  ModelF model(c, 2);
  auto data = gen_shapes_dataset(5, 3, 16, 6);
  std::vector<TensorF> images;
  for (const auto& item : data.items) images.push_back(item.image);
  auto preds = predict_labels(model, images);
  REQUIRE(preds.size() == 5);
  for (const auto& p : preds) {
    REQUIRE(p.size() == 256);
    for (auto l : p) REQUIRE((l >= 0 && l < 3));
  }
  CHECK(predict_labels(model, images) == preds);
  auto cm = confusion_for(preds, data, 3);
  ConfusionMatrix manual(3, 3);
  for (std::size_t i = 0; i < 5; ++i) accumulate_confusion(preds[i], data.items[i].mask, manual);
  CHECK(cm.counts == manual.counts);
  CHECK(cm.total() == 5 * 256);
}

}  // TEST_SUITE
