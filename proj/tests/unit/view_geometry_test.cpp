#include <doctest.h>

#include "densesiam/augment.hpp"
#include "densesiam/errors.hpp"
#include "densesiam/geometry.hpp"
#include "ramp_check.hpp"
#include "support.hpp"

using namespace dsiam;

namespace {

ViewSpec view(Box crop, bool flip = false, int image = 100, int out = 64) {
  return ViewSpec{crop, flip, out, image, image};
}

}  // namespace

TEST_SUITE("view_geometry") {

TEST_CASE("intersect: examples") {
  auto a = intersect(view({0, 0, 60, 60}), view({40, 40, 60, 60}));
  REQUIRE(a.has_value());
  CHECK(*a == Box{40, 40, 20, 20});
  auto same = intersect(view({10, 5, 30, 20}), view({10, 5, 30, 20}));
  REQUIRE(same.has_value());
  CHECK(*same == Box{10, 5, 30, 20});
  CHECK_FALSE(intersect(view({0, 0, 10, 10}), view({50, 50, 10, 10})).has_value());
  // Touching edges share no area.
  CHECK_FALSE(intersect(Box{0, 0, 10, 10}, Box{10, 0, 10, 10}).has_value());
}

TEST_CASE("intersect: commutative") {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    auto rand_box = [&] {
      const double w = uniform(rng, 1, 60), h = uniform(rng, 1, 60);
      return Box{uniform(rng, 0, 100 - w), uniform(rng, 0, 100 - h), w, h};
    };
    const Box a = rand_box(), b = rand_box();
    CHECK(intersect(a, b) == intersect(b, a));
  }
}

TEST_CASE("make_grid: examples") {
  auto one = make_grid({40, 40, 20, 20}, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == Point{50, 50});
  auto two = make_grid({0, 0, 2, 2}, 2);
  REQUIRE(two.size() == 4);
  CHECK(two[0] == Point{0.5, 0.5});
  CHECK(two[1] == Point{1.5, 0.5});
  CHECK(two[2] == Point{0.5, 1.5});
  CHECK(two[3] == Point{1.5, 1.5});
}

TEST_CASE("make_grid: points lie strictly inside the box") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Box b{uniform(rng, 0, 50), uniform(rng, 0, 50), uniform(rng, 0.5, 50), uniform(rng, 0.5, 50)};
    const int k = static_cast<int>(uniform_int(rng, 1, 9));
    for (const auto& p : make_grid(b, k)) {
      CHECK(p.x > b.x0);
      CHECK(p.x < b.x0 + b.w);
      CHECK(p.y > b.y0);
      CHECK(p.y < b.y0 + b.h);
    }
  }
}

TEST_CASE("map_to_view: examples") {
  auto a = map_to_view({50, 50}, view({0, 0, 60, 60}));
  CHECK(a.x == doctest::Approx(0.8333).epsilon(1e-4));
  CHECK(a.y == doctest::Approx(0.8333).epsilon(1e-4));
  auto b = map_to_view({50, 50}, view({40, 40, 60, 60}, true));
  CHECK(b.x == doctest::Approx(0.8333).epsilon(1e-4));
  CHECK(b.y == doctest::Approx(0.1667).epsilon(1e-3));
  auto c = map_to_view({50, 50}, view({0, 0, 100, 100}));
  CHECK(c == Point{0.5, 0.5});
  CHECK_THROWS_AS(map_to_view({5, 5}, view({40, 40, 60, 60})), UsageError);
}

TEST_CASE("map_to_view: flipping twice is the identity") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const ViewSpec v = view({uniform(rng, 0, 40), uniform(rng, 0, 40), uniform(rng, 10, 60), uniform(rng, 10, 60)});
    ViewSpec f = v;
    f.hflip = true;
    const Point p{uniform(rng, v.crop.x0, v.crop.x0 + v.crop.w), uniform(rng, v.crop.y0, v.crop.y0 + v.crop.h)};
    const Point once = map_to_view(p, f);
    // Flipping the normalized coordinate again recovers the unflipped mapping.
    const Point twice{1.0 - once.x, once.y};
    const Point plain = map_to_view(p, v);
    CHECK(std::abs(twice.x - plain.x) < 1e-12);
    CHECK(twice.y == plain.y);
  }
}

TEST_CASE("build_correspondence: identical views and the worked example") {
  const ViewSpec v = view({10, 20, 50, 40}, true);
  auto same = build_correspondence(v, v, 3);
  REQUIRE(same.coords_v1.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) CHECK(same.coords_v1[i] == same.coords_v2[i]);

  auto g = build_correspondence(view({0, 0, 60, 60}), view({40, 40, 60, 60}, true), 1);
  REQUIRE(g.points_orig.size() == 1);
  CHECK(g.points_orig[0] == Point{50, 50});
  CHECK(g.coords_v1[0].x == doctest::Approx(0.8333).epsilon(1e-4));
  CHECK(g.coords_v2[0].x == doctest::Approx(0.8333).epsilon(1e-4));
  CHECK(g.coords_v2[0].y == doctest::Approx(0.1667).epsilon(1e-3));

  CHECK_THROWS_AS(build_correspondence(view({0, 0, 10, 10}), view({50, 50, 10, 10}), 3), EmptyOverlap);
}

TEST_CASE("build_correspondence: points inside both crops and exact round trip") {
  Rng rng(4);
  const auto cfg = AugmentConfig::pretrain(32);
  for (int trial = 0; trial < 300; ++trial) {
    auto [a, b] = sample_pair_params(80, 60, rng, cfg);
    auto g = build_correspondence(a.spec, b.spec, 7);
    for (std::size_t n = 0; n < g.points_orig.size(); ++n) {
      const auto& p = g.points_orig[n];
      for (const auto* s : {&a.spec, &b.spec}) {
        CHECK(p.x > s->crop.x0);
        CHECK(p.x < s->crop.x0 + s->crop.w);
        CHECK(p.y > s->crop.y0);
        CHECK(p.y < s->crop.y0 + s->crop.h);
      }
      const Point r1 = map_from_view(g.coords_v1[n], a.spec), r2 = map_from_view(g.coords_v2[n], b.spec);
      CHECK(std::abs(r1.x - p.x) < 1e-9);
      CHECK(std::abs(r1.y - p.y) < 1e-9);
      CHECK(std::abs(r2.x - p.x) < 1e-9);
      CHECK(std::abs(r2.y - p.y) < 1e-9);
    }
  }
}

TEST_CASE("validate: crops must stay inside the image") {
  CHECK_NOTHROW(validate(view({0, 0, 100, 100})));
  CHECK_THROWS_AS(validate(view({-1, 0, 50, 50})), ConfigError);
  CHECK_THROWS_AS(validate(view({60, 0, 50, 50})), ConfigError);
  CHECK_THROWS_AS(validate(view({0, 0, 0.5, 50})), ConfigError);
}

TEST_CASE("correspondence soundness on a coordinate ramp") {
  Rng rng(5);
  const int image = 128, out = 640;
  const auto cfg = AugmentConfig::pretrain(out);
  bool saw_flip = false;
  double worst = 0;
  for (int trial = 0; trial < 60; ++trial) {
    auto [a, b] = sample_pair_params(image, image, rng, cfg);
    saw_flip = saw_flip || a.spec.hflip || b.spec.hflip;
    worst = std::max(worst, test::ramp_correspondence_error(a.spec, b.spec, 7));
  }
  CHECK(saw_flip);
  CHECK(worst < 1e-3 * image);
}

TEST_CASE("round trip detects a wrong flip flag") {
  const ViewSpec a = view({0, 0, 80, 80}, false, 128, 640), b = view({30, 30, 80, 80}, true, 128, 640);
  CHECK(test::ramp_correspondence_error(a, b, 7) < 1e-3 * 128);
  ViewSpec wrong = b;
  wrong.hflip = false;
  auto g = build_correspondence(a, b, 7);
  double max_err = 0;
  for (std::size_t n = 0; n < g.points_orig.size(); ++n) {
    const Point r = map_from_view(g.coords_v2[n], wrong);
    max_err = std::max(max_err, std::abs(r.x - g.points_orig[n].x));
  }
  CHECK(max_err > 1.0);
}

}  // TEST_SUITE
