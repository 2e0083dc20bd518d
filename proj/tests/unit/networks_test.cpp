#include <doctest.h>

#include "densesiam/errors.hpp"
#include "densesiam/gradcheck_suite.hpp"
#include "densesiam/networks.hpp"
#include "densesiam/ops.hpp"
#include "support.hpp"

using namespace dsiam;

namespace {

ModelConfig tiny(int input = 16, int os = 4) {
  ModelConfig c;
  c.encoder.stage_channels = {4, 8, 8};
  c.encoder.output_stride = os;
  c.encoder.input_size = input;
  c.head_width = 8;
  c.num_classes = 5;
  c.aux_classes = 12;
  c.region_dim = 6;
  c.global_dim = 6;
  return c;
}

}  // namespace

TEST_SUITE("networks") {

TEST_CASE("encoder: output stride") {
  ModelConfig c;
  c.encoder.output_stride = 4;
  ModelF m(c, 0);
  Rng rng(1);
  auto y = m.encode(test::randn<float>(Shape{2, 3, 64, 64}, rng), true);
  CHECK(y.shape() == Shape{2, 64, 16, 16});
  c.encoder.output_stride = 8;
  ModelF m8(c, 0);
  CHECK(m8.encode(test::randn<float>(Shape{1, 3, 64, 64}, rng), false).shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("encoder: bad divisibility is a config error") {
  auto c = tiny(18, 4);
  CHECK_THROWS_AS(validate(c), ConfigError);
  CHECK_THROWS_AS(ModelF(c, 0), ConfigError);
  auto deep = tiny(16, 16);  // needs 4 halvings but only has 3 stages
  CHECK_THROWS_AS(validate(deep), ConfigError);
}

TEST_CASE("encoder: zeroed final stage on a constant input is spatially constant") {
  auto c = tiny();
  ModelF m(c, 3);
  for (auto& v : m.at("encoder.stage2.conv.weight").data_mut()) v = 0.0f;
  auto y = m.encode(TensorF::full(Shape{2, 3, 16, 16}, 0.4f), false);
  const std::size_t plane = y.dim(2) * y.dim(3);
  for (std::size_t bc = 0; bc < y.dim(0) * y.dim(1); ++bc)
    for (std::size_t k = 1; k < plane; ++k) CHECK(y.data()[bc * plane + k] == y.data()[bc * plane]);
}

TEST_CASE("dense projector: shape, affine-free final BN and standardized output") {
  auto c = tiny();
  ModelF m(c, 4);
  CHECK_FALSE(m.has("projector.layer2.bn.weight"));
  CHECK_FALSE(m.has("projector.layer2.bn.bias"));
  CHECK(m.has("projector.layer2.bn.running_mean"));
  CHECK(m.has("projector.layer1.bn.weight"));
  Rng rng(5);
  for (auto [h, w] : {std::pair{3, 7}, std::pair{5, 5}, std::pair{1, 2}}) {
    const auto hh = static_cast<std::size_t>(h), ww = static_cast<std::size_t>(w);
    auto feat = test::randn<float>(Shape{4, 8, hh, ww}, rng);
    auto z = m.project(feat, true);
    CHECK(z.shape() == Shape{4, 5, hh, ww});
    CHECK(m.predict(z, true).shape() == z.shape());
  }
  auto z = m.project(test::randn<float>(Shape{8, 8, 6, 6}, rng), true);
  const std::size_t per = 8 * 36;
  for (std::size_t ch = 0; ch < 5; ++ch) {
    double mean = 0, sq = 0;
    for (std::size_t b = 0; b < 8; ++b)
      for (std::size_t k = 0; k < 36; ++k) {
        const double v = z.data()[(b * 5 + ch) * 36 + k];
        mean += v;
        sq += v * v;
      }
    mean /= per;
    const double var = sq / per - mean * mean;
    CHECK(std::abs(mean) < 1e-3);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-3);
  }
}

TEST_CASE("dense predictor: zero final layer gives zero output") {
  auto c = tiny();
  ModelF m(c, 6);
  for (auto& v : m.at("predictor.layer1.conv.weight").data_mut()) v = 0.0f;
  for (auto& v : m.at("predictor.layer1.conv.bias").data_mut()) v = 0.0f;
  Rng rng(7);
  auto p = m.predict(test::randn<float>(Shape{2, 5, 3, 3}, rng), true);
  for (float v : p.data()) CHECK(v == 0.0f);
}

TEST_CASE("aux head: channel count and absence") {
  auto c = tiny();
  ModelF m(c, 8);
  Rng rng(9);
  auto feat = test::randn<float>(Shape{2, 8, 4, 4}, rng);
  auto za = m.project_aux(feat, true);
  CHECK(za.shape() == Shape{2, 12, 4, 4});
  CHECK(m.predict_aux(za, true).shape() == za.shape());
  c.aux_classes = 0;
  ModelF plain(c, 8);
  CHECK_THROWS_AS(plain.project_aux(feat, true), UsageError);
}

TEST_CASE("region heads: shapes and per-region equivariance") {
  auto c = tiny();
  ModelF m(c, 10);
  Rng rng(11);
  const std::size_t b = 3, n = 4;
  auto e = test::randn<float>(Shape{b, n, 8}, rng);
  auto [u, v] = m.region_heads(e, true);
  CHECK(u.shape() == Shape{b, n, 6});
  CHECK(v.shape() == Shape{b, n, 6});
  // Reverse the region axis; outputs must follow.
  std::vector<float> rev(e.numel());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < 8; ++k) rev[(i * n + r) * 8 + k] = e.data()[(i * n + (n - 1 - r)) * 8 + k];
  auto [u2, v2] = m.region_heads(TensorF(Shape{b, n, 8}, rev), true);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < 6; ++k) {
        CHECK(u2.data()[(i * n + r) * 6 + k] ==
              doctest::Approx(u.data()[(i * n + (n - 1 - r)) * 6 + k]).epsilon(1e-4));
        CHECK(v2.data()[(i * n + r) * 6 + k] ==
              doctest::Approx(v.data()[(i * n + (n - 1 - r)) * 6 + k]).epsilon(1e-4));
      }
}

TEST_CASE("global branch: dimensions and average pooling") {
  auto c = tiny();
  ModelF m(c, 12);
  Rng rng(13);
  auto [p, z] = m.global_branch(test::randn<float>(Shape{4, 8, 3, 3}, rng), true);
  CHECK(p.shape() == Shape{4, 6});
  CHECK(z.shape() == Shape{4, 6});
  auto pooled = global_avg_pool(TensorF::full(Shape{2, 3, 4, 5}, 1.25f));
  CHECK(pooled.shape() == Shape{2, 3});
  for (float v : pooled.data()) CHECK(v == 1.25f);
}

TEST_CASE("parameter count matches the closed form") {
  ModelConfig d;  // stages 16/32/64, width 64, N 32, region 64, global 64
  // Encoder 464 + 4672 + 18560; dense head 10496 + 560; region and global heads 12544 + 2144 each.
  CHECK(count_parameters(d) == 64128);
  CHECK(ModelF(d, 0).trainable_count() == 64128);
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c;
    c.encoder.stage_channels = {static_cast<int>(uniform_int(rng, 2, 9)), static_cast<int>(uniform_int(rng, 2, 9))};
    c.encoder.output_stride = 2;
    c.encoder.input_size = 8;
    c.head_width = static_cast<int>(uniform_int(rng, 2, 12));
    c.num_classes = static_cast<int>(uniform_int(rng, 2, 40));
    c.aux_classes = bernoulli(rng, 0.5) ? static_cast<int>(uniform_int(rng, 2, 40)) : 0;
    c.region_dim = static_cast<int>(uniform_int(rng, 2, 12));
    c.global_dim = static_cast<int>(uniform_int(rng, 2, 12));
    c.region_heads = bernoulli(rng, 0.5);
    c.global_branch = bernoulli(rng, 0.5);
    CHECK(ModelF(c, 1).trainable_count() == count_parameters(c));
  }
}

TEST_CASE("checkpoint round trip gives a bit-identical forward pass") {
  auto c = tiny();
  ModelF a(c, 15);
  Rng rng(16);
  auto x = test::randn<float>(Shape{2, 3, 16, 16}, rng);
  a.encode(x, true);  // moves the running statistics away from their init
  dst1::Container ckpt;
  write_parameters(a, ckpt);
  auto bytes = ckpt.encode();
  ModelF b(c, 99);
  read_parameters(b, dst1::Container::decode(bytes));
  auto ya = a.project(a.encode(x, false), false), yb = b.project(b.encode(x, false), false);
  CHECK(test::bit_equal(ya.data(), yb.data()));

  auto wider = tiny();
  wider.head_width = 9;
  ModelF other(wider, 0);
  CHECK_THROWS_AS(read_parameters(other, ckpt), ParseError);
}

TEST_CASE("train and eval differ only through batch-norm statistics") {
  auto c = tiny();
  c.encoder.stage_channels = {4};
  c.encoder.output_stride = 1;
  ModelF m(c, 17);
  Rng rng(18);
  auto x = test::randn<float>(Shape{4, 3, 6, 6}, rng);
  // Set the running statistics to this batch's statistics (population variance).
  auto pre = conv2d(x, m.at("encoder.stage0.conv.weight"), TensorF{}, 1, 1);
  const std::size_t plane = 36;
  for (std::size_t ch = 0; ch < 4; ++ch) {
    double mean = 0, sq = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = pre.data()[(b * 4 + ch) * plane + k];
        mean += v;
        sq += v * v;
      }
    mean /= 4 * plane;
    m.at("encoder.stage0.bn.running_mean").data_mut()[ch] = static_cast<float>(mean);
    m.at("encoder.stage0.bn.running_var").data_mut()[ch] = static_cast<float>(sq / (4 * plane) - mean * mean);
  }
  auto eval = m.encode(x, false);
  auto train = m.encode(x, true);
  CHECK(test::max_abs_diff(eval.data(), train.data()) < 1e-4);
}

TEST_CASE("float and double models agree after copy_parameters") {
  auto c = tiny();
  ModelF f(c, 19);
  ModelD d(c, 0);
  copy_parameters(d, f);
  Rng rng(20);
  auto xf = test::randn<float>(Shape{2, 3, 16, 16}, rng);
  TensorD xd(xf.shape(), std::vector<double>(xf.data().begin(), xf.data().end()));
  auto yf = f.project(f.encode(xf, false), false);
  auto yd = d.project(d.encode(xd, false), false);
  for (std::size_t i = 0; i < yf.numel(); ++i) CHECK(yf.data()[i] == doctest::Approx(yd.data()[i]).epsilon(1e-3));
}

TEST_CASE("encoder and head gradients pass the finite-difference check") {
  SuiteOptions opt;
  opt.seeds = 4;
  opt.only = {"network_encoder", "network_heads"};
  for (const auto& r : run_gradcheck_suite(opt)) CHECK_MESSAGE(r.pass(), r.name << ": " << r.first_failure);
}

}  // TEST_SUITE
