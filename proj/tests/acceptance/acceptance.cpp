// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only if all pass.
// Usage: densesiam_acceptance [criterion numbers...]   (default: all)
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "densesiam/augment.hpp"
#include "densesiam/dataset.hpp"
#include "densesiam/evaluation.hpp"
#include "densesiam/geometry.hpp"
#include "densesiam/gradcheck_suite.hpp"
#include "densesiam/objectives.hpp"
#include "densesiam/ops.hpp"
#include "densesiam/trainer.hpp"
#include "ramp_check.hpp"

using namespace dsiam;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

TensorD randn(Shape s, Rng& rng, bool grad = false) {
  TensorD t(s, grad);
  for (auto& v : t.data_mut()) v = normal(rng, 0.0, 1.0);
  return t;
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// ---- 1. gradient integrity ----

Outcome gradient_integrity() {
  const std::set<std::string> required{
      "conv2d",       "conv2d_stride2", "batch_norm_train",  "batch_norm_eval",    "softmax",
      "log_softmax",  "l2_normalize",   "grid_sample_field", "grid_sample_coords", "add",
      "mul",          "div",            "exp",               "log",                "relu",
      "matmul",       "bmm",            "dist_cosine",       "dist_ce",            "pixsim_cosine",
      "pixsim_ce",    "region_embeddings", "region_contrastive", "global",         "seg_ce",
      "total_pretrain", "total_seg"};
  SuiteOptions opt;
  opt.seeds = 20;
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::set<std::string> seen;
  int failed = 0;
  double worst = 0;
  std::string first;
  for (const auto& r : results) {
    seen.insert(r.name);
    worst = std::max(worst, r.max_rel_err);
    if (!r.pass()) {
      ++failed;
      if (first.empty()) first = r.name + ": " + r.first_failure;
    }
  }
  std::vector<std::string> missing;
  for (const auto& n : required)
    if (!seen.count(n)) missing.push_back(n);
  const bool ok = failed == 0 && missing.empty() && secs < 60.0 && opt.tolerance <= 1e-4;
  std::string d = fmt("%zu cases x 20 seeds, %d failed, max rel err %.2e (tol %.0e), %.1f s (limit 60)",
                      results.size(), failed, worst, opt.tolerance, secs);
  if (!missing.empty()) d += "; missing case " + missing.front();
  if (!first.empty()) d += "; " + first;
  return {ok, d};
}

// ---- 2. stop-gradient contract ----

// Builds each loss twice from the same leaves: once with stop_gradient on the
// target branch, once with the target branch detached into constants. The
// weight gradients must agree bit for bit.
Outcome stop_gradient_contract() {
  Rng rng(2002);
  int checked = 0, mismatched = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto x1 = randn(Shape{2, 3, 3, 3}, rng), x2 = randn(Shape{2, 3, 3, 3}, rng);
    auto wz = randn(Shape{4, 3, 1, 1}, rng), wp = randn(Shape{4, 4, 1, 1}, rng);
    auto e1 = randn(Shape{2, 3, 4}, rng), e2 = randn(Shape{2, 3, 4}, rng);
    auto wg = randn(Shape{4, 4}, rng), wh = randn(Shape{4, 4}, rng);

    using Build = std::function<TensorD(bool, TensorD&, TensorD&)>;
    std::vector<std::pair<Build, std::pair<TensorD*, TensorD*>>> cases;
    for (auto d : {Distance::Cosine, Distance::CrossEntropy}) {
      cases.push_back({[&, d](bool constant, TensorD& a, TensorD& b) {
                         auto z1 = conv2d(x1, a, TensorD{}, 1, 0), z2 = conv2d(x2, a, TensorD{}, 1, 0);
                         auto p1 = conv2d(z1, b, TensorD{}, 1, 0), p2 = conv2d(z2, b, TensorD{}, 1, 0);
                         if (constant) return pixsim_loss(SampledGrids<double>{z1.detach(), z2.detach(), p1, p2}, d, false);
                         return pixsim_loss(SampledGrids<double>{z1, z2, p1, p2}, d, true);
                       },
                       {&wz, &wp}});
    }
    auto heads = [&](TensorD& g, TensorD& h) {
      auto proj = [&](const TensorD& e) { return reshape(linear(reshape(e, {6, 4}), g), {2, 3, 4}); };
      auto pred = [&](const TensorD& v) { return reshape(linear(reshape(v, {6, 4}), h), {2, 3, 4}); };
      auto v1 = proj(e1), v2 = proj(e2);
      return std::array<TensorD, 4>{pred(v1), pred(v2), v1, v2};
    };
    cases.push_back({[&](bool constant, TensorD& g, TensorD& h) {
                       auto [u1, u2, v1, v2] = heads(g, h);
                       if (constant) return region_contrastive_loss(u1, u2, v1.detach(), v2.detach(), 0.2, false);
                       return region_contrastive_loss(u1, u2, v1, v2, 0.2, true);
                     },
                     {&wg, &wh}});
    cases.push_back({[&](bool constant, TensorD& g, TensorD& h) {
                       auto [u1, u2, v1, v2] = heads(g, h);
                       auto flat = [](const TensorD& t) { return reshape(t, {2, 12}); };
                       if (constant) return global_loss(flat(u1), flat(v1).detach(), flat(u2), flat(v2).detach(), false);
                       return global_loss(flat(u1), flat(v1), flat(u2), flat(v2), true);
                     },
                     {&wg, &wh}});
    for (auto& [build, leaves] : cases) {
      auto a1 = leaves.first->clone(true), b1 = leaves.second->clone(true);
      auto a2 = leaves.first->clone(true), b2 = leaves.second->clone(true);
      auto la = build(false, a1, b1), lb = build(true, a2, b2);
      la.backward();
      lb.backward();
      ++checked;
      if (la.item() != lb.item() || !same_bits(a1.grad(), a2.grad()) || !same_bits(b1.grad(), b2.grad())) ++mismatched;
    }
  }
  return {mismatched == 0, fmt("%d graphs (pixel cosine/ce, region, global), %d with any gradient difference (tol 0)",
                               checked, mismatched)};
}

// ---- 3. view-swap symmetry ----

Outcome symmetry() {
  Rng rng(3003);
  int mismatched = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto b = static_cast<std::size_t>(uniform_int(rng, 1, 4)), n = static_cast<std::size_t>(uniform_int(rng, 2, 6));
    const auto k = static_cast<std::size_t>(uniform_int(rng, 1, 4)), d = static_cast<std::size_t>(uniform_int(rng, 2, 8));
    SampledGrids<double> g{randn(Shape{b, n, k, k}, rng), randn(Shape{b, n, k, k}, rng), randn(Shape{b, n, k, k}, rng),
                           randn(Shape{b, n, k, k}, rng)};
    SampledGrids<double> gs{g.z2p, g.z1p, g.p2p, g.p1p};
    for (auto dist : {Distance::Cosine, Distance::CrossEntropy})
      if (pixsim_loss(g, dist).item() != pixsim_loss(gs, dist).item()) ++mismatched;
    auto u1 = randn(Shape{b, n, d}, rng), u2 = randn(Shape{b, n, d}, rng);
    auto v1 = randn(Shape{b, n, d}, rng), v2 = randn(Shape{b, n, d}, rng);
    const double tau = uniform(rng, 0.05, 1.0);
    if (region_contrastive_loss(u1, u2, v1, v2, tau).item() != region_contrastive_loss(u2, u1, v2, v1, tau).item())
      ++mismatched;
    auto p1 = randn(Shape{b, d}, rng), z1 = randn(Shape{b, d}, rng);
    auto p2 = randn(Shape{b, d}, rng), z2 = randn(Shape{b, d}, rng);
    if (global_loss(p1, z1, p2, z2).item() != global_loss(p2, z2, p1, z1).item()) ++mismatched;
  }
  return {mismatched == 0, fmt("100 configurations x 4 losses, %d not bit-identical after swapping views", mismatched)};
}

// ---- 4. analytic anchors ----

Outcome anchors() {
  bool ok = true;
  std::string d;
  for (std::size_t n : {2u, 27u, 128u}) {
    TensorD u = TensorD::full(Shape{1, n}, 0.37);
    const double err = std::abs(dist_ce(u, u, 1).item() - std::log(static_cast<double>(n)));
    ok = ok && err < 1e-9;
    d += fmt("ce(N=%zu) err %.1e; ", n, err);
  }
  const auto [l1, l4] = seg_lambdas(27, 128);
  const bool lam = std::abs(l4 - 0.4045) < 1e-4 && std::abs(l1 - 0.5955) < 1e-4 && std::abs(l1 + l4 - 1.0) < 1e-12;
  const double lr = effective_lr(0.05, 512);
  ok = ok && lam && lr == 0.1;
  d += fmt("lambda1=%.6f lambda4=%.6f; effective_lr(0.05,512)=%g (exact %s)", l1, l4, lr, lr == 0.1 ? "yes" : "no");
  return {ok, d};
}

// ---- 5. geometry ----

Outcome geometry() {
  Rng rng(5005);
  const int image = 128, out = 640, k = 7;
  const auto cfg = AugmentConfig::pretrain(out);
  double worst = 0, worst_round = 0;
  int flips = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto [a, b] = sample_pair_params(image, image, rng, cfg);
    flips += a.spec.hflip || b.spec.hflip;
    worst = std::max(worst, test::ramp_correspondence_error(a.spec, b.spec, k));
    const auto g = build_correspondence(a.spec, b.spec, k);
    for (std::size_t n = 0; n < g.points_orig.size(); ++n) {
      for (const auto& [c, s] : {std::pair{g.coords_v1[n], a.spec}, std::pair{g.coords_v2[n], b.spec}}) {
        const Point r = map_from_view(c, s);
        worst_round = std::max({worst_round, std::abs(r.x - g.points_orig[n].x), std::abs(r.y - g.points_orig[n].y)});
      }
    }
  }
  const double tol = 1e-3 * image;
  return {worst < tol && worst_round < 1e-9 && flips > 0,
          fmt("1000 pairs (%d with a flip), ramp error %.2e px (tol %.3f), round trip %.1e (tol 1e-9)", flips, worst, tol,
              worst_round)};
}

// ---- 6. assignment oracle ----

Outcome assignment() {
  Rng rng(6006);
  int mismatched = 0, total = 0;
  for (std::size_t n = 2; n <= 7; ++n)
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> c(n * n);
      const int hi = trial % 2 == 0 ? 4 : 1000;
      for (auto& v : c) v = static_cast<double>(uniform_int(rng, -hi, hi));
      const auto h = hungarian_assign(c, n, n), b = brute_force_assign(c, n);
      ++total;
      if (h != b || assignment_cost(c, n, h) != assignment_cost(c, n, b)) ++mismatched;
    }
  return {mismatched == 0, fmt("%d matrices (n = 2..7), %d differ from exhaustive search", total, mismatched)};
}

// ---- 7. non-collapse pretraining ----

Outcome pretraining() {
  bool ok = true;
  std::string d;
  double secs_total = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset data = gen_shapes_dataset(512, 3, 64, seed);
    TrainConfig cfg;  // defaults: K 7, lambda1 1, lambda2 0.1, region start 0.5
    cfg.mode = Mode::Pretrain;
    cfg.batch_size = 32;
    cfg.epochs = 19;  // 16 steps per epoch
    cfg.max_steps = 300;
    cfg.seed = seed;
    Trainer t(cfg, data);
    std::vector<double> totals;
    double last_collapse = 0;
    t.on_step([&](const StepMetrics& m) {
      totals.push_back(m.total);
      last_collapse = m.collapse;
    });
    t.run();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    secs_total += secs;
    const double first = std::accumulate(totals.begin(), totals.begin() + 20, 0.0) / 20;
    const double last = std::accumulate(totals.end() - 20, totals.end(), 0.0) / 20;
    const double floor = 0.5 / std::sqrt(static_cast<double>(cfg.global_dim));
    const bool finite = std::all_of(totals.begin(), totals.end(), [](double v) { return std::isfinite(v); });
    const bool loss_ok = last <= 0.8 * first;
    const bool collapse_ok = last_collapse >= floor;
    ok = ok && finite && loss_ok && collapse_ok && totals.size() == 300;
    d += fmt("seed %llu: loss %.3f -> %.3f (ratio %.3f, need <= 0.8) %s, collapse %.4f (need >= %.4f) %s; ",
             static_cast<unsigned long long>(seed), first, last, last / first, loss_ok ? "ok" : "no", last_collapse,
             floor, collapse_ok ? "ok" : "no");
  }
  ok = ok && secs_total < 15 * 60;
  d += fmt("%.0f s (limit 900)", secs_total);
  return {ok, d};
}

// ---- 8. segmentation above chance ----

Outcome segmentation() {
  bool ok = true;
  std::string d;
  double secs_total = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset train = gen_shapes_dataset(2000, 3, 64, seed);
    const Dataset val = gen_shapes_dataset(200, 3, 64, derive_seed(seed, {fnv1a("val")}));
    TrainConfig cfg;
    cfg.mode = Mode::Seg;
    cfg.epochs = 5;
    cfg.N = 3;
    cfg.N_aux = 32;
    cfg.seed = seed;
    Trainer t(cfg, train);
    t.run();
    std::vector<TensorF> images;
    for (const auto& item : val.items) images.push_back(item.image);
    const auto preds = predict_labels(t.model(), images);
    const SegMetrics m = evaluate(confusion_for(preds, val, 3), val.class_kinds);
    const double baseline = random_baseline_miou(val, 20, seed);
    secs_total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double ratio = m.miou / baseline;
    ok = ok && ratio >= 2.0;
    d += fmt("seed %llu: mIoU %.4f vs baseline %.4f (x%.2f, need >= 2); ", static_cast<unsigned long long>(seed),
             m.miou, baseline, ratio);
  }
  ok = ok && secs_total < 30 * 60;
  d += fmt("%.0f s (limit 1800)", secs_total);
  return {ok, d};
}

// ---- 9. region schedule ----

std::vector<std::string> metric_rows(Trainer& t, std::optional<std::int64_t> until = std::nullopt) {
  std::vector<std::string> rows;
  t.on_step([&](const StepMetrics& m) { rows.push_back(metrics_row(m)); });
  t.run(until);
  return rows;
}

TrainConfig small_config(Mode mode, std::uint64_t seed) {
  TrainConfig c;
  c.mode = mode;
  c.batch_size = 8;
  c.epochs = 4;
  c.view_size = 32;
  c.N = mode == Mode::Pretrain ? 16 : 0;
  c.N_aux = 16;
  c.K = 5;
  c.seed = seed;
  return c;
}

Outcome region_schedule() {
  bool ok = true;
  std::string d;
  const Dataset data = gen_shapes_dataset(32, 3, 32, 9);
  for (auto mode : {Mode::Pretrain, Mode::Seg}) {
    auto cfg = small_config(mode, 9);
    Trainer with(cfg, data);
    cfg.lambda2 = 0.0;
    Trainer without(cfg, data);
    const auto a = metric_rows(with), b = metric_rows(without);
    const auto before = static_cast<std::size_t>(2 * with.steps_per_epoch());
    const bool same = a.size() == b.size() && std::equal(a.begin(), a.begin() + before, b.begin());
    const bool diverge = a[before] != b[before];
    ok = ok && same && diverge;
    d += fmt("%s: first %zu steps %s, step %zu %s; ", to_string(mode).c_str(), before,
             same ? "bit-identical" : "DIFFER", before, diverge ? "diverges" : "does not diverge");
  }
  return {ok, d};
}

// ---- 10. persistence ----

Outcome persistence() {
  const fs::path dir = fs::temp_directory_path() / ("densesiam_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  bool ok = true;
  std::string d;

  const Dataset data = gen_shapes_dataset(24, 4, 32, 10);
  save_dataset(data, dir / "data.dst1");
  const Dataset back = load_dataset(dir / "data.dst1");
  bool data_ok = back.size() == data.size() && back.class_kinds == data.class_kinds;
  for (std::size_t i = 0; data_ok && i < data.size(); ++i) {
    const auto x = data.items[i].image.data(), y = back.items[i].image.data();
    data_ok = std::equal(x.begin(), x.end(), y.begin(), y.end()) && data.items[i].mask == back.items[i].mask;
  }
  ok = ok && data_ok;
  d += std::string("dataset ") + (data_ok ? "bit-exact" : "DIFFERS") + "; ";

  for (auto mode : {Mode::Pretrain, Mode::Seg}) {
    const auto cfg = small_config(mode, 11);
    Trainer full(cfg, data);
    auto all = metric_rows(full);
    full.save_checkpoint(dir / "full.ckpt");

    Trainer first(cfg, data);
    auto csv = metric_rows(first, 1);
    first.save_checkpoint(dir / "half.ckpt");
    const auto ckpt = dst1::Container::load(dir / "half.ckpt");
    const bool ckpt_ok = ckpt.encode() == first.checkpoint().encode();
    Trainer second = Trainer::resume(ckpt, data);
    auto tail = metric_rows(second);
    csv.insert(csv.end(), tail.begin(), tail.end());
    second.save_checkpoint(dir / "end.ckpt");
    const bool csv_ok = csv == all;
    const bool end_ok = dst1::Container::load(dir / "end.ckpt").encode() == dst1::Container::load(dir / "full.ckpt").encode();
    ok = ok && ckpt_ok && csv_ok && end_ok;
    d += fmt("%s: checkpoint %s, resumed CSV %s (%zu rows), final checkpoint %s; ", to_string(mode).c_str(),
             ckpt_ok ? "bit-exact" : "DIFFERS", csv_ok ? "bit-exact" : "DIFFERS", all.size(),
             end_ok ? "bit-exact" : "DIFFERS");
  }
  fs::remove_all(dir);
  return {ok, d};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"gradient integrity", gradient_integrity},
      {"stop-gradient contract", stop_gradient_contract},
      {"view-swap symmetry", symmetry},
      {"analytic anchors", anchors},
      {"view geometry", geometry},
      {"assignment oracle", assignment},
      {"non-collapse pretraining", pretraining},
      {"segmentation above chance", segmentation},
      {"region schedule", region_schedule},
      {"persistence", persistence},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    while (o.detail.ends_with(" ") || o.detail.ends_with(";")) o.detail.pop_back();
    std::printf("%s %2d %-26s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("acceptance: %d failed\n", failed);
  return failed == 0 ? 0 : 1;
}
