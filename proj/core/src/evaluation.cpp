#include "densesiam/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <random>

#include "densesiam/augment.hpp"
#include "densesiam/errors.hpp"
#include "densesiam/ops.hpp"
#include "densesiam/rng.hpp"

namespace dsiam {

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.n_pred != n_pred || other.n_gt != n_gt) throw DimensionError("confusion matrices differ in size");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

void accumulate_confusion(std::span<const std::int64_t> pred, std::span<const std::int64_t> gt, ConfusionMatrix& cm) {
  if (pred.size() != gt.size()) {
    throw DimensionError("accumulate_confusion: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(gt.size()) + " labels");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred[i], g = gt[i];
    if (p < 0 || g < 0 || static_cast<std::size_t>(p) >= cm.n_pred || static_cast<std::size_t>(g) >= cm.n_gt) {
      throw InputError("accumulate_confusion: label out of range (pred " + std::to_string(p) + ", truth " +
                       std::to_string(g) + ")");
    }
    ++cm.at(static_cast<std::size_t>(p), static_cast<std::size_t>(g));
  }
}

namespace {

// Shortest augmenting path method with potentials (1-based internally).
// Returns row -> column and the dual potentials u (rows), v (columns).
void hungarian_core(std::span<const double> a, std::size_t n, std::vector<std::size_t>& assign, std::vector<double>& u,
                    std::vector<double>& v) {
  const double inf = std::numeric_limits<double>::infinity();
  u.assign(n + 1, 0.0);
  v.assign(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  assign.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
}

}  // namespace

std::vector<std::size_t> hungarian_assign(std::span<const double> cost, std::size_t rows, std::size_t cols) {
  if (rows != cols) {
    throw UsageError("hungarian_assign: cost matrix must be square, got " + std::to_string(rows) + "x" +
                     std::to_string(cols) + " (pad it first)");
  }
  const std::size_t n = rows;
  if (cost.size() != n * n) throw DimensionError("hungarian_assign: cost has the wrong number of entries");
  if (n == 0) return {};
  double scale = 1.0;
  for (double c : cost) {
    if (!std::isfinite(c)) throw InputError("hungarian_assign: non-finite cost");
    scale = std::max(scale, std::abs(c));
  }
  std::vector<std::size_t> match;
  std::vector<double> u, v;
  hungarian_core(cost, n, match, u, v);

  // Every optimal assignment uses only edges that are tight under the optimal
  // duals, and every perfect matching of tight edges is optimal. Walk rows in
  // order and give each the smallest column that still admits a perfect
  // matching of the remaining rows.
  const double eps = 1e-9 * scale * static_cast<double>(n);
  std::vector<std::vector<std::size_t>> tight(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (cost[i * n + j] - u[i + 1] - v[j + 1] <= eps) tight[i].push_back(j);

  std::vector<std::size_t> row_of(n);
  for (std::size_t i = 0; i < n; ++i) row_of[match[i]] = i;
  std::vector<bool> col_fixed(n, false);
  std::vector<bool> seen(n);

  // Re-route row r (unfixed, > i) away from its column, ending at `target`.
  std::function<bool(std::size_t, std::size_t, std::size_t, std::size_t)> reroute =
      [&](std::size_t r, std::size_t i, std::size_t banned, std::size_t target) -> bool {
    for (std::size_t c : tight[r]) {
      if (col_fixed[c] || c == banned || seen[c]) continue;
      seen[c] = true;
      if (c == target || (row_of[c] > i && reroute(row_of[c], i, banned, target))) {
        match[r] = c;
        row_of[c] = r;
        return true;
      }
    }
    return false;
  };

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : tight[i]) {
      if (col_fixed[j]) continue;
      if (j == match[i]) break;
      const std::size_t r = row_of[j];
      const std::size_t freed = match[i];
      std::fill(seen.begin(), seen.end(), false);
      if (reroute(r, i, j, freed)) {
        match[i] = j;
        row_of[j] = i;
        break;
      }
    }
    col_fixed[match[i]] = true;
  }
  return match;
}

std::vector<std::size_t> brute_force_assign(std::span<const double> cost, std::size_t n) {
  std::vector<std::size_t> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    const double c = assignment_cost(cost, n, perm);
    if (c < best_cost) {
      best_cost = c;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double assignment_cost(std::span<const double> cost, std::size_t n, std::span<const std::size_t> assignment) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assignment[i]];
  return total;
}

SegMetrics compute_miou(const ConfusionMatrix& cm, std::span<const std::size_t> mapping,
                        std::span<const ClassKind> class_kinds) {
  const std::size_t n = std::max(cm.n_pred, cm.n_gt);
  if (mapping.size() != cm.n_pred) throw DimensionError("compute_miou: mapping must cover every predicted label");
  std::vector<bool> hit(n, false);
  for (auto g : mapping) {
    if (g >= n || hit[g]) throw UsageError("compute_miou: mapping is not one-to-one");
    hit[g] = true;
  }
  // Relabeled matrix, padded to n x n.
  std::vector<std::int64_t> m(n * n, 0);
  for (std::size_t p = 0; p < cm.n_pred; ++p)
    for (std::size_t g = 0; g < cm.n_gt; ++g) m[mapping[p] * n + g] += cm.at(p, g);

  SegMetrics out;
  out.mapping.assign(mapping.begin(), mapping.end());
  out.iou.assign(cm.n_gt, 0.0);
  out.scored.assign(cm.n_gt, false);
  double sum = 0, sum_st = 0, sum_th = 0;
  int cnt = 0, cnt_st = 0, cnt_th = 0;
  for (std::size_t c = 0; c < cm.n_gt; ++c) {
    std::int64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += m[c * n + k];
      col += m[k * n + c];
    }
    const std::int64_t inter = m[c * n + c];
    const std::int64_t uni = row + col - inter;
    if (uni == 0) continue;
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    out.iou[c] = iou;
    out.scored[c] = true;
    sum += iou;
    ++cnt;
    if (c < class_kinds.size() && class_kinds[c] == ClassKind::Stuff) {
      sum_st += iou;
      ++cnt_st;
    } else if (c < class_kinds.size()) {
      sum_th += iou;
      ++cnt_th;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.miou = cnt ? sum / cnt : nan;
  out.miou_st = cnt_st ? sum_st / cnt_st : nan;
  out.miou_th = cnt_th ? sum_th / cnt_th : nan;
  return out;
}

SegMetrics evaluate(const ConfusionMatrix& cm, std::span<const ClassKind> class_kinds) {
  const std::size_t n = std::max(cm.n_pred, cm.n_gt);
  std::vector<double> cost(n * n, 0.0);
  for (std::size_t p = 0; p < cm.n_pred; ++p)
    for (std::size_t g = 0; g < cm.n_gt; ++g) cost[p * n + g] = -static_cast<double>(cm.at(p, g));
  auto assign = hungarian_assign(cost, n, n);
  assign.resize(cm.n_pred);
  return compute_miou(cm, assign, class_kinds);
}

namespace {

std::string kind_name(std::span<const ClassKind> kinds, std::size_t c) {
  if (c >= kinds.size()) return "-";
  return kinds[c] == ClassKind::Stuff ? "stuff" : "thing";
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::string format_report(const SegMetrics& m, std::span<const ClassKind> class_kinds) {
  std::string out = "class  kind   IoU\n";
  for (std::size_t c = 0; c < m.iou.size(); ++c) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%-6zu %-6s %s\n", c, kind_name(class_kinds, c).c_str(),
                  m.scored[c] ? fixed4(m.iou[c]).c_str() : "n/a");
    out += buf;
  }
  out += "mIoU=" + fixed4(m.miou) + " mIoU_St=" + fixed4(m.miou_st) + " mIoU_Th=" + fixed4(m.miou_th) + "\n";
  return out;
}

std::string format_csv(const SegMetrics& m, std::span<const ClassKind> class_kinds) {
  std::string out = "name,kind,value\n";
  char buf[128];
  for (std::size_t c = 0; c < m.iou.size(); ++c) {
    if (m.scored[c]) {
      std::snprintf(buf, sizeof buf, "class%zu,%s,%.9g\n", c, kind_name(class_kinds, c).c_str(), m.iou[c]);
    } else {
      std::snprintf(buf, sizeof buf, "class%zu,%s,\n", c, kind_name(class_kinds, c).c_str());
    }
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mIoU,all,%.9g\nmIoU_St,stuff,%.9g\nmIoU_Th,thing,%.9g\n", m.miou, m.miou_st,
                m.miou_th);
  out += buf;
  return out;
}

std::vector<std::vector<std::int64_t>> predict_labels(ModelF& model, std::span<const TensorF> images) {
  std::vector<std::vector<std::int64_t>> out;
  out.reserve(images.size());
  constexpr std::size_t chunk = 16;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    const TensorF x = stack_images(images.subspan(start, end - start));
    const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
    const TensorF z = model.project(model.encode(x, false), false);
    std::vector<float> coords(b * h * w * 2);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          float* c = &coords[((i * h + y) * w + xx) * 2];
          c[0] = static_cast<float>((static_cast<double>(xx) + 0.5) / static_cast<double>(w));
          c[1] = static_cast<float>((static_cast<double>(y) + 0.5) / static_cast<double>(h));
        }
    const TensorF up = grid_sample_bilinear(z, TensorF(Shape{b, h, w, 2}, std::move(coords)));
    const std::size_t n = up.dim(1), plane = h * w;
    auto v = up.data();
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<std::int64_t> labels(plane);
      for (std::size_t k = 0; k < plane; ++k) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c)
          if (v[(i * n + c) * plane + k] > v[(i * n + best) * plane + k]) best = c;
        labels[k] = static_cast<std::int64_t>(best);
      }
      out.push_back(std::move(labels));
    }
  }
  return out;
}

ConfusionMatrix confusion_for(std::span<const std::vector<std::int64_t>> preds, const Dataset& data,
                              std::size_t pred_classes) {
  if (!data.labeled()) throw InputError("evaluation data has no masks");
  if (preds.size() != data.size()) {
    throw DimensionError("got " + std::to_string(preds.size()) + " predictions for " + std::to_string(data.size()) +
                         " images");
  }
  ConfusionMatrix cm(pred_classes, static_cast<std::size_t>(data.num_classes()));
  for (std::size_t i = 0; i < preds.size(); ++i) accumulate_confusion(preds[i], data.items[i].mask, cm);
  return cm;
}

double random_baseline_miou(const Dataset& data, int runs, std::uint64_t seed) {
  if (runs < 1) throw UsageError("random_baseline_miou: runs must be >= 1");
  const auto counts = class_pixel_counts(data);
  const std::size_t c = counts.size();
  double total = 0;
  for (int r = 0; r < runs; ++r) {
    Rng rng = make_rng(seed, {key(Stream::Baseline), static_cast<std::uint64_t>(r)});
    std::discrete_distribution<std::int64_t> draw(counts.begin(), counts.end());
    ConfusionMatrix cm(c, c);
    for (const auto& item : data.items)
      for (auto g : item.mask) ++cm.at(static_cast<std::size_t>(draw(rng)), static_cast<std::size_t>(g));
    total += evaluate(cm, data.class_kinds).miou;
  }
  return total / runs;
}

}  // namespace dsiam
