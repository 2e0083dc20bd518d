#include "densesiam/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>

#include "densesiam/networks.hpp"
#include "densesiam/objectives.hpp"
#include "densesiam/ops.hpp"
#include "densesiam/rng.hpp"

namespace dsiam {

namespace {

struct Program {
  std::function<TensorD(const std::vector<TensorD>&)> raw;  // any output shape
  std::vector<TensorD> inputs;
};

struct Case {
  const char* name;
  const char* group;
  std::function<Program(Rng&)> build;
  double step = 1e-4;
};

using In = const std::vector<TensorD>&;

TensorD randn(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = normal(rng, 0.0, scale);
  return TensorD(std::move(shape), std::move(v));
}

TensorD rand_range(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return TensorD(std::move(shape), std::move(v));
}

// Normal values with |x| >= 0.05, for inputs that feed a ReLU.
TensorD randn_off_zero(Rng& rng, Shape shape) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) {
    do x = normal(rng, 0.0, 1.0);
    while (std::abs(x) < 0.05);
  }
  return TensorD(std::move(shape), std::move(v));
}

// Logits [B,C,...] whose top two classes differ by at least 0.05 everywhere,
// so the argmax pseudo-labels are stable under finite-difference steps.
TensorD separated_logits(Rng& rng, Shape shape) {
  TensorD t = randn(rng, shape);
  auto v = t.data_mut();
  const std::size_t b = shape[0], c = shape[1], plane = numel_of(shape) / (b * c);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < plane; ++k) {
      auto at = [&](std::size_t ch) -> double& { return v[(i * c + ch) * plane + k]; };
      for (;;) {
        std::vector<double> col(c);
        for (std::size_t ch = 0; ch < c; ++ch) col[ch] = at(ch);
        std::sort(col.begin(), col.end());
        if (col[c - 1] - col[c - 2] >= 0.05) break;
        for (std::size_t ch = 0; ch < c; ++ch) at(ch) = normal(rng, 0.0, 1.0);
      }
    }
  return t;
}

// Sampling coordinates whose lattice positions stay 0.02 away from every
// integer, so no step crosses a bilinear cell edge or the clamp boundary.
TensorD safe_coords(Rng& rng, std::size_t b, std::size_t hg, std::size_t wg, std::size_t h, std::size_t w) {
  std::vector<double> v(b * hg * wg * 2);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double size = static_cast<double>(i % 2 == 0 ? w : h);
    double u, pos;
    do {
      u = uniform(rng, -0.2, 1.2);
      pos = u * size - 0.5;
    } while (std::abs(pos - std::round(pos)) < 0.02);
    v[i] = u;
  }
  return TensorD(Shape{b, hg, wg, 2}, std::move(v));
}

TensorD grid(Rng& rng, std::size_t b, std::size_t n, std::size_t k) { return randn(rng, {b, n, k, k}); }

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.encoder.stage_channels = {3, 4};
  cfg.encoder.output_stride = 2;
  cfg.encoder.input_size = 8;
  cfg.head_width = 4;
  cfg.num_classes = 3;
  cfg.region_dim = 4;
  cfg.global_dim = 4;
  return cfg;
}

// The program swaps the model's trainable tensors for the checked inputs.
Program network_program(Rng& rng, bool with_heads) {
  ModelConfig cfg = tiny_model_config();
  cfg.region_heads = with_heads;
  cfg.global_branch = with_heads;
  auto model = std::make_shared<ModelD>(cfg, rng());
  Program prog;
  prog.inputs.push_back(randn(rng, {4, 3, 8, 8}));
  std::vector<std::string> names;
  for (auto& p : model->params()) {
    if (!p.trainable()) continue;
    // Random BN affine terms so no parameter sits at a special value.
    if (p.kind == ParamKind::BnScale) p.tensor = rand_range(rng, p.tensor.shape(), 0.5, 1.5);
    if (p.kind == ParamKind::BnShift || p.kind == ParamKind::Bias) p.tensor = randn(rng, p.tensor.shape(), 0.3);
    if (!with_heads && p.name.rfind("encoder.", 0) != 0) continue;
    names.push_back(p.name);
    prog.inputs.push_back(p.tensor.detach());
  }
  // A separate random weighting per head output; an unweighted sum of the
  // affine-free BN output would be constant.
  std::vector<TensorD> w;
  for (Shape s : {Shape{4, 3, 4, 4}, Shape{4, 3, 4, 4}, Shape{4, 3, 4}, Shape{4, 3, 4}, Shape{4, 4}, Shape{4, 4}})
    w.push_back(randn(rng, s));
  prog.raw = [model, names, with_heads, w](In in) {
    for (std::size_t i = 0; i < names.size(); ++i) model->at(names[i]) = in[i + 1];
    TensorD f = model->encode(in[0], true);
    if (!with_heads) return f;
    TensorD z = model->project(f, true);
    TensorD p = model->predict(z, true);
    auto [u, v] = model->region_heads(region_embeddings(z, f), true);
    auto [pg, zg] = model->global_branch(f, true);
    TensorD total = sum(mul(z, w[0]));
    for (auto [t, k] : {std::pair{p, 1}, {u, 2}, {v, 3}, {pg, 4}, {zg, 5}}) total = add(total, sum(mul(t, w[k])));
    return total;
  };
  return prog;
}

std::vector<Case> make_cases() {
  std::vector<Case> c;
  auto unary = [&](const char* name, std::function<TensorD(const TensorD&)> f,
                   std::function<TensorD(Rng&)> gen) {
    c.push_back({name, "primitive", [f, gen](Rng& rng) { return Program{[f](In in) { return f(in[0]); }, {gen(rng)}}; }});
  };
  auto binary = [&](const char* name, std::function<TensorD(const TensorD&, const TensorD&)> f,
                    std::function<TensorD(Rng&)> gen_a, std::function<TensorD(Rng&)> gen_b) {
    c.push_back({name, "primitive", [f, gen_a, gen_b](Rng& rng) {
                   auto a = gen_a(rng);
                   auto b = gen_b(rng);
                   return Program{[f](In in) { return f(in[0], in[1]); }, {a, b}};
                 }});
  };
  auto n34 = [](Rng& r) { return randn(r, {3, 4}); };
  auto pos34 = [](Rng& r) { return rand_range(r, {3, 4}, 0.5, 2.0); };

  binary("add", [](auto& a, auto& b) { return add(a, b); }, n34, n34);
  binary("sub", [](auto& a, auto& b) { return sub(a, b); }, n34, n34);
  binary("mul", [](auto& a, auto& b) { return mul(a, b); }, n34, n34);
  binary("div", [](auto& a, auto& b) { return div(a, b); }, n34, pos34);
  unary("add_scalar", [](auto& a) { return add_scalar(a, 0.7); }, n34);
  unary("mul_scalar", [](auto& a) { return mul_scalar(a, -1.3); }, n34);
  unary("neg", [](auto& a) { return neg(a); }, n34);
  unary("relu", [](auto& a) { return relu(a); }, [](Rng& r) { return randn_off_zero(r, {3, 4}); });
  unary("exp", [](auto& a) { return exp(a); }, n34);
  unary("log", [](auto& a) { return log(a); }, pos34);
  unary("square", [](auto& a) { return square(a); }, n34);
  unary("sum", [](auto& a) { return sum(a); }, n34);
  unary("mean", [](auto& a) { return mean(a); }, n34);
  unary("sum_axis", [](auto& a) { return sum_axis(a, 1); }, [](Rng& r) { return randn(r, {2, 3, 4}); });
  unary("mean_axis", [](auto& a) { return mean_axis(a, 0); }, [](Rng& r) { return randn(r, {2, 3, 4}); });
  unary("reshape", [](auto& a) { return reshape(a, {4, 6}); }, [](Rng& r) { return randn(r, {2, 3, 4}); });
  unary("transpose", [](auto& a) { return transpose(a, 0, 2); }, [](Rng& r) { return randn(r, {2, 3, 4}); });
  binary("matmul", [](auto& a, auto& b) { return matmul(a, b); }, [](Rng& r) { return randn(r, {3, 4}); },
         [](Rng& r) { return randn(r, {4, 5}); });
  binary("bmm", [](auto& a, auto& b) { return bmm(a, b); }, [](Rng& r) { return randn(r, {2, 3, 4}); },
         [](Rng& r) { return randn(r, {2, 4, 2}); });
  c.push_back({"linear", "primitive", [](Rng& rng) {
                 return Program{[](In in) { return linear(in[0], in[1], in[2]); },
                                {randn(rng, {5, 4}), randn(rng, {3, 4}), randn(rng, {3})}};
               }});
  c.push_back({"conv2d", "primitive", [](Rng& rng) {
                 return Program{[](In in) { return conv2d(in[0], in[1], in[2], 1, 1); },
                                {randn(rng, {2, 3, 8, 8}), randn(rng, {4, 3, 3, 3}, 0.5), randn(rng, {4})}};
               }});
  c.push_back({"conv2d_stride2", "primitive", [](Rng& rng) {
                 return Program{[](In in) { return conv2d(in[0], in[1], TensorD{}, 2, 1); },
                                {randn(rng, {2, 2, 7, 7}), randn(rng, {3, 2, 3, 3}, 0.5)}};
               }});
  c.push_back({"batch_norm_train", "primitive", [](Rng& rng) {
                 return Program{[](In in) {
                                  TensorD rm(Shape{3}), rv = TensorD::full({3}, 1.0);
                                  return batch_norm(in[0], in[1], in[2], rm, rv, true);
                                },
                                {randn(rng, {4, 3, 2, 2}), rand_range(rng, {3}, 0.5, 1.5), randn(rng, {3})}};
               }});
  c.push_back({"batch_norm_1d_train", "primitive", [](Rng& rng) {
                 return Program{[](In in) {
                                  TensorD rm(Shape{5}), rv = TensorD::full({5}, 1.0);
                                  return batch_norm(in[0], TensorD{}, TensorD{}, rm, rv, true);
                                },
                                {randn(rng, {6, 5})}};
               }});
  c.push_back({"batch_norm_eval", "primitive", [](Rng& rng) {
                 auto rm = randn(rng, {3});
                 auto rv = rand_range(rng, {3}, 0.5, 2.0);
                 return Program{[rm, rv](In in) {
                                  TensorD m = rm.clone(), v = rv.clone();
                                  return batch_norm(in[0], in[1], in[2], m, v, false);
                                },
                                {randn(rng, {2, 3, 2, 2}), rand_range(rng, {3}, 0.5, 1.5), randn(rng, {3})}};
               }});
  unary("softmax", [](auto& a) { return softmax(a, 1); }, [](Rng& r) { return randn(r, {2, 4, 3}); });
  unary("log_softmax", [](auto& a) { return log_softmax(a, 2); }, [](Rng& r) { return randn(r, {2, 4, 3}); });
  unary("l2_normalize", [](auto& a) { return l2_normalize(a, 1); }, [](Rng& r) { return randn(r, {2, 4, 3}); });
  c.push_back({"grid_sample_field", "primitive", [](Rng& rng) {
                 auto coords = safe_coords(rng, 2, 3, 3, 5, 6);
                 return Program{[coords](In in) { return grid_sample_bilinear(in[0], coords); },
                                {randn(rng, {2, 3, 5, 6})}};
               }});
  c.push_back({"grid_sample_coords", "primitive", [](Rng& rng) {
                 auto field = randn(rng, {2, 3, 5, 6});
                 return Program{[field](In in) { return grid_sample_bilinear(field, in[0]); },
                                {safe_coords(rng, 2, 3, 3, 5, 6)}};
               }});
  unary("stop_gradient", [](auto& a) { return mul(a, stop_gradient(a)); }, n34);
  unary("global_avg_pool", [](auto& a) { return global_avg_pool(a); }, [](Rng& r) { return randn(r, {2, 3, 4, 4}); });

  // Losses.
  c.push_back({"dist_cosine", "loss", [](Rng& rng) {
                 return Program{[](In in) { return dist_cosine(in[0], in[1], 1); },
                                {grid(rng, 2, 4, 3), grid(rng, 2, 4, 3)}};
               }});
  c.push_back({"dist_ce", "loss", [](Rng& rng) {
                 return Program{[](In in) { return dist_ce(in[0], in[1], 1); },
                                {grid(rng, 2, 4, 3), grid(rng, 2, 4, 3)}};
               }});
  for (auto d : {Distance::Cosine, Distance::CrossEntropy}) {
    for (bool sg : {true, false}) {
      const char* name = d == Distance::Cosine ? (sg ? "pixsim_cosine" : "pixsim_cosine_no_stopgrad")
                                               : (sg ? "pixsim_ce" : "pixsim_ce_no_stopgrad");
      c.push_back({name, "loss", [d, sg](Rng& rng) {
                     Program p;
                     for (int i = 0; i < 4; ++i) p.inputs.push_back(grid(rng, 2, 4, 3));
                     p.raw = [d, sg](In in) { return pixsim_loss(SampledGrids<double>{in[0], in[1], in[2], in[3]}, d, sg); };
                     return p;
                   }});
    }
  }
  c.push_back({"region_embeddings", "loss", [](Rng& rng) {
                 return Program{[](In in) { return region_embeddings(in[0], in[1]); },
                                {grid(rng, 2, 4, 3), grid(rng, 2, 5, 3)}};
               }});
  c.push_back({"contrastive", "loss", [](Rng& rng) {
                 return Program{[](In in) { return contrastive_loss(in[0], in[1], 0.1); },
                                {randn(rng, {2, 4, 3}), randn(rng, {2, 4, 3})}};
               }});
  c.push_back({"region_contrastive", "loss", [](Rng& rng) {
                 Program p;
                 for (int i = 0; i < 4; ++i) p.inputs.push_back(randn(rng, {2, 4, 3}));
                 p.raw = [](In in) { return region_contrastive_loss(in[0], in[1], in[2], in[3], 0.1); };
                 return p;
               }});
  c.push_back({"global", "loss", [](Rng& rng) {
                 Program p;
                 for (int i = 0; i < 4; ++i) p.inputs.push_back(randn(rng, {3, 5}));
                 p.raw = [](In in) { return global_loss(in[0], in[1], in[2], in[3]); };
                 return p;
               }});
  c.push_back({"seg_ce", "loss", [](Rng& rng) {
                 auto source = separated_logits(rng, {2, 4, 3, 3});
                 return Program{[source](In in) { return seg_ce_loss(in[0], source); }, {grid(rng, 2, 4, 3)}};
               }});
  c.push_back({"seg_ce_self", "loss", [](Rng& rng) {
                 return Program{[](In in) { return seg_ce_loss(in[0]); }, {separated_logits(rng, {2, 4, 3, 3})}};
               }});
  // L_sim + L_dense + L_region from raw grids, encoder features and a linear region head.
  c.push_back({"total_pretrain", "loss", [](Rng& rng) {
                 Program p;
                 for (int i = 0; i < 4; ++i) p.inputs.push_back(grid(rng, 2, 4, 3));  // z1 z2 p1 p2
                 for (int i = 0; i < 2; ++i) p.inputs.push_back(grid(rng, 2, 5, 3));  // enc1 enc2
                 p.inputs.push_back(randn(rng, {3, 5}, 0.5));                          // region weight
                 for (int i = 0; i < 4; ++i) p.inputs.push_back(randn(rng, {2, 6}));   // pg1 zg1 pg2 zg2
                 p.raw = [](In in) {
                   const LossWeights w{1.0, 1.0, 0.1, 1.0, 0.0};
                   SampledGrids<double> g{in[0], in[1], in[2], in[3]};
                   auto head = [&](const TensorD& z, const TensorD& enc) {
                     TensorD e = region_embeddings(z, enc);
                     return reshape(linear(reshape(e, {8, 5}), in[6]), {2, 4, 3});
                   };
                   TensorD v1 = head(in[0], in[4]), v2 = head(in[1], in[5]);
                   TensorD u1 = mul(v1, v1), u2 = mul(v2, v2);
                   return total_pretrain_loss(global_loss(in[7], in[8], in[9], in[10]),
                                              pixsim_loss(g, Distance::CrossEntropy),
                                              region_contrastive_loss(u1, u2, v1, v2, 0.1), w);
                 };
                 return p;
               }});
  // lambda1 L_dense + lambda2 L_region + lambda3 L_seg + lambda4 L_aux.
  c.push_back({"total_seg", "loss", [](Rng& rng) {
                 Program p;
                 p.inputs.push_back(separated_logits(rng, {2, 4, 3, 3}));  // z1
                 p.inputs.push_back(separated_logits(rng, {2, 4, 3, 3}));  // z2
                 for (int i = 0; i < 2; ++i) p.inputs.push_back(grid(rng, 2, 4, 3));  // p1 p2
                 for (int i = 0; i < 4; ++i) p.inputs.push_back(grid(rng, 2, 6, 3));  // aux z1 z2 p1 p2
                 for (int i = 0; i < 2; ++i) p.inputs.push_back(grid(rng, 2, 5, 3));  // enc1 enc2
                 p.inputs.push_back(randn(rng, {3, 5}, 0.5));
                 p.raw = [](In in) {
                   const auto [l1, l4] = seg_lambdas(4, 6);
                   const LossWeights w{1.0, l1, 0.1, 1.0, l4};
                   SampledGrids<double> g{in[0], in[1], in[2], in[3]};
                   SampledGrids<double> aux{in[4], in[5], in[6], in[7]};
                   auto head = [&](const TensorD& z, const TensorD& enc) {
                     return reshape(linear(reshape(region_embeddings(z, enc), {8, 5}), in[10]), {2, 4, 3});
                   };
                   TensorD v1 = head(in[0], in[8]), v2 = head(in[1], in[9]);
                   TensorD l_seg = mul_scalar(add(seg_ce_loss(in[0]), seg_ce_loss(in[1])), 0.5);
                   return total_seg_loss(pixsim_loss(g, Distance::CrossEntropy),
                                         region_contrastive_loss(mul(v1, v1), mul(v2, v2), v1, v2, 0.1), l_seg,
                                         pixsim_loss(aux, Distance::CrossEntropy), w);
                 };
                 return p;
               }});
  // Smaller steps make crossing a ReLU kink inside the stencil unlikely.
  c.push_back({"network_encoder", "loss", [](Rng& rng) { return network_program(rng, false); }, 1e-5});
  c.push_back({"network_heads", "loss", [](Rng& rng) { return network_program(rng, true); }, 1e-5});
  return c;
}

}  // namespace

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> names;
  for (const auto& c : make_cases()) names.emplace_back(c.name);
  return names;
}

std::vector<SuiteResult> run_gradcheck_suite(const SuiteOptions& options) {
  std::vector<SuiteResult> results;
  for (const auto& c : make_cases()) {
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), c.name) == options.only.end())
      continue;
    SuiteResult r{c.name, c.group, options.seeds, 0, 0.0, {}};
    for (int s = 0; s < options.seeds; ++s) {
      Rng rng = make_rng(options.seed, {key(Stream::GradCheck), fnv1a(c.name), static_cast<std::uint64_t>(s)});
      Program prog = c.build(rng);
      const TensorD weights = randn(rng, prog.raw(prog.inputs).shape());
      auto fn = [&prog, weights](In in) { return sum(mul(prog.raw(in), weights)); };
      const auto report = grad_check(fn, prog.inputs, {options.tolerance, options.analytic_scale, c.step});
      r.max_rel_err = std::max(r.max_rel_err, report.max_rel_err);
      if (report.pass) {
        ++r.passed;
      } else if (r.first_failure.empty()) {
        r.first_failure = "seed " + std::to_string(s) + ": " + report.failure;
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace dsiam
