#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "densevox/net.hpp"

namespace dv {

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0;
  std::int64_t coords = 0;
  std::int64_t skipped = 0;  // coordinates straddling an activation kink
  bool pass = false;
};

namespace gradcheck_detail {

inline constexpr double kStep = 1e-4;
inline constexpr double kTol = 1e-6;

inline Tensor<double> gaussian_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<double> t{s};
  for (auto& v : t.data) v = rng.gaussian() * scale;
  return t;
}

inline double weighted_sum(const Tensor<double>& t, const Tensor<double>& r) {
  double s = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) s += t[i] * r[i];
  return s;
}

// Relative error with a near-zero escape hatch: when both values are tiny the
// quotient is meaningless, so tiny absolute differences count as exact.
inline double rel_err(double a, double n) {
  const double denom = std::max(std::abs(a), std::abs(n));
  if (denom < 1e-8) return std::abs(a - n) < 1e-10 ? 0.0 : 1.0;
  return std::abs(a - n) / denom;
}

// Central-difference comparison of `analytic` (aligned with `vars`) against
// the scalar function `f`, which must recompute from the current contents of
// *vars. `signature`, when set, fingerprints the non-smooth branch decisions
// taken during f; coordinates whose +h/-h evaluations land on different
// branches have no defined two-sided derivative and are skipped.
inline GradCheckReport check_numeric(
    const std::string& name, const std::vector<Tensor<double>*>& vars,
    const std::vector<const Tensor<double>*>& analytic, const std::function<double()>& f,
    Rng& rng, std::int64_t coords_per_tensor,
    const std::function<std::uint64_t()>& signature = nullptr) {
  GradCheckReport rep;
  rep.op = name;
  for (std::size_t t = 0; t < vars.size(); ++t) {
    Tensor<double>& var = *vars[t];
    const std::int64_t n = var.numel();
    const std::int64_t todo = std::min(n, coords_per_tensor);
    for (std::int64_t c = 0; c < todo; ++c) {
      const std::int64_t idx =
          (n <= coords_per_tensor) ? c : static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(n)));
      const double saved = var[idx];
      var[idx] = saved + kStep;
      const double fp = f();
      const std::uint64_t sig_p = signature ? signature() : 0;
      var[idx] = saved - kStep;
      const double fm = f();
      const std::uint64_t sig_m = signature ? signature() : 0;
      var[idx] = saved;
      if (signature && sig_p != sig_m) {
        ++rep.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2 * kStep);
      rep.max_rel_err = std::max(rep.max_rel_err, rel_err((*analytic[t])[idx], numeric));
      ++rep.coords;
    }
  }
  rep.pass = rep.coords >= 1 && rep.max_rel_err < kTol;
  return rep;
}

}  // namespace gradcheck_detail

inline GradCheckReport gradcheck_conv3d(std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng = Rng::derive(seed, 1);
  Tensor<double> x = gaussian_tensor(Shape{2, 3, 5, 5, 5}, rng);
  Tensor<double> w = gaussian_tensor(Shape{4, 3, 3, 3, 3}, rng, 0.3);
  Tensor<double> b = gaussian_tensor(Shape{4}, rng, 0.3);
  const Tensor<double> r = gaussian_tensor(conv3d_forward(x, w, b).shape, rng);

  Tensor<double> gx, gw, gb;
  conv3d_backward(r, x, w, &gx, gw, gb);
  auto f = [&] { return weighted_sum(conv3d_forward(x, w, b), r); };
  return check_numeric("conv3d", {&x, &w, &b}, {&gx, &gw, &gb}, f, rng, 120);
}

inline GradCheckReport gradcheck_batchnorm(std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng = Rng::derive(seed, 2);
  Tensor<double> x = gaussian_tensor(Shape{2, 3, 4, 4, 4}, rng);
  Tensor<double> gamma = gaussian_tensor(Shape{3}, rng, 0.2);
  Tensor<double> beta = gaussian_tensor(Shape{3}, rng, 0.2);
  for (auto& g : gamma.data) g += 1.0;
  const Tensor<double> r = gaussian_tensor(x.shape, rng);

  auto run = [&](BatchNormCache<double>* cache) {
    std::vector<double> rm(3, 0.0), rv(3, 1.0);  // fresh stats; EMA side effect discarded
    return batchnorm_forward(x, gamma, beta, Mode::train, rm, rv, cache);
  };
  BatchNormCache<double> cache;
  run(&cache);
  Tensor<double> gx, gg, gb;
  batchnorm_backward(r, x, cache, gamma, gx, gg, gb);
  auto f = [&] { return weighted_sum(run(nullptr), r); };
  return check_numeric("batchnorm", {&x, &gamma, &beta}, {&gx, &gg, &gb}, f, rng, 120);
}

inline GradCheckReport gradcheck_prelu(std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng = Rng::derive(seed, 3);
  Tensor<double> x = gaussian_tensor(Shape{2, 3, 4, 4, 4}, rng);
  // keep inputs away from the kink so the two-sided difference stays one-branch
  for (auto& v : x.data)
    if (std::abs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
  Tensor<double> slope = gaussian_tensor(Shape{3}, rng, 0.1);
  for (auto& v : slope.data) v += 0.25;
  const Tensor<double> r = gaussian_tensor(x.shape, rng);

  Tensor<double> gx, ga;
  prelu_backward(r, x, slope, gx, ga);
  auto f = [&] { return weighted_sum(prelu_forward(x, slope), r); };
  return check_numeric("prelu", {&x, &slope}, {&gx, &ga}, f, rng, 120);
}

inline GradCheckReport gradcheck_dropout(std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng = Rng::derive(seed, 4);
  Tensor<double> x = gaussian_tensor(Shape{2, 3, 4, 4, 4}, rng);
  const double rate = 0.5;
  std::vector<std::uint8_t> mask;
  {
    Rng mrng = Rng::derive(seed, 0xd0);
    dropout_forward(x, rate, Mode::train, mrng, &mask);  // freeze the mask
  }
  const Tensor<double> r = gaussian_tensor(x.shape, rng);

  const Tensor<double> gx = dropout_backward(r, rate, mask);
  auto f = [&] { return weighted_sum(dropout_apply_mask(x, rate, mask), r); };
  return check_numeric("dropout", {&x}, {&gx}, f, rng, 120);
}

inline GradCheckReport gradcheck_softmax_xent(std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng = Rng::derive(seed, 5);
  Tensor<double> logits = gaussian_tensor(Shape{2, 4, 3, 3, 3}, rng);
  LabelArray targets{Shape{2, 3, 3, 3}};
  for (auto& t : targets.data) t = static_cast<std::uint8_t>(rng.uniform_index(4));

  const Tensor<double> ga = softmax_xent(logits, targets).grad_logits;
  auto f = [&] { return softmax_xent(logits, targets).loss; };
  return check_numeric("softmax_xent", {&logits}, {&ga}, f, rng, 120);
}

inline GradCheckReport gradcheck_concat(std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng = Rng::derive(seed, 6);
  Tensor<double> a = gaussian_tensor(Shape{2, 3, 4, 4, 4}, rng);
  Tensor<double> b = gaussian_tensor(Shape{2, 2, 4, 4, 4}, rng);
  const Tensor<double> r = gaussian_tensor(Shape{2, 5, 4, 4, 4}, rng);

  const Tensor<double> gaT = slice_channels(r, 0, 3);
  const Tensor<double> gbT = slice_channels(r, 3, 2);
  auto f = [&] { return weighted_sum(concat_channels<double>({a, b}), r); };
  return check_numeric("concat", {&a, &b}, {&gaT, &gbT}, f, rng, 120);
}

inline GradCheckReport gradcheck_crop(std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng = Rng::derive(seed, 7);
  Tensor<double> x = gaussian_tensor(Shape{2, 3, 6, 6, 6}, rng);
  const std::int64_t m = 2;
  const Tensor<double> r = gaussian_tensor(center_crop(x, m).shape, rng);

  // adjoint of a center crop: embed the weights into the larger map
  Tensor<double> gx{x.shape};
  const std::int64_t D = 6, H = 6, W = 6, oE = D - 2 * m;
  for (std::int64_t map = 0; map < 2 * 3; ++map)
    for (std::int64_t z = 0; z < oE; ++z)
      for (std::int64_t y = 0; y < oE; ++y)
        for (std::int64_t xx = 0; xx < oE; ++xx)
          gx[((map * D + z + m) * H + y + m) * W + xx + m] = r[((map * oE + z) * oE + y) * oE + xx];
  auto f = [&] { return weighted_sum(center_crop(x, m), r); };
  return check_numeric("crop", {&x}, {&gx}, f, rng, 200);
}

// A miniature two-stream densely cross-connected stack: 3 conv layers, two
// 1x1x1 stages, 4-class head, checked end to end through the graph engine.
inline GradCheckReport gradcheck_composite(std::uint64_t seed) {
  using namespace gradcheck_detail;
  NetworkSpec spec;
  spec.connectivity = Connectivity::hyperdense;
  spec.streams = 2;
  spec.input_channels_per_stream = 1;
  spec.conv_layers = {{"conv_1", 3, 2, false}, {"conv_2", 3, 3, false}, {"conv_3", 3, 4, false}};
  spec.fully_conv = {{"fully_conv_1", 1, 6, true}, {"fully_conv_2", 1, 5, true}};
  spec.dropout_rate = 0.5;

  const Graph g = build_graph(spec);
  ParamSet<double> params = init_params<double>(g, seed);
  BnStats<double> stats0 = init_bn_stats<double>(g);

  Rng rng = Rng::derive(seed, 8);
  const std::int64_t edge = 2 * spec.receptive_margin() + 3;  // 9^3 in, 3^3 out
  const Tensor<double> m1 = gaussian_tensor(Shape{2, 1, edge, edge, edge}, rng);
  const Tensor<double> m2 = gaussian_tensor(Shape{2, 1, edge, edge, edge}, rng);
  LabelArray targets{Shape{2, 3, 3, 3}};
  for (auto& t : targets.data) t = static_cast<std::uint8_t>(rng.uniform_index(4));
  const std::map<std::string, const Tensor<double>*> inputs{{"mod1", &m1}, {"mod2", &m2}};

  TapeState<double> tape;
  auto fwd = [&]() -> double {
    BnStats<double> stats = stats0;  // EMA side effects stay local to the call
    const Tensor<double> logits = forward(g, params, stats, inputs, Mode::train, seed ^ 0xc0, tape);
    return softmax_xent(logits, targets).loss;
  };
  // branch fingerprint: signs of every PReLU input (FNV over sign bits)
  auto signature = [&]() -> std::uint64_t {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
      if (g.nodes[i].kind == OpKind::prelu)
        for (double v : tape.acts[g.nodes[i].inputs[0]].data)
          h = (h ^ (v < 0 ? 1u : 0u)) * 1099511628211ULL;
    return h;
  };

  fwd();
  const Tensor<double> logits = tape.acts[static_cast<std::size_t>(g.output)];
  const ParamSet<double> grads = backward(g, params, tape, softmax_xent(logits, targets).grad_logits);

  std::vector<Tensor<double>*> vars;
  std::vector<const Tensor<double>*> analytic;
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    vars.push_back(&params.values[i]);
    analytic.push_back(&grads.values[i]);
  }
  return check_numeric("composite", vars, analytic, fwd, rng, 12, signature);
}

inline std::vector<GradCheckReport> run_gradcheck(const std::string& op, std::uint64_t seed) {
  std::vector<GradCheckReport> reports;
  auto want = [&](const char* name) { return op == "all" || op == name; };
  if (want("conv3d")) reports.push_back(gradcheck_conv3d(seed));
  if (want("batchnorm")) reports.push_back(gradcheck_batchnorm(seed));
  if (want("prelu")) reports.push_back(gradcheck_prelu(seed));
  if (want("dropout")) reports.push_back(gradcheck_dropout(seed));
  if (want("softmax_xent")) reports.push_back(gradcheck_softmax_xent(seed));
  if (want("concat")) reports.push_back(gradcheck_concat(seed));
  if (want("crop")) reports.push_back(gradcheck_crop(seed));
  if (want("composite")) reports.push_back(gradcheck_composite(seed));
  if (reports.empty()) fail(ErrorCategory::usage, "UnknownOp", op);
  return reports;
}

}  // namespace dv
