#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "lopt/diagnostics.hpp"
#include "lopt/tasks.hpp"

using namespace lopt;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 4;
  c.max_seq_len = 16;
  return c;
}

double norm_of(const ParameterMap<double>& p, const std::vector<std::string>& names) {
  long double s = 0;
  for (const auto& n : names)
    for (double x : p.at(n).value.values()) s += (long double)x * x;
  return std::sqrt(static_cast<double>(s));
}

TokenBatch batch(std::uint64_t seed, std::size_t n = 3) {
  TaskSpec t;
  t.operand_max = 99;
  return encode_examples(generate_task_data(t, n, seed), default_tokenizer()).tokens;
}

LinearOperator dense(const Eigen::MatrixXd& m) {
  LinearOperator op;
  op.in_dim = static_cast<std::size_t>(m.cols());
  op.apply = [m](const std::vector<double>& v) {
    const Eigen::VectorXd r = m * Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
    return std::vector<double>(r.data(), r.data() + r.size());
  };
  op.apply_transpose = [m](const std::vector<double>& u) {
    const Eigen::VectorXd r = m.transpose() * Eigen::Map<const Eigen::VectorXd>(u.data(), u.size());
    return std::vector<double>(r.data(), r.data() + r.size());
  };
  return op;
}

}  // namespace

TEST(Drift, ZeroForIdenticalParameters) {
  const auto m = Transformer<double>::init(tiny(), 1);
  const auto rep = layer_drift(m.config(), m.params(), m.params());
  ASSERT_EQ(rep.layers.size(), tiny().n_layers + 2);
  for (const auto& l : rep.layers) EXPECT_EQ(*l.total, 0.0) << l.layer;
  EXPECT_EQ(rep.d1, 0.0);
  EXPECT_EQ(rep.d2, 0.0);
  EXPECT_EQ(*rep.mean_over(0, 4), 0.0);
}

// Oracle: scaling the attention weights of one layer by (1 + a) gives an
// attention drift of a and a total drift of a * ||attn|| / ||layer||.
TEST(Drift, MatchesHandComputedScaling) {
  const auto m = Transformer<double>::init(tiny(), 2);
  ParameterMap<double> tuned = m.params();
  const double a = 0.03;
  for (const auto& n : names::layer_attention_params(2))
    for (auto& x : tuned.at(n).value.values()) x *= 1 + a;
  const auto rep = layer_drift(m.config(), m.params(), tuned);
  const auto& l2 = rep.layer("2");
  EXPECT_NEAR(*l2.attn, a, 1e-14);
  EXPECT_EQ(*l2.mlp, 0.0);
  const double expect = a * norm_of(m.params(), names::layer_attention_params(2)) /
                        norm_of(m.params(), names::layer_params(2));
  EXPECT_NEAR(*l2.total, expect, 1e-14);
  EXPECT_EQ(*rep.layer("1").total, 0.0);
  EXPECT_EQ(rep.d1, 0.0);
  EXPECT_NEAR(rep.d2, a * norm_of(m.params(), names::layer_attention_params(2)), 1e-13);
}

TEST(Drift, UndefinedForZeroBase) {
  const auto m = Transformer<double>::init(tiny(), 3);
  ParameterMap<double> base = m.params();
  for (const auto& n : names::layer_params(0))
    for (auto& x : base.at(n).value.values()) x = 0.0;
  const auto rep = layer_drift(m.config(), base, m.params());
  EXPECT_FALSE(rep.layer("0").total.has_value());
  // The mean skips undefined layers.
  EXPECT_EQ(*rep.mean_over(0, 2), *rep.layer("1").total);
  EXPECT_FALSE(rep.mean_over(0, 1).has_value());
}

TEST(Perturb, RealizesTargetAndLeavesRestUntouched) {
  const auto m = Transformer<double>::init(tiny(), 4);
  for (double target : {2e-7, 1e-3, 0.5}) {
    const auto p = perturb_front_layers(m.config(), m.params(), 2, target, 9);
    const auto rep = layer_drift(m.config(), m.params(), p);
    for (const std::string l : {"0", "1"}) EXPECT_NEAR(*rep.layer(l).total, target, 1e-12 * target) << l;
    for (const auto& [n, q] : m.params()) {
      const bool front = n.rfind("layers.0.", 0) == 0 || n.rfind("layers.1.", 0) == 0;
      if (!front) EXPECT_TRUE(p.at(n).value.identical(q.value)) << n;
    }
  }
  const auto a = perturb_front_layers(m.config(), m.params(), 2, 1e-3, 9);
  const auto b = perturb_front_layers(m.config(), m.params(), 2, 1e-3, 9);
  for (const auto& [n, q] : a) EXPECT_TRUE(q.value.identical(b.at(n).value));
}

TEST(SpectralNorm, MatchesSvdOnRandomMatrices) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 10; ++trial) {
    const int rows = 3 + static_cast<int>(rng() % 8), cols = 3 + static_cast<int>(rng() % 8);
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = g(rng);
    const double sigma = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
    PowerIterationOptions o;
    o.iters = 200;
    o.seed = trial;
    EXPECT_NEAR(spectral_norm_estimate(dense(m), o), sigma, 1e-4 * sigma) << trial;
  }
  EXPECT_EQ(spectral_norm_estimate(dense(Eigen::MatrixXd::Zero(4, 5))), 0.0);
}

// <u, J v> = <J^T u, v> up to the finite-difference error of the forward product.
TEST(Jacobian, ForwardAndTransposeAreAdjoint) {
  const auto m = Transformer<double>::init(tiny(), 6);
  const auto head = AuxHead<double>::init(16, 6);
  const auto tb = batch(7, 2);
  const auto h1 = m.first_half_values(tb);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  for (const auto& op : {k2_boundary_operator(m, h1), aux_boundary_operator(head, h1)}) {
    std::vector<double> v(op.in_dim);
    for (auto& x : v) x = g(rng);
    const auto jv = op.apply(v);
    std::vector<double> u(jv.size());
    for (auto& x : u) x = g(rng);
    const auto jtu = op.apply_transpose(u);
    ASSERT_EQ(jtu.size(), v.size());
    double lhs = 0, rhs = 0, scale = 0;
    for (std::size_t i = 0; i < u.size(); ++i) lhs += u[i] * jv[i], scale += std::abs(u[i] * jv[i]);
    for (std::size_t i = 0; i < v.size(); ++i) rhs += jtu[i] * v[i];
    EXPECT_NEAR(lhs, rhs, 1e-6 * scale);
  }
}

TEST(InterfaceDrift, ZeroWithoutChange) {
  const auto m = Transformer<double>::init(tiny(), 10);
  const auto tb = batch(11);
  TaskSpec t;
  const auto ex = generate_task_data(t, 3, 11);
  const auto eb = encode_examples(ex, default_tokenizer());
  const auto input = make_sft_input(eb.tokens, next_token_supervision<double>(eb.tokens, Tokenizer::kPad, eb.prompt_lens),
                                    Tokenizer::kPad);
  EXPECT_EQ(interface_drift_gamma(m, m.params(), input.chunks), 0.0);
  const auto moved = perturb_front_layers(m.config(), m.params(), 2, 1e-2, 1);
  EXPECT_GT(interface_drift_gamma(m, moved, input.chunks), 0.0);
}

TEST(Residual, OneNormPerRealToken) {
  const auto m = Transformer<double>::init(tiny(), 12);
  const auto head = AuxHead<double>::init(16, 12);
  const auto tb = batch(13, 4);
  const auto st = recon_residual_stats(m, head, tb, Tokenizer::kPad);
  std::size_t real = 0;
  for (int id : tb.ids) real += id != Tokenizer::kPad;
  ASSERT_EQ(st.norms.size(), real);
  double mx = 0, sum = 0;
  for (double x : st.norms) mx = std::max(mx, x), sum += x;
  EXPECT_EQ(st.max, mx);
  EXPECT_NEAR(st.mean, sum / real, 1e-12);
}

TEST(Triangle, HoldsOnRandomPairs) {
  const auto m = Transformer<double>::init(tiny(), 14);
  const auto head = AuxHead<double>::init(16, 14);
  std::vector<std::pair<TokenBatch, TokenBatch>> pairs;
  std::mt19937_64 rng(15);
  for (int i = 0; i < 20; ++i) {
    TokenBatch a{2, 6, {}}, b{2, 6, {}};
    for (int k = 0; k < 12; ++k) a.ids.push_back(3 + rng() % 60), b.ids.push_back(3 + rng() % 60);
    pairs.emplace_back(a, b);
  }
  const auto rep = triangle_noncollapse_check(m, head, pairs);
  EXPECT_EQ(rep.pairs, 20u);
  EXPECT_EQ(rep.violations, 0u);
  EXPECT_GE(rep.min_slack, -1e-9);
}

// A layer scaled by 1.1 drifts by exactly 0.1, like [3,4] -> [3.3,4.4].
TEST(Drift, UniformScalingOfALayer) {
  const auto m = Transformer<double>::init(tiny(), 16);
  ParameterMap<double> tuned = m.params();
  for (const auto& n : names::layer_params(1))
    for (auto& x : tuned.at(n).value.values()) x *= 1.1;
  EXPECT_NEAR(*layer_drift(m.config(), m.params(), tuned).layer("1").total, 0.1, 1e-14);
}

TEST(Residual, ShrinksUnderLocalTraining) {
  TrainerOptions o;
  o.method = Method::kLoPT;
  o.opt_local.kind = OptimizerKind::kSgd;
  o.opt_local.lr = 0.1;
  Trainer<double> tr(Transformer<double>::init(tiny(), 17), o, 17);
  TaskSpec t;
  const auto eb = encode_examples(generate_task_data(t, 8, 18), default_tokenizer());
  const auto input = make_sft_input(eb.tokens, next_token_supervision<double>(eb.tokens, Tokenizer::kPad, eb.prompt_lens),
                                    Tokenizer::kPad);
  const double before = recon_residual_stats(tr.model(), tr.aux_heads()[0], eb.tokens, Tokenizer::kPad).mean;
  for (int s = 0; s < 200; ++s) tr.step(input);
  const double after = recon_residual_stats(tr.model(), tr.aux_heads()[0], eb.tokens, Tokenizer::kPad).mean;
  EXPECT_LT(after, 0.9 * before);
}

// ||grad_theta1 T|| <= kappa1 * kappa2 * ||dT/dlogits|| with both kappas from power iteration.
TEST(GradientReach, EndToEndGradientIsBoundedByJacobianNorms) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_seq_len = 8;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto model = Transformer<double>::init(c, seed);
    TokenBatch tb{1, 5, {1, 10 + int(seed), 11, 12, 2}};
    const auto sup = next_token_supervision<double>(tb, Tokenizer::kPad);

    Tape<double> full;
    const auto grads = full.backward(sft_loss(model.forward(full, tb), sup));
    long double sq = 0;
    for (const auto& n : model.partition().first())
      if (const auto* g = grads.find(model.param(n)))
        for (double v : g->values()) sq += (long double)v * v;
    const double grad_norm = std::sqrt(static_cast<double>(sq));

    Tape<double> head;
    auto logits = head.variable(model.logits(tb));
    head.backward(sft_loss(logits, sup), true);
    double gy = 0;
    for (double v : head.grad(logits)->values()) gy += v * v;
    gy = std::sqrt(gy);

    PowerIterationOptions po;
    po.iters = 200;
    po.seed = seed;
    const double k1 = spectral_norm_estimate(k1_param_operator(model, tb), po);
    const double k2 = spectral_norm_estimate(k2_boundary_operator(model, model.first_half_values(tb)), po);
    EXPECT_GT(grad_norm, 0.0);
    EXPECT_LE(grad_norm, k1 * k2 * gy * 1.05) << "seed " << seed;
  }
}
