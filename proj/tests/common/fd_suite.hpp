#pragma once

// Finite-difference checks for every differentiable primitive, on random
// float64 instances. Each case projects the primitive's output to a scalar
// through fixed random weights so that every output coordinate matters.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lopt/autograd.hpp"

namespace lopt::testing {

using T = Tensor<double>;
using V = ag::Var<double>;
using Tp = ag::Tape<double>;

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}
  double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  std::size_t size(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); }
  T tensor(Shape s, double sd = 1.0) {
    T t(std::move(s));
    for (auto& x : t.values()) x = normal(sd);
    return t;
  }
  std::vector<double> weights(std::size_t n) {
    std::vector<double> w(n);
    for (auto& x : w) x = normal();
    return w;
  }
};

/// Scalar projection with weights held by the closure.
inline V project(V y, std::shared_ptr<std::vector<double>> w) { return ag::weighted_sum<double>(y, *w); }

struct FdCase {
  std::string primitive;
  ag::ScalarBuilder<double> f;
  T point;
};

struct FdResult {
  std::string primitive;
  std::size_t instances = 0;
  double worst = 0.0;
};

/// One random instance of each primitive and each differentiable argument.
inline std::vector<FdCase> make_fd_cases(Gen& g) {
  std::vector<FdCase> out;
  auto proj = [&](std::size_t n) { return std::make_shared<std::vector<double>>(g.weights(n)); };

  {  // add and mul, both arguments, with and without row broadcast
    const std::size_t r = g.size(1, 4), c = g.size(1, 5);
    const bool bcast = g.size(0, 1) == 1;
    T a = g.tensor({r, c});
    T b = bcast ? g.tensor({c}) : g.tensor({r, c});
    auto w = proj(r * c);
    out.push_back({"add", [=](Tp& t, V x) { return project(ag::add(x, t.constant(b)), w); }, a});
    out.push_back({"add", [=](Tp& t, V x) { return project(ag::add(t.constant(a), x), w); }, b});
    out.push_back({"mul", [=](Tp& t, V x) { return project(ag::mul(x, t.constant(b)), w); }, a});
    out.push_back({"mul", [=](Tp& t, V x) { return project(ag::mul(t.constant(a), x), w); }, b});
  }
  {  // matmul, shared or batched right operand, optionally transposed
    const std::size_t B = g.size(1, 3), M = g.size(1, 4), K = g.size(1, 4), N = g.size(1, 4);
    const bool batched = g.size(0, 1) == 1, tb = g.size(0, 1) == 1;
    T a = g.tensor({B, M, K});
    Shape bs = batched ? Shape{B, tb ? N : K, tb ? K : N} : Shape{tb ? N : K, tb ? K : N};
    T b = g.tensor(bs);
    auto w = proj(B * M * N);
    out.push_back({"matmul", [=](Tp& t, V x) { return project(ag::matmul(x, t.constant(b), tb), w); }, a});
    out.push_back({"matmul", [=](Tp& t, V x) { return project(ag::matmul(t.constant(a), x, tb), w); }, b});
  }
  {  // embedding table gradient
    const std::size_t Vs = g.size(2, 8), D = g.size(1, 4), n = g.size(1, 6);
    std::vector<int> ids(n);
    for (auto& id : ids) id = static_cast<int>(g.size(0, Vs - 1));
    auto w = proj(n * D);
    out.push_back({"embed_lookup",
                   [=](Tp&, V x) { return project(ag::embed_lookup<double>(x, ids, Shape{n}), w); },
                   g.tensor({Vs, D})});
  }
  {  // layernorm: input, gain and bias
    const std::size_t r = g.size(1, 4), D = g.size(3, 6);  // D = 2 normalizes every row to +-1
    T x0 = g.tensor({r, D}), gain = g.tensor({D}), bias = g.tensor({D});
    auto w = proj(r * D);
    out.push_back({"layernorm",
                   [=](Tp& t, V x) { return project(ag::layernorm(x, t.constant(gain), t.constant(bias)), w); }, x0});
    out.push_back({"layernorm",
                   [=](Tp& t, V x) { return project(ag::layernorm(t.constant(x0), x, t.constant(bias)), w); }, gain});
    out.push_back({"layernorm",
                   [=](Tp& t, V x) { return project(ag::layernorm(t.constant(x0), t.constant(gain), x), w); }, bias});
  }
  {
    const std::size_t r = g.size(1, 4), c = g.size(1, 6);
    auto w = proj(r * c);
    out.push_back({"gelu", [=](Tp&, V x) { return project(ag::gelu(x), w); }, g.tensor({r, c}, 2.0)});
    out.push_back({"softmax", [=](Tp&, V x) { return project(ag::softmax(x), w); }, g.tensor({r, c}, 2.0)});
    out.push_back({"log_softmax", [=](Tp&, V x) { return project(ag::log_softmax(x), w); }, g.tensor({r, c}, 2.0)});
    out.push_back({"scale", [=, c0 = g.normal()](Tp&, V x) { return project(ag::scale(x, c0), w); }, g.tensor({r, c})});
    out.push_back({"transpose", [=](Tp&, V x) { return project(ag::transpose(x), w); }, g.tensor({c, r})});
    out.push_back({"sum", [](Tp&, V x) { return ag::sum(x); }, g.tensor({r, c})});
    out.push_back({"weighted_sum", [=](Tp&, V x) { return project(x, w); }, g.tensor({r, c})});
  }
  {  // mse, both sides, optional row mask with at least one row kept
    const std::size_t r = g.size(1, 5), c = g.size(1, 4);
    std::vector<double> mask;
    if (g.size(0, 1) == 1) {
      mask.resize(r);
      for (auto& m : mask) m = static_cast<double>(g.size(0, 1));
      mask[g.size(0, r - 1)] = 1.0;
    }
    T a = g.tensor({r, c}), b = g.tensor({r, c});
    out.push_back({"mse", [=](Tp& t, V x) { return ag::mse<double>(x, t.constant(b), mask); }, a});
    out.push_back({"mse", [=](Tp& t, V x) { return ag::mse<double>(t.constant(a), x, mask); }, b});
  }
  {
    const std::size_t r = g.size(1, 5), c = g.size(2, 6);
    std::vector<int> idx(r);
    for (auto& i : idx) i = static_cast<int>(g.size(0, c - 1));
    auto w = proj(r);
    out.push_back({"gather", [=](Tp&, V x) { return project(ag::gather<double>(x, idx), w); }, g.tensor({r, c})});
  }
  {  // concat: differentiate one part among three
    const std::size_t r = g.size(1, 3);
    const std::size_t c0 = g.size(1, 3), c1 = g.size(1, 3), c2 = g.size(1, 3);
    T p0 = g.tensor({r, c0}), p2 = g.tensor({r, c2});
    auto w = proj(r * (c0 + c1 + c2));
    out.push_back({"concat",
                   [=](Tp& t, V x) {
                     std::vector<V> parts{t.constant(p0), x, t.constant(p2)};
                     return project(ag::concat<double>(parts), w);
                   },
                   g.tensor({r, c1})});
  }
  {
    const std::size_t B = g.size(1, 2), L = g.size(1, 5);
    auto w = proj(B * L * L);
    out.push_back({"causal_mask",
                   [=](Tp&, V x) { return project(ag::softmax(ag::causal_mask(x)), w); }, g.tensor({B, L, L})});
  }
  {
    const std::size_t r = g.size(1, 4), c = g.size(2, 7);
    const std::size_t start = g.size(0, c - 1), len = g.size(1, c - start);
    auto w = proj(r * len);
    out.push_back({"slice", [=](Tp&, V x) { return project(ag::slice(x, start, len), w); }, g.tensor({r, c})});
  }
  {
    const std::size_t B = g.size(1, 2), L = g.size(1, 5), D = 2 * g.size(1, 3);
    auto w = proj(B * L * D);
    out.push_back({"rope", [=](Tp&, V x) { return project(ag::rope(x), w); }, g.tensor({B, L, D})});
  }
  {  // clipped surrogate, ratios kept away from the clip corners
    const std::size_t n = g.size(2, 8);
    const double eps = 0.2;
    T logp({n});
    std::vector<double> old(n), adv(n), wts(n);
    for (std::size_t i = 0; i < n; ++i) {
      old[i] = -g.uniform(0.1, 3.0);
      double lr;
      do lr = g.uniform(-0.5, 0.5);
      while (std::abs(std::exp(lr) - (1 - eps)) < 1e-3 || std::abs(std::exp(lr) - (1 + eps)) < 1e-3);
      logp[i] = old[i] + lr;
      adv[i] = g.normal();
      wts[i] = g.size(0, 3) == 0 ? 0.0 : g.uniform(0.1, 1.0);
    }
    out.push_back({"clipped_surrogate",
                   [=](Tp&, V x) { return ag::clipped_surrogate<double>(x, old, adv, wts, eps); }, logp});
  }
  return out;
}

/// Runs `instances` random instances of every case and keeps the worst
/// relative error per primitive.
inline std::vector<FdResult> run_fd_suite(std::size_t instances, std::uint64_t seed, double eps = 1e-5) {
  std::vector<FdResult> results;
  Gen g(seed);
  for (std::size_t i = 0; i < instances; ++i) {
    for (auto& c : make_fd_cases(g)) {
      auto it = std::find_if(results.begin(), results.end(), [&](const FdResult& r) { return r.primitive == c.primitive; });
      if (it == results.end()) {
        results.push_back({c.primitive, 0, 0.0});
        it = results.end() - 1;
      }
      it->worst = std::max(it->worst, ag::finite_difference_check<double>(c.f, c.point, eps));
      ++it->instances;
    }
  }
  return results;
}

}  // namespace lopt::testing
