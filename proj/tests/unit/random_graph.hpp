#pragma once

// Random computation graphs over the tape's primitive set, used by the
// gradient property tests and the acceptance suite. A program is generated
// once from a seed and then interpreted on any tape, so the same function
// can be evaluated at perturbed points by the finite-difference checker.

#include "gssm/autodiff.hpp"
#include "gssm/grad_check.hpp"
#include "gssm/rng.hpp"

#include <cmath>
#include <memory>
#include <vector>

namespace gssm::testing {

struct RandomGraph {
  struct Step {
    int op = 0;
    std::size_t a = 0;
    std::size_t b = 0;
    Matrix constant;
    std::size_t lo = 0, hi = 0;
  };

  Matrix point;
  std::vector<Step> steps;
  Matrix readout;  // weights applied to the final node before summing
  // Smallest |input| seen by a relu during the last evaluation.
  std::shared_ptr<double> closest_kink = std::make_shared<double>(1e300);

  [[nodiscard]] ad::ScalarFn fn() const;
};

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

// Ops: 0 add-const, 1 sub-pool, 2 mul-const, 3 matmul-const, 4 exp(tanh), 5 log(softplus+0.5),
// 6 tanh, 7 relu, 8 softplus, 9 sum*const-broadcast, 10 mean (row broadcast),
// 11 softmax_rows, 12 concat+slice, 13 square, 14 sqrt(square+0.5), 15 scalar scale
inline RandomGraph make_random_graph(std::uint64_t seed) {
  Rng rng(seed);
  RandomGraph g;
  const std::size_t r = 1 + rng.index(4), c = 1 + rng.index(4);
  g.point = random_matrix(rng, r, c);
  std::vector<ad::Shape> shapes{{r, c}};
  const std::size_t n_steps = 4 + rng.index(6);
  for (std::size_t s = 0; s < n_steps; ++s) {
    RandomGraph::Step st;
    st.op = static_cast<int>(rng.index(16));
    st.a = rng.index(shapes.size());
    const ad::Shape sa = shapes[st.a];
    ad::Shape out = sa;
    switch (st.op) {
      case 0:
      case 2: st.constant = random_matrix(rng, sa.rows, sa.cols); break;
      case 1: {
        // pick any same-shaped pool member (possibly itself)
        std::vector<std::size_t> same;
        for (std::size_t i = 0; i < shapes.size(); ++i)
          if (shapes[i] == sa) same.push_back(i);
        st.b = same[rng.index(same.size())];
        break;
      }
      case 3: {
        const std::size_t k = 1 + rng.index(4);
        st.constant = random_matrix(rng, sa.cols, k, 0.8);
        out = {sa.rows, k};
        break;
      }
      case 9: st.constant = random_matrix(rng, 1, 1); break;
      case 12: {
        st.b = rng.index(shapes.size());
        const std::size_t total = sa.cols + (shapes[st.b].rows == sa.rows ? shapes[st.b].cols : 0);
        st.lo = rng.index(total);
        st.hi = st.lo + 1 + rng.index(total - st.lo);
        out = {sa.rows, st.hi - st.lo};
        break;
      }
      case 15: st.constant = random_matrix(rng, 1, 1, 2.0); break;
      default: break;
    }
    g.steps.push_back(std::move(st));
    shapes.push_back(out);
  }
  g.readout = random_matrix(rng, shapes.back().rows, shapes.back().cols);
  return g;
}

inline ad::ScalarFn RandomGraph::fn() const {
  return [this](ad::Tape& t, ad::Var x) {
    std::vector<ad::Var> pool{x};
    *closest_kink = 1e300;
    for (const Step& st : steps) {
      ad::Var a = pool[st.a];
      ad::Var v;
      switch (st.op) {
        case 0: v = a + t.constant(st.constant); break;
        case 1: v = a - pool[st.b]; break;
        case 2: v = a * t.constant(st.constant); break;
        case 3: v = ad::matmul(a, t.constant(st.constant)); break;
        case 4: v = ad::exp(ad::tanh(a)); break;
        case 5: v = ad::log(ad::softplus(a) + 0.5); break;
        case 6: v = ad::tanh(a); break;
        case 7:
          *closest_kink = std::min(*closest_kink, a.value().cwiseAbs().minCoeff());
          v = ad::relu(a);
          break;
        case 8: v = ad::softplus(a); break;
        case 9: v = a + ad::sum(a) * t.constant(st.constant); break;
        case 10: v = a - ad::mean_over_rows(a) + ad::mean(a); break;
        case 11: v = ad::softmax_rows(a); break;
        case 12: {
          ad::Var b = pool[st.b];
          ad::Var cat = b.rows() == a.rows() ? ad::concat_cols({a, b}) : a;
          v = ad::slice_cols(cat, st.lo, st.hi);
          break;
        }
        case 13: v = ad::square(a); break;
        case 14: v = ad::sqrt(ad::square(a) + 0.5); break;
        case 15: v = ad::scale(a, st.constant(0, 0)); break;
        default: v = a; break;
      }
      pool.push_back(v);
    }
    return ad::sum(pool.back() * t.constant(readout));
  };
}

}  // namespace gssm::testing
