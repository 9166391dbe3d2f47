// Helpers shared by the unit tests and the acceptance runner.

#ifndef TCMA_TEST_SUPPORT_HPP
#define TCMA_TEST_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "tcma/tcma.hpp"

namespace tcma::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

/// ||a - b|| / max(||a||, ||b||, floor). The floor keeps structurally zero
/// gradients (shared biases that cancel in a softmax) from turning
/// finite-difference round-off into a relative error of 1.
inline constexpr double kGradientNormFloor = 1e-3;

inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-300) {
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    da += a[i] * a[i];
    db += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(da), std::sqrt(db), floor});
  return std::sqrt(num) / denom;
}

/// Heads with every tensor perturbed away from its initial value, so that
/// every gradient path is active and top-K scores are well separated.
inline HeadParameters random_heads(Rng& rng, std::size_t dim, std::size_t kw, std::size_t kp, double scale = 0.5) {
  auto h = HeadParameters::initial(dim, kw, kp);
  h.for_each([&](std::string_view name, Tensor& t) {
    if (name == "logit_scale") {
      t[0] = rng.uniform(1.0, 3.0);
      return;
    }
    for (double& v : t.data()) v += scale * rng.normal();
  });
  return h;
}

/// Small planted corpus with the extents used by the gradient checks.
inline Corpus tiny_corpus(std::uint64_t seed, std::size_t videos, std::size_t dim = 8, std::size_t frames = 4,
                          std::size_t patches = 6, std::size_t words = 6, double noise = 0.5) {
  SyntheticOptions opt;
  opt.seed = seed;
  opt.videos = videos;
  opt.captions_per_video = 1;
  opt.dims = {dim, frames, patches, words};
  opt.noise = noise;
  return generate_synthetic_corpus(opt);
}

inline Batch diagonal_batch(const Corpus& corpus) {
  std::vector<std::size_t> v(corpus.videos.size()), c(corpus.videos.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = c[i] = i;
  return make_batch(corpus, v, c);
}

/// Worst per-tensor relative error between the taped gradient of the
/// objective and central differences of objective_value.
struct GradientCheck {
  double worst = 0.0;
  std::string worst_name;
};

inline GradientCheck gradient_check(const HeadParameters& heads, const Batch& batch, const LossConfig& cfg,
                                    double h = 1e-5) {
  ad::Graph g;
  const auto hv = ad::HeadVars::bind(g, heads);
  const auto nodes = build_objective(g, hv, heads, batch, cfg);
  g.backward(nodes.loss);
  GradientCheck out;
  std::vector<Tensor> analytic;
  hv.for_each([&](std::string_view, ad::Var v) { analytic.push_back(g.grad(v)); });
  std::size_t slot = 0;
  heads.for_each([&](std::string_view name, const Tensor& t) {
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& x) {
          HeadParameters probe = heads;
          probe.for_each([&](std::string_view n2, Tensor& dst) {
            if (n2 == name) dst = x;
          });
          return objective_value(probe, batch, cfg).total;
        },
        t, h);
    const double err = relative_error(analytic[slot++], numeric, kGradientNormFloor);
    if (err > out.worst || out.worst_name.empty()) {
      out.worst = std::max(out.worst, err);
      out.worst_name = std::string(name);
    }
  });
  return out;
}

/// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("tcma_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace tcma::testing

#endif  // TCMA_TEST_SUPPORT_HPP
