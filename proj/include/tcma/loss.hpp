// Hierarchical training objective: bidirectional InfoNCE on each similarity
// matrix plus a channel-wise Pearson regularizer, combined across the video,
// frame and patch levels with weights lambda.

#ifndef TCMA_LOSS_HPP
#define TCMA_LOSS_HPP

#include <cmath>
#include <string>
#include <vector>

#include "tcma/alignment.hpp"
#include "tcma/autodiff.hpp"
#include "tcma/error.hpp"
#include "tcma/tensor.hpp"

namespace tcma {

struct LossConfig {
  double alpha = 0.05;   // cross-channel decorrelation weight
  double beta = 0.001;   // same-channel correlation weight
  double lambda_video = 5.0;
  double lambda_frame = 5.0;
  double lambda_patch = 1.0;
  bool use_logit_scale = true;

  void validate() const {
    for (double w : {alpha, beta, lambda_video, lambda_frame, lambda_patch}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
    }
    if (lambda_video == 0.0 && lambda_frame == 0.0 && lambda_patch == 0.0) {
      throw ConfigError("at least one level weight lambda must be positive");
    }
  }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

inline constexpr double kDegenerateVariance = 1e-24;

namespace detail {

inline double log_sum_exp(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double acc = 0.0;
  for (double v : z) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

}  // namespace detail

/// Mean cross-entropy of the diagonal over rows plus the same over columns,
/// with logits scale * sim.
inline double contrastive_bidirectional(const Tensor& sim, double scale) {
  if (sim.rank() != 2 || sim.extent(0) != sim.extent(1)) {
    throw DimensionError("contrastive_bidirectional: expected a square matrix, got " + shape_string(sim.shape()));
  }
  if (!(scale > 0.0)) throw DomainError("contrastive_bidirectional: scale must be positive");
  const std::size_t b = sim.extent(0);
  std::vector<double> z(b);
  double rows = 0.0, cols = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) z[j] = scale * sim.at(i, j);
    rows += detail::log_sum_exp(z) - scale * sim.at(i, i);
    for (std::size_t j = 0; j < b; ++j) z[j] = scale * sim.at(j, i);
    cols += detail::log_sum_exp(z) - scale * sim.at(i, i);
  }
  return (rows + cols) / static_cast<double>(b);
}

/// Centered cosine of x and y. Zero when either input has variance below 1e-24.
inline double pearson_coefficient(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("pearson_coefficient: length mismatch");
  if (x.size() < 2) throw SizeError("pearson_coefficient: needs at least two samples");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx / n < kDegenerateVariance || syy / n < kDegenerateVariance) return 0.0;
  return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

inline std::vector<double> column(const Tensor& m, std::size_t c) {
  std::vector<double> out(m.extent(0));
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = m.at(r, c);
  return out;
}

/// beta * sum_d (1 - rho(v_d, t_d))^2 + alpha * sum_{d1 != d2} rho(v_d1, t_d2)^2
/// over the columns (channels) of two B x D batch matrices.
inline double pearson_regularizer(const Tensor& v, const Tensor& t, const LossConfig& cfg) {
  if (v.rank() != 2 || v.shape() != t.shape()) {
    throw DimensionError("pearson_regularizer: shape mismatch " + shape_string(v.shape()) + " vs " +
                         shape_string(t.shape()));
  }
  if (v.extent(0) < 2) throw SizeError("pearson_regularizer: needs a batch of at least two");
  const std::size_t d = v.extent(1);
  std::vector<std::vector<double>> vc(d), tc(d);
  for (std::size_t c = 0; c < d; ++c) {
    vc[c] = column(v, c);
    tc[c] = column(t, c);
  }
  double same = 0.0, cross = 0.0;
  for (std::size_t d1 = 0; d1 < d; ++d1) {
    for (std::size_t d2 = 0; d2 < d; ++d2) {
      const double rho = pearson_coefficient(vc[d1], tc[d2]);
      if (d1 == d2) {
        same += (1.0 - rho) * (1.0 - rho);
      } else {
        cross += rho * rho;
      }
    }
  }
  return cfg.beta * same + cfg.alpha * cross;
}

struct LevelLoss {
  double contrastive = 0.0;
  double pearson = 0.0;
  double total() const { return contrastive + pearson; }
};

struct LossBreakdown {
  LevelLoss video, frame, patch;
  double total = 0.0;
};

/// Paired (video representation, text representation) batch matrices, B x D.
struct LevelFeatures {
  Tensor video;
  Tensor text;
};

inline LevelLoss level_loss(const Tensor& sim, const LevelFeatures& feats, const LossConfig& cfg, double scale) {
  return {contrastive_bidirectional(sim, cfg.use_logit_scale ? scale : 1.0),
          pearson_regularizer(feats.video, feats.text, cfg)};
}

/// lambda_video L_video + lambda_frame L_frame + lambda_patch L_patch, where
/// each L is InfoNCE in both directions plus the Pearson term.
inline LossBreakdown hierarchical_loss(const SimilarityBundle& bundle, const LevelFeatures& video,
                                       const LevelFeatures& frame, const LevelFeatures& patch, const LossConfig& cfg,
                                       double scale) {
  LossBreakdown out;
  out.video = level_loss(bundle.s_video, video, cfg, scale);
  out.frame = level_loss(bundle.s_frame, frame, cfg, scale);
  out.patch = level_loss(bundle.s_patch, patch, cfg, scale);
  out.total = cfg.lambda_video * out.video.total() + cfg.lambda_frame * out.frame.total() +
              cfg.lambda_patch * out.patch.total();
  return out;
}

namespace ad {

/// Differentiable contrastive_bidirectional; `scale` is a one-element node.
inline Var contrastive_bidirectional(Graph& g, Var sim, Var scale) {
  const Tensor& s = g.value(sim);
  const double c = g.value(scale)[0];
  const double value = tcma::contrastive_bidirectional(s, c);
  return g.record(Tensor::scalar(value), {sim, scale}, [sim, scale, c](Graph& gr, const Tensor& go) {
    const Tensor& sv = gr.value(sim);
    const std::size_t b = sv.extent(0);
    const double inv_b = 1.0 / static_cast<double>(b);
    Tensor dz({b, b});
    std::vector<double> z(b);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) z[j] = c * sv.at(i, j);
      const auto p = tcma::softmax_temp(z, 1.0);
      for (std::size_t j = 0; j < b; ++j) dz.at(i, j) += p[j] * inv_b;
      for (std::size_t j = 0; j < b; ++j) z[j] = c * sv.at(j, i);
      const auto q = tcma::softmax_temp(z, 1.0);
      for (std::size_t j = 0; j < b; ++j) dz.at(j, i) += q[j] * inv_b;
      dz.at(i, i) -= 2.0 * inv_b;
    }
    double dscale = 0.0;
    for (std::size_t k = 0; k < dz.size(); ++k) {
      dscale += dz[k] * sv[k];
      if (gr.needs_grad(sim)) gr.grad_mut(sim)[k] += go[0] * c * dz[k];
    }
    if (gr.needs_grad(scale)) gr.grad_mut(scale)[0] += go[0] * dscale;
  });
}

/// Differentiable pearson_regularizer, evaluated through the D x D matrix of
/// channel correlations.
inline Var pearson_regularizer(Graph& g, Var v, Var t, const LossConfig& cfg) {
  const Tensor& vv = g.value(v);
  const Tensor& tv = g.value(t);
  if (vv.rank() != 2 || vv.shape() != tv.shape()) {
    throw DimensionError("pearson_regularizer: shape mismatch " + shape_string(vv.shape()) + " vs " +
                         shape_string(tv.shape()));
  }
  const std::size_t b = vv.extent(0), d = vv.extent(1);
  if (b < 2) throw SizeError("pearson_regularizer: needs a batch of at least two");

  // Unit-norm centered columns (zero for degenerate channels) and their norms.
  auto standardize = [b, d](const Tensor& m, Tensor& hat, std::vector<double>& norms) {
    hat = Tensor({b, d});
    norms.assign(d, 0.0);
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < b; ++r) mean += m.at(r, c);
      mean /= static_cast<double>(b);
      double sq = 0.0;
      for (std::size_t r = 0; r < b; ++r) {
        hat.at(r, c) = m.at(r, c) - mean;
        sq += hat.at(r, c) * hat.at(r, c);
      }
      if (sq / static_cast<double>(b) < kDegenerateVariance) {
        for (std::size_t r = 0; r < b; ++r) hat.at(r, c) = 0.0;
        continue;
      }
      norms[c] = std::sqrt(sq);
      for (std::size_t r = 0; r < b; ++r) hat.at(r, c) /= norms[c];
    }
  };
  Tensor vhat, that;
  std::vector<double> vnorm, tnorm;
  standardize(vv, vhat, vnorm);
  standardize(tv, that, tnorm);

  Tensor rho({d, d});
  for (std::size_t d1 = 0; d1 < d; ++d1)
    for (std::size_t d2 = 0; d2 < d; ++d2) {
      double acc = 0.0;
      for (std::size_t r = 0; r < b; ++r) acc += vhat.at(r, d1) * that.at(r, d2);
      rho.at(d1, d2) = acc;
    }
  double same = 0.0, cross = 0.0;
  Tensor drho({d, d});
  for (std::size_t d1 = 0; d1 < d; ++d1)
    for (std::size_t d2 = 0; d2 < d; ++d2) {
      const double r = rho.at(d1, d2);
      if (d1 == d2) {
        same += (1.0 - r) * (1.0 - r);
        drho.at(d1, d2) = -2.0 * cfg.beta * (1.0 - r);
      } else {
        cross += r * r;
        drho.at(d1, d2) = 2.0 * cfg.alpha * r;
      }
    }
  const double value = cfg.beta * same + cfg.alpha * cross;

  return g.record(Tensor::scalar(value), {v, t},
                  [v, t, vhat, that, vnorm, tnorm, drho, b, d](Graph& gr, const Tensor& go) {
                    // d(hat) for each side, then back through normalization and centering.
                    auto back = [&](Var target, const Tensor& own_hat, const Tensor& other_hat,
                                    const std::vector<double>& norms, bool own_is_row) {
                      if (!gr.needs_grad(target)) return;
                      auto& gt = gr.grad_mut(target);
                      std::vector<double> dh(b);
                      for (std::size_t c = 0; c < d; ++c) {
                        if (norms[c] == 0.0) continue;
                        for (std::size_t r = 0; r < b; ++r) {
                          double acc = 0.0;
                          for (std::size_t o = 0; o < d; ++o) {
                            const double w = own_is_row ? drho.at(c, o) : drho.at(o, c);
                            acc += w * other_hat.at(r, o);
                          }
                          dh[r] = acc * go[0];
                        }
                        double proj = 0.0;
                        for (std::size_t r = 0; r < b; ++r) proj += dh[r] * own_hat.at(r, c);
                        double mean = 0.0;
                        for (std::size_t r = 0; r < b; ++r) {
                          dh[r] = (dh[r] - proj * own_hat.at(r, c)) / norms[c];
                          mean += dh[r];
                        }
                        mean /= static_cast<double>(b);
                        for (std::size_t r = 0; r < b; ++r) gt.at(r, c) += dh[r] - mean;
                      }
                    };
                    back(v, vhat, that, vnorm, true);
                    back(t, that, vhat, tnorm, false);
                  });
}

}  // namespace ad

}  // namespace tcma

#endif  // TCMA_LOSS_HPP
