// Differentiable batch forward of the alignment heads and the hierarchical
// loss on top of it.
//
// The per-pair functions in alignment.hpp are the reference; this file
// evaluates the same quantities for a whole Bt x Bv batch with fused tape ops
// so that one training step records a few dozen nodes instead of one per
// pair. Encoder outputs (frames, patches, sentences, words) enter as
// constants; only HeadParameters are trainable.

#ifndef TCMA_OBJECTIVE_HPP
#define TCMA_OBJECTIVE_HPP

#include <limits>
#include <string_view>
#include <vector>

#include "tcma/alignment.hpp"
#include "tcma/autodiff.hpp"
#include "tcma/corpus.hpp"
#include "tcma/loss.hpp"
#include "tcma/parallel.hpp"

namespace tcma {

/// Texts and videos of one batch; for training, caption i is paired with video i.
struct Batch {
  std::vector<const VideoRecord*> videos;
  std::vector<const CaptionRecord*> captions;
};

inline Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& video_indices,
                        const std::vector<std::size_t>& caption_indices) {
  Batch b;
  for (std::size_t v : video_indices) b.videos.push_back(&corpus.videos.at(v));
  for (std::size_t c : caption_indices) b.captions.push_back(&corpus.captions.at(c));
  return b;
}

namespace ad {

inline constexpr std::size_t kNoRow = std::numeric_limits<std::size_t>::max();

/// Rows of `x` (viewed as [rows x width], width = product of trailing extents
/// after `lead` leading axes) gathered by index; kNoRow yields a zero row.
inline Var gather_rows(Graph& g, Var x, std::size_t width, std::vector<std::size_t> rows, Shape out_shape) {
  const Tensor& xv = g.value(x);
  if (width == 0 || xv.size() % width != 0) throw DimensionError("gather_rows: width does not divide tensor size");
  Tensor out(std::move(out_shape));
  if (out.size() != rows.size() * width) throw DimensionError("gather_rows: output shape does not match row count");
  const std::size_t n_rows = xv.size() / width;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] == kNoRow) continue;
    if (rows[r] >= n_rows) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return g.record(std::move(out), {x}, [x, width, rows = std::move(rows)](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_mut(x);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] == kNoRow) continue;
      for (std::size_t k = 0; k < width; ++k) gx[rows[r] * width + k] += go[r * width + k];
    }
  });
}

/// Row-wise softmax of [R x K] restricted to mask == true; masked entries are 0.
inline Var masked_softmax_rows(Graph& g, Var x, std::vector<bool> mask) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2 || mask.size() != xv.size()) throw DimensionError("masked_softmax_rows: mask size mismatch");
  const std::size_t rows = xv.extent(0), k = xv.extent(1);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c)
      if (mask[r * k + c]) mx = std::max(mx, xv.at(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (!mask[r * k + c]) continue;
      out.at(r, c) = std::exp(xv.at(r, c) - mx);
      total += out.at(r, c);
    }
    if (total > 0.0)
      for (std::size_t c = 0; c < k; ++c) out.at(r, c) /= total;
  }
  return g.record(out, {x}, [x, out, rows, k](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_mut(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double inner = 0.0;
      for (std::size_t c = 0; c < k; ++c) inner += go.at(r, c) * out.at(r, c);
      for (std::size_t c = 0; c < k; ++c) gx.at(r, c) += out.at(r, c) * (go.at(r, c) - inner);
    }
  });
}

/// softplus(x . w_tau + b_tau) + epsilon for every row of x viewed as [R x D].
inline Var temperatures(Graph& g, Var x, Var w_tau, Var b_tau) {
  const std::size_t d = g.value(w_tau).size();
  const std::size_t rows = g.value(x).size() / d;
  Var flat = reshape(g, x, {rows, d});
  Var proj = reshape(g, matmul(g, flat, reshape(g, w_tau, {d, 1})), {rows});
  return add_constant(g, softplus(g, add_scalar(g, proj, b_tau)), HeadParameters::kEpsilon);
}

/// out[i][j] = sum_t softmax_t(frames[j][t] . query[i] / tau[i]) frames[j][t].
inline Var frame_attention_pool(Graph& g, Var query, Var frames, Var tau) {
  const Tensor& q = g.value(query);
  const Tensor& f = g.value(frames);
  const Tensor& tv = g.value(tau);
  if (q.rank() != 2 || f.rank() != 3 || q.extent(1) != f.extent(2) || tv.size() != q.extent(0)) {
    throw DimensionError("frame_attention_pool: incompatible shapes " + shape_string(q.shape()) + ", " +
                         shape_string(f.shape()) + ", " + shape_string(tv.shape()));
  }
  const std::size_t bt = q.extent(0), bv = f.extent(0), t_count = f.extent(1), d = f.extent(2);
  Tensor out({bt, bv, d});
  parallel_for(bt, [&](std::size_t i) {
    std::vector<double> s(t_count);
    for (std::size_t j = 0; j < bv; ++j) {
      for (std::size_t t = 0; t < t_count; ++t) s[t] = tcma::dot(q.slice(i), f.data().subspan((j * t_count + t) * d, d));
      const auto a = tcma::softmax_temp(s, tv[i]);
      auto o = out.data().subspan((i * bv + j) * d, d);
      for (std::size_t t = 0; t < t_count; ++t) {
        auto fr = f.data().subspan((j * t_count + t) * d, d);
        for (std::size_t k = 0; k < d; ++k) o[k] += a[t] * fr[k];
      }
    }
  });
  return g.record(std::move(out), {query, frames, tau},
                  [query, frames, tau, bt, bv, t_count, d](Graph& gr, const Tensor& go) {
                    const Tensor& qv = gr.value(query);
                    const Tensor& fv = gr.value(frames);
                    const Tensor& tauv = gr.value(tau);
                    const bool need_q = gr.needs_grad(query), need_f = gr.needs_grad(frames),
                               need_t = gr.needs_grad(tau);
                    std::vector<double> s(t_count), da(t_count);
                    for (std::size_t i = 0; i < bt; ++i) {
                      const double ti = tauv[i];
                      auto qi = qv.slice(i);
                      for (std::size_t j = 0; j < bv; ++j) {
                        auto gij = go.data().subspan((i * bv + j) * d, d);
                        for (std::size_t t = 0; t < t_count; ++t) s[t] = tcma::dot(qi, fv.data().subspan((j * t_count + t) * d, d));
                        const auto a = tcma::softmax_temp(s, ti);
                        double inner = 0.0;
                        for (std::size_t t = 0; t < t_count; ++t) {
                          da[t] = tcma::dot(gij, fv.data().subspan((j * t_count + t) * d, d));
                          inner += a[t] * da[t];
                        }
                        double dtau = 0.0;
                        for (std::size_t t = 0; t < t_count; ++t) {
                          const double dz = a[t] * (da[t] - inner);
                          const double ds = dz / ti;
                          dtau -= dz * s[t] / (ti * ti);
                          auto fr = fv.data().subspan((j * t_count + t) * d, d);
                          if (need_q) {
                            auto gq = gr.grad_mut(query).slice(i);
                            for (std::size_t k = 0; k < d; ++k) gq[k] += ds * fr[k];
                          }
                          if (need_f) {
                            auto gf = gr.grad_mut(frames).data().subspan((j * t_count + t) * d, d);
                            for (std::size_t k = 0; k < d; ++k) gf[k] += a[t] * gij[k] + ds * qi[k];
                          }
                        }
                        if (need_t) gr.grad_mut(tau)[i] += dtau;
                      }
                    }
                  });
}

/// out[i][j] = a[i] . b[j] for a [Bt x D] and b [Bv x D]; or a[i] . b[i][j]
/// when b is [Bt x Bv x D].
inline Var pairwise_dot(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  const bool conditioned = bv.rank() == 3;
  const std::size_t bt = av.extent(0), d = av.extent(1);
  const std::size_t nv = bv.extent(conditioned ? 1 : 0);
  if ((conditioned && (bv.extent(0) != bt || bv.extent(2) != d)) || (!conditioned && bv.extent(1) != d)) {
    throw DimensionError("pairwise_dot: incompatible shapes " + shape_string(av.shape()) + ", " +
                         shape_string(bv.shape()));
  }
  auto brow = [conditioned, nv, d](const Tensor& t, std::size_t i, std::size_t j) {
    return t.data().subspan((conditioned ? i * nv + j : j) * d, d);
  };
  Tensor out({bt, nv});
  for (std::size_t i = 0; i < bt; ++i)
    for (std::size_t j = 0; j < nv; ++j) out.at(i, j) = tcma::dot(av.slice(i), brow(bv, i, j));
  return g.record(std::move(out), {a, b}, [a, b, bt, nv, d, conditioned, brow](Graph& gr, const Tensor& go) {
    const Tensor& av2 = gr.value(a);
    const Tensor& bv2 = gr.value(b);
    const bool need_a = gr.needs_grad(a), need_b = gr.needs_grad(b);
    for (std::size_t i = 0; i < bt; ++i)
      for (std::size_t j = 0; j < nv; ++j) {
        const double gij = go.at(i, j);
        if (need_a) {
          auto ga = gr.grad_mut(a).slice(i);
          auto br = brow(bv2, i, j);
          for (std::size_t k = 0; k < d; ++k) ga[k] += gij * br[k];
        }
        if (need_b) {
          auto& gb = gr.grad_mut(b);
          const std::size_t off = (conditioned ? i * nv + j : j) * d;
          auto ar = av2.slice(i);
          for (std::size_t k = 0; k < d; ++k) gb[off + k] += gij * ar[k];
        }
      }
  });
}

/// Fused patches G_a(concat(patch, frame)) for patches [Bv,T,M,D] and frames
/// [Bv,T,D]. Patches and frames are encoder outputs and must be constants.
inline Var fuse_patches(Graph& g, Var patches, Var frames, Var weight, Var bias) {
  if (g.needs_grad(patches) || g.needs_grad(frames)) {
    throw ContractError("fuse_patches: patch and frame features must be constants");
  }
  const Tensor& p = g.value(patches);
  const Tensor& f = g.value(frames);
  const Tensor& w = g.value(weight);
  const Tensor& bvec = g.value(bias);
  const std::size_t bv = p.extent(0), t_count = p.extent(1), m = p.extent(2), d = p.extent(3);
  if (f.shape() != Shape{bv, t_count, d} || w.shape() != Shape{d, 2 * d} || bvec.size() != d) {
    throw DimensionError("fuse_patches: incompatible shapes");
  }
  Tensor out(p.shape());
  parallel_for(bv, [&](std::size_t j) {
    for (std::size_t t = 0; t < t_count; ++t) {
      auto fr = f.data().subspan((j * t_count + t) * d, d);
      // Frame contribution is shared by all patches of the frame.
      std::vector<double> base(d);
      for (std::size_t r = 0; r < d; ++r) base[r] = tcma::dot(w.slice(r).subspan(d, d), fr) + bvec[r];
      for (std::size_t mm = 0; mm < m; ++mm) {
        const std::size_t off = ((j * t_count + t) * m + mm) * d;
        auto pr = p.data().subspan(off, d);
        for (std::size_t r = 0; r < d; ++r) out[off + r] = base[r] + tcma::dot(w.slice(r).first(d), pr);
      }
    }
  });
  return g.record(std::move(out), {patches, frames, weight, bias},
                  [patches, frames, weight, bias, bv, t_count, m, d](Graph& gr, const Tensor& go) {
                    const Tensor& pv = gr.value(patches);
                    const Tensor& fv = gr.value(frames);
                    const bool need_w = gr.needs_grad(weight), need_b = gr.needs_grad(bias);
                    std::vector<double> frame_go(d);
                    for (std::size_t j = 0; j < bv; ++j)
                      for (std::size_t t = 0; t < t_count; ++t) {
                        std::fill(frame_go.begin(), frame_go.end(), 0.0);
                        for (std::size_t mm = 0; mm < m; ++mm) {
                          const std::size_t off = ((j * t_count + t) * m + mm) * d;
                          auto pr = pv.data().subspan(off, d);
                          for (std::size_t r = 0; r < d; ++r) {
                            const double gr_r = go[off + r];
                            frame_go[r] += gr_r;
                            if (need_w && gr_r != 0.0) {
                              auto wr = gr.grad_mut(weight).slice(r);
                              for (std::size_t k = 0; k < d; ++k) wr[k] += gr_r * pr[k];
                            }
                          }
                        }
                        auto fr = fv.data().subspan((j * t_count + t) * d, d);
                        for (std::size_t r = 0; r < d; ++r) {
                          if (need_w) {
                            auto wr = gr.grad_mut(weight).slice(r);
                            for (std::size_t k = 0; k < d; ++k) wr[d + k] += frame_go[r] * fr[k];
                          }
                          if (need_b) gr.grad_mut(bias)[r] += frame_go[r];
                        }
                      }
                  });
}

/// Linear score weight . concat(x_row, context_row) + bias for every row of x.
/// x is [G, R, D] (R rows per group), context is [G, D]; output is [G, R].
/// Context is constant; x may carry gradient.
inline Var concat_scores(Graph& g, Var x, Var context, Var weight, Var bias) {
  if (g.needs_grad(context)) throw ContractError("concat_scores: context must be constant");
  const Tensor& xv = g.value(x);
  const Tensor& cv = g.value(context);
  const Tensor& wv = g.value(weight);
  const std::size_t d = cv.extent(1);
  const std::size_t groups = cv.extent(0);
  if (wv.size() != 2 * d || xv.size() % (groups * d) != 0) throw DimensionError("concat_scores: incompatible shapes");
  const std::size_t per = xv.size() / (groups * d);
  Tensor out({groups, per});
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const double ctx = tcma::dot(wv.data().subspan(d, d), cv.slice(gi)) + g.value(bias)[0];
    for (std::size_t r = 0; r < per; ++r) {
      out.at(gi, r) = tcma::dot(wv.data().first(d), xv.data().subspan((gi * per + r) * d, d)) + ctx;
    }
  }
  return g.record(std::move(out), {x, context, weight, bias},
                  [x, context, weight, bias, groups, per, d](Graph& gr, const Tensor& go) {
                    const Tensor& xv2 = gr.value(x);
                    const Tensor& cv2 = gr.value(context);
                    const Tensor& wv2 = gr.value(weight);
                    for (std::size_t gi = 0; gi < groups; ++gi) {
                      double group_total = 0.0;
                      for (std::size_t r = 0; r < per; ++r) {
                        const double gv = go.at(gi, r);
                        group_total += gv;
                        auto xr = xv2.data().subspan((gi * per + r) * d, d);
                        if (gr.needs_grad(weight)) {
                          auto gw = gr.grad_mut(weight).data();
                          for (std::size_t k = 0; k < d; ++k) gw[k] += gv * xr[k];
                        }
                        if (gr.needs_grad(x)) {
                          auto gx = gr.grad_mut(x).data().subspan((gi * per + r) * d, d);
                          for (std::size_t k = 0; k < d; ++k) gx[k] += gv * wv2[k];
                        }
                      }
                      if (gr.needs_grad(weight)) {
                        auto gw = gr.grad_mut(weight).data();
                        auto cr = cv2.slice(gi);
                        for (std::size_t k = 0; k < d; ++k) gw[d + k] += group_total * cr[k];
                      }
                      if (gr.needs_grad(bias)) gr.grad_mut(bias)[0] += group_total;
                    }
                  });
}

/// Word-guided patch pooling for every (text i, video j):
///   out[i][j] = sum_l gate[i][l] sum_n softmax_n(w[i][l] . p[j][n] / tau[i][l] + prior[j][n]) p[j][n]
/// words [Bt,K,D], tau [Bt*K], gate [Bt,K] (zero for unused word slots),
/// patches [Bv,N,D], prior [Bv,N].
inline Var patch_attention_pool(Graph& g, Var words, Var tau, Var gate, Var patches, Var prior,
                                std::vector<bool> word_mask) {
  const Tensor& wv = g.value(words);
  const Tensor& pv = g.value(patches);
  const std::size_t bt = wv.extent(0), k = wv.extent(1), d = wv.extent(2);
  const std::size_t bv = pv.extent(0), n = pv.extent(1);
  if (pv.extent(2) != d || g.value(tau).size() != bt * k || g.value(gate).size() != bt * k ||
      g.value(prior).size() != bv * n || word_mask.size() != bt * k) {
    throw DimensionError("patch_attention_pool: incompatible shapes");
  }
  Tensor out({bt, bv, d});
  {
    const Tensor& tv = g.value(tau);
    const Tensor& gv = g.value(gate);
    const Tensor& prv = g.value(prior);
    parallel_for(bt, [&](std::size_t i) {
      std::vector<double> z(n);
      for (std::size_t j = 0; j < bv; ++j) {
        auto o = out.data().subspan((i * bv + j) * d, d);
        for (std::size_t l = 0; l < k; ++l) {
          if (!word_mask[i * k + l]) continue;
          auto w = wv.data().subspan((i * k + l) * d, d);
          const double t = tv[i * k + l];
          for (std::size_t c = 0; c < n; ++c) z[c] = tcma::dot(w, pv.data().subspan((j * n + c) * d, d)) / t + prv[j * n + c];
          const auto a = tcma::softmax_temp(z, 1.0);
          const double gl = gv[i * k + l];
          for (std::size_t c = 0; c < n; ++c) {
            auto p = pv.data().subspan((j * n + c) * d, d);
            const double wgt = gl * a[c];
            for (std::size_t q = 0; q < d; ++q) o[q] += wgt * p[q];
          }
        }
      }
    });
  }
  return g.record(std::move(out), {words, tau, gate, patches, prior},
                  [words, tau, gate, patches, prior, word_mask = std::move(word_mask), bt, k, d, bv, n](
                      Graph& gr, const Tensor& go) {
                    const Tensor& wv2 = gr.value(words);
                    const Tensor& pv2 = gr.value(patches);
                    const Tensor& tv = gr.value(tau);
                    const Tensor& gv = gr.value(gate);
                    const Tensor& prv = gr.value(prior);
                    const bool need_w = gr.needs_grad(words), need_t = gr.needs_grad(tau),
                               need_g = gr.needs_grad(gate), need_p = gr.needs_grad(patches),
                               need_pr = gr.needs_grad(prior);
                    std::vector<double> z(n), s(n), da(n), r(d);
                    for (std::size_t i = 0; i < bt; ++i)
                      for (std::size_t j = 0; j < bv; ++j) {
                        auto gij = go.data().subspan((i * bv + j) * d, d);
                        for (std::size_t l = 0; l < k; ++l) {
                          if (!word_mask[i * k + l]) continue;
                          const std::size_t il = i * k + l;
                          auto w = wv2.data().subspan(il * d, d);
                          const double t = tv[il];
                          const double gl = gv[il];
                          for (std::size_t c = 0; c < n; ++c) {
                            s[c] = tcma::dot(w, pv2.data().subspan((j * n + c) * d, d));
                            z[c] = s[c] / t + prv[j * n + c];
                          }
                          const auto a = tcma::softmax_temp(z, 1.0);
                          std::fill(r.begin(), r.end(), 0.0);
                          double inner = 0.0;
                          for (std::size_t c = 0; c < n; ++c) {
                            auto p = pv2.data().subspan((j * n + c) * d, d);
                            for (std::size_t q = 0; q < d; ++q) r[q] += a[c] * p[q];
                            da[c] = gl * tcma::dot(gij, p);
                            inner += a[c] * da[c];
                          }
                          if (need_g) gr.grad_mut(gate)[il] += tcma::dot(gij, r);
                          double dtau = 0.0;
                          for (std::size_t c = 0; c < n; ++c) {
                            const double dz = a[c] * (da[c] - inner);
                            if (need_pr) gr.grad_mut(prior)[j * n + c] += dz;
                            const double ds = dz / t;
                            dtau -= dz * s[c] / (t * t);
                            auto p = pv2.data().subspan((j * n + c) * d, d);
                            if (need_w) {
                              auto gw = gr.grad_mut(words).data().subspan(il * d, d);
                              for (std::size_t q = 0; q < d; ++q) gw[q] += ds * p[q];
                            }
                            if (need_p) {
                              auto gp = gr.grad_mut(patches).data().subspan((j * n + c) * d, d);
                              for (std::size_t q = 0; q < d; ++q) gp[q] += gl * a[c] * gij[q] + ds * w[q];
                            }
                          }
                          if (need_t) gr.grad_mut(tau)[il] += dtau;
                        }
                      }
                  });
}

/// Rows x[i][i] of a [B,B,D] tensor, as [B,D].
inline Var pair_diagonal(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 3 || xv.extent(0) != xv.extent(1)) throw DimensionError("pair_diagonal: expected [B,B,D]");
  const std::size_t b = xv.extent(0), d = xv.extent(2);
  std::vector<std::size_t> rows(b);
  for (std::size_t i = 0; i < b; ++i) rows[i] = i * b + i;
  return gather_rows(g, x, d, std::move(rows), {b, d});
}

/// Trainable leaves bound to a graph, one per HeadParameters tensor.
struct HeadVars {
  Var w_tau, b_tau, word_weight, word_bias, fuse_weight, fuse_bias, patch_weight, patch_bias, logit_scale;

  static HeadVars bind(Graph& g, const HeadParameters& h) {
    return {g.parameter(h.w_tau),        g.parameter(h.b_tau),       g.parameter(h.word_weight),
            g.parameter(h.word_bias),    g.parameter(h.fuse_weight), g.parameter(h.fuse_bias),
            g.parameter(h.patch_weight), g.parameter(h.patch_bias),  g.parameter(h.logit_scale)};
  }

  /// Same order and names as HeadParameters::for_each.
  template <class F>
  void for_each(F&& f) const {
    f(std::string_view("w_tau"), w_tau);
    f(std::string_view("b_tau"), b_tau);
    f(std::string_view("g_w.weight"), word_weight);
    f(std::string_view("g_w.bias"), word_bias);
    f(std::string_view("g_a.weight"), fuse_weight);
    f(std::string_view("g_a.bias"), fuse_bias);
    f(std::string_view("g_b.weight"), patch_weight);
    f(std::string_view("g_b.bias"), patch_bias);
    f(std::string_view("logit_scale"), logit_scale);
  }
};

}  // namespace ad

/// Graph handles produced by build_objective.
struct ObjectiveNodes {
  ad::Var loss;
  ad::Var s_video, s_frame, s_patch;  // invalid handles for skipped levels
  LossBreakdown breakdown;            // zeros for skipped levels
};

/// Records the batch forward and the hierarchical loss on `g`. Caption i is
/// the positive of video i. Levels with lambda == 0 are not evaluated.
inline ObjectiveNodes build_objective(ad::Graph& g, const ad::HeadVars& hv, const HeadParameters& heads,
                                      const Batch& batch, const LossConfig& cfg) {
  using namespace ad;
  const std::size_t bv = batch.videos.size(), bt = batch.captions.size();
  if (bv == 0 || bt == 0) throw SizeError("build_objective: empty batch");
  if (bv != bt) throw DimensionError("build_objective: batch must pair each caption with one video");
  const std::size_t d = heads.dim;
  const std::size_t t_count = batch.videos[0]->frames.extent(0);
  const std::size_t m = batch.videos[0]->patches.extent(1);
  const std::size_t l_max = batch.captions[0]->words.extent(0);

  Tensor sent({bt, d}), frames({bv, t_count, d}), patches({bv, t_count, m, d}), words({bt, l_max, d});
  for (std::size_t i = 0; i < bt; ++i) {
    const auto& c = *batch.captions[i];
    std::copy(c.sentence.data().begin(), c.sentence.data().end(), sent.slice(i).begin());
    std::copy(c.words.data().begin(), c.words.data().end(), words.slice(i).begin());
  }
  for (std::size_t j = 0; j < bv; ++j) {
    const auto& v = *batch.videos[j];
    std::copy(v.frames.data().begin(), v.frames.data().end(), frames.slice(j).begin());
    std::copy(v.patches.data().begin(), v.patches.data().end(), patches.slice(j).begin());
  }
  const Var sent_v = g.constant(sent);
  const Var frames_v = g.constant(frames);
  const Var text_unit = l2_normalize_last(g, sent_v);
  const Var scale = exp(g, hv.logit_scale);

  ObjectiveNodes out;
  std::vector<Var> terms;
  std::vector<double> weights;
  auto add_level = [&](double lambda, Var sim, Var video_repr_unit, LevelLoss& record) {
    const Var c = cfg.use_logit_scale ? contrastive_bidirectional(g, sim, scale)
                                      : contrastive_bidirectional(g, sim, g.constant(Tensor::scalar(1.0)));
    const Var p = pearson_regularizer(g, video_repr_unit, text_unit, cfg);
    record.contrastive = g.value(c)[0];
    record.pearson = g.value(p)[0];
    terms.push_back(add(g, c, p));
    weights.push_back(lambda);
  };

  // Video level: text-agnostic mean over frames; constant in the heads.
  if (cfg.lambda_video > 0.0) {
    const Var pooled_unit = l2_normalize_last(g, mean_axis(g, frames_v, 1));
    out.s_video = pairwise_dot(g, text_unit, pooled_unit);
    add_level(cfg.lambda_video, out.s_video, pooled_unit, out.breakdown.video);
  }

  // Frame level: sentence-guided attention at the sentence's temperature.
  if (cfg.lambda_frame > 0.0) {
    const Var tau = temperatures(g, sent_v, hv.w_tau, hv.b_tau);
    const Var reps = l2_normalize_last(g, frame_attention_pool(g, sent_v, frames_v, tau));
    out.s_frame = pairwise_dot(g, text_unit, reps);
    add_level(cfg.lambda_frame, out.s_frame, pair_diagonal(g, reps), out.breakdown.frame);
  }

  // Patch level: selection, then word-guided attention over selected patches.
  if (cfg.lambda_patch > 0.0) {
    if (heads.k_patches > m) throw ConfigError("K_p exceeds patches per frame");
    const Var pooled = g.constant(tcma::mean_axis(frames, 1));
    const Var fused = fuse_patches(g, g.constant(patches), frames_v, hv.fuse_weight, hv.fuse_bias);
    const Var pscores = concat_scores(g, reshape(g, fused, {bv, t_count * m, d}), pooled, hv.patch_weight,
                                      hv.patch_bias);
    const std::size_t kp = heads.k_patches, n = t_count * kp;
    std::vector<std::size_t> keep;
    keep.reserve(bv * n);
    {
      const Tensor& sv = g.value(pscores);
      for (std::size_t j = 0; j < bv; ++j)
        for (std::size_t t = 0; t < t_count; ++t) {
          const auto row = sv.data().subspan((j * t_count + t) * m, m);
          for (std::size_t idx : topk_indices(row, kp)) keep.push_back((j * t_count + t) * m + idx);
        }
    }
    const Var sel_patches = gather_rows(g, fused, d, keep, {bv, n, d});
    const Var prior = gather_rows(g, pscores, 1, keep, {bv, n});

    const std::size_t kw = heads.k_words;
    const Var wscores = concat_scores(g, g.constant(words), sent_v, hv.word_weight, hv.word_bias);
    std::vector<std::size_t> word_rows(bt * kw, kNoRow);
    std::vector<bool> word_mask(bt * kw, false);
    {
      const Tensor& sv = g.value(wscores);
      for (std::size_t i = 0; i < bt; ++i) {
        const std::size_t valid = batch.captions[i]->valid_words;
        const auto chosen = topk_indices(sv.data().subspan(i * l_max, valid), std::min(kw, valid));
        for (std::size_t r = 0; r < chosen.size(); ++r) {
          word_rows[i * kw + r] = i * l_max + chosen[r];
          word_mask[i * kw + r] = true;
        }
      }
    }
    const Var sel_words = gather_rows(g, g.constant(words), d, word_rows, {bt, kw, d});
    const Var gate = masked_softmax_rows(g, gather_rows(g, wscores, 1, word_rows, {bt, kw}), word_mask);
    const Var word_tau = temperatures(g, sel_words, hv.w_tau, hv.b_tau);
    const Var reps = l2_normalize_last(
        g, patch_attention_pool(g, sel_words, word_tau, gate, sel_patches, prior, std::move(word_mask)));
    out.s_patch = pairwise_dot(g, text_unit, reps);
    add_level(cfg.lambda_patch, out.s_patch, pair_diagonal(g, reps), out.breakdown.patch);
  }

  out.loss = weighted_sum(g, terms, weights);
  out.breakdown.total = g.value(out.loss)[0];
  return out;
}

/// Loss of `heads` on `batch` without recording gradients (same graph path).
inline LossBreakdown objective_value(const HeadParameters& heads, const Batch& batch, const LossConfig& cfg) {
  ad::Graph g;
  const auto hv = ad::HeadVars::bind(g, heads);
  return build_objective(g, hv, heads, batch, cfg).breakdown;
}

/// Independent evaluation of the same objective through the per-pair
/// functions of alignment.hpp and the loop-based losses of loss.hpp.
inline LossBreakdown reference_objective(const HeadParameters& heads, const Batch& batch, const LossConfig& cfg) {
  const std::size_t b = batch.videos.size();
  if (b == 0 || b != batch.captions.size()) throw DimensionError("reference_objective: batch must be square");
  std::vector<PreparedVideo> videos;
  std::vector<PreparedText> texts;
  for (const auto* v : batch.videos) videos.push_back(prepare_video(v->frames, v->patches, heads));
  for (const auto* c : batch.captions) texts.push_back(prepare_text(c->sentence, c->words, c->valid_words, heads));
  const auto bundle = forward_batch(videos, texts, heads);
  const std::size_t d = heads.dim;
  LevelFeatures video{Tensor({b, d}), Tensor({b, d})};
  LevelFeatures frame = video, patch = video;
  for (std::size_t i = 0; i < b; ++i) {
    const auto reps = pair_representations(texts[i], videos[i], heads);
    auto put = [&](Tensor& dst, const Tensor& src) {
      const auto unit = l2_normalize(src, 0);
      std::copy(unit.data().begin(), unit.data().end(), dst.slice(i).begin());
    };
    put(video.video, reps.video);
    put(frame.video, reps.frame);
    put(patch.video, reps.patch);
    put(video.text, texts[i].sentence);
  }
  frame.text = video.text;
  patch.text = video.text;
  LossBreakdown out;
  const double scale = cfg.use_logit_scale ? heads.contrastive_scale() : 1.0;
  if (cfg.lambda_video > 0.0) out.video = level_loss(bundle.s_video, video, cfg, scale);
  if (cfg.lambda_frame > 0.0) out.frame = level_loss(bundle.s_frame, frame, cfg, scale);
  if (cfg.lambda_patch > 0.0) out.patch = level_loss(bundle.s_patch, patch, cfg, scale);
  out.total = cfg.lambda_video * out.video.total() + cfg.lambda_frame * out.frame.total() +
              cfg.lambda_patch * out.patch.total();
  return out;
}

}  // namespace tcma

#endif  // TCMA_OBJECTIVE_HPP
