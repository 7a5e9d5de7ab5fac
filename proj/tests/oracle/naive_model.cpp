// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "naive_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace vidplug::oracle {

namespace {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

struct Weights {
  std::map<std::string, Tensor> by_name;
  const Tensor& t(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("oracle: missing weight " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return by_name.count(name) != 0; }
  Vec v(const std::string& name) const { return t(name).to_vector(); }
};

// y = x·W + b for W stored (in, out) row-major.
Vec affine(const Vec& x, const Tensor& w, const Vec* b = nullptr) {
  const std::size_t in = w.size(0), out = w.size(1);
  if (x.size() != in) throw std::runtime_error("oracle: affine size mismatch");
  const auto wd = w.data();
  Vec y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b ? (*b)[o] : 0.0;
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * wd[i * out + o];
    y[o] = acc;
  }
  return y;
}

Vec layer_norm(const Vec& x, const Vec& g, const Vec& b) {
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) * inv * g[i] + b[i];
  return y;
}

Vec softmax(Vec s) {
  const double m = *std::max_element(s.begin(), s.end());
  double total = 0.0;
  for (double& v : s) total += (v = std::exp(v - m));
  for (double& v : s) v /= total;
  return s;
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

Vec relu(Vec x) {
  for (double& v : x) v = std::max(0.0, v);
  return x;
}

struct Grid {
  std::size_t t, h, w;
  std::size_t n() const { return t * h * w; }
  std::size_t row(std::size_t a, std::size_t b, std::size_t c) const { return (a * h + b) * w + c; }
};

struct Window {
  std::vector<std::size_t> rows;  // real tokens only, (t, h, w) order
};

std::vector<Window> windows_of(const Grid& g, const Extent3& want) {
  const std::size_t wt = std::min(want[0], g.t), wh = std::min(want[1], g.h), ww = std::min(want[2], g.w);
  const std::size_t nt = (g.t + wt - 1) / wt, nh = (g.h + wh - 1) / wh, nw = (g.w + ww - 1) / ww;
  std::vector<Window> out;
  for (std::size_t i = 0; i < nt; ++i)
    for (std::size_t j = 0; j < nh; ++j)
      for (std::size_t k = 0; k < nw; ++k) {
        Window win;
        for (std::size_t a = i * wt; a < std::min(g.t, (i + 1) * wt); ++a)
          for (std::size_t b = j * wh; b < std::min(g.h, (j + 1) * wh); ++b)
            for (std::size_t c = k * ww; c < std::min(g.w, (k + 1) * ww); ++c) win.rows.push_back(g.row(a, b, c));
        out.push_back(std::move(win));
      }
  return out;
}

}  // namespace

std::vector<double> naive_forward(const Model& model, const std::vector<double>& video,
                                  const std::vector<std::vector<double>>& streams) {
  Weights W;
  for (const NamedTensor& p : model.parameters()) W.by_name[p.name] = p.tensor;
  const BackboneConfig& cfg = model.backbone_config();
  const PluginConfig& pc = model.plugin_config();
  const auto [T, H, Wd, C] = cfg.input_shape;
  const auto [pt, ph, pw] = cfg.patch_size;

  Grid g{(T + pt - 1) / pt, (H + ph - 1) / ph, (Wd + pw - 1) / pw};
  Rows x(g.n());
  {
    const Vec b = W.v("patch.b"), lg = W.v("patch.ln_g"), lb = W.v("patch.ln_b");
    const bool pos = W.has("patch.pos");
    const Vec pv = pos ? W.v("patch.pos") : Vec{};
    const std::size_t d0 = b.size();
    for (std::size_t a = 0; a < g.t; ++a)
      for (std::size_t bb = 0; bb < g.h; ++bb)
        for (std::size_t c = 0; c < g.w; ++c) {
          Vec feat;
          for (std::size_t dt = 0; dt < pt; ++dt)
            for (std::size_t dy = 0; dy < ph; ++dy)
              for (std::size_t dx = 0; dx < pw; ++dx)
                for (std::size_t ch = 0; ch < C; ++ch) {
                  const std::size_t tt = a * pt + dt, yy = bb * ph + dy, xx = c * pw + dx;
                  feat.push_back(tt < T && yy < H && xx < Wd ? video[((tt * H + yy) * Wd + xx) * C + ch] : 0.0);
                }
          const std::size_t n = g.row(a, bb, c);
          x[n] = layer_norm(affine(feat, W.t("patch.w"), &b), lg, lb);
          if (pos)
            for (std::size_t k = 0; k < d0; ++k) x[n][k] += pv[n * d0 + k];
        }
  }

  // Temporal pooling of each side stream, shared by every CAA layer.
  const std::size_t tp = g.t;
  std::vector<Rows> pooled;
  const bool side = (pc.caa || pc.late_fusion) && !pc.modalities.empty();
  if (side) {
    for (std::size_t m = 0; m < pc.modalities.size(); ++m) {
      const std::size_t dm = pc.modalities[m].dim;
      const std::size_t steps = streams.at(m).size() / dm;
      const std::string pre = "pool." + pc.modalities[m].name + ".";
      const Tensor& kw = W.t(pre + "w");
      const Vec kb = W.v(pre + "b");
      const std::size_t k = kw.size(0);
      Rows out(tp, Vec(dm, 0.0));
      for (std::size_t i = 0; i < tp; ++i) {
        long start = 0;
        if (tp > 1 && steps > k) start = static_cast<long>(i * (steps - k) / (tp - 1));
        for (std::size_t o = 0; o < dm; ++o) {
          double acc = kb[o];
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t r = std::min<std::size_t>(static_cast<std::size_t>(start) + j, steps - 1);
            for (std::size_t c = 0; c < dm; ++c) acc += streams[m][r * dm + c] * kw.at({j, c, o});
          }
          out[i][o] = acc;
        }
      }
      pooled.push_back(std::move(out));
    }
  }

  for (std::size_t s = 0; s < cfg.num_stages(); ++s) {
    if (s > 0) {
      const std::string pre = "merge" + std::to_string(s) + ".";
      const Vec lg = W.v(pre + "ln_g"), lb = W.v(pre + "ln_b");
      const std::size_t cp = x[0].size();
      Grid ng{g.t, (g.h + 1) / 2, (g.w + 1) / 2};
      Rows nx(ng.n());
      for (std::size_t a = 0; a < ng.t; ++a)
        for (std::size_t i = 0; i < ng.h; ++i)
          for (std::size_t j = 0; j < ng.w; ++j) {
            Vec cat;
            const std::size_t offs[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
            for (const auto& o : offs) {
              const std::size_t yy = 2 * i + o[0], xx = 2 * j + o[1];
              if (yy < g.h && xx < g.w) cat.insert(cat.end(), x[g.row(a, yy, xx)].begin(), x[g.row(a, yy, xx)].end());
              else cat.insert(cat.end(), cp, 0.0);
            }
            nx[ng.row(a, i, j)] = affine(layer_norm(cat, lg, lb), W.t(pre + "w"));
          }
      x = std::move(nx);
      g = ng;
    }
    const std::size_t d = cfg.stage_dims[s], heads = cfg.heads_per_stage[s], dh = d / heads;
    const std::vector<Window> wins = windows_of(g, cfg.window_size);
    for (std::size_t l = 0; l < cfg.stage_depths[s]; ++l) {
      const std::string pre = "stage" + std::to_string(s) + ".layer" + std::to_string(l) + ".";
      const LayerPlan* found = nullptr;
      for (const LayerPlan& lp : model.plan().layers)
        if (lp.stage == s && lp.layer == l) found = &lp;
      if (found == nullptr) throw std::runtime_error("oracle: layer missing from plan");
      const LayerPlan& plan = *found;
      const std::size_t N = g.n();

      // Attention.
      const Vec bq = W.v(pre + "bq"), bk = W.v(pre + "bk"), bv = W.v(pre + "bv"), bo = W.v(pre + "bo");
      Rows xn(N), q(N), k(N), v(N);
      for (std::size_t n = 0; n < N; ++n) {
        xn[n] = layer_norm(x[n], W.v(pre + "ln1_g"), W.v(pre + "ln1_b"));
        q[n] = affine(xn[n], W.t(pre + "wq"), &bq);
        k[n] = affine(xn[n], W.t(pre + "wk"), &bk);
        v[n] = affine(xn[n], W.t(pre + "wv"), &bv);
      }
      Rows pk, pvv;
      Vec gate;
      if (plan.prefix_length) {
        const Vec bd = W.v(pre + "prefix.b_down"), bu = W.v(pre + "prefix.b_up");
        const Tensor& e = W.t(pre + "prefix.embedding");
        const std::size_t L = e.size(0), dp = e.size(1);
        const Vec ev = e.to_vector();
        for (std::size_t i = 0; i < L; ++i) {
          Vec row(ev.begin() + static_cast<long>(i * dp), ev.begin() + static_cast<long>((i + 1) * dp));
          Vec hid = affine(row, W.t(pre + "prefix.w_down"), &bd);
          for (double& z : hid) z = pc.prefix_tanh ? std::tanh(z) : std::max(0.0, z);
          const Vec c = affine(hid, W.t(pre + "prefix.w_up"), &bu);
          pk.push_back(affine(c, W.t(pre + "wk")));
          pvv.push_back(affine(c, W.t(pre + "wv")));
        }
        gate = W.v(pre + "prefix.gate");
      }
      Rows attn_out(N);
      for (const Window& win : wins) {
        for (std::size_t qi : win.rows) {
          Vec hcat(d, 0.0);
          for (std::size_t hh = 0; hh < heads; ++hh) {
            Vec sc;
            for (std::size_t kj : win.rows)
              sc.push_back(dot(&q[qi][hh * dh], &k[kj][hh * dh], dh) / std::sqrt(static_cast<double>(dh)));
            const Vec a = softmax(sc);
            Vec hv(dh, 0.0);
            for (std::size_t j = 0; j < win.rows.size(); ++j)
              for (std::size_t c = 0; c < dh; ++c) hv[c] += a[j] * v[win.rows[j]][hh * dh + c];
            if (plan.prefix_length) {
              Vec ps;
              for (const Vec& row : pk) ps.push_back(dot(&q[qi][hh * dh], &row[hh * dh], dh));
              const Vec pa = softmax(ps);
              const double lam = std::clamp(gate[hh], 0.0, 1.0);
              for (std::size_t c = 0; c < dh; ++c) {
                double delta = 0.0;
                for (std::size_t j = 0; j < pvv.size(); ++j) delta += pa[j] * pvv[j][hh * dh + c];
                hv[c] = (1.0 - lam) * hv[c] + lam * delta;
              }
            }
            for (std::size_t c = 0; c < dh; ++c) hcat[hh * dh + c] = hv[c];
          }
          attn_out[qi] = affine(hcat, W.t(pre + "wo"), &bo);
        }
      }
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < d; ++c) x[n][c] += attn_out[n][c];

      // MLP with the parallel branches.
      const Vec b1 = W.v(pre + "b1"), b2 = W.v(pre + "b2");
      Rows yn(N), branch(N, Vec(d, 0.0));
      for (std::size_t n = 0; n < N; ++n) yn[n] = layer_norm(x[n], W.v(pre + "ln2_g"), W.v(pre + "ln2_b"));
      Rows bott(N);
      if (plan.groups_mlp) {
        const std::size_t m = plan.groups_mlp, per = wins.size() / m;
        const double scale = W.has(pre + "mhva.scale") ? W.v(pre + "mhva.scale")[0] : pc.fixed_scale;
        for (std::size_t wi = 0; wi < wins.size(); ++wi) {
          const std::size_t grp = std::min(wi / per, m - 1);
          for (std::size_t n : wins[wi].rows) {
            bott[n] = relu(affine(yn[n], W.t(pre + "mhva.w_down" + std::to_string(grp))));
            const Vec up = affine(bott[n], W.t(pre + "mhva.w_up" + std::to_string(grp)));
            for (std::size_t c = 0; c < d; ++c) branch[n][c] += scale * up[c];
          }
        }
      }
      if (plan.caa) {
        const std::size_t r = plan.r;
        Rows valign(tp, Vec(r, 0.0));
        const std::size_t per_t = g.h * g.w;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < r; ++c) valign[n / per_t][c] += bott[n][c] / static_cast<double>(per_t);
        std::vector<Rows> ctx;
        for (std::size_t m = 0; m < pooled.size(); ++m) {
          const std::string cp = pre + "caa" + std::to_string(m) + ".";
          const Vec bkey = W.v(cp + "b_key");
          Rows keys;
          for (const Vec& row : pooled[m]) keys.push_back(affine(row, W.t(cp + "w_key"), &bkey));
          Rows cm(N);
          for (std::size_t n = 0; n < N; ++n) {
            Vec sc;
            for (const Vec& key : keys) sc.push_back(dot(bott[n].data(), key.data(), r) / std::sqrt(static_cast<double>(r)));
            const Vec a = softmax(sc);
            cm[n].assign(r, 0.0);
            for (std::size_t t = 0; t < tp; ++t)
              for (std::size_t c = 0; c < r; ++c) cm[n][c] += a[t] * valign[t][c];
          }
          if (!pc.fusion) {
            const double sc = W.v(cp + "scale")[0];
            for (std::size_t n = 0; n < N; ++n) {
              const Vec up = affine(cm[n], W.t(cp + "w_up"));
              for (std::size_t c = 0; c < d; ++c) branch[n][c] += sc * up[c];
            }
          }
          ctx.push_back(std::move(cm));
        }
        if (pc.fusion) {
          for (std::size_t n = 0; n < N; ++n) {
            const Vec qp = affine(bott[n], W.t(pre + "fusion.w_q"));
            Vec sc;
            for (const Rows& cm : ctx) {
              const Vec kp = affine(cm[n], W.t(pre + "fusion.w_k"));
              double s2 = dot(qp.data(), kp.data(), qp.size());
              if (pc.fusion_scaled) s2 /= std::sqrt(static_cast<double>(qp.size()));
              sc.push_back(s2);
            }
            const Vec a = softmax(sc);
            for (std::size_t m = 0; m < ctx.size(); ++m) {
              const Vec vp = affine(ctx[m][n], W.t(pre + "fusion.w_v"));
              for (std::size_t c = 0; c < d; ++c) branch[n][c] += a[m] * vp[c];
            }
          }
        }
      }
      for (std::size_t n = 0; n < N; ++n) {
        Vec hid = affine(yn[n], W.t(pre + "w1"), &b1);
        for (double& z : hid) z = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
        const Vec out = affine(hid, W.t(pre + "w2"), &b2);
        for (std::size_t c = 0; c < d; ++c) x[n][c] += out[c] + branch[n][c];
      }
    }
  }

  const Vec ng = W.v("norm.g"), nb = W.v("norm.b");
  Vec pooled_feat(x[0].size(), 0.0);
  for (const Vec& row : x) {
    const Vec y = layer_norm(row, ng, nb);
    for (std::size_t c = 0; c < y.size(); ++c) pooled_feat[c] += y[c] / static_cast<double>(x.size());
  }
  const Vec hb = W.v("head.b");
  return affine(pooled_feat, W.t("head.w"), &hb);
}

}  // namespace vidplug::oracle
