#pragma once

#include "tstereo/autograd.hpp"

namespace tstereo {

// All spatial ops use reflect padding unless noted; feature maps are (C,H,W)
// and cost volumes (C,D,H,W), flat row-major.

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// im2col for one channel group: out (Cg*kh*kw, Ho*Wo), reflect padded.
template <typename S>
void im2col2d(const S* x, Index c0, Index cg, Index h, Index w, Index kh, Index kw, Index stride,
              Index ho, Index wo, RowMat<S>& col) {
  const Index ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  col.resize(cg * kh * kw, ho * wo);
  for (Index c = 0; c < cg; ++c)
    for (Index ki = 0; ki < kh; ++ki)
      for (Index kj = 0; kj < kw; ++kj) {
        const Index row = (c * kh + ki) * kw + kj;
        const S* xc = x + (c0 + c) * h * w;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index sy = reflectIndex(oy * stride + ki - ph, h);
          for (Index ox = 0; ox < wo; ++ox) {
            const Index sx = reflectIndex(ox * stride + kj - pw, w);
            col(row, oy * wo + ox) = xc[sy * w + sx];
          }
        }
      }
}

/// Scatter-add transpose of im2col2d.
template <typename S>
void col2im2d(const RowMat<S>& col, S* gx, Index c0, Index cg, Index h, Index w, Index kh, Index kw,
              Index stride, Index ho, Index wo) {
  const Index ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  for (Index c = 0; c < cg; ++c)
    for (Index ki = 0; ki < kh; ++ki)
      for (Index kj = 0; kj < kw; ++kj) {
        const Index row = (c * kh + ki) * kw + kj;
        S* gc = gx + (c0 + c) * h * w;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index sy = reflectIndex(oy * stride + ki - ph, h);
          for (Index ox = 0; ox < wo; ++ox) {
            const Index sx = reflectIndex(ox * stride + kj - pw, w);
            gc[sy * w + sx] += col(row, oy * wo + ox);
          }
        }
      }
}

template <typename S>
void im2col3d(const S* x, Index c0, Index cg, Index d, Index h, Index w, Index k, Index stride,
              Index do_, Index ho, Index wo, RowMat<S>& col) {
  const Index p = (k - 1) / 2;
  col.resize(cg * k * k * k, do_ * ho * wo);
  for (Index c = 0; c < cg; ++c)
    for (Index kd = 0; kd < k; ++kd)
      for (Index ki = 0; ki < k; ++ki)
        for (Index kj = 0; kj < k; ++kj) {
          const Index row = ((c * k + kd) * k + ki) * k + kj;
          const S* xc = x + (c0 + c) * d * h * w;
          for (Index od = 0; od < do_; ++od) {
            const Index sd = reflectIndex(od * stride + kd - p, d);
            for (Index oy = 0; oy < ho; ++oy) {
              const Index sy = reflectIndex(oy * stride + ki - p, h);
              for (Index ox = 0; ox < wo; ++ox) {
                const Index sx = reflectIndex(ox * stride + kj - p, w);
                col(row, (od * ho + oy) * wo + ox) = xc[(sd * h + sy) * w + sx];
              }
            }
          }
        }
}

template <typename S>
void col2im3d(const RowMat<S>& col, S* gx, Index c0, Index cg, Index d, Index h, Index w, Index k,
              Index stride, Index do_, Index ho, Index wo) {
  const Index p = (k - 1) / 2;
  for (Index c = 0; c < cg; ++c)
    for (Index kd = 0; kd < k; ++kd)
      for (Index ki = 0; ki < k; ++ki)
        for (Index kj = 0; kj < k; ++kj) {
          const Index row = ((c * k + kd) * k + ki) * k + kj;
          S* gc = gx + (c0 + c) * d * h * w;
          for (Index od = 0; od < do_; ++od) {
            const Index sd = reflectIndex(od * stride + kd - p, d);
            for (Index oy = 0; oy < ho; ++oy) {
              const Index sy = reflectIndex(oy * stride + ki - p, h);
              for (Index ox = 0; ox < wo; ++ox) {
                const Index sx = reflectIndex(ox * stride + kj - p, w);
                gc[(sd * h + sy) * w + sx] += col(row, (od * ho + oy) * wo + ox);
              }
            }
          }
        }
}

inline Index convOut(Index n, Index k, Index stride) { return (n + (k - 1) / 2 * 2 - k) / stride + 1; }

}  // namespace detail

/// 2-D convolution, reflect padding. x (Ci,H,W), w (Co, Ci/groups, kh, kw), b (Co).
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, Index stride = 1,
              Index groups = 1) {
  using Mat = detail::RowMat<S>;
  const Index ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index co = w.dim(0), cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (cig * groups != ci || co % groups != 0)
    throw std::invalid_argument("conv2d: channel/group mismatch");
  const Index ho = detail::convOut(h, kh, stride), wo = detail::convOut(wd, kw, stride);
  const Index cog = co / groups, kk = cig * kh * kw;

  Tensor<S> out({co, ho, wo});
  Mat col;
  for (Index g = 0; g < groups; ++g) {
    detail::im2col2d(x.value().ptr(), g * cig, cig, h, wd, kh, kw, stride, ho, wo, col);
    Eigen::Map<const Mat> wm(w.value().ptr() + g * cog * kk, cog, kk);
    Eigen::Map<Mat> om(out.ptr() + g * cog * ho * wo, cog, ho * wo);
    om.noalias() = wm * col;
  }
  for (Index c = 0; c < co; ++c)
    for (Index i = 0; i < ho * wo; ++i) out[c * ho * wo + i] += b.value()[c];

  auto bp = [=](Node<S>& n) {
    Mat col, gcol;
    for (Index g = 0; g < groups; ++g) {
      Eigen::Map<const Mat> gm(n.grad.ptr() + g * cog * ho * wo, cog, ho * wo);
      if (n.inputs[1]->needs_grad || n.inputs[0]->needs_grad)
        detail::im2col2d(n.inputs[0]->value.ptr(), g * cig, cig, h, wd, kh, kw, stride, ho, wo, col);
      if (n.inputs[1]->needs_grad) {
        Eigen::Map<Mat> gw(n.inputs[1]->ensureGrad().ptr() + g * cog * kk, cog, kk);
        gw.noalias() += gm * col.transpose();
      }
      if (n.inputs[0]->needs_grad) {
        Eigen::Map<const Mat> wm(n.inputs[1]->value.ptr() + g * cog * kk, cog, kk);
        gcol.noalias() = wm.transpose() * gm;
        detail::col2im2d(gcol, n.inputs[0]->ensureGrad().ptr(), g * cig, cig, h, wd, kh, kw, stride,
                         ho, wo);
      }
    }
    if (n.inputs[2]->needs_grad) {
      auto& gb = n.inputs[2]->ensureGrad();
      for (Index c = 0; c < co; ++c) {
        S acc = S(0);
        for (Index i = 0; i < ho * wo; ++i) acc += n.grad[c * ho * wo + i];
        gb[c] += acc;
      }
    }
  };
  return makeOp<S>({x, w, b}, std::move(out), bp);
}

/// 3-D convolution over a cost volume. x (Ci,D,H,W), w (Co, Ci/groups, k,k,k).
template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, const Var<S>& b, Index stride = 1,
              Index groups = 1) {
  using Mat = detail::RowMat<S>;
  const Index ci = x.dim(0), d = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index co = w.dim(0), cig = w.dim(1), k = w.dim(2);
  if (w.dim(3) != k || w.dim(4) != k) throw std::invalid_argument("conv3d: kernel must be cubic");
  if (cig * groups != ci || co % groups != 0)
    throw std::invalid_argument("conv3d: channel/group mismatch");
  const Index do_ = detail::convOut(d, k, stride), ho = detail::convOut(h, k, stride),
              wo = detail::convOut(wd, k, stride);
  const Index cog = co / groups, kk = cig * k * k * k, vox = do_ * ho * wo;

  Tensor<S> out({co, do_, ho, wo});
  Mat col;
  for (Index g = 0; g < groups; ++g) {
    detail::im2col3d(x.value().ptr(), g * cig, cig, d, h, wd, k, stride, do_, ho, wo, col);
    Eigen::Map<const Mat> wm(w.value().ptr() + g * cog * kk, cog, kk);
    Eigen::Map<Mat> om(out.ptr() + g * cog * vox, cog, vox);
    om.noalias() = wm * col;
  }
  for (Index c = 0; c < co; ++c)
    for (Index i = 0; i < vox; ++i) out[c * vox + i] += b.value()[c];

  auto bp = [=](Node<S>& n) {
    Mat col, gcol;
    for (Index g = 0; g < groups; ++g) {
      Eigen::Map<const Mat> gm(n.grad.ptr() + g * cog * vox, cog, vox);
      if (n.inputs[1]->needs_grad || n.inputs[0]->needs_grad)
        detail::im2col3d(n.inputs[0]->value.ptr(), g * cig, cig, d, h, wd, k, stride, do_, ho, wo,
                         col);
      if (n.inputs[1]->needs_grad) {
        Eigen::Map<Mat> gw(n.inputs[1]->ensureGrad().ptr() + g * cog * kk, cog, kk);
        gw.noalias() += gm * col.transpose();
      }
      if (n.inputs[0]->needs_grad) {
        Eigen::Map<const Mat> wm(n.inputs[1]->value.ptr() + g * cog * kk, cog, kk);
        gcol.noalias() = wm.transpose() * gm;
        detail::col2im3d(gcol, n.inputs[0]->ensureGrad().ptr(), g * cig, cig, d, h, wd, k, stride,
                         do_, ho, wo);
      }
    }
    if (n.inputs[2]->needs_grad) {
      auto& gb = n.inputs[2]->ensureGrad();
      for (Index c = 0; c < co; ++c) {
        S acc = S(0);
        for (Index i = 0; i < vox; ++i) acc += n.grad[c * vox + i];
        gb[c] += acc;
      }
    }
  };
  return makeOp<S>({x, w, b}, std::move(out), bp);
}

namespace detail {
struct LerpTap {
  Index lo;
  double t;  // weight of lo+1; lo+1 clamped to lo when t == 0 at the end
};
/// Source taps for 1-D linear interpolation at scale `factor`
/// (half-pixel-centre convention, edges clamped).
inline std::vector<LerpTap> lerpTaps(Index n_out, Index n_in, Index factor) {
  std::vector<LerpTap> taps(static_cast<size_t>(n_out));
  for (Index o = 0; o < n_out; ++o) {
    double s = (o + 0.5) / factor - 0.5;
    if (s < 0) s = 0;
    if (s > n_in - 1) s = n_in - 1;
    Index lo = static_cast<Index>(std::floor(s));
    if (lo > n_in - 2) lo = std::max<Index>(n_in - 2, 0);
    taps[static_cast<size_t>(o)] = {lo, n_in > 1 ? s - lo : 0.0};
  }
  return taps;
}
}  // namespace detail

/// Bilinear upsampling of (C,H,W) by an integer factor.
template <typename S>
Var<S> upsampleBilinear(const Var<S>& x, Index factor) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index ho = h * factor, wo = w * factor;
  auto ty = detail::lerpTaps(ho, h, factor);
  auto tx = detail::lerpTaps(wo, w, factor);
  Tensor<S> out({c, ho, wo});
  for (Index ci = 0; ci < c; ++ci) {
    const S* xc = x.value().ptr() + ci * h * w;
    S* oc = out.ptr() + ci * ho * wo;
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) {
        const auto& a = ty[static_cast<size_t>(oy)];
        const auto& b = tx[static_cast<size_t>(ox)];
        const S v00 = xc[a.lo * w + b.lo], v01 = xc[a.lo * w + std::min(b.lo + 1, w - 1)];
        const S v10 = xc[std::min(a.lo + 1, h - 1) * w + b.lo],
                v11 = xc[std::min(a.lo + 1, h - 1) * w + std::min(b.lo + 1, w - 1)];
        oc[oy * wo + ox] = static_cast<S>((1 - a.t) * ((1 - b.t) * v00 + b.t * v01) +
                                          a.t * ((1 - b.t) * v10 + b.t * v11));
      }
  }
  return makeOp<S>({x}, std::move(out), [=](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    auto& gx = n.inputs[0]->ensureGrad();
    for (Index ci = 0; ci < c; ++ci) {
      S* gc = gx.ptr() + ci * h * w;
      const S* go = n.grad.ptr() + ci * ho * wo;
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          const auto& a = ty[static_cast<size_t>(oy)];
          const auto& b = tx[static_cast<size_t>(ox)];
          const S g = go[oy * wo + ox];
          const Index y1 = std::min(a.lo + 1, h - 1), x1 = std::min(b.lo + 1, w - 1);
          gc[a.lo * w + b.lo] += static_cast<S>((1 - a.t) * (1 - b.t)) * g;
          gc[a.lo * w + x1] += static_cast<S>((1 - a.t) * b.t) * g;
          gc[y1 * w + b.lo] += static_cast<S>(a.t * (1 - b.t)) * g;
          gc[y1 * w + x1] += static_cast<S>(a.t * b.t) * g;
        }
    }
  });
}

/// Trilinear ×2 upsampling of a volume (C,D,H,W).
template <typename S>
Var<S> upsampleTrilinear2x(const Var<S>& x) {
  const Index c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index d2 = d * 2, h2 = h * 2, w2 = w * 2;
  auto td = detail::lerpTaps(d2, d, 2), ty = detail::lerpTaps(h2, h, 2),
       tx = detail::lerpTaps(w2, w, 2);
  Tensor<S> out({c, d2, h2, w2});
  auto gather = [&](const S* xc, Index dz, Index dy, Index dx) { return xc[(dz * h + dy) * w + dx]; };
  for (Index ci = 0; ci < c; ++ci) {
    const S* xc = x.value().ptr() + ci * d * h * w;
    S* oc = out.ptr() + ci * d2 * h2 * w2;
    for (Index oz = 0; oz < d2; ++oz)
      for (Index oy = 0; oy < h2; ++oy)
        for (Index ox = 0; ox < w2; ++ox) {
          const auto &a = td[static_cast<size_t>(oz)], &b = ty[static_cast<size_t>(oy)],
                     &e = tx[static_cast<size_t>(ox)];
          const Index z1 = std::min(a.lo + 1, d - 1), y1 = std::min(b.lo + 1, h - 1),
                      x1 = std::min(e.lo + 1, w - 1);
          double acc = 0;
          for (int iz = 0; iz < 2; ++iz)
            for (int iy = 0; iy < 2; ++iy)
              for (int ix = 0; ix < 2; ++ix) {
                const double wgt = (iz ? a.t : 1 - a.t) * (iy ? b.t : 1 - b.t) * (ix ? e.t : 1 - e.t);
                acc += wgt * gather(xc, iz ? z1 : a.lo, iy ? y1 : b.lo, ix ? x1 : e.lo);
              }
          oc[(oz * h2 + oy) * w2 + ox] = static_cast<S>(acc);
        }
  }
  return makeOp<S>({x}, std::move(out), [=](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    auto& gx = n.inputs[0]->ensureGrad();
    for (Index ci = 0; ci < c; ++ci) {
      S* gc = gx.ptr() + ci * d * h * w;
      const S* go = n.grad.ptr() + ci * d2 * h2 * w2;
      for (Index oz = 0; oz < d2; ++oz)
        for (Index oy = 0; oy < h2; ++oy)
          for (Index ox = 0; ox < w2; ++ox) {
            const auto &a = td[static_cast<size_t>(oz)], &b = ty[static_cast<size_t>(oy)],
                       &e = tx[static_cast<size_t>(ox)];
            const Index z1 = std::min(a.lo + 1, d - 1), y1 = std::min(b.lo + 1, h - 1),
                        x1 = std::min(e.lo + 1, w - 1);
            const S g = go[(oz * h2 + oy) * w2 + ox];
            for (int iz = 0; iz < 2; ++iz)
              for (int iy = 0; iy < 2; ++iy)
                for (int ix = 0; ix < 2; ++ix) {
                  const double wgt =
                      (iz ? a.t : 1 - a.t) * (iy ? b.t : 1 - b.t) * (ix ? e.t : 1 - e.t);
                  gc[((iz ? z1 : a.lo) * h + (iy ? y1 : b.lo)) * w + (ix ? x1 : e.lo)] +=
                      static_cast<S>(wgt) * g;
                }
          }
    }
  });
}

/// Horizontal backward warp: out(c,y,x) = f(c, y, x - disp(y,x)), bilinear in x.
/// Source positions left of the frame yield zeros.
template <typename S>
Var<S> warpHorizontal(const Var<S>& f, const Var<S>& disp) {
  const Index c = f.dim(0), h = f.dim(1), w = f.dim(2);
  if (disp.dim(0) != h || disp.dim(1) != w)
    throw std::invalid_argument("warpHorizontal: disparity shape mismatch");
  if ((disp.value().raw() < S(0)).any())
    throw std::invalid_argument("warpHorizontal: negative disparities rejected");
  Tensor<S> out({c, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const S xs = static_cast<S>(x) - disp.value().at(y, x);
      if (xs < S(0)) continue;  // out of frame
      const Index x0 = std::min(static_cast<Index>(std::floor(xs)), w - 1);
      const Index x1 = std::min(x0 + 1, w - 1);
      const S t = xs - static_cast<S>(x0);
      for (Index ci = 0; ci < c; ++ci)
        out.at(ci, y, x) = (S(1) - t) * f.value().at(ci, y, x0) + t * f.value().at(ci, y, x1);
    }
  return makeOp<S>({f, disp}, std::move(out), [c, h, w](Node<S>& n) {
    const auto& fv = n.inputs[0]->value;
    const auto& dv = n.inputs[1]->value;
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const S xs = static_cast<S>(x) - dv.at(y, x);
        if (xs < S(0)) continue;
        const Index x0 = std::min(static_cast<Index>(std::floor(xs)), w - 1);
        const Index x1 = std::min(x0 + 1, w - 1);
        const S t = xs - static_cast<S>(x0);
        S gd = S(0);
        for (Index ci = 0; ci < c; ++ci) {
          const S g = n.grad.at(ci, y, x);
          if (n.inputs[0]->needs_grad) {
            n.inputs[0]->ensureGrad().at(ci, y, x0) += (S(1) - t) * g;
            n.inputs[0]->ensureGrad().at(ci, y, x1) += t * g;
          }
          gd += g * (fv.at(ci, y, x1) - fv.at(ci, y, x0));
        }
        // d(xs)/d(disp) = -1
        if (n.inputs[1]->needs_grad) n.inputs[1]->ensureGrad().at(y, x) += -gd;
      }
  });
}

/// Correlation cost volume: C(d,y,x) = <fl(:,y,x), fr(:,y,x-d)> / C.
/// Out-of-frame (x-d < 0) entries are zero.
template <typename S>
Var<S> correlationVolume(const Var<S>& fl, const Var<S>& fr, Index d_levels) {
  if (!fl.value().sameShape(fr.value()))
    throw std::invalid_argument("correlationVolume: feature shape mismatch " +
                                shapeStr(fl.shape()) + " vs " + shapeStr(fr.shape()));
  if (d_levels < 1) throw std::invalid_argument("correlationVolume: d_levels must be >= 1");
  const Index c = fl.dim(0), h = fl.dim(1), w = fl.dim(2);
  const S inv = S(1) / static_cast<S>(c);
  Tensor<S> out({d_levels, h, w});
  for (Index d = 0; d < d_levels; ++d)
    for (Index y = 0; y < h; ++y)
      for (Index x = d; x < w; ++x) {
        S acc = S(0);
        for (Index ci = 0; ci < c; ++ci) acc += fl.value().at(ci, y, x) * fr.value().at(ci, y, x - d);
        out.at(d, y, x) = acc * inv;
      }
  return makeOp<S>({fl, fr}, std::move(out), [c, h, w, d_levels, inv](Node<S>& n) {
    const auto& flv = n.inputs[0]->value;
    const auto& frv = n.inputs[1]->value;
    for (Index d = 0; d < d_levels; ++d)
      for (Index y = 0; y < h; ++y)
        for (Index x = d; x < w; ++x) {
          const S g = n.grad.at(d, y, x) * inv;
          if (g == S(0)) continue;
          for (Index ci = 0; ci < c; ++ci) {
            if (n.inputs[0]->needs_grad)
              n.inputs[0]->ensureGrad().at(ci, y, x) += g * frv.at(ci, y, x - d);
            if (n.inputs[1]->needs_grad)
              n.inputs[1]->ensureGrad().at(ci, y, x - d) += g * flv.at(ci, y, x);
          }
        }
  });
}

/// Local horizontal correlation in a (2r+1) window:
/// out(k,y,x) = <fl(:,y,x), fw(:,y,x+k-r)> / C, zero outside the frame.
template <typename S>
Var<S> localCorrelation(const Var<S>& fl, const Var<S>& fw, Index radius) {
  if (!fl.value().sameShape(fw.value()))
    throw std::invalid_argument("localCorrelation: shape mismatch");
  const Index c = fl.dim(0), h = fl.dim(1), w = fl.dim(2);
  const Index kc = 2 * radius + 1;
  const S inv = S(1) / static_cast<S>(c);
  Tensor<S> out({kc, h, w});
  for (Index k = 0; k < kc; ++k) {
    const Index off = k - radius;
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index xs = x + off;
        if (xs < 0 || xs >= w) continue;
        S acc = S(0);
        for (Index ci = 0; ci < c; ++ci) acc += fl.value().at(ci, y, x) * fw.value().at(ci, y, xs);
        out.at(k, y, x) = acc * inv;
      }
  }
  return makeOp<S>({fl, fw}, std::move(out), [c, h, w, kc, radius, inv](Node<S>& n) {
    const auto& flv = n.inputs[0]->value;
    const auto& fwv = n.inputs[1]->value;
    for (Index k = 0; k < kc; ++k) {
      const Index off = k - radius;
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const Index xs = x + off;
          if (xs < 0 || xs >= w) continue;
          const S g = n.grad.at(k, y, x) * inv;
          if (g == S(0)) continue;
          for (Index ci = 0; ci < c; ++ci) {
            if (n.inputs[0]->needs_grad) n.inputs[0]->ensureGrad().at(ci, y, x) += g * fwv.at(ci, y, xs);
            if (n.inputs[1]->needs_grad) n.inputs[1]->ensureGrad().at(ci, y, xs) += g * flv.at(ci, y, x);
          }
        }
    }
  });
}

/// Convex upsampling: each fine pixel is a 9-weight convex combination of the
/// 3x3 coarse neighbourhood (edges clamped), scaled by `factor` to convert
/// disparity units. disp (H,W); mask (9*factor^2, H, W), softmax-normalized
/// over the 9-neighbour axis.
template <typename S>
Var<S> convexUpsample(const Var<S>& disp, const Var<S>& mask, Index factor) {
  const Index h = disp.dim(0), w = disp.dim(1), k2 = factor * factor;
  if (mask.dim(0) != 9 * k2 || mask.dim(1) != h || mask.dim(2) != w)
    throw std::invalid_argument("convexUpsample: mask shape mismatch, want " +
                                shapeStr({9 * k2, h, w}) + " got " + shapeStr(mask.shape()));
  for (Index s = 0; s < k2; ++s)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        S sum = S(0);
        for (Index nb = 0; nb < 9; ++nb) sum += mask.value().at(nb * k2 + s, y, x);
        if (std::abs(sum - S(1)) > S(1e-5))
          throw std::invalid_argument("convexUpsample: mask not softmax-normalized");
      }
  const Index ho = h * factor, wo = w * factor;
  Tensor<S> out({ho, wo});
  auto clampi = [](Index v, Index n) { return std::min(std::max<Index>(v, 0), n - 1); };
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index sy = 0; sy < factor; ++sy)
        for (Index sx = 0; sx < factor; ++sx) {
          const Index s = sy * factor + sx;
          S acc = S(0);
          for (Index nb = 0; nb < 9; ++nb) {
            const Index ny = clampi(y + nb / 3 - 1, h), nx = clampi(x + nb % 3 - 1, w);
            acc += mask.value().at(nb * k2 + s, y, x) * disp.value().at(ny, nx);
          }
          out.at(y * factor + sy, x * factor + sx) = acc * static_cast<S>(factor);
        }
  return makeOp<S>({disp, mask}, std::move(out), [h, w, factor, k2](Node<S>& n) {
    auto clampi = [](Index v, Index nn) { return std::min(std::max<Index>(v, 0), nn - 1); };
    const auto& dv = n.inputs[0]->value;
    const auto& mv = n.inputs[1]->value;
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        for (Index sy = 0; sy < factor; ++sy)
          for (Index sx = 0; sx < factor; ++sx) {
            const Index s = sy * factor + sx;
            const S g = n.grad.at(y * factor + sy, x * factor + sx) * static_cast<S>(factor);
            if (g == S(0)) continue;
            for (Index nb = 0; nb < 9; ++nb) {
              const Index ny = clampi(y + nb / 3 - 1, h), nx = clampi(x + nb % 3 - 1, w);
              if (n.inputs[0]->needs_grad)
                n.inputs[0]->ensureGrad().at(ny, nx) += g * mv.at(nb * k2 + s, y, x);
              if (n.inputs[1]->needs_grad)
                n.inputs[1]->ensureGrad().at(nb * k2 + s, y, x) += g * dv.at(ny, nx);
            }
          }
  });
}

/// Gates a volume (C,D,H,W) by a per-pixel channel map (C,H,W), broadcast
/// over the disparity axis: out(c,d,y,x) = vol(c,d,y,x) * gate(c,y,x).
template <typename S>
Var<S> mulGateOverDepth(const Var<S>& vol, const Var<S>& gate) {
  const Index c = vol.dim(0), d = vol.dim(1), h = vol.dim(2), w = vol.dim(3);
  if (gate.dim(0) != c || gate.dim(1) != h || gate.dim(2) != w)
    throw std::invalid_argument("mulGateOverDepth: gate shape " + shapeStr(gate.shape()) +
                                " does not match volume " + shapeStr(vol.shape()));
  Tensor<S> out(vol.shape());
  for (Index ci = 0; ci < c; ++ci)
    for (Index di = 0; di < d; ++di)
      for (Index i = 0; i < h * w; ++i)
        out[(ci * d + di) * h * w + i] =
            vol.value()[(ci * d + di) * h * w + i] * gate.value()[ci * h * w + i];
  return makeOp<S>({vol, gate}, std::move(out), [c, d, h, w](Node<S>& n) {
    const Index hw = h * w;
    if (n.inputs[0]->needs_grad) {
      auto& gv = n.inputs[0]->ensureGrad();
      for (Index ci = 0; ci < c; ++ci)
        for (Index di = 0; di < d; ++di)
          for (Index i = 0; i < hw; ++i)
            gv[(ci * d + di) * hw + i] +=
                n.grad[(ci * d + di) * hw + i] * n.inputs[1]->value[ci * hw + i];
    }
    if (n.inputs[1]->needs_grad) {
      auto& gg = n.inputs[1]->ensureGrad();
      for (Index ci = 0; ci < c; ++ci)
        for (Index i = 0; i < hw; ++i) {
          S acc = S(0);
          for (Index di = 0; di < d; ++di)
            acc += n.grad[(ci * d + di) * hw + i] * n.inputs[0]->value[(ci * d + di) * hw + i];
          gg[ci * hw + i] += acc;
        }
    }
  });
}

/// 2x2 average pooling of a 2-D grid (plain function, no tape).
template <typename S>
Tensor<S> avgPool2x2(const Tensor<S>& x) {
  const Index h = x.dim(0), w = x.dim(1);
  if (h % 2 || w % 2) throw std::invalid_argument("avgPool2x2: dims must be even");
  Tensor<S> out({h / 2, w / 2});
  for (Index y = 0; y < h / 2; ++y)
    for (Index x_ = 0; x_ < w / 2; ++x_)
      out.at(y, x_) = (x.at(2 * y, 2 * x_) + x.at(2 * y, 2 * x_ + 1) + x.at(2 * y + 1, 2 * x_) +
                       x.at(2 * y + 1, 2 * x_ + 1)) /
                      S(4);
  return out;
}

}  // namespace tstereo
