//! Convolution, pooling and resampling ops (NCHW layout).

use ndarray::{Array2, Array3, ArrayView3, Axis, IxDyn};

use crate::graph::{Arr, BackFn, Graph, NodeId};

/// Unfold one sample into a (C*kh*kw, ho*wo) matrix with zero padding.
fn im2col(
    x: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut col_row = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter a column matrix back onto a (c,h,w) grid.
fn col2im(
    col: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col_row = col.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] += col_row[oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

pub fn conv_t_out_dim(h: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (h - 1) * stride + k + out_pad - 2 * pad
}

impl Graph<'_> {
    /// 2-d convolution. `x`: (N,Cin,H,W); `w`: (Cout, Cin/groups, k, k).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> NodeId {
        let vx = self.value_arc(x);
        let vw = self.value_arc(w);
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-d");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cg, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert_eq!(cin, cg * groups, "conv2d channel/group mismatch");
        assert_eq!(cout % groups, 0);
        let cog = cout / groups;
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);

        let w_mat = vw
            .view()
            .into_shape_with_order((cout, cg * k * k))
            .expect("weight view");
        let mut out = Arr::zeros(IxDyn(&[n, cout, ho, wo]));
        for ni in 0..n {
            for gi in 0..groups {
                let xg = vx
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .index_axis_move(Axis(0), ni);
                let xg = xg.slice_move(ndarray::s![gi * cg..(gi + 1) * cg, .., ..]);
                let col = im2col(&xg, k, stride, pad, ho, wo);
                let wg = w_mat.slice(ndarray::s![gi * cog..(gi + 1) * cog, ..]);
                let res = wg.dot(&col); // (cog, ho*wo)
                out.slice_mut(ndarray::s![ni, gi * cog..(gi + 1) * cog, .., ..])
                    .assign(
                        &res.into_shape_with_order((cog, ho, wo))
                            .expect("conv out reshape"),
                    );
            }
        }
        if let Some(bid) = b {
            let vb = self.value(bid);
            assert_eq!(vb.len(), cout);
            for ci in 0..cout {
                let bv = vb[[ci]];
                out.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v + bv);
            }
        }

        let back: BackFn = Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut gx = Arr::zeros(IxDyn(&xs));
            let mut gw = Array2::<f64>::zeros((cout, cg * k * k));
            let w_mat = vw
                .view()
                .into_shape_with_order((cout, cg * k * k))
                .unwrap();
            for ni in 0..n {
                for gi in 0..groups {
                    let go = g4
                        .index_axis(Axis(0), ni)
                        .slice_move(ndarray::s![gi * cog..(gi + 1) * cog, .., ..]);
                    let go_mat = go
                        .to_owned()
                        .into_shape_with_order((cog, ho * wo))
                        .unwrap();
                    let xg = vx
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap()
                        .index_axis_move(Axis(0), ni)
                        .slice_move(ndarray::s![gi * cg..(gi + 1) * cg, .., ..]);
                    let col = im2col(&xg, k, stride, pad, ho, wo);
                    // weight gradient
                    let gwg = go_mat.dot(&col.t());
                    gw.slice_mut(ndarray::s![gi * cog..(gi + 1) * cog, ..])
                        .scaled_add(1.0, &gwg);
                    // input gradient
                    let wg = w_mat.slice(ndarray::s![gi * cog..(gi + 1) * cog, ..]);
                    let gcol = wg.t().dot(&go_mat);
                    let gxg = col2im(&gcol, cg, h, wd, k, stride, pad, ho, wo);
                    gx.slice_mut(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..])
                        .scaled_add(1.0, &gxg);
                }
            }
            sink.add(x, gx);
            sink.add(
                w,
                gw.into_shape_with_order(IxDyn(&ws)).expect("gw reshape"),
            );
            if let Some(bid) = b {
                let gb = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                sink.add(bid, gb.into_dyn());
            }
        });
        self.push(out, Some(back))
    }

    /// Transposed 2-d convolution (groups = 1). `w`: (Cin, Cout, k, k).
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> NodeId {
        let vx = self.value_arc(x);
        let vw = self.value_arc(w);
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        assert_eq!(ws[0], cin, "conv_transpose2d channel mismatch");
        assert_eq!(ws[2], ws[3]);
        let ho = conv_t_out_dim(h, k, stride, pad, out_pad);
        let wo = conv_t_out_dim(wd, k, stride, pad, out_pad);

        let w_mat = vw
            .view()
            .into_shape_with_order((cin, cout * k * k))
            .expect("weight view");
        let mut out = Arr::zeros(IxDyn(&[n, cout, ho, wo]));
        for ni in 0..n {
            let xi = vx
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .index_axis_move(Axis(0), ni)
                .to_owned()
                .into_shape_with_order((cin, h * wd))
                .unwrap();
            let col = w_mat.t().dot(&xi); // (cout*k*k, h*w)
            let oi = col2im(&col, cout, ho, wo, k, stride, pad, h, wd);
            out.index_axis_mut(Axis(0), ni).assign(&oi);
        }
        if let Some(bid) = b {
            let vb = self.value(bid);
            assert_eq!(vb.len(), cout);
            for ci in 0..cout {
                let bv = vb[[ci]];
                out.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v + bv);
            }
        }

        let back: BackFn = Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let w_mat = vw
                .view()
                .into_shape_with_order((cin, cout * k * k))
                .unwrap();
            let mut gx = Arr::zeros(IxDyn(&xs));
            let mut gw = Array2::<f64>::zeros((cin, cout * k * k));
            for ni in 0..n {
                let gi = g4.index_axis(Axis(0), ni);
                let gcol = im2col(&gi, k, stride, pad, h, wd); // (cout*k*k, h*w)
                let gxi = w_mat.dot(&gcol); // (cin, h*w)
                gx.index_axis_mut(Axis(0), ni).assign(
                    &gxi.into_shape_with_order((cin, h, wd))
                        .unwrap()
                        .into_dyn(),
                );
                let xi = vx
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .index_axis_move(Axis(0), ni)
                    .to_owned()
                    .into_shape_with_order((cin, h * wd))
                    .unwrap();
                gw.scaled_add(1.0, &xi.dot(&gcol.t()));
            }
            sink.add(x, gx);
            sink.add(
                w,
                gw.into_shape_with_order(IxDyn(&ws)).expect("gw reshape"),
            );
            if let Some(bid) = b {
                let gb = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                sink.add(bid, gb.into_dyn());
            }
        });
        self.push(out, Some(back))
    }

    /// Average pooling with window `k` and stride `s`. Spatial dims must
    /// tile exactly so the semantics stay padding-free.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize, s: usize) -> NodeId {
        let vx = self.value_arc(x);
        let xs = vx.shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(
            (h - k) % s == 0 && (w - k) % s == 0,
            "avg_pool2d requires exact tiling"
        );
        let ho = (h - k) / s + 1;
        let wo = (w - k) / s + 1;
        let inv = 1.0 / (k * k) as f64;
        let mut out = Arr::zeros(IxDyn(&[n, c, ho, wo]));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += vx[[ni, ci, oy * s + ky, ox * s + kx]];
                            }
                        }
                        out[[ni, ci, oy, ox]] = acc * inv;
                    }
                }
            }
        }
        let back: BackFn = Box::new(move |g, sink| {
            let mut gx = Arr::zeros(IxDyn(&xs));
            for ni in 0..n {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[[ni, ci, oy, ox]] * inv;
                            for ky in 0..k {
                                for kx in 0..k {
                                    gx[[ni, ci, oy * s + ky, ox * s + kx]] += gv;
                                }
                            }
                        }
                    }
                }
            }
            sink.add(x, gx);
        });
        self.push(out, Some(back))
    }

    /// Undecimated (stride-1, same-size) box average of window `k` with
    /// zero padding. Pad split is (k-1)/2 before, the remainder after.
    pub fn box_filter(&mut self, x: NodeId, k: usize) -> NodeId {
        let vx = self.value_arc(x);
        let xs = vx.shape().to_vec();
        let pl = (k - 1) / 2;
        let inv = 1.0 / (k * k) as f64;
        let mut out = box_sum(&vx, k, pl);
        out.mapv_inplace(|v| v * inv);
        let back: BackFn = Box::new(move |g, sink| {
            let mut gx = box_sum(g, k, k - 1 - pl);
            gx.mapv_inplace(|v| v * inv);
            debug_assert_eq!(gx.shape(), xs.as_slice());
            sink.add(x, gx);
        });
        self.push(out, Some(back))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let vx = self.value_arc(x);
        let xs = vx.shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = Arr::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x_ in 0..w {
                        let v = vx[[ni, ci, y, x_]];
                        out[[ni, ci, 2 * y, 2 * x_]] = v;
                        out[[ni, ci, 2 * y, 2 * x_ + 1]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * x_]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * x_ + 1]] = v;
                    }
                }
            }
        }
        let back: BackFn = Box::new(move |g, sink| {
            let mut gx = Arr::zeros(IxDyn(&xs));
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for x_ in 0..w {
                            gx[[ni, ci, y, x_]] = g[[ni, ci, 2 * y, 2 * x_]]
                                + g[[ni, ci, 2 * y, 2 * x_ + 1]]
                                + g[[ni, ci, 2 * y + 1, 2 * x_]]
                                + g[[ni, ci, 2 * y + 1, 2 * x_ + 1]];
                        }
                    }
                }
            }
            sink.add(x, gx);
        });
        self.push(out, Some(back))
    }
}

/// Sliding-window sum over both spatial axes with zero padding.
fn box_sum(x: &Arr, k: usize, pad_before: usize) -> Arr {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
    for ni in 0..n {
        for ci in 0..c {
            // rows pass
            let mut rows = ndarray::Array2::<f64>::zeros((h, w));
            for y in 0..h {
                for ox in 0..w {
                    let mut acc = 0.0;
                    for d in 0..k {
                        let ix = (ox + d) as isize - pad_before as isize;
                        if ix >= 0 && (ix as usize) < w {
                            acc += x[[ni, ci, y, ix as usize]];
                        }
                    }
                    rows[[y, ox]] = acc;
                }
            }
            // cols pass
            for oy in 0..h {
                for x_ in 0..w {
                    let mut acc = 0.0;
                    for d in 0..k {
                        let iy = (oy + d) as isize - pad_before as isize;
                        if iy >= 0 && (iy as usize) < h {
                            acc += rows[[iy as usize, x_]];
                        }
                    }
                    out[[ni, ci, oy, x_]] = acc;
                }
            }
        }
    }
    out
}
