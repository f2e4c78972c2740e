//! Differentiable bilinear grid sampling and projective grid generation.
//!
//! Grids use normalized coordinates in [-1,1]^2 with corner alignment:
//! -1 maps to pixel 0 and +1 to pixel W-1 (resp. H-1). Samples outside the
//! image read as zero.

use ndarray::IxDyn;

use crate::graph::{Arr, BackFn, Graph, NodeId};

/// Bilinear sample of a single (C,H,W) image at pixel coordinates (px,py).
/// Out-of-range neighbours contribute zero.
pub fn sample_bilinear_pixel(img: &Arr, c: usize, px: f64, py: f64) -> f64 {
    let h = img.shape()[1] as isize;
    let w = img.shape()[2] as isize;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || y >= h || x < 0 || x >= w {
            0.0
        } else {
            img[[c, y as usize, x as usize]]
        }
    };
    (1.0 - fy) * (1.0 - fx) * at(y0, x0)
        + (1.0 - fy) * fx * at(y0, x0 + 1)
        + fy * (1.0 - fx) * at(y0 + 1, x0)
        + fy * fx * at(y0 + 1, x0 + 1)
}

/// 1.0 where the pixel coordinate falls inside the source image.
pub fn valid_mask_from_grid_px(grid: &Arr, in_h: usize, in_w: usize) -> Arr {
    let gs = grid.shape();
    let (n, ho, wo) = (gs[0], gs[1], gs[2]);
    let mut mask = Arr::zeros(IxDyn(&[n, 1, ho, wo]));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let px = grid[[ni, oy, ox, 0]];
                let py = grid[[ni, oy, ox, 1]];
                if px >= 0.0 && px <= in_w as f64 - 1.0 && py >= 0.0 && py <= in_h as f64 - 1.0 {
                    mask[[ni, 0, oy, ox]] = 1.0;
                }
            }
        }
    }
    mask
}

/// 1.0 where the normalized coordinate falls inside the source image.
pub fn valid_mask_from_grid(grid: &Arr, in_h: usize, in_w: usize) -> Arr {
    let gs = grid.shape();
    let (n, ho, wo) = (gs[0], gs[1], gs[2]);
    let mut mask = Arr::zeros(IxDyn(&[n, 1, ho, wo]));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let px = (grid[[ni, oy, ox, 0]] + 1.0) * 0.5 * (in_w as f64 - 1.0);
                let py = (grid[[ni, oy, ox, 1]] + 1.0) * 0.5 * (in_h as f64 - 1.0);
                if px >= 0.0 && px <= in_w as f64 - 1.0 && py >= 0.0 && py <= in_h as f64 - 1.0 {
                    mask[[ni, 0, oy, ox]] = 1.0;
                }
            }
        }
    }
    mask
}

impl Graph<'_> {
    /// Bilinear sampling. `x`: (N,C,H,W); `grid`: (N,Ho,Wo,2) with the last
    /// axis holding normalized (x, y). Differentiable in both arguments.
    pub fn grid_sample(&mut self, x: NodeId, grid: NodeId) -> NodeId {
        let (h, w) = {
            let s = self.shape(x);
            (s[2], s[3])
        };
        let sx = 0.5 * (w as f64 - 1.0);
        let sy = 0.5 * (h as f64 - 1.0);
        self.grid_sample_impl(x, grid, sx, sx, sy, sy)
    }

    /// Bilinear sampling with the grid already in pixel coordinates. Exact
    /// for integer sampling locations.
    pub fn grid_sample_px(&mut self, x: NodeId, grid: NodeId) -> NodeId {
        self.grid_sample_impl(x, grid, 1.0, 0.0, 1.0, 0.0)
    }

    /// Shared sampler: pixel coords are `gx * sx + ox` (resp. y).
    fn grid_sample_impl(
        &mut self,
        x: NodeId,
        grid: NodeId,
        sx: f64,
        ox: f64,
        sy: f64,
        oy: f64,
    ) -> NodeId {
        let vx = self.value_arc(x);
        let vg = self.value_arc(grid);
        let xs = vx.shape().to_vec();
        let gs = vg.shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(gs.len(), 4);
        assert_eq!(gs[3], 2, "grid last axis must be (x,y)");
        assert_eq!(xs[0], gs[0], "batch mismatch");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (gs[1], gs[2]);

        let mut out = Arr::zeros(IxDyn(&[n, c, ho, wo]));
        for ni in 0..n {
            for gy in 0..ho {
                for gx in 0..wo {
                    let px = vg[[ni, gy, gx, 0]] * sx + ox;
                    let py = vg[[ni, gy, gx, 1]] * sy + oy;
                    let x0 = px.floor();
                    let y0 = py.floor();
                    let fx = px - x0;
                    let fy = py - y0;
                    let (x0i, y0i) = (x0 as isize, y0 as isize);
                    for ci in 0..c {
                        let at = |y: isize, xx: isize| -> f64 {
                            if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                                0.0
                            } else {
                                vx[[ni, ci, y as usize, xx as usize]]
                            }
                        };
                        out[[ni, ci, gy, gx]] = (1.0 - fy) * (1.0 - fx) * at(y0i, x0i)
                            + (1.0 - fy) * fx * at(y0i, x0i + 1)
                            + fy * (1.0 - fx) * at(y0i + 1, x0i)
                            + fy * fx * at(y0i + 1, x0i + 1);
                    }
                }
            }
        }

        let back: BackFn = Box::new(move |g, sink| {
            let mut gxin = Arr::zeros(IxDyn(&xs));
            let mut gg = Arr::zeros(IxDyn(&gs));
            for ni in 0..n {
                for gy in 0..ho {
                    for gx in 0..wo {
                        let px = vg[[ni, gy, gx, 0]] * sx + ox;
                        let py = vg[[ni, gy, gx, 1]] * sy + oy;
                        let x0 = px.floor();
                        let y0 = py.floor();
                        let fx = px - x0;
                        let fy = py - y0;
                        let (x0i, y0i) = (x0 as isize, y0 as isize);
                        let mut dpx = 0.0;
                        let mut dpy = 0.0;
                        for ci in 0..c {
                            let gv = g[[ni, ci, gy, gx]];
                            if gv == 0.0 {
                                continue;
                            }
                            let mut vals = [0.0f64; 4]; // v00 v01 v10 v11 (row,col)
                            let coords = [
                                (y0i, x0i),
                                (y0i, x0i + 1),
                                (y0i + 1, x0i),
                                (y0i + 1, x0i + 1),
                            ];
                            let weights = [
                                (1.0 - fy) * (1.0 - fx),
                                (1.0 - fy) * fx,
                                fy * (1.0 - fx),
                                fy * fx,
                            ];
                            for (idx, &(yy, xx)) in coords.iter().enumerate() {
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    vals[idx] = vx[[ni, ci, yy as usize, xx as usize]];
                                    gxin[[ni, ci, yy as usize, xx as usize]] += gv * weights[idx];
                                }
                            }
                            dpx += gv * ((1.0 - fy) * (vals[1] - vals[0]) + fy * (vals[3] - vals[2]));
                            dpy += gv * ((1.0 - fx) * (vals[2] - vals[0]) + fx * (vals[3] - vals[1]));
                        }
                        gg[[ni, gy, gx, 0]] = dpx * sx;
                        gg[[ni, gy, gx, 1]] = dpy * sy;
                    }
                }
            }
            sink.add(x, gxin);
            sink.add(grid, gg);
        });
        self.push(out, Some(back))
    }

    /// Build a sampling grid from batched 3x3 matrices acting on normalized
    /// coordinates: for each output pixel with normalized coords (u,v),
    /// grid = (M00 u + M01 v + M02, M10 u + M11 v + M12) / (M20 u + M21 v + M22).
    pub fn homography_grid(&mut self, mats: NodeId, ho: usize, wo: usize) -> NodeId {
        let us: Vec<f64> = (0..wo)
            .map(|j| {
                if wo > 1 {
                    2.0 * j as f64 / (wo as f64 - 1.0) - 1.0
                } else {
                    0.0
                }
            })
            .collect();
        let vs: Vec<f64> = (0..ho)
            .map(|i| {
                if ho > 1 {
                    2.0 * i as f64 / (ho as f64 - 1.0) - 1.0
                } else {
                    0.0
                }
            })
            .collect();
        self.homography_grid_impl(mats, us, vs)
    }

    /// Pixel-coordinate variant: output pixel (x,y) maps through the matrix
    /// directly, so integer transforms stay exact.
    pub fn homography_grid_px(&mut self, mats: NodeId, ho: usize, wo: usize) -> NodeId {
        let us: Vec<f64> = (0..wo).map(|j| j as f64).collect();
        let vs: Vec<f64> = (0..ho).map(|i| i as f64).collect();
        self.homography_grid_impl(mats, us, vs)
    }

    fn homography_grid_impl(&mut self, mats: NodeId, us: Vec<f64>, vs: Vec<f64>) -> NodeId {
        let vm = self.value_arc(mats);
        let ms = vm.shape().to_vec();
        assert_eq!(&ms[1..], &[3, 3], "homography_grid expects (N,3,3)");
        let n = ms[0];
        let (ho, wo) = (vs.len(), us.len());
        let mut out = Arr::zeros(IxDyn(&[n, ho, wo, 2]));
        for ni in 0..n {
            let m = |r: usize, c_: usize| vm[[ni, r, c_]];
            for (i, &v) in vs.iter().enumerate() {
                for (j, &u) in us.iter().enumerate() {
                    let d = m(2, 0) * u + m(2, 1) * v + m(2, 2);
                    out[[ni, i, j, 0]] = (m(0, 0) * u + m(0, 1) * v + m(0, 2)) / d;
                    out[[ni, i, j, 1]] = (m(1, 0) * u + m(1, 1) * v + m(1, 2)) / d;
                }
            }
        }
        let back: BackFn = Box::new(move |g, sink| {
            let mut gm = Arr::zeros(IxDyn(&ms));
            for ni in 0..n {
                let m = |r: usize, c_: usize| vm[[ni, r, c_]];
                for (i, &v) in vs.iter().enumerate() {
                    for (j, &u) in us.iter().enumerate() {
                        let wvec = [u, v, 1.0];
                        let d = m(2, 0) * u + m(2, 1) * v + m(2, 2);
                        let nx = m(0, 0) * u + m(0, 1) * v + m(0, 2);
                        let ny = m(1, 0) * u + m(1, 1) * v + m(1, 2);
                        let gx = g[[ni, i, j, 0]];
                        let gy = g[[ni, i, j, 1]];
                        for (c_, &wc) in wvec.iter().enumerate() {
                            gm[[ni, 0, c_]] += gx * wc / d;
                            gm[[ni, 1, c_]] += gy * wc / d;
                            gm[[ni, 2, c_]] +=
                                -(gx * nx + gy * ny) * wc / (d * d);
                        }
                    }
                }
            }
            sink.add(mats, gm);
        });
        self.push(out, Some(back))
    }

    /// Batched 3x3 matrix inverse.
    pub fn mat3_inv(&mut self, mats: NodeId) -> NodeId {
        let vm = self.value_arc(mats);
        let ms = vm.shape().to_vec();
        assert_eq!(&ms[1..], &[3, 3]);
        let n = ms[0];
        let mut out = Arr::zeros(IxDyn(&ms));
        for ni in 0..n {
            let mut m = [[0.0f64; 3]; 3];
            for r in 0..3 {
                for c_ in 0..3 {
                    m[r][c_] = vm[[ni, r, c_]];
                }
            }
            let inv = invert3(&m).expect("singular matrix in mat3_inv");
            for r in 0..3 {
                for c_ in 0..3 {
                    out[[ni, r, c_]] = inv[r][c_];
                }
            }
        }
        let vy = std::sync::Arc::new(out.clone());
        let back: BackFn = Box::new(move |g, sink| {
            // d(A^-1) => grad_A = -A^-T G A^-T
            let mut gm = Arr::zeros(IxDyn(&ms));
            for ni in 0..n {
                let mut ainv = [[0.0f64; 3]; 3];
                let mut gi = [[0.0f64; 3]; 3];
                for r in 0..3 {
                    for c_ in 0..3 {
                        ainv[r][c_] = vy[[ni, r, c_]];
                        gi[r][c_] = g[[ni, r, c_]];
                    }
                }
                // t1 = A^-T * G ; out = -(t1 * A^-T)
                let mut t1 = [[0.0f64; 3]; 3];
                for r in 0..3 {
                    for c_ in 0..3 {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            acc += ainv[k][r] * gi[k][c_];
                        }
                        t1[r][c_] = acc;
                    }
                }
                for r in 0..3 {
                    for c_ in 0..3 {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            acc += t1[r][k] * ainv[c_][k];
                        }
                        gm[[ni, r, c_]] = -acc;
                    }
                }
            }
            sink.add(mats, gm);
        });
        self.push(out, Some(back))
    }

    /// Batched (N,3,3) x (N,3,3) product including constant matrices.
    pub fn mat3_mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bmm(a, b)
    }

    /// Broadcast a single constant 3x3 matrix to a batched (N,3,3) node.
    pub fn mat3_const(&mut self, m: [[f64; 3]; 3], n: usize) -> NodeId {
        let mut arr = Arr::zeros(IxDyn(&[n, 3, 3]));
        for ni in 0..n {
            for r in 0..3 {
                for c in 0..3 {
                    arr[[ni, r, c]] = m[r][c];
                }
            }
        }
        self.constant(arr)
    }
}

/// Plain 3x3 inverse used by both the op and homography utilities.
pub fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[2][1] * m[1][2])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut out = [[0.0f64; 3]; 3];
    out[0][0] = (m[1][1] * m[2][2] - m[2][1] * m[1][2]) * inv_det;
    out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    out[1][2] = (m[1][0] * m[0][2] - m[0][0] * m[1][2]) * inv_det;
    out[2][0] = (m[1][0] * m[2][1] - m[2][0] * m[1][1]) * inv_det;
    out[2][1] = (m[2][0] * m[0][1] - m[0][0] * m[2][1]) * inv_det;
    out[2][2] = (m[0][0] * m[1][1] - m[1][0] * m[0][1]) * inv_det;
    Some(out)
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[2][1] * m[1][2])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0f64; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

