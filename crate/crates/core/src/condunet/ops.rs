//! Layer primitives for the conditional U-Net: 2D convolution via
//! im2col + GEMM, group normalization, SiLU, 2x2 average pooling, nearest
//! upsampling, and the per-channel embedding gate. Every forward has a
//! matching backward; all functions are pure and single-threaded.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis, NdFloat};

pub fn fl<F: NdFloat>(x: f64) -> F {
    F::from(x).unwrap()
}

/// Unfold into (Cin*K*K, OH*OW) patch columns, zero padding.
fn im2col<F: NdFloat>(x: &Array3<F>, k: usize, pad: usize) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut cols = Array2::<F>::zeros((c_in * k * k, oh * ow));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (c * k + ky) * k + kx;
                let mut row = cols.row_mut(row_idx);
                let ox_start = pad.saturating_sub(kx);
                let ox_end = (w + pad).saturating_sub(kx).min(ow);
                if ox_start >= ox_end {
                    continue;
                }
                let ix_start = ox_start + kx - pad;
                let len = ox_end - ox_start;
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![c, iy as usize, ix_start..ix_start + len]);
                    let mut dst = row.slice_mut(s![oy * ow + ox_start..oy * ow + ox_start + len]);
                    dst.assign(&src);
                }
            }
        }
    }
    cols
}

/// Fold patch-column gradients back to the input, accumulating overlaps.
fn col2im<F: NdFloat>(
    cols: &Array2<F>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Array3<F> {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut x = Array3::<F>::zeros((c_in, h, w));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (c * k + ky) * k + kx;
                let row = cols.row(row_idx);
                let ox_start = pad.saturating_sub(kx);
                let ox_end = (w + pad).saturating_sub(kx).min(ow);
                if ox_start >= ox_end {
                    continue;
                }
                let ix_start = ox_start + kx - pad;
                let len = ox_end - ox_start;
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = row.slice(s![oy * ow + ox_start..oy * ow + ox_start + len]);
                    let mut dst = x.slice_mut(s![c, iy as usize, ix_start..ix_start + len]);
                    dst.zip_mut_with(&src, |d, &v| *d += v);
                }
            }
        }
    }
    x
}

/// Same-size convolution, stride 1, odd kernel, zero padding (k-1)/2.
pub fn conv2d_forward<F: NdFloat>(x: &Array3<F>, weight: &Array4<F>, bias: &Array1<F>) -> Array3<F> {
    let (c_out, c_in, k, _) = weight.dim();
    debug_assert_eq!(c_in, x.dim().0);
    let pad = (k - 1) / 2;
    let (_, h, w) = x.dim();
    let cols = im2col(x, k, pad);
    let w_mat = weight
        .view()
        .into_shape_with_order((c_out, c_in * k * k))
        .unwrap();
    let mut y = w_mat.dot(&cols);
    for (mut row, &b) in y.outer_iter_mut().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    y.into_shape_with_order((c_out, h, w)).unwrap()
}

/// Returns (dx, dweight, dbias).
pub fn conv2d_backward<F: NdFloat>(
    x: &Array3<F>,
    weight: &Array4<F>,
    dy: &Array3<F>,
) -> (Array3<F>, Array4<F>, Array1<F>) {
    let (c_out, c_in, k, _) = weight.dim();
    let pad = (k - 1) / 2;
    let (_, h, w) = x.dim();
    let cols = im2col(x, k, pad);
    let dy_mat = dy
        .view()
        .into_shape_with_order((c_out, h * w))
        .unwrap();
    let dw = dy_mat
        .dot(&cols.t())
        .into_shape_with_order((c_out, c_in, k, k))
        .unwrap();
    let db = dy_mat.sum_axis(Axis(1));
    let w_mat = weight
        .view()
        .into_shape_with_order((c_out, c_in * k * k))
        .unwrap();
    let dcols = w_mat.t().dot(&dy_mat);
    let dx = col2im(&dcols, c_in, h, w, k, pad);
    (dx, dw, db)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct GroupNormCache<F> {
    pub xhat: Array3<F>,
    pub inv_std: Vec<F>,
}

/// Group normalization over (C/G, H, W) per group, affine per channel.
pub fn groupnorm_forward<F: NdFloat>(
    x: &Array3<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    groups: usize,
) -> (Array3<F>, GroupNormCache<F>) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(c % groups, 0);
    let cg = c / groups;
    let n = fl::<F>((cg * h * w) as f64);
    let eps = fl::<F>(GROUP_NORM_EPS);
    let mut xhat = Array3::<F>::zeros((c, h, w));
    let mut y = Array3::<F>::zeros((c, h, w));
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let range = g * cg..(g + 1) * cg;
        let sl = x.slice(s![range.clone(), .., ..]);
        let mean = sl.sum() / n;
        let var = sl.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        let mut xh = xhat.slice_mut(s![range.clone(), .., ..]);
        xh.assign(&sl);
        xh.mapv_inplace(|v| (v - mean) * is);
        for ci in range.clone() {
            let (gm, bt) = (gamma[ci], beta[ci]);
            let xh_c = xhat.slice(s![ci, .., ..]);
            let mut y_c = y.slice_mut(s![ci, .., ..]);
            y_c.assign(&xh_c);
            y_c.mapv_inplace(|v| v * gm + bt);
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub fn groupnorm_backward<F: NdFloat>(
    cache: &GroupNormCache<F>,
    gamma: &Array1<F>,
    groups: usize,
    dy: &Array3<F>,
) -> (Array3<F>, Array1<F>, Array1<F>) {
    let (c, h, w) = dy.dim();
    let cg = c / groups;
    let n = fl::<F>((cg * h * w) as f64);
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    for ci in 0..c {
        let dy_c = dy.slice(s![ci, .., ..]);
        let xh_c = cache.xhat.slice(s![ci, .., ..]);
        dgamma[ci] = (&dy_c * &xh_c).sum();
        dbeta[ci] = dy_c.sum();
    }
    let mut dx = Array3::<F>::zeros((c, h, w));
    for g in 0..groups {
        let range = g * cg..(g + 1) * cg;
        let mut dxhat = dy.slice(s![range.clone(), .., ..]).to_owned();
        for (local, ci) in range.clone().enumerate() {
            let gm = gamma[ci];
            dxhat.slice_mut(s![local, .., ..]).mapv_inplace(|v| v * gm);
        }
        let xh = cache.xhat.slice(s![range.clone(), .., ..]);
        let sum_dxhat = dxhat.sum();
        let sum_dxhat_xhat = (&dxhat * &xh).sum();
        let is = cache.inv_std[g];
        let mut dst = dx.slice_mut(s![range, .., ..]);
        ndarray::Zip::from(&mut dst)
            .and(&dxhat)
            .and(&xh)
            .for_each(|d, &dxh, &xhv| {
                *d = is * (dxh - (sum_dxhat + xhv * sum_dxhat_xhat) / n);
            });
    }
    (dx, dgamma, dbeta)
}

fn sigmoid<F: NdFloat>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu_forward<F: NdFloat>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<F: NdFloat>(x: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d = *d * s * (F::one() + v * (F::one() - s));
    });
    dx
}

pub fn avgpool2_forward<F: NdFloat>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let quarter = fl::<F>(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, i, j)| {
        (x[(ci, 2 * i, 2 * j)]
            + x[(ci, 2 * i, 2 * j + 1)]
            + x[(ci, 2 * i + 1, 2 * j)]
            + x[(ci, 2 * i + 1, 2 * j + 1)])
            * quarter
    })
}

pub fn avgpool2_backward<F: NdFloat>(dy: &Array3<F>, h: usize, w: usize) -> Array3<F> {
    let (c, _, _) = dy.dim();
    let quarter = fl::<F>(0.25);
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| dy[(ci, i / 2, j / 2)] * quarter)
}

pub fn upsample2_forward<F: NdFloat>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, i, j)| x[(ci, i / 2, j / 2)])
}

pub fn upsample2_backward<F: NdFloat>(dy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| {
        dy[(ci, 2 * i, 2 * j)]
            + dy[(ci, 2 * i, 2 * j + 1)]
            + dy[(ci, 2 * i + 1, 2 * j)]
            + dy[(ci, 2 * i + 1, 2 * j + 1)]
    })
}

/// Per-channel multiplier from the embedding: g = bias + weight . e.
pub fn gate_multipliers<F: NdFloat>(
    weight: &Array2<F>,
    bias: &Array1<F>,
    embedding: &ndarray::ArrayView1<F>,
) -> Array1<F> {
    weight.dot(embedding) + bias
}

pub fn gate_forward<F: NdFloat>(x: &Array3<F>, g: &Array1<F>) -> Array3<F> {
    let mut y = x.clone();
    for (ci, &gc) in g.iter().enumerate() {
        y.slice_mut(s![ci, .., ..]).mapv_inplace(|v| v * gc);
    }
    y
}

/// Returns (dx, dg) where dg feeds the affine projection gradients.
pub fn gate_backward<F: NdFloat>(
    x: &Array3<F>,
    g: &Array1<F>,
    dy: &Array3<F>,
) -> (Array3<F>, Array1<F>) {
    let c = x.dim().0;
    let mut dx = dy.clone();
    let mut dg = Array1::<F>::zeros(c);
    for ci in 0..c {
        let gc = g[ci];
        dx.slice_mut(s![ci, .., ..]).mapv_inplace(|v| v * gc);
        dg[ci] = (&dy.slice(s![ci, .., ..]) * &x.slice(s![ci, .., ..])).sum();
    }
    (dx, dg)
}
