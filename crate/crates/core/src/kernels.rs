//! Slice-level compute kernels behind the graph operations.

use crate::tensor::{gemm, MatRef, Scalar};

/// Geometry of a same-padded, stride-1 convolution over one batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds one sample `(C, H, W)` into `(C*k*k, H*W)` columns with zero padding.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Folds column gradients back onto one sample, accumulating into `gx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for c in 0..g.cin {
        let plane = &mut gx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let hw = g.hw();
    let patch = g.patch();
    let mut cols = if g.k == 1 { Vec::new() } else { vec![T::zero(); patch * hw] };
    let wmat = MatRef::row_major(weight, g.cout, patch);
    for n in 0..g.n {
        let xn = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        let on = &mut out[n * g.cout * hw..(n + 1) * g.cout * hw];
        let colmat = if g.k == 1 {
            MatRef::row_major(xn, patch, hw)
        } else {
            im2col(xn, g, &mut cols);
            MatRef::row_major(&cols, patch, hw)
        };
        let beta = match bias {
            Some(b) => {
                for (co, row) in on.chunks_exact_mut(hw).enumerate() {
                    row.fill(b[co]);
                }
                T::one()
            }
            None => T::zero(),
        };
        gemm(T::one(), wmat, colmat, beta, on);
    }
}

/// Accumulates gradients of a convolution into whichever buffers are given.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let hw = g.hw();
    let patch = g.patch();
    let need_cols = gw.is_some() && g.k != 1;
    let mut cols = if need_cols { vec![T::zero(); patch * hw] } else { Vec::new() };
    let mut gcols = if gx.is_some() && g.k != 1 { vec![T::zero(); patch * hw] } else { Vec::new() };
    let wmat = MatRef::row_major(weight, g.cout, patch);
    for n in 0..g.n {
        let xn = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        let gon = &gout[n * g.cout * hw..(n + 1) * g.cout * hw];
        let gomat = MatRef::row_major(gon, g.cout, hw);
        if let Some(gb) = gb.as_deref_mut() {
            for (co, row) in gon.chunks_exact(hw).enumerate() {
                gb[co] = gb[co] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let colmat = if g.k == 1 {
                MatRef::row_major(xn, patch, hw)
            } else {
                im2col(xn, g, &mut cols);
                MatRef::row_major(&cols, patch, hw)
            };
            gemm(T::one(), gomat, colmat.t(), T::one(), gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxn = &mut gx[n * g.cin * hw..(n + 1) * g.cin * hw];
            if g.k == 1 {
                gemm(T::one(), wmat.t(), gomat, T::one(), gxn);
            } else {
                gemm(T::one(), wmat.t(), gomat, T::zero(), &mut gcols);
                col2im(&gcols, g, gxn);
            }
        }
    }
}

/// `(N, C, H, W) -> (N, 4C, H/2, W/2)`, channel `c*4 + 2*dy + dx`.
pub(crate) fn shuffle<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, out: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ch * 4 + 2 * dy + dx;
                    let dst = &mut out[(b * 4 * c + oc) * ho * wo..(b * 4 * c + oc + 1) * ho * wo];
                    for i in 0..ho {
                        let srow = &src[(2 * i + dy) * w..(2 * i + dy + 1) * w];
                        for j in 0..wo {
                            dst[i * wo + j] = srow[2 * j + dx];
                        }
                    }
                }
            }
        }
    }
}

/// Exact inverse of [`shuffle`]; `c` is the channel count of the shuffled input.
pub(crate) fn unshuffle<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, out: &mut [T]) {
    let co = c / 4;
    let (ho, wo) = (h * 2, w * 2);
    for b in 0..n {
        for ch in 0..co {
            let dst = &mut out[(b * co + ch) * ho * wo..(b * co + ch + 1) * ho * wo];
            for dy in 0..2 {
                for dx in 0..2 {
                    let ic = ch * 4 + 2 * dy + dx;
                    let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for i in 0..h {
                        let drow = &mut dst[(2 * i + dy) * wo..(2 * i + dy + 1) * wo];
                        for j in 0..w {
                            drow[2 * j + dx] = src[i * w + j];
                        }
                    }
                }
            }
        }
    }
}

/// Per-plane standardization; returns the inverse standard deviation of each plane.
pub(crate) fn instance_normalize<T: Scalar>(x: &[T], plane: usize, eps: T, out: &mut [T]) -> Vec<T> {
    let count = T::of(plane as f64);
    x.chunks_exact(plane)
        .zip(out.chunks_exact_mut(plane))
        .map(|(src, dst)| {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv
        })
        .collect()
}

/// Gradient of [`instance_normalize`] given its output `y`.
pub(crate) fn instance_normalize_backward<T: Scalar>(
    y: &[T],
    inv_std: &[T],
    gout: &[T],
    plane: usize,
    gx: &mut [T],
) {
    let count = T::of(plane as f64);
    for (((ys, gs), dst), &inv) in y
        .chunks_exact(plane)
        .zip(gout.chunks_exact(plane))
        .zip(gx.chunks_exact_mut(plane))
        .zip(inv_std)
    {
        let mean_g = gs.iter().copied().sum::<T>() / count;
        let mean_gy = gs.iter().zip(ys).map(|(&g, &y)| g * y).sum::<T>() / count;
        for ((d, &g), &yv) in dst.iter_mut().zip(gs).zip(ys) {
            *d = *d + inv * (g - mean_g - yv * mean_gy);
        }
    }
}

/// Maps each input position to the output position of a reduction over `axes`.
pub(crate) struct ReduceIndex {
    pub out_shape: Vec<usize>,
    map: Vec<usize>,
}

impl ReduceIndex {
    pub fn new(shape: &[usize], axes: &[usize]) -> Self {
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        // stride of each input dim in the output (0 for reduced dims)
        let mut out_strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for i in (0..shape.len()).rev() {
            if !axes.contains(&i) {
                out_strides[i] = acc;
                acc *= shape[i];
            }
        }
        let total: usize = shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&out_strides).map(|(a, b)| a * b).sum());
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { out_shape, map }
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn target(&self, i: usize) -> usize {
        self.map[i]
    }
}
