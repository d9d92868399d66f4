//! Slice-level numeric kernels shared by the graph ops.
//!
//! Convolution lowers each sample to an im2col matrix and accumulates
//! `out[r, t] += w[r, j] * col[j, t]` with `j` ascending, starting from zero.
//! That is the same per-element summation order as a direct
//! `for ci { for k { acc += w * x } }` loop, so results match a naive
//! convolution bit for bit.

const TILE: usize = 128;
const ROWS: usize = 4;

/// `out[rows x ncols] = w[rows x kdim] * col[kdim x ncols]`, overwriting `out`.
pub(crate) fn matmul_rows(out: &mut [f32], w: &[f32], col: &[f32], rows: usize, kdim: usize, ncols: usize) {
    debug_assert_eq!(out.len(), rows * ncols);
    debug_assert_eq!(w.len(), rows * kdim);
    debug_assert_eq!(col.len(), kdim * ncols);
    let mut acc = [[0.0f32; TILE]; ROWS];
    let mut t0 = 0;
    while t0 < ncols {
        let tb = TILE.min(ncols - t0);
        let mut r0 = 0;
        while r0 < rows {
            let rb = ROWS.min(rows - r0);
            for a in acc.iter_mut().take(rb) {
                a[..tb].iter_mut().for_each(|x| *x = 0.0);
            }
            for j in 0..kdim {
                let c = &col[j * ncols + t0..j * ncols + t0 + tb];
                for (r, a) in acc.iter_mut().enumerate().take(rb) {
                    let wv = w[(r0 + r) * kdim + j];
                    for (x, &cv) in a[..tb].iter_mut().zip(c) {
                        *x += wv * cv;
                    }
                }
            }
            for (r, a) in acc.iter().enumerate().take(rb) {
                let o = (r0 + r) * ncols + t0;
                out[o..o + tb].copy_from_slice(&a[..tb]);
            }
            r0 += rb;
        }
        t0 += tb;
    }
}

/// Dot product with a fixed 8-lane reduction order.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + tail
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub lout: usize,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    pub fn kdim(&self) -> usize {
        self.cin_g() * self.k
    }
}

/// im2col for one group of one sample: `col[(ci*k + kk)*lout + t]`.
fn im2col(x: &[f32], g: &ConvGeom, group: usize, col: &mut [f32]) {
    let cg = g.cin_g();
    for ci in 0..cg {
        let row = &x[(group * cg + ci) * g.len..(group * cg + ci + 1) * g.len];
        for kk in 0..g.k {
            let dst = &mut col[(ci * g.k + kk) * g.lout..(ci * g.k + kk + 1) * g.lout];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * g.stride + kk) as isize - g.pad as isize;
                *d = if pos >= 0 && (pos as usize) < g.len { row[pos as usize] } else { 0.0 };
            }
        }
    }
}

fn col2im_add(dcol: &[f32], g: &ConvGeom, group: usize, dx: &mut [f32]) {
    let cg = g.cin_g();
    for ci in 0..cg {
        let row = &mut dx[(group * cg + ci) * g.len..(group * cg + ci + 1) * g.len];
        for kk in 0..g.k {
            let src = &dcol[(ci * g.k + kk) * g.lout..(ci * g.k + kk + 1) * g.lout];
            for (t, &s) in src.iter().enumerate() {
                let pos = (t * g.stride + kk) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.len {
                    row[pos as usize] += s;
                }
            }
        }
    }
}

/// Forward convolution of one sample. `out` has `cout * lout` elements.
pub(crate) fn conv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom, out: &mut [f32]) {
    let (og, kdim) = (g.cout_g(), g.kdim());
    let mut col = vec![0.0f32; kdim * g.lout];
    for grp in 0..g.groups {
        im2col(x, g, grp, &mut col);
        let wg = &w[grp * og * kdim..(grp + 1) * og * kdim];
        let og_out = &mut out[grp * og * g.lout..(grp + 1) * og * g.lout];
        matmul_rows(og_out, wg, &col, og, kdim, g.lout);
    }
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(g.lout).enumerate() {
            row.iter_mut().for_each(|v| *v += b[co]);
        }
    }
}

/// Backward of one sample: returns (dx, dw) for that sample.
pub(crate) fn conv_backward(x: &[f32], w: &[f32], gout: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let (og, kdim) = (g.cout_g(), g.kdim());
    let mut dx = vec![0.0f32; g.cin * g.len];
    let mut dw = vec![0.0f32; g.cout * kdim];
    let mut col = vec![0.0f32; kdim * g.lout];
    let mut dcol = vec![0.0f32; kdim * g.lout];
    let mut wt = vec![0.0f32; kdim * og];
    for grp in 0..g.groups {
        im2col(x, g, grp, &mut col);
        let wg = &w[grp * og * kdim..(grp + 1) * og * kdim];
        let gg = &gout[grp * og * g.lout..(grp + 1) * og * g.lout];
        for co in 0..og {
            for j in 0..kdim {
                wt[j * og + co] = wg[co * kdim + j];
            }
        }
        matmul_rows(&mut dcol, &wt, gg, kdim, og, g.lout);
        col2im_add(&dcol, g, grp, &mut dx);
        let dwg = &mut dw[grp * og * kdim..(grp + 1) * og * kdim];
        for co in 0..og {
            let grow = &gg[co * g.lout..(co + 1) * g.lout];
            for j in 0..kdim {
                dwg[co * kdim + j] = dot(grow, &col[j * g.lout..(j + 1) * g.lout]);
            }
        }
    }
    (dx, dw)
}
