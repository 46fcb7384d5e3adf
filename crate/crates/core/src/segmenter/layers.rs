//! Dense CHW tensors and the handful of layers the segmenter uses, each with
//! its hand-written backward pass.

/// Channel-major (C, H, W) feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor buffer size");
        Tensor3 {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Offset range [lo, hi) of output coordinates whose input `coord + d` is in bounds.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

use std::cell::RefCell;

thread_local! {
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// Target patch-matrix width per chunk, in pixels; keeps the buffers cache resident.
const CHUNK_PIXELS: usize = 256;

fn chunk_rows(w: usize) -> usize {
    (CHUNK_PIXELS / w).max(1)
}

/// Unfolds image rows [r0, r1) of `x` into a (C·k·k, (r1-r0)·W) patch matrix
/// for a zero-padded "same" convolution. Row order matches the weight layout
/// [in][ky][kx].
fn im2col_rows(x: &Tensor3, k: usize, r0: usize, r1: usize, col: &mut Vec<f64>) {
    let (in_c, h, w) = (x.channels, x.height, x.width);
    let n = (r1 - r0) * w;
    let pad = (k / 2) as isize;
    // every entry is written below, so stale contents never leak through
    col.resize(in_c * k * k * n, 0.0);
    for i in 0..in_c {
        let iplane = x.plane(i);
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(w, dx);
                let row = &mut col[((i * k + ky) * k + kx) * n..][..n];
                for y in r0..r1 {
                    let seg = &mut row[(y - r0) * w..][..w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = (sy as usize * w) as isize + x0 as isize + dx;
                    seg[..x0].fill(0.0);
                    seg[x0..x1].copy_from_slice(&iplane[src as usize..][..x1 - x0]);
                    seg[x1..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: adds a patch-matrix gradient onto `out`.
fn col2im_rows(col: &[f64], k: usize, r0: usize, r1: usize, out: &mut Tensor3) {
    let (in_c, h, w) = (out.channels, out.height, out.width);
    let n = (r1 - r0) * w;
    let pad = (k / 2) as isize;
    for i in 0..in_c {
        let oplane = out.plane_mut(i);
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(w, dx);
                let row = &col[((i * k + ky) * k + kx) * n..][..n];
                for y in y0.max(r0)..y1.min(r1) {
                    let dst = ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                    let src = (y - r0) * w;
                    let drow = &mut oplane[dst as usize..][..x1 - x0];
                    for (d, g) in drow.iter_mut().zip(&row[src + x0..src + x1]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Strided view of a row-major matrix: (data, row stride, column stride).
type View<'a> = (&'a [f64], isize, isize);

/// C = A·B + beta·C on strided views; `c` is written with row stride `ldc`.
fn gemm(m: usize, kd: usize, n: usize, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    };
    assert!(a.0.len() >= extent(m, kd, a.1, a.2));
    assert!(b.0.len() >= extent(kd, n, b.1, b.2));
    assert!(c.len() >= extent(m, n, ldc as isize, 1));
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m, kd, n, 1.0,
            a.0.as_ptr(), a.1, a.2,
            b.0.as_ptr(), b.1, b.2,
            beta, c.as_mut_ptr(), ldc as isize, 1,
        );
    }
}

/// Zero-padded "same" convolution with an odd square kernel.
/// Weight layout: [out][in][ky][kx].
pub fn conv_forward(x: &Tensor3, weights: &[f64], bias: &[f64], out_c: usize, k: usize) -> Tensor3 {
    let (in_c, h, w) = (x.channels, x.height, x.width);
    debug_assert_eq!(weights.len(), out_c * in_c * k * k);
    let n = h * w;
    let kd = in_c * k * k;
    let mut out = Tensor3::zeros(out_c, h, w);
    for o in 0..out_c {
        out.plane_mut(o).fill(bias[o]);
    }
    let wv: View<'_> = (weights, kd as isize, 1);
    if k == 1 {
        gemm(out_c, in_c, n, wv, (&x.data, n as isize, 1), 1.0, &mut out.data, n);
        return out;
    }
    SCRATCH.with(|s| {
        let col = &mut s.borrow_mut().0;
        let step = chunk_rows(w);
        for r0 in (0..h).step_by(step) {
            let r1 = (r0 + step).min(h);
            let cn = (r1 - r0) * w;
            im2col_rows(x, k, r0, r1, col);
            gemm(out_c, kd, cn, wv, (col, cn as isize, 1), 1.0, &mut out.data[r0 * w..], n);
        }
    });
    out
}

/// Gradients of [`conv_forward`]: accumulates into `dw`/`db` and returns the
/// input gradient when `need_dx`.
pub fn conv_backward(
    x: &Tensor3,
    weights: &[f64],
    dout: &Tensor3,
    k: usize,
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Option<Tensor3> {
    let (in_c, h, w) = (x.channels, x.height, x.width);
    let out_c = dout.channels;
    let n = h * w;
    let kd = in_c * k * k;
    for o in 0..out_c {
        db[o] += dout.plane(o).iter().sum::<f64>();
    }
    let wt: View<'_> = (weights, 1, kd as isize);
    if k == 1 {
        gemm(out_c, n, in_c, (&dout.data, n as isize, 1), (&x.data, 1, n as isize), 1.0, dw, in_c);
        return need_dx.then(|| {
            let mut dx = Tensor3::zeros(in_c, h, w);
            gemm(in_c, out_c, n, wt, (&dout.data, n as isize, 1), 0.0, &mut dx.data, n);
            dx
        });
    }
    let mut dx = need_dx.then(|| Tensor3::zeros(in_c, h, w));
    SCRATCH.with(|s| {
        let (col, dcol) = &mut *s.borrow_mut();
        let step = chunk_rows(w);
        for r0 in (0..h).step_by(step) {
            let r1 = (r0 + step).min(h);
            let cn = (r1 - r0) * w;
            let g: View<'_> = (&dout.data[r0 * w..], n as isize, 1);
            im2col_rows(x, k, r0, r1, col);
            gemm(out_c, cn, kd, g, (col, 1, cn as isize), 1.0, dw, kd);
            if let Some(dxt) = dx.as_mut() {
                // overwritten by the beta = 0 product
                dcol.resize(kd * cn, 0.0);
                gemm(kd, out_c, cn, wt, g, 0.0, dcol, cn);
                col2im_rows(dcol, k, r0, r1, dxt);
            }
        }
    });
    dx
}

/// ReLU with an explicit on/off pattern.
pub fn relu_with(z: &Tensor3, active: &[bool]) -> Tensor3 {
    let data = z
        .data
        .iter()
        .zip(active)
        .map(|(&v, &a)| if a { v } else { 0.0 })
        .collect();
    Tensor3 {
        channels: z.channels,
        height: z.height,
        width: z.width,
        data,
    }
}

pub fn relu_pattern(z: &Tensor3) -> Vec<bool> {
    z.data.iter().map(|&v| v > 0.0).collect()
}

pub fn relu_backward(da: &mut Tensor3, active: &[bool]) {
    for (g, &a) in da.data.iter_mut().zip(active) {
        if !a {
            *g = 0.0;
        }
    }
}

/// 2×2 stride-2 max pool; returns the pooled map and, per output, the flat
/// in-plane index of the winning input (first maximum in scan order).
pub fn maxpool2_forward(x: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (c, h, w) = (x.channels, x.height, x.width);
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.plane(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                for &cand in &cands[1..] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    (maxpool2_gather(x, &idx), idx)
}

/// Pool using fixed winner indices.
pub fn maxpool2_gather(x: &Tensor3, idx: &[usize]) -> Tensor3 {
    let (c, oh, ow) = (x.channels, x.height / 2, x.width / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let n = oh * ow;
    for ch in 0..c {
        let plane = x.plane(ch);
        for (o, &i) in out.plane_mut(ch).iter_mut().zip(&idx[ch * n..(ch + 1) * n]) {
            *o = plane[i];
        }
    }
    out
}

pub fn maxpool2_backward(dout: &Tensor3, idx: &[usize], in_h: usize, in_w: usize) -> Tensor3 {
    let mut dx = Tensor3::zeros(dout.channels, in_h, in_w);
    let n = dout.plane_len();
    for ch in 0..dout.channels {
        let g = dout.plane(ch);
        let d = dx.plane_mut(ch);
        for (gv, &i) in g.iter().zip(&idx[ch * n..(ch + 1) * n]) {
            d[i] += gv;
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = (x.channels, x.height, x.width);
    let mut out = Tensor3::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..2 * h {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * 2 * w..(y + 1) * 2 * w];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Tensor3) -> Tensor3 {
    let (c, h, w) = (dout.channels, dout.height / 2, dout.width / 2);
    let mut dx = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        let g = dout.plane(ch);
        let d = dx.plane_mut(ch);
        for y in 0..2 * h {
            for x in 0..2 * w {
                d[(y / 2) * w + x / 2] += g[y * 2 * w + x];
            }
        }
    }
    dx
}
