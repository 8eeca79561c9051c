//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] is an append-only arena of nodes; [`Var`] handles are indices
//! into it. Forward evaluation happens eagerly as ops are recorded;
//! [`Tape::backward`] then walks the arena in reverse insertion order and
//! accumulates cotangents. Everything is `f64` throughout so analytic
//! gradients can be compared against central finite differences at tight
//! tolerances.
//!
//! The op set is exactly what the models in this crate need: dense and
//! convolutional layers, row-wise softmax/layer-norm, bilinear grid sampling
//! (differentiable in the sample coordinates too, which deformable attention
//! offsets require), and a centered FFT-magnitude op for the spectral loss.

use crate::freq;
use crate::tensor::Tensor;
use std::cell::RefCell;

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    pub idx: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Max2(usize, usize),
    Min2(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    PowConst(usize, f64),
    Abs(usize),
    Clamp(usize, f64, f64),
    AddBroadcastRow(usize, usize),
    MulBroadcastCol(usize, usize),
    Matmul(usize, usize),
    MatmulNT(usize, usize),
    SoftmaxRows(usize),
    // masked entries produce output 0, which the shared softmax backward
    // rule handles without needing the mask again
    MaskedSoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    SumAll(usize),
    MeanAll(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    NearestUpsample(usize, usize),
    ChwToHwc(usize),
    BilinearSample {
        grid: usize,
        coords: usize,
    },
    SpectrumMag(usize),
}

struct Inner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

/// Append-only autodiff arena.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                ops: Vec::new(),
            }),
        }
    }

    /// Record an input node. Gradients reach every leaf; whether the caller
    /// uses them (parameters) or ignores them (data) is its business.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let idx = self.push(value, Op::Leaf);
        Var { tape: self, idx }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value_of(&self, v: Var<'_>) -> Tensor {
        self.inner.borrow().values[v.idx].clone()
    }

    fn push(&self, value: Tensor, op: Op) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.ops.push(op);
        inner.values.len() - 1
    }

    fn with_value<R>(&self, idx: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().values[idx])
    }

    fn with_values<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.values[a], &inner.values[b])
    }

    /// Reverse sweep from a scalar loss. Returns one cotangent per node
    /// (zero-initialized tensors are skipped: `None` means "no path").
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.values[loss.idx].len(),
            1,
            "backward needs a scalar loss"
        );
        let mut g: Vec<Option<Tensor>> = vec![None; inner.values.len()];
        g[loss.idx] = Some(Tensor::new(
            inner.values[loss.idx].shape.clone(),
            vec![1.0],
        ));
        for i in (0..=loss.idx).rev() {
            let gi = match &g[i] {
                Some(t) => t.clone(),
                None => continue,
            };
            backward_op(&inner.ops[i], i, &gi, &inner.values, &mut g);
        }
        Grads { g }
    }
}

/// Cotangents from one backward sweep.
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v` (zeros if no path exists).
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.g[v.idx] {
            Some(t) => t.clone(),
            None => Tensor::zeros(v.tape.with_value(v.idx, |t| t.shape.clone())),
        }
    }
}

fn acc(g: &mut [Option<Tensor>], idx: usize, shape: &[usize], delta: &[f64]) {
    match &mut g[idx] {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(delta.iter()) {
                *a += b;
            }
        }
        None => {
            g[idx] = Some(Tensor::new(shape.to_vec(), delta.to_vec()));
        }
    }
}

#[allow(clippy::too_many_lines)]
fn backward_op(op: &Op, i: usize, gi: &Tensor, values: &[Tensor], g: &mut [Option<Tensor>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(g, *a, &values[*a].shape, &gi.data);
            acc(g, *b, &values[*b].shape, &gi.data);
        }
        Op::Sub(a, b) => {
            acc(g, *a, &values[*a].shape, &gi.data);
            let neg: Vec<f64> = gi.data.iter().map(|v| -v).collect();
            acc(g, *b, &values[*b].shape, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*b].data.iter())
                .map(|(g, b)| g * b)
                .collect();
            let db: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*a].data.iter())
                .map(|(g, a)| g * a)
                .collect();
            acc(g, *a, &values[*a].shape, &da);
            acc(g, *b, &values[*b].shape, &db);
        }
        Op::Div(a, b) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*b].data.iter())
                .map(|(g, b)| g / b)
                .collect();
            let db: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*a].data.iter().zip(values[*b].data.iter()))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect();
            acc(g, *a, &values[*a].shape, &da);
            acc(g, *b, &values[*b].shape, &db);
        }
        Op::Max2(a, b) | Op::Min2(a, b) => {
            let is_max = matches!(op, Op::Max2(..));
            let mut da = vec![0.0; gi.data.len()];
            let mut db = vec![0.0; gi.data.len()];
            for k in 0..gi.data.len() {
                let (av, bv) = (values[*a].data[k], values[*b].data[k]);
                let a_wins = if is_max { av >= bv } else { av <= bv };
                if a_wins {
                    da[k] = gi.data[k];
                } else {
                    db[k] = gi.data[k];
                }
            }
            acc(g, *a, &values[*a].shape, &da);
            acc(g, *b, &values[*b].shape, &db);
        }
        Op::Neg(a) => {
            let da: Vec<f64> = gi.data.iter().map(|v| -v).collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::Scale(a, f) => {
            let da: Vec<f64> = gi.data.iter().map(|v| v * f).collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::AddScalar(a) => {
            acc(g, *a, &values[*a].shape, &gi.data);
        }
        Op::Relu(a) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*a].data.iter())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::Sigmoid(a) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[i].data.iter())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::Exp(a) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[i].data.iter())
                .map(|(g, y)| g * y)
                .collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::Ln(a) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*a].data.iter())
                .map(|(g, x)| g / x)
                .collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::Sqrt(a) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[i].data.iter())
                .map(|(g, y)| g / (2.0 * y))
                .collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::PowConst(a, p) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*a].data.iter())
                .map(|(g, x)| g * p * x.powf(p - 1.0))
                .collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::Abs(a) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*a].data.iter())
                .map(|(g, x)| g * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                .collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::Clamp(a, lo, hi) => {
            let da: Vec<f64> = gi
                .data
                .iter()
                .zip(values[*a].data.iter())
                .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                .collect();
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::AddBroadcastRow(a, bias) => {
            acc(g, *a, &values[*a].shape, &gi.data);
            let c = values[*bias].len();
            let mut db = vec![0.0; c];
            for (k, v) in gi.data.iter().enumerate() {
                db[k % c] += v;
            }
            acc(g, *bias, &values[*bias].shape, &db);
        }
        Op::MulBroadcastCol(a, s) => {
            let (r, c) = (values[*a].shape[0], values[*a].shape[1]);
            let mut da = vec![0.0; r * c];
            let mut ds = vec![0.0; r];
            for ri in 0..r {
                let sv = values[*s].data[ri];
                for ci in 0..c {
                    let k = ri * c + ci;
                    da[k] = gi.data[k] * sv;
                    ds[ri] += gi.data[k] * values[*a].data[k];
                }
            }
            acc(g, *a, &values[*a].shape, &da);
            acc(g, *s, &values[*s].shape, &ds);
        }
        Op::Matmul(a, b) => {
            // y = A·B with A [m,k], B [k,n]: dA = G·Bᵀ, dB = Aᵀ·G
            let (m, k) = (values[*a].shape[0], values[*a].shape[1]);
            let n = values[*b].shape[1];
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for mi in 0..m {
                for ni in 0..n {
                    let gv = gi.data[mi * n + ni];
                    if gv == 0.0 {
                        continue;
                    }
                    for ki in 0..k {
                        da[mi * k + ki] += gv * values[*b].data[ki * n + ni];
                        db[ki * n + ni] += gv * values[*a].data[mi * k + ki];
                    }
                }
            }
            acc(g, *a, &values[*a].shape, &da);
            acc(g, *b, &values[*b].shape, &db);
        }
        Op::MatmulNT(a, b) => {
            // y = A·Bᵀ with A [m,k], B [n,k]: dA = G·B, dB = Gᵀ·A
            let (m, k) = (values[*a].shape[0], values[*a].shape[1]);
            let n = values[*b].shape[0];
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; n * k];
            for mi in 0..m {
                for ni in 0..n {
                    let gv = gi.data[mi * n + ni];
                    if gv == 0.0 {
                        continue;
                    }
                    for ki in 0..k {
                        da[mi * k + ki] += gv * values[*b].data[ni * k + ki];
                        db[ni * k + ki] += gv * values[*a].data[mi * k + ki];
                    }
                }
            }
            acc(g, *a, &values[*a].shape, &da);
            acc(g, *b, &values[*b].shape, &db);
        }
        Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
            // dx_i = y_i·(g_i − Σ_j g_j·y_j) per row; masked entries have
            // y = 0 so the same formula covers both ops.
            let (r, c) = (values[i].shape[0], values[i].shape[1]);
            let mut da = vec![0.0; r * c];
            for ri in 0..r {
                let row = ri * c;
                let dot: f64 = (0..c)
                    .map(|ci| gi.data[row + ci] * values[i].data[row + ci])
                    .sum();
                for ci in 0..c {
                    da[row + ci] = values[i].data[row + ci] * (gi.data[row + ci] - dot);
                }
            }
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::LayerNormRows { x, gamma, beta, eps } => {
            let (r, c) = (values[*x].shape[0], values[*x].shape[1]);
            let mut dx = vec![0.0; r * c];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ri in 0..r {
                let row = &values[*x].data[ri * c..(ri + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let sigma = (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mu) / sigma).collect();
                let h: Vec<f64> = (0..c)
                    .map(|ci| gi.data[ri * c + ci] * values[*gamma].data[ci])
                    .collect();
                let mean_h = h.iter().sum::<f64>() / c as f64;
                let mean_hx = h
                    .iter()
                    .zip(xhat.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / c as f64;
                for ci in 0..c {
                    dx[ri * c + ci] = (h[ci] - mean_h - xhat[ci] * mean_hx) / sigma;
                    dgamma[ci] += gi.data[ri * c + ci] * xhat[ci];
                    dbeta[ci] += gi.data[ri * c + ci];
                }
            }
            acc(g, *x, &values[*x].shape, &dx);
            acc(g, *gamma, &values[*gamma].shape, &dgamma);
            acc(g, *beta, &values[*beta].shape, &dbeta);
        }
        Op::SumAll(a) => {
            let da = vec![gi.data[0]; values[*a].len()];
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::MeanAll(a) => {
            let n = values[*a].len() as f64;
            let da = vec![gi.data[0] / n; values[*a].len()];
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::ConcatCols(a, b) => {
            let (r, ca) = (values[*a].shape[0], values[*a].shape[1]);
            let cb = values[*b].shape[1];
            let mut da = vec![0.0; r * ca];
            let mut db = vec![0.0; r * cb];
            for ri in 0..r {
                for ci in 0..ca {
                    da[ri * ca + ci] = gi.data[ri * (ca + cb) + ci];
                }
                for ci in 0..cb {
                    db[ri * cb + ci] = gi.data[ri * (ca + cb) + ca + ci];
                }
            }
            acc(g, *a, &values[*a].shape, &da);
            acc(g, *b, &values[*b].shape, &db);
        }
        Op::SliceCols(a, lo, _hi) => {
            let (r, c) = (values[*a].shape[0], values[*a].shape[1]);
            let cs = gi.shape[1];
            let mut da = vec![0.0; r * c];
            for ri in 0..r {
                for ci in 0..cs {
                    da[ri * c + lo + ci] = gi.data[ri * cs + ci];
                }
            }
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::GatherRows(a, idx) => {
            let c = values[*a].shape[1];
            let mut da = vec![0.0; values[*a].len()];
            for (s, &src_row) in idx.iter().enumerate() {
                for ci in 0..c {
                    da[src_row * c + ci] += gi.data[s * c + ci];
                }
            }
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::Reshape(a) => {
            acc(g, *a, &values[*a].shape, &gi.data);
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (cin, h, wid) = (
                values[*x].shape[0],
                values[*x].shape[1],
                values[*x].shape[2],
            );
            let (cout, _, kh, kw) = (
                values[*w].shape[0],
                values[*w].shape[1],
                values[*w].shape[2],
                values[*w].shape[3],
            );
            let (ho, wo) = (gi.shape[1], gi.shape[2]);
            let mut dx = vec![0.0; values[*x].len()];
            let mut dw = vec![0.0; values[*w].len()];
            let mut db = vec![0.0; cout];
            for o in 0..cout {
                for hi in 0..ho {
                    for wi in 0..wo {
                        let gv = gi.data[(o * ho + hi) * wo + wi];
                        if gv == 0.0 {
                            continue;
                        }
                        db[o] += gv;
                        for ci in 0..cin {
                            for dy in 0..kh {
                                let y = (hi * stride + dy) as isize - *pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for dxk in 0..kw {
                                    let xx = (wi * stride + dxk) as isize - *pad as isize;
                                    if xx < 0 || xx >= wid as isize {
                                        continue;
                                    }
                                    let xi = (ci * h + y as usize) * wid + xx as usize;
                                    let wi_idx = ((o * cin + ci) * kh + dy) * kw + dxk;
                                    dw[wi_idx] += gv * values[*x].data[xi];
                                    dx[xi] += gv * values[*w].data[wi_idx];
                                }
                            }
                        }
                    }
                }
            }
            acc(g, *x, &values[*x].shape, &dx);
            acc(g, *w, &values[*w].shape, &dw);
            acc(g, *b, &values[*b].shape, &db);
        }
        Op::NearestUpsample(a, f) => {
            let (c, h, w) = (
                values[*a].shape[0],
                values[*a].shape[1],
                values[*a].shape[2],
            );
            let (hf, wf) = (h * f, w * f);
            let mut da = vec![0.0; values[*a].len()];
            for ci in 0..c {
                for y in 0..hf {
                    for x in 0..wf {
                        da[(ci * h + y / f) * w + x / f] += gi.data[(ci * hf + y) * wf + x];
                    }
                }
            }
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::ChwToHwc(a) => {
            let (c, h, w) = (
                values[*a].shape[0],
                values[*a].shape[1],
                values[*a].shape[2],
            );
            let mut da = vec![0.0; values[*a].len()];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        da[(ci * h + y) * w + x] = gi.data[(y * w + x) * c + ci];
                    }
                }
            }
            acc(g, *a, &values[*a].shape, &da);
        }
        Op::BilinearSample { grid, coords } => {
            let (h, w, d) = (
                values[*grid].shape[0],
                values[*grid].shape[1],
                values[*grid].shape[2],
            );
            let s = values[*coords].shape[0];
            let mut dgrid = vec![0.0; values[*grid].len()];
            let mut dcoords = vec![0.0; s * 2];
            for si in 0..s {
                let gx = values[*coords].data[si * 2] * (w - 1) as f64;
                let gy = values[*coords].data[si * 2 + 1] * (h - 1) as f64;
                let x0 = gx.floor() as isize;
                let y0 = gy.floor() as isize;
                let wx = gx - x0 as f64;
                let wy = gy - y0 as f64;
                let tap = |y: isize, x: isize, di: usize| -> f64 {
                    if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                        0.0
                    } else {
                        values[*grid].data[(y as usize * w + x as usize) * d + di]
                    }
                };
                let weights = [
                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                    (y0, x0 + 1, (1.0 - wy) * wx),
                    (y0 + 1, x0, wy * (1.0 - wx)),
                    (y0 + 1, x0 + 1, wy * wx),
                ];
                let mut dgx = 0.0;
                let mut dgy = 0.0;
                for di in 0..d {
                    let gv = gi.data[si * d + di];
                    if gv == 0.0 {
                        continue;
                    }
                    for (y, x, wgt) in weights {
                        if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                            dgrid[(y as usize * w + x as usize) * d + di] += gv * wgt;
                        }
                    }
                    // d(value)/dgx = (1−wy)(v01−v00) + wy(v11−v10), etc.
                    let (v00, v01) = (tap(y0, x0, di), tap(y0, x0 + 1, di));
                    let (v10, v11) = (tap(y0 + 1, x0, di), tap(y0 + 1, x0 + 1, di));
                    dgx += gv * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                    dgy += gv * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                }
                dcoords[si * 2] = dgx * (w - 1) as f64;
                dcoords[si * 2 + 1] = dgy * (h - 1) as f64;
            }
            acc(g, *grid, &values[*grid].shape, &dgrid);
            acc(g, *coords, &values[*coords].shape, &dcoords);
        }
        Op::SpectrumMag(a) => {
            // m = |FFT2(x)| (centered). dL/dx = Re(adjoint(g·X/m)), zero
            // where the magnitude vanishes.
            let (h, w) = (values[*a].shape[0], values[*a].shape[1]);
            let coeffs = freq::fft2_centered(&values[*a]);
            let cot: Vec<rustfft::num_complex::Complex64> = coeffs
                .iter()
                .zip(gi.data.iter())
                .map(|(x, &gv)| {
                    let m = x.norm();
                    if m < 1e-12 {
                        rustfft::num_complex::Complex64::new(0.0, 0.0)
                    } else {
                        x * (gv / m)
                    }
                })
                .collect();
            let back = freq::ifft2_unnormalized_from_centered(&cot, h, w);
            let da: Vec<f64> = back.iter().map(|c| c.re).collect();
            acc(g, *a, &values[*a].shape, &da);
        }
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.idx, |t| t.shape.clone())
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(*self)
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let value = self.tape.with_value(self.idx, f);
        let idx = self.tape.push(value, op);
        Var {
            tape: self.tape,
            idx,
        }
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
        op: Op,
    ) -> Var<'t> {
        let value = self.tape.with_values(self.idx, other.idx, f);
        let idx = self.tape.push(value, op);
        Var {
            tape: self.tape,
            idx,
        }
    }

    fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(a.shape, b.shape, "elementwise op needs matching shapes");
        Tensor::new(
            a.shape.clone(),
            a.data
                .iter()
                .zip(b.data.iter())
                .map(|(x, y)| f(*x, *y))
                .collect(),
        )
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| Self::zip(a, b, |x, y| x + y), Op::Add(self.idx, o.idx))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| Self::zip(a, b, |x, y| x - y), Op::Sub(self.idx, o.idx))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| Self::zip(a, b, |x, y| x * y), Op::Mul(self.idx, o.idx))
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| Self::zip(a, b, |x, y| x / y), Op::Div(self.idx, o.idx))
    }

    /// Elementwise maximum (ties route the gradient to `self`).
    pub fn max2(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| Self::zip(a, b, f64::max), Op::Max2(self.idx, o.idx))
    }

    /// Elementwise minimum (ties route the gradient to `self`).
    pub fn min2(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| Self::zip(a, b, f64::min), Op::Min2(self.idx, o.idx))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|a| a.map(|v| -v), Op::Neg(self.idx))
    }

    pub fn scale(self, f: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v * f), Op::Scale(self.idx, f))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v + c), Op::AddScalar(self.idx))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|a| a.map(|v| v.max(0.0)), Op::Relu(self.idx))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |a| a.map(|v| 1.0 / (1.0 + (-v).exp())),
            Op::Sigmoid(self.idx),
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(|a| a.map(f64::exp), Op::Exp(self.idx))
    }

    /// Natural log; the caller guarantees strictly positive inputs.
    pub fn ln(self) -> Var<'t> {
        self.unary(|a| a.map(f64::ln), Op::Ln(self.idx))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(|a| a.map(f64::sqrt), Op::Sqrt(self.idx))
    }

    pub fn powc(self, p: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v.powf(p)), Op::PowConst(self.idx, p))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(|a| a.map(f64::abs), Op::Abs(self.idx))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v.clamp(lo, hi)), Op::Clamp(self.idx, lo, hi))
    }

    /// `[R,C] + [C]` broadcast add (bias).
    pub fn add_broadcast_row(self, bias: Var<'t>) -> Var<'t> {
        self.binary(
            bias,
            |a, b| {
                let c = b.len();
                assert_eq!(a.shape[1], c);
                Tensor::new(
                    a.shape.clone(),
                    a.data
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v + b.data[k % c])
                        .collect(),
                )
            },
            Op::AddBroadcastRow(self.idx, bias.idx),
        )
    }

    /// Scale row `r` of a `[R,C]` tensor by `s[r]` (an `[R]` tensor).
    pub fn mul_broadcast_col(self, s: Var<'t>) -> Var<'t> {
        self.binary(
            s,
            |a, b| {
                let (r, c) = (a.shape[0], a.shape[1]);
                assert_eq!(b.len(), r);
                let mut out = a.clone();
                for ri in 0..r {
                    for ci in 0..c {
                        out.data[ri * c + ci] *= b.data[ri];
                    }
                }
                out
            },
            Op::MulBroadcastCol(self.idx, s.idx),
        )
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        self.binary(
            o,
            |a, b| {
                let (m, k) = (a.shape[0], a.shape[1]);
                assert_eq!(b.shape[0], k, "matmul inner dims");
                let n = b.shape[1];
                let mut out = vec![0.0; m * n];
                for mi in 0..m {
                    for ki in 0..k {
                        let av = a.data[mi * k + ki];
                        if av == 0.0 {
                            continue;
                        }
                        for ni in 0..n {
                            out[mi * n + ni] += av * b.data[ki * n + ni];
                        }
                    }
                }
                Tensor::new(vec![m, n], out)
            },
            Op::Matmul(self.idx, o.idx),
        )
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]` (row-by-row dot products).
    pub fn matmul_nt(self, o: Var<'t>) -> Var<'t> {
        self.binary(
            o,
            |a, b| {
                let (m, k) = (a.shape[0], a.shape[1]);
                assert_eq!(b.shape[1], k, "matmul_nt inner dims");
                let n = b.shape[0];
                let mut out = vec![0.0; m * n];
                for mi in 0..m {
                    for ni in 0..n {
                        let mut s = 0.0;
                        for ki in 0..k {
                            s += a.data[mi * k + ki] * b.data[ni * k + ki];
                        }
                        out[mi * n + ni] = s;
                    }
                }
                Tensor::new(vec![m, n], out)
            },
            Op::MatmulNT(self.idx, o.idx),
        )
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.unary(
            |a| {
                let (r, c) = (a.shape[0], a.shape[1]);
                let mut out = vec![0.0; r * c];
                for ri in 0..r {
                    let row = &a.data[ri * c..(ri + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for ci in 0..c {
                        out[ri * c + ci] = exps[ci] / z;
                    }
                }
                Tensor::new(a.shape.clone(), out)
            },
            Op::SoftmaxRows(self.idx),
        )
    }

    /// Row-wise softmax restricted to positions where `mask` is true;
    /// masked positions get probability 0.
    pub fn masked_softmax_rows(self, mask: &[bool]) -> Var<'t> {
        let mask_vec = mask.to_vec();
        self.unary(
            |a| {
                let (r, c) = (a.shape[0], a.shape[1]);
                assert_eq!(mask_vec.len(), r * c, "mask size");
                let mut out = vec![0.0; r * c];
                for ri in 0..r {
                    let mut mx = f64::NEG_INFINITY;
                    for ci in 0..c {
                        if mask_vec[ri * c + ci] {
                            mx = mx.max(a.data[ri * c + ci]);
                        }
                    }
                    let mut z = 0.0;
                    for ci in 0..c {
                        if mask_vec[ri * c + ci] {
                            let e = (a.data[ri * c + ci] - mx).exp();
                            out[ri * c + ci] = e;
                            z += e;
                        }
                    }
                    if z > 0.0 {
                        for ci in 0..c {
                            out[ri * c + ci] /= z;
                        }
                    }
                }
                Tensor::new(a.shape.clone(), out)
            },
            Op::MaskedSoftmaxRows(self.idx),
        )
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm_rows(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let gm = &inner.values[gamma.idx];
            let bt = &inner.values[beta.idx];
            let (r, c) = (a.shape[0], a.shape[1]);
            assert_eq!(gm.len(), c);
            assert_eq!(bt.len(), c);
            let mut out = vec![0.0; r * c];
            for ri in 0..r {
                let row = &a.data[ri * c..(ri + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let sigma = (var + eps).sqrt();
                for ci in 0..c {
                    out[ri * c + ci] = gm.data[ci] * (row[ci] - mu) / sigma + bt.data[ci];
                }
            }
            Tensor::new(a.shape.clone(), out)
        };
        let idx = self.tape.push(
            value,
            Op::LayerNormRows {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                eps,
            },
        );
        Var {
            tape: self.tape,
            idx,
        }
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(
            |a| Tensor::scalar(a.data.iter().sum()),
            Op::SumAll(self.idx),
        )
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(|a| Tensor::scalar(a.mean()), Op::MeanAll(self.idx))
    }

    pub fn concat_cols(self, o: Var<'t>) -> Var<'t> {
        self.binary(
            o,
            |a, b| {
                let (r, ca) = (a.shape[0], a.shape[1]);
                assert_eq!(b.shape[0], r, "concat_cols rows");
                let cb = b.shape[1];
                let mut out = Vec::with_capacity(r * (ca + cb));
                for ri in 0..r {
                    out.extend_from_slice(&a.data[ri * ca..(ri + 1) * ca]);
                    out.extend_from_slice(&b.data[ri * cb..(ri + 1) * cb]);
                }
                Tensor::new(vec![r, ca + cb], out)
            },
            Op::ConcatCols(self.idx, o.idx),
        )
    }

    pub fn slice_cols(self, lo: usize, hi: usize) -> Var<'t> {
        self.unary(
            |a| {
                let (r, c) = (a.shape[0], a.shape[1]);
                assert!(lo < hi && hi <= c, "slice_cols range");
                let mut out = Vec::with_capacity(r * (hi - lo));
                for ri in 0..r {
                    out.extend_from_slice(&a.data[ri * c + lo..ri * c + hi]);
                }
                Tensor::new(vec![r, hi - lo], out)
            },
            Op::SliceCols(self.idx, lo, hi),
        )
    }

    /// Pick rows by index (repeats allowed; gradients accumulate).
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let indices = idx.to_vec();
        self.unary(
            |a| {
                let c = a.shape[1];
                let mut out = Vec::with_capacity(indices.len() * c);
                for &r in &indices {
                    out.extend_from_slice(&a.data[r * c..(r + 1) * c]);
                }
                Tensor::new(vec![indices.len(), c], out)
            },
            Op::GatherRows(self.idx, idx.to_vec()),
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(shape.iter().product::<usize>(), a.len(), "reshape size");
                Tensor::new(shape.clone(), a.data.clone())
            },
            Op::Reshape(self.idx),
        )
    }

    /// 2-D convolution: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`,
    /// zero padding, stride ≥ 1; output `[Cout,Ho,Wo]`.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.values[self.idx];
            let wt = &inner.values[w.idx];
            let bt = &inner.values[b.idx];
            conv2d_forward(x, wt, bt, stride, pad)
        };
        let idx = self.tape.push(
            value,
            Op::Conv2d {
                x: self.idx,
                w: w.idx,
                b: b.idx,
                stride,
                pad,
            },
        );
        Var {
            tape: self.tape,
            idx,
        }
    }

    /// Nearest-neighbor upsampling of a `[C,H,W]` tensor by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'t> {
        self.unary(
            |a| {
                let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
                let (hf, wf) = (h * factor, w * factor);
                let mut out = vec![0.0; c * hf * wf];
                for ci in 0..c {
                    for y in 0..hf {
                        for x in 0..wf {
                            out[(ci * hf + y) * wf + x] =
                                a.data[(ci * h + y / factor) * w + x / factor];
                        }
                    }
                }
                Tensor::new(vec![c, hf, wf], out)
            },
            Op::NearestUpsample(self.idx, factor),
        )
    }

    /// Permute a `[C,H,W]` tensor to `[H,W,C]` layout.
    pub fn chw_to_hwc(self) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(a.shape.len(), 3, "chw_to_hwc needs a 3-D tensor");
                let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
                let mut out = vec![0.0; a.len()];
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            out[(y * w + x) * c + ci] = a.data[(ci * h + y) * w + x];
                        }
                    }
                }
                Tensor::new(vec![h, w, c], out)
            },
            Op::ChwToHwc(self.idx),
        )
    }

    /// Bilinear sampling of a `[H,W,D]` grid at `[S,2]` normalized (x, y)
    /// coordinates; `(0,0)` maps to the top-left cell center, `(1,1)` to the
    /// bottom-right. Out-of-bounds taps read zero. Differentiable in both
    /// the grid and the coordinates.
    pub fn bilinear_sample(self, coords: Var<'t>) -> Var<'t> {
        let value = {
            let inner = self.tape.inner.borrow();
            let grid = &inner.values[self.idx];
            let co = &inner.values[coords.idx];
            bilinear_forward(grid, co)
        };
        let idx = self.tape.push(
            value,
            Op::BilinearSample {
                grid: self.idx,
                coords: coords.idx,
            },
        );
        Var {
            tape: self.tape,
            idx,
        }
    }

    /// Centered FFT magnitude of an `[H,W]` plane.
    pub fn spectrum_mag(self) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(a.shape.len(), 2, "spectrum_mag needs a 2-D plane");
                let coeffs = freq::fft2_centered(a);
                Tensor::new(a.shape.clone(), coeffs.iter().map(|c| c.norm()).collect())
            },
            Op::SpectrumMag(self.idx),
        )
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wid) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, cin_w, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert_eq!(b.len(), cout, "conv2d bias length");
    assert!(stride >= 1);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wid + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for hi in 0..ho {
            for wi in 0..wo {
                let mut s = b.data[o];
                for ci in 0..cin {
                    for dy in 0..kh {
                        let y = (hi * stride + dy) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let xx = (wi * stride + dx) as isize - pad as isize;
                            if xx < 0 || xx >= wid as isize {
                                continue;
                            }
                            s += x.data[(ci * h + y as usize) * wid + xx as usize]
                                * w.data[((o * cin + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * ho + hi) * wo + wi] = s;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out)
}

fn bilinear_forward(grid: &Tensor, coords: &Tensor) -> Tensor {
    assert_eq!(grid.shape.len(), 3, "bilinear grid is [H,W,D]");
    assert_eq!(coords.shape.len(), 2, "bilinear coords are [S,2]");
    assert_eq!(coords.shape[1], 2);
    let (h, w, d) = (grid.shape[0], grid.shape[1], grid.shape[2]);
    let s = coords.shape[0];
    let mut out = vec![0.0; s * d];
    for si in 0..s {
        let gx = coords.data[si * 2] * (w - 1) as f64;
        let gy = coords.data[si * 2 + 1] * (h - 1) as f64;
        let x0 = gx.floor() as isize;
        let y0 = gy.floor() as isize;
        let wx = gx - x0 as f64;
        let wy = gy - y0 as f64;
        let tap = |y: isize, x: isize, di: usize| -> f64 {
            if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                0.0
            } else {
                grid.data[(y as usize * w + x as usize) * d + di]
            }
        };
        for di in 0..d {
            out[si * d + di] = (1.0 - wy) * (1.0 - wx) * tap(y0, x0, di)
                + (1.0 - wy) * wx * tap(y0, x0 + 1, di)
                + wy * (1.0 - wx) * tap(y0 + 1, x0, di)
                + wy * wx * tap(y0 + 1, x0 + 1, di);
        }
    }
    Tensor::new(vec![s, d], out)
}

/// Central finite-difference gradient of a scalar-valued function of a flat
/// parameter vector.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut buf = x.to_vec();
    for k in 0..x.len() {
        let orig = buf[k];
        buf[k] = orig + step;
        let fp = f(&buf);
        buf[k] = orig - step;
        let fm = f(&buf);
        buf[k] = orig;
        grad[k] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst relative disagreement between two gradient vectors; denominators
/// are floored to keep near-zero coordinates from dominating.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Check the tape gradient of `f(inputs)` (a scalar) against central
    /// finite differences for every coordinate of every input.
    fn grad_check(
        inputs: &[Tensor],
        tol: f64,
        f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    ) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(loss);
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[vi]);
            let numeric = fd_gradient(
                |x| {
                    let mut mod_inputs = inputs.to_vec();
                    mod_inputs[vi].data.copy_from_slice(x);
                    let tape = Tape::new();
                    let vars: Vec<Var> =
                        mod_inputs.iter().map(|t| tape.leaf(t.clone())).collect();
                    let loss = f(&tape, &vars);
                    tape.value_of(loss).data[0]
                },
                &input.data,
                1e-6,
            );
            let err = max_rel_err(&analytic.data, &numeric, 1e-6);
            assert!(err < tol, "input {vi}: max rel err {err}");
        }
    }

    fn rt(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
    }

    /// Positive random tensor bounded away from zero.
    fn rt_pos(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| 0.2 + rng.gen::<f64>()).collect())
    }

    /// Weighted sum against fixed pseudo-random coefficients, so every
    /// output coordinate influences the scalar differently.
    fn spread<'t>(v: Var<'t>) -> Var<'t> {
        let n: usize = v.shape().iter().product();
        let weights: Vec<f64> = (0..n).map(|k| 0.3 + 0.7 * ((k * 37 % 11) as f64) / 11.0).collect();
        let flat = v.reshape(vec![1, n]);
        let tape_weights = flat.tape.leaf(Tensor::new(vec![1, n], weights));
        flat.mul(tape_weights).sum()
    }

    #[test]
    fn elementwise_arithmetic_gradients() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = rt(&mut rng, vec![3, 4]);
        let b = rt_pos(&mut rng, vec![3, 4]);
        grad_check(&[a.clone(), b.clone()], 1e-5, |_, v| spread(v[0].add(v[1])));
        grad_check(&[a.clone(), b.clone()], 1e-5, |_, v| spread(v[0].sub(v[1])));
        grad_check(&[a.clone(), b.clone()], 1e-5, |_, v| spread(v[0].mul(v[1])));
        grad_check(&[a.clone(), b.clone()], 1e-5, |_, v| spread(v[0].div(v[1])));
        grad_check(&[a.clone()], 1e-5, |_, v| spread(v[0].neg()));
        grad_check(&[a.clone()], 1e-5, |_, v| spread(v[0].scale(-1.7)));
        grad_check(&[a], 1e-5, |_, v| spread(v[0].add_scalar(0.9)));
    }

    #[test]
    fn min_max_gradients() {
        let mut rng = StdRng::seed_from_u64(2);
        // keep operands separated so FD never straddles the tie point
        let a = rt(&mut rng, vec![4, 4]);
        let b = a.map(|v| v + if v > 0.0 { 0.5 } else { -0.5 });
        grad_check(&[a.clone(), b.clone()], 1e-5, |_, v| spread(v[0].max2(v[1])));
        grad_check(&[a, b], 1e-5, |_, v| spread(v[0].min2(v[1])));
    }

    #[test]
    fn nonlinearity_gradients() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = rt(&mut rng, vec![3, 5]);
        let pos = rt_pos(&mut rng, vec![3, 5]);
        grad_check(&[a.clone()], 1e-5, |_, v| spread(v[0].sigmoid()));
        grad_check(&[a.clone()], 1e-5, |_, v| spread(v[0].exp()));
        grad_check(&[pos.clone()], 1e-4, |_, v| spread(v[0].ln()));
        grad_check(&[pos.clone()], 1e-5, |_, v| spread(v[0].sqrt()));
        grad_check(&[pos], 1e-5, |_, v| spread(v[0].powc(1.7)));
        // keep relu/abs inputs away from the kink at 0
        let shifted = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        grad_check(&[shifted.clone()], 1e-5, |_, v| spread(v[0].relu()));
        grad_check(&[shifted.clone()], 1e-5, |_, v| spread(v[0].abs()));
        // clamp bounds far from any sample value
        grad_check(&[shifted], 1e-5, |_, v| spread(v[0].clamp(-0.9, 0.9)));
    }

    #[test]
    fn broadcast_gradients() {
        let mut rng = StdRng::seed_from_u64(4);
        let a = rt(&mut rng, vec![3, 4]);
        let bias = rt(&mut rng, vec![4]);
        let s = rt(&mut rng, vec![3]);
        grad_check(&[a.clone(), bias], 1e-5, |_, v| {
            spread(v[0].add_broadcast_row(v[1]))
        });
        grad_check(&[a, s], 1e-5, |_, v| spread(v[0].mul_broadcast_col(v[1])));
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = rt(&mut rng, vec![3, 4]);
        let b = rt(&mut rng, vec![4, 2]);
        let c = rt(&mut rng, vec![5, 4]);
        grad_check(&[a.clone(), b], 1e-5, |_, v| spread(v[0].matmul(v[1])));
        grad_check(&[a, c], 1e-5, |_, v| spread(v[0].matmul_nt(v[1])));
    }

    #[test]
    fn softmax_gradients() {
        let mut rng = StdRng::seed_from_u64(6);
        let a = rt(&mut rng, vec![3, 5]);
        grad_check(&[a.clone()], 1e-4, |_, v| spread(v[0].softmax_rows()));
        let mask: Vec<bool> = (0..15).map(|k| k % 3 != 1).collect();
        grad_check(&[a], 1e-4, |_, v| spread(v[0].masked_softmax_rows(&mask)));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = rt(&mut rng, vec![4, 6]);
        let gamma = rt_pos(&mut rng, vec![6]);
        let beta = rt(&mut rng, vec![6]);
        grad_check(&[x, gamma, beta], 1e-4, |_, v| {
            spread(v[0].layer_norm_rows(v[1], v[2], 1e-5))
        });
    }

    #[test]
    fn reduction_gradients() {
        let mut rng = StdRng::seed_from_u64(8);
        let a = rt(&mut rng, vec![3, 4]);
        grad_check(&[a.clone()], 1e-5, |_, v| v[0].sum());
        grad_check(&[a], 1e-5, |_, v| v[0].mean());
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = rt(&mut rng, vec![3, 4]);
        let b = rt(&mut rng, vec![3, 2]);
        grad_check(&[a.clone(), b], 1e-5, |_, v| spread(v[0].concat_cols(v[1])));
        grad_check(&[a.clone()], 1e-5, |_, v| spread(v[0].slice_cols(1, 3)));
        grad_check(&[a.clone()], 1e-5, |_, v| {
            spread(v[0].gather_rows(&[2, 0, 2]))
        });
        grad_check(&[a], 1e-5, |_, v| spread(v[0].reshape(vec![4, 3])));
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = rt(&mut rng, vec![2, 5, 5]);
        let w = rt(&mut rng, vec![3, 2, 3, 3]);
        let b = rt(&mut rng, vec![3]);
        // stride 1 with padding
        grad_check(&[x.clone(), w.clone(), b.clone()], 1e-4, |_, v| {
            spread(v[0].conv2d(v[1], v[2], 1, 1))
        });
        // stride 2, no padding — 5x5 with 3x3 kernel gives 2x2
        grad_check(&[x, w, b], 1e-4, |_, v| {
            spread(v[0].conv2d(v[1], v[2], 2, 0))
        });
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x3x3 input, single 2x2 kernel, stride 1, no pad
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(
            vec![1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let w = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]));
        let b = tape.leaf(Tensor::new(vec![1], vec![0.5]));
        let y = x.conv2d(w, b, 1, 0);
        // y[i,j] = x[i,j] − x[i+1,j+1] + 0.5 = −4 + 0.5
        assert_eq!(y.value().data, vec![-3.5; 4]);
    }

    #[test]
    fn upsample_gradients() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = rt(&mut rng, vec![2, 3, 3]);
        grad_check(&[a.clone()], 1e-5, |_, v| spread(v[0].upsample_nearest(2)));
        let up = {
            let tape = Tape::new();
            let v = tape.leaf(a.clone());
            v.upsample_nearest(2).value()
        };
        assert_eq!(up.shape, vec![2, 6, 6]);
        assert_eq!(up.data[(0 * 6 + 1) * 6 + 1], a.data[0]);
    }

    #[test]
    fn chw_to_hwc_permutes_and_backpropagates() {
        let mut rng = StdRng::seed_from_u64(31);
        let a = rt(&mut rng, vec![3, 2, 4]);
        grad_check(&[a.clone()], 1e-5, |_, v| spread(v[0].chw_to_hwc()));
        let tape = Tape::new();
        let hwc = tape.leaf(a.clone()).chw_to_hwc().value();
        assert_eq!(hwc.shape, vec![2, 4, 3]);
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..4 {
                    assert_eq!(hwc.data[(y * 4 + x) * 3 + c], a.data[(c * 2 + y) * 4 + x]);
                }
            }
        }
    }

    #[test]
    fn bilinear_sample_gradients() {
        let mut rng = StdRng::seed_from_u64(12);
        let grid = rt(&mut rng, vec![4, 5, 3]);
        // coordinates strictly interior and away from the integer lattice
        let coords = Tensor::new(
            vec![3, 2],
            vec![0.137, 0.611, 0.433, 0.268, 0.779, 0.901],
        );
        grad_check(&[grid, coords], 1e-4, |_, v| {
            spread(v[0].bilinear_sample(v[1]))
        });
    }

    #[test]
    fn bilinear_sample_interpolates_exactly_on_a_linear_field() {
        // grid[y][x] = 2x + 3y is reproduced exactly by bilinear weights
        let mut grid = Tensor::zeros(vec![3, 3, 1]);
        for y in 0..3 {
            for x in 0..3 {
                grid.data[y * 3 + x] = 2.0 * x as f64 + 3.0 * y as f64;
            }
        }
        let tape = Tape::new();
        let g = tape.leaf(grid);
        let coords = tape.leaf(Tensor::new(vec![1, 2], vec![0.25, 0.75]));
        let out = g.bilinear_sample(coords).value();
        // gx = 0.5, gy = 1.5 → 2·0.5 + 3·1.5 = 5.5
        assert!((out.data[0] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_taps_read_zero() {
        let tape = Tape::new();
        let g = tape.leaf(Tensor::full(vec![2, 2, 1], 1.0));
        // x slightly negative: left taps fall outside and contribute zero
        let coords = tape.leaf(Tensor::new(vec![1, 2], vec![-0.3, 0.0]));
        let out = g.bilinear_sample(coords).value();
        assert!(out.data[0] < 1.0);
    }

    #[test]
    fn spectrum_mag_gradients() {
        let mut rng = StdRng::seed_from_u64(13);
        let a = rt(&mut rng, vec![4, 4]);
        grad_check(&[a], 1e-4, |_, v| spread(v[0].spectrum_mag()));
    }

    #[test]
    fn spectrum_mag_agrees_with_plain_spectrum() {
        let mut rng = StdRng::seed_from_u64(14);
        let a = rt(&mut rng, vec![5, 6]);
        let tape = Tape::new();
        let v = tape.leaf(a.clone());
        let mag = v.spectrum_mag().value();
        let want = crate::freq::spectrum(&a).unwrap().magnitude();
        for (x, y) in mag.data.iter().zip(want.data.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn composite_expression_gradients() {
        // a small MLP-like composite touching many ops at once
        let mut rng = StdRng::seed_from_u64(15);
        let x = rt(&mut rng, vec![2, 3]);
        let w1 = rt(&mut rng, vec![3, 4]);
        let b1 = rt(&mut rng, vec![4]);
        let w2 = rt(&mut rng, vec![4, 2]);
        grad_check(&[x, w1, b1, w2], 1e-4, |_, v| {
            let h = v[0].matmul(v[1]).add_broadcast_row(v[2]).relu();
            let o = h.matmul(v[3]).softmax_rows();
            spread(o)
        });
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // y = x·x (same node twice) → dy/dx = 2x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -2.0]));
        let y = x.mul(x).sum();
        let g = tape.backward(y).wrt(x);
        assert_eq!(g.data, vec![6.0, -4.0]);
    }

    #[test]
    fn no_path_means_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]));
        let loss = x.sum();
        let g = tape.backward(loss).wrt(y);
        assert_eq!(g.data, vec![0.0, 0.0]);
    }
}
