//! Monte-Carlo verification of the analytic kernels.
//!
//! Samples finite-width recurrent networks under use-site `sigma/sqrt(n)`
//! scaling, evaluates forward outputs (empirical output-GP kernel) and
//! parameter-gradient inner products (empirical tangent kernel), and
//! aggregates per-trial statistics. A tied mode shares the raw input
//! embedding with the output projection (`V = U^T`) for the tied/untied
//! equivalence checks.
//!
//! Everything is seeded: trial `i` draws its weights from stream `i + 1`
//! of a counter-based generator, so estimates are bit-identical across
//! runs and across any degree of trial parallelism.

pub mod verify;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::rntk::{rntk, ItemSequence, KernelHyperParams, RntkError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("item {item} is outside the one-hot vocabulary of size {vocab}")]
    ItemOutOfRange { item: u32, vocab: usize },
    #[error("dimension mismatch: {detail}")]
    DimensionMismatch { detail: String },
    #[error("at least 2 trials are required (got {trials})")]
    TooFewTrials { trials: usize },
    #[error("width list must be non-empty and strictly ascending")]
    BadWidths,
    #[error("pair index {index} out of range for a pool of {pool}")]
    PairOutOfRange { index: usize, pool: usize },
    #[error(transparent)]
    Kernel(#[from] RntkError),
}

/// Dense row-major matrix of raw weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    fn sample(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = s * (M x)`
    fn matvec_scaled(&self, s: f64, x: &[f64], out: &mut [f64]) {
        for (r, slot) in out.iter_mut().enumerate() {
            *slot = s * dot(self.row(r), x);
        }
    }

    /// `out += s * (M x)`
    fn matvec_acc(&self, s: f64, x: &[f64], out: &mut [f64]) {
        for (r, slot) in out.iter_mut().enumerate() {
            *slot += s * dot(self.row(r), x);
        }
    }

    /// `out += s * (M^T x)`
    fn matvec_t_acc(&self, s: f64, x: &[f64], out: &mut [f64]) {
        for (r, &xr) in x.iter().enumerate() {
            let c = s * xr;
            if c == 0.0 {
                continue;
            }
            for (slot, &m) in out.iter_mut().zip(self.row(r)) {
                *slot += c * m;
            }
        }
    }

    /// `out += s * (M^T X)` with `X` and `out` of shape rows x d.
    fn mul_t_acc(&self, s: f64, x: &Mat, out: &mut Mat) {
        debug_assert_eq!(x.rows, self.rows);
        debug_assert_eq!(out.rows, self.cols);
        debug_assert_eq!(x.cols, out.cols);
        let d = x.cols;
        for i in 0..self.rows {
            let xi = x.row(i);
            let mi = self.row(i);
            for j in 0..self.cols {
                let c = s * mi[j];
                if c == 0.0 {
                    continue;
                }
                let oj = &mut out.data[j * d..(j + 1) * d];
                for (slot, &xv) in oj.iter_mut().zip(xi) {
                    *slot += c * xv;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    dot(&a.data, &b.data)
}

/// Output-layer wiring of the sampled network.
#[derive(Clone, Copy, Debug, Eq, PartialEq)]
pub enum EmbeddingMode {
    /// Independent output weights of the given output width.
    Untied { out_dim: usize },
    /// Output projection shares the raw input embedding (`V = U^T`), which
    /// forces the output width to equal the vocabulary size.
    Tied,
}

/// Raw standard-normal weights of one finite RNN; `sigma/sqrt(width)`
/// scalings are applied at use-site.
#[derive(Clone, Debug)]
pub struct FiniteRnnWeights {
    pub w: Vec<Mat>,
    pub u_first: Mat,
    pub u_deep: Vec<Mat>,
    pub b: Vec<Vec<f64>>,
    /// `None` in tied mode: the output matrix is the transpose of
    /// `u_first`, with shared storage.
    pub v: Option<Mat>,
    pub width: usize,
    pub vocab: usize,
    pub out_dim: usize,
    pub layers: usize,
}

impl FiniteRnnWeights {
    /// Draw a fresh network. The draw order is fixed (recurrent weights
    /// per layer, input embedding, deep inputs, biases, output weights) so
    /// a seed pins the whole parameter vector.
    pub fn sample(
        width: usize,
        vocab: usize,
        layers: usize,
        mode: EmbeddingMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = (0..layers).map(|_| Mat::sample(width, width, rng)).collect();
        let u_first = Mat::sample(width, vocab, rng);
        let u_deep = (0..layers.saturating_sub(1))
            .map(|_| Mat::sample(width, width, rng))
            .collect();
        let b = (0..layers)
            .map(|_| (0..width).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let (v, out_dim) = match mode {
            EmbeddingMode::Untied { out_dim } => (Some(Mat::sample(out_dim, width, rng)), out_dim),
            EmbeddingMode::Tied => (None, vocab),
        };
        Self { w, u_first, u_deep, b, v, width, vocab, out_dim, layers }
    }

    pub fn tied(&self) -> bool {
        self.v.is_none()
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Flat layout of the raw parameter vector, in draw order.
    pub fn layout(&self) -> ParamLayout {
        let mut at = 0usize;
        let mut range = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let w = self.w.iter().map(|m| range(m.data.len())).collect();
        let u_first = range(self.u_first.data.len());
        let u_deep = self.u_deep.iter().map(|m| range(m.data.len())).collect();
        let b = self.b.iter().map(|v| range(v.len())).collect();
        let v = self.v.as_ref().map(|m| range(m.data.len()));
        ParamLayout { w, u_first, u_deep, b, v, total: at }
    }

    /// Add `delta` to the raw parameter at flat index `flat`.
    pub fn perturb(&mut self, flat: usize, delta: f64) {
        let layout = self.layout();
        for (l, r) in layout.w.iter().enumerate() {
            if r.contains(&flat) {
                self.w[l].data[flat - r.start] += delta;
                return;
            }
        }
        if layout.u_first.contains(&flat) {
            self.u_first.data[flat - layout.u_first.start] += delta;
            return;
        }
        for (l, r) in layout.u_deep.iter().enumerate() {
            if r.contains(&flat) {
                self.u_deep[l].data[flat - r.start] += delta;
                return;
            }
        }
        for (l, r) in layout.b.iter().enumerate() {
            if r.contains(&flat) {
                self.b[l][flat - r.start] += delta;
                return;
            }
        }
        if let (Some(r), Some(v)) = (layout.v.as_ref(), self.v.as_mut()) {
            if r.contains(&flat) {
                v.data[flat - r.start] += delta;
                return;
            }
        }
        panic!("flat parameter index {flat} out of range");
    }
}

/// Flat index ranges of the raw parameter groups.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub w: Vec<std::ops::Range<usize>>,
    pub u_first: std::ops::Range<usize>,
    pub u_deep: Vec<std::ops::Range<usize>>,
    pub b: Vec<std::ops::Range<usize>>,
    pub v: Option<std::ops::Range<usize>>,
    pub total: usize,
}

/// Hidden states and ReLU derivative masks of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    layers: usize,
    steps: usize,
    h: Vec<Vec<f64>>,
    mask: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

impl ForwardTrace {
    fn h(&self, l: usize, t: usize) -> &[f64] {
        &self.h[l * self.steps + t]
    }

    fn mask(&self, l: usize, t: usize) -> &[f64] {
        &self.mask[l * self.steps + t]
    }

    fn h_last(&self) -> &[f64] {
        self.h(self.layers - 1, self.steps - 1)
    }
}

fn check_inputs(
    w: &FiniteRnnWeights,
    items: &[u32],
    p: &KernelHyperParams,
) -> Result<(), OracleError> {
    if items.is_empty() {
        return Err(OracleError::Kernel(RntkError::EmptySequence));
    }
    if p.layers != w.layers {
        return Err(OracleError::DimensionMismatch {
            detail: format!("params declare {} layers, weights have {}", p.layers, w.layers),
        });
    }
    for &item in items {
        if item as usize >= w.vocab {
            return Err(OracleError::ItemOutOfRange { item, vocab: w.vocab });
        }
    }
    Ok(())
}

/// Run the network over a sequence, keeping hidden states and masks.
///
/// The first-layer input term is `sigma_u * U[:, item]` — no `1/sqrt(m)`
/// on the one-hot input — matching the analytic recursion's
/// `sigma_u^2 * <x, x'>` base case. All other weights carry
/// `sigma / sqrt(width)`. The initial hidden state is zero.
pub fn forward_trace(
    w: &FiniteRnnWeights,
    items: &[u32],
    p: &KernelHyperParams,
) -> Result<ForwardTrace, OracleError> {
    check_inputs(w, items, p)?;
    let n = w.width;
    let layers = w.layers;
    let steps = items.len();
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let sw = p.sigma_w * inv_sqrt_n;
    let su1 = p.sigma_u;
    let sud = p.sigma_u * inv_sqrt_n;
    let sb = p.sigma_b;
    let sv = p.sigma_v * inv_sqrt_n;

    let mut h = vec![vec![0.0f64; n]; layers * steps];
    let mut mask = vec![vec![0.0f64; n]; layers * steps];
    let mut g = vec![0.0f64; n];
    for t in 0..steps {
        for l in 0..layers {
            if t > 0 {
                w.w[l].matvec_scaled(sw, &h[l * steps + t - 1], &mut g);
            } else {
                g.fill(0.0);
            }
            if l == 0 {
                let item = items[t] as usize;
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += su1 * w.u_first.data[i * w.vocab + item];
                }
            } else {
                w.u_deep[l - 1].matvec_acc(sud, &h[(l - 1) * steps + t], &mut g);
            }
            if sb != 0.0 {
                for (gi, &bi) in g.iter_mut().zip(&w.b[l]) {
                    *gi += sb * bi;
                }
            }
            let cell = l * steps + t;
            for i in 0..n {
                if g[i] > 0.0 {
                    h[cell][i] = g[i];
                    mask[cell][i] = 1.0;
                }
            }
        }
    }

    let mut out = vec![0.0f64; w.out_dim];
    let h_last = &h[(layers - 1) * steps + steps - 1];
    match &w.v {
        Some(v) => v.matvec_scaled(sv, h_last, &mut out),
        None => {
            // Tied: out = sv * U^T h
            for (i, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += w.u_first.data[j * w.vocab + i] * h_last[j];
                }
                *slot = sv * acc;
            }
        }
    }
    Ok(ForwardTrace { layers, steps, h, mask, out })
}

/// Network output at the final time step.
pub fn forward(
    w: &FiniteRnnWeights,
    x: &ItemSequence,
    p: &KernelHyperParams,
) -> Result<Vec<f64>, OracleError> {
    forward_trace(w, &x.items, p).map(|tr| tr.out)
}

/// Gradient of output coordinate `out_coord` with respect to every raw
/// parameter, flattened in the [`ParamLayout`] order.
///
/// The chain rule includes the use-site scaling constants, so this is the
/// gradient against the standard-normal draws themselves. Reverse
/// accumulation with ReLU subgradient zero at zero.
pub fn gradient(
    w: &FiniteRnnWeights,
    x: &ItemSequence,
    p: &KernelHyperParams,
    out_coord: usize,
) -> Result<Vec<f64>, OracleError> {
    let tr = forward_trace(w, &x.items, p)?;
    if out_coord >= w.out_dim {
        return Err(OracleError::DimensionMismatch {
            detail: format!("output coordinate {out_coord} >= out_dim {}", w.out_dim),
        });
    }
    let n = w.width;
    let layers = w.layers;
    let steps = tr.steps;
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let sw = p.sigma_w * inv_sqrt_n;
    let su1 = p.sigma_u;
    let sud = p.sigma_u * inv_sqrt_n;
    let sb = p.sigma_b;
    let sv = p.sigma_v * inv_sqrt_n;

    let layout = w.layout();
    let mut grad = vec![0.0f64; layout.total];

    // Output weights first; they also seed the backward pass.
    let h_last = tr.h_last();
    let mut dh = vec![vec![0.0f64; n]; layers * steps];
    let seed_cell = (layers - 1) * steps + steps - 1;
    match &w.v {
        Some(v) => {
            let vrow = v.row(out_coord);
            for j in 0..n {
                dh[seed_cell][j] = sv * vrow[j];
            }
            let vr = &mut grad[layout.v.clone().expect("untied has v")];
            for j in 0..n {
                vr[out_coord * n + j] = sv * h_last[j];
            }
        }
        None => {
            for j in 0..n {
                dh[seed_cell][j] = sv * w.u_first.data[j * w.vocab + out_coord];
            }
            let ur = &mut grad[layout.u_first.clone()];
            for j in 0..n {
                ur[j * w.vocab + out_coord] += sv * h_last[j];
            }
        }
    }

    let mut delta = vec![0.0f64; n];
    for t in (0..steps).rev() {
        for l in (0..layers).rev() {
            let cell = l * steps + t;
            for i in 0..n {
                delta[i] = dh[cell][i] * tr.mask(l, t)[i];
            }
            // Recurrent weights: g(l,t) = sw * W h(l,t-1) + ...
            if t > 0 {
                let h_prev = tr.h(l, t - 1);
                let wr = layout.w[l].clone();
                for i in 0..n {
                    let c = sw * delta[i];
                    if c == 0.0 {
                        continue;
                    }
                    let row = &mut grad[wr.start + i * n..wr.start + (i + 1) * n];
                    for (slot, &hv) in row.iter_mut().zip(h_prev) {
                        *slot += c * hv;
                    }
                }
                w.w[l].matvec_t_acc(sw, &delta, &mut dh[cell - 1]);
            }
            // Input weights.
            if l == 0 {
                let item = x.items[t] as usize;
                let ur = layout.u_first.clone();
                for i in 0..n {
                    grad[ur.start + i * w.vocab + item] += su1 * delta[i];
                }
            } else {
                let h_below = tr.h(l - 1, t);
                let ur = layout.u_deep[l - 1].clone();
                for i in 0..n {
                    let c = sud * delta[i];
                    if c == 0.0 {
                        continue;
                    }
                    let row = &mut grad[ur.start + i * n..ur.start + (i + 1) * n];
                    for (slot, &hv) in row.iter_mut().zip(h_below) {
                        *slot += c * hv;
                    }
                }
                w.u_deep[l - 1].matvec_t_acc(sud, &delta, &mut dh[(l - 1) * steps + t]);
            }
            // Biases.
            if sb != 0.0 {
                let br = layout.b[l].clone();
                for i in 0..n {
                    grad[br.start + i] += sb * delta[i];
                }
            }
        }
    }
    Ok(grad)
}

/// All-coordinate backward pass: `delta[l*T + t]` holds, per column `i`,
/// the gradient of output coordinate `i` with respect to the
/// pre-activations at `(l, t)`.
pub(crate) struct BackwardTrace {
    steps: usize,
    delta: Vec<Mat>,
}

impl BackwardTrace {
    fn delta(&self, l: usize, t: usize) -> &Mat {
        &self.delta[l * self.steps + t]
    }
}

pub(crate) fn backward_all(
    w: &FiniteRnnWeights,
    tr: &ForwardTrace,
    p: &KernelHyperParams,
) -> BackwardTrace {
    let n = w.width;
    let d = w.out_dim;
    let layers = tr.layers;
    let steps = tr.steps;
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let sw = p.sigma_w * inv_sqrt_n;
    let sud = p.sigma_u * inv_sqrt_n;
    let sv = p.sigma_v * inv_sqrt_n;

    let mut dh: Vec<Mat> = (0..layers * steps).map(|_| Mat::zeros(n, d)).collect();
    let seed_cell = (layers - 1) * steps + steps - 1;
    match &w.v {
        Some(v) => {
            for i in 0..d {
                let vrow = v.row(i);
                for j in 0..n {
                    dh[seed_cell].data[j * d + i] = sv * vrow[j];
                }
            }
        }
        None => {
            // Tied: seed column i is sv * U[:, i]; U is n x vocab = n x d.
            for (slot, &u) in dh[seed_cell].data.iter_mut().zip(&w.u_first.data) {
                *slot = sv * u;
            }
        }
    }

    let mut delta: Vec<Mat> = (0..layers * steps).map(|_| Mat::zeros(0, 0)).collect();
    for t in (0..steps).rev() {
        for l in (0..layers).rev() {
            let cell = l * steps + t;
            let mut d_cell = std::mem::replace(&mut dh[cell], Mat::zeros(0, 0));
            let mask = tr.mask(l, t);
            for j in 0..n {
                let m = mask[j];
                if m == 0.0 {
                    d_cell.row_mut(j).fill(0.0);
                }
            }
            if t > 0 {
                w.w[l].mul_t_acc(sw, &d_cell, &mut dh[cell - 1]);
            }
            if l > 0 {
                w.u_deep[l - 1].mul_t_acc(sud, &d_cell, &mut dh[(l - 1) * steps + t]);
            }
            delta[cell] = d_cell;
        }
    }
    BackwardTrace { steps, delta }
}

/// Mean over output coordinates of the gradient inner product
/// `<grad f_i(x), grad f_i(y)>`, computed blockwise from the stored hidden
/// states and pre-activation gradients. Equals the explicit
/// [`gradient`]-vector inner product up to floating-point reassociation;
/// a unit test pins the two routes together.
pub(crate) fn ntk_inner_mean(
    w: &FiniteRnnWeights,
    p: &KernelHyperParams,
    x_items: &[u32],
    tx: &ForwardTrace,
    bx: &BackwardTrace,
    y_items: &[u32],
    ty: &ForwardTrace,
    by: &BackwardTrace,
) -> f64 {
    let n = w.width as f64;
    let d = w.out_dim as f64;
    let layers = w.layers;
    let tx_len = tx.steps;
    let ty_len = ty.steps;
    let sw2 = p.sigma_w * p.sigma_w;
    let su2 = p.sigma_u * p.sigma_u;
    let sb2 = p.sigma_b * p.sigma_b;
    let sv2 = p.sigma_v * p.sigma_v;

    let mut total = 0.0f64;
    for l in 0..layers {
        for t in 0..tx_len {
            for tp in 0..ty_len {
                let sd = frob_dot(bx.delta(l, t), by.delta(l, tp));
                if sd == 0.0 {
                    continue;
                }
                if t > 0 && tp > 0 {
                    total += sw2 / n * sd * dot(tx.h(l, t - 1), ty.h(l, tp - 1));
                }
                if l == 0 {
                    if x_items[t] == y_items[tp] {
                        total += su2 * sd;
                    }
                } else {
                    total += su2 / n * sd * dot(tx.h(l - 1, t), ty.h(l - 1, tp));
                }
                if sb2 != 0.0 {
                    total += sb2 * sd;
                }
            }
        }
    }
    // Output weights: identical contribution for every coordinate.
    total += d * (sv2 / n) * dot(tx.h_last(), ty.h_last());
    if w.tied() {
        // Cross terms between the input-path and output-path gradients of
        // the shared embedding. These are exactly what the tied/untied
        // comparison measures, so they must stay in.
        let c = p.sigma_u * p.sigma_v / n.sqrt();
        let col_dot = |m: &Mat, col: usize, v: &[f64]| -> f64 {
            let d = m.cols;
            m.data.iter().skip(col).step_by(d).zip(v).map(|(&a, &b)| a * b).sum()
        };
        for t in 0..tx_len {
            total += c * col_dot(bx.delta(0, t), x_items[t] as usize, ty.h_last());
        }
        for tp in 0..ty_len {
            total += c * col_dot(by.delta(0, tp), y_items[tp] as usize, tx.h_last());
        }
    }
    total / d
}

/// One Monte-Carlo kernel estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
    pub width: usize,
}

fn estimate_from_samples(samples: &[f64], width: usize) -> KernelEstimate {
    let trials = samples.len();
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
        / (trials as f64 - 1.0);
    KernelEstimate { mean, std_error: (var / trials as f64).sqrt(), trials, width }
}

/// Sampling configuration for the empirical estimators.
#[derive(Clone, Copy, Debug)]
pub struct McConfig {
    pub width: usize,
    pub vocab: usize,
    pub trials: usize,
    pub seed: u64,
    pub mode: EmbeddingMode,
}

/// Per-pair estimates over a shared sequence pool.
#[derive(Clone, Debug)]
pub struct PairEstimates {
    pub nngp: Vec<KernelEstimate>,
    pub ntk: Vec<KernelEstimate>,
}

/// Evaluate both empirical kernels for every listed pair of pool
/// sequences. Each trial draws one network and reuses it across the whole
/// pool, which keeps every per-pair estimate unbiased while amortising the
/// forward/backward work.
pub fn empirical_pairs(
    pool: &[ItemSequence],
    pairs: &[(usize, usize)],
    p: &KernelHyperParams,
    cfg: &McConfig,
) -> Result<PairEstimates, OracleError> {
    p.validate()?;
    if cfg.trials < 2 {
        return Err(OracleError::TooFewTrials { trials: cfg.trials });
    }
    if cfg.width == 0 {
        return Err(OracleError::DimensionMismatch { detail: "width must be >= 1".into() });
    }
    if pool.is_empty() {
        return Err(OracleError::Kernel(RntkError::EmptySequence));
    }
    for &(i, j) in pairs {
        let bad = i.max(j);
        if bad >= pool.len() {
            return Err(OracleError::PairOutOfRange { index: bad, pool: pool.len() });
        }
    }
    for s in pool {
        for &item in &s.items {
            if item as usize >= cfg.vocab {
                return Err(OracleError::ItemOutOfRange { item, vocab: cfg.vocab });
            }
        }
    }

    // Per trial: one nngp sample and one ntk sample per requested pair.
    type TrialSamples = (Vec<f64>, Vec<f64>);
    let per_trial: Result<Vec<TrialSamples>, OracleError> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let w = sample_trial(cfg, p.layers, trial);
            let traces: Result<Vec<(ForwardTrace, BackwardTrace)>, OracleError> = pool
                .iter()
                .map(|s| {
                    let tr = forward_trace(&w, &s.items, p)?;
                    let bt = backward_all(&w, &tr, p);
                    Ok((tr, bt))
                })
                .collect();
            let traces = traces?;
            let d = w.out_dim as f64;
            let mut nngp_row = Vec::with_capacity(pairs.len());
            let mut ntk_row = Vec::with_capacity(pairs.len());
            for &(i, j) in pairs {
                let (ti, bi) = &traces[i];
                let (tj, bj) = &traces[j];
                nngp_row.push(dot(&ti.out, &tj.out) / d);
                ntk_row.push(ntk_inner_mean(
                    &w,
                    p,
                    &pool[i].items,
                    ti,
                    bi,
                    &pool[j].items,
                    tj,
                    bj,
                ));
            }
            Ok((nngp_row, ntk_row))
        })
        .collect();
    let per_trial = per_trial?;

    // Deterministic reduction in trial order.
    let collect = |pick: &dyn Fn(&TrialSamples) -> &Vec<f64>| -> Vec<KernelEstimate> {
        (0..pairs.len())
            .map(|pi| {
                let samples: Vec<f64> = per_trial.iter().map(|t| pick(t)[pi]).collect();
                estimate_from_samples(&samples, cfg.width)
            })
            .collect()
    };
    Ok(PairEstimates { nngp: collect(&|t| &t.0), ntk: collect(&|t| &t.1) })
}

fn sample_trial(cfg: &McConfig, layers: usize, trial: usize) -> FiniteRnnWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64 + 1);
    FiniteRnnWeights::sample(cfg.width, cfg.vocab, layers, cfg.mode, &mut rng)
}

/// Empirical output-GP kernel: mean over trials and output coordinates of
/// `f_i(x) * f_i(y)`.
pub fn empirical_nngp(
    x: &ItemSequence,
    y: &ItemSequence,
    p: &KernelHyperParams,
    cfg: &McConfig,
) -> Result<KernelEstimate, OracleError> {
    let (pool, pair) = pool_of_pair(x, y);
    Ok(empirical_pairs(&pool, &[pair], p, cfg)?.nngp.remove(0))
}

/// Empirical tangent kernel: per trial, the inner product of the raw
/// parameter gradients of `x` and `y`, averaged over output coordinates.
pub fn empirical_ntk(
    x: &ItemSequence,
    y: &ItemSequence,
    p: &KernelHyperParams,
    cfg: &McConfig,
) -> Result<KernelEstimate, OracleError> {
    let (pool, pair) = pool_of_pair(x, y);
    Ok(empirical_pairs(&pool, &[pair], p, cfg)?.ntk.remove(0))
}

fn pool_of_pair(x: &ItemSequence, y: &ItemSequence) -> (Vec<ItemSequence>, (usize, usize)) {
    // Canonical argument order makes the estimate bit-symmetric.
    if x.items == y.items {
        (vec![x.clone()], (0, 0))
    } else if y.items < x.items {
        (vec![y.clone(), x.clone()], (0, 1))
    } else {
        (vec![x.clone(), y.clone()], (0, 1))
    }
}

/// Which kernel a convergence sweep tracks.
#[derive(Clone, Copy, Debug, Eq, PartialEq)]
pub enum KernelKind {
    Nngp,
    Ntk,
}

/// Per-width deviation of single-network kernel estimates from the
/// analytic value.
///
/// Reports the root-mean-square deviation over trials, which is the
/// quantity that contracts as the width grows. The output-GP estimator
/// averages the output layer analytically (`sigma_v^2 <h(x), h(y)> / n`)
/// so its per-trial spread also shrinks with width; the tangent-kernel
/// estimator self-averages over its quadratically many parameters and
/// needs no such help.
pub fn convergence_sweep(
    x: &ItemSequence,
    y: &ItemSequence,
    p: &KernelHyperParams,
    widths: &[usize],
    trials: usize,
    seed: u64,
    kind: KernelKind,
) -> Result<Vec<(usize, f64)>, OracleError> {
    if widths.is_empty() || widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OracleError::BadWidths);
    }
    if trials < 2 {
        return Err(OracleError::TooFewTrials { trials });
    }
    let analytic_pair = rntk(x, y, p)?;
    let analytic = match kind {
        KernelKind::Nngp => analytic_pair.nngp,
        KernelKind::Ntk => analytic_pair.ntk,
    };
    let vocab = 1 + x
        .items
        .iter()
        .chain(y.items.iter())
        .copied()
        .max()
        .unwrap_or(0) as usize;
    let sv2 = p.sigma_v * p.sigma_v;

    let mut out = Vec::with_capacity(widths.len());
    for &width in widths {
        let cfg = McConfig {
            width,
            vocab,
            trials,
            seed,
            mode: EmbeddingMode::Untied { out_dim: 1 },
        };
        let sq_devs: Result<Vec<f64>, OracleError> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let w = sample_trial(&cfg, p.layers, trial);
                let tx = forward_trace(&w, &x.items, p)?;
                let ty = forward_trace(&w, &y.items, p)?;
                let est = match kind {
                    KernelKind::Nngp => sv2 * dot(tx.h_last(), ty.h_last()) / width as f64,
                    KernelKind::Ntk => {
                        let bx = backward_all(&w, &tx, p);
                        let by = backward_all(&w, &ty, p);
                        ntk_inner_mean(&w, p, &x.items, &tx, &bx, &y.items, &ty, &by)
                    }
                };
                let dev = est - analytic;
                Ok(dev * dev)
            })
            .collect();
        let sq_devs = sq_devs?;
        let rms = (sq_devs.iter().sum::<f64>() / trials as f64).sqrt();
        out.push((width, rms));
    }
    Ok(out)
}

/// Least-squares slope of `log(error)` against `log(width)`.
///
/// `None` when fewer than two points carry a positive error (a zero error
/// means the estimate is exact and there is no trend to fit).
pub fn log_log_slope(points: &[(usize, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|&(w, e)| ((w as f64).ln(), e.ln()))
        .collect();
    if logs.len() < 2 || logs.len() < points.len() {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = logs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(items: &[u32]) -> ItemSequence {
        ItemSequence::new("t", items.to_vec()).unwrap()
    }

    fn unit_params(layers: usize) -> KernelHyperParams {
        KernelHyperParams { layers, ..KernelHyperParams::default() }
    }

    fn ones_network(width: usize, vocab: usize, layers: usize, out_dim: usize) -> FiniteRnnWeights {
        FiniteRnnWeights {
            w: (0..layers).map(|_| Mat::filled(width, width, 1.0)).collect(),
            u_first: Mat::filled(width, vocab, 1.0),
            u_deep: (0..layers - 1).map(|_| Mat::filled(width, width, 1.0)).collect(),
            b: (0..layers).map(|_| vec![1.0; width]).collect(),
            v: Some(Mat::filled(out_dim, width, 1.0)),
            width,
            vocab,
            out_dim,
            layers,
        }
    }

    #[test]
    fn forward_hand_example_at_width_one() {
        // One unit, one layer, one step, every raw weight 1, unit sigmas
        // and zero bias: g = sigma_u * 1 = 1, h = 1, f = sigma_v * 1 = 1.
        let w = ones_network(1, 3, 1, 1);
        let out = forward(&w, &seq(&[0]), &unit_params(1)).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_and_zero_output_scale() {
        let mut w = ones_network(4, 3, 1, 2);
        for m in &mut w.w {
            m.data.fill(0.0);
        }
        w.u_first.data.fill(0.0);
        let out = forward(&w, &seq(&[1, 2]), &unit_params(1)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let w = ones_network(4, 3, 1, 2);
        let p = KernelHyperParams { sigma_v: 0.0, ..unit_params(1) };
        let out = forward(&w, &seq(&[1, 2]), &p).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_hand_example_for_output_weight() {
        let w = ones_network(1, 3, 1, 1);
        let grad = gradient(&w, &seq(&[0]), &unit_params(1), 0).unwrap();
        let layout = w.layout();
        let v_range = layout.v.unwrap();
        // d f / d raw V = sigma_v / sqrt(1) * h = 1.
        assert!((grad[v_range.start] - 1.0).abs() < 1e-15);
        // sigma_v = 0 annihilates the recurrent-weight gradient.
        let p = KernelHyperParams { sigma_v: 0.0, ..unit_params(1) };
        let grad = gradient(&w, &seq(&[0]), &p, 0).unwrap();
        assert!(grad[layout.w[0].clone()].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn item_out_of_vocab_is_rejected() {
        let w = ones_network(2, 3, 1, 1);
        let err = forward(&w, &seq(&[3]), &unit_params(1)).unwrap_err();
        assert!(matches!(err, OracleError::ItemOutOfRange { item: 3, vocab: 3 }));
    }

    #[test]
    fn factorized_ntk_matches_explicit_gradients() {
        use rand::SeedableRng;
        for (mode, label) in [
            (EmbeddingMode::Untied { out_dim: 3 }, "untied"),
            (EmbeddingMode::Tied, "tied"),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let p = KernelHyperParams {
                sigma_w: 0.9,
                sigma_u: 0.7,
                sigma_b: 0.3,
                sigma_v: 1.1,
                layers: 2,
            };
            let w = FiniteRnnWeights::sample(8, 5, p.layers, mode, &mut rng);
            let x = seq(&[0, 3, 1]);
            let y = seq(&[2, 0]);
            let tx = forward_trace(&w, &x.items, &p).unwrap();
            let ty = forward_trace(&w, &y.items, &p).unwrap();
            let bx = backward_all(&w, &tx, &p);
            let by = backward_all(&w, &ty, &p);
            let fast = ntk_inner_mean(&w, &p, &x.items, &tx, &bx, &y.items, &ty, &by);

            let d = w.out_dim;
            let mut explicit = 0.0;
            for i in 0..d {
                let gx = gradient(&w, &x, &p, i).unwrap();
                let gy = gradient(&w, &y, &p, i).unwrap();
                explicit += dot(&gx, &gy);
            }
            explicit /= d as f64;
            let rel = (fast - explicit).abs() / explicit.abs().max(1e-12);
            assert!(rel < 1e-10, "{label}: fast {fast} vs explicit {explicit}");
        }
    }

    #[test]
    fn seeded_estimates_are_bit_identical_and_symmetric() {
        let x = seq(&[0, 1]);
        let y = seq(&[1, 2, 0]);
        let p = unit_params(2);
        let cfg = McConfig {
            width: 16,
            vocab: 4,
            trials: 8,
            seed: 5,
            mode: EmbeddingMode::Untied { out_dim: 2 },
        };
        let a = empirical_nngp(&x, &y, &p, &cfg).unwrap();
        let b = empirical_nngp(&x, &y, &p, &cfg).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());

        let swapped = empirical_nngp(&y, &x, &p, &cfg).unwrap();
        assert_eq!(a.mean.to_bits(), swapped.mean.to_bits());

        let t1 = empirical_ntk(&x, &y, &p, &cfg).unwrap();
        let t2 = empirical_ntk(&y, &x, &p, &cfg).unwrap();
        assert_eq!(t1.mean.to_bits(), t2.mean.to_bits());
    }

    #[test]
    fn quick_equivalence_at_moderate_width() {
        // Fast sanity check at 4 standard errors; the acceptance suite
        // runs the full-width version.
        let x = seq(&[0]);
        let p = unit_params(1);
        let cfg = McConfig {
            width: 256,
            vocab: 3,
            trials: 100,
            seed: 11,
            mode: EmbeddingMode::Untied { out_dim: 1 },
        };
        let nngp = empirical_nngp(&x, &x, &p, &cfg).unwrap();
        assert!((nngp.mean - 0.5).abs() <= 4.0 * nngp.std_error);
        let ntk = empirical_ntk(&x, &x, &p, &cfg).unwrap();
        assert!((ntk.mean - 1.0).abs() <= 4.0 * ntk.std_error);
    }

    #[test]
    fn two_trials_at_width_two_stay_finite() {
        let x = seq(&[0, 1]);
        let p = unit_params(1);
        let cfg = McConfig {
            width: 2,
            vocab: 3,
            trials: 2,
            seed: 1,
            mode: EmbeddingMode::Untied { out_dim: 1 },
        };
        let est = empirical_nngp(&x, &x, &p, &cfg).unwrap();
        assert!(est.mean.is_finite() && est.std_error.is_finite());
        assert_eq!(est.trials, 2);

        let err = empirical_nngp(&x, &x, &p, &McConfig { trials: 1, ..cfg }).unwrap_err();
        assert!(matches!(err, OracleError::TooFewTrials { trials: 1 }));
    }

    #[test]
    fn convergence_sweep_edges() {
        let x = seq(&[0]);
        let p = unit_params(1);
        let sweep = convergence_sweep(&x, &x, &p, &[32], 16, 3, KernelKind::Nngp).unwrap();
        assert_eq!(sweep.len(), 1);
        assert!(log_log_slope(&sweep).is_none());

        let degenerate = KernelHyperParams { sigma_v: 0.0, ..unit_params(1) };
        let sweep =
            convergence_sweep(&x, &x, &degenerate, &[8, 16], 8, 3, KernelKind::Ntk).unwrap();
        assert!(sweep.iter().all(|&(_, e)| e == 0.0));
        assert!(log_log_slope(&sweep).is_none());

        let err = convergence_sweep(&x, &x, &p, &[16, 8], 8, 3, KernelKind::Ntk).unwrap_err();
        assert!(matches!(err, OracleError::BadWidths));
    }

    #[test]
    fn estimate_statistics() {
        let est = estimate_from_samples(&[1.0, 2.0, 3.0, 4.0], 7);
        assert!((est.mean - 2.5).abs() < 1e-15);
        // Sample variance 5/3, standard error sqrt(5/12).
        assert!((est.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert_eq!(est.trials, 4);
        assert_eq!(est.width, 7);
    }
}
