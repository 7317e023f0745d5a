//! Analytic kernels of an infinite-width recurrent network over item
//! sequences.
//!
//! For a pair of sequences the module computes, in one fused layer/time
//! recursion, the Gaussian-process kernel of the network output at random
//! initialisation (`nngp`) and the tangent kernel of gradient inner
//! products (`rntk`). Items are treated as one-hot vectors, so the input
//! inner product at a time step is the item-equality indicator.
//!
//! Sequences of different lengths are aligned by prepending zero padding
//! to the shorter one, which lines the sequence ends up. Three measures
//! keep padding from leaking into the kernels: the initial hidden state is
//! zero, `sigma_b` must be zero whenever padding is active, and the
//! expectation operators return exactly zero on any cell touching a pad.
//! Padded cells therefore contribute exact floating-point zeros and the
//! padded recursion reproduces the unpadded one bit for bit.

use thiserror::Error;

use crate::kernel_math::{v_relu, v_relu_prime, CovBlock};

/// Variances of the weight groups and the layer count.
///
/// `sigma_w` scales the recurrent weights, `sigma_u` the input and
/// inter-layer weights, `sigma_b` the biases and `sigma_v` the output
/// weights. All scalings are applied at use-site as `sigma / sqrt(width)`
/// in the finite network, which is what makes the kernels converge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelHyperParams {
    pub sigma_w: f64,
    pub sigma_u: f64,
    pub sigma_b: f64,
    pub sigma_v: f64,
    pub layers: usize,
}

impl Default for KernelHyperParams {
    fn default() -> Self {
        Self { sigma_w: 1.0, sigma_u: 1.0, sigma_b: 0.0, sigma_v: 1.0, layers: 1 }
    }
}

impl KernelHyperParams {
    /// Engine-level validation: finite, non-negative, at least one layer.
    ///
    /// Zero variances are allowed here — the recursions are total on that
    /// closure and the oracle exercises degenerate corners like
    /// `sigma_v = 0`. Recommender entry points use [`Self::validate_strict`].
    pub fn validate(&self) -> Result<(), RntkError> {
        let all = [self.sigma_w, self.sigma_u, self.sigma_b, self.sigma_v];
        if all.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(RntkError::InvalidParams {
                detail: format!(
                    "variances must be finite and non-negative (w={}, u={}, b={}, v={})",
                    self.sigma_w, self.sigma_u, self.sigma_b, self.sigma_v
                ),
            });
        }
        if self.layers == 0 {
            return Err(RntkError::InvalidParams { detail: "layers must be >= 1".into() });
        }
        Ok(())
    }

    /// Strict validation for recommender configurations: `sigma_w`,
    /// `sigma_u` and `sigma_v` must be strictly positive.
    pub fn validate_strict(&self) -> Result<(), RntkError> {
        self.validate()?;
        if self.sigma_w <= 0.0 || self.sigma_u <= 0.0 || self.sigma_v <= 0.0 {
            return Err(RntkError::InvalidParams {
                detail: format!(
                    "sigma_w, sigma_u and sigma_v must be > 0 (w={}, u={}, v={})",
                    self.sigma_w, self.sigma_u, self.sigma_v
                ),
            });
        }
        Ok(())
    }
}

/// One user's ordered item history; the unit of kernel comparison.
#[derive(Clone, Debug, Eq, PartialEq, Hash)]
pub struct ItemSequence {
    pub user: String,
    pub items: Vec<u32>,
}

impl ItemSequence {
    pub fn new(user: impl Into<String>, items: Vec<u32>) -> Result<Self, RntkError> {
        if items.is_empty() {
            return Err(RntkError::EmptySequence);
        }
        Ok(Self { user: user.into(), items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Variance constant applied to the accumulated gradient term in the
/// tangent-kernel output.
///
/// The accumulated term reaches the output through the output weights, so
/// [`FinalScale::SigmaV`] is the default. [`FinalScale::SigmaU`] is kept as
/// the alternative reading so the Monte-Carlo oracle can adjudicate between
/// the two; with `sigma_v = 0` the network output is identically zero and
/// only the `SigmaV` variant yields the required zero kernel.
#[derive(Clone, Copy, Debug, Default, Eq, PartialEq)]
pub enum FinalScale {
    SigmaU,
    #[default]
    SigmaV,
}

/// The two kernels of one sequence pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairKernels {
    /// Tangent kernel (gradient inner products).
    pub ntk: f64,
    /// Output Gaussian-process kernel at initialisation.
    pub nngp: f64,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum RntkError {
    #[error("item sequence must contain at least one item")]
    EmptySequence,
    #[error("invalid kernel hyper-parameters: {detail}")]
    InvalidParams { detail: String },
    #[error("padded alignment requires sigma_b = 0 (got {sigma_b})")]
    PaddingRequiresZeroBias { sigma_b: f64 },
}

/// A sequence with explicit left padding; `None` slots are padding.
#[derive(Clone, Debug, Eq, PartialEq)]
pub struct AlignedSeq {
    slots: Vec<Option<u32>>,
}

impl AlignedSeq {
    pub fn slots(&self) -> &[Option<u32>] {
        &self.slots
    }

    /// Mask with `true` at padded positions.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_none).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Left-pad the shorter sequence so both have the same length.
///
/// Prepending keeps the sequence ends aligned, which is the pairing the
/// unequal-length tangent kernel requires; the padded cells then vanish
/// under the annihilation rules of the expectation operators.
pub fn align_pair(x: &ItemSequence, y: &ItemSequence) -> (AlignedSeq, AlignedSeq) {
    let aligned = x.len().max(y.len());
    let pad = |items: &[u32]| -> AlignedSeq {
        let tau = aligned - items.len();
        let mut slots = vec![None; tau];
        slots.extend(items.iter().copied().map(Some));
        AlignedSeq { slots }
    };
    (pad(&x.items), pad(&y.items))
}

/// Dense (layer, time) table of kernel values.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTimeTable {
    layers: usize,
    steps: usize,
    data: Vec<f64>,
}

impl LayerTimeTable {
    fn zeros(layers: usize, steps: usize) -> Self {
        Self { layers, steps, data: vec![0.0; layers * steps] }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Value at 0-based (layer, time).
    pub fn get(&self, layer: usize, t: usize) -> f64 {
        debug_assert!(layer < self.layers && t < self.steps);
        self.data[layer * self.steps + t]
    }

    fn set(&mut self, layer: usize, t: usize, value: f64) {
        self.data[layer * self.steps + t] = value;
    }
}

/// Per-sequence table of self-covariances, one value per (layer, time).
///
/// Every cross-pair evaluation needs the self-covariances of both
/// sequences to assemble its covariance blocks, so these tables are
/// computed once per sequence and shared read-only.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrace {
    pub sigma: LayerTimeTable,
}

/// Full record of one pair evaluation: cross-covariances, the gradient
/// accumulation table, and the pad masks of both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTrace {
    pub sigma: LayerTimeTable,
    pub psi: LayerTimeTable,
    pub pad_x: Vec<bool>,
    pub pad_y: Vec<bool>,
}

/// Self-covariance table of an unpadded sequence.
pub fn self_trace(x: &ItemSequence, p: &KernelHyperParams) -> Result<SelfTrace, RntkError> {
    self_trace_items(&x.items, p)
}

pub(crate) fn self_trace_items(
    items: &[u32],
    p: &KernelHyperParams,
) -> Result<SelfTrace, RntkError> {
    if items.is_empty() {
        return Err(RntkError::EmptySequence);
    }
    p.validate()?;
    let slots: Vec<Option<u32>> = items.iter().copied().map(Some).collect();
    self_trace_of_slots(&slots, p)
}

/// Self-covariance table of an explicitly padded sequence.
///
/// Reading this table at non-padded cells gives exactly the values of the
/// unpadded sequence's table, shifted by the pad count; entries at padded
/// cells are zero.
pub fn self_trace_padded(
    slots: &[Option<u32>],
    p: &KernelHyperParams,
) -> Result<SelfTrace, RntkError> {
    if slots.is_empty() {
        return Err(RntkError::EmptySequence);
    }
    p.validate()?;
    if slots.iter().any(Option::is_none) && p.sigma_b != 0.0 {
        return Err(RntkError::PaddingRequiresZeroBias { sigma_b: p.sigma_b });
    }
    self_trace_of_slots(slots, p)
}

fn self_trace_of_slots(slots: &[Option<u32>], p: &KernelHyperParams) -> Result<SelfTrace, RntkError> {
    let layers = p.layers;
    let steps = slots.len();
    let su2 = p.sigma_u * p.sigma_u;
    let sw2 = p.sigma_w * p.sigma_w;
    let sb2 = p.sigma_b * p.sigma_b;

    let mut table = LayerTimeTable::zeros(layers, steps);
    let mut blk_prev = vec![CovBlock::raw(0.0, 0.0, 0.0, true, true); layers];
    let mut blk_cur = blk_prev.clone();
    for (t, slot) in slots.iter().enumerate() {
        let pad = slot.is_none();
        for l in 0..layers {
            let input = if l == 0 {
                su2 * if pad { 0.0 } else { 1.0 }
            } else {
                su2 * v_relu(&blk_cur[l - 1])
            };
            let mut sig = input;
            if t > 0 {
                sig += sw2 * v_relu(&blk_prev[l]);
            }
            sig += sb2;
            blk_cur[l] = CovBlock::raw(sig, sig, sig, pad, pad);
            table.set(l, t, sig);
        }
        std::mem::swap(&mut blk_prev, &mut blk_cur);
    }
    Ok(SelfTrace { sigma: table })
}

/// Fused recursion over one aligned pair. Consumes the unpadded self
/// traces of both sequences; padded cells read a zero self-covariance.
///
/// Term order inside each cell is fixed (input, recurrent, bias) so a
/// padded run reproduces the unpadded one exactly: contributions from
/// padded neighbours are exact zeros and adding them does not change any
/// finite value.
fn eval_pair(
    x_items: &[u32],
    y_items: &[u32],
    sx: &SelfTrace,
    sy: &SelfTrace,
    p: &KernelHyperParams,
    scale: FinalScale,
    extra_pad: usize,
    mut record: Option<&mut KernelTrace>,
) -> PairKernels {
    let layers = p.layers;
    let aligned = x_items.len().max(y_items.len()) + extra_pad;
    let tau_x = aligned - x_items.len();
    let tau_y = aligned - y_items.len();
    let su2 = p.sigma_u * p.sigma_u;
    let sw2 = p.sigma_w * p.sigma_w;
    let sb2 = p.sigma_b * p.sigma_b;
    let sv2 = p.sigma_v * p.sigma_v;

    let mut blk_prev = vec![CovBlock::raw(0.0, 0.0, 0.0, true, true); layers];
    let mut blk_cur = blk_prev.clone();
    let mut psi_prev = vec![0.0; layers];
    let mut psi_cur = vec![0.0; layers];

    for t in 0..aligned {
        let pad_x = t < tau_x;
        let pad_y = t < tau_y;
        for l in 0..layers {
            let input = if l == 0 {
                let hit = !pad_x && !pad_y && x_items[t - tau_x] == y_items[t - tau_y];
                su2 * if hit { 1.0 } else { 0.0 }
            } else {
                su2 * v_relu(&blk_cur[l - 1])
            };
            let mut sig = input;
            if t > 0 {
                sig += sw2 * v_relu(&blk_prev[l]);
            }
            sig += sb2;

            let k1 = if pad_x { 0.0 } else { sx.sigma.get(l, t - tau_x) };
            let k2 = if pad_y { 0.0 } else { sy.sigma.get(l, t - tau_y) };
            let blk = CovBlock::raw(k1, k2, sig, pad_x, pad_y);

            let mut psi = sig;
            if t > 0 {
                psi += sw2 * psi_prev[l] * v_relu_prime(&blk_prev[l]);
            }
            if l > 0 {
                psi += su2 * psi_cur[l - 1] * v_relu_prime(&blk_cur[l - 1]);
            }

            blk_cur[l] = blk;
            psi_cur[l] = psi;
            if let Some(tr) = record.as_deref_mut() {
                tr.sigma.set(l, t, sig);
                tr.psi.set(l, t, psi);
            }
        }
        std::mem::swap(&mut blk_prev, &mut blk_cur);
        std::mem::swap(&mut psi_prev, &mut psi_cur);
    }

    let out_blk = blk_prev[layers - 1];
    let nngp = sv2 * v_relu(&out_blk);
    let s2 = match scale {
        FinalScale::SigmaU => su2,
        FinalScale::SigmaV => sv2,
    };
    let ntk = nngp + s2 * psi_prev[layers - 1] * v_relu_prime(&out_blk);
    PairKernels { ntk, nngp }
}

fn validate_pair(
    x: &ItemSequence,
    y: &ItemSequence,
    p: &KernelHyperParams,
    padded: bool,
) -> Result<(), RntkError> {
    if x.is_empty() || y.is_empty() {
        return Err(RntkError::EmptySequence);
    }
    p.validate()?;
    if padded && p.sigma_b != 0.0 {
        return Err(RntkError::PaddingRequiresZeroBias { sigma_b: p.sigma_b });
    }
    Ok(())
}

/// Kernel pair for two sequences, with the default output scale.
pub fn rntk(x: &ItemSequence, y: &ItemSequence, p: &KernelHyperParams) -> Result<PairKernels, RntkError> {
    rntk_scaled(x, y, p, FinalScale::default())
}

/// Kernel pair with an explicit output-scale variant.
pub fn rntk_scaled(
    x: &ItemSequence,
    y: &ItemSequence,
    p: &KernelHyperParams,
    scale: FinalScale,
) -> Result<PairKernels, RntkError> {
    validate_pair(x, y, p, x.len() != y.len())?;
    let sx = self_trace(x, p)?;
    let sy = self_trace(y, p)?;
    Ok(pair_kernels_cached(&x.items, &sx, &y.items, &sy, p, scale))
}

/// Output Gaussian-process kernel for two sequences.
pub fn nngp(x: &ItemSequence, y: &ItemSequence, p: &KernelHyperParams) -> Result<f64, RntkError> {
    rntk(x, y, p).map(|k| k.nngp)
}

/// Kernel pair with `extra_pad` additional shared padding slots prepended
/// to both aligned sequences. Exists to demonstrate padding invariance:
/// the result equals [`rntk_scaled`] to the last bit.
pub fn rntk_with_shared_padding(
    x: &ItemSequence,
    y: &ItemSequence,
    p: &KernelHyperParams,
    scale: FinalScale,
    extra_pad: usize,
) -> Result<PairKernels, RntkError> {
    validate_pair(x, y, p, extra_pad > 0 || x.len() != y.len())?;
    let sx = self_trace(x, p)?;
    let sy = self_trace(y, p)?;
    let (xi, sxr, yi, syr) = canonical(&x.items, &sx, &y.items, &sy);
    Ok(eval_pair(xi, yi, sxr, syr, p, scale, extra_pad, None))
}

/// Full evaluation record for one pair, plus the kernels. The trace keeps
/// the caller's argument order.
pub fn pair_trace(
    x: &ItemSequence,
    y: &ItemSequence,
    p: &KernelHyperParams,
    scale: FinalScale,
) -> Result<(KernelTrace, PairKernels), RntkError> {
    validate_pair(x, y, p, x.len() != y.len())?;
    let sx = self_trace(x, p)?;
    let sy = self_trace(y, p)?;
    let (ax, ay) = align_pair(x, y);
    let aligned = ax.len();
    let mut trace = KernelTrace {
        sigma: LayerTimeTable::zeros(p.layers, aligned),
        psi: LayerTimeTable::zeros(p.layers, aligned),
        pad_x: ax.pad_mask(),
        pad_y: ay.pad_mask(),
    };
    let kernels = eval_pair(&x.items, &y.items, &sx, &sy, p, scale, 0, Some(&mut trace));
    Ok((trace, kernels))
}

/// Order a pair canonically (by item content) so the evaluation performs
/// the same floating-point operations regardless of argument order.
fn canonical<'a>(
    x_items: &'a [u32],
    sx: &'a SelfTrace,
    y_items: &'a [u32],
    sy: &'a SelfTrace,
) -> (&'a [u32], &'a SelfTrace, &'a [u32], &'a SelfTrace) {
    if y_items < x_items {
        (y_items, sy, x_items, sx)
    } else {
        (x_items, sx, y_items, sy)
    }
}

/// Hot path for Gram rows: kernels from precomputed self traces.
///
/// Preconditions (validated once by the caller): non-empty items, params
/// valid, `sigma_b = 0` whenever lengths differ, traces computed with the
/// same params.
pub(crate) fn pair_kernels_cached(
    x_items: &[u32],
    sx: &SelfTrace,
    y_items: &[u32],
    sy: &SelfTrace,
    p: &KernelHyperParams,
    scale: FinalScale,
) -> PairKernels {
    let (xi, sxr, yi, syr) = canonical(x_items, sx, y_items, sy);
    eval_pair(xi, yi, sxr, syr, p, scale, 0, None)
}
