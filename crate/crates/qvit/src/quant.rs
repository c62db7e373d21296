//! Integer quantizers with straight-through gradients.
//!
//! Activations use an asymmetric scheme `code = round(clip((x - z)/alpha))`,
//! weights a symmetric one (`z = 0`); attention probabilities use an
//! unsigned grid since they are nonnegative. Scales come either from running
//! min/max statistics or are learned step sizes trained by gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul2d_bt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantKind {
    /// Signed asymmetric: `[-2^(b-1), 2^(b-1)-1]` with a zero point.
    ActivationAsymmetric,
    /// Signed symmetric, zero point identically 0.
    WeightSymmetric,
    /// Unsigned `[0, 2^b - 1]`; for nonnegative tensors such as attention
    /// probabilities, where signed levels would waste half the grid.
    ActivationUnsigned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleMode {
    /// Running min/max statistics; scale recomputed after each update.
    StaticEma,
    /// Learned step size: alpha is a trainable parameter.
    Learned,
}

/// How a fake-quant node executes its forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantExec {
    /// Real quantization: clip then round to the integer grid.
    Round,
    /// The straight-through surrogate: clip without rounding. Used by
    /// gradient checks, where the loss must be smooth.
    ClipOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub bits: u8,
    pub kind: QuantKind,
    pub scale_mode: ScaleMode,
    pub ema_decay: f64,
}

impl QuantizerConfig {
    pub fn new(bits: u8, kind: QuantKind, scale_mode: ScaleMode) -> Result<Self> {
        if ![2, 3, 4, 8].contains(&bits) {
            return Err(Error::config(format!(
                "unsupported bit-width {bits}; expected one of 2, 3, 4, 8"
            )));
        }
        Ok(QuantizerConfig { bits, kind, scale_mode, ema_decay: 0.9 })
    }

    /// Clip bounds `(q_n, q_p)` for this bit-width and kind.
    pub fn clip_bounds(&self) -> (f64, f64) {
        clip_bounds(self.bits, self.kind)
    }
}

pub fn clip_bounds(bits: u8, kind: QuantKind) -> (f64, f64) {
    match kind {
        QuantKind::ActivationAsymmetric | QuantKind::WeightSymmetric => {
            let q = 1i64 << (bits - 1);
            (q as f64, (q - 1) as f64)
        }
        QuantKind::ActivationUnsigned => (0.0, ((1i64 << bits) - 1) as f64),
    }
}

const ALPHA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub alpha: f64,
    pub zero_point: f64,
    pub q_n: f64,
    pub q_p: f64,
    pub ema_min: f64,
    pub ema_max: f64,
    /// Set once the first batch of statistics has been observed.
    pub calibrated: bool,
}

impl QuantizerState {
    pub fn init(cfg: &QuantizerConfig) -> Self {
        let (q_n, q_p) = cfg.clip_bounds();
        QuantizerState {
            alpha: 1.0,
            zero_point: 0.0,
            q_n,
            q_p,
            ema_min: 0.0,
            ema_max: 0.0,
            calibrated: false,
        }
    }

    /// Bare state with explicit parameters; used by tests and op snapshots.
    pub fn raw(alpha: f64, zero_point: f64, q_n: f64, q_p: f64) -> Self {
        QuantizerState {
            alpha,
            zero_point,
            q_n,
            q_p,
            ema_min: 0.0,
            ema_max: 0.0,
            calibrated: true,
        }
    }

    fn check_alpha(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::contract(format!(
                "quantizer alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Recompute `alpha`/`zero_point` from the tracked range.
    fn refresh_scale(&mut self, kind: QuantKind) {
        match kind {
            QuantKind::ActivationAsymmetric => {
                self.alpha = ((self.ema_max - self.ema_min) / (self.q_p + self.q_n))
                    .max(ALPHA_FLOOR);
                self.zero_point = self.ema_min + self.alpha * self.q_n;
            }
            QuantKind::ActivationUnsigned => {
                self.alpha = ((self.ema_max - self.ema_min) / self.q_p).max(ALPHA_FLOOR);
                self.zero_point = self.ema_min;
            }
            QuantKind::WeightSymmetric => {
                let m = self.ema_min.abs().max(self.ema_max.abs());
                self.alpha = (m / self.q_p).max(ALPHA_FLOOR);
                self.zero_point = 0.0;
            }
        }
    }
}

/// Integer codes plus the affine parameters used to produce them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub shape: Vec<usize>,
    pub alpha: f64,
    pub zero_point: f64,
    pub bits: u8,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor {
        let data: Vec<f64> = self
            .codes
            .iter()
            .map(|&c| c as f64 * self.alpha + self.zero_point)
            .collect();
        Tensor::new(self.shape.clone(), data).expect("codes carry a consistent shape")
    }
}

fn quantize_code(x: f64, s: &QuantizerState) -> i32 {
    let arg = (x - s.zero_point) / s.alpha;
    arg.clamp(-s.q_n, s.q_p).round_ties_even() as i32
}

/// `code = round_half_even(clip((x - z)/alpha, -q_n, q_p))`.
pub fn quantize_activation(x: &Tensor, s: &QuantizerState, bits: u8) -> Result<QuantizedTensor> {
    s.check_alpha()?;
    Ok(QuantizedTensor {
        codes: x.data().iter().map(|&v| quantize_code(v, s)).collect(),
        shape: x.shape().to_vec(),
        alpha: s.alpha,
        zero_point: s.zero_point,
        bits,
    })
}

/// Symmetric weight quantization; the zero point is identically 0.
pub fn quantize_weight(w: &Tensor, s: &QuantizerState, bits: u8) -> Result<QuantizedTensor> {
    if s.zero_point != 0.0 {
        return Err(Error::contract(format!(
            "weight quantizer must have zero_point 0, got {}",
            s.zero_point
        )));
    }
    quantize_activation(w, s, bits)
}

/// Quantize-dequantize a single value. `ClipOnly` skips the rounding step
/// (the surrogate whose exact derivative the straight-through rule is).
pub fn fake_quant_scalar(x: f64, s: &QuantizerState, exec: QuantExec) -> f64 {
    let arg = ((x - s.zero_point) / s.alpha).clamp(-s.q_n, s.q_p);
    let code = match exec {
        QuantExec::Round => arg.round_ties_even(),
        QuantExec::ClipOnly => arg,
    };
    code * s.alpha + s.zero_point
}

/// Quantize-dequantize a whole tensor (no gradient tracking).
pub fn fake_quant_tensor(x: &Tensor, s: &QuantizerState, exec: QuantExec) -> Result<Tensor> {
    s.check_alpha()?;
    Ok(x.map(|v| fake_quant_scalar(v, s, exec)))
}

/// Fold a batch of statistics into an EMA state and refresh the scale.
/// First observation copies the batch extrema.
pub fn update_scale_statistics(
    s: &mut QuantizerState,
    cfg: &QuantizerConfig,
    x: &Tensor,
) -> Result<()> {
    if cfg.scale_mode != ScaleMode::StaticEma {
        return Err(Error::contract(
            "update_scale_statistics is only valid in static-ema mode".to_string(),
        ));
    }
    observe_batch(s, cfg, x);
    Ok(())
}

/// Shared statistics fold; also used as first-batch calibration in learned
/// mode (after which alpha trains by gradient and z stays frozen).
pub fn observe_batch(s: &mut QuantizerState, cfg: &QuantizerConfig, x: &Tensor) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !s.calibrated {
        s.ema_min = lo;
        s.ema_max = hi;
        s.calibrated = true;
    } else {
        let d = cfg.ema_decay;
        s.ema_min = d * s.ema_min + (1.0 - d) * lo;
        s.ema_max = d * s.ema_max + (1.0 - d) * hi;
    }
    s.refresh_scale(cfg.kind);
}

/// Learned-step-size gradient for alpha:
/// `dalpha = grad_scale * sum upstream * h(v)` with `v = (x - z)/alpha`,
/// where `h` is `round(v) - v` in range and the clip bound outside.
pub fn lsq_scale_gradient(
    s: &QuantizerState,
    cfg: &QuantizerConfig,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<f64> {
    if cfg.scale_mode != ScaleMode::Learned {
        return Err(Error::contract(
            "lsq_scale_gradient is only valid in learned mode".to_string(),
        ));
    }
    s.check_alpha()?;
    if x.shape() != upstream.shape() {
        return Err(Error::dim(format!(
            "upstream shape {:?} does not match input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let grad_scale = 1.0 / ((x.numel() as f64) * s.q_p).sqrt();
    let mut acc = 0.0f64;
    for (&v, &g) in x.data().iter().zip(upstream.data()) {
        let arg = (v - s.zero_point) / s.alpha;
        let h = if arg < -s.q_n {
            -s.q_n
        } else if arg > s.q_p {
            s.q_p
        } else {
            arg.round_ties_even() - arg
        };
        acc += g * h;
    }
    Ok(acc * grad_scale)
}

/// Weight scales for the linear kernels: one alpha for the whole tensor or
/// one per output channel.
#[derive(Clone, Debug)]
pub enum WeightScales {
    PerTensor(f64),
    PerChannel(Vec<f64>),
}

impl WeightScales {
    fn get(&self, channel: usize) -> f64 {
        match self {
            WeightScales::PerTensor(a) => *a,
            WeightScales::PerChannel(v) => v[channel],
        }
    }
}

/// Per-output-channel symmetric weight quantization (optional granularity).
pub fn quantize_weight_per_channel(
    w: &Tensor,
    bits: u8,
) -> Result<(QuantizedTensor, WeightScales)> {
    if w.rank() != 2 {
        return Err(Error::dim(format!(
            "per-channel quantization expects [dout, din], got {:?}",
            w.shape()
        )));
    }
    let (q_n, q_p) = clip_bounds(bits, QuantKind::WeightSymmetric);
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    let mut codes = vec![0i32; w.numel()];
    let mut alphas = vec![0.0f64; dout];
    for o in 0..dout {
        let row = &w.data()[o * din..(o + 1) * din];
        let m = row.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        let alpha = (m / q_p).max(ALPHA_FLOOR);
        alphas[o] = alpha;
        let s = QuantizerState::raw(alpha, 0.0, q_n, q_p);
        for (c, &v) in codes[o * din..(o + 1) * din].iter_mut().zip(row) {
            *c = quantize_code(v, &s);
        }
    }
    let qt = QuantizedTensor {
        codes,
        shape: w.shape().to_vec(),
        alpha: 1.0, // per-channel scales live in the WeightScales
        zero_point: 0.0,
        bits,
    };
    Ok((qt, WeightScales::PerChannel(alphas)))
}

/// Float execution path: matmul of the fake-quantized operands.
/// `x` is `[..., din]` flattened to rows, `w` is `[dout, din]`.
pub fn qlinear_float(
    x: &Tensor,
    w: &Tensor,
    sx: &QuantizerState,
    sw: &QuantizerState,
    bits_x: u8,
    bits_w: u8,
) -> Result<Tensor> {
    check_linear_shapes(x, w)?;
    let xq = fake_quant_tensor(x, sx, QuantExec::Round)?;
    let wq = fake_quant_tensor(w, sw, QuantExec::Round)?;
    let _ = (bits_x, bits_w);
    let din = *w.shape().last().unwrap();
    let dout = w.shape()[0];
    let rows = x.numel() / din;
    let out = matmul2d_bt(xq.data(), wq.data(), rows, din, dout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

/// Integer execution path: the same product computed on integer codes with
/// the affine correction applied afterwards,
/// `out = alpha_x * alpha_w * (CX . CW^T) + z * alpha_w * rowsum(CW)`.
pub fn qlinear_integer(
    x: &Tensor,
    w: &Tensor,
    sx: &QuantizerState,
    sw: &QuantizerState,
    bits_x: u8,
    bits_w: u8,
) -> Result<Tensor> {
    check_linear_shapes(x, w)?;
    let cx = quantize_activation(x, sx, bits_x)?;
    let cw = quantize_weight(w, sw, bits_w)?;
    let scales = WeightScales::PerTensor(cw.alpha);
    qlinear_integer_from_codes(&cx, &cw, &scales, x.shape())
}

/// Integer path from pre-quantized codes; supports per-channel weight scales.
pub fn qlinear_integer_from_codes(
    cx: &QuantizedTensor,
    cw: &QuantizedTensor,
    w_scales: &WeightScales,
    x_shape: &[usize],
) -> Result<Tensor> {
    let din = *cw.shape.last().unwrap();
    let dout = cw.shape[0];
    let rows = cx.codes.len() / din;
    let mut rowsum = vec![0i64; dout];
    for (o, sum) in rowsum.iter_mut().enumerate() {
        *sum = cw.codes[o * din..(o + 1) * din]
            .iter()
            .map(|&c| c as i64)
            .sum();
    }
    let mut out = vec![0.0f64; rows * dout];
    for r in 0..rows {
        let xr = &cx.codes[r * din..(r + 1) * din];
        for o in 0..dout {
            let wr = &cw.codes[o * din..(o + 1) * din];
            let mut acc = 0i64;
            for (&a, &b) in xr.iter().zip(wr) {
                acc += a as i64 * b as i64;
            }
            let aw = w_scales.get(o);
            out[r * dout + o] =
                cx.alpha * aw * acc as f64 + cx.zero_point * aw * rowsum[o] as f64;
        }
    }
    let mut shape = x_shape.to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

fn check_linear_shapes(x: &Tensor, w: &Tensor) -> Result<()> {
    if w.rank() != 2 {
        return Err(Error::dim(format!(
            "qlinear expects weight [dout, din], got {:?}",
            w.shape()
        )));
    }
    let din = w.shape()[1];
    if x.shape().last() != Some(&din) {
        return Err(Error::dim(format!(
            "qlinear input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn astate(bits: u8) -> (QuantizerConfig, QuantizerState) {
        let cfg =
            QuantizerConfig::new(bits, QuantKind::ActivationAsymmetric, ScaleMode::StaticEma)
                .unwrap();
        (cfg, QuantizerState::init(&cfg))
    }

    #[test]
    fn clip_bounds_per_kind() {
        assert_eq!(clip_bounds(2, QuantKind::ActivationAsymmetric), (2.0, 1.0));
        assert_eq!(clip_bounds(3, QuantKind::WeightSymmetric), (4.0, 3.0));
        assert_eq!(clip_bounds(8, QuantKind::ActivationAsymmetric), (128.0, 127.0));
        assert_eq!(clip_bounds(2, QuantKind::ActivationUnsigned), (0.0, 3.0));
        assert_eq!(clip_bounds(8, QuantKind::ActivationUnsigned), (0.0, 255.0));
    }

    #[test]
    fn config_rejects_unsupported_bits() {
        for bad in [0u8, 1, 5, 16, 32] {
            assert!(QuantizerConfig::new(
                bad,
                QuantKind::ActivationAsymmetric,
                ScaleMode::Learned
            )
            .is_err());
        }
    }

    #[test]
    fn quantize_activation_hand_cases() {
        // bits=2: q_n = 2, q_p = 1
        let s = QuantizerState::raw(0.5, 0.0, 2.0, 1.0);

        let q = quantize_activation(&Tensor::from_vec(vec![0.0]), &s, 2).unwrap();
        assert_eq!(q.codes, vec![0]);
        assert_eq!(q.dequantize().data(), &[0.0]);

        // x = 10: (10 - 0)/0.5 = 20, clipped to q_p = 1, dequantized 0.5
        let q = quantize_activation(&Tensor::from_vec(vec![10.0]), &s, 2).unwrap();
        assert_eq!(q.codes, vec![1]);
        assert_eq!(q.dequantize().data(), &[0.5]);

        // x = -10: clipped to -q_n = -2, dequantized -1.0
        let q = quantize_activation(&Tensor::from_vec(vec![-10.0]), &s, 2).unwrap();
        assert_eq!(q.codes, vec![-2]);
        assert_eq!(q.dequantize().data(), &[-1.0]);

        // x = 0.25: pre-round 0.5 rounds half-to-even down to 0
        let q = quantize_activation(&Tensor::from_vec(vec![0.25]), &s, 2).unwrap();
        assert_eq!(q.codes, vec![0]);
    }

    #[test]
    fn quantize_weight_hand_cases() {
        // bits=3: q_n = 4, q_p = 3
        let s = QuantizerState::raw(0.5, 0.0, 4.0, 3.0);

        let q = quantize_weight(&Tensor::from_vec(vec![0.0]), &s, 3).unwrap();
        assert_eq!(q.codes, vec![0]);

        // 0.74/0.5 = 1.48 -> 1, dequantized 0.5
        let q = quantize_weight(&Tensor::from_vec(vec![0.74]), &s, 3).unwrap();
        assert_eq!(q.codes, vec![1]);
        assert_eq!(q.dequantize().data(), &[0.5]);

        // 3.0/0.5 = 6, clipped to 3, dequantized 1.5
        let q = quantize_weight(&Tensor::from_vec(vec![3.0]), &s, 3).unwrap();
        assert_eq!(q.codes, vec![3]);
        assert_eq!(q.dequantize().data(), &[1.5]);
    }

    #[test]
    fn weight_quantizer_rejects_nonzero_zero_point() {
        let s = QuantizerState::raw(0.5, 0.1, 4.0, 3.0);
        assert!(quantize_weight(&Tensor::from_vec(vec![1.0]), &s, 3).is_err());
    }

    #[test]
    fn nonpositive_alpha_is_contract_error() {
        let s = QuantizerState::raw(1.0, 0.0, 2.0, 1.0);
        let bad = QuantizerState { alpha: 0.0, ..s };
        assert!(quantize_activation(&Tensor::from_vec(vec![1.0]), &bad, 2).is_err());
        assert!(fake_quant_tensor(&Tensor::from_vec(vec![1.0]), &bad, QuantExec::Round).is_err());
    }

    #[test]
    fn fake_quant_idempotent() {
        let s = QuantizerState::raw(0.37, 0.11, 2.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[64], -3.0, 3.0, &mut rng);
        let once = fake_quant_tensor(&x, &s, QuantExec::Round).unwrap();
        let twice = fake_quant_tensor(&once, &s, QuantExec::Round).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn update_scale_statistics_examples() {
        // decay 0 copies the batch extrema
        let (mut cfg, mut s) = astate(2);
        cfg.ema_decay = 0.0;
        s.calibrated = true; // force the EMA path rather than first-copy
        update_scale_statistics(&mut s, &cfg, &Tensor::from_vec(vec![-1.0, 0.3, 1.0])).unwrap();
        assert_eq!(s.ema_min, -1.0);
        assert_eq!(s.ema_max, 1.0);

        // bits=2, range [-1, 1]: alpha = 2/(1+2) = 2/3, z = -1 + alpha*2 = 1/3
        assert!((s.alpha - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.zero_point - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_range_clamps_alpha() {
        let (cfg, mut s) = astate(2);
        update_scale_statistics(&mut s, &cfg, &Tensor::from_vec(vec![0.7, 0.7, 0.7])).unwrap();
        assert_eq!(s.alpha, 1e-8);
        // quantizing the constant input must not divide by zero
        let q = quantize_activation(&Tensor::from_vec(vec![0.7]), &s, 2).unwrap();
        assert!(q.codes[0] >= -2 && q.codes[0] <= 1);
    }

    #[test]
    fn update_scale_rejects_learned_mode() {
        let cfg =
            QuantizerConfig::new(2, QuantKind::ActivationAsymmetric, ScaleMode::Learned).unwrap();
        let mut s = QuantizerState::init(&cfg);
        assert!(matches!(
            update_scale_statistics(&mut s, &cfg, &Tensor::from_vec(vec![1.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lsq_gradient_examples() {
        let cfg =
            QuantizerConfig::new(2, QuantKind::ActivationAsymmetric, ScaleMode::Learned).unwrap();

        // grid points in range: round(v) = v so the gradient vanishes
        let s = QuantizerState::raw(0.5, 0.0, 2.0, 1.0);
        let x = Tensor::from_vec(vec![-1.0, -0.5, 0.0, 0.5]);
        let up = Tensor::full(&[4], 1.0);
        let d = lsq_scale_gradient(&s, &cfg, &x, &up).unwrap();
        assert!(d.abs() < 1e-12);

        // single fully clipped value: dalpha = q_p * 1/sqrt(1 * q_p) = 1
        let x = Tensor::from_vec(vec![10.0]);
        let up = Tensor::from_vec(vec![1.0]);
        let d = lsq_scale_gradient(&s, &cfg, &x, &up).unwrap();
        assert!((d - 1.0).abs() < 1e-12);

        // zero upstream, zero gradient
        let up = Tensor::from_vec(vec![0.0]);
        assert_eq!(lsq_scale_gradient(&s, &cfg, &x, &up).unwrap(), 0.0);
    }

    #[test]
    fn lsq_gradient_rejects_static_mode() {
        let (cfg, s) = astate(2);
        let x = Tensor::from_vec(vec![1.0]);
        assert!(matches!(
            lsq_scale_gradient(&s, &cfg, &x, &x),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn qlinear_paths_scalar_case() {
        // 1x1: fake-quant x to 0.5, w to 1.5, product 0.75 via both paths
        let sx = QuantizerState::raw(0.5, 0.0, 2.0, 1.0);
        let sw = QuantizerState::raw(0.5, 0.0, 4.0, 3.0);
        let x = Tensor::new(vec![1, 1], vec![0.6]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![1.4]).unwrap();
        let f = qlinear_float(&x, &w, &sx, &sw, 2, 3).unwrap();
        let i = qlinear_integer(&x, &w, &sx, &sw, 2, 3).unwrap();
        assert!((f.data()[0] - 0.75).abs() < 1e-12);
        assert!((i.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn qlinear_zero_codes_zero_output() {
        let sx = QuantizerState::raw(1.0, 0.0, 2.0, 1.0);
        let sw = QuantizerState::raw(1.0, 0.0, 2.0, 1.0);
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 3]);
        let i = qlinear_integer(&x, &w, &sx, &sw, 2, 2).unwrap();
        assert!(i.data().iter().all(|&v| v == 0.0));
        assert_eq!(i.shape(), &[2, 4]);
    }

    #[test]
    fn qlinear_paths_agree_with_zero_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bits in [2u8, 3, 4, 8] {
            let (qn_a, qp_a) = clip_bounds(bits, QuantKind::ActivationAsymmetric);
            let (qn_w, qp_w) = clip_bounds(bits, QuantKind::WeightSymmetric);
            let sx = QuantizerState::raw(0.21, 0.13, qn_a, qp_a);
            let sw = QuantizerState::raw(0.17, 0.0, qn_w, qp_w);
            let x = Tensor::randn(&[4, 8], 0.1, 1.0, &mut rng);
            let w = Tensor::randn(&[4, 8], 0.0, 0.8, &mut rng);
            let f = qlinear_float(&x, &w, &sx, &sw, bits, bits).unwrap();
            let i = qlinear_integer(&x, &w, &sx, &sw, bits, bits).unwrap();
            let num: f64 = f
                .data()
                .iter()
                .zip(i.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den = f.l2_norm().max(1e-12);
            assert!(num / den < 1e-4, "bits={bits}: rel {}", num / den);
        }
    }

    #[test]
    fn qlinear_per_channel_integer_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[3, 6], 0.0, 1.0, &mut rng);
        let w = Tensor::randn(&[5, 6], 0.0, 0.5, &mut rng);
        let sx = QuantizerState::raw(0.05, 0.02, 8.0, 7.0);
        let cx = quantize_activation(&x, &sx, 4).unwrap();
        let (cw, scales) = quantize_weight_per_channel(&w, 4).unwrap();
        let int = qlinear_integer_from_codes(&cx, &cw, &scales, x.shape()).unwrap();

        // float reference from the dequantized per-channel weights
        let alphas = match &scales {
            WeightScales::PerChannel(v) => v.clone(),
            _ => unreachable!(),
        };
        let mut wq = vec![0.0f64; w.numel()];
        for o in 0..5 {
            for i in 0..6 {
                wq[o * 6 + i] = cw.codes[o * 6 + i] as f64 * alphas[o];
            }
        }
        let xq = cx.dequantize();
        let reference = matmul2d_bt(xq.data(), &wq, 3, 6, 5);
        for (a, b) in int.data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn qlinear_shape_mismatch() {
        let s = QuantizerState::raw(1.0, 0.0, 2.0, 1.0);
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 5]);
        assert!(matches!(
            qlinear_float(&x, &w, &s, &s, 2, 2),
            Err(Error::Dim(_))
        ));
    }

    proptest! {
        #[test]
        fn grid_membership_and_code_range(
            bits in prop::sample::select(vec![2u8, 3, 4, 8]),
            alpha in 0.01f64..2.0,
            z in -1.0f64..1.0,
            values in prop::collection::vec(-8.0f64..8.0, 1..64),
        ) {
            let (q_n, q_p) = clip_bounds(bits, QuantKind::ActivationAsymmetric);
            let s = QuantizerState::raw(alpha, z, q_n, q_p);
            let x = Tensor::from_vec(values);
            let q = quantize_activation(&x, &s, bits).unwrap();
            for &c in &q.codes {
                prop_assert!((c as f64) >= -q_n && (c as f64) <= q_p);
            }
            // distinct dequantized values fit the level budget
            let mut levels: Vec<i32> = q.codes.clone();
            levels.sort_unstable();
            levels.dedup();
            prop_assert!(levels.len() <= (q_n + q_p + 1.0) as usize);
            // dequantize reproduces the fake-quant output exactly
            let fq = fake_quant_tensor(&x, &s, QuantExec::Round).unwrap();
            let dq = q.dequantize();
            prop_assert_eq!(dq.data(), fq.data());
        }

        #[test]
        fn codes_monotone_in_input(
            bits in prop::sample::select(vec![2u8, 3, 4, 8]),
            alpha in 0.01f64..2.0,
            z in -1.0f64..1.0,
            a in -8.0f64..8.0,
            b in -8.0f64..8.0,
        ) {
            let (q_n, q_p) = clip_bounds(bits, QuantKind::ActivationAsymmetric);
            let s = QuantizerState::raw(alpha, z, q_n, q_p);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q = quantize_activation(&Tensor::from_vec(vec![lo, hi]), &s, bits).unwrap();
            prop_assert!(q.codes[0] <= q.codes[1]);
        }
    }
}
