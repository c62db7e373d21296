//! Quantized vision transformer.
//!
//! A DeiT-style pre-norm ViT assembled from quantized linears. Queries and
//! keys optionally pass through a learnable rectifier (per-head
//! standardization with trainable gamma/beta) before activation quantization,
//! which keeps the quantized code distribution from collapsing onto a few
//! levels. Attention probabilities are quantized on an unsigned grid. The
//! patch embedding and classifier run at `first_last_bits` (default 8), the
//! body at `w_bits`/`a_bits`.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{layer_norm, Tape, Value};
use crate::error::{Error, Result};
use crate::quant::{
    self, QuantExec, QuantKind, QuantizedTensor, QuantizerConfig, QuantizerState, ScaleMode,
};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const IRM_EPS: f64 = 1e-5;
/// |gamma| is clamped away from zero after each optimizer step.
pub const GAMMA_FLOOR: f64 = 1e-4;
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Body structures whose quantization can be toggled individually for the
/// per-module sensitivity protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantParts {
    /// The three linear projections producing q, k, v.
    pub qkv_linears: bool,
    /// The attention-weight path: q, k after rectification, v, and the
    /// softmax probabilities.
    pub attention_weights: bool,
    /// The multi-head output projection.
    pub mhsa_out_weights: bool,
    /// Both MLP linears.
    pub mlp: bool,
}

impl Default for QuantParts {
    fn default() -> Self {
        QuantParts {
            qkv_linears: true,
            attention_weights: true,
            mhsa_out_weights: true,
            mlp: true,
        }
    }
}

impl QuantParts {
    pub fn none() -> Self {
        QuantParts {
            qkv_linears: false,
            attention_weights: false,
            mhsa_out_weights: false,
            mlp: false,
        }
    }

    pub fn any(&self) -> bool {
        self.qkv_linears || self.attention_weights || self.mhsa_out_weights || self.mlp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModulePart {
    QkvLinears,
    AttentionWeights,
    MhsaOutWeights,
    Mlp,
}

impl ModulePart {
    pub const ALL: [ModulePart; 4] = [
        ModulePart::QkvLinears,
        ModulePart::AttentionWeights,
        ModulePart::MhsaOutWeights,
        ModulePart::Mlp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModulePart::QkvLinears => "qkv-linears",
            ModulePart::AttentionWeights => "attention-weights",
            ModulePart::MhsaOutWeights => "mhsa-out-weights",
            ModulePart::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "qkv-linears" => Ok(ModulePart::QkvLinears),
            "attention-weights" => Ok(ModulePart::AttentionWeights),
            "mhsa-out-weights" => Ok(ModulePart::MhsaOutWeights),
            "mlp" => Ok(ModulePart::Mlp),
            other => Err(Error::config(format!("unknown module part '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub classes: usize,
    /// 32 means full precision (no quantizers anywhere).
    pub w_bits: u8,
    pub a_bits: u8,
    #[serde(default = "default_first_last_bits")]
    pub first_last_bits: u8,
    #[serde(default)]
    pub irm_enabled: bool,
    #[serde(default = "default_quant_parts")]
    pub quant_parts: QuantParts,
    #[serde(default = "default_scale_mode")]
    pub scale_mode: ScaleMode,
}

fn default_channels() -> usize {
    1
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_first_last_bits() -> u8 {
    8
}
fn default_quant_parts() -> QuantParts {
    QuantParts::default()
}
fn default_scale_mode() -> ScaleMode {
    ScaleMode::Learned
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 || self.classes == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(
                "depth, classes, channels and mlp_ratio must be positive".to_string(),
            ));
        }
        for (label, bits) in [
            ("w_bits", self.w_bits),
            ("a_bits", self.a_bits),
            ("first_last_bits", self.first_last_bits),
        ] {
            if ![2, 3, 4, 8, 32].contains(&bits) {
                return Err(Error::config(format!(
                    "{label} = {bits} unsupported; expected 2, 3, 4, 8 or 32"
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn grid_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.grid_tokens() + 1
    }

    /// True when no quantizer exists anywhere: either 32-bit weights and
    /// activations, or every body part disabled (the all-float anchor of the
    /// sensitivity protocol).
    pub fn is_fully_float(&self) -> bool {
        (self.w_bits == 32 && self.a_bits == 32) || !self.quant_parts.any()
    }

    /// Sensitivity-protocol helper: return a config with one body structure
    /// forced to full precision (or re-quantized).
    pub fn set_module_precision(&self, part: ModulePart, full_precision: bool) -> ModelConfig {
        let mut cfg = self.clone();
        let flag = !full_precision;
        match part {
            ModulePart::QkvLinears => cfg.quant_parts.qkv_linears = flag,
            ModulePart::AttentionWeights => cfg.quant_parts.attention_weights = flag,
            ModulePart::MhsaOutWeights => cfg.quant_parts.mhsa_out_weights = flag,
            ModulePart::Mlp => cfg.quant_parts.mlp = flag,
        }
        cfg
    }
}

/// How quantizer sites execute during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Clip + round on the integer grid (normal operation).
    Quantized,
    /// Clip without rounding: the smooth surrogate for gradient checks.
    Surrogate,
    /// Skip quantizers entirely.
    Passthrough,
    /// Skip quantizers but feed each site's input into its statistics;
    /// initializes scales from a float forward pass.
    Calibrate,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SiteRole {
    Activation,
    Weight,
    Probs,
}

#[derive(Clone, Debug)]
pub struct QuantSite {
    pub name: String,
    pub cfg: QuantizerConfig,
    pub state: QuantizerState,
    /// Parameter index of the learned step size, when in learned mode.
    pub alpha_param: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct LinearIdx {
    w: usize,
    b: usize,
    act_site: Option<usize>,
    w_site: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct IrmIdx {
    gamma_q: usize,
    beta_q: usize,
    gamma_k: usize,
    beta_k: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    out: LinearIdx,
    ln2_g: usize,
    ln2_b: usize,
    fc1: LinearIdx,
    fc2: LinearIdx,
    irm: Option<IrmIdx>,
    q_tilde_site: Option<usize>,
    k_tilde_site: Option<usize>,
    v_site: Option<usize>,
    probs_site: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    patch: LinearIdx,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    ln_f_g: usize,
    ln_f_b: usize,
    head: LinearIdx,
}

/// Per-layer record of attention-path tensors. The tape handles are always
/// present (they are free); heavy extraction happens in
/// [`QVit::snapshot_telemetry`].
#[derive(Clone, Debug)]
pub struct LayerTelemetry {
    /// Pre-rectifier q per head: `[B, H, T, dh]`.
    pub q_raw: Value,
    pub k_raw: Value,
    /// Post-rectifier, pre-quantization q per head: `[B, H, T, dh]`.
    pub q_tilde: Value,
    pub k_tilde: Value,
    /// Pre-quantization attention probabilities: `[B, H, T, T]`.
    pub attn_probs: Value,
}

#[derive(Clone, Debug, Default)]
pub struct Telemetry {
    pub layers: Vec<LayerTelemetry>,
}

/// Extracted tensors for diagnostics and distillation targets.
#[derive(Clone, Debug)]
pub struct LayerSnapshot {
    pub q_raw: Tensor,
    pub k_raw: Tensor,
    pub q_tilde: Tensor,
    pub k_tilde: Tensor,
    pub attn_probs: Tensor,
    pub q_codes: Option<QuantizedTensor>,
    pub k_codes: Option<QuantizedTensor>,
}

#[derive(Clone, Debug, Default)]
pub struct TelemetrySnapshot {
    pub layers: Vec<LayerSnapshot>,
}

pub struct ForwardOutput {
    pub logits: Value,
    pub telemetry: Telemetry,
}

pub struct QVit {
    pub cfg: ModelConfig,
    pub params: Vec<Parameter>,
    pub sites: Vec<QuantSite>,
    layout: Layout,
}

impl QVit {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Parameter> = Vec::new();
        let mut sites: Vec<QuantSite> = Vec::new();

        let d = cfg.embed_dim;
        let std = 0.02;

        let push_param = |params: &mut Vec<Parameter>, name: String, value: Tensor| -> usize {
            params.push(Parameter { name, value });
            params.len() - 1
        };

        let quant_everything = !cfg.is_fully_float();
        let make_site = |params: &mut Vec<Parameter>,
                             sites: &mut Vec<QuantSite>,
                             enabled: bool,
                             name: String,
                             bits: u8,
                             role: SiteRole|
         -> Result<Option<usize>> {
            if !enabled || bits == 32 {
                return Ok(None);
            }
            let kind = match role {
                SiteRole::Activation => QuantKind::ActivationAsymmetric,
                SiteRole::Weight => QuantKind::WeightSymmetric,
                SiteRole::Probs => QuantKind::ActivationUnsigned,
            };
            let qcfg = QuantizerConfig::new(bits, kind, cfg.scale_mode)?;
            let state = QuantizerState::init(&qcfg);
            let alpha_param = if cfg.scale_mode == ScaleMode::Learned {
                let idx = params.len();
                params.push(Parameter {
                    name: format!("{name}.alpha"),
                    value: Tensor::scalar(1.0),
                });
                Some(idx)
            } else {
                None
            };
            sites.push(QuantSite { name, cfg: qcfg, state, alpha_param });
            Ok(Some(sites.len() - 1))
        };

        let make_linear = |params: &mut Vec<Parameter>,
                               sites: &mut Vec<QuantSite>,
                               rng: &mut ChaCha8Rng,
                               name: &str,
                               din: usize,
                               dout: usize,
                               enabled: bool,
                               w_bits: u8,
                               a_bits: u8|
         -> Result<LinearIdx> {
            let w = params.len();
            params.push(Parameter {
                name: format!("{name}.w"),
                value: Tensor::randn(&[dout, din], 0.0, std, rng),
            });
            let b = params.len();
            params.push(Parameter {
                name: format!("{name}.b"),
                value: Tensor::zeros(&[dout]),
            });
            let on = enabled && quant_everything;
            let act_site = make_site(
                params,
                sites,
                on,
                format!("{name}.act"),
                a_bits,
                SiteRole::Activation,
            )?;
            let w_site =
                make_site(params, sites, on, format!("{name}.wq"), w_bits, SiteRole::Weight)?;
            Ok(LinearIdx { w, b, act_site, w_site })
        };

        let patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
        let patch = make_linear(
            &mut params,
            &mut sites,
            &mut rng,
            "patch",
            patch_in,
            d,
            true,
            cfg.first_last_bits,
            cfg.first_last_bits,
        )?;
        let cls = push_param(
            &mut params,
            "cls".to_string(),
            Tensor::randn(&[1, 1, d], 0.0, std, &mut rng),
        );
        let pos = push_param(
            &mut params,
            "pos".to_string(),
            Tensor::randn(&[1, cfg.seq_len(), d], 0.0, std, &mut rng),
        );

        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let pfx = format!("block{l}");
            let ln1_g = push_param(&mut params, format!("{pfx}.ln1.g"), Tensor::full(&[d], 1.0));
            let ln1_b = push_param(&mut params, format!("{pfx}.ln1.b"), Tensor::zeros(&[d]));
            let q = make_linear(
                &mut params,
                &mut sites,
                &mut rng,
                &format!("{pfx}.q"),
                d,
                d,
                cfg.quant_parts.qkv_linears,
                cfg.w_bits,
                cfg.a_bits,
            )?;
            let k = make_linear(
                &mut params,
                &mut sites,
                &mut rng,
                &format!("{pfx}.k"),
                d,
                d,
                cfg.quant_parts.qkv_linears,
                cfg.w_bits,
                cfg.a_bits,
            )?;
            let v = make_linear(
                &mut params,
                &mut sites,
                &mut rng,
                &format!("{pfx}.v"),
                d,
                d,
                cfg.quant_parts.qkv_linears,
                cfg.w_bits,
                cfg.a_bits,
            )?;
            let out = make_linear(
                &mut params,
                &mut sites,
                &mut rng,
                &format!("{pfx}.out"),
                d,
                d,
                cfg.quant_parts.mhsa_out_weights,
                cfg.w_bits,
                cfg.a_bits,
            )?;
            let ln2_g = push_param(&mut params, format!("{pfx}.ln2.g"), Tensor::full(&[d], 1.0));
            let ln2_b = push_param(&mut params, format!("{pfx}.ln2.b"), Tensor::zeros(&[d]));
            let hidden = d * cfg.mlp_ratio;
            let fc1 = make_linear(
                &mut params,
                &mut sites,
                &mut rng,
                &format!("{pfx}.fc1"),
                d,
                hidden,
                cfg.quant_parts.mlp,
                cfg.w_bits,
                cfg.a_bits,
            )?;
            let fc2 = make_linear(
                &mut params,
                &mut sites,
                &mut rng,
                &format!("{pfx}.fc2"),
                hidden,
                d,
                cfg.quant_parts.mlp,
                cfg.w_bits,
                cfg.a_bits,
            )?;
            let irm = if cfg.irm_enabled {
                Some(IrmIdx {
                    gamma_q: push_param(
                        &mut params,
                        format!("{pfx}.irm.gamma_q"),
                        Tensor::full(&[cfg.heads], 1.0),
                    ),
                    beta_q: push_param(
                        &mut params,
                        format!("{pfx}.irm.beta_q"),
                        Tensor::zeros(&[cfg.heads]),
                    ),
                    gamma_k: push_param(
                        &mut params,
                        format!("{pfx}.irm.gamma_k"),
                        Tensor::full(&[cfg.heads], 1.0),
                    ),
                    beta_k: push_param(
                        &mut params,
                        format!("{pfx}.irm.beta_k"),
                        Tensor::zeros(&[cfg.heads]),
                    ),
                })
            } else {
                None
            };
            let attn_on = cfg.quant_parts.attention_weights && quant_everything;
            let q_tilde_site = make_site(
                &mut params,
                &mut sites,
                attn_on,
                format!("{pfx}.q_tilde"),
                cfg.a_bits,
                SiteRole::Activation,
            )?;
            let k_tilde_site = make_site(
                &mut params,
                &mut sites,
                attn_on,
                format!("{pfx}.k_tilde"),
                cfg.a_bits,
                SiteRole::Activation,
            )?;
            let v_site = make_site(
                &mut params,
                &mut sites,
                attn_on,
                format!("{pfx}.v_act"),
                cfg.a_bits,
                SiteRole::Activation,
            )?;
            let probs_site = make_site(
                &mut params,
                &mut sites,
                attn_on,
                format!("{pfx}.probs"),
                cfg.a_bits,
                SiteRole::Probs,
            )?;
            blocks.push(BlockIdx {
                ln1_g,
                ln1_b,
                q,
                k,
                v,
                out,
                ln2_g,
                ln2_b,
                fc1,
                fc2,
                irm,
                q_tilde_site,
                k_tilde_site,
                v_site,
                probs_site,
            });
        }

        let ln_f_g = push_param(&mut params, "final_ln.g".to_string(), Tensor::full(&[d], 1.0));
        let ln_f_b = push_param(&mut params, "final_ln.b".to_string(), Tensor::zeros(&[d]));
        let head = make_linear(
            &mut params,
            &mut sites,
            &mut rng,
            "head",
            d,
            cfg.classes,
            true,
            cfg.first_last_bits,
            cfg.first_last_bits,
        )?;

        let layout = Layout { patch, cls, pos, blocks, ln_f_g, ln_f_b, head };
        Ok(QVit { cfg, params, sites, layout })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copy parameters by name from a (float) teacher. Quantizer scales and
    /// rectifier parameters keep their fresh initialization.
    pub fn init_from(&mut self, teacher: &QVit) -> Result<()> {
        for p in &mut self.params {
            if let Some(src) = teacher.params.iter().find(|t| t.name == p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::config(format!(
                        "parameter {} has shape {:?} in the teacher but {:?} here",
                        p.name,
                        src.value.shape(),
                        p.value.shape()
                    )));
                }
                p.value = src.value.clone();
            }
        }
        Ok(())
    }

    /// Clamp constrained parameters after an optimizer step: learned step
    /// sizes stay positive, rectifier gains stay away from zero.
    pub fn apply_constraints(&mut self) {
        for site in &self.sites {
            if let Some(ap) = site.alpha_param {
                let v = self.params[ap].value.item();
                if v < ALPHA_FLOOR {
                    self.params[ap].value = Tensor::scalar(ALPHA_FLOOR);
                }
            }
        }
        if self.cfg.irm_enabled {
            for block in &self.layout.blocks {
                if let Some(irm) = &block.irm {
                    for idx in [irm.gamma_q, irm.gamma_k] {
                        let t = &self.params[idx].value;
                        if t.data().iter().any(|g| g.abs() < GAMMA_FLOOR) {
                            self.params[idx].value = t.map(|g| {
                                if g.abs() < GAMMA_FLOOR {
                                    GAMMA_FLOOR * if g < 0.0 { -1.0 } else { 1.0 }
                                } else {
                                    g
                                }
                            });
                        }
                    }
                }
            }
        }
    }

    /// Run a calibration pass: float forward feeding every quantizer site's
    /// statistics. Must precede quantized training so scales start from the
    /// live activation ranges.
    pub fn calibrate(&mut self, tape: &mut Tape, images: &Tensor) -> Result<()> {
        self.forward(tape, images, ForwardMode::Calibrate, false)?;
        // learned mode: move the calibrated scale into the trainable alpha
        for si in 0..self.sites.len() {
            if let Some(ap) = self.sites[si].alpha_param {
                self.params[ap].value = Tensor::scalar(self.sites[si].state.alpha);
            }
        }
        Ok(())
    }

    fn site_apply(
        &mut self,
        tape: &mut Tape,
        mounted: &[Value],
        site_idx: Option<usize>,
        x: Value,
        mode: ForwardMode,
        train: bool,
    ) -> Result<Value> {
        let Some(si) = site_idx else { return Ok(x) };
        match mode {
            ForwardMode::Passthrough => Ok(x),
            ForwardMode::Calibrate => {
                let input = tape.value(x).clone();
                let site = &mut self.sites[si];
                quant::observe_batch(&mut site.state, &site.cfg, &input);
                // learned symmetric weights start from the mean-magnitude
                // rule; the min/max scale strands most of a low-bit grid on
                // the tail outliers
                if site.cfg.scale_mode == ScaleMode::Learned
                    && site.cfg.kind == quant::QuantKind::WeightSymmetric
                {
                    let mean_abs = input.data().iter().map(|v| v.abs()).sum::<f64>()
                        / input.numel() as f64;
                    site.state.alpha =
                        (2.0 * mean_abs / site.state.q_p.sqrt()).max(ALPHA_FLOOR);
                }
                Ok(x)
            }
            ForwardMode::Quantized | ForwardMode::Surrogate => {
                let exec = if mode == ForwardMode::Surrogate {
                    QuantExec::ClipOnly
                } else {
                    QuantExec::Round
                };
                if train && self.sites[si].cfg.scale_mode == ScaleMode::StaticEma {
                    let input = tape.value(x).clone();
                    let site = &mut self.sites[si];
                    quant::observe_batch(&mut site.state, &site.cfg, &input);
                }
                if let Some(ap) = self.sites[si].alpha_param {
                    self.sites[si].state.alpha = self.params[ap].value.item().max(ALPHA_FLOOR);
                }
                let alpha_value = self.sites[si].alpha_param.map(|ap| mounted[ap]);
                let state = self.sites[si].state;
                tape.fake_quant(x, &state, exec, alpha_value)
            }
        }
    }

    fn linear(
        &mut self,
        tape: &mut Tape,
        mounted: &[Value],
        idx: LinearIdx,
        x: Value,
        mode: ForwardMode,
        train: bool,
    ) -> Result<Value> {
        let xq = self.site_apply(tape, mounted, idx.act_site, x, mode, train)?;
        let wq = self.site_apply(tape, mounted, idx.w_site, mounted[idx.w], mode, train)?;
        let wt = tape.permute(wq, &[1, 0])?;
        let y = tape.matmul(xq, wt)?;
        tape.add(y, mounted[idx.b])
    }

    /// `[B, T, D] -> [B, H, T, dh]`
    fn split_heads(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let shape = tape.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[1]);
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let r = tape.reshape(x, vec![b, t, h, dh])?;
        tape.permute(r, &[0, 2, 1, 3])
    }

    /// `[B, H, T, dh] -> [B, T, D]`
    fn merge_heads(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let shape = tape.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[2]);
        let p = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(p, vec![b, t, self.cfg.embed_dim])
    }

    /// Full forward pass. Mounts every parameter onto the tape, so gradients
    /// from any loss built on `logits` (or telemetry values) key into this
    /// model's parameter indices.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        images: &Tensor,
        mode: ForwardMode,
        train: bool,
    ) -> Result<ForwardOutput> {
        let expect = [
            0,
            self.cfg.image_size,
            self.cfg.image_size,
            self.cfg.channels,
        ];
        if images.rank() != 4 || images.shape()[1..] != expect[1..] {
            return Err(Error::config(format!(
                "image batch {:?} does not match configured {}x{}x{}",
                images.shape(),
                self.cfg.image_size,
                self.cfg.image_size,
                self.cfg.channels
            )));
        }
        let batch = images.shape()[0];
        let mounted: Vec<Value> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.clone(), i))
            .collect();

        // patch embedding, class token, positions
        let img = tape.constant(images.clone());
        let patches = tape.image_patches(img, self.cfg.patch_size)?;
        let layout_patch = self.layout.patch;
        let tok = self.linear(tape, &mounted, layout_patch, patches, mode, train)?;
        let cls = tape.broadcast_to(mounted[self.layout.cls], &[batch, 1, self.cfg.embed_dim])?;
        let x = tape.concat(&[cls, tok], 1)?;
        let mut x = tape.add(x, mounted[self.layout.pos])?;

        let mut telemetry = Telemetry::default();
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        for l in 0..self.layout.blocks.len() {
            let block = self.layout.blocks[l].clone();

            // attention
            let h1 = layer_norm(tape, x, mounted[block.ln1_g], mounted[block.ln1_b], LN_EPS)?;
            let q = self.linear(tape, &mounted, block.q, h1, mode, train)?;
            let k = self.linear(tape, &mounted, block.k, h1, mode, train)?;
            let v = self.linear(tape, &mounted, block.v, h1, mode, train)?;
            let q = self.split_heads(tape, q)?;
            let k = self.split_heads(tape, k)?;
            let v = self.split_heads(tape, v)?;

            let (q_tilde, k_tilde) = if let Some(irm) = &block.irm {
                let gq = tape.reshape(mounted[irm.gamma_q], vec![1, self.cfg.heads, 1, 1])?;
                let bq = tape.reshape(mounted[irm.beta_q], vec![1, self.cfg.heads, 1, 1])?;
                let gk = tape.reshape(mounted[irm.gamma_k], vec![1, self.cfg.heads, 1, 1])?;
                let bk = tape.reshape(mounted[irm.beta_k], vec![1, self.cfg.heads, 1, 1])?;
                (
                    irm_transform(tape, q, gq, bq, IRM_EPS, &[2, 3])?,
                    irm_transform(tape, k, gk, bk, IRM_EPS, &[2, 3])?,
                )
            } else {
                (q, k)
            };

            let qq = self.site_apply(tape, &mounted, block.q_tilde_site, q_tilde, mode, train)?;
            let kk = self.site_apply(tape, &mounted, block.k_tilde_site, k_tilde, mode, train)?;
            let kt = tape.permute(kk, &[0, 1, 3, 2])?;
            let logits_scaled = tape.matmul(qq, kt)?;
            let attn = tape.mul_scalar(logits_scaled, scale)?;
            let probs = tape.softmax_lastdim(attn)?;
            let probs_q =
                self.site_apply(tape, &mounted, block.probs_site, probs, mode, train)?;
            let vv = self.site_apply(tape, &mounted, block.v_site, v, mode, train)?;
            let ctx = tape.matmul(probs_q, vv)?;
            let merged = self.merge_heads(tape, ctx)?;
            let attn_out = self.linear(tape, &mounted, block.out, merged, mode, train)?;
            x = tape.add(x, attn_out)?;

            // mlp
            let h2 = layer_norm(tape, x, mounted[block.ln2_g], mounted[block.ln2_b], LN_EPS)?;
            let m = self.linear(tape, &mounted, block.fc1, h2, mode, train)?;
            let m = tape.gelu(m)?;
            let m = self.linear(tape, &mounted, block.fc2, m, mode, train)?;
            x = tape.add(x, m)?;

            telemetry.layers.push(LayerTelemetry {
                q_raw: q,
                k_raw: k,
                q_tilde,
                k_tilde,
                attn_probs: probs,
            });
        }

        let xf = layer_norm(
            tape,
            x,
            mounted[self.layout.ln_f_g],
            mounted[self.layout.ln_f_b],
            LN_EPS,
        )?;
        let cls_out = tape.select_index(xf, 1, 0)?;
        let layout_head = self.layout.head;
        let logits = self.linear(tape, &mounted, layout_head, cls_out, mode, train)?;

        Ok(ForwardOutput { logits, telemetry })
    }

    /// Pull telemetry tensors off the tape; quantized codes are included when
    /// the corresponding sites exist (for entropy and histogram reports).
    pub fn snapshot_telemetry(
        &self,
        tape: &Tape,
        telemetry: &Telemetry,
        with_codes: bool,
    ) -> Result<TelemetrySnapshot> {
        let mut out = TelemetrySnapshot::default();
        for (l, layer) in telemetry.layers.iter().enumerate() {
            let block = &self.layout.blocks[l];
            let q_tilde = tape.value(layer.q_tilde).clone();
            let k_tilde = tape.value(layer.k_tilde).clone();
            let mut q_codes = None;
            let mut k_codes = None;
            if with_codes {
                if let Some(si) = block.q_tilde_site {
                    let site = &self.sites[si];
                    q_codes = Some(quant::quantize_activation(
                        &q_tilde,
                        &site.state,
                        site.cfg.bits,
                    )?);
                }
                if let Some(si) = block.k_tilde_site {
                    let site = &self.sites[si];
                    k_codes = Some(quant::quantize_activation(
                        &k_tilde,
                        &site.state,
                        site.cfg.bits,
                    )?);
                }
            }
            out.layers.push(LayerSnapshot {
                q_raw: tape.value(layer.q_raw).clone(),
                k_raw: tape.value(layer.k_raw).clone(),
                q_tilde,
                k_tilde,
                attn_probs: tape.value(layer.attn_probs).clone(),
                q_codes,
                k_codes,
            });
        }
        Ok(out)
    }

    /// Rectifier parameter values per layer: (gamma_q, beta_q, gamma_k, beta_k).
    pub fn irm_params(&self, layer: usize) -> Option<(Tensor, Tensor, Tensor, Tensor)> {
        self.layout.blocks[layer].irm.as_ref().map(|irm| {
            (
                self.params[irm.gamma_q].value.clone(),
                self.params[irm.beta_q].value.clone(),
                self.params[irm.gamma_k].value.clone(),
                self.params[irm.beta_k].value.clone(),
            )
        })
    }
}

/// Rectify a tensor toward unit-variance statistics before quantization:
/// `(x - mean + beta) / (gamma * sqrt(var + eps))`, with mean and variance
/// taken over `stats_axes`. `gamma`/`beta` must broadcast against `x`.
pub fn irm_transform(
    tape: &mut Tape,
    x: Value,
    gamma: Value,
    beta: Value,
    eps: f64,
    stats_axes: &[usize],
) -> Result<Value> {
    if eps < 0.0 {
        return Err(Error::contract("irm_transform needs eps >= 0".to_string()));
    }
    if tape.value(gamma).data().iter().any(|&g| g == 0.0) {
        return Err(Error::contract("irm_transform needs gamma != 0".to_string()));
    }
    let mu = tape.mean_axes(x, stats_axes, true)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axes(sq, stats_axes, true)?;
    let var_eps = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(var_eps)?;
    let num = tape.add(centered, beta)?;
    let den = tape.mul(gamma, std)?;
    tape.div(num, den)
}

/// Static size/compute accounting for a configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: usize,
    pub size_mb: f64,
    pub bops: f64,
}

/// Parameter count, on-disk size and bit-operations.
///
/// Size convention: at 32-32 everything is 32-bit; otherwise the patch
/// embedding and classifier weights count at `first_last_bits` and every
/// remaining parameter at `w_bits`. Megabytes are decimal (1e6 bytes).
/// BOPs weigh each multiply-accumulate by the product of its operand
/// bit-widths, for a single image.
pub fn model_stats(cfg: &ModelConfig) -> Result<ModelStats> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let n = cfg.grid_tokens();
    let t = cfg.seq_len();
    let hidden = d * cfg.mlp_ratio;
    let patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;

    let first_last_params = patch_in * d + d + d * cfg.classes + cfg.classes;
    let mut body_params = d + t * d + 2 * d; // class token, positions, final norm
    body_params += cfg.depth
        * (4 * d // two layer norms
            + 4 * (d * d + d) // qkv + out projections
            + (d * hidden + hidden) + (hidden * d + d)); // mlp
    if cfg.irm_enabled {
        body_params += cfg.depth * 4 * cfg.heads;
    }
    let params = first_last_params + body_params;

    let (fl_bits, body_bits) = if cfg.w_bits == 32 && cfg.a_bits == 32 {
        (32u32, 32u32)
    } else {
        (cfg.first_last_bits as u32, cfg.w_bits as u32)
    };
    let bytes =
        first_last_params as f64 * fl_bits as f64 / 8.0 + body_params as f64 * body_bits as f64 / 8.0;
    let size_mb = bytes / 1e6;

    // multiply-accumulates per image
    let dh = cfg.head_dim();
    let fl2 = (fl_bits * fl_bits) as f64;
    let wa = (cfg.w_bits as u32 * cfg.a_bits as u32) as f64;
    let aa = (cfg.a_bits as u32 * cfg.a_bits as u32) as f64;
    let mut bops = (n * patch_in * d) as f64 * fl2; // patch embedding
    let per_block_linear = 4 * t * d * d + t * d * hidden * 2;
    let per_block_attn = 2 * cfg.heads * t * t * dh;
    bops += cfg.depth as f64 * (per_block_linear as f64 * wa + per_block_attn as f64 * aa);
    bops += (d * cfg.classes) as f64 * fl2; // classifier on the class token

    Ok(ModelStats { params, size_mb, bops })
}

/// Published architectures for the size table plus the desk-scale tiny model.
pub fn preset(name: &str, w_bits: u8, a_bits: u8) -> Result<ModelConfig> {
    let (image_size, patch_size, depth, heads, embed_dim, classes, channels) = match name {
        "deit-s" => (224, 16, 12, 6, 384, 1000, 3),
        "deit-b" => (224, 16, 12, 12, 768, 1000, 3),
        "tiny" => (32, 8, 4, 4, 64, 4, 1),
        other => return Err(Error::config(format!("unknown preset '{other}'"))),
    };
    Ok(ModelConfig {
        image_size,
        patch_size,
        channels,
        depth,
        heads,
        embed_dim,
        mlp_ratio: 4,
        classes,
        w_bits,
        a_bits,
        first_last_bits: 8,
        irm_enabled: true,
        quant_parts: QuantParts::default(),
        scale_mode: ScaleMode::Learned,
    })
}
