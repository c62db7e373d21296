//! Analysis instruments: discrete entropy of quantized codes, Gaussian fits
//! with differential entropy, histogram exports, and the block-to-block
//! attention-distance matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{QVit, TelemetrySnapshot};
use crate::quant::QuantizedTensor;
use crate::tensor::Tensor;

/// Empirical Shannon entropy (nats) of the code distribution; `0 log 0 = 0`.
pub fn discrete_entropy(codes: &QuantizedTensor) -> f64 {
    discrete_entropy_slice(&codes.codes)
}

pub fn discrete_entropy_slice(codes: &[i32]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let mut counts: std::collections::BTreeMap<i32, u64> = std::collections::BTreeMap::new();
    for &c in codes {
        *counts.entry(c).or_insert(0) += 1;
    }
    let n = codes.len() as f64;
    -counts
        .values()
        .map(|&k| {
            let p = k as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: f64,
    pub sigma2: f64,
    /// `0.5 * ln(2 pi e sigma^2)`; negative infinity for constant input.
    pub diff_entropy: f64,
}

/// Sample mean, population variance, and Gaussian differential entropy.
pub fn gaussian_fit(values: &[f64]) -> Result<GaussianFit> {
    if values.len() < 2 {
        return Err(Error::contract(format!(
            "gaussian_fit needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma2 = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    Ok(GaussianFit {
        mu,
        sigma2,
        diff_entropy: gaussian_entropy(sigma2),
    })
}

pub fn gaussian_entropy(sigma2: f64) -> f64 {
    if sigma2 <= 0.0 {
        f64::NEG_INFINITY
    } else {
        0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma2).ln()
    }
}

/// Per (layer, head, q|k) entropy record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyEntry {
    pub layer: usize,
    pub head: usize,
    pub tensor: String,
    /// Discrete entropy of the quantized codes, when a quantizer exists.
    pub discrete_nats: Option<f64>,
    pub discrete_bits: Option<f64>,
    /// Statistics of the quantizer input (post-rectifier).
    pub mu: f64,
    pub sigma2: f64,
    pub gaussian_diff_entropy: f64,
    /// Closed-form entropy with the rectifier gain folded in as a
    /// multiplier on the raw variance. Reported as written even though the
    /// rectifier divides by that factor; kept for side-by-side comparison
    /// with the measured values, hence the flag.
    pub scaled_formula_nats: f64,
    pub formula_flag: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EntropyReport {
    pub entries: Vec<EntropyEntry>,
}

impl EntropyReport {
    /// Mean discrete entropy (nats) over all entries for one tensor tag.
    pub fn mean_discrete_nats(&self, tensor: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.tensor == tensor)
            .filter_map(|e| e.discrete_nats)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn head_slice(t: &Tensor, head: usize) -> Vec<f64> {
    // [B, H, T, d] -> all elements of one head
    let (b, h, rest) = (t.shape()[0], t.shape()[1], t.shape()[2] * t.shape()[3]);
    let mut out = Vec::with_capacity(b * rest);
    for bi in 0..b {
        let start = (bi * h + head) * rest;
        out.extend_from_slice(&t.data()[start..start + rest]);
    }
    out
}

fn head_codes(codes: &QuantizedTensor, head: usize) -> Vec<i32> {
    let (b, h, rest) = (
        codes.shape[0],
        codes.shape[1],
        codes.shape[2] * codes.shape[3],
    );
    let mut out = Vec::with_capacity(b * rest);
    for bi in 0..b {
        let start = (bi * h + head) * rest;
        out.extend_from_slice(&codes.codes[start..start + rest]);
    }
    out
}

/// Build the per-layer, per-head entropy report from captured telemetry.
pub fn entropy_report(model: &QVit, snap: &TelemetrySnapshot) -> Result<EntropyReport> {
    let mut report = EntropyReport::default();
    let eps = crate::model::IRM_EPS;
    for (layer, ls) in snap.layers.iter().enumerate() {
        let heads = ls.q_tilde.shape()[1];
        let irm = model.irm_params(layer);
        for head in 0..heads {
            for (tag, tilde, raw, codes) in [
                ("q", &ls.q_tilde, &ls.q_raw, &ls.q_codes),
                ("k", &ls.k_tilde, &ls.k_raw, &ls.k_codes),
            ] {
                let fit = gaussian_fit(&head_slice(tilde, head))?;
                let raw_fit = gaussian_fit(&head_slice(raw, head))?;
                let gamma = irm
                    .as_ref()
                    .map(|(gq, _, gk, _)| {
                        if tag == "q" {
                            gq.data()[head]
                        } else {
                            gk.data()[head]
                        }
                    })
                    .unwrap_or(1.0);
                let discrete = codes.as_ref().map(|c| discrete_entropy_slice(&head_codes(c, head)));
                report.entries.push(EntropyEntry {
                    layer,
                    head,
                    tensor: tag.to_string(),
                    discrete_nats: discrete,
                    discrete_bits: discrete.map(|d| d / 2f64.ln()),
                    mu: fit.mu,
                    sigma2: fit.sigma2,
                    gaussian_diff_entropy: fit.diff_entropy,
                    scaled_formula_nats: gaussian_entropy(
                        gamma * gamma * (raw_fit.sigma2 + eps),
                    ),
                    formula_flag: "as-written".to_string(),
                });
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramExport {
    pub layer: usize,
    pub head: usize,
    pub tensor: String,
    pub mu: f64,
    pub sigma2: f64,
    pub bin_left: Vec<f64>,
    pub bin_right: Vec<f64>,
    pub counts: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 64;

/// 64 uniform bins spanning `mu - 4 sigma .. mu + 4 sigma`; out-of-range
/// values land in the edge bins so counts always sum to the sample count.
pub fn histogram(values: &[f64]) -> Result<(GaussianFit, Vec<f64>, Vec<f64>, Vec<u64>)> {
    let fit = gaussian_fit(values)?;
    let half = (4.0 * fit.sigma2.sqrt()).max(1e-9);
    let lo = fit.mu - half;
    let width = 2.0 * half / HISTOGRAM_BINS as f64;
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &v in values {
        let bin = (((v - lo) / width).floor() as i64).clamp(0, HISTOGRAM_BINS as i64 - 1);
        counts[bin as usize] += 1;
    }
    let bin_left: Vec<f64> = (0..HISTOGRAM_BINS).map(|i| lo + i as f64 * width).collect();
    let bin_right: Vec<f64> = (0..HISTOGRAM_BINS)
        .map(|i| lo + (i + 1) as f64 * width)
        .collect();
    Ok((fit, bin_left, bin_right, counts))
}

/// Histogram exports for every (layer, head, q|k) in the snapshot.
pub fn histogram_exports(snap: &TelemetrySnapshot) -> Result<Vec<HistogramExport>> {
    let mut out = Vec::new();
    for (layer, ls) in snap.layers.iter().enumerate() {
        let heads = ls.q_tilde.shape()[1];
        for head in 0..heads {
            for (tag, t) in [("q", &ls.q_tilde), ("k", &ls.k_tilde)] {
                let values = head_slice(t, head);
                let (fit, bin_left, bin_right, counts) = histogram(&values)?;
                out.push(HistogramExport {
                    layer,
                    head,
                    tensor: tag.to_string(),
                    mu: fit.mu,
                    sigma2: fit.sigma2,
                    bin_left,
                    bin_right,
                    counts,
                });
            }
        }
    }
    Ok(out)
}

impl HistogramExport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for i in 0..self.counts.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                self.bin_left[i], self.bin_right[i], self.counts[i]
            ));
        }
        s
    }
}

/// `L x L` matrix of mean pairwise l2 distances between per-block attention
/// probability maps, averaged over heads and samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionDistanceMatrix {
    pub layers: usize,
    /// Row-major `layers * layers` distances.
    pub values: Vec<f64>,
}

impl AttentionDistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.layers + j]
    }

    pub fn frobenius_distance(&self, other: &AttentionDistanceMatrix) -> f64 {
        assert_eq!(self.layers, other.layers);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.layers {
            let row: Vec<String> = (0..self.layers)
                .map(|j| format!("{}", self.get(i, j)))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn attention_distance(snap: &TelemetrySnapshot) -> Result<AttentionDistanceMatrix> {
    if snap.layers.is_empty() {
        return Err(Error::contract(
            "attention_distance needs telemetry for every block".to_string(),
        ));
    }
    let l = snap.layers.len();
    let shape = snap.layers[0].attn_probs.shape().to_vec();
    for ls in &snap.layers {
        if ls.attn_probs.shape() != shape.as_slice() {
            return Err(Error::contract(
                "attention maps disagree in shape across blocks".to_string(),
            ));
        }
    }
    let (b, h) = (shape[0], shape[1]);
    let map = shape[2] * shape[3];
    let mut values = vec![0.0f64; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            let pi = snap.layers[i].attn_probs.data();
            let pj = snap.layers[j].attn_probs.data();
            let mut acc = 0.0f64;
            for bh in 0..b * h {
                let s = bh * map;
                let d: f64 = pi[s..s + map]
                    .iter()
                    .zip(&pj[s..s + map])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                acc += d.sqrt();
            }
            let mean = acc / (b * h) as f64;
            values[i * l + j] = mean;
            values[j * l + i] = mean;
        }
    }
    Ok(AttentionDistanceMatrix { layers: l, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes_of(v: Vec<i32>) -> QuantizedTensor {
        QuantizedTensor {
            shape: vec![v.len()],
            codes: v,
            alpha: 1.0,
            zero_point: 0.0,
            bits: 2,
        }
    }

    #[test]
    fn entropy_degenerate_uniform_binary() {
        assert_eq!(discrete_entropy(&codes_of(vec![1, 1, 1, 1])), 0.0);

        let h = discrete_entropy(&codes_of(vec![-2, -1, 0, 1]));
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!((h / 2f64.ln() - 2.0).abs() < 1e-12, "uniform 4-level = 2 bits");

        let h = discrete_entropy(&codes_of(vec![0, 0, 1, 1]));
        assert!((h - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounded_by_bits() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for bits in [2u32, 3, 4] {
            let levels = 1i32 << bits;
            let codes: Vec<i32> = (0..4096)
                .map(|_| rng.gen_range(0..levels) - levels / 2)
                .collect();
            let h = discrete_entropy(&codes_of(codes));
            assert!(h <= bits as f64 * 2f64.ln() + 1e-9);
        }
    }

    #[test]
    fn gaussian_fit_hand_values() {
        let fit = gaussian_fit(&[-1.0, 1.0]).unwrap();
        assert_eq!(fit.mu, 0.0);
        assert_eq!(fit.sigma2, 1.0);
        assert!((fit.diff_entropy - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-12);

        let fit = gaussian_fit(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(fit.sigma2, 0.0);
        assert!(fit.diff_entropy == f64::NEG_INFINITY);

        assert!(gaussian_fit(&[1.0]).is_err());
    }

    #[test]
    fn gaussian_fit_recovers_standard_normal() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::randn(&[100_000], 0.0, 1.0, &mut rng);
        let fit = gaussian_fit(t.data()).unwrap();
        assert!(fit.mu.abs() < 0.02, "mu {}", fit.mu);
        assert!((fit.sigma2 - 1.0).abs() < 0.02, "sigma2 {}", fit.sigma2);
    }

    #[test]
    fn histogram_conserves_mass() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::randn(&[10_000], 2.0, 3.0, &mut rng);
        let (_, left, right, counts) = histogram(t.data()).unwrap();
        assert_eq!(counts.iter().sum::<u64>(), 10_000);
        assert_eq!(left.len(), HISTOGRAM_BINS);
        assert_eq!(right.len(), HISTOGRAM_BINS);
        for i in 0..HISTOGRAM_BINS {
            assert!(left[i] < right[i]);
        }
    }

    #[test]
    fn attention_distance_zero_diagonal_symmetric() {
        use crate::model::LayerSnapshot;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let p = Tensor::randn(&[2, 2, 3, 3], 0.0, 1.0, rng);
            LayerSnapshot {
                q_raw: p.clone(),
                k_raw: p.clone(),
                q_tilde: p.clone(),
                k_tilde: p.clone(),
                attn_probs: p,
                q_codes: None,
                k_codes: None,
            }
        };
        let snap = TelemetrySnapshot {
            layers: vec![mk(&mut rng), mk(&mut rng), mk(&mut rng)],
        };
        let m = attention_distance(&snap).unwrap();
        for i in 0..3 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        // triangle inequality on the single triple
        assert!(m.get(0, 2) <= m.get(0, 1) + m.get(1, 2) + 1e-12);

        // identical attention maps in two blocks give distance zero
        let tied = TelemetrySnapshot {
            layers: vec![snap.layers[0].clone(), snap.layers[0].clone()],
        };
        let m = attention_distance(&tied).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn attention_distance_requires_telemetry() {
        let snap = TelemetrySnapshot::default();
        assert!(matches!(
            attention_distance(&snap),
            Err(Error::Contract(_))
        ));
    }
}
