//! Distillation objectives.
//!
//! The logit term averages cross-entropy against the true label and the
//! teacher's hard prediction. The distribution-guided term matches
//! patch-similarity Gram matrices built from each head's q and k activations
//! (student: post-rectifier, pre-quantization; teacher: raw float) so the
//! student reproduces the teacher's attention-pattern structure rather than
//! just its output logits.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::model::Telemetry;
use crate::tensor::{matmul2d_bt, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationConfig {
    /// Weight on the similarity-matrix term.
    #[serde(default = "default_lambda")]
    pub lambda_dgd: f64,
    /// Compare row-l2-normalized Gram matrices (default) or the raw ones.
    #[serde(default = "default_use_normalized")]
    pub use_normalized: bool,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_use_normalized() -> bool {
    true
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig {
            lambda_dgd: 1.0,
            use_normalized: true,
            teacher_checkpoint: None,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_dgd < 0.0 {
            return Err(Error::config(format!(
                "lambda_dgd must be nonnegative, got {}",
                self.lambda_dgd
            )));
        }
        Ok(())
    }
}

/// Frozen teacher activations for one batch. Everything is detached: no
/// gradient flows into the teacher.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub logits: Tensor,
    /// Per layer: raw float q and k per head, `[B, H, T, dh]`.
    pub qk: Vec<(Tensor, Tensor)>,
}

/// Per-row argmax; ties break toward the smallest index.
pub fn hard_label(logits: &Tensor) -> Result<Vec<usize>> {
    if logits.rank() != 2 {
        return Err(Error::dim(format!(
            "hard_label expects [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let c = logits.shape()[1];
    if c == 0 {
        return Err(Error::dim("hard_label needs at least one class".to_string()));
    }
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Average of the true-label and teacher-hard-label cross-entropies.
/// Gradient flows only into `student_logits`.
pub fn dist_loss(
    tape: &mut Tape,
    student_logits: Value,
    labels: &[usize],
    teacher_logits: &Tensor,
) -> Result<Value> {
    if tape.value(student_logits).shape() != teacher_logits.shape() {
        return Err(Error::dim(format!(
            "student logits {:?} vs teacher logits {:?}",
            tape.value(student_logits).shape(),
            teacher_logits.shape()
        )));
    }
    let teacher_labels = hard_label(teacher_logits)?;
    let ce_true = tape.cross_entropy(student_logits, labels)?;
    let ce_teacher = tape.cross_entropy(student_logits, &teacher_labels)?;
    let sum = tape.add(ce_true, ce_teacher)?;
    tape.mul_scalar(sum, 0.5)
}

/// Patch-similarity pattern of one `[T, d]` activation slice.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    /// Row-l2-normalized Gram matrix (zero rows stay zero).
    pub values: Tensor,
    /// The raw Gram matrix `act . act^T`.
    pub gram: Tensor,
}

pub fn similarity_matrix(act: &Tensor) -> Result<SimilarityMatrix> {
    if act.rank() != 2 {
        return Err(Error::dim(format!(
            "similarity_matrix expects [tokens, dim], got {:?}",
            act.shape()
        )));
    }
    let (t, d) = (act.shape()[0], act.shape()[1]);
    let gram_data = matmul2d_bt(act.data(), act.data(), t, d, t);
    let mut values = gram_data.clone();
    for row in values.chunks_mut(t) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::new(vec![t, t], values)?,
        gram: Tensor::new(vec![t, t], gram_data)?,
    })
}

/// Batched Gram matrices for `[B, H, T, d]` activations: `[B, H, T, T]`,
/// optionally row-normalized. Plain tensor math for the teacher side.
pub fn similarity_gram_batched(act: &Tensor, normalize: bool) -> Result<Tensor> {
    if act.rank() != 4 {
        return Err(Error::dim(format!(
            "expected [B, H, T, d] activations, got {:?}",
            act.shape()
        )));
    }
    let (b, h, t, d) = (
        act.shape()[0],
        act.shape()[1],
        act.shape()[2],
        act.shape()[3],
    );
    let mut out = vec![0.0f64; b * h * t * t];
    for bi in 0..b * h {
        let slice = &act.data()[bi * t * d..(bi + 1) * t * d];
        let mut gram = matmul2d_bt(slice, slice, t, d, t);
        if normalize {
            for row in gram.chunks_mut(t) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                }
            }
        }
        out[bi * t * t..(bi + 1) * t * t].copy_from_slice(&gram);
    }
    Tensor::new(vec![b, h, t, t], out)
}

/// Frobenius norm of `a - b`.
pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "frobenius_distance shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Similarity-matrix distillation term: for every layer and head, the
/// Frobenius norm of the student/teacher Gram difference for q and for k,
/// averaged over the batch and summed over heads and layers.
pub fn dgd_loss(
    tape: &mut Tape,
    telemetry: &Telemetry,
    teacher: &TeacherOutputs,
    cfg: &DistillationConfig,
) -> Result<Value> {
    cfg.validate()?;
    if telemetry.layers.is_empty() {
        return Err(Error::contract(
            "dgd_loss needs captured telemetry for every layer".to_string(),
        ));
    }
    if telemetry.layers.len() != teacher.qk.len() {
        return Err(Error::contract(format!(
            "student telemetry has {} layers, teacher {}",
            telemetry.layers.len(),
            teacher.qk.len()
        )));
    }
    let mut total: Option<Value> = None;
    for (layer, (tq, tk)) in telemetry.layers.iter().zip(&teacher.qk) {
        for (student_act, teacher_act) in [(layer.q_tilde, tq), (layer.k_tilde, tk)] {
            if tape.value(student_act).shape() != teacher_act.shape() {
                return Err(Error::contract(format!(
                    "student activations {:?} do not mirror the teacher's {:?}",
                    tape.value(student_act).shape(),
                    teacher_act.shape()
                )));
            }
            let term = gram_difference_term(tape, student_act, teacher_act, cfg)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("at least one layer checked above"))
}

fn gram_difference_term(
    tape: &mut Tape,
    student_act: Value,
    teacher_act: &Tensor,
    cfg: &DistillationConfig,
) -> Result<Value> {
    let tpose = tape.permute(student_act, &[0, 1, 3, 2])?;
    let mut gram = tape.matmul(student_act, tpose)?;
    if cfg.use_normalized {
        gram = tape.row_normalize_l2(gram)?;
    }
    let target = tape.constant(similarity_gram_batched(teacher_act, cfg.use_normalized)?);
    let diff = tape.sub(gram, target)?;
    let sq = tape.mul(diff, diff)?;
    let ssum = tape.sum_axes(sq, &[2, 3], false)?; // [B, H]
    let fro = tape.sqrt(ssum)?;
    let per_head = tape.mean_axes(fro, &[0], false)?; // mean over batch -> [H]
    tape.sum_all(per_head)
}

pub struct LossBreakdown {
    pub total: Value,
    pub dist: Value,
    pub dgd: Option<Value>,
}

/// `dist + lambda_dgd * dgd`, with both terms exposed for logging.
pub fn total_loss(
    tape: &mut Tape,
    student_logits: Value,
    labels: &[usize],
    telemetry: &Telemetry,
    teacher: &TeacherOutputs,
    cfg: &DistillationConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let dist = dist_loss(tape, student_logits, labels, &teacher.logits)?;
    if cfg.lambda_dgd == 0.0 {
        return Ok(LossBreakdown { total: dist, dist, dgd: None });
    }
    let dgd = dgd_loss(tape, telemetry, teacher, cfg)?;
    let weighted = tape.mul_scalar(dgd, cfg.lambda_dgd)?;
    let total = tape.add(dist, weighted)?;
    Ok(LossBreakdown { total, dist, dgd: Some(dgd) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerTelemetry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hard_label_examples() {
        let t = Tensor::new(vec![1, 2], vec![0.1, 0.9]).unwrap();
        assert_eq!(hard_label(&t).unwrap(), vec![1]);

        // tie breaks toward the smallest index
        let t = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        assert_eq!(hard_label(&t).unwrap(), vec![0]);

        let t = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        assert_eq!(hard_label(&t).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn dist_loss_uniform_is_ln2() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap());
        let teacher = Tensor::new(vec![1, 2], vec![0.0, 9.0]).unwrap();
        let loss = dist_loss(&mut tape, s, &[0], &teacher).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dist_loss_collapses_when_labels_agree() {
        let mut tape = Tape::new();
        let logits = Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.5, 2.0, 0.0, -0.3]).unwrap();
        let s = tape.constant(logits.clone());
        // teacher predicts exactly the true labels
        let teacher =
            Tensor::new(vec![2, 3], vec![0.0, 0.0, 5.0, 5.0, 0.0, 0.0]).unwrap();
        let labels = [2usize, 0];
        let loss = dist_loss(&mut tape, s, &labels, &teacher).unwrap();
        let plain = tape.cross_entropy(s, &labels).unwrap();
        assert!((tape.value(loss).item() - tape.value(plain).item()).abs() < 1e-12);
    }

    #[test]
    fn dist_loss_hand_value() {
        // softmax([ln 1, ln 3]) = (1/4, 3/4); y = 0, y_t = 1:
        // 0.5*ln4 + 0.5*ln(4/3)
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let teacher = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let loss = dist_loss(&mut tape, s, &[0], &teacher).unwrap();
        let expected = 0.5 * 4f64.ln() + 0.5 * (4f64 / 3.0).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((expected - 0.8370).abs() < 1e-4);
    }

    #[test]
    fn similarity_matrix_orthonormal_rows() {
        let act = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let sm = similarity_matrix(&act).unwrap();
        assert_eq!(sm.gram.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(sm.values.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn similarity_matrix_hand_expansion() {
        let act = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let sm = similarity_matrix(&act).unwrap();
        assert_eq!(sm.gram.data(), &[2.0, 2.0, 2.0, 2.0]);
        let r = 0.5f64.sqrt();
        for v in sm.values.data() {
            assert!((v - r).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_invariant_to_orthogonal_rotation() {
        // R = rotation by 30 degrees
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let act = Tensor::new(vec![3, 2], vec![1.0, 0.5, -0.3, 2.0, 0.7, -1.1]).unwrap();
        let rotated: Vec<f64> = act
            .data()
            .chunks(2)
            .flat_map(|row| [row[0] * c - row[1] * s, row[0] * s + row[1] * c])
            .collect();
        let rotated = Tensor::new(vec![3, 2], rotated).unwrap();
        let a = similarity_matrix(&act).unwrap();
        let b = similarity_matrix(&rotated).unwrap();
        assert!(a.gram.max_abs_diff(&b.gram) < 1e-12);
    }

    #[test]
    fn gram_is_symmetric_and_rows_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let act = Tensor::randn(&[5, 3], 0.0, 1.0, &mut rng);
        let sm = similarity_matrix(&act).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let g = sm.gram.data();
                assert!((g[i * 5 + j] - g[j * 5 + i]).abs() < 1e-12);
            }
            let row = &sm.values.data()[i * 5..(i + 1) * 5];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frobenius_distance_hand_case() {
        // || I2 - [[0,1],[1,0]] ||_F = sqrt(4) = 2
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(frobenius_distance(&a, &b).unwrap(), 2.0);
    }

    fn fake_telemetry(tape: &mut Tape, layers: &[(Tensor, Tensor)]) -> Telemetry {
        Telemetry {
            layers: layers
                .iter()
                .map(|(q, k)| {
                    let qv = tape.constant(q.clone());
                    let kv = tape.constant(k.clone());
                    LayerTelemetry {
                        q_raw: qv,
                        k_raw: kv,
                        q_tilde: qv,
                        k_tilde: kv,
                        attn_probs: qv,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn dgd_zero_when_student_matches_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = Tensor::randn(&[2, 2, 4, 3], 0.0, 1.0, &mut rng);
        let k = Tensor::randn(&[2, 2, 4, 3], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let telemetry = fake_telemetry(&mut tape, &[(q.clone(), k.clone())]);
        let teacher = TeacherOutputs { logits: Tensor::zeros(&[2, 2]), qk: vec![(q, k)] };
        let cfg = DistillationConfig::default();
        let loss = dgd_loss(&mut tape, &telemetry, &teacher, &cfg).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn dgd_positive_otherwise_and_scale_invariant_when_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let sq = Tensor::randn(&[2, 2, 4, 3], 0.0, 1.0, &mut rng);
        let sk = Tensor::randn(&[2, 2, 4, 3], 0.0, 1.0, &mut rng);
        let tq = Tensor::randn(&[2, 2, 4, 3], 0.0, 1.0, &mut rng);
        let tk = Tensor::randn(&[2, 2, 4, 3], 0.0, 1.0, &mut rng);
        let teacher = TeacherOutputs {
            logits: Tensor::zeros(&[2, 2]),
            qk: vec![(tq.clone(), tk.clone())],
        };
        let cfg = DistillationConfig::default();

        let mut tape = Tape::new();
        let telemetry = fake_telemetry(&mut tape, &[(sq.clone(), sk.clone())]);
        let base = dgd_loss(&mut tape, &telemetry, &teacher, &cfg).unwrap();
        let base_val = tape.value(base).item();
        assert!(base_val > 0.0);

        // doubling the student activations leaves normalized matrices put
        let mut tape = Tape::new();
        let doubled = fake_telemetry(
            &mut tape,
            &[(sq.map(|v| v * 2.0), sk.map(|v| v * 2.0))],
        );
        let scaled = dgd_loss(&mut tape, &doubled, &teacher, &cfg).unwrap();
        assert!((tape.value(scaled).item() - base_val).abs() < 1e-9);

        // with raw matrices the loss does change
        let raw_cfg = DistillationConfig { use_normalized: false, ..cfg };
        let mut tape = Tape::new();
        let telemetry = fake_telemetry(&mut tape, &[(sq.clone(), sk.clone())]);
        let raw_base = dgd_loss(&mut tape, &telemetry, &teacher, &raw_cfg).unwrap();
        let raw_base_val = tape.value(raw_base).item();
        let mut tape = Tape::new();
        let doubled = fake_telemetry(
            &mut tape,
            &[(sq.map(|v| v * 2.0), sk.map(|v| v * 2.0))],
        );
        let raw_scaled = dgd_loss(&mut tape, &doubled, &teacher, &raw_cfg).unwrap();
        assert!((tape.value(raw_scaled).item() - raw_base_val).abs() > 1e-6);
    }

    #[test]
    fn dgd_invariant_to_per_head_orthogonal_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let sq = Tensor::randn(&[1, 2, 4, 2], 0.0, 1.0, &mut rng);
        let sk = Tensor::randn(&[1, 2, 4, 2], 0.0, 1.0, &mut rng);
        let tq = Tensor::randn(&[1, 2, 4, 2], 0.0, 1.0, &mut rng);
        let tk = Tensor::randn(&[1, 2, 4, 2], 0.0, 1.0, &mut rng);
        let teacher = TeacherOutputs {
            logits: Tensor::zeros(&[1, 2]),
            qk: vec![(tq, tk)],
        };
        let cfg = DistillationConfig::default();

        let mut tape = Tape::new();
        let telemetry = fake_telemetry(&mut tape, &[(sq.clone(), sk.clone())]);
        let base = dgd_loss(&mut tape, &telemetry, &teacher, &cfg).unwrap();
        let base_val = tape.value(base).item();

        // rotate each head's q rows by a different angle
        let rotate = |t: &Tensor, angles: [f64; 2]| {
            let mut out = t.data().to_vec();
            for h in 0..2 {
                let (c, s) = (angles[h].cos(), angles[h].sin());
                for row in 0..4 {
                    let base_idx = h * 8 + row * 2;
                    let (x, y) = (out[base_idx], out[base_idx + 1]);
                    out[base_idx] = x * c - y * s;
                    out[base_idx + 1] = x * s + y * c;
                }
            }
            Tensor::new(vec![1, 2, 4, 2], out).unwrap()
        };
        let sq_rot = rotate(&sq, [0.7, -1.2]);
        let sk_rot = rotate(&sk, [0.3, 2.1]);

        let mut tape = Tape::new();
        let telemetry = fake_telemetry(&mut tape, &[(sq_rot, sk_rot)]);
        let rotated = dgd_loss(&mut tape, &telemetry, &teacher, &cfg).unwrap();
        assert!((tape.value(rotated).item() - base_val).abs() < 1e-9);
    }

    #[test]
    fn dgd_missing_telemetry_is_contract_error() {
        let mut tape = Tape::new();
        let telemetry = Telemetry::default();
        let teacher = TeacherOutputs { logits: Tensor::zeros(&[1, 2]), qk: vec![] };
        assert!(matches!(
            dgd_loss(&mut tape, &telemetry, &teacher, &DistillationConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let q = Tensor::randn(&[1, 1, 3, 2], 0.0, 1.0, &mut rng);
        let k = Tensor::randn(&[1, 1, 3, 2], 0.0, 1.0, &mut rng);
        let tq = Tensor::randn(&[1, 1, 3, 2], 0.0, 1.0, &mut rng);
        let tk = Tensor::randn(&[1, 1, 3, 2], 0.0, 1.0, &mut rng);
        let teacher_logits = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();

        // lambda = 0 reduces to the logit term
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 2], vec![0.4, 0.1]).unwrap());
        let telemetry = fake_telemetry(&mut tape, &[(q.clone(), k.clone())]);
        let teacher = TeacherOutputs {
            logits: teacher_logits.clone(),
            qk: vec![(tq.clone(), tk.clone())],
        };
        let cfg = DistillationConfig { lambda_dgd: 0.0, ..Default::default() };
        let out = total_loss(&mut tape, s, &[1], &telemetry, &teacher, &cfg).unwrap();
        assert_eq!(tape.value(out.total).item(), tape.value(out.dist).item());
        assert!(out.dgd.is_none());

        // total = dist + lambda * dgd exactly
        let cfg = DistillationConfig { lambda_dgd: 0.37, ..Default::default() };
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 2], vec![0.4, 0.1]).unwrap());
        let telemetry = fake_telemetry(&mut tape, &[(q, k)]);
        let out = total_loss(&mut tape, s, &[1], &telemetry, &teacher, &cfg).unwrap();
        let total = tape.value(out.total).item();
        let dist = tape.value(out.dist).item();
        let dgd = tape.value(out.dgd.unwrap()).item();
        assert!((total - (dist + 0.37 * dgd)).abs() < 1e-12);
    }
}
