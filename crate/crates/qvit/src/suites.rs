//! Multi-run experiment suites: the component ablation (baseline, rectifier,
//! similarity distillation, both) over a set of bit-widths, and the
//! per-module sensitivity protocol (one body structure at full precision at
//! a time, with all-quantized and all-float anchors).
//!
//! Every cell writes its checkpoint and log under the output directory and
//! is skipped when both already exist, so interrupted suites resume per cell.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Dataset;
use crate::distill::DistillationConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModulePart, QVit, QuantParts};
use crate::optim::OptimizerKind;
use crate::train::{self, TrainConfig, TrainLog};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub seeds: Vec<u64>,
    #[serde(default = "default_lambda")]
    pub lambda_dgd: f64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Lamb
}
fn default_lambda() -> f64 {
    1.0
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("suite needs at least one seed".to_string()));
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            weight_decay: 0.0,
            optimizer: self.optimizer,
            seed,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellStats {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl CellStats {
    fn from_values(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        CellStats { per_seed, mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Baseline,
    Irm,
    Dgd,
    IrmDgd,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Baseline,
        AblationVariant::Irm,
        AblationVariant::Dgd,
        AblationVariant::IrmDgd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::Irm => "+irm",
            AblationVariant::Dgd => "+dgd",
            AblationVariant::IrmDgd => "+irm+dgd",
        }
    }

    pub fn irm(&self) -> bool {
        matches!(self, AblationVariant::Irm | AblationVariant::IrmDgd)
    }

    pub fn dgd(&self) -> bool {
        matches!(self, AblationVariant::Dgd | AblationVariant::IrmDgd)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub w_bits: u8,
    pub a_bits: u8,
    pub top1: CellStats,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, variant: AblationVariant, w_bits: u8, a_bits: u8) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant.name() && c.w_bits == w_bits && c.a_bits == a_bits)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,bits,mean_top1,std_top1,per_seed\n");
        for c in &self.cells {
            let seeds: Vec<String> = c.top1.per_seed.iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&format!(
                "{},{}-{},{:.4},{:.4},{}\n",
                c.variant,
                c.w_bits,
                c.a_bits,
                c.top1.mean,
                c.top1.std,
                seeds.join(";")
            ));
        }
        s
    }
}

/// Path of one suite cell's checkpoint; logs sit next to it with `.jsonl`.
pub fn cell_paths(out_dir: &Path, tag: &str, seed: u64) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("{tag}_seed{seed}.qvit")),
        out_dir.join(format!("{tag}_seed{seed}.jsonl")),
    )
}

/// Train one cell or reuse its artifacts. Returns the final-epoch top-1.
fn run_cell(
    cfg: &ModelConfig,
    teacher: &mut QVit,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    tcfg: &TrainConfig,
    dcfg: &DistillationConfig,
    ckpt_path: &Path,
    log_path: &Path,
) -> Result<f64> {
    if ckpt_path.exists() && log_path.exists() {
        let text = fs::read_to_string(log_path)?;
        let log = parse_jsonl(&text)?;
        if let Some(top1) = log.final_top1() {
            return Ok(top1);
        }
    }
    let mut student = QVit::new(cfg.clone(), tcfg.seed)?;
    let log = train::train_student(&mut student, teacher, train_ds, eval_ds, tcfg, dcfg)?;
    checkpoint::save(&student, (tcfg.epochs * (train_ds.n / tcfg.batch_size)) as u64, ckpt_path)?;
    fs::write(log_path, log.to_jsonl()?)?;
    log.final_top1()
        .ok_or_else(|| Error::Internal("training produced an empty log".to_string()))
}

pub fn parse_jsonl(text: &str) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        log.records.push(serde_json::from_str(line)?);
    }
    Ok(log)
}

/// Component ablation: four variants (baseline, rectifier only, similarity
/// distillation only, both) for each requested bit-width, each over the
/// configured seeds.
pub fn ablation_suite(
    base: &ModelConfig,
    bit_widths: &[(u8, u8)],
    teacher: &mut QVit,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    suite: &SuiteConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    suite.validate()?;
    if bit_widths.is_empty() {
        return Err(Error::config("ablation needs at least one bit-width".to_string()));
    }
    fs::create_dir_all(out_dir)?;
    let mut report = AblationReport::default();
    for &(w_bits, a_bits) in bit_widths {
        for variant in AblationVariant::ALL {
            let cfg = ModelConfig {
                w_bits,
                a_bits,
                irm_enabled: variant.irm(),
                quant_parts: QuantParts::default(),
                ..base.clone()
            };
            let dcfg = DistillationConfig {
                lambda_dgd: if variant.dgd() { suite.lambda_dgd } else { 0.0 },
                ..Default::default()
            };
            let mut per_seed = Vec::with_capacity(suite.seeds.len());
            for &seed in &suite.seeds {
                let tag = format!("ablate_{w_bits}-{a_bits}_{}", variant.name());
                let (ckpt, log) = cell_paths(out_dir, &tag, seed);
                let top1 = run_cell(
                    &cfg,
                    teacher,
                    train_ds,
                    eval_ds,
                    &suite.train_config(seed),
                    &dcfg,
                    &ckpt,
                    &log,
                )?;
                eprintln!(
                    "[ablate] {}-{} {} seed {} top1 {:.4}",
                    w_bits,
                    a_bits,
                    variant.name(),
                    seed,
                    top1
                );
                per_seed.push(top1);
            }
            report.cells.push(AblationCell {
                variant: variant.name().to_string(),
                w_bits,
                a_bits,
                top1: CellStats::from_values(per_seed),
            });
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub variant: String,
    pub top1: CellStats,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityReport {
    pub fn row(&self, variant: &str) -> Option<&SensitivityRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mean_top1,std_top1,per_seed\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.top1.per_seed.iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&format!(
                "{},{:.4},{:.4},{}\n",
                r.variant,
                r.top1.mean,
                r.top1.std,
                seeds.join(";")
            ));
        }
        s
    }
}

/// Per-module sensitivity: every variant keeps the base bit-width but runs
/// one structure in full precision; anchored by the all-quantized and
/// all-float rows. Produces `|parts| + 2` rows.
pub fn sensitivity_suite(
    base: &ModelConfig,
    teacher: &mut QVit,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    suite: &SuiteConfig,
    out_dir: &Path,
) -> Result<SensitivityReport> {
    suite.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut variants: Vec<(String, ModelConfig)> =
        vec![("all-quantized".to_string(), base.clone())];
    for part in ModulePart::ALL {
        variants.push((
            format!("float-{}", part.name()),
            base.set_module_precision(part, true),
        ));
    }
    let mut float_cfg = base.clone();
    float_cfg.quant_parts = QuantParts::none();
    variants.push(("all-float".to_string(), float_cfg));

    let dcfg = DistillationConfig {
        lambda_dgd: suite.lambda_dgd,
        ..Default::default()
    };
    let mut report = SensitivityReport::default();
    for (name, cfg) in variants {
        let mut per_seed = Vec::with_capacity(suite.seeds.len());
        for &seed in &suite.seeds {
            let tag = format!("sense_{name}");
            let (ckpt, log) = cell_paths(out_dir, &tag, seed);
            let top1 = run_cell(
                &cfg,
                teacher,
                train_ds,
                eval_ds,
                &suite.train_config(seed),
                &dcfg,
                &ckpt,
                &log,
            )?;
            eprintln!("[sense] {name} seed {seed} top1 {top1:.4}");
            per_seed.push(top1);
        }
        report.rows.push(SensitivityRow {
            variant: name,
            top1: CellStats::from_values(per_seed),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::quant::ScaleMode;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            depth: 1,
            heads: 2,
            embed_dim: 8,
            mlp_ratio: 2,
            classes: 2,
            w_bits: 4,
            a_bits: 4,
            first_last_bits: 8,
            irm_enabled: false,
            quant_parts: QuantParts::default(),
            scale_mode: ScaleMode::Learned,
        }
    }

    #[test]
    fn ablation_report_shape_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let train = data::generate_synthetic(&SyntheticSpec {
            classes: 2,
            per_class: 12,
            image_size: 16,
            seed: 1,
        })
        .unwrap();
        let eval = data::generate_synthetic(&SyntheticSpec {
            classes: 2,
            per_class: 6,
            image_size: 16,
            seed: 2,
        })
        .unwrap();
        let teacher_cfg = ModelConfig { w_bits: 32, a_bits: 32, ..tiny_cfg() };
        let mut teacher = QVit::new(teacher_cfg, 1).unwrap();
        let suite = SuiteConfig {
            epochs: 1,
            batch_size: 6,
            base_lr: 1e-3,
            optimizer: OptimizerKind::Lamb,
            seeds: vec![0, 1],
            lambda_dgd: 1.0,
        };
        let report = ablation_suite(
            &tiny_cfg(),
            &[(4, 4)],
            &mut teacher,
            &train,
            &eval,
            &suite,
            dir.path(),
        )
        .unwrap();
        // 4 rows x 1 bit-width
        assert_eq!(report.cells.len(), 4);
        for cell in &report.cells {
            assert_eq!(cell.top1.per_seed.len(), 2);
        }
        let first = report.cells[0].top1.mean;

        // rerun resumes from the written cells (identical result, no retrain)
        let report2 = ablation_suite(
            &tiny_cfg(),
            &[(4, 4)],
            &mut teacher,
            &train,
            &eval,
            &suite,
            dir.path(),
        )
        .unwrap();
        assert_eq!(report2.cells[0].top1.mean, first);

        let csv = report.to_csv();
        assert!(csv.lines().count() == 5, "{csv}");
        assert!(report.cell(AblationVariant::Baseline, 4, 4).is_some());
    }

    #[test]
    fn sensitivity_report_has_parts_plus_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let train = data::generate_synthetic(&SyntheticSpec {
            classes: 2,
            per_class: 12,
            image_size: 16,
            seed: 3,
        })
        .unwrap();
        let eval = data::generate_synthetic(&SyntheticSpec {
            classes: 2,
            per_class: 6,
            image_size: 16,
            seed: 4,
        })
        .unwrap();
        let teacher_cfg = ModelConfig { w_bits: 32, a_bits: 32, ..tiny_cfg() };
        let mut teacher = QVit::new(teacher_cfg, 1).unwrap();
        let suite = SuiteConfig {
            epochs: 1,
            batch_size: 6,
            base_lr: 1e-3,
            optimizer: OptimizerKind::Lamb,
            seeds: vec![0],
            lambda_dgd: 0.0,
        };
        let report = sensitivity_suite(
            &tiny_cfg(),
            &mut teacher,
            &train,
            &eval,
            &suite,
            dir.path(),
        )
        .unwrap();
        assert_eq!(report.rows.len(), ModulePart::ALL.len() + 2);
        assert!(report.row("all-quantized").is_some());
        assert!(report.row("all-float").is_some());
        assert!(report.row("float-mlp").is_some());
    }

    #[test]
    fn empty_inputs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let train = data::generate_synthetic(&SyntheticSpec {
            classes: 2,
            per_class: 4,
            image_size: 16,
            seed: 3,
        })
        .unwrap();
        let mut teacher =
            QVit::new(ModelConfig { w_bits: 32, a_bits: 32, ..tiny_cfg() }, 1).unwrap();
        let suite = SuiteConfig {
            epochs: 0,
            batch_size: 4,
            base_lr: 1e-3,
            optimizer: OptimizerKind::Lamb,
            seeds: vec![],
            lambda_dgd: 1.0,
        };
        assert!(ablation_suite(
            &tiny_cfg(),
            &[(4, 4)],
            &mut teacher,
            &train,
            &train,
            &suite,
            dir.path()
        )
        .is_err());
        let suite_ok = SuiteConfig { seeds: vec![0], ..suite };
        assert!(ablation_suite(
            &tiny_cfg(),
            &[],
            &mut teacher,
            &train,
            &train,
            &suite_ok,
            dir.path()
        )
        .is_err());
    }
}
