// scratch feasibility probe; deleted before delivery
use qvit::data::{self, SyntheticSpec};
use qvit::distill::DistillationConfig;
use qvit::model::{ModelConfig, QVit, QuantParts};
use qvit::optim::OptimizerKind;
use qvit::quant::ScaleMode;
use qvit::train::{self, TrainConfig};
use std::time::Instant;

fn tiny(w: u8, a: u8, irm: bool) -> ModelConfig {
    ModelConfig {
        image_size: 32, patch_size: 8, channels: 1, depth: 4, heads: 4,
        embed_dim: 64, mlp_ratio: 4, classes: 4, w_bits: w, a_bits: a,
        first_last_bits: 8, irm_enabled: irm,
        quant_parts: QuantParts::default(), scale_mode: ScaleMode::Learned,
    }
}

fn main() {
    let train_ds = data::generate_synthetic(&SyntheticSpec { classes: 4, per_class: 150, image_size: 32, seed: 1 }).unwrap();
    let eval_ds = data::generate_synthetic(&SyntheticSpec { classes: 4, per_class: 50, image_size: 32, seed: 2 }).unwrap();
    let norm = train_ds.normalizer();

    let t0 = Instant::now();
    let mut teacher = QVit::new(tiny(32, 32, false), 42).unwrap();
    let tcfg = TrainConfig {
        epochs: 12, batch_size: 32, base_lr: 5e-3, weight_decay: 0.0,
        optimizer: OptimizerKind::Lamb, seed: 42, grad_clip: None,
    };
    let log = train::train_teacher(&mut teacher, &train_ds, &eval_ds, &tcfg).unwrap();
    eprintln!("teacher top1 {:.4} in {:.1}s", log.final_top1().unwrap(), t0.elapsed().as_secs_f64());

    for lr in [2e-4f64, 1e-3] {
        for lambda in [1.0f64, 0.2] {
            eprintln!("--- student lr {lr} lambda {lambda}");
            for (irm, dgd, name) in [(false, false, "baseline"), (true, false, "irm"), (false, true, "dgd"), (true, true, "irm+dgd")] {
                let t1 = Instant::now();
                let mut student = QVit::new(tiny(2, 2, irm), 7).unwrap();
                student.init_from(&teacher).unwrap();
                // init eval
                let pre = train::evaluate(&mut student, &eval_ds, &norm, 32).unwrap();
                let scfg = TrainConfig {
                    epochs: 6, batch_size: 32, base_lr: lr, weight_decay: 0.0,
                    optimizer: OptimizerKind::Lamb, seed: 7, grad_clip: None,
                };
                let dcfg = DistillationConfig { lambda_dgd: if dgd { lambda } else { 0.0 }, ..Default::default() };
                let mut s2 = QVit::new(tiny(2, 2, irm), 7).unwrap();
                let log = train::train_student(&mut s2, &mut teacher, &train_ds, &eval_ds, &scfg, &dcfg).unwrap();
                let tops: Vec<String> = log.records.iter().map(|r| format!("{:.2}", r.top1)).collect();
                eprintln!("{name:10} pre {:.3} then [{}] Hq {:.3} ({:.0}s)", pre.top1, tops.join(","), log.records.last().unwrap().entropy_q_nats.unwrap(), t1.elapsed().as_secs_f64());
            }
        }
    }
}
