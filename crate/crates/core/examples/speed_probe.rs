use ban_core::model::{AttentionKind, BanStackConfig, Integration};
use ban_core::train::*;
use std::time::Instant;

fn run(label: &str, kind: AttentionKind, dropout: f64, train_size: usize) {
    let task_cfg = SyntheticConfig { train_size, val_size: 512, ..SyntheticConfig::default() };
    let task = gen_synthetic(1, &task_cfg).unwrap();
    let mut config = BanStackConfig::toy(kind, Integration::Residual, 1);
    config.dropout_hidden = dropout;
    config.dropout_classifier = if dropout == 0.0 { 0.0 } else { 0.5 };
    let tc = TrainConfig { epochs: 20, batch_size: 64, seed: 1, ..TrainConfig::default() };
    let t0 = Instant::now();
    let report = train_loop(&config, &task, &tc, None).unwrap();
    let curve: Vec<f64> = report.metrics.iter().step_by(2).map(|m| (m.val_accuracy*1000.0).round()/1000.0).collect();
    println!("{label}: final {:.3} curve={curve:?} ({:?})", report.final_val_accuracy, t0.elapsed());
}

fn main() {
    std::thread::scope(|s| {
        s.spawn(|| run("bil drop0.2", AttentionKind::Bilinear, 0.2, 2048));
        s.spawn(|| run("bil drop0.0", AttentionKind::Bilinear, 0.0, 2048));
        s.spawn(|| run("uni drop0.2", AttentionKind::Unitary, 0.2, 2048));
        s.spawn(|| run("uni drop0.0", AttentionKind::Unitary, 0.0, 2048));
    });
}
