use std::time::Instant;

use udcvr::data::synthetic_pair;
use udcvr::degradation::PsfKind;
use udcvr::metrics::MetricReport;
use udcvr::training::{sequence_loss, TrainConfig, Trainer};

fn main() -> udcvr::Result<()> {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let pair = synthetic_pair(5, 64, 64, PsfKind::ToledBanded, 0)?;
    let cfg = TrainConfig {
        iterations: iters,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg)?;
    let eps = t.cfg.charbonnier_eps;
    let l0 = sequence_loss(&t.model, &t.params, &pair, eps)?;
    let start = Instant::now();
    let data = [pair.clone()];
    t.run(&data, |_, i, l| {
        if i % 50 == 0 {
            println!("{i} {l:.5} {:.1}s", start.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    let l1 = sequence_loss(&t.model, &t.params, &pair, eps)?;
    let restored = t.model.restore_sequence(&t.params, &pair.degraded, 1)?;
    let before = MetricReport::from_sequences(&pair.degraded, &pair.clean)?;
    let after = MetricReport::from_sequences(&restored, &pair.clean)?;
    println!("loss {l0:.5} -> {l1:.5} ({:.1}% drop)", 100.0 * (1.0 - l1 / l0));
    println!("psnr {:.2} -> {:.2}", before.mean_psnr, after.mean_psnr);
    Ok(())
}
