//! Times the toy end-to-end run and prints its metrics.
//!
//! Usage: toy_pilot [steps] [batch] [vq_steps] [train_records] [out_dir]
//! Environment overrides: TOY_LR, TOY_DIM, TOY_LAYERS.

use std::time::Instant;

use uio_core::toy::{run_toy, ToyConfig};

fn main() -> uio_core::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize| args.get(i).and_then(|s| s.parse::<u64>().ok());
    let mut cfg = ToyConfig::default();
    if let Some(v) = arg(1) {
        cfg.steps = v;
    }
    if let Some(v) = arg(2) {
        cfg.batch_size = v as usize;
    }
    if let Some(v) = arg(3) {
        cfg.vq_steps = v as usize;
    }
    if let Some(v) = arg(4) {
        cfg.train_records = v as usize;
    }
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    if let Some(v) = env("TOY_LR") {
        cfg.lr = v;
    }
    if let Some(v) = env("TOY_DIM") {
        cfg.model.model_dim = v as usize;
        cfg.model.mlp_dim = 2 * v as usize;
    }
    if let Some(v) = env("TOY_LAYERS") {
        cfg.model.encoder_layers = v as usize;
        cfg.model.decoder_layers = v as usize;
    }
    let out = args.get(5).map(std::path::PathBuf::from);
    let t = Instant::now();
    let rep = run_toy(&cfg, out.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&rep)?);
    for (name, v, target, ok) in rep.checks() {
        println!("{:<28} {v:.4} (target {target}) {}", name, if ok { "PASS" } else { "FAIL" });
    }
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
