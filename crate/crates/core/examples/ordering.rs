//! Desk-scale check of the ablation ordering and its wall-clock cost.
//!
//! Usage: ordering [arm ...] [--seeds a,b,c]

use std::time::Instant;
use ttdg_core::config::Config;
use ttdg_core::harness::{run_arm, ArmSpec};

fn main() {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let mut seeds: Vec<u64> = vec![1, 2, 3, 4, 5];
    if let Some(pos) = args.iter().position(|a| a == "--seeds") {
        let spec = args.remove(pos + 1);
        args.remove(pos);
        seeds = spec.split(',').map(|s| s.parse().expect("seed")).collect();
    }
    if args.is_empty() {
        args = vec!["baseline".into(), "no_dsss".into(), "full".into(), "nearest".into()];
    }
    let cfg = Config::default();
    for name in &args {
        let arm = ArmSpec::by_name(name).expect("arm name");
        let mut hters = Vec::new();
        let mut aucs = Vec::new();
        for &seed in &seeds {
            let t0 = Instant::now();
            let r = run_arm(&cfg, &arm, seed, None).expect("run");
            println!(
                "{:>9} seed {} hter {:.4} auc {:.4} ({:.1}s)",
                name,
                seed,
                r.hter,
                r.auc,
                t0.elapsed().as_secs_f64()
            );
            hters.push(r.hter);
            aucs.push(r.auc);
        }
        let n = hters.len() as f64;
        let mh = hters.iter().sum::<f64>() / n;
        let ma = aucs.iter().sum::<f64>() / n;
        let sh = if hters.len() > 1 {
            (hters.iter().map(|v| (v - mh) * (v - mh)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        println!("{name:>9} MEAN hter {mh:.4} (std {sh:.4}) auc {ma:.4}");
    }
}
