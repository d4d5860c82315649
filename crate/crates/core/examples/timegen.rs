use std::time::Instant;
use ttdg_core::config::Config;
use ttdg_core::datagen;
use ttdg_core::harness;

fn main() {
    let cfg = Config::default();
    let t0 = Instant::now();
    let geom = cfg.image_geometry();
    let ds = datagen::generate_dataset(&cfg.data.domains, cfg.data.n_per_class, cfg.data.seed, &geom)
        .unwrap();
    println!("generate_dataset: {:.2}s ({} records)", t0.elapsed().as_secs_f64(), ds.records.len());
    let t1 = Instant::now();
    let arm = harness::ArmSpec::by_name("baseline").unwrap();
    let res = harness::run_arm(&cfg, &arm, 1, None).unwrap();
    println!("run_arm baseline seed 1: {:.2}s hter={:.4} auc={:.4}", t1.elapsed().as_secs_f64(), res.hter, res.auc);
}
