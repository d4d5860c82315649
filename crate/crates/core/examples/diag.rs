use ttdg_core::config::Config;
use ttdg_core::datagen::generate_dataset;
use ttdg_core::harness::{self, ArmSpec};
use ttdg_core::model::Trainer;
use ttdg_core::ttsp::ShiftMode;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arm_name = args.first().map(|s| s.as_str()).unwrap_or("full");
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = Config::default();
    let arm = ArmSpec::by_name(arm_name).unwrap();
    let geom = cfg.image_geometry();
    let ds = generate_dataset(&cfg.data.domains, cfg.data.n_per_class, cfg.data.seed, &geom).unwrap();
    let held = ds.domain_ord(&cfg.data.held_out).unwrap();
    let (train_recs, test_recs) = ds.partition(held);
    let opts = arm.train_options(&cfg);
    let mut tr = Trainer::new(cfg.model_geometry(), cfg.net.n_bases, seed, opts).unwrap();
    let log = harness::train_epochs(&mut tr, &train_recs, &geom, arm.bank_source).unwrap();
    let t = log.last().unwrap();
    println!("final losses: cls={:.4} sty={:.4} con={:.4}", t.cls, t.sty, t.con);
    for mode in [ShiftMode::Weighted, ShiftMode::Nearest, ShiftMode::Off] {
        let (auc, _eer, hter, _, _) = harness::evaluate(
            &tr.model, &tr.bank, &test_recs, &geom, mode, opts.variant, opts.temperature,
        ).unwrap();
        println!("  eval {:?}: hter={:.4} auc={:.4}", mode, hter, auc);
    }
    // also: train-domain eval (does it even fit the sources?)
    let (auc, _eer, hter, _, _) = harness::evaluate(
        &tr.model, &tr.bank, &train_recs, &geom, ShiftMode::Weighted, opts.variant, opts.temperature,
    ).unwrap();
    println!("  train-domain weighted: hter={:.4} auc={:.4}", hter, auc);
}
