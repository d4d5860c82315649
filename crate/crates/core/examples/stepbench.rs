//! Times the pieces of one training step at benchmark scale.

use std::time::Instant;
use ttdg_core::config::Config;
use ttdg_core::datagen::generate_dataset;
use ttdg_core::diff::{Tape, Tensor};
use ttdg_core::harness::{make_batch, ArmSpec};
use ttdg_core::model::{tape_backbone, tape_model, tape_total_loss, Trainer};

fn main() {
    let cfg = Config::default();
    let geom = cfg.image_geometry();
    let dataset =
        generate_dataset(&cfg.data.domains, cfg.data.n_per_class, cfg.data.seed, &geom).unwrap();
    let held = dataset.domain_ord(&cfg.data.held_out).unwrap();
    let (train, _) = dataset.partition(held);
    let batch = make_batch(&train[..16], &geom);

    for arm_name in ["baseline", "full"] {
        let arm = ArmSpec::by_name(arm_name).unwrap();
        let opts = arm.train_options(&cfg);
        let mut trainer = Trainer::new(cfg.model_geometry(), cfg.net.n_bases, 1, opts).unwrap();
        let t0 = Instant::now();
        let reps = 30;
        for i in 0..reps {
            trainer.step(&batch, i).unwrap();
        }
        println!("{arm_name}: {:.2} ms/step", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    }

    // forward-only backbone
    let arm = ArmSpec::by_name("baseline").unwrap();
    let trainer =
        Trainer::new(cfg.model_geometry(), cfg.net.n_bases, 1, arm.train_options(&cfg)).unwrap();
    let t0 = Instant::now();
    let reps = 100;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let tm = tape_model(&mut tape, &trainer.model);
        let x = tape.input(&Tensor::new(&[16, 3, 16, 16], batch.images.clone()));
        let f = tape_backbone(&mut tape, &tm, x).unwrap();
        std::hint::black_box(tape.value(f)[0]);
    }
    println!("backbone fwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // full graph forward only (no backward)
    let arm = ArmSpec::by_name("full").unwrap();
    let opts = arm.train_options(&cfg);
    let trainer = Trainer::new(cfg.model_geometry(), cfg.net.n_bases, 1, opts).unwrap();
    let chosen: Vec<usize> = (0..16).map(|i| i % cfg.net.n_bases).collect();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let tm = tape_model(&mut tape, &trainer.model);
        let tb = ttdg_core::bank::tape_bank(&mut tape, &trainer.bank);
        let x = tape.input(&Tensor::new(&[16, 3, 16, 16], batch.images.clone()));
        let (_, terms) =
            tape_total_loss(&mut tape, &tm, &tb, x, &batch, &opts, Some(&chosen)).unwrap();
        std::hint::black_box(terms.total);
    }
    println!("full graph fwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
