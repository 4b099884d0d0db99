//! Temporary convergence probe; not part of the suite.

use std::collections::BTreeSet;
use std::time::Instant;

use diffseg::data::{decode_label, generate_synthetic, split, GeneratorConfig};
use diffseg::denoiser::{Denoiser, DenoiserConfig};
use diffseg::losses::LossWeights;
use diffseg::metrics::evaluate;
use diffseg::sampler::{InferMode, InferenceConfig, Sampler};
use diffseg::schedule::{NoiseSchedule, ScheduleSpec};
use diffseg::trainer::{AugmentFlags, TrainConfig, Trainer};

fn overfit_variant(t_steps: usize, base: usize, embed: usize, batch: usize, lr: f64, lr_min: f64) {
    let samples = generate_synthetic(&GeneratorConfig {
        n: 1,
        height: 16,
        width: 16,
        contrast: 0.6,
        lesion_scale: (0.25, 0.4),
        lesion_free_frac: 0.0,
        seed: 5,
    })
    .unwrap();
    let net = Denoiser::new(DenoiserConfig {
        input_size: (16, 16),
        base_channels: base,
        depth: 1,
        time_embed_dim: embed,
        attention_at: BTreeSet::new(),
    })
    .unwrap();
    let sched = NoiseSchedule::build_sigmoid(ScheduleSpec::with_steps(t_steps)).unwrap();
    let trainer = Trainer::new(
        net,
        sched,
        LossWeights::defaults_for(t_steps),
        TrainConfig {
            i_max: 2000,
            batch_size: batch,
            lr_init: lr,
            lr_min,
            seed: 0,
            augment: AugmentFlags::none(),
            checkpoint_every: 0,
        },
    )
    .unwrap();
    let mut state = trainer.init_state::<f32>();
    let start = Instant::now();
    let mut first = 0.0;
    let mut last = 0.0;
    let mut last_bd = None;
    for i in 0..2000usize {
        let rep = trainer.train_step(&mut state, &samples).unwrap();
        if i < 25 {
            first += rep.breakdown.total / 25.0;
        }
        if i >= 1975 {
            last += rep.breakdown.total / 25.0;
        }
        last_bd = Some(rep.breakdown);
    }
    println!(
        "T={t_steps} base={base} embed={embed} batch={batch} lr={lr}: first {first:.5} last {last:.5} ratio {:.4} in {:.1} s",
        last / first,
        start.elapsed().as_secs_f64()
    );
    println!("  final {}", last_bd.unwrap().log_line(1999, 0));
    let params: Vec<f32> = state.params.data.clone();
    let sampler = Sampler::new(trainer.denoiser(), &params, trainer.schedule()).unwrap();
    let x0 = samples[0].image_as::<f32>();
    let prob = sampler.infer_avg(&x0).unwrap();
    let mask = diffseg::sampler::threshold_mask(&prob, 0.5, None).unwrap();
    let truth = decode_label(&samples[0].label, 0.0);
    let dice = diffseg::metrics::dice(&mask, &truth).unwrap();
    println!("  dice {dice:.4}");
}

#[test]
fn probe_overfit() {
    overfit_variant(20, 4, 8, 4, 3e-3, 1e-3);
    overfit_variant(20, 8, 16, 4, 3e-3, 1e-3);
    overfit_variant(10, 8, 16, 4, 3e-3, 1e-3);
    overfit_variant(10, 8, 16, 4, 1e-2, 2e-3);
}

#[test]
fn probe_benchmark() {
    let all = generate_synthetic(&GeneratorConfig {
        n: 250,
        height: 64,
        width: 64,
        contrast: 0.3,
        seed: 9,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let (train_idx, test_idx) = split(&all, 0.2).unwrap();
    println!("split: {} train / {} test", train_idx.len(), test_idx.len());
    let train: Vec<_> = train_idx.iter().map(|&i| all[i].clone()).collect();
    let test: Vec<_> = test_idx.iter().map(|&i| all[i].clone()).collect();

    let t_steps = 100;
    let net = Denoiser::new(DenoiserConfig {
        input_size: (64, 64),
        base_channels: 8,
        depth: 2,
        time_embed_dim: 32,
        attention_at: BTreeSet::from([2]),
    })
    .unwrap();
    let sched = NoiseSchedule::build_sigmoid(ScheduleSpec::with_steps(t_steps)).unwrap();
    let iters = 3000usize;
    let trainer = Trainer::new(
        net,
        sched,
        LossWeights::defaults_for(t_steps),
        TrainConfig {
            i_max: iters,
            batch_size: 4,
            lr_init: 1e-3,
            lr_min: 3e-4,
            seed: 0,
            augment: AugmentFlags::all(),
            checkpoint_every: 0,
        },
    )
    .unwrap();
    let mut state = trainer.init_state::<f32>();
    let start = Instant::now();
    for i in 0..iters {
        let rep = trainer.train_step(&mut state, &train).unwrap();
        if i % 250 == 0 {
            println!(
                "iter {i}: total {:.5} ({:.0} s elapsed)",
                rep.breakdown.total,
                start.elapsed().as_secs_f64()
            );
        }
    }
    println!("training took {:.1} min", start.elapsed().as_secs_f64() / 60.0);

    let params: Vec<f32> = state.params.data.clone();
    let sampler = Sampler::new(trainer.denoiser(), &params, trainer.schedule()).unwrap();
    for tau in [0.5, 0.55, 0.6, 0.65, 0.7] {
        let mut cfg = InferenceConfig::defaults_for(t_steps);
        cfg.t_start = 10;
        cfg.n_salient = 4;
        cfg.n_infer = 4;
        cfg.threshold = tau;
        let eval_start = Instant::now();
        for mode in InferMode::ALL {
            let report = evaluate(
                &sampler,
                &test,
                mode,
                &cfg,
                Some(&Default::default()),
                1,
                serde_json::json!(null),
            )
            .unwrap();
            let bias: f64 = report
                .cases
                .iter()
                .filter(|c| c.vol_true > 0)
                .map(|c| (c.vol_pred as f64 - c.vol_true as f64) / c.vol_true as f64)
                .sum::<f64>()
                / report.cases.iter().filter(|c| c.vol_true > 0).count() as f64;
            println!(
                "tau {tau}: mode {mode}: dice {:.4} vdp {:.4} bias {bias:+.4}",
                report.aggregates.mean_dice,
                report.aggregates.mean_vdp.unwrap(),
            );
        }
        println!("  ({:.1} min)", eval_start.elapsed().as_secs_f64() / 60.0);
    }
}
