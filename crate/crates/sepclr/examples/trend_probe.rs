//! Quick experiment driver used while tuning the synthetic dataset and
//! training defaults: trains one configuration and prints QbE mAP probes.
//!
//! Usage: trend_probe <mode> <tasks> <steps> <n_train> <batch> <seed>

use std::time::Instant;

use sepclr::eval::{clip_embeddings, qbe_map_from_embeddings};
use sepclr::features::AugmentationPolicy;
use sepclr::model::{EncoderConfig, ModelState};
use sepclr::processors::{ProcessorBank, ProcessorKind};
use sepclr::rng::derive_seed;
use sepclr::scenegen::{generate_split, SceneConfig};
use sepclr::trainer::{build_pair, train_step, ComparisonMode, TaskMode, TrainConfig};

fn main() {
    sepclr::tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    let mode = ComparisonMode::parse(args.get(1).map(|s| s.as_str()).unwrap_or("mix_vs_chan")).unwrap();
    let tasks = TaskMode::parse(args.get(2).map(|s| s.as_str()).unwrap_or("sim_only")).unwrap();
    let steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(600);
    let n_train: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(512);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(64);
    let seed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1);

    let scene_cfg = SceneConfig::default();
    let t0 = Instant::now();
    let train = generate_split(derive_seed(seed, "split-train", 0), &scene_cfg, n_train).unwrap();
    let qbe = generate_split(derive_seed(seed, "split-qbe", 0), &scene_cfg, 160).unwrap();
    eprintln!("datagen: {:.1}s", t0.elapsed().as_secs_f64());

    let config = TrainConfig {
        mode,
        tasks,
        bank: ProcessorBank::new(vec![ProcessorKind::S2]).unwrap(),
        policy: AugmentationPolicy::specaugment(),
        batch_size: batch,
        lr: tasks.default_lr(),
        tau: 0.3,
        steps,
        seed,
        eval_every: 0,
        checkpoint_every: 0,
        encoder: EncoderConfig::desk_default(),
    };

    let mut state = ModelState::init(config.encoder.clone(), derive_seed(seed, "modelinit", 0));
    println!(
        "mode={} tasks={} encoder_params={} total_params={}",
        mode.label(),
        tasks.label(),
        state.encoder_param_count(),
        state.total_param_count()
    );

    let qbe_eval = |state: &ModelState| -> f64 {
        let embs = clip_embeddings(&qbe, state).unwrap();
        qbe_map_from_embeddings(&embs, scene_cfg.n_classes).unwrap().map
    };
    println!("step 0: qbe_map {:.4}", qbe_eval(&state));

    let mut step_time = 0.0f64;
    let mut view_time = 0.0f64;
    use rand::Rng;
    for step in 1..=steps {
        let step_seed = derive_seed(seed, "step", step);
        let mut clip_rng = sepclr::rng::rng_for(step_seed, "clips", 0);
        let tv = Instant::now();
        let views: Vec<_> = (0..batch)
            .map(|slot| {
                let scene = &train[clip_rng.random_range(0..train.len())];
                build_pair(scene, mode, tasks, &config.bank, &config.policy, derive_seed(step_seed, "pair", slot as u64)).unwrap()
            })
            .collect();
        view_time += tv.elapsed().as_secs_f64();
        let ts = Instant::now();
        let losses = train_step(&views, &mut state, &config, step).unwrap();
        step_time += ts.elapsed().as_secs_f64();
        if step % 100 == 0 || step == steps {
            let te = Instant::now();
            let map = qbe_eval(&state);
            println!(
                "step {step}: loss {:.4} qbe_map {:.4} (step {:.0} ms, views {:.0} ms, eval {:.1} s)",
                losses.joint,
                map,
                step_time / step as f64 * 1e3,
                view_time / step as f64 * 1e3,
                te.elapsed().as_secs_f64()
            );
        }
    }
}
