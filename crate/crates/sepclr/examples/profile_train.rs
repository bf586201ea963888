//! Section timing of a full training step, matching trainer::train_step.

use std::time::Instant;

use sepclr::features::{AugmentationPolicy, LogMelPatch};
use sepclr::losses::nt_xent_node;
use sepclr::model::{
    encoder_forward, insert_param_leaves, patches_to_tensor, sim_head_forward, EncoderConfig,
    ModelState,
};
use sepclr::nn::{AdamConfig, Graph, Tensor};
use sepclr::processors::{ProcessorBank, ProcessorKind};
use sepclr::rng::derive_seed;
use sepclr::scenegen::{generate_split, SceneConfig};
use sepclr::trainer::{build_pair, ComparisonMode, TaskMode};

fn main() {
    sepclr::tune_allocator();
    let scene_cfg = SceneConfig::default();
    let scenes = generate_split(5, &scene_cfg, 64).unwrap();
    let bank = ProcessorBank::new(vec![ProcessorKind::S2]).unwrap();
    let policy = AugmentationPolicy::specaugment();
    let mut state = ModelState::init(EncoderConfig::desk_default(), 1);

    let views: Vec<_> = (0..64)
        .map(|slot| {
            build_pair(&scenes[slot], ComparisonMode::MixVsChan, TaskMode::SimOnly, &bank, &policy, derive_seed(1, "pair", slot as u64)).unwrap()
        })
        .collect();
    let patches: Vec<&LogMelPatch> = views
        .iter()
        .flat_map(|v| {
            let (a, b) = v.sim.as_ref().unwrap();
            [a, b]
        })
        .collect();

    for rep in 0..4 {
        let t0 = Instant::now();
        let input = patches_to_tensor(&patches).unwrap();
        let t1 = Instant::now();
        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &state, &["encoder.", "sim_head."]);
        let x = g.leaf(input, false);
        let t2 = Instant::now();
        let h = encoder_forward(&mut g, &state, &leaves, x).unwrap();
        let t3 = Instant::now();
        let z = sim_head_forward(&mut g, &state, &leaves, h).unwrap();
        let t4 = Instant::now();
        let l = nt_xent_node(&mut g, z, 0.3).unwrap();
        let t5 = Instant::now();
        let grads = g.backward(l).unwrap();
        let t6 = Instant::now();
        let per_param: Vec<Option<Tensor>> = leaves.iter().map(|&leaf| grads[leaf].clone()).collect();
        state.params.adam_step(&per_param, &AdamConfig::with_lr(3e-4)).unwrap();
        let t7 = Instant::now();
        println!(
            "rep {rep}: input {:4.1} leaves {:4.1} enc_fwd {:5.1} head {:4.1} loss {:4.1} backward {:6.1} adam {:4.1} | total {:6.1} ms",
            (t1 - t0).as_secs_f64() * 1e3,
            (t2 - t1).as_secs_f64() * 1e3,
            (t3 - t2).as_secs_f64() * 1e3,
            (t4 - t3).as_secs_f64() * 1e3,
            (t5 - t4).as_secs_f64() * 1e3,
            (t6 - t5).as_secs_f64() * 1e3,
            (t7 - t6).as_secs_f64() * 1e3,
            (t7 - t0).as_secs_f64() * 1e3
        );
    }
}
