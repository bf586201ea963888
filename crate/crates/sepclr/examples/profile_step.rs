//! Times the pieces of one training step in isolation.

use std::time::Instant;

use sepclr::features::{AugmentationPolicy, LogMelPatch};
use sepclr::losses::nt_xent_node;
use sepclr::model::{
    encoder_forward, insert_param_leaves, patches_to_tensor, sim_head_forward, EncoderConfig,
    ModelState,
};
use sepclr::nn::Graph;
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
    let state = ModelState::init(EncoderConfig::desk_default(), 1);

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
    let input = patches_to_tensor(&patches).unwrap();

    let reps = 10;

    // leaves only
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let _ = insert_param_leaves(&mut g, &state, &["encoder.", "sim_head."]);
        let _ = g.leaf(input.clone(), false);
    }
    println!("leaves+input: {:.1} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // encoder forward
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &state, &["encoder.", "sim_head."]);
        let x = g.leaf(input.clone(), false);
        let _ = encoder_forward(&mut g, &state, &leaves, x).unwrap();
    }
    println!("+encoder fwd: {:.1} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // + sim head + loss forward
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &state, &["encoder.", "sim_head."]);
        let x = g.leaf(input.clone(), false);
        let h = encoder_forward(&mut g, &state, &leaves, x).unwrap();
        let z = sim_head_forward(&mut g, &state, &leaves, h).unwrap();
        let _ = nt_xent_node(&mut g, z, 0.3).unwrap();
    }
    println!("+head+loss fwd: {:.1} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // + backward
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &state, &["encoder.", "sim_head."]);
        let x = g.leaf(input.clone(), false);
        let h = encoder_forward(&mut g, &state, &leaves, x).unwrap();
        let z = sim_head_forward(&mut g, &state, &leaves, h).unwrap();
        let l = nt_xent_node(&mut g, z, 0.3).unwrap();
        let _ = g.backward(l).unwrap();
    }
    println!("+backward: {:.1} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
