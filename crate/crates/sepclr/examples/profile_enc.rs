//! Eager per-op timing inside one encoder forward/backward at batch 128.

use std::time::Instant;
use sepclr::features::{AugmentationPolicy, LogMelPatch};
use sepclr::model::{insert_param_leaves, patches_to_tensor, EncoderConfig, ModelState};
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
        .map(|slot| build_pair(&scenes[slot], ComparisonMode::MixVsChan, TaskMode::SimOnly, &bank, &policy, derive_seed(1, "pair", slot as u64)).unwrap())
        .collect();
    let patches: Vec<&LogMelPatch> = views.iter().flat_map(|v| { let (a, b) = v.sim.as_ref().unwrap(); [a, b] }).collect();
    let input = patches_to_tensor(&patches).unwrap();

    for _ in 0..2 {
        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &state, &["encoder."]);
        let getl = |name: &str| leaves[state.params.index_of(name).unwrap()];
        let x0 = g.leaf(input.clone(), false);
        let mut t = Instant::now();
        let mut lap = |label: &str, t: &mut Instant| {
            let el = t.elapsed().as_secs_f64() * 1e3;
            println!("  {label:22} {el:6.1} ms");
            *t = Instant::now();
        };
        let p = g.avg_pool2d(x0, 2).unwrap();
        lap("stem pool", &mut t);
        let a = g.affine_scalar(p, 0.25, 1.5);
        lap("affine", &mut t);
        let c1 = g.conv2d(a, getl("encoder.conv1.w"), 1, 1).unwrap();
        lap("conv1", &mut t);
        let b1 = g.bias_channel(c1, getl("encoder.conv1.b")).unwrap();
        let r1 = g.relu(b1);
        let p1 = g.max_pool2d(r1, 2).unwrap();
        lap("bias+relu+pool1", &mut t);
        let c2 = g.conv2d(p1, getl("encoder.conv2.w"), 1, 1).unwrap();
        lap("conv2", &mut t);
        let b2 = g.bias_channel(c2, getl("encoder.conv2.b")).unwrap();
        let r2 = g.relu(b2);
        let p2 = g.max_pool2d(r2, 2).unwrap();
        lap("bias+relu+pool2", &mut t);
        let c3 = g.conv2d(p2, getl("encoder.conv3.w"), 1, 1).unwrap();
        lap("conv3", &mut t);
        let b3 = g.bias_channel(c3, getl("encoder.conv3.b")).unwrap();
        let r3 = g.relu(b3);
        let p3 = g.max_pool2d(r3, 2).unwrap();
        lap("bias+relu+pool3", &mut t);
        let ce = g.conv2d(p3, getl("encoder.embed.w"), 1, 2).unwrap();
        lap("embconv", &mut t);
        let be = g.bias_channel(ce, getl("encoder.embed.b")).unwrap();
        let h = g.global_max_pool(be).unwrap();
        lap("bias+gmp", &mut t);
        let sq = g.mul(h, h).unwrap();
        let s = g.sum_all(sq);
        let l = g.scalar_mul(s, 0.5);
        lap("probe loss", &mut t);
        let _ = g.backward(l).unwrap();
        lap("backward", &mut t);
        println!();
    }
}
