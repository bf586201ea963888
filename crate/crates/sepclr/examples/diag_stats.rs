//! Sanity diagnostics: NT-Xent gradient check through the full model path,
//! embedding spread statistics, and silent-snippet frequency.

use sepclr::features::{make_view, AugmentationPolicy, LogMelPatch, SNIPPET_SAMPLES};
use sepclr::losses::nt_xent_node;
use sepclr::model::{encoder_forward, insert_param_leaves, patches_to_tensor, sim_head_forward, EncoderConfig, ModelState};
use sepclr::nn::{gradcheck, Graph, ParamSet};
use sepclr::rng::derive_seed;
use sepclr::scenegen::{generate_split, SceneConfig};

fn main() {
    sepclr::tune_allocator();
    let scene_cfg = SceneConfig::default();
    let scenes = generate_split(5, &scene_cfg, 16).unwrap();

    // silent snippet frequency over TP draws
    let mut silent = 0;
    let mut total = 0;
    let floor = sepclr::features::LOG_FLOOR.ln();
    for (i, s) in scenes.iter().enumerate() {
        for k in 0..20 {
            let v = make_view(&s.mixture, &AugmentationPolicy::disabled(), derive_seed(9, "d", (i * 20 + k) as u64)).unwrap();
            let mean = v.values().iter().sum::<f64>() / v.values().len() as f64;
            if mean < floor + 0.5 {
                silent += 1;
            }
            total += 1;
        }
    }
    println!("near-silent views: {silent}/{total}");

    // embedding cosine spread, untrained
    let state = ModelState::init(EncoderConfig::desk_default(), 1);
    let patches: Vec<LogMelPatch> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| make_view(&s.mixture, &AugmentationPolicy::disabled(), i as u64).unwrap())
        .collect();
    let refs: Vec<&LogMelPatch> = patches.iter().collect();
    let hs = sepclr::model::encode_batch(&refs, &state).unwrap();
    let mut sims = Vec::new();
    for i in 0..hs.len() {
        for j in i + 1..hs.len() {
            sims.push(sepclr::losses::cosine_similarity(&hs[i], &hs[j]).unwrap());
        }
    }
    let mean_sim = sims.iter().sum::<f64>() / sims.len() as f64;
    let min = sims.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("untrained h cosine: mean {mean_sim:.4} min {min:.4} max {max:.4}");

    // gradient check: full sim path (encoder + head + nt_xent) vs FD
    let state = ModelState::init(EncoderConfig::reduced(16), 3);
    let views: Vec<&LogMelPatch> = refs[..8].to_vec();
    let input = patches_to_tensor(&views).unwrap();
    let mut eval_loss = |p: &ParamSet| -> f64 {
        let s = ModelState { encoder: state.encoder.clone(), params: p.clone() };
        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &s, &[]);
        let x = g.leaf(input.clone(), false);
        let h = encoder_forward(&mut g, &s, &leaves, x).unwrap();
        let z = sim_head_forward(&mut g, &s, &leaves, h).unwrap();
        let l = nt_xent_node(&mut g, z, 0.3).unwrap();
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let leaves = insert_param_leaves(&mut g, &state, &["encoder.", "sim_head."]);
    let x = g.leaf(input.clone(), false);
    let h = encoder_forward(&mut g, &state, &leaves, x).unwrap();
    let z = sim_head_forward(&mut g, &state, &leaves, h).unwrap();
    let l = nt_xent_node(&mut g, z, 0.3).unwrap();
    let grads = g.backward(l).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, p) in state.params.params.iter().enumerate() {
        if !(p.name.starts_with("encoder.") || p.name.starts_with("sim_head.")) {
            continue;
        }
        let ga = grads[leaves[pi]].as_ref().unwrap();
        let stride = (p.value.numel() / 5).max(1);
        for ci in (0..p.value.numel()).step_by(stride) {
            let num = gradcheck::central_diff(&mut eval_loss, &state.params, pi, ci, 1e-5);
            let err = gradcheck::rel_err(ga.data()[ci], num);
            if err > worst {
                worst = err;
            }
            checked += 1;
        }
    }
    println!("nt-xent full-path grad check: {checked} coords, worst rel err {worst:.2e}");
}
