//! Measures the F-processor log-mel cosine and N-processor channel
//! correlation distributions over seeded scenes.

use sepclr::processors::{emptiness_score, process_f, process_n, waveform_correlation};
use sepclr::scenegen::{generate_scene, SceneConfig};

fn main() {
    let config = SceneConfig::default();
    let mut f_cosines = Vec::new();
    let mut n_corrs = Vec::new();
    for seed in 0..100u64 {
        let scene = generate_scene(seed, &config).unwrap();
        let f = process_f(&scene, 65, seed).unwrap();
        for ch in &f.channels {
            let (_, cos) = emptiness_score(ch, &scene.mixture).unwrap();
            f_cosines.push(cos);
        }
        let n = process_n(&scene, -6.0, 33, seed).unwrap();
        n_corrs.push(waveform_correlation(&n.channels[0], &n.channels[1]));
    }
    f_cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
    n_corrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |v: &[f64], p: f64| v[(p * v.len() as f64) as usize];
    println!(
        "F logmel cosine: min {:.4} p05 {:.4} p50 {:.4} max {:.4}",
        f_cosines[0], pct(&f_cosines, 0.05), pct(&f_cosines, 0.5), f_cosines[f_cosines.len() - 1]
    );
    println!(
        "N channel corr:  min {:.4} p05 {:.4} p50 {:.4} max {:.4}",
        n_corrs[0], pct(&n_corrs, 0.05), pct(&n_corrs, 0.5), n_corrs[n_corrs.len() - 1]
    );
}
