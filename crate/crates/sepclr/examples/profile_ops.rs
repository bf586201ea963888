//! Per-op forward/backward timing at training shapes.

use std::time::Instant;

use sepclr::model::{EncoderConfig, ModelState};
use sepclr::nn::{Graph, Tensor};
use sepclr::rng::rng_for;

fn main() {
    use rand::Rng;
    let mut rng = rng_for(1, "prof", 0);
    let state = ModelState::init(EncoderConfig::desk_default(), 1);
    let input = {
        let n = 128 * 96 * 64;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-11.5..2.0)).collect();
        Tensor::from_vec(&[128, 1, 96, 64], data).unwrap()
    };

    let time_fb = |label: &str, build: &dyn Fn(&mut Graph) -> usize| {
        // forward
        let reps = 5;
        let t = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let _ = build(&mut g);
        }
        let fwd = t.elapsed().as_secs_f64() / reps as f64 * 1e3;
        // forward + backward through a sum
        let t = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let out = build(&mut g);
            let s = g.sum_all(out);
            let _ = g.backward(s).unwrap();
        }
        let both = t.elapsed().as_secs_f64() / reps as f64 * 1e3;
        println!("{label:28} fwd {fwd:7.1} ms   fwd+bwd {both:7.1} ms");
    };

    let w1 = state.params.params[state.params.index_of("encoder.conv1.w").unwrap()].value.clone();
    let w2 = state.params.params[state.params.index_of("encoder.conv2.w").unwrap()].value.clone();
    let w3 = state.params.params[state.params.index_of("encoder.conv3.w").unwrap()].value.clone();
    let we = state.params.params[state.params.index_of("encoder.embed.w").unwrap()].value.clone();

    let mk_x = |g: &mut Graph, input: &Tensor| -> usize {
        let x = g.leaf(input.clone(), true);
        x
    };

    time_fb("affine [128,1,96,64]", &|g| {
        let x = mk_x(g, &input);
        g.affine_scalar(x, 0.25, 1.5)
    });
    time_fb("avgpool2 [128,1,96,64]", &|g| {
        let x = mk_x(g, &input);
        g.avg_pool2d(x, 2).unwrap()
    });

    let stem = {
        let mut g = Graph::new();
        let x = g.leaf(input.clone(), false);
        let p = g.avg_pool2d(x, 2).unwrap();
        g.value(p).clone()
    };
    time_fb("conv1 1->8 @48x32", &|g| {
        let x = mk_x(g, &stem);
        let w = g.leaf(w1.clone(), true);
        g.conv2d(x, w, 1, 1).unwrap()
    });

    let a1 = {
        let mut g = Graph::new();
        let x = g.leaf(stem.clone(), false);
        let w = g.leaf(w1.clone(), false);
        let c = g.conv2d(x, w, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_pool2d(r, 2).unwrap();
        g.value(p).clone()
    };
    time_fb("relu [128,8,48,32]", &|g| {
        let mut x = mk_x(g, &stem);
        x = g.relu(x);
        x
    });
    time_fb("conv2 8->16 @24x16", &|g| {
        let x = mk_x(g, &a1);
        let w = g.leaf(w2.clone(), true);
        g.conv2d(x, w, 1, 1).unwrap()
    });

    let a2 = {
        let mut g = Graph::new();
        let x = g.leaf(a1.clone(), false);
        let w = g.leaf(w2.clone(), false);
        let c = g.conv2d(x, w, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_pool2d(r, 2).unwrap();
        g.value(p).clone()
    };
    time_fb("conv3 16->32 @12x8", &|g| {
        let x = mk_x(g, &a2);
        let w = g.leaf(w3.clone(), true);
        g.conv2d(x, w, 1, 1).unwrap()
    });

    let a3 = {
        let mut g = Graph::new();
        let x = g.leaf(a2.clone(), false);
        let w = g.leaf(w3.clone(), false);
        let c = g.conv2d(x, w, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_pool2d(r, 2).unwrap();
        g.value(p).clone()
    };
    time_fb("embconv 32->128 s2 @6x4", &|g| {
        let x = mk_x(g, &a3);
        let w = g.leaf(we.clone(), true);
        g.conv2d(x, w, 1, 2).unwrap()
    });
}
