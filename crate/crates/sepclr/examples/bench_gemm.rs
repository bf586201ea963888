//! GEMM throughput probe at the layer shapes training actually uses.

use sepclr::nn::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use std::time::Instant;

fn bench(name: &str, flops: f64, mut f: impl FnMut()) {
    let t = Instant::now();
    let mut reps = 0;
    while t.elapsed().as_secs_f64() < 0.5 {
        f();
        reps += 1;
    }
    let el = t.elapsed().as_secs_f64();
    println!("{name}: {:.2} GFLOP/s ({reps} reps)", flops * reps as f64 / el / 1e9);
}

fn main() {
    // conv2 fwd shape: col [49152, 72] @ w [16, 72]^T
    let (bp, kdim, cout) = (49152usize, 72usize, 16usize);
    let a = vec![0.5f64; bp * kdim];
    let w = vec![0.25f64; cout * kdim];
    let mut c = vec![0.0f64; bp * cout];
    bench("conv2-fwd nt", 2.0 * (bp * kdim * cout) as f64, || {
        c.iter_mut().for_each(|v| *v = 0.0);
        gemm_nt_acc(&a, &w, &mut c, bp, kdim, cout);
    });

    // conv2 dX: gy [49152, 16] @ w [16, 72]
    let gy = vec![0.5f64; bp * cout];
    let mut dcol = vec![0.0f64; bp * kdim];
    bench("conv2-dx acc", 2.0 * (bp * cout * kdim) as f64, || {
        dcol.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(&gy, &w, &mut dcol, bp, cout, kdim);
    });

    // conv2 dW: gy^T [16, 49152] @ col [49152, 72]
    let mut dw = vec![0.0f64; cout * kdim];
    bench("conv2-dw tn", 2.0 * (bp * cout * kdim) as f64, || {
        dw.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn_acc(&gy, &a, &mut dw, cout, bp, kdim);
    });

    // coin-head shape: [4096, 512] @ [512, 512]^T
    let (m, k, n) = (4096usize, 512usize, 512usize);
    let a2 = vec![0.5f64; m * k];
    let b2 = vec![0.25f64; n * k];
    let mut c2 = vec![0.0f64; m * n];
    bench("coin nt 4096x512x512", 2.0 * (m * k * n) as f64, || {
        c2.iter_mut().for_each(|v| *v = 0.0);
        gemm_nt_acc(&a2, &b2, &mut c2, m, k, n);
    });
}
