//! Temporary OT-toy tuning probe (not part of the suite; run with --ignored).

use dgfamba_core::flow::PotentialPair;
use dgfamba_core::hj::{flow_branch_backward_with, flow_branch_forward};
use dgfamba_core::nn::{cosine_lr, AdamW, ParamStore};
use dgfamba_core::rng;
use dgfamba_core::Scalar;
use ndarray::Array2;

fn sample_source(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 2), |_| 0.5 * f64::standard_normal(rng))
}

#[test]
#[ignore]
fn tune_gaussian_transport() {
    let target_mean = [2.0, 0.0];
    let target_std = 0.5;
    let steps = 8;
    for (iters, lr, w_end, batch) in [
        (1500usize, 3e-3, 4.0, 256usize),
        (2500, 2e-3, 8.0, 256),
    ] {
        let mut ps = ParamStore::<f64>::new();
        let mut init_rng = rng::stream(3, "ot-init");
        let pair = PotentialPair::init(&mut ps, "toy", 2, &[64, 64], 0.1, &mut init_rng);
        let mut data_rng = rng::stream(3, "ot-data");
        let mut opt = AdamW::new(&ps, 0.9, 0.0);
        for it in 0..iters {
            let z0 = sample_source(&mut data_rng, batch);
            ps.zero_grads();
            let br = flow_branch_forward(&ps, &pair.u_net, &pair.force_net, &z0, steps).unwrap();
            let zt = br.z_path.last().unwrap();
            let b = zt.dim().0 as f64;
            // endpoint moment matching
            let mean: Vec<f64> = (0..2).map(|j| zt.column(j).sum() / b).collect();
            let var: Vec<f64> = (0..2)
                .map(|j| zt.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / b)
                .collect();
            let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            let mut dz = Array2::zeros(zt.dim());
            for bi in 0..zt.dim().0 {
                for j in 0..2 {
                    let dmean = 2.0 * (mean[j] - target_mean[j]) / b;
                    let dstd = 2.0 * (std[j] - target_std) * (zt[[bi, j]] - mean[j]) / (b * std[j]);
                    dz[[bi, j]] = w_end * (dmean + dstd);
                }
            }
            let _ =
                flow_branch_backward_with(&mut ps, &pair.u_net, &pair.force_net, &br, 1.0, Some(&dz));
            opt.step(&mut ps, cosine_lr(lr, it, iters));
        }
        // evaluation: action on a fresh big batch
        let mut eval_rng = rng::stream(99, "ot-eval");
        let z0 = sample_source(&mut eval_rng, 4096);
        let br = flow_branch_forward(&ps, &pair.u_net, &pair.force_net, &z0, steps).unwrap();
        let zt = br.z_path.last().unwrap();
        let b = zt.dim().0 as f64;
        let mean: Vec<f64> = (0..2).map(|j| zt.column(j).sum() / b).collect();
        let std: Vec<f64> = (0..2)
            .map(|j| {
                (zt.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / b).sqrt()
            })
            .collect();
        let mut action = 0.0;
        for t in 0..steps {
            let g = &br.gz[t];
            action += g.iter().map(|v| v * v).sum::<f64>() / b;
        }
        action *= steps as f64;
        eprintln!(
            "iters {iters} lr {lr} w_end {w_end}: endpoint mean ({:.3},{:.3}) std ({:.3},{:.3}) action {action:.4} (target 4.0)",
            mean[0], mean[1], std[0], std[1]
        );
    }
}

#[test]
#[ignore]
fn discrete_w2_sampling_envelope() {
    use dgfamba_core::ot::{w2_discrete_oracle, w2_gaussian_oracle, TransportProblem};
    use ndarray::Array1;
    // spec's Gaussian pair: d=2, s0=1, s1=2, |dm|=5 -> W2 = sqrt(27)
    let closed = w2_gaussian_oracle(&TransportProblem::Gaussian {
        mean0: Array1::from(vec![0.0, 0.0]),
        std0: 1.0,
        mean1: Array1::from(vec![3.0, 4.0]),
        std1: 2.0,
    })
    .unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut r = rng::stream(seed, "w2-envelope");
        let x = Array2::from_shape_fn((200, 2), |_| f64::standard_normal(&mut r));
        let y = Array2::from_shape_fn((200, 2), |(_, j)| {
            2.0 * f64::standard_normal(&mut r) + if j == 0 { 3.0 } else { 4.0 }
        });
        let w = w2_discrete_oracle(&TransportProblem::Clouds { x, y }).unwrap();
        let rel = (w - closed).abs() / closed;
        worst = worst.max(rel);
    }
    eprintln!("closed form {closed:.4}; worst relative deviation over 50 seeds: {worst:.4}");
}
