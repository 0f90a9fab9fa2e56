//! Temporary calibration probe (not part of the suite; run with --ignored).

use dgfamba_core::backbone::BackboneConfig;
use dgfamba_core::data::{default_domains, generate_dataset, DatasetConfig, Dataset};
use dgfamba_core::style::compute_style_stats;
use dgfamba_core::trainer::{evaluate, train_run, RunConfig};

#[test]
#[ignore]
fn probe_learning() {
    let dir = std::env::temp_dir().join("dgfamba-calib-probe");
    let cfg_data = DatasetConfig {
        seed: 17,
        n_per_cell: 40,
        image_size: 32,
    };
    generate_dataset(&dir, &default_domains(), &cfg_data, true).unwrap();
    let ds: Dataset<f64> = Dataset::load(&dir).unwrap();

    let mut cfg = RunConfig::default();
    cfg.train.backbone = BackboneConfig {
        block_layer_counts: vec![1, 1, 2, 1],
        channels_per_block: vec![16, 24, 32, 48],
        state_dim: 4,
        patch_size: 4,
        num_classes: 4,
        image_size: 32,
    };
    cfg.train.latent_dim = 8;
    cfg.train.iterations = 900;
    cfg.train.batch_per_domain = 8;
    cfg.train.lr = 2e-3;
    cfg.train.seed = 1;
    
    // measure natural per-channel stats at the hooks of a trained baseline
    {
        let mut c = cfg.clone();
        c.train.target_domain = "flat".into();
        c.flags.ssr = false;
        c.flags.sfe = false;
        c.flags.sfc = false;
        let out = train_run(&c, &ds).unwrap();
        let idx: Vec<usize> = ds.samples_of("gradient").unwrap()[..16].to_vec();
        let (images, _, _) = ds.batch_of(&idx);
        let hooks = c.resolve_hooks();
        let (_, feats) = out
            .model
            .backbone
            .encode_image(&out.model.ps, &images, &hooks)
            .unwrap();
        for (layer, fm) in &feats {
            let st = compute_style_stats(&fm.data);
            let mu_lo = st.mu.iter().cloned().fold(f64::MAX, f64::min);
            let mu_hi = st.mu.iter().cloned().fold(f64::MIN, f64::max);
            let mu_mean = st.mu.sum() / st.mu.len() as f64;
            let sg_lo = st.sigma.iter().cloned().fold(f64::MAX, f64::min);
            let sg_hi = st.sigma.iter().cloned().fold(f64::MIN, f64::max);
            let sg_mean = st.sigma.sum() / st.sigma.len() as f64;
            eprintln!(
                "layer {layer}: mu [{mu_lo:.3}, {mu_hi:.3}] mean {mu_mean:.3} | sigma [{sg_lo:.3}, {sg_hi:.3}] mean {sg_mean:.3}"
            );
        }
    }
    for target in ["flat", "stripes"] {
    for (name, ssr, sfe, sfc) in [
        ("baseline", false, false, false),
        ("ssr", true, false, false),
        ("ssr+sfe", true, true, false),
        ("full", true, true, true),
    ] {
        let mut c = cfg.clone();
        c.train.target_domain = target.into();
        c.flags.ssr = ssr;
        c.flags.sfe = sfe;
        c.flags.sfc = sfc;
        let t0 = std::time::Instant::now();
        let out = train_run(&c, &ds).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let last = out.log.last().unwrap();
        let mut accs = Vec::new();
        for d in ["gradient", "stripes", "outline", "flat"] {
            accs.push((d, evaluate(&out.model, &ds, d, 64).unwrap()));
        }
        eprintln!(
            "target {target:8} {name:9} {dt:6.1}s  ce {:.3}  hj {:.4}  | {}",
            last.ce,
            last.hj,
            accs.iter()
                .map(|(d, a)| format!("{d} {a:.1}%"))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
    }
}
