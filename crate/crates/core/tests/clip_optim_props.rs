use autoclip_core::clipping::{autoclip_step, suggest_static_threshold, ClipConfig, GradNormHistory};
use autoclip_core::dynamics::step_size;
use autoclip_core::model::Parameters;
use autoclip_core::optim::{adam_step_in_place, sgd_step_in_place, AdamState, OptimizerConfig};
use autoclip_core::{GradVector, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

fn params(xs: Vec<f64>) -> Parameters {
    Parameters::from_tensors(vec![("theta".into(), Tensor::vector(xs))])
}

fn grad(xs: Vec<f64>) -> GradVector {
    GradVector::new(vec![Tensor::vector(xs)])
}

/// Noisy quadratic: gradient of ½‖θ − b_t‖² with random targets b_t and
/// occasional spikes.
fn noisy_gradient(rng: &mut ChaCha8Rng, theta: &[f64]) -> Vec<f64> {
    let spike = if rng.gen_bool(0.05) { 20.0 } else { 1.0 };
    theta.iter().map(|t| spike * (t - rng.gen_range(-1.0..1.0))).collect()
}

#[test]
fn autoclip_then_adam_is_invariant_to_gradient_scale() {
    let cfg = OptimizerConfig { eps: 1e-12, ..OptimizerConfig::adam(1e-2) };
    let clip = ClipConfig::autoclip(10.0);
    for a in [1e3, 1e-3, 37.0] {
        let mut rng_a = ChaCha8Rng::seed_from_u64(11);
        let mut rng_b = ChaCha8Rng::seed_from_u64(11);
        let theta0 = vec![0.5, -1.0, 2.0, 0.0, 1.5];
        let (mut pa, mut pb) = (params(theta0.clone()), params(theta0.clone()));
        let (mut sa, mut sb) = (AdamState::new(5), AdamState::new(5));
        let (mut ha, mut hb) = (GradNormHistory::new(), GradNormHistory::new());
        for step in 0..100 {
            let ga = noisy_gradient(&mut rng_a, &pa.to_flat());
            let gb: Vec<f64> = noisy_gradient(&mut rng_b, &pb.to_flat()).iter().map(|g| a * g).collect();
            let (ca, _) = autoclip_step(&mut ha, &grad(ga), &clip).unwrap();
            let (cb, _) = autoclip_step(&mut hb, &grad(gb), &clip).unwrap();
            adam_step_in_place(&mut pa, &mut sa, &ca, &cfg).unwrap();
            adam_step_in_place(&mut pb, &mut sb, &cb, &cfg).unwrap();
            let moved = step_size(&pa.to_flat(), &theta0).unwrap();
            let gap = step_size(&pa.to_flat(), &pb.to_flat()).unwrap();
            assert!(gap <= 1e-6 * moved, "a = {a}, step {step}: gap {gap} vs displacement {moved}");
        }
    }
}

#[test]
fn clipped_sgd_step_is_bounded_by_lr_times_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = OptimizerConfig::sgd(0.05);
    let clip = ClipConfig::autoclip(25.0);
    let mut p = params(vec![1.0; 8]);
    let mut h = GradNormHistory::new();
    let mut max_threshold = 0.0_f64;
    let mut steps = Vec::new();
    for _ in 0..500 {
        let before = p.to_flat();
        let g = noisy_gradient(&mut rng, &before);
        let (c, report) = autoclip_step(&mut h, &grad(g), &clip).unwrap();
        sgd_step_in_place(&mut p, &c, &cfg).unwrap();
        let s = step_size(&p.to_flat(), &before).unwrap();
        assert!(s <= cfg.lr * report.threshold * (1.0 + 1e-12));
        if report.fired {
            let want = cfg.lr * report.threshold;
            assert!((s - want).abs() <= 1e-12 * want, "fired step {s} vs {want}");
        }
        max_threshold = max_threshold.max(report.threshold);
        steps.push(s);
    }
    assert!(steps.iter().all(|&s| s <= cfg.lr * max_threshold * (1.0 + 1e-12)));
}

#[test]
fn fire_fraction_tracks_percentile_for_iid_norms() {
    let dist = LogNormal::new(0.0, 0.7).unwrap();
    for p in [10.0, 25.0, 50.0, 90.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
        let mut h = GradNormHistory::new();
        let cfg = ClipConfig::autoclip(p);
        let steps = 5000;
        let mut fired = 0;
        for _ in 0..steps {
            let n: f64 = dist.sample(&mut rng);
            let (_, r) = autoclip_step(&mut h, &grad(vec![n]), &cfg).unwrap();
            fired += usize::from(r.fired);
        }
        let frac = fired as f64 / steps as f64;
        let want = (100.0 - p) / 100.0;
        assert!((frac - want).abs() <= 0.05, "p = {p}: fired {frac}");
    }
}

#[test]
fn static_suggestion_for_uniform_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = GradNormHistory::from_norms((0..1000).map(|_| rng.gen_range(0.0..1.0)), None).unwrap();
    let (lo, hi) = suggest_static_threshold(&h).unwrap();
    assert!((lo - 2.5).abs() < 0.15 && (hi - 5.0).abs() < 0.3, "({lo}, {hi})");
    let zero = GradNormHistory::from_norms([0.0], None).unwrap();
    assert_eq!(suggest_static_threshold(&zero).unwrap(), (0.0, 0.0));
}
