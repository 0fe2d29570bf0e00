use autoclip_core::clipping::ClipConfig;
use autoclip_core::dynamics::{local_smoothness, step_size};
use autoclip_core::harness::{RunConfig, Trainer};
use autoclip_core::losses::LossKind;
use autoclip_core::optim::OptimizerConfig;

fn tiny(loss: LossKind) -> RunConfig {
    let mut cfg = RunConfig { loss, iterations: 30, batch_size: 2, record_every: 1, ..Default::default() };
    cfg.data.train_mixtures = 4;
    cfg.data.val_mixtures = 1;
    cfg.data.crop_frames = 8;
    cfg.data.synth.duration_s = [0.15, 0.2];
    cfg.model.hidden = 6;
    cfg.model.layers = 1;
    cfg.model.embedding_dim = 3;
    cfg.skip_validation = true;
    cfg
}

/// Smooth losses only: the L1 mask loss has gradient jumps where residuals
/// change sign, so no secant rule agrees across them.
#[test]
fn smoothness_matches_a_three_point_probe() {
    for loss in [LossKind::Snr, LossKind::Dc, LossKind::Wkm] {
        let mut t = Trainer::new(tiny(loss)).unwrap();
        for _ in 0..5 {
            let batch = t.next_batch().unwrap();
            let params = t.params().clone();
            let grad_at = |theta: &[f64]| {
                let mut p = params.clone();
                p.set_flat(theta).unwrap();
                t.loss_and_grad(&p, &batch).unwrap().1.to_flat()
            };
            let a = params.to_flat();
            let g = grad_at(&a);
            let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let b: Vec<f64> = a.iter().zip(&g).map(|(x, d)| x - 1e-3 * d / gn).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let (ga, gm, gb) = (grad_at(&a), grad_at(&mid), grad_at(&b));
            let secant = local_smoothness(&a, &b, &ga, &gb).unwrap().unwrap();
            let dist = step_size(&b, &a).unwrap();
            let probe = (step_size(&gm, &ga).unwrap() + step_size(&gb, &gm).unwrap()) / dist;
            assert!((secant - probe).abs() <= 0.1 * probe, "{loss}: secant {secant}, probe {probe}");
            t.step().unwrap();
        }
    }
}

#[test]
fn instrumentation_does_not_perturb_training() {
    for loss in LossKind::ALL {
        let run = |every| {
            let mut t = Trainer::new(RunConfig { record_every: every, ..tiny(loss) }).unwrap();
            t.run().unwrap();
            (t.params().to_flat(), t.recorder().records.len())
        };
        let (plain, none) = run(0);
        let (recorded, some) = run(3);
        assert_eq!(none, 0);
        assert!(some > 0);
        assert_eq!(plain, recorded, "{loss}");
    }
}

#[test]
fn clipped_sgd_steps_are_bounded_by_lr_times_threshold() {
    let lr = 0.05;
    let cfg = RunConfig {
        optimizer: OptimizerConfig::sgd(lr),
        clip: ClipConfig::autoclip(25.0),
        ..tiny(LossKind::Mi)
    };
    let mut t = Trainer::new(cfg).unwrap();
    t.run().unwrap();
    let records = &t.recorder().records;
    assert_eq!(records.len() + t.recorder().skipped, 30);
    let max_threshold = records.iter().map(|r| r.clip_threshold).fold(0.0, f64::max);
    let mut fired = 0;
    for r in records {
        assert!(r.step_size <= lr * max_threshold * (1.0 + 1e-12));
        if r.fired {
            fired += 1;
            let want = lr * r.clip_threshold;
            assert!((r.step_size - want).abs() <= 1e-9 * want, "iteration {}: {} vs {want}", r.iteration, r.step_size);
        }
    }
    assert!(fired > 0);
}
