use autoclip_core::clipping::ClipConfig;
use autoclip_core::dynamics::parse_dynamics_csv;
use autoclip_core::harness::{
    cell_config, parse_results_csv, results_csv, run_cell, run_sweep, run_training, Checkpoint, PLabel, RunConfig,
    RunOutput, SweepCell, Trainer, DEFAULT_P_VALUES,
};
use autoclip_core::losses::LossKind;

fn tiny(loss: LossKind) -> RunConfig {
    let mut cfg = RunConfig { loss, iterations: 12, batch_size: 2, record_every: 2, ..Default::default() };
    cfg.data.train_mixtures = 4;
    cfg.data.val_mixtures = 1;
    cfg.data.crop_frames = 8;
    cfg.data.synth.duration_s = [0.15, 0.2];
    cfg.model.hidden = 6;
    cfg.model.layers = 1;
    cfg.model.embedding_dim = 3;
    cfg
}

#[test]
fn p100_is_identical_to_no_clipping() {
    for loss in LossKind::ALL {
        let a = run_training(&RunConfig { clip: ClipConfig::autoclip(100.0), ..tiny(loss) }).unwrap();
        let b = run_training(&RunConfig { clip: ClipConfig::none(), ..tiny(loss) }).unwrap();
        assert_eq!(a.params, b.params, "{loss}");
        assert_eq!(a.losses, b.losses);
        let (ra, rb) = (parse_dynamics_csv(&a.dynamics_csv).unwrap(), parse_dynamics_csv(&b.dynamics_csv).unwrap());
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(&rb) {
            assert!(!x.fired && !y.fired);
            assert_eq!((x.grad_norm, x.step_size, x.smoothness), (y.grad_norm, y.step_size, y.smoothness));
        }
    }
}

#[test]
fn same_config_gives_byte_identical_outputs() {
    let cfg = tiny(LossKind::Chimera);
    let (a, b) = (run_training(&cfg).unwrap(), run_training(&cfg).unwrap());
    assert_eq!(a.dynamics_csv, b.dynamics_csv);
    assert_eq!(a.params, b.params);
    let cell = |o: &RunOutput| results_csv(&[SweepCell { p: o.row.p, loss: o.row.loss, row: Some(o.row.clone()), error: None }]);
    assert_eq!(cell(&a), cell(&b));
}

#[test]
fn full_sweep_has_35_cells_and_round_trips() {
    let base = RunConfig { iterations: 4, ..tiny(LossKind::Mi) };
    let ps: Vec<PLabel> = DEFAULT_P_VALUES.iter().map(|&p| PLabel::Percentile(p)).collect();
    let cells = run_sweep(&base, &ps, &LossKind::ALL).unwrap();
    assert_eq!(cells.len(), 35);
    assert!(cells.iter().all(|c| c.row.is_some()));
    let csv = results_csv(&cells);
    assert_eq!(csv.lines().count(), 36);
    assert_eq!(parse_results_csv(&csv).unwrap(), cells);

    let one = run_sweep(&base, &[PLabel::Percentile(10.0)], &[LossKind::Dc]).unwrap();
    assert_eq!(one.len(), 1);
    let same = cells.iter().find(|c| c.p == PLabel::Percentile(10.0) && c.loss == LossKind::Dc).unwrap();
    assert_eq!(&one[0], same);
}

#[test]
fn sweep_cells_are_order_independent() {
    let base = RunConfig { iterations: 6, ..tiny(LossKind::Mi) };
    let ps = [PLabel::Percentile(10.0), PLabel::Percentile(50.0), PLabel::None];
    let losses = [LossKind::Mi, LossKind::Wkm];
    let forward = run_sweep(&base, &ps, &losses).unwrap();
    let mut rps = ps;
    rps.reverse();
    let mut rl = losses;
    rl.reverse();
    let backward = run_sweep(&base, &rps, &rl).unwrap();
    for cell in &forward {
        let twin = backward.iter().find(|c| c.p == cell.p && c.loss == cell.loss).unwrap();
        assert_eq!(cell, twin);
        let alone = run_cell(&cell_config(&base, cell.p, cell.loss).unwrap());
        assert_eq!(cell, &alone);
    }
}

#[test]
fn checkpoint_file_round_trip_resumes_exactly() {
    let cfg = RunConfig { clip: ClipConfig::autoclip(25.0), ..tiny(LossKind::Snr) };
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.run().unwrap();

    let mut first = Trainer::new(cfg).unwrap();
    for _ in 0..5 {
        first.step().unwrap();
    }
    let path = std::env::temp_dir().join(format!("autoclip-ck-{}.json", std::process::id()));
    first.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(loaded, first.checkpoint());

    let mut resumed = Trainer::resume(loaded).unwrap();
    resumed.run().unwrap();
    assert_eq!(resumed.checkpoint(), straight.checkpoint());
    let (a, b) = (resumed.finish().unwrap(), straight.finish().unwrap());
    assert_eq!(a.dynamics_csv, b.dynamics_csv);
    assert_eq!(a.row, b.row);
}

#[test]
fn recurrent_gradient_norms_are_heavy_tailed() {
    let mut cfg = RunConfig {
        loss: LossKind::Mi,
        iterations: 500,
        clip: ClipConfig::none(),
        record_every: 0,
        skip_validation: true,
        ..Default::default()
    };
    cfg.data.train_mixtures = 40;
    cfg.data.val_mixtures = 1;
    let mut t = Trainer::new(cfg).unwrap();
    t.run().unwrap();
    let mut norms: Vec<f64> = t.clipper().history().norms().collect();
    assert_eq!(norms.len(), 500);
    norms.sort_by(f64::total_cmp);
    let median = (norms[249] + norms[250]) / 2.0;
    let ratio = norms[499] / median;
    assert!(ratio > 3.0, "max/median gradient norm {ratio}");
}
