use hiermatch::config::RunConfig;
use hiermatch::data::{generate, Dataset, DetailLevel, RegionFeatureRecord, SyntheticSpec};
use hiermatch::harness::{
    self, ablate, evaluate, evaluate_with, trace_record, AblationMode, Protocol, StopReason,
};
use hiermatch::{checkpoint, Branch, Error, ModelConfig, ModeFlags, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec(n_identities: usize, n_train: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_identities,
        n_train,
        d_raw: 6,
        n_regions_photo: 5,
        strokes_min: 3,
        strokes_max: 5,
        seed,
        ..SyntheticSpec::default()
    }
}

fn tiny_run(modes: ModeFlags) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d_raw: 6,
            d: 8,
            d_h: 4,
            modes,
            ..ModelConfig::default()
        },
        lr: 1e-2,
        batch: 4,
        epochs: 3,
        seed: 5,
        patience: 0,
    }
}

#[test]
fn two_identity_toy_set_converges() {
    let ds = generate(&tiny_spec(3, 2, 1)).unwrap();
    let mut run = tiny_run(ModeFlags::default());
    run.batch = 2;
    run.epochs = 200;
    let mut losses = Vec::new();
    let (state, reason) = harness::train(&run, &ds, None, false, |_, l| losses.push(l)).unwrap();
    assert_eq!(reason, StopReason::EpochBudget);
    // one step per epoch
    assert_eq!(state.epoch, 200);
    assert!(losses.iter().any(|&l| l < 1e-3), "best loss {}", state.best_loss);
}

#[test]
fn resume_is_bit_exact() {
    let ds = generate(&tiny_spec(10, 6, 2)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut run = tiny_run(ModeFlags::default());
    run.epochs = 4;
    let (straight, _) = harness::train(&run, &ds, None, false, |_, _| {}).unwrap();

    let mut short = run.clone();
    short.epochs = 2;
    harness::train(&short, &ds, Some(tmp.path()), false, |_, _| {}).unwrap();
    let (resumed, _) = harness::train(&run, &ds, Some(tmp.path()), true, |_, _| {}).unwrap();
    assert_eq!(resumed, straight);
    assert_eq!(checkpoint::load(tmp.path()).unwrap(), straight);
}

#[test]
fn resume_rejects_other_config() {
    let ds = generate(&tiny_spec(10, 6, 2)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = tiny_run(ModeFlags::default());
    harness::train(&run, &ds, Some(tmp.path()), false, |_, _| {}).unwrap();
    let mut other = run.clone();
    other.lr = 0.5;
    let err = harness::train(&other, &ds, Some(tmp.path()), true, |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn mean_pool_reduction_trains() {
    let ds = generate(&tiny_spec(10, 6, 3)).unwrap();
    let run = tiny_run(ModeFlags {
        no_coattn: true,
        no_hierarchy: true,
        explicit_hierarchy: false,
    });
    let (state, _) = harness::train(&run, &ds, None, false, |_, _| {}).unwrap();
    assert_eq!(state.losses.len(), 3);
}

#[test]
fn non_finite_loss_aborts_with_state_dump() {
    let mut ds = generate(&tiny_spec(6, 4, 4)).unwrap();
    let id = ds.train[0];
    let rec = ds
        .records
        .iter_mut()
        .find(|r| r.identity == id && r.modality == Branch::Photo)
        .unwrap();
    rec.regions.data_mut()[0] = 1e300;
    let tmp = tempfile::tempdir().unwrap();
    let err = harness::train(&tiny_run(ModeFlags::default()), &ds, Some(tmp.path()), false, |_, _| {})
        .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let dumped = checkpoint::load(&tmp.path().join("failed")).unwrap();
    assert_eq!(dumped.epoch, 0);
    assert!(dumped.model.params.all_finite());
}

#[test]
fn gallery_of_one_is_always_found() {
    let ds = generate(&tiny_spec(3, 2, 6)).unwrap();
    assert_eq!(ds.test.len(), 1);
    let model = hiermatch::Model::new(tiny_run(ModeFlags::default()).model, 0).unwrap();
    for v in DetailLevel::ALL {
        let r = evaluate(&model, &ds, v).unwrap();
        assert_eq!((r.acc_at_1, r.acc_at_10), (1.0, 1.0));
    }
}

/// Sketches and photos drawn independently: nothing links a query to its
/// true photo.
fn unrelated_dataset(g: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for id in 0..g as u32 {
        for (modality, n) in [(Branch::Photo, 5), (Branch::Sketch, rng.gen_range(1..=5))] {
            let data = (0..n * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            records.push(RegionFeatureRecord {
                identity: id,
                modality,
                variant: DetailLevel::Full,
                regions: Tensor::new(n, 6, data).unwrap(),
                tree: None,
            });
        }
    }
    Dataset {
        d_raw: 6,
        records,
        train: Vec::new(),
        test: (0..g as u32).collect(),
    }
}

#[test]
fn random_models_rank_at_chance() {
    // With no signal every rank-1 hit is a Bernoulli(1/G) draw, so the
    // pooled count over independent models and galleries is binomial.
    let g = 10;
    let seeds = 40;
    let mut hits = 0;
    for seed in 0..seeds {
        let ds = unrelated_dataset(g, 100 + seed);
        let model = hiermatch::Model::new(tiny_run(ModeFlags::default()).model, seed).unwrap();
        let r = evaluate(&model, &ds, DetailLevel::Full).unwrap();
        assert_eq!(r.gallery_size, g);
        assert!(r.acc_at_1 <= r.acc_at_10);
        assert!(r.ranks.iter().all(|&k| (1..=g).contains(&k)));
        hits += r.ranks.iter().filter(|&&k| k == 1).count();
    }
    let n = (seeds as usize * g) as f64;
    let p = 1.0 / g as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!(
        (hits as f64 - n * p).abs() <= 3.0 * sigma,
        "{hits} hits in {n} queries"
    );
}

#[test]
fn evaluation_is_repeatable_and_protocols_agree_without_coattention() {
    let ds = generate(&tiny_spec(12, 6, 7)).unwrap();
    let run = tiny_run(ModeFlags {
        no_coattn: true,
        ..ModeFlags::default()
    });
    let (state, _) = harness::train(&run, &ds, None, false, |_, _| {}).unwrap();
    let a = evaluate(&state.model, &ds, DetailLevel::Coarse).unwrap();
    let b = evaluate(&state.model, &ds, DetailLevel::Coarse).unwrap();
    assert!(a.same_result(&b));
    let p = evaluate_with(&state.model, &ds, DetailLevel::Coarse, Protocol::Paired).unwrap();
    assert_eq!(p.ranks, a.ranks);
    assert_eq!(p.protocol, Protocol::Paired);
}

#[test]
fn two_region_record_traces_one_merge() {
    let ds = generate(&SyntheticSpec {
        n_regions_photo: 2,
        strokes_min: 1,
        strokes_max: 2,
        ..tiny_spec(4, 2, 8)
    })
    .unwrap();
    let model = hiermatch::Model::new(tiny_run(ModeFlags::default()).model, 1).unwrap();
    let report = trace_record(&model, ds.photo(ds.test[0]).unwrap()).unwrap();
    assert_eq!(report.trace.len(), 1);
    assert_eq!(report.fidelity, Some(1.0));
    let text = report.to_text();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn explicit_replay_of_emitted_trace_matches() {
    let ds = generate(&tiny_spec(6, 3, 9)).unwrap();
    let mut cfg = tiny_run(ModeFlags::default()).model;
    let model = hiermatch::Model::new(cfg.clone(), 2).unwrap();
    let rec = ds.photo(ds.test[0]).unwrap();
    let report = trace_record(&model, rec).unwrap();

    cfg.modes.explicit_hierarchy = true;
    let replay = hiermatch::Model::from_store(cfg, model.params.clone()).unwrap();
    let parsed = hiermatch::HierarchyTrace::parse(&report.trace.to_text()).unwrap();
    let (v, t) = replay
        .embed_single_value(&rec.regions, rec.modality, Some(&parsed))
        .unwrap();
    assert_eq!(v, report.embedding);
    assert_eq!(t.to_text(), report.trace.to_text());
}

fn ablation_data() -> Dataset {
    generate(&tiny_spec(10, 5, 10)).unwrap()
}

#[test]
fn ablation_has_one_row_per_mode() {
    let ds = ablation_data();
    let mut base = tiny_run(ModeFlags::default());
    base.epochs = 1;
    let table = ablate(&base, &ds, &AblationMode::ALL, &[0, 1], |_| {});
    assert_eq!(table.rows.len(), AblationMode::ALL.len());
    for mode in AblationMode::ALL {
        let row = table.row(mode).unwrap();
        let reports = row.outcome.as_ref().unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].variant, mode.query_variant());
        assert!(row.mean_acc_at_1().unwrap() <= row.mean_acc_at_10().unwrap());
    }
    let text = table.to_text();
    assert!(text.contains("coarse++"));
    assert_eq!(table.to_csv().lines().count(), 1 + AblationMode::ALL.len());
}

#[test]
fn failed_ablation_rows_are_marked() {
    let mut ds = ablation_data();
    for r in &mut ds.records {
        r.tree = None;
    }
    let mut base = tiny_run(ModeFlags::default());
    base.epochs = 1;
    let modes = [AblationMode::Full, AblationMode::Explicit];
    let table = ablate(&base, &ds, &modes, &[0], |_| {});
    assert!(table.row(AblationMode::Full).unwrap().outcome.is_ok());
    let failed = table.row(AblationMode::Explicit).unwrap();
    assert!(failed.outcome.is_err());
    assert!(table.to_text().contains("FAILED"));
    assert!(table.to_csv().contains("FAILED"));
}
