mod common;

use agenet::dataset::Split;
use agenet::hpo::{
    finalize, load_sealed, lock, save_sealed, search, search_with, FinalizeOptions, HpoError, LockedConfig,
    SearchOptions, SearchSpace, TrialResult, TrialStatus,
};
use agenet::seed::rng_for;
use agenet::{ModelSpec, Pretrained};
use proptest::prelude::*;

/// Kolmogorov distribution tail, `P(K > lambda)`.
fn kolmogorov_p(lambda: f64) -> f64 {
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn learning_rate_is_log_uniform() {
    let space = SearchSpace::default();
    let mut rng = rng_for(123, &[]);
    let (lo, hi) = (space.lr.0.ln(), space.lr.1.ln());
    let mut u: Vec<f64> = (0..1000)
        .map(|_| {
            let lr = space.sample(&mut rng).lr;
            assert!((5e-4..=2e-3).contains(&lr));
            (lr.ln() - lo) / (hi - lo)
        })
        .collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let sqrt_n = n.sqrt();
    let p = kolmogorov_p((sqrt_n + 0.12 + 0.11 / sqrt_n) * d);
    assert!(p > 0.01, "KS statistic {d:.4}, p {p:.4}");
}

proptest! {
    #[test]
    fn sampled_configs_are_valid(seed in any::<u64>()) {
        let space = SearchSpace::default();
        let mut rng = rng_for(seed, &[]);
        let c = space.sample(&mut rng);
        prop_assert!((5e-4..=2e-3).contains(&c.lr));
        prop_assert!((0.10..=0.30).contains(&c.dropout));
        prop_assert!([64, 128].contains(&c.batch_size));
        prop_assert!(space.transforms.contains(&c.transform));
        let spec = c.train_spec(&Default::default(), &space, 60, seed);
        prop_assert!(spec.validate().is_ok());
        prop_assert_eq!(spec.freeze_epochs, 5);
        prop_assert_eq!(spec.backbone_lr_mult, 0.10);
        prop_assert!(c.model_spec(&ModelSpec::default()).validate().is_ok());
    }
}

#[test]
fn trials_respect_the_epoch_cap() {
    let mut opts = SearchOptions::new("cap", 9);
    opts.budget = 6;
    opts.epoch_cap = 60;
    let (study, _) = search_with(&opts, None, &mut |ctx| {
        assert_eq!(ctx.train_spec.epochs, 60);
        Ok(TrialResult {
            val_mae_best: 5.0 + ctx.trial_id as f64,
            best_epoch: 10,
            epochs_run: ctx.train_spec.epochs,
            checkpoint: None,
        })
    })
    .unwrap();
    assert!(study.trials.iter().all(|t| t.epochs_run <= 60));
    assert_eq!(study.best_trial, 0);
}

#[test]
fn budget_of_one_selects_that_trial() {
    let mut opts = SearchOptions::new("one", 3);
    opts.budget = 1;
    let (study, _) = search_with(&opts, None, &mut |_| {
        Ok(TrialResult {
            val_mae_best: 7.5,
            best_epoch: 1,
            epochs_run: 1,
            checkpoint: None,
        })
    })
    .unwrap();
    assert_eq!(study.trials.len(), 1);
    assert_eq!(study.best().config, study.trials[0].config);
    assert_eq!(lock(&study, 100).config, study.trials[0].config);
}

fn tiny_options(id: &str) -> SearchOptions {
    let mut opts = SearchOptions::new(id, 77);
    opts.budget = 2;
    opts.epoch_cap = 1;
    opts.space.batch_sizes = vec![16];
    opts.space.freeze_epochs = 1;
    opts.base_model = ModelSpec {
        input_size: 32,
        ..ModelSpec::default()
    };
    opts.pretrained = Pretrained::Random { seed: 1 };
    opts
}

#[test]
fn search_never_reads_the_test_split_and_finalize_is_single_shot() {
    let corpus = common::stratified_corpus(&common::spread_ages(500, 1.0, 95.0), 21);
    let study = search(&corpus, &tiny_options("study-a")).unwrap();
    assert_eq!(study.test_reads_at_selection, 0);
    assert_eq!(corpus.audit().reads(Split::Test), 0);
    assert!(study.trials.iter().all(|t| t.status == TrialStatus::Complete && t.epochs_run <= 1));

    let dir = tempfile::tempdir().unwrap();
    let locked = lock(&study, 1);
    let path = dir.path().join("locked.json");
    let sha = save_sealed(&path, &locked).unwrap();
    let (loaded, sha2): (LockedConfig, String) = load_sealed(&path).unwrap();
    assert_eq!((&loaded, &sha2), (&locked, &sha));

    let registry = dir.path().join("registry");
    let opts = |run_id: &str, force: bool| FinalizeOptions {
        run_id: run_id.into(),
        registry_dir: registry.clone(),
        out_dir: Some(dir.path().join(run_id)),
        force,
        pretrained: Pretrained::Random { seed: 1 },
    };
    let (report, _model) = finalize(&corpus, &loaded, &sha, &opts("final-1", false)).unwrap();
    assert_eq!(report.test_reads_before_selection, 0);
    assert_eq!(report.epochs.len(), 1);
    assert!(report.checkpoint.as_ref().unwrap().is_file());

    let again = finalize(&corpus, &loaded, &sha, &opts("final-2", false)).unwrap_err();
    assert!(matches!(again, HpoError::AlreadyFinalized { .. }), "{again}");
    let reused = finalize(&corpus, &loaded, &sha, &opts("final-1", true)).unwrap_err();
    assert!(matches!(reused, HpoError::DuplicateRunId(_)), "{reused}");
    finalize(&corpus, &loaded, &sha, &opts("final-2", true)).unwrap();
}

#[test]
fn edited_locked_document_is_rejected() {
    let mut opts = SearchOptions::new("seal", 1);
    opts.budget = 1;
    let (study, _) = search_with(&opts, None, &mut |_| {
        Ok(TrialResult {
            val_mae_best: 4.0,
            best_epoch: 1,
            epochs_run: 1,
            checkpoint: None,
        })
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("locked.json");
    save_sealed(&path, &lock(&study, 100)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let edited = text.replacen("\"final_epochs\": 100", "\"final_epochs\": 101", 1);
    assert_ne!(text, edited);
    std::fs::write(&path, edited).unwrap();
    assert!(load_sealed::<LockedConfig>(&path).is_err());
}

#[test]
fn failed_trials_are_never_selected_and_ties_go_to_the_earliest() {
    let mut opts = SearchOptions::new("ties", 4);
    opts.budget = 5;
    let (study, _) = search_with(&opts, None, &mut |ctx| match ctx.trial_id {
        0 => Err("diverged".into()),
        1 | 3 => Ok(TrialResult {
            val_mae_best: 6.0,
            best_epoch: 2,
            epochs_run: 3,
            checkpoint: None,
        }),
        _ => Ok(TrialResult {
            val_mae_best: 8.0,
            best_epoch: 1,
            epochs_run: 3,
            checkpoint: None,
        }),
    })
    .unwrap();
    assert_eq!(study.trials.len(), 5);
    assert_eq!(study.trials[0].status, TrialStatus::Failed);
    assert_eq!(study.trials[0].val_mae_best, None);
    assert!(study.trials[0].error.as_deref().unwrap().contains("diverged"));
    assert_eq!(study.best_trial, 1);
}
