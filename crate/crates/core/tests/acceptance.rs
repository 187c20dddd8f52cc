//! Acceptance criteria, one test per criterion. Each prints a single
//! `ACCEPTANCE <n> PASS|FAIL ...` line before asserting, so
//! `cargo test --test acceptance -- --nocapture --include-ignored` gives the
//! full ledger.

mod common;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use agenet::bench::{self, BenchConfig, BenchError, BenchTarget, Clock};
use agenet::dataset::{age_bin, split_counts, stratified_split, Ratios, Split, MIN_STRATIFIED_BIN};
use agenet::model::HEAD_DIMS;
use agenet::nn::{Module, SlotRef};
use agenet::parity::{self, convert, trace, DeployRuntime, ParityOptions, PortableRuntime};
use agenet::training::{self, bounded_smooth_l1, clip_gradients, cosine_lr, LossConfig, RunOptions, TrainSpec};
use agenet::{AgeModel, Mode, ModelSpec, Pipeline, Pretrained, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: &str) {
    println!("ACCEPTANCE {n} {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

const BOUNDARY_AGES: [f64; 4] = [0.0, 1.0, 95.0, 116.0];

// ---------------------------------------------------------------- 1

fn huber_oracle(pred: f64, target: f64) -> f64 {
    let t = if target < 1.0 {
        1.0
    } else if target > 95.0 {
        95.0
    } else {
        target
    };
    let d = (pred - t).abs();
    if d < 1.0 {
        d * d / 2.0
    } else {
        d - 0.5
    }
}

fn cosine_oracle(t: usize, total: usize, hi: f64, lo: f64) -> f64 {
    let frac = t as f64 / total as f64;
    let w = (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
    w * hi + (1.0 - w) * lo
}

#[test]
fn criterion_1_loss_schedule_clip_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = LossConfig::default();
    let (mut loss_cases, mut worst_loss) = (0usize, 0.0f64);
    for round in 0..200 {
        let n = rng.random_range(1..12);
        let mut pred = Vec::with_capacity(n);
        let mut target = Vec::with_capacity(n);
        for i in 0..n {
            let boundary = BOUNDARY_AGES[(round + i) % 4];
            target.push(if i % 2 == 0 { boundary } else { rng.random_range(0.0..116.0) });
            pred.push(match i % 3 {
                0 => boundary,
                1 => target[i] + rng.random_range(-1.5..1.5),
                _ => rng.random_range(0.0..116.0),
            });
        }
        let out = bounded_smooth_l1(&pred, &target, &cfg).unwrap();
        let oracle: Vec<f64> = pred.iter().zip(&target).map(|(&p, &t)| huber_oracle(p, t)).collect();
        for (a, b) in out.per_sample.iter().zip(&oracle) {
            worst_loss = worst_loss.max((a - b).abs());
        }
        let mean = oracle.iter().sum::<f64>() / n as f64;
        worst_loss = worst_loss.max((out.value - mean).abs());
        loss_cases += n;
    }

    let (mut sched_cases, mut worst_sched) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let total = rng.random_range(1..5000);
        let t = match rng.random_range(0..4) {
            0 => 0,
            1 => total,
            _ => rng.random_range(0..=total),
        };
        let hi = 10f64.powf(rng.random_range(-5.0..-1.0));
        let lo = hi * rng.random_range(0.0..1.0);
        let got = cosine_lr(t, total, hi, lo).unwrap();
        worst_sched = worst_sched.max((got - cosine_oracle(t, total, hi, lo)).abs());
        sched_cases += 1;
    }

    let (mut clip_cases, mut worst_clip) = (0usize, 0.0f64);
    for case in 0..1000 {
        let groups = rng.random_range(1..4);
        let mut grads: Vec<Vec<f32>> = (0..groups)
            .map(|_| {
                (0..rng.random_range(1..20))
                    .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(-3.0f32..3.0) })
                    .collect()
            })
            .collect();
        let norm: f64 = grads.iter().flatten().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let clip = match case % 4 {
            0 => norm,
            1 => norm * 0.5 + 1e-3,
            2 => 2.0,
            _ => rng.random_range(0.1..10.0),
        };
        let scale = if norm > clip { clip / norm } else { 1.0 };
        let expected: Vec<Vec<f64>> = grads
            .iter()
            .map(|g| g.iter().map(|&v| v as f64 * scale).collect())
            .collect();
        let mut views: Vec<&mut [f32]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
        let got_norm = clip_gradients(&mut views, clip).unwrap();
        worst_clip = worst_clip.max((got_norm - norm).abs());
        for (g, e) in grads.iter().zip(&expected) {
            for (&a, &b) in g.iter().zip(e) {
                worst_clip = worst_clip.max((a as f64 - b).abs());
            }
        }
        clip_cases += 1;
    }

    let pass = loss_cases >= 1000
        && sched_cases >= 1000
        && clip_cases >= 1000
        && worst_loss <= 1e-6
        && worst_sched <= 1e-6
        && worst_clip <= 1e-6;
    verdict(
        1,
        pass,
        &format!(
            "loss {loss_cases} cases max err {worst_loss:.2e}; cosine {sched_cases} cases max err {worst_sched:.2e}; \
             clip {clip_cases} cases max err {worst_clip:.2e} (tol 1e-6)"
        ),
    );
}

// ---------------------------------------------------------------- 2

fn skewed_ages(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.55 {
                rng.random_range(20.0..35.0)
            } else if u < 0.75 {
                rng.random_range(0.0..6.0)
            } else {
                // long sparse tail, a few ages reaching the top bins
                (35.0 + rng.random::<f64>().powi(3) * 81.0).min(116.0)
            }
        })
        .map(|a: f64| (a * 10.0).round() / 10.0)
        .collect()
}

#[test]
fn criterion_2_split_properties() {
    let ages = skewed_ages(10_000, 2);
    let samples = common::synthetic_samples(&ages);
    let ratios = Ratios::default();
    let m = stratified_split(&samples, ratios, 17).unwrap();

    let mut by_bin: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &samples {
        *by_bin.entry(age_bin(s.age)).or_default() += 1;
    }
    let mut worst_dev = 0.0f64;
    let mut stratified_bins = 0;
    for (&bin, &n) in &by_bin {
        let c = &m.bin_counts[&bin];
        if n < MIN_STRATIFIED_BIN {
            assert_eq!((c.train, c.val, c.test), (n, 0, 0), "degenerate bin {bin}");
            continue;
        }
        stratified_bins += 1;
        assert_eq!(*c, split_counts(n, &ratios));
        for s in Split::ALL {
            worst_dev = worst_dev.max((c.get(s) as f64 - ratios.get(s) * n as f64).abs());
        }
        // the recorded counts are the actual assignment counts
        for s in Split::ALL {
            let actual = m
                .assignment
                .iter()
                .filter(|(id, &sp)| sp == s && m.bins[*id] == bin)
                .count();
            assert_eq!(actual, c.get(s));
        }
    }

    let ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let assigned: BTreeSet<&str> = m.assignment.keys().map(String::as_str).collect();
    let per_split: usize = Split::ALL.iter().map(|&s| m.ids(s).len()).sum();
    let partition = ids == assigned && per_split == samples.len();

    let again = stratified_split(&samples, ratios, 17).unwrap();
    let deterministic = m.to_canonical_json() == again.to_canonical_json();
    let other = stratified_split(&samples, ratios, 18).unwrap();
    let seed_matters = other.assignment != m.assignment;

    verdict(
        2,
        worst_dev <= 1.0 && partition && deterministic && seed_matters,
        &format!(
            "10000 samples, {} bins ({stratified_bins} stratified); max per-bin deviation {worst_dev:.3} (bound 1); \
             partition {partition}; byte-identical rerun {deterministic}; seed changes assignment {seed_matters}",
            by_bin.len()
        ),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_bounded_output() {
    let spec = ModelSpec {
        input_size: 32,
        ..ModelSpec::default()
    };
    let mut model = AgeModel::build(spec, &Pretrained::Random { seed: 3 }, 3).unwrap();
    model.set_mode(Mode::Eval);
    let map = model.bounded_map();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let (mut lo, mut hi, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0usize);
    let mut track = |ages: &[f64]| {
        for &a in ages {
            lo = lo.min(a);
            hi = hi.max(a);
            count += 1;
        }
    };
    // whole-model: images scaled so every activation is driven far out
    for _ in 0..20 {
        let scale = if rng.random_bool(0.5) { 1e3 } else { -1e3 };
        let data: Vec<f32> = (0..50 * 3 * 32 * 32).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        let x = Tensor::from_vec(&[50, 3, 32, 32], data).unwrap();
        track(&model.forward(&x, None).unwrap());
    }
    // the output map itself over raw logits up to ±1e3
    let zs: Vec<f64> = (0..1000)
        .map(|i| match i {
            0 => 1e3,
            1 => -1e3,
            _ => rng.random_range(-1e3..1e3),
        })
        .collect();
    track(&zs.iter().map(|&z| map.apply(z)).collect::<Vec<_>>());
    let bounded = lo > 0.0 && hi < 116.0;

    let mut worst_rel = 0.0f64;
    let mut fd_points: Vec<f64> = vec![-3.0, 0.0, 3.0];
    fd_points.extend((0..1000).map(|_| rng.random_range(-12.0..12.0)));
    for &z in &fd_points {
        let h = 1e-5;
        let fd = (map.apply(z + h) - map.apply(z - h)) / (2.0 * h);
        let an = map.derivative(z);
        worst_rel = worst_rel.max((an - fd).abs() / fd.abs().max(1e-12));
    }
    verdict(
        3,
        count >= 1000 && bounded && worst_rel <= 1e-4,
        &format!(
            "{count} outputs, min {lo:.3e}, max 116 - {:.3e} (open bound (0, 116)); d(age)/dz vs central differences at {} points, \
             max rel err {worst_rel:.2e} (tol 1e-4)",
            116.0 - hi,
            fd_points.len()
        ),
    );
}

// ---------------------------------------------------------------- 4

fn backbone_params(model: &AgeModel) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    model.backbone.visit("features", &mut |name, slot| {
        if let SlotRef::Param(p) = slot {
            out.push((name.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect()));
        }
    });
    out
}

#[test]
#[ignore = "about 11 minutes on one CPU core; run with --include-ignored"]
fn criterion_4_overfit_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train_ages: Vec<f64> = (0..64).map(|_| rng.random_range(5.0..80.0f64).round()).collect();
    let val_ages = common::spread_ages(8, 10.0, 70.0);
    let corpus = common::fixed_corpus(&train_ages, &val_ages, 4);
    let spec = TrainSpec {
        lr: 3e-3,
        batch_size: 64,
        epochs: 50,
        freeze_epochs: 5,
        backbone_lr_mult: 0.1,
        transform: Pipeline::Norm256,
        seed: 4,
        deterministic_val: false,
        ..TrainSpec::default()
    };
    let model_spec = ModelSpec {
        dropout: 0.0,
        input_size: 224,
        ..ModelSpec::default()
    };
    let mut model = AgeModel::build(model_spec, &Pretrained::Random { seed: 4 }, 4).unwrap();
    let initial = backbone_params(&model);
    let mut frozen_identical = true;
    let mut observer = |m: &AgeModel, r: &training::EpochRecord| {
        if r.epoch <= 5 && backbone_params(m) != initial {
            frozen_identical = false;
        }
        eprintln!("epoch {:>2} train_mae {:.3} val_mae {:.3}", r.epoch, r.train_mae, r.val_mae);
    };
    let out = training::run_observed(&mut model, &corpus, &spec, &RunOptions::default(), &mut observer).unwrap();
    let last = out.records.last().unwrap();
    let moved_after = out.records.len() > 5;
    verdict(
        4,
        last.train_mae < 1.5 && frozen_identical && moved_after,
        &format!(
            "64 samples, 50 epochs, no augmentation: final train MAE {:.3} (bound 1.5); backbone bit-identical \
             through epoch 5: {frozen_identical}",
            last.train_mae
        ),
    );
}

// ---------------------------------------------------------------- 5

#[test]
#[ignore = "needs the full face dataset, pretrained backbone weights and accelerator-scale compute"]
fn criterion_5_full_reproduction() {
    let root = std::env::var_os("AGENET_UTKFACE_ROOT");
    let weights = std::env::var_os("AGENET_PRETRAINED");
    let (Some(root), Some(weights)) = (root, weights) else {
        println!(
            "ACCEPTANCE 5 NOT RUN set AGENET_UTKFACE_ROOT and AGENET_PRETRAINED to run the locked configuration \
             (target held-out MAE <= 5.0; flip ablation >= 0.3 better than norm_256)"
        );
        return;
    };
    let records = agenet::dataset::records_from_dir(std::path::Path::new(&root)).unwrap();
    let (samples, _) = agenet::dataset::curate(records, agenet::dataset::probe_image_file).unwrap();
    let manifest = stratified_split(&samples, Ratios::default(), 42).unwrap();
    let corpus = agenet::Corpus::new(samples, manifest, Box::new(agenet::dataset::FsImageSource)).unwrap();
    let pretrained = Pretrained::File(weights.into());
    let run = |transform: Pipeline, epochs: usize| {
        let spec = TrainSpec {
            lr: 0.0014162,
            batch_size: 64,
            epochs,
            backbone_lr_mult: 0.10,
            transform,
            ..TrainSpec::default()
        };
        let mut model = AgeModel::build(ModelSpec::with_dropout(0.18074), &pretrained, 42).unwrap();
        training::run(&mut model, &corpus, &spec, &RunOptions::default()).unwrap();
        agenet::evaluation::evaluate(&mut model, &corpus, Split::Test, &agenet::TransformSpec::eval(224), 64)
            .unwrap()
            .mae
    };
    let locked = run(Pipeline::ResizeColorjitFlipBlur, 100);
    let plain = run(Pipeline::Norm256, 60);
    let flip = run(Pipeline::Norm256Flip, 60);
    verdict(
        5,
        locked <= 5.0 && plain - flip >= 0.3,
        &format!("locked held-out MAE {locked:.3} (bound 5.0); norm_256 {plain:.3} vs norm_256_flip {flip:.3}"),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_parity() {
    let train_ages = common::spread_ages(32, 5.0, 90.0);
    let val_ages: Vec<f64> = (0..100).map(|i| 3.0 + (i as f64 * 7.3) % 100.0).collect();
    let corpus = common::fixed_corpus(&train_ages, &val_ages, 6);
    let spec = TrainSpec {
        epochs: 1,
        freeze_epochs: 0,
        batch_size: 16,
        lr: 1e-3,
        transform: Pipeline::Norm256,
        deterministic_val: false,
        seed: 6,
        ..TrainSpec::default()
    };
    let mut model = AgeModel::build(ModelSpec::default(), &Pretrained::Random { seed: 6 }, 6).unwrap();
    let outcome = training::run(&mut model, &corpus, &spec, &RunOptions::default()).unwrap();
    model.set_mode(Mode::Eval);

    let portable_graph = trace(&model);
    let deploy_graph = convert(&portable_graph).unwrap();
    // round-trip both through their serialized forms, as an export would
    let portable_graph = parity::PortableGraph::from_bytes(&portable_graph.to_bytes()).unwrap();
    let deploy_graph = parity::DeployGraph::from_bytes(&deploy_graph.to_bytes()).unwrap();
    let mut a = PortableRuntime::new(&portable_graph).unwrap();
    let mut b = DeployRuntime::new(deploy_graph);
    let opts = ParityOptions {
        best_train_val_mae: parity::best_val_mae(&outcome.records),
        limit: Some(100),
        ..ParityOptions::default()
    };
    let r = parity::run_parity(&mut a, &mut b, &corpus, Split::Val, &opts).unwrap();

    let mut same = PortableRuntime::new(&portable_graph).unwrap();
    let mut same2 = PortableRuntime::new(&portable_graph).unwrap();
    let id = parity::run_parity(&mut same, &mut same2, &corpus, Split::Val, &opts).unwrap();

    let jensen = r.delta_conv <= r.mean_abs_output_gap;
    let identity = id.delta_conv == 0.0 && id.max_abs_output_gap == 0.0;
    let all_within = r.samples.iter().all(|s| s.gap() <= 0.05);
    verdict(
        6,
        r.n == 100 && r.delta_conv <= 1e-3 && all_within && jensen && identity && r.delta_val.is_some(),
        &format!(
            "n {}; MAE {:.6} vs {:.6}; delta_conv {:.2e} (tol 1e-3); max per-sample gap {:.2e} (tol 0.05); \
             delta_conv <= mean gap {:.2e}: {jensen}; identity pair zero: {identity}; delta_val {:.4} (reported)",
            r.n,
            r.mae_stage_a,
            r.mae_stage_b,
            r.delta_conv,
            r.max_abs_output_gap,
            r.mean_abs_output_gap,
            r.delta_val.unwrap_or(f64::NAN)
        ),
    );
}

// ---------------------------------------------------------------- 7

fn divisible(v: f64, d: usize) -> usize {
    let mut n = ((v + d as f64 / 2.0) as usize / d * d).max(d);
    if (n as f64) < 0.9 * v {
        n += d;
    }
    n
}

/// Hand count of the backbone from the published block table.
fn backbone_oracle(side: usize) -> (u64, u64) {
    // (in, kernel, expanded, out, squeeze-excite, stride)
    const BLOCKS: [(usize, usize, usize, usize, bool, usize); 15] = [
        (16, 3, 16, 16, false, 1),
        (16, 3, 64, 24, false, 2),
        (24, 3, 72, 24, false, 1),
        (24, 5, 72, 40, true, 2),
        (40, 5, 120, 40, true, 1),
        (40, 5, 120, 40, true, 1),
        (40, 3, 240, 80, false, 2),
        (80, 3, 200, 80, false, 1),
        (80, 3, 184, 80, false, 1),
        (80, 3, 184, 80, false, 1),
        (80, 3, 480, 112, true, 1),
        (112, 3, 672, 112, true, 1),
        (112, 5, 672, 160, true, 2),
        (160, 5, 960, 160, true, 1),
        (160, 5, 960, 160, true, 1),
    ];
    let (mut params, mut macs) = (0u64, 0u64);
    let mut hw = side;
    let mut conv = |cin: usize, cout: usize, k: usize, groups: usize, hw_out: usize| {
        params += (cout * cin / groups * k * k + 2 * cout) as u64;
        macs += (hw_out * hw_out * cout * cin / groups * k * k) as u64;
    };
    hw = hw.div_ceil(2);
    conv(3, 16, 3, 1, hw);
    let mut se_params = 0u64;
    let mut se_macs = 0u64;
    for (cin, k, exp, cout, se, stride) in BLOCKS {
        if exp != cin {
            conv(cin, exp, 1, 1, hw);
        }
        hw = hw.div_ceil(stride);
        conv(exp, exp, k, exp, hw);
        if se {
            let sq = divisible(exp as f64 / 4.0, 8);
            se_params += (exp * sq + sq + sq * exp + exp) as u64;
            se_macs += (2 * exp * sq) as u64;
        }
        conv(exp, cout, 1, 1, hw);
    }
    conv(160, 960, 1, 1, hw);
    (params + se_params, macs + se_macs)
}

#[test]
fn criterion_7_accounting() {
    let model = AgeModel::build(ModelSpec::default(), &Pretrained::Random { seed: 7 }, 7).unwrap();
    let acc = model.accounting();
    let [d0, d1, d2, d3] = HEAD_DIMS;
    let head_params = (d0 * d1 + d1 + d1 * d2 + d2 + d2 * d3 + d3) as u64;
    let head_macs = (d0 * d1 + d1 * d2 + d2 * d3) as u64;
    let (bb_params, bb_macs) = backbone_oracle(224);
    let p_rel = acc.params as f64 / 3.23e6 - 1.0;
    let m_rel = acc.mult_adds as f64 / 0.233e9 - 1.0;
    let head_exact = acc.head_params == head_params && acc.head_mult_adds == head_macs;
    let backbone_exact = acc.backbone_params == bb_params && acc.backbone_mult_adds == bb_macs;
    verdict(
        7,
        p_rel.abs() <= 0.02 && m_rel.abs() <= 0.10 && head_exact && backbone_exact,
        &format!(
            "params {} ({:+.2}% vs 3.23M, tol 2%); mult-adds {} ({:+.2}% vs 0.233G, tol 10%); head {} params / {} \
             mult-adds exact: {head_exact}; backbone matches block-table count: {backbone_exact}",
            acc.params,
            100.0 * p_rel,
            acc.mult_adds,
            100.0 * m_rel,
            acc.head_params,
            acc.head_mult_adds
        ),
    );
}

// ---------------------------------------------------------------- 8

/// Virtual time shared between the stub backend and the clock.
#[derive(Clone, Default)]
struct VirtualTime(Rc<Cell<u64>>);

impl Clock for VirtualTime {
    fn now_us(&mut self) -> Result<u64, BenchError> {
        Ok(self.0.get())
    }
}

/// Sleeps a scripted number of microseconds per call, in virtual time.
struct SleepStub {
    time: VirtualTime,
    load_us: u64,
    sleeps_us: Vec<u64>,
    calls: usize,
}

impl BenchTarget for SleepStub {
    fn name(&self) -> String {
        "sleep-stub".into()
    }

    fn load(&mut self) -> Result<(), BenchError> {
        self.time.0.set(self.time.0.get() + self.load_us);
        Ok(())
    }

    fn infer(&mut self, _: &Tensor) -> Result<(), BenchError> {
        let d = self.sleeps_us[self.calls % self.sleeps_us.len()];
        self.calls += 1;
        self.time.0.set(self.time.0.get() + d);
        Ok(())
    }
}

fn stub_report(sleeps_us: Vec<u64>, warmup: usize) -> bench::BenchReport {
    let runs = sleeps_us.len() - warmup;
    let time = VirtualTime::default();
    let mut stub = SleepStub {
        time: time.clone(),
        load_us: 1234,
        sleeps_us,
        calls: 0,
    };
    let input = Tensor::zeros(&[1, 3, 8, 8]);
    bench::benchmark(&mut stub, &mut time.clone(), &input, BenchConfig { runs, warmup }).unwrap()
}

/// A real sleeping backend timed by the monotonic clock.
struct RealSleep(std::time::Duration);

impl BenchTarget for RealSleep {
    fn name(&self) -> String {
        "real-sleep".into()
    }
    fn load(&mut self) -> Result<(), BenchError> {
        Ok(())
    }
    fn infer(&mut self, _: &Tensor) -> Result<(), BenchError> {
        std::thread::sleep(self.0);
        Ok(())
    }
}

#[test]
fn criterion_8_benchmark_harness() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut warmup_excluded = true;
    for _ in 0..50 {
        let warmup = rng.random_range(0..4);
        let runs = rng.random_range(1..40);
        let sleeps: Vec<u64> = (0..warmup + runs).map(|_| rng.random_range(500..40_000)).collect();
        let measured: Vec<f64> = sleeps[warmup..].iter().map(|&us| us as f64 / 1000.0).collect();
        let mean = measured.iter().sum::<f64>() / runs as f64;
        let var = measured.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / runs as f64;
        let r = stub_report(sleeps, warmup);
        worst = worst.max((r.avg_ms - mean).abs()).max((r.std_ms - var.sqrt()).abs());
        warmup_excluded &= r.per_run_ms == measured && (r.init_ms - 1.234).abs() < 1e-12;
    }

    let at = |ms_us: u64| bench::report_budget(&stub_report(vec![ms_us; 5], 0), bench::DEFAULT_BUDGET_MS);
    let exact = at(30_000);
    let over = at(30_001);
    let under = at(14_400);
    let boundary = exact.pass && exact.margin_ms == 0.0 && !over.pass && under.pass && (under.margin_ms - 15.6).abs() < 1e-9;

    let real = bench::benchmark(
        &mut RealSleep(std::time::Duration::from_millis(10)),
        &mut bench::MonotonicClock::new(),
        &Tensor::zeros(&[1, 3, 8, 8]),
        BenchConfig { runs: 5, warmup: 1 },
    )
    .unwrap();
    let real_ok = real.avg_ms >= 10.0 && real.avg_ms <= 13.0;

    verdict(
        8,
        worst <= 1e-9 && warmup_excluded && boundary && real_ok,
        &format!(
            "50 scripted stubs: max avg/std err {worst:.2e} (tol 1e-9); warmup excluded {warmup_excluded}; budget 30 ms: \
             30.000 pass {}, 30.001 pass {}, 14.4 margin {:.3}; real 10 ms sleep avg {:.3} ms",
            exact.pass, over.pass, under.margin_ms, real.avg_ms
        ),
    );
}
