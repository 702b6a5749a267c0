//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line to
//! the stderr handle directly, so it shows even when output is captured.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use mdmt_core::checkpoint::{self, Checkpoint};
use mdmt_core::datagen::{
    encode_dataset, generate_domain, normalize_with_train_stats, read_dataset, split_patientwise,
    write_dataset, DomainSpec, Split,
};
use mdmt_core::harness::{self, ExperimentConfig};
use mdmt_core::losses::{bce, detection_loss, dice_loss, voxel_ce, DetectionLossConfig};
use mdmt_core::metrics::{roc_auc, ScoredSet};
use mdmt_core::network::{init_params, ArchConfig, Group};
use mdmt_core::tensor::{Graph, Tensor};
use mdmt_core::trainer::{
    auc_on, mean_dice, propagate_labels, train, ClassSample, MapSample, Model, PropagationTargets,
    Strategy, TrainConfig,
};
use mdmt_core::Error;
use rand::Rng;

fn verdict(n: u32, title: &str, failures: &[String], detail: &str) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut line = format!("[acceptance] criterion {n} {title}: {status}");
    if !detail.is_empty() {
        line.push_str(&format!(" ({detail})"));
    }
    for f in failures {
        line.push_str(&format!("\n    - {f}"));
    }
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(failures.is_empty(), "criterion {n} failed:\n{}", failures.join("\n"));
}

fn check(failures: &mut Vec<String>, ok: bool, msg: impl FnOnce() -> String) {
    if !ok {
        failures.push(msg());
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, err) in common::op_grad_errors(10, 101) {
        worst = worst.max(err);
        check(&mut failures, err < 1e-4, || format!("{name}: max relative error {err:.3e}"));
    }
    for arch in [ArchConfig::desk_default(), ArchConfig { num_blocks: 1, ..ArchConfig::desk_default() }] {
        let params = init_params(&arch).unwrap();
        let err = common::composite_grad_error(&params, 30, 202);
        worst = worst.max(err);
        check(&mut failures, err < 1e-4, || format!("composite {} blocks: {err:.3e}", arch.num_blocks));
    }
    let elapsed = start.elapsed();
    check(&mut failures, elapsed < Duration::from_secs(120), || format!("took {}", secs(elapsed)));
    verdict(1, "gradient correctness", &failures, &format!("worst {worst:.2e}, {}", secs(elapsed)));
}

#[test]
fn criterion_2_loss_oracles() {
    let mut failures = Vec::new();
    let eval = |pred: Tensor, target: &Tensor, which: u8| {
        let mut g = Graph::new();
        let p = g.constant(pred);
        let l = match which {
            0 => bce(&mut g, p, target),
            1 => dice_loss(&mut g, p, target, 1.0),
            2 => voxel_ce(&mut g, p, target),
            _ => detection_loss(&mut g, p, target, &DetectionLossConfig::default()),
        }
        .unwrap();
        l.value(&g)
    };
    let b = eval(Tensor::scalar(0.5), &Tensor::scalar(1.0), 0);
    check(&mut failures, (b - std::f64::consts::LN_2).abs() <= 1e-9, || format!("bce(0.5,1) = {b}"));
    let shape = vec![1, 2, 2, 2];
    let ones = Tensor::new(shape.clone(), vec![1.0; 8]).unwrap();
    let zeros = Tensor::zeros(shape.clone());
    let perfect = eval(ones.clone(), &ones, 1);
    let empty = eval(zeros.clone(), &zeros, 1);
    check(&mut failures, perfect == 0.0, || format!("dice perfect = {perfect}"));
    check(&mut failures, empty == 0.0, || format!("dice empty = {empty}"));
    let miss = eval(ones.clone(), &zeros, 1);
    check(&mut failures, (miss - 8.0 / 9.0).abs() <= 1e-12, || format!("dice ones vs zeros = {miss}"));
    let mut r = common::rng(3);
    for case in 0..50 {
        let p = Tensor::new(shape.clone(), (0..8).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let s = Tensor::new(shape.clone(), (0..8).map(|_| f64::from(r.gen_bool(0.4))).collect()).unwrap();
        let sum = eval(p.clone(), &s, 2) + eval(p.clone(), &s, 1);
        let det = eval(p, &s, 3);
        check(&mut failures, sum.to_bits() == det.to_bits(), || format!("case {case}: {det} vs ce+dice {sum}"));
    }
    verdict(2, "loss oracles", &failures, "");
}

#[test]
fn criterion_3_auc_oracle() {
    let mut failures = Vec::new();
    let set = |s: &[f64], l: &[u8]| ScoredSet::new(s.to_vec(), l.to_vec()).unwrap();
    let hand = roc_auc(&set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap();
    check(&mut failures, hand == 0.75, || format!("hand case = {hand}"));
    let mut r = common::rng(4);
    let mut tied_instances = 0;
    for case in 0..100 {
        let n = r.gen_range(2..=200);
        let (s, l) = common::random_scored(n, case % 2 == 0, &mut r);
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            tied_instances += 1;
        }
        let fast = roc_auc(&set(&s, &l)).unwrap();
        let slow = common::pairwise_auc(&s, &l);
        check(&mut failures, fast == slow, || format!("instance {case} (n={n}): {fast} vs {slow}"));
    }
    check(&mut failures, tied_instances > 0, || "no instance had tied scores".into());
    verdict(3, "AUC oracle equivalence", &failures, &format!("{tied_instances}/100 instances with ties"));
}

#[test]
fn criterion_4_label_propagation_contract() {
    let mut failures = Vec::new();
    let cfg = ExperimentConfig::desk_default();
    let [d1, d2] = harness::build_datasets(&cfg).unwrap();
    let arch = &cfg.train.arch;
    let shape = arch.input_shape;
    let v1: Vec<Tensor> = d1.records_in(Split::Train).iter().map(|r| r.volume_tensor(shape)).collect();
    let v2: Vec<Tensor> = d2.records_in(Split::Train).iter().map(|r| r.volume_tensor(shape)).collect();
    let (d1_before, d2_before) = (encode_dataset(&d1), encode_dataset(&d2));
    let (c1, c2) = (v1.clone(), v2.clone());
    let params = init_params(arch).unwrap();
    let pool = propagate_labels(&params, &v1, &v2, PropagationTargets::BOTH, 0).unwrap();
    check(&mut failures, pool.classification.len() == v2.len(), || {
        format!("|D~(1)| = {} but |D(2) train| = {}", pool.classification.len(), v2.len())
    });
    check(&mut failures, pool.detection.len() == v1.len(), || {
        format!("|D~(2)| = {} but |D(1) train| = {}", pool.detection.len(), v1.len())
    });
    let inside = |p: f64| p > 0.0 && p < 1.0;
    check(&mut failures, pool.classification.iter().all(|s| inside(s.target)), || "class target outside (0,1)".into());
    check(&mut failures, pool.detection.iter().all(|s| s.target.data().iter().all(|&p| inside(p))), || {
        "map voxel outside (0,1)".into()
    });
    check(&mut failures, v1 == c1 && v2 == c2, || "input volumes mutated".into());
    check(
        &mut failures,
        encode_dataset(&d1) == d1_before && encode_dataset(&d2) == d2_before,
        || "datasets mutated".into(),
    );

    // λ = 0 against the supervised multi-task run, on a short schedule
    let short = |strategy, lambda| TrainConfig {
        epochs: 6,
        warmup_epochs: 2,
        pseudo_weight: lambda,
        ..cfg.train.for_run(strategy, 3)
    };
    let sup = train(&short(Strategy::SupervisedMdmt, 1.0), &d1, Some(&d2)).unwrap();
    let semi = train(&short(Strategy::SemiSupervisedMdmt, 0.0), &d1, Some(&d2)).unwrap();
    let same_params = Group::ALL.iter().all(|&g| sup.final_params.group(g) == semi.final_params.group(g));
    let same_history = sup.history.iter().zip(&semi.history).all(|(a, b)| {
        a.classification_loss.to_bits() == b.classification_loss.to_bits()
            && a.detection_loss.map(f64::to_bits) == b.detection_loss.map(f64::to_bits)
            && a.val_auc.to_bits() == b.val_auc.to_bits()
            && a.val_dice.map(f64::to_bits) == b.val_dice.map(f64::to_bits)
    });
    check(&mut failures, same_params && same_history, || "λ=0 trajectory diverged from SupervisedMDMT".into());
    check(&mut failures, semi.history.iter().any(|r| r.pool_epoch.is_some()), || "λ=0 run never propagated".into());
    verdict(4, "label-propagation contract", &failures, &format!("{} + {} pseudo pairs", v2.len(), v1.len()));
}

#[test]
fn criterion_5_overfit_sanity() {
    let mut failures = Vec::new();
    let arch = ArchConfig::desk_default();
    let shape = arch.input_shape;
    let cfg = TrainConfig {
        strategy: Strategy::SupervisedBaseline,
        arch: arch.clone(),
        ..TrainConfig::default()
    };

    // classification: 8 domain-1 scans, both classes
    let start = Instant::now();
    let spec = DomainSpec {
        n_patients: 8,
        positive_fraction: 0.5,
        ..DomainSpec::desk_domain1()
    };
    let d1 = normalize_with_train_stats(&split_patientwise(&generate_domain(&spec).unwrap(), [0.5, 0.25, 0.25], 1).unwrap()).unwrap();
    let all: Vec<_> = d1.records.iter().collect();
    let samples: Vec<ClassSample> = all
        .iter()
        .map(|r| ClassSample {
            volume: r.volume_tensor(shape),
            target: f64::from(r.label.unwrap()),
        })
        .collect();
    let mut model = Model::new(&arch).unwrap();
    let mut reached = None;
    for epoch in 0..200 {
        model.epoch_classification(&samples, &[], &cfg, epoch).unwrap();
        if auc_on(&model.params, &all).unwrap() == 1.0 {
            reached = Some(epoch + 1);
            break;
        }
    }
    let cls_time = start.elapsed();
    check(&mut failures, reached.is_some(), || "train AUC never reached 1.0 in 200 epochs".into());
    check(&mut failures, cls_time < Duration::from_secs(300), || format!("classification took {}", secs(cls_time)));

    // detection: domain-2 training split
    let start = Instant::now();
    let d2_spec = DomainSpec::desk_domain2();
    let d2 = normalize_with_train_stats(&split_patientwise(&generate_domain(&d2_spec).unwrap(), [0.7, 0.15, 0.15], 2).unwrap()).unwrap();
    let train_recs = d2.records_in(Split::Train);
    let maps: Vec<MapSample> = train_recs
        .iter()
        .map(|r| MapSample {
            volume: r.volume_tensor(shape),
            target: r.mask_tensor(shape).unwrap(),
        })
        .collect();
    let mut model = Model::new(&arch).unwrap();
    let mut dice = 0.0;
    let mut dice_epoch = None;
    for epoch in 0..100 {
        model.epoch_detection(&maps, &[], &cfg, epoch).unwrap();
        if epoch % 5 == 4 || epoch == 99 {
            dice = mean_dice(&model.params, &train_recs, cfg.zeta).unwrap();
            if dice > 0.5 {
                dice_epoch = Some(epoch + 1);
                break;
            }
        }
    }
    let det_time = start.elapsed();
    check(&mut failures, dice_epoch.is_some(), || format!("train Dice {dice:.3} after 100 epochs"));
    check(&mut failures, det_time < Duration::from_secs(300), || format!("detection took {}", secs(det_time)));
    verdict(
        5,
        "overfit sanity",
        &failures,
        &format!(
            "AUC 1.0 at epoch {:?} in {}, Dice {dice:.3} at epoch {:?} on {} scans in {}",
            reached,
            secs(cls_time),
            dice_epoch,
            maps.len(),
            secs(det_time)
        ),
    );
}

#[test]
fn criterion_6_table_one_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk_default();
    cfg.output_dir = dir.path().to_path_buf();
    let start = Instant::now();
    let report = harness::cmd_compare_with_progress(&cfg, |row, _| {
        let _ = writeln!(
            std::io::stderr(),
            "[acceptance]   {} seed {}: test AUC {}",
            row.strategy,
            row.seed,
            row.test_auc.map_or("failed".into(), |a| format!("{a:.4}"))
        );
    })
    .unwrap();
    let elapsed = start.elapsed();
    let _ = write!(std::io::stderr(), "{}", harness::render_table(&report));
    let mean = |s: Strategy| {
        report
            .summaries
            .iter()
            .find(|x| x.strategy == s)
            .and_then(|x| x.mean_test_auc)
            .unwrap_or(f64::NAN)
    };
    let full = mean(Strategy::SemiSupervisedMdmt);
    let base = mean(Strategy::SupervisedBaseline);
    let semi = mean(Strategy::SemiSupervised);
    let mdmt = mean(Strategy::SupervisedMdmt);
    let mut failures = Vec::new();
    check(&mut failures, report.rows.len() == 20 && report.rows.iter().all(|r| r.ok), || "missing or failed runs".into());
    check(&mut failures, full - base >= 0.03, || format!("SemiSupMDMT {full:.4} - Baseline {base:.4} = {:.4} < 0.03", full - base));
    check(&mut failures, full >= semi - 0.01, || format!("SemiSupMDMT {full:.4} < SemiSup {semi:.4} - 0.01"));
    check(&mut failures, full >= mdmt - 0.01, || format!("SemiSupMDMT {full:.4} < SupMDMT {mdmt:.4} - 0.01"));
    check(&mut failures, elapsed < Duration::from_secs(1800), || format!("took {}", secs(elapsed)));
    verdict(
        6,
        "Table-1-analogue ordering",
        &failures,
        &format!("baseline {base:.4}, semi {semi:.4}, sup-mdmt {mdmt:.4}, semi-mdmt {full:.4}, {}", secs(elapsed)),
    );
}

#[test]
fn criterion_7_determinism() {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk_default();
    cfg.train.epochs = 4;
    cfg.train.warmup_epochs = 1;
    let gen = |out: &std::path::Path| {
        let mut c = cfg.clone();
        c.output_dir = out.to_path_buf();
        harness::cmd_generate(&c).unwrap();
        c
    };
    let a = gen(&dir.path().join("a"));
    let b = gen(&dir.path().join("b"));
    for d in [1, 2] {
        let same = std::fs::read(a.dataset_path(d)).unwrap() == std::fs::read(b.dataset_path(d)).unwrap()
            && std::fs::read(a.manifest_path(d)).unwrap() == std::fs::read(b.manifest_path(d)).unwrap();
        check(&mut failures, same, || format!("domain {d} files differ between generations"));
    }
    for strategy in Strategy::ALL {
        let log = |c: &ExperimentConfig| {
            harness::cmd_train(c, strategy, 2).unwrap();
            std::fs::read(c.run_dir(strategy, 2).join("metrics.jsonl")).unwrap()
        };
        let first = log(&a);
        let again = log(&a);
        let other_dir = log(&b);
        check(&mut failures, first == again && first == other_dir, || format!("{strategy}: metrics log differs"));
    }
    verdict(7, "determinism", &failures, "4 strategies, repeated train + fresh output dir");
}

#[test]
fn criterion_8_persistence() {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::desk_default();
    let [d1, d2] = harness::build_datasets(&cfg).unwrap();
    for ds in [&d1, &d2] {
        let path = dir.path().join(format!("d{}.mdmt", ds.domain_id()));
        write_dataset(ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        let exact = back.spec == ds.spec
            && back.splits == ds.splits
            && back.stats == ds.stats
            && back.records.iter().zip(&ds.records).all(|(x, y)| {
                x.label == y.label
                    && x.mask == y.mask
                    && x.volume.iter().zip(&y.volume).all(|(p, q)| p.to_bits() == q.to_bits())
            })
            && encode_dataset(&back) == std::fs::read(&path).unwrap();
        check(&mut failures, exact, || format!("domain {} dataset round trip", ds.domain_id()));
    }
    let ckpt = Checkpoint {
        params: init_params(&cfg.train.arch).unwrap(),
        epoch: 12,
        val_auc: 0.734375,
        config_hash: cfg.hash(),
    };
    let path = dir.path().join("c.mdmt");
    checkpoint::write(&path, &ckpt).unwrap();
    let back = checkpoint::read(&path).unwrap();
    let exact = back.epoch == ckpt.epoch
        && back.val_auc.to_bits() == ckpt.val_auc.to_bits()
        && Group::ALL.iter().all(|&g| {
            back.params.group(g).tensors.iter().zip(&ckpt.params.group(g).tensors).all(|(x, y)| {
                x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
        });
    check(&mut failures, exact, || "checkpoint round trip".into());

    // every single-byte header edit, three flip patterns each
    let bytes = std::fs::read(&path).unwrap();
    let header = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
    let probe = dir.path().join("probe.mdmt");
    let mut edits = 0;
    for mask in [0x01u8, 0x10, 0xff] {
        for i in 0..header {
            let mut b = bytes.clone();
            b[i] ^= mask;
            std::fs::write(&probe, &b).unwrap();
            edits += 1;
            match checkpoint::read(&probe) {
                Err(Error::Format { .. }) => {}
                Err(e) => failures.push(format!("byte {i}: wrong error kind {e}")),
                Ok(_) => failures.push(format!("byte {i} ^ {mask:#x}: corrupted header accepted")),
            }
        }
    }
    for cut in [header - 1, header + 7, bytes.len() - 1] {
        std::fs::write(&probe, &bytes[..cut]).unwrap();
        check(&mut failures, matches!(checkpoint::read(&probe), Err(Error::Format { .. })), || format!("truncation at {cut} not detected"));
    }
    verdict(8, "persistence", &failures, &format!("{edits} header edits rejected"));
}
