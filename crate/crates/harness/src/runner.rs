//! A single seeded training run.
//!
//! Streams derived from the run seed:
//!
//! | site | stream |
//! |------|--------|
//! | dataset | the seed itself (see `latentdr::datagen`) |
//! | parameter init | `model/init/*` |
//! | degrader/restorer noise, subsets, dropout | `augment/*` |
//! | epoch `e`, domain `d` shuffle | `shuffle/epoch[e]/domain[d]/order` |
//! | evaluation-mode degradation | `eval/*` |

use std::path::Path;
use std::time::Instant;

use latentdr::datagen::{
    generate_longtail, generate_longtail_test, generate_multidomain, leave_one_domain_out_split, stratified_split,
    ClassGroup, Split,
};
use latentdr::latentdr::{dump, training_step, AblationVariant, AugmentRngs};
use latentdr::metrics::{accuracy, accuracy_suite, alignment, uniformity};
use latentdr::model::ModelBundle;
use latentdr::{RngStreams, Tensor};
use rand::seq::SliceRandom;

use crate::config::{ExperimentConfig, Task};
use crate::error::{HarnessError, Result};
use crate::report::{EpochRow, FinalMetrics, GroupAccuracy, RunReport};

/// Train/val/test splits plus the per-domain grouping used for batching.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Positions into `train`, one list per training domain.
    pub train_by_domain: Vec<Vec<usize>>,
    pub classes: usize,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    match cfg.task {
        Task::Dg => {
            let ds = generate_multidomain(&cfg.multidomain_config(), cfg.seed)?;
            let splits = leave_one_domain_out_split(&ds, cfg.held_out, cfg.train_fraction, cfg.seed)?;
            let train_by_domain = (0..cfg.domains)
                .filter(|&d| d != cfg.held_out)
                .map(|d| (0..splits.train.len()).filter(|&i| splits.train.domains[i] == d).collect())
                .collect();
            Ok(PreparedData {
                train: splits.train,
                val: splits.val,
                test: splits.test,
                train_by_domain,
                classes: cfg.classes,
            })
        }
        Task::LongTail => {
            let lt = cfg.longtail_config();
            let ds = generate_longtail(&lt, cfg.seed)?;
            let (train, val) = stratified_split(&ds, |_| true, cfg.train_fraction, cfg.seed);
            let test = generate_longtail_test(&lt, cfg.test_per_class, cfg.seed)?.all();
            let train = Split::from_ids(&ds, train);
            Ok(PreparedData {
                train_by_domain: vec![(0..train.len()).collect()],
                val: Split::from_ids(&ds, val),
                train,
                test,
                classes: cfg.classes,
            })
        }
    }
}

/// A finished run along with the selected model and the data it saw.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub bundle: ModelBundle,
    pub data: PreparedData,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_with_model(cfg, None)?.report)
}

fn split_accuracy(bundle: &ModelBundle, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    Ok(accuracy(&bundle.predict(&split.tensor()?)?, &split.labels))
}

#[derive(Default)]
struct LossSums {
    l1: f64,
    l2: f64,
    l3: f64,
    total: f64,
    steps: usize,
}

/// Trains, selects the best-validation checkpoint and evaluates it. With
/// `out` set, writes `checkpoint.bin` there (and `latents_test.txt` when the
/// config asks for latent dumps).
pub fn run_with_model(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare_data(cfg)?;
    if data.val.is_empty() || data.test.is_empty() {
        return Err(HarnessError::Config("validation or test split is empty".into()));
    }
    let streams = RngStreams::new(cfg.seed);
    let mut bundle = ModelBundle::new(&cfg.model_config(), &streams.child("model"))?;
    let mut aug = AugmentRngs::from_streams(&streams.child("augment"));
    let train_cfg = cfg.train_config();
    let variant = cfg.variant;
    let terms = (variant != AblationVariant::Erm, matches!(variant, AblationVariant::ROnly | AblationVariant::DPlusR));

    let mut rows = vec![EpochRow {
        epoch: 0,
        l1: None,
        l2: None,
        l3: None,
        total: None,
        train_acc: split_accuracy(&bundle, &data.train)?,
        val_acc: split_accuracy(&bundle, &data.val)?,
    }];
    let mut best = (rows[0].val_acc, 0usize, bundle.registry.clone());
    let mut total_steps = 0u64;

    for epoch in 1..=cfg.epochs {
        let shuffle = streams.child("shuffle").child_indexed("epoch", epoch as u64);
        let orders: Vec<Vec<usize>> = data
            .train_by_domain
            .iter()
            .enumerate()
            .map(|(d, positions)| {
                let mut order = positions.clone();
                order.shuffle(&mut shuffle.child_indexed("domain", d as u64).stream("order"));
                order
            })
            .collect();
        let steps = orders.iter().map(|o| o.len() / cfg.batch_size).min().unwrap_or(0);
        let mut sums = LossSums::default();
        for s in 0..steps {
            let positions: Vec<usize> = orders
                .iter()
                .flat_map(|o| o[s * cfg.batch_size..(s + 1) * cfg.batch_size].iter().copied())
                .collect();
            let (x, labels) = data.train.batch(&positions)?;
            let b = training_step(&mut bundle, &x, &labels, variant, &train_cfg, &mut aug)?;
            sums.l1 += b.l_original;
            sums.l2 += b.l_degraded;
            sums.l3 += b.l_restored;
            sums.total += b.total;
            sums.steps += 1;
            total_steps += 1;
        }
        let n = sums.steps.max(1) as f64;
        let row = EpochRow {
            epoch,
            l1: Some(sums.l1 / n),
            l2: terms.0.then_some(sums.l2 / n),
            l3: terms.1.then_some(sums.l3 / n),
            total: Some(sums.total / n),
            train_acc: split_accuracy(&bundle, &data.train)?,
            val_acc: split_accuracy(&bundle, &data.val)?,
        };
        if row.val_acc > best.0 {
            best = (row.val_acc, epoch, bundle.registry.clone());
        }
        rows.push(row);
    }

    bundle.registry.copy_values_from(&best.2)?;
    let final_metrics = evaluate(cfg, &bundle, &data, &streams, best.1, best.0)?;

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        bundle.save_checkpoint(&dir.join("checkpoint.bin"))?;
        if cfg.dump_latents {
            let mut rngs = AugmentRngs::from_streams(&streams.child("dump"));
            let d = dump::capture(&bundle, &data.test.tensor()?, &data.test.labels, &mut rngs, cfg.seed, total_steps)?;
            d.write(&dir.join("latents_test.txt"))?;
        }
    }

    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs: rows,
        final_metrics,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, bundle, data })
}

fn latent_quality(bundle: &ModelBundle, split: &Split) -> Result<(Option<f64>, Option<f64>)> {
    if split.len() < 2 {
        return Ok((None, None));
    }
    let z: Tensor = bundle.latents(&split.tensor()?)?;
    Ok((
        alignment(&z, &split.labels).ok().map(|s| s.value),
        uniformity(&z).ok().map(|s| s.value),
    ))
}

fn evaluate(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    data: &PreparedData,
    streams: &RngStreams,
    best_epoch: usize,
    val_acc: f64,
) -> Result<FinalMetrics> {
    let x_test = data.test.tensor()?;
    let predictions = bundle.predict(&x_test)?;
    let mut eval_rngs = AugmentRngs::from_streams(&streams.child("eval"));
    let suite = accuracy_suite(bundle, &x_test, &data.test.labels, cfg.eval_batch_size(), &mut eval_rngs)?;
    let (align_train, uniform_train) = latent_quality(bundle, &data.train)?;
    let (align_test, uniform_test) = latent_quality(bundle, &data.test)?;
    let groups = (cfg.task == Task::LongTail).then(|| {
        let group_acc = |g: ClassGroup| {
            let (mut hit, mut n) = (0usize, 0usize);
            for (p, &l) in predictions.iter().zip(&data.test.labels) {
                if ClassGroup::of(l, data.classes) == g {
                    n += 1;
                    hit += usize::from(*p == l);
                }
            }
            hit as f64 / n.max(1) as f64
        };
        GroupAccuracy {
            many: group_acc(ClassGroup::Many),
            medium: group_acc(ClassGroup::Medium),
            few: group_acc(ClassGroup::Few),
        }
    });
    Ok(FinalMetrics {
        best_epoch,
        val_acc,
        test_acc: accuracy(&predictions, &data.test.labels),
        clean_acc: suite.clean,
        degraded_acc: suite.degraded,
        restored_acc: suite.restored,
        align_train,
        align_test,
        uniform_train,
        uniform_test,
        groups,
    })
}
