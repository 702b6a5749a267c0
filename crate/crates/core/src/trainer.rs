//! The four training strategies and the semi-supervised multi-domain
//! multi-task loop they are variations of.
//!
//! One outer epoch is: optionally refresh the pseudo-labelled pool (class
//! probabilities for domain-2 volumes, soft ROI maps for domain-1 volumes),
//! run one classification epoch over real + pseudo pairs, then (for the
//! multi-task strategies) one detection epoch over real + pseudo pairs.
//! Model selection keeps the parameters with the best domain-1 validation
//! AUC seen so far.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{DomainDataset, Record, Split};
use crate::error::{Error, Result};
use crate::losses::{self, DetectionLossConfig};
use crate::metrics::{dice_score, roc_auc, ScoredSet};
use crate::network::{
    classifier_forward, decoder_forward, encoder_forward, init_params, threshold_mask, ArchConfig,
    Group, ModelParams, ParamGroup,
};
use crate::tensor::{Graph, Tensor, Var, PROB_CLAMP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SupervisedBaseline,
    SemiSupervised,
    SupervisedMdmt,
    SemiSupervisedMdmt,
}

impl Strategy {
    /// Row order of the comparison table.
    pub const ALL: [Strategy; 4] = [
        Strategy::SupervisedBaseline,
        Strategy::SemiSupervised,
        Strategy::SupervisedMdmt,
        Strategy::SemiSupervisedMdmt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SupervisedBaseline => "supervised_baseline",
            Strategy::SemiSupervised => "semi_supervised",
            Strategy::SupervisedMdmt => "supervised_mdmt",
            Strategy::SemiSupervisedMdmt => "semi_supervised_mdmt",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Strategy::SupervisedBaseline => "Supervised Baseline",
            Strategy::SemiSupervised => "Semi-Supervised",
            Strategy::SupervisedMdmt => "Supervised Multi-domain Multi-Task",
            Strategy::SemiSupervisedMdmt => "Semi-Supervised Multi-domain Multi-Task",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Trains the detection branch on domain 2.
    pub fn uses_detection(self) -> bool {
        matches!(self, Strategy::SupervisedMdmt | Strategy::SemiSupervisedMdmt)
    }

    /// Propagates labels between the domains.
    pub fn uses_propagation(self) -> bool {
        matches!(self, Strategy::SemiSupervised | Strategy::SemiSupervisedMdmt)
    }

    pub fn needs_domain2(self) -> bool {
        self != Strategy::SupervisedBaseline
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which domain-2 splits feed training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain2Usage {
    Train,
    TrainVal,
    All,
}

impl Domain2Usage {
    pub fn includes(self, split: Split) -> bool {
        match self {
            Domain2Usage::Train => split == Split::Train,
            Domain2Usage::TrainVal => split != Split::Test,
            Domain2Usage::All => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// `arch.seed` is replaced by `seed` when the model is initialized.
    pub arch: ArchConfig,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub zeta: f64,
    /// Epochs before the first label propagation.
    pub warmup_epochs: usize,
    /// Weight λ of pseudo-labelled pairs relative to real ones.
    pub pseudo_weight: f64,
    /// Epochs between pool refreshes.
    pub propagation_period: usize,
    pub detection_loss: DetectionLossConfig,
    pub domain2_usage: Domain2Usage,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::SemiSupervisedMdmt,
            arch: ArchConfig::desk_default(),
            epochs: 40,
            adam: AdamConfig::default(),
            batch_size: 4,
            zeta: 0.8,
            warmup_epochs: 10,
            pseudo_weight: 1.0,
            propagation_period: 1,
            detection_loss: DetectionLossConfig::default(),
            domain2_usage: Domain2Usage::TrainVal,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let fail = |m: String| Err(Error::config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return fail(format!("adam.lr must be positive, got {}", a.lr));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            return fail("adam.eps must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return fail(format!("zeta must be in [0, 1], got {}", self.zeta));
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..=1.0).contains(&self.pseudo_weight) {
            return fail(format!(
                "pseudo_weight must be in [0, 1], got {}",
                self.pseudo_weight
            ));
        }
        if self.propagation_period == 0 {
            return fail("propagation_period must be at least 1".into());
        }
        let d = &self.detection_loss;
        if !(d.dice_eps > 0.0) || d.ce_weight < 0.0 || d.dice_weight < 0.0 {
            return fail("detection_loss weights must be ≥ 0 and dice_eps > 0".into());
        }
        Ok(())
    }

    fn shuffle_seed(&self, epoch: usize, stage: u64) -> u64 {
        let mut z = self.seed ^ 0x5851_f42d_4c95_7f2d;
        for part in [epoch as u64, stage] {
            z = z.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29) ^ part;
        }
        z
    }
}

/// Bias-corrected Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(group: &ParamGroup) -> Self {
        let zeros: Vec<Vec<f64>> = group.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam step on `params` with `grads` (same layout).
pub fn adam_update(
    params: &mut ParamGroup,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len()
        || grads
            .iter()
            .zip(&params.tensors)
            .any(|(g, p)| g.shape() != p.shape())
        || state.m.len() != params.tensors.len()
    {
        return Err(Error::dim("adam: gradient/parameter/state layout mismatch"));
    }
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite gradient for parameter `{}`",
            params.names[i]
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// A volume with a (possibly soft) scan-level target.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSample {
    pub volume: Tensor,
    pub target: f64,
}

/// A volume with a (possibly soft) voxel-wise target map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSample {
    pub volume: Tensor,
    pub target: Tensor,
}

/// Pseudo-labelled pairs from the latest propagation. Rebuilt from scratch
/// on every refresh.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelledPool {
    /// Domain-2 volumes with predicted class probabilities.
    pub classification: Vec<ClassSample>,
    /// Domain-1 volumes with predicted soft ROI maps.
    pub detection: Vec<MapSample>,
    /// Outer epoch at which the pool was generated.
    pub epoch: usize,
}

/// Which halves of the pool to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PropagationTargets {
    pub classification: bool,
    pub detection: bool,
}

impl PropagationTargets {
    pub const BOTH: Self = PropagationTargets {
        classification: true,
        detection: true,
    };
}

/// Labels domain-2 training volumes with the classifier and domain-1
/// training volumes with the detector. No gradients are recorded; the
/// inputs are only read. Targets are clamped into the open unit interval.
pub fn propagate_labels(
    params: &ModelParams,
    d1_train: &[Tensor],
    d2_train: &[Tensor],
    targets: PropagationTargets,
    epoch: usize,
) -> Result<PseudoLabelledPool> {
    let shape = params.arch.volume_shape();
    if let Some(v) = d1_train.iter().chain(d2_train).find(|v| v.shape() != shape.as_slice()) {
        return Err(Error::config(format!(
            "volume shape {:?} does not match arch input {shape:?}",
            v.shape()
        )));
    }
    let open = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let classification = if targets.classification {
        d2_train
            .iter()
            .map(|v| {
                Ok(ClassSample {
                    volume: v.clone(),
                    target: open(params.predict_prob(v)?),
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let detection = if targets.detection {
        d1_train
            .iter()
            .map(|v| {
                Ok(MapSample {
                    volume: v.clone(),
                    target: params.predict_map(v)?.map(open),
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(PseudoLabelledPool {
        classification,
        detection,
        epoch,
    })
}

const STAGE_CLASSIFICATION: u64 = 1;
const STAGE_DETECTION: u64 = 2;

/// Parameters plus per-group optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub optim: [OptimizerState; 3],
}

fn group_index(g: Group) -> usize {
    match g {
        Group::Encoder => 0,
        Group::Classifier => 1,
        Group::Detector => 2,
    }
}

/// Weighted samples for one epoch, pseudo pairs dropped when λ = 0, in
/// seeded shuffled order.
fn epoch_order<'a, T>(real: &'a [T], pseudo: &'a [T], lambda: f64, seed: u64) -> Vec<(&'a T, f64)> {
    let mut items: Vec<(&T, f64)> = real.iter().map(|s| (s, 1.0)).collect();
    if lambda > 0.0 {
        items.extend(pseudo.iter().map(|s| (s, lambda)));
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    items
}

impl Model {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        let params = init_params(arch)?;
        Ok(Self::from_params(params))
    }

    pub fn from_params(params: ModelParams) -> Self {
        let optim = Group::ALL.map(|g| OptimizerState::new(params.group(g)));
        Model { params, optim }
    }

    fn step(&mut self, grads: Vec<(Group, Vec<Tensor>)>, adam: &AdamConfig) -> Result<()> {
        for (group, g) in grads {
            adam_update(
                self.params.group_mut(group),
                &g,
                &mut self.optim[group_index(group)],
                adam,
            )?;
        }
        Ok(())
    }

    /// Runs mini-batches over `samples` in order. `loss` builds the
    /// per-sample loss on a graph whose bound variables cover `groups`.
    fn run_batches<T>(
        &mut self,
        samples: &[(&T, f64)],
        groups: [Group; 2],
        cfg: &TrainConfig,
        loss: impl Fn(&ModelParams, &mut Graph, &T, [&[Var]; 2]) -> Result<Var>,
    ) -> Result<f64> {
        let mut weighted = 0.0;
        let mut weight_total = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            let mut acc: [Vec<Tensor>; 2] = groups.map(|g| {
                self.params
                    .group(g)
                    .tensors
                    .iter()
                    .map(|t| Tensor::zeros(t.shape().to_vec()))
                    .collect()
            });
            let n = batch.len() as f64;
            for &(sample, w) in batch {
                let mut g = Graph::new();
                let a = self.params.bind(&mut g, groups[0], true);
                let b = self.params.bind(&mut g, groups[1], true);
                let l = loss(&self.params, &mut g, sample, [&a, &b])?;
                let value = g.value(l).item();
                weighted += w * value;
                weight_total += w;
                let scaled = g.scale(l, w / n)?;
                let mut grads = g.backward(scaled)?;
                for (slot, vars) in acc.iter_mut().zip([&a, &b]) {
                    for (sum, v) in slot.iter_mut().zip(vars.iter()) {
                        if let Some(gt) = grads.take(*v) {
                            for (s, x) in sum.data_mut().iter_mut().zip(gt.data()) {
                                *s += x;
                            }
                        }
                    }
                }
            }
            let [ga, gb] = acc;
            self.step(vec![(groups[0], ga), (groups[1], gb)], &cfg.adam)?;
        }
        Ok(weighted / weight_total)
    }

    /// One pass of ℓ_C over real pairs (weight 1) and pseudo pairs
    /// (weight λ). Updates the encoder and classifier only. Returns the
    /// weighted mean loss.
    pub fn epoch_classification(
        &mut self,
        real: &[ClassSample],
        pseudo: &[ClassSample],
        cfg: &TrainConfig,
        epoch: usize,
    ) -> Result<f64> {
        if real.is_empty() {
            return Err(Error::config("classification epoch needs labelled samples"));
        }
        let order = epoch_order(
            real,
            pseudo,
            cfg.pseudo_weight,
            cfg.shuffle_seed(epoch, STAGE_CLASSIFICATION),
        );
        let arch = self.params.arch.clone();
        self.run_batches(
            &order,
            [Group::Encoder, Group::Classifier],
            cfg,
            |_, g, s: &ClassSample, [enc, cls]| {
                let v = g.constant(s.volume.clone());
                let o = encoder_forward(g, &arch, v, enc)?;
                let y = classifier_forward(g, &arch, o, cls)?;
                Ok(losses::bce(g, y, &Tensor::scalar(s.target))?.var)
            },
        )
    }

    /// One pass of ℓ_D over annotated pairs (weight 1) and pseudo maps
    /// (weight λ). Updates the encoder and detector only. `None` when there
    /// is nothing to train on.
    pub fn epoch_detection(
        &mut self,
        real: &[MapSample],
        pseudo: &[MapSample],
        cfg: &TrainConfig,
        epoch: usize,
    ) -> Result<Option<f64>> {
        let order = epoch_order(
            real,
            pseudo,
            cfg.pseudo_weight,
            cfg.shuffle_seed(epoch, STAGE_DETECTION),
        );
        if order.is_empty() {
            return Ok(None);
        }
        if real.is_empty() {
            return Err(Error::config("detection epoch needs annotated samples"));
        }
        let arch = self.params.arch.clone();
        let loss_cfg = cfg.detection_loss;
        self.run_batches(
            &order,
            [Group::Encoder, Group::Detector],
            cfg,
            |_, g, s: &MapSample, [enc, det]| {
                let v = g.constant(s.volume.clone());
                let o = encoder_forward(g, &arch, v, enc)?;
                let m = decoder_forward(g, &arch, o, det)?;
                Ok(losses::detection_loss(g, m, &s.target, &loss_cfg)?.var)
            },
        )
        .map(Some)
    }
}

/// Classifier scores and labels for labelled records.
pub fn score_records(params: &ModelParams, records: &[&Record]) -> Result<ScoredSet> {
    let shape = params.arch.input_shape;
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        let label = r.label.ok_or_else(|| {
            Error::Evaluation(format!("patient {} has no scan label", r.patient_id))
        })?;
        scores.push(params.predict_prob(&r.volume_tensor(shape))?);
        labels.push(label);
    }
    ScoredSet::new(scores, labels)
}

pub fn auc_on(params: &ModelParams, records: &[&Record]) -> Result<f64> {
    roc_auc(&score_records(params, records)?)
}

/// Mean Dice of `threshold_mask(s̃, ζ)` against ground-truth masks.
pub fn mean_dice(params: &ModelParams, records: &[&Record], zeta: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Evaluation("no records to score".into()));
    }
    let shape = params.arch.input_shape;
    let mut total = 0.0;
    for r in records {
        let gt = r.mask.as_ref().ok_or_else(|| {
            Error::Evaluation(format!("patient {} has no ROI mask", r.patient_id))
        })?;
        let pred = threshold_mask(&params.predict_map(&r.volume_tensor(shape))?, zeta)?;
        total += dice_score(&pred, gt)?;
    }
    Ok(total / records.len() as f64)
}

/// One outer epoch of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub classification_loss: f64,
    pub detection_loss: Option<f64>,
    pub val_auc: f64,
    pub val_dice: Option<f64>,
    /// Epoch stamp of the pseudo-label pool used, if any.
    pub pool_epoch: Option<usize>,
    pub pseudo_class_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestCheckpoint {
    pub params: ModelParams,
    pub epoch: usize,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best: BestCheckpoint,
    pub final_params: ModelParams,
    pub wall_clock_secs: f64,
}

/// Tensors extracted once from the datasets for a run.
struct RunData {
    d1_train: Vec<ClassSample>,
    d1_val: Vec<Record>,
    d2_train: Vec<MapSample>,
    d2_val: Vec<Record>,
}

fn check_dataset(ds: &DomainDataset, domain: u8, arch: &ArchConfig) -> Result<()> {
    if ds.domain_id() != domain {
        return Err(Error::config(format!(
            "expected a domain-{domain} dataset, got domain {}",
            ds.domain_id()
        )));
    }
    if !ds.is_split() {
        return Err(Error::config(format!("domain-{domain} dataset has no splits")));
    }
    if !ds.normalized {
        return Err(Error::config(format!("domain-{domain} dataset is not normalized")));
    }
    if ds.shape() != arch.input_shape {
        return Err(Error::config(format!(
            "domain-{domain} volumes are {:?}, arch expects {:?}",
            ds.shape(),
            arch.input_shape
        )));
    }
    Ok(())
}

fn prepare(cfg: &TrainConfig, d1: &DomainDataset, d2: Option<&DomainDataset>) -> Result<RunData> {
    check_dataset(d1, 1, &cfg.arch)?;
    let shape = d1.shape();
    let d1_train = d1
        .records_in(Split::Train)
        .into_iter()
        .map(|r| {
            let label = r.label.ok_or_else(|| {
                Error::config(format!("domain-1 patient {} lacks a label", r.patient_id))
            })?;
            Ok(ClassSample {
                volume: r.volume_tensor(shape),
                target: f64::from(label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d1_val: Vec<Record> = d1.records_in(Split::Val).into_iter().cloned().collect();
    let (mut d2_train, mut d2_val) = (Vec::new(), Vec::new());
    if cfg.strategy.needs_domain2() {
        let d2 = d2.ok_or_else(|| {
            Error::config(format!("strategy {} needs the domain-2 dataset", cfg.strategy))
        })?;
        check_dataset(d2, 2, &cfg.arch)?;
        for (r, &split) in d2.records.iter().zip(&d2.splits) {
            if cfg.domain2_usage.includes(split) {
                let target = r.mask_tensor(shape).ok_or_else(|| {
                    Error::config(format!("domain-2 patient {} lacks a mask", r.patient_id))
                })?;
                d2_train.push(MapSample {
                    volume: r.volume_tensor(shape),
                    target,
                });
            }
            if split == Split::Val {
                d2_val.push(r.clone());
            }
        }
    }
    Ok(RunData {
        d1_train,
        d1_val,
        d2_train,
        d2_val,
    })
}

/// Trains one strategy end to end.
///
/// `d1` and `d2` must be split and normalized. The baseline ignores `d2`.
pub fn train(cfg: &TrainConfig, d1: &DomainDataset, d2: Option<&DomainDataset>) -> Result<TrainRun> {
    train_with_observer(cfg, d1, d2, |_, _| {})
}

/// [`train`] with a callback invoked after each epoch's record is final.
pub fn train_with_observer(
    cfg: &TrainConfig,
    d1: &DomainDataset,
    d2: Option<&DomainDataset>,
    mut observe: impl FnMut(&EpochRecord, &Model),
) -> Result<TrainRun> {
    cfg.validate()?;
    let start = Instant::now();
    let data = prepare(cfg, d1, d2)?;
    let arch = ArchConfig {
        seed: cfg.seed,
        ..cfg.arch.clone()
    };
    let mut model = Model::new(&arch)?;
    let d1_val: Vec<&Record> = data.d1_val.iter().collect();
    let d2_val: Vec<&Record> = data.d2_val.iter().collect();
    let d1_volumes: Vec<Tensor> = data.d1_train.iter().map(|s| s.volume.clone()).collect();
    let d2_volumes: Vec<Tensor> = data.d2_train.iter().map(|s| s.volume.clone()).collect();
    let targets = PropagationTargets {
        classification: true,
        detection: cfg.strategy.uses_detection(),
    };

    let mut pool: Option<PseudoLabelledPool> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestCheckpoint> = None;
    let at_epoch = |e: usize| move |err: Error| annotate(err, e);

    for epoch in 0..cfg.epochs {
        if cfg.strategy.uses_propagation()
            && epoch >= cfg.warmup_epochs
            && (epoch - cfg.warmup_epochs).is_multiple_of(cfg.propagation_period)
        {
            pool = Some(
                propagate_labels(&model.params, &d1_volumes, &d2_volumes, targets, epoch)
                    .map_err(at_epoch(epoch))?,
            );
        }
        let (pseudo_cls, pseudo_det): (&[ClassSample], &[MapSample]) = match &pool {
            Some(p) => (&p.classification, &p.detection),
            None => (&[], &[]),
        };
        let classification_loss = model
            .epoch_classification(&data.d1_train, pseudo_cls, cfg, epoch)
            .map_err(at_epoch(epoch))?;
        let detection_loss = if cfg.strategy.uses_detection() {
            model
                .epoch_detection(&data.d2_train, pseudo_det, cfg, epoch)
                .map_err(at_epoch(epoch))?
        } else {
            None
        };
        let val_auc = auc_on(&model.params, &d1_val).map_err(at_epoch(epoch))?;
        let val_dice = if cfg.strategy.uses_detection() && !d2_val.is_empty() {
            Some(mean_dice(&model.params, &d2_val, cfg.zeta).map_err(at_epoch(epoch))?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            classification_loss,
            detection_loss,
            val_auc,
            val_dice,
            pool_epoch: pool.as_ref().map(|p| p.epoch),
            pseudo_class_mean: pool.as_ref().and_then(|p| {
                (!p.classification.is_empty()).then(|| {
                    p.classification.iter().map(|s| s.target).sum::<f64>()
                        / p.classification.len() as f64
                })
            }),
        };
        if best.as_ref().is_none_or(|b| val_auc > b.val_auc) {
            best = Some(BestCheckpoint {
                params: model.params.clone(),
                epoch,
                val_auc,
            });
        }
        observe(&record, &model);
        history.push(record);
    }
    Ok(TrainRun {
        config: cfg.clone(),
        history,
        best: best.expect("at least one epoch"),
        final_params: model.params,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn annotate(err: Error, epoch: usize) -> Error {
    match err {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
        Error::Evaluation(m) => Error::Evaluation(format!("epoch {epoch}: {m}")),
        other => other,
    }
}
