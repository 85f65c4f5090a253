//! Soft Dice losses, the Dice coefficient, the learning-rate schedule, the
//! training loops, and cross-validation.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::models::{volumes_to_tensor, CascadeBundle, Network};
use crate::nn::ops::concat_forward;
use crate::nn::{adam_step, AdamState, ModelGraph, ParamSet, Real, Tensor5};
use crate::postproc::{postprocess_case, ThresholdPolicy};
use crate::preprocess::{augment_rotate, block_average, extract_label_region, extract_region, PatchGrid};
use crate::vio::FoldSplit;
use crate::volcore::{BinaryMask, Dims, LabelMap, ProbMap, Volume};

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// `-2 Σ u v / (Σ u + Σ v + ε)` and its gradient with respect to `u`.
/// Sums are accumulated in `f64` whatever `T` is.
pub fn soft_dice_with_grad<T: Real>(u: &[T], v: &[T]) -> (f64, Vec<T>) {
    let (mut inter, mut su, mut sv) = (0f64, 0f64, 0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        inter += a * b;
        su += a;
        sv += b;
    }
    let s = su + sv + DICE_EPS;
    let loss = -2.0 * inter / s;
    let shared = 2.0 * inter / (s * s);
    let grad = v.iter().map(|&b| T::lit(-2.0 * b.to_f64_lossy() / s + shared)).collect();
    (loss, grad)
}

pub fn soft_dice_value<T: Real>(u: &[T], v: &[T]) -> f64 {
    let (mut inter, mut su, mut sv) = (0f64, 0f64, 0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        inter += a * b;
        su += a;
        sv += b;
    }
    -2.0 * inter / (su + sv + DICE_EPS)
}

pub fn soft_dice_loss(u: &ProbMap, v: &BinaryMask) -> Result<f64> {
    Dims::check_same(u.dims(), v.dims())?;
    Ok(soft_dice_value(u.data(), &v.to_f32()))
}

/// The two soft Dice terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_whole: f64,
    pub l_tumor: f64,
    pub l_total: f64,
}

impl LossParts {
    pub fn new(l_whole: f64, l_tumor: f64) -> Self {
        LossParts {
            l_whole,
            l_tumor,
            l_total: l_whole + l_tumor,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_whole.is_finite() && self.l_tumor.is_finite()
    }
}

/// Whole-region plus tumor soft Dice against a label map.
pub fn combined_loss(whole: &ProbMap, tumor: &ProbMap, labels: &LabelMap) -> Result<LossParts> {
    Ok(LossParts::new(
        soft_dice_loss(whole, &labels.whole_mask())?,
        soft_dice_loss(tumor, &labels.tumor_mask())?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dice {
    pub value: f64,
    /// Both masks were empty; `value` is then 1 by convention.
    pub both_empty: bool,
}

/// `2 |X ∩ Y| / (|X| + |Y|)`.
pub fn dsc(x: &BinaryMask, y: &BinaryMask) -> Result<Dice> {
    Dims::check_same(x.dims(), y.dims())?;
    let (mut inter, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        inter += (a && b) as usize;
        nx += a as usize;
        ny += b as usize;
    }
    if nx + ny == 0 {
        return Ok(Dice {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(Dice {
        value: 2.0 * inter as f64 / (nx + ny) as f64,
        both_empty: false,
    })
}

/// Plateau and early-stop settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub plateau_patience: usize,
    pub drop_factor: f64,
    pub stop_patience: usize,
    /// A validation loss counts as an improvement when it beats the best so
    /// far by at least this much.
    pub min_delta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            plateau_patience: 6,
            drop_factor: 0.2,
            stop_patience: 15,
            min_delta: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    NoImprovement,
    /// The learning rate was just multiplied by the drop factor.
    Dropped,
    Stop,
}

/// Learning rate bookkeeping across epochs.
///
/// The rate drops once when a plateau reaches `plateau_patience` epochs
/// without improvement; training stops when it reaches `stop_patience`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub config: ScheduleConfig,
    pub lr0: f64,
    pub drops: u32,
    pub best: f64,
    pub since_best: usize,
}

impl ScheduleState {
    pub fn new(lr0: f64, config: ScheduleConfig) -> Self {
        ScheduleState {
            config,
            lr0,
            drops: 0,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// `lr0 * factor^drops`.
    pub fn lr(&self) -> f64 {
        self.lr0 * self.config.drop_factor.powi(self.drops as i32)
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleEvent {
        if val_loss < self.best - self.config.min_delta {
            self.best = val_loss;
            self.since_best = 0;
            return ScheduleEvent::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.config.stop_patience {
            ScheduleEvent::Stop
        } else if self.since_best == self.config.plateau_patience {
            self.drops += 1;
            ScheduleEvent::Dropped
        } else {
            ScheduleEvent::NoImprovement
        }
    }
}

/// One preprocessed training case.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub seed: u64,
    pub adam: AdamState,
    pub schedule: ScheduleConfig,
    /// Uniform rotation range in degrees; 0 disables augmentation.
    pub max_rotation_deg: f64,
    /// Random patches drawn per case and epoch; `None` walks the full grid.
    pub patches_per_case: Option<usize>,
    pub lnet_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            seed: 0,
            adam: AdamState::default(),
            schedule: ScheduleConfig::default(),
            max_rotation_deg: 1.0,
            patches_per_case: None,
            lnet_epochs: 200,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val_total: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,l_whole,l_tumor,l_total,val_total";

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch, e.lr, e.train.l_whole, e.train.l_tumor, e.train.l_total, e.val_total
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation loss.
    pub bundle: CascadeBundle,
    pub log: Vec<EpochLog>,
    pub lnet_log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub lnet_best_epoch: usize,
}

/// Forward through W-Net, then T-Net on (image, W-Net output); both soft
/// Dice terms. With `backward`, gradients of the summed loss are added to
/// both parameter sets, including the T-Net loss flowing back into the
/// W-Net through its probability map.
pub fn joint_loss<T: Real>(
    wnet: &ModelGraph,
    wparams: &mut ParamSet<T>,
    tnet: &ModelGraph,
    tparams: &mut ParamSet<T>,
    image: &Tensor5<T>,
    whole_target: &[T],
    tumor_target: &[T],
    backward: bool,
) -> Result<LossParts> {
    let wpass = wnet.forward(wparams, image)?;
    let tin = concat_forward(&[image, wpass.output()])?;
    let tpass = tnet.forward(tparams, &tin)?;
    let (l_whole, gw) = soft_dice_with_grad(wpass.output().data(), whole_target);
    let (l_tumor, gt) = soft_dice_with_grad(tpass.output().data(), tumor_target);
    if backward {
        let shape = wpass.output().shape();
        let dtin = tnet.backward(tparams, &tpass, &Tensor5::from_vec(shape, gt)?)?;
        let mut gw = Tensor5::from_vec(shape, gw)?;
        for (g, &d) in gw.data_mut().iter_mut().zip(dtin.channel(0, 1)) {
            *g += d;
        }
        wnet.backward(wparams, &wpass, &gw)?;
    }
    Ok(LossParts::new(l_whole, l_tumor))
}

/// Single-network soft Dice step used for the localization net.
pub fn single_loss<T: Real>(net: &ModelGraph, params: &mut ParamSet<T>, image: &Tensor5<T>, target: &[T], backward: bool) -> Result<f64> {
    let pass = net.forward(params, image)?;
    let (loss, g) = soft_dice_with_grad(pass.output().data(), target);
    if backward {
        net.backward(params, &pass, &Tensor5::from_vec(pass.output().shape(), g)?)?;
    }
    Ok(loss)
}

/// Block maximum: a coarse voxel is set if any fine voxel under it is.
pub fn max_pool_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    let d = mask.dims();
    if factor == 0 || d.w % factor != 0 || d.h % factor != 0 || d.d % factor != 0 {
        return Err(Error::invalid(format!("{d} is not divisible by {factor}")));
    }
    let out = Dims::new(d.w / factor, d.h / factor, d.d / factor);
    let mut data = vec![false; out.len()];
    for (i, &m) in mask.data().iter().enumerate() {
        if m {
            let (x, y, z) = d.coords(i);
            data[out.index(x / factor, y / factor, z / factor)] = true;
        }
    }
    let s = mask.spacing();
    let f = factor as f64;
    BinaryMask::new(out, crate::volcore::Spacing::new(s.dx * f, s.dy * f, s.dz * f)?, data)
}

/// Grows a mask by one voxel in all 26 directions.
pub fn dilate_mask(mask: &BinaryMask) -> BinaryMask {
    let d = mask.dims();
    let mut out = BinaryMask::empty(d, mask.spacing());
    let r = |v: usize, n: usize| v.saturating_sub(1)..(v + 2).min(n);
    for (i, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
        let (x, y, z) = d.coords(i);
        for zz in r(z, d.d) {
            for yy in r(y, d.h) {
                for xx in r(x, d.w) {
                    out.data_mut()[d.index(xx, yy, zz)] = true;
                }
            }
        }
    }
    out
}

/// Localization target: the block maximum of the whole-region mask with a
/// one-voxel margin, so that a gate slightly off at coarse resolution still
/// covers the organ.
pub fn localization_target(labels: &LabelMap, factor: usize) -> Result<BinaryMask> {
    Ok(dilate_mask(&max_pool_mask(&labels.whole_mask(), factor)?))
}

fn check_finite(params: &ParamSet<f32>, what: &str) -> Result<()> {
    if params.blocks().iter().any(|b| b.value.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("{what} parameters diverged")));
    }
    Ok(())
}

fn check_cases(cases: &[Case], dims: Dims) -> Result<()> {
    for c in cases {
        Dims::check_same(c.image.dims(), dims).map_err(|e| Error::invalid(format!("case `{}`: {e}", c.id)))?;
        Dims::check_same(c.labels.dims(), dims).map_err(|e| Error::invalid(format!("case `{}`: {e}", c.id)))?;
    }
    Ok(())
}

fn sample_origins(grid: &PatchGrid, count: Option<usize>, rng: &mut SplitMix64) -> Vec<[usize; 3]> {
    match count {
        None => grid.origins().to_vec(),
        Some(k) => {
            let (d, s) = (grid.dims(), grid.shape());
            (0..k)
                .map(|_| {
                    [
                        rng.random_range(0..=d.w - s.w),
                        rng.random_range(0..=d.h - s.h),
                        rng.random_range(0..=d.d - s.d),
                    ]
                })
                .collect()
        }
    }
}

fn augment(case: &Case, max_deg: f64, rng: &mut SplitMix64) -> Result<(Volume, LabelMap)> {
    if max_deg > 0.0 {
        let (img, lab, _) = augment_rotate(&case.image, &case.labels, max_deg, rng)?;
        Ok((img, lab))
    } else {
        Ok((case.image.clone(), case.labels.clone()))
    }
}

/// Drives one training phase: per-epoch training, validation, schedule
/// transitions, and best-parameter snapshots.
trait Phase {
    fn train_epoch(&mut self, lr: f64, rng: &mut SplitMix64) -> Result<LossParts>;
    fn validate(&self) -> Result<Option<f64>>;
    fn snapshot(&mut self);
}

fn run_phase<P: Phase>(phase: &mut P, name: &str, epochs: usize, config: &TrainConfig, seed: u64) -> Result<(Vec<EpochLog>, usize)> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut schedule = ScheduleState::new(config.adam.lr, config.schedule);
    let mut log = Vec::with_capacity(epochs);
    let mut best_epoch = 0;
    for epoch in 1..=epochs {
        let lr = schedule.lr();
        let train = phase.train_epoch(lr, &mut rng)?;
        if !train.is_finite() {
            return Err(Error::NonFinite(format!("{name} epoch {epoch}: training loss {}", train.l_total)));
        }
        let val_total = phase.validate()?.unwrap_or(train.l_total);
        if !val_total.is_finite() {
            return Err(Error::NonFinite(format!("{name} epoch {epoch}: validation loss {val_total}")));
        }
        log.push(EpochLog {
            epoch,
            lr,
            train,
            val_total,
        });
        let event = schedule.observe(val_total);
        debug!("{name} epoch {epoch}: lr {lr:e} train {:.5} val {val_total:.5} {event:?}", train.l_total);
        match event {
            ScheduleEvent::Improved => {
                best_epoch = epoch;
                phase.snapshot();
            }
            ScheduleEvent::Dropped => info!("{name} epoch {epoch}: learning rate now {:e}", schedule.lr()),
            ScheduleEvent::Stop => {
                info!("{name}: early stop after epoch {epoch}");
                break;
            }
            ScheduleEvent::NoImprovement => {}
        }
    }
    info!("{name}: best epoch {best_epoch} of {}", log.len());
    Ok((log, best_epoch))
}

struct JointPhase<'a> {
    wnet: &'a mut Network,
    tnet: &'a mut Network,
    wadam: AdamState,
    tadam: AdamState,
    best: (ParamSet<f32>, ParamSet<f32>),
    bundle_geometry: &'a CascadeBundle,
    train: &'a [Case],
    val: &'a [Case],
    config: &'a TrainConfig,
}

impl Phase for JointPhase<'_> {
    fn train_epoch(&mut self, lr: f64, rng: &mut SplitMix64) -> Result<LossParts> {
        let grid = self.bundle_geometry.patches.grid(self.bundle_geometry.final_dims)?;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(rng);
        self.wadam.lr = lr;
        self.tadam.lr = lr;
        let (mut sum, mut n) = (LossParts::default(), 0usize);
        for i in order {
            let case = &self.train[i];
            let (image, labels) = augment(case, self.config.max_rotation_deg, rng)?;
            for origin in sample_origins(&grid, self.config.patches_per_case, rng) {
                let img = extract_region(&image, origin, grid.shape())?;
                let lab = extract_label_region(&labels, origin, grid.shape())?;
                let x = volumes_to_tensor(&[&img])?;
                let parts = joint_loss(
                    &self.wnet.graph,
                    &mut self.wnet.params,
                    &self.tnet.graph,
                    &mut self.tnet.params,
                    &x,
                    &lab.whole_mask().to_f32(),
                    &lab.tumor_mask().to_f32(),
                    true,
                )?;
                if !parts.is_finite() {
                    return Err(Error::NonFinite(format!("case `{}`: loss {}", case.id, parts.l_total)));
                }
                adam_step(&mut self.wnet.params, &mut self.wadam);
                adam_step(&mut self.tnet.params, &mut self.tadam);
                sum = LossParts::new(sum.l_whole + parts.l_whole, sum.l_tumor + parts.l_tumor);
                n += 1;
            }
        }
        check_finite(&self.wnet.params, "W-Net")?;
        check_finite(&self.tnet.params, "T-Net")?;
        let n = n.max(1) as f64;
        Ok(LossParts::new(sum.l_whole / n, sum.l_tumor / n))
    }

    fn validate(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let grid = self.bundle_geometry.patches.grid(self.bundle_geometry.final_dims)?;
        let mut total = 0.0;
        for case in self.val {
            let whole = self.wnet.predict_patchwise(&[&case.image], &grid)?;
            let tumor = self.tnet.predict_patchwise(&[&case.image, whole.as_volume()], &grid)?;
            total += combined_loss(&whole, &tumor, &case.labels)?.l_total;
        }
        Ok(Some(total / self.val.len() as f64))
    }

    fn snapshot(&mut self) {
        self.best = (self.wnet.params.clone(), self.tnet.params.clone());
    }
}

struct LocPhase<'a> {
    lnet: &'a mut Network,
    adam: AdamState,
    best: ParamSet<f32>,
    factor: usize,
    train: &'a [Case],
    val: Vec<(Volume, Vec<f32>)>,
    config: &'a TrainConfig,
}

impl LocPhase<'_> {
    fn inputs(case_image: &Volume, labels: &LabelMap, factor: usize) -> Result<(Volume, Vec<f32>)> {
        Ok((
            block_average(case_image, factor)?,
            localization_target(labels, factor)?.to_f32(),
        ))
    }
}

impl Phase for LocPhase<'_> {
    fn train_epoch(&mut self, lr: f64, rng: &mut SplitMix64) -> Result<LossParts> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(rng);
        self.adam.lr = lr;
        let mut sum = 0.0;
        for &i in &order {
            let case = &self.train[i];
            let (image, labels) = augment(case, self.config.max_rotation_deg, rng)?;
            let (small, target) = Self::inputs(&image, &labels, self.factor)?;
            let loss = single_loss(&self.lnet.graph, &mut self.lnet.params, &volumes_to_tensor(&[&small])?, &target, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("case `{}`: L-Net loss {loss}", case.id)));
            }
            adam_step(&mut self.lnet.params, &mut self.adam);
            sum += loss;
        }
        check_finite(&self.lnet.params, "L-Net")?;
        Ok(LossParts::new(sum / order.len().max(1) as f64, 0.0))
    }

    fn validate(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for (small, target) in &self.val {
            let p = self.lnet.predict_volume(&[small])?;
            total += soft_dice_value(p.data(), target);
        }
        Ok(Some(total / self.val.len() as f64))
    }

    fn snapshot(&mut self) {
        self.best = self.lnet.params.clone();
    }
}

/// Trains the localization net, then W-Net and T-Net jointly. Returns the
/// best-validation parameters of each phase. With no validation cases the
/// training loss drives the schedule.
pub fn train(mut bundle: CascadeBundle, train_cases: &[Case], val_cases: &[Case], config: &TrainConfig) -> Result<TrainOutcome> {
    if train_cases.is_empty() {
        return Err(Error::invalid("no training cases"));
    }
    config.adam.validate()?;
    bundle.validate()?;
    check_cases(train_cases, bundle.final_dims)?;
    check_cases(val_cases, bundle.final_dims)?;
    let mut seeds = SplitMix64::seed_from_u64(config.seed);
    let (lnet_seed, joint_seed): (u64, u64) = (seeds.random(), seeds.random());

    let factor = crate::models::downsample_factor(bundle.final_dims, bundle.lnet_dims)?;
    let val_inputs = val_cases
        .iter()
        .map(|c| LocPhase::inputs(&c.image, &c.labels, factor))
        .collect::<Result<Vec<_>>>()?;
    let mut lnet = bundle.lnet.clone();
    let mut loc = LocPhase {
        best: lnet.params.clone(),
        lnet: &mut lnet,
        adam: config.adam.clone(),
        factor,
        train: train_cases,
        val: val_inputs,
        config,
    };
    let (lnet_log, lnet_best_epoch) = run_phase(&mut loc, "L-Net", config.lnet_epochs, config, lnet_seed)?;
    let lnet_best = loc.best;

    let mut wnet = bundle.wnet.clone();
    let mut tnet = bundle.tnet.clone();
    let mut joint = JointPhase {
        best: (wnet.params.clone(), tnet.params.clone()),
        wnet: &mut wnet,
        tnet: &mut tnet,
        wadam: config.adam.clone(),
        tadam: config.adam.clone(),
        bundle_geometry: &bundle,
        train: train_cases,
        val: val_cases,
        config,
    };
    let (log, best_epoch) = run_phase(&mut joint, "W/T-Net", config.max_epochs, config, joint_seed)?;
    let (wbest, tbest) = joint.best;

    bundle.lnet.params = lnet_best;
    bundle.wnet.params = wbest;
    bundle.tnet.params = tbest;
    Ok(TrainOutcome {
        bundle,
        log,
        lnet_log,
        best_epoch,
        lnet_best_epoch,
    })
}

/// Dice of the post-processed prediction for one case.
pub fn evaluate_case(bundle: &CascadeBundle, case: &Case, policy: &ThresholdPolicy) -> Result<(Dice, Dice)> {
    let out = bundle.forward(&case.image)?;
    let pred = postprocess_case(&out.whole, &out.tumor, &out.loc, policy)?;
    Ok((
        dsc(&pred.whole_mask(), &case.labels.whole_mask())?,
        dsc(&pred.tumor_mask(), &case.labels.tumor_mask())?,
    ))
}

pub const REGION_WHOLE: &str = "kidney+tumor";
pub const REGION_TUMOR: &str = "tumor";
pub const REGION_MEAN: &str = "mean";

/// Per-fold mean Dice per region.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldScore {
    pub fold: usize,
    pub whole: f64,
    pub tumor: f64,
}

impl FoldScore {
    pub fn mean(&self) -> f64 {
        (self.whole + self.tumor) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldScore>,
}

/// Mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl CvReport {
    fn column(&self, region: &str) -> Vec<f64> {
        self.folds
            .iter()
            .map(|f| match region {
                REGION_WHOLE => f.whole,
                REGION_TUMOR => f.tumor,
                _ => f.mean(),
            })
            .collect()
    }

    /// `(mean, sd)` over folds for a region name.
    pub fn summary(&self, region: &str) -> (f64, f64) {
        mean_sd(&self.column(region))
    }

    /// `fold,region,dsc` rows per fold, then `mean` and `sd` rows.
    pub fn to_csv(&self) -> String {
        let regions = [REGION_WHOLE, REGION_TUMOR, REGION_MEAN];
        let mut s = String::from("fold,region,dsc\n");
        for f in &self.folds {
            for (r, v) in regions.iter().zip([f.whole, f.tumor, f.mean()]) {
                let _ = writeln!(s, "{},{r},{v}", f.fold);
            }
        }
        for r in regions {
            let _ = writeln!(s, "mean,{r},{}", self.summary(r).0);
        }
        for r in regions {
            let _ = writeln!(s, "sd,{r},{}", self.summary(r).1);
        }
        s
    }
}

/// Seed for fold `k`, derived from the master seed.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    SplitMix64::seed_from_u64(master.wrapping_add(0xA076_1D64_78BD_642F_u64.wrapping_mul(fold as u64 + 1))).random()
}

/// Trains one model per fold (held-out fold used for validation) and scores
/// it on that fold after post-processing. `make_bundle` builds the initial
/// bundle for a fold from its seed.
pub fn cross_validate(
    cases: &[Case],
    split: &FoldSplit,
    config: &TrainConfig,
    policy: &ThresholdPolicy,
    make_bundle: impl Fn(u64) -> Result<CascadeBundle>,
) -> Result<CvReport> {
    if cases.len() < split.k {
        return Err(Error::invalid(format!("{} cases for {} folds", cases.len(), split.k)));
    }
    let mut folds = Vec::with_capacity(split.k);
    for fold in 0..split.k {
        let fold_of = |c: &Case| {
            split
                .fold_of(&c.id)
                .ok_or_else(|| Error::invalid(format!("case `{}` is not in the fold split", c.id)))
        };
        let mut train_cases = Vec::new();
        let mut held_out = Vec::new();
        for c in cases {
            if fold_of(c)? == fold {
                held_out.push(c.clone());
            } else {
                train_cases.push(c.clone());
            }
        }
        let seed = fold_seed(config.seed, fold);
        let fold_config = TrainConfig {
            seed,
            ..config.clone()
        };
        info!("fold {fold}: {} train, {} held out", train_cases.len(), held_out.len());
        let outcome = train(make_bundle(seed)?, &train_cases, &held_out, &fold_config)?;
        let (mut w, mut t) = (0.0, 0.0);
        for c in &held_out {
            let (dw, dt) = evaluate_case(&outcome.bundle, c, policy)?;
            w += dw.value;
            t += dt.value;
        }
        let n = held_out.len() as f64;
        folds.push(FoldScore {
            fold,
            whole: w / n,
            tumor: t / n,
        });
    }
    Ok(CvReport { folds })
}
