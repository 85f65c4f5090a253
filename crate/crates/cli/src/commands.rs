use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{error, info, warn};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;

use renalseg::gradcheck;
use renalseg::models::{CascadeBundle, Network, PatchConfig, UNetSpec};
use renalseg::nn::AdamState;
use renalseg::phantom::{generate_one, PhantomConfig};
use renalseg::postproc::{ensemble_average, postprocess_case, ThresholdPolicy};
use renalseg::preprocess::{common_grid, resampled_dims, PreprocessConfig, PreprocessPlan};
use renalseg::trainer::{
    cross_validate, dsc, epoch_log_csv, train, Case, TrainConfig, REGION_MEAN, REGION_TUMOR, REGION_WHOLE,
};
use renalseg::vio::{
    metrics_to_csv, read_volume, split_folds, write_atomic, write_volume, CaseManifest, CaseRecord, KeyValues,
    MetricRow,
};
use renalseg::volcore::{Dims, LabelMap, ProbMap, Spacing, Volume};
use renalseg::Error;

use crate::{
    Cli, Command, EnsembleArgs, EvaluateArgs, GradcheckArgs, NetArgs, PhantomArgs, PolicyArgs, PostprocessArgs,
    PredictArgs, PreprocessArgs, TrainArgs,
};

/// Bad flags or missing inputs; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A numeric check failed; exit code 3.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericFailure>() || matches!(cause.downcast_ref::<Error>(), Some(Error::NonFinite(_))) {
            return 3;
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .context("starting worker pool")?;
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Postprocess(a) => postprocess(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} {} is not a directory", path.display())));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_prob(path: &Path) -> Result<ProbMap> {
    let v: Volume = read_volume(path)?;
    ProbMap::new(v).with_context(|| format!("{} is not a probability map", path.display()))
}

fn load_cases(manifest: &CaseManifest) -> Result<Vec<Case>> {
    manifest
        .cases
        .par_iter()
        .map(|c| {
            let image: Volume = read_volume(&c.image)?;
            let labels: LabelMap = read_volume(&c.label)?;
            Dims::check_same(image.dims(), labels.dims()).with_context(|| format!("case `{}`", c.id))?;
            Ok(Case {
                id: c.id.clone(),
                image,
                labels,
            })
        })
        .collect()
}

fn phantom(a: PhantomArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if !(a.noise >= 0.0) {
        return Err(usage("--noise must be non-negative"));
    }
    let config = PhantomConfig {
        noise_sigma: a.noise,
        ..PhantomConfig::new(a.dims, a.count, a.seed)
    };
    let (images, labels) = (a.out.join("images"), a.out.join("labels"));
    create_dir(&images)?;
    create_dir(&labels)?;
    let records = (0..a.count)
        .into_par_iter()
        .map(|i| {
            let p = generate_one(&config, i)?;
            let record = CaseRecord {
                image: images.join(format!("{}.mvol", p.id)),
                label: labels.join(format!("{}.mvol", p.id)),
                id: p.id,
            };
            write_volume(&p.image, &record.image)?;
            write_volume(&p.labels, &record.label)?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    CaseManifest::new(records)?.save(&a.out.join("manifest.txt"))?;
    info!("wrote {} phantoms to {}", a.count, a.out.display());
    Ok(())
}

struct RawCase {
    record: CaseRecord,
    image: Volume,
    labels: LabelMap,
}

fn read_raw(record: &CaseRecord) -> Result<RawCase> {
    let image: Volume = read_volume(&record.image)?;
    let labels: LabelMap = read_volume(&record.label)?;
    Dims::check_same(image.dims(), labels.dims())?;
    if image.spacing() != labels.spacing() {
        bail!("image and label spacing differ");
    }
    Ok(RawCase {
        record: record.clone(),
        image,
        labels,
    })
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let mut config = match a.final_dims {
        Some(d) => PreprocessConfig {
            final_dims: d,
            ..PreprocessConfig::desk_scale(1)?
        },
        None => PreprocessConfig::desk_scale(a.divisor).map_err(|e| usage(e.to_string()))?,
    };
    config.target_spacing = Spacing::new(a.spacing[0], a.spacing[1], a.spacing[2]).map_err(|e| usage(e.to_string()))?;
    config.median = a.median;

    // missing case files are per-case failures, not a manifest error
    let text = fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let manifest = CaseManifest::parse(&text, a.manifest.parent().unwrap_or(Path::new(".")), &a.manifest)?;
    if manifest.is_empty() {
        bail!("no cases in {}", a.manifest.display());
    }
    let raw: Vec<RawCase> = manifest
        .cases
        .par_iter()
        .map(|c| read_raw(c).map_err(|e| error!("case `{}`: {e:#}", c.id)).ok())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let mut resampled = Vec::with_capacity(raw.len());
    for c in &raw {
        resampled.push(resampled_dims(c.image.dims(), c.image.spacing(), config.target_spacing)?);
    }
    let Some(padded) = common_grid(resampled) else {
        bail!("all {} cases failed to load", manifest.len());
    };

    let (images, labels, plans) = (a.out.join("images"), a.out.join("labels"), a.out.join("plans"));
    for d in [&images, &labels, &plans] {
        create_dir(d)?;
    }
    let done: Vec<CaseRecord> = raw
        .par_iter()
        .map(|c| {
            let id = &c.record.id;
            let run = || -> Result<CaseRecord> {
                let plan = PreprocessPlan::new(c.image.dims(), c.image.spacing(), &config, padded)?;
                let out = CaseRecord {
                    id: id.clone(),
                    image: images.join(format!("{id}.mvol")),
                    label: labels.join(format!("{id}.mvol")),
                };
                write_volume(&plan.apply_image(&c.image)?, &out.image)?;
                write_volume(&plan.apply_labels(&c.labels)?, &out.label)?;
                plan.save(&plans.join(format!("{id}.plan")))?;
                Ok(out)
            };
            run().map_err(|e| error!("case `{id}`: {e:#}")).ok()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if done.is_empty() {
        bail!("all {} cases failed", manifest.len());
    }
    let failed = manifest.len() - done.len();
    if failed > 0 {
        warn!("{failed} of {} cases skipped", manifest.len());
    }
    let dims = |d: Dims| format!("{},{},{}", d.w, d.h, d.d);
    let mut kv = KeyValues::new();
    kv.set("final_dims", dims(config.final_dims))
        .set("padded_dims", dims(padded))
        .set("target_spacing", a.spacing.map(|s| s.to_string()).join(","))
        .set("median", config.median)
        .set("cases", done.len())
        .set("failed", failed);
    kv.save(&a.out.join("preprocess.txt"))?;
    CaseManifest::new(done)?.save(&a.out.join("manifest.txt"))?;
    Ok(())
}

/// Builds fresh bundles for the data's final dims; checks geometry once.
fn bundle_factory(net: &NetArgs, dims: Dims) -> Result<impl Fn(u64) -> renalseg::Result<CascadeBundle> + '_> {
    let f = net.lnet_factor;
    if f == 0 || dims.w % f != 0 || dims.h % f != 0 || dims.d % f != 0 {
        return Err(usage(format!("--lnet-factor {f} does not divide {dims}")));
    }
    let lnet_dims = Dims::new(dims.w / f, dims.h / f, dims.d / f);
    let patches = PatchConfig {
        shape: net.patch.unwrap_or(dims),
        overlap: net.overlap,
    };
    let make = move |seed: u64| {
        let mut rng = SplitMix64::seed_from_u64(seed);
        CascadeBundle::new(
            Network::new("lnet", UNetSpec::lnet(net.lnet_depth, net.lnet_base), rng.random())?,
            Network::new("wnet", UNetSpec::wnet(net.depth, net.base), rng.random())?,
            Network::new("tnet", UNetSpec::tnet(net.depth, net.base), rng.random())?,
            dims,
            lnet_dims,
            patches,
        )
    };
    make(0).map_err(|e| usage(format!("network geometry: {e}")))?;
    Ok(make)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    if let Some(v) = &a.val_manifest {
        require_file(v, "validation manifest")?;
    }
    if a.epochs == 0 {
        return Err(usage("--epochs must be at least 1"));
    }
    let adam = AdamState {
        lr: a.lr,
        l2: a.l2,
        ..AdamState::default()
    };
    adam.validate().map_err(|e| usage(e.to_string()))?;
    let config = TrainConfig {
        max_epochs: a.epochs,
        lnet_epochs: a.lnet_epochs.unwrap_or(a.epochs),
        seed: a.seed,
        adam,
        max_rotation_deg: a.rotation,
        patches_per_case: a.patches_per_case,
        ..TrainConfig::default()
    };

    let manifest = CaseManifest::load(&a.manifest)?;
    let cases = load_cases(&manifest)?;
    let Some(first) = cases.first() else {
        bail!("no cases in {}", a.manifest.display());
    };
    let dims = first.image.dims();
    let make = bundle_factory(&a.net, dims)?;
    create_dir(&a.out)?;

    if let Some(k) = a.folds {
        let split = split_folds(&manifest, k, a.seed).map_err(|e| usage(e.to_string()))?;
        let policy = ThresholdPolicy::scaled_for(dims);
        let report = cross_validate(&cases, &split, &config, &policy, make)?;
        write_text(&a.out.join("cv.csv"), &report.to_csv())?;
        let mut folds = KeyValues::new();
        for (id, f) in &split.assignment {
            folds.set(id, f);
        }
        folds.save(&a.out.join("folds.txt"))?;
        for region in [REGION_WHOLE, REGION_TUMOR, REGION_MEAN] {
            let (m, sd) = report.summary(region);
            println!("{region}: {m:.4} ± {sd:.4}");
        }
        return Ok(());
    }

    let val = match &a.val_manifest {
        Some(p) => load_cases(&CaseManifest::load(p)?)?,
        None => Vec::new(),
    };
    let outcome = train(make(a.seed)?, &cases, &val, &config)?;
    outcome.bundle.save(&a.out)?;
    write_text(&a.out.join("train_log.csv"), &epoch_log_csv(&outcome.log))?;
    write_text(&a.out.join("lnet_log.csv"), &epoch_log_csv(&outcome.lnet_log))?;
    let mut kv = KeyValues::new();
    kv.set("seed", a.seed)
        .set("cases", cases.len())
        .set("validation_cases", val.len())
        .set("epochs_run", outcome.log.len())
        .set("best_epoch", outcome.best_epoch)
        .set("lnet_epochs_run", outcome.lnet_log.len())
        .set("lnet_best_epoch", outcome.lnet_best_epoch);
    kv.save(&a.out.join("train.txt"))?;
    info!("best epoch {} of {}", outcome.best_epoch, outcome.log.len());
    Ok(())
}

const MAP_KINDS: [&str; 3] = ["whole", "tumor", "loc"];

fn map_path(dir: &Path, id: &str, kind: &str) -> PathBuf {
    dir.join(format!("{id}.{kind}.mvol"))
}

fn predict(a: PredictArgs) -> Result<()> {
    require_dir(&a.model, "model directory")?;
    require_file(&a.manifest, "manifest")?;
    let bundle = CascadeBundle::load(&a.model)?;
    let manifest = CaseManifest::load(&a.manifest)?;
    if manifest.is_empty() {
        bail!("no cases in {}", a.manifest.display());
    }
    create_dir(&a.out)?;
    manifest.cases.par_iter().try_for_each(|c| -> Result<()> {
        let image: Volume = read_volume(&c.image)?;
        let out = bundle.forward(&image).with_context(|| format!("case `{}`", c.id))?;
        for (kind, map) in MAP_KINDS.iter().zip([&out.whole, &out.tumor, &out.loc]) {
            write_volume(map.as_volume(), &map_path(&a.out, &c.id, kind))?;
        }
        Ok(())
    })
}

/// Case ids with a `<id>.whole.mvol` file in `dir`, sorted.
fn prediction_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".whole.mvol")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no predictions in {}", dir.display());
    }
    Ok(ids)
}

fn policy_for(p: &PolicyArgs, dims: Dims) -> ThresholdPolicy {
    ThresholdPolicy {
        t: p.threshold,
        whole_fallback: p.whole_fallback,
        whole_low: p.whole_low,
        tumor_empty_low: p.tumor_empty_low,
        tumor_small_low: p.tumor_small_low,
        tumor_default_low: p.tumor_default_low,
        small_cutoff: p.small_cutoff.unwrap_or(ThresholdPolicy::scaled_for(dims).small_cutoff),
        loc_threshold: p.loc_threshold,
    }
}

fn postprocess(a: PostprocessArgs) -> Result<()> {
    require_dir(&a.pred, "prediction directory")?;
    policy_for(&a.policy, Dims::new(1, 1, 1))
        .validate()
        .map_err(|e| usage(e.to_string()))?;
    let ids = prediction_ids(&a.pred)?;
    create_dir(&a.out)?;
    let policies = ids
        .par_iter()
        .map(|id| -> Result<ThresholdPolicy> {
            let [whole, tumor, loc] = MAP_KINDS.map(|k| read_prob(&map_path(&a.pred, id, k)));
            let (whole, tumor, loc) = (whole?, tumor?, loc?);
            let policy = policy_for(&a.policy, whole.dims());
            let labels = postprocess_case(&whole, &tumor, &loc, &policy).with_context(|| format!("case `{id}`"))?;
            write_volume(&labels, &a.out.join(format!("{id}.mvol")))?;
            Ok(policy)
        })
        .collect::<Result<Vec<_>>>()?;
    let p = policies[0];
    let mut kv = KeyValues::new();
    kv.set("threshold", p.t)
        .set("whole_fallback", p.whole_fallback)
        .set("whole_low", p.whole_low)
        .set("tumor_empty_low", p.tumor_empty_low)
        .set("tumor_small_low", p.tumor_small_low)
        .set("tumor_default_low", p.tumor_default_low)
        .set("small_cutoff", p.small_cutoff)
        .set("small_cutoff_scaled", a.policy.small_cutoff.is_none())
        .set("loc_threshold", p.loc_threshold)
        .set("cases", ids.len());
    kv.save(&a.out.join("postprocess.txt"))?;
    Ok(())
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    for d in &a.inputs {
        require_dir(d, "input directory")?;
    }
    let ids = prediction_ids(&a.inputs[0])?;
    create_dir(&a.out)?;
    ids.par_iter().try_for_each(|id| -> Result<()> {
        for kind in MAP_KINDS {
            let maps = a
                .inputs
                .iter()
                .map(|d| read_prob(&map_path(d, id, kind)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ProbMap> = maps.iter().collect();
            let mean = ensemble_average(&refs).with_context(|| format!("case `{id}` {kind}"))?;
            write_volume(mean.as_volume(), &map_path(&a.out, id, kind))?;
        }
        Ok(())
    })
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    require_dir(&a.pred, "prediction directory")?;
    require_file(&a.manifest, "manifest")?;
    if let Some(d) = &a.plan_dir {
        require_dir(d, "plan directory")?;
    }
    let manifest = CaseManifest::load(&a.manifest)?;
    if manifest.is_empty() {
        bail!("no cases in {}", a.manifest.display());
    }
    let rows = manifest
        .cases
        .par_iter()
        .map(|c| -> Result<Vec<MetricRow>> {
            let path = a.pred.join(format!("{}.mvol", c.id));
            if !path.is_file() {
                bail!("case `{}`: no prediction at {}", c.id, path.display());
            }
            let mut pred: LabelMap = read_volume(&path)?;
            if let Some(dir) = &a.plan_dir {
                let plan_path = dir.join(format!("{}.plan", c.id));
                let plan = PreprocessPlan::load(&plan_path)
                    .with_context(|| format!("case `{}`: plan sidecar {}", c.id, plan_path.display()))?;
                pred = plan.invert_labels(&pred)?;
            }
            let truth: LabelMap = read_volume(&c.label)?;
            let ctx = || format!("case `{}`", c.id);
            let whole = dsc(&pred.whole_mask(), &truth.whole_mask()).with_context(ctx)?;
            let tumor = dsc(&pred.tumor_mask(), &truth.tumor_mask()).with_context(ctx)?;
            let row = |region: &str, dsc: f64, both_empty: bool| MetricRow {
                case_id: c.id.clone(),
                region: region.to_string(),
                dsc,
                both_empty,
            };
            Ok(vec![
                row(REGION_WHOLE, whole.value, whole.both_empty),
                row(REGION_TUMOR, tumor.value, tumor.both_empty),
                row(
                    REGION_MEAN,
                    (whole.value + tumor.value) / 2.0,
                    whole.both_empty && tumor.both_empty,
                ),
            ])
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    write_text(&a.out, &metrics_to_csv(&rows))?;
    let mut summary = String::from("region,dsc\n");
    for region in [REGION_WHOLE, REGION_TUMOR, REGION_MEAN] {
        let vals: Vec<f64> = rows.iter().filter(|r| r.region == region).map(|r| r.dsc).collect();
        summary.push_str(&format!("{region},{}\n", vals.iter().sum::<f64>() / vals.len() as f64));
    }
    print!("{summary}");
    if let Some(p) = &a.summary {
        write_text(p, &summary)?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 || !(a.step > 0.0) || !(a.tolerance > 0.0) {
        return Err(usage("--seeds, --step and --tolerance must be positive"));
    }
    let reports = gradcheck::run_all(a.seeds, a.step)?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed(a.tolerance);
        failed += !ok as usize;
        println!(
            "{:<18} seed {:>3}  rel_err {:.3e}  checked {:>5}  skipped {:>3}  {}",
            r.name,
            r.seed,
            r.rel_err,
            r.checked,
            r.skipped,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(NumericFailure(format!("{failed} of {} gradient checks failed", reports.len())).into());
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}
