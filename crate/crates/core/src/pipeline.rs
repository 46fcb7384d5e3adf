//! Source phase, selection and the three target stages.
//!
//! The source dataset is consumed only by [`run_source_phase`]. Everything
//! after it takes a checkpoint and a reference set, never source samples.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{prepare_dataset, split_dataset, Dataset, Mask, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, EvalSummary, Stat};
use crate::projection::{latent_len, project_dataset};
use crate::reference::{kmeans_fit, KMeansConfig, ReferenceSet, DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::rng;
use crate::segmenter::{
    checkpoint, init_params, predict_dataset, predict_masks, train, train_with_validation, SegmenterParams,
    TrainConfig, TrainOutput, Validation,
};
use crate::selection::{
    select_alpha, select_beta, select_entropy, select_random, select_stdr, similarity_scores, SelectionManifest,
    Strategy,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub budget_percent: f64,
    pub strategy: Strategy,
    pub k: usize,
    pub pool_k: usize,
    pub resolution: usize,
    pub source_iters: usize,
    pub stage1_iters: usize,
    pub stage3_iters: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_power: f64,
    /// Source validation cadence, in iterations.
    pub val_every: usize,
    pub augment: bool,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
    pub semi_enabled: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            budget_percent: 20.0,
            strategy: Strategy::Stdr,
            k: DEFAULT_K,
            pool_k: 8,
            resolution: 64,
            source_iters: 2000,
            stage1_iters: 1000,
            stage3_iters: 1000,
            batch_size: 8,
            lr0: 0.03,
            decay_power: 0.9,
            val_every: 100,
            augment: true,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
            kmeans_tol: DEFAULT_TOL,
            seed: 0,
            semi_enabled: true,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_percent > 0.0 && self.budget_percent <= 100.0) {
            return Err(Error::invalid(format!(
                "budget_percent {} outside (0, 100]",
                self.budget_percent
            )));
        }
        for (name, v) in [
            ("source_iters", self.source_iters),
            ("stage1_iters", self.stage1_iters),
            ("stage3_iters", self.stage3_iters),
            ("batch_size", self.batch_size),
            ("val_every", self.val_every),
            ("k", self.k),
            ("kmeans_max_iters", self.kmeans_max_iters),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return Err(Error::invalid(format!(
                "resolution {} must be a multiple of 4 and at least 8",
                self.resolution
            )));
        }
        if self.pool_k == 0 || self.resolution % self.pool_k != 0 {
            return Err(Error::invalid(format!(
                "pool_k {} must divide resolution {}",
                self.pool_k, self.resolution
            )));
        }
        self.train_config(1, "check").validate()
    }

    /// SGD settings for one stage; each stage draws from its own stream.
    pub fn train_config(&self, iterations: usize, stage: &str) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: self.batch_size,
            lr0: self.lr0,
            decay_power: self.decay_power,
            seed: rng::derive_seed(self.seed, &[rng::label(stage)]),
            augment: self.augment,
        }
    }

    pub fn split_spec(&self, domain: &str) -> SplitSpec {
        SplitSpec::standard(rng::derive_seed(self.seed, &[rng::label("split"), rng::label(domain)]))
    }
}

/// Everything the target side is allowed to receive from the source side.
#[derive(Debug, Clone)]
pub struct SourceArtifacts {
    /// Best-validation checkpoint.
    pub params: SegmenterParams,
    pub refs: ReferenceSet,
    pub pool_k: usize,
    pub losses: Vec<f64>,
    pub validation: Vec<(usize, f64)>,
    pub best_val_dsc: f64,
    /// Validation DSC of the last iterate.
    pub final_val_dsc: f64,
    pub source_test: EvalSummary,
    pub seconds: f64,
}

impl SourceArtifacts {
    /// Writes `source.ckpt`, `refs.csv` (+ `refs.json`) and the loss trace.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.params, &dir.join("source.ckpt"))?;
        crate::reference::save_references(&self.refs, self.pool_k, seed, &dir.join("refs.csv"))?;
        write_loss_trace(&self.losses, &dir.join("source_loss.csv"))
    }
}

pub fn write_loss_trace(losses: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn evaluate_params(params: &SegmenterParams, ds: &Dataset) -> Result<EvalSummary> {
    let preds = predict_masks(params, ds)?;
    let truths = ds
        .samples()
        .iter()
        .map(|s| s.truth_or_err().cloned())
        .collect::<Result<Vec<_>>>()?;
    evaluate_dataset(&preds, &truths)
}

/// Trains on the source train split, keeps the best validation checkpoint,
/// and fits the references on the frozen model's source train projections.
pub fn run_source_phase(source: &Dataset, cfg: &AdaptationConfig) -> Result<SourceArtifacts> {
    cfg.validate()?;
    let started = Instant::now();
    let prepared = prepare_dataset(source, cfg.resolution)?;
    prepared.require_truth()?;
    let (train_ds, valid_ds, test_ds) = split_dataset(&prepared, &cfg.split_spec("source"))?;

    let init = init_params(rng::derive_seed(cfg.seed, &[rng::label("init")]));
    let tcfg = cfg.train_config(cfg.source_iters, "source");
    let out = train_with_validation(
        &init,
        &train_ds,
        &tcfg,
        Some(Validation {
            dataset: &valid_ds,
            every: cfg.val_every,
        }),
    )?;
    let final_val_dsc = out.validation.last().map_or(f64::NAN, |v| v.1);
    let (params, best_val_dsc) = out.best.clone().expect("validation always runs at the last iteration");

    let latents = project_dataset(&params, &train_ds, cfg.pool_k)?;
    let kcfg = KMeansConfig {
        k: cfg.k,
        seed: rng::derive_seed(cfg.seed, &[rng::label("kmeans")]),
        max_iters: cfg.kmeans_max_iters,
        tol: cfg.kmeans_tol,
    };
    let refs = kmeans_fit(&latents, &kcfg)?;
    let source_test = evaluate_params(&params, &test_ds)?;
    Ok(SourceArtifacts {
        params,
        refs,
        pool_k: cfg.pool_k,
        losses: out.losses,
        validation: out.validation,
        best_val_dsc,
        final_val_dsc,
        source_test,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Hands out ground truth one id at a time and counts every mask released.
#[derive(Debug)]
pub struct LabelOracle {
    truths: HashMap<String, Mask>,
    revealed: usize,
}

impl LabelOracle {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let truths = ds
            .samples()
            .iter()
            .map(|s| Ok((s.id.clone(), s.truth_or_err()?.clone())))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(LabelOracle { truths, revealed: 0 })
    }

    pub fn reveal(&mut self, id: &str) -> Result<Mask> {
        let m = self
            .truths
            .get(id)
            .cloned()
            .ok_or_else(|| Error::MissingTruth(id.to_string()))?;
        self.revealed += 1;
        Ok(m)
    }

    pub fn revealed(&self) -> usize {
        self.revealed
    }
}

fn clamp_batch(cfg: &TrainConfig, n: usize) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.batch_size.min(n),
        ..*cfg
    }
}

/// Fine-tunes on the annotated manifest samples only.
pub fn stage1_finetune(
    params: &SegmenterParams,
    labeled: &Dataset,
    manifest: &SelectionManifest,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    if manifest.is_empty() {
        return Err(Error::invalid("selection manifest is empty"));
    }
    let samples = manifest
        .all_ids()
        .iter()
        .map(|id| {
            let s = labeled.get(id).ok_or_else(|| Error::MissingTruth(id.clone()))?;
            s.truth_or_err()?;
            Ok(s.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset::new(format!("{}-labeled", labeled.name()), samples)?;
    train(params, &ds, &clamp_batch(cfg, ds.len()))
}

/// Argmax masks of the frozen fine-tuned model for every unlabeled sample.
pub fn stage2_pseudolabel(params: &SegmenterParams, unlabeled: &Dataset) -> Result<Vec<(String, Mask)>> {
    let masks = predict_masks(params, unlabeled)?;
    Ok(unlabeled.ids().into_iter().zip(masks).collect())
}

/// Attaches pseudo-labels to their images.
pub fn pseudo_samples(unlabeled: &Dataset, pseudo: &[(String, Mask)]) -> Result<Vec<Sample>> {
    pseudo
        .iter()
        .map(|(id, m)| {
            let s = unlabeled
                .get(id)
                .ok_or_else(|| Error::invalid(format!("pseudo-label for unknown sample `{id}`")))?;
            Sample::new(id.clone(), s.image.clone(), Some(m.clone()), s.domain.clone())
        })
        .collect()
}

/// Joint training over labeled and pseudo-labeled samples with the same loss.
pub fn stage3_joint(
    params: &SegmenterParams,
    labeled: &Dataset,
    pseudo: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    labeled.require_truth()?;
    let ids: HashSet<&str> = labeled.samples().iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = pseudo.iter().find(|s| ids.contains(s.id.as_str())) {
        return Err(Error::invalid(format!(
            "sample `{}` is both labeled and pseudo-labeled",
            s.id
        )));
    }
    let mut samples = labeled.samples().to_vec();
    samples.extend(pseudo.iter().cloned());
    let ds = Dataset::new(format!("{}-joint", labeled.name()), samples)?;
    train(params, &ds, &clamp_batch(cfg, ds.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub checkpoint: String,
    pub dsc: Stat,
    pub hd95: Stat,
    pub asd: Stat,
}

impl CheckpointMetrics {
    pub fn from_summary(name: &str, s: &EvalSummary) -> Self {
        CheckpointMetrics {
            checkpoint: name.to_string(),
            dsc: s.dsc,
            hd95: s.hd95,
            asd: s.asd,
        }
    }
}

pub const CKPT_SOURCE_ONLY: &str = "source-only";
pub const CKPT_STAGE1: &str = "stage1";
pub const CKPT_STAGE3: &str = "stage3";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub target: String,
    pub config: AdaptationConfig,
    pub manifest: SelectionManifest,
    /// Ground-truth masks read during adaptation.
    pub labels_revealed: usize,
    /// Target test-split metrics per checkpoint, in pipeline order.
    pub checkpoints: Vec<CheckpointMetrics>,
    pub stage1_losses: Vec<f64>,
    pub stage3_losses: Option<Vec<f64>>,
    pub stage_seconds: Vec<(String, f64)>,
    #[serde(skip)]
    pub params: Vec<(String, SegmenterParams)>,
}

impl RunReport {
    pub fn metrics(&self, checkpoint: &str) -> Option<&CheckpointMetrics> {
        self.checkpoints.iter().find(|c| c.checkpoint == checkpoint)
    }

    /// Checkpoint, report JSON, metrics CSV, manifest and loss traces.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, p) in &self.params {
            checkpoint::save(p, &dir.join(format!("{name}.ckpt")))?;
        }
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let path = dir.join("report.json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("metrics.csv");
        std::fs::write(&path, metrics_csv(&self.checkpoints)).map_err(|e| Error::io(&path, e))?;
        self.manifest.save(&dir.join("manifest.json"))?;
        write_loss_trace(&self.stage1_losses, &dir.join("stage1_loss.csv"))?;
        if let Some(l) = &self.stage3_losses {
            write_loss_trace(l, &dir.join("stage3_loss.csv"))?;
        }
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "checkpoint,DSC_mean,DSC_std,HD95_mean,HD95_std,ASD_mean,ASD_std";

pub fn fmt_stat(s: &Stat) -> String {
    format!("{:.4},{:.4}", s.mean, s.std)
}

pub fn metrics_csv(rows: &[CheckpointMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.checkpoint,
            fmt_stat(&r.dsc),
            fmt_stat(&r.hd95),
            fmt_stat(&r.asd)
        ));
    }
    out
}

/// Runs `strategy` over an already prepared, label-free pool.
pub fn select_pool(
    strategy: Strategy,
    params: &SegmenterParams,
    refs: &ReferenceSet,
    pool: &Dataset,
    cfg: &AdaptationConfig,
) -> Result<SelectionManifest> {
    let seed = rng::derive_seed(cfg.seed, &[rng::label("select")]);
    let mut m = match strategy {
        Strategy::Stdr | Strategy::Alpha | Strategy::Beta => {
            let (h, w) = pool.shape();
            if latent_len(h, w, cfg.pool_k) != refs.dim() {
                return Err(Error::invalid(format!(
                    "reference length {} does not match latent length {} for pool_k {}",
                    refs.dim(),
                    latent_len(h, w, cfg.pool_k),
                    cfg.pool_k
                )));
            }
            let scores = similarity_scores(&project_dataset(params, pool, cfg.pool_k)?, refs)?;
            match strategy {
                Strategy::Stdr => select_stdr(&scores, cfg.budget_percent, seed)?,
                Strategy::Alpha => select_alpha(&scores, cfg.budget_percent)?,
                _ => select_beta(&scores, cfg.budget_percent)?,
            }
        }
        Strategy::Random => select_random(&pool.ids(), cfg.budget_percent, seed)?,
        Strategy::Entropy => select_entropy(&pool.ids(), &predict_dataset(params, pool)?, cfg.budget_percent)?,
    };
    m.seed = cfg.seed;
    Ok(m)
}

/// Selection on a raw target dataset: the same preparation and split as
/// `adapt`, ground truth dropped before scoring.
pub fn select_target(
    source_params: &SegmenterParams,
    refs: &ReferenceSet,
    target: &Dataset,
    cfg: &AdaptationConfig,
) -> Result<SelectionManifest> {
    cfg.validate()?;
    let prepared = prepare_dataset(target, cfg.resolution)?;
    let (train_ds, _, _) = split_dataset(&prepared, &cfg.split_spec("target"))?;
    select_pool(cfg.strategy, source_params, refs, &train_ds.without_truth(), cfg)
}

fn timed<T>(times: &mut Vec<(String, f64)>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    times.push((stage.to_string(), t.elapsed().as_secs_f64()));
    Ok(out)
}

/// Target side of the workflow. Receives only the frozen source checkpoint
/// and the reference set; ground truth of the target train split is read
/// strictly through the label oracle, for manifest ids only.
pub fn adapt(
    source_params: &SegmenterParams,
    refs: &ReferenceSet,
    target: &Dataset,
    cfg: &AdaptationConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    let mut times = Vec::new();
    let (pool, mut oracle, test_ds) = timed(&mut times, "prepare", || {
        let prepared = prepare_dataset(target, cfg.resolution)?;
        let (train_ds, _valid, test_ds) = split_dataset(&prepared, &cfg.split_spec("target"))?;
        test_ds.require_truth()?;
        Ok((train_ds.without_truth(), LabelOracle::new(&train_ds)?, test_ds))
    })?;

    let source_only = timed(&mut times, "source-only", || evaluate_params(source_params, &test_ds))?;
    let manifest = timed(&mut times, "select", || select_pool(cfg.strategy, source_params, refs, &pool, cfg))?;

    let labeled = timed(&mut times, "reveal", || {
        let samples = manifest
            .all_ids()
            .iter()
            .map(|id| {
                let s = pool
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("manifest id `{id}` not in target pool")))?;
                Sample::new(id.clone(), s.image.clone(), Some(oracle.reveal(id)?), s.domain.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(format!("{}-labeled", target.name()), samples)
    })?;

    let s1 = timed(&mut times, "stage1", || {
        stage1_finetune(source_params, &labeled, &manifest, &cfg.train_config(cfg.stage1_iters, "stage1"))
    })?;
    let s1_eval = timed(&mut times, "stage1-eval", || evaluate_params(&s1.params, &test_ds))?;

    let mut checkpoints = vec![
        CheckpointMetrics::from_summary(CKPT_SOURCE_ONLY, &source_only),
        CheckpointMetrics::from_summary(CKPT_STAGE1, &s1_eval),
    ];
    let mut params = vec![(CKPT_STAGE1.to_string(), s1.params.clone())];
    let mut stage3_losses = None;

    if cfg.semi_enabled {
        let chosen: HashSet<String> = manifest.all_ids().into_iter().collect();
        let pseudo = timed(&mut times, "stage2", || {
            let rest: Vec<Sample> = pool
                .samples()
                .iter()
                .filter(|s| !chosen.contains(&s.id))
                .cloned()
                .collect();
            if rest.is_empty() {
                return Ok(Vec::new());
            }
            let unlabeled = Dataset::new(format!("{}-unlabeled", target.name()), rest)?;
            pseudo_samples(&unlabeled, &stage2_pseudolabel(&s1.params, &unlabeled)?)
        })?;
        let s3 = timed(&mut times, "stage3", || {
            stage3_joint(&s1.params, &labeled, &pseudo, &cfg.train_config(cfg.stage3_iters, "stage3"))
        })?;
        let s3_eval = timed(&mut times, "stage3-eval", || evaluate_params(&s3.params, &test_ds))?;
        checkpoints.push(CheckpointMetrics::from_summary(CKPT_STAGE3, &s3_eval));
        params.push((CKPT_STAGE3.to_string(), s3.params));
        stage3_losses = Some(s3.losses);
    }

    if oracle.revealed() != manifest.len() {
        return Err(Error::invalid(format!(
            "{} labels revealed for a manifest of {}",
            oracle.revealed(),
            manifest.len()
        )));
    }
    Ok(RunReport {
        target: target.name().to_string(),
        config: *cfg,
        manifest,
        labels_revealed: oracle.revealed(),
        checkpoints,
        stage1_losses: s1.losses,
        stage3_losses,
        stage_seconds: times,
        params,
    })
}

/// Source phase followed by adaptation.
pub fn run_sfada(source: &Dataset, target: &Dataset, cfg: &AdaptationConfig) -> Result<(SourceArtifacts, RunReport)> {
    let art = run_source_phase(source, cfg).map_err(|e| e.in_stage("source"))?;
    let report = adapt(&art.params, &art.refs, target, cfg)?;
    Ok((art, report))
}
