//! Experiment matrix: transfer, strategy comparison, ablation and budget
//! sweep tables over several seeds, with a per-seed source checkpoint cache.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_bool, parse_list, parse_value, unknown_key, Entry, GlobalConfig};
use crate::data::{prepare_dataset, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::io::load_dataset;
use crate::metrics::Stat;
use crate::pipeline::{
    adapt, evaluate_params, fmt_stat, run_source_phase, AdaptationConfig, CheckpointMetrics, CKPT_SOURCE_ONLY,
    CKPT_STAGE1, CKPT_STAGE3,
};
use crate::reference::{load_references, save_references, ReferenceSet};
use crate::segmenter::{checkpoint, SegmenterParams};
use crate::selection::Strategy;
use crate::synth::{benchmark_presets, generate_domain, SynthConfig, BENCHMARK_SIDE};

/// One column of the comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowKind {
    SourceOnly,
    Select(Strategy),
    StdrSemi,
}

impl RowKind {
    pub fn label(self) -> String {
        match self {
            RowKind::SourceOnly => "source-only".into(),
            RowKind::Select(s) => s.name().into(),
            RowKind::StdrSemi => "stdr+semi".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "source-only" => Ok(RowKind::SourceOnly),
            "stdr+semi" => Ok(RowKind::StdrSemi),
            other => other
                .parse::<Strategy>()
                .map(RowKind::Select)
                .map_err(|_| Error::Config(format!("unknown row `{s}`"))),
        }
    }

    fn in_strategy_table(self) -> bool {
        matches!(
            self,
            RowKind::SourceOnly | RowKind::Select(Strategy::Random | Strategy::Entropy | Strategy::Stdr)
        )
    }

    fn in_ablation_table(self) -> bool {
        matches!(
            self,
            RowKind::Select(Strategy::Alpha | Strategy::Beta | Strategy::Stdr) | RowKind::StdrSemi
        )
    }
}

pub const DEFAULT_ROWS: [RowKind; 7] = [
    RowKind::SourceOnly,
    RowKind::Select(Strategy::Random),
    RowKind::Select(Strategy::Entropy),
    RowKind::Select(Strategy::Alpha),
    RowKind::Select(Strategy::Beta),
    RowKind::Select(Strategy::Stdr),
    RowKind::StdrSemi,
];

/// Where the benchmark domains come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// Generated in memory; `sizes` overrides the (source, targetA, targetB) counts.
    Synthetic { seed: u64, sizes: Option<[usize; 3]> },
    /// A directory holding `source/` plus one subdirectory per target.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMatrix {
    pub targets: Vec<String>,
    pub rows: Vec<RowKind>,
    pub seeds: Vec<u64>,
    pub budget_percents: Vec<f64>,
    pub budget_targets: Vec<String>,
    pub base: AdaptationConfig,
}

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("matrix needs at least one seed".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("matrix needs at least one target".into()));
        }
        if let Some(p) = self.budget_percents.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
            return Err(Error::Config(format!("budget percent {p} outside (0, 100]")));
        }
        if let Some(t) = self.budget_targets.iter().find(|t| !self.targets.contains(t)) {
            return Err(Error::Config(format!("budget target `{t}` is not one of the targets")));
        }
        self.base.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub data: DataSpec,
    pub matrix: ExperimentMatrix,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            data: DataSpec::Synthetic { seed: 0, sizes: None },
            matrix: ExperimentMatrix {
                targets: vec!["targetA".into(), "targetB".into()],
                rows: DEFAULT_ROWS.to_vec(),
                seeds: vec![0, 1, 2],
                budget_percents: vec![10.0, 20.0, 40.0, 60.0, 80.0, 100.0],
                budget_targets: vec!["targetA".into()],
                base: AdaptationConfig::default(),
            },
        }
    }
}

impl BenchConfig {
    /// Bench keys plus any global hyperparameter; anything else is rejected.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = BenchConfig::default();
        let mut global = GlobalConfig { adapt: cfg.matrix.base };
        let mut synth_seed = 0;
        let mut sizes = None;
        let mut dir = None;
        for e in entries {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "data" => {
                    dir = match v {
                        "synthetic" => None,
                        path => Some(PathBuf::from(path)),
                    }
                }
                "synth_seed" => synth_seed = parse_value(k, v)?,
                "synth_sizes" => {
                    let s: Vec<usize> = parse_list(k, v)?;
                    let arr: [usize; 3] = s
                        .try_into()
                        .map_err(|_| Error::Config("synth_sizes needs three counts".into()))?;
                    sizes = Some(arr);
                }
                "targets" => cfg.matrix.targets = parse_list(k, v)?,
                "rows" => {
                    cfg.matrix.rows = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(RowKind::parse)
                        .collect::<Result<_>>()?
                }
                "seeds" => cfg.matrix.seeds = parse_list(k, v)?,
                "budget_percents" => cfg.matrix.budget_percents = parse_list(k, v)?,
                "budget_targets" => cfg.matrix.budget_targets = parse_list(k, v)?,
                "budget_sweep" => {
                    if !parse_bool(k, v)? {
                        cfg.matrix.budget_percents.clear();
                    }
                }
                _ => {
                    if !global.apply(k, v)? {
                        return Err(unknown_key(e));
                    }
                }
            }
        }
        cfg.matrix.base = global.adapt;
        cfg.data = match dir {
            Some(d) => DataSpec::Directory(d),
            None => DataSpec::Synthetic { seed: synth_seed, sizes },
        };
        cfg.matrix.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        let m = &self.matrix;
        let mut s = String::new();
        match &self.data {
            DataSpec::Synthetic { seed, sizes } => {
                let _ = writeln!(s, "data = synthetic\nsynth_seed = {seed}");
                if let Some([a, b, c]) = sizes {
                    let _ = writeln!(s, "synth_sizes = {a},{b},{c}");
                }
            }
            DataSpec::Directory(d) => {
                let _ = writeln!(s, "data = {}", d.display());
            }
        }
        let join = |v: Vec<String>| v.join(",");
        let _ = writeln!(s, "targets = {}", m.targets.join(","));
        let _ = writeln!(s, "rows = {}", join(m.rows.iter().map(|r| r.label()).collect()));
        let _ = writeln!(s, "seeds = {}", join(m.seeds.iter().map(u64::to_string).collect()));
        if m.budget_percents.is_empty() {
            let _ = writeln!(s, "budget_sweep = false");
        } else {
            let _ = writeln!(s, "budget_percents = {}", join(m.budget_percents.iter().map(f64::to_string).collect()));
            let _ = writeln!(s, "budget_targets = {}", m.budget_targets.join(","));
        }
        s.push_str(&GlobalConfig { adapt: m.base }.render());
        s
    }
}

/// Source dataset plus named targets.
pub struct BenchData {
    pub source: Dataset,
    pub targets: Vec<Dataset>,
}

pub fn load_bench_data(spec: &DataSpec, targets: &[String]) -> Result<BenchData> {
    match spec {
        DataSpec::Synthetic { seed, sizes } => {
            let mut domains = Vec::new();
            for (i, (name, n, style)) in benchmark_presets().into_iter().enumerate() {
                let n = sizes.map_or(n, |s| s[i]);
                let cfg = SynthConfig::new(
                    name,
                    n,
                    BENCHMARK_SIDE,
                    style,
                    crate::rng::derive_seed(*seed, &[crate::rng::label(name)]),
                );
                domains.push(generate_domain(&cfg)?);
            }
            let source = domains.remove(0);
            let targets = targets
                .iter()
                .map(|t| {
                    domains
                        .iter()
                        .find(|d| d.name() == t)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("unknown synthetic target `{t}`")))
                })
                .collect::<Result<_>>()?;
            Ok(BenchData { source, targets })
        }
        DataSpec::Directory(dir) => Ok(BenchData {
            source: load_dataset(&dir.join("source"))?,
            targets: targets
                .iter()
                .map(|t| load_dataset(&dir.join(t)))
                .collect::<Result<_>>()?,
        }),
    }
}

/// Content hash of a dataset: ids, pixels, masks and domains.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(ds.name().as_bytes());
    for s in ds.samples() {
        h.update(s.id.as_bytes());
        h.update(s.domain.as_bytes());
        for p in s.image.pixels() {
            h.update(p.to_le_bytes());
        }
        match &s.truth {
            Some(m) => h.update(m.labels()),
            None => h.update(b"-"),
        }
    }
    hex::encode(h.finalize())
}

fn source_cache_key(fingerprint: &str, cfg: &AdaptationConfig) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(fingerprint.as_bytes());
    let fields = format!(
        "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
        cfg.resolution,
        cfg.pool_k,
        cfg.k,
        cfg.source_iters,
        cfg.batch_size,
        cfg.lr0,
        cfg.decay_power,
        cfg.val_every,
        cfg.augment,
        cfg.kmeans_max_iters,
        cfg.kmeans_tol,
        cfg.seed
    );
    h.update(fields.as_bytes());
    hex::encode(h.finalize())
}

/// What the matrix keeps from a source phase.
#[derive(Debug, Clone)]
pub struct SourceBundle {
    pub params: SegmenterParams,
    pub refs: ReferenceSet,
    pub source_test: CheckpointMetrics,
}

#[derive(Serialize, Deserialize)]
struct CacheSummary {
    key: String,
    source_test: CheckpointMetrics,
}

/// Loads the cached source phase for `cfg.seed` or runs it and stores it.
/// Returns whether training ran.
pub fn cached_source_phase(source: &Dataset, cfg: &AdaptationConfig, dir: &Path) -> Result<(SourceBundle, bool)> {
    let key = source_cache_key(&dataset_fingerprint(source), cfg);
    let summary_path = dir.join("source_summary.json");
    if let Ok(text) = std::fs::read_to_string(&summary_path) {
        if let Ok(sum) = serde_json::from_str::<CacheSummary>(&text) {
            if sum.key == key {
                let params = checkpoint::load(&dir.join("source.ckpt"))?;
                let (refs, _) = load_references(&dir.join("refs.csv"))?;
                log::info!("source cache hit: {}", dir.display());
                return Ok((
                    SourceBundle {
                        params,
                        refs,
                        source_test: sum.source_test,
                    },
                    false,
                ));
            }
        }
    }
    let art = run_source_phase(source, cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&art.params, &dir.join("source.ckpt"))?;
    save_references(&art.refs, art.pool_k, cfg.seed, &dir.join("refs.csv"))?;
    let source_test = CheckpointMetrics {
        checkpoint: CKPT_SOURCE_ONLY.into(),
        dsc: art.source_test.dsc,
        hd95: art.source_test.hd95,
        asd: art.source_test.asd,
    };
    let sum = CacheSummary {
        key,
        source_test: source_test.clone(),
    };
    let json = serde_json::to_string_pretty(&sum).expect("summary serializes");
    std::fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))?;
    Ok((
        SourceBundle {
            params: art.params,
            refs: art.refs,
            source_test,
        },
        true,
    ))
}

/// Source-model metrics on a target's test split.
pub fn source_only_metrics(params: &SegmenterParams, target: &Dataset, cfg: &AdaptationConfig) -> Result<CheckpointMetrics> {
    let prepared = prepare_dataset(target, cfg.resolution)?;
    let (_, _, test) = split_dataset(&prepared, &cfg.split_spec("target"))?;
    let s = evaluate_params(params, &test)?;
    Ok(CheckpointMetrics {
        checkpoint: CKPT_SOURCE_ONLY.into(),
        dsc: s.dsc,
        hd95: s.hd95,
        asd: s.asd,
    })
}

/// One seed's result for one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub table: String,
    pub setting: String,
    pub row: String,
    pub seed: u64,
    pub metrics: CheckpointMetrics,
}

#[derive(Debug, Clone, Default)]
pub struct MatrixOutcome {
    pub results: Vec<SeedResult>,
    pub source_trainings: usize,
    pub files: Vec<PathBuf>,
    pub failures: Vec<String>,
}

impl MatrixOutcome {
    /// Mean over seeds of the per-run test DSC mean.
    pub fn mean_dsc(&self, table: &str, setting: &str, row: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.table == table && r.setting == setting && r.row == row)
            .map(|r| r.metrics.dsc.mean)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub const TABLE_TRANSFER: &str = "transfer";
pub const TABLE_STRATEGIES: &str = "strategies";
pub const TABLE_ABLATION: &str = "ablation";
pub const TABLE_BUDGET: &str = "budget";

fn budget_key(p: f64) -> String {
    format!("{p}")
}

/// Runs the matrix, writing tables, summary and hash manifest under `out`.
/// Row failures are recorded and reported after every other row ran.
pub fn run_matrix(matrix: &ExperimentMatrix, data: &BenchData, out: &Path) -> Result<MatrixOutcome> {
    matrix.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut outcome = MatrixOutcome::default();
    let mut first_error: Option<Error> = None;

    for &seed in &matrix.seeds {
        let cfg = AdaptationConfig { seed, ..matrix.base };
        let cache_dir = out.join("cache").join(format!("source-seed{seed}"));
        let bundle = match cached_source_phase(&data.source, &cfg, &cache_dir) {
            Ok((b, trained)) => {
                outcome.source_trainings += trained as usize;
                b
            }
            Err(e) => {
                outcome.failures.push(format!("source seed {seed}: {e}"));
                first_error.get_or_insert(e.in_stage(&format!("source seed {seed}")));
                continue;
            }
        };
        outcome.results.push(SeedResult {
            table: TABLE_TRANSFER.into(),
            setting: "source->source".into(),
            row: "source-only".into(),
            seed,
            metrics: bundle.source_test.clone(),
        });

        // stage-1 metrics of STDR runs, reused by the budget sweep
        let mut stdr_stage1: HashMap<(String, String), CheckpointMetrics> = HashMap::new();
        for target in &data.targets {
            let setting = format!("source->{}", target.name());
            let r = run_target_rows(matrix, &bundle, target, &cfg, out, &mut stdr_stage1);
            match r {
                Ok(rows) => outcome.results.extend(rows.into_iter().map(|(table, row, metrics)| SeedResult {
                    table,
                    setting: setting.clone(),
                    row,
                    seed,
                    metrics,
                })),
                Err(e) => {
                    outcome.failures.push(format!("{setting} seed {seed}: {e}"));
                    first_error.get_or_insert(e.in_stage(&format!("{setting} seed {seed}")));
                }
            }
            if !matrix.budget_targets.iter().any(|t| t == target.name()) {
                continue;
            }
            for &p in &matrix.budget_percents {
                let key = (target.name().to_string(), budget_key(p));
                let metrics = match stdr_stage1.get(&key) {
                    Some(m) => Ok(m.clone()),
                    None => {
                        let c = AdaptationConfig {
                            strategy: Strategy::Stdr,
                            semi_enabled: false,
                            budget_percent: p,
                            ..cfg
                        };
                        adapt(&bundle.params, &bundle.refs, target, &c)
                            .and_then(|rep| {
                                rep.write(&run_dir(out, target.name(), &format!("budget-{p}"), seed))?;
                                Ok(rep)
                            })
                            .map(|rep| rep.metrics(CKPT_STAGE1).cloned().expect("stage1 always reported"))
                    }
                };
                match metrics {
                    Ok(m) => outcome.results.push(SeedResult {
                        table: TABLE_BUDGET.into(),
                        setting: setting.clone(),
                        row: budget_key(p),
                        seed,
                        metrics: m,
                    }),
                    Err(e) => {
                        outcome.failures.push(format!("{setting} budget {p} seed {seed}: {e}"));
                        first_error.get_or_insert(e.in_stage(&format!("{setting} budget {p} seed {seed}")));
                    }
                }
            }
        }
    }

    write_tables(matrix, &outcome, out)?;
    outcome.files = write_hash_manifest(out)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

fn run_dir(out: &Path, target: &str, label: &str, seed: u64) -> PathBuf {
    out.join("runs").join(target).join(label).join(format!("seed{seed}"))
}

type RowOutput = (String, String, CheckpointMetrics);

fn run_target_rows(
    matrix: &ExperimentMatrix,
    bundle: &SourceBundle,
    target: &Dataset,
    cfg: &AdaptationConfig,
    out: &Path,
    stdr_stage1: &mut HashMap<(String, String), CheckpointMetrics>,
) -> Result<Vec<RowOutput>> {
    let mut rows = Vec::new();
    let mut push = |kind: RowKind, m: &CheckpointMetrics| {
        if kind == RowKind::SourceOnly {
            rows.push((TABLE_TRANSFER.to_string(), kind.label(), m.clone()));
        }
        if kind.in_strategy_table() {
            rows.push((TABLE_STRATEGIES.to_string(), kind.label(), m.clone()));
        }
        if kind.in_ablation_table() {
            rows.push((TABLE_ABLATION.to_string(), kind.label(), m.clone()));
        }
    };

    if matrix.rows.contains(&RowKind::SourceOnly) {
        push(RowKind::SourceOnly, &source_only_metrics(&bundle.params, target, cfg)?);
    }
    let want_semi = matrix.rows.contains(&RowKind::StdrSemi);
    for &kind in &matrix.rows {
        let strategy = match kind {
            RowKind::SourceOnly => continue,
            // covered by the semi run below when both rows are requested
            RowKind::Select(Strategy::Stdr) if want_semi => continue,
            RowKind::Select(s) => s,
            RowKind::StdrSemi => Strategy::Stdr,
        };
        let semi = kind == RowKind::StdrSemi;
        let c = AdaptationConfig {
            strategy,
            semi_enabled: semi,
            ..*cfg
        };
        let label = if semi { "stdr-semi".to_string() } else { strategy.name().to_string() };
        let rep = adapt(&bundle.params, &bundle.refs, target, &c)?;
        rep.write(&run_dir(out, target.name(), &label, cfg.seed))?;
        let s1 = rep.metrics(CKPT_STAGE1).expect("stage1 always reported");
        if strategy == Strategy::Stdr {
            stdr_stage1.insert((target.name().to_string(), budget_key(c.budget_percent)), s1.clone());
        }
        if semi {
            // with identical seeds the stage-1 model of a semi run is the STDR model
            if matrix.rows.contains(&RowKind::Select(Strategy::Stdr)) {
                push(RowKind::Select(Strategy::Stdr), s1);
            }
            push(RowKind::StdrSemi, rep.metrics(CKPT_STAGE3).expect("semi run reports stage3"));
        } else {
            push(kind, s1);
        }
    }
    Ok(rows)
}

/// Aggregate over seeds: means of per-run mean and std, plus the spread of
/// the per-run DSC means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedAggregate {
    pub n: usize,
    pub dsc: (f64, f64),
    pub hd95: (f64, f64),
    pub asd: (f64, f64),
    pub dsc_seed_std: f64,
}

pub fn aggregate(results: &[&SeedResult]) -> SeedAggregate {
    let n = results.len() as f64;
    let mean_of = |f: &dyn Fn(&CheckpointMetrics) -> f64| results.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let dsc_mean = mean_of(&|m| m.dsc.mean);
    let spread = (results.iter().map(|r| (r.metrics.dsc.mean - dsc_mean).powi(2)).sum::<f64>() / n).sqrt();
    SeedAggregate {
        n: results.len(),
        dsc: (dsc_mean, mean_of(&|m| m.dsc.std)),
        hd95: (mean_of(&|m| m.hd95.mean), mean_of(&|m| m.hd95.std)),
        asd: (mean_of(&|m| m.asd.mean), mean_of(&|m| m.asd.std)),
        dsc_seed_std: spread,
    }
}

const AGG_HEADER: &str = "seeds,DSC_mean,DSC_std,HD95_mean,HD95_std,ASD_mean,ASD_std,DSC_seed_std";

fn agg_cells(a: &SeedAggregate) -> String {
    let st = |(m, s): (f64, f64)| fmt_stat(&Stat { mean: m, std: s, count: 0, undefined: 0 });
    format!("{},{},{},{},{:.4}", a.n, st(a.dsc), st(a.hd95), st(a.asd), a.dsc_seed_std)
}

/// (setting, row) groups of one table in first-seen order.
fn grouped<'a>(outcome: &'a MatrixOutcome, table: &str) -> Vec<((String, String), Vec<&'a SeedResult>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<&SeedResult>> = HashMap::new();
    for r in outcome.results.iter().filter(|r| r.table == table) {
        let key = (r.setting.clone(), r.row.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let v = groups.remove(&k).expect("group exists");
            (k, v)
        })
        .collect()
}

pub fn table_csv(outcome: &MatrixOutcome, table: &str) -> String {
    let first = if table == TABLE_BUDGET { "budget_percent" } else { "row" };
    let mut s = format!("setting,{first},{AGG_HEADER}\n");
    for ((setting, row), rs) in grouped(outcome, table) {
        let _ = writeln!(s, "{setting},{row},{}", agg_cells(&aggregate(&rs)));
    }
    s
}

/// Every per-seed result, one row each.
pub fn runs_csv(outcome: &MatrixOutcome) -> String {
    let mut s = String::from("table,setting,row,seed,DSC_mean,DSC_std,HD95_mean,HD95_std,ASD_mean,ASD_std\n");
    for r in &outcome.results {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.table,
            r.setting,
            r.row,
            r.seed,
            fmt_stat(&m.dsc),
            fmt_stat(&m.hd95),
            fmt_stat(&m.asd)
        );
    }
    s
}

const EXPECTED_ORDERINGS: [(&str, &str); 3] = [
    (TABLE_STRATEGIES, "stdr > entropy, random > source-only"),
    (TABLE_ABLATION, "stdr+semi > stdr > beta > alpha"),
    (TABLE_BUDGET, "DSC non-decreasing in budget"),
];

pub fn summary_markdown(matrix: &ExperimentMatrix, outcome: &MatrixOutcome) -> String {
    let mut s = String::from("# Benchmark summary\n\n");
    let _ = writeln!(
        s,
        "Seeds: {}. DSC in percent, HD95/ASD in pixels; mean ± std are averaged over seeds.\n",
        matrix.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
    );
    for table in [TABLE_TRANSFER, TABLE_STRATEGIES, TABLE_ABLATION, TABLE_BUDGET] {
        let groups = grouped(outcome, table);
        if groups.is_empty() {
            continue;
        }
        let _ = writeln!(s, "## {table}\n");
        let _ = writeln!(s, "| setting | row | DSC (%) | HD95 | ASD | seed spread |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for ((setting, row), rs) in &groups {
            let a = aggregate(rs);
            let _ = writeln!(
                s,
                "| {setting} | {row} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} |",
                a.dsc.0, a.dsc.1, a.hd95.0, a.hd95.1, a.asd.0, a.asd.1, a.dsc_seed_std
            );
        }
        if let Some((_, expected)) = EXPECTED_ORDERINGS.iter().find(|(t, _)| *t == table) {
            let _ = writeln!(s, "\nExpected ordering: {expected}.\n");
            let mut by_setting: BTreeMap<&str, Vec<(f64, &str)>> = BTreeMap::new();
            for ((setting, row), rs) in &groups {
                by_setting.entry(setting).or_default().push((aggregate(rs).dsc.0, row));
            }
            for (setting, mut rows) in by_setting {
                if table == TABLE_BUDGET {
                    rows.sort_by(|a, b| {
                        a.1.parse::<f64>().unwrap_or(0.0).total_cmp(&b.1.parse::<f64>().unwrap_or(0.0))
                    });
                } else {
                    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
                }
                let sep = if table == TABLE_BUDGET { " → " } else { " > " };
                let observed: Vec<String> = rows.iter().map(|(d, r)| format!("{r} ({d:.2})")).collect();
                let _ = writeln!(s, "Observed on {setting}: {}.", observed.join(sep));
            }
            s.push('\n');
        } else {
            s.push('\n');
        }
    }
    if !outcome.failures.is_empty() {
        let _ = writeln!(s, "## Failures\n");
        for f in &outcome.failures {
            let _ = writeln!(s, "- {f}");
        }
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_tables(matrix: &ExperimentMatrix, outcome: &MatrixOutcome, out: &Path) -> Result<()> {
    for table in [TABLE_TRANSFER, TABLE_STRATEGIES, TABLE_ABLATION, TABLE_BUDGET] {
        if outcome.results.iter().any(|r| r.table == table) {
            write_file(&out.join(format!("{table}.csv")), &table_csv(outcome, table))?;
        }
    }
    write_file(&out.join("runs.csv"), &runs_csv(outcome))?;
    write_file(&out.join("summary.md"), &summary_markdown(matrix, outcome))
}

pub const HASH_MANIFEST: &str = "manifest.json";

/// sha256 of every file under `out` (except the manifest itself), keyed by
/// relative path.
pub fn write_hash_manifest(out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.retain(|p| p != Path::new(HASH_MANIFEST));
    files.sort();
    let mut map = BTreeMap::new();
    for rel in &files {
        let path = out.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        map.insert(rel.to_string_lossy().replace('\\', "/"), hex::encode(Sha256::digest(&bytes)));
    }
    let json = serde_json::to_string_pretty(&serde_json::json!({ "sha256": map })).expect("manifest serializes");
    write_file(&out.join(HASH_MANIFEST), &json)?;
    Ok(files)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// STDR fine-tuning (no pseudo-labels) at each budget, for each seed; one
/// CSV row per percent.
pub fn budget_sweep(
    source: &Dataset,
    target: &Dataset,
    percents: &[f64],
    seeds: &[u64],
    base: &AdaptationConfig,
) -> Result<String> {
    if seeds.is_empty() || percents.is_empty() {
        return Err(Error::invalid("budget sweep needs seeds and percents"));
    }
    if let Some(p) = percents.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
        return Err(Error::invalid(format!("budget percent {p} outside (0, 100]")));
    }
    let mut outcome = MatrixOutcome::default();
    for &seed in seeds {
        let cfg = AdaptationConfig { seed, ..*base };
        let art = run_source_phase(source, &cfg)?;
        for &p in percents {
            let c = AdaptationConfig {
                strategy: Strategy::Stdr,
                semi_enabled: false,
                budget_percent: p,
                ..cfg
            };
            let rep = adapt(&art.params, &art.refs, target, &c)?;
            outcome.results.push(SeedResult {
                table: TABLE_BUDGET.into(),
                setting: format!("source->{}", target.name()),
                row: budget_key(p),
                seed,
                metrics: rep.metrics(CKPT_STAGE1).cloned().expect("stage1 always reported"),
            });
        }
    }
    Ok(table_csv(&outcome, TABLE_BUDGET))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_entries;

    #[test]
    fn bench_config_parse_and_render() {
        let text = "seeds = 3,4\nrows = source-only, stdr, stdr+semi\ntargets = targetA\nbudget_percents = 10,100\nbudget_targets = targetA\nsynth_sizes = 30,20,20\nsource_iters = 5\n";
        let cfg = BenchConfig::from_entries(&parse_entries(text).unwrap()).unwrap();
        assert_eq!(cfg.matrix.seeds, vec![3, 4]);
        assert_eq!(cfg.matrix.rows, vec![RowKind::SourceOnly, RowKind::Select(Strategy::Stdr), RowKind::StdrSemi]);
        assert_eq!(cfg.matrix.base.source_iters, 5);
        assert_eq!(cfg.data, DataSpec::Synthetic { seed: 0, sizes: Some([30, 20, 20]) });
        let back = BenchConfig::from_entries(&parse_entries(&cfg.render()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bench_config_rejects_unknown() {
        let err = BenchConfig::from_entries(&parse_entries("seeds = 1\ncolour = blue").unwrap()).unwrap_err();
        assert!(err.to_string().contains("colour"));
        assert!(BenchConfig::from_entries(&parse_entries("seeds =").unwrap()).is_err());
        assert!(BenchConfig::from_entries(&parse_entries("rows = adversarial").unwrap()).is_err());
        assert!(BenchConfig::from_entries(&parse_entries("budget_targets = targetC").unwrap()).is_err());
    }

    #[test]
    fn aggregate_recomputes() {
        let mk = |d: f64, s: f64| SeedResult {
            table: "t".into(),
            setting: "x".into(),
            row: "r".into(),
            seed: 0,
            metrics: CheckpointMetrics {
                checkpoint: "c".into(),
                dsc: Stat { mean: d, std: s, count: 1, undefined: 0 },
                hd95: Stat { mean: 1.0, std: 0.0, count: 1, undefined: 0 },
                asd: Stat { mean: 2.0, std: 0.0, count: 1, undefined: 0 },
            },
        };
        let (a, b) = (mk(80.0, 2.0), mk(90.0, 4.0));
        let agg = aggregate(&[&a, &b]);
        assert_eq!(agg.dsc, (85.0, 3.0));
        assert_eq!(agg.dsc_seed_std, 5.0);
        assert_eq!(agg.n, 2);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let cfg = SynthConfig::new("d", 3, 16, crate::synth::DomainStyle::identity(), 1);
        let a = generate_domain(&cfg).unwrap();
        let b = generate_domain(&SynthConfig { seed: 2, ..cfg.clone() }).unwrap();
        assert_eq!(dataset_fingerprint(&a), dataset_fingerprint(&generate_domain(&cfg).unwrap()));
        assert_ne!(dataset_fingerprint(&a), dataset_fingerprint(&b));
    }
}
