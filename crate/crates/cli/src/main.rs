use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sfada_core::config::{read_entries, GlobalConfig};
use sfada_core::data::Mask;
use sfada_core::experiments::{load_bench_data, run_matrix, BenchConfig};
use sfada_core::io::{load_dataset, read_mask_pgm, write_dataset, write_mask_pgm};
use sfada_core::metrics::evaluate_dataset;
use sfada_core::pipeline::{adapt, metrics_csv, run_source_phase, select_target, CheckpointMetrics};
use sfada_core::projection::{project_dataset, write_latent_csv};
use sfada_core::reference::load_references;
use sfada_core::segmenter::{checkpoint, predict_masks};
use sfada_core::selection::Strategy;
use sfada_core::synth::{benchmark_presets, generate_domain, SynthConfig, BENCHMARK_SIDE};
use sfada_core::data::{prepare_dataset, split_dataset};
use sfada_core::{rng, Error, Result};

/// Only consulted when `--out` is omitted.
const OUT_ENV: &str = "SFADA_OUT_DIR";

#[derive(Parser)]
#[command(name = "sfada", version, about = "Source-free active domain adaptation for binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source / targetA / targetB synthetic domains.
    Synth(SynthArgs),
    /// Train the source model and fit the reference set.
    TrainSource(TrainArgs),
    /// Export latent vectors of a dataset.
    Project(ProjectArgs),
    /// Write a selection manifest for a target dataset.
    Select(SelectArgs),
    /// Run selection, fine-tuning and optional pseudo-label training on a target.
    Adapt(AdaptArgs),
    /// Compare two mask directories.
    Eval(EvalArgs),
    /// Run an experiment matrix from a config file.
    Bench(BenchArgs),
}

/// Hyperparameters shared by the training commands. Flags override `--config`.
#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    pool_k: Option<usize>,
    #[arg(long = "K", short = 'K')]
    k: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<GlobalConfig> {
        let mut g = match &self.config {
            Some(p) => GlobalConfig::from_entries(&read_entries(p)?)?,
            None => GlobalConfig::default(),
        };
        let a = &mut g.adapt;
        if let Some(v) = self.seed {
            a.seed = v;
        }
        if let Some(v) = self.resolution {
            a.resolution = v;
        }
        if let Some(v) = self.pool_k {
            a.pool_k = v;
        }
        if let Some(v) = self.k {
            a.k = v;
        }
        if let Some(v) = self.lr0 {
            a.lr0 = v;
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Image side length.
    #[arg(long, default_value_t = BENCHMARK_SIDE)]
    side: usize,
    /// Sample counts for source,targetA,targetB.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory, or a `synth` output root containing `source/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    source_ckpt: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    target_dir: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Label budget in percent of the target train split.
    #[arg(long)]
    budget: Option<f64>,
    /// Output manifest JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    source_ckpt: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    target_dir: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    budget: Option<f64>,
    /// Enable pseudo-label training (stages 2 and 3).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    semi: Option<bool>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage3_iters: Option<usize>,
    /// Also write predicted test-split masks of the last checkpoint to `<out>/pred`.
    #[arg(long)]
    save_masks: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted mask PGMs.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference mask PGMs with the same file names.
    #[arg(long)]
    truth: PathBuf,
    /// Output CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_out(name: &str) -> PathBuf {
    let base = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("sfada-out"), PathBuf::from);
    base.join(name)
}

fn print_config(command: &str, body: &str, seed: u64) {
    println!("# sfada {command} resolved config");
    print!("{body}");
    println!("# seed {seed}");
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.sizes.as_ref().is_some_and(|s| s.len() != 3) {
        return Err(Error::invalid("--sizes needs three comma-separated counts"));
    }
    let out = a.out.unwrap_or_else(|| default_out("synth"));
    println!("# sfada synth resolved config");
    println!("side = {}", a.side);
    for (i, (name, n, style)) in benchmark_presets().into_iter().enumerate() {
        let n = a.sizes.as_ref().map_or(n, |s| s[i]);
        let seed = rng::derive_seed(a.seed, &[rng::label(name)]);
        let cfg = SynthConfig::new(name, n, a.side, style, seed);
        println!("{name}.n = {n}");
        write_dataset(&generate_domain(&cfg)?, &out.join(name))?;
    }
    println!("# seed {}", a.seed);
    println!("wrote {}", out.display());
    Ok(())
}

/// A `synth` root holds `source/`; anything else is used as is.
fn source_dir(data: &Path) -> PathBuf {
    let nested = data.join("source");
    if nested.join(sfada_core::io::MANIFEST_FILE).exists() {
        nested
    } else {
        data.to_path_buf()
    }
}

fn train_source(a: TrainArgs) -> Result<()> {
    let mut g = a.common.resolve()?;
    if let Some(n) = a.iters {
        g.adapt.source_iters = n;
    }
    g.validate()?;
    let out = a.out.unwrap_or_else(|| default_out("source"));
    print_config("train-source", &g.render(), g.adapt.seed);
    let ds = load_dataset(&source_dir(&a.data))?;
    let art = run_source_phase(&ds, &g.adapt)?;
    art.save(&out, g.adapt.seed)?;
    let summary = CheckpointMetrics::from_summary("source-test", &art.source_test);
    write_text(&out.join("source_metrics.csv"), &metrics_csv(std::slice::from_ref(&summary)))?;
    println!(
        "source test DSC {:.2} (best val {:.4}), wrote {}",
        art.source_test.dsc.mean,
        art.best_val_dsc,
        out.display()
    );
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    let g = a.common.resolve()?;
    let out = a.out.unwrap_or_else(|| default_out("latent.csv"));
    print_config("project", &g.render(), g.adapt.seed);
    let params = checkpoint::load(&a.ckpt)?;
    let ds = prepare_dataset(&load_dataset(&a.data)?.without_truth(), g.adapt.resolution)?;
    let vectors = project_dataset(&params, &ds, g.adapt.pool_k)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write_latent_csv(&vectors, &out)?;
    println!("{} vectors ({} valid), wrote {}", vectors.len(), vectors.iter().filter(|v| v.valid).count(), out.display());
    Ok(())
}

fn load_refs_for(g: &mut GlobalConfig, refs: &Path) -> Result<sfada_core::reference::ReferenceSet> {
    let (set, meta) = load_references(refs)?;
    if meta.pool_k != g.adapt.pool_k {
        log::info!("pool_k {} taken from reference metadata", meta.pool_k);
        g.adapt.pool_k = meta.pool_k;
    }
    g.adapt.k = set.k;
    Ok(set)
}

fn select(a: SelectArgs) -> Result<()> {
    let mut g = a.common.resolve()?;
    if let Some(s) = a.strategy {
        g.adapt.strategy = s;
    }
    if let Some(b) = a.budget {
        g.adapt.budget_percent = b;
    }
    let refs = load_refs_for(&mut g, &a.refs)?;
    g.validate()?;
    let out = a.out.unwrap_or_else(|| default_out("selection.json"));
    print_config("select", &g.render(), g.adapt.seed);
    let params = checkpoint::load(&a.source_ckpt)?;
    let target = load_dataset(&a.target_dir)?.without_truth();
    let m = select_target(&params, &refs, &target, &g.adapt)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    m.save(&out)?;
    println!(
        "{} selected ({} invariant, {} specific), wrote {}",
        m.len(),
        m.invariant_ids.len(),
        m.specific_ids.len(),
        out.display()
    );
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let mut g = a.common.resolve()?;
    let c = &mut g.adapt;
    if let Some(s) = a.strategy {
        c.strategy = s;
    }
    if let Some(b) = a.budget {
        c.budget_percent = b;
    }
    if let Some(s) = a.semi {
        c.semi_enabled = s;
    }
    if let Some(n) = a.stage1_iters {
        c.stage1_iters = n;
    }
    if let Some(n) = a.stage3_iters {
        c.stage3_iters = n;
    }
    let refs = load_refs_for(&mut g, &a.refs)?;
    g.validate()?;
    let out = a.out.unwrap_or_else(|| default_out("adapt"));
    print_config("adapt", &g.render(), g.adapt.seed);
    let params = checkpoint::load(&a.source_ckpt)?;
    let target = load_dataset(&a.target_dir)?;
    let report = adapt(&params, &refs, &target, &g.adapt)?;
    report.write(&out)?;
    if a.save_masks {
        let (name, final_params) = report.params.last().expect("stage1 params always kept");
        let prepared = prepare_dataset(&target, g.adapt.resolution)?;
        let (_, _, test) = split_dataset(&prepared, &g.adapt.split_spec("target"))?;
        let dir = out.join("pred");
        mkdir(&dir)?;
        for (s, m) in test.samples().iter().zip(predict_masks(final_params, &test)?) {
            write_mask_pgm(&m, &dir.join(format!("{}.pgm", s.id)))?;
        }
        println!("{} test masks from {name} in {}", test.len(), dir.display());
    }
    print!("{}", metrics_csv(&report.checkpoints));
    println!("wrote {}", out.display());
    Ok(())
}

/// Masks keyed by sample id: a dataset directory contributes its ground
/// truth, a plain directory every `.pgm` keyed by file stem.
fn load_masks(dir: &Path) -> Result<Vec<(String, Mask)>> {
    if dir.join(sfada_core::io::MANIFEST_FILE).exists() {
        let ds = load_dataset(dir)?;
        ds.require_truth()?;
        return Ok(ds
            .samples()
            .iter()
            .map(|s| (s.id.clone(), s.truth.clone().expect("checked above")))
            .collect());
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = e.map_err(|err| Error::io(dir, err))?.path();
        if path.extension().is_some_and(|x| x == "pgm") {
            let stem = path.file_stem().expect("has extension").to_string_lossy();
            let key = stem.strip_suffix("_mask").unwrap_or(&stem).to_string();
            out.push((key, read_mask_pgm(&path)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    println!("# sfada eval resolved config");
    println!("pred = {}\ntruth = {}", a.pred.display(), a.truth.display());
    let preds = load_masks(&a.pred)?;
    if preds.is_empty() {
        return Err(Error::invalid(format!("no masks in {}", a.pred.display())));
    }
    let truth: std::collections::HashMap<String, Mask> = load_masks(&a.truth)?.into_iter().collect();
    let mut pairs = (Vec::new(), Vec::new());
    for (id, m) in preds {
        let t = truth
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("no reference mask for `{id}` in {}", a.truth.display())))?;
        pairs.0.push(m);
        pairs.1.push(t.clone());
    }
    let s = evaluate_dataset(&pairs.0, &pairs.1)?;
    let csv = metrics_csv(&[CheckpointMetrics::from_summary("eval", &s)]);
    match a.out {
        Some(p) => {
            write_text(&p, &csv)?;
            println!("{} pairs, wrote {}", pairs.0.len(), p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => BenchConfig::from_entries(&read_entries(p)?)?,
        None => BenchConfig::default(),
    };
    let out = a.out.unwrap_or_else(|| default_out("bench"));
    let rendered = cfg.render();
    print_config("bench", &rendered, cfg.matrix.base.seed);
    mkdir(&out)?;
    write_text(&out.join("bench.cfg"), &rendered)?;
    let data = load_bench_data(&cfg.data, &cfg.matrix.targets)?;
    let outcome = run_matrix(&cfg.matrix, &data, &out)?;
    println!(
        "{} results, {} source trainings, wrote {}",
        outcome.results.len(),
        outcome.source_trainings,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainSource(a) => train_source(a),
        Command::Project(a) => project(a),
        Command::Select(a) => select(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
