//! Acceptance criteria, one PASS/FAIL line each. Lines go straight to the
//! process stdout so they show up without `--nocapture`.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{gradient_checks, oracle_checks, property_checks};
use sfada_core::config::parse_entries;
use sfada_core::experiments::{load_bench_data, run_matrix, BenchConfig, MatrixOutcome, RowKind};
use sfada_core::io::{load_dataset, write_dataset};
use sfada_core::pipeline::{adapt, AdaptationConfig, CKPT_STAGE1};
use sfada_core::reference::load_references;
use sfada_core::segmenter::checkpoint;
use sfada_core::selection::Strategy;

const SEEDS: [u64; 3] = [0, 1, 2];
const GRADIENT_SECONDS: f64 = 60.0;
const ORACLE_SECONDS: f64 = 120.0;
const BENCHMARK_SECONDS: f64 = 15.0 * 60.0;
const SOURCE_DSC_MIN: f64 = 85.0;
const GAP_MIN: f64 = 5.0;
const RECOVERY_MIN: f64 = 0.5;
const SLACK: f64 = 0.5;

fn report(n: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2}: {status}  {detail}");
    let _ = out.flush();
}

fn passes(checks: Vec<(&str, Box<dyn FnOnce() + UnwindSafe>)>) -> (bool, Vec<String>) {
    let mut failed = Vec::new();
    for (name, f) in checks {
        if catch_unwind(f).is_err() {
            failed.push(name.to_string());
        }
    }
    (failed.is_empty(), failed)
}

fn boxed(f: fn()) -> Box<dyn FnOnce() + UnwindSafe> {
    Box::new(f)
}

const SETTING: &str = "source->targetA";

fn dsc(o: &MatrixOutcome, table: &str, setting: &str, row: &str) -> f64 {
    o.mean_dsc(table, setting, row).unwrap_or(f64::NAN)
}

fn benchmark_config() -> BenchConfig {
    let text = "targets = targetA\nrows = source-only, random, stdr, stdr+semi\nbudget_sweep = false\n";
    let mut cfg = BenchConfig::from_entries(&parse_entries(text).unwrap()).unwrap();
    cfg.matrix.seeds = SEEDS.to_vec();
    cfg
}

/// Criterion 9: the target side runs from checkpoint and reference files
/// with the source dataset gone from disk.
fn source_free_audit(cache: &Path, work: &Path) -> Result<String, String> {
    let (source, target_a, _) = sfada_core::synth::default_benchmark(0).map_err(|e| e.to_string())?;
    let src_dir = work.join("source");
    let tgt_dir = work.join("targetA");
    write_dataset(&source, &src_dir).map_err(|e| e.to_string())?;
    write_dataset(&target_a, &tgt_dir).map_err(|e| e.to_string())?;
    std::fs::remove_dir_all(&src_dir).map_err(|e| e.to_string())?;
    if src_dir.exists() {
        return Err("source directory still present".into());
    }
    let params = checkpoint::load(&cache.join("source.ckpt")).map_err(|e| e.to_string())?;
    let (refs, meta) = load_references(&cache.join("refs.csv")).map_err(|e| e.to_string())?;
    let target = load_dataset(&tgt_dir).map_err(|e| e.to_string())?;
    let cfg = AdaptationConfig {
        pool_k: meta.pool_k,
        stage1_iters: 50,
        stage3_iters: 50,
        ..AdaptationConfig::default()
    };
    let rep = adapt(&params, &refs, &target, &cfg).map_err(|e| e.to_string())?;
    if rep.labels_revealed != rep.manifest.len() {
        return Err("label count differs from manifest".into());
    }
    Ok(format!(
        "adapt ran with source data deleted; {} labels revealed, stage1 DSC {:.2}",
        rep.labels_revealed,
        rep.metrics(CKPT_STAGE1).unwrap().dsc.mean
    ))
}

fn determinism(work: &Path) -> Result<String, String> {
    let text = "synth_sizes = 40,20,20\nseeds = 0,1\nbudget_percents = 10,20,100\n\
                source_iters = 40\nstage1_iters = 10\nstage3_iters = 10\nval_every = 20\n";
    let cfg = BenchConfig::from_entries(&parse_entries(text).unwrap()).unwrap();
    let data = load_bench_data(&cfg.data, &cfg.matrix.targets).map_err(|e| e.to_string())?;
    let (a, b) = (work.join("run-a"), work.join("run-b"));
    run_matrix(&cfg.matrix, &data, &a).map_err(|e| e.to_string())?;
    run_matrix(&cfg.matrix, &data, &b).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for entry in std::fs::read_dir(&a).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            let name = p.file_name().unwrap();
            let (x, y) = (std::fs::read(&p).unwrap(), std::fs::read(b.join(name)).map_err(|e| e.to_string())?);
            if x != y {
                return Err(format!("{} differs", name.to_string_lossy()));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} metrics CSVs byte-identical across two fresh bench runs"))
}

#[test]
fn acceptance_criteria() {
    let mut all_pass = true;
    let mut record = |n: u32, pass: bool, detail: String| {
        all_pass &= pass;
        report(n, pass, &detail);
    };

    record(1, true, "no criterion targets the clinical tables; checks below are property and ordering based".into());

    let t = Instant::now();
    let (ok, failed) = passes(vec![("gradient", boxed(gradient_checks::gradient_matches_central_differences))]);
    let secs = t.elapsed().as_secs_f64();
    record(2, ok && secs < GRADIENT_SECONDS, format!("3 seeds, 16x16, h=1e-3 ({secs:.1}s) {failed:?}"));

    let t = Instant::now();
    let (ok, failed) = passes(vec![
        ("projection", boxed(oracle_checks::projection_matches_loop_oracle)),
        ("similarity", boxed(oracle_checks::similarity_matches_exhaustive_scan)),
        ("selection", boxed(oracle_checks::selection_matches_sort_oracle)),
        ("kmeans K=1", boxed(oracle_checks::kmeans_single_cluster_is_the_mean)),
        ("kmeans K=2", boxed(oracle_checks::kmeans_two_clusters_find_the_optimal_partition)),
        ("surface distances", boxed(oracle_checks::surface_distances_match_all_pairs)),
    ]);
    let secs = t.elapsed().as_secs_f64();
    record(3, ok && secs < ORACLE_SECONDS, format!("6 oracle families x 100 instances ({secs:.1}s) failed={failed:?}"));

    let (ok, failed) = passes(vec![("metrics", boxed(property_checks::metric_invariants_hold_on_random_pairs))]);
    record(4, ok, format!("symmetry, identity, translation, range, hd95<=hausdorff on 100 pairs {failed:?}"));

    let (ok, failed) = passes(vec![("kmeans", boxed(property_checks::kmeans_objective_never_increases))]);
    record(5, ok, format!("objective non-increasing over 20 runs {failed:?}"));

    let (ok, failed) = passes(vec![("rank", boxed(property_checks::selection_depends_only_on_rank))]);
    record(6, ok, format!("stdr/alpha/beta unchanged under 4 increasing transforms, 50 sets {failed:?}"));

    // criterion 7: the benchmark itself
    let work = tempfile::tempdir().unwrap();
    let cfg = benchmark_config();
    let data = load_bench_data(&cfg.data, &cfg.matrix.targets).unwrap();
    let t = Instant::now();
    let bench_dir = work.path().join("bench");
    let outcome = run_matrix(&cfg.matrix, &data, &bench_dir);
    let secs = t.elapsed().as_secs_f64();
    match &outcome {
        Err(e) => record(7, false, format!("benchmark failed: {e}")),
        Ok(o) => {
            let src = dsc(o, "transfer", "source->source", "source-only");
            let so = dsc(o, "transfer", SETTING, "source-only");
            let stdr = dsc(o, "strategies", SETTING, "stdr");
            let random = dsc(o, "strategies", SETTING, "random");
            let semi = dsc(o, "ablation", SETTING, "stdr+semi");
            let gap = src - so;
            let recovery = (stdr - so) / gap;
            let checks = [
                ("a", src >= SOURCE_DSC_MIN, format!("source test DSC {src:.2} >= {SOURCE_DSC_MIN}")),
                ("b", gap >= GAP_MIN, format!("transfer gap {gap:.2} >= {GAP_MIN}")),
                ("c", recovery >= RECOVERY_MIN, format!("stdr recovers {:.0}% of gap", 100.0 * recovery)),
                ("d", semi >= stdr - SLACK, format!("stdr+semi {semi:.2} vs stdr {stdr:.2}")),
                ("e", stdr >= random - SLACK, format!("stdr {stdr:.2} vs random {random:.2}")),
                ("t", secs < BENCHMARK_SECONDS, format!("{secs:.0}s")),
            ];
            let ok = checks.iter().all(|c| c.1);
            let detail: Vec<String> = checks
                .iter()
                .map(|(k, p, d)| format!("({k}) {} {d}", if *p { "ok" } else { "FAILED" }))
                .collect();
            record(7, ok, detail.join("; "));
            if !ok {
                let mut out = std::io::stdout().lock();
                let _ = writeln!(out, "per-seed targetA DSC:");
                for r in o.results.iter().filter(|r| r.setting == SETTING || r.table == "transfer") {
                    let _ = writeln!(out, "  {:<10} {:<20} {:<12} seed {} {:.2}", r.table, r.setting, r.row, r.seed, r.metrics.dsc.mean);
                }
            }
        }
    }

    // criterion 8: budget sweep; the 20% point is the stdr row above
    let mut sweep = cfg.matrix.clone();
    sweep.rows = Vec::<RowKind>::new();
    sweep.budget_percents = vec![10.0, 100.0];
    sweep.budget_targets = vec!["targetA".into()];
    match (outcome.as_ref(), run_matrix(&sweep, &data, &bench_dir)) {
        (Ok(o7), Ok(o8)) => {
            let p10 = dsc(&o8, "budget", SETTING, "10");
            let p20 = dsc(o7, "strategies", SETTING, Strategy::Stdr.name());
            let p100 = dsc(&o8, "budget", SETTING, "100");
            let ok = p100 >= p20 - SLACK && p20 >= p10 - SLACK;
            record(8, ok, format!("DSC at 10/20/100%: {p10:.2} / {p20:.2} / {p100:.2} (source reused: {} retrains)", o8.source_trainings));
        }
        (_, Err(e)) => record(8, false, format!("budget sweep failed: {e}")),
        (Err(_), _) => record(8, false, "needs the benchmark run".into()),
    }

    let audit_dir = work.path().join("audit");
    match source_free_audit(&bench_dir.join("cache/source-seed0"), &audit_dir) {
        Ok(d) => record(9, true, d),
        Err(e) => record(9, false, e),
    }

    match determinism(&work.path().join("det")) {
        Ok(d) => record(10, true, d),
        Err(e) => record(10, false, e),
    }

    assert!(all_pass, "acceptance criteria failed");
}
