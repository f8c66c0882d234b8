//! Experiment grids: spec parsing, cell expansion, execution and result files.
//!
//! A spec is a TOML document:
//!
//! ```toml
//! out = "runs/demo"
//!
//! [dataset]
//! classes = 8
//! per_class = 50
//! dim = 16
//!
//! [grid]
//! strategies = ["Baseline", "LSRO", "dMpRL-II"]
//! generated = [0, 200, 400]
//! seeds = [0, 1, 2]
//!
//! [train]
//! epochs = 50
//! ```
//!
//! Baseline never sees generated data, so it runs once per seed with
//! `n_generated = 0` whatever the count list says. Every other strategy runs
//! for every count, including 0.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::retrieval::EvalReport;
use crate::seed;
use crate::synthgen::{
    make_generated_dataset, make_real_dataset, Dataset, GeneratedConfig, MixRecord, MixWeights,
    RealDatasetConfig,
};
use crate::trainer::{
    embed_split, evaluate_model, train, trajectory_csv, Strategy, TrainConfig, TrainHistory,
    Trajectory,
};

const STREAM_REAL: u64 = 11;
const STREAM_GENERATED: u64 = 12;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub views: usize,
    pub radius_scale: f64,
    pub mix_size: usize,
    pub noise: f64,
    /// Dirichlet concentration of the mixing weights; 0 means equal weights.
    pub concentration: f64,
    /// Fixes the data across run seeds when set.
    pub data_seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 8,
            per_class: 50,
            dim: 16,
            spread: 1.0,
            views: 2,
            radius_scale: 1.5,
            mix_size: 2,
            noise: 0.1,
            concentration: 4.0,
            data_seed: None,
        }
    }
}

impl DatasetSpec {
    fn real_config(&self, run_seed: u64) -> RealDatasetConfig {
        let data_seed = self
            .data_seed
            .unwrap_or_else(|| seed::derive(&[run_seed, STREAM_REAL]));
        RealDatasetConfig {
            views: self.views,
            radius_scale: self.radius_scale,
            ..RealDatasetConfig::new(
                self.classes,
                self.per_class,
                self.dim,
                self.spread,
                data_seed,
            )
        }
    }

    /// Real data plus the first `count` generated samples for `run_seed`.
    /// Generated sets for the same seed are nested: a smaller count is a
    /// prefix of a larger one.
    pub fn build(&self, run_seed: u64, count: usize) -> Result<(Dataset, Dataset, Vec<MixRecord>)> {
        let real_cfg = self.real_config(run_seed);
        let real = make_real_dataset(&real_cfg)?;
        if count == 0 {
            return Ok((
                real,
                Dataset::new(self.classes, self.dim, Vec::new())?,
                Vec::new(),
            ));
        }
        let gen_cfg = GeneratedConfig {
            weights: if self.concentration > 0.0 {
                MixWeights::Dirichlet(self.concentration)
            } else {
                MixWeights::Equal
            },
            ..GeneratedConfig::new(
                count,
                self.mix_size,
                self.noise,
                seed::derive(&[real_cfg.seed, STREAM_GENERATED]),
            )
        };
        let (generated, records) = make_generated_dataset(&real, &gen_cfg)?;
        Ok((real, generated, records))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    out: Option<PathBuf>,
    #[serde(default)]
    dataset: DatasetSpec,
    grid: RawGrid,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    strategies: Vec<String>,
    #[serde(default = "default_counts")]
    generated: Vec<i64>,
    seeds: Vec<u64>,
}

fn default_counts() -> Vec<i64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub strategies: Vec<Strategy>,
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template; `strategy` and `seed` are filled in per cell.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub strategy: Strategy,
    pub n_generated: usize,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}_n{}_s{}", self.strategy, self.n_generated, self.seed)
    }
}

/// 1-based line holding `key` inside `[section]` (or at top level when
/// `section` is empty), falling back to the section header.
fn line_of(src: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut header_line = 1;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header_line = i + 1;
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    header_line
}

fn line_at(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

impl ExperimentSpec {
    pub fn parse(src: &str) -> Result<Self> {
        let raw: RawSpec = toml::from_str(src).map_err(|e| {
            let line = e.span().map_or(1, |s| line_at(src, s.start));
            Error::parse(line, e.message().trim().to_string())
        })?;
        let at =
            |section: &str, key: &str, msg: String| Error::parse(line_of(src, section, key), msg);

        let mut strategies = Vec::with_capacity(raw.grid.strategies.len());
        for name in &raw.grid.strategies {
            let s: Strategy = name
                .parse()
                .map_err(|e: Error| at("grid", "strategies", e.to_string()))?;
            if strategies.contains(&s) {
                return Err(at(
                    "grid",
                    "strategies",
                    format!("strategy {s} listed twice"),
                ));
            }
            strategies.push(s);
        }
        if strategies.is_empty() {
            return Err(at("grid", "strategies", "strategy list is empty".into()));
        }
        let mut counts = Vec::with_capacity(raw.grid.generated.len());
        for &c in &raw.grid.generated {
            let c = usize::try_from(c).map_err(|_| {
                at(
                    "grid",
                    "generated",
                    format!("generated count {c} is negative"),
                )
            })?;
            if counts.contains(&c) {
                return Err(at(
                    "grid",
                    "generated",
                    format!("generated count {c} listed twice"),
                ));
            }
            counts.push(c);
        }
        if counts.is_empty() {
            return Err(at(
                "grid",
                "generated",
                "generated count list is empty".into(),
            ));
        }
        let seeds = raw.grid.seeds;
        if seeds.is_empty() {
            return Err(at("grid", "seeds", "seed list is empty".into()));
        }
        if (1..seeds.len()).any(|i| seeds[..i].contains(&seeds[i])) {
            return Err(at("grid", "seeds", "seed list has duplicates".into()));
        }

        for s in &strategies {
            let cfg = TrainConfig {
                strategy: *s,
                ..raw.train.clone()
            };
            cfg.validate()
                .map_err(|e| at("train", train_key_hint(&e), format!("{e} (strategy {s})")))?;
        }
        let d = &raw.dataset;
        let needs_generated =
            strategies.iter().any(|s| s.uses_generated()) && counts.iter().any(|&c| c > 0);
        if needs_generated && (d.mix_size < 2 || d.mix_size > d.classes) {
            return Err(at(
                "dataset",
                "mix_size",
                format!("mix_size must be in [2, {}], got {}", d.classes, d.mix_size),
            ));
        }
        if !(d.concentration >= 0.0 && d.concentration.is_finite()) {
            return Err(at(
                "dataset",
                "concentration",
                "concentration must be >= 0".into(),
            ));
        }

        Ok(ExperimentSpec {
            out: raw.out,
            dataset: raw.dataset,
            strategies,
            counts,
            seeds,
            train: raw.train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path)?;
        ExperimentSpec::parse(&src)
    }

    /// Cells in summary order: strategies as listed, then count, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut counts = self.counts.clone();
        counts.sort_unstable();
        let mut cells = Vec::new();
        for &strategy in &self.strategies {
            let cell_counts: &[usize] = if strategy.uses_generated() {
                &counts
            } else {
                &[0]
            };
            for &n_generated in cell_counts {
                for &seed in &self.seeds {
                    cells.push(Cell {
                        strategy,
                        n_generated,
                        seed,
                    });
                }
            }
        }
        cells
    }

    pub fn train_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            seed,
            ..self.train.clone()
        }
    }
}

fn train_key_hint(e: &Error) -> &'static str {
    let msg = e.to_string();
    [
        "warmup_epoch",
        "lr_initial",
        "lr_after_decay",
        "momentum",
        "dropout_rate",
        "batch_size",
        "epochs",
        "lambda",
        "hidden",
        "init_scale",
    ]
    .into_iter()
    .find(|k| msg.contains(k))
    .unwrap_or("")
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub report: EvalReport,
    pub history: TrainHistory,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses rayon's default.
    pub jobs: Option<usize>,
    /// Record wall-clock seconds in the summary (makes it non-reproducible).
    pub timing: bool,
    /// Also write each cell's model checkpoint and query/gallery embeddings.
    pub keep_artifacts: bool,
}

#[derive(Debug)]
pub struct RunSummary {
    pub results: Vec<CellResult>,
    pub failures: Vec<(Cell, String)>,
}

impl RunSummary {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }
}

fn run_cell(
    spec: &ExperimentSpec,
    cell: Cell,
    dir: &Path,
    opts: &RunOptions,
) -> Result<CellResult> {
    let start = Instant::now();
    let (real, generated, _) = spec.dataset.build(cell.seed, cell.n_generated)?;
    let cfg = spec.train_config(cell.strategy, cell.seed);
    let outcome = train(&real, &generated, &cfg)?;
    let report = evaluate_model(&outcome.params, &real)?;
    let wall_seconds = start.elapsed().as_secs_f64();

    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.csv"), outcome.history.to_csv())?;
    fs::write(dir.join("report.json"), report.to_json())?;
    if let Some(t) = &outcome.history.trajectories {
        fs::write(dir.join("trajectory.csv"), trajectory_csv(t))?;
    }
    if opts.keep_artifacts {
        outcome
            .params
            .save(fs::File::create(dir.join("model.txt"))?)?;
        for (split, name) in [
            (crate::synthgen::Split::Query, "query.emb"),
            (crate::synthgen::Split::Gallery, "gallery.emb"),
        ] {
            embed_split(&outcome.params, &real, split)?.save(fs::File::create(dir.join(name))?)?;
        }
    }
    log::info!(
        "{}: rank1 {:.4} mAP {:.4}",
        cell.dir_name(),
        report.rank1,
        report.map
    );
    Ok(CellResult {
        cell,
        report,
        history: outcome.history,
        wall_seconds,
    })
}

/// Runs every cell and writes `cells/<cell>/…`, `summary.csv` and, when
/// anything failed, `failures.csv` under `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let cells = spec.cells();
    fs::create_dir_all(out.join("cells"))?;
    log::info!("running {} cells into {}", cells.len(), out.display());

    let work = || -> Vec<Result<CellResult>> {
        cells
            .par_iter()
            .map(|&cell| run_cell(spec, cell, &out.join("cells").join(cell.dir_name()), opts))
            .collect()
    };
    let outcomes = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start {n} workers: {e}")))?
            .install(work),
        None => work(),
    };

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (cell, outcome) in cells.into_iter().zip(outcomes) {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("{} failed: {e}", cell.dir_name());
                failures.push((cell, e.to_string()));
            }
        }
    }
    fs::write(out.join("summary.csv"), summary_csv(&results, opts.timing))?;
    let manifest = out.join("failures.csv");
    if failures.is_empty() {
        if manifest.exists() {
            fs::remove_file(&manifest)?;
        }
    } else {
        let mut text = String::from("strategy,n_generated,seed,error\n");
        for (c, e) in &failures {
            text.push_str(&format!(
                "{},{},{},\"{}\"\n",
                c.strategy,
                c.n_generated,
                c.seed,
                e.replace('"', "\"\"")
            ));
        }
        fs::write(manifest, text)?;
    }
    Ok(RunSummary { results, failures })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub strategy: Strategy,
    pub n_generated: usize,
    pub runs: usize,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub l1_final: f64,
    pub l2_final: f64,
    pub wall_seconds: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per (strategy, count) aggregates, in first-appearance order.
pub fn group_stats(results: &[CellResult]) -> Vec<GroupStats> {
    let mut keys: Vec<(Strategy, usize)> = Vec::new();
    for r in results {
        let k = (r.cell.strategy, r.cell.n_generated);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(strategy, n_generated)| {
            let group: Vec<&CellResult> = results
                .iter()
                .filter(|r| r.cell.strategy == strategy && r.cell.n_generated == n_generated)
                .collect();
            let col =
                |f: &dyn Fn(&CellResult) -> f64| group.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (rank1_mean, rank1_std) = mean_std(&col(&|r| r.report.rank1));
            let (map_mean, map_std) = mean_std(&col(&|r| r.report.map));
            GroupStats {
                strategy,
                n_generated,
                runs: group.len(),
                rank1_mean,
                rank1_std,
                map_mean,
                map_std,
                l1_final: mean_std(&col(&|r| final_losses(&r.history).0)).0,
                l2_final: mean_std(&col(&|r| final_losses(&r.history).1)).0,
                wall_seconds: mean_std(&col(&|r| r.wall_seconds)).0,
            }
        })
        .collect()
}

fn final_losses(h: &TrainHistory) -> (f64, f64) {
    h.last().map_or((0.0, 0.0), |r| (r.l1, r.l2))
}

/// Per-seed rows followed by one `mean` row per (strategy, count) that has
/// more than one seed.
pub fn summary_csv(results: &[CellResult], timing: bool) -> String {
    let wall = |w: f64| if timing { w } else { 0.0 };
    let mut out =
        String::from("strategy,n_generated,seed,rank1,mAP,l1_final,l2_final,wall_seconds\n");
    for r in results {
        let (l1, l2) = final_losses(&r.history);
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            r.cell.strategy,
            r.cell.n_generated,
            r.cell.seed,
            r.report.rank1,
            r.report.map,
            l1,
            l2,
            wall(r.wall_seconds)
        ));
    }
    for g in group_stats(results).into_iter().filter(|g| g.runs > 1) {
        out.push_str(&format!(
            "{},{},mean,{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            g.strategy,
            g.n_generated,
            g.rank1_mean,
            g.map_mean,
            g.l1_final,
            g.l2_final,
            wall(g.wall_seconds)
        ));
    }
    out
}

/// Fixed-width comparison of the per-group means.
pub fn comparison_table(results: &[CellResult]) -> String {
    let mut out = format!(
        "{:<14} {:>11} {:>5} {:>17} {:>17}\n",
        "strategy", "n_generated", "runs", "rank1 mean±std", "mAP mean±std"
    );
    for g in group_stats(results) {
        out.push_str(&format!(
            "{:<14} {:>11} {:>5} {:>9.4} ± {:.4} {:>9.4} ± {:.4}\n",
            g.strategy.name(),
            g.n_generated,
            g.runs,
            g.rank1_mean,
            g.rank1_std,
            g.map_mean,
            g.map_std
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TraceOutput {
    pub trajectories: Vec<Trajectory>,
    pub records: Vec<MixRecord>,
    /// Requested sample count before clipping to the generated set.
    pub requested: usize,
}

/// Trains one cell with the first `samples` generated samples tracked.
pub fn trace(
    spec: &ExperimentSpec,
    strategy: Strategy,
    seed: u64,
    n_generated: usize,
    samples: usize,
) -> Result<TraceOutput> {
    let tracked = samples.min(n_generated);
    if tracked < samples {
        log::warn!(
            "requested {samples} tracked samples but only {n_generated} are generated; clipping"
        );
    }
    let (real, generated, records) = spec.dataset.build(seed, n_generated)?;
    if tracked == 0 {
        return Ok(TraceOutput {
            trajectories: Vec::new(),
            records: Vec::new(),
            requested: samples,
        });
    }
    let cfg = TrainConfig {
        track_generated: tracked,
        ..spec.train_config(strategy, seed)
    };
    let outcome = train(&real, &generated, &cfg)?;
    Ok(TraceOutput {
        trajectories: outcome.history.trajectories.unwrap_or_default(),
        records: records.into_iter().take(tracked).collect(),
        requested: samples,
    })
}

/// `sample_id,source_classes,weights` for the tracked samples.
pub fn sources_csv(records: &[MixRecord]) -> String {
    let mut out = String::from("sample_id,source_classes,weights\n");
    for r in records {
        let classes: Vec<String> = r.source_classes.iter().map(|c| c.to_string()).collect();
        let weights: Vec<String> = r.weights.iter().map(|w| format!("{w:.6}")).collect();
        out.push_str(&format!(
            "{},{},{}\n",
            r.id,
            classes.join(" "),
            weights.join(" ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
out = "runs/x"

[dataset]
classes = 4
per_class = 8
dim = 5

[grid]
strategies = ["Baseline", "LSRO", "dMpRL-II"]
generated = [0, 200, 400]
seeds = [0, 1, 2]

[train]
epochs = 25
"#;

    #[test]
    fn expansion_rule() {
        let spec = ExperimentSpec::parse(SPEC).unwrap();
        let cells = spec.cells();
        assert_eq!(cells.len(), 21);
        assert_eq!(
            cells
                .iter()
                .filter(|c| c.strategy == Strategy::Baseline)
                .count(),
            3
        );
        assert!(cells
            .iter()
            .filter(|c| c.strategy == Strategy::Baseline)
            .all(|c| c.n_generated == 0));
        assert_eq!(cells[3].dir_name(), "LSRO_n0_s0");
    }

    #[test]
    fn defaults_fill_in() {
        let spec = ExperimentSpec::parse("[grid]\nstrategies = [\"lsro\"]\nseeds = [4]\n").unwrap();
        assert_eq!(spec.counts, vec![0]);
        assert_eq!(spec.dataset, DatasetSpec::default());
        assert_eq!(spec.train, TrainConfig::default());
        assert_eq!(spec.out, None);
    }

    fn parse_err(src: &str) -> (usize, String) {
        match ExperimentSpec::parse(src) {
            Err(Error::Parse { line, message }) => (line, message),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_point_at_lines() {
        let (line, msg) = parse_err("[grid]\nstrategies = [\"nope\"]\nseeds = [1]\n");
        assert_eq!(line, 2);
        assert!(msg.contains("nope"));

        let (line, _) = parse_err("[grid]\nstrategies = [\"lsro\"]\nseeds = []\n");
        assert_eq!(line, 3);

        let (line, _) =
            parse_err("[grid]\nstrategies = [\"lsro\"]\ngenerated = [5, -1]\nseeds = [1]\n");
        assert_eq!(line, 3);

        let (line, msg) = parse_err("[grid]\nstrategies = [\"dmprl-2\"]\nseeds = [1]\n\n[train]\nepochs = 10\nwarmup_epoch = 12\n");
        assert_eq!(line, 7, "{msg}");

        let (line, _) =
            parse_err("[grid]\nstrategies = [\"lsro\"]\nseeds = [1]\n[train]\nepoch = 3\n");
        assert_eq!(line, 5);

        let (line, _) = parse_err(
            "[grid]\nstrategies = [\"lsro\"]\nseeds = [1]\n[dataset]\nmix_size = 1\n\n[grid2]\n",
        );
        assert!(line >= 4);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(
            ExperimentSpec::parse("[grid]\nstrategies = [\"lsro\", \"LSRO\"]\nseeds = [1]\n")
                .is_err()
        );
        assert!(
            ExperimentSpec::parse("[grid]\nstrategies = [\"lsro\"]\nseeds = [1, 1]\n").is_err()
        );
    }

    #[test]
    fn nested_generated_sets() {
        let d = DatasetSpec {
            classes: 4,
            per_class: 8,
            dim: 5,
            ..DatasetSpec::default()
        };
        let (r1, g_small, _) = d.build(3, 5).unwrap();
        let (r2, g_big, _) = d.build(3, 9).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(g_small.samples(), &g_big.samples()[..5]);
        let (_, g0, _) = d.build(3, 0).unwrap();
        assert!(g0.is_empty());
    }

    #[test]
    fn summary_has_seed_and_mean_rows() {
        let report = EvalReport {
            rank1: 0.5,
            map: 0.25,
            cmc: vec![0.5, 1.0],
        };
        let mk = |seed, rank1| CellResult {
            cell: Cell {
                strategy: Strategy::Lsro,
                n_generated: 10,
                seed,
            },
            report: EvalReport {
                rank1,
                ..report.clone()
            },
            history: TrainHistory::default(),
            wall_seconds: 1.5,
        };
        let csv = summary_csv(&[mk(0, 0.5), mk(1, 1.0)], false);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "strategy,n_generated,seed,rank1,mAP,l1_final,l2_final,wall_seconds"
        );
        assert_eq!(
            lines[1],
            "LSRO,10,0,0.500000,0.250000,0.000000,0.000000,0.000"
        );
        assert_eq!(
            lines[3],
            "LSRO,10,mean,0.750000,0.250000,0.000000,0.000000,0.000"
        );
        let single = summary_csv(&[mk(0, 0.5)], true);
        assert!(single.ends_with(",1.500\n"));
        assert_eq!(single.lines().count(), 2);
        assert!(comparison_table(&[mk(0, 0.5), mk(1, 1.0)]).contains("0.7500 ± 0.2500"));
    }
}
