//! Argument parsing and the subcommand bodies.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use permweld_core::align::{self, PermutationSet};
use permweld_core::data;
use permweld_core::landscape;
use permweld_core::train::{self, evaluate};
use permweld_core::{Checkpoint, Data, Params};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Loaded, Split};
use crate::error::{at_path, CliError, CliResult};
use crate::pipeline::{self, Method, TABLE2_ROWS};
use crate::report::{self, FileDigest, MergeReport, Provenance, ReportMetrics, TOOL_VERSION};

#[derive(Debug, Parser)]
#[command(name = "permweld", version, about = "Train, align and merge small MLP classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to training, alignment and condensation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for independent trainings and alignments.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write configured datasets as PMDS1 train/test files.
    GenData {
        #[arg(long = "dataset")]
        datasets: Vec<String>,
    },
    /// Train a model on one dataset, or on two concatenated.
    Train {
        #[arg(long = "dataset", required = true)]
        datasets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align model B to model A and merge them.
    Merge {
        #[arg(long, value_enum)]
        method: Method,
        model_a: PathBuf,
        model_b: PathBuf,
        /// Alignment mixture `A,B`: config dataset names or PMDS files.
        #[arg(long)]
        data: Option<String>,
        /// Evaluation pair `A,B` of config dataset names.
        #[arg(long)]
        eval: Option<String>,
    },
    /// Loss and accuracy along the line between two models.
    Sweep {
        model_a: PathBuf,
        model_b: PathBuf,
        /// Permutation set (JSON) applied to model B first.
        #[arg(long)]
        perm: Option<PathBuf>,
        #[arg(long)]
        eval: Option<String>,
    },
    /// Distil datasets into a few synthetic rows per class.
    Condense {
        #[arg(long = "dataset", required = true)]
        datasets: Vec<String>,
    },
    /// WM diagnostics across rotated copies of a base dataset.
    Table1,
    /// Accuracy of every merge method on one dataset pair.
    Table2,
    /// Population of FWM permutations and their landscape metrics.
    Population {
        model_a: PathBuf,
        model_b: PathBuf,
        #[arg(long)]
        eval: Option<String>,
    },
    /// Fisher-importance and weight overlap of two models.
    Overlap {
        model_a: PathBuf,
        model_b: PathBuf,
        #[arg(long)]
        eval: Option<String>,
    },
}

struct Ctx {
    loaded: Loaded,
    out_dir: PathBuf,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if cli.global.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    // A second initialisation (e.g. repeated in-process runs) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.global.jobs).build_global();
    let loaded = Loaded::load(cli.global.config.as_deref(), cli.global.seed)?;
    let out_dir = cli
        .global
        .out_dir
        .clone()
        .or_else(|| loaded.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    at_path(std::fs::create_dir_all(&out_dir), &out_dir)?;
    let ctx = Ctx { loaded, out_dir };
    match cli.command {
        Command::GenData { datasets } => gen_data(&ctx, datasets),
        Command::Train { datasets, out } => train_cmd(&ctx, &datasets, out),
        Command::Merge {
            method,
            model_a,
            model_b,
            data,
            eval,
        } => merge(&ctx, method, &model_a, &model_b, data.as_deref(), eval.as_deref()),
        Command::Sweep {
            model_a,
            model_b,
            perm,
            eval,
        } => sweep_cmd(&ctx, &model_a, &model_b, perm.as_deref(), eval.as_deref()),
        Command::Condense { datasets } => condense_cmd(&ctx, &datasets),
        Command::Table1 => table1(&ctx),
        Command::Table2 => table2(&ctx),
        Command::Population { model_a, model_b, eval } => population(&ctx, &model_a, &model_b, eval.as_deref()),
        Command::Overlap { model_a, model_b, eval } => overlap(&ctx, &model_a, &model_b, eval.as_deref()),
    }
}

fn gen_data(ctx: &Ctx, mut names: Vec<String>) -> CliResult<()> {
    if names.is_empty() {
        names = ctx.loaded.config.datasets.keys().cloned().collect();
    }
    if names.is_empty() {
        return Err(CliError::usage("no datasets configured"));
    }
    for name in names {
        let split = ctx.loaded.dataset(&name)?;
        for (d, suffix) in [(&split.train, "train"), (&split.test, "test")] {
            let path = ctx.out(&format!("{name}-{suffix}.pmds"));
            at_path(data::save_dataset(d, &path), &path)?;
            println!("{} ({} rows, {} features)", path.display(), d.len(), d.dim());
        }
    }
    Ok(())
}

fn train_cmd(ctx: &Ctx, names: &[String], out: Option<PathBuf>) -> CliResult<()> {
    let cfg = &ctx.loaded.config;
    let (tr, te, label) = match names {
        [one] => {
            let s = ctx.loaded.dataset(one)?;
            (s.train, s.test, one.clone())
        }
        [x, y] => {
            let (a, b) = (ctx.loaded.dataset(x)?, ctx.loaded.dataset(y)?);
            let joined = train::balanced_concat(&a.train, &b.train, cfg.train.seed)?;
            let test = train::balanced_concat(&a.test, &b.test, cfg.train.seed)?;
            (joined, test, format!("{x}+{y}"))
        }
        _ => return Err(CliError::usage("train takes one or two --dataset names")),
    };
    let trained = pipeline::train_model(cfg, &tr, &te, &cfg.train)?;
    let path = out.unwrap_or_else(|| ctx.out(&format!("{label}.pmck")));
    at_path(train::save_checkpoint(&trained.checkpoint, &path), &path)?;
    let hist = sidecar(&path, "history.json");
    report::write_json(&trained.history, &hist)?;
    let m = &trained.checkpoint.metadata;
    println!(
        "{}: train acc {:.4}, test acc {:.4}",
        path.display(),
        m["train_acc"].as_f64().unwrap_or(f64::NAN),
        m["test_acc"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// `a.pmck` -> `a.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn load_model(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", path.display())));
    }
    at_path(train::load_checkpoint(path), path)
}

fn pair_arg(arg: &str) -> CliResult<(String, String)> {
    match arg.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains(',') => Ok((a.to_string(), b.to_string())),
        _ => Err(CliError::usage(format!("expected two comma-separated names, got {arg:?}"))),
    }
}

/// A config dataset's training split, or a PMDS file.
fn align_source(ctx: &Ctx, item: &str) -> CliResult<Data> {
    if item.ends_with(".pmds") {
        let p = Path::new(item);
        if !p.is_file() {
            return Err(CliError::usage(format!("dataset file {item} does not exist")));
        }
        return at_path(data::load_dataset(p), p);
    }
    Ok(ctx.loaded.dataset(item)?.train)
}

/// The evaluation pair: `--eval`, else the datasets recorded in the
/// checkpoints when the config knows them.
fn eval_pair(ctx: &Ctx, eval: Option<&str>, a: &Checkpoint, b: &Checkpoint) -> CliResult<Option<(Split, Split)>> {
    let names = match eval {
        Some(e) => Some(pair_arg(e)?),
        None => {
            let known = |c: &Checkpoint| {
                c.metadata
                    .get("dataset")
                    .and_then(|v| v.as_str())
                    .filter(|n| ctx.loaded.config.datasets.contains_key(*n))
                    .map(str::to_string)
            };
            known(a).zip(known(b))
        }
    };
    match names {
        Some((x, y)) => Ok(Some((ctx.loaded.dataset(&x)?, ctx.loaded.dataset(&y)?))),
        None => Ok(None),
    }
}

fn require_eval(pair: Option<(Split, Split)>, cmd: &str) -> CliResult<(Split, Split)> {
    pair.ok_or_else(|| {
        CliError::usage(format!(
            "{cmd} needs evaluation data: pass --eval A,B or models trained from this config"
        ))
    })
}

fn merge(ctx: &Ctx, method: Method, pa: &Path, pb: &Path, data_arg: Option<&str>, eval: Option<&str>) -> CliResult<()> {
    let cfg = &ctx.loaded.config;
    if method.needs_data() && data_arg.is_none() {
        return Err(CliError::usage(format!(
            "method {} requires a dataset: pass --data A,B (real or condensed mixture)",
            method.name()
        )));
    }
    if !method.needs_data() && data_arg.is_some() {
        return Err(CliError::usage(format!(
            "method {} aligns from weights only and takes no --data",
            method.name()
        )));
    }
    let (ca, cb) = (load_model(pa)?, load_model(pb)?);
    let pair = eval_pair(ctx, eval, &ca, &cb)?;
    let align_parts = match data_arg {
        Some(arg) => {
            let (x, y) = pair_arg(arg)?;
            Some((align_source(ctx, &x)?, align_source(ctx, &y)?))
        }
        None => None,
    };
    let align_mix = match &align_parts {
        Some((x, y)) => Some(data::mix(x, y, cfg.sweep.alpha)?),
        None => None,
    };
    let merged = pipeline::align_and_merge(
        method,
        &ca.params,
        &cb.params,
        &cfg.align,
        &cfg.fisher,
        align_mix.as_ref(),
        pair.as_ref().map(|(_, b)| &b.train),
    )?;

    let (metrics, sweep) = match &pair {
        Some((a, b)) => {
            let (train_mix, test_mix) = pipeline::mixes(a, b, cfg.sweep.alpha)?;
            let (rm, _, sweep) = pipeline::evaluate_merge(&ca.params, &merged, &train_mix, &test_mix, cfg.sweep.grid_size)?;
            (rm, Some(sweep))
        }
        None => {
            let (l2_raw, l2_per_param) = landscape::l2_distance(&ca.params, &merged.permuted_b)?;
            (
                ReportMetrics {
                    l2_raw,
                    l2_per_param,
                    ..ReportMetrics::default()
                },
                None,
            )
        }
    };
    let stem = method.name();
    let merged_path = ctx.out(&format!("merged-{stem}.pmck"));
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("method".to_string(), json!(stem));
    meta.insert("config_digest".to_string(), json!(cfg.digest()));
    at_path(train::save_checkpoint(&Checkpoint::new(merged.merged.clone(), meta), &merged_path), &merged_path)?;
    report::write_json(&merged.permutation, &ctx.out(&format!("perm-{stem}.json")))?;
    if let Some(s) = &sweep {
        report::emit_sweep(s, &ctx.out_dir, &format!("sweep-{stem}"))?;
    }
    let rep = MergeReport {
        tool_version: TOOL_VERSION.into(),
        config_digest: cfg.digest(),
        method: stem.into(),
        metrics,
        sweep,
        provenance: Provenance {
            checkpoints: vec![FileDigest::of(pa)?, FileDigest::of(pb)?],
            align_data: align_parts.iter().flat_map(|(x, y)| [x.name.clone(), y.name.clone()]).collect(),
            eval_data: pair.iter().flat_map(|(x, y)| [x.train.name.clone(), y.train.name.clone()]).collect(),
            seed: cfg.align.seed,
        },
    };
    let path = ctx.out(&format!("merge-{stem}.json"));
    report::write_json(&rep, &path)?;
    match rep.metrics.midpoint_acc {
        Some(acc) => println!("{stem}: midpoint accuracy {acc:.4}, report {}", path.display()),
        None => println!("{stem}: l2 {:.4} (no evaluation data), report {}", rep.metrics.l2_raw, path.display()),
    }
    Ok(())
}

fn sweep_cmd(ctx: &Ctx, pa: &Path, pb: &Path, perm: Option<&Path>, eval: Option<&str>) -> CliResult<()> {
    let cfg = &ctx.loaded.config;
    let (ca, cb) = (load_model(pa)?, load_model(pb)?);
    let (a, b) = require_eval(eval_pair(ctx, eval, &ca, &cb)?, "sweep")?;
    let params_b = match perm {
        Some(p) => {
            let pi: PermutationSet = report::read_json(p)?;
            align::apply_permutation(&cb.params, &pi)?
        }
        None => cb.params.clone(),
    };
    let (_, test_mix) = pipeline::mixes(&a, &b, cfg.sweep.alpha)?;
    let s = landscape::sweep(&ca.params, &params_b, &test_mix, cfg.sweep.grid_size)?;
    pipeline::check_sweep(&s)?;
    report::emit_sweep(&s, &ctx.out_dir, "sweep")?;
    report::write_json(&s, &ctx.out("sweep.json"))?;
    println!("peak mixture loss {:.4}", s.peak_loss_ab());
    Ok(())
}

fn condense_cmd(ctx: &Ctx, names: &[String]) -> CliResult<()> {
    use rayon::prelude::*;
    let cfg = &ctx.loaded.config;
    let outs: Vec<PathBuf> = names
        .par_iter()
        .map(|name| {
            let split = ctx.loaded.dataset(name)?;
            let spec = cfg.spec_for(&split.train)?;
            let c = permweld_core::condense::condense(&split.train, &spec, &cfg.condense)?;
            let path = ctx.out(&format!("{}.pmds", c.file_name()));
            at_path(data::save_dataset(&c.to_clamped_dataset(), &path), &path)?;
            Ok(path)
        })
        .collect::<CliResult<_>>()?;
    for p in outs {
        println!("{}", p.display());
    }
    Ok(())
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn table1(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.loaded.config;
    let base = ctx.loaded.dataset(&cfg.table1.base)?;
    let r = pipeline::run_table1(cfg, &base)?;
    let rows: Vec<Vec<String>> = r
        .mean
        .iter()
        .map(|m| {
            vec![
                m.degree.to_string(),
                m.l2_raw.to_string(),
                m.l2_per_param.to_string(),
                m.barrier.to_string(),
                pct(m.facc),
                pct(m.acc_wm),
            ]
        })
        .collect();
    report::write_csv(
        &["degree", "l2_raw", "l2_per_param", "barrier", "facc", "acc_wm"],
        &rows,
        &ctx.out("table1.csv"),
    )?;
    report::write_json(
        &json!({"tool_version": TOOL_VERSION, "config_digest": cfg.digest(), "result": r}),
        &ctx.out("table1.json"),
    )?;
    for (col, rho) in &r.spearman_vs_acc_wm {
        println!("spearman({col}, acc_wm) = {rho:.3}");
    }
    Ok(())
}

fn table2(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.loaded.config;
    let [x, y] = &cfg.table2.pair;
    let (a, b) = (ctx.loaded.dataset(x)?, ctx.loaded.dataset(y)?);
    let r = pipeline::run_table2(cfg, &a, &b)?;
    let rows: Vec<Vec<String>> = TABLE2_ROWS
        .iter()
        .zip(&r.mean)
        .map(|(name, &acc)| vec![name.to_string(), pct(acc)])
        .collect();
    report::write_csv(&["row", "acc"], &rows, &ctx.out("table2.csv"))?;
    if let Some(first) = r.seeds.first() {
        for (name, s) in &first.sweeps {
            let stem = format!("table2-sweep-{}", name.to_lowercase().replace(['(', ')'], "").replace(' ', "-"));
            report::emit_sweep(s, &ctx.out_dir, &stem)?;
        }
    }
    report::write_json(
        &json!({"tool_version": TOOL_VERSION, "config_digest": cfg.digest(), "result": r}),
        &ctx.out("table2.json"),
    )?;
    for row in rows {
        println!("{:<16} {}", row[0], row[1]);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PopulationReport {
    tool_version: String,
    config_digest: String,
    members: Vec<landscape::PopulationMember>,
    /// Spearman correlation of each metric with the midpoint test loss.
    spearman_vs_test_loss: std::collections::BTreeMap<String, f64>,
}

fn population(ctx: &Ctx, pa: &Path, pb: &Path, eval: Option<&str>) -> CliResult<()> {
    let cfg = &ctx.loaded.config;
    let (ca, cb) = (load_model(pa)?, load_model(pb)?);
    let (a, b) = require_eval(eval_pair(ctx, eval, &ca, &cb)?, "population")?;
    let (train_mix, test_mix) = pipeline::mixes(&a, &b, cfg.sweep.alpha)?;
    let members =
        landscape::generate_permutation_population(&ca.params, &cb.params, &train_mix, &test_mix, &cfg.population)?;
    let loss: Vec<f64> = members.iter().map(|m| m.test_loss).collect();
    let mut corr = std::collections::BTreeMap::new();
    let cols: [(&str, fn(&landscape::PopulationMember) -> f64); 3] = [
        ("barrier", |m| m.metrics.barrier),
        ("sharpness", |m| m.metrics.sharpness),
        ("l2_raw", |m| m.metrics.l2_raw),
    ];
    for (name, f) in cols {
        let xs: Vec<f64> = members.iter().map(f).collect();
        if let Ok(rho) = landscape::spearman(&xs, &loss) {
            corr.insert(name.to_string(), rho);
        }
    }
    let rows: Vec<Vec<String>> = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (beta, cap, seed) = m.sources[0];
            vec![
                i.to_string(),
                beta.to_string(),
                cap.to_string(),
                seed.to_string(),
                m.sources.len().to_string(),
                m.metrics.l2_raw.to_string(),
                m.metrics.barrier.to_string(),
                m.metrics.sharpness.to_string(),
                m.test_loss.to_string(),
                m.metrics.midpoint_acc.to_string(),
            ]
        })
        .collect();
    report::write_csv(
        &[
            "member",
            "beta",
            "sweep_cap",
            "seed",
            "duplicates",
            "l2_raw",
            "barrier",
            "sharpness",
            "test_loss",
            "midpoint_acc",
        ],
        &rows,
        &ctx.out("population.csv"),
    )?;
    for (name, rho) in &corr {
        println!("spearman({name}, test_loss) = {rho:.3}");
    }
    report::write_json(
        &PopulationReport {
            tool_version: TOOL_VERSION.into(),
            config_digest: cfg.digest(),
            members,
            spearman_vs_test_loss: corr,
        },
        &ctx.out("population.json"),
    )?;
    Ok(())
}

/// Cosine similarities; each `*_distance` field is `1 - similarity`.
#[derive(Debug, Serialize, Deserialize)]
struct OverlapReport {
    tool_version: String,
    config_digest: String,
    importance_similarity: f64,
    importance_distance: f64,
    weight_similarity_naive: f64,
    weight_similarity_wm: f64,
    weight_distance_wm: f64,
    fisher_samples: [usize; 2],
}

fn overlap(ctx: &Ctx, pa: &Path, pb: &Path, eval: Option<&str>) -> CliResult<()> {
    let cfg = &ctx.loaded.config;
    let (ca, cb) = (load_model(pa)?, load_model(pb)?);
    let (a, b) = require_eval(eval_pair(ctx, eval, &ca, &cb)?, "overlap")?;
    let pi = align::weight_matching(&ca.params, &cb.params, &cfg.align)?;
    let pb_wm: Params = align::apply_permutation(&cb.params, &pi)?;
    let fa = landscape::fisher_diagonal(&ca.params, &a.train, cfg.fisher.max_samples, cfg.align.seed)?;
    let fb = landscape::fisher_diagonal(&pb_wm, &b.train, cfg.fisher.max_samples, cfg.align.seed)?;
    let imp = landscape::importance_overlap(&fa, &fb)?;
    let w_wm = landscape::weight_overlap(&ca.params, &pb_wm)?;
    let rep = OverlapReport {
        tool_version: TOOL_VERSION.into(),
        config_digest: cfg.digest(),
        importance_similarity: imp,
        importance_distance: 1.0 - imp,
        weight_similarity_naive: landscape::weight_overlap(&ca.params, &cb.params)?,
        weight_similarity_wm: w_wm,
        weight_distance_wm: 1.0 - w_wm,
        fisher_samples: [fa.sample_count, fb.sample_count],
    };
    report::write_json(&rep, &ctx.out("overlap.json"))?;
    println!(
        "importance similarity {:.4}, weight similarity naive {:.4} / wm {:.4}",
        rep.importance_similarity, rep.weight_similarity_naive, rep.weight_similarity_wm
    );
    // Accuracy of the WM midpoint, for context next to the overlaps.
    let (_, test_mix) = pipeline::mixes(&a, &b, cfg.sweep.alpha)?;
    let mid = align::merge_interpolate(&ca.params, &pb_wm, 0.5)?;
    println!("wm midpoint accuracy {:.4}", evaluate(&mid, &test_mix)?.accuracy);
    Ok(())
}
