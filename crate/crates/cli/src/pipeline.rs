//! End-to-end experiment pipelines shared by the commands.

use std::collections::BTreeMap;

use clap::ValueEnum;
use permweld_core::align::{self, AlignConfig, PermutationSet, SteConfig};
use permweld_core::condense;
use permweld_core::data;
use permweld_core::landscape::{self, SweepReport};
use permweld_core::train::{self, evaluate, EpochStats};
use permweld_core::{Checkpoint, Condensed, Data, MergeMetrics, Mixed, Params, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, Split};
use crate::error::{CliError, CliResult};
use crate::report::ReportMetrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Wm,
    Fwm,
    Ste,
    Fisher,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Wm => "wm",
            Method::Fwm => "fwm",
            Method::Ste => "ste",
            Method::Fisher => "fisher",
        }
    }

    /// Whether the alignment itself consumes a dataset mixture.
    pub fn needs_data(self) -> bool {
        matches!(self, Method::Ste | Method::Fisher)
    }
}

/// Role offsets keep the models of one seed on distinct initialisations.
pub(crate) fn derived_seed(base: u64, seed: u64, role: u64) -> u64 {
    base.wrapping_add(seed.wrapping_mul(1000)).wrapping_add(role)
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Trains on `train` and records final train and test metrics.
pub fn train_model(cfg: &ExperimentConfig, train: &Data, test: &Data, tc: &TrainConfig) -> CliResult<Trained> {
    let spec = cfg.spec_for(train)?;
    let run = train::train(train, &spec, tc)?;
    let tr = evaluate(&run.params, train)?;
    let te = evaluate(&run.params, test)?;
    let mut meta = BTreeMap::new();
    meta.insert("dataset".to_string(), json!(train.name));
    meta.insert("config_digest".to_string(), json!(cfg.digest()));
    meta.insert("seed".to_string(), json!(tc.seed));
    meta.insert("train_loss".to_string(), json!(tr.loss));
    meta.insert("train_acc".to_string(), json!(tr.accuracy));
    meta.insert("test_loss".to_string(), json!(te.loss));
    meta.insert("test_acc".to_string(), json!(te.accuracy));
    Ok(Trained {
        checkpoint: Checkpoint::new(run.params, meta),
        history: run.history,
    })
}

pub struct Merged {
    pub permutation: PermutationSet,
    /// Model B after the permutation.
    pub permuted_b: Params,
    pub merged: Params,
}

/// Aligns `b` to `a` and merges at the midpoint. `align_data` feeds STE and
/// Fisher; `grad_data` is model B's own training set, used by FWM.
pub fn align_and_merge(
    method: Method,
    a: &Params,
    b: &Params,
    align_cfg: &AlignConfig,
    fisher: &crate::config::FisherConfig,
    align_data: Option<&Mixed>,
    grad_data: Option<&Data>,
) -> CliResult<Merged> {
    let need_mix = || {
        align_data.ok_or_else(|| {
            CliError::usage(format!(
                "method {} needs a dataset mixture (--data A,B); only naive, wm and fwm are weight-only",
                method.name()
            ))
        })
    };
    let permutation = match method {
        Method::Naive => PermutationSet::identity(a.spec()),
        Method::Wm | Method::Fisher => align::weight_matching(a, b, align_cfg)?,
        Method::Fwm => {
            let d = grad_data.ok_or_else(|| {
                CliError::usage("fwm needs model B's training set for its gradient; pass --eval A,B or train with a config")
            })?;
            let g = landscape::full_gradient(b, d)?;
            align::flat_weight_matching(a, b, &g, align_cfg)?
        }
        Method::Ste => align::ste_align(a, b, need_mix()?, align_cfg)?.permutation,
    };
    let permuted_b = align::apply_permutation(b, &permutation)?;
    let merged = if method == Method::Fisher {
        let mix = need_mix()?;
        let fa = landscape::fisher_diagonal(a, mix.part_a, fisher.max_samples, align_cfg.seed)?;
        let fb = landscape::fisher_diagonal(&permuted_b, mix.part_b, fisher.max_samples, align_cfg.seed)?;
        align::fisher_merge(a, &permuted_b, &fa, &fb, fisher.damping)?
    } else {
        align::merge_interpolate(a, &permuted_b, 0.5)?
    };
    if !merged.all_finite() {
        return Err(CliError::Numeric(format!("{} merge produced non-finite weights", method.name())));
    }
    Ok(Merged {
        permutation,
        permuted_b,
        merged,
    })
}

/// Metrics of a merge on a pair; `midpoint_*` describe the merged model
/// itself (which differs from the interpolation midpoint for Fisher).
pub fn evaluate_merge(
    a: &Params,
    m: &Merged,
    train: &Mixed,
    test: &Mixed,
    grid: usize,
) -> CliResult<(ReportMetrics, MergeMetrics, SweepReport)> {
    let (mut metrics, sweep) = landscape::merge_metrics(a, &m.permuted_b, train, test, grid)?;
    let te = evaluate(&m.merged, test)?;
    metrics.midpoint_acc = te.accuracy;
    check_sweep(&sweep)?;
    Ok((ReportMetrics::full(&metrics, te.loss), metrics, sweep))
}

/// Endpoint and mixture-column consistency of an emitted sweep.
pub fn check_sweep(s: &SweepReport) -> CliResult<()> {
    let ok = s.len() >= 2
        && s.lambdas[0] == 0.0
        && s.lambdas[s.len() - 1] == 1.0
        && s.linearity_error() <= 1e-6
        && s.loss_ab.iter().chain(&s.acc_ab).all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(CliError::Numeric("sweep failed its consistency checks".into()))
    }
}

pub fn mixes<'a>(a: &'a Split, b: &'a Split, alpha: f64) -> CliResult<(Mixed<'a>, Mixed<'a>)> {
    Ok((data::mix(&a.train, &b.train, alpha)?, data::mix(&a.test, &b.test, alpha)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub degree: f64,
    pub seed: Option<u64>,
    pub l2_raw: f64,
    pub l2_per_param: f64,
    pub barrier: f64,
    pub sharpness: f64,
    pub facc: f64,
    pub acc_wm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Result {
    pub runs: Vec<Table1Row>,
    /// Seed-averaged rows, one per angle.
    pub mean: Vec<Table1Row>,
    /// Spearman correlation of each column with `acc_wm`, pooled over seeds.
    pub spearman_vs_acc_wm: BTreeMap<String, f64>,
    pub sweeps: Vec<SweepReport>,
}

fn rotated(base: &Split, degrees: f64) -> CliResult<Split> {
    let dim = base.train.dim();
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(CliError::usage(format!("table1 base dimension {dim} is not a square image")));
    }
    let name = format!("{}-rot{degrees}", base.train.name);
    Ok(Split {
        train: data::rotate(&base.train, degrees, side, side)?.renamed(name.clone()),
        test: data::rotate(&base.test, degrees, side, side)?.renamed(format!("{name}-test")),
    })
}

/// Trains one model on the base set and one per rotation angle for every
/// seed, merges each pair with WM and tabulates the diagnostics.
pub fn run_table1(cfg: &ExperimentConfig, base: &Split) -> CliResult<Table1Result> {
    let t1 = &cfg.table1;
    if t1.angles.is_empty() || t1.seeds.is_empty() {
        return Err(CliError::usage("table1 needs at least one angle and one seed"));
    }
    let rots: Vec<Split> = t1.angles.iter().map(|&d| rotated(base, d)).collect::<CliResult<_>>()?;
    // Job (seed index, None) trains on the base set, (seed index, Some(k)) on rotation k.
    let jobs: Vec<(usize, Option<usize>)> = (0..t1.seeds.len())
        .flat_map(|s| std::iter::once((s, None)).chain((0..rots.len()).map(move |k| (s, Some(k)))))
        .collect();
    let models: Vec<Params> = jobs
        .par_iter()
        .map(|&(s, k)| {
            let seed = t1.seeds[s];
            let (split, role) = match k {
                None => (base, 0),
                Some(k) => (&rots[k], 1 + k as u64),
            };
            let tc = TrainConfig {
                seed: derived_seed(cfg.train.seed, seed, role),
                ..cfg.train.clone()
            };
            eprintln!("table1: training on {} (seed {seed})", split.train.name);
            train_model(cfg, &split.train, &split.test, &tc).map(|t| t.checkpoint.params)
        })
        .collect::<CliResult<_>>()?;

    let per_seed = 1 + rots.len();
    let pairs: Vec<(usize, usize)> = (0..t1.seeds.len()).flat_map(|s| (0..rots.len()).map(move |k| (s, k))).collect();
    let results: Vec<(Table1Row, SweepReport)> = pairs
        .par_iter()
        .map(|&(s, k)| {
            let seed = t1.seeds[s];
            let a = &models[s * per_seed];
            let b = &models[s * per_seed + 1 + k];
            let (train_mix, test_mix) = mixes(base, &rots[k], cfg.sweep.alpha)?;
            let acfg = AlignConfig {
                seed: cfg.align.seed.wrapping_add(seed),
                ..cfg.align.clone()
            };
            let m = align_and_merge(Method::Wm, a, b, &acfg, &cfg.fisher, None, None)?;
            let (_, mm, sweep) = evaluate_merge(a, &m, &train_mix, &test_mix, cfg.sweep.grid_size)?;
            Ok((
                Table1Row {
                    degree: t1.angles[k],
                    seed: Some(seed),
                    l2_raw: mm.l2_raw,
                    l2_per_param: mm.l2_per_param,
                    barrier: mm.barrier,
                    sharpness: mm.sharpness,
                    facc: mm.flipped_acc,
                    acc_wm: mm.midpoint_acc,
                },
                sweep,
            ))
        })
        .collect::<CliResult<_>>()?;
    let (runs, sweeps): (Vec<Table1Row>, Vec<SweepReport>) = results.into_iter().unzip();

    let mean = t1
        .angles
        .iter()
        .map(|&degree| {
            let rows: Vec<&Table1Row> = runs.iter().filter(|r| r.degree == degree).collect();
            let avg = |f: fn(&Table1Row) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            Table1Row {
                degree,
                seed: None,
                l2_raw: avg(|r| r.l2_raw),
                l2_per_param: avg(|r| r.l2_per_param),
                barrier: avg(|r| r.barrier),
                sharpness: avg(|r| r.sharpness),
                facc: avg(|r| r.facc),
                acc_wm: avg(|r| r.acc_wm),
            }
        })
        .collect();

    let acc: Vec<f64> = runs.iter().map(|r| r.acc_wm).collect();
    let columns: [(&str, fn(&Table1Row) -> f64); 5] = [
        ("degree", |r| r.degree),
        ("l2_raw", |r| r.l2_raw),
        ("barrier", |r| r.barrier),
        ("sharpness", |r| r.sharpness),
        ("facc", |r| r.facc),
    ];
    let mut spearman_vs_acc_wm = BTreeMap::new();
    for (name, f) in columns {
        let xs: Vec<f64> = runs.iter().map(f).collect();
        if let Ok(rho) = landscape::spearman(&xs, &acc) {
            spearman_vs_acc_wm.insert(name.to_string(), rho);
        }
    }
    Ok(Table1Result {
        runs,
        mean,
        spearman_vs_acc_wm,
        sweeps,
    })
}

pub const TABLE2_ROWS: [&str; 10] = [
    "Model A",
    "Model B",
    "Model AB",
    "Ensemble",
    "Data Cond",
    "Naive",
    "WM",
    "STE (Full)",
    "STE (Data Cond)",
    "Fisher",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Seed {
    pub seed: u64,
    /// Test-mixture accuracy per row, in [`TABLE2_ROWS`] order.
    pub acc: Vec<f64>,
    /// Full metrics of the merge rows, keyed by row name.
    pub merges: BTreeMap<String, MergeMetrics>,
    pub sweeps: BTreeMap<String, SweepReport>,
}

impl Table2Seed {
    pub fn row(&self, name: &str) -> f64 {
        let i = TABLE2_ROWS.iter().position(|r| *r == name).expect("known row");
        self.acc[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Result {
    pub pair: [String; 2],
    pub ipc: usize,
    pub seeds: Vec<Table2Seed>,
    pub mean: Vec<f64>,
}

/// Condenses both training sets (in parallel), clamped to `[0, 1]`.
pub fn condense_pair(cfg: &ExperimentConfig, a: &Data, b: &Data) -> CliResult<(Condensed, Condensed)> {
    let spec = cfg.spec_for(a)?;
    let cb_cfg = permweld_core::CondenseConfig {
        seed: cfg.condense.seed.wrapping_add(1),
        ..cfg.condense.clone()
    };
    let (ca, cb) = rayon::join(
        || condense::condense(a, &spec, &cfg.condense),
        || condense::condense(b, &spec, &cb_cfg),
    );
    let clamp = |c: Condensed| Condensed::new(c.source_name.clone(), c.ipc, c.to_clamped_dataset());
    Ok((clamp(ca?)?, clamp(cb?)?))
}

/// Every row of the merging comparison for one dataset pair.
pub fn run_table2(cfg: &ExperimentConfig, a: &Split, b: &Split) -> CliResult<Table2Result> {
    let t2 = &cfg.table2;
    if t2.seeds.is_empty() {
        return Err(CliError::usage("table2 needs at least one seed"));
    }
    let alpha = cfg.sweep.alpha;
    let (train_mix, test_mix) = mixes(a, b, alpha)?;
    eprintln!("table2: condensing {} and {}", a.train.name, b.train.name);
    let (ca, cb) = condense_pair(cfg, &a.train, &b.train)?;
    let cond_mix = data::mix(&ca.data, &cb.data, alpha)?;

    // Per seed: model A, model B, model AB, scratch on the condensed union.
    let jobs: Vec<(u64, u64)> = t2.seeds.iter().flat_map(|&s| (0..4).map(move |r| (s, r))).collect();
    let models: Vec<Params> = jobs
        .par_iter()
        .map(|&(s, role)| {
            let base = if role == 3 { &t2.condensed_train } else { &cfg.train };
            let tc = TrainConfig {
                seed: derived_seed(cfg.train.seed, s, role),
                ..base.clone()
            };
            let (tr, te) = match role {
                0 => (a.train.clone(), &a.test),
                1 => (b.train.clone(), &b.test),
                2 => (train::balanced_concat(&a.train, &b.train, tc.seed)?, &a.test),
                _ => (train::balanced_concat(&ca.data, &cb.data, tc.seed)?, &a.test),
            };
            eprintln!("table2: training on {} (seed {s})", tr.name);
            train_model(cfg, &tr, te, &tc).map(|t| t.checkpoint.params)
        })
        .collect::<CliResult<_>>()?;

    let seeds: Vec<Table2Seed> = t2
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let [ma, mb, mab, scratch] = [&models[4 * i], &models[4 * i + 1], &models[4 * i + 2], &models[4 * i + 3]];
            let acfg = AlignConfig {
                seed: cfg.align.seed.wrapping_add(s),
                ..cfg.align.clone()
            };
            let cond_cfg = AlignConfig {
                ste: SteConfig {
                    epochs: t2.condensed_ste_epochs,
                    ..acfg.ste.clone()
                },
                ..acfg.clone()
            };
            let mut acc = vec![
                evaluate(ma, &test_mix)?.accuracy,
                evaluate(mb, &test_mix)?.accuracy,
                evaluate(mab, &test_mix)?.accuracy,
                train::ensemble_accuracy(ma, mb, &test_mix)?,
                evaluate(scratch, &test_mix)?.accuracy,
            ];
            let mut merges = BTreeMap::new();
            let mut sweeps = BTreeMap::new();
            let runs: [(&str, Method, &AlignConfig, Option<&Mixed>); 5] = [
                ("Naive", Method::Naive, &acfg, None),
                ("WM", Method::Wm, &acfg, None),
                ("STE (Full)", Method::Ste, &acfg, Some(&train_mix)),
                ("STE (Data Cond)", Method::Ste, &cond_cfg, Some(&cond_mix)),
                ("Fisher", Method::Fisher, &acfg, Some(&train_mix)),
            ];
            for (row, method, ac, mix) in runs {
                eprintln!("table2: seed {s}: {row}");
                let m = align_and_merge(method, ma, mb, ac, &cfg.fisher, mix, None)?;
                let (_, mm, sweep) = evaluate_merge(ma, &m, &train_mix, &test_mix, cfg.sweep.grid_size)?;
                acc.push(mm.midpoint_acc);
                merges.insert(row.to_string(), mm);
                sweeps.insert(row.to_string(), sweep);
            }
            Ok(Table2Seed {
                seed: s,
                acc,
                merges,
                sweeps,
            })
        })
        .collect::<CliResult<_>>()?;

    let mean = (0..TABLE2_ROWS.len())
        .map(|k| seeds.iter().map(|s| s.acc[k]).sum::<f64>() / seeds.len() as f64)
        .collect();
    Ok(Table2Result {
        pair: [a.train.name.clone(), b.train.name.clone()],
        ipc: cfg.condense.ipc,
        seeds,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Loaded;

    fn tiny() -> Loaded {
        let cfg = ExperimentConfig::from_json(
            r#"{
                "datasets": {
                    "a": {"kind": "blobs", "classes": 3, "per_class": 30, "test_per_class": 10, "dim": 4, "spread": 0.08, "seed": 2},
                    "b": {"kind": "rotated", "base": "a", "degrees": 90}
                },
                "model": {"hidden": [8]},
                "train": {"epochs": 5, "batch_size": 16, "learning_rate": 0.1},
                "align": {"ste": {"epochs": 2, "batch_size": 16}}
            }"#,
        )
        .unwrap();
        Loaded::from_config(cfg, ".").unwrap()
    }

    #[test]
    fn ste_without_data_is_usage_error() {
        let l = tiny();
        let a = l.dataset("a").unwrap();
        let m = train_model(&l.config, &a.train, &a.test, &l.config.train).unwrap();
        let p = &m.checkpoint.params;
        for method in [Method::Ste, Method::Fisher] {
            let e = align_and_merge(method, p, p, &l.config.align, &l.config.fisher, None, None)
                .err()
                .unwrap();
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains("needs a dataset mixture"));
        }
        let e = align_and_merge(Method::Fwm, p, p, &l.config.align, &l.config.fisher, None, None)
            .err()
            .unwrap();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn every_method_merges_a_model_with_itself_to_itself() {
        let l = tiny();
        let a = l.dataset("a").unwrap();
        let b = l.dataset("b").unwrap();
        let p = train_model(&l.config, &a.train, &a.test, &l.config.train).unwrap().checkpoint.params;
        let (train_mix, _) = mixes(&a, &b, 0.5).unwrap();
        for method in [Method::Naive, Method::Wm, Method::Fwm, Method::Fisher] {
            let m = align_and_merge(method, &p, &p, &l.config.align, &l.config.fisher, Some(&train_mix), Some(&a.train))
                .unwrap();
            assert!(m.permutation.is_identity(), "{method:?}");
            let diff = m.merged.flatten().sq_distance(&p.flatten()).unwrap();
            assert!(diff < 1e-10, "{method:?}: {diff}");
        }
    }

    #[test]
    fn derived_seeds_differ_by_role_and_seed() {
        let s: Vec<u64> = (0..3).flat_map(|seed| (0..4).map(move |r| derived_seed(5, seed, r))).collect();
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), s.len());
    }
}
