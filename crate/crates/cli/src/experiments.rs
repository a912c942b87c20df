//! The user-facing commands: search, flops, ablate, export and report.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use evoprune_core::evolve::{evaluation_stream, random_search, run_search, ParetoFront, SearchOutcome};
use evoprune_core::netgraph::{count_flops_full, load_graph, load_weights, save_graph, save_weights, LayerKind};
use evoprune_core::prunespace::{pruned_graph, Genome, SelectionStrategy, SpaceMode, SpaceSpec};
use evoprune_core::{Error, NetworkGraph, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::RunConfig;
use crate::evaluate::Prepared;

/// Search driver for one arm of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Nsga,
    Random,
}

pub fn run_arm(
    prepared: &Prepared,
    space: &SpaceSpec,
    strategy: SelectionStrategy,
    algorithm: Algorithm,
) -> Result<SearchOutcome> {
    let config = prepared.config.search_config()?;
    let calib = prepared.calibration()?;
    let evaluator = prepared.evaluator(space, &calib, strategy);
    match algorithm {
        Algorithm::Nsga => run_search(space, &evaluator, &config),
        Algorithm::Random => random_search(space, &evaluator, prepared.config.budget()?, &config),
    }
}

/// Writes a complete run directory: front, log, plot, and what `export`
/// needs to rebuild any evaluated member.
pub fn write_run(
    dir: &Path,
    prepared: &Prepared,
    config: &RunConfig,
    space: &SpaceSpec,
    outcome: &SearchOutcome,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(PARETO_CSV), pareto_csv(&outcome.front)?)?;
    fs::write(dir.join(RUNLOG), runlog_jsonl(&outcome.log)?)?;
    fs::write(
        dir.join(PARETO_SVG),
        pareto_svg(&outcome.archive, &[("front", &outcome.front)]),
    )?;
    fs::write(dir.join(RUN_CONFIG), config.to_json()?)?;
    fs::write(dir.join(SPACE), serde_json::to_string_pretty(space)?)?;
    save_graph(&prepared.graph, dir.join(MODEL_SPEC))?;
    save_weights(&prepared.weights, dir.join(BASE_WEIGHTS))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub dir: PathBuf,
    pub evaluations: usize,
    pub front_size: usize,
    pub base_accuracy: f64,
    pub base_flops: u64,
    pub hypervolume: f64,
}

pub fn cmd_search(config: &RunConfig) -> Result<SearchSummary> {
    let prepared = Prepared::new(config)?;
    let mode = config.resolved_mode(&prepared.graph);
    let space = prepared.space(mode)?;
    log::info!(
        "searching {} genes ({mode}), budget {}",
        space.len(),
        config.budget()?
    );
    let outcome = run_arm(&prepared, &space, config.strategy, Algorithm::Nsga)?;
    let mut stored = config.clone();
    stored.space_mode = Some(mode);
    write_run(&config.output, &prepared, &stored, &space, &outcome)?;
    let base_flops = count_flops_full(&prepared.graph)?;
    Ok(SearchSummary {
        dir: config.output.clone(),
        evaluations: outcome.log.len(),
        front_size: outcome.front.len(),
        base_accuracy: prepared.base_accuracy()?,
        base_flops,
        hypervolume: outcome.front.hypervolume(base_flops as f64),
    })
}

/// FLOPs of `model` (built-in name or spec path), or of the subnetwork
/// `genome` selects in the `mode` space.
pub fn cmd_flops(model: &str, genome: Option<&Genome>, mode: Option<SpaceMode>, min_ratio: f64) -> Result<u64> {
    let config = RunConfig {
        model: model.to_string(),
        space_mode: mode,
        min_ratio,
        ..RunConfig::default()
    };
    let graph = config.load_model()?;
    match genome {
        None => count_flops_full(&graph),
        Some(g) => {
            let space = evoprune_core::prunespace::build_space(&graph, config.resolved_mode(&graph), min_ratio)?;
            count_flops_full(&pruned_graph(&graph, &space, g)?)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    NsgaVsRandom,
    L1VsRandom,
    HeadnumVsHeaddim,
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nsga-vs-random" => Ok(Self::NsgaVsRandom),
            "l1-vs-random" => Ok(Self::L1VsRandom),
            "headnum-vs-headdim" => Ok(Self::HeadnumVsHeaddim),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (nsga-vs-random, l1-vs-random, headnum-vs-headdim)"
            ))),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NsgaVsRandom => "nsga-vs-random",
            Self::L1VsRandom => "l1-vs-random",
            Self::HeadnumVsHeaddim => "headnum-vs-headdim",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub evaluations: usize,
    pub front_size: usize,
    pub hypervolume: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecilePoint {
    pub flops: f64,
    pub first: f64,
    pub second: f64,
}

/// Fronts compared at ten evenly spaced FLOPs levels (bin centres) over the
/// range both fronts cover, each front linearly interpolated between its
/// members.
pub fn matched_deciles(a: &ParetoFront, b: &ParetoFront) -> Vec<DecilePoint> {
    let range = |f: &ParetoFront| {
        (
            f.members.first().map(|m| m.flops as f64),
            f.members.last().map(|m| m.flops as f64),
        )
    };
    let ((Some(a0), Some(a1)), (Some(b0), Some(b1))) = (range(a), range(b)) else {
        return Vec::new();
    };
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if lo > hi {
        return Vec::new();
    }
    (0..10)
        .filter_map(|i| {
            let flops = lo + (hi - lo) * (i as f64 + 0.5) / 10.0;
            Some(DecilePoint {
                flops,
                first: a.interpolate(flops)?,
                second: b.interpolate(flops)?,
            })
        })
        .collect()
}

pub fn mean_abs_gap(points: &[DecilePoint]) -> Option<f64> {
    (!points.is_empty()).then(|| points.iter().map(|p| (p.first - p.second).abs()).sum::<f64>() / points.len() as f64)
}

/// Fraction of levels where the first front is at least as accurate.
pub fn weak_dominance_fraction(points: &[DecilePoint]) -> Option<f64> {
    (!points.is_empty()).then(|| points.iter().filter(|p| p.first >= p.second).count() as f64 / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub seed: u64,
    pub arms: [ArmSummary; 2],
    pub deciles: Vec<DecilePoint>,
    pub mean_abs_gap: Option<f64>,
    pub weak_dominance: Option<f64>,
    #[serde(skip)]
    pub fronts: [ParetoFront; 2],
}

pub const ABLATION_JSON: &str = "ablation.json";

/// Two paired searches sharing the base model, data splits and seed; only
/// the ablated factor differs. Each arm gets its own run directory under
/// the configured output.
pub fn cmd_ablate(config: &RunConfig, mode: AblationMode) -> Result<AblationReport> {
    let prepared = Prepared::new(config)?;
    let base_mode = config.resolved_mode(&prepared.graph);
    let arms: [(&str, SpaceMode, SelectionStrategy, Algorithm); 2] = match mode {
        AblationMode::NsgaVsRandom => [
            ("nsga", base_mode, config.strategy, Algorithm::Nsga),
            ("random", base_mode, config.strategy, Algorithm::Random),
        ],
        AblationMode::L1VsRandom => [
            ("l1norm", base_mode, SelectionStrategy::L1norm, Algorithm::Nsga),
            ("random", base_mode, SelectionStrategy::Random, Algorithm::Nsga),
        ],
        AblationMode::HeadnumVsHeaddim => [
            ("head-count", SpaceMode::VitHeadCount, config.strategy, Algorithm::Nsga),
            ("head-dim", SpaceMode::VitHeadDim, config.strategy, Algorithm::Nsga),
        ],
    };
    let base_flops = count_flops_full(&prepared.graph)? as f64;
    let mut summaries = Vec::new();
    let mut fronts = Vec::new();
    let mut archives = Vec::new();
    for (name, space_mode, strategy, algorithm) in arms {
        let space = prepared.space(space_mode)?;
        log::info!("{mode} arm `{name}`: {} genes", space.len());
        let outcome = run_arm(&prepared, &space, strategy, algorithm)?;
        let mut stored = config.clone();
        stored.space_mode = Some(space_mode);
        stored.strategy = strategy;
        stored.output = config.output.join(name);
        write_run(&stored.output, &prepared, &stored, &space, &outcome)?;
        summaries.push(ArmSummary {
            name: name.to_string(),
            evaluations: outcome.log.len(),
            front_size: outcome.front.len(),
            hypervolume: outcome.front.hypervolume(base_flops),
        });
        fronts.push(outcome.front);
        archives.extend(outcome.archive);
    }
    let deciles = matched_deciles(&fronts[0], &fronts[1]);
    let svg = pareto_svg(
        &archives,
        &[(summaries[0].name.as_str(), &fronts[0]), (summaries[1].name.as_str(), &fronts[1])],
    );
    fs::write(config.output.join("comparison.svg"), svg)?;
    let fronts: [ParetoFront; 2] = fronts.try_into().map_err(|_| Error::Config("two arms expected".into()))?;
    let report = AblationReport {
        mode,
        seed: config.seed()?,
        arms: summaries.try_into().map_err(|_| Error::Config("two arms expected".into()))?,
        mean_abs_gap: mean_abs_gap(&deciles),
        weak_dominance: weak_dominance_fraction(&deciles),
        deciles,
        fronts,
    };
    fs::write(config.output.join(ABLATION_JSON), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// A run directory's configuration with the model and weights pointed at
/// the copies stored inside it.
pub fn load_run(dir: &Path) -> Result<(RunConfig, SpaceSpec)> {
    let mut config = RunConfig::from_file(dir.join(RUN_CONFIG))?;
    config.model = dir.join(MODEL_SPEC).to_string_lossy().into_owned();
    config.weights = Some(dir.join(BASE_WEIGHTS));
    let space: SpaceSpec = serde_json::from_str(&fs::read_to_string(dir.join(SPACE))?)?;
    Ok((config, space))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub genome: String,
    pub flops: u64,
    pub generation: usize,
    pub slot: usize,
    pub logged_accuracy: f64,
    pub reproduced_accuracy: f64,
    pub model: PathBuf,
    pub weights: PathBuf,
}

impl ExportReport {
    pub fn reproduced(&self) -> bool {
        self.logged_accuracy == self.reproduced_accuracy
    }
}

/// Rebuilds front member `member` (row index of the front CSV) with the
/// random stream it was evaluated with, writes its spec and weights to
/// `out`, then reloads both from disk and rescores them.
pub fn cmd_export(run_dir: &Path, member: usize, out: &Path) -> Result<ExportReport> {
    let rows = read_pareto_csv(run_dir.join(PARETO_CSV))?;
    let row = rows
        .get(member)
        .ok_or_else(|| Error::Config(format!("front has {} members, asked for #{member}", rows.len())))?;
    let genome = row.genome()?;
    let key = genome.to_string();
    let log = read_runlog(run_dir.join(RUNLOG))?;
    let rec = log
        .iter()
        .find(|r| r.genome == key)
        .ok_or_else(|| Error::Config(format!("genome {key} is not in the run log")))?;
    let (config, space) = load_run(run_dir)?;
    let prepared = Prepared::new(&config)?;
    let calib = prepared.calibration()?;
    let evaluator = prepared.evaluator(&space, &calib, config.strategy);
    let mut rng = evaluation_stream(config.seed()?, rec.generation, rec.slot);
    let (sub, weights) = evaluator.build(&genome, &mut rng)?;
    fs::create_dir_all(out)?;
    let (model, wpath) = (out.join("model.json"), out.join("weights.eapw"));
    save_graph(&sub.graph, &model)?;
    save_weights(&weights, &wpath)?;
    let graph = load_graph(&model)?;
    let reloaded = load_weights(&wpath)?;
    let reproduced_accuracy = evaluator.score(&graph, &reloaded)?;
    Ok(ExportReport {
        genome: key,
        flops: sub.flops,
        generation: rec.generation,
        slot: rec.slot,
        logged_accuracy: rec.proxy_accuracy,
        reproduced_accuracy,
        model,
        weights: wpath,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub member: usize,
    pub flops_ratio: f64,
    pub proxy_accuracy: f64,
    /// Layer that names the gene's group, e.g. an attention or MLP block.
    pub unit: String,
    pub kept: usize,
    pub full: usize,
}

pub const RETENTION_CSV: &str = "retention.csv";
pub const RETENTION_SVG: &str = "retention.svg";

fn unit_label(graph: &NetworkGraph, group: usize, head_dim: bool) -> String {
    let members = graph.group(group).map(|g| g.members.as_slice()).unwrap_or(&[]);
    let pick = members
        .iter()
        .filter_map(|m| graph.layer(&m.layer))
        .find(|l| matches!(l.kind, LayerKind::Attention | LayerKind::MlpBlock))
        .or_else(|| members.first().and_then(|m| graph.layer(&m.layer)));
    let name = pick.map_or_else(|| format!("group{group}"), |l| l.name.clone());
    if head_dim {
        format!("{name}.dim")
    } else {
        name
    }
}

/// Per-unit retention (kept / full) of every front member, as a table and
/// a plot with one line per member. For transformer runs the units are each
/// block's heads and MLP width.
pub fn cmd_report(run_dir: &Path) -> Result<Vec<RetentionRow>> {
    let rows = read_pareto_csv(run_dir.join(PARETO_CSV))?;
    let graph = load_graph(run_dir.join(MODEL_SPEC))?;
    let (_, space) = load_run(run_dir)?;
    let base = count_flops_full(&graph)? as f64;
    let labels: Vec<String> = space
        .genes
        .iter()
        .map(|g| unit_label(&graph, g.group, g.target == evoprune_core::prunespace::GeneTarget::HeadDim))
        .collect();
    let mut out = Vec::new();
    let mut series = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let genome = row.genome()?;
        space.check(&genome)?;
        let ratio = row.flops as f64 / base;
        let mut line = Vec::new();
        for ((gene, &v), unit) in space.genes.iter().zip(&genome.0).zip(&labels) {
            line.push(v as f64 / gene.upper as f64);
            out.push(RetentionRow {
                member: i,
                flops_ratio: ratio,
                proxy_accuracy: row.proxy_accuracy,
                unit: unit.clone(),
                kept: v,
                full: gene.upper,
            });
        }
        series.push((format!("#{i} {:.0}% FLOPs", 100.0 * ratio), line));
    }
    let mut w = csv::Writer::from_path(run_dir.join(RETENTION_CSV)).map_err(csv_err)?;
    for r in &out {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    // at most six members keep the plot legible
    let shown: Vec<(String, Vec<f64>)> = if series.len() <= 6 {
        series
    } else {
        (0..6).map(|k| series[k * (series.len() - 1) / 5].clone()).collect()
    };
    fs::write(
        run_dir.join(RETENTION_SVG),
        lines_svg(&shown, "unit (gene order)", "kept / full"),
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use evoprune_core::evolve::Individual;

    fn front(points: &[(u64, f64)]) -> ParetoFront {
        ParetoFront {
            members: points
                .iter()
                .map(|&(flops, accuracy)| Individual {
                    genome: Genome(vec![flops as usize]),
                    flops,
                    accuracy,
                    generation: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn deciles_over_shared_range() {
        let a = front(&[(10, 0.5), (100, 0.9)]);
        let b = front(&[(0, 0.4), (50, 0.8), (80, 0.85)]);
        let d = matched_deciles(&a, &b);
        assert_eq!(d.len(), 10);
        assert!((d[0].flops - 13.5).abs() < 1e-9);
        assert!((d[0].first - (0.5 + 0.4 * 3.5 / 90.0)).abs() < 1e-12);
        assert!((d[0].second - (0.4 + 0.4 * 13.5 / 50.0)).abs() < 1e-12);
        assert!((d[9].flops - 76.5).abs() < 1e-9);
        assert!((d[9].second - (0.8 + 0.05 * 26.5 / 30.0)).abs() < 1e-12);
        assert_eq!(weak_dominance_fraction(&d), Some(0.1));
        assert!(matched_deciles(&front(&[(1, 0.1)]), &front(&[(5, 0.1)])).is_empty());
    }

    #[test]
    fn identical_fronts_have_zero_gap() {
        let a = front(&[(10, 0.5), (40, 0.6), (100, 0.9)]);
        let d = matched_deciles(&a, &a);
        assert_eq!(mean_abs_gap(&d), Some(0.0));
        assert_eq!(weak_dominance_fraction(&d), Some(1.0));
    }

    #[test]
    fn ablation_modes_parse() {
        for m in [AblationMode::NsgaVsRandom, AblationMode::L1VsRandom, AblationMode::HeadnumVsHeaddim] {
            assert_eq!(m.to_string().parse::<AblationMode>().unwrap(), m);
        }
        assert!("nsga".parse::<AblationMode>().is_err());
    }
}
