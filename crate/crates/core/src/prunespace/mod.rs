//! Search-space encoding: one integer gene per dependency group (CNNs) or
//! per attention / MLP block (transformers), plus genetic operators.

mod decode;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use decode::{decode, pruned_graph, select_channels, select_head_dims, slice_weights, ChannelSelection, SelectionStrategy, Subnetwork};

use crate::error::{Error, Result};
use crate::netgraph::{Axis, GroupSizes, GroupUnit, LayerKind, NetworkGraph};

pub const DEFAULT_MIN_RATIO: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceMode {
    CnnChannels,
    VitHeadCount,
    VitHeadDim,
}

impl FromStr for SpaceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-channels" => Ok(SpaceMode::CnnChannels),
            "vit-head-count" => Ok(SpaceMode::VitHeadCount),
            "vit-head-dim" => Ok(SpaceMode::VitHeadDim),
            other => Err(Error::Config(format!(
                "unknown space mode `{other}` (cnn-channels, vit-head-count, vit-head-dim)"
            ))),
        }
    }
}

impl fmt::Display for SpaceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceMode::CnnChannels => "cnn-channels",
            SpaceMode::VitHeadCount => "vit-head-count",
            SpaceMode::VitHeadDim => "vit-head-dim",
        })
    }
}

/// What a gene value sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneTarget {
    /// Kept count of the group (channels, heads or hidden units).
    Width,
    /// Kept per-head dimension of the attention layer owning the group.
    HeadDim,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gene {
    pub group: usize,
    pub lower: usize,
    pub upper: usize,
    pub step: usize,
    pub target: GeneTarget,
}

impl Gene {
    /// Number of lattice points.
    pub fn cardinality(&self) -> usize {
        (self.upper - self.lower) / self.step + 1
    }

    pub fn value(&self, k: usize) -> usize {
        self.lower + k * self.step
    }

    pub fn contains(&self, v: usize) -> bool {
        v >= self.lower && v <= self.upper && (v - self.lower).is_multiple_of(self.step)
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        self.value(rng.random_range(0..self.cardinality()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub genes: Vec<Gene>,
    pub mode: SpaceMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Genome(pub Vec<usize>);

impl Genome {
    pub fn values(&self) -> &[usize] {
        &self.0
    }

    /// Semicolon-separated form used inside CSV cells.
    pub fn to_csv_cell(&self) -> String {
        self.join(";")
    }

    fn join(&self, sep: &str) -> String {
        self.0.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.join(","))
    }
}

impl FromStr for Genome {
    type Err = Error;

    /// Accepts comma- or semicolon-separated integers.
    fn from_str(s: &str) -> Result<Self> {
        s.split([',', ';'])
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad genome entry `{t}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Genome)
    }
}

fn lower_bound(size: usize, step: usize, min_ratio: f64) -> usize {
    let floor = ((min_ratio * size as f64).ceil() as usize).max(1);
    // largest lattice point anchored at `size` that still respects the floor
    let k = (size - floor.min(size)) / step;
    size - k * step
}

/// Builds the gene list for `graph`. Widths are kept counts; the lattice is
/// anchored at full width.
pub fn build_space(graph: &NetworkGraph, mode: SpaceMode, min_ratio: f64) -> Result<SpaceSpec> {
    if !(0.0..=1.0).contains(&min_ratio) {
        return Err(Error::Config(format!("min_ratio {min_ratio} outside [0, 1]")));
    }
    let mut genes = Vec::new();
    for g in &graph.groups {
        let c = g.original_size;
        let unit = graph.group_unit(g.id);
        let gene = match (mode, unit) {
            (SpaceMode::CnnChannels, GroupUnit::Channels) => Gene {
                group: g.id,
                lower: lower_bound(c, 1, min_ratio),
                upper: c,
                step: 1,
                target: GeneTarget::Width,
            },
            (SpaceMode::VitHeadCount, GroupUnit::Heads) => Gene {
                group: g.id,
                lower: 1,
                upper: c,
                step: 1,
                target: GeneTarget::Width,
            },
            (SpaceMode::VitHeadDim, GroupUnit::Heads) => {
                let layer = g
                    .members
                    .iter()
                    .find_map(|m| graph.layer(&m.layer).filter(|l| l.kind == LayerKind::Attention))
                    .ok_or_else(|| Error::Graph(format!("group {} has no attention layer", g.id)))?;
                let dh = layer.head_dim()?;
                let step = (dh / 16).max(1);
                Gene {
                    group: g.id,
                    lower: dh - (dh - step) / step * step,
                    upper: dh,
                    step,
                    target: GeneTarget::HeadDim,
                }
            }
            (SpaceMode::VitHeadCount | SpaceMode::VitHeadDim, GroupUnit::Hidden) => {
                let step = (c / 16).max(1);
                Gene {
                    group: g.id,
                    lower: lower_bound(c, step, min_ratio),
                    upper: c,
                    step,
                    target: GeneTarget::Width,
                }
            }
            _ => continue,
        };
        genes.push(gene);
    }
    if genes.is_empty() {
        return Err(Error::EmptySpace(format!("no prunable groups for mode {mode}")));
    }
    Ok(SpaceSpec { genes, mode })
}

impl SpaceSpec {
    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    pub fn full_genome(&self) -> Genome {
        Genome(self.genes.iter().map(|g| g.upper).collect())
    }

    pub fn check(&self, genome: &Genome) -> Result<()> {
        if genome.0.len() != self.genes.len() {
            return Err(Error::Bounds(format!(
                "genome has {} genes, space has {}",
                genome.0.len(),
                self.genes.len()
            )));
        }
        for (i, (g, &v)) in self.genes.iter().zip(&genome.0).enumerate() {
            if !g.contains(v) {
                return Err(Error::Bounds(format!(
                    "gene {i} = {v} outside {}..={} step {}",
                    g.lower, g.upper, g.step
                )));
            }
        }
        Ok(())
    }

    /// Kept width per group implied by `genome`; head-dim genes leave their
    /// group at full width.
    pub fn group_sizes(&self, genome: &Genome) -> GroupSizes {
        self.genes
            .iter()
            .zip(&genome.0)
            .filter(|(g, _)| g.target == GeneTarget::Width)
            .map(|(g, &v)| (g.group, v))
            .collect()
    }

    /// Bits needed to index the space: Σ log₂(upper) over genes.
    pub fn encoding_bits(&self) -> f64 {
        self.genes.iter().map(|g| (g.upper as f64).log2()).sum()
    }

    /// Channels the space spans: Σ upper over genes.
    pub fn total_channels(&self) -> usize {
        self.genes.iter().map(|g| g.upper).sum()
    }
}

/// Length of a per-channel binary encoding: one bit per input channel of
/// every layer consuming a prunable group.
pub fn one_hot_encoding_length(graph: &NetworkGraph) -> usize {
    let mut n = 0;
    for g in &graph.groups {
        for m in g.members.iter().filter(|m| m.axis == Axis::In) {
            if graph.layer(&m.layer).is_some_and(|l| !l.is_depthwise()) {
                n += g.original_size;
            }
        }
    }
    n
}

pub fn random_genome(space: &SpaceSpec, rng: &mut impl Rng) -> Genome {
    Genome(space.genes.iter().map(|g| g.sample(rng)).collect())
}

/// Resamples each gene with probability `p_m`.
pub fn mutate(genome: &Genome, space: &SpaceSpec, rng: &mut impl Rng, p_m: f64) -> Genome {
    Genome(
        genome
            .0
            .iter()
            .zip(&space.genes)
            .map(|(&v, g)| if rng.random_bool(p_m.clamp(0.0, 1.0)) { g.sample(rng) } else { v })
            .collect(),
    )
}

/// Uniform crossover.
pub fn crossover(a: &Genome, b: &Genome, rng: &mut impl Rng) -> Genome {
    Genome(
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
            .collect(),
    )
}
