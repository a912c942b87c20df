//! Proxy evaluation: decode a genome, reconstruct the pruned layers on the
//! calibration split and score top-1 accuracy on the evaluation split.

use evoprune_core::evolve::{Evaluation, Evaluator};
use evoprune_core::netgraph::{load_weights, proxy_accuracy};
use evoprune_core::prunespace::{build_space, decode, Genome, SelectionStrategy, SpaceMode, SpaceSpec, Subnetwork};
use evoprune_core::reconstruct::{reconstruct_network, CalibrationBatch};
use evoprune_core::{Error, NetworkGraph, Result, RngStream, WeightStore};

use crate::config::{DataSource, RunConfig, DEFAULT_TRAIN_SAMPLES};
use crate::data::{load_csv, load_idx, synthetic, DataSplits, Dataset, SyntheticSpec};
use crate::fit::fit_weights;

/// Samples per forward chunk during scoring.
pub const EVAL_BATCH: usize = 256;

/// Per-element noise of the default synthetic data.
pub const DEFAULT_NOISE: f64 = 1.0;

/// Everything a run needs before searching: the base network, its weights
/// and the data splits.
pub struct Prepared {
    pub config: RunConfig,
    pub graph: NetworkGraph,
    pub weights: WeightStore,
    pub splits: DataSplits,
}

pub fn load_data(config: &RunConfig, graph: &NetworkGraph) -> Result<Dataset> {
    match &config.data {
        DataSource::Synthetic {
            classes,
            dims,
            samples,
            seed,
            noise,
        } => synthetic(&SyntheticSpec {
            classes: classes.unwrap_or(graph.class_count),
            dims: dims.clone().unwrap_or_else(|| graph.input_shape.clone()),
            samples: samples.unwrap_or(config.recon_samples + config.eval_samples + DEFAULT_TRAIN_SAMPLES),
            seed: *seed,
            noise: noise.unwrap_or(DEFAULT_NOISE),
        }),
        DataSource::Idx { images, labels } => load_idx(images, labels),
        DataSource::Csv { path, dims } => load_csv(path, dims),
    }
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.check()?;
        let seed = config.seed()?;
        let graph = config.load_model()?;
        let data = load_data(config, &graph)?;
        if data.sample_shape() != graph.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "samples have shape {:?}, model expects {:?}",
                data.sample_shape(),
                graph.input_shape
            )));
        }
        if data.classes > graph.class_count {
            return Err(Error::Config(format!(
                "data has {} classes, model outputs {}",
                data.classes, graph.class_count
            )));
        }
        let splits = DataSplits::new(&data, config.recon_samples, config.eval_samples, seed)?;
        let weights = match &config.weights {
            Some(path) => load_weights(path)?,
            None => fit_weights(&graph, &splits.train, seed)?,
        };
        Ok(Self {
            config: config.clone(),
            graph,
            weights,
            splits,
        })
    }

    pub fn space(&self, mode: SpaceMode) -> Result<SpaceSpec> {
        build_space(&self.graph, mode, self.config.min_ratio)
    }

    pub fn calibration(&self) -> Result<CalibrationBatch> {
        CalibrationBatch::new(
            &self.graph,
            &self.weights,
            self.splits.recon.inputs.clone(),
            self.config.patches,
            self.config.tokens,
        )
    }

    pub fn evaluator<'a>(
        &'a self,
        space: &'a SpaceSpec,
        calib: &'a CalibrationBatch,
        strategy: SelectionStrategy,
    ) -> ProxyEvaluator<'a> {
        ProxyEvaluator {
            graph: &self.graph,
            weights: &self.weights,
            space,
            calib,
            eval: &self.splits.eval,
            strategy,
            reconstruct: self.config.reconstruct,
        }
    }

    /// Accuracy of the unpruned network on the evaluation split.
    pub fn base_accuracy(&self) -> Result<f64> {
        proxy_accuracy(
            &self.graph,
            &self.weights,
            &self.splits.eval.inputs,
            &self.splits.eval.labels,
            EVAL_BATCH,
        )
    }
}

pub struct ProxyEvaluator<'a> {
    pub graph: &'a NetworkGraph,
    pub weights: &'a WeightStore,
    pub space: &'a SpaceSpec,
    pub calib: &'a CalibrationBatch,
    pub eval: &'a Dataset,
    pub strategy: SelectionStrategy,
    pub reconstruct: bool,
}

impl ProxyEvaluator<'_> {
    /// The scored subnetwork with its final weights.
    pub fn build(&self, genome: &Genome, rng: &mut RngStream) -> Result<(Subnetwork, WeightStore)> {
        let sub = decode(self.graph, self.weights, self.space, genome, self.strategy, rng)?;
        let weights = if self.reconstruct {
            reconstruct_network(self.graph, self.weights, &sub, self.calib, rng)?.0
        } else {
            sub.weights.clone()
        };
        Ok((sub, weights))
    }

    pub fn score(&self, graph: &NetworkGraph, weights: &WeightStore) -> Result<f64> {
        proxy_accuracy(graph, weights, &self.eval.inputs, &self.eval.labels, EVAL_BATCH)
    }
}

impl Evaluator for ProxyEvaluator<'_> {
    fn evaluate(&self, genome: &Genome, rng: &mut RngStream) -> Result<Evaluation> {
        let (sub, weights) = self.build(genome, rng)?;
        Ok(Evaluation {
            flops: sub.flops,
            accuracy: self.score(&sub.graph, &weights)?,
        })
    }
}
