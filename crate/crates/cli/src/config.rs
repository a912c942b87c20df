//! Run configuration: a JSON file whose field names mirror the command-line
//! flags. Command-line values override file values.

use std::path::{Path, PathBuf};

use evoprune_core::evolve::SearchConfig;
use evoprune_core::netgraph::{load_graph, models, LayerKind};
use evoprune_core::prunespace::{SelectionStrategy, SpaceMode, DEFAULT_MIN_RATIO};
use evoprune_core::reconstruct::{DEFAULT_PATCHES, DEFAULT_TOKENS};
use evoprune_core::{Error, NetworkGraph, Result};
use serde::{Deserialize, Serialize};

/// Samples kept beyond the reconstruction and evaluation splits when the
/// synthetic generator sizes itself.
pub const DEFAULT_TRAIN_SAMPLES: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples: Option<usize>,
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise: Option<f64>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        dims: Vec<usize>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            classes: None,
            dims: None,
            samples: None,
            seed: 0,
            noise: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in model name or path to a model-spec JSON file.
    pub model: String,
    /// Weight file; when absent, weights are initialised and fitted to the
    /// training remainder of the data.
    pub weights: Option<PathBuf>,
    pub data: DataSource,
    /// Defaults to head-count pruning for transformers, channels otherwise.
    pub space_mode: Option<SpaceMode>,
    pub strategy: SelectionStrategy,
    pub min_ratio: f64,
    pub population: usize,
    pub mutations: Option<usize>,
    pub crossovers: Option<usize>,
    pub generations: usize,
    pub initial: usize,
    pub seed: Option<u64>,
    pub divisions: usize,
    pub mutation_prob: Option<f64>,
    pub max_front: Option<usize>,
    pub recon_samples: usize,
    pub eval_samples: usize,
    pub patches: usize,
    pub tokens: usize,
    /// Solve pruned layers by least squares; `false` evaluates sliced weights.
    pub reconstruct: bool,
    pub output: PathBuf,
    pub timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "toy-cnn".into(),
            weights: None,
            data: DataSource::default(),
            space_mode: None,
            strategy: SelectionStrategy::Random,
            min_ratio: DEFAULT_MIN_RATIO,
            population: 50,
            mutations: None,
            crossovers: None,
            generations: 30,
            initial: 64,
            seed: None,
            divisions: 99,
            mutation_prob: None,
            max_front: None,
            recon_samples: 512,
            eval_samples: 1024,
            patches: DEFAULT_PATCHES,
            tokens: DEFAULT_TOKENS,
            reconstruct: true,
            output: PathBuf::from("runs/latest"),
            timings: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required".into()))
    }

    pub fn check(&self) -> Result<()> {
        self.seed()?;
        let counts = [
            ("population", self.population),
            ("initial", self.initial),
            ("divisions", self.divisions),
            ("recon_samples", self.recon_samples),
            ("eval_samples", self.eval_samples),
            ("patches", self.patches),
            ("tokens", self.tokens),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(p) = self.mutation_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("mutation_prob {p} outside [0, 1]")));
            }
        }
        self.search_config()?.check()
    }

    pub fn search_config(&self) -> Result<SearchConfig> {
        let mut c = SearchConfig::new(self.population, self.generations, self.initial, self.seed()?);
        if let Some(m) = self.mutations {
            c.mutations = m;
        }
        if let Some(s) = self.crossovers {
            c.crossovers = s;
        }
        c.divisions = self.divisions;
        c.mutation_prob = self.mutation_prob;
        c.max_front = self.max_front;
        c.timings = self.timings;
        Ok(c)
    }

    /// Evaluations a search with this config performs.
    pub fn budget(&self) -> Result<usize> {
        let c = self.search_config()?;
        Ok(c.initial + c.generations * (c.mutations + c.crossovers))
    }

    pub fn load_model(&self) -> Result<NetworkGraph> {
        match models::builtin(&self.model) {
            Some(g) => Ok(g),
            None if Path::new(&self.model).exists() => load_graph(&self.model),
            None => Err(Error::Config(format!(
                "unknown model `{}`; expected a spec path or one of {}",
                self.model,
                models::BUILTIN_NAMES.join(", ")
            ))),
        }
    }

    pub fn resolved_mode(&self, graph: &NetworkGraph) -> SpaceMode {
        self.space_mode.unwrap_or_else(|| {
            if graph.layers.iter().any(|l| l.kind == LayerKind::Attention) {
                SpaceMode::VitHeadCount
            } else {
                SpaceMode::CnnChannels
            }
        })
    }
}
