//! Evolutionary search over genomes with NSGA-III survivor selection.
//! Objectives are `1 − accuracy` and FLOPs, both minimised.

mod nsga;

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use nsga::{associate, das_dennis, dominates, environmental_select, fast_nondominated_sort, ranks, Objectives};

use crate::error::{Error, Result};
use crate::prunespace::{crossover, mutate, random_genome, Genome, SpaceSpec};
use crate::tensor::RngStream;

/// Stream ids for the search's own draws; evaluators get streams derived
/// from `(generation, slot)`.
const STREAM_SEARCH: u64 = 0x5ea7c4;
const STREAM_EVAL: u64 = 0xe7a1;

/// The stream handed to the evaluator for the genome evaluated at
/// `(generation, slot)` of a run seeded with `seed`.
pub fn evaluation_stream(seed: u64, generation: usize, slot: usize) -> RngStream {
    RngStream::new(seed, STREAM_EVAL).derive(&[generation as u64, slot as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub flops: u64,
    pub accuracy: f64,
}

/// Scores one genome. Implementations must be deterministic given the
/// stream they receive.
pub trait Evaluator: Sync {
    fn evaluate(&self, genome: &Genome, rng: &mut RngStream) -> Result<Evaluation>;
}

impl<F> Evaluator for F
where
    F: Fn(&Genome, &mut RngStream) -> Result<Evaluation> + Sync,
{
    fn evaluate(&self, genome: &Genome, rng: &mut RngStream) -> Result<Evaluation> {
        self(genome, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    pub flops: u64,
    pub accuracy: f64,
    pub generation: usize,
}

impl Individual {
    pub fn objectives(&self) -> Objectives {
        [1.0 - self.accuracy, self.flops as f64]
    }
}

/// One run-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub generation: usize,
    pub slot: usize,
    pub genome: String,
    pub flops: u64,
    pub proxy_accuracy: f64,
    pub eval_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub mutations: usize,
    pub crossovers: usize,
    pub generations: usize,
    pub initial: usize,
    pub seed: u64,
    /// Das-Dennis divisions.
    pub divisions: usize,
    /// Per-gene resampling probability; `None` means 1 / gene count.
    pub mutation_prob: Option<f64>,
    /// Cap on the returned front size.
    pub max_front: Option<usize>,
    /// Record wall-clock evaluation time in the log.
    pub timings: bool,
}

impl SearchConfig {
    /// `M = S = P/2`, 100 reference points.
    pub fn new(population: usize, generations: usize, initial: usize, seed: u64) -> Self {
        Self {
            population,
            mutations: population / 2,
            crossovers: population - population / 2,
            generations,
            initial,
            seed,
            divisions: 99,
            mutation_prob: None,
            max_front: None,
            timings: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config(format!("population {} < 2", self.population)));
        }
        if self.initial == 0 {
            return Err(Error::Config("initial sample count must be positive".into()));
        }
        if self.mutations + self.crossovers == 0 && self.generations > 0 {
            return Err(Error::Config("no offspring per generation".into()));
        }
        if self.divisions == 0 {
            return Err(Error::Config("reference divisions must be positive".into()));
        }
        Ok(())
    }
}

/// Nondominated individuals sorted by FLOPs, strictly increasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub members: Vec<Individual>,
}

impl ParetoFront {
    /// Front 0 of `pool`. Among equal objective pairs the first occurrence
    /// is kept.
    pub fn from_individuals(pool: &[Individual]) -> Self {
        let mut members: Vec<Individual> = pool
            .iter()
            .filter(|a| !pool.iter().any(|b| dominates(&b.objectives(), &a.objectives())))
            .cloned()
            .collect();
        members.sort_by_key(|m| m.flops);
        members.dedup_by(|b, a| a.flops == b.flops);
        Self { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Keeps `k` members spread evenly by rank in FLOPs order, always
    /// including both ends.
    pub fn thin(&self, k: usize) -> Self {
        let n = self.members.len();
        if k >= n {
            return self.clone();
        }
        if k == 0 {
            return Self::default();
        }
        if k == 1 {
            return Self {
                members: vec![self.members[n - 1].clone()],
            };
        }
        let mut idx: Vec<usize> = (0..k).map(|i| (i * (n - 1) + (k - 1) / 2) / (k - 1)).collect();
        idx.dedup();
        Self {
            members: idx.into_iter().map(|i| self.members[i].clone()).collect(),
        }
    }

    /// Best accuracy reachable with at most `flops`.
    pub fn accuracy_at(&self, flops: f64) -> Option<f64> {
        self.members
            .iter()
            .filter(|m| m.flops as f64 <= flops)
            .map(|m| m.accuracy)
            .reduce(f64::max)
    }

    /// Piecewise-linear accuracy through the members; `None` outside their
    /// FLOPs range.
    pub fn interpolate(&self, flops: f64) -> Option<f64> {
        let first = self.members.first()?;
        let last = self.members.last()?;
        if flops < first.flops as f64 || flops > last.flops as f64 {
            return None;
        }
        let i = self.members.partition_point(|m| (m.flops as f64) < flops);
        let hi = &self.members[i];
        if i == 0 || hi.flops as f64 == flops {
            return Some(hi.accuracy);
        }
        let lo = &self.members[i - 1];
        let t = (flops - lo.flops as f64) / (hi.flops - lo.flops) as f64;
        Some(lo.accuracy + t * (hi.accuracy - lo.accuracy))
    }

    /// Hypervolume of `(1 − accuracy, flops / flops_scale)` against `(1, 1)`.
    pub fn hypervolume(&self, flops_scale: f64) -> f64 {
        let pts: Vec<Objectives> = self
            .members
            .iter()
            .map(|m| [1.0 - m.accuracy, m.flops as f64 / flops_scale])
            .collect();
        hypervolume(&pts, [1.0, 1.0])
    }
}

/// Area dominated by `points` and bounded by `reference` (minimisation).
pub fn hypervolume(points: &[Objectives], reference: Objectives) -> f64 {
    let mut pts: Vec<Objectives> = points
        .iter()
        .copied()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1])
        .collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut area = 0.0;
    let mut ceiling = reference[1];
    for p in pts {
        if p[1] < ceiling {
            area += (reference[0] - p[0]) * (ceiling - p[1]);
            ceiling = p[1];
        }
    }
    area
}

pub struct SearchOutcome {
    pub front: ParetoFront,
    /// Every successfully evaluated individual, in evaluation order.
    pub archive: Vec<Individual>,
    pub log: Vec<EvalRecord>,
    /// Population after the last generation, as archive indices.
    pub population: Vec<usize>,
}

/// Mutable search state shared by the evolutionary and random drivers.
pub struct Search<'a, E: Evaluator> {
    space: &'a SpaceSpec,
    evaluator: &'a E,
    config: SearchConfig,
    rng: RngStream,
    eval_root: RngStream,
    seen: HashSet<Genome>,
    refs: Vec<Vec<f64>>,
    pub archive: Vec<Individual>,
    pub log: Vec<EvalRecord>,
    pub population: Vec<usize>,
    /// Evaluator calls, failures included.
    pub evaluations: usize,
}

impl<'a, E: Evaluator> Search<'a, E> {
    pub fn new(space: &'a SpaceSpec, evaluator: &'a E, config: SearchConfig) -> Result<Self> {
        config.check()?;
        Ok(Self {
            space,
            evaluator,
            rng: RngStream::new(config.seed, STREAM_SEARCH),
            eval_root: RngStream::new(config.seed, STREAM_EVAL),
            refs: das_dennis(config.divisions, 2),
            config,
            seen: HashSet::new(),
            archive: Vec::new(),
            log: Vec::new(),
            population: Vec::new(),
            evaluations: 0,
        })
    }

    fn novel(&mut self, batch: &mut Vec<Genome>, candidate: Genome) -> bool {
        if self.seen.contains(&candidate) {
            return false;
        }
        self.seen.insert(candidate.clone());
        batch.push(candidate);
        true
    }

    /// Up to `count` genomes never seen before, drawn uniformly.
    fn random_batch(&mut self, count: usize) -> Vec<Genome> {
        let mut batch = Vec::with_capacity(count);
        let mut attempts = 0;
        while batch.len() < count && attempts < 100 * count.max(1) {
            attempts += 1;
            let g = random_genome(self.space, &mut self.rng);
            self.novel(&mut batch, g);
        }
        batch
    }

    /// Evaluates `batch` in parallel and appends successes to the archive.
    fn evaluate(&mut self, generation: usize, batch: Vec<Genome>) -> Vec<usize> {
        let timings = self.config.timings;
        let results: Vec<(Result<Evaluation>, f64)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, g)| {
                let mut rng = self.eval_root.derive(&[generation as u64, slot as u64]);
                let start = Instant::now();
                let r = self.evaluator.evaluate(g, &mut rng);
                (r, start.elapsed().as_secs_f64() * 1e3)
            })
            .collect();
        self.evaluations += batch.len();
        let mut added = Vec::new();
        for (slot, (genome, (res, ms))) in batch.into_iter().zip(results).enumerate() {
            match res {
                Ok(ev) if ev.accuracy.is_finite() => {
                    self.log.push(EvalRecord {
                        generation,
                        slot,
                        genome: genome.to_string(),
                        flops: ev.flops,
                        proxy_accuracy: ev.accuracy,
                        eval_ms: timings.then_some(ms),
                    });
                    added.push(self.archive.len());
                    self.archive.push(Individual {
                        genome,
                        flops: ev.flops,
                        accuracy: ev.accuracy,
                        generation,
                    });
                }
                Ok(ev) => log::warn!("genome {genome}: non-finite accuracy {}, discarded", ev.accuracy),
                Err(e) => log::warn!("genome {genome}: evaluation failed, discarded: {e}"),
            }
        }
        added
    }

    fn select(&mut self, pool: Vec<usize>) -> Vec<usize> {
        let objs: Vec<Objectives> = pool.iter().map(|&i| self.archive[i].objectives()).collect();
        let keep = environmental_select(&objs, self.config.population, &self.refs, &mut self.rng);
        keep.into_iter().map(|k| pool[k]).collect()
    }

    /// Evaluates the random initial set and selects the first population.
    pub fn initialize(&mut self) {
        let batch = self.random_batch(self.config.initial);
        let added = self.evaluate(0, batch);
        self.population = self.select(added);
    }

    fn tournament(&mut self, rank: &[usize]) -> usize {
        let n = self.population.len();
        let a = self.rng.random_range(0..n);
        let b = self.rng.random_range(0..n);
        if rank[b] < rank[a] {
            b
        } else {
            a
        }
    }

    /// One generation: `M` mutants and `S` crossover children of
    /// tournament-chosen parents, deduplicated against every genome seen so
    /// far, evaluated, then NSGA-III selection over parents ∪ offspring.
    pub fn next_generation(&mut self, generation: usize) {
        if self.population.is_empty() {
            return;
        }
        let objs: Vec<Objectives> = self.population.iter().map(|&i| self.archive[i].objectives()).collect();
        let rank = ranks(&fast_nondominated_sort(&objs), objs.len());
        let p_m = self.config.mutation_prob.unwrap_or(1.0 / self.space.len() as f64);
        let (m, s) = (self.config.mutations, self.config.crossovers);
        let mut batch = Vec::with_capacity(m + s);
        let mut attempts = 0;
        let cap = 100 * (m + s);
        while batch.len() < m && attempts < cap {
            attempts += 1;
            let p = self.tournament(&rank);
            let parent = self.archive[self.population[p]].genome.clone();
            let child = mutate(&parent, self.space, &mut self.rng, p_m);
            self.novel(&mut batch, child);
        }
        let mut attempts = 0;
        while batch.len() < m + s && attempts < cap {
            attempts += 1;
            let (a, b) = (self.tournament(&rank), self.tournament(&rank));
            let ga = self.archive[self.population[a]].genome.clone();
            let gb = &self.archive[self.population[b]].genome;
            let child = crossover(&ga, gb, &mut self.rng);
            self.novel(&mut batch, child);
        }
        if batch.len() < m + s {
            // space nearly exhausted around the population; top up at random
            let extra = self.random_batch(m + s - batch.len());
            batch.extend(extra);
        }
        let added = self.evaluate(generation, batch);
        let pool: Vec<usize> = self.population.iter().copied().chain(added).collect();
        self.population = self.select(pool);
    }

    pub fn finish(self) -> SearchOutcome {
        let mut front = ParetoFront::from_individuals(&self.archive);
        if let Some(k) = self.config.max_front {
            front = front.thin(k);
        }
        SearchOutcome {
            front,
            archive: self.archive,
            log: self.log,
            population: self.population,
        }
    }
}

/// The full evolutionary loop: random initial set, then `T` generations.
pub fn run_search<E: Evaluator>(space: &SpaceSpec, evaluator: &E, config: &SearchConfig) -> Result<SearchOutcome> {
    let mut search = Search::new(space, evaluator, config.clone())?;
    search.initialize();
    for g in 1..=config.generations {
        search.next_generation(g);
        log::debug!("generation {g}: {} evaluated", search.evaluations);
    }
    Ok(search.finish())
}

/// Uniform random sampling of `budget` distinct genomes, logged in batches
/// of the population size so generations line up with the evolutionary run.
pub fn random_search<E: Evaluator>(
    space: &SpaceSpec,
    evaluator: &E,
    budget: usize,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    let mut search = Search::new(space, evaluator, config.clone())?;
    let mut generation = 0;
    let mut left = budget;
    while left > 0 {
        let want = if generation == 0 { config.initial.min(left) } else { config.population.min(left) };
        let batch = search.random_batch(want);
        if batch.is_empty() {
            break;
        }
        left -= batch.len();
        search.evaluate(generation, batch);
        generation += 1;
    }
    search.population = (0..search.archive.len()).collect();
    Ok(search.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prunespace::{Gene, GeneTarget, SpaceMode};

    fn space(genes: usize, upper: usize) -> SpaceSpec {
        SpaceSpec {
            genes: (0..genes)
                .map(|i| Gene {
                    group: i,
                    lower: 1,
                    upper,
                    step: 1,
                    target: GeneTarget::Width,
                })
                .collect(),
            mode: SpaceMode::CnnChannels,
        }
    }

    #[test]
    fn front_interpolation() {
        let m = |flops: u64, accuracy: f64| Individual {
            genome: Genome(vec![flops as usize]),
            flops,
            accuracy,
            generation: 0,
        };
        let f = ParetoFront {
            members: vec![m(10, 0.2), m(20, 0.6), m(40, 0.7)],
        };
        assert_eq!(f.interpolate(10.0), Some(0.2));
        assert_eq!(f.interpolate(20.0), Some(0.6));
        assert!((f.interpolate(15.0).unwrap() - 0.4).abs() < 1e-12);
        assert!((f.interpolate(30.0).unwrap() - 0.65).abs() < 1e-12);
        assert_eq!(f.interpolate(40.0), Some(0.7));
        assert_eq!(f.interpolate(9.9), None);
        assert_eq!(f.interpolate(40.1), None);
        assert_eq!(ParetoFront::default().interpolate(1.0), None);
    }

    /// Larger genomes cost more and score better, with a seeded wobble.
    fn synthetic(g: &Genome, rng: &mut RngStream) -> Result<Evaluation> {
        let flops: u64 = g.0.iter().map(|&v| (v * v) as u64).sum();
        let acc = 1.0 - 1.0 / (1.0 + g.0.iter().sum::<usize>() as f64) + rng.random_range(0.0..1e-3);
        Ok(Evaluation { flops, accuracy: acc.min(1.0) })
    }

    #[test]
    fn reference_budgets_are_exact() {
        let s = space(20, 64);
        for (init, pop, gens, want) in [(64, 50, 30, 1564), (64, 32, 47, 1568)] {
            let cfg = SearchConfig::new(pop, gens, init, 1);
            let out = run_search(&s, &synthetic, &cfg).unwrap();
            assert_eq!(out.log.len(), want);
            assert_eq!(out.archive.len(), want);
            let uniq: HashSet<_> = out.archive.iter().map(|i| &i.genome).collect();
            assert_eq!(uniq.len(), want);
        }
    }

    #[test]
    fn per_generation_call_count() {
        let s = space(10, 32);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let counting = |g: &Genome, r: &mut RngStream| {
            calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            synthetic(g, r)
        };
        let cfg = SearchConfig::new(32, 0, 32, 2);
        let mut search = Search::new(&s, &counting, cfg).unwrap();
        search.initialize();
        let before = calls.load(std::sync::atomic::Ordering::Relaxed);
        search.next_generation(1);
        assert!(calls.load(std::sync::atomic::Ordering::Relaxed) - before <= 32);
    }

    #[test]
    fn zero_generations_front_is_initial_front() {
        let s = space(4, 16);
        let cfg = SearchConfig::new(8, 0, 30, 3);
        let out = run_search(&s, &synthetic, &cfg).unwrap();
        assert_eq!(out.archive.len(), 30);
        assert_eq!(out.front, ParetoFront::from_individuals(&out.archive));
        for m in &out.front.members {
            assert!(out.archive.iter().all(|o| !dominates(&o.objectives(), &m.objectives())));
        }
    }

    #[test]
    fn failures_are_discarded_not_fatal() {
        let s = space(3, 8);
        let flaky = |g: &Genome, r: &mut RngStream| {
            if g.0[0] == 1 {
                Err(Error::Numeric("boom".into()))
            } else {
                synthetic(g, r)
            }
        };
        let out = run_search(&s, &flaky, &SearchConfig::new(6, 3, 10, 4)).unwrap();
        assert!(out.archive.iter().all(|i| i.genome.0[0] != 1));
        assert!(!out.archive.is_empty());
    }

    #[test]
    fn small_population_rejected() {
        let s = space(3, 8);
        assert!(matches!(
            run_search(&s, &synthetic, &SearchConfig::new(1, 1, 4, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn runs_are_deterministic_across_thread_counts() {
        let s = space(6, 20);
        let cfg = SearchConfig::new(10, 5, 12, 9);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run_search(&s, &synthetic, &cfg).unwrap());
        let b = four.install(|| run_search(&s, &synthetic, &cfg).unwrap());
        assert_eq!(a.log, b.log);
        assert_eq!(a.front, b.front);
    }

    #[test]
    fn archive_best_is_monotone() {
        let s = space(5, 12);
        let out = run_search(&s, &synthetic, &SearchConfig::new(8, 6, 8, 5)).unwrap();
        for budget in [50u64, 100, 200, 400] {
            let mut best = f64::INFINITY;
            for g in 0..=6 {
                let cur = out
                    .archive
                    .iter()
                    .filter(|i| i.generation <= g && i.flops <= budget)
                    .map(|i| 1.0 - i.accuracy)
                    .fold(f64::INFINITY, f64::min);
                assert!(cur <= best);
                best = cur;
            }
        }
    }

    #[test]
    fn dominated_offspring_keep_parent_extremes() {
        let s = space(2, 40);
        let cfg = SearchConfig::new(6, 0, 6, 6);
        // parents from a cheap evaluator, then offspring that are all bad
        let good = |g: &Genome, _: &mut RngStream| Ok(Evaluation { flops: g.0[0] as u64, accuracy: g.0[0] as f64 / 100.0 });
        let mut search = Search::new(&s, &good, cfg.clone()).unwrap();
        search.initialize();
        let parents: Vec<Individual> = search.population.iter().map(|&i| search.archive[i].clone()).collect();
        let best_acc = parents.iter().map(|p| p.accuracy).fold(0.0, f64::max);
        let best_flops = parents.iter().map(|p| p.flops).min().unwrap();
        let bad = |_: &Genome, _: &mut RngStream| Ok(Evaluation { flops: 1000, accuracy: 0.0 });
        let mut search2 = Search::new(&s, &bad, cfg).unwrap();
        search2.archive = search.archive.clone();
        search2.population = search.population.clone();
        search2.seen = search.seen.clone();
        search2.next_generation(1);
        let survivors: Vec<&Individual> = search2.population.iter().map(|&i| &search2.archive[i]).collect();
        assert!(survivors.iter().any(|p| p.accuracy == best_acc));
        assert!(survivors.iter().any(|p| p.flops == best_flops));
        assert!(survivors.iter().all(|p| p.generation == 0));
    }

    #[test]
    fn hypervolume_cases() {
        assert_eq!(hypervolume(&[], [1.0, 1.0]), 0.0);
        assert!((hypervolume(&[[0.5, 0.5]], [1.0, 1.0]) - 0.25).abs() < 1e-12);
        assert!((hypervolume(&[[0.2, 0.6], [0.6, 0.2], [0.7, 0.7]], [1.0, 1.0]) - (0.8 * 0.4 + 0.4 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn hypervolume_matches_monte_carlo() {
        let mut rng = RngStream::new(21, 0);
        for _ in 0..5 {
            let pts: Vec<Objectives> = (0..15)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            let exact = hypervolume(&pts, [1.0, 1.0]);
            let n = 400_000;
            let hits = (0..n)
                .filter(|_| {
                    let q = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                    pts.iter().any(|p| p[0] <= q[0] && p[1] <= q[1])
                })
                .count();
            let mc = hits as f64 / n as f64;
            assert!((mc - exact).abs() <= 0.01 * exact, "{mc} vs {exact}");
        }
    }

    #[test]
    fn front_thinning_keeps_ends() {
        let members: Vec<Individual> = (0..10)
            .map(|i| Individual {
                genome: Genome(vec![i]),
                flops: i as u64,
                accuracy: i as f64 / 10.0,
                generation: 0,
            })
            .collect();
        let f = ParetoFront::from_individuals(&members);
        assert_eq!(f.len(), 10);
        let t = f.thin(4);
        assert_eq!(t.len(), 4);
        assert_eq!(t.members.first().unwrap().flops, 0);
        assert_eq!(t.members.last().unwrap().flops, 9);
    }
}
