use evoprune_core::evolve::{run_search, Evaluation, SearchConfig};
use evoprune_core::netgraph::{count_flops, count_flops_full, forward, models, proxy_accuracy, GroupUnit};
use evoprune_core::prunespace::{
    build_space, decode, pruned_graph, random_genome, slice_weights, ChannelSelection, Genome, SelectionStrategy,
    SpaceMode, DEFAULT_MIN_RATIO,
};
use evoprune_core::reconstruct::{reconstruct_network, CalibrationBatch};
use evoprune_core::tensor::argmax_classify;
use evoprune_core::{NetworkGraph, Result, RngStream, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

fn batch(graph: &NetworkGraph, n: usize, rng: &mut RngStream) -> Tensor {
    let mut shape = vec![n];
    shape.extend(&graph.input_shape);
    Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn shrinking_any_gene_never_adds_flops() {
    let mut rng = RngStream::new(1, 0);
    for (graph, mode) in [
        (models::resnet50(), SpaceMode::CnnChannels),
        (models::mobilenet_v1(), SpaceMode::CnnChannels),
        (models::deit_base(), SpaceMode::VitHeadCount),
        (models::deit_base(), SpaceMode::VitHeadDim),
    ] {
        let space = build_space(&graph, mode, DEFAULT_MIN_RATIO).unwrap();
        for _ in 0..20 {
            let g = random_genome(&space, &mut rng);
            let base = count_flops_full(&pruned_graph(&graph, &space, &g).unwrap()).unwrap();
            let i = rng.random_range(0..space.len());
            let gene = &space.genes[i];
            if g.0[i] == gene.lower {
                continue;
            }
            let mut smaller = g.clone();
            smaller.0[i] -= gene.step;
            let f = count_flops_full(&pruned_graph(&graph, &space, &smaller).unwrap()).unwrap();
            assert!(f <= base, "{mode:?} gene {i}: {f} > {base}");
        }
    }
}

#[test]
fn decoded_flops_match_architecture_only_count() {
    let mut rng = RngStream::new(2, 0);
    let graph = models::toy_cnn(&Default::default());
    let weights = models::init_weights(&graph, &mut rng).unwrap();
    let space = build_space(&graph, SpaceMode::CnnChannels, DEFAULT_MIN_RATIO).unwrap();
    for _ in 0..25 {
        let g = random_genome(&space, &mut rng);
        let sub = decode(&graph, &weights, &space, &g, SelectionStrategy::Random, &mut rng).unwrap();
        assert_eq!(sub.graph, pruned_graph(&graph, &space, &g).unwrap());
        assert_eq!(sub.flops, count_flops(&graph, &space.group_sizes(&g)).unwrap());
    }
}

#[test]
fn forward_is_permutation_equivariant() {
    let mut rng = RngStream::new(3, 0);
    for graph in [
        models::toy_cnn(&Default::default()),
        models::toy_transformer(&models::VitConfig::toy()),
    ] {
        let weights = models::init_weights(&graph, &mut rng).unwrap();
        let mut selection = ChannelSelection::default();
        for g in &graph.groups {
            if graph.group_unit(g.id) == GroupUnit::Channels && graph.input_shape.len() == 2 {
                continue;
            }
            let mut perm: Vec<usize> = (0..g.original_size).collect();
            perm.shuffle(&mut rng);
            selection.groups.insert(g.id, perm);
        }
        let permuted = slice_weights(&graph, &weights, &selection).unwrap();
        let x = batch(&graph, 8, &mut rng);
        let diff = forward(&graph, &weights, &x)
            .unwrap()
            .max_abs_diff(&forward(&graph, &permuted, &x).unwrap());
        assert!(diff <= 1e-4, "max |Δ| {diff}");
    }
}

#[test]
fn small_search_with_reconstruction_is_reproducible() {
    let graph = models::toy_cnn(&Default::default());
    let mut rng = RngStream::new(4, 0);
    let weights = models::init_weights(&graph, &mut rng).unwrap();
    let space = build_space(&graph, SpaceMode::CnnChannels, DEFAULT_MIN_RATIO).unwrap();
    let calib = CalibrationBatch::new(&graph, &weights, batch(&graph, 32, &mut rng), 4, 20).unwrap();
    let x = batch(&graph, 64, &mut rng);
    let labels: Vec<usize> = argmax_classify(&forward(&graph, &weights, &x).unwrap()).unwrap();
    let eval = |g: &Genome, rng: &mut RngStream| -> Result<Evaluation> {
        let sub = decode(&graph, &weights, &space, g, SelectionStrategy::Random, rng)?;
        let (w, _) = reconstruct_network(&graph, &weights, &sub, &calib, rng)?;
        Ok(Evaluation {
            flops: sub.flops,
            accuracy: proxy_accuracy(&sub.graph, &w, &x, &labels, 32)?,
        })
    };
    let config = SearchConfig::new(6, 2, 8, 9);
    let a = run_search(&space, &eval, &config).unwrap();
    let b = run_search(&space, &eval, &config).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.front, b.front);
    assert_eq!(a.log.len(), 8 + 2 * 6);
    assert!(a.front.members.windows(2).all(|w| w[0].flops < w[1].flops && w[0].accuracy < w[1].accuracy));
    let full = a.archive.iter().find(|i| i.genome == space.full_genome());
    if let Some(full) = full {
        assert_eq!(full.accuracy, 1.0);
    }
}
