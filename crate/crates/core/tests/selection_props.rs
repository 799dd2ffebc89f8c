use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbs_core::behavior::EmbeddingVector;
use sbs_core::cluster::{compute_centroid, Cluster};
use sbs_core::select::{
    brute_force_on, dynamic_select, greedy_trace, measure_curvatures_on, weights_from_alpha, ClusterGeometry,
    SelectionWeights,
};

fn random_cluster(rng: &mut ChaCha8Rng, size: usize, dim: usize, scale: f64) -> (Cluster, Vec<EmbeddingVector>) {
    let embs: Vec<EmbeddingVector> = (0..size)
        .map(|_| EmbeddingVector::new((0..dim).map(|_| rng.random_range(-scale..scale)).collect()).unwrap())
        .collect();
    let members: Vec<usize> = (0..size).collect();
    let centroid = compute_centroid(&members, &embs).unwrap();
    (Cluster { cluster_id: 0, member_positions: members, centroid }, embs)
}

#[test]
fn greedy_within_instance_bound_of_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 1.0;
    for case in 0..300 {
        let size = rng.random_range(2..=12);
        let dim = rng.random_range(1..=8);
        let quota = rng.random_range(1..=size.min(4));
        let alpha = [1.001, 1.06, 1.4][case % 3];
        let (cluster, embs) = random_cluster(&mut rng, size, dim, 1.0);
        let geo = ClusterGeometry::new(&cluster, &embs).unwrap();
        let w = weights_from_alpha(alpha).unwrap();
        let (greedy, values) = greedy_trace(&geo, quota, &w).unwrap();
        let (_, best) = brute_force_on(&geo, quota, &w).unwrap();
        let g = *values.last().unwrap();
        assert!((geo.objective_value(&greedy, &w, quota).unwrap() - g).abs() < 1e-12);
        let ratio = g / best;
        let bound = measure_curvatures_on(&geo).unwrap().bound;
        assert!(ratio <= 1.0 + 1e-12, "greedy beat brute force: {ratio}");
        assert!(ratio >= bound - 1e-12, "ratio {ratio} below bound {bound}");
        worst = worst.min(ratio);
    }
    assert!(worst > 0.0);
}

#[test]
fn greedy_trace_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let size = rng.random_range(1..=15);
        let (cluster, embs) = random_cluster(&mut rng, size, 4, 2.0);
        let geo = ClusterGeometry::new(&cluster, &embs).unwrap();
        let quota = rng.random_range(1..=size);
        let w = weights_from_alpha(rng.random_range(1.001..1.4)).unwrap();
        let (_, values) = greedy_trace(&geo, quota, &w).unwrap();
        assert!(values.windows(2).all(|p| p[1] >= p[0]));
    }
}

#[test]
fn pure_prototypicality_takes_nearest_members() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = SelectionWeights::new(1.0, 0.0).unwrap();
    for _ in 0..200 {
        let size = rng.random_range(1..=12);
        let (cluster, embs) = random_cluster(&mut rng, size, 3, 1.0);
        let quota = rng.random_range(1..=size);
        let sbs = dynamic_select(&cluster, &embs, quota, &w).unwrap();
        let mu = cluster.centroid.values();
        let dist = |p: usize| {
            embs[p].values().iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        let mut expected = order[..quota].to_vec();
        expected.sort_unstable();
        assert_eq!(sbs.selected_positions, expected);
    }
}

#[test]
fn selection_is_scale_invariant_for_pure_diversity() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = SelectionWeights::new(0.0, 1.0).unwrap();
    for _ in 0..100 {
        let size = rng.random_range(2..=10);
        let (cluster, embs) = random_cluster(&mut rng, size, 3, 1.0);
        let scaled: Vec<EmbeddingVector> =
            embs.iter().map(|e| EmbeddingVector::new(e.values().iter().map(|v| v * 8.0).collect()).unwrap()).collect();
        let members: Vec<usize> = (0..size).collect();
        let scaled_cluster =
            Cluster { cluster_id: 0, member_positions: members.clone(), centroid: compute_centroid(&members, &scaled).unwrap() };
        let quota = rng.random_range(1..=size);
        let a = dynamic_select(&cluster, &embs, quota, &w).unwrap();
        let b = dynamic_select(&scaled_cluster, &scaled, quota, &w).unwrap();
        assert_eq!(a.selected_positions, b.selected_positions);
    }
}

#[test]
fn weights_match_direct_power_and_sum_to_one() {
    let mut alpha = 1.001;
    while alpha <= 1.4 {
        let w = weights_from_alpha(alpha).unwrap();
        let direct = 1.0 / alpha.powf(10.0);
        assert!(((w.w_p - direct) / direct).abs() <= 1e-12);
        assert_eq!(w.w_p + w.w_d, 1.0);
        alpha += 0.001;
    }
}
