use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbs_core::behavior::{distance, EmbeddingVector};
use sbs_core::cluster::{cluster_behaviors, cluster_with_trace};
use sbs_core::par::Exec;

fn points(rng: &mut ChaCha8Rng) -> Vec<EmbeddingVector> {
    let n = rng.random_range(1..=30);
    let dim = rng.random_range(1..=4);
    (0..n).map(|_| EmbeddingVector::new((0..dim).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap()).collect()
}

#[test]
fn threshold_constraints_hold_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..600 {
        let pts = points(&mut rng);
        let tau = rng.random_range(0.2..3.0);
        let set = cluster_behaviors(&pts, tau).unwrap();
        let mut covered: Vec<usize> = set.clusters.iter().flat_map(|c| c.member_positions.clone()).collect();
        covered.sort_unstable();
        assert_eq!(covered, (0..pts.len()).collect::<Vec<_>>());
        for c in &set.clusters {
            for &a in &c.member_positions {
                for &b in &c.member_positions {
                    assert!(a == b || distance(&pts[a], &pts[b]).unwrap() < tau);
                }
            }
        }
        for (i, x) in set.clusters.iter().enumerate() {
            for y in &set.clusters[i + 1..] {
                let linkage = x
                    .member_positions
                    .iter()
                    .flat_map(|&a| y.member_positions.iter().map(move |&b| (a, b)))
                    .map(|(a, b)| distance(&pts[a], &pts[b]).unwrap())
                    .fold(0.0, f64::max);
                assert!(linkage >= tau);
            }
        }
    }
}

#[test]
fn sequential_and_parallel_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let pts = points(&mut rng);
        let seq = cluster_with_trace(&pts, 1.0, Exec::Sequential).unwrap();
        let par = cluster_with_trace(&pts, 1.0, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
    }
}
