use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbs_core::latency::{compare_scenarios, cost_of, AgentStrategy, CostGrid, CostParams, Sampling};
use sbs_core::metrics::{compute_metrics, RankedList};

#[test]
fn cached_persona_cost_ignores_history_and_sbs_length() {
    for s in [AgentStrategy::AgentCfPersona, AgentStrategy::Agent4RecPersona] {
        let base = cost_of(s, &CostParams::default()).unwrap();
        for n in [100.0, 500.0, 1000.0] {
            for k in [5.0, 10.0, 20.0] {
                let c = cost_of(s, &CostParams { n, k, ..CostParams::default() }).unwrap();
                assert_eq!(c.online_seconds_total, base.online_seconds_total);
                assert_eq!(c.online_seconds_per_call, base.online_seconds_per_call);
            }
        }
    }
}

#[test]
fn online_cost_nondecreasing_in_ni_t_d() {
    let p = CostParams::default();
    for s in AgentStrategy::ALL {
        for scaled in [false, true] {
            let base = CostParams { persona_scales_with_d: scaled, ..p.clone() };
            let total = |q: &CostParams| cost_of(s, q).unwrap().online_seconds_total;
            let b = total(&base);
            assert!(total(&CostParams { n_i: 20.0, ..base.clone() }) >= b);
            assert!(total(&CostParams { t: 4.0, ..base.clone() }) >= b);
            assert!(total(&CostParams { d_calls: 20.0, ..base.clone() }) >= b);
        }
    }
}

#[test]
fn cached_persona_beats_both_baselines_on_default_grid() {
    for scaled in [false, true] {
        let mut grid = CostGrid::standard();
        grid.base.persona_scales_with_d = scaled;
        grid.n = vec![100.0, 500.0, 1000.0];
        grid.k = vec![5.0, 10.0, 20.0];
        let rows = compare_scenarios(&grid.points()).unwrap();
        for r in rows.iter().filter(|r| r.strategy.sampling() == Sampling::Persona) {
            assert!(r.savings_vs_recent.unwrap() > 0.0, "{r:?}");
            assert!(r.savings_vs_relevance.unwrap() > 0.0, "{r:?}");
        }
    }
}

fn random_lists(rng: &mut ChaCha8Rng, count: usize) -> Vec<RankedList> {
    (0..count)
        .map(|_| {
            let size = rng.random_range(1..=20);
            let rank = rng.random_range(1..=size);
            let ids: Vec<String> = (1..=size).map(|i| if i == rank { "p".into() } else { format!("n{i}") }).collect();
            RankedList::new(ids, "p").unwrap()
        })
        .collect()
}

#[test]
fn metric_ordering_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..300 {
        let n = rng.random_range(1..=30);
        let r = compute_metrics(&random_lists(&mut rng, n)).unwrap();
        assert!(r.hr_at[&1] <= r.hr_at[&5] && r.hr_at[&5] <= r.hr_at[&10]);
        for map in [&r.hr_at, &r.ndcg_at, &r.mrr_at] {
            assert!(map.values().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn metrics_ignore_user_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let n = rng.random_range(1..=40);
        let mut lists = random_lists(&mut rng, n);
        let before = compute_metrics(&lists).unwrap();
        for i in (1..lists.len()).rev() {
            lists.swap(i, rng.random_range(0..=i));
        }
        assert_eq!(compute_metrics(&lists).unwrap(), before);
    }
}
