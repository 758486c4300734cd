use dwva_core::world::{
    generate_dataset, generate_episode, open_loop_metrics, rollout, score_pdm, Episode, Trajectory, WorldConfig,
};
use proptest::prelude::*;

mod common;

use common as reference;

fn perturbations(ep: &Episode) -> Vec<Trajectory> {
    let e = &ep.expert;
    vec![
        e.clone(),
        e.scaled(0.5),
        e.scaled(1.3),
        e.shifted(0.0, 0.8),
        e.shifted(0.0, -2.5),
        Trajectory::zeros(e.len()),
        Trajectory::new((1..=e.len()).map(|k| [k as f64 * 1.1, 0.0]).collect()),
    ]
}

#[test]
fn expert_on_seed_7_matches_reference_scorer() {
    let ep = generate_episode(&WorldConfig::default(), 7).unwrap();
    for traj in perturbations(&ep) {
        let a = score_pdm(&ep, &traj).unwrap();
        let b = reference::score(&ep, &traj);
        assert!(reference::max_diff(&a, &b) < 1e-9, "{a:?} vs {b:?}");
    }
}

#[test]
fn reference_scorer_agrees_across_episodes() {
    let eps = generate_dataset(&WorldConfig::default(), 40, 123).unwrap();
    for ep in &eps {
        for traj in perturbations(ep) {
            let a = score_pdm(ep, &traj).unwrap().pdms;
            let b = reference::pdms(ep, &traj);
            assert!((a - b).abs() < 1e-9, "seed {}: {a} vs {b}", ep.seed);
        }
    }
}

#[test]
fn expert_mean_pdms_over_1000_episodes() {
    let eps = generate_dataset(&WorldConfig::default(), 1000, 2024).unwrap();
    let mean: f64 = eps
        .iter()
        .map(|ep| score_pdm(ep, &ep.expert).unwrap().pdms)
        .sum::<f64>()
        / eps.len() as f64;
    assert!(mean > 0.9, "{mean}");
}

#[test]
fn open_loop_matches_brute_force() {
    let eps = generate_dataset(&WorldConfig::default(), 10, 5).unwrap();
    for ep in &eps {
        for pred in perturbations(ep) {
            let m = open_loop_metrics(&pred, &ep.expert, ep).unwrap();
            for (i, h) in [1.0f64, 2.0, 3.0].iter().enumerate() {
                let k = (h / ep.cfg.dt) as usize - 1;
                let (p, g) = (pred.waypoints[k], ep.expert.waypoints[k]);
                let d = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
                assert!((m.l2[i] - d).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn expert_replay_reproduces_future_states() {
    for ep in generate_dataset(&WorldConfig::default(), 25, 77).unwrap() {
        let states = rollout(&ep, &ep.expert).unwrap();
        for (k, s) in states.iter().enumerate() {
            let f = ep.frames[ep.current_index() + 1 + k].ego;
            assert!((s.x - f.x).abs() <= 1e-9 && (s.y - f.y).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pdms_bounds_and_penalty_equivalence(
        seed in 0u64..10_000,
        wps in proptest::collection::vec((-3.0f64..8.0, -4.0f64..4.0), 8),
    ) {
        let ep = generate_episode(&WorldConfig::default(), seed).unwrap();
        let before = ep.clone();
        let traj = Trajectory::new(wps.into_iter().map(|(x, y)| [x, y]).collect());
        let s = score_pdm(&ep, &traj).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.pdms));
        prop_assert_eq!(s.pdms == 0.0, s.nc == 0.0 || s.dac == 0.0);
        prop_assert_eq!(&ep, &before);
        prop_assert_eq!(score_pdm(&ep, &traj).unwrap(), s);
    }

    #[test]
    fn expert_is_always_safe(seed in 0u64..100_000) {
        let ep = generate_episode(&WorldConfig::default(), seed).unwrap();
        let s = score_pdm(&ep, &ep.expert).unwrap();
        prop_assert_eq!((s.nc, s.dac), (1.0, 1.0));
        prop_assert!(ep
            .frames
            .iter()
            .all(|f| f.bev.iter().all(|&c| (c as usize) < ep.cfg.n_classes)));
    }

    #[test]
    fn halving_straight_progress_never_raises_ep(len in 0.2f64..1.2) {
        let cfg = WorldConfig { n_agents: 0, ..WorldConfig::default() };
        let ep = generate_episode(&cfg, 1).unwrap();
        let straight = Trajectory::new((1..=8).map(|k| [k as f64 * len, 0.0]).collect());
        let full = score_pdm(&ep, &straight).unwrap();
        let half = score_pdm(&ep, &straight.scaled(0.5)).unwrap();
        prop_assert!(half.ep <= full.ep);
    }
}
