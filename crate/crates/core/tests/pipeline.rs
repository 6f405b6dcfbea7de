use mapf_gnn::datastore::{build_dataset, expand_samples, read_split, write_split, PoolConfig, Split, SplitInfo};
use mapf_gnn::executor::collision_shield;
use mapf_gnn::gridworld::{generate_case, generate_map, step_positions, Action};
use mapf_gnn::training::{split_dataset, SPLIT_RATIOS};
use proptest::prelude::*;

fn cfg(seed: u64) -> PoolConfig {
    PoolConfig { maps: 4, cases_per_map: 6, robots: 3, width: 8, height: 8, density: 0.1, seed, timeout_s: 30.0 }
}

#[test]
fn labels_replay_expert_paths() {
    let pool = build_dataset(&cfg(1)).unwrap();
    let samples = expand_samples(&pool.cases).unwrap();
    for r in &pool.cases {
        let plan = r.plan.as_ref().unwrap();
        let map = &pool.maps.iter().find(|m| m.map_id == r.case.map_id).unwrap().map;
        let mine: Vec<_> = samples.iter().filter(|s| s.case_id == r.case_id).collect();
        assert_eq!(mine.len(), plan.makespan);
        let mut pos = r.case.starts.clone();
        for s in &mine {
            assert_eq!(s.positions, pos);
            let actions: Vec<Action> = s.labels.iter().map(|&l| Action::from_index(l).unwrap()).collect();
            pos = step_positions(map, &pos, &actions).unwrap();
        }
        assert_eq!(pos, r.case.goals);
    }
}

#[test]
fn splits_are_disjoint_and_round_trip() {
    let pool = build_dataset(&cfg(2)).unwrap();
    let splits = split_dataset(&pool.cases, SPLIT_RATIOS, 2).unwrap();
    let mut ids: Vec<usize> = splits.iter().flatten().map(|c| c.case_id).collect();
    let total = ids.len();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!((ids.len(), total), (pool.cases.len(), pool.cases.len()));

    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({ "seed": 2 });
    for (split, cases) in Split::ALL.into_iter().zip(&splits) {
        let info = SplitInfo { split, case_ids: cases.iter().map(|c| c.case_id).collect() };
        let samples = expand_samples(cases).unwrap();
        let path = dir.path().join(split.file_name());
        write_split(&path, &config, &info, &samples).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (_, info2, samples2) = read_split(&path).unwrap();
        assert_eq!((info2, &samples2), (info.clone(), &samples));
        write_split(&path, &config, &info, &samples2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shield_output_is_collision_free(seed in any::<u64>(), robots in 1usize..12, picks in prop::collection::vec(0usize..5, 12)) {
        let map = generate_map(9, 9, 0.15, seed).unwrap();
        let case = generate_case(&map, 0, robots.min(map.free_cells().len() / 2), seed ^ 1).unwrap();
        let n = case.robots();
        let proposed: Vec<Action> = picks[..n].iter().map(|&i| Action::from_index(i).unwrap()).collect();
        let out = collision_shield(&map, &case.starts, &proposed);
        prop_assert!(out.iterations <= n);
        for (a, b) in proposed.iter().zip(&out.actions) {
            prop_assert!(a == b || *b == Action::Idle);
        }
        let next = step_positions(&map, &case.starts, &out.actions).unwrap();
        for i in 0..n {
            for j in i + 1..n {
                prop_assert_ne!(next[i], next[j]);
                prop_assert!(!(next[i] == case.starts[j] && next[j] == case.starts[i]));
            }
        }
    }
}
