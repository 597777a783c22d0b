use std::collections::BTreeMap;

use proptest::prelude::*;

use teleop_core::progression::persist::PersistentStore;
use teleop_core::progression::{BadgeCatalog, PlayerId, PlayerProfile, ProgressionStore};
use teleop_core::session::{AttemptSummary, SessionSummary};
use teleop_core::task::{AttemptOutcome, TaskCatalog};

const PLAYERS: usize = 5;

fn catalog() -> BadgeCatalog {
    let tasks = TaskCatalog::builtin();
    BadgeCatalog::builtin(tasks.ids())
}

#[derive(Debug, Clone)]
struct Step {
    player: usize,
    attempts: usize,
    points: u64,
    success: bool,
    task: usize,
    /// Redeliver an earlier summary instead of a fresh one.
    replay_of: Option<usize>,
}

fn step() -> impl Strategy<Value = Step> {
    (0..PLAYERS, 0usize..4, 0u64..700, any::<bool>(), 0usize..6, prop::option::weighted(0.2, 0usize..1000)).prop_map(
        |(player, attempts, points, success, task, replay_of)| Step {
            player,
            attempts,
            points,
            success,
            task,
            replay_of,
        },
    )
}

fn summary(i: usize, s: &Step) -> SessionSummary {
    let task = TaskCatalog::builtin().ids().nth(s.task).unwrap().clone();
    SessionSummary {
        summary_id: format!("summary-{i}"),
        player: PlayerId::new(format!("player-{}", s.player)),
        task,
        attempts: (0..s.attempts)
            .map(|k| AttemptSummary {
                attempt_index: k as u32 + 1,
                seed: 0,
                outcome: if s.success && k + 1 == s.attempts {
                    AttemptOutcome::Success
                } else {
                    AttemptOutcome::Timeout
                },
                stage_results: vec![],
                points: 0,
                duration: 1.0,
                episode_id: format!("summary-{i}-{k:02}"),
                final_scene_hash: String::new(),
            })
            .collect(),
        total_points: s.points,
        best_attempt: None,
    }
}

fn register_all(store: &mut ProgressionStore) {
    // Equal created_at for some players exercises the username tie-break.
    for p in 0..PLAYERS {
        store
            .register(PlayerId::new(format!("player-{p}")), &format!("name_{}", PLAYERS - p), 0, (p / 2) as u64)
            .unwrap();
    }
}

fn leaderboard_sorted(store: &ProgressionStore) -> bool {
    let lb = store.leaderboard(usize::MAX);
    let key = |id: &PlayerId| {
        let p = store.profile(id).unwrap();
        (std::cmp::Reverse(p.total_points), p.created_at, p.username.clone())
    };
    lb.len() == store.profiles().count()
        && lb.iter().enumerate().all(|(i, e)| e.rank == i as u32 + 1)
        && lb.windows(2).all(|w| key(&w[0].player_id) < key(&w[1].player_id))
}

fn counters(p: &PlayerProfile) -> (u64, u64, u64, usize, usize) {
    (p.total_points, p.episodes_played, p.games_played, p.badges.len(), p.tasks_completed.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn randomized_summaries_keep_invariants(steps in prop::collection::vec(step(), 1..60)) {
        let mut store = ProgressionStore::new(catalog());
        register_all(&mut store);
        let mut delivered: Vec<SessionSummary> = Vec::new();
        let mut unlock_count: BTreeMap<(PlayerId, String), usize> = BTreeMap::new();
        for (i, s) in steps.iter().enumerate() {
            let sum = match s.replay_of {
                Some(k) if !delivered.is_empty() => delivered[k % delivered.len()].clone(),
                _ => summary(i, s),
            };
            let before: BTreeMap<_, _> = store.profiles().map(|p| (p.player_id.clone(), p.clone())).collect();
            let dup = store.is_applied(&sum.summary_id);
            let unlocked = store.apply_summary(&sum).unwrap();
            let after = store.profile(&sum.player).unwrap();
            if dup {
                prop_assert!(unlocked.is_empty());
                prop_assert_eq!(&before[&sum.player], after);
            } else {
                delivered.push(sum.clone());
                let b = counters(&before[&sum.player]);
                let a = counters(after);
                prop_assert!(a.0 >= b.0 && a.1 >= b.1 && a.2 == b.2 + 1 && a.3 >= b.3 && a.4 >= b.4);
                prop_assert_eq!(a.0, b.0 + sum.total_points);
                for badge in &unlocked {
                    prop_assert!(badge.rule.satisfied(after));
                    prop_assert!(!before[&sum.player].badges.contains(&badge.id));
                    *unlock_count.entry((sum.player.clone(), badge.id.clone())).or_default() += 1;
                }
            }
            // Every satisfied rule is unlocked right after the crossing summary.
            for badge in &store.catalog().badges {
                for p in store.profiles() {
                    prop_assert_eq!(badge.rule.satisfied(p), p.badges.contains(&badge.id));
                }
            }
            prop_assert!(leaderboard_sorted(&store));
        }
        prop_assert!(unlock_count.values().all(|&n| n == 1));
        let total: usize = store.profiles().map(|p| p.badges.len()).sum();
        prop_assert_eq!(total, unlock_count.len());
    }

    #[test]
    fn persisted_store_matches_memory(steps in prop::collection::vec(step(), 1..25), every in 1u64..8) {
        let dir = tempfile::tempdir().unwrap();
        let mut mem = ProgressionStore::new(catalog());
        register_all(&mut mem);
        {
            let mut disk = PersistentStore::open(dir.path(), catalog()).unwrap().with_snapshot_every(every);
            for p in 0..PLAYERS {
                disk.register(PlayerId::new(format!("player-{p}")), &format!("name_{}", PLAYERS - p), 0, (p / 2) as u64)
                    .unwrap();
            }
            for (i, s) in steps.iter().enumerate() {
                let sum = summary(i % 10, s);
                mem.apply_summary(&sum).unwrap();
                disk.apply_summary(&sum).unwrap();
            }
        }
        let reopened = PersistentStore::open(dir.path(), catalog()).unwrap();
        let a: Vec<_> = mem.profiles().cloned().collect();
        let b: Vec<_> = reopened.store().profiles().cloned().collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(mem.leaderboard(10), reopened.store().leaderboard(10));
        prop_assert_eq!(mem.applied_summaries(), reopened.store().applied_summaries());
    }
}

#[test]
fn leaderboard_example() {
    let mut store = ProgressionStore::new(catalog());
    store.register(PlayerId::new("a"), "alpha", 0, 1).unwrap();
    store.register(PlayerId::new("b"), "bravo", 0, 2).unwrap();
    store.register(PlayerId::new("c"), "charlie", 0, 3).unwrap();
    let s = |id: &str, p: &str, points| {
        let mut sum = summary(0, &Step { player: 0, attempts: 1, points, success: false, task: 0, replay_of: None });
        sum.summary_id = id.into();
        sum.player = PlayerId::new(p);
        sum
    };
    store.apply_summary(&s("1", "c", 10)).unwrap();
    store.apply_summary(&s("2", "b", 50)).unwrap();
    store.apply_summary(&s("3", "a", 50)).unwrap();
    let names: Vec<_> = store.leaderboard(3).into_iter().map(|e| (e.rank, e.username)).collect();
    assert_eq!(
        names,
        vec![(1, "alpha".to_string()), (2, "bravo".to_string()), (3, "charlie".to_string())]
    );
}

#[test]
fn thousand_points_badge_unlocks_on_crossing() {
    let mut store = ProgressionStore::new(catalog());
    register_all(&mut store);
    let mut unlocked_at = Vec::new();
    for i in 0..5 {
        let st = Step {
            player: 1,
            attempts: 1,
            points: 300,
            success: false,
            task: 0,
            replay_of: None,
        };
        let badges = store.apply_summary(&summary(i, &st)).unwrap();
        if badges.iter().any(|b| b.id == "thousand_points") {
            unlocked_at.push(i);
        }
    }
    // 300, 600, 900, 1200: the fourth summary crosses 1000.
    assert_eq!(unlocked_at, vec![3]);
}
