use std::collections::BTreeSet;

use fedreweight::scheduler::*;
use proptest::prelude::*;

#[test]
fn cli_examples() {
    let s = build_schedule(8).unwrap();
    assert_eq!((s.rounds.len(), s.total_pairs()), (7, 28));
    assert!(validate_schedule(&s).passed());
    let s = build_schedule(50).unwrap();
    assert!(s.rounds.len() <= 63);
    assert_eq!(s.total_pairs(), 1225);
    assert!(validate_schedule(&s).passed());
    assert_eq!(build_schedule(2).unwrap().rounds.len(), 1);
    assert!(build_schedule(1).is_err());
}

#[test]
fn json_round_trip() {
    let s = build_schedule(6).unwrap();
    let back = Schedule::from_json(&s.to_json()).unwrap();
    assert_eq!(back.n, s.n);
    assert_eq!(back.rounds, s.rounds);
}

#[test]
fn sequential_has_one_pair_per_round() {
    let s = build_schedule(9).unwrap().sequential();
    assert_eq!(s.rounds.len(), 36);
    assert!(s.rounds.iter().all(|r| r.len() == 1));
    assert!(validate_schedule(&s).coverage_ok());
}

proptest! {
    #[test]
    fn rotl_is_a_group_action(v in prop::collection::vec(any::<u8>(), 1..40), j in 0usize..100, k in 0usize..100) {
        prop_assert_eq!(rotl(&rotl(&v, j), k), rotl(&v, j + k));
        prop_assert_eq!(rotl(&v, v.len()), v.clone());
        prop_assert_eq!(rotl(&v, 0), v.clone());
    }

    #[test]
    fn pairing_matrix_covers_the_block_product(m in 1usize..12) {
        let a: Vec<usize> = (1..=m).collect();
        let b: Vec<usize> = (m + 1..=2 * m).collect();
        let rows = pairing_matrix(&a, &b).unwrap();
        let mut seen = BTreeSet::new();
        for r in &rows {
            let clients: BTreeSet<usize> = r.clients().collect();
            prop_assert_eq!(clients.len(), 2 * m);
            for p in &r.pairs {
                prop_assert!(seen.insert(*p));
            }
        }
        prop_assert_eq!(seen.len(), m * m);
    }

    #[test]
    fn every_client_meets_every_other_once(n in 2usize..100) {
        let s = build_schedule(n).unwrap();
        for c in 1..=n {
            let peers: Vec<usize> = s.peers_of(c).iter().map(|(_, p)| if p.lo() == c { p.hi() } else { p.lo() }).collect();
            let unique: BTreeSet<usize> = peers.iter().copied().collect();
            prop_assert_eq!(peers.len(), n - 1);
            prop_assert_eq!(unique.len(), n - 1);
            prop_assert!(!unique.contains(&c));
        }
        prop_assert!(s.rounds.len() <= Schedule::round_bound(n));
    }
}
