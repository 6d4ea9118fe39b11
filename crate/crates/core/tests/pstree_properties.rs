use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pst_evade::perturbset::{PerturbationGroup, Subtree};
use pst_evade::pstree::{normal_fit_weights, penalty_factor, InternalWeighting, PsTree, TreeConfig, ROOT};

fn groups_strategy(max: usize) -> impl Strategy<Value = Vec<PerturbationGroup>> {
    prop::collection::vec((0..Subtree::ALL.len(), 1usize..6), 1..max).prop_map(|spec| {
        let mut next = 0;
        spec.into_iter()
            .map(|(s, size)| {
                let subtree = Subtree::ALL[s];
                let size = if subtree.is_code() { 1 } else { size };
                let members = (next..next + size).collect();
                next += size;
                PerturbationGroup {
                    subtree,
                    members,
                    keywords: BTreeSet::new(),
                }
            })
            .collect()
    })
}

#[derive(Clone, Debug)]
enum Op {
    Init,
    Sample,
    Delete(usize),
    Adjust(f64, f64),
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Init),
        Just(Op::Sample),
        any::<usize>().prop_map(Op::Delete),
        (0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b)| Op::Adjust(a, b)),
        (0.0f64..1.0).prop_map(|a| Op::Adjust(a, a)),
    ]
}

fn expected_depth(subtree: Subtree) -> usize {
    if subtree.is_code() {
        3
    } else {
        4
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn shape_follows_subtrees(groups in groups_strategy(60)) {
        let tree = PsTree::build(&groups, &TreeConfig::default()).unwrap();
        prop_assert_eq!(tree.leaf_count(), groups.len());
        for leaf in tree.leaves() {
            let g = tree.nodes[leaf].group.as_ref().unwrap();
            prop_assert_eq!(tree.nodes[leaf].depth, expected_depth(g.subtree));
            if g.subtree.is_code() {
                prop_assert_eq!(g.len(), 1);
            }
        }
        let present: BTreeSet<bool> = groups.iter().map(|g| g.subtree.is_code()).collect();
        prop_assert_eq!(tree.child_probabilities(ROOT).len(), present.len());
        prop_assert!(tree.integrity_violations(1e-9).is_empty());
    }

    #[test]
    fn operations_preserve_distributions(
        groups in groups_strategy(80),
        ops in prop::collection::vec(op_strategy(), 1..60),
        proportional in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let config = TreeConfig {
            internal_weighting: if proportional { InternalWeighting::Proportional } else { InternalWeighting::Inverse },
            ..TreeConfig::default()
        };
        let mut tree = PsTree::build(&groups, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in ops {
            if tree.is_empty() {
                break;
            }
            let before = tree.leaf_count();
            match op {
                Op::Init => tree.init_probabilities(),
                Op::Sample => {
                    let path = tree.sample_path(&mut rng).unwrap();
                    for w in path.nodes.windows(2) {
                        prop_assert_eq!(tree.nodes[w[1]].parent, Some(w[0]));
                    }
                }
                Op::Delete(i) => {
                    let leaves = tree.leaves();
                    tree.delete_leaf_and_transfer(leaves[i % leaves.len()]).unwrap();
                    prop_assert_eq!(tree.leaf_count(), before - 1);
                }
                Op::Adjust(y, y_new) => {
                    let leaf = tree.sample_path(&mut rng).unwrap().leaf();
                    let root_before = tree.child_probabilities(ROOT).to_vec();
                    tree.adjust(leaf, y, y_new).unwrap();
                    prop_assert_eq!(tree.leaf_count(), before - 1);
                    let same_first_layer = tree.child_probabilities(ROOT).iter().map(|c| c.0).eq(root_before.iter().map(|c| c.0));
                    if y_new < y - config.epsilon && same_first_layer {
                        prop_assert_eq!(tree.child_probabilities(ROOT), &root_before[..]);
                    }
                }
            }
            let v = tree.integrity_violations(1e-9);
            prop_assert!(v.is_empty(), "{:?}", v);
        }
    }

    #[test]
    fn draining_empties_the_tree(groups in groups_strategy(40)) {
        let mut tree = PsTree::build(&groups, &TreeConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut steps = 0;
        while !tree.is_empty() {
            let leaf = tree.sample_path(&mut rng).unwrap().leaf();
            tree.adjust(leaf, 0.7, 0.7).unwrap();
            steps += 1;
            prop_assert!(tree.integrity_violations(1e-9).is_empty());
        }
        prop_assert_eq!(steps, groups.len());
        prop_assert!(tree.sample_path(&mut rng).is_err());
    }

    #[test]
    fn normal_fit_is_a_distribution(sizes in prop::collection::vec(1usize..40, 1..30)) {
        let w = normal_fit_weights(&sizes);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|p| (0.0..=1.0).contains(p)));
        // equal sizes get equal weight
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] == sizes[j] {
                    prop_assert!((w[i] - w[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn prior_scale_does_not_matter(a in 0.01f64..5.0, b in 0.01f64..5.0, k in 0.01f64..100.0) {
        let groups = vec![
            PerturbationGroup { subtree: Subtree::Normal, members: vec![0], keywords: BTreeSet::new() },
            PerturbationGroup { subtree: Subtree::Service, members: vec![1], keywords: BTreeSet::new() },
        ];
        let with = |p| PsTree::build(&groups, &TreeConfig { first_layer_prior: Some(p), ..TreeConfig::default() }).unwrap();
        let x = with((a, b));
        let y = with((k * a, k * b));
        for (p, q) in x.child_probabilities(ROOT).iter().zip(y.child_probabilities(ROOT)) {
            prop_assert!((p.1 - q.1).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_shrinks_weight(depth in 1usize..30, c in 0.001f64..1.0) {
        let f = penalty_factor(depth, c);
        prop_assert!((0.01..1.0).contains(&f));
    }
}
