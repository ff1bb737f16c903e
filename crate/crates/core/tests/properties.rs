use latent_gfn::checkpoint::Checkpoint;
use latent_gfn::decoder::blend_values;
use latent_gfn::diffusion::{analytic_log_reward, log_reward, Mixture};
use latent_gfn::graph::{append_edges, binomial, edge_count, edge_to_pair, enumerate_terminal_sets, pair_to_edge, step_budget, TrajectorySet};
use latent_gfn::metrics::{tv_distance, TerminalDistribution};
use latent_gfn::tensor::{Tape, Tensor};
use latent_gfn::Error;
use proptest::prelude::*;

proptest! {
    #[test]
    fn edge_indexing_is_a_bijection(n in 2usize..40) {
        let e = edge_count(n).unwrap();
        let mut seen = vec![false; e + 1];
        for i in 0..n {
            for j in i + 1..n {
                let k = pair_to_edge(i, j, n).unwrap();
                prop_assert!(k >= 1 && k <= e && !seen[k]);
                seen[k] = true;
                prop_assert_eq!(edge_to_pair(k, n).unwrap(), (i, j));
            }
        }
    }

    #[test]
    fn budget_shrinks_as_sparsity_grows(n in 2usize..60, a in 0.0f64..0.99, b in 0.0f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        match (step_budget(n, lo), step_budget(n, hi)) {
            (Ok(s_lo), Ok(s_hi)) => prop_assert!(s_lo >= s_hi && s_lo <= edge_count(n).unwrap()),
            (_, Err(Error::InvalidSparsity(_))) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn appending_never_repeats(n in 3usize..8, picks in prop::collection::vec(1usize..29, 1..12)) {
        let e = edge_count(n).unwrap();
        let mut set = TrajectorySet::from_sequences(&[Vec::new()], e, e).unwrap();
        let mut held: Vec<usize> = Vec::new();
        for p in picks {
            match append_edges(&set, &[p]) {
                Ok(next) => {
                    prop_assert!(p <= e && !held.contains(&p));
                    held.push(p);
                    set = next;
                }
                Err(_) => prop_assert!(p > e || held.contains(&p)),
            }
            prop_assert_eq!(set.trajectory(0), held.as_slice());
        }
    }

    #[test]
    fn enumeration_size_is_binomial(e in 1usize..12, s in 1usize..6) {
        prop_assume!(s <= e);
        let sets = enumerate_terminal_sets(e, s, 10_000).unwrap();
        prop_assert_eq!(sets.len() as u128, binomial(e, s));
        prop_assert!(sets.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn blend_endpoints(rows in 1usize..5, vals in prop::collection::vec(-5.0f64..5.0, 12)) {
        let decoded = Tensor::matrix(rows, 3, vals[..rows * 3].to_vec()).unwrap();
        let cond = &vals[9..12];
        let at_zero = blend_values(&decoded, cond, 0.0).unwrap();
        let at_one = blend_values(&decoded, cond, 1.0).unwrap();
        for r in 0..rows {
            prop_assert_eq!(at_zero.row_slice(r), cond);
            prop_assert_eq!(at_one.row_slice(r), decoded.row_slice(r));
        }
        prop_assert!(blend_values(&decoded, cond, 1.5).is_err());
    }

    #[test]
    fn reward_is_decreasing_in_mse(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let l = log_reward(&[a, b]).unwrap();
        prop_assert_eq!(a < b, l[0] > l[1]);
    }

    #[test]
    fn mixture_reward_ignores_component_order(
        x in prop::collection::vec(-2.0f64..2.0, 2),
        w in prop::collection::vec(0.1f64..3.0, 3),
    ) {
        let centers = vec![vec![0.0, 1.0], vec![1.5, -0.5], vec![-1.0, -1.0]];
        let widths = vec![0.3, 0.8, 1.1];
        let forward = Mixture { centers: centers.clone(), widths: widths.clone(), weights: w.clone() };
        let reversed = Mixture {
            centers: centers.into_iter().rev().collect(),
            widths: widths.into_iter().rev().collect(),
            weights: w.into_iter().rev().collect(),
        };
        let c = Tensor::row(x);
        let a = analytic_log_reward(&c, &forward).unwrap()[0];
        let b = analytic_log_reward(&c, &reversed).unwrap()[0];
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tv_is_a_bounded_symmetric_distance(
        p in prop::collection::vec(0.01f64..1.0, 6),
        q in prop::collection::vec(0.01f64..1.0, 6),
    ) {
        let keys: Vec<Vec<usize>> = (1..=6).map(|k| vec![k]).collect();
        let dp = TerminalDistribution::from_weights(keys.iter().cloned().zip(p).collect()).unwrap();
        let dq = TerminalDistribution::from_weights(keys.into_iter().zip(q).collect()).unwrap();
        let d = tv_distance(&dp, &dq).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - tv_distance(&dq, &dp).unwrap()).abs() < 1e-15);
        prop_assert!(tv_distance(&dp, &dp).unwrap() < 1e-15);
    }

    #[test]
    fn arbitrary_bytes_never_load(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        prop_assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_) | Error::Corrupted(_))));
    }

    #[test]
    fn masked_log_softmax_normalises(vals in prop::collection::vec(-20.0f64..20.0, 8), mask in prop::collection::vec(any::<bool>(), 8)) {
        prop_assume!(mask.iter().any(|m| !m));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 8, vals).unwrap()).unwrap();
        let y = tape.masked_log_softmax(x, &mask).unwrap();
        let out = tape.value(y);
        let mass: f64 = (0..8).map(|c| out.get(0, c).exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-12);
        for (c, &m) in mask.iter().enumerate() {
            prop_assert_eq!(m, out.get(0, c).exp() == 0.0);
        }
    }
}
