use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let n = t.shape()[1];
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn matvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| {
            let mut acc = 0.0;
            for c in 0..v.len() {
                acc += row[c] * v[c];
            }
            acc
        })
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar-loop reference for one propagation step, written directly from the
/// per-node equations without any matrix batching.
fn oracle_step(graph: &SkeletonGraph, p: &GgnnParams, states: &Mat) -> Mat {
    let g = |n: &str| mat(p.get(n).unwrap());
    let b = |n: &str| p.get(n).unwrap().data().to_vec();
    let (wz, wr, wh, uz, ur, uh) = (g("w_z"), g("w_r"), g("w_h"), g("u_z"), g("u_r"), g("u_h"));
    let (bz, br, bh) = (b("b_z"), b("b_r"), b("b_h"));
    let d = p.dim;
    let n_nodes = graph.n_nodes();
    let dist = graph.hop_distances(graph.root());
    (0..n_nodes)
        .map(|n| {
            let mut j = vec![0.0; d];
            for &m in graph.neighbors(n).unwrap() {
                let w = match p.tying {
                    MessageTying::Shared => g("w_msg"),
                    MessageTying::PerDirection if dist[m] > dist[n] => g("w_msg_up"),
                    MessageTying::PerDirection => g("w_msg_down"),
                };
                for (acc, v) in j.iter_mut().zip(matvec(&w, &states[m])) {
                    *acc += v;
                }
            }
            let i = &states[n];
            let (wzj, uzi) = (matvec(&wz, &j), matvec(&uz, i));
            let (wrj, uri) = (matvec(&wr, &j), matvec(&ur, i));
            let z: Vec<f64> = (0..d).map(|k| sig(wzj[k] + uzi[k] + bz[k])).collect();
            let r: Vec<f64> = (0..d).map(|k| sig(wrj[k] + uri[k] + br[k])).collect();
            let ri: Vec<f64> = (0..d).map(|k| r[k] * i[k]).collect();
            let (whj, uhri) = (matvec(&wh, &j), matvec(&uh, &ri));
            (0..d)
                .map(|k| {
                    let h = (whj[k] + uhri[k] + bh[k]).tanh();
                    (1.0 - z[k]) * i[k] + z[k] * h
                })
                .collect()
        })
        .collect()
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> SkeletonGraph {
    let names = (0..n).map(|i| format!("j{i}")).collect();
    let edges = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
    SkeletonGraph::tree(names, edges, vec![], rng.gen_range(0..n)).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, d: usize, tying: MessageTying) -> GgnnParams {
    let mut p = GgnnParams::random(d, tying, rng);
    for name in ["b_z", "b_r", "b_h"] {
        p.set(name, Tensor::from_vec((0..d).map(|_| rng.gen_range(-0.5..0.5)).collect()))
            .unwrap();
    }
    p
}

fn random_states(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new([n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn messages(graph: &SkeletonGraph, p: &GgnnParams, s: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let vars = p.bind(&mut t, false).unwrap();
    let sv = t.leaf(s.clone());
    let j = collect_messages(&mut t, &MessageGraph::new(graph, p.tying), sv, &vars).unwrap();
    t.value(j).clone()
}

fn chain3() -> SkeletonGraph {
    let names = ["a", "b", "c"].map(String::from).to_vec();
    SkeletonGraph::tree(names, vec![(0, 1), (1, 2)], vec![], 0).unwrap()
}

#[test]
fn zero_states_give_zero_messages() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = SkeletonGraph::mpii_16();
    let p = random_params(&mut rng, 5, MessageTying::Shared);
    let j = messages(&g, &p, &Tensor::zeros([16, 5]));
    assert!(j.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_messages_on_a_chain() {
    let mut p = GgnnParams::zeros(3, MessageTying::Shared);
    p.set("w_msg", Tensor::identity(3)).unwrap();
    let j = messages(&chain3(), &p, &Tensor::identity(3));
    assert_eq!(&j.data()[3..6], &[1.0, 0.0, 1.0]);
    assert_eq!(&j.data()[0..3], &[0.0, 1.0, 0.0]);
}

#[test]
fn messages_ignore_non_neighbours() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = SkeletonGraph::mpii_16();
    let p = random_params(&mut rng, 4, MessageTying::Shared);
    let s = random_states(&mut rng, 16, 4);
    let base = messages(&g, &p, &s);
    for m in 0..16 {
        let mut s2 = s.clone();
        s2.data_mut()[m * 4..(m + 1) * 4].iter_mut().for_each(|v| *v += 1.0);
        let j2 = messages(&g, &p, &s2);
        for n in 0..16 {
            let same = base.data()[n * 4..(n + 1) * 4] == j2.data()[n * 4..(n + 1) * 4];
            assert_eq!(same, !g.neighbors(n).unwrap().contains(&m), "m={m} n={n}");
        }
    }
}

#[test]
fn zero_weights_halve_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = SkeletonGraph::mpii_16();
    let s = random_states(&mut rng, 16, 6);
    let p = GgnnParams::zeros(6, MessageTying::Shared);
    let one = propagate_values(&g, &s, &p, 1).unwrap();
    assert_eq!(one, s.map(|v| 0.5 * v));
}

#[test]
fn saturated_update_gate_preserves_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = chain3();
    let s = random_states(&mut rng, 3, 4);
    let mut p = random_params(&mut rng, 4, MessageTying::Shared);
    p.set("w_msg", Tensor::zeros([4, 4])).unwrap();
    p.set("u_z", Tensor::zeros([4, 4])).unwrap();
    p.set("b_z", Tensor::full([4], -50.0)).unwrap();
    let out = propagate_values(&g, &s, &p, 1).unwrap();
    assert!(out.max_abs_diff(&s) < 1e-20);
}

#[test]
fn matches_scalar_oracle_on_small_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = chain3();
    let p = random_params(&mut rng, 4, MessageTying::Shared);
    let s = random_states(&mut rng, 3, 4);
    let got = propagate_values(&g, &s, &p, 1).unwrap();
    let expected = oracle_step(&g, &p, &mat(&s));
    for (row, exp) in got.data().chunks(4).zip(&expected) {
        for (a, b) in row.iter().zip(exp) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn matches_scalar_oracle_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..120 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let steps = rng.gen_range(0..=4);
        let tying = if case % 3 == 0 { MessageTying::PerDirection } else { MessageTying::Shared };
        let g = random_tree(&mut rng, n);
        let p = random_params(&mut rng, d, tying);
        let s = random_states(&mut rng, n, d);
        let got = propagate_values(&g, &s, &p, steps).unwrap();
        let mut expected = mat(&s);
        for _ in 0..steps {
            expected = oracle_step(&g, &p, &expected);
        }
        for (a, b) in got.data().iter().zip(expected.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-12, "max deviation {worst}");
}

#[test]
fn zero_steps_is_identity_and_zero_weights_scale_geometrically() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = SkeletonGraph::mpii_16();
    let s = random_states(&mut rng, 16, 3);
    let p = random_params(&mut rng, 3, MessageTying::Shared);
    assert_eq!(propagate_values(&g, &s, &p, 0).unwrap(), s);

    let zero = GgnnParams::zeros(3, MessageTying::Shared);
    for t in 1..=4 {
        let out = propagate_values(&g, &s, &zero, t).unwrap();
        assert_eq!(out, s.map(|v| 0.5f64.powi(t as i32) * v));
    }
}

#[test]
fn information_travels_at_most_t_hops_on_a_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let len = 6;
    let names = (0..len).map(|i| format!("p{i}")).collect();
    let g = SkeletonGraph::tree(names, (1..len).map(|i| (i - 1, i)).collect(), vec![], 0).unwrap();
    let p = random_params(&mut rng, 3, MessageTying::Shared);
    let s = random_states(&mut rng, len, 3);
    let mut s2 = s.clone();
    s2.data_mut()[0] += 0.5;
    for t in 1..len {
        let a = propagate_values(&g, &s, &p, t).unwrap();
        let b = propagate_values(&g, &s2, &p, t).unwrap();
        let far = len - 1;
        let unchanged = a.data()[far * 3..] == b.data()[far * 3..];
        assert_eq!(unchanged, t < far, "t={t}");
    }
}

#[test]
fn t_hop_locality_on_mpii_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = SkeletonGraph::mpii_16();
    let d = 3;
    let p = random_params(&mut rng, d, MessageTying::Shared);
    let s = random_states(&mut rng, 16, d);
    for t in 1..=3 {
        let base = propagate_values(&g, &s, &p, t).unwrap();
        for m in 0..16 {
            let mut s2 = s.clone();
            s2.data_mut()[m * d] += 0.25;
            let out = propagate_values(&g, &s2, &p, t).unwrap();
            let dist = g.hop_distances(m);
            for n in 0..16 {
                if dist[n].unwrap() > t {
                    assert_eq!(base.data()[n * d..(n + 1) * d], out.data()[n * d..(n + 1) * d]);
                }
            }
        }
    }
}

#[test]
fn readout_gradients_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = SkeletonGraph::mpii_16();
    for tying in [MessageTying::Shared, MessageTying::PerDirection] {
        let p = random_params(&mut rng, 4, tying);
        let s = random_states(&mut rng, 16, 4);
        let weights = random_states(&mut rng, 16, 4);
        let mg = MessageGraph::new(&g, tying);
        for (k, name) in p.param_set().names().iter().enumerate() {
            let err = grad_check(
                |t, v| {
                    let mut vars = p.param_set().bind(t, false);
                    vars[k] = v;
                    let pv = GgnnVars::lookup(p.param_set(), &vars, "", tying)?;
                    let s0 = t.leaf(s.clone());
                    let out = propagate(t, &mg, s0, &pv, 3)?;
                    let w = t.leaf(weights.clone());
                    let prod = t.mul(out, w)?;
                    Ok(t.sum(prod))
                },
                p.param_set().get(k),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}

#[test]
fn relabelling_permutes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = SkeletonGraph::mpii_16();
    let d = 4;
    let p = random_params(&mut rng, d, MessageTying::PerDirection);
    let s = random_states(&mut rng, 16, d);
    let mut perm: Vec<usize> = (0..16).collect();
    for i in (1..16).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let gp = g.permuted(&perm).unwrap();
    let mut sp = Tensor::zeros([16, d]);
    for n in 0..16 {
        sp.data_mut()[perm[n] * d..(perm[n] + 1) * d].copy_from_slice(&s.data()[n * d..(n + 1) * d]);
    }
    let out = propagate_values(&g, &s, &p, 3).unwrap();
    let outp = propagate_values(&gp, &sp, &p, 3).unwrap();
    for n in 0..16 {
        for k in 0..d {
            let (a, b) = (out.data()[n * d + k], outp.data()[perm[n] * d + k]);
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_rows_match_individual_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = SkeletonGraph::lsp_14();
    let p = random_params(&mut rng, 3, MessageTying::Shared);
    let a = random_states(&mut rng, 14, 3);
    let b = random_states(&mut rng, 14, 3);
    let both = Tensor::new([28, 3], [a.data(), b.data()].concat()).unwrap();
    let out = propagate_values(&g, &both, &p, 2).unwrap();
    assert_eq!(&out.data()[..42], propagate_values(&g, &a, &p, 2).unwrap().data());
    assert_eq!(&out.data()[42..], propagate_values(&g, &b, &p, 2).unwrap().data());
}

#[test]
fn state_dimension_mismatch_is_rejected() {
    let g = chain3();
    let p = GgnnParams::zeros(4, MessageTying::Shared);
    assert!(propagate_values(&g, &Tensor::zeros([3, 5]), &p, 1).is_err());
    assert!(propagate_values(&g, &Tensor::zeros([4, 4]), &p, 1).is_err());
}
