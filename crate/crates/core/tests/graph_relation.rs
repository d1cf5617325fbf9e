use graphseg::graph::{self, GraphConfig, GraphLayer, RelationVariant, ThetaPolicy};
use graphseg::ops;
use graphseg::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nodes(k: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn([k, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn store_with(weights: &[Tensor]) -> (ParamStore, Vec<GraphLayer>) {
    let mut store = ParamStore::new();
    let layers = weights
        .iter()
        .enumerate()
        .map(|(i, w)| GraphLayer::new(&mut store, format!("w{i}"), w.clone(), i).unwrap())
        .collect();
    (store, layers)
}

/// relation → threshold → sparsify → update → `·W`, from library pieces.
fn manual_round(x: &Tensor, w: &Tensor, cfg: &GraphConfig) -> Tensor {
    let rel = graph::relation(x, cfg.variant).unwrap();
    let theta = graph::make_theta(rel.values(), cfg.theta);
    let rel = graph::sparsify(&rel, theta);
    ops::matmul(&graph::node_update(&rel, x).unwrap(), w).unwrap()
}

#[test]
fn cosine_against_pairwise_loop() {
    let x = nodes(3, 4, 1);
    let rel = graph::relation_cosine(&x).unwrap();
    let row = |i: usize| &x.data()[i * 4..(i + 1) * 4];
    let norm = |i: usize| row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j {
                1.0
            } else {
                let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                dot / (norm(i) * norm(j))
            };
            assert_eq!(rel.values().at(&[i, j]), want);
        }
    }
    let same = Tensor::new([2, 2], vec![0.3, -2.0, 0.3, -2.0]).unwrap();
    assert_eq!(
        graph::relation_cosine(&same).unwrap().values().data(),
        [1.0; 4]
    );
    let ortho = Tensor::eye(2);
    assert_eq!(
        graph::relation_cosine(&ortho).unwrap().values(),
        &Tensor::eye(2)
    );
}

#[test]
fn softmax_relation_examples() {
    let one = graph::relation_softmax(&Tensor::new([1, 3], vec![4.0, 5.0, 6.0]).unwrap()).unwrap();
    assert_eq!(one.values().data(), [1.0]);
    let twin = Tensor::new([2, 2], vec![0.7, 0.1, 0.7, 0.1]).unwrap();
    assert_eq!(
        graph::relation_softmax(&twin).unwrap().values().data(),
        [0.5; 4]
    );
    let x = nodes(3, 5, 2);
    let composed =
        ops::softmax_rows(&ops::matmul(&x, &ops::transpose(&x).unwrap()).unwrap()).unwrap();
    assert_eq!(graph::relation_softmax(&x).unwrap().values(), &composed);
}

#[test]
fn theta_and_sparsify_examples() {
    let values = Tensor::new([2, 2], vec![1.0, 0.1, 0.1, 1.0]).unwrap();
    assert_eq!(
        graph::make_theta(&values, ThetaPolicy::MultipleOfMean(1.0)),
        0.55
    );
    let quarter = graph::make_theta(&values, ThetaPolicy::MultipleOfMean(0.25));
    assert_eq!(quarter, 0.1375);
    assert_eq!(ThetaPolicy::default(), ThetaPolicy::MultipleOfMean(0.25));

    // uniform relation: θ = c·0.5 sits below every entry for c < 1
    let rel = graph::relation_softmax(&Tensor::new([2, 1], vec![0.0, 0.0]).unwrap()).unwrap();
    let kept = graph::sparsify(
        &rel,
        graph::make_theta(rel.values(), ThetaPolicy::MultipleOfMean(0.5)),
    );
    assert_eq!(kept.kept_edges(), 4);

    let x = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let cos = graph::relation_cosine(&x).unwrap();
    let s = graph::sparsify(&cos, 0.1375);
    assert_eq!(s.masked_values(), Tensor::eye(2));
    let below = graph::sparsify(&cos, -2.0);
    assert_eq!(below.masked_values(), *cos.values());
    let above = graph::sparsify(&cos, 1.0);
    assert_eq!(above.masked_values(), Tensor::zeros([2, 2]));
}

#[test]
fn update_and_conv_examples() {
    let x = nodes(3, 2, 3);
    let eye = graph::sparsify(&graph::relation_cosine(&Tensor::eye(3)).unwrap(), 0.5);
    assert_eq!(graph::node_update(&eye, &x).unwrap(), x);
    let none = graph::sparsify(&eye, 1.0);
    assert_eq!(
        graph::node_update(&none, &x).unwrap(),
        Tensor::zeros([3, 2])
    );

    let (store, layers) = store_with(&[Tensor::eye(2), Tensor::zeros([2, 2])]);
    assert_eq!(graph::graph_conv(&x, &layers[0], &store).unwrap(), x);
    assert_eq!(
        graph::graph_conv(&x, &layers[1], &store).unwrap(),
        Tensor::zeros([3, 2])
    );
    let mut s = ParamStore::new();
    assert!(GraphLayer::new(&mut s, "w", Tensor::zeros([2, 3]), 0).is_err());
}

#[test]
fn three_node_round_by_hand() {
    let x = nodes(3, 2, 4);
    let w = nodes(2, 2, 5);
    let (k, d) = (3, 2);
    let xv = |i: usize, c: usize| x.data()[i * d + c];
    let mut r = vec![0.0; k * k];
    for i in 0..k {
        let scores: Vec<f64> = (0..k)
            .map(|j| (0..d).map(|c| xv(i, c) * xv(j, c)).sum())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..k {
            r[i * k + j] = exps[j] / sum;
        }
    }
    let theta = 0.25 * (r.iter().sum::<f64>() / 9.0);
    let mut updated = [0.0; 6];
    for i in 0..k {
        for j in 0..k {
            if r[i * k + j] > theta {
                for c in 0..d {
                    updated[i * d + c] += r[i * k + j] * xv(j, c);
                }
            }
        }
    }
    let mut out = [0.0; 6];
    for i in 0..k {
        for c in 0..d {
            out[i * d + c] = (0..d)
                .map(|e| updated[i * d + e] * w.data()[e * d + c])
                .sum();
        }
    }
    let (store, layers) = store_with(std::slice::from_ref(&w));
    let got = graph::run_graph(&x, &layers, &store, &GraphConfig::default()).unwrap();
    assert_eq!(got.data(), out);
    assert_eq!(got, manual_round(&x, &w, &GraphConfig::default()));
}

#[test]
fn stacked_rounds_unroll() {
    let x = nodes(5, 3, 6);
    let (w1, w2) = (nodes(3, 3, 7), nodes(3, 3, 8));
    for variant in [RelationVariant::Softmax, RelationVariant::Cosine] {
        let cfg = GraphConfig {
            variant,
            theta: ThetaPolicy::MultipleOfMean(0.5),
        };
        let (store, layers) = store_with(&[w1.clone(), w2.clone()]);
        let one = graph::run_graph(&x, &layers[..1], &store, &cfg).unwrap();
        assert_eq!(one, manual_round(&x, &w1, &cfg));
        let two = graph::run_graph(&x, &layers, &store, &cfg).unwrap();
        assert_eq!(two, manual_round(&manual_round(&x, &w1, &cfg), &w2, &cfg));
    }
    let (store, _) = store_with(&[]);
    assert!(graph::run_graph(&x, &[], &store, &GraphConfig::default()).is_err());
}

#[test]
fn identity_weights_and_open_threshold_chain_the_relations() {
    // softmax entries are positive, so θ = 0 keeps every edge; the relation
    // is recomputed from the current nodes before each round
    let x = nodes(4, 3, 9);
    let cfg = GraphConfig {
        variant: RelationVariant::Softmax,
        theta: ThetaPolicy::MultipleOfMean(0.0),
    };
    let (store, layers) = store_with(&[Tensor::eye(3), Tensor::eye(3)]);
    let r1 = graph::relation_softmax(&x).unwrap();
    let x1 = ops::matmul(r1.values(), &x).unwrap();
    let r2 = graph::relation_softmax(&x1).unwrap();
    let want = ops::matmul(r2.values(), &x1).unwrap();
    assert_eq!(graph::run_graph(&x, &layers, &store, &cfg).unwrap(), want);
}

fn node_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..10, 1usize..6).prop_flat_map(|(k, d)| {
        let t = move || {
            prop::collection::vec(-2.0f64..2.0, k * d)
                .prop_map(move |v| Tensor::new([k, d], v).unwrap())
        };
        (t(), t())
    })
}

proptest! {
    #[test]
    fn update_is_linear_in_the_nodes((x, y) in node_pair(), a in -3.0f64..3.0, b in -3.0f64..3.0, c in 0.0f64..2.0) {
        let rel = graph::relation_softmax(&x).unwrap();
        let rel = graph::sparsify(&rel, graph::make_theta(rel.values(), ThetaPolicy::MultipleOfMean(c)));
        let mix = Tensor::from_fn(x.shape().to_vec(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = graph::node_update(&rel, &mix).unwrap();
        let ux = graph::node_update(&rel, &x).unwrap();
        let uy = graph::node_update(&rel, &y).unwrap();
        let rhs = Tensor::from_fn(x.shape().to_vec(), |i| a * ux.data()[i] + b * uy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn sparsify_is_idempotent_and_monotone((x, _) in node_pair(), t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        for rel in [graph::relation_cosine(&x).unwrap(), graph::relation_softmax(&x).unwrap()] {
            let once = graph::sparsify(&rel, lo);
            let twice = graph::sparsify(&once, lo);
            prop_assert_eq!(once.masked_values(), twice.masked_values());
            prop_assert!(once.kept_edges() >= graph::sparsify(&rel, hi).kept_edges());
        }
    }

    #[test]
    fn sparse_and_dense_updates_agree((x, _) in node_pair(), c in 0.0f64..3.0) {
        for rel in [graph::relation_cosine(&x).unwrap(), graph::relation_softmax(&x).unwrap()] {
            let rel = graph::sparsify(&rel, graph::make_theta(rel.values(), ThetaPolicy::MultipleOfMean(c)));
            prop_assert_eq!(graph::node_update(&rel, &x).unwrap(), graph::node_update_dense(&rel, &x).unwrap());
        }
    }

    #[test]
    fn cosine_is_symmetric_with_unit_diagonal((x, _) in node_pair()) {
        let k = x.shape()[0];
        let rel = graph::relation_cosine(&x).unwrap();
        let r = rel.values();
        for i in 0..k {
            prop_assert_eq!(r.at(&[i, i]), 1.0);
            for j in 0..k {
                prop_assert!((r.at(&[i, j]) - r.at(&[j, i])).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r.at(&[i, j])));
            }
        }
    }
}
