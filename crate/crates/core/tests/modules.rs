use graphseg::boundary::{self, BoundaryAttention};
use graphseg::graph::{self, GraphConfig, RelationVariant, ThetaPolicy};
use graphseg::ops::{self, GeluKind};
use graphseg::relation::{FusionType, GlobalRelation, GraphTransformer, LocalRelation};
use graphseg::window::{flatten_nodes, unflatten_nodes, WindowGrid};
use graphseg::{ParamId, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + b.data()[i])
}

/// Replaces a zero-initialized tensor with random values so the branch
/// actually contributes.
fn randomize(store: &mut ParamStore, id: ParamId, r: &mut ChaCha8Rng) {
    let shape = store.tensor(id).shape().to_vec();
    let fresh = Tensor::randn(shape, 0.5, r);
    store
        .tensor_mut(id)
        .data_mut()
        .copy_from_slice(fresh.data());
}

fn cosine_graph() -> GraphConfig {
    GraphConfig {
        variant: RelationVariant::Cosine,
        theta: ThetaPolicy::MultipleOfMean(0.25),
    }
}

fn global(
    store: &mut ParamStore,
    c: usize,
    r: usize,
    grid: WindowGrid,
    seed: u64,
) -> GlobalRelation {
    let mut g = rng(seed);
    let gr =
        GlobalRelation::new(store, "gr", c, r, grid, 1, GraphConfig::default(), &mut g).unwrap();
    randomize(store, gr.unsqueeze(), &mut g);
    gr
}

fn local(
    store: &mut ParamStore,
    c: usize,
    r: usize,
    grid: WindowGrid,
    graph: GraphConfig,
    seed: u64,
) -> LocalRelation {
    let mut g = rng(seed);
    let lr = LocalRelation::new(store, "lr", c, r, grid, 1, graph, &mut g).unwrap();
    randomize(store, lr.unsqueeze(), &mut g);
    lr
}

#[test]
fn global_relation_step_by_step() {
    let grid = WindowGrid::new(4, 4, 2, 2).unwrap();
    let mut store = ParamStore::new();
    let gr = global(&mut store, 4, 2, grid, 1);
    let x = Tensor::randn([4, 4, 4], 1.0, &mut rng(2));

    let squeezed = ops::conv2d(&x, store.tensor(gr.squeeze())).unwrap();
    let nodes = flatten_nodes(&grid.partition(&squeezed).unwrap()).unwrap();
    assert_eq!(nodes.shape(), [4, gr.node_dim()]);
    let related = graph::run_graph(&nodes, gr.layers(), &store, gr.graph_config()).unwrap();
    let windows = unflatten_nodes(&related, 2, 2, 2).unwrap();
    let restored =
        ops::conv2d(&grid.merge(&windows).unwrap(), store.tensor(gr.unsqueeze())).unwrap();
    let want = add(&x, &restored);

    let got = gr.forward(&store, &x).unwrap();
    assert_eq!(got, want);
    assert_ne!(got, x);
}

#[test]
fn local_relation_on_one_window_by_hand() {
    let grid = WindowGrid::new(2, 2, 1, 1).unwrap();
    let mut store = ParamStore::new();
    for variant in [RelationVariant::Softmax, RelationVariant::Cosine] {
        let graph = GraphConfig {
            variant,
            ..GraphConfig::default()
        };
        let lr = local(&mut store, 2, 2, grid, graph, 3);
        let x = Tensor::randn([2, 2, 2], 1.0, &mut rng(4));
        // one hidden channel: pixel p becomes the 1-dimensional node p
        let squeezed = ops::conv2d(&x, store.tensor(lr.squeeze())).unwrap();
        let nodes = squeezed.reshape([4, 1]).unwrap();
        let related = graph::run_graph(&nodes, lr.layers(), &store, &graph).unwrap();
        let back = related.reshape([1, 2, 2]).unwrap();
        let want = add(
            &x,
            &ops::conv2d(&back, store.tensor(lr.unsqueeze())).unwrap(),
        );
        assert_eq!(lr.forward(&store, &x).unwrap(), want);
        store = ParamStore::new();
    }
}

#[test]
fn local_relation_with_several_hidden_channels() {
    let grid = WindowGrid::new(4, 6, 2, 3).unwrap();
    let mut store = ParamStore::new();
    let lr = local(&mut store, 6, 2, grid, GraphConfig::default(), 5);
    let x = Tensor::randn([6, 4, 6], 1.0, &mut rng(6));
    let squeezed = ops::conv2d(&x, store.tensor(lr.squeeze())).unwrap();
    let windows = grid.partition(&squeezed).unwrap();
    let (k, h, area) = (6, 3, 4);
    let mut out = Tensor::zeros([k, h, 2, 2]);
    for i in 0..k {
        let block = &windows.data()[i * h * area..(i + 1) * h * area];
        let nodes = Tensor::from_fn([area, h], |j| block[(j % h) * area + j / h]);
        let related =
            graph::run_graph(&nodes, lr.layers(), &store, &GraphConfig::default()).unwrap();
        for p in 0..area {
            for c in 0..h {
                out.data_mut()[(i * h + c) * area + p] = related.data()[p * h + c];
            }
        }
    }
    let restored = ops::conv2d(&grid.merge(&out).unwrap(), store.tensor(lr.unsqueeze())).unwrap();
    assert_eq!(lr.forward(&store, &x).unwrap(), add(&x, &restored));
}

#[test]
fn degenerate_grids_keep_shapes() {
    let mut store = ParamStore::new();
    let whole = WindowGrid::new(4, 4, 1, 1).unwrap();
    let gr = global(&mut store, 4, 2, whole, 7);
    let x = Tensor::randn([4, 4, 4], 1.0, &mut rng(8));
    assert_eq!(gr.forward(&store, &x).unwrap().shape(), x.shape());
    // a single node relates only to itself
    let single = graph::relation_softmax(&Tensor::randn([1, 32], 1.0, &mut rng(9))).unwrap();
    assert_eq!(single.values().data(), [1.0]);

    let pixels = WindowGrid::new(4, 4, 4, 4).unwrap();
    let lr = local(&mut store, 4, 2, pixels, GraphConfig::default(), 10);
    assert_eq!(lr.forward(&store, &x).unwrap().shape(), x.shape());
}

#[test]
fn fusions_compose_their_parts() {
    let grid = WindowGrid::new(8, 8, 2, 2).unwrap();
    let x = Tensor::randn([8, 8, 8], 1.0, &mut rng(11));
    for fusion in FusionType::ALL {
        let mut store = ParamStore::new();
        let mut g = rng(12);
        let gt = GraphTransformer::new(
            &mut store,
            "gt",
            8,
            (2, 4),
            grid,
            2,
            GraphConfig::default(),
            fusion,
            &mut g,
        )
        .unwrap();
        randomize(&mut store, gt.global.unsqueeze(), &mut g);
        randomize(&mut store, gt.local.unsqueeze(), &mut g);
        let got = gt.forward(&store, &x).unwrap();
        let want = match fusion {
            FusionType::GrThenLr => gt
                .local
                .forward(&store, &gt.global.forward(&store, &x).unwrap())
                .unwrap(),
            FusionType::LrThenGr => gt
                .global
                .forward(&store, &gt.local.forward(&store, &x).unwrap())
                .unwrap(),
            FusionType::Parallel => {
                let mut tape = Tape::new();
                let v = tape.leaf(x.clone());
                let dg = gt.global.delta_var(&mut tape, &store, v).unwrap();
                let dl = gt.local.delta_var(&mut tape, &store, v).unwrap();
                add(&add(&x, tape.value(dg)), tape.value(dl))
            }
        };
        assert_eq!(got, want, "{fusion}");
        // GR: hidden 4, D = 4·16; LR: hidden 2; two graph layers each
        assert_eq!(
            store.num_scalars(),
            2 * 8 * 4 + 2 * 64 * 64 + 2 * 8 * 2 + 2 * 2 * 2
        );
    }
    assert_eq!(FusionType::default(), FusionType::GrThenLr);
}

#[test]
fn every_parameter_gets_a_finite_gradient() {
    let grid = WindowGrid::new(4, 4, 2, 2).unwrap();
    let mut store = ParamStore::new();
    let mut g = rng(13);
    let gt = GraphTransformer::new(
        &mut store,
        "gt",
        4,
        (2, 2),
        grid,
        1,
        cosine_graph(),
        FusionType::GrThenLr,
        &mut g,
    )
    .unwrap();
    randomize(&mut store, gt.global.unsqueeze(), &mut g);
    randomize(&mut store, gt.local.unsqueeze(), &mut g);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::randn([4, 4, 4], 1.0, &mut g));
    let y = gt.forward_var(&mut tape, &store, x).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss, &mut store).unwrap();
    for p in store.iter() {
        let grad = p
            .tensor
            .grad()
            .unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(grad.iter().all(|v| v.is_finite()), "{}", p.name);
        assert!(
            grad.iter().any(|&v| v != 0.0),
            "{} gradient is all zero",
            p.name
        );
    }
}

fn ba(store: &mut ParamStore, c: usize, r: usize, seed: u64) -> BoundaryAttention {
    let mut g = rng(seed);
    let ba = BoundaryAttention::new(store, "ba", c, r, GeluKind::Tanh, &mut g).unwrap();
    randomize(store, ba.unsqueeze, &mut g);
    ba
}

#[test]
fn boundary_coefficients_stage_by_stage() {
    let mut store = ParamStore::new();
    let ba = ba(&mut store, 2, 2, 14);
    let y = Tensor::randn([2, 5, 5], 1.0, &mut rng(15));
    let s = ops::conv2d(&y, store.tensor(ba.squeeze)).unwrap();
    let l = ops::conv2d(&s, store.tensor(ba.local)).unwrap();
    let h = ops::gelu(&l, GeluKind::Tanh);
    let want = ops::sigmoid(&ops::conv2d(&h, store.tensor(ba.unsqueeze)).unwrap());
    let coeffs = ba.coefficients(&store, &y).unwrap();
    assert_eq!(coeffs, want);
    assert_eq!(
        ba.apply(&store, &y).unwrap(),
        ops::hadamard(&y, &coeffs).unwrap()
    );
    assert_eq!(store.num_scalars(), BoundaryAttention::param_count(2, 2));
    assert_eq!(BoundaryAttention::param_count(32, 16), 2 * 32 * 2 + 49 * 4);
}

#[test]
fn boundary_examples() {
    let mut store = ParamStore::new();
    let mut g = rng(16);
    let zero_init = BoundaryAttention::new(&mut store, "ba", 4, 2, GeluKind::Erf, &mut g).unwrap();
    let c = zero_init
        .coefficients(&store, &Tensor::zeros([4, 3, 3]))
        .unwrap();
    assert!(c.data().iter().all(|&v| v == 0.5));

    let y = Tensor::randn([4, 3, 3], 1.0, &mut g);
    assert_eq!(boundary::weigh(&y, &Tensor::ones([4, 3, 3])).unwrap(), y);
    let mut s2 = ParamStore::new();
    let random = ba(&mut s2, 4, 2, 17);
    assert_eq!(
        random.apply(&s2, &Tensor::zeros([4, 3, 3])).unwrap(),
        Tensor::zeros([4, 3, 3])
    );
    assert!(random.apply(&s2, &Tensor::zeros([3, 3, 3])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn local_windows_are_independent(seed in 0u64..1000, target in 0usize..4, zeroed in 0usize..4) {
        prop_assume!(target != zeroed);
        let grid = WindowGrid::new(4, 4, 2, 2).unwrap();
        let mut store = ParamStore::new();
        let lr = local(&mut store, 4, 2, grid, GraphConfig::default(), seed);
        let x = Tensor::randn([4, 4, 4], 1.0, &mut rng(seed + 1));
        let mut windows = grid.partition(&x).unwrap();
        let block = windows.numel() / 4;
        windows.data_mut()[zeroed * block..(zeroed + 1) * block].fill(0.0);
        let x2 = grid.merge(&windows).unwrap();
        let a = grid.partition(&lr.forward(&store, &x).unwrap()).unwrap();
        let b = grid.partition(&lr.forward(&store, &x2).unwrap()).unwrap();
        prop_assert_eq!(&a.data()[target * block..(target + 1) * block], &b.data()[target * block..(target + 1) * block]);
    }

    #[test]
    fn coefficients_stay_in_the_open_unit_interval(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let mut store = ParamStore::new();
        let ba = ba(&mut store, 4, 2, seed);
        let y = Tensor::randn([4, 6, 6], scale, &mut rng(seed + 7));
        let c = ba.coefficients(&store, &y).unwrap();
        prop_assert!(c.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let z = ba.apply(&store, &y).unwrap();
        prop_assert!(z.data().iter().zip(y.data()).all(|(z, y)| z.abs() <= y.abs()));
    }

    #[test]
    fn coefficients_only_change_inside_the_receptive_field(seed in 0u64..1000, py in 0usize..11, px in 0usize..11) {
        let mut store = ParamStore::new();
        let ba = ba(&mut store, 4, 2, seed);
        let y = Tensor::randn([4, 11, 11], 1.0, &mut rng(seed + 3));
        let mut moved = y.clone();
        for c in 0..4 {
            moved.set(&[c, py, px], moved.at(&[c, py, px]) + 1.5);
        }
        let a = ba.coefficients(&store, &y).unwrap();
        let b = ba.coefficients(&store, &moved).unwrap();
        for c in 0..4 {
            for r in 0..11usize {
                for q in 0..11usize {
                    if r.abs_diff(py) > 3 || q.abs_diff(px) > 3 {
                        prop_assert_eq!(a.at(&[c, r, q]), b.at(&[c, r, q]));
                    }
                }
            }
        }
    }

    #[test]
    fn modules_preserve_shape(c_mult in 1usize..3, rows in 1usize..3, cols in 1usize..3, wh in 1usize..3, ww in 1usize..3) {
        let c = 4 * c_mult;
        let grid = WindowGrid::new(rows * wh, cols * ww, rows, cols).unwrap();
        let x = Tensor::randn([c, rows * wh, cols * ww], 1.0, &mut rng(0));
        for fusion in FusionType::ALL {
            let mut store = ParamStore::new();
            let gt = GraphTransformer::new(&mut store, "gt", c, (2, 4), grid, 1, cosine_graph(), fusion, &mut rng(1)).unwrap();
            let y = gt.forward(&store, &x).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert_eq!(store.num_scalars(), GraphTransformer::param_count(c, (2, 4), &grid, 1));
        }
    }
}
