//! Central finite-difference checks of every differentiable path.
//!
//! A [`Problem`] is a scalar loss built from input leaves and parameters.
//! The checker compares the taped gradient of each sampled entry with
//! `(f(x+h) − f(x−h)) / 2h`. Sparsity masks from the unperturbed pass are
//! replayed for every probe, so both sides differentiate the same branch.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boundary::BoundaryAttention;
use crate::error::{Error, Result};
use crate::graph::{self, GraphConfig, GraphLayer, RelationVariant, ThetaPolicy};
use crate::ops::GeluKind;
use crate::relation::{FusionType, GlobalRelation, GraphTransformer, LocalRelation};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};
use crate::window::WindowGrid;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not divide by (almost) nothing.
pub const REL_ERR_FLOOR: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 5;
/// Entries probed per tensor per seed (all of them when the tensor is smaller).
pub const SAMPLES_PER_TENSOR: usize = 40;

type Build = Box<dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + Send + Sync>;

/// A scalar loss over `inputs` (taped as leaves) and the parameters in `store`.
pub struct Problem {
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl Problem {
    pub fn new(
        store: ParamStore,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            store,
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = (self.build)(tape, &self.store, &vars)?;
        Ok((loss, vars))
    }

    fn loss_with_masks(&self, masks: &[Vec<bool>]) -> Result<f64> {
        let mut tape = Tape::replaying(masks.to_vec());
        let (loss, _) = self.eval(&mut tape)?;
        Ok(tape.value(loss).item())
    }
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckStats {
    pub max_rel_err: f64,
    pub samples: usize,
}

impl CheckStats {
    fn absorb(&mut self, other: CheckStats) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.samples += other.samples;
    }
}

fn sample_entries<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    if n <= SAMPLES_PER_TENSOR {
        (0..n).collect()
    } else {
        let mut v = index::sample(rng, n, SAMPLES_PER_TENSOR).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks one problem. `corrupt` scales every analytic gradient, which is
/// how fault injection exercises the failure path.
pub fn check_problem<R: Rng>(
    problem: &mut Problem,
    rng: &mut R,
    corrupt: Option<f64>,
) -> Result<CheckStats> {
    let mut tape = Tape::recording();
    let (loss, vars) = problem.eval(&mut tape)?;
    problem.store.zero_grad();
    let grads = tape.backward(loss, &mut problem.store)?;
    let masks = tape.recorded_masks().to_vec();
    let scale = corrupt.unwrap_or(1.0);
    let mut stats = CheckStats::default();

    let mut probe = |problem: &mut Problem,
                     get: &dyn Fn(&mut Problem) -> &mut f64,
                     analytic: f64|
     -> Result<()> {
        let orig = *get(problem);
        *get(problem) = orig + FD_STEP;
        let plus = problem.loss_with_masks(&masks)?;
        *get(problem) = orig - FD_STEP;
        let minus = problem.loss_with_masks(&masks)?;
        *get(problem) = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        stats.max_rel_err = stats
            .max_rel_err
            .max(relative_error(analytic * scale, numeric));
        stats.samples += 1;
        Ok(())
    };

    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .wrt(*var)
            .map_or_else(|| vec![0.0; problem.inputs[i].numel()], <[f64]>::to_vec);
        for j in sample_entries(problem.inputs[i].numel(), rng) {
            probe(
                problem,
                &move |p: &mut Problem| &mut p.inputs[i].data_mut()[j],
                analytic[j],
            )?;
        }
    }
    let ids: Vec<_> = problem.store.ids().collect();
    for id in ids {
        let analytic = problem.store.tensor(id).grad().map_or_else(
            || vec![0.0; problem.store.tensor(id).numel()],
            <[f64]>::to_vec,
        );
        for j in sample_entries(analytic.len(), rng) {
            probe(
                problem,
                &move |p: &mut Problem| &mut p.store.tensor_mut(id).data_mut()[j],
                analytic[j],
            )?;
        }
    }
    Ok(stats)
}

/// Named groups of checks selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    TensorOps,
    Graph,
    Gr,
    Lr,
    Gt,
    Ba,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tensor_ops" => Scope::TensorOps,
            "graph" => Scope::Graph,
            "gr" => Scope::Gr,
            "lr" => Scope::Lr,
            "gt" => Scope::Gt,
            "ba" => Scope::Ba,
            "all" => Scope::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown gradcheck scope `{other}` (tensor_ops, graph, gr, lr, gt, ba, all)"
                )))
            }
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::TensorOps => "tensor_ops",
            Scope::Graph => "graph",
            Scope::Gr => "gr",
            Scope::Lr => "lr",
            Scope::Gt => "gt",
            Scope::Ba => "ba",
            Scope::All => "all",
        })
    }
}

/// One row of the gradcheck report.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub samples: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOLERANCE
    }
}

/// Header `op,max_rel_err,samples`.
pub fn report_csv(reports: &[OpReport]) -> String {
    let mut out = String::from("op,max_rel_err,samples\n");
    for r in reports {
        out.push_str(&format!("{},{:e},{}\n", r.op, r.max_rel_err, r.samples));
    }
    out
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Problem>;

struct Suite {
    op: &'static str,
    scope: Scope,
    build: Builder,
}

const SUITES: &[Suite] = &[
    Suite {
        op: "matmul",
        scope: Scope::TensorOps,
        build: matmul_problem,
    },
    Suite {
        op: "bmm",
        scope: Scope::TensorOps,
        build: bmm_problem,
    },
    Suite {
        op: "transpose",
        scope: Scope::TensorOps,
        build: transpose_problem,
    },
    Suite {
        op: "add_sub",
        scope: Scope::TensorOps,
        build: add_sub_problem,
    },
    Suite {
        op: "hadamard",
        scope: Scope::TensorOps,
        build: hadamard_problem,
    },
    Suite {
        op: "scale_sum_reshape",
        scope: Scope::TensorOps,
        build: scale_problem,
    },
    Suite {
        op: "gather",
        scope: Scope::TensorOps,
        build: gather_problem,
    },
    Suite {
        op: "conv2d_k1",
        scope: Scope::TensorOps,
        build: |r| conv_problem(r, 1),
    },
    Suite {
        op: "conv2d_k3",
        scope: Scope::TensorOps,
        build: |r| conv_problem(r, 3),
    },
    Suite {
        op: "conv2d_k7",
        scope: Scope::TensorOps,
        build: |r| conv_problem(r, 7),
    },
    Suite {
        op: "softmax_rows",
        scope: Scope::TensorOps,
        build: softmax_problem,
    },
    Suite {
        op: "gelu_tanh",
        scope: Scope::TensorOps,
        build: |r| gelu_problem(r, GeluKind::Tanh),
    },
    Suite {
        op: "gelu_erf",
        scope: Scope::TensorOps,
        build: |r| gelu_problem(r, GeluKind::Erf),
    },
    Suite {
        op: "sigmoid",
        scope: Scope::TensorOps,
        build: sigmoid_problem,
    },
    Suite {
        op: "cross_entropy",
        scope: Scope::TensorOps,
        build: cross_entropy_problem,
    },
    Suite {
        op: "relation_cosine",
        scope: Scope::Graph,
        build: |r| relation_problem(r, RelationVariant::Cosine),
    },
    Suite {
        op: "relation_softmax",
        scope: Scope::Graph,
        build: |r| relation_problem(r, RelationVariant::Softmax),
    },
    Suite {
        op: "node_update",
        scope: Scope::Graph,
        build: node_update_problem,
    },
    Suite {
        op: "graph_conv",
        scope: Scope::Graph,
        build: graph_conv_problem,
    },
    Suite {
        op: "run_graph_softmax",
        scope: Scope::Graph,
        build: |r| run_graph_problem(r, RelationVariant::Softmax),
    },
    Suite {
        op: "run_graph_cosine",
        scope: Scope::Graph,
        build: |r| run_graph_problem(r, RelationVariant::Cosine),
    },
    Suite {
        op: "global_relation",
        scope: Scope::Gr,
        build: gr_problem,
    },
    Suite {
        op: "local_relation",
        scope: Scope::Lr,
        build: lr_problem,
    },
    Suite {
        op: "gt_gr_then_lr",
        scope: Scope::Gt,
        build: |r| gt_problem(r, FusionType::GrThenLr),
    },
    Suite {
        op: "gt_lr_then_gr",
        scope: Scope::Gt,
        build: |r| gt_problem(r, FusionType::LrThenGr),
    },
    Suite {
        op: "gt_parallel",
        scope: Scope::Gt,
        build: |r| gt_problem(r, FusionType::Parallel),
    },
    Suite {
        op: "ba_coefficients",
        scope: Scope::Ba,
        build: |r| ba_problem(r, false),
    },
    Suite {
        op: "ba_apply",
        scope: Scope::Ba,
        build: |r| ba_problem(r, true),
    },
];

/// Names of the checks a scope runs, in report order.
pub fn ops_in_scope(scope: Scope) -> Vec<&'static str> {
    SUITES
        .iter()
        .filter(|s| scope == Scope::All || s.scope == scope)
        .map(|s| s.op)
        .collect()
}

/// Runs every check in `scope` over seeds `first_seed..first_seed + seeds`.
/// A check named by `fault` has its analytic gradients scaled by 1.01.
pub fn run_scope(
    scope: Scope,
    first_seed: u64,
    seeds: u64,
    fault: Option<&str>,
) -> Result<Vec<OpReport>> {
    if let Some(name) = fault {
        if !SUITES.iter().any(|s| s.op == name) {
            return Err(Error::Config(format!(
                "unknown op `{name}` for fault injection"
            )));
        }
    }
    let mut reports = Vec::new();
    for suite in SUITES
        .iter()
        .filter(|s| scope == Scope::All || s.scope == scope)
    {
        let mut total = CheckStats::default();
        for seed in first_seed..first_seed + seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut problem = (suite.build)(&mut rng)?;
            let corrupt = (fault == Some(suite.op)).then_some(1.01);
            total.absorb(check_problem(&mut problem, &mut rng, corrupt)?);
        }
        reports.push(OpReport {
            op: suite.op,
            max_rel_err: total.max_rel_err,
            samples: total.samples,
        });
    }
    Ok(reports)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Random linear functional of `out`, making every output entry matter.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Problem whose loss is a random projection of `f(inputs)`.
fn projected(
    rng: &mut ChaCha8Rng,
    store: ParamStore,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    f: impl Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Problem {
    let weights = rand_t(rng, out_shape);
    Problem::new(store, inputs, move |tape, store, vars| {
        let out = f(tape, store, vars)?;
        project(tape, out, &weights)
    })
}

fn matmul_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![rand_t(rng, &[3, 4]), rand_t(rng, &[4, 2])];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[3, 2],
        |t, _, v| t.matmul(v[0], v[1]),
    ))
}

fn bmm_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![rand_t(rng, &[2, 3, 4]), rand_t(rng, &[2, 4, 3])];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[2, 3, 3],
        |t, _, v| t.bmm(v[0], v[1]),
    ))
}

fn transpose_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![rand_t(rng, &[2, 3, 5])];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[2, 5, 3],
        |t, _, v| t.transpose(v[0]),
    ))
}

fn add_sub_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![
        rand_t(rng, &[4, 5]),
        rand_t(rng, &[4, 5]),
        rand_t(rng, &[4, 5]),
    ];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[4, 5],
        |t, _, v| {
            let s = t.add(v[0], v[1])?;
            t.sub(s, v[2])
        },
    ))
}

fn hadamard_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![rand_t(rng, &[5, 6]), rand_t(rng, &[5, 6])];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[5, 6],
        |t, _, v| t.mul(v[0], v[1]),
    ))
}

fn scale_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![rand_t(rng, &[4, 6])];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[3, 8],
        |t, _, v| {
            let s = t.scale(v[0], -1.7);
            t.reshape(s, [3, 8])
        },
    ))
}

fn gather_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let grid = WindowGrid::new(4, 6, 2, 3)?;
    let inputs = vec![rand_t(rng, &[2, 4, 6])];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[6, 4, 2],
        move |t, _, v| grid.pixel_nodes_var(t, v[0]),
    ))
}

fn conv_problem(rng: &mut ChaCha8Rng, k: usize) -> Result<Problem> {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_t(rng, &[3, 2, k, k]))?;
    let inputs = vec![rand_t(rng, &[2, 5, 6])];
    Ok(projected(rng, store, inputs, &[3, 5, 6], move |t, s, v| {
        let wv = t.param(s, w);
        t.conv2d(v[0], wv)
    }))
}

fn softmax_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![Tensor::uniform([6, 7], -3.0, 3.0, rng)];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[6, 7],
        |t, _, v| t.softmax_rows(v[0]),
    ))
}

fn gelu_problem(rng: &mut ChaCha8Rng, kind: GeluKind) -> Result<Problem> {
    let inputs = vec![Tensor::uniform([8, 8], -3.0, 3.0, rng)];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[8, 8],
        move |t, _, v| Ok(t.gelu(v[0], kind)),
    ))
}

fn sigmoid_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![Tensor::uniform([8, 8], -4.0, 4.0, rng)];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[8, 8],
        |t, _, v| Ok(t.sigmoid(v[0])),
    ))
}

fn cross_entropy_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let labels: std::sync::Arc<[usize]> = (0..20).map(|_| rng.random_range(0..3)).collect();
    let inputs = vec![Tensor::uniform([3, 4, 5], -2.0, 2.0, rng)];
    Ok(Problem::new(ParamStore::new(), inputs, move |t, _, v| {
        t.cross_entropy(v[0], labels.clone())
    }))
}

fn relation_problem(rng: &mut ChaCha8Rng, variant: RelationVariant) -> Result<Problem> {
    let inputs = vec![rand_t(rng, &[5, 4])];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[5, 5],
        move |t, _, v| graph::relation_var(t, v[0], variant),
    ))
}

fn node_update_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let inputs = vec![Tensor::uniform([6, 6], 0.0, 1.0, rng), rand_t(rng, &[6, 4])];
    Ok(projected(
        rng,
        ParamStore::new(),
        inputs,
        &[6, 4],
        |t, _, v| {
            let mask = graph::threshold_mask(t.value(v[0]), ThetaPolicy::default());
            let mask = t.resolve_mask(mask);
            t.masked_matmul(v[0], v[1], mask)
        },
    ))
}

fn graph_conv_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mut store = ParamStore::new();
    let layer = GraphLayer::new(&mut store, "w", rand_t(rng, &[5, 5]), 0)?;
    let inputs = vec![rand_t(rng, &[4, 5])];
    Ok(projected(rng, store, inputs, &[4, 5], move |t, s, v| {
        let w = t.param(s, layer.weight);
        t.matmul(v[0], w)
    }))
}

fn run_graph_problem(rng: &mut ChaCha8Rng, variant: RelationVariant) -> Result<Problem> {
    let mut store = ParamStore::new();
    let layers = (0..2)
        .map(|l| GraphLayer::new(&mut store, format!("w{l}"), rand_t(rng, &[4, 4]), l))
        .collect::<Result<Vec<_>>>()?;
    let config = GraphConfig {
        variant,
        theta: ThetaPolicy::default(),
    };
    let inputs = vec![rand_t(rng, &[3, 5, 4])];
    Ok(projected(rng, store, inputs, &[3, 5, 4], move |t, s, v| {
        graph::run_graph_var(t, s, v[0], &layers, &config)
    }))
}

const TOY_CHANNELS: usize = 4;
const TOY_SIZE: usize = 4;

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.tensor_mut(id);
        let fresh = Tensor::uniform(t.shape().to_vec(), -0.5, 0.5, rng);
        t.data_mut().copy_from_slice(fresh.data());
    }
}

fn toy_grid() -> Result<WindowGrid> {
    WindowGrid::new(TOY_SIZE, TOY_SIZE, 2, 2)
}

fn toy_input(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![rand_t(rng, &[TOY_CHANNELS, TOY_SIZE, TOY_SIZE])]
}

fn gr_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mut store = ParamStore::new();
    let gr = GlobalRelation::new(
        &mut store,
        "gr",
        TOY_CHANNELS,
        2,
        toy_grid()?,
        1,
        GraphConfig::default(),
        rng,
    )?;
    randomize(&mut store, rng);
    let inputs = toy_input(rng);
    Ok(projected(
        rng,
        store,
        inputs,
        &[TOY_CHANNELS, TOY_SIZE, TOY_SIZE],
        move |t, s, v| gr.forward_var(t, s, v[0]),
    ))
}

fn lr_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mut store = ParamStore::new();
    let lr = LocalRelation::new(
        &mut store,
        "lr",
        TOY_CHANNELS,
        2,
        toy_grid()?,
        1,
        GraphConfig::default(),
        rng,
    )?;
    randomize(&mut store, rng);
    let inputs = toy_input(rng);
    Ok(projected(
        rng,
        store,
        inputs,
        &[TOY_CHANNELS, TOY_SIZE, TOY_SIZE],
        move |t, s, v| lr.forward_var(t, s, v[0]),
    ))
}

fn gt_problem(rng: &mut ChaCha8Rng, fusion: FusionType) -> Result<Problem> {
    let mut store = ParamStore::new();
    let gt = GraphTransformer::new(
        &mut store,
        "gt",
        TOY_CHANNELS,
        (2, 2),
        toy_grid()?,
        1,
        GraphConfig::default(),
        fusion,
        rng,
    )?;
    randomize(&mut store, rng);
    let inputs = toy_input(rng);
    Ok(projected(
        rng,
        store,
        inputs,
        &[TOY_CHANNELS, TOY_SIZE, TOY_SIZE],
        move |t, s, v| gt.forward_var(t, s, v[0]),
    ))
}

fn ba_problem(rng: &mut ChaCha8Rng, apply: bool) -> Result<Problem> {
    let mut store = ParamStore::new();
    let ba = BoundaryAttention::new(&mut store, "ba", TOY_CHANNELS, 2, GeluKind::Tanh, rng)?;
    randomize(&mut store, rng);
    let inputs = vec![rand_t(rng, &[TOY_CHANNELS, 5, 5])];
    Ok(projected(
        rng,
        store,
        inputs,
        &[TOY_CHANNELS, 5, 5],
        move |t, s, v| {
            if apply {
                ba.apply_var(t, s, v[0])
            } else {
                ba.coefficients_var(t, s, v[0])
            }
        },
    ))
}
