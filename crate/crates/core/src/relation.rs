//! Global (window-level) and local (pixel-level) relation modules and their
//! fusion into a graph transformer block.
//!
//! Both modules squeeze channels with a 1×1 conv, run the graph relation
//! network over their nodes, restore channels with a second 1×1 conv and add
//! the result to the input. The restoring conv starts at zero, so a freshly
//! built block is the identity map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{self, GraphConfig, GraphLayer};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::window::WindowGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionType {
    /// `LR(GR(x))`
    #[default]
    GrThenLr,
    /// `GR(LR(x))`
    LrThenGr,
    /// `x + ΔGR(x) + ΔLR(x)`
    Parallel,
}

impl FusionType {
    pub const ALL: [FusionType; 3] = [
        FusionType::GrThenLr,
        FusionType::LrThenGr,
        FusionType::Parallel,
    ];
}

impl fmt::Display for FusionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionType::GrThenLr => "gr_then_lr",
            FusionType::LrThenGr => "lr_then_gr",
            FusionType::Parallel => "parallel",
        })
    }
}

impl FromStr for FusionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gr_then_lr" => Ok(FusionType::GrThenLr),
            "lr_then_gr" => Ok(FusionType::LrThenGr),
            "parallel" => Ok(FusionType::Parallel),
            other => Err(Error::Config(format!(
                "unknown fusion `{other}` (expected gr_then_lr, lr_then_gr or parallel)"
            ))),
        }
    }
}

fn squeezed_channels(op: &'static str, channels: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || !channels.is_multiple_of(ratio) {
        return Err(Error::invalid(
            op,
            format!("compression ratio {ratio} does not divide {channels} channels"),
        ));
    }
    Ok(channels / ratio)
}

/// Squeeze / restore 1×1 conv pair shared by both relation modules.
#[derive(Clone, Debug)]
struct ChannelPair {
    squeeze: ParamId,
    unsqueeze: ParamId,
}

impl ChannelPair {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            squeeze: store.add(
                format!("{prefix}.squeeze"),
                Tensor::randn([hidden, channels, 1, 1], std, rng),
            )?,
            unsqueeze: store.add(
                format!("{prefix}.unsqueeze"),
                Tensor::zeros([channels, hidden, 1, 1]),
            )?,
        })
    }
}

fn graph_layers(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    depth: usize,
) -> Result<Vec<GraphLayer>> {
    if depth == 0 {
        return Err(Error::invalid("graph", "graph depth must be at least 1"));
    }
    (0..depth)
        .map(|l| GraphLayer::new(store, format!("{prefix}.graph{l}"), Tensor::eye(dim), l))
        .collect()
}

fn check_input(
    op: &'static str,
    tape: &Tape,
    x: Var,
    channels: usize,
    grid: &WindowGrid,
) -> Result<()> {
    let expected = [channels, grid.height(), grid.width()];
    if tape.shape(x) != expected {
        return Err(Error::shape(op, tape.shape(x), &expected));
    }
    Ok(())
}

/// Global relation: every window is one node of dimension `(C/r)·h_w·w_w`.
#[derive(Clone, Debug)]
pub struct GlobalRelation {
    convs: ChannelPair,
    layers: Vec<GraphLayer>,
    channels: usize,
    hidden: usize,
    grid: WindowGrid,
    graph: GraphConfig,
}

impl GlobalRelation {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        ratio: usize,
        grid: WindowGrid,
        depth: usize,
        graph: GraphConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = squeezed_channels("global_relation", channels, ratio)?;
        let convs = ChannelPair::new(store, prefix, channels, hidden, rng)?;
        let layers = graph_layers(store, prefix, hidden * grid.window_area(), depth)?;
        Ok(Self {
            convs,
            layers,
            channels,
            hidden,
            grid,
            graph,
        })
    }

    /// Closed-form parameter count: `2·C·(C/r) + L·D²` with `D = (C/r)·h_w·w_w`.
    pub fn param_count(channels: usize, ratio: usize, grid: &WindowGrid, depth: usize) -> usize {
        let hidden = channels / ratio;
        let d = hidden * grid.window_area();
        2 * channels * hidden + depth * d * d
    }

    pub fn node_dim(&self) -> usize {
        self.hidden * self.grid.window_area()
    }

    pub fn squeeze(&self) -> ParamId {
        self.convs.squeeze
    }

    pub fn unsqueeze(&self) -> ParamId {
        self.convs.unsqueeze
    }

    pub fn layers(&self) -> &[GraphLayer] {
        &self.layers
    }

    pub fn grid(&self) -> &WindowGrid {
        &self.grid
    }

    pub fn graph_config(&self) -> &GraphConfig {
        &self.graph
    }

    /// The residual branch alone (output minus input).
    pub fn delta_var(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_input("global_relation", tape, x, self.channels, &self.grid)?;
        let k = self.grid.num_windows();
        let (wh, ww) = (self.grid.window_height(), self.grid.window_width());
        let sq = tape.param(store, self.convs.squeeze);
        let squeezed = tape.conv2d(x, sq)?;
        let windows = self.grid.partition_var(tape, squeezed)?;
        let nodes = tape.reshape(windows, [k, self.node_dim()])?;
        let related = graph::run_graph_var(tape, store, nodes, &self.layers, &self.graph)?;
        let windows = tape.reshape(related, [k, self.hidden, wh, ww])?;
        let merged = self.grid.merge_var(tape, windows)?;
        let un = tape.param(store, self.convs.unsqueeze);
        tape.conv2d(merged, un)
    }

    pub fn forward_var(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let delta = self.delta_var(tape, store, x)?;
        tape.add(x, delta)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        eval(x, |tape, v| self.forward_var(tape, store, v))
    }
}

/// Local relation: inside each window, every pixel is a node of dimension
/// `C/r`. Windows never exchange information.
#[derive(Clone, Debug)]
pub struct LocalRelation {
    convs: ChannelPair,
    layers: Vec<GraphLayer>,
    channels: usize,
    grid: WindowGrid,
    graph: GraphConfig,
}

impl LocalRelation {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        ratio: usize,
        grid: WindowGrid,
        depth: usize,
        graph: GraphConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = squeezed_channels("local_relation", channels, ratio)?;
        let convs = ChannelPair::new(store, prefix, channels, hidden, rng)?;
        let layers = graph_layers(store, prefix, hidden, depth)?;
        Ok(Self {
            convs,
            layers,
            channels,
            grid,
            graph,
        })
    }

    /// Closed-form parameter count: `2·C·(C/r) + L·(C/r)²`.
    pub fn param_count(channels: usize, ratio: usize, depth: usize) -> usize {
        let hidden = channels / ratio;
        2 * channels * hidden + depth * hidden * hidden
    }

    pub fn squeeze(&self) -> ParamId {
        self.convs.squeeze
    }

    pub fn unsqueeze(&self) -> ParamId {
        self.convs.unsqueeze
    }

    pub fn layers(&self) -> &[GraphLayer] {
        &self.layers
    }

    pub fn grid(&self) -> &WindowGrid {
        &self.grid
    }

    pub fn graph_config(&self) -> &GraphConfig {
        &self.graph
    }

    pub fn delta_var(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_input("local_relation", tape, x, self.channels, &self.grid)?;
        let sq = tape.param(store, self.convs.squeeze);
        let squeezed = tape.conv2d(x, sq)?;
        let nodes = self.grid.pixel_nodes_var(tape, squeezed)?;
        let related = graph::run_graph_var(tape, store, nodes, &self.layers, &self.graph)?;
        let merged = self.grid.merge_pixel_nodes_var(tape, related)?;
        let un = tape.param(store, self.convs.unsqueeze);
        tape.conv2d(merged, un)
    }

    pub fn forward_var(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let delta = self.delta_var(tape, store, x)?;
        tape.add(x, delta)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        eval(x, |tape, v| self.forward_var(tape, store, v))
    }
}

/// Global and local relation fused in series or in parallel.
#[derive(Clone, Debug)]
pub struct GraphTransformer {
    pub global: GlobalRelation,
    pub local: LocalRelation,
    pub fusion: FusionType,
}

impl GraphTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        ratios: (usize, usize),
        grid: WindowGrid,
        depth: usize,
        graph: GraphConfig,
        fusion: FusionType,
        rng: &mut R,
    ) -> Result<Self> {
        let global = GlobalRelation::new(
            store,
            &format!("{prefix}.gr"),
            channels,
            ratios.0,
            grid,
            depth,
            graph,
            rng,
        )?;
        let local = LocalRelation::new(
            store,
            &format!("{prefix}.lr"),
            channels,
            ratios.1,
            grid,
            depth,
            graph,
            rng,
        )?;
        Ok(Self {
            global,
            local,
            fusion,
        })
    }

    pub fn param_count(
        channels: usize,
        ratios: (usize, usize),
        grid: &WindowGrid,
        depth: usize,
    ) -> usize {
        GlobalRelation::param_count(channels, ratios.0, grid, depth)
            + LocalRelation::param_count(channels, ratios.1, depth)
    }

    pub fn forward_var(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self.fusion {
            FusionType::GrThenLr => {
                let y = self.global.forward_var(tape, store, x)?;
                self.local.forward_var(tape, store, y)
            }
            FusionType::LrThenGr => {
                let y = self.local.forward_var(tape, store, x)?;
                self.global.forward_var(tape, store, y)
            }
            FusionType::Parallel => {
                let dg = self.global.delta_var(tape, store, x)?;
                let dl = self.local.delta_var(tape, store, x)?;
                let y = tape.add(x, dg)?;
                tape.add(y, dl)
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        eval(x, |tape, v| self.forward_var(tape, store, v))
    }
}

pub(crate) fn eval(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}
