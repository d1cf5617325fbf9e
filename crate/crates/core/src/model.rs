//! Toy windowed segmentation network.
//!
//! `3×3 stem → stages → [BA] → 1×1 classifier`, all at input resolution.
//! A stage is a run of window self-attention blocks (single head, each with
//! a pointwise MLP) followed by an optional graph transformer block on the
//! stage's window grid.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boundary::BoundaryAttention;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, RelationVariant, ThetaPolicy};
use crate::ops::GeluKind;
use crate::relation::{FusionType, GraphTransformer};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::window::WindowGrid;

pub const INPUT_CHANNELS: usize = 3;
pub const STEM_KERNEL: usize = 3;
/// Hidden width of the block MLP relative to the channel count.
pub const MLP_EXPANSION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    /// Window rows `M`.
    pub rows: usize,
    /// Window columns `N`.
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterConfig {
    pub channels: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub fusion: FusionType,
    pub r_gr: usize,
    pub r_lr: usize,
    pub r_ba: usize,
    pub theta_coefficient: f64,
    pub graph_depth: usize,
    pub relation: RelationVariant,
    pub gelu: GeluKind,
    pub enable_gt: bool,
    pub enable_ba: bool,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        let stage = StageConfig {
            blocks: 1,
            rows: 2,
            cols: 2,
        };
        Self {
            channels: 16,
            stages: vec![stage, stage],
            num_classes: 3,
            height: 8,
            width: 8,
            fusion: FusionType::GrThenLr,
            r_gr: 16,
            r_lr: 16,
            r_ba: 16,
            theta_coefficient: 0.25,
            graph_depth: 1,
            relation: RelationVariant::Softmax,
            gelu: GeluKind::Tanh,
            enable_gt: true,
            enable_ba: true,
            seed: 0,
        }
    }
}

fn constraint(msg: String) -> Error {
    Error::Config(msg)
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.num_classes == 0 || self.height == 0 || self.width == 0 {
            return Err(constraint(
                "channels, num_classes, height and width must be positive".into(),
            ));
        }
        if self.stages.is_empty() {
            return Err(constraint("at least one stage is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.rows == 0
                || s.cols == 0
                || !self.height.is_multiple_of(s.rows)
                || !self.width.is_multiple_of(s.cols)
            {
                return Err(constraint(format!(
                    "stage {i}: {}×{} windows do not divide a {}×{} map",
                    s.rows, s.cols, self.height, self.width
                )));
            }
        }
        for (name, r, on) in [
            ("r_gr", self.r_gr, self.enable_gt),
            ("r_lr", self.r_lr, self.enable_gt),
            ("r_ba", self.r_ba, self.enable_ba),
        ] {
            if on && (r == 0 || !self.channels.is_multiple_of(r)) {
                return Err(constraint(format!(
                    "{name} = {r} must divide channels = {}",
                    self.channels
                )));
            }
        }
        if !(self.theta_coefficient.is_finite() && self.theta_coefficient >= 0.0) {
            return Err(constraint(format!(
                "theta_coefficient = {} must be finite and non-negative",
                self.theta_coefficient
            )));
        }
        if self.graph_depth == 0 {
            return Err(constraint("graph_depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            variant: self.relation,
            theta: ThetaPolicy::MultipleOfMean(self.theta_coefficient),
        }
    }

    pub fn grid(&self, stage: usize) -> Result<WindowGrid> {
        let s = self.stages[stage];
        WindowGrid::new(self.height, self.width, s.rows, s.cols)
    }

    /// Parameters of the network without GT and BA:
    /// `27·C + Σ blocks · (4 + 2·e)·C² + classes·C` with MLP expansion `e`.
    pub fn baseline_param_count(&self) -> usize {
        let c = self.channels;
        let blocks: usize = self.stages.iter().map(|s| s.blocks).sum();
        INPUT_CHANNELS * STEM_KERNEL * STEM_KERNEL * c
            + blocks * (4 + 2 * MLP_EXPANSION) * c * c
            + self.num_classes * c
    }

    /// Parameters of all GT blocks (zero when disabled).
    pub fn gt_param_count(&self) -> Result<usize> {
        if !self.enable_gt {
            return Ok(0);
        }
        (0..self.stages.len()).try_fold(0, |acc, i| {
            let grid = self.grid(i)?;
            Ok(acc
                + GraphTransformer::param_count(
                    self.channels,
                    (self.r_gr, self.r_lr),
                    &grid,
                    self.graph_depth,
                ))
        })
    }

    pub fn ba_param_count(&self) -> usize {
        if self.enable_ba {
            BoundaryAttention::param_count(self.channels, self.r_ba)
        } else {
            0
        }
    }

    /// Closed-form total parameter count.
    pub fn expected_param_count(&self) -> Result<usize> {
        Ok(self.baseline_param_count() + self.gt_param_count()? + self.ba_param_count())
    }
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    fc1: ParamId,
    fc2: ParamId,
}

#[derive(Clone, Debug)]
struct Stage {
    grid: WindowGrid,
    blocks: Vec<AttentionBlock>,
    gt: Option<GraphTransformer>,
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    config: SegmenterConfig,
    store: ParamStore,
    stem: ParamId,
    stages: Vec<Stage>,
    ba: Option<BoundaryAttention>,
    head: ParamId,
}

fn conv_weight(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    Tensor::randn([cout, cin, k, k], 1.0 / ((cin * k * k) as f64).sqrt(), rng)
}

impl Segmenter {
    /// Builds and initializes a model; parameters depend only on the config.
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let stem = store.add(
            "stem.weight",
            conv_weight(&mut rng, c, INPUT_CHANNELS, STEM_KERNEL),
        )?;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (si, s) in config.stages.iter().enumerate() {
            let grid = config.grid(si)?;
            let mut blocks = Vec::with_capacity(s.blocks);
            for bi in 0..s.blocks {
                let p = format!("stage{si}.block{bi}");
                let mut add = |name: &str, cout: usize, cin: usize| {
                    store.add(format!("{p}.{name}"), conv_weight(&mut rng, cout, cin, 1))
                };
                let hidden = MLP_EXPANSION * c;
                blocks.push(AttentionBlock {
                    q: add("attn.q", c, c)?,
                    k: add("attn.k", c, c)?,
                    v: add("attn.v", c, c)?,
                    o: add("attn.o", c, c)?,
                    fc1: add("mlp.fc1", hidden, c)?,
                    fc2: add("mlp.fc2", c, hidden)?,
                });
            }
            let gt = if config.enable_gt {
                Some(GraphTransformer::new(
                    &mut store,
                    &format!("stage{si}.gt"),
                    c,
                    (config.r_gr, config.r_lr),
                    grid,
                    config.graph_depth,
                    config.graph_config(),
                    config.fusion,
                    &mut rng,
                )?)
            } else {
                None
            };
            stages.push(Stage { grid, blocks, gt });
        }
        let ba = if config.enable_ba {
            Some(BoundaryAttention::new(
                &mut store,
                "ba",
                c,
                config.r_ba,
                config.gelu,
                &mut rng,
            )?)
        } else {
            None
        };
        let head = store.add(
            "head.weight",
            conv_weight(&mut rng, config.num_classes, c, 1),
        )?;
        Ok(Self {
            config,
            store,
            stem,
            stages,
            ba,
            head,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn boundary_attention(&self) -> Option<&BoundaryAttention> {
        self.ba.as_ref()
    }

    /// Ids of the BA parameters, empty when BA is disabled.
    pub fn ba_params(&self) -> Vec<ParamId> {
        self.ba
            .as_ref()
            .map_or_else(Vec::new, |ba| vec![ba.squeeze, ba.local, ba.unsqueeze])
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != [INPUT_CHANNELS, self.config.height, self.config.width] {
            return Err(Error::invalid(
                "segmenter",
                format!(
                    "expected a [3×{}×{}] image, got {shape:?}",
                    self.config.height, self.config.width
                ),
            ));
        }
        Ok(())
    }

    fn attention_var(
        &self,
        tape: &mut Tape,
        grid: &WindowGrid,
        b: &AttentionBlock,
        x: Var,
    ) -> Result<Var> {
        let mut proj = |id| -> Result<Var> {
            let w = tape.param(&self.store, id);
            let y = tape.conv2d(x, w)?;
            grid.pixel_nodes_var(tape, y)
        };
        let (q, k, v) = (proj(b.q)?, proj(b.k)?, proj(b.v)?);
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.config.channels as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let out = tape.bmm(attn, v)?;
        let out = grid.merge_pixel_nodes_var(tape, out)?;
        let wo = tape.param(&self.store, b.o);
        let out = tape.conv2d(out, wo)?;
        let x = tape.add(x, out)?;
        let w1 = tape.param(&self.store, b.fc1);
        let w2 = tape.param(&self.store, b.fc2);
        let h = tape.conv2d(x, w1)?;
        let h = tape.gelu(h, self.config.gelu);
        let h = tape.conv2d(h, w2)?;
        tape.add(x, h)
    }

    /// Head input features `[C×H×W]` (after BA when enabled).
    pub fn features_var(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        self.check_image(tape.shape(image))?;
        let w = tape.param(&self.store, self.stem);
        let mut x = tape.conv2d(image, w)?;
        for stage in &self.stages {
            for b in &stage.blocks {
                x = self.attention_var(tape, &stage.grid, b, x)?;
            }
            if let Some(gt) = &stage.gt {
                x = gt.forward_var(tape, &self.store, x)?;
            }
        }
        if let Some(ba) = &self.ba {
            x = ba.apply_var(tape, &self.store, x)?;
        }
        Ok(x)
    }

    /// Class scores `[classes×H×W]`.
    pub fn logits_var(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let f = self.features_var(tape, image)?;
        let w = tape.param(&self.store, self.head);
        tape.conv2d(f, w)
    }

    /// Mean per-pixel cross-entropy of one sample.
    pub fn loss_var(&self, tape: &mut Tape, image: Var, labels: &LabelMap) -> Result<Var> {
        let logits = self.logits_var(tape, image)?;
        tape.cross_entropy(logits, Arc::from(labels.values()))
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let out = self.logits_var(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per pixel; ties go to the lowest class id.
    pub fn predict(&self, image: &Tensor) -> Result<LabelMap> {
        let logits = self.logits(image)?;
        let (h, w) = (self.config.height, self.config.width);
        let d = logits.data();
        Ok(LabelMap::from_fn(h, w, |r, c| {
            let p = r * w + c;
            (0..self.config.num_classes)
                .fold((0, f64::NEG_INFINITY), |(best, bv), k| {
                    let v = d[k * h * w + p];
                    if v > bv {
                        (k, v)
                    } else {
                        (best, bv)
                    }
                })
                .0
        }))
    }
}
