//! Configurable residual network with a per-stage shared attention unit.
//!
//! Every residual block computes `a_t = f(x_t)` on its branch and combines
//! it with the incoming features as `x_{t+1} = x_t + a_t (*) h_t`, where the
//! attention vector `h_t` comes from the configured unit: a DIA-LSTM (or
//! standard LSTM) shared by all blocks of the stage and stepped once per
//! block, an independent squeeze-excite gate per block, or nothing (plain
//! residual net, `x_{t+1} = x_t + a_t`). The recurrent state is re-zeroed at
//! stage entry on every forward pass; the recurrence runs over depth, never
//! across batches.
//!
//! Ablation switches: dropping batch norm, removing a trailing fraction of
//! skip connections per stage, disabling the unit in chosen stages, stacking
//! cells, and swapping the cell output activation.

use std::cell::RefCell;

use crate::analysis::HiddenStateTrace;
use crate::attention::{
    stack_step, DiaLstmParams, DiaState, OutputActivation, SeParams, StandardLstmParams,
};
use crate::error::{Error, ExplosionEvent, ExplosionSite, Result};
use crate::ops::{self, RunningStats};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    None,
    Se,
    DiaLstm,
    StandardLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FExt {
    Gap,
    BnGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub stages: Vec<StageSpec>,
    pub block_kind: BlockKind,
    pub attention: AttentionKind,
    pub reduction_ratio: usize,
    pub cells_per_unit: usize,
    pub output_activation: OutputActivation,
    pub f_ext: FExt,
    pub use_batch_norm: bool,
    /// Trailing fraction of each stage's skip connections to remove;
    /// floor(fraction * blocks) trailing blocks lose their skip.
    pub skip_removal_fraction: f64,
    /// Stage indices (0-based) that get an attention unit. Stages outside
    /// the set behave exactly like `attention = none`.
    pub dia_enabled_stages: Vec<usize>,
    pub classes: usize,
    /// Test switch: replace every attention vector by exact ones, which must
    /// make the forward pass bit-identical to `attention = none`.
    pub force_attention_ones: bool,
}

impl NetworkConfig {
    /// Desk-scale default: 3 stages of basic blocks at widths 16/32/64 with
    /// a 3x3 stem, DIA-LSTM attention at r = 4.
    pub fn desk_default() -> Self {
        NetworkConfig {
            stages: vec![
                StageSpec { channels: 16, blocks: 3, stride: 1 },
                StageSpec { channels: 32, blocks: 3, stride: 2 },
                StageSpec { channels: 64, blocks: 3, stride: 2 },
            ],
            block_kind: BlockKind::Basic,
            attention: AttentionKind::DiaLstm,
            reduction_ratio: 4,
            cells_per_unit: 1,
            output_activation: OutputActivation::Sigmoid,
            f_ext: FExt::Gap,
            use_batch_norm: true,
            skip_removal_fraction: 0.0,
            dia_enabled_stages: vec![0, 1, 2],
            classes: 10,
            force_attention_ones: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.stride == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: channels/blocks/stride must be positive, got {s:?}"
                )));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::Config("reduction ratio must be >= 1".into()));
        }
        if self.cells_per_unit == 0 {
            return Err(Error::Config("cells per unit must be >= 1".into()));
        }
        if self.cells_per_unit > 1
            && !matches!(self.attention, AttentionKind::DiaLstm | AttentionKind::StandardLstm)
        {
            return Err(Error::Config(
                "stacked cells require an LSTM attention kind".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.skip_removal_fraction) {
            return Err(Error::Config(format!(
                "skip_removal_fraction must be in [0,1], got {}",
                self.skip_removal_fraction
            )));
        }
        for &s in &self.dia_enabled_stages {
            if s >= self.stages.len() {
                return Err(Error::Config(format!(
                    "dia_stages index {} out of range for {} stages",
                    s + 1,
                    self.stages.len()
                )));
            }
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.blocks).collect()
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

pub struct Conv2dLayer {
    pub weight: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    fn new(id: &str, rng: &Rng, in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv2dLayer {
            weight: Parameter::kaiming_conv(&format!("{id}.weight"), rng, &[out_c, in_c, k, k]),
            stride,
            padding,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight.value, self.stride, self.padding)
    }
}

pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: RefCell<RunningStats>,
    id: String,
}

impl BatchNorm2d {
    fn new(id: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::constant(&format!("{id}.gamma"), &[channels], 1.0, true),
            beta: Parameter::constant(&format!("{id}.beta"), &[channels], 0.0, true),
            stats: RefCell::new(RunningStats::new(channels)),
            id: id.to_string(),
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut stats = self.stats.borrow_mut();
        ops::batch_norm(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut stats,
            training,
            BN_EPS,
            BN_MOMENTUM,
        )
    }
}

/// Affine-free batch norm used inside F_ext (bn_gap): own running
/// statistics, fixed unit scale and zero shift, nothing trainable.
pub struct FExtNorm {
    stats: RefCell<RunningStats>,
    unit_gamma: Tensor,
    zero_beta: Tensor,
    id: String,
}

impl FExtNorm {
    fn new(id: &str, channels: usize) -> Self {
        FExtNorm {
            stats: RefCell::new(RunningStats::new(channels)),
            unit_gamma: Tensor::ones(&[channels]),
            zero_beta: Tensor::zeros(&[channels]),
            id: id.to_string(),
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut stats = self.stats.borrow_mut();
        ops::batch_norm(
            x,
            &self.unit_gamma,
            &self.zero_beta,
            &mut stats,
            training,
            BN_EPS,
            BN_MOMENTUM,
        )
    }
}

pub struct LinearLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl LinearLayer {
    fn new(id: &str, rng: &Rng, in_f: usize, out_f: usize) -> Self {
        LinearLayer {
            weight: Parameter::uniform_linear(&format!("{id}.weight"), rng, &[out_f, in_f]),
            bias: Parameter::constant(&format!("{id}.bias"), &[out_f], 0.0, true),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight.value, Some(&self.bias.value))
    }
}

// ---------------------------------------------------------------------------
// residual blocks
// ---------------------------------------------------------------------------

/// A residual block: a conv-bn-relu branch producing `a_t`, an optional
/// 1x1 projection on the skip path when shape changes, and a flag marking
/// this block's skip connection as removed by the ablation.
pub struct ResidualBlock {
    branch: Vec<(Conv2dLayer, Option<BatchNorm2d>)>,
    projection: Option<(Conv2dLayer, Option<BatchNorm2d>)>,
    pub skip_removed: bool,
}

/// Outputs of one block forward, kept for probing and diagnostics.
pub struct BlockOutputs {
    pub pre_attention: Tensor,
    pub attention: Option<Tensor>,
    pub output: Tensor,
    /// Mean square of the block output, a cheap activation-scale probe.
    pub activation_norm: f64,
}

impl ResidualBlock {
    fn new(
        id: &str,
        rng: &Rng,
        kind: BlockKind,
        in_c: usize,
        out_c: usize,
        stride: usize,
        use_bn: bool,
        skip_removed: bool,
    ) -> Self {
        let bn = |layer: &str, c: usize| -> Option<BatchNorm2d> {
            use_bn.then(|| BatchNorm2d::new(&format!("{id}.{layer}"), c))
        };
        let branch = match kind {
            BlockKind::Basic => vec![
                (
                    Conv2dLayer::new(&format!("{id}.conv1"), rng, in_c, out_c, 3, stride, 1),
                    bn("bn1", out_c),
                ),
                (
                    Conv2dLayer::new(&format!("{id}.conv2"), rng, out_c, out_c, 3, 1, 1),
                    bn("bn2", out_c),
                ),
            ],
            BlockKind::Bottleneck => {
                let mid = (out_c / 4).max(1);
                vec![
                    (
                        Conv2dLayer::new(&format!("{id}.conv1"), rng, in_c, mid, 1, 1, 0),
                        bn("bn1", mid),
                    ),
                    (
                        Conv2dLayer::new(&format!("{id}.conv2"), rng, mid, mid, 3, stride, 1),
                        bn("bn2", mid),
                    ),
                    (
                        Conv2dLayer::new(&format!("{id}.conv3"), rng, mid, out_c, 1, 1, 0),
                        bn("bn3", out_c),
                    ),
                ]
            }
        };
        let projection = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2dLayer::new(&format!("{id}.proj.conv"), rng, in_c, out_c, 1, stride, 0),
                use_bn.then(|| BatchNorm2d::new(&format!("{id}.proj.bn"), out_c)),
            )
        });
        ResidualBlock {
            branch,
            projection,
            skip_removed,
        }
    }

    /// Residual branch `a_t = f(x_t)`: each conv followed by (optional) BN
    /// and ReLU.
    pub fn branch_forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut cur = x.clone();
        for (conv, bn) in &self.branch {
            cur = conv.forward(&cur)?;
            if let Some(bn) = bn {
                cur = bn.forward(&cur, training)?;
            }
            cur = ops::relu(&cur);
        }
        Ok(cur)
    }

    /// Combines skip path, branch output, and attention vector into
    /// `x_{t+1}`.
    pub fn combine(
        &self,
        x: &Tensor,
        a: &Tensor,
        attention: Option<&Tensor>,
        training: bool,
    ) -> Result<Tensor> {
        let gated = match attention {
            Some(h) => ops::channelwise_mul(a, h)?,
            None => a.clone(),
        };
        if self.skip_removed {
            return Ok(gated);
        }
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let mut s = conv.forward(x)?;
                if let Some(bn) = bn {
                    s = bn.forward(&s, training)?;
                }
                s
            }
            None => x.clone(),
        };
        Ok(ops::add(&skip, &gated))
    }

    fn params(&self, out: &mut Vec<Parameter>) {
        for (conv, bn) in &self.branch {
            out.push(conv.weight.clone());
            if let Some(bn) = bn {
                out.push(bn.gamma.clone());
                out.push(bn.beta.clone());
            }
        }
        if let Some((conv, bn)) = &self.projection {
            out.push(conv.weight.clone());
            if let Some(bn) = bn {
                out.push(bn.gamma.clone());
                out.push(bn.beta.clone());
            }
        }
    }

    fn norms(&self) -> Vec<&BatchNorm2d> {
        let mut out: Vec<&BatchNorm2d> = self.branch.iter().filter_map(|(_, bn)| bn.as_ref()).collect();
        if let Some((_, Some(bn))) = &self.projection {
            out.push(bn);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// stage
// ---------------------------------------------------------------------------

pub enum StageAttention {
    None,
    Se(Vec<SeParams>),
    Dia(Vec<DiaLstmParams>),
    StandardLstm(Vec<StandardLstmParams>),
}

pub struct Stage {
    pub index: usize,
    pub channels: usize,
    pub blocks: Vec<ResidualBlock>,
    pub attention: StageAttention,
    f_ext_norm: Option<FExtNorm>,
}

impl Stage {
    /// Attention-unit parameter count for this stage, split into
    /// (weights, biases).
    pub fn attention_param_count(&self) -> (usize, usize) {
        match &self.attention {
            StageAttention::None => (0, 0),
            StageAttention::Se(mods) => (
                mods.iter().map(|m| m.weight_param_count()).sum(),
                0,
            ),
            StageAttention::Dia(cells) => (
                cells.iter().map(|c| c.weight_param_count()).sum(),
                cells.iter().map(|c| c.bias_param_count()).sum(),
            ),
            StageAttention::StandardLstm(cells) => (
                cells.iter().map(|c| c.weight_param_count()).sum(),
                cells.iter().map(|c| c.bias_param_count()).sum(),
            ),
        }
    }

    pub fn backbone_param_count(&self) -> usize {
        let mut params = Vec::new();
        for b in &self.blocks {
            b.params(&mut params);
        }
        params.iter().map(|p| p.numel()).sum()
    }

    fn f_ext(&self, a: &Tensor, training: bool) -> Result<Tensor> {
        let pooled_input = match &self.f_ext_norm {
            Some(norm) => norm.forward(a, training)?,
            None => a.clone(),
        };
        ops::global_average_pool(&pooled_input)
    }

    /// Runs all blocks, threading the shared cell state. Returns the stage
    /// output and, when `capture` is set and the stage has a recurrent
    /// unit, the trace of attention vectors.
    pub fn forward(
        &self,
        x: &Tensor,
        training: bool,
        capture: bool,
        force_ones: bool,
    ) -> Result<(Tensor, Option<HiddenStateTrace>)> {
        let batch = x.shape()[0];
        let mut states: Vec<DiaState> = match &self.attention {
            StageAttention::Dia(cells) => {
                vec![DiaState::zeros(batch, self.channels); cells.len()]
            }
            StageAttention::StandardLstm(cells) => {
                vec![DiaState::zeros(batch, self.channels); cells.len()]
            }
            _ => Vec::new(),
        };
        let mut trace: Option<Vec<Vec<f64>>> = match (&self.attention, capture) {
            (StageAttention::Dia(_) | StageAttention::StandardLstm(_), true) => Some(Vec::new()),
            _ => None,
        };

        let mut cur = x.clone();
        for (t, block) in self.blocks.iter().enumerate() {
            let explode = |site_block: usize| {
                Error::Explosion(ExplosionEvent {
                    step: 0,
                    epoch: 0,
                    site: ExplosionSite::Block {
                        stage: self.index,
                        block: site_block,
                    },
                })
            };
            let a = block.branch_forward(&cur, training)?;
            if !a.all_finite() {
                return Err(explode(t));
            }

            let h = if force_ones {
                match self.attention {
                    StageAttention::None => None,
                    _ => Some(Tensor::ones(&[batch, self.channels])),
                }
            } else {
                match &self.attention {
                    StageAttention::None => None,
                    StageAttention::Se(mods) => Some(mods[t].forward(&a)?),
                    StageAttention::Dia(cells) => {
                        let y = self.f_ext(&a, training)?;
                        let (h, new_states) = stack_step(cells, &y, &states)?;
                        states = new_states;
                        Some(h)
                    }
                    StageAttention::StandardLstm(cells) => {
                        let y = self.f_ext(&a, training)?;
                        let mut input = y;
                        let mut new_states = Vec::with_capacity(cells.len());
                        for (cell, state) in cells.iter().zip(&states) {
                            let (h, c) = cell.step(&input, state)?;
                            new_states.push(DiaState { h: h.clone(), c, t: state.t + 1 });
                            input = h;
                        }
                        states = new_states;
                        Some(input)
                    }
                }
            };

            if let (Some(rows), Some(hv)) = (trace.as_mut(), h.as_ref()) {
                rows.push(hv.to_vec());
            }

            cur = block.combine(&cur, &a, h.as_ref(), training)?;
            if !cur.all_finite() {
                return Err(explode(t));
            }
        }

        let trace = trace.map(|rows| {
            HiddenStateTrace::from_layer_slices(self.index, batch, self.channels, &rows)
        });
        Ok((cur, trace))
    }

    fn params(&self, out: &mut Vec<Parameter>) {
        for b in &self.blocks {
            b.params(out);
        }
        match &self.attention {
            StageAttention::None => {}
            StageAttention::Se(mods) => {
                for m in mods {
                    out.extend(m.params());
                }
            }
            StageAttention::Dia(cells) => {
                for c in cells {
                    out.extend(c.params());
                }
            }
            StageAttention::StandardLstm(cells) => {
                for c in cells {
                    out.extend(c.params());
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// network
// ---------------------------------------------------------------------------

pub struct ForwardOutput {
    pub logits: Tensor,
    /// Per-stage attention traces; `None` for stages without a recurrent
    /// unit or when capture is off.
    pub traces: Vec<Option<HiddenStateTrace>>,
}

pub struct Network {
    pub config: NetworkConfig,
    stem_conv: Conv2dLayer,
    stem_bn: Option<BatchNorm2d>,
    pub stages: Vec<Stage>,
    fc: LinearLayer,
}

impl Network {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let rng = Rng::new(seed).derive("model-init");

        let c0 = config.stages[0].channels;
        let stem_conv = Conv2dLayer::new("stem.conv", &rng, 3, c0, 3, 1, 1);
        let stem_bn = config.use_batch_norm.then(|| BatchNorm2d::new("stem.bn", c0));

        let mut stages = Vec::new();
        let mut in_c = c0;
        for (s, spec) in config.stages.iter().enumerate() {
            let removed = (config.skip_removal_fraction * spec.blocks as f64).floor() as usize;
            let first_removed = spec.blocks - removed;
            let mut blocks = Vec::new();
            for t in 0..spec.blocks {
                let stride = if t == 0 { spec.stride } else { 1 };
                let block_in = if t == 0 { in_c } else { spec.channels };
                blocks.push(ResidualBlock::new(
                    &format!("stage{s}.block{t}"),
                    &rng,
                    config.block_kind,
                    block_in,
                    spec.channels,
                    stride,
                    config.use_batch_norm,
                    t >= first_removed,
                ));
            }

            let enabled = config.dia_enabled_stages.contains(&s);
            let attention = if !enabled {
                StageAttention::None
            } else {
                match config.attention {
                    AttentionKind::None => StageAttention::None,
                    AttentionKind::Se => {
                        let mods = (0..spec.blocks)
                            .map(|t| {
                                SeParams::new(
                                    &format!("stage{s}.block{t}.se"),
                                    &rng,
                                    spec.channels,
                                    config.reduction_ratio,
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        StageAttention::Se(mods)
                    }
                    AttentionKind::DiaLstm => {
                        let cells = (0..config.cells_per_unit)
                            .map(|k| {
                                DiaLstmParams::new(
                                    &format!("stage{s}.attn.cell{k}"),
                                    &rng,
                                    spec.channels,
                                    config.reduction_ratio,
                                    config.output_activation,
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        StageAttention::Dia(cells)
                    }
                    AttentionKind::StandardLstm => {
                        let cells = (0..config.cells_per_unit)
                            .map(|k| {
                                StandardLstmParams::new(
                                    &format!("stage{s}.attn.cell{k}"),
                                    &rng,
                                    spec.channels,
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        StageAttention::StandardLstm(cells)
                    }
                }
            };
            let needs_f_ext_norm = matches!(config.f_ext, FExt::BnGap)
                && matches!(
                    attention,
                    StageAttention::Dia(_) | StageAttention::StandardLstm(_)
                );
            let f_ext_norm =
                needs_f_ext_norm.then(|| FExtNorm::new(&format!("stage{s}.fext_bn"), spec.channels));

            stages.push(Stage {
                index: s,
                channels: spec.channels,
                blocks,
                attention,
                f_ext_norm,
            });
            in_c = spec.channels;
        }

        let fc = LinearLayer::new("fc", &rng, in_c, config.classes);
        Ok(Network {
            config: config.clone(),
            stem_conv,
            stem_bn,
            stages,
            fc,
        })
    }

    /// Full forward pass: stem, stages, global pooling, classifier.
    pub fn forward(&self, images: &Tensor, training: bool, capture: bool) -> Result<ForwardOutput> {
        let mut cur = self.stem_conv.forward(images)?;
        if let Some(bn) = &self.stem_bn {
            cur = bn.forward(&cur, training)?;
        }
        cur = ops::relu(&cur);

        let mut traces = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (next, trace) =
                stage.forward(&cur, training, capture, self.config.force_attention_ones)?;
            traces.push(trace);
            cur = next;
        }

        let pooled = ops::global_average_pool(&cur)?;
        let logits = self.fc.forward(&pooled)?;
        if !logits.all_finite() {
            return Err(Error::Explosion(ExplosionEvent {
                step: 0,
                epoch: 0,
                site: ExplosionSite::Loss,
            }));
        }
        Ok(ForwardOutput { logits, traces })
    }

    /// Trainable parameters in construction order.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.stem_conv.weight.clone()];
        if let Some(bn) = &self.stem_bn {
            out.push(bn.gamma.clone());
            out.push(bn.beta.clone());
        }
        for stage in &self.stages {
            stage.params(&mut out);
        }
        out.push(self.fc.weight.clone());
        out.push(self.fc.bias.clone());
        out
    }

    fn batch_norms(&self) -> Vec<(&str, &BatchNorm2d)> {
        let mut out: Vec<(&str, &BatchNorm2d)> = Vec::new();
        if let Some(bn) = &self.stem_bn {
            out.push((bn.id.as_str(), bn));
        }
        for stage in &self.stages {
            for block in &stage.blocks {
                for bn in block.norms() {
                    out.push((bn.id.as_str(), bn));
                }
            }
        }
        out
    }

    fn f_ext_norms(&self) -> Vec<&FExtNorm> {
        self.stages.iter().filter_map(|s| s.f_ext_norm.as_ref()).collect()
    }

    /// Snapshot of everything a checkpoint must carry: parameters plus
    /// running statistics, in deterministic order.
    pub fn export_state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for p in self.parameters() {
            out.push((p.id.clone(), p.value.shape(), p.value.to_vec()));
        }
        for (id, bn) in self.batch_norms() {
            let stats = bn.stats.borrow();
            let c = stats.mean.len();
            out.push((format!("{id}.running_mean"), vec![c], stats.mean.clone()));
            out.push((format!("{id}.running_var"), vec![c], stats.var.clone()));
        }
        for norm in self.f_ext_norms() {
            let stats = norm.stats.borrow();
            let c = stats.mean.len();
            out.push((format!("{}.running_mean", norm.id), vec![c], stats.mean.clone()));
            out.push((format!("{}.running_var", norm.id), vec![c], stats.var.clone()));
        }
        out
    }

    /// Restores a state snapshot. Every entry must match an existing id and
    /// shape, and every id must be present.
    pub fn import_state(&self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use std::collections::HashMap;
        let mut by_id: HashMap<&str, (&Vec<usize>, &Vec<f64>)> = HashMap::new();
        for (id, shape, data) in entries {
            if by_id.insert(id.as_str(), (shape, data)).is_some() {
                return Err(Error::Format(format!("duplicate state entry '{id}'")));
            }
        }
        let own = self.export_state();
        if own.len() != entries.len() {
            return Err(Error::Format(format!(
                "state entry count mismatch: model has {}, snapshot has {}",
                own.len(),
                entries.len()
            )));
        }
        for (id, shape, _) in &own {
            let (got_shape, data) = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Format(format!("missing state entry '{id}'")))?;
            if *got_shape != shape {
                return Err(Error::Format(format!(
                    "state entry '{id}': shape {:?} does not match model {:?}",
                    got_shape, shape
                )));
            }
            self.write_entry(id, data)?;
        }
        Ok(())
    }

    fn write_entry(&self, id: &str, data: &[f64]) -> Result<()> {
        for p in self.parameters() {
            if p.id == id {
                p.value.set_data(data);
                return Ok(());
            }
        }
        let write_stats = |stats: &RefCell<RunningStats>, which: &str| {
            let mut s = stats.borrow_mut();
            match which {
                "running_mean" => s.mean.copy_from_slice(data),
                _ => s.var.copy_from_slice(data),
            }
        };
        for (bn_id, bn) in self.batch_norms() {
            for which in ["running_mean", "running_var"] {
                if id == format!("{bn_id}.{which}") {
                    write_stats(&bn.stats, which);
                    return Ok(());
                }
            }
        }
        for norm in self.f_ext_norms() {
            for which in ["running_mean", "running_var"] {
                if id == format!("{}.{which}", norm.id) {
                    write_stats(&norm.stats, which);
                    return Ok(());
                }
            }
        }
        Err(Error::Format(format!("unknown state entry '{id}'")))
    }
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StageParamCount {
    pub stage: usize,
    pub channels: usize,
    pub blocks: usize,
    pub backbone: usize,
    pub attention_weights: usize,
    pub attention_biases: usize,
    /// Weight-only closed form for the unit, when one applies
    /// (r | N for DIA/SE).
    pub closed_form: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ModelParamCount {
    pub stem: usize,
    pub stages: Vec<StageParamCount>,
    pub classifier: usize,
    pub total: usize,
}

impl ModelParamCount {
    pub fn attention_increment(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.attention_weights + s.attention_biases)
            .sum()
    }
}

/// Exact per-stage parameter enumeration with the attention increment
/// reported separately.
pub fn count_model_params(config: &NetworkConfig) -> Result<ModelParamCount> {
    let net = Network::new(config, 0)?;
    let mut stem = net.stem_conv.weight.numel();
    if let Some(bn) = &net.stem_bn {
        stem += bn.gamma.numel() + bn.beta.numel();
    }
    let mut stages = Vec::new();
    for (spec, stage) in config.stages.iter().zip(&net.stages) {
        let (aw, ab) = stage.attention_param_count();
        let n = spec.channels;
        let r = config.reduction_ratio;
        let enabled = config.dia_enabled_stages.contains(&stage.index);
        let closed_form = if !enabled {
            None
        } else {
            match config.attention {
                AttentionKind::DiaLstm if n % r == 0 => {
                    Some(config.cells_per_unit * 10 * n * n / r)
                }
                AttentionKind::StandardLstm => Some(config.cells_per_unit * 8 * n * n),
                AttentionKind::Se if n % r == 0 => Some(spec.blocks * 2 * n * n / r),
                AttentionKind::None => Some(0),
                _ => None,
            }
        };
        stages.push(StageParamCount {
            stage: stage.index,
            channels: n,
            blocks: spec.blocks,
            backbone: stage.backbone_param_count(),
            attention_weights: aw,
            attention_biases: ab,
            closed_form,
        });
    }
    let classifier = net.fc.weight.numel() + net.fc.bias.numel();
    let total = stem
        + stages
            .iter()
            .map(|s| s.backbone + s.attention_weights + s.attention_biases)
            .sum::<usize>()
        + classifier;
    Ok(ModelParamCount {
        stem,
        stages,
        classifier,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(attention: AttentionKind) -> NetworkConfig {
        NetworkConfig {
            stages: vec![
                StageSpec { channels: 4, blocks: 2, stride: 1 },
                StageSpec { channels: 8, blocks: 2, stride: 2 },
            ],
            block_kind: BlockKind::Basic,
            attention,
            reduction_ratio: 2,
            cells_per_unit: 1,
            output_activation: OutputActivation::Sigmoid,
            f_ext: FExt::Gap,
            use_batch_norm: true,
            skip_removal_fraction: 0.0,
            dia_enabled_stages: vec![0, 1],
            classes: 3,
            force_attention_ones: false,
        }
    }

    fn random_images(seed: u64, b: usize, hw: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut data = vec![0.0; b * 3 * hw * hw];
        rng.fill_normal(&mut data, 0.0, 1.0);
        Tensor::from_vec(data, &[b, 3, hw, hw])
    }

    #[test]
    fn forced_ones_matches_plain_resnet_bitwise() {
        let mut dia_cfg = tiny_config(AttentionKind::DiaLstm);
        dia_cfg.force_attention_ones = true;
        let none_cfg = tiny_config(AttentionKind::None);

        let net_dia = Network::new(&dia_cfg, 42).unwrap();
        let net_none = Network::new(&none_cfg, 42).unwrap();
        let images = random_images(7, 2, 8);
        let out_dia = net_dia.forward(&images, false, false).unwrap();
        let out_none = net_none.forward(&images, false, false).unwrap();
        let a = out_dia.logits.to_vec();
        let b = out_none.logits.to_vec();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn identical_batch_rows_give_identical_logits() {
        let cfg = tiny_config(AttentionKind::DiaLstm);
        let net = Network::new(&cfg, 5).unwrap();
        let one = random_images(9, 1, 8).to_vec();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let images = Tensor::from_vec(two, &[2, 3, 8, 8]);
        let out = net.forward(&images, false, false).unwrap();
        let logits = out.logits.to_vec();
        let k = cfg.classes;
        assert_eq!(&logits[..k], &logits[k..]);
    }

    #[test]
    fn block_forward_matches_op_composition() {
        let cfg = tiny_config(AttentionKind::None);
        let net = Network::new(&cfg, 3).unwrap();
        let block = &net.stages[0].blocks[1];
        let mut rng = Rng::new(21);
        let mut data = vec![0.0; 2 * 4 * 8 * 8];
        rng.fill_uniform(&mut data, -1.0, 1.0);
        let x = Tensor::from_vec(data, &[2, 4, 8, 8]);

        let a = block.branch_forward(&x, false).unwrap();
        let got = block.combine(&x, &a, None, false).unwrap();

        // Recompose by hand from the already-verified primitive ops.
        let (conv1, bn1) = &block.branch[0];
        let (conv2, bn2) = &block.branch[1];
        let mut cur = ops::conv2d(&x, &conv1.weight.value, conv1.stride, conv1.padding).unwrap();
        cur = bn1.as_ref().unwrap().forward(&cur, false).unwrap();
        cur = ops::relu(&cur);
        cur = ops::conv2d(&cur, &conv2.weight.value, conv2.stride, conv2.padding).unwrap();
        cur = bn2.as_ref().unwrap().forward(&cur, false).unwrap();
        cur = ops::relu(&cur);
        let want = ops::add(&x, &cur);

        for (g, w) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn dia_increment_is_constant_in_depth() {
        let mut counts = Vec::new();
        for blocks in [3usize, 9, 18] {
            let mut cfg = NetworkConfig::desk_default();
            for s in cfg.stages.iter_mut() {
                s.blocks = blocks;
            }
            counts.push(count_model_params(&cfg).unwrap().attention_increment());
        }
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
    }

    #[test]
    fn se_increment_scales_with_depth() {
        let mut counts = Vec::new();
        for blocks in [3usize, 9, 18] {
            let mut cfg = NetworkConfig::desk_default();
            cfg.attention = AttentionKind::Se;
            for s in cfg.stages.iter_mut() {
                s.blocks = blocks;
            }
            counts.push(count_model_params(&cfg).unwrap().attention_increment());
        }
        assert_eq!(counts[1], 3 * counts[0]);
        assert_eq!(counts[2], 6 * counts[0]);
    }

    #[test]
    fn none_increment_is_zero() {
        let mut cfg = NetworkConfig::desk_default();
        cfg.attention = AttentionKind::None;
        assert_eq!(count_model_params(&cfg).unwrap().attention_increment(), 0);
    }

    #[test]
    fn dia_stage_count_matches_closed_form() {
        let cfg = NetworkConfig::desk_default();
        let counts = count_model_params(&cfg).unwrap();
        for s in &counts.stages {
            assert_eq!(
                Some(s.attention_weights),
                s.closed_form,
                "stage {} weight count vs closed form",
                s.stage
            );
        }
    }

    #[test]
    fn skip_removal_marks_trailing_third() {
        let mut cfg = NetworkConfig::desk_default();
        for s in cfg.stages.iter_mut() {
            s.blocks = 9;
        }
        cfg.skip_removal_fraction = 1.0 / 3.0;
        let net = Network::new(&cfg, 0).unwrap();
        for stage in &net.stages {
            let flags: Vec<bool> = stage.blocks.iter().map(|b| b.skip_removed).collect();
            let removed = flags.iter().filter(|f| **f).count();
            assert_eq!(removed, 3, "floor(9/3) trailing skips per stage");
            assert!(flags[6..].iter().all(|f| *f));
            assert!(flags[..6].iter().all(|f| !*f));
        }
    }

    #[test]
    fn disabled_stage_is_bit_identical_to_none() {
        let mut dia_cfg = tiny_config(AttentionKind::DiaLstm);
        dia_cfg.dia_enabled_stages = vec![1]; // stage 0 disabled
        let none_cfg = tiny_config(AttentionKind::None);

        let net_dia = Network::new(&dia_cfg, 11).unwrap();
        let net_none = Network::new(&none_cfg, 11).unwrap();
        let images = random_images(13, 2, 8);

        // Compare the stage-0 output alone.
        let stem = |net: &Network| -> Tensor {
            let mut cur = net.stem_conv.forward(&images).unwrap();
            if let Some(bn) = &net.stem_bn {
                cur = bn.forward(&cur, false).unwrap();
            }
            ops::relu(&cur)
        };
        let x0 = stem(&net_dia);
        let x1 = stem(&net_none);
        assert_eq!(x0.to_vec(), x1.to_vec());
        let (s_dia, _) = net_dia.stages[0].forward(&x0, false, false, false).unwrap();
        let (s_none, _) = net_none.stages[0].forward(&x1, false, false, false).unwrap();
        let (a, b) = (s_dia.to_vec(), s_none.to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn capture_produces_stage_traces() {
        let cfg = tiny_config(AttentionKind::DiaLstm);
        let net = Network::new(&cfg, 2).unwrap();
        let images = random_images(3, 4, 8);
        let out = net.forward(&images, false, true).unwrap();
        assert_eq!(out.traces.len(), 2);
        for (s, trace) in out.traces.iter().enumerate() {
            let trace = trace.as_ref().expect("stage has a DIA unit");
            assert_eq!(trace.batch, 4);
            assert_eq!(trace.channels, cfg.stages[s].channels);
            assert_eq!(trace.layers, cfg.stages[s].blocks);
        }
    }

    #[test]
    fn state_roundtrip_is_bitwise() {
        let cfg = tiny_config(AttentionKind::DiaLstm);
        let net = Network::new(&cfg, 77).unwrap();
        let images = random_images(1, 2, 8);
        // Touch the running stats so they are non-trivial.
        net.forward(&images, true, false).unwrap();
        let state = net.export_state();

        let net2 = Network::new(&cfg, 78).unwrap();
        net2.import_state(&state).unwrap();
        assert_eq!(net.export_state(), net2.export_state());

        let out1 = net.forward(&images, false, false).unwrap();
        let out2 = net2.forward(&images, false, false).unwrap();
        assert_eq!(out1.logits.to_vec(), out2.logits.to_vec());
    }

    #[test]
    fn import_rejects_missing_and_misshapen_entries() {
        let cfg = tiny_config(AttentionKind::None);
        let net = Network::new(&cfg, 1).unwrap();
        let mut state = net.export_state();
        state.pop();
        assert!(net.import_state(&state).is_err());

        let mut state = net.export_state();
        state[0].1 = vec![1, 2, 3];
        assert!(net.import_state(&state).is_err());
    }

    #[test]
    fn bottleneck_blocks_build_and_run() {
        let mut cfg = tiny_config(AttentionKind::DiaLstm);
        cfg.block_kind = BlockKind::Bottleneck;
        let net = Network::new(&cfg, 8).unwrap();
        let images = random_images(1, 2, 8);
        let out = net.forward(&images, true, false).unwrap();
        assert_eq!(out.logits.shape(), vec![2, 3]);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = tiny_config(AttentionKind::Se);
        cfg.cells_per_unit = 3;
        assert!(cfg.validate().is_err(), "stacked cells need an LSTM kind");

        let mut cfg = tiny_config(AttentionKind::None);
        cfg.skip_removal_fraction = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config(AttentionKind::None);
        cfg.dia_enabled_stages = vec![5];
        assert!(cfg.validate().is_err());
    }
}
