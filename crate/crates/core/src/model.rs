//! Student description and per-stage model assembly.
//!
//! A student is a stem, an ordered list of coarse blocks and a decoder
//! (global average pool + linear classifier). During staged training the
//! network is grown block by block. Each intermediate stage ends in a
//! teaching reference head: a 1×1 convolution adapter, an adaptive average
//! pool and the shared classifier. When the last stage begins the adapter is
//! dropped, leaving exactly the original student.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Layer, Linear, Network, Residual, Segment};
use crate::schedule::StageSchedule;

pub const STEM: &str = "stem";
pub const POOL: &str = "pool";
pub const CLASSIFIER: &str = "classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn square(channels: usize, size: usize) -> Self {
        InputShape {
            channels,
            height: size,
            width: size,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `repeat` × (3×3 conv → batch-norm → ReLU).
    ConvBnRelu,
    /// `repeat` basic residual units (two 3×3 convs, projection shortcut on shape change).
    Residual,
    /// VGG-style: `repeat` × (3×3 conv → BN → ReLU), then 2×2 max-pool when reducing.
    Plain,
    /// `repeat` inverted-residual units (expand 1×1, depthwise 3×3, project 1×1).
    Inverted,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub id: String,
    pub kind: BlockKind,
    pub out_channels: usize,
    /// Spatial reduction factor, 1 or 2.
    #[serde(default = "one")]
    pub reduction: usize,
    #[serde(default = "one")]
    pub repeat: usize,
    /// Hidden-width multiplier for inverted units.
    #[serde(default = "one")]
    pub expansion: usize,
}

impl BlockSpec {
    pub fn new(id: &str, kind: BlockKind, out_channels: usize, reduction: usize) -> Self {
        BlockSpec {
            id: id.to_string(),
            kind,
            out_channels,
            reduction,
            repeat: 1,
            expansion: 1,
        }
    }

    pub fn repeat(mut self, repeat: usize) -> Self {
        self.repeat = repeat;
        self
    }

    pub fn expansion(mut self, expansion: usize) -> Self {
        self.expansion = expansion;
        self
    }

    fn build(&self, prefix: &str, in_channels: usize, rng: &mut ChaCha8Rng) -> Vec<Layer> {
        let conv = |name: String, cin, cout, k, s, groups, rng: &mut ChaCha8Rng| {
            Layer::Conv(Conv2d::new(&name, cin, cout, k, s, k / 2, groups, false, rng))
        };
        let bn = |name: String, c| Layer::BatchNorm(BatchNorm2d::new(&name, c));
        let out = self.out_channels;
        let mut layers = Vec::new();
        match self.kind {
            BlockKind::ConvBnRelu | BlockKind::Plain => {
                let conv_stride = if self.kind == BlockKind::ConvBnRelu { self.reduction } else { 1 };
                let mut cin = in_channels;
                for u in 0..self.repeat {
                    let s = if u == 0 { conv_stride } else { 1 };
                    layers.push(conv(format!("{prefix}.{u}.conv"), cin, out, 3, s, 1, rng));
                    layers.push(bn(format!("{prefix}.{u}.bn"), out));
                    layers.push(Layer::relu());
                    cin = out;
                }
                if self.kind == BlockKind::Plain && self.reduction == 2 {
                    layers.push(Layer::max_pool());
                }
            }
            BlockKind::Residual => {
                let mut cin = in_channels;
                for u in 0..self.repeat {
                    let s = if u == 0 { self.reduction } else { 1 };
                    let p = format!("{prefix}.{u}");
                    let body = vec![
                        conv(format!("{p}.conv1"), cin, out, 3, s, 1, rng),
                        bn(format!("{p}.bn1"), out),
                        Layer::relu(),
                        conv(format!("{p}.conv2"), out, out, 3, 1, 1, rng),
                        bn(format!("{p}.bn2"), out),
                    ];
                    let shortcut = if s != 1 || cin != out {
                        vec![
                            conv(format!("{p}.shortcut.conv"), cin, out, 1, s, 1, rng),
                            bn(format!("{p}.shortcut.bn"), out),
                        ]
                    } else {
                        Vec::new()
                    };
                    layers.push(Layer::Residual(Box::new(Residual::new(body, shortcut, true))));
                    cin = out;
                }
            }
            BlockKind::Inverted => {
                let mut cin = in_channels;
                for u in 0..self.repeat {
                    let s = if u == 0 { self.reduction } else { 1 };
                    let p = format!("{prefix}.{u}");
                    let hidden = cin * self.expansion;
                    let mut body = Vec::new();
                    if self.expansion != 1 {
                        body.push(conv(format!("{p}.expand"), cin, hidden, 1, 1, 1, rng));
                        body.push(bn(format!("{p}.expand_bn"), hidden));
                        body.push(Layer::relu());
                    }
                    body.push(conv(format!("{p}.depthwise"), hidden, hidden, 3, s, hidden, rng));
                    body.push(bn(format!("{p}.depthwise_bn"), hidden));
                    body.push(Layer::relu());
                    body.push(conv(format!("{p}.project"), hidden, out, 1, 1, 1, rng));
                    body.push(bn(format!("{p}.project_bn"), out));
                    if s == 1 && cin == out {
                        layers.push(Layer::Residual(Box::new(Residual::new(body, Vec::new(), false))));
                    } else {
                        layers.extend(body);
                    }
                    cin = out;
                }
            }
        }
        layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub in_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub name: String,
    pub input: InputShape,
    pub stem: BlockSpec,
    pub blocks: Vec<BlockSpec>,
    pub decoder: DecoderSpec,
    pub num_classes: usize,
}

impl StudentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.input.is_empty() {
            return bad("input shape must be non-empty".into());
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        let mut ids = BTreeSet::new();
        let (mut h, mut w) = (self.input.height, self.input.width);
        for b in std::iter::once(&self.stem).chain(&self.blocks) {
            if b.id.is_empty() || b.id.contains('.') {
                return bad(format!("block id {:?} must be non-empty and contain no '.'", b.id));
            }
            if !ids.insert(b.id.as_str()) {
                return bad(format!("duplicate block id {}", b.id));
            }
            if b.out_channels == 0 || b.repeat == 0 || b.expansion == 0 {
                return bad(format!("block {}: channels, repeat and expansion must be positive", b.id));
            }
            if b.reduction != 1 && b.reduction != 2 {
                return bad(format!("block {}: reduction must be 1 or 2", b.id));
            }
            if b.reduction == 2 {
                if h < 2 || w < 2 {
                    return bad(format!("block {} reduces a {h}x{w} map", b.id));
                }
                (h, w) = match b.kind {
                    BlockKind::Plain => (h / 2, w / 2),
                    _ => (h.div_ceil(2), w.div_ceil(2)),
                };
            }
        }
        let last = self.blocks.last().map(|b| b.out_channels).unwrap_or(0);
        if last != self.decoder.in_channels {
            return Err(Error::ChannelMismatch {
                block: last,
                decoder: self.decoder.in_channels,
            });
        }
        Ok(())
    }

    pub fn block(&self, id: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.id == id)
    }

    fn in_channels_of(&self, index: usize) -> usize {
        if index == 0 {
            self.stem.out_channels
        } else {
            self.blocks[index - 1].out_channels
        }
    }

    /// Teaching reference head that would follow `block_id`.
    pub fn tr_block(&self, block_id: &str) -> Result<TrBlockSpec> {
        let block = self
            .block(block_id)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown block {block_id}")))?;
        Ok(TrBlockSpec {
            block_id: block.id.clone(),
            adapter_in_channels: block.out_channels,
            adapter_out_channels: self.decoder.in_channels,
            pool_output: (1, 1),
            num_classes: self.num_classes,
        })
    }
}

/// Temporary head attached after the newest block of an intermediate stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrBlockSpec {
    pub block_id: String,
    pub adapter_in_channels: usize,
    /// Equals the classifier's input width.
    pub adapter_out_channels: usize,
    pub pool_output: (usize, usize),
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Head {
    Teaching(TrBlockSpec),
    Decoder,
}

fn block_segment(id: &str) -> String {
    format!("blocks.{id}")
}

fn adapter_segment(stage: usize) -> String {
    format!("adapter.{stage}")
}

/// Initialisation stream for one segment, derived from the run seed, the
/// stage that introduces the segment and the segment name.
pub fn init_rng(seed: u64, stage: usize, segment: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stage as u64).to_le_bytes());
    h.update(segment.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn build_stem(spec: &StudentSpec, seed: u64) -> Segment {
    let mut rng = init_rng(seed, 1, STEM);
    Segment::new(STEM, spec.stem.build(STEM, spec.input.channels, &mut rng))
}

fn build_block(spec: &StudentSpec, index: usize, stage: usize, seed: u64) -> Segment {
    let block = &spec.blocks[index];
    let name = block_segment(&block.id);
    let mut rng = init_rng(seed, stage, &name);
    let layers = block.build(&name, spec.in_channels_of(index), &mut rng);
    Segment::new(name, layers)
}

fn build_adapter(tr: &TrBlockSpec, stage: usize, seed: u64) -> Segment {
    let name = adapter_segment(stage);
    let mut rng = init_rng(seed, stage, &name);
    let conv = Conv2d::new(
        &format!("{name}.conv"),
        tr.adapter_in_channels,
        tr.adapter_out_channels,
        1,
        1,
        0,
        1,
        true,
        &mut rng,
    );
    Segment::new(name, vec![Layer::Conv(conv)])
}

fn build_decoder(spec: &StudentSpec, seed: u64) -> [Segment; 2] {
    let mut rng = init_rng(seed, 1, CLASSIFIER);
    let fc = Linear::new(CLASSIFIER, spec.decoder.in_channels, spec.num_classes, &mut rng);
    [
        Segment::new(POOL, vec![Layer::avg_pool()]),
        Segment::new(CLASSIFIER, vec![Layer::Linear(fc)]),
    ]
}

/// The complete student built in one go, with nothing frozen.
pub fn reference_network(spec: &StudentSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut segments = vec![build_stem(spec, seed)];
    for i in 0..spec.blocks.len() {
        segments.push(build_block(spec, i, 1, seed));
    }
    segments.extend(build_decoder(spec, seed));
    Ok(Network::new(spec.input.dims(), segments))
}

/// Newline-joined fingerprint, one `layer_kind shape` per line.
pub fn fingerprint_text(lines: &[String]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

/// The student as assembled for one stage.
#[derive(Debug, Clone)]
pub struct StageModel {
    stage: usize,
    num_stages: usize,
    seed: u64,
    head: Head,
    network: Network,
    frozen: BTreeSet<String>,
}

impl StageModel {
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn is_final(&self) -> bool {
        self.stage == self.num_stages
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    /// Names of all frozen parameters.
    pub fn frozen_param_ids(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    /// Parameter and buffer names of frozen segments.
    pub fn frozen_state_ids(&self) -> BTreeSet<String> {
        self.network
            .segments()
            .iter()
            .filter(|s| s.frozen)
            .flat_map(|s| s.params().map(|p| p.name.clone()).chain(s.buffers().map(|b| b.name.clone())))
            .collect()
    }

    pub fn trainable_param_ids(&self) -> BTreeSet<String> {
        self.network
            .params()
            .into_iter()
            .map(|p| p.name.clone())
            .filter(|n| !self.frozen.contains(n))
            .collect()
    }

    pub fn fingerprint(&self) -> Vec<String> {
        self.network.fingerprint()
    }

    pub fn num_params(&self) -> usize {
        self.network.num_params()
    }

    fn freeze_segment(&mut self, name: &str) {
        let seg = self
            .network
            .segments_mut()
            .iter_mut()
            .find(|s| s.name == name)
            .expect("segment exists");
        seg.frozen = true;
        let names: Vec<String> = seg.params().map(|p| p.name.clone()).collect();
        self.frozen.extend(names);
    }

    fn unfreeze_all(&mut self) {
        for seg in self.network.segments_mut() {
            seg.frozen = false;
        }
        self.frozen.clear();
    }

    fn stage_of_segment(schedule: &StageSchedule, name: &str) -> Option<usize> {
        if name == STEM {
            return Some(1);
        }
        name.strip_prefix("blocks.").and_then(|id| schedule.stage_of_block(id))
    }

    fn insert_before_pool(&mut self, segment: Segment) {
        let segs = self.network.segments_mut();
        let at = segs.iter().position(|s| s.name == POOL).expect("pool segment");
        segs.insert(at, segment);
    }

    fn remove_adapter(&mut self) {
        let name = adapter_segment(self.stage);
        self.network.segments_mut().retain(|s| s.name != name);
    }

    fn append_stage_blocks(&mut self, spec: &StudentSpec, schedule: &StageSchedule, stage: usize) {
        for id in schedule.blocks_for_stage(stage) {
            let index = spec.blocks.iter().position(|b| &b.id == id).expect("validated");
            let seg = build_block(spec, index, stage, self.seed);
            self.insert_before_pool(seg);
        }
    }
}

fn check_inputs(spec: &StudentSpec, schedule: &StageSchedule, stage: usize) -> Result<()> {
    spec.validate()?;
    schedule.validate(spec)?;
    if stage == 0 || stage > schedule.num_stages {
        return Err(Error::StageOutOfRange {
            stage,
            num_stages: schedule.num_stages,
        });
    }
    Ok(())
}

/// Builds the stage-`stage` model from scratch: stem and every block of
/// stages `1..=stage`, the teaching head (or the original decoder at the
/// last stage), with blocks of earlier stages frozen.
pub fn assemble_stage_model(
    spec: &StudentSpec,
    schedule: &StageSchedule,
    stage: usize,
    seed: u64,
) -> Result<StageModel> {
    check_inputs(spec, schedule, stage)?;
    let final_stage = stage == schedule.num_stages;
    let mut segments = vec![build_stem(spec, seed)];
    for s in 1..=stage {
        for id in schedule.blocks_for_stage(s) {
            let index = spec.blocks.iter().position(|b| &b.id == id).expect("validated");
            segments.push(build_block(spec, index, s, seed));
        }
    }
    let head = if final_stage {
        Head::Decoder
    } else {
        let last = schedule.blocks_for_stage(stage).last().expect("non-empty stage");
        let tr = spec.tr_block(last)?;
        segments.push(build_adapter(&tr, stage, seed));
        Head::Teaching(tr)
    };
    segments.extend(build_decoder(spec, seed));
    let mut model = StageModel {
        stage,
        num_stages: schedule.num_stages,
        seed,
        head,
        network: Network::new(spec.input.dims(), segments),
        frozen: BTreeSet::new(),
    };
    let earlier: Vec<String> = model
        .network
        .segments()
        .iter()
        .filter(|s| StageModel::stage_of_segment(schedule, &s.name).is_some_and(|t| t < stage))
        .map(|s| s.name.clone())
        .collect();
    for name in earlier {
        model.freeze_segment(&name);
    }
    if final_stage && schedule.fine_tune_all {
        model.unfreeze_all();
    }
    Ok(model)
}

fn check_prior_frozen(model: &StageModel, schedule: &StageSchedule) -> Result<()> {
    for seg in model.network.segments() {
        let earlier = StageModel::stage_of_segment(schedule, &seg.name).is_some_and(|t| t < model.stage);
        if earlier && !seg.frozen {
            return Err(Error::Contract(format!(
                "segment {} from an earlier stage is not frozen",
                seg.name
            )));
        }
    }
    Ok(())
}

/// Moves a trained stage-`t` model to stage `t + 1`: drops the stage-`t`
/// adapter, freezes every block trained so far, appends freshly initialised
/// blocks and attaches the next head. Advancing into the last stage restores
/// the original decoder via [`restore_final_architecture`].
pub fn advance_stage(model: StageModel, spec: &StudentSpec, schedule: &StageSchedule) -> Result<StageModel> {
    check_inputs(spec, schedule, model.stage)?;
    if model.stage >= schedule.num_stages {
        return Err(Error::AlreadyFinal(model.stage));
    }
    check_prior_frozen(&model, schedule)?;
    let next = model.stage + 1;
    if next == schedule.num_stages {
        return restore_final_architecture(model, spec, schedule);
    }
    let mut model = model;
    let current = model.stage;
    model.remove_adapter();
    freeze_stage(&mut model, schedule, current);
    model.append_stage_blocks(spec, schedule, next);
    let last = schedule.blocks_for_stage(next).last().expect("non-empty stage");
    let tr = spec.tr_block(last)?;
    let adapter = build_adapter(&tr, next, model.seed);
    model.insert_before_pool(adapter);
    model.head = Head::Teaching(tr);
    model.stage = next;
    Ok(model)
}

fn freeze_stage(model: &mut StageModel, schedule: &StageSchedule, stage: usize) {
    let names: Vec<String> = model
        .network
        .segments()
        .iter()
        .filter(|s| StageModel::stage_of_segment(schedule, &s.name) == Some(stage))
        .map(|s| s.name.clone())
        .collect();
    for name in names {
        model.freeze_segment(&name);
    }
}

/// Final surgery: replaces the teaching head of a completed stage `T - 1`
/// model with the original decoder, appends the last blocks and checks the
/// result against the directly built student.
pub fn restore_final_architecture(
    model: StageModel,
    spec: &StudentSpec,
    schedule: &StageSchedule,
) -> Result<StageModel> {
    if spec.blocks.last().map(|b| b.out_channels) != Some(spec.decoder.in_channels) {
        return Err(Error::ChannelMismatch {
            block: spec.blocks.last().map_or(0, |b| b.out_channels),
            decoder: spec.decoder.in_channels,
        });
    }
    check_inputs(spec, schedule, model.stage)?;
    if model.stage + 1 != schedule.num_stages {
        return Err(Error::Contract(format!(
            "restoration expects a stage {} model, got stage {}",
            schedule.num_stages - 1,
            model.stage
        )));
    }
    check_prior_frozen(&model, schedule)?;
    let mut model = model;
    let current = model.stage;
    model.remove_adapter();
    freeze_stage(&mut model, schedule, current);
    model.append_stage_blocks(spec, schedule, schedule.num_stages);
    model.head = Head::Decoder;
    model.stage = schedule.num_stages;
    if schedule.fine_tune_all {
        model.unfreeze_all();
    }
    let reference = reference_network(spec, model.seed)?;
    if model.fingerprint() != reference.fingerprint() || model.num_params() != reference.num_params() {
        return Err(Error::Contract("restored model differs from the reference student".into()));
    }
    Ok(model)
}

/// Small CIFAR-style students and teachers used by the examples and tests.
pub mod presets {
    use super::*;

    fn spec(name: &str, channels: usize, size: usize, num_classes: usize, stem: usize, blocks: Vec<BlockSpec>) -> StudentSpec {
        let last = blocks.last().map_or(stem, |b| b.out_channels);
        StudentSpec {
            name: name.into(),
            input: InputShape::square(channels, size),
            stem: BlockSpec::new("stem", BlockKind::ConvBnRelu, stem, 1),
            blocks,
            decoder: DecoderSpec { in_channels: last },
            num_classes,
        }
    }

    /// Stem plus three residual stages (8, 16, 32 channels).
    pub fn resnet_toy(channels: usize, size: usize, num_classes: usize) -> StudentSpec {
        spec(
            "resnet_toy",
            channels,
            size,
            num_classes,
            8,
            vec![
                BlockSpec::new("b1", BlockKind::Residual, 8, 1),
                BlockSpec::new("b2", BlockKind::Residual, 16, 2),
                BlockSpec::new("b3", BlockKind::Residual, 32, 2),
            ],
        )
    }

    /// Four residual stages, for splits where stage 1 takes two blocks.
    pub fn resnet_toy4(channels: usize, size: usize, num_classes: usize) -> StudentSpec {
        spec(
            "resnet_toy4",
            channels,
            size,
            num_classes,
            8,
            vec![
                BlockSpec::new("b1", BlockKind::Residual, 8, 1),
                BlockSpec::new("b2", BlockKind::Residual, 16, 2),
                BlockSpec::new("b3", BlockKind::Residual, 32, 2),
                BlockSpec::new("b4", BlockKind::Residual, 32, 1),
            ],
        )
    }

    pub fn vgg_toy(channels: usize, size: usize, num_classes: usize) -> StudentSpec {
        spec(
            "vgg_toy",
            channels,
            size,
            num_classes,
            8,
            vec![
                BlockSpec::new("b1", BlockKind::Plain, 8, 2),
                BlockSpec::new("b2", BlockKind::Plain, 16, 2).repeat(2),
                BlockSpec::new("b3", BlockKind::Plain, 32, 1),
            ],
        )
    }

    pub fn mobile_toy(channels: usize, size: usize, num_classes: usize) -> StudentSpec {
        spec(
            "mobile_toy",
            channels,
            size,
            num_classes,
            8,
            vec![
                BlockSpec::new("b1", BlockKind::Inverted, 8, 1),
                BlockSpec::new("b2", BlockKind::Inverted, 16, 2).expansion(4).repeat(2),
                BlockSpec::new("b3", BlockKind::Inverted, 24, 2).expansion(4),
            ],
        )
    }

    /// Wider residual network used as the default teacher.
    pub fn resnet_teacher(channels: usize, size: usize, num_classes: usize) -> StudentSpec {
        spec(
            "resnet_teacher",
            channels,
            size,
            num_classes,
            16,
            vec![
                BlockSpec::new("b1", BlockKind::Residual, 16, 1),
                BlockSpec::new("b2", BlockKind::Residual, 32, 2),
                BlockSpec::new("b3", BlockKind::Residual, 64, 2),
            ],
        )
    }

    pub const NAMES: [&str; 5] = ["resnet_toy", "resnet_toy4", "vgg_toy", "mobile_toy", "resnet_teacher"];

    pub fn by_name(name: &str, channels: usize, size: usize, num_classes: usize) -> Option<StudentSpec> {
        let f = match name {
            "resnet_toy" => resnet_toy,
            "resnet_toy4" => resnet_toy4,
            "vgg_toy" => vgg_toy,
            "mobile_toy" => mobile_toy,
            "resnet_teacher" => resnet_teacher,
            _ => return None,
        };
        Some(f(channels, size, num_classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn schedule(spec: &StudentSpec, t: usize) -> StageSchedule {
        let epochs: Vec<usize> = (1..t).map(|i| i * 10).collect();
        StageSchedule::fixed(spec, t, epochs, t * 10).unwrap()
    }

    fn batch(spec: &StudentSpec, n: usize) -> Tensor {
        let len = n * spec.input.len();
        Tensor::from_vec(
            &[n, spec.input.channels, spec.input.height, spec.input.width],
            (0..len).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stage_one_of_four_block_student() {
        let spec = presets::resnet_toy4(3, 8, 10);
        let sched = schedule(&spec, 3);
        let m = assemble_stage_model(&spec, &sched, 1, 0).unwrap();
        let names: Vec<&str> = m.network().segments().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["stem", "blocks.b1", "blocks.b2", "adapter.1", "pool", "classifier"]);
        let out = m.network().infer(&batch(&spec, 5)).unwrap();
        assert_eq!(out.shape(), &[5, 10]);
        assert!(matches!(m.head(), Head::Teaching(tr) if tr.adapter_in_channels == 16 && tr.adapter_out_channels == 32));
        assert!(m.frozen_param_ids().is_empty());
    }

    #[test]
    fn final_stage_matches_reference() {
        let spec = presets::resnet_toy4(3, 8, 10);
        let sched = schedule(&spec, 3);
        let m = assemble_stage_model(&spec, &sched, 3, 0).unwrap();
        let r = reference_network(&spec, 0).unwrap();
        assert_eq!(m.num_params(), r.num_params());
        assert_eq!(m.fingerprint(), r.fingerprint());
        assert_eq!(*m.head(), Head::Decoder);
    }

    #[test]
    fn every_stage_emits_num_classes_logits() {
        for spec in [
            presets::resnet_toy(3, 8, 7),
            presets::vgg_toy(3, 8, 7),
            presets::mobile_toy(3, 8, 7),
        ] {
            let sched = schedule(&spec, 3);
            for t in 1..=3 {
                let m = assemble_stage_model(&spec, &sched, t, 1).unwrap();
                assert_eq!(m.network().output_width(), 7);
                assert_eq!(m.network().infer(&batch(&spec, 2)).unwrap().shape(), &[2, 7]);
            }
        }
    }

    #[test]
    fn advance_drops_adapter_and_grows_frozen_set() {
        let spec = presets::resnet_toy(3, 8, 10);
        let sched = schedule(&spec, 3);
        let m1 = assemble_stage_model(&spec, &sched, 1, 3).unwrap();
        let adapter1: Vec<String> = m1.network().segment("adapter.1").unwrap().params().map(|p| p.name.clone()).collect();
        let m2 = advance_stage(m1.clone(), &spec, &sched).unwrap();
        let names2: BTreeSet<String> = m2.network().params().iter().map(|p| p.name.clone()).collect();
        assert!(adapter1.iter().all(|n| !names2.contains(n)));
        assert!(m2.frozen_param_ids().contains("blocks.b1.0.conv1.weight"));
        let m3 = advance_stage(m2.clone(), &spec, &sched).unwrap();
        assert!(m3.frozen_param_ids().is_superset(m2.frozen_param_ids()));
        assert!(m3.frozen_param_ids().len() > m2.frozen_param_ids().len());
        assert!(matches!(advance_stage(m3, &spec, &sched), Err(Error::AlreadyFinal(3))));
    }

    #[test]
    fn advance_preserves_trained_prefix() {
        let spec = presets::resnet_toy(3, 8, 10);
        let sched = schedule(&spec, 3);
        let fresh1 = assemble_stage_model(&spec, &sched, 1, 9).unwrap();
        let fresh2 = assemble_stage_model(&spec, &sched, 2, 9).unwrap();
        let advanced = advance_stage(fresh1.clone(), &spec, &sched).unwrap();
        let d1 = fresh1.network().state_dict();
        for (name, entry) in fresh2.network().state_dict() {
            if name.starts_with("stem") || name.starts_with("blocks.b1") {
                assert_eq!(d1[&name], entry, "{name}");
                assert_eq!(advanced.network().state_dict()[&name], entry, "{name}");
            }
        }
        assert_eq!(advanced.fingerprint(), fresh2.fingerprint());
    }

    #[test]
    fn advancing_with_unfrozen_prior_stage_is_rejected() {
        let spec = presets::resnet_toy(3, 8, 10);
        let sched = schedule(&spec, 3);
        let m1 = assemble_stage_model(&spec, &sched, 1, 0).unwrap();
        let mut m2 = advance_stage(m1, &spec, &sched).unwrap();
        m2.network_mut().segments_mut()[0].frozen = false;
        assert!(matches!(advance_stage(m2, &spec, &sched), Err(Error::Contract(_))));
    }

    #[test]
    fn restore_requires_penultimate_stage() {
        let spec = presets::resnet_toy(3, 8, 10);
        let sched = schedule(&spec, 3);
        let m1 = assemble_stage_model(&spec, &sched, 1, 0).unwrap();
        assert!(matches!(restore_final_architecture(m1, &spec, &sched), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut spec = presets::resnet_toy(3, 8, 10);
        spec.decoder.in_channels = 16;
        assert!(matches!(spec.validate(), Err(Error::ChannelMismatch { block: 32, decoder: 16 })));
        assert!(reference_network(&spec, 0).is_err());
    }

    #[test]
    fn stage_out_of_range() {
        let spec = presets::resnet_toy(3, 8, 10);
        let sched = schedule(&spec, 3);
        assert!(matches!(
            assemble_stage_model(&spec, &sched, 4, 0),
            Err(Error::StageOutOfRange { stage: 4, num_stages: 3 })
        ));
        assert!(assemble_stage_model(&spec, &sched, 0, 0).is_err());
    }

    #[test]
    fn spec_serializes_to_toml() {
        let spec = presets::mobile_toy(3, 8, 10);
        let text = toml::to_string(&spec).unwrap();
        let back: StudentSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
