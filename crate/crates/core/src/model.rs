//! The two-branch network.
//!
//! The segmentation branch is a fully-convolutional encoder of five
//! stride-2 modules whose 1/8, 1/16 and 1/32 features are projected to
//! two-class score maps, upsampled and summed. The flow branch is an
//! encoder-decoder over the stacked frame pair with skip concatenations.
//! When fusion is enabled the two branches exchange features at each
//! configured scale: each side receives the other's (resampled) features,
//! concatenates them onto its own and passes the result through a
//! convolution that restores its own channel count. The convolution output
//! is added back onto the receiving features, so zero fusion weights give
//! exactly the unfused network.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamGrads, Var};
use crate::tensor::Tensor;
use crate::types::FramePair;

/// Scale denominators of the five encoder modules.
pub const MODULE_SCALES: [usize; 5] = [2, 4, 8, 16, 32];
/// Scales the segmentation head draws score maps from.
pub const SCORE_SCALES: [usize; 3] = [8, 16, 32];
/// Scales at which the branches may exchange features.
pub const FUSABLE_SCALES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)`; both divisible by 32.
    pub input_size: (usize, usize),
    /// Channel width of each of the five segmentation modules.
    pub encoder_channels: Vec<usize>,
    /// Channel width of each of the five flow encoder steps; the decoder
    /// mirrors them.
    pub flow_channels: Vec<usize>,
    pub fusion_enabled: bool,
    pub fusion_scales: Vec<usize>,
    /// Weight of the flow loss in the combined objective.
    pub lambda_flow: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            encoder_channels: vec![16, 32, 64, 96, 128],
            flow_channels: vec![16, 32, 64, 96, 128],
            fusion_enabled: true,
            fusion_scales: vec![8, 16, 32],
            lambda_flow: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be a positive multiple of 32")));
        }
        for (name, chans) in [("encoder_channels", &self.encoder_channels), ("flow_channels", &self.flow_channels)] {
            if chans.len() != MODULE_SCALES.len() {
                return Err(Error::Config(format!("{name} needs {} entries, got {}", MODULE_SCALES.len(), chans.len())));
            }
            if chans.contains(&0) {
                return Err(Error::Config(format!("{name} contains a zero channel count")));
            }
        }
        if self.fusion_enabled && self.fusion_scales.is_empty() {
            return Err(Error::Config("fusion enabled with no fusion scales".into()));
        }
        if let Some(s) = self.fusion_scales.iter().find(|s| !FUSABLE_SCALES.contains(s)) {
            return Err(Error::Config(format!("fusion scale {s} not in {FUSABLE_SCALES:?}")));
        }
        if !(self.lambda_flow.is_finite() && self.lambda_flow > 0.0) {
            return Err(Error::Config(format!("lambda_flow must be positive, got {}", self.lambda_flow)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn active_fusion_scales(&self) -> Vec<usize> {
        if !self.fusion_enabled {
            return Vec::new();
        }
        let mut s = self.fusion_scales.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn module_index(scale: usize) -> usize {
        MODULE_SCALES.iter().position(|&s| s == scale).expect("known scale")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Segmentation,
    Flow,
}

impl Branch {
    pub fn other(self) -> Branch {
        match self {
            Branch::Segmentation => Branch::Flow,
            Branch::Flow => Branch::Segmentation,
        }
    }

    fn index(self) -> usize {
        match self {
            Branch::Segmentation => 0,
            Branch::Flow => 1,
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Segmentation => "segmentation",
            Branch::Flow => "flow",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub branch: Branch,
    pub value: Tensor,
}

/// Named trainable tensors, each owned by one branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    frozen: [bool; 2],
}

enum Init {
    /// He normal with the given gain on `2 / fan_in`.
    He(f64),
    Zeros,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ParamStore {
    fn add(&mut self, seed: u64, name: String, branch: Branch, shape: &[usize], init: Init) -> usize {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::He(gain) => {
                let fan_in: usize = shape[1..].iter().product();
                let std = (gain * 2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                let data = (0..shape.iter().product()).map(|_| normal.sample(&mut rng)).collect();
                Tensor::from_vec(shape, data)
            }
        };
        self.params.push(Param { name, branch, value });
        self.params.len() - 1
    }

    fn conv(&mut self, seed: u64, name: &str, branch: Branch, in_c: usize, out_c: usize, k: usize, stride: usize, gain: f64) -> ConvLayer {
        let weight = self.add(seed, format!("{name}.weight"), branch, &[out_c, in_c, k, k], Init::He(gain));
        let bias = self.add(seed, format!("{name}.bias"), branch, &[out_c], Init::Zeros);
        ConvLayer {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, slot: usize) -> &Param {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param {
        &mut self.params[slot]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn branch_scalar_count(&self, branch: Branch) -> usize {
        self.params.iter().filter(|p| p.branch == branch).map(|p| p.value.len()).sum()
    }

    pub fn is_frozen(&self, branch: Branch) -> bool {
        self.frozen[branch.index()]
    }

    pub fn set_frozen(&mut self, branch: Branch, frozen: bool) {
        self.frozen[branch.index()] = frozen;
    }

    pub fn is_trainable(&self, slot: usize) -> bool {
        !self.is_frozen(self.params[slot].branch)
    }

    /// Snapshot of every parameter value, in slot order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.params.len(), "snapshot size mismatch");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "snapshot shape mismatch for {}", p.name);
            p.value = v.clone();
        }
    }

    fn bind(&self, g: &mut Graph, slot: usize) -> Var {
        g.param(slot, self.params[slot].value.clone(), self.is_trainable(slot))
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    fn apply_relu(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.apply(g, store, x);
        g.relu(y)
    }
}

/// One encoder module: a stride-2 convolution followed by a refining
/// convolution, both with ReLU.
#[derive(Clone, Copy, Debug)]
struct Module {
    down: ConvLayer,
    refine: ConvLayer,
}

impl Module {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.down.apply_relu(g, store, x);
        self.refine.apply_relu(g, store, y)
    }
}

fn build_encoder(store: &mut ParamStore, seed: u64, prefix: &str, branch: Branch, in_c: usize, chans: &[usize]) -> Vec<Module> {
    let mut prev = in_c;
    chans
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let m = Module {
                down: store.conv(seed, &format!("{prefix}.module{}.down", i + 1), branch, prev, c, 3, 2, 1.0),
                refine: store.conv(seed, &format!("{prefix}.module{}.refine", i + 1), branch, c, c, 3, 1, 1.0),
            };
            prev = c;
            m
        })
        .collect()
}

/// Handle to the segmentation branch's layers.
#[derive(Clone, Debug)]
pub struct SegmentationBranch {
    modules: Vec<Module>,
    scores: BTreeMap<usize, ConvLayer>,
    input_size: (usize, usize),
}

impl SegmentationBranch {
    fn new(config: &ModelConfig, store: &mut ParamStore) -> Self {
        let modules = build_encoder(store, config.seed, "seg", Branch::Segmentation, 3, &config.encoder_channels);
        let scores = SCORE_SCALES
            .iter()
            .map(|&s| {
                let c = config.encoder_channels[ModelConfig::module_index(s)];
                (s, store.conv(config.seed, &format!("seg.score{s}"), Branch::Segmentation, c, 2, 1, 1, 0.5))
            })
            .collect();
        Self {
            modules,
            scores,
            input_size: config.input_size,
        }
    }

    /// Module outputs keyed by scale denominator.
    fn encode(&self, g: &mut Graph, store: &ParamStore, frame: Var) -> BTreeMap<usize, Var> {
        let mut x = frame;
        let mut levels = BTreeMap::new();
        for (m, &s) in self.modules.iter().zip(&MODULE_SCALES) {
            x = m.apply(g, store, x);
            levels.insert(s, x);
        }
        levels
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, taps: &BTreeMap<usize, Var>) -> Var {
        let (h, w) = self.input_size;
        let mut sum: Option<Var> = None;
        for (s, layer) in &self.scores {
            let score = layer.apply(g, store, taps[s]);
            let up = g.resize(score, h, w);
            sum = Some(match sum {
                Some(acc) => g.add(acc, up),
                None => up,
            });
        }
        sum.expect("at least one score scale")
    }
}

/// Handle to the flow branch's layers.
#[derive(Clone, Debug)]
pub struct FlowBranch {
    encoder: Vec<Module>,
    /// Decoder steps from 1/16 up to 1/2.
    decoder: Vec<(usize, ConvLayer)>,
    predict: ConvLayer,
    input_size: (usize, usize),
}

impl FlowBranch {
    fn new(config: &ModelConfig, store: &mut ParamStore) -> Self {
        let chans = &config.flow_channels;
        let encoder = build_encoder(store, config.seed, "flow", Branch::Flow, 6, chans);
        let mut decoder = Vec::new();
        let mut prev = chans[4];
        for i in (0..4).rev() {
            let s = MODULE_SCALES[i];
            let layer = store.conv(config.seed, &format!("flow.decoder{s}"), Branch::Flow, prev + chans[i], chans[i], 3, 1, 1.0);
            decoder.push((s, layer));
            prev = chans[i];
        }
        let predict = store.conv(config.seed, "flow.predict", Branch::Flow, chans[0], 2, 3, 1, 0.5);
        Self {
            encoder,
            decoder,
            predict,
            input_size: config.input_size,
        }
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, pair: Var) -> BTreeMap<usize, Var> {
        let mut x = pair;
        let mut levels = BTreeMap::new();
        for (m, &s) in self.encoder.iter().zip(&MODULE_SCALES) {
            x = m.apply(g, store, x);
            levels.insert(s, x);
        }
        levels
    }

    /// Runs the decoder from the deepest encoder level. `exchange` is called
    /// with each decoder feature (the 1/32 one is the encoder output itself)
    /// and returns the feature to continue decoding with.
    fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded: &BTreeMap<usize, Var>,
        mut exchange: impl FnMut(&mut Graph, usize, Var) -> Var,
    ) -> Var {
        let mut d = exchange(g, 32, encoded[&32]);
        for (s, layer) in &self.decoder {
            let skip = encoded[s];
            let (h, w) = g.value(skip).spatial();
            let up = g.resize(d, h, w);
            let cat = g.concat(&[up, skip]);
            d = layer.apply_relu(g, store, cat);
            d = exchange(g, *s, d);
        }
        let flow = self.predict.apply(g, store, d);
        let (h, w) = self.input_size;
        g.resize(flow, h, w)
    }
}

#[derive(Clone, Copy, Debug)]
struct FusionLayers {
    into_seg: ConvLayer,
    into_flow: ConvLayer,
}

/// Residual fusion: `relu(own + conv(concat(own, resample(other))))`.
fn fuse_into(g: &mut Graph, store: &ParamStore, layer: &ConvLayer, own: Var, other: Var) -> Var {
    let (h, w) = g.value(own).spatial();
    let resampled = g.resize(other, h, w);
    let cat = g.concat(&[own, resampled]);
    let mixed = layer.apply(g, store, cat);
    let sum = g.add(own, mixed);
    g.relu(sum)
}

/// Ordered multi-scale feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Tensor)>,
}

impl FeaturePyramid {
    pub fn level(&self, scale: usize) -> Option<&Tensor> {
        self.levels.iter().find(|(s, _)| *s == scale).map(|(_, t)| t)
    }

    /// Checks strictly increasing scales and exact `input / scale` shapes.
    pub fn validate(&self, input_size: (usize, usize)) -> Result<()> {
        for pair in self.levels.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::Shape("pyramid scales not strictly increasing".into()));
            }
        }
        for (s, t) in &self.levels {
            let expect = (input_size.0 / s, input_size.1 / s);
            if t.spatial() != expect {
                return Err(Error::Shape(format!("level 1/{s} is {:?}, expected {expect:?}", t.spatial())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegFlowOutput {
    /// `[2, h, w]` background/foreground scores before softmax.
    pub seg_logits: Tensor,
    /// `[2, h, w]` flow `(u, v)` in pixels.
    pub flow_pred: Tensor,
}

/// Graph handles from one differentiable forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub seg_logits: Var,
    pub flow_pred: Var,
}

impl ForwardPass {
    pub fn output(&self) -> SegFlowOutput {
        SegFlowOutput {
            seg_logits: self.graph.value(self.seg_logits).clone(),
            flow_pred: self.graph.value(self.flow_pred).clone(),
        }
    }
}

fn check_frames(input_size: (usize, usize), frames: &[&Tensor]) -> Result<()> {
    for f in frames {
        if f.shape() != [3, input_size.0, input_size.1] {
            return Err(Error::Shape(format!(
                "frame {:?} does not match input size {:?}",
                f.shape(),
                input_size
            )));
        }
    }
    Ok(())
}

/// Standalone segmentation network (no flow branch).
#[derive(Clone, Debug)]
pub struct SegmentationNet {
    pub branch: SegmentationBranch,
    pub params: ParamStore,
}

impl SegmentationNet {
    pub fn forward(&self, frame: &Tensor) -> Result<Tensor> {
        check_frames(self.branch.input_size, &[frame])?;
        let mut g = Graph::new();
        let x = g.input(centered(frame));
        let taps = self.branch.encode(&mut g, &self.params, x);
        let logits = self.branch.head(&mut g, &self.params, &taps);
        Ok(g.value(logits).clone())
    }

    pub fn pyramid(&self, frame: &Tensor) -> Result<FeaturePyramid> {
        check_frames(self.branch.input_size, &[frame])?;
        let mut g = Graph::new();
        let x = g.input(centered(frame));
        let levels = self.branch.encode(&mut g, &self.params, x);
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|(s, v)| (s, g.value(v).clone())).collect(),
        })
    }
}

/// Standalone flow network (no segmentation branch).
#[derive(Clone, Debug)]
pub struct FlowNet {
    pub branch: FlowBranch,
    pub params: ParamStore,
}

impl FlowNet {
    pub fn forward(&self, frame_t: &Tensor, frame_t1: &Tensor) -> Result<Tensor> {
        check_frames(self.branch.input_size, &[frame_t, frame_t1])?;
        let mut g = Graph::new();
        let x = g.input(centered(&Tensor::concat_channels(&[frame_t, frame_t1])));
        let enc = self.branch.encode(&mut g, &self.params, x);
        let flow = self.branch.decode(&mut g, &self.params, &enc, |_, _, d| d);
        Ok(g.value(flow).clone())
    }

    /// Encoder features keyed by scale.
    pub fn encoder_pyramid(&self, frame_t: &Tensor, frame_t1: &Tensor) -> Result<FeaturePyramid> {
        check_frames(self.branch.input_size, &[frame_t, frame_t1])?;
        let mut g = Graph::new();
        let x = g.input(centered(&Tensor::concat_channels(&[frame_t, frame_t1])));
        let levels = self.branch.encode(&mut g, &self.params, x);
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|(s, v)| (s, g.value(v).clone())).collect(),
        })
    }
}

pub fn build_segmentation_branch(config: &ModelConfig) -> Result<SegmentationNet> {
    config.validate()?;
    let mut params = ParamStore::default();
    let branch = SegmentationBranch::new(config, &mut params);
    Ok(SegmentationNet { branch, params })
}

pub fn build_flow_branch(config: &ModelConfig) -> Result<FlowNet> {
    config.validate()?;
    let mut params = ParamStore::default();
    let branch = FlowBranch::new(config, &mut params);
    Ok(FlowNet { branch, params })
}

/// Frames enter both branches shifted from `[0, 1]` to `[-0.5, 0.5]`.
fn centered(frame: &Tensor) -> Tensor {
    let mut x = frame.clone();
    x.data_mut().iter_mut().for_each(|v| *v -= 0.5);
    x
}

/// The joint two-branch network.
#[derive(Clone, Debug)]
pub struct SegFlowModel {
    config: ModelConfig,
    seg: SegmentationBranch,
    flow: FlowBranch,
    fusion: BTreeMap<usize, FusionLayers>,
    pub params: ParamStore,
}

impl SegFlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let seed = config.seed;
        let seg = SegmentationBranch::new(&config, &mut params);
        let flow = FlowBranch::new(&config, &mut params);
        let mut fusion = BTreeMap::new();
        for s in config.active_fusion_scales() {
            let sc = config.encoder_channels[ModelConfig::module_index(s)];
            let fc = config.flow_channels[ModelConfig::module_index(s)];
            // Fusion layers belong to the branch that receives the features.
            let into_seg = params.conv(seed, &format!("seg.fuse{s}"), Branch::Segmentation, sc + fc, sc, 3, 1, 0.5);
            let into_flow = params.conv(seed, &format!("flow.fuse{s}"), Branch::Flow, fc + sc, fc, 3, 1, 0.5);
            fusion.insert(s, FusionLayers { into_seg, into_flow });
        }
        Ok(Self {
            config,
            seg,
            flow,
            fusion,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fusion_scales(&self) -> Vec<usize> {
        self.fusion.keys().copied().collect()
    }

    /// Names of the fusion convolution parameters.
    pub fn fusion_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.name.contains(".fuse"))
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn freeze(&mut self, branch: Branch) {
        self.params.set_frozen(branch, true);
    }

    pub fn unfreeze(&mut self, branch: Branch) {
        self.params.set_frozen(branch, false);
    }

    /// Differentiable forward pass over a frame pair.
    pub fn forward_graph(&self, frame_t: &Tensor, frame_t1: &Tensor) -> Result<ForwardPass> {
        check_frames(self.config.input_size, &[frame_t, frame_t1])?;
        let store = &self.params;
        let mut g = Graph::new();
        let image = g.input(centered(frame_t));
        let stacked = g.input(centered(&Tensor::concat_channels(&[frame_t, frame_t1])));

        let seg_levels = self.seg.encode(&mut g, store, image);
        let mut taps: BTreeMap<usize, Var> = SCORE_SCALES.iter().map(|s| (*s, seg_levels[s])).collect();
        let flow_levels = self.flow.encode(&mut g, store, stacked);
        let fusion = &self.fusion;
        let flow_pred = self.flow.decode(&mut g, store, &flow_levels, |g, s, d| match fusion.get(&s) {
            Some(layers) => {
                let seg_feat = taps[&s];
                taps.insert(s, fuse_into(g, store, &layers.into_seg, seg_feat, d));
                fuse_into(g, store, &layers.into_flow, d, seg_feat)
            }
            None => d,
        });
        let seg_logits = self.seg.head(&mut g, store, &taps);
        Ok(ForwardPass {
            graph: g,
            seg_logits,
            flow_pred,
        })
    }

    pub fn forward(&self, pair: &FramePair) -> Result<SegFlowOutput> {
        pair.validate()?;
        Ok(self.forward_graph(&pair.frame_t, &pair.frame_t1)?.output())
    }

    /// Segmentation encoder levels (pre-fusion) for a frame.
    pub fn segmentation_pyramid(&self, frame_t: &Tensor) -> Result<FeaturePyramid> {
        check_frames(self.config.input_size, &[frame_t])?;
        let mut g = Graph::new();
        let x = g.input(centered(frame_t));
        let levels = self.seg.encode(&mut g, &self.params, x);
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|(s, v)| (s, g.value(v).clone())).collect(),
        })
    }

    /// Exchange features between two pyramids at every fusion scale. Levels
    /// at other scales pass through untouched; with fusion disabled both
    /// pyramids are returned unchanged.
    pub fn fuse_bidirectional(&self, seg: &FeaturePyramid, flow: &FeaturePyramid) -> Result<(FeaturePyramid, FeaturePyramid)> {
        if self.fusion.is_empty() {
            return Ok((seg.clone(), flow.clone()));
        }
        let mut seg_out = seg.clone();
        let mut flow_out = flow.clone();
        for (&s, layers) in &self.fusion {
            let seg_feat = seg.level(s).ok_or(Error::MissingScale(s))?;
            let flow_feat = flow.level(s).ok_or(Error::MissingScale(s))?;
            let expect_seg = self.config.encoder_channels[ModelConfig::module_index(s)];
            let expect_flow = self.config.flow_channels[ModelConfig::module_index(s)];
            if seg_feat.dims3().0 != expect_seg || flow_feat.dims3().0 != expect_flow {
                return Err(Error::Shape(format!("channel mismatch at fusion scale 1/{s}")));
            }
            let mut g = Graph::new();
            let a = g.input(seg_feat.clone());
            let b = g.input(flow_feat.clone());
            let fused_seg = fuse_into(&mut g, &self.params, &layers.into_seg, a, b);
            let fused_flow = fuse_into(&mut g, &self.params, &layers.into_flow, b, a);
            for (levels, v) in [(&mut seg_out.levels, fused_seg), (&mut flow_out.levels, fused_flow)] {
                let slot = levels.iter_mut().find(|(ls, _)| *ls == s).expect("level present");
                slot.1 = g.value(v).clone();
            }
        }
        Ok((seg_out, flow_out))
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Back-propagate output gradients into parameter gradients.
    pub fn backward(&self, pass: &ForwardPass, d_seg: Option<Tensor>, d_flow: Option<Tensor>) -> ParamGrads {
        let mut seeds = Vec::new();
        if let Some(d) = d_seg {
            seeds.push((pass.seg_logits, d));
        }
        if let Some(d) = d_flow {
            seeds.push((pass.flow_pred, d));
        }
        pass.graph.backward(&seeds, self.params.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_size: (64, 64),
            encoder_channels: vec![4, 6, 8, 10, 12],
            flow_channels: vec![4, 6, 8, 10, 12],
            ..ModelConfig::default()
        }
    }

    fn noise_frame(h: usize, w: usize, phase: f64) -> Tensor {
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|i| 0.5 + 0.5 * ((i as f64) * 0.37 + phase).sin()).collect())
    }

    #[test]
    fn rejects_bad_input_size() {
        let cfg = ModelConfig {
            input_size: (48, 64),
            ..small_config()
        };
        assert!(matches!(build_segmentation_branch(&cfg), Err(Error::Config(_))));
        assert!(matches!(build_flow_branch(&cfg), Err(Error::Config(_))));
        assert!(SegFlowModel::new(cfg).is_err());
    }

    #[test]
    fn rejects_fusion_without_scales() {
        let cfg = ModelConfig {
            fusion_scales: vec![],
            ..small_config()
        };
        assert!(SegFlowModel::new(cfg).is_err());
        let cfg = ModelConfig {
            fusion_scales: vec![4],
            ..small_config()
        };
        assert!(SegFlowModel::new(cfg).is_err());
    }

    #[test]
    fn module_three_is_one_eighth_scale() {
        let cfg = ModelConfig {
            encoder_channels: vec![16, 32, 64, 96, 128],
            ..small_config()
        };
        let net = build_segmentation_branch(&cfg).unwrap();
        let pyr = net.pyramid(&noise_frame(64, 64, 0.0)).unwrap();
        assert_eq!(pyr.level(8).unwrap().shape(), &[64, 8, 8]);
        pyr.validate((64, 64)).unwrap();
    }

    #[test]
    fn deepest_flow_level_is_two_by_two() {
        let net = build_flow_branch(&small_config()).unwrap();
        let pyr = net.encoder_pyramid(&noise_frame(64, 64, 0.0), &noise_frame(64, 64, 1.0)).unwrap();
        assert_eq!(pyr.level(32).unwrap().spatial(), (2, 2));
        pyr.validate((64, 64)).unwrap();
    }

    #[test]
    fn zero_score_projections_give_zero_logits() {
        let mut net = build_segmentation_branch(&small_config()).unwrap();
        for s in SCORE_SCALES {
            for suffix in ["weight", "bias"] {
                let slot = net.params.find(&format!("seg.score{s}.{suffix}")).unwrap();
                let shape = net.params.get(slot).value.shape().to_vec();
                net.params.get_mut(slot).value = Tensor::zeros(&shape);
            }
        }
        let logits = net.forward(&noise_frame(64, 64, 0.3)).unwrap();
        assert_eq!(logits.shape(), &[2, 64, 64]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_flow_projection_gives_zero_flow() {
        let mut net = build_flow_branch(&small_config()).unwrap();
        for suffix in ["weight", "bias"] {
            let slot = net.params.find(&format!("flow.predict.{suffix}")).unwrap();
            let shape = net.params.get(slot).value.shape().to_vec();
            net.params.get_mut(slot).value = Tensor::zeros(&shape);
        }
        let f = noise_frame(64, 64, 0.0);
        let flow = net.forward(&f, &f).unwrap();
        assert!(flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_preserves_receiving_shapes() {
        let cfg = ModelConfig {
            encoder_channels: vec![4, 6, 8, 96, 12],
            flow_channels: vec![4, 6, 8, 128, 12],
            fusion_scales: vec![16],
            ..small_config()
        };
        let model = SegFlowModel::new(cfg).unwrap();
        let seg = FeaturePyramid {
            levels: vec![(16, Tensor::full(&[96, 4, 4], 0.3)), (32, Tensor::zeros(&[12, 2, 2]))],
        };
        let flow = FeaturePyramid {
            levels: vec![(16, Tensor::full(&[128, 4, 4], 0.2))],
        };
        let (s2, f2) = model.fuse_bidirectional(&seg, &flow).unwrap();
        assert_eq!(f2.level(16).unwrap().shape(), &[128, 4, 4]);
        assert_eq!(s2.level(16).unwrap().shape(), &[96, 4, 4]);
        assert_eq!(s2.level(32), seg.level(32));
    }

    #[test]
    fn fusion_missing_level_is_structural_error() {
        let model = SegFlowModel::new(small_config()).unwrap();
        let seg = FeaturePyramid {
            levels: vec![(8, Tensor::zeros(&[8, 8, 8]))],
        };
        let flow = FeaturePyramid {
            levels: vec![(8, Tensor::zeros(&[8, 8, 8]))],
        };
        assert!(matches!(model.fuse_bidirectional(&seg, &flow), Err(Error::MissingScale(16))));
    }

    #[test]
    fn fusion_disabled_is_pass_through() {
        let cfg = ModelConfig {
            fusion_enabled: false,
            ..small_config()
        };
        let model = SegFlowModel::new(cfg).unwrap();
        let seg = model.segmentation_pyramid(&noise_frame(64, 64, 0.1)).unwrap();
        let flow = FeaturePyramid {
            levels: vec![(8, Tensor::full(&[8, 8, 8], 1.5))],
        };
        let (s2, f2) = model.fuse_bidirectional(&seg, &flow).unwrap();
        assert_eq!(s2, seg);
        assert_eq!(f2, flow);
    }

    #[test]
    fn parameter_counts_reflect_fusion() {
        let seg = build_segmentation_branch(&small_config()).unwrap();
        let flow = build_flow_branch(&small_config()).unwrap();
        let disjoint = seg.params.scalar_count() + flow.params.scalar_count();
        let off = SegFlowModel::new(ModelConfig {
            fusion_enabled: false,
            ..small_config()
        })
        .unwrap();
        let on = SegFlowModel::new(small_config()).unwrap();
        assert_eq!(off.param_count(), disjoint);
        assert!(on.param_count() > disjoint);
    }

    #[test]
    fn forward_is_deterministic_with_expected_shapes() {
        let model = SegFlowModel::new(small_config()).unwrap();
        let pair = FramePair::new(noise_frame(64, 64, 0.0), noise_frame(64, 64, 0.5));
        let a = model.forward(&pair).unwrap();
        let b = SegFlowModel::new(small_config()).unwrap().forward(&pair).unwrap();
        assert_eq!(a.seg_logits.shape(), &[2, 64, 64]);
        assert_eq!(a.flow_pred.shape(), &[2, 64, 64]);
        assert!(a.flow_pred.is_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let model = SegFlowModel::new(small_config()).unwrap();
        let pair = FramePair::new(noise_frame(32, 32, 0.0), noise_frame(32, 32, 0.5));
        assert!(matches!(model.forward(&pair), Err(Error::Shape(_))));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = small_config();
        let mut b = small_config();
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
