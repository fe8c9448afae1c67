//! Two-stream backbone with attention-block insertion, detection head,
//! target assignment, loss, decoding, suppression and training.

pub mod head;
pub mod loss;
pub mod nms;
pub mod train;

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::nn::{conv2d_bias, map_to_tokens, scaled_normal, tokens_to_map, zeros_param};
use crate::scalar::Scalar;
use crate::ssa::{ssa_forward, SsaConfig, SsaParams, StreamPair};
use crate::tensor::{child, Parameters, Tape, Tensor, Var};

pub use head::{assign_targets, decode, decode_box, encode, level_shapes, Anchor, Assignment, LevelShape};
pub use loss::{detection_loss, LossBreakdown, LossVars};
pub use nms::nms;
pub use train::{evaluate_loss, poly_lr, predict, train_step, Batch, Optimizer};

pub const NUM_STAGES: usize = 5;
/// Prediction levels and their strides.
pub const LEVELS: [usize; 3] = [3, 4, 5];

pub fn level_stride(level: usize) -> usize {
    1 << level
}

/// Which inputs feed the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// One stream on the spatial image, no attention block.
    Single,
    /// Two streams with separate weights.
    Dual,
}

/// How pyramid levels reach the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neck {
    /// One head per level on S3, S4, S5.
    ThreeLevel,
    /// S4 and S5 projected to S3's width, upsampled and added; one head on
    /// the fused level 3 map.
    FusedP3,
}

/// Attention block settings shared by all insertion stages. `d_k = 0` means
/// "same as the stage width".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsaSettings {
    pub r: usize,
    pub d_k: usize,
    pub ffn_expansion: usize,
    pub sam_reduction: usize,
}

impl Default for SsaSettings {
    fn default() -> Self {
        Self { r: 2, d_k: 0, ffn_expansion: 4, sam_reduction: 4 }
    }
}

impl SsaSettings {
    pub fn config(&self, d: usize, h: usize, w: usize) -> SsaConfig {
        SsaConfig {
            d,
            d_k: if self.d_k == 0 { d } else { self.d_k },
            d_v: d,
            r: self.r,
            ffn_expansion: self.ffn_expansion,
            sam_reduction: self.sam_reduction,
            h,
            w,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; NUM_STAGES],
    /// Stages (3, 4, 5) whose inputs pass through the attention block.
    pub ssa_stages: Vec<usize>,
    pub input_channels: usize,
    pub streams: StreamMode,
    pub ssa: SsaSettings,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [4, 8, 16, 32, 64],
            ssa_stages: vec![3, 4, 5],
            input_channels: 3,
            streams: StreamMode::Dual,
            ssa: SsaSettings::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.stage_channels;
        if c.iter().any(|&v| v == 0) || c.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid!("stage channels must be positive and non-decreasing: {c:?}"));
        }
        if self.ssa_stages.iter().any(|s| !LEVELS.contains(s)) {
            return Err(invalid!("attention stages must be among 3, 4, 5: {:?}", self.ssa_stages));
        }
        if self.input_channels == 0 {
            return Err(invalid!("input needs at least one channel"));
        }
        if self.ssa.r == 0 || self.ssa.ffn_expansion == 0 || self.ssa.sam_reduction == 0 {
            return Err(invalid!("attention settings must be positive: {:?}", self.ssa));
        }
        Ok(())
    }

    fn uses_ssa(&self, stage: usize) -> bool {
        self.streams == StreamMode::Dual && self.ssa_stages.contains(&stage)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub anchors: Vec<Anchor>,
    pub neck: Neck,
}

impl DetectorConfig {
    pub fn new(num_classes: usize) -> Self {
        Self { backbone: BackboneConfig::default(), num_classes, anchors: Anchor::defaults(), neck: Neck::ThreeLevel }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(invalid!("need at least one class"));
        }
        if self.anchors.is_empty() {
            return Err(invalid!("need at least one anchor"));
        }
        for a in &self.anchors {
            if !(a.width > 0.0 && a.height > 0.0) || !LEVELS.contains(&a.level) {
                return Err(invalid!("bad anchor {a:?}"));
            }
            if self.neck == Neck::FusedP3 && a.level != 3 {
                return Err(invalid!("fused neck predicts on level 3 only; anchor {a:?}"));
            }
        }
        Ok(())
    }

    /// Levels that carry a head.
    pub fn head_levels(&self) -> Vec<usize> {
        match self.neck {
            Neck::ThreeLevel => LEVELS.iter().copied().filter(|l| self.anchors.iter().any(|a| a.level == *l)).collect(),
            Neck::FusedP3 => vec![3],
        }
    }

    pub fn anchors_at(&self, level: usize) -> Vec<Anchor> {
        self.anchors.iter().copied().filter(|a| a.level == level).collect()
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    fn channels_at(&self, level: usize) -> usize {
        self.backbone.stage_channels[level - 1]
    }
}

/// Strided downsampling convolution followed by one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    pub down_w: Tensor<T>,
    pub down_b: Tensor<T>,
    pub res_w: Tensor<T>,
    pub res_b: Tensor<T>,
}

crate::impl_parameters!(StageParams { down_w, down_b, res_w, res_b });

impl<T: Scalar> StageParams<T> {
    pub fn init(cin: usize, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            down_w: scaled_normal(&[c, cin, 3, 3], cin * 9, 2f64.sqrt(), rng),
            down_b: zeros_param(&[c]),
            res_w: scaled_normal(&[c, c, 3, 3], c * 9, 0.5, rng),
            res_b: zeros_param(&[c]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let dw = tape.param(&child(prefix, "down_w"), &self.down_w);
        let db = tape.param(&child(prefix, "down_b"), &self.down_b);
        let rw = tape.param(&child(prefix, "res_w"), &self.res_w);
        let rb = tape.param(&child(prefix, "res_b"), &self.res_b);
        let y = conv2d_bias(tape, x, dw, db, 2, 1)?;
        let y = tape.relu(y);
        let r = conv2d_bias(tape, y, rw, rb, 1, 1)?;
        let r = tape.relu(r);
        tape.add(y, r)
    }
}

/// 1×1 convolution weights `[out, in, 1, 1]` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

crate::impl_parameters!(Conv1x1 { w, b });

impl<T: Scalar> Conv1x1<T> {
    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(&child(prefix, "w"), &self.w);
        let b = tape.param(&child(prefix, "b"), &self.b);
        conv2d_bias(tape, x, w, b, 1, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams<T> {
    pub stream_a: Vec<StageParams<T>>,
    /// Empty in single-stream mode.
    pub stream_e: Vec<StageParams<T>>,
    /// Attention blocks keyed by stage.
    pub ssa: Vec<(usize, SsaParams<T>)>,
    /// Lateral projections for the fused neck, keyed by level (4, 5).
    pub lateral: Vec<(usize, Conv1x1<T>)>,
    /// Heads keyed by level.
    pub heads: Vec<(usize, Conv1x1<T>)>,
}

/// Initial objectness bias: sigmoid(-4.6) ≈ 0.01.
pub const OBJECTNESS_PRIOR: f64 = -4.6;

impl<T: Scalar> DetectorParams<T> {
    pub fn init(cfg: &DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let bb = &cfg.backbone;
        let stream_a = init_stream(bb, rng);
        let stream_e = if bb.streams == StreamMode::Dual { init_stream(bb, rng) } else { Vec::new() };
        let mut ssa = Vec::new();
        for stage in LEVELS {
            if bb.uses_ssa(stage) {
                // Grid dims are only known at run time; shapes depend on d only.
                let sc = bb.ssa.config(bb.stage_channels[stage - 2], bb.ssa.r, bb.ssa.r);
                ssa.push((stage, SsaParams::init(&sc, rng)));
            }
        }
        let mut lateral = Vec::new();
        if cfg.neck == Neck::FusedP3 {
            let c3 = cfg.channels_at(3);
            for level in [4, 5] {
                let cin = cfg.channels_at(level);
                lateral.push((level, Conv1x1 { w: scaled_normal(&[c3, cin, 1, 1], cin, 1.0, rng), b: zeros_param(&[c3]) }));
            }
        }
        let per = cfg.outputs_per_anchor();
        let mut heads = Vec::new();
        for level in cfg.head_levels() {
            let na = cfg.anchors_at(level).len();
            let cin = cfg.channels_at(level);
            let mut b = Tensor::zeros(&[na * per]);
            for a in 0..na {
                b.data_mut()[a * per + 4] = T::lit(OBJECTNESS_PRIOR);
            }
            heads.push((level, Conv1x1 { w: scaled_normal(&[na * per, cin, 1, 1], cin, 0.1, rng), b: b.requires_grad() }));
        }
        Ok(Self { stream_a, stream_e, ssa, lateral, heads })
    }

    pub fn ssa_at(&self, stage: usize) -> Option<&SsaParams<T>> {
        self.ssa.iter().find(|(s, _)| *s == stage).map(|(_, p)| p)
    }
}

fn init_stream<T: Scalar>(bb: &BackboneConfig, rng: &mut impl Rng) -> Vec<StageParams<T>> {
    let mut cin = bb.input_channels;
    let mut v = Vec::new();
    for &c in &bb.stage_channels {
        v.push(StageParams::init(cin, c, rng));
        cin = c;
    }
    v
}

impl<T: Scalar> Parameters<T> for DetectorParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.stream_a.iter().enumerate() {
            s.visit(&child(prefix, &format!("stream_a.stage{}", i + 1)), f);
        }
        for (i, s) in self.stream_e.iter().enumerate() {
            s.visit(&child(prefix, &format!("stream_e.stage{}", i + 1)), f);
        }
        for (stage, p) in &self.ssa {
            p.visit(&child(prefix, &format!("ssa{stage}")), f);
        }
        for (level, p) in &self.lateral {
            p.visit(&child(prefix, &format!("lateral{level}")), f);
        }
        for (level, p) in &self.heads {
            p.visit(&child(prefix, &format!("head{level}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stream_a.iter_mut().enumerate() {
            s.visit_mut(&child(prefix, &format!("stream_a.stage{}", i + 1)), f);
        }
        for (i, s) in self.stream_e.iter_mut().enumerate() {
            s.visit_mut(&child(prefix, &format!("stream_e.stage{}", i + 1)), f);
        }
        for (stage, p) in &mut self.ssa {
            p.visit_mut(&child(prefix, &format!("ssa{stage}")), f);
        }
        for (level, p) in &mut self.lateral {
            p.visit_mut(&child(prefix, &format!("lateral{level}")), f);
        }
        for (level, p) in &mut self.heads {
            p.visit_mut(&child(prefix, &format!("head{level}")), f);
        }
    }
}

/// Fused features `S3, S4, S5`, each `[N, c, H/stride, W/stride]`.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DetectorParams<T>,
    cfg: &BackboneConfig,
    prefix: &str,
    sa: Var,
    se: Option<Var>,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let s = tape.shape(sa).to_vec();
    if s.len() != 4 || s[1] != cfg.input_channels || s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
        return Err(shape_err!("backbone input must be [N, {}, H, W] with H, W positive multiples of 32, got {s:?}", cfg.input_channels));
    }
    let dual = cfg.streams == StreamMode::Dual;
    let se = match (dual, se) {
        (true, Some(e)) if tape.shape(e) == s.as_slice() => Some(e),
        (true, Some(e)) => return Err(shape_err!("stream inputs differ: {s:?} vs {:?}", tape.shape(e))),
        (true, None) => return Err(invalid!("dual-stream backbone needs both inputs")),
        (false, _) => None,
    };
    if params.stream_a.len() != NUM_STAGES || (dual && params.stream_e.len() != NUM_STAGES) {
        return Err(invalid!("parameters do not match the stream layout"));
    }

    let mut a = sa;
    let mut e = se;
    let mut fused = Vec::new();
    for stage in 1..=NUM_STAGES {
        if let (Some(ev), true) = (e, cfg.uses_ssa(stage)) {
            let p = params.ssa_at(stage).ok_or_else(|| invalid!("missing attention parameters for stage {stage}"))?;
            let shp = tape.shape(a).to_vec();
            let sc = cfg.ssa.config(shp[1], shp[2], shp[3]);
            let vars = p.bind(tape, &child(prefix, &format!("ssa{stage}")));
            let ta = map_to_tokens(tape, a)?;
            let te = map_to_tokens(tape, ev)?;
            let corr = ssa_forward(tape, StreamPair { a: ta, e: te }, &sc, &vars)?;
            let ca = tokens_to_map(tape, corr.a, shp[2], shp[3])?;
            let ce = tokens_to_map(tape, corr.e, shp[2], shp[3])?;
            a = tape.add(a, ca)?;
            e = Some(tape.add(ev, ce)?);
        }
        a = params.stream_a[stage - 1].forward(tape, &child(prefix, &format!("stream_a.stage{stage}")), a)?;
        if let Some(ev) = e {
            e = Some(params.stream_e[stage - 1].forward(tape, &child(prefix, &format!("stream_e.stage{stage}")), ev)?);
        }
        if stage >= 3 {
            fused.push(match e {
                Some(ev) => tape.add(a, ev)?,
                None => a,
            });
        }
    }
    Ok(fused)
}

/// Raw head maps `(level, [N, A·(5+C), h, w])` for each head level.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DetectorParams<T>,
    cfg: &DetectorConfig,
    prefix: &str,
    features: &[Var],
) -> Result<Vec<(usize, Var)>> {
    if features.len() != LEVELS.len() {
        return Err(shape_err!("expected {} feature levels, got {}", LEVELS.len(), features.len()));
    }
    let level_feature = |l: usize| features[l - 3];
    let mut out = Vec::new();
    match cfg.neck {
        Neck::ThreeLevel => {
            for (level, head) in &params.heads {
                let y = head.forward(tape, &child(prefix, &format!("head{level}")), level_feature(*level))?;
                out.push((*level, y));
            }
        }
        Neck::FusedP3 => {
            let mut p3 = level_feature(3);
            for (level, lat) in &params.lateral {
                let proj = lat.forward(tape, &child(prefix, &format!("lateral{level}")), level_feature(*level))?;
                let up = tape.upsample(proj, 1 << (level - 3))?;
                p3 = tape.add(p3, up)?;
            }
            let (level, head) = params.heads.first().ok_or_else(|| invalid!("fused neck has no head"))?;
            out.push((*level, head.forward(tape, &child(prefix, &format!("head{level}")), p3)?));
        }
    }
    for (level, y) in &out {
        let want = cfg.anchors_at(*level).len() * cfg.outputs_per_anchor();
        if tape.shape(*y)[1] != want {
            return Err(shape_err!("head at level {level} has {} channels, expected {want}", tape.shape(*y)[1]));
        }
    }
    Ok(out)
}

/// Backbone plus head.
pub fn detector_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DetectorParams<T>,
    cfg: &DetectorConfig,
    sa: Var,
    se: Option<Var>,
) -> Result<Vec<(usize, Var)>> {
    let feats = backbone_forward(tape, params, &cfg.backbone, "", sa, se)?;
    head_forward(tape, params, cfg, "", &feats)
}
