//! Plain-text `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::detector::{Anchor, DetectorConfig, Neck, StreamMode, LEVELS, NUM_STAGES};
use crate::detector::nms::DEFAULT_NMS_IOU;
use crate::detector::train::{BASE_LR, POLY_POWER};
use crate::error::{invalid, Error, Result};
use crate::hid::{DecoupleParams, GenerationParams};
use crate::synthetic::SyntheticSceneSpec;

/// Which images feed the two backbone streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Spatial image only, single stream.
    Spatial,
    /// Spatial image in both streams.
    SpatialTwice,
    /// Spatial and spectral images.
    SpatialSpectral,
}

impl InputMode {
    pub fn streams(self) -> StreamMode {
        match self {
            InputMode::Spatial => StreamMode::Single,
            _ => StreamMode::Dual,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            InputMode::Spatial => "sa",
            InputMode::SpatialTwice => "sa+sa",
            InputMode::SpatialSpectral => "sa+se",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sa" => Ok(InputMode::Spatial),
            "sa+sa" => Ok(InputMode::SpatialTwice),
            "sa+se" => Ok(InputMode::SpatialSpectral),
            _ => Err(invalid!("inputs must be sa, sa+sa or sa+se, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub max_epoch: usize,
    pub batch: usize,
    /// Random horizontal and vertical flips of both streams.
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { lr: BASE_LR, power: POLY_POWER, momentum: 0.9, max_epoch: 50, batch: 8, flip: true, seed: 0 }
    }
}

/// Generator knobs; classes are the two-class signature pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub delta: f64,
    pub objects: (usize, usize),
    pub object_size: (usize, usize),
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { count: 80, height: 64, width: 64, bands: 16, delta: 2.0, objects: (1, 4), object_size: (14, 18) }
    }
}

impl SynthSettings {
    pub fn spec(&self, seed: u64) -> SyntheticSceneSpec {
        let mut s = SyntheticSceneSpec::two_class(self.height, self.width, self.bands, self.delta, seed);
        s.objects = self.objects;
        s.object_size = self.object_size;
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub cube_dir: PathBuf,
    pub annotation_dir: PathBuf,
    pub output_dir: PathBuf,
    pub decouple: DecoupleParams,
    pub train: TrainSettings,
    pub detector: DetectorConfig,
    pub inputs: InputMode,
    /// Resume training from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Checkpoint used by `detect`; defaults to the final training one.
    pub checkpoint: Option<PathBuf>,
    pub nms_iou: f64,
    /// Score threshold for overlays.
    pub conf_threshold: f64,
    /// Score threshold for detection files, which feed evaluation.
    pub eval_conf_threshold: f64,
    /// Split manifest `detect` runs on, or `all`.
    pub detect_split: String,
    pub split_ratios: [f64; 3],
    pub split_tolerance: f64,
    pub split_attempts: usize,
    pub synth: SynthSettings,
    pub gradcheck_seeds: usize,
    pub gradcheck_modules: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut detector = DetectorConfig::new(2);
        detector.backbone.streams = InputMode::SpatialSpectral.streams();
        Self {
            cube_dir: PathBuf::from("cubes"),
            annotation_dir: PathBuf::from("annotations"),
            output_dir: PathBuf::from("out"),
            decouple: DecoupleParams::default(),
            train: TrainSettings::default(),
            detector,
            inputs: InputMode::SpatialSpectral,
            resume: None,
            checkpoint: None,
            nms_iou: DEFAULT_NMS_IOU,
            conf_threshold: 0.25,
            eval_conf_threshold: 0.001,
            detect_split: "test".into(),
            split_ratios: [7.0, 1.0, 2.0],
            split_tolerance: 0.1,
            split_attempts: 100,
            synth: SynthSettings::default(),
            gradcheck_seeds: 20,
            gradcheck_modules: vec!["ops".into(), "ssa".into(), "detector".into()],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("bad value `{v}` for `{key}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("bad boolean `{v}` for `{key}`")),
    }
}

fn parse_pair(key: &str, v: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = v.split(['-', ',']).map(str::trim).collect();
    match parts.as_slice() {
        [a] => {
            let a = parse_num(key, a)?;
            Ok((a, a))
        }
        [a, b] => Ok((parse_num(key, a)?, parse_num(key, b)?)),
        _ => Err(format!("expected `lo-hi` for `{key}`, got `{v}`")),
    }
}

/// `WxH@level` items separated by commas.
pub fn parse_anchors(v: &str) -> std::result::Result<Vec<Anchor>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (size, level) = item.split_once('@').ok_or_else(|| format!("anchor `{item}` lacks `@level`"))?;
            let (w, h) = size.split_once('x').ok_or_else(|| format!("anchor `{item}` lacks `WxH`"))?;
            Ok(Anchor {
                width: parse_num("anchors", w.trim())?,
                height: parse_num("anchors", h.trim())?,
                level: parse_num("anchors", level.trim())?,
            })
        })
        .collect()
}

fn format_anchors(a: &[Anchor]) -> String {
    a.iter().map(|a| format!("{}x{}@{}", a.width, a.height, a.level)).collect::<Vec<_>>().join(", ")
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Parse `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: String| Error::format(format!("{origin}:{}", i + 1), reason);
            let (key, value) = line.split_once('=').ok_or_else(|| fail(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim(), base).map_err(fail)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &base)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
        let path = |v: &str| base.join(v);
        let bb = &mut self.detector.backbone;
        match key {
            "cube_dir" => self.cube_dir = path(v),
            "annotation_dir" => self.annotation_dir = path(v),
            "output_dir" => self.output_dir = path(v),
            "k_se" => self.decouple.k_se = parse_num(key, v)?,
            "k_sa" => self.decouple.k_sa = parse_num(key, v)?,
            "low_percentile" => self.decouple.gen.low_percentile = parse_num(key, v)?,
            "high_percentile" => self.decouple.gen.high_percentile = parse_num(key, v)?,
            "per_channel_stretch" => self.decouple.gen.per_channel = parse_bool(key, v)?,
            "lr" => self.train.lr = parse_num(key, v)?,
            "power" => self.train.power = parse_num(key, v)?,
            "momentum" => self.train.momentum = parse_num(key, v)?,
            "max_epoch" => self.train.max_epoch = parse_num(key, v)?,
            "batch" => self.train.batch = parse_num(key, v)?,
            "flip" => self.train.flip = parse_bool(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "resume" => self.resume = (!v.is_empty()).then(|| path(v)),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| path(v)),
            "inputs" => {
                self.inputs = InputMode::parse(v).map_err(|e| e.to_string())?;
                bb.streams = self.inputs.streams();
            }
            "num_classes" => self.detector.num_classes = parse_num(key, v)?,
            "anchors" => self.detector.anchors = parse_anchors(v)?,
            "neck" => {
                self.detector.neck = match v {
                    "three_level" => Neck::ThreeLevel,
                    "fused_p3" => Neck::FusedP3,
                    _ => return Err(format!("neck must be three_level or fused_p3, got `{v}`")),
                }
            }
            "stage_channels" => {
                let c: Vec<usize> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<std::result::Result<_, _>>()?;
                bb.stage_channels = c.try_into().map_err(|c: Vec<usize>| format!("need {NUM_STAGES} stage widths, got {}", c.len()))?;
            }
            "ssa.stages" => {
                bb.ssa_stages = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "none")
                    .map(|s| parse_num(key, s))
                    .collect::<std::result::Result<_, _>>()?
            }
            "ssa.r" => bb.ssa.r = parse_num(key, v)?,
            "ssa.d_k" => bb.ssa.d_k = if v == "auto" { 0 } else { parse_num(key, v)? },
            "ssa.d_v" => {
                if v != "auto" && v != "0" {
                    return Err(format!("ssa.d_v must be `auto` (the stage width, required by the residual), got `{v}`"));
                }
            }
            "ssa.ffn_expansion" => bb.ssa.ffn_expansion = parse_num(key, v)?,
            "ssa.sam_reduction" => bb.ssa.sam_reduction = parse_num(key, v)?,
            "nms_iou" => self.nms_iou = parse_num(key, v)?,
            "conf_threshold" => self.conf_threshold = parse_num(key, v)?,
            "eval_conf_threshold" => self.eval_conf_threshold = parse_num(key, v)?,
            "detect_split" => self.detect_split = v.to_string(),
            "split_ratios" => {
                let r: Vec<f64> = v.split(':').map(|s| parse_num(key, s.trim())).collect::<std::result::Result<_, _>>()?;
                self.split_ratios = r.try_into().map_err(|_| format!("split_ratios needs `train:val:test`, got `{v}`"))?;
            }
            "split_tolerance" => self.split_tolerance = parse_num(key, v)?,
            "split_attempts" => self.split_attempts = parse_num(key, v)?,
            "synth.count" => self.synth.count = parse_num(key, v)?,
            "synth.height" => self.synth.height = parse_num(key, v)?,
            "synth.width" => self.synth.width = parse_num(key, v)?,
            "synth.bands" => self.synth.bands = parse_num(key, v)?,
            "synth.delta" => self.synth.delta = parse_num(key, v)?,
            "synth.objects" => self.synth.objects = parse_pair(key, v)?,
            "synth.object_size" => self.synth.object_size = parse_pair(key, v)?,
            "gradcheck.seeds" => self.gradcheck_seeds = parse_num(key, v)?,
            "gradcheck.modules" => {
                self.gradcheck_modules = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        GenerationParams::validate(&self.decouple.gen)?;
        if self.decouple.k_sa != 3 || self.decouple.k_se != 3 {
            return Err(invalid!("k_sa and k_se must be 3 for three-channel images"));
        }
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr >= 0.0) || !(t.power.is_finite() && t.power > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(invalid!("bad schedule: lr {}, power {}, momentum {}", t.lr, t.power, t.momentum));
        }
        if t.batch == 0 {
            return Err(invalid!("batch must be positive"));
        }
        if self.split_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(invalid!("split ratios must be positive: {:?}", self.split_ratios));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(invalid!("nms_iou must be in [0, 1], got {}", self.nms_iou));
        }
        for (k, v) in [("conf_threshold", self.conf_threshold), ("eval_conf_threshold", self.eval_conf_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid!("{k} must be in [0, 1], got {v}"));
            }
        }
        if self.inputs.streams() != self.detector.backbone.streams {
            return Err(invalid!("inputs {} do not match the backbone stream mode", self.inputs.tag()));
        }
        if self.detector.backbone.ssa_stages.iter().any(|s| !LEVELS.contains(s)) {
            return Err(invalid!("ssa.stages must be among 3,4,5"));
        }
        self.synth.spec(t.seed).validate()
    }

    /// The configuration in the same `key = value` form [`parse`] reads.
    ///
    /// [`parse`]: PipelineConfig::parse
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let bb = &self.detector.backbone;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("cube_dir", self.cube_dir.display().to_string());
        kv("annotation_dir", self.annotation_dir.display().to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("k_se", self.decouple.k_se.to_string());
        kv("k_sa", self.decouple.k_sa.to_string());
        kv("low_percentile", self.decouple.gen.low_percentile.to_string());
        kv("high_percentile", self.decouple.gen.high_percentile.to_string());
        kv("per_channel_stretch", self.decouple.gen.per_channel.to_string());
        kv("lr", self.train.lr.to_string());
        kv("power", self.train.power.to_string());
        kv("momentum", self.train.momentum.to_string());
        kv("max_epoch", self.train.max_epoch.to_string());
        kv("batch", self.train.batch.to_string());
        kv("flip", self.train.flip.to_string());
        kv("seed", self.train.seed.to_string());
        if let Some(p) = &self.resume {
            kv("resume", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            kv("checkpoint", p.display().to_string());
        }
        kv("inputs", self.inputs.tag().to_string());
        kv("num_classes", self.detector.num_classes.to_string());
        kv("anchors", format_anchors(&self.detector.anchors));
        kv("neck", match self.detector.neck {
            Neck::ThreeLevel => "three_level".into(),
            Neck::FusedP3 => "fused_p3".into(),
        });
        kv("stage_channels", list(&bb.stage_channels));
        kv("ssa.stages", if bb.ssa_stages.is_empty() { "none".into() } else { list(&bb.ssa_stages) });
        kv("ssa.r", bb.ssa.r.to_string());
        kv("ssa.d_k", if bb.ssa.d_k == 0 { "auto".into() } else { bb.ssa.d_k.to_string() });
        kv("ssa.d_v", "auto".into());
        kv("ssa.ffn_expansion", bb.ssa.ffn_expansion.to_string());
        kv("ssa.sam_reduction", bb.ssa.sam_reduction.to_string());
        kv("nms_iou", self.nms_iou.to_string());
        kv("conf_threshold", self.conf_threshold.to_string());
        kv("eval_conf_threshold", self.eval_conf_threshold.to_string());
        kv("detect_split", self.detect_split.clone());
        kv("split_ratios", self.split_ratios.iter().map(f64::to_string).collect::<Vec<_>>().join(":"));
        kv("split_tolerance", self.split_tolerance.to_string());
        kv("split_attempts", self.split_attempts.to_string());
        kv("synth.count", self.synth.count.to_string());
        kv("synth.height", self.synth.height.to_string());
        kv("synth.width", self.synth.width.to_string());
        kv("synth.bands", self.synth.bands.to_string());
        kv("synth.delta", self.synth.delta.to_string());
        kv("synth.objects", format!("{}-{}", self.synth.objects.0, self.synth.objects.1));
        kv("synth.object_size", format!("{}-{}", self.synth.object_size.0, self.synth.object_size.1));
        kv("gradcheck.seeds", self.gradcheck_seeds.to_string());
        kv("gradcheck.modules", self.gradcheck_modules.join(","));
        s
    }
}
