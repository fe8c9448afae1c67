//! Axis-aligned boxes, detections, ground truth and the annotation text
//! format (`class cx cy w h`, normalized, one object per line).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x_min: cx - w / 2.0, y_min: cy - h / 2.0, x_max: cx + w / 2.0, y_max: cy + h / 2.0 }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
    }
}

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ba) = (a.area(), b.area());
    if aa <= 0.0 || ba <= 0.0 {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    inter / (aa + ba - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.cx) || !unit(self.cy) {
            return Err(format!("center ({}, {}) outside [0, 1]", self.cx, self.cy));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(format!("size ({}, {}) outside (0, 1]", self.w, self.h));
        }
        Ok(())
    }

    /// Box in pixels for an image of the given size.
    pub fn to_pixels(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        BBox::from_center(self.cx * w, self.cy * h, self.w * w, self.h * h)
    }

    pub fn from_pixels(class_id: usize, b: &BBox, width: usize, height: usize) -> Self {
        let (cx, cy) = b.center();
        Self {
            class_id,
            cx: cx / width as f64,
            cy: cy / height as f64,
            w: b.width() / width as f64,
            h: b.height() / height as f64,
        }
    }
}

/// Parse annotation text. Errors name the offending line.
pub fn parse_annotations(text: &str, origin: &str) -> Result<Vec<GroundTruthBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::format("annotation", format!("{origin}:{}: {reason}", i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id = fields[0].parse::<usize>().map_err(|_| bad(format!("bad class id `{}`", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|_| bad(format!("bad number `{f}`")))?;
        }
        let gt = GroundTruthBox { class_id, cx: v[0], cy: v[1], w: v[2], h: v[3] };
        gt.validate().map_err(bad)?;
        out.push(gt);
    }
    Ok(out)
}

pub fn format_annotations(gts: &[GroundTruthBox]) -> String {
    let mut s = String::new();
    for g in gts {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", g.class_id, g.cx, g.cy, g.w, g.h);
    }
    s
}

pub fn read_annotations(path: &Path) -> Result<Vec<GroundTruthBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string())
}

/// Detection file lines: `class score x_min y_min x_max y_max`.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(s, "{} {:.6} {:.3} {:.3} {:.3} {:.3}", d.class_id, d.score, b.x_min, b.y_min, b.x_max, b.y_max);
    }
    s
}

pub fn parse_detections(text: &str, origin: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::format("detections", format!("{origin}:{}: {reason}", i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let class_id = fields[0].parse::<usize>().map_err(|_| bad(format!("bad class id `{}`", fields[0])))?;
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|_| bad(format!("bad number `{f}`")))?;
        }
        if !(0.0..=1.0).contains(&v[0]) {
            return Err(bad(format!("score {} outside [0, 1]", v[0])));
        }
        out.push(Detection { class_id, score: v[0], bbox: BBox::new(v[1], v[2], v[3], v[4]) });
    }
    Ok(out)
}
