//! Seeded train/val/test partition with per-class balance checks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

pub const MIN_IMAGES: usize = 10;
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Proportional sizes by largest remainder; ties go to the earlier split.
pub fn split_sizes(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let rest = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(rest) {
        sizes[i] += 1;
    }
    sizes
}

/// An image id with its object count per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub class_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    /// Ids of each split, sorted.
    pub splits: [Vec<String>; 3],
    /// Shuffles tried.
    pub attempts: usize,
    /// Largest relative deviation of a split's class share from the global share.
    pub max_deviation: f64,
    pub balanced: bool,
}

fn class_totals<'a>(items: impl Iterator<Item = &'a LabeledImage>, classes: usize) -> Vec<usize> {
    let mut t = vec![0; classes];
    for it in items {
        for (a, b) in t.iter_mut().zip(&it.class_counts) {
            *a += b;
        }
    }
    t
}

/// Largest `|p_split − p_global| / p_global` over non-empty splits and
/// classes present globally. A non-empty split without objects counts as
/// fully off.
pub fn max_relative_deviation(parts: &[Vec<&LabeledImage>], classes: usize) -> f64 {
    let global = class_totals(parts.iter().flatten().copied(), classes);
    let gsum: usize = global.iter().sum();
    if gsum == 0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for part in parts.iter().filter(|p| !p.is_empty()) {
        let local = class_totals(part.iter().copied(), classes);
        let lsum: usize = local.iter().sum();
        if lsum == 0 {
            worst = worst.max(1.0);
            continue;
        }
        for (l, g) in local.iter().zip(&global).filter(|(_, g)| **g > 0) {
            let pg = *g as f64 / gsum as f64;
            let pl = *l as f64 / lsum as f64;
            worst = worst.max((pl - pg).abs() / pg);
        }
    }
    worst
}

/// Shuffle until every split's class shares lie within `tolerance` of the
/// global shares, keeping the best attempt if none does.
pub fn split_images(items: &[LabeledImage], ratios: &[f64; 3], tolerance: f64, attempts: usize, seed: u64) -> Result<SplitResult> {
    if items.len() < MIN_IMAGES {
        return Err(invalid!("need at least {MIN_IMAGES} images to split, got {}", items.len()));
    }
    let classes = items.iter().map(|i| i.class_counts.len()).max().unwrap_or(0);
    let mut sorted: Vec<&LabeledImage> = items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let sizes = split_sizes(items.len(), ratios);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, [Vec<&LabeledImage>; 3])> = None;
    let mut tried = 0;
    while tried < attempts.max(1) {
        tried += 1;
        let mut order = sorted.clone();
        order.shuffle(&mut rng);
        let test = order.split_off(sizes[0] + sizes[1]);
        let val = order.split_off(sizes[0]);
        let parts = [order, val, test];
        let dev = max_relative_deviation(&parts, classes);
        if best.as_ref().map_or(true, |(d, _)| dev < *d) {
            best = Some((dev, parts));
        }
        if dev <= tolerance {
            break;
        }
    }
    let (dev, parts) = best.expect("at least one attempt");
    let splits = parts.map(|p| {
        let mut ids: Vec<String> = p.into_iter().map(|i| i.id.clone()).collect();
        ids.sort();
        ids
    });
    Ok(SplitResult { splits, attempts: tried, max_deviation: dev, balanced: dev <= tolerance })
}
