//! Per-pixel class probabilities from raw class scores, with a softmax
//! temperature chosen per superpixel from label agreement.

use image::RgbImage;
use rayon::prelude::*;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SemanticError {
    #[error("superpixel count {k} is invalid for an image of {pixels} pixels")]
    InvalidK { k: usize, pixels: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid score map: {0}")]
    InvalidScores(String),
    #[error("invalid superpixel map: {0}")]
    InvalidSuperpixels(String),
}

/// `classes x height x width` unnormalized activations, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    classes: usize,
    height: usize,
    width: usize,
    scores: Vec<f32>,
}

impl ScoreMap {
    pub fn new(
        classes: usize,
        height: usize,
        width: usize,
        scores: Vec<f32>,
    ) -> Result<Self, SemanticError> {
        if classes < 2 {
            return Err(SemanticError::InvalidScores(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(SemanticError::InvalidScores("empty image".into()));
        }
        if scores.len() != classes * height * width {
            return Err(SemanticError::Shape(format!(
                "expected {} scores, got {}",
                classes * height * width,
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(SemanticError::InvalidScores(format!(
                "non-finite score at flat index {i}"
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            scores,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.scores
    }

    #[inline]
    pub fn get(&self, class: usize, pixel: usize) -> f32 {
        self.scores[class * self.pixels() + pixel]
    }
}

/// Per-pixel ids, row-major. Used both for class labels and superpixel ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelImage {
    pub fn validate(&self, classes: usize) -> Result<(), SemanticError> {
        if self.labels.len() != self.height * self.width {
            return Err(SemanticError::Shape("label image size".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(SemanticError::InvalidScores(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// Dense superpixel ids in `[0, count)`, each region 4-connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub count: usize,
}

impl SuperpixelMap {
    /// Checks density and 4-connectivity; used for precomputed inputs.
    pub fn validate(&self) -> Result<(), SemanticError> {
        if self.ids.len() != self.height * self.width || self.ids.is_empty() {
            return Err(SemanticError::Shape("superpixel map size".into()));
        }
        let mut seen = vec![false; self.count];
        for &id in &self.ids {
            let id = id as usize;
            if id >= self.count {
                return Err(SemanticError::InvalidSuperpixels(format!(
                    "id {id} >= count {}",
                    self.count
                )));
            }
            seen[id] = true;
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(SemanticError::InvalidSuperpixels(format!(
                "id {id} has no pixels"
            )));
        }
        let comps = connected_components(&self.ids, self.width, self.height);
        if comps.sizes.len() != self.count {
            return Err(SemanticError::InvalidSuperpixels(
                "a superpixel is not 4-connected".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel class distribution, stored pixel-major (`probs[p * c + class]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilityImage {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl ClassProbabilityImage {
    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let p = v * self.width + u;
        &self.probs[p * self.classes..(p + 1) * self.classes]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelStats {
    pub spp: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Per-pixel argmax with ties going to the lowest class id.
pub fn argmax_labels(s: &ScoreMap) -> LabelImage {
    let n = s.pixels();
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            let mut best_score = s.get(0, p);
            for c in 1..s.classes {
                let v = s.get(c, p);
                if v > best_score {
                    best = c;
                    best_score = v;
                }
            }
            best as u32
        })
        .collect();
    LabelImage {
        height: s.height,
        width: s.width,
        labels,
    }
}

/// Fraction of each superpixel's pixels carrying its modal label, and the
/// temperature `1 / spp^2`.
pub fn predominant_fraction(
    sp: &SuperpixelMap,
    l: &LabelImage,
) -> Result<SuperpixelStats, SemanticError> {
    if sp.ids.len() != l.labels.len() || sp.width != l.width || sp.height != l.height {
        return Err(SemanticError::Shape(
            "superpixel map and label image differ in size".into(),
        ));
    }
    let classes = l.labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut counts = vec![0u32; sp.count * classes];
    let mut totals = vec![0u32; sp.count];
    for (&id, &label) in sp.ids.iter().zip(&l.labels) {
        counts[id as usize * classes + label as usize] += 1;
        totals[id as usize] += 1;
    }
    let mut spp = Vec::with_capacity(sp.count);
    let mut tau = Vec::with_capacity(sp.count);
    for k in 0..sp.count {
        let mode = counts[k * classes..(k + 1) * classes]
            .iter()
            .copied()
            .max()
            .unwrap_or(0);
        let f = if totals[k] == 0 {
            1.0
        } else {
            mode as f64 / totals[k] as f64
        };
        spp.push(f);
        tau.push((1.0 / (f * f)).max(1.0));
    }
    Ok(SuperpixelStats { spp, tau })
}

/// Writes `softmax(scores / tau)` into `out`, subtracting the max first.
#[inline]
pub fn softmax_into(scores: impl Iterator<Item = f64> + Clone, tau: f64, out: &mut [f64]) {
    let max = scores.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = ((s - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax with the temperature of the superpixel each pixel belongs to.
pub fn tempered_softmax(
    s: &ScoreMap,
    sp: &SuperpixelMap,
    stats: &SuperpixelStats,
) -> Result<ClassProbabilityImage, SemanticError> {
    if sp.ids.len() != s.pixels() || sp.width != s.width {
        return Err(SemanticError::Shape(
            "score map and superpixel map differ in size".into(),
        ));
    }
    if stats.tau.len() != sp.count {
        return Err(SemanticError::Shape("one temperature per superpixel".into()));
    }
    if let Some(t) = stats.tau.iter().find(|t| !(**t >= 1.0) || !t.is_finite()) {
        return Err(SemanticError::InvalidSuperpixels(format!(
            "temperature {t} is below 1"
        )));
    }
    let c = s.classes;
    let mut probs = vec![0.0; s.pixels() * c];
    probs
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(p, out)| {
            let tau = stats.tau[sp.ids[p] as usize];
            softmax_into((0..c).map(|k| s.get(k, p) as f64), tau, out);
        });
    Ok(ClassProbabilityImage {
        classes: c,
        height: s.height,
        width: s.width,
        probs,
    })
}

/// Full per-image chain: argmax, superpixel agreement, tempered softmax.
pub fn class_probabilities(
    s: &ScoreMap,
    sp: &SuperpixelMap,
) -> Result<ClassProbabilityImage, SemanticError> {
    let labels = argmax_labels(s);
    let stats = predominant_fraction(sp, &labels)?;
    tempered_softmax(s, sp, &stats)
}

// ---------------------------------------------------------------------------
// SLIC

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicParams {
    pub k_target: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            k_target: 2048,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB to CIELAB under the D65 white point.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let r = srgb_to_linear(rgb[0]);
    let g = srgb_to_linear(rgb[1]);
    let b = srgb_to_linear(rgb[2]);
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

struct Components {
    /// Component index per pixel, numbered in raster order of first pixel.
    ids: Vec<u32>,
    sizes: Vec<usize>,
}

fn connected_components(labels: &[u32], width: usize, height: usize) -> Components {
    const NONE: u32 = u32::MAX;
    let mut ids = vec![NONE; labels.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if ids[start] != NONE {
            continue;
        }
        let comp = sizes.len() as u32;
        let label = labels[start];
        ids[start] = comp;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if ids[q] == NONE && labels[q] == label {
                    ids[q] = comp;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        sizes.push(size);
    }
    Components { ids, sizes }
}

/// Superpixel map with one region per 4-connected run of equal `labels`.
pub fn label_regions(labels: &[u32], width: usize, height: usize) -> SuperpixelMap {
    let c = connected_components(labels, width, height);
    SuperpixelMap {
        height,
        width,
        count: c.sizes.len(),
        ids: c.ids,
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Splits disconnected labels into separate regions and merges regions
/// smaller than `min_size` into their largest 4-neighbor, then relabels
/// densely in raster order.
fn enforce_connectivity(
    labels: &[u32],
    width: usize,
    height: usize,
    min_size: usize,
) -> (Vec<u32>, usize) {
    let comps = connected_components(labels, width, height);
    let n = comps.sizes.len();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let a = comps.ids[p] as usize;
            if x + 1 < width {
                let b = comps.ids[p + 1] as usize;
                if a != b {
                    neighbors[a].push(b);
                    neighbors[b].push(a);
                }
            }
            if y + 1 < height {
                let b = comps.ids[p + width] as usize;
                if a != b {
                    neighbors[a].push(b);
                    neighbors[b].push(a);
                }
            }
        }
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = comps.sizes.clone();
    for c in 0..n {
        if comps.sizes[c] >= min_size || find(&mut parent, c) != c {
            continue;
        }
        let root = find(&mut parent, c);
        let mut best: Option<(usize, usize)> = None;
        // Neighbors of everything already merged into this region count too,
        // but a small region is only ever merged outward once, so its own
        // adjacency suffices.
        for &nb in &neighbors[c] {
            let r = find(&mut parent, nb);
            if r == root {
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, br)) => size[r] > bs || (size[r] == bs && r < br),
            };
            if better {
                best = Some((size[r], r));
            }
        }
        if let Some((_, target)) = best {
            parent[root] = target;
            size[target] += size[root];
        }
    }
    let mut dense = vec![u32::MAX; n];
    let mut count = 0;
    let mut out = vec![0u32; labels.len()];
    for (p, o) in out.iter_mut().enumerate() {
        let r = find(&mut parent, comps.ids[p] as usize);
        if dense[r] == u32::MAX {
            dense[r] = count;
            count += 1;
        }
        *o = dense[r];
    }
    (out, count as usize)
}

/// SLIC superpixels in CIELAB + image-plane space.
pub fn slic_segment(
    image: &RgbImage,
    params: &SlicParams,
) -> Result<SuperpixelMap, SemanticError> {
    let width = image.width() as usize;
    let height = image.height() as usize;
    let npix = width * height;
    let k = params.k_target;
    if k == 0 || k > npix {
        return Err(SemanticError::InvalidK { k, pixels: npix });
    }
    let lab: Vec<[f64; 3]> = image.pixels().map(|p| srgb_to_lab(p.0)).collect();

    let s = (npix as f64 / k as f64).sqrt();
    let nx = ((k as f64 * width as f64 / height as f64).sqrt().round() as usize).clamp(1, width);
    let ny = ((k as f64 / nx as f64).round() as usize).clamp(1, height);
    let sx = width as f64 / nx as f64;
    let sy = height as f64 / ny as f64;

    // center: [l, a, b, x, y]
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * sx;
            let y = (j as f64 + 0.5) * sy;
            let px = (x.floor() as usize).min(width - 1);
            let py = (y.floor() as usize).min(height - 1);
            let c = lab[py * width + px];
            centers.push([c[0], c[1], c[2], x, y]);
        }
    }
    let mut labels: Vec<u32> = (0..npix)
        .map(|p| {
            let i = (((p % width) as f64 / sx) as usize).min(nx - 1);
            let j = (((p / width) as f64 / sy) as usize).min(ny - 1);
            (j * nx + i) as u32
        })
        .collect();

    let half = s.max(sx).max(sy).ceil() as i64;
    let spatial = (params.compactness / s).powi(2);
    let mut dist = vec![f64::INFINITY; npix];
    for _ in 0..params.iterations {
        dist.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let cx = c[3].floor() as i64;
            let cy = c[4].floor() as i64;
            let x0 = (cx - half).max(0) as usize;
            let x1 = ((cx + half).min(width as i64 - 1)).max(0) as usize;
            let y0 = (cy - half).max(0) as usize;
            let y1 = ((cy + half).min(height as i64 - 1)).max(0) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * width + x;
                    let l = &lab[p];
                    let dl = l[0] - c[0];
                    let da = l[1] - c[1];
                    let db = l[2] - c[2];
                    // pixel centers sit at integer + 0.5
                    let dx = x as f64 + 0.5 - c[3];
                    let dy = y as f64 + 0.5 - c[4];
                    let d = dl * dl + da * da + db * db + spatial * (dx * dx + dy * dy);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let acc = &mut sums[l as usize];
            let c = &lab[p];
            acc[0] += c[0];
            acc[1] += c[1];
            acc[2] += c[2];
            acc[3] += (p % width) as f64 + 0.5;
            acc[4] += (p / width) as f64 + 0.5;
            acc[5] += 1.0;
        }
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[5] > 0.0 {
                for d in 0..5 {
                    c[d] = acc[d] / acc[5];
                }
            }
        }
    }

    let min_size = ((npix as f64 / centers.len() as f64) / 4.0).floor().max(1.0) as usize;
    let (ids, count) = enforce_connectivity(&labels, width, height, min_size);
    Ok(SuperpixelMap {
        height,
        width,
        ids,
        count,
    })
}

/// One superpixel per pixel grid cell of size `cell`; a cheap stand-in for
/// SLIC in tests and a valid precomputed map.
pub fn grid_superpixels(width: usize, height: usize, cell: usize) -> SuperpixelMap {
    let cell = cell.max(1);
    let gx = width.div_ceil(cell);
    let ids = (0..width * height)
        .map(|p| ((p / width / cell) * gx + (p % width) / cell) as u32)
        .collect();
    SuperpixelMap {
        height,
        width,
        ids,
        count: gx * height.div_ceil(cell),
    }
}
