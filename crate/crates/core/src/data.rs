//! Synthetic elongated-structure samples and image+mask directory datasets.
//!
//! Two generators stand in for real fundus and endothelium data:
//!
//! * `vessel`: smooth B-spline curves with tapering width and optional
//!   branches;
//! * `cell`: boundaries of a jittered-grid Voronoi tessellation.
//!
//! The mask is the clean rasterisation. The image renders the mask at two
//! intensity levels, dims it with a linear illumination ramp, blurs it and
//! adds Gaussian noise, so the dim side of each image is the ambiguous one.
//!
//! On disk a dataset is `root/{train,val,test}/{images,masks}/<stem>.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng;
use crate::tensor::{ops, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Vessel,
    Cell,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Vessel => "vessel",
            SynthKind::Cell => "cell",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Synthetic { seed: u64, kind: SynthKind },
    File { image: PathBuf, mask: PathBuf },
}

/// Image `[1,H,W]` in `[0,1]` with a binary mask of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub id: String,
    pub provenance: Provenance,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>, id: String, provenance: Provenance) -> Result<Self> {
        image.expect_same_shape(&mask)?;
        if image.shape().len() != 3 || image.shape()[0] != 1 {
            return Err(Error::config(format!(
                "samples are [1,H,W], got {:?}",
                image.shape()
            )));
        }
        if !image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::ingestion(format!("{id}: image values outside [0,1]")));
        }
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::ingestion(format!("{id}: mask is not binary")));
        }
        Ok(Sample {
            image,
            mask,
            id,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// `[1,1,H,W]` views for the network.
    pub fn image_batch(&self) -> Tensor<f32> {
        self.image.clone().reshape(vec![1, 1, self.height(), self.width()]).unwrap()
    }

    pub fn mask_batch(&self) -> Tensor<f32> {
        self.mask.clone().reshape(vec![1, 1, self.height(), self.width()]).unwrap()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.numel() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub height: usize,
    pub width: usize,
    /// Curves per image (vessel) or cells per side (cell), inclusive range.
    pub n_structures: (usize, usize),
    /// Stroke width in pixels, inclusive range.
    pub width_px: (f64, f64),
    pub noise_sigma: f64,
    /// Fractional dimming across the image by the illumination ramp.
    pub illumination_gradient: f64,
    pub blur_sigma: f64,
    pub foreground_level: f64,
    pub background_level: f64,
    /// Probability that a vessel curve sprouts one branch.
    pub branch_probability: f64,
}

impl SynthSpec {
    pub fn vessel(size: usize) -> Self {
        SynthSpec {
            kind: SynthKind::Vessel,
            height: size,
            width: size,
            n_structures: (2, 4),
            width_px: (2.0, 4.0),
            noise_sigma: 0.06,
            illumination_gradient: 0.6,
            blur_sigma: 0.7,
            foreground_level: 0.8,
            background_level: 0.25,
            branch_probability: 0.5,
        }
    }

    pub fn cell(size: usize) -> Self {
        SynthSpec {
            kind: SynthKind::Cell,
            height: size,
            width: size,
            n_structures: (3, 5),
            width_px: (1.0, 1.8),
            noise_sigma: 0.06,
            illumination_gradient: 0.6,
            blur_sigma: 0.7,
            foreground_level: 0.2,
            background_level: 0.75,
            branch_probability: 0.0,
        }
    }

    pub fn for_kind(kind: SynthKind, size: usize) -> Self {
        match kind {
            SynthKind::Vessel => Self::vessel(size),
            SynthKind::Cell => Self::cell(size),
        }
    }

    /// Noise, illumination and blur switched off.
    pub fn clean(mut self) -> Self {
        self.noise_sigma = 0.0;
        self.illumination_gradient = 0.0;
        self.blur_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synth spec: {m}")));
        if self.height < 8 || self.width < 8 {
            return bad("images must be at least 8x8");
        }
        if self.n_structures.0 == 0 || self.n_structures.0 > self.n_structures.1 {
            return bad("n_structures range must be nonempty and start at >= 1");
        }
        if !(self.width_px.0 > 0.0 && self.width_px.0 <= self.width_px.1) {
            return bad("width_px range must be nonempty and positive");
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return bad("noise_sigma and blur_sigma must be >= 0");
        }
        if !(0.0..1.0).contains(&self.illumination_gradient) {
            return bad("illumination_gradient must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.foreground_level)
            || !(0.0..=1.0).contains(&self.background_level)
            || self.foreground_level == self.background_level
        {
            return bad("foreground/background levels must differ and lie in [0, 1]");
        }
        Ok(())
    }
}

type Point = (f64, f64);

/// Uniform cubic B-spline with clamped ends, sampled densely.
fn bspline(ctrl: &[Point], step_px: f64) -> Vec<Point> {
    let mut pts = vec![ctrl[0], ctrl[0]];
    pts.extend_from_slice(ctrl);
    pts.push(*ctrl.last().unwrap());
    pts.push(*ctrl.last().unwrap());
    let mut out = Vec::new();
    for seg in pts.windows(4) {
        let len: f64 = seg
            .windows(2)
            .map(|p| ((p[1].0 - p[0].0).powi(2) + (p[1].1 - p[0].1).powi(2)).sqrt())
            .sum();
        let steps = ((len / step_px).ceil() as usize).max(1);
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            let b0 = (1.0 - t).powi(3) / 6.0;
            let b1 = (3.0 * t.powi(3) - 6.0 * t * t + 4.0) / 6.0;
            let b2 = (-3.0 * t.powi(3) + 3.0 * t * t + 3.0 * t + 1.0) / 6.0;
            let b3 = t.powi(3) / 6.0;
            out.push((
                b0 * seg[0].0 + b1 * seg[1].0 + b2 * seg[2].0 + b3 * seg[3].0,
                b0 * seg[0].1 + b1 * seg[1].1 + b2 * seg[2].1 + b3 * seg[3].1,
            ));
        }
    }
    out.push(*ctrl.last().unwrap());
    out
}

/// Mark every pixel whose centre lies within `radius` of `p` (x, y).
fn stamp(mask: &mut [f32], h: usize, w: usize, p: Point, radius: f64) {
    let (x, y) = p;
    let y0 = ((y - radius - 0.5).floor().max(0.0)) as usize;
    let y1 = ((y + radius - 0.5).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
    let x0 = ((x - radius - 0.5).floor().max(0.0)) as usize;
    let x1 = ((x + radius - 0.5).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
    for r in y0..=y1 {
        for c in x0..=x1 {
            let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
            if (cx - x).powi(2) + (cy - y).powi(2) <= radius * radius {
                mask[r * w + c] = 1.0;
            }
        }
    }
}

fn draw_curve(mask: &mut [f32], h: usize, w: usize, ctrl: &[Point], widths: (f64, f64)) {
    let pts = bspline(ctrl, 0.25);
    let n = pts.len().max(2) - 1;
    for (i, &p) in pts.iter().enumerate() {
        let t = i as f64 / n as f64;
        let width = widths.0 + (widths.1 - widths.0) * t;
        stamp(mask, h, w, p, width / 2.0);
    }
}

fn curve_controls(rng: &mut rng::Rng, start: Point, end: Point, lo: Point, hi: Point) -> Vec<Point> {
    let (dx, dy) = (end.0 - start.0, end.1 - start.1);
    let len = (dx * dx + dy * dy).sqrt();
    let (nx, ny) = (-dy / len, dx / len);
    let jitter = Normal::new(0.0, 0.12 * len).unwrap();
    let mut ctrl = vec![start];
    for k in 1..4 {
        let t = k as f64 / 4.0;
        let off = jitter.sample(rng);
        ctrl.push((
            (start.0 + t * dx + off * nx).clamp(lo.0, hi.0),
            (start.1 + t * dy + off * ny).clamp(lo.1, hi.1),
        ));
    }
    ctrl.push(end);
    ctrl
}

fn random_point(rng: &mut rng::Rng, lo: Point, hi: Point) -> Point {
    (rng.random_range(lo.0..=hi.0), rng.random_range(lo.1..=hi.1))
}

fn vessel_mask(spec: &SynthSpec, rng: &mut rng::Rng) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let mut mask = vec![0.0f32; h * w];
    let margin = spec.width_px.1 / 2.0 + 1.0;
    let lo = (margin, margin);
    let hi = (w as f64 - margin, h as f64 - margin);
    let min_len = 0.5 * h.min(w) as f64;
    let count = rng.random_range(spec.n_structures.0..=spec.n_structures.1);
    for _ in 0..count {
        let start = random_point(rng, lo, hi);
        let mut end = random_point(rng, lo, hi);
        for _ in 0..64 {
            if ((end.0 - start.0).powi(2) + (end.1 - start.1).powi(2)).sqrt() >= min_len {
                break;
            }
            end = random_point(rng, lo, hi);
        }
        let w0 = rng.random_range(spec.width_px.0..=spec.width_px.1);
        let w1 = rng.random_range(spec.width_px.0..=w0);
        let ctrl = curve_controls(rng, start, end, lo, hi);
        draw_curve(&mut mask, h, w, &ctrl, (w0, w1));

        if rng.random::<f64>() < spec.branch_probability {
            let along = bspline(&ctrl, 1.0);
            let t = rng.random_range(0.2..0.8);
            let root = along[(t * (along.len() - 1) as f64) as usize];
            let mut tip = random_point(rng, lo, hi);
            for _ in 0..64 {
                if ((tip.0 - root.0).powi(2) + (tip.1 - root.1).powi(2)).sqrt() >= 0.6 * min_len {
                    break;
                }
                tip = random_point(rng, lo, hi);
            }
            let bw = (0.7 * (w0 + (w1 - w0) * t)).max(spec.width_px.0);
            let bctrl = curve_controls(rng, root, tip, lo, hi);
            draw_curve(&mut mask, h, w, &bctrl, (bw, spec.width_px.0.max(0.75 * bw)));
        }
    }
    mask
}

fn cell_mask(spec: &SynthSpec, rng: &mut rng::Rng) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let per_side = rng.random_range(spec.n_structures.0..=spec.n_structures.1);
    let sy = h as f64 / per_side as f64;
    let sx = w as f64 / per_side as f64;
    let mut seeds = Vec::new();
    // One ring of cells outside the frame keeps border boundaries correct.
    for gy in -1..=per_side as i64 {
        for gx in -1..=per_side as i64 {
            let jy = rng.random_range(-0.3..0.3);
            let jx = rng.random_range(-0.3..0.3);
            seeds.push(((gx as f64 + 0.5 + jx) * sx, (gy as f64 + 0.5 + jy) * sy));
        }
    }
    let width = rng.random_range(spec.width_px.0..=spec.width_px.1);
    let mut mask = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
            for &(sx, sy) in &seeds {
                let d = ((px - sx).powi(2) + (py - sy).powi(2)).sqrt();
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                } else if d < d2 {
                    d2 = d;
                }
            }
            // d2 - d1 grows at twice the distance to the bisector.
            if d2 - d1 < width {
                mask[r * w + c] = 1.0;
            }
        }
    }
    mask
}

/// One synthetic sample; identical `(spec, seed)` give identical bits.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng::seeded(seed);
    let mask = match spec.kind {
        SynthKind::Vessel => vessel_mask(spec, &mut rng),
        SynthKind::Cell => cell_mask(spec, &mut rng),
    };

    let (fg, bg) = (spec.foreground_level, spec.background_level);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let corners = [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)];
    let proj: Vec<f64> = corners.iter().map(|&(x, y)| x * dx + y * dy).collect();
    let pmin = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let pmax = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut image: Vec<f64> = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let level = if mask[r * w + c] > 0.0 { fg } else { bg };
            let t = ((c as f64 + 0.5) * dx + (r as f64 + 0.5) * dy - pmin) / (pmax - pmin);
            image.push(level * (1.0 - spec.illumination_gradient * t));
        }
    }
    let mut image = Tensor::<f64>::new(vec![1, 1, h, w], image)?;
    if spec.blur_sigma > 0.0 {
        let ksize = 2 * (3.0 * spec.blur_sigma).ceil() as usize + 1;
        image = ops::gaussian_blur(&image, ksize, spec.blur_sigma)?;
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
        image.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let image = image.map(|v| v.clamp(0.0, 1.0)).cast::<f32>().reshape(vec![1, h, w])?;
    let mask = Tensor::new(vec![1, h, w], mask)?;
    Sample::new(
        image,
        mask,
        format!("{}_{seed}", spec.kind.as_str()),
        Provenance::Synthetic {
            seed,
            kind: spec.kind,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// `*.png` files of a directory keyed by stem, in lexicographic order.
pub fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Load `root/<split>/{images,masks}/*.png`. Masks are binarised at 0.5
/// and extents must be divisible by `divisor`.
pub fn load_dataset(root: &Path, split: Split, divisor: usize) -> Result<Vec<Sample>> {
    let base = root.join(split.as_str());
    let images = png_stems(&base.join("images"))?;
    let masks = png_stems(&base.join("masks"))?;
    if let Some(stem) = masks.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::ingestion(format!("mask {stem} has no matching image")));
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let mask_path = masks
            .get(&stem)
            .ok_or_else(|| Error::ingestion(format!("image {stem} has no matching mask")))?;
        let image = io::read_image(&image_path)?;
        let mask = io::read_image(mask_path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        if image.shape() != mask.shape() {
            return Err(Error::ingestion(format!(
                "{stem}: image {:?} and mask {:?} differ in size",
                image.shape(),
                mask.shape()
            )));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if divisor > 0 && (h % divisor != 0 || w % divisor != 0) {
            return Err(Error::config(format!(
                "{stem}: extents {h}x{w} must be divisible by {divisor}"
            )));
        }
        out.push(Sample::new(
            image,
            mask,
            stem,
            Provenance::File {
                image: image_path,
                mask: mask_path.clone(),
            },
        )?);
    }
    Ok(out)
}

/// Write a sample into `root/<split>/{images,masks}/<id>.png`.
pub fn save_sample(root: &Path, split: Split, sample: &Sample) -> Result<()> {
    let base = root.join(split.as_str());
    io::write_image(&sample.image, &base.join("images").join(format!("{}.png", sample.id)))?;
    io::write_image(&sample.mask, &base.join("masks").join(format!("{}.png", sample.id)))
}
