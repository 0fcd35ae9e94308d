//! Overlap metrics on binary masks: Dice, mean IoU and mean per-class
//! accuracy over {foreground, background}.
//!
//! Empty-set conventions: Dice of two empty masks is 1; a class absent from
//! both prediction and ground truth has IoU 1; a class absent from the
//! ground truth contributes recall 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, bits: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::config(format!("mask shape {shape:?} needs {} bits", bits.len())));
        }
        Ok(Mask { shape, bits })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            self.shape.clone(),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("shape checked on construction")
    }
}

/// `prob >= threshold`.
pub fn binarize<T: Real>(prob: &Tensor<T>, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0,1), got {threshold}")));
    }
    let t = T::lit(threshold);
    Mask::new(prob.shape().to_vec(), prob.data().iter().map(|&p| p >= t).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    if pred.shape != gt.shape {
        return Err(Error::usage(format!(
            "mask shape mismatch: {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou_foreground(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn iou_background(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_)
    }

    pub fn miou(&self) -> f64 {
        (self.iou_foreground() + self.iou_background()) / 2.0
    }

    pub fn macc(&self) -> f64 {
        (ratio(self.tp, self.tp + self.fn_) + ratio(self.tn, self.tn + self.fp)) / 2.0
    }
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.miou())
}

pub fn macc(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.macc())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub miou: f64,
    pub macc: f64,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &Mask, gt: &Mask) -> Result<Self> {
        let c = confusion(pred, gt)?;
        Ok(ImageMetrics {
            id: id.into(),
            dice: c.dice(),
            miou: c.miou(),
            macc: c.macc(),
        })
    }
}

/// Per-image metrics and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub miou: f64,
    pub macc: f64,
    pub n_images: usize,
    pub threshold: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, threshold: f64) -> Self {
        let n = per_image.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricReport {
            dice: mean(|m| m.dice),
            miou: mean(|m| m.miou),
            macc: mean(|m| m.macc),
            n_images: n,
            threshold,
            per_image,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
