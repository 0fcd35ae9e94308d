//! Monte-Carlo sampling and the uncertainty quantities derived from it.
//!
//! * spatial maps `u_e` (squared deviation of sampled probabilities from a
//!   reference) and `u_a` (mean predicted variance), used as GSUA inputs;
//! * scale uncertainty, the sigmoid of a side-output logit;
//! * the predictive summary `(ȳ, u'_e)` of the fused output.
//!
//! Summation over samples always runs in sample order.

use std::path::Path;

use crate::backbone::{self, ModelParams};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::{self, tags};
use crate::tensor::ops::sigmoid;
use crate::tensor::{Real, Tensor};

/// Epistemic and aleatoric maps, each `[N,1,H,W]` and nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMaps<T = f32> {
    pub u_e: Tensor<T>,
    pub u_a: Tensor<T>,
}

impl<T: Real> UncertaintyMaps<T> {
    pub fn new(u_e: Tensor<T>, u_a: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = u_e.dims4()?;
        if c != 1 {
            return Err(Error::config(format!(
                "uncertainty maps must have one channel, got {:?}",
                u_e.shape()
            )));
        }
        u_e.expect_same_shape(&u_a)?;
        let valid = |t: &Tensor<T>| t.data().iter().all(|&v| v.is_finite() && v >= T::zero());
        if !valid(&u_e) || !valid(&u_a) {
            return Err(Error::usage("uncertainty maps must be finite and nonnegative"));
        }
        Ok(UncertaintyMaps { u_e, u_a })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        UncertaintyMaps {
            u_e: Tensor::zeros(vec![n, 1, h, w]),
            u_a: Tensor::zeros(vec![n, 1, h, w]),
        }
    }

    /// `[N,2,H,W]` stack in the order `[u_a, u_e]`.
    pub fn stacked(&self) -> Tensor<T> {
        crate::tensor::ops::concat_channels(&[&self.u_a, &self.u_e])
            .expect("maps share a shape by construction")
    }

    pub fn cast<U: Real>(&self) -> UncertaintyMaps<U> {
        UncertaintyMaps {
            u_e: self.u_e.cast(),
            u_a: self.u_a.cast(),
        }
    }

    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let ue: Vec<Tensor<T>> = items.iter().map(|m| m.u_e.clone()).collect();
        let ua: Vec<Tensor<T>> = items.iter().map(|m| m.u_a.clone()).collect();
        Ok(UncertaintyMaps {
            u_e: Tensor::stack_batch(&ue)?,
            u_a: Tensor::stack_batch(&ua)?,
        })
    }
}

/// Per-pass outputs of a stochastic model: probabilities `σ(ỹ_F)` and,
/// when the model has an aleatoric head, variances `exp(v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct McSamples<T = f32> {
    pub probs: Vec<Tensor<T>>,
    pub variances: Vec<Tensor<T>>,
}

impl<T: Real> McSamples<T> {
    pub fn new(probs: Vec<Tensor<T>>, variances: Vec<Tensor<T>>) -> Result<Self> {
        let first = probs
            .first()
            .ok_or_else(|| Error::usage("McSamples needs at least one sample"))?;
        if !variances.is_empty() && variances.len() != probs.len() {
            return Err(Error::usage("probability and variance sample counts differ"));
        }
        for t in probs.iter().chain(&variances) {
            first.expect_same_shape(t)?;
        }
        Ok(McSamples { probs, variances })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Which centre the epistemic term measures deviation from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Centering {
    /// Deviation from the ground-truth mask (training-time maps).
    GroundTruth,
    /// Deviation from the sample mean (inference-time maps).
    SampleMean,
}

/// `n` stochastic passes; pass `i` draws dropout masks from substream `i`
/// of `master_seed`, so the result does not depend on execution order.
pub fn mc_sample<T: Real>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    u_maps: Option<&UncertaintyMaps<T>>,
    n: usize,
    master_seed: u64,
) -> Result<McSamples<T>> {
    if n < 1 {
        return Err(Error::usage("mc_sample needs n >= 1"));
    }
    let mut probs = Vec::with_capacity(n);
    let mut variances = Vec::new();
    for i in 0..n {
        let mut rng = rng::substream(master_seed, tags::MC_PASS + i as u64);
        let bundle = backbone::forward(params, image, u_maps, true, &mut rng)?;
        probs.push(bundle.y_f.map(sigmoid));
        if let Some(v) = &bundle.v {
            variances.push(v.map(|x| x.exp()));
        }
    }
    McSamples::new(probs, variances)
}

/// Per-pixel mean and population variance of a list of equally shaped maps,
/// accumulated in list order.
fn mean_and_variance<T: Real>(samples: &[Tensor<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::usage("need at least one sample"))?;
    for s in samples {
        first.expect_same_shape(s)?;
    }
    let inv_n = T::one() / T::from_usize(samples.len()).unwrap();
    // Shifted by the first sample so identical samples average exactly.
    let mut shift = Tensor::zeros(first.shape().to_vec());
    for s in &samples[1..] {
        shift
            .data_mut()
            .iter_mut()
            .zip(s.data().iter().zip(first.data()))
            .for_each(|(m, (&x, &x0))| *m += x - x0);
    }
    let mean = first.zip_map(&shift, |x0, d| x0 + d * inv_n)?;
    let mut var = Tensor::zeros(first.shape().to_vec());
    for s in samples {
        var.data_mut()
            .iter_mut()
            .zip(s.data().iter().zip(mean.data()))
            .for_each(|(v, (&x, &m))| *v += (x - m) * (x - m));
    }
    var.data_mut().iter_mut().for_each(|v| *v *= inv_n);
    Ok((mean, var))
}

/// Spatial uncertainty maps from MC samples.
///
/// `u_a` is the mean sampled variance (zero when the samples carry none).
/// With [`Centering::GroundTruth`], `u_e = (1/N) Σ (ỹ_i - y)²` evaluated
/// through the identity `Var(ỹ) + (mean(ỹ) - y)²`, which makes it
/// never smaller than the [`Centering::SampleMean`] value in floating point.
pub fn spatial_uncertainty<T: Real>(
    samples: &McSamples<T>,
    reference: Option<&Tensor<T>>,
    centering: Centering,
) -> Result<UncertaintyMaps<T>> {
    let (mean, var) = mean_and_variance(&samples.probs)?;
    let u_e = match centering {
        Centering::SampleMean => var,
        Centering::GroundTruth => {
            let y = reference
                .ok_or_else(|| Error::usage("ground-truth centering needs a reference mask"))?;
            mean.expect_same_shape(y)?;
            let mut out = var;
            out.data_mut()
                .iter_mut()
                .zip(mean.data().iter().zip(y.data()))
                .for_each(|(v, (&m, &yv))| *v += (m - yv) * (m - yv));
            out
        }
    };
    let u_a = if samples.variances.is_empty() {
        Tensor::zeros(u_e.shape().to_vec())
    } else {
        mean_and_variance(&samples.variances)?.0
    };
    let u_e = as_map(u_e)?;
    let u_a = as_map(u_a)?;
    UncertaintyMaps::new(u_e, u_a)
}

/// Lift `[H,W]`/`[1,H,W]`/`[N,1,H,W]` maps to rank 4.
fn as_map<T: Real>(t: Tensor<T>) -> Result<Tensor<T>> {
    let shape = t.shape().to_vec();
    match shape[..] {
        [_, _, _, _] => Ok(t),
        [c, h, w] => t.reshape(vec![1, c, h, w]),
        [h, w] => t.reshape(vec![1, 1, h, w]),
        [n] => t.reshape(vec![1, 1, 1, n]),
        _ => Err(Error::usage(format!("cannot interpret {shape:?} as a map"))),
    }
}

/// Sigmoid confidence of a side-output logit map.
pub fn scale_uncertainty<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    logits.map(sigmoid)
}

/// Mean prediction `ȳ` and population variance `u'_e` of final probability maps.
pub fn predictive_summary<T: Real>(final_samples: &[Tensor<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    if final_samples.is_empty() {
        return Err(Error::usage("predictive_summary needs at least one sample"));
    }
    mean_and_variance(final_samples)
}

/// Write a map as an 8-bit PNG (linearly rescaled to its own range), a
/// `<stem>.range.txt` sidecar recording that range, and a lossless
/// `<stem>.f32` planar file.
pub fn export_map(map: &Tensor<f32>, dir: &Path, stem: &str) -> Result<()> {
    let (lo, hi) = map.min_max();
    let span = hi - lo;
    let scaled = map.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
    io::write_image(&scaled, &dir.join(format!("{stem}.png")))?;
    let sidecar = format!("min = {lo:e}\nmax = {hi:e}\n");
    let side_path = dir.join(format!("{stem}.range.txt"));
    std::fs::write(&side_path, sidecar).map_err(|e| Error::io(&side_path, e))?;
    io::write_raw(map, &dir.join(format!("{stem}.f32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(v: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1, 1, 1, 1], &[v]).unwrap()
    }

    #[test]
    fn gt_centered_example() {
        let s = McSamples::new(vec![px(0.8), px(0.6)], vec![px(0.2), px(0.4)]).unwrap();
        let m = spatial_uncertainty(&s, Some(&px(1.0)), Centering::GroundTruth).unwrap();
        assert!((m.u_e.item() - 0.10).abs() < 1e-15);
        assert!((m.u_a.item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mean_centered_identical_samples_is_zero() {
        let s = McSamples::new(vec![px(0.3); 5], vec![]).unwrap();
        let m = spatial_uncertainty(&s, None, Centering::SampleMean).unwrap();
        assert_eq!(m.u_e.item(), 0.0);
        assert_eq!(m.u_a.item(), 0.0);
    }

    #[test]
    fn gt_centering_requires_reference_and_shape() {
        let s = McSamples::new(vec![px(0.3)], vec![]).unwrap();
        assert!(matches!(
            spatial_uncertainty(&s, None, Centering::GroundTruth),
            Err(Error::Usage(_))
        ));
        let wrong = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        assert!(spatial_uncertainty(&s, Some(&wrong), Centering::GroundTruth).is_err());
    }

    #[test]
    fn scale_uncertainty_values() {
        let y = Tensor::<f64>::from_f64(vec![3], &[0.0, 2.0, 1e4]).unwrap();
        let u = scale_uncertainty(&y);
        assert_eq!(u.data()[0], 0.5);
        // 1/(1+e^-2) = 0.88079707797788244
        assert!((u.data()[1] - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert_eq!(u.data()[2], 1.0);
    }

    #[test]
    fn predictive_summary_examples() {
        let (m, v) = predictive_summary(&[px(0.4), px(0.6)]).unwrap();
        assert!((m.item() - 0.5).abs() < 1e-15);
        assert!((v.item() - 0.01).abs() < 1e-15);
        let (m, v) = predictive_summary(&[px(0.7)]).unwrap();
        assert_eq!(m.item(), 0.7);
        assert_eq!(v.item(), 0.0);
        assert!(matches!(predictive_summary::<f64>(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn maps_reject_negative_values() {
        let neg = Tensor::from_f64(vec![1, 1, 1, 1], &[-0.1]).unwrap();
        assert!(UncertaintyMaps::new(neg.clone(), px(0.0)).is_err());
    }
}
