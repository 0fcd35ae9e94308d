//! Two-stage inference: stage-1 MC maps feed stage-2 MC prediction.

use crate::backbone::{ModelParams, Stage};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::Tensor;
use crate::uncertainty::{self, Centering, UncertaintyMaps};

/// Per-image inference outputs, all `[1,1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Mean fused probability `ȳ` over the stage-2 passes.
    pub prob: Tensor<f32>,
    /// Variance of the fused probability over the stage-2 passes.
    pub u_e_prime: Tensor<f32>,
    /// Sample-mean-centred stage-1 maps that were fed to GSUA.
    pub stage1: UncertaintyMaps<f32>,
}

pub fn check_pair(s1: &ModelParams<f32>, s2: &ModelParams<f32>) -> Result<()> {
    if s1.stage != Stage::Bayesian || s2.stage != Stage::Ssu {
        return Err(Error::integrity(format!(
            "expected a bayesian and an ssu checkpoint, got {} and {}",
            s1.stage.as_str(),
            s2.stage.as_str()
        )));
    }
    if s1.arch.in_channels != s2.arch.in_channels {
        return Err(Error::integrity("stage-1 and stage-2 checkpoints disagree on in_channels"));
    }
    Ok(())
}

/// Run `n_passes` stochastic passes of each stage on a `[1,C,H,W]` image.
/// At inference there is no ground truth, so the stage-1 epistemic map is
/// the sample variance.
pub fn predict(
    s1: &ModelParams<f32>,
    s2: &ModelParams<f32>,
    image: &Tensor<f32>,
    n_passes: usize,
    seed: u64,
) -> Result<Prediction> {
    check_pair(s1, s2)?;
    let samples = uncertainty::mc_sample(s1, image, None, n_passes, seed)?;
    let stage1 = uncertainty::spatial_uncertainty(&samples, None, Centering::SampleMean)?;
    let s2_seed = rng::derive_seed(seed, tags::PREDICT_STAGE2);
    let finals = uncertainty::mc_sample(s2, image, Some(&stage1), n_passes, s2_seed)?;
    let (prob, u_e_prime) = uncertainty::predictive_summary(&finals.probs)?;
    Ok(Prediction {
        prob,
        u_e_prime,
        stage1,
    })
}
