//! Gated soft uncertainty-aware attention.
//!
//! ```text
//! a   = resize(blur(σ(relu(f([mean_c(u), max_c(u)])))))
//! out = x ⊙ a + x
//! ```
//!
//! `u = [u_a, u_e]` is pooled across its two channels (mean and max) at
//! every pixel, mixed by a 1×1 convolution `f` (2 → 1 channels), gated by
//! relu, squashed by a sigmoid, softened by a unit-sum Gaussian and
//! bilinearly resized to the feature resolution. Since the gate output is
//! nonnegative, the attention lies in `[0.5, 1)` and the block scales each
//! feature by a factor in `[1.5, 2)`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, PoolMode, Real, Tensor, Var};
use crate::uncertainty::UncertaintyMaps;

pub const DEFAULT_KSIZE: usize = 5;
pub const DEFAULT_SIGMA: f64 = 1.0;

/// Number of pooled descriptors per pixel (mean and max over the map channels).
pub const POOLED_DESCRIPTORS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GsuaParams<T = f32> {
    /// `[1, 2, 1, 1]`
    pub kernel: Tensor<T>,
    /// `[1]`
    pub bias: Tensor<T>,
    pub ksize: usize,
    pub sigma: f64,
}

impl<T: Real> GsuaParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, ksize: usize, sigma: f64) -> Result<Self> {
        if kernel.shape() != [1, POOLED_DESCRIPTORS, 1, 1] || bias.shape() != [1] {
            return Err(Error::config(format!(
                "gsua expects a [1,2,1,1] kernel and [1] bias, got {:?} / {:?}",
                kernel.shape(),
                bias.shape()
            )));
        }
        check_blur(ksize, sigma)?;
        Ok(GsuaParams {
            kernel,
            bias,
            ksize,
            sigma,
        })
    }

    /// Weights `[w_avg, w_max]` and bias `b` with default blur settings.
    pub fn from_weights(w_avg: f64, w_max: f64, b: f64) -> Self {
        GsuaParams {
            kernel: Tensor::from_f64(vec![1, 2, 1, 1], &[w_avg, w_max]).unwrap(),
            bias: Tensor::from_f64(vec![1], &[b]).unwrap(),
            ksize: DEFAULT_KSIZE,
            sigma: DEFAULT_SIGMA,
        }
    }
}

pub(crate) fn check_blur(ksize: usize, sigma: f64) -> Result<()> {
    if ksize % 2 == 0 {
        return Err(Error::config(format!("gsua gaussian ksize must be odd, got {ksize}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("gsua gaussian sigma must be > 0, got {sigma}")));
    }
    Ok(())
}

/// Attention nodes for features of spatial size `(h, w)`.
/// `u` must be a `[N, 2, H, W]` node.
pub fn attention_graph<T: Real>(
    g: &mut Graph<T>,
    u: Var,
    kernel: Var,
    bias: Var,
    ksize: usize,
    sigma: f64,
    (h, w): (usize, usize),
) -> Result<Var> {
    let (_, c, _, _) = g.value(u).dims4()?;
    if c != 2 {
        return Err(Error::config(format!("gsua expects 2 uncertainty channels, got {c}")));
    }
    let avg = g.channel_pool(u, PoolMode::Avg)?;
    let max = g.channel_pool(u, PoolMode::Max)?;
    let desc = g.concat_channels(&[avg, max])?;
    let response = g.conv2d(desc, kernel, Some(bias), 1, 0)?;
    let gated = g.relu(response);
    let squashed = g.sigmoid(gated);
    let soft = g.gaussian_blur(squashed, ksize, sigma)?;
    g.upsample_bilinear(soft, h, w)
}

/// `x ⊙ a + x` on a graph. Returns `(output, attention)`.
pub fn gsua_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    u: Var,
    kernel: Var,
    bias: Var,
    ksize: usize,
    sigma: f64,
) -> Result<(Var, Var)> {
    let (n, _, h, w) = g.value(x).dims4()?;
    let un = g.value(u).dims4()?.0;
    if un != n {
        return Err(Error::config(format!(
            "gsua batch mismatch: features {n}, uncertainty maps {un}"
        )));
    }
    let a = attention_graph(g, u, kernel, bias, ksize, sigma, (h, w))?;
    let modulated = g.mul_channels(x, a)?;
    Ok((g.add(modulated, x)?, a))
}

fn register<T: Real>(
    g: &mut Graph<T>,
    u: &UncertaintyMaps<T>,
    params: &GsuaParams<T>,
) -> (Var, Var, Var) {
    let uv = g.constant(u.stacked());
    let k = g.constant(params.kernel.clone());
    let b = g.constant(params.bias.clone());
    (uv, k, b)
}

/// Attention map `[N,1,h,w]` for the given feature size.
pub fn attention_map<T: Real>(
    u: &UncertaintyMaps<T>,
    params: &GsuaParams<T>,
    size: (usize, usize),
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (uv, k, b) = register(&mut g, u, params);
    let a = attention_graph(&mut g, uv, k, b, params.ksize, params.sigma, size)?;
    Ok(g.value(a).clone())
}

pub fn gsua_forward<T: Real>(
    x: &Tensor<T>,
    u: &UncertaintyMaps<T>,
    params: &GsuaParams<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (uv, k, b) = register(&mut g, u, params);
    let (out, _) = gsua_graph(&mut g, xv, uv, k, b, params.ksize, params.sigma)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::sigmoid;

    fn ramp(shape: [usize; 4], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 / 100.0 - 0.5) * scale).collect();
        Tensor::from_f64(shape.to_vec(), &v).unwrap()
    }

    fn maps(h: usize, w: usize) -> UncertaintyMaps<f64> {
        let ue = ramp([1, 1, h, w], 1.0).map(|v| v.abs());
        let ua = ramp([1, 1, h, w], 0.6).map(|v| v * v);
        UncertaintyMaps::new(ue, ua).unwrap()
    }

    #[test]
    fn zero_uncertainty_scales_by_one_and_a_half() {
        let x = ramp([1, 3, 4, 4], 2.0);
        let u = UncertaintyMaps::zeros(1, 8, 8);
        let p = GsuaParams::from_weights(0.7, -0.3, 0.0);
        let out = gsua_forward(&x, &u, &p).unwrap();
        for (&o, &xi) in out.data().iter().zip(x.data()) {
            assert_eq!(o, 1.5 * xi);
        }
    }

    #[test]
    fn zero_features_stay_zero() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let p = GsuaParams::from_weights(3.0, 1.0, 0.2);
        let out = gsua_forward(&x, &maps(8, 8), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_bias_closed_form() {
        let x = ramp([1, 2, 4, 4], 1.0);
        let b = 0.8;
        let p = GsuaParams::from_weights(0.0, 0.0, b);
        let out = gsua_forward(&x, &maps(8, 8), &p).unwrap();
        let f = 1.0 + sigmoid(b);
        for (&o, &xi) in out.data().iter().zip(x.data()) {
            assert!((o - f * xi).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_gate_gives_constant_half() {
        let p = GsuaParams::from_weights(-1.0, -2.0, -0.1);
        let a = attention_map(&maps(8, 8), &p, (4, 4)).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_range() {
        let p = GsuaParams::from_weights(4.0, 2.5, 0.1);
        let a = attention_map(&maps(8, 8), &p, (8, 8)).unwrap();
        assert!(a.data().iter().all(|&v| (0.5..1.0).contains(&v)));
        assert!(a.data().iter().any(|&v| v > 0.5));
    }

    #[test]
    fn configuration_errors() {
        let k = Tensor::<f64>::zeros(vec![1, 3, 1, 1]);
        let b = Tensor::<f64>::zeros(vec![1]);
        assert!(GsuaParams::new(k, b.clone(), 5, 1.0).is_err());
        let k = Tensor::<f64>::zeros(vec![1, 2, 1, 1]);
        assert!(GsuaParams::new(k.clone(), b.clone(), 4, 1.0).is_err());
        assert!(GsuaParams::new(k, b, 5, 0.0).is_err());

        let p = GsuaParams::from_weights(1.0, 1.0, 0.0);
        let x = Tensor::<f64>::zeros(vec![2, 2, 4, 4]);
        assert!(matches!(gsua_forward(&x, &maps(8, 8), &p), Err(Error::Config(_))));
    }
}
