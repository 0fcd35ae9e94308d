//! Multi-scale uncertainty-aware fusion.
//!
//! Each side output `y_s` is rescaled by its own sigmoid confidence,
//! `t(y) = y·σ(y) + y`, and the fused logit is the per-pixel maximum of
//! `t` over the three scales. `t` is strictly increasing (its slope is
//! `1 + σ(y) + y·σ(y)(1 - σ(y)) > 0.92`), so fusion preserves the order of
//! logits and the sign of a consensus. Ties go to the earliest scale.

use crate::error::Result;
use crate::tensor::ops::sigmoid;
use crate::tensor::{Graph, Real, Tensor, Var};

/// `y·σ(y) + y`.
pub fn confidence_transform<T: Real>(y: T) -> T {
    y * sigmoid(y) + y
}

/// Fuse three equally shaped logit maps (scales 1, 1/2, 1/4 already
/// resized to full resolution). The result is a logit, not a probability.
pub fn msua_fuse<T: Real>(y1: &Tensor<T>, y2_up: &Tensor<T>, y3_up: &Tensor<T>) -> Result<Tensor<T>> {
    y1.expect_same_shape(y2_up)?;
    y1.expect_same_shape(y3_up)?;
    let t1 = y1.map(confidence_transform);
    let t2 = y2_up.map(confidence_transform);
    t1.zip_map(&t2, |a, b| if b > a { b } else { a })?
        .zip_map(&y3_up.map(confidence_transform), |a, b| if b > a { b } else { a })
}

/// Differentiable fusion on a graph; the subgradient follows the winning scale.
pub fn msua_graph<T: Real>(g: &mut Graph<T>, scales: [Var; 3]) -> Result<Var> {
    let mut transformed = Vec::with_capacity(3);
    for y in scales {
        let s = g.sigmoid(y);
        let ys = g.mul(y, s)?;
        transformed.push(g.add(ys, y)?);
    }
    g.max(&transformed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![v.len()], v).unwrap()
    }

    #[test]
    fn scalar_example() {
        let out = msua_fuse(&t(&[1.0]), &t(&[-1.0]), &t(&[0.0])).unwrap();
        // 1 + 1/(1+e^-1) = 1.7310585786300049
        assert!((out.item() - 1.731_058_578_630_005).abs() < 1e-12);
        assert!((confidence_transform(-1.0f64) + 1.268_941_421_369_995).abs() < 1e-12);
    }

    #[test]
    fn equal_and_zero_inputs() {
        let c = 0.8;
        let out = msua_fuse(&t(&[c]), &t(&[c]), &t(&[c])).unwrap();
        assert_eq!(out.item(), c * sigmoid(c) + c);
        let z = msua_fuse(&t(&[0.0, 0.0]), &t(&[0.0, 0.0]), &t(&[0.0, 0.0])).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let e = msua_fuse(&t(&[0.0]), &t(&[0.0, 1.0]), &t(&[0.0]));
        assert!(matches!(e, Err(crate::Error::Usage(_))));
    }

    #[test]
    fn graph_matches_pure_and_ties_pick_first_scale() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[0.5, 2.0, 1.0]), true);
        let b = g.leaf(t(&[0.5, -1.0, 3.0]), true);
        let c = g.leaf(t(&[-4.0, 1.0, 3.0]), true);
        let f = msua_graph(&mut g, [a, b, c]).unwrap();
        let pure = msua_fuse(g.value(a), g.value(b), g.value(c)).unwrap();
        assert_eq!(g.value(f), &pure);
        let out = g.mean(f);
        g.backward(out).unwrap();
        // element 0: tie between scales 1 and 2 -> scale 1; element 2: tie 2/3 -> scale 2
        assert!(g.grad(a).unwrap().data()[0] > 0.0);
        assert_eq!(g.grad(b).unwrap().data()[0], 0.0);
        assert!(g.grad(b).unwrap().data()[2] > 0.0);
        assert_eq!(g.grad(c).unwrap().data()[2], 0.0);
    }
}
