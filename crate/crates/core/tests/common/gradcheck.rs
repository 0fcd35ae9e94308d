//! Finite-difference cases for every differentiable graph operation and for
//! a small end-to-end model.

use ssunet::backbone::{self, ArchConfig, ParamVars, Stage};
use ssunet::tensor::{Activation, PoolMode};
use ssunet::{gsua, msua, training, Graph, Tensor, Var};

use super::{binary, check, check_with, project, rng, uniform};

pub const SEEDS: u64 = 50;

pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn unary(seed: u64, shape: &[usize], lo: f64, hi: f64, f: fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let x = uniform(&mut rng(seed), shape, lo, hi);
    check(&[x], |g, v| {
        let y = f(g, v[0]);
        project(g, y, seed)
    })
}

/// Values bounded away from zero, so a ±h probe never crosses a relu kink.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor<f64> {
    uniform(&mut rng(seed), shape, 0.05, 1.5).zip_map(&binary(&mut rng(seed + 1), shape, 0.5), |x, s| {
        if s > 0.5 { x } else { -x }
    })
    .unwrap()
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d 3x3 pad 1 with bias",
            run: |s| {
                let mut r = rng(s);
                let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
                let k = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
                let b = uniform(&mut r, &[4], -1.0, 1.0);
                check(&[x, k, b], |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "conv2d 3x3 stride 2",
            run: |s| {
                let mut r = rng(s);
                let x = uniform(&mut r, &[1, 2, 7, 6], -1.0, 1.0);
                let k = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
                check(&[x, k], |g, v| {
                    let y = g.conv2d(v[0], v[1], None, 2, 0).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "conv2d 1x1",
            run: |s| {
                let mut r = rng(s);
                let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
                let k = uniform(&mut r, &[2, 3, 1, 1], -1.0, 1.0);
                let b = uniform(&mut r, &[2], -1.0, 1.0);
                check(&[x, k, b], |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "max pool 2x2",
            run: |s| {
                let x = uniform(&mut rng(s), &[1, 2, 6, 6], -1.0, 1.0);
                check(&[x], |g, v| {
                    let y = g.pool2d(v[0], PoolMode::Max, 2, 2).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "avg pool 3x3 stride 1",
            run: |s| {
                let x = uniform(&mut rng(s), &[2, 2, 5, 5], -1.0, 1.0);
                check(&[x], |g, v| {
                    let y = g.pool2d(v[0], PoolMode::Avg, 3, 1).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "global pool avg+max",
            run: |s| {
                let x = uniform(&mut rng(s), &[2, 3, 4, 5], -1.0, 1.0);
                check(&[x], |g, v| {
                    let a = g.global_pool2d(v[0], PoolMode::Avg).unwrap();
                    let m = g.global_pool2d(v[0], PoolMode::Max).unwrap();
                    let y = g.concat_channels(&[a, m]).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "channel pool mean+max",
            run: |s| {
                let x = uniform(&mut rng(s), &[2, 4, 3, 3], -1.0, 1.0);
                check(&[x], |g, v| {
                    let a = g.channel_pool(v[0], PoolMode::Avg).unwrap();
                    let m = g.channel_pool(v[0], PoolMode::Max).unwrap();
                    let y = g.concat_channels(&[a, m]).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "bilinear resize up and down",
            run: |s| {
                let x = uniform(&mut rng(s), &[1, 2, 3, 8], -1.0, 1.0);
                check(&[x], |g, v| {
                    let y = g.upsample_bilinear(v[0], 7, 3).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "relu",
            run: |s| {
                let x = away_from_zero(s, &[2, 3, 3]);
                check(&[x], |g, v| {
                    let y = g.relu(v[0]);
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "sigmoid",
            run: |s| unary(s, &[3, 4], -6.0, 6.0, |g, x| g.activation(x, Activation::Sigmoid)),
        },
        OpCase {
            name: "exp",
            run: |s| unary(s, &[3, 4], -3.0, 3.0, |g, x| g.exp(x)),
        },
        OpCase {
            name: "scale",
            run: |s| unary(s, &[5], -2.0, 2.0, |g, x| g.scale(x, -1.7)),
        },
        OpCase {
            name: "mean",
            run: |s| unary(s, &[2, 5], -2.0, 2.0, |g, x| g.mean(x)),
        },
        OpCase {
            name: "add sub mul",
            run: |s| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[2, 3, 2, 2], -2.0, 2.0);
                let b = uniform(&mut r, &[2, 3, 2, 2], -2.0, 2.0);
                check(&[a, b], |g, v| {
                    let p = g.mul(v[0], v[1]).unwrap();
                    let d = g.sub(p, v[1]).unwrap();
                    let y = g.add(d, v[0]).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "feature times broadcast gate",
            run: |s| {
                let mut r = rng(s);
                let x = uniform(&mut r, &[2, 3, 4, 4], -2.0, 2.0);
                let a = uniform(&mut r, &[2, 1, 4, 4], -2.0, 2.0);
                check(&[x, a], |g, v| {
                    let y = g.mul_channels(v[0], v[1]).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "channel concat",
            run: |s| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
                let b = uniform(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
                check(&[a, b], |g, v| {
                    let y = g.concat_channels(&[v[1], v[0], v[1]]).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "inverted dropout (fixed mask)",
            run: |s| {
                let x = uniform(&mut rng(s), &[2, 3, 4, 4], -1.0, 1.0);
                check(&[x], |g, v| {
                    let mut mask_rng = ssunet::rng::seeded(s);
                    let y = g.dropout(v[0], 0.3, true, &mut mask_rng).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "gaussian blur 5x5",
            run: |s| {
                let x = uniform(&mut rng(s), &[1, 2, 6, 7], -1.0, 1.0);
                check(&[x], |g, v| {
                    let y = g.gaussian_blur(v[0], 5, 1.0).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "elementwise max",
            run: |s| {
                let mut r = rng(s);
                let xs: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&mut r, &[2, 1, 3, 3], -1.0, 1.0)).collect();
                check(&xs, |g, v| {
                    let y = g.max(v).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "weighted sum",
            run: |s| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 3], -1.0, 1.0);
                let b = uniform(&mut r, &[4], -1.0, 1.0);
                check(&[a, b], |g, v| {
                    let ma = g.mean(v[0]);
                    let pb = project(g, v[1], s);
                    g.weighted_sum(&[(ma, 0.7), (pb, 2.5)]).unwrap()
                })
            },
        },
        OpCase {
            name: "bce with logits",
            run: |s| {
                let mut r = rng(s);
                let x = uniform(&mut r, &[1, 1, 4, 4], -5.0, 5.0);
                let y = binary(&mut r, &[1, 1, 4, 4], 0.4);
                check(&[x], move |g, v| g.bce_with_logits(v[0], &y).unwrap())
            },
        },
        OpCase {
            name: "gsua block",
            run: |s| {
                let mut r = rng(s);
                let x = uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
                let u = uniform(&mut r, &[1, 2, 8, 8], 0.0, 1.0);
                // Positive response keeps the relu gate away from its kink.
                let k = uniform(&mut r, &[1, 2, 1, 1], 0.2, 1.0);
                let b = uniform(&mut r, &[1], 0.1, 0.5);
                check(&[x, u, k, b], |g, v| {
                    let (y, _) = gsua::gsua_graph(g, v[0], v[1], v[2], v[3], 5, 1.0).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "msua fusion",
            run: |s| {
                let mut r = rng(s);
                let ys: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&mut r, &[1, 1, 4, 4], -3.0, 3.0)).collect();
                check(&ys, |g, v| {
                    let y = msua::msua_graph(g, [v[0], v[1], v[2]]).unwrap();
                    project(g, y, s)
                })
            },
        },
        OpCase {
            name: "heteroscedastic loss",
            run: |s| {
                let mut r = rng(s);
                let x = uniform(&mut r, &[1, 1, 3, 3], -3.0, 3.0);
                let lv = uniform(&mut r, &[1, 1, 3, 3], -3.0, 1.0);
                let y = binary(&mut r, &[1, 1, 3, 3], 0.5);
                check(&[x, lv], move |g, v| {
                    let mut noise = ssunet::rng::seeded(s);
                    training::heteroscedastic_loss_graph(g, v[0], v[1], &y, 4, &mut noise).unwrap()
                })
            },
        },
    ]
}

/// Depth-2, width-4 model on a 16x16 input: the worst relative error over a
/// random subset of at least `fraction` of the parameters, for the given
/// stage's training loss.
pub fn model_check(stage: Stage, seed: u64, fraction: f64) -> (f64, usize) {
    let arch = ArchConfig {
        base_width: 4,
        depth: 2,
        dropout_rate: 0.2,
        ..ArchConfig::default()
    };
    let arch = match stage {
        Stage::Bayesian => arch.bayesian_from(),
        Stage::Ssu => arch,
    };
    let params = backbone::build_model(&arch, stage, seed).unwrap().cast::<f64>();
    let mut r = rng(seed);
    let image = uniform(&mut r, &[1, 1, 16, 16], 0.0, 1.0);
    let mask = binary(&mut r, &[1, 1, 16, 16], 0.3);
    let u = uniform(&mut r, &[1, 2, 16, 16], 0.0, 0.25);
    let names: Vec<String> = params.tensors.keys().cloned().collect();

    let loss = |g: &mut Graph<f64>, v: &[Var]| -> Var {
        let pv = ParamVars::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let x = g.constant(image.clone());
        let uv = (stage == Stage::Ssu).then(|| g.constant(u.clone()));
        let mut drop = ssunet::rng::seeded(seed ^ 0xd00d);
        let b = backbone::forward_graph(g, &params, &pv, x, uv, true, &mut drop).unwrap();
        match stage {
            Stage::Ssu => training::total_loss_graph(g, &b, &mask, &[1.0; 4]).unwrap().0,
            Stage::Bayesian => {
                let mut noise = ssunet::rng::seeded(seed ^ 0x4015e);
                training::heteroscedastic_loss_graph(g, b.y_f, b.v.unwrap(), &mask, 2, &mut noise).unwrap()
            }
        }
    };

    let inputs: Vec<Tensor<f64>> = params.tensors.values().cloned().collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let want = ((total as f64 * fraction).ceil() as usize).max(1);
    // Deterministic subset: mark `want` distinct flat indices.
    let mut chosen = vec![false; total];
    let mut picker = ssunet::rng::seeded(seed ^ 0x5e1ec7);
    let mut count = 0;
    while count < want {
        let i = rand::Rng::random_range(&mut picker, 0..total);
        if !chosen[i] {
            chosen[i] = true;
            count += 1;
        }
    }
    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let worst = check_with(&inputs, 1e-5, |i, j| chosen[offsets[i] + j], loss);
    (worst, want)
}
