//! U-Net backbone with Monte-Carlo dropout, three side-output heads and an
//! optional aleatoric (log-variance) head.
//!
//! Layout for `depth = d` and channel widths `c_i = base_width · 2^i`:
//!
//! * `enc{i}` (i < d): two 3×3 conv + relu, optional GSUA, dropout, 2×2 max pool
//! * `bottleneck`: two 3×3 conv + relu at `c_d`, dropout
//! * `dec{i}` (i = d-1 … 0): bilinear ×2, concat skip, two 3×3 conv + relu, dropout
//! * `head.y1/y2/y3`: 1×1 conv on the three shallowest decoder stages
//!   (`dec0`, `dec1`, then `dec2` or the bottleneck when `d = 2`), giving
//!   logits at scales 1, 1/2 and 1/4
//! * `head.var`: 1×1 conv on `dec0`, a log-variance map

use indexmap::IndexMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsua;
use crate::msua;
use crate::rng::{self, tags, Rng};
use crate::tensor::{Graph, PoolMode, Real, Tensor, Var};
use crate::uncertainty::UncertaintyMaps;

/// Downscale factors of the three side outputs.
pub const SIDE_OUTPUT_SCALES: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub with_gsua: bool,
    pub with_msua: bool,
    pub with_aleatoric_head: bool,
    pub gsua_ksize: usize,
    pub gsua_sigma: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 1,
            base_width: 16,
            depth: 3,
            dropout_rate: 0.5,
            with_gsua: true,
            with_msua: true,
            with_aleatoric_head: false,
            gsua_ksize: gsua::DEFAULT_KSIZE,
            gsua_sigma: gsua::DEFAULT_SIGMA,
        }
    }
}

impl ArchConfig {
    /// Stage-1 Bayesian network derived from a stage-2 configuration: same
    /// widths and dropout, no GSUA/MSUA, with the aleatoric head.
    pub fn bayesian_from(&self) -> Self {
        ArchConfig {
            with_gsua: false,
            with_msua: false,
            with_aleatoric_head: true,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::config("in_channels and base_width must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.with_gsua {
            gsua::check_blur(self.gsua_ksize, self.gsua_sigma)?;
        }
        Ok(())
    }

    /// Input height and width must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} must have extents divisible by {d} (2^depth)"
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Stage-1 network producing the spatial uncertainty maps.
    Bayesian,
    /// Stage-2 uncertainty-aware segmentation network.
    Ssu,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Bayesian => "bayesian",
            Stage::Ssu => "ssu",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayesian" => Ok(Stage::Bayesian),
            "ssu" => Ok(Stage::Ssu),
            other => Err(Error::config(format!("unknown stage {other:?} (bayesian|ssu)"))),
        }
    }
}

/// Declared parameter: name, shape and fan-in (0 for biases).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

fn conv_specs(out: &mut Vec<LayerSpec>, name: &str, cout: usize, cin: usize, k: usize) {
    out.push(LayerSpec {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k],
        fan_in: cin * k * k,
    });
    out.push(LayerSpec {
        name: format!("{name}.bias"),
        shape: vec![cout],
        fan_in: 0,
    });
}

/// Every parameter of the architecture, in declaration (checkpoint) order.
pub fn layer_specs(arch: &ArchConfig, stage: Stage) -> Result<Vec<LayerSpec>> {
    arch.validate()?;
    if arch.with_gsua && stage == Stage::Bayesian {
        return Err(Error::config("the stage-1 Bayesian network cannot use GSUA"));
    }
    let d = arch.depth;
    let mut specs = Vec::new();
    for i in 0..d {
        let cin = if i == 0 { arch.in_channels } else { arch.width(i - 1) };
        conv_specs(&mut specs, &format!("enc{i}.conv1"), arch.width(i), cin, 3);
        conv_specs(&mut specs, &format!("enc{i}.conv2"), arch.width(i), arch.width(i), 3);
        if arch.with_gsua {
            conv_specs(&mut specs, &format!("enc{i}.gsua"), 1, gsua::POOLED_DESCRIPTORS, 1);
        }
    }
    conv_specs(&mut specs, "bottleneck.conv1", arch.width(d), arch.width(d - 1), 3);
    conv_specs(&mut specs, "bottleneck.conv2", arch.width(d), arch.width(d), 3);
    for i in (0..d).rev() {
        let cin = arch.width(i + 1) + arch.width(i);
        conv_specs(&mut specs, &format!("dec{i}.conv1"), arch.width(i), cin, 3);
        conv_specs(&mut specs, &format!("dec{i}.conv2"), arch.width(i), arch.width(i), 3);
    }
    for (s, head) in ["head.y1", "head.y2", "head.y3"].iter().enumerate() {
        conv_specs(&mut specs, head, 1, arch.width(s), 1);
    }
    if arch.with_aleatoric_head {
        conv_specs(&mut specs, "head.var", 1, arch.width(0), 1);
    }
    Ok(specs)
}

/// Named parameters of one network plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub arch: ArchConfig,
    pub stage: Stage,
    pub tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Assemble from tensors, checking names, order and shapes.
    pub fn from_tensors(
        arch: ArchConfig,
        stage: Stage,
        tensors: IndexMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let specs = layer_specs(&arch, stage)?;
        if specs.len() != tensors.len() {
            return Err(Error::integrity(format!(
                "architecture declares {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::integrity(format!(
                    "expected {} {:?}, found {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            arch,
            stage,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            stage: self.stage,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Fan-in scaled uniform initialisation (`±sqrt(6 / fan_in)`), zero biases.
/// Each tensor draws from its own substream keyed by its name, so adding or
/// removing optional layers leaves the other tensors unchanged.
pub fn build_model(arch: &ArchConfig, stage: Stage, seed: u64) -> Result<ModelParams<f32>> {
    let mut tensors = IndexMap::new();
    for spec in layer_specs(arch, stage)? {
        let numel = spec.shape.iter().product();
        let data = if spec.fan_in == 0 {
            vec![0.0f32; numel]
        } else {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            let mut rng = rng::substream(seed ^ tags::INIT, fnv1a(&spec.name));
            (0..numel)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect()
        };
        tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    ModelParams::from_tensors(arch.clone(), stage, tensors)
}

/// Outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle<T = f32> {
    /// Logits at full resolution.
    pub y1: Tensor<T>,
    /// Logits at 1/2 resolution.
    pub y2: Tensor<T>,
    /// Logits at 1/4 resolution.
    pub y3: Tensor<T>,
    /// Fused logits at full resolution (`y1` when fusion is disabled).
    pub y_f: Tensor<T>,
    /// Log-variance map at full resolution.
    pub v: Option<Tensor<T>>,
}

/// Parameter tensors registered as graph leaves.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn register<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, requires_grad: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), requires_grad)))
            .collect();
        ParamVars { vars }
    }

    /// Use existing graph nodes as the parameters, e.g. to differentiate
    /// with respect to a subset.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub y1: Var,
    pub y2: Var,
    pub y3: Var,
    /// `y2`, `y3` resized to full resolution.
    pub y2_up: Var,
    pub y3_up: Var,
    pub y_f: Var,
    pub v: Option<Var>,
    /// Encoder block outputs (after GSUA, before dropout).
    pub encoder: Vec<Var>,
}

fn conv<T: Real>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var, padding: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), 1, padding)
}

fn double_conv<T: Real>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.conv1"), x, 1)?;
    let h = g.relu(h);
    let h = conv(g, p, &format!("{name}.conv2"), h, 1)?;
    Ok(g.relu(h))
}

/// Record a forward pass on `g`. `u` is the `[N,2,H,W]` uncertainty stack,
/// required when the network is a stage-2 model with GSUA.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    p: &ParamVars,
    image: Var,
    u: Option<Var>,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<BundleVars> {
    let arch = &params.arch;
    let (_, c, h, w) = g.value(image).dims4()?;
    if c != arch.in_channels {
        return Err(Error::config(format!(
            "model expects {} input channels, got {c}",
            arch.in_channels
        )));
    }
    arch.check_input(h, w)?;
    let use_gsua = arch.with_gsua && params.stage == Stage::Ssu;
    let u = match (use_gsua, u) {
        (true, None) => {
            return Err(Error::usage("this model uses GSUA and needs uncertainty maps"))
        }
        (true, Some(u)) => {
            let (_, uc, uh, uw) = g.value(u).dims4()?;
            if uc != 2 || (uh, uw) != (h, w) {
                return Err(Error::config(format!(
                    "uncertainty stack must be [N,2,{h},{w}], got {:?}",
                    g.value(u).shape()
                )));
            }
            Some(u)
        }
        (false, _) => None,
    };
    let rate = arch.dropout_rate;

    let mut x = image;
    let mut skips = Vec::with_capacity(arch.depth);
    let mut encoder = Vec::with_capacity(arch.depth);
    for i in 0..arch.depth {
        let mut hcur = double_conv(g, p, &format!("enc{i}"), x)?;
        if let Some(u) = u {
            let k = p.get(&format!("enc{i}.gsua.weight"))?;
            let b = p.get(&format!("enc{i}.gsua.bias"))?;
            hcur = gsua::gsua_graph(g, hcur, u, k, b, arch.gsua_ksize, arch.gsua_sigma)?.0;
        }
        encoder.push(hcur);
        let hcur = g.dropout(hcur, rate, stochastic, rng)?;
        skips.push(hcur);
        x = g.pool2d(hcur, PoolMode::Max, 2, 2)?;
    }
    let bottom = double_conv(g, p, "bottleneck", x)?;
    let bottom = g.dropout(bottom, rate, stochastic, rng)?;

    let mut stages = vec![None; arch.depth];
    let mut hcur = bottom;
    for i in (0..arch.depth).rev() {
        let (_, _, sh, sw) = g.value(skips[i]).dims4()?;
        let up = g.upsample_bilinear(hcur, sh, sw)?;
        let cat = g.concat_channels(&[up, skips[i]])?;
        let out = double_conv(g, p, &format!("dec{i}"), cat)?;
        hcur = g.dropout(out, rate, stochastic, rng)?;
        stages[i] = Some(hcur);
    }
    let mut stages: Vec<Var> = stages.into_iter().map(|s| s.expect("every stage built")).collect();
    stages.push(bottom);

    let y1 = conv(g, p, "head.y1", stages[0], 0)?;
    let y2 = conv(g, p, "head.y2", stages[1], 0)?;
    let y3 = conv(g, p, "head.y3", stages[2], 0)?;
    let y2_up = g.upsample_bilinear(y2, h, w)?;
    let y3_up = g.upsample_bilinear(y3, h, w)?;
    let y_f = if arch.with_msua {
        msua::msua_graph(g, [y1, y2_up, y3_up])?
    } else {
        y1
    };
    let v = if arch.with_aleatoric_head {
        Some(conv(g, p, "head.var", stages[0], 0)?)
    } else {
        None
    };
    Ok(BundleVars {
        y1,
        y2,
        y3,
        y2_up,
        y3_up,
        y_f,
        v,
        encoder,
    })
}

/// Forward pass without gradient tracking.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    u_maps: Option<&UncertaintyMaps<T>>,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<PredictionBundle<T>> {
    let mut g = Graph::new();
    let p = ParamVars::register(&mut g, params, false);
    let x = g.constant(image.clone());
    let needs_u = params.arch.with_gsua && params.stage == Stage::Ssu;
    let u = match u_maps {
        Some(m) if needs_u => Some(g.constant(m.stacked())),
        _ => None,
    };
    let b = forward_graph(&mut g, params, &p, x, u, stochastic, rng)?;
    Ok(PredictionBundle {
        y1: g.value(b.y1).clone(),
        y2: g.value(b.y2).clone(),
        y3: g.value(b.y3).clone(),
        y_f: g.value(b.y_f).clone(),
        v: b.v.map(|v| g.value(v).clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(depth: usize, width: usize) -> ArchConfig {
        ArchConfig {
            base_width: width,
            depth,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let arch = small(3, 8);
        let a = build_model(&arch, Stage::Ssu, 11).unwrap();
        let b = build_model(&arch, Stage::Ssu, 11).unwrap();
        assert_eq!(a, b);
        let c = build_model(&arch, Stage::Ssu, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn declared_layers_present_without_extras() {
        let arch = ArchConfig {
            with_gsua: false,
            with_msua: false,
            with_aleatoric_head: false,
            ..small(3, 8)
        };
        let m = build_model(&arch, Stage::Ssu, 0).unwrap();
        let mut expect = Vec::new();
        for l in ["enc0", "enc1", "enc2", "bottleneck", "dec2", "dec1", "dec0"] {
            for c in ["conv1", "conv2"] {
                expect.push(format!("{l}.{c}.weight"));
                expect.push(format!("{l}.{c}.bias"));
            }
        }
        for h in ["head.y1", "head.y2", "head.y3"] {
            expect.push(format!("{h}.weight"));
            expect.push(format!("{h}.bias"));
        }
        let names: Vec<&String> = m.tensors.keys().collect();
        assert_eq!(names, expect.iter().collect::<Vec<_>>());
        assert_eq!(m.get("dec0.conv1.weight").unwrap().shape(), &[8, 24, 3, 3]);
        assert_eq!(m.get("bottleneck.conv2.weight").unwrap().shape(), &[64, 64, 3, 3]);
        assert!(m.parameter_count() > 0);
    }

    #[test]
    fn doubling_width_doubles_first_kernel() {
        let a = build_model(&small(3, 8), Stage::Ssu, 0).unwrap();
        let b = build_model(&small(3, 16), Stage::Ssu, 0).unwrap();
        assert_eq!(a.get("enc0.conv1.weight").unwrap().shape()[0], 8);
        assert_eq!(b.get("enc0.conv1.weight").unwrap().shape()[0], 16);
    }

    #[test]
    fn invalid_configs() {
        assert!(build_model(&small(1, 8), Stage::Ssu, 0).is_err());
        let bad = ArchConfig {
            dropout_rate: 1.0,
            ..small(2, 4)
        };
        assert!(build_model(&bad, Stage::Ssu, 0).is_err());
        assert!(build_model(&small(2, 4), Stage::Bayesian, 0).is_err());
        assert!(build_model(&small(2, 4).bayesian_from(), Stage::Bayesian, 0).is_ok());
    }

    #[test]
    fn scale_contract_and_fusion_switch() {
        let arch = ArchConfig {
            with_gsua: false,
            ..small(3, 4)
        };
        let m = build_model(&arch, Stage::Ssu, 3).unwrap();
        let img = Tensor::full(vec![1, 1, 64, 64], 0.3f32);
        let b = forward(&m, &img, None, false, &mut rng::seeded(0)).unwrap();
        assert_eq!(b.y1.shape(), &[1, 1, 64, 64]);
        assert_eq!(b.y2.shape(), &[1, 1, 32, 32]);
        assert_eq!(b.y3.shape(), &[1, 1, 16, 16]);
        assert_eq!(b.y_f.shape(), &[1, 1, 64, 64]);
        assert!(b.v.is_none());

        let off = ModelParams {
            arch: ArchConfig {
                with_msua: false,
                ..arch
            },
            ..m
        };
        let b = forward(&off, &img, None, false, &mut rng::seeded(0)).unwrap();
        assert_eq!(b.y_f, b.y1);
    }

    #[test]
    fn deterministic_pass_ignores_rng() {
        let arch = small(2, 4);
        let m = build_model(&arch, Stage::Ssu, 5).unwrap();
        let img = Tensor::full(vec![1, 1, 16, 16], 0.6f32);
        let u = UncertaintyMaps::zeros(1, 16, 16);
        let a = forward(&m, &img, Some(&u), false, &mut rng::seeded(1)).unwrap();
        let b = forward(&m, &img, Some(&u), false, &mut rng::seeded(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_maps_and_bad_extents() {
        let m = build_model(&small(2, 4), Stage::Ssu, 5).unwrap();
        let img = Tensor::full(vec![1, 1, 16, 16], 0.6f32);
        let e = forward(&m, &img, None, false, &mut rng::seeded(1));
        assert!(matches!(e, Err(Error::Usage(_))));
        let img = Tensor::full(vec![1, 1, 18, 16], 0.6f32);
        let u = UncertaintyMaps::zeros(1, 18, 16);
        let e = forward(&m, &img, Some(&u), false, &mut rng::seeded(1));
        assert!(matches!(e, Err(Error::Config(msg)) if msg.contains('4')));
    }
}
