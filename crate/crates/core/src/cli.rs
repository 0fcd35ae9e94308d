//! Command-line front end: `synth`, `train`, `predict`, `eval`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::ArchConfig;
use crate::checkpoint;
use crate::data::{self, Split, SynthKind, SynthSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{self, ImageMetrics, MetricReport};
use crate::pipeline;
use crate::rng::{self, tags};
use crate::tensor::Tensor;
use crate::training::{self, TrainConfig};
use crate::uncertainty;

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const MAPS_DIR: &str = "maps";

#[derive(Debug, Parser)]
#[command(name = "ssunet", version, about = "Uncertainty-aware segmentation of elongated structures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset in the train/val/test directory layout.
    Synth(SynthArgs),
    /// Train the stage-1 Bayesian network, SSU-Net, or both.
    Train(TrainArgs),
    /// Run MC inference and export probabilities, masks, uncertainty maps and overlays.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SynthKind::Vessel)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.25,0.25")]
    pub split_fractions: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageSel {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

/// Overrides for the `[arch]` section.
#[derive(Debug, Default, Args)]
pub struct ArchFlags {
    /// [default: 1]
    #[arg(long)]
    pub in_channels: Option<usize>,
    /// Channels of the first encoder block [default: 16]
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Number of downsampling steps [default: 3]
    #[arg(long)]
    pub depth: Option<usize>,
    /// [default: 0.5]
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    /// Disable the uncertainty attention block
    #[arg(long)]
    pub no_gsua: bool,
    /// Disable multi-scale fusion (the final output is the full-resolution head)
    #[arg(long)]
    pub no_msua: bool,
    /// Odd Gaussian softening window of the attention [default: 5]
    #[arg(long)]
    pub gsua_ksize: Option<usize>,
    /// [default: 1.0]
    #[arg(long)]
    pub gsua_sigma: Option<f64>,
}

/// Overrides for the `[train]` section.
#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    /// [default: 2e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// [default: 1e-8]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 0.99]
    #[arg(long)]
    pub rms_decay: Option<f64>,
    /// [default: 1e-8]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Four comma-separated weights α1,α2,α3,αF [default: 1,1,1,1]
    #[arg(long, value_delimiter = ',', value_name = "A1,A2,A3,AF")]
    pub loss_weights: Option<Vec<f64>>,
    /// Enable random shift/scale augmentation [default: off]
    #[arg(long)]
    pub augment: bool,
    /// MC passes for the stage-1 training maps [default: 16]
    #[arg(long)]
    pub n_mc_train: Option<usize>,
    /// Noise draws in the stage-1 loss [default: 8]
    #[arg(long)]
    pub hetero_samples: Option<usize>,
    /// Stop each stage after this many optimizer steps [default: none]
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with train/{images,masks}.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with [arch], [train] and [infer] sections; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StageSel::Both)]
    pub stage: StageSel,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub arch: ArchFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint_s1: PathBuf,
    #[arg(long)]
    pub checkpoint_s2: PathBuf,
    /// A PNG file, a directory of PNGs, or a split directory with images/ and masks/.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Ground-truth masks for the overlays (found automatically next to images/).
    #[arg(long)]
    pub gt_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stochastic passes per stage [default: 16]
    #[arg(long)]
    pub n_passes: Option<usize>,
    /// Probability threshold for the binary mask [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted masks (a predict output directory or its masks/ folder).
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Ground-truth masks (a split directory or its masks/ folder).
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Where to write the JSON report.
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
}

/// Inference settings, the `[infer]` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub n_passes: usize,
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            n_passes: 16,
            threshold: metrics::DEFAULT_THRESHOLD,
        }
    }
}

/// Contents of a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {}", path.display(), one_line(&e.to_string()))))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    fn apply_arch(&mut self, f: &ArchFlags) {
        let a = &mut self.arch;
        set(&mut a.in_channels, f.in_channels);
        set(&mut a.base_width, f.base_width);
        set(&mut a.depth, f.depth);
        set(&mut a.dropout_rate, f.dropout_rate);
        set(&mut a.gsua_ksize, f.gsua_ksize);
        set(&mut a.gsua_sigma, f.gsua_sigma);
        if f.no_gsua {
            a.with_gsua = false;
        }
        if f.no_msua {
            a.with_msua = false;
        }
    }

    fn apply_train(&mut self, f: &TrainFlags) -> Result<()> {
        let t = &mut self.train;
        set(&mut t.lr, f.lr);
        set(&mut t.momentum, f.momentum);
        set(&mut t.weight_decay, f.weight_decay);
        set(&mut t.rms_decay, f.rms_decay);
        set(&mut t.epsilon, f.epsilon);
        set(&mut t.epochs, f.epochs);
        set(&mut t.batch_size, f.batch_size);
        if let Some(w) = &f.loss_weights {
            if w.len() != 4 {
                return Err(Error::usage(format!("--loss-weights takes 4 values, got {}", w.len())));
            }
            t.loss_weights.copy_from_slice(w);
        }
        if f.augment {
            t.augment = true;
        }
        set(&mut t.n_mc_train, f.n_mc_train);
        set(&mut t.hetero_samples, f.hetero_samples);
        if f.max_steps.is_some() {
            t.max_steps = f.max_steps;
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

// -- synth ------------------------------------------------------------------

/// Per-split counts; val and test are rounded, train takes the remainder.
pub fn split_counts(count: usize, fractions: &[f64]) -> Result<[usize; 3]> {
    let ok = fractions.len() == 3
        && fractions.iter().all(|f| (0.0..=1.0).contains(f))
        && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-6;
    if !ok {
        return Err(Error::usage(format!(
            "split fractions must be three values in [0, 1] summing to 1, got {fractions:?}"
        )));
    }
    let val = ((count as f64 * fractions[1]).round() as usize).min(count);
    let test = ((count as f64 * fractions[2]).round() as usize).min(count - val);
    Ok([count - val - test, val, test])
}

pub fn cmd_synth(args: &SynthArgs) -> Result<[usize; 3]> {
    let counts = split_counts(args.count, &args.split_fractions)?;
    let spec = SynthSpec::for_kind(args.kind, args.size);
    spec.validate()?;
    let mut k = 0;
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        // Create the split even when it is empty, so loaders see the layout.
        for sub in ["images", "masks"] {
            let dir = args.out_dir.join(split.as_str()).join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for _ in 0..n {
            let mut sample = data::gen_synthetic(&spec, rng::derive_seed(args.seed, k as u64))?;
            sample.id = format!("{}_{k:04}", args.kind.as_str());
            data::save_sample(&args.out_dir, *split, &sample)?;
            k += 1;
        }
    }
    Ok(counts)
}

// -- train ------------------------------------------------------------------

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    cfg.apply_arch(&args.arch);
    cfg.apply_train(&args.train)?;
    cfg.arch.validate()?;
    cfg.train.validate()?;
    let dataset = data::load_dataset(&args.data_dir, Split::Train, cfg.arch.divisor())?;
    if dataset.is_empty() {
        return Err(Error::usage(format!(
            "no training images under {}",
            args.data_dir.join("train").display()
        )));
    }
    let out = &args.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stage_name = match args.stage {
        StageSel::One => "1",
        StageSel::Two => "2",
        StageSel::Both => "both",
    };
    write_file(
        &out.join("config.toml"),
        format!(
            "# ssunet train --stage {stage_name} --seed {}\n{}",
            args.seed,
            cfg.to_toml()
        ),
    )?;

    let maps = if args.stage == StageSel::Two {
        let ckpt = out.join(STAGE1_CHECKPOINT);
        if !ckpt.exists() {
            return Err(Error::usage(format!(
                "stage 2 needs stage-1 artifacts; {} not found (run --stage 1 or --stage both)",
                ckpt.display()
            )));
        }
        let ids: Vec<&str> = dataset.iter().map(|s| s.id.as_str()).collect();
        training::load_maps(&out.join(MAPS_DIR), &ids)?
    } else {
        let s1 = training::train_stage1(&dataset, &cfg.train, &cfg.arch, args.seed)?;
        checkpoint::save(&s1.params, &out.join(STAGE1_CHECKPOINT))?;
        training::save_maps(&s1.maps, &out.join(MAPS_DIR))?;
        training::write_log(&s1.log, &out.join("stage1_log.csv"))?;
        s1.maps
    };
    if args.stage != StageSel::One {
        let seed = rng::derive_seed(args.seed, tags::STAGE2);
        let s2 = training::train_stage2(&dataset, &maps, &cfg.train, &cfg.arch, seed)?;
        checkpoint::save(&s2.params, &out.join(STAGE2_CHECKPOINT))?;
        training::write_log(&s2.log, &out.join("stage2_log.csv"))?;
    }
    Ok(())
}

// -- predict ----------------------------------------------------------------

/// Inputs as `(stem, image path)` plus the mask directory, if one is known.
fn predict_inputs(input: &Path, gt_dir: Option<&Path>) -> Result<(BTreeMap<String, PathBuf>, Option<PathBuf>)> {
    if input.is_file() {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::ingestion(format!("{}: unusable file name", input.display())))?;
        return Ok((
            BTreeMap::from([(stem.to_owned(), input.to_path_buf())]),
            gt_dir.map(Path::to_path_buf),
        ));
    }
    if !input.is_dir() {
        return Err(Error::ingestion(format!("{} does not exist", input.display())));
    }
    let (images, auto_gt) = if input.join("images").is_dir() {
        (input.join("images"), Some(input.join("masks")).filter(|m| m.is_dir()))
    } else {
        (input.to_path_buf(), None)
    };
    let stems = data::png_stems(&images)?;
    if stems.is_empty() {
        return Err(Error::ingestion(format!("no PNG images in {}", images.display())));
    }
    Ok((stems, gt_dir.map(Path::to_path_buf).or(auto_gt)))
}

/// Colour overlay: ground-truth-only red, prediction-only green, overlap
/// yellow, the grayscale image elsewhere.
pub fn overlay(image: &Tensor<f32>, pred: &metrics::Mask, gt: Option<&metrics::Mask>) -> [Vec<f32>; 3] {
    let mut planes = [Vec::new(), Vec::new(), Vec::new()];
    for (i, &v) in image.data().iter().enumerate() {
        let p = pred.bits()[i];
        let g = gt.is_some_and(|m| m.bits()[i]);
        let rgb = match (p, g) {
            (true, true) => [1.0, 1.0, 0.0],
            (false, true) => [1.0, 0.0, 0.0],
            (true, false) => [0.0, 1.0, 0.0],
            (false, false) => [v, v, v],
        };
        for (plane, c) in planes.iter_mut().zip(rgb) {
            plane.push(c);
        }
    }
    planes
}

pub fn cmd_predict(args: &PredictArgs) -> Result<usize> {
    let mut infer = RunConfig::load(args.config.as_deref())?.infer;
    set(&mut infer.n_passes, args.n_passes);
    set(&mut infer.threshold, args.threshold);
    if infer.n_passes < 1 {
        return Err(Error::usage("n_passes must be >= 1"));
    }
    let s1 = checkpoint::load(&args.checkpoint_s1)?;
    let s2 = checkpoint::load(&args.checkpoint_s2)?;
    pipeline::check_pair(&s1, &s2)?;
    let (inputs, gt_dir) = predict_inputs(&args.input, args.gt_dir.as_deref())?;
    let out = &args.out_dir;

    for (k, (stem, path)) in inputs.iter().enumerate() {
        let image = io::read_image(path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        s2.arch.check_input(h, w)?;
        let batch = image.clone().reshape(vec![1, 1, h, w])?;
        let pred = pipeline::predict(&s1, &s2, &batch, infer.n_passes, rng::derive_seed(args.seed, k as u64))?;
        let prob = pred.prob.clone().reshape(vec![1, h, w])?;
        let mask = metrics::binarize(&prob, infer.threshold)?;

        io::write_image(&prob, &out.join("prob").join(format!("{stem}.png")))?;
        io::write_raw(&prob, &out.join("prob").join(format!("{stem}.f32")))?;
        io::write_image(&mask.to_tensor(), &out.join("masks").join(format!("{stem}.png")))?;
        for (dir, map) in [
            ("uncertainty", &pred.u_e_prime),
            ("stage1_ue", &pred.stage1.u_e),
            ("stage1_ua", &pred.stage1.u_a),
        ] {
            let d = out.join(dir);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            uncertainty::export_map(map, &d, stem)?;
        }

        let gt = match &gt_dir {
            Some(dir) => {
                let p = dir.join(format!("{stem}.png"));
                if p.exists() {
                    let g = io::read_image(&p)?;
                    g.expect_same_shape(&image).map_err(|_| {
                        Error::ingestion(format!("{stem}: ground truth does not match the image size"))
                    })?;
                    Some(metrics::binarize(&g, 0.5)?)
                } else {
                    None
                }
            }
            None => None,
        };
        let planes = overlay(&image, &mask, gt.as_ref());
        io::write_rgb(
            [&planes[0], &planes[1], &planes[2]],
            h,
            w,
            &out.join("overlay").join(format!("{stem}.png")),
        )?;
    }
    write_file(
        &out.join("predict.toml"),
        format!(
            "# ssunet predict --seed {}\n{}",
            args.seed,
            toml::to_string(&infer).expect("infer config serialises")
        ),
    )?;
    Ok(inputs.len())
}

// -- eval -------------------------------------------------------------------

fn masks_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("masks");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(Error::usage(format!("threshold must lie in (0, 1), got {}", args.threshold)));
    }
    let pred = data::png_stems(&masks_dir(&args.pred_dir))?;
    let gt = data::png_stems(&masks_dir(&args.gt_dir))?;
    if !pred.keys().any(|s| gt.contains_key(s)) {
        return Err(Error::usage(format!(
            "no common stems between {} and {}",
            args.pred_dir.display(),
            args.gt_dir.display()
        )));
    }
    let unmatched: Vec<&str> = pred
        .keys()
        .filter(|s| !gt.contains_key(*s))
        .chain(gt.keys().filter(|s| !pred.contains_key(*s)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::ingestion(format!("unmatched stems: {}", unmatched.join(", "))));
    }
    let mut per_image = Vec::with_capacity(pred.len());
    for (stem, p) in &pred {
        let pm = metrics::binarize(&io::read_image(p)?, args.threshold)?;
        let gm = metrics::binarize(&io::read_image(&gt[stem])?, 0.5)?;
        if pm.shape() != gm.shape() {
            return Err(Error::ingestion(format!("{stem}: prediction and ground truth differ in size")));
        }
        per_image.push(ImageMetrics::compute(stem.clone(), &pm, &gm)?);
    }
    let report = MetricReport::from_images(per_image, args.threshold);
    write_file(&args.out, report.to_json() + "\n")?;
    Ok(report)
}

// -- entry point ------------------------------------------------------------

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let [tr, va, te] = cmd_synth(&a)?;
            eprintln!("wrote {tr} train, {va} val, {te} test samples to {}", a.out_dir.display());
        }
        Command::Train(a) => {
            cmd_train(&a)?;
            eprintln!("checkpoints written to {}", a.out_dir.display());
        }
        Command::Predict(a) => {
            let n = cmd_predict(&a)?;
            eprintln!("predicted {n} images into {}", a.out_dir.display());
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

/// Parse arguments and run, returning the process exit code. Errors are
/// reported on one stderr line as `error[<category>]: <message>`.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = one_line(&e.render().to_string());
            let msg = msg.trim_start_matches("error: ");
            let msg = msg.split(" For more information").next().unwrap_or(msg);
            eprintln!("error[usage]: {msg}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e.to_string()));
            e.exit_code()
        }
    }
}
