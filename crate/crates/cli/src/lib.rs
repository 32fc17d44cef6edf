//! Command implementations behind the `wplus` binary.

pub mod io;

use std::path::Path;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device, Tensor};
use serde_json::json;
use wplus_core::checkpoint::Checkpoint;
use wplus_core::data::FaceDataset;
use wplus_core::generator::style_mix;
use wplus_core::geometry::ImageBatch;
use wplus_core::map2style::LatentCodes;
use wplus_core::metrics;
use wplus_core::trainer::{Model, TrainConfig, Trainer};

pub fn load_model(checkpoint: &Path) -> Result<Model> {
    let ck = Checkpoint::load(checkpoint, &Device::Cpu)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    Ok(Model::from_checkpoint(&ck, &Device::Cpu)?)
}

fn load_input(model: &Model, path: &Path) -> Result<ImageBatch> {
    let img = io::read_image(path)?;
    let want = model.config().encoder.input_resolution;
    if img.side() != want {
        bail!(
            "image {} is {s}x{s} but the checkpoint expects {want}x{want}",
            path.display(),
            s = img.side()
        );
    }
    Ok(img)
}

fn dims(model: &Model) -> (usize, usize) {
    let g = &model.config().generator;
    (g.n_styles(), g.style_dim)
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub resume: Option<&'a Path>,
}

/// Trains from a config file (defaults when absent) or resumes a checkpoint,
/// writing `metrics.csv` and checkpoints into `out`.
pub fn train(args: TrainArgs) -> Result<()> {
    let dev = Device::Cpu;
    let mut trainer = match args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path, &dev).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
            let cfg = TrainConfig::from_json(&ck.config)?;
            Trainer::resume(&ck, dataset(&cfg)?, &dev)?
        }
        None => {
            let mut cfg = match args.config {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
                    TrainConfig::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))?
                }
                None => TrainConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            Trainer::new(&cfg, dataset(&cfg)?, &dev)?
        }
    };
    if let Some(steps) = args.steps {
        trainer.set_total_steps(steps)?;
    }
    std::fs::create_dir_all(args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let outcome = trainer.fit(Some(args.out))?;
    if let Some((step, e)) = outcome.evals.last() {
        eprintln!(
            "step {step}: mse {:.5} psnr {:.2} ssim {:.4} gap {:.5}",
            e.metrics.mse, e.metrics.psnr, e.metrics.ssim, e.distribution_gap
        );
    }
    Ok(())
}

fn dataset(cfg: &TrainConfig) -> Result<FaceDataset> {
    Ok(FaceDataset::generate(
        cfg.data.seed,
        cfg.data.n_train,
        cfg.data.n_eval,
        cfg.encoder.input_resolution,
    )?)
}

pub fn invert(checkpoint: &Path, input: &Path, out: &Path, codes_out: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (codes, img) = model.invert(&load_input(&model, input)?)?;
    io::write_image(out, &img)?;
    if let Some(p) = codes_out {
        io::write_codes(p, &codes)?;
    }
    Ok(())
}

pub fn synthesize(checkpoint: &Path, codes: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (n, d) = dims(&model);
    let codes = io::read_codes(codes, n, d)?;
    io::write_image(out, &model.generator().synthesize(&codes)?)
}

/// `codes + alpha · direction`, computed in f32.
pub fn apply_direction(codes: &LatentCodes, direction: &Tensor, alpha: f32) -> Result<LatentCodes> {
    let step = (direction.to_dtype(DType::F32)? * alpha as f64)?.unsqueeze(0)?;
    let c = codes.tensor().to_dtype(DType::F32)?;
    Ok(LatentCodes::new(c.broadcast_add(&step)?)?)
}

pub fn edit(
    checkpoint: &Path,
    input: &Path,
    direction: &Path,
    alpha: f32,
    out: &Path,
    codes_out: Option<&Path>,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (n, d) = dims(&model);
    let dir = io::read_direction(direction, n, d)?;
    let codes = model.encoder().encode(&load_input(&model, input)?)?.detach();
    let edited = apply_direction(&codes, &dir, alpha)?;
    io::write_image(out, &model.generator().synthesize(&edited)?)?;
    if let Some(p) = codes_out {
        io::write_codes(p, &edited)?;
    }
    Ok(())
}

/// Parses `8-13`, `8,9,10` or a mix such as `0,8-9`. An empty string is no layers.
pub fn parse_layers(spec: &str) -> std::result::Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("`{s}` is not a layer index"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty layer range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn mix(checkpoint: &Path, a: &Path, b: &Path, layers: &[usize], out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let ca = model.encoder().encode(&load_input(&model, a)?)?.detach();
    let cb = model.encoder().encode(&load_input(&model, b)?)?.detach();
    let mixed = style_mix(&ca, &cb, layers)?;
    io::write_image(out, &model.generator().synthesize(&mixed)?)
}

pub fn super_resolve(checkpoint: &Path, input: &Path, factor: usize, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let x = load_input(&model, input)?;
    if factor == 0 || !factor.is_power_of_two() || factor > x.side() {
        bail!("factor must be a power of two between 1 and {}", x.side());
    }
    let low = Trainer::degrade(&x, factor)?;
    let (_, img) = model.invert(&low)?;
    io::write_image(out, &img)
}

/// Channel-mean absolute difference per pixel, min-max normalized to `[0, 1]`.
/// A constant difference map becomes all zeros.
pub fn diff_heatmap(x: &ImageBatch, y: &ImageBatch) -> Result<Vec<f64>> {
    let d = (x.tensor() - y.tensor())?.abs()?.mean(1)?.get(0)?.to_dtype(DType::F64)?;
    let v = d.flatten_all()?.to_vec1::<f64>()?;
    Ok(min_max(&v))
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

pub fn heatmap(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let x = load_input(&model, input)?;
    let (_, y) = model.invert(&x)?;
    io::write_gray(out, &diff_heatmap(&x, &y)?, x.side())
}

/// Attention received per token in `stage`, averaged over its attention
/// blocks, normalized and upscaled to the input side by pixel replication.
pub fn attention_map(checkpoint: &Path, input: &Path, stage: usize, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let x = load_input(&model, input)?;
    let maps = model.encoder().backbone().attention_maps(&x, stage)?;
    if maps.is_empty() {
        bail!("stage {stage} has no attention blocks");
    }
    let mean = (Tensor::stack(&maps, 0)?.mean(0)?.get(0)?).to_dtype(DType::F64)?;
    let grid = mean.to_vec2::<f64>()?;
    let g = grid.len();
    let side = x.side();
    let scale = side / g;
    let mut vals = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            vals.push(grid[py / scale][px / scale]);
        }
    }
    io::write_gray(out, &min_max(&vals), side)
}

/// MSE, PSNR and SSIM between two images, as a JSON object. Identical
/// images report PSNR as the string `"inf"`.
pub fn compare(a: &Path, b: &Path) -> Result<String> {
    let (x, y) = (io::read_image(a)?, io::read_image(b)?);
    if x.side() != y.side() {
        bail!("images differ in size: {} vs {}", x.side(), y.side());
    }
    let mse = metrics::mse(&x, &y)?;
    let psnr = metrics::psnr_from_mse(mse);
    let psnr = if psnr.is_finite() { json!(psnr) } else { json!("inf") };
    Ok(json!({ "mse": mse, "psnr": psnr, "ssim": metrics::ssim(&x, &y)? }).to_string())
}
