//! Model assembly, generator pretraining and the alternating encoder /
//! discriminator training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeaturePyramid};
use crate::checkpoint::Checkpoint;
use crate::data::FaceDataset;
use crate::discriminator::{augment_pair, AugmentConfig, DiscriminatorConfig, DualEncoder, PlainDiscriminator};
use crate::error::{Error, Result};
use crate::fusion::PyramidFusion;
use crate::generator::{Generator, GeneratorConfig};
use crate::geometry::{EncoderConfig, ImageBatch};
use crate::losses::{
    adv_d_loss, adv_g_loss, da_loss, id_loss, perceptual_loss, pixel_loss, scalar, sr_regularization,
    total_loss, DaStrategy, LossTerms, LossWeights, RandomConvFeatures, RandomProjectionEmbedder,
};
use crate::map2style::{LatentCodes, Map2Style, Map2StyleConfig, TowerBlockKind};
use crate::metrics::{distribution_gap, evaluate, EvalMetrics};
use crate::nn::{downsample_box, resize_bilinear};
use crate::optim::{Adam, AdamConfig, Optimizer};
use crate::params::{ParamStore, Scope};

/// Downsampling factors drawn in super-resolution mode.
pub const SR_FACTORS: [usize; 6] = [1, 2, 4, 8, 16, 32];

const FEATURE_SEED: u64 = 0x5eed_f00d;
const ID_SEED: u64 = 0x1d_e4b3;
const ID_DIM: usize = 128;
const GAP_SAMPLES: usize = 256;
const GAP_SEED: u64 = 0x6a9_5eed;
const W_AVG_SAMPLES: usize = 1024;

/// Encoder shape apart from the attention windows, which live in [`AblationConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderArch {
    pub patch_size: usize,
    pub input_resolution: usize,
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
}

impl Default for EncoderArch {
    fn default() -> Self {
        let t = EncoderConfig::toy();
        Self {
            patch_size: t.patch_size,
            input_resolution: t.input_resolution,
            stage_dims: t.stage_dims,
            stage_depths: t.stage_depths,
            stage_heads: t.stage_heads,
        }
    }
}

/// One switch per ablation axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub multi_scale_connections: bool,
    pub da_loss: bool,
    pub inversion_discriminator: bool,
    /// Replaces the inversion discriminator with a single-encoder scalar one.
    pub plain_discriminator: bool,
    pub map2style_block: TowerBlockKind,
    pub window_sizes: [usize; 4],
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            multi_scale_connections: true,
            da_loss: true,
            inversion_discriminator: true,
            plain_discriminator: false,
            map2style_block: TowerBlockKind::LearnableQuery,
            window_sizes: [2, 2, 8, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 2e-3,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 64,
            n_eval: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub ablation: AblationConfig,
    /// Degrade inputs by a random factor from [`SR_FACTORS`] and add the mean-style pull.
    pub sr_mode: bool,
    pub da_strategy: DaStrategy,
    /// Style vectors sampled per step as the alignment target.
    pub da_samples: usize,
    pub encoder: EncoderArch,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    /// Evaluate every n steps (0: only after the last step).
    pub eval_every: u64,
    /// Checkpoint every n steps (0: only after the last step).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 4,
            learning_rate: 1e-4,
            weights: LossWeights::default(),
            ablation: AblationConfig::default(),
            sr_mode: false,
            da_strategy: DaStrategy::PerVector,
            da_samples: 8,
            encoder: EncoderArch::default(),
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            eval_every: 100,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.encoder.patch_size,
            stage_dims: self.encoder.stage_dims,
            stage_depths: self.encoder.stage_depths,
            stage_heads: self.encoder.stage_heads,
            stage_window: self.ablation.window_sizes,
            input_resolution: self.encoder.input_resolution,
        }
    }

    pub fn map2style_config(&self) -> Map2StyleConfig {
        let mut m = Map2StyleConfig::for_resolution(self.generator.output_resolution, self.generator.style_dim);
        m.block = self.ablation.map2style_block;
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.da_samples == 0 {
            return Err(Error::Config("da_samples must be ≥ 1".into()));
        }
        self.weights.validate()?;
        self.encoder_config().validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let side = self.encoder.input_resolution;
        if self.generator.output_resolution != side || self.discriminator.resolution != side {
            return Err(Error::Config(format!(
                "encoder input {side}, generator output {} and discriminator input {} must agree",
                self.generator.output_resolution, self.discriminator.resolution
            )));
        }
        self.map2style_config().validate()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad config snapshot: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Backbone, optional multi-scale fusion, and the map2style towers.
#[derive(Debug, Clone)]
pub struct Encoder {
    backbone: Backbone,
    fusion: Option<PyramidFusion>,
    map2style: Map2Style,
}

impl Encoder {
    pub fn new(scope: &Scope, enc: &EncoderConfig, m2s: &Map2StyleConfig, multi_scale: bool) -> Result<Self> {
        let backbone = Backbone::new(&scope.pp("backbone"), enc)?;
        let sides: Vec<usize> = (0..4).map(|i| enc.stage_side(i)).collect();
        let fusion = if multi_scale {
            Some(PyramidFusion::new(&scope.pp("fusion"), &enc.stage_dims, &sides)?)
        } else {
            None
        };
        let map2style = Map2Style::new(&scope.pp("map2style"), m2s, &enc.stage_dims, &sides)?;
        Ok(Self {
            backbone,
            fusion,
            map2style,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn fusion(&self) -> Option<&PyramidFusion> {
        self.fusion.as_ref()
    }

    pub fn map2style(&self) -> &Map2Style {
        &self.map2style
    }

    /// The pyramid the towers read: fused when multi-scale connections are on.
    pub fn pyramid(&self, img: &ImageBatch) -> Result<FeaturePyramid> {
        let pyr = self.backbone.encode_pyramid(img)?;
        match &self.fusion {
            Some(f) => f.fuse(&pyr),
            None => Ok(pyr),
        }
    }

    pub fn encode(&self, img: &ImageBatch) -> Result<LatentCodes> {
        self.map2style.extract_latents(&self.pyramid(img)?)
    }
}

#[derive(Debug, Clone)]
pub enum Critic {
    None,
    Inversion(DualEncoder),
    Plain {
        store: ParamStore,
        disc: PlainDiscriminator,
    },
}

/// Every network of a run plus the stores holding their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: TrainConfig,
    encoder_store: ParamStore,
    encoder: Encoder,
    generator_store: ParamStore,
    generator: Generator,
    critic: Critic,
}

/// Derives independent seeds from a run seed.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Model {
    pub fn build(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dt = DType::F32;
        let encoder_store = ParamStore::new(mix_seed(cfg.seed, 1, 0), dt, device);
        let encoder = Encoder::new(
            &encoder_store.root(),
            &cfg.encoder_config(),
            &cfg.map2style_config(),
            cfg.ablation.multi_scale_connections,
        )?;
        let generator_store = ParamStore::new(mix_seed(cfg.seed, 2, 0), dt, device);
        // Built from the frozen view so the generator never enters the encoder's graph.
        let generator = Generator::new(&generator_store.frozen().root(), &cfg.generator)?;
        let critic = if cfg.ablation.plain_discriminator {
            let store = ParamStore::new(mix_seed(cfg.seed, 4, 0), dt, device);
            let disc = PlainDiscriminator::new(&store.root(), &cfg.discriminator)?;
            Critic::Plain { store, disc }
        } else if cfg.ablation.inversion_discriminator {
            let q = ParamStore::new(mix_seed(cfg.seed, 3, 0), dt, device);
            let k = ParamStore::new(mix_seed(cfg.seed, 3, 1), dt, device);
            Critic::Inversion(DualEncoder::new(&q, &k, &cfg.discriminator)?)
        } else {
            Critic::None
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder_store,
            encoder,
            generator_store,
            generator,
            critic,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_store(&self) -> &ParamStore {
        &self.encoder_store
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_store(&self) -> &ParamStore {
        &self.generator_store
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn device(&self) -> &Device {
        self.encoder_store.device()
    }

    /// Named parameter stores, keyed by checkpoint section.
    pub fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut v = vec![("encoder", &self.encoder_store), ("generator", &self.generator_store)];
        match &self.critic {
            Critic::None => {}
            Critic::Inversion(d) => {
                v.push(("disc.query", d.query_store()));
                v.push(("disc.momentum", d.momentum_store()));
            }
            Critic::Plain { store, .. } => v.push(("disc.plain", store)),
        }
        v
    }

    /// `(section.name, shape)` for every parameter of the run.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<_> = self
            .stores()
            .into_iter()
            .flat_map(|(sec, s)| s.signature().into_iter().map(move |(n, d)| (format!("{sec}.{n}"), d)))
            .collect();
        out.sort();
        out
    }

    pub fn invert(&self, img: &ImageBatch) -> Result<(LatentCodes, ImageBatch)> {
        let codes = self.encoder.encode(img)?.detach();
        let out = self.generator.synthesize(&codes)?;
        Ok((codes, out.detach()))
    }

    pub fn checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(step, self.cfg.seed, self.cfg.to_json()?);
        for (sec, store) in self.stores() {
            ck.insert_store(sec, store)?;
        }
        Ok(ck)
    }

    /// Rebuilds the model described by the checkpoint's config and loads its parameters.
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let cfg = TrainConfig::from_json(&ck.config)?;
        let model = Self::build(&cfg, device)?;
        for (sec, store) in model.stores() {
            ck.load_store(sec, store)?;
        }
        Ok(model)
    }
}

/// Fits the generator as a decoder of the training images: each image owns a
/// learnable latent `z`, mapped to `w` and broadcast to every style input.
/// Returns the per-step reconstruction loss.
pub fn pretrain_generator(model: &Model, data: &FaceDataset) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    let pc = &cfg.pretrain;
    if pc.steps == 0 {
        return Ok(Vec::new());
    }
    let gs = &model.generator_store;
    let live = Generator::new(&gs.root(), &cfg.generator)?;
    let n = data.train().len();
    let zs = ParamStore::new(mix_seed(cfg.seed, 5, 0), gs.dtype(), gs.device());
    let z = zs.root().get((n, cfg.generator.style_dim), "z", crate::params::Init::Normal { std: 1.0 })?;
    let mut g_opt = Adam::new(gs, AdamConfig::with_lr(pc.learning_rate))?;
    let mut z_opt = Adam::new(&zs, AdamConfig::with_lr(pc.learning_rate))?;
    let n_styles = cfg.generator.n_styles();
    let mut losses = Vec::with_capacity(pc.steps as usize);
    for step in 0..pc.steps {
        let idx = data.batch_indices(mix_seed(cfg.seed, 5, 1), step, pc.batch_size);
        let x = data.train_batch(mix_seed(cfg.seed, 5, 1), step, pc.batch_size, gs.dtype(), gs.device())?;
        let rows = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), gs.device())?;
        let w = live.mapping(&z.index_select(&rows, 0)?)?;
        let y = live.synthesize(&LatentCodes::broadcast_w(&w, n_styles)?)?;
        let loss = pixel_loss(y.tensor(), x.tensor())?;
        let l = scalar(&loss)?;
        if !l.is_finite() {
            return Err(Error::NonFinite("pretrain".into()));
        }
        let grads = loss.backward()?;
        g_opt.step(&grads)?;
        z_opt.step(&grads)?;
        losses.push(l);
    }
    Ok(losses)
}

/// Loss components of one step. Disabled or zero-weighted terms are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub pixel: f64,
    pub perceptual: Option<f64>,
    pub id: Option<f64>,
    pub da: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    pub sr_reg: Option<f64>,
    pub total: f64,
    /// Input degradation factor; 1 outside super-resolution mode.
    pub sr_factor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub distribution_gap: f64,
}

/// Everything the encoder objective needs from one forward pass.
pub struct Forward {
    pub input: ImageBatch,
    pub codes: LatentCodes,
    pub output: ImageBatch,
    pub terms: LossTerms,
    pub sr_factor: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FitOutcome {
    pub reports: Vec<LossReport>,
    pub evals: Vec<(u64, EvalReport)>,
}

pub const LOG_HEADER: &str = "step,pixel,perceptual,id,da,adv_g,adv_d,sr_reg,total,sr_factor,\
eval_mse,eval_psnr,eval_ssim,eval_perceptual,distribution_gap";

pub struct Trainer {
    model: Model,
    data: FaceDataset,
    enc_opt: Adam,
    disc_opt: Option<Adam>,
    features: RandomConvFeatures,
    embedder: RandomProjectionEmbedder,
    w_avg: Tensor,
    gap_w: Tensor,
    step: u64,
}

impl Trainer {
    /// Builds a fresh model, pretrains and freezes its generator.
    pub fn new(cfg: &TrainConfig, data: FaceDataset, device: &Device) -> Result<Self> {
        let model = Model::build(cfg, device)?;
        pretrain_generator(&model, &data)?;
        Self::with_model(model, data)
    }

    /// Trains the encoder of an existing model from step 0.
    pub fn with_model(model: Model, data: FaceDataset) -> Result<Self> {
        let cfg = model.cfg.clone();
        if data.side() != cfg.encoder.input_resolution {
            return Err(Error::Config(format!(
                "dataset side {} does not match encoder input {}",
                data.side(),
                cfg.encoder.input_resolution
            )));
        }
        let dev = model.device().clone();
        let opt = || AdamConfig::with_lr(cfg.learning_rate);
        let enc_opt = Adam::new(&model.encoder_store, opt())?;
        let disc_opt = match &model.critic {
            Critic::None => None,
            Critic::Inversion(d) => Some(Adam::new(d.query_store(), opt())?),
            Critic::Plain { store, .. } => Some(Adam::new(store, opt())?),
        };
        let w_avg = model.generator.mean_w(W_AVG_SAMPLES, mix_seed(cfg.seed, 6, 0))?;
        let gap_w = model.generator.sample_w(GAP_SAMPLES, GAP_SEED)?;
        Ok(Self {
            features: RandomConvFeatures::new(FEATURE_SEED, DType::F32, &dev)?,
            embedder: RandomProjectionEmbedder::new(ID_SEED, ID_DIM, DType::F32, &dev)?,
            model,
            data,
            enc_opt,
            disc_opt,
            w_avg,
            gap_w,
            step: 0,
        })
    }

    /// Restores model, optimizer state and step counter.
    pub fn resume(ck: &Checkpoint, data: FaceDataset, device: &Device) -> Result<Self> {
        let model = Model::from_checkpoint(ck, device)?;
        let mut t = Self::with_model(model, data)?;
        let steps = |key: &str| -> Result<u64> {
            ck.meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{key}`")))
        };
        t.enc_opt.load_state(steps("optim_encoder_steps")?, &ck.section("optim.encoder"))?;
        if let Some(d) = t.disc_opt.as_mut() {
            d.load_state(steps("optim_disc_steps")?, &ck.section("optim.disc"))?;
        }
        t.step = ck.step;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.cfg
    }

    pub fn data(&self) -> &FaceDataset {
        &self.data
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Changes the step count [`Trainer::fit`] runs up to, e.g. to extend a resumed run.
    pub fn set_total_steps(&mut self, steps: u64) -> Result<()> {
        if steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        self.model.cfg.steps = steps;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.checkpoint(self.step)?;
        let (n, st) = self.enc_opt.state();
        ck.insert_section("optim.encoder", st);
        ck.meta.insert("optim_encoder_steps".into(), n.to_string());
        if let Some(d) = &self.disc_opt {
            let (n, st) = d.state();
            ck.insert_section("optim.disc", st);
            ck.meta.insert("optim_disc_steps".into(), n.to_string());
        }
        Ok(ck)
    }

    fn sr_factor(&self, step: u64) -> usize {
        if !self.model.cfg.sr_mode {
            return 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.model.cfg.seed, 7, step));
        SR_FACTORS[rng.random_range(0..SR_FACTORS.len())]
    }

    /// Degrades `x` by box-downsampling and bilinear upsampling back.
    pub fn degrade(x: &ImageBatch, factor: usize) -> Result<ImageBatch> {
        if factor == 1 {
            return Ok(x.clone());
        }
        let side = x.side();
        let small = downsample_box(x.tensor(), factor)?;
        ImageBatch::new(resize_bilinear(&small, side, side, false)?)
    }

    /// Encoder objective terms for `x` at `step`, using the current parameters.
    pub fn forward(&self, x: &ImageBatch, step: u64) -> Result<Forward> {
        let cfg = &self.model.cfg;
        let w = &cfg.weights;
        let sr_factor = self.sr_factor(step);
        let input = Self::degrade(x, sr_factor)?;
        let codes = self.model.encoder.encode(&input)?;
        let output = self.model.generator.synthesize(&codes)?;
        let (y, t) = (output.tensor(), x.tensor());
        let mut terms = LossTerms::pixel_only(pixel_loss(y, t)?);
        if w.lpips > 0.0 {
            terms.perceptual = Some(perceptual_loss(y, t, &self.features)?);
        }
        if w.id > 0.0 {
            terms.id = Some(id_loss(y, t, &self.embedder)?);
        }
        if cfg.ablation.da_loss && w.da > 0.0 {
            let target = self
                .model
                .generator
                .sample_w(cfg.da_samples, mix_seed(cfg.seed, 8, step))?
                .detach();
            terms.da = Some(da_loss(&codes, &target, cfg.da_strategy)?);
        }
        if w.adv > 0.0 {
            terms.adv = match &self.model.critic {
                Critic::None => None,
                Critic::Inversion(d) => {
                    let (fa, ra) = augment_pair(&output, x, mix_seed(cfg.seed, 9, step), &cfg.augment)?;
                    Some(adv_g_loss(&d.score(&fa, &ra)?)?)
                }
                Critic::Plain { disc, .. } => Some(adv_g_loss(&disc.score(&output)?)?),
            };
        }
        if cfg.sr_mode && w.sr_reg > 0.0 {
            terms.sr_reg = Some(sr_regularization(&codes, &self.w_avg)?);
        }
        Ok(Forward {
            input,
            codes,
            output,
            terms,
            sr_factor,
        })
    }

    /// One encoder update, one discriminator update, then the momentum update.
    pub fn train_step(&mut self, x: &ImageBatch) -> Result<LossReport> {
        let step = self.step + 1;
        let cfg = self.model.cfg.clone();
        let fwd = self.forward(x, step)?;
        let total = total_loss(&fwd.terms, &cfg.weights)?;
        let total_v = check_finite(&total, "total")?;
        let grads = total.backward()?;
        self.enc_opt.step(&grads)?;
        drop(grads);

        let fake = fwd.output.detach();
        let adv_d = match (&self.model.critic, self.disc_opt.as_mut()) {
            (Critic::Inversion(d), Some(opt)) => {
                let (ra, rb) = augment_pair(x, x, mix_seed(cfg.seed, 10, step), &cfg.augment)?;
                let (fa, fb) = augment_pair(&fake, x, mix_seed(cfg.seed, 11, step), &cfg.augment)?;
                let loss = adv_d_loss(&d.score(&ra, &rb)?, &d.score(&fa, &fb)?)?;
                let v = check_finite(&loss, "adv_d")?;
                opt.step(&loss.backward()?)?;
                d.momentum_update()?;
                Some(v)
            }
            (Critic::Plain { disc, .. }, Some(opt)) => {
                let loss = adv_d_loss(&disc.score(x)?, &disc.score(&fake)?)?;
                let v = check_finite(&loss, "adv_d")?;
                opt.step(&loss.backward()?)?;
                Some(v)
            }
            _ => None,
        };
        let val = |t: &Option<Tensor>| t.as_ref().map(scalar).transpose();
        let report = LossReport {
            step,
            pixel: scalar(&fwd.terms.pixel)?,
            perceptual: val(&fwd.terms.perceptual)?,
            id: val(&fwd.terms.id)?,
            da: val(&fwd.terms.da)?,
            adv_g: val(&fwd.terms.adv)?,
            adv_d,
            sr_reg: val(&fwd.terms.sr_reg)?,
            total: total_v,
            sr_factor: fwd.sr_factor,
        };
        self.step = step;
        Ok(report)
    }

    /// Metrics of the current encoder on `images`.
    pub fn evaluate_on(&self, images: &[Vec<u8>]) -> Result<EvalReport> {
        let x = FaceDataset::images(images, self.data.side(), DType::F32, self.model.device())?;
        let (codes, y) = self.model.invert(&x)?;
        Ok(EvalReport {
            metrics: evaluate(&x, &y, &self.features)?,
            distribution_gap: distribution_gap(&codes, &self.gap_w)?,
        })
    }

    /// Evaluation images, or the training images when no evaluation split exists.
    pub fn evaluate(&self) -> Result<EvalReport> {
        if self.data.eval().is_empty() {
            self.evaluate_on(self.data.train())
        } else {
            self.evaluate_on(self.data.eval())
        }
    }

    /// Runs until `steps` steps are complete. With `out_dir`, appends one CSV
    /// row per step to `metrics.csv` and writes `step-NNNNNN.ckpt` files plus
    /// `last.ckpt`.
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<FitOutcome> {
        let cfg = self.model.cfg.clone();
        let mut log = match out_dir {
            Some(dir) => Some(MetricLog::open(dir)?),
            None => None,
        };
        let mut outcome = FitOutcome::default();
        let dev = self.model.device().clone();
        while self.step < cfg.steps {
            let next = self.step + 1;
            let x = self.data.train_batch(cfg.seed, self.step, cfg.batch_size, DType::F32, &dev)?;
            let report = self.train_step(&x)?;
            let last = next == cfg.steps;
            let eval = if last || (cfg.eval_every > 0 && next % cfg.eval_every == 0) {
                let e = self.evaluate()?;
                outcome.evals.push((next, e));
                Some(e)
            } else {
                None
            };
            if let Some(log) = log.as_mut() {
                log.append(&report, eval.as_ref())?;
            }
            if let Some(dir) = out_dir {
                if last || (cfg.checkpoint_every > 0 && next % cfg.checkpoint_every == 0) {
                    let ck = self.checkpoint()?;
                    ck.save(&dir.join(format!("step-{next:06}.ckpt")))?;
                    ck.save(&dir.join("last.ckpt"))?;
                }
            }
            outcome.reports.push(report);
        }
        Ok(outcome)
    }
}

fn check_finite(t: &Tensor, name: &str) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(v)
}

struct MetricLog {
    path: PathBuf,
    file: std::fs::File,
}

impl MetricLog {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path, file })
    }

    fn append(&mut self, r: &LossReport, e: Option<&EvalReport>) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut row = vec![
            r.step.to_string(),
            r.pixel.to_string(),
            opt(r.perceptual),
            opt(r.id),
            opt(r.da),
            opt(r.adv_g),
            opt(r.adv_d),
            opt(r.sr_reg),
            r.total.to_string(),
            r.sr_factor.to_string(),
        ];
        match e {
            Some(e) => row.extend([
                e.metrics.mse.to_string(),
                e.metrics.psnr.to_string(),
                e.metrics.ssim.to_string(),
                e.metrics.perceptual.to_string(),
                e.distribution_gap.to_string(),
            ]),
            None => row.extend(std::iter::repeat_n(String::new(), 5)),
        }
        writeln!(self.file, "{}", row.join(",")).map_err(|e| Error::io(&self.path, e))
    }
}
