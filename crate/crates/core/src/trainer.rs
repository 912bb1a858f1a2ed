//! Adam optimization, the alternating GAN training loop, inference, the
//! overfit smoke harness, and the flat `key = value` config format.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    from_model_range, load_triplet, save_gray_png, save_rgb_png, to_model_range, ShadowTriplet,
    TripletPaths,
};
use crate::error::{Error, Result};
use crate::losses::{
    attention_loss, attention_steps_loss, cgan_d_loss, cgan_g_loss, l1_weighted, total_loss,
    AttentionLossMode, GeneratorGanLoss, L1Denominator, LossBreakdown, LossWeights,
};
use crate::metrics::{evaluate_pair, MetricsReport};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Training hyperparameters. Defaults follow the published protocol
/// (lr 4e-4, batch 1, 200 epochs, Adam with beta2 = 0.999); beta1 = 0.5 is
/// the usual conditional-GAN choice.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epochs: usize,
    /// Optional hard cap on optimization steps across all epochs.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub l1_channel_weights: [f32; 3],
    pub attention_mode: AttentionLossMode,
    pub generator_gan_loss: GeneratorGanLoss,
    pub l1_denominator: L1Denominator,
    /// Supervise every progressive attention map (vs only the final one).
    pub supervise_all_steps: bool,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = only the final one).
    pub checkpoint_interval: usize,
    /// Square training resolution images are resized to.
    pub image_size: usize,
    /// Evaluate this many held-out triplets at each epoch end (0 = off).
    pub eval_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 200,
            max_steps: None,
            batch_size: 1,
            weights: LossWeights::default(),
            l1_channel_weights: [1.0; 3],
            attention_mode: AttentionLossMode::Mean,
            generator_gan_loss: GeneratorGanLoss::NonSaturating,
            l1_denominator: L1Denominator::FourHw,
            supervise_all_steps: true,
            seed: 0,
            checkpoint_interval: 0,
            image_size: 256,
            eval_subset: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1/beta2 must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_EPS: f32 = 1e-8;

/// Standard Adam with bias correction; moment buffers are allocated lazily
/// per parameter.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32, beta1: f32, beta2: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            t: 0,
            m: (0..store.len()).map(|_| None).collect(),
            v: (0..store.len()).map(|_| None).collect(),
        }
    }

    /// One bias-corrected update over `ids`, reading each parameter's
    /// accumulated grad. Non-finite gradients abort, naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for id in ids {
            let p = store.get(*id);
            if !p.grad.all_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    name: p.name.clone(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in ids {
            let idx = id.0;
            let p = store.get_mut(*id);
            let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((w, g), (m, v)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Triplet sources
// ---------------------------------------------------------------------------

/// Anything the loop can draw supervision triplets from.
pub trait TripletSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<ShadowTriplet>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct InMemorySource(pub Vec<ShadowTriplet>);

impl TripletSource for InMemorySource {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn get(&self, i: usize) -> Result<ShadowTriplet> {
        Ok(self.0[i].clone())
    }
}

/// Lazily decodes triplets from an index, resizing to a square resolution.
pub struct FileSource<'a> {
    pub paths: &'a [TripletPaths],
    pub size: Option<(usize, usize)>,
}

impl TripletSource for FileSource<'_> {
    fn len(&self) -> usize {
        self.paths.len()
    }
    fn get(&self, i: usize) -> Result<ShadowTriplet> {
        load_triplet(&self.paths[i], self.size)
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Per-run record: every step's loss breakdown and optional per-epoch
/// held-out metrics. Wall-clock time is tracked separately from the
/// reproducible fields.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub history: Vec<LossBreakdown>,
    pub evals: Vec<MetricsReport>,
    pub wall_ms: u128,
}

fn stack_batch(parts: Vec<Tensor>) -> Result<Tensor> {
    let first = parts[0].shape();
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in &parts {
        if p.shape() != first {
            return Err(Error::ShapeMismatch {
                context: "batch stacking",
                lhs: first.to_string(),
                rhs: p.shape().to_string(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(Shape::new(parts.len() * first.n, first.c, first.h, first.w), data)
}

struct Batch {
    shadow: Tensor,
    free: Tensor,
    mask: Tensor,
}

fn assemble_batch(triplets: &[ShadowTriplet]) -> Result<Batch> {
    Ok(Batch {
        shadow: stack_batch(triplets.iter().map(|t| to_model_range(&t.shadow)).collect())?,
        free: stack_batch(triplets.iter().map(|t| to_model_range(&t.free)).collect())?,
        mask: stack_batch(triplets.iter().map(|t| t.mask.clone()).collect())?,
    })
}

/// Runs one alternating step: update D on (real, detached fake), then
/// recompute fake scores against the updated D and update G on the total
/// objective.
fn train_step(
    model: &mut Model,
    batch: &Batch,
    cfg: &TrainConfig,
    g_ids: &[ParamId],
    d_ids: &[ParamId],
    adam_g: &mut Adam,
    adam_d: &mut Adam,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    // Generator forward (training mode: raw output, dropout on).
    let tape = Tape::new();
    let shadow = tape.constant(batch.shadow.clone());
    let gen = model
        .generator
        .forward(&tape, &model.store, shadow, &model.config, Some(dropout_rng))?;
    let fake_detached = tape.value(gen.restored);

    // Discriminator update on a detached fake.
    let d_tape = Tape::new();
    let cond = d_tape.constant(batch.shadow.clone());
    let real = d_tape.constant(batch.free.clone());
    let fake = d_tape.constant(fake_detached);
    let real_scores = model.discriminator.forward(&d_tape, &model.store, cond, real)?;
    let fake_scores = model.discriminator.forward(&d_tape, &model.store, cond, fake)?;
    let d_loss = cgan_d_loss(&d_tape, real_scores, fake_scores)?;
    let d_val = d_tape.item(d_loss)?;
    if !d_val.is_finite() {
        return Err(Error::NonFinite {
            what: "discriminator loss",
            name: "d_loss".into(),
        });
    }
    model.store.zero_grads();
    d_tape.backward(d_loss, &mut model.store)?;
    adam_d.step(&mut model.store, d_ids)?;

    // Generator update against the freshly updated discriminator.
    let cond_g = tape.constant(batch.shadow.clone());
    let fake_scores_g = model
        .discriminator
        .forward(&tape, &model.store, cond_g, gen.restored)?;
    let g_gan = cgan_g_loss(&tape, fake_scores_g, cfg.generator_gan_loss);
    let target = tape.constant(batch.free.clone());
    let l1 = l1_weighted(&tape, gen.restored, target, &cfg.l1_channel_weights, cfg.l1_denominator)?;
    let attn = if cfg.supervise_all_steps {
        attention_steps_loss(&tape, &gen.attention_steps, &batch.mask, cfg.attention_mode)?
    } else {
        attention_loss(&tape, gen.attention, &batch.mask, cfg.attention_mode)?
    };
    let total = total_loss(&tape, l1, g_gan, attn, &cfg.weights)?;
    let total_val = tape.item(total)?;
    if !total_val.is_finite() {
        return Err(Error::NonFinite {
            what: "generator loss",
            name: "total".into(),
        });
    }
    model.store.zero_grads();
    tape.backward(total, &mut model.store)?;
    adam_g.step(&mut model.store, g_ids)?;

    Ok(LossBreakdown {
        l_cgan_g: tape.item(g_gan)?,
        l_cgan_d: d_val,
        l1: tape.item(l1)?,
        l_attention: tape.item(attn)?,
        total: total_val,
    })
}

/// Full training run. Checkpoints land in `out_dir` when given (on the
/// configured interval, as `final.ckpt` at the end, and as
/// `aborted_last.ckpt` if a non-finite loss aborts the run).
pub fn train(
    model: &mut Model,
    source: &dyn TripletSource,
    heldout: &dyn TripletSource,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let start = Instant::now();
    let g_ids = model.generator_param_ids();
    let d_ids = model.discriminator_param_ids();
    let mut adam_g = Adam::new(&model.store, cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut adam_d = Adam::new(&model.store, cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    'outer: for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let triplets: Vec<ShadowTriplet> =
                chunk.iter().map(|i| source.get(*i)).collect::<Result<_>>()?;
            let batch = assemble_batch(&triplets)?;
            let breakdown = match train_step(
                model,
                &batch,
                cfg,
                &g_ids,
                &d_ids,
                &mut adam_g,
                &mut adam_d,
                &mut rng,
            ) {
                Ok(b) => b,
                Err(e) => {
                    if let Some(dir) = out_dir {
                        let _ = save_checkpoint(model, &dir.join("aborted_last.ckpt"));
                    }
                    return Err(e);
                }
            };
            log.history.push(breakdown);
            step += 1;
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                if let Some(dir) = out_dir {
                    save_checkpoint(model, &dir.join(format!("step{step:06}.ckpt")))?;
                }
            }
        }
        if cfg.eval_subset > 0 && !heldout.is_empty() {
            let mut reports = Vec::new();
            for i in 0..cfg.eval_subset.min(heldout.len()) {
                let t = heldout.get(i)?;
                let out = infer_tensor(model, &t.shadow, false)?;
                reports.push(evaluate_pair(&out.restored, &t.free, &t.mask)?);
            }
            log.evals.push(crate::metrics::average_reports(&reports));
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("final.ckpt"))?;
    }
    log.wall_ms = start.elapsed().as_millis();
    Ok(log)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Restored image in [0,255] plus the attention maps in [0,1].
pub struct InferOutput {
    pub restored: Tensor,
    pub attention: Tensor,
    pub attention_steps: Vec<Tensor>,
    /// Set when the input had to be resized to satisfy the stride grid.
    pub resized_from: Option<(usize, usize)>,
}

/// Deterministic inference on a [0,255] RGB tensor. Inputs whose sizes are
/// not divisible by the model's stride grid are bilinearly resized to the
/// nearest multiple (or rejected when `strict_size`).
pub fn infer_tensor(model: &Model, image: &Tensor, strict_size: bool) -> Result<InferOutput> {
    let s = image.shape();
    let div = model.config.size_divisor();
    let round_to = |v: usize| ((v.max(div) + div / 2) / div) * div;
    let (th, tw) = (round_to(s.h), round_to(s.w));
    let (input, resized_from) = if (th, tw) == (s.h, s.w) {
        (image.clone(), None)
    } else if strict_size {
        return Err(Error::contract(format!(
            "input {}x{} is not divisible by {div}; pass a padded/resized image or disable strict sizing",
            s.h, s.w
        )));
    } else {
        let rgb = crate::data::rgb8_from_tensor(image)?;
        let resized = image::imageops::resize(
            &rgb,
            tw as u32,
            th as u32,
            image::imageops::FilterType::Triangle,
        );
        (crate::data::tensor_from_rgb8(&resized), Some((s.h, s.w)))
    };
    let tape = Tape::new();
    let xv = tape.constant(to_model_range(&input));
    let gen = model
        .generator
        .forward(&tape, &model.store, xv, &model.config, None)?;
    let out = gen.materialize(&tape);
    Ok(InferOutput {
        restored: from_model_range(&out.restored),
        attention: out.attention,
        attention_steps: out.attention_steps,
        resized_from,
    })
}

/// Runs one PNG through the model; writes `<stem>_restored.png` and one
/// grayscale `<stem>_attn_step<i>.png` per progressive step.
pub fn infer_file(model: &Model, input: &Path, out_dir: &Path, strict_size: bool) -> Result<Vec<PathBuf>> {
    let image = crate::data::load_rgb_png(input)?;
    let out = infer_tensor(model, &image, strict_size)?;
    if let Some((h, w)) = out.resized_from {
        eprintln!(
            "warning: {} was {h}x{w}, resized to fit the model stride grid",
            input.display()
        );
    }
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::contract(format!("bad input file name {}", input.display())))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let restored_path = out_dir.join(format!("{stem}_restored.png"));
    save_rgb_png(&out.restored, &restored_path)?;
    written.push(restored_path);
    for (i, map) in out.attention_steps.iter().enumerate() {
        let p = out_dir.join(format!("{stem}_attn_step{i}.png"));
        save_gray_png(map, &p)?;
        written.push(p);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Overfit smoke harness
// ---------------------------------------------------------------------------

pub const SMOKE_IMAGES: usize = 4;
pub const SMOKE_SIZE: usize = 32;

/// Synthetic shadow triplets: smooth bright backgrounds with a darkened
/// rectangular region and the matching binary mask.
pub fn synthetic_triplets(count: usize, h: usize, w: usize, seed: u64) -> Vec<ShadowTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut free = Tensor::zeros(Shape::new(1, 3, h, w));
            let (fx, fy): (f32, f32) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let base: [f32; 3] = [
                rng.random_range(140.0..220.0),
                rng.random_range(140.0..220.0),
                rng.random_range(140.0..220.0),
            ];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let wave = 15.0
                            * ((x as f32 * fx * 0.2).sin() + (y as f32 * fy * 0.2).cos());
                        let v = (base[c] + wave).clamp(30.0, 250.0).round();
                        free.set(0, c, y, x, v);
                    }
                }
            }
            let y0 = rng.random_range(0..h / 4);
            let x0 = rng.random_range(0..w / 4);
            let y1 = y0 + h / 2 + rng.random_range(0..h / 4);
            let x1 = x0 + w / 2 + rng.random_range(0..w / 4);
            let mut mask = Tensor::zeros(Shape::new(1, 1, h, w));
            let mut shadow = free.clone();
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    mask.set(0, 0, y, x, 1.0);
                    for c in 0..3 {
                        let v = (shadow.get(0, c, y, x) * 0.55).round();
                        shadow.set(0, c, y, x, v);
                    }
                }
            }
            ShadowTriplet {
                id: format!("synthetic-{i}"),
                shadow,
                mask,
                free,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct SmokeReport {
    pub initial_l1: f32,
    pub final_l1: f32,
    pub first_attention: f32,
    pub last_attention: f32,
    pub steps: usize,
}

fn mean_l1_over(model: &Model, triplets: &[ShadowTriplet], cfg: &TrainConfig) -> Result<f32> {
    let mut acc = 0.0f32;
    for t in triplets {
        let out = infer_tensor(model, &t.shadow, true)?;
        let tape = Tape::new();
        let a = tape.constant(to_model_range(&out.restored));
        let b = tape.constant(to_model_range(&t.free));
        let l = l1_weighted(&tape, a, b, &cfg.l1_channel_weights, cfg.l1_denominator)?;
        acc += tape.item(l)?;
    }
    Ok(acc / triplets.len() as f32)
}

/// Trains on four synthetic images for `steps` steps at the default
/// hyperparameters and reports initial/final reconstruction error.
pub fn overfit_smoke(steps: usize, seed: u64) -> Result<(SmokeReport, TrainLog, Model)> {
    let model_cfg = ModelConfig { seed, ..ModelConfig::default() };
    let mut model = Model::init(model_cfg)?;
    let triplets = synthetic_triplets(SMOKE_IMAGES, SMOKE_SIZE, SMOKE_SIZE, seed ^ 0x50a0);
    let cfg = TrainConfig {
        epochs: steps.div_ceil(SMOKE_IMAGES),
        max_steps: Some(steps),
        seed,
        ..TrainConfig::default()
    };
    let initial_l1 = mean_l1_over(&model, &triplets, &cfg)?;
    let source = InMemorySource(triplets.clone());
    let log = train(&mut model, &source, &InMemorySource(Vec::new()), &cfg, None)?;
    let final_l1 = mean_l1_over(&model, &triplets, &cfg)?;
    let report = SmokeReport {
        initial_l1,
        final_l1,
        first_attention: log.history.first().map(|b| b.l_attention).unwrap_or(0.0),
        last_attention: log.history.last().map(|b| b.l_attention).unwrap_or(0.0),
        steps: log.history.len(),
    };
    Ok((report, log, model))
}

// ---------------------------------------------------------------------------
// Flat key = value config files
// ---------------------------------------------------------------------------

/// Data source layout selection for the train CLI.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum DataLayout {
    /// Auto-detect the ISTD train/test directory layout.
    #[default]
    Istd,
    /// Flat triple of directories under the root.
    Flat {
        shadow: String,
        mask: String,
        free: String,
    },
}

/// Everything a `train` invocation needs beyond the CLI paths.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub layout: DataLayout,
}

/// Parses the flat `key = value` config text. Unknown keys are errors;
/// `#` starts a comment.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut flat_dirs = ("shadow".to_string(), "mask".to_string(), "free".to_string());
    let mut use_flat = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = || Error::Config(format!("line {}: bad value for {k}: {v:?}", lineno + 1));
        let parse_f32 = |v: &str| v.parse::<f32>().map_err(|_| bad());
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let parse_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad());
        let parse_bool = |v: &str| match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(bad()),
        };
        match k {
            "learning_rate" => cfg.train.learning_rate = parse_f32(v)?,
            "beta1" => cfg.train.beta1 = parse_f32(v)?,
            "beta2" => cfg.train.beta2 = parse_f32(v)?,
            "epochs" => cfg.train.epochs = parse_usize(v)?,
            "max_steps" => cfg.train.max_steps = Some(parse_usize(v)?),
            "batch_size" => cfg.train.batch_size = parse_usize(v)?,
            "w_l1" => cfg.train.weights.l1 = parse_f32(v)?,
            "w_cgan" => cfg.train.weights.cgan = parse_f32(v)?,
            "w_attention" => cfg.train.weights.attention = parse_f32(v)?,
            "l1_channel_weights" => {
                let parts: Vec<f32> = v
                    .split(',')
                    .map(|p| p.trim().parse::<f32>().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(bad());
                }
                cfg.train.l1_channel_weights = [parts[0], parts[1], parts[2]];
            }
            "attention_loss" => {
                cfg.train.attention_mode = match v {
                    "mean" => AttentionLossMode::Mean,
                    "sum" => AttentionLossMode::Sum,
                    _ => return Err(bad()),
                }
            }
            "generator_gan_loss" => {
                cfg.train.generator_gan_loss = match v {
                    "non_saturating" => GeneratorGanLoss::NonSaturating,
                    "literal" => GeneratorGanLoss::Literal,
                    _ => return Err(bad()),
                }
            }
            "l1_denominator" => {
                cfg.train.l1_denominator = match v {
                    "four_hw" => L1Denominator::FourHw,
                    "chw" => L1Denominator::Chw,
                    _ => return Err(bad()),
                }
            }
            "supervise_all_steps" => cfg.train.supervise_all_steps = parse_bool(v)?,
            "seed" => cfg.train.seed = parse_u64(v)?,
            "checkpoint_interval" => cfg.train.checkpoint_interval = parse_usize(v)?,
            "image_size" => cfg.train.image_size = parse_usize(v)?,
            "eval_subset" => cfg.train.eval_subset = parse_usize(v)?,
            "base_channels" => cfg.model.base_channels = parse_usize(v)?,
            "encoder_levels" => cfg.model.encoder_levels = parse_usize(v)?,
            "n_ftr_blocks" => cfg.model.n_ftr_blocks = parse_usize(v)?,
            "twrnn_steps" => cfg.model.twrnn_steps = parse_usize(v)?,
            "use_transformer" => cfg.model.use_transformer = parse_bool(v)?,
            "use_ftr" => cfg.model.use_ftr = parse_bool(v)?,
            "normalize_qk" => cfg.model.normalize_qk = parse_bool(v)?,
            "shared_wheels" => cfg.model.shared_wheels = parse_bool(v)?,
            "model_seed" => cfg.model.seed = parse_u64(v)?,
            "data_layout" => match v {
                "istd" => use_flat = false,
                "flat" => use_flat = true,
                _ => return Err(bad()),
            },
            "flat_shadow_dir" => flat_dirs.0 = v.to_string(),
            "flat_mask_dir" => flat_dirs.1 = v.to_string(),
            "flat_free_dir" => flat_dirs.2 = v.to_string(),
            _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", lineno + 1))),
        }
    }
    if use_flat {
        cfg.layout = DataLayout::Flat {
            shadow: flat_dirs.0,
            mask: flat_dirs.1,
            free: flat_dirs.2,
        };
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Re-exported for the CLI.
pub use crate::model::load_checkpoint as load_model;
