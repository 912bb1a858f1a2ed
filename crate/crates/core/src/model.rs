//! Generator and discriminator assembly, ablation flags, deterministic
//! initialization, and the checkpoint file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    ftr_block, transformer_block, FtrBlockParams, TransformerBlockParams,
};
use crate::error::{Error, Result};
use crate::tensor::param::{uniform_fan_in, ParamId, ParamKind, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ConvMode, Shape, Tensor};
use crate::twrnn::{twrnn_stage, TwrnnStageParams};

pub const DROPOUT_RATE: f32 = 0.2;

/// Topology and ablation switches. Disabling both `use_transformer` and
/// `use_ftr` leaves the plain encoder-decoder + spatial attention baseline;
/// enabling either only adds parameters, so ablation parameter sets nest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub encoder_levels: usize,
    pub n_ftr_blocks: usize,
    pub twrnn_steps: usize,
    pub use_transformer: bool,
    pub use_ftr: bool,
    /// L2-normalize Q/K along space before the channel correlation.
    pub normalize_qk: bool,
    /// Share directional weights between the two wheels.
    pub shared_wheels: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            encoder_levels: 3,
            n_ftr_blocks: 4,
            twrnn_steps: 4,
            use_transformer: true,
            use_ftr: true,
            normalize_qk: true,
            shared_wheels: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.encoder_levels == 0 {
            return Err(Error::Config(
                "base_channels and encoder_levels must be >= 1".into(),
            ));
        }
        if self.twrnn_steps == 0 {
            return Err(Error::Config("twrnn_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial sizes must divide this (one halving per extra encoder level).
    pub fn size_divisor(&self) -> usize {
        1 << (self.encoder_levels - 1)
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn init(
        prefix: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv {
            w: store.register(
                format!("{prefix}.w"),
                ParamKind::Kernel,
                uniform_fan_in(Shape::new(out_c, in_c, k, k), rng),
            ),
            b: store.register(
                format!("{prefix}.b"),
                ParamKind::Bias,
                Tensor::zeros(Shape::new(1, out_c, 1, 1)),
            ),
        }
    }

    fn apply(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        mode: ConvMode,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        tape.conv2d(
            x,
            tape.param(store, self.w),
            Some(tape.param(store, self.b)),
            mode,
            stride,
            padding,
        )
    }
}

pub struct Generator {
    head: Conv,
    encoder_blocks: Vec<Vec<TransformerBlockParams>>,
    down: Vec<Conv>,
    up: Vec<Conv>,
    aggregate: Vec<Conv>,
    decoder_blocks: Vec<Vec<TransformerBlockParams>>,
    feature: Conv,
    twrnn: TwrnnStageParams,
    ftr: Vec<FtrBlockParams>,
    output: Conv,
}

const BLOCKS_PER_LEVEL: usize = 2;

impl Generator {
    fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let levels = cfg.encoder_levels;
        let c0 = cfg.base_channels;
        let head = Conv::init("g.head", c0, 3, 3, store, rng);
        let mut encoder_blocks = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels {
            let c = cfg.level_channels(l);
            let blocks = if cfg.use_transformer {
                (0..BLOCKS_PER_LEVEL)
                    .map(|i| TransformerBlockParams::init(&format!("g.enc{l}.blk{i}"), c, store, rng))
                    .collect()
            } else {
                Vec::new()
            };
            encoder_blocks.push(blocks);
            if l + 1 < levels {
                down.push(Conv::init(
                    &format!("g.down{l}"),
                    cfg.level_channels(l + 1),
                    c,
                    3,
                    store,
                    rng,
                ));
            }
        }
        let mut up = Vec::new();
        let mut aggregate = Vec::new();
        let mut decoder_blocks = Vec::new();
        for l in (0..levels.saturating_sub(1)).rev() {
            let c = cfg.level_channels(l);
            up.push(Conv::init(
                &format!("g.up{l}"),
                c,
                cfg.level_channels(l + 1),
                3,
                store,
                rng,
            ));
            aggregate.push(Conv::init(&format!("g.agg{l}"), c, 2 * c, 1, store, rng));
            let blocks = if cfg.use_transformer {
                (0..BLOCKS_PER_LEVEL)
                    .map(|i| TransformerBlockParams::init(&format!("g.dec{l}.blk{i}"), c, store, rng))
                    .collect()
            } else {
                Vec::new()
            };
            decoder_blocks.push(blocks);
        }
        let feature = Conv::init("g.feat", c0, c0, 3, store, rng);
        let twrnn = TwrnnStageParams::init("g.tw", c0, cfg.shared_wheels, store, rng);
        let ftr = if cfg.use_ftr {
            (0..cfg.n_ftr_blocks)
                .map(|i| FtrBlockParams::init(&format!("g.ftr{i}"), c0, store, rng))
                .collect()
        } else {
            Vec::new()
        };
        // Final conv starts at zero so the untrained network is the identity.
        let output = Conv {
            w: store.register(
                "g.out.w",
                ParamKind::Kernel,
                Tensor::zeros(Shape::new(3, c0, 3, 3)),
            ),
            b: store.register("g.out.b", ParamKind::Bias, Tensor::zeros(Shape::new(1, 3, 1, 1))),
        };
        Generator {
            head,
            encoder_blocks,
            down,
            up,
            aggregate,
            decoder_blocks,
            feature,
            twrnn,
            ftr,
            output,
        }
    }

    /// Runs the generator. Training mode (a dropout rng is supplied) returns
    /// the raw, unclamped restored image so gradients pass; eval mode clamps
    /// to the valid [-1, 1] range.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        image: Var,
        cfg: &ModelConfig,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GeneratorVars> {
        let s = tape.shape(image);
        let div = cfg.size_divisor();
        if s.c != 3 {
            return Err(Error::contract(format!(
                "generator expects 3-channel input, got {s}"
            )));
        }
        if s.h % div != 0 || s.w % div != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::contract(format!(
                "generator input {}x{} must be divisible by {} (2^(encoder_levels-1))",
                s.h, s.w, div
            )));
        }

        let mut cur = self.head.apply(tape, store, image, ConvMode::Full3x3, 1, 1)?;
        let mut skips = Vec::new();
        for (l, blocks) in self.encoder_blocks.iter().enumerate() {
            for blk in blocks {
                cur = transformer_block(tape, store, cur, blk, cfg.normalize_qk)?;
            }
            skips.push(cur);
            if l + 1 < self.encoder_blocks.len() {
                cur = tape.relu(self.down[l].apply(tape, store, cur, ConvMode::Full3x3, 2, 1)?);
            }
        }
        for (i, l) in (0..self.encoder_blocks.len().saturating_sub(1)).rev().enumerate() {
            cur = tape.upsample2x(cur);
            cur = tape.relu(self.up[i].apply(tape, store, cur, ConvMode::Full3x3, 1, 1)?);
            let cat = tape.concat_channels(&[cur, skips[l]])?;
            cur = self.aggregate[i].apply(tape, store, cat, ConvMode::Pointwise1x1, 1, 0)?;
            for blk in &self.decoder_blocks[i] {
                cur = transformer_block(tape, store, cur, blk, cfg.normalize_qk)?;
            }
            if let Some(rng) = dropout_rng.as_deref_mut() {
                cur = apply_dropout(tape, cur, rng)?;
            }
        }

        cur = self.feature.apply(tape, store, cur, ConvMode::Full3x3, 1, 1)?;
        let stage = twrnn_stage(tape, store, cur, &self.twrnn, cfg.twrnn_steps)?;
        let mut features = stage.features;
        for blk in &self.ftr {
            features = ftr_block(tape, store, features, blk)?;
        }
        let residual = self.output.apply(tape, store, features, ConvMode::Full3x3, 1, 1)?;
        let raw = tape.add(image, residual)?;
        let restored = if dropout_rng.is_some() {
            raw
        } else {
            tape.clamp_const(raw, -1.0, 1.0)
        };
        Ok(GeneratorVars {
            restored,
            attention: stage.attention,
            attention_steps: stage.attention_steps,
        })
    }
}

fn apply_dropout(tape: &Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    use rand::Rng;
    let keep = 1.0 - DROPOUT_RATE;
    let shape = tape.shape(x);
    let mut mask = Tensor::zeros(shape);
    for v in mask.data_mut() {
        *v = if rng.random::<f32>() < keep { 1.0 } else { 0.0 };
    }
    tape.dropout(x, mask, keep)
}

/// Tape handles of one generator run.
#[derive(Debug)]
pub struct GeneratorVars {
    pub restored: Var,
    pub attention: Var,
    pub attention_steps: Vec<Var>,
}

/// Materialized generator output.
pub struct GeneratorOutput {
    pub restored: Tensor,
    pub attention: Tensor,
    pub attention_steps: Vec<Tensor>,
}

impl GeneratorVars {
    pub fn materialize(&self, tape: &Tape) -> GeneratorOutput {
        GeneratorOutput {
            restored: tape.value(self.restored),
            attention: tape.value(self.attention),
            attention_steps: self.attention_steps.iter().map(|v| tape.value(*v)).collect(),
        }
    }
}

/// Conditional patch discriminator: four stride-2 conv + leaky-relu levels
/// over the channel-concatenated (condition, candidate) pair, then a
/// one-channel score conv. Sigmoid lives in the loss.
pub struct Discriminator {
    levels: Vec<Conv>,
    score: Conv,
}

pub const DISC_LEVELS: usize = 4;

impl Discriminator {
    fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let mut levels = Vec::new();
        let mut in_c = 6;
        for l in 0..DISC_LEVELS {
            let out_c = ((2 * cfg.base_channels) << l).min(512);
            levels.push(Conv::init(&format!("d.l{l}"), out_c, in_c, 3, store, rng));
            in_c = out_c;
        }
        let score = Conv::init("d.score", 1, in_c, 3, store, rng);
        Discriminator { levels, score }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, condition: Var, candidate: Var) -> Result<Var> {
        if tape.shape(condition) != tape.shape(candidate) {
            return Err(Error::ShapeMismatch {
                context: "discriminator condition/candidate",
                lhs: tape.shape(condition).to_string(),
                rhs: tape.shape(candidate).to_string(),
            });
        }
        let mut x = tape.concat_channels(&[condition, candidate])?;
        for lvl in &self.levels {
            x = tape.leaky_relu(lvl.apply(tape, store, x, ConvMode::Full3x3, 2, 1)?, 0.2);
        }
        self.score.apply(tape, store, x, ConvMode::Full3x3, 1, 1)
    }
}

/// A generator/discriminator pair with its parameter store.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::init(&config, &mut store, &mut rng);
        let discriminator = Discriminator::init(&config, &mut store, &mut rng);
        Ok(Model {
            config,
            store,
            generator,
            discriminator,
        })
    }

    pub fn generator_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("g."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn discriminator_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("d."))
            .map(|(id, _)| id)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned text header + manifest, then a flat little-endian
// f32 blob. Round-trips bit-exactly.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "unshade-ckpt v1";

fn config_to_header(cfg: &ModelConfig) -> String {
    format!(
        "{CKPT_MAGIC} base_channels={} encoder_levels={} n_ftr_blocks={} twrnn_steps={} \
         use_transformer={} use_ftr={} normalize_qk={} shared_wheels={} seed={}",
        cfg.base_channels,
        cfg.encoder_levels,
        cfg.n_ftr_blocks,
        cfg.twrnn_steps,
        cfg.use_transformer as u8,
        cfg.use_ftr as u8,
        cfg.normalize_qk as u8,
        cfg.shared_wheels as u8,
        cfg.seed
    )
}

fn header_to_config(line: &str) -> Result<ModelConfig> {
    let rest = line
        .strip_prefix(CKPT_MAGIC)
        .ok_or_else(|| Error::Checkpoint(format!("bad magic line: {line:?}")))?;
    let mut cfg = ModelConfig::default();
    for kv in rest.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad header field {kv:?}")))?;
        let parse_usize =
            |v: &str| v.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad value {kv:?}")));
        let parse_bool = |v: &str| Ok::<bool, Error>(v == "1");
        match k {
            "base_channels" => cfg.base_channels = parse_usize(v)?,
            "encoder_levels" => cfg.encoder_levels = parse_usize(v)?,
            "n_ftr_blocks" => cfg.n_ftr_blocks = parse_usize(v)?,
            "twrnn_steps" => cfg.twrnn_steps = parse_usize(v)?,
            "use_transformer" => cfg.use_transformer = parse_bool(v)?,
            "use_ftr" => cfg.use_ftr = parse_bool(v)?,
            "normalize_qk" => cfg.normalize_qk = parse_bool(v)?,
            "shared_wheels" => cfg.shared_wheels = parse_bool(v)?,
            "seed" => {
                cfg.seed = v
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad value {kv:?}")))?
            }
            _ => return Err(Error::Checkpoint(format!("unknown header field {k:?}"))),
        }
    }
    Ok(cfg)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str(&config_to_header(&model.config));
    text.push('\n');
    let mut offset = 0usize;
    for (_, p) in model.store.iter() {
        let s = p.value.shape();
        text.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p.name, s.n, s.c, s.h, s.w, offset
        ));
        offset += s.numel() * 4;
    }
    text.push_str(&format!("blob {offset}\n"));
    let mut blob = Vec::with_capacity(offset);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    // Split the text section from the blob at the `blob <len>` line.
    let mut line_start = 0usize;
    let mut lines: Vec<&str> = Vec::new();
    let mut blob_start = None;
    while line_start < bytes.len() {
        let end = bytes[line_start..]
            .iter()
            .position(|b| *b == b'\n')
            .map(|p| line_start + p)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[line_start..end])
            .map_err(|_| Error::Checkpoint("non-utf8 header".into()))?;
        lines.push(line);
        line_start = end + 1;
        if line.starts_with("blob ") {
            blob_start = Some(line_start);
            break;
        }
    }
    let blob_start = blob_start.ok_or_else(|| Error::Checkpoint("missing blob marker".into()))?;
    let blob = &bytes[blob_start..];
    let header = lines.first().ok_or_else(|| Error::Checkpoint("empty file".into()))?;
    let cfg = header_to_config(header)?;
    let declared: usize = lines
        .last()
        .unwrap()
        .strip_prefix("blob ")
        .unwrap()
        .parse()
        .map_err(|_| Error::Checkpoint("bad blob length".into()))?;
    if blob.len() != declared {
        return Err(Error::Checkpoint(format!(
            "blob is {} bytes, header declares {declared}",
            blob.len()
        )));
    }

    let mut model = Model::init(cfg)?;
    let manifest = &lines[1..lines.len() - 1];
    if manifest.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} manifest entries for {} model parameters",
            manifest.len(),
            model.store.len()
        )));
    }
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    for (line, id) in manifest.iter().zip(ids) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(Error::Checkpoint(format!("bad manifest line {line:?}")));
        }
        let name = parts[0];
        let dims: Vec<usize> = parts[1..6]
            .iter()
            .map(|p| p.parse().map_err(|_| Error::Checkpoint(format!("bad manifest line {line:?}"))))
            .collect::<Result<_>>()?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let offset = dims[4];
        let p = model.store.get(id);
        if p.name != name || p.value.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: checkpoint has {name} {shape}, model expects {} {}",
                p.name,
                p.value.shape()
            )));
        }
        let len = shape.numel() * 4;
        if offset + len > blob.len() {
            return Err(Error::Checkpoint(format!("blob overrun for {name}")));
        }
        let src = &blob[offset..offset + len];
        let vals: Vec<f32> = src
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.store.get_mut(id).value = Tensor::from_vec(shape, vals)?;
    }
    Ok(model)
}
