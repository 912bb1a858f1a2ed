//! Two-wheel recurrent spatial attention: four directional scans per wheel,
//! two wheels per pass, driving a progressive single-channel attention map,
//! plus the residual-block scaffolding around it.

use rand_chacha::ChaCha8Rng;

use crate::blocks::{res_block, ResBlockParams};
use crate::error::{Error, Result};
use crate::tensor::param::{uniform_fan_in, uniform_recurrent, ParamId, ParamKind, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ConvMode, ScanDir, Shape, Tensor};

/// One wheel: four channel-preserving pointwise mixes (one per direction)
/// and a mix kernel that folds the four scan outputs back to C channels.
#[derive(Clone, Debug)]
pub struct DirectionalWeights {
    pub g_up: ParamId,
    pub g_down: ParamId,
    pub g_left: ParamId,
    pub g_right: ParamId,
    pub mix: ParamId,
}

impl DirectionalWeights {
    pub fn init(prefix: &str, channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        // Scan kernels are recurrent: contractive init, not fan-in init.
        let mut g = |name: &str| {
            store.register(
                format!("{prefix}.{name}"),
                ParamKind::Kernel,
                uniform_recurrent(channels, rng),
            )
        };
        let (g_up, g_down, g_left, g_right) =
            (g("g_up"), g("g_down"), g("g_left"), g("g_right"));
        DirectionalWeights {
            g_up,
            g_down,
            g_left,
            g_right,
            mix: store.register(
                format!("{prefix}.mix"),
                ParamKind::Kernel,
                uniform_fan_in(Shape::new(channels, 4 * channels, 1, 1), rng),
            ),
        }
    }
}

/// Recurrence along one axis: h(0) = relu(f(0)), h(t) = relu(f(t) + g h(t-1))
/// with g a pointwise channel mix; output stacks h over the scan axis.
pub fn directional_scan(
    tape: &Tape,
    store: &ParamStore,
    f: Var,
    g: ParamId,
    dir: ScanDir,
) -> Result<Var> {
    tape.scan(f, tape.param(store, g), dir)
}

fn wheel(tape: &Tape, store: &ParamStore, x: Var, w: &DirectionalWeights) -> Result<Var> {
    let scans = [
        directional_scan(tape, store, x, w.g_up, ScanDir::Up)?,
        directional_scan(tape, store, x, w.g_down, ScanDir::Down)?,
        directional_scan(tape, store, x, w.g_left, ScanDir::Left)?,
        directional_scan(tape, store, x, w.g_right, ScanDir::Right)?,
    ];
    let cat = tape.concat_channels(&scans)?;
    tape.conv2d(cat, tape.param(store, w.mix), None, ConvMode::Pointwise1x1, 1, 0)
}

/// Weights for both wheels. With `shared`, the second wheel reuses the
/// first wheel's parameters.
#[derive(Clone, Debug)]
pub struct TwoWheelWeights {
    pub wheel1: DirectionalWeights,
    pub wheel2: DirectionalWeights,
}

impl TwoWheelWeights {
    pub fn init(
        prefix: &str,
        channels: usize,
        shared: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wheel1 = DirectionalWeights::init(&format!("{prefix}.w1"), channels, store, rng);
        let wheel2 = if shared {
            wheel1.clone()
        } else {
            DirectionalWeights::init(&format!("{prefix}.w2"), channels, store, rng)
        };
        TwoWheelWeights { wheel1, wheel2 }
    }
}

/// Two sequential rounds of four-way scans.
pub fn two_wheel_pass(tape: &Tape, store: &ParamStore, x: Var, w: &TwoWheelWeights) -> Result<Var> {
    let first = wheel(tape, store, x, &w.wheel1)?;
    wheel(tape, store, first, &w.wheel2)
}

/// Parameters of the progressive attention-map head.
#[derive(Clone, Debug)]
pub struct AttentionMapParams {
    pub wheels: TwoWheelWeights,
    pub project: ParamId,
    pub project_bias: ParamId,
}

impl AttentionMapParams {
    pub fn init(
        prefix: &str,
        channels: usize,
        shared_wheels: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wheels = TwoWheelWeights::init(prefix, channels, shared_wheels, store, rng);
        AttentionMapParams {
            wheels,
            project: store.register(
                format!("{prefix}.proj.w"),
                ParamKind::Kernel,
                uniform_fan_in(Shape::new(1, channels, 1, 1), rng),
            ),
            project_bias: store.register(
                format!("{prefix}.proj.b"),
                ParamKind::Bias,
                Tensor::zeros(Shape::new(1, 1, 1, 1)),
            ),
        }
    }
}

/// Iterative attention: each step runs a two-wheel pass, projects to one
/// channel, squashes to [0,1], and gates the features fed to the next step.
/// Returns the final map and all per-step maps (exactly `steps` of them).
pub fn attention_map(
    tape: &Tape,
    store: &ParamStore,
    features: Var,
    p: &AttentionMapParams,
    steps: usize,
) -> Result<(Var, Vec<Var>)> {
    if steps == 0 {
        return Err(Error::contract("attention_map needs steps >= 1"));
    }
    let mut f = features;
    let mut maps = Vec::with_capacity(steps);
    for step in 0..steps {
        let ctx = two_wheel_pass(tape, store, f, &p.wheels)?;
        let logits = tape.conv2d(
            ctx,
            tape.param(store, p.project),
            Some(tape.param(store, p.project_bias)),
            ConvMode::Pointwise1x1,
            1,
            0,
        )?;
        let map = tape.sigmoid(logits);
        maps.push(map);
        if step + 1 < steps {
            f = tape.mul_bcast_channel(f, map)?;
        }
    }
    Ok((*maps.last().expect("steps >= 1"), maps))
}

/// The full spatial-attention stage: three plain residual blocks extract
/// features, the attention head focuses on shadowed areas, three
/// attention-gated residual blocks learn the negative residual, and two
/// plain residual blocks reconstruct.
#[derive(Clone, Debug)]
pub struct TwrnnStageParams {
    pub pre: Vec<ResBlockParams>,
    pub attention: AttentionMapParams,
    pub modulated: Vec<ResBlockParams>,
    pub post: Vec<ResBlockParams>,
}

impl TwrnnStageParams {
    pub fn init(
        prefix: &str,
        channels: usize,
        shared_wheels: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pre = (0..3)
            .map(|i| ResBlockParams::init(&format!("{prefix}.pre{i}"), channels, store, rng))
            .collect();
        let attention =
            AttentionMapParams::init(&format!("{prefix}.attn"), channels, shared_wheels, store, rng);
        let modulated = (0..3)
            .map(|i| ResBlockParams::init(&format!("{prefix}.mod{i}"), channels, store, rng))
            .collect();
        let post = (0..2)
            .map(|i| ResBlockParams::init(&format!("{prefix}.post{i}"), channels, store, rng))
            .collect();
        TwrnnStageParams {
            pre,
            attention,
            modulated,
            post,
        }
    }
}

pub struct TwrnnStageOutput {
    pub features: Var,
    pub attention: Var,
    pub attention_steps: Vec<Var>,
}

pub fn twrnn_stage(
    tape: &Tape,
    store: &ParamStore,
    x: Var,
    p: &TwrnnStageParams,
    steps: usize,
) -> Result<TwrnnStageOutput> {
    let mut f = x;
    for rb in &p.pre {
        f = res_block(tape, store, f, rb)?;
    }
    let (map, step_maps) = attention_map(tape, store, f, &p.attention, steps)?;
    for rb in &p.modulated {
        f = tape.mul_bcast_channel(res_block(tape, store, f, rb)?, map)?;
    }
    for rb in &p.post {
        f = res_block(tape, store, f, rb)?;
    }
    Ok(TwrnnStageOutput {
        features: f,
        attention: map,
        attention_steps: step_maps,
    })
}
