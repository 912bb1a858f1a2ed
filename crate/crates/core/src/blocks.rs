//! The three building blocks of the generator: the transposed channel
//! attention transformer block, the plain residual block, and the Fourier
//! transform residual (FTR) block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::param::{uniform_fan_in, ParamId, ParamKind, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ConvMode, Shape, Tensor};

pub(crate) const LN_EPS: f32 = 1e-6;

/// Transposed channel attention block: self-attention across channels, so
/// the attention matrix is CxC regardless of spatial size.
#[derive(Clone, Debug)]
pub struct TransformerBlockParams {
    pub w_p_q: ParamId,
    pub w_p_k: ParamId,
    pub w_p_v: ParamId,
    pub w_d_q: ParamId,
    pub w_d_k: ParamId,
    pub w_d_v: ParamId,
    pub w_p_out: ParamId,
    /// log of the temperature that divides the attention logits; kept as an
    /// exponent so alpha = exp(..) stays positive.
    pub alpha_log: ParamId,
    pub norm_gain: ParamId,
    pub norm_shift: ParamId,
    pub channels: usize,
}

impl TransformerBlockParams {
    pub fn init(prefix: &str, channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let pw = Shape::new(channels, channels, 1, 1);
        let dw = Shape::new(channels, 1, 3, 3);
        let per_c = Shape::new(1, channels, 1, 1);
        let mut kernel = |name: &str, shape| {
            store.register(format!("{prefix}.{name}"), ParamKind::Kernel, uniform_fan_in(shape, rng))
        };
        let w_p_q = kernel("wpq", pw);
        let w_d_q = kernel("wdq", dw);
        let w_p_k = kernel("wpk", pw);
        let w_d_k = kernel("wdk", dw);
        let w_p_v = kernel("wpv", pw);
        let w_d_v = kernel("wdv", dw);
        let w_p_out = kernel("wpout", pw);
        let alpha_log = store.register(
            format!("{prefix}.alpha_log"),
            ParamKind::Scalar,
            Tensor::scalar((channels as f32).sqrt().ln()),
        );
        let norm_gain = store.register(
            format!("{prefix}.ln.gain"),
            ParamKind::Gain,
            Tensor::full(per_c, 1.0),
        );
        let norm_shift = store.register(
            format!("{prefix}.ln.shift"),
            ParamKind::Shift,
            Tensor::zeros(per_c),
        );
        TransformerBlockParams {
            w_p_q,
            w_p_k,
            w_p_v,
            w_d_q,
            w_d_k,
            w_d_v,
            w_p_out,
            alpha_log,
            norm_gain,
            norm_shift,
            channels,
        }
    }
}

/// Forward pass returning the output and the CxC attention matrix
/// (shape (N,1,C,C)); the matrix is exposed for inspection and tests.
pub fn transformer_block_with_attention(
    tape: &Tape,
    store: &ParamStore,
    x: Var,
    p: &TransformerBlockParams,
    normalize_qk: bool,
) -> Result<(Var, Var)> {
    let s = tape.shape(x);
    if s.c == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::contract(format!(
            "transformer_block needs non-empty input, got {s}"
        )));
    }
    let y = tape.layer_norm(
        x,
        tape.param(store, p.norm_gain),
        tape.param(store, p.norm_shift),
        LN_EPS,
    )?;
    // Pointwise cross-channel context, then depthwise spatial context;
    // all projections are unbiased.
    let project = |wp: ParamId, wd: ParamId| -> Result<Var> {
        let mixed = tape.conv2d(y, tape.param(store, wp), None, ConvMode::Pointwise1x1, 1, 0)?;
        tape.conv2d(mixed, tape.param(store, wd), None, ConvMode::Depthwise3x3, 1, 1)
    };
    let q = project(p.w_p_q, p.w_d_q)?;
    let k = project(p.w_p_k, p.w_d_k)?;
    let v = project(p.w_p_v, p.w_d_v)?;
    let (q_hat, k_hat) = if normalize_qk {
        (tape.l2norm_spatial(q), tape.l2norm_spatial(k))
    } else {
        (q, k)
    };
    let logits = tape.gram(k_hat, q_hat)?;
    let inv_alpha = tape.exp(tape.neg(tape.param(store, p.alpha_log)));
    let attn = tape.softmax_last(tape.mul_bcast_scalar(logits, inv_alpha)?);
    let mixed = tape.attn_apply(attn, v)?;
    let out = tape.conv2d(mixed, tape.param(store, p.w_p_out), None, ConvMode::Pointwise1x1, 1, 0)?;
    Ok((tape.add(out, x)?, attn))
}

pub fn transformer_block(
    tape: &Tape,
    store: &ParamStore,
    x: Var,
    p: &TransformerBlockParams,
    normalize_qk: bool,
) -> Result<Var> {
    transformer_block_with_attention(tape, store, x, p, normalize_qk).map(|(out, _)| out)
}

/// Plain channel-preserving residual block: conv -> relu -> conv, plus skip.
#[derive(Clone, Debug)]
pub struct ResBlockParams {
    pub conv1: ParamId,
    pub bias1: ParamId,
    pub conv2: ParamId,
    pub bias2: ParamId,
}

impl ResBlockParams {
    pub fn init(prefix: &str, channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let k = Shape::new(channels, channels, 3, 3);
        let b = Shape::new(1, channels, 1, 1);
        ResBlockParams {
            conv1: store.register(format!("{prefix}.c1.w"), ParamKind::Kernel, uniform_fan_in(k, rng)),
            bias1: store.register(format!("{prefix}.c1.b"), ParamKind::Bias, Tensor::zeros(b)),
            conv2: store.register(format!("{prefix}.c2.w"), ParamKind::Kernel, uniform_fan_in(k, rng)),
            bias2: store.register(format!("{prefix}.c2.b"), ParamKind::Bias, Tensor::zeros(b)),
        }
    }
}

pub fn res_block(tape: &Tape, store: &ParamStore, x: Var, p: &ResBlockParams) -> Result<Var> {
    let h = tape.conv2d(
        x,
        tape.param(store, p.conv1),
        Some(tape.param(store, p.bias1)),
        ConvMode::Full3x3,
        1,
        1,
    )?;
    let h = tape.relu(h);
    let h = tape.conv2d(
        h,
        tape.param(store, p.conv2),
        Some(tape.param(store, p.bias2)),
        ConvMode::Full3x3,
        1,
        1,
    )?;
    tape.add(h, x)
}

/// Fourier transform residual block: a frequency branch (FFT, two pointwise
/// mixes over the stacked real/imaginary channels with a relu between,
/// inverse FFT) in parallel with a spatial conv branch, both added to the
/// input.
#[derive(Clone, Debug)]
pub struct FtrBlockParams {
    pub freq_mix1: ParamId,
    pub freq_bias1: ParamId,
    pub freq_mix2: ParamId,
    pub freq_bias2: ParamId,
    pub spatial1: ParamId,
    pub spatial_bias1: ParamId,
    pub spatial2: ParamId,
    pub spatial_bias2: ParamId,
    pub channels: usize,
}

impl FtrBlockParams {
    pub fn init(prefix: &str, channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let fm = Shape::new(2 * channels, 2 * channels, 1, 1);
        let fb = Shape::new(1, 2 * channels, 1, 1);
        let sk = Shape::new(channels, channels, 3, 3);
        let sb = Shape::new(1, channels, 1, 1);
        FtrBlockParams {
            freq_mix1: store.register(format!("{prefix}.f1.w"), ParamKind::Kernel, uniform_fan_in(fm, rng)),
            freq_bias1: store.register(format!("{prefix}.f1.b"), ParamKind::Bias, Tensor::zeros(fb)),
            freq_mix2: store.register(format!("{prefix}.f2.w"), ParamKind::Kernel, uniform_fan_in(fm, rng)),
            freq_bias2: store.register(format!("{prefix}.f2.b"), ParamKind::Bias, Tensor::zeros(fb)),
            spatial1: store.register(format!("{prefix}.s1.w"), ParamKind::Kernel, uniform_fan_in(sk, rng)),
            spatial_bias1: store.register(format!("{prefix}.s1.b"), ParamKind::Bias, Tensor::zeros(sb)),
            spatial2: store.register(format!("{prefix}.s2.w"), ParamKind::Kernel, uniform_fan_in(sk, rng)),
            spatial_bias2: store.register(format!("{prefix}.s2.b"), ParamKind::Bias, Tensor::zeros(sb)),
            channels,
        }
    }
}

pub fn ftr_block(tape: &Tape, store: &ParamStore, x: Var, p: &FtrBlockParams) -> Result<Var> {
    let s = tape.shape(x);
    if s.c != p.channels {
        return Err(Error::ShapeMismatch {
            context: "ftr_block channels",
            lhs: s.to_string(),
            rhs: format!("({} channels)", p.channels),
        });
    }
    let spec = tape.rfft2(x);
    let f = tape.conv2d(
        spec,
        tape.param(store, p.freq_mix1),
        Some(tape.param(store, p.freq_bias1)),
        ConvMode::Pointwise1x1,
        1,
        0,
    )?;
    let f = tape.relu(f);
    let f = tape.conv2d(
        f,
        tape.param(store, p.freq_mix2),
        Some(tape.param(store, p.freq_bias2)),
        ConvMode::Pointwise1x1,
        1,
        0,
    )?;
    let freq_branch = tape.irfft2(f, s.w)?;

    let sp = tape.conv2d(
        x,
        tape.param(store, p.spatial1),
        Some(tape.param(store, p.spatial_bias1)),
        ConvMode::Full3x3,
        1,
        1,
    )?;
    let sp = tape.relu(sp);
    let spatial_branch = tape.conv2d(
        sp,
        tape.param(store, p.spatial2),
        Some(tape.param(store, p.spatial_bias2)),
        ConvMode::Full3x3,
        1,
        1,
    )?;

    tape.add(tape.add(x, freq_branch)?, spatial_branch)
}
