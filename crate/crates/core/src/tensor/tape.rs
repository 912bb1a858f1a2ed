//! Reverse-mode autodiff over a dynamically recorded operation tape.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! [`Var`]s are cheap handles into it. Calling [`Tape::backward`] on a scalar
//! walks the recorded ops in reverse and accumulates gradients into every
//! reachable [`crate::tensor::param::Parameter`]. Tapes are single-threaded;
//! individual kernels may parallelize internally (deterministically).

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::fft;
use crate::tensor::kernels::{self, ConvMode, ScanDir};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::{map, sigmoid_scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f32),
    AddConst(usize),
    ClampConst(usize, f32, f32),
    Relu(usize),
    LeakyRelu(usize, f32),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    MulBcastScalar(usize, usize),
    MulBcastChannel(usize, usize),
    ScaleChannels(usize, Vec<f32>),
    SumAll(usize),
    MeanAll(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        mode: ConvMode,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        shift: usize,
        eps: f32,
    },
    SoftmaxLast(usize),
    L2NormSpatial(usize),
    Gram(usize, usize),
    AttnApply(usize, usize),
    Rfft2(usize),
    Irfft2 { input: usize },
    Scan { input: usize, kernel: usize, dir: ScanDir },
    ConcatChannels(Vec<usize>),
    Upsample2x(usize),
    Dropout { input: usize, mask: Tensor, keep: f32 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a non-learnable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Records the current value of a parameter; its gradient will be
    /// accumulated by [`Tape::backward`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Leaf { param: Some(id) })
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn item(&self, v: Var) -> Result<f32> {
        self.nodes.borrow()[v.0].value.item()
    }

    fn same_shape(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context,
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            });
        }
        Ok(())
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = {
            let nodes = self.nodes.borrow();
            crate::tensor::add(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            Tensor::from_vec(
                x.shape(),
                x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect(),
            )?
        };
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let v = {
            let nodes = self.nodes.borrow();
            crate::tensor::multiply(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    fn unary(&self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let v = map(&self.nodes.borrow()[a.0].value, f);
        self.push(v, op)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |v| -v, Op::Neg(a.0))
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a.0, c))
    }

    pub fn add_const(&self, a: Var, c: f32) -> Var {
        self.unary(a, |v| v + c, Op::AddConst(a.0))
    }

    pub fn clamp_const(&self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::ClampConst(a.0, lo, hi))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a.0))
    }

    pub fn leaky_relu(&self, a: Var, slope: f32) -> Var {
        self.unary(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f32::exp, Op::Exp(a.0))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Log(a.0))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a.0))
    }

    /// Multiplies by a one-element tensor, broadcast everywhere.
    pub fn mul_bcast_scalar(&self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s).numel() != 1 {
            return Err(Error::contract(format!(
                "mul_bcast_scalar needs a scalar, got {}",
                self.shape(s)
            )));
        }
        let v = {
            let nodes = self.nodes.borrow();
            let sv = nodes[s.0].value.data()[0];
            map(&nodes[x.0].value, |v| v * sv)
        };
        Ok(self.push(v, Op::MulBcastScalar(x.0, s.0)))
    }

    /// Multiplies an (N,C,H,W) tensor by an (N,1,H,W) map, broadcast over
    /// channels.
    pub fn mul_bcast_channel(&self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        if sa.c != 1 || sa.n != sx.n || sa.h != sx.h || sa.w != sx.w {
            return Err(Error::ShapeMismatch {
                context: "mul_bcast_channel",
                lhs: sx.to_string(),
                rhs: sa.to_string(),
            });
        }
        let v = {
            let nodes = self.nodes.borrow();
            let (xv, av) = (&nodes[x.0].value, &nodes[a.0].value);
            let mut out = Tensor::zeros(sx);
            let plane = sx.plane();
            for n in 0..sx.n {
                let m = &av.data()[n * plane..][..plane];
                for c in 0..sx.c {
                    let src = &xv.data()[(n * sx.c + c) * plane..][..plane];
                    let dst = &mut out.data_mut()[(n * sx.c + c) * plane..][..plane];
                    for ((d, s), w) in dst.iter_mut().zip(src).zip(m) {
                        *d = s * w;
                    }
                }
            }
            out
        };
        Ok(self.push(v, Op::MulBcastChannel(x.0, a.0)))
    }

    /// Scales each channel by a fixed (non-learnable) weight.
    pub fn scale_channels(&self, x: Var, weights: &[f32]) -> Result<Var> {
        let s = self.shape(x);
        if weights.len() != s.c {
            return Err(Error::contract(format!(
                "scale_channels got {} weights for {} channels",
                weights.len(),
                s.c
            )));
        }
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let mut out = Tensor::zeros(s);
            let plane = s.plane();
            for nc in 0..s.n * s.c {
                let w = weights[nc % s.c];
                let src = &xv.data()[nc * plane..][..plane];
                let dst = &mut out.data_mut()[nc * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v * w;
                }
            }
            out
        };
        Ok(self.push(v, Op::ScaleChannels(x.0, weights.to_vec())))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let v = kernels::sum_all(self.nodes.borrow()[a.0].value.data());
        self.push(Tensor::scalar(v), Op::SumAll(a.0))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (sum, n) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (kernels::sum_all(t.data()), t.numel())
        };
        self.push(Tensor::scalar(sum / n as f32), Op::MeanAll(a.0))
    }

    // -- structured ops ------------------------------------------------------

    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        mode: ConvMode,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let d = kernels::conv_dims(self.shape(input), self.shape(kernel), mode, stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b).numel() != d.co {
                return Err(Error::ShapeMismatch {
                    context: "conv2d bias",
                    lhs: self.shape(b).to_string(),
                    rhs: format!("({} outputs)", d.co),
                });
            }
        }
        let v = {
            let nodes = self.nodes.borrow();
            kernels::conv2d_fwd(
                &nodes[input.0].value,
                &nodes[kernel.0].value,
                bias.map(|b| &nodes[b.0].value),
                &d,
            )
        };
        Ok(self.push(
            v,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                mode,
                stride,
                padding,
            },
        ))
    }

    /// Layer norm over the channel axis, statistics per spatial location.
    pub fn layer_norm(&self, input: Var, gain: Var, shift: Var, eps: f32) -> Result<Var> {
        let s = self.shape(input);
        for (name, v) in [("gain", gain), ("shift", shift)] {
            if self.shape(v).numel() != s.c {
                return Err(Error::contract(format!(
                    "layer_norm {name} has {} values for {} channels",
                    self.shape(v).numel(),
                    s.c
                )));
            }
        }
        let v = {
            let nodes = self.nodes.borrow();
            kernels::layer_norm_fwd(
                &nodes[input.0].value,
                &nodes[gain.0].value,
                &nodes[shift.0].value,
                eps,
            )
        };
        Ok(self.push(
            v,
            Op::LayerNorm {
                input: input.0,
                gain: gain.0,
                shift: shift.0,
                eps,
            },
        ))
    }

    /// Softmax along the final axis; rows are max-shifted for stability.
    pub fn softmax_last(&self, a: Var) -> Var {
        let v = kernels::softmax_last(&self.nodes.borrow()[a.0].value);
        self.push(v, Op::SoftmaxLast(a.0))
    }

    /// L2-normalizes each (batch, channel) plane over its spatial extent.
    pub fn l2norm_spatial(&self, a: Var) -> Var {
        let v = kernels::l2norm_spatial_fwd(&self.nodes.borrow()[a.0].value);
        self.push(v, Op::L2NormSpatial(a.0))
    }

    /// CxC channel correlation: `out[n,0,i,j] = <a_i, b_j>` over space.
    pub fn gram(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("gram", a, b)?;
        let v = {
            let nodes = self.nodes.borrow();
            kernels::gram(&nodes[a.0].value, &nodes[b.0].value)
        };
        Ok(self.push(v, Op::Gram(a.0, b.0)))
    }

    /// Applies an (N,1,C,C) attention matrix to the channels of `v`.
    pub fn attn_apply(&self, s: Var, v: Var) -> Result<Var> {
        let (ss, vs) = (self.shape(s), self.shape(v));
        if ss.c != 1 || ss.h != vs.c || ss.w != vs.c || ss.n != vs.n {
            return Err(Error::ShapeMismatch {
                context: "attn_apply",
                lhs: ss.to_string(),
                rhs: vs.to_string(),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            kernels::attn_apply(&nodes[s.0].value, &nodes[v.0].value)
        };
        Ok(self.push(out, Op::AttnApply(s.0, v.0)))
    }

    /// Real 2-D FFT in stacked-channel form: (N,C,H,W) -> (N,2C,H,W/2+1),
    /// real parts in the first C channels, imaginary parts in the rest.
    pub fn rfft2(&self, a: Var) -> Var {
        let v = fft::rfft2_stacked(&self.nodes.borrow()[a.0].value);
        self.push(v, Op::Rfft2(a.0))
    }

    /// Inverse of [`Tape::rfft2`]; `width` is the original spatial width.
    pub fn irfft2(&self, a: Var, width: usize) -> Result<Var> {
        let s = self.shape(a);
        if width / 2 + 1 != s.w {
            return Err(Error::contract(format!(
                "irfft2 width {} inconsistent with spectrum shape {}",
                width, s
            )));
        }
        let v = fft::irfft2_stacked(&self.nodes.borrow()[a.0].value, width)?;
        Ok(self.push(v, Op::Irfft2 { input: a.0 }))
    }

    /// Recurrent directional scan h(t) = relu(f(t) + G h(t-1)).
    pub fn scan(&self, f: Var, g: Var, dir: ScanDir) -> Result<Var> {
        let (fs, gs) = (self.shape(f), self.shape(g));
        if gs.n != fs.c || gs.c != fs.c || gs.h != 1 || gs.w != 1 {
            return Err(Error::ShapeMismatch {
                context: "directional_scan kernel",
                lhs: gs.to_string(),
                rhs: fs.to_string(),
            });
        }
        let v = {
            let nodes = self.nodes.borrow();
            kernels::scan_fwd(&nodes[f.0].value, &nodes[g.0].value, dir)
        };
        Ok(self.push(v, Op::Scan { input: f.0, kernel: g.0, dir }))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]);
        let mut c_total = 0;
        for p in parts {
            let s = self.shape(*p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    context: "concat_channels",
                    lhs: first.to_string(),
                    rhs: s.to_string(),
                });
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Tensor::zeros(out_shape);
        {
            let nodes = self.nodes.borrow();
            let plane = first.plane();
            for n in 0..first.n {
                let mut c_off = 0;
                for p in parts {
                    let t = &nodes[p.0].value;
                    let c = t.shape().c;
                    let src = &t.data()[n * c * plane..][..c * plane];
                    out.data_mut()[(n * c_total + c_off) * plane..][..c * plane]
                        .copy_from_slice(src);
                    c_off += c;
                }
            }
        }
        Ok(self.push(out, Op::ConcatChannels(parts.iter().map(|p| p.0).collect())))
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample2x(&self, a: Var) -> Var {
        let v = kernels::upsample2x_fwd(&self.nodes.borrow()[a.0].value);
        self.push(v, Op::Upsample2x(a.0))
    }

    /// Inverted dropout with a caller-supplied binary mask.
    pub fn dropout(&self, x: Var, mask: Tensor, keep: f32) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(Error::ShapeMismatch {
                context: "dropout mask",
                lhs: self.shape(x).to_string(),
                rhs: mask.shape().to_string(),
            });
        }
        let inv = 1.0 / keep;
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor::from_vec(
                xv.shape(),
                xv.data()
                    .iter()
                    .zip(mask.data())
                    .map(|(v, m)| v * m * inv)
                    .collect(),
            )?
        };
        Ok(self.push(v, Op::Dropout { input: x.0, mask, keep }))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss; accumulates into the grad of every
    /// parameter recorded on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn accum(grads: &mut [Option<Tensor>], idx: usize, add: Tensor) {
            match &mut grads[idx] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(add.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(add),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        store.accumulate_grad(*pid, &g)?;
                    }
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, map(&g, |v| -v));
                    accum(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = crate::tensor::multiply(&g, &nodes[*b].value)?;
                    let gb = crate::tensor::multiply(&g, &nodes[*a].value)?;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Neg(a) => accum(&mut grads, *a, map(&g, |v| -v)),
                Op::Scale(a, c) => {
                    let c = *c;
                    accum(&mut grads, *a, map(&g, |v| v * c));
                }
                Op::AddConst(a) => accum(&mut grads, *a, g),
                Op::ClampConst(a, lo, hi) => {
                    let x = &nodes[*a].value;
                    let (lo, hi) = (*lo, *hi);
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(x.data())
                            .map(|(g, x)| if *x >= lo && *x <= hi { *g } else { 0.0 })
                            .collect(),
                    )?;
                    accum(&mut grads, *a, gx);
                }
                Op::Relu(a) => {
                    let y = &nodes[i].value;
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                            .collect(),
                    )?;
                    accum(&mut grads, *a, gx);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &nodes[*a].value;
                    let s = *slope;
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(x.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { s * g })
                            .collect(),
                    )?;
                    accum(&mut grads, *a, gx);
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[i].value;
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect(),
                    )?;
                    accum(&mut grads, *a, gx);
                }
                Op::Exp(a) => {
                    let gx = crate::tensor::multiply(&g, &nodes[i].value)?;
                    accum(&mut grads, *a, gx);
                }
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect(),
                    )?;
                    accum(&mut grads, *a, gx);
                }
                Op::Abs(a) => {
                    let x = &nodes[*a].value;
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(x.data())
                            .map(|(g, x)| g * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                            .collect(),
                    )?;
                    accum(&mut grads, *a, gx);
                }
                Op::MulBcastScalar(x, s) => {
                    let sv = nodes[*s].value.data()[0];
                    let gx = map(&g, |v| v * sv);
                    let mut dot = 0.0f32;
                    for (gv, xv) in g.data().iter().zip(nodes[*x].value.data()) {
                        dot += gv * xv;
                    }
                    accum(&mut grads, *x, gx);
                    accum(&mut grads, *s, Tensor::scalar(dot));
                }
                Op::MulBcastChannel(x, a) => {
                    let sx = nodes[*x].value.shape();
                    let plane = sx.plane();
                    let xm = &nodes[*x].value;
                    let am = &nodes[*a].value;
                    let mut gx = Tensor::zeros(sx);
                    let mut ga = Tensor::zeros(am.shape());
                    for n in 0..sx.n {
                        let m = &am.data()[n * plane..][..plane];
                        let gan = &mut ga.data_mut()[n * plane..][..plane];
                        for c in 0..sx.c {
                            let off = (n * sx.c + c) * plane;
                            let gsrc = &g.data()[off..][..plane];
                            let xsrc = &xm.data()[off..][..plane];
                            let gdst = &mut gx.data_mut()[off..][..plane];
                            for (((gd, gs), xs), (mv, gac)) in gdst
                                .iter_mut()
                                .zip(gsrc)
                                .zip(xsrc)
                                .zip(m.iter().zip(gan.iter_mut()))
                            {
                                *gd = gs * mv;
                                *gac += gs * xs;
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                    accum(&mut grads, *a, ga);
                }
                Op::ScaleChannels(x, weights) => {
                    let sx = nodes[*x].value.shape();
                    let plane = sx.plane();
                    let mut gx = Tensor::zeros(sx);
                    for nc in 0..sx.n * sx.c {
                        let w = weights[nc % sx.c];
                        let src = &g.data()[nc * plane..][..plane];
                        let dst = &mut gx.data_mut()[nc * plane..][..plane];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = v * w;
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::SumAll(a) => {
                    let s = nodes[*a].value.shape();
                    accum(&mut grads, *a, Tensor::full(s, g.data()[0]));
                }
                Op::MeanAll(a) => {
                    let s = nodes[*a].value.shape();
                    let n = s.numel() as f32;
                    accum(&mut grads, *a, Tensor::full(s, g.data()[0] / n));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    mode,
                    stride,
                    padding,
                } => {
                    let d = kernels::conv_dims(
                        nodes[*input].value.shape(),
                        nodes[*kernel].value.shape(),
                        *mode,
                        *stride,
                        *padding,
                    )?;
                    let gx = kernels::conv2d_grad_input(&g, &nodes[*kernel].value, &d);
                    let gk = kernels::conv2d_grad_kernel(
                        &nodes[*input].value,
                        &g,
                        nodes[*kernel].value.shape(),
                        &d,
                    );
                    accum(&mut grads, *input, gx);
                    accum(&mut grads, *kernel, gk);
                    if let Some(b) = bias {
                        let gb = kernels::conv2d_grad_bias(&g, d.co)
                            .reshaped(nodes[*b].value.shape())?;
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::LayerNorm { input, gain, shift, eps } => {
                    let (gx, ggain, gshift) =
                        kernels::layer_norm_bwd(&nodes[*input].value, &nodes[*gain].value, &g, *eps);
                    accum(&mut grads, *input, gx);
                    accum(&mut grads, *gain, ggain.reshaped(nodes[*gain].value.shape())?);
                    accum(&mut grads, *shift, gshift.reshaped(nodes[*shift].value.shape())?);
                }
                Op::SoftmaxLast(a) => {
                    accum(&mut grads, *a, kernels::softmax_last_bwd(&nodes[i].value, &g));
                }
                Op::L2NormSpatial(a) => {
                    accum(&mut grads, *a, kernels::l2norm_spatial_bwd(&nodes[*a].value, &g));
                }
                Op::Gram(a, b) => {
                    let (ga, gb) = kernels::gram_bwd(&nodes[*a].value, &nodes[*b].value, &g);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::AttnApply(s, v) => {
                    let (gs, gv) = kernels::attn_apply_bwd(&nodes[*s].value, &nodes[*v].value, &g);
                    accum(&mut grads, *s, gs);
                    accum(&mut grads, *v, gv);
                }
                Op::Rfft2(a) => {
                    let width = nodes[*a].value.shape().w;
                    accum(&mut grads, *a, fft::rfft2_stacked_adjoint(&g, width));
                }
                Op::Irfft2 { input } => {
                    accum(&mut grads, *input, fft::irfft2_stacked_adjoint(&g));
                }
                Op::Scan { input, kernel, dir } => {
                    let (gf, gg) = kernels::scan_bwd(
                        &nodes[*input].value,
                        &nodes[*kernel].value,
                        &nodes[i].value,
                        &g,
                        *dir,
                    );
                    accum(&mut grads, *input, gf);
                    accum(&mut grads, *kernel, gg.reshaped(nodes[*kernel].value.shape())?);
                }
                Op::ConcatChannels(parts) => {
                    let out_shape = nodes[i].value.shape();
                    let plane = out_shape.plane();
                    let mut c_off = 0;
                    for p in parts {
                        let ps = nodes[*p].value.shape();
                        let mut gp = Tensor::zeros(ps);
                        for n in 0..out_shape.n {
                            let src = &g.data()[(n * out_shape.c + c_off) * plane..][..ps.c * plane];
                            gp.data_mut()[n * ps.c * plane..][..ps.c * plane].copy_from_slice(src);
                        }
                        accum(&mut grads, *p, gp);
                        c_off += ps.c;
                    }
                }
                Op::Upsample2x(a) => {
                    accum(&mut grads, *a, kernels::upsample2x_bwd(&g));
                }
                Op::Dropout { input, mask, keep } => {
                    let inv = 1.0 / keep;
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(mask.data())
                            .map(|(g, m)| g * m * inv)
                            .collect(),
                    )?;
                    accum(&mut grads, *input, gx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::param::ParamKind;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, ParamKind::Scalar, t);
        (s, id)
    }

    #[test]
    fn sum_grad_is_ones() {
        let (mut store, id) = store_with("x", Tensor::full(Shape::new(1, 2, 2, 2), 3.0));
        let t = Tape::new();
        let x = t.param(&store, id);
        let loss = t.sum_all(x);
        t.backward(loss, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let vals = vec![0.5, -1.0, 2.0, 0.0];
        let (mut store, id) = store_with(
            "x",
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vals.clone()).unwrap(),
        );
        let t = Tape::new();
        let x = t.param(&store, id);
        let loss = t.sum_all(t.mul(x, x).unwrap());
        t.backward(loss, &mut store).unwrap();
        for (g, v) in store.get(id).grad.data().iter().zip(&vals) {
            assert!((g - 2.0 * v).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut store, id) = store_with("x", Tensor::full(Shape::new(1, 1, 1, 3), 1.0));
        let t = Tape::new();
        let x = t.param(&store, id);
        let err = t.backward(x, &mut store).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn grads_accumulate_across_backwards() {
        let (mut store, id) = store_with("x", Tensor::scalar(2.0));
        let t = Tape::new();
        let x = t.param(&store, id);
        let loss = t.sum_all(x);
        t.backward(loss, &mut store).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data()[0], 2.0);
    }

    #[test]
    fn softmax_rows_stable_and_shift_invariant() {
        let t = Tape::new();
        let a = t.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0f32.ln()]).unwrap());
        let y = t.softmax_last(a);
        let v = t.value(y);
        assert!((v.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((v.data()[1] - 2.0 / 3.0).abs() < 1e-6);
        let shifted = t.add_const(a, 123.0);
        let y2 = t.value(t.softmax_last(shifted));
        for (p, q) in v.data().iter().zip(y2.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_splits_gradient() {
        let mut store = ParamStore::new();
        let a = store.register("a", ParamKind::Scalar, Tensor::full(Shape::new(1, 1, 1, 2), 1.0));
        let b = store.register("b", ParamKind::Scalar, Tensor::full(Shape::new(1, 2, 1, 2), 2.0));
        let t = Tape::new();
        let (va, vb) = (t.param(&store, a), t.param(&store, b));
        let cat = t.concat_channels(&[va, vb]).unwrap();
        assert_eq!(t.shape(cat), Shape::new(1, 3, 1, 2));
        let loss = t.sum_all(t.scale_channels(cat, &[1.0, 2.0, 3.0]).unwrap());
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(a).grad.data(), &[1.0, 1.0]);
        assert_eq!(store.get(b).grad.data(), &[2.0, 2.0, 3.0, 3.0]);
    }
}
