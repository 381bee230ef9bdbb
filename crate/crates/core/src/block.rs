//! MBConv operators and their collapsed single-convolution form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_backward_padded, conv2d_padded};
use crate::nn::{
    conv2d, conv2d_backward, grafted, grafted_backward, relu6, relu6_backward, BatchNormState,
    BnCache, BnMode, ConvWeights,
};
use crate::tensor::{Element, Tensor};

/// One candidate operator: kernel size, expansion ratio and linearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub linear: bool,
    pub kernel: usize,
    pub expansion: usize,
}

impl OperatorSpec {
    pub fn name(&self) -> String {
        format!(
            "{}_k{}_e{}",
            if self.linear { "lin" } else { "nl" },
            self.kernel,
            self.expansion
        )
    }
}

/// Per-forward options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pass {
    pub bn: BnMode,
    /// Grafting coefficient for the internal activations of linear
    /// operators. `None` runs them as exact identities.
    pub graft: Option<f64>,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        bn: BnMode::Train,
        graft: None,
    };
    pub const INFER: Pass = Pass {
        bn: BnMode::Infer,
        graft: None,
    };
    pub const CALIBRATE: Pass = Pass {
        bn: BnMode::Calibrate,
        graft: None,
    };

    pub fn with_graft(mut self, eps: Option<f64>) -> Self {
        self.graft = eps;
        self
    }
}

/// Convolution optionally followed by batch norm. After folding, `bn` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T = f32> {
    pub conv: ConvWeights<T>,
    pub bn: Option<BatchNormState<T>>,
}

#[derive(Clone, Debug)]
pub struct ConvBnCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    conv_pad: usize,
    pad_out: usize,
}

/// Surrounds each channel plane with a frame of width `pad` filled with that
/// channel's bias, i.e. what the convolution would output on zero input.
fn pad_with_bias<T: Element>(y: &Tensor<T>, pad: usize, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.dims4()?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for (i, plane) in y.data().chunks_exact(h * w).enumerate() {
        let b = bias.data()[i % c];
        out.extend(std::iter::repeat(b).take(pad * pw));
        for row in plane.chunks_exact(w) {
            out.extend(std::iter::repeat(b).take(pad));
            out.extend_from_slice(row);
            out.extend(std::iter::repeat(b).take(pad));
        }
        out.extend(std::iter::repeat(b).take(pad * pw));
    }
    Tensor::new(&[n, c, ph, pw], out)
}

/// Splits a gradient on a padded plane into the interior gradient and the
/// per-channel sum over the frame.
fn crop_border<T: Element>(g: &Tensor<T>, pad: usize) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, ph, pw) = g.dims4()?;
    let (h, w) = (ph - 2 * pad, pw - 2 * pad);
    let mut inner = Vec::with_capacity(n * c * h * w);
    let mut border = vec![T::zero(); c];
    for (i, plane) in g.data().chunks_exact(ph * pw).enumerate() {
        let total: T = plane.iter().copied().sum();
        let mut kept = T::zero();
        for row in plane.chunks_exact(pw).skip(pad).take(h) {
            let r = &row[pad..pad + w];
            kept += r.iter().copied().sum::<T>();
            inner.extend_from_slice(r);
        }
        border[i % c] += total - kept;
    }
    Ok((Tensor::new(&[n, c, h, w], inner)?, border))
}

impl<T: Element> ConvBn<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: ConvWeights::he_init(c_in, c_out, kernel, stride, groups, rng)?,
            bn: Some(BatchNormState::new(c_out)),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        let pad = self.conv.padding;
        self.forward_ext(x, mode, pad, 0)
    }

    /// Convolves with zero padding `conv_pad`, then frames the result with
    /// `pad_out` rows/columns of bias before batch norm. Batch statistics
    /// ignore the frame.
    pub fn forward_ext(
        &mut self,
        x: &Tensor<T>,
        mode: BnMode,
        conv_pad: usize,
        pad_out: usize,
    ) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        let mut y = conv2d_padded(x, &self.conv, conv_pad)?;
        if pad_out > 0 {
            y = pad_with_bias(&y, pad_out, &self.conv.bias)?;
        }
        let (y, bn) = match self.bn.as_mut() {
            Some(bn) => {
                let (z, c) = bn.forward_bordered(&y, mode, pad_out)?;
                (z, Some(c))
            }
            None => (y, None),
        };
        Ok((
            y,
            ConvBnCache {
                input: x.clone(),
                bn,
                conv_pad,
                pad_out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ConvBnCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = match (self.bn.as_mut(), cache.bn.as_ref()) {
            (Some(bn), Some(c)) => bn.backward(c, grad)?,
            (None, None) => grad.clone(),
            _ => return Err(Error::InvalidArgument("batch-norm cache mismatch".into())),
        };
        if cache.pad_out > 0 {
            let (inner, border) = crop_border(&g, cache.pad_out)?;
            self.conv.bias.accumulate_grad(&border);
            g = inner;
        }
        conv2d_backward_padded(&cache.input, &mut self.conv, &g, cache.conv_pad)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.conv.params_mut().into_iter().collect();
        if let Some(bn) = self.bn.as_mut() {
            v.extend(bn.params_mut());
        }
        v
    }

    pub fn batch_norms_mut(&mut self) -> Option<&mut BatchNormState<T>> {
        self.bn.as_mut()
    }

    pub fn cast<U: Element>(&self) -> ConvBn<U> {
        ConvBn {
            conv: self.conv.cast(),
            bn: self.bn.as_ref().map(|b| b.cast()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Act {
    Relu6,
    Identity,
    Grafted(f64),
}

impl Act {
    fn forward<T: Element>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Act::Relu6 => Ok(relu6(x)),
            Act::Identity => Ok(x.clone()),
            Act::Grafted(e) => grafted(x, e),
        }
    }

    fn backward<T: Element>(self, x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Act::Relu6 => Ok(relu6_backward(x, g)),
            Act::Identity => Ok(g.clone()),
            Act::Grafted(e) => grafted_backward(x, e, g),
        }
    }
}

/// Inverted residual: 1x1 expand, KxK depthwise, 1x1 project, each with BN.
///
/// The operator zero-pads its input once, ahead of the expansion, so the
/// depthwise stage sees `act(BN(expand(0)))` outside the image rather than
/// zeros. Interior outputs are those of the usual same-padded block.
///
/// Non-linear operators use ReLU6 after expand and depthwise. Linear
/// operators use identities there and apply one ReLU6 after the residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct MbConv<T = f32> {
    pub spec: OperatorSpec,
    pub expand: ConvBn<T>,
    pub depthwise: ConvBn<T>,
    pub project: ConvBn<T>,
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub struct MbConvCache<T> {
    act: Act,
    expand: ConvBnCache<T>,
    h1: Tensor<T>,
    depthwise: ConvBnCache<T>,
    h2: Tensor<T>,
    project: ConvBnCache<T>,
    pre_out: Option<Tensor<T>>,
}

impl<T> MbConvCache<T> {
    /// Number of activation tensors held for the backward pass.
    pub fn live_tensors(&self) -> usize {
        // expand/depthwise/project inputs, two pre-activations, optional pre-ReLU6
        5 + usize::from(self.pre_out.is_some())
    }
}

impl<T: Element> MbConv<T> {
    pub fn new<R: Rng + ?Sized>(
        spec: OperatorSpec,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mid = c_in * spec.expansion;
        Ok(MbConv {
            spec,
            expand: ConvBn::new(c_in, mid, 1, 1, 1, rng)?,
            depthwise: ConvBn::new(mid, mid, spec.kernel, stride, mid, rng)?,
            project: ConvBn::new(mid, c_out, 1, 1, 1, rng)?,
            residual: stride == 1 && c_in == c_out,
        })
    }

    pub fn c_in(&self) -> usize {
        self.expand.conv.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.project.conv.c_out()
    }

    pub fn stride(&self) -> usize {
        self.depthwise.conv.stride
    }

    pub fn is_folded(&self) -> bool {
        self.expand.bn.is_none() && self.depthwise.bn.is_none() && self.project.bn.is_none()
    }

    fn act(&self, pass: Pass) -> Act {
        if !self.spec.linear {
            Act::Relu6
        } else {
            match pass.graft {
                Some(e) if e < 1.0 => Act::Grafted(e),
                _ => Act::Identity,
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Result<(Tensor<T>, MbConvCache<T>)> {
        let act = self.act(pass);
        // Zero-padding the input before the 1x1 expansion is realised by
        // framing the expansion output with its bias; the depthwise conv then
        // runs unpadded. This keeps the whole linear chain one convolution.
        let pad = self.depthwise.conv.padding;
        let (h1, expand) = self.expand.forward_ext(x, pass.bn, 0, pad)?;
        let a1 = act.forward(&h1)?;
        let (h2, depthwise) = self.depthwise.forward_ext(&a1, pass.bn, 0, 0)?;
        let a2 = act.forward(&h2)?;
        let (mut s, project) = self.project.forward_ext(&a2, pass.bn, 0, 0)?;
        if self.residual {
            s.axpy(T::one(), x)?;
        }
        let (out, pre_out) = if self.spec.linear {
            (relu6(&s), Some(s))
        } else {
            (s, None)
        };
        Ok((
            out,
            MbConvCache {
                act,
                expand,
                h1,
                depthwise,
                h2,
                project,
                pre_out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MbConvCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let gs = match &cache.pre_out {
            Some(s) => relu6_backward(s, grad),
            None => grad.clone(),
        };
        let ga2 = self.project.backward(&cache.project, &gs)?;
        let gh2 = cache.act.backward(&cache.h2, &ga2)?;
        let ga1 = self.depthwise.backward(&cache.depthwise, &gh2)?;
        let gh1 = cache.act.backward(&cache.h1, &ga1)?;
        let mut gx = self.expand.backward(&cache.expand, &gh1)?;
        if self.residual {
            gx.axpy(T::one(), &gs)?;
        }
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.expand.params_mut();
        v.extend(self.depthwise.params_mut());
        v.extend(self.project.params_mut());
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        [&mut self.expand, &mut self.depthwise, &mut self.project]
            .into_iter()
            .filter_map(|c| c.bn.as_mut())
            .collect()
    }

    pub fn cast<U: Element>(&self) -> MbConv<U> {
        MbConv {
            spec: self.spec,
            expand: self.expand.cast(),
            depthwise: self.depthwise.cast(),
            project: self.project.cast(),
            residual: self.residual,
        }
    }
}

/// A linear MBConv after structural collapse: one dense conv, optional ReLU6.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapsedConv<T = f32> {
    pub conv: ConvWeights<T>,
    pub relu6: bool,
}

#[derive(Clone, Debug)]
pub struct CollapsedCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

impl<T: Element> CollapsedConv<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, CollapsedCache<T>)> {
        let pre = conv2d(x, &self.conv)?;
        let out = if self.relu6 { relu6(&pre) } else { pre.clone() };
        Ok((
            out,
            CollapsedCache {
                input: x.clone(),
                pre,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CollapsedCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = if self.relu6 {
            relu6_backward(&cache.pre, grad)
        } else {
            grad.clone()
        };
        conv2d_backward(&cache.input, &mut self.conv, &g)
    }

    pub fn cast<U: Element>(&self) -> CollapsedConv<U> {
        CollapsedConv {
            conv: self.conv.cast(),
            relu6: self.relu6,
        }
    }
}

/// A searchable-layer slot in a stand-alone network.
#[derive(Clone, Debug, PartialEq)]
pub enum Block<T = f32> {
    MbConv(MbConv<T>),
    Collapsed(CollapsedConv<T>),
}

#[derive(Clone, Debug)]
pub enum BlockCache<T> {
    MbConv(MbConvCache<T>),
    Collapsed(CollapsedCache<T>),
}

impl<T> BlockCache<T> {
    pub fn live_tensors(&self) -> usize {
        match self {
            BlockCache::MbConv(c) => c.live_tensors(),
            BlockCache::Collapsed(_) => 2,
        }
    }
}

impl<T: Element> Block<T> {
    pub fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Result<(Tensor<T>, BlockCache<T>)> {
        match self {
            Block::MbConv(m) => m.forward(x, pass).map(|(y, c)| (y, BlockCache::MbConv(c))),
            Block::Collapsed(c) => c.forward(x).map(|(y, k)| (y, BlockCache::Collapsed(k))),
        }
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (Block::MbConv(m), BlockCache::MbConv(c)) => m.backward(c, grad),
            (Block::Collapsed(m), BlockCache::Collapsed(c)) => m.backward(c, grad),
            _ => Err(Error::InvalidArgument("block cache mismatch".into())),
        }
    }

    /// Convolution layers executed at inference.
    pub fn conv_layers(&self) -> Vec<&ConvWeights<T>> {
        match self {
            Block::MbConv(m) => vec![&m.expand.conv, &m.depthwise.conv, &m.project.conv],
            Block::Collapsed(c) => vec![&c.conv],
        }
    }

    pub fn depth(&self) -> usize {
        self.conv_layers().len()
    }

    pub fn c_out(&self) -> usize {
        match self {
            Block::MbConv(m) => m.c_out(),
            Block::Collapsed(c) => c.conv.c_out(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Block::MbConv(m) => m.params_mut(),
            Block::Collapsed(c) => c.conv.params_mut().into_iter().collect(),
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        match self {
            Block::MbConv(m) => m.batch_norms_mut(),
            Block::Collapsed(_) => Vec::new(),
        }
    }

    pub fn cast<U: Element>(&self) -> Block<U> {
        match self {
            Block::MbConv(m) => Block::MbConv(m.cast()),
            Block::Collapsed(c) => Block::Collapsed(c.cast()),
        }
    }
}
