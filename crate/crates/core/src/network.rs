//! Stand-alone networks: stem, a stack of blocks and a pooled linear head.

use serde::{Deserialize, Serialize};

use crate::block::{Block, BlockCache, ConvBn, ConvBnCache, OperatorSpec, Pass};
use crate::error::{Error, Result};
use crate::nn::loss::{global_avg_pool, global_avg_pool_backward};
use crate::nn::{relu6, relu6_backward, BatchNormState, ConvGeometry, Linear};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    pub stem: ConvBn<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct NetworkCache<T> {
    stem: ConvBnCache<T>,
    stem_pre: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    pooled_from: Vec<usize>,
    pooled: Tensor<T>,
}

/// Serializable structure of one block, used by checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockLayout {
    Mbconv {
        spec: OperatorSpec,
        c_in: usize,
        c_out: usize,
        stride: usize,
        folded: bool,
    },
    Collapsed {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        relu6: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_folded: bool,
    pub classes: usize,
    pub blocks: Vec<BlockLayout>,
}

impl NetworkLayout {
    /// Conv geometries of every executed conv, stem first.
    pub fn conv_geometries(&self) -> Vec<ConvGeometry> {
        let geo = |c_in, c_out, kernel, stride, groups| ConvGeometry {
            c_in,
            c_out,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            groups,
        };
        let mut out = vec![geo(self.input_channels, self.stem_channels, 3, 2, 1)];
        for b in &self.blocks {
            match *b {
                BlockLayout::Mbconv {
                    spec,
                    c_in,
                    c_out,
                    stride,
                    ..
                } => {
                    let mid = c_in * spec.expansion;
                    out.push(geo(c_in, mid, 1, 1, 1));
                    out.push(geo(mid, mid, spec.kernel, stride, mid));
                    out.push(geo(mid, c_out, 1, 1, 1));
                }
                BlockLayout::Collapsed {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    ..
                } => out.push(geo(c_in, c_out, kernel, stride, 1)),
            }
        }
        out
    }

    /// Same list as [`Network::layer_costs`], computed from structure alone.
    pub fn layer_costs(&self, input_side: usize) -> Result<Vec<LayerCost>> {
        let mut side = input_side;
        let mut out = Vec::new();
        let mut last = self.stem_channels;
        for g in self.conv_geometries() {
            let o = g.out_size(side)?;
            out.push(LayerCost { macs: g.macs(o, o) });
            side = o;
            last = g.c_out;
        }
        out.push(LayerCost {
            macs: (last * self.classes) as u64,
        });
        Ok(out)
    }
}

/// Cost-relevant description of one executed layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerCost {
    pub macs: u64,
}

impl<T: Element> Network<T> {
    pub fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Result<(Tensor<T>, NetworkCache<T>)> {
        let (stem_pre, stem) = self.stem.forward(x, pass.bn)?;
        let mut h = relu6(&stem_pre);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h, pass)?;
            caches.push(c);
            h = y;
        }
        let pooled = global_avg_pool(&h)?;
        let logits = self.head.forward(&pooled)?;
        Ok((
            logits,
            NetworkCache {
                stem,
                stem_pre,
                blocks: caches,
                pooled_from: h.shape().to_vec(),
                pooled,
            },
        ))
    }

    /// Inference-mode logits.
    pub fn logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x, Pass::INFER).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &NetworkCache<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let gp = self.head.backward(&cache.pooled, grad_logits)?;
        let mut g = global_avg_pool_backward(&cache.pooled_from, &gp)?;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g)?;
        }
        let g = relu6_backward(&cache.stem_pre, &g);
        self.stem.backward(&cache.stem, &g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        let mut v: Vec<&mut BatchNormState<T>> = self.stem.bn.as_mut().into_iter().collect();
        for b in &mut self.blocks {
            v.extend(b.batch_norms_mut());
        }
        v
    }

    /// Number of conv layers in the searchable blocks.
    /// Forward that keeps no activations for backward. With
    /// [`Pass::CALIBRATE`] every batch norm ends up holding the exact
    /// statistics of its input over this batch.
    pub fn forward_no_cache(&mut self, x: &Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let (stem_pre, _) = self.stem.forward(x, pass.bn)?;
        let mut h = relu6(&stem_pre);
        for b in &mut self.blocks {
            h = b.forward(&h, pass)?.0;
        }
        self.head.forward(&global_avg_pool(&h)?)
    }

    /// Batch norms with their layer names (`stem.bn`, `blocks.<i>.expand.bn`,
    /// ...), in forward order.
    pub fn named_batch_norms_mut(&mut self) -> Vec<(String, &mut BatchNormState<T>)> {
        let mut out = Vec::new();
        if let Some(bn) = self.stem.bn.as_mut() {
            out.push(("stem.bn".to_string(), bn));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Block::MbConv(m) = b {
                for (part, unit) in [
                    ("expand", &mut m.expand),
                    ("depthwise", &mut m.depthwise),
                    ("project", &mut m.project),
                ] {
                    if let Some(bn) = unit.bn.as_mut() {
                        out.push((format!("blocks.{i}.{part}.bn"), bn));
                    }
                }
            }
        }
        out
    }

    pub fn searchable_depth(&self) -> usize {
        self.blocks.iter().map(Block::depth).sum()
    }

    pub fn classes(&self) -> usize {
        self.head.d_out()
    }

    /// Executed layers with their MAC counts at the given square input side.
    /// The stem, every conv in the blocks and the head are listed.
    pub fn layer_costs(&self, input_side: usize) -> Result<Vec<LayerCost>> {
        let mut out = Vec::new();
        let mut side = input_side;
        let mut push = |geo: ConvGeometry, side: &mut usize| -> Result<()> {
            let o = geo.out_size(*side)?;
            out.push(LayerCost { macs: geo.macs(o, o) });
            *side = o;
            Ok(())
        };
        push(self.stem.conv.geometry()?, &mut side)?;
        for b in &self.blocks {
            for c in b.conv_layers() {
                push(c.geometry()?, &mut side)?;
            }
        }
        out.push(LayerCost {
            macs: (self.head.d_in() * self.head.d_out()) as u64,
        });
        Ok(out)
    }

    pub fn layout(&self) -> NetworkLayout {
        NetworkLayout {
            input_channels: self.stem.conv.c_in(),
            stem_channels: self.stem.conv.c_out(),
            stem_folded: self.stem.bn.is_none(),
            classes: self.classes(),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::MbConv(m) => BlockLayout::Mbconv {
                        spec: m.spec,
                        c_in: m.c_in(),
                        c_out: m.c_out(),
                        stride: m.stride(),
                        folded: m.is_folded(),
                    },
                    Block::Collapsed(c) => BlockLayout::Collapsed {
                        c_in: c.conv.c_in(),
                        c_out: c.conv.c_out(),
                        kernel: c.conv.kernel(),
                        stride: c.conv.stride,
                        relu6: c.relu6,
                    },
                })
                .collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            stem: self.stem.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            head: self.head.cast(),
        }
    }

    /// Named tensors in a fixed order: `stem.*`, `blocks.<i>.*`, `head.*`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        push_convbn(&mut out, "stem", &self.stem);
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::MbConv(m) => {
                    push_convbn(&mut out, &format!("blocks.{i}.expand"), &m.expand);
                    push_convbn(&mut out, &format!("blocks.{i}.depthwise"), &m.depthwise);
                    push_convbn(&mut out, &format!("blocks.{i}.project"), &m.project);
                }
                Block::Collapsed(c) => {
                    out.push((format!("blocks.{i}.conv.weight"), &c.conv.weight));
                    out.push((format!("blocks.{i}.conv.bias"), &c.conv.bias));
                }
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable counterpart of [`Network::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        push_convbn_mut(&mut out, "stem", &mut self.stem);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match b {
                Block::MbConv(m) => {
                    push_convbn_mut(&mut out, &format!("blocks.{i}.expand"), &mut m.expand);
                    push_convbn_mut(&mut out, &format!("blocks.{i}.depthwise"), &mut m.depthwise);
                    push_convbn_mut(&mut out, &format!("blocks.{i}.project"), &mut m.project);
                }
                Block::Collapsed(c) => {
                    out.push((format!("blocks.{i}.conv.weight"), &mut c.conv.weight));
                    out.push((format!("blocks.{i}.conv.bias"), &mut c.conv.bias));
                }
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Zero-initialised network with the given structure, to be filled from a
    /// checkpoint.
    pub fn from_layout(layout: &NetworkLayout) -> Result<Self> {
        use crate::block::{CollapsedConv, MbConv};
        use crate::nn::ConvWeights;
        let conv = |c_in: usize, c_out: usize, k: usize, s: usize, g: usize| {
            ConvWeights::from_parts(
                Tensor::zeros(&[c_in, c_out / g, k, k]),
                Tensor::zeros(&[c_out]),
                s,
                (k - 1) / 2,
                g,
            )
        };
        let convbn = |w: crate::nn::ConvWeights<T>, folded: bool| ConvBn {
            bn: (!folded).then(|| BatchNormState::new(w.c_out())),
            conv: w,
        };
        let stem = convbn(
            conv(layout.input_channels, layout.stem_channels, 3, 2, 1)?,
            layout.stem_folded,
        );
        let mut blocks = Vec::new();
        let mut prev = layout.stem_channels;
        for b in &layout.blocks {
            let (c_in, block) = match *b {
                BlockLayout::Mbconv {
                    spec,
                    c_in,
                    c_out,
                    stride,
                    folded,
                } => {
                    let mid = c_in * spec.expansion;
                    (
                        c_in,
                        Block::MbConv(MbConv {
                            spec,
                            expand: convbn(conv(c_in, mid, 1, 1, 1)?, folded),
                            depthwise: convbn(conv(mid, mid, spec.kernel, stride, mid)?, folded),
                            project: convbn(conv(mid, c_out, 1, 1, 1)?, folded),
                            residual: stride == 1 && c_in == c_out,
                        }),
                    )
                }
                BlockLayout::Collapsed {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    relu6,
                } => (
                    c_in,
                    Block::Collapsed(CollapsedConv {
                        conv: conv(c_in, c_out, kernel, stride, 1)?,
                        relu6,
                    }),
                ),
            };
            if c_in != prev {
                return Err(Error::dim("block input channels", prev, c_in));
            }
            prev = block.c_out();
            blocks.push(block);
        }
        Ok(Network {
            stem,
            blocks,
            head: Linear {
                weight: Tensor::zeros(&[prev, layout.classes]),
                bias: Tensor::zeros(&[layout.classes]),
            },
        })
    }
}

pub(crate) fn push_convbn<'a, T: Element>(out: &mut Vec<(String, &'a Tensor<T>)>, p: &str, c: &'a ConvBn<T>) {
    out.push((format!("{p}.conv.weight"), &c.conv.weight));
    out.push((format!("{p}.conv.bias"), &c.conv.bias));
    if let Some(bn) = &c.bn {
        out.push((format!("{p}.bn.gamma"), &bn.gamma));
        out.push((format!("{p}.bn.beta"), &bn.beta));
        out.push((format!("{p}.bn.running_mean"), &bn.running_mean));
        out.push((format!("{p}.bn.running_var"), &bn.running_var));
    }
}

pub(crate) fn push_convbn_mut<'a, T: Element>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    p: &str,
    c: &'a mut ConvBn<T>,
) {
    out.push((format!("{p}.conv.weight"), &mut c.conv.weight));
    out.push((format!("{p}.conv.bias"), &mut c.conv.bias));
    if let Some(bn) = &mut c.bn {
        out.push((format!("{p}.bn.gamma"), &mut bn.gamma));
        out.push((format!("{p}.bn.beta"), &mut bn.beta));
        out.push((format!("{p}.bn.running_mean"), &mut bn.running_mean));
        out.push((format!("{p}.bn.running_var"), &mut bn.running_var));
    }
}
