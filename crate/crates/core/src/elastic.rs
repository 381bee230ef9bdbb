//! Arbitrary-resolution elastic training: bilinear resizing, the resolution
//! sandwich with in-place distillation, per-resolution batch-norm
//! calibration and evaluation.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::block::Pass;
use crate::data::{random_hflip, Dataset};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::nn::loss::{argmax_rows, kl_divergence, softmax_cross_entropy};
use crate::nn::Sgd;
use crate::tensor::Tensor;
use crate::training::{cosine_lr, TrainSchedule};

/// Square input sides `r_min, r_min + step, ..., r_max`, all multiples of 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionGrid {
    pub r_min: usize,
    pub r_max: usize,
    pub step: usize,
}

impl Default for ResolutionGrid {
    fn default() -> Self {
        ResolutionGrid {
            r_min: 16,
            r_max: 32,
            step: 8,
        }
    }
}

impl ResolutionGrid {
    /// Checks the multiple-of-8 rules and that the smallest side survives the
    /// network's total stride.
    pub fn validate(&self, total_stride: usize) -> Result<()> {
        if self.step == 0 || self.step % 8 != 0 || self.r_min % 8 != 0 || self.r_max % 8 != 0 {
            return Err(Error::Config(format!(
                "elastic grid {}..{} step {} must use positive multiples of 8",
                self.r_min, self.r_max, self.step
            )));
        }
        if self.r_min == 0 || self.r_min > self.r_max || (self.r_max - self.r_min) % self.step != 0 {
            return Err(Error::Config(format!(
                "elastic grid {}..{} is not spanned by step {}",
                self.r_min, self.r_max, self.step
            )));
        }
        if self.r_min < total_stride {
            return Err(Error::Config(format!(
                "elastic r_min {} is below the network's total stride {total_stride}",
                self.r_min
            )));
        }
        Ok(())
    }

    pub fn resolutions(&self) -> Vec<usize> {
        (self.r_min..=self.r_max).step_by(self.step.max(1)).collect()
    }

    pub fn len(&self) -> usize {
        (self.r_max - self.r_min) / self.step + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Bilinear downscaling to `r x r` with half-pixel centres:
/// `src = (dst + 0.5) * H / r - 0.5`, clamped to `[0, H - 1]`.
pub fn resize_bilinear(x: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::Shape(format!("resize expects square images, got {h}x{w}")));
    }
    if r == 0 || r > h {
        return Err(Error::InvalidArgument(format!(
            "target side {r} must lie in 1..={h}; upscaling is unsupported"
        )));
    }
    if r == h {
        return Ok(x.clone());
    }
    let scale = h as f64 / r as f64;
    let taps: Vec<(usize, usize, f64)> = (0..r)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(h - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(n * c * r * r);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, wy) in &taps {
            for &(x0, x1, wx) in &taps {
                let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out.push((top * (1.0 - wy) + bot * wy) as f32);
            }
        }
    }
    Tensor::new(&[n, c, r, r], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticOptions {
    /// Smaller resolutions learn from the detached largest-resolution logits
    /// (on) or from the labels (off).
    pub distill: bool,
    /// Use every smaller grid resolution per step instead of the sandwich.
    pub full_m: bool,
}

impl Default for ElasticOptions {
    fn default() -> Self {
        ElasticOptions {
            distill: true,
            full_m: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticStepReport {
    pub ce: f64,
    /// `(resolution, loss)` for each smaller resolution, before averaging.
    pub smaller: Vec<(usize, f64)>,
    pub total: f64,
}

/// Resolutions trained in one step, largest first.
pub fn step_resolutions<R: Rng + ?Sized>(grid: &ResolutionGrid, full_m: bool, rng: &mut R) -> Vec<usize> {
    let all = grid.resolutions();
    let m = all.len();
    if full_m || m < 3 {
        if m < 3 {
            warn!("resolution grid has {m} entries; training on all of them");
        }
        return all.into_iter().rev().collect();
    }
    let mid = all[rng.gen_range(1..m - 1)];
    vec![all[m - 1], all[0], mid]
}

/// One elastic update: cross-entropy at the largest resolution, and at each
/// smaller sampled resolution either KL to the detached largest-resolution
/// distribution or cross-entropy, averaged over the smaller ones. Gradients
/// of all passes are summed before one optimizer step.
pub fn elastic_step<R: Rng + ?Sized>(
    net: &mut Network<f32>,
    x: &Tensor<f32>,
    y: &[usize],
    grid: &ResolutionGrid,
    opts: ElasticOptions,
    opt: &mut Sgd<f32>,
    rng: &mut R,
) -> Result<ElasticStepReport> {
    let res = step_resolutions(grid, opts.full_m, rng);
    net.zero_grad();
    let xl = resize_bilinear(x, res[0])?;
    let (logits, cache) = net.forward(&xl, Pass::TRAIN)?;
    let (ce, g) = softmax_cross_entropy(&logits, y)?;
    net.backward(&cache, &g)?;
    drop(cache);
    let teacher = Tensor::new(logits.shape(), logits.data().to_vec())?;
    let k = (res.len() - 1).max(1) as f32;
    let mut smaller = Vec::new();
    let mut total = ce;
    for &r in &res[1..] {
        let (s, c) = net.forward(&resize_bilinear(x, r)?, Pass::TRAIN)?;
        let (loss, g) = if opts.distill {
            kl_divergence(&s, &teacher)?
        } else {
            softmax_cross_entropy(&s, y)?
        };
        net.backward(&c, &g.scale(1.0 / k))?;
        total += loss / k as f64;
        smaller.push((r, loss));
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("elastic loss".into()));
    }
    opt.step(&mut net.params_mut())?;
    Ok(ElasticStepReport { ce, smaller, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub total: f64,
}

/// Elastic training with the schedule's optimizer settings.
pub fn train_elastic<R: Rng + ?Sized>(
    net: &mut Network<f32>,
    train: &Dataset,
    grid: &ResolutionGrid,
    schedule: &TrainSchedule,
    opts: ElasticOptions,
    rng: &mut R,
) -> Result<Vec<ElasticEpoch>> {
    schedule.validate()?;
    let mut opt = Sgd::<f32>::new(schedule.lr, schedule.momentum, schedule.weight_decay);
    let per_epoch = train.len().div_ceil(schedule.batch_size).max(1);
    let total_steps = schedule.epochs * per_epoch;
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 0..schedule.epochs {
        let (mut ce, mut tot) = (0.0, 0.0);
        let batches = train.epoch_batches(schedule.batch_size, rng);
        for b in &batches {
            let (mut x, y) = train.batch(b)?;
            if schedule.hflip {
                x = random_hflip(&x, rng)?;
            }
            opt.lr = cosine_lr(schedule.lr, step, total_steps);
            let r = elastic_step(net, &x, &y, grid, opts, &mut opt, rng)?;
            ce += r.ce;
            tot += r.total;
            step += 1;
        }
        let n = batches.len() as f64;
        info!("elastic epoch {epoch}: ce {:.4} total {:.4}", ce / n, tot / n);
        history.push(ElasticEpoch {
            epoch,
            ce: ce / n,
            total: tot / n,
        });
    }
    net.zero_grad();
    for p in net.params_mut() {
        *p = Tensor::new(p.shape(), p.data().to_vec())?;
    }
    Ok(history)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Per-resolution batch-norm statistics: resolution -> layer name -> stats.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibratedStats {
    pub by_resolution: BTreeMap<usize, BTreeMap<String, BnStats>>,
}

impl CalibratedStats {
    /// Writes the statistics for `r` into the network's running stats.
    pub fn apply(&self, net: &mut Network<f32>, r: usize) -> Result<()> {
        let table = self
            .by_resolution
            .get(&r)
            .ok_or_else(|| Error::InvalidArgument(format!("no calibrated statistics for resolution {r}")))?;
        for (name, bn) in net.named_batch_norms_mut() {
            let s = table
                .get(&name)
                .ok_or_else(|| Error::Format(format!("calibrated statistics lack layer {name}")))?;
            if s.mean.len() != bn.channels() || s.var.len() != bn.channels() {
                return Err(Error::dim(format!("{name} calibrated channels"), bn.channels(), s.mean.len()));
            }
            bn.running_mean = Tensor::new(&[s.mean.len()], s.mean.clone())?;
            bn.running_var = Tensor::new(&[s.var.len()], s.var.clone())?;
        }
        Ok(())
    }
}

/// Exact per-resolution statistics over the first `n_calib` training
/// images, fed as one batch so every layer sees the dataset statistics of
/// its input. Trainable parameters and the network's own running stats are
/// left untouched.
pub fn calibrate_bn(net: &Network<f32>, data: &Dataset, grid: &ResolutionGrid, n_calib: usize) -> Result<CalibratedStats> {
    let n = if n_calib > data.len() {
        warn!("n_calib {n_calib} exceeds the {} available images; using all", data.len());
        data.len()
    } else {
        n_calib
    };
    if n < 2 {
        return Err(Error::InsufficientData("calibration needs at least 2 images".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = data.batch(&idx)?;
    let mut out = CalibratedStats::default();
    for r in grid.resolutions() {
        let mut probe = net.clone();
        probe.forward_no_cache(&resize_bilinear(&x, r)?, Pass::CALIBRATE)?;
        let table = probe
            .named_batch_norms_mut()
            .into_iter()
            .map(|(name, bn)| {
                (
                    name,
                    BnStats {
                        mean: bn.running_mean.data().to_vec(),
                        var: bn.running_var.data().to_vec(),
                    },
                )
            })
            .collect();
        out.by_resolution.insert(r, table);
    }
    Ok(out)
}

/// Accuracy at resolution `r`, with that resolution's calibrated statistics
/// swapped in when given.
pub fn evaluate_at_resolution(
    net: &Network<f32>,
    stats: Option<&CalibratedStats>,
    data: &Dataset,
    r: usize,
) -> Result<f64> {
    let mut probe = net.clone();
    if let Some(s) = stats {
        s.apply(&mut probe, r)?;
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk)?;
        let logits = probe.forward_no_cache(&resize_bilinear(&x, r)?, Pass::INFER)?;
        correct += argmax_rows(&logits)?.iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub distill: bool,
    pub calibrate: bool,
    /// `(resolution, accuracy)` for every grid resolution.
    pub accuracy: Vec<(usize, f64)>,
}

/// {distillation on/off} x {calibration on/off}: one elastic training per
/// seed and distillation setting, each evaluated with and without
/// calibrated statistics.
#[allow(clippy::too_many_arguments)]
pub fn elastic_ablation(
    init: &Network<f32>,
    train: &Dataset,
    val: &Dataset,
    grid: &ResolutionGrid,
    schedule: &TrainSchedule,
    n_calib: usize,
    seeds: &[u64],
) -> Result<Vec<AblationCell>> {
    use rand::SeedableRng;
    let mut cells = Vec::new();
    for &seed in seeds {
        for distill in [true, false] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut net = init.clone();
            let opts = ElasticOptions { distill, full_m: false };
            train_elastic(&mut net, train, grid, schedule, opts, &mut rng)?;
            let stats = calibrate_bn(&net, train, grid, n_calib)?;
            for calibrate in [true, false] {
                let accuracy = grid
                    .resolutions()
                    .into_iter()
                    .map(|r| Ok((r, evaluate_at_resolution(&net, calibrate.then_some(&stats), val, r)?)))
                    .collect::<Result<Vec<_>>>()?;
                cells.push(AblationCell {
                    seed,
                    distill,
                    calibrate,
                    accuracy,
                });
            }
        }
    }
    Ok(cells)
}
