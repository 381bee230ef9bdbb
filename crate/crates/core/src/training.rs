//! Stand-alone network training: the standard SGD recipe, hybrid
//! transformable training with the grafted activation, and the
//! train-first versus transform-first comparison.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{Block, Pass};
use crate::data::{random_hflip, Dataset};
use crate::error::{Error, Result};
use crate::latency::OracleParams;
use crate::network::Network;
use crate::nn::loss::{argmax_rows, softmax_cross_entropy};
use crate::nn::Sgd;
use crate::space::{build_network, OneHotArch, SupernetConfig};
use crate::transform::transform_network;

/// Grafting coefficient for epoch `e_curr`: `e_curr / e_total` during the
/// ramp, 1 afterwards.
pub fn epsilon_schedule(e_curr: usize, e_total: usize) -> f64 {
    if e_curr < e_total {
        e_curr as f64 / e_total as f64
    } else {
        1.0
    }
}

/// Cosine decay from `lr0` at step 0 to 0 at `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Epochs over which the grafted non-linearity is phased out.
    pub graft_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hflip: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 30,
            graft_epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            hflip: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.graft_epochs > self.epochs {
            return Err(Error::Config(format!(
                "train: graft_epochs {} exceeds epochs {}",
                self.graft_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train: batch_size must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("train: lr, momentum and weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Grafting coefficient used during the epoch; 1 means pure linear.
    pub eps: f64,
}

pub fn metrics_jsonl(history: &[EpochMetrics]) -> Result<String> {
    let mut s = String::new();
    for m in history {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    Ok(s)
}

/// Top-1 accuracy in inference mode.
pub fn evaluate(net: &mut Network<f32>, data: &Dataset, pass: Pass, batch: usize) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let (logits, _) = net.forward(&x, pass)?;
        correct += argmax_rows(&logits)?.iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn has_linear_ops(net: &Network<f32>) -> bool {
    net.blocks
        .iter()
        .any(|b| matches!(b, Block::MbConv(m) if m.spec.linear))
}

fn train_loop<R: Rng + ?Sized>(
    net: &mut Network<f32>,
    train: &Dataset,
    val: &Dataset,
    schedule: &TrainSchedule,
    hybrid: bool,
    rng: &mut R,
) -> Result<Vec<EpochMetrics>> {
    schedule.validate()?;
    let mut opt = Sgd::<f32>::new(schedule.lr, schedule.momentum, schedule.weight_decay);
    let per_epoch = train.len().div_ceil(schedule.batch_size.max(1)).max(1);
    let total = schedule.epochs * per_epoch;
    let mut step = 0;
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let eps = if hybrid {
            epsilon_schedule(epoch, schedule.graft_epochs)
        } else {
            1.0
        };
        let graft = (eps < 1.0).then_some(eps);
        let pass = Pass::TRAIN.with_graft(graft);
        let mut loss_sum = 0.0;
        let batches = train.epoch_batches(schedule.batch_size, rng);
        for b in &batches {
            let (mut x, y) = train.batch(b)?;
            if schedule.hflip {
                x = random_hflip(&x, rng)?;
            }
            net.zero_grad();
            let (logits, cache) = net.forward(&x, pass)?;
            let (loss, g) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            net.backward(&cache, &g)?;
            opt.lr = cosine_lr(schedule.lr, step, total);
            opt.step(&mut net.params_mut())?;
            loss_sum += loss * b.len() as f64;
            step += 1;
        }
        let val_acc = evaluate(net, val, Pass::INFER.with_graft(graft), 256)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_acc,
            eps,
        };
        info!("epoch {epoch}: loss {:.4} val_acc {:.4} eps {eps:.3}", m.train_loss, m.val_acc);
        history.push(m);
    }
    net.zero_grad();
    for p in net.params_mut() {
        *p = crate::tensor::Tensor::new(p.shape(), p.data().to_vec())?;
    }
    Ok(history)
}

/// SGD with momentum, cosine learning rate and random horizontal flips.
/// Linear operators run with exact identity activations throughout.
pub fn train_standard<R: Rng + ?Sized>(
    net: &mut Network<f32>,
    train: &Dataset,
    val: &Dataset,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<Vec<EpochMetrics>> {
    train_loop(net, train, val, schedule, false, rng)
}

/// Like [`train_standard`], but during the first `graft_epochs` epochs the
/// internal activations of linear operators are grafted ReLU6s whose
/// coefficient ramps from 0 to 1, after which they are exact identities.
/// The network structure is unchanged and stays collapsible.
pub fn train_hybrid_transformable<R: Rng + ?Sized>(
    net: &mut Network<f32>,
    train: &Dataset,
    val: &Dataset,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<Vec<EpochMetrics>> {
    if !has_linear_ops(net) {
        warn!("network has no linear operators; hybrid training reduces to standard training");
        return train_standard(net, train, val, schedule, rng);
    }
    train_loop(net, train, val, schedule, true, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub history: Vec<EpochMetrics>,
    pub final_val_acc: f64,
    pub depth: usize,
    pub oracle_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderComparison {
    pub arch: Vec<usize>,
    pub train_first: BranchReport,
    pub transform_first: BranchReport,
    /// Max abs logit difference of the train-first network before and after
    /// its transform, over the validation set.
    pub train_first_transform_max_abs: f64,
    pub same_depth: bool,
}

/// Branch A trains the deep network and then transforms it; branch B
/// transforms a freshly initialised network and trains the shallow result.
/// Both get the same schedule and seed.
pub fn compare_train_first_vs_transform_first(
    config: &SupernetConfig,
    arch: &OneHotArch,
    train: &Dataset,
    val: &Dataset,
    schedule: &TrainSchedule,
    oracle: &OracleParams,
    seed: u64,
) -> Result<OrderComparison> {
    let side = config.input[1];
    let latency = |net: &Network<f32>| -> Result<f64> {
        Ok(oracle.noiseless().mean_latency(&net.layer_costs(side)?))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deep: Network<f32> = build_network(config, arch, &mut rng)?;
    let history_a = train_standard(&mut deep, train, val, schedule, &mut rng)?;
    let (mut shallow_a, _) = transform_network(&deep)?;
    let mut max_abs = 0.0f64;
    let idx: Vec<usize> = (0..val.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, _) = val.batch(chunk)?;
        let a = deep.logits(&x)?;
        let b = shallow_a.logits(&x)?;
        max_abs = max_abs.max(a.max_abs_diff(&b));
    }
    let acc_a = evaluate(&mut shallow_a, val, Pass::INFER, 256)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh: Network<f32> = build_network(config, arch, &mut rng)?;
    let (mut shallow_b, _) = transform_network(&fresh)?;
    let history_b = train_standard(&mut shallow_b, train, val, schedule, &mut rng)?;
    let acc_b = evaluate(&mut shallow_b, val, Pass::INFER, 256)?;

    let depth_a = shallow_a.searchable_depth();
    let depth_b = shallow_b.searchable_depth();
    Ok(OrderComparison {
        arch: arch.indices.clone(),
        train_first: BranchReport {
            history: history_a,
            final_val_acc: acc_a,
            depth: depth_a,
            oracle_latency_ms: latency(&shallow_a)?,
        },
        transform_first: BranchReport {
            history: history_b,
            final_val_acc: acc_b,
            depth: depth_b,
            oracle_latency_ms: latency(&shallow_b)?,
        },
        train_first_transform_max_abs: max_abs,
        same_depth: depth_a == depth_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::space::LayerConfig;

    fn small_config() -> SupernetConfig {
        SupernetConfig {
            input: [3, 16, 16],
            stem_channels: 4,
            classes: 4,
            layers: vec![
                LayerConfig { c_in: 4, c_out: 8, stride: 2 },
                LayerConfig { c_in: 8, c_out: 8, stride: 1 },
            ],
        }
    }

    fn small_schedule(epochs: usize, graft: usize) -> TrainSchedule {
        TrainSchedule {
            epochs,
            graft_epochs: graft,
            batch_size: 16,
            ..TrainSchedule::default()
        }
    }

    fn setup(arch: &[usize]) -> (Network<f32>, Dataset, Dataset) {
        let cfg = small_config();
        let arch = OneHotArch::new(arch.to_vec(), 12).unwrap();
        let net = build_network(&cfg, &arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let data = synth_dataset(2, 4, 80, 3, 16, 16).unwrap();
        let (train, val) = data.split(0.75).unwrap();
        (net, train, val)
    }

    #[test]
    fn epsilon_schedule_examples() {
        assert_eq!(epsilon_schedule(0, 120), 0.0);
        assert_eq!(epsilon_schedule(60, 120), 0.5);
        assert_eq!(epsilon_schedule(120, 120), 1.0);
        assert_eq!(epsilon_schedule(500, 120), 1.0);
        assert_eq!(epsilon_schedule(0, 0), 1.0);
        let mut prev = 0.0;
        for e in 0..40 {
            let v = epsilon_schedule(e, 17);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let (mut net, train, val) = setup(&[0, 7]);
        let before: Vec<Vec<f32>> = net.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
        let schedule = TrainSchedule { lr: 0.0, ..small_schedule(1, 0) };
        train_standard(&mut net, &train, &val, &schedule, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // running statistics move in train mode; learnable tensors must not
        for ((name, t), b) in net.named_tensors().iter().zip(&before) {
            if !name.contains("running") {
                assert_eq!(t.data(), &b[..], "{name}");
            }
        }
    }

    #[test]
    fn same_seed_same_history() {
        let run = || {
            let (mut net, train, val) = setup(&[6, 1]);
            train_hybrid_transformable(&mut net, &train, &val, &small_schedule(2, 1), &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(metrics_jsonl(&a).unwrap(), metrics_jsonl(&b).unwrap());
        assert_eq!(a.iter().map(|m| m.eps).collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn zero_graft_epochs_is_pure_linear_training() {
        let (net, train, val) = setup(&[6, 9]);
        let (mut a, mut b) = (net.clone(), net);
        let s = small_schedule(1, 0);
        let ha = train_hybrid_transformable(&mut a, &train, &val, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let hb = train_standard(&mut b, &train, &val, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.named_tensors(), b.named_tensors());
    }

    #[test]
    fn hybrid_training_keeps_structure_and_stays_collapsible() {
        let (mut net, train, val) = setup(&[7, 10]);
        let layout = net.layout();
        train_hybrid_transformable(&mut net, &train, &val, &small_schedule(2, 1), &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(net.layout(), layout);
        let (mut shallow, report) = transform_network(&net).unwrap();
        assert_eq!(report.collapsed, 2);
        let (x, _) = val.batch(&(0..val.len()).collect::<Vec<_>>()).unwrap();
        let diff = net.logits(&x).unwrap().max_abs_diff(&shallow.logits(&x).unwrap());
        assert!(diff <= 1e-3, "{diff}");
    }

    #[test]
    fn train_first_vs_transform_first_report() {
        let cfg = small_config();
        let arch = OneHotArch::new(vec![8, 2], 12).unwrap();
        let data = synth_dataset(2, 4, 64, 3, 16, 16).unwrap();
        let (train, val) = data.split(0.75).unwrap();
        let r = compare_train_first_vs_transform_first(
            &cfg,
            &arch,
            &train,
            &val,
            &small_schedule(1, 0),
            &OracleParams::default(),
            9,
        )
        .unwrap();
        assert!(r.same_depth);
        assert_eq!(r.train_first.depth, r.transform_first.depth);
        assert_eq!(r.train_first.oracle_latency_ms, r.transform_first.oracle_latency_ms);
        assert!(r.train_first_transform_max_abs <= 1e-3);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<OrderComparison>(&json).unwrap(), r);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(small_schedule(2, 3).validate().is_err());
        assert!(TrainSchedule { batch_size: 1, ..small_schedule(1, 0) }.validate().is_err());
    }
}
