//! Hardware-aware bi-level search: SGD on supernet weights over sandwich
//! paths, Adam on architecture logits against validation loss plus a latency
//! penalty, and gradient ascent on the penalty multiplier.

use std::time::Instant;

use log::{error, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::block::Pass;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::latency::{measure_architecture, LatencyModel, OracleParams};
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::{Adam, Sgd};
use crate::sampler::{
    gumbel_noise, ranking_from_noise, sandwich_select, softmax, softmax_backward, softmax_mix, PathSample,
    Strategy,
};
use crate::space::{encode_onehot, ArchParams, LayerMix, OneHotArch, Supernet, SupernetConfig};
use crate::tensor::Tensor;
use crate::training::cosine_lr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Latency constraint `T` in ms. `None` targets the midpoint of the
    /// space's reachable oracle latency range.
    pub constraint_ms: Option<f64>,
    pub eta_w: f64,
    pub eta_alpha: f64,
    pub eta_lambda: f64,
    /// L2 coefficient on `alpha` inside its Adam update.
    pub alpha_weight_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_freeze_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub tau: f64,
    /// Keep the multiplier non-negative (off by default).
    pub clamp_lambda: bool,
    /// Fraction of the search data used for weights; the rest drives `alpha`.
    pub train_fraction: f64,
    /// Which latency drives the multiplier ascent.
    pub lambda_signal: LambdaSignal,
}

/// Source of `LAT(alpha)` in the multiplier ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSignal {
    /// The most important path sampled for the architecture step, re-ranked
    /// under the same noise after the update.
    #[default]
    Sampled,
    /// The noise-free argmax architecture after the update.
    Argmax,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            constraint_ms: None,
            eta_w: 0.1,
            eta_alpha: 0.001,
            eta_lambda: 0.0005,
            alpha_weight_decay: 1e-3,
            momentum: 0.9,
            weight_decay: 3e-5,
            alpha_freeze_epochs: 3,
            epochs: 30,
            batch_size: 64,
            strategy: Strategy::Sandwich,
            tau: 1.0,
            clamp_lambda: false,
            train_fraction: 0.8,
            lambda_signal: LambdaSignal::Sampled,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.constraint_ms {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("search: constraint_ms must be > 0, got {t}")));
            }
        }
        let rates = [self.eta_w, self.eta_alpha, self.eta_lambda, self.alpha_weight_decay];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("search: learning rates must be finite and >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("search: tau must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("search: batch_size must be at least 2".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("search: train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: u64,
    pub lambda: f64,
    pub lat_pred_ms: f64,
    pub valid_loss: f64,
}

/// `lambda + eta * (lat / t - 1)`, optionally clamped at zero.
pub fn lambda_update(lambda: f64, eta: f64, lat: f64, t: f64, clamp: bool) -> f64 {
    let next = lambda + eta * (lat / t - 1.0);
    if clamp {
        next.max(0.0)
    } else {
        next
    }
}

/// Mutable search state besides the supernet itself.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub alpha: ArchParams,
    pub lambda: f64,
    pub iter: u64,
    pub epoch: usize,
    pub w_opt: Sgd<f32>,
    pub alpha_opt: Adam<f64>,
    pub trace: Vec<TraceRecord>,
    /// Weight updates received by each `(layer, operator)`.
    pub updates: Vec<Vec<u64>>,
    /// Largest activation-cache size seen in one forward (tensor count).
    pub peak_live_tensors: usize,
    /// Operator forward evaluations, a deterministic work measure.
    pub op_evaluations: u64,
    pub rng: ChaCha8Rng,
}

impl SearchState {
    pub fn new(layers: usize, n_ops: usize, cfg: &SearchConfig, seed: u64) -> Self {
        SearchState {
            alpha: ArchParams::zeros(layers, n_ops),
            lambda: 0.0,
            iter: 0,
            epoch: 0,
            w_opt: Sgd::new(cfg.eta_w, cfg.momentum, cfg.weight_decay),
            alpha_opt: Adam::with_params(cfg.eta_alpha, (0.9, 0.999), 1e-8, cfg.alpha_weight_decay),
            trace: Vec::new(),
            updates: vec![vec![0; n_ops]; layers],
            peak_live_tensors: 0,
            op_evaluations: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Percentage of `(layer, operator)` pairs that received at least one
    /// weight update.
    pub fn coverage(&self) -> f64 {
        let total: usize = self.updates.iter().map(Vec::len).sum();
        let hit = self.updates.iter().flatten().filter(|&&c| c > 0).count();
        100.0 * hit as f64 / total.max(1) as f64
    }

    /// Lowest per-layer coverage percentage.
    pub fn min_layer_coverage(&self) -> f64 {
        self.updates
            .iter()
            .map(|row| 100.0 * row.iter().filter(|&&c| c > 0).count() as f64 / row.len() as f64)
            .fold(100.0, f64::min)
    }
}

/// Inputs shared by every step.
pub struct StepContext<'a> {
    pub cfg: &'a SearchConfig,
    pub predictor: &'a LatencyModel,
    pub constraint_ms: f64,
    pub alpha_frozen: bool,
    /// Learning rate for the weight step (after scheduling).
    pub lr_w: f64,
}

fn mix_of(path: &PathSample) -> Vec<LayerMix<f32>> {
    path.mix()
}

/// Weight step on a training batch. Returns the summed loss.
fn weight_step(
    supernet: &mut Supernet<f32>,
    state: &mut SearchState,
    ctx: &StepContext,
    x: &Tensor<f32>,
    y: &[usize],
) -> Result<f64> {
    supernet.zero_grad();
    let n_ops = supernet.n_ops();
    let mixes: Vec<Vec<LayerMix<f32>>> = match ctx.cfg.strategy {
        Strategy::DartsSoftmax => vec![softmax_mix(&state.alpha)],
        s => {
            let g = gumbel_noise(state.alpha.layers(), n_ops, &mut state.rng);
            let ranking = ranking_from_noise(&state.alpha, &g, ctx.cfg.tau)?;
            let paths = match s {
                Strategy::Sandwich => {
                    let t = sandwich_select(&ranking, &mut state.rng)?;
                    vec![t.most, t.random, t.least]
                }
                Strategy::GdasSingle => vec![ranking.path_at_rank(0)],
                _ => (0..n_ops).map(|r| ranking.path_at_rank(r)).collect(),
            };
            paths.iter().map(mix_of).collect()
        }
    };
    let mut total = 0.0;
    for mix in &mixes {
        let (logits, cache) = supernet.forward(x, mix, Pass::TRAIN)?;
        state.peak_live_tensors = state.peak_live_tensors.max(cache.live_tensors());
        let (loss, g) = softmax_cross_entropy(&logits, y)?;
        if !loss.is_finite() {
            return Err(non_finite(state, "training loss"));
        }
        supernet.backward(&cache, &g)?;
        total += loss;
        for (l, entries) in mix.iter().enumerate() {
            for &(n, _) in entries {
                state.updates[l][n] += 1;
                state.op_evaluations += 1;
            }
        }
    }
    state.w_opt.lr = ctx.lr_w;
    state.w_opt.step(&mut supernet.params_mut())?;
    Ok(total)
}

fn non_finite(state: &SearchState, what: &str) -> Error {
    let amax = state
        .alpha
        .alpha
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    error!(
        "non-finite {what} at iter {} (epoch {}): lambda {}, max |alpha| {amax}",
        state.iter, state.epoch, state.lambda
    );
    Error::NonFinite(format!("{what} at iteration {}", state.iter))
}

fn apply_alpha_grad(state: &mut SearchState, grad: &[Vec<f64>]) -> Result<()> {
    let (l, n) = (state.alpha.layers(), state.alpha.n_ops());
    let mut t = Tensor::new(&[l, n], state.alpha.alpha.iter().flatten().copied().collect())?;
    t.accumulate_grad(&grad.iter().flatten().copied().collect::<Vec<_>>());
    state.alpha_opt.step(&mut [&mut t])?;
    for (row, chunk) in state.alpha.alpha.iter_mut().zip(t.data().chunks(n)) {
        row.copy_from_slice(chunk);
    }
    Ok(())
}

/// Architecture step on a validation batch followed by the multiplier
/// ascent. Returns `(validation loss, latency used for the ascent)`.
fn alpha_step(
    supernet: &mut Supernet<f32>,
    state: &mut SearchState,
    ctx: &StepContext,
    x: &Tensor<f32>,
    y: &[usize],
) -> Result<(f64, f64)> {
    let t = ctx.constraint_ms;
    let scale = state.lambda / t;
    supernet.zero_grad();
    let (loss, lat_after) = match ctx.cfg.strategy {
        Strategy::DartsSoftmax => {
            let mix = softmax_mix::<f32>(&state.alpha);
            let (logits, cache) = supernet.forward(x, &mix, Pass::TRAIN)?;
            let (loss, g) = softmax_cross_entropy(&logits, y)?;
            if !loss.is_finite() {
                return Err(non_finite(state, "validation loss"));
            }
            let mix_grads = supernet.backward(&cache, &g)?;
            let probs: Vec<Vec<f64>> = state.alpha.alpha.iter().map(|r| softmax(r)).collect();
            let (_, dlat) = ctx.predictor.predict_with_grad(&probs)?;
            if !ctx.alpha_frozen {
                let grad: Vec<Vec<f64>> = (0..state.alpha.layers())
                    .map(|l| {
                        let gp: Vec<f64> = mix_grads[l]
                            .iter()
                            .zip(&dlat[l])
                            .map(|(a, b)| a + scale * b)
                            .collect();
                        softmax_backward(&state.alpha.alpha[l], &gp)
                    })
                    .collect();
                apply_alpha_grad(state, &grad)?;
            }
            let lat = match ctx.cfg.lambda_signal {
                LambdaSignal::Sampled => {
                    let probs: Vec<Vec<f64>> = state.alpha.alpha.iter().map(|r| softmax(r)).collect();
                    ctx.predictor.predict_with_grad(&probs)?.0
                }
                LambdaSignal::Argmax => ctx.predictor.predict_arch(&encode_onehot(&state.alpha))?,
            };
            (loss, lat)
        }
        _ => {
            let g = gumbel_noise(state.alpha.layers(), supernet.n_ops(), &mut state.rng);
            let path = ranking_from_noise(&state.alpha, &g, ctx.cfg.tau)?.path_at_rank(0);
            let (logits, cache) = supernet.forward(x, &path.mix(), Pass::TRAIN)?;
            let (loss, gl) = softmax_cross_entropy(&logits, y)?;
            if !loss.is_finite() {
                return Err(non_finite(state, "validation loss"));
            }
            let mix_grads = supernet.backward(&cache, &gl)?;
            if !ctx.alpha_frozen {
                let (_, dlat) = ctx.predictor.predict_with_grad(&path.hard.matrix())?;
                let grad_hard: Vec<Vec<f64>> = dlat
                    .iter()
                    .enumerate()
                    .map(|(l, row)| {
                        let mut r: Vec<f64> = row.iter().map(|v| scale * v).collect();
                        r[path.indices[l]] += mix_grads[l][0];
                        r
                    })
                    .collect();
                let ga = path.alpha_grad(&state.alpha, &grad_hard);
                apply_alpha_grad(state, &ga)?;
            }
            let lat = match ctx.cfg.lambda_signal {
                LambdaSignal::Sampled => {
                    // The most important path under the same noise after the update.
                    let after = ranking_from_noise(&state.alpha, &g, ctx.cfg.tau)?.path_at_rank(0);
                    ctx.predictor.predict_arch(&after.hard)?
                }
                LambdaSignal::Argmax => ctx.predictor.predict_arch(&encode_onehot(&state.alpha))?,
            };
            (loss, lat)
        }
    };
    supernet.zero_grad();
    state.lambda = lambda_update(state.lambda, ctx.cfg.eta_lambda, lat_after, t, ctx.cfg.clamp_lambda);
    if !state.lambda.is_finite() {
        return Err(non_finite(state, "lambda"));
    }
    Ok((loss, lat_after))
}

/// One bi-level iteration: weights on the training batch, then (unless
/// frozen) `alpha` on the validation batch, then the multiplier ascent using
/// the predicted latency after the `alpha` update.
pub fn search_step(
    supernet: &mut Supernet<f32>,
    state: &mut SearchState,
    ctx: &StepContext,
    train: (&Tensor<f32>, &[usize]),
    valid: (&Tensor<f32>, &[usize]),
) -> Result<TraceRecord> {
    weight_step(supernet, state, ctx, train.0, train.1)?;
    let (valid_loss, lat) = alpha_step(supernet, state, ctx, valid.0, valid.1)?;
    let rec = TraceRecord {
        iter: state.iter,
        lambda: state.lambda,
        lat_pred_ms: lat,
        valid_loss,
    };
    state.trace.push(rec.clone());
    state.iter += 1;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub arch: Vec<usize>,
    pub lambda: f64,
    pub constraint_ms: f64,
    pub alpha: Vec<Vec<f64>>,
    /// Predicted and oracle (noise-free) latency of the transformed result.
    pub predicted_latency_ms: f64,
    pub oracle_latency_ms: f64,
    pub coverage_pct: f64,
    pub first_epoch_min_layer_coverage_pct: f64,
    pub peak_live_tensors: usize,
    pub op_evaluations: u64,
    pub iterations: u64,
    pub trace_sha256: String,
    pub strategy: Strategy,
    pub seed: u64,
}

pub fn trace_jsonl(trace: &[TraceRecord]) -> Result<String> {
    let mut s = String::new();
    for r in trace {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("trace line {}: {e}", i + 1))))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything a finished search leaves behind.
pub struct SearchOutcome {
    pub result: SearchResult,
    pub trace: Vec<TraceRecord>,
    pub supernet: Supernet<f32>,
    pub wall_time_s: f64,
}

/// Runs the full search. `data` is split into weight and architecture parts
/// by `cfg.train_fraction`; the first `alpha_freeze_epochs` epochs leave
/// `alpha` untouched.
pub fn run_search(
    cfg: &SearchConfig,
    net_cfg: &SupernetConfig,
    data: &Dataset,
    predictor: &LatencyModel,
    oracle: &OracleParams,
    seed: u64,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (lo, hi) = crate::latency::latency_range(net_cfg, oracle)?;
    let t = cfg.constraint_ms.unwrap_or(0.5 * (lo + hi));
    if t < lo || t > hi {
        warn!("constraint {t:.4} ms lies outside the reachable range [{lo:.4}, {hi:.4}] ms; result is best effort");
    }
    let (train, valid) = data.split(cfg.train_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut supernet = Supernet::<f32>::build(net_cfg, &mut rng)?;
    let mut state = SearchState::new(supernet.num_layers(), supernet.n_ops(), cfg, rng.gen());
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size).max(1);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut first_epoch_cov = 0.0;
    let mut valid_cursor = Vec::new();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        for b in train.epoch_batches(cfg.batch_size, &mut rng) {
            if valid_cursor.len() < cfg.batch_size.min(valid.len()) {
                valid_cursor = valid.epoch_batches(cfg.batch_size, &mut rng).concat();
            }
            let vb: Vec<usize> = valid_cursor.drain(..cfg.batch_size.min(valid.len())).collect();
            let (x, y) = train.batch(&b)?;
            let (xv, yv) = valid.batch(&vb)?;
            let ctx = StepContext {
                cfg,
                predictor,
                constraint_ms: t,
                alpha_frozen: epoch < cfg.alpha_freeze_epochs,
                lr_w: cosine_lr(cfg.eta_w, state.iter as usize, total_steps),
            };
            search_step(&mut supernet, &mut state, &ctx, (&x, &y), (&xv, &yv))?;
        }
        if epoch == 0 {
            first_epoch_cov = state.min_layer_coverage();
        }
    }
    let arch = encode_onehot(&state.alpha);
    let trace_text = trace_jsonl(&state.trace)?;
    let result = SearchResult {
        predicted_latency_ms: predictor.predict_arch(&arch)?,
        oracle_latency_ms: measure_architecture(net_cfg, &arch, &oracle.noiseless(), &mut rng)?,
        arch: arch.indices.clone(),
        lambda: state.lambda,
        constraint_ms: t,
        alpha: state.alpha.alpha.clone(),
        coverage_pct: state.coverage(),
        first_epoch_min_layer_coverage_pct: first_epoch_cov,
        peak_live_tensors: state.peak_live_tensors,
        op_evaluations: state.op_evaluations,
        iterations: state.iter,
        trace_sha256: sha256_hex(trace_text.as_bytes()),
        strategy: cfg.strategy,
        seed,
    };
    Ok(SearchOutcome {
        result,
        trace: state.trace,
        supernet,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Final `alpha` argmax as an architecture.
pub fn discretize(alpha: &ArchParams) -> OneHotArch {
    encode_onehot(alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub coverage_pct: f64,
    pub first_epoch_min_layer_coverage_pct: f64,
    pub peak_live_tensors: usize,
    pub op_evaluations: u64,
    pub latency_error_pct: f64,
    pub arch: Vec<usize>,
}

/// Runs each strategy with the same budget and seed. Wall times are returned
/// separately because they are not reproducible.
pub fn ablate_strategies(
    cfg: &SearchConfig,
    net_cfg: &SupernetConfig,
    data: &Dataset,
    predictor: &LatencyModel,
    oracle: &OracleParams,
    strategies: &[Strategy],
    seed: u64,
) -> Result<(Vec<StrategyReport>, Vec<f64>)> {
    let mut reports = Vec::new();
    let mut times = Vec::new();
    for &s in strategies {
        let c = SearchConfig {
            strategy: s,
            ..cfg.clone()
        };
        let out = run_search(&c, net_cfg, data, predictor, oracle, seed)?;
        let r = &out.result;
        reports.push(StrategyReport {
            strategy: s,
            coverage_pct: r.coverage_pct,
            first_epoch_min_layer_coverage_pct: r.first_epoch_min_layer_coverage_pct,
            peak_live_tensors: r.peak_live_tensors,
            op_evaluations: r.op_evaluations,
            latency_error_pct: 100.0 * (r.oracle_latency_ms - r.constraint_ms).abs() / r.constraint_ms,
            arch: r.arch.clone(),
        });
        times.push(out.wall_time_s);
    }
    Ok((reports, times))
}

/// A one-dimensional constrained problem for exercising the multiplier
/// update in isolation: minimise `(x - x0)^2 / 2` subject to
/// `lat(x) = a + b * x` meeting `t`. Each step sets `x` to the exact
/// minimiser of the Lagrangian for the current multiplier, then ascends the
/// multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerToy {
    pub x0: f64,
    pub a: f64,
    pub b: f64,
    pub t: f64,
    pub eta_lambda: f64,
}

impl ControllerToy {
    pub fn latency(&self, x: f64) -> f64 {
        self.a + self.b * x
    }

    /// Minimiser of `(x - x0)^2 / 2 + lambda * (lat(x) / t - 1)`.
    pub fn best_response(&self, lambda: f64) -> f64 {
        self.x0 - lambda * self.b / self.t
    }

    /// `(lambda, latency)` after each of `steps` iterations from `lambda = 0`.
    pub fn run(&self, steps: usize) -> Vec<(f64, f64)> {
        let mut lambda = 0.0;
        (0..steps)
            .map(|_| {
                let lat = self.latency(self.best_response(lambda));
                lambda = lambda_update(lambda, self.eta_lambda, lat, self.t, false);
                (lambda, lat)
            })
            .collect()
    }
}
