//! Synthetic latency oracle, architecture/latency pair generation and the
//! MLP latency predictor.
//!
//! The oracle prices each executed layer as `c0 + c1 * (MACs / 1e6)^gamma`
//! milliseconds, where a conv layer's MACs are
//! `C_in * C_out * K^2 * H_out * W_out / groups` and the head counts
//! `D * classes`. The per-layer constant makes depth expensive, so collapsing a
//! linear MBConv from three layers to one pays off.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::LayerCost;
use crate::nn::{Adam, Linear};
use crate::space::{arch_layout, OneHotArch, SupernetConfig};
use crate::tensor::Tensor;
use crate::transform::transform_layout;

pub const HIDDEN: [usize; 2] = [256, 128];
pub const MIN_PAIRS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    /// Fixed per-layer overhead in ms.
    pub c0: f64,
    /// Cost in ms per million MACs (before the exponent).
    pub c1: f64,
    pub gamma: f64,
    /// Measurement noise standard deviation in ms.
    pub sigma: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            c0: 0.08,
            c1: 0.5,
            gamma: 0.8,
            sigma: 0.01,
        }
    }
}

impl OracleParams {
    pub fn noiseless(self) -> Self {
        OracleParams { sigma: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0 && self.c1 > 0.0) {
            return Err(Error::Config("latency_oracle: c0 and c1 must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.5) {
            return Err(Error::Config("latency_oracle: gamma must lie in (0, 1.5]".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("latency_oracle: sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Noise-free latency of a layer list.
    pub fn mean_latency(&self, layers: &[LayerCost]) -> f64 {
        layers
            .iter()
            .map(|l| self.c0 + self.c1 * (l.macs as f64 / 1e6).powf(self.gamma))
            .sum()
    }
}

/// One oracle measurement: the noise-free latency plus Gaussian noise, the
/// noise clipped from below at half the mean. No randomness is drawn when
/// `sigma == 0`.
pub fn synthetic_oracle<R: Rng + ?Sized>(layers: &[LayerCost], params: &OracleParams, rng: &mut R) -> f64 {
    let mean = params.mean_latency(layers);
    if params.sigma == 0.0 {
        return mean;
    }
    let noise = Normal::new(0.0, params.sigma).expect("valid sigma").sample(rng);
    mean + noise.max(-0.5 * mean)
}

/// Oracle latency of the transformed (shallow) form of an architecture.
pub fn measure_architecture<R: Rng + ?Sized>(
    config: &SupernetConfig,
    arch: &OneHotArch,
    params: &OracleParams,
    rng: &mut R,
) -> Result<f64> {
    Ok(synthetic_oracle(&transformed_costs(config, arch)?, params, rng))
}

/// Layer costs of the transformed form of an architecture.
pub fn transformed_costs(config: &SupernetConfig, arch: &OneHotArch) -> Result<Vec<LayerCost>> {
    transform_layout(&arch_layout(config, arch)?).layer_costs(config.input[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyPair {
    /// Per-layer operator index.
    pub arch: Vec<usize>,
    pub latency_ms: f64,
}

/// Samples `n` uniform architectures and measures their transformed forms.
pub fn generate_pairs<R: Rng + ?Sized>(
    config: &SupernetConfig,
    n: usize,
    params: &OracleParams,
    rng: &mut R,
) -> Result<Vec<LatencyPair>> {
    params.validate()?;
    let n_ops = crate::space::operator_space().len();
    (0..n)
        .map(|_| {
            let arch = OneHotArch::uniform(config.num_layers(), n_ops, rng);
            let latency_ms = measure_architecture(config, &arch, params, rng)?;
            Ok(LatencyPair {
                arch: arch.indices,
                latency_ms,
            })
        })
        .collect()
}

/// Oracle latencies of the cheapest and most expensive architectures. The
/// noise-free cost is a sum of per-layer terms, so per-layer extremes give
/// the exact range.
pub fn latency_range(config: &SupernetConfig, params: &OracleParams) -> Result<(f64, f64)> {
    let n_ops = crate::space::operator_space().len();
    let cost = |idx: Vec<usize>| -> Result<f64> {
        Ok(params.mean_latency(&transformed_costs(config, &OneHotArch::new(idx, n_ops)?)?))
    };
    let mut lo = vec![0; config.num_layers()];
    let mut hi = vec![0; config.num_layers()];
    for l in 0..config.num_layers() {
        let mut best = (f64::INFINITY, 0);
        let mut worst = (f64::NEG_INFINITY, 0);
        for op in 0..n_ops {
            let mut idx = vec![0; config.num_layers()];
            idx[l] = op;
            let v = cost(idx)?;
            if v < best.0 {
                best = (v, op);
            }
            if v > worst.0 {
                worst = (v, op);
            }
        }
        lo[l] = best.1;
        hi[l] = worst.1;
    }
    Ok((cost(lo)?, cost(hi)?))
}

pub fn write_pairs_jsonl(pairs: &[LatencyPair]) -> Result<String> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_pairs_jsonl(text: &str) -> Result<Vec<LatencyPair>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let p: LatencyPair = serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("latency pair line {}: {e}", i + 1)))?;
            if !(p.latency_ms > 0.0) {
                return Err(Error::Format(format!("latency pair line {}: latency must be > 0", i + 1)));
            }
            Ok(p)
        })
        .collect()
}

/// MLP `L*N -> 256 -> 128 -> 1` with ReLU between layers and `max(., 0)` on
/// the output. Inputs are flattened one-hot (or relaxed) encodings, used
/// without normalisation since they already lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyModel {
    pub layers: usize,
    pub n_ops: usize,
    pub fc: [Linear<f64>; 3],
    pub trained: bool,
}

struct MlpCache {
    x: Tensor<f64>,
    h1: Tensor<f64>,
    a1: Tensor<f64>,
    h2: Tensor<f64>,
    a2: Tensor<f64>,
    y: Tensor<f64>,
}

fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

fn relu_backward(x: &Tensor<f64>, g: &Tensor<f64>) -> Tensor<f64> {
    let d = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), d).expect("same shape")
}

impl LatencyModel {
    pub fn new<R: Rng + ?Sized>(layers: usize, n_ops: usize, rng: &mut R) -> Self {
        let d = layers * n_ops;
        LatencyModel {
            layers,
            n_ops,
            fc: [
                Linear::he_init(d, HIDDEN[0], rng),
                Linear::he_init(HIDDEN[0], HIDDEN[1], rng),
                Linear::he_init(HIDDEN[1], 1, rng),
            ],
            trained: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers * self.n_ops
    }

    fn forward(&self, x: &Tensor<f64>) -> Result<MlpCache> {
        let h1 = self.fc[0].forward(x)?;
        let a1 = relu(&h1);
        let h2 = self.fc[1].forward(&a1)?;
        let a2 = relu(&h2);
        let y = self.fc[2].forward(&a2)?;
        Ok(MlpCache {
            x: x.clone(),
            h1,
            a1,
            h2,
            a2,
            y,
        })
    }

    /// Backward from the raw (pre-clamp) output; returns the input gradient.
    fn backward(&mut self, c: &MlpCache, gy: &Tensor<f64>) -> Result<Tensor<f64>> {
        let g = self.fc[2].backward(&c.a2, gy)?;
        let g = relu_backward(&c.h2, &g);
        let g = self.fc[1].backward(&c.a1, &g)?;
        let g = relu_backward(&c.h1, &g);
        self.fc[0].backward(&c.x, &g)
    }

    /// Predictions for a batch of flattened encodings `[B, L*N]`.
    pub fn predict_batch(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::dim("predictor input width", self.input_dim(), d));
        }
        Ok(self.forward(x)?.y.data().iter().map(|v| v.max(0.0)).collect())
    }

    pub fn predict_arch(&self, arch: &OneHotArch) -> Result<f64> {
        self.predict_flat(&arch.flat())
    }

    pub fn predict_flat(&self, enc: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(&Tensor::new(&[1, enc.len()], enc.to_vec())?)?[0])
    }

    /// Latency and its gradient with respect to an `L x N` encoding, which may
    /// be a relaxed (non one-hot) matrix.
    pub fn predict_with_grad(&self, enc: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        if enc.len() != self.layers || enc.iter().any(|r| r.len() != self.n_ops) {
            return Err(Error::Shape(format!(
                "predictor encoding must be {}x{}",
                self.layers, self.n_ops
            )));
        }
        let flat: Vec<f64> = enc.iter().flatten().copied().collect();
        let x = Tensor::new(&[1, flat.len()], flat)?;
        let cache = self.forward(&x)?;
        let raw = cache.y.data()[0];
        let gy = Tensor::new(&[1, 1], vec![if raw > 0.0 { 1.0 } else { 0.0 }])?;
        let mut scratch = self.clone();
        let gx = scratch.backward(&cache, &gy)?;
        let grad = gx.data().chunks(self.n_ops).map(<[f64]>::to_vec).collect();
        Ok((raw.max(0.0), grad))
    }

    /// Parameters in fixed order: `fc0.weight, fc0.bias, ..., fc2.bias`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        self.fc
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("fc{i}.weight"), &l.weight),
                    (format!("fc{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        self.fc
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                let Linear { weight, bias } = l;
                [(format!("fc{i}.weight"), weight), (format!("fc{i}.bias"), bias)]
            })
            .collect()
    }

    /// Mean squared error of the raw outputs on `[B, L*N]` encodings against
    /// `targets`; parameter gradients are accumulated.
    pub fn mse_backward(&mut self, x: &Tensor<f64>, targets: &[f64]) -> Result<f64> {
        let cache = self.forward(x)?;
        if targets.len() != cache.y.numel() {
            return Err(Error::dim("predictor targets", cache.y.numel(), targets.len()));
        }
        let b = targets.len() as f64;
        let diff: Vec<f64> = cache.y.data().iter().zip(targets).map(|(p, t)| p - t).collect();
        let g: Vec<f64> = diff.iter().map(|d| 2.0 * d / b).collect();
        self.backward(&cache, &Tensor::new(&[targets.len(), 1], g)?)?;
        Ok(diff.iter().map(|d| d * d).sum::<f64>() / b)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.fc.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub val_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// L2 penalty coefficient added to the Adam gradient.
    pub weight_decay: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            val_fraction: 0.2,
            epochs: 150,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub val_spearman: f64,
    pub latency_min: f64,
    pub latency_max: f64,
}

fn encode_pairs(pairs: &[&LatencyPair], n_ops: usize) -> Result<Tensor<f64>> {
    let layers = pairs[0].arch.len();
    let mut x = vec![0.0; pairs.len() * layers * n_ops];
    for (i, p) in pairs.iter().enumerate() {
        if p.arch.len() != layers {
            return Err(Error::dim("pair architecture layers", layers, p.arch.len()));
        }
        for (l, &op) in p.arch.iter().enumerate() {
            if op >= n_ops {
                return Err(Error::InvalidArgument(format!("operator index {op} >= {n_ops}")));
            }
            x[(i * layers + l) * n_ops + op] = 1.0;
        }
    }
    Tensor::new(&[pairs.len(), layers * n_ops], x)
}

fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    let se: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    (se / pred.len().max(1) as f64).sqrt()
}

/// Adam-trained MSE regression on one-hot encodings.
///
/// Targets are standardised during training and the scaling is folded back
/// into the last layer afterwards, so the returned model maps encodings to
/// milliseconds directly. Parameters are finally rounded to f32 precision so
/// that a checkpoint reload reproduces predictions exactly.
pub fn fit_predictor<R: Rng + ?Sized>(
    pairs: &[LatencyPair],
    n_ops: usize,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<(LatencyModel, FitReport)> {
    if pairs.len() < MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "predictor needs at least {MIN_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.batch_size == 0 {
        return Err(Error::Config("latency fit: bad val_fraction or batch_size".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let n_val = ((pairs.len() as f64) * cfg.val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&LatencyPair> = train_idx.iter().map(|&i| &pairs[i]).collect();
    let val: Vec<&LatencyPair> = val_idx.iter().map(|&i| &pairs[i]).collect();

    let y: Vec<f64> = train.iter().map(|p| p.latency_ms).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64;
    let std = if var.sqrt() > 1e-9 * mean.abs().max(1.0) { var.sqrt() } else { 1.0 };

    let layers = train[0].arch.len();
    let mut model = LatencyModel::new(layers, n_ops, rng);
    // Zero output layer: training starts from the mean prediction.
    model.fc[2] = Linear {
        weight: Tensor::zeros(&[HIDDEN[1], 1]),
        bias: Tensor::zeros(&[1]),
    };
    let x_all = encode_pairs(&train, n_ops)?;
    let z_all: Vec<f64> = y.iter().map(|v| (v - mean) / std).collect();
    let mut opt = Adam::<f64>::with_params(cfg.lr, (0.9, 0.999), 1e-8, cfg.weight_decay);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let xb = x_all.gather_batch(chunk)?;
            let zb: Vec<f64> = chunk.iter().map(|&i| z_all[i]).collect();
            for p in model.params_mut() {
                p.zero_grad();
            }
            model.mse_backward(&xb, &zb)?;
            opt.step(&mut model.params_mut())?;
        }
    }
    for p in model.params_mut() {
        *p = Tensor::new(p.shape(), p.data().to_vec())?;
    }
    let last = &mut model.fc[2];
    last.weight = last.weight.map(|w| w * std);
    last.bias = last.bias.map(|b| b * std + mean);
    for p in model.params_mut() {
        *p = p.map(|v| v as f32 as f64);
    }
    model.trained = true;

    let train_pred = model.predict_batch(&x_all)?;
    let (val_rmse, val_spearman) = if val.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let vp = model.predict_batch(&encode_pairs(&val, n_ops)?)?;
        let vt: Vec<f64> = val.iter().map(|p| p.latency_ms).collect();
        (rmse(&vp, &vt), spearman(&vp, &vt))
    };
    let all = pairs.iter().map(|p| p.latency_ms);
    let report = FitReport {
        train_pairs: train.len(),
        val_pairs: val.len(),
        train_rmse: rmse(&train_pred, &y),
        val_rmse,
        val_spearman,
        latency_min: all.clone().fold(f64::INFINITY, f64::min),
        latency_max: all.fold(f64::NEG_INFINITY, f64::max),
    };
    Ok((model, report))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::space::operator_space;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact(c0: f64, gamma: f64) -> OracleParams {
        OracleParams {
            c0,
            c1: 0.5,
            gamma,
            sigma: 0.0,
        }
    }

    fn costs(macs: &[u64]) -> Vec<LayerCost> {
        macs.iter().map(|&m| LayerCost { macs: m }).collect()
    }

    fn small_config() -> SupernetConfig {
        SupernetConfig {
            input: [3, 16, 16],
            ..SupernetConfig::default()
        }
    }

    #[test]
    fn empty_network_costs_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(synthetic_oracle(&[], &exact(0.08, 0.8), &mut rng), 0.0);
    }

    #[test]
    fn linear_in_macs_without_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = OracleParams {
            c0: 1e-300,
            ..exact(0.0, 1.0)
        };
        let a = synthetic_oracle(&costs(&[1_000_000, 3_000_000]), &p, &mut rng);
        let b = synthetic_oracle(&costs(&[2_000_000, 6_000_000]), &p, &mut rng);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn deeper_network_pays_per_layer_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = exact(0.08, 1.0);
        let d = 4;
        let shallow = costs(&vec![3_000_000; d]);
        let deep = costs(&vec![1_000_000; 3 * d]);
        let gap = synthetic_oracle(&deep, &p, &mut rng) - synthetic_oracle(&shallow, &p, &mut rng);
        assert!((gap - 2.0 * d as f64 * p.c0).abs() < 1e-12);
    }

    #[test]
    fn noise_is_clipped_at_half_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = OracleParams {
            sigma: 100.0,
            ..exact(0.08, 0.8)
        };
        let layers = costs(&[500_000; 3]);
        let mean = p.mean_latency(&layers);
        for _ in 0..200 {
            assert!(synthetic_oracle(&layers, &p, &mut rng) >= 0.5 * mean - 1e-12);
        }
    }

    #[test]
    fn all_linear_faster_than_all_nonlinear() {
        let config = small_config();
        let ops = operator_space();
        let p = exact(0.08, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (i, a) in ops.iter().enumerate().filter(|(_, s)| !s.linear) {
            let j = ops
                .iter()
                .position(|b| b.linear && b.kernel == a.kernel && b.expansion == a.expansion)
                .unwrap();
            let l = config.num_layers();
            let nl = measure_architecture(&config, &OneHotArch::new(vec![i; l], 12).unwrap(), &p, &mut rng).unwrap();
            let lin = measure_architecture(&config, &OneHotArch::new(vec![j; l], 12).unwrap(), &p, &mut rng).unwrap();
            assert!(lin < nl, "{}: {lin} vs {nl}", a.name());
        }
    }

    #[test]
    fn pair_generation_is_seeded() {
        let config = small_config();
        let gen = |s| generate_pairs(&config, 20, &OracleParams::default(), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        let a = gen(5);
        assert_eq!(a, gen(5));
        assert_ne!(a, gen(6));
        assert!(a.iter().all(|p| p.latency_ms > 0.0));
        assert_eq!(read_pairs_jsonl(&write_pairs_jsonl(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn range_brackets_random_samples() {
        let config = small_config();
        let p = OracleParams::default().noiseless();
        let (lo, hi) = latency_range(&config, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pair in generate_pairs(&config, 50, &p, &mut rng).unwrap() {
            assert!(pair.latency_ms >= lo - 1e-12 && pair.latency_ms <= hi + 1e-12);
        }
        assert!(lo < hi);
    }

    #[test]
    fn too_few_pairs_refused() {
        let pairs = vec![
            LatencyPair {
                arch: vec![0; 6],
                latency_ms: 1.0
            };
            MIN_PAIRS - 1
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            fit_predictor(&pairs, 12, &FitConfig::default(), &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn memorises_a_single_pair() {
        let pair = LatencyPair {
            arch: vec![3, 7, 1, 11, 0, 5],
            latency_ms: 2.345,
        };
        let pairs = vec![pair.clone(); MIN_PAIRS];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = FitConfig {
            val_fraction: 0.0,
            epochs: 30,
            ..FitConfig::default()
        };
        let (model, report) = fit_predictor(&pairs, 12, &cfg, &mut rng).unwrap();
        let pred = model.predict_arch(&OneHotArch::new(pair.arch, 12).unwrap()).unwrap();
        assert!((pred - 2.345).abs() <= 1e-3 * 2.345, "{pred}");
        assert!(report.train_rmse <= 1e-3 * 2.345);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = LatencyModel::new(6, 12, &mut rng);
        // positive output bias keeps the clamp inactive
        model.fc[2].bias = Tensor::new(&[1], vec![5.0]).unwrap();
        for _ in 0..10 {
            let enc: Vec<Vec<f64>> = (0..6).map(|_| (0..12).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let (_, g) = model.predict_with_grad(&enc).unwrap();
            let flat: Vec<f64> = enc.iter().flatten().copied().collect();
            let analytic: Vec<f64> = g.iter().flatten().copied().collect();
            let err = grad_check(|v| model.predict_flat(v).unwrap(), &analytic, &flat, 1e-6);
            assert!(err <= 1e-5, "{err}");
        }
    }

    #[test]
    fn hard_encoding_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = LatencyModel::new(6, 12, &mut rng);
        let arch = OneHotArch::uniform(6, 12, &mut rng);
        let (v, _) = model.predict_with_grad(&arch.matrix()).unwrap();
        assert_eq!(v, model.predict_arch(&arch).unwrap());
        let (z, g) = model.predict_with_grad(&vec![vec![0.0; 12]; 6]).unwrap();
        assert!(z.is_finite() && z >= 0.0);
        assert!(g.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // ranks a = [1,2,3,4], b = [1,3,2,4]: 1 - 6*2/(4*15) = 0.8
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 5.0, 2.0, 9.0]) - 0.8).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}
