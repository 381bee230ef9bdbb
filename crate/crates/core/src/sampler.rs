//! Architecture sampling: softmax relaxation, Gumbel-Softmax single path,
//! Gumbel top-k ordering without replacement and the sandwich rule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::block::{MbConv, Pass};
use crate::error::{Error, Result};
use crate::space::{ArchParams, LayerMix, OneHotArch};
use crate::tensor::{Element, Tensor};

/// Search strategy, selectable per experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Weighted sum over every operator (multi-path).
    DartsSoftmax,
    /// Rank-1 Gumbel path only.
    GdasSingle,
    /// All `N` ranked paths per iteration.
    TopkFull,
    /// Most, least and one random ranked path.
    Sandwich,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::DartsSoftmax,
        Strategy::GdasSingle,
        Strategy::TopkFull,
        Strategy::Sandwich,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DartsSoftmax => "darts_softmax",
            Strategy::GdasSingle => "gdas_single",
            Strategy::TopkFull => "topk_full",
            Strategy::Sandwich => "sandwich",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Backpropagates `d/dw` through `w = softmax(alpha_row)`.
pub fn softmax_backward(alpha_row: &[f64], grad_w: &[f64]) -> Vec<f64> {
    let p = softmax(alpha_row);
    let dot: f64 = p.iter().zip(grad_w).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_w).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Standard Gumbel samples `-ln(-ln U)` with `U` kept inside `(1e-10, 1 - 1e-10)`.
pub fn gumbel_noise<R: Rng + ?Sized>(layers: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..layers)
        .map(|_| (0..n).map(|_| gumbel(rng)).collect())
        .collect()
}

#[inline]
fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    const LO: f64 = 1e-10;
    let u = LO + (1.0 - 2.0 * LO) * rng.gen::<f64>();
    -(-u.ln()).ln()
}

/// One discretised single-path sub-network with the soft weights it was
/// derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub indices: Vec<usize>,
    /// `u`: temperature softmax over the operators still available at this rank.
    pub soft: Vec<Vec<f64>>,
    /// Operators that were still available when this path was drawn.
    pub active: Vec<Vec<bool>>,
    /// `ū`: one-hot of `indices`.
    pub hard: OneHotArch,
    pub straight_through: bool,
    pub tau: f64,
}

impl PathSample {
    /// Gradient with respect to `alpha` of a loss whose gradient with respect
    /// to the hard one-hot `ū` is `grad_hard` (`L x N`), using the
    /// straight-through estimate `dū/du = 1`.
    pub fn alpha_grad(&self, alpha: &ArchParams, grad_hard: &[Vec<f64>]) -> Vec<Vec<f64>> {
        alpha
            .alpha
            .iter()
            .enumerate()
            .map(|(l, arow)| {
                let u = &self.soft[l];
                let act = &self.active[l];
                let gu = &grad_hard[l];
                let inner: f64 = (0..u.len()).filter(|&j| act[j]).map(|j| u[j] * gu[j]).sum();
                let glogp: Vec<f64> = (0..u.len())
                    .map(|j| {
                        if act[j] {
                            u[j] * (gu[j] - inner) / self.tau
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let p = softmax(arow);
                let total: f64 = glogp.iter().sum();
                glogp.iter().zip(&p).map(|(g, pk)| g - pk * total).collect()
            })
            .collect()
    }

    /// Unit-weight mix for the supernet forward.
    pub fn mix<T: Element>(&self) -> Vec<LayerMix<T>> {
        self.indices.iter().map(|&n| vec![(n, T::one())]).collect()
    }
}

/// Gumbel-perturbed ranking of every operator in every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// `order[l][r]` is the operator at rank `r` (0 = most important).
    pub order: Vec<Vec<usize>>,
    /// `(log p + g) / tau`.
    pub scores: Vec<Vec<f64>>,
    pub tau: f64,
}

impl Ranking {
    pub fn n_ops(&self) -> usize {
        self.order.first().map_or(0, Vec::len)
    }

    /// Path taking rank `rank` in every layer.
    pub fn path_at_rank(&self, rank: usize) -> PathSample {
        self.path(&vec![rank; self.order.len()])
    }

    /// Path taking `ranks[l]` in layer `l`. Soft weights are normalised over
    /// the operators not excluded by higher ranks.
    pub fn path(&self, ranks: &[usize]) -> PathSample {
        let n = self.n_ops();
        let mut indices = Vec::with_capacity(ranks.len());
        let mut soft = Vec::with_capacity(ranks.len());
        let mut active = Vec::with_capacity(ranks.len());
        for (l, &r) in ranks.iter().enumerate() {
            let order = &self.order[l];
            let mut mask = vec![true; n];
            for &ex in &order[..r] {
                mask[ex] = false;
            }
            let s = &self.scores[l];
            let m = (0..n)
                .filter(|&j| mask[j])
                .map(|j| s[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..n)
                .map(|j| if mask[j] { (s[j] - m).exp() } else { 0.0 })
                .collect();
            let z: f64 = e.iter().sum();
            soft.push(e.into_iter().map(|v| v / z).collect());
            active.push(mask);
            indices.push(order[r]);
        }
        PathSample {
            hard: OneHotArch {
                n_ops: n,
                indices: indices.clone(),
            },
            indices,
            soft,
            active,
            straight_through: true,
            tau: self.tau,
        }
    }
}

/// Ranks operators per layer by descending `(log softmax(alpha) + g) / tau`.
/// Sorting one Gumbel perturbation yields the same ordering distribution as
/// drawing without replacement and renormalising after each draw.
pub fn gumbel_topk_order<R: Rng + ?Sized>(alpha: &ArchParams, tau: f64, rng: &mut R) -> Result<Ranking> {
    let g = gumbel_noise(alpha.layers(), alpha.n_ops(), rng);
    ranking_from_noise(alpha, &g, tau)
}

/// Deterministic ranking for given Gumbel noise `g` (`L x N`).
pub fn ranking_from_noise(alpha: &ArchParams, g: &[Vec<f64>], tau: f64) -> Result<Ranking> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if g.len() != alpha.layers() {
        return Err(Error::dim("gumbel noise layers", alpha.layers(), g.len()));
    }
    let mut order = Vec::with_capacity(alpha.layers());
    let mut scores = Vec::with_capacity(alpha.layers());
    for (row, gr) in alpha.alpha.iter().zip(g) {
        if gr.len() != row.len() {
            return Err(Error::dim("gumbel noise operators", row.len(), gr.len()));
        }
        let lp = log_softmax(row);
        let s: Vec<f64> = lp.iter().zip(gr).map(|(v, gv)| (v + gv) / tau).collect();
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        order.push(idx);
        scores.push(s);
    }
    Ok(Ranking { order, scores, tau })
}

/// Explicit sequential sampling without replacement: draw from `p`, remove
/// the draw, renormalise, repeat. Returns the full per-layer ordering.
pub fn iterative_order<R: Rng + ?Sized>(alpha: &ArchParams, rng: &mut R) -> Vec<Vec<usize>> {
    alpha
        .alpha
        .iter()
        .map(|row| {
            let mut p = softmax(row);
            let mut out = Vec::with_capacity(p.len());
            for _ in 0..p.len() {
                let total: f64 = p.iter().sum();
                let mut t = rng.gen::<f64>() * total;
                let mut pick = None;
                for (j, &pj) in p.iter().enumerate() {
                    if pj <= 0.0 {
                        continue;
                    }
                    pick = Some(j);
                    if t < pj {
                        break;
                    }
                    t -= pj;
                }
                let j = pick.expect("probability mass remains");
                out.push(j);
                p[j] = 0.0;
            }
            out
        })
        .collect()
}

/// Rank-1 Gumbel path.
pub fn single_path_sample<R: Rng + ?Sized>(alpha: &ArchParams, tau: f64, rng: &mut R) -> Result<PathSample> {
    Ok(gumbel_topk_order(alpha, tau, rng)?.path_at_rank(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SandwichTriple {
    pub most: PathSample,
    pub random: PathSample,
    pub least: PathSample,
}

impl SandwichTriple {
    pub fn paths(&self) -> [&PathSample; 3] {
        [&self.most, &self.random, &self.least]
    }
}

/// Most (rank 1), least (rank N) and a uniformly random middle rank per layer.
pub fn sandwich_select<R: Rng + ?Sized>(ranking: &Ranking, rng: &mut R) -> Result<SandwichTriple> {
    let n = ranking.n_ops();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "sandwich rule needs at least 3 operators, got {n}"
        )));
    }
    let layers = ranking.order.len();
    let mid: Vec<usize> = (0..layers).map(|_| rng.gen_range(1..n - 1)).collect();
    Ok(SandwichTriple {
        most: ranking.path_at_rank(0),
        random: ranking.path(&mid),
        least: ranking.path_at_rank(n - 1),
    })
}

/// Softmax-weighted mixture over every operator of every layer.
pub fn softmax_mix<T: Element>(alpha: &ArchParams) -> Vec<LayerMix<T>> {
    alpha
        .alpha
        .iter()
        .map(|row| {
            softmax(row)
                .into_iter()
                .enumerate()
                .map(|(n, w)| (n, T::of(w)))
                .collect()
        })
        .collect()
}

/// Output of one relaxed layer: `sum_n softmax(alpha_row)_n * op_n(x)`.
pub fn softmax_relaxation<T: Element>(
    ops: &mut [MbConv<T>],
    alpha_row: &[f64],
    x: &Tensor<T>,
    pass: Pass,
) -> Result<Tensor<T>> {
    if ops.len() != alpha_row.len() {
        return Err(Error::dim("relaxed layer operators", alpha_row.len(), ops.len()));
    }
    let w = softmax(alpha_row);
    let mut out: Option<Tensor<T>> = None;
    for (op, &wn) in ops.iter_mut().zip(&w) {
        let (y, _) = op.forward(x, pass)?;
        match out.as_mut() {
            None => out = Some(y.scale(T::of(wn))),
            Some(acc) => acc.axpy(T::of(wn), &y)?,
        }
    }
    out.ok_or_else(|| Error::InvalidArgument("empty operator list".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gumbel_stream_is_seeded() {
        let a = gumbel_noise(3, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = gumbel_noise(3, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let a = ArchParams::zeros(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gumbel_topk_order(&a, 0.0, &mut rng).is_err());
        assert!(gumbel_topk_order(&a, -1.0, &mut rng).is_err());
    }

    #[test]
    fn single_operator_ranking_is_trivial() {
        let a = ArchParams::zeros(2, 1);
        let r = gumbel_topk_order(&a, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.order, vec![vec![0], vec![0]]);
        let p = r.path_at_rank(0);
        assert_eq!(p.hard.matrix(), vec![vec![1.0], vec![1.0]]);
        assert_eq!(p.soft, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn sandwich_needs_three_ops() {
        let a = ArchParams::zeros(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = gumbel_topk_order(&a, 1.0, &mut rng).unwrap();
        assert!(sandwich_select(&r, &mut rng).is_err());
    }

    #[test]
    fn three_ops_force_middle_rank() {
        let a = ArchParams::zeros(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let r = gumbel_topk_order(&a, 2.0, &mut rng).unwrap();
            let t = sandwich_select(&r, &mut rng).unwrap();
            for l in 0..4 {
                assert_eq!(t.random.indices[l], r.order[l][1]);
            }
        }
    }

    #[test]
    fn sandwich_indices_pairwise_distinct() {
        let a = ArchParams {
            alpha: vec![vec![3.0, 0.0, -1.0, 0.5, 0.0, 0.0, 1.0, 2.0, -3.0, 0.0, 0.0, 0.1]; 6],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let r = gumbel_topk_order(&a, 5.0, &mut rng).unwrap();
            let t = sandwich_select(&r, &mut rng).unwrap();
            for l in 0..6 {
                let (m, x, s) = (t.most.indices[l], t.random.indices[l], t.least.indices[l]);
                assert!(m != x && x != s && m != s);
            }
        }
    }

    #[test]
    fn single_path_equals_rank_one() {
        let a = ArchParams {
            alpha: vec![vec![0.3, -0.2, 1.0, 0.0]; 3],
        };
        let p = single_path_sample(&a, 5.0, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let r = gumbel_topk_order(&a, 5.0, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        assert_eq!(p.indices, r.path_at_rank(0).indices);
    }

    #[test]
    fn rank_one_soft_weights_are_gumbel_softmax() {
        let a = ArchParams {
            alpha: vec![vec![0.5, -1.0, 2.0]],
        };
        let tau = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = gumbel_topk_order(&a, tau, &mut rng).unwrap();
        let g = gumbel_noise(1, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let lp = log_softmax(&a.alpha[0]);
        let z: Vec<f64> = lp.iter().zip(&g[0]).map(|(l, g)| (l + g) / tau).collect();
        let u = softmax(&z);
        let p = r.path_at_rank(0);
        for (x, y) in p.soft[0].iter().zip(&u) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(p.indices[0], crate::space::argmax(&u));
    }

    #[test]
    fn alpha_grad_matches_finite_differences_with_fixed_noise() {
        // d/dalpha of sum_j c_j u_j(alpha) with the Gumbel draw held fixed
        let alpha = ArchParams {
            alpha: vec![vec![0.2, -0.7, 1.1, 0.4], vec![0.0, 0.3, -0.3, 0.9]],
        };
        let tau = 2.0;
        let c = vec![vec![1.0, -2.0, 0.5, 3.0], vec![0.1, 0.7, -1.2, 0.4]];
        let g = gumbel_noise(2, 4, &mut ChaCha8Rng::seed_from_u64(77));
        let soft_of = |a: &ArchParams, excluded: &[Vec<usize>]| -> Vec<Vec<f64>> {
            a.alpha
                .iter()
                .enumerate()
                .map(|(l, row)| {
                    let lp = log_softmax(row);
                    let z: Vec<f64> = (0..4)
                        .map(|j| {
                            if excluded[l].contains(&j) {
                                f64::NEG_INFINITY
                            } else {
                                (lp[j] + g[l][j]) / tau
                            }
                        })
                        .collect();
                    softmax(&z)
                })
                .collect()
        };
        for rank in 0..3 {
            let ranking = {
                let scores: Vec<Vec<f64>> = alpha
                    .alpha
                    .iter()
                    .enumerate()
                    .map(|(l, row)| {
                        let lp = log_softmax(row);
                        (0..4).map(|j| (lp[j] + g[l][j]) / tau).collect()
                    })
                    .collect();
                let order = scores
                    .iter()
                    .map(|s| {
                        let mut idx: Vec<usize> = (0..4).collect();
                        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
                        idx
                    })
                    .collect();
                Ranking { order, scores, tau }
            };
            let path = ranking.path_at_rank(rank);
            let excluded: Vec<Vec<usize>> =
                ranking.order.iter().map(|o| o[..rank].to_vec()).collect();
            let analytic = path.alpha_grad(&alpha, &c);
            let h = 1e-6;
            for l in 0..2 {
                for k in 0..4 {
                    let mut ap = alpha.clone();
                    ap.alpha[l][k] += h;
                    let mut am = alpha.clone();
                    am.alpha[l][k] -= h;
                    let f = |a: &ArchParams| -> f64 {
                        soft_of(a, &excluded)
                            .iter()
                            .zip(&c)
                            .map(|(u, cc)| u.iter().zip(cc).map(|(x, y)| x * y).sum::<f64>())
                            .sum()
                    };
                    let num = (f(&ap) - f(&am)) / (2.0 * h);
                    assert!((num - analytic[l][k]).abs() < 1e-7, "rank {rank} l {l} k {k}");
                }
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            let j = serde_json::to_string(&s).unwrap();
            assert_eq!(j, format!("\"{}\"", s.name()));
        }
        assert!("nope".parse::<Strategy>().is_err());
    }
}
