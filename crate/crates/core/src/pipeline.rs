//! End-to-end pipeline stages. Each stage reads its inputs from the output
//! directory, writes versioned artifacts next to them and returns a JSON
//! summary that is also saved as `<stage>.json`.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{ArtifactMeta, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{read_file, synth_dataset, write_atomic, Dataset};
use crate::elastic::{calibrate_bn, elastic_ablation, evaluate_at_resolution, train_elastic, AblationCell};
use crate::error::{Error, Result};
use crate::latency::{fit_predictor, generate_pairs, latency_range, write_pairs_jsonl};
use crate::network::Network;
use crate::plot::{line_plot, Series};
use crate::sampler::Strategy;
use crate::search::{ablate_strategies, read_trace_jsonl, run_search, trace_jsonl, SearchResult, StrategyReport};
use crate::space::{build_network, OneHotArch};
use crate::training::{metrics_jsonl, train_hybrid_transformable, train_standard, EpochMetrics};
use crate::transform::{transform_network, verify_equivalence};

pub const DATASET: &str = "dataset.dwds";
pub const PAIRS: &str = "latency_pairs.jsonl";
pub const PREDICTOR: &str = "predictor.ckpt";
pub const SUPERNET: &str = "supernet.ckpt";
pub const TRACE: &str = "search_trace.jsonl";
pub const SEARCH_RESULT: &str = "search_result.json";
pub const NETWORK: &str = "network.ckpt";
pub const METRICS: &str = "train_metrics.jsonl";
pub const TRANSFORMED: &str = "network_transformed.ckpt";
pub const CALIBRATED: &str = "network_calibrated.ckpt";
/// The only output that is not reproducible bit for bit.
pub const ABLATE_TIMING: &str = "ablate_timing.json";

pub const SUMMARY_VERSION: u32 = 1;
/// Probes compared by `verify`.
pub const VERIFY_SAMPLES: usize = 2000;
pub const VERIFY_TOL_F32: f64 = 1e-3;
pub const VERIFY_TOL_F64: f64 = 1e-9;
/// Seeds per ablation.
pub const ABLATION_SEEDS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    LatencyFit,
    Search,
    Train,
    Transform,
    Verify,
    Calibrate,
    Eval,
    Ablate,
    Report,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::GenData,
        Command::LatencyFit,
        Command::Search,
        Command::Train,
        Command::Transform,
        Command::Verify,
        Command::Calibrate,
        Command::Eval,
        Command::Ablate,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::LatencyFit => "latency-fit",
            Command::Search => "search",
            Command::Train => "train",
            Command::Transform => "transform",
            Command::Verify => "verify",
            Command::Calibrate => "calibrate",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Report => "report",
        }
    }
}

/// Number of worker threads: `DWNAS_THREADS` if set, else the available
/// parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("DWNAS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("DWNAS_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Applies `f` to every item on at most `threads` scoped threads, keeping
/// the input order in the output.
pub fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// The searched architecture plus provenance, as written by `search`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchArtifact {
    pub format_version: u32,
    pub meta: ArtifactMeta,
    pub result: SearchResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridCell {
    pub seed: u64,
    pub standard_val_acc: f64,
    pub hybrid_val_acc: f64,
}

/// Settings for one invocation.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    /// Verification recomputes the transform in f64.
    pub f64_mode: bool,
    /// Lets `report` combine artifacts with different config hashes.
    pub force: bool,
    pub threads: usize,
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

fn to_pretty(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>) -> Self {
        let out = out.unwrap_or_else(|| cfg.output_dir.clone());
        Run {
            cfg,
            out,
            f64_mode: false,
            force: false,
            threads: 1,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn execute(&self, cmd: Command) -> Result<Value> {
        std::fs::create_dir_all(&self.out)?;
        let body = match cmd {
            Command::GenData => self.gen_data()?,
            Command::LatencyFit => self.latency_fit()?,
            Command::Search => self.search()?,
            Command::Train => self.train()?,
            Command::Transform => self.transform()?,
            Command::Verify => self.verify()?,
            Command::Calibrate => self.calibrate()?,
            Command::Eval => self.eval()?,
            Command::Ablate => self.ablate()?,
            Command::Report => self.report()?,
        };
        let mut summary = json!({
            "format_version": SUMMARY_VERSION,
            "command": cmd.name(),
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash(),
        });
        summary
            .as_object_mut()
            .expect("object")
            .extend(body.as_object().cloned().unwrap_or_default());
        write_atomic(&self.path(&format!("{}.json", cmd.name())), &to_pretty(&summary)?)?;
        Ok(summary)
    }

    fn check_meta(&self, what: &Path, meta: &ArtifactMeta) {
        if meta.config_hash != self.cfg.hash() {
            warn!(
                "{} was produced under config {} (current {})",
                what.display(),
                &meta.config_hash[..12.min(meta.config_hash.len())],
                &self.cfg.hash()[..12]
            );
        }
    }

    fn load_checkpoint(&self, name: &str) -> Result<Checkpoint> {
        let path = self.path(name);
        let ck = Checkpoint::load(&path)?;
        self.check_meta(&path, &ck.manifest.meta);
        Ok(ck)
    }

    fn save_checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        ck.save(&self.path(name))
    }

    /// Training and validation parts of the generated dataset.
    pub fn splits(&self) -> Result<(Dataset, Dataset)> {
        let data = Dataset::load(&self.path(DATASET))?;
        let d = &self.cfg.dataset;
        if data.image_shape() != [d.channels, d.height, d.width] || data.classes != d.classes {
            return Err(Error::Format(format!(
                "{}: images {:?} / {} classes do not match the config",
                DATASET,
                data.image_shape(),
                data.classes
            )));
        }
        data.split(1.0 - d.val_fraction)
    }

    fn searched_arch(&self) -> Result<OneHotArch> {
        let path = self.path(SEARCH_RESULT);
        let art: SearchArtifact = serde_json::from_slice(&read_file(&path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        self.check_meta(&path, &art.meta);
        OneHotArch::new(art.result.arch, crate::space::operator_space().len())
    }

    fn gen_data(&self) -> Result<Value> {
        let d = &self.cfg.dataset;
        let data = synth_dataset(self.cfg.seed, d.classes, d.count, d.channels, d.height, d.width)?;
        data.save(&self.path(DATASET))?;
        let mut per_class = vec![0usize; d.classes];
        for &l in &data.labels {
            per_class[l] += 1;
        }
        Ok(json!({ "dataset": DATASET, "count": data.len(), "per_class": per_class }))
    }

    fn latency_fit(&self) -> Result<Value> {
        let lc = &self.cfg.latency_oracle;
        let mut rng = stage_rng(self.cfg.seed, 1);
        let pairs = generate_pairs(&self.cfg.supernet, lc.pairs, &lc.oracle, &mut rng)?;
        write_atomic(&self.path(PAIRS), write_pairs_jsonl(&pairs)?.as_bytes())?;
        let (model, report) = fit_predictor(&pairs, crate::space::operator_space().len(), &lc.fit, &mut rng)?;
        self.save_checkpoint(PREDICTOR, &Checkpoint::from_predictor(&model, self.cfg.meta()))?;
        let (lo, hi) = latency_range(&self.cfg.supernet, &lc.oracle)?;
        let range = report.latency_max - report.latency_min;
        info!(
            "predictor: val RMSE {:.4} ms ({:.2}% of range), Spearman {:.4}",
            report.val_rmse,
            100.0 * report.val_rmse / range,
            report.val_spearman
        );
        Ok(json!({
            "pairs": PAIRS,
            "predictor": PREDICTOR,
            "fit": report,
            "val_rmse_pct_of_range": 100.0 * report.val_rmse / range,
            "space_latency_range_ms": [lo, hi],
        }))
    }

    fn search(&self) -> Result<Value> {
        let (train, _) = self.splits()?;
        let predictor = self.load_checkpoint(PREDICTOR)?.to_predictor()?;
        let out = run_search(
            &self.cfg.search,
            &self.cfg.supernet,
            &train,
            &predictor,
            &self.cfg.latency_oracle.oracle,
            self.cfg.seed,
        )?;
        info!("search finished in {:.1} s", out.wall_time_s);
        self.save_checkpoint(SUPERNET, &Checkpoint::from_supernet(&out.supernet, self.cfg.meta()))?;
        write_atomic(&self.path(TRACE), trace_jsonl(&out.trace)?.as_bytes())?;
        let r = &out.result;
        let art = SearchArtifact {
            format_version: SUMMARY_VERSION,
            meta: self.cfg.meta(),
            result: r.clone(),
        };
        write_atomic(&self.path(SEARCH_RESULT), &to_pretty(&art)?)?;
        Ok(json!({
            "arch": r.arch,
            "constraint_ms": r.constraint_ms,
            "oracle_latency_ms": r.oracle_latency_ms,
            "predicted_latency_ms": r.predicted_latency_ms,
            "latency_error_pct": 100.0 * (r.oracle_latency_ms - r.constraint_ms).abs() / r.constraint_ms,
            "lambda": r.lambda,
            "coverage_pct": r.coverage_pct,
            "trace_sha256": r.trace_sha256,
        }))
    }

    fn train(&self) -> Result<Value> {
        let (train, val) = self.splits()?;
        let arch = self.searched_arch()?;
        let mut rng = stage_rng(self.cfg.seed, 3);
        let mut net: Network<f32> = build_network(&self.cfg.supernet, &arch, &mut rng)?;
        let tc = &self.cfg.train;
        let history = if tc.hybrid {
            train_hybrid_transformable(&mut net, &train, &val, &tc.schedule, &mut rng)?
        } else {
            train_standard(&mut net, &train, &val, &tc.schedule, &mut rng)?
        };
        write_atomic(&self.path(METRICS), metrics_jsonl(&history)?.as_bytes())?;
        let ec = &self.cfg.elastic;
        let elastic = if ec.schedule.epochs > 0 {
            train_elastic(&mut net, &train, &ec.grid, &ec.schedule, ec.options, &mut rng)?
        } else {
            Vec::new()
        };
        self.save_checkpoint(NETWORK, &Checkpoint::from_network(&net, self.cfg.meta(), None))?;
        let val_acc = crate::training::evaluate(&mut net, &val, crate::block::Pass::INFER, 256)?;
        Ok(json!({
            "network": NETWORK,
            "metrics": METRICS,
            "arch": arch.indices,
            "hybrid": tc.hybrid,
            "final_val_acc": val_acc,
            "elastic_epochs": elastic,
        }))
    }

    fn transform(&self) -> Result<Value> {
        let deep = self.load_checkpoint(NETWORK)?.to_network()?;
        let (shallow, report) = transform_network(&deep)?;
        self.save_checkpoint(TRANSFORMED, &Checkpoint::from_network(&shallow, self.cfg.meta(), None))?;
        let oracle = self.cfg.latency_oracle.oracle.noiseless();
        let side = self.cfg.dataset.height;
        Ok(json!({
            "network": TRANSFORMED,
            "report": report,
            "oracle_latency_ms_before": oracle.mean_latency(&deep.layer_costs(side)?),
            "oracle_latency_ms_after": oracle.mean_latency(&shallow.layer_costs(side)?),
        }))
    }

    fn verify(&self) -> Result<Value> {
        let deep = self.load_checkpoint(NETWORK)?.to_network()?;
        let shallow = self.load_checkpoint(TRANSFORMED)?.to_network()?;
        let (expected, _) = transform_network(&deep)?;
        if expected.layout() != shallow.layout() {
            return Err(Error::Verification(format!(
                "{TRANSFORMED} does not have the structure of the transformed {NETWORK}"
            )));
        }
        let d = &self.cfg.dataset;
        let input = [d.channels, d.height, d.width];
        let seed = self.cfg.seed;
        let report = if self.f64_mode {
            let (mut s64, _) = transform_network(&deep.cast::<f64>())?;
            verify_equivalence(&mut deep.cast::<f64>(), &mut s64, input, VERIFY_SAMPLES, VERIFY_TOL_F64, seed)?
        } else {
            verify_equivalence(&mut deep.clone(), &mut shallow.clone(), input, VERIFY_SAMPLES, VERIFY_TOL_F32, seed)?
        };
        if !report.passed {
            return Err(Error::Verification(format!(
                "max abs logit difference {:.3e} exceeds {:.1e}",
                report.max_abs, report.tol
            )));
        }
        Ok(json!({ "precision": if self.f64_mode { "f64" } else { "f32" }, "report": report }))
    }

    fn calibrate(&self) -> Result<Value> {
        let (train, _) = self.splits()?;
        let net = self.load_checkpoint(NETWORK)?.to_network()?;
        let ec = &self.cfg.elastic;
        let stats = calibrate_bn(&net, &train, &ec.grid, ec.n_calib)?;
        let resolutions: Vec<usize> = stats.by_resolution.keys().copied().collect();
        self.save_checkpoint(CALIBRATED, &Checkpoint::from_network(&net, self.cfg.meta(), Some(stats)))?;
        Ok(json!({
            "network": CALIBRATED,
            "resolutions": resolutions,
            "n_calib": ec.n_calib.min(train.len()),
        }))
    }

    fn eval(&self) -> Result<Value> {
        let (_, val) = self.splits()?;
        let net = self.load_checkpoint(NETWORK)?.to_network()?;
        let stats = if self.path(CALIBRATED).exists() {
            self.load_checkpoint(CALIBRATED)?.manifest.calibrated
        } else {
            warn!("{CALIBRATED} not found; evaluating with training statistics only");
            None
        };
        let oracle = self.cfg.latency_oracle.oracle.noiseless();
        let mut rows = Vec::new();
        for r in self.cfg.elastic.grid.resolutions() {
            let running = evaluate_at_resolution(&net, None, &val, r)?;
            let calibrated = stats.as_ref().map(|s| evaluate_at_resolution(&net, Some(s), &val, r)).transpose()?;
            let mut deployed = net.clone();
            if let Some(s) = &stats {
                s.apply(&mut deployed, r)?;
            }
            let (shallow, _) = transform_network(&deployed)?;
            let transformed = evaluate_at_resolution(&shallow, None, &val, r)?;
            rows.push(json!({
                "resolution": r,
                "accuracy_running_stats": running,
                "accuracy_calibrated": calibrated,
                "accuracy_transformed": transformed,
                "oracle_latency_ms": oracle.mean_latency(&shallow.layer_costs(r)?),
            }));
        }
        Ok(json!({ "resolutions": rows }))
    }

    fn ablate(&self) -> Result<Value> {
        let (train, val) = self.splits()?;
        let predictor = self.load_checkpoint(PREDICTOR)?.to_predictor()?;
        let arch = self.searched_arch()?;
        let seeds: Vec<u64> = (0..ABLATION_SEEDS).map(|i| self.cfg.seed + i).collect();
        let cfg = &self.cfg;

        let strategies = par_map(&seeds, self.threads, |&s| {
            ablate_strategies(
                &cfg.search,
                &cfg.supernet,
                &train,
                &predictor,
                &cfg.latency_oracle.oracle,
                &Strategy::ALL,
                s,
            )
        })?;
        let timing: Vec<Value> = seeds
            .iter()
            .zip(&strategies)
            .map(|(s, (_, t))| {
                json!({ "seed": s, "wall_time_s": Strategy::ALL.iter().map(|x| x.name()).zip(t.iter()).collect::<std::collections::BTreeMap<_, _>>() })
            })
            .collect();
        write_atomic(&self.path(ABLATE_TIMING), &to_pretty(&timing)?)?;
        let strategy_rows: Vec<(u64, Vec<StrategyReport>)> =
            seeds.iter().copied().zip(strategies.into_iter().map(|(r, _)| r)).collect();

        let init: Network<f32> = if self.path(NETWORK).exists() {
            self.load_checkpoint(NETWORK)?.to_network()?
        } else {
            build_network(&cfg.supernet, &arch, &mut stage_rng(cfg.seed, 8))?
        };
        let elastic: Vec<AblationCell> = par_map(&seeds, self.threads, |&s| {
            elastic_ablation(&init, &train, &val, &cfg.elastic.grid, &cfg.elastic.schedule, cfg.elastic.n_calib, &[s])
        })?
        .into_iter()
        .flatten()
        .collect();

        let hybrid: Vec<HybridCell> = par_map(&seeds, self.threads, |&s| {
            let run = |hybrid: bool| -> Result<Vec<EpochMetrics>> {
                let mut rng = stage_rng(s, 9);
                let mut net: Network<f32> = build_network(&cfg.supernet, &arch, &mut rng)?;
                if hybrid {
                    train_hybrid_transformable(&mut net, &train, &val, &cfg.train.schedule, &mut rng)
                } else {
                    train_standard(&mut net, &train, &val, &cfg.train.schedule, &mut rng)
                }
            };
            let last = |h: Vec<EpochMetrics>| h.last().map_or(0.0, |m| m.val_acc);
            Ok(HybridCell {
                seed: s,
                standard_val_acc: last(run(false)?),
                hybrid_val_acc: last(run(true)?),
            })
        })?;

        Ok(json!({
            "seeds": seeds,
            "strategies": strategy_rows.iter().map(|(s, r)| json!({"seed": s, "reports": r})).collect::<Vec<_>>(),
            "elastic": elastic,
            "hybrid": hybrid,
            "timing": ABLATE_TIMING,
        }))
    }

    fn report(&self) -> Result<Value> {
        let mut seen = Vec::new();
        for cmd in Command::ALL.iter().filter(|&&c| c != Command::Report) {
            let path = self.path(&format!("{}.json", cmd.name()));
            if !path.exists() {
                continue;
            }
            let v: Value = serde_json::from_slice(&read_file(&path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let hash = v.get("config_hash").and_then(Value::as_str).unwrap_or_default().to_string();
            seen.push((cmd.name(), hash));
        }
        let current = self.cfg.hash();
        let mismatched: Vec<&str> = seen.iter().filter(|(_, h)| *h != current).map(|(n, _)| *n).collect();
        if !mismatched.is_empty() {
            let msg = format!("artifacts from a different config: {}", mismatched.join(", "));
            if !self.force {
                return Err(Error::Config(format!("{msg} (pass --force to combine them)")));
            }
            warn!("{msg}");
        }

        let mut out = json!({ "stages": seen.iter().map(|(n, _)| *n).collect::<Vec<_>>(), "mixed_configs": !mismatched.is_empty() });
        let obj = out.as_object_mut().expect("object");
        if self.path(TRACE).exists() {
            let trace = read_trace_jsonl(std::str::from_utf8(&read_file(&self.path(TRACE))?).unwrap_or_default())?;
            let art: Option<SearchArtifact> = read_file(&self.path(SEARCH_RESULT))
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok());
            let t = art.as_ref().map_or_else(
                || {
                    latency_range(&self.cfg.supernet, &self.cfg.latency_oracle.oracle)
                        .map(|(lo, hi)| self.cfg.search.constraint_ms.unwrap_or(0.5 * (lo + hi)))
                },
                |a| Ok(a.result.constraint_ms),
            )?;
            let last = trace.last().ok_or_else(|| Error::Format(format!("{TRACE} is empty")))?;
            obj.insert("constraint_ms".into(), json!(t));
            obj.insert("iterations".into(), json!(trace.len()));
            obj.insert("final_lambda".into(), json!(last.lambda));
            obj.insert("final_lat_pred_ms".into(), json!(last.lat_pred_ms));
            obj.insert("final_rel_latency_error".into(), json!((last.lat_pred_ms - t).abs() / t));
            if let Some(a) = &art {
                obj.insert(
                    "final_oracle_rel_latency_error".into(),
                    json!((a.result.oracle_latency_ms - t).abs() / t),
                );
            }
            let lat = Series {
                label: "predicted latency (ms)",
                points: trace.iter().map(|r| (r.iter as f64, r.lat_pred_ms)).collect(),
            };
            write_atomic(
                &self.path("search_latency.svg"),
                line_plot("Search latency", "iteration", &[lat], Some(("T", t))).as_bytes(),
            )?;
            let lam = Series {
                label: "lambda",
                points: trace.iter().map(|r| (r.iter as f64, r.lambda)).collect(),
            };
            write_atomic(
                &self.path("search_lambda.svg"),
                line_plot("Multiplier", "iteration", &[lam], Some(("0", 0.0))).as_bytes(),
            )?;
        }
        if self.path(METRICS).exists() {
            let text = String::from_utf8_lossy(&read_file(&self.path(METRICS))?).into_owned();
            let history: Vec<EpochMetrics> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()?;
            let acc = Series {
                label: "validation accuracy",
                points: history.iter().map(|m| (m.epoch as f64, m.val_acc)).collect(),
            };
            let eps = Series {
                label: "graft coefficient",
                points: history.iter().map(|m| (m.epoch as f64, m.eps)).collect(),
            };
            write_atomic(
                &self.path("train_accuracy.svg"),
                line_plot("Training", "epoch", &[acc, eps], None).as_bytes(),
            )?;
            obj.insert("final_val_acc".into(), json!(history.last().map(|m| m.val_acc)));
        }
        Ok(out)
    }
}
