use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tdvit::backbone::{temporal_receptive_field, BlockKind, Model, ModelConfig, StageSpec};
use tdvit::gradsuite::run_suite;
use tdvit::numerics::{trunc_normal, ParamSnapshot, Tensor};
use tdvit::streaming::{cost_summary, measure_trf_random, process_video, CostRow};
use tdvit::synthtask::{
    datasets, evaluate_with, generate_dataset, run_model, Dataset, ExperimentConfig, Metrics, ToyHead,
};
use tdvit::tdtb::StreamMode;

use crate::config::RunConfig;

/// Whether a command's checks held; errors are reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

/// JSON-lines sink: stdout, plus a file when one is given. The first line
/// is always the effective configuration.
pub struct Report {
    lines: Vec<String>,
    path: Option<PathBuf>,
}

impl Report {
    pub fn new(command: &str, cfg: &RunConfig, path: Option<PathBuf>) -> Result<Self> {
        let mut r = Self { lines: Vec::new(), path };
        r.line(&json!({ "command": command, "config": cfg }))?;
        Ok(r)
    }

    pub fn line(&mut self, v: &impl Serialize) -> Result<()> {
        let s = serde_json::to_string(v)?;
        println!("{s}");
        self.lines.push(s);
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if let Some(p) = &self.path {
            let mut text = self.lines.join("\n");
            text.push('\n');
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }
}

fn random_video(n: usize, size: usize, channels: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| trunc_normal(&[size, size, channels], 1.0, &mut rng)).collect()
}

pub fn gradcheck(cfg: &RunConfig, out: Option<PathBuf>) -> Result<Outcome> {
    let mut report = Report::new("gradcheck", cfg, out)?;
    let corrupt = cfg
        .gradcheck
        .corrupt
        .as_deref()
        .map(|name| (name, cfg.gradcheck.corrupt_by.unwrap_or(1e-3)));
    let results = run_suite(corrupt)?;
    let mut table = format!("{:<24} {:<10} {:>12} {:>8}  status\n", "op", "kind", "rel error", "tol");
    for r in &results {
        report.line(r)?;
        let kind = format!("{:?}", r.kind).to_lowercase();
        let status = if r.passed { "ok" } else { "FAIL" };
        writeln!(table, "{:<24} {kind:<10} {:>12.3e} {:>8.0e}  {status}", r.op, r.max_rel_error, r.tolerance)?;
    }
    let passed = results.iter().all(|r| r.passed);
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    report.line(&json!({ "summary": { "cases": results.len(), "worst": worst, "passed": passed } }))?;
    eprint!("{table}");
    report.finish()?;
    Ok(Outcome::from_bool(passed))
}

fn chain(dilations: &[usize]) -> Result<Model> {
    let stages = (0..dilations.len())
        .map(|i| StageSpec {
            dim: 8 << i,
            blocks: vec![BlockKind::Temporal],
        })
        .collect();
    Ok(Model::new(ModelConfig {
        stages: Some(stages),
        dilations: dilations.to_vec(),
        head_dim: 4,
        in_channels: 1,
        init_std: 0.3,
        ..ModelConfig::default()
    })?)
}

#[derive(Serialize)]
struct TrfRow {
    name: String,
    closed_form: usize,
    measured: Option<usize>,
    agree: bool,
}

pub fn trf(cfg: &RunConfig, out: Option<PathBuf>) -> Result<Outcome> {
    let mut report = Report::new("trf", cfg, out)?;
    let mut rows = vec![TrfRow {
        name: "calculator k=(1,1,4) d=(1,1,1)".into(),
        closed_form: temporal_receptive_field(&[(1, 1), (1, 1), (4, 1)])?,
        measured: None,
        agree: true,
    }];
    let mut probes = vec![("chain d=(1,2,4)".to_string(), chain(&[1, 2, 4])?, 16)];
    let model = Model::new(cfg.model.clone())?;
    probes.push((format!("model {}", describe(&cfg.model)), model, cfg.trf.size));
    for (name, m, size) in probes {
        let closed = m.temporal_receptive_field();
        let measured = measure_trf_random(&m, closed + cfg.trf.margin, size, size, 1.0, cfg.seed)?;
        rows.push(TrfRow {
            name,
            closed_form: closed,
            measured: Some(measured),
            agree: closed == measured,
        });
    }
    let mut table = format!("{:<40} {:>11} {:>9}\n", "config", "closed form", "measured");
    for r in &rows {
        report.line(r)?;
        let m = r.measured.map_or("-".to_string(), |m| m.to_string());
        writeln!(table, "{:<40} {:>11} {m:>9}", r.name, r.closed_form)?;
    }
    eprint!("{table}");
    report.finish()?;
    Ok(Outcome::from_bool(rows.iter().all(|r| r.agree)))
}

fn describe(m: &ModelConfig) -> String {
    if m.stages.is_some() {
        format!("custom d={:?}", m.dilations)
    } else {
        format!("{}/{} d={:?}", m.variant, m.toy_scale, m.dilations)
    }
}

fn cost_table(rows: &[CostRow]) -> String {
    let mut t = format!(
        "{:>6} {:<9} {:>5} {:>7} {:>7} {:>8} {:>14} {:>14} {:>6}\n",
        "block", "kind", "D", "frames", "q", "kv", "macs", "oracle macs", "ratio"
    );
    for r in rows {
        let block = r.block.map_or("total".into(), |b| b.to_string());
        let kind = r.kind.map_or(String::new(), |k| format!("{k:?}").to_lowercase());
        let d = r.dilation.map_or("-".into(), |d| d.to_string());
        let _ = writeln!(
            t,
            "{block:>6} {kind:<9} {d:>5} {:>7} {:>7} {:>8} {:>14} {:>14} {:>6.3}",
            r.frames, r.q_count, r.kv_count, r.macs, r.oracle_macs, r.ratio
        );
    }
    t
}

pub fn bench(cfg: &RunConfig, out: Option<PathBuf>) -> Result<Outcome> {
    let mut report = Report::new("bench", cfg, out)?;
    let model = Model::new(cfg.model.clone())?;
    let t = cfg.bench.frames;
    let video = random_video(t, cfg.bench.size, cfg.model.in_channels, cfg.seed);
    let reuse = process_video(&model, &video, StreamMode::Reuse)?;
    let oracle = process_video(&model, &video, StreamMode::Recompute)?;
    let diff = reuse.max_output_diff(&oracle);
    let rows = cost_summary(&reuse);
    let mut exact = true;
    for r in &rows {
        report.line(&json!({ "cost": r }))?;
        if r.block.is_some() {
            let want_kv = match r.dilation {
                Some(d) => t.div_ceil(d),
                None => t,
            };
            exact &= r.q_count == t as u64 && r.kv_count == want_kv as u64;
        }
    }
    let equivalent = diff <= 1e-12;
    report.line(&json!({ "summary": {
        "frames": t,
        "max_abs_diff": diff,
        "equivalent": equivalent,
        "counters_exact": exact,
    } }))?;
    eprint!("{}", cost_table(&rows));
    eprintln!("reuse vs refresh max abs diff {diff:e}");
    report.finish()?;
    Ok(Outcome::from_bool(equivalent && exact))
}

/// Trained weights of one model with everything needed to rebuild it and
/// its test set.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub name: String,
    pub seed: u64,
    pub experiment: ExperimentConfig,
    pub model_config: ModelConfig,
    pub classes: usize,
    pub model: ParamSnapshot,
    pub head: ParamSnapshot,
}

impl Checkpoint {
    fn restore(&self) -> Result<(Model, ToyHead)> {
        let mut model = Model::new(self.model_config.clone())?;
        model.store.load_snapshot(&self.model)?;
        let mut head = ToyHead::for_model(&model, self.classes, 0);
        head.store.load_snapshot(&self.head)?;
        Ok((model, head))
    }

    fn file_name(&self) -> String {
        format!("seed{}-{}.json", self.seed, self.name)
    }
}

#[derive(Serialize)]
struct RunLine<'a> {
    seed: u64,
    model: &'a str,
    final_loss: Option<f64>,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

fn comparison(results: &[(u64, String, Metrics)], report: &mut Report) -> Result<String> {
    let mut seeds: Vec<u64> = results.iter().map(|r| r.0).collect();
    seeds.dedup();
    let find = |s: u64, name: &str| results.iter().find(|r| r.0 == s && r.1 == name).map(|r| &r.2);
    let mut table = format!(
        "{:>6} {:<11} {:>9} {:>9} {:>9} {:>9}\n",
        "seed", "model", "accuracy", "occluded", "visible", "centre px"
    );
    let mut deltas = Vec::new();
    for &s in &seeds {
        for (name, m) in ["tdvit", "space_only"].iter().filter_map(|n| find(s, n).map(|m| (n, m))) {
            writeln!(
                table,
                "{s:>6} {name:<11} {:>9.3} {:>9.3} {:>9.3} {:>9.2}",
                m.accuracy, m.occluded_accuracy, m.visible_accuracy, m.center_error
            )?;
        }
        if let (Some(a), Some(b)) = (find(s, "tdvit"), find(s, "space_only")) {
            deltas.push(a.occluded_accuracy - b.occluded_accuracy);
        }
    }
    if !deltas.is_empty() {
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        writeln!(table, "occluded-accuracy gap, tdvit minus space_only: {:+.1} points", 100.0 * mean)?;
        report.line(&json!({ "comparison": { "deltas": deltas, "mean_delta": mean } }))?;
    }
    Ok(table)
}

pub fn train(cfg: &RunConfig, out: Option<PathBuf>) -> Result<Outcome> {
    let dir = out.unwrap_or_else(|| PathBuf::from("tdvit-run"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut report = Report::new("train", cfg, Some(dir.join("metrics.jsonl")))?;
    let exp = cfg.experiment();
    let space = ModelConfig {
        space_only: true,
        ..exp.model.clone()
    };
    let jobs: Vec<(u64, &str, &ModelConfig)> = (cfg.seed..cfg.seed + cfg.seeds)
        .flat_map(|s| [(s, "tdvit", &exp.model), (s, "space_only", &space)])
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, name, mc)| run_model(name, mc, &exp, s).map(|r| (s, r)))
        .collect::<tdvit::Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for (seed, r) in &runs {
        let ck = Checkpoint {
            name: r.name.clone(),
            seed: *seed,
            experiment: exp.clone(),
            model_config: r.model.config().clone(),
            classes: exp.data.classes,
            model: r.model.store.to_snapshot(),
            head: r.head.store.to_snapshot(),
        };
        let path = dir.join(ck.file_name());
        fs::write(&path, serde_json::to_string(&ck)?).with_context(|| format!("writing {}", path.display()))?;
        report.line(&RunLine {
            seed: *seed,
            model: &r.name,
            final_loss: r.losses.last().copied(),
            metrics: &r.metrics,
        })?;
        results.push((*seed, r.name.clone(), r.metrics.clone()));
    }
    let table = comparison(&results, &mut report)?;
    fs::write(dir.join("table.txt"), &table)?;
    eprint!("{table}");
    report.finish()?;
    Ok(Outcome::Pass)
}

fn load_checkpoints(dir: &Path) -> Result<Vec<Checkpoint>> {
    if !dir.is_dir() {
        bail!("checkpoint directory {} does not exist", dir.display());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no checkpoints in {}", dir.display());
    }
    let mut cks = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<Checkpoint>>>()?;
    cks.sort_by(|a, b| (a.seed, a.name != "tdvit", &a.name).cmp(&(b.seed, b.name != "tdvit", &b.name)));
    Ok(cks)
}

pub fn eval(cfg: &RunConfig, dir: &Path, data: Option<&Path>, out: Option<PathBuf>) -> Result<Outcome> {
    let mut report = Report::new("eval", cfg, Some(out.unwrap_or_else(|| dir.join("eval.jsonl"))))?;
    let checkpoints = load_checkpoints(dir)?;
    let external = data.map(Dataset::load).transpose()?;
    let mode = cfg.mode.stream_mode();
    let results = checkpoints
        .par_iter()
        .map(|ck| -> Result<(u64, String, Metrics)> {
            let (model, head) = ck.restore()?;
            let videos = match &external {
                Some(d) => d.videos.clone(),
                None => datasets(&ck.experiment, ck.seed)?.1,
            };
            Ok((ck.seed, ck.name.clone(), evaluate_with(&model, &head, &videos, mode)?))
        })
        .collect::<Result<Vec<_>>>()?;
    for (seed, name, m) in &results {
        report.line(&RunLine {
            seed: *seed,
            model: name,
            final_loss: None,
            metrics: m,
        })?;
    }
    let table = comparison(&results, &mut report)?;
    eprint!("{table}");
    report.finish()?;
    Ok(Outcome::Pass)
}

pub fn generate(cfg: &RunConfig, videos: usize, out: &Path) -> Result<Outcome> {
    let d = Dataset {
        classes: cfg.data.classes,
        videos: generate_dataset(cfg.seed, videos, &cfg.data)?,
    };
    d.save(out)?;
    let mut report = Report::new("generate", cfg, None)?;
    report.line(&json!({ "dataset": { "path": out, "videos": videos, "frames": cfg.data.frames } }))?;
    std::io::stdout().flush()?;
    Ok(Outcome::Pass)
}
