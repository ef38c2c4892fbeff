//! Commands behind the `cmlreid` binary.
//!
//! Every command writes into `<out_dir>/<command>-<config hash>/` and ends
//! with a `manifest.toml` listing each emitted file and a content hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::evaluation::{forgetting_report, mechanism_analyses, AnalysisReport, SourceCategory};
use crate::lifelong::{run_sequence, RunOutcome};
use crate::world::ClothingState;

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];
pub const DEFAULT_BETAS: [f64; 5] = [0.0001, 0.0005, 0.001, 0.005, 0.01];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub world_seed: u64,
    pub content_hash: String,
    pub files: Vec<String>,
    pub duration_secs: f64,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Corrupt {
            line: 0,
            reason: e.message().to_string(),
        })
    }
}

/// SHA-256 over each file's name and bytes, in listing order.
pub fn content_hash(dir: &Path, files: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.as_bytes());
        h.update([0u8]);
        let bytes = std::fs::read(dir.join(f))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Short hash of the config with the output directory blanked out.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut c = config.clone();
    c.out_dir.clear();
    hex(&Sha256::digest(c.to_toml().as_bytes()))[..12].to_string()
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(config: &ExperimentConfig, command: &str) -> Result<Self> {
        let dir = Path::new(&config.out_dir).join(format!("{command}-{}", config_hash(config)));
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn finish(self, command: &str, config: &ExperimentConfig, started: Instant) -> Result<(PathBuf, RunManifest)> {
        let manifest = RunManifest {
            command: command.to_string(),
            world_seed: config.seed,
            content_hash: content_hash(&self.dir, &self.files)?,
            files: self.files,
            duration_secs: started.elapsed().as_secs_f64(),
            config: config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Contract(e.to_string()))?;
        std::fs::write(self.dir.join("manifest.toml"), text)?;
        Ok((self.dir, manifest))
    }
}

fn analysis_summary(report: &AnalysisReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[state_accuracy]");
    for st in ClothingState::ALL {
        let _ = writeln!(s, "{st} = {:.4}", report.state_accuracy[st.index()]);
    }
    let _ = writeln!(s, "average = {:.4}", report.state_accuracy_mean);
    let _ = writeln!(s, "\n[mean_state_weights]");
    for (k, cat) in SourceCategory::ALL.iter().enumerate() {
        let w = report.mean_weights[k];
        let _ = writeln!(s, "{} = [{:.4}, {:.4}]", cat.as_str(), w[0], w[1]);
    }
    let _ = writeln!(s, "\n[projected_distances]");
    for st in ClothingState::ALL {
        let d = report.distances[st.index()];
        let _ = writeln!(s, "{st} = {{ intra = {:.4}, inter = {:.4} }}", d.intra, d.inter);
    }
    let _ = writeln!(s, "\n[concept_similarity]");
    let _ = writeln!(s, "# mixed samples are 50/50 interpolations of SC and CC latents");
    for (k, cat) in SourceCategory::ALL.iter().enumerate() {
        let c = report.concept_similarity[k];
        let _ = writeln!(s, "{} = [{:.4}, {:.4}]", cat.as_str(), c[0], c[1]);
    }
    s
}

fn heldout_csv(outcome: &RunOutcome) -> String {
    let mut s = String::from("eval_domain,state,mAP,rank1\n");
    for c in &outcome.heldout {
        let _ = writeln!(s, "{},{},{:.4},{:.4}", c.domain, c.state, c.map, c.rank1);
    }
    s
}

fn forgetting_csv(outcome: &RunOutcome) -> String {
    let mut s = String::from("eval_domain,best_mAP,final_mAP,drop\n");
    for f in forgetting_report(&outcome.matrix) {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.4}", f.domain, f.best, f.last, f.drop);
    }
    s
}

/// Runs one sequence and writes matrix, logs, analyses, checkpoint and manifest.
pub fn cmd_run(config: &ExperimentConfig) -> Result<(PathBuf, RunManifest)> {
    config.validate()?;
    let started = Instant::now();
    let outcome = run_sequence(config)?;
    let exp = &outcome.experiment;
    let analysis = mechanism_analyses(&exp.model, &exp.world)?;
    let mut out = Output::create(config, "run")?;
    out.write("config.toml", &config.to_toml())?;
    out.write("world.toml", &exp.world.descriptor().to_toml())?;
    out.write("matrix.csv", &outcome.matrix.to_csv())?;
    out.write("heldout.csv", &heldout_csv(&outcome))?;
    out.write("forgetting.csv", &forgetting_csv(&outcome))?;
    out.write("epochs.csv", &exp.epoch_csv())?;
    out.write("analysis.csv", &analysis.to_csv())?;
    out.write("analysis.txt", &analysis_summary(&analysis))?;
    out.write("checkpoint.txt", &outcome.checkpoint.to_text())?;
    out.finish("run", config, started)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryRow {
    pub sc_map: f64,
    pub sc_rank1: f64,
    pub cc_map: f64,
    pub cc_rank1: f64,
    pub map: f64,
    pub rank1: f64,
    pub mean_drop: f64,
}

pub fn summarize(outcome: &RunOutcome) -> Result<SummaryRow> {
    let m = &outcome.matrix;
    let missing = || Error::Contract("matrix has no rows".into());
    let total = m.total_average().ok_or_else(missing)?;
    let nan = crate::evaluation::Average {
        map: f64::NAN,
        rank1: f64::NAN,
    };
    let sc = m.sc_average().unwrap_or(nan);
    let cc = m.cc_average().unwrap_or(nan);
    let drops = forgetting_report(m);
    Ok(SummaryRow {
        sc_map: sc.map,
        sc_rank1: sc.rank1,
        cc_map: cc.map,
        cc_rank1: cc.rank1,
        map: total.map,
        rank1: total.rank1,
        mean_drop: drops.iter().map(|d| d.drop).sum::<f64>() / drops.len() as f64,
    })
}

/// All six built-in orders for `full` and `sft`.
pub fn cmd_orders(config: &ExperimentConfig) -> Result<(PathBuf, RunManifest, String)> {
    config.validate()?;
    let started = Instant::now();
    let mut csv = String::from("order,variant,total_mAP,total_rank1,mean_forgetting\n");
    for order in 1..=6 {
        for variant in [Variant::Full, Variant::Sft] {
            let cfg = ExperimentConfig {
                order,
                domains: None,
                variant,
                ..config.clone()
            };
            let row = summarize(&run_sequence(&cfg)?)?;
            let _ = writeln!(csv, "{order},{variant},{:.4},{:.4},{:.4}", row.map, row.rank1, row.mean_drop);
        }
    }
    let mut out = Output::create(config, "orders")?;
    out.write("orders.csv", &csv)?;
    let (dir, manifest) = out.finish("orders", config, started)?;
    Ok((dir, manifest, csv))
}

/// `full` and the five ablations on the configured order.
pub fn cmd_ablate(config: &ExperimentConfig) -> Result<(PathBuf, RunManifest, String)> {
    config.validate()?;
    let started = Instant::now();
    let mut csv = String::from("variant,sc_mAP,sc_rank1,cc_mAP,cc_rank1,total_mAP,total_rank1\n");
    for variant in std::iter::once(Variant::Full).chain(Variant::ABLATIONS) {
        let cfg = ExperimentConfig {
            variant,
            ..config.clone()
        };
        let r = summarize(&run_sequence(&cfg)?)?;
        let _ = writeln!(
            csv,
            "{variant},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.sc_map, r.sc_rank1, r.cc_map, r.cc_rank1, r.map, r.rank1
        );
    }
    let mut out = Output::create(config, "ablate")?;
    out.write("ablation.csv", &csv)?;
    let (dir, manifest) = out.finish("ablate", config, started)?;
    Ok((dir, manifest, csv))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Beta => "beta",
        }
    }

    pub fn defaults(self) -> &'static [f64] {
        match self {
            SweepParam::Lambda => &DEFAULT_LAMBDAS,
            SweepParam::Beta => &DEFAULT_BETAS,
        }
    }
}

/// One full-variant run per value.
pub fn cmd_sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<(PathBuf, RunManifest, String)> {
    config.validate()?;
    let bad: Vec<String> = values
        .iter()
        .filter(|v| !(v.is_finite() && **v > 0.0))
        .map(|v| format!("{}: sweep values must be positive, got {v}", param.name()))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    let started = Instant::now();
    let mut csv = format!("{},total_mAP,total_rank1\n", param.name());
    for &v in values {
        let mut cfg = ExperimentConfig {
            variant: Variant::Full,
            ..config.clone()
        };
        match param {
            SweepParam::Lambda => cfg.lambda = v,
            SweepParam::Beta => cfg.beta = v,
        }
        cfg.validate()?;
        let r = summarize(&run_sequence(&cfg)?)?;
        let _ = writeln!(csv, "{v},{:.4},{:.4}", r.map, r.rank1);
    }
    let command = format!("sweep-{}", param.name());
    let mut out = Output::create(config, &command)?;
    out.write(&format!("sweep_{}.csv", param.name()), &csv)?;
    let (dir, manifest) = out.finish(&command, config, started)?;
    Ok((dir, manifest, csv))
}
