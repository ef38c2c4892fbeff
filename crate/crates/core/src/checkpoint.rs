//! Plain-text checkpoints.
//!
//! Layout, one record per line:
//!
//! ```text
//! cmlreid-checkpoint <version>
//! config <n>            followed by n lines of TOML
//! completed <tasks>
//! param <name> <rows> <cols>   followed by one line per row
//! prototypes <shared> <beta_sc> <beta_cc>
//! prototype <state> <initialized> <values...>
//! id_columns <n> <ids...>
//! task <index> <domain> <prompt epochs> <visual epochs>
//! prompt <cycle> <epoch> <alignment> <identity> <total> <lr>
//! visual <cycle> <epoch> <id> <triplet> <proj> <total> <state_acc> <lr>
//! row <after_task> <cells>     followed by one `cell` line per cell
//! heldout <cells>              likewise
//! cell <domain> <state> <mAP> <rank1>
//! end
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so parsing restores the
//! exact bits and re-saving reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::akfp::StatePrototypes;
use crate::config::ExperimentConfig;
use crate::encoders::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::evaluation::{Cell, SeenDomainMatrix};
use crate::lifelong::{Experiment, PromptEpochLog, TaskLog, VisualEpochLog};
use crate::model::IdentityHead;
use crate::numerics::Matrix;
use crate::world::ClothingState;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "cmlreid-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub completed: usize,
    pub params: Vec<(String, Matrix)>,
    pub prototypes: StatePrototypes,
    pub id_columns: Vec<u32>,
    pub logs: Vec<TaskLog>,
    pub matrix: SeenDomainMatrix,
    pub heldout: Vec<Cell>,
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

fn write_cell(out: &mut String, c: &Cell) {
    let _ = writeln!(out, "cell {} {} {} {}", c.domain, c.state, c.map, c.rank1);
}

impl Checkpoint {
    pub fn capture(exp: &Experiment) -> Self {
        Self {
            config: exp.config.clone(),
            completed: exp.completed,
            params: exp
                .model
                .all_params()
                .into_iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            prototypes: exp.model.prototypes.clone(),
            id_columns: exp.model.id_head.columns().to_vec(),
            logs: exp.logs.clone(),
            matrix: exp.matrix.clone(),
            heldout: exp.heldout.clone(),
        }
    }

    /// Overwrites a freshly built experiment with the saved state.
    pub fn restore_into(&self, exp: &mut Experiment) -> Result<()> {
        if self.completed > exp.sequence.len() {
            return Err(Error::Contract(format!(
                "checkpoint claims {} completed tasks but the sequence has {}",
                self.completed,
                exp.sequence.len()
            )));
        }
        let n = self.id_columns.len();
        exp.model.id_head = IdentityHead::from_columns(
            self.id_columns.clone(),
            Matrix::zeros(FEATURE_DIM, n),
            Matrix::zeros(1, n),
        )?;
        let mut params = exp.model.all_params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, (name, value)) in params.iter_mut().zip(&self.params) {
            if &p.name != name {
                return Err(Error::Contract(format!("expected parameter `{}`, found `{name}`", p.name)));
            }
            if p.value.shape() != value.shape() {
                return Err(Error::dim("restore", p.value.shape(), value.shape()));
            }
            p.reset_value(value.clone());
        }
        let mut protos = self.prototypes.clone();
        protos.shared = exp.model.prototypes.shared;
        if protos != self.prototypes {
            return Err(Error::Contract("prototype sharing disagrees with the variant".into()));
        }
        exp.model.prototypes = protos;
        exp.completed = self.completed;
        exp.logs = self.logs.clone();
        exp.matrix = self.matrix.clone();
        exp.heldout = self.heldout.clone();
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {CHECKPOINT_SCHEMA_VERSION}");
        let cfg = self.config.to_toml();
        let lines: Vec<&str> = cfg.lines().collect();
        let _ = writeln!(out, "config {}", lines.len());
        for l in lines {
            let _ = writeln!(out, "{l}");
        }
        let _ = writeln!(out, "completed {}", self.completed);
        for (name, m) in &self.params {
            let _ = writeln!(out, "param {name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let _ = writeln!(out, "{}", join(m.row(r).iter().copied()));
            }
        }
        let p = &self.prototypes;
        let _ = writeln!(out, "prototypes {} {} {}", p.shared as u8, p.beta[0], p.beta[1]);
        for s in ClothingState::ALL {
            let k = s.index();
            let _ = writeln!(
                out,
                "prototype {s} {} {}",
                p.initialized[k] as u8,
                join(p.values[k].iter().copied())
            );
        }
        let ids: Vec<String> = self.id_columns.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "id_columns {} {}", ids.len(), ids.join(" "));
        for log in &self.logs {
            let _ = writeln!(
                out,
                "task {} {} {} {}",
                log.task,
                log.domain,
                log.prompt.len(),
                log.visual.len()
            );
            for e in &log.prompt {
                let _ = writeln!(
                    out,
                    "prompt {} {} {}",
                    e.cycle,
                    e.epoch,
                    join([e.alignment, e.identity, e.total, e.lr])
                );
            }
            for e in &log.visual {
                let _ = writeln!(
                    out,
                    "visual {} {} {}",
                    e.cycle,
                    e.epoch,
                    join([e.id, e.triplet, e.proj, e.total, e.state_accuracy, e.lr])
                );
            }
        }
        for (t, row) in self.matrix.rows.iter().enumerate() {
            let _ = writeln!(out, "row {} {}", t + 1, row.len());
            for c in row {
                write_cell(&mut out, c);
            }
        }
        let _ = writeln!(out, "heldout {}", self.heldout.len());
        for c in &self.heldout {
            write_cell(&mut out, c);
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Parser::new(text).checkpoint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().collect(),
            pos: 0,
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            line: self.pos,
            reason: reason.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        let line = *self
            .lines
            .get(self.pos)
            .ok_or_else(|| Error::Corrupt {
                line: self.pos + 1,
                reason: "unexpected end of file".into(),
            })?;
        self.pos += 1;
        Ok(line)
    }

    fn peek_tag(&self) -> Option<&'a str> {
        self.lines.get(self.pos).and_then(|l| l.split(' ').next())
    }

    /// Reads a line that starts with `tag` and returns the remaining fields.
    fn record(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let mut parts = line.split(' ');
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag}` record")));
        }
        Ok(parts.collect())
    }

    fn num<T: std::str::FromStr>(&self, s: Option<&&str>, what: &str) -> Result<T> {
        s.ok_or_else(|| self.err(format!("missing {what}")))?
            .parse()
            .map_err(|_| self.err(format!("bad {what}")))
    }

    fn floats(&self, fields: &[&str], expected: usize, what: &str) -> Result<Vec<f64>> {
        if fields.len() != expected {
            return Err(self.err(format!("{what}: expected {expected} values, found {}", fields.len())));
        }
        fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.err(format!("{what}: bad number `{f}`")))
            })
            .collect()
    }

    fn state(&self, s: Option<&&str>) -> Result<ClothingState> {
        match s.copied() {
            Some("SC") => Ok(ClothingState::SC),
            Some("CC") => Ok(ClothingState::CC),
            other => Err(self.err(format!("bad clothing state {other:?}"))),
        }
    }

    fn cell(&mut self) -> Result<Cell> {
        let f = self.record("cell")?;
        if f.len() != 4 {
            return Err(self.err("cell needs 4 fields"));
        }
        let v = self.floats(&f[2..], 2, "cell")?;
        Ok(Cell {
            domain: f[0].to_string(),
            state: self.state(f.get(1))?,
            map: v[0],
            rank1: v[1],
        })
    }

    fn checkpoint(mut self) -> Result<Checkpoint> {
        let head = self.record(MAGIC)?;
        let version: u32 = self.num(head.first(), "schema version")?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }

        let n: usize = {
            let f = self.record("config")?;
            self.num(f.first(), "config line count")?
        };
        let mut toml_text = String::new();
        for _ in 0..n {
            toml_text.push_str(self.next_line()?);
            toml_text.push('\n');
        }
        let config = ExperimentConfig::from_toml(&toml_text).map_err(|e| self.err(format!("config: {e}")))?;

        let completed: usize = {
            let f = self.record("completed")?;
            self.num(f.first(), "completed")?
        };

        let mut params = Vec::new();
        while self.peek_tag() == Some("param") {
            let f = self.record("param")?;
            if f.len() != 3 {
                return Err(self.err("param header needs name, rows, cols"));
            }
            let rows: usize = self.num(f.get(1), "rows")?;
            let cols: usize = self.num(f.get(2), "cols")?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = self.next_line()?;
                let fields: Vec<&str> = if line.is_empty() { Vec::new() } else { line.split(' ').collect() };
                data.extend(self.floats(&fields, cols, f[0])?);
            }
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| self.err(e.to_string()))?;
            params.push((f[0].to_string(), m));
        }

        let f = self.record("prototypes")?;
        let shared: u8 = self.num(f.first(), "prototype sharing flag")?;
        let betas = self.floats(f.get(1..).unwrap_or(&[]), 2, "prototype betas")?;
        let mut prototypes = StatePrototypes::new(betas[0], shared == 1);
        prototypes.beta = [betas[0], betas[1]];
        for s in ClothingState::ALL {
            let f = self.record("prototype")?;
            if self.state(f.first())? != s {
                return Err(self.err(format!("expected prototype for {s}")));
            }
            let init: u8 = self.num(f.get(1), "prototype flag")?;
            prototypes.initialized[s.index()] = init == 1;
            prototypes.values[s.index()] = self.floats(f.get(2..).unwrap_or(&[]), FEATURE_DIM, "prototype")?;
        }

        let f = self.record("id_columns")?;
        let n: usize = self.num(f.first(), "column count")?;
        let ids: Vec<u32> = f
            .iter()
            .skip(1)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| self.err("bad identity id")))
            .collect::<Result<_>>()?;
        if ids.len() != n {
            return Err(self.err(format!("expected {n} identity columns, found {}", ids.len())));
        }

        let mut logs = Vec::new();
        while self.peek_tag() == Some("task") {
            let f = self.record("task")?;
            let task: usize = self.num(f.first(), "task index")?;
            let domain = f.get(1).ok_or_else(|| self.err("missing domain"))?.to_string();
            let np: usize = self.num(f.get(2), "prompt epochs")?;
            let nv: usize = self.num(f.get(3), "visual epochs")?;
            let mut log = TaskLog {
                task,
                domain,
                ..Default::default()
            };
            for _ in 0..np {
                let f = self.record("prompt")?;
                let v = self.floats(f.get(2..).unwrap_or(&[]), 4, "prompt log")?;
                log.prompt.push(PromptEpochLog {
                    cycle: self.num(f.first(), "cycle")?,
                    epoch: self.num(f.get(1), "epoch")?,
                    alignment: v[0],
                    identity: v[1],
                    total: v[2],
                    lr: v[3],
                });
            }
            for _ in 0..nv {
                let f = self.record("visual")?;
                let v = self.floats(f.get(2..).unwrap_or(&[]), 6, "visual log")?;
                log.visual.push(VisualEpochLog {
                    cycle: self.num(f.first(), "cycle")?,
                    epoch: self.num(f.get(1), "epoch")?,
                    id: v[0],
                    triplet: v[1],
                    proj: v[2],
                    total: v[3],
                    state_accuracy: v[4],
                    lr: v[5],
                });
            }
            logs.push(log);
        }

        let mut matrix = SeenDomainMatrix::default();
        while self.peek_tag() == Some("row") {
            let f = self.record("row")?;
            let n: usize = self.num(f.get(1), "cell count")?;
            let row = (0..n).map(|_| self.cell()).collect::<Result<Vec<_>>>()?;
            matrix.push_row(row).map_err(|e| self.err(e.to_string()))?;
        }

        let f = self.record("heldout")?;
        let n: usize = self.num(f.first(), "held-out count")?;
        let heldout = (0..n).map(|_| self.cell()).collect::<Result<Vec<_>>>()?;

        self.record("end")?;
        if self.pos != self.lines.len() {
            return Err(self.err("trailing data after `end`"));
        }
        Ok(Checkpoint {
            config,
            completed,
            params,
            prototypes,
            id_columns: ids,
            logs,
            matrix,
            heldout,
        })
    }
}
