//! Sequential training over a stream of domains.
//!
//! Each task runs the prompt stage (CASP) and then the visual stage (AKFP),
//! for `cycles` alternations, and is followed by evaluation on every domain
//! seen so far.

use std::fmt::Write as _;

use crate::akfp::{total_loss, AkfpMode};
use crate::casp::{casp_stage_loss, text_identity_head};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_domain, Cell, SeenDomainMatrix};
use crate::model::Model;
use crate::numerics::{Adam, HasParams, Matrix, Schedule};
use crate::rng::Streams;
use crate::world::{sample_pk_batch, Domain, World};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptEpochLog {
    pub cycle: usize,
    pub epoch: usize,
    pub alignment: f64,
    pub identity: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisualEpochLog {
    pub cycle: usize,
    pub epoch: usize,
    pub id: f64,
    pub triplet: f64,
    pub proj: f64,
    pub total: f64,
    pub state_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskLog {
    pub task: usize,
    pub domain: String,
    pub prompt: Vec<PromptEpochLog>,
    pub visual: Vec<VisualEpochLog>,
}

fn batches_per_epoch(domain: &Domain, config: &ExperimentConfig) -> usize {
    (domain.train.len() / (config.p * config.k)).max(1)
}

/// Non-finite values met inside a training step count as divergence.
fn diverged(e: Error, stage: &'static str, task: usize, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(_) => Error::Divergence {
            stage,
            task,
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn check_finite(value: f64, stage: &'static str, task: usize, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage,
            task,
            epoch,
            step,
            loss: value,
        })
    }
}

/// Trains prompt tokens, context encoder and modulator with the visual side frozen.
pub fn casp_train_stage(
    model: &mut Model,
    domain: &Domain,
    config: &ExperimentConfig,
    task: usize,
    cycle: usize,
) -> Result<Vec<PromptEpochLog>> {
    let epochs = config.prompt_epochs();
    let mut logs = Vec::with_capacity(epochs);
    if epochs == 0 || !model.plan.run_prompt_stage {
        return Ok(logs);
    }
    let streams = Streams::new(config.seed);
    let schedule = Schedule::cosine(config.lr_prompt, config.lr_prompt * config.lr_floor, epochs)?;
    let mut head = text_identity_head(domain.train_identities.len());
    let mut adam = Adam::new(config.weight_decay);
    let steps = batches_per_epoch(domain, config);
    for epoch in 0..epochs {
        let lr = schedule.rate(epoch)?;
        let mut rng = streams.stream(&format!("train/{}/cycle{cycle}/prompt/epoch{epoch}", domain.name));
        let mut sums = [0.0; 3];
        for step in 0..steps {
            let batch = sample_pk_batch(domain, config.p, config.k, &mut rng)?;
            let labels: Vec<usize> = batch
                .identities
                .iter()
                .map(|id| domain.train_identities.iter().position(|x| x == id).expect("train identity"))
                .collect();
            let fv = model.visual.encode(&batch.latents)?;
            let report = casp_stage_loss(&mut model.casp, &mut head, &model.text, &fv, &batch.identities, &labels)
                .map_err(|e| diverged(e, "prompt", task, epoch, step))?;
            check_finite(report.total, "prompt", task, epoch, step)?;
            let mut params = model.casp.params_mut();
            params.extend(head.params_mut());
            adam.step(&mut params, lr).map_err(|e| diverged(e, "prompt", task, epoch, step))?;
            sums[0] += report.alignment;
            sums[1] += report.identity;
            sums[2] += report.total;
        }
        let n = steps as f64;
        logs.push(PromptEpochLog {
            cycle,
            epoch,
            alignment: sums[0] / n,
            identity: sums[1] / n,
            total: sums[2] / n,
            lr,
        });
    }
    Ok(logs)
}

/// Trains the adapter, identity head and AKFP heads; prompts stay frozen.
pub fn akfp_train_stage(
    model: &mut Model,
    domain: &Domain,
    config: &ExperimentConfig,
    task: usize,
    cycle: usize,
) -> Result<Vec<VisualEpochLog>> {
    let epochs = config.visual_epochs();
    let mut logs = Vec::with_capacity(epochs);
    if epochs == 0 {
        return Ok(logs);
    }
    let streams = Streams::new(config.seed);
    let schedule = Schedule::warmup_cosine(
        config.lr_visual,
        config.lr_visual * config.lr_floor,
        epochs,
        config.warmup_epochs,
    )?;
    let settings = model.akfp_settings(config);
    let mut adam = Adam::new(config.weight_decay);
    let steps = batches_per_epoch(domain, config);
    for epoch in 0..epochs {
        let lr = schedule.rate(epoch)?;
        let mut rng = streams.stream(&format!("train/{}/cycle{cycle}/visual/epoch{epoch}", domain.name));
        let mut sums = [0.0; 5];
        for step in 0..steps {
            let batch = sample_pk_batch(domain, config.p, config.k, &mut rng)?;
            let labels = model.id_head.labels(&batch.identities)?;
            if settings.mode == AkfpMode::Full {
                let fv = model.visual.encode(&batch.latents)?;
                model
                    .casp
                    .embed(&model.text, &fv)
                    .and_then(|(e_t, _)| model.prototypes.update(&e_t, &batch.states))
                    .map_err(|e| diverged(e, "visual", task, epoch, step))?;
            }
            let report = total_loss(
                &mut model.visual,
                &mut model.id_head.linear,
                &mut model.heads,
                &model.prototypes,
                &batch.latents,
                &labels,
                &batch.identities,
                &batch.states,
                &settings,
            )
            .map_err(|e| diverged(e, "visual", task, epoch, step))?;
            check_finite(report.objective, "visual", task, epoch, step)?;
            adam.step(&mut model.visual_stage_params(), lr)
                .map_err(|e| diverged(e, "visual", task, epoch, step))?;
            sums[0] += report.id;
            sums[1] += report.triplet;
            sums[2] += report.proj;
            sums[3] += report.total;
            sums[4] += report.state_accuracy;
        }
        let n = steps as f64;
        logs.push(VisualEpochLog {
            cycle,
            epoch,
            id: sums[0] / n,
            triplet: sums[1] / n,
            proj: sums[2] / n,
            total: sums[3] / n,
            state_accuracy: sums[4] / n,
            lr,
        });
    }
    Ok(logs)
}

/// One task: expand the identity head, then alternate the two stages.
pub fn run_task(model: &mut Model, domain: &Domain, config: &ExperimentConfig, task: usize) -> Result<TaskLog> {
    let streams = Streams::new(config.seed);
    model
        .id_head
        .expand(&domain.train_identities, &mut streams.stream(&format!("init/id_head/{}", domain.name)))?;
    if !config.share_prompts && task > 0 {
        let mut rng = streams.stream(&format!("init/prompt/{}", domain.name));
        let fresh = Matrix::randn(model.casp.base.value.rows(), model.casp.base.value.cols(), 1.0, &mut rng);
        model.casp.base.reset_value(fresh);
    }
    if config.reset_prototypes {
        model.prototypes.reset();
    }
    let mut log = TaskLog {
        task,
        domain: domain.name.clone(),
        ..Default::default()
    };
    for cycle in 0..config.cycles {
        log.prompt.extend(casp_train_stage(model, domain, config, task, cycle)?);
        log.visual.extend(akfp_train_stage(model, domain, config, task, cycle)?);
    }
    Ok(log)
}

/// A run in progress; also the unit that checkpoints save and restore.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub world: World,
    pub sequence: Vec<String>,
    pub model: Model,
    pub completed: usize,
    pub logs: Vec<TaskLog>,
    pub matrix: SeenDomainMatrix,
    pub heldout: Vec<Cell>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let world = World::build(config.seed);
        let sequence = config.sequence()?;
        let model = Model::new(&config, world.config.latent_dim());
        Ok(Self {
            config,
            world,
            sequence,
            model,
            completed: 0,
            logs: Vec::new(),
            matrix: SeenDomainMatrix::default(),
            heldout: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.completed == self.sequence.len()
    }

    fn domain(&self, name: &str) -> Result<&Domain> {
        self.world
            .domain(name)
            .ok_or_else(|| Error::Config(vec![format!("domains: unknown domain `{name}`")]))
    }

    /// Trains the next task and evaluates all seen domains. Returns false when nothing is left.
    pub fn step_task(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let t = self.completed;
        let domain = self.domain(&self.sequence[t])?.clone();
        let log = run_task(&mut self.model, &domain, &self.config, t)?;
        self.logs.push(log);
        let mut row = Vec::with_capacity(t + 1);
        for name in &self.sequence[..=t] {
            let d = self.domain(name)?;
            let s = evaluate_domain(&self.model, d)?;
            row.push(Cell {
                domain: d.name.clone(),
                state: d.state_kind,
                map: s.map,
                rank1: s.rank1,
            });
        }
        self.matrix.push_row(row)?;
        self.completed += 1;
        if self.is_finished() && self.config.eval_heldout {
            self.heldout = self
                .world
                .heldout_domains()
                .map(|d| {
                    evaluate_domain(&self.model, d).map(|s| Cell {
                        domain: d.name.clone(),
                        state: d.state_kind,
                        map: s.map,
                        rank1: s.rank1,
                    })
                })
                .collect::<Result<_>>()?;
        }
        Ok(true)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step_task()? {}
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut exp = Experiment::new(ck.config.clone())?;
        ck.restore_into(&mut exp)?;
        Ok(exp)
    }

    /// Per-epoch log in long form, one line per stage epoch.
    pub fn epoch_csv(&self) -> String {
        epoch_csv(&self.logs)
    }
}

pub fn epoch_csv(logs: &[TaskLog]) -> String {
    let mut s = String::from("task,domain,stage,cycle,epoch,L_id,L_triplet,L_proj,L_total,state_acc,L_align,L_text_id,lr\n");
    for log in logs {
        for e in &log.prompt {
            let _ = writeln!(
                s,
                "{},{},prompt,{},{},,,,{:.4},,{:.4},{:.4},{:.6}",
                log.task + 1,
                log.domain,
                e.cycle,
                e.epoch,
                e.total,
                e.alignment,
                e.identity,
                e.lr
            );
        }
        for e in &log.visual {
            let _ = writeln!(
                s,
                "{},{},visual,{},{},{:.4},{:.4},{:.4},{:.4},{:.4},,,{:.6}",
                log.task + 1,
                log.domain,
                e.cycle,
                e.epoch,
                e.id,
                e.triplet,
                e.proj,
                e.total,
                e.state_accuracy,
                e.lr
            );
        }
    }
    s
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub matrix: SeenDomainMatrix,
    pub heldout: Vec<Cell>,
    pub checkpoint: Checkpoint,
    pub experiment: Experiment,
}

pub fn run_sequence(config: &ExperimentConfig) -> Result<RunOutcome> {
    let mut exp = Experiment::new(config.clone())?;
    exp.run_to_end()?;
    Ok(RunOutcome {
        matrix: exp.matrix.clone(),
        heldout: exp.heldout.clone(),
        checkpoint: exp.checkpoint(),
        experiment: exp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_errors_become_divergence() {
        match diverged(Error::Numeric("adam"), "visual", 1, 2, 3) {
            Error::Divergence { stage, task, epoch, step, loss } => {
                assert_eq!((stage, task, epoch, step), ("visual", 1, 2, 3));
                assert!(loss.is_nan());
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(diverged(Error::EmptyPrompt, "prompt", 0, 0, 0), Error::EmptyPrompt));
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        assert!(check_finite(1.5, "prompt", 0, 0, 0).is_ok());
        assert!(matches!(
            check_finite(f64::INFINITY, "prompt", 0, 4, 2),
            Err(Error::Divergence { epoch: 4, step: 2, .. })
        ));
    }

    #[test]
    fn default_batches_cover_the_training_pool() {
        let world = World::build(0);
        let cfg = ExperimentConfig::default();
        for d in world.seen_domains() {
            assert_eq!(batches_per_epoch(d, &cfg), d.train.len() / 64);
            assert!(batches_per_epoch(d, &cfg) >= 1);
        }
    }

    #[test]
    fn epoch_csv_has_one_line_per_stage_epoch() {
        let logs = vec![TaskLog {
            task: 0,
            domain: "SC1".into(),
            prompt: vec![PromptEpochLog::default(); 3],
            visual: vec![VisualEpochLog::default(); 2],
        }];
        let csv = epoch_csv(&logs);
        assert_eq!(csv.lines().count(), 1 + 5);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').nth(2), Some("prompt"));
        assert_eq!(csv.lines().nth(4).unwrap().split(',').nth(2), Some("visual"));
    }
}
