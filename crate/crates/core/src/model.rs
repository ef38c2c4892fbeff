//! The assembled network and its variant wiring.

use std::collections::HashMap;

use crate::akfp::{AkfpHeads, AkfpMode, AkfpSettings, ProjectionBundle, StateClassifier, StatePrototypes};
use crate::casp::{Casp, PromptMode};
use crate::config::{ExperimentConfig, Variant};
use crate::encoders::{TextEncoder, VisualEncoder, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::numerics::{HasParams, Linear, Matrix, Parameter};
use crate::rng::{StreamRng, Streams};

/// Which pieces of the pipeline a variant switches on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantPlan {
    pub prompt_mode: PromptMode,
    pub run_prompt_stage: bool,
    pub akfp: AkfpMode,
    pub lambda: f64,
    pub shared_prototype: bool,
}

pub fn make_variant(config: &ExperimentConfig) -> VariantPlan {
    let mut plan = VariantPlan {
        prompt_mode: PromptMode::Dynamic,
        run_prompt_stage: true,
        akfp: AkfpMode::Full,
        lambda: config.lambda,
        shared_prototype: false,
    };
    match config.variant {
        Variant::Full => {}
        Variant::Sft => {
            plan.run_prompt_stage = false;
            plan.akfp = AkfpMode::Plain;
            plan.lambda = 0.0;
        }
        Variant::NoCasp => {
            plan.prompt_mode = PromptMode::Fixed;
            plan.run_prompt_stage = false;
        }
        Variant::NoCtx => plan.prompt_mode = PromptMode::ZeroContext,
        Variant::NoAkfp => {
            plan.akfp = AkfpMode::Plain;
            plan.lambda = 0.0;
        }
        Variant::NoLproj => plan.lambda = 0.0,
        Variant::SinglePrototype => plan.shared_prototype = true,
    }
    plan
}

/// Identity classifier over `f_v` whose columns grow as new identities appear.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityHead {
    pub linear: Linear,
    columns: Vec<u32>,
    index: HashMap<u32, usize>,
}

impl IdentityHead {
    pub fn empty() -> Self {
        Self {
            linear: Linear::from_parts("id_head", Matrix::zeros(FEATURE_DIM, 0), Some(Matrix::zeros(1, 0))),
            columns: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn columns(&self) -> &[u32] {
        &self.columns
    }

    /// Adds a column for every identity not seen before; existing columns keep their values.
    pub fn expand(&mut self, identities: &[u32], rng: &mut StreamRng) -> Result<usize> {
        let mut fresh: Vec<u32> = Vec::new();
        for &id in identities {
            if !self.index.contains_key(&id) && !fresh.contains(&id) {
                fresh.push(id);
            }
        }
        if fresh.is_empty() {
            return Ok(0);
        }
        let w_new = Matrix::randn(FEATURE_DIM, fresh.len(), 0.01, rng);
        let weight = self.linear.weight.value.hconcat(&w_new)?;
        let bias = self
            .linear
            .bias
            .as_ref()
            .expect("id head has a bias")
            .value
            .hconcat(&Matrix::zeros(1, fresh.len()))?;
        self.linear = Linear::from_parts("id_head", weight, Some(bias));
        for id in &fresh {
            self.index.insert(*id, self.columns.len());
            self.columns.push(*id);
        }
        Ok(fresh.len())
    }

    /// Restores a head from a saved column map.
    pub fn from_columns(columns: Vec<u32>, weight: Matrix, bias: Matrix) -> Result<Self> {
        if weight.cols() != columns.len() || bias.cols() != columns.len() {
            return Err(Error::Contract(format!(
                "identity head has {} columns but the map lists {}",
                weight.cols(),
                columns.len()
            )));
        }
        let index = columns.iter().enumerate().map(|(i, &c)| (c, i)).collect::<HashMap<_, _>>();
        if index.len() != columns.len() {
            return Err(Error::Contract("identity head column map repeats an identity".into()));
        }
        Ok(Self {
            linear: Linear::from_parts("id_head", weight, Some(bias)),
            columns,
            index,
        })
    }

    pub fn labels(&self, identities: &[u32]) -> Result<Vec<usize>> {
        identities
            .iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Protocol(format!("identity {id} has no column in the identity head")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub plan: VariantPlan,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub casp: Casp,
    pub heads: AkfpHeads,
    pub prototypes: StatePrototypes,
    pub id_head: IdentityHead,
}

impl Model {
    /// Builds a model whose initial weights depend only on the seed, never on the variant.
    pub fn new(config: &ExperimentConfig, latent_dim: usize) -> Self {
        let plan = make_variant(config);
        let streams = Streams::new(config.seed);
        let visual = VisualEncoder::new(latent_dim, &mut streams.stream("init/visual"));
        let text = TextEncoder::new(&mut streams.stream("init/text"));
        let casp = Casp::new(plan.prompt_mode, &mut streams.stream("init/casp"));
        let mut head_rng = streams.stream("init/akfp");
        let heads = AkfpHeads {
            classifier: StateClassifier::new(&mut head_rng),
            projection: ProjectionBundle::near_identity(&mut head_rng),
        };
        Self {
            plan,
            visual,
            text,
            casp,
            heads,
            prototypes: StatePrototypes::new(config.beta, plan.shared_prototype),
            id_head: IdentityHead::empty(),
        }
    }

    pub fn akfp_settings(&self, config: &ExperimentConfig) -> AkfpSettings {
        AkfpSettings {
            mode: self.plan.akfp,
            lambda: self.plan.lambda,
            margin: config.margin,
            state_aux_weight: config.state_aux_weight,
        }
    }

    pub fn encode(&self, latents: &Matrix) -> Result<Matrix> {
        self.visual.encode(latents)
    }

    /// Every persistent parameter, trainable or not under the current variant.
    pub fn all_params(&self) -> Vec<&Parameter> {
        let mut v = self.visual.params();
        v.extend(self.casp.context.params());
        v.push(&self.casp.base);
        v.extend(self.casp.modulator.params());
        v.extend(self.heads.params());
        v.extend(self.id_head.linear.params());
        v
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.visual.params_mut();
        v.extend(self.casp.context.params_mut());
        v.push(&mut self.casp.base);
        v.extend(self.casp.modulator.params_mut());
        v.extend(self.heads.params_mut());
        v.extend(self.id_head.linear.params_mut());
        v
    }

    /// Parameters updated in the visual stage.
    pub fn visual_stage_params(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.visual.params_mut();
        v.extend(self.id_head.linear.params_mut());
        if self.plan.akfp == AkfpMode::Full {
            v.extend(self.heads.params_mut());
        }
        v
    }
}
