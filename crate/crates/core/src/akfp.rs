//! Adaptive knowledge fusion and projection.
//!
//! Two slowly-updated text prototypes (one per clothing state) act as fixed
//! alignment targets. A state classifier weights two linear projection heads,
//! and the projected visual feature is pulled toward the prototype of its
//! ground-truth state by a cosine loss.

use crate::encoders::{VisualEncoder, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::numerics::{
    batch_hard_triplet, cosine_grad_wrt_first, cosine_similarity, cross_entropy, dot, linear, norm, softmax,
    softmax_backward, HasParams, Linear, Matrix, Parameter, NORM_EPS,
};
use crate::rng::StreamRng;
use crate::world::ClothingState;

/// Per-state text prototypes updated by exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePrototypes {
    pub values: [Vec<f64>; 2],
    pub initialized: [bool; 2],
    pub beta: [f64; 2],
    /// One prototype shared by both states.
    pub shared: bool,
}

impl StatePrototypes {
    pub fn new(beta: f64, shared: bool) -> Self {
        Self {
            values: [vec![0.0; FEATURE_DIM], vec![0.0; FEATURE_DIM]],
            initialized: [false; 2],
            beta: [beta; 2],
            shared,
        }
    }

    pub fn with_values(sc: Vec<f64>, cc: Vec<f64>, beta: f64) -> Self {
        Self {
            values: [sc, cc],
            initialized: [true; 2],
            beta: [beta; 2],
            shared: false,
        }
    }

    fn slot(&self, state: ClothingState) -> usize {
        if self.shared {
            0
        } else {
            state.index()
        }
    }

    pub fn get(&self, state: ClothingState) -> Option<&[f64]> {
        let s = self.slot(state);
        self.initialized[s].then_some(self.values[s].as_slice())
    }

    pub fn reset(&mut self) {
        self.initialized = [false; 2];
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `T_s ← (1 − β_s)·T_s + β_s·mean(e_T | s)` for each state present in the batch.
    ///
    /// A prototype that has never been observed is seeded with its first batch mean.
    pub fn update(&mut self, embeddings: &Matrix, states: &[ClothingState]) -> Result<()> {
        if embeddings.rows() != states.len() {
            return Err(Error::dim("update_prototypes", embeddings.shape(), (states.len(), 1)));
        }
        let slots: &[usize] = if self.shared { &[0] } else { &[0, 1] };
        for &slot in slots {
            let rows: Vec<usize> = (0..states.len())
                .filter(|&i| self.shared || states[i].index() == slot)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let mean = embeddings.select_rows(&rows).mean_rows();
            if !mean.is_finite() {
                return Err(Error::Numeric("prototype batch mean"));
            }
            let beta = self.beta[slot];
            let t = &mut self.values[slot];
            if self.initialized[slot] {
                for (ti, mi) in t.iter_mut().zip(mean.data()) {
                    *ti = (1.0 - beta) * *ti + beta * mi;
                }
            } else {
                t.copy_from_slice(mean.data());
                self.initialized[slot] = true;
            }
        }
        Ok(())
    }
}

/// `ŝ = softmax(f_v·W_s + b_s)` over (SC, CC).
#[derive(Clone, Debug, PartialEq)]
pub struct StateClassifier {
    pub linear: Linear,
}

impl StateClassifier {
    pub fn new(rng: &mut StreamRng) -> Self {
        let mut linear = Linear::xavier("state.cls", FEATURE_DIM, 2, true, rng);
        linear.weight.value.scale(0.1);
        Self { linear }
    }

    pub fn classify(&self, fv: &Matrix) -> Result<Matrix> {
        softmax(&self.linear.forward(fv)?)
    }
}

/// Two linear heads without bias: `W_proj^SC`, `W_proj^CC` (`D × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBundle {
    pub sc: Parameter,
    pub cc: Parameter,
}

impl ProjectionBundle {
    /// Identity plus `N(0, 0.01²)` noise.
    pub fn near_identity(rng: &mut StreamRng) -> Self {
        let mut sc = Matrix::randn(FEATURE_DIM, FEATURE_DIM, 0.01, rng);
        let mut cc = Matrix::randn(FEATURE_DIM, FEATURE_DIM, 0.01, rng);
        sc.add_assign(&Matrix::identity(FEATURE_DIM)).expect("square");
        cc.add_assign(&Matrix::identity(FEATURE_DIM)).expect("square");
        Self::from_matrices(sc, cc)
    }

    pub fn from_matrices(sc: Matrix, cc: Matrix) -> Self {
        Self {
            sc: Parameter::new("proj.sc", sc, true),
            cc: Parameter::new("proj.cc", cc, true),
        }
    }
}

fn check_distribution(s_hat: &Matrix) -> Result<()> {
    if s_hat.cols() != 2 {
        return Err(Error::dim("project", s_hat.shape(), (s_hat.rows(), 2)));
    }
    for r in 0..s_hat.rows() {
        let row = s_hat.row(r);
        if (row[0] + row[1] - 1.0).abs() > 1e-6 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!(
                "state weights of row {r} do not form a distribution: {row:?}"
            )));
        }
    }
    Ok(())
}

/// `f_proj = ŝ_SC·(f_v·W_SC) + ŝ_CC·(f_v·W_CC)`.
pub fn project(fv: &Matrix, s_hat: &Matrix, bundle: &ProjectionBundle) -> Result<Matrix> {
    check_distribution(s_hat)?;
    if s_hat.rows() != fv.rows() {
        return Err(Error::dim("project", fv.shape(), s_hat.shape()));
    }
    let a = linear(fv, &bundle.sc, None)?;
    let b = linear(fv, &bundle.cc, None)?;
    Ok(mix(&a, &b, s_hat))
}

fn mix(a: &Matrix, b: &Matrix, s_hat: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let (ws, wc) = (s_hat.get(i, 0), s_hat.get(i, 1));
        // interpolate from the dominant head so pure states and equal heads are exact
        for ((o, &x), &y) in out.row_mut(i).iter_mut().zip(a.row(i)).zip(b.row(i)) {
            *o = if ws >= wc { x + wc * (y - x) } else { y + ws * (x - y) };
        }
    }
    out
}

/// `L_proj = mean(1 − cos(f_proj, T_s))`, prototypes held constant.
/// Returns the loss and `∂L/∂f_proj`.
pub fn projection_loss(fproj: &Matrix, states: &[ClothingState], protos: &StatePrototypes) -> Result<(f64, Matrix)> {
    if fproj.rows() != states.len() {
        return Err(Error::dim("projection_loss", fproj.shape(), (states.len(), 1)));
    }
    if states.is_empty() {
        return Err(Error::Protocol("projection loss over an empty batch".into()));
    }
    let b = states.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(fproj.rows(), fproj.cols());
    for (i, &s) in states.iter().enumerate() {
        let target = protos
            .get(s)
            .ok_or_else(|| Error::Protocol(format!("prototype for {s} has not been observed yet")))?;
        let f = fproj.row(i);
        if norm(f) <= NORM_EPS || norm(target) <= NORM_EPS {
            return Err(Error::DegenerateVector {
                context: format!("projection loss, sample {i} ({s})"),
            });
        }
        loss += 1.0 - cosine_similarity(f, target)?;
        for (g, d) in grad.row_mut(i).iter_mut().zip(cosine_grad_wrt_first(f, target)) {
            *g = -d / b;
        }
    }
    Ok((loss / b, grad))
}

/// Which objective the visual stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AkfpMode {
    /// `L_id + L_triplet + λ·L_proj` plus auxiliary state supervision.
    Full,
    /// `L_id + L_triplet` on `f_v` only.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AkfpSettings {
    pub mode: AkfpMode,
    pub lambda: f64,
    pub margin: f64,
    /// Weight of the cross-entropy between `ŝ` and the ground-truth state (0 disables).
    pub state_aux_weight: f64,
}

impl Default for AkfpSettings {
    fn default() -> Self {
        Self {
            mode: AkfpMode::Full,
            lambda: 0.5,
            margin: 0.3,
            state_aux_weight: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AkfpLossReport {
    pub id: f64,
    pub triplet: f64,
    pub proj: f64,
    /// `L_id + L_triplet + λ·L_proj`
    pub total: f64,
    pub state_aux: f64,
    /// What the optimizer sees: `total + w_aux·state_aux`.
    pub objective: f64,
    pub state_accuracy: f64,
}

/// Trainable side of the visual stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AkfpHeads {
    pub classifier: StateClassifier,
    pub projection: ProjectionBundle,
}

impl HasParams for AkfpHeads {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.classifier.linear.params();
        v.push(&self.projection.sc);
        v.push(&self.projection.cc);
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.classifier.linear.params_mut();
        v.push(&mut self.projection.sc);
        v.push(&mut self.projection.cc);
        v
    }
}

/// Forward and backward of the visual-stage objective on one batch.
///
/// Gradients are accumulated into the adapter, the identity head and (in
/// [`AkfpMode::Full`]) the classifier and both projection heads. Prototypes
/// must already hold this batch's update.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    visual: &mut VisualEncoder,
    id_head: &mut Linear,
    heads: &mut AkfpHeads,
    protos: &StatePrototypes,
    latents: &Matrix,
    labels: &[usize],
    identities: &[u32],
    states: &[ClothingState],
    settings: &AkfpSettings,
) -> Result<AkfpLossReport> {
    let (fv, vcache) = visual.forward(latents)?;

    let logits = id_head.forward(&fv)?;
    let (l_id, dlogits) = cross_entropy(&logits, labels)?;
    let mut dfv = id_head.backward(&fv, &dlogits)?;

    let (l_tri, dtri) = batch_hard_triplet(&fv, identities, settings.margin)?;
    dfv.add_assign(&dtri)?;

    let mut report = AkfpLossReport {
        id: l_id,
        triplet: l_tri,
        ..Default::default()
    };

    if settings.mode == AkfpMode::Full {
        let cls = &mut heads.classifier.linear;
        let s_logits = cls.forward(&fv)?;
        let s_hat = softmax(&s_logits)?;
        let a = fv.matmul(&heads.projection.sc.value)?;
        let b = fv.matmul(&heads.projection.cc.value)?;
        let fproj = mix(&a, &b, &s_hat);
        let (l_proj, dfproj) = projection_loss(&fproj, states, protos)?;
        report.proj = l_proj;

        let n = fv.rows();
        let mut da = Matrix::zeros(n, FEATURE_DIM);
        let mut db = Matrix::zeros(n, FEATURE_DIM);
        let mut ds_hat = Matrix::zeros(n, 2);
        for i in 0..n {
            let g = dfproj.row(i);
            let (ws, wc) = (s_hat.get(i, 0), s_hat.get(i, 1));
            for (k, &gk) in g.iter().enumerate() {
                da.set(i, k, settings.lambda * ws * gk);
                db.set(i, k, settings.lambda * wc * gk);
            }
            ds_hat.set(i, 0, settings.lambda * dot(g, a.row(i)));
            ds_hat.set(i, 1, settings.lambda * dot(g, b.row(i)));
        }
        heads.projection.sc.accumulate(&fv.t_matmul(&da)?)?;
        heads.projection.cc.accumulate(&fv.t_matmul(&db)?)?;
        dfv.add_assign(&da.matmul_t(&heads.projection.sc.value)?)?;
        dfv.add_assign(&db.matmul_t(&heads.projection.cc.value)?)?;

        let mut ds_logits = softmax_backward(&s_hat, &ds_hat);
        let state_labels: Vec<usize> = states.iter().map(|s| s.index()).collect();
        let (l_state, dstate) = cross_entropy(&s_logits, &state_labels)?;
        if settings.state_aux_weight > 0.0 {
            ds_logits.add_scaled(&dstate, settings.state_aux_weight)?;
        }
        dfv.add_assign(&cls.backward(&fv, &ds_logits)?)?;

        report.state_aux = l_state;
        let correct = (0..n)
            .filter(|&i| {
                let pred = if s_hat.get(i, 0) >= s_hat.get(i, 1) { 0 } else { 1 };
                pred == state_labels[i]
            })
            .count();
        report.state_accuracy = correct as f64 / n as f64;
    }

    report.total = report.id + report.triplet + settings.lambda * report.proj;
    report.objective = report.total
        + if settings.mode == AkfpMode::Full {
            settings.state_aux_weight * report.state_aux
        } else {
            0.0
        };
    visual.backward(&vcache, &dfv)?;
    Ok(report)
}
