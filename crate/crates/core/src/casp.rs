//! Context-aware semantic prompts.
//!
//! `f_v` is split into pseudo-tokens, attention-pooled and mapped to a context
//! vector `c`. A FiLM-style modulator turns `(P_base, c)` into per-sample
//! modulation tokens `P_mod`; the union of both token sets goes through the
//! frozen text tower to give `e_T`.

use rand_distr::{Distribution, StandardNormal};

use crate::encoders::{TextCache, TextEncoder, FEATURE_DIM, TOKEN_DIM};
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy, dot, softmax, symmetric_contrastive, tanh, tanh_backward, HasParams, Linear, Matrix, Mlp,
    MlpCache, Parameter,
};
use crate::rng::StreamRng;

pub const PSEUDO_TOKENS: usize = 8;
pub const PSEUDO_WIDTH: usize = FEATURE_DIM / PSEUDO_TOKENS;
pub const CONTEXT_DIM: usize = 16;
pub const CONTEXT_HIDDEN: usize = 32;
pub const BASE_TOKENS: usize = 8;
pub const MOD_TOKENS: usize = 4;
pub const MODULATOR_HIDDEN: usize = 32;
pub const TEMPERATURE: f64 = 0.07;

const PROMPT_LEN: f64 = (BASE_TOKENS + MOD_TOKENS) as f64;

/// Self-attentive pooling over pseudo-tokens followed by a small MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEncoder {
    pub score: Parameter,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ContextCache {
    fv: Matrix,
    attention: Matrix,
    mlp: MlpCache,
}

impl ContextEncoder {
    pub fn new(rng: &mut StreamRng) -> Self {
        Self {
            score: Parameter::new("ctx.score", Matrix::randn(1, PSEUDO_WIDTH, 0.1, rng), false),
            mlp: Mlp::xavier("ctx.mlp", PSEUDO_WIDTH, CONTEXT_HIDDEN, CONTEXT_DIM, rng),
        }
    }

    fn check(fv: &Matrix) -> Result<()> {
        if fv.cols() != FEATURE_DIM {
            return Err(Error::dim("encode_context", fv.shape(), (fv.rows(), FEATURE_DIM)));
        }
        Ok(())
    }

    /// Attention weights over the pseudo-tokens of each row (`b × PSEUDO_TOKENS`).
    pub fn attention(&self, fv: &Matrix) -> Result<Matrix> {
        Self::check(fv)?;
        let q = self.score.value.row(0);
        let mut scores = Matrix::zeros(fv.rows(), PSEUDO_TOKENS);
        for i in 0..fv.rows() {
            for (t, chunk) in fv.row(i).chunks(PSEUDO_WIDTH).enumerate() {
                scores.set(i, t, dot(q, chunk));
            }
        }
        softmax(&scores)
    }

    fn pool(fv: &Matrix, attention: &Matrix) -> Matrix {
        let mut pooled = Matrix::zeros(fv.rows(), PSEUDO_WIDTH);
        for i in 0..fv.rows() {
            for (t, chunk) in fv.row(i).chunks(PSEUDO_WIDTH).enumerate() {
                let a = attention.get(i, t);
                for (p, z) in pooled.row_mut(i).iter_mut().zip(chunk) {
                    *p += a * z;
                }
            }
        }
        pooled
    }

    pub fn forward(&self, fv: &Matrix) -> Result<(Matrix, ContextCache)> {
        let attention = self.attention(fv)?;
        let pooled = Self::pool(fv, &attention);
        let (c, mlp) = self.mlp.forward(&pooled)?;
        Ok((
            c,
            ContextCache {
                fv: fv.clone(),
                attention,
                mlp,
            },
        ))
    }

    pub fn encode(&self, fv: &Matrix) -> Result<Matrix> {
        Ok(self.forward(fv)?.0)
    }

    /// Accumulates encoder gradients and returns `∂/∂f_v`.
    pub fn backward(&mut self, cache: &ContextCache, dc: &Matrix) -> Result<Matrix> {
        let dpooled = self.mlp.backward(&cache.mlp, dc)?;
        let q = self.score.value.row(0).to_vec();
        let mut dq = vec![0.0; PSEUDO_WIDTH];
        let mut dfv = Matrix::zeros(cache.fv.rows(), FEATURE_DIM);
        for i in 0..cache.fv.rows() {
            let row = cache.fv.row(i);
            let dp = dpooled.row(i);
            let alpha = cache.attention.row(i);
            let dalpha: Vec<f64> = row.chunks(PSEUDO_WIDTH).map(|z| dot(dp, z)).collect();
            let inner = dot(alpha, &dalpha);
            let out = dfv.row_mut(i);
            for (t, z) in row.chunks(PSEUDO_WIDTH).enumerate() {
                let dscore = alpha[t] * (dalpha[t] - inner);
                for k in 0..PSEUDO_WIDTH {
                    dq[k] += dscore * z[k];
                    out[t * PSEUDO_WIDTH + k] = alpha[t] * dp[k] + dscore * q[k];
                }
            }
        }
        self.score.accumulate(&Matrix::row_vector(&dq))?;
        Ok(dfv)
    }
}

impl HasParams for ContextEncoder {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.score];
        v.extend(self.mlp.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.score];
        v.extend(self.mlp.params_mut());
        v
    }
}

/// `M_dyn`: maps `(P_base, c)` to modulation tokens
/// `γ_j(c) ⊙ mean(P_base) + δ_j(c) + seed_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulator {
    pub hidden: Linear,
    pub gamma: Linear,
    pub delta: Linear,
    pub seeds: Parameter,
}

impl Modulator {
    pub fn new(rng: &mut StreamRng) -> Self {
        let width = MOD_TOKENS * TOKEN_DIM;
        let mut gamma = Linear::xavier("mdyn.gamma", MODULATOR_HIDDEN, width, false, rng);
        gamma.weight.value.scale(0.5);
        Self {
            hidden: Linear::xavier("mdyn.hidden", CONTEXT_DIM, MODULATOR_HIDDEN, true, rng),
            gamma,
            delta: Linear::xavier("mdyn.delta", MODULATOR_HIDDEN, width, false, rng),
            seeds: Parameter::new("mdyn.seeds", Matrix::randn(MOD_TOKENS, TOKEN_DIM, 0.5, rng), false),
        }
    }

    /// Sets `γ ≡ 1`, `δ ≡ 0` and zero seeds.
    pub fn make_identity(&mut self) {
        self.gamma.weight.value.fill(0.0);
        self.delta.weight.value.fill(0.0);
        self.seeds.value.fill(0.0);
    }
}

impl HasParams for Modulator {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.hidden.params();
        v.extend(self.gamma.params());
        v.extend(self.delta.params());
        v.push(&self.seeds);
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.hidden.params_mut();
        v.extend(self.gamma.params_mut());
        v.extend(self.delta.params_mut());
        v.push(&mut self.seeds);
        v
    }
}

/// How modulation tokens are produced; the two non-dynamic modes are ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// `P_mod = M_dyn(P_base, E_ctx(f_v))`
    Dynamic,
    /// Context replaced by a constant zero vector.
    ZeroContext,
    /// `P_mod` replaced by frozen random tokens; nothing is learned.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Casp {
    pub context: ContextEncoder,
    pub base: Parameter,
    pub modulator: Modulator,
    /// Frozen replacement for `P_mod` used by [`PromptMode::Fixed`].
    pub fixed_tokens: Matrix,
    pub mode: PromptMode,
}

#[derive(Clone, Debug)]
pub struct CaspCache {
    context: Option<ContextCache>,
    c: Matrix,
    pool: Matrix,
    hidden: Matrix,
    gamma: Matrix,
    text: TextCache,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaspLossReport {
    pub alignment: f64,
    pub identity: f64,
    pub total: f64,
}

impl Casp {
    pub fn new(mode: PromptMode, rng: &mut StreamRng) -> Self {
        let context = ContextEncoder::new(rng);
        let base = Parameter::new("prompt.base", Matrix::randn(BASE_TOKENS, TOKEN_DIM, 1.0, rng), false);
        let modulator = Modulator::new(rng);
        let fixed_tokens = Matrix::randn(MOD_TOKENS, TOKEN_DIM, 1.0, rng);
        Self {
            context,
            base,
            modulator,
            fixed_tokens,
            mode,
        }
    }

    fn pooled_base(&self) -> Matrix {
        self.base.value.mean_rows()
    }

    /// Context vectors for a batch of visual features; zero under [`PromptMode::ZeroContext`].
    pub fn encode_context(&self, fv: &Matrix) -> Result<Matrix> {
        match self.mode {
            PromptMode::Dynamic => self.context.encode(fv),
            _ => Ok(Matrix::zeros(fv.rows(), CONTEXT_DIM)),
        }
    }

    /// The modulation tokens for one context vector (`MOD_TOKENS × TOKEN_DIM`).
    pub fn modulate_prompts(&self, c: &[f64]) -> Result<Matrix> {
        if self.mode == PromptMode::Fixed {
            return Ok(self.fixed_tokens.clone());
        }
        let c = Matrix::row_vector(c);
        let (mods, _, _) = self.modulate_batch(&c)?;
        let mut out = Matrix::zeros(MOD_TOKENS, TOKEN_DIM);
        out.data_mut().copy_from_slice(mods.row(0));
        Ok(out)
    }

    /// Per-row modulation tokens flattened to `b × (MOD_TOKENS·TOKEN_DIM)`,
    /// plus the hidden activations and raw γ offsets.
    fn modulate_batch(&self, c: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let m = &self.modulator;
        let hidden = tanh(&m.hidden.forward(c)?);
        let gamma = m.gamma.forward(&hidden)?;
        let delta = m.delta.forward(&hidden)?;
        let pool = self.pooled_base();
        let pool = pool.row(0);
        let mut mods = Matrix::zeros(c.rows(), MOD_TOKENS * TOKEN_DIM);
        for i in 0..c.rows() {
            let (g, d) = (gamma.row(i), delta.row(i));
            for (j, seed) in m.seeds.value.data().chunks(TOKEN_DIM).enumerate() {
                for k in 0..TOKEN_DIM {
                    let idx = j * TOKEN_DIM + k;
                    mods.set(i, idx, (1.0 + g[idx]) * pool[k] + d[idx] + seed[k]);
                }
            }
        }
        Ok((mods, hidden, gamma))
    }

    /// Full prompt `P_base ∪ P_mod` for one visual feature.
    pub fn prompt_tokens(&self, fv: &[f64]) -> Result<Matrix> {
        let c = self.encode_context(&Matrix::row_vector(fv))?;
        let pmod = self.modulate_prompts(c.row(0))?;
        let mut rows: Vec<Vec<f64>> = (0..BASE_TOKENS).map(|r| self.base.value.row(r).to_vec()).collect();
        rows.extend((0..MOD_TOKENS).map(|r| pmod.row(r).to_vec()));
        Matrix::from_rows(&rows)
    }

    /// Mean prompt token per row, and what backward needs.
    fn mean_tokens(&self, fv: &Matrix) -> Result<(Matrix, Option<ContextCache>, Matrix, Matrix, Matrix, Matrix)> {
        let b = fv.rows();
        let base_sum = self.base.value.sum_rows();
        let (context, c) = match self.mode {
            PromptMode::Dynamic => {
                let (c, cache) = self.context.forward(fv)?;
                (Some(cache), c)
            }
            _ => (None, Matrix::zeros(b, CONTEXT_DIM)),
        };
        let mut means = Matrix::zeros(b, TOKEN_DIM);
        let (hidden, gamma) = if self.mode == PromptMode::Fixed {
            let fixed = self.fixed_tokens.sum_rows();
            for i in 0..b {
                for ((o, x), y) in means.row_mut(i).iter_mut().zip(base_sum.data()).zip(fixed.data()) {
                    *o = (x + y) / PROMPT_LEN;
                }
            }
            (Matrix::zeros(0, 0), Matrix::zeros(0, 0))
        } else {
            let (mods, hidden, gamma) = self.modulate_batch(&c)?;
            for i in 0..b {
                let out = means.row_mut(i);
                out.copy_from_slice(base_sum.data());
                for tok in mods.row(i).chunks(TOKEN_DIM) {
                    for (o, t) in out.iter_mut().zip(tok) {
                        *o += t;
                    }
                }
                out.iter_mut().for_each(|v| *v /= PROMPT_LEN);
            }
            (hidden, gamma)
        };
        Ok((means, context, c, self.pooled_base(), hidden, gamma))
    }

    /// `e_T` for every row of `fv`.
    pub fn embed(&self, text: &TextEncoder, fv: &Matrix) -> Result<(Matrix, CaspCache)> {
        let (means, context, c, pool, hidden, gamma) = self.mean_tokens(fv)?;
        let (e, text_cache) = text.forward_pooled(&means)?;
        Ok((
            e,
            CaspCache {
                context,
                c,
                pool,
                hidden,
                gamma,
                text: text_cache,
            },
        ))
    }

    /// Accumulates gradients for the prompt-side parameters.
    pub fn backward(&mut self, text: &TextEncoder, cache: &CaspCache, de: &Matrix) -> Result<()> {
        let dmean = text.backward_pooled(&cache.text, de)?;
        let b = dmean.rows();
        let mut dm = dmean.clone();
        dm.scale(1.0 / PROMPT_LEN);
        let dm_sum = dm.sum_rows();

        let mut dbase = Matrix::zeros(BASE_TOKENS, TOKEN_DIM);
        for r in 0..BASE_TOKENS {
            dbase.row_mut(r).copy_from_slice(dm_sum.data());
        }
        if self.mode == PromptMode::Fixed {
            return self.base.accumulate(&dbase);
        }

        let width = MOD_TOKENS * TOKEN_DIM;
        let pool = cache.pool.row(0);
        let mut dgamma = Matrix::zeros(b, width);
        let mut ddelta = Matrix::zeros(b, width);
        let mut dpool = vec![0.0; TOKEN_DIM];
        let mut dseeds = Matrix::zeros(MOD_TOKENS, TOKEN_DIM);
        for i in 0..b {
            let d = dm.row(i);
            let g = cache.gamma.row(i);
            for j in 0..MOD_TOKENS {
                for k in 0..TOKEN_DIM {
                    let idx = j * TOKEN_DIM + k;
                    dgamma.set(i, idx, d[k] * pool[k]);
                    ddelta.set(i, idx, d[k]);
                    dpool[k] += d[k] * (1.0 + g[idx]);
                }
            }
        }
        for j in 0..MOD_TOKENS {
            dseeds.row_mut(j).copy_from_slice(dm_sum.data());
        }
        for r in 0..BASE_TOKENS {
            for (o, p) in dbase.row_mut(r).iter_mut().zip(&dpool) {
                *o += p / BASE_TOKENS as f64;
            }
        }
        self.base.accumulate(&dbase)?;
        let m = &mut self.modulator;
        m.seeds.accumulate(&dseeds)?;
        let mut dh = m.gamma.backward(&cache.hidden, &dgamma)?;
        dh.add_assign(&m.delta.backward(&cache.hidden, &ddelta)?)?;
        let dpre = tanh_backward(&cache.hidden, &dh);
        let dc = m.hidden.backward(&cache.c, &dpre)?;
        if let Some(ctx) = &cache.context {
            // ∂/∂f_v is dropped: the visual side is frozen during this stage
            self.context.backward(ctx, &dc)?;
        }
        Ok(())
    }
}

impl HasParams for Casp {
    /// Parameters trained in the prompt stage for the current mode.
    fn params(&self) -> Vec<&Parameter> {
        match self.mode {
            PromptMode::Dynamic => {
                let mut v = self.context.params();
                v.push(&self.base);
                v.extend(self.modulator.params());
                v
            }
            PromptMode::ZeroContext => {
                let mut v = vec![&self.base];
                v.extend(self.modulator.params());
                v
            }
            PromptMode::Fixed => Vec::new(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self.mode {
            PromptMode::Dynamic => {
                let mut v = self.context.params_mut();
                v.push(&mut self.base);
                v.extend(self.modulator.params_mut());
                v
            }
            PromptMode::ZeroContext => {
                let mut v = vec![&mut self.base];
                v.extend(self.modulator.params_mut());
                v
            }
            PromptMode::Fixed => Vec::new(),
        }
    }
}

/// Prompt-stage objective: symmetric contrastive alignment between `f_v` and
/// `e_T` with identity-level positives, plus identity cross-entropy on `e_T`.
/// Gradients are accumulated into `casp` and `head`; `f_v` is treated as fixed.
pub fn casp_stage_loss(
    casp: &mut Casp,
    head: &mut Linear,
    text: &TextEncoder,
    fv: &Matrix,
    identities: &[u32],
    labels: &[usize],
) -> Result<CaspLossReport> {
    let distinct = {
        let mut ids = identities.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    if distinct < 2 {
        return Err(Error::Protocol("prompt-stage batch needs at least two identities".into()));
    }
    let (e, cache) = casp.embed(text, fv)?;
    let (alignment, _dfv, mut de) = symmetric_contrastive(fv, &e, identities, TEMPERATURE)?;
    let logits = head.forward(&e)?;
    let (identity, dlogits) = cross_entropy(&logits, labels)?;
    de.add_assign(&head.backward(&e, &dlogits)?)?;
    casp.backward(text, &cache, &de)?;
    Ok(CaspLossReport {
        alignment,
        identity,
        total: alignment + identity,
    })
}

/// Zero-initialised identity head over `e_T` for one task's identities.
pub fn text_identity_head(classes: usize) -> Linear {
    Linear::from_parts("casp.text_head", Matrix::zeros(FEATURE_DIM, classes), Some(Matrix::zeros(1, classes)))
}

/// Random token set used to build a fixed concept embedding.
pub fn concept_tokens(count: usize, rng: &mut StreamRng) -> Matrix {
    let data = (0..count * TOKEN_DIM)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_vec(count, TOKEN_DIM, data).expect("finite")
}
