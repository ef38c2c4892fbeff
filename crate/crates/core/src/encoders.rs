//! Frozen stand-ins for the visual and text towers, plus the trainable visual adapter.

use crate::error::{Error, Result};
use crate::numerics::{HasParams, Matrix, Mlp, MlpCache, Parameter};
use crate::rng::StreamRng;
use crate::world::SyntheticSample;

pub const FEATURE_DIM: usize = 64;
pub const ADAPTER_HIDDEN: usize = 96;
pub const TOKEN_DIM: usize = 32;

/// Visual tower: a frozen random linear map from latents to features,
/// followed by a trainable two-layer tanh adapter producing `f_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    base: Matrix,
    pub adapter: Mlp,
}

#[derive(Clone, Debug)]
pub struct VisualCache {
    adapter: MlpCache,
}

impl VisualEncoder {
    pub fn new(latent_dim: usize, rng: &mut StreamRng) -> Self {
        let base = Matrix::randn(latent_dim, FEATURE_DIM, 1.0 / (latent_dim as f64).sqrt(), rng);
        let adapter = Mlp::xavier("adapter", FEATURE_DIM, ADAPTER_HIDDEN, FEATURE_DIM, rng);
        Self { base, adapter }
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn forward(&self, latents: &Matrix) -> Result<(Matrix, VisualCache)> {
        let features = latents.matmul(&self.base)?;
        let (fv, adapter) = self.adapter.forward(&features)?;
        Ok((fv, VisualCache { adapter }))
    }

    pub fn encode(&self, latents: &Matrix) -> Result<Matrix> {
        Ok(self.forward(latents)?.0)
    }

    pub fn encode_sample(&self, sample: &SyntheticSample) -> Result<Vec<f64>> {
        Ok(self.encode(&Matrix::row_vector(&sample.latent))?.into_data())
    }

    /// Accumulates adapter gradients. The frozen base receives none.
    pub fn backward(&mut self, cache: &VisualCache, dfv: &Matrix) -> Result<()> {
        self.adapter.backward(&cache.adapter, dfv)?;
        Ok(())
    }
}

impl HasParams for VisualEncoder {
    fn params(&self) -> Vec<&Parameter> {
        self.adapter.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.adapter.params_mut()
    }
}

/// Frozen text tower: mean-pool tokens, lift to feature width, fixed 2-layer MLP.
///
/// Mean pooling makes the output depend on the token multiset only.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    lift: Matrix,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct TextCache {
    lifted: MlpCache,
}

impl TextEncoder {
    pub fn new(rng: &mut StreamRng) -> Self {
        let lift = Matrix::randn(TOKEN_DIM, FEATURE_DIM, 1.0 / (TOKEN_DIM as f64).sqrt(), rng);
        let mlp = Mlp::xavier("text", FEATURE_DIM, FEATURE_DIM, FEATURE_DIM, rng);
        Self { lift, mlp }
    }

    /// Encodes one token sequence (`n × TOKEN_DIM`).
    pub fn encode_tokens(&self, tokens: &Matrix) -> Result<Vec<f64>> {
        if tokens.rows() == 0 {
            return Err(Error::EmptyPrompt);
        }
        if tokens.cols() != TOKEN_DIM {
            return Err(Error::dim("encode_text", tokens.shape(), (tokens.rows(), TOKEN_DIM)));
        }
        Ok(self.forward_pooled(&tokens.mean_rows())?.0.into_data())
    }

    /// Encodes a batch given each sequence's mean token (`b × TOKEN_DIM`).
    pub fn forward_pooled(&self, mean_tokens: &Matrix) -> Result<(Matrix, TextCache)> {
        let lifted = mean_tokens.matmul(&self.lift)?;
        let (e, cache) = self.mlp.forward(&lifted)?;
        Ok((e, TextCache { lifted: cache }))
    }

    /// Gradient w.r.t. the mean tokens; encoder weights stay frozen.
    pub fn backward_pooled(&self, cache: &TextCache, de: &Matrix) -> Result<Matrix> {
        let dlift = self.mlp.backward_input(&cache.lifted, de)?;
        dlift.matmul_t(&self.lift)
    }

    pub fn weights(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.lift];
        v.extend(self.mlp.params().into_iter().map(|p| &p.value));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheckConfig};
    use crate::rng::Streams;
    use crate::world::World;

    #[test]
    fn visual_is_deterministic() {
        let w = World::build(0);
        let enc = VisualEncoder::new(48, &mut Streams::new(0).stream("v"));
        let s = &w.domains[0].train[3];
        assert_eq!(enc.encode_sample(s).unwrap(), enc.encode_sample(s).unwrap());
    }

    #[test]
    fn zero_adapter_gives_zero_feature() {
        let w = World::build(0);
        let mut enc = VisualEncoder::new(48, &mut Streams::new(0).stream("v"));
        for p in enc.adapter.params_mut() {
            p.value.fill(0.0);
        }
        assert!(enc.encode_sample(&w.domains[1].eval[0]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_gradient_of_squared_norm() {
        let w = World::build(0);
        let mut rng = Streams::new(0).stream("v");
        let mut enc = VisualEncoder::new(48, &mut rng);
        let x = crate::world::Batch::from_samples(&w.domains[0].train[..4]).latents;
        let report = finite_diff_check(
            &mut enc,
            |e| {
                let (fv, cache) = e.forward(&x)?;
                e.backward(&cache, &fv.scaled(2.0))?;
                Ok(fv.data().iter().map(|v| v * v).sum())
            },
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn text_mean_pool_properties() {
        let mut rng = Streams::new(0).stream("t");
        let enc = TextEncoder::new(&mut rng);
        let toks = Matrix::randn(5, TOKEN_DIM, 1.0, &mut rng);
        let one = Matrix::row_vector(toks.row(0));
        let twice = Matrix::from_rows(&[toks.row(0).to_vec(), toks.row(0).to_vec()]).unwrap();
        assert_eq!(enc.encode_tokens(&one).unwrap(), enc.encode_tokens(&twice).unwrap());
        assert!(matches!(enc.encode_tokens(&Matrix::zeros(0, TOKEN_DIM)), Err(Error::EmptyPrompt)));
    }

    struct Tokens(Parameter);
    impl HasParams for Tokens {
        fn params(&self) -> Vec<&Parameter> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn text_gradient_wrt_tokens() {
        let mut rng = Streams::new(1).stream("t");
        let enc = TextEncoder::new(&mut rng);
        let target = Matrix::randn(1, FEATURE_DIM, 1.0, &mut rng);
        let mut toks = Tokens(Parameter::new("tokens", Matrix::randn(6, TOKEN_DIM, 1.0, &mut rng), false));
        let report = finite_diff_check(
            &mut toks,
            |t| {
                let n = t.0.value.rows();
                let (e, cache) = enc.forward_pooled(&t.0.value.mean_rows())?;
                let loss = e.data().iter().zip(target.data()).map(|(a, b)| a * b).sum::<f64>();
                let dmean = enc.backward_pooled(&cache, &target)?;
                let mut g = Matrix::zeros(n, TOKEN_DIM);
                for r in 0..n {
                    g.row_mut(r).copy_from_slice(dmean.row(0));
                }
                g.scale(1.0 / n as f64);
                t.0.accumulate(&g)?;
                Ok(loss)
            },
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
