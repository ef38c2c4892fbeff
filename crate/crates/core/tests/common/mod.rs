#![allow(dead_code)]

use cmlreid::akfp::{
    project, projection_loss, total_loss, AkfpHeads, AkfpMode, AkfpSettings, ProjectionBundle, StateClassifier,
    StatePrototypes,
};
use cmlreid::casp::{casp_stage_loss, text_identity_head, Casp, ContextEncoder, PromptMode, PSEUDO_WIDTH};
use cmlreid::config::ExperimentConfig;
use cmlreid::encoders::{TextEncoder, VisualEncoder, FEATURE_DIM, TOKEN_DIM};
use cmlreid::lifelong::{akfp_train_stage, casp_train_stage};
use cmlreid::model::Model;
use cmlreid::numerics::{
    finite_diff_check, softmax, GradCheckConfig, GradCheckReport, HasParams, Linear, Matrix, Parameter,
};
use cmlreid::rng::Streams;
use cmlreid::world::{ClothingState, SyntheticSample, World};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestError, TestRunner};

pub const PROPERTY_CASES: u32 = 256;

// ---------------------------------------------------------------------------
// Brute-force retrieval oracle.

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// AP by definition over the full sorted similarity list, plus a top-1 hit flag.
/// Returns `None` for queries with nothing relevant.
pub fn oracle_query(
    q: &[f64],
    q_meta: &SyntheticSample,
    gallery: &[Vec<f64>],
    g_meta: &[SyntheticSample],
    cloth_changing: bool,
) -> Option<(f64, bool)> {
    let mut entries: Vec<(f64, usize)> = Vec::new();
    for (j, g) in gallery.iter().enumerate() {
        let masked = cloth_changing && g_meta[j].identity == q_meta.identity && g_meta[j].outfit == q_meta.outfit;
        if !masked {
            entries.push((cos(q, g), j));
        }
    }
    // descending similarity, ascending index on ties
    for i in 0..entries.len() {
        for k in i + 1..entries.len() {
            let (a, b) = (entries[i], entries[k]);
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                entries.swap(i, k);
            }
        }
    }
    let rel: Vec<bool> = entries.iter().map(|&(_, j)| g_meta[j].identity == q_meta.identity).collect();
    let n_rel = rel.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return None;
    }
    let mut ap = 0.0;
    for k in 0..rel.len() {
        if rel[k] {
            let hits_in_top = rel[..=k].iter().filter(|&&r| r).count();
            ap += hits_in_top as f64 / (k + 1) as f64;
        }
    }
    Some((ap / n_rel as f64, rel[0]))
}

/// Returns `(mAP %, R-1 %)` computed by brute force.
pub fn oracle_scores(
    queries: &[Vec<f64>],
    q_meta: &[SyntheticSample],
    gallery: &[Vec<f64>],
    g_meta: &[SyntheticSample],
    cloth_changing: bool,
) -> Option<(f64, f64)> {
    let results: Vec<(f64, bool)> = queries
        .iter()
        .zip(q_meta)
        .filter_map(|(q, m)| oracle_query(q, m, gallery, g_meta, cloth_changing))
        .collect();
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    let ap: f64 = results.iter().map(|r| r.0).sum();
    let top: usize = results.iter().filter(|r| r.1).count();
    Some((100.0 * ap / n, 100.0 * top as f64 / n))
}

pub fn meta(identity: u32, outfit: u32, state: ClothingState) -> SyntheticSample {
    SyntheticSample {
        latent: Vec::new(),
        identity,
        outfit,
        domain: 0,
        state,
    }
}

// ---------------------------------------------------------------------------
// Gradient checks over complete stage objectives.

pub struct PromptSide {
    pub casp: Casp,
    pub head: Linear,
}

impl HasParams for PromptSide {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.casp.params();
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.casp.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

pub struct VisualSide {
    pub visual: VisualEncoder,
    pub id_head: Linear,
    pub heads: AkfpHeads,
}

impl HasParams for VisualSide {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.visual.params();
        v.extend(self.id_head.params());
        v.extend(self.heads.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.visual.params_mut();
        v.extend(self.id_head.params_mut());
        v.extend(self.heads.params_mut());
        v
    }
}

/// Eight training samples: four identities, two images each, mixing SC and CC domains.
pub fn mixed_batch(world: &World) -> Vec<SyntheticSample> {
    let mut out = Vec::new();
    for name in ["SC1", "CC1"] {
        let d = world.domain(name).unwrap();
        for g in d.train_groups().iter().take(2) {
            out.extend(g.iter().take(2).map(|&i| d.train[i].clone()));
        }
    }
    out
}

/// A gradient check plus the names of parameters one backward pass never reached.
pub struct StageCheck {
    pub report: GradCheckReport,
    pub untouched: Vec<String>,
}

fn untouched<M: HasParams>(side: &M) -> Vec<String> {
    side.params().iter().filter(|p| !p.has_grad()).map(|p| p.name.clone()).collect()
}

pub fn prompt_stage_gradcheck(seed: u64) -> cmlreid::Result<StageCheck> {
    let world = World::build(seed);
    let samples = mixed_batch(&world);
    let batch = cmlreid::world::Batch::from_samples(&samples);
    let streams = Streams::new(seed);
    let mut rng = streams.stream("gradcheck/prompt");
    let visual = VisualEncoder::new(world.config.latent_dim(), &mut rng);
    let text = TextEncoder::new(&mut rng);
    let mut head = text_identity_head(4);
    head.weight.reset_value(Matrix::randn(FEATURE_DIM, 4, 0.3, &mut rng));
    let mut side = PromptSide {
        casp: Casp::new(PromptMode::Dynamic, &mut rng),
        head,
    };
    let fv = visual.encode(&batch.latents)?;
    let ids = batch.identities.clone();
    let mut distinct = ids.clone();
    distinct.dedup();
    let labels: Vec<usize> = ids.iter().map(|i| distinct.iter().position(|d| d == i).unwrap()).collect();
    let loss = |s: &mut PromptSide| Ok(casp_stage_loss(&mut s.casp, &mut s.head, &text, &fv, &ids, &labels)?.total);
    side.zero_grads();
    loss(&mut side)?;
    let missed = untouched(&side);
    let report = finite_diff_check(&mut side, loss, GradCheckConfig::default(), &mut rng)?;
    Ok(StageCheck { report, untouched: missed })
}

pub fn visual_stage_gradcheck(seed: u64) -> cmlreid::Result<StageCheck> {
    let world = World::build(seed);
    let samples = mixed_batch(&world);
    let batch = cmlreid::world::Batch::from_samples(&samples);
    let streams = Streams::new(seed);
    let mut rng = streams.stream("gradcheck/visual");
    let visual = VisualEncoder::new(world.config.latent_dim(), &mut rng);
    let mut id_head = Linear::xavier("id_head", FEATURE_DIM, 4, true, &mut rng);
    id_head.bias.as_mut().unwrap().reset_value(Matrix::randn(1, 4, 0.1, &mut rng));
    let mut classifier = StateClassifier::new(&mut rng);
    classifier.linear.weight.reset_value(Matrix::randn(FEATURE_DIM, 2, 0.3, &mut rng));
    let mut side = VisualSide {
        visual,
        id_head,
        heads: AkfpHeads {
            classifier,
            projection: ProjectionBundle::near_identity(&mut rng),
        },
    };
    let protos = StatePrototypes::with_values(
        Matrix::randn(1, FEATURE_DIM, 1.0, &mut rng).into_data(),
        Matrix::randn(1, FEATURE_DIM, 1.0, &mut rng).into_data(),
        0.001,
    );
    let ids = batch.identities.clone();
    let mut distinct = ids.clone();
    distinct.dedup();
    let labels: Vec<usize> = ids.iter().map(|i| distinct.iter().position(|d| d == i).unwrap()).collect();
    let settings = AkfpSettings {
        mode: AkfpMode::Full,
        lambda: 0.5,
        margin: 0.3,
        state_aux_weight: 0.1,
    };
    let loss = |s: &mut VisualSide| {
        Ok(total_loss(
            &mut s.visual,
            &mut s.id_head,
            &mut s.heads,
            &protos,
            &batch.latents,
            &labels,
            &ids,
            &batch.states,
            &settings,
        )?
        .objective)
    };
    side.zero_grads();
    loss(&mut side)?;
    let missed = untouched(&side);
    let report = finite_diff_check(&mut side, loss, GradCheckConfig::default(), &mut rng)?;
    Ok(StageCheck { report, untouched: missed })
}

// ---------------------------------------------------------------------------
// Invariants, each checked over `PROPERTY_CASES` random cases.

pub type PropResult = Result<(), String>;

fn run<S: Strategy>(strat: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> PropResult {
    let mut runner = TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strat, test).map_err(|e: TestError<S::Value>| e.to_string())
}

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 2usize..8)
}

pub fn prop_softmax_rows_sum_to_one() -> PropResult {
    let strat = dims().prop_flat_map(|(r, c)| matrix(r, c, 60.0));
    run(strat, |logits| {
        let p = softmax(&logits).unwrap();
        for r in 0..p.rows() {
            let sum: f64 = p.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            prop_assert!(p.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        Ok(())
    })
}

pub fn prop_attention_is_distribution() -> PropResult {
    let strat = (any::<u64>(), matrix(1, PSEUDO_WIDTH, 3.0), (1usize..6).prop_flat_map(|b| matrix(b, FEATURE_DIM, 5.0)));
    run(strat, |(seed, score, fv)| {
        let mut enc = ContextEncoder::new(&mut Streams::new(seed).stream("ctx"));
        enc.score.reset_value(score);
        let a = enc.attention(&fv).unwrap();
        for r in 0..a.rows() {
            let sum: f64 = a.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(a.row(r).iter().all(|&v| v >= 0.0));
        }
        Ok(())
    })
}

/// ŝ is a distribution and `f_proj` a coordinate-wise convex combination of the two heads.
pub fn prop_state_weights_are_convex() -> PropResult {
    let strat = (
        any::<u64>(),
        matrix(FEATURE_DIM, 2, 1.0),
        (1usize..5).prop_flat_map(|b| matrix(b, FEATURE_DIM, 3.0)),
    );
    run(strat, |(seed, w, fv)| {
        let mut rng = Streams::new(seed).stream("convex");
        let mut cls = StateClassifier::new(&mut rng);
        cls.linear.weight.reset_value(w);
        let bundle = ProjectionBundle::from_matrices(
            Matrix::randn(FEATURE_DIM, FEATURE_DIM, 0.3, &mut rng),
            Matrix::randn(FEATURE_DIM, FEATURE_DIM, 0.3, &mut rng),
        );
        let s = cls.classify(&fv).unwrap();
        let f = project(&fv, &s, &bundle).unwrap();
        let a = fv.matmul(&bundle.sc.value).unwrap();
        let b = fv.matmul(&bundle.cc.value).unwrap();
        for i in 0..fv.rows() {
            prop_assert!((s.get(i, 0) + s.get(i, 1) - 1.0).abs() < 1e-12);
            for k in 0..FEATURE_DIM {
                let (lo, hi) = (a.get(i, k).min(b.get(i, k)), a.get(i, k).max(b.get(i, k)));
                let v = f.get(i, k);
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
        Ok(())
    })
}

pub fn prop_projection_loss_in_range() -> PropResult {
    let strat = (
        (1usize..8).prop_flat_map(|b| (matrix(b, FEATURE_DIM, 4.0), prop::collection::vec(any::<bool>(), b))),
        matrix(1, FEATURE_DIM, 4.0),
        matrix(1, FEATURE_DIM, 4.0),
    );
    run(strat, |((f, flags), sc, cc)| {
        let states: Vec<_> = flags
            .iter()
            .map(|&c| if c { ClothingState::CC } else { ClothingState::SC })
            .collect();
        let protos = StatePrototypes::with_values(sc.into_data(), cc.into_data(), 0.001);
        let (l, _) = projection_loss(&f, &states, &protos).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&l), "L_proj = {l}");
        Ok(())
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// If every batch mean has norm ≤ M then ‖T‖ ≤ max(‖T₀‖, M) after any number of updates.
pub fn prop_prototype_norm_bound() -> PropResult {
    let strat = (
        any::<u64>(),
        0.01f64..=1.0,
        0.1f64..5.0,
        matrix(1, FEATURE_DIM, 3.0),
        1usize..20,
    );
    run(strat, |(seed, beta, bound, t0, steps)| {
        let mut rng = Streams::new(seed).stream("norm");
        let t0 = t0.into_data();
        let limit = norm(&t0).max(bound);
        let mut p = StatePrototypes::with_values(t0.clone(), t0, beta);
        for _ in 0..steps {
            let mut rows = Matrix::randn(4, FEATURE_DIM, 1.0, &mut rng);
            for r in 0..4 {
                let n = norm(rows.row(r));
                rows.row_mut(r).iter_mut().for_each(|v| *v *= bound / n);
            }
            let states = [ClothingState::SC, ClothingState::CC, ClothingState::SC, ClothingState::CC];
            p.update(&rows, &states).unwrap();
            for s in ClothingState::ALL {
                let n = norm(p.get(s).unwrap());
                prop_assert!(n <= limit * (1.0 + 1e-12), "‖T‖ = {n} > {limit}");
            }
        }
        Ok(())
    })
}

fn snapshot(params: Vec<&Parameter>) -> Vec<Vec<u64>> {
    params
        .into_iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

/// The prompt stage leaves the visual side untouched and vice versa, bit for bit.
pub fn prop_stage_isolation(world: &World) -> PropResult {
    let strat = (any::<u64>(), 0usize..4);
    run(strat, |(seed, d)| {
        let config = ExperimentConfig {
            seed,
            epoch_scale: 1.0 / 60.0,
            warmup_epochs: 0,
            ..Default::default()
        };
        let domain = world.seen_domains().nth(d).unwrap();
        let mut model = Model::new(&config, world.config.latent_dim());
        model.id_head.expand(&domain.train_identities, &mut Streams::new(seed).stream("ids")).unwrap();
        let visual_side = |m: &Model| {
            let mut v = m.visual.params();
            v.extend(m.heads.params());
            v.extend(m.id_head.linear.params());
            snapshot(v)
        };
        let prompt_side = |m: &Model| {
            let mut v = m.casp.context.params();
            v.push(&m.casp.base);
            v.extend(m.casp.modulator.params());
            snapshot(v)
        };
        let before = (visual_side(&model), prompt_side(&model));
        casp_train_stage(&mut model, domain, &config, 0, 0).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(visual_side(&model) == before.0, "prompt stage touched the visual side");
        prop_assert!(prompt_side(&model) != before.1, "prompt stage did not train");
        let mid = prompt_side(&model);
        akfp_train_stage(&mut model, domain, &config, 0, 0).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(prompt_side(&model) == mid, "visual stage touched the prompt side");
        Ok(())
    })
}

/// Text embeddings ignore token order; prototype updates ignore batch order.
pub fn prop_permutation_invariance() -> PropResult {
    let strat = (any::<u64>(), (2usize..10).prop_flat_map(|n| (Just(n), Just((0..n).collect::<Vec<_>>()).prop_shuffle())));
    run(strat, |(seed, (n, perm))| {
        let mut rng = Streams::new(seed).stream("perm");
        let text = TextEncoder::new(&mut rng);
        let tokens = Matrix::randn(n, TOKEN_DIM, 1.0, &mut rng);
        let shuffled = tokens.select_rows(&perm);
        let a = text.encode_tokens(&tokens).unwrap();
        let b = text.encode_tokens(&shuffled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }

        let e = Matrix::randn(n, FEATURE_DIM, 1.0, &mut rng);
        let states: Vec<_> = (0..n)
            .map(|i| if i % 2 == 0 { ClothingState::SC } else { ClothingState::CC })
            .collect();
        let init = Matrix::randn(2, FEATURE_DIM, 1.0, &mut rng);
        let mut p1 = StatePrototypes::with_values(init.row(0).to_vec(), init.row(1).to_vec(), 0.3);
        let mut p2 = p1.clone();
        p1.update(&e, &states).unwrap();
        let permuted_states: Vec<_> = perm.iter().map(|&i| states[i]).collect();
        p2.update(&e.select_rows(&perm), &permuted_states).unwrap();
        for s in ClothingState::ALL {
            for (x, y) in p1.get(s).unwrap().iter().zip(p2.get(s).unwrap()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
        Ok(())
    })
}

pub fn all_properties(world: &World) -> Vec<(&'static str, PropResult)> {
    vec![
        ("softmax row sums", prop_softmax_rows_sum_to_one()),
        ("attention distribution", prop_attention_is_distribution()),
        ("state-weight convexity", prop_state_weights_are_convex()),
        ("projection loss range", prop_projection_loss_in_range()),
        ("prototype norm bound", prop_prototype_norm_bound()),
        ("stage isolation", prop_stage_isolation(world)),
        ("permutation invariance", prop_permutation_invariance()),
    ]
}
