use cmlreid::casp::{casp_stage_loss, text_identity_head};
use cmlreid::config::ExperimentConfig;
use cmlreid::lifelong::casp_train_stage;
use cmlreid::model::Model;
use cmlreid::numerics::{cosine_similarity, Adam, HasParams, Matrix};
use cmlreid::rng::Streams;
use cmlreid::world::{sample_pk_batch, Batch, World};

fn labels(batch: &Batch) -> Vec<usize> {
    let mut distinct = batch.identities.clone();
    distinct.dedup();
    batch
        .identities
        .iter()
        .map(|i| distinct.iter().position(|d| d == i).unwrap())
        .collect()
}

fn alignment(model: &mut Model, batch: &Batch) -> f64 {
    let fv = model.encode(&batch.latents).unwrap();
    let mut head = text_identity_head(batch.distinct_identities());
    let r = casp_stage_loss(&mut model.casp, &mut head, &model.text, &fv, &batch.identities, &labels(batch)).unwrap();
    model.casp.zero_grads();
    r.alignment
}

#[test]
fn alignment_falls_at_every_step_on_a_fixed_batch() {
    let cfg = ExperimentConfig::default();
    let world = World::build(cfg.seed);
    let domain = world.domain("SC1").unwrap();
    let mut model = Model::new(&cfg, world.config.latent_dim());
    let batch = sample_pk_batch(domain, cfg.p, cfg.k, &mut Streams::new(0).stream("fixed")).unwrap();
    let fv = model.encode(&batch.latents).unwrap();
    let ids = labels(&batch);
    let mut head = text_identity_head(batch.distinct_identities());
    let mut adam = Adam::new(cfg.weight_decay);
    let mut history = Vec::new();
    for _ in 0..20 {
        let r = casp_stage_loss(&mut model.casp, &mut head, &model.text, &fv, &batch.identities, &ids).unwrap();
        history.push(r.alignment);
        let mut params = model.casp.params_mut();
        params.extend(head.params_mut());
        adam.step(&mut params, cfg.lr_prompt).unwrap();
    }
    for w in history.windows(2) {
        assert!(w[1] < w[0], "alignment rose: {history:?}");
    }
}

#[test]
fn default_prompt_stage_cuts_alignment_loss() {
    let cfg = ExperimentConfig::default();
    let world = World::build(cfg.seed);
    let domain = world.domain("SC1").unwrap();
    let mut model = Model::new(&cfg, world.config.latent_dim());
    let probe = sample_pk_batch(domain, cfg.p, cfg.k, &mut Streams::new(0).stream("probe")).unwrap();
    let before = alignment(&mut model, &probe);
    let logs = casp_train_stage(&mut model, domain, &cfg, 0, 0).unwrap();
    let after = alignment(&mut model, &probe);
    assert!(after < 0.85 * before, "alignment {before} -> {after}");
    assert!(logs.last().unwrap().total <= logs[0].total);
}

#[test]
fn text_embedding_depends_on_clothing_state() {
    let cfg = ExperimentConfig {
        epoch_scale: 10.0 / 120.0,
        ..Default::default()
    };
    assert_eq!(cfg.prompt_epochs(), 10);
    let world = World::build(cfg.seed);
    let sc = world.domain("SC1").unwrap();
    let cc = world.domain("CC1").unwrap();
    let mut model = Model::new(&cfg, world.config.latent_dim());
    casp_train_stage(&mut model, sc, &cfg, 0, 0).unwrap();

    let mut rng = Streams::new(0).stream("render");
    let sample = &sc.train[0];
    let outfit = Matrix::randn(1, world.config.outfit_dim, world.config.outfit_std, &mut rng).into_data();
    let in_cc = world.render(sample.identity, &outfit, cc.index, &mut rng);
    let latents = Matrix::from_rows(&[sample.latent.clone(), in_cc]).unwrap();
    let (e, _) = model.casp.embed(&model.text, &model.encode(&latents).unwrap()).unwrap();
    let sim = cosine_similarity(e.row(0), e.row(1)).unwrap();
    assert!(sim < 0.999, "cosine {sim}");
}
