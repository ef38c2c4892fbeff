use std::collections::BTreeMap;

use cmlreid::rng::Streams;
use cmlreid::world::{eval_split, sample_pk_batch, ClothingState, World};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain full-batch logistic regression; returns accuracy on `test`.
fn logistic_probe(train: &[(Vec<f64>, f64)], test: &[(Vec<f64>, f64)]) -> f64 {
    let d = train[0].0.len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.1;
    for _ in 0..600 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in train {
            let p = 1.0 / (1.0 + (-(dot(&w, x) + b)).exp());
            let e = p - y;
            gw.iter_mut().zip(x).for_each(|(g, xi)| *g += e * xi);
            gb += e;
        }
        let n = train.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= lr * g / n);
        b -= lr * gb / n;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| ((dot(&w, x) + b > 0.0) as u8 as f64) == *y)
        .count();
    correct as f64 / test.len() as f64
}

fn label(s: ClothingState) -> f64 {
    (s == ClothingState::CC) as u8 as f64
}

#[test]
fn clothing_state_is_linearly_decodable_from_latents() {
    let world = World::build(0);
    let train: Vec<_> = world
        .seen_domains()
        .flat_map(|d| &d.train)
        .map(|s| (s.latent.clone(), label(s.state)))
        .collect();
    let test: Vec<_> = world
        .seen_domains()
        .flat_map(|d| &d.eval)
        .map(|s| (s.latent.clone(), label(s.state)))
        .collect();
    let acc = logistic_probe(&train, &test);
    assert!(acc >= 0.95, "state probe accuracy {acc}");
}

#[test]
fn identities_are_separable_by_class_means() {
    let world = World::build(0);
    for domain in world.seen_domains() {
        let mut fit: BTreeMap<u32, Vec<&Vec<f64>>> = BTreeMap::new();
        let mut held = Vec::new();
        for group in domain.train_groups() {
            let half = group.len() / 2;
            for (i, &idx) in group.iter().enumerate() {
                let s = &domain.train[idx];
                if i < half {
                    fit.entry(s.identity).or_default().push(&s.latent);
                } else {
                    held.push(s);
                }
            }
        }
        let means: Vec<(u32, Vec<f64>)> = fit
            .iter()
            .map(|(&id, xs)| {
                let mut m = vec![0.0; xs[0].len()];
                for x in xs {
                    m.iter_mut().zip(x.iter()).for_each(|(a, b)| *a += b / xs.len() as f64);
                }
                (id, m)
            })
            .collect();
        let correct = held
            .iter()
            .filter(|s| {
                let best = means
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = a.1.iter().zip(&s.latent).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = b.1.iter().zip(&s.latent).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best.0 == s.identity
            })
            .count();
        let acc = correct as f64 / held.len() as f64;
        assert!(acc >= 0.80, "{}: nearest-class-mean accuracy {acc}", domain.name);
    }
}

/// Per-identity outfit counts in CC batches should look uniform over the wardrobe.
#[test]
fn cc_batch_outfits_are_uniform() {
    let world = World::build(0);
    let domain = world.domain("CC1").unwrap();
    let mut rng = Streams::new(7).stream("chi");
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for _ in 0..1000 {
        let b = sample_pk_batch(domain, 16, 4, &mut rng).unwrap();
        for (&id, &o) in b.identities.iter().zip(&b.outfits) {
            *counts.entry((id, o)).or_default() += 1;
        }
    }
    // Expected frequency per outfit follows the training images drawn for that identity.
    let mut chi2 = 0.0;
    let mut dof = 0usize;
    for &id in &domain.train_identities {
        let imgs: Vec<_> = domain.train.iter().filter(|s| s.identity == id).collect();
        let total: usize = counts.iter().filter(|((i, _), _)| *i == id).map(|(_, c)| c).sum();
        let mut per_outfit: BTreeMap<u32, usize> = BTreeMap::new();
        for s in &imgs {
            *per_outfit.entry(s.outfit).or_default() += 1;
        }
        for (o, n) in &per_outfit {
            let expected = total as f64 * *n as f64 / imgs.len() as f64;
            let observed = *counts.get(&(id, *o)).unwrap_or(&0) as f64;
            chi2 += (observed - expected).powi(2) / expected;
        }
        dof += per_outfit.len() - 1;
    }
    // mean + 4 sd of a chi-square with `dof` degrees of freedom
    let bound = dof as f64 + 4.0 * (2.0 * dof as f64).sqrt();
    assert!(chi2 < bound, "chi2 {chi2} over bound {bound} (dof {dof})");
}

#[test]
fn cc_identities_mostly_show_several_outfits() {
    let world = World::build(0);
    for domain in world.seen_domains().filter(|d| d.state_kind == ClothingState::CC) {
        let multi = domain
            .train_identities
            .iter()
            .filter(|&&id| {
                let mut o: Vec<u32> = domain.train.iter().filter(|s| s.identity == id).map(|s| s.outfit).collect();
                o.sort();
                o.dedup();
                o.len() >= 2
            })
            .count();
        assert!(multi as f64 >= 0.95 * domain.train_identities.len() as f64);
    }
}

/// 99th percentile of a chi-square with 49 degrees of freedom.
const CHI2_49_P01: f64 = 74.919;

#[test]
fn batch_identities_are_uniform() {
    let world = World::build(0);
    for domain in world.seen_domains() {
        let mut rng = Streams::new(9).stream(&format!("uniform/{}", domain.name));
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for _ in 0..1000 {
            let b = sample_pk_batch(domain, 16, 4, &mut rng).unwrap();
            for id in b.identities.iter().step_by(4) {
                *counts.entry(*id).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), 50);
        let expected = 1000.0 * 16.0 / 50.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CHI2_49_P01, "{}: chi2 {chi2}", domain.name);
    }
}

#[test]
fn every_query_has_between_one_and_ten_matches() {
    let world = World::build(0);
    for domain in world.seen_domains().chain(world.heldout_domains()) {
        let split = eval_split(domain).unwrap();
        for q in &split.query {
            let matches = split
                .gallery
                .iter()
                .filter(|g| g.identity == q.identity)
                .filter(|g| domain.state_kind == ClothingState::SC || g.outfit != q.outfit)
                .count();
            assert!((1..=10).contains(&matches), "{}: {matches} matches", domain.name);
        }
    }
}
