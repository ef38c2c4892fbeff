//! Synthetic universe of identities, outfits and domains.
//!
//! A sample's latent is `concat(identity core, outfit code, pose noise)` pushed
//! through its domain's invertible affine shift. Same-Cloth domains give every
//! identity exactly one outfit; Cloth-Changing domains draw a fresh outfit per
//! image from a small per-identity wardrobe. Outfit codes carry a per-state
//! style offset, which is what makes the clothing state observable.

use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};
use crate::rng::{StreamRng, Streams};

pub const WORLD_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClothingState {
    SC,
    CC,
}

impl ClothingState {
    pub const ALL: [ClothingState; 2] = [ClothingState::SC, ClothingState::CC];

    pub fn index(self) -> usize {
        match self {
            ClothingState::SC => 0,
            ClothingState::CC => 1,
        }
    }
}

impl fmt::Display for ClothingState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClothingState::SC => "SC",
            ClothingState::CC => "CC",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub identity_dim: usize,
    pub outfit_dim: usize,
    pub noise_dim: usize,
    pub identity_std: f64,
    pub outfit_std: f64,
    /// Norm of the per-state style offset added to every outfit code.
    pub style_strength: f64,
    pub pose_noise: f64,
    pub offset_std: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub train_identities: usize,
    pub eval_identities: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub cc_outfits: usize,
    pub heldout_identities: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            identity_dim: 16,
            outfit_dim: 16,
            noise_dim: 16,
            identity_std: 0.35,
            outfit_std: 0.35,
            style_strength: 1.0,
            pose_noise: 0.3,
            offset_std: 1.0,
            scale_min: 0.7,
            scale_max: 1.3,
            train_identities: 50,
            eval_identities: 25,
            train_images: 20,
            eval_images: 10,
            cc_outfits: 3,
            heldout_identities: 25,
        }
    }
}

impl WorldConfig {
    pub fn latent_dim(&self) -> usize {
        self.identity_dim + self.outfit_dim + self.noise_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: u32,
    /// Clothing-invariant body code.
    pub core: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outfit {
    pub outfit_id: u32,
    pub identity: u32,
    pub code: Vec<f64>,
}

/// Invertible affine map applied to latents: `latent = x · matrix + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub matrix: Matrix,
    pub offset: Vec<f64>,
}

impl DomainShift {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.offset.clone();
        for (i, &xi) in x.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.matrix.row(i)) {
                *o += xi * m;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub latent: Vec<f64>,
    pub identity: u32,
    pub outfit: u32,
    /// Index into [`World::domains`].
    pub domain: usize,
    /// Ground-truth clothing state, equal to the generating domain's kind.
    pub state: ClothingState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub name: String,
    pub index: usize,
    pub state_kind: ClothingState,
    pub shift: DomainShift,
    pub noise: f64,
    pub heldout: bool,
    pub train_identities: Vec<u32>,
    pub eval_identities: Vec<u32>,
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
    train_groups: Vec<Vec<usize>>,
}

impl Domain {
    pub fn train_pool(&self) -> usize {
        self.train_groups.len()
    }

    /// Indices into `train` grouped by identity, in `train_identities` order.
    pub fn train_groups(&self) -> &[Vec<usize>] {
        &self.train_groups
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub identities: Vec<Identity>,
    pub outfits: Vec<Outfit>,
    pub domains: Vec<Domain>,
    /// Style offset added to outfit codes, indexed by state.
    pub style: [Vec<f64>; 2],
}

pub const SEEN_DOMAINS: [(&str, ClothingState); 4] = [
    ("SC1", ClothingState::SC),
    ("CC1", ClothingState::CC),
    ("SC2", ClothingState::SC),
    ("CC2", ClothingState::CC),
];

pub const HELDOUT_DOMAINS: [(&str, ClothingState); 2] =
    [("SC-unseen", ClothingState::SC), ("CC-unseen", ClothingState::CC)];

fn gaussian(rng: &mut StreamRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Haar-ish random rotation via Gram–Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut StreamRng, n: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = gaussian(rng, n, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let nv = norm(&v);
        if nv < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        basis.push(v);
    }
    Matrix::from_rows(&basis).expect("square basis")
}

impl World {
    /// Builds the default world: four seen domains and two held-out ones.
    pub fn build(seed: u64) -> World {
        Self::build_with(seed, WorldConfig::default())
    }

    pub fn build_with(seed: u64, config: WorldConfig) -> World {
        let streams = Streams::new(seed);
        let mut style_rng = streams.stream("world/style");
        let mut direction = gaussian(&mut style_rng, config.outfit_dim, 1.0);
        let n = norm(&direction);
        direction.iter_mut().for_each(|v| *v *= config.style_strength / n);
        let style = [direction.clone(), direction.iter().map(|v| -v).collect()];

        let mut world = World {
            seed,
            config,
            identities: Vec::new(),
            outfits: Vec::new(),
            domains: Vec::new(),
            style,
        };
        for (name, state) in SEEN_DOMAINS {
            world.add_domain(&streams, name, state, false);
        }
        for (name, state) in HELDOUT_DOMAINS {
            world.add_domain(&streams, name, state, true);
        }
        world
    }

    fn add_domain(&mut self, streams: &Streams, name: &str, state: ClothingState, heldout: bool) {
        let cfg = self.config.clone();
        let d = cfg.latent_dim();
        let index = self.domains.len();
        let mut rng = streams.stream(&format!("world/domain/{name}/shift"));
        let rotation = random_rotation(&mut rng, d);
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(cfg.scale_min..=cfg.scale_max)).collect();
        let mut matrix = rotation;
        for r in 0..d {
            for (v, s) in matrix.row_mut(r).iter_mut().zip(&scales) {
                *v *= s;
            }
        }
        let shift = DomainShift {
            matrix,
            offset: gaussian(&mut rng, d, cfg.offset_std),
        };

        let mut domain = Domain {
            name: name.to_string(),
            index,
            state_kind: state,
            shift,
            noise: cfg.pose_noise,
            heldout,
            train_identities: Vec::new(),
            eval_identities: Vec::new(),
            train: Vec::new(),
            eval: Vec::new(),
            train_groups: Vec::new(),
        };

        let (n_train, n_eval) = if heldout {
            (0, cfg.heldout_identities)
        } else {
            (cfg.train_identities, cfg.eval_identities)
        };
        let mut id_rng = streams.stream(&format!("world/domain/{name}/identities"));
        let mut img_rng = streams.stream(&format!("world/domain/{name}/images"));
        for slot in 0..n_train + n_eval {
            let is_train = slot < n_train;
            let id = self.identities.len() as u32;
            let core = gaussian(&mut id_rng, cfg.identity_dim, cfg.identity_std);
            let wardrobe_size = match state {
                ClothingState::SC => 1,
                ClothingState::CC => cfg.cc_outfits,
            };
            let wardrobe: Vec<u32> = (0..wardrobe_size)
                .map(|_| {
                    let outfit_id = self.outfits.len() as u32;
                    let mut code = gaussian(&mut id_rng, cfg.outfit_dim, cfg.outfit_std);
                    code.iter_mut()
                        .zip(&self.style[state.index()])
                        .for_each(|(c, s)| *c += s);
                    self.outfits.push(Outfit {
                        outfit_id,
                        identity: id,
                        code,
                    });
                    outfit_id
                })
                .collect();
            let images = if is_train { cfg.train_images } else { cfg.eval_images };
            // evaluation needs at least two outfits per CC identity for the cloth-changing split
            let picks = loop {
                let picks: Vec<u32> = (0..images)
                    .map(|_| wardrobe[img_rng.random_range(0..wardrobe.len())])
                    .collect();
                let distinct = picks.iter().any(|&o| o != picks[0]);
                if is_train || state == ClothingState::SC || distinct || images < 2 {
                    break picks;
                }
            };
            let samples: Vec<SyntheticSample> = picks
                .into_iter()
                .map(|outfit| {
                    let noise = gaussian(&mut img_rng, cfg.noise_dim, cfg.pose_noise);
                    let mut x = core.clone();
                    x.extend_from_slice(&self.outfits[outfit as usize].code);
                    x.extend(noise);
                    SyntheticSample {
                        latent: domain.shift.apply(&x),
                        identity: id,
                        outfit,
                        domain: index,
                        state,
                    }
                })
                .collect();
            self.identities.push(Identity { id, core });
            if is_train {
                domain.train_identities.push(id);
                let start = domain.train.len();
                domain.train_groups.push((start..start + samples.len()).collect());
                domain.train.extend(samples);
            } else {
                domain.eval_identities.push(id);
                domain.eval.extend(samples);
            }
        }
        self.domains.push(domain);
    }

    pub fn domain(&self, name: &str) -> Option<&Domain> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn seen_domains(&self) -> impl Iterator<Item = &Domain> {
        self.domains.iter().filter(|d| !d.heldout)
    }

    pub fn heldout_domains(&self) -> impl Iterator<Item = &Domain> {
        self.domains.iter().filter(|d| d.heldout)
    }

    /// Renders an identity through another domain's shift with a chosen outfit code.
    pub fn render(&self, identity: u32, outfit_code: &[f64], domain: usize, rng: &mut StreamRng) -> Vec<f64> {
        let mut x = self.identities[identity as usize].core.clone();
        x.extend_from_slice(outfit_code);
        x.extend(gaussian(rng, self.config.noise_dim, self.config.pose_noise));
        self.domains[domain].shift.apply(&x)
    }

    /// Ambiguous analysis samples: 50/50 interpolations of SC and CC evaluation latents.
    pub fn mixed_latents(&self, count: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
        let sc: Vec<&SyntheticSample> = self
            .seen_domains()
            .filter(|d| d.state_kind == ClothingState::SC)
            .flat_map(|d| &d.eval)
            .collect();
        let cc: Vec<&SyntheticSample> = self
            .seen_domains()
            .filter(|d| d.state_kind == ClothingState::CC)
            .flat_map(|d| &d.eval)
            .collect();
        (0..count)
            .map(|_| {
                let a = sc[rng.random_range(0..sc.len())];
                let b = cc[rng.random_range(0..cc.len())];
                a.latent.iter().zip(&b.latent).map(|(x, y)| 0.5 * (x + y)).collect()
            })
            .collect()
    }

    pub fn descriptor(&self) -> WorldDescriptor {
        WorldDescriptor {
            schema_version: WORLD_SCHEMA_VERSION,
            seed: self.seed,
            latent_dim: self.config.latent_dim(),
            config: self.config.clone(),
            domains: self
                .domains
                .iter()
                .map(|d| DomainInfo {
                    name: d.name.clone(),
                    state: d.state_kind,
                    heldout: d.heldout,
                    noise: d.noise,
                    train_identities: d.train_identities.len(),
                    eval_identities: d.eval_identities.len(),
                    train_samples: d.train.len(),
                    eval_samples: d.eval.len(),
                    first_identity: d
                        .train_identities
                        .first()
                        .or(d.eval_identities.first())
                        .copied()
                        .unwrap_or(0),
                })
                .collect(),
        }
    }
}

/// Batch of latents with their labels, as consumed by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub latents: Matrix,
    pub identities: Vec<u32>,
    pub outfits: Vec<u32>,
    pub states: Vec<ClothingState>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a SyntheticSample>) -> Batch {
        let mut rows = Vec::new();
        let mut identities = Vec::new();
        let mut outfits = Vec::new();
        let mut states = Vec::new();
        for s in samples {
            rows.push(s.latent.clone());
            identities.push(s.identity);
            outfits.push(s.outfit);
            states.push(s.state);
        }
        let latents = if rows.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&rows).expect("latents share a width")
        };
        Batch {
            latents,
            identities,
            outfits,
            states,
        }
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn distinct_identities(&self) -> usize {
        let mut ids = self.identities.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Draws `p` distinct training identities and `k` images of each.
pub fn sample_pk_batch(domain: &Domain, p: usize, k: usize, rng: &mut StreamRng) -> Result<Batch> {
    if p < 2 {
        return Err(Error::Protocol(format!("PK batch needs at least two identities, got P={p}")));
    }
    if k == 0 {
        return Err(Error::Protocol("PK batch needs K >= 1".into()));
    }
    let pool = domain.train_pool();
    if p > pool {
        return Err(Error::Pool { pool, requested: p });
    }
    let mut picked = Vec::with_capacity(p * k);
    for g in sample(rng, pool, p).into_iter() {
        let group = &domain.train_groups[g];
        if k <= group.len() {
            picked.extend(sample(rng, group.len(), k).into_iter().map(|i| group[i]));
        } else {
            picked.extend((0..k).map(|_| group[rng.random_range(0..group.len())]));
        }
    }
    Ok(Batch::from_samples(picked.into_iter().map(|i| &domain.train[i])))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSplit {
    pub query: Vec<SyntheticSample>,
    pub gallery: Vec<SyntheticSample>,
}

/// Query/gallery split of a domain's evaluation identities.
///
/// SC: the first two images of each identity are queries. CC: queries are up
/// to two images wearing the identity's first observed outfit, and the gallery
/// keeps only that identity's images in other outfits.
pub fn eval_split(domain: &Domain) -> Result<EvalSplit> {
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for &id in &domain.eval_identities {
        let images: Vec<&SyntheticSample> = domain.eval.iter().filter(|s| s.identity == id).collect();
        if images.len() < 2 {
            return Err(Error::Protocol(format!(
                "identity {id} in {} has fewer than two images",
                domain.name
            )));
        }
        match domain.state_kind {
            ClothingState::SC => {
                query.extend(images[..2].iter().map(|s| (*s).clone()));
                gallery.extend(images[2..].iter().map(|s| (*s).clone()));
            }
            ClothingState::CC => {
                let q_outfit = images[0].outfit;
                let same: Vec<_> = images.iter().filter(|s| s.outfit == q_outfit).take(2).collect();
                let other: Vec<_> = images.iter().filter(|s| s.outfit != q_outfit).collect();
                if other.is_empty() {
                    return Err(Error::Protocol(format!(
                        "identity {id} in {} wears a single outfit; cloth-changing split impossible",
                        domain.name
                    )));
                }
                query.extend(same.into_iter().map(|s| (**s).clone()));
                gallery.extend(other.into_iter().map(|s| (*s).clone()));
            }
        }
    }
    if query.is_empty() {
        return Err(Error::Protocol(format!("{} has no evaluation identities", domain.name)));
    }
    Ok(EvalSplit { query, gallery })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningOrder {
    pub id: usize,
    pub domains: Vec<String>,
}

/// The six learning orders, with SC1/CC1/SC2/CC2 standing in positionally for
/// Market-1501, LTCC, MSMT17 and PRCC.
pub fn builtin_orders() -> Vec<LearningOrder> {
    let table: [[&str; 4]; 6] = [
        ["SC1", "CC1", "SC2", "CC2"],
        ["CC1", "SC1", "CC2", "SC2"],
        ["SC1", "CC2", "SC2", "CC1"],
        ["CC2", "SC2", "CC1", "SC1"],
        ["SC1", "SC2", "CC1", "CC2"],
        ["CC1", "CC2", "SC1", "SC2"],
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, row)| LearningOrder {
            id: i + 1,
            domains: row.iter().map(|s| s.to_string()).collect(),
        })
        .collect()
}

pub fn builtin_order(id: usize) -> Result<LearningOrder> {
    builtin_orders()
        .into_iter()
        .find(|o| o.id == id)
        .ok_or_else(|| Error::Config(vec![format!("order must be in 1..=6, got {id}")]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainInfo {
    pub name: String,
    pub state: ClothingState,
    pub heldout: bool,
    pub noise: f64,
    pub train_identities: usize,
    pub eval_identities: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub first_identity: u32,
}

/// Schema-versioned description sufficient to regenerate a world bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldDescriptor {
    pub schema_version: u32,
    pub seed: u64,
    pub latent_dim: usize,
    pub config: WorldConfig,
    pub domains: Vec<DomainInfo>,
}

impl WorldDescriptor {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("descriptor serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let desc: WorldDescriptor = toml::from_str(text).map_err(|e| Error::Corrupt {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            reason: e.message().to_string(),
        })?;
        if desc.schema_version != WORLD_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: desc.schema_version,
                expected: WORLD_SCHEMA_VERSION,
            });
        }
        Ok(desc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the world and checks it against the recorded domain metadata.
    pub fn regenerate(&self) -> Result<World> {
        let world = World::build_with(self.seed, self.config.clone());
        if world.descriptor().domains != self.domains {
            return Err(Error::Contract("regenerated world does not match descriptor".into()));
        }
        Ok(world)
    }
}
