use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::akfp::project;
use crate::casp::concept_tokens;
use crate::model::Model;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, norm, Matrix};
use crate::rng::Streams;
use crate::world::{eval_split, Batch, ClothingState, Domain, SyntheticSample, World};

/// Gallery ranking for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query: usize,
    /// Gallery indices in descending similarity; ties by ascending index.
    pub order: Vec<usize>,
    /// Relevance of each entry of `order`.
    pub relevant: Vec<bool>,
}

impl RankingResult {
    pub fn relevant_count(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

pub fn average_precision(ranking: &RankingResult) -> Result<f64> {
    let total = ranking.relevant_count();
    if total == 0 {
        return Err(Error::Protocol(format!("query {} has no relevant gallery item", ranking.query)));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in ranking.relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = norm(out.row(r));
        if n > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Ranks the gallery for each query by cosine similarity.
///
/// Under the cloth-changing protocol gallery entries sharing both identity
/// and outfit with the query are removed before ranking.
pub fn rank_gallery(
    query_feats: &Matrix,
    query: &[SyntheticSample],
    gallery_feats: &Matrix,
    gallery: &[SyntheticSample],
    protocol: ClothingState,
) -> Result<Vec<RankingResult>> {
    if query_feats.rows() != query.len() || gallery_feats.rows() != gallery.len() {
        return Err(Error::dim(
            "rank_gallery",
            (query_feats.rows(), gallery_feats.rows()),
            (query.len(), gallery.len()),
        ));
    }
    let q = unit_rows(query_feats);
    let g = unit_rows(gallery_feats);
    let sims = q.matmul_t(&g)?;
    let mut out = Vec::with_capacity(query.len());
    for (qi, qs) in query.iter().enumerate() {
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&gi| {
                protocol == ClothingState::SC
                    || !(gallery[gi].identity == qs.identity && gallery[gi].outfit == qs.outfit)
            })
            .collect();
        let row = sims.row(qi);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        let relevant = order.iter().map(|&gi| gallery[gi].identity == qs.identity).collect();
        out.push(RankingResult {
            query: qi,
            order,
            relevant,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub map: f64,
    pub rank1: f64,
    pub valid_queries: usize,
}

/// mAP and Rank-1 in percent; queries without any relevant item are skipped.
pub fn scores_from_rankings(rankings: &[RankingResult]) -> Result<Scores> {
    if rankings.is_empty() {
        return Err(Error::Protocol("empty query set".into()));
    }
    let mut ap = 0.0;
    let mut top1 = 0usize;
    let mut valid = 0usize;
    for r in rankings.iter().filter(|r| r.relevant_count() > 0) {
        ap += average_precision(r)?;
        top1 += r.relevant[0] as usize;
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Protocol("no query has a relevant gallery item".into()));
    }
    Ok(Scores {
        map: 100.0 * ap / valid as f64,
        rank1: 100.0 * top1 as f64 / valid as f64,
        valid_queries: valid,
    })
}

pub fn map_and_rank1<F>(query: &[SyntheticSample], gallery: &[SyntheticSample], protocol: ClothingState, encoder: F) -> Result<Scores>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if query.is_empty() {
        return Err(Error::Protocol("empty query set".into()));
    }
    let qf = encoder(&Batch::from_samples(query).latents)?;
    let gf = encoder(&Batch::from_samples(gallery).latents)?;
    scores_from_rankings(&rank_gallery(&qf, query, &gf, gallery, protocol)?)
}

pub fn evaluate_domain(model: &Model, domain: &Domain) -> Result<Scores> {
    let split = eval_split(domain)?;
    map_and_rank1(&split.query, &split.gallery, domain.state_kind, |x| model.encode(x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub domain: String,
    pub state: ClothingState,
    pub map: f64,
    pub rank1: f64,
}

/// Row `t` holds the scores of every seen domain after training task `t`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeenDomainMatrix {
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Average {
    pub map: f64,
    pub rank1: f64,
}

impl SeenDomainMatrix {
    pub fn push_row(&mut self, row: Vec<Cell>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::Contract(format!("row {expected} must hold {expected} cells, got {}", row.len())));
        }
        if let Some(prev) = self.rows.last() {
            if prev.iter().zip(&row).any(|(a, b)| a.domain != b.domain) {
                return Err(Error::Contract("matrix rows disagree on domain order".into()));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn final_row(&self) -> Option<&[Cell]> {
        self.rows.last().map(Vec::as_slice)
    }

    fn average_where(&self, keep: impl Fn(&Cell) -> bool) -> Option<Average> {
        let cells: Vec<&Cell> = self.final_row()?.iter().filter(|c| keep(c)).collect();
        if cells.is_empty() {
            return None;
        }
        let n = cells.len() as f64;
        Some(Average {
            map: cells.iter().map(|c| c.map).sum::<f64>() / n,
            rank1: cells.iter().map(|c| c.rank1).sum::<f64>() / n,
        })
    }

    pub fn sc_average(&self) -> Option<Average> {
        self.average_where(|c| c.state == ClothingState::SC)
    }

    pub fn cc_average(&self) -> Option<Average> {
        self.average_where(|c| c.state == ClothingState::CC)
    }

    pub fn total_average(&self) -> Option<Average> {
        self.average_where(|_| true)
    }

    /// Columns `after_task,eval_domain,mAP,rank1`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task,eval_domain,mAP,rank1\n");
        for (t, row) in self.rows.iter().enumerate() {
            for c in row {
                let _ = writeln!(s, "{},{},{:.4},{:.4}", t + 1, c.domain, c.map, c.rank1);
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forgetting {
    pub domain: String,
    pub best: f64,
    pub last: f64,
    pub drop: f64,
}

pub fn forgetting_report(matrix: &SeenDomainMatrix) -> Vec<Forgetting> {
    let Some(last) = matrix.final_row() else {
        return Vec::new();
    };
    last.iter()
        .enumerate()
        .map(|(d, cell)| {
            let best = matrix
                .rows
                .iter()
                .filter_map(|row| row.get(d))
                .map(|c| c.map)
                .fold(f64::NEG_INFINITY, f64::max);
            Forgetting {
                domain: cell.domain.clone(),
                best,
                last: cell.map,
                drop: best - cell.map,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SourceCategory {
    Sc,
    Cc,
    Mixed,
}

impl SourceCategory {
    pub const ALL: [SourceCategory; 3] = [SourceCategory::Sc, SourceCategory::Cc, SourceCategory::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceCategory::Sc => "SC",
            SourceCategory::Cc => "CC",
            SourceCategory::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distances {
    pub intra: f64,
    pub inter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    /// State accuracy of ŝ on SC and CC evaluation samples.
    pub state_accuracy: [f64; 2],
    pub state_accuracy_mean: f64,
    /// Mean `(ŝ_SC, ŝ_CC)` per source category (SC, CC, mixed).
    pub mean_weights: [[f64; 2]; 3],
    /// Cosine distances in `f_proj` space, indexed by state.
    pub distances: [Distances; 2],
    /// Mean cosine similarity of `e_T` to the (SC, CC) concept embedding per source category.
    pub concept_similarity: [[f64; 2]; 3],
}

impl AnalysisReport {
    pub fn long_format(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for s in ClothingState::ALL {
            out.push(("state_accuracy".into(), s.to_string(), self.state_accuracy[s.index()]));
        }
        out.push(("state_accuracy".into(), "average".into(), self.state_accuracy_mean));
        for (k, cat) in SourceCategory::ALL.iter().enumerate() {
            out.push(("mean_s_sc".into(), cat.as_str().into(), self.mean_weights[k][0]));
            out.push(("mean_s_cc".into(), cat.as_str().into(), self.mean_weights[k][1]));
            out.push(("concept_sim_sc".into(), cat.as_str().into(), self.concept_similarity[k][0]));
            out.push(("concept_sim_cc".into(), cat.as_str().into(), self.concept_similarity[k][1]));
        }
        for s in ClothingState::ALL {
            out.push(("intra_distance".into(), s.to_string(), self.distances[s.index()].intra));
            out.push(("inter_distance".into(), s.to_string(), self.distances[s.index()].inter));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,category,value\n");
        for (m, c, v) in self.long_format() {
            let _ = writeln!(s, "{m},{c},{v:.4}");
        }
        s
    }
}

/// Mean cosine distance between same-identity and different-identity pairs.
/// Identities with a single sample contribute no intra pairs.
pub fn class_distances(features: &Matrix, identities: &[u32]) -> Result<Distances> {
    let u = unit_rows(features);
    let sims = u.matmul_t(&u)?;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..identities.len() {
        for j in i + 1..identities.len() {
            let d = 1.0 - sims.get(i, j);
            if identities[i] == identities[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(Distances {
        intra: mean(intra, n_intra),
        inter: mean(inter, n_inter),
    })
}

/// Number of tokens in each concept set.
pub const CONCEPT_TOKENS: usize = 6;
pub const MIXED_SAMPLES: usize = 200;

pub fn mechanism_analyses(model: &Model, world: &World) -> Result<AnalysisReport> {
    let streams = Streams::new(world.seed);
    let samples: Vec<&SyntheticSample> = world.domains.iter().flat_map(|d| &d.eval).collect();
    let batch = Batch::from_samples(samples.iter().copied());
    let mixed = world.mixed_latents(MIXED_SAMPLES, &mut streams.stream("analysis/mixed"));
    let mixed = Matrix::from_rows(&mixed)?;

    let concepts = [
        model.text.encode_tokens(&concept_tokens(CONCEPT_TOKENS, &mut streams.stream("analysis/concept/SC")))?,
        model.text.encode_tokens(&concept_tokens(CONCEPT_TOKENS, &mut streams.stream("analysis/concept/CC")))?,
    ];

    let fv = model.encode(&batch.latents)?;
    let s_hat = model.heads.classifier.classify(&fv)?;
    let fv_mixed = model.encode(&mixed)?;
    let s_mixed = model.heads.classifier.classify(&fv_mixed)?;
    let (e_t, _) = model.casp.embed(&model.text, &fv)?;
    let (e_mixed, _) = model.casp.embed(&model.text, &fv_mixed)?;

    let mut correct = [0usize; 2];
    let mut count = [0usize; 2];
    let mut weights = [[0.0; 2]; 3];
    let mut concept = [[0.0; 2]; 3];
    for (i, &state) in batch.states.iter().enumerate() {
        let k = state.index();
        let predicted = if s_hat.get(i, 0) >= s_hat.get(i, 1) { 0 } else { 1 };
        correct[k] += (predicted == k) as usize;
        count[k] += 1;
        weights[k][0] += s_hat.get(i, 0);
        weights[k][1] += s_hat.get(i, 1);
        for (c, v) in concepts.iter().enumerate() {
            concept[k][c] += cosine_similarity(e_t.row(i), v)?;
        }
    }
    for i in 0..mixed.rows() {
        weights[2][0] += s_mixed.get(i, 0);
        weights[2][1] += s_mixed.get(i, 1);
        for (c, v) in concepts.iter().enumerate() {
            concept[2][c] += cosine_similarity(e_mixed.row(i), v)?;
        }
    }
    let counts = [count[0], count[1], mixed.rows()];
    for k in 0..3 {
        for c in 0..2 {
            weights[k][c] /= counts[k] as f64;
            concept[k][c] /= counts[k] as f64;
        }
    }
    let state_accuracy = [
        correct[0] as f64 / count[0] as f64,
        correct[1] as f64 / count[1] as f64,
    ];

    let fproj = project(&fv, &s_hat, &model.heads.projection)?;
    let mut distances = [Distances { intra: 0.0, inter: 0.0 }; 2];
    for state in ClothingState::ALL {
        let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.states[i] == state).collect();
        let ids: Vec<u32> = rows.iter().map(|&i| batch.identities[i]).collect();
        distances[state.index()] = class_distances(&fproj.select_rows(&rows), &ids)?;
    }

    Ok(AnalysisReport {
        state_accuracy,
        state_accuracy_mean: 0.5 * (state_accuracy[0] + state_accuracy[1]),
        mean_weights: weights,
        distances,
        concept_similarity: concept,
    })
}
