//! Cosine-similarity retrieval with mAP and CMC scoring.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RankingMetrics {
    pub map: f64,
    /// `cmc[r - 1]` is the fraction of probes with a match in the top `r`.
    pub cmc: Vec<f64>,
    /// Probes without any relevant gallery item; excluded from the averages.
    pub skipped_probes: usize,
}

impl RankingMetrics {
    /// CMC at rank `r` (1-based); ranks beyond the curve use its last value.
    pub fn cmc_at(&self, r: usize) -> f64 {
        assert!(r >= 1);
        self.cmc.get(r - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn rank1(&self) -> f64 {
        self.cmc_at(1)
    }

    /// `mAP  cmc@1  cmc@5  cmc@10`, tab separated, with a header line.
    pub fn report(&self) -> String {
        format!(
            "mAP\tcmc@1\tcmc@5\tcmc@10\n{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.map,
            self.cmc_at(1),
            self.cmc_at(5),
            self.cmc_at(10)
        )
    }
}

fn row_norms(x: &Tensor, set: &'static str) -> Result<Vec<f64>> {
    let d = x.shape()[1];
    x.data()
        .chunks(d)
        .enumerate()
        .map(|(row, v)| {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::ZeroNorm { set, row })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Cosine similarity matrix `[probes, gallery]`.
pub fn cosine_similarity(probe: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if probe.rank() != 2 || gallery.rank() != 2 || probe.shape()[1] != gallery.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: probe.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let d = probe.shape()[1];
    let (pn, gn) = (row_norms(probe, "probe")?, row_norms(gallery, "gallery")?);
    let (p, g) = (probe.shape()[0], gallery.shape()[0]);
    let mut out = vec![0.0; p * g];
    for i in 0..p {
        let pv = &probe.data()[i * d..(i + 1) * d];
        for j in 0..g {
            let gv = &gallery.data()[j * d..(j + 1) * d];
            let dot: f64 = pv.iter().zip(gv).map(|(a, b)| a * b).sum();
            out[i * g + j] = dot / (pn[i] * gn[j]);
        }
    }
    Tensor::new(vec![p, g], out)
}

/// Gallery indices per probe, by descending cosine similarity; exact ties
/// go to the lower gallery index.
pub fn rank_gallery(probe: &Tensor, gallery: &Tensor) -> Result<Vec<Vec<usize>>> {
    let sim = cosine_similarity(probe, gallery)?;
    let g = gallery.shape()[0];
    Ok(sim
        .data()
        .chunks(g)
        .map(|row| {
            let mut order: Vec<usize> = (0..g).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// mAP and CMC over `max_rank` ranks. `junk(probe, gallery)` marks gallery
/// items to drop from a probe's ranking (e.g. same-camera matches).
pub fn compute_metrics(
    rankings: &[Vec<usize>],
    probe_labels: &[usize],
    gallery_labels: &[usize],
    max_rank: usize,
    junk: Option<&dyn Fn(usize, usize) -> bool>,
) -> Result<RankingMetrics> {
    if rankings.len() != probe_labels.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            lhs: vec![rankings.len()],
            rhs: vec![probe_labels.len()],
        });
    }
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be >= 1".into()));
    }
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; max_rank];
    let mut valid = 0usize;
    for (probe, (ranking, &label)) in rankings.iter().zip(probe_labels).enumerate() {
        let kept = ranking.iter().filter(|&&g| !junk.is_some_and(|f| f(probe, g)));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit: Option<usize> = None;
        for (pos, &g) in kept.enumerate() {
            if gallery_labels[g] == label {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos);
            }
        }
        let Some(first) = first_hit else { continue };
        valid += 1;
        ap_sum += precision_sum / found as f64;
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    let skipped = rankings.len() - valid;
    let denom = valid.max(1) as f64;
    Ok(RankingMetrics {
        map: if valid == 0 { 0.0 } else { ap_sum / denom },
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        skipped_probes: skipped,
    })
}

/// Ranks and scores in one call.
pub fn evaluate(
    probe: &Tensor,
    probe_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    max_rank: usize,
) -> Result<RankingMetrics> {
    if gallery.shape()[0] != gallery_labels.len() {
        return Err(Error::ShapeMismatch {
            op: "gallery labels",
            lhs: vec![gallery.shape()[0]],
            rhs: vec![gallery_labels.len()],
        });
    }
    let rankings = rank_gallery(probe, gallery)?;
    compute_metrics(&rankings, probe_labels, gallery_labels, max_rank, None)
}
