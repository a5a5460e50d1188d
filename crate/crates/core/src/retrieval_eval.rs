//! Ranked retrieval metrics and before/after attack evaluation.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::attack::{attack, AttackBudget, MaskSource};
use crate::dataset::{Image, Sample};
use crate::error::{Error, Result};
use crate::nets::{embed_images, Embedder, Generator};

/// Query x gallery Euclidean distances with identity and camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DistMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    pub q_ids: Vec<usize>,
    pub g_ids: Vec<usize>,
    pub q_cams: Option<Vec<usize>>,
    pub g_cams: Option<Vec<usize>>,
}

impl DistMatrix {
    /// Build from row-major values. Labels default to zeros until set.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols} values"),
                got: format!("{}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "distances must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            values,
            rows,
            cols,
            q_ids: vec![0; rows],
            g_ids: vec![0; cols],
            q_cams: None,
            g_cams: None,
        })
    }

    pub fn with_labels(mut self, q_ids: Vec<usize>, g_ids: Vec<usize>) -> Result<Self> {
        if q_ids.len() != self.rows || g_ids.len() != self.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} query and {} gallery labels", self.rows, self.cols),
                got: format!("{} and {}", q_ids.len(), g_ids.len()),
            });
        }
        self.q_ids = q_ids;
        self.g_ids = g_ids;
        Ok(self)
    }

    pub fn with_cameras(mut self, q_cams: Vec<usize>, g_cams: Vec<usize>) -> Result<Self> {
        if q_cams.len() != self.rows || g_cams.len() != self.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} query and {} gallery cameras", self.rows, self.cols),
                got: format!("{} and {}", q_cams.len(), g_cams.len()),
            });
        }
        self.q_cams = Some(q_cams);
        self.g_cams = Some(g_cams);
        Ok(self)
    }

    pub fn num_queries(&self) -> usize {
        self.rows
    }

    pub fn num_gallery(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values[q * self.cols + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.cols..(q + 1) * self.cols]
    }

    /// Gallery indices for query `q` in ranked order, after camera filtering.
    /// Each entry carries whether it is a true match.
    pub fn ranking(&self, q: usize, cam_filter: bool) -> Vec<(usize, bool)> {
        let qid = self.q_ids[q];
        let qcam = self.q_cams.as_ref().map(|c| c[q]);
        let mut order: Vec<usize> = (0..self.cols)
            .filter(|&g| {
                !(cam_filter
                    && self.g_ids[g] == qid
                    && qcam.is_some()
                    && self.g_cams.as_ref().map(|c| c[g]) == qcam)
            })
            .collect();
        let row = self.row(q);
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        order.into_iter().map(|g| (g, self.g_ids[g] == qid)).collect()
    }
}

/// Euclidean distances via `|q|^2 + |g|^2 - 2 q.g`, clamped at zero.
pub fn pairwise_distances(qf: &[Vec<f32>], gf: &[Vec<f32>]) -> Result<DistMatrix> {
    let d = qf.first().or(gf.first()).map(|v| v.len()).unwrap_or(0);
    if qf.iter().chain(gf).any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: format!("feature dimension {d}"),
            got: "mixed feature dimensions".into(),
        });
    }
    let sq = |v: &Vec<f32>| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
    let qn: Vec<f64> = qf.iter().map(sq).collect();
    let gn: Vec<f64> = gf.iter().map(sq).collect();
    let mut values = Vec::with_capacity(qf.len() * gf.len());
    for (q, qv) in qf.iter().enumerate() {
        for (g, gv) in gf.iter().enumerate() {
            let dot: f64 = qv.iter().zip(gv).map(|(&a, &b)| a as f64 * b as f64).sum();
            values.push((qn[q] + gn[g] - 2.0 * dot).max(0.0).sqrt());
        }
    }
    DistMatrix::from_values(qf.len(), gf.len(), values)
}

/// A metric averaged over the queries that have at least one relevant item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

fn average(per_query: impl Iterator<Item = Option<f64>>) -> Result<Metric> {
    let (mut sum, mut evaluated, mut excluded) = (0.0, 0usize, 0usize);
    for v in per_query {
        match v {
            Some(v) => {
                sum += v;
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::InvalidArgument(
            "no query has a relevant gallery item".into(),
        ));
    }
    Ok(Metric {
        value: sum / evaluated as f64,
        evaluated,
        excluded,
    })
}

pub fn cmc_rank_k(dm: &DistMatrix, k: usize, cam_filter: bool) -> Result<Metric> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    average((0..dm.num_queries()).map(|q| {
        let ranked = dm.ranking(q, cam_filter);
        let first = ranked.iter().position(|&(_, hit)| hit)?;
        Some(if first < k { 1.0 } else { 0.0 })
    }))
}

/// Average precision of one ranked hit list, `None` without relevant items.
pub fn average_precision(hits: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut total = 0.0;
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            found += 1;
            total += found as f64 / (rank + 1) as f64;
        }
    }
    (found > 0).then(|| total / found as f64)
}

pub fn mean_average_precision(dm: &DistMatrix, cam_filter: bool) -> Result<Metric> {
    average((0..dm.num_queries()).map(|q| {
        let hits: Vec<bool> = dm.ranking(q, cam_filter).into_iter().map(|(_, h)| h).collect();
        average_precision(&hits)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub r1: f64,
    pub r10: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

pub fn retrieval_metrics(dm: &DistMatrix, cam_filter: bool) -> Result<RetrievalMetrics> {
    let map = mean_average_precision(dm, cam_filter)?;
    let r1 = cmc_rank_k(dm, 1, cam_filter)?;
    let r10 = cmc_rank_k(dm, 10, cam_filter)?;
    Ok(RetrievalMetrics {
        map: map.value,
        r1: r1.value,
        r10: r10.value,
        evaluated: map.evaluated,
        excluded: map.excluded,
    })
}

/// One target model x dataset cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_model: String,
    pub dataset: String,
    #[serde(rename = "mAP_before")]
    pub map_before: f64,
    pub r1_before: f64,
    pub r10_before: f64,
    #[serde(rename = "mAP_after", skip_serializing_if = "Option::is_none", default)]
    pub map_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r1_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r10_after: Option<f64>,
    pub config_hash: String,
    pub timestamp: u64,
    pub queries: usize,
    pub excluded_queries: usize,
}

impl EvalReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Relative R-1 drop `1 - after / before`; `None` without an attack.
    pub fn r1_drop(&self) -> Option<f64> {
        let after = self.r1_after?;
        (self.r1_before > 0.0).then(|| 1.0 - after / self.r1_before)
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Fixed-width table with metrics rendered as percentages.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<20} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "target", "dataset", "mAP", "R-1", "R-10", "mAP adv", "R-1 adv", "R-10 adv"
    );
    for r in reports {
        let after = |v: Option<f64>| v.map(pct).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<16} {:<20} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            r.target_model,
            r.dataset,
            pct(r.map_before),
            pct(r.r1_before),
            pct(r.r10_before),
            after(r.map_after),
            after(r.r1_after),
            after(r.r10_after),
        );
    }
    out
}

/// The attack applied to queries.
pub struct QueryAttack<'a> {
    pub generator: &'a Generator,
    pub budget: AttackBudget,
    pub mask: Option<MaskSource<'a>>,
}

/// Everything computed by [`evaluate_attack`], for figures and inspection.
pub struct EvalOutcome {
    pub report: EvalReport,
    pub before: DistMatrix,
    pub after: Option<DistMatrix>,
    pub attacked_queries: Vec<Image>,
}

fn labels(samples: &[&Sample], what: &str) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    let ids = samples
        .iter()
        .map(|s| s.identity)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Dataset(format!("{what} images need identity labels")))?;
    let cams = samples.iter().map(|s| s.camera).collect::<Option<Vec<_>>>();
    Ok((ids, cams))
}

fn labelled(
    dm: DistMatrix,
    q: &(Vec<usize>, Option<Vec<usize>>),
    g: &(Vec<usize>, Option<Vec<usize>>),
) -> Result<DistMatrix> {
    let dm = dm.with_labels(q.0.clone(), g.0.clone())?;
    match (&q.1, &g.1) {
        (Some(qc), Some(gc)) => dm.with_cameras(qc.clone(), gc.clone()),
        _ => Ok(dm),
    }
}

const ATTACK_CHUNK: usize = 32;

/// Clean versus attacked retrieval for one target model. Only queries are
/// attacked; the gallery is always clean.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_attack(
    target: &dyn Embedder,
    attack_spec: Option<&QueryAttack<'_>>,
    query: &[&Sample],
    gallery: &[&Sample],
    dataset_name: &str,
    cam_filter: bool,
    config_hash: &str,
) -> Result<EvalOutcome> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Dataset("query and gallery must be non-empty".into()));
    }
    let ql = labels(query, "query")?;
    let gl = labels(gallery, "gallery")?;
    let q_images: Vec<&Image> = query.iter().map(|s| &s.image).collect();
    let g_images: Vec<&Image> = gallery.iter().map(|s| &s.image).collect();
    let gf = embed_images(target, &g_images, 64)?;
    let qf = embed_images(target, &q_images, 64)?;
    let before = labelled(pairwise_distances(&qf, &gf)?, &ql, &gl)?;
    let mb = retrieval_metrics(&before, cam_filter)?;

    let mut after = None;
    let mut ma = None;
    let mut attacked_queries = Vec::new();
    if let Some(spec) = attack_spec {
        for chunk in q_images.chunks(ATTACK_CHUNK) {
            let x = Image::stack(chunk, &Device::Cpu)?;
            let adv = attack(spec.generator, &x, &spec.budget, spec.mask.as_ref())?;
            attacked_queries.extend(Image::unstack(&adv)?);
        }
        let refs: Vec<&Image> = attacked_queries.iter().collect();
        let af = embed_images(target, &refs, 64)?;
        let dm = labelled(pairwise_distances(&af, &gf)?, &ql, &gl)?;
        ma = Some(retrieval_metrics(&dm, cam_filter)?);
        after = Some(dm);
    }
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let report = EvalReport {
        target_model: target.name().to_string(),
        dataset: dataset_name.to_string(),
        map_before: mb.map,
        r1_before: mb.r1,
        r10_before: mb.r10,
        map_after: ma.map(|m| m.map),
        r1_after: ma.map(|m| m.r1),
        r10_after: ma.map(|m| m.r10),
        config_hash: config_hash.to_string(),
        timestamp,
        queries: query.len(),
        excluded_queries: mb.excluded,
    };
    Ok(EvalOutcome {
        report,
        before,
        after,
        attacked_queries,
    })
}

pub const BLUE: [u8; 3] = [30, 90, 255];
pub const GREEN: [u8; 3] = [0, 190, 60];
pub const RED: [u8; 3] = [230, 30, 30];
const BORDER: u32 = 2;
const GAP: u32 = 4;

/// Writes a strip: the query in a blue frame, then its top-`k` gallery images
/// framed green (same identity) or red. Returns the match flags.
pub fn render_retrieval_grid(
    query: &Image,
    query_id: usize,
    dm_row: &[f64],
    gallery: &[&Sample],
    k: usize,
    out_path: &Path,
) -> Result<Vec<bool>> {
    if k == 0 || k > gallery.len() || dm_row.len() != gallery.len() {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= gallery size ({}), got k = {k} with {} distances",
            gallery.len(),
            dm_row.len()
        )));
    }
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dm_row[a].total_cmp(&dm_row[b]).then(a.cmp(&b)));
    let (_, h, w) = query.shape();
    let (cw, ch) = (w as u32 + 2 * BORDER, h as u32 + 2 * BORDER);
    let total_w = (k as u32 + 1) * cw + k as u32 * GAP + GAP;
    let mut canvas = image::RgbImage::from_pixel(total_w, ch, image::Rgb([255, 255, 255]));

    let mut draw = |img: &Image, x0: u32, color: [u8; 3]| {
        for y in 0..ch {
            for x in 0..cw {
                let inner = x >= BORDER && y >= BORDER && x < cw - BORDER && y < ch - BORDER;
                let px = if inner {
                    let (ix, iy) = ((x - BORDER) as usize, (y - BORDER) as usize);
                    let c = |k: usize| {
                        let k = k.min(img.channels() - 1);
                        (img.get(k, iy, ix).clamp(0.0, 1.0) * 255.0).round() as u8
                    };
                    [c(0), c(1), c(2)]
                } else {
                    color
                };
                canvas.put_pixel(x0 + x, y, image::Rgb(px));
            }
        }
    };
    draw(query, 0, BLUE);
    let mut matches = Vec::with_capacity(k);
    for (slot, &g) in order.iter().take(k).enumerate() {
        let hit = gallery[g].identity == Some(query_id);
        let x0 = cw + GAP + slot as u32 * (cw + GAP) + GAP;
        draw(&gallery[g].image, x0, if hit { GREEN } else { RED });
        matches.push(hit);
    }
    canvas.save(out_path)?;
    Ok(matches)
}
