//! Retrieval-based expansion of the street-view training pool.
//!
//! Each original street image (the anchor) retrieves the most similar half
//! of an auxiliary candidate pool under a frozen feature extractor; the
//! selected candidates join the training set as street samples carrying the
//! anchor's location label.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, Source, View};
use crate::error::{Error, Result};
use crate::imageio::PixelImage;

/// Deterministic global feature extractor used only for candidate ranking;
/// never trained.
pub trait FrozenExtractor {
    /// Raw (not yet normalized) global descriptor.
    fn extract(&self, image: &PixelImage) -> Result<Vec<f64>>;
    /// Stable identifier for logs and cache keys.
    fn name(&self) -> &'static str;
}

/// Grid mean-pool extractor: the image is divided into `grid × grid` cells
/// and each cell's per-channel mean is taken, cell-major then channel.
/// Serves as the desk-scale stand-in for a pretrained network.
#[derive(Debug, Clone, Copy)]
pub struct MeanPoolExtractor {
    pub grid: usize,
}

impl Default for MeanPoolExtractor {
    fn default() -> Self {
        MeanPoolExtractor { grid: 4 }
    }
}

impl FrozenExtractor for MeanPoolExtractor {
    fn extract(&self, image: &PixelImage) -> Result<Vec<f64>> {
        let (h, w, g) = (image.height(), image.width(), self.grid);
        if h < g || w < g {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} smaller than pooling grid {g}x{g}"
            )));
        }
        let mut feature = Vec::with_capacity(g * g * 3);
        for gy in 0..g {
            let y0 = gy * h / g;
            let y1 = (gy + 1) * h / g;
            for gx in 0..g {
                let x0 = gx * w / g;
                let x1 = (gx + 1) * w / g;
                for c in 0..3 {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += image.data[[y, x, c]];
                        }
                    }
                    feature.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(feature)
    }

    fn name(&self) -> &'static str {
        "mean_pool"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    OriginalStreet,
    Auxiliary,
}

/// L2-normalized descriptor of one candidate image.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFeature {
    pub image_id: String,
    pub feature: Vec<f64>,
    pub pool: PoolKind,
}

impl CandidateFeature {
    pub fn validate(&self) -> Result<()> {
        let norm = l2_norm(&self.feature);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized(format!(
                "candidate {}: feature norm {norm}",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Selection outcome for one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GremAssignment {
    pub anchor_image_id: String,
    /// (candidate_image_id, cosine score), score-descending.
    pub selected: Vec<(String, f64)>,
    pub inherit_location: String,
}

/// Raw vs. deduplicated selection counts across all anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GremAudit {
    pub anchors: usize,
    pub raw_selected: usize,
    pub distinct_selected: usize,
}

/// Extract one normalized feature per record. Unreadable images and images
/// with a degenerate (zero-norm) descriptor are skipped with a warning.
pub fn extract_pool_features(
    records: &[ImageRecord],
    pool: PoolKind,
    extractor: &dyn FrozenExtractor,
) -> (Vec<CandidateFeature>, Vec<String>) {
    let mut features = Vec::new();
    let mut warnings = Vec::new();
    for rec in records {
        let image = match PixelImage::load(&rec.path) {
            Ok(img) => img,
            Err(e) => {
                warnings.push(format!("skipping {}: {e}", rec.image_id));
                continue;
            }
        };
        let raw = match extractor.extract(&image) {
            Ok(f) => f,
            Err(e) => {
                warnings.push(format!("skipping {}: {e}", rec.image_id));
                continue;
            }
        };
        let norm = l2_norm(&raw);
        if norm < 1e-12 {
            warnings.push(format!("skipping {}: degenerate zero descriptor", rec.image_id));
            continue;
        }
        features.push(CandidateFeature {
            image_id: rec.image_id.clone(),
            feature: raw.iter().map(|v| v / norm).collect(),
            pool,
        });
    }
    (features, warnings)
}

/// Select the top `floor(|pool| / 2)` candidates by cosine similarity to the
/// anchor. Ties at the cut are broken by ascending image id so the result is
/// independent of pool order.
pub fn select_top_half(
    anchor: &CandidateFeature,
    anchor_location: &str,
    pool: &[CandidateFeature],
) -> Result<GremAssignment> {
    anchor.validate()?;
    if pool.is_empty() {
        return Ok(GremAssignment {
            anchor_image_id: anchor.image_id.clone(),
            selected: Vec::new(),
            inherit_location: anchor_location.to_string(),
        });
    }
    let mut scored = Vec::with_capacity(pool.len());
    for cand in pool {
        if cand.image_id == anchor.image_id {
            return Err(Error::InvalidInput(format!(
                "anchor {} present in its own candidate pool",
                anchor.image_id
            )));
        }
        cand.validate()?;
        if cand.feature.len() != anchor.feature.len() {
            return Err(Error::Shape(format!(
                "candidate {} has dim {}, anchor has {}",
                cand.image_id,
                cand.feature.len(),
                anchor.feature.len()
            )));
        }
        let score: f64 = anchor
            .feature
            .iter()
            .zip(&cand.feature)
            .map(|(a, b)| a * b)
            .sum();
        scored.push((cand.image_id.clone(), score));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("cosine scores of unit vectors are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(pool.len() / 2);
    Ok(GremAssignment {
        anchor_image_id: anchor.image_id.clone(),
        selected: scored,
        inherit_location: anchor_location.to_string(),
    })
}

/// Output of the full preparation pass.
#[derive(Debug, Clone, Default)]
pub struct GremOutput {
    pub assignments: Vec<GremAssignment>,
    /// New street records, one per (anchor, selected candidate) pair.
    pub augmented: Vec<ImageRecord>,
    pub audit: GremAudit,
    pub warnings: Vec<String>,
}

/// Run selection for every original street anchor against the auxiliary
/// pool and materialize the selected candidates as street records carrying
/// the anchor's location. A candidate chosen by several anchors yields one
/// record per anchor (distinct training samples); the audit reports both the
/// raw and deduplicated counts.
pub fn prepare_grem(
    street: &[ImageRecord],
    auxiliary: &[ImageRecord],
    extractor: &dyn FrozenExtractor,
) -> Result<GremOutput> {
    for rec in street {
        if rec.view != View::Street {
            return Err(Error::InvalidInput(format!(
                "record {} is not a street image",
                rec.image_id
            )));
        }
    }
    let mut out = GremOutput::default();
    let (anchor_features, mut warnings) =
        extract_pool_features(street, PoolKind::OriginalStreet, extractor);
    out.warnings.append(&mut warnings);
    let (pool_features, mut warnings) =
        extract_pool_features(auxiliary, PoolKind::Auxiliary, extractor);
    out.warnings.append(&mut warnings);

    let street_by_id: BTreeMap<&str, &ImageRecord> =
        street.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let aux_by_id: BTreeMap<&str, &ImageRecord> =
        auxiliary.iter().map(|r| (r.image_id.as_str(), r)).collect();

    let mut distinct: BTreeSet<String> = BTreeSet::new();
    for anchor in &anchor_features {
        let anchor_rec = street_by_id[anchor.image_id.as_str()];
        let assignment = select_top_half(anchor, &anchor_rec.location_id, &pool_features)?;
        for (cand_id, _score) in &assignment.selected {
            let cand_rec = aux_by_id.get(cand_id.as_str()).ok_or_else(|| {
                Error::Data(format!("selected candidate {cand_id} missing from pool records"))
            })?;
            distinct.insert(cand_id.clone());
            out.augmented.push(ImageRecord {
                image_id: format!("grem:{}:{}", anchor.image_id, cand_id),
                location_id: assignment.inherit_location.clone(),
                view: View::Street,
                scale: None,
                source: Source::GremAugmented,
                path: cand_rec.path.clone(),
                height_px: cand_rec.height_px,
                width_px: cand_rec.width_px,
            });
        }
        out.audit.raw_selected += assignment.selected.len();
        out.assignments.push(assignment);
    }
    out.audit.anchors = out.assignments.len();
    out.audit.distinct_selected = distinct.len();
    Ok(out)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = l2_norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn candidate(id: &str, v: &[f64]) -> CandidateFeature {
        CandidateFeature {
            image_id: id.to_string(),
            feature: unit(v),
            pool: PoolKind::Auxiliary,
        }
    }

    #[test]
    fn selects_top_half_by_score() {
        let anchor = candidate("anchor", &[1.0, 0.0]);
        // scores: 0.9..., 0.5..., ~0.1, negative
        let pool = vec![
            candidate("c", &[0.9, 0.43589]),
            candidate("a", &[0.5, 0.86603]),
            candidate("d", &[0.1, 0.99499]),
            candidate("b", &[-0.2, 0.97980]),
        ];
        let assignment = select_top_half(&anchor, "loc1", &pool).unwrap();
        let ids: Vec<&str> = assignment.selected.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["c", "a"]);
        assert!(assignment.selected[0].1 > assignment.selected[1].1);
        assert_eq!(assignment.inherit_location, "loc1");
    }

    #[test]
    fn floor_rule_on_small_pools() {
        let anchor = candidate("anchor", &[1.0, 0.0]);
        let pool = vec![candidate("only", &[0.0, 1.0])];
        let assignment = select_top_half(&anchor, "loc", &pool).unwrap();
        assert!(assignment.selected.is_empty());
        let assignment = select_top_half(&anchor, "loc", &[]).unwrap();
        assert!(assignment.selected.is_empty());
    }

    #[test]
    fn ties_at_cut_break_by_ascending_id() {
        let anchor = candidate("anchor", &[1.0, 0.0]);
        // two identical scores at the cut boundary of a 4-pool (keep 2)
        let pool = vec![
            candidate("z", &[0.9, 0.43589]),
            candidate("m", &[0.5, 0.86603]),
            candidate("k", &[0.5, -0.86603]),
            candidate("q", &[-0.5, 0.86603]),
        ];
        let assignment = select_top_half(&anchor, "loc", &pool).unwrap();
        let ids: Vec<&str> = assignment.selected.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["z", "k"], "tie at 0.5 resolved to lower id");
    }

    #[test]
    fn selection_is_pool_order_invariant() {
        let anchor = candidate("anchor", &[0.6, 0.8]);
        let mut pool: Vec<CandidateFeature> = (0..16)
            .map(|i| {
                let angle = i as f64 * std::f64::consts::FRAC_PI_8;
                candidate(&format!("c{i:02}"), &[angle.cos(), angle.sin()])
            })
            .collect();
        let forward = select_top_half(&anchor, "loc", &pool).unwrap();
        pool.reverse();
        let reversed = select_top_half(&anchor, "loc", &pool).unwrap();
        assert_eq!(forward, reversed);
        assert_eq!(forward.selected.len(), 8);
    }

    #[test]
    fn rejects_anchor_in_pool_and_bad_norms() {
        let anchor = candidate("anchor", &[1.0, 0.0]);
        let pool = vec![candidate("anchor", &[0.0, 1.0])];
        assert!(select_top_half(&anchor, "loc", &pool).is_err());

        let bad = CandidateFeature {
            image_id: "bad".into(),
            feature: vec![2.0, 0.0],
            pool: PoolKind::Auxiliary,
        };
        assert!(select_top_half(&anchor, "loc", &[bad]).is_err());
    }

    #[test]
    fn mean_pool_matches_scalar_oracle() {
        let mut img = PixelImage::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    img.data[[y, x, c]] = ((y * 8 + x + c) % 7) as f64 / 7.0;
                }
            }
        }
        let extractor = MeanPoolExtractor { grid: 4 };
        let feature = extractor.extract(&img).unwrap();
        assert_eq!(feature.len(), 48);
        // oracle: recompute cell (1, 2), channel 1 by explicit loops
        let mut sum = 0.0;
        for y in 2..4 {
            for x in 4..6 {
                sum += img.data[[y, x, 1]];
            }
        }
        let idx = (4 + 2) * 3 + 1;
        assert!((feature[idx] - sum / 4.0).abs() < 1e-12);
    }
}
