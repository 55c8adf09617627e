//! Contrastive objective stack: InfoNCE over in-batch negatives, the
//! cross-view sum (street↔satellite plus both against each drone scale),
//! the self-supervised same-view sum, and the λ-weighted total.
//!
//! Every loss has two faces backed by one implementation: graph builders
//! for training (returning a scalar node) and value-level functions for
//! evaluation and oracles (building a throwaway graph internally).

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Scale;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};

/// Direction of the InfoNCE softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDirection {
    /// Literal one-way form: anchors attend over positive candidates only.
    OneWay,
    /// Average of both retrieval directions (default).
    Symmetric,
}

impl LossDirection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one_way" => Ok(LossDirection::OneWay),
            "symmetric" => Ok(LossDirection::Symmetric),
            other => Err(Error::Config(format!("unknown loss direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub direction: LossDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            lambda: 3.0,
            direction: LossDirection::Symmetric,
        }
    }
}

impl LossConfig {
    /// Read `loss.*` keys of a flat config file.
    pub fn from_config(cfg: &crate::config::Config) -> Result<Self> {
        let d = LossConfig::default();
        let config = LossConfig {
            temperature: cfg.f64_or("loss.temperature", d.temperature)?,
            lambda: cfg.f64_or("loss.lambda", d.lambda)?,
            direction: LossDirection::parse(cfg.str_or("loss.direction", "symmetric"))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-step loss record written to the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cc: f64,
    pub l_sc: f64,
    pub l_total: f64,
    /// Per-term values keyed by pair name ("g-s", "g-d_s1", "s-s", …);
    /// omitted scales appear as "<scale>-missing" flags.
    pub breakdown: BTreeMap<String, f64>,
    pub missing_scales: Vec<Scale>,
}

impl LossReport {
    pub fn validate(&self, lambda: f64) -> Result<()> {
        let expect = self.l_cc + lambda * self.l_sc;
        if (self.l_total - expect).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "l_total {} != l_cc + λ·l_sc = {expect}",
                self.l_total
            )));
        }
        for (name, value) in &self.breakdown {
            if !value.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite loss term {name}")));
            }
        }
        if !(self.l_cc.is_finite() && self.l_sc.is_finite() && self.l_total.is_finite()) {
            return Err(Error::InvalidInput("non-finite loss component".into()));
        }
        Ok(())
    }
}

fn check_batch(g: &Graph, id: VarId, what: &str, rows: usize, cols: usize) -> Result<()> {
    let v = g.value(id);
    if v.dim() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{what} has shape {:?}, expected ({rows}, {cols})",
            v.dim()
        )));
    }
    for (i, row) in v.rows().into_iter().enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized(format!(
                "{what} row {i} has norm {norm}"
            )));
        }
    }
    Ok(())
}

fn one_way_graph(g: &mut Graph, anchors: VarId, positives: VarId, tau: f64) -> VarId {
    let pt = g.transpose(positives);
    let sims = g.matmul(anchors, pt); // (B, B) cosine by unit-norm precondition
    let logits = g.mul_scalar(sims, 1.0 / tau);
    let lse = g.log_sum_exp_rows(logits); // (B, 1)
    let pos = g.diag_col(logits); // (B, 1)
    let per_anchor = g.sub(lse, pos);
    g.mean_all(per_anchor)
}

/// InfoNCE over a batch as a graph node. Both inputs are `(B, D)` with
/// unit-norm rows; row b of each side shares location b. Returns a `(1, 1)`
/// scalar.
pub fn info_nce_graph(
    g: &mut Graph,
    anchors: VarId,
    positives: VarId,
    config: &LossConfig,
) -> Result<VarId> {
    config.validate()?;
    let (b, d) = g.value(anchors).dim();
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "InfoNCE needs a batch of at least 2, got {b}"
        )));
    }
    check_batch(g, anchors, "anchors", b, d)?;
    check_batch(g, positives, "positives", b, d)?;
    let tau = config.temperature;
    let forward = one_way_graph(g, anchors, positives, tau);
    Ok(match config.direction {
        LossDirection::OneWay => forward,
        LossDirection::Symmetric => {
            let backward = one_way_graph(g, positives, anchors, tau);
            let sum = g.add(forward, backward);
            g.mul_scalar(sum, 0.5)
        }
    })
}

/// Value-level InfoNCE over `(B, D)` embedding matrices.
pub fn info_nce(anchors: &Array2<f64>, positives: &Array2<f64>, config: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(anchors.clone());
    let p = g.leaf(positives.clone());
    let loss = info_nce_graph(&mut g, a, p, config)?;
    Ok(g.value(loss)[[0, 0]])
}

/// Graph-node inputs for one training step's loss. `_a` carries the first
/// augmentation draw (used by both losses), `_b` the independent second
/// draw (self-supervised positives). A `None` drone slot marks a scale
/// whose reconstruction backend failed; its terms are omitted and flagged.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub street_a: VarId,
    pub street_b: VarId,
    pub satellite_a: VarId,
    pub satellite_b: VarId,
    pub drone_a: [Option<VarId>; 3],
    pub drone_b: [Option<VarId>; 3],
}

fn scale_of(index: usize) -> Scale {
    Scale::ALL[index]
}

/// Cross-view loss: street↔satellite plus street and satellite against each
/// available drone scale (7 terms when all scales are present). Returns the
/// summed node, per-term values, and the omitted scales.
pub fn cross_view_loss_graph(
    g: &mut Graph,
    street: VarId,
    satellite: VarId,
    drone: &[Option<VarId>; 3],
    config: &LossConfig,
) -> Result<(VarId, BTreeMap<String, f64>, Vec<Scale>)> {
    let mut breakdown = BTreeMap::new();
    let mut missing = Vec::new();
    let mut total = info_nce_graph(g, street, satellite, config)?;
    breakdown.insert("g-s".to_string(), g.value(total)[[0, 0]]);
    for (i, slot) in drone.iter().enumerate() {
        let scale = scale_of(i);
        match slot {
            Some(d) => {
                let gd = info_nce_graph(g, street, *d, config)?;
                breakdown.insert(format!("g-d_{}", scale.name()), g.value(gd)[[0, 0]]);
                total = g.add(total, gd);
                let sd = info_nce_graph(g, satellite, *d, config)?;
                breakdown.insert(format!("s-d_{}", scale.name()), g.value(sd)[[0, 0]]);
                total = g.add(total, sd);
            }
            None => {
                breakdown.insert(format!("{}-missing", scale.name()), 1.0);
                missing.push(scale);
            }
        }
    }
    Ok((total, breakdown, missing))
}

/// Value-level cross-view loss.
pub fn cross_view_loss(
    street: &Array2<f64>,
    satellite: &Array2<f64>,
    drone: &[Option<Array2<f64>>; 3],
    config: &LossConfig,
) -> Result<(f64, BTreeMap<String, f64>, Vec<Scale>)> {
    let mut g = Graph::new();
    let s = g.leaf(street.clone());
    let sat = g.leaf(satellite.clone());
    let d = [
        drone[0].as_ref().map(|m| g.leaf(m.clone())),
        drone[1].as_ref().map(|m| g.leaf(m.clone())),
        drone[2].as_ref().map(|m| g.leaf(m.clone())),
    ];
    let (node, breakdown, missing) = cross_view_loss_graph(&mut g, s, sat, &d, config)?;
    Ok((g.value(node)[[0, 0]], breakdown, missing))
}

/// Self-supervised loss: each view against its independently augmented
/// second draw (5 terms when all scales are present).
pub fn self_supervised_loss_graph(
    g: &mut Graph,
    batch: &BatchEmbeddings,
    config: &LossConfig,
) -> Result<(VarId, BTreeMap<String, f64>, Vec<Scale>)> {
    let mut breakdown = BTreeMap::new();
    let mut missing = Vec::new();
    let mut total = info_nce_graph(g, batch.street_a, batch.street_b, config)?;
    breakdown.insert("g-g".to_string(), g.value(total)[[0, 0]]);
    let ss = info_nce_graph(g, batch.satellite_a, batch.satellite_b, config)?;
    breakdown.insert("s-s".to_string(), g.value(ss)[[0, 0]]);
    total = g.add(total, ss);
    for i in 0..3 {
        let scale = scale_of(i);
        match (batch.drone_a[i], batch.drone_b[i]) {
            (Some(a), Some(b)) => {
                let dd = info_nce_graph(g, a, b, config)?;
                let name = scale.name();
                breakdown.insert(format!("d_{name}-d_{name}"), g.value(dd)[[0, 0]]);
                total = g.add(total, dd);
            }
            (None, None) => {
                breakdown.insert(format!("{}-missing", scale.name()), 1.0);
                missing.push(scale);
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "drone scale {} present in only one augmentation draw",
                    scale.name()
                )))
            }
        }
    }
    Ok((total, breakdown, missing))
}

/// Value-level self-supervised loss over paired draws per view.
#[allow(clippy::type_complexity)]
pub fn self_supervised_loss(
    street: (&Array2<f64>, &Array2<f64>),
    satellite: (&Array2<f64>, &Array2<f64>),
    drone: &[Option<(Array2<f64>, Array2<f64>)>; 3],
    config: &LossConfig,
) -> Result<(f64, BTreeMap<String, f64>, Vec<Scale>)> {
    let mut g = Graph::new();
    let street_a = g.leaf(street.0.clone());
    let street_b = g.leaf(street.1.clone());
    let satellite_a = g.leaf(satellite.0.clone());
    let satellite_b = g.leaf(satellite.1.clone());
    let batch = BatchEmbeddings {
        street_a,
        street_b,
        satellite_a,
        satellite_b,
        drone_a: [
            drone[0].as_ref().map(|(a, _)| g.leaf(a.clone())),
            drone[1].as_ref().map(|(a, _)| g.leaf(a.clone())),
            drone[2].as_ref().map(|(a, _)| g.leaf(a.clone())),
        ],
        drone_b: [
            drone[0].as_ref().map(|(_, b)| g.leaf(b.clone())),
            drone[1].as_ref().map(|(_, b)| g.leaf(b.clone())),
            drone[2].as_ref().map(|(_, b)| g.leaf(b.clone())),
        ],
    };
    let (node, breakdown, missing) = self_supervised_loss_graph(&mut g, &batch, config)?;
    Ok((g.value(node)[[0, 0]], breakdown, missing))
}

/// Weighted total: `l_cc + λ·l_sc`.
pub fn total_loss(l_cc: f64, l_sc: f64, lambda: f64) -> f64 {
    l_cc + lambda * l_sc
}

/// Build the full objective for one step. With λ = 0 the self-supervised
/// terms are still evaluated for the report but the returned node is the
/// cross-view sum alone, so no gradient flows through them.
pub fn total_loss_graph(
    g: &mut Graph,
    batch: &BatchEmbeddings,
    config: &LossConfig,
) -> Result<(VarId, LossReport)> {
    config.validate()?;
    let (cc_node, cc_terms, cc_missing) =
        cross_view_loss_graph(g, batch.street_a, batch.satellite_a, &batch.drone_a, config)?;
    let (sc_node, sc_terms, _) = self_supervised_loss_graph(g, batch, config)?;
    let l_cc = g.value(cc_node)[[0, 0]];
    let l_sc = g.value(sc_node)[[0, 0]];
    let total_node = if config.lambda == 0.0 {
        cc_node
    } else {
        let weighted = g.mul_scalar(sc_node, config.lambda);
        g.add(cc_node, weighted)
    };
    let mut breakdown = cc_terms;
    breakdown.extend(sc_terms);
    let report = LossReport {
        l_cc,
        l_sc,
        l_total: total_loss(l_cc, l_sc, config.lambda),
        breakdown,
        missing_scales: cc_missing,
    };
    // The report is returned even when values are non-finite so callers
    // (the training loop) can attach batch context to the diagnostic.
    Ok((total_node, report))
}
