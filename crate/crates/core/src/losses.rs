//! Assessor objective: regression, pairwise rank, consistency under weak
//! perturbation, severity-ordering triplet, and rank preservation across
//! augmented pairs. Scores are on the 0-100 scale.
//!
//! Each loss exists as a plain function and as a tape builder taking
//! scalar nodes.

use serde::{Deserialize, Serialize};

use crate::diffcore::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::rewards::label_sign;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta_mse: f64,
    pub beta_rank: f64,
    pub beta_cons: f64,
    pub beta_triplet: f64,
    pub beta_cross: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta_mse: 1.0, beta_rank: 0.5, beta_cons: 0.2, beta_triplet: 0.2, beta_cross: 0.3, m1: 2.0, m2: 2.0, m3: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_mse, self.beta_rank, self.beta_cons, self.beta_triplet, self.beta_cross, self.m1, self.m2, self.m3];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights and margins must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Whether any augmentation-based term is active.
    pub fn uses_augmentation(&self) -> bool {
        self.beta_cons > 0.0 || self.beta_triplet > 0.0 || self.beta_cross > 0.0
    }
}

pub fn l_mse(qh1: f64, qh2: f64, q1: f64, q2: f64) -> f64 {
    (qh1 - q1).powi(2) + (qh2 - q2).powi(2)
}

pub fn l_rank(qh1: f64, qh2: f64, s: f64) -> f64 {
    softplus(-s * (qh1 - qh2))
}

pub fn l_cons(clean: f64, weak: f64) -> f64 {
    (clean - weak).powi(2)
}

pub fn l_triplet(clean: f64, mild: f64, strong: f64, m1: f64, m2: f64, m3: f64) -> f64 {
    (mild - clean + m1).max(0.0) + (strong - mild + m2).max(0.0) + (strong - clean + m3).max(0.0)
}

pub fn l_cross(qa: f64, qb: f64, s: f64) -> f64 {
    softplus(-s * (qa - qb))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub mse: f64,
    pub rank: f64,
    pub cons: f64,
    pub triplet: f64,
    pub cross: f64,
}

impl LossComponents {
    pub const COLUMNS: [&'static str; 5] = ["loss_mse", "loss_rank", "loss_cons", "loss_triplet", "loss_cross"];

    pub fn values(&self) -> [f64; 5] {
        [self.mse, self.rank, self.cons, self.triplet, self.cross]
    }

    pub fn add(&mut self, o: &LossComponents) {
        self.mse += o.mse;
        self.rank += o.rank;
        self.cons += o.cons;
        self.triplet += o.triplet;
        self.cross += o.cross;
    }

    pub fn scaled(&self, c: f64) -> LossComponents {
        LossComponents { mse: self.mse * c, rank: self.rank * c, cons: self.cons * c, triplet: self.triplet * c, cross: self.cross * c }
    }
}

pub fn l_total(c: &LossComponents, w: &LossWeights) -> f64 {
    w.beta_mse * c.mse + w.beta_rank * c.rank + w.beta_cons * c.cons + w.beta_triplet * c.triplet + w.beta_cross * c.cross
}

/// Tape versions; arguments are scalar nodes.
pub mod tape {
    use super::*;

    fn offset(t: &mut Tape, a: Var, c: f64) -> Result<Var> {
        let cv = t.constant_scalar(c);
        t.add(a, cv)
    }

    pub fn mse(t: &mut Tape, qh1: Var, qh2: Var, q1: f64, q2: f64) -> Result<Var> {
        let d1 = offset(t, qh1, -q1)?;
        let d2 = offset(t, qh2, -q2)?;
        let s1 = t.square(d1);
        let s2 = t.square(d2);
        t.add(s1, s2)
    }

    /// `softplus(-s (a - b))`; used for both the rank and cross-rank terms.
    pub fn rank(t: &mut Tape, a: Var, b: Var, s: f64) -> Result<Var> {
        let d = t.sub(a, b)?;
        let z = t.scale(d, -s);
        Ok(t.softplus(z))
    }

    pub fn cons(t: &mut Tape, clean: Var, weak: Var) -> Result<Var> {
        let d = t.sub(clean, weak)?;
        Ok(t.square(d))
    }

    pub fn triplet(t: &mut Tape, clean: Var, mild: Var, strong: Var, m1: f64, m2: f64, m3: f64) -> Result<Var> {
        let a = t.sub(mild, clean)?;
        let a = offset(t, a, m1)?;
        let b = t.sub(strong, mild)?;
        let b = offset(t, b, m2)?;
        let c = t.sub(strong, clean)?;
        let c = offset(t, c, m3)?;
        let (a, b, c) = (t.relu(a), t.relu(b), t.relu(c));
        t.add_all(&[a, b, c])
    }
}

/// Scores of one image and its augmented variants inside a batch, as tape
/// nodes. The variants are absent when augmentation is disabled.
#[derive(Clone, Copy, Debug)]
pub struct ScoredImage {
    pub mos: f64,
    pub clean: Var,
    pub variants: Option<[Var; 3]>,
}

/// Batch objective with round-robin pairing `(i, i+1 mod B)`; the mean
/// over pairs of the weighted total. Cross-rank averages the three
/// severity levels. Returns the loss node and mean components.
pub fn batch_loss(t: &mut Tape, items: &[ScoredImage], w: &LossWeights) -> Result<(Var, LossComponents)> {
    if items.is_empty() {
        return Err(Error::invalid("empty loss batch"));
    }
    let n = items.len();
    let mut terms = Vec::new();
    let mut comp = LossComponents::default();
    for i in 0..n {
        let (a, b) = (&items[i], &items[(i + 1) % n]);
        let s = label_sign(a.mos, b.mos);
        let mut push = |t: &mut Tape, v: Var, beta: f64, slot: &mut f64| {
            *slot += t.scalar(v);
            if beta > 0.0 {
                terms.push(t.scale(v, beta));
            }
        };
        let v = tape::mse(t, a.clean, b.clean, a.mos, b.mos)?;
        push(t, v, w.beta_mse, &mut comp.mse);
        let v = tape::rank(t, a.clean, b.clean, s)?;
        push(t, v, w.beta_rank, &mut comp.rank);
        if let (Some(va), Some(vb)) = (a.variants, b.variants) {
            let v = tape::cons(t, a.clean, va[0])?;
            push(t, v, w.beta_cons, &mut comp.cons);
            let v = tape::triplet(t, a.clean, va[1], va[2], w.m1, w.m2, w.m3)?;
            push(t, v, w.beta_triplet, &mut comp.triplet);
            let cross: Vec<Var> = (0..3).map(|l| tape::rank(t, va[l], vb[l], s)).collect::<Result<_>>()?;
            let sum = t.add_all(&cross)?;
            let v = t.scale(sum, 1.0 / 3.0);
            push(t, v, w.beta_cross, &mut comp.cross);
        }
    }
    let total = if terms.is_empty() {
        t.constant_scalar(0.0)
    } else {
        let s = t.add_all(&terms)?;
        t.scale(s, 1.0 / n as f64)
    };
    Ok((total, comp.scaled(1.0 / n as f64)))
}
