//! The joint objective: four teacher-forced cross-entropies plus a weighted
//! distance between the two encoders' sentence representations.

use std::fmt;
use std::str::FromStr;

use modnmt_tensor::{Graph, Tensor, Var};

use crate::corpus::Batch;
use crate::error::{NmtError, Result};
use crate::model::{encode, teacher_forced_loss, BoundModule};

/// Added to `var(x) · var(y)` before the square root of the correlation
/// denominator, so the guard is 1e-8 on the scale of the standard deviations.
pub const CORRELATION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistanceKind {
    Correlation,
    L1,
    L2,
    None,
}

impl DistanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::Correlation => "correlation",
            DistanceKind::L1 => "l1",
            DistanceKind::L2 => "l2",
            DistanceKind::None => "none",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceKind {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlation" => Ok(DistanceKind::Correlation),
            "l1" => Ok(DistanceKind::L1),
            "l2" => Ok(DistanceKind::L2),
            "none" => Ok(DistanceKind::None),
            other => Err(NmtError::Config(format!(
                "unknown distance `{other}` (expected correlation, l1, l2 or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceMetric {
    pub kind: DistanceKind,
    pub weight: f64,
}

impl Default for DistanceMetric {
    fn default() -> Self {
        Self {
            kind: DistanceKind::Correlation,
            weight: 1.0,
        }
    }
}

impl DistanceMetric {
    pub fn new(kind: DistanceKind, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(NmtError::Config(format!("distance weight must be finite and non-negative, got {weight}")));
        }
        Ok(Self { kind, weight })
    }
}

fn check_pair(g: &Graph, hx: Var, hy: Var) -> Result<(usize, usize)> {
    let (sx, sy) = (g.shape(hx), g.shape(hy));
    if sx.len() != 2 || sx != sy {
        return Err(NmtError::Contract(format!(
            "representations must be equal [B, D] matrices, got {sx:?} and {sy:?}"
        )));
    }
    Ok((sx[0], sx[1]))
}

/// `1 − c`, where `c` is the Pearson correlation of each dimension across the
/// batch, averaged over dimensions. Rows of `hx` and `hy` must be parallel.
pub fn correlation_distance(g: &mut Graph, hx: Var, hy: Var) -> Result<Var> {
    let (rows, _) = check_pair(g, hx, hy)?;
    if rows < 2 {
        return Err(NmtError::Contract(format!(
            "correlation needs at least 2 rows, got {rows}"
        )));
    }
    let mx = g.mean_rows(hx)?;
    let my = g.mean_rows(hy)?;
    let cx = g.sub_row(hx, mx)?;
    let cy = g.sub_row(hy, my)?;
    let cross = g.mul(cx, cy)?;
    let num = g.sum_rows(cross)?;
    let sx = g.square(cx)?;
    let sy = g.square(cy)?;
    let vx = g.sum_rows(sx)?;
    let vy = g.sum_rows(sy)?;
    let vv = g.mul(vx, vy)?;
    let guarded = g.affine(vv, 1.0, CORRELATION_EPS * CORRELATION_EPS)?;
    let den = g.sqrt(guarded)?;
    let corr = g.div(num, den)?;
    let c = g.mean(corr)?;
    Ok(g.affine(c, -1.0, 1.0)?)
}

/// Distance of the requested kind: mean absolute difference (l1), mean squared
/// difference (l2), the correlation distance, or a constant zero.
pub fn pairwise_distance(g: &mut Graph, kind: DistanceKind, hx: Var, hy: Var) -> Result<Var> {
    check_pair(g, hx, hy)?;
    match kind {
        DistanceKind::Correlation => correlation_distance(g, hx, hy),
        DistanceKind::L1 => {
            let diff = g.sub(hx, hy)?;
            let a = g.abs(diff)?;
            Ok(g.mean(a)?)
        }
        DistanceKind::L2 => {
            let diff = g.sub(hx, hy)?;
            let s = g.square(diff)?;
            Ok(g.mean(s)?)
        }
        DistanceKind::None => Ok(g.constant([1], vec![0.0])?),
    }
}

/// Evaluates a distance on plain matrices.
pub fn distance_value(kind: DistanceKind, hx: &Tensor, hy: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(hx)?;
    let y = g.input(hy)?;
    let d = pairwise_distance(&mut g, kind, x, y)?;
    Ok(g.scalar(d))
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_xx: f64,
    pub l_yy: f64,
    pub l_xy: f64,
    pub l_yx: f64,
    pub d: f64,
    pub weight: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_xx,l_yy,l_xy,l_yx,d,total,lr";

impl LossBreakdown {
    /// The components summed in the same order the graph sums them.
    pub fn sum_of_parts(&self) -> f64 {
        self.l_xx + self.l_yy + self.l_xy + self.l_yx + self.weight * self.d
    }

    /// One loss CSV line; floats use the shortest round-trip representation.
    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{lr}",
            self.l_xx, self.l_yy, self.l_xy, self.l_yx, self.d, self.total
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<(usize, LossBreakdown, f64)> {
        let bad = || NmtError::Contract(format!("malformed loss row `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let step = f[0].parse().map_err(|_| bad())?;
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let b = LossBreakdown {
            l_xx: v[0],
            l_yy: v[1],
            l_xy: v[2],
            l_yx: v[3],
            d: v[4],
            weight: f64::NAN,
            total: v[5],
        };
        Ok((step, b, v[6]))
    }
}

/// Graph handles of the joint loss.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub l_xx: Var,
    pub l_yy: Var,
    pub l_xy: Var,
    pub l_yx: Var,
    pub d: Var,
    pub pooled_x: Var,
    pub pooled_y: Var,
}

impl JointLoss {
    pub fn breakdown(&self, g: &Graph, weight: f64) -> LossBreakdown {
        LossBreakdown {
            l_xx: g.scalar(self.l_xx),
            l_yy: g.scalar(self.l_yy),
            l_xy: g.scalar(self.l_xy),
            l_yx: g.scalar(self.l_yx),
            d: g.scalar(self.d),
            weight,
            total: g.scalar(self.total),
        }
    }
}

/// Bound modules of one language pair.
#[derive(Debug, Clone, Copy)]
pub struct PairModules<'a> {
    pub enc_x: &'a BoundModule,
    pub dec_x: &'a BoundModule,
    pub enc_y: &'a BoundModule,
    pub dec_y: &'a BoundModule,
}

/// Records the joint loss of one parallel batch (`src` is X, `tgt` is Y):
/// reconstruction of both sides, translation in both directions, and the
/// weighted distance between the pooled representations.
pub fn joint_loss(g: &mut Graph, batch: &Batch, m: PairModules<'_>, metric: DistanceMetric) -> Result<JointLoss> {
    let enc_x = encode(g, m.enc_x, &batch.src)?;
    let enc_y = encode(g, m.enc_y, &batch.tgt)?;
    if enc_x.d_model != enc_y.d_model {
        return Err(NmtError::Composition(format!(
            "encoder dimensions differ: {} vs {}",
            enc_x.d_model, enc_y.d_model
        )));
    }
    let l_xx = teacher_forced_loss(g, m.dec_x, &enc_x, &batch.src)?;
    let l_yy = teacher_forced_loss(g, m.dec_y, &enc_y, &batch.tgt)?;
    let l_xy = teacher_forced_loss(g, m.dec_y, &enc_x, &batch.tgt)?;
    let l_yx = teacher_forced_loss(g, m.dec_x, &enc_y, &batch.src)?;
    let d = pairwise_distance(g, metric.kind, enc_x.pooled, enc_y.pooled)?;
    let mut total = g.add(l_xx, l_yy)?;
    total = g.add(total, l_xy)?;
    total = g.add(total, l_yx)?;
    let wd = g.scale(d, metric.weight)?;
    total = g.add(total, wd)?;
    Ok(JointLoss {
        total,
        l_xx,
        l_yy,
        l_xy,
        l_yx,
        d,
        pooled_x: enc_x.pooled,
        pooled_y: enc_y.pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_and_print() {
        for k in [DistanceKind::Correlation, DistanceKind::L1, DistanceKind::L2, DistanceKind::None] {
            assert_eq!(k.as_str().parse::<DistanceKind>().unwrap(), k);
        }
        assert!("cosine".parse::<DistanceKind>().is_err());
        assert!(DistanceMetric::new(DistanceKind::L2, -1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let b = LossBreakdown {
            l_xx: 0.1,
            l_yy: 1.0 / 3.0,
            l_xy: 2.5,
            l_yx: 1e-17,
            d: 0.7,
            weight: 1.0,
            total: 3.6333333333333333,
        };
        let (step, back, lr) = LossBreakdown::parse_csv_row(&b.csv_row(12, 5e-4)).unwrap();
        assert_eq!((step, lr), (12, 5e-4));
        assert_eq!(back.l_yy, b.l_yy);
        assert_eq!(back.total, b.total);
    }
}
