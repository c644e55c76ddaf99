//! Training objectives and their analytic gradients.
//!
//! Everything here runs in `f64` on embedding matrices whose row `i` in the
//! satellite and UAV matrices belongs to the same training pair. Gradients
//! are returned with respect to those matrices; the encoder turns them into
//! parameter gradients.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, NeighborIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `α / ‖h‖` for in-neighbourhood hard negatives.
    AsWritten,
    /// `α · ‖h‖` for in-neighbourhood hard negatives.
    Inverted,
}

/// What is added to the pair-level InfoNCE term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// The geographic adaptive parts selected by the `enable_*` flags.
    GeoAdaptive,
    /// Margin triplet loss with randomly drawn positive and negative.
    Triplet,
    /// Margin triplet loss with batch-hard positive and negative.
    HardTriplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub enable_gs: bool,
    pub enable_gu: bool,
    pub enable_gc: bool,
    pub symmetric_infonce: bool,
    pub weight_mode: WeightMode,
    pub objective: Objective,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            alpha: 3.0,
            enable_gs: true,
            enable_gu: true,
            enable_gc: true,
            symmetric_infonce: false,
            weight_mode: WeightMode::AsWritten,
            objective: Objective::GeoAdaptive,
            triplet_margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "loss.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("loss.alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::Config("loss.triplet_margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// Embeddings of one batch of pairs.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    pub sat: Array2<f64>,
    pub uav: Array2<f64>,
    pub location_ids: Vec<String>,
    pub geo_points: Vec<GeoPoint>,
}

impl BatchFeatures {
    pub const NORM_TOLERANCE: f64 = 1e-4;

    pub fn new(
        sat: Array2<f64>,
        uav: Array2<f64>,
        location_ids: Vec<String>,
        geo_points: Vec<GeoPoint>,
    ) -> Result<Self> {
        let b = location_ids.len();
        if sat.dim() != uav.dim() || sat.nrows() != b || geo_points.len() != b {
            return Err(Error::DimensionMismatch {
                expected: format!("{b} rows in both views"),
                actual: format!("sat {:?}, uav {:?}, {} points", sat.dim(), uav.dim(), geo_points.len()),
            });
        }
        for m in [&sat, &uav] {
            for row in m.rows() {
                let n = row.dot(&row).sqrt();
                if (n - 1.0).abs() > Self::NORM_TOLERANCE {
                    return Err(Error::DimensionMismatch {
                        expected: "unit-norm rows".into(),
                        actual: format!("row norm {n}"),
                    });
                }
            }
        }
        Ok(Self {
            sat,
            uav,
            location_ids,
            geo_points,
        })
    }

    pub fn len(&self) -> usize {
        self.location_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.location_ids.is_empty()
    }
}

/// Per-batch loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_gs: f64,
    pub l_gu: f64,
    pub l_gc: f64,
    pub l_g: f64,
    /// Triplet baseline term; zero under the geographic objective.
    pub l_triplet: f64,
    pub total: f64,
    pub skipped_anchors: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_p, self.l_gs, self.l_gu, self.l_gc, self.l_g, self.l_triplet, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Which embedding set a geographic part mines in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Satellite,
    Uav,
    /// Row-wise concatenation `[f_sat, f_uav]`.
    Concat,
}

/// A loss value with its gradients with respect to both embedding matrices.
#[derive(Debug, Clone)]
pub struct Graded {
    pub value: f64,
    pub skipped: usize,
    pub grad_sat: Array2<f64>,
    pub grad_uav: Array2<f64>,
}

impl Graded {
    fn zeros(dim: (usize, usize)) -> Self {
        Self {
            value: 0.0,
            skipped: 0,
            grad_sat: Array2::zeros(dim),
            grad_uav: Array2::zeros(dim),
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Euclidean distance between two feature vectors.
pub fn feature_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("length {}", a.len()),
            actual: format!("length {}", b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

fn row_distance(m: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    m.row(i)
        .iter()
        .zip(m.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One direction of the InfoNCE term: anchors are rows of `anchors`, the
/// gallery is every row of `gallery`, and row `i` is anchor `i`'s positive.
fn info_nce_direction(anchors: &ArrayView2<f64>, gallery: &ArrayView2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let b = anchors.nrows();
    let logits = anchors.dot(&gallery.t()) / tau;
    let mut g = Array2::zeros((b, b));
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[i];
        for j in 0..b {
            g[[i, j]] = ((row[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    let grad_anchor = g.dot(gallery) / tau;
    let grad_gallery = g.t().dot(anchors) / tau;
    (loss / b as f64, grad_anchor, grad_gallery)
}

/// Pair-level InfoNCE with its gradients. Satellite rows are anchors and
/// every UAV row in the batch is in the denominator; `symmetric` averages
/// in the UAV→satellite direction.
pub fn info_nce_graded(sat: &ArrayView2<f64>, uav: &ArrayView2<f64>, tau: f64, symmetric: bool) -> Result<Graded> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if sat.dim() != uav.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", sat.dim()),
            actual: format!("{:?}", uav.dim()),
        });
    }
    if sat.nrows() == 0 {
        return Ok(Graded::zeros(sat.dim()));
    }
    let (l, gs, gu) = info_nce_direction(sat, uav, tau);
    if !symmetric {
        return Ok(Graded {
            value: l,
            skipped: 0,
            grad_sat: gs,
            grad_uav: gu,
        });
    }
    let (l2, gu2, gs2) = info_nce_direction(uav, sat, tau);
    Ok(Graded {
        value: 0.5 * (l + l2),
        skipped: 0,
        grad_sat: 0.5 * (gs + gs2),
        grad_uav: 0.5 * (gu + gu2),
    })
}

pub fn info_nce(batch: &BatchFeatures, tau: f64, symmetric: bool) -> Result<f64> {
    Ok(info_nce_graded(&batch.sat.view(), &batch.uav.view(), tau, symmetric)?.value)
}

/// Hard positive and negative of one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mined {
    /// Farthest same-location element: (distance, batch index).
    pub positive: Option<(f64, usize)>,
    /// Closest different-location element: (distance, batch index).
    pub negative: Option<(f64, usize)>,
}

/// Batch-hard mining for `anchor`. Ties go to the smallest batch index.
pub fn mine_hard(anchor: usize, embeddings: &ArrayView2<f64>, location_ids: &[String]) -> Mined {
    let mut positive: Option<(f64, usize)> = None;
    let mut negative: Option<(f64, usize)> = None;
    for j in 0..embeddings.nrows() {
        if j == anchor {
            continue;
        }
        let d = row_distance(embeddings, anchor, j);
        if location_ids[j] == location_ids[anchor] {
            if positive.is_none_or(|(best, _)| d > best) {
                positive = Some((d, j));
            }
        } else if negative.is_none_or(|(best, _)| d < best) {
            negative = Some((d, j));
        }
    }
    Mined { positive, negative }
}

/// Adaptive weight for an anchor whose hard negative sits at
/// `negative_location`.
pub fn adaptive_weight(
    anchor_location: &str,
    negative_location: &str,
    index: &NeighborIndex,
    alpha: f64,
    mode: WeightMode,
) -> Result<f64> {
    if !index.contains_location(negative_location) {
        return Err(Error::UnknownLocation(negative_location.to_string()));
    }
    match index.neighbor_distance(anchor_location, negative_location)? {
        None => Ok(alpha),
        Some(_) => {
            let norm = index.neighbor_norm(anchor_location, negative_location)?;
            Ok(match mode {
                WeightMode::AsWritten => alpha / norm,
                WeightMode::Inverted => alpha * norm,
            })
        }
    }
}

/// Adds `scale · ∂‖m_i − m_j‖/∂m` into `grad`.
fn add_distance_grad(grad: &mut Array2<f64>, m: &ArrayView2<f64>, i: usize, j: usize, d: f64, scale: f64) {
    if d <= 0.0 {
        return;
    }
    let f = scale / d;
    for k in 0..m.ncols() {
        let diff = (m[[i, k]] - m[[j, k]]) * f;
        grad[[i, k]] += diff;
        grad[[j, k]] -= diff;
    }
}

/// Soft-margin geographic loss over the anchors of one view, with
/// gradients. Anchors lacking a positive or a negative are skipped; the
/// value is the mean over the rest.
pub fn geo_part_graded(
    view: View,
    batch: &BatchFeatures,
    index: &NeighborIndex,
    config: &LossConfig,
) -> Result<Graded> {
    let (b, d) = batch.sat.dim();
    let concat;
    let m: ArrayView2<f64> = match view {
        View::Satellite => batch.sat.view(),
        View::Uav => batch.uav.view(),
        View::Concat => {
            concat = ndarray::concatenate(Axis(1), &[batch.sat.view(), batch.uav.view()])
                .expect("equal row counts");
            concat.view()
        }
    };
    let mut grad = Array2::zeros(m.raw_dim());
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let mined = mine_hard(i, &m, &batch.location_ids);
        let (Some((p_plus, jp)), Some((p_minus, jn))) = (mined.positive, mined.negative) else {
            skipped += 1;
            continue;
        };
        let phi = adaptive_weight(
            &batch.location_ids[i],
            &batch.location_ids[jn],
            index,
            config.alpha,
            config.weight_mode,
        )?;
        let x = phi * (p_plus - p_minus);
        total += softplus(x);
        used += 1;
        terms.push((i, jp, p_plus, jn, p_minus, phi * sigmoid(x)));
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        for (i, jp, p_plus, jn, p_minus, w) in terms {
            add_distance_grad(&mut grad, &m, i, jp, p_plus, w * inv);
            add_distance_grad(&mut grad, &m, i, jn, p_minus, -w * inv);
        }
    }
    let value = if used > 0 { total / used as f64 } else { 0.0 };
    let (grad_sat, grad_uav) = match view {
        View::Satellite => (grad, Array2::zeros((b, d))),
        View::Uav => (Array2::zeros((b, d)), grad),
        View::Concat => (
            grad.slice(s![.., ..d]).to_owned(),
            grad.slice(s![.., d..]).to_owned(),
        ),
    };
    Ok(Graded {
        value,
        skipped,
        grad_sat,
        grad_uav,
    })
}

/// Loss value and skipped-anchor count of one geographic part.
pub fn geo_part_loss(view: View, batch: &BatchFeatures, index: &NeighborIndex, config: &LossConfig) -> Result<(f64, usize)> {
    let g = geo_part_graded(view, batch, index, config)?;
    Ok((g.value, g.skipped))
}

/// Anchor/positive/negative batch indices for the triplet baseline.
/// Anchors are satellite rows; positives and negatives are UAV rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn cross_distance(sat: &ArrayView2<f64>, uav: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    sat.row(i)
        .iter()
        .zip(uav.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Picks one triplet per satellite anchor: uniformly at random, or the
/// farthest positive and closest negative when `hard`. Anchors without a
/// candidate on either side are left out.
pub fn select_triplets<R: Rng + ?Sized>(batch: &BatchFeatures, hard: bool, rng: &mut R) -> Vec<Triplet> {
    let (sat, uav) = (batch.sat.view(), batch.uav.view());
    let b = batch.len();
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let (pos, neg): (Vec<usize>, Vec<usize>) =
            (0..b).partition(|&j| batch.location_ids[j] == batch.location_ids[a]);
        if neg.is_empty() {
            continue;
        }
        let (positive, negative) = if hard {
            let mut p = (f64::NEG_INFINITY, 0);
            for &j in &pos {
                let d = cross_distance(&sat, &uav, a, j);
                if d > p.0 {
                    p = (d, j);
                }
            }
            let mut n = (f64::INFINITY, 0);
            for &j in &neg {
                let d = cross_distance(&sat, &uav, a, j);
                if d < n.0 {
                    n = (d, j);
                }
            }
            (p.1, n.1)
        } else {
            (pos[rng.random_range(0..pos.len())], neg[rng.random_range(0..neg.len())])
        };
        out.push(Triplet {
            anchor: a,
            positive,
            negative,
        });
    }
    out
}

/// Mean hinge `max(0, d(a,p) − d(a,n) + margin)` over the given triplets,
/// with gradients.
pub fn triplet_graded(batch: &BatchFeatures, triplets: &[Triplet], margin: f64) -> Graded {
    let (sat, uav) = (batch.sat.view(), batch.uav.view());
    let mut out = Graded::zeros(batch.sat.dim());
    out.skipped = batch.len() - triplets.len();
    if triplets.is_empty() {
        return out;
    }
    let inv = 1.0 / triplets.len() as f64;
    let dim = sat.ncols();
    for t in triplets {
        let dp = cross_distance(&sat, &uav, t.anchor, t.positive);
        let dn = cross_distance(&sat, &uav, t.anchor, t.negative);
        let h = dp - dn + margin;
        if h <= 0.0 {
            continue;
        }
        out.value += h * inv;
        for k in 0..dim {
            if dp > 0.0 {
                let g = (sat[[t.anchor, k]] - uav[[t.positive, k]]) / dp * inv;
                out.grad_sat[[t.anchor, k]] += g;
                out.grad_uav[[t.positive, k]] -= g;
            }
            if dn > 0.0 {
                let g = (sat[[t.anchor, k]] - uav[[t.negative, k]]) / dn * inv;
                out.grad_sat[[t.anchor, k]] -= g;
                out.grad_uav[[t.negative, k]] += g;
            }
        }
    }
    out
}

pub fn baseline_triplet<R: Rng + ?Sized>(batch: &BatchFeatures, margin: f64, hard_mining: bool, rng: &mut R) -> f64 {
    let triplets = select_triplets(batch, hard_mining, rng);
    triplet_graded(batch, &triplets, margin).value
}

/// Full objective: breakdown plus gradients with respect to both views.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grad_sat: Array2<f64>,
    pub grad_uav: Array2<f64>,
}

/// InfoNCE plus the configured additional objective. `rng` is only drawn
/// from by the random-triplet baseline.
pub fn total_loss_graded<R: Rng + ?Sized>(
    batch: &BatchFeatures,
    index: &NeighborIndex,
    config: &LossConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    config.validate()?;
    let p = info_nce_graded(&batch.sat.view(), &batch.uav.view(), config.temperature, config.symmetric_infonce)?;
    let mut breakdown = LossBreakdown {
        l_p: p.value,
        ..Default::default()
    };
    let mut grad_sat = p.grad_sat;
    let mut grad_uav = p.grad_uav;
    let add = |g: &Graded, gs: &mut Array2<f64>, gu: &mut Array2<f64>| {
        *gs += &g.grad_sat;
        *gu += &g.grad_uav;
    };
    match config.objective {
        Objective::GeoAdaptive => {
            for (enabled, view) in [
                (config.enable_gs, View::Satellite),
                (config.enable_gu, View::Uav),
                (config.enable_gc, View::Concat),
            ] {
                if !enabled {
                    continue;
                }
                let g = geo_part_graded(view, batch, index, config)?;
                match view {
                    View::Satellite => breakdown.l_gs = g.value,
                    View::Uav => breakdown.l_gu = g.value,
                    View::Concat => breakdown.l_gc = g.value,
                }
                breakdown.skipped_anchors += g.skipped;
                add(&g, &mut grad_sat, &mut grad_uav);
            }
        }
        Objective::Triplet | Objective::HardTriplet => {
            let triplets = select_triplets(batch, config.objective == Objective::HardTriplet, rng);
            let g = triplet_graded(batch, &triplets, config.triplet_margin);
            breakdown.l_triplet = g.value;
            breakdown.skipped_anchors += g.skipped;
            add(&g, &mut grad_sat, &mut grad_uav);
        }
    }
    breakdown.l_g = breakdown.l_gs + breakdown.l_gu + breakdown.l_gc;
    breakdown.total = breakdown.l_p + breakdown.l_g + breakdown.l_triplet;
    Ok(LossOutput {
        breakdown,
        grad_sat,
        grad_uav,
    })
}

/// Loss breakdown under the geographic objective (the triplet baselines
/// draw from a fixed-seed stream here).
pub fn total_loss(batch: &BatchFeatures, index: &NeighborIndex, config: &LossConfig) -> Result<LossBreakdown> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Ok(total_loss_graded(batch, index, config, &mut rng)?.breakdown)
}
