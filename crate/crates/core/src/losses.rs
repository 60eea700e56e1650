//! Distillation and classification losses for representation learning and
//! head refinement, plus the phase-adaptive weighting between them.
//!
//! All losses are graph operations, so their gradients come from the same tape
//! that trains the networks. Inputs that play the teacher role are read by value
//! and never receive gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{IncrementalModel, ModelSnapshot};
use crate::nn::{Ctx, HasParams, Linear, Mode, Param};
use crate::tensor::{Scalar, Tensor};

/// Added to every edge norm before normalizing.
pub const EDGE_EPS: f64 = 1e-8;
/// Triplets with an edge shorter than this contribute zero loss.
pub const DEGENERATE_EDGE: f64 = 1e-6;

/// Softmax temperature of the classic distillation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdTemperature(f64);

impl KdTemperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {}", tau)));
        }
        Ok(KdTemperature(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for KdTemperature {
    fn default() -> Self {
        KdTemperature(2.0)
    }
}

fn check_same_2d<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::invalid(format!("{}: shapes {:?} and {:?}", what, sa, sb)));
    }
    Ok((sa[0], sa[1]))
}

/// Mean cross-entropy of `[n, c]` logits against integer labels.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = per_sample_ce(g, logits, labels)?;
    Ok(g.mean_all(per))
}

fn per_sample_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::invalid(format!(
            "cross-entropy: logits {:?} with {} labels",
            shape,
            labels.len()
        )));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {} outside 0..{}", bad, c)));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.pick_cols(ls, labels)?;
    Ok(g.scale(picked, -T::one()))
}

/// Classic distillation: batch mean of `KL(softmax(old / tau) || softmax(new / tau))`.
pub fn kd_baseline<T: Scalar>(g: &mut Graph<T>, old_logits: Var, new_logits: Var, tau: KdTemperature) -> Result<Var> {
    let (n, c) = check_same_2d(g, old_logits, new_logits, "kd_baseline")?;
    let inv_tau = T::lit(1.0 / tau.get());
    let mut p = g.value(old_logits).map(|v| v * inv_tau);
    for row in p.data_mut().chunks_mut(c) {
        crate::autograd::softmax_in_place(row);
    }
    // sum p ln p, with 0 ln 0 = 0
    let entropy_term: T = p
        .data()
        .iter()
        .map(|&q| if q > T::zero() { q * q.ln() } else { T::zero() })
        .sum();
    let scaled = g.scale(new_logits, inv_tau);
    let logq = g.log_softmax(scaled)?;
    let weighted = g.mul_const(logq, &p)?;
    let cross = g.sum_all(weighted);
    let kl_sum = g.scale(cross, -T::one());
    let kl_sum = g.add_scalar(kl_sum, entropy_term);
    Ok(g.scale(kl_sum, T::one() / T::lit(n as f64)))
}

/// Hard distillation: mean absolute difference over the old-class logits.
pub fn hkd_loss<T: Scalar>(g: &mut Graph<T>, teacher_old: Var, student_old: Var, n_old_classes: usize) -> Result<Var> {
    let (_, c) = check_same_2d(g, teacher_old, student_old, "hkd_loss")?;
    if c != n_old_classes {
        return Err(Error::invalid(format!(
            "hkd_loss: {} logit columns for {} previous classes",
            c, n_old_classes
        )));
    }
    let t = g.constant(g.value(teacher_old).clone());
    let d = g.sub(t, student_old)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Local cross-entropy over the new-task classifier columns only.
pub fn lce_loss<T: Scalar>(g: &mut Graph<T>, new_logits_local: Var, local_labels: &[usize]) -> Result<Var> {
    cross_entropy(g, new_logits_local, local_labels)
}

/// Cosine of the angle at `r_b` formed by `r_a` and `r_c`.
///
/// Edge norms are floored by [`EDGE_EPS`], so coincident points yield 0 rather
/// than NaN; the result is clamped to `[-1, 1]`.
pub fn angle_cos<T: Scalar>(r_a: &[T], r_b: &[T], r_c: &[T]) -> Result<T> {
    if r_a.len() != r_b.len() || r_c.len() != r_b.len() {
        return Err(Error::invalid("angle_cos: vectors of unequal dimension"));
    }
    let eps = T::lit(EDGE_EPS);
    let e_ab: Vec<T> = r_a.iter().zip(r_b).map(|(a, b)| *a - *b).collect();
    let e_cb: Vec<T> = r_c.iter().zip(r_b).map(|(c, b)| *c - *b).collect();
    let n_ab = e_ab.iter().map(|v| *v * *v).sum::<T>().sqrt() + eps;
    let n_cb = e_cb.iter().map(|v| *v * *v).sum::<T>().sqrt() + eps;
    let dot: T = e_ab.iter().zip(&e_cb).map(|(x, y)| (*x / n_ab) * (*y / n_cb)).sum();
    Ok(dot.max(-T::one()).min(T::one()))
}

/// Which triplets of a batch enter the relational loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TripletSelection {
    /// Every triplet with pairwise-distinct indices.
    All,
    /// Uniform sample (with replacement) of distinct-index triplets.
    Sampled(Vec<(usize, usize, usize)>),
}

impl TripletSelection {
    /// Full enumeration when the batch has at most `max` distinct triplets
    /// (or no cap is set); otherwise `max` seeded uniform draws.
    pub fn for_batch<R: Rng + ?Sized>(batch: usize, max: Option<usize>, rng: &mut R) -> Self {
        let total = admissible_triplets(batch);
        match max {
            Some(cap) if total > cap && batch >= 3 => {
                let mut out = Vec::with_capacity(cap);
                while out.len() < cap {
                    let a = rng.random_range(0..batch);
                    let b = rng.random_range(0..batch);
                    let c = rng.random_range(0..batch);
                    if a != b && b != c && a != c {
                        out.push((a, b, c));
                    }
                }
                TripletSelection::Sampled(out)
            }
            _ => TripletSelection::All,
        }
    }

    fn triplets(&self, batch: usize) -> Vec<(usize, usize, usize)> {
        match self {
            TripletSelection::All => {
                let mut out = Vec::with_capacity(admissible_triplets(batch));
                for a in 0..batch {
                    for b in 0..batch {
                        for c in 0..batch {
                            if a != b && b != c && a != c {
                                out.push((a, b, c));
                            }
                        }
                    }
                }
                out
            }
            TripletSelection::Sampled(v) => v.clone(),
        }
    }
}

pub fn admissible_triplets(batch: usize) -> usize {
    if batch < 3 {
        0
    } else {
        batch * (batch - 1) * (batch - 2)
    }
}

/// Angle cosines of every `(a, b, c)` as a `[b, a, c]` cube, plus edge norms `[a, b]`.
fn angle_cube<T: Scalar>(g: &mut Graph<T>, points: Var) -> Result<(Var, Vec<T>)> {
    let d = g.pairwise_diff(points)?;
    let n = g.row_norm(d)?;
    let norms = g.value(n).data().to_vec();
    let n_eps = g.add_scalar(n, T::lit(EDGE_EPS));
    let e = g.div_rows(d, n_eps)?;
    let by_vertex = g.swap_leading(e)?;
    let cos = g.bmm(by_vertex, by_vertex, false, true)?;
    Ok((g.clamp(cos, -T::one(), T::one()), norms))
}

/// Angle-wise relational distillation between two point sets of one batch.
///
/// Mean over the selected triplets of `|cos<t_a t_b t_c> - cos<s_a s_b s_c>|`.
/// The teacher side is read by value; gradients reach `student` only.
pub fn rkd_angle_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher: Var,
    student: Var,
    selection: &TripletSelection,
) -> Result<Var> {
    let teacher = g.constant(g.value(teacher).clone());
    rkd_relational(g, teacher, student, selection)
}

/// Learnable maps `phi` (old features) and `psi` (current features), both `d -> 2d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RelationTransforms<T> {
    pub phi: Linear<T>,
    pub psi: Linear<T>,
}

impl<T: Scalar> RelationTransforms<T> {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Self {
        RelationTransforms {
            phi: Linear::new(embed_dim, 2 * embed_dim, true, rng),
            psi: Linear::new(embed_dim, 2 * embed_dim, true, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.phi.out_dim()
    }

    /// `rkd(phi(old_features), psi(new_features))`, both maps trainable.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        old_features: Var,
        new_features: Var,
        selection: &TripletSelection,
    ) -> Result<Var> {
        let mut ctx = Ctx::new(g, Mode::TRAIN);
        let old_const = ctx.g.constant(ctx.g.value(old_features).clone());
        let t = self.phi.forward(&mut ctx, old_const)?;
        let s = self.psi.forward(&mut ctx, new_features)?;
        rkd_relational(g, t, s, selection)
    }
}

impl<T: Scalar> HasParams<T> for RelationTransforms<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.phi.visit_params(f);
        self.psi.visit_params(f);
    }
}

/// Angle loss where both point sets may carry gradients (transformed teacher points
/// stay trainable through `phi`).
fn rkd_relational<T: Scalar>(g: &mut Graph<T>, t: Var, s: Var, selection: &TripletSelection) -> Result<Var> {
    if g.shape(t).len() != 2 || g.shape(t) != g.shape(s) {
        return Err(Error::invalid(format!("rkd: {:?} vs {:?}", g.shape(t), g.shape(s))));
    }
    let b = g.shape(t)[0];
    if b < 3 {
        return Err(Error::invalid(format!("rkd needs a batch of at least 3, got {}", b)));
    }
    let (cos_t, norm_t) = angle_cube(g, t)?;
    let (cos_s, norm_s) = angle_cube(g, s)?;
    let triplets = selection.triplets(b);
    let count = triplets.len();
    let floor = T::lit(DEGENERATE_EDGE);
    let ok = |norms: &[T], a: usize, bb: usize, c: usize| norms[a * b + bb] >= floor && norms[c * b + bb] >= floor;
    let idx: Vec<usize> = triplets
        .iter()
        .filter(|&&(a, bb, c)| ok(&norm_t, a, bb, c) && ok(&norm_s, a, bb, c))
        .map(|&(a, bb, c)| (bb * b + a) * b + c)
        .collect();
    let ct = g.gather(cos_t, idx.clone())?;
    let cs = g.gather(cos_s, idx)?;
    let diff = g.sub(ct, cs)?;
    let abs = g.abs(diff);
    let total = g.sum_all(abs);
    Ok(g.scale(total, T::one() / T::lit(count.max(1) as f64)))
}

/// Relational loss on a batch of new-task images: the old model's features through
/// `phi` against the current model's features through `psi`.
///
/// The current model runs with batch statistics and is trainable; the snapshot is frozen.
pub fn rkd_loss<T: Scalar>(
    g: &mut Graph<T>,
    new_batch: &Tensor<T>,
    old_model: &ModelSnapshot<T>,
    current_model: &IncrementalModel<T>,
    transforms: &RelationTransforms<T>,
    selection: &TripletSelection,
) -> Result<Var> {
    if new_batch.dim(0) < 3 {
        return Err(Error::invalid(format!("rkd needs a batch of at least 3, got {}", new_batch.dim(0))));
    }
    let x_old = g.constant(new_batch.clone());
    let (teacher, _) = old_model.forward(g, x_old, false)?;
    let x_new = g.constant(new_batch.clone());
    let mut ctx = Ctx::new(g, Mode::TRAIN);
    let student = current_model.extractor.forward(&mut ctx, x_new)?;
    transforms.loss(g, teacher.features, student, selection)
}

/// Base loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lce: f64,
    pub hkd: f64,
    pub rkd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lce: 0.5,
            hkd: 0.15,
            rkd: 0.5,
        }
    }
}

/// Base weights plus their phase-adapted values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub lambda_lce: f64,
    pub lambda_hkd: f64,
    pub lambda_rkd: f64,
    /// `log2(n_new / 2 + 1)`: amount of new knowledge.
    pub alpha: f64,
    /// `sqrt(n_prev / n_new)`: difficulty of keeping old knowledge.
    pub beta: f64,
    pub effective_lce: f64,
    pub effective_hkd: f64,
    pub effective_rkd: f64,
}

/// Scale factors for a phase adding `n_new_classes` to `n_prev_classes`.
pub fn adaptive_factors(n_prev_classes: usize, n_new_classes: usize, bases: LossWeights) -> Result<ScaleFactors> {
    if n_prev_classes == 0 {
        return Err(Error::invalid("adaptive factors need at least one previous class"));
    }
    if n_new_classes < 2 {
        return Err(Error::invalid(format!(
            "adaptive factors need at least two new classes, got {}",
            n_new_classes
        )));
    }
    if [bases.lce, bases.hkd, bases.rkd].iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("base loss weights must be nonnegative"));
    }
    let alpha = (n_new_classes as f64 / 2.0 + 1.0).log2();
    let beta = (n_prev_classes as f64 / n_new_classes as f64).sqrt();
    Ok(ScaleFactors {
        lambda_lce: bases.lce,
        lambda_hkd: bases.hkd,
        lambda_rkd: bases.rkd,
        alpha,
        beta,
        effective_lce: (1.0 + 1.0 / alpha) / beta * bases.lce,
        effective_hkd: alpha * beta * bases.hkd,
        effective_rkd: alpha * beta * bases.rkd,
    })
}

/// Weighted sum of the representation-learning terms.
///
/// Without factors (first phase) only the classification term is used, unweighted.
pub fn rrl_loss<T: Scalar>(
    g: &mut Graph<T>,
    lce: Var,
    hkd: Option<Var>,
    rkd: Option<Var>,
    factors: Option<&ScaleFactors>,
) -> Result<Var> {
    let Some(f) = factors else { return Ok(lce) };
    let mut total = g.scale(lce, T::lit(f.effective_lce));
    if let Some(h) = hkd {
        let h = g.scale(h, T::lit(f.effective_hkd));
        total = g.add(total, h)?;
    }
    if let Some(r) = rkd {
        let r = g.scale(r, T::lit(f.effective_rkd));
        total = g.add(total, r)?;
    }
    Ok(total)
}

/// Per-class tallies of samples presented during head refinement.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounters {
    counts: Vec<u64>,
}

impl ClassCounters {
    pub fn new(classes: usize) -> Self {
        ClassCounters {
            counts: vec![0; classes],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        ClassCounters { counts }
    }

    pub fn observe(&mut self, labels: &[usize]) -> Result<()> {
        let n = self.counts.len();
        for &y in labels {
            let slot = self
                .counts
                .get_mut(y)
                .ok_or_else(|| Error::invalid(format!("label {} outside {} counters", y, n)))?;
            *slot += 1;
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `w_y / sum_j w_j` with `w = 1 / count`; classes not seen yet carry no weight.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let w: Vec<f64> = self
            .counts
            .iter()
            .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect()
    }
}

/// Global class-balanced cross-entropy over every learned class.
pub fn gce_loss<T: Scalar>(g: &mut Graph<T>, all_logits: Var, labels: &[usize], counters: &ClassCounters) -> Result<Var> {
    let c = g.shape(all_logits).get(1).copied().unwrap_or(0);
    if counters.counts().len() != c {
        return Err(Error::invalid(format!(
            "gce: {} counters for {} classes",
            counters.counts().len(),
            c
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y < c && counters.counts()[y] == 0) {
        return Err(Error::state(format!("class {} appears in the batch with a zero counter", y)));
    }
    let per = per_sample_ce(g, all_logits, labels)?;
    let w = counters.normalized_weights();
    let weights = Tensor::new(vec![labels.len()], labels.iter().map(|&y| T::lit(w[y])).collect())?;
    let weighted = g.mul_const(per, &weights)?;
    Ok(g.mean_all(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn kd_identical_is_zero_and_closed_form() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]));
        let b = g.input(t2(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]));
        let l = kd_baseline(&mut g, a, b, KdTemperature::new(2.0).unwrap()).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(1, 2, &[1.0, 0.0]));
        let b = g.input(t2(1, 2, &[0.0, 1.0]));
        let l = kd_baseline(&mut g, a, b, KdTemperature::new(1.0).unwrap()).unwrap();
        let p1 = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        let p0 = 1.0 - p1;
        // q is p reversed
        let want = p1 * (p1 / p0).ln() + p0 * (p0 / p1).ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn kd_shrinks_with_temperature() {
        let mut last = f64::INFINITY;
        for tau in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut g = Graph::<f64>::new();
            let a = g.constant(t2(1, 3, &[2.0, -1.0, 0.5]));
            let b = g.input(t2(1, 3, &[-1.0, 1.5, 0.0]));
            let l = kd_baseline(&mut g, a, b, KdTemperature::new(tau).unwrap()).unwrap();
            let v = g.value(l).item();
            assert!(v < last && v >= 0.0);
            last = v;
        }
        assert!(KdTemperature::new(0.0).is_err());
    }

    #[test]
    fn hkd_values() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::full(&[2, 5], 1.0));
        let s = g.input(Tensor::zeros(&[2, 5]));
        let l = hkd_loss(&mut g, t, s, 5).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let bad = g.input(Tensor::zeros(&[2, 4]));
        assert!(hkd_loss(&mut g, t, bad, 5).is_err());
    }

    #[test]
    fn lce_uniform_is_ln_classes() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(&[3, 4]));
        let l = lce_loss(&mut g, z, &[0, 1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!(lce_loss(&mut g, z, &[0, 1, 4]).is_err());
        let confident = g.input(t2(1, 2, &[100.0, -100.0]));
        let l = lce_loss(&mut g, confident, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn angle_cos_edges() {
        assert_eq!(angle_cos::<f64>(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((angle_cos::<f64>(&[1.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-7);
        let v = angle_cos::<f64>(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert!(angle_cos::<f64>(&[0.0], &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn rkd_rejects_tiny_batches_and_identical_sets_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let p = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let t = g.constant(p.clone());
        let s = g.input(p);
        let l = rkd_angle_loss(&mut g, t, s, &TripletSelection::All).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let t2v = g.constant(Tensor::zeros(&[2, 4]));
        let s2 = g.input(Tensor::zeros(&[2, 4]));
        assert!(rkd_angle_loss(&mut g, t2v, s2, &TripletSelection::All).is_err());
    }

    #[test]
    fn triplet_sampling_is_capped_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(TripletSelection::for_batch(32, Some(100_000), &mut r1), TripletSelection::All);
        let a = TripletSelection::for_batch(64, Some(1000), &mut r1);
        let _ = TripletSelection::for_batch(32, Some(100_000), &mut r2);
        let b = TripletSelection::for_batch(64, Some(1000), &mut r2);
        assert_eq!(a, b);
        match a {
            TripletSelection::Sampled(v) => {
                assert_eq!(v.len(), 1000);
                assert!(v.iter().all(|&(x, y, z)| x != y && y != z && x != z));
            }
            TripletSelection::All => panic!("expected sampling"),
        }
    }

    #[test]
    fn adaptive_factor_values() {
        let f = adaptive_factors(50, 10, LossWeights::default()).unwrap();
        assert!((f.beta - 5f64.sqrt()).abs() < 1e-12);
        assert!((f.alpha - 6f64.log2()).abs() < 1e-12);
        assert_eq!(adaptive_factors(7, 2, LossWeights::default()).unwrap().alpha, 1.0);
        assert!(adaptive_factors(7, 1, LossWeights::default()).is_err());
        assert!(adaptive_factors(0, 4, LossWeights::default()).is_err());
    }

    #[test]
    fn rrl_weighting() {
        let f = adaptive_factors(50, 10, LossWeights::default()).unwrap();
        let mut g = Graph::<f64>::new();
        let one = g.input(Tensor::scalar(1.0));
        let total = rrl_loss(&mut g, one, Some(one), Some(one), Some(&f)).unwrap();
        let want = f.effective_lce + f.effective_hkd + f.effective_rkd;
        assert!((g.value(total).item() - want).abs() < 1e-12);
        let zero = g.input(Tensor::scalar(0.0));
        let z = rrl_loss(&mut g, zero, Some(zero), Some(zero), Some(&f)).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        let first = rrl_loss(&mut g, one, None, None, None).unwrap();
        assert_eq!(g.value(first).item(), 1.0);
    }

    #[test]
    fn gce_equal_counts_and_errors() {
        let mut g = Graph::<f64>::new();
        let logits = t2(3, 3, &[0.2, -0.1, 0.5, 1.0, 0.0, -2.0, 0.3, 0.3, 0.1]);
        let labels = [0, 1, 2];
        let z = g.input(logits.clone());
        let counters = ClassCounters::from_counts(vec![4, 4, 4]);
        let l = gce_loss(&mut g, z, &labels, &counters).unwrap();
        let z2 = g.input(logits);
        let plain = cross_entropy(&mut g, z2, &labels).unwrap();
        assert!((g.value(l).item() - g.value(plain).item() / 3.0).abs() < 1e-12);
        let zero = ClassCounters::from_counts(vec![4, 0, 4]);
        assert!(matches!(gce_loss(&mut g, z, &labels, &zero), Err(Error::InvalidState(_))));
    }
}
