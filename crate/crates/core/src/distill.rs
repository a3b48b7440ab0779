//! Distillation losses: bidirectional KL against each teacher's contrastive
//! distributions, MSE feature alignment, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::contrastive::{image_to_text_probs, text_to_image_probs, ContrastiveBatch};
use crate::error::{Error, Result};
use crate::numerics::{kl_unchecked, DenseMatrix, ProbMatrix, SeededRng, KL_FLOOR};
use crate::weighting::SimplexWeights;

/// Detached outputs of one frozen teacher for the current batch.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub image: DenseMatrix,
    pub text: DenseMatrix,
    pub i2t: ProbMatrix,
    pub t2i: ProbMatrix,
    pub tau: f64,
}

impl TeacherOutputs {
    pub fn from_features(image: DenseMatrix, text: DenseMatrix, tau: f64) -> Result<Self> {
        let batch = ContrastiveBatch::new(&image, &text, tau)?;
        let i2t = image_to_text_probs(&batch)?;
        let t2i = text_to_image_probs(&batch)?;
        Ok(Self {
            image,
            text,
            i2t,
            t2i,
            tau,
        })
    }
}

/// KL values for both directions with gradients w.r.t. the student's raw
/// similarity logits (before the temperature division).
#[derive(Clone, Debug)]
pub struct KlPairLoss {
    pub i2t: f64,
    pub t2i: f64,
    /// `∂ l_i2t / ∂ (U Wᵀ)`, same shape as the i2t distribution.
    pub grad_logits_i2t: DenseMatrix,
    /// `∂ l_t2i / ∂ (W Uᵀ)`, same shape as the t2i distribution.
    pub grad_logits_t2i: DenseMatrix,
}

impl KlPairLoss {
    pub fn total(&self) -> f64 {
        self.i2t + self.t2i
    }

    /// Chains the logit gradients into student feature gradients, weighting
    /// the two directions by `w_i2t` and `w_t2i`.
    pub fn feature_grads(
        &self,
        u: &DenseMatrix,
        w: &DenseMatrix,
        w_i2t: f64,
        w_t2i: f64,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        // logits_i2t = U Wᵀ, logits_t2i = W Uᵀ
        let mut gu = self.grad_logits_i2t.matmul(w)?;
        gu.scale(w_i2t);
        gu.add_scaled(&self.grad_logits_t2i.t_matmul(w)?, w_t2i)?;
        let mut gw = self.grad_logits_i2t.t_matmul(u)?;
        gw.scale(w_i2t);
        gw.add_scaled(&self.grad_logits_t2i.matmul(u)?, w_t2i)?;
        Ok((gu, gw))
    }
}

/// Mean-over-rows `KL(p_T ‖ p_S)` in both directions.
pub fn kl_pair_loss(
    teacher: &TeacherOutputs,
    student_i2t: &ProbMatrix,
    student_t2i: &ProbMatrix,
    tau_student: f64,
) -> Result<KlPairLoss> {
    if !(tau_student > 0.0) {
        return Err(Error::NonPositiveTemperature(tau_student));
    }
    let (i2t, grad_logits_i2t) = directional_kl(&teacher.i2t, student_i2t, tau_student)?;
    let (t2i, grad_logits_t2i) = directional_kl(&teacher.t2i, student_t2i, tau_student)?;
    Ok(KlPairLoss {
        i2t,
        t2i,
        grad_logits_i2t,
        grad_logits_t2i,
    })
}

fn directional_kl(
    teacher: &ProbMatrix,
    student: &ProbMatrix,
    tau_student: f64,
) -> Result<(f64, DenseMatrix)> {
    if teacher.shape() != student.shape() {
        return Err(Error::ShapeMismatch {
            context: "kl_pair_loss",
            expected: teacher.shape(),
            actual: student.shape(),
        });
    }
    let rows = teacher.rows();
    if rows == 0 {
        return Ok((0.0, DenseMatrix::zeros(0, teacher.cols())));
    }
    let mut value = 0.0;
    let mut grad = DenseMatrix::zeros(rows, teacher.cols());
    let scale = 1.0 / (rows as f64 * tau_student);
    for r in 0..rows {
        value += kl_unchecked(teacher.row(r), student.row(r));
        for (g, (ps, pt)) in grad
            .row_mut(r)
            .iter_mut()
            .zip(student.row(r).iter().zip(teacher.row(r)))
        {
            *g = (ps - pt) * scale;
        }
    }
    Ok((value / rows as f64, grad))
}

/// Closed-form `∂ KL(p_T ‖ softmax(z/τ)) / ∂z = (p_S − p_T) / τ` for one row.
pub fn kl_logit_grad(p_teacher: &[f64], student_logits: &[f64], tau: f64) -> Vec<f64> {
    let ps = softmax_row(student_logits, tau);
    ps.iter().zip(p_teacher).map(|(s, t)| (s - t) / tau).collect()
}

/// `∂ CE(p_T, softmax(z/τ)) / ∂z` through the full softmax Jacobian:
/// `Σ_c (−p_T,c / p_S,c) · p_S,c (δ_cj − p_S,j) / τ`.
pub fn ce_logit_grad_via_jacobian(p_teacher: &[f64], student_logits: &[f64], tau: f64) -> Vec<f64> {
    let ps = softmax_row(student_logits, tau);
    let dce_dp: Vec<f64> = p_teacher
        .iter()
        .zip(&ps)
        .map(|(t, s)| -t / s.max(KL_FLOOR))
        .collect();
    (0..ps.len())
        .map(|j| {
            (0..ps.len())
                .map(|c| {
                    let delta = if c == j { 1.0 } else { 0.0 };
                    dce_dp[c] * ps[c] * (delta - ps[j]) / tau
                })
                .sum()
        })
        .collect()
}

fn softmax_row(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseAlign {
    pub value: f64,
    pub image: f64,
    pub text: f64,
    pub grad_u: DenseMatrix,
    pub grad_w: DenseMatrix,
}

/// `mean((u_S − u_T)²) + mean((w_S − w_T)²)` with gradients w.r.t. the
/// student blocks.
pub fn mse_align(
    u_t: &DenseMatrix,
    u_s: &DenseMatrix,
    w_t: &DenseMatrix,
    w_s: &DenseMatrix,
) -> Result<MseAlign> {
    let (image, grad_u) = mse_block(u_t, u_s)?;
    let (text, grad_w) = mse_block(w_t, w_s)?;
    Ok(MseAlign {
        value: image + text,
        image,
        text,
        grad_u,
        grad_w,
    })
}

fn mse_block(t: &DenseMatrix, s: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if t.shape() != s.shape() {
        return Err(Error::ShapeMismatch {
            context: "mse_align",
            expected: t.shape(),
            actual: s.shape(),
        });
    }
    let count = t.data().len();
    if count == 0 {
        return Ok((0.0, s.clone()));
    }
    let mut grad = DenseMatrix::zeros(s.rows(), s.cols());
    let mut sum = 0.0;
    for ((g, sv), tv) in grad.data_mut().iter_mut().zip(s.data()).zip(t.data()) {
        let d = sv - tv;
        sum += d * d;
        *g = 2.0 * d / count as f64;
    }
    Ok((sum / count as f64, grad))
}

/// `Σ_k λ_k F_k` over equally shaped feature matrices.
pub fn weighted_features(features: &[&DenseMatrix], weights: &SimplexWeights) -> Result<DenseMatrix> {
    if features.len() != weights.len() || features.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            actual: features.len(),
        });
    }
    let mut out = DenseMatrix::zeros(features[0].rows(), features[0].cols());
    for (f, &a) in features.iter().zip(weights.as_slice()) {
        out.add_scaled(f, a)?;
    }
    Ok(out)
}

/// Fixed, non-trainable map from student feature width to teacher width.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProjection {
    matrix: DenseMatrix,
}

impl FeatureProjection {
    /// Gaussian entries scaled by `1/√d_student`, drawn once per run.
    pub fn random(student_dim: usize, teacher_dim: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (student_dim as f64).sqrt();
        let mut matrix = DenseMatrix::zeros(student_dim, teacher_dim);
        for v in matrix.data_mut() {
            *v = rng.normal() * scale;
        }
        Self { matrix }
    }

    pub fn from_matrix(matrix: DenseMatrix) -> Self {
        Self { matrix }
    }

    pub fn apply(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        features.matmul(&self.matrix)
    }

    /// Gradient w.r.t. the unprojected features.
    pub fn backprop(&self, grad: &DenseMatrix) -> Result<DenseMatrix> {
        let pt = self.matrix.transpose();
        grad.matmul(&pt)
    }
}

/// Relative weights of the three loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRatios {
    pub clip: f64,
    pub kl: f64,
    pub mse: f64,
}

impl Default for LossRatios {
    fn default() -> Self {
        Self {
            clip: 1.0,
            kl: 1.0,
            mse: 1.0,
        }
    }
}

impl LossRatios {
    pub fn new(clip: f64, kl: f64, mse: f64) -> Result<Self> {
        let r = Self { clip, kl, mse };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("clip", self.clip), ("kl", self.kl), ("mse", self.mse)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositiveRatio { name, value });
            }
        }
        Ok(())
    }

    /// `clip:kl:mse` with shortest float formatting, e.g. `0.5:1:1`.
    pub fn label(&self) -> String {
        format!("{}:{}:{}", self.clip, self.kl, self.mse)
    }
}

/// How the teacher weights enter the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    /// `Σ_k λ_k (l_i2t,k + l_t2i,k)`.
    #[default]
    PerTeacher,
    /// Two weights over directions: `λ_0 mean_k l_i2t,k + λ_1 mean_k l_t2i,k`.
    PerDirection,
}

/// Target used by the MSE alignment term when several teachers are present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseTarget {
    /// One MSE against `Σ_k λ_k` teacher features.
    #[default]
    WeightedAverage,
    /// `Σ_k λ_k MSE_k` against each teacher separately.
    PerTeacher,
}

/// Unweighted loss components for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub l_clip: f64,
    pub l_kl_i2t: Vec<f64>,
    pub l_kl_t2i: Vec<f64>,
    pub l_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_clip: f64,
    pub l_kl_i2t: Vec<f64>,
    pub l_kl_t2i: Vec<f64>,
    pub l_mse: f64,
    pub total: f64,
    pub ratios: LossRatios,
    pub weights: SimplexWeights,
    pub kl_weighting: KlWeighting,
}

impl LossBreakdown {
    /// Weighted (but not γ-scaled) KL term.
    pub fn kl_term(&self) -> f64 {
        weighted_kl(&self.l_kl_i2t, &self.l_kl_t2i, &self.weights, self.kl_weighting)
    }

    pub fn recompute_total(&self) -> f64 {
        self.ratios.kl * self.kl_term() + self.ratios.clip * self.l_clip + self.ratios.mse * self.l_mse
    }
}

fn weighted_kl(i2t: &[f64], t2i: &[f64], weights: &SimplexWeights, mode: KlWeighting) -> f64 {
    let a = weights.as_slice();
    match mode {
        KlWeighting::PerTeacher => a
            .iter()
            .zip(i2t.iter().zip(t2i))
            .map(|(w, (x, y))| w * (x + y))
            .sum(),
        KlWeighting::PerDirection => {
            let k = i2t.len().max(1) as f64;
            let mi: f64 = i2t.iter().sum::<f64>() / k;
            let mt: f64 = t2i.iter().sum::<f64>() / k;
            a[0] * mi + a[1] * mt
        }
    }
}

/// Assembles the weighted total.
pub fn total_loss(
    parts: LossParts,
    ratios: LossRatios,
    weights: &SimplexWeights,
    kl_weighting: KlWeighting,
) -> Result<LossBreakdown> {
    ratios.validate()?;
    assemble(parts, ratios, weights, kl_weighting)
}

/// As [`total_loss`] without the positivity check, so that strategies which
/// switch components off can record a zero ratio.
pub(crate) fn assemble(
    parts: LossParts,
    ratios: LossRatios,
    weights: &SimplexWeights,
    kl_weighting: KlWeighting,
) -> Result<LossBreakdown> {
    if parts.l_kl_i2t.len() != parts.l_kl_t2i.len() {
        return Err(Error::DimensionMismatch {
            expected: parts.l_kl_i2t.len(),
            actual: parts.l_kl_t2i.len(),
        });
    }
    let expected = match kl_weighting {
        KlWeighting::PerTeacher => parts.l_kl_i2t.len(),
        KlWeighting::PerDirection => 2,
    };
    if weights.len() != expected {
        return Err(Error::InvalidSimplex(format!(
            "expected {expected} weights, got {}",
            weights.len()
        )));
    }
    let mut out = LossBreakdown {
        l_clip: parts.l_clip,
        l_kl_i2t: parts.l_kl_i2t,
        l_kl_t2i: parts.l_kl_t2i,
        l_mse: parts.l_mse,
        total: 0.0,
        ratios,
        weights: weights.clone(),
        kl_weighting,
    };
    out.total = out.recompute_total();
    if !out.total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_rows;

    fn prob(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::new(DenseMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn teacher_with(i2t: ProbMatrix, t2i: ProbMatrix) -> TeacherOutputs {
        TeacherOutputs {
            image: DenseMatrix::zeros(i2t.rows(), 1),
            text: DenseMatrix::zeros(t2i.rows(), 1),
            i2t,
            t2i,
            tau: 1.0,
        }
    }

    #[test]
    fn identical_distributions_give_zero() {
        let p = prob(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        let t = teacher_with(p.clone(), p.clone());
        let l = kl_pair_loss(&t, &p, &p, 4.0).unwrap();
        assert_eq!((l.i2t, l.t2i), (0.0, 0.0));
        assert!(l.grad_logits_i2t.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_row_ln2() {
        let t = teacher_with(prob(&[vec![1.0, 0.0]]), prob(&[vec![1.0, 0.0]]));
        let s = prob(&[vec![0.5, 0.5]]);
        let l = kl_pair_loss(&t, &s, &s, 1.0).unwrap();
        assert!((l.i2t - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(l.grad_logits_i2t.row(0), &[-0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let t = teacher_with(prob(&[vec![1.0, 0.0]]), prob(&[vec![1.0, 0.0]]));
        let s = prob(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(
            kl_pair_loss(&t, &s, &s, 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mse_examples() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(mse_align(&a, &a, &b, &b).unwrap().value, 0.0);
        let m = mse_align(&a, &b, &b, &b).unwrap();
        assert_eq!(m.value, 1.0);
        assert_eq!(m.image, 1.0);
        assert_eq!(m.grad_u.row(0), &[-1.0, 1.0]);
        assert!(mse_align(&a, &DenseMatrix::zeros(2, 2), &b, &b).is_err());
    }

    fn parts(clip: f64, i2t: Vec<f64>, t2i: Vec<f64>, mse: f64) -> LossParts {
        LossParts {
            l_clip: clip,
            l_kl_i2t: i2t,
            l_kl_t2i: t2i,
            l_mse: mse,
        }
    }

    #[test]
    fn total_loss_examples() {
        let w1 = SimplexWeights::uniform(1);
        let b = total_loss(
            parts(0.3, vec![0.1], vec![0.2], 0.4),
            LossRatios::default(),
            &w1,
            KlWeighting::PerTeacher,
        )
        .unwrap();
        assert!((b.total - (0.3 + 0.3 + 0.4)).abs() < 1e-15);

        let half_kl = total_loss(
            parts(0.3, vec![0.1], vec![0.2], 0.4),
            LossRatios::new(1.0, 0.5, 1.0).unwrap(),
            &w1,
            KlWeighting::PerTeacher,
        )
        .unwrap();
        assert!((b.total - half_kl.total - 0.15).abs() < 1e-15);

        let w = SimplexWeights::new(vec![0.75, 0.25]).unwrap();
        let b = total_loss(
            parts(0.0, vec![4.0, 8.0], vec![0.0, 0.0], 0.0),
            LossRatios::default(),
            &w,
            KlWeighting::PerTeacher,
        )
        .unwrap();
        assert_eq!(b.kl_term(), 5.0);
        assert!((b.total - b.recompute_total()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_rejects_bad_inputs() {
        let w1 = SimplexWeights::uniform(1);
        assert!(matches!(
            LossRatios::new(1.0, 0.0, 1.0),
            Err(Error::NonPositiveRatio { name: "kl", .. })
        ));
        let bad = LossRatios {
            clip: -1.0,
            kl: 1.0,
            mse: 1.0,
        };
        assert!(total_loss(parts(0.0, vec![0.0], vec![0.0], 0.0), bad, &w1, KlWeighting::PerTeacher).is_err());
        assert!(matches!(
            total_loss(
                parts(0.0, vec![0.0, 0.0], vec![0.0, 0.0], 0.0),
                LossRatios::default(),
                &w1,
                KlWeighting::PerTeacher
            ),
            Err(Error::InvalidSimplex(_))
        ));
    }

    #[test]
    fn doubling_mse_ratio_doubles_its_contribution() {
        let w = SimplexWeights::uniform(2);
        let p = parts(0.7, vec![0.1, 0.3], vec![0.2, 0.05], 0.9);
        let a = total_loss(p.clone(), LossRatios::new(1.0, 1.0, 1.0).unwrap(), &w, KlWeighting::PerTeacher).unwrap();
        let b = total_loss(p, LossRatios::new(1.0, 1.0, 2.0).unwrap(), &w, KlWeighting::PerTeacher).unwrap();
        assert!((b.total - a.total - 0.9).abs() < 1e-15);
    }

    #[test]
    fn duplicated_teachers_match_single_teacher() {
        let one = total_loss(
            parts(0.7, vec![0.13], vec![0.29], 0.9),
            LossRatios::default(),
            &SimplexWeights::uniform(1),
            KlWeighting::PerTeacher,
        )
        .unwrap();
        let two = total_loss(
            parts(0.7, vec![0.13, 0.13], vec![0.29, 0.29], 0.9),
            LossRatios::default(),
            &SimplexWeights::uniform(2),
            KlWeighting::PerTeacher,
        )
        .unwrap();
        assert_eq!(one.total, two.total);
    }

    #[test]
    fn direction_weighting_uses_two_weights() {
        let w = SimplexWeights::new(vec![0.25, 0.75]).unwrap();
        let b = total_loss(
            parts(0.0, vec![1.0, 3.0], vec![2.0, 2.0], 0.0),
            LossRatios::default(),
            &w,
            KlWeighting::PerDirection,
        )
        .unwrap();
        assert_eq!(b.kl_term(), 0.25 * 2.0 + 0.75 * 2.0);
    }

    #[test]
    fn ce_and_kl_gradients_agree() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let logits_t: Vec<f64> = (0..5).map(|_| rng.normal() * 3.0).collect();
            let pt = softmax_rows(&DenseMatrix::from_rows(&[logits_t]).unwrap(), 1.0).unwrap();
            let zs: Vec<f64> = (0..5).map(|_| rng.normal() * 3.0).collect();
            let a = kl_logit_grad(pt.row(0), &zs, 2.0);
            let b = ce_logit_grad_via_jacobian(pt.row(0), &zs, 2.0);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn projection_backprop_is_transpose() {
        let p = FeatureProjection::from_matrix(
            DenseMatrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, 1.0, -1.0]]).unwrap(),
        );
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(p.apply(&x).unwrap().row(0), &[1.0, 3.0, -1.0]);
        let g = DenseMatrix::from_rows(&[vec![1.0, 0.0, 1.0]]).unwrap();
        assert_eq!(p.backprop(&g).unwrap().row(0), &[1.0, -1.0]);
    }
}
