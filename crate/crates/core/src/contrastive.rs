//! Batch contrastive distributions, the symmetric contrastive loss, and
//! nearest-class-vector classification.

use crate::error::{Error, Result};
use crate::numerics::{pairwise_logits, softmax_rows, DenseMatrix, ProbMatrix, KL_FLOOR};

const UNIT_TOL: f64 = 1e-9;

/// How the text side of a batch relates to the image side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairingMode {
    /// `W` holds the paired texts of the batch; label `i` is row `i`.
    InBatch,
    /// `W` holds one cached vector per class; labels are class ids.
    ClassBank,
}

/// Image features `U` (B×d) against text features `W` (B×d or N×d).
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch<'a> {
    u: &'a DenseMatrix,
    w: &'a DenseMatrix,
    tau: f64,
}

impl<'a> ContrastiveBatch<'a> {
    /// Validated constructor: rows of both matrices must be unit norm.
    pub fn new(u: &'a DenseMatrix, w: &'a DenseMatrix, tau: f64) -> Result<Self> {
        if !u.rows_unit_norm(UNIT_TOL) || !w.rows_unit_norm(UNIT_TOL) {
            return Err(Error::NotADistribution(
                "contrastive features must have unit-norm rows".into(),
            ));
        }
        Self::from_raw(u, w, tau)
    }

    /// Skips the unit-norm check; used when differentiating with respect to
    /// unnormalized perturbations.
    pub fn from_raw(u: &'a DenseMatrix, w: &'a DenseMatrix, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::NonPositiveTemperature(tau));
        }
        if u.cols() != w.cols() {
            return Err(Error::DimensionMismatch {
                expected: u.cols(),
                actual: w.cols(),
            });
        }
        Ok(Self { u, w, tau })
    }

    pub fn image_features(&self) -> &DenseMatrix {
        self.u
    }

    pub fn text_features(&self) -> &DenseMatrix {
        self.w
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn logits(&self) -> DenseMatrix {
        pairwise_logits(self.u, self.w).expect("columns checked at construction")
    }
}

/// `p(P|Q)`: row `i` is the softmax over text rows `j` of `U_i·W_j / τ`.
pub fn image_to_text_probs(batch: &ContrastiveBatch<'_>) -> Result<ProbMatrix> {
    softmax_rows(&batch.logits(), batch.tau)
}

/// `p(Q|P)`: row `j` is the softmax over image rows `i` of `W_j·U_i / τ`.
pub fn text_to_image_probs(batch: &ContrastiveBatch<'_>) -> Result<ProbMatrix> {
    softmax_rows(&pairwise_logits(batch.w, batch.u)?, batch.tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValueWithGrad {
    pub value: f64,
    pub grad_u: DenseMatrix,
    pub grad_w: DenseMatrix,
    /// Image-to-text cross-entropy component.
    pub i2t: f64,
    /// Text-to-image cross-entropy component.
    pub t2i: f64,
}

/// One-hot targets for `labels` over `candidates` text rows.
pub fn one_hot_targets(labels: &[usize], candidates: usize) -> Result<DenseMatrix> {
    let mut t = DenseMatrix::zeros(labels.len(), candidates);
    for (i, &y) in labels.iter().enumerate() {
        if y >= candidates {
            return Err(Error::LabelOutOfRange {
                label: y,
                candidates,
            });
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

/// Symmetric contrastive loss with hard labels.
///
/// `value = ½ (CE_i2t + CE_t2i)`. The image-to-text term is the mean over
/// images of `-ln p(P|Q)[i, y_i]`; the text-to-image term is the mean over
/// images of `-ln p(Q|P)[y_i, i]`, i.e. each image must be picked out by its
/// own text row among the batch images.
pub fn clip_loss(batch: &ContrastiveBatch<'_>, labels: &[usize]) -> Result<LossValueWithGrad> {
    if labels.len() != batch.u.rows() {
        return Err(Error::DimensionMismatch {
            expected: batch.u.rows(),
            actual: labels.len(),
        });
    }
    let targets = one_hot_targets(labels, batch.w.rows())?;
    clip_loss_soft(batch, &targets)
}

/// [`clip_loss`] with soft targets: `targets` is B×N, each row a distribution
/// over text rows (mixup produces these).
pub fn clip_loss_soft(
    batch: &ContrastiveBatch<'_>,
    targets: &DenseMatrix,
) -> Result<LossValueWithGrad> {
    let (b, n) = (batch.u.rows(), batch.w.rows());
    if targets.shape() != (b, n) {
        return Err(Error::ShapeMismatch {
            context: "contrastive targets",
            expected: (b, n),
            actual: targets.shape(),
        });
    }
    if b == 0 {
        return Ok(LossValueWithGrad {
            value: 0.0,
            grad_u: DenseMatrix::zeros(0, batch.u.cols()),
            grad_w: DenseMatrix::zeros(n, batch.w.cols()),
            i2t: 0.0,
            t2i: 0.0,
        });
    }
    let tau = batch.tau;
    let logits = batch.logits();
    let p = softmax_rows(&logits, tau)?;
    let t = softmax_rows(&logits.transpose(), tau)?;

    let inv_b = 1.0 / b as f64;
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    // d value / d logits, B×N
    let mut dl = DenseMatrix::zeros(b, n);
    let coef = 0.5 * inv_b / tau;

    for i in 0..b {
        let ti = targets.row(i);
        let pi = p.row(i);
        let mass: f64 = ti.iter().sum();
        for c in 0..n {
            if ti[c] > 0.0 {
                i2t -= ti[c] * pi[c].max(KL_FLOOR).ln();
                t2i -= ti[c] * t.row(c)[i].max(KL_FLOOR).ln();
            }
            dl.set(i, c, coef * (mass * pi[c] - ti[c]));
        }
    }
    for c in 0..n {
        let class_mass: f64 = (0..b).map(|i| targets.get(i, c)).sum();
        if class_mass == 0.0 {
            continue;
        }
        let tc = t.row(c);
        for j in 0..b {
            let v = dl.get(j, c) + coef * (class_mass * tc[j] - targets.get(j, c));
            dl.set(j, c, v);
        }
    }
    i2t *= inv_b;
    t2i *= inv_b;

    let grad_u = dl.matmul(batch.w)?;
    let grad_w = dl.t_matmul(batch.u)?;
    Ok(LossValueWithGrad {
        value: 0.5 * (i2t + t2i),
        grad_u,
        grad_w,
        i2t,
        t2i,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub labels: Vec<usize>,
    pub max_probs: Vec<f64>,
}

/// Predicts the bank row with the highest image-to-text probability for each
/// image (lowest index on ties).
pub fn classify(u: &DenseMatrix, bank: &DenseMatrix, tau: f64) -> Result<Classification> {
    if bank.rows() == 0 {
        return Err(Error::EmptyBank);
    }
    let batch = ContrastiveBatch::from_raw(u, bank, tau)?;
    let probs = image_to_text_probs(&batch)?;
    let logits = batch.logits();
    let mut labels = Vec::with_capacity(u.rows());
    let mut max_probs = Vec::with_capacity(u.rows());
    for i in 0..u.rows() {
        let best = argmax_first(logits.row(i));
        labels.push(best);
        max_probs.push(probs.row(i)[best]);
    }
    Ok(Classification { labels, max_probs })
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn unit_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            let v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
            m.row_mut(r)
                .copy_from_slice(&crate::numerics::l2_normalize(&v).unwrap());
        }
        m
    }

    #[test]
    fn single_candidate_is_certain() {
        let u = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = ContrastiveBatch::new(&u, &u, 1.0).unwrap();
        assert_eq!(image_to_text_probs(&b).unwrap().row(0), &[1.0]);
        assert_eq!(text_to_image_probs(&b).unwrap().row(0), &[1.0]);
    }

    #[test]
    fn orthonormal_rows_give_hand_softmax() {
        let u = DenseMatrix::identity(2);
        let b = ContrastiveBatch::new(&u, &u, 1.0).unwrap();
        let p = image_to_text_probs(&b).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let expect = [hi, lo, lo, hi];
        for (a, b) in p.matrix().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(text_to_image_probs(&b).unwrap(), p);
    }

    #[test]
    fn huge_temperature_flattens() {
        let mut rng = SeededRng::new(3);
        let u = unit_rows(3, 4, &mut rng);
        let w = unit_rows(5, 4, &mut rng);
        let b = ContrastiveBatch::new(&u, &w, 1e6).unwrap();
        for v in image_to_text_probs(&b).unwrap().matrix().data() {
            assert!((v - 0.2).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_rows_give_ln_batch() {
        let row = crate::numerics::l2_normalize(&[1.0, 2.0, 3.0]).unwrap();
        let u = DenseMatrix::from_rows(&vec![row; 4]).unwrap();
        let b = ContrastiveBatch::new(&u, &u, 0.7).unwrap();
        let l = clip_loss(&b, &[0, 1, 2, 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn sharp_orthonormal_loss_vanishes() {
        let u = DenseMatrix::identity(2);
        let b = ContrastiveBatch::new(&u, &u, 0.05).unwrap();
        let l = clip_loss(&b, &[0, 1]).unwrap();
        assert!(l.value < 1e-8 && l.value >= 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let u = DenseMatrix::identity(2);
        let b = ContrastiveBatch::new(&u, &u, 1.0).unwrap();
        assert!(matches!(
            clip_loss(&b, &[0, 2]),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn unnormalized_features_rejected() {
        let u = DenseMatrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(ContrastiveBatch::new(&u, &u, 1.0).is_err());
        assert!(matches!(
            ContrastiveBatch::from_raw(&u, &u, -1.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn classify_examples() {
        let bank = DenseMatrix::identity(3);
        let u = DenseMatrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let c = classify(&u, &bank, 4.0).unwrap();
        assert_eq!(c.labels, vec![2]);

        let one = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let c = classify(&u, &one, 4.0).unwrap();
        assert_eq!(c.labels, vec![0]);
        assert_eq!(c.max_probs, vec![1.0]);

        assert!(matches!(
            classify(&u, &DenseMatrix::zeros(0, 3), 1.0),
            Err(Error::EmptyBank)
        ));
        // ties go to the lowest index
        let tie = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let q = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(classify(&q, &tie, 1.0).unwrap().labels, vec![0]);
    }

    #[test]
    fn soft_targets_reduce_to_hard() {
        let mut rng = SeededRng::new(17);
        let u = unit_rows(4, 3, &mut rng);
        let w = unit_rows(3, 3, &mut rng);
        let b = ContrastiveBatch::new(&u, &w, 0.5).unwrap();
        let labels = [2, 0, 1, 2];
        let hard = clip_loss(&b, &labels).unwrap();
        let soft = clip_loss_soft(&b, &one_hot_targets(&labels, 3).unwrap()).unwrap();
        assert_eq!(hard, soft);
    }

    proptest! {
        #[test]
        fn probs_match_composed_oracle(seed in 0u64..10_000, b in 1usize..6, n in 1usize..6, tau in 0.1f64..10.0) {
            let mut rng = SeededRng::new(seed);
            let u = unit_rows(b, 4, &mut rng);
            let w = unit_rows(n, 4, &mut rng);
            let batch = ContrastiveBatch::new(&u, &w, tau).unwrap();
            let i2t = image_to_text_probs(&batch).unwrap();
            let oracle = softmax_rows(&pairwise_logits(&u, &w).unwrap(), tau).unwrap();
            prop_assert!(i2t.matrix().max_abs_diff(oracle.matrix()) < 1e-12);
            let t2i = text_to_image_probs(&batch).unwrap();
            let oracle = softmax_rows(&pairwise_logits(&u, &w).unwrap().transpose(), tau).unwrap();
            prop_assert!(t2i.matrix().max_abs_diff(oracle.matrix()) < 1e-12);
            for r in 0..t2i.rows() {
                let s: f64 = t2i.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn clip_loss_permutation_invariant_and_nonnegative(seed in 0u64..10_000, b in 1usize..7) {
            let mut rng = SeededRng::new(seed);
            let u = unit_rows(b, 3, &mut rng);
            let w = unit_rows(b, 3, &mut rng);
            let labels: Vec<usize> = (0..b).collect();
            let base = clip_loss(&ContrastiveBatch::new(&u, &w, 0.8).unwrap(), &labels).unwrap();
            prop_assert!(base.value >= 0.0);
            let perm = rng.permutation(b);
            let pu = u.select_rows(&perm);
            let pw = w.select_rows(&perm);
            let permuted = clip_loss(&ContrastiveBatch::new(&pu, &pw, 0.8).unwrap(), &labels).unwrap();
            prop_assert!((base.value - permuted.value).abs() < 1e-12);
        }

        #[test]
        fn classify_invariant_to_temperature(seed in 0u64..10_000) {
            let mut rng = SeededRng::new(seed);
            let u = unit_rows(6, 5, &mut rng);
            let bank = unit_rows(4, 5, &mut rng);
            let a = classify(&u, &bank, 0.5).unwrap().labels;
            prop_assert_eq!(&a, &classify(&u, &bank, 4.0).unwrap().labels);
            prop_assert_eq!(&a, &classify(&u, &bank, 100.0).unwrap().labels);
        }
    }
}
