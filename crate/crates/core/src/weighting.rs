//! Teacher weighting strategies.
//!
//! * `avg`: uniform weights.
//! * `lsr`: weights proportional to each teacher's image/label-text similarity.
//! * `dsw`: the min-norm point of the convex hull of per-teacher gradients
//!   (multiple-gradient descent), solved by Frank-Wolfe.
//!
//! The min-norm solver works on the Gram matrix of the gradients, rescaled
//! so that the largest squared gradient norm is one. Every stopping and
//! tie threshold therefore applies to the rescaled problem, which makes the
//! returned weights invariant to a common positive scaling of the inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, dot, DenseMatrix, DIST_TOL};

/// Point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights {
    alpha: Vec<f64>,
}

impl SimplexWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidSimplex("no weights".into()));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidSimplex(format!("negative or non-finite entry in {alpha:?}")));
        }
        let s: f64 = alpha.iter().sum();
        if (s - 1.0).abs() > DIST_TOL {
            return Err(Error::InvalidSimplex(format!("weights sum to {s}")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform weights need at least one entry");
        Self {
            alpha: vec![1.0 / k as f64; k],
        }
    }

    pub fn vertex(k: usize, i: usize) -> Self {
        let mut alpha = vec![0.0; k];
        alpha[i] = 1.0;
        Self { alpha }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        Self::new(self.alpha.clone()).is_ok()
    }
}

/// Teacher weighting strategy as named in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// No distillation: contrastive loss only.
    Base,
    /// Uniform teacher weights.
    Avg,
    /// Label-similarity ratio weights.
    Lsr,
    /// Min-norm (MGDA) weights over per-teacher gradients.
    Dsw,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Base, Strategy::Avg, Strategy::Lsr, Strategy::Dsw];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Avg => "avg",
            Strategy::Lsr => "lsr",
            Strategy::Dsw => "dsw",
        }
    }

    pub fn distills(&self) -> bool {
        !matches!(self, Strategy::Base)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Strategy::Base),
            "avg" => Ok(Strategy::Avg),
            "lsr" => Ok(Strategy::Lsr),
            "dsw" => Ok(Strategy::Dsw),
            other => Err(Error::config("strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

/// Per-teacher flattened gradients over the shared student parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherGradientSet {
    grads: Vec<Vec<f64>>,
    objectives: Vec<f64>,
}

impl TeacherGradientSet {
    pub fn new(grads: Vec<Vec<f64>>, objectives: Vec<f64>) -> Result<Self> {
        if grads.is_empty() {
            return Err(Error::EmptyGradientSet);
        }
        if objectives.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                expected: grads.len(),
                actual: objectives.len(),
            });
        }
        let n = grads[0].len();
        for g in &grads {
            if g.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("teacher gradient"));
            }
        }
        Ok(Self { grads, objectives })
    }

    /// Gradients only; objective values default to zero.
    pub fn from_grads(grads: Vec<Vec<f64>>) -> Result<Self> {
        let k = grads.len();
        Self::new(grads, vec![0.0; k])
    }

    pub fn k(&self) -> usize {
        self.grads.len()
    }

    pub fn dim(&self) -> usize {
        self.grads[0].len()
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn objectives(&self) -> &[f64] {
        &self.objectives
    }

    pub fn gram(&self) -> Vec<Vec<f64>> {
        let k = self.k();
        let mut m = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let v = dot(&self.grads[i], &self.grads[j]);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }

    /// `Σ_k α_k g_k`.
    pub fn combine(&self, weights: &SimplexWeights) -> Vec<f64> {
        let mut d = vec![0.0; self.dim()];
        for (g, &a) in self.grads.iter().zip(weights.as_slice()) {
            if a == 0.0 {
                continue;
            }
            for (di, gi) in d.iter_mut().zip(g) {
                *di += a * gi;
            }
        }
        d
    }
}

/// Nonnegative per-teacher similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScores {
    r: Vec<f64>,
}

impl SimilarityScores {
    /// Negative scores are clamped to zero.
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity score"));
        }
        Ok(Self {
            r: r.into_iter().map(|v| v.max(0.0)).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsrWeights {
    pub weights: SimplexWeights,
    /// Set when every score was zero and uniform weights were substituted.
    pub degenerate: bool,
}

/// `α_k = r_k / Σ_j r_j`, or uniform with the degenerate flag when all
/// scores vanish.
pub fn lsr_weights(scores: &SimilarityScores) -> Result<LsrWeights> {
    let r = scores.as_slice();
    if r.is_empty() {
        return Err(Error::EmptyGradientSet);
    }
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        return Ok(LsrWeights {
            weights: SimplexWeights::uniform(r.len()),
            degenerate: true,
        });
    }
    Ok(LsrWeights {
        weights: SimplexWeights::new(r.iter().map(|v| v / total).collect())?,
        degenerate: false,
    })
}

/// Mean over the batch of `max(0, cos(u_i, bank[y_i]))`, the teacher's own
/// image feature against its cached class vector for the true label.
pub fn teacher_label_similarity(
    image_features: &DenseMatrix,
    labels: &[usize],
    bank: &DenseMatrix,
) -> Result<f64> {
    let targets = crate::contrastive::one_hot_targets(labels, bank.rows())?;
    teacher_label_similarity_soft(image_features, &targets, bank)
}

/// Soft-label form: `mean_i Σ_c t_ic max(0, cos(u_i, bank_c))`.
pub fn teacher_label_similarity_soft(
    image_features: &DenseMatrix,
    targets: &DenseMatrix,
    bank: &DenseMatrix,
) -> Result<f64> {
    if bank.rows() == 0 {
        return Err(Error::EmptyBank);
    }
    if targets.shape() != (image_features.rows(), bank.rows()) {
        return Err(Error::ShapeMismatch {
            context: "label similarity targets",
            expected: (image_features.rows(), bank.rows()),
            actual: targets.shape(),
        });
    }
    let b = image_features.rows();
    if b == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..b {
        for (c, &t) in targets.row(i).iter().enumerate() {
            if t > 0.0 {
                total += t * cosine_sim(image_features.row(i), bank.row(c))?.max(0.0);
            }
        }
    }
    Ok(total / b as f64)
}

/// Squared-distance threshold below which two points count as identical.
const TIE_EPS: f64 = 1e-18;

/// Closed-form min-norm point on the segment `[g1, g2]`.
///
/// Returns `γ` (the weight on `g1`) and `d = γ g1 + (1 − γ) g2`.
pub fn min_norm_2(g1: &[f64], g2: &[f64]) -> Result<(f64, Vec<f64>)> {
    if g1.len() != g2.len() {
        return Err(Error::DimensionMismatch {
            expected: g1.len(),
            actual: g2.len(),
        });
    }
    let diff: Vec<f64> = g1.iter().zip(g2).map(|(a, b)| a - b).collect();
    let denom = dot(&diff, &diff);
    let gamma = if denom < TIE_EPS {
        0.5
    } else {
        // (g2 − g1)·g2 / ‖g1 − g2‖²
        (-dot(&diff, g2) / denom).clamp(0.0, 1.0)
    };
    let d = g1
        .iter()
        .zip(g2)
        .map(|(a, b)| gamma * a + (1.0 - gamma) * b)
        .collect();
    Ok((gamma, d))
}

/// Segment line search from Gram entries `‖a‖²`, `⟨a, b⟩`, `‖b‖²`.
fn min_norm_2_gram(aa: f64, ab: f64, bb: f64) -> f64 {
    let denom = aa - 2.0 * ab + bb;
    if denom < TIE_EPS {
        0.5
    } else {
        ((bb - ab) / denom).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrankWolfeResult {
    pub weights: SimplexWeights,
    /// Min-norm point `Σ_k α_k g_k`.
    pub d: Vec<f64>,
    /// `½ ‖d‖²`.
    pub objective: f64,
    /// Number of line-search steps taken.
    pub iterations: usize,
    pub converged: bool,
    /// Objective `½‖d‖²` at the start and after every step.
    pub history: Vec<f64>,
}

pub const DSW_MAX_ITER: usize = 100;
pub const DSW_TOL: f64 = 1e-10;

/// Frank-Wolfe for `min ½‖Σ α_k g_k‖²` over the simplex.
///
/// Starts from uniform weights. Each step takes the vertex `t` minimizing
/// `⟨g_k, d⟩` (lowest index on ties) and moves to the min-norm point of the
/// segment `[d, g_t]`. Stops once the gap `⟨d, d − g_t⟩` is at most `tol`
/// (on the rescaled problem) or after `max_iter` steps.
pub fn frank_wolfe_min_norm(
    set: &TeacherGradientSet,
    max_iter: usize,
    tol: f64,
) -> Result<FrankWolfeResult> {
    let k = set.k();
    let raw = set.gram();
    let scale = (0..k).map(|i| raw[i][i]).fold(0.0, f64::max);
    let m: Vec<Vec<f64>> = if scale > 0.0 {
        raw.iter()
            .map(|row| row.iter().map(|v| v / scale).collect())
            .collect()
    } else {
        raw.clone()
    };

    let mut alpha = vec![1.0 / k as f64; k];
    let quad = |alpha: &[f64]| -> (Vec<f64>, f64) {
        let ma: Vec<f64> = (0..k).map(|i| dot(&m[i], alpha)).collect();
        let dd = dot(alpha, &ma);
        (ma, dd)
    };
    let (mut ma, mut dd) = quad(&alpha);
    let mut history = vec![0.5 * dd * scale];
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let t = argmin_first(&ma);
        let gap = dd - ma[t];
        if gap <= tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        let gamma = min_norm_2_gram(dd, ma[t], m[t][t]);
        for a in alpha.iter_mut() {
            *a *= gamma;
        }
        alpha[t] += 1.0 - gamma;
        (ma, dd) = quad(&alpha);
        history.push(0.5 * dd * scale);
        iterations += 1;
    }

    let s: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= s);
    let weights = SimplexWeights::new(alpha)?;
    let d = set.combine(&weights);
    let objective = 0.5 * dot(&d, &d);
    Ok(FrankWolfeResult {
        weights,
        d,
        objective,
        iterations,
        converged,
        history,
    })
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = j;
        }
    }
    best
}

/// MGDA weights with the default solver budget.
pub fn dsw_weights(set: &TeacherGradientSet) -> Result<FrankWolfeResult> {
    frank_wolfe_min_norm(set, DSW_MAX_ITER, DSW_TOL)
}

/// Exhaustive search over the simplex lattice with spacing `grid_step`.
///
/// Returns the first lattice point (in lexicographic enumeration order)
/// attaining the smallest `½‖Σ α_k g_k‖²`.
pub fn brute_force_min_norm(set: &TeacherGradientSet, grid_step: f64) -> Result<(SimplexWeights, f64)> {
    let k = set.k();
    if k > 4 {
        return Err(Error::TooManyTeachers(k));
    }
    let steps = (1.0 / grid_step).round();
    if !(grid_step > 0.0) || steps < 1.0 || (steps * grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::config("grid_step", format!("{grid_step} does not divide 1")));
    }
    let steps = steps as usize;
    let gram = set.gram();
    let mut counts = vec![0usize; k];
    let mut best = (f64::INFINITY, vec![0usize; k]);
    enumerate_lattice(0, steps, &mut counts, &mut |c| {
        let alpha: Vec<f64> = c.iter().map(|&n| n as f64 / steps as f64).collect();
        let obj = 0.5
            * (0..k)
                .map(|i| alpha[i] * dot(&gram[i], &alpha))
                .sum::<f64>();
        if obj < best.0 {
            best = (obj, c.to_vec());
        }
    });
    let alpha = best.1.iter().map(|&n| n as f64 / steps as f64).collect();
    Ok((SimplexWeights::new(alpha)?, best.0))
}

fn enumerate_lattice(pos: usize, remaining: usize, counts: &mut [usize], visit: &mut impl FnMut(&[usize])) {
    if pos == counts.len() - 1 {
        counts[pos] = remaining;
        visit(counts);
        return;
    }
    for n in 0..=remaining {
        counts[pos] = n;
        enumerate_lattice(pos + 1, remaining - n, counts, visit);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParetoCertificate {
    pub passes: bool,
    /// `‖d‖ ≤ tol`: no common descent direction exists.
    pub stationary: bool,
    /// `⟨d, g_k⟩ − ‖d‖²` per teacher.
    pub slacks: Vec<f64>,
}

/// Checks the min-norm variational inequality `⟨d, g_k⟩ ≥ ‖d‖² − tol`.
///
/// When it holds and `d ≠ 0`, `−d` decreases every teacher objective.
pub fn certify_pareto_stationarity(d: &[f64], set: &TeacherGradientSet, tol: f64) -> ParetoCertificate {
    let dd = dot(d, d);
    let slacks: Vec<f64> = set.grads().iter().map(|g| dot(d, g) - dd).collect();
    let stationary = dd.sqrt() <= tol;
    let passes = stationary || slacks.iter().all(|&s| s >= -tol);
    ParetoCertificate {
        passes,
        stationary,
        slacks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;
    use super::Strategy;

    fn set(grads: Vec<Vec<f64>>) -> TeacherGradientSet {
        TeacherGradientSet::from_grads(grads).unwrap()
    }

    fn random_set(rng: &mut SeededRng, k: usize, dim: usize) -> TeacherGradientSet {
        set((0..k).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect())
    }

    #[test]
    fn lsr_examples() {
        let w = lsr_weights(&SimilarityScores::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(w.weights.as_slice(), &[0.5, 0.5]);
        let w = lsr_weights(&SimilarityScores::new(vec![3.0, 1.0]).unwrap()).unwrap();
        assert_eq!(w.weights.as_slice(), &[0.75, 0.25]);
        assert!(!w.degenerate);
        let w = lsr_weights(&SimilarityScores::new(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(w.weights.as_slice(), &[0.5, 0.5]);
        assert!(w.degenerate);
        let w = lsr_weights(&SimilarityScores::new(vec![-0.3, 0.6]).unwrap()).unwrap();
        assert_eq!(w.weights.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn label_similarity_examples() {
        let bank = DenseMatrix::identity(3);
        let u = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(teacher_label_similarity(&u, &[0, 2], &bank).unwrap(), 1.0);
        assert_eq!(teacher_label_similarity(&u, &[1, 1], &bank).unwrap(), 0.0);

        let mut rng = SeededRng::new(12);
        let u = DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let bank = DenseMatrix::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
        let labels = [0, 2, 1, 2];
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let (a, b) = (u.row(i), bank.row(y));
            let c = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
            expect += c.max(0.0);
        }
        expect /= 4.0;
        let got = teacher_label_similarity(&u, &labels, &bank).unwrap();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn min_norm_2_examples() {
        let (g, d) = min_norm_2(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g, 0.5);
        assert_eq!(d, vec![0.5, 0.5]);
        let (g, d) = min_norm_2(&[1.0, 0.0], &[2.0, 0.0]).unwrap();
        assert_eq!(g, 1.0);
        assert_eq!(d, vec![1.0, 0.0]);
        let (g, d) = min_norm_2(&[1.0, -2.0], &[-1.0, 2.0]).unwrap();
        assert_eq!(g, 0.5);
        assert_eq!(d, vec![0.0, 0.0]);
        assert!(min_norm_2(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn frank_wolfe_examples() {
        let r = frank_wolfe_min_norm(&set(vec![vec![1.0, 2.0]]), 10, 1e-12).unwrap();
        assert_eq!(r.weights.as_slice(), &[1.0]);
        assert_eq!(r.d, vec![1.0, 2.0]);
        assert!(matches!(
            TeacherGradientSet::from_grads(vec![]),
            Err(Error::EmptyGradientSet)
        ));

        // identical teachers keep the uniform starting point
        let r = dsw_weights(&set(vec![vec![1.0, 3.0], vec![1.0, 3.0]])).unwrap();
        assert_eq!(r.weights.as_slice(), &[0.5, 0.5]);

        // a zero-gradient teacher puts the origin in the hull
        let r = dsw_weights(&set(vec![vec![1.0, 3.0], vec![0.0, 0.0]])).unwrap();
        assert_eq!(r.weights.as_slice(), &[0.0, 1.0]);
        assert!(r.d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adversarial_teacher_nearly_cancels() {
        let mut rng = SeededRng::new(4);
        let g1: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let g2: Vec<f64> = g1.iter().map(|v| -v + 1e-3 * rng.normal()).collect();
        let r = dsw_weights(&set(vec![g1.clone(), g2.clone()])).unwrap();
        let (gamma, d) = min_norm_2(&g1, &g2).unwrap();
        assert!((r.weights.as_slice()[0] - gamma).abs() < 1e-9);
        assert!((r.weights.as_slice()[0] - 0.5).abs() < 0.01);
        assert!(dot(&d, &d).sqrt() < 1e-2 * dot(&g1, &g1).sqrt());

        // uniform averaging of opposing gradients of unequal length leaves a residual
        let g2: Vec<f64> = g1.iter().map(|v| -2.0 * v).collect();
        let avg = set(vec![g1.clone(), g2.clone()]).combine(&SimplexWeights::uniform(2));
        assert!(dot(&avg, &avg) > 0.0);
        let r = dsw_weights(&set(vec![g1, g2])).unwrap();
        assert!(dot(&r.d, &r.d).sqrt() < 1e-12);
    }

    #[test]
    fn brute_force_examples() {
        let (w, obj) = brute_force_min_norm(&set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]), 0.01).unwrap();
        assert!((w.as_slice()[0] - 0.5).abs() < 1e-12);
        assert!((obj - 0.25).abs() < 1e-12);
        let (w, _) = brute_force_min_norm(&set(vec![vec![1.0, 0.0]]), 0.01).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
        let five = set(vec![vec![1.0]; 5]);
        assert!(matches!(
            brute_force_min_norm(&five, 0.1),
            Err(Error::TooManyTeachers(5))
        ));
        assert!(brute_force_min_norm(&set(vec![vec![1.0]]), 0.3).is_err());
    }

    #[test]
    fn certificate_examples() {
        let s = set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (_, d) = min_norm_2(&s.grads()[0], &s.grads()[1]).unwrap();
        let c = certify_pareto_stationarity(&d, &s, 1e-12);
        assert!(c.passes && !c.stationary);
        assert_eq!(c.slacks, vec![0.0, 0.0]);

        let s = set(vec![vec![1.0, 1.0], vec![2.0, 2.0]]);
        let c = certify_pareto_stationarity(&[1.0, 1.0], &s, 1e-12);
        assert!(c.passes);

        let s = set(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let c = certify_pareto_stationarity(&[0.0, 0.0], &s, 1e-9);
        assert!(c.stationary && c.passes);

        // a vertex that is not the min-norm point fails
        let s = set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(!certify_pareto_stationarity(&[1.0, 0.0], &s, 1e-9).passes);
    }

    #[test]
    fn strategy_parsing() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("mean".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn frank_wolfe_history_is_monotone(seed in 0u64..5000, k in 2usize..6, dim in 1usize..8) {
            let mut rng = SeededRng::new(seed);
            let s = random_set(&mut rng, k, dim);
            let r = frank_wolfe_min_norm(&s, 200, 1e-12).unwrap();
            prop_assert!(r.weights.is_valid());
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            }
        }

        #[test]
        fn common_scaling_leaves_weights(seed in 0u64..5000, k in 2usize..5, c in 0.01f64..100.0) {
            let mut rng = SeededRng::new(seed);
            let s = random_set(&mut rng, k, 6);
            let scaled = set(s.grads().iter().map(|g| g.iter().map(|v| v * c).collect()).collect());
            let a = dsw_weights(&s).unwrap();
            let b = dsw_weights(&scaled).unwrap();
            for (x, y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
                prop_assert!((x - y).abs() < 1e-8);
            }
            for (x, y) in a.d.iter().zip(&b.d) {
                prop_assert!((x * c - y).abs() < 1e-8 * c.max(1.0));
            }
        }

        #[test]
        fn lsr_scale_invariant(r in prop::collection::vec(0.0f64..5.0, 1..6), c in 0.01f64..100.0) {
            let a = lsr_weights(&SimilarityScores::new(r.clone()).unwrap()).unwrap();
            let b = lsr_weights(&SimilarityScores::new(r.iter().map(|v| v * c).collect()).unwrap()).unwrap();
            prop_assert!(a.weights.is_valid());
            for (x, y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
