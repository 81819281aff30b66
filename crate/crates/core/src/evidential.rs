//! Subjective-logic view of a segmentation network's output.
//!
//! Logits are mapped to nonnegative evidence with `e = exp(tanh(z) / tau)`,
//! evidence parameterizes a Dirichlet with `alpha = e + 1`, and the Dirichlet
//! strength `S = sum(alpha)` splits one unit of mass into per-class beliefs
//! `b_k = e_k / S` and a residual uncertainty `u = K / S`.
//!
//! All grids use the `[batch, K, H, W]` layout; uncertainty is `[batch, 1, H, W]`.

use ndarray::{Array3, Array4, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{ensure, EvilError, Result};
use crate::special::ln_multivariate_beta;

/// Absolute tolerance on `|sum(p) - 1|` for simplex membership.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Entries above `-SIMPLEX_NEG_TOL` are clamped to zero instead of rejected.
pub const SIMPLEX_NEG_TOL: f64 = 1e-12;

/// Default evidence temperature `1/K`.
pub fn default_tau(num_classes: usize) -> f64 {
    1.0 / num_classes as f64
}

/// Raw, unbounded network output of shape `[batch, K, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Array4<f64>);

impl Logits {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        ensure!(
            values.shape()[1] >= 2,
            Validation,
            "logits need at least 2 classes, got {}",
            values.shape()[1]
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Validation,
            "logits contain non-finite entries"
        );
        Ok(Logits(values))
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Per-pixel evidence together with the local slope `de/dz` needed to
/// push gradients back to the logits.
#[derive(Debug, Clone)]
pub struct EvidenceMap {
    values: Array4<f64>,
    slope: Array4<f64>,
    tau: f64,
}

impl EvidenceMap {
    /// Wraps precomputed evidence (no logit slope available).
    pub fn from_values(values: Array4<f64>, tau: f64) -> Result<Self> {
        ensure!(
            values.iter().all(|&v| v >= 0.0 && v.is_finite()),
            Validation,
            "evidence must be finite and nonnegative"
        );
        let slope = Array4::zeros(values.raw_dim());
        Ok(EvidenceMap { values, slope, tau })
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape()[1]
    }

    /// Chain rule from `dL/dalpha` (equivalently `dL/de`) to `dL/dlogits`.
    pub fn backprop(&self, grad_alpha: &Array4<f64>) -> Array4<f64> {
        grad_alpha * &self.slope
    }
}

/// `e = exp(tanh(z) / tau)`, elementwise.
pub fn evidence_from_logits(logits: &Logits, tau: f64) -> Result<EvidenceMap> {
    ensure!(
        tau > 0.0 && tau < 1.0,
        Config,
        "tau must lie in (0, 1), got {tau}"
    );
    let z = logits.values();
    let mut values = Array4::zeros(z.raw_dim());
    let mut slope = Array4::zeros(z.raw_dim());
    Zip::from(&mut values)
        .and(&mut slope)
        .and(z)
        .for_each(|e, s, &zi| {
            let t = zi.tanh();
            *e = (t / tau).exp();
            *s = *e * (1.0 - t * t) / tau;
        });
    Ok(EvidenceMap { values, slope, tau })
}

/// Dirichlet parameters and the subjective-logic opinion they induce.
#[derive(Debug, Clone)]
pub struct DirichletParams {
    pub alpha: Array4<f64>,
    /// `S = sum_k alpha_k`, shape `[batch, H, W]`.
    pub strength: Array3<f64>,
    pub belief: Array4<f64>,
    /// `u = K / S`, shape `[batch, 1, H, W]`.
    pub uncertainty: Array4<f64>,
}

impl DirichletParams {
    pub fn num_classes(&self) -> usize {
        self.alpha.shape()[1]
    }

    /// `argmax_k b_k` per pixel, shape `[batch, H, W]`. Ties resolve to the lowest class.
    pub fn argmax_belief(&self) -> Array3<u8> {
        argmax_classes(&self.belief)
    }
}

pub fn belief_and_uncertainty(evidence: &EvidenceMap) -> Result<DirichletParams> {
    let e = evidence.values();
    ensure!(
        e.iter().all(|&v| v >= 0.0),
        Validation,
        "evidence must be nonnegative"
    );
    let k = e.shape()[1] as f64;
    let alpha = e.mapv(|v| v + 1.0);
    let strength = alpha.sum_axis(Axis(1));
    let mut belief = e.clone();
    for mut lane in belief.axis_iter_mut(Axis(1)) {
        lane /= &strength;
    }
    let uncertainty = strength.mapv(|s| k / s).insert_axis(Axis(1));
    Ok(DirichletParams {
        alpha,
        strength,
        belief,
        uncertainty,
    })
}

/// Index of the largest entry along the class axis, per pixel.
pub fn argmax_classes(values: &Array4<f64>) -> Array3<u8> {
    let (b, k, h, w) = values.dim();
    Array3::from_shape_fn((b, h, w), |(n, y, x)| {
        let mut best = 0;
        for c in 1..k {
            if values[[n, c, y, x]] > values[[n, best, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}

/// A probability vector on the (K-1)-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        ensure!(
            on_simplex(&p),
            Validation,
            "point {p:?} is not on the probability simplex"
        );
        Ok(SimplexPoint(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn on_simplex(p: &[f64]) -> bool {
    p.iter().all(|&v| v >= -SIMPLEX_NEG_TOL && v.is_finite())
        && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_SUM_TOL
}

/// Dirichlet density `D(p | alpha)`; exactly zero off the simplex.
///
/// On the simplex boundary a zero coordinate contributes `0^0 = 1` when
/// `alpha_k = 1`, zero density when `alpha_k > 1`, and `+inf` when `alpha_k < 1`.
pub fn dirichlet_pdf(p: &[f64], alpha: &[f64]) -> Result<f64> {
    ensure!(
        p.len() == alpha.len(),
        Shape,
        "point has {} entries but alpha has {}",
        p.len(),
        alpha.len()
    );
    ensure!(
        alpha.iter().all(|&a| a > 0.0 && a.is_finite()),
        Validation,
        "alpha entries must be positive, got {alpha:?}"
    );
    if !on_simplex(p) {
        return Ok(0.0);
    }
    let mut log_kernel = 0.0;
    let mut diverges = false;
    for (&pk, &ak) in p.iter().zip(alpha) {
        let pk = pk.max(0.0);
        if pk == 0.0 {
            if ak > 1.0 {
                return Ok(0.0);
            }
            if ak < 1.0 {
                diverges = true;
            }
        } else {
            log_kernel += (ak - 1.0) * pk.ln();
        }
    }
    if diverges {
        return Ok(f64::INFINITY);
    }
    Ok((log_kernel - ln_multivariate_beta(alpha)).exp())
}

/// `n` independent draws from `Dir(alpha)` via normalized Gamma variates.
pub fn sample_dirichlet(alpha: &[f64], n: usize, seed: u64) -> Result<Vec<SimplexPoint>> {
    ensure!(n >= 1, Validation, "sample count must be at least 1");
    let mut sampler = DirichletSampler::new(alpha, seed)?;
    Ok((0..n).map(|_| SimplexPoint(sampler.draw())).collect())
}

/// Streaming Dirichlet sampler; avoids materializing large sample sets.
pub struct DirichletSampler {
    gammas: Vec<Gamma<f64>>,
    rng: ChaCha8Rng,
}

impl DirichletSampler {
    pub fn new(alpha: &[f64], seed: u64) -> Result<Self> {
        ensure!(
            !alpha.is_empty() && alpha.iter().all(|&a| a > 0.0 && a.is_finite()),
            Validation,
            "alpha entries must be positive, got {alpha:?}"
        );
        let gammas = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).map_err(|e| EvilError::Validation(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(DirichletSampler {
            gammas,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> Vec<f64> {
        loop {
            let mut g: Vec<f64> = self
                .gammas
                .iter()
                .map(|d| d.sample(&mut self.rng))
                .collect();
            let total: f64 = g.iter().sum();
            if total > 0.0 {
                g.iter_mut().for_each(|v| *v /= total);
                return g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn pixel(values: &[f64]) -> Array4<f64> {
        Array::from_shape_vec((1, values.len(), 1, 1), values.to_vec()).unwrap()
    }

    fn evidence(z: &[f64], tau: f64) -> Vec<f64> {
        let e = evidence_from_logits(&Logits::new(pixel(z)).unwrap(), tau).unwrap();
        e.values().iter().copied().collect()
    }

    #[test]
    fn zero_logits_give_unit_evidence() {
        assert_eq!(evidence(&[0.0, 0.0], 0.5), vec![1.0, 1.0]);
        assert_eq!(evidence(&[0.0; 4], 0.25), vec![1.0; 4]);
    }

    #[test]
    fn saturated_logits_hit_the_evidence_bounds() {
        let e = evidence(&[100.0, -100.0], 0.5);
        assert!((e[0] - 2f64.exp()).abs() < 1e-12);
        assert!((e[1] - (-2f64).exp()).abs() < 1e-12);
        assert!((e[0] - 7.3891).abs() < 1e-4 && (e[1] - 0.1353).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_tau_and_non_finite_logits() {
        assert!(Logits::new(pixel(&[f64::NAN, 0.0])).is_err());
        assert!(Logits::new(pixel(&[0.0])).is_err());
        let l = Logits::new(pixel(&[0.0, 0.0])).unwrap();
        assert!(matches!(evidence_from_logits(&l, 1.0), Err(EvilError::Config(_))));
        assert!(matches!(evidence_from_logits(&l, 0.0), Err(EvilError::Config(_))));
    }

    fn opinion(e: &[f64]) -> DirichletParams {
        belief_and_uncertainty(&EvidenceMap::from_values(pixel(e), 0.5).unwrap()).unwrap()
    }

    #[test]
    fn belief_examples() {
        let p = opinion(&[0.0, 0.0]);
        assert_eq!(p.alpha.iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        assert_eq!(p.strength[[0, 0, 0]], 2.0);
        assert_eq!(p.uncertainty[[0, 0, 0, 0]], 1.0);
        assert_eq!(p.belief.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);

        let p = opinion(&[1.0, 1.0]);
        assert_eq!(p.strength[[0, 0, 0]], 4.0);
        assert_eq!(p.belief[[0, 0, 0, 0]], 0.25);
        assert_eq!(p.uncertainty[[0, 0, 0, 0]], 0.5);

        let p = opinion(&[7.3891, 0.1353]);
        assert!((p.strength[[0, 0, 0]] - 9.5244).abs() < 1e-9);
        assert!((p.belief[[0, 0, 0, 0]] - 0.7758).abs() < 1e-4);
        assert!((p.belief[[0, 1, 0, 0]] - 0.0142).abs() < 1e-4);
        assert!((p.uncertainty[[0, 0, 0, 0]] - 0.2100).abs() < 1e-4);
    }

    #[test]
    fn negative_evidence_is_rejected() {
        assert!(EvidenceMap::from_values(pixel(&[-0.1, 1.0]), 0.5).is_err());
    }

    #[test]
    fn pdf_examples() {
        assert!((dirichlet_pdf(&[0.3, 0.7], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((dirichlet_pdf(&[0.5, 0.5], &[2.0, 2.0]).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(dirichlet_pdf(&[0.5, 0.6], &[2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(dirichlet_pdf(&[-0.1, 1.1], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn pdf_boundary_conventions() {
        assert!((dirichlet_pdf(&[0.0, 1.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(dirichlet_pdf(&[0.0, 1.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dirichlet_pdf(&[0.0, 1.0], &[0.5, 1.0]).unwrap(), f64::INFINITY);
        // tiny negative round-off is clamped, not rejected
        assert!(dirichlet_pdf(&[-1e-13, 1.0 + 1e-13], &[1.0, 1.0]).unwrap() > 0.0);
    }

    #[test]
    fn pdf_rejects_non_positive_alpha() {
        assert!(dirichlet_pdf(&[0.5, 0.5], &[0.0, 1.0]).is_err());
        assert!(dirichlet_pdf(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_validated() {
        let a = sample_dirichlet(&[5.0, 5.0], 1, 9).unwrap();
        let b = sample_dirichlet(&[5.0, 5.0], 1, 9).unwrap();
        assert_eq!(a, b);
        assert!(sample_dirichlet(&[1.0, 1.0], 0, 0).is_err());
        assert!(sample_dirichlet(&[1.0, -1.0], 3, 0).is_err());
    }

    #[test]
    fn sample_means_match_dirichlet_mean() {
        for (alpha, mean) in [([1.0, 1.0], 0.5), ([2.0, 1.0], 2.0 / 3.0)] {
            let mut s = DirichletSampler::new(&alpha, 17).unwrap();
            let n = 1_000_000;
            let m: f64 = (0..n).map(|_| s.draw()[0]).sum::<f64>() / n as f64;
            assert!((m - mean).abs() < 0.002, "alpha={alpha:?} mean={m}");
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let v = pixel(&[0.2, 0.7, 0.7]);
        assert_eq!(argmax_classes(&v)[[0, 0, 0]], 1);
    }
}
