//! Training objectives for the evidential and the standard segmentation head,
//! together with the annealing, ramp-up and learning-rate schedules.
//!
//! Every loss returns its scalar value and the gradient with respect to its
//! direct input (`alpha` for the evidential family, logits otherwise). All
//! reductions are means over batch and pixels. Dice terms are computed per
//! sample and per class over the spatial domain, then averaged.

use ndarray::{Array3, Array4, Axis, Zip};

use crate::error::{ensure, Result};
use crate::evidential::DirichletParams;
use crate::special::{digamma, ln_gamma, trigamma};

/// Smoothing added to the numerator and denominator of every dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// A scalar loss with its gradient.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array4<f64>,
}

/// One-hot labels in `[batch, K, H, W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabels(Array4<f64>);

impl OneHotLabels {
    pub fn from_classes(classes: &Array3<u8>, num_classes: usize) -> Result<Self> {
        let (b, h, w) = classes.dim();
        ensure!(
            classes.iter().all(|&c| (c as usize) < num_classes),
            Validation,
            "label grid contains a class outside [0, {num_classes})"
        );
        let y = Array4::from_shape_fn((b, num_classes, h, w), |(n, k, i, j)| {
            if classes[[n, i, j]] as usize == k {
                1.0
            } else {
                0.0
            }
        });
        Ok(OneHotLabels(y))
    }

    pub fn new(y: Array4<f64>) -> Result<Self> {
        let ok = y.iter().all(|&v| v == 0.0 || v == 1.0)
            && y.sum_axis(Axis(1)).iter().all(|&s| s == 1.0);
        ensure!(ok, Validation, "labels are not one-hot per pixel");
        Ok(OneHotLabels(y))
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.0
    }
}

/// Binary mask `[batch, 1, H, W]` of pixels whose uncertainty is below a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMask(Array4<bool>);

impl UncertaintyMask {
    /// `m = [u < threshold]`.
    pub fn from_uncertainty(u: &Array4<f64>, threshold: f64) -> Self {
        UncertaintyMask(u.mapv(|v| v < threshold))
    }

    pub fn from_bools(m: Array4<bool>) -> Self {
        UncertaintyMask(m)
    }

    pub fn values(&self) -> &Array4<bool> {
        &self.0
    }

    pub fn retained(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.retained() as f64 / self.0.len() as f64
        }
    }
}

fn check_same_shape(a: &Array4<f64>, b: &Array4<f64>, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "{what}: shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
    Ok(())
}

fn pixel_count(x: &Array4<f64>) -> f64 {
    let s = x.shape();
    (s[0] * s[2] * s[3]) as f64
}

/// Expected cross-entropy under `Dir(alpha)`: `sum_k y_k (psi(S) - psi(alpha_k))`.
pub fn digamma_loss(alpha: &Array4<f64>, labels: &OneHotLabels) -> Result<LossGrad> {
    let y = labels.values();
    check_same_shape(alpha, y, "digamma_loss")?;
    let n = pixel_count(alpha);
    let (b, k, h, w) = alpha.dim();
    let mut grad = Array4::zeros(alpha.raw_dim());
    let mut total = 0.0;
    for i in 0..b {
        for r in 0..h {
            for c in 0..w {
                let s: f64 = (0..k).map(|j| alpha[[i, j, r, c]]).sum();
                let y_sum: f64 = (0..k).map(|j| y[[i, j, r, c]]).sum();
                let (psi_s, tri_s) = (digamma(s), trigamma(s));
                for j in 0..k {
                    let a = alpha[[i, j, r, c]];
                    let yj = y[[i, j, r, c]];
                    if yj != 0.0 {
                        total += yj * (psi_s - digamma(a));
                    }
                    grad[[i, j, r, c]] = (y_sum * tri_s - yj * trigamma(a)) / n;
                }
            }
        }
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// `alpha~ = y + (1 - y) * alpha`: the true-class concentration is reset to 1.
pub fn make_alpha_tilde(alpha: &Array4<f64>, labels: &OneHotLabels) -> Result<Array4<f64>> {
    let y = labels.values();
    check_same_shape(alpha, y, "make_alpha_tilde")?;
    Ok(Zip::from(alpha)
        .and(y)
        .map_collect(|&a, &yk| yk + (1.0 - yk) * a))
}

/// `KL[Dir(alpha~) || Dir(1)]`, averaged over pixels.
pub fn kl_to_uniform(alpha_tilde: &Array4<f64>) -> Result<LossGrad> {
    ensure!(
        alpha_tilde.iter().all(|&a| a >= 1.0 - 1e-12),
        Validation,
        "alpha~ entries must be at least 1"
    );
    let n = pixel_count(alpha_tilde);
    let (b, k, h, w) = alpha_tilde.dim();
    let kf = k as f64;
    let ln_gamma_k = ln_gamma(kf);
    let mut grad = Array4::zeros(alpha_tilde.raw_dim());
    let mut total = 0.0;
    for i in 0..b {
        for r in 0..h {
            for c in 0..w {
                let s: f64 = (0..k).map(|j| alpha_tilde[[i, j, r, c]]).sum();
                let (psi_s, tri_s) = (digamma(s), trigamma(s));
                let mut kl = ln_gamma(s) - ln_gamma_k;
                for j in 0..k {
                    let a = alpha_tilde[[i, j, r, c]];
                    kl += (a - 1.0) * (digamma(a) - psi_s) - ln_gamma(a);
                    grad[[i, j, r, c]] = ((a - 1.0) * trigamma(a) - (s - kf) * tri_s) / n;
                }
                total += kl;
            }
        }
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// `L_dig + beta * L_KL(alpha~)`, gradient with respect to `alpha`.
pub fn evidential_loss(alpha: &Array4<f64>, labels: &OneHotLabels, beta: f64) -> Result<LossGrad> {
    ensure!(
        (0.0..=1.0).contains(&beta),
        Validation,
        "beta must lie in [0, 1], got {beta}"
    );
    let mut out = digamma_loss(alpha, labels)?;
    if beta > 0.0 {
        let tilde = make_alpha_tilde(alpha, labels)?;
        let kl = kl_to_uniform(&tilde)?;
        out.value += beta * kl.value;
        // d alpha~ / d alpha = 1 - y
        Zip::from(&mut out.grad)
            .and(&kl.grad)
            .and(labels.values())
            .for_each(|g, &gk, &y| *g += beta * (1.0 - y) * gk);
    }
    Ok(out)
}

/// Softmax over the class axis.
pub fn softmax_classes(x: &Array4<f64>) -> Array4<f64> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(1)) {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane /= s;
    }
    out
}

/// Vector-Jacobian product of the class-axis softmax: `p * (g - <p, g>)`.
fn softmax_backward(p: &Array4<f64>, g: &Array4<f64>) -> Array4<f64> {
    let mut out = Array4::zeros(p.raw_dim());
    Zip::from(out.lanes_mut(Axis(1)))
        .and(p.lanes(Axis(1)))
        .and(g.lanes(Axis(1)))
        .for_each(|mut o, p, g| {
            let dot = p.dot(&g);
            Zip::from(&mut o).and(&p).and(&g).for_each(|o, &p, &g| *o = p * (g - dot));
        });
    out
}

/// `1 - mean_{b,k} dice_{b,k}` over probability maps, gradient w.r.t. `probs`.
pub fn soft_dice_loss(probs: &Array4<f64>, labels: &OneHotLabels, smooth: f64) -> Result<LossGrad> {
    let y = labels.values();
    check_same_shape(probs, y, "dice loss")?;
    let (b, k, h, w) = probs.dim();
    ensure!(h * w > 0 && b > 0, Validation, "dice loss over an empty spatial domain");
    let denom_terms = (b * k) as f64;
    let mut grad = Array4::zeros(probs.raw_dim());
    let mut dice_sum = 0.0;
    for i in 0..b {
        for j in 0..k {
            let p = probs.slice(ndarray::s![i, j, .., ..]);
            let t = y.slice(ndarray::s![i, j, .., ..]);
            let inter = (&p * &t).sum();
            let den = p.sum() + t.sum() + smooth;
            let num = 2.0 * inter + smooth;
            dice_sum += num / den;
            let mut g = grad.slice_mut(ndarray::s![i, j, .., ..]);
            Zip::from(&mut g).and(&t).for_each(|g, &tv| {
                *g = -(2.0 * tv * den - num) / (den * den) / denom_terms;
            });
        }
    }
    Ok(LossGrad {
        value: 1.0 - dice_sum / denom_terms,
        grad,
    })
}

/// Dice loss on `softmax(b)`, gradient with respect to `alpha`.
pub fn certain_dice_loss(params: &DirichletParams, labels: &OneHotLabels) -> Result<LossGrad> {
    certain_dice_loss_with_smooth(params, labels, DICE_SMOOTH)
}

pub fn certain_dice_loss_with_smooth(
    params: &DirichletParams,
    labels: &OneHotLabels,
    smooth: f64,
) -> Result<LossGrad> {
    let p_hat = softmax_classes(&params.belief);
    let dice = soft_dice_loss(&p_hat, labels, smooth)?;
    let grad_b = softmax_backward(&p_hat, &dice.grad);
    // b_j = e_j / S with S = sum(e) + K, so db_j/de_m = delta_jm / S - e_j / S^2
    let mut grad = Array4::zeros(grad_b.raw_dim());
    Zip::from(grad.lanes_mut(Axis(1)))
        .and(grad_b.lanes(Axis(1)))
        .and(params.belief.lanes(Axis(1)))
        .and(&params.strength)
        .for_each(|mut out, gb, b, &s| {
            let weighted = gb.dot(&b);
            Zip::from(&mut out).and(&gb).for_each(|o, &g| *o = (g - weighted) / s);
        });
    Ok(LossGrad {
        value: dice.value,
        grad,
    })
}

/// Hyperparameters and schedule values for one point of training time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub t: u64,
    pub t_max: u64,
    pub beta: f64,
    pub lam: f64,
    pub lam_max: f64,
    pub gamma: f64,
    pub t_mask: f64,
}

impl ScheduleState {
    pub const DEFAULT_LAM_MAX: f64 = 0.1;
    pub const DEFAULT_GAMMA: f64 = 1.0;
    pub const DEFAULT_T_MASK: f64 = 0.2;

    pub fn at(t: u64, t_max: u64, lam_max: f64, gamma: f64, t_mask: f64) -> Result<Self> {
        Ok(ScheduleState {
            t,
            t_max,
            beta: beta_schedule(t, t_max)?,
            lam: lambda_rampup(t, t_max, lam_max)?,
            lam_max,
            gamma,
            t_mask,
        })
    }

    pub fn with_defaults(t: u64, t_max: u64) -> Result<Self> {
        Self::at(
            t,
            t_max,
            Self::DEFAULT_LAM_MAX,
            Self::DEFAULT_GAMMA,
            Self::DEFAULT_T_MASK,
        )
    }
}

/// `L_evi(beta(t)) + gamma * L_certain`, gradient with respect to `alpha`.
pub fn eseg_loss(
    params: &DirichletParams,
    labels: &OneHotLabels,
    schedule: &ScheduleState,
) -> Result<LossGrad> {
    let mut out = evidential_loss(&params.alpha, labels, schedule.beta)?;
    if schedule.gamma != 0.0 {
        let certain = certain_dice_loss(params, labels)?;
        out.value += schedule.gamma * certain.value;
        out.grad.scaled_add(schedule.gamma, &certain.grad);
    }
    Ok(out)
}

/// Mean pixelwise cross-entropy of `softmax(logits)` against one-hot labels.
pub fn cross_entropy(logits: &Array4<f64>, labels: &OneHotLabels) -> Result<LossGrad> {
    let y = labels.values();
    check_same_shape(logits, y, "cross_entropy")?;
    let n = pixel_count(logits);
    let p = softmax_classes(logits);
    let value = -Zip::from(&p)
        .and(y)
        .fold(0.0, |acc, &p, &y| if y != 0.0 { acc + y * p.ln() } else { acc })
        / n;
    let grad = (&p - y) / n;
    Ok(LossGrad { value, grad })
}

/// `(CE + dice) / 2` on softmax probabilities, gradient w.r.t. logits.
pub fn sseg_loss(logits: &Array4<f64>, labels: &OneHotLabels) -> Result<LossGrad> {
    let ce = cross_entropy(logits, labels)?;
    let p = softmax_classes(logits);
    let dice = soft_dice_loss(&p, labels, DICE_SMOOTH)?;
    let dice_grad = softmax_backward(&p, &dice.grad);
    Ok(LossGrad {
        value: 0.5 * (ce.value + dice.value),
        grad: (ce.grad + dice_grad) * 0.5,
    })
}

/// Cross-entropy against pseudo labels over retained pixels only. An empty
/// mask yields a zero loss and a zero gradient.
pub fn masked_cross_entropy(
    logits: &Array4<f64>,
    pseudo: &Array3<u8>,
    mask: &UncertaintyMask,
) -> Result<LossGrad> {
    let (b, k, h, w) = logits.dim();
    ensure!(
        pseudo.dim() == (b, h, w) && mask.values().dim() == (b, 1, h, w),
        Shape,
        "masked_cross_entropy: logits {:?}, pseudo {:?}, mask {:?}",
        logits.shape(),
        pseudo.shape(),
        mask.values().shape()
    );
    ensure!(
        pseudo.iter().all(|&c| (c as usize) < k),
        Validation,
        "pseudo labels outside [0, {k})"
    );
    let m = mask.values();
    let count = mask.retained();
    let mut grad = Array4::zeros(logits.raw_dim());
    if count == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let n = count as f64;
    let mut total = 0.0;
    for i in 0..b {
        for r in 0..h {
            for c in 0..w {
                if !m[[i, 0, r, c]] {
                    continue;
                }
                let z = logits.slice(ndarray::s![i, .., r, c]);
                let zmax = z.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let lse = zmax + z.iter().map(|&v| (v - zmax).exp()).sum::<f64>().ln();
                let target = pseudo[[i, r, c]] as usize;
                total += lse - z[target];
                for j in 0..k {
                    let p = (z[j] - lse).exp();
                    let y = if j == target { 1.0 } else { 0.0 };
                    grad[[i, j, r, c]] = (p - y) / n;
                }
            }
        }
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// Both halves of the cross-supervision term on unlabeled data.
#[derive(Debug, Clone)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub evidential: f64,
    pub masked_ce: f64,
    /// Gradient of the evidential half w.r.t. the E-Net `alpha`.
    pub grad_alpha: Array4<f64>,
    /// Gradient of the masked cross-entropy half w.r.t. the S-Net logits.
    pub grad_logits: Array4<f64>,
}

/// `L_evi(alpha_1, onehot(Y2)) + CE(logits_2, M * Y1)`.
///
/// The pseudo labels are plain integer grids, so no gradient can reach the
/// network that produced them.
pub fn consistency_loss(
    alpha1: &DirichletParams,
    logits2: &Array4<f64>,
    pseudo1: &Array3<u8>,
    pseudo2: &Array3<u8>,
    mask: &UncertaintyMask,
    beta: f64,
) -> Result<ConsistencyLoss> {
    let target = OneHotLabels::from_classes(pseudo2, alpha1.num_classes())?;
    let evi = evidential_loss(&alpha1.alpha, &target, beta)?;
    let ce = masked_cross_entropy(logits2, pseudo1, mask)?;
    Ok(ConsistencyLoss {
        value: evi.value + ce.value,
        evidential: evi.value,
        masked_ce: ce.value,
        grad_alpha: evi.grad,
        grad_logits: ce.grad,
    })
}

fn check_clock(t: u64, t_max: u64) -> Result<()> {
    ensure!(t_max > 0, Config, "schedule length t_max must be positive");
    ensure!(t <= t_max, Validation, "schedule time {t} exceeds t_max {t_max}");
    Ok(())
}

/// `beta(t) = min(1, t / (0.5 t_max))`.
pub fn beta_schedule(t: u64, t_max: u64) -> Result<f64> {
    check_clock(t, t_max)?;
    Ok((t as f64 / (0.5 * t_max as f64)).min(1.0))
}

/// Gaussian ramp-up `lam_max * exp(-5 (1 - t/t_max)^2)`.
pub fn lambda_rampup(t: u64, t_max: u64, lam_max: f64) -> Result<f64> {
    check_clock(t, t_max)?;
    let phase = 1.0 - t as f64 / t_max as f64;
    Ok(lam_max * (-5.0 * phase * phase).exp())
}

pub const POLY_POWER: f64 = 0.9;

/// Polynomial decay `lr0 * (1 - iter/max_iter)^0.9`.
pub fn poly_lr(iter: u64, max_iter: u64, lr0: f64) -> Result<f64> {
    check_clock(iter, max_iter)?;
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(POLY_POWER))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidential::{belief_and_uncertainty, EvidenceMap};
    use ndarray::Array;

    fn pixel(values: &[f64]) -> Array4<f64> {
        Array::from_shape_vec((1, values.len(), 1, 1), values.to_vec()).unwrap()
    }

    fn onehot(classes: &[u8], k: usize) -> OneHotLabels {
        let g = Array::from_shape_vec((1, 1, classes.len()), classes.to_vec()).unwrap();
        OneHotLabels::from_classes(&g, k).unwrap()
    }

    fn row(values: &[[f64; 2]]) -> Array4<f64> {
        // [1, 2, 1, n] grid from per-pixel class pairs
        Array4::from_shape_fn((1, 2, 1, values.len()), |(_, k, _, x)| values[x][k])
    }

    #[test]
    fn digamma_loss_examples() {
        let l = digamma_loss(&pixel(&[2.0, 2.0]), &onehot(&[0], 2)).unwrap();
        assert!((l.value - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        let l = digamma_loss(&pixel(&[1.0, 1.0]), &onehot(&[0], 2)).unwrap();
        assert!((l.value - 1.0).abs() < 1e-12);
        let l = digamma_loss(&pixel(&[1e9, 3.0]), &onehot(&[0], 2)).unwrap();
        assert!(l.value < 1e-8);
    }

    #[test]
    fn alpha_tilde_examples() {
        let t = make_alpha_tilde(&pixel(&[5.0, 2.0]), &onehot(&[0], 2)).unwrap();
        assert_eq!(t, pixel(&[1.0, 2.0]));
        let t = make_alpha_tilde(&pixel(&[1.0, 1.0]), &onehot(&[1], 2)).unwrap();
        assert_eq!(t, pixel(&[1.0, 1.0]));
        let t = make_alpha_tilde(&pixel(&[3.0, 4.0, 2.0]), &onehot(&[1], 3)).unwrap();
        assert_eq!(t, pixel(&[3.0, 1.0, 2.0]));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_uniform(&pixel(&[1.0, 1.0])).unwrap().value, 0.0);
        assert_eq!(kl_to_uniform(&pixel(&[1.0; 4])).unwrap().value, 0.0);
        let kl = kl_to_uniform(&pixel(&[2.0, 1.0])).unwrap().value;
        assert!((kl - (2f64.ln() - 0.5)).abs() < 1e-12);
        assert!((kl - 0.1931).abs() < 1e-4);
        // negative differential entropy of Beta(10, 10), from an independent library
        let kl = kl_to_uniform(&pixel(&[10.0, 10.0])).unwrap().value;
        assert!((kl - 0.798_343_969_878_85).abs() < 1e-10, "{kl}");
        assert!(kl_to_uniform(&pixel(&[0.5, 1.0])).is_err());
    }

    #[test]
    fn evidential_loss_examples() {
        let a = pixel(&[2.0, 2.0]);
        let y = onehot(&[0], 2);
        let dig = digamma_loss(&a, &y).unwrap().value;
        assert_eq!(evidential_loss(&a, &y, 0.0).unwrap().value, dig);
        let l = evidential_loss(&a, &y, 1.0).unwrap().value;
        assert!((l - 1.0264).abs() < 1e-4, "{l}");
        let l = evidential_loss(&pixel(&[1e9, 1.0]), &y, 1.0).unwrap().value;
        assert!(l < 1e-8);
        assert!(evidential_loss(&a, &y, 1.5).is_err());
    }

    #[test]
    fn dice_examples() {
        let y = OneHotLabels::new(row(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let perfect = soft_dice_loss(y.values(), &y, DICE_SMOOTH).unwrap();
        assert!(perfect.value.abs() < 1e-12);
        let uniform = soft_dice_loss(&row(&[[0.5, 0.5], [0.5, 0.5]]), &y, DICE_SMOOTH).unwrap();
        assert!((uniform.value - 0.5).abs() < 1e-5);
        let disjoint = soft_dice_loss(&row(&[[0.0, 1.0], [1.0, 0.0]]), &y, 0.0).unwrap();
        assert_eq!(disjoint.value, 1.0);
    }

    #[test]
    fn dice_rejects_empty_domain() {
        let empty = Array4::<f64>::zeros((1, 2, 0, 0));
        let y = OneHotLabels(empty.clone());
        assert!(soft_dice_loss(&empty, &y, DICE_SMOOTH).is_err());
    }

    #[test]
    fn sseg_single_uniform_pixel() {
        // CE = ln 2; dice: true class 1 - (1 + s)/(1.5 + s), absent class 1 - s/(0.5 + s)
        let s = DICE_SMOOTH;
        let dice = 0.5 * ((1.0 - (1.0 + s) / (1.5 + s)) + (1.0 - s / (0.5 + s)));
        let expected = 0.5 * (2f64.ln() + dice);
        let l = sseg_loss(&pixel(&[0.0, 0.0]), &onehot(&[0], 2)).unwrap();
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 0.6799).abs() < 1e-4);
    }

    #[test]
    fn sseg_perfect_and_batch_duplication() {
        let y = onehot(&[0, 1], 2);
        let confident = row(&[[60.0, -60.0], [-60.0, 60.0]]);
        assert!(sseg_loss(&confident, &y).unwrap().value < 1e-9);

        let logits = row(&[[0.3, -0.2], [1.0, 0.4]]);
        let single = sseg_loss(&logits, &y).unwrap().value;
        let doubled = ndarray::concatenate(Axis(0), &[logits.view(), logits.view()]).unwrap();
        let y2 = ndarray::concatenate(Axis(0), &[y.values().view(), y.values().view()]).unwrap();
        let dup = sseg_loss(&doubled, &OneHotLabels::new(y2).unwrap()).unwrap().value;
        assert!((single - dup).abs() < 1e-15);
    }

    #[test]
    fn masked_ce_examples() {
        let logits = row(&[[0.0, 0.0], [3.0, -1.0]]);
        let pseudo = Array::from_shape_vec((1, 1, 2), vec![0u8, 1]).unwrap();
        let none = UncertaintyMask::from_bools(Array4::from_elem((1, 1, 1, 2), false));
        let l = masked_cross_entropy(&logits, &pseudo, &none).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));

        let first = UncertaintyMask::from_bools(
            Array::from_shape_vec((1, 1, 1, 2), vec![true, false]).unwrap(),
        );
        let l = masked_cross_entropy(&logits, &pseudo, &first).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);

        let confident = row(&[[80.0, -80.0], [-80.0, 80.0]]);
        let all = UncertaintyMask::from_bools(Array4::from_elem((1, 1, 1, 2), true));
        assert!(masked_cross_entropy(&confident, &pseudo, &all).unwrap().value < 1e-12);
    }

    #[test]
    fn consistency_with_empty_mask_is_evidential_only() {
        let e = EvidenceMap::from_values(pixel(&[1.0, 1.0]), 0.5).unwrap();
        let params = belief_and_uncertainty(&e).unwrap();
        let p = Array3::<u8>::zeros((1, 1, 1));
        let none = UncertaintyMask::from_bools(Array4::from_elem((1, 1, 1, 1), false));
        let c = consistency_loss(&params, &pixel(&[0.0, 0.0]), &p, &p, &none, 1.0).unwrap();
        let evi = evidential_loss(&params.alpha, &onehot(&[0], 2), 1.0).unwrap();
        assert_eq!(c.value, evi.value);
        assert_eq!(c.masked_ce, 0.0);
    }

    #[test]
    fn consistency_single_pixel_is_sum_of_parts() {
        // alpha = [2, 2] (evidence [1, 1]); Y2 = 0; retained uniform S-Net pixel
        let e = EvidenceMap::from_values(pixel(&[1.0, 1.0]), 0.5).unwrap();
        let params = belief_and_uncertainty(&e).unwrap();
        let p = Array3::<u8>::zeros((1, 1, 1));
        let all = UncertaintyMask::from_bools(Array4::from_elem((1, 1, 1, 1), true));
        let c = consistency_loss(&params, &pixel(&[0.0, 0.0]), &p, &p, &all, 1.0).unwrap();
        assert!((c.value - (1.0264 + 0.6931)).abs() < 2e-4);
    }

    #[test]
    fn schedules() {
        assert_eq!(beta_schedule(0, 100).unwrap(), 0.0);
        assert_eq!(beta_schedule(50, 100).unwrap(), 1.0);
        assert_eq!(beta_schedule(100, 100).unwrap(), 1.0);
        assert_eq!(lambda_rampup(100, 100, 0.1).unwrap(), 0.1);
        assert!((lambda_rampup(0, 100, 0.1).unwrap() - 6.738e-4).abs() < 1e-6);
        assert_eq!(poly_lr(0, 100, 0.01).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 0.01).unwrap() - 0.005359).abs() < 1e-6);
        assert!(beta_schedule(0, 0).is_err());
        assert!(poly_lr(101, 100, 0.01).is_err());
    }

    #[test]
    fn eseg_composition() {
        let e = EvidenceMap::from_values(pixel(&[1.0, 1.0]), 0.5).unwrap();
        let params = belief_and_uncertainty(&e).unwrap();
        let y = onehot(&[0], 2);
        let mut sched = ScheduleState::with_defaults(0, 10).unwrap();
        let at_zero = eseg_loss(&params, &y, &sched).unwrap().value;
        let dig = digamma_loss(&params.alpha, &y).unwrap().value;
        let cert = certain_dice_loss(&params, &y).unwrap().value;
        assert!((at_zero - (dig + cert)).abs() < 1e-15);
        sched.gamma = 0.0;
        sched.beta = 0.7;
        let evi = evidential_loss(&params.alpha, &y, 0.7).unwrap().value;
        assert_eq!(eseg_loss(&params, &y, &sched).unwrap().value, evi);
    }
}
