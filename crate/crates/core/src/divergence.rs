//! Distillation objectives and their exact gradients with respect to the
//! student distribution.
//!
//! Conventions: 0*log(0/x) := 0 and p*log(p/0) := +inf, so disjoint-support
//! behavior is exact. Gradients returned by [`grad_wrt_q`] are raw partials
//! in probability space; the softmax Jacobian is applied by
//! [`grad_wrt_logits`] (or by the model's backward pass).

use crate::error::{Error, Result};
use crate::model::{softmax, TokenDist};

/// Skew parameter used by ISKL unless configured otherwise.
pub const ISKL_DEFAULT_ALPHA: f64 = 0.1;

/// Tagged objective choice with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceKind {
    Kl,
    Rkl,
    /// beta * KL(p, m) + (1-beta) * KL(q, m) with m = beta*p + (1-beta)*q.
    Jsd { beta: f64 },
    /// KL(p, alpha*p + (1-alpha)*q).
    Skl { alpha: f64 },
    /// KL(q, (1-alpha)*p + alpha*q).
    Srkl { alpha: f64 },
    /// beta * SKL(alpha) + (1-beta) * SRKL(alpha).
    Iskl { beta: f64, alpha: f64 },
}

impl DivergenceKind {
    pub fn iskl(beta: f64) -> Self {
        DivergenceKind::Iskl {
            beta,
            alpha: ISKL_DEFAULT_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match *self {
            DivergenceKind::Kl | DivergenceKind::Rkl => true,
            DivergenceKind::Jsd { beta } => in_unit(beta),
            DivergenceKind::Skl { alpha } | DivergenceKind::Srkl { alpha } => in_unit(alpha),
            DivergenceKind::Iskl { beta, alpha } => in_unit(beta) && in_unit(alpha),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "divergence parameter out of [0, 1]: {self:?}"
            )))
        }
    }

    /// Parses e.g. "kl", "rkl", "jsd", "skl", "srkl", "iskl".
    pub fn from_tag(tag: &str, alpha: f64, beta: f64) -> Result<Self> {
        let kind = match tag {
            "kl" => DivergenceKind::Kl,
            "rkl" => DivergenceKind::Rkl,
            "jsd" => DivergenceKind::Jsd { beta },
            "skl" => DivergenceKind::Skl { alpha },
            "srkl" => DivergenceKind::Srkl { alpha },
            "iskl" => DivergenceKind::Iskl { beta, alpha },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown divergence tag: {tag}"
                )))
            }
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Rkl => "rkl",
            DivergenceKind::Jsd { .. } => "jsd",
            DivergenceKind::Skl { .. } => "skl",
            DivergenceKind::Srkl { .. } => "srkl",
            DivergenceKind::Iskl { .. } => "iskl",
        }
    }
}

/// Per-sample gradient coefficient: the scalar multiplying the gradient of
/// the student probability at the realized token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCoefficient {
    pub value: f64,
    pub kind: DivergenceKind,
}

/// KL(a, b) = sum a_j log(a_j / b_j) with the 0-weight convention.
fn kl_terms(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&aj, &bj) in a.iter().zip(b.iter()) {
        if aj == 0.0 {
            continue;
        }
        if bj == 0.0 {
            return f64::INFINITY;
        }
        total += aj * (aj / bj).ln();
    }
    total
}

fn mixture(w_first: f64, first: &[f64], second: &[f64]) -> Vec<f64> {
    first
        .iter()
        .zip(second.iter())
        .map(|(&a, &b)| w_first * a + (1.0 - w_first) * b)
        .collect()
}

/// Divergence value in nats.
pub fn categorical_div(kind: DivergenceKind, p: &TokenDist, q: &TokenDist) -> f64 {
    let p = p.probs();
    let q = q.probs();
    match kind {
        DivergenceKind::Kl => kl_terms(p, q),
        DivergenceKind::Rkl => kl_terms(q, p),
        DivergenceKind::Skl { alpha } => kl_terms(p, &mixture(alpha, p, q)),
        DivergenceKind::Srkl { alpha } => kl_terms(q, &mixture(1.0 - alpha, p, q)),
        DivergenceKind::Jsd { beta } => {
            let m = mixture(beta, p, q);
            beta * kl_terms(p, &m) + (1.0 - beta) * kl_terms(q, &m)
        }
        DivergenceKind::Iskl { beta, alpha } => {
            beta * kl_terms(p, &mixture(alpha, p, q))
                + (1.0 - beta) * kl_terms(q, &mixture(1.0 - alpha, p, q))
        }
    }
}

/// Raw partials dD/dq_j, before projection onto the simplex.
pub fn grad_wrt_q(kind: DivergenceKind, p: &TokenDist, q: &TokenDist) -> Vec<f64> {
    let p = p.probs();
    let q = q.probs();
    let v = p.len();
    match kind {
        DivergenceKind::Kl => (0..v)
            .map(|j| {
                if p[j] == 0.0 {
                    0.0
                } else if q[j] == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -p[j] / q[j]
                }
            })
            .collect(),
        DivergenceKind::Rkl => (0..v).map(|j| (q[j] / p[j]).ln() + 1.0).collect(),
        DivergenceKind::Skl { alpha } => {
            if alpha == 1.0 {
                // Objective is constant in q.
                return vec![0.0; v];
            }
            let m = mixture(alpha, p, q);
            (0..v)
                .map(|j| {
                    if p[j] == 0.0 {
                        0.0
                    } else {
                        -(1.0 - alpha) * p[j] / m[j]
                    }
                })
                .collect()
        }
        DivergenceKind::Srkl { alpha } => {
            let pt = mixture(1.0 - alpha, p, q);
            (0..v)
                .map(|j| (q[j] / pt[j]).ln() + 1.0 - alpha * q[j] / pt[j])
                .collect()
        }
        DivergenceKind::Jsd { beta } => {
            // Differentiating Eq-style JSD gives (1-beta) * log(q_j / m_j).
            let m = mixture(beta, p, q);
            (0..v).map(|j| (1.0 - beta) * (q[j] / m[j]).ln()).collect()
        }
        DivergenceKind::Iskl { beta, alpha } => {
            let g_skl = grad_wrt_q(DivergenceKind::Skl { alpha }, &clone_dist(p), &clone_dist(q));
            let g_srkl = grad_wrt_q(
                DivergenceKind::Srkl { alpha },
                &clone_dist(p),
                &clone_dist(q),
            );
            g_skl
                .iter()
                .zip(g_srkl.iter())
                .map(|(a, b)| beta * a + (1.0 - beta) * b)
                .collect()
        }
    }
}

fn clone_dist(probs: &[f64]) -> TokenDist {
    TokenDist::new_unchecked(probs.to_vec())
}

/// Gradient with respect to the logits producing q = softmax(logits):
/// g_i = q_i * (u_i - sum_j q_j u_j) with u the probability-space partials.
pub fn grad_wrt_logits(kind: DivergenceKind, p: &TokenDist, logits: &[f64]) -> Vec<f64> {
    let q_probs = softmax(logits);
    let q = TokenDist::new_unchecked(q_probs.clone());
    let u = grad_wrt_q(kind, p, &q);
    let dot: f64 = q_probs.iter().zip(u.iter()).map(|(qi, ui)| qi * ui).sum();
    q_probs
        .iter()
        .zip(u.iter())
        .map(|(qi, ui)| qi * (ui - dot))
        .collect()
}

/// Per-sample gradient coefficient at the realized token probabilities.
/// Defined for KL, RKL, SKL, and SRKL.
pub fn grad_coefficient(kind: DivergenceKind, p_y: f64, q_y: f64) -> Result<GradCoefficient> {
    let value = match kind {
        DivergenceKind::Kl => p_y / q_y,
        DivergenceKind::Skl { alpha } => {
            (1.0 - alpha) * p_y / (alpha * p_y + (1.0 - alpha) * q_y)
        }
        DivergenceKind::Rkl => (q_y / p_y).ln() + 1.0,
        DivergenceKind::Srkl { alpha } => {
            let pt = (1.0 - alpha) * p_y + alpha * q_y;
            (q_y / pt).ln() + 1.0 - alpha * q_y / pt
        }
        DivergenceKind::Jsd { .. } | DivergenceKind::Iskl { .. } => {
            return Err(Error::InvalidArgument(format!(
                "gradient coefficient is defined for kl/rkl/skl/srkl, not {}",
                kind.tag()
            )))
        }
    };
    Ok(GradCoefficient { value, kind })
}

/// Mean per-position divergence along one trajectory, plus per-position
/// logit gradients of that mean.
pub fn sequence_divergence(
    kind: DivergenceKind,
    teacher_dists: &[TokenDist],
    student_logits: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if teacher_dists.len() != student_logits.len() || teacher_dists.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sequence length mismatch: {} teacher vs {} student positions",
            teacher_dists.len(),
            student_logits.len()
        )));
    }
    let len = teacher_dists.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(teacher_dists.len());
    for (p, logits) in teacher_dists.iter().zip(student_logits.iter()) {
        let q = TokenDist::from_softmax(logits);
        loss += categorical_div(kind, p, &q);
        let g = grad_wrt_logits(kind, p, logits);
        grads.push(g.into_iter().map(|v| v / len).collect());
    }
    Ok((loss / len, grads))
}

/// sum p_j^2 / q_j; infinite when supp(p) is not contained in supp(q).
pub fn chi_square(p: &TokenDist, q: &TokenDist) -> f64 {
    let mut total = 0.0;
    for (&pj, &qj) in p.probs().iter().zip(q.probs().iter()) {
        if pj == 0.0 {
            continue;
        }
        if qj == 0.0 {
            return f64::INFINITY;
        }
        total += pj * pj / qj;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(probs: &[f64]) -> TokenDist {
        TokenDist::new(probs.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut ChaCha8Rng, v: usize) -> TokenDist {
        let mut probs: Vec<f64> = (0..v).map(|_| -rng.gen_range(1e-12..1.0f64).ln()).collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        TokenDist::new_unchecked(probs)
    }

    #[test]
    fn skl_zero_when_equal() {
        let p = dist(&[0.2, 0.3, 0.5]);
        let d = categorical_div(DivergenceKind::Skl { alpha: 0.1 }, &p, &p);
        assert!(d.abs() < 1e-15);
    }

    #[test]
    fn skl_alpha_zero_is_kl() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.9, 0.1]);
        let d = categorical_div(DivergenceKind::Skl { alpha: 0.0 }, &p, &q);
        let expected = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5.0f64.ln();
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 0.5108).abs() < 5e-4);
    }

    #[test]
    fn skl_point_one_value() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.9, 0.1]);
        let d = categorical_div(DivergenceKind::Skl { alpha: 0.1 }, &p, &q);
        // mixture = (0.86, 0.14)
        let expected = 0.5 * (0.5f64 / 0.86).ln() + 0.5 * (0.5f64 / 0.14).ln();
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 0.3653).abs() < 5e-4);
    }

    #[test]
    fn disjoint_support_skl_is_ln_inv_alpha() {
        let p = dist(&[1.0, 0.0]);
        let q = dist(&[0.0, 1.0]);
        let d = categorical_div(DivergenceKind::Skl { alpha: 0.1 }, &p, &q);
        assert!((d - (1.0f64 / 0.1).ln()).abs() < 1e-12);
        let d = categorical_div(DivergenceKind::Kl, &p, &q);
        assert!(d.is_infinite());
    }

    #[test]
    fn jsd_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_dist(&mut rng, 6);
            let q = random_dist(&mut rng, 6);
            let kind = DivergenceKind::Jsd { beta: 0.5 };
            let a = categorical_div(kind, &p, &q);
            let b = categorical_div(kind, &q, &p);
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0 && a <= 2.0f64.ln() + 1e-12);
        }
    }

    #[test]
    fn reduction_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = random_dist(&mut rng, 5);
            let q = random_dist(&mut rng, 5);
            let kl = categorical_div(DivergenceKind::Kl, &p, &q);
            let skl0 = categorical_div(DivergenceKind::Skl { alpha: 0.0 }, &p, &q);
            assert!((kl - skl0).abs() < 1e-12);
            let rkl = categorical_div(DivergenceKind::Rkl, &p, &q);
            let srkl0 = categorical_div(DivergenceKind::Srkl { alpha: 0.0 }, &p, &q);
            assert!((rkl - srkl0).abs() < 1e-12);
            let skl = categorical_div(DivergenceKind::Skl { alpha: 0.1 }, &p, &q);
            let srkl = categorical_div(DivergenceKind::Srkl { alpha: 0.1 }, &p, &q);
            let iskl1 = categorical_div(DivergenceKind::Iskl { beta: 1.0, alpha: 0.1 }, &p, &q);
            let iskl0 = categorical_div(DivergenceKind::Iskl { beta: 0.0, alpha: 0.1 }, &p, &q);
            assert!((iskl1 - skl).abs() < 1e-12);
            assert!((iskl0 - srkl).abs() < 1e-12);
        }
    }

    #[test]
    fn jsd_decomposes_into_skls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = random_dist(&mut rng, 7);
            let q = random_dist(&mut rng, 7);
            for &beta in &[0.1, 0.3, 0.5, 0.9] {
                let jsd = categorical_div(DivergenceKind::Jsd { beta }, &p, &q);
                let a = categorical_div(DivergenceKind::Skl { alpha: beta }, &p, &q);
                let b = categorical_div(DivergenceKind::Skl { alpha: 1.0 - beta }, &q, &p);
                assert!((jsd - (beta * a + (1.0 - beta) * b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn skl_bounded_by_ln_inv_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let p = random_dist(&mut rng, 4);
            let q = random_dist(&mut rng, 4);
            for &alpha in &[0.05, 0.1, 0.5] {
                let d = categorical_div(DivergenceKind::Skl { alpha }, &p, &q);
                assert!(d <= (1.0 / alpha).ln() + 1e-12);
                assert!(d >= 0.0);
            }
        }
    }

    #[test]
    fn grad_values_match_spec_examples() {
        // SKL alpha=0.1, p_j=0.5, q_j=0.1.
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.1, 0.9]);
        let g = grad_wrt_q(DivergenceKind::Skl { alpha: 0.1 }, &p, &q);
        assert!((g[0] - (-0.9 * 0.5 / 0.14)).abs() < 1e-12);
        assert!((g[0] + 3.214).abs() < 5e-3);

        let g = grad_wrt_q(DivergenceKind::Srkl { alpha: 0.1 }, &p, &q);
        let pt = 0.9 * 0.5 + 0.1 * 0.1;
        let expected = (0.1f64 / pt).ln() + 1.0 - 0.1 * 0.1 / pt;
        assert!((g[0] - expected).abs() < 1e-12);
        assert!((g[0] + 0.548).abs() < 5e-3);
    }

    #[test]
    fn skl_alpha_one_gradient_is_zero() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.1, 0.9]);
        let g = grad_wrt_q(DivergenceKind::Skl { alpha: 1.0 }, &p, &q);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_probability_grad_vanishes_at_logits() {
        // Shift invariance of softmax: constant u gives zero logit gradient.
        let p = dist(&[0.3, 0.3, 0.4]);
        let logits = vec![0.4, -1.0, 2.0];
        let q = TokenDist::from_softmax(&logits);
        let u = vec![5.0; 3];
        let q_probs = q.probs();
        let dot: f64 = q_probs.iter().zip(&u).map(|(a, b)| a * b).sum();
        let g: Vec<f64> = q_probs.iter().zip(&u).map(|(qi, ui)| qi * (ui - dot)).collect();
        let _ = p;
        assert!(g.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn kl_logit_gradient_is_q_minus_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = random_dist(&mut rng, 5);
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = softmax(&logits);
            let g = grad_wrt_logits(DivergenceKind::Kl, &p, &logits);
            for j in 0..5 {
                assert!((g[j] - (q[j] - p.probs()[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kinds = [
            DivergenceKind::Kl,
            DivergenceKind::Rkl,
            DivergenceKind::Jsd { beta: 0.4 },
            DivergenceKind::Skl { alpha: 0.1 },
            DivergenceKind::Srkl { alpha: 0.1 },
            DivergenceKind::Iskl { beta: 0.3, alpha: 0.1 },
        ];
        for kind in kinds {
            for _ in 0..20 {
                let p = random_dist(&mut rng, 5);
                let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let g = grad_wrt_logits(kind, &p, &logits);
                let step = 1e-6;
                for j in 0..5 {
                    let mut plus = logits.clone();
                    plus[j] += step;
                    let mut minus = logits.clone();
                    minus[j] -= step;
                    let f_plus = categorical_div(kind, &p, &TokenDist::from_softmax(&plus));
                    let f_minus = categorical_div(kind, &p, &TokenDist::from_softmax(&minus));
                    let fd = (f_plus - f_minus) / (2.0 * step);
                    let denom = fd.abs().max(g[j].abs()).max(1e-3);
                    assert!(
                        (fd - g[j]).abs() / denom < 1e-6,
                        "{kind:?} component {j}: fd {fd} vs analytic {}",
                        g[j]
                    );
                }
            }
        }
    }

    #[test]
    fn coefficient_examples_and_bound() {
        let c = grad_coefficient(DivergenceKind::Kl, 0.5, 0.1).unwrap();
        assert!((c.value - 5.0).abs() < 1e-12);
        let c = grad_coefficient(DivergenceKind::Skl { alpha: 0.1 }, 0.5, 0.1).unwrap();
        assert!((c.value - 0.45 / 0.14).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let p_y: f64 = rng.gen_range(1e-9..1.0);
            let q_y: f64 = rng.gen_range(1e-9..1.0);
            let alpha = 0.1;
            let c = grad_coefficient(DivergenceKind::Skl { alpha }, p_y, q_y).unwrap();
            assert!(c.value <= (1.0 - alpha) / alpha + 1e-12);
        }

        assert!(grad_coefficient(DivergenceKind::Jsd { beta: 0.5 }, 0.5, 0.5).is_err());
    }

    #[test]
    fn sequence_divergence_basics() {
        let logits = vec![vec![0.3, -0.7, 1.1]];
        let q = TokenDist::from_softmax(&logits[0]);
        let kind = DivergenceKind::Srkl { alpha: 0.1 };
        // teacher == student: zero loss and gradients.
        let (loss, grads) = sequence_divergence(kind, &[q.clone()], &logits).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grads[0].iter().all(|&g| g.abs() < 1e-12));

        // Single position equals categorical_div.
        let p = dist(&[0.6, 0.3, 0.1]);
        let (loss, _) = sequence_divergence(kind, &[p.clone()], &logits).unwrap();
        assert!((loss - categorical_div(kind, &p, &q)).abs() < 1e-12);

        // Length mismatch rejected.
        assert!(sequence_divergence(kind, &[p], &[]).is_err());
    }

    #[test]
    fn chi_square_values() {
        let p = dist(&[0.5, 0.5]);
        assert!((chi_square(&p, &p) - 1.0).abs() < 1e-12);
        let q = dist(&[0.9, 0.1]);
        assert!((chi_square(&p, &q) - (0.25 / 0.9 + 0.25 / 0.1)).abs() < 1e-12);
        let p = dist(&[1.0, 0.0]);
        let q = dist(&[0.5, 0.5]);
        assert!((chi_square(&p, &q) - 2.0).abs() < 1e-12);
        let p2 = dist(&[0.0, 1.0]);
        assert!(chi_square(&p2, &dist(&[1.0, 0.0])).is_infinite());
    }

    #[test]
    fn non_negativity_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let kinds = [
            DivergenceKind::Kl,
            DivergenceKind::Rkl,
            DivergenceKind::Jsd { beta: 0.5 },
            DivergenceKind::Skl { alpha: 0.1 },
            DivergenceKind::Srkl { alpha: 0.1 },
            DivergenceKind::Iskl { beta: 0.5, alpha: 0.1 },
        ];
        for _ in 0..500 {
            let p = random_dist(&mut rng, 6);
            let q = random_dist(&mut rng, 6);
            for kind in kinds {
                let d = categorical_div(kind, &p, &q);
                assert!(d >= -1e-15, "{kind:?} gave {d}");
            }
        }
    }
}
