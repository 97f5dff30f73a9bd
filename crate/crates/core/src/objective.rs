//! Desk-scale training objectives: cross-entropy, unlikelihood and the
//! user-likelihood loss, with analytic gradients verified against central
//! finite differences, plus the checkpoint-selection score.
//!
//! The user-likelihood loss raises the probability mass of the user's
//! tokens: L = -alpha * ln(sum of p(u) over the user token set U). Its
//! gradient w.r.t. the logits has the closed form
//! dL/dz_k = -alpha * p_k * (1[k in U] - s) / s with s the user mass.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Pre-softmax scores over the vocabulary. Entries must be finite, V >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "logit vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("logit vector has non-finite entries".into()));
        }
        Ok(LogitVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// A probability distribution over the vocabulary: entries nonnegative,
/// summing to 1 within 1e-12.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist(Vec<f64>);

impl TokenDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "distribution has negative or non-finite entries".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "distribution sums to {sum}, not 1"
            )));
        }
        Ok(TokenDist(probs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// The set U of user-token vocabulary ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserTokenSet(BTreeSet<usize>);

impl UserTokenSet {
    pub fn new<I: IntoIterator<Item = usize>>(ids: I) -> Self {
        UserTokenSet(ids.into_iter().collect())
    }

    pub fn ids(&self) -> &BTreeSet<usize> {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_bounds(&self, vocab: usize) -> Result<()> {
        match self.0.iter().next_back() {
            Some(&max) if max >= vocab => Err(Error::InvalidArgument(format!(
                "user token id {max} out of range for vocabulary of {vocab}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Which loss terms to combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossMode {
    Ce,
    CeUnl,
    CeUll,
    CeUnlUll,
}

impl LossMode {
    fn uses_unlikelihood(self) -> bool {
        matches!(self, LossMode::CeUnl | LossMode::CeUnlUll)
    }

    fn uses_ull(self) -> bool {
        matches!(self, LossMode::CeUll | LossMode::CeUnlUll)
    }
}

/// Max-subtracted stable softmax.
pub fn softmax(z: &LogitVector) -> TokenDist {
    let max = z.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.0.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    TokenDist(exps.into_iter().map(|e| e / sum).collect())
}

/// Cross-entropy of the target token: -ln p(target).
pub fn ce_loss(d: &TokenDist, target: usize) -> Result<f64> {
    let p = *d.0.get(target).ok_or_else(|| {
        Error::InvalidArgument(format!("target {target} out of range for vocabulary of {}", d.len()))
    })?;
    if p == 0.0 {
        return Err(Error::Numeric(format!("p(target={target}) is zero; loss diverges")));
    }
    Ok(-p.ln())
}

/// Token-level unlikelihood: -sum over negatives of ln(1 - p(c)). An empty
/// negative set contributes 0.
pub fn unlikelihood_loss(d: &TokenDist, negatives: &BTreeSet<usize>) -> Result<f64> {
    let mut loss = 0.0;
    for &c in negatives {
        let p = *d.0.get(c).ok_or_else(|| {
            Error::InvalidArgument(format!("negative id {c} out of range for vocabulary of {}", d.len()))
        })?;
        if p >= 1.0 {
            return Err(Error::Numeric(format!("p(negative={c}) is 1; log(1-p) undefined")));
        }
        loss -= (1.0 - p).ln();
    }
    Ok(loss)
}

/// User-likelihood loss: -alpha * ln(sum of p(u) for u in U).
pub fn ull(d: &TokenDist, users: &UserTokenSet, alpha: f64) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::InvalidArgument("user token set is empty".into()));
    }
    users.check_bounds(d.len())?;
    let mass: f64 = users.0.iter().map(|&u| d.0[u]).sum();
    if mass == 0.0 {
        return Err(Error::Numeric("user token mass is zero; loss diverges".into()));
    }
    Ok(-alpha * mass.ln())
}

/// Sum of the selected loss terms evaluated on softmax(z).
pub fn combined_loss(
    z: &LogitVector,
    target: usize,
    negatives: &BTreeSet<usize>,
    users: &UserTokenSet,
    alpha: f64,
    mode: LossMode,
) -> Result<f64> {
    let d = softmax(z);
    let mut loss = ce_loss(&d, target)?;
    if mode.uses_unlikelihood() {
        loss += unlikelihood_loss(&d, negatives)?;
    }
    if mode.uses_ull() {
        loss += ull(&d, users, alpha)?;
    }
    Ok(loss)
}

/// One decoding timestep of a sequence loss.
#[derive(Debug, Clone)]
pub struct Timestep {
    pub logits: LogitVector,
    pub target: usize,
    /// Tokens penalized by the unlikelihood term at this step.
    pub negatives: BTreeSet<usize>,
}

/// Per-sequence loss: arithmetic mean of the per-timestep combined losses,
/// with one user token set shared across the sequence.
pub fn sequence_loss(
    steps: &[Timestep],
    users: &UserTokenSet,
    alpha: f64,
    mode: LossMode,
) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("sequence has no timesteps".into()));
    }
    let total: f64 = steps
        .iter()
        .map(|s| combined_loss(&s.logits, s.target, &s.negatives, users, alpha, mode))
        .sum::<Result<f64>>()?;
    Ok(total / steps.len() as f64)
}

/// Default unlikelihood negative sets for a target sequence: at each step,
/// the tokens already emitted earlier in the same response.
pub fn repetition_negatives(targets: &[usize]) -> Vec<BTreeSet<usize>> {
    let mut seen = BTreeSet::new();
    targets
        .iter()
        .map(|&t| {
            let current = seen.clone();
            seen.insert(t);
            current
        })
        .collect()
}

/// Analytic gradient of the user-likelihood loss w.r.t. the logits:
/// dL/dz_k = -alpha * p_k * (1[k in U] - s) / s.
pub fn grad_ull(z: &LogitVector, users: &UserTokenSet, alpha: f64) -> Result<Vec<f64>> {
    if users.is_empty() {
        return Err(Error::InvalidArgument("user token set is empty".into()));
    }
    users.check_bounds(z.len())?;
    let p = softmax(z);
    let mass: f64 = users.0.iter().map(|&u| p.0[u]).sum();
    if mass == 0.0 {
        return Err(Error::Numeric("user token mass is zero; gradient diverges".into()));
    }
    Ok(p
        .0
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            let indicator = if users.0.contains(&k) { 1.0 } else { 0.0 };
            -alpha * pk * (indicator - mass) / mass
        })
        .collect())
}

/// Central finite-difference gradient of the ULL objective, h = 1e-5.
pub fn finite_difference_grad_ull(
    z: &LogitVector,
    users: &UserTokenSet,
    alpha: f64,
    h: f64,
) -> Result<Vec<f64>> {
    let eval = |values: Vec<f64>| -> Result<f64> {
        let logits = LogitVector::new(values)?;
        ull(&softmax(&logits), users, alpha)
    };
    (0..z.len())
        .map(|k| {
            let mut plus = z.0.clone();
            plus[k] += h;
            let mut minus = z.0.clone();
            minus[k] -= h;
            Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
        })
        .collect()
}

/// Checkpoint-selection score: mean of token accuracy against the reference
/// and against the user input. acc(a, b) counts positional matches over the
/// first min(|a|,|b|) tokens, normalized by max(|a|,|b|); two empty
/// sequences score 1, one empty scores 0.
pub fn selection_score<T: PartialEq>(generated: &[T], reference: &[T], user: &[T]) -> f64 {
    fn acc<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
        if a.is_empty() && b.is_empty() {
            return 1.0;
        }
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        let matches = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
        matches as f64 / a.len().max(b.len()) as f64
    }
    (acc(generated, reference) + acc(generated, user)) / 2.0
}

/// Gradient-check configuration. `alpha: None` draws a fresh alpha in
/// [0.1, 0.5] per trial; `Some(a)` pins it.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub max_vocab: usize,
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            trials: 1000,
            max_vocab: 32,
            alpha: None,
            seed: 0,
        }
    }
}

/// Relative-error tolerance of the gradient gate.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare the analytic ULL gradient against central finite differences over
/// seeded random (z, U, alpha) draws. The per-trial error is
/// max_k |analytic_k - fd_k| / max(1, max_k |fd_k|).
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("grad check needs at least one trial".into()));
    }
    if cfg.max_vocab < 2 {
        return Err(Error::InvalidArgument("grad check needs max_vocab >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..cfg.trials {
        let vocab = rng.gen_range(2..=cfg.max_vocab);
        let values: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let z = LogitVector::new(values)?;
        let mut ids: BTreeSet<usize> = (0..vocab).filter(|_| rng.gen_bool(0.5)).collect();
        if ids.is_empty() {
            ids.insert(rng.gen_range(0..vocab));
        }
        let users = UserTokenSet::new(ids);
        let alpha = cfg.alpha.unwrap_or_else(|| rng.gen_range(0.1..=0.5));

        let analytic = grad_ull(&z, &users, alpha)?;
        let numeric = finite_difference_grad_ull(&z, &users, alpha, 1e-5)?;
        let scale = numeric.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1.0);
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
            / scale;
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradCheckReport {
        trials: cfg.trials,
        max_rel_err,
        tolerance: GRAD_CHECK_TOLERANCE,
        passed: max_rel_err < GRAD_CHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform4() -> TokenDist {
        softmax(&LogitVector::new(vec![0.0; 4]).unwrap())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let d = uniform4();
        for p in d.probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form_ratios() {
        let z = LogitVector::new(vec![1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()]).unwrap();
        let d = softmax(&z);
        let expected = [0.1, 0.2, 0.3, 0.4];
        for (p, e) in d.probs().iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let z = LogitVector::new(vec![1000.0, 0.0, 0.0]).unwrap();
        let d = softmax(&z);
        assert!(d.probs().iter().all(|p| p.is_finite()));
        assert!((d.probs()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_closed_forms() {
        let d = TokenDist::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(ce_loss(&d, 0).unwrap(), 0.0);
        assert!(ce_loss(&d, 1).is_err());
        let u = uniform4();
        assert!((ce_loss(&u, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((ce_loss(&u, 2).unwrap() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn unlikelihood_closed_forms() {
        let u = uniform4();
        assert_eq!(unlikelihood_loss(&u, &BTreeSet::new()).unwrap(), 0.0);
        let one: BTreeSet<usize> = [0].into();
        let expected = -(0.75f64.ln());
        assert!((unlikelihood_loss(&u, &one).unwrap() - expected).abs() < 1e-12);
        let two: BTreeSet<usize> = [0, 1].into();
        assert!((unlikelihood_loss(&u, &two).unwrap() - 2.0 * expected).abs() < 1e-12);
        let degenerate = TokenDist::new(vec![1.0, 0.0]).unwrap();
        assert!(unlikelihood_loss(&degenerate, &one).is_err());
    }

    #[test]
    fn ull_closed_forms() {
        let u = uniform4();
        let all = UserTokenSet::new(0..4);
        assert!(ull(&u, &all, 0.7).unwrap().abs() < 1e-12);
        let single = UserTokenSet::new([0]);
        assert!((ull(&u, &single, 0.2).unwrap() - (-0.2 * 0.25f64.ln())).abs() < 1e-12);
        assert!((ull(&u, &single, 0.2).unwrap() - 0.2773).abs() < 1e-4);
        assert_eq!(ull(&u, &single, 0.0).unwrap(), 0.0);
        assert!(ull(&u, &UserTokenSet::default(), 0.2).is_err());
    }

    #[test]
    fn ull_is_nonnegative_and_zero_only_at_full_mass() {
        let d = TokenDist::new(vec![0.5, 0.3, 0.2]).unwrap();
        let partial = UserTokenSet::new([0, 2]);
        assert!(ull(&d, &partial, 1.0).unwrap() > 0.0);
        let full = UserTokenSet::new([0, 1, 2]);
        assert!(ull(&d, &full, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn combined_loss_modes_sum_their_terms() {
        let z = LogitVector::new(vec![0.0; 4]).unwrap();
        let users = UserTokenSet::new([0]);
        let empty = BTreeSet::new();
        let ce = combined_loss(&z, 0, &empty, &users, 0.2, LossMode::Ce).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let ce_ull = combined_loss(&z, 0, &empty, &users, 0.2, LossMode::CeUll).unwrap();
        assert!((ce_ull - (4f64.ln() - 0.2 * 0.25f64.ln())).abs() < 1e-12);
        assert!((ce_ull - 1.6636).abs() < 1e-4);
        // alpha = 0 reduces ULL modes to their base mode.
        let zeroed = combined_loss(&z, 0, &empty, &users, 0.0, LossMode::CeUll).unwrap();
        assert!((zeroed - ce).abs() < 1e-15);
        // No hidden scaling in the full combination.
        let negatives: BTreeSet<usize> = [1].into();
        let full = combined_loss(&z, 0, &negatives, &users, 0.2, LossMode::CeUnlUll).unwrap();
        let d = softmax(&z);
        let explicit = ce_loss(&d, 0).unwrap()
            + unlikelihood_loss(&d, &negatives).unwrap()
            + ull(&d, &users, 0.2).unwrap();
        assert!((full - explicit).abs() < 1e-15);
    }

    #[test]
    fn sequence_loss_is_mean_over_timesteps() {
        let users = UserTokenSet::new([0]);
        let steps: Vec<Timestep> = [0usize, 1]
            .iter()
            .map(|&t| Timestep {
                logits: LogitVector::new(vec![0.0; 4]).unwrap(),
                target: t,
                negatives: BTreeSet::new(),
            })
            .collect();
        let per_step = combined_loss(
            &steps[0].logits,
            0,
            &steps[0].negatives,
            &users,
            0.2,
            LossMode::CeUll,
        )
        .unwrap();
        let seq = sequence_loss(&steps, &users, 0.2, LossMode::CeUll).unwrap();
        assert!((seq - per_step).abs() < 1e-12); // identical steps, same mean
    }

    #[test]
    fn repetition_negatives_accumulate_prefix_tokens() {
        let negs = repetition_negatives(&[5, 3, 5, 7]);
        assert!(negs[0].is_empty());
        assert_eq!(negs[1], [5].into());
        assert_eq!(negs[2], [3, 5].into());
        assert_eq!(negs[3], [3, 5].into());
    }

    #[test]
    fn grad_ull_closed_form_uniform_case() {
        let z = LogitVector::new(vec![0.0; 4]).unwrap();
        let users = UserTokenSet::new([0]);
        let g = grad_ull(&z, &users, 1.0).unwrap();
        let expected = [-0.75, 0.25, 0.25, 0.25];
        for (a, e) in g.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_ull_is_zero_when_users_cover_vocabulary() {
        let z = LogitVector::new(vec![0.3, -1.2, 2.0]).unwrap();
        let users = UserTokenSet::new(0..3);
        for g in grad_ull(&z, &users, 0.4).unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_passes_default_gate() {
        let report = grad_check(&GradCheckConfig {
            trials: 200,
            seed: 7,
            ..GradCheckConfig::default()
        })
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn selection_score_cases() {
        assert_eq!(selection_score(&["a", "b"], &["a", "b"], &["a", "b"]), 1.0);
        assert_eq!(selection_score(&["a", "b"], &["a", "b"], &["c", "d"]), 0.5);
        // Truncation is normalized by the longer side.
        let acc_part = selection_score(&["a"], &["a", "b"], &["a"]);
        assert!((acc_part - (0.5 + 1.0) / 2.0).abs() < 1e-12);
        let empty: [&str; 0] = [];
        assert_eq!(selection_score(&empty, &empty, &empty), 1.0);
        assert_eq!(selection_score(&empty, &["a"], &empty), 0.5);
    }

    proptest! {
        /// Softmax is invariant under adding a constant to every logit.
        #[test]
        fn softmax_shift_invariance(
            values in proptest::collection::vec(-10.0f64..10.0, 2..12),
            shift in -50.0f64..50.0,
        ) {
            let base = softmax(&LogitVector::new(values.clone()).unwrap());
            let shifted =
                softmax(&LogitVector::new(values.iter().map(|v| v + shift).collect()).unwrap());
            for (a, b) in base.probs().iter().zip(shifted.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        /// Raising the logit of a user token strictly lowers the loss.
        #[test]
        fn ull_monotone_in_user_logit(
            values in proptest::collection::vec(-3.0f64..3.0, 3..10),
            bump in 0.01f64..2.0,
        ) {
            let users = UserTokenSet::new([0]);
            let z = LogitVector::new(values.clone()).unwrap();
            let before = ull(&softmax(&z), &users, 0.3).unwrap();
            let mut bumped = values;
            bumped[0] += bump;
            let after = ull(&softmax(&LogitVector::new(bumped).unwrap()), &users, 0.3).unwrap();
            prop_assert!(after < before);
        }
    }
}
