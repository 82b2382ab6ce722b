//! Stochastic connection gates.
//!
//! Every gateable connection carries an unconstrained logit `φ`; its
//! retention probability is `sigmoid(φ)`. A gate is sampled with the binary
//! Gumbel-Softmax relaxation
//!
//! ```text
//! soft = exp((ln θ + ξ)/τ) / (exp((ln θ + ξ)/τ) + exp((ln(1-θ) + ξ')/τ))
//!      = sigmoid((φ + ξ - ξ') / τ)
//! ```
//!
//! with two independent standard Gumbel draws `ξ`, `ξ'`. The forward pass
//! uses the hard value `1[soft > 0.5]`; the backward pass treats the
//! thresholding as the identity (straight-through), so gradients reach `φ`
//! through `d soft / d φ`.
//!
//! Because `1[soft > 0.5] = 1[φ + ξ - ξ' > 0]` and `ξ - ξ'` is standard
//! logistic, a hard gate is 1 with probability exactly `sigmoid(φ)` at any
//! temperature.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const UNIFORM_SCALE: f64 = 1.0 / (1u64 << 52) as f64;

/// Seeded random stream.
///
/// Backed by ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`). Equal seeds
/// give identical streams on every platform. [`Rng::fork`] derives
/// independent child streams by selecting a different ChaCha stream id on a
/// copy of the key, so consumers can be isolated from one another.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream `stream` of the generator seeded with this
    /// stream's seed. Does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw on the open interval (0, 1).
    ///
    /// Takes the top 52 bits `k` and returns `(k + 0.5) / 2^52`; both the
    /// smallest (`2^-53`) and largest (`1 - 2^-53`) results are exact, so
    /// neither endpoint is reachable.
    pub fn uniform(&mut self) -> f64 {
        let k = self.inner.next_u64() >> 12;
        (k as f64 + 0.5) * UNIFORM_SCALE
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Strictly positive relaxation temperature.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::Config(format!(
                "temperature must be positive and finite, got {tau}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(tau: f64) -> Result<Self> {
        Temperature::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One standard Gumbel(0, 1) draw: `-ln(-ln(u))`.
#[inline]
pub fn gumbel_noise(rng: &mut Rng) -> f64 {
    gumbel_from_uniform(rng.uniform())
}

#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Relaxed gate value in the stable form `sigmoid((φ + ξ - ξ') / τ)`.
///
/// Mathematically in (0, 1); in `f64` it saturates to exactly 0 or 1 once
/// `|φ + ξ - ξ'| / τ` exceeds roughly 37.
#[inline]
pub fn soft_gate(logit: f64, tau: Temperature, xi: f64, xi_prime: f64) -> f64 {
    sigmoid((logit + xi - xi_prime) / tau.get())
}

/// `d soft_gate / d φ = soft (1 - soft) / τ`, evaluated as
/// `sigmoid(x) sigmoid(-x) / τ` so it stays accurate where `soft` rounds to 1.
#[inline]
pub fn soft_gate_grad(logit: f64, tau: Temperature, xi: f64, xi_prime: f64) -> f64 {
    let x = (logit + xi - xi_prime) / tau.get();
    sigmoid(x) * sigmoid(-x) / tau.get()
}

/// Hard straight-through value of a relaxed gate: 1 if `soft > 0.5`, else 0.
///
/// The backward pass treats this function as the identity on `soft`
/// (`hard = threshold(soft) + soft - detach(soft)`), so an upstream gradient
/// `dL/dhard` is forwarded unchanged as `dL/dsoft`.
#[inline]
pub fn hard_gate_st(soft: f64) -> f64 {
    if soft > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Value and logit-derivative of one straight-through gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StraightThrough {
    pub value: f64,
    pub soft: f64,
    pub dvalue_dlogit: f64,
}

pub fn straight_through(logit: f64, tau: Temperature, xi: f64, xi_prime: f64) -> StraightThrough {
    let soft = soft_gate(logit, tau, xi, xi_prime);
    StraightThrough {
        value: hard_gate_st(soft),
        soft,
        dvalue_dlogit: soft_gate_grad(logit, tau, xi, xi_prime),
    }
}

/// Gate logits with the temperature they are sampled at.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub logits: Vec<f64>,
    pub tau: Temperature,
}

impl GateParams {
    pub fn new(logits: Vec<f64>, tau: Temperature) -> Self {
        Self { logits, tau }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Retention probabilities `sigmoid(φ)`.
    pub fn retain_probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> GateSample {
        sample_gates(&self.logits, self.tau, rng)
    }
}

/// One realized gate vector with everything the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    /// Hard values, each exactly 0.0 or 1.0.
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub xi: Vec<f64>,
    pub xi_prime: Vec<f64>,
    pub tau: Temperature,
    /// Set for samples built from a fixed mask; such samples carry no
    /// gradient path to the logits.
    pub pinned: bool,
}

impl GateSample {
    /// Gates fixed to a binary mask. `soft` mirrors `hard` and the noise
    /// record is zero.
    pub fn pinned(mask: &[bool]) -> Self {
        let hard: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let n = hard.len();
        Self {
            soft: hard.clone(),
            hard,
            xi: vec![0.0; n],
            xi_prime: vec![0.0; n],
            tau: Temperature(1.0),
            pinned: true,
        }
    }

    pub fn all_open(len: usize) -> Self {
        Self::pinned(&vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    /// `d soft_i / d φ_i` for every gate, replaying the recorded noise.
    pub fn soft_grads(&self, logits: &[f64]) -> Vec<f64> {
        logits
            .iter()
            .zip(self.xi.iter().zip(&self.xi_prime))
            .map(|(&l, (&xi, &xp))| soft_gate_grad(l, self.tau, xi, xp))
            .collect()
    }

    pub fn density(&self, mode: DensityMode) -> f64 {
        effective_density(self, mode)
    }
}

/// Draws fresh `(ξ, ξ')` for every gate and returns the paired hard/soft
/// values. `ξ` is drawn before `ξ'` for each gate in index order.
pub fn sample_gates(logits: &[f64], tau: Temperature, rng: &mut Rng) -> GateSample {
    let n = logits.len();
    let mut hard = Vec::with_capacity(n);
    let mut soft = Vec::with_capacity(n);
    let mut xi = Vec::with_capacity(n);
    let mut xi_prime = Vec::with_capacity(n);
    for &l in logits {
        let a = gumbel_noise(rng);
        let b = gumbel_noise(rng);
        let s = soft_gate(l, tau, a, b);
        xi.push(a);
        xi_prime.push(b);
        soft.push(s);
        hard.push(hard_gate_st(s));
    }
    GateSample {
        hard,
        soft,
        xi,
        xi_prime,
        tau,
        pinned: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMode {
    Hard,
    Soft,
}

/// Global mean gate value over all gates. An empty sample has density 0.
pub fn effective_density(gates: &GateSample, mode: DensityMode) -> f64 {
    let values = match mode {
        DensityMode::Hard => &gates.hard,
        DensityMode::Soft => &gates.soft,
    };
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    #[test]
    fn gumbel_fixed_points() {
        let e = std::f64::consts::E;
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
        assert!((gumbel_from_uniform((-e).exp()) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = Rng::new(11);
        let n = 1_000_000;
        let mean = (0..n).map(|_| gumbel_noise(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_stays_open() {
        let mut rng = Rng::new(0);
        for _ in 0..100_000 {
            let u = rng.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
        // extreme raw draws map inside the interval
        let (lo, hi) = (
            std::hint::black_box(0.5),
            std::hint::black_box((1u64 << 52) as f64 - 0.5),
        );
        assert!(lo * UNIFORM_SCALE > 0.0);
        assert!(hi * UNIFORM_SCALE < 1.0);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn forks_are_distinct_and_reproducible() {
        let root = Rng::new(5);
        let mut f1 = root.fork(1);
        let mut f1b = root.fork(1);
        let mut f2 = root.fork(2);
        let x = f1.next_u64();
        assert_eq!(x, f1b.next_u64());
        assert_ne!(x, f2.next_u64());
    }

    #[test]
    fn temperature_rejects_nonpositive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert!(Temperature::new(1e-9).is_ok());
    }

    #[test]
    fn soft_gate_symmetric_case() {
        assert_eq!(soft_gate(0.0, tau(0.3), 1.7, 1.7), 0.5);
    }

    #[test]
    fn soft_gate_matches_two_term_form() {
        // direct evaluation with θ = 0.5, ξ - ξ' = 2, τ = 1
        let theta: f64 = 0.5;
        let (xi, xp) = (2.5, 0.5);
        let a = (theta.ln() + xi).exp();
        let b = ((1.0 - theta).ln() + xp).exp();
        let direct = a / (a + b);
        let stable = soft_gate(0.0, tau(1.0), xi, xp);
        assert!((direct - stable).abs() < 1e-12);
        assert!((stable - 0.880_797_077_977_882_4).abs() < 1e-12);
    }

    #[test]
    fn soft_gate_flattens_at_high_temperature() {
        let s = soft_gate(3.0, tau(1e12), 1.2, -0.4);
        assert!((s - 0.5).abs() < 1e-9);
    }

    #[test]
    fn hard_gate_threshold_and_tie() {
        assert_eq!(hard_gate_st(0.7), 1.0);
        assert_eq!(hard_gate_st(0.2), 0.0);
        assert_eq!(hard_gate_st(0.5), 0.0);
    }

    #[test]
    fn straight_through_gradient_matches_soft_path() {
        let t = tau(0.7);
        let (phi, xi, xp) = (0.3, 0.25, -0.1);
        let st = straight_through(phi, t, xi, xp);
        let h = 1e-6;
        let fd = (soft_gate(phi + h, t, xi, xp) - soft_gate(phi - h, t, xi, xp)) / (2.0 * h);
        let analytic = st.soft * (1.0 - st.soft) / t.get();
        assert!(((st.dvalue_dlogit - fd) / fd).abs() < 1e-8);
        assert!(((st.dvalue_dlogit - analytic) / analytic).abs() < 1e-12);
        assert_eq!(st.value, 1.0);
    }

    #[test]
    fn confident_gates_always_open() {
        let mut rng = Rng::new(3);
        let params = GateParams::new(vec![20.0; 3], tau(1.0));
        for _ in 0..1000 {
            assert_eq!(params.sample(&mut rng).hard, vec![1.0, 1.0, 1.0]);
        }
    }

    fn retention_rate(phi: f64, t: f64, n: usize, seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let mut ones = 0usize;
        for _ in 0..n {
            let xi = gumbel_noise(&mut rng);
            let xp = gumbel_noise(&mut rng);
            ones += hard_gate_st(soft_gate(phi, tau(t), xi, xp)) as usize;
        }
        ones as f64 / n as f64
    }

    #[test]
    fn retention_rate_matches_probability() {
        assert!((retention_rate(0.0, 0.1, 100_000, 1) - 0.5).abs() < 0.01);
        assert!((retention_rate(logit(0.9), 0.1, 100_000, 2) - 0.9).abs() < 0.01);
    }

    #[test]
    fn sample_records_noise_for_replay() {
        let mut rng = Rng::new(9);
        let logits = vec![-1.0, 0.0, 2.0, 0.4];
        let s = sample_gates(&logits, tau(0.5), &mut rng);
        for (i, &phi) in logits.iter().enumerate() {
            assert_eq!(s.soft[i], soft_gate(phi, s.tau, s.xi[i], s.xi_prime[i]));
            assert_eq!(s.hard[i], if s.soft[i] > 0.5 { 1.0 } else { 0.0 });
        }
        let mut rng2 = Rng::new(9);
        assert_eq!(s, sample_gates(&logits, tau(0.5), &mut rng2));
    }

    #[test]
    fn density_modes() {
        let s = GateSample::pinned(&[true, false, false, true]);
        assert_eq!(effective_density(&s, DensityMode::Hard), 0.5);
        assert_eq!(GateSample::all_open(7).density(DensityMode::Hard), 1.0);

        let mut rng = Rng::new(17);
        let logits: Vec<f64> = (0..500).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let s = sample_gates(&logits, tau(0.5), &mut rng);
        let recomputed = logits
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let theta = sigmoid(l);
                let a = ((theta.ln() + s.xi[i]) / 0.5).exp();
                let b = (((1.0 - theta).ln() + s.xi_prime[i]) / 0.5).exp();
                a / (a + b)
            })
            .sum::<f64>()
            / logits.len() as f64;
        assert!((s.density(DensityMode::Soft) - recomputed).abs() < 1e-12);
    }
}
