//! Discontinuous function approximation: a sine branch carrying Gaussian
//! noise on [0, 2π] that jumps to a shifted sine branch on (2π, 4π].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

/// Approximation domain.
pub const DOMAIN: (f64, f64) = (0.0, 4.0 * PI);

/// Noise-free target value.
///
/// `k` is the discontinuity magnitude, `omega1`/`omega2` the branch
/// frequencies. Panics if `x` lies outside [0, 4π].
pub fn clean_target(k: f64, omega1: f64, omega2: f64, x: f64) -> f64 {
    assert!(
        (DOMAIN.0..=DOMAIN.1).contains(&x),
        "x = {x} outside the [0, 4π] domain"
    );
    if x <= 2.0 * PI {
        (omega1 * x).sin()
    } else {
        k * (1.0 + (omega2 * (x - 2.0 * PI)).sin())
    }
}

/// Training target: the clean value plus zero-mean Gaussian noise of
/// standard deviation `sigma`, applied on the left branch only.
pub fn noisy_target(
    k: f64,
    omega1: f64,
    omega2: f64,
    sigma: f64,
    x: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let clean = clean_target(k, omega1, omega2, x);
    if x <= 2.0 * PI && sigma > 0.0 {
        let n: f64 = rng.sample(StandardNormal);
        clean + sigma * n
    } else {
        clean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn sine_value_at_quarter_period() {
        assert!((clean_target(1.0, 1.0, 5.0, PI / 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn right_branch_limit_value() {
        // just past the jump the shifted sine starts at k·(1 + sin 0) = k
        let v = clean_target(1.0, 1.0, 5.0, 2.0 * PI + 1e-9);
        assert!((v - 1.0).abs() < 1e-8);
    }

    #[test]
    fn jump_magnitude_for_unit_frequency() {
        // left limit sin(2π) = 0, right limit k = 1 → jump of 1
        let left = clean_target(1.0, 1.0, 5.0, 2.0 * PI);
        let right = clean_target(1.0, 1.0, 5.0, 2.0 * PI + 1e-12);
        assert!((right - left - 1.0).abs() < 1e-10);
    }

    #[test]
    fn noise_confined_to_left_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xl = 1.3;
        let xr = 2.0 * PI + 1.3;
        let nl = noisy_target(1.0, 2.0, 5.5, 0.2, xl, &mut rng);
        let nr = noisy_target(1.0, 2.0, 5.5, 0.2, xr, &mut rng);
        assert_ne!(nl, clean_target(1.0, 2.0, 5.5, xl));
        assert_eq!(nr, clean_target(1.0, 2.0, 5.5, xr));
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn domain_bounds_enforced() {
        clean_target(1.0, 1.0, 5.0, -0.1);
    }
}
