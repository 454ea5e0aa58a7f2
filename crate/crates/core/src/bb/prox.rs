//! Proximal operator of the perspective function `f(φ, m) = ‖m‖² / (2φ)`.

const NEWTON_TOLERANCE: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 200;

/// `argmin_{φ,m} f(φ, m) + ‖(φ, m) − (φ̃, m̃)‖² / (2γ)`, in place.
///
/// The optimal density is the largest root of
/// `(φ − φ̃)(φ + γ)² − (γ/2)‖m̃‖²`; a non-positive root means the prox is the
/// origin.
pub fn prox_kinetic(phi: &mut f64, m: &mut [f64], gamma: f64) {
    let norm_sq: f64 = m.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        *phi = phi.max(0.0);
        return;
    }
    let root = largest_root(*phi, norm_sq, gamma);
    if root <= 0.0 {
        *phi = 0.0;
        m.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let scale = root / (root + gamma);
    *phi = root;
    m.iter_mut().for_each(|v| *v *= scale);
}

/// Works in `u = φ + γ`, where the cubic reads `u²(u − c) − k`.
fn largest_root(phi_t: f64, norm_sq: f64, gamma: f64) -> f64 {
    let c = phi_t + gamma;
    let k = 0.5 * gamma * norm_sq;
    let p = |u: f64| u * u * (u - c) - k;
    let mut lo = c.max(0.0);
    // u − c = k/u² bounds the root by c + k/c² as well as by lo + ∛k.
    let mut hi = if c > 0.0 { c + (k / (c * c)).min(k.cbrt()) } else { k.cbrt() };
    if p(hi) <= 0.0 {
        // Only rounding keeps the bound from being positive.
        return hi - gamma;
    }
    // Newton from the right of the root stays in the convex region and
    // decreases monotonically; the bracket catches rounding trouble.
    let mut u = hi;
    for _ in 0..NEWTON_MAX_ITER {
        let val = p(u);
        if val == 0.0 {
            break;
        }
        if val > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let deriv = u * (3.0 * u - 2.0 * c);
        let step = val / deriv;
        if deriv > 0.0 && step.abs() <= NEWTON_TOLERANCE * u {
            u = (u - step).clamp(lo, hi);
            break;
        }
        let next = u - step;
        u = if deriv > 0.0 && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo <= NEWTON_TOLERANCE * hi {
            break;
        }
    }
    u - gamma
}
