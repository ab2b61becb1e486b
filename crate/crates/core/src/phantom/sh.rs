//! Real, even-order spherical harmonics up to order 8.
//!
//! Basis: for order `l` and degree `m`, with `N = sqrt((2l+1)/(4π) · (l-|m|)!/(l+|m|)!)` and the
//! associated Legendre function `P_l^|m|` taken without the Condon-Shortley phase,
//!
//! ```text
//! m < 0:  sqrt(2) · N · P_l^|m|(cos θ) · sin(|m| φ)
//! m = 0:            N · P_l^0(cos θ)
//! m > 0:  sqrt(2) · N · P_l^m(cos θ)  · cos(m φ)
//! ```
//!
//! Coefficients are ordered by `l` (0, 2, 4, 6, 8) then `m` from `-l` to `l`, 45 in total. The
//! basis is orthonormal on the unit sphere.

use crate::vec3::{self, V3};

pub const SH_ORDER: usize = 8;
pub const SH_COEFFS: usize = 45;

/// Index of coefficient `(l, m)` for even `l`.
pub const fn sh_index(l: usize, m: i32) -> usize {
    l * (l - if l == 0 { 0 } else { 1 }) / 2 + (l as i32 + m) as usize
}

/// Per-order apodization `1 / (1 + l(l+1)/16)` applied when synthesizing from peaks.
pub fn apodization(l: usize) -> f64 {
    1.0 / (1.0 + (l * (l + 1)) as f64 / 16.0)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// `P_l^m(x)` for all `0 <= m <= l <= SH_ORDER`, no Condon-Shortley phase.
fn legendre_table(x: f64) -> [[f64; SH_ORDER + 1]; SH_ORDER + 1] {
    let mut p = [[0.0; SH_ORDER + 1]; SH_ORDER + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    for m in 0..=SH_ORDER {
        // P_m^m = (2m-1)!! s^m
        let mut pmm = 1.0;
        for i in 0..m {
            pmm *= (2 * i + 1) as f64 * s;
        }
        p[m][m] = pmm;
        if m < SH_ORDER {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=SH_ORDER {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    p
}

/// Evaluate all 45 basis functions at the direction `dir` (need not be normalized).
pub fn sh_basis(dir: V3) -> [f64; SH_COEFFS] {
    let d = vec3::normalize(dir).unwrap_or([0.0, 0.0, 1.0]);
    let cos_theta = d[2].clamp(-1.0, 1.0);
    let phi = d[1].atan2(d[0]);
    let p = legendre_table(cos_theta);
    let mut out = [0.0; SH_COEFFS];
    for l in (0..=SH_ORDER).step_by(2) {
        for m in -(l as i32)..=(l as i32) {
            let am = m.unsigned_abs() as usize;
            let n = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - am)
                / factorial(l + am))
            .sqrt();
            let v = match m.cmp(&0) {
                std::cmp::Ordering::Less => {
                    std::f64::consts::SQRT_2 * n * p[l][am] * (am as f64 * phi).sin()
                }
                std::cmp::Ordering::Equal => n * p[l][0],
                std::cmp::Ordering::Greater => {
                    std::f64::consts::SQRT_2 * n * p[l][am] * (am as f64 * phi).cos()
                }
            };
            out[sh_index(l, m)] = v;
        }
    }
    out
}

/// Apodized delta-peak synthesis: the sum over peaks of `w_l · Y_lm(p)`.
///
/// Peaks that are not unit length are normalized with a warning; zero vectors are skipped.
pub fn sh_project_peaks(peaks: &[V3]) -> [f64; SH_COEFFS] {
    let mut out = [0.0; SH_COEFFS];
    for &p in peaks {
        let n = vec3::norm(p);
        if (n - 1.0).abs() > 1e-6 {
            if n <= 1e-12 {
                log::warn!("skipping zero-length peak");
                continue;
            }
            log::warn!("peak {p:?} has norm {n}; normalizing");
        }
        let y = sh_basis(p);
        for l in (0..=SH_ORDER).step_by(2) {
            let w = apodization(l);
            for m in -(l as i32)..=(l as i32) {
                let i = sh_index(l, m);
                out[i] += w * y[i];
            }
        }
    }
    out
}
