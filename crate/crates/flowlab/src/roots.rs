//! Scalar root finding for monotone maps: geometric bracket growth followed by
//! Newton iterations safeguarded by bisection.

use crate::error::{Error, Result};

/// Maximum number of bracket doublings before we declare the target outside
/// the numeric range of the map.
pub const MAX_DOUBLINGS: u32 = 60;

/// Solve f(x) = target for a monotone (increasing or decreasing) f.
///
/// The bracket starts at `[seed - r0, seed + r0]` and grows geometrically until
/// it straddles the target. Refinement uses Newton steps on a secant-estimated
/// derivative, falling back to bisection whenever a step leaves the bracket,
/// and stops when the bracket width is below `tol`.
pub fn invert_monotone<F: FnMut(f64) -> f64>(
    mut f: F,
    target: f64,
    seed: f64,
    tol: f64,
) -> Result<f64> {
    let r0 = 1.0_f64;
    let mut lo = seed - r0;
    let mut hi = seed + r0;
    let mut flo = f(lo);
    let mut fhi = f(hi);
    // Orient so the map is increasing on the bracket.
    let increasing = fhi >= flo;
    let mut doublings = 0;
    loop {
        let (below, above) = if increasing { (flo, fhi) } else { (fhi, flo) };
        if below <= target && target <= above {
            break;
        }
        if doublings >= MAX_DOUBLINGS {
            return Err(Error::BracketFailure { seed, doublings });
        }
        let width = hi - lo;
        lo -= width;
        hi += width;
        flo = f(lo);
        fhi = f(hi);
        doublings += 1;
    }
    refine_in_bracket(&mut f, target, lo, hi, flo, fhi, tol)
}

/// Refine a root of f(x) = target known to lie inside [lo, hi].
pub fn refine_in_bracket<F: FnMut(f64) -> f64>(
    f: &mut F,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    mut flo: f64,
    mut fhi: f64,
    tol: f64,
) -> Result<f64> {
    if flo == target {
        return Ok(lo);
    }
    if fhi == target {
        return Ok(hi);
    }
    let increasing = fhi >= flo;
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let fx = f(x);
        let res = fx - target;
        if res == 0.0 {
            return Ok(x);
        }
        // Shrink the bracket around the root.
        if (res > 0.0) == increasing {
            hi = x;
            fhi = fx;
        } else {
            lo = x;
            flo = fx;
        }
        // Newton step on the secant slope across the current bracket; it is a
        // true Newton step in the limit and never divides by zero for a
        // strictly monotone map on a nondegenerate bracket.
        let slope = (fhi - flo) / (hi - lo);
        let mut next = if slope.is_finite() && slope != 0.0 { x - res / slope } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        x = next;
    }
    Ok(0.5 * (lo + hi))
}
