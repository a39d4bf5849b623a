//! Brent's derivative-free scalar minimization (golden section with
//! parabolic interpolation) on a closed interval.

/// (3 - sqrt(5)) / 2
const GOLDEN: f64 = 0.381_966_011_250_105_1;
const SQRT_EPS: f64 = 1.490_116_119_384_765_6e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrentResult {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` on `[a, b]` starting from `x0` (clamped into the interval).
///
/// `tol` is the absolute x tolerance; the returned `x` lies within roughly
/// `2 * tol` of a local minimizer. At most `max_iter` iterations run.
pub fn minimize<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    x0: f64,
    tol: f64,
    max_iter: usize,
) -> BrentResult {
    let (mut a, mut b) = if a <= b { (a, b) } else { (b, a) };
    let mut x = x0.clamp(a, b);
    let mut fx = f(x);
    let mut evaluations = 1;
    if b - a <= 2.0 * tol {
        return BrentResult {
            x,
            fx,
            iterations: 0,
            evaluations,
            converged: true,
        };
    }
    let (mut w, mut v) = (x, x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for iter in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = SQRT_EPS * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return BrentResult {
                x,
                fx,
                iterations: iter,
                evaluations,
                converged: true,
            };
        }
        let mut golden = true;
        if e.abs() > tol1 {
            // parabola through (x, fx), (w, fw), (v, fv)
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d >= 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        evaluations += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    BrentResult {
        x,
        fx,
        iterations: max_iter,
        evaluations,
        converged: false,
    }
}
