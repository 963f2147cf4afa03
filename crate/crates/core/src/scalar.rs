//! One-dimensional minimization used by every threshold search.
//!
//! A probe grid brackets the global minimum, golden-section search narrows the
//! bracket, and, when the caller can supply the sign of the derivative, a
//! bisection on that sign pins the stationary point to a few ulps. Function
//! values alone cannot resolve a minimizer much below `sqrt(eps)`.

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScalarMin {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
    /// More than one strict local minimum among the probes.
    pub multimodal: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SearchSpec {
    pub lo: f64,
    pub hi: f64,
    /// Closed support the bracket may grow into.
    pub support: (f64, f64),
    pub probes: usize,
    pub tol: f64,
}

pub(crate) fn golden_section(f: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64, usize) {
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut evals = 2;
    while b - a > tol && evals < 400 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
        evals += 1;
        if x1 >= x2 {
            break;
        }
    }
    if f1 <= f2 {
        (x1, f1, evals)
    } else {
        (x2, f2, evals)
    }
}

/// Root of `g` in `[a, b]` given `g(a) < 0 < g(b)`.
pub(crate) fn bisect_sign(g: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let v = g(mid);
        if v < 0.0 {
            a = mid;
        } else if v > 0.0 {
            b = mid;
        } else {
            return mid;
        }
    }
    0.5 * (a + b)
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(move |i| if i + 1 == n { hi } else { lo + step * i as f64 })
}

/// Minimize `f` over the support; `slope` returns a value with the sign of `f'`.
pub(crate) fn minimize(
    mut f: impl FnMut(f64) -> f64,
    slope: Option<&dyn Fn(f64) -> f64>,
    spec: SearchSpec,
) -> ScalarMin {
    let (slo, shi) = spec.support;
    let (mut lo, mut hi) = (spec.lo.max(slo), spec.hi.min(shi));
    let probes = spec.probes.max(3);
    let mut evaluations = 0;
    let (xs, fs, best) = loop {
        let xs: Vec<f64> = linspace(lo, hi, probes).collect();
        let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        evaluations += probes;
        let best = fs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let width = hi - lo;
        if evaluations > 64 * probes {
            break (xs, fs, best);
        }
        if best == 0 && lo > slo && fs[0] < fs[1] {
            lo = (lo - width).max(slo);
            continue;
        }
        if best == probes - 1 && hi < shi && fs[probes - 1] < fs[probes - 2] {
            hi = (hi + width).min(shi);
            continue;
        }
        break (xs, fs, best);
    };

    let scale = fs[best].abs().max(f64::MIN_POSITIVE);
    let mut minima = 0;
    for i in 0..probes {
        let left = i == 0 || fs[i] < fs[i - 1] - 1e-14 * scale;
        let right = i + 1 == probes || fs[i] < fs[i + 1] - 1e-14 * scale;
        if left && right {
            minima += 1;
        }
    }

    let a = xs[best.saturating_sub(1)];
    let b = xs[(best + 1).min(probes - 1)];
    let (mut x, mut fx, evals) = golden_section(&mut f, a, b, spec.tol);
    evaluations += evals;
    if fs[best] < fx {
        x = xs[best];
        fx = fs[best];
    }

    if let Some(g) = slope {
        let (ga, gb) = (g(a), g(b));
        let candidate = if ga < 0.0 && gb > 0.0 {
            Some(bisect_sign(g, a, b))
        } else if a == slo && ga >= 0.0 && g(x) >= 0.0 {
            Some(slo)
        } else if b == shi && gb <= 0.0 && g(x) <= 0.0 {
            Some(shi)
        } else {
            None
        };
        if let Some(c) = candidate {
            let fc = f(c);
            evaluations += 1;
            if fc <= fx + 8.0 * f64::EPSILON * fx.abs() {
                x = c;
                fx = fc;
            }
        }
    }

    ScalarMin {
        x,
        fx,
        evaluations,
        multimodal: minima > 1,
    }
}
