//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;

/// Utility written out from scratch, no library code involved.
pub fn utility(w: &[f64; 5], q: f64, p: f64, s: f64, shares: f64, views: f64) -> f64 {
    let [alpha, beta, eta, delta, theta] = *w;
    let own = (s / p).ln();
    let norm = (s / q).ln();
    beta * views
        - alpha * (views - shares).powi(2)
        - eta * shares * shares
        - delta * shares * ((1.0 - theta) * own * own + theta * norm * norm)
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Maximize the utility over `(s, S, N)` numerically: golden-section search
/// on `ln s` wrapped around a finite-difference Newton solve for `(S, N)`.
/// Returns `(s, S, N)`.
pub fn numeric_maximizer(w: &[f64; 5], q: f64, p: f64) -> (f64, f64, f64) {
    let inner = |s: f64| -> (f64, f64, f64) {
        let f = |x: f64, y: f64| utility(w, q, p, s, x, y);
        let (mut x, mut y) = (0.5, 1.0);
        let h = 1e-3;
        for _ in 0..4 {
            let gx = (f(x + h, y) - f(x - h, y)) / (2.0 * h);
            let gy = (f(x, y + h) - f(x, y - h)) / (2.0 * h);
            let hxx = (f(x + h, y) - 2.0 * f(x, y) + f(x - h, y)) / (h * h);
            let hyy = (f(x, y + h) - 2.0 * f(x, y) + f(x, y - h)) / (h * h);
            let hxy = (f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h)) / (4.0 * h * h);
            let det = hxx * hyy - hxy * hxy;
            x -= (hyy * gx - hxy * gy) / det;
            y -= (hxx * gy - hxy * gx) / det;
        }
        // Shares cannot be negative; otherwise the penalty turns into a reward.
        if x < 0.0 {
            x = 0.0;
            y = golden_max(|v| f(0.0, v), 0.0, 100.0, 1e-12);
        }
        (x, y, f(x, y))
    };
    // The profile in `ln s` can have a second basin where shares hit zero, so
    // bracket the best grid point before refining.
    let (lo, hi) = (q.min(p).ln() - 0.5, q.max(p).ln() + 0.5);
    let steps = 400;
    let step = (hi - lo) / steps as f64;
    let best = (0..=steps)
        .map(|k| lo + step * k as f64)
        .max_by(|a, b| inner(a.exp()).2.total_cmp(&inner(b.exp()).2))
        .unwrap();
    let t = golden_max(|t| inner(t.exp()).2, best - step, best + step, 1e-11);
    let s = t.exp();
    let (shares, views, _) = inner(s);
    (s, shares, views)
}

/// Parameter draw with an interior optimum at every `(q, p)` drawn alongside.
pub fn draw_interior<R: Rng>(rng: &mut R) -> ([f64; 5], f64, f64) {
    loop {
        let w = [
            rng.random_range(0.5..2.0),
            rng.random_range(1.0..4.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.2..4.0),
            rng.random_range(0.0..1.0),
        ];
        let q: f64 = rng.random_range(0.02..0.6);
        let p: f64 = rng.random_range(0.02..0.6);
        let [alpha, beta, eta, delta, theta] = w;
        let m = theta * (1.0 - theta) * (q / p).ln().powi(2);
        let n = (beta * (alpha + eta) - delta * alpha * m) / (2.0 * alpha * eta);
        let s = (2.0 * n * alpha - delta * m) / (2.0 * (eta + alpha));
        if n > 0.1 && s > 0.05 && s < n {
            return (w, q, p);
        }
    }
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}
