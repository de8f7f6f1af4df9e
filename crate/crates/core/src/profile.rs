//! Piecewise-linear denominators `D(t) = int_t^1 level + d_end` and the
//! primitives the Parisi-type functionals need:
//! `I(t) = int_0^t 1/D`, `K(t) = int_0^t 1/D^2`, `J(t) = int_0^t K`.

/// `(-ln(1-z) - z) / z^2`, i.e. `sum_{n>=2} z^{n-2}/n`.
pub(crate) fn g_series(z: f64) -> f64 {
    if z < 0.1 {
        let mut acc = 0.0;
        let mut zp = 1.0;
        for n in 2..48 {
            acc += zp / n as f64;
            zp *= z;
        }
        acc
    } else if z >= 1.0 {
        f64::INFINITY
    } else {
        (-(-z).ln_1p() - z) / (z * z)
    }
}

/// `-ln(1-z) / z`.
fn h_series(z: f64) -> f64 {
    if z < 1e-8 {
        1.0 + 0.5 * z
    } else if z >= 1.0 {
        f64::INFINITY
    } else {
        -(-z).ln_1p() / z
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Profile {
    breaks: Vec<f64>,
    levels: Vec<f64>,
    d: Vec<f64>,
    i: Vec<f64>,
    k: Vec<f64>,
    j: Vec<f64>,
}

impl Profile {
    /// `breaks` runs from 0 to 1 and has one more entry than `levels`.
    pub(crate) fn new(breaks: Vec<f64>, levels: Vec<f64>, d_end: f64) -> Self {
        let n = levels.len();
        debug_assert_eq!(breaks.len(), n + 1);
        let mut d = vec![0.0; n + 1];
        d[n] = d_end;
        for l in (0..n).rev() {
            d[l] = d[l + 1] + levels[l] * (breaks[l + 1] - breaks[l]);
        }
        let (mut i, mut k, mut j) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
        for l in 0..n {
            let w = breaks[l + 1] - breaks[l];
            let a = d[l];
            let z = levels[l] * w / a;
            i[l + 1] = i[l] + w / a * h_series(z);
            k[l + 1] = k[l] + w / (a * d[l + 1]);
            j[l + 1] = j[l] + w * k[l] + (w / a).powi(2) * g_series(z);
        }
        Profile { breaks, levels, d, i, k, j }
    }

    fn seg(&self, t: f64) -> (usize, f64) {
        let n = self.levels.len();
        let l = self.breaks[1..n].partition_point(|&b| b <= t);
        (l, t - self.breaks[l])
    }

    #[cfg(test)]
    pub(crate) fn d_at(&self, t: f64) -> f64 {
        let (l, w) = self.seg(t);
        self.d[l] - self.levels[l] * w
    }

    pub(crate) fn i_at(&self, t: f64) -> f64 {
        let (l, w) = self.seg(t);
        let a = self.d[l];
        if w == 0.0 {
            return self.i[l];
        }
        self.i[l] + w / a * h_series(self.levels[l] * w / a)
    }

    pub(crate) fn k_at(&self, t: f64) -> f64 {
        let (l, w) = self.seg(t);
        let a = self.d[l];
        self.k[l] + w / (a * (a - self.levels[l] * w))
    }

    pub(crate) fn j_at(&self, t: f64) -> f64 {
        let (l, w) = self.seg(t);
        let a = self.d[l];
        if w == 0.0 {
            return self.j[l];
        }
        self.j[l] + w * self.k[l] + (w / a).powi(2) * g_series(self.levels[l] * w / a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn primitives_match_quadrature() {
        let p = Profile::new(vec![0.0, 0.3, 0.55, 1.0], vec![0.2, 0.6, 0.9], 0.4);
        let d = |t: f64| p.d_at(t);
        for &t in &[0.1, 0.3, 0.42, 0.8, 1.0] {
            let i = simpson(|s| 1.0 / d(s), 0.0, t, 4000);
            let k = simpson(|s| 1.0 / d(s).powi(2), 0.0, t, 4000);
            let j = simpson(|s| (t - s) / d(s).powi(2), 0.0, t, 4000);
            // Simpson is only piecewise smooth here; the kinks cost accuracy.
            assert!((p.i_at(t) - i).abs() < 1e-6, "I({t})");
            assert!((p.k_at(t) - k).abs() < 1e-6, "K({t})");
            assert!((p.j_at(t) - j).abs() < 1e-6, "J({t})");
        }
        assert!((p.d_at(1.0) - 0.4).abs() < 1e-15);
        assert!((p.d_at(0.0) - (0.4 + 0.9 * 0.45 + 0.6 * 0.25 + 0.2 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn g_series_is_continuous() {
        let a = g_series(0.1 - 1e-12);
        let b = g_series(0.1 + 1e-12);
        // g' is about 0.35 here, so the two sides differ by ~7e-13.
        assert!((a - b).abs() < 1e-12, "{a} {b}");
        assert!((g_series(0.1) - 0.536_051_565_782_630_1).abs() < 1e-15);
        assert!((g_series(0.05) - 0.517_317_755_020_213_4).abs() < 1e-15);
        assert!((g_series(0.0) - 0.5).abs() < 1e-16);
    }
}
