//! Normal distribution helpers and small numeric utilities.

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// Rational approximation of the normal quantile (P. J. Acklam), relative
// error below 1.15e-9 before refinement.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [7.784_695_709_041_462e-3, 3.224_671_290_700_398e-1, 2.445_134_137_142_996, 3.754_408_661_907_416];
const P_LOW: f64 = 0.02425;

fn acklam(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -acklam(1.0 - p)
    }
}

/// Standard normal quantile: rational approximation followed by one Halley
/// step against the erfc-based CDF.
pub fn norm_quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let x = acklam(p);
    let e = norm_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Neumaier compensated sum.
pub fn ksum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for v in it {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// Running compensated accumulator for vectors.
#[derive(Clone, Debug)]
pub struct KahanVec {
    s: Vec<f64>,
    c: Vec<f64>,
}

impl KahanVec {
    pub fn new(d: usize) -> Self {
        Self { s: vec![0.0; d], c: vec![0.0; d] }
    }

    pub fn add(&mut self, v: &[f64]) {
        for ((s, c), &x) in self.s.iter_mut().zip(self.c.iter_mut()).zip(v) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    pub fn total(&self) -> Vec<f64> {
        self.s.iter().zip(&self.c).map(|(s, c)| s + c).collect()
    }
}

pub fn mean(x: &[f64]) -> f64 {
    ksum(x.iter().copied()) / x.len() as f64
}

/// Variance with divisor `n - ddof`.
pub fn variance(x: &[f64], ddof: usize) -> f64 {
    let m = mean(x);
    ksum(x.iter().map(|v| (v - m) * (v - m))) / (x.len() - ddof) as f64
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Left-continuous empirical inverse `inf{t : F(t) >= q}` on sorted data.
pub fn type1_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[idx - 1]
}

/// `inf{t : F(t) >= j/J}` on sorted data, computed with integer arithmetic.
pub fn type1_quantile_frac(sorted: &[f64], j: usize, big_j: usize) -> f64 {
    let n = sorted.len();
    let idx = ((j * n).div_ceil(big_j)).clamp(1, n);
    sorted[idx - 1]
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_round_trip() {
        for &p in &[1e-12, 1e-6, 0.01, 0.025, 0.2, 0.5, 0.8, 0.975, 0.999_999] {
            let x = norm_quantile(p);
            assert!((norm_cdf(x) - p).abs() < 1e-9 * p.max(1e-3), "p = {p}");
        }
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((norm_quantile(0.95) - 1.644_853_626_951_472_2).abs() < 1e-12);
    }

    #[test]
    fn compensated_sum_is_order_free() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(ksum(v), 2.0);
        let mut k = KahanVec::new(1);
        for x in v {
            k.add(&[x]);
        }
        assert_eq!(k.total()[0], 2.0);
    }

    #[test]
    fn type1_and_ranks() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(type1_quantile(&s, 1.0 / 3.0), 2.0);
        assert_eq!(type1_quantile(&s, 0.5), 3.0);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
