//! Moment functions `psi(theta, eta, w)` and their evaluation on splits.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::DeltaSpec;
use crate::learners::{Model, SplitModels};
use crate::linalg::Mat;
use crate::splits::SplitPlan;
use crate::stats::{ksum, norm_pdf, type1_quantile_frac, KahanVec};
use rayon::prelude::*;
use std::sync::Arc;

/// What a moment function sees of one evaluation row: the outcome, the
/// model prediction, the group label (NaN without a group role) and the
/// dataset row index (for custom moments that need more columns).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obs {
    pub y: f64,
    pub eta: f64,
    pub group: f64,
    pub row: usize,
}

/// Evaluation rows of one split, paired with the split model's predictions.
pub type SplitObs = Vec<Obs>;

/// Vector-valued moment function.
pub trait MomentFunction: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;

    /// Writes `psi(theta)` for one observation into `out`.
    fn psi(&self, theta: &[f64], o: &Obs, out: &mut [f64]);

    /// Analytic `d psi / d theta` into `out` (row = moment, column = parameter).
    /// Returns false when no analytic form exists.
    fn jac(&self, _theta: &[f64], _o: &Obs, _out: &mut Mat) -> bool {
        false
    }

    /// For moments of the form `psi = f(w) - theta`, writes `f(w)` and returns true.
    fn average_part(&self, _o: &Obs, _out: &mut [f64]) -> bool {
        false
    }

    /// Closed-form root of `(1/G) sum_g mean_{i in g} psi = 0`, if one exists.
    fn closed_form(&self, _groups: &[&[Obs]]) -> Option<Vec<f64>> {
        None
    }

    /// Whether `psi` is smooth in theta. Non-smooth moments are solved in
    /// closed form and are exempt from the residual check.
    fn smooth(&self) -> bool {
        true
    }

    /// Jacobian estimate for non-smooth moments, pooled over `groups`.
    fn jacobian_override(&self, _theta: &[f64], _groups: &[&[Obs]]) -> Option<Result<Mat>> {
        None
    }

    /// Parameter box; unbounded by default.
    fn theta_domain(&self) -> Vec<(f64, f64)> {
        vec![(f64::NEG_INFINITY, f64::INFINITY); self.dim()]
    }

    /// Starting point for iterative solves.
    fn theta_init(&self, _groups: &[&[Obs]]) -> Vec<f64> {
        self.theta_domain().iter().map(|&(lo, hi)| if lo.is_finite() && hi.is_finite() { 0.5 * (lo + hi) } else { 0.0 }).collect()
    }

    /// The scalar reduction reported by default.
    fn default_h(&self) -> DeltaSpec {
        if self.dim() == 1 {
            DeltaSpec::Identity
        } else {
            DeltaSpec::Coord(0)
        }
    }

    fn check_roles(&self, _d: &Dataset) -> Result<()> {
        Ok(())
    }
}

pub type MomentRef = Arc<dyn MomentFunction>;

/// Built-in moment by name, checked against the dataset roles.
pub fn builtin_moment(name: &str, d: &Dataset) -> Result<MomentRef> {
    let mf: MomentRef = match name {
        "mse" => Arc::new(Mse),
        "classify_prob" => Arc::new(ClassifyProb),
        "classify_binary" => Arc::new(ClassifyBinary),
        "covariance" => Arc::new(Covariance),
        "linreg_on_eta" => Arc::new(LinregOnEta),
        "group_mse_gap" => Arc::new(GroupMseGap),
        "tercile_fractions" => Arc::new(QuantileFractions::new(3)),
        _ => return Err(Error::UnknownMoment(name.to_string())),
    };
    mf.check_roles(d)?;
    Ok(mf)
}

pub const BUILTIN_MOMENTS: [&str; 7] =
    ["mse", "classify_prob", "classify_binary", "covariance", "linreg_on_eta", "group_mse_gap", "tercile_fractions"];

fn binary_outcome(name: &str, d: &Dataset) -> Result<()> {
    if d.y().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::IncompatibleRoles { moment: name.into(), reason: "outcome must be 0/1".into() })
    }
}

macro_rules! average_moment {
    ($ty:ident, $name:literal, |$o:ident| $f:expr) => {
        #[derive(Clone, Copy, Debug)]
        pub struct $ty;

        impl MomentFunction for $ty {
            fn name(&self) -> String {
                $name.into()
            }
            fn dim(&self) -> usize {
                1
            }
            fn psi(&self, theta: &[f64], $o: &Obs, out: &mut [f64]) {
                out[0] = $f - theta[0];
            }
            fn jac(&self, _theta: &[f64], _o: &Obs, out: &mut Mat) -> bool {
                out[(0, 0)] = -1.0;
                true
            }
            fn average_part(&self, $o: &Obs, out: &mut [f64]) -> bool {
                out[0] = $f;
                true
            }
        }
    };
}

average_moment!(Mse, "mse", |o| (o.y - o.eta) * (o.y - o.eta));
average_moment!(Covariance, "covariance", |o| o.y * o.eta);

/// Expected accuracy of a probabilistic classifier.
#[derive(Clone, Copy, Debug)]
pub struct ClassifyProb;

impl ClassifyProb {
    fn f(o: &Obs) -> f64 {
        if o.y == 1.0 {
            o.eta
        } else {
            1.0 - o.eta
        }
    }
}

impl MomentFunction for ClassifyProb {
    fn name(&self) -> String {
        "classify_prob".into()
    }
    fn dim(&self) -> usize {
        1
    }
    fn psi(&self, theta: &[f64], o: &Obs, out: &mut [f64]) {
        out[0] = Self::f(o) - theta[0];
    }
    fn jac(&self, _theta: &[f64], _o: &Obs, out: &mut Mat) -> bool {
        out[(0, 0)] = -1.0;
        true
    }
    fn average_part(&self, o: &Obs, out: &mut [f64]) -> bool {
        out[0] = Self::f(o);
        true
    }
    fn check_roles(&self, d: &Dataset) -> Result<()> {
        binary_outcome("classify_prob", d)
    }
}

/// Accuracy of the hard classifier `1{eta >= 0.5}`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifyBinary;

impl ClassifyBinary {
    fn f(o: &Obs) -> f64 {
        let label = if o.eta >= 0.5 { 1.0 } else { 0.0 };
        f64::from(u8::from(o.y == label))
    }
}

impl MomentFunction for ClassifyBinary {
    fn name(&self) -> String {
        "classify_binary".into()
    }
    fn dim(&self) -> usize {
        1
    }
    fn psi(&self, theta: &[f64], o: &Obs, out: &mut [f64]) {
        out[0] = Self::f(o) - theta[0];
    }
    fn jac(&self, _theta: &[f64], _o: &Obs, out: &mut Mat) -> bool {
        out[(0, 0)] = -1.0;
        true
    }
    fn average_part(&self, o: &Obs, out: &mut [f64]) -> bool {
        out[0] = Self::f(o);
        true
    }
    fn check_roles(&self, d: &Dataset) -> Result<()> {
        binary_outcome("classify_binary", d)
    }
}

/// Least-squares regression of the outcome on `(1, eta)`.
#[derive(Clone, Copy, Debug)]
pub struct LinregOnEta;

impl MomentFunction for LinregOnEta {
    fn name(&self) -> String {
        "linreg_on_eta".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn psi(&self, theta: &[f64], o: &Obs, out: &mut [f64]) {
        let r = o.y - theta[0] - theta[1] * o.eta;
        out[0] = r;
        out[1] = r * o.eta;
    }
    fn jac(&self, _theta: &[f64], o: &Obs, out: &mut Mat) -> bool {
        out[(0, 0)] = -1.0;
        out[(0, 1)] = -o.eta;
        out[(1, 0)] = -o.eta;
        out[(1, 1)] = -o.eta * o.eta;
        true
    }
    fn default_h(&self) -> DeltaSpec {
        DeltaSpec::Coord(1)
    }
}

/// Per-group MSE for a binary group label: `theta_1` is the MSE in group 1,
/// `theta_2` the MSE in group 0. The default reduction is their difference.
#[derive(Clone, Copy, Debug)]
pub struct GroupMseGap;

impl MomentFunction for GroupMseGap {
    fn name(&self) -> String {
        "group_mse_gap".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn psi(&self, theta: &[f64], o: &Obs, out: &mut [f64]) {
        let e = (o.y - o.eta) * (o.y - o.eta);
        let g1 = f64::from(u8::from(o.group == 1.0));
        out[0] = (e - theta[0]) * g1;
        out[1] = (e - theta[1]) * (1.0 - g1);
    }
    fn jac(&self, _theta: &[f64], o: &Obs, out: &mut Mat) -> bool {
        let g1 = f64::from(u8::from(o.group == 1.0));
        out.fill(0.0);
        out[(0, 0)] = -g1;
        out[(1, 1)] = g1 - 1.0;
        true
    }
    fn theta_init(&self, groups: &[&[Obs]]) -> Vec<f64> {
        let all: Vec<f64> = groups.iter().flat_map(|g| g.iter().map(|o| (o.y - o.eta).powi(2))).collect();
        let m = if all.is_empty() { 0.0 } else { ksum(all.iter().copied()) / all.len() as f64 };
        vec![m, m]
    }
    fn default_h(&self) -> DeltaSpec {
        DeltaSpec::Diff(0, 1)
    }
    fn check_roles(&self, d: &Dataset) -> Result<()> {
        let g = d.group().ok_or_else(|| Error::IncompatibleRoles {
            moment: "group_mse_gap".into(),
            reason: "a group column is required".into(),
        })?;
        if g.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::IncompatibleRoles { moment: "group_mse_gap".into(), reason: "group column must be 0/1".into() });
        }
        Ok(())
    }
}

/// Outcome means within J quantile bins of the prediction, with the J-1 bin
/// thresholds as nuisance parameters. Parameter layout:
/// `(theta_1, ..., theta_J, t_1, ..., t_{J-1})`. Bins are `(t_{j-1}, t_j]`.
#[derive(Clone, Copy, Debug)]
pub struct QuantileFractions {
    pub j: usize,
}

impl QuantileFractions {
    pub fn new(j: usize) -> Self {
        assert!(j >= 2);
        Self { j }
    }

    fn bin(&self, eta: f64, t: &[f64]) -> usize {
        t.iter().take_while(|&&tj| eta > tj).count()
    }

    /// Pooled left-continuous quantile thresholds over weighted groups.
    pub fn thresholds(&self, groups: &[&[Obs]]) -> Vec<f64> {
        let jj = self.j;
        if groups.len() == 1 {
            let mut e: Vec<f64> = groups[0].iter().map(|o| o.eta).collect();
            e.sort_by(f64::total_cmp);
            return (1..jj).map(|j| type1_quantile_frac(&e, j, jj)).collect();
        }
        let g = groups.len() as f64;
        let mut pts: Vec<(f64, f64)> = groups
            .iter()
            .flat_map(|s| {
                let w = 1.0 / (g * s.len() as f64);
                s.iter().map(move |o| (o.eta, w))
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::with_capacity(jj - 1);
        let mut cum = KahanVec::new(1);
        let mut next = 1;
        for (i, &(eta, w)) in pts.iter().enumerate() {
            cum.add(&[w]);
            // only cut at the last copy of a tied value
            if i + 1 < pts.len() && pts[i + 1].0 == eta {
                continue;
            }
            let c = cum.total()[0];
            while next < jj && c >= next as f64 / jj as f64 - 1e-12 {
                out.push(eta);
                next += 1;
            }
        }
        while out.len() < jj - 1 {
            out.push(pts.last().map_or(0.0, |p| p.0));
        }
        out
    }
}

/// Gaussian kernel density and Nadaraya-Watson regression of y on eta at `t`
/// with a Silverman bandwidth. Returns (density, regression).
fn kernel_at(obs: &[Obs], t: f64) -> (f64, f64) {
    let n = obs.len() as f64;
    let mean = ksum(obs.iter().map(|o| o.eta)) / n;
    let sd = (ksum(obs.iter().map(|o| (o.eta - mean).powi(2))) / (n - 1.0).max(1.0)).sqrt();
    if sd == 0.0 {
        return (0.0, mean);
    }
    let h = 1.06 * sd * n.powf(-0.2);
    let mut wsum = 0.0;
    let mut ysum = 0.0;
    for o in obs {
        let k = norm_pdf((t - o.eta) / h);
        wsum += k;
        ysum += k * o.y;
    }
    let dens = wsum / (n * h);
    let reg = if wsum > 0.0 { ysum / wsum } else { ksum(obs.iter().map(|o| o.y)) / n };
    (dens, reg)
}

impl MomentFunction for QuantileFractions {
    fn name(&self) -> String {
        if self.j == 3 {
            "tercile_fractions".into()
        } else {
            format!("quantile_fractions({})", self.j)
        }
    }
    fn dim(&self) -> usize {
        2 * self.j - 1
    }
    fn smooth(&self) -> bool {
        false
    }
    fn psi(&self, theta: &[f64], o: &Obs, out: &mut [f64]) {
        let jj = self.j;
        let t = &theta[jj..];
        let b = self.bin(o.eta, t);
        for j in 0..jj {
            out[j] = if j == b { o.y - theta[j] } else { 0.0 };
        }
        for j in 1..jj {
            out[jj + j - 1] = f64::from(u8::from(o.eta <= t[j - 1])) - j as f64 / jj as f64;
        }
    }
    fn closed_form(&self, groups: &[&[Obs]]) -> Option<Vec<f64>> {
        let jj = self.j;
        let t = self.thresholds(groups);
        let g = groups.len() as f64;
        let mut num = KahanVec::new(jj);
        let mut den = KahanVec::new(jj);
        let mut ybar = 0.0;
        for s in groups {
            let w = 1.0 / s.len() as f64;
            let mut yn = vec![0.0; jj];
            let mut cn = vec![0.0; jj];
            for o in s.iter() {
                let b = self.bin(o.eta, &t);
                yn[b] += o.y * w;
                cn[b] += w;
            }
            num.add(&yn);
            den.add(&cn);
            ybar += ksum(s.iter().map(|o| o.y)) * w / g;
        }
        let (num, den) = (num.total(), den.total());
        // an empty bin leaves its coordinate unidentified; report the pooled mean
        let mut theta: Vec<f64> = (0..jj).map(|j| if den[j] > 0.0 { num[j] / den[j] } else { ybar }).collect();
        theta.extend(t);
        Some(theta)
    }
    fn jacobian_override(&self, theta: &[f64], groups: &[&[Obs]]) -> Option<Result<Mat>> {
        let jj = self.j;
        let d = self.dim();
        let t = &theta[jj..];
        let mut acc = Mat::zeros(d, d);
        for s in groups {
            let w = 1.0 / s.len() as f64;
            let mut frac = vec![0.0; jj];
            for o in s.iter() {
                frac[self.bin(o.eta, t)] += w;
            }
            let kern: Vec<(f64, f64)> = t.iter().map(|&tj| kernel_at(s, tj)).collect();
            for j in 0..jj {
                acc[(j, j)] -= frac[j];
                if j + 1 < jj {
                    let (f, m) = kern[j];
                    acc[(j, jj + j)] += (m - theta[j]) * f;
                }
                if j > 0 {
                    let (f, m) = kern[j - 1];
                    acc[(j, jj + j - 1)] -= (m - theta[j]) * f;
                }
            }
            for j in 1..jj {
                acc[(jj + j - 1, jj + j - 1)] += kern[j - 1].0;
            }
        }
        let acc = acc / groups.len() as f64;
        Some(if acc.iter().all(|v| v.is_finite()) { Ok(acc) } else { Err(Error::NonFiniteJacobian) })
    }
    fn default_h(&self) -> DeltaSpec {
        DeltaSpec::Diff(self.j - 1, 0)
    }
}

/// Observations for `rows` of `d` under `model`.
pub fn observations(model: &dyn Model, d: &Dataset, rows: &[usize]) -> Result<SplitObs> {
    let eta = model.predict_many(d, rows)?;
    let y = d.y();
    let g = d.group();
    Ok(rows.iter().zip(eta).map(|(&i, e)| Obs { y: y[i], eta: e, group: g.map_or(f64::NAN, |g| g[i]), row: i }).collect())
}

/// Evaluation observations for every split of `plan`, in split order.
pub fn evaluate_splits(models: &SplitModels, plan: &SplitPlan, d: &Dataset) -> Result<Vec<SplitObs>> {
    (0..plan.n_splits())
        .into_par_iter()
        .map(|idx| observations(models.models[idx].as_ref(), d, plan.split(idx).as_slice()))
        .collect()
}

/// Sample mean of psi over `obs`, using compensated summation.
pub fn empirical(mf: &dyn MomentFunction, theta: &[f64], obs: &[Obs]) -> Result<Vec<f64>> {
    if obs.is_empty() {
        return Err(Error::EmptySubset);
    }
    let dim = mf.dim();
    let mut acc = KahanVec::new(dim);
    let mut buf = vec![0.0; dim];
    for o in obs {
        mf.psi(theta, o, &mut buf);
        acc.add(&buf);
    }
    Ok(acc.total().into_iter().map(|v| v / obs.len() as f64).collect())
}

/// `(1/G) sum_g empirical(g)`.
pub fn pooled(mf: &dyn MomentFunction, theta: &[f64], groups: &[&[Obs]]) -> Result<Vec<f64>> {
    let mut acc = KahanVec::new(mf.dim());
    for g in groups {
        acc.add(&empirical(mf, theta, g)?);
    }
    Ok(acc.total().into_iter().map(|v| v / groups.len() as f64).collect())
}

/// Per-observation Jacobian, analytic when available, else central differences.
pub fn jac_at(mf: &dyn MomentFunction, theta: &[f64], o: &Obs, out: &mut Mat) {
    if mf.jac(theta, o, out) {
        return;
    }
    let d = mf.dim();
    let mut tp = theta.to_vec();
    let mut up = vec![0.0; d];
    let mut dn = vec![0.0; d];
    for c in 0..d {
        let h = 1e-6 * (1.0 + theta[c].abs());
        tp[c] = theta[c] + h;
        mf.psi(&tp, o, &mut up);
        tp[c] = theta[c] - h;
        mf.psi(&tp, o, &mut dn);
        tp[c] = theta[c];
        for r in 0..d {
            out[(r, c)] = (up[r] - dn[r]) / (2.0 * h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(y: f64, eta: f64) -> Obs {
        Obs { y, eta, group: f64::NAN, row: 0 }
    }

    #[test]
    fn scalar_examples() {
        let mut out = [0.0];
        Mse.psi(&[1.0], &obs(2.0, 0.0), &mut out);
        assert_eq!(out[0], 3.0);
        ClassifyProb.psi(&[0.7], &obs(1.0, 0.7), &mut out);
        assert!(out[0].abs() < 1e-15);
        ClassifyBinary.psi(&[0.0], &obs(1.0, 0.5), &mut out);
        assert_eq!(out[0], 1.0);
        Covariance.psi(&[0.0], &obs(3.0, 2.0), &mut out);
        assert_eq!(out[0], 6.0);
        let e = empirical(&Mse, &[0.0], &[obs(1.0, 0.0), obs(1.0, 0.0)]).unwrap();
        assert_eq!(e, vec![1.0]);
        assert!(matches!(empirical(&Mse, &[0.0], &[]), Err(Error::EmptySubset)));
    }

    #[test]
    fn linreg_exact_fit() {
        let o: Vec<Obs> = (0..5).map(|i| obs(2.0 * i as f64 + 1.0, i as f64)).collect();
        let e = empirical(&LinregOnEta, &[1.0, 2.0], &o).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn analytic_jacobians_match_differences() {
        let o = Obs { y: 1.3, eta: 0.4, group: 1.0, row: 0 };
        let mfs: Vec<MomentRef> = vec![Arc::new(Mse), Arc::new(Covariance), Arc::new(LinregOnEta), Arc::new(GroupMseGap)];
        for mf in mfs {
            let d = mf.dim();
            let theta: Vec<f64> = (0..d).map(|i| 0.3 + i as f64).collect();
            let mut a = Mat::zeros(d, d);
            assert!(mf.jac(&theta, &o, &mut a));
            let mut tp = theta.clone();
            for c in 0..d {
                let h = 1e-6 * (1.0 + theta[c].abs());
                let mut up = vec![0.0; d];
                let mut dn = vec![0.0; d];
                tp[c] += h;
                mf.psi(&tp, &o, &mut up);
                tp[c] -= 2.0 * h;
                mf.psi(&tp, &o, &mut dn);
                tp[c] = theta[c];
                for r in 0..d {
                    let fd = (up[r] - dn[r]) / (2.0 * h);
                    assert!((fd - a[(r, c)]).abs() <= 1e-6 * (1.0 + fd.abs()), "{}", mf.name());
                }
            }
        }
    }

    #[test]
    fn tercile_closed_form_balances_bins() {
        let o: Vec<Obs> = (0..7).map(|i| obs(f64::from(u8::from(i % 2 == 0)), i as f64)).collect();
        let q = QuantileFractions::new(3);
        let th = q.closed_form(&[&o]).unwrap();
        assert_eq!(&th[3..], &[2.0, 4.0]);
        let mut counts = [0; 3];
        for x in &o {
            counts[q.bin(x.eta, &th[3..])] += 1;
        }
        assert_eq!(counts, [3, 2, 2]);
        assert!((th[0] - 2.0 / 3.0).abs() < 1e-15);
        let e = empirical(&q, &th, &o).unwrap();
        assert!(e[..3].iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn tercile_constant_outcome() {
        let o: Vec<Obs> = (0..9).map(|i| obs(1.0, (i % 4) as f64)).collect();
        let th = QuantileFractions::new(3).closed_form(&[&o]).unwrap();
        assert_eq!(&th[..3], &[1.0, 1.0, 1.0]);
    }
}
