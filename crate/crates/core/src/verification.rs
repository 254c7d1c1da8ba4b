//! Exact low-dimensional checks of the Gaussian approximation to noised
//! mixtures and of cumulant scaling under the forward process.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{Schedule, ScheduleError, ScheduleKind};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid mixture: {0}")]
    Mixture(String),
    #[error("quadrature did not reach tolerance {tol:e} (estimate {estimate:e})")]
    Quadrature { tol: f64, estimate: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

/// One Gaussian component; `cov` is row-major `dim x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub id: String,
    pub dim: usize,
    pub components: Vec<Component>,
}

impl MixtureSpec {
    pub fn new(id: impl Into<String>, dim: usize, components: Vec<Component>) -> Result<Self> {
        let bad = |m: String| Err(VerifyError::Mixture(m));
        if !(dim == 1 || dim == 2) {
            return bad(format!("dimension must be 1 or 2, got {dim}"));
        }
        if components.is_empty() {
            return bad("no components".into());
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("weights sum to {total}"));
        }
        for c in &components {
            if !(c.weight > 0.0) || c.mean.len() != dim || c.cov.len() != dim * dim {
                return bad("component weight or shape".into());
            }
            let ok = if dim == 1 {
                c.cov[0] > 0.0
            } else {
                c.cov[0] > 0.0
                    && (c.cov[1] - c.cov[2]).abs() < 1e-12
                    && c.cov[0] * c.cov[3] - c.cov[1] * c.cov[2] > 0.0
            };
            if !ok {
                return bad("covariance must be symmetric positive definite".into());
            }
        }
        Ok(Self {
            id: id.into(),
            dim,
            components,
        })
    }

    /// 1-D mixture from `(weight, mean, variance)` triples.
    pub fn one_d(id: impl Into<String>, parts: &[(f64, f64, f64)]) -> Result<Self> {
        let comps = parts
            .iter()
            .map(|&(w, m, v)| Component {
                weight: w,
                mean: vec![m],
                cov: vec![v],
            })
            .collect();
        Self::new(id, 1, comps)
    }

    /// Two unit-variance components with unequal weights, so every
    /// cumulant above the second is nonzero.
    pub fn asymmetric() -> Self {
        Self::one_d("asymmetric", &[(0.7, -1.2, 1.0), (0.3, 2.8, 1.0)]).expect("valid mixture")
    }

    /// Mirror image pair. Odd cumulants vanish.
    pub fn symmetric() -> Self {
        Self::one_d("symmetric", &[(0.5, -2.0, 1.0), (0.5, 2.0, 1.0)]).expect("valid mixture")
    }

    pub fn gaussian() -> Self {
        Self::one_d("gaussian", &[(1.0, 0.4, 0.8)]).expect("valid mixture")
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.components.iter().map(|c| c.weight * c.mean[i]).sum())
            .collect()
    }

    /// Law of total covariance: `sum_k pi_k (S_k + m_k m_k^T) - mu mu^T`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mu = self.mean();
        let mut out = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] += c.weight * (c.cov[i * d + j] + c.mean[i] * c.mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] -= mu[i] * mu[j];
            }
        }
        out
    }

    fn noised(&self, a: f64, b: f64) -> Vec<Component> {
        let d = self.dim;
        self.components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.iter().map(|m| a * m).collect(),
                cov: (0..d * d)
                    .map(|i| a * a * c.cov[i] + if i % (d + 1) == 0 { b * b } else { 0.0 })
                    .collect(),
            })
            .collect()
    }
}

/// Pointwise-evaluable Gaussian mixture density.
#[derive(Debug, Clone)]
pub struct Density {
    dim: usize,
    // weight, mean, inverse covariance, log normalizer
    terms: Vec<(f64, Vec<f64>, Vec<f64>, f64)>,
    components: Vec<Component>,
}

impl Density {
    fn new(dim: usize, components: Vec<Component>) -> Self {
        let terms = components
            .iter()
            .map(|c| {
                let (inv, det) = if dim == 1 {
                    (vec![1.0 / c.cov[0]], c.cov[0])
                } else {
                    let det = c.cov[0] * c.cov[3] - c.cov[1] * c.cov[2];
                    (
                        vec![c.cov[3] / det, -c.cov[1] / det, -c.cov[2] / det, c.cov[0] / det],
                        det,
                    )
                };
                let log_norm = -0.5 * (dim as f64 * (2.0 * PI).ln() + det.ln());
                (c.weight, c.mean.clone(), inv, log_norm)
            })
            .collect();
        Self {
            dim,
            terms,
            components,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        self.terms
            .iter()
            .map(|(w, m, inv, ln)| {
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += (x[i] - m[i]) * inv[i * d + j] * (x[j] - m[j]);
                    }
                }
                w * (ln - 0.5 * q).exp()
            })
            .sum()
    }

    /// Per-axis window covering every component to `k` standard deviations.
    fn window(&self, axis: usize, k: f64) -> (f64, f64) {
        let d = self.dim;
        self.components.iter().fold((f64::MAX, f64::MIN), |(lo, hi), c| {
            let sd = c.cov[axis * d + axis].sqrt();
            (lo.min(c.mean[axis] - k * sd), hi.max(c.mean[axis] + k * sd))
        })
    }
}

/// Forward-process coefficients at `t`.
fn ab(schedule: &Schedule, t: f64) -> Result<(f64, f64)> {
    Ok(schedule.coefficients(t)?)
}

/// Exact density of `a z0 + b eps` when `z0` follows the mixture.
pub fn marginal_at(mix: &MixtureSpec, a: f64, b: f64) -> Density {
    Density::new(mix.dim, mix.noised(a, b))
}

/// Moment-matched Gaussian `N(a mu, a^2 Sigma + b^2 I)`.
pub fn approx_at(mix: &MixtureSpec, a: f64, b: f64) -> Density {
    let d = mix.dim;
    let mu = mix.mean();
    let cov = mix.covariance();
    let comp = Component {
        weight: 1.0,
        mean: mu.iter().map(|m| a * m).collect(),
        cov: (0..d * d)
            .map(|i| a * a * cov[i] + if i % (d + 1) == 0 { b * b } else { 0.0 })
            .collect(),
    };
    Density::new(d, vec![comp])
}

pub fn exact_marginal(mix: &MixtureSpec, schedule: &Schedule, t: f64) -> Result<Density> {
    let (a, b) = ab(schedule, t)?;
    Ok(marginal_at(mix, a, b))
}

pub fn gaussian_approx(mix: &MixtureSpec, schedule: &Schedule, t: f64) -> Result<Density> {
    let (a, b) = ab(schedule, t)?;
    Ok(approx_at(mix, a, b))
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let s = f(c - h * XGK[i]) + f(c + h * XGK[i]);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

struct Piece {
    lo: f64,
    hi: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Piece {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Piece {
    fn cmp(&self, o: &Self) -> Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// Globally adaptive 7/15-point Gauss-Kronrod quadrature to an absolute
/// tolerance.
pub fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    const MAX_PIECES: usize = 20_000;
    let (value, err) = gk15(&f, lo, hi);
    let mut heap = BinaryHeap::from([Piece { lo, hi, value, err }]);
    let (mut total, mut total_err) = (value, err);
    while total_err > tol {
        if heap.len() >= MAX_PIECES {
            return Err(VerifyError::Quadrature {
                tol,
                estimate: total_err,
            });
        }
        let p = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (p.lo + p.hi);
        let (v1, e1) = gk15(&f, p.lo, mid);
        let (v2, e2) = gk15(&f, mid, p.hi);
        total += v1 + v2 - p.value;
        total_err += e1 + e2 - p.err;
        heap.push(Piece { lo: p.lo, hi: mid, value: v1, err: e1 });
        heap.push(Piece { lo: mid, hi: p.hi, value: v2, err: e2 });
        // the running sums drift; resum once the estimate looks converged
        if total_err <= tol {
            total = heap.iter().map(|p| p.value).sum();
            total_err = heap.iter().map(|p| p.err).sum();
        }
    }
    Ok(total)
}

pub const TV_TOL: f64 = 1e-10;
const WINDOW_SD: f64 = 10.0;
const GRID_2D: usize = 256;

/// Total variation `(1/2) int |p - q|`: adaptive quadrature in 1-D, a
/// midpoint grid in 2-D.
pub fn total_variation(p: &Density, q: &Density) -> Result<f64> {
    if p.dim != q.dim {
        return Err(VerifyError::Unsupported("densities of different dimension".into()));
    }
    let span = |axis| {
        let (a, b) = p.window(axis, WINDOW_SD);
        let (c, d) = q.window(axis, WINDOW_SD);
        (a.min(c), b.max(d))
    };
    if p.dim == 1 {
        let (lo, hi) = span(0);
        let v = integrate(|x| (p.pdf(&[x]) - q.pdf(&[x])).abs(), lo, hi, 2.0 * TV_TOL)?;
        return Ok(0.5 * v);
    }
    let ((x0, x1), (y0, y1)) = (span(0), span(1));
    let (hx, hy) = ((x1 - x0) / GRID_2D as f64, (y1 - y0) / GRID_2D as f64);
    let mut s = 0.0;
    for i in 0..GRID_2D {
        for j in 0..GRID_2D {
            let x = [x0 + (i as f64 + 0.5) * hx, y0 + (j as f64 + 0.5) * hy];
            s += (p.pdf(&x) - q.pdf(&x)).abs();
        }
    }
    Ok(0.5 * s * hx * hy)
}

/// `KL(p || q)` in 1-D.
pub fn kl_divergence(p: &Density, q: &Density) -> Result<f64> {
    if p.dim != 1 || q.dim != 1 {
        return Err(VerifyError::Unsupported("KL is computed in 1-D only".into()));
    }
    let (a, b) = p.window(0, WINDOW_SD);
    integrate(
        |x| {
            let pp = p.pdf(&[x]);
            if pp <= 0.0 {
                0.0
            } else {
                pp * (pp.ln() - q.pdf(&[x]).ln())
            }
        },
        a,
        b,
        TV_TOL,
    )
}

pub fn approx_error_ab(mix: &MixtureSpec, a: f64, b: f64) -> Result<f64> {
    total_variation(&marginal_at(mix, a, b), &approx_at(mix, a, b))
}

/// Total variation between the exact noised marginal and its Gaussian
/// approximation at time `t`.
pub fn approx_error(mix: &MixtureSpec, schedule: &Schedule, t: f64) -> Result<f64> {
    let (a, b) = ab(schedule, t)?;
    approx_error_ab(mix, a, b)
}

/// Time whose signal coefficient is closest to `a`, with that coefficient.
/// Exact on flow schedules; nearest integer step on VP schedules.
pub fn time_for_signal(schedule: &Schedule, a: f64) -> Result<(f64, f64)> {
    match schedule.kind() {
        ScheduleKind::LinearFlow => {
            let t = schedule.t_max() * (1.0 - a);
            Ok((t, schedule.a(t)?))
        }
        ScheduleKind::VpDiffusion => {
            let mut best = (0.0, f64::MAX, 0.0);
            for t in 0..=schedule.t_max() as usize {
                let at = schedule.a(t as f64)?;
                if (at - a).abs() < best.1 {
                    best = (t as f64, (at - a).abs(), at);
                }
            }
            Ok((best.0, best.2))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecayFit {
    /// Every error vanished: the approximation is exact.
    Exact,
    Fit {
        slope: f64,
        intercept: f64,
        /// Root mean square residual of the log-log fit.
        residual: f64,
        /// Slope against `log(a / b)` instead of `log a`. The two agree only
        /// while `b` stays near 1.
        ratio_slope: f64,
        a_values: Vec<f64>,
        b_values: Vec<f64>,
        errors: Vec<f64>,
    },
}

const EXACT_FLOOR: f64 = 1e-13;

/// Least-squares slope of `log TV` against `log a`.
pub fn fit_decay_slope(mix: &MixtureSpec, schedule: &Schedule, a_values: &[f64]) -> Result<DecayFit> {
    if a_values.len() < 2 {
        return Err(VerifyError::Unsupported("need at least two signal levels".into()));
    }
    let mut a_used = Vec::with_capacity(a_values.len());
    let mut b_used = Vec::with_capacity(a_values.len());
    let mut errors = Vec::with_capacity(a_values.len());
    for &a in a_values {
        let (t, at) = time_for_signal(schedule, a)?;
        a_used.push(at);
        b_used.push(schedule.b(t)?);
        errors.push(approx_error(mix, schedule, t)?);
    }
    if errors.iter().all(|&e| e <= EXACT_FLOOR) {
        return Ok(DecayFit::Exact);
    }
    if errors.iter().any(|&e| e <= 0.0) {
        return Err(VerifyError::Unsupported("zero error at some but not all levels".into()));
    }
    let xs: Vec<f64> = a_used.iter().map(|a| a.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (slope, intercept, residual) = least_squares(&xs, &ys);
    let rs: Vec<f64> = a_used.iter().zip(&b_used).map(|(a, b)| (a / b).ln()).collect();
    let (ratio_slope, _, _) = least_squares(&rs, &ys);
    Ok(DecayFit::Fit {
        slope,
        intercept,
        residual,
        ratio_slope,
        a_values: a_used,
        b_values: b_used,
        errors,
    })
}

/// Order at which the Gaussian approximation error should decay in `a`:
/// none for a Gaussian, 3 with a skewed 1-D mixture, 4 when the third
/// cumulant vanishes.
pub fn expected_decay_order(mix: &MixtureSpec) -> Option<usize> {
    let first = &mix.components[0];
    if mix
        .components
        .iter()
        .all(|c| c.mean == first.mean && c.cov == first.cov)
    {
        return None;
    }
    let scale = mix.covariance()[0].powf(1.5).max(1e-300);
    if mix.dim == 1 && mixture_cumulant(&mix.components, 3).abs() <= 1e-12 * scale {
        Some(4)
    } else {
        Some(3)
    }
}

/// Line fit `y = slope x + intercept` with its RMS residual.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    (slope, intercept, residual)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum CumulantRatio {
    Ratio(f64),
    /// The clean cumulant vanishes, so the ratio has no meaning.
    Undefined,
}

/// Third or fourth cumulant of a 1-D Gaussian mixture from centered
/// component moments. With `d_k` the centered component means and `v_k` the
/// component variances:
/// `k3 = E d^3 + 3 E[d (v - v_bar)]`,
/// `k4 = E d^4 - 3 (E d^2)^2 + 6 E[(d^2 - E d^2)(v - v_bar)] + 3 E[(v - v_bar)^2]`.
/// Centering `v` keeps a large common variance from cancelling catastrophically.
fn mixture_cumulant(components: &[Component], k: usize) -> f64 {
    let e = |f: &dyn Fn(&Component) -> f64| components.iter().map(|c| c.weight * f(c)).sum::<f64>();
    let m = e(&|c| c.mean[0]);
    let v_bar = e(&|c| c.cov[0]);
    let d2 = e(&|c| (c.mean[0] - m).powi(2));
    match k {
        3 => e(&|c| {
            let d = c.mean[0] - m;
            d.powi(3) + 3.0 * d * (c.cov[0] - v_bar)
        }),
        _ => {
            e(&|c| {
                let d = c.mean[0] - m;
                let dv = c.cov[0] - v_bar;
                d.powi(4) + 6.0 * (d * d - d2) * dv + 3.0 * dv * dv
            }) - 3.0 * d2 * d2
        }
    }
}

/// Third or fourth cumulant from raw sample moments.
fn cumulant_from_raw(m: [f64; 4], k: usize) -> f64 {
    let [m1, m2, m3, m4] = m;
    match k {
        3 => m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3),
        _ => m4 - 4.0 * m3 * m1 - 3.0 * m2 * m2 + 12.0 * m2 * m1 * m1 - 6.0 * m1.powi(4),
    }
}

fn check_k(mix: &MixtureSpec, k: usize) -> Result<()> {
    if mix.dim != 1 {
        return Err(VerifyError::Unsupported("cumulant check is 1-D".into()));
    }
    if !(k == 3 || k == 4) {
        return Err(VerifyError::Unsupported(format!("cumulant order {k}")));
    }
    Ok(())
}

fn ratio(noised: f64, clean: f64, a: f64, k: usize, scale: f64) -> CumulantRatio {
    if a == 0.0 || clean.abs() <= 1e-12 * scale.max(1e-300) {
        CumulantRatio::Undefined
    } else {
        CumulantRatio::Ratio(noised / (a.powi(k as i32) * clean))
    }
}

/// Ratio `kappa_k(z_t) / (a_t^k kappa_k(z_0))` from closed-form moments.
pub fn cumulant_scaling_check(
    mix: &MixtureSpec,
    schedule: &Schedule,
    t: f64,
    k: usize,
) -> Result<CumulantRatio> {
    check_k(mix, k)?;
    let (a, b) = ab(schedule, t)?;
    let clean = mixture_cumulant(&mix.components, k);
    let noised = mixture_cumulant(&mix.noised(a, b), k);
    let var = mix.covariance()[0];
    Ok(ratio(noised, clean, a, k, var.powf(k as f64 / 2.0)))
}

/// Same ratio with the noised cumulant estimated from `n` samples.
pub fn monte_carlo_cumulant_ratio<R: Rng + ?Sized>(
    mix: &MixtureSpec,
    schedule: &Schedule,
    t: f64,
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<CumulantRatio> {
    check_k(mix, k)?;
    let (a, b) = ab(schedule, t)?;
    // cumulants are shift invariant; centering keeps the raw moments small
    let shift = a * mix.mean()[0];
    let mut m = [0.0; 4];
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = &mix.components[mix.components.len() - 1];
        for c in &mix.components {
            acc += c.weight;
            if u < acc {
                comp = c;
                break;
            }
        }
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        let z = a * (comp.mean[0] + comp.cov[0].sqrt() * e0) + b * e1 - shift;
        let mut p = 1.0;
        for mi in m.iter_mut() {
            p *= z;
            *mi += p;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    let clean = mixture_cumulant(&mix.components, k);
    let var = mix.covariance()[0];
    Ok(ratio(cumulant_from_raw(m, k), clean, a, k, var.powf(k as f64 / 2.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::GridSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn asym() -> MixtureSpec {
        MixtureSpec::asymmetric()
    }

    fn sym() -> MixtureSpec {
        MixtureSpec::symmetric()
    }

    fn gauss() -> MixtureSpec {
        MixtureSpec::gaussian()
    }

    #[test]
    fn quadrature_of_known_integrals() {
        let v = integrate(|x: f64| (-x * x).exp(), -10.0, 10.0, 1e-13).unwrap();
        assert!((v - PI.sqrt()).abs() < 1e-12);
        let v = integrate(|x: f64| x.abs(), -1.0, 2.0, 1e-12).unwrap();
        assert!((v - 2.5).abs() < 1e-11);
    }

    #[test]
    fn moments_by_hand() {
        let m = sym();
        assert_eq!(m.mean(), vec![0.0]);
        assert!((m.covariance()[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn single_component_marginal_is_the_closed_form() {
        let s = Schedule::vp_default();
        let t = 500.0;
        let (a, b) = s.coefficients(t).unwrap();
        let p = exact_marginal(&gauss(), &s, t).unwrap();
        let (m, v) = (a * 0.4, a * a * 0.8 + b * b);
        for x in [-2.0, 0.0, 0.3, 1.7] {
            let want = (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
            assert!((p.pdf(&[x]) - want).abs() < 1e-14);
        }
        let q = gaussian_approx(&gauss(), &s, t).unwrap();
        assert!(total_variation(&p, &q).unwrap() < 1e-12);
    }

    #[test]
    fn clean_endpoint_is_the_mixture() {
        let s = Schedule::flow_default();
        let p = exact_marginal(&asym(), &s, 0.0).unwrap();
        let direct = |x: f64| {
            asym()
                .components
                .iter()
                .map(|c| {
                    let v = c.cov[0];
                    c.weight * (-(x - c.mean[0]).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
                })
                .sum::<f64>()
        };
        for x in [-1.0, 0.2, 2.5] {
            assert!((p.pdf(&[x]) - direct(x)).abs() < 1e-14);
        }
    }

    #[test]
    fn marginal_integrates_with_matching_moments() {
        let s = Schedule::flow_default();
        let t = 600.0;
        let (a, b) = s.coefficients(t).unwrap();
        let p = exact_marginal(&asym(), &s, t).unwrap();
        let mass = integrate(|x| p.pdf(&[x]), -20.0, 20.0, 1e-12).unwrap();
        assert!((mass - 1.0).abs() < 1e-8);
        let mean = integrate(|x| x * p.pdf(&[x]), -20.0, 20.0, 1e-12).unwrap();
        let mu = a * asym().mean()[0];
        assert!((mean - mu).abs() < 1e-10);
        let var = integrate(|x| (x - mu).powi(2) * p.pdf(&[x]), -20.0, 20.0, 1e-12).unwrap();
        assert!((var - (a * a * asym().covariance()[0] + b * b)).abs() < 1e-10);
    }

    #[test]
    fn error_vanishes_at_pure_noise_and_decreases_with_signal() {
        let s = Schedule::flow_default();
        assert!(approx_error(&asym(), &s, 1000.0).unwrap() < 1e-10);
        let errs: Vec<f64> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&a| approx_error_ab(&asym(), a, 1.0 - a).unwrap())
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn decay_slopes() {
        let s = Schedule::flow_default();
        let levels = [0.2, 0.1, 0.05, 0.025];
        // On a flow schedule b = 1 - a, so a leading term c (a/b)^n shows up
        // against log a with slope n times this factor (about 1.09).
        let lx: Vec<f64> = levels.iter().map(|a: &f64| a.ln()).collect();
        let ly: Vec<f64> = levels.iter().map(|a| (a / (1.0 - a)).ln()).collect();
        let stretch = least_squares(&lx, &ly).0;
        for (mix, order) in [(asym(), 3.0), (sym(), 4.0)] {
            match fit_decay_slope(&mix, &s, &levels).unwrap() {
                DecayFit::Fit {
                    slope, ratio_slope, ..
                } => {
                    assert!((ratio_slope - order).abs() < 0.3, "{ratio_slope}");
                    assert!((slope - order * stretch).abs() < 0.15, "{slope}");
                }
                DecayFit::Exact => panic!("{} is not Gaussian", mix.id),
            }
        }
        for (mix, lo, hi) in [(asym(), 2.7, 3.3), (sym(), 3.7, 4.3)] {
            match fit_decay_slope(&mix, &s, &levels).unwrap() {
                DecayFit::Fit { slope, .. } => assert!((lo..=hi).contains(&slope), "{slope}"),
                DecayFit::Exact => unreachable!(),
            }
        }
        assert_eq!(fit_decay_slope(&gauss(), &s, &levels).unwrap(), DecayFit::Exact);
        assert_eq!(expected_decay_order(&asym()), Some(3));
        assert_eq!(expected_decay_order(&sym()), Some(4));
        assert_eq!(expected_decay_order(&gauss()), None);
    }

    // central moments straight from the component parameters
    fn central_cumulant(mix: &MixtureSpec, a: f64, b: f64, k: usize) -> f64 {
        let comps = mix.noised(a, b);
        let m: f64 = comps.iter().map(|c| c.weight * c.mean[0]).sum();
        let c2: f64 = comps
            .iter()
            .map(|c| c.weight * ((c.mean[0] - m).powi(2) + c.cov[0]))
            .sum();
        let c3: f64 = comps
            .iter()
            .map(|c| {
                let d = c.mean[0] - m;
                c.weight * (d.powi(3) + 3.0 * d * c.cov[0])
            })
            .sum();
        let c4: f64 = comps
            .iter()
            .map(|c| {
                let d = c.mean[0] - m;
                let v = c.cov[0];
                c.weight * (d.powi(4) + 6.0 * d * d * v + 3.0 * v * v)
            })
            .sum();
        if k == 3 {
            c3
        } else {
            c4 - 3.0 * c2 * c2
        }
    }

    #[test]
    fn cumulant_ratios_are_one() {
        for s in [Schedule::vp_default(), Schedule::flow_default()] {
            for &t in s.grid() {
                let (a, b) = s.coefficients(t).unwrap();
                if a == 0.0 {
                    assert_eq!(
                        cumulant_scaling_check(&asym(), &s, t, 3).unwrap(),
                        CumulantRatio::Undefined
                    );
                    continue;
                }
                for k in [3, 4] {
                    let CumulantRatio::Ratio(r) = cumulant_scaling_check(&asym(), &s, t, k).unwrap()
                    else {
                        panic!("asymmetric mixture has nonzero cumulants")
                    };
                    assert!((r - 1.0).abs() < 1e-8, "k={k} t={t} r={r}");
                    if a > 0.3 {
                        // the naive oracle cancels badly once noise dominates
                        let oracle = central_cumulant(&asym(), a, b, k)
                            / (a.powi(k as i32) * central_cumulant(&asym(), 1.0, 0.0, k));
                        assert!((oracle - 1.0).abs() < 1e-8);
                    }
                }
            }
        }
        let s = Schedule::flow_default();
        assert_eq!(
            cumulant_scaling_check(&gauss(), &s, 300.0, 3).unwrap(),
            CumulantRatio::Undefined
        );
        assert_eq!(
            cumulant_scaling_check(&sym(), &s, 300.0, 3).unwrap(),
            CumulantRatio::Undefined
        );
    }

    #[test]
    fn monte_carlo_agrees_roughly() {
        let s = Schedule::flow(1000.0, GridSpec::Uniform(10)).unwrap();
        let mix = MixtureSpec::one_d("skew", &[(0.8, 0.0, 0.25), (0.2, 3.0, 0.25)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let CumulantRatio::Ratio(r) =
            monte_carlo_cumulant_ratio(&mix, &s, 200.0, 3, 200_000, &mut rng).unwrap()
        else {
            panic!()
        };
        assert!((r - 1.0).abs() < 0.1, "{r}");
    }

    #[test]
    fn two_d_grid_path() {
        let comps = vec![
            Component {
                weight: 0.6,
                mean: vec![-1.0, 0.5],
                cov: vec![0.3, 0.1, 0.1, 0.4],
            },
            Component {
                weight: 0.4,
                mean: vec![1.2, -0.4],
                cov: vec![0.5, 0.0, 0.0, 0.2],
            },
        ];
        let mix = MixtureSpec::new("2d", 2, comps).unwrap();
        let big = approx_error_ab(&mix, 0.2, 0.8).unwrap();
        let small = approx_error_ab(&mix, 0.1, 0.9).unwrap();
        assert!(small < big && small > 0.0);
        let single = MixtureSpec::new(
            "one",
            2,
            vec![Component {
                weight: 1.0,
                mean: vec![0.3, -0.2],
                cov: vec![1.0, 0.2, 0.2, 0.7],
            }],
        )
        .unwrap();
        assert!(approx_error_ab(&single, 0.6, 0.4).unwrap() < 1e-12);
    }

    #[test]
    fn invalid_mixtures() {
        assert!(MixtureSpec::one_d("x", &[(0.5, 0.0, 1.0)]).is_err());
        assert!(MixtureSpec::one_d("x", &[(1.0, 0.0, 0.0)]).is_err());
        assert!(MixtureSpec::new("x", 3, vec![]).is_err());
    }
}
