//! Euler-discretized diffusions and their pathwise deflators.
//!
//! Path `i` draws its normals from a ChaCha8 stream keyed by `i`, so every
//! path is reproducible on its own and the ensemble does not depend on the
//! thread schedule. All cross-path means use compensated summation in path
//! order.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{solve_step, DEFAULT_TOL};
use crate::error::{OdxError, Result};
use crate::linalg::{compensated_sum, PsdSplit};
use crate::model::{binomial, Market};

/// Abort fraction above which a deflation is flagged.
pub const ABORT_FLAG_FRACTION: f64 = 0.01;
/// `|t|` bound of [`martingale_test`].
pub const T_STAT_BOUND: f64 = 4.0;

/// Drift `a(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum Drift {
    /// `a(t, x) = a`.
    Const { a: Vec<f64> },
    /// `a(t, x) = a + B x`, with `B` row-major `d × d`.
    Linear { a: Vec<f64>, b: Vec<f64> },
}

/// Diffusion factor `σ(t, x)`, `d × m` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum Vol {
    /// `σ(t, x) = σ₀`.
    Const { sigma: Vec<f64> },
    /// `σ(t, x)ᵢⱼ = σ₀ᵢⱼ + xᵢ σ₁ᵢⱼ`.
    Linear { sigma: Vec<f64>, slope: Vec<f64> },
}

fn default_stride() -> usize {
    1
}

/// A `d`-dimensional diffusion driven by `m` Brownian factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub dim: usize,
    pub factors: usize,
    pub drift: Drift,
    pub vol: Vol,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Keep every `record_stride`-th grid point (the endpoint always).
    #[serde(default = "default_stride")]
    pub record_stride: usize,
}

impl DiffusionSpec {
    /// One asset with constant drift and volatility, started at 0.
    pub fn scalar(a: f64, sigma: f64, horizon: f64, steps: usize, paths: usize, seed: u64) -> Self {
        Self {
            dim: 1,
            factors: 1,
            drift: Drift::Const { a: vec![a] },
            vol: Vol::Const { sigma: vec![sigma] },
            x0: vec![0.0],
            horizon,
            steps,
            paths,
            seed,
            record_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = (self.dim, self.factors);
        let bad = |msg: String| Err(OdxError::InvalidInput(msg));
        if d == 0 || m == 0 {
            return bad("dimension and factor count must be positive".into());
        }
        if self.steps == 0 || self.paths == 0 {
            return bad("steps and paths must be at least 1".into());
        }
        if self.record_stride == 0 {
            return bad("record_stride must be at least 1".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon {} must be positive", self.horizon));
        }
        if self.x0.len() != d {
            return bad(format!("x0 has length {}, expected {d}", self.x0.len()));
        }
        let (a_len, b_len) = match &self.drift {
            Drift::Const { a } => (a.len(), d * d),
            Drift::Linear { a, b } => (a.len(), b.len()),
        };
        if a_len != d || b_len != d * d {
            return bad("drift coefficients have the wrong length".into());
        }
        let (s0, s1) = match &self.vol {
            Vol::Const { sigma } => (sigma.len(), d * m),
            Vol::Linear { sigma, slope } => (sigma.len(), slope.len()),
        };
        if s0 != d * m || s1 != d * m {
            return bad(format!("volatility must have {} entries", d * m));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    fn is_constant(&self) -> bool {
        matches!(self.drift, Drift::Const { .. }) && matches!(self.vol, Vol::Const { .. })
    }

    pub fn drift_at(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        match &self.drift {
            Drift::Const { a } => DVector::from_column_slice(a),
            Drift::Linear { a, b } => {
                DVector::from_column_slice(a) + DMatrix::from_row_slice(self.dim, self.dim, b) * x
            }
        }
    }

    pub fn vol_at(&self, _t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.vol {
            Vol::Const { sigma } => DMatrix::from_row_slice(self.dim, self.factors, sigma),
            Vol::Linear { sigma, slope } => {
                let s0 = DMatrix::from_row_slice(self.dim, self.factors, sigma);
                let s1 = DMatrix::from_row_slice(self.dim, self.factors, slope);
                DMatrix::from_fn(self.dim, self.factors, |i, j| s0[(i, j)] + x[i] * s1[(i, j)])
            }
        }
    }

    /// Indices of the recorded grid points.
    pub fn recorded_steps(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = (0..=self.steps).step_by(self.record_stride).collect();
        if *ks.last().expect("nonempty") != self.steps {
            ks.push(self.steps);
        }
        ks
    }
}

/// Values of a process at the recorded times, one row per path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSeries {
    pub paths: usize,
    pub dim: usize,
    pub times: Vec<f64>,
    /// `values[(path · times.len() + k) · dim + i]`.
    pub values: Vec<f64>,
    /// Paths that take part in statistics.
    pub valid: Vec<bool>,
}

impl PathSeries {
    pub fn at(&self, path: usize, k: usize) -> &[f64] {
        let start = (path * self.times.len() + k) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let n = self.times.len() * self.dim;
        &self.values[path * n..(path + 1) * n]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Cross-path mean of component `i` at record `k`, over valid paths.
    pub fn mean_at(&self, k: usize, i: usize) -> f64 {
        let n = self.valid_count().max(1) as f64;
        compensated_sum((0..self.paths).filter(|&p| self.valid[p]).map(|p| self.at(p, k)[i])) / n
    }

    /// Pointwise product of a scalar series with every component of `other`.
    pub fn scale(&self, other: &PathSeries) -> Result<PathSeries> {
        if self.dim != 1 || self.paths != other.paths || self.times.len() != other.times.len() {
            return Err(OdxError::Mismatch("path series have different shapes".into()));
        }
        let mut values = Vec::with_capacity(other.values.len());
        for p in 0..self.paths {
            for k in 0..self.times.len() {
                let s = self.at(p, k)[0];
                values.extend(other.at(p, k).iter().map(|v| s * v));
            }
        }
        Ok(PathSeries {
            paths: self.paths,
            dim: other.dim,
            times: self.times.clone(),
            values,
            valid: self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn component(&self, i: usize) -> PathSeries {
        PathSeries {
            paths: self.paths,
            dim: 1,
            times: self.times.clone(),
            values: self.values.chunks(self.dim).map(|c| c[i]).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Simulated paths of `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub seed: u64,
    pub steps: usize,
    pub x: PathSeries,
}

/// One fine step: time, state before the step, Brownian part and total
/// increment.
struct Step<'a> {
    k: usize,
    t: f64,
    x: &'a DVector<f64>,
    dm: &'a DVector<f64>,
    dx: &'a DVector<f64>,
}

/// Runs the Euler scheme for one path, calling `visit` on every step.
fn walk_path<F>(spec: &DiffusionSpec, path: usize, mut visit: F) -> Result<()>
where
    F: FnMut(Step<'_>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(path as u64);
    let dt = spec.dt();
    let sq = dt.sqrt();
    let constant = spec.is_constant();
    let zero = DVector::zeros(spec.dim);
    let (a_c, s_c) = (spec.drift_at(0.0, &zero), spec.vol_at(0.0, &zero));
    let mut x = DVector::from_column_slice(&spec.x0);
    let mut xi = DVector::zeros(spec.factors);
    for k in 0..spec.steps {
        let t = k as f64 * dt;
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let dm = if constant {
            &s_c * &xi * sq
        } else {
            spec.vol_at(t, &x) * &xi * sq
        };
        let drift = if constant { a_c.clone() } else { spec.drift_at(t, &x) };
        let dx = drift * dt + &dm;
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(OdxError::NonFinite { path, step: k + 1 });
        }
        visit(Step {
            k,
            t,
            x: &x,
            dm: &dm,
            dx: &dx,
        });
        x += dx;
    }
    Ok(())
}

fn record_flags(spec: &DiffusionSpec) -> Vec<bool> {
    let mut flags = vec![false; spec.steps + 1];
    for k in spec.recorded_steps() {
        flags[k] = true;
    }
    flags
}

fn times(spec: &DiffusionSpec) -> Vec<f64> {
    spec.recorded_steps().iter().map(|&k| k as f64 * spec.dt()).collect()
}

fn collect_rows(rows: Vec<Result<Vec<f64>>>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Euler scheme `ΔX = a Δt + σ √Δt ξ`.
pub fn simulate(spec: &DiffusionSpec) -> Result<PathEnsemble> {
    spec.validate()?;
    let flags = record_flags(spec);
    let rows: Vec<Result<Vec<f64>>> = (0..spec.paths)
        .into_par_iter()
        .map(|p| {
            let mut row = spec.x0.clone();
            walk_path(spec, p, |s| {
                if flags[s.k + 1] {
                    row.extend((s.x + s.dx).iter());
                }
            })?;
            Ok(row)
        })
        .collect();
    Ok(PathEnsemble {
        seed: spec.seed,
        steps: spec.steps,
        x: PathSeries {
            paths: spec.paths,
            dim: spec.dim,
            times: times(spec),
            values: collect_rows(rows)?,
            valid: vec![true; spec.paths],
        },
    })
}

/// Martingale increments `σ √Δt ξ` summed over each recorded interval.
pub fn martingale_increments(spec: &DiffusionSpec) -> Result<PathSeries> {
    spec.validate()?;
    let flags = record_flags(spec);
    let rows: Vec<Result<Vec<f64>>> = (0..spec.paths)
        .into_par_iter()
        .map(|p| {
            let mut row = vec![0.0; spec.dim];
            let mut acc = DVector::zeros(spec.dim);
            walk_path(spec, p, |s| {
                acc += s.dm;
                if flags[s.k + 1] {
                    row.extend(acc.iter());
                    acc.fill(0.0);
                }
            })?;
            Ok(row)
        })
        .collect();
    Ok(PathSeries {
        paths: spec.paths,
        dim: spec.dim,
        times: times(spec),
        values: collect_rows(rows)?,
        valid: vec![true; spec.paths],
    })
}

/// Pathwise numéraire wealth and deflator.
#[derive(Debug, Clone, PartialEq)]
pub struct Deflation {
    pub v_hat: PathSeries,
    pub y_hat: PathSeries,
    /// Paths on which `1 + ⟨ρ, ΔX⟩ ≤ 0` occurred; they are marked invalid.
    pub aborted: usize,
    pub abort_fraction: f64,
    pub flagged: bool,
    /// Largest `|ρ|` component met along the paths.
    pub max_rho: f64,
}

/// `ρ = c⁺a` at `(t, x)`.
pub fn rho_at(spec: &DiffusionSpec, t: f64, x: &DVector<f64>) -> DVector<f64> {
    let s = spec.vol_at(t, x);
    let c = &s * s.transpose();
    solve_step(&spec.drift_at(t, x), &c, DEFAULT_TOL).rho
}

/// Re-runs the paths of `ens` and accumulates `V̂ = Π(1 + ⟨ρ, ΔX⟩)` with
/// `ρ = c⁺a` evaluated at the start of each step.
pub fn deflate_paths(ens: &PathEnsemble, spec: &DiffusionSpec) -> Result<Deflation> {
    spec.validate()?;
    if ens.seed != spec.seed || ens.x.paths != spec.paths || ens.steps != spec.steps {
        return Err(OdxError::Mismatch("ensemble was not produced by this spec".into()));
    }
    let flags = record_flags(spec);
    let constant_rho = spec.is_constant().then(|| rho_at(spec, 0.0, &DVector::zeros(spec.dim)));
    let rows: Vec<Result<(Vec<f64>, bool, f64)>> = (0..spec.paths)
        .into_par_iter()
        .map(|p| {
            let mut row = vec![1.0];
            let mut v = 1.0_f64;
            let mut alive = true;
            let mut max_rho: f64 = 0.0;
            walk_path(spec, p, |s| {
                if alive {
                    let rho = match &constant_rho {
                        Some(r) => r.clone(),
                        None => rho_at(spec, s.t, s.x),
                    };
                    max_rho = max_rho.max(rho.amax());
                    let growth = 1.0 + rho.dot(s.dx);
                    if growth <= 0.0 {
                        alive = false;
                        v = f64::NAN;
                    } else {
                        v *= growth;
                    }
                }
                if flags[s.k + 1] {
                    row.push(v);
                }
            })?;
            Ok((row, alive, max_rho))
        })
        .collect();
    let mut values = Vec::with_capacity(spec.paths * flags.len());
    let mut valid = Vec::with_capacity(spec.paths);
    let mut max_rho: f64 = 0.0;
    for r in rows {
        let (row, alive, mr) = r?;
        values.extend(row);
        valid.push(alive);
        max_rho = max_rho.max(mr);
    }
    let aborted = valid.iter().filter(|&&v| !v).count();
    let abort_fraction = aborted as f64 / spec.paths as f64;
    let v_hat = PathSeries {
        paths: spec.paths,
        dim: 1,
        times: times(spec),
        values,
        valid,
    };
    let y_hat = PathSeries {
        values: v_hat.values.iter().map(|v| 1.0 / v).collect(),
        ..v_hat.clone()
    };
    Ok(Deflation {
        v_hat,
        y_hat,
        aborted,
        abort_fraction,
        flagged: abort_fraction > ABORT_FLAG_FRACTION,
        max_rho,
    })
}

/// Mean, standard error and t-statistic of a sample, over the valid paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleStats {
    pub mean: f64,
    pub std_err: f64,
    pub t_stat: f64,
}

pub fn sample_stats(values: &[f64]) -> SampleStats {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    let var = if values.len() > 1 {
        compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0)
    } else {
        0.0
    };
    let std_err = (var / n).sqrt();
    let t_stat = if std_err > 0.0 {
        mean / std_err
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    };
    SampleStats { mean, std_err, t_stat }
}

/// Increment statistics over one coarse time bucket.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub t_start: f64,
    pub t_end: f64,
    pub component: usize,
    #[serde(flatten)]
    pub stats: SampleStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub pass: bool,
    pub max_abs_t: f64,
    pub buckets: Vec<Bucket>,
}

/// Splits the recorded grid into `buckets` intervals and tests every
/// component's mean increment over each for zero. Passes iff all
/// `|t| ≤ 4`.
pub fn martingale_test(z: &PathSeries, buckets: usize) -> MartingaleReport {
    let last = z.times.len() - 1;
    let nb = buckets.clamp(1, last.max(1));
    let edges: Vec<usize> = (0..=nb).map(|b| b * last / nb).collect();
    let live: Vec<usize> = (0..z.paths).filter(|&p| z.valid[p]).collect();
    let mut out = Vec::new();
    for w in edges.windows(2) {
        let (k0, k1) = (w[0], w[1]);
        if k0 == k1 {
            continue;
        }
        for i in 0..z.dim {
            let incs: Vec<f64> = live.iter().map(|&p| z.at(p, k1)[i] - z.at(p, k0)[i]).collect();
            out.push(Bucket {
                t_start: z.times[k0],
                t_end: z.times[k1],
                component: i,
                stats: sample_stats(&incs),
            });
        }
    }
    let max_abs_t = out.iter().map(|b| b.stats.t_stat.abs()).fold(0.0, f64::max);
    MartingaleReport {
        pass: max_abs_t <= T_STAT_BOUND,
        max_abs_t,
        buckets: out,
    }
}

/// Cross-sectional projection of `ΔU` onto the regressors, step by step.
#[derive(Debug, Clone, PartialEq)]
pub struct KwRegression {
    /// Per recorded step, the slope vector (bin-count weighted over bins).
    pub theta: Vec<Vec<f64>>,
    /// Per recorded step, standard errors of the slopes.
    pub theta_se: Vec<Vec<f64>>,
    /// Per recorded step, `ΔB = −mean residual`.
    pub db: Vec<f64>,
    /// Running sum of `ΔB`.
    pub b: Vec<f64>,
    /// Root-mean-square residual after drift removal, over all steps.
    pub n_norm: f64,
    /// Steps at which the regressor covariance was rank deficient.
    pub rank_deficient_steps: Vec<usize>,
}

struct BinFit {
    theta: DVector<f64>,
    se: DVector<f64>,
    resid: Vec<f64>,
    deficient: bool,
}

fn fit_bin(y: &[f64], xs: &[&[f64]], d: usize) -> BinFit {
    let n = y.len();
    let nf = n as f64;
    let ybar = compensated_sum(y.iter().copied()) / nf;
    let xbar: Vec<f64> = (0..d).map(|i| compensated_sum(xs.iter().map(|x| x[i])) / nf).collect();
    let mut sxx = DMatrix::zeros(d, d);
    let mut sxy = DVector::zeros(d);
    for (yi, x) in y.iter().zip(xs) {
        let cx = DVector::from_fn(d, |i, _| x[i] - xbar[i]);
        sxx += &cx * cx.transpose();
        sxy += &cx * (yi - ybar);
    }
    let split = PsdSplit::new(&sxx, DEFAULT_TOL);
    let deficient = split.rank() < d;
    let theta = split.solve(&sxy);
    let resid: Vec<f64> = y
        .iter()
        .zip(xs)
        .map(|(yi, x)| yi - (0..d).map(|i| theta[i] * x[i]).sum::<f64>())
        .collect();
    let rbar = compensated_sum(resid.iter().copied()) / nf;
    let dof = (n as f64 - d as f64 - 1.0).max(1.0);
    let s2 = compensated_sum(resid.iter().map(|r| (r - rbar) * (r - rbar))) / dof;
    let pinv = split.pinv();
    let se = DVector::from_fn(d, |i, _| (s2 * pinv[(i, i)]).max(0.0).sqrt());
    BinFit {
        theta,
        se,
        resid,
        deficient,
    }
}

/// Regresses each recorded increment of the scalar `u` on the matching
/// increment of `regressors` across paths. With `bins > 1` paths are split
/// into equal-count bins by the first component of `state` at the start of
/// the step and fitted separately.
pub fn kw_regress(
    u: &PathSeries,
    regressors: &PathSeries,
    state: Option<&PathSeries>,
    bins: usize,
) -> Result<KwRegression> {
    if u.dim != 1 || u.paths != regressors.paths || u.times.len() != regressors.times.len() {
        return Err(OdxError::Mismatch("regression inputs have different shapes".into()));
    }
    let d = regressors.dim;
    let live: Vec<usize> = (0..u.paths).filter(|&p| u.valid[p] && regressors.valid[p]).collect();
    if live.len() < d + 2 {
        return Err(OdxError::InvalidInput("too few valid paths for the regression".into()));
    }
    let bins = bins.max(1).min(live.len() / (d + 2)).max(1);
    let steps = u.times.len() - 1;
    let mut out = KwRegression {
        theta: Vec::with_capacity(steps),
        theta_se: Vec::with_capacity(steps),
        db: Vec::with_capacity(steps),
        b: Vec::with_capacity(steps),
        n_norm: 0.0,
        rank_deficient_steps: Vec::new(),
    };
    let mut sq_sum = Vec::with_capacity(steps);
    let mut running = 0.0;
    for k in 0..steps {
        let mut order = live.clone();
        if let (Some(s), true) = (state, bins > 1) {
            order.sort_by(|&a, &b| s.at(a, k)[0].total_cmp(&s.at(b, k)[0]).then(a.cmp(&b)));
        }
        let mut theta = DVector::zeros(d);
        let mut se = DVector::zeros(d);
        let mut resid = Vec::with_capacity(order.len());
        let mut deficient = false;
        for b in 0..bins {
            let lo = b * order.len() / bins;
            let hi = (b + 1) * order.len() / bins;
            let members = &order[lo..hi];
            let y: Vec<f64> = members.iter().map(|&p| u.at(p, k + 1)[0] - u.at(p, k)[0]).collect();
            let x: Vec<&[f64]> = members.iter().map(|&p| regressors.at(p, k + 1)).collect();
            let fit = fit_bin(&y, &x, d);
            let w = members.len() as f64 / order.len() as f64;
            theta += fit.theta * w;
            se += fit.se * w;
            resid.extend(fit.resid);
            deficient |= fit.deficient;
        }
        let n = resid.len() as f64;
        let rbar = compensated_sum(resid.iter().copied()) / n;
        let db = -rbar;
        running += db;
        sq_sum.push(compensated_sum(resid.iter().map(|r| (r - rbar) * (r - rbar))) / n);
        if deficient {
            out.rank_deficient_steps.push(k);
        }
        out.theta.push(theta.iter().copied().collect());
        out.theta_se.push(se.iter().copied().collect());
        out.db.push(db);
        out.b.push(running);
    }
    out.n_norm = (compensated_sum(sq_sum.iter().copied()) / steps.max(1) as f64).sqrt();
    Ok(out)
}

/// Non-recombining binomial market over `periods` steps of size
/// `dt = horizon/steps` with `ΔX = aΔt ± σ√Δt` and `p = ½`, matching the
/// first two moments of the Euler step.
pub fn matched_binomial_market(a: f64, sigma: f64, horizon: f64, steps: usize, periods: usize) -> Market {
    let dt = horizon / steps as f64;
    let spread = sigma * dt.sqrt();
    binomial(periods, 0.5, a * dt + spread, a * dt - spread)
}
