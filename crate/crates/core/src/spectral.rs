//! Matrix machinery of the strip walk.
//!
//! `zeta_n(i, j)` is the probability that the walk started at `(n, i)`
//! first enters layer `n + 1` at rung `j`. It is the unique stochastic
//! solution of `zeta_n = (I - Q_n zeta_{n-1} - R_n)^{-1} P_n` and is
//! obtained as the limit of the same recursion started far to the left.
//! From it we get `U_n = (I - Q_n zeta_{n-1} - R_n)^{-1}` and
//! `A_n = U_n Q_n`; the growth of `A_n ... A_0` decides transience and the
//! moment curve `r(alpha)` decides the scaling regime.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Environment, EnvironmentSpec, MatrixTriple, Window};
use crate::error::{Error, Result};
use crate::linalg::{
    max_abs_diff, max_row_sum, min_entry, mollified_identity, perron_root, row_sums, uniform_row, uniform_stochastic,
    Mat, RowVec,
};
use crate::rng::{self, tag};
use crate::stats::{log_mean_exp, mean_and_stderr, quantile_sorted};

/// Anything that can hand out layer triples by index.
pub trait LayerSource: Sync {
    fn width(&self) -> usize;
    fn layer(&self, n: i64) -> Arc<MatrixTriple>;
}

impl LayerSource for EnvironmentSpec {
    fn width(&self) -> usize {
        EnvironmentSpec::width(self)
    }

    fn layer(&self, n: i64) -> Arc<MatrixTriple> {
        self.draw_layer(n).triple
    }
}

impl LayerSource for Environment {
    fn width(&self) -> usize {
        Environment::width(self)
    }

    fn layer(&self, n: i64) -> Arc<MatrixTriple> {
        Arc::clone(&self.draw(n).triple)
    }
}

/// `zeta_n`, `A_n` and `U_n` of one layer given `zeta_{n-1}`.
#[derive(Debug, Clone)]
pub struct LayerSolution {
    pub zeta: Mat,
    pub a: Mat,
    pub u: Mat,
}

/// Solves one step of the recursion. For `m = 1` the scalar closed forms
/// `zeta = 1`, `A = q/p`, `U = 1/p` are used.
pub fn solve_layer(t: &MatrixTriple, zeta_prev: &Mat, layer: i64) -> Result<LayerSolution> {
    let m = t.width();
    if m == 1 {
        let p = t.p()[(0, 0)];
        if !(p > 0.0) {
            return Err(Error::Singular { layer });
        }
        return Ok(LayerSolution {
            zeta: Mat::from_element(1, 1, 1.0),
            a: Mat::from_element(1, 1, t.q()[(0, 0)] / p),
            u: Mat::from_element(1, 1, 1.0 / p),
        });
    }
    let lhs = Mat::identity(m, m) - t.q() * zeta_prev - t.r();
    let lu = lhs.lu();
    let solved = (lu.solve(t.p()), lu.solve(t.q()), lu.solve(&Mat::identity(m, m)));
    match solved {
        (Some(zeta), Some(a), Some(u))
            if u.iter().chain(zeta.iter()).all(|x| x.is_finite()) && min_entry(&u) >= -1e-12 =>
        {
            Ok(LayerSolution { zeta, a, u })
        }
        _ => Err(Error::Singular { layer }),
    }
}

fn next_zeta(t: &MatrixTriple, prev: &Mat, layer: i64) -> Result<Mat> {
    if t.width() == 1 {
        return Ok(Mat::from_element(1, 1, 1.0));
    }
    let m = t.width();
    let lhs = Mat::identity(m, m) - t.q() * prev - t.r();
    lhs.lu()
        .solve(t.p())
        .filter(|z| z.iter().all(|x| x.is_finite()))
        .ok_or(Error::Singular { layer })
}

/// Burn-in schedule for the zeta recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZetaConfig {
    pub tol: f64,
    pub initial_burn_in: usize,
    pub max_burn_in: usize,
}

impl Default for ZetaConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            initial_burn_in: 64,
            max_burn_in: 1 << 20,
        }
    }
}

/// `zeta_n` on a window plus a converged lead-in to its left.
#[derive(Debug, Clone)]
pub struct ZetaSequence {
    window: Window,
    first: i64,
    zeta: Vec<Mat>,
    burn_in: usize,
    tol: f64,
    discrepancy: f64,
    min_entry: f64,
    residual: f64,
}

impl ZetaSequence {
    pub fn window(&self) -> Window {
        self.window
    }

    /// First layer for which zeta is stored (left of the window).
    pub fn first(&self) -> i64 {
        self.first
    }

    pub fn get(&self, n: i64) -> Option<&Mat> {
        if n < self.first || n > self.window.end {
            return None;
        }
        self.zeta.get((n - self.first) as usize)
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Largest entrywise gap between the two extreme seeds.
    pub fn discrepancy(&self) -> f64 {
        self.discrepancy
    }

    /// Smallest entry of any stored zeta (the ellipticity constant seen).
    pub fn min_entry(&self) -> f64 {
        self.min_entry
    }

    /// Largest residual of the defining equation over the stored range.
    pub fn residual(&self) -> f64 {
        self.residual
    }
}

/// Runs the recursion from `window.start - B` with a uniform and a
/// near-identity seed, doubling `B` until both agree within `cfg.tol` on the
/// window and on a lead-in of `B/2` layers.
pub fn compute_zeta<S: LayerSource + ?Sized>(env: &S, window: Window, cfg: &ZetaConfig) -> Result<ZetaSequence> {
    let m = env.width();
    if m == 1 {
        let lead = cfg.initial_burn_in / 2;
        let first = window.start - lead as i64;
        let len = (window.end - first + 1) as usize;
        return Ok(ZetaSequence {
            window,
            first,
            zeta: vec![Mat::from_element(1, 1, 1.0); len],
            burn_in: 0,
            tol: cfg.tol,
            discrepancy: 0.0,
            min_entry: 1.0,
            residual: 0.0,
        });
    }
    let mut burn_in = cfg.initial_burn_in.max(2);
    loop {
        let lead = burn_in / 2;
        let first = window.start - lead as i64;
        let a = window.start - burn_in as i64;
        let mut psi_u = uniform_stochastic(m);
        let mut psi_i = mollified_identity(m, 1e-3);
        let mut stored = Vec::with_capacity((window.end - first + 1) as usize);
        let mut worst = (0.0f64, first);
        for n in (a + 1)..=window.end {
            let t = env.layer(n);
            psi_u = next_zeta(&t, &psi_u, n)?;
            psi_i = next_zeta(&t, &psi_i, n)?;
            if n >= first {
                let d = max_abs_diff(&psi_u, &psi_i);
                if d > worst.0 || d.is_nan() {
                    worst = (d, n);
                }
                stored.push(psi_u.clone());
            }
        }
        if worst.0 < cfg.tol {
            let mut residual = 0.0f64;
            for (k, n) in ((first + 1)..=window.end).enumerate() {
                let t = env.layer(n);
                let z = next_zeta(&t, &stored[k], n)?;
                residual = residual.max(max_abs_diff(&z, &stored[k + 1]));
            }
            let min_e = stored.iter().map(min_entry).fold(f64::INFINITY, f64::min);
            return Ok(ZetaSequence {
                window,
                first,
                zeta: stored,
                burn_in,
                tol: cfg.tol,
                discrepancy: worst.0,
                min_entry: min_e,
                residual,
            });
        }
        if burn_in * 2 > cfg.max_burn_in {
            return Err(Error::ZetaNonConvergence {
                layer: worst.1,
                burn_in,
                discrepancy: worst.0,
            });
        }
        burn_in *= 2;
    }
}

/// `A_n`, `U_n`, `zeta_n` and the hitting distributions `y_n` on a window.
///
/// `y_n` is the law of the rung at which a walk coming from far left first
/// enters layer `n`, so `y_{n+1} = y_n zeta_n`.
#[derive(Debug, Clone)]
pub struct PropagatorSet {
    window: Window,
    first: i64,
    zeta: Vec<Mat>,
    a: Vec<Mat>,
    u: Vec<Mat>,
    y: Vec<RowVec>,
    y_discrepancy: f64,
}

/// Builds `A_n`, `U_n` for every layer whose left neighbour has a zeta,
/// and `y_n` from the uniform vector at the left end of the lead-in.
pub fn compute_propagators<S: LayerSource + ?Sized>(env: &S, zeta: &ZetaSequence) -> Result<PropagatorSet> {
    let m = env.width();
    let first = zeta.first() + 1;
    let end = zeta.window().end;
    if first > zeta.window().start {
        return Err(Error::Range("zeta must cover one layer left of the window".into()));
    }
    let mut a = Vec::with_capacity((end - first + 1) as usize);
    let mut u = Vec::with_capacity(a.capacity());
    for n in first..=end {
        let sol = solve_layer(&env.layer(n), zeta.get(n - 1).unwrap(), n)?;
        a.push(sol.a);
        u.push(sol.u);
    }
    let zs: Vec<Mat> = (first..=end).map(|n| zeta.get(n).unwrap().clone()).collect();
    // y on [first, end]: y_first uniform, y_{n+1} = y_n zeta_n
    let run_y = |from: i64| -> Vec<RowVec> {
        let mut y = uniform_row(m);
        let mut out = Vec::with_capacity((end - from + 1) as usize);
        for n in from..=end {
            out.push(y.clone());
            if n < end {
                y = &y * &zs[(n - first) as usize];
                let s: f64 = y.iter().sum();
                y /= s;
            }
        }
        out
    };
    let y = run_y(first);
    let half = first + (zeta.window().start - first) / 2;
    let y_half = run_y(half);
    let y_discrepancy = (zeta.window().start..=end)
        .map(|n| {
            let a = &y[(n - first) as usize];
            let b = &y_half[(n - half) as usize];
            (a - b).amax()
        })
        .fold(0.0, f64::max);
    Ok(PropagatorSet {
        window: zeta.window(),
        first,
        zeta: zs,
        a,
        u,
        y,
        y_discrepancy,
    })
}

impl PropagatorSet {
    /// Convenience: zeta plus propagators on `window`, with `margin` extra
    /// layers of `A`, `U` to the left for the truncated series.
    pub fn build<S: LayerSource + ?Sized>(env: &S, window: Window, margin: usize, cfg: &ZetaConfig) -> Result<Self> {
        let w = Window::new(window.start - margin as i64, window.end)?;
        let z = compute_zeta(env, w, cfg)?;
        compute_propagators(env, &z)
    }

    /// Requested window; `y` is reliable here.
    pub fn window(&self) -> Window {
        self.window
    }

    /// Layers on which `A`, `U`, `zeta`, `y` are all available.
    pub fn available(&self) -> Window {
        Window {
            start: self.first,
            end: self.window.end,
        }
    }

    pub fn width(&self) -> usize {
        self.a[0].nrows()
    }

    fn idx(&self, n: i64) -> Result<usize> {
        if n < self.first || n > self.window.end {
            return Err(Error::OutsideWindow {
                layer: n,
                start: self.first,
                end: self.window.end,
            });
        }
        Ok((n - self.first) as usize)
    }

    pub fn zeta(&self, n: i64) -> Result<&Mat> {
        Ok(&self.zeta[self.idx(n)?])
    }

    pub fn a(&self, n: i64) -> Result<&Mat> {
        Ok(&self.a[self.idx(n)?])
    }

    pub fn u(&self, n: i64) -> Result<&Mat> {
        Ok(&self.u[self.idx(n)?])
    }

    pub fn y(&self, n: i64) -> Result<&RowVec> {
        Ok(&self.y[self.idx(n)?])
    }

    /// Gap in `y` on the window when the burn-in is halved.
    pub fn y_discrepancy(&self) -> f64 {
        self.y_discrepancy
    }

    /// `H_j^i = A_j A_{j-1} ... A_{j-i+1}`, with `H_j^0 = I`.
    pub fn h(&self, j: i64, i: usize) -> Result<Mat> {
        let m = self.width();
        let mut h = Mat::identity(m, m);
        for l in 0..i as i64 {
            h *= self.a(j - l)?;
        }
        Ok(h)
    }
}

/// Streams `A_n` for `n >= start` after a two-seed burn-in, without storing.
pub struct AStream<'a, S: LayerSource + ?Sized> {
    env: &'a S,
    next: i64,
    zeta_prev: Mat,
}

impl<'a, S: LayerSource + ?Sized> AStream<'a, S> {
    pub fn new(env: &'a S, start: i64, cfg: &ZetaConfig) -> Result<Self> {
        let m = env.width();
        if m == 1 {
            return Ok(Self {
                env,
                next: start,
                zeta_prev: Mat::from_element(1, 1, 1.0),
            });
        }
        let mut burn_in = cfg.initial_burn_in.max(2);
        loop {
            let a = start - 1 - burn_in as i64;
            let mut psi_u = uniform_stochastic(m);
            let mut psi_i = mollified_identity(m, 1e-3);
            for n in (a + 1)..start {
                let t = env.layer(n);
                psi_u = next_zeta(&t, &psi_u, n)?;
                psi_i = next_zeta(&t, &psi_i, n)?;
            }
            let d = max_abs_diff(&psi_u, &psi_i);
            if d < cfg.tol {
                return Ok(Self {
                    env,
                    next: start,
                    zeta_prev: psi_u,
                });
            }
            if burn_in * 2 > cfg.max_burn_in {
                return Err(Error::ZetaNonConvergence {
                    layer: start - 1,
                    burn_in,
                    discrepancy: d,
                });
            }
            burn_in *= 2;
        }
    }

    /// Returns `(n, A_n)` and advances.
    pub fn advance(&mut self) -> Result<(i64, Mat)> {
        let n = self.next;
        let sol = solve_layer(&self.env.layer(n), &self.zeta_prev, n)?;
        self.zeta_prev = sol.zeta;
        self.next += 1;
        Ok((n, sol.a))
    }
}

/// Running log-norm of `A_n ... A_first` with per-step renormalization.
struct LogProduct {
    unit: Mat,
    log_norm: f64,
}

impl LogProduct {
    fn new(m: usize) -> Self {
        Self {
            unit: Mat::identity(m, m),
            log_norm: 0.0,
        }
    }

    /// Left-multiplies by `a`; returns the log-norm increment.
    fn push(&mut self, a: &Mat, layer: i64) -> Result<f64> {
        let next = a * &self.unit;
        let norm = max_row_sum(&next);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroProduct { layer });
        }
        self.unit = next / norm;
        let g = norm.ln();
        self.log_norm += g;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub lambda: f64,
    pub stderr: f64,
    pub n: usize,
}

/// `(1/N) ln ||A_{N-1} ... A_0||` with a batch-means standard error over
/// `floor(sqrt(N))`-sized blocks.
pub fn top_lyapunov<S: LayerSource + ?Sized>(env: &S, n: usize, cfg: &ZetaConfig) -> Result<LyapunovEstimate> {
    if n == 0 {
        return Err(Error::Range("product length must be at least 1".into()));
    }
    let mut stream = AStream::new(env, 0, cfg)?;
    let mut prod = LogProduct::new(env.width());
    let block = ((n as f64).sqrt().floor() as usize).max(1);
    let mut block_means = Vec::with_capacity(n / block + 1);
    let mut acc = 0.0;
    for k in 0..n {
        let (layer, a) = stream.advance()?;
        acc += prod.push(&a, layer)?;
        if (k + 1) % block == 0 {
            block_means.push(acc / block as f64);
            acc = 0.0;
        }
    }
    let lambda = prod.log_norm / n as f64;
    let stderr = if block_means.len() >= 2 {
        mean_and_stderr(&block_means).1
    } else {
        0.0
    };
    Ok(LyapunovEstimate { lambda, stderr, n })
}

/// Moment-curve estimation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentConfig {
    /// Product length `N` in `(E ||A_N ... A_1||^alpha)^(1/N)`.
    pub n: usize,
    pub replicas: usize,
    /// Smallest admissible `alpha` is `-alpha0`.
    pub alpha0: f64,
    pub alpha_max: f64,
    pub bootstrap: usize,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            n: 8,
            replicas: 20_000,
            alpha0: 1.0,
            alpha_max: 64.0,
            bootstrap: 200,
        }
    }
}

/// Frozen replicas of `ln ||A_N ... A_1||`, one per independent environment.
/// Reusing them for every `alpha` makes `alpha -> ln r(alpha)` a smooth
/// convex function, which the root finder relies on.
#[derive(Debug, Clone)]
pub struct LogNormSample {
    pub n: usize,
    pub values: Vec<f64>,
    seed: u64,
    bootstrap: usize,
}

impl LogNormSample {
    pub fn draw(spec: &EnvironmentSpec, cfg: &MomentConfig, zcfg: &ZetaConfig) -> Result<Self> {
        if cfg.n == 0 || cfg.replicas == 0 {
            return Err(Error::Range("N and replicas must be at least 1".into()));
        }
        let values = crate::par::replicate(cfg.replicas, |k| {
            let env = spec.with_seed(rng::stream_key(spec.seed(), tag::ENV_REPLICA, k as u64));
            let mut stream = AStream::new(&env, 1, zcfg)?;
            let mut prod = LogProduct::new(env.width());
            for _ in 0..cfg.n {
                let (layer, a) = stream.advance()?;
                prod.push(&a, layer)?;
            }
            Ok(prod.log_norm)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            n: cfg.n,
            values,
            seed: spec.seed(),
            bootstrap: cfg.bootstrap,
        })
    }

    pub fn ln_r(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return 0.0;
        }
        log_mean_exp(self.values.iter().map(|l| alpha * l)) / self.n as f64
    }

    /// Percentile bootstrap interval for `ln r(alpha)` at level 95%.
    pub fn ln_r_ci(&self, alpha: f64) -> (f64, f64) {
        if alpha == 0.0 {
            return (0.0, 0.0);
        }
        let k = self.values.len();
        let mut rng = rng::stream(self.seed, tag::BOOTSTRAP, 0);
        let mut boots: Vec<f64> = (0..self.bootstrap)
            .map(|_| {
                let draw: Vec<f64> = (0..k).map(|_| alpha * self.values[rng.random_range(0..k)]).collect();
                log_mean_exp(draw.iter().copied()) / self.n as f64
            })
            .collect();
        boots.sort_by(f64::total_cmp);
        (quantile_sorted(&boots, 0.025), quantile_sorted(&boots, 0.975))
    }

    pub fn mean_lambda(&self) -> f64 {
        self.values.iter().sum::<f64>() / (self.values.len() * self.n) as f64
    }
}

/// Where `r(alpha)` values come from.
#[derive(Debug, Clone)]
pub enum MomentSource {
    /// `m = 1`, finite support: `r(alpha) = sum_k w_k (q_k/p_k)^alpha` exactly.
    Exact(Vec<(f64, f64)>),
    Sampled(LogNormSample),
}

impl MomentSource {
    /// Exact source when available, otherwise Monte Carlo replicas.
    pub fn for_spec(spec: &EnvironmentSpec, cfg: &MomentConfig, zcfg: &ZetaConfig) -> Result<Self> {
        match scalar_log_ratios(spec) {
            Some(pts) => Ok(Self::Exact(pts)),
            None => Ok(Self::Sampled(LogNormSample::draw(spec, cfg, zcfg)?)),
        }
    }

    pub fn ln_r(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return 0.0;
        }
        match self {
            Self::Exact(pts) => {
                let mx = pts.iter().map(|&(l, _)| alpha * l).fold(f64::NEG_INFINITY, f64::max);
                mx + pts.iter().map(|&(l, w)| w * (alpha * l - mx).exp()).sum::<f64>().ln()
            }
            Self::Sampled(s) => s.ln_r(alpha),
        }
    }

    pub fn ln_r_ci(&self, alpha: f64) -> (f64, f64) {
        match self {
            Self::Exact(_) => {
                let v = self.ln_r(alpha);
                (v, v)
            }
            Self::Sampled(s) => s.ln_r_ci(alpha),
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Self::Exact(_))
    }
}

/// `(ln(q_k/p_k), w_k)` for an `m = 1` finitely supported law.
pub fn scalar_log_ratios(spec: &EnvironmentSpec) -> Option<Vec<(f64, f64)>> {
    if spec.width() != 1 {
        return None;
    }
    let pts = spec.support()?;
    Some(
        pts.iter()
            .map(|pt| {
                let t = &pt.triple;
                ((t.q()[(0, 0)] / t.p()[(0, 0)]).ln(), pt.weight)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub alpha: f64,
    pub r_hat: f64,
    pub ci: (f64, f64),
}

/// Monte Carlo estimate of `r(alpha)` from independent environment replicas,
/// reduced in log space. `r(0) = 1` is returned without simulation.
pub fn moment_lyapunov(
    spec: &EnvironmentSpec,
    alpha: f64,
    cfg: &MomentConfig,
    zcfg: &ZetaConfig,
) -> Result<MomentEstimate> {
    check_alpha(alpha, cfg)?;
    if alpha == 0.0 {
        return Ok(MomentEstimate {
            alpha,
            r_hat: 1.0,
            ci: (1.0, 1.0),
        });
    }
    let sample = LogNormSample::draw(spec, cfg, zcfg)?;
    let (lo, hi) = sample.ln_r_ci(alpha);
    Ok(MomentEstimate {
        alpha,
        r_hat: sample.ln_r(alpha).exp(),
        ci: (lo.exp(), hi.exp()),
    })
}

fn check_alpha(alpha: f64, cfg: &MomentConfig) -> Result<()> {
    if !(alpha >= -cfg.alpha0 && alpha <= cfg.alpha_max) {
        return Err(Error::Range(format!(
            "alpha = {alpha} outside [-{}, {}]",
            cfg.alpha0, cfg.alpha_max
        )));
    }
    Ok(())
}

/// Positive root `s` of `r(s) = 1`, or `+inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticalExponent {
    Finite { s: f64, lo: f64, hi: f64 },
    Infinite,
}

impl CriticalExponent {
    pub fn value(&self) -> f64 {
        match self {
            Self::Finite { s, .. } => *s,
            Self::Infinite => f64::INFINITY,
        }
    }
}

const INFINITY_PROBES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

/// Finds `s` with `r(s) = 1` by bisection on `ln r` over an expanding
/// bracket. Declares `s = inf` when `r` is strictly decreasing on
/// `{1, 2, 4, 8}` with upper confidence bound below one, or when every
/// support triple of a finite law has leading eigenvalue below one.
pub fn solve_critical_exponent(
    source: &MomentSource,
    spec: &EnvironmentSpec,
    cfg: &MomentConfig,
) -> Result<CriticalExponent> {
    let lambda = match source {
        MomentSource::Exact(pts) => pts.iter().map(|&(l, w)| w * l).sum::<f64>(),
        MomentSource::Sampled(s) => s.mean_lambda(),
    };
    if !(lambda < 0.0) {
        return Err(Error::Regime {
            check: "solve_critical_exponent".into(),
            required: "walk transient right (lambda < 0)".into(),
            found: format!("lambda = {lambda}"),
        });
    }
    if let Some(lams) = support_leading_eigenvalues(spec) {
        if lams.iter().all(|&l| l < 1.0) {
            return Ok(CriticalExponent::Infinite);
        }
    }
    let probes: Vec<(f64, (f64, f64))> = INFINITY_PROBES
        .iter()
        .map(|&a| (source.ln_r(a), source.ln_r_ci(a)))
        .collect();
    let decreasing = probes.windows(2).all(|w| w[1].0 < w[0].0);
    if decreasing && probes.iter().all(|(_, ci)| ci.1 < 0.0) {
        return Ok(CriticalExponent::Infinite);
    }
    let f = |a: f64| source.ln_r(a);
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > cfg.alpha_max {
            return Ok(CriticalExponent::Infinite);
        }
    }
    let mut lo = hi / 2.0;
    while f(lo) >= 0.0 {
        lo /= 2.0;
        if lo < 1e-9 {
            return Err(Error::Range("no sign change of ln r near zero".into()));
        }
    }
    let s = bisect(f, lo, hi);
    // CI-aware band: roots of the upper and lower confidence curves
    let (band_lo, band_hi) = match source {
        MomentSource::Exact(_) => (s, s),
        MomentSource::Sampled(_) => {
            let upper = |a: f64| source.ln_r_ci(a).1;
            let lower = |a: f64| source.ln_r_ci(a).0;
            let b_lo = if upper(lo) < 0.0 && upper(hi) >= 0.0 {
                bisect(upper, lo, hi)
            } else {
                lo
            };
            let mut h2 = hi;
            while lower(h2) < 0.0 && h2 < cfg.alpha_max {
                h2 *= 2.0;
            }
            let b_hi = if lower(h2) >= 0.0 {
                bisect(lower, s, h2)
            } else {
                f64::INFINITY
            };
            (b_lo, b_hi)
        }
    };
    Ok(CriticalExponent::Finite {
        s,
        lo: band_lo,
        hi: band_hi,
    })
}

/// Bisection for an increasing crossing of zero; returns the lower end of
/// the final bracket.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Leading eigenvalue of `(I - R - Q zeta)^{-1} Q` for each support triple,
/// where `zeta` is the fixed point for the constant environment.
pub fn support_leading_eigenvalues(spec: &EnvironmentSpec) -> Option<Vec<f64>> {
    let pts = spec.support()?;
    pts.iter()
        .map(|pt| triple_leading_eigenvalue(&pt.triple).ok())
        .collect()
}

pub fn triple_leading_eigenvalue(t: &MatrixTriple) -> Result<f64> {
    let m = t.width();
    let mut zeta = uniform_stochastic(m);
    for it in 0..100_000 {
        let next = next_zeta(t, &zeta, 0)?;
        let d = max_abs_diff(&next, &zeta);
        zeta = next;
        if d < 1e-15 && it > 2 {
            break;
        }
    }
    let sol = solve_layer(t, &zeta, 0)?;
    Ok(perron_root(&sol.a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Recurrent,
    TransientRight,
    TransientLeft,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Recurrent => "Recurrent",
            Regime::TransientRight => "TransientRight",
            Regime::TransientLeft => "TransientLeft",
        };
        f.write_str(s)
    }
}

/// Statistical three-sigma rule on the Lyapunov estimate.
pub fn classify_regime(lambda_hat: f64, stderr: f64) -> Regime {
    if lambda_hat < -3.0 * stderr {
        Regime::TransientRight
    } else if lambda_hat > 3.0 * stderr {
        Regime::TransientLeft
    } else {
        Regime::Recurrent
    }
}

/// Exact regime for `m = 1` finite laws (sign of `E ln(q/p)`), otherwise
/// the statistical rule applied to `estimate`.
pub fn classify_spec(spec: &EnvironmentSpec, estimate: &LyapunovEstimate) -> Regime {
    match scalar_log_ratios(spec) {
        Some(pts) => {
            let mean: f64 = pts.iter().map(|&(l, w)| w * l).sum();
            classify_regime(mean, 1e-12)
        }
        None => classify_regime(estimate.lambda, estimate.stderr),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundedProducts {
    pub flag: bool,
    pub k_observed: f64,
    pub k_half: f64,
    pub n: usize,
    pub k_bound: f64,
}

/// Tracks `max |ln ||A_n ... A_0|| |` for `n <= N` and flags the
/// environment as bounded when the range stays below `ln k_bound` at both
/// `N/2` and `N`.
pub fn check_bounded_products<S: LayerSource + ?Sized>(
    env: &S,
    n: usize,
    k_bound: f64,
    cfg: &ZetaConfig,
) -> Result<BoundedProducts> {
    let mut stream = AStream::new(env, 0, cfg)?;
    let mut prod = LogProduct::new(env.width());
    let mut range = 0.0f64;
    let mut half = 0.0;
    for k in 0..=n {
        let (layer, a) = stream.advance()?;
        prod.push(&a, layer)?;
        range = range.max(prod.log_norm.abs());
        if k == n / 2 {
            half = range;
        }
    }
    let k_observed = range.exp();
    let k_half = half.exp();
    Ok(BoundedProducts {
        flag: k_observed <= k_bound && k_half <= k_bound,
        k_observed,
        k_half,
        n,
        k_bound,
    })
}

/// Settings for [`summarize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub zeta: ZetaConfig,
    pub moments: MomentConfig,
    pub lyapunov_n: usize,
    pub bp_n: usize,
    pub bp_k: f64,
    pub r_grid: Vec<f64>,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            zeta: ZetaConfig::default(),
            moments: MomentConfig::default(),
            lyapunov_n: 100_000,
            bp_n: 10_000,
            bp_k: 100.0,
            r_grid: vec![0.0, 0.5, 1.0, 2.0, 3.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RPoint {
    pub alpha: f64,
    pub r: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub spec_id: String,
    pub lambda: LyapunovEstimate,
    pub r_curve: Vec<RPoint>,
    pub s: CriticalExponent,
    pub regime: Regime,
    pub bp: BoundedProducts,
    pub exact_moments: bool,
    /// Distinct values of `ln lambda(P,Q,R)` over a finite support, for a
    /// manual look at arithmetic degeneracy.
    pub support_log_eigenvalues: Vec<f64>,
}

/// Flat record `{lambda, stderr, s, regime, bp, K}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRecord {
    pub spec_id: String,
    pub lambda: f64,
    pub stderr: f64,
    pub s: f64,
    pub regime: Regime,
    pub bp: bool,
    #[serde(rename = "K")]
    pub k: f64,
}

impl SpectralSummary {
    pub fn record(&self) -> SpectralRecord {
        SpectralRecord {
            spec_id: self.spec_id.clone(),
            lambda: self.lambda.lambda,
            stderr: self.lambda.stderr,
            s: self.s.value(),
            regime: self.regime,
            bp: self.bp.flag,
            k: self.bp.k_observed,
        }
    }
}

/// Lyapunov exponent, regime, moment curve, critical exponent and the
/// bounded-product flag of a spec.
pub fn summarize(spec: &EnvironmentSpec, cfg: &SpectralConfig) -> Result<SpectralSummary> {
    let env = Environment::new(Arc::new(spec.clone()), Window::new(0, 0)?)?;
    let lambda = top_lyapunov(&env, cfg.lyapunov_n, &cfg.zeta)?;
    let regime = classify_spec(spec, &lambda);
    let source = MomentSource::for_spec(spec, &cfg.moments, &cfg.zeta)?;
    let mut r_curve = Vec::with_capacity(cfg.r_grid.len() + 1);
    let mut grid = cfg.r_grid.clone();
    if !grid.contains(&0.0) {
        grid.insert(0, 0.0);
    }
    for &alpha in &grid {
        check_alpha(alpha, &cfg.moments)?;
        let (lo, hi) = source.ln_r_ci(alpha);
        r_curve.push(RPoint {
            alpha,
            r: if alpha == 0.0 { 1.0 } else { source.ln_r(alpha).exp() },
            ci_lo: lo.exp(),
            ci_hi: hi.exp(),
        });
    }
    let s = match regime {
        Regime::TransientRight => solve_critical_exponent(&source, spec, &cfg.moments)?,
        _ => CriticalExponent::Infinite,
    };
    let bp = check_bounded_products(&env, cfg.bp_n, cfg.bp_k, &cfg.zeta)?;
    let mut support_log_eigenvalues: Vec<f64> = support_leading_eigenvalues(spec)
        .unwrap_or_default()
        .into_iter()
        .map(f64::ln)
        .collect();
    support_log_eigenvalues.sort_by(f64::total_cmp);
    support_log_eigenvalues.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Ok(SpectralSummary {
        spec_id: spec.id().to_string(),
        lambda,
        r_curve,
        s,
        regime,
        bp,
        exact_moments: source.is_exact(),
        support_log_eigenvalues,
    })
}

/// Annealed mean crossing time `a = E E_omega tau_0`. Closed form
/// `E(1/p) / (1 - E(q/p))` for `m = 1` finite laws; `None` otherwise.
pub fn exact_scalar_a(spec: &EnvironmentSpec) -> Option<f64> {
    if spec.width() != 1 {
        return None;
    }
    let pts = spec.support()?;
    let (mut inv_p, mut ratio) = (0.0, 0.0);
    for pt in pts {
        let t = &pt.triple;
        inv_p += pt.weight / t.p()[(0, 0)];
        ratio += pt.weight * t.q()[(0, 0)] / t.p()[(0, 0)];
    }
    (ratio < 1.0).then(|| inv_p / (1.0 - ratio))
}

/// True when every row of `zeta` sums to one within `tol`.
pub fn is_stochastic(m: &Mat, tol: f64) -> bool {
    min_entry(m) >= -tol && row_sums(m).iter().all(|s| (s - 1.0).abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{EllipticityParams, UniformRows};
    use proptest::prelude::*;

    fn two_point(a: f64, b: f64) -> EnvironmentSpec {
        EnvironmentSpec::scalar_points("two-point", &[(a, 0.5), (b, 0.5)], 7).unwrap()
    }

    fn constant(p: f64) -> EnvironmentSpec {
        EnvironmentSpec::constant("const", MatrixTriple::scalar(p, 1.0 - p).unwrap(), 1).unwrap()
    }

    fn m2_triple() -> MatrixTriple {
        MatrixTriple::from_rows(
            &[vec![0.3, 0.1], vec![0.1, 0.2]],
            &[vec![0.1, 0.1], vec![0.05, 0.15]],
            &[vec![0.3, 0.1], vec![0.2, 0.3]],
        )
        .unwrap()
    }

    fn m3_parametric(seed: u64) -> EnvironmentSpec {
        let gen = UniformRows {
            right: [0.2, 1.0],
            left: [0.1, 0.6],
            stay: [0.3, 0.8],
        };
        EnvironmentSpec::parametric("m3", 3, gen, seed).unwrap()
    }

    /// Fixed point of `z <- (I - R - Q z)^{-1} P` by plain iteration with
    /// explicit inverses.
    fn fixed_point_oracle(t: &MatrixTriple) -> (Mat, Mat) {
        let m = t.width();
        let mut z = Mat::from_element(m, m, 1.0 / m as f64);
        let mut inv = Mat::identity(m, m);
        for _ in 0..200 {
            inv = (Mat::identity(m, m) - t.r() - t.q() * &z).try_inverse().unwrap();
            z = &inv * t.p();
        }
        (z, inv * t.q())
    }

    fn closed_form_r(pts: &[(f64, f64)], alpha: f64) -> f64 {
        pts.iter().map(|&(p, w)| w * ((1.0 - p) / p).powf(alpha)).sum()
    }

    fn scalar_bisection(pts: &[(f64, f64)], mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if closed_form_r(pts, mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn scalar_zeta_is_one() {
        let spec = two_point(0.7, 0.4);
        let env = Environment::new(Arc::new(spec), Window::new(-5, 20).unwrap()).unwrap();
        let z = compute_zeta(&env, Window::new(0, 10).unwrap(), &ZetaConfig::default()).unwrap();
        for n in 0..=10 {
            assert_eq!(z.get(n).unwrap()[(0, 0)], 1.0);
        }
    }

    #[test]
    fn constant_strip_matches_fixed_point_oracle() {
        let t = m2_triple();
        let spec = EnvironmentSpec::constant("m2", t.clone(), 3).unwrap();
        let w = Window::new(0, 30).unwrap();
        let z = compute_zeta(&spec, w, &ZetaConfig::default()).unwrap();
        let (oracle_z, oracle_a) = fixed_point_oracle(&t);
        for n in 0..=30 {
            assert!(max_abs_diff(z.get(n).unwrap(), &oracle_z) < 1e-10);
        }
        let props = compute_propagators(&spec, &z).unwrap();
        for n in 0..=30 {
            assert!(max_abs_diff(props.a(n).unwrap(), &oracle_a) < 1e-10);
            assert!((max_row_sum(props.a(n).unwrap()) - max_row_sum(&oracle_a)).abs() < 1e-10);
        }
    }

    #[test]
    fn residual_and_stochasticity_on_random_strip() {
        let spec = m3_parametric(11);
        let w = Window::new(-40, 40).unwrap();
        let z = compute_zeta(&spec, w, &ZetaConfig::default()).unwrap();
        assert!(z.residual() < 1e-9);
        assert!(z.discrepancy() < z.tol());
        assert!(z.min_entry() > 0.0);
        for n in -40..=40 {
            let t = spec.layer(n);
            let direct = (Mat::identity(3, 3) - t.q() * z.get(n - 1).unwrap() - t.r())
                .try_inverse()
                .unwrap()
                * t.p();
            assert!(max_abs_diff(&direct, z.get(n).unwrap()) < 1e-9);
            assert!(is_stochastic(z.get(n).unwrap(), 1e-10));
        }
    }

    #[test]
    fn scalar_propagators_are_closed_form() {
        let spec = constant(0.75);
        let p = PropagatorSet::build(&spec, Window::new(0, 10).unwrap(), 0, &ZetaConfig::default()).unwrap();
        for n in 0..=10 {
            assert!((p.a(n).unwrap()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
            assert!((p.u(n).unwrap()[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
            assert_eq!(p.y(n).unwrap()[0], 1.0);
            assert_eq!(p.h(n, 0).unwrap(), Mat::identity(1, 1));
            assert_eq!(p.h(n, 1).unwrap(), *p.a(n).unwrap());
        }
    }

    #[test]
    fn propagators_are_nonnegative_and_y_is_a_distribution() {
        let spec = m3_parametric(5);
        let p = PropagatorSet::build(&spec, Window::new(0, 50).unwrap(), 5, &ZetaConfig::default()).unwrap();
        for n in 0..=50 {
            assert!(min_entry(p.a(n).unwrap()) >= 0.0);
            assert!(min_entry(p.u(n).unwrap()) >= 0.0);
            let y = p.y(n).unwrap();
            assert!(y.iter().all(|&v| v >= 0.0));
            assert!((y.sum() - 1.0).abs() < 1e-10);
            let next = y * p.zeta(n).unwrap();
            if n < 50 {
                assert!((&next - p.y(n + 1).unwrap()).amax() < 1e-12);
            }
        }
        assert!(p.y_discrepancy() < 1e-10);
        assert!(matches!(p.a(200), Err(Error::OutsideWindow { .. })));
    }

    #[test]
    fn lyapunov_constant_drift_is_exact() {
        let est = top_lyapunov(&constant(0.75), 1000, &ZetaConfig::default()).unwrap();
        assert!((est.lambda - (1.0f64 / 3.0).ln()).abs() < 1e-10);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn lyapunov_two_point_and_symmetric() {
        let cfg = ZetaConfig::default();
        let est = top_lyapunov(&two_point(0.7, 0.4), 100_000, &cfg).unwrap();
        let exact = 0.5 * ((3.0f64 / 7.0).ln() + 1.5f64.ln());
        assert!((est.lambda - exact).abs() < 3.0 * est.stderr, "{est:?} vs {exact}");
        let sym = top_lyapunov(&constant(0.5), 10_000, &cfg).unwrap();
        assert!(sym.lambda.abs() <= 3.0 * sym.stderr + 1e-15);
    }

    #[test]
    fn log_space_product_survives_ten_million_layers() {
        let est = top_lyapunov(&constant(0.75), 10_000_000, &ZetaConfig::default()).unwrap();
        assert!(est.lambda.is_finite());
        assert!((est.lambda - (1.0f64 / 3.0).ln()).abs() < 1e-8);
    }

    #[test]
    fn moment_curve_mc_matches_closed_form() {
        let spec = two_point(0.7, 0.4);
        let cfg = MomentConfig::default();
        let zcfg = ZetaConfig::default();
        let zero = moment_lyapunov(&spec, 0.0, &cfg, &zcfg).unwrap();
        assert_eq!(zero.r_hat, 1.0);
        let est = moment_lyapunov(&spec, 2.0, &cfg, &zcfg).unwrap();
        let exact = 0.5 * ((3.0f64 / 7.0).powi(2) + 2.25);
        assert!((exact - 1.21684).abs() < 1e-5);
        assert!(est.ci.0 <= exact && exact <= est.ci.1, "{est:?}");
        assert!(matches!(
            moment_lyapunov(&spec, -5.0, &cfg, &zcfg),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn moment_slope_at_zero_is_lyapunov() {
        let spec = two_point(0.7, 0.4);
        let h = 1e-3;
        let r = moment_lyapunov(&spec, h, &MomentConfig::default(), &ZetaConfig::default()).unwrap();
        let lam = top_lyapunov(&spec, 100_000, &ZetaConfig::default()).unwrap();
        assert!(((r.r_hat - 1.0) / h - lam.lambda).abs() < 1e-2);
    }

    #[test]
    fn critical_exponents_of_two_point_laws() {
        let cfg = MomentConfig::default();
        let zcfg = ZetaConfig::default();
        for (a, b, lo, hi) in [(0.7, 0.4, 1.2, 1.25), (0.8, 0.45, 3.4, 3.5)] {
            let spec = two_point(a, b);
            let src = MomentSource::for_spec(&spec, &cfg, &zcfg).unwrap();
            assert!(src.is_exact());
            let s = solve_critical_exponent(&src, &spec, &cfg).unwrap().value();
            let oracle = scalar_bisection(&[(a, 0.5), (b, 0.5)], lo, hi);
            assert!(s > lo && s < hi);
            assert!((s - oracle).abs() < 1e-9, "{s} vs {oracle}");
            assert!(src.ln_r(s).abs() < 1e-3);
        }
        let spec = two_point(0.85, 0.6);
        let src = MomentSource::for_spec(&spec, &cfg, &zcfg).unwrap();
        assert_eq!(
            solve_critical_exponent(&src, &spec, &cfg).unwrap(),
            CriticalExponent::Infinite
        );
    }

    #[test]
    fn critical_exponent_requires_right_transience() {
        let cfg = MomentConfig::default();
        let zcfg = ZetaConfig::default();
        for spec in [constant(0.5), two_point(0.3, 0.6)] {
            let src = MomentSource::for_spec(&spec, &cfg, &zcfg).unwrap();
            assert!(matches!(
                solve_critical_exponent(&src, &spec, &cfg),
                Err(Error::Regime { .. })
            ));
        }
    }

    #[test]
    fn sampled_critical_exponent_brackets_the_scalar_root() {
        let spec = two_point(0.7, 0.4);
        let cfg = MomentConfig::default();
        let src = MomentSource::Sampled(LogNormSample::draw(&spec, &cfg, &ZetaConfig::default()).unwrap());
        let s = solve_critical_exponent(&src, &spec, &cfg).unwrap();
        let oracle = scalar_bisection(&[(0.7, 0.5), (0.4, 0.5)], 1.0, 2.0);
        match s {
            CriticalExponent::Finite { s, lo, hi } => {
                assert!(lo <= s && s <= hi);
                assert!((s - oracle).abs() < 0.1, "{s} vs {oracle}");
            }
            CriticalExponent::Infinite => panic!("expected a finite root"),
        }
    }

    #[test]
    fn regime_rule() {
        assert_eq!(classify_regime(-0.22, 0.01), Regime::TransientRight);
        assert_eq!(classify_regime(0.3, 0.01), Regime::TransientLeft);
        assert_eq!(classify_regime(0.01, 0.01), Regime::Recurrent);
        let est = LyapunovEstimate {
            lambda: -1.0,
            stderr: 0.0,
            n: 1,
        };
        assert_eq!(classify_spec(&constant(0.5), &est), Regime::Recurrent);
        assert_eq!(classify_spec(&two_point(0.7, 0.4), &est), Regime::TransientRight);
    }

    #[test]
    fn bounded_products_examples() {
        let cfg = ZetaConfig::default();
        let sym = check_bounded_products(&constant(0.5), 1000, 100.0, &cfg).unwrap();
        assert!(sym.flag);
        assert_eq!(sym.k_observed, 1.0);
        let sinai = check_bounded_products(&two_point(0.7, 0.3), 10_000, 100.0, &cfg).unwrap();
        assert!(!sinai.flag);
        let small = check_bounded_products(&two_point(0.7, 0.3), 100, 1e300, &cfg).unwrap();
        assert!(sinai.k_observed > small.k_observed);
        let drift = check_bounded_products(&constant(0.75), 100, 100.0, &cfg).unwrap();
        assert!(!drift.flag);
        assert!((drift.k_observed.ln() - 101.0 * 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn scalar_constants_are_exact() {
        let a = exact_scalar_a(&two_point(0.7, 0.4)).unwrap();
        assert!((a - 55.0).abs() < 1e-10);
        assert!((exact_scalar_a(&constant(0.75)).unwrap() - 2.0).abs() < 1e-12);
        assert!(exact_scalar_a(&constant(0.5)).is_none());
    }

    #[test]
    fn summary_record_has_unit_r_at_zero() {
        let cfg = SpectralConfig {
            lyapunov_n: 2000,
            bp_n: 500,
            ..SpectralConfig::default()
        };
        let s = summarize(&two_point(0.8, 0.45), &cfg).unwrap();
        assert_eq!(s.r_curve[0].alpha, 0.0);
        assert_eq!(s.r_curve[0].r, 1.0);
        assert_eq!(s.regime, Regime::TransientRight);
        let oracle = scalar_bisection(&[(0.8, 0.5), (0.45, 0.5)], 3.0, 4.0);
        assert!((s.s.value() - oracle).abs() < 1e-9, "{:?}", s.s);
        assert_eq!(s.support_log_eigenvalues.len(), 2);
        let rec = s.record();
        assert_eq!(rec.spec_id, "two-point");
    }

    #[test]
    fn zeta_nonconvergence_names_a_layer() {
        // rung 2 never moves right: C2* fails and seeds stay apart
        let t = MatrixTriple::from_rows(
            &[vec![0.5, 0.0], vec![0.0, 0.0]],
            &[vec![0.25, 0.0], vec![0.0, 0.0]],
            &[vec![0.25, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let spec = EnvironmentSpec::constant("bad", t, 1).unwrap();
        let cfg = ZetaConfig {
            max_burn_in: 256,
            ..ZetaConfig::default()
        };
        let err = compute_zeta(&spec, Window::new(0, 3).unwrap(), &cfg).unwrap_err();
        assert!(matches!(err, Error::ZetaNonConvergence { .. } | Error::Singular { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn zeta_is_seed_independent(seed in any::<u64>(), start in -1000i64..1000) {
            let spec = m3_parametric(seed)
                .with_ellipticity(EllipticityParams::new(1e-3, 0.0).unwrap())
                .unwrap();
            let w = Window::new(start, start + 20).unwrap();
            let base = compute_zeta(&spec, w, &ZetaConfig::default()).unwrap();
            let longer = compute_zeta(&spec, w, &ZetaConfig { initial_burn_in: 1024, ..ZetaConfig::default() }).unwrap();
            prop_assert!(base.residual() < 1e-9);
            for n in start..=start + 20 {
                prop_assert!(max_abs_diff(base.get(n).unwrap(), longer.get(n).unwrap()) < 1e-10);
            }
        }

        #[test]
        fn scalar_moment_curve_is_closed_form(p1 in 0.55f64..0.95, p2 in 0.05f64..0.95, w in 0.05f64..0.95, alpha in 0.1f64..6.0) {
            let spec = EnvironmentSpec::scalar_points("s", &[(p1, w), (p2, 1.0 - w)], 1).unwrap();
            let src = MomentSource::for_spec(&spec, &MomentConfig::default(), &ZetaConfig::default()).unwrap();
            let exact = closed_form_r(&[(p1, w), (p2, 1.0 - w)], alpha);
            prop_assert!((src.ln_r(alpha).exp() - exact).abs() < 1e-10 * exact.max(1.0));
        }
    }
}
