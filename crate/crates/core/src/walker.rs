//! Quenched simulation of the strip walk and the exact expectation formulas.
//!
//! A step from `(k, i)` goes to `(k+1, j)` with probability `P_k(i, j)`,
//! to `(k, j)` with `R_k(i, j)` and to `(k-1, j)` with `Q_k(i, j)`. Each
//! layer's three rows are flattened into one cumulative table so a step
//! costs one uniform draw and a short scan.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Environment, EnvironmentSpec, MatrixTriple, Window};
use crate::error::{Error, Result};
use crate::linalg::{max_row_sum, ones, ColVec, Mat, RowVec};
use crate::rng::{self, tag};
use crate::spectral::PropagatorSet;
use crate::stats::{linear_fit, mean_var};

/// A site `(layer, rung)` with `1 <= rung <= m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteState {
    pub layer: i64,
    pub rung: usize,
}

impl SiteState {
    pub fn new(layer: i64, rung: usize) -> Self {
        Self { layer, rung }
    }
}

/// Cumulative rows `(P | R | Q)` for every rung of a layer, `3m` entries per
/// rung. The entry of the last reachable target is `+inf` so rounding in
/// the row sums can never send a draw past the end.
fn cumulative_rows(t: &MatrixTriple) -> Box<[f64]> {
    let m = t.width();
    let mut out = vec![0.0; 3 * m * m];
    for i in 0..m {
        let row = &mut out[i * 3 * m..(i + 1) * 3 * m];
        let mut acc = 0.0;
        let mut last = 0;
        for (block, mat) in [t.p(), t.r(), t.q()].into_iter().enumerate() {
            for j in 0..m {
                let w = mat[(i, j)];
                acc += w;
                row[block * m + j] = acc;
                if w > 0.0 {
                    last = block * m + j;
                }
            }
        }
        for v in &mut row[last..] {
            *v = f64::INFINITY;
        }
    }
    out.into_boxed_slice()
}

/// Draws a target index from a cumulative row.
#[inline]
fn pick(row: &[f64], u: f64) -> usize {
    if row.len() <= 12 {
        row.iter().position(|&c| u < c).unwrap_or(row.len() - 1)
    } else {
        row.partition_point(|&c| c <= u).min(row.len() - 1)
    }
}

/// Decodes a target index into `(layer offset, 0-based rung)`.
#[inline]
fn decode(k: usize, m: usize) -> (i64, usize) {
    match k / m {
        0 => (1, k),
        1 => (0, k - m),
        _ => (-1, k - 2 * m),
    }
}

/// One step from `state` using the kernel row of its layer.
pub fn step_walk<R: Rng + ?Sized>(env: &Environment, state: SiteState, rng: &mut R) -> SiteState {
    let m = env.width();
    let rows = cumulative_rows(&env.triple(state.layer));
    let row = &rows[(state.rung - 1) * 3 * m..state.rung * 3 * m];
    let (dl, j) = decode(pick(row, rng.random::<f64>()), m);
    SiteState::new(state.layer + dl, j + 1)
}

/// Precomputed cumulative kernels on a window, shared read-only by walkers.
/// Layers outside the window are drawn from the environment law on demand.
#[derive(Debug, Clone)]
pub struct KernelTable {
    m: usize,
    window: Window,
    cum: Vec<f64>,
    spec: Arc<EnvironmentSpec>,
}

impl KernelTable {
    pub fn new(env: &Environment) -> Self {
        Self::over(env, env.window())
    }

    /// Tables for `window`, which may differ from the environment's own.
    pub fn over(env: &Environment, window: Window) -> Self {
        let m = env.width();
        let mut cum = Vec::with_capacity(window.len() * 3 * m * m);
        for n in window.start..=window.end {
            cum.extend_from_slice(&cumulative_rows(&env.triple(n)));
        }
        Self {
            m,
            window,
            cum,
            spec: Arc::clone(env.spec_arc()),
        }
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn walker(&self, start: SiteState) -> Walker<'_> {
        assert!(
            (1..=self.m).contains(&start.rung),
            "rung {} outside 1..={}",
            start.rung,
            self.m
        );
        Walker {
            table: self,
            overflow: HashMap::new(),
            layer: start.layer,
            rung: start.rung - 1,
            steps: 0,
        }
    }
}

/// A single trajectory over a [`KernelTable`].
pub struct Walker<'a> {
    table: &'a KernelTable,
    overflow: HashMap<i64, Box<[f64]>>,
    layer: i64,
    rung: usize,
    steps: u64,
}

impl Walker<'_> {
    pub fn state(&self) -> SiteState {
        SiteState::new(self.layer, self.rung + 1)
    }

    pub fn layer(&self) -> i64 {
        self.layer
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let t = self.table;
        let stride = 3 * t.m;
        let u = rng.random::<f64>();
        let k = if t.window.contains(self.layer) {
            let base = ((self.layer - t.window.start) as usize * t.m + self.rung) * stride;
            pick(&t.cum[base..base + stride], u)
        } else {
            let spec = &t.spec;
            let layer = self.layer;
            let rows = self
                .overflow
                .entry(layer)
                .or_insert_with(|| cumulative_rows(&spec.draw_layer(layer).triple));
            pick(&rows[self.rung * stride..(self.rung + 1) * stride], u)
        };
        let (dl, j) = decode(k, t.m);
        self.layer += dl;
        self.rung = j;
        self.steps += 1;
    }
}

/// Options for [`run_to_layer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub cap: u64,
    pub occupation: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            cap: 1_000_000_000,
            occupation: false,
        }
    }
}

/// Outcome of one trajectory run until a target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkSummary {
    pub start: SiteState,
    pub target: i64,
    /// `T_j` for `j = start.layer ..= target`, as far as reached.
    pub hitting_times: Vec<u64>,
    /// Rung (1-based) at the first entrance into each of those layers.
    pub hitting_rungs: Vec<usize>,
    pub occupation: Option<BTreeMap<SiteState, u64>>,
    /// Deepest excursion below the running maximum layer.
    pub max_backtrack: i64,
    pub steps: u64,
    pub capped: bool,
}

impl WalkSummary {
    /// `T_j`, if layer `j` was reached.
    pub fn hitting_time(&self, j: i64) -> Option<u64> {
        let idx = usize::try_from(j - self.start.layer).ok()?;
        self.hitting_times.get(idx).copied()
    }

    pub fn hitting_rung(&self, j: i64) -> Option<usize> {
        let idx = usize::try_from(j - self.start.layer).ok()?;
        self.hitting_rungs.get(idx).copied()
    }
}

/// Runs until layer `target` is first reached or `opts.cap` steps elapse.
pub fn run_to_layer<R: Rng + ?Sized>(
    table: &KernelTable,
    start: SiteState,
    target: i64,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<WalkSummary> {
    if target < start.layer {
        return Err(Error::Range(format!(
            "target layer {target} is left of the start layer {}",
            start.layer
        )));
    }
    if opts.cap == 0 {
        return Err(Error::Range("step cap must be positive".into()));
    }
    let span = (target - start.layer) as usize + 1;
    let mut hitting_times = Vec::with_capacity(span);
    let mut hitting_rungs = Vec::with_capacity(span);
    hitting_times.push(0);
    hitting_rungs.push(start.rung);
    let mut occupation = opts.occupation.then(BTreeMap::new);
    if let Some(occ) = occupation.as_mut() {
        occ.insert(start, 1);
    }
    let mut w = table.walker(start);
    let mut max_layer = start.layer;
    let mut max_backtrack = 0;
    let mut capped = false;
    while max_layer < target {
        if w.steps >= opts.cap {
            capped = true;
            break;
        }
        w.step(rng);
        if w.layer > max_layer {
            max_layer = w.layer;
            hitting_times.push(w.steps);
            hitting_rungs.push(w.rung + 1);
        } else {
            max_backtrack = max_backtrack.max(max_layer - w.layer);
        }
        if let Some(occ) = occupation.as_mut() {
            *occ.entry(w.state()).or_insert(0) += 1;
        }
    }
    Ok(WalkSummary {
        start,
        target,
        hitting_times,
        hitting_rungs,
        occupation,
        max_backtrack,
        steps: w.steps,
        capped,
    })
}

/// `T_target` only, without bookkeeping. `None` when the cap is hit.
pub fn hitting_time<R: Rng + ?Sized>(
    table: &KernelTable,
    start: SiteState,
    target: i64,
    cap: u64,
    rng: &mut R,
) -> Option<u64> {
    let mut w = table.walker(start);
    while w.layer < target {
        if w.steps >= cap {
            return None;
        }
        w.step(rng);
    }
    Some(w.steps)
}

/// Position after exactly `t` steps.
pub fn position_after<R: Rng + ?Sized>(table: &KernelTable, start: SiteState, t: u64, rng: &mut R) -> SiteState {
    let mut w = table.walker(start);
    for _ in 0..t {
        w.step(rng);
    }
    w.state()
}

/// One CSV row per replica: seed, `T_n` list, steps, max backtrack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub hitting_times: String,
    pub steps: u64,
    pub max_backtrack: i64,
    pub capped: bool,
}

impl TrajectoryRecord {
    pub fn new(seed: u64, s: &WalkSummary) -> Self {
        let times: Vec<String> = s.hitting_times.iter().map(u64::to_string).collect();
        Self {
            seed,
            hitting_times: times.join(";"),
            steps: s.steps,
            max_backtrack: s.max_backtrack,
            capped: s.capped,
        }
    }
}

pub fn write_trajectories<W: Write>(out: W, rows: &[TrajectoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Truncation of the series over `H_j^i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeriesConfig {
    pub tail_tol: f64,
    /// Hard cap `ceil(cap_factor * ln n)` on the depth.
    pub cap_factor: f64,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self {
            tail_tol: 1e-12,
            cap_factor: 40.0,
        }
    }
}

impl SeriesConfig {
    pub fn depth_cap(&self, n: usize) -> usize {
        (self.cap_factor * (n.max(3) as f64).ln()).ceil() as usize
    }
}

/// Starting rung law on the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartLaw {
    /// Fixed 1-based rung.
    Rung(usize),
    /// Hitting distribution `y` of a walk coming from far left.
    Stationary,
}

impl Default for StartLaw {
    fn default() -> Self {
        StartLaw::Rung(1)
    }
}

fn start_row(props: &PropagatorSet, k: i64, start: StartLaw) -> Result<RowVec> {
    let m = props.width();
    match start {
        StartLaw::Rung(i) if (1..=m).contains(&i) => {
            let mut v = RowVec::zeros(m);
            v[i - 1] = 1.0;
            Ok(v)
        }
        StartLaw::Rung(i) => Err(Error::Range(format!("rung {i} outside 1..={m}"))),
        StartLaw::Stationary => Ok(props.y(k)?.clone()),
    }
}

/// Expected hitting times built from the crossing vectors
/// `t_j = sum_i H_j^i U_{j-i} 1` (expected time to first reach layer
/// `j + 1` from each rung of layer `j`).
#[derive(Debug, Clone)]
pub struct HittingExpectation {
    pub k: i64,
    pub n: i64,
    /// `t_j` for `j = k .. n`.
    pub t: Vec<ColVec>,
    /// `e_{k,n}(i) = E_omega T(n | (k, i))`.
    pub e: ColVec,
    /// `a_j = y_j t_j`, the quenched mean crossing time from far left.
    pub a_seq: Vec<f64>,
    /// Partial sums `E_omega T_j` from the start law, `j = k ..= n`.
    pub cumulative: Vec<f64>,
    pub depth: usize,
    /// Norm of the first omitted product.
    pub tail: f64,
}

impl HittingExpectation {
    pub fn t(&self, j: i64) -> Option<&ColVec> {
        self.t.get(usize::try_from(j - self.k).ok()?)
    }

    /// `e_{k,r}` for `k < r <= n`, by the backward recursion
    /// `e = t_j + zeta_j e`.
    pub fn e_to(&self, props: &PropagatorSet, r: i64) -> Result<ColVec> {
        if r <= self.k || r > self.n {
            return Err(Error::Range(format!("layer {r} not in ({}, {}]", self.k, self.n)));
        }
        let mut e = self.t(r - 1).unwrap().clone();
        for j in (self.k..r - 1).rev() {
            e = self.t(j).unwrap() + props.zeta(j)? * e;
        }
        Ok(e)
    }

    /// `E_omega T_j` from the start law.
    pub fn expected_time(&self, j: i64) -> Option<f64> {
        self.cumulative.get(usize::try_from(j - self.k).ok()?).copied()
    }
}

/// Evaluates `e_{k,n} = sum_{j=k}^{n-1} zeta_k ... zeta_{j-1} t_j`.
///
/// The crossing vectors obey `t_j = U_j 1 + A_j t_{j-1}`; the recursion is
/// started with `t = 0` at depth `D` left of `k`, where `D` is the first
/// depth with `||H_k^D|| < tail_tol` (capped at `ceil(40 ln n)`), which
/// truncates every series at depth at least `D`.
pub fn expected_hitting_vector(
    props: &PropagatorSet,
    k: i64,
    n: i64,
    start: StartLaw,
    cfg: &SeriesConfig,
) -> Result<HittingExpectation> {
    if n <= k {
        return Err(Error::Range(format!("need n > k, got k = {k}, n = {n}")));
    }
    let m = props.width();
    let cap = cfg.depth_cap((n - k) as usize);
    let avail = props.available();
    let mut h = Mat::identity(m, m);
    let mut depth = 0;
    while max_row_sum(&h) >= cfg.tail_tol && depth < cap {
        let layer = k - depth as i64;
        if !avail.contains(layer) {
            return Err(Error::Horizon(format!(
                "series at layer {k} needs depth {} but propagators start at {}",
                depth + 1,
                avail.start
            )));
        }
        h *= props.a(layer)?;
        depth += 1;
    }
    let tail = max_row_sum(&h);
    let one = ones(m);
    let mut t_run = ColVec::zeros(m);
    for j in (k - depth as i64 + 1)..k {
        t_run = props.u(j)? * &one + props.a(j)? * &t_run;
    }
    let len = (n - k) as usize;
    let mut t = Vec::with_capacity(len);
    for j in k..n {
        t_run = props.u(j)? * &one + props.a(j)? * &t_run;
        t.push(t_run.clone());
    }
    let mut e = t[len - 1].clone();
    for j in (k..n - 1).rev() {
        e = &t[(j - k) as usize] + props.zeta(j)? * e;
    }
    let mut a_seq = Vec::with_capacity(len);
    let mut cumulative = Vec::with_capacity(len + 1);
    cumulative.push(0.0);
    let mut pi = start_row(props, k, start)?;
    let mut acc = 0.0;
    for j in k..n {
        let tj = &t[(j - k) as usize];
        a_seq.push((props.y(j)? * tj)[0]);
        acc += (&pi * tj)[0];
        cumulative.push(acc);
        pi = &pi * props.zeta(j)?;
    }
    Ok(HittingExpectation {
        k,
        n,
        t,
        e,
        a_seq,
        cumulative,
        depth,
        tail,
    })
}

/// Relative slack for comparing truncated partial sums against `n`.
pub const DRIFT_REL_TOL: f64 = 1e-9;

/// `b_n = min { j : E_omega T_j >= n }`. Partial sums within
/// [`DRIFT_REL_TOL`] of `n` count as reaching it, since the truncated
/// series sits just below the exact value.
pub fn drift_index(h: &HittingExpectation, n: f64) -> Result<i64> {
    let level = n * (1.0 - DRIFT_REL_TOL);
    let idx = h.cumulative.partition_point(|&c| c < level);
    if idx == h.cumulative.len() {
        return Err(Error::Horizon(format!(
            "E T at the last computed layer {} is {} < {n}",
            h.n,
            h.cumulative.last().unwrap()
        )));
    }
    Ok(h.k + idx as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccupationMethod {
    AnalyticSeries,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationRow {
    pub layer: i64,
    pub rho: Vec<f64>,
    /// Monte Carlo standard errors; zeros for the analytic series.
    pub stderr: Vec<f64>,
}

impl OccupationRow {
    pub fn total(&self) -> f64 {
        self.rho.iter().sum()
    }
}

/// Expected occupation `rho_(k, i)` on a set of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationProfile {
    pub rows: Vec<OccupationRow>,
    pub method: OccupationMethod,
    /// Series depth, or the look-ahead after which MC stops counting a row.
    pub depth: usize,
    /// Norm of the first omitted product (analytic mode).
    pub tail: f64,
    pub replicas: usize,
}

impl OccupationProfile {
    /// Sparse CSV `k, i, value, stderr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "i", "value", "stderr"])?;
        for row in &self.rows {
            for (i, (v, s)) in row.rho.iter().zip(&row.stderr).enumerate() {
                w.write_record(&[row.layer.to_string(), (i + 1).to_string(), v.to_string(), s.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Where the walk whose occupation is measured comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupationStart {
    /// Walk entering from far left (hitting law `y_j` on each layer).
    Stationary,
    /// Walk started at a fixed site.
    Site(SiteState),
}

/// Analytic row `rho_(n, .) = sum_j pi_j H_j^{j-n} U_n` over `j >= n`
/// (and `j >= start layer`), where `pi_j` is the law of the rung at which
/// the walk first enters layer `j`.
pub fn expected_occupation_row(
    props: &PropagatorSet,
    n: i64,
    from: OccupationStart,
    cfg: &SeriesConfig,
) -> Result<OccupationProfile> {
    let m = props.width();
    let avail = props.available();
    let (j0, mut pi) = match from {
        OccupationStart::Stationary => (n, props.y(n)?.clone()),
        OccupationStart::Site(s) => {
            let pi = start_row(props, s.layer, StartLaw::Rung(s.rung))?;
            (n.max(s.layer), pi)
        }
    };
    if let OccupationStart::Site(s) = from {
        for j in s.layer..j0 {
            pi = &pi * props.zeta(j)?;
        }
    }
    // g = H_{j}^{j-n} = A_j ... A_{n+1}
    let mut g = Mat::identity(m, m);
    for j in (n + 1)..=j0 {
        g = props.a(j)? * g;
    }
    let cap = cfg.depth_cap(n.unsigned_abs().max(3) as usize);
    let mut acc = RowVec::zeros(m);
    let mut j = j0;
    let mut depth = 0;
    loop {
        let row = match from {
            OccupationStart::Stationary => props.y(j)?.clone(),
            OccupationStart::Site(_) => pi.clone(),
        };
        acc += row * &g;
        if max_row_sum(&g) < cfg.tail_tol || depth >= cap {
            break;
        }
        if let OccupationStart::Site(_) = from {
            pi = &pi * props.zeta(j)?;
        }
        j += 1;
        if !avail.contains(j) {
            return Err(Error::Horizon(format!(
                "occupation series at layer {n} needs layer {j}, propagators end at {}",
                avail.end
            )));
        }
        g = props.a(j)? * g;
        depth += 1;
    }
    let rho = acc * props.u(n)?;
    Ok(OccupationProfile {
        rows: vec![OccupationRow {
            layer: n,
            rho: rho.iter().copied().collect(),
            stderr: vec![0.0; m],
        }],
        method: OccupationMethod::AnalyticSeries,
        depth,
        tail: max_row_sum(&g),
        replicas: 0,
    })
}

/// Look-ahead after which visits to a row are ignored:
/// `max(ceil(ln^2 n), 25)` layers.
pub fn occupation_lookahead(n: i64) -> usize {
    let l = (n.unsigned_abs().max(2) as f64).ln();
    ((l * l).ceil() as usize).max(25)
}

/// Monte Carlo mean visit counts on layers `rows` for walks from `start`.
/// Visits to layer `k` stop counting once the walk has reached
/// `k + lookahead`.
pub fn mc_occupation(
    table: &KernelTable,
    start: SiteState,
    rows: Window,
    lookahead: usize,
    replicas: usize,
    seed: u64,
) -> Result<OccupationProfile> {
    if replicas < 2 {
        return Err(Error::Replicas("need at least two replicas".into()));
    }
    let m = table.width();
    let nrows = rows.len();
    let stop = rows.end.max(start.layer) + lookahead as i64;
    let counts = crate::par::replicate(replicas, |r| {
        let mut rng = rng::stream(seed, tag::WALK, r as u64);
        let mut c = vec![0u32; nrows * m];
        let mut w = table.walker(start);
        let mut max_layer = start.layer;
        loop {
            let l = w.layer;
            if rows.contains(l) && max_layer < l + lookahead as i64 {
                c[(l - rows.start) as usize * m + w.rung] += 1;
            }
            if l >= stop {
                break;
            }
            w.step(&mut rng);
            max_layer = max_layer.max(w.layer);
        }
        c
    });
    let mut out = Vec::with_capacity(nrows);
    for (ri, layer) in (rows.start..=rows.end).enumerate() {
        let mut rho = Vec::with_capacity(m);
        let mut se = Vec::with_capacity(m);
        for i in 0..m {
            let xs: Vec<f64> = counts.iter().map(|c| f64::from(c[ri * m + i])).collect();
            let (mean, var) = mean_var(&xs);
            rho.push(mean);
            se.push((var / replicas as f64).sqrt());
        }
        out.push(OccupationRow { layer, rho, stderr: se });
    }
    Ok(OccupationProfile {
        rows: out,
        method: OccupationMethod::MonteCarlo,
        depth: lookahead,
        tail: f64::NAN,
        replicas,
    })
}

/// Estimated `P(walk revisits layer 0 after reaching layer d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktrackTail {
    pub depths: Vec<usize>,
    pub prob: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Fitted decay rate `theta` of `P ~ C theta^d` over depths with
    /// positive estimates, and the prefactor `C`.
    pub theta: f64,
    pub c: f64,
    pub log_slope_se: f64,
    pub replicas: usize,
}

/// Annealed backtrack probabilities: every replica draws a fresh
/// environment and starts at `(0, 1)`. The walk is followed until layer
/// `max(depths) + 40`; visits below that horizon are what is counted.
pub fn backtrack_tail(spec: &EnvironmentSpec, replicas: usize, depths: &[usize], seed: u64) -> Result<BacktrackTail> {
    if replicas < 2 || depths.is_empty() {
        return Err(Error::Replicas("need replicas >= 2 and at least one depth".into()));
    }
    let d_max = *depths.iter().max().unwrap() as i64;
    let horizon = d_max + 40;
    let reach = crate::par::replicate(replicas, |r| -> Result<i64> {
        let env_spec = Arc::new(spec.with_seed(rng::stream_key(seed, tag::ENV_REPLICA, r as u64)));
        let env = Environment::new(env_spec, Window::new(-8, horizon)?)?;
        let table = KernelTable::new(&env);
        let mut rng = rng::stream(seed, tag::WALK, r as u64);
        let mut w = table.walker(SiteState::new(0, 1));
        // highest layer reached before the last visit to layer <= 0
        let (mut max_layer, mut reach) = (0i64, 0i64);
        while w.layer < horizon {
            w.step(&mut rng);
            max_layer = max_layer.max(w.layer);
            if w.layer <= 0 {
                reach = max_layer;
            }
        }
        Ok(reach)
    })
    .into_iter()
    .collect::<Result<Vec<i64>>>()?;
    let mut prob = Vec::with_capacity(depths.len());
    let mut stderr = Vec::with_capacity(depths.len());
    for &d in depths {
        let hits = reach.iter().filter(|&&r| r >= d as i64).count() as f64;
        let p = hits / replicas as f64;
        prob.push(p);
        stderr.push((p * (1.0 - p) / replicas as f64).sqrt());
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = depths
        .iter()
        .zip(&prob)
        .filter(|&(&d, &p)| d > 0 && p > 0.0)
        .map(|(&d, &p)| (d as f64, p.ln()))
        .unzip();
    let (theta, c, log_slope_se) = if xs.len() >= 2 {
        let (a, b, se) = linear_fit(&xs, &ys);
        (b.exp(), a.exp(), se)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(BacktrackTail {
        depths: depths.to_vec(),
        prob,
        stderr,
        theta,
        c,
        log_slope_se,
        replicas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{decode_site, reduce_bounded_jump, JumpLaw, UniformRows};
    use crate::rng::StreamRng;
    use crate::spectral::ZetaConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    fn constant_env(p: f64, window: Window) -> Environment {
        let spec = EnvironmentSpec::constant("c", MatrixTriple::scalar(p, 1.0 - p).unwrap(), 1).unwrap();
        Environment::new(Arc::new(spec), window).unwrap()
    }

    fn random_env(m: usize, seed: u64, window: Window) -> Environment {
        let gen = UniformRows {
            right: [0.3, 1.0],
            left: [0.1, 0.6],
            stay: [0.2, 0.8],
        };
        let spec = EnvironmentSpec::parametric("rand", m, gen, seed).unwrap();
        Environment::new(Arc::new(spec), window).unwrap()
    }

    fn props(env: &Environment, window: Window) -> PropagatorSet {
        PropagatorSet::build(env, window, 200, &ZetaConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_right_walk() {
        let env = constant_env(1.0, Window::new(0, 20).unwrap());
        let mut r = rng(1);
        assert_eq!(step_walk(&env, SiteState::new(0, 1), &mut r), SiteState::new(1, 1));
        let table = KernelTable::new(&env);
        let opts = RunOptions {
            occupation: true,
            ..RunOptions::default()
        };
        let s = run_to_layer(&table, SiteState::new(0, 1), 15, &opts, &mut r).unwrap();
        assert_eq!(s.hitting_times, (0..=15).collect::<Vec<u64>>());
        let occ = s.occupation.unwrap();
        assert_eq!(occ.len(), 16);
        assert!(occ.values().all(|&c| c == 1));
        assert!(!s.capped);
    }

    #[test]
    fn absorbing_row_keeps_state() {
        let t = MatrixTriple::from_rows(
            &[vec![0.0, 0.0], vec![0.5, 0.0]],
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
            &[vec![1.0, 0.0], vec![0.0, 0.5]],
        )
        .unwrap();
        let spec = EnvironmentSpec::constant("abs", t, 1).unwrap();
        let env = Environment::new(Arc::new(spec), Window::new(0, 3).unwrap()).unwrap();
        let mut r = rng(2);
        for _ in 0..100 {
            assert_eq!(step_walk(&env, SiteState::new(0, 1), &mut r), SiteState::new(0, 1));
        }
    }

    #[test]
    fn one_step_frequencies_match_kernel_row() {
        let env = random_env(2, 9, Window::new(-2, 2).unwrap());
        let t = env.triple(0).into_owned();
        let draws = 100_000usize;
        let mut r = rng(3);
        let mut counts = HashMap::new();
        for _ in 0..draws {
            *counts
                .entry(step_walk(&env, SiteState::new(0, 1), &mut r))
                .or_insert(0usize) += 1;
        }
        for (dl, mat) in [(1, t.p()), (0, t.r()), (-1, t.q())] {
            for j in 0..2 {
                let p = mat[(0, j)];
                let got = *counts.get(&SiteState::new(dl, j + 1)).unwrap_or(&0) as f64 / draws as f64;
                let sigma = (p * (1.0 - p) / draws as f64).sqrt();
                assert!((got - p).abs() <= 3.0 * sigma + 1e-12, "({dl},{j}): {got} vs {p}");
            }
        }
    }

    #[test]
    fn birth_death_mean_hitting_time() {
        let env = constant_env(0.75, Window::new(-50, 110).unwrap());
        let table = KernelTable::new(&env);
        let reps = 10_000;
        let times: Vec<f64> = crate::par::replicate(reps, |k| {
            let mut r = rng::stream(5, tag::WALK, k as u64);
            hitting_time(&table, SiteState::new(0, 1), 100, u64::MAX, &mut r).unwrap() as f64
        });
        let (mean, var) = mean_var(&times);
        let se = (var / reps as f64).sqrt();
        // E T_100 = 100 / (p - q)
        assert!((mean - 200.0).abs() <= 3.0 * se, "{mean} +- {se}");
    }

    #[test]
    fn capped_runs_are_flagged() {
        let env = constant_env(0.5, Window::new(-10, 10).unwrap());
        let table = KernelTable::new(&env);
        let s = run_to_layer(
            &table,
            SiteState::new(0, 1),
            1000,
            &RunOptions {
                cap: 50,
                occupation: false,
            },
            &mut rng(1),
        )
        .unwrap();
        assert!(s.capped);
        assert_eq!(s.steps, 50);
    }

    #[test]
    fn hitting_rungs_follow_zeta() {
        let env = random_env(2, 21, Window::new(-300, 20).unwrap());
        let p = props(&env, Window::new(0, 12).unwrap());
        let table = KernelTable::new(&env);
        let reps = 20_000;
        let runs = crate::par::replicate(reps, |k| {
            let mut r = rng::stream(8, tag::WALK, k as u64);
            run_to_layer(&table, SiteState::new(0, 1), 12, &RunOptions::default(), &mut r).unwrap()
        });
        for layer in 3..10 {
            let zeta = p.zeta(layer).unwrap();
            for i in 1..=2 {
                let from: Vec<&WalkSummary> = runs.iter().filter(|s| s.hitting_rung(layer) == Some(i)).collect();
                let total = from.len() as f64;
                for j in 1..=2 {
                    let hits = from.iter().filter(|s| s.hitting_rung(layer + 1) == Some(j)).count() as f64;
                    let z = zeta[(i - 1, j - 1)];
                    let sigma = (z * (1.0 - z) / total).sqrt();
                    assert!((hits / total - z).abs() <= 3.0 * sigma, "layer {layer} {i}->{j}");
                }
            }
        }
    }

    #[test]
    fn geometric_series_oracle() {
        let env = constant_env(0.75, Window::new(-200, 60).unwrap());
        let p = props(&env, Window::new(0, 50).unwrap());
        let h = expected_hitting_vector(&p, 0, 50, StartLaw::default(), &SeriesConfig::default()).unwrap();
        for &a in &h.a_seq {
            assert!((a - 2.0).abs() < 1e-9);
        }
        assert!((h.e[0] - 100.0).abs() < 1e-9);
        for n in 1..=50 {
            assert!((h.expected_time(n).unwrap() - 2.0 * n as f64).abs() < 1e-9);
        }
        assert!(h.tail < 1e-12);
    }

    #[test]
    fn scalar_additivity() {
        let spec = EnvironmentSpec::scalar_points("tp", &[(0.7, 0.5), (0.4, 0.5)], 4).unwrap();
        let env = Environment::new(Arc::new(spec), Window::new(-600, 100).unwrap()).unwrap();
        let p = props(&env, Window::new(0, 80).unwrap());
        let cfg = SeriesConfig::default();
        let full = expected_hitting_vector(&p, 0, 80, StartLaw::default(), &cfg).unwrap();
        let left = full.e_to(&p, 30).unwrap();
        let right = expected_hitting_vector(&p, 30, 80, StartLaw::default(), &cfg).unwrap();
        assert!((full.e[0] - left[0] - right.e[0]).abs() < 1e-8 * full.e[0]);
    }

    #[test]
    fn strip_additivity_through_hitting_law() {
        let env = random_env(3, 6, Window::new(-400, 60).unwrap());
        let p = props(&env, Window::new(0, 50).unwrap());
        let cfg = SeriesConfig::default();
        let full = expected_hitting_vector(&p, 0, 50, StartLaw::default(), &cfg).unwrap();
        let left = full.e_to(&p, 20).unwrap();
        let right = expected_hitting_vector(&p, 20, 50, StartLaw::default(), &cfg).unwrap();
        let mut zprod = Mat::identity(3, 3);
        for j in 0..20 {
            zprod *= p.zeta(j).unwrap();
        }
        let composed = left + zprod * &right.e;
        assert!((composed - &full.e).amax() < 1e-8 * full.e.amax());
        assert!(full.e.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn hitting_expectation_matches_simulation_on_random_strips() {
        let n = 40;
        for env_idx in 0..20u64 {
            let m = 1 + (env_idx % 3) as usize;
            let env = random_env(m, 100 + env_idx, Window::new(-400, n + 10).unwrap());
            let p = props(&env, Window::new(0, n).unwrap());
            let h = expected_hitting_vector(&p, 0, n, StartLaw::Rung(1), &SeriesConfig::default()).unwrap();
            let table = KernelTable::new(&env);
            let reps = 2_000;
            let times: Vec<f64> = crate::par::replicate(reps, |k| {
                let mut r = rng::stream(env_idx, tag::WALK, k as u64);
                hitting_time(&table, SiteState::new(0, 1), n, u64::MAX, &mut r).unwrap() as f64
            });
            let (mean, var) = mean_var(&times);
            let se = (var / reps as f64).sqrt();
            assert!(
                (mean - h.e[0]).abs() <= 3.0 * se,
                "env {env_idx} m={m}: {mean} +- {se} vs {}",
                h.e[0]
            );
            assert!((h.expected_time(n).unwrap() - h.e[0]).abs() < 1e-9 * h.e[0]);
        }
    }

    #[test]
    fn constant_occupation_is_one_over_drift() {
        let env = constant_env(0.75, Window::new(-300, 300).unwrap());
        let p = props(&env, Window::new(-50, 250).unwrap());
        let cfg = SeriesConfig::default();
        let stat = expected_occupation_row(&p, 10, OccupationStart::Stationary, &cfg).unwrap();
        assert!((stat.rows[0].rho[0] - 2.0).abs() < 1e-9);
        let start = OccupationStart::Site(SiteState::new(0, 1));
        let at = expected_occupation_row(&p, 10, start, &cfg).unwrap();
        assert!((at.rows[0].rho[0] - 2.0).abs() < 1e-9);
        let below = expected_occupation_row(&p, -3, start, &cfg).unwrap();
        assert!((below.rows[0].rho[0] - 2.0 / 27.0).abs() < 1e-9);
    }

    #[test]
    fn occupation_series_matches_simulation() {
        let env = random_env(2, 31, Window::new(-400, 200).unwrap());
        let p = props(&env, Window::new(-5, 150).unwrap());
        let table = KernelTable::new(&env);
        let start = SiteState::new(0, 1);
        let rows = Window::new(-2, 6).unwrap();
        let mc = mc_occupation(&table, start, rows, 60, 20_000, 17).unwrap();
        for row in &mc.rows {
            let an =
                expected_occupation_row(&p, row.layer, OccupationStart::Site(start), &SeriesConfig::default()).unwrap();
            for i in 0..2 {
                let diff = (an.rows[0].rho[i] - row.rho[i]).abs();
                assert!(
                    diff <= 3.0 * row.stderr[i] + 1e-12,
                    "row {} rung {i}: {} vs {} +- {}",
                    row.layer,
                    an.rows[0].rho[i],
                    row.rho[i],
                    row.stderr[i]
                );
            }
        }
        let mut buf = Vec::new();
        mc.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 9 * 2);
    }

    #[test]
    fn drift_index_scalar_and_monotone() {
        let env = constant_env(0.75, Window::new(-200, 700).unwrap());
        let p = props(&env, Window::new(0, 600).unwrap());
        let h = expected_hitting_vector(&p, 0, 600, StartLaw::default(), &SeriesConfig::default()).unwrap();
        assert_eq!(drift_index(&h, 10.0).unwrap(), 5);
        let mut last = 0;
        for n in 1..=1000 {
            let b = drift_index(&h, n as f64).unwrap();
            assert!(b >= last);
            last = b;
        }
        assert!(matches!(drift_index(&h, 1e6), Err(Error::Horizon(_))));
    }

    #[test]
    fn drift_index_grows_like_n_over_a() {
        let spec = EnvironmentSpec::scalar_points("s345", &[(0.8, 0.5), (0.45, 0.5)], 12).unwrap();
        let a = crate::spectral::exact_scalar_a(&spec).unwrap();
        let n = 100_000f64;
        let horizon = (1.3 * n / a) as i64;
        let env = Environment::new(Arc::new(spec), Window::new(-300, horizon + 10).unwrap()).unwrap();
        let p = props(&env, Window::new(0, horizon).unwrap());
        let h = expected_hitting_vector(&p, 0, horizon, StartLaw::default(), &SeriesConfig::default()).unwrap();
        let b = drift_index(&h, n).unwrap() as f64;
        assert!((b / n * a - 1.0).abs() < 0.02, "b/n = {}, 1/a = {}", b / n, 1.0 / a);
    }

    #[test]
    fn gamblers_ruin_backtrack_tail() {
        let spec = EnvironmentSpec::constant("c", MatrixTriple::scalar(0.75, 0.25).unwrap(), 1).unwrap();
        let depths: Vec<usize> = (0..=6).collect();
        let tail = backtrack_tail(&spec, 40_000, &depths, 3).unwrap();
        assert_eq!(tail.prob[0], 1.0);
        for (d, (&p, &se)) in tail.prob.iter().zip(&tail.stderr).enumerate().skip(1) {
            let exact = 3f64.powi(-(d as i32));
            assert!((p - exact).abs() <= 3.0 * se, "depth {d}: {p} vs {exact}");
        }
        assert!(tail.theta.ln() < 0.0);
    }

    /// Exact law of the position after `steps` steps, by forward
    /// recursion directly on Z and on the strip.
    #[test]
    fn bounded_jump_reduction_preserves_position_law() {
        let uniform: Vec<(i64, f64)> = (-2..=2).map(|d| (d, 0.2)).collect();
        let skewed = vec![(-2, 0.05), (-1, 0.15), (0, 0.2), (1, 0.25), (2, 0.35)];
        let law = JumpLaw {
            max_jump: 2,
            support: vec![(uniform, 0.5), (skewed, 0.5)],
            seed: 19,
        };
        let spec = Arc::new(reduce_bounded_jump(&law).unwrap());
        let env = Environment::new(Arc::clone(&spec), Window::new(-12, 12).unwrap()).unwrap();
        // site law on Z read from the digits of the layer's support index
        let site_law = |x: i64| {
            let (layer, rung) = crate::environment::encode_site(x, 2);
            let idx = env.draw(layer).support_index.unwrap();
            let digit = (idx / 2usize.pow(rung as u32 - 1)) % 2;
            law.support[digit].0.clone()
        };
        let steps = 10;
        let mut z_law: HashMap<i64, f64> = HashMap::from([(0, 1.0)]);
        let mut strip_law: HashMap<SiteState, f64> = HashMap::from([(SiteState::new(0, 1), 1.0)]);
        for _ in 0..steps {
            let mut next = HashMap::new();
            for (&x, &w) in &z_law {
                for (d, p) in site_law(x) {
                    *next.entry(x + d).or_insert(0.0) += w * p;
                }
            }
            z_law = next;
            let mut next = HashMap::new();
            for (&s, &w) in &strip_law {
                let t = env.triple(s.layer);
                for (dl, mat) in [(1, t.p()), (0, t.r()), (-1, t.q())] {
                    for j in 0..2 {
                        let p = mat[(s.rung - 1, j)];
                        if p > 0.0 {
                            *next.entry(SiteState::new(s.layer + dl, j + 1)).or_insert(0.0) += w * p;
                        }
                    }
                }
            }
            strip_law = next;
        }
        let mut decoded: HashMap<i64, f64> = HashMap::new();
        for (s, w) in strip_law {
            *decoded.entry(decode_site(s.layer, s.rung, 2)).or_insert(0.0) += w;
        }
        let keys: std::collections::BTreeSet<i64> = z_law.keys().chain(decoded.keys()).copied().collect();
        let tv: f64 = keys
            .iter()
            .map(|k| (z_law.get(k).unwrap_or(&0.0) - decoded.get(k).unwrap_or(&0.0)).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 1e-12, "tv = {tv}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn trajectory_bookkeeping(seed in any::<u64>(), m in 1usize..4, target in 1i64..40) {
            let env = random_env(m, seed, Window::new(-20, 50).unwrap());
            let table = KernelTable::new(&env);
            let opts = RunOptions { occupation: true, ..RunOptions::default() };
            let s = run_to_layer(&table, SiteState::new(0, 1), target, &opts, &mut rng(seed)).unwrap();
            prop_assert!(s.hitting_times.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(s.hitting_times.len() as i64, target + 1);
            let visits: u64 = s.occupation.as_ref().unwrap().values().sum();
            prop_assert_eq!(visits, s.steps + 1);
            prop_assert!(s.hitting_rungs.iter().all(|&r| (1..=m).contains(&r)));
        }
    }
}
