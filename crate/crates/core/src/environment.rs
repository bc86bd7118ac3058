//! Random environments on the strip `Z x {1..m}`.
//!
//! An environment is an i.i.d. sequence of triples `(P_n, Q_n, R_n)` of
//! nonnegative `m x m` matrices whose sum is stochastic: `P_n` moves the
//! walker one layer right, `Q_n` one layer left and `R_n` keeps it in the
//! layer. Layers are drawn lazily from a counter-based stream keyed on
//! `(master seed, n)`, so any layer can be regenerated in isolation.

use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_row_sum, min_entry, row_sums, solve_many, Mat};
use crate::rng::{self, tag};

/// Tolerance on row sums of `P + Q + R`. Rows are never renormalized.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTriple {
    p: Mat,
    q: Mat,
    r: Mat,
}

impl MatrixTriple {
    /// Builds a triple, checking only that all three blocks are `m x m`.
    /// Stochasticity and ellipticity are the business of [`validate_triple`].
    pub fn new(p: Mat, q: Mat, r: Mat) -> Result<Self> {
        let m = p.nrows();
        if m == 0 {
            return Err(Error::Structural("strip width must be at least 1".into()));
        }
        for (what, x) in [("P", &p), ("Q", &q), ("R", &r)] {
            if x.nrows() != m || x.ncols() != m {
                return Err(Error::Dimension {
                    what,
                    expected: m,
                    rows: x.nrows(),
                    cols: x.ncols(),
                });
            }
        }
        Ok(Self { p, q, r })
    }

    /// Builds a triple from row-major nested rows.
    pub fn from_rows(p: &[Vec<f64>], q: &[Vec<f64>], r: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_mat(p, "P")?, rows_to_mat(q, "Q")?, rows_to_mat(r, "R")?)
    }

    /// Nearest-neighbour walk on `Z` (`m = 1`) with holding probability `1 - p - q`.
    pub fn scalar(p: f64, q: f64) -> Result<Self> {
        let r = 1.0 - p - q;
        Self::new(
            Mat::from_element(1, 1, p),
            Mat::from_element(1, 1, q),
            Mat::from_element(1, 1, r.max(0.0)),
        )
    }

    pub fn width(&self) -> usize {
        self.p.nrows()
    }

    pub fn p(&self) -> &Mat {
        &self.p
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn r(&self) -> &Mat {
        &self.r
    }

    fn row_sums(&self) -> Vec<f64> {
        row_sums(&(&self.p + &self.q + &self.r))
    }

    /// Fails loudly unless entries are nonnegative and rows sum to one.
    pub fn ensure_stochastic(&self) -> Result<()> {
        if [&self.p, &self.q, &self.r].iter().any(|x| min_entry(x) < 0.0) {
            return Err(Error::Structural("negative transition probability".into()));
        }
        for (i, s) in self.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > STOCHASTIC_TOL || !s.is_finite() {
                return Err(Error::Structural(format!("row {} of P+Q+R sums to {s}, not 1", i + 1)));
            }
        }
        Ok(())
    }

    fn hash_into<H: Hasher>(&self, h: &mut H) {
        for x in self.p.iter().chain(self.q.iter()).chain(self.r.iter()) {
            x.to_bits().hash(h);
        }
    }
}

fn rows_to_mat(rows: &[Vec<f64>], what: &'static str) -> Result<Mat> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::Structural(format!("matrix {what} is empty")));
    }
    for row in rows {
        if row.len() != m {
            return Err(Error::Dimension {
                what,
                expected: m,
                rows: m,
                cols: row.len(),
            });
        }
    }
    Ok(Mat::from_fn(m, m, |i, j| rows[i][j]))
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// The `eps` of the uniform ellipticity condition and the laziness bound `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticityParams {
    pub eps: f64,
    #[serde(default)]
    pub kappa: f64,
}

impl EllipticityParams {
    pub fn new(eps: f64, kappa: f64) -> Result<Self> {
        let p = Self { eps, kappa };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Range(format!("eps = {} not in (0,1)", self.eps)));
        }
        if !(self.kappa >= 0.0 && self.kappa < 1.0) {
            return Err(Error::Range(format!("kappa = {} not in [0,1)", self.kappa)));
        }
        Ok(())
    }
}

/// One condition of a [`ValidationReport`]: the observed value and whether it passed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Condition {
    pub value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Largest deviation of a row sum of `P+Q+R` from one (and nonnegativity).
    pub stochastic: Condition,
    /// `||R||` (max row sum) against `1 - eps`.
    pub r_norm: Condition,
    /// Smallest entry of `(I-R)^{-1} P` against `eps`; value is NaN if `I-R` is singular.
    pub right_ellipticity: Condition,
    /// Smallest entry of `(I-R)^{-1} Q` against `eps`.
    pub left_ellipticity: Condition,
    /// Smallest diagonal entry of `R` against `kappa`.
    pub laziness: Condition,
}

impl ValidationReport {
    pub fn passes_c2(&self) -> bool {
        self.r_norm.pass && self.right_ellipticity.pass && self.left_ellipticity.pass
    }

    pub fn passes_c3(&self) -> bool {
        self.laziness.pass
    }

    pub fn passes_all(&self) -> bool {
        self.stochastic.pass && self.passes_c2() && self.passes_c3()
    }
}

/// Checks stochasticity, uniform ellipticity and laziness of a triple.
/// Singular `I - R` is reported as an ellipticity failure.
pub fn validate_triple(t: &MatrixTriple, e: &EllipticityParams) -> ValidationReport {
    let m = t.width();
    let negative = [t.p(), t.q(), t.r()].iter().any(|x| min_entry(x) < 0.0);
    let dev = t.row_sums().into_iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let stochastic = Condition {
        value: dev,
        pass: !negative && dev <= STOCHASTIC_TOL,
    };
    let r_norm_value = max_row_sum(t.r());
    let r_norm = Condition {
        value: r_norm_value,
        pass: r_norm_value < 1.0 - e.eps,
    };
    let lhs = Mat::identity(m, m) - t.r();
    let (right, left) = match solve_many(&lhs, &[t.p(), t.q()]) {
        Some(sol) if sol.iter().all(|x| x.iter().all(|v| v.is_finite())) => (min_entry(&sol[0]), min_entry(&sol[1])),
        _ => (f64::NAN, f64::NAN),
    };
    let diag = (0..m).map(|i| t.r()[(i, i)]).fold(f64::INFINITY, f64::min);
    ValidationReport {
        stochastic,
        r_norm,
        right_ellipticity: Condition {
            value: right,
            pass: right > e.eps,
        },
        left_ellipticity: Condition {
            value: left,
            pass: left > e.eps,
        },
        laziness: Condition {
            value: diag,
            pass: diag >= e.kappa,
        },
    }
}

/// A support point of a finitely supported layer law.
#[derive(Debug, Clone)]
pub struct SupportPoint {
    pub triple: Arc<MatrixTriple>,
    pub weight: f64,
}

/// Parametric layer law: every entry of `P`, `Q` and `R` is drawn uniformly
/// from its range and each row of the block `(P | Q | R)` is then scaled to
/// sum to one. Positive lower bounds give uniform ellipticity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformRows {
    pub right: [f64; 2],
    pub left: [f64; 2],
    pub stay: [f64; 2],
}

impl UniformRows {
    fn check(&self) -> Result<()> {
        for (name, [lo, hi]) in [("right", self.right), ("left", self.left), ("stay", self.stay)] {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Range(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.right[0] <= 0.0 || self.left[0] <= 0.0 {
            return Err(Error::Range(
                "right and left ranges must be bounded away from zero".into(),
            ));
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, m: usize, rng: &mut R) -> MatrixTriple {
        let mut draw_block =
            |[lo, hi]: [f64; 2]| Mat::from_fn(m, m, |_, _| if hi > lo { rng.random_range(lo..hi) } else { lo });
        let mut p = draw_block(self.right);
        let mut q = draw_block(self.left);
        let mut r = draw_block(self.stay);
        for i in 0..m {
            let s: f64 = p.row(i).sum() + q.row(i).sum() + r.row(i).sum();
            p.row_mut(i).unscale_mut(s);
            q.row_mut(i).unscale_mut(s);
            r.row_mut(i).unscale_mut(s);
            // absorb rounding into the diagonal of R so the row sums to one
            let resid = 1.0 - (p.row(i).sum() + q.row(i).sum() + r.row(i).sum());
            r[(i, i)] += resid;
        }
        MatrixTriple { p, q, r }
    }
}

#[derive(Debug, Clone)]
pub enum LayerLaw {
    Support(Vec<SupportPoint>),
    UniformRows(UniformRows),
}

/// Full description of an i.i.d. environment law plus its master seed.
#[derive(Debug, Clone)]
pub struct EnvironmentSpec {
    id: String,
    width: usize,
    law: LayerLaw,
    seed: u64,
    ellipticity: Option<EllipticityParams>,
    cumulative: Vec<f64>,
}

impl EnvironmentSpec {
    pub fn finite(id: impl Into<String>, support: Vec<(MatrixTriple, f64)>, seed: u64) -> Result<Self> {
        let support = support
            .into_iter()
            .map(|(t, w)| SupportPoint {
                triple: Arc::new(t),
                weight: w,
            })
            .collect();
        Self::build(id.into(), LayerLaw::Support(support), None, seed, None)
    }

    pub fn parametric(id: impl Into<String>, width: usize, gen: UniformRows, seed: u64) -> Result<Self> {
        Self::build(id.into(), LayerLaw::UniformRows(gen), Some(width), seed, None)
    }

    /// Constant environment: every layer equals `t`.
    pub fn constant(id: impl Into<String>, t: MatrixTriple, seed: u64) -> Result<Self> {
        Self::finite(id, vec![(t, 1.0)], seed)
    }

    /// `m = 1` law putting weight `w_k` on the nearest-neighbour walk with
    /// right probability `p_k` and left probability `1 - p_k`.
    pub fn scalar_points(id: impl Into<String>, points: &[(f64, f64)], seed: u64) -> Result<Self> {
        let support = points
            .iter()
            .map(|&(p, w)| Ok((MatrixTriple::scalar(p, 1.0 - p)?, w)))
            .collect::<Result<Vec<_>>>()?;
        Self::finite(id, support, seed)
    }

    fn build(
        id: String,
        law: LayerLaw,
        width: Option<usize>,
        seed: u64,
        ellipticity: Option<EllipticityParams>,
    ) -> Result<Self> {
        let (width, cumulative) = match &law {
            LayerLaw::Support(points) => {
                if points.is_empty() {
                    return Err(Error::Structural("empty support".into()));
                }
                let m = points[0].triple.width();
                let mut acc = 0.0;
                let mut cumulative = Vec::with_capacity(points.len());
                for pt in points {
                    if pt.triple.width() != m {
                        return Err(Error::Structural("support triples differ in width".into()));
                    }
                    if !(pt.weight >= 0.0) {
                        return Err(Error::Structural(format!("negative weight {}", pt.weight)));
                    }
                    pt.triple.ensure_stochastic()?;
                    acc += pt.weight;
                    cumulative.push(acc);
                }
                if (acc - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::Structural(format!("support probabilities sum to {acc}, not 1")));
                }
                (m, cumulative)
            }
            LayerLaw::UniformRows(g) => {
                g.check()?;
                let m = width.unwrap_or(0);
                if m == 0 {
                    return Err(Error::Structural("strip width must be at least 1".into()));
                }
                (m, Vec::new())
            }
        };
        let spec = Self {
            id,
            width,
            law,
            seed,
            ellipticity: None,
            cumulative,
        };
        match ellipticity {
            Some(e) => spec.with_ellipticity(e),
            None => Ok(spec),
        }
    }

    /// Attaches ellipticity bounds; every support triple must satisfy them.
    pub fn with_ellipticity(mut self, e: EllipticityParams) -> Result<Self> {
        e.check()?;
        if let LayerLaw::Support(points) = &self.law {
            for (k, pt) in points.iter().enumerate() {
                let rep = validate_triple(&pt.triple, &e);
                if !rep.passes_all() {
                    return Err(Error::Structural(format!(
                        "support point {k} violates the ellipticity conditions: {rep:?}"
                    )));
                }
            }
        }
        self.ellipticity = Some(e);
        Ok(self)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seed = seed;
        s
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn law(&self) -> &LayerLaw {
        &self.law
    }

    pub fn ellipticity(&self) -> Option<EllipticityParams> {
        self.ellipticity
    }

    pub fn support(&self) -> Option<&[SupportPoint]> {
        match &self.law {
            LayerLaw::Support(s) => Some(s),
            LayerLaw::UniformRows(_) => None,
        }
    }

    /// Draws layer `n`. Pure in `(seed, n)`.
    pub fn draw_layer(&self, n: i64) -> LayerDraw {
        let mut rng = rng::stream(self.seed, tag::LAYER, n as u64);
        match &self.law {
            LayerLaw::Support(points) => {
                let idx = if points.len() == 1 {
                    0
                } else {
                    let u: f64 = rng.random();
                    self.cumulative.iter().position(|&c| u < c).unwrap_or(points.len() - 1)
                };
                LayerDraw {
                    triple: Arc::clone(&points[idx].triple),
                    support_index: Some(idx),
                }
            }
            LayerLaw::UniformRows(g) => LayerDraw {
                triple: Arc::new(g.draw(self.width, &mut rng)),
                support_index: None,
            },
        }
    }

    /// Parses the structured text form (TOML). See [`SpecFile`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: SpecFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.into_spec()
    }

    pub fn to_file(&self) -> SpecFile {
        let (support, generator, width) = match &self.law {
            LayerLaw::Support(points) => (
                points
                    .iter()
                    .map(|pt| SupportEntry {
                        weight: pt.weight,
                        p: mat_to_rows(pt.triple.p()),
                        q: mat_to_rows(pt.triple.q()),
                        r: mat_to_rows(pt.triple.r()),
                    })
                    .collect(),
                None,
                None,
            ),
            LayerLaw::UniformRows(g) => (Vec::new(), Some(*g), Some(self.width)),
        };
        SpecFile {
            id: self.id.clone(),
            width,
            seed: self.seed,
            ellipticity: self.ellipticity,
            support,
            generator,
        }
    }
}

/// Serialized form of an [`EnvironmentSpec`]:
///
/// ```toml
/// id = "two-point"
/// seed = 42
/// [ellipticity]
/// eps = 0.05
/// [[support]]
/// weight = 0.5
/// P = [[0.7]]
/// Q = [[0.3]]
/// R = [[0.0]]
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipticity: Option<EllipticityParams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub support: Vec<SupportEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<UniformRows>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportEntry {
    pub weight: f64,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

impl SpecFile {
    pub fn into_spec(self) -> Result<EnvironmentSpec> {
        let law = match (self.support.is_empty(), self.generator) {
            (false, None) => {
                let points = self
                    .support
                    .iter()
                    .map(|e| {
                        Ok(SupportPoint {
                            triple: Arc::new(MatrixTriple::from_rows(&e.p, &e.q, &e.r)?),
                            weight: e.weight,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if let Some(w) = self.width {
                    if points[0].triple.width() != w {
                        return Err(Error::Structural(format!(
                            "declared width {w} does not match support matrices"
                        )));
                    }
                }
                LayerLaw::Support(points)
            }
            (true, Some(g)) => LayerLaw::UniformRows(g),
            (false, Some(_)) => return Err(Error::Config("give either `support` or `generator`, not both".into())),
            (true, None) => return Err(Error::Config("spec needs `support` or `generator`".into())),
        };
        EnvironmentSpec::build(self.id, law, self.width, self.seed, self.ellipticity)
    }
}

/// A drawn layer and, for finitely supported laws, which support point it is.
#[derive(Debug, Clone)]
pub struct LayerDraw {
    pub triple: Arc<MatrixTriple>,
    pub support_index: Option<usize>,
}

/// Inclusive integer interval of layer indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if end < start {
            return Err(Error::Range(format!("empty window [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, n: i64) -> bool {
        self.start <= n && n <= self.end
    }

    pub fn union(&self, other: &Window) -> Window {
        Window {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }
}

/// A sampled environment. The window is materialized eagerly; layers outside
/// it are regenerated on demand from the same counter-based stream, so the
/// value is immutable and can be shared freely between threads.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: Arc<EnvironmentSpec>,
    window: Window,
    layers: Vec<LayerDraw>,
}

/// Samples the layers of `spec` on `window`.
pub fn sample_environment(spec: &EnvironmentSpec, window: Window) -> Result<Environment> {
    Environment::new(Arc::new(spec.clone()), window)
}

impl Environment {
    pub fn new(spec: Arc<EnvironmentSpec>, window: Window) -> Result<Self> {
        Window::new(window.start, window.end)?;
        let layers = (window.start..=window.end).map(|n| spec.draw_layer(n)).collect();
        Ok(Self { spec, window, layers })
    }

    /// Returns an environment on the union of the current and the requested
    /// window. Already materialized layers are reused, not redrawn.
    pub fn extended(&self, window: Window) -> Environment {
        let w = self.window.union(&window);
        let layers = (w.start..=w.end)
            .map(|n| {
                if self.window.contains(n) {
                    self.layers[(n - self.window.start) as usize].clone()
                } else {
                    self.spec.draw_layer(n)
                }
            })
            .collect();
        Environment {
            spec: Arc::clone(&self.spec),
            window: w,
            layers,
        }
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn spec_arc(&self) -> &Arc<EnvironmentSpec> {
        &self.spec
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn draw(&self, n: i64) -> Cow<'_, LayerDraw> {
        if self.window.contains(n) {
            Cow::Borrowed(&self.layers[(n - self.window.start) as usize])
        } else {
            Cow::Owned(self.spec.draw_layer(n))
        }
    }

    pub fn triple(&self, n: i64) -> Cow<'_, MatrixTriple> {
        match self.draw(n) {
            Cow::Borrowed(d) => Cow::Borrowed(&*d.triple),
            Cow::Owned(d) => Cow::Owned((*d.triple).clone()),
        }
    }

    /// Hash of the materialized window; a function of `(spec, seed, window)` only.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.window.hash(&mut h);
        for d in &self.layers {
            d.triple.hash_into(&mut h);
        }
        h.finish()
    }

    /// Validation reports for every materialized layer.
    pub fn validate(&self, e: &EllipticityParams) -> Vec<(i64, ValidationReport)> {
        (self.window.start..=self.window.end)
            .zip(&self.layers)
            .map(|(n, d)| (n, validate_triple(&d.triple, e)))
            .collect()
    }
}

/// Per-site jump distribution for a walk on `Z` with jumps bounded by `m`:
/// a list of `(jump, probability)` pairs.
pub type SiteLaw = Vec<(i64, f64)>;

/// i.i.d. law of site jump distributions: finitely many site laws with weights.
#[derive(Debug, Clone)]
pub struct JumpLaw {
    pub max_jump: usize,
    pub support: Vec<(SiteLaw, f64)>,
    pub seed: u64,
}

/// Maps a site of `Z` to its strip coordinates `(layer, rung)` with 1-based rung.
pub fn encode_site(x: i64, m: usize) -> (i64, usize) {
    let m = m as i64;
    (x.div_euclid(m), (x.rem_euclid(m) + 1) as usize)
}

pub fn decode_site(layer: i64, rung: usize, m: usize) -> i64 {
    layer * m as i64 + rung as i64 - 1
}

/// Rewrites a bounded-jump walk on `Z` as a nearest-layer walk on the strip
/// of width `m` by grouping `m` consecutive sites into a layer. Site
/// `x` becomes `(floor(x/m), (x mod m) + 1)`. Since site laws are i.i.d. and
/// blocks are disjoint, layers are i.i.d. with the product law over the
/// `m` sites of a block.
pub fn reduce_bounded_jump(law: &JumpLaw) -> Result<EnvironmentSpec> {
    let m = law.max_jump;
    if m == 0 {
        return Err(Error::Structural("jump bound must be at least 1".into()));
    }
    if law.support.is_empty() {
        return Err(Error::Structural("empty jump law".into()));
    }
    for (site, _) in &law.support {
        for &(d, _) in site {
            if d.unsigned_abs() as usize > m {
                return Err(Error::JumpExceedsWidth { jump: d, bound: m });
            }
        }
    }
    let k = law.support.len();
    let combos = k
        .checked_pow(m as u32)
        .filter(|&c| c <= 1 << 16)
        .ok_or_else(|| Error::Structural(format!("{k}^{m} layer configurations is too many to enumerate")))?;
    let mut support = Vec::with_capacity(combos);
    for c in 0..combos {
        // digit i of c (base k) is the site law of rung i+1
        let mut p = Mat::zeros(m, m);
        let mut q = Mat::zeros(m, m);
        let mut r = Mat::zeros(m, m);
        let mut weight = 1.0;
        let mut code = c;
        for i in 0..m {
            let (site, w) = &law.support[code % k];
            code /= k;
            weight *= w;
            for &(d, prob) in site {
                let (layer, rung) = encode_site(i as i64 + d, m);
                let target = match layer {
                    1 => &mut p,
                    0 => &mut r,
                    -1 => &mut q,
                    _ => unreachable!("jumps bounded by m stay in adjacent layers"),
                };
                target[(i, rung - 1)] += prob;
            }
        }
        support.push((MatrixTriple::new(p, q, r)?, weight));
    }
    EnvironmentSpec::finite(format!("bounded-jump-m{m}"), support, law.seed)
}
