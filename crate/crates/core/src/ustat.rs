//! First- and second-order U-statistic moment estimators.
//!
//! Every second-order moment has the kernel `f_i X_iᵀ Σ⁻¹ X_j g_j` for some pair
//! of per-row weights. With `a = Σ f_i X_i` and `b = Σ g_i X_i` the sum over
//! ordered pairs `i ≠ j` collapses to `aᵀΣ⁻¹b − Σ_i f_i g_i X_iᵀΣ⁻¹X_i`, so each
//! moment costs O(np) once the rows are whitened by the Cholesky factor of Σ.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Immutable n×p design with response `y` and optional binary/real column `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    a: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, a: Option<DVector<f64>>) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(Error::EmptyDataset(format!("design is {n}x{p}")));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "y has length {} but X has {n} rows",
                y.len()
            )));
        }
        if let Some(a) = &a {
            if a.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "a has length {} but X has {n} rows",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue("column a".into()));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("design matrix".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("column y".into()));
        }
        Ok(Dataset { x, y, a })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn a(&self) -> Option<&DVector<f64>> {
        self.a.as_ref()
    }

    pub fn require_a(&self) -> Result<&DVector<f64>> {
        self.a.as_ref().ok_or(Error::MissingResponseA)
    }

    /// Rows `start..end` as a new dataset.
    pub fn rows(&self, start: usize, end: usize) -> Result<Dataset> {
        let len = end.saturating_sub(start);
        Dataset::new(
            self.x.rows(start, len).into_owned(),
            self.y.rows(start, len).into_owned(),
            self.a.as_ref().map(|a| a.rows(start, len).into_owned()),
        )
    }

    /// Reorders rows so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Dataset> {
        let n = self.n();
        if perm.len() != n {
            return Err(Error::DimensionMismatch("permutation length".into()));
        }
        let x = DMatrix::from_fn(n, self.p(), |i, j| self.x[(perm[i], j)]);
        let y = DVector::from_fn(n, |i, _| self.y[perm[i]]);
        let a = self
            .a
            .as_ref()
            .map(|a| DVector::from_fn(n, |i, _| a[perm[i]]));
        Dataset::new(x, y, a)
    }

    /// Reads the CSV layout `y[,a],x1,…,xp` (columns located by header name).
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Dataset> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut y_col = None;
        let mut a_col = None;
        let mut x_cols: Vec<(usize, usize)> = Vec::new();
        for (idx, h) in headers.iter().enumerate() {
            match h {
                "y" => y_col = Some(idx),
                "a" => a_col = Some(idx),
                other => {
                    let k = other
                        .strip_prefix('x')
                        .and_then(|s| s.parse::<usize>().ok())
                        .filter(|k| *k >= 1)
                        .ok_or_else(|| Error::Parse(format!("unexpected column `{other}`")))?;
                    x_cols.push((k, idx));
                }
            }
        }
        let y_col = y_col.ok_or_else(|| Error::Parse("missing column `y`".into()))?;
        x_cols.sort();
        for (expected, (k, _)) in x_cols.iter().enumerate() {
            if *k != expected + 1 {
                return Err(Error::Parse(format!(
                    "covariate columns must be x1..xp without gaps; found x{k}"
                )));
            }
        }
        let p = x_cols.len();
        if p == 0 {
            return Err(Error::Parse("no covariate columns x1..xp".into()));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut as_ = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |idx: usize| -> Result<f64> {
                let tok = rec.get(idx).unwrap_or("");
                let v: f64 = tok.parse().map_err(|_| {
                    Error::Parse(format!("row {}: `{tok}` is not a number", line + 2))
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue(format!("row {}", line + 2)));
                }
                Ok(v)
            };
            ys.push(field(y_col)?);
            if let Some(ac) = a_col {
                as_.push(field(ac)?);
            }
            for &(_, idx) in &x_cols {
                xs.push(field(idx)?);
            }
        }
        let n = ys.len();
        if n == 0 {
            return Err(Error::EmptyDataset("no data rows".into()));
        }
        Dataset::new(
            DMatrix::from_row_slice(n, p, &xs),
            DVector::from_vec(ys),
            a_col.map(|_| DVector::from_vec(as_)),
        )
    }

    pub fn to_csv_writer<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["y".to_string()];
        if self.a.is_some() {
            header.push("a".into());
        }
        header.extend((1..=self.p()).map(|k| format!("x{k}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![self.y[i].to_string()];
            if let Some(a) = &self.a {
                row.push(a[i].to_string());
            }
            row.extend((0..self.p()).map(|j| self.x[(i, j)].to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    KnownSigma,
    UnknownSigmaSplit,
}

#[derive(Debug, Clone)]
enum SigmaFactor {
    Identity(usize),
    Cholesky { sigma: DMatrix<f64>, l: DMatrix<f64> },
}

/// Covariate model: whether μ is known to be zero and how Σ is known.
#[derive(Debug, Clone)]
pub struct DesignModel {
    pub mu_known_zero: bool,
    mode: SigmaMode,
    factor: Option<SigmaFactor>,
}

impl DesignModel {
    pub fn identity(p: usize, mu_known_zero: bool) -> Self {
        DesignModel {
            mu_known_zero,
            mode: SigmaMode::KnownSigma,
            factor: Some(SigmaFactor::Identity(p)),
        }
    }

    /// Known Σ. The lower Cholesky factor is computed once here.
    pub fn known(sigma: DMatrix<f64>, mu_known_zero: bool) -> Result<Self> {
        let p = sigma.nrows();
        if sigma.ncols() != p || p == 0 {
            return Err(Error::DimensionMismatch(format!(
                "sigma is {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("sigma".into()));
        }
        for i in 0..p {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 {
                    return Err(Error::SingularSigma(format!(
                        "sigma is not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SingularSigma("sigma is not positive definite".into()))?;
        let l = chol.l();
        Ok(DesignModel {
            mu_known_zero,
            mode: SigmaMode::KnownSigma,
            factor: Some(SigmaFactor::Cholesky { sigma, l }),
        })
    }

    /// Σ unknown; estimated from a held-out half of the sample.
    pub fn unknown_split() -> Self {
        DesignModel {
            mu_known_zero: true,
            mode: SigmaMode::UnknownSigmaSplit,
            factor: None,
        }
    }

    pub fn mode(&self) -> SigmaMode {
        self.mode
    }

    pub fn p(&self) -> Option<usize> {
        match &self.factor {
            Some(SigmaFactor::Identity(p)) => Some(*p),
            Some(SigmaFactor::Cholesky { l, .. }) => Some(l.nrows()),
            None => None,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.factor, Some(SigmaFactor::Identity(_)))
    }

    /// Σ as a dense matrix (materialized for the identity case).
    pub fn sigma(&self) -> Option<DMatrix<f64>> {
        match &self.factor {
            Some(SigmaFactor::Identity(p)) => Some(DMatrix::identity(*p, *p)),
            Some(SigmaFactor::Cholesky { sigma, .. }) => Some(sigma.clone()),
            None => None,
        }
    }

    fn check(&self, p: usize) -> Result<&SigmaFactor> {
        let f = self.factor.as_ref().ok_or_else(|| {
            Error::InvalidOption("moment collection needs a design with known sigma".into())
        })?;
        let dp = self.p().unwrap_or(0);
        if dp != p {
            return Err(Error::DimensionMismatch(format!(
                "sigma is {dp}x{dp} but the data has p = {p}"
            )));
        }
        Ok(f)
    }
}

/// Data whitened by the Cholesky factor of Σ, so that `X_iᵀΣ⁻¹X_j = Z_iᵀZ_j`.
pub struct MomentEngine<'a> {
    whitened: Whitened<'a>,
    factor: &'a SigmaFactor,
    norms: DVector<f64>,
    n: usize,
    p: usize,
}

enum Whitened<'a> {
    /// Σ = I: the rows are used as they are (n×p).
    Rows(&'a DMatrix<f64>),
    /// Transposed whitened data `L⁻¹Xᵀ` (p×n).
    Columns(DMatrix<f64>),
}

impl<'a> MomentEngine<'a> {
    pub fn new(x: &'a DMatrix<f64>, design: &'a DesignModel) -> Result<Self> {
        let (n, p) = x.shape();
        let factor = design.check(p)?;
        let (whitened, norms) = match factor {
            SigmaFactor::Identity(_) => {
                let mut norms = DVector::zeros(n);
                for col in x.column_iter() {
                    for (r, v) in norms.iter_mut().zip(col.iter()) {
                        *r += v * v;
                    }
                }
                (Whitened::Rows(x), norms)
            }
            SigmaFactor::Cholesky { l, .. } => {
                let mut zt = x.transpose();
                if !l.solve_lower_triangular_mut(&mut zt) {
                    return Err(Error::SingularSigma("triangular solve failed".into()));
                }
                let norms = DVector::from_iterator(n, zt.column_iter().map(|c| c.norm_squared()));
                (Whitened::Columns(zt), norms)
            }
        };
        Ok(MomentEngine {
            whitened,
            factor,
            norms,
            n,
            p,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// `Σ_i f_i Z_i` in whitened coordinates.
    pub fn aggregate(&self, f: &DVector<f64>) -> DVector<f64> {
        match &self.whitened {
            Whitened::Rows(x) => x.tr_mul(f),
            Whitened::Columns(zt) => zt * f,
        }
    }

    fn check_weights(&self, f: &DVector<f64>) -> Result<()> {
        if f.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "weight vector has length {} but n = {}",
                f.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Second-order U-statistic with kernel `f_i X_iᵀΣ⁻¹X_j g_j`, symmetrized.
    pub fn ustat2(&self, f: &DVector<f64>, g: &DVector<f64>) -> Result<f64> {
        self.check_weights(f)?;
        self.check_weights(g)?;
        if self.n < 2 {
            return Err(Error::EmptyDataset("second-order U-statistic needs n >= 2".into()));
        }
        let a = self.aggregate(f);
        let b = self.aggregate(g);
        Ok(self.ustat2_from(&a, &b, f, g))
    }

    /// As [`Self::ustat2`] but reusing precomputed aggregates.
    pub fn ustat2_from(
        &self,
        a: &DVector<f64>,
        b: &DVector<f64>,
        f: &DVector<f64>,
        g: &DVector<f64>,
    ) -> f64 {
        let cross = 0.5 * (a.dot(b) + b.dot(a));
        let mut diag = 0.0;
        for i in 0..self.n {
            diag += f[i] * g[i] * self.norms[i];
        }
        let nf = self.n as f64;
        (cross - diag) / (nf * (nf - 1.0))
    }

    /// `(Z_iᵀv)_i`, the whitened rows projected on `v`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.whitened {
            Whitened::Rows(x) => *x * v,
            Whitened::Columns(zt) => zt.tr_mul(v),
        }
    }

    /// `L⁻¹ e_j` for 1-based `j`.
    fn whitened_direction(&self, j: usize) -> Result<DVector<f64>> {
        if j == 0 || j > self.p {
            return Err(Error::IndexOutOfRange { index: j, p: self.p });
        }
        let mut e = DVector::zeros(self.p);
        e[j - 1] = 1.0;
        if let SigmaFactor::Cholesky { l, .. } = self.factor {
            if !l.solve_lower_triangular_mut(&mut e) {
                return Err(Error::SingularSigma("triangular solve failed".into()));
            }
        }
        Ok(e)
    }

    /// `(1/n) Σ_i f_i X_iᵀ Σ⁻¹ e_j`.
    pub fn direction(&self, f: &DVector<f64>, j: usize) -> Result<f64> {
        self.check_weights(f)?;
        let a = self.aggregate(f);
        self.direction_from(&a, j)
    }

    pub fn direction_from(&self, aggregate: &DVector<f64>, j: usize) -> Result<f64> {
        let w = self.whitened_direction(j)?;
        Ok(aggregate.dot(&w) / self.n as f64)
    }
}

/// Arithmetic mean, the first-order U-statistic.
pub fn ustat1_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDataset("mean of an empty vector".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn ustat2_bilinear(
    ds: &Dataset,
    f: &DVector<f64>,
    g: &DVector<f64>,
    design: &DesignModel,
) -> Result<f64> {
    MomentEngine::new(ds.x(), design)?.ustat2(f, g)
}

pub fn ustat1_direction(
    ds: &Dataset,
    f: &DVector<f64>,
    j: usize,
    design: &DesignModel,
) -> Result<f64> {
    MomentEngine::new(ds.x(), design)?.direction(f, j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MomentKey {
    Y,
    A,
    AY,
    X2,
    XYX,
    XAX,
    XY2,
    XA2,
    XAXY,
    XAYXA,
    XAYX,
    Beta(usize),
    Nu(usize),
}

impl MomentKey {
    /// Per-row weight pair `(f, g)` of a second-order moment, or the single
    /// weight of a first-order one.
    fn weights(self) -> (Weight, Option<Weight>) {
        use Weight::*;
        match self {
            MomentKey::Y => (Y, None),
            MomentKey::A => (A, None),
            MomentKey::AY => (AY, None),
            MomentKey::X2 => (One, Some(One)),
            MomentKey::XYX => (Y, Some(One)),
            MomentKey::XAX => (A, Some(One)),
            MomentKey::XY2 => (Y, Some(Y)),
            MomentKey::XA2 => (A, Some(A)),
            MomentKey::XAXY => (A, Some(Y)),
            MomentKey::XAYXA => (AY, Some(A)),
            MomentKey::XAYX => (AY, Some(One)),
            MomentKey::Beta(_) => (Y, None),
            MomentKey::Nu(_) => (One, None),
        }
    }

    pub fn order(self) -> u8 {
        match self.weights().1 {
            Some(_) => 2,
            None => 1,
        }
    }

    pub fn needs_a(self) -> bool {
        let (f, g) = self.weights();
        f.needs_a() || g.is_some_and(Weight::needs_a)
    }
}

impl fmt::Display for MomentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentKey::Y => write!(f, "m_Y"),
            MomentKey::A => write!(f, "m_A"),
            MomentKey::AY => write!(f, "m_AY"),
            MomentKey::X2 => write!(f, "m_X2"),
            MomentKey::XYX => write!(f, "m_XY_X"),
            MomentKey::XAX => write!(f, "m_XA_X"),
            MomentKey::XY2 => write!(f, "m_XY2"),
            MomentKey::XA2 => write!(f, "m_XA2"),
            MomentKey::XAXY => write!(f, "m_XA_XY"),
            MomentKey::XAYXA => write!(f, "m_XAY_XA"),
            MomentKey::XAYX => write!(f, "m_XAY_X"),
            MomentKey::Beta(j) => write!(f, "m_beta_j({j})"),
            MomentKey::Nu(j) => write!(f, "m_nu_j({j})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Weight {
    One,
    Y,
    A,
    AY,
}

impl Weight {
    fn needs_a(self) -> bool {
        matches!(self, Weight::A | Weight::AY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentValue {
    pub value: f64,
    pub order: u8,
}

/// Named collection of estimated (or population) moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentSet {
    entries: BTreeMap<MomentKey, MomentValue>,
}

impl MomentSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: MomentKey, value: f64) {
        self.entries.insert(
            key,
            MomentValue {
                value,
                order: key.order(),
            },
        );
    }

    pub fn with(mut self, key: MomentKey, value: f64) -> Self {
        self.insert(key, value);
        self
    }

    pub fn get(&self, key: MomentKey) -> Result<f64> {
        self.entries
            .get(&key)
            .map(|v| v.value)
            .ok_or_else(|| Error::MissingMoment(key.to_string()))
    }

    pub fn contains(&self, key: MomentKey) -> bool {
        self.entries.contains_key(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = MomentKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MomentKey, MomentValue)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> MomentSet {
        let mut out = self.clone();
        for v in out.entries.values_mut() {
            v.value *= c;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimand {
    Glm0,
    Glm,
    Ce,
    Mar,
    Gcm,
}

impl Estimand {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "glm0" => Ok(Estimand::Glm0),
            "glm" => Ok(Estimand::Glm),
            "ce" => Ok(Estimand::Ce),
            "mar" => Ok(Estimand::Mar),
            "gcm" => Ok(Estimand::Gcm),
            other => Err(Error::InvalidOption(format!("unknown estimand `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimand::Glm0 => "glm0",
            Estimand::Glm => "glm",
            Estimand::Ce => "ce",
            Estimand::Mar => "mar",
            Estimand::Gcm => "gcm",
        }
    }

    /// Moments appearing on the left-hand side of the estimand's chain.
    pub fn chain_keys(self) -> &'static [MomentKey] {
        use MomentKey::*;
        match self {
            Estimand::Glm0 => &[XY2],
            Estimand::Glm => &[Y, X2, XYX, XY2],
            Estimand::Ce => &[A, Y, AY, X2, XAX, XA2, XAXY, XAYXA],
            Estimand::Mar => &[A, X2, XAX, XA2, AY, XAYX],
            Estimand::Gcm => &[A, Y, X2, XAX, XYX, XA2, XY2, XAXY],
        }
    }

    /// Chain keys plus the coordinate moments for `coords`.
    pub fn keys(self, coords: &[usize]) -> Vec<MomentKey> {
        let mut keys = self.chain_keys().to_vec();
        for &j in coords {
            keys.push(MomentKey::Beta(j));
            if self != Estimand::Glm0 {
                keys.push(MomentKey::Nu(j));
            }
        }
        keys
    }
}

struct WeightVectors {
    one: DVector<f64>,
    y: DVector<f64>,
    a: Option<DVector<f64>>,
    ay: Option<DVector<f64>>,
}

impl WeightVectors {
    fn new(ds: &Dataset) -> Self {
        let n = ds.n();
        WeightVectors {
            one: DVector::from_element(n, 1.0),
            y: ds.y().clone(),
            a: ds.a().cloned(),
            ay: ds.a().map(|a| a.component_mul(ds.y())),
        }
    }

    fn get(&self, w: Weight) -> Result<&DVector<f64>> {
        match w {
            Weight::One => Ok(&self.one),
            Weight::Y => Ok(&self.y),
            Weight::A => self.a.as_ref().ok_or(Error::MissingResponseA),
            Weight::AY => self.ay.as_ref().ok_or(Error::MissingResponseA),
        }
    }
}

/// Estimates `keys` with a prepared engine, sharing aggregates across moments.
pub fn collect_keys(engine: &MomentEngine<'_>, ds: &Dataset, keys: &[MomentKey]) -> Result<MomentSet> {
    if keys.iter().any(|k| k.needs_a()) {
        ds.require_a()?;
    }
    let w = WeightVectors::new(ds);
    let mut aggregates: BTreeMap<Weight, DVector<f64>> = BTreeMap::new();
    let mut agg = |wt: Weight| -> Result<DVector<f64>> {
        if let Some(v) = aggregates.get(&wt) {
            return Ok(v.clone());
        }
        let v = engine.aggregate(w.get(wt)?);
        aggregates.insert(wt, v.clone());
        Ok(v)
    };
    let mut out = MomentSet::new();
    for &key in keys {
        let value = match (key, key.weights()) {
            (MomentKey::Beta(j) | MomentKey::Nu(j), (f, None)) => {
                engine.direction_from(&agg(f)?, j)?
            }
            (_, (f, None)) => ustat1_mean(w.get(f)?.as_slice())?,
            (_, (f, Some(g))) => {
                if engine.n() < 2 {
                    return Err(Error::EmptyDataset(
                        "second-order U-statistic needs n >= 2".into(),
                    ));
                }
                let (a, b) = (agg(f)?, agg(g)?);
                engine.ustat2_from(&a, &b, w.get(f)?, w.get(g)?)
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFiniteValue(key.to_string()));
        }
        out.insert(key, value);
    }
    Ok(out)
}

/// Value of one moment and its first-order influence values `ψ_i`, so that
/// the moment's sampling variance is approximately `Var(ψ)/n`.
pub fn moment_influence(
    engine: &MomentEngine<'_>,
    ds: &Dataset,
    key: MomentKey,
) -> Result<(f64, DVector<f64>)> {
    if key.needs_a() {
        ds.require_a()?;
    }
    let w = WeightVectors::new(ds);
    let nf = engine.n() as f64;
    match (key, key.weights()) {
        (MomentKey::Beta(j) | MomentKey::Nu(j), (f, None)) => {
            let f = w.get(f)?;
            let dir = engine.whitened_direction(j)?;
            let proj = engine.project(&dir);
            let value = engine.aggregate(f).dot(&dir) / nf;
            Ok((value, f.component_mul(&proj).add_scalar(-value)))
        }
        (_, (f, None)) => {
            let f = w.get(f)?;
            let value = ustat1_mean(f.as_slice())?;
            Ok((value, f.add_scalar(-value)))
        }
        (_, (f, Some(g))) => {
            let (f, g) = (w.get(f)?, w.get(g)?);
            let value = engine.ustat2(f, g)?;
            let a = engine.aggregate(f) / nf;
            let b = engine.aggregate(g) / nf;
            let (za, zb) = (engine.project(&a), engine.project(&b));
            let h1 = (f.component_mul(&zb) + g.component_mul(&za)) * 0.5;
            Ok((value, (h1.add_scalar(-value)) * 2.0))
        }
    }
}

/// All moments of the estimand's chain plus `m_beta_j`/`m_nu_j` for `coords`.
pub fn collect_moments(
    ds: &Dataset,
    design: &DesignModel,
    estimand: Estimand,
    coords: &[usize],
) -> Result<MomentSet> {
    if matches!(estimand, Estimand::Ce | Estimand::Mar | Estimand::Gcm) {
        ds.require_a()?;
    }
    let engine = MomentEngine::new(ds.x(), design)?;
    collect_keys(&engine, ds, &estimand.keys(coords))
}

/// Direct O(n²) enumeration with an explicitly inverted Σ. Used as an oracle
/// for the aggregated fast path and kept deliberately naive.
pub mod reference {
    use super::*;

    pub fn ustat2_pairs(
        x: &DMatrix<f64>,
        f: &DVector<f64>,
        g: &DVector<f64>,
        sigma_inv: &DMatrix<f64>,
    ) -> f64 {
        let n = x.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let xi = x.row(i).transpose();
            let left = sigma_inv * &xi;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = x.row(j).dot(&left.transpose());
                total += 0.5 * (f[i] * g[j] + g[i] * f[j]) * q;
            }
        }
        total / (n as f64 * (n as f64 - 1.0))
    }

    pub fn direction(x: &DMatrix<f64>, f: &DVector<f64>, j: usize, sigma_inv: &DMatrix<f64>) -> f64 {
        let n = x.nrows();
        let col = sigma_inv.column(j - 1);
        (0..n).map(|i| f[i] * x.row(i).dot(&col.transpose())).sum::<f64>() / n as f64
    }

    pub fn collect_moments(
        ds: &Dataset,
        sigma: &DMatrix<f64>,
        estimand: Estimand,
        coords: &[usize],
    ) -> Result<MomentSet> {
        let inv = sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularSigma("explicit inverse failed".into()))?;
        let w = WeightVectors::new(ds);
        let mut out = MomentSet::new();
        for key in estimand.keys(coords) {
            let value = match (key, key.weights()) {
                (MomentKey::Beta(j) | MomentKey::Nu(j), (f, None)) => {
                    direction(ds.x(), w.get(f)?, j, &inv)
                }
                (_, (f, None)) => {
                    let v = w.get(f)?;
                    v.iter().sum::<f64>() / v.len() as f64
                }
                (_, (f, Some(g))) => ustat2_pairs(ds.x(), w.get(f)?, w.get(g)?, &inv),
            };
            out.insert(key, value);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..3.0));
        let a = DVector::from_fn(n, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        Dataset::new(x, y, Some(a)).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(p, p) * 0.5
    }

    #[test]
    fn mean_examples() {
        assert_eq!(ustat1_mean(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_relative_eq!(ustat1_mean(&[0.7; 9]).unwrap(), 0.7, max_relative = 1e-15);
        assert!(matches!(ustat1_mean(&[]), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn two_row_hand_example() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let ds = Dataset::new(x, y.clone(), None).unwrap();
        let d = DesignModel::identity(2, true);
        assert_relative_eq!(ustat2_bilinear(&ds, &y, &y, &d).unwrap(), 2.0, epsilon = 1e-15);
        let zero = DVector::zeros(2);
        assert_eq!(ustat2_bilinear(&ds, &zero, &y, &d).unwrap(), 0.0);
    }

    #[test]
    fn direction_examples() {
        let p = 4;
        let j = 3;
        let x = DMatrix::from_fn(5, p, |_, c| if c == j - 1 { 1.0 } else { 0.0 });
        let ds = Dataset::new(x, DVector::zeros(5), None).unwrap();
        let d = DesignModel::identity(p, false);
        let one = DVector::from_element(5, 1.0);
        assert_eq!(ustat1_direction(&ds, &one, j, &d).unwrap(), 1.0);
        assert_eq!(ustat1_direction(&ds, &DVector::zeros(5), j, &d).unwrap(), 0.0);
        assert!(matches!(
            ustat1_direction(&ds, &one, 5, &d),
            Err(Error::IndexOutOfRange { index: 5, p: 4 })
        ));
    }

    #[test]
    fn fast_path_matches_enumeration_with_general_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ds = random_dataset(&mut rng, 40, 5);
        let sigma = random_spd(&mut rng, 5);
        let inv = sigma.clone().try_inverse().unwrap();
        let d = DesignModel::known(sigma, false).unwrap();
        let f = ds.y().clone();
        let g = ds.a().unwrap().clone();
        let fast = ustat2_bilinear(&ds, &f, &g, &d).unwrap();
        let slow = reference::ustat2_pairs(ds.x(), &f, &g, &inv);
        assert_relative_eq!(fast, slow, max_relative = 1e-12);
        for j in 1..=5 {
            let fast = ustat1_direction(&ds, &f, j, &d).unwrap();
            let slow = reference::direction(ds.x(), &f, j, &inv);
            assert_relative_eq!(fast, slow, max_relative = 1e-10, epsilon = 1e-14);
        }
    }

    #[test]
    fn estimand_key_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random_dataset(&mut rng, 10, 3);
        let d = DesignModel::identity(3, true);
        let ms = collect_moments(&ds, &d, Estimand::Glm0, &[2]).unwrap();
        let keys: Vec<_> = ms.keys().collect();
        assert_eq!(keys, vec![MomentKey::XY2, MomentKey::Beta(2)]);
        let ms = collect_moments(&ds, &d, Estimand::Mar, &[]).unwrap();
        let mut expected = vec![
            MomentKey::A,
            MomentKey::X2,
            MomentKey::XAX,
            MomentKey::XA2,
            MomentKey::AY,
            MomentKey::XAYX,
        ];
        expected.sort();
        assert_eq!(ms.keys().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn zero_response_zeroes_y_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = random_dataset(&mut rng, 12, 3);
        let ds = Dataset::new(ds.x().clone(), DVector::zeros(12), ds.a().cloned()).unwrap();
        let d = DesignModel::identity(3, false);
        for est in [Estimand::Glm, Estimand::Ce, Estimand::Gcm] {
            let ms = collect_moments(&ds, &d, est, &[1]).unwrap();
            for key in [MomentKey::Y, MomentKey::XYX, MomentKey::XY2, MomentKey::XAXY, MomentKey::AY, MomentKey::XAYXA, MomentKey::Beta(1)] {
                if let Ok(v) = ms.get(key) {
                    assert_eq!(v, 0.0, "{key}");
                }
            }
        }
    }

    #[test]
    fn missing_a_is_reported() {
        let ds = Dataset::new(DMatrix::zeros(4, 2), DVector::zeros(4), None).unwrap();
        let d = DesignModel::identity(2, false);
        assert_eq!(
            collect_moments(&ds, &d, Estimand::Mar, &[]),
            Err(Error::MissingResponseA)
        );
    }

    #[test]
    fn design_validation() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(matches!(DesignModel::known(asym, true), Err(Error::SingularSigma(_))));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(DesignModel::known(indef, true), Err(Error::SingularSigma(_))));
        let ds = Dataset::new(DMatrix::zeros(4, 2), DVector::zeros(4), None).unwrap();
        let d = DesignModel::identity(3, true);
        assert!(matches!(
            collect_moments(&ds, &d, Estimand::Glm0, &[]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn csv_roundtrip_and_rejections() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = random_dataset(&mut rng, 6, 3);
        let mut buf = Vec::new();
        ds.to_csv_writer(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(back, ds);

        let bad = "y,x1,x2\n1,2,nan\n";
        assert!(Dataset::from_csv_reader(bad.as_bytes()).is_err());
        let gap = "y,x1,x3\n1,2,3\n";
        assert!(matches!(Dataset::from_csv_reader(gap.as_bytes()), Err(Error::Parse(_))));
        let no_y = "x1,x2\n1,2\n";
        assert!(matches!(Dataset::from_csv_reader(no_y.as_bytes()), Err(Error::Parse(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn moments_are_permutation_invariant(seed in any::<u64>(), n in 3usize..25, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_dataset(&mut rng, n, p);
            let sigma = random_spd(&mut rng, p);
            let d = DesignModel::known(sigma, false).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let shuffled = ds.permuted(&perm).unwrap();
            let coords: Vec<usize> = (1..=p).collect();
            for est in [Estimand::Glm, Estimand::Ce, Estimand::Gcm, Estimand::Mar] {
                let m1 = collect_moments(&ds, &d, est, &coords).unwrap();
                let m2 = collect_moments(&shuffled, &d, est, &coords).unwrap();
                for (k, v) in m1.iter() {
                    let w = m2.get(k).unwrap();
                    prop_assert!((v.value - w).abs() <= 1e-11 * (1.0 + v.value.abs()), "{k}: {} vs {w}", v.value);
                }
            }
        }

        #[test]
        fn fast_path_matches_reference(seed in any::<u64>(), n in 2usize..20, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_dataset(&mut rng, n, p);
            let sigma = random_spd(&mut rng, p);
            let d = DesignModel::known(sigma.clone(), false).unwrap();
            let coords: Vec<usize> = (1..=p).collect();
            for est in [Estimand::Glm0, Estimand::Glm, Estimand::Ce, Estimand::Mar, Estimand::Gcm] {
                let fast = collect_moments(&ds, &d, est, &coords).unwrap();
                let slow = reference::collect_moments(&ds, &sigma, est, &coords).unwrap();
                for (k, v) in slow.iter() {
                    let f = fast.get(k).unwrap();
                    prop_assert!((f - v.value).abs() <= 1e-9 * (1.0 + v.value.abs()), "{k}: {f} vs {}", v.value);
                }
            }
        }
    }
}
