//! Sparse longitudinal observations, evaluation grids and CSV ingestion.
//!
//! A dataset is a list of subjects, each observed at a handful of irregular
//! times on a common closed interval, plus optional scalar responses keyed by
//! subject id. Times within a subject are kept sorted; ties are allowed.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Scalar responses keyed by subject id.
pub type Responses<T> = BTreeMap<String, T>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Real> Domain<T> {
    pub fn new(lower: T, upper: T) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || lower > upper {
            return Err(FpcaError::InvalidArgument(format!(
                "invalid domain [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn width(&self) -> T {
        self.upper - self.lower
    }

    pub fn contains(&self, t: T) -> bool {
        t >= self.lower && t <= self.upper
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.upper > self.lower)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord<T> {
    pub id: String,
    times: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> SubjectRecord<T> {
    /// Builds a record, sorting times ascending and permuting values in
    /// lockstep (stable, so tied times keep their input order).
    pub fn new(id: impl Into<String>, times: Vec<T>, values: Vec<T>) -> Result<Self> {
        let id = id.into();
        if times.len() != values.len() {
            return Err(FpcaError::InvalidData(format!(
                "subject `{id}`: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.is_empty() {
            return Err(FpcaError::InvalidData(format!("subject `{id}` has no observations")));
        }
        if times.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(FpcaError::InvalidData(format!("subject `{id}` has non-finite entries")));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).expect("finite times"));
        let times = order.iter().map(|&i| times[i]).collect();
        let values = order.iter().map(|&i| values[i]).collect();
        Ok(Self { id, times, values })
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseFunctionalDataset<T> {
    subjects: Vec<SubjectRecord<T>>,
    domain: Domain<T>,
    responses: Responses<T>,
}

impl<T: Real> SparseFunctionalDataset<T> {
    pub fn new(subjects: Vec<SubjectRecord<T>>, domain: Domain<T>, responses: Responses<T>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(FpcaError::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(FpcaError::InvalidData(format!("duplicate subject id `{}`", s.id)));
            }
            if s.is_empty() {
                return Err(FpcaError::InvalidData(format!("subject `{}` has no observations", s.id)));
            }
            if let Some(t) = s.times().iter().find(|&&t| !domain.contains(t)) {
                return Err(FpcaError::InvalidData(format!(
                    "subject `{}`: time {t} outside [{}, {}]",
                    s.id, domain.lower, domain.upper
                )));
            }
        }
        if let Some(id) = responses.keys().find(|id| !seen.contains(id.as_str())) {
            return Err(FpcaError::InvalidData(format!("response for unknown subject `{id}`")));
        }
        if responses.values().any(|y| !y.is_finite()) {
            return Err(FpcaError::InvalidData("non-finite response".into()));
        }
        Ok(Self {
            subjects,
            domain,
            responses,
        })
    }

    /// Dataset on the observed time range `[min t, max t]`.
    pub fn from_subjects(subjects: Vec<SubjectRecord<T>>, responses: Responses<T>) -> Result<Self> {
        let (lo, hi) = observed_range(&subjects).ok_or(FpcaError::EmptyDataset)?;
        Self::new(subjects, Domain::new(lo, hi)?, responses)
    }

    pub fn subjects(&self) -> &[SubjectRecord<T>] {
        &self.subjects
    }

    pub fn domain(&self) -> Domain<T> {
        self.domain
    }

    pub fn responses(&self) -> &Responses<T> {
        &self.responses
    }

    pub fn with_responses(mut self, responses: Responses<T>) -> Result<Self> {
        self.responses = responses;
        Self::new(self.subjects, self.domain, self.responses)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(SubjectRecord::len).sum()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord<T>> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Writes `id,time,value[,y]` rows, one per observation.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_csv_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let with_y = !self.responses.is_empty();
        if with_y {
            w.write_record(["id", "time", "value", "y"])?;
        } else {
            w.write_record(["id", "time", "value"])?;
        }
        for s in &self.subjects {
            let y = self.responses.get(&s.id).map(|y| format_real(*y)).unwrap_or_default();
            for (t, v) in s.times.iter().zip(&s.values) {
                if with_y {
                    w.write_record([s.id.as_str(), &format_real(*t), &format_real(*v), &y])?;
                } else {
                    w.write_record([s.id.as_str(), &format_real(*t), &format_real(*v)])?;
                }
            }
        }
        Ok(())
    }
}

fn observed_range<T: Real>(subjects: &[SubjectRecord<T>]) -> Option<(T, T)> {
    let mut it = subjects.iter().flat_map(|s| s.times.iter().copied());
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t))))
}

/// Shortest round-trip decimal representation.
pub(crate) fn format_real<T: Real>(x: T) -> String {
    format!("{:?}", to_f64(x))
}

/// Column mapping for [`load_csv`]; deserialisable from a JSON override file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub value: String,
    /// Response column; used when present in the header.
    pub response: Option<String>,
    /// Overrides the observed time range.
    pub domain: Option<[f64; 2]>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            value: "value".into(),
            response: Some("y".into()),
            domain: None,
        }
    }
}

impl CsvSchema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads a long-format CSV (`id,time,value[,y]`) into a dataset.
pub fn load_csv<T: Real>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SparseFunctionalDataset<T>> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<T: Real, R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<SparseFunctionalDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FpcaError::Schema(format!("missing column `{name}`")))
    };
    let id_col = col(&schema.id)?;
    let time_col = col(&schema.time)?;
    let value_col = col(&schema.value)?;
    let y_col = schema
        .response
        .as_deref()
        .and_then(|name| headers.iter().position(|h| h == name));

    // Subject order follows first appearance in the file.
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<T>, Vec<T>)> = BTreeMap::new();
    let mut responses = Responses::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let parse = |c: usize, name: &str| -> Result<T> {
            let raw = field(c);
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .and_then(T::from_f64)
                .ok_or_else(|| FpcaError::Parse {
                    row,
                    column: name.to_string(),
                    message: format!("`{raw}` is not a finite number"),
                })
        };
        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(FpcaError::Parse {
                row,
                column: schema.id.clone(),
                message: "empty subject id".into(),
            });
        }
        let t = parse(time_col, &schema.time)?;
        let v = parse(value_col, &schema.value)?;
        if let Some(yc) = y_col {
            if !field(yc).is_empty() {
                let y = parse(yc, schema.response.as_deref().unwrap_or("y"))?;
                match responses.get(&id) {
                    Some(prev) if *prev != y => {
                        return Err(FpcaError::Parse {
                            row,
                            column: schema.response.clone().unwrap_or_default(),
                            message: format!("conflicting responses for subject `{id}`"),
                        })
                    }
                    _ => {
                        responses.insert(id.clone(), y);
                    }
                }
            }
        }
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(t);
        entry.1.push(v);
    }
    if order.is_empty() {
        return Err(FpcaError::EmptyDataset);
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let (t, v) = groups.remove(&id).expect("grouped subject");
            SubjectRecord::new(id, t, v)
        })
        .collect::<Result<Vec<_>>>()?;
    match schema.domain {
        Some([lo, hi]) => {
            let domain = Domain::new(lit(lo), lit(hi))?;
            SparseFunctionalDataset::new(subjects, domain, responses)
        }
        None => SparseFunctionalDataset::from_subjects(subjects, responses),
    }
}

/// Affine time map between two intervals, kept so results can be mapped back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMap<T> {
    pub from: Domain<T>,
    pub to: Domain<T>,
}

impl<T: Real> DomainMap<T> {
    pub fn forward(&self, t: T) -> T {
        self.to.lower + (t - self.from.lower) / self.from.width() * self.to.width()
    }

    pub fn inverse(&self, s: T) -> T {
        self.from.lower + (s - self.to.lower) / self.to.width() * self.from.width()
    }
}

/// Maps every observation time affinely from the dataset domain onto
/// `target`; values and responses are untouched.
pub fn rescale_domain<T: Real>(
    dataset: &SparseFunctionalDataset<T>,
    target: Domain<T>,
) -> Result<(SparseFunctionalDataset<T>, DomainMap<T>)> {
    let from = dataset.domain();
    if from.is_degenerate() {
        return Err(FpcaError::DegenerateDomain {
            lower: to_f64(from.lower),
            upper: to_f64(from.upper),
        });
    }
    if target.is_degenerate() {
        return Err(FpcaError::DegenerateDomain {
            lower: to_f64(target.lower),
            upper: to_f64(target.upper),
        });
    }
    let map = DomainMap { from, to: target };
    let subjects = dataset
        .subjects()
        .iter()
        .map(|s| SubjectRecord {
            id: s.id.clone(),
            // Clamp guards the endpoints against rounding just outside the target.
            times: s.times.iter().map(|&t| map.forward(t).max(target.lower).min(target.upper)).collect(),
            values: s.values.clone(),
        })
        .collect();
    Ok((
        SparseFunctionalDataset::new(subjects, target, dataset.responses().clone())?,
        map,
    ))
}

/// Evaluation grid with quadrature weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    points: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> Grid<T> {
    /// Trapezoid-weighted grid on strictly increasing points.
    pub fn new(points: Vec<T>) -> Result<Self> {
        if points.len() < 2 {
            return Err(FpcaError::InvalidArgument("a grid needs at least 2 points".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) || points.iter().any(|p| !p.is_finite()) {
            return Err(FpcaError::InvalidArgument("grid points must be finite and strictly increasing".into()));
        }
        let n = points.len();
        let half = lit::<T>(0.5);
        let weights = (0..n)
            .map(|i| {
                let left = if i > 0 { points[i] - points[i - 1] } else { T::zero() };
                let right = if i + 1 < n { points[i + 1] - points[i] } else { T::zero() };
                (left + right) * half
            })
            .collect();
        Ok(Self { points, weights })
    }

    pub fn with_weights(points: Vec<T>, weights: Vec<T>) -> Result<Self> {
        let grid = Self::new(points)?;
        if weights.len() != grid.len() || weights.iter().any(|w| !(*w > T::zero())) {
            return Err(FpcaError::InvalidArgument("quadrature weights must be positive, one per point".into()));
        }
        let total: T = weights.iter().copied().sum();
        let width = grid.upper() - grid.lower();
        if ((total - width) / width).abs() > lit(1e-10) {
            return Err(FpcaError::InvalidArgument("quadrature weights must sum to the grid width".into()));
        }
        Ok(Self { weights, ..grid })
    }

    /// `n` equispaced points spanning the domain.
    pub fn uniform(domain: Domain<T>, n: usize) -> Result<Self> {
        if domain.is_degenerate() {
            return Err(FpcaError::DegenerateDomain {
                lower: to_f64(domain.lower),
                upper: to_f64(domain.upper),
            });
        }
        if n < 2 {
            return Err(FpcaError::InvalidArgument("a grid needs at least 2 points".into()));
        }
        let step = domain.width() / from_usize(n - 1);
        let mut points: Vec<T> = (0..n).map(|i| domain.lower + step * from_usize(i)).collect();
        points[n - 1] = domain.upper;
        Self::new(points)
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lower(&self) -> T {
        self.points[0]
    }

    pub fn upper(&self) -> T {
        self.points[self.points.len() - 1]
    }

    pub fn domain(&self) -> Domain<T> {
        Domain {
            lower: self.lower(),
            upper: self.upper(),
        }
    }

    /// Quadrature of `f` sampled on the grid.
    pub fn integrate(&self, values: &[T]) -> T {
        self.weights.iter().zip(values).map(|(&w, &v)| w * v).sum()
    }

    pub fn inner(&self, f: &[T], g: &[T]) -> T {
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(&w, (&a, &b))| w * a * b)
            .sum()
    }

    /// Locates `t`: returns `(i, frac)` with `t = p[i] + frac (p[i+1] - p[i])`.
    /// `None` when `t` is outside the grid.
    pub fn locate(&self, t: T) -> Option<(usize, T)> {
        let n = self.points.len();
        if !(t >= self.points[0] && t <= self.points[n - 1]) {
            return None;
        }
        let i = match self.points.partition_point(|&p| p <= t) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let frac = (t - self.points[i]) / (self.points[i + 1] - self.points[i]);
        Some((i, frac))
    }

    /// Linear interpolation of grid values at `t`; exact at grid points.
    pub fn interpolate(&self, values: &[T], t: T) -> Option<T> {
        let (i, frac) = self.locate(t)?;
        if frac == T::zero() {
            return Some(values[i]);
        }
        if frac == T::one() {
            return Some(values[i + 1]);
        }
        Some(values[i] + (values[i + 1] - values[i]) * frac)
    }
}
