//! Long-format longitudinal data: ingestion, validation and standardization.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// All observations of one subject.
///
/// Covariates are stored row-major so that `x_row(j)` is the covariate
/// vector of the `j`-th visit.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBlock {
    id: String,
    y: Vec<f64>,
    x: Vec<f64>,
    p: usize,
}

impl SubjectBlock {
    pub fn new(id: impl Into<String>, y: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        if rows.len() != y.len() {
            return Err(Error::InvalidData(format!(
                "subject {id}: {} responses but {} covariate rows",
                y.len(),
                rows.len()
            )));
        }
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidData(format!(
                "subject {id}: ragged covariate rows"
            )));
        }
        let x = rows.into_iter().flatten().collect();
        Self::from_flat(id, y, x, p)
    }

    /// Builds a block from a row-major `m x p` covariate buffer.
    pub fn from_flat(id: impl Into<String>, y: Vec<f64>, x: Vec<f64>, p: usize) -> Result<Self> {
        let id = id.into();
        if y.is_empty() {
            return Err(Error::InvalidData(format!("subject {id} has no observations")));
        }
        if p == 0 {
            return Err(Error::InvalidData(format!("subject {id} has no covariates")));
        }
        if x.len() != y.len() * p {
            return Err(Error::InvalidData(format!(
                "subject {id}: covariate buffer has {} entries, expected {}",
                x.len(),
                y.len() * p
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "subject {id} contains non-finite values"
            )));
        }
        Ok(Self { id, y, x, p })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn x_row(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    pub fn x_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks_exact(self.p)
    }

    /// Linear predictor `x_j' beta` for every visit.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        self.x_rows().map(|row| dot(row, beta)).collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// A set of independent subjects sharing one covariate layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectBlock>,
    p: usize,
    columns: Vec<String>,
    id_column: String,
    response_column: String,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<SubjectBlock>, columns: Vec<String>) -> Result<Self> {
        Self::with_names(subjects, columns, "subject".into(), "y".into())
    }

    pub fn with_names(
        subjects: Vec<SubjectBlock>,
        columns: Vec<String>,
        id_column: String,
        response_column: String,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::EmptyInput("dataset has no subjects".into()));
        }
        let p = columns.len();
        if let Some(bad) = subjects.iter().find(|s| s.p() != p) {
            return Err(Error::InvalidData(format!(
                "subject {} has {} covariates, expected {p}",
                bad.id(),
                bad.p()
            )));
        }
        Ok(Self {
            subjects,
            p,
            columns,
            id_column,
            response_column,
        })
    }

    /// Dataset with generated column names `x1..xp`.
    pub fn from_subjects(subjects: Vec<SubjectBlock>) -> Result<Self> {
        let p = subjects.first().map_or(0, SubjectBlock::p);
        let columns = (1..=p).map(|j| format!("x{j}")).collect();
        Self::new(subjects, columns)
    }

    pub fn subjects(&self) -> &[SubjectBlock] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &SubjectBlock {
        &self.subjects[i]
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn visit_counts(&self) -> Vec<usize> {
        self.subjects.iter().map(SubjectBlock::m).collect()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(SubjectBlock::m).sum()
    }

    pub fn max_visits(&self) -> usize {
        self.subjects.iter().map(SubjectBlock::m).max().unwrap_or(0)
    }

    /// Restricts the dataset to the given subject indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let subjects = indices.iter().map(|&i| self.subjects[i].clone()).collect();
        Self::with_names(
            subjects,
            self.columns.clone(),
            self.id_column.clone(),
            self.response_column.clone(),
        )
    }

    /// Pooled mean of the covariates over all observations.
    pub fn covariate_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.p];
        for s in &self.subjects {
            for row in s.x_rows() {
                for (acc, v) in sums.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let total = self.total_observations() as f64;
        sums.iter().map(|v| v / total).collect()
    }

    /// Writes the dataset in long format using shortest round-trip decimals.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.id_column.clone(), self.response_column.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_io)?;
        for s in &self.subjects {
            for (j, y) in s.y().iter().enumerate() {
                let mut record = vec![s.id().to_string(), y.to_string()];
                record.extend(s.x_row(j).iter().map(f64::to_string));
                w.write_record(&record).map_err(csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// The schema that reads back what [`Self::write_csv`] produces.
    pub fn schema(&self) -> Schema {
        Schema {
            id_col: self.id_column.clone(),
            y_col: self.response_column.clone(),
            x_cols: self.columns.clone(),
        }
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Column mapping for long-format ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub id_col: String,
    pub y_col: String,
    pub x_cols: Vec<String>,
}

impl Schema {
    pub fn new(id_col: &str, y_col: &str, x_cols: &[&str]) -> Self {
        Self {
            id_col: id_col.into(),
            y_col: y_col.into(),
            x_cols: x_cols.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Reads long-format CSV. Rows with an empty response cell are dropped as
/// missing visits; any other unparseable or non-finite cell is an error.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<LongitudinalDataset> {
    if schema.x_cols.is_empty() {
        return Err(Error::Schema("no covariate columns given".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        Ok(_) => return Err(Error::EmptyInput("file has no header".into())),
        Err(e) => return Err(Error::Parse { row: 1, message: e.to_string() }),
    };
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let id_idx = find(&schema.id_col)?;
    let y_idx = find(&schema.y_col)?;
    let x_idx = schema
        .x_cols
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    let mut n_rows = 0usize;
    for record in rdr.records() {
        n_rows += 1;
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map_or(n_rows + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(n_rows + 1, |p| p.line() as usize);
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("column `{name}`: cannot parse `{raw}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    message: format!("column `{name}`: non-finite value `{raw}`"),
                });
            }
            Ok(v)
        };
        if record.get(y_idx).unwrap_or("").is_empty() {
            continue;
        }
        let y = cell(y_idx, &schema.y_col)?;
        let mut xs = Vec::with_capacity(x_idx.len());
        for (&idx, name) in x_idx.iter().zip(&schema.x_cols) {
            xs.push(cell(idx, name)?);
        }
        let id = record.get(id_idx).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row: line,
                message: format!("column `{}`: empty subject id", schema.id_col),
            });
        }
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (Vec::new(), Vec::new())
        });
        entry.0.push(y);
        entry.1.extend(xs);
    }
    if order.is_empty() {
        return Err(Error::EmptyInput("no observations in file".into()));
    }
    let p = schema.x_cols.len();
    let subjects = order
        .into_iter()
        .map(|id| {
            let (y, x) = groups.remove(&id).expect("grouped id");
            SubjectBlock::from_flat(id, y, x, p)
        })
        .collect::<Result<Vec<_>>>()?;
    LongitudinalDataset::with_names(
        subjects,
        schema.x_cols.clone(),
        schema.id_col.clone(),
        schema.y_col.clone(),
    )
}

/// Affine per-column transformation `(v - center) / scale` using pooled
/// moments over all observations (sample standard deviation, `N - 1`).
///
/// A coefficient fitted on standardized data maps back to the original
/// covariate scale as `beta_j * response_scale / scale_j`; exempt columns
/// and an unstandardized response have center 0 and scale 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub response_center: f64,
    pub response_scale: f64,
}

impl Standardization {
    pub fn apply(&self, data: &LongitudinalDataset) -> Result<LongitudinalDataset> {
        self.map(data, |v, c, s| (v - c) / s)
    }

    pub fn invert(&self, data: &LongitudinalDataset) -> Result<LongitudinalDataset> {
        self.map(data, |v, c, s| v * s + c)
    }

    fn map(
        &self,
        data: &LongitudinalDataset,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<LongitudinalDataset> {
        if self.center.len() != data.p() {
            return Err(Error::Argument(format!(
                "standardization has {} columns, dataset has {}",
                self.center.len(),
                data.p()
            )));
        }
        let subjects = data
            .subjects()
            .iter()
            .map(|s| {
                let y = s
                    .y()
                    .iter()
                    .map(|&v| f(v, self.response_center, self.response_scale))
                    .collect();
                let x = s
                    .x_rows()
                    .flat_map(|row| {
                        row.iter()
                            .enumerate()
                            .map(|(j, &v)| f(v, self.center[j], self.scale[j]))
                            .collect::<Vec<_>>()
                    })
                    .collect();
                SubjectBlock::from_flat(s.id(), y, x, s.p())
            })
            .collect::<Result<Vec<_>>>()?;
        LongitudinalDataset::with_names(
            subjects,
            data.columns.clone(),
            data.id_column.clone(),
            data.response_column.clone(),
        )
    }

    /// Coefficients of a no-intercept fit on standardized data, expressed on
    /// the original covariate and response scale.
    pub fn coefficients_to_original(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter()
            .zip(&self.scale)
            .map(|(b, s)| b * self.response_scale / s)
            .collect()
    }
}

fn pooled_moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let values: Vec<f64> = values.collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Standardizes every covariate column except those named in `exempt`, and
/// the response when `include_response` is set.
pub fn standardize(
    data: &LongitudinalDataset,
    include_response: bool,
    exempt: &[&str],
) -> Result<(LongitudinalDataset, Standardization)> {
    for name in exempt {
        if !data.columns().iter().any(|c| c == name) {
            return Err(Error::Schema(format!("exempt column `{name}` not in dataset")));
        }
    }
    let mut center = vec![0.0; data.p()];
    let mut scale = vec![1.0; data.p()];
    for (j, name) in data.columns().iter().enumerate() {
        if exempt.contains(&name.as_str()) {
            continue;
        }
        let (m, sd) = pooled_moments(
            data.subjects()
                .iter()
                .flat_map(|s| s.x_rows().map(move |row| row[j])),
        );
        if !(sd > 0.0) {
            return Err(Error::DegenerateColumn(name.clone()));
        }
        center[j] = m;
        scale[j] = sd;
    }
    let (response_center, response_scale) = if include_response {
        let (m, sd) = pooled_moments(data.subjects().iter().flat_map(|s| s.y().iter().copied()));
        if !(sd > 0.0) {
            return Err(Error::DegenerateColumn(data.response_column.clone()));
        }
        (m, sd)
    } else {
        (0.0, 1.0)
    };
    let st = Standardization {
        center,
        scale,
        response_center,
        response_scale,
    };
    Ok((st.apply(data)?, st))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new("id", "y", &["a", "b"])
    }

    #[test]
    fn balanced_load() {
        let text = "id,y,a,b\n1,0.5,1,2\n1,0.7,1,3\n1,0.9,1,4\n2,1.5,0,2\n2,1.7,0,3\n2,1.9,0,4\n";
        let d = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.p(), 2);
        assert_eq!(d.visit_counts(), vec![3, 3]);
        assert_eq!(d.subject(1).x_row(2), &[0.0, 4.0]);
    }

    #[test]
    fn unbalanced_and_interleaved_rows_keep_order() {
        let text = "id,y,a,b\nb,1,1,1\na,2,2,2\nb,3,3,3\nb,4,4,4\na,5,5,5\nb,6,6,6\nb,7,7,7\n";
        let d = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(d.subject(0).id(), "b");
        assert_eq!(d.visit_counts(), vec![5, 2]);
        assert_eq!(d.subject(0).y(), &[1.0, 3.0, 4.0, 6.0, 7.0]);
    }

    #[test]
    fn nan_cell_reports_its_row() {
        let text = "id,y,a,b\n1,0.5,1,2\n1,NaN,1,3\n";
        match read_csv(text.as_bytes(), &schema()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "id,y,a,b\n1,0.5,x,2\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &schema()),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn missing_response_rows_are_dropped() {
        let text = "id,y,a,b\n1,0.5,1,2\n1,,1,3\n1,0.9,1,4\n";
        let d = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(d.visit_counts(), vec![2]);
    }

    #[test]
    fn schema_and_empty_errors() {
        let text = "id,y,a\n1,0.5,1\n";
        assert!(matches!(read_csv(text.as_bytes(), &schema()), Err(Error::Schema(_))));
        assert!(matches!(read_csv("".as_bytes(), &schema()), Err(Error::EmptyInput(_))));
        assert!(matches!(
            read_csv("id,y,a,b\n".as_bytes(), &schema()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn write_then_load_is_identical() {
        let text = "id,y,a,b\n1,0.1,0.30000000000000004,2e-300\n1,-7.25,1,3\n2,1e22,0,4\n";
        let d = read_csv(text.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &d.schema()).unwrap();
        assert_eq!(d, back);
        let mut buf2 = Vec::new();
        back.write_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    fn column_dataset(values: &[f64]) -> LongitudinalDataset {
        let subjects = values
            .iter()
            .enumerate()
            .map(|(i, &v)| SubjectBlock::new(i.to_string(), vec![v * 2.0], vec![vec![v, 1.0]]).unwrap())
            .collect();
        LongitudinalDataset::new(subjects, vec!["a".into(), "one".into()]).unwrap()
    }

    #[test]
    fn standardize_centers_and_scales() {
        let d = column_dataset(&[1.0, 2.0, 3.0]);
        let (s, st) = standardize(&d, false, &["one"]).unwrap();
        let col: Vec<f64> = s.subjects().iter().map(|b| b.x_row(0)[0]).collect();
        assert_eq!(col, vec![-1.0, 0.0, 1.0]);
        assert_eq!(st.center, vec![2.0, 0.0]);
        assert_eq!(st.scale, vec![1.0, 1.0]);
        assert_eq!(s.subject(0).y(), &[2.0]);
    }

    #[test]
    fn standardize_is_idempotent_and_invertible() {
        let d = column_dataset(&[0.3, -1.2, 4.4, 2.0, 9.5]);
        let (s, st) = standardize(&d, true, &["one"]).unwrap();
        let (s2, _) = standardize(&s, true, &["one"]).unwrap();
        for (a, b) in s.subjects().iter().zip(s2.subjects()) {
            assert!((a.x_row(0)[0] - b.x_row(0)[0]).abs() <= 1e-12);
            assert!((a.y()[0] - b.y()[0]).abs() <= 1e-12);
        }
        let back = st.invert(&s).unwrap();
        for (a, b) in d.subjects().iter().zip(back.subjects()) {
            assert!((a.x_row(0)[0] - b.x_row(0)[0]).abs() <= 1e-10);
            assert!((a.y()[0] - b.y()[0]).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_column_needs_exemption() {
        let d = column_dataset(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            standardize(&d, false, &[]),
            Err(Error::DegenerateColumn(c)) if c == "one"
        ));
    }
}
