//! Sparse longitudinal observations grouped by subject.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{FaceError, Result};

/// Observations of one subject, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SubjectRecord {
    /// Builds a record, sorting observations by time. Ties keep input order.
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if times.len() != values.len() {
            return Err(FaceError::Dimension(format!(
                "subject {id}: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.is_empty() {
            return Err(FaceError::InvalidInput(format!("subject {id} has no observations")));
        }
        if let Some(bad) = times.iter().chain(values.iter()).find(|v| !v.is_finite()) {
            return Err(FaceError::InvalidInput(format!(
                "subject {id} has a non-finite entry {bad}"
            )));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let times = order.iter().map(|&k| times[k]).collect();
        let values = order.iter().map(|&k| values[k]).collect();
        Ok(Self { id, times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of raw covariance products, m(m+1)/2.
    pub fn n_products(&self) -> usize {
        let m = self.len();
        m * (m + 1) / 2
    }
}

/// Per-subject irregular observations.
///
/// `time_domain` holds the original-unit interval that `[0, 1]` maps onto once
/// [`rescale_time`](Self::rescale_time) has been applied. Before rescaling it is
/// the observed range of the raw times.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFunctionalDataset {
    subjects: Vec<SubjectRecord>,
    time_domain: (f64, f64),
    normalized: bool,
}

impl SparseFunctionalDataset {
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(FaceError::InvalidInput("dataset has no subjects".into()));
        }
        let (lo, hi) = time_range(&subjects);
        Ok(Self { subjects, time_domain: (lo, hi), normalized: false })
    }

    /// Builds a dataset whose times are already on `[0, 1]`, mapping back to
    /// `time_domain` in original units.
    pub fn with_domain(subjects: Vec<SubjectRecord>, time_domain: (f64, f64)) -> Result<Self> {
        let mut ds = Self::new(subjects)?;
        for s in &ds.subjects {
            if let Some(&t) = s.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(FaceError::OutOfDomain { value: t });
            }
        }
        ds.time_domain = time_domain;
        ds.normalized = true;
        Ok(ds)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| FaceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(file)
    }

    /// Parses `subject_id,time,value` rows. Subjects appear in first-appearance
    /// order. Row numbers in errors count data rows from 1, header excluded.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["subject_id", "time", "value"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(FaceError::Parse {
                row: 0,
                message: format!("expected header `subject_id,time,value`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }

        let mut index: HashMap<String, usize> = HashMap::new();
        let mut grouped: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for (k, record) in rdr.records().enumerate() {
            let row = k + 1;
            let record = record.map_err(|e| FaceError::Parse { row, message: e.to_string() })?;
            let field = |j: usize, name: &str| -> Result<&str> {
                match record.get(j) {
                    Some(s) if !s.is_empty() => Ok(s),
                    _ => Err(FaceError::Parse { row, message: format!("missing {name}") }),
                }
            };
            let id = field(0, "subject_id")?.to_string();
            let number = |j: usize, name: &str| -> Result<f64> {
                let raw = field(j, name)?;
                let v: f64 = raw.parse().map_err(|_| FaceError::Parse {
                    row,
                    message: format!("{name} `{raw}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(FaceError::Parse { row, message: format!("{name} is {raw}") });
                }
                Ok(v)
            };
            let t = number(1, "time")?;
            let y = number(2, "value")?;
            let slot = *index.entry(id.clone()).or_insert_with(|| {
                grouped.push((id, Vec::new(), Vec::new()));
                grouped.len() - 1
            });
            grouped[slot].1.push(t);
            grouped[slot].2.push(y);
        }
        if grouped.is_empty() {
            return Err(FaceError::InvalidInput("csv file has no data rows".into()));
        }
        let subjects = grouped
            .into_iter()
            .map(|(id, t, y)| SubjectRecord::new(id, t, y))
            .collect::<Result<Vec<_>>>()?;
        Self::new(subjects)
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn time_domain(&self) -> (f64, f64) {
        self.time_domain
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(SubjectRecord::len).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.subjects.iter().map(SubjectRecord::len).collect()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn all_times(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.times.iter().copied()).collect()
    }

    /// Maps times affinely onto `[0, 1]`. Applying it twice is the same as once.
    pub fn rescale_time(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let (lo, hi) = time_range(&self.subjects);
        if hi <= lo {
            return Err(FaceError::DegenerateDomain(lo));
        }
        let span = hi - lo;
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectRecord {
                id: s.id.clone(),
                times: s.times.iter().map(|t| ((t - lo) / span).clamp(0.0, 1.0)).collect(),
                values: s.values.clone(),
            })
            .collect();
        Ok(Self { subjects, time_domain: (lo, hi), normalized: true })
    }

    /// Whether times have been mapped onto `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Maps a `[0, 1]` time back to original units.
    pub fn to_original(&self, t: f64) -> f64 {
        let (lo, hi) = self.time_domain;
        lo + t * (hi - lo)
    }

    /// Maps an original-unit time onto the `[0, 1]` scale of this dataset.
    pub fn to_unit(&self, t: f64) -> f64 {
        let (lo, hi) = self.time_domain;
        (t - lo) / (hi - lo)
    }
}

fn time_range(subjects: &[SubjectRecord]) -> (f64, f64) {
    subjects
        .iter()
        .flat_map(|s| s.times.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)))
}
