//! Spatial datasets, CSV ingestion and reproducible train/test splits.

use std::collections::HashMap;
use std::path::Path;

use faer::Mat;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Locations, covariates and response observed at `n` sites.
///
/// Immutable once built; every constructor goes through [`SpatialDataset::new`],
/// which enforces equal row counts, finiteness and distinct coordinates.
#[derive(Debug, Clone)]
pub struct SpatialDataset {
    locations: Mat<f64>,
    features: Mat<f64>,
    response: Vec<f64>,
    location_names: Vec<String>,
    feature_names: Vec<String>,
    response_name: String,
}

impl SpatialDataset {
    pub fn new(
        locations: Mat<f64>,
        features: Mat<f64>,
        response: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let d = locations.ncols();
        let location_names = default_location_names(d);
        Self::with_names(
            locations,
            features,
            response,
            location_names,
            feature_names,
            "y".to_string(),
        )
    }

    pub fn with_names(
        locations: Mat<f64>,
        features: Mat<f64>,
        response: Vec<f64>,
        location_names: Vec<String>,
        feature_names: Vec<String>,
        response_name: String,
    ) -> Result<Self> {
        let n = response.len();
        if n == 0 {
            return Err(Error::Validation("dataset has no rows".into()));
        }
        if locations.nrows() != n || features.nrows() != n {
            return Err(Error::Validation(format!(
                "row counts disagree: locations {}, features {}, response {}",
                locations.nrows(),
                features.nrows(),
                n
            )));
        }
        let d = locations.ncols();
        if !(1..=3).contains(&d) {
            return Err(Error::Validation(format!(
                "locations must have 1 to 3 columns, got {d}"
            )));
        }
        if location_names.len() != d {
            return Err(Error::Validation("location name count mismatch".into()));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::Validation(format!(
                "{} feature names for {} feature columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        for i in 0..n {
            let finite = (0..d).all(|j| locations[(i, j)].is_finite())
                && (0..features.ncols()).all(|j| features[(i, j)].is_finite())
                && response[i].is_finite();
            if !finite {
                return Err(Error::Validation(format!(
                    "non-finite value in row {}",
                    i + 1
                )));
            }
        }
        if let Some((a, b)) = first_duplicate(&locations) {
            return Err(Error::Validation(format!(
                "duplicate coordinates at rows {} and {}",
                a + 1,
                b + 1
            )));
        }
        Ok(Self {
            locations,
            features,
            response,
            location_names,
            feature_names,
            response_name,
        })
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    /// Spatial dimension `d`.
    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn locations(&self) -> &Mat<f64> {
        &self.locations
    }

    pub fn features(&self) -> &Mat<f64> {
        &self.features
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn location_names(&self) -> &[String] {
        &self.location_names
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    /// Rows `idx` of this dataset, in the given order.
    pub fn subset(&self, idx: &[usize]) -> SpatialDataset {
        SpatialDataset {
            locations: linalg::select_rows(&self.locations, idx),
            features: linalg::select_rows(&self.features, idx),
            response: idx.iter().map(|&i| self.response[i]).collect(),
            location_names: self.location_names.clone(),
            feature_names: self.feature_names.clone(),
            response_name: self.response_name.clone(),
        }
    }
}

pub fn default_location_names(d: usize) -> Vec<String> {
    ["sx", "sy", "sz"]
        .iter()
        .take(d)
        .map(|s| s.to_string())
        .collect()
}

/// Returns the first pair `(i, j)`, `i < j`, of rows sharing coordinates.
fn first_duplicate(locations: &Mat<f64>) -> Option<(usize, usize)> {
    let d = locations.ncols();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(locations.nrows());
    for i in 0..locations.nrows() {
        // +0.0 folds negative zero onto positive zero.
        let key: Vec<u64> = (0..d).map(|j| (locations[(i, j)] + 0.0).to_bits()).collect();
        if let Some(&first) = seen.get(&key) {
            return Some((first, i));
        }
        seen.insert(key, i);
    }
    None
}

/// Reads a dataset from a headed, comma-delimited file.
///
/// Row numbers in errors are 1-based and count data rows only.
pub fn load_csv(
    path: impl AsRef<Path>,
    coord_cols: &[String],
    feature_cols: &[String],
    response_col: &str,
) -> Result<SpatialDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str, role: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{role} '{name}' not found")))
    };
    let coord_idx = coord_cols
        .iter()
        .map(|c| find(c, "coord_col"))
        .collect::<Result<Vec<_>>>()?;
    let feature_idx = feature_cols
        .iter()
        .map(|c| find(c, "feature_col"))
        .collect::<Result<Vec<_>>>()?;
    let response_idx = find(response_col, "response_col")?;

    let mut locs = Vec::new();
    let mut feats = Vec::new();
    let mut response = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Format {
            location: format!("{} row {row}", path.display()),
            message: e.to_string(),
        })?;
        let cell = |idx: usize| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: headers[idx].to_string(),
                message: format!("'{raw}' is not a number"),
            })
        };
        locs.push(coord_idx.iter().map(|&i| cell(i)).collect::<Result<Vec<_>>>()?);
        feats.push(feature_idx.iter().map(|&i| cell(i)).collect::<Result<Vec<_>>>()?);
        response.push(cell(response_idx)?);
    }
    if response.is_empty() {
        return Err(Error::Validation(format!("{} has no data rows", path.display())));
    }
    SpatialDataset::with_names(
        linalg::from_rows(&locs, coord_idx.len()),
        linalg::from_rows(&feats, feature_idx.len()),
        response,
        coord_cols.to_vec(),
        feature_cols.to_vec(),
        response_col.to_string(),
    )
}

/// Header names of a comma-delimited file, trimmed.
pub fn csv_headers(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?;
    Ok(headers.iter().map(|h| h.trim().to_string()).collect())
}

/// Reads the named numeric columns, one matrix column each, in the order given.
pub fn load_columns(path: impl AsRef<Path>, columns: &[String]) -> Result<Mat<f64>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let idx = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == c)
                .ok_or_else(|| Error::Schema(format!("column '{c}' not found in {}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format {
            location: format!("{} row {}", path.display(), r + 1),
            message: e.to_string(),
        })?;
        let row = idx
            .iter()
            .map(|&i| {
                let raw = record.get(i).unwrap_or("").trim();
                raw.parse::<f64>().map_err(|_| Error::Parse {
                    row: r + 1,
                    column: headers[i].to_string(),
                    message: format!("'{raw}' is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(linalg::from_rows(&rows, columns.len()))
}

/// Writes `ds` with columns `locations.., features.., response`.
///
/// Values use the shortest representation that parses back to the same
/// `f64`, so [`load_csv`] inverts this exactly.
pub fn write_csv(ds: &SpatialDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = ds.location_names.iter().map(String::as_str).collect();
    header.extend(ds.feature_names.iter().map(String::as_str));
    header.push(&ds.response_name);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        rec.extend((0..ds.dim()).map(|j| ds.locations[(i, j)].to_string()));
        rec.extend((0..ds.n_features()).map(|j| ds.features[(i, j)].to_string()));
        rec.push(ds.response[i].to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            location: path.display().to_string(),
            message: format!("{other:?}"),
        },
    }
}

/// A partition of `0..n` into training and test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub seed: u64,
    pub fraction: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Number of training rows for `n` rows at `fraction`: rounded half away
/// from zero, then clamped so both sides keep at least one row.
pub fn train_size(n: usize, fraction: f64) -> usize {
    let k = (fraction * n as f64).round() as usize;
    k.clamp(1, n - 1)
}

/// Random train/test split, deterministic in `(n, fraction, seed)`.
pub fn split(ds: &SpatialDataset, fraction: f64, seed: u64) -> Result<SplitIndices> {
    split_n(ds.n(), fraction, seed)
}

pub fn split_n(n: usize, fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if n < 2 {
        return Err(Error::Argument(format!("cannot split {n} rows")));
    }
    let k = train_size(n, fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut train = order[..k].to_vec();
    let mut test = order[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices {
        seed,
        fraction,
        train,
        test,
    })
}

impl SplitIndices {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("split indices serialize")
    }
}
