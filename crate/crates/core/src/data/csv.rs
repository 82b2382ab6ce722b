use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, Targets};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    /// Binary label; rows whose value equals `positive` are class 1.
    Label {
        positive: String,
    },
}

/// Column name → kind. Must cover every header column and contain exactly
/// one label.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CsvSchema {
    pub columns: BTreeMap<String, ColumnKind>,
}

impl CsvSchema {
    pub fn new(columns: impl IntoIterator<Item = (String, ColumnKind)>) -> Self {
        Self {
            columns: columns.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvLoadStats {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped_missing: usize,
    pub dropped_unparseable: usize,
    /// Categorical cells not in the fitted vocabulary (encoded as an all-zero
    /// group).
    pub unknown_categories: usize,
    pub positives: usize,
}

impl CsvLoadStats {
    pub fn positive_prior(&self) -> f64 {
        self.positives as f64 / self.rows_kept.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Encoded {
    Numeric { feature: usize },
    Categorical { first: usize, vocab: Vec<String> },
    Label { positive: String },
}

/// Column layout and categorical vocabularies fitted on one CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvEncoder {
    header: Vec<String>,
    columns: Vec<Encoded>,
    feature_names: Vec<String>,
    numeric_features: Vec<usize>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "?" || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

fn csv_err(path: &Path, message: impl ToString) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => csv_err(path, format!("{other:?}")),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok((header, records))
}

impl CsvEncoder {
    /// Builds the layout from `path`: numeric columns keep one feature,
    /// categorical columns expand to one feature per distinct value (sorted),
    /// named `"col=value"`.
    pub fn fit(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Self> {
        let path = path.as_ref();
        let (header, records) = read_records(path)?;
        for name in &header {
            if !schema.columns.contains_key(name) {
                return Err(csv_err(path, format!("column {name:?} is not covered by the schema")));
            }
        }
        for name in schema.columns.keys() {
            if !header.contains(name) {
                return Err(csv_err(
                    path,
                    format!("schema column {name:?} is missing from the header"),
                ));
            }
        }
        let labels = header
            .iter()
            .filter(|h| matches!(schema.columns[*h], ColumnKind::Label { .. }))
            .count();
        if labels != 1 {
            return Err(csv_err(
                path,
                format!("schema must declare exactly one label column, found {labels}"),
            ));
        }

        let mut columns = Vec::with_capacity(header.len());
        let mut feature_names = Vec::new();
        let mut numeric_features = Vec::new();
        for (c, name) in header.iter().enumerate() {
            match &schema.columns[name] {
                ColumnKind::Numeric => {
                    numeric_features.push(feature_names.len());
                    columns.push(Encoded::Numeric {
                        feature: feature_names.len(),
                    });
                    feature_names.push(name.clone());
                }
                ColumnKind::Categorical => {
                    let vocab: BTreeSet<String> = records
                        .iter()
                        .filter_map(|r| r.get(c))
                        .filter(|v| !is_missing(v))
                        .map(str::to_string)
                        .collect();
                    let first = feature_names.len();
                    feature_names.extend(vocab.iter().map(|v| format!("{name}={v}")));
                    columns.push(Encoded::Categorical {
                        first,
                        vocab: vocab.into_iter().collect(),
                    });
                }
                ColumnKind::Label { positive } => columns.push(Encoded::Label {
                    positive: positive.clone(),
                }),
            }
        }
        Ok(Self {
            header,
            columns,
            feature_names,
            numeric_features,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Encodes `path` with this layout. Rows with a missing cell or an
    /// unparseable numeric are dropped and counted. Numeric columns are left
    /// on their raw scale and listed in `pending_scale`.
    pub fn transform(&self, path: impl AsRef<Path>) -> Result<(Dataset, CsvLoadStats)> {
        let path = path.as_ref();
        let (header, records) = read_records(path)?;
        if header != self.header {
            return Err(csv_err(path, "header differs from the fitted layout"));
        }
        let p = self.feature_names.len();
        let mut stats = CsvLoadStats {
            rows_read: records.len(),
            ..Default::default()
        };
        let mut values = Vec::with_capacity(records.len() * p);
        let mut labels = Vec::with_capacity(records.len());
        let mut row = vec![0.0; p];
        'rows: for rec in &records {
            if rec.len() != self.header.len() || rec.iter().any(is_missing) {
                stats.dropped_missing += 1;
                continue;
            }
            row.iter_mut().for_each(|v| *v = 0.0);
            let mut label = 0usize;
            let mut unknown = 0usize;
            for (cell, col) in rec.iter().zip(&self.columns) {
                match col {
                    Encoded::Numeric { feature } => match cell.parse::<f64>() {
                        Ok(v) if v.is_finite() => row[*feature] = v,
                        _ => {
                            stats.dropped_unparseable += 1;
                            continue 'rows;
                        }
                    },
                    Encoded::Categorical { first, vocab } => match vocab.binary_search_by(|v| v.as_str().cmp(cell)) {
                        Ok(k) => row[first + k] = 1.0,
                        Err(_) => unknown += 1,
                    },
                    Encoded::Label { positive } => label = usize::from(cell == positive),
                }
            }
            stats.unknown_categories += unknown;
            stats.positives += label;
            values.extend_from_slice(&row);
            labels.push(label as f64);
        }
        stats.rows_kept = labels.len();
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = labels.len();
        let features = Array2::from_shape_vec((n, p), values).expect("row width fixed");
        let targets = Targets::Binary(Array2::from_shape_vec((n, 1), labels).expect("one label per row"));
        let mut ds = Dataset::new(features, targets, format!("csv:{}", path.display()))?;
        ds.feature_names = self.feature_names.clone();
        ds.class_names = vec!["positive".into()];
        ds.pending_scale = self.numeric_features.clone();
        Ok((ds, stats))
    }
}

/// Fits the layout on `path` and encodes the same file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Dataset, CsvLoadStats, CsvEncoder)> {
    let encoder = CsvEncoder::fit(path.as_ref(), schema)?;
    let (ds, stats) = encoder.transform(path)?;
    Ok((ds, stats, encoder))
}

/// Encodes a held-out file with a layout fitted elsewhere; unseen categorical
/// values become all-zero groups.
pub fn load_csv_with(encoder: &CsvEncoder, path: impl AsRef<Path>) -> Result<(Dataset, CsvLoadStats)> {
    encoder.transform(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn schema() -> CsvSchema {
        CsvSchema::new([
            ("age".to_string(), ColumnKind::Numeric),
            ("edu".to_string(), ColumnKind::Categorical),
            ("const".to_string(), ColumnKind::Numeric),
            (
                "income".to_string(),
                ColumnKind::Label {
                    positive: ">50K".into(),
                },
            ),
        ])
    }

    #[test]
    fn one_hot_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "age,edu,const,income\n30,HS,5,<=50K\n40,BSc,5,>50K\n50,MSc,5,<=50K\n20,HS,5,>50K\n",
        );
        let (mut ds, stats, enc) = load_csv(&p, &schema()).unwrap();
        assert_eq!(enc.feature_names(), ["age", "edu=BSc", "edu=HS", "edu=MSc", "const"]);
        assert_eq!(ds.n_features(), 5);
        for r in 0..ds.len() {
            let s: f64 = (1..4).map(|c| ds.features[[r, c]]).sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(stats.positives, 2);
        assert_eq!(stats.positive_prior(), 0.5);
        assert_eq!(ds.pending_scale, vec![0, 4]);
        ds.scale_pending();
        assert_eq!(ds.features.column(0).to_vec(), vec![1.0 / 3.0, 2.0 / 3.0, 1.0, 0.0]);
        assert!(ds.features.column(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drops_missing_and_unparseable() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "b.csv",
            "age,edu,const,income\n30,HS,5,<=50K\n?,BSc,5,>50K\nabc,MSc,5,<=50K\n20,,5,>50K\n",
        );
        let (ds, stats, _) = load_csv(&p, &schema()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(stats.dropped_missing, 2);
        assert_eq!(stats.dropped_unparseable, 1);
    }

    #[test]
    fn unknown_category_is_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        let train = write(
            dir.path(),
            "t.csv",
            "age,edu,const,income\n30,HS,5,<=50K\n40,BSc,5,>50K\n",
        );
        let test = write(dir.path(), "v.csv", "age,edu,const,income\n35,PhD,5,>50K\n");
        let enc = CsvEncoder::fit(&train, &schema()).unwrap();
        let (ds, stats) = load_csv_with(&enc, &test).unwrap();
        assert_eq!(stats.unknown_categories, 1);
        assert_eq!(ds.features.row(0).to_vec(), vec![35.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn schema_must_cover_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.csv", "age,edu,const,income,extra\n1,a,2,x,3\n");
        assert!(matches!(load_csv(&p, &schema()), Err(Error::Csv { .. })));
    }
}
