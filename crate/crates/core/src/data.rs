//! Datasets: in-memory samples, CSV ingestion and synthetic generators.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training point: covariate `x`, label `y` and optional sensitive attribute `s`.
///
/// Class labels of categorical heads are stored as integral `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
    pub s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let d = samples.first().map(|s| s.x.len()).unwrap_or(0);
        if let Some(i) = samples.iter().position(|s| s.x.len() != d) {
            return Err(Error::InvalidInput(format!(
                "sample {i} has {} features, expected {d}",
                samples[i].x.len()
            )));
        }
        let feature_names = (0..d).map(|j| format!("x{j}")).collect();
        Ok(Self {
            samples,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.samples.first().map(|s| s.x.len()).unwrap_or(0)
    }

    pub fn has_sensitive(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.s.is_some())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Seeded shuffle split into `(train, test)`; `test_fraction` of the rows go to test.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidInput(format!(
                "test fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Standardizes every feature column to mean 0 and (population) std 1.
    /// Constant columns are only centered.
    pub fn standardize(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        for j in 0..self.num_features() {
            let mean = self.samples.iter().map(|s| s.x[j]).sum::<f64>() / n as f64;
            let var = self
                .samples
                .iter()
                .map(|s| (s.x[j] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt();
            for s in &mut self.samples {
                s.x[j] -= mean;
                if std > 0.0 {
                    s.x[j] /= std;
                }
            }
        }
    }

    /// Writes the dataset as CSV with feature columns, `y` and (if present) `s`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push("y".into());
        if self.has_sensitive() {
            header.push("s".into());
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
            row.push(format!("{:?}", s.y));
            if let Some(sv) = s.s {
                row.push(format!("{sv:?}"));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub label: String,
    pub sensitive: Option<String>,
    /// Columns one-hot encoded (one indicator per distinct value, in sorted order).
    pub categorical: Vec<String>,
    pub standardize: bool,
}

fn parse_cell(row: usize, column: &str, cell: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("'{cell}' is not a number"),
    })
}

/// Maps a column of strings to numbers: numeric columns are parsed, otherwise
/// distinct values are indexed in sorted order.
fn encode_target(cells: &[String]) -> Vec<f64> {
    if let Ok(values) = cells
        .iter()
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
    {
        return values;
    }
    let levels: BTreeSet<&str> = cells.iter().map(|c| c.trim()).collect();
    let index: BTreeMap<&str, usize> = levels.into_iter().enumerate().map(|(i, l)| (l, i)).collect();
    cells.iter().map(|c| index[c.trim()] as f64).collect()
}

/// Loads a CSV file with a header row.
///
/// The label and sensitive columns are removed from the features. String
/// labels are mapped to class indices by sorted distinct value.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("column '{name}' not found in header")))
    };
    let label_col = find(&opts.label)?;
    let sens_col = opts.sensitive.as_deref().map(find).transpose()?;
    for c in &opts.categorical {
        find(c)?;
    }

    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let cell = |r: &csv::StringRecord, c: usize| r.get(c).unwrap_or("").to_string();

    let labels = encode_target(&rows.iter().map(|r| cell(r, label_col)).collect::<Vec<_>>());
    let sensitive = sens_col.map(|c| {
        encode_target(&rows.iter().map(|r| cell(r, c)).collect::<Vec<_>>())
    });

    // Feature layout: numeric columns as-is, categorical columns one-hot.
    enum Col {
        Numeric(usize),
        OneHot(usize, Vec<String>),
    }
    let mut layout = Vec::new();
    let mut feature_names = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if c == label_col || Some(c) == sens_col {
            continue;
        }
        if opts.categorical.contains(name) {
            let levels: BTreeSet<String> = rows.iter().map(|r| cell(r, c).trim().to_string()).collect();
            let levels: Vec<String> = levels.into_iter().collect();
            for l in &levels {
                feature_names.push(format!("{name}={l}"));
            }
            layout.push(Col::OneHot(c, levels));
        } else {
            feature_names.push(name.clone());
            layout.push(Col::Numeric(c));
        }
    }

    let mut samples = Vec::with_capacity(rows.len());
    for (r, rec) in rows.iter().enumerate() {
        let mut x = Vec::with_capacity(feature_names.len());
        for col in &layout {
            match col {
                Col::Numeric(c) => x.push(parse_cell(r + 1, &header[*c], &cell(rec, *c))?),
                Col::OneHot(c, levels) => {
                    let v = cell(rec, *c);
                    x.extend(levels.iter().map(|l| if *l == v.trim() { 1.0 } else { 0.0 }));
                }
            }
        }
        samples.push(Sample {
            x,
            y: labels[r],
            s: sensitive.as_ref().map(|s| s[r]),
        });
    }
    let mut ds = Dataset {
        samples,
        feature_names,
    };
    if opts.standardize {
        ds.standardize();
    }
    Ok(ds)
}

/// Synthetic dataset families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Synthetic {
    /// Two Gaussian blobs at `±separation/2` along every axis, labels 0/1.
    Blobs { n: usize, d: usize, separation: f64 },
    /// `y = wᵀx + b + noise·N(0,1)` with `w ~ N(0, I)`, `b ~ N(0,1)`.
    Regression { n: usize, d: usize, noise: f64 },
    /// Binary labels that follow the sensitive attribute with probability `bias`.
    BiasedGroups {
        n: usize,
        d: usize,
        bias: f64,
        proxy_shift: f64,
    },
}

/// A generated dataset together with the parameters of its generator.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    /// Generator weights (regression and biased-groups signal), bias last.
    pub true_weights: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Synthetic {
    /// Parses `synthetic:<kind>:key=val,...` (the prefix is optional).
    ///
    /// Kinds: `blobs` (n, d, sep), `regression` (n, d, noise),
    /// `biased` (n, d, bias, shift).
    pub fn parse(spec: &str) -> Result<Self> {
        let body = spec.strip_prefix("synthetic:").unwrap_or(spec);
        let (kind, args) = body.split_once(':').unwrap_or((body, ""));
        let mut kv = BTreeMap::new();
        for part in args.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("expected key=value in '{part}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("'{v}' is not a number in '{part}'")))?;
            kv.insert(k.trim().to_string(), v);
        }
        let get = |k: &str, default: f64| kv.get(k).copied().unwrap_or(default);
        let count = |k: &str, default: usize| -> Result<usize> {
            let v = get(k, default as f64);
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::Usage(format!("{k} must be a positive integer, got {v}")));
            }
            Ok(v as usize)
        };
        let parsed = match kind {
            "blobs" => Synthetic::Blobs {
                n: count("n", 500)?,
                d: count("d", 2)?,
                separation: get("sep", 2.0),
            },
            "regression" => Synthetic::Regression {
                n: count("n", 500)?,
                d: count("d", 5)?,
                noise: get("noise", 0.1),
            },
            "biased" => Synthetic::BiasedGroups {
                n: count("n", 4000)?,
                d: count("d", 14)?,
                bias: get("bias", 0.3),
                proxy_shift: get("shift", 1.0),
            },
            other => return Err(Error::Usage(format!("unknown synthetic kind '{other}'"))),
        };
        if let Synthetic::BiasedGroups { bias, .. } = parsed {
            if !(0.0..=1.0).contains(&bias) {
                return Err(Error::Usage(format!("bias must be in [0, 1], got {bias}")));
            }
        }
        Ok(parsed)
    }

    pub fn generate(&self, seed: u64) -> Generated {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        match *self {
            Synthetic::Blobs { n, d, separation } => {
                let samples = (0..n)
                    .map(|_| {
                        let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                        let centre = (y - 0.5) * separation;
                        let x = (0..d).map(|_| centre + normal(&mut rng)).collect();
                        Sample { x, y, s: None }
                    })
                    .collect();
                Generated {
                    data: Dataset::new(samples).expect("consistent widths"),
                    true_weights: Vec::new(),
                }
            }
            Synthetic::Regression { n, d, noise } => {
                let w: Vec<f64> = (0..=d).map(|_| normal(&mut rng)).collect();
                let samples = (0..n)
                    .map(|_| {
                        let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                        let mean = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
                        Sample {
                            y: mean + noise * normal(&mut rng),
                            x,
                            s: None,
                        }
                    })
                    .collect();
                Generated {
                    data: Dataset::new(samples).expect("consistent widths"),
                    true_weights: w,
                }
            }
            Synthetic::BiasedGroups {
                n,
                d,
                bias,
                proxy_shift,
            } => {
                // Coordinate 0 is a proxy of s that does not drive the clean label.
                let mut w: Vec<f64> = (0..=d).map(|_| normal(&mut rng)).collect();
                w[0] = 0.0;
                w[d] = 0.0;
                let samples = (0..n)
                    .map(|_| {
                        let s = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                        let mut x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                        x[0] += s * proxy_shift;
                        let logit: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
                        let clean = if rng.random_bool(sigmoid(logit)) { 1.0 } else { 0.0 };
                        let y = if rng.random_bool(bias) { s } else { clean };
                        Sample { x, y, s: Some(s) }
                    })
                    .collect();
                Generated {
                    data: Dataset::new(samples).expect("consistent widths"),
                    true_weights: w,
                }
            }
        }
    }
}

/// Loads `synthetic:...` specs or CSV files.
pub fn load_dataset(spec: &str, opts: &CsvOptions, seed: u64) -> Result<Dataset> {
    if spec.starts_with("synthetic:") {
        let mut ds = Synthetic::parse(spec)?.generate(seed).data;
        if opts.standardize {
            ds.standardize();
        }
        Ok(ds)
    } else {
        load_csv(Path::new(spec), opts)
    }
}

/// Held-out index sets for `folds` rounds of leave-`k`-out evaluation.
///
/// When `folds · k == n` the folds partition one seeded permutation (so
/// `k = 1, folds = n` is exact leave-one-out); otherwise each fold draws `k`
/// indices without replacement independently. Indices within a fold are sorted.
pub fn sample_folds(n: usize, k: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("held-out size k must satisfy 1 ≤ k < n = {n}, got {k}")));
    }
    if folds == 0 {
        return Err(Error::InvalidInput("at least one fold is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let permutation = |rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    };
    let out = if folds * k == n {
        let perm = permutation(&mut rng);
        perm.chunks(k)
            .map(|c| {
                let mut f = c.to_vec();
                f.sort_unstable();
                f
            })
            .collect()
    } else {
        (0..folds)
            .map(|_| {
                let mut f: Vec<usize> = permutation(&mut rng).into_iter().take(k).collect();
                f.sort_unstable();
                f
            })
            .collect()
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = Synthetic::parse("synthetic:biased:n=50,d=3")
            .unwrap()
            .generate(4)
            .data;
        ds.write_csv(&path).unwrap();
        let back = load_csv(
            &path,
            &CsvOptions {
                label: "y".into(),
                sensitive: Some("s".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            for (u, v) in a.x.iter().zip(&b.x) {
                assert!((u - v).abs() <= 1e-12);
            }
            assert_eq!(a.y, b.y);
            assert_eq!(a.s, b.s);
        }
    }

    #[test]
    fn standardization_moments() {
        let mut ds = Synthetic::parse("synthetic:regression:n=300,d=4")
            .unwrap()
            .generate(1)
            .data;
        for s in &mut ds.samples {
            s.x[1] = 3.0 * s.x[1] + 7.0;
        }
        ds.standardize();
        let n = ds.len() as f64;
        for j in 0..4 {
            let mean = ds.samples.iter().map(|s| s.x[j]).sum::<f64>() / n;
            let var = ds.samples.iter().map(|s| (s.x[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-10);
            assert!((var.sqrt() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn categorical_and_string_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(
            &path,
            "age,color,sex,label\n30,red,M,yes\n40,blue,F,no\n50,red,F,yes\n",
        )
        .unwrap();
        let ds = load_csv(
            &path,
            &CsvOptions {
                label: "label".into(),
                sensitive: Some("sex".into()),
                categorical: vec!["color".into()],
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!(ds.feature_names, vec!["age", "color=blue", "color=red"]);
        assert_eq!(ds.samples[1].x, vec![40.0, 1.0, 0.0]);
        assert_eq!(ds.samples[0].y, 1.0);
        assert_eq!(ds.samples[1].y, 0.0);
        assert_eq!(ds.samples[0].s, Some(1.0));
    }

    #[test]
    fn parse_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b,y\n1,2,0\n3,oops,1\n").unwrap();
        let err = load_csv(
            &path,
            &CsvOptions {
                label: "y".into(),
                ..Default::default()
            },
        )
        .unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected error {other}"),
        }
        let missing = load_csv(
            &path,
            &CsvOptions {
                label: "nope".into(),
                ..Default::default()
            },
        );
        assert!(missing.is_err());
    }

    #[test]
    fn synthetic_spec_parsing() {
        assert_eq!(
            Synthetic::parse("synthetic:blobs:n=10,d=3,sep=1.5").unwrap(),
            Synthetic::Blobs {
                n: 10,
                d: 3,
                separation: 1.5
            }
        );
        assert!(Synthetic::parse("synthetic:spiral").is_err());
        assert!(Synthetic::parse("synthetic:biased:bias=1.5").is_err());
        let a = Synthetic::parse("synthetic:blobs").unwrap().generate(9).data;
        let b = Synthetic::parse("synthetic:blobs").unwrap().generate(9).data;
        assert_eq!(a, b);
    }

    #[test]
    fn folds_cover_and_repeat() {
        let loo = sample_folds(7, 1, 7, 3).unwrap();
        let mut all: Vec<usize> = loo.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        let a = sample_folds(50, 10, 3, 9).unwrap();
        assert_eq!(a, sample_folds(50, 10, 3, 9).unwrap());
        assert!(a.iter().all(|f| f.len() == 10 && f.windows(2).all(|w| w[0] < w[1])));
        assert!(sample_folds(5, 5, 1, 0).is_err());
        assert!(sample_folds(5, 0, 1, 0).is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let ds = Synthetic::parse("synthetic:blobs:n=100").unwrap().generate(2).data;
        let (train, test) = ds.split(0.2, 5).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
    }
}
