//! Labeled sequences: synthetic generators, file loading, padding and
//! train/validation splits.
//!
//! Two file formats are understood.
//!
//! JSONL, one sample per line:
//!
//! ```text
//! {"label": 1, "elements": [[0.1, -0.3], [0.0, 2.5]]}
//! {"label": 0, "elements": [4, 17, 2]}
//! ```
//!
//! Delimited, one sample per line with tab-separated fields. The first field
//! is the label, every following field is one time step. A dense step is a
//! comma-separated feature list; a token step is a single integer id.
//!
//! ```text
//! 1	0.1,-0.3	0,2.5
//! 0	4	17	2
//! ```
//!
//! Lines that are empty or start with `#` are skipped in both formats.

// the delimited example above needs literal tabs
#![allow(clippy::tabs_in_doc_comments)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Elements {
    Dense(Vec<Vec<f64>>),
    Tokens(Vec<usize>),
}

impl Elements {
    pub fn len(&self) -> usize {
        match self {
            Elements::Dense(v) => v.len(),
            Elements::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One labeled sequence. The label is stored as a class index; see
/// [`Sample::one_hot`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: usize,
    pub elements: Elements,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn one_hot(&self, num_classes: usize) -> Vec<f64> {
        one_hot(self.label, num_classes)
    }
}

pub fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub mode: InputMode,
    pub num_classes: usize,
    pub t_end: usize,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        mode: InputMode,
        num_classes: usize,
        t_end: usize,
    ) -> Result<Self> {
        let ds = Dataset {
            samples,
            mode,
            num_classes,
            t_end,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks that the dataset is non-empty and homogeneous.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if self.num_classes < 2 || self.t_end == 0 {
            return Err(Error::invalid(
                "dataset needs at least 2 classes and T_end >= 1",
            ));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(Error::invalid(format!(
                    "sample {i}: label {} out of range",
                    s.label
                )));
            }
            if s.len() != self.t_end {
                return Err(Error::invalid(format!(
                    "sample {i}: {} elements, expected {}",
                    s.len(),
                    self.t_end
                )));
            }
            match (&s.elements, self.mode) {
                (Elements::Dense(rows), InputMode::Dense { feature_dim }) => {
                    if rows
                        .iter()
                        .any(|r| r.len() != feature_dim || r.iter().any(|x| !x.is_finite()))
                    {
                        return Err(Error::invalid(format!("sample {i}: bad dense element")));
                    }
                }
                (Elements::Tokens(ids), InputMode::Tokens { vocab, .. }) => {
                    if ids.iter().any(|&id| id > vocab) {
                        return Err(Error::invalid(format!(
                            "sample {i}: token id above pad id {vocab}"
                        )));
                    }
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "sample {i}: element kind does not match mode"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            mode: self.mode,
            num_classes: self.num_classes,
            t_end: self.t_end,
        }
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Parameters of the motif generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub n: usize,
    pub t_end: usize,
    pub num_classes: usize,
    pub motif_len: usize,
    /// Earliest and latest 1-based motif start.
    pub window: (usize, usize),
    pub noise_sigma: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

/// Gaussian-noise sequences with a class-identifying motif.
///
/// Every sample has `C` features per step. A motif of `motif_len` steps
/// adds `amplitude * e_c` for the sample's class `c`, starting at a
/// uniformly drawn 1-based position in `window`. Labels are uniform.
pub fn gen_motif(spec: &MotifSpec) -> Result<Dataset> {
    let (lo, hi) = spec.window;
    if spec.n == 0 || spec.num_classes < 2 || spec.motif_len == 0 || spec.t_end == 0 {
        return Err(Error::config(
            "motif generator needs n >= 1, C >= 2, motif_len >= 1, T_end >= 1",
        ));
    }
    if lo < 1 || lo > hi || spec.motif_len > spec.t_end || hi > spec.t_end - spec.motif_len + 1 {
        return Err(Error::config(format!(
            "motif window [{lo}, {hi}] must satisfy 1 <= lo <= hi <= T_end - motif_len + 1 = {}",
            (spec.t_end + 1).saturating_sub(spec.motif_len)
        )));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.amplitude.is_finite() {
        return Err(Error::config(
            "noise_sigma must be >= 0 and amplitude finite",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let c = spec.num_classes;
    let samples = (0..spec.n)
        .map(|_| {
            let label = rng.random_range(0..c);
            let start = rng.random_range(lo..=hi) - 1;
            let rows = (0..spec.t_end)
                .map(|t| {
                    let mut row: Vec<f64> = (0..c)
                        .map(|_| {
                            if spec.noise_sigma > 0.0 {
                                noise.sample(&mut rng)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    if (start..start + spec.motif_len).contains(&t) {
                        row[label] += spec.amplitude;
                    }
                    row
                })
                .collect();
            Sample {
                label,
                elements: Elements::Dense(rows),
            }
        })
        .collect();
    Dataset::new(samples, InputMode::Dense { feature_dim: c }, c, spec.t_end)
}

/// Parameters of the drifting random-walk generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftWalkSpec {
    pub n: usize,
    pub t_end: usize,
    pub drift_range: f64,
    pub vol: f64,
    pub seed: u64,
}

/// Random walks whose per-sample drift is uniform in `±drift_range`.
///
/// Features are the per-step increments `drift + vol * N(0, 1)`. The label
/// is 1 ("up") when the final value exceeds the initial one, else 0.
pub fn gen_drift_walk(spec: &DriftWalkSpec) -> Result<Dataset> {
    if !(spec.vol > 0.0) || !(spec.drift_range >= 0.0) || spec.n == 0 || spec.t_end == 0 {
        return Err(Error::config(
            "drift walk needs vol > 0, drift_range >= 0, n >= 1, T_end >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let samples = (0..spec.n)
        .map(|_| {
            let drift = if spec.drift_range > 0.0 {
                rng.random_range(-spec.drift_range..=spec.drift_range)
            } else {
                0.0
            };
            let rows: Vec<Vec<f64>> = (0..spec.t_end)
                .map(|_| vec![drift + spec.vol * normal.sample(&mut rng)])
                .collect();
            let total: f64 = rows.iter().map(|r| r[0]).sum();
            Sample {
                label: (total > 0.0) as usize,
                elements: Elements::Dense(rows),
            }
        })
        .collect();
    Dataset::new(samples, InputMode::Dense { feature_dim: 1 }, 2, spec.t_end)
}

/// Truncates to the first `t_end` elements or appends `pad` until the
/// length is `t_end`.
pub fn pad_truncate<T: Clone>(mut elements: Vec<T>, t_end: usize, pad: T) -> Vec<T> {
    elements.truncate(t_end);
    elements.resize(t_end, pad);
    elements
}

fn pad_elements(elements: Elements, mode: InputMode, t_end: usize) -> Elements {
    match (elements, mode) {
        (Elements::Dense(rows), InputMode::Dense { feature_dim }) => {
            Elements::Dense(pad_truncate(rows, t_end, vec![0.0; feature_dim]))
        }
        (Elements::Tokens(ids), InputMode::Tokens { vocab, .. }) => {
            Elements::Tokens(pad_truncate(ids, t_end, vocab))
        }
        (e, _) => e,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Jsonl,
    Delimited,
}

impl FileFormat {
    /// `.jsonl`/`.json` map to JSONL, `.tsv`/`.txt` to delimited.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(FileFormat::Jsonl),
            "tsv" | "txt" | "delimited" => Some(FileFormat::Delimited),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct JsonRow {
    label: usize,
    elements: serde_json::Value,
}

fn parse_elements_json(
    value: serde_json::Value,
    mode: InputMode,
) -> std::result::Result<Elements, String> {
    match mode {
        InputMode::Dense { .. } => serde_json::from_value::<Vec<Vec<f64>>>(value)
            .map(Elements::Dense)
            .map_err(|e| format!("dense elements must be a list of number lists: {e}")),
        InputMode::Tokens { .. } => serde_json::from_value::<Vec<usize>>(value)
            .map(Elements::Tokens)
            .map_err(|e| format!("token elements must be a list of non-negative integers: {e}")),
    }
}

fn parse_elements_delimited<'a>(
    fields: impl Iterator<Item = &'a str>,
    mode: InputMode,
) -> std::result::Result<Elements, String> {
    match mode {
        InputMode::Dense { .. } => fields
            .map(|f| {
                f.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|e| format!("bad feature {x:?}: {e}"))
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Elements::Dense),
        InputMode::Tokens { .. } => fields
            .map(|f| {
                f.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("bad token {f:?}: {e}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Elements::Tokens),
    }
}

/// Reads, validates and pads/truncates a dataset file.
pub fn load_dataset(
    path: &Path,
    format: FileFormat,
    mode: InputMode,
    num_classes: usize,
    t_end: usize,
) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, elements) = match format {
            FileFormat::Jsonl => {
                let row: JsonRow =
                    serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
                (
                    row.label,
                    parse_elements_json(row.elements, mode).map_err(|m| err(line_no, m))?,
                )
            }
            FileFormat::Delimited => {
                let mut fields = line.split('\t');
                let label = fields
                    .next()
                    .unwrap_or_default()
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| err(line_no, format!("bad label: {e}")))?;
                (
                    label,
                    parse_elements_delimited(fields, mode).map_err(|m| err(line_no, m))?,
                )
            }
        };
        if label >= num_classes {
            return Err(err(
                line_no,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        if elements.is_empty() {
            return Err(err(line_no, "row has no elements".into()));
        }
        match (&elements, mode) {
            (Elements::Dense(rows), InputMode::Dense { feature_dim }) => {
                if let Some(r) = rows.iter().find(|r| r.len() != feature_dim) {
                    return Err(err(
                        line_no,
                        format!("element has {} features, expected {feature_dim}", r.len()),
                    ));
                }
                if rows.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(err(line_no, "non-finite feature".into()));
                }
            }
            (Elements::Tokens(ids), InputMode::Tokens { vocab, .. }) => {
                if let Some(id) = ids.iter().find(|&&id| id >= vocab) {
                    return Err(err(
                        line_no,
                        format!("token id {id} outside vocabulary of {vocab}"),
                    ));
                }
            }
            _ => unreachable!("parsed according to mode"),
        }
        samples.push(Sample {
            label,
            elements: pad_elements(elements, mode, t_end),
        });
    }
    if samples.is_empty() {
        return Err(err(0, "file contains no samples".into()));
    }
    Dataset::new(samples, mode, num_classes, t_end)
}

/// Serializes a dataset in the given format.
pub fn write_dataset(dataset: &Dataset, format: FileFormat, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &dataset.samples {
        match format {
            FileFormat::Jsonl => {
                out.push_str(&serde_json::to_string(s)?);
            }
            FileFormat::Delimited => {
                write!(out, "{}", s.label).unwrap();
                match &s.elements {
                    Elements::Dense(rows) => {
                        for r in rows {
                            out.push('\t');
                            let joined: Vec<String> = r.iter().map(|x| x.to_string()).collect();
                            out.push_str(&joined.join(","));
                        }
                    }
                    Elements::Tokens(ids) => {
                        for id in ids {
                            write!(out, "\t{id}").unwrap();
                        }
                    }
                }
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Random disjoint split; the validation part has `round(n * val_fraction)`
/// samples. Both parts keep the original sample order.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n = dataset.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::config(format!(
            "fraction {val_fraction} of {n} samples leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, train_idx) = order.split_at_mut(n_val);
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((dataset.subset(train_idx), dataset.subset(val_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motif(n: usize, sigma: f64, seed: u64) -> MotifSpec {
        MotifSpec {
            n,
            t_end: 20,
            num_classes: 3,
            motif_len: 3,
            window: (4, 10),
            noise_sigma: sigma,
            amplitude: 1.0,
            seed,
        }
    }

    #[test]
    fn pad_truncate_cases() {
        assert_eq!(pad_truncate(vec![1, 2, 3, 4, 5], 3, 0), vec![1, 2, 3]);
        assert_eq!(pad_truncate(vec![1, 2, 3], 5, 0), vec![1, 2, 3, 0, 0]);
        assert_eq!(pad_truncate(vec![1, 2, 3], 3, 0), vec![1, 2, 3]);
    }

    #[test]
    fn motif_noiseless_structure() {
        let ds = gen_motif(&motif(200, 0.0, 1)).unwrap();
        for s in &ds.samples {
            let Elements::Dense(rows) = &s.elements else {
                panic!()
            };
            let active: Vec<usize> = (0..rows.len())
                .filter(|&t| rows[t].iter().any(|&x| x != 0.0))
                .collect();
            assert_eq!(active.len(), 3);
            assert!(active.windows(2).all(|w| w[1] == w[0] + 1));
            assert!((3..=9).contains(&active[0]));
            for &t in &active {
                assert_eq!(rows[t], one_hot(s.label, 3));
            }
        }
    }

    #[test]
    fn motif_invalid_window() {
        let mut spec = motif(10, 0.1, 1);
        spec.window = (0, 5);
        assert!(gen_motif(&spec).is_err());
        spec.window = (5, 19);
        assert!(gen_motif(&spec).is_err());
        spec.window = (7, 6);
        assert!(gen_motif(&spec).is_err());
        spec.window = (18, 18);
        assert!(gen_motif(&spec).is_ok());
    }

    #[test]
    fn motif_classes_balanced() {
        let ds = gen_motif(&MotifSpec {
            n: 10_000,
            t_end: 8,
            window: (1, 3),
            ..motif(0, 0.1, 9)
        })
        .unwrap();
        let expected = 10_000.0 / 3.0;
        let chi2: f64 = ds
            .class_counts()
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-square with 2 degrees of freedom
        assert!(chi2 < 13.82, "{chi2}");
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            gen_motif(&motif(50, 0.3, 5)).unwrap(),
            gen_motif(&motif(50, 0.3, 5)).unwrap()
        );
        let w = DriftWalkSpec {
            n: 50,
            t_end: 10,
            drift_range: 0.1,
            vol: 0.2,
            seed: 3,
        };
        assert_eq!(gen_drift_walk(&w).unwrap(), gen_drift_walk(&w).unwrap());
    }

    #[test]
    fn drift_walk_labels() {
        let up = gen_drift_walk(&DriftWalkSpec {
            n: 500,
            t_end: 30,
            drift_range: 0.0,
            vol: 1e-12,
            seed: 1,
        });
        assert!(up.is_ok());
        // positive drift with negligible volatility is always "up"
        let mut spec = DriftWalkSpec {
            n: 500,
            t_end: 30,
            drift_range: 0.5,
            vol: 1e-9,
            seed: 2,
        };
        let ds = gen_drift_walk(&spec).unwrap();
        for s in &ds.samples {
            let Elements::Dense(rows) = &s.elements else {
                panic!()
            };
            if rows[0][0] > 1e-6 {
                assert_eq!(s.label, 1);
            }
        }
        spec.drift_range = 0.0;
        spec.vol = 1.0;
        spec.n = 10_000;
        let rate = gen_drift_walk(&spec).unwrap().class_counts()[1] as f64 / 10_000.0;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = gen_motif(&motif(100, 0.1, 2)).unwrap();
        let (train, val) = split(&ds, 0.15, 11).unwrap();
        assert_eq!((train.len(), val.len()), (85, 15));
        let mut all: Vec<&Sample> = train.samples.iter().chain(&val.samples).collect();
        assert_eq!(all.len(), 100);
        for s in &ds.samples {
            let pos = all
                .iter()
                .position(|x| *x == s)
                .expect("every sample lands in a split");
            all.swap_remove(pos);
        }
        assert_eq!(split(&ds, 0.15, 11).unwrap(), (train, val));
        assert!(split(&ds, 0.001, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn load_pads_and_truncates_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reviews.jsonl");
        let long: Vec<usize> = (0..300).map(|i| i % 50).collect();
        let short: Vec<usize> = (0..100).map(|i| i % 50).collect();
        let text = format!(
            "{}\n{}\n",
            serde_json::json!({"label": 1, "elements": long}),
            serde_json::json!({"label": 0, "elements": short})
        );
        fs::write(&path, text).unwrap();
        let mode = InputMode::Tokens {
            vocab: 50,
            embed_dim: 8,
        };
        let ds = load_dataset(&path, FileFormat::Jsonl, mode, 2, 236).unwrap();
        let Elements::Tokens(a) = &ds.samples[0].elements else {
            panic!()
        };
        let Elements::Tokens(b) = &ds.samples[1].elements else {
            panic!()
        };
        assert_eq!(a.len(), 236);
        assert_eq!(&a[..], &long[..236]);
        assert_eq!(b.len(), 236);
        assert_eq!(&b[..100], &short[..]);
        assert!(b[100..].iter().all(|&id| id == 50));
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mode = InputMode::Dense { feature_dim: 2 };
        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_dataset(&empty, FileFormat::Jsonl, mode, 2, 4).is_err());

        let bad = dir.path().join("bad.jsonl");
        fs::write(
            &bad,
            "{\"label\": 0, \"elements\": [[1,2]]}\n{\"label\": 0, \"elements\": oops}\n",
        )
        .unwrap();
        match load_dataset(&bad, FileFormat::Jsonl, mode, 2, 4) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        let range = dir.path().join("range.tsv");
        fs::write(&range, "0\t1,2\n5\t1,2\n").unwrap();
        match load_dataset(&range, FileFormat::Delimited, mode, 2, 4) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("out of range"));
            }
            other => panic!("{other:?}"),
        }
        assert!(load_dataset(
            &dir.path().join("missing.jsonl"),
            FileFormat::Jsonl,
            mode,
            2,
            4
        )
        .is_err());
    }

    #[test]
    fn write_load_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_motif(&motif(30, 0.7, 4)).unwrap();
        for (format, name) in [
            (FileFormat::Jsonl, "d.jsonl"),
            (FileFormat::Delimited, "d.tsv"),
        ] {
            let path = dir.path().join(name);
            write_dataset(&ds, format, &path).unwrap();
            let back = load_dataset(&path, format, ds.mode, ds.num_classes, ds.t_end).unwrap();
            assert_eq!(back, ds);
        }
    }
}
