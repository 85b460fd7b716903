//! Datasets and the synthetic Gaussian-blob generator.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FlError;
use crate::seeded_rng;

/// Binary classification data stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u8>,
    dim: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self, FlError> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| FlError::InvalidData("no rows".into()))?;
        if rows.len() != labels.len() {
            return Err(FlError::InvalidData(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        if dim == 0 {
            return Err(FlError::InvalidData("rows have no features".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(FlError::DimensionMismatch { expected: dim, got: r.len() });
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(FlError::InvalidData("labels must be 0 or 1".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FlError::InvalidData("non-finite feature".into()));
        }
        Ok(Self { features: rows.concat(), labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of features per row.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Writes CSV with header `f1,...,fd,label`.
    pub fn to_csv(&self, out: impl Write) -> Result<(), FlError> {
        let io = |e: csv::Error| FlError::InvalidData(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(io)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| FlError::InvalidData(e.to_string()))
    }

    pub fn from_csv(input: impl Read) -> Result<Self, FlError> {
        let bad = |m: String| FlError::InvalidData(m);
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let d = header.len().checked_sub(1).filter(|d| *d > 0).ok_or_else(|| bad("header too short".into()))?;
        let expected: Vec<String> = (1..=d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(bad(format!("expected header {}", expected.join(","))));
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let vals = rec
                .iter()
                .take(d)
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            let y: u8 = rec[d].trim().parse().map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            rows.push(vals);
            labels.push(y);
        }
        Self::new(rows, labels)
    }
}

/// Parameters of the synthetic two-blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub features: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    /// Class centres sit at `+-separation` on every axis.
    pub separation: f64,
    pub spread: f64,
    /// Per-device positive-class fraction is drawn from `0.5 +- label_skew / 2`.
    pub label_skew: f64,
    /// Per-device covariate shift, uniform in `[-shift, shift]` per axis.
    pub shift: f64,
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            features: 2,
            samples_min: 40,
            samples_max: 120,
            separation: 1.5,
            spread: 1.0,
            label_skew: 0.6,
            shift: 0.5,
            test_samples: 2000,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        let bad = |m: &str| Err(FlError::InvalidData(m.to_string()));
        if self.features == 0 {
            return bad("features must be >= 1");
        }
        if self.samples_min == 0 || self.samples_min > self.samples_max {
            return bad("need 1 <= samples_min <= samples_max");
        }
        if !(self.spread > 0.0 && self.separation.is_finite() && self.shift >= 0.0) {
            return bad("spread must be > 0 and shift >= 0");
        }
        if !(0.0..=1.0).contains(&self.label_skew) {
            return bad("label_skew must lie in [0, 1]");
        }
        if self.test_samples == 0 {
            return bad("test_samples must be >= 1");
        }
        Ok(())
    }
}

fn blob_rows(cfg: &DataConfig, n: usize, pos_frac: f64, offset: &[f64], rng: &mut impl Rng) -> Dataset {
    let noise = Normal::new(0.0, cfg.spread).expect("validated spread");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = u8::from(rng.gen_bool(pos_frac));
        let c = if y == 1 { cfg.separation } else { -cfg.separation };
        rows.push(offset.iter().map(|o| c + o + noise.sample(rng)).collect());
        labels.push(y);
    }
    Dataset::new(rows, labels).expect("generated rows are well formed")
}

/// Local data of device `device`. Sample count, label balance and covariate
/// shift all vary per device.
pub fn generate_device(cfg: &DataConfig, seed: u64, device: usize) -> Dataset {
    let mut rng = seeded_rng(seed, &format!("data/device/{device}"));
    let n = rng.gen_range(cfg.samples_min..=cfg.samples_max);
    let pos_frac = 0.5 + cfg.label_skew * (rng.gen::<f64>() - 0.5);
    let offset: Vec<f64> = (0..cfg.features).map(|_| cfg.shift * (2.0 * rng.gen::<f64>() - 1.0)).collect();
    blob_rows(cfg, n, pos_frac, &offset, &mut rng)
}

/// Balanced, unshifted held-out set.
pub fn generate_test(cfg: &DataConfig, seed: u64) -> Dataset {
    let mut rng = seeded_rng(seed, "data/test");
    blob_rows(cfg, cfg.test_samples, 0.5, &vec![0.0; cfg.features], &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let cfg = DataConfig { features: 3, samples_min: 7, samples_max: 7, ..DataConfig::default() };
        let d = generate_device(&cfg, 1, 0);
        let mut buf = Vec::new();
        d.to_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"f1,f2,f3,label\n"));
        assert_eq!(Dataset::from_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn csv_rejects_bad_input() {
        assert!(Dataset::from_csv("a,b\n1,0\n".as_bytes()).is_err());
        assert!(Dataset::from_csv("f1,label\n1.0,2\n".as_bytes()).is_err());
        assert!(Dataset::from_csv("f1,label\nx,1\n".as_bytes()).is_err());
    }

    #[test]
    fn generator_is_deterministic_and_varies_by_device() {
        let cfg = DataConfig::default();
        assert_eq!(generate_device(&cfg, 5, 3), generate_device(&cfg, 5, 3));
        assert_ne!(generate_device(&cfg, 5, 3), generate_device(&cfg, 5, 4));
        let d = generate_device(&cfg, 5, 3);
        assert!((cfg.samples_min..=cfg.samples_max).contains(&d.len()));
        let t = generate_test(&cfg, 5);
        assert_eq!(t.len(), 2000);
        let pos = t.labels().iter().filter(|&&y| y == 1).count();
        assert!((900..1100).contains(&pos));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0, 1]).is_err());
        assert!(Dataset::new(vec![vec![1.0]], vec![2]).is_err());
    }
}
