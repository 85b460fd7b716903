//! Model, local training and federated averaging.
//!
//! The model is L2-regularised logistic regression with a bias term stored as
//! the last weight. Aggregation only sees flat weight vectors, so nothing
//! downstream depends on the model class.

pub mod data;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::he::{he_add, he_scalar_mul, HeCiphertext, HeError, HePublicKey};

pub use data::{DataConfig, Dataset};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("nothing to aggregate")]
    EmptyAggregation,
    #[error("ciphertexts under different keys")]
    KeyMismatch,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error(transparent)]
    He(#[from] HeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub values: Vec<f64>,
}

impl ModelWeights {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(d: usize) -> Self {
        Self { values: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Model dimension for `features` inputs (one extra bias weight).
    pub fn dim_for(features: usize) -> usize {
        features + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Weight decay on the non-bias weights.
    #[serde(default)]
    pub l2: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, epochs: 1, batch_size: 16, seed: 0, l2: 0.0 }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FlError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(FlError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(FlError::InvalidConfig(format!("l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

fn check_dim(w: &ModelWeights, data: &Dataset) -> Result<(), FlError> {
    let expected = ModelWeights::dim_for(data.dim());
    if w.dim() != expected {
        return Err(FlError::DimensionMismatch { expected, got: w.dim() });
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sample_loss(w: &[f64], x: &[f64], y: u8) -> f64 {
    let z = logit(w, x);
    if y == 1 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// Regularised mean loss over `idx` (the objective `gradient` differentiates).
pub fn objective(w: &ModelWeights, data: &Dataset, idx: &[usize], l2: f64) -> Result<f64, FlError> {
    check_dim(w, data)?;
    let d = data.dim();
    let mean = idx.iter().map(|&i| sample_loss(&w.values, data.row(i), data.label(i))).sum::<f64>() / idx.len() as f64;
    let reg = 0.5 * l2 * w.values[..d].iter().map(|v| v * v).sum::<f64>();
    Ok(mean + reg)
}

/// Gradient of [`objective`] over the rows in `idx`.
pub fn gradient(w: &ModelWeights, data: &Dataset, idx: &[usize], l2: f64) -> Result<Vec<f64>, FlError> {
    check_dim(w, data)?;
    let d = data.dim();
    let mut g = vec![0.0; d + 1];
    for &i in idx {
        let x = data.row(i);
        let err = sigmoid(logit(&w.values, x)) - f64::from(data.label(i));
        for (gj, xj) in g[..d].iter_mut().zip(x) {
            *gj += err * xj;
        }
        g[d] += err;
    }
    let n = idx.len() as f64;
    for (j, gj) in g.iter_mut().enumerate() {
        *gj /= n;
        if j < d {
            *gj += l2 * w.values[j];
        }
    }
    Ok(g)
}

/// Mini-batch gradient descent; batches are reshuffled every epoch from
/// `cfg.seed`.
pub fn local_train(w: &ModelWeights, data: &Dataset, cfg: &TrainingConfig) -> Result<ModelWeights, FlError> {
    check_dim(w, data)?;
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut out = w.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let g = gradient(&out, data, batch, cfg.l2)?;
            for (v, gj) in out.values.iter_mut().zip(&g) {
                *v -= cfg.learning_rate * gj;
            }
        }
    }
    Ok(out)
}

/// Mean logistic loss and accuracy at threshold 0.5.
pub fn evaluate(w: &ModelWeights, data: &Dataset) -> Result<(f64, f64), FlError> {
    check_dim(w, data)?;
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let x = data.row(i);
        let y = data.label(i);
        loss += sample_loss(&w.values, x, y);
        let pred = u8::from(logit(&w.values, x) > 0.0);
        correct += usize::from(pred == y);
    }
    Ok((loss / n, correct as f64 / n))
}

/// Sample-count-weighted mean of client weights.
pub fn fedavg_plain(updates: &[(ModelWeights, u64)]) -> Result<ModelWeights, FlError> {
    let (first, _) = updates.first().ok_or(FlError::EmptyAggregation)?;
    let d = first.dim();
    let total: u64 = updates.iter().map(|u| u.1).sum();
    if total == 0 {
        return Err(FlError::EmptyAggregation);
    }
    let mut acc = vec![0.0; d];
    for (w, n) in updates {
        if w.dim() != d {
            return Err(FlError::DimensionMismatch { expected: d, got: w.dim() });
        }
        for (a, v) in acc.iter_mut().zip(&w.values) {
            *a += *n as f64 * v;
        }
    }
    Ok(ModelWeights::new(acc.into_iter().map(|a| a / total as f64).collect()))
}

/// Homomorphic numerator of FedAvg: coordinate-wise `sum_k n_k * ct_k`, plus
/// the divisor `sum_k n_k` to apply after decryption.
pub fn fedavg_encrypted(
    pk: &HePublicKey,
    cts: &[(Vec<HeCiphertext>, u64)],
) -> Result<(Vec<HeCiphertext>, u64), FlError> {
    let (first, _) = cts.first().ok_or(FlError::EmptyAggregation)?;
    let d = first.len();
    let fp = pk.fingerprint();
    let mut acc: Option<Vec<HeCiphertext>> = None;
    let mut divisor = 0u64;
    for (v, n) in cts {
        if v.len() != d {
            return Err(FlError::DimensionMismatch { expected: d, got: v.len() });
        }
        if v.iter().any(|c| c.fingerprint != fp) {
            return Err(FlError::KeyMismatch);
        }
        let k = BigUint::from(*n);
        let scaled = v.iter().map(|c| he_scalar_mul(pk, c, &k)).collect::<Result<Vec<_>, _>>()?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => a.iter().zip(&scaled).map(|(x, y)| he_add(pk, x, y)).collect::<Result<Vec<_>, _>>()?,
        });
        divisor += n;
    }
    if divisor == 0 {
        return Err(FlError::EmptyAggregation);
    }
    Ok((acc.expect("non-empty"), divisor))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub weights: ModelWeights,
    pub round: u64,
    pub history: Vec<RoundRecord>,
}

impl GlobalModel {
    pub fn new(weights: ModelWeights) -> Self {
        Self { weights, round: 0, history: Vec::new() }
    }

    /// Installs the aggregate of the next round and records its metrics.
    pub fn advance(&mut self, weights: ModelWeights, loss: f64, accuracy: f64) {
        self.round += 1;
        self.weights = weights;
        self.history.push(RoundRecord { round: self.round, loss, accuracy });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub target_accuracy: f64,
    pub min_delta: f64,
    pub patience: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { target_accuracy: 0.95, min_delta: 1e-4, patience: 3 }
    }
}

/// True once the latest accuracy reaches the target, or the loss improved by
/// less than `min_delta` across the last `patience` rounds.
pub fn has_converged(model: &GlobalModel, t: &Thresholds) -> bool {
    let Some(last) = model.history.last() else {
        return false;
    };
    if last.accuracy >= t.target_accuracy {
        return true;
    }
    let h = &model.history;
    t.patience >= 2 && h.len() >= t.patience && h[h.len() - t.patience].loss - last.loss < t.min_delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::{decrypt_vector, encrypt_vector, he_keygen, FixedPointCodec};
    use crate::par::Exec;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> Dataset {
        let cfg = DataConfig { features: 2, samples_min: n, samples_max: n, ..DataConfig::default() };
        data::generate_device(&cfg, seed, 0)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let d = toy(20, 1);
        let w = ModelWeights::new(vec![0.3, -0.2, 0.1]);
        let cfg = TrainingConfig { epochs: 0, ..TrainingConfig::default() };
        assert_eq!(local_train(&w, &d, &cfg).unwrap(), w);
        let bad = ModelWeights::zeros(5);
        assert_eq!(local_train(&bad, &d, &cfg), Err(FlError::DimensionMismatch { expected: 3, got: 5 }));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = toy(40, 2);
        let idx: Vec<usize> = (0..d.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..10 {
            let w = ModelWeights::new((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let g = gradient(&w, &d, &idx, 0.05).unwrap();
            for (j, gj) in g.iter().enumerate() {
                let h = 1e-5;
                let mut plus = w.clone();
                plus.values[j] += h;
                let mut minus = w.clone();
                minus.values[j] -= h;
                let fd = (objective(&plus, &d, &idx, 0.05).unwrap() - objective(&minus, &d, &idx, 0.05).unwrap()) / (2.0 * h);
                assert!((fd - gj).abs() < 1e-4, "coord {j}: fd {fd} vs {gj}");
            }
        }
    }

    #[test]
    fn training_learns_separable_toy() {
        let d = toy(200, 4);
        let cfg = TrainingConfig { learning_rate: 0.1, epochs: 50, batch_size: 16, seed: 1, l2: 0.0 };
        let w = local_train(&ModelWeights::zeros(3), &d, &cfg).unwrap();
        let (_, acc) = evaluate(&w, &d).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
        assert_eq!(local_train(&ModelWeights::zeros(3), &d, &cfg).unwrap(), w);
    }

    #[test]
    fn evaluate_basics() {
        let d = Dataset::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 1.0]], vec![1, 0, 1]).unwrap();
        let (loss, acc) = evaluate(&ModelWeights::zeros(3), &d).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        // All logits are 0 -> predicted class 0; majority is class 1 here.
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        let sep = ModelWeights::new(vec![10.0, 0.0, 0.0]);
        assert_eq!(evaluate(&sep, &d).unwrap().1, 1.0);
        let flipped = Dataset::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 1.0]], vec![0, 1, 0]).unwrap();
        let w = ModelWeights::new(vec![0.5, -3.0, 0.2]);
        let a = evaluate(&w, &d).unwrap().1;
        let b = evaluate(&w, &flipped).unwrap().1;
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fedavg_examples() {
        let w = ModelWeights::new(vec![1.5, -2.0]);
        assert_eq!(fedavg_plain(&[(w.clone(), 3), (w.clone(), 7)]).unwrap(), w);
        let a = ModelWeights::new(vec![1.0]);
        let b = ModelWeights::new(vec![3.0]);
        assert_eq!(fedavg_plain(&[(a.clone(), 1), (b, 1)]).unwrap().values, vec![2.0]);
        let c = ModelWeights::new(vec![4.0]);
        assert_eq!(fedavg_plain(&[(a, 1), (c, 3)]).unwrap().values, vec![3.25]);
        assert_eq!(fedavg_plain(&[]), Err(FlError::EmptyAggregation));
    }

    #[test]
    fn encrypted_fedavg_matches_plain() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let keys = he_keygen(256, &mut rng).unwrap();
        let codec = FixedPointCodec::new(keys.public.n().clone(), 10_000).unwrap();
        let updates: Vec<(ModelWeights, u64)> = (0..4)
            .map(|_| (ModelWeights::new((0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()), rng.gen_range(1..50)))
            .collect();
        let cts: Vec<(Vec<HeCiphertext>, u64)> = updates
            .iter()
            .map(|(w, n)| {
                let enc = codec.encode_vector(&w.values);
                (encrypt_vector(&keys.public, &enc.residues, &mut rng, Exec::Sequential).unwrap(), *n)
            })
            .collect();
        let (sum, div) = fedavg_encrypted(&keys.public, &cts).unwrap();
        let dec = codec.decode_vector(&decrypt_vector(&keys, &sum, Exec::Sequential).unwrap(), div);
        let plain = fedavg_plain(&updates).unwrap();
        for (a, b) in dec.iter().zip(&plain.values) {
            assert!((a - b).abs() < 1e-3);
        }

        let single = fedavg_encrypted(&keys.public, &cts[..1]).unwrap();
        assert_eq!(single.1, updates[0].1);

        let other = he_keygen(256, &mut rng).unwrap();
        let foreign = encrypt_vector(&other.public, &codec.encode_vector(&[0.0; 6]).residues, &mut rng, Exec::Sequential);
        let mixed = vec![cts[0].clone(), (foreign.unwrap(), 1)];
        assert_eq!(fedavg_encrypted(&keys.public, &mixed), Err(FlError::KeyMismatch));
    }

    #[test]
    fn convergence_rule() {
        let t = Thresholds { target_accuracy: 0.95, min_delta: 1e-3, patience: 3 };
        let mut m = GlobalModel::new(ModelWeights::zeros(2));
        assert!(!has_converged(&m, &t));
        m.advance(ModelWeights::zeros(2), 0.5, 0.96);
        assert!(has_converged(&m, &t));

        let mut m = GlobalModel::new(ModelWeights::zeros(2));
        m.advance(ModelWeights::zeros(2), 0.4, 0.8);
        m.advance(ModelWeights::zeros(2), 0.4, 0.8);
        assert!(!has_converged(&m, &t));
        m.advance(ModelWeights::zeros(2), 0.4, 0.8);
        assert!(has_converged(&m, &t));
        assert_eq!(m.round, 3);
    }

    proptest! {
        #[test]
        fn fedavg_is_permutation_invariant(
            ws in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 1u64..20), 1..8),
            rot in 0usize..8,
        ) {
            let updates: Vec<(ModelWeights, u64)> = ws.into_iter().map(|(v, n)| (ModelWeights::new(v), n)).collect();
            let mut rotated = updates.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            let a = fedavg_plain(&updates).unwrap();
            let b = fedavg_plain(&rotated).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn evaluate_ranges(seed in any::<u64>(), w in prop::collection::vec(-10.0f64..10.0, 3)) {
            let d = toy(30, seed);
            let (loss, acc) = evaluate(&ModelWeights::new(w), &d).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }
}
