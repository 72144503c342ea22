//! Triplet fine-tuning of a linear embedding head over fixed raw descriptors.
//!
//! The tunable model is an affine map `W x + b`, initialized to identity so
//! the untuned head reproduces raw-descriptor behavior exactly. Training is
//! plain SGD, one tuple per step, with optional global-norm gradient clipping
//! and optional cosine learning-rate decay. For the loss
//! `L = sum_i max(d(q,p) + m - d(q,n_i), 0)` over Euclidean embedded
//! distances, the bias cancels out of every distance, so only the weight
//! matrix actually moves; the bias stays in the model for generality.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::DescriptorStore;
use crate::mining::{TrainingTuple, TupleStatus};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tuple with anchor {anchor} has status {status:?}; only Inlier tuples may train")]
    RejectedTupleInTrainingSet { anchor: usize, status: TupleStatus },
    #[error("no descriptor stored for keyframe {0}")]
    MissingDescriptor(usize),
    #[error("active triplet term with a vanishing embedded distance; gradient undefined")]
    DegenerateDistance,
    #[error("tuple with anchor {0} has no negatives")]
    NoNegatives(usize),
}

#[derive(Debug, Error)]
pub enum HeadIoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("head checkpoint schema: {0}")]
    Schema(String),
}

/// Affine embedding head `x -> W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl EmbeddingHead {
    /// Identity head: W = I, b = 0. Embeds raw descriptors unchanged.
    pub fn identity(dim: usize) -> EmbeddingHead {
        EmbeddingHead {
            weight: DMatrix::identity(dim, dim),
            bias: DVector::zeros(dim),
        }
    }

    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<EmbeddingHead, TrainError> {
        if weight.nrows() != bias.len() {
            return Err(TrainError::DimensionMismatch {
                expected: weight.nrows(),
                got: bias.len(),
            });
        }
        if weight.nrows() > weight.ncols() {
            return Err(TrainError::DimensionMismatch {
                expected: weight.ncols(),
                got: weight.nrows(),
            });
        }
        Ok(EmbeddingHead { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    /// Affine map `W x + b`.
    pub fn embed(&self, raw: &[f64]) -> Result<Vec<f64>, TrainError> {
        if raw.len() != self.d_in() {
            return Err(TrainError::DimensionMismatch {
                expected: self.d_in(),
                got: raw.len(),
            });
        }
        let x = DVector::from_column_slice(raw);
        Ok((&self.weight * x + &self.bias).as_slice().to_vec())
    }

    // Checkpoint format: {version: 1, d_in, d_out, weight (row-major), bias}.

    pub fn to_json(&self) -> String {
        let doc = JsonHead {
            version: 1,
            d_in: self.d_in(),
            d_out: self.d_out(),
            weight: self.weight.transpose().as_slice().to_vec(),
            bias: self.bias.as_slice().to_vec(),
        };
        serde_json::to_string(&doc).expect("head serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<EmbeddingHead, HeadIoError> {
        let doc: JsonHead =
            serde_json::from_str(text).map_err(|e| HeadIoError::Schema(e.to_string()))?;
        if doc.version != 1 {
            return Err(HeadIoError::Schema(format!(
                "unsupported version {}",
                doc.version
            )));
        }
        if doc.weight.len() != doc.d_in * doc.d_out || doc.bias.len() != doc.d_out {
            return Err(HeadIoError::Schema("weight/bias size mismatch".into()));
        }
        let weight = DMatrix::from_row_slice(doc.d_out, doc.d_in, &doc.weight);
        let bias = DVector::from_column_slice(&doc.bias);
        Ok(EmbeddingHead { weight, bias })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), HeadIoError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<EmbeddingHead, HeadIoError> {
        let text = std::fs::read_to_string(path)?;
        EmbeddingHead::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHead {
    version: u32,
    d_in: usize,
    d_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Global-norm gradient clipping threshold; None disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Cosine decay `lr_t = lr0 * (1 + cos(pi t / T)) / 2` over total steps.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            margin: 0.25,
            learning_rate: 0.001,
            epochs: 10,
            grad_clip_norm: Some(1.0),
            cosine_decay: true,
            seed: 0,
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Triplet margin loss `sum_i max(d(q,p) + m - d(q,n_i), 0)` on embedded
/// vectors.
pub fn triplet_loss(
    q: &[f64],
    p: &[f64],
    negatives: &[Vec<f64>],
    margin: f64,
) -> Result<f64, TrainError> {
    if q.len() != p.len() {
        return Err(TrainError::DimensionMismatch {
            expected: q.len(),
            got: p.len(),
        });
    }
    if negatives.is_empty() {
        return Err(TrainError::NoNegatives(0));
    }
    let dqp = euclidean(q, p);
    let mut loss = 0.0;
    for n in negatives {
        if n.len() != q.len() {
            return Err(TrainError::DimensionMismatch {
                expected: q.len(),
                got: n.len(),
            });
        }
        loss += (dqp + margin - euclidean(q, n)).max(0.0);
    }
    Ok(loss)
}

/// Loss and analytic gradients of one tuple through the head.
///
/// Hinge-inactive terms contribute exactly zero. Returns
/// `(loss, dL/dW, dL/db)`.
pub fn loss_gradient(
    head: &EmbeddingHead,
    q_raw: &[f64],
    p_raw: &[f64],
    negatives_raw: &[&[f64]],
    margin: f64,
) -> Result<(f64, DMatrix<f64>, DVector<f64>), TrainError> {
    let d_in = head.d_in();
    let d_out = head.d_out();
    for v in std::iter::once(&q_raw).chain(std::iter::once(&p_raw)) {
        if v.len() != d_in {
            return Err(TrainError::DimensionMismatch {
                expected: d_in,
                got: v.len(),
            });
        }
    }
    let q = DVector::from_column_slice(q_raw);
    let p = DVector::from_column_slice(p_raw);
    let eq = &head.weight * &q + &head.bias;
    let ep = &head.weight * &p + &head.bias;
    let diff_p = &eq - &ep;
    let dqp = diff_p.norm();

    let mut loss = 0.0;
    let mut grad_eq = DVector::<f64>::zeros(d_out);
    let mut grad_w = DMatrix::<f64>::zeros(d_out, d_in);
    let mut grad_b = DVector::<f64>::zeros(d_out);
    let mut n_active = 0usize;

    for n_raw in negatives_raw {
        if n_raw.len() != d_in {
            return Err(TrainError::DimensionMismatch {
                expected: d_in,
                got: n_raw.len(),
            });
        }
        let n = DVector::from_column_slice(n_raw);
        let en = &head.weight * &n + &head.bias;
        let diff_n = &eq - &en;
        let dqn = diff_n.norm();
        let hinge = dqp + margin - dqn;
        if hinge > 0.0 {
            if dqn <= 1e-12 {
                return Err(TrainError::DegenerateDistance);
            }
            loss += hinge;
            n_active += 1;
            let u_n = diff_n / dqn;
            // dL/den_i = u_n_i.
            grad_w += &u_n * n.transpose();
            grad_b += &u_n;
            grad_eq -= u_n;
        }
    }

    if n_active > 0 {
        if dqp <= 1e-12 {
            return Err(TrainError::DegenerateDistance);
        }
        let u_p = diff_p / dqp;
        // dL/deq = n_active * u_p - sum u_n_i ; dL/dep = -n_active * u_p.
        grad_eq += (n_active as f64) * &u_p;
        let grad_ep = -(n_active as f64) * &u_p;
        grad_w += &grad_eq * q.transpose() + &grad_ep * p.transpose();
        grad_b += grad_eq + grad_ep;
    }

    Ok((loss, grad_w, grad_b))
}

/// SGD fine-tuning over Inlier tuples. Returns the tuned head and the mean
/// loss per epoch.
pub fn train(
    head: &EmbeddingHead,
    tuples: &[TrainingTuple],
    descriptors: &DescriptorStore,
    config: &TrainConfig,
) -> Result<(EmbeddingHead, Vec<f64>), TrainError> {
    for t in tuples {
        if t.status != TupleStatus::Inlier {
            return Err(TrainError::RejectedTupleInTrainingSet {
                anchor: t.anchor_id,
                status: t.status,
            });
        }
        if t.negative_ids.is_empty() {
            return Err(TrainError::NoNegatives(t.anchor_id));
        }
        for id in std::iter::once(&t.anchor_id)
            .chain(std::iter::once(&t.positive_id))
            .chain(t.negative_ids.iter())
        {
            match descriptors.get(*id) {
                None => return Err(TrainError::MissingDescriptor(*id)),
                Some(d) if d.vector.len() != head.d_in() => {
                    return Err(TrainError::DimensionMismatch {
                        expected: head.d_in(),
                        got: d.vector.len(),
                    })
                }
                Some(_) => {}
            }
        }
    }

    let mut tuned = head.clone();
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 || tuples.is_empty() {
        return Ok((tuned, history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total_steps = (config.epochs * tuples.len()) as f64;
    let mut step = 0usize;

    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..tuples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &ti in &order {
            let t = &tuples[ti];
            let q = &descriptors.get(t.anchor_id).unwrap().vector;
            let p = &descriptors.get(t.positive_id).unwrap().vector;
            let negs: Vec<&[f64]> = t
                .negative_ids
                .iter()
                .map(|id| descriptors.get(*id).unwrap().vector.as_slice())
                .collect();
            let (loss, mut grad_w, mut grad_b) =
                loss_gradient(&tuned, q, p, &negs, config.margin)?;
            epoch_loss += loss;

            if let Some(c) = config.grad_clip_norm {
                let gnorm =
                    (grad_w.norm_squared() + grad_b.norm_squared()).sqrt();
                if gnorm > c {
                    let scale = c / gnorm;
                    grad_w *= scale;
                    grad_b *= scale;
                }
            }
            let lr = if config.cosine_decay {
                config.learning_rate
                    * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
                    / 2.0
            } else {
                config.learning_rate
            };
            tuned.weight -= lr * grad_w;
            tuned.bias -= lr * grad_b;
            step += 1;
        }
        history.push(epoch_loss / tuples.len() as f64);
    }
    Ok((tuned, history))
}
