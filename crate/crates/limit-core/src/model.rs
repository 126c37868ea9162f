//! Embedding backbone, growable linear classifier, and prototype
//! construction. Classifier weights are stored with one row per class so
//! a classifier is directly usable as a set of row vectors downstream.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing prototype for class {0}")]
    MissingPrototype(usize),
    #[error("duplicate class id {0}")]
    DuplicateClass(usize),
    #[error("input dim {input} does not match network dim {expected}")]
    DimMismatch { input: usize, expected: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// MLP embedding: rectifier after every layer except the last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingNet {
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Tape handles for one forward/backward cycle of the embedding.
pub struct EmbedVars {
    layers: Vec<(Var, Var)>,
}

impl EmbeddingNet {
    /// He-style initialization over the given widths `[D, h1, ..., d]`.
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                w: Tensor::randn(vec![w[0], w[1]], (2.0 / w[0] as f64).sqrt(), rng),
                b: Tensor::zeros(vec![w[1]]),
            })
            .collect();
        EmbeddingNet {
            widths: widths.to_vec(),
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> EmbedVars {
        EmbedVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.w.clone(), trainable),
                        tape.leaf(l.b.clone(), trainable),
                    )
                })
                .collect(),
        }
    }

    /// Forward pass `x[b, D] -> [b, d]` on the tape.
    pub fn forward(&self, tape: &mut Tape, vars: &EmbedVars, x: Var) -> Result<Var, ModelError> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(ModelError::DimMismatch {
                input: tape.value(x).cols(),
                expected: self.input_dim(),
            });
        }
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (i, (w, b)) in vars.layers.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_row_bias(h, *b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Convenience forward without gradient tracking.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.vars(&mut tape, false);
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn param_vars(vars: &EmbedVars) -> Vec<Var> {
        vars.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Bias-free linear classifier; `weight` row i is the class vector for
/// `class_ids[i]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub weight: Tensor,
    pub class_ids: Vec<usize>,
}

impl Classifier {
    pub fn new<R: Rng>(embed_dim: usize, class_ids: Vec<usize>, rng: &mut R) -> Self {
        let n = class_ids.len();
        Classifier {
            weight: Tensor::randn(vec![n, embed_dim], (1.0 / embed_dim as f64).sqrt(), rng),
            class_ids,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Column index of a global class id.
    pub fn position_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }
}

/// Mean embedding per class present in the support set.
pub fn compute_prototypes(
    support: &Dataset,
    net: &EmbeddingNet,
) -> Result<BTreeMap<usize, Tensor>, ModelError> {
    let emb = net.embed(&support.features)?;
    let d = emb.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &label) in support.labels.iter().enumerate() {
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; d], 0));
        for (s, v) in entry.0.iter_mut().zip(emb.row(i)) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, n))| {
            let mean: Vec<f64> = sum.into_iter().map(|s| s / n as f64).collect();
            (c, Tensor::new(vec![d], mean).expect("prototype shape"))
        })
        .collect())
}

/// Differentiable prototype rows: averages embedding rows per class via a
/// constant selector matrix, so gradients flow back through the embedding.
/// Output row order follows `classes`.
pub fn prototype_rows(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    classes: &[usize],
) -> Result<Var, ModelError> {
    let b = tape.value(emb).rows();
    assert_eq!(labels.len(), b, "one label per embedding row");
    let mut sel = vec![0.0; classes.len() * b];
    for (ci, &c) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..b).filter(|&i| labels[i] == c).collect();
        assert!(!members.is_empty(), "class {c} absent from support");
        let w = 1.0 / members.len() as f64;
        for i in members {
            sel[ci * b + i] = w;
        }
    }
    let sel = tape.constant(Tensor::new(vec![classes.len(), b], sel)?);
    Ok(tape.matmul(sel, emb)?)
}

/// Substitute the rows for `phase_classes` with their prototypes; other
/// rows carry over bit-identically. Classes not yet present are appended.
pub fn replace_classifier(
    prev: &Classifier,
    protos: &BTreeMap<usize, Tensor>,
    phase_classes: &[usize],
) -> Result<Classifier, ModelError> {
    let d = prev.embed_dim();
    let mut class_ids = prev.class_ids.clone();
    let mut rows: Vec<Vec<f64>> = (0..prev.num_classes())
        .map(|i| prev.weight.row(i).to_vec())
        .collect();
    for &c in phase_classes {
        let p = protos.get(&c).ok_or(ModelError::MissingPrototype(c))?;
        match prev.position_of(c) {
            Some(i) => rows[i] = p.data().to_vec(),
            None => {
                class_ids.push(c);
                rows.push(p.data().to_vec());
            }
        }
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Classifier {
        weight: Tensor::new(vec![class_ids.len(), d], data)?,
        class_ids,
    })
}

/// Append prototype rows for new classes; no gradient recording, the
/// inference-time model update.
pub fn augment_classifier(
    w: &Classifier,
    protos: &BTreeMap<usize, Tensor>,
    new_class_ids: &[usize],
) -> Result<Classifier, ModelError> {
    let mut class_ids = w.class_ids.clone();
    let mut data = w.weight.data().to_vec();
    for &c in new_class_ids {
        if w.position_of(c).is_some() {
            return Err(ModelError::DuplicateClass(c));
        }
        let p = protos.get(&c).ok_or(ModelError::MissingPrototype(c))?;
        class_ids.push(c);
        data.extend_from_slice(p.data());
    }
    Ok(Classifier {
        weight: Tensor::new(vec![class_ids.len(), w.embed_dim()], data)?,
        class_ids,
    })
}

/// `emb[b, d] . W^T -> [b, classes]`, inner product per class row.
pub fn raw_logits(w: &Classifier, emb: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let wv = tape.constant(w.weight.clone());
    let wt = tape.transpose(wv)?;
    let out = tape.matmul(e, wt)?;
    Ok(tape.value(out).clone())
}

/// Tape version of [`raw_logits`] for training paths.
pub fn raw_logits_var(tape: &mut Tape, weight_rows: Var, emb: Var) -> Result<Var, TensorError> {
    let wt = tape.transpose(weight_rows)?;
    tape.matmul(emb, wt)
}
