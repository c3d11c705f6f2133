use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{axpy, dot, softmax, Matrix};
use super::{FusionConfig, FusionError};
use crate::corpus::EmotionLabel;
use crate::features::{Example, Modality};

/// Per-modality projection into the shared space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameters of the attention-fusion classifier.
///
/// For each present modality `m`: `h_m = dropout(relu(W_m x_m + b_m))`,
/// `score_m = q·h_m / sqrt(d)`, `α = softmax(score)` over the present
/// modalities, `fused = Σ α_m h_m`, `logits = W_c fused + b_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub input_dims: BTreeMap<Modality, usize>,
    pub projections: BTreeMap<Modality, Projection>,
    pub query: Vec<f64>,
    pub classifier: Matrix,
    pub classifier_bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub attention: BTreeMap<Modality, f64>,
    branches: Vec<Branch>,
    fused: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Branch {
    modality: Modality,
    pre_activation: Vec<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)); `None` when inactive.
    dropout: Option<Vec<f64>>,
    hidden: Vec<f64>,
    weight: f64,
}

impl FusionModel {
    pub fn init(
        config: &FusionConfig,
        input_dims: &BTreeMap<Modality, usize>,
    ) -> Result<FusionModel, FusionError> {
        config.validate()?;
        if input_dims.is_empty() {
            return Err(FusionError::Config(
                "at least one modality is required".into(),
            ));
        }
        if let Some((m, _)) = input_dims.iter().find(|(_, d)| **d == 0) {
            return Err(FusionError::Config(format!(
                "input dim for {m} must be positive"
            )));
        }
        let d = config.common_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform = |bound: f64| rng.random_range(-bound..bound);

        let mut projections = BTreeMap::new();
        for (&modality, &input_dim) in input_dims {
            let bound = (6.0 / (input_dim + d) as f64).sqrt();
            projections.insert(
                modality,
                Projection {
                    weight: Matrix::from_fn(d, input_dim, |_, _| uniform(bound)),
                    bias: vec![0.0; d],
                },
            );
        }
        let query_bound = (3.0 / d as f64).sqrt();
        let query = (0..d).map(|_| uniform(query_bound)).collect();
        let classes = config.class_count;
        let bound = (6.0 / (d + classes) as f64).sqrt();
        let classifier = Matrix::from_fn(classes, d, |_, _| uniform(bound));

        Ok(FusionModel {
            config: config.clone(),
            input_dims: input_dims.clone(),
            projections,
            query,
            classifier,
            classifier_bias: vec![0.0; classes],
        })
    }

    /// A model with every parameter set to zero and the same shapes.
    pub fn zeros_like(&self) -> FusionModel {
        let mut out = self.clone();
        for tensor in out.tensors_mut() {
            tensor.1.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Named flat views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (m, p) in &self.projections {
            out.push((format!("{m}.weight"), &p.weight.data));
            out.push((format!("{m}.bias"), &p.bias));
        }
        out.push(("query".into(), &self.query));
        out.push(("classifier.weight".into(), &self.classifier.data));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (m, p) in self.projections.iter_mut() {
            out.push((format!("{m}.weight"), &mut p.weight.data));
            out.push((format!("{m}.bias"), &mut p.bias));
        }
        out.push(("query".into(), &mut self.query));
        out.push(("classifier.weight".into(), &mut self.classifier.data));
        out.push(("classifier.bias".into(), &mut self.classifier_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &FusionModel) {
        let src = other.tensors();
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(src) {
            axpy(scale, src, dst);
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        example: &Example,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass, FusionError> {
        let order: Vec<Modality> = example.mask().collect();
        self.forward_ordered(example, &order, mode, rng)
    }

    /// Forward pass visiting modalities in the given order.
    pub fn forward_ordered<R: Rng + ?Sized>(
        &self,
        example: &Example,
        order: &[Modality],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass, FusionError> {
        if order.is_empty() {
            return Err(FusionError::Shape(format!(
                "example {} has an empty mask",
                example.key
            )));
        }
        let d = self.config.common_dim;
        let scale = (d as f64).sqrt();
        let p = self.config.dropout_rate;
        let dropout_active = mode == Mode::Train && p > 0.0;

        let mut branches = Vec::with_capacity(order.len());
        for &modality in order {
            let x = example.features.get(&modality).ok_or_else(|| {
                FusionError::Shape(format!("example {} lacks {modality} features", example.key))
            })?;
            let proj = self.projections.get(&modality).ok_or_else(|| {
                FusionError::Shape(format!("model has no projection for {modality}"))
            })?;
            if x.len() != proj.weight.cols {
                return Err(FusionError::Shape(format!(
                    "example {}: {modality} has dim {} but the model expects {}",
                    example.key,
                    x.len(),
                    proj.weight.cols
                )));
            }
            let pre_activation = proj.weight.affine(x, &proj.bias);
            let mut hidden: Vec<f64> = pre_activation.iter().map(|v| v.max(0.0)).collect();
            let dropout = dropout_active.then(|| {
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..d)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                hidden.iter_mut().zip(&mask).for_each(|(h, m)| *h *= m);
                mask
            });
            branches.push(Branch {
                modality,
                pre_activation,
                dropout,
                hidden,
                weight: 0.0,
            });
        }

        let scores: Vec<f64> = branches
            .iter()
            .map(|b| dot(&self.query, &b.hidden) / scale)
            .collect();
        let weights = softmax(&scores);
        let mut fused = vec![0.0; d];
        for (branch, w) in branches.iter_mut().zip(weights) {
            branch.weight = w;
            axpy(w, &branch.hidden, &mut fused);
        }
        let logits = self.classifier.affine(&fused, &self.classifier_bias);
        let attention = branches.iter().map(|b| (b.modality, b.weight)).collect();
        Ok(ForwardPass {
            logits,
            attention,
            branches,
            fused,
        })
    }

    /// Accumulates `d loss / d params` into `grads`, given `d loss / d logits`.
    pub fn backward(
        &self,
        example: &Example,
        pass: &ForwardPass,
        logit_grad: &[f64],
        grads: &mut FusionModel,
    ) {
        let scale = (self.config.common_dim as f64).sqrt();
        grads.classifier.add_outer(logit_grad, &pass.fused);
        axpy(1.0, logit_grad, &mut grads.classifier_bias);
        let fused_grad = self.classifier.transpose_mul(logit_grad);

        // d loss / d α_m, then through the softmax to the scores.
        let weight_grads: Vec<f64> = pass
            .branches
            .iter()
            .map(|b| dot(&fused_grad, &b.hidden))
            .collect();
        let expected: f64 = pass
            .branches
            .iter()
            .zip(&weight_grads)
            .map(|(b, g)| b.weight * g)
            .sum();

        for (branch, weight_grad) in pass.branches.iter().zip(weight_grads) {
            let score_grad = branch.weight * (weight_grad - expected);
            axpy(score_grad / scale, &branch.hidden, &mut grads.query);

            let mut hidden_grad: Vec<f64> = fused_grad.iter().map(|g| branch.weight * g).collect();
            axpy(score_grad / scale, &self.query, &mut hidden_grad);
            if let Some(mask) = &branch.dropout {
                hidden_grad.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
            let pre_grad: Vec<f64> = hidden_grad
                .iter()
                .zip(&branch.pre_activation)
                .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                .collect();

            let x = &example.features[&branch.modality];
            let proj = grads
                .projections
                .get_mut(&branch.modality)
                .expect("gradient buffer mirrors model projections");
            proj.weight.add_outer(&pre_grad, x);
            axpy(1.0, &pre_grad, &mut proj.bias);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        let text = serde_json::to_string(self).map_err(FusionError::Checkpoint)?;
        std::fs::write(path, text).map_err(|source| FusionError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<FusionModel, FusionError> {
        let raw = std::fs::read(path).map_err(|source| FusionError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let model: FusionModel = serde_json::from_slice(&raw).map_err(FusionError::Checkpoint)?;
        model.config.validate()?;
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<(), FusionError> {
        let d = self.config.common_dim;
        let bad = |what: String| Err(FusionError::Shape(format!("checkpoint: {what}")));
        if self.input_dims.keys().ne(self.projections.keys()) {
            return bad("projection set differs from input dims".into());
        }
        for (m, p) in &self.projections {
            let want = (d, self.input_dims[m]);
            if p.weight.shape() != want
                || p.weight.data.len() != want.0 * want.1
                || p.bias.len() != d
            {
                return bad(format!("{m} projection shape"));
            }
        }
        if self.query.len() != d
            || self.classifier.shape() != (self.config.class_count, d)
            || self.classifier.data.len() != self.config.class_count * d
            || self.classifier_bias.len() != self.config.class_count
        {
            return bad("query or classifier shape".into());
        }
        if !self.is_finite() {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index, which follows the
/// label order anger < disgust < fear < joy < neutral < sadness < surprise.
pub fn argmax_label(values: &[f64]) -> EmotionLabel {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    EmotionLabel::from_index(best).expect("seven logits")
}
