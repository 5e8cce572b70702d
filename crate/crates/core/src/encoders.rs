//! Small differentiable vision encoders and their training loops.
//!
//! An [`EncoderModel`] is an MLP over the flattened image with tanh hidden
//! activations and a final linear layer whose output is l2-normalized into
//! the embedding. A frozen [`ZeroShotClassifier`] of random unit class
//! embeddings stands in for a text encoder: logits are temperature-scaled
//! cosine similarities, so they are invariant to the embedding's scale and
//! the (differentiable) loss graphs can work on the raw pre-normalization
//! output without changing any value or gradient.
//!
//! `standard_train` minimizes cross-entropy on the zero-shot logits with
//! momentum SGD; `adversarial_train` computes the inner max of the same
//! loss with PGD around the current parameters before each outer step.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attacks::{self, AttackConfig, AttackFamily, LossKind, Pipeline};
use crate::error::{Error, Result};
use crate::graph::{Bindings, ComputeGraph, GraphBuilder};
use crate::io;
use crate::optim::{LrSchedule, SgdMomentum};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::thread_pool;
use rayon::prelude::*;

const INIT_STREAM: u64 = 0x1a17;

#[derive(Debug, Clone)]
pub struct EncoderModel {
    id: String,
    input_shape: Vec<usize>,
    /// Layer widths, flattened input first, embedding last.
    dims: Vec<usize>,
    params: BTreeMap<String, Tensor>,
    graph: ComputeGraph,
}

impl EncoderModel {
    /// Fresh encoder with seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    /// weights and zero biases.
    pub fn new(id: &str, input_shape: &[usize], hidden: &[usize], embed_dim: usize, seed: u64) -> Result<Self> {
        let in_dim: usize = input_shape.iter().product();
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);

        let mut params = BTreeMap::new();
        let mut stream = rng_for(seed, &[INIT_STREAM]);
        for layer in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let weight: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| stream.gen_range(-bound..bound))
                .collect();
            params.insert(format!("w{layer}"), Tensor::new(vec![fan_in, fan_out], weight)?);
            params.insert(format!("b{layer}"), Tensor::zeros(&[fan_out]));
        }
        let graph = build_embedding_graph(&dims)?;
        Ok(EncoderModel {
            id: id.to_string(),
            input_shape: input_shape.to_vec(),
            dims,
            params,
            graph,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn embed_dim(&self) -> usize {
        *self.dims.last().expect("dims nonempty")
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Embedding graph: input "image" (flattened) to the raw, un-normalized
    /// embedding. Loss graphs extend this one.
    pub fn embedding_graph(&self) -> &ComputeGraph {
        &self.graph
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: format!("encode input for '{}'", self.id),
                expected: self.input_shape.clone(),
                actual: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn bindings_with_image(&self, image: &Tensor) -> Result<Bindings> {
        let mut bindings: Bindings = self.params.clone();
        bindings.insert("image".to_string(), image.reshaped(&[self.dims[0]])?);
        Ok(bindings)
    }

    /// Raw (pre-normalization) embedding value.
    pub fn embed_raw(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        self.graph.forward(&self.bindings_with_image(image)?)
    }

    /// Unit-norm embedding.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.embed_raw(image)?.normalized()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = vec![
            ("id".to_string(), self.id.clone()),
            (
                "input_shape".to_string(),
                self.input_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x"),
            ),
            (
                "dims".to_string(),
                self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            ),
        ];
        let tensors: Vec<(String, &Tensor)> =
            self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        io::write_checkpoint(path, &meta, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let display = path.as_ref().display().to_string();
        let (meta, tensors) = io::read_checkpoint(path)?;
        let get = |key: &str| -> Result<&str> {
            meta.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format(&display, 0, format!("missing meta key '{key}'")))
        };
        let id = get("id")?.to_string();
        let input_shape: Vec<usize> = get("input_shape")?
            .split('x')
            .map(|p| p.parse().map_err(|_| Error::format(&display, 0, "bad input_shape")))
            .collect::<Result<_>>()?;
        let dims: Vec<usize> = get("dims")?
            .split(',')
            .map(|p| p.parse().map_err(|_| Error::format(&display, 0, "bad dims")))
            .collect::<Result<_>>()?;
        let params: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        for layer in 0..dims.len() - 1 {
            for key in [format!("w{layer}"), format!("b{layer}")] {
                if !params.contains_key(&key) {
                    return Err(Error::format(&display, 0, format!("missing tensor '{key}'")));
                }
            }
        }
        let graph = build_embedding_graph(&dims)?;
        Ok(EncoderModel {
            id,
            input_shape,
            dims,
            params,
            graph,
        })
    }

    fn set_params(&mut self, params: BTreeMap<String, Tensor>) {
        self.params = params;
    }
}

fn build_embedding_graph(dims: &[usize]) -> Result<ComputeGraph> {
    let mut g = GraphBuilder::new();
    let mut h = g.input("image", &[dims[0]])?;
    for layer in 0..dims.len() - 1 {
        let w = g.parameter(&format!("w{layer}"), &[dims[layer], dims[layer + 1]])?;
        let b = g.parameter(&format!("b{layer}"), &[dims[layer + 1]])?;
        let lin = g.matmul(h, w)?;
        h = g.add(lin, b)?;
        if layer + 2 < dims.len() {
            h = g.tanh(h);
        }
    }
    Ok(g.build(h))
}

#[derive(Debug, Clone)]
pub struct ZeroShotClassifier {
    class_embeddings: Tensor,
    temperature: f32,
}

impl ZeroShotClassifier {
    pub fn new(class_embeddings: Tensor, temperature: f32) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let shape = class_embeddings.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "class embeddings must be [n_classes x embed_dim], got {shape:?}"
            )));
        }
        let d = shape[1];
        for (k, row) in class_embeddings.data().chunks(d).enumerate() {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Invariant(format!(
                    "class embedding row {k} has norm {norm}, want 1"
                )));
            }
        }
        Ok(ZeroShotClassifier {
            class_embeddings,
            temperature,
        })
    }

    /// Frozen random unit class embeddings drawn from the dataset seed.
    pub fn from_seed(seed: u64, n_classes: usize, embed_dim: usize, temperature: f32) -> Result<Self> {
        let mut stream = rng_for(seed, &[0xc1a5]);
        let mut data = Vec::with_capacity(n_classes * embed_dim);
        for _ in 0..n_classes {
            let mut row: Vec<f32> = (0..embed_dim)
                .map(|_| StandardNormal.sample(&mut stream))
                .collect();
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            for v in &mut row {
                *v /= norm;
            }
            data.extend(row);
        }
        ZeroShotClassifier::new(Tensor::new(vec![n_classes, embed_dim], data)?, temperature)
    }

    pub fn n_classes(&self) -> usize {
        self.class_embeddings.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.class_embeddings.shape()[1]
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn class_embeddings(&self) -> &Tensor {
        &self.class_embeddings
    }

    pub fn class_embedding_row(&self, class: usize) -> Result<Tensor> {
        if class >= self.n_classes() {
            return Err(Error::InvalidArgument(format!("class {class} out of range")));
        }
        let d = self.embed_dim();
        Tensor::vector(&self.class_embeddings.data()[class * d..(class + 1) * d])
    }

    /// logits[k] = temperature * cos(embedding, class_embeddings[k]).
    pub fn logits(&self, embedding: &Tensor) -> Result<Tensor> {
        let d = self.embed_dim();
        if embedding.numel() != d {
            return Err(Error::ShapeMismatch {
                context: "zero_shot_logits".into(),
                expected: vec![d],
                actual: embedding.shape().to_vec(),
            });
        }
        let ne = embedding.l2_norm();
        if ne == 0.0 {
            return Err(Error::Invariant("zero-norm embedding rejected".into()));
        }
        let mut out = Vec::with_capacity(self.n_classes());
        for row in self.class_embeddings.data().chunks(d) {
            let nr: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            let dot: f32 = embedding.data().iter().zip(row).map(|(a, b)| a * b).sum();
            out.push(self.temperature * dot / (ne * nr));
        }
        Tensor::vector(&out)
    }

    pub fn predict(&self, embedding: &Tensor) -> Result<usize> {
        Ok(attacks::argmax(self.logits(embedding)?.data()))
    }
}

/// Free-function form of the zero-shot scoring operation.
pub fn zero_shot_logits(classifier: &ZeroShotClassifier, embedding: &Tensor) -> Result<Tensor> {
    classifier.logits(embedding)
}

/// Encoder plus frozen classifier: the attackable white-box pipeline.
pub struct EncoderPipeline {
    model: EncoderModel,
    classifier: ZeroShotClassifier,
    ce_graph: ComputeGraph,
    cos_graph: ComputeGraph,
}

impl EncoderPipeline {
    pub fn new(model: EncoderModel, classifier: ZeroShotClassifier) -> Result<Self> {
        if model.embed_dim() != classifier.embed_dim() {
            return Err(Error::ShapeMismatch {
                context: "pipeline embedding dimension".into(),
                expected: vec![classifier.embed_dim()],
                actual: vec![model.embed_dim()],
            });
        }
        let ce_graph = build_ce_graph(&model.dims, &classifier)?;
        let cos_graph = build_neg_cos_graph(&model.dims)?;
        Ok(EncoderPipeline {
            model,
            classifier,
            ce_graph,
            cos_graph,
        })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn classifier(&self) -> &ZeroShotClassifier {
        &self.classifier
    }

    fn onehot(&self, class: usize) -> Result<Tensor> {
        let mut v = vec![0.0f32; self.classifier.n_classes()];
        v[class] = 1.0;
        Tensor::vector(&v)
    }

    /// (loss, gradients) with respect to the requested leaves; used both by
    /// attacks (wrt = image) and training (wrt = parameters).
    fn loss_grads(
        &self,
        image: &Tensor,
        class: usize,
        kind: LossKind,
        wrt: &[&str],
    ) -> Result<(f32, BTreeMap<String, Tensor>)> {
        self.model.check_image(image)?;
        let mut bindings = self.model.bindings_with_image(image)?;
        let graph = match kind {
            LossKind::CrossEntropy => {
                bindings.insert("label".to_string(), self.onehot(class)?);
                &self.ce_graph
            }
            LossKind::NegCosine => {
                bindings.insert(
                    "class_embedding".to_string(),
                    self.classifier.class_embedding_row(class)?,
                );
                &self.cos_graph
            }
        };
        graph.evaluate(&bindings, wrt)
    }

    /// Mean loss and mean parameter gradients over a batch, reduced in
    /// ascending sample order.
    fn batch_param_grads(
        &self,
        images: &[&Tensor],
        classes: &[usize],
        kind: LossKind,
    ) -> Result<(f32, BTreeMap<String, Tensor>)> {
        let wrt: Vec<String> = self.model.params.keys().cloned().collect();
        let wrt_refs: Vec<&str> = wrt.iter().map(|s| s.as_str()).collect();
        let per_sample: Result<Vec<(f32, BTreeMap<String, Tensor>)>> = thread_pool().install(|| {
            images
                .par_iter()
                .zip(classes.par_iter())
                .map(|(image, &class)| self.loss_grads(image, class, kind, &wrt_refs))
                .collect()
        });
        let per_sample = per_sample?;

        let scale = 1.0 / images.len() as f32;
        let mut mean_loss = 0.0f32;
        let mut sums: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (loss, grads) in &per_sample {
            mean_loss += loss * scale;
            for (name, grad) in grads {
                let acc = sums
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.numel()]);
                for (a, g) in acc.iter_mut().zip(grad.data()) {
                    *a += g * scale;
                }
            }
        }
        let mut out = BTreeMap::new();
        for (name, sum) in sums {
            let shape = self.model.params[&name].shape().to_vec();
            out.insert(name, Tensor::new(shape, sum)?);
        }
        Ok((mean_loss, out))
    }
}

impl Pipeline for EncoderPipeline {
    fn input_shape(&self) -> &[usize] {
        self.model.input_shape()
    }

    fn n_classes(&self) -> usize {
        self.classifier.n_classes()
    }

    fn logits(&self, image: &Tensor) -> Result<Tensor> {
        self.classifier.logits(&self.model.embed_raw(image)?)
    }

    fn loss_and_grad(&self, image: &Tensor, class: usize, kind: LossKind) -> Result<(f32, Tensor)> {
        let (loss, mut grads) = self.loss_grads(image, class, kind, &["image"])?;
        let grad = grads.remove("image").expect("requested image gradient");
        Ok((loss, grad.reshaped(self.model.input_shape())?))
    }
}

/// CE loss graph: logits from cosine similarity against the frozen class
/// matrix (constant), labels bound per sample.
fn build_ce_graph(dims: &[usize], classifier: &ZeroShotClassifier) -> Result<ComputeGraph> {
    let mut g = GraphBuilder::new();
    let mut h = g.input("image", &[dims[0]])?;
    for layer in 0..dims.len() - 1 {
        let w = g.parameter(&format!("w{layer}"), &[dims[layer], dims[layer + 1]])?;
        let b = g.parameter(&format!("b{layer}"), &[dims[layer + 1]])?;
        let lin = g.matmul(h, w)?;
        h = g.add(lin, b)?;
        if layer + 2 < dims.len() {
            h = g.tanh(h);
        }
    }
    let classes = g.constant(classifier.class_embeddings().clone());
    let cos = g.cosine_sim(h, classes)?;
    let logits = g.scale(classifier.temperature(), cos)?;
    let label = g.input("label", &[classifier.n_classes()])?;
    let loss = g.cross_entropy_logits(logits, label)?;
    Ok(g.build(loss))
}

/// Negative-cosine loss graph against a class embedding bound per sample.
fn build_neg_cos_graph(dims: &[usize]) -> Result<ComputeGraph> {
    let mut g = GraphBuilder::new();
    let mut h = g.input("image", &[dims[0]])?;
    for layer in 0..dims.len() - 1 {
        let w = g.parameter(&format!("w{layer}"), &[dims[layer], dims[layer + 1]])?;
        let b = g.parameter(&format!("b{layer}"), &[dims[layer + 1]])?;
        let lin = g.matmul(h, w)?;
        h = g.add(lin, b)?;
        if layer + 2 < dims.len() {
            h = g.tanh(h);
        }
    }
    let target = g.input("class_embedding", &[*dims.last().expect("embed dim")])?;
    let cos = g.cosine_sim(h, target)?;
    let loss = g.scale(-1.0, cos)?;
    Ok(g.build(loss))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub adversarial: bool,
    /// Inner-max radius (adversarial training only).
    pub eps: f32,
    /// Inner-max PGD steps.
    pub pgd_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 32,
            schedule: LrSchedule::Cosine { t_max: 200 },
            seed: 0,
            adversarial: false,
            eps: 8.0 / 255.0,
            pgd_steps: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("learning rate and batch size must be positive".into()));
        }
        if self.eps < 0.0 {
            return Err(Error::InvalidArgument("eps must be >= 0".into()));
        }
        if self.adversarial && self.eps > 0.0 && self.pgd_steps == 0 {
            return Err(Error::InvalidArgument("adversarial training needs pgd_steps >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_loss: f32,
    pub final_loss: f32,
    pub per_epoch_loss: Vec<f32>,
}

/// Cross-entropy training on the zero-shot logits.
pub fn standard_train(
    model: &EncoderModel,
    classifier: &ZeroShotClassifier,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainReport)> {
    let cfg = TrainConfig {
        adversarial: false,
        ..cfg.clone()
    };
    train_inner(model, classifier, images, labels, &cfg)
}

/// Min-max adversarial training: the inner maximization runs PGD on the
/// cross-entropy loss around the current parameters, the outer step descends
/// on the adversarial batch.
pub fn adversarial_train(
    model: &EncoderModel,
    classifier: &ZeroShotClassifier,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainReport)> {
    let cfg = TrainConfig {
        adversarial: true,
        ..cfg.clone()
    };
    train_inner(model, classifier, images, labels, &cfg)
}

fn train_inner(
    model: &EncoderModel,
    classifier: &ZeroShotClassifier,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument("images/labels length mismatch".into()));
    }
    for &label in labels {
        if label >= classifier.n_classes() {
            return Err(Error::InvalidArgument(format!("label {label} out of range")));
        }
    }

    let mut pipeline = EncoderPipeline::new(model.clone(), classifier.clone())?;
    let mut optimizer = SgdMomentum::new(
        cfg.learning_rate,
        cfg.momentum,
        cfg.weight_decay,
        cfg.schedule,
    );

    let image_refs: Vec<&Tensor> = images.iter().collect();
    let initial_loss = pipeline
        .batch_param_grads(&image_refs, labels, LossKind::CrossEntropy)?
        .0;

    let inner_attack = AttackConfig {
        family: AttackFamily::Pgd,
        eps: cfg.eps,
        iterations: cfg.pgd_steps,
        step_size: Some(if cfg.pgd_steps > 0 {
            2.5 * cfg.eps / cfg.pgd_steps as f32
        } else {
            0.0
        }),
        targeted: false,
        target: None,
        loss: crate::attacks::LossSelector::CrossEntropy,
        seed: derive_seed(cfg.seed, &[0xadf0]),
        random_start: false,
    };

    let mut per_epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, derive_seed(cfg.seed, &[0x5f1e, epoch as u64]));
        let mut epoch_loss = 0.0f32;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let batch_images: Vec<Tensor> = if cfg.adversarial && cfg.eps > 0.0 {
                let originals: Vec<Tensor> = batch.iter().map(|&i| images[i].clone()).collect();
                attacks::attack(&pipeline, &originals, &batch_labels, &inner_attack)?
                    .adversarial
            } else {
                batch.iter().map(|&i| images[i].clone()).collect()
            };
            let batch_refs: Vec<&Tensor> = batch_images.iter().collect();
            let (loss, grads) =
                pipeline.batch_param_grads(&batch_refs, &batch_labels, LossKind::CrossEntropy)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch} (model '{}')",
                    model.id()
                )));
            }
            let mut params = pipeline.model.params.clone();
            optimizer.step(&mut params, &grads)?;
            pipeline.model.set_params(params);
            epoch_loss += loss;
            batches += 1;
        }
        per_epoch_loss.push(epoch_loss / batches.max(1) as f32);
    }

    let final_loss = pipeline
        .batch_param_grads(&image_refs, labels, LossKind::CrossEntropy)?
        .0;
    let report = TrainReport {
        initial_loss,
        final_loss,
        per_epoch_loss,
    };
    Ok((pipeline.model, report))
}

/// Fisher-Yates with a dedicated stream.
fn shuffle(order: &mut [usize], seed: u64) {
    let mut stream = rng_for(seed, &[]);
    for i in (1..order.len()).rev() {
        let j = stream.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Plain accuracy of a pipeline over a labeled set.
pub fn accuracy(pipeline: &dyn Pipeline, images: &[Tensor], labels: &[usize]) -> Result<f32> {
    let mut correct = 0usize;
    for (image, &label) in images.iter().zip(labels) {
        if pipeline.predict(image)? == label {
            correct += 1;
        }
    }
    Ok(correct as f32 / images.len().max(1) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{self, DatasetManifest, Split};

    fn toy_classifier(seed: u64, n_classes: usize, dim: usize) -> ZeroShotClassifier {
        ZeroShotClassifier::from_seed(seed, n_classes, dim, 10.0).unwrap()
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let model = EncoderModel::new("toy", &[3, 16, 16], &[24], 8, 5).unwrap();
        let ds = dataset::synth(&DatasetManifest {
            seed: 1,
            n_classes: 4,
            per_class: 2,
            ..Default::default()
        })
        .unwrap();
        for s in &ds.samples {
            let e1 = model.encode(&s.image).unwrap();
            let e2 = model.encode(&s.image).unwrap();
            assert!((e1.l2_norm() - 1.0).abs() < 1e-5);
            assert_eq!(e1.data(), e2.data());
        }
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let model = EncoderModel::new("toy", &[3, 16, 16], &[24], 8, 5).unwrap();
        let bad = Tensor::zeros(&[3, 8, 8]);
        assert!(model.encode(&bad).is_err());
    }

    #[test]
    fn identity_linear_layer_preserves_prenormalized_input() {
        // Single linear layer, weight = I, bias = 0, on a unit-norm input.
        let mut model = EncoderModel::new("id", &[4], &[], 4, 0).unwrap();
        let eye = Tensor::new(
            vec![4, 4],
            vec![
                1., 0., 0., 0., //
                0., 1., 0., 0., //
                0., 0., 1., 0., //
                0., 0., 0., 1.,
            ],
        )
        .unwrap();
        let mut params = model.params().clone();
        params.insert("w0".to_string(), eye);
        model.set_params(params);
        let v = Tensor::vector(&[0.5, 0.5, 0.5, 0.5]).unwrap();
        let e = model.encode(&v).unwrap();
        for (a, b) in e.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_shot_self_similarity_and_orthogonality() {
        let classifier = toy_classifier(3, 4, 8);
        // embedding equal to class row k: argmax k, logit = temperature
        for k in 0..4 {
            let row = classifier.class_embedding_row(k).unwrap();
            let logits = classifier.logits(&row).unwrap();
            assert_eq!(attacks::argmax(logits.data()), k);
            assert!((logits.data()[k] - classifier.temperature()).abs() < 1e-4);
        }
        // hand-built orthogonal case: rows e1..e4, embedding along a fifth axis
        let mut rows = vec![0.0f32; 4 * 8];
        for k in 0..4 {
            rows[k * 8 + k] = 1.0;
        }
        let ortho = ZeroShotClassifier::new(Tensor::new(vec![4, 8], rows).unwrap(), 10.0).unwrap();
        let mut e = vec![0.0f32; 8];
        e[7] = 1.0;
        let logits = ortho.logits(&Tensor::vector(&e).unwrap()).unwrap();
        for &l in logits.data() {
            assert!(l.abs() < 1e-6);
        }
    }

    #[test]
    fn zero_shot_three_class_hand_cosine() {
        // rows e1, e2, e3; embedding (e1 + e2)/sqrt(2): logits proportional
        // to (1/sqrt2, 1/sqrt2, 0).
        let mut rows = vec![0.0f32; 3 * 4];
        rows[0] = 1.0;
        rows[4 + 1] = 1.0;
        rows[8 + 2] = 1.0;
        let clf = ZeroShotClassifier::new(Tensor::new(vec![3, 4], rows).unwrap(), 10.0).unwrap();
        let inv = 1.0 / 2.0f32.sqrt();
        let emb = Tensor::vector(&[inv, inv, 0.0, 0.0]).unwrap();
        let logits = clf.logits(&emb).unwrap();
        assert!((logits.data()[0] - 10.0 * inv).abs() < 1e-5);
        assert!((logits.data()[1] - 10.0 * inv).abs() < 1e-5);
        assert!(logits.data()[2].abs() < 1e-6);
    }

    #[test]
    fn argmax_invariant_to_temperature_rescaling() {
        let model = EncoderModel::new("toy", &[3, 16, 16], &[24], 8, 5).unwrap();
        let ds = dataset::synth(&DatasetManifest {
            seed: 6,
            n_classes: 4,
            per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let c1 = toy_classifier(3, 4, 8);
        let c2 = ZeroShotClassifier::new(c1.class_embeddings().clone(), 35.0).unwrap();
        for s in &ds.samples {
            let e = model.embed_raw(&s.image).unwrap();
            assert_eq!(c1.predict(&e).unwrap(), c2.predict(&e).unwrap());
        }
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        // End-to-end encoder graph through the CE loss: acceptance-grade
        // check at a smaller point budget.
        let dims = [8usize, 16, 4];
        let model = EncoderModel::new("fd", &[8], &dims[1..2], 4, 11).unwrap();
        let classifier = toy_classifier(2, 3, 4);
        let pipeline = EncoderPipeline::new(model, classifier).unwrap();

        use rand::Rng;
        let mut stream = crate::rng::rng_for(99, &[1]);
        for trial in 0..5 {
            let image =
                Tensor::vector(&(0..8).map(|_| stream.gen_range(0.0..1.0f32)).collect::<Vec<_>>())
                    .unwrap();
            let mut bindings = pipeline.model.bindings_with_image(&image).unwrap();
            bindings.insert("label".to_string(), pipeline.onehot(trial % 3).unwrap());
            let err = crate::gradcheck::max_gradient_error(
                &pipeline.ce_graph,
                &bindings,
                &["image", "w0", "b0", "w1", "b1"],
                crate::gradcheck::DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-3, "trial {trial}: max relative error {err}");
        }
    }

    fn toy_two_class() -> (Vec<Tensor>, Vec<usize>, ZeroShotClassifier) {
        let ds = dataset::synth(&DatasetManifest {
            seed: 21,
            n_classes: 2,
            per_class: 16,
            ..Default::default()
        })
        .unwrap();
        let train = ds.split(Split::Train);
        let classifier = toy_classifier(21, 2, 8);
        (ds.images(&train), ds.labels(&train), classifier)
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (images, labels, classifier) = toy_two_class();
        let model = EncoderModel::new("toy", &[3, 16, 16], &[16], 8, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 1,
            ..Default::default()
        };
        let (trained, report) = standard_train(&model, &classifier, &images, &labels, &cfg).unwrap();
        for (name, p) in model.params() {
            assert_eq!(p.data(), trained.params()[name].data(), "{name} changed");
        }
        assert_eq!(report.initial_loss, report.final_loss);
    }

    #[test]
    fn separable_two_class_training_reaches_95_percent() {
        let (images, labels, classifier) = toy_two_class();
        let model = EncoderModel::new("toy", &[3, 16, 16], &[16], 8, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            seed: 2,
            ..Default::default()
        };
        let (trained, report) = standard_train(&model, &classifier, &images, &labels, &cfg).unwrap();
        assert!(report.final_loss <= report.initial_loss);
        let pipeline = EncoderPipeline::new(trained, classifier).unwrap();
        let acc = accuracy(&pipeline, &images, &labels).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn same_seed_training_is_bit_identical() {
        let (images, labels, classifier) = toy_two_class();
        let model = EncoderModel::new("toy", &[3, 16, 16], &[16], 8, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 7,
            ..Default::default()
        };
        let (a, _) = standard_train(&model, &classifier, &images, &labels, &cfg).unwrap();
        let (b, _) = standard_train(&model, &classifier, &images, &labels, &cfg).unwrap();
        for (name, pa) in a.params() {
            let bits_a: Vec<u32> = pa.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.params()[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name} differs between runs");
        }
    }

    #[test]
    fn adversarial_with_zero_eps_matches_standard_bitwise() {
        let (images, labels, classifier) = toy_two_class();
        let model = EncoderModel::new("toy", &[3, 16, 16], &[16], 8, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 7,
            eps: 0.0,
            ..Default::default()
        };
        let (std_model, _) = standard_train(&model, &classifier, &images, &labels, &cfg).unwrap();
        let (adv_model, _) = adversarial_train(&model, &classifier, &images, &labels, &cfg).unwrap();
        for (name, pa) in std_model.params() {
            let bits_a: Vec<u32> = pa.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = adv_model.params()[name]
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits_a, bits_b, "{name} differs");
        }
    }

    #[test]
    fn training_rejects_empty_dataset_and_bad_labels() {
        let classifier = toy_classifier(1, 2, 8);
        let model = EncoderModel::new("toy", &[3, 16, 16], &[16], 8, 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(standard_train(&model, &classifier, &[], &[], &cfg).is_err());
        let img = Tensor::zeros(&[3, 16, 16]);
        assert!(standard_train(&model, &classifier, &[img], &[5], &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let model = EncoderModel::new("ckpt-toy", &[3, 16, 16], &[16], 8, 9).unwrap();
        model.save(&path).unwrap();
        let back = EncoderModel::load(&path).unwrap();
        assert_eq!(back.id(), "ckpt-toy");
        assert_eq!(back.input_shape(), model.input_shape());
        let img = dataset::synth(&DatasetManifest {
            seed: 1,
            n_classes: 2,
            per_class: 2,
            ..Default::default()
        })
        .unwrap()
        .samples[0]
            .image
            .clone();
        assert_eq!(
            model.encode(&img).unwrap().data(),
            back.encode(&img).unwrap().data()
        );
    }

    #[test]
    fn embedding_changes_stay_finite_under_perturbation() {
        let model = EncoderModel::new("toy", &[3, 16, 16], &[24], 8, 5).unwrap();
        let ds = dataset::synth(&DatasetManifest {
            seed: 1,
            n_classes: 2,
            per_class: 2,
            ..Default::default()
        })
        .unwrap();
        for eps in [1.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0] {
            for s in &ds.samples {
                let bumped = s.image.map(|v| (v + eps).min(1.0)).unwrap();
                let a = model.encode(&s.image).unwrap();
                let b = model.encode(&bumped).unwrap();
                let diff: f32 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f32>()
                    .sqrt();
                assert!(diff.is_finite());
            }
        }
    }
}
