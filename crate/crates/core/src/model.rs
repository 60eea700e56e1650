//! The incremental classifier: residual feature extractor, bias-free linear head
//! with per-task partitions, and frozen snapshots.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, HasBatchNorm, HasParams, Mode, Param};
use crate::tensor::{Scalar, Tensor};

/// Residual backbone shape. `blocks_per_stage = 5` with widths `[16, 32, 64]` is the
/// 32-layer CIFAR ResNet; the desk default uses one block per stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: [16, 32, 64],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    pub fn resnet32() -> Self {
        BackboneConfig {
            widths: [16, 32, 64],
            blocks_per_stage: 5,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ConvBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        ConvBn {
            conv: Conv2d::new(cin, cout, k, stride, k / 2, rng),
            bn: BatchNorm::new(cout, true),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct BasicBlock<T> {
    a: ConvBn<T>,
    b: ConvBn<T>,
    shortcut: Option<ConvBn<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, rng));
        BasicBlock {
            a: ConvBn::new(cin, cout, 3, stride, rng),
            b: ConvBn::new(cout, cout, 3, 1, rng),
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.a.forward(ctx, x)?;
        let y = ctx.g.relu(y);
        let y = self.b.forward(ctx, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        let y = ctx.g.add(y, skip)?;
        Ok(ctx.g.relu(y))
    }

    fn conv_bns(&self) -> impl Iterator<Item = &ConvBn<T>> {
        [&self.a, &self.b].into_iter().chain(self.shortcut.as_ref())
    }

    fn conv_bns_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        [&mut self.a, &mut self.b].into_iter().chain(self.shortcut.as_mut())
    }
}

/// Convolutional feature extractor `f: R^{h x w x 3} -> R^d` over NCHW batches.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FeatureExtractor<T> {
    /// `(h, w, channels)`.
    input_shape: (usize, usize, usize),
    config: BackboneConfig,
    stem: ConvBn<T>,
    blocks: Vec<BasicBlock<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, input_shape: (usize, usize, usize), rng: &mut R) -> Self {
        let [w0, w1, w2] = config.widths;
        let stem = ConvBn::new(input_shape.2, w0, 3, 1, rng);
        let mut blocks = Vec::new();
        let mut cin = w0;
        for (stage, &width) in [w0, w1, w2].iter().enumerate() {
            for b in 0..config.blocks_per_stage.max(1) {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, width, stride, rng));
                cin = width;
            }
        }
        FeatureExtractor {
            input_shape,
            config: config.clone(),
            stem,
            blocks,
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::invalid(format!(
                "expected input [n, {}, {}, {}], got {:?}",
                c, h, w, shape
            )));
        }
        Ok(())
    }

    /// `[n, c, h, w] -> [n, d]`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.check_input(ctx.g.shape(x))?;
        let y = self.stem.forward(ctx, x)?;
        let mut y = ctx.g.relu(y);
        for b in &self.blocks {
            y = b.forward(ctx, y)?;
        }
        ctx.g.global_avg_pool(y)
    }

    fn conv_bns(&self) -> impl Iterator<Item = &ConvBn<T>> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| b.conv_bns()))
    }

    fn conv_bns_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        std::iter::once(&mut self.stem).chain(self.blocks.iter_mut().flat_map(|b| b.conv_bns_mut()))
    }
}

impl<T: Scalar> HasParams<T> for FeatureExtractor<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for cb in self.conv_bns_mut() {
            cb.conv.visit_params(f);
            cb.bn.visit_params(f);
        }
    }
}

impl<T: Scalar> HasBatchNorm<T> for FeatureExtractor<T> {
    fn visit_bn(&self, f: &mut dyn FnMut(&BatchNorm<T>)) {
        for cb in self.conv_bns() {
            f(&cb.bn);
        }
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        for cb in self.conv_bns_mut() {
            f(&mut cb.bn);
        }
    }
}

/// Bias-free linear head `theta: R^d -> R^c`, partitioned by task.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClassificationHead<T> {
    weight: Param<T>,
    task_sizes: Vec<usize>,
}

impl<T: Scalar> ClassificationHead<T> {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("head needs at least one class"));
        }
        Ok(ClassificationHead {
            weight: Param::new(init_rows(classes, embed_dim, rng)),
            task_sizes: vec![classes],
        })
    }

    pub fn class_count(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn weight(&self) -> &Param<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Param<T> {
        &mut self.weight
    }

    pub fn task_sizes(&self) -> &[usize] {
        &self.task_sizes
    }

    /// Disjoint contiguous class-index ranges, one per task, covering `0..c`.
    pub fn partitions(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.task_sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect()
    }

    /// Classes learned before the newest task.
    pub fn old_class_count(&self) -> usize {
        self.class_count() - self.task_sizes.last().copied().unwrap_or(0)
    }

    /// Append `k` freshly initialized rows as a new task partition.
    pub fn expand<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("expand_head needs k >= 1"));
        }
        let (c, d) = (self.class_count(), self.embed_dim());
        let fresh = init_rows::<T, R>(k, d, rng);
        let mut data = self.weight.value.data().to_vec();
        data.extend_from_slice(fresh.data());
        self.weight.value = Tensor::new(vec![c + k, d], data)?;
        self.task_sizes.push(k);
        Ok(())
    }

    /// `[n, d] -> [n, c]`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, features: Var) -> Result<Var> {
        let w = ctx.bind(&self.weight);
        ctx.g.matmul(features, w, false, true)
    }
}

impl<T: Scalar> HasParams<T> for ClassificationHead<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

/// Same scheme for the initial head and for rows added on expansion.
fn init_rows<T: Scalar, R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Tensor<T> {
    Tensor::rand_uniform(&[rows, d], 1.0 / (d as f64).sqrt(), rng)
}

/// Functional form of [`ClassificationHead::expand`].
pub fn expand_head<T: Scalar, R: Rng + ?Sized>(
    head: &ClassificationHead<T>,
    k: usize,
    rng: &mut R,
) -> Result<ClassificationHead<T>> {
    let mut h = head.clone();
    h.expand(k, rng)?;
    Ok(h)
}

/// Output of one forward pass.
pub struct Forward {
    pub features: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct IncrementalModel<T> {
    pub extractor: FeatureExtractor<T>,
    pub head: ClassificationHead<T>,
}

/// Rows per chunk for gradient-free inference.
const EVAL_CHUNK: usize = 256;

impl<T: Scalar> IncrementalModel<T> {
    pub fn new<R: Rng + ?Sized>(
        config: &BackboneConfig,
        input_shape: (usize, usize, usize),
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let extractor = FeatureExtractor::new(config, input_shape, rng);
        let head = ClassificationHead::new(extractor.embed_dim(), classes, rng)?;
        Ok(IncrementalModel { extractor, head })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Forward> {
        let features = self.extractor.forward(ctx, x)?;
        let logits = self.head.forward(ctx, features)?;
        Ok(Forward { features, logits })
    }

    /// Gradient-free evaluation-mode features and logits.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.extractor.check_input(x.shape())?;
        let n = x.dim(0);
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            let mut g = Graph::new();
            let xv = g.constant(x.slice_leading(start, len));
            let mut ctx = Ctx::new(&mut g, Mode::FROZEN);
            let out = self.forward(&mut ctx, xv)?;
            feats.push(g.value(out.features).clone());
            logits.push(g.value(out.logits).clone());
            start += len;
        }
        if n == 0 {
            return Ok((
                Tensor::zeros(&[0, self.extractor.embed_dim()]),
                Tensor::zeros(&[0, self.head.class_count()]),
            ));
        }
        Ok((
            Tensor::cat_leading(&feats.iter().collect::<Vec<_>>())?,
            Tensor::cat_leading(&logits.iter().collect::<Vec<_>>())?,
        ))
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(x)?.1)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

impl<T: Scalar> HasParams<T> for IncrementalModel<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.extractor.visit_params(f);
        self.head.visit_params(f);
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(0);
    if c == 0 {
        return Vec::new();
    }
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Frozen copy of the model at the end of a phase. Never bound as trainable.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelSnapshot<T> {
    model: IncrementalModel<T>,
    phase: usize,
}

/// Running statistics of one batch-norm layer of a frozen extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStatRecord<T> {
    pub layer: u64,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> ModelSnapshot<T> {
    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn model(&self) -> &IncrementalModel<T> {
        &self.model
    }

    pub fn class_count(&self) -> usize {
        self.model.head.class_count()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.model.extractor.input_shape()
    }

    /// Frozen forward inside a caller's graph; gradients may still flow to `x`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, capture_bn_inputs: bool) -> Result<(Forward, Vec<(u64, Var)>)> {
        let mut ctx = Ctx::new(g, Mode::FROZEN);
        ctx.capture_bn_inputs = capture_bn_inputs;
        let out = self.model.forward(&mut ctx, x)?;
        let captured = std::mem::take(&mut ctx.bn_inputs);
        Ok((out, captured))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.model.infer(x)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.model.logits(x)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.model.predict(x)
    }

    /// Running statistics of every batch-norm layer, ordered by depth.
    pub fn bn_records(&self) -> Vec<BnStatRecord<T>> {
        let mut out = Vec::new();
        self.model.extractor.visit_bn(&mut |bn| {
            out.push(BnStatRecord {
                layer: bn.id(),
                mean: bn.running_mean.clone(),
                var: bn.running_var.clone(),
            })
        });
        out
    }

    /// Bit-level fingerprint of all weights and running statistics.
    pub fn fingerprint(&self) -> Vec<u64> {
        model_fingerprint(&self.model)
    }
}

/// Freeze a copy of the model. Later training of `model` does not affect it.
pub fn snapshot<T: Scalar>(model: &IncrementalModel<T>, phase: usize) -> ModelSnapshot<T> {
    ModelSnapshot {
        model: model.clone(),
        phase,
    }
}

/// Bit patterns of every parameter and running statistic, in visit order.
pub fn model_fingerprint<T: Scalar>(model: &IncrementalModel<T>) -> Vec<u64> {
    let mut m = model.clone();
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.extend(p.value.data().iter().map(|v| v.as_f64().to_bits())));
    model.extractor.visit_bn(&mut |bn| {
        out.extend(bn.running_mean.iter().chain(&bn.running_var).map(|v| v.as_f64().to_bits()))
    });
    out
}

/// Fingerprint of the extractor alone (weights plus running statistics).
pub fn extractor_fingerprint<T: Scalar>(ex: &FeatureExtractor<T>) -> Vec<u64> {
    let mut e = ex.clone();
    let mut out = Vec::new();
    e.visit_params(&mut |p| out.extend(p.value.data().iter().map(|v| v.as_f64().to_bits())));
    ex.visit_bn(&mut |bn| {
        out.extend(bn.running_mean.iter().chain(&bn.running_var).map(|v| v.as_f64().to_bits()))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(classes: usize, seed: u64) -> IncrementalModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BackboneConfig {
            widths: [4, 6, 8],
            blocks_per_stage: 1,
        };
        IncrementalModel::new(&cfg, (8, 8, 3), classes, &mut rng).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n, 3, 8, 8], 1.0, &mut rng)
    }

    #[test]
    fn expansion_keeps_old_rows_and_logits() {
        let mut m = toy(2, 1);
        let x = batch(5, 2);
        let before = m.logits(&x).unwrap();
        let old_rows = m.head.weight().value.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        m.head.expand(2, &mut rng).unwrap();
        assert_eq!(m.head.class_count(), 4);
        assert_eq!(&m.head.weight().value.data()[..old_rows.numel()], old_rows.data());
        let after = m.logits(&x).unwrap();
        for r in 0..5 {
            assert_eq!(&after.row(r)[..2], before.row(r));
        }
    }

    #[test]
    fn expansion_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ClassificationHead::<f32>::new(8, 50, &mut rng).unwrap();
        let head = expand_head(&head, 10, &mut rng).unwrap();
        assert_eq!(head.partitions(), vec![0..50, 50..60]);
        assert_eq!(head.old_class_count(), 50);
        assert!(expand_head(&head, 0, &mut rng).is_err());
        let h10 = ClassificationHead::<f32>::new(8, 10, &mut rng).unwrap();
        assert_eq!(expand_head(&h10, 5, &mut rng).unwrap().class_count(), 15);
    }

    #[test]
    fn head_partition_slices_concatenate_to_full_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = ClassificationHead::<f64>::new(6, 3, &mut rng).unwrap();
        head.expand(2, &mut rng).unwrap();
        let mut g = Graph::new();
        let v = g.constant(Tensor::randn(&[4, 6], 1.0, &mut rng));
        let mut ctx = Ctx::new(&mut g, Mode::FROZEN);
        let full = head.forward(&mut ctx, v).unwrap();
        let old = g.narrow_cols(full, 0, 3).unwrap();
        let new = g.narrow_cols(full, 3, 2).unwrap();
        for r in 0..4 {
            let mut cat = g.value(old).row(r).to_vec();
            cat.extend_from_slice(g.value(new).row(r));
            assert_eq!(cat, g.value(full).row(r));
        }
    }

    #[test]
    fn snapshot_is_isolated_from_live_training() {
        let mut m = toy(3, 5);
        let snap = snapshot(&m, 1);
        let x = batch(100, 6);
        let before = snap.logits(&x).unwrap();
        assert_eq!(before.max_abs_diff(&m.logits(&x).unwrap()), 0.0);
        m.visit_params(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v += 0.5));
        assert!(m.logits(&x).unwrap().max_abs_diff(&before) > 0.0);
        assert_eq!(snap.logits(&x).unwrap(), before);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.3, 0.5, 0.5, 0.1]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }

    #[test]
    fn predict_rejects_wrong_shape() {
        let m = toy(2, 7);
        assert!(m.predict(&Tensor::zeros(&[1, 3, 4, 4])).is_err());
    }
}
