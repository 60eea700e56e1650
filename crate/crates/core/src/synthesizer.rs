//! Data-free synthesis: a generator trained against a frozen snapshot so that its
//! images stand in for the previous tasks' data.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::{argmax_rows, BnStatRecord, ModelSnapshot};
use crate::nn::{BatchNorm, Conv2d, Ctx, HasParams, Linear, Mode, Param};
use crate::optim::Adam;
use crate::tensor::{Scalar, Tensor};

/// Weight of the squared-magnitude part of the image prior.
pub const PRIOR_L2_SCALE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthWeights {
    pub diversity: f64,
    pub content: f64,
    pub stat: f64,
    pub prior: f64,
}

impl Default for SynthWeights {
    fn default() -> Self {
        SynthWeights {
            diversity: 1.0,
            content: 1.0,
            stat: 5.0,
            prior: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub noise_dim: usize,
    /// Channels of every generator block.
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub content_temperature: f64,
    pub weights: SynthWeights,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            noise_dim: 256,
            width: 64,
            steps: 5000,
            batch_size: 64,
            lr: 1e-3,
            content_temperature: 1000.0,
            weights: SynthWeights::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.width == 0 {
            return Err(Error::invalid("generator noise_dim and width must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("synthesis batch_size must be at least 2"));
        }
        if !(self.lr > 0.0) || !(self.content_temperature > 0.0) {
            return Err(Error::invalid("synthesis lr and content_temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct GenBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

/// Noise-to-image network: linear projection to a coarse map, three
/// upsample/conv/norm/leaky-relu blocks, then a conv and tanh mapped to
/// normalized pixel space.
///
/// Batch norm inside the generator always uses batch statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GeneratorNet<T> {
    noise_dim: usize,
    width: usize,
    init_size: usize,
    /// (height, width, channels) of generated images.
    out_shape: (usize, usize, usize),
    normalization: Normalization,
    fc: Linear<T>,
    fc_bn: BatchNorm<T>,
    blocks: Vec<GenBlock<T>>,
    out_conv: Conv2d<T>,
}

impl<T: Scalar> GeneratorNet<T> {
    pub fn new<R: Rng + ?Sized>(
        noise_dim: usize,
        width: usize,
        out_shape: (usize, usize, usize),
        normalization: Normalization,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, w, c) = out_shape;
        if h != w || h % 8 != 0 || h == 0 {
            return Err(Error::invalid(format!(
                "generator needs square images with side divisible by 8, got {}x{}",
                h, w
            )));
        }
        if normalization.channels() != c {
            return Err(Error::invalid(format!(
                "normalization has {} channels, images have {}",
                normalization.channels(),
                c
            )));
        }
        let init_size = h / 8;
        let blocks = (0..3)
            .map(|_| GenBlock {
                conv: Conv2d::new(width, width, 3, 1, 1, rng),
                bn: BatchNorm::new(width, true),
            })
            .collect();
        Ok(GeneratorNet {
            noise_dim,
            width,
            init_size,
            out_shape,
            normalization,
            fc: Linear::new(noise_dim, width * init_size * init_size, true, rng),
            fc_bn: BatchNorm::new(width, true),
            blocks,
            out_conv: Conv2d::new(width, c, 3, 1, 1, rng),
        })
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        self.out_shape
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        Tensor::from_fn(&[n, self.noise_dim], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
    }

    /// `[n, noise_dim] -> [n, c, h, w]` in normalized pixel space. Needs `n >= 2`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
        let n = ctx.g.shape(z)[0];
        let mode = ctx.mode;
        ctx.mode.batch_stats = true;
        let h = self.fc.forward(ctx, z)?;
        let s = self.init_size;
        let h = ctx.g.reshape(h, &[n, self.width, s, s])?;
        let mut h = self.fc_bn.forward(ctx, h)?;
        for b in &self.blocks {
            h = ctx.g.upsample2x(h)?;
            h = b.conv.forward(ctx, h)?;
            h = b.bn.forward(ctx, h)?;
            h = ctx.g.leaky_relu(h, T::lit(0.2));
        }
        let h = self.out_conv.forward(ctx, h)?;
        let t = ctx.g.tanh(h);
        // pixel = (t + 1) / 2, then (pixel - mean) / std
        let scale: Vec<T> = self.normalization.std.iter().map(|s| T::lit(0.5 / s)).collect();
        let shift: Vec<T> = self
            .normalization
            .mean
            .iter()
            .zip(&self.normalization.std)
            .map(|(m, s)| T::lit((0.5 - m) / s))
            .collect();
        let out = ctx.g.channel_affine(t, &scale, &shift);
        ctx.mode = mode;
        ctx.bn_updates.clear();
        out
    }

    /// Gradient-free images from fresh noise.
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor<T>> {
        let (h, w, c) = self.out_shape;
        if n == 0 {
            return Ok(Tensor::zeros(&[0, c, h, w]));
        }
        // batch statistics need at least two samples
        let m = n.max(2);
        let mut g = Graph::new();
        let z = g.constant(self.noise(m, rng));
        let mut ctx = Ctx::new(&mut g, Mode::FROZEN);
        let x = self.forward(&mut ctx, z)?;
        Ok(g.value(x).slice_leading(0, n))
    }
}

impl<T: Scalar> HasParams<T> for GeneratorNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc.visit_params(f);
        self.fc_bn.visit_params(f);
        for b in &mut self.blocks {
            b.conv.visit_params(f);
            b.bn.visit_params(f);
        }
        self.out_conv.visit_params(f);
    }
}

/// Cross-entropy between the uniform distribution and the batch-mean prediction.
/// Minimum `ln K` when predictions are balanced across the `K` classes.
pub fn diversity_loss<T: Scalar>(g: &mut Graph<T>, teacher_logits: Var) -> Result<Var> {
    let p = g.softmax(teacher_logits)?;
    let mean = g.mean_leading(p)?;
    let logp = g.ln(mean);
    let m = g.mean_all(logp);
    Ok(g.scale(m, -T::one()))
}

/// Cross-entropy of the temperature-scaled teacher prediction against `labels`.
pub fn content_loss<T: Scalar>(g: &mut Graph<T>, teacher_logits: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("content temperature must be positive"));
    }
    let scaled = g.scale(teacher_logits, T::lit(1.0 / temperature));
    cross_entropy(g, scaled, labels)
}

/// Sum over layers and channels of `KL(N(mu_s, var_s) || N(mu_b, var_b))` between the
/// synthetic batch statistics at each batch-norm input and the stored running statistics.
pub fn stat_alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    bn_inputs: &[(u64, Var)],
    records: &[BnStatRecord<T>],
) -> Result<Var> {
    if bn_inputs.len() != records.len() {
        return Err(Error::invalid(format!(
            "{} captured layers for {} stored statistics",
            bn_inputs.len(),
            records.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&(layer, x), rec) in bn_inputs.iter().zip(records) {
        if layer != rec.layer {
            return Err(Error::invalid("batch-norm layers out of order"));
        }
        let mu_s = g.channel_mean(x)?;
        let var_s = g.channel_var(x)?;
        if let Some(ch) = g.value(var_s).data().iter().position(|&v| !(v > T::zero())) {
            return Err(Error::state(format!("synthetic variance is not positive in channel {}", ch)));
        }
        if let Some(ch) = rec.var.iter().position(|&v| !(v > T::zero())) {
            return Err(Error::state(format!("stored variance is not positive in channel {}", ch)));
        }
        let c = rec.mean.len();
        let inv_var_b = Tensor::new(vec![c], rec.var.iter().map(|&v| T::one() / v).collect())?;
        let mu_b = g.constant(Tensor::new(vec![c], rec.mean.clone())?);
        let d = g.sub(mu_s, mu_b)?;
        let d2 = g.square(d);
        let num = g.add(var_s, d2)?;
        let ratio = g.mul_const(num, &inv_var_b)?;
        let ln_var_s = g.ln(var_s);
        let inner = g.sub(ratio, ln_var_s)?;
        let inner = g.sum_all(inner);
        let constant: T = rec.var.iter().map(|&v| v.ln() - T::one()).sum();
        let kl = g.add_scalar(inner, constant);
        let kl = g.scale(kl, T::lit(0.5));
        total = Some(match total {
            Some(t) => g.add(t, kl)?,
            None => kl,
        });
    }
    total.ok_or_else(|| Error::invalid("no batch-norm layers to align"))
}

/// Smoothness plus magnitude prior: mean squared neighbour differences plus
/// `1e-2` times the mean squared pixel value.
pub fn image_prior_loss<T: Scalar>(g: &mut Graph<T>, images: Var) -> Result<Var> {
    let tv = g.total_variation_sq(images)?;
    let sq = g.square(images);
    let l2 = g.mean_all(sq);
    let l2 = g.scale(l2, T::lit(PRIOR_L2_SCALE));
    g.add(tv, l2)
}

/// Values of the four synthesis terms for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthLossValues {
    pub diversity: f64,
    pub content: f64,
    pub stat: f64,
    pub prior: f64,
    pub total: f64,
}

/// Weighted synthesis objective on images already in the graph.
pub fn synthesis_objective<T: Scalar>(
    g: &mut Graph<T>,
    images: Var,
    snapshot: &ModelSnapshot<T>,
    records: &[BnStatRecord<T>],
    config: &SynthesisConfig,
) -> Result<(Var, SynthLossValues)> {
    let (out, captured) = snapshot.forward(g, images, true)?;
    let labels = argmax_rows(g.value(out.logits));
    let w = config.weights;
    let div = diversity_loss(g, out.logits)?;
    let con = content_loss(g, out.logits, &labels, config.content_temperature)?;
    let stat = stat_alignment_loss(g, &captured, records)?;
    let prior = image_prior_loss(g, images)?;
    let mut vals = SynthLossValues {
        diversity: g.value(div).item().as_f64(),
        content: g.value(con).item().as_f64(),
        stat: g.value(stat).item().as_f64(),
        prior: g.value(prior).item().as_f64(),
        total: 0.0,
    };
    let a = g.scale(div, T::lit(w.diversity));
    let b = g.scale(con, T::lit(w.content));
    let c = g.scale(stat, T::lit(w.stat));
    let d = g.scale(prior, T::lit(w.prior));
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    let total = g.add(ab, cd)?;
    vals.total = g.value(total).item().as_f64();
    Ok((total, vals))
}

/// Per-step loss trace of a synthesis run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SynthesisLog {
    pub steps: Vec<SynthLossValues>,
}

/// Fit a fresh generator to the snapshot with Adam. The snapshot is never modified.
pub fn train_synthesizer<T: Scalar, R: Rng + ?Sized>(
    snapshot: &ModelSnapshot<T>,
    normalization: &Normalization,
    config: &SynthesisConfig,
    rng: &mut R,
) -> Result<(GeneratorNet<T>, SynthesisLog)> {
    config.validate()?;
    let (h, w, c) = snapshot.input_shape();
    let mut gen = GeneratorNet::new(config.noise_dim, config.width, (h, w, c), normalization.clone(), rng)?;
    let records = snapshot.bn_records();
    let mut opt = Adam::new(config.lr);
    let mut log = SynthesisLog::default();
    for _ in 0..config.steps {
        let mut g = Graph::new();
        let z = g.constant(gen.noise(config.batch_size, rng));
        let mut ctx = Ctx::new(&mut g, Mode::TRAIN);
        let images = gen.forward(&mut ctx, z)?;
        let (loss, vals) = synthesis_objective(&mut g, images, snapshot, &records, config)?;
        if !vals.total.is_finite() {
            return Err(Error::state("synthesis loss became non-finite"));
        }
        let grads = g.backward(loss)?;
        opt.step(&mut [&mut gen], &grads);
        log.steps.push(vals);
    }
    Ok((gen, log))
}

/// Generated images labelled by the snapshot, with the snapshot's logits.
#[derive(Clone, Debug)]
pub struct SyntheticBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub teacher_logits: Tensor<T>,
}

pub fn sample<T: Scalar, R: Rng + ?Sized>(
    generator: &GeneratorNet<T>,
    snapshot: &ModelSnapshot<T>,
    n: usize,
    rng: &mut R,
) -> Result<SyntheticBatch<T>> {
    if n == 0 {
        return Err(Error::invalid("cannot sample an empty synthetic batch"));
    }
    let images = generator.generate(n, rng)?;
    let teacher_logits = snapshot.logits(&images)?;
    Ok(SyntheticBatch {
        labels: argmax_rows(&teacher_logits),
        images,
        teacher_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{snapshot, BackboneConfig, IncrementalModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_snapshot(rng: &mut ChaCha8Rng) -> ModelSnapshot<f64> {
        let cfg = BackboneConfig {
            widths: [4, 4, 4],
            blocks_per_stage: 1,
        };
        let m = IncrementalModel::new(&cfg, (8, 8, 3), 4, rng).unwrap();
        snapshot(&m, 1)
    }

    #[test]
    fn diversity_minimum_is_ln_k() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::new(vec![2, 3], vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap());
        let skewed = diversity_loss(&mut g, z).unwrap();
        let u = g.input(Tensor::zeros(&[4, 3]));
        let uniform = diversity_loss(&mut g, u).unwrap();
        assert!((g.value(uniform).item() - 3f64.ln()).abs() < 1e-12);
        assert!(g.value(skewed).item() > 3f64.ln());
    }

    #[test]
    fn stat_alignment_zero_when_matching() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let rec = BnStatRecord {
            layer: 7,
            mean: vec![2.5],
            var: vec![1.25],
        };
        let l = stat_alignment_loss(&mut g, &[(7, x)], &[rec.clone()]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let flat = g.input(Tensor::full(&[4, 1], 2.0));
        assert!(matches!(
            stat_alignment_loss(&mut g, &[(7, flat)], &[rec]),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn generator_shapes_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let snap = tiny_snapshot(&mut rng);
        let norm = Normalization::identity(3);
        let gen = GeneratorNet::<f64>::new(16, 8, (8, 8, 3), norm.clone(), &mut rng).unwrap();
        let b = sample(&gen, &snap, 5, &mut rng).unwrap();
        assert_eq!(b.images.shape(), &[5, 3, 8, 8]);
        assert!(b.images.data().iter().all(|v| v.is_finite() && *v >= -1e-12 && *v <= 1.0 + 1e-12));
        assert!(b.labels.iter().all(|&y| y < 4));
        assert!(GeneratorNet::<f64>::new(16, 8, (12, 12, 3), norm, &mut rng).is_err());
    }

    #[test]
    fn synthesis_does_not_touch_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let snap = tiny_snapshot(&mut rng);
        let before = snap.fingerprint();
        let cfg = SynthesisConfig {
            noise_dim: 8,
            width: 4,
            steps: 3,
            batch_size: 4,
            ..SynthesisConfig::default()
        };
        let (_, log) = train_synthesizer(&snap, &Normalization::identity(3), &cfg, &mut rng).unwrap();
        assert_eq!(log.steps.len(), 3);
        assert_eq!(before, snap.fingerprint());
    }
}
