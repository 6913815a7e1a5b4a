//! Convolutional encoder, class prototypes and embedding-to-prototype distances.
//!
//! Class indices are zero-based throughout the crate: a split with `N` known
//! classes uses labels `0..N`, and prototype row `k` belongs to class `k`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// (channels, height, width) of the input images.
    pub input_shape: [usize; 3],
    /// Filter count of each 3x3 conv stage.
    pub conv_widths: Vec<usize>,
    pub embedding_dim: usize,
    /// Initial PReLU slope for every channel.
    pub prelu_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_shape: [1, 28, 28],
            conv_widths: vec![32, 64, 128],
            embedding_dim: 128,
            prelu_init: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "embedding_dim must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Config(
                "encoder needs at least one conv stage with a nonzero width".into(),
            ));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        self.flat_features().map(|_| ())
    }

    /// Spatial extent after every conv (padding 1, same size) + 2x2 pool stage.
    fn spatial_after_stages(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for (i, _) in self.conv_widths.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "input {:?} too small for pooling stage {}",
                    self.input_shape,
                    i + 1
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok((h, w))
    }

    fn flat_features(&self) -> Result<usize> {
        let (h, w) = self.spatial_after_stages()?;
        Ok(h * w * self.conv_widths.last().copied().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvStage<T> {
    kernel: Tensor<T>,
    bias: Tensor<T>,
    slope: Tensor<T>,
}

/// Conv stages (3x3 conv, bias, PReLU, 2x2 max-pool) followed by one linear
/// layer to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    stages: Vec<ConvStage<T>>,
    fc_weight: Tensor<T>,
    fc_bias: Tensor<T>,
}

fn uniform_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = if bound > 0.0 {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
    } else {
        vec![T::zero(); n]
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches").with_grad()
}

impl<T: Scalar> Encoder<T> {
    /// He-uniform conv initialisation (accounting for the PReLU slope), zero biases.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let gain = 2.0 / (1.0 + config.prelu_init * config.prelu_init);
        let mut in_ch = config.input_shape[0];
        let mut stages = Vec::new();
        for &width in &config.conv_widths {
            let fan_in = (in_ch * 9) as f64;
            stages.push(ConvStage {
                kernel: uniform_tensor(&mut rng, &[width, in_ch, 3, 3], (3.0 * gain / fan_in).sqrt()),
                bias: Tensor::zeros([width]).with_grad(),
                slope: Tensor::full([width], T::from_f64(config.prelu_init)).with_grad(),
            });
            in_ch = width;
        }
        let flat = config.flat_features()?;
        // Scaled down by sqrt(D) so initial embeddings have roughly unit norm
        // instead of unit variance per coordinate; squared-distance logits
        // otherwise start in the hundreds for D = 128.
        let fc_bound = (3.0 / (flat * config.embedding_dim) as f64).sqrt();
        let fc_weight = uniform_tensor(&mut rng, &[config.embedding_dim, flat], fc_bound);
        let fc_bias = Tensor::zeros([config.embedding_dim]).with_grad();
        Ok(Encoder {
            config,
            stages,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Parameter tensors in a fixed order: per stage (kernel, bias, slope),
    /// then the final weight and bias.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend([&s.kernel, &s.bias, &s.slope]);
        }
        out.extend([&self.fc_weight, &self.fc_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend([&mut s.kernel, &mut s.bias, &mut s.slope]);
        }
        out.extend([&mut self.fc_weight, &mut self.fc_bias]);
        out
    }

    /// Parameter names matching [`Encoder::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.stages.len() {
            out.extend([
                format!("conv{i}.kernel"),
                format!("conv{i}.bias"),
                format!("conv{i}.slope"),
            ]);
        }
        out.extend(["fc.weight".to_string(), "fc.bias".to_string()]);
        out
    }

    /// Replaces parameter values, keeping shapes. Used when loading checkpoints.
    pub fn load_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut targets = self.params_mut();
        if targets.len() != values.len() {
            return Err(Error::Protocol(format!(
                "expected {} encoder tensors, found {}",
                targets.len(),
                values.len()
            )));
        }
        for (dst, src) in targets.iter_mut().zip(values) {
            if dst.shape() != src.shape() {
                return Err(Error::Protocol(format!(
                    "encoder tensor shape {:?} does not match stored {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params().into_iter().map(|p| g.param(p)).collect()
    }

    /// Builds the embedding of `images: [B, C, H, W]` on `g` using parameter
    /// vars from [`Encoder::register`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<Var> {
        let s = g.shape(images);
        let [c, h, w] = self.config.input_shape;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::dim(format!(
                "encoder expects [B, {c}, {h}, {w}] images, got {s:?}"
            )));
        }
        let mut x = images;
        for i in 0..self.stages.len() {
            let (k, b, a) = (vars[3 * i], vars[3 * i + 1], vars[3 * i + 2]);
            x = g.conv2d(x, k, 1, 1)?;
            x = g.channel_bias(x, b)?;
            x = g.prelu(x, a)?;
            x = g.maxpool2d(x, 2, 2)?;
        }
        let x = g.flatten(x)?;
        let n = vars.len();
        g.linear(x, vars[n - 2], vars[n - 1])
    }

    /// Embeds a batch without keeping the graph around.
    pub fn encode(&self, images: &Tensor<T>) -> Result<EmbeddingBatch<T>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().into_iter().map(|p| g.input(p.clone())).collect();
        let x = g.input(images.clone());
        let f = self.forward(&mut g, &vars, x)?;
        Ok(EmbeddingBatch {
            features: g.tensor(f),
            labels: None,
        })
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

/// Embeddings of one batch, optionally with their (zero-based) known-class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    pub features: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Gaussian,
    Uniform,
}

/// One learnable point per known class, stored as an `[N, D]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    pub points: Tensor<T>,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn from_points(points: Tensor<T>) -> Result<Self> {
        if points.shape().len() != 2 || points.shape()[0] < 2 {
            return Err(Error::Protocol(format!(
                "prototype set needs shape [N >= 2, D], got {:?}",
                points.shape()
            )));
        }
        if !points.all_finite() {
            return Err(Error::Numeric("non-finite prototype coordinate".into()));
        }
        let points = if points.requires_grad() {
            points
        } else {
            points.with_grad()
        };
        Ok(PrototypeSet { points })
    }

    pub fn num_classes(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    /// O_c, the mean of all prototypes.
    pub fn centroid(&self) -> Vec<f64> {
        let (n, d) = (self.num_classes(), self.dim());
        (0..d)
            .map(|j| (0..n).map(|i| self.points.data()[i * d + j].as_f64()).sum::<f64>() / n as f64)
            .collect()
    }

    /// Plain Euclidean distance of every prototype to the centroid.
    pub fn radii(&self) -> Vec<f64> {
        let c = self.centroid();
        (0..self.num_classes())
            .map(|i| euclidean(self.points.row(i).iter().map(|v| v.as_f64()), &c))
            .collect()
    }
}

pub(crate) fn euclidean(a: impl Iterator<Item = f64>, b: &[f64]) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Random prototypes: gaussian draws N(0, scale^2), uniform draws U(-scale, scale).
pub fn init_prototypes<T: Scalar>(
    n: usize,
    d: usize,
    scheme: InitScheme,
    scale: f64,
    seed: u64,
) -> Result<PrototypeSet<T>> {
    if n < 2 {
        return Err(Error::Protocol(format!(
            "open-set training needs at least 2 known classes, got {n}"
        )));
    }
    if d < 2 {
        return Err(Error::Protocol(format!(
            "embedding dimension must be at least 2, got {d}"
        )));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::usage(format!(
            "prototype scale must be finite and >= 0, got {scale}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Init, 1);
    let data: Vec<T> = match scheme {
        InitScheme::Gaussian => (0..n * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(scale * z)
            })
            .collect(),
        InitScheme::Uniform if scale > 0.0 => {
            let dist = Uniform::new(-scale, scale).expect("positive scale");
            (0..n * d).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
        }
        InitScheme::Uniform => vec![T::zero(); n * d],
    };
    PrototypeSet::from_points(Tensor::new([n, d], data)?)
}

/// `out[b, i] = ||features[b] - prototypes[i]||^2`, recorded on `g`.
pub fn sq_distances<T: Scalar>(g: &mut Graph<T>, features: Var, prototypes: Var) -> Result<Var> {
    g.pairwise_sq_dist(features, prototypes)
}

/// Encoder plus prototypes: everything a training run optimises.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub prototypes: PrototypeSet<T>,
}

/// Graph handles of a registered [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: Vec<Var>,
    pub prototypes: Var,
}

impl<T: Scalar> Model<T> {
    pub fn register(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.register(g),
            prototypes: g.param(&self.prototypes.points),
        }
    }

    /// All learnable tensors, encoder first, prototypes last.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.encoder.params_mut();
        p.push(&mut self.prototypes.points);
        p
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.encoder.params();
        p.push(&self.prototypes.points);
        p
    }

    /// Copies gradients from a finished backward pass into the parameter tensors.
    pub fn collect_grads(&mut self, g: &Graph<T>, vars: &ModelVars) -> Result<()> {
        let all: Vec<Var> = vars.encoder.iter().copied().chain([vars.prototypes]).collect();
        for (p, v) in self.params_mut().into_iter().zip(all) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_shape: [1, 8, 8],
            conv_widths: vec![4, 6],
            embedding_dim: 2,
            prelu_init: 0.25,
        }
    }

    #[test]
    fn zero_input_through_zeroed_final_layer_is_zero() {
        let mut enc = Encoder::<f64>::new(small_config(), 3).unwrap();
        let mut ps = enc.params_mut();
        let n = ps.len();
        ps[n - 2].data_mut().iter_mut().for_each(|v| *v = 0.0);
        ps[n - 1].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let out = enc.encode(&Tensor::zeros([3, 1, 8, 8])).unwrap();
        assert_eq!(out.features.shape(), &[3, 2]);
        assert!(out.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img: Vec<f64> = (0..2 * 64).map(|_| rng.random()).collect();
        let img = Tensor::new([2, 1, 8, 8], img).unwrap();
        let a = Encoder::<f32>::new(small_config(), 5)
            .unwrap()
            .encode(&img.cast())
            .unwrap();
        let b = Encoder::<f32>::new(small_config(), 5)
            .unwrap()
            .encode(&img.cast())
            .unwrap();
        assert_eq!(a, b);
        assert!(a.features.all_finite());
        let c = Encoder::<f32>::new(small_config(), 6)
            .unwrap()
            .encode(&img.cast())
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_is_batch_by_dim_for_any_batch() {
        let enc = Encoder::<f32>::new(small_config(), 1).unwrap();
        for b in [1, 2, 7] {
            let out = enc.encode(&Tensor::full([b, 1, 8, 8], 0.5)).unwrap();
            assert_eq!(out.features.shape(), &[b, 2]);
        }
    }

    #[test]
    fn encoder_rejects_wrong_image_shape() {
        let enc = Encoder::<f32>::new(small_config(), 1).unwrap();
        assert!(matches!(
            enc.encode(&Tensor::zeros([1, 3, 8, 8])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.embedding_dim = 1;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.conv_widths.clear();
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.conv_widths = vec![2, 2, 2, 2];
        assert!(c.validate().is_err(), "8x8 input cannot be pooled four times");
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn prototypes_zero_scale_at_origin() {
        for scheme in [InitScheme::Gaussian, InitScheme::Uniform] {
            let p = init_prototypes::<f64>(4, 3, scheme, 0.0, 1).unwrap();
            assert!(p.points.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn prototypes_deterministic_and_need_two_classes() {
        let a = init_prototypes::<f32>(5, 8, InitScheme::Gaussian, 1.0, 9).unwrap();
        let b = init_prototypes::<f32>(5, 8, InitScheme::Gaussian, 1.0, 9).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            init_prototypes::<f32>(1, 8, InitScheme::Gaussian, 1.0, 9),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn gaussian_prototype_moments() {
        let p = init_prototypes::<f64>(100, 100, InitScheme::Gaussian, 1.0, 2).unwrap();
        let v = p.points.data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn uniform_prototypes_within_scale() {
        let p = init_prototypes::<f64>(10, 10, InitScheme::Uniform, 0.5, 2).unwrap();
        assert!(p.points.data().iter().all(|v| v.abs() <= 0.5));
    }

    fn dist_oracle(f: &[f64], p: &[f64], d: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for fr in f.chunks(d) {
            for pr in p.chunks(d) {
                let mut s = 0.0;
                for k in 0..d {
                    s += (fr[k] - pr[k]) * (fr[k] - pr[k]);
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn sq_distances_examples() {
        let mut g = Graph::<f64>::new();
        let f = g.input(Tensor::from_f64([1, 2], &[0.0, 0.0]).unwrap());
        let p = g.input(Tensor::from_f64([2, 2], &[3.0, 4.0, 0.0, 1.0]).unwrap());
        let d = sq_distances(&mut g, f, p).unwrap();
        assert_eq!(g.value(d), &[25.0, 1.0]);

        let same = g.input(Tensor::from_f64([1, 2], &[3.0, 4.0]).unwrap());
        let d = sq_distances(&mut g, same, p).unwrap();
        assert_eq!(g.value(d)[0], 0.0);

        let bad = g.input(Tensor::<f64>::zeros([1, 3]));
        assert!(matches!(sq_distances(&mut g, bad, p), Err(Error::Dimension(_))));
    }

    #[test]
    fn sq_distances_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f: Vec<f64> = (0..35).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..28).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let fv = g.input(Tensor::new([5, 7], f.clone()).unwrap());
        let pv = g.input(Tensor::new([4, 7], p.clone()).unwrap());
        let d = sq_distances(&mut g, fv, pv).unwrap();
        assert_eq!(g.value(d), dist_oracle(&f, &p, 7).as_slice());

        // symmetric under swapping a feature row with a prototype row, zero diagonal
        let fv2 = g.input(Tensor::new([4, 7], p.clone()).unwrap());
        let pv2 = g.input(Tensor::new([5, 7], f.clone()).unwrap());
        let d2 = sq_distances(&mut g, fv2, pv2).unwrap();
        for b in 0..5 {
            for i in 0..4 {
                assert_eq!(g.value(d)[b * 4 + i], g.value(d2)[i * 5 + b]);
            }
        }
        let self_d = sq_distances(&mut g, fv, fv).unwrap();
        for b in 0..5 {
            assert_eq!(g.value(self_d)[b * 5 + b], 0.0);
        }
    }

    #[test]
    fn sq_distances_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = [Tensor::new([4, 3], f).unwrap(), Tensor::new([3, 3], p).unwrap()];
        let r = crate::autodiff::grad_check(&params, 1e-5, |g, v| {
            let d = sq_distances(g, v[0], v[1])?;
            let w = g.input(Tensor::new([4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap());
            let m = g.mul(d, w)?;
            g.sum(m)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn radii_and_centroid() {
        let p = PrototypeSet::<f64>::from_points(Tensor::from_f64([3, 2], &[0.0, 0.0, 1.0, 0.0, 5.0, 0.0]).unwrap())
            .unwrap();
        assert_eq!(p.centroid(), vec![2.0, 0.0]);
        assert_eq!(p.radii(), vec![2.0, 1.0, 3.0]);
    }
}
