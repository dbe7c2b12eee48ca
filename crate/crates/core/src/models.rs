//! Tiny segmentation network and per-source domain discriminators.
//!
//! The segmentation backbone is a fixed 3-layer convnet producing per-pixel
//! logits at input resolution. Discriminators read a probability map and emit
//! a per-location domain logit map; `sigmoid(logit)` is the probability the
//! map came from the SOURCE domain (source = 1, target = 0). All dissimilarity
//! math in `source_select` depends on that convention.

use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::io;
use crate::maps::ProbMap;
use crate::rng::{fnv1a, named_stream};
use crate::scalar::Scalar;

/// Hidden width of the segmentation backbone.
pub const SEG_HIDDEN: usize = 16;
/// Hidden width of the discriminators.
pub const DISC_HIDDEN: usize = 8;
/// Negative slope of the discriminators' leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// One convolution layer's parameters plus its fixed geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> ConvLayer<F> {
    /// Kaiming-uniform fan-in init for the kernel, zero bias. The RNG stream
    /// is derived from the run seed and the layer's name, so initialization is
    /// independent of construction order.
    fn init(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, seed: u64, name: &str) -> Self {
        let mut rng = named_stream(seed, name);
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in * k * k;
        let values: Vec<F> = (0..n)
            .map(|_| F::from_f64_lit((rng.random::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        ConvLayer {
            weight: Tensor::new(vec![c_out, c_in, k, k], values).expect("kernel shape"),
            bias: Tensor::zeros(vec![c_out]),
            stride,
            pad,
        }
    }

    fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    fn register(&self, tape: &mut Tape<F>, track: bool) -> (Var, Var) {
        if track {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        }
    }

    /// Applies the layer. Inputs whose size would make the output non-integral
    /// are first cropped (top-left) to the largest valid size, so strided
    /// layers accept any input the stack can reach.
    fn apply(&self, tape: &mut Tape<F>, vars: (Var, Var), mut x: Var) -> Result<Var> {
        let k = self.kernel_size();
        if self.stride > 1 {
            let shape = tape.value(x).shape().to_vec();
            let valid = |n: usize| -> usize {
                let reach = n + 2 * self.pad;
                if reach < k {
                    return n;
                }
                n - (reach - k) % self.stride
            };
            let (nh, nw) = (valid(shape[1]), valid(shape[2]));
            if nh != shape[1] || nw != shape[2] {
                x = tape.crop2d(x, nh, nw)?;
            }
        }
        let y = tape.conv2d(x, vars.0, self.stride, self.pad)?;
        tape.bias_add(y, vars.1)
    }
}

// ── segmentation network ─────────────────────────────────────────────────

/// conv(3→16, k3, pad1) → relu → conv(16→16, k3, pad1) → relu → conv(16→|C|, k1).
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<F: Scalar> {
    conv1: ConvLayer<F>,
    conv2: ConvLayer<F>,
    conv3: ConvLayer<F>,
    num_classes: usize,
}

/// Tape handles for one registration of a [`SegNet`].
pub struct SegNetVars {
    layers: [(Var, Var); 3],
}

impl<F: Scalar> SegNet<F> {
    pub fn init(num_classes: usize, seed: u64, stream_prefix: &str) -> Self {
        assert!(num_classes >= 2, "need at least 2 classes");
        let name = |layer: &str| format!("{stream_prefix}/{layer}");
        SegNet {
            conv1: ConvLayer::init(3, SEG_HIDDEN, 3, 1, 1, seed, &name("conv1")),
            conv2: ConvLayer::init(SEG_HIDDEN, SEG_HIDDEN, 3, 1, 1, seed, &name("conv2")),
            conv3: ConvLayer::init(SEG_HIDDEN, num_classes, 1, 1, 0, seed, &name("conv3")),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn register(&self, tape: &mut Tape<F>, track: bool) -> SegNetVars {
        SegNetVars {
            layers: [
                self.conv1.register(tape, track),
                self.conv2.register(tape, track),
                self.conv3.register(tape, track),
            ],
        }
    }

    /// Logits for one image on an existing tape.
    pub fn forward(&self, tape: &mut Tape<F>, vars: &SegNetVars, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                got: if shape.is_empty() { 0 } else { shape[0] },
            });
        }
        if shape[1] < 3 || shape[2] < 3 {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: vec![3, 3, 3],
            });
        }
        let h1 = self.conv1.apply(tape, vars.layers[0], image)?;
        let h1 = tape.relu(h1);
        let h2 = self.conv2.apply(tape, vars.layers[1], h1)?;
        let h2 = tape.relu(h2);
        self.conv3.apply(tape, vars.layers[2], h2)
    }

    /// Evaluation-only forward; no gradients are recorded.
    pub fn logits(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let img = tape.constant(image.clone());
        let out = self.forward(&mut tape, &vars, img)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluation-only softmax probability map.
    pub fn predict(&self, image: &Tensor<F>) -> Result<ProbMap<F>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let img = tape.constant(image.clone());
        let logits = self.forward(&mut tape, &vars, img)?;
        let probs = tape.softmax_channels(logits)?;
        Ok(ProbMap::from_softmax(tape.value(probs).clone()))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("conv1.weight".into(), &self.conv1.weight),
            ("conv1.bias".into(), &self.conv1.bias),
            ("conv2.weight".into(), &self.conv2.weight),
            ("conv2.bias".into(), &self.conv2.bias),
            ("conv3.weight".into(), &self.conv3.weight),
            ("conv3.bias".into(), &self.conv3.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
        ]
    }
}

impl SegNetVars {
    /// Vars in `named_params` order, for gradient lookup.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

// ── discriminator ────────────────────────────────────────────────────────

/// conv(|C|→8, k3, stride2) → leaky-relu(0.2) → conv(8→8, k3, stride2)
/// → leaky-relu(0.2) → conv(8→1, k1), yielding a per-location domain logit map.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<F: Scalar> {
    conv1: ConvLayer<F>,
    conv2: ConvLayer<F>,
    conv3: ConvLayer<F>,
    num_classes: usize,
}

pub struct DiscriminatorVars {
    layers: [(Var, Var); 3],
}

impl<F: Scalar> Discriminator<F> {
    pub fn init(num_classes: usize, seed: u64, stream_prefix: &str) -> Self {
        let name = |layer: &str| format!("{stream_prefix}/{layer}");
        Discriminator {
            conv1: ConvLayer::init(num_classes, DISC_HIDDEN, 3, 2, 1, seed, &name("conv1")),
            conv2: ConvLayer::init(DISC_HIDDEN, DISC_HIDDEN, 3, 2, 1, seed, &name("conv2")),
            conv3: ConvLayer::init(DISC_HIDDEN, 1, 1, 1, 0, seed, &name("conv3")),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn register(&self, tape: &mut Tape<F>, track: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            layers: [
                self.conv1.register(tape, track),
                self.conv2.register(tape, track),
                self.conv3.register(tape, track),
            ],
        }
    }

    /// Domain logit map for a probability-map input on an existing tape.
    pub fn forward(&self, tape: &mut Tape<F>, vars: &DiscriminatorVars, probs: Var) -> Result<Var> {
        let shape = tape.value(probs).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.num_classes {
            return Err(Error::ChannelMismatch {
                expected: self.num_classes,
                got: if shape.is_empty() { 0 } else { shape[0] },
            });
        }
        let slope = F::from_f64_lit(LEAKY_SLOPE);
        let h1 = self.conv1.apply(tape, vars.layers[0], probs)?;
        let h1 = tape.leaky_relu(h1, slope);
        let h2 = self.conv2.apply(tape, vars.layers[1], h1)?;
        let h2 = tape.leaky_relu(h2, slope);
        self.conv3.apply(tape, vars.layers[2], h2)
    }

    /// Evaluation-only logit map.
    pub fn logits(&self, probs: &ProbMap<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let p = tape.constant(probs.tensor().clone());
        let out = self.forward(&mut tape, &vars, p)?;
        Ok(tape.value(out).clone())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("conv1.weight".into(), &self.conv1.weight),
            ("conv1.bias".into(), &self.conv1.bias),
            ("conv2.weight".into(), &self.conv2.weight),
            ("conv2.bias".into(), &self.conv2.bias),
            ("conv3.weight".into(), &self.conv3.weight),
            ("conv3.bias".into(), &self.conv3.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
        ]
    }
}

impl DiscriminatorVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

// ── bundle & persistence ─────────────────────────────────────────────────

/// One segmentation net plus one discriminator per source domain.
#[derive(Debug, Clone)]
pub struct ModelBundle<F: Scalar> {
    pub seg: SegNet<F>,
    pub discs: Vec<Discriminator<F>>,
    pub num_classes: usize,
}

/// Architecture fingerprint; parameter files carry it and loads reject a
/// mismatch.
pub fn config_hash(num_classes: usize, num_discs: usize) -> u64 {
    let desc = format!(
        "segnet:3-{SEG_HIDDEN}-{SEG_HIDDEN}-{num_classes};disc:{num_classes}-{DISC_HIDDEN}-{DISC_HIDDEN}-1;discs={num_discs}"
    );
    fnv1a(desc.as_bytes())
}

impl<F: Scalar> ModelBundle<F> {
    pub fn new(seg: SegNet<F>, discs: Vec<Discriminator<F>>) -> Self {
        let num_classes = seg.num_classes();
        for d in &discs {
            assert_eq!(d.num_classes(), num_classes, "bundle class sets must agree");
        }
        ModelBundle {
            seg,
            discs,
            num_classes,
        }
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(self.num_classes, self.discs.len())
    }

    pub fn save_params(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor<F>)> = Vec::new();
        for (name, t) in self.seg.named_params() {
            tensors.push((format!("seg.{name}"), t));
        }
        for (i, d) in self.discs.iter().enumerate() {
            for (name, t) in d.named_params() {
                tensors.push((format!("disc{i}.{name}"), t));
            }
        }
        io::save_param_file(path, self.config_hash(), &tensors)
    }

    /// Loads a bundle saved by [`Self::save_params`]. The file's config hash
    /// must match the hash for `(num_classes, num_discs)`.
    pub fn load_params(path: &Path, num_classes: usize, num_discs: usize) -> Result<Self> {
        let expected = config_hash(num_classes, num_discs);
        let (file_hash, tensors) = io::load_param_file::<F>(path)?;
        if file_hash != expected {
            return Err(Error::ConfigHashMismatch {
                file: file_hash,
                expected,
            });
        }
        // Fresh skeletons, then overwrite every tensor by name.
        let mut bundle = ModelBundle::new(
            SegNet::init(num_classes, 0, "load/seg"),
            (0..num_discs)
                .map(|i| Discriminator::init(num_classes, 0, &format!("load/disc{i}")))
                .collect(),
        );
        let mut filled = 0usize;
        let expected_count = 6 * (1 + num_discs);
        for (name, tensor) in tensors {
            let slot = bundle.lookup_mut(&name).ok_or_else(|| Error::MalformedFile {
                path: path.display().to_string(),
                detail: format!("unknown tensor record {name:?}"),
            })?;
            if slot.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    left: slot.shape().to_vec(),
                    right: tensor.shape().to_vec(),
                });
            }
            *slot = tensor;
            filled += 1;
        }
        if filled != expected_count {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                detail: format!("expected {expected_count} tensor records, found {filled}"),
            });
        }
        Ok(bundle)
    }

    fn lookup_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let (head, rest) = name.split_once('.')?;
        let layer_params: Vec<&mut Tensor<F>> = if head == "seg" {
            self.seg.params_mut()
        } else {
            let idx = head.strip_prefix("disc")?;
            let idx: usize = idx.parse().ok()?;
            self.discs.get_mut(idx)?.params_mut()
        };
        let pos = match rest {
            "conv1.weight" => 0,
            "conv1.bias" => 1,
            "conv2.weight" => 2,
            "conv2.bias" => 3,
            "conv3.weight" => 4,
            "conv3.bias" => 5,
            _ => return None,
        };
        layer_params.into_iter().nth(pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn image(h: usize, w: usize) -> Tensor<f64> {
        let mut rng = named_stream(3, "test/image");
        let values = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![3, h, w], values).unwrap()
    }

    #[test]
    fn seg_output_shape_contract() {
        let net = SegNet::<f64>::init(5, 7, "t/seg");
        for (h, w) in [(3, 3), (8, 8), (5, 9), (32, 32)] {
            let out = net.logits(&image(h, w)).unwrap();
            assert_eq!(out.shape(), &[5, h, w]);
            assert!(out.all_finite());
        }
    }

    #[test]
    fn seg_rejects_wrong_channels() {
        let net = SegNet::<f64>::init(5, 7, "t/seg");
        let bad = Tensor::zeros(vec![2, 8, 8]);
        assert!(matches!(
            net.logits(&bad),
            Err(Error::ChannelMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_softmax() {
        let mut net = SegNet::<f64>::init(4, 7, "t/seg");
        for p in net.params_mut().into_iter().skip(4) {
            *p = Tensor::zeros(p.shape().to_vec());
        }
        let probs = net.predict(&image(6, 6)).unwrap();
        for &v in probs.tensor().values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn seg_forward_deterministic_under_seed() {
        let a = SegNet::<f64>::init(5, 42, "t/seg");
        let b = SegNet::<f64>::init(5, 42, "t/seg");
        let img = image(8, 8);
        assert_eq!(a.logits(&img).unwrap(), b.logits(&img).unwrap());
    }

    #[test]
    fn disc_shape_8_to_2() {
        // 8 -> 4 -> 2 through the two stride-2 layers.
        let d = Discriminator::<f64>::init(5, 7, "t/disc");
        let p = ProbMap::new(Tensor::filled(vec![5, 8, 8], 0.2)).unwrap();
        let out = d.logits(&p).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
    }

    #[test]
    fn disc_accepts_all_small_sizes() {
        let d = Discriminator::<f64>::init(5, 7, "t/disc");
        for h in 3..=16 {
            for w in [3usize, 7, 12] {
                let p = ProbMap::new(Tensor::filled(vec![5, h, w], 0.2)).unwrap();
                let out = d.logits(&p).unwrap();
                assert_eq!(out.shape()[0], 1);
                assert!(out.all_finite());
            }
        }
    }

    #[test]
    fn disc_zero_final_layer_outputs_half() {
        let mut d = Discriminator::<f64>::init(5, 7, "t/disc");
        for p in d.params_mut().into_iter().skip(4) {
            *p = Tensor::zeros(p.shape().to_vec());
        }
        let p = ProbMap::new(Tensor::filled(vec![5, 8, 8], 0.2)).unwrap();
        let out = d.logits(&p).unwrap();
        for &v in out.values() {
            assert_eq!(v, 0.0); // sigmoid(0) = 0.5
        }
    }

    #[test]
    fn disc_rejects_wrong_channel_count() {
        let d = Discriminator::<f64>::init(5, 7, "t/disc");
        let p = ProbMap::new(Tensor::filled(vec![4, 8, 8], 0.25)).unwrap();
        assert!(matches!(
            d.logits(&p),
            Err(Error::ChannelMismatch { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn fresh_disc_unbiased_on_random_probmaps() {
        // Mean sigmoid over random probability maps stays near 0.5.
        let d = Discriminator::<f64>::init(5, 11, "t/disc");
        let mut rng = named_stream(11, "t/probmaps");
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..32 {
            let mut t = Tensor::zeros(vec![5, 8, 8]);
            for y in 0..8 {
                for x in 0..8 {
                    let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let s: f64 = raw.iter().sum();
                    for (c, v) in raw.iter().enumerate() {
                        let i = t.idx3(c, y, x);
                        t.values_mut()[i] = v / s;
                    }
                }
            }
            let out = d.logits(&ProbMap::new(t).unwrap()).unwrap();
            for &v in out.values() {
                sum += 1.0 / (1.0 + (-v).exp());
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!(mean > 0.35 && mean < 0.65, "init bias: mean sigmoid {mean}");
    }

    #[test]
    fn bundle_roundtrip_bit_identical() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bundle.params");
        let bundle = ModelBundle::new(
            SegNet::<f64>::init(5, 7, "t/seg"),
            vec![
                Discriminator::init(5, 7, "t/d0"),
                Discriminator::init(5, 7, "t/d1"),
            ],
        );
        bundle.save_params(&path).unwrap();
        let back = ModelBundle::<f64>::load_params(&path, 5, 2).unwrap();
        assert_eq!(back.seg, bundle.seg);
        assert_eq!(back.discs, bundle.discs);
    }

    #[test]
    fn bundle_load_rejects_wrong_class_count() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bundle.params");
        let bundle = ModelBundle::new(SegNet::<f64>::init(5, 7, "t/seg"), vec![]);
        bundle.save_params(&path).unwrap();
        match ModelBundle::<f64>::load_params(&path, 6, 0) {
            Err(Error::ConfigHashMismatch { file, expected }) => {
                assert_eq!(file, config_hash(5, 0));
                assert_eq!(expected, config_hash(6, 0));
            }
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }
}
