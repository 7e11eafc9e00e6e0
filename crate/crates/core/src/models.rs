//! Content and style networks.
//!
//! The content path is a backbone `f` (two stride-2 3×3 convolutions and a
//! two-layer MLP) followed by a projection head `φ`. The style encoder `g`
//! runs in parallel on the same input and shares no parameters with the
//! content path. Prototypes are `K` vectors in the backbone's latent space.
//!
//! Parameters are plain tensors owned by [`ModelBundle`]. A forward pass
//! binds them onto a [`Tape`] with [`ModelBundle::bind`]; after
//! `tape.backward` the gradients are copied back with
//! [`ModelBundle::collect_grads`].

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from, stream};
use crate::tensor::{io as cdt1, Scalar, Tape, Tensor, Var};

/// Architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub image_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
    /// Latent size of `h = f(x)`.
    pub latent: usize,
    /// Output size shared by the projection head and the style encoder.
    pub embed: usize,
    pub style_conv1_channels: usize,
    pub style_conv2_channels: usize,
    pub num_seen: usize,
    pub num_novel: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            image_size: 16,
            conv1_channels: 8,
            conv2_channels: 16,
            hidden: 128,
            latent: 64,
            embed: 32,
            style_conv1_channels: 4,
            style_conv2_channels: 8,
            num_seen: 5,
            num_novel: 5,
        }
    }
}

impl ModelDims {
    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_novel
    }

    pub fn input_len(&self) -> usize {
        self.image_size * self.image_size
    }

    fn conv_out(size: usize) -> usize {
        (size + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1
    }

    fn flat_len(&self, channels: usize) -> usize {
        let s = Self::conv_out(Self::conv_out(self.image_size));
        s * s * channels
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.conv1_channels,
            self.conv2_channels,
            self.hidden,
            self.latent,
            self.embed,
            self.style_conv1_channels,
            self.style_conv2_channels,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if self.num_seen == 0 || self.num_novel == 0 {
            return Err(Error::Config("need at least one seen and one novel class".into()));
        }
        Ok(())
    }
}

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Fan-in scaled uniform weights, zero biases, Gaussian prototype
    /// directions normalized to unit length.
    FanIn,
    /// Every parameter zero (prototypes excepted, which stay random).
    Zeros,
}

/// How parameters are drawn. Identical specs give bit-identical bundles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub seed: u64,
    pub scheme: InitScheme,
}

impl InitSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed, scheme: InitScheme::FanIn }
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, dims: &[usize], bound: f64, scheme: InitScheme) -> Tensor<T> {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(dims),
        InitScheme::FanIn => Tensor::from_fn(dims, |_| T::of(rng.gen_range(-bound..bound))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64, scheme: InitScheme) -> Self {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        Self {
            weight: uniform(rng, &[fan_in, fan_out], bound, scheme),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn bind(&self, tape: &mut Tape<T>) -> BoundLinear {
        BoundLinear { weight: tape.leaf(self.weight.clone()), bias: tape.leaf(self.bias.clone()) }
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

/// A 3×3, stride-2, pad-1 convolution over NHWC activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T: Scalar> {
    /// `[3 * 3 * in_channels, out_channels]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, scheme: InitScheme) -> Self {
        let fan_in = CONV_KERNEL * CONV_KERNEL * cin;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: uniform(rng, &[fan_in, cout], bound, scheme),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn bind(&self, tape: &mut Tape<T>) -> BoundLinear {
        BoundLinear { weight: tape.leaf(self.weight.clone()), bias: tape.leaf(self.bias.clone()) }
    }

    fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl BoundLinear {
    fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row_vector(y, self.bias)
    }

    /// NHWC `[B, H, W, C]` to NHWC `[B, H', W', C']`.
    fn conv<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let [b, h, w, _] = *tape.dims(x) else {
            return Err(Error::Shape(format!("conv input {:?}", tape.dims(x))));
        };
        let cols = tape.im2col(x, CONV_KERNEL, CONV_STRIDE, CONV_PAD)?;
        let y = self.linear(tape, cols)?;
        let cout = tape.dims(y)[1];
        let (oh, ow) = (ModelDims::conv_out(h), ModelDims::conv_out(w));
        tape.reshape(y, &[b, oh, ow, cout])
    }
}

/// Backbone `f`: conv → relu → conv → relu → flatten → linear → relu → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Projection head `φ`: linear → relu → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Style encoder `g`: conv → relu → conv → relu → flatten → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEncoder<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub fc: Linear<T>,
}

/// All trainable parameters of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Scalar = f32> {
    pub dims: ModelDims,
    pub backbone: Backbone<T>,
    pub projection: Projection<T>,
    /// `None` builds the plain baseline with no style branch at all.
    pub style_encoder: Option<StyleEncoder<T>>,
    /// `[K, latent]`
    pub prototypes: Tensor<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Draws every component from its own seed-derived stream, so the
    /// content path is identical whether or not a style encoder exists.
    pub fn new(dims: ModelDims, init: InitSpec, with_style: bool) -> Result<Self> {
        dims.validate()?;
        let s = init.scheme;
        let mut rng = rng_from(&[init.seed, stream::BACKBONE]);
        let backbone = Backbone {
            conv1: Conv2d::init(&mut rng, 1, dims.conv1_channels, s),
            conv2: Conv2d::init(&mut rng, dims.conv1_channels, dims.conv2_channels, s),
            fc1: Linear::init(&mut rng, dims.flat_len(dims.conv2_channels), dims.hidden, 2f64.sqrt(), s),
            fc2: Linear::init(&mut rng, dims.hidden, dims.latent, 1.0, s),
        };
        let mut rng = rng_from(&[init.seed, stream::PROJECTION]);
        let projection = Projection {
            fc1: Linear::init(&mut rng, dims.latent, dims.latent, 2f64.sqrt(), s),
            fc2: Linear::init(&mut rng, dims.latent, dims.embed, 1.0, s),
        };
        let style_encoder = with_style.then(|| {
            let mut rng = rng_from(&[init.seed, stream::STYLE]);
            StyleEncoder {
                conv1: Conv2d::init(&mut rng, 1, dims.style_conv1_channels, s),
                conv2: Conv2d::init(&mut rng, dims.style_conv1_channels, dims.style_conv2_channels, s),
                fc: Linear::init(&mut rng, dims.flat_len(dims.style_conv2_channels), dims.embed, 1.0, s),
            }
        });
        let mut rng = rng_from(&[init.seed, stream::PROTOTYPES]);
        let prototypes = random_directions(&mut rng, dims.num_classes(), dims.latent);
        Ok(Self { dims, backbone, projection, style_encoder, prototypes })
    }

    /// Parameters in a fixed order, with dotted names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let b = &self.backbone;
        for (layer, ps) in [
            ("backbone.conv1", b.conv1.params()),
            ("backbone.conv2", b.conv2.params()),
            ("backbone.fc1", b.fc1.params()),
            ("backbone.fc2", b.fc2.params()),
            ("projection.fc1", self.projection.fc1.params()),
            ("projection.fc2", self.projection.fc2.params()),
        ] {
            out.push((format!("{layer}.weight"), ps[0]));
            out.push((format!("{layer}.bias"), ps[1]));
        }
        if let Some(g) = &self.style_encoder {
            for (layer, ps) in [("style.conv1", g.conv1.params()), ("style.conv2", g.conv2.params()), ("style.fc", g.fc.params())] {
                out.push((format!("{layer}.weight"), ps[0]));
                out.push((format!("{layer}.bias"), ps[1]));
            }
        }
        out.push(("prototypes".into(), &self.prototypes));
        out
    }

    /// Same order as [`ModelBundle::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        let b = &mut self.backbone;
        out.extend(b.conv1.params_mut());
        out.extend(b.conv2.params_mut());
        out.extend(b.fc1.params_mut());
        out.extend(b.fc2.params_mut());
        out.extend(self.projection.fc1.params_mut());
        out.extend(self.projection.fc2.params_mut());
        if let Some(g) = &mut self.style_encoder {
            out.extend(g.conv1.params_mut());
            out.extend(g.conv2.params_mut());
            out.extend(g.fc.params_mut());
        }
        out.push(&mut self.prototypes);
        out
    }

    pub fn style_params(&self) -> Vec<&Tensor<T>> {
        self.style_encoder
            .as_ref()
            .map(|g| [g.conv1.params(), g.conv2.params(), g.fc.params()].concat())
            .unwrap_or_default()
    }

    /// Marks content-path parameters and prototypes trainable, and the
    /// style encoder trainable only when `train_style` is set.
    pub fn set_trainable(&mut self, train_style: bool) {
        let has_style = self.style_encoder.is_some();
        let mut params = self.params_mut();
        let n = params.len();
        let style_range = if has_style { n - 7..n - 1 } else { 0..0 };
        for (i, p) in params.iter_mut().enumerate() {
            p.set_requires_grad(!style_range.contains(&i) || train_style);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundBundle {
        let b = &self.backbone;
        BoundBundle {
            dims: self.dims,
            conv1: b.conv1.bind(tape),
            conv2: b.conv2.bind(tape),
            fc1: b.fc1.bind(tape),
            fc2: b.fc2.bind(tape),
            proj1: self.projection.fc1.bind(tape),
            proj2: self.projection.fc2.bind(tape),
            style: self.style_encoder.as_ref().map(|g| BoundStyle {
                conv1: g.conv1.bind(tape),
                conv2: g.conv2.bind(tape),
                fc: g.fc.bind(tape),
            }),
            prototypes: tape.leaf(self.prototypes.clone()),
        }
    }

    /// Adds the tape gradients of every bound parameter into its buffer.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &BoundBundle) -> Result<()> {
        for (p, v) in self.params_mut().into_iter().zip(bound.vars()) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            dims: self.dims,
            backbone: Backbone {
                conv1: self.backbone.conv1.cast(),
                conv2: self.backbone.conv2.cast(),
                fc1: self.backbone.fc1.cast(),
                fc2: self.backbone.fc2.cast(),
            },
            projection: Projection { fc1: self.projection.fc1.cast(), fc2: self.projection.fc2.cast() },
            style_encoder: self.style_encoder.as_ref().map(|g| StyleEncoder {
                conv1: g.conv1.cast(),
                conv2: g.conv2.cast(),
                fc: g.fc.cast(),
            }),
            prototypes: self.prototypes.cast(),
        }
    }

    /// Forward pass without gradient tracking: `(h, z, v)` for a batch
    /// `[B, H*W]`. `v` is `None` without a style encoder.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let frozen = self.frozen();
        let bound = frozen.bind(&mut tape);
        let xv = tape.constant(x.detached());
        let (h, z) = bound.forward_content(&mut tape, xv)?;
        let v = match bound.style {
            Some(_) => {
                let v = bound.forward_style(&mut tape, xv)?;
                Some(tape.value(v).detached())
            }
            None => None,
        };
        Ok((tape.value(h).detached(), tape.value(z).detached(), v))
    }

    fn frozen(&self) -> Self {
        let mut copy = self.clone();
        for p in copy.params_mut() {
            p.set_requires_grad(false);
            p.clear_grad();
        }
        copy
    }
}

fn random_directions<T: Scalar>(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.extend(row.iter().map(|v| T::of(v / norm)));
    }
    Tensor::from_parts_unchecked(vec![k, d], data)
}

#[derive(Clone, Copy, Debug)]
struct BoundStyle {
    conv1: BoundLinear,
    conv2: BoundLinear,
    fc: BoundLinear,
}

/// Tape handles for every parameter of a [`ModelBundle`].
#[derive(Clone, Copy, Debug)]
pub struct BoundBundle {
    dims: ModelDims,
    conv1: BoundLinear,
    conv2: BoundLinear,
    fc1: BoundLinear,
    fc2: BoundLinear,
    proj1: BoundLinear,
    proj2: BoundLinear,
    style: Option<BoundStyle>,
    pub prototypes: Var,
}

impl BoundBundle {
    /// Same order as [`ModelBundle::named_params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in [self.conv1, self.conv2, self.fc1, self.fc2, self.proj1, self.proj2] {
            out.extend(l.vars());
        }
        if let Some(s) = &self.style {
            for l in [s.conv1, s.conv2, s.fc] {
                out.extend(l.vars());
            }
        }
        out.push(self.prototypes);
        out
    }

    pub fn has_style(&self) -> bool {
        self.style.is_some()
    }

    fn as_image<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = self.dims.image_size;
        match *tape.dims(x) {
            [b, n] if n == s * s => tape.reshape(x, &[b, s, s, 1]),
            [_, h, w, 1] if h == s && w == s => Ok(x),
            ref d => Err(Error::Shape(format!("input {d:?} does not match {s}x{s} images"))),
        }
    }

    /// `h = f(x)` and `z = φ(h)`.
    pub fn forward_content<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let img = self.as_image(tape, x)?;
        let batch = tape.dims(img)[0];
        let a = self.conv1.conv(tape, img)?;
        let a = tape.relu(a)?;
        let a = self.conv2.conv(tape, a)?;
        let a = tape.relu(a)?;
        let flat = tape.value(a).numel() / batch;
        let a = tape.reshape(a, &[batch, flat])?;
        let a = self.fc1.linear(tape, a)?;
        let a = tape.relu(a)?;
        let h = self.fc2.linear(tape, a)?;
        let p = self.proj1.linear(tape, h)?;
        let p = tape.relu(p)?;
        let z = self.proj2.linear(tape, p)?;
        Ok((h, z))
    }

    /// `v = g(x)`; touches no content-path parameter.
    pub fn forward_style<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let style = self
            .style
            .ok_or_else(|| Error::Config("model has no style encoder".into()))?;
        let img = self.as_image(tape, x)?;
        let batch = tape.dims(img)[0];
        let a = style.conv1.conv(tape, img)?;
        let a = tape.relu(a)?;
        let a = style.conv2.conv(tape, a)?;
        let a = tape.relu(a)?;
        let flat = tape.value(a).numel() / batch;
        let a = tape.reshape(a, &[batch, flat])?;
        style.fc.linear(tape, a)
    }
}

/// Cosine similarities between rows of `h` `[B, d]` and prototypes `[K, d]`.
pub fn prototype_cosines<T: Scalar>(tape: &mut Tape<T>, h: Var, prototypes: Var) -> Result<Var> {
    let hn = tape.normalize_rows(h)?;
    let cn = tape.normalize_rows(prototypes)?;
    let ct = tape.transpose(cn)?;
    tape.matmul(hn, ct)
}

/// `p_i^(k) = softmax_k(ĥ_i · ĉ_k / τ)` with L2-normalized rows.
pub fn soft_labels<T: Scalar>(tape: &mut Tape<T>, h: Var, prototypes: Var, temperature: T) -> Result<Var> {
    let cos = prototype_cosines(tape, h, prototypes)?;
    tape.softmax(cos, temperature)
}

/// Teacher distribution: the student formula at `τ_t`, evaluated on
/// detached copies so no gradient reaches `h` or the prototypes.
pub fn teacher_soft_labels<T: Scalar>(h: &Tensor<T>, prototypes: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.detached());
    let cv = tape.constant(prototypes.detached());
    let p = soft_labels(&mut tape, hv, cv, temperature)?;
    Ok(tape.value(p).detached())
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dims: ModelDims,
    with_style: bool,
    params: Vec<ManifestEntry>,
    hyperparameters: serde_json::Value,
}

impl ModelBundle<f32> {
    /// Writes one CDT1 file per parameter plus `manifest.json`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, hyperparameters: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut params = Vec::new();
        for (name, t) in self.named_params() {
            let file = format!("{name}.cdt1");
            cdt1::write(dir.join(&file), t)?;
            params.push(ManifestEntry { name, shape: t.dims().to_vec(), file });
        }
        let manifest = Manifest {
            dims: self.dims,
            with_style: self.style_encoder.is_some(),
            params,
            hyperparameters,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut bundle = Self::new(manifest.dims, InitSpec { seed: 0, scheme: InitScheme::Zeros }, manifest.with_style)?;
        let names: Vec<String> = bundle.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != manifest.params.len() {
            return Err(Error::Format("checkpoint parameter count mismatch".into()));
        }
        for ((slot, name), entry) in bundle.params_mut().into_iter().zip(&names).zip(&manifest.params) {
            if &entry.name != name {
                return Err(Error::Format(format!("expected parameter {name}, found {}", entry.name)));
            }
            let t = cdt1::read(dir.join(&entry.file))?;
            if t.dims() != slot.dims() {
                return Err(Error::Format(format!("{name}: shape {:?} vs {:?}", t.dims(), slot.dims())));
            }
            *slot = t;
        }
        Ok(bundle)
    }
}
