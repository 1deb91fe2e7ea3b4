//! The learnable components: semantic encoder, condition encoder and the
//! U-Net denoiser that exposes its first decoder layers as attention taps.
//!
//! Everything is built on [`Graph`], so the same code serves inference
//! (`f32`, no backward pass), training and `f64` gradient verification.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::ImageGrid;
use crate::tensor::{Real, Tensor};

/// Number of supervised attention taps.
pub const SUPERVISED_TAPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiseaseState {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "MCI")]
    Mci,
    #[serde(rename = "AD")]
    Ad,
}

impl DiseaseState {
    pub const ALL: [DiseaseState; 3] = [DiseaseState::Cn, DiseaseState::Mci, DiseaseState::Ad];

    pub fn index(self) -> usize {
        match self {
            DiseaseState::Cn => 0,
            DiseaseState::Mci => 1,
            DiseaseState::Ad => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DiseaseState::Cn => "CN",
            DiseaseState::Mci => "MCI",
            DiseaseState::Ad => "AD",
        }
    }
}

impl std::str::FromStr for DiseaseState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CN" => Ok(DiseaseState::Cn),
            "MCI" => Ok(DiseaseState::Mci),
            "AD" => Ok(DiseaseState::Ad),
            _ => Err(Error::InvalidArgument(format!("unknown disease state '{s}'"))),
        }
    }
}

impl std::fmt::Display for DiseaseState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One-hot target age bin and disease state.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressionAttributes {
    pub age_bin: Vec<f32>,
    pub disease_state: Vec<f32>,
}

impl ProgressionAttributes {
    pub fn new(bin: usize, bins: usize, disease: DiseaseState) -> Result<Self> {
        if bin >= bins {
            return Err(Error::InvalidArgument(format!("age bin {bin} outside 0..{bins}")));
        }
        let mut age_bin = vec![0.0; bins];
        age_bin[bin] = 1.0;
        let mut disease_state = vec![0.0; 3];
        disease_state[disease.index()] = 1.0;
        Ok(Self { age_bin, disease_state })
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        let one_hot = |v: &[f32]| {
            v.iter().filter(|&&x| x == 1.0).count() == 1 && v.iter().all(|&x| x == 0.0 || x == 1.0)
        };
        if self.age_bin.len() != bins || self.disease_state.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "attribute widths {}+{} (expected {bins}+3)",
                self.age_bin.len(),
                self.disease_state.len()
            )));
        }
        if !one_hot(&self.age_bin) || !one_hot(&self.disease_state) {
            return Err(Error::InvalidArgument("attributes are not one-hot".into()));
        }
        Ok(())
    }

    pub fn concat(&self) -> Vec<f32> {
        self.age_bin.iter().chain(&self.disease_state).copied().collect()
    }
}

/// Semantic latent `z ∈ ℝ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub values: Vec<f32>,
}

/// Condition vector `z′ ∈ ℝ^{d′}` with `d′ < d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub values: Vec<f32>,
}

/// A decoder feature map exposed for cross-attention.
///
/// `features` is stored channel-major (`d_k × s`, the layout the U-Net
/// produces); `attention` is `d′ × s` once filled by the alignment module.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTap {
    pub layer_index: usize,
    pub h: usize,
    pub w: usize,
    pub d_k: usize,
    pub features: Vec<f32>,
    pub attention: Option<Vec<f32>>,
}

impl AttentionTap {
    pub fn s(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub d: usize,
    pub d_prime: usize,
    pub age_bins: usize,
    pub taps: usize,
    pub norm_groups: usize,
    pub time_embed_dim: usize,
    pub cond_hidden: usize,
    /// Decoder layer used for unsupervised attention analysis.
    pub analysis_layer: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            levels: 3,
            d: 128,
            d_prime: 16,
            age_bins: 8,
            taps: SUPERVISED_TAPS,
            norm_groups: 8,
            time_embed_dim: 64,
            cond_hidden: 64,
            analysis_layer: SUPERVISED_TAPS,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.taps != SUPERVISED_TAPS {
            return bad(format!("taps must be {SUPERVISED_TAPS}, got {}", self.taps));
        }
        if self.levels < SUPERVISED_TAPS {
            return bad(format!("levels must be at least {SUPERVISED_TAPS}"));
        }
        if self.image_size == 0 || self.image_size % (1 << (self.levels - 1)) != 0 {
            return bad(format!("image_size {} not divisible by 2^(levels-1)", self.image_size));
        }
        if self.d_prime < 2 || self.d_prime >= self.d {
            return bad(format!("need 2 <= d_prime < d, got d_prime={} d={}", self.d_prime, self.d));
        }
        if self.age_bins == 0 || self.base_channels == 0 || self.cond_hidden == 0 {
            return bad("widths must be positive".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be a positive even number".into());
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return bad("base_channels must be divisible by norm_groups".into());
        }
        if self.analysis_layer >= self.decoder_layers() {
            return bad(format!(
                "analysis_layer {} outside 0..{}",
                self.analysis_layer,
                self.decoder_layers()
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Decoder layers that expose features: one per level on the upsampling
    /// path plus a final full-resolution layer.
    pub fn decoder_layers(&self) -> usize {
        self.levels + 1
    }

    /// `(channels, h, w)` of decoder layer `l` (0 = deepest).
    pub fn decoder_layer_shape(&self, l: usize) -> (usize, usize, usize) {
        if l < self.levels {
            let level = self.levels - 1 - l;
            let side = self.image_size >> level;
            (self.channels(level), side, side)
        } else {
            (self.base_channels, self.image_size, self.image_size)
        }
    }

    pub fn tap_shapes(&self) -> Vec<(usize, usize)> {
        (0..SUPERVISED_TAPS).map(|l| {
            let (_, h, w) = self.decoder_layer_shape(l);
            (h, w)
        }).collect()
    }

    pub fn attr_dim(&self) -> usize {
        self.age_bins + 3
    }
}

/// Named parameter arrays plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub config: ArchConfig,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParameters<T> {
    pub fn from_entries(config: ArchConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut out = Self { config, names: Vec::new(), values: Vec::new(), index: HashMap::new() };
        for (name, t) in entries {
            if out.index.contains_key(&name) {
                return Err(Error::InvalidArgument(format!("duplicate parameter '{name}'")));
            }
            out.index.insert(name.clone(), out.names.len());
            out.names.push(name);
            out.values.push(t);
        }
        let reference: ModelParameters<T> = init_parameters(&out.config, 0)?;
        if reference.names != out.names {
            return Err(Error::ShapeMismatch("parameter set does not match architecture".into()));
        }
        for (a, b) in reference.values.iter().zip(&out.values) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch("parameter shapes do not match architecture".into()));
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("no parameter named '{name}'"))
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.values[self.index_of(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index_of(name);
        &mut self.values[i]
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

enum Init {
    FanIn,
    Zeros,
    Ones,
}

struct Builder<T> {
    entries: Vec<(String, Tensor<T>, Init)>,
}

impl<T: Real> Builder<T> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.entries.push((name, Tensor::zeros(shape), init));
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.add(format!("{name}.w"), vec![cout, cin, k, k], Init::FanIn);
        self.add(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) {
        self.add(format!("{name}.w"), vec![fout, fin], Init::FanIn);
        self.add(format!("{name}.b"), vec![fout], Init::Zeros);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.g"), vec![c], Init::Ones);
        self.add(format!("{name}.b"), vec![c], Init::Zeros);
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, emb: Option<usize>) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cin, cout, 3);
        self.norm(&format!("{name}.norm2"), cout);
        if let Some(e) = emb {
            self.linear(&format!("{name}.emb"), e, 2 * cout);
        }
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1);
        }
    }
}

/// Builds the full parameter set with fan-in scaled uniform weights, zero
/// biases and a zero output layer for the denoiser (its first prediction is
/// the zero image).
pub fn init_parameters<T: Real>(config: &ArchConfig, seed: u64) -> Result<ModelParameters<T>> {
    config.validate()?;
    let c = config;
    let mut b = Builder { entries: Vec::new() };

    // Semantic encoder: the downsampling half of the U-Net without time input.
    b.conv("enc.conv_in", 1, c.base_channels, 3);
    let mut prev = c.base_channels;
    for level in 0..c.levels {
        b.res_block(&format!("enc.down{level}"), prev, c.channels(level), None);
        prev = c.channels(level);
    }
    b.norm("enc.out_norm", prev);
    b.linear("enc.fc", prev, c.d);

    b.linear("cond.fc1", c.attr_dim(), c.cond_hidden);
    b.linear("cond.fc2", c.cond_hidden, c.d_prime);

    let emb = c.time_embed_dim + c.d;
    b.linear("unet.time.fc1", c.time_embed_dim, c.time_embed_dim);
    b.linear("unet.time.fc2", c.time_embed_dim, c.time_embed_dim);
    b.conv("unet.conv_in", 1, c.base_channels, 3);
    let mut prev = c.base_channels;
    for level in 0..c.levels {
        b.res_block(&format!("unet.down{level}"), prev, c.channels(level), Some(emb));
        prev = c.channels(level);
    }
    b.res_block("unet.mid", prev, prev, Some(emb));
    for l in 0..c.levels {
        let level = c.levels - 1 - l;
        let skip = c.channels(level);
        b.res_block(&format!("unet.up{l}"), prev + skip, skip, Some(emb));
        prev = skip;
    }
    b.res_block(&format!("unet.up{}", c.levels), prev, c.base_channels, Some(emb));
    b.norm("unet.out_norm", c.base_channels);
    b.add("unet.out.w".into(), vec![1, c.base_channels, 3, 3], Init::Zeros);
    b.add("unet.out.b".into(), vec![1], Init::Zeros);

    for l in 0..c.decoder_layers() {
        let (dk, _, _) = c.decoder_layer_shape(l);
        b.linear(&format!("attn.q{l}"), c.d_prime, c.d_prime * dk);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(b.entries.len());
    for (name, mut t, init) in b.entries {
        match init {
            Init::Zeros => {}
            Init::Ones => t.data.iter_mut().for_each(|v| *v = T::one()),
            Init::FanIn => {
                let fan_in: usize = t.shape[1..].iter().product();
                let bound = (3.0 / fan_in as f64).sqrt();
                t.data.iter_mut().for_each(|v| *v = T::of(rng.gen_range(-bound..bound)));
            }
        }
        entries.push((name, t));
    }
    let mut out = ModelParameters { config: config.clone(), names: Vec::new(), values: Vec::new(), index: HashMap::new() };
    for (name, t) in entries {
        out.index.insert(name.clone(), out.names.len());
        out.names.push(name);
        out.values.push(t);
    }
    Ok(out)
}

/// Sinusoidal embedding of integer timesteps, shape `(N, dim)`.
pub fn timestep_embedding<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let tf = ti as f64;
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push(T::of((tf * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push(T::of((tf * freq).cos()));
        }
    }
    Tensor::new(vec![t.len(), dim], data)
}

/// Graph-building helpers bound to one parameter set.
pub struct Net<'m, T> {
    pub params: &'m ModelParameters<T>,
}

/// Node handles produced by one denoiser pass.
pub struct DenoiserNodes {
    pub x0_hat: NodeId,
    /// Every decoder layer in upsampling order; the first
    /// [`SUPERVISED_TAPS`] are the supervised taps.
    pub decoder_layers: Vec<NodeId>,
}

impl<'m, T: Real> Net<'m, T> {
    pub fn new(params: &'m ModelParameters<T>) -> Self {
        Self { params }
    }

    pub fn graph(&self) -> Graph<'m, T> {
        Graph::new(self.params.values())
    }

    fn p(&self, g: &mut Graph<'m, T>, name: &str) -> NodeId {
        g.param(self.params.index_of(name))
    }

    fn conv(&self, g: &mut Graph<'m, T>, name: &str, x: NodeId) -> NodeId {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        g.conv2d(x, w, b)
    }

    fn linear(&self, g: &mut Graph<'m, T>, name: &str, x: NodeId) -> NodeId {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<'m, T>, name: &str, x: NodeId) -> NodeId {
        let gamma = self.p(g, &format!("{name}.g"));
        let beta = self.p(g, &format!("{name}.b"));
        let c = g.shape(x)[1];
        let groups = self.params.config.norm_groups.min(c);
        g.group_norm(x, gamma, beta, groups)
    }

    fn res_block(&self, g: &mut Graph<'m, T>, name: &str, x: NodeId, emb: Option<NodeId>) -> NodeId {
        let h = self.norm(g, &format!("{name}.norm1"), x);
        let h = g.silu(h);
        let h = self.conv(g, &format!("{name}.conv1"), h);
        let mut h = self.norm(g, &format!("{name}.norm2"), h);
        if let Some(e) = emb {
            let ss = self.linear(g, &format!("{name}.emb"), e);
            h = g.modulate(h, ss);
        }
        let h = g.silu(h);
        let h = self.conv(g, &format!("{name}.conv2"), h);
        let cin = g.shape(x)[1];
        let cout = g.shape(h)[1];
        let skip = if cin != cout { self.conv(g, &format!("{name}.skip"), x) } else { x };
        g.add(h, skip)
    }

    /// `x: (N, 1, H, W)` → `z: (N, d)`.
    pub fn encoder(&self, g: &mut Graph<'m, T>, x: NodeId) -> NodeId {
        let c = &self.params.config;
        let mut h = self.conv(g, "enc.conv_in", x);
        for level in 0..c.levels {
            h = self.res_block(g, &format!("enc.down{level}"), h, None);
            if level + 1 < c.levels {
                h = g.avg_pool2(h);
            }
        }
        let h = self.norm(g, "enc.out_norm", h);
        let h = g.silu(h);
        let pooled = g.global_avg_pool(h);
        self.linear(g, "enc.fc", pooled)
    }

    /// Concatenated one-hots `(N, B+3)` → `z′: (N, d′)`.
    pub fn condition(&self, g: &mut Graph<'m, T>, attrs: NodeId) -> NodeId {
        let h = self.linear(g, "cond.fc1", attrs);
        let h = g.silu(h);
        self.linear(g, "cond.fc2", h)
    }

    pub fn denoiser(&self, g: &mut Graph<'m, T>, x_t: NodeId, t: &[usize], z: NodeId) -> DenoiserNodes {
        let c = &self.params.config;
        let temb = g.input(timestep_embedding(t, c.time_embed_dim));
        let te = self.linear(g, "unet.time.fc1", temb);
        let te = g.silu(te);
        let te = self.linear(g, "unet.time.fc2", te);
        let emb = g.concat(&[te, z]);
        let emb = g.silu(emb);

        let mut h = self.conv(g, "unet.conv_in", x_t);
        let mut skips = Vec::with_capacity(c.levels);
        for level in 0..c.levels {
            h = self.res_block(g, &format!("unet.down{level}"), h, Some(emb));
            skips.push(h);
            if level + 1 < c.levels {
                h = g.avg_pool2(h);
            }
        }
        h = self.res_block(g, "unet.mid", h, Some(emb));
        let mut layers = Vec::with_capacity(c.decoder_layers());
        for l in 0..c.levels {
            let skip = skips[c.levels - 1 - l];
            let cat = g.concat(&[h, skip]);
            h = self.res_block(g, &format!("unet.up{l}"), cat, Some(emb));
            layers.push(h);
            if l + 1 < c.levels {
                h = g.upsample2(h);
            }
        }
        h = self.res_block(g, &format!("unet.up{}", c.levels), h, Some(emb));
        layers.push(h);
        let h = self.norm(g, "unet.out_norm", h);
        let h = g.silu(h);
        let x0_hat = self.conv(g, "unet.out", h);
        DenoiserNodes { x0_hat, decoder_layers: layers }
    }
}

pub(crate) fn image_batch<T: Real>(images: &[&ImageGrid], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.h != size || img.w != size {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, model expects {size}x{size}",
                img.h, img.w
            )));
        }
        data.extend(img.pixels.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(vec![images.len(), 1, size, size], data))
}

pub fn encode_semantic(x_b: &ImageGrid, params: &ModelParameters<f32>) -> Result<LatentVector> {
    if !x_b.clean {
        return Err(Error::InvalidArgument("semantic encoder expects a clean image".into()));
    }
    let net = Net::new(params);
    let mut g = net.graph();
    let x = g.input(image_batch(&[x_b], params.config.image_size)?);
    let z = net.encoder(&mut g, x);
    Ok(LatentVector { values: g.value(z).to_vec() })
}

pub fn encode_condition(attrs: &ProgressionAttributes, params: &ModelParameters<f32>) -> Result<ConditionVector> {
    attrs.validate(params.config.age_bins)?;
    let net = Net::new(params);
    let mut g = net.graph();
    let a = g.input(Tensor::new(vec![1, params.config.attr_dim()], attrs.concat()));
    let z = net.condition(&mut g, a);
    Ok(ConditionVector { values: g.value(z).to_vec() })
}

/// `z_f = z_b + [z′; 0]`: the condition occupies the leading `d′`
/// coordinates, the identity subspace `[d′, d)` is copied unchanged.
pub fn compose_follow_up_latent(z_b: &LatentVector, z_prime: &ConditionVector) -> Result<LatentVector> {
    let (d, dp) = (z_b.values.len(), z_prime.values.len());
    if dp >= d {
        return Err(Error::InvalidArgument(format!("condition width {dp} must be below latent width {d}")));
    }
    let mut values = z_b.values.clone();
    for (v, c) in values.iter_mut().zip(&z_prime.values) {
        *v += c;
    }
    Ok(LatentVector { values })
}

/// One denoiser pass predicting the clean image; returns the three
/// supervised taps with their attention left unfilled.
pub fn denoise(
    x_t: &ImageGrid,
    t: usize,
    z: &LatentVector,
    steps: usize,
    params: &ModelParameters<f32>,
) -> Result<(ImageGrid, Vec<AttentionTap>)> {
    let (x0, layers) = denoise_layers(x_t, t, z, steps, params)?;
    Ok((x0, layers.into_iter().take(SUPERVISED_TAPS).collect()))
}

/// Like [`denoise`] but exposes every decoder layer (including the
/// analysis layer).
pub fn denoise_layers(
    x_t: &ImageGrid,
    t: usize,
    z: &LatentVector,
    steps: usize,
    params: &ModelParameters<f32>,
) -> Result<(ImageGrid, Vec<AttentionTap>)> {
    let c = &params.config;
    if t < 1 || t > steps {
        return Err(Error::InvalidArgument(format!("t = {t} outside [1, {steps}]")));
    }
    if z.values.len() != c.d {
        return Err(Error::ShapeMismatch(format!("latent has {} values, model expects {}", z.values.len(), c.d)));
    }
    let net = Net::new(params);
    let mut g = net.graph();
    let x = g.input(image_batch(&[x_t], c.image_size)?);
    let zn = g.input(Tensor::new(vec![1, c.d], z.values.clone()));
    let out = net.denoiser(&mut g, x, &[t], zn);
    let pixels = g.value(out.x0_hat).to_vec();
    let x0 = ImageGrid { h: c.image_size, w: c.image_size, clean: pixels.iter().all(|v| (0.0..=1.0).contains(v)), pixels };
    let taps = out
        .decoder_layers
        .iter()
        .enumerate()
        .map(|(l, &node)| {
            let s = g.shape(node);
            AttentionTap { layer_index: l, d_k: s[1], h: s[2], w: s[3], features: g.value(node).to_vec(), attention: None }
        })
        .collect();
    Ok((x0, taps))
}
