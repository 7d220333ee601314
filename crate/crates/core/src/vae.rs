//! Encoder/decoder/classifier backbone over a partitioned Gaussian latent.

use std::ops::{Index, Range};

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{argument, config, Error, Result};
use crate::forge::ImageShape;
use crate::tape::{sigmoid, ConvGeom, Graph, Mat, ParamId, Var};

/// Sizes of the three latent slices, laid out as `z = [z_p | z_nk | z_nu]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentPartition {
    pub dim_p: usize,
    pub dim_nk: usize,
    pub dim_nu: usize,
}

impl Default for LatentPartition {
    fn default() -> Self {
        Self {
            dim_p: 10,
            dim_nk: 2,
            dim_nu: 4,
        }
    }
}

impl LatentPartition {
    pub fn new(dim_p: usize, dim_nk: usize, dim_nu: usize) -> Result<Self> {
        let p = Self {
            dim_p,
            dim_nk,
            dim_nu,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_p == 0 || self.dim_nk == 0 || self.dim_nu == 0 {
            return Err(config(format!("latent slices must be non-empty, got {self:?}")));
        }
        Ok(())
    }

    pub fn d_z(&self) -> usize {
        self.dim_p + self.dim_nk + self.dim_nu
    }

    /// Width of the nuisance slice `z_n = [z_nk | z_nu]`.
    pub fn dim_n(&self) -> usize {
        self.dim_nk + self.dim_nu
    }

    pub fn p_range(&self) -> Range<usize> {
        0..self.dim_p
    }

    pub fn nk_range(&self) -> Range<usize> {
        self.dim_p..self.dim_p + self.dim_nk
    }

    pub fn nu_range(&self) -> Range<usize> {
        self.dim_p + self.dim_nk..self.d_z()
    }

    pub fn n_range(&self) -> Range<usize> {
        self.dim_p..self.d_z()
    }
}

/// Posterior of a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub partition: LatentPartition,
}

impl GaussianCode {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>, partition: LatentPartition) -> Result<Self> {
        if mu.len() != partition.d_z() || log_var.len() != partition.d_z() {
            return Err(argument(format!(
                "code length {}/{} does not match d_z = {}",
                mu.len(),
                log_var.len(),
                partition.d_z()
            )));
        }
        if mu.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in Gaussian code".into()));
        }
        Ok(Self {
            mu,
            log_var,
            partition,
        })
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Posteriors of a batch: `mu` and `log_var` are `[B, d_z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBatch {
    pub mu: Mat,
    pub log_var: Mat,
    pub partition: LatentPartition,
}

impl CodeBatch {
    pub fn new(mu: Mat, log_var: Mat, partition: LatentPartition) -> Result<Self> {
        if mu.dim() != log_var.dim() || mu.ncols() != partition.d_z() {
            return Err(argument(format!(
                "code batch shapes {:?}/{:?} do not match d_z = {}",
                mu.dim(),
                log_var.dim(),
                partition.d_z()
            )));
        }
        if mu.iter().chain(log_var.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in code batch".into()));
        }
        Ok(Self {
            mu,
            log_var,
            partition,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn row(&self, i: usize) -> GaussianCode {
        GaussianCode {
            mu: self.mu.row(i).to_vec(),
            log_var: self.log_var.row(i).to_vec(),
            partition: self.partition,
        }
    }

    pub fn mu_p(&self) -> Mat {
        self.mu.slice(s![.., self.partition.p_range()]).to_owned()
    }
}

/// `z = μ + exp(½ log_var) ⊙ ε` with `ε ~ N(0, I)`.
pub fn reparameterize<R: Rng>(code: &CodeBatch, rng: &mut R) -> Mat {
    let eps = standard_normal(code.mu.dim(), rng);
    reparameterize_with(&code.mu, &code.log_var, &eps)
}

pub fn reparameterize_with(mu: &Mat, log_var: &Mat, eps: &Mat) -> Mat {
    let mut z = log_var.mapv(|lv| (0.5 * lv).exp());
    z *= eps;
    z += mu;
    z
}

pub fn standard_normal<R: Rng>(dim: (usize, usize), rng: &mut R) -> Mat {
    Array2::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// Graph form of [`reparameterize_with`]; gradients reach `mu` and `log_var`.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, log_var: Var, eps: &Mat) -> Var {
    let half = g.scale(log_var, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(sigma, e);
    g.add(mu, noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Classifier,
    Projection,
}

impl ParamGroup {
    /// Everything except the classifier head.
    pub const GENERATIVE: [ParamGroup; 3] =
        [ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Projection];
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::Classifier,
        ParamGroup::Projection,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
}

/// Named parameter arrays, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Snapshot of the values in one group, for bit-identity checks.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<Mat> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageShape,
    pub partition: LatentPartition,
    pub num_classes: usize,
    /// Output channels of the stride-2 3×3 conv blocks.
    pub conv_channels: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    /// `log_var` is clamped to `[-bound, bound]`.
    pub log_var_bound: f64,
    /// Subtract each image's per-channel mean before the conv stack.
    pub center_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::new(3, 28, 28),
            partition: LatentPartition::default(),
            num_classes: 10,
            conv_channels: vec![64, 64, 128, 128],
            encoder_hidden: vec![256],
            decoder_hidden: vec![256, 512],
            classifier_hidden: vec![64],
            projection_hidden: 64,
            projection_dim: 32,
            log_var_bound: 10.0,
            center_input: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.image.is_empty() {
            return Err(config("image shape must be non-empty"));
        }
        if self.num_classes < 2 {
            return Err(config("need at least 2 classes"));
        }
        let widths = self
            .conv_channels
            .iter()
            .chain(&self.encoder_hidden)
            .chain(&self.decoder_hidden)
            .chain(&self.classifier_hidden);
        if widths.copied().any(|w| w == 0) || self.projection_hidden == 0 || self.projection_dim == 0 {
            return Err(config("layer widths must be positive"));
        }
        if !(self.log_var_bound > 0.0 && self.log_var_bound.is_finite()) {
            return Err(config("log_var_bound must be positive and finite"));
        }
        Ok(())
    }

    fn conv_geoms(&self) -> Vec<ConvGeom> {
        let mut out = Vec::new();
        let (mut c, mut h, mut w) = (self.image.channels, self.image.height, self.image.width);
        for &oc in &self.conv_channels {
            let geom = ConvGeom {
                in_channels: c,
                out_channels: oc,
                height: h,
                width: w,
                kernel: 3,
                stride: 2,
                padding: 1,
            };
            c = oc;
            h = geom.out_height();
            w = geom.out_width();
            out.push(geom);
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Conv {
    geom: ConvGeom,
    w: ParamId,
    b: ParamId,
}

/// Parameter binding of every model array into one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    config: ModelConfig,
    params: ParamStore,
    conv: Vec<Conv>,
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
    classifier: Vec<Dense>,
    projection: Vec<Dense>,
}

struct Builder<'a> {
    store: ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    /// Uniform fan-in initialization; `gain` 6 for ReLU layers, 3 for linear outputs.
    fn array(&mut self, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Mat {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let limit = (gain / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
            }
            None => Mat::zeros((rows, cols)),
        }
    }

    fn dense(&mut self, name: &str, group: ParamGroup, inp: usize, out: usize, relu: bool) -> Dense {
        let gain = if relu { 6.0 } else { 3.0 };
        let w = self.array(inp, out, inp, gain);
        let w = self.store.add(format!("{name}.weight"), group, w);
        let b = self.store.add(format!("{name}.bias"), group, Mat::zeros((1, out)));
        Dense { w, b }
    }

    fn mlp(&mut self, name: &str, group: ParamGroup, inp: usize, hidden: &[usize], out: usize) -> Vec<Dense> {
        let mut layers = Vec::new();
        let mut width = inp;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(self.dense(&format!("{name}.{i}"), group, width, h, true));
            width = h;
        }
        layers.push(self.dense(&format!("{name}.out"), group, width, out, false));
        layers
    }
}

impl Vae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Some(&mut rng))
    }

    /// Rebuilds a model around previously saved parameters. Names, groups and
    /// shapes must match the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::build(config, None)?;
        if params.len() != model.params.len() {
            return Err(config_mismatch(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.entries.iter().zip(&params.entries) {
            if want.name != got.name || want.group != got.group || want.value.dim() != got.value.dim() {
                return Err(config_mismatch(format!(
                    "parameter {} {:?} does not match saved {} {:?}",
                    want.name,
                    want.value.dim(),
                    got.name,
                    got.value.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    fn build(config: ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let geoms = config.conv_geoms();
        if let Some(last) = geoms.last() {
            if last.out_height() == 0 || last.out_width() == 0 {
                return Err(crate::error::config("image too small for conv stack"));
            }
        }
        let mut b = Builder {
            store: ParamStore::default(),
            rng,
        };
        let mut conv = Vec::new();
        for (i, geom) in geoms.iter().enumerate() {
            let fan_in = geom.in_channels * geom.kernel * geom.kernel;
            let w = b.array(geom.out_channels, fan_in, fan_in, 6.0);
            let w = b.store.add(format!("encoder.conv{i}.weight"), ParamGroup::Encoder, w);
            let bias = b
                .store
                .add(format!("encoder.conv{i}.bias"), ParamGroup::Encoder, Mat::zeros((1, geom.out_channels)));
            conv.push(Conv {
                geom: *geom,
                w,
                b: bias,
            });
        }
        let flat = geoms.last().map_or(config.image.len(), |g| g.out_len());
        let d_z = config.partition.d_z();
        let encoder = b.mlp("encoder.fc", ParamGroup::Encoder, flat, &config.encoder_hidden, 2 * d_z);
        let decoder = b.mlp("decoder", ParamGroup::Decoder, d_z, &config.decoder_hidden, config.image.len());
        let classifier = b.mlp(
            "classifier",
            ParamGroup::Classifier,
            config.partition.dim_p,
            &config.classifier_hidden,
            config.num_classes,
        );
        let projection = b.mlp(
            "projection",
            ParamGroup::Projection,
            config.partition.dim_p,
            &[config.projection_hidden],
            config.projection_dim,
        );
        Ok(Self {
            config,
            params: b.store,
            conv,
            encoder,
            decoder,
            classifier,
            projection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn partition(&self) -> LatentPartition {
        self.config.partition
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Binds every parameter into `g`; arrays outside `trainable` enter as
    /// constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: &[ParamGroup]) -> Bound {
        let vars = self
            .params
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if trainable.contains(&e.group) {
                    g.param(ParamId(i), e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn run_mlp(g: &mut Graph, b: &Bound, layers: &[Dense], mut h: Var) -> Var {
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let m = g.matmul(h, b[layer.w]);
            h = g.add_bias(m, b[layer.b]);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }

    /// Returns `(mu, log_var)`, each `[B, d_z]`.
    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> (Var, Var) {
        let mut h = x;
        if self.config.center_input {
            let c = g.constant(self.centering_matrix());
            h = g.matmul(x, c);
        }
        for c in &self.conv {
            let y = g.conv2d(h, b[c.w], b[c.b], c.geom);
            h = g.relu(y);
        }
        let out = Self::run_mlp(g, b, &self.encoder, h);
        let d_z = self.config.partition.d_z();
        let mu = g.slice_cols(out, 0, d_z);
        let raw = g.slice_cols(out, d_z, d_z);
        let bound = self.config.log_var_bound;
        let log_var = g.clamp(raw, -bound, bound);
        (mu, log_var)
    }

    /// Decoder logits; probabilities are their sigmoid.
    pub fn decode_graph(&self, g: &mut Graph, b: &Bound, z: Var) -> Var {
        Self::run_mlp(g, b, &self.decoder, z)
    }

    pub fn classify_graph(&self, g: &mut Graph, b: &Bound, z_p: Var) -> Var {
        Self::run_mlp(g, b, &self.classifier, z_p)
    }

    /// Projection-head features of `z_p` (not yet normalized).
    pub fn project_graph(&self, g: &mut Graph, b: &Bound, z_p: Var) -> Var {
        Self::run_mlp(g, b, &self.projection, z_p)
    }

    /// Class logits of `classify(encode(x).mu_p)`.
    pub fn logits_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let (mu, _) = self.encode_graph(g, b, x);
        let mu_p = g.slice_cols(mu, 0, self.config.partition.dim_p);
        self.classify_graph(g, b, mu_p)
    }

    /// `[len, len]` map removing each channel's spatial mean.
    fn centering_matrix(&self) -> Mat {
        let img = self.config.image;
        let plane = img.height * img.width;
        let mut m = Mat::eye(img.len());
        let w = 1.0 / plane as f64;
        for c in 0..img.channels {
            let r = c * plane..(c + 1) * plane;
            m.slice_mut(s![r.clone(), r]).mapv_inplace(|v| v - w);
        }
        m
    }

    pub fn check_images(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.config.image.len() {
            return Err(argument(format!(
                "image rows have {} values, model expects {}",
                x.ncols(),
                self.config.image.len()
            )));
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(argument("image values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Mat) -> Result<CodeBatch> {
        self.check_images(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, &[]);
        let xv = g.constant(x.clone());
        let (mu, lv) = self.encode_graph(&mut g, &b, xv);
        CodeBatch::new(g.value(mu).clone(), g.value(lv).clone(), self.config.partition)
    }

    /// Pixel probabilities in `[0, 1]`, shape `[B, C*H*W]`.
    pub fn decode(&self, z: &Mat) -> Result<Mat> {
        if z.ncols() != self.config.partition.d_z() {
            return Err(argument(format!(
                "latent rows have {} values, expected d_z = {}",
                z.ncols(),
                self.config.partition.d_z()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, &[]);
        let zv = g.constant(z.clone());
        let logits = self.decode_graph(&mut g, &b, zv);
        Ok(g.value(logits).mapv(sigmoid))
    }

    pub fn classify(&self, z_p: &Mat) -> Result<Mat> {
        if z_p.ncols() != self.config.partition.dim_p {
            return Err(argument(format!(
                "classifier input has {} values, expected dim_p = {}",
                z_p.ncols(),
                self.config.partition.dim_p
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, &[]);
        let zv = g.constant(z_p.clone());
        let logits = self.classify_graph(&mut g, &b, zv);
        Ok(g.value(logits).clone())
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        let code = self.encode(x)?;
        self.classify(&code.mu_p())
    }

    /// Argmax predictions, evaluated in chunks.
    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), 256) {
            let logits = self.logits(&chunk.to_owned())?;
            out.extend(logits.rows().into_iter().map(|r| argmax(r.iter().copied())));
        }
        Ok(out)
    }
}

fn config_mismatch(msg: String) -> Error {
    Error::Config(format!("checkpoint does not fit model: {msg}"))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
