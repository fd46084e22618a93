//! Sensor and context encoders, the cross-modal decoders, and the text featurizer.

pub mod text;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{streams, Graph, ParamId, ParamStore, Real, RngState, Tensor, Var};
use crate::parallel::{map_indexed, Exec};

pub use text::{cosine, featurize_text, featurize_text_with_flag, ContextRecord};

/// Lower and upper clamp applied to the context log-variance head.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Architecture dimensions shared by every model in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub channels: usize,
    pub length: usize,
    pub latent: usize,
    pub text: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub stride: usize,
    pub context_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            channels: 3,
            length: 128,
            latent: 32,
            text: text::DEFAULT_TEXT_DIM,
            conv1: 16,
            conv2: 32,
            kernel: 5,
            stride: 2,
            context_hidden: 64,
            decoder_hidden: 128,
        }
    }
}

impl Dims {
    pub fn conv1_len(&self) -> usize {
        (self.length - self.kernel) / self.stride + 1
    }

    pub fn conv2_len(&self) -> usize {
        (self.conv1_len() - self.kernel) / self.stride + 1
    }

    pub fn segment_len(&self) -> usize {
        self.channels * self.length
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("channels", self.channels),
            ("length", self.length),
            ("latent", self.latent),
            ("text", self.text),
            ("conv1", self.conv1),
            ("conv2", self.conv2),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("context_hidden", self.context_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (k, v) in pos {
            if v == 0 {
                return Err(crate::error::config(format!("dims.{k}"), "must be positive"));
            }
        }
        if self.length < self.kernel || self.conv1_len() < self.kernel {
            return Err(crate::error::config(
                "dims.length",
                "too short for two strided convolutions",
            ));
        }
        Ok(())
    }
}

/// Multichannel time series, stored channel-major (`values[c * length + t]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSegment {
    pub channels: usize,
    pub length: usize,
    pub values: Vec<f32>,
    pub context_id: String,
    pub label: Option<usize>,
}

impl SensorSegment {
    pub fn new(
        channels: usize,
        length: usize,
        values: Vec<f32>,
        context_id: &str,
        label: Option<usize>,
    ) -> Result<Self> {
        if values.len() != channels * length {
            return Err(contract(format!(
                "segment needs {} values, got {}",
                channels * length,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract("segment contains non-finite values"));
        }
        Ok(Self {
            channels,
            length,
            values,
            context_id: context_id.to_string(),
            label,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.values[c * self.length..(c + 1) * self.length]
    }

    fn check(&self, dims: &Dims) -> Result<()> {
        if self.channels != dims.channels || self.length != dims.length {
            return Err(contract(format!(
                "segment shape ({}, {}) does not match ({}, {})",
                self.channels, self.length, dims.channels, dims.length
            )));
        }
        Ok(())
    }
}

/// Sensor embedding and context posterior for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub z_x: Vec<f32>,
    pub mu_c: Vec<f32>,
    pub logvar_c: Vec<f32>,
    pub z_c: Vec<f32>,
}

/// Context posterior for one description.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextLatent {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub z: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub(crate) fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.insert_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = store.insert_zeros(&format!("{name}.b"), &[fan_out]);
        Self { w, b }
    }

    pub(crate) fn resolve<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let get = |s: &str| {
            store
                .id(&format!("{name}.{s}"))
                .ok_or_else(|| contract(format!("missing parameter {name}.{s}")))
        };
        Ok(Self {
            w: get("w")?,
            b: get("b")?,
        })
    }

    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderIds {
    conv1: Linear,
    conv2: Linear,
    sensor_out: Linear,
    ctx_hidden: Linear,
    ctx_mu: Linear,
    ctx_logvar: Linear,
    decx_hidden: Linear,
    decx_out: Linear,
    decc: Linear,
}

/// Parameters of `f_sensor`, `f_context`, `Decoder_x` and `Decoder_c`.
#[derive(Clone, Debug)]
pub struct Encoders<T: Real = f32> {
    pub dims: Dims,
    pub store: ParamStore<T>,
    ids: EncoderIds,
}

/// Names of the parameter tensors that make up the two encoders (decoders excluded).
pub fn encoder_param_prefixes() -> [&'static str; 2] {
    ["sensor.", "context."]
}

impl<T: Real> Encoders<T> {
    /// Fresh parameters drawn from `seed` on the init stream.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = RngState::new(seed, streams::INIT).rng();
        let mut s = ParamStore::new();
        let c = dims.channels;
        let k = dims.kernel;
        let conv1 = Linear::new(&mut s, "sensor.conv1", k * c, dims.conv1, &mut rng);
        let conv2 = Linear::new(&mut s, "sensor.conv2", k * dims.conv1, dims.conv2, &mut rng);
        let sensor_out = Linear::new(&mut s, "sensor.out", dims.conv2, dims.latent, &mut rng);
        let ctx_hidden =
            Linear::new(&mut s, "context.hidden", dims.text, dims.context_hidden, &mut rng);
        let ctx_mu = Linear::new(&mut s, "context.mu", dims.context_hidden, dims.latent, &mut rng);
        let ctx_logvar = Linear::new(
            &mut s,
            "context.logvar",
            dims.context_hidden,
            dims.latent,
            &mut rng,
        );
        let decx_hidden = Linear::new(
            &mut s,
            "decoder_x.hidden",
            dims.latent,
            dims.decoder_hidden,
            &mut rng,
        );
        let decx_out = Linear::new(
            &mut s,
            "decoder_x.out",
            dims.decoder_hidden,
            dims.segment_len(),
            &mut rng,
        );
        let decc = Linear::new(&mut s, "decoder_c", dims.latent, dims.text, &mut rng);
        Ok(Self {
            dims,
            store: s,
            ids: EncoderIds {
                conv1,
                conv2,
                sensor_out,
                ctx_hidden,
                ctx_mu,
                ctx_logvar,
                decx_hidden,
                decx_out,
                decc,
            },
        })
    }

    /// Rebinds a parameter store (e.g. loaded from a checkpoint) to the architecture.
    pub fn from_store(dims: Dims, store: ParamStore<T>) -> Result<Self> {
        dims.validate()?;
        let ids = EncoderIds {
            conv1: Linear::resolve(&store, "sensor.conv1")?,
            conv2: Linear::resolve(&store, "sensor.conv2")?,
            sensor_out: Linear::resolve(&store, "sensor.out")?,
            ctx_hidden: Linear::resolve(&store, "context.hidden")?,
            ctx_mu: Linear::resolve(&store, "context.mu")?,
            ctx_logvar: Linear::resolve(&store, "context.logvar")?,
            decx_hidden: Linear::resolve(&store, "decoder_x.hidden")?,
            decx_out: Linear::resolve(&store, "decoder_x.out")?,
            decc: Linear::resolve(&store, "decoder_c")?,
        };
        let expect = Self::init(dims, 0)?;
        for (name, t) in expect.store.iter() {
            let got = store
                .by_name(name)
                .ok_or_else(|| contract(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(contract(format!("parameter {name} has the wrong shape")));
            }
        }
        Ok(Self { dims, store, ids })
    }

    pub fn cast<U: Real>(&self) -> Encoders<U> {
        Encoders {
            dims: self.dims,
            store: self.store.cast(),
            ids: self.ids,
        }
    }

    /// `f_sensor` on a `[batch, length, channels]` input, returning `[batch, latent]`.
    pub fn sensor_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let d = &self.dims;
        let (w1, b1) = (g.param(store, self.ids.conv1.w), g.param(store, self.ids.conv1.b));
        let h1 = g.conv1d(x, w1, b1, d.kernel, d.stride);
        let h1 = g.relu(h1);
        let (w2, b2) = (g.param(store, self.ids.conv2.w), g.param(store, self.ids.conv2.b));
        let h2 = g.conv1d(h1, w2, b2, d.kernel, d.stride);
        let h2 = g.relu(h2);
        let pooled = g.mean_time(h2);
        self.ids.sensor_out.forward(g, store, pooled)
    }

    /// `f_context` heads on `[batch, text]` features: `(mu, clamped logvar)`.
    pub fn context_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, c: Var) -> (Var, Var) {
        let h = self.ids.ctx_hidden.forward(g, store, c);
        let h = g.relu(h);
        let mu = self.ids.ctx_mu.forward(g, store, h);
        let lv = self.ids.ctx_logvar.forward(g, store, h);
        let lv = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, lv)
    }

    /// Reparameterized sample `mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(&self, g: &mut Graph<T>, mu: Var, logvar: Var, eps: Tensor<T>) -> Var {
        let e = g.input(eps);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let noise = g.mul(std, e);
        g.add(mu, noise)
    }

    /// `Decoder_x`: latent `[batch, latent]` to flattened segments `[batch, C * T]`.
    pub fn decode_sensor_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Var {
        let h = self.ids.decx_hidden.forward(g, store, z);
        let h = g.relu(h);
        self.ids.decx_out.forward(g, store, h)
    }

    /// `Decoder_c`: latent `[batch, latent]` to context features `[batch, text]`.
    pub fn decode_context_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Var {
        self.ids.decc.forward(g, store, z)
    }

    /// Stacks segments into the channels-last `[batch, length, channels]` layout.
    pub fn segments_input(&self, segs: &[&SensorSegment]) -> Result<Tensor<T>> {
        let d = &self.dims;
        let mut data = Vec::with_capacity(segs.len() * d.segment_len());
        for s in segs {
            s.check(d)?;
            for t in 0..d.length {
                for c in 0..d.channels {
                    data.push(T::from_f64_lossy(s.values[c * d.length + t] as f64));
                }
            }
        }
        Tensor::new(vec![segs.len(), d.length, d.channels], data)
    }

    /// Channel-major flattened targets `[batch, C * T]` for `Decoder_x`.
    pub fn segments_target(&self, segs: &[&SensorSegment]) -> Result<Tensor<T>> {
        let d = &self.dims;
        let mut data = Vec::with_capacity(segs.len() * d.segment_len());
        for s in segs {
            s.check(d)?;
            data.extend(s.values.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(vec![segs.len(), d.segment_len()], data)
    }

    pub fn features_input(&self, feats: &[&[f32]]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(feats.len() * self.dims.text);
        for f in feats {
            if f.len() != self.dims.text {
                return Err(contract(format!(
                    "context features must have length {}, got {}",
                    self.dims.text,
                    f.len()
                )));
            }
            data.extend(f.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(vec![feats.len(), self.dims.text], data)
    }
}

fn to_rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f32>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.as_f64() as f32).collect())
        .collect()
}

impl Encoders<f32> {
    /// `z_x = f_sensor(x)` for one segment.
    pub fn encode_sensor(&self, x: &SensorSegment) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let input = g.input(self.segments_input(&[x])?);
        let z = self.sensor_graph(&mut g, &self.store, input);
        Ok(g.value(z).data().to_vec())
    }

    /// Sensor embeddings for many segments, evaluated in chunks (optionally in parallel).
    pub fn encode_sensor_batch(&self, segs: &[&SensorSegment], exec: Exec) -> Result<Vec<Vec<f32>>> {
        const CHUNK: usize = 64;
        for s in segs {
            s.check(&self.dims)?;
        }
        let chunks = segs.len().div_ceil(CHUNK);
        let parts = map_indexed(exec, chunks, |ci| {
            let part = &segs[ci * CHUNK..((ci + 1) * CHUNK).min(segs.len())];
            let mut g = Graph::new();
            let input = g.input(self.segments_input(part).expect("checked above"));
            let z = self.sensor_graph(&mut g, &self.store, input);
            to_rows(g.value(z))
        });
        Ok(parts.into_iter().flatten().collect())
    }

    /// Context posterior. With `training = false` no randomness is consumed and
    /// `z == mu`; otherwise `eps` is drawn from `rng`.
    pub fn encode_context<R: Rng>(
        &self,
        c: &ContextRecord,
        rng: Option<&mut R>,
        training: bool,
    ) -> Result<ContextLatent> {
        let mut g = Graph::new();
        let input = g.input(self.features_input(&[&c.features])?);
        let (mu, lv) = self.context_graph(&mut g, &self.store, input);
        let mu_v = g.value(mu).data().to_vec();
        let lv_v = g.value(lv).data().to_vec();
        let z = if training {
            let rng = rng.ok_or_else(|| contract("training-mode context encoding needs an rng"))?;
            let eps: Vec<f32> = (0..self.dims.latent)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let eps = Tensor::from_vec(&[1, self.dims.latent], eps);
            let z = self.reparameterize(&mut g, mu, lv, eps);
            g.value(z).data().to_vec()
        } else {
            mu_v.clone()
        };
        Ok(ContextLatent {
            mu: mu_v,
            logvar: lv_v,
            z,
        })
    }

    /// Deterministic context embedding (`mu_c`), as used at inference.
    pub fn context_embedding(&self, c: &ContextRecord) -> Result<Vec<f32>> {
        Ok(self
            .encode_context::<rand_chacha::ChaCha8Rng>(c, None, false)?
            .mu)
    }

    /// `Decoder_x(z_c)` reshaped to a `(C, T)` channel-major buffer.
    pub fn decode_sensor(&self, z_c: &[f32]) -> Result<Vec<f32>> {
        self.check_latent(z_c)?;
        let mut g = Graph::new();
        let z = g.input(Tensor::from_vec(&[1, self.dims.latent], z_c.to_vec()));
        let out = self.decode_sensor_graph(&mut g, &self.store, z);
        Ok(g.value(out).data().to_vec())
    }

    /// `Decoder_c(z_x)`.
    pub fn decode_context(&self, z_x: &[f32]) -> Result<Vec<f32>> {
        self.check_latent(z_x)?;
        let mut g = Graph::new();
        let z = g.input(Tensor::from_vec(&[1, self.dims.latent], z_x.to_vec()));
        let out = self.decode_context_graph(&mut g, &self.store, z);
        Ok(g.value(out).data().to_vec())
    }

    pub fn latent_pair(&self, x: &SensorSegment, c: &ContextRecord) -> Result<LatentPair> {
        let z_x = self.encode_sensor(x)?;
        let ctx = self.encode_context::<rand_chacha::ChaCha8Rng>(c, None, false)?;
        Ok(LatentPair {
            z_x,
            mu_c: ctx.mu,
            logvar_c: ctx.logvar,
            z_c: ctx.z,
        })
    }

    fn check_latent(&self, z: &[f32]) -> Result<()> {
        if z.len() != self.dims.latent {
            return Err(contract(format!(
                "latent vector must have length {}, got {}",
                self.dims.latent,
                z.len()
            )));
        }
        Ok(())
    }

    /// Parameters belonging to `f_sensor` and `f_context` (decoders excluded).
    pub fn encoder_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.store
            .iter()
            .filter(|(n, _)| encoder_param_prefixes().iter().any(|p| n.starts_with(p)))
    }

    /// SHA-256 over the encoder parameter bytes; used to prove they stay frozen.
    pub fn encoder_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.encoder_tensors() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
