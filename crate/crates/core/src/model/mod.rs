//! Speaker network and language classifier.
//!
//! Topology:
//!
//! ```text
//! frames (T×F_in) ─ per-frame tanh MLP ─ z (T×H) ─ self-attentive pooling ─ e^S (1×D)
//!     e^S ─ speaker head (1 FC) ─ speaker logits
//!     e^S ─ GRL ─ FC1 (tanh) ─ FC2 (tanh) = e^L ─ FC3 ─ language logits
//! ```

mod checkpoint;

pub use checkpoint::Checkpoint;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Initial angular-prototypical scale and bias.
pub const PROTO_SCALE_INIT: f64 = 10.0;
pub const PROTO_BIAS_INIT: f64 = -5.0;
/// Lower clamp for the angular-prototypical scale.
pub const PROTO_SCALE_MIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    /// Width of both the speaker embedding and the language feature vector.
    pub embed_dim: usize,
    pub num_speakers: usize,
    pub num_languages: usize,
    pub encoder_layers: usize,
    /// Width of the language classifier's first layer.
    pub language_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 16,
            hidden_dim: 64,
            embed_dim: 32,
            num_speakers: 2,
            num_languages: 2,
            encoder_layers: 2,
            language_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("feat_dim", self.feat_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("num_speakers", self.num_speakers),
            ("num_languages", self.num_languages),
            ("encoder_layers", self.encoder_layers),
            ("language_hidden", self.language_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::contract(format!("model {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Which side of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder, pooling, speaker head and angular-prototypical scale/bias.
    Speaker,
    /// The three-layer language classifier.
    Language,
}

/// A fully connected layer `x W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: xavier(rng, fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit))
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: Vec<Linear>,
    /// Attention scoring projection `H → H`.
    pub attention: Linear,
    /// Attention context vector, `H×1`.
    pub context: Tensor,
    /// Frame value projection `H → D`.
    pub projection: Linear,
    pub speaker_head: Linear,
    pub proto_scale: Tensor,
    pub proto_bias: Tensor,
    pub language: [Linear; 3],
}

impl ModelBundle {
    /// Seeded Xavier-uniform initialisation with zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(rng::derive(seed, "model-init"));
        let h = config.hidden_dim;
        let d = config.embed_dim;
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for i in 0..config.encoder_layers {
            let fan_in = if i == 0 { config.feat_dim } else { h };
            encoder.push(Linear::xavier(&mut r, fan_in, h));
        }
        let attention = Linear::xavier(&mut r, h, h);
        let context = xavier(&mut r, h, 1);
        let projection = Linear::xavier(&mut r, h, d);
        let speaker_head = Linear::xavier(&mut r, d, config.num_speakers);
        let language = [
            Linear::xavier(&mut r, d, config.language_hidden),
            Linear::xavier(&mut r, config.language_hidden, d),
            Linear::xavier(&mut r, d, config.num_languages),
        ];
        Ok(ModelBundle {
            config,
            encoder,
            attention,
            context,
            projection,
            speaker_head,
            proto_scale: Tensor::scalar(PROTO_SCALE_INIT),
            proto_bias: Tensor::scalar(PROTO_BIAS_INIT),
            language,
        })
    }

    /// Visits every parameter in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, ParamGroup, &Tensor)) {
        use ParamGroup::*;
        for (i, l) in self.encoder.iter().enumerate() {
            f(&format!("encoder.{i}.weight"), Speaker, &l.weight);
            f(&format!("encoder.{i}.bias"), Speaker, &l.bias);
        }
        f("pool.attention.weight", Speaker, &self.attention.weight);
        f("pool.attention.bias", Speaker, &self.attention.bias);
        f("pool.context", Speaker, &self.context);
        f("pool.projection.weight", Speaker, &self.projection.weight);
        f("pool.projection.bias", Speaker, &self.projection.bias);
        f("speaker_head.weight", Speaker, &self.speaker_head.weight);
        f("speaker_head.bias", Speaker, &self.speaker_head.bias);
        f("proto.scale", Speaker, &self.proto_scale);
        f("proto.bias", Speaker, &self.proto_bias);
        for (i, l) in self.language.iter().enumerate() {
            f(&format!("language.fc{}.weight", i + 1), Language, &l.weight);
            f(&format!("language.fc{}.bias", i + 1), Language, &l.bias);
        }
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut Tensor)) {
        use ParamGroup::*;
        for (i, l) in self.encoder.iter_mut().enumerate() {
            f(&format!("encoder.{i}.weight"), Speaker, &mut l.weight);
            f(&format!("encoder.{i}.bias"), Speaker, &mut l.bias);
        }
        f("pool.attention.weight", Speaker, &mut self.attention.weight);
        f("pool.attention.bias", Speaker, &mut self.attention.bias);
        f("pool.context", Speaker, &mut self.context);
        f("pool.projection.weight", Speaker, &mut self.projection.weight);
        f("pool.projection.bias", Speaker, &mut self.projection.bias);
        f("speaker_head.weight", Speaker, &mut self.speaker_head.weight);
        f("speaker_head.bias", Speaker, &mut self.speaker_head.bias);
        f("proto.scale", Speaker, &mut self.proto_scale);
        f("proto.bias", Speaker, &mut self.proto_bias);
        for (i, l) in self.language.iter_mut().enumerate() {
            f(&format!("language.fc{}.weight", i + 1), Language, &mut l.weight);
            f(&format!("language.fc{}.bias", i + 1), Language, &mut l.bias);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _, _| names.push(n.to_owned()));
        names
    }

    /// Bit-level fingerprint of one parameter group (FNV-1a over names,
    /// shapes and value bits).
    pub fn group_fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.visit(|name, g, t| {
            if g == group {
                eat(name.as_bytes());
                eat(&(t.rows() as u64).to_le_bytes());
                eat(&(t.cols() as u64).to_le_bytes());
                for v in t.data() {
                    eat(&v.to_bits().to_le_bytes());
                }
            }
        });
        h
    }

    /// Puts every parameter on `tape`; groups listed in `trainable` get
    /// gradients, the rest are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[ParamGroup]) -> BoundModel {
        let mut vars = Vec::new();
        self.visit(|_, g, t| vars.push(tape.leaf(t.clone(), trainable.contains(&g))));
        self.bind_vars(vars).expect("one handle per parameter")
    }

    /// Wraps handles already on a tape, one per parameter in
    /// [`visit`](Self::visit) order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundModel> {
        let expected = self.param_names().len();
        if vars.len() != expected {
            return Err(Error::contract(format!("{} handles for {expected} parameters", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("visit order is fixed");
        let encoder = (0..self.encoder.len())
            .map(|_| BoundLinear::from_pair(next(), next()))
            .collect();
        let attention = BoundLinear::from_pair(next(), next());
        let context = next();
        let projection = BoundLinear::from_pair(next(), next());
        let speaker_head = BoundLinear::from_pair(next(), next());
        let proto_scale = next();
        let proto_bias = next();
        let language = [
            BoundLinear::from_pair(next(), next()),
            BoundLinear::from_pair(next(), next()),
            BoundLinear::from_pair(next(), next()),
        ];
        Ok(BoundModel {
            encoder,
            attention,
            context,
            projection,
            speaker_head,
            proto_scale,
            proto_bias,
            language,
            vars,
            feat_dim: self.config.feat_dim,
        })
    }

    /// Speaker embedding of one utterance, computed without gradient tracking.
    pub fn embed(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let x = tape.constant(frames.clone());
        let e = bound.embed(&mut tape, x, frames.rows())?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Embeddings of equal-length utterances stacked row-wise, one output
    /// row per `frames_per_utt` input rows.
    pub fn embed_many(&self, frames: &Tensor, frames_per_utt: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let x = tape.constant(frames.clone());
        let e = bound.embed(&mut tape, x, frames_per_utt)?;
        Ok(tape.value(e).clone())
    }

    /// Language logits and language feature vector for precomputed
    /// speaker embeddings (rows), without gradient tracking.
    pub fn language_outputs(&self, embeddings: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let es = tape.constant(embeddings.clone());
        let (logits, el) = bound.language_forward(&mut tape, es, false)?;
        Ok((tape.value(logits).clone(), tape.value(el).clone()))
    }

    /// Keeps the angular-prototypical scale strictly positive.
    pub fn clamp_proto_scale(&mut self) {
        let v = &mut self.proto_scale.data_mut()[0];
        if !(*v >= PROTO_SCALE_MIN) {
            *v = PROTO_SCALE_MIN;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    fn from_pair(weight: Var, bias: Var) -> Self {
        BoundLinear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// Tape handles for every parameter of a [`ModelBundle`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: Vec<BoundLinear>,
    pub attention: BoundLinear,
    pub context: Var,
    pub projection: BoundLinear,
    pub speaker_head: BoundLinear,
    pub proto_scale: Var,
    pub proto_bias: Var,
    pub language: [BoundLinear; 3],
    /// All handles in [`ModelBundle::visit`] order.
    pub vars: Vec<Var>,
    feat_dim: usize,
}

impl BoundModel {
    /// Per-frame tanh MLP over a `frames × F_in` block (frames from any
    /// number of utterances may be stacked).
    pub fn encode_frames(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (t, f) = tape.shape(x);
        if t == 0 {
            return Err(Error::contract("encode_frames needs at least one frame"));
        }
        if f != self.feat_dim {
            return Err(Error::shape(
                "encode_frames",
                format!("feature dim {f}, model expects {}", self.feat_dim),
            ));
        }
        let mut h = x;
        for layer in &self.encoder {
            let a = layer.forward(tape, h)?;
            h = tape.tanh(a);
        }
        Ok(h)
    }

    /// Self-attentive pooling of stacked frame embeddings.
    ///
    /// `z` holds `utterances × frames_per_utt` rows. Per utterance,
    /// `α = softmax_t(tanh(W z_t + b) · u)` and `e = Σ_t α_t (V z_t + c)`.
    /// Returns the `utterances × D` embeddings and each utterance's `1×T`
    /// attention weights.
    pub fn pool_with_weights(
        &self,
        tape: &mut Tape,
        z: Var,
        frames_per_utt: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let rows = tape.shape(z).0;
        if frames_per_utt == 0 || rows % frames_per_utt != 0 {
            return Err(Error::shape(
                "pool",
                format!("{rows} frames do not split into utterances of {frames_per_utt}"),
            ));
        }
        let hidden = self.attention.forward(tape, z)?;
        let hidden = tape.tanh(hidden);
        let scores = tape.matmul(hidden, self.context)?;
        let values = self.projection.forward(tape, z)?;

        let n = rows / frames_per_utt;
        let mut embeddings = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let s = tape.slice_rows(scores, i * frames_per_utt, frames_per_utt)?;
            let s = tape.transpose(s);
            let alpha = tape.row_softmax(s);
            let v = tape.slice_rows(values, i * frames_per_utt, frames_per_utt)?;
            embeddings.push(tape.matmul(alpha, v)?);
            weights.push(alpha);
        }
        let e = if n == 1 {
            embeddings[0]
        } else {
            tape.concat_rows(&embeddings)?
        };
        Ok((e, weights))
    }

    pub fn pool(&self, tape: &mut Tape, z: Var, frames_per_utt: usize) -> Result<Var> {
        Ok(self.pool_with_weights(tape, z, frames_per_utt)?.0)
    }

    /// Frames → speaker embeddings, `utterances × D`.
    pub fn embed(&self, tape: &mut Tape, x: Var, frames_per_utt: usize) -> Result<Var> {
        let z = self.encode_frames(tape, x)?;
        self.pool(tape, z, frames_per_utt)
    }

    pub fn speaker_logits(&self, tape: &mut Tape, es: Var) -> Result<Var> {
        self.speaker_head.forward(tape, es)
    }

    /// Runs `e^S` through the gradient reversal node and the three-layer
    /// language classifier. Returns `(language logits, e^L)` where `e^L`
    /// is the post-tanh output of the second layer.
    pub fn language_forward(&self, tape: &mut Tape, es: Var, grl_active: bool) -> Result<(Var, Var)> {
        let x = tape.gradient_reversal(es, grl_active);
        let h1 = self.language[0].forward(tape, x)?;
        let h1 = tape.tanh(h1);
        let h2 = self.language[1].forward(tape, h1)?;
        let el = tape.tanh(h2);
        let logits = self.language[2].forward(tape, el)?;
        Ok((logits, el))
    }
}
