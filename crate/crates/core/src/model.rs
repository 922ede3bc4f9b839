//! The cross-modal encoder-decoder.
//!
//! The encoder reads visual embeddings followed by text embeddings with
//! fully visible attention. The decoder is causal, attends to the encoder
//! states, and emits through one output head whose columns are split into a
//! text slice `[0, V_t)` and an image slice `[V_t, V_t + K)`.
//!
//! Decoder input ids live in a unified space: text ids as-is, image token
//! `z` as `V_t + z`, and a dedicated image start id `V_t + K`. Text
//! sequences start from the text vocabulary's BOS.

use rand::Rng as _;

use crate::autodiff::Var;
use crate::checkpoint::{config_hash, Archive};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualVariant {
    /// Three-stage conv stem whose total stride maps the image onto the
    /// token grid.
    ConvFeatures,
    /// Embeds the image's VQ token ids.
    TokenProjection,
    /// Linear map of non-overlapping pixel patches.
    PatchProjection,
}

impl VisualVariant {
    pub fn name(self) -> &'static str {
        match self {
            VisualVariant::ConvFeatures => "conv",
            VisualVariant::TokenProjection => "token",
            VisualVariant::PatchProjection => "patch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv" | "conv-features" => Ok(VisualVariant::ConvFeatures),
            "token" | "token-projection" => Ok(VisualVariant::TokenProjection),
            "patch" | "patch-projection" => Ok(VisualVariant::PatchProjection),
            _ => Err(Error::invalid(format!("unknown visual embedder `{s}` (conv | token | patch)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub image_size: usize,
    /// Side of the image token grid.
    pub grid_side: usize,
    pub visual: VisualVariant,
    pub patch_size: usize,
    /// Channel width of the first two conv stem stages.
    pub stem_channels: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk(text_vocab: usize, image_vocab: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d: 64,
            heads: 4,
            ffn: 256,
            max_len: 256,
            text_vocab,
            image_vocab,
            image_size: 32,
            grid_side: 8,
            visual: VisualVariant::ConvFeatures,
            patch_size: 4,
            stem_channels: 32,
            dropout: 0.0,
        }
    }

    /// 6+6 layers, width 768, 12 heads, FFN 3072, 512 positions,
    /// 256x256 images tokenized to a 16x16 grid of 1024 codes.
    pub fn full(text_vocab: usize) -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            d: 768,
            heads: 12,
            ffn: 3072,
            max_len: 512,
            text_vocab,
            image_vocab: 1024,
            image_size: 256,
            grid_side: 16,
            visual: VisualVariant::ConvFeatures,
            patch_size: 16,
            stem_channels: 256,
            dropout: 0.1,
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Number of visual embeddings the encoder receives.
    pub fn visual_len(&self) -> usize {
        match self.visual {
            VisualVariant::ConvFeatures | VisualVariant::TokenProjection => self.image_tokens(),
            VisualVariant::PatchProjection => (self.image_size / self.patch_size).pow(2),
        }
    }

    /// Stride and kernel of the first conv stem stage; the other two
    /// stages are 3x3 with stride 2.
    pub fn stem_entry(&self) -> (usize, usize) {
        let s0 = self.image_size / self.grid_side / 4;
        if s0 <= 1 {
            (1, 3)
        } else {
            (s0, s0)
        }
    }

    pub fn head_width(&self) -> usize {
        self.text_vocab + self.image_vocab
    }

    pub fn image_bos(&self) -> usize {
        self.text_vocab + self.image_vocab
    }

    /// Column range of the output head for a modality.
    pub fn slice(&self, modality: Modality) -> (usize, usize) {
        match modality {
            Modality::Text => (0, self.text_vocab),
            Modality::Image => (self.text_vocab, self.text_vocab + self.image_vocab),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("width {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.ffn == 0 || self.max_len == 0 {
            return fail("ffn and max_len must be positive".into());
        }
        if self.text_vocab < 5 || self.image_vocab < 2 {
            return fail(format!("vocabularies too small: text {}, image {}", self.text_vocab, self.image_vocab));
        }
        if self.grid_side == 0 || self.image_size % self.grid_side != 0 {
            return fail(format!("image size {} does not tile into a {} grid", self.image_size, self.grid_side));
        }
        match self.visual {
            VisualVariant::ConvFeatures if (self.image_size / self.grid_side) % 4 != 0 => {
                return fail(format!(
                    "conv stem needs a cell size divisible by 4, got {}",
                    self.image_size / self.grid_side
                ))
            }
            VisualVariant::PatchProjection if self.patch_size == 0 || self.image_size % self.patch_size != 0 => {
                return fail(format!("patch size {} does not tile {}", self.patch_size, self.image_size))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.visual_len() >= self.max_len || self.image_tokens() >= self.max_len {
            return fail(format!("max_len {} cannot hold the image sequence", self.max_len));
        }
        Ok(())
    }

    /// Parameter count as a closed form of the config.
    ///
    /// attention block: 4 d^2 + 4 d; feed-forward: 2 d f + f + d; layer norm: 2 d.
    /// encoder layer = attn + ffn + 2 ln, decoder layer = 2 attn + ffn + 3 ln.
    pub fn param_count(&self) -> usize {
        let (d, f, l) = (self.d, self.ffn, self.max_len);
        let attn = 4 * d * d + 4 * d;
        let ffn = 2 * d * f + f + d;
        let ln = 2 * d;
        let text = self.text_vocab * d + l * d + ln;
        let visual_body = match self.visual {
            VisualVariant::ConvFeatures => {
                let (c, k0) = (self.stem_channels, self.stem_entry().1);
                (c * 3 * k0 * k0 + c) + (c * c * 9 + c) + (d * c * 9 + d)
            }
            VisualVariant::TokenProjection => (self.image_vocab + 1) * d,
            VisualVariant::PatchProjection => 3 * self.patch_size * self.patch_size * d + d,
        };
        let visual = visual_body + self.visual_len() * d;
        let encoder = self.enc_layers * (attn + ffn + 2 * ln) + ln;
        let decoder = (self.head_width() + 1) * d + l * d + self.dec_layers * (2 * attn + ffn + 3 * ln) + ln;
        let head = d * self.head_width() + self.head_width();
        text + visual + encoder + decoder + head
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn", self.ffn.to_string()),
            ("max_len", self.max_len.to_string()),
            ("text_vocab", self.text_vocab.to_string()),
            ("image_vocab", self.image_vocab.to_string()),
            ("image_size", self.image_size.to_string()),
            ("grid_side", self.grid_side.to_string()),
            ("visual", self.visual.name().to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("stem_channels", self.stem_channels.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let visual: String = a.require("visual")?;
        Ok(ModelConfig {
            enc_layers: a.require("enc_layers")?,
            dec_layers: a.require("dec_layers")?,
            d: a.require("d")?,
            heads: a.require("heads")?,
            ffn: a.require("ffn")?,
            max_len: a.require("max_len")?,
            text_vocab: a.require("text_vocab")?,
            image_vocab: a.require("image_vocab")?,
            image_size: a.require("image_size")?,
            grid_side: a.require("grid_side")?,
            visual: VisualVariant::parse(&visual)?,
            patch_size: a.require("patch_size")?,
            stem_channels: a.require("stem_channels")?,
            dropout: a.require("dropout")?,
        })
    }

    pub fn hash(&self) -> String {
        config_hash(&self.entries())
    }
}

/// Pixels for the conv and patch embedders, token ids for token projection.
/// Masked token cells carry the id `K`.
#[derive(Clone, Copy, Debug)]
pub enum VisualInput<'a> {
    Pixels(&'a ImageTensor),
    Tokens(&'a [usize]),
}

#[derive(Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

#[derive(Clone)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ffn: FeedForward,
}

#[derive(Clone)]
enum VisualParams {
    Conv([Linear; 3]),
    Tokens(ParamId),
    Patch(Linear),
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64, decay: bool) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t, decay)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.normal(format!("{name}.w"), &[din, dout], INIT_STD, true);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[dout]), false);
        Linear { w, b }
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> Linear {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let w = self.normal(format!("{name}.w"), &[out_c, in_c, k, k], std, true);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[out_c]), false);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.store.add(format!("{name}.g"), Tensor::full(&[d], 1.0), false);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[d]), false);
        Norm { g, b }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FeedForward {
        FeedForward { up: self.linear(&format!("{name}.up"), d, f), down: self.linear(&format!("{name}.down"), f, d) }
    }
}

#[derive(Clone)]
pub struct CrossModalModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    text_tok: ParamId,
    text_pos: ParamId,
    text_ln: Norm,
    visual: VisualParams,
    visual_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_ln: Norm,
    dec_tok: ParamId,
    dec_pos: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_ln: Norm,
    head: Linear,
}

/// Dropout source for a training forward pass; `None` means evaluation.
pub type Train<'a> = Option<&'a mut Rng>;

impl CrossModalModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let (d, l) = (c.d, c.max_len);
        let mut b = Builder { store: &mut store, rng: rng_for(seed, "model.init") };

        let text_tok = b.normal("text.tok".into(), &[c.text_vocab, d], INIT_STD, true);
        let text_pos = b.normal("text.pos".into(), &[l, d], INIT_STD, true);
        let text_ln = b.norm("text.ln", d);

        let visual = match c.visual {
            VisualVariant::ConvFeatures => {
                let (s, k0) = (c.stem_channels, c.stem_entry().1);
                VisualParams::Conv([b.conv("stem.0", s, 3, k0), b.conv("stem.1", s, s, 3), b.conv("stem.2", d, s, 3)])
            }
            VisualVariant::TokenProjection => {
                VisualParams::Tokens(b.normal("visual.tok".into(), &[c.image_vocab + 1, d], INIT_STD, true))
            }
            VisualVariant::PatchProjection => {
                let p = c.patch_size;
                VisualParams::Patch(b.linear("visual.patch", 3 * p * p, d))
            }
        };
        let visual_pos = b.normal("visual.pos".into(), &[c.visual_len(), d], INIT_STD, true);

        let encoder = (0..c.enc_layers)
            .map(|i| EncoderLayer {
                ln1: b.norm(&format!("enc.{i}.ln1"), d),
                attn: b.attention(&format!("enc.{i}.attn"), d),
                ln2: b.norm(&format!("enc.{i}.ln2"), d),
                ffn: b.ffn(&format!("enc.{i}.ffn"), d, c.ffn),
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);

        let dec_tok = b.normal("dec.tok".into(), &[c.head_width() + 1, d], INIT_STD, true);
        let dec_pos = b.normal("dec.pos".into(), &[l, d], INIT_STD, true);
        let decoder = (0..c.dec_layers)
            .map(|i| DecoderLayer {
                ln1: b.norm(&format!("dec.{i}.ln1"), d),
                self_attn: b.attention(&format!("dec.{i}.self"), d),
                ln2: b.norm(&format!("dec.{i}.ln2"), d),
                cross_attn: b.attention(&format!("dec.{i}.cross"), d),
                ln3: b.norm(&format!("dec.{i}.ln3"), d),
                ffn: b.ffn(&format!("dec.{i}.ffn"), d, c.ffn),
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        let head = b.linear("head", d, c.head_width());

        Ok(CrossModalModel {
            config,
            store,
            text_tok,
            text_pos,
            text_ln,
            visual,
            visual_pos,
            encoder,
            enc_ln,
            dec_tok,
            dec_pos,
            decoder,
            dec_ln,
            head,
        })
    }

    fn linear(&self, g: &mut Graph, x: Var, p: Linear) -> Result<Var> {
        let (w, b) = (g.param(p.w)?, g.param(p.b)?);
        let y = g.tape.matmul(x, w)?;
        g.tape.add(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, p: Norm) -> Result<Var> {
        let (gamma, beta) = (g.param(p.g)?, g.param(p.b)?);
        g.tape.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn dropout(&self, g: &mut Graph, x: Var, train: &mut Train) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = train.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = g.tape.shape(x).to_vec();
        let n = g.tape.value(x).len();
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }).collect();
        let mask = g.tape.constant_from(&shape, mask)?;
        g.tape.mul(x, mask)
    }

    /// `[len, d] -> [heads, len, d / heads]`
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let len = g.tape.shape(x)[0];
        let h = self.config.heads;
        let r = g.tape.reshape(x, &[len, h, self.config.d / h])?;
        g.tape.swap_axes01(r)
    }

    fn attention(&self, g: &mut Graph, x: Var, memory: Var, p: Attention, causal: bool) -> Result<Var> {
        let len = g.tape.shape(x)[0];
        let q = self.linear(g, x, p.q)?;
        let k = self.linear(g, memory, p.k)?;
        let v = self.linear(g, memory, p.v)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let kt = g.tape.transpose_last2(k)?;
        let scores = g.tape.matmul(q, kt)?;
        let scale = 1.0 / ((self.config.d / self.config.heads) as f64).sqrt();
        let scores = g.tape.scale(scores, scale)?;
        let weights = g.tape.softmax(scores, causal)?;
        let mixed = g.tape.matmul(weights, v)?;
        let merged = g.tape.swap_axes01(mixed)?;
        let merged = g.tape.reshape(merged, &[len, self.config.d])?;
        self.linear(g, merged, p.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, p: FeedForward) -> Result<Var> {
        let h = self.linear(g, x, p.up)?;
        let h = g.tape.gelu(h)?;
        self.linear(g, h, p.down)
    }

    fn positions(&self, g: &mut Graph, table: ParamId, len: usize) -> Result<Var> {
        if len > self.config.max_len {
            return Err(Error::invalid(format!("sequence of {len} exceeds max_len {}", self.config.max_len)));
        }
        let t = g.param(table)?;
        let ids: Vec<usize> = (0..len).collect();
        g.tape.embedding(t, &ids)
    }

    /// `t_i = LayerNorm(e_i + p_i)` for each text position.
    pub fn embed_text(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let pos = self.positions(g, self.text_pos, ids.len())?;
        let table = g.param(self.text_tok)?;
        let tok = g.tape.embedding(table, ids)?;
        let sum = g.tape.add(tok, pos)?;
        self.norm(g, sum, self.text_ln)
    }

    /// `v_i = f_i + p_i` for each visual position.
    pub fn embed_image(&self, g: &mut Graph, input: VisualInput) -> Result<Var> {
        let c = &self.config;
        let features = match (&self.visual, input) {
            (VisualParams::Conv(stages), VisualInput::Pixels(img)) => {
                let mut h = self.pixels(g, img)?;
                let (s0, k0) = c.stem_entry();
                for (i, st) in stages.iter().enumerate() {
                    let (w, b) = (g.param(st.w)?, g.param(st.b)?);
                    h = match i {
                        0 => g.tape.conv2d(h, w, Some(b), s0, if k0 == 3 { 1 } else { 0 })?,
                        _ => g.tape.conv2d(h, w, Some(b), 2, 1)?,
                    };
                    if i < 2 {
                        h = g.tape.relu(h)?;
                    }
                }
                // flatten along the spatial axes: [1, d, h, w] -> [h*w, d]
                let m = c.visual_len();
                let flat = g.tape.reshape(h, &[c.d, m])?;
                g.tape.transpose_last2(flat)?
            }
            (VisualParams::Patch(lin), VisualInput::Pixels(img)) => {
                let p = c.patch_size;
                let side = c.image_size / p;
                let mut rows = Vec::with_capacity(side * side * 3 * p * p);
                for py in 0..side {
                    for px in 0..side {
                        for ch in 0..3 {
                            for y in 0..p {
                                for x in 0..p {
                                    rows.push(img.get(ch, py * p + y, px * p + x));
                                }
                            }
                        }
                    }
                }
                self.check_pixels(img)?;
                let x = g.tape.constant_from(&[side * side, 3 * p * p], rows)?;
                self.linear(g, x, *lin)?
            }
            (VisualParams::Tokens(table), VisualInput::Tokens(ids)) => {
                if ids.len() != c.image_tokens() {
                    return Err(Error::shape("embed_image", format!("{} tokens, expected {}", ids.len(), c.image_tokens())));
                }
                let t = g.param(*table)?;
                g.tape.embedding(t, ids)?
            }
            (_, input) => {
                let got = match input {
                    VisualInput::Pixels(_) => "pixels",
                    VisualInput::Tokens(_) => "token ids",
                };
                return Err(Error::shape("embed_image", format!("{} embedder cannot take {got}", c.visual.name())));
            }
        };
        let pos = self.positions(g, self.visual_pos, c.visual_len())?;
        g.tape.add(features, pos)
    }

    fn check_pixels(&self, img: &ImageTensor) -> Result<()> {
        let s = self.config.image_size;
        if img.height() != s || img.width() != s {
            return Err(Error::shape("embed_image", format!("{}x{} image, model expects {s}x{s}", img.height(), img.width())));
        }
        Ok(())
    }

    fn pixels(&self, g: &mut Graph, img: &ImageTensor) -> Result<Var> {
        self.check_pixels(img)?;
        let s = self.config.image_size;
        g.tape.constant_from(&[1, 3, s, s], img.data().to_vec())
    }

    /// Fully visible encoder over `[V, T]`; `visual` may be absent.
    pub fn encode(&self, g: &mut Graph, visual: Option<Var>, text: Var, mut train: Train) -> Result<Var> {
        let x = match visual {
            Some(v) => g.tape.concat_rows(&[v, text])?,
            None => text,
        };
        let len = g.tape.shape(x)[0];
        if len > self.config.max_len {
            return Err(Error::invalid(format!("encoder input of {len} exceeds max_len {}", self.config.max_len)));
        }
        let mut h = self.dropout(g, x, &mut train)?;
        for layer in &self.encoder {
            let n = self.norm(g, h, layer.ln1)?;
            let a = self.attention(g, n, n, layer.attn, false)?;
            let a = self.dropout(g, a, &mut train)?;
            h = g.tape.add(h, a)?;
            let n = self.norm(g, h, layer.ln2)?;
            let f = self.feed_forward(g, n, layer.ffn)?;
            let f = self.dropout(g, f, &mut train)?;
            h = g.tape.add(h, f)?;
        }
        self.norm(g, h, self.enc_ln)
    }

    /// Decoder input ids (unified space) for teacher forcing on `targets`.
    pub fn shift_right(&self, targets: &[usize], modality: Modality) -> Vec<usize> {
        let (start, bos) = match modality {
            Modality::Text => (0, BOS),
            Modality::Image => (self.config.text_vocab, self.config.image_bos()),
        };
        std::iter::once(bos).chain(targets[..targets.len().saturating_sub(1)].iter().map(|&t| t + start)).collect()
    }

    /// Causal decoder over unified `inputs`, cross-attending to `memory`.
    /// Returns logits `[len, slice width]` for the modality's head slice.
    pub fn decode_train(&self, g: &mut Graph, memory: Var, inputs: &[usize], modality: Modality, train: Train) -> Result<Var> {
        let positions: Vec<usize> = (0..inputs.len()).collect();
        self.decode_at(g, memory, inputs, &positions, modality, train)
    }

    /// Like [`Self::decode_train`], but slot `i` carries the position of the
    /// token it predicts, `positions[i]` (its index in the full caption or
    /// grid). Suffixes and scattered masked cells are decoded in place.
    pub fn decode_at(&self, g: &mut Graph, memory: Var, inputs: &[usize], positions: &[usize], modality: Modality, mut train: Train) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("decoder needs at least one input position"));
        }
        if positions.len() != inputs.len() {
            return Err(Error::shape("decode_at", format!("{} positions for {} inputs", positions.len(), inputs.len())));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_len) {
            return Err(Error::invalid(format!("decoder position {p} exceeds max_len {}", self.config.max_len)));
        }
        let c = &self.config;
        let valid = |id: usize| match modality {
            Modality::Text => id < c.text_vocab,
            Modality::Image => (c.text_vocab..=c.image_bos()).contains(&id),
        };
        if let Some(&bad) = inputs.iter().find(|&&id| !valid(id)) {
            return Err(Error::invalid(format!("decoder input id {bad} is outside the {modality:?} range")));
        }
        let pos_table = g.param(self.dec_pos)?;
        let pos = g.tape.embedding(pos_table, positions)?;
        let table = g.param(self.dec_tok)?;
        let tok = g.tape.embedding(table, inputs)?;
        let x = g.tape.add(tok, pos)?;
        let mut h = self.dropout(g, x, &mut train)?;
        for layer in &self.decoder {
            let n = self.norm(g, h, layer.ln1)?;
            let a = self.attention(g, n, n, layer.self_attn, true)?;
            let a = self.dropout(g, a, &mut train)?;
            h = g.tape.add(h, a)?;
            let n = self.norm(g, h, layer.ln2)?;
            let a = self.attention(g, n, memory, layer.cross_attn, false)?;
            let a = self.dropout(g, a, &mut train)?;
            h = g.tape.add(h, a)?;
            let n = self.norm(g, h, layer.ln3)?;
            let f = self.feed_forward(g, n, layer.ffn)?;
            let f = self.dropout(g, f, &mut train)?;
            h = g.tape.add(h, f)?;
        }
        let h = self.norm(g, h, self.dec_ln)?;
        let (start, end) = c.slice(modality);
        let (w, b) = (g.param(self.head.w)?, g.param(self.head.b)?);
        let w = g.tape.slice_last(w, start, end)?;
        let b = g.tape.slice_last(b, start, end)?;
        let y = g.tape.matmul(h, w)?;
        g.tape.add(y, b)
    }

    /// Autoregressive generation from encoder states given as a constant
    /// tensor. Text stops at EOS (not returned) or `max_steps`; image mode
    /// emits exactly one token per grid cell. Ids are modality-local.
    pub fn generate(&self, memory: &Tensor, modality: Modality, max_steps: usize, strategy: &Sampling, rng: &mut Rng) -> Result<Vec<usize>> {
        if max_steps == 0 {
            return Err(Error::invalid("generation needs max_steps >= 1"));
        }
        let steps = match modality {
            Modality::Text => max_steps.min(self.config.max_len),
            Modality::Image => self.config.image_tokens(),
        };
        let (offset, bos) = match modality {
            Modality::Text => (0, BOS),
            Modality::Image => (self.config.text_vocab, self.config.image_bos()),
        };
        let mut inputs = vec![bos];
        let mut out = Vec::new();
        for _ in 0..steps {
            let mut g = Graph::new(&self.store);
            let mem = g.tape.constant(memory)?;
            let logits = self.decode_train(&mut g, mem, &inputs, modality, None)?;
            let width = g.tape.shape(logits)[1];
            let last = &g.tape.value(logits)[(inputs.len() - 1) * width..];
            let next = strategy.pick(last, rng);
            if modality == Modality::Text && next == EOS {
                break;
            }
            out.push(next);
            inputs.push(next + offset);
        }
        Ok(out)
    }

    /// Encoder states for an image with an empty text prefix.
    pub fn encode_image_only(&self, input: VisualInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let v = self.embed_image(&mut g, input)?;
        let t = self.embed_text(&mut g, &[])?;
        let h = self.encode(&mut g, Some(v), t, None)?;
        Ok(g.tape.to_tensor(h))
    }

    /// Encoder states for a caption with a fully masked image.
    pub fn encode_caption_only(&self, caption: &[usize], blank: VisualInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let v = self.embed_image(&mut g, blank)?;
        let t = self.embed_text(&mut g, caption)?;
        let h = self.encode(&mut g, Some(v), t, None)?;
        Ok(g.tape.to_tensor(h))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set("kind", "model");
        for (k, v) in self.config.entries() {
            a.set(&k, v);
        }
        a.set("config_hash", self.config.hash());
        for p in self.store.params() {
            a.push(p.name.clone(), p.tensor.clone());
        }
        a
    }

    /// Rebuilds a model, checking the stored config hash and every tensor.
    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.get("kind") != Some("model") {
            return Err(Error::Data("checkpoint does not hold a model".into()));
        }
        let config = ModelConfig::from_archive(a)?;
        let stored: String = a.require("config_hash")?;
        if stored != config.hash() {
            return Err(Error::Data(format!("config hash mismatch: header says {stored}, config hashes to {}", config.hash())));
        }
        let mut model = CrossModalModel::new(config, 0)?;
        let names: Vec<String> = model.store.params().iter().map(|p| p.name.clone()).collect();
        for name in names {
            model.store.replace(&name, a.tensor(&name)?.clone())?;
        }
        Ok(model)
    }

    /// Resizes the text and decoder position tables to `new_len` by linear
    /// interpolation.
    pub fn with_max_len(mut self, new_len: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.max_len = new_len;
        config.validate()?;
        let mut fresh = CrossModalModel::new(config, 0)?;
        for p in self.store.params_mut() {
            let t = if p.name == "text.pos" || p.name == "dec.pos" {
                interpolate_positions(&p.tensor, new_len)?
            } else {
                std::mem::replace(&mut p.tensor, Tensor::scalar(0.0))
            };
            fresh.store.replace(&p.name, t)?;
        }
        Ok(fresh)
    }
}

/// Decoding rule for [`CrossModalModel::generate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Top-k sampling; temperature 0 falls back to greedy.
    TopK { k: usize, temperature: f64 },
}

impl Sampling {
    pub fn pick(&self, logits: &[f64], rng: &mut Rng) -> usize {
        let argmax = || {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        };
        match *self {
            Sampling::Greedy => argmax(),
            Sampling::TopK { temperature, .. } if temperature <= 0.0 => argmax(),
            Sampling::TopK { k, temperature } => {
                let mut order: Vec<usize> = (0..logits.len()).collect();
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                order.truncate(k.max(1));
                let max = logits[order[0]];
                let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (i, w) in order.iter().zip(&weights) {
                    if u < *w {
                        return *i;
                    }
                    u -= w;
                }
                *order.last().expect("top-k keeps at least one candidate")
            }
        }
    }
}

/// 1-D linear interpolation of a `[L, d]` position table to `new_len` rows,
/// aligning the first and last rows.
pub fn interpolate_positions(table: &Tensor, new_len: usize) -> Result<Tensor> {
    let s = table.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::shape("interpolate_positions", format!("need at least 2 rows, got {s:?}")));
    }
    if new_len < 1 {
        return Err(Error::invalid("interpolate_positions needs new_len >= 1"));
    }
    let (l, d) = (s[0], s[1]);
    if new_len == l {
        return Ok(table.clone());
    }
    let mut out = Vec::with_capacity(new_len * d);
    for i in 0..new_len {
        let x = if new_len == 1 { 0.0 } else { i as f64 * (l - 1) as f64 / (new_len - 1) as f64 };
        let lo = (x.floor() as usize).min(l - 1);
        let hi = (lo + 1).min(l - 1);
        let t = x - lo as f64;
        let (a, b) = (table.row(lo), table.row(hi));
        out.extend(a.iter().zip(b).map(|(a, b)| a + (b - a) * t));
    }
    let mut t = Tensor::new(vec![new_len, d], out)?;
    t.round_to_f32();
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { d: 16, heads: 2, ffn: 32, max_len: 96, stem_channels: 8, ..ModelConfig::desk(20, 16) }
    }

    #[test]
    fn param_count_matches_store() {
        for visual in [VisualVariant::ConvFeatures, VisualVariant::TokenProjection, VisualVariant::PatchProjection] {
            let cfg = ModelConfig { visual, ..small() };
            let m = CrossModalModel::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.store.count(), cfg.param_count(), "{visual:?}");
        }
        let desk = ModelConfig::desk(100, 64);
        assert_eq!(CrossModalModel::new(desk.clone(), 1).unwrap().store.count(), desk.param_count());
    }

    #[test]
    fn full_preset_shape() {
        let p = ModelConfig::full(30522);
        assert_eq!((p.enc_layers, p.dec_layers, p.d, p.ffn, p.max_len), (6, 6, 768, 3072, 512));
        assert_eq!(p.image_tokens(), 256);
        p.validate().unwrap();
    }

    #[test]
    fn visual_lengths() {
        let mut c = ModelConfig::desk(20, 64);
        assert_eq!(c.visual_len(), 64);
        c.visual = VisualVariant::PatchProjection;
        c.patch_size = 8;
        assert_eq!(c.visual_len(), 16);
        c.visual = VisualVariant::TokenProjection;
        assert_eq!(c.visual_len(), 64);
    }

    #[test]
    fn embed_text_empty_and_positional() {
        let m = CrossModalModel::new(small(), 2).unwrap();
        let mut g = Graph::new(&m.store);
        let e = m.embed_text(&mut g, &[]).unwrap();
        assert_eq!(g.tape.shape(e), &[0, 16]);
        let e = m.embed_text(&mut g, &[5, 5]).unwrap();
        let v = g.tape.value(e);
        assert_ne!(&v[..16], &v[16..]);
    }

    #[test]
    fn shift_right_layout() {
        let m = CrossModalModel::new(small(), 2).unwrap();
        assert_eq!(m.shift_right(&[7, 8, 2], Modality::Text), vec![BOS, 7, 8]);
        assert_eq!(m.shift_right(&[3, 0], Modality::Image), vec![36, 23]);
    }

    #[test]
    fn decode_rejects_cross_modal_ids() {
        let m = CrossModalModel::new(small(), 2).unwrap();
        let mut g = Graph::new(&m.store);
        let t = m.embed_text(&mut g, &[4, 5]).unwrap();
        let h = m.encode(&mut g, None, t, None).unwrap();
        assert!(m.decode_train(&mut g, h, &[25], Modality::Text, None).is_err());
        assert!(m.decode_train(&mut g, h, &[4], Modality::Image, None).is_err());
        let logits = m.decode_train(&mut g, h, &[BOS], Modality::Text, None).unwrap();
        assert_eq!(g.tape.shape(logits), &[1, 20]);
    }

    #[test]
    fn interpolation_cases() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 5.0]).unwrap();
        let r = interpolate_positions(&t, 3).unwrap();
        assert_eq!(r.data(), &[0.0, 1.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(interpolate_positions(&t, 2).unwrap(), t);
        assert!(interpolate_positions(&t, 0).is_err());
    }

    #[test]
    fn top_k_zero_temperature_is_greedy() {
        let mut rng = rng_for(0, "t");
        let logits = [0.1, 2.0, -1.0, 1.9];
        assert_eq!(Sampling::TopK { k: 5, temperature: 0.0 }.pick(&logits, &mut rng), 1);
        assert_eq!(Sampling::Greedy.pick(&logits, &mut rng), 1);
        for _ in 0..20 {
            let p = Sampling::TopK { k: 2, temperature: 1.0 }.pick(&logits, &mut rng);
            assert!(p == 1 || p == 3);
        }
    }

    #[test]
    fn archive_round_trip_and_hash_check() {
        let m = CrossModalModel::new(small(), 4).unwrap();
        let a = m.to_archive();
        let back = CrossModalModel::from_archive(&a).unwrap();
        assert_eq!(back.store, m.store);
        let mut tampered = a.clone();
        tampered.set("d", 32);
        assert!(CrossModalModel::from_archive(&tampered).is_err());
    }
}
