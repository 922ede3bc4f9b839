//! Vector-quantized image tokenizer: a strided conv encoder, a learned
//! codebook and an upsampling conv decoder.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::autodiff::Var;
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;

pub type ImageTokenId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct VqConfig {
    /// Codebook size.
    pub k: usize,
    /// Spatial compression rate, a power of two.
    pub compression: usize,
    pub code_dim: usize,
    /// Commitment weight.
    pub beta: f64,
    pub image_size: usize,
    /// Channel width of the conv stacks.
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Codes unused for this many steps are re-seeded.
    pub reseed_after: u64,
}

impl VqConfig {
    pub fn desk() -> Self {
        VqConfig {
            k: 64,
            compression: 4,
            code_dim: 16,
            beta: 0.25,
            image_size: 32,
            hidden: 32,
            lr: 2e-3,
            batch_size: 8,
            reseed_after: 1000,
        }
    }

    /// 256x256 images, 16x compression, 1024 codes.
    pub fn full() -> Self {
        VqConfig { k: 1024, compression: 16, code_dim: 256, image_size: 256, hidden: 128, ..Self::desk() }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.compression
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn stages(&self) -> usize {
        self.compression.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!("codebook needs at least 2 codes, got {}", self.k)));
        }
        if !self.compression.is_power_of_two() || self.compression < 2 {
            return Err(Error::invalid(format!("compression {} is not a power of two >= 2", self.compression)));
        }
        if self.image_size == 0 || self.image_size % self.compression != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by compression {}",
                self.image_size, self.compression
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!("commitment weight must be positive, got {}", self.beta)));
        }
        if self.code_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::invalid("code_dim, hidden and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Token ids of one image in raster order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageTokenGrid {
    pub ids: Vec<ImageTokenId>,
    pub side: usize,
}

impl ImageTokenGrid {
    pub fn new(ids: Vec<ImageTokenId>, side: usize, k: usize) -> Result<Self> {
        if ids.len() != side * side {
            return Err(Error::shape("ImageTokenGrid", format!("{} ids for a {side}x{side} grid", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::IdOutOfRange { id: bad, size: k });
        }
        Ok(ImageTokenGrid { ids, side })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Index of the code closest to `feature` in squared Euclidean distance;
/// ties go to the lowest id.
pub fn nearest_code(feature: &[f64], codebook: &Tensor) -> ImageTokenId {
    let d = codebook.shape()[1];
    debug_assert_eq!(feature.len(), d);
    let mut best = (0, f64::INFINITY);
    for (i, code) in codebook.data().chunks(d).enumerate() {
        let dist: f64 = code.iter().zip(feature).map(|(c, f)| (c - f) * (c - f)).sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best.0
}

#[derive(Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone)]
pub struct VqModel {
    pub config: VqConfig,
    pub store: ParamStore,
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    codebook: ParamId,
}

/// Intermediate values of one training forward pass.
pub struct VqForward {
    /// Encoder output as rows `[B*m, d_c]`.
    pub z_e: Var,
    /// Quantized rows.
    pub z_q: Var,
    /// Straight-through rows: value of `z_q`, gradient path of `z_e`.
    pub z_st: Var,
    pub recon: Var,
    pub recon_loss: Var,
    pub codebook_loss: Var,
    pub commit_loss: Var,
    pub total: Var,
    pub ids: Vec<ImageTokenId>,
}

fn conv_param(store: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut Rng) -> ConvLayer {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let w = store.add(format!("{name}.w"), Tensor::randn(&[out_c, in_c, k, k], std, rng), true);
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_c]), false);
    ConvLayer { w, b }
}

impl VqModel {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "vq.init");
        let mut store = ParamStore::new();
        let h = config.hidden;
        let mut encoder = Vec::new();
        for s in 0..config.stages() {
            let in_c = if s == 0 { 3 } else { h };
            encoder.push(conv_param(&mut store, &format!("enc.{s}"), h, in_c, 4, &mut rng));
        }
        encoder.push(conv_param(&mut store, "enc.out", config.code_dim, h, 3, &mut rng));
        let mut decoder = vec![conv_param(&mut store, "dec.in", h, config.code_dim, 3, &mut rng)];
        for s in 0..config.stages() {
            decoder.push(conv_param(&mut store, &format!("dec.{s}"), h, h, 3, &mut rng));
        }
        decoder.push(conv_param(&mut store, "dec.out", 3, h, 3, &mut rng));
        let codebook = store.add("codebook", Tensor::randn(&[config.k, config.code_dim], 1.0, &mut rng), false);
        Ok(VqModel { config, store, encoder, decoder, codebook })
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get(self.codebook)
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let c = self.config.compression;
        if img.height() % c != 0 || img.width() % c != 0 {
            return Err(Error::shape(
                "encode_image",
                format!("{}x{} image is not divisible by compression {c}", img.height(), img.width()),
            ));
        }
        if img.height() != self.config.image_size || img.width() != self.config.image_size {
            return Err(Error::shape(
                "encode_image",
                format!(
                    "{}x{} image, tokenizer expects {}x{}",
                    img.height(),
                    img.width(),
                    self.config.image_size,
                    self.config.image_size
                ),
            ));
        }
        Ok(())
    }

    fn stack(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            self.check_image(img)?;
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![images.len(), 3, s, s], data)
    }

    /// Encoder features as rows `[B*m, d_c]` in raster order per image.
    fn encode_rows(&self, g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            let (w, b) = (g.param(layer.w)?, g.param(layer.b)?);
            h = if i == last {
                g.tape.conv2d(h, w, Some(b), 1, 1)?
            } else {
                let y = g.tape.conv2d(h, w, Some(b), 2, 1)?;
                g.tape.relu(y)?
            };
        }
        let (dc, m) = (self.config.code_dim, self.config.tokens_per_image());
        let flat = g.tape.reshape(h, &[batch, dc, m])?;
        let rows = g.tape.transpose_last2(flat)?;
        g.tape.reshape(rows, &[batch * m, dc])
    }

    /// Decoder from rows `[B*m, d_c]` to unclipped pixels `[B, 3, H, W]`.
    fn decode_rows(&self, g: &mut Graph, rows: Var, batch: usize) -> Result<Var> {
        let (dc, side) = (self.config.code_dim, self.config.grid_side());
        let r = g.tape.reshape(rows, &[batch, side * side, dc])?;
        let t = g.tape.transpose_last2(r)?;
        let mut h = g.tape.reshape(t, &[batch, dc, side, side])?;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            if i > 0 && i < last {
                h = g.tape.upsample2x(h)?;
            }
            let (w, b) = (g.param(layer.w)?, g.param(layer.b)?);
            h = g.tape.conv2d(h, w, Some(b), 1, 1)?;
            if i < last {
                h = g.tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn quantize(&self, features: &[f64]) -> Vec<ImageTokenId> {
        features.chunks(self.config.code_dim).map(|f| nearest_code(f, self.codebook())).collect()
    }

    /// Full training forward pass over a batch.
    pub fn forward(&self, g: &mut Graph, images: &[&ImageTensor]) -> Result<VqForward> {
        let batch = images.len();
        let x = g.tape.constant(&self.stack(images)?)?;
        let z_e = self.encode_rows(g, x, batch)?;
        let ids = self.quantize(g.tape.value(z_e));
        let cb = g.param(self.codebook)?;
        let z_q = g.tape.embedding(cb, &ids)?;

        let shape = g.tape.shape(z_e).to_vec();
        let z_e_const = g.tape.constant_from(&shape, g.tape.value(z_e).to_vec())?;
        let z_q_const = g.tape.constant_from(&shape, g.tape.value(z_q).to_vec())?;
        let delta: Vec<f64> = g.tape.value(z_q).iter().zip(g.tape.value(z_e)).map(|(q, e)| q - e).collect();
        let delta = g.tape.constant_from(&shape, delta)?;
        let z_st = g.tape.add(z_e, delta)?;

        let recon = self.decode_rows(g, z_st, batch)?;
        let target = g.tape.constant(&self.stack(images)?)?;
        let recon_loss = g.tape.mse(recon, target)?;
        let codebook_loss = g.tape.mse(z_q, z_e_const)?;
        let commit_loss = g.tape.mse(z_e, z_q_const)?;
        let commit = g.tape.scale(commit_loss, self.config.beta)?;
        let partial = g.tape.add(recon_loss, codebook_loss)?;
        let total = g.tape.add(partial, commit)?;
        Ok(VqForward { z_e, z_q, z_st, recon, recon_loss, codebook_loss, commit_loss, total, ids })
    }

    /// Continuous encoder features `[m, d_c]` of one image.
    pub fn features(&self, img: &ImageTensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let x = g.tape.constant(&self.stack(&[img])?)?;
        let rows = self.encode_rows(&mut g, x, 1)?;
        Ok(g.tape.to_tensor(rows))
    }

    pub fn encode_image(&self, img: &ImageTensor) -> Result<ImageTokenGrid> {
        let feats = self.features(img)?;
        ImageTokenGrid::new(self.quantize(feats.data()), self.config.grid_side(), self.config.k)
    }

    pub fn decode_tokens(&self, grid: &ImageTokenGrid) -> Result<ImageTensor> {
        let m = self.config.tokens_per_image();
        if grid.ids.len() != m {
            return Err(Error::shape("decode_tokens", format!("{} tokens, tokenizer emits {m}", grid.ids.len())));
        }
        let mut g = Graph::new(&self.store);
        let cb = g.param(self.codebook)?;
        let rows = g.tape.embedding(cb, &grid.ids)?;
        let out = self.decode_rows(&mut g, rows, 1)?;
        let s = self.config.image_size;
        ImageTensor::new(s, s, g.tape.value(out).to_vec())
    }

    /// Fraction of cells where `encode(decode(z)) == z`.
    pub fn fixed_point_rate(&self, grids: &[ImageTokenGrid]) -> Result<f64> {
        let (mut same, mut total) = (0usize, 0usize);
        for grid in grids {
            let again = self.encode_image(&self.decode_tokens(grid)?)?;
            same += grid.ids.iter().zip(&again.ids).filter(|(a, b)| a == b).count();
            total += grid.len();
        }
        Ok(if total == 0 { 1.0 } else { same as f64 / total as f64 })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set("kind", "vq");
        for (k, v) in self.config_entries() {
            a.set(&k, v);
        }
        for p in self.store.params() {
            a.push(p.name.clone(), p.tensor.clone());
        }
        a
    }

    pub fn config_entries(&self) -> Vec<(String, String)> {
        let c = &self.config;
        [
            ("k", c.k.to_string()),
            ("compression", c.compression.to_string()),
            ("code_dim", c.code_dim.to_string()),
            ("beta", c.beta.to_string()),
            ("image_size", c.image_size.to_string()),
            ("hidden", c.hidden.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.get("kind") != Some("vq") {
            return Err(Error::Data("checkpoint is not an image tokenizer".into()));
        }
        let config = VqConfig {
            k: a.require("k")?,
            compression: a.require("compression")?,
            code_dim: a.require("code_dim")?,
            beta: a.require("beta")?,
            image_size: a.require("image_size")?,
            hidden: a.require("hidden")?,
            ..VqConfig::desk()
        };
        let mut model = VqModel::new(config, 0)?;
        let names: Vec<String> = model.store.params().iter().map(|p| p.name.clone()).collect();
        for name in names {
            model.store.replace(&name, a.tensor(&name)?.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqStepLog {
    pub step: u64,
    pub recon_mse: f64,
    pub codebook: f64,
    pub commit: f64,
    pub reseeded: usize,
}

/// Trains a tokenizer from scratch. The codebook is initialized from
/// encoder outputs of the first batch.
pub fn train_vq(images: &[ImageTensor], config: VqConfig, steps: u64, seed: u64) -> Result<(VqModel, Vec<VqStepLog>)> {
    train_vq_with(images, config, steps, seed, |_| Ok(()))
}

pub fn train_vq_with(
    images: &[ImageTensor],
    config: VqConfig,
    steps: u64,
    seed: u64,
    mut on_step: impl FnMut(&VqStepLog) -> Result<()>,
) -> Result<(VqModel, Vec<VqStepLog>)> {
    if images.is_empty() {
        return Err(Error::Data("image tokenizer needs at least one training image".into()));
    }
    let mut model = VqModel::new(config, seed)?;
    let mut state = AdamState::new(&model.store);
    let opt = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let mut rng = rng_for(seed, "vq.batches");
    let k = model.config.k;
    let mut last_used = vec![0u64; k];
    let mut logs = Vec::with_capacity(steps as usize);
    let all: Vec<&ImageTensor> = images.iter().collect();

    for step in 1..=steps {
        let batch: Vec<&ImageTensor> = if all.len() <= model.config.batch_size {
            all.clone()
        } else {
            all.choose_multiple(&mut rng, model.config.batch_size).copied().collect()
        };
        if step == 1 {
            init_codebook(&mut model, &batch, &mut rng)?;
        }
        let (grads, log, features) = {
            let mut g = Graph::new(&model.store);
            let fwd = model.forward(&mut g, &batch)?;
            let log = VqStepLog {
                step,
                recon_mse: g.tape.scalar(fwd.recon_loss),
                codebook: g.tape.scalar(fwd.codebook_loss),
                commit: g.tape.scalar(fwd.commit_loss),
                reseeded: 0,
            };
            for &id in &fwd.ids {
                last_used[id] = step;
            }
            let features = g.tape.to_tensor(fwd.z_e);
            (g.backward(fwd.total)?, log, features)
        };
        adamw_step(&mut model.store, &grads, &mut state, &opt, model.config.lr)?;
        let reseeded = reseed_dead_codes(&mut model, &mut state, &mut last_used, &features, step, &mut rng);
        let log = VqStepLog { reseeded, ..log };
        on_step(&log)?;
        logs.push(log);
    }
    Ok((model, logs))
}

fn init_codebook(model: &mut VqModel, batch: &[&ImageTensor], rng: &mut Rng) -> Result<()> {
    let mut rows = Vec::new();
    for img in batch {
        let f = model.features(img)?;
        rows.extend(f.data().chunks(model.config.code_dim).map(|r| r.to_vec()));
    }
    let (k, d) = (model.config.k, model.config.code_dim);
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let row = &rows[rng.random_range(0..rows.len())];
        // a small jitter keeps duplicate picks apart
        data.extend(row.iter().map(|v| v + 1e-3 * (rng.random::<f64>() - 0.5)));
    }
    let cb = model.codebook;
    let mut t = Tensor::new(vec![k, d], data)?;
    t.round_to_f32();
    *model.store.get_mut(cb) = t;
    Ok(())
}

fn reseed_dead_codes(
    model: &mut VqModel,
    state: &mut AdamState,
    last_used: &mut [u64],
    features: &Tensor,
    step: u64,
    rng: &mut Rng,
) -> usize {
    let window = model.config.reseed_after;
    if window == 0 {
        return 0;
    }
    let d = model.config.code_dim;
    let n_rows = features.numel() / d;
    let cb = model.codebook;
    let mut count = 0;
    for code in 0..model.config.k {
        if step - last_used[code] < window {
            continue;
        }
        let r = rng.random_range(0..n_rows);
        let src: Vec<f64> = features.data()[r * d..(r + 1) * d].iter().map(|v| *v as f32 as f64).collect();
        model.store.get_mut(cb).data_mut()[code * d..(code + 1) * d].copy_from_slice(&src);
        state.m[cb.index()].data_mut()[code * d..(code + 1) * d].fill(0.0);
        state.v[cb.index()].data_mut()[code * d..(code + 1) * d].fill(0.0);
        last_used[code] = step;
        count += 1;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VqConfig {
        VqConfig { k: 8, image_size: 8, hidden: 4, code_dim: 3, ..VqConfig::desk() }
    }

    #[test]
    fn nearest_code_basis_and_ties() {
        let basis = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(nearest_code(&[0.0, 0.0, 0.0, 1.0], &basis), 3);
        // equidistant from e_1 and e_2
        assert_eq!(nearest_code(&[0.0, 0.5, 0.5, 0.0], &basis), 1);
    }

    #[test]
    fn token_count_and_shapes() {
        let m = VqModel::new(VqConfig::desk(), 1).unwrap();
        let img = ImageTensor::filled(32, 32, [0.2, 0.4, 0.6]);
        let grid = m.encode_image(&img).unwrap();
        assert_eq!(grid.len(), 64);
        assert!(grid.ids.iter().all(|&i| i < 64));
        assert_eq!(grid, m.encode_image(&img).unwrap());
        let out = m.decode_tokens(&grid).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_preset_grid() {
        let c = VqConfig::full();
        assert_eq!(c.tokens_per_image(), 256);
        assert_eq!(c.grid_side(), 16);
    }

    #[test]
    fn rejects_bad_dims_and_lengths() {
        let m = VqModel::new(tiny(), 1).unwrap();
        assert!(m.encode_image(&ImageTensor::filled(6, 6, [0.0; 3])).is_err());
        assert!(m.decode_tokens(&ImageTokenGrid { ids: vec![0; 3], side: 2 }).is_err());
        assert!(matches!(
            m.decode_tokens(&ImageTokenGrid { ids: vec![99; 4], side: 2 }),
            Err(Error::IdOutOfRange { .. })
        ));
        assert!(VqConfig { compression: 3, ..tiny() }.validate().is_err());
        assert!(VqConfig { k: 1, ..tiny() }.validate().is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let imgs = vec![ImageTensor::filled(8, 8, [0.5; 3])];
        let (trained, logs) = train_vq(&imgs, tiny(), 0, 7).unwrap();
        assert!(logs.is_empty());
        assert_eq!(trained.store, VqModel::new(tiny(), 7).unwrap().store);
        assert!(train_vq(&[], tiny(), 1, 7).is_err());
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let m = VqModel::new(tiny(), 3).unwrap();
        let img = ImageTensor::new(8, 8, (0..192).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let mut g = Graph::new(&m.store);
        let fwd = m.forward(&mut g, &[&img]).unwrap();
        assert_eq!(g.tape.value(fwd.z_st), g.tape.value(fwd.z_q));
        g.tape.backward(fwd.recon_loss).unwrap();
        assert_eq!(g.tape.grad(fwd.z_e).unwrap(), g.tape.grad(fwd.z_st).unwrap());
    }

    #[test]
    fn archive_round_trip() {
        let m = VqModel::new(tiny(), 5).unwrap();
        let back = VqModel::from_archive(&m.to_archive()).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.config, m.config);
    }
}
