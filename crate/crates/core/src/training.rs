//! Training loop, checkpoints and evaluation metrics.
//!
//! All per-step randomness (batch draws, prefix ratios, masks, dropout) is
//! derived from `(seed, step)`, so a checkpoint needs only the seed and the
//! step counter to resume the exact same stream.

use std::fmt;
use std::path::Path;

use crate::checkpoint::Archive;
use crate::data::{sample_indices, DatasetManifest, Lane, MixtureSpec, SourceKind};
use crate::error::{Error, Result};
use crate::image::load_and_preprocess;
use crate::model::{CrossModalModel, Modality, Sampling, VisualInput, VisualVariant};
use crate::objectives::{
    draw_pair, example_rng, pim_forward, plm_forward, unified_loss, BatchLoss, MaskStrategy, ObjectiveConfig,
    PairExample, PrefixMode, SuffixLogits,
};
use crate::optim::{adamw_step, AdamState, AdamWConfig, Schedule};
use crate::params::Graph;
use crate::rng::{rng_indexed, Rng};
use crate::tensor::Tensor;
use crate::text::{normalize, TextTokenSequence, Vocabulary};
use crate::vq::VqModel;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub batch_size: usize,
    pub text_batch_size: usize,
    pub seed: u64,
    pub objectives: ObjectiveConfig,
    pub threads: usize,
    pub checkpoint_every: u64,
    /// Stop once the mean total loss over this many recent steps falls
    /// below `target_loss`.
    pub stop_window: usize,
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            warmup_fraction: 0.02,
            epochs: 10,
            steps: None,
            batch_size: 16,
            text_batch_size: 16,
            seed: 0,
            objectives: ObjectiveConfig::default(),
            threads: 1,
            checkpoint_every: 0,
            stop_window: 20,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::invalid(format!("warmup fraction {} outside (0, 1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn total_steps(&self, pairs: usize) -> u64 {
        self.steps.unwrap_or_else(|| (self.epochs * pairs).div_ceil(self.batch_size.max(1)) as u64)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { peak_lr: self.lr, warmup_fraction: self.warmup_fraction }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, weight_decay: self.weight_decay, ..Default::default() }
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let o = &self.objectives;
        [
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps", self.steps.map(|s| s.to_string()).unwrap_or_default()),
            ("batch_size", self.batch_size.to_string()),
            ("text_batch_size", self.text_batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("objectives", o.objectives_name()),
            ("prefix_mode", o.prefix_mode.name()),
            ("mask_strategy", o.mask_strategy.name().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("stop_window", self.stop_window.to_string()),
            ("target_loss", self.target_loss.map(|t| t.to_string()).unwrap_or_default()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let opt = |k: &str| a.get(k).filter(|v| !v.is_empty());
        let mut objectives = ObjectiveConfig {
            prefix_mode: PrefixMode::parse(a.get("prefix_mode").unwrap_or("dynamic"))?,
            mask_strategy: MaskStrategy::parse(a.get("mask_strategy").unwrap_or("suffix"))?,
            ..Default::default()
        };
        objectives.parse_objectives(a.get("objectives").unwrap_or("plm,pim,t2t"))?;
        let parse_num = |k: &str, v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Data(format!("checkpoint header `{k}={v}` is malformed")))
        };
        Ok(TrainConfig {
            lr: a.require("lr")?,
            weight_decay: a.require("weight_decay")?,
            beta1: a.require("beta1")?,
            beta2: a.require("beta2")?,
            warmup_fraction: a.require("warmup_fraction")?,
            epochs: a.require("epochs")?,
            steps: opt("steps").map(|v| parse_num("steps", v).map(|s| s as u64)).transpose()?,
            batch_size: a.require("batch_size")?,
            text_batch_size: a.require("text_batch_size")?,
            seed: a.require("seed")?,
            objectives,
            threads: 1,
            checkpoint_every: a.require("checkpoint_every")?,
            stop_window: a.require("stop_window")?,
            target_loss: opt("target_loss").map(|v| parse_num("target_loss", v)).transpose()?,
        })
    }
}

/// Tokenized training data with the source layout needed for mixture
/// sampling.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub pairs: Vec<PairExample>,
    pub texts: Vec<Vec<usize>>,
    /// For each manifest source, the index of its first example in
    /// `pairs` or `texts`.
    offsets: Vec<usize>,
    manifest: Option<DatasetManifest>,
    mixture: Option<MixtureSpec>,
}

impl TrainData {
    /// Data without a manifest: batches draw uniformly from each list.
    pub fn from_examples(pairs: Vec<PairExample>, texts: Vec<Vec<usize>>) -> Self {
        TrainData { pairs, texts, offsets: Vec::new(), manifest: None, mixture: None }
    }

    /// Loads, preprocesses and tokenizes every record of a manifest.
    pub fn from_manifest(
        manifest: DatasetManifest,
        mixture: MixtureSpec,
        vocab: &Vocabulary,
        vq: &VqModel,
        max_text_len: usize,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut texts = Vec::new();
        let mut offsets = Vec::new();
        for source in &manifest.sources {
            match source.kind {
                SourceKind::Text => {
                    offsets.push(texts.len());
                    for r in &source.records {
                        texts.push(TextTokenSequence::caption(&r.caption, vocab, max_text_len)?.ids().to_vec());
                    }
                }
                _ => {
                    offsets.push(pairs.len());
                    for r in &source.records {
                        let path = r.image.as_ref().expect("image sources carry image paths");
                        pairs.push(prepare_pair(&load_and_preprocess(path, vq.config.image_size)?, &r.caption, vocab, vq, max_text_len)?);
                    }
                }
            }
        }
        Ok(TrainData { pairs, texts, offsets, manifest: Some(manifest), mixture: Some(mixture) })
    }

    fn draw(&self, lane: Lane, count: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        use rand::Rng as _;
        let pool = match lane {
            Lane::Pairs => self.pairs.len(),
            Lane::Text => self.texts.len(),
        };
        if pool == 0 || count == 0 {
            return Ok(Vec::new());
        }
        match (&self.manifest, &self.mixture) {
            (Some(m), Some(mix)) => Ok(sample_indices(m, mix, lane, count, rng)?
                .into_iter()
                .map(|(s, r)| self.offsets[s] + r)
                .collect()),
            _ => Ok((0..count).map(|_| rng.random_range(0..pool)).collect()),
        }
    }
}

pub fn prepare_pair(image: &crate::image::ImageTensor, caption: &str, vocab: &Vocabulary, vq: &VqModel, max_text_len: usize) -> Result<PairExample> {
    let caption = TextTokenSequence::caption(caption, vocab, max_text_len)?.ids().to_vec();
    Ok(PairExample { image: image.clone(), tokens: vq.encode_image(image)?.ids, caption })
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: BatchLoss,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t2t = self.loss.t2t.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        write!(
            f,
            "step={} lr={:.6e} plm={:.6} pim={:.6} t2t={} total={:.6}",
            self.step, self.lr, self.loss.plm, self.loss.pim, t2t, self.loss.total
        )
    }
}

pub struct Trainer {
    pub model: CrossModalModel,
    pub state: AdamState,
    pub step: u64,
    pub total_steps: u64,
    pub config: TrainConfig,
    /// Free-form header entries stored as `meta.<key>`.
    pub meta: Vec<(String, String)>,
}

impl Trainer {
    pub fn new(model: CrossModalModel, config: TrainConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(&model.store);
        Ok(Trainer { model, state, step: 0, total_steps, config, meta: Vec::new() })
    }

    /// Batch indices for a step: `(pairs, texts)`.
    pub fn batch_for(&self, data: &TrainData, step: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut rng = rng_indexed(self.config.seed, "batch", step);
        let o = &self.config.objectives;
        let pairs = if o.plm || o.pim { data.draw(Lane::Pairs, self.config.batch_size, &mut rng)? } else { Vec::new() };
        let texts = if o.t2t { data.draw(Lane::Text, self.config.text_batch_size, &mut rng)? } else { Vec::new() };
        Ok((pairs, texts))
    }

    /// Loss and gradients of the next step without updating anything.
    pub fn peek_loss(&self, data: &TrainData) -> Result<(BatchLoss, crate::params::Grads)> {
        let step = self.step + 1;
        let (pi, ti) = self.batch_for(data, step)?;
        let pairs: Vec<&PairExample> = pi.iter().map(|&i| &data.pairs[i]).collect();
        let texts: Vec<&[usize]> = ti.iter().map(|&i| data.texts[i].as_slice()).collect();
        unified_loss(&self.model, &pairs, &texts, &self.config.objectives, self.config.seed, step, self.config.threads)
    }

    /// One optimizer step. Weights stay untouched when anything is non-finite.
    pub fn step_once(&mut self, data: &TrainData) -> Result<StepLog> {
        if self.step >= self.total_steps {
            return Err(Error::invalid(format!("training already finished at step {}", self.step)));
        }
        let (loss, grads) = self.peek_loss(data)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}: {loss:?}", self.step + 1)));
        }
        let step = self.step + 1;
        let lr = self.config.schedule().lr_at(step, self.total_steps);
        adamw_step(&mut self.model.store, &grads, &mut self.state, &self.config.optimizer(), lr)?;
        self.step = step;
        Ok(StepLog { step, lr, loss })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.model.to_archive();
        a.set("kind", "model");
        a.set("step", self.step);
        a.set("total_steps", self.total_steps);
        a.set("adam_step", self.state.step);
        for (k, v) in self.config.entries() {
            a.set(&k, v);
        }
        for (k, v) in &self.meta {
            a.set(&format!("meta.{k}"), v);
        }
        for (p, (m, v)) in self.model.store.params().iter().zip(self.state.m.iter().zip(&self.state.v)) {
            a.push(format!("adam.m.{}", p.name), m.clone());
            a.push(format!("adam.v.{}", p.name), v.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let model = CrossModalModel::from_archive(a)?;
        let config = TrainConfig::from_archive(a)?;
        let mut state = AdamState::new(&model.store);
        for (i, p) in model.store.params().iter().enumerate() {
            let m = a.tensor(&format!("adam.m.{}", p.name))?;
            let v = a.tensor(&format!("adam.v.{}", p.name))?;
            if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                return Err(Error::Data(format!("optimizer moments for {} have the wrong shape", p.name)));
            }
            state.m[i] = m.clone();
            state.v[i] = v.clone();
        }
        state.step = a.require("adam_step")?;
        let meta = a.header.iter().filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone()))).collect();
        Ok(Trainer { model, state, step: a.require("step")?, total_steps: a.require("total_steps")?, config, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename, so an interrupted save never clobbers the last good checkpoint
        let tmp = path.with_extension("partial");
        self.to_archive().save(&tmp)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Runs until `total_steps` or the early-stop criterion. Checkpoints go
    /// to `checkpoint` every `checkpoint_every` steps and at the end; a
    /// numeric failure leaves the last written checkpoint in place.
    pub fn train(&mut self, data: &TrainData, checkpoint: Option<&Path>, mut on_log: impl FnMut(&StepLog) -> Result<()>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.total_steps {
            let log = self.step_once(data)?;
            on_log(&log)?;
            logs.push(log);
            if let Some(path) = checkpoint {
                if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                    self.save(path)?;
                }
            }
            if let Some(target) = self.config.target_loss {
                let w = self.config.stop_window.max(1);
                if logs.len() >= w && logs[logs.len() - w..].iter().map(|l| l.loss.total).sum::<f64>() / (w as f64) < target {
                    break;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(logs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub examples: usize,
    /// Teacher-forced accuracy on caption suffix tokens.
    pub text_accuracy: f64,
    /// Mean suffix cross-entropy on captions (per token).
    pub text_ce: f64,
    pub text_perplexity: f64,
    pub image_accuracy: f64,
    pub image_ce: f64,
    /// Corpus BLEU@4 of greedy captions, when computed.
    pub bleu4: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub prefix_mode: PrefixMode,
    pub mask_strategy: MaskStrategy,
    pub seed: u64,
    pub bleu: bool,
    pub max_caption_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prefix_mode: PrefixMode::Dynamic,
            mask_strategy: MaskStrategy::Suffix,
            seed: 0,
            bleu: true,
            max_caption_len: 32,
        }
    }
}

fn score(g: &Graph, s: &SuffixLogits) -> (usize, f64) {
    let width = g.tape.shape(s.logits)[1];
    let values = g.tape.value(s.logits);
    let mut correct = 0;
    let mut ce = 0.0;
    for (r, &t) in s.targets.iter().enumerate() {
        let row = &values[r * width..(r + 1) * width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - row[t];
        let arg = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        correct += usize::from(arg == t);
    }
    (correct, ce)
}

/// Teacher-forced accuracies and cross-entropies over an evaluation set
/// (token-weighted), plus BLEU@4 of greedy captions.
pub fn evaluate(model: &CrossModalModel, examples: &[PairExample], vocab: Option<&Vocabulary>, cfg: &EvalConfig) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let ocfg = ObjectiveConfig { prefix_mode: cfg.prefix_mode, mask_strategy: cfg.mask_strategy, ..Default::default() };
    let (mut t_ok, mut t_n, mut t_ce) = (0usize, 0usize, 0.0);
    let (mut i_ok, mut i_n, mut i_ce) = (0usize, 0usize, 0.0);
    for (i, ex) in examples.iter().enumerate() {
        let draw = draw_pair(ex, &ocfg, &mut example_rng(cfg.seed, "eval", 0, i))?;
        let mut g = Graph::new(&model.store);
        let text = plm_forward(&mut g, model, ex, &draw.text_split, None)?;
        let (ok, ce) = score(&g, &text);
        t_ok += ok;
        t_ce += ce;
        t_n += text.targets.len();
        let img = pim_forward(&mut g, model, ex, &draw.cells, None)?;
        let (ok, ce) = score(&g, &img);
        i_ok += ok;
        i_ce += ce;
        i_n += img.targets.len();
    }
    let bleu4 = match (cfg.bleu, vocab) {
        (true, Some(vocab)) => {
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for ex in examples {
                let ids = greedy_caption(model, ex, cfg.max_caption_len)?;
                hyps.push(words(&vocab.decode(&ids)?));
                refs.push(words(&vocab.decode(&ex.caption)?));
            }
            Some(bleu4(&hyps, &refs))
        }
        _ => None,
    };
    let text_ce = t_ce / t_n as f64;
    Ok(EvalMetrics {
        examples: examples.len(),
        text_accuracy: t_ok as f64 / t_n as f64,
        text_ce,
        text_perplexity: text_ce.exp(),
        image_accuracy: i_ok as f64 / i_n as f64,
        image_ce: i_ce / i_n as f64,
        bleu4,
    })
}

fn words(s: &str) -> Vec<String> {
    normalize(s).split_whitespace().map(str::to_string).collect()
}

/// Greedy caption ids (without EOS) for an example's image.
pub fn greedy_caption(model: &CrossModalModel, ex: &PairExample, max_len: usize) -> Result<Vec<usize>> {
    let input = match model.config.visual {
        VisualVariant::TokenProjection => VisualInput::Tokens(&ex.tokens),
        _ => VisualInput::Pixels(&ex.image),
    };
    caption_from(model, input, max_len, &Sampling::Greedy, &mut rng_indexed(0, "caption", 0))
}

pub fn caption_from(model: &CrossModalModel, input: VisualInput, max_len: usize, sampling: &Sampling, rng: &mut Rng) -> Result<Vec<usize>> {
    let memory = model.encode_image_only(input)?;
    model.generate(&memory, Modality::Text, max_len, sampling, rng)
}

/// Image token ids painted from a caption (ids ending with EOS or not).
pub fn paint_tokens(model: &CrossModalModel, caption: &[usize], sampling: &Sampling, rng: &mut Rng) -> Result<Vec<usize>> {
    if caption.is_empty() {
        return Err(Error::invalid("caption tokenizes to an empty sequence"));
    }
    let c = &model.config;
    let gray = crate::image::ImageTensor::filled(c.image_size, c.image_size, [crate::image::MASK_FILL; 3]);
    let masks = vec![c.image_vocab; c.image_tokens()];
    let blank = match c.visual {
        VisualVariant::TokenProjection => VisualInput::Tokens(&masks),
        _ => VisualInput::Pixels(&gray),
    };
    let memory: Tensor = model.encode_caption_only(caption, blank)?;
    model.generate(&memory, Modality::Image, c.image_tokens(), sampling, rng)
}

/// Corpus BLEU@4 over whitespace tokens with the standard brevity penalty.
/// Higher-order precisions (n >= 2) use add-one smoothing; unigram precision
/// is left unsmoothed so that hypotheses sharing no word score 0.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    use std::collections::HashMap;
    assert_eq!(hypotheses.len(), references.len(), "one reference per hypothesis");
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            fn grams(s: &[String], n: usize) -> HashMap<&[String], usize> {
                let mut m: HashMap<&[String], usize> = HashMap::new();
                for w in s.windows(n) {
                    *m.entry(w).or_default() += 1;
                }
                m
            }
            let (hg, rg) = (grams(h, n), grams(r, n));
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hg.iter().map(|(g, &c)| c.min(rg.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let s = if i == 0 { 0.0 } else { 1.0 };
            ((matches[i] as f64 + s) / (totals[i] as f64 + s)).ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    bp * log_p.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_limits() {
        let refs = vec![toks("a red square above a blue circle"), toks("a green circle left of a red square")];
        assert_eq!(bleu4(&refs, &refs), 1.0);
        assert_eq!(bleu4(&[vec![], vec![]], &refs), 0.0);
        let disjoint = vec![toks("x y z w v"), toks("p q r s t u")];
        assert!(bleu4(&disjoint, &refs) < 0.01);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let r = vec![toks("a b c d e f g h")];
        let h = vec![toks("a b c d")];
        let expect = (1.0f64 - 8.0 / 4.0).exp();
        assert!((bleu4(&h, &r) - expect).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_through_archive() {
        let mut cfg = TrainConfig { steps: Some(40), target_loss: Some(0.05), ..Default::default() };
        cfg.objectives.parse_objectives("plm,t2t").unwrap();
        cfg.objectives.prefix_mode = PrefixMode::Fixed(0.15);
        let mut a = Archive::new();
        for (k, v) in cfg.entries() {
            a.set(&k, v);
        }
        assert_eq!(TrainConfig::from_archive(&a).unwrap(), cfg);
    }
}
