//! Prefix splits, image corruption and the training objectives.
//!
//! * PLM: given the whole image and a caption prefix, predict the caption
//!   suffix. With an empty prefix this is captioning.
//! * PIM: given the whole caption and the unmasked image cells, predict the
//!   VQ tokens of the masked cells. With nothing unmasked this is
//!   text-to-image generation.
//! * Text-to-text: prefix language modeling on text-only documents.
//!
//! Each loss is a per-token mean; the batch loss averages examples within a
//! lane and sums the lanes without weights.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, MASK_FILL};
use crate::model::{CrossModalModel, Modality, Train, VisualInput, VisualVariant};
use crate::params::{Grads, Graph};
use crate::rng::{rng_indexed, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrefixMode {
    /// A fresh ratio from U(0, 1) for every example.
    Dynamic,
    Fixed(f64),
}

impl PrefixMode {
    /// `dynamic` or `fixed:<r>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "dynamic" {
            return Ok(PrefixMode::Dynamic);
        }
        let r = s
            .strip_prefix("fixed:")
            .and_then(|r| r.trim_end_matches('%').parse::<f64>().ok().map(|v| if r.ends_with('%') { v / 100.0 } else { v }))
            .ok_or_else(|| Error::invalid(format!("prefix mode `{s}` is not `dynamic` or `fixed:<r>`")))?;
        if !(0.0..1.0).contains(&r) {
            return Err(Error::invalid(format!("fixed prefix ratio {r} outside [0, 1)")));
        }
        Ok(PrefixMode::Fixed(r))
    }

    pub fn name(&self) -> String {
        match self {
            PrefixMode::Dynamic => "dynamic".into(),
            PrefixMode::Fixed(r) => format!("fixed:{r}"),
        }
    }
}

pub fn sample_prefix_ratio(rng: &mut Rng, mode: PrefixMode) -> Result<f64> {
    match mode {
        PrefixMode::Dynamic => Ok(rng.random::<f64>()),
        PrefixMode::Fixed(r) if (0.0..1.0).contains(&r) => Ok(r),
        PrefixMode::Fixed(r) => Err(Error::invalid(format!("fixed prefix ratio {r} outside [0, 1)"))),
    }
}

/// Boundary between the visible prefix `[0, prefix_len)` and the suffix
/// `[prefix_len, len)` of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrefixSplit {
    pub ratio: f64,
    pub prefix_len: usize,
    pub len: usize,
}

impl PrefixSplit {
    /// `prefix_len = floor(ratio * len)`, clamped so the suffix keeps at
    /// least one position.
    pub fn new(ratio: f64, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("cannot split an empty sequence"));
        }
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::invalid(format!("prefix ratio {ratio} outside [0, 1)")));
        }
        let prefix_len = ((ratio * len as f64).floor() as usize).min(len - 1);
        Ok(PrefixSplit { ratio, prefix_len, len })
    }

    pub fn suffix_len(&self) -> usize {
        self.len - self.prefix_len
    }
}

pub fn split_text(ids: &[usize], split: &PrefixSplit) -> Result<(Vec<usize>, Vec<usize>)> {
    if ids.len() != split.len {
        return Err(Error::shape("split_text", format!("{} ids for a split of {}", ids.len(), split.len)));
    }
    let (p, s) = ids.split_at(split.prefix_len);
    Ok((p.to_vec(), s.to_vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Mask the raster-order tail of the grid.
    Suffix,
    /// Mask a uniformly random subset of cells.
    RandomPatch,
    /// Mask a random contiguous raster span that does not end at the last cell.
    SpanInpaint,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "suffix" => Ok(MaskStrategy::Suffix),
            "mim" | "random" => Ok(MaskStrategy::RandomPatch),
            "inpaint" | "span" => Ok(MaskStrategy::SpanInpaint),
            _ => Err(Error::invalid(format!("unknown mask strategy `{s}` (suffix | mim | inpaint)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Suffix => "suffix",
            MaskStrategy::RandomPatch => "mim",
            MaskStrategy::SpanInpaint => "inpaint",
        }
    }
}

/// Sorted indices of the masked grid cells; always `split.suffix_len()` of them.
pub fn masked_cells(split: &PrefixSplit, strategy: MaskStrategy, rng: &mut Rng) -> Vec<usize> {
    let (m, count) = (split.len, split.suffix_len());
    match strategy {
        MaskStrategy::Suffix => (split.prefix_len..m).collect(),
        MaskStrategy::RandomPatch => {
            let mut cells = sample(rng, m, count).into_vec();
            cells.sort_unstable();
            cells
        }
        MaskStrategy::SpanInpaint => {
            // with nothing kept the span is the whole grid
            let start = if count == m { 0 } else { rng.random_range(0..m - count) };
            (start..start + count).collect()
        }
    }
}

/// Blanks the given cells of a `side x side` grid with mid-gray.
pub fn corrupt_image(img: &ImageTensor, cells: &[usize], side: usize) -> Result<ImageTensor> {
    if side == 0 || img.height() % side != 0 || img.width() % side != 0 {
        return Err(Error::shape(
            "corrupt_image",
            format!("{}x{} image does not tile into a {side}x{side} grid", img.height(), img.width()),
        ));
    }
    let (ch, cw) = (img.height() / side, img.width() / side);
    let mut out = img.clone();
    for &cell in cells {
        if cell >= side * side {
            return Err(Error::IdOutOfRange { id: cell, size: side * side });
        }
        let (gy, gx) = (cell / side, cell % side);
        for y in gy * ch..(gy + 1) * ch {
            for x in gx * cw..(gx + 1) * cw {
                out.set_rgb(y, x, [MASK_FILL; 3]);
            }
        }
    }
    Ok(out)
}

/// Replaces the given cells with the mask id.
pub fn corrupt_tokens(ids: &[usize], cells: &[usize], mask_id: usize) -> Vec<usize> {
    let mut out = ids.to_vec();
    for &c in cells {
        out[c] = mask_id;
    }
    out
}

/// A preprocessed image-caption pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub image: ImageTensor,
    /// VQ tokens of the clean image, raster order.
    pub tokens: Vec<usize>,
    /// Caption ids ending with EOS.
    pub caption: Vec<usize>,
}

fn visual_input<'a>(model: &CrossModalModel, image: &'a ImageTensor, tokens: &'a [usize]) -> VisualInput<'a> {
    match model.config.visual {
        VisualVariant::TokenProjection => VisualInput::Tokens(tokens),
        _ => VisualInput::Pixels(image),
    }
}

/// Teacher-forced logits over a suffix plus the targets they predict.
pub struct SuffixLogits {
    pub logits: Var,
    pub targets: Vec<usize>,
    pub modality: Modality,
}

impl SuffixLogits {
    pub fn loss(&self, g: &mut Graph) -> Result<Var> {
        g.tape.softmax_cross_entropy(self.logits, &self.targets)
    }
}

fn decode_suffix(
    g: &mut Graph,
    model: &CrossModalModel,
    memory: Var,
    targets: Vec<usize>,
    positions: &[usize],
    modality: Modality,
    train: Train,
) -> Result<SuffixLogits> {
    let inputs = model.shift_right(&targets, modality);
    let logits = model.decode_at(g, memory, &inputs, positions, modality, train)?;
    Ok(SuffixLogits { logits, targets, modality })
}

pub fn plm_forward(g: &mut Graph, model: &CrossModalModel, ex: &PairExample, split: &PrefixSplit, mut train: Train) -> Result<SuffixLogits> {
    let (prefix, suffix) = split_text(&ex.caption, split)?;
    let v = model.embed_image(g, visual_input(model, &ex.image, &ex.tokens))?;
    let t = model.embed_text(g, &prefix)?;
    let h = model.encode(g, Some(v), t, train.as_deref_mut())?;
    let positions: Vec<usize> = (split.prefix_len..split.len).collect();
    decode_suffix(g, model, h, suffix, &positions, Modality::Text, train)
}

pub fn pim_forward(g: &mut Graph, model: &CrossModalModel, ex: &PairExample, cells: &[usize], mut train: Train) -> Result<SuffixLogits> {
    if cells.is_empty() {
        return Err(Error::invalid("image modeling needs at least one masked cell"));
    }
    let side = model.config.grid_side;
    let corrupted_img;
    let corrupted_tokens;
    let input = match model.config.visual {
        VisualVariant::TokenProjection => {
            corrupted_tokens = corrupt_tokens(&ex.tokens, cells, model.config.image_vocab);
            VisualInput::Tokens(&corrupted_tokens)
        }
        _ => {
            corrupted_img = corrupt_image(&ex.image, cells, side)?;
            VisualInput::Pixels(&corrupted_img)
        }
    };
    let targets: Vec<usize> = cells.iter().map(|&c| ex.tokens[c]).collect();
    let v = model.embed_image(g, input)?;
    let t = model.embed_text(g, &ex.caption)?;
    let h = model.encode(g, Some(v), t, train.as_deref_mut())?;
    decode_suffix(g, model, h, targets, cells, Modality::Image, train)
}

pub fn text2text_forward(g: &mut Graph, model: &CrossModalModel, ids: &[usize], split: &PrefixSplit, mut train: Train) -> Result<SuffixLogits> {
    let (prefix, suffix) = split_text(ids, split)?;
    let t = model.embed_text(g, &prefix)?;
    let h = model.encode(g, None, t, train.as_deref_mut())?;
    let positions: Vec<usize> = (split.prefix_len..split.len).collect();
    decode_suffix(g, model, h, suffix, &positions, Modality::Text, train)
}

/// Mean cross-entropy over the caption suffix given the whole image and the
/// caption prefix.
pub fn plm_loss(g: &mut Graph, model: &CrossModalModel, ex: &PairExample, split: &PrefixSplit, train: Train) -> Result<Var> {
    plm_forward(g, model, ex, split, train)?.loss(g)
}

/// Mean cross-entropy over the clean-image tokens of the masked cells given
/// the whole caption and the corrupted image.
pub fn pim_loss(g: &mut Graph, model: &CrossModalModel, ex: &PairExample, cells: &[usize], train: Train) -> Result<Var> {
    pim_forward(g, model, ex, cells, train)?.loss(g)
}

/// Prefix language modeling on text alone; the encoder sees no visual block.
pub fn text2text_loss(g: &mut Graph, model: &CrossModalModel, ids: &[usize], split: &PrefixSplit, train: Train) -> Result<Var> {
    text2text_forward(g, model, ids, split, train)?.loss(g)
}

/// Captioning from the image alone, assembled without any split machinery.
pub fn captioning_loss(g: &mut Graph, model: &CrossModalModel, image: VisualInput, caption: &[usize]) -> Result<Var> {
    let visual = model.embed_image(g, image)?;
    let no_text = model.embed_text(g, &[])?;
    let memory = model.encode(g, Some(visual), no_text, None)?;
    let mut inputs = vec![crate::text::BOS];
    inputs.extend_from_slice(&caption[..caption.len() - 1]);
    let logits = model.decode_train(g, memory, &inputs, Modality::Text, None)?;
    g.tape.softmax_cross_entropy(logits, caption)
}

/// Text-to-image from the caption alone: the visual block is a fully
/// gray image (or all mask ids for token projection).
pub fn text_to_image_loss(g: &mut Graph, model: &CrossModalModel, caption: &[usize], image_tokens: &[usize]) -> Result<Var> {
    let c = &model.config;
    let gray = ImageTensor::filled(c.image_size, c.image_size, [MASK_FILL; 3]);
    let masks = vec![c.image_vocab; c.image_tokens()];
    let blank = match c.visual {
        VisualVariant::TokenProjection => VisualInput::Tokens(&masks),
        _ => VisualInput::Pixels(&gray),
    };
    let visual = model.embed_image(g, blank)?;
    let text = model.embed_text(g, caption)?;
    let memory = model.encode(g, Some(visual), text, None)?;
    let mut inputs = vec![c.image_bos()];
    inputs.extend(image_tokens[..image_tokens.len() - 1].iter().map(|&z| z + c.text_vocab));
    let logits = model.decode_train(g, memory, &inputs, Modality::Image, None)?;
    g.tape.softmax_cross_entropy(logits, image_tokens)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub plm: bool,
    pub pim: bool,
    pub t2t: bool,
    pub prefix_mode: PrefixMode,
    pub mask_strategy: MaskStrategy,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { plm: true, pim: true, t2t: true, prefix_mode: PrefixMode::Dynamic, mask_strategy: MaskStrategy::Suffix }
    }
}

impl ObjectiveConfig {
    /// Comma-separated subset of `plm,pim,t2t`.
    pub fn parse_objectives(&mut self, s: &str) -> Result<()> {
        let (mut plm, mut pim, mut t2t) = (false, false, false);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "plm" => plm = true,
                "pim" => pim = true,
                "t2t" => t2t = true,
                _ => return Err(Error::invalid(format!("unknown objective `{part}` (plm | pim | t2t)"))),
            }
        }
        if !(plm || pim || t2t) {
            return Err(Error::invalid("at least one objective must be enabled"));
        }
        (self.plm, self.pim, self.t2t) = (plm, pim, t2t);
        Ok(())
    }

    pub fn objectives_name(&self) -> String {
        let mut v = Vec::new();
        if self.plm {
            v.push("plm");
        }
        if self.pim {
            v.push("pim");
        }
        if self.t2t {
            v.push("t2t");
        }
        v.join(",")
    }
}

/// Per-step component losses. `total` is the plain sum of the enabled parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub plm: f64,
    pub pim: f64,
    pub t2t: Option<f64>,
    pub total: f64,
}

impl BatchLoss {
    fn new(plm: f64, pim: f64, t2t: Option<f64>) -> Self {
        BatchLoss { plm, pim, t2t, total: plm + pim + t2t.unwrap_or(0.0) }
    }
}

/// Splits and masks drawn for one pair. PLM and PIM draw independently.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDraw {
    pub text_split: PrefixSplit,
    pub image_split: PrefixSplit,
    pub cells: Vec<usize>,
}

pub fn draw_pair(ex: &PairExample, cfg: &ObjectiveConfig, rng: &mut Rng) -> Result<PairDraw> {
    let text_split = PrefixSplit::new(sample_prefix_ratio(rng, cfg.prefix_mode)?, ex.caption.len())?;
    let image_split = PrefixSplit::new(sample_prefix_ratio(rng, cfg.prefix_mode)?, ex.tokens.len())?;
    let cells = masked_cells(&image_split, cfg.mask_strategy, rng);
    Ok(PairDraw { text_split, image_split, cells })
}

/// Per-example randomness: `(seed, lane/step, index)`.
pub fn example_rng(seed: u64, lane: &str, step: u64, index: usize) -> Rng {
    rng_indexed(seed, &format!("{lane}/{step}"), index as u64)
}

struct ExampleOut {
    plm: f64,
    pim: f64,
    grads: Grads,
}

fn pair_grads(model: &CrossModalModel, ex: &PairExample, cfg: &ObjectiveConfig, rng: &mut Rng, weight: f64) -> Result<ExampleOut> {
    let draw = draw_pair(ex, cfg, rng)?;
    let mut dropout_rng = rng.clone();
    let mut g = Graph::new(&model.store);
    let mut parts = Vec::new();
    let (mut plm, mut pim) = (0.0, 0.0);
    if cfg.plm {
        let l = plm_loss(&mut g, model, ex, &draw.text_split, Some(&mut dropout_rng))?;
        plm = g.tape.scalar(l);
        parts.push(l);
    }
    if cfg.pim {
        let l = pim_loss(&mut g, model, ex, &draw.cells, Some(&mut dropout_rng))?;
        pim = g.tape.scalar(l);
        parts.push(l);
    }
    let grads = backward_sum(&mut g, &parts, weight)?;
    Ok(ExampleOut { plm, pim, grads })
}

fn text_grads(model: &CrossModalModel, ids: &[usize], cfg: &ObjectiveConfig, rng: &mut Rng, weight: f64) -> Result<ExampleOut> {
    let split = PrefixSplit::new(sample_prefix_ratio(rng, cfg.prefix_mode)?, ids.len())?;
    let mut dropout_rng = rng.clone();
    let mut g = Graph::new(&model.store);
    let l = text2text_loss(&mut g, model, ids, &split, Some(&mut dropout_rng))?;
    let value = g.tape.scalar(l);
    let grads = backward_sum(&mut g, &[l], weight)?;
    Ok(ExampleOut { plm: value, pim: 0.0, grads })
}

fn backward_sum(g: &mut Graph, parts: &[Var], weight: f64) -> Result<Grads> {
    if parts.is_empty() {
        return Ok(Grads::zeros(g.store()));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.tape.add(acc, p)?;
    }
    let loss = g.tape.scale(acc, weight)?;
    g.backward(loss)
}

/// Runs `f` over `0..n` on up to `threads` workers and returns results in
/// index order.
fn fan_out<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// The combined loss and its parameter gradients for one step.
///
/// Examples are processed independently (possibly on several threads) and
/// their gradients are summed in example order, so the result does not
/// depend on the thread count.
pub fn unified_loss(
    model: &CrossModalModel,
    pairs: &[&PairExample],
    texts: &[&[usize]],
    cfg: &ObjectiveConfig,
    seed: u64,
    step: u64,
    threads: usize,
) -> Result<(BatchLoss, Grads)> {
    let pair_lane = cfg.plm || cfg.pim;
    let text_lane = cfg.t2t && !texts.is_empty();
    if (!pair_lane || pairs.is_empty()) && !text_lane {
        return Err(Error::invalid("batch has no examples for the enabled objectives"));
    }
    let mut grads = Grads::zeros(&model.store);
    let (mut plm, mut pim) = (0.0, 0.0);
    if pair_lane && !pairs.is_empty() {
        let w = 1.0 / pairs.len() as f64;
        let outs = fan_out(pairs.len(), threads, |i| {
            pair_grads(model, pairs[i], cfg, &mut example_rng(seed, "pair", step, i), w)
        })?;
        for o in &outs {
            plm += o.plm;
            pim += o.pim;
            grads.add_assign(&o.grads);
        }
        plm /= pairs.len() as f64;
        pim /= pairs.len() as f64;
    }
    let mut t2t = None;
    if text_lane {
        let w = 1.0 / texts.len() as f64;
        let outs = fan_out(texts.len(), threads, |i| {
            text_grads(model, texts[i], cfg, &mut example_rng(seed, "text", step, i), w)
        })?;
        let mut sum = 0.0;
        for o in &outs {
            sum += o.plm;
            grads.add_assign(&o.grads);
        }
        t2t = Some(sum / texts.len() as f64);
    }
    Ok((BatchLoss::new(plm, pim, t2t), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn prefix_mode_parsing() {
        assert_eq!(PrefixMode::parse("dynamic").unwrap(), PrefixMode::Dynamic);
        assert_eq!(PrefixMode::parse("fixed:0.15").unwrap(), PrefixMode::Fixed(0.15));
        assert_eq!(PrefixMode::parse("fixed:50%").unwrap(), PrefixMode::Fixed(0.5));
        assert!(PrefixMode::parse("fixed:1").is_err());
        assert!(PrefixMode::parse("sometimes").is_err());
    }

    #[test]
    fn split_arithmetic() {
        let mut rng = rng_for(0, "x");
        assert_eq!(sample_prefix_ratio(&mut rng, PrefixMode::Fixed(0.0)).unwrap(), 0.0);
        assert!(sample_prefix_ratio(&mut rng, PrefixMode::Fixed(1.0)).is_err());
        assert_eq!(PrefixSplit::new(0.5, 10).unwrap().prefix_len, 5);
        let near_one = PrefixSplit::new(1.0 - 1e-12, 8).unwrap();
        assert_eq!((near_one.prefix_len, near_one.suffix_len()), (7, 1));
        assert!(PrefixSplit::new(0.3, 0).is_err());
        let ids = [4, 5, 6, 7];
        let (p, s) = split_text(&ids, &PrefixSplit::new(0.0, 4).unwrap()).unwrap();
        assert!(p.is_empty());
        assert_eq!(s, ids);
        let (p, s) = split_text(&ids, &PrefixSplit::new(0.6, 4).unwrap()).unwrap();
        assert_eq!([p, s].concat(), ids);
    }

    #[test]
    fn mask_budgets_match() {
        let mut rng = rng_for(1, "m");
        for prefix in 0..64 {
            let split = PrefixSplit { ratio: prefix as f64 / 64.0, prefix_len: prefix, len: 64 };
            for strat in [MaskStrategy::Suffix, MaskStrategy::RandomPatch, MaskStrategy::SpanInpaint] {
                let cells = masked_cells(&split, strat, &mut rng);
                assert_eq!(cells.len(), 64 - prefix);
                assert!(cells.windows(2).all(|w| w[0] < w[1]));
                if strat == MaskStrategy::SpanInpaint && prefix > 0 {
                    assert!(*cells.last().unwrap() < 63);
                }
            }
        }
    }

    #[test]
    fn suffix_corruption_keeps_prefix() {
        let mut img = ImageTensor::filled(8, 8, [0.1, 0.2, 0.9]);
        img.set_rgb(0, 0, [1.0, 0.0, 0.0]);
        let split = PrefixSplit::new(0.5, 4).unwrap();
        let cells = masked_cells(&split, MaskStrategy::Suffix, &mut rng_for(0, "c"));
        assert_eq!(cells, vec![2, 3]);
        let out = corrupt_image(&img, &cells, 2).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(out.get(c, y, x).to_bits(), img.get(c, y, x).to_bits());
                }
            }
        }
        assert!((4..8).all(|y| (0..8).all(|x| out.get(1, y, x) == MASK_FILL)));
        let full = corrupt_image(&img, &[0, 1, 2, 3], 2).unwrap();
        assert_eq!(full, ImageTensor::filled(8, 8, [MASK_FILL; 3]));
    }

    #[test]
    fn objective_list_parsing() {
        let mut c = ObjectiveConfig::default();
        c.parse_objectives("plm").unwrap();
        assert!(c.plm && !c.pim && !c.t2t);
        assert_eq!(c.objectives_name(), "plm");
        assert!(c.parse_objectives("").is_err());
        assert!(c.parse_objectives("plm,xyz").is_err());
    }

    #[test]
    fn fan_out_preserves_order() {
        let v = fan_out(10, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..10).map(|i| i * i).collect::<Vec<_>>());
    }
}
