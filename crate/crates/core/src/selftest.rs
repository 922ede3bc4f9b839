//! Invariant checks shared by `pmm selftest` and the test suites.

use std::fmt;

use rand::Rng as _;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check_with_fault, relative_error, GradCheckReport};
use crate::image::ImageTensor;
use crate::model::{CrossModalModel, ModelConfig, Modality, VisualInput, VisualVariant};
use crate::objectives::{
    captioning_loss, masked_cells, pim_loss, plm_loss, sample_prefix_ratio, text2text_loss, text_to_image_loss,
    unified_loss, MaskStrategy, ObjectiveConfig, PairExample, PrefixMode, PrefixSplit,
};
use crate::optim::Schedule;
use crate::params::Graph;
use crate::rng::{rng_indexed, Rng};
use crate::tensor::Tensor;
use crate::vq::nearest_code;

/// Largest finite-difference relative error accepted at 64 bits.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, detail)) => Check::new(name, ok, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<28} {:<4}  {}", self.name, if self.passed { "ok" } else { "FAIL" }, self.detail)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelftestOptions {
    pub seeds: u64,
    /// Backward rule whose sign is flipped, to confirm the checks bite.
    pub fault: Option<OpKind>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions { seeds: 3, fault: None }
    }
}

type PrimitiveFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces `x` to a scalar through fixed non-uniform weights, so every
/// output element carries a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, x: Var) -> Result<Var> {
    let n: usize = t.shape(x).iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 37 % 11) as f64) * 0.17).collect();
    let w = t.constant_from(t.shape(x).to_vec().as_slice(), w)?;
    let y = t.mul(x, w)?;
    t.sum(y)
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero, for ReLU.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Each differentiable primitive wrapped as a scalar function of random
/// inputs drawn for `seed`.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, PrimitiveFn, Vec<Tensor>)> {
    let mut rng = rng_indexed(seed, "selftest.primitives", 0);
    let r = &mut rng;
    let mut cases: Vec<(&'static str, PrimitiveFn, Vec<Tensor>)> = vec![
        ("add", |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4])]),
        ("sub", |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 3, 2]), rand_tensor(r, &[3, 2])]),
        ("mul", |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4])]),
        ("scale", |t, v| { let y = t.scale(v[0], -1.7)?; weighted_sum(t, y) }, vec![rand_tensor(r, &[5])]),
        ("matmul", |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 2])]),
        ("matmul.batched", |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[2, 4, 3])]),
        ("transpose", |t, v| { let y = t.transpose_last2(v[0])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 3, 4])]),
        ("swap_axes01", |t, v| { let y = t.swap_axes01(v[0])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 3, 2])]),
        ("reshape", |t, v| { let y = t.reshape(v[0], &[3, 4])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 6])]),
        ("softmax", |t, v| { let y = t.softmax(v[0], false)?; weighted_sum(t, y) }, vec![rand_tensor(r, &[3, 5])]),
        ("softmax.causal", |t, v| { let y = t.softmax(v[0], true)?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 4, 4])]),
        ("layer_norm", |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(t, y) }, vec![rand_tensor(r, &[3, 6]), rand_tensor(r, &[6]), rand_tensor(r, &[6])]),
        ("gelu", |t, v| { let y = t.gelu(v[0])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[7])]),
        ("relu", |t, v| { let y = t.relu(v[0])?; weighted_sum(t, y) }, vec![away_from_zero(r, &[8])]),
        ("embedding", |t, v| { let y = t.embedding(v[0], &[2, 0, 2, 3])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[5, 3])]),
        ("conv2d", |t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?; weighted_sum(t, y) }, vec![rand_tensor(r, &[1, 2, 4, 4]), rand_tensor(r, &[3, 2, 3, 3]), rand_tensor(r, &[3])]),
        ("conv2d.strided", |t, v| { let y = t.conv2d(v[0], v[1], None, 2, 1)?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 2, 5, 5]), rand_tensor(r, &[2, 2, 4, 4])]),
        ("upsample2x", |t, v| { let y = t.upsample2x(v[0])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[1, 2, 2, 3])]),
        ("cross_entropy", |t, v| t.softmax_cross_entropy(v[0], &[1, 0, 4]), vec![rand_tensor(r, &[3, 5])]),
        ("concat_rows", |t, v| { let y = t.concat_rows(&[v[0], v[1]])?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[1, 3])]),
        ("slice_last", |t, v| { let y = t.slice_last(v[0], 1, 4)?; weighted_sum(t, y) }, vec![rand_tensor(r, &[2, 5])]),
        ("sum", |t, v| t.sum(v[0]), vec![rand_tensor(r, &[2, 3])]),
        ("mean", |t, v| { let y = t.mul(v[0], v[0])?; t.mean(y) }, vec![rand_tensor(r, &[2, 3])]),
        ("mse", |t, v| t.mse(v[0], v[1]), vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])]),
    ];
    cases.shrink_to_fit();
    cases
}

/// Tiny model used by the composed-loss checks.
pub fn tiny_config(visual: VisualVariant) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d: 8,
        heads: 2,
        ffn: 16,
        max_len: 32,
        text_vocab: 12,
        image_vocab: 6,
        image_size: 8,
        grid_side: 2,
        visual,
        patch_size: 4,
        stem_channels: 4,
        dropout: 0.0,
    }
}

pub fn random_pair(config: &ModelConfig, caption_len: usize, rng: &mut Rng) -> PairExample {
    let s = config.image_size;
    let image = ImageTensor::new(s, s, (0..3 * s * s).map(|_| rng.random::<f64>()).collect()).expect("valid image");
    let tokens = (0..config.image_tokens()).map(|_| rng.random_range(0..config.image_vocab)).collect();
    let mut caption: Vec<usize> = (0..caption_len - 1).map(|_| rng.random_range(4..config.text_vocab)).collect();
    caption.push(crate::text::EOS);
    PairExample { image, tokens, caption }
}

/// Finite differences on model parameters. `per_param` random elements of
/// every parameter tensor are perturbed.
pub fn model_grad_check<F>(model: &CrossModalModel, loss: F, per_param: usize, seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &CrossModalModel) -> Result<Var>,
{
    let h = 1e-6;
    let mut g = Graph::new(&model.store);
    if let Some(kind) = fault {
        g.tape.inject_fault(kind);
    }
    let l = loss(&mut g, model)?;
    let grads = g.backward(l)?;
    drop(g);
    let eval = |m: &CrossModalModel| -> Result<f64> {
        let mut g = Graph::new(&m.store);
        let l = loss(&mut g, m)?;
        Ok(g.tape.scalar(l))
    };
    let mut rng = rng_indexed(seed, "selftest.model_fd", 0);
    let mut work = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    for pi in 0..model.store.len() {
        let n = model.store.params()[pi].tensor.numel();
        for _ in 0..per_param.min(n) {
            let j = rng.random_range(0..n);
            let orig = model.store.params()[pi].tensor.data()[j];
            work.store.params_mut()[pi].tensor.data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.store.params_mut()[pi].tensor.data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.store.params_mut()[pi].tensor.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.all()[pi][j];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report = GradCheckReport { max_rel_error: err, worst: (pi, j), analytic, numeric, checked: report.checked };
            }
        }
    }
    Ok(report)
}

fn grad_detail(r: &GradCheckReport) -> (bool, String) {
    (r.max_rel_error < GRAD_TOLERANCE, format!("max rel err {:.2e} over {} entries", r.max_rel_error, r.checked))
}

/// Primitive and composed-loss gradient checks for one seed.
pub fn gradient_checks(seed: u64, fault: Option<OpKind>) -> Vec<Check> {
    let mut out = Vec::new();
    for (name, f, inputs) in primitive_cases(seed) {
        let r = finite_diff_check_with_fault(f, &inputs, 1e-5, fault).map(|r| grad_detail(&r));
        out.push(Check::from_result(&format!("grad.{name}"), r));
    }
    out.extend(composed_checks(seed, fault));
    out
}

/// Zero biases behind dead ReLU regions leave pre-activations at exactly
/// 0, where central differences see half a slope. Checking at a jittered
/// point keeps every ReLU input off the kink.
fn jittered(mut model: CrossModalModel, seed: u64) -> CrossModalModel {
    let mut rng = rng_indexed(seed, "selftest.jitter", 0);
    for p in model.store.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    model
}

pub fn composed_checks(seed: u64, fault: Option<OpKind>) -> Vec<Check> {
    let mut out = Vec::new();
    for visual in [VisualVariant::PatchProjection, VisualVariant::ConvFeatures, VisualVariant::TokenProjection] {
        let cfg = tiny_config(visual);
        let model = match CrossModalModel::new(cfg.clone(), seed) {
            Ok(m) => jittered(m, seed),
            Err(e) => {
                out.push(Check::new(format!("grad.model.{}", visual.name()), false, format!("error: {e}")));
                continue;
            }
        };
        let mut rng = rng_indexed(seed, "selftest.pair", 0);
        let ex = random_pair(&cfg, 5, &mut rng);
        let text_split = PrefixSplit::new(0.4, ex.caption.len()).expect("valid split");
        let image_split = PrefixSplit::new(0.3, ex.tokens.len()).expect("valid split");
        let cells = masked_cells(&image_split, MaskStrategy::Suffix, &mut rng);
        let doc = ex.caption.clone();
        let name = visual.name();
        let r = model_grad_check(&model, |g, m| plm_loss(g, m, &ex, &text_split, None), 2, seed, fault);
        out.push(Check::from_result(&format!("grad.plm.{name}"), r.map(|r| grad_detail(&r))));
        let r = model_grad_check(&model, |g, m| pim_loss(g, m, &ex, &cells, None), 2, seed, fault);
        out.push(Check::from_result(&format!("grad.pim.{name}"), r.map(|r| grad_detail(&r))));
        if visual == VisualVariant::PatchProjection {
            let r = model_grad_check(&model, |g, m| text2text_loss(g, m, &doc, &text_split, None), 2, seed, fault);
            out.push(Check::from_result("grad.t2t", r.map(|r| grad_detail(&r))));
            let r = model_grad_check(
                &model,
                |g, m| {
                    let a = plm_loss(g, m, &ex, &text_split, None)?;
                    let b = pim_loss(g, m, &ex, &cells, None)?;
                    let c = text2text_loss(g, m, &doc, &text_split, None)?;
                    let ab = g.tape.add(a, b)?;
                    g.tape.add(ab, c)
                },
                2,
                seed,
                fault,
            );
            out.push(Check::from_result("grad.unified", r.map(|r| grad_detail(&r))));
        }
    }
    out
}

/// Decoder logits at positions before `t` do not move when input `t` changes.
pub fn causality_check(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::desk(40, 16);
    let model = CrossModalModel::new(cfg.clone(), seed)?;
    let mut rng = rng_indexed(seed, "selftest.causality", 0);
    let ex = random_pair(&cfg, 6, &mut rng);
    let len = 16;
    let inputs: Vec<usize> = (0..len).map(|_| rng.random_range(4..cfg.text_vocab)).collect();
    let logits_for = |inputs: &[usize]| -> Result<Vec<f64>> {
        let mut g = Graph::new(&model.store);
        let v = model.embed_image(&mut g, VisualInput::Pixels(&ex.image))?;
        let t = model.embed_text(&mut g, &ex.caption)?;
        let h = model.encode(&mut g, Some(v), t, None)?;
        let l = model.decode_train(&mut g, h, inputs, Modality::Text, None)?;
        Ok(g.tape.value(l).to_vec())
    };
    let base = logits_for(&inputs)?;
    let width = cfg.text_vocab;
    for t in 0..len {
        let mut changed = inputs.clone();
        changed[t] = if changed[t] == 4 { 5 } else { 4 };
        let other = logits_for(&changed)?;
        if base[..t * width] != other[..t * width] {
            return Ok((false, format!("position {t} leaked into earlier logits")));
        }
        if base[t * width..] == other[t * width..] {
            return Ok((false, format!("position {t} had no effect at all")));
        }
    }
    Ok((true, format!("{len} positions, earlier logits bit-identical")))
}

/// With a zero prefix ratio, PLM and PIM bit-match the captioning-only and
/// text-to-image-only pipelines.
pub fn degeneracy_check(seed: u64, visual: VisualVariant) -> Result<(bool, String)> {
    let cfg = ModelConfig { visual, ..ModelConfig::desk(30, 16) };
    let model = CrossModalModel::new(cfg.clone(), seed)?;
    let mut rng = rng_indexed(seed, "selftest.degeneracy", 0);
    let ex = random_pair(&cfg, 7, &mut rng);
    let split = PrefixSplit::new(sample_prefix_ratio(&mut rng, PrefixMode::Fixed(0.0))?, ex.caption.len())?;
    let image_split = PrefixSplit::new(0.0, ex.tokens.len())?;
    let cells = masked_cells(&image_split, MaskStrategy::Suffix, &mut rng);

    let mut g = Graph::new(&model.store);
    let l = plm_loss(&mut g, &model, &ex, &split, None)?;
    let plm = g.tape.scalar(l);
    let mut g = Graph::new(&model.store);
    let input = match visual {
        VisualVariant::TokenProjection => VisualInput::Tokens(&ex.tokens),
        _ => VisualInput::Pixels(&ex.image),
    };
    let l = captioning_loss(&mut g, &model, input, &ex.caption)?;
    let cap = g.tape.scalar(l);

    let mut g = Graph::new(&model.store);
    let l = pim_loss(&mut g, &model, &ex, &cells, None)?;
    let pim = g.tape.scalar(l);
    let mut g = Graph::new(&model.store);
    let l = text_to_image_loss(&mut g, &model, &ex.caption, &ex.tokens)?;
    let t2i = g.tape.scalar(l);
    Ok((
        plm.to_bits() == cap.to_bits() && pim.to_bits() == t2i.to_bits(),
        format!("plm {plm:.17} vs {cap:.17}; pim {pim:.17} vs {t2i:.17}"),
    ))
}

/// Every strategy masks exactly the suffix length, for every split of a grid.
pub fn mask_budget_check(seed: u64) -> (bool, String) {
    let mut rng = rng_indexed(seed, "selftest.mask", 0);
    for m in [4usize, 16, 64] {
        for prefix in 0..m {
            let split = PrefixSplit { ratio: prefix as f64 / m as f64, prefix_len: prefix, len: m };
            let counts: Vec<usize> = [MaskStrategy::Suffix, MaskStrategy::RandomPatch, MaskStrategy::SpanInpaint]
                .iter()
                .map(|&s| {
                    let cells = masked_cells(&split, s, &mut rng);
                    let mut dedup = cells.clone();
                    dedup.dedup();
                    if dedup.len() == cells.len() && cells.iter().all(|&c| c < m) {
                        cells.len()
                    } else {
                        usize::MAX
                    }
                })
                .collect();
            if counts.iter().any(|&c| c != m - prefix) {
                return (false, format!("grid {m}, prefix {prefix}: counts {counts:?}"));
            }
        }
    }
    (true, "suffix, mim and inpaint budgets equal on grids 4, 16, 64".into())
}

/// Warmup ramp then decay: piecewise linear, continuous, one peak.
pub fn schedule_check() -> (bool, String) {
    let s = Schedule { peak_lr: 2e-4, warmup_fraction: 0.02 };
    let total = 1000u64;
    let warm = s.warmup_steps(total);
    let lrs: Vec<f64> = (0..=total).map(|t| s.lr_at(t, total)).collect();
    let peaks = lrs.iter().filter(|&&v| v == s.peak_lr).count();
    let linear = (1..total as usize).filter(|&t| t != warm as usize).all(|t| {
        let second = lrs[t + 1] - 2.0 * lrs[t] + lrs[t - 1];
        second.abs() < 1e-18
    });
    let jumps = lrs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let ok = lrs[0] == 0.0 && lrs[warm as usize] == s.peak_lr && lrs[total as usize] == 0.0 && peaks == 1 && linear && jumps <= s.peak_lr / warm as f64 + 1e-18;
    (ok, format!("warmup {warm}, peak count {peaks}, max step change {jumps:.2e}"))
}

/// The logged total equals the sum of its components exactly.
pub fn unified_sum_check(seed: u64) -> Result<(bool, String)> {
    let cfg = tiny_config(VisualVariant::ConvFeatures);
    let model = CrossModalModel::new(cfg.clone(), seed)?;
    let mut rng = rng_indexed(seed, "selftest.unified", 0);
    let pairs: Vec<PairExample> = (0..3).map(|i| random_pair(&cfg, 4 + i, &mut rng)).collect();
    let docs: Vec<Vec<usize>> = pairs.iter().map(|p| p.caption.clone()).collect();
    let pr: Vec<&PairExample> = pairs.iter().collect();
    let dr: Vec<&[usize]> = docs.iter().map(Vec::as_slice).collect();
    for step in 1..=4 {
        let (loss, _) = unified_loss(&model, &pr, &dr, &ObjectiveConfig::default(), seed, step, 1)?;
        if loss.total - (loss.plm + loss.pim + loss.t2t.unwrap_or(0.0)) != 0.0 {
            return Ok((false, format!("step {step}: {loss:?}")));
        }
    }
    Ok((true, "total - (plm + pim + t2t) == 0 on 4 steps".into()))
}

/// `nearest_code` agrees with an exhaustive scan that ranks every code.
pub fn nearest_code_check(seed: u64, count: usize) -> (bool, String) {
    let mut rng = rng_indexed(seed, "selftest.nearest", 0);
    let (k, d) = (64, 16);
    let codebook = Tensor::uniform(&[k, d], -1.0, 1.0, &mut rng);
    for i in 0..count {
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ranked: Vec<(f64, usize)> = (0..k)
            .map(|c| (codebook.row(c).iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum(), c))
            .collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        if nearest_code(&f, &codebook) != ranked[0].1 {
            return (false, format!("feature {i}: disagreement"));
        }
    }
    (true, format!("{count} random features agree with brute force"))
}

/// Dynamic ratios never produce an empty suffix.
pub fn nonempty_suffix_check(seed: u64, samples: usize) -> Result<(bool, String)> {
    let mut rng = rng_indexed(seed, "selftest.suffix", 0);
    for i in 0..samples {
        let r = sample_prefix_ratio(&mut rng, PrefixMode::Dynamic)?;
        let n = 1 + i % 64;
        if PrefixSplit::new(r, n)?.suffix_len() == 0 {
            return Ok((false, format!("ratio {r} on length {n} left no suffix")));
        }
    }
    Ok((true, format!("{samples} dynamic splits, all suffixes nonempty")))
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<Check> {
    let mut checks = Vec::new();
    for seed in 0..opts.seeds.max(1) {
        let grads = gradient_checks(seed, opts.fault);
        if seed == 0 {
            checks.extend(grads);
        } else {
            // later seeds fold into the seed-0 rows
            for (row, g) in checks.iter_mut().zip(grads) {
                if !g.passed && row.passed {
                    *row = Check::new(g.name, false, format!("seed {seed}: {}", g.detail));
                }
            }
        }
    }
    if opts.seeds > 1 {
        for c in checks.iter_mut().filter(|c| c.passed) {
            c.detail = format!("{} ({} seeds)", c.detail, opts.seeds);
        }
    }
    checks.push(Check::from_result("causality.decoder", causality_check(1)));
    for v in [VisualVariant::ConvFeatures, VisualVariant::PatchProjection, VisualVariant::TokenProjection] {
        checks.push(Check::from_result(&format!("degeneracy.{}", v.name()), degeneracy_check(2, v)));
    }
    let (ok, d) = mask_budget_check(3);
    checks.push(Check::new("masking.budget", ok, d));
    let (ok, d) = schedule_check();
    checks.push(Check::new("schedule.shape", ok, d));
    checks.push(Check::from_result("unified.sum", unified_sum_check(4)));
    let (ok, d) = nearest_code_check(5, 1000);
    checks.push(Check::new("vq.nearest_code", ok, d));
    checks.push(Check::from_result("prefix.nonempty_suffix", nonempty_suffix_check(6, 10_000)));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes() {
        let checks = run_selftest(&SelftestOptions { seeds: 1, fault: None });
        let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }

    #[test]
    fn sign_flip_fails_gradient_rows() {
        let checks = gradient_checks(0, Some(OpKind::LayerNorm));
        assert!(!checks.iter().find(|c| c.name == "grad.layer_norm").unwrap().passed);
        assert!(!checks.iter().find(|c| c.name == "grad.plm.patch").unwrap().passed);
        assert!(checks.iter().find(|c| c.name == "grad.gelu").unwrap().passed);
    }
}
