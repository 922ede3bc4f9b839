//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs sequentially in a single process (no libtest harness) so the
//! timing criteria are not distorted by parallel tests. Set
//! `PMM_ACCEPTANCE_ONLY=5,7` to run a subset.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::time::Instant;

use prefixmm::data::synthetic::{split_scenes, CorpusSpec, Scene};
use prefixmm::model::{CrossModalModel, ModelConfig, Sampling, VisualVariant};
use prefixmm::objectives::{
    draw_pair, example_rng, sample_prefix_ratio, MaskStrategy, ObjectiveConfig, PairExample, PrefixMode, PrefixSplit,
};
use prefixmm::optim::{adamw_step, AdamState, AdamWConfig, Schedule};
use prefixmm::params::{Grads, ParamStore};
use prefixmm::rng::{rng_for, rng_indexed};
use prefixmm::selftest::{causality_check, degeneracy_check, gradient_checks, nearest_code_check};
use prefixmm::tensor::Tensor;
use prefixmm::text::Vocabulary;
use prefixmm::training::{
    bleu4, evaluate, greedy_caption, paint_tokens, prepare_pair, EvalConfig, StepLog, TrainConfig, TrainData, Trainer,
};
use prefixmm::vq::{train_vq, VqConfig, VqModel};

const CORPUS_SEED: u64 = 11;
const VQ_STEPS: u64 = 300;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

/// Shared state built lazily across criteria.
#[derive(Default)]
struct Ctx {
    logs: Vec<(String, Vec<StepLog>)>,
    corpus: Option<(Vec<Scene>, Vec<Scene>, Vec<Scene>)>,
    corpus_vq: Option<VqModel>,
    vocab: Option<Vocabulary>,
}

impl Ctx {
    fn corpus(&mut self) -> &(Vec<Scene>, Vec<Scene>, Vec<Scene>) {
        self.corpus.get_or_insert_with(|| split_scenes(&CorpusSpec::default(), CORPUS_SEED).unwrap())
    }

    fn vocab(&mut self) -> Vocabulary {
        if self.vocab.is_none() {
            let (train, _, docs) = self.corpus().clone();
            let text: Vec<String> = train.iter().chain(&docs).map(Scene::caption).collect();
            self.vocab = Some(Vocabulary::build(&text, 512).unwrap());
        }
        self.vocab.clone().unwrap()
    }

    /// Tokenizer trained on the training-split images.
    fn corpus_vq(&mut self) -> VqModel {
        if self.corpus_vq.is_none() {
            let imgs: Vec<_> = self.corpus().0.iter().map(|s| s.render(32)).collect();
            self.corpus_vq = Some(train_vq(&imgs, VqConfig::desk(), VQ_STEPS, 2).unwrap().0);
        }
        self.corpus_vq.clone().unwrap()
    }

    fn pairs(&mut self, scenes: &[Scene]) -> Vec<PairExample> {
        let vocab = self.vocab();
        let vq = self.corpus_vq();
        scenes.iter().map(|s| prepare_pair(&s.render(32), &s.caption(), &vocab, &vq, 64).unwrap()).collect()
    }
}

fn run_steps(trainer: &mut Trainer, data: &TrainData, steps: u64) -> Vec<StepLog> {
    (0..steps).map(|_| trainer.step_once(data).unwrap()).collect()
}

fn c1_gradients(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut count = 0;
    for seed in 0..20 {
        for c in gradient_checks(seed, None) {
            count += 1;
            let err: f64 = c.detail.split_whitespace().nth(3).and_then(|v| v.parse().ok()).unwrap_or(f64::INFINITY);
            if err > worst.0 {
                worst = (err, format!("{} seed {seed}", c.name));
            }
            if !c.passed {
                failures.push(format!("{} seed {seed}: {}", c.name, c.detail));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 120.0,
        format!("{count} checks over 20 seeds, worst rel err {:.2e} ({}), {secs:.1}s{}", worst.0, worst.1, if failures.is_empty() { String::new() } else { format!("; failures: {failures:?}") }),
    )
}

fn c2_degeneracy(_: &mut Ctx) -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..5 {
        for v in [VisualVariant::ConvFeatures, VisualVariant::PatchProjection, VisualVariant::TokenProjection] {
            let (ok, detail) = degeneracy_check(seed, v).unwrap();
            if !ok {
                bad.push(format!("{} seed {seed}: {detail}", v.name()));
            }
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "plm == captioning and pim == text-to-image bitwise, 3 embedders x 5 seeds".into() } else { bad.join("; ") })
}

fn c3_unified(ctx: &mut Ctx) -> Outcome {
    // a short run with all three objectives, plus every run logged so far
    let (train, _, docs) = ctx.corpus().clone();
    let pairs = ctx.pairs(&train[..32]);
    let vocab = ctx.vocab();
    let texts: Vec<Vec<usize>> = docs.iter().map(|s| vocab.encode(&s.caption()).into_iter().chain([2]).collect()).collect();
    let data = TrainData::from_examples(pairs, texts);
    let model = CrossModalModel::new(ModelConfig::desk(vocab.len(), 64), 5).unwrap();
    let cfg = TrainConfig { lr: 1e-3, batch_size: 4, text_batch_size: 4, steps: Some(30), seed: 3, ..Default::default() };
    let mut t = Trainer::new(model, cfg, 30).unwrap();
    let logs = run_steps(&mut t, &data, 30);
    ctx.logs.push(("plm+pim+t2t".into(), logs));
    let mut steps = 0;
    let mut bad = Vec::new();
    for (name, logs) in &ctx.logs {
        for l in logs {
            steps += 1;
            let parts = l.loss.plm + l.loss.pim + l.loss.t2t.unwrap_or(0.0);
            if l.loss.total - parts != 0.0 {
                bad.push(format!("{name} step {}", l.step));
            }
        }
    }
    let runs: Vec<&str> = ctx.logs.iter().map(|(n, _)| n.as_str()).collect();
    outcome(bad.is_empty() && steps > 0, format!("{steps} logged steps across runs {runs:?}, {} mismatches", bad.len()))
}

fn c4_causality(_: &mut Ctx) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let (pass, d) = causality_check(seed).unwrap();
        ok &= pass;
        details.push(d);
    }
    outcome(ok, format!("3 random desk models: {}", details[0]))
}

fn c5_overfit(ctx: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let (train, _, _) = ctx.corpus().clone();
    let scenes = &train[..16];
    let imgs: Vec<_> = scenes.iter().map(|s| s.render(32)).collect();
    let (vq, _) = train_vq(&imgs, VqConfig::desk(), VQ_STEPS, 1).unwrap();
    let vocab = ctx.vocab();
    let pairs: Vec<PairExample> = scenes.iter().zip(&imgs).map(|(s, i)| prepare_pair(i, &s.caption(), &vocab, &vq, 64).unwrap()).collect();
    let data = TrainData::from_examples(pairs.clone(), vec![]);
    let model = CrossModalModel::new(ModelConfig::desk(vocab.len(), 64), 3).unwrap();
    let budget = 2000;
    let cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 16,
        steps: Some(budget),
        seed: 7,
        objectives: ObjectiveConfig { t2t: false, ..Default::default() },
        ..Default::default()
    };
    let window = cfg.stop_window;
    let mut t = Trainer::new(model, cfg, budget).unwrap();
    let mut logs: Vec<StepLog> = Vec::new();
    let mut reached = None;
    let (mut captions_ok, mut paints_ok) = (0, 0);
    let exact = |t: &Trainer| {
        let mut rng = rng_for(0, "paint");
        let caps = pairs.iter().filter(|p| greedy_caption(&t.model, p, 32).unwrap() == p.caption[..p.caption.len() - 1]).count();
        let paints = pairs.iter().filter(|p| paint_tokens(&t.model, &p.caption, &Sampling::Greedy, &mut rng).unwrap() == p.tokens).count();
        (caps, paints)
    };
    while t.step < budget {
        logs.push(t.step_once(&data).unwrap());
        if reached.is_none() && logs.len() >= window {
            let mean = logs[logs.len() - window..].iter().map(|l| l.loss.total).sum::<f64>() / window as f64;
            if mean < 0.05 {
                reached = Some((t.step, mean));
            }
        }
        // once the loss target is met, keep going until reproduction is exact
        if reached.is_some() && t.step % 100 == 0 {
            (captions_ok, paints_ok) = exact(&t);
            if captions_ok == 16 && paints_ok == 16 {
                break;
            }
        }
    }
    if reached.is_none() || t.step % 100 != 0 {
        (captions_ok, paints_ok) = exact(&t);
    }
    let secs = start.elapsed().as_secs_f64();
    ctx.logs.push(("overfit".into(), logs));
    let passed = reached.is_some() && captions_ok == 16 && paints_ok == 16 && secs < 900.0;
    let reached = reached.map(|(s, m)| format!("windowed total {m:.4} < 0.05 at step {s}")).unwrap_or_else(|| "loss never below 0.05".into());
    outcome(passed, format!("{reached}; stopped at {}; captions {captions_ok}/16, paintings {paints_ok}/16; {secs:.0}s", t.step))
}

fn c6_synergy(ctx: &mut Ctx) -> Outcome {
    let (train, heldout, _) = ctx.corpus().clone();
    let train_pairs = ctx.pairs(&train);
    let held = ctx.pairs(&heldout);
    let vocab = ctx.vocab();
    let data = TrainData::from_examples(train_pairs, vec![]);
    let steps = 600;
    let eval_cfg = EvalConfig { seed: 99, bleu: false, ..Default::default() };
    let mut results = Vec::new();
    for objectives in ["plm,pim", "plm", "pim"] {
        let mut o = ObjectiveConfig::default();
        o.parse_objectives(objectives).unwrap();
        let cfg = TrainConfig { lr: 1e-3, batch_size: 8, steps: Some(steps), seed: 21, objectives: o, ..Default::default() };
        let model = CrossModalModel::new(ModelConfig::desk(vocab.len(), 64), 9).unwrap();
        let mut t = Trainer::new(model, cfg, steps).unwrap();
        let logs = run_steps(&mut t, &data, steps);
        ctx.logs.push((format!("synergy {objectives}"), logs));
        let m = evaluate(&t.model, &held, None, &eval_cfg).unwrap();
        results.push((objectives, m.text_ce, m.image_ce));
    }
    let (joint, plm, pim) = (results[0], results[1], results[2]);
    let passed = joint.1 < plm.1 && joint.2 < pim.2;
    outcome(
        passed,
        format!(
            "held-out CE text: joint {:.4} vs plm-only {:.4}; image: joint {:.4} vs pim-only {:.4} ({steps} steps each)",
            joint.1, plm.1, joint.2, pim.2
        ),
    )
}

fn c7_masking(ctx: &mut Ctx) -> Outcome {
    let (train, _, _) = ctx.corpus().clone();
    let pairs = ctx.pairs(&train);
    let vocab = ctx.vocab();
    let data = TrainData::from_examples(pairs.clone(), vec![]);
    let steps = 500u64;
    let batch = 4;
    let seed = 31;
    let strategies = [MaskStrategy::Suffix, MaskStrategy::RandomPatch, MaskStrategy::SpanInpaint];
    let mut details = Vec::new();
    let mut passed = true;
    let mut budgets: Vec<Vec<usize>> = Vec::new();
    for strategy in strategies {
        let o = ObjectiveConfig { t2t: false, mask_strategy: strategy, ..Default::default() };
        let cfg = TrainConfig { lr: 1e-3, batch_size: batch, steps: Some(steps), seed, objectives: o, ..Default::default() };
        let model = CrossModalModel::new(ModelConfig::desk(vocab.len(), 64), 4).unwrap();
        let mut t = Trainer::new(model, cfg, steps).unwrap();
        // masked-cell counts exactly as the trainer draws them
        let mut counts = Vec::new();
        for step in 1..=steps {
            let (idx, _) = t.batch_for(&data, step).unwrap();
            for (i, &p) in idx.iter().enumerate() {
                counts.push(draw_pair(&data.pairs[p], &o, &mut example_rng(seed, "pair", step, i)).unwrap().cells.len());
            }
        }
        budgets.push(counts);
        let logs = run_steps(&mut t, &data, steps);
        let finite = logs.iter().all(|l| l.loss.total.is_finite());
        let blocks: Vec<f64> = logs.chunks(100).map(|c| c.iter().map(|l| l.loss.pim).sum::<f64>() / c.len() as f64).collect();
        let monotone = blocks.windows(2).all(|w| w[1] <= w[0]);
        passed &= finite && monotone;
        details.push(format!("{}: pim block means {:?}", strategy.name(), blocks.iter().map(|b| format!("{b:.3}")).collect::<Vec<_>>()));
        ctx.logs.push((format!("masking {}", strategy.name()), logs));
    }
    let equal = budgets.windows(2).all(|w| w[0] == w[1]);
    passed &= equal;
    outcome(passed, format!("budgets equal over {} draws: {equal}; {}", budgets[0].len(), details.join("; ")))
}

fn c8_vq(_: &mut Ctx) -> Outcome {
    let mut rng = rng_for(0, "acceptance.vq");
    let scenes = prefixmm::data::synthetic::sample_scenes(16, &mut rng);
    let imgs: Vec<_> = scenes.iter().map(|s| s.render(32)).collect();
    let (vq, _) = train_vq(&imgs, VqConfig::desk(), VQ_STEPS, 1).unwrap();
    let mse = imgs.iter().map(|i| vq.decode_tokens(&vq.encode_image(i).unwrap()).unwrap().mse(i).unwrap()).sum::<f64>() / 16.0;
    let mut law = true;
    for (size, c) in [(32, 4), (32, 8), (64, 4), (16, 2), (64, 16)] {
        let cfg = VqConfig { image_size: size, compression: c, ..VqConfig::desk() };
        let m = VqModel::new(cfg, 0).unwrap();
        let img = prefixmm::data::synthetic::all_scenes()[7].render(size);
        law &= m.encode_image(&img).unwrap().len() == (size / c) * (size / c);
    }
    let (nearest, nd) = nearest_code_check(8, 1000);
    outcome(mse < 0.01 && law && nearest, format!("16-image MSE {mse:.5}; |Z| = (H/c)^2 for 5 shapes: {law}; {nd}"))
}

fn c9_dynamic(_: &mut Ctx) -> Outcome {
    let mut rng = rng_indexed(0, "acceptance.ratios", 0);
    let n = 10_000;
    let mut ratios: Vec<f64> = (0..n).map(|_| sample_prefix_ratio(&mut rng, PrefixMode::Dynamic).unwrap()).collect();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let mut empty = 0;
    for &r in &ratios {
        for len in 1..=256 {
            if PrefixSplit::new(r, len).unwrap().suffix_len() == 0 {
                empty += 1;
            }
        }
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ks = ratios
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - x).abs()))
        .fold(0.0, f64::max);
    outcome(
        (0.48..=0.52).contains(&mean) && ks < 0.02 && empty == 0,
        format!("mean {mean:.4}, KS {ks:.4}, empty suffixes {empty} over {n} ratios x lengths 1..=256"),
    )
}

fn c10_schedule(_: &mut Ctx) -> Outcome {
    let defaults = TrainConfig::default();
    let s: Schedule = defaults.schedule();
    let total = 50_000;
    let warm = s.warmup_steps(total);
    let ends = s.lr_at(0, total) == 0.0 && s.lr_at(warm, total) == 2e-4 && s.lr_at(total, total) == 0.0;

    let (p0, g, lr, wd, eps, b1, b2) = (0.75_f64, -0.3_f64, 1e-3, 0.01, 1e-8, 0.9, 0.999);
    let mut store = ParamStore::new();
    store.add("w", Tensor::new(vec![1], vec![p0]).unwrap(), true);
    let mut graph = prefixmm::params::Graph::new(&store);
    let w = graph.param(store.id("w").unwrap()).unwrap();
    let scaled = graph.tape.scale(w, g).unwrap();
    let loss = graph.tape.sum(scaled).unwrap();
    let grads: Grads = graph.backward(loss).unwrap();
    drop(graph);
    let mut st = AdamState::new(&store);
    let cfg = AdamWConfig { beta1: b1, beta2: b2, eps, weight_decay: wd, f32_storage: false };
    adamw_step(&mut store, &grads, &mut st, &cfg, lr).unwrap();
    // hand evaluation: m = (1-b1) g, v = (1-b2) g^2, bias-corrected to g and g^2
    let m_hat = ((1.0 - b1) * g) / (1.0 - b1);
    let v_hat = ((1.0 - b2) * g * g) / (1.0 - b2);
    let expect = p0 - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p0);
    let got = store.params()[0].tensor.data()[0];
    outcome(
        ends && (got - expect).abs() < 1e-12,
        format!("lr_at 0/{warm}/{total} = {}/{}/{}; AdamW step {got:.15} vs {expect:.15}", s.lr_at(0, total), s.lr_at(warm, total), s.lr_at(total, total)),
    )
}

fn c11_checkpoint(ctx: &mut Ctx) -> Outcome {
    let (train, _, docs) = ctx.corpus().clone();
    let pairs = ctx.pairs(&train[..24]);
    let vocab = ctx.vocab();
    let texts: Vec<Vec<usize>> = docs.iter().map(|s| vocab.encode(&s.caption()).into_iter().chain([2]).collect()).collect();
    let data = TrainData::from_examples(pairs, texts);
    let cfg = TrainConfig { lr: 1e-3, batch_size: 4, text_batch_size: 2, steps: Some(6), seed: 17, ..Default::default() };
    let fresh = || Trainer::new(CrossModalModel::new(ModelConfig::desk(vocab.len(), 64), 8).unwrap(), cfg.clone(), 6).unwrap();

    let mut straight = fresh();
    let full = run_steps(&mut straight, &data, 4);
    let mut first = fresh();
    run_steps(&mut first, &data, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    let next = resumed.step_once(&data).unwrap();
    let same_loss = next.loss.total.to_bits() == full[3].loss.total.to_bits();
    let same_weights = resumed.model.store.params().iter().zip(straight.model.store.params()).all(|(a, b)| a.tensor.data() == b.tensor.data());
    outcome(same_loss && same_weights, format!("step 4 total {:.17} vs {:.17}; weights identical: {same_weights}", next.loss.total, full[3].loss.total))
}

fn c12_bleu(_: &mut Ctx) -> Outcome {
    let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let refs = vec![w("a red square above a blue circle"), w("a green triangle left of a yellow square")];
    let same = bleu4(&refs, &refs);
    let empty = bleu4(&[vec![], vec![]], &refs);
    let disjoint = bleu4(&[w("one two three four five six"), w("seven eight nine ten eleven twelve thirteen")], &refs);
    outcome(same == 1.0 && empty == 0.0 && disjoint < 0.01, format!("identical {same}, empty {empty}, disjoint {disjoint:.2e}"))
}

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "gradient suite", c1_gradients),
        (2, "degeneracy equalities", c2_degeneracy),
        (4, "decoder causality", c4_causality),
        (5, "overfit run", c5_overfit),
        (6, "objective synergy", c6_synergy),
        (7, "masking-strategy harness", c7_masking),
        (8, "VQ tokenizer", c8_vq),
        (9, "dynamic masking", c9_dynamic),
        (10, "schedule and optimizer", c10_schedule),
        (11, "checkpoint round-trip", c11_checkpoint),
        (12, "BLEU@4", c12_bleu),
        // last, so it audits the logs of every run above
        (3, "unified loss sum", c3_unified),
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("PMM_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    // libtest-style flags (e.g. --list from IDEs) are ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ctx = Ctx::default();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = run(&mut ctx);
        println!(
            "[{}] {id:>2} {name}: {} ({:.1}s)",
            if out.passed { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed().as_secs_f64()
        );
        std::io::stdout().flush().ok();
        if !out.passed {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
