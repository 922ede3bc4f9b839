use prefixmm::autodiff::{Tape, Var};
use prefixmm::gradcheck::finite_diff_check;
use prefixmm::rng::rng_indexed;
use prefixmm::selftest::{gradient_checks, GRAD_TOLERANCE};
use prefixmm::tensor::Tensor;
use prefixmm::Result;
use proptest::prelude::*;

fn weighted(tp: &mut Tape, x: Var) -> Result<Var> {
    let n = tp.value(x).len();
    let w = Tensor::new(tp.shape(x).to_vec(), (0..n).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.45).collect())?;
    let w = tp.constant(&w)?;
    let p = tp.mul(x, w)?;
    tp.sum(p)
}

fn randn(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng_indexed(seed, "gradients-test", stream))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn attention_block_gradients(seed in 0u64..10_000, n in 1usize..6, d in 1usize..6, causal: bool) {
        let inputs = vec![randn(&[n, d], seed, 0), randn(&[d, n], seed, 1), randn(&[n, d], seed, 2), randn(&[d], seed, 3), randn(&[d], seed, 4)];
        let r = finite_diff_check(
            |tp, v| {
                let s = tp.matmul(v[0], v[1])?;
                let a = tp.softmax(s, causal)?;
                let h = tp.matmul(a, v[2])?;
                let h = tp.gelu(h)?;
                let h = tp.layer_norm(h, v[3], v[4], 1e-5)?;
                weighted(tp, h)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        prop_assert!(r.max_rel_error < GRAD_TOLERANCE, "rel err {} at {:?}", r.max_rel_error, r.worst);
    }

    #[test]
    fn cross_entropy_over_sliced_heads(seed in 0u64..10_000, rows in 1usize..5, split in 1usize..6, extra in 1usize..5) {
        let width = split + extra;
        let targets: Vec<usize> = (0..=rows).map(|i| (seed as usize + i * 3) % split).collect();
        let inputs = vec![randn(&[rows, 3], seed, 0), randn(&[1, 3], seed, 1), randn(&[3, width], seed, 2)];
        let r = finite_diff_check(
            |tp, v| {
                let both = tp.concat_rows(&[v[0], v[1]])?;
                let logits = tp.matmul(both, v[2])?;
                let text = tp.slice_last(logits, 0, split)?;
                tp.softmax_cross_entropy(text, &targets)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        prop_assert!(r.max_rel_error < GRAD_TOLERANCE, "rel err {}", r.max_rel_error);
    }
}

#[test]
fn selftest_gradients_hold_for_twenty_seeds() {
    for seed in 100..120 {
        for c in gradient_checks(seed, None) {
            assert!(c.passed, "seed {seed}: {c}");
        }
    }
}
