//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three read-only views of the training machinery: which image cells a
//! masking strategy hides, the learning-rate schedule, and the distribution
//! of sampled prefix ratios.

use prefixmm::objectives::{masked_cells, sample_prefix_ratio, MaskStrategy, PrefixMode, PrefixSplit};
use prefixmm::optim::Schedule;
use prefixmm::rng::rng_for;
use wasm_bindgen::prelude::*;

fn js_err(e: prefixmm::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One byte per grid cell in raster order: 1 if masked, 0 if visible.
/// `strategy` is `suffix`, `mim` or `inpaint`.
pub fn mask_cells(grid_side: usize, ratio: f64, strategy: &str, seed: u64) -> prefixmm::Result<Vec<u8>> {
    let strategy = MaskStrategy::parse(strategy)?;
    let m = grid_side * grid_side;
    let split = PrefixSplit::new(ratio, m)?;
    let mut rng = rng_for(seed, "web.mask");
    let mut out = vec![0u8; m];
    for c in masked_cells(&split, strategy, &mut rng) {
        out[c] = 1;
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn mask_preview(grid_side: usize, ratio: f64, strategy: &str, seed: u64) -> Result<Vec<u8>, JsError> {
    mask_cells(grid_side, ratio, strategy, seed).map_err(js_err)
}

/// Learning rate at steps `0..=total`.
#[wasm_bindgen]
pub fn lr_curve(peak_lr: f64, warmup_fraction: f64, total_steps: u64) -> Vec<f64> {
    let s = Schedule { peak_lr, warmup_fraction };
    (0..=total_steps).map(|t| s.lr_at(t, total_steps)).collect()
}

/// Counts of `samples` prefix ratios in `bins` equal bins over [0, 1).
/// `mode` is `dynamic` or `fixed:<r>`.
pub fn ratio_histogram(samples: usize, bins: usize, mode: &str, seed: u64) -> prefixmm::Result<Vec<u32>> {
    let mode = PrefixMode::parse(mode)?;
    let bins = bins.max(1);
    let mut rng = rng_for(seed, "web.ratios");
    let mut counts = vec![0u32; bins];
    for _ in 0..samples {
        let r = sample_prefix_ratio(&mut rng, mode)?;
        counts[((r * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(counts)
}

#[wasm_bindgen]
pub fn prefix_histogram(samples: usize, bins: usize, mode: &str, seed: u64) -> Result<Vec<u32>, JsError> {
    ratio_histogram(samples, bins, mode, seed).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_hide_the_suffix_budget() {
        for strategy in ["suffix", "mim", "inpaint"] {
            let m = mask_cells(8, 0.25, strategy, 1).unwrap();
            assert_eq!(m.iter().filter(|&&b| b == 1).count(), 48, "{strategy}");
        }
        let suffix = mask_cells(4, 0.5, "suffix", 0).unwrap();
        assert_eq!(suffix, [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert!(mask_cells(4, 0.5, "zigzag", 0).is_err());
    }

    #[test]
    fn curve_endpoints() {
        let c = lr_curve(2e-4, 0.1, 100);
        assert_eq!(c.len(), 101);
        assert_eq!((c[0], c[10], c[100]), (0.0, 2e-4, 0.0));
    }

    #[test]
    fn histogram_totals() {
        let h = ratio_histogram(1000, 10, "dynamic", 3).unwrap();
        assert_eq!(h.iter().sum::<u32>(), 1000);
        let fixed = ratio_histogram(50, 4, "fixed:0.3", 3).unwrap();
        assert_eq!(fixed, [0, 50, 0, 0]);
    }
}
