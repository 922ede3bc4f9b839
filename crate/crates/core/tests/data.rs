use std::fs;

use prefixmm::data::synthetic::{write_corpus, CorpusSpec};
use prefixmm::data::{load_manifest, sample_indices, Lane, MixtureSpec};
use prefixmm::rng::rng_for;

fn corpus() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec { train: 20, heldout: 10, docs: 6, image_size: 16 };
    write_corpus(dir.path(), &spec, 5).unwrap();
    dir
}

#[test]
fn generated_corpus_loads() {
    let dir = corpus();
    let m = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(m.pair_records().count(), 20);
    assert_eq!(m.text_records().count(), 6);
    let h = load_manifest(&dir.path().join("heldout_manifest.tsv")).unwrap();
    assert_eq!(h.pair_records().count(), 10);
    let train: Vec<_> = m.pair_records().map(|r| r.caption.clone()).collect();
    assert!(h.pair_records().all(|r| !train.contains(&r.caption)), "splits overlap");
}

#[test]
fn mixture_frequencies_follow_weights() {
    let dir = corpus();
    let path = dir.path().join("mix.tsv");
    fs::write(&path, "a\tpairs\ttrain.tsv\t20\t3\nb\tpairs\theldout.tsv\t10\t1\ndocs\ttext\tdocs.txt\t6\n").unwrap();
    let m = load_manifest(&path).unwrap();
    let mix = MixtureSpec::from_manifest(&m).unwrap();
    assert_eq!(mix.pairs, [0.75, 0.25, 0.0]);
    assert_eq!(mix.text, [0.0, 0.0, 1.0]);
    let n = 20_000;
    let mut rng = rng_for(0, "mixture-test");
    let draws = sample_indices(&m, &mix, Lane::Pairs, n, &mut rng).unwrap();
    let a = draws.iter().filter(|(s, _)| *s == 0).count() as f64 / n as f64;
    let sigma = (0.75f64 * 0.25 / n as f64).sqrt();
    assert!((a - 0.75).abs() < 4.0 * sigma, "source a drawn {a}");
    // within a source every record is reachable
    let mut seen = [false; 10];
    draws.iter().filter(|(s, _)| *s == 1).for_each(|&(_, r)| seen[r] = true);
    assert!(seen.iter().all(|&b| b));

    let reweighted = MixtureSpec::with_weights(&m, Lane::Pairs, &[0.0, 2.0, 5.0]).unwrap();
    assert_eq!(reweighted.pairs, [0.0, 1.0, 0.0]);
    let draws = sample_indices(&m, &reweighted, Lane::Pairs, 100, &mut rng).unwrap();
    assert!(draws.iter().all(|(s, _)| *s == 1));
    assert!(MixtureSpec::with_weights(&m, Lane::Pairs, &[0.0, 0.0, 1.0]).is_err());
}

#[test]
fn unweighted_sources_default_to_record_counts() {
    let dir = corpus();
    let path = dir.path().join("counts.tsv");
    fs::write(&path, "a\tpairs\ttrain.tsv\t20\nb\tpairs\theldout.tsv\t10\n").unwrap();
    let mix = MixtureSpec::from_manifest(&load_manifest(&path).unwrap()).unwrap();
    assert!((mix.pairs[0] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn manifest_errors_name_the_line() {
    let dir = corpus();
    let path = dir.path().join("bad.tsv");
    fs::write(&path, "a\tpairs\ttrain.tsv\t21\n").unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("21") && err.contains(":1"), "{err}");
    fs::write(&path, "a\tvideo\ttrain.tsv\t20\n").unwrap();
    assert!(load_manifest(&path).unwrap_err().to_string().contains("video"));
}
