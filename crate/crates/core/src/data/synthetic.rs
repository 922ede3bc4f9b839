//! Procedurally rendered two-object scenes with templated captions,
//! e.g. "a red square above a blue circle".
//!
//! Only the relations `above` and `left of` are generated, so every image
//! has exactly one caption and every caption exactly one image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Above,
    LeftOf,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const RELATIONS: [Relation; 2] = [Relation::Above, Relation::LeftOf];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the unit-square point (u, v) in [-1, 1]^2 is inside the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Circle => u * u + v * v <= 0.9 * 0.9,
            Shape::Triangle => v <= 0.85 && v >= -0.85 && u.abs() <= (v + 0.85) / 1.7 * 0.9,
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

impl Relation {
    pub fn words(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::LeftOf => "left of",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scene {
    pub first: Object,
    pub relation: Relation,
    pub second: Object,
}

pub const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

impl Scene {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} a {} {}",
            self.first.color.word(),
            self.first.shape.word(),
            self.relation.words(),
            self.second.color.word(),
            self.second.shape.word()
        )
    }

    /// Renders at `size x size`; the two objects occupy opposite halves.
    pub fn render(&self, size: usize) -> ImageTensor {
        let mut img = ImageTensor::filled(size, size, BACKGROUND);
        let s = size as f64;
        let (c1, c2) = match self.relation {
            Relation::Above => ((0.5 * s, 0.25 * s), (0.5 * s, 0.75 * s)),
            Relation::LeftOf => ((0.25 * s, 0.5 * s), (0.75 * s, 0.5 * s)),
        };
        let radius = 0.2 * s;
        for (obj, (cx, cy)) in [(self.first, c1), (self.second, c2)] {
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 + 0.5 - cx) / radius;
                    let v = (y as f64 + 0.5 - cy) / radius;
                    if obj.shape.covers(u, v) {
                        img.set_rgb(y, x, obj.color.rgb());
                    }
                }
            }
        }
        img
    }
}

/// Every distinct scene, in a fixed order.
pub fn all_scenes() -> Vec<Scene> {
    let objects: Vec<Object> =
        COLORS.iter().flat_map(|&color| SHAPES.iter().map(move |&shape| Object { color, shape })).collect();
    let mut out = Vec::new();
    for &first in &objects {
        for &relation in &RELATIONS {
            for &second in &objects {
                if first != second {
                    out.push(Scene { first, relation, second });
                }
            }
        }
    }
    out
}

/// `count` distinct scenes drawn without replacement.
pub fn sample_scenes<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<Scene> {
    let mut all = all_scenes();
    all.shuffle(rng);
    all.truncate(count);
    all
}

/// Images whose grid cells of side `cell` are each pure black or pure white.
/// Returns the images and, per image, the raster-order cell brightness.
pub fn black_white_cells<R: Rng + ?Sized>(count: usize, size: usize, cell: usize, rng: &mut R) -> Vec<(ImageTensor, Vec<bool>)> {
    let grid = size / cell;
    (0..count)
        .map(|_| {
            let bright: Vec<bool> = (0..grid * grid).map(|_| rng.random_bool(0.5)).collect();
            let mut img = ImageTensor::filled(size, size, [0.0; 3]);
            for (i, &b) in bright.iter().enumerate() {
                let (gy, gx) = (i / grid, i % grid);
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        img.set_rgb(y, x, if b { [1.0; 3] } else { [0.0; 3] });
                    }
                }
            }
            (img, bright)
        })
        .collect()
}

/// Sizes of a generated corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub train: usize,
    pub heldout: usize,
    /// Text-only documents, drawn from scenes outside both image splits.
    pub docs: usize,
    pub image_size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { train: 144, heldout: 64, docs: 56, image_size: 32 }
    }
}

/// Paths written by [`write_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFiles {
    pub manifest: PathBuf,
    pub heldout_manifest: PathBuf,
}

/// Disjoint train / held-out / text-only scene sets.
pub fn split_scenes(spec: &CorpusSpec, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>, Vec<Scene>)> {
    let total = all_scenes().len();
    if spec.train + spec.heldout + spec.docs > total {
        return Err(Error::invalid(format!(
            "requested {} scenes but only {total} distinct ones exist",
            spec.train + spec.heldout + spec.docs
        )));
    }
    let mut rng = rng_for(seed, "synthetic.split");
    let mut all = sample_scenes(total, &mut rng);
    let docs = all.split_off(spec.train + spec.heldout);
    let heldout = all.split_off(spec.train);
    Ok((all, heldout, docs[..spec.docs].to_vec()))
}

/// Renders the corpus into `dir`: PPM images, record files and two
/// manifests (training pairs plus text documents, and the held-out pairs).
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, seed: u64) -> Result<CorpusFiles> {
    let (train, heldout, docs) = split_scenes(spec, seed)?;
    fs::create_dir_all(dir.join("images"))?;
    let write_pairs = |name: &str, scenes: &[Scene]| -> Result<()> {
        let mut lines = String::new();
        for (i, scene) in scenes.iter().enumerate() {
            let rel = format!("images/{name}_{i:04}.ppm");
            scene.render(spec.image_size).save(&dir.join(&rel))?;
            lines.push_str(&format!("{rel}\t{}\tsynthetic\n", scene.caption()));
        }
        fs::write(dir.join(format!("{name}.tsv")), lines)?;
        Ok(())
    };
    write_pairs("train", &train)?;
    write_pairs("heldout", &heldout)?;
    let doc_lines: String = docs.iter().map(|s| format!("{}\n", s.caption())).collect();
    fs::write(dir.join("docs.txt"), doc_lines)?;

    let manifest = dir.join("manifest.tsv");
    fs::write(
        &manifest,
        format!(
            "# name\tkind\tpath\tcount\nshapes\tpairs\ttrain.tsv\t{}\ndocs\ttext\tdocs.txt\t{}\n",
            train.len(),
            docs.len()
        ),
    )?;
    let heldout_manifest = dir.join("heldout_manifest.tsv");
    fs::write(&heldout_manifest, format!("heldout\tpairs\theldout.tsv\t{}\n", heldout.len()))?;
    Ok(CorpusFiles { manifest, heldout_manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn scenes_are_unique_and_captions_unique() {
        let all = all_scenes();
        assert_eq!(all.len(), 12 * 11 * 2);
        let caps: HashSet<String> = all.iter().map(Scene::caption).collect();
        assert_eq!(caps.len(), all.len());
        assert_eq!(all[0].caption(), "a red square above a red circle");
    }

    #[test]
    fn rendering_is_deterministic_and_distinct() {
        let all = all_scenes();
        assert_eq!(all[3].render(32), all[3].render(32));
        let imgs: HashSet<Vec<u8>> = all.iter().map(|s| s.render(32).to_rgb8()).collect();
        assert_eq!(imgs.len(), all.len());
    }

    #[test]
    fn corpus_splits_are_disjoint() {
        let spec = CorpusSpec::default();
        let (a, b, c) = split_scenes(&spec, 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (144, 64, 56));
        let set: HashSet<Scene> = a.iter().chain(&b).chain(&c).copied().collect();
        assert_eq!(set.len(), 264);
        assert!(split_scenes(&CorpusSpec { train: 600, ..spec }, 3).is_err());
    }

    #[test]
    fn bw_cells_follow_layout() {
        let mut rng = crate::rng::rng_for(0, "bw");
        let set = black_white_cells(2, 8, 4, &mut rng);
        for (img, bright) in set {
            assert_eq!(bright.len(), 4);
            assert_eq!(img.get(0, 0, 0) == 1.0, bright[0]);
            assert_eq!(img.get(0, 7, 7) == 1.0, bright[3]);
        }
    }
}
