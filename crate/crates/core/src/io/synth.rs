//! Synthetic segmentation data: filled ellipses and rectangles on a noisy
//! background, one intensity level per class.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pgm::{self, Gray};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::training::Sample;

pub const MAX_SHAPES: usize = 3;
const NOISE: f64 = 0.05;
const BACKGROUND: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeMix {
    pub ellipses: usize,
    pub rectangles: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub num_classes: usize,
    pub shape_mix: ShapeMix,
    pub files: Vec<[String; 2]>,
}

/// An image raster with its label raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPair {
    pub image: Gray,
    pub mask: Gray,
}

impl SynthPair {
    pub fn to_sample(&self) -> Sample {
        Sample::new(pgm::to_tensor(&self.image), self.mask.pixels.clone()).expect("matching rasters")
    }
}

pub fn class_intensity(class: usize, classes: usize) -> f64 {
    if class == 0 {
        BACKGROUND
    } else {
        0.45 + 0.45 * class as f64 / (classes - 1) as f64
    }
}

fn check_args(n: usize, size: usize, classes: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("need at least one image"));
    }
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::invalid(format!("size must be a positive multiple of 32, got {size}")));
    }
    if !(2..=255).contains(&classes) {
        return Err(Error::invalid(format!("classes must be in 2..=255, got {classes}")));
    }
    Ok(())
}

/// Generate `n` pairs. Shapes are bounded so that at most a third of the
/// image is covered, and each covers some pixels, so every mask has both
/// background and at least one foreground label.
pub fn generate_pairs(n: usize, size: usize, classes: usize, seed: u64) -> Result<(Vec<SynthPair>, ShapeMix)> {
    check_args(n, size, classes)?;
    let mut rng = Rng::new(seed);
    let mut mix = ShapeMix {
        ellipses: 0,
        rectangles: 0,
    };
    let s = size as f64;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut mask = vec![0u8; size * size];
        let shapes = 1 + rng.below(MAX_SHAPES);
        for _ in 0..shapes {
            let class = 1 + rng.below(classes - 1) as u8;
            let (cy, cx) = (rng.uniform_range(0.15 * s, 0.85 * s), rng.uniform_range(0.15 * s, 0.85 * s));
            if rng.coin() {
                mix.ellipses += 1;
                let (ry, rx) = (rng.uniform_range(0.08 * s, 0.2 * s), rng.uniform_range(0.08 * s, 0.2 * s));
                for r in 0..size {
                    for c in 0..size {
                        let (dy, dx) = ((r as f64 + 0.5 - cy) / ry, (c as f64 + 0.5 - cx) / rx);
                        if dy * dy + dx * dx <= 1.0 {
                            mask[r * size + c] = class;
                        }
                    }
                }
            } else {
                mix.rectangles += 1;
                let (hh, hw) = (rng.uniform_range(0.08 * s, 0.16 * s), rng.uniform_range(0.08 * s, 0.16 * s));
                for r in 0..size {
                    for c in 0..size {
                        if (r as f64 + 0.5 - cy).abs() <= hh && (c as f64 + 0.5 - cx).abs() <= hw {
                            mask[r * size + c] = class;
                        }
                    }
                }
            }
        }
        let pixels = mask
            .iter()
            .map(|&l| {
                let x = class_intensity(l as usize, classes) + NOISE * rng.normal();
                (x.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        debug_assert!(mask.contains(&0) && mask.iter().any(|&l| l > 0));
        let gray = |pixels| Gray {
            width: size,
            height: size,
            pixels,
        };
        pairs.push(SynthPair {
            image: gray(pixels),
            mask: gray(mask),
        });
    }
    Ok((pairs, mix))
}

/// In-memory samples, identical to what loading the written files yields.
pub fn generate_samples(n: usize, size: usize, classes: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(generate_pairs(n, size, classes, seed)?.0.iter().map(SynthPair::to_sample).collect())
}

pub fn image_name(i: usize) -> String {
    format!("img_{i:04}.pgm")
}

pub fn mask_name(i: usize) -> String {
    format!("msk_{i:04}.pgm")
}

pub const MANIFEST: &str = "manifest.json";

pub fn generate(n: usize, size: usize, classes: usize, seed: u64, out: &Path) -> Result<SynthManifest> {
    let (pairs, shape_mix) = generate_pairs(n, size, classes, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::with_capacity(n);
    for (i, pair) in pairs.iter().enumerate() {
        pgm::write_gray(&out.join(image_name(i)), &pair.image)?;
        pgm::write_gray(&out.join(mask_name(i)), &pair.mask)?;
        files.push([image_name(i), mask_name(i)]);
    }
    let manifest = SynthManifest {
        seed,
        count: n,
        size,
        num_classes: classes,
        shape_mix,
        files,
    };
    let path = out.join(MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Load every `img_NNNN.pgm` with its `msk_NNNN.pgm`, in index order. Mask
/// pixels are read as raw labels.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("img_").and_then(|r| r.strip_suffix(".pgm")) {
            images.push((id.to_string(), entry.path()));
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    images.sort();
    images
        .into_iter()
        .map(|(id, path)| {
            let img = pgm::read_gray(&path)?;
            let mpath = dir.join(format!("msk_{id}.pgm"));
            if !mpath.exists() {
                return Err(Error::invalid(format!("{} has no mask {}", path.display(), mpath.display())));
            }
            let mask = pgm::read_gray(&mpath)?;
            if (mask.width, mask.height) != (img.width, img.height) {
                return Err(Error::invalid(format!(
                    "{} is {}x{} but its mask is {}x{}",
                    path.display(),
                    img.width,
                    img.height,
                    mask.width,
                    mask.height
                )));
            }
            Sample::new(pgm::to_tensor(&img), mask.pixels)
        })
        .collect()
}

/// Every label must be below `classes`.
pub fn check_labels(samples: &[Sample], classes: usize) -> Result<()> {
    for s in samples {
        if let Some(&l) = s.mask.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_hold_background_and_foreground() {
        for classes in [2, 4] {
            let (pairs, mix) = generate_pairs(40, 32, classes, 9).unwrap();
            assert!(mix.ellipses > 0 && mix.rectangles > 0);
            for p in &pairs {
                let mut seen = vec![false; 256];
                p.mask.pixels.iter().for_each(|&l| seen[l as usize] = true);
                assert!(seen[0]);
                assert!(seen.iter().filter(|&&b| b).count() >= 2);
                assert!(seen[classes..].iter().all(|&b| !b));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate_pairs(3, 32, 2, 1).unwrap(), generate_pairs(3, 32, 2, 1).unwrap());
        assert_ne!(generate_pairs(3, 32, 2, 1).unwrap().0, generate_pairs(3, 32, 2, 2).unwrap().0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_pairs(0, 32, 2, 0).is_err());
        assert!(generate_pairs(1, 48, 2, 0).is_err());
        assert!(generate_pairs(1, 32, 1, 0).is_err());
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(3, 32, 4, 5, dir.path()).unwrap();
        assert_eq!(m.files[2], ["img_0002.pgm".to_string(), "msk_0002.pgm".to_string()]);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, generate_samples(3, 32, 4, 5).unwrap());
        check_labels(&loaded, 4).unwrap();
        assert!(check_labels(&loaded, 2).is_err() || loaded.iter().all(|s| s.mask.iter().all(|&l| l < 2)));
    }

    #[test]
    fn missing_mask_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        generate(2, 32, 2, 5, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("msk_0001.pgm")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(empty.path()), Err(Error::EmptyDataset)));
    }
}
