//! Seed-controlled synthetic shapes dataset.
//!
//! Each sample is a 3x16x16 image of one colored geometric shape on a noisy
//! gray background, rendered with seeded jitter in position and scale.
//! Classes are (color, shape) pairs taken from a fixed diagonal enumeration
//! of the palette grid, so consecutive classes differ in both attributes.
//! Captions follow the template `a {color} {shape}` and VQA pairs ask for
//! the two attributes, which keeps both metrics exactly verifiable.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{derive_seed, rng};
use crate::tensor::Tensor;

pub const IMAGE_SHAPE: [usize; 3] = [3, 16, 16];

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
const COLOR_RGB: [[f32; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.15],
    [0.85, 0.20, 0.80],
    [0.15, 0.80, 0.85],
];

pub const SHAPE_NAMES: [&str; 5] = ["disk", "square", "triangle", "cross", "ring"];

/// Largest class count the (color, shape) diagonal enumeration supports
/// without repeating a pair: lcm(6, 5).
pub const MAX_CLASSES: usize = 30;

const SAMPLE_STREAM: u64 = 0x5a31;

const BG_LEVEL: f32 = 0.20;
const BG_NOISE_STD: f32 = 0.06;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_classes: usize,
    pub per_class: usize,
    pub train_frac: f64,
    pub align_frac: f64,
    pub version: u32,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            seed: 0,
            n_classes: 8,
            per_class: 32,
            train_frac: 0.5,
            align_frac: 0.25,
            version: 1,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("n_classes must be >= 2".into()));
        }
        if self.n_classes > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "class count {} exceeds the {}-pair color x shape grid",
                self.n_classes, MAX_CLASSES
            )));
        }
        if self.per_class < 2 {
            return Err(Error::InvalidArgument("per_class must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.train_frac)
            || !(0.0..=1.0).contains(&self.align_frac)
            || self.train_frac + self.align_frac > 1.0
        {
            return Err(Error::InvalidArgument(
                "split fractions must be in [0,1] and sum to at most 1".into(),
            ));
        }
        Ok(())
    }
}

/// Class -> (color index, shape index). Diagonal walk over the grid.
pub fn class_attributes(class_id: usize) -> (usize, usize) {
    (class_id % COLOR_NAMES.len(), class_id % SHAPE_NAMES.len())
}

pub fn class_caption(class_id: usize) -> Vec<String> {
    let (c, s) = class_attributes(class_id);
    vec![
        "a".to_string(),
        COLOR_NAMES[c].to_string(),
        SHAPE_NAMES[s].to_string(),
    ]
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub image: Tensor,
    pub class_id: usize,
    pub caption: Vec<String>,
    pub vqa: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Align,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Sample indices belonging to a split. Per class, the first
    /// `train_frac` of its samples are train, the next `align_frac` align,
    /// the remainder eval; splits are disjoint and exhaustive.
    pub fn split(&self, split: Split) -> Vec<usize> {
        let per = self.manifest.per_class;
        let n_train = (self.manifest.train_frac * per as f64).round() as usize;
        let n_align = (self.manifest.align_frac * per as f64).round() as usize;
        let n_align_end = (n_train + n_align).min(per);
        let mut out = Vec::new();
        let mut seen_per_class = vec![0usize; self.manifest.n_classes];
        for sample in &self.samples {
            let rank = seen_per_class[sample.class_id];
            seen_per_class[sample.class_id] += 1;
            let belongs = match split {
                Split::Train => rank < n_train,
                Split::Align => rank >= n_train && rank < n_align_end,
                Split::Eval => rank >= n_align_end,
            };
            if belongs {
                out.push(sample.index);
            }
        }
        out
    }

    pub fn images(&self, indices: &[usize]) -> Vec<Tensor> {
        indices.iter().map(|&i| self.samples[i].image.clone()).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].class_id).collect()
    }
}

/// Generate the dataset described by `manifest`. Deterministic: the same
/// manifest always yields bit-identical samples.
pub fn synth(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let total = manifest.n_classes * manifest.per_class;
    let mut samples = Vec::with_capacity(total);
    for index in 0..total {
        let class_id = index % manifest.n_classes;
        let image = render_sample(manifest.seed, index, class_id)?;
        let (c, s) = class_attributes(class_id);
        samples.push(Sample {
            index,
            image,
            class_id,
            caption: class_caption(class_id),
            vqa: vec![
                (
                    "what color is the shape?".to_string(),
                    COLOR_NAMES[c].to_string(),
                ),
                (
                    "what shape is shown?".to_string(),
                    SHAPE_NAMES[s].to_string(),
                ),
            ],
        });
    }
    Ok(Dataset {
        manifest: manifest.clone(),
        samples,
    })
}

fn render_sample(seed: u64, index: usize, class_id: usize) -> Result<Tensor> {
    let mut stream = rng(derive_seed(seed, &[SAMPLE_STREAM, index as u64]));
    let (color_idx, shape_idx) = class_attributes(class_id);
    let rgb = COLOR_RGB[color_idx];

    let (h, w) = (IMAGE_SHAPE[1], IMAGE_SHAPE[2]);
    let cx = 7.5 + stream.gen_range(-1.5..1.5f32);
    let cy = 7.5 + stream.gen_range(-1.5..1.5f32);
    let radius = stream.gen_range(4.0..6.0f32);

    let noise = Normal::new(0.0f32, BG_NOISE_STD).expect("valid std");
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let bg = (BG_LEVEL + noise.sample(&mut stream)).clamp(0.0, 1.0);
            let d = shape_distance(shape_idx, x as f32 - cx, y as f32 - cy, radius);
            let alpha = (d + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * plane + p] = (bg * (1.0 - alpha) + rgb[c] * alpha).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(IMAGE_SHAPE.to_vec(), data)
}

/// Signed inside-distance (in pixels) of point (dx, dy) relative to the
/// shape center; positive inside, negative outside.
fn shape_distance(shape_idx: usize, dx: f32, dy: f32, r: f32) -> f32 {
    let rho = (dx * dx + dy * dy).sqrt();
    match shape_idx {
        // disk
        0 => r - rho,
        // square
        1 => 0.85 * r - dx.abs().max(dy.abs()),
        // upward triangle: apex at (0,-r), base corners at (+-0.9r, 0.62r);
        // inside-distance = min over the three edge half-planes
        2 => {
            let below_base = 0.62 * r - dy;
            let apex_y = dy + r;
            let edge_len = ((0.9 * r) * (0.9 * r) + (1.62 * r) * (1.62 * r)).sqrt();
            let right = (0.9 * r * apex_y - 1.62 * r * dx) / edge_len;
            let left = (0.9 * r * apex_y + 1.62 * r * dx) / edge_len;
            below_base.min(right).min(left)
        }
        // cross: union of a horizontal and a vertical bar
        3 => {
            let t = 0.38 * r;
            let horiz = (t - dy.abs()).min(r - dx.abs());
            let vert = (t - dx.abs()).min(r - dy.abs());
            horiz.max(vert)
        }
        // ring
        4 => (r - rho).min(rho - 0.45 * r),
        _ => unreachable!("shape index bounded by palette"),
    }
}

// ---------------------------------------------------------------------------
// Directory layout: manifest.txt, images/NNNN.rten, labels.csv, captions.csv,
// vqa.csv.
// ---------------------------------------------------------------------------

pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;

    let m = &dataset.manifest;
    let manifest_text = format!(
        "seed={}\nn_classes={}\nper_class={}\ntrain_frac={}\nalign_frac={}\nversion={}\n",
        m.seed, m.n_classes, m.per_class, m.train_frac, m.align_frac, m.version
    );
    write_text(dir.join("manifest.txt"), &manifest_text)?;

    let mut labels = String::from("index,class,color,shape\n");
    let mut captions = String::from("index,caption\n");
    let mut vqa = String::from("index,question,answer\n");
    for sample in &dataset.samples {
        let (c, s) = class_attributes(sample.class_id);
        writeln!(
            labels,
            "{},{},{},{}",
            sample.index, sample.class_id, COLOR_NAMES[c], SHAPE_NAMES[s]
        )
        .expect("string write");
        writeln!(captions, "{},{}", sample.index, sample.caption.join(" ")).expect("string write");
        for (q, a) in &sample.vqa {
            writeln!(vqa, "{},{q},{a}", sample.index).expect("string write");
        }
        io::write_rten(images.join(format!("{:04}.rten", sample.index)), &sample.image)?;
    }
    write_text(dir.join("labels.csv"), &labels)?;
    write_text(dir.join("captions.csv"), &captions)?;
    write_text(dir.join("vqa.csv"), &vqa)?;
    Ok(())
}

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut manifest = DatasetManifest::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, "expected key=value"))?;
        match key {
            "seed" => manifest.seed = parse(key, value)?,
            "n_classes" => manifest.n_classes = parse(key, value)?,
            "per_class" => manifest.per_class = parse(key, value)?,
            "train_frac" => manifest.train_frac = parse(key, value)?,
            "align_frac" => manifest.align_frac = parse(key, value)?,
            "version" => manifest.version = parse(key, value)?,
            other => return Err(Error::config(other, "unknown manifest key")),
        }
    }
    manifest.validate()?;
    // Regeneration is the source of truth for captions/VQA; images come from
    // disk so externally corrupted or attacked inputs keep working.
    let mut dataset = synth(&manifest)?;
    for sample in &mut dataset.samples {
        let path = dir.join("images").join(format!("{:04}.rten", sample.index));
        sample.image = io::read_rten(&path)?;
    }
    Ok(dataset)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse '{value}'")))
}

/// Load loose image files (RTEN or PPM P6) from a file or directory into
/// `[0,1]` channel-first tensors, sorted by file name.
pub fn load_images(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let mut files = Vec::new();
    let meta = fs::metadata(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if meta.is_dir() {
        for entry in fs::read_dir(path).map_err(|e| Error::io(path.display().to_string(), e))? {
            let entry = entry.map_err(|e| Error::io(path.display().to_string(), e))?;
            let p = entry.path();
            match p.extension().and_then(|e| e.to_str()) {
                Some("rten") | Some("ppm") => files.push(p),
                _ => {}
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .rten or .ppm files under {}",
            path.display()
        )));
    }
    files
        .iter()
        .map(|p| match p.extension().and_then(|e| e.to_str()) {
            Some("ppm") => io::read_ppm(p),
            _ => io::read_rten(p),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_manifest_is_bit_identical() {
        let manifest = DatasetManifest {
            seed: 11,
            n_classes: 4,
            per_class: 4,
            ..Default::default()
        };
        let a = synth(&manifest).unwrap();
        let b = synth(&manifest).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            let xb: Vec<u32> = x.image.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.image.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn counts_are_balanced() {
        let manifest = DatasetManifest {
            seed: 3,
            n_classes: 2,
            per_class: 10,
            ..Default::default()
        };
        let ds = synth(&manifest).unwrap();
        assert_eq!(ds.samples.len(), 20);
        let zeros = ds.samples.iter().filter(|s| s.class_id == 0).count();
        assert_eq!(zeros, 10);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let ds = synth(&DatasetManifest {
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let mut seen = vec![0u8; ds.samples.len()];
        for split in [Split::Train, Split::Align, Split::Eval] {
            for idx in ds.split(split) {
                seen[idx] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "each sample in exactly one split");
    }

    #[test]
    fn caption_matches_class_attributes() {
        let ds = synth(&DatasetManifest {
            seed: 9,
            n_classes: 8,
            per_class: 2,
            ..Default::default()
        })
        .unwrap();
        for s in &ds.samples {
            let (c, sh) = class_attributes(s.class_id);
            assert_eq!(
                s.caption,
                vec!["a", COLOR_NAMES[c], SHAPE_NAMES[sh]],
                "class {}",
                s.class_id
            );
            assert_eq!(s.vqa[0].1, COLOR_NAMES[c]);
            assert_eq!(s.vqa[1].1, SHAPE_NAMES[sh]);
        }
    }

    #[test]
    fn class_pairs_are_distinct_up_to_limit() {
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..MAX_CLASSES {
            assert!(seen.insert(class_attributes(k)), "pair repeats at {k}");
        }
    }

    #[test]
    fn images_stay_in_range() {
        let ds = synth(&DatasetManifest {
            seed: 2,
            n_classes: 5,
            per_class: 3,
            ..Default::default()
        })
        .unwrap();
        for s in &ds.samples {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.image.shape(), &IMAGE_SHAPE);
        }
    }

    /// Least-squares linear probe on raw pixels; guards against generating a
    /// degenerate learning task.
    #[test]
    fn least_squares_probe_separates_default_manifest() {
        use nalgebra::DMatrix;
        let ds = synth(&DatasetManifest {
            seed: 0,
            ..Default::default()
        })
        .unwrap();
        let train = ds.split(Split::Train);
        let n = train.len();
        let d = IMAGE_SHAPE.iter().product::<usize>() + 1;
        let k = ds.manifest.n_classes;
        let mut x = DMatrix::<f64>::zeros(n, d);
        let mut y = DMatrix::<f64>::zeros(n, k);
        for (row, &idx) in train.iter().enumerate() {
            for (col, &v) in ds.samples[idx].image.data().iter().enumerate() {
                x[(row, col)] = v as f64;
            }
            x[(row, d - 1)] = 1.0;
            y[(row, ds.samples[idx].class_id)] = 1.0;
        }
        let xtx = x.transpose() * &x + DMatrix::identity(d, d) * 1e-3;
        let w = xtx.cholesky().expect("ridge system is SPD").solve(&(x.transpose() * &y));
        let pred = &x * &w;
        let correct = train
            .iter()
            .enumerate()
            .filter(|(row, &idx)| {
                let mut best = 0;
                for c in 1..k {
                    if pred[(*row, c)] > pred[(*row, best)] {
                        best = c;
                    }
                }
                best == ds.samples[idx].class_id
            })
            .count();
        let acc = correct as f64 / n as f64;
        assert!(acc >= 0.9, "linear probe train accuracy {acc}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth(&DatasetManifest {
            seed: 4,
            n_classes: 3,
            per_class: 2,
            ..Default::default()
        })
        .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.class_id, b.class_id);
        }
        // loose image loading from the images/ directory
        let images = load_images(dir.path().join("images")).unwrap();
        assert_eq!(images.len(), ds.samples.len());
    }
}
