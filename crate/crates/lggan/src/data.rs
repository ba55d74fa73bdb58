//! Semantic maps, paired samples, and datasets.
//!
//! Label grids use integer class ids with a reserved `VOID` value for
//! unlabeled pixels. VOID pixels get an all-zero one-hot column, so they
//! contribute nothing to any class branch, no mask, and no classification
//! target. Pixel data lives in `[−1, 1]` to match tanh image outputs.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Reserved label for unlabeled pixels.
pub const VOID: u32 = u32::MAX;

/// Which inputs condition the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Generator sees the semantic layout only.
    Semantic,
    /// Generator sees the semantic layout plus a conditioning photograph.
    CrossView,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("label {value} ≥ class count {c} at pixel ({x}, {y})")]
    LabelOutOfRange { value: u8, c: usize, x: usize, y: usize },
    #[error("no `{missing}/` entry for stem \"{stem}\"")]
    UnmatchedStem { stem: String, missing: String },
    #[error("size mismatch for stem \"{stem}\": {expect_w}x{expect_h} vs {got_w}x{got_h}")]
    SizeMismatch { stem: String, expect_w: u32, expect_h: u32, got_w: u32, got_h: u32 },
    #[error("cannot resample {from_h}x{from_w} masks to {to_h}x{to_w}: not an integer factor")]
    BadScale { from_h: usize, from_w: usize, to_h: usize, to_w: usize },
    #[error("label raster {path} is not 8-bit grayscale")]
    NotGrayscale { path: PathBuf },
    #[error("dataset directory {0} is empty")]
    EmptyDataset(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decoding {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Integer class-id grid. Labels are `0..c` or [`VOID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    labels: Array2<u32>,
    c: usize,
}

impl SemanticMap {
    /// Wrap a label grid, checking every entry against the class count.
    pub fn new(labels: Array2<u32>, c: usize) -> Self {
        assert!(c >= 1, "class count must be positive");
        let (h, w) = labels.dim();
        assert!(h > 0 && w > 0, "semantic map must be non-empty");
        for &l in labels.iter() {
            assert!(l == VOID || (l as usize) < c, "label {l} out of range for c={c}");
        }
        SemanticMap { labels, c }
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }
}

/// One training example: an optional conditioning photograph, the layout,
/// and the ground-truth image. The conditioning image is present exactly in
/// cross-view mode.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub conditioning_image: Option<Array3<f32>>,
    pub semantic: SemanticMap,
    pub target: Array3<f32>,
}

impl PairedSample {
    fn check(self) -> Self {
        let (_, th, tw) = self.target.dim();
        assert_eq!(
            (th, tw),
            (self.semantic.height(), self.semantic.width()),
            "semantic map and target image sizes differ"
        );
        if let Some(cond) = &self.conditioning_image {
            assert_eq!(cond.dim(), self.target.dim(), "conditioning image size differs");
        }
        self
    }
}

/// Decode an 8-bit id raster into a [`SemanticMap`], mapping `void_id`
/// pixels to [`VOID`].
pub fn decode_semantic_map(
    raster: &Array2<u8>,
    c: usize,
    void_id: u8,
) -> Result<SemanticMap, DataError> {
    let (h, w) = raster.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = raster[[y, x]];
            labels[[y, x]] = if v == void_id {
                VOID
            } else if (v as usize) < c {
                v as u32
            } else {
                return Err(DataError::LabelOutOfRange { value: v, c, x, y });
            };
        }
    }
    Ok(SemanticMap::new(labels, c))
}

/// One-hot encode a map to `[c, H, W]`. Channel `i` is 1 exactly where the
/// label is `i`; VOID pixels are all-zero.
pub fn one_hot(map: &SemanticMap) -> Array3<f32> {
    let (h, w) = map.labels.dim();
    let mut out = Array3::<f32>::zeros((map.c, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = map.labels[[y, x]];
            if l != VOID {
                out[[l as usize, y, x]] = 1.0;
            }
        }
    }
    out
}

/// Resample one-hot channels to `(h, w)` by nearest neighbor, yielding the
/// per-class masks at a feature resolution. Only integer up- or
/// down-scaling factors are allowed so masks stay exactly binary.
pub fn class_masks(onehot: &Array3<f32>, h: usize, w: usize) -> Result<Array3<f32>, DataError> {
    let (c, sh, sw) = onehot.dim();
    let integer_factor =
        |a: usize, b: usize| a % b == 0 || b % a == 0;
    if !(integer_factor(h, sh) && integer_factor(w, sw)) {
        return Err(DataError::BadScale { from_h: sh, from_w: sw, to_h: h, to_w: w });
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            let sy = y * sh / h;
            for x in 0..w {
                let sx = x * sw / w;
                out[[ci, y, x]] = onehot[[ci, sy, sx]];
            }
        }
    }
    Ok(out)
}

/// Binary vector marking which classes occupy at least one pixel.
pub fn valid_class_indicator(map: &SemanticMap) -> Array1<f32> {
    let mut h = Array1::<f32>::zeros(map.c);
    for &l in map.labels.iter() {
        if l != VOID {
            h[l as usize] = 1.0;
        }
    }
    h
}

/// Fixed base color per class, inside `[−0.75, 0.75]` so the luminance ramp
/// never pushes a pixel outside `[−1, 1]`.
pub fn class_color_table(c: usize) -> Vec<[f32; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x00c0_1025 ^ c as u64);
    (0..c)
        .map(|_| {
            [
                rng.random_range(-0.75f32..0.75),
                rng.random_range(-0.75f32..0.75),
                rng.random_range(-0.75f32..0.75),
            ]
        })
        .collect()
}

/// Slope of the horizontal luminance ramp added to synthetic targets.
pub const SYNTH_RAMP: f32 = 0.3;

fn synth_target(map: &SemanticMap, colors: &[[f32; 3]]) -> Array3<f32> {
    let (h, w) = map.labels.dim();
    let mut img = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let ramp = SYNTH_RAMP * (x as f32 / (w - 1).max(1) as f32 - 0.5);
            let l = map.labels[[y, x]] as usize;
            for ch in 0..3 {
                img[[ch, y, x]] = colors[l][ch] + ramp;
            }
        }
    }
    img
}

/// Deterministic synthetic scenes: random rectangles and ellipses over a
/// background class, each class painted with a fixed color plus a mild
/// horizontal luminance ramp. Cross-view samples use the vertically flipped
/// target as the conditioning photograph, so the view mapping is a fixed,
/// learnable transform. Purely a function of its arguments.
pub fn synth_dataset(
    seed: u64,
    n_samples: usize,
    c: usize,
    h: usize,
    w: usize,
    mode: Mode,
) -> Vec<PairedSample> {
    assert!(c >= 2, "need at least two classes");
    assert!(h >= 16 && w >= 16, "synthetic scenes are at least 16x16");
    let colors = class_color_table(c);
    (0..n_samples)
        .map(|k| {
            // Distinct stream per sample so sample k is the same no matter
            // how many samples surround it.
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k as u64);
            let background = rng.random_range(0..c) as u32;
            let mut labels = Array2::<u32>::from_elem((h, w), background);
            let shapes = rng.random_range(2..=4usize);
            for _ in 0..shapes {
                let class = rng.random_range(0..c) as u32;
                if rng.random_bool(0.5) {
                    let y0 = rng.random_range(0..h);
                    let y1 = rng.random_range(y0..h.min(y0 + h / 2) + 1);
                    let x0 = rng.random_range(0..w);
                    let x1 = rng.random_range(x0..w.min(x0 + w / 2) + 1);
                    for y in y0..=y1.min(h - 1) {
                        for x in x0..=x1.min(w - 1) {
                            labels[[y, x]] = class;
                        }
                    }
                } else {
                    let cy = rng.random_range(0..h) as f32;
                    let cx = rng.random_range(0..w) as f32;
                    let ry = rng.random_range(h as f32 / 16.0..h as f32 / 4.0);
                    let rx = rng.random_range(w as f32 / 16.0..w as f32 / 4.0);
                    for y in 0..h {
                        for x in 0..w {
                            let dy = (y as f32 - cy) / ry;
                            let dx = (x as f32 - cx) / rx;
                            if dy * dy + dx * dx <= 1.0 {
                                labels[[y, x]] = class;
                            }
                        }
                    }
                }
            }
            let semantic = SemanticMap::new(labels, c);
            let target = synth_target(&semantic, &colors);
            let conditioning_image = match mode {
                Mode::Semantic => None,
                Mode::CrossView => {
                    let mut cond = target.clone();
                    cond.invert_axis(Axis(1));
                    Some(cond)
                }
            };
            PairedSample { conditioning_image, semantic, target }.check()
        })
        .collect()
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
        let path = entry.path();
        if path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn load_rgb(path: &Path, stem: &str, expect: Option<(u32, u32)>) -> Result<Array3<f32>, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    if let Some((ew, eh)) = expect {
        if img.dimensions() != (ew, eh) {
            return Err(DataError::SizeMismatch {
                stem: stem.to_string(),
                expect_w: ew,
                expect_h: eh,
                got_w: img.width(),
                got_h: img.height(),
            });
        }
    }
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = p.0[ch] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    Ok(out)
}

fn load_label_map(path: &Path, c: usize, void_id: u8) -> Result<SemanticMap, DataError> {
    let raster =
        image::open(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })?;
    let gray = match raster {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => return Err(DataError::NotGrayscale { path: path.to_path_buf() }),
    };
    let (w, h) = gray.dimensions();
    let mut id_grid = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in gray.enumerate_pixels() {
        id_grid[[y as usize, x as usize]] = p.0[0];
    }
    decode_semantic_map(&id_grid, c, void_id)
}

fn load_pairs(
    root: &Path,
    mode: Mode,
    c: usize,
    void_id: u8,
    with_targets: bool,
) -> Result<Vec<(String, PairedSample)>, DataError> {
    let labels = list_stems(&root.join("labels"))?;
    let images = if with_targets { list_stems(&root.join("images"))? } else { BTreeMap::new() };
    let cond = match mode {
        Mode::Semantic => BTreeMap::new(),
        Mode::CrossView => list_stems(&root.join("cond"))?,
    };
    if labels.is_empty() {
        return Err(DataError::EmptyDataset(root.join("labels")));
    }
    for stem in images.keys() {
        if !labels.contains_key(stem) {
            return Err(DataError::UnmatchedStem { stem: stem.clone(), missing: "labels".into() });
        }
    }

    let mut samples = Vec::with_capacity(labels.len());
    for (stem, label_path) in &labels {
        let semantic = load_label_map(label_path, c, void_id)?;
        let (h, w) = (semantic.height(), semantic.width());
        let expect = (w as u32, h as u32);
        let target = if with_targets {
            let image_path = images.get(stem).ok_or_else(|| DataError::UnmatchedStem {
                stem: stem.clone(),
                missing: "images".into(),
            })?;
            load_rgb(image_path, stem, Some(expect))?
        } else {
            Array3::<f32>::zeros((3, h, w))
        };
        let conditioning_image = match mode {
            Mode::Semantic => None,
            Mode::CrossView => {
                let cond_path = cond.get(stem).ok_or_else(|| DataError::UnmatchedStem {
                    stem: stem.clone(),
                    missing: "cond".into(),
                })?;
                Some(load_rgb(cond_path, stem, Some(expect))?)
            }
        };
        let sample = PairedSample { conditioning_image, semantic, target }.check();
        samples.push((stem.clone(), sample));
    }
    Ok(samples)
}

/// Read a paired dataset from disk. Expected layout:
///
/// ```text
/// root/labels/<stem>.png   8-bit grayscale id rasters
/// root/images/<stem>.png   RGB targets
/// root/cond/<stem>.png     RGB conditioning photos (cross-view mode only)
/// ```
///
/// Samples are paired by file stem and returned in lexicographic stem
/// order. Pixel values map affinely to `[−1, 1]` (0 → −1, 255 → +1).
pub fn load_dataset(
    root: &Path,
    mode: Mode,
    c: usize,
    void_id: u8,
) -> Result<Vec<PairedSample>, DataError> {
    Ok(load_named_dataset(root, mode, c, void_id)?.into_iter().map(|(_, s)| s).collect())
}

/// [`load_dataset`], but each sample keeps its file stem — for reports and
/// other outputs that name results after their inputs.
pub fn load_named_dataset(
    root: &Path,
    mode: Mode,
    c: usize,
    void_id: u8,
) -> Result<Vec<(String, PairedSample)>, DataError> {
    load_pairs(root, mode, c, void_id, true)
}

/// Read generation inputs only: layouts (and conditioning photos in
/// cross-view mode), no ground-truth images. The `target` field of each
/// sample is a zero placeholder, present only so the samples batch like any
/// others.
pub fn load_generation_inputs(
    root: &Path,
    mode: Mode,
    c: usize,
    void_id: u8,
) -> Result<Vec<(String, PairedSample)>, DataError> {
    load_pairs(root, mode, c, void_id, false)
}

/// A mini-batch assembled from samples, in graph-ready layouts.
pub struct Batch {
    /// One-hot layouts `[N, c, H, W]`.
    pub onehot: ArrayD<f32>,
    /// Ground-truth images `[N, 3, H, W]`.
    pub target: ArrayD<f32>,
    /// Conditioning photos `[N, 3, H, W]` in cross-view mode.
    pub cond: Option<ArrayD<f32>>,
    /// Class presence indicators `[N, c]`.
    pub valid: Array2<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[&PairedSample]) -> Batch {
        assert!(!samples.is_empty(), "empty batch");
        let n = samples.len();
        let c = samples[0].semantic.class_count();
        let (h, w) = (samples[0].semantic.height(), samples[0].semantic.width());
        let has_cond = samples[0].conditioning_image.is_some();
        let mut onehot = ArrayD::<f32>::zeros(IxDyn(&[n, c, h, w]));
        let mut target = ArrayD::<f32>::zeros(IxDyn(&[n, 3, h, w]));
        let mut cond = has_cond.then(|| ArrayD::<f32>::zeros(IxDyn(&[n, 3, h, w])));
        let mut valid = Array2::<f32>::zeros((n, c));
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.semantic.class_count(), c, "mixed class counts in batch");
            assert_eq!(
                (s.semantic.height(), s.semantic.width()),
                (h, w),
                "mixed sizes in batch"
            );
            assert_eq!(s.conditioning_image.is_some(), has_cond, "mixed modes in batch");
            onehot.index_axis_mut(Axis(0), i).assign(&one_hot(&s.semantic));
            target.index_axis_mut(Axis(0), i).assign(&s.target);
            if let (Some(c4), Some(ci)) = (cond.as_mut(), s.conditioning_image.as_ref()) {
                c4.index_axis_mut(Axis(0), i).assign(ci);
            }
            valid.row_mut(i).assign(&valid_class_indicator(&s.semantic));
        }
        Batch { onehot, target, cond, valid }
    }

    /// Per-class masks for the whole batch at `(h, w)`: `[N, c, h, w]`.
    pub fn masks_at(&self, h: usize, w: usize) -> Result<ArrayD<f32>, DataError> {
        let shape = self.onehot.shape();
        let (n, c) = (shape[0], shape[1]);
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, c, h, w]));
        for i in 0..n {
            let oh = self
                .onehot
                .index_axis(Axis(0), i)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            out.index_axis_mut(Axis(0), i).assign(&class_masks(&oh, h, w)?);
        }
        Ok(out)
    }
}
