//! Labelled image datasets: the on-disk layout, ingestion with itemized
//! validation, patch-dataset derivation, stratified folds, and a synthetic
//! generator whose classes differ only in how motifs are arranged.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_repr::{grid_dims, tile, PatchSet};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["background", "normal", "low", "high"];
pub const BACKGROUND: usize = 0;
pub const MANIFEST: &str = "manifest.csv";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| *c == name)
}

/// Coarse per-cell labels of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<usize>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, cells: Vec<usize>) -> Result<Self> {
        if rows * cols != cells.len() || cells.is_empty() {
            return Err(Error::dim("mask", format!("{rows}x{cols} grid with {} cells", cells.len())));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn at(&self, i: usize, j: usize) -> usize {
        self.cells[i * self.cols + j]
    }

    /// Fraction of non-background cells.
    pub fn roi_ratio(&self) -> f64 {
        self.cells.iter().filter(|&&c| c != BACKGROUND).count() as f64 / self.cells.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.cells.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cells = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Format(format!("mask line {}: bad cell `{t}`", n + 1))))
                .collect::<Result<_>>()?;
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::Format(format!("mask line {} has {} cells, expected {c}", n + 1, row.len())));
                }
                _ => {}
            }
            cells.extend(row);
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::Format("empty mask".into()))?;
        Self::new(rows, cols, cells)
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub mask: Mask,
    pub fold: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub label: String,
    pub fold: String,
    pub mask_path: String,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let mut r = csv::Reader::from_path(&path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(root.join(MANIFEST))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(root.join(MANIFEST), e))?;
    Ok(())
}

/// Itemized checks of a dataset directory; an empty list means valid.
pub fn validate(root: &Path, patch_size: usize) -> Result<Vec<String>> {
    let rows = read_manifest(root)?;
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for r in &rows {
        if !seen.insert(r.id.clone()) {
            issues.push(format!("{}: duplicate id", r.id));
        }
        let label = class_index(&r.label);
        if label.is_none() {
            issues.push(format!("{}: label `{}` is not one of {CLASS_NAMES:?}", r.id, r.label));
        }
        let img = root.join(&r.path);
        let dims = if !img.exists() {
            issues.push(format!("{}: missing image {}", r.id, r.path));
            None
        } else {
            match image::image_dimensions(&img) {
                Ok(d) => Some(d),
                Err(e) => {
                    issues.push(format!("{}: unreadable image {}: {e}", r.id, r.path));
                    None
                }
            }
        };
        let mask_file = root.join(&r.mask_path);
        if !mask_file.exists() {
            issues.push(format!("{}: missing mask {}", r.id, r.mask_path));
            continue;
        }
        let mask = match fs::read_to_string(&mask_file).map_err(|e| Error::io(&mask_file, e)).and_then(|t| Mask::parse(&t)) {
            Ok(m) => m,
            Err(e) => {
                issues.push(format!("{}: {e}", r.id));
                continue;
            }
        };
        if let Some(&bad) = mask.cells.iter().find(|&&c| c >= CLASS_NAMES.len()) {
            issues.push(format!("{}: mask cell label {bad} outside the class set", r.id));
        }
        if let Some((w, h)) = dims {
            let (m, n) = grid_dims(h as usize, w as usize, patch_size);
            if (mask.rows, mask.cols) != (m, n) {
                issues.push(format!(
                    "{}: mask is {}x{} but a {h}x{w} image tiles into {m}x{n} patches of {patch_size}",
                    r.id, mask.rows, mask.cols
                ));
            }
        }
    }
    Ok(issues)
}

/// Read-only handle over a validated dataset directory; images load lazily.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub patch_size: usize,
}

impl Dataset {
    pub fn open(root: &Path, patch_size: usize) -> Result<Self> {
        let issues = validate(root, patch_size)?;
        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }
        Ok(Self {
            root: root.to_path_buf(),
            rows: read_manifest(root)?,
            patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for r in &self.rows {
            h[class_index(&r.label).expect("validated")] += 1;
        }
        h
    }

    pub fn indices(&self, fold: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rows[i].fold == fold).collect()
    }

    pub fn load(&self, i: usize) -> Result<LabeledImage> {
        let r = &self.rows[i];
        let pixels = read_gray(&self.root.join(&r.path))?;
        let mpath = self.root.join(&r.mask_path);
        let mask = Mask::parse(&fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
        Ok(LabeledImage {
            id: r.id.clone(),
            pixels,
            label: class_index(&r.label).expect("validated"),
            mask,
            fold: r.fold.clone(),
        })
    }

    pub fn load_fold(&self, fold: &str) -> Result<Vec<LabeledImage>> {
        self.indices(fold).into_iter().map(|i| self.load(i)).collect()
    }

    pub fn load_all(&self) -> Result<Vec<LabeledImage>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

pub fn read_gray(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

pub fn write_gray(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::contract("pixel buffer does not match image size"))?;
    img.save(path)?;
    Ok(())
}

/// Labels every grid cell of every image with its mask class, then keeps at
/// most `cap` per class by seeded sampling without replacement.
pub fn derive_patch_dataset(images: &[LabeledImage], patch_size: usize, cap: Option<usize>, seed: u64) -> Result<PatchSet> {
    let mut by_class: Vec<Vec<Tensor>> = vec![Vec::new(); CLASS_NAMES.len()];
    for img in images {
        let tiles = tile(&img.pixels, patch_size)?;
        if tiles.len() != img.mask.cells.len() {
            return Err(Error::dim(
                "derive_patch_dataset",
                format!("{}: {} patches but {} mask cells", img.id, tiles.len(), img.mask.cells.len()),
            ));
        }
        for ((i, j, t), _) in tiles.into_iter().zip(&img.mask.cells) {
            by_class[img.mask.at(i, j)].push(t);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PatchSet::default();
    for (class, mut patches) in by_class.into_iter().enumerate() {
        if let Some(cap) = cap {
            if cap > patches.len() {
                log::warn!(
                    "class {} has {} patches, fewer than the cap {cap}; taking all",
                    CLASS_NAMES[class],
                    patches.len()
                );
            } else {
                patches.shuffle(&mut rng);
                patches.truncate(cap);
            }
        }
        for p in patches {
            set.push(p, class);
        }
    }
    Ok(set)
}

/// Class-stratified fold ids: items are ordered by class and dealt to folds
/// round-robin with one counter running across all classes.
pub fn stratified_folds(labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut folds = vec![0; labels.len()];
    for (n, &i) in order.iter().enumerate() {
        folds[i] = n % k;
    }
    let classes: HashSet<usize> = labels.iter().copied().collect();
    for &c in &classes {
        let present: HashSet<usize> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| folds[i]).collect();
        if present.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} items and cannot appear in all {k} folds",
                labels.iter().filter(|&&l| l == c).count()
            )));
        }
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub patch_size: usize,
    /// Images per class (background, normal, low, high); dealt 3:1:1 into
    /// train/val/test.
    pub per_class: [usize; 4],
    /// Semi-major axis of a ring, pixels.
    pub ring_radius: f64,
    /// Blobs per ring.
    pub blob_density: usize,
    pub blob_sigma: f64,
    /// Uniform positional jitter of ring centres and blobs, pixels.
    pub distortion: f64,
    pub noise: f64,
    /// Grade-dependent brightening of blobs; non-zero values make single
    /// patches informative and trip the ambiguity gate.
    pub hyperchromasia: f64,
    /// Smallest tissue rectangle side, cells.
    pub min_tissue_cells: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 448,
            patch_size: 56,
            per_class: [25; 4],
            ring_radius: 15.0,
            blob_density: 14,
            blob_sigma: 2.2,
            distortion: 1.5,
            noise: 0.04,
            hyperchromasia: 0.0,
            min_tissue_cells: 5,
            seed: 7,
        }
    }
}

/// Minimum Gaussian overlap coefficient of single-motif statistics between
/// any two tissue classes.
pub const AMBIGUITY_THRESHOLD: f64 = 0.8;
const BACKGROUND_LEVEL: f64 = 0.12;
const BLOB_AMPLITUDE: f64 = 0.55;
const RING_ASPECT: f64 = 0.5;

impl SyntheticSpec {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    fn check(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.grid() < 4 {
            return Err(Error::Config(format!(
                "image size {} must split into at least 4x4 whole patches of {}",
                self.image_size, self.patch_size
            )));
        }
        if self.per_class.contains(&0) {
            return Err(Error::Config("every class needs at least one image".into()));
        }
        if self.ring_radius + 3.0 * self.blob_sigma + 2.0 * self.distortion > self.patch_size as f64 / 2.0 {
            log::warn!("ring motifs are clipped at patch borders");
        }
        Ok(())
    }
}

fn split_of(i: usize) -> &'static str {
    match i % 5 {
        0..=2 => SPLITS[0],
        3 => SPLITS[1],
        _ => SPLITS[2],
    }
}

/// Cell orientation: `true` = long axis vertical.
fn orientations(class: usize, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    match class {
        1 => vec![rng.gen::<bool>(); rows * cols],
        2 => {
            let phase = rng.gen_range(0..2);
            (0..rows * cols).map(|n| (n / cols + n % cols + phase) % 2 == 1).collect()
        }
        _ => (0..rows * cols).map(|_| rng.gen::<bool>()).collect(),
    }
}

struct Rendered {
    pixels: Vec<u8>,
    mask: Mask,
}

fn render(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Rendered {
    let size = spec.image_size;
    let p = spec.patch_size;
    let g = spec.grid();
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
    let mut canvas: Vec<f64> = (0..size * size).map(|_| BACKGROUND_LEVEL + noise.sample(rng)).collect();
    let mut cells = vec![BACKGROUND; g * g];
    if class != BACKGROUND {
        let lo = spec.min_tissue_cells.clamp(1, g);
        let (h, w) = (rng.gen_range(lo..=g), rng.gen_range(lo..=g));
        let (top, left) = (rng.gen_range(0..=g - h), rng.gen_range(0..=g - w));
        let orient = orientations(class, h, w, rng);
        let amp = BLOB_AMPLITUDE * (1.0 + spec.hyperchromasia * (class - 1) as f64);
        for i in 0..h {
            for j in 0..w {
                let (ci, cj) = (top + i, left + j);
                cells[ci * g + cj] = class;
                let d = spec.distortion;
                let mut jitter = || if d > 0.0 { rng.gen_range(-d..=d) } else { 0.0 };
                let cy = (ci * p) as f64 + p as f64 / 2.0 + jitter();
                let cx = (cj * p) as f64 + p as f64 / 2.0 + jitter();
                let (ry, rx) = if orient[i * w + j] {
                    (spec.ring_radius, spec.ring_radius * RING_ASPECT)
                } else {
                    (spec.ring_radius * RING_ASPECT, spec.ring_radius)
                };
                let n = spec.blob_density.max(1);
                let blobs: Vec<(f64, f64)> = (0..n)
                    .map(|k| {
                        let t = std::f64::consts::TAU * k as f64 / n as f64;
                        (cy + ry * t.sin() + jitter(), cx + rx * t.cos() + jitter())
                    })
                    .collect();
                let (y0, x0) = (ci * p, cj * p);
                for (by, bx) in blobs {
                    splat(&mut canvas, size, (y0, x0, p), (by, bx), spec.blob_sigma, amp);
                }
            }
        }
    }
    let pixels = canvas.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Rendered {
        pixels,
        mask: Mask::new(g, g, cells).expect("square grid"),
    }
}

/// Adds a Gaussian blob, clipped to its own cell so no motif leaks into a
/// neighbouring patch.
fn splat(canvas: &mut [f64], size: usize, cell: (usize, usize, usize), centre: (f64, f64), sigma: f64, amp: f64) {
    let (y0, x0, p) = cell;
    let r = (3.0 * sigma).ceil() as isize;
    let (cy, cx) = (centre.0.round() as isize, centre.1.round() as isize);
    for y in (cy - r).max(y0 as isize)..=(cy + r).min((y0 + p) as isize - 1) {
        for x in (cx - r).max(x0 as isize)..=(cx + r).min((x0 + p) as isize - 1) {
            let dy = y as f64 - centre.0;
            let dx = x as f64 - centre.1;
            canvas[y as usize * size + x as usize] += amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Overlap coefficient of two normal densities, by numerical integration.
pub fn gaussian_overlap(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let s1 = s1.max(1e-12);
    let s2 = s2.max(1e-12);
    let pdf = |x: f64, m: f64, s: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (std::f64::consts::TAU).sqrt());
    let lo = (m1 - 8.0 * s1).min(m2 - 8.0 * s2);
    let hi = (m1 + 8.0 * s1).max(m2 + 8.0 * s2);
    let steps = 20_000;
    let dx = (hi - lo) / steps as f64;
    (0..steps)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * dx;
            pdf(x, m1, s1).min(pdf(x, m2, s2))
        })
        .sum::<f64>()
        * dx
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Per-class (mean, variance) of single tissue cells.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AmbiguityReport {
    /// Minimum pairwise overlap over tissue classes for cell means.
    pub mean_overlap: f64,
    /// Same for cell variances.
    pub variance_overlap: f64,
}

impl AmbiguityReport {
    pub fn passes(&self) -> bool {
        self.mean_overlap >= AMBIGUITY_THRESHOLD && self.variance_overlap >= AMBIGUITY_THRESHOLD
    }
}

fn ambiguity(spec: &SyntheticSpec, images: &[(usize, Rendered)]) -> AmbiguityReport {
    let p = spec.patch_size;
    let size = spec.image_size;
    let mut stats: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); CLASS_NAMES.len()];
    for (class, r) in images {
        for (n, &c) in r.mask.cells.iter().enumerate() {
            if c == BACKGROUND {
                continue;
            }
            let (i, j) = (n / r.mask.cols, n % r.mask.cols);
            let vals: Vec<f64> = (0..p * p)
                .map(|k| r.pixels[(i * p + k / p) * size + j * p + k % p] as f64 / 255.0)
                .collect();
            let (m, s) = mean_std(&vals);
            stats[*class].0.push(m);
            stats[*class].1.push(s * s);
        }
    }
    let mut report = AmbiguityReport {
        mean_overlap: 1.0,
        variance_overlap: 1.0,
    };
    for a in 1..CLASS_NAMES.len() {
        for b in a + 1..CLASS_NAMES.len() {
            let (ma, sa) = mean_std(&stats[a].0);
            let (mb, sb) = mean_std(&stats[b].0);
            report.mean_overlap = report.mean_overlap.min(gaussian_overlap(ma, sa, mb, sb));
            let (ma, sa) = mean_std(&stats[a].1);
            let (mb, sb) = mean_std(&stats[b].1);
            report.variance_overlap = report.variance_overlap.min(gaussian_overlap(ma, sa, mb, sb));
        }
    }
    report
}

/// Renders the dataset described by `spec` into `out` (manifest, PNG
/// images, mask grids). Fails without writing if single motifs would be
/// distinguishable between tissue classes.
pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<AmbiguityReport> {
    spec.check()?;
    let jobs: Vec<(usize, usize)> = (0..CLASS_NAMES.len())
        .flat_map(|c| (0..spec.per_class[c]).map(move |i| (c, i)))
        .collect();
    let rendered: Vec<(usize, Rendered)> = jobs
        .par_iter()
        .enumerate()
        .map(|(n, &(class, _))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(n as u64);
            (class, render(spec, class, &mut rng))
        })
        .collect();
    let report = ambiguity(spec, &rendered);
    if !report.passes() {
        return Err(Error::Generation(format!(
            "single-motif statistics separate the tissue classes (mean overlap {:.3}, variance overlap {:.3}, need >= {AMBIGUITY_THRESHOLD})",
            report.mean_overlap, report.variance_overlap
        )));
    }
    for d in ["images", "masks"] {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rows = Vec::with_capacity(jobs.len());
    for (&(class, i), (_, r)) in jobs.iter().zip(&rendered) {
        let id = format!("{}_{i:03}", CLASS_NAMES[class]);
        let path = format!("images/{id}.png");
        let mask_path = format!("masks/{id}.txt");
        write_gray(&out.join(&path), &r.pixels, spec.image_size, spec.image_size)?;
        let mp = out.join(&mask_path);
        fs::write(&mp, r.mask.to_text()).map_err(|e| Error::io(&mp, e))?;
        rows.push(ManifestRow {
            id,
            path,
            label: CLASS_NAMES[class].to_owned(),
            fold: split_of(i).to_owned(),
            mask_path,
        });
    }
    write_manifest(out, &rows)?;
    let sp = out.join("synthetic.json");
    fs::write(&sp, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&sp, e))?;
    Ok(report)
}

/// Single patches that are separable by construction: background noise,
/// horizontal ring, vertical ring, and scattered blobs. Used to check that
/// an extractor can learn local motifs at all.
pub fn motif_patch_set(patch_size: usize, per_class: usize, seed: u64) -> Result<PatchSet> {
    let spec = SyntheticSpec {
        patch_size,
        ring_radius: (patch_size as f64 * 0.27).max(3.0),
        blob_sigma: (patch_size as f64 * 0.04).max(1.0),
        distortion: patch_size as f64 * 0.02,
        ..SyntheticSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).expect("finite");
    let mut set = PatchSet::default();
    let p = patch_size;
    for n in 0..per_class * 4 {
        let class = n % 4;
        let mut canvas: Vec<f64> = (0..p * p).map(|_| BACKGROUND_LEVEL + noise.sample(&mut rng)).collect();
        let c = p as f64 / 2.0;
        let blobs: Vec<(f64, f64)> = match class {
            0 => vec![],
            1 | 2 => {
                let (ry, rx) = if class == 2 {
                    (spec.ring_radius, spec.ring_radius * RING_ASPECT)
                } else {
                    (spec.ring_radius * RING_ASPECT, spec.ring_radius)
                };
                (0..spec.blob_density)
                    .map(|k| {
                        let t = std::f64::consts::TAU * k as f64 / spec.blob_density as f64;
                        let d = spec.distortion;
                        (c + ry * t.sin() + rng.gen_range(-d..=d), c + rx * t.cos() + rng.gen_range(-d..=d))
                    })
                    .collect()
            }
            _ => (0..spec.blob_density)
                .map(|_| (rng.gen_range(0.0..p as f64), rng.gen_range(0.0..p as f64)))
                .collect(),
        };
        for b in blobs {
            splat(&mut canvas, p, (0, 0, p), b, spec.blob_sigma, BLOB_AMPLITUDE);
        }
        let data = canvas.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        set.push(Tensor::new(vec![1, p, p], data)?, class);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_sizes_for_139_images() {
        let labels: Vec<usize> = (0..139).map(|i| i % 3).collect();
        let folds = stratified_folds(&labels, 3).unwrap();
        let mut sizes = [0; 3];
        for f in folds {
            sizes[f] += 1;
        }
        assert_eq!(sizes, [47, 46, 46]);
    }

    #[test]
    fn sparse_class_cannot_be_stratified() {
        assert!(matches!(
            stratified_folds(&[0, 0, 0, 1, 1], 3),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn mask_text_round_trips() {
        let m = Mask::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        assert_eq!(Mask::parse(&m.to_text()).unwrap(), m);
        assert!((m.roi_ratio() - 4.0 / 6.0).abs() < 1e-15);
        assert!(Mask::parse("1 2\n3\n").is_err());
    }

    #[test]
    fn overlap_of_identical_and_distant_gaussians() {
        assert!((gaussian_overlap(0.0, 1.0, 0.0, 1.0) - 1.0).abs() < 1e-6);
        assert!(gaussian_overlap(0.0, 1.0, 10.0, 1.0) < 1e-4);
    }

    #[test]
    fn split_pattern_is_three_one_one() {
        let counts = (0..25).fold([0; 3], |mut acc, i| {
            acc[SPLITS.iter().position(|s| *s == split_of(i)).unwrap()] += 1;
            acc
        });
        assert_eq!(counts, [15, 5, 5]);
    }
}
