//! Datasets of 2-D slices: synthetic generation, on-disk slice containers,
//! patient-level splitting, augmentation, and deterministic batch order.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, EvilError, Result};
use crate::npy;

/// Number of classes in the cardiac layout (background, RV, myocardium, LV).
pub const CARDIAC_CLASSES: usize = 4;

/// One 2-D slice. Unlabeled samples carry `label: None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, intensities normalized to `[0, 1]`.
    pub image: Array3<f32>,
    pub label: Option<Array2<u8>>,
    pub patient_id: String,
    pub slice_index: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Drops the label, turning a labeled slice into an unlabeled one.
    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }

    /// File stem used for the on-disk slice container.
    pub fn stem(&self) -> String {
        format!("{}_slice_{}", self.patient_id, self.slice_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Patient identifiers in order of first appearance.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.patient_id.clone()))
            .map(|s| s.patient_id.clone())
            .collect()
    }

    /// Samples whose patient is in `ids`, preserving order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.patient_id))
                .cloned()
                .collect(),
            num_classes: self.num_classes,
        }
    }

    /// Per-class pixel counts over all labeled samples.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for label in self.samples.iter().filter_map(|s| s.label.as_ref()) {
            for &c in label.iter() {
                counts[c as usize] += 1;
            }
        }
        counts
    }
}

/// Parameters of the synthetic cardiac-like dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub size: usize,
    pub num_classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_patients: 30,
            slices_per_patient: 8,
            size: 32,
            num_classes: CARDIAC_CLASSES,
            noise_std: 0.2,
            seed: 0,
        }
    }
}

pub const MIN_SYNTHETIC_SIZE: usize = 16;

/// Per-patient anatomy and contrast, fixed across that patient's slices.
struct PatientAnatomy {
    center: (f64, f64),
    lv_radius: f64,
    wall: f64,
    rv_angle: f64,
    rv_scale: f64,
    elongation: f64,
    tilt: f64,
    /// Intensity for background, RV, myocardium, LV.
    levels: [f64; 4],
}

impl PatientAnatomy {
    fn draw(size: f64, rng: &mut ChaCha8Rng) -> Self {
        let jitter = size / 10.0;
        let bg = rng.random_range(0.05..0.25);
        let myo = bg + rng.random_range(0.12..0.3);
        let rv = myo + rng.random_range(0.15..0.3);
        let lv = rv + rng.random_range(0.12..0.3);
        PatientAnatomy {
            center: (
                size / 2.0 + rng.random_range(-jitter..jitter),
                size / 2.0 + rng.random_range(-jitter..jitter),
            ),
            lv_radius: size * rng.random_range(0.09..0.15),
            wall: size * rng.random_range(0.045..0.075),
            rv_angle: rng.random_range(0.0..2.0 * PI),
            rv_scale: rng.random_range(1.05..1.35),
            elongation: rng.random_range(1.0..1.3),
            tilt: rng.random_range(0.0..PI),
            levels: [bg, rv, myo, lv],
        }
    }
}

fn paint_slice(anat: &PatientAnatomy, size: usize, slice: usize, n_slices: usize, rng: &mut ChaCha8Rng) -> Array2<u8> {
    // structures shrink from base to apex
    let frac = if n_slices > 1 { slice as f64 / (n_slices - 1) as f64 } else { 0.0 };
    let shrink = 1.0 - 0.35 * frac;
    let r_lv = anat.lv_radius * shrink * rng.random_range(0.92..1.08);
    let r_epi = r_lv + anat.wall * rng.random_range(0.9..1.1);
    let drift = size as f64 / 40.0;
    let (cx, cy) = (
        anat.center.0 + rng.random_range(-drift..drift),
        anat.center.1 + rng.random_range(-drift..drift),
    );
    let angle = anat.rv_angle + rng.random_range(-0.2..0.2);
    let rv_radius = r_epi * anat.rv_scale;
    let rv_offset = r_epi * 0.95;
    let (rx, ry) = (cx + rv_offset * angle.cos(), cy + rv_offset * angle.sin());
    let (ct, st) = (anat.tilt.cos(), anat.tilt.sin());
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (px - cx, py - cy);
        // elliptical distance in a tilted frame
        let u = (dx * ct + dy * st) / anat.elongation;
        let v = -dx * st + dy * ct;
        let d = (u * u + v * v).sqrt();
        if d < r_lv {
            3
        } else if d < r_epi {
            2
        } else if ((px - rx).powi(2) + (py - ry).powi(2)).sqrt() < rv_radius {
            1
        } else {
            0
        }
    })
}

/// Background blobs standing in for neighbouring organs. Their intensity sits
/// halfway between two structure levels, so they are distinct from every
/// structure yet close enough to need shape context once noise is added.
fn paint_distractors(image: &mut Array2<f64>, label: &Array2<u8>, anat: &PatientAnatomy, rng: &mut ChaCha8Rng) {
    let size = image.nrows() as f64;
    let [_, rv, myo, lv] = anat.levels;
    for _ in 0..rng.random_range(1..=3) {
        let level = if rng.random_bool(0.5) { 0.5 * (myo + rv) } else { 0.5 * (rv + lv) };
        let (cx, cy) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let (rx, ry) = (size * rng.random_range(0.04..0.1), size * rng.random_range(0.04..0.1));
        for ((y, x), v) in image.indexed_iter_mut() {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            if dx * dx + dy * dy < 1.0 && label[[y, x]] == 0 {
                *v = level;
            }
        }
    }
}

/// Generates a deterministic cardiac-like dataset: an LV disk (class 3) inside
/// a myocardial annulus (class 2) next to an RV crescent (class 1).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    ensure!(spec.n_patients >= 1, Config, "n_patients must be at least 1");
    ensure!(spec.slices_per_patient >= 1, Config, "slices_per_patient must be at least 1");
    ensure!(
        spec.num_classes == CARDIAC_CLASSES,
        Config,
        "the synthetic layout has exactly {CARDIAC_CLASSES} classes, got {}",
        spec.num_classes
    );
    ensure!(
        spec.size >= MIN_SYNTHETIC_SIZE,
        Validation,
        "size {} is too small to place the structures (minimum {MIN_SYNTHETIC_SIZE})",
        spec.size
    );
    ensure!(spec.noise_std >= 0.0, Config, "noise_std must be nonnegative");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut samples = Vec::with_capacity(spec.n_patients * spec.slices_per_patient);
    for p in 0..spec.n_patients {
        let anat = PatientAnatomy::draw(spec.size as f64, &mut rng);
        let patient_id = format!("patient{:03}", p + 1);
        for s in 0..spec.slices_per_patient {
            let label = paint_slice(&anat, spec.size, s, spec.slices_per_patient, &mut rng);
            let mut image = label.mapv(|c| anat.levels[c as usize]);
            paint_distractors(&mut image, &label, &anat, &mut rng);
            if spec.noise_std > 0.0 {
                image.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            samples.push(Sample {
                image: normalize_min_max(&image).insert_axis(Axis(0)),
                label: Some(label),
                patient_id: patient_id.clone(),
                slice_index: s,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes: spec.num_classes,
    })
}

/// Per-slice min-max normalization to `[0, 1]`; constant slices map to 0.
pub fn normalize_min_max(image: &Array2<f64>) -> Array2<f32> {
    let lo = image.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = image.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let range = hi - lo;
    if range <= 0.0 {
        return Array2::zeros(image.raw_dim());
    }
    image.mapv(|v| ((v - lo) / range) as f32)
}

/// Train/validation/test partition of a dataset's patients.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientPartition {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Patient-level 70/10/20 partition (the ACDC proportions), shuffled by `seed`.
pub fn partition_patients(patients: &[String], seed: u64) -> Result<PatientPartition> {
    let n = patients.len();
    ensure!(n >= 3, Config, "need at least 3 patients to form train/val/test sets, got {n}");
    let mut ids = patients.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7061_7274));
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = ((n as f64 * 0.2).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    ensure!(n_train >= 1, Config, "too few patients for a training set");
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort();
    val.sort();
    test.sort();
    Ok(PatientPartition { train, val, test })
}

/// How many training patients receive labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabeledAmount {
    Ratio(f64),
    Patients(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub labeled: LabeledAmount,
    pub seed: u64,
}

impl SplitSpec {
    pub fn labeled_count(&self, n_patients: usize) -> Result<usize> {
        let count = match self.labeled {
            LabeledAmount::Ratio(r) => {
                ensure!(r > 0.0 && r <= 1.0, Config, "labeled ratio must lie in (0, 1], got {r}");
                ((n_patients as f64 * r).round() as usize).max(1)
            }
            LabeledAmount::Patients(k) => k,
        };
        ensure!(
            count <= n_patients,
            Config,
            "requested {count} labeled patients but only {n_patients} are available"
        );
        ensure!(count >= 1, Config, "at least one labeled patient is required");
        Ok(count)
    }
}

/// Patients selected for labeling, sorted.
pub fn labeled_patients(patients: &[String], spec: &SplitSpec) -> Result<Vec<String>> {
    let count = spec.labeled_count(patients.len())?;
    let mut ids = patients.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut chosen = ids[..count].to_vec();
    chosen.sort();
    Ok(chosen)
}

/// Patient-level labeled/unlabeled split; unlabeled samples lose their labels.
pub fn split_labeled(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let chosen: BTreeSet<String> = labeled_patients(&dataset.patients(), spec)?.into_iter().collect();
    split_by_patients(dataset, &chosen)
}

/// Splits by an explicit labeled-patient list (e.g. read from a split file).
pub fn split_by_patients(dataset: &Dataset, labeled: &BTreeSet<String>) -> Result<(Dataset, Dataset)> {
    let mut lab = Vec::new();
    let mut unlab = Vec::new();
    for s in &dataset.samples {
        if labeled.contains(&s.patient_id) {
            ensure!(
                s.label.is_some(),
                Validation,
                "labeled patient {} has an unlabeled slice",
                s.patient_id
            );
            lab.push(s.clone());
        } else {
            unlab.push(s.clone().unlabeled());
        }
    }
    Ok((
        Dataset { samples: lab, num_classes: dataset.num_classes },
        Dataset { samples: unlab, num_classes: dataset.num_classes },
    ))
}

/// Name of a labeled-patient split file, e.g. `labeled_0.10_3.txt`.
pub fn split_file_name(amount: &LabeledAmount, seed: u64) -> String {
    match amount {
        LabeledAmount::Ratio(r) => format!("labeled_{r:.2}_{seed}.txt"),
        LabeledAmount::Patients(k) => format!("labeled_{k}p_{seed}.txt"),
    }
}

pub fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| EvilError::io(path, e))
}

pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| EvilError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Writes one `.npz` container per slice under `root/slices/` plus a list
/// file naming every slice. Returns the list file path.
pub fn write_slices(root: &Path, dataset: &Dataset, list_name: &str) -> Result<PathBuf> {
    let dir = root.join("slices");
    fs::create_dir_all(&dir).map_err(|e| EvilError::io(&dir, e))?;
    let mut stems = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let stem = s.stem();
        let image = s.image.index_axis(Axis(0), 0).to_owned();
        let mut entries = vec![("image", npy::encode_f32(&image))];
        if let Some(label) = &s.label {
            entries.push(("label", npy::encode_u8(label)));
        }
        npy::write_npz(&dir.join(format!("{stem}.npz")), &entries)?;
        stems.push(stem);
    }
    let list = root.join(list_name);
    write_id_list(&list, &stems)?;
    Ok(list)
}

fn parse_stem(stem: &str, fallback_index: usize) -> (String, usize) {
    let patient = stem.split('_').next().unwrap_or(stem).to_string();
    let index = stem
        .rsplit_once("_slice_")
        .and_then(|(_, i)| i.parse().ok())
        .unwrap_or(fallback_index);
    (patient, index)
}

/// Loads the slices named in `split_file` from `root/slices/<stem>.npz`.
///
/// Images are resized to `size x size` (bilinear; labels nearest-neighbor)
/// and min-max normalized. Labels must lie in `[0, num_classes)`.
pub fn load_slices(root: &Path, split_file: &Path, size: usize, num_classes: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(EvilError::ingestion(root, "dataset not found"));
    }
    let split_path = if split_file.is_absolute() { split_file.to_path_buf() } else { root.join(split_file) };
    if !split_path.is_file() {
        return Err(EvilError::ingestion(&split_path, "dataset not found: split file is missing"));
    }
    let stems = read_id_list(&split_path)?;
    ensure!(!stems.is_empty(), Validation, "split file {} lists no slices", split_path.display());
    let mut samples = Vec::with_capacity(stems.len());
    for (i, stem) in stems.iter().enumerate() {
        let path = root.join("slices").join(format!("{stem}.npz"));
        if !path.is_file() {
            return Err(EvilError::ingestion(&path, "slice file is missing"));
        }
        let image = npy::read_npz_array(&path, "image")?;
        let label = npy::read_npz_array(&path, "label")?;
        if image.dim() != label.dim() {
            return Err(EvilError::ingestion(
                &path,
                format!("image shape {:?} differs from label shape {:?}", image.dim(), label.dim()),
            ));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(EvilError::ingestion(&path, "image contains non-finite values"));
        }
        if let Some(bad) = label
            .iter()
            .find(|&&v| v < 0.0 || v.fract() != 0.0 || v as usize >= num_classes)
        {
            return Err(EvilError::ingestion(
                &path,
                format!("label value {bad} outside [0, {num_classes})"),
            ));
        }
        let image = resize_bilinear(&image, size, size);
        let label = resize_nearest(&label.mapv(|v| v as u8), size, size);
        let (patient_id, slice_index) = parse_stem(stem, i);
        samples.push(Sample {
            image: normalize_min_max(&image).insert_axis(Axis(0)),
            label: Some(label),
            patient_id,
            slice_index,
        });
    }
    Ok(Dataset { samples, num_classes })
}

/// ACDC slices converted to the per-slice container layout; `K = 4`, 256 x 256.
pub fn load_acdc(root: &Path, split_file: &Path) -> Result<Dataset> {
    load_slices(root, split_file, 256, CARDIAC_CLASSES)
}

pub fn resize_bilinear(img: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = img[[y0, x0]] * (1.0 - tx) + img[[y0, x1]] * tx;
        let bottom = img[[y1, x0]] * (1.0 - tx) + img[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

pub fn resize_nearest<T: Copy>(img: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        img[[sy, sx]]
    })
}

/// One concrete draw of the augmentation policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    /// Small-angle rotation in degrees, within `±MAX_SMALL_ROTATION`.
    pub rotation_deg: f64,
    /// Crop window `(top, left, side)`; the crop is reflect-padded back to full size.
    pub crop: Option<(usize, usize, usize)>,
}

pub const MAX_SMALL_ROTATION: f64 = 20.0;
/// Crops keep at least this fraction of the side length.
pub const MIN_CROP_FRACTION: f64 = 0.85;

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            quarter_turns: 0,
            flip_horizontal: false,
            rotation_deg: 0.0,
            crop: None,
        }
    }

    /// Random draw for a square slice of side `size`.
    pub fn draw(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = AugmentParams::identity();
        if rng.random_bool(0.5) {
            p.quarter_turns = rng.random_range(0..4);
            p.flip_horizontal = rng.random_bool(0.5);
        }
        if rng.random_bool(0.5) {
            p.rotation_deg = rng.random_range(-MAX_SMALL_ROTATION..MAX_SMALL_ROTATION);
        }
        if rng.random_bool(0.5) {
            let min_side = ((size as f64 * MIN_CROP_FRACTION).ceil() as usize).min(size);
            let side = rng.random_range(min_side..=size);
            let top = rng.random_range(0..=size - side);
            let left = rng.random_range(0..=size - side);
            p.crop = Some((top, left, side));
        }
        p
    }
}

/// Draws augmentation parameters from `seed` and applies them.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::draw(sample.height().min(sample.width()), &mut rng);
    apply_augment(sample, &params)
}

/// Applies the same spatial transform to image and label.
pub fn apply_augment(sample: &Sample, p: &AugmentParams) -> Sample {
    let mut image = sample.image.index_axis(Axis(0), 0).to_owned();
    let mut label = sample.label.clone();
    for _ in 0..p.quarter_turns % 4 {
        image = rot90(&image);
        label = label.map(|l| rot90(&l));
    }
    if p.flip_horizontal {
        image.invert_axis(Axis(1));
        label.iter_mut().for_each(|l| l.invert_axis(Axis(1)));
    }
    if p.rotation_deg != 0.0 {
        image = rotate(&image, p.rotation_deg, |img, y, x| bilinear_at(img, y, x));
        label = label.map(|l| rotate(&l, p.rotation_deg, |img, y, x| nearest_at(img, y, x)));
    }
    if let Some((top, left, side)) = p.crop {
        image = crop_reflect(&image, top, left, side);
        label = label.map(|l| crop_reflect(&l, top, left, side));
    }
    Sample {
        image: image.insert_axis(Axis(0)),
        label,
        patient_id: sample.patient_id.clone(),
        slice_index: sample.slice_index,
    }
}

/// Counter-clockwise quarter turn.
pub fn rot90<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(y, x)| a[[x, w - 1 - y]])
}

fn bilinear_at(img: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[[y0, x0]] * (1.0 - tx) + img[[y0, x1]] * tx;
    let bottom = img[[y1, x0]] * (1.0 - tx) + img[[y1, x1]] * tx;
    top * (1.0 - ty) + bottom * ty
}

fn nearest_at(img: &Array2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = img.dim();
    let (ry, rx) = (y.round(), x.round());
    if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
        return 0;
    }
    img[[ry as usize, rx as usize]]
}

/// Rotation about the slice center; pixels mapped from outside are zero.
fn rotate<T: Copy + Default>(img: &Array2<T>, degrees: f64, sample: impl Fn(&Array2<T>, f64, f64) -> T) -> Array2<T> {
    let (h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // inverse map: output pixel -> source location
        let sx = c * dx + s * dy + cx;
        let sy = -s * dx + c * dy + cy;
        sample(img, sy, sx)
    })
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Crops a `side x side` window and reflect-pads it back to the input size,
/// keeping the window centered.
fn crop_reflect<T: Copy>(img: &Array2<T>, top: usize, left: usize, side: usize) -> Array2<T> {
    let (h, w) = img.dim();
    let window = img.slice(ndarray::s![top..top + side, left..left + side]);
    let (pad_y, pad_x) = (((h - side) / 2) as isize, ((w - side) / 2) as isize);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let wy = reflect_index(y as isize - pad_y, side);
        let wx = reflect_index(x as isize - pad_x, side);
        window[[wy, wx]]
    })
}

/// Deterministic infinite stream of dataset indices: epoch `e` visits a
/// permutation seeded by `(seed, stream, e)`, so position `p` maps to the
/// same index regardless of how the stream was consumed before.
#[derive(Debug, Clone, Copy)]
pub struct EpochSampler {
    pub len: usize,
    pub seed: u64,
    pub stream: u64,
}

impl EpochSampler {
    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        let mix = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(epoch);
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
        idx
    }

    /// Indices at stream positions `start..start + count`.
    pub fn take(&self, start: u64, count: usize) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let n = self.len as u64;
        let mut out = Vec::with_capacity(count);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for p in start..start + count as u64 {
            let epoch = p / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.permutation(epoch)));
            }
            out.push(cached.as_ref().expect("set above").1[(p % n) as usize]);
        }
        out
    }
}

/// Stacks sample images into an `[N, 1, H, W]` batch.
pub fn stack_images(samples: &[&Sample]) -> Array4<f32> {
    let views: Vec<_> = samples.iter().map(|s| s.image.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal image shapes")
}

/// Stacks labels into an `[N, H, W]` grid; panics on unlabeled samples.
pub fn stack_labels(samples: &[&Sample]) -> Array3<u8> {
    let views: Vec<_> = samples
        .iter()
        .map(|s| s.label.as_ref().expect("labeled sample").view())
        .collect();
    ndarray::stack(Axis(0), &views).expect("equal label shapes")
}
