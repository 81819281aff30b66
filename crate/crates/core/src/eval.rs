//! Segmentation metrics, uncertainty maps and report/figure output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, EvilError, Result};
use crate::evidential::{belief_and_uncertainty, default_tau, evidence_from_logits, Logits};
use crate::loss::softmax_classes;
use crate::nn::{forward_with_dropout_samples, UNet};

/// What to report for a surface metric when a mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyMaskPolicy {
    /// Leave the value out of the aggregate and log a warning.
    #[default]
    Skip,
    /// Report the image diagonal, the largest possible distance.
    Diagonal,
}

fn check_shapes(a: &ArrayView2<bool>, b: &ArrayView2<bool>) -> Result<()> {
    ensure!(
        a.dim() == b.dim(),
        Validation,
        "mask shapes differ: {:?} vs {:?}",
        a.dim(),
        b.dim()
    );
    Ok(())
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dsc(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<f64> {
    check_shapes(&pred, &gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground pixels with at least one background 4-neighbor; pixels
/// outside the image count as background.
pub fn boundary(mask: ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        mask[[y, x]]
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]])
    })
}

/// One-dimensional lower envelope pass of the exact squared distance transform.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so this stops at k = 0
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if f[v[0]].is_infinite() {
        out.fill(f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `seeds`; infinite everywhere if `seeds` is empty.
pub fn squared_distance_transform(seeds: ArrayView2<bool>) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let mut grid = seeds.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for mut col in grid.columns_mut() {
        f[..h].iter_mut().zip(col.iter()).for_each(|(a, &b)| *a = b);
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        col.iter_mut().zip(&out[..h]).for_each(|(a, &b)| *a = b);
    }
    for mut row in grid.rows_mut() {
        f[..w].iter_mut().zip(row.iter()).for_each(|(a, &b)| *a = b);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        row.iter_mut().zip(&out[..w]).for_each(|(a, &b)| *a = b);
    }
    grid
}

/// Distances from each boundary pixel of `a` to the boundary of `b`, followed
/// by those from `b` to `a`. `None` if either mask is empty.
pub fn symmetric_surface_distances(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<Option<Vec<f64>>> {
    check_shapes(&a, &b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    if !ba.iter().any(|&v| v) || !bb.iter().any(|&v| v) {
        return Ok(None);
    }
    let (da, db) = (squared_distance_transform(ba.view()), squared_distance_transform(bb.view()));
    let mut out = Vec::new();
    out.extend(ba.iter().zip(db.iter()).filter(|(&m, _)| m).map(|(_, &d)| d.sqrt()));
    out.extend(bb.iter().zip(da.iter()).filter(|(&m, _)| m).map(|(_, &d)| d.sqrt()));
    Ok(Some(out))
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn surface_metric(
    a: ArrayView2<bool>,
    b: ArrayView2<bool>,
    policy: EmptyMaskPolicy,
    name: &str,
    reduce: impl Fn(&[f64]) -> f64,
) -> Result<Option<f64>> {
    match symmetric_surface_distances(a, b)? {
        Some(d) => Ok(Some(reduce(&d))),
        None => match policy {
            EmptyMaskPolicy::Skip => {
                log::warn!("{name}: empty mask, value skipped");
                Ok(None)
            }
            EmptyMaskPolicy::Diagonal => {
                let (h, w) = a.dim();
                Ok(Some(((h * h + w * w) as f64).sqrt()))
            }
        },
    }
}

/// 95th percentile of the pooled symmetric surface distances, in pixels.
pub fn hd95(pred: ArrayView2<bool>, gt: ArrayView2<bool>, policy: EmptyMaskPolicy) -> Result<Option<f64>> {
    surface_metric(pred, gt, policy, "hd95", |d| percentile(d, 95.0))
}

/// Mean of the pooled symmetric surface distances, in pixels.
pub fn asd(pred: ArrayView2<bool>, gt: ArrayView2<bool>, policy: EmptyMaskPolicy) -> Result<Option<f64>> {
    surface_metric(pred, gt, policy, "asd", |d| {
        // summing in sorted order keeps asd(a, b) == asd(b, a) bit for bit
        let mut v = d.to_vec();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Metrics for every foreground class `1..K` of one case.
pub fn evaluate_case(
    pred: ArrayView2<u8>,
    gt: ArrayView2<u8>,
    num_classes: usize,
    policy: EmptyMaskPolicy,
) -> Result<Vec<ClassMetrics>> {
    ensure!(pred.dim() == gt.dim(), Validation, "prediction shape {:?} differs from label shape {:?}", pred.dim(), gt.dim());
    (1..num_classes)
        .map(|c| {
            let p = pred.mapv(|v| v as usize == c);
            let g = gt.mapv(|v| v as usize == c);
            let d = symmetric_surface_distances(p.view(), g.view())?;
            let (hd, sd) = match d {
                Some(d) => (Some(percentile(&d, 95.0)), Some(d.iter().sum::<f64>() / d.len() as f64)),
                None => (
                    surface_metric(p.view(), g.view(), policy, "hd95", |_| 0.0)?,
                    surface_metric(p.view(), g.view(), policy, "asd", |_| 0.0)?,
                ),
            };
            Ok(ClassMetrics {
                class: c,
                dsc: dsc(p.view(), g.view())?,
                hd95: hd,
                asd: sd,
            })
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Per-case, per-class metrics; aggregates average over foreground classes
/// within a case, then over cases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub cases: Vec<(String, Vec<ClassMetrics>)>,
}

impl MetricReport {
    pub fn push(&mut self, case: impl Into<String>, metrics: Vec<ClassMetrics>) {
        self.cases.push((case.into(), metrics));
    }

    pub fn case_mean(metrics: &[ClassMetrics]) -> Aggregate {
        Aggregate {
            dsc: metrics.iter().map(|m| m.dsc).sum::<f64>() / metrics.len().max(1) as f64,
            hd95: mean_of(metrics.iter().map(|m| m.hd95)),
            asd: mean_of(metrics.iter().map(|m| m.asd)),
        }
    }

    pub fn aggregate(&self) -> Aggregate {
        let per_case: Vec<Aggregate> = self.cases.iter().map(|(_, m)| Self::case_mean(m)).collect();
        Aggregate {
            dsc: per_case.iter().map(|a| a.dsc).sum::<f64>() / per_case.len().max(1) as f64,
            hd95: mean_of(per_case.iter().map(|a| a.hd95)),
            asd: mean_of(per_case.iter().map(|a| a.asd)),
        }
    }

    /// Mean DSC of each foreground class over cases.
    pub fn per_class_dsc(&self) -> Vec<f64> {
        let Some((_, first)) = self.cases.first() else {
            return Vec::new();
        };
        (0..first.len())
            .map(|i| self.cases.iter().map(|(_, m)| m[i].dsc).sum::<f64>() / self.cases.len() as f64)
            .collect()
    }

    /// CSV with columns `case,class,dsc,hd95,asd` plus a final `mean,all` row.
    /// Skipped surface values are written as empty fields.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("case,class,dsc,hd95,asd\n");
        for (case, metrics) in &self.cases {
            for m in metrics {
                out += &format!("{case},{},{:.6},{},{}\n", m.class, m.dsc, fmt(m.hd95), fmt(m.asd));
            }
        }
        let a = self.aggregate();
        out += &format!("mean,all,{:.6},{},{}\n", a.dsc, fmt(a.hd95), fmt(a.asd));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| EvilError::io(path, e))
    }
}

/// Per-pixel entropy of class probabilities `[B, K, H, W]`, divided by `ln K`.
pub fn normalized_entropy(probs: &Array4<f64>) -> Array3<f64> {
    let k = probs.shape()[1];
    let norm = (k as f64).ln();
    probs.map_axis(Axis(1), |p| {
        -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>() / norm
    })
}

/// Predictive entropy of the mean softmax over `n_samples` dropout forwards,
/// scaled to `[0, 1]`. Returns `[B, H, W]`.
pub fn mc_dropout_uncertainty(
    net: &UNet<f32>,
    image: &Array4<f32>,
    n_samples: usize,
    rate: f64,
    seed: u64,
) -> Result<Array3<f64>> {
    let draws = forward_with_dropout_samples(net, image, n_samples, rate, seed)?;
    let mut mean = Array4::<f64>::zeros(draws[0].raw_dim());
    for d in &draws {
        mean += &softmax_classes(&d.mapv(f64::from));
    }
    mean /= n_samples as f64;
    Ok(normalized_entropy(&mean))
}

/// Single-pass evidential prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[B, H, W]`, argmax of belief.
    pub classes: Array3<u8>,
    /// `[B, H, W]`.
    pub uncertainty: Array3<f64>,
    /// `[B, K, H, W]`.
    pub belief: Array4<f64>,
}

/// One inference forward of the evidential network, no sampling.
pub fn predict_with_uncertainty(net: &UNet<f32>, image: &Array4<f32>) -> Result<Prediction> {
    let logits = Logits::new(net.forward(image)?.mapv(f64::from))?;
    let k = logits.num_classes();
    let params = belief_and_uncertainty(&evidence_from_logits(&logits, default_tau(k))?)?;
    Ok(Prediction {
        classes: params.argmax_belief(),
        uncertainty: params.uncertainty.index_axis(Axis(1), 0).to_owned(),
        belief: params.belief,
    })
}

/// Pixels within Euclidean `radius` of a pixel with a different label
/// (union over classes of dilation minus erosion).
pub fn label_boundary_band(label: ArrayView2<u8>, radius: usize) -> Array2<bool> {
    let (h, w) = label.dim();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let c = label[[y, x]];
        offsets.iter().any(|&(dy, dx)| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && label[[yy as usize, xx as usize]] != c
        })
    })
}

/// Mean of `u` over the boundary band and over foreground pixels outside it.
pub fn band_vs_interior(u: ArrayView2<f64>, label: ArrayView2<u8>, radius: usize) -> (f64, f64) {
    let band = label_boundary_band(label, radius);
    let (mut sb, mut nb, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for ((&v, &b), &l) in u.iter().zip(band.iter()).zip(label.iter()) {
        if b {
            sb += v;
            nb += 1;
        } else if l > 0 {
            si += v;
            ni += 1;
        }
    }
    (sb / nb.max(1) as f64, si / ni.max(1) as f64)
}

/// Piecewise-linear dark-to-bright heat scale on `[0, 1]`; values are clamped.
pub fn heat_color(v: f64) -> Rgb<u8> {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 4.0]),
        (0.25, [87.0, 16.0, 110.0]),
        (0.5, [188.0, 55.0, 84.0]),
        (0.75, [249.0, 142.0, 9.0]),
        (1.0, [252.0, 255.0, 164.0]),
    ];
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let i = STOPS.iter().rposition(|s| s.0 <= v).unwrap_or(0).min(STOPS.len() - 2);
    let (t0, c0) = STOPS[i];
    let (t1, c1) = STOPS[i + 1];
    let t = (v - t0) / (t1 - t0);
    Rgb(std::array::from_fn(|j| (c0[j] + (c1[j] - c0[j]) * t).round() as u8))
}

const LABEL_COLORS: [[u8; 3]; 6] = [
    [0, 0, 0],
    [230, 57, 70],
    [69, 123, 157],
    [241, 250, 238],
    [42, 157, 143],
    [233, 196, 106],
];

fn render(h: usize, w: usize, px: impl Fn(usize, usize) -> Rgb<u8>) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| px(y as usize, x as usize))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| EvilError::io(path, std::io::Error::other(e)))
}

/// Output of [`export_uncertainty_figure`].
#[derive(Debug, Clone, PartialEq)]
pub struct FigureFiles {
    pub panels: Vec<PathBuf>,
    pub montage: PathBuf,
}

/// Writes `<dir>/figures/<name>_*.png`: the input, the label, the evidential
/// uncertainty and each named MC map, plus a side-by-side montage. All
/// uncertainty panels share the fixed `[0, 1]` heat scale.
pub fn export_uncertainty_figure(
    dir: &Path,
    name: &str,
    image: ArrayView2<f32>,
    label: ArrayView2<u8>,
    evidential_u: ArrayView2<f64>,
    mc_maps: &[(String, Array2<f64>)],
) -> Result<FigureFiles> {
    let (h, w) = image.dim();
    ensure!(label.dim() == (h, w), Validation, "label shape {:?} differs from image {:?}", label.dim(), (h, w));
    ensure!(evidential_u.dim() == (h, w), Validation, "uncertainty shape {:?} differs from image {:?}", evidential_u.dim(), (h, w));
    for (tag, m) in mc_maps {
        ensure!(m.dim() == (h, w), Validation, "map {tag} shape {:?} differs from image {:?}", m.dim(), (h, w));
    }
    let out = dir.join("figures");
    fs::create_dir_all(&out).map_err(|e| EvilError::io(&out, e))?;

    let mut panels: Vec<(String, RgbImage)> = vec![
        (
            "input".into(),
            render(h, w, |y, x| {
                let g = (image[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([g, g, g])
            }),
        ),
        (
            "label".into(),
            render(h, w, |y, x| Rgb(LABEL_COLORS[label[[y, x]] as usize % LABEL_COLORS.len()])),
        ),
        ("evidential_u".into(), render(h, w, |y, x| heat_color(evidential_u[[y, x]]))),
    ];
    for (tag, m) in mc_maps {
        panels.push((format!("mc_{tag}"), render(h, w, |y, x| heat_color(m[[y, x]]))));
    }

    let gap = 2u32;
    let n = panels.len() as u32;
    let mut montage = RgbImage::from_pixel(n * w as u32 + (n - 1) * gap, h as u32, Rgb([255, 255, 255]));
    let mut paths = Vec::with_capacity(panels.len());
    for (i, (tag, img)) in panels.iter().enumerate() {
        image::imageops::replace(&mut montage, img, (i as u32 * (w as u32 + gap)) as i64, 0);
        let path = out.join(format!("{name}_{tag}.png"));
        save_png(img, &path)?;
        paths.push(path);
    }
    let montage_path = out.join(format!("{name}_montage.png"));
    save_png(&montage, &montage_path)?;
    Ok(FigureFiles {
        panels: paths,
        montage: montage_path,
    })
}

/// Writes a `[H, W]` map as plain text, one row per line.
pub fn write_map_text<T: std::fmt::Display>(path: &Path, map: ArrayView2<T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| EvilError::io(path, e))?;
    for row in map.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(" ")).map_err(|e| EvilError::io(path, e))?;
    }
    Ok(())
}
