//! Image quality metrics, landmark-based alignment, and the benchmark
//! harness scoring novel-view renders against held-out ground truth.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::camera::{recompute_extrinsic, CameraPose, ViewRig, DEFAULT_RING_RADIUS};
use crate::error::{Error, Result};
use crate::splat::io::load_png;

/// Peak signal-to-noise ratio in dB; identical images yield `f64::INFINITY`.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filter.
fn gaussian_filter(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel_1d();
    let (h, w) = img.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = Array2::zeros((h, wo));
    for r in 0..h {
        for c in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img[[r, c + i]];
            }
            tmp[[r, c]] = acc;
        }
    }
    // Vertical pass.
    let mut out = Array2::zeros((ho, wo));
    for r in 0..ho {
        for c in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[[r + i, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

fn ssim_channel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mu_a = gaussian_filter(a);
    let mu_b = gaussian_filter(b);
    let aa = gaussian_filter(&(a * a));
    let bb = gaussian_filter(&(b * b));
    let ab = gaussian_filter(&(a * b));

    let mut total = 0.0;
    let (ho, wo) = mu_a.dim();
    for r in 0..ho {
        for c in 0..wo {
            let (ma, mb) = (mu_a[[r, c]], mu_b[[r, c]]);
            let va = aa[[r, c]] - ma * ma;
            let vb = bb[[r, c]] - mb * mb;
            let cov = ab[[r, c]] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (ho * wo) as f64
}

/// Mean local SSIM over an 11×11 Gaussian window (σ = 1.5, K1 = 0.01,
/// K2 = 0.03, max value 1). 3-channel images score the per-channel mean.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w, ch) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if ch != 1 && ch != 3 {
        return Err(Error::Shape(format!("ssim expects 1 or 3 channels, got {ch}")));
    }
    let mut acc = 0.0;
    for c in 0..ch {
        let pa = a.index_axis(ndarray::Axis(2), c).to_owned();
        let pb = b.index_axis(ndarray::Axis(2), c).to_owned();
        acc += ssim_channel(&pa, &pb);
    }
    Ok(acc / ch as f64)
}

/// 2D landmark set in pixel coordinates with index correspondence across
/// compared sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkSet(pub Vec<[f64; 2]>);

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let points: Vec<[f64; 2]> = serde_json::from_reader(std::io::BufReader::new(file))?;
        Ok(Self(points))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.0)?;
        Ok(())
    }

    fn centroid(&self) -> [f64; 2] {
        let n = self.len() as f64;
        let mut c = [0.0, 0.0];
        for p in &self.0 {
            c[0] += p[0] / n;
            c[1] += p[1] / n;
        }
        c
    }
}

/// Scale + translation aligning `l1` onto `l2`:
/// centroids C1, C2; centered sets L1', L2';
/// s = Σ(L1'·L2') / Σ(L1'·L1'); t = C2 − s·C1.
pub fn landmark_transform(l1: &LandmarkSet, l2: &LandmarkSet) -> Result<(f64, [f64; 2])> {
    if l1.len() < 2 || l2.len() != l1.len() {
        return Err(Error::Config(format!(
            "landmark sets need equal K >= 2, got {} and {}",
            l1.len(),
            l2.len()
        )));
    }
    if l1.0.iter().chain(l2.0.iter()).any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Config("landmarks must be finite".into()));
    }
    let c1 = l1.centroid();
    let c2 = l2.centroid();
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, q) in l1.0.iter().zip(l2.0.iter()) {
        let p = [p[0] - c1[0], p[1] - c1[1]];
        let q = [q[0] - c2[0], q[1] - c2[1]];
        num += p[0] * q[0] + p[1] * q[1];
        den += p[0] * p[0] + p[1] * p[1];
    }
    if den <= 0.0 {
        return Err(Error::DegenerateLandmarks);
    }
    let s = num / den;
    let t = [c2[0] - s * c1[0], c2[1] - s * c1[1]];
    Ok((s, t))
}

/// Warp `image` by `x' = s·x + t` with bilinear sampling; out-of-bounds
/// pixels are filled with `background`.
pub fn warp_scale_translate(
    image: &Array3<f64>,
    s: f64,
    t: [f64; 2],
    background: [f64; 3],
) -> Array3<f64> {
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Array3::zeros((h, w, ch));
    for r in 0..h {
        for c in 0..w {
            // Inverse map from output to source coordinates.
            let sx = (c as f64 - t[0]) / s;
            let sy = (r as f64 - t[1]) / s;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for k in 0..ch {
                let sample = |x: i64, y: i64| -> f64 {
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        background[k.min(2)]
                    } else {
                        image[[y as usize, x as usize, k]]
                    }
                };
                out[[r, c, k]] = (1.0 - fx) * (1.0 - fy) * sample(x0, y0)
                    + fx * (1.0 - fy) * sample(x0 + 1, y0)
                    + (1.0 - fx) * fy * sample(x0, y0 + 1)
                    + fx * fy * sample(x0 + 1, y0 + 1);
            }
        }
    }
    out
}

/// Align `image` (carrying landmarks `l1`) onto the frame of `l2`, returning
/// the warped image and the recovered (s, t).
pub fn landmark_align(
    image: &Array3<f64>,
    l1: &LandmarkSet,
    l2: &LandmarkSet,
    background: [f64; 3],
) -> Result<(Array3<f64>, f64, [f64; 2])> {
    let (s, t) = landmark_transform(l1, l2)?;
    let warped = warp_scale_translate(image, s, t, background);
    Ok((warped, s, t))
}

// ---------------------------------------------------------------------------
// Benchmark harness
// ---------------------------------------------------------------------------

/// One benchmark subject: the chosen input view plus held-out test views.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSubject {
    pub id: String,
    pub input_view: usize,
    pub test_views: Vec<usize>,
    pub gt_dir: PathBuf,
    pub landmarks_dir: PathBuf,
    /// Optional dataset camera rig (frames indexed by view id) enabling
    /// extrinsic recomputation into the method's camera system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub subjects: Vec<BenchmarkSubject>,
}

impl BenchmarkManifest {
    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

/// One scored (subject, view) pair. Columns for metrics that need pretrained
/// networks are reserved and always null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject: String,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub dreamsim: Option<f64>,
    pub arcface: Option<f64>,
    /// Method-system camera pose for this test view (rotation row-major),
    /// present when the manifest carries a dataset rig.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method_rotation: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method_translation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject: String,
    pub views: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Benchmark result. The primary aggregate is the macro average (mean of
/// per-subject means); the micro average over all rows is also reported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub per_subject: Vec<SubjectScore>,
    pub macro_psnr: f64,
    pub macro_ssim: f64,
    pub micro_psnr: f64,
    pub micro_ssim: f64,
    pub aggregate_note: String,
    pub skipped_subjects: Vec<String>,
}

impl ScoreReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "subject,view,psnr,ssim,lpips,dreamsim,arcface")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},,,", r.subject, r.view, r.psnr, r.ssim)?;
        }
        Ok(())
    }
}

pub fn gt_image_name(view: usize) -> String {
    format!("view_{view:03}.png")
}

pub fn gt_landmarks_name(view: usize) -> String {
    format!("view_{view:03}_gt.json")
}

pub fn render_landmarks_name(view: usize) -> String {
    format!("view_{view:03}_render.json")
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Score method renders against ground truth.
///
/// Per test view: recompute the method-system extrinsic (when the manifest
/// provides the dataset rig), load the method render from
/// `method_dir/<subject>/view_XXX.png`, align it onto the ground-truth image
/// via facial landmarks, and score PSNR/SSIM. Subjects with missing files
/// are skipped and listed in the report.
pub fn run_benchmark(manifest: &BenchmarkManifest, method_dir: &Path) -> Result<ScoreReport> {
    let mut rows = Vec::new();
    let mut per_subject = Vec::new();
    let mut skipped = Vec::new();

    for subject in &manifest.subjects {
        match score_subject(subject, method_dir) {
            Ok(mut subject_rows) => {
                let mp = mean(subject_rows.iter().map(|r| r.psnr));
                let ms = mean(subject_rows.iter().map(|r| r.ssim));
                per_subject.push(SubjectScore {
                    subject: subject.id.clone(),
                    views: subject_rows.len(),
                    mean_psnr: mp,
                    mean_ssim: ms,
                });
                rows.append(&mut subject_rows);
            }
            Err(e) => {
                eprintln!("warning: skipping subject {}: {e}", subject.id);
                skipped.push(subject.id.clone());
            }
        }
    }

    Ok(ScoreReport {
        macro_psnr: mean(per_subject.iter().map(|s| s.mean_psnr)),
        macro_ssim: mean(per_subject.iter().map(|s| s.mean_ssim)),
        micro_psnr: mean(rows.iter().map(|r| r.psnr)),
        micro_ssim: mean(rows.iter().map(|r| r.ssim)),
        aggregate_note: "macro = mean of per-subject means (primary); micro = mean over all rows"
            .into(),
        rows,
        per_subject,
        skipped_subjects: skipped,
    })
}

fn score_subject(subject: &BenchmarkSubject, method_dir: &Path) -> Result<Vec<ScoreRow>> {
    let rig = match &subject.rig {
        Some(path) => Some(ViewRig::load_json(path)?),
        None => None,
    };
    let method_input = CameraPose::from_azimuth_elevation(0.0, 0.0, DEFAULT_RING_RADIUS)?;

    let mut rows = Vec::new();
    for &view in &subject.test_views {
        let (method_rotation, method_translation) = match &rig {
            Some(rig) => {
                let input = rig.views.get(subject.input_view).ok_or_else(|| {
                    Error::Config(format!("rig has no frame {}", subject.input_view))
                })?;
                let test = rig
                    .views
                    .get(view)
                    .ok_or_else(|| Error::Config(format!("rig has no frame {view}")))?;
                let pose = recompute_extrinsic(
                    &input.pose,
                    &test.pose,
                    &method_input,
                    DEFAULT_RING_RADIUS,
                    None,
                )?;
                (
                    Some(pose.rotation().transpose().as_slice().to_vec()),
                    Some(pose.translation().as_slice().to_vec()),
                )
            }
            None => (None, None),
        };

        let gt = load_png(&subject.gt_dir.join(gt_image_name(view)))?;
        let render = load_png(&method_dir.join(&subject.id).join(gt_image_name(view)))?;
        let l_render =
            LandmarkSet::load_json(&subject.landmarks_dir.join(render_landmarks_name(view)))?;
        let l_gt = LandmarkSet::load_json(&subject.landmarks_dir.join(gt_landmarks_name(view)))?;

        let (aligned, _s, _t) = landmark_align(&render, &l_render, &l_gt, [0.0; 3])?;
        rows.push(ScoreRow {
            subject: subject.id.clone(),
            view,
            psnr: psnr(&aligned, &gt, 1.0)?,
            ssim: ssim(&aligned, &gt)?,
            lpips: None,
            dreamsim: None,
            arcface: None,
            method_rotation,
            method_translation,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = crate::rng::derive("eval-img", seed, 0);
        let mut img = Array3::zeros((h, w, 3));
        img.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        img
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = rand_image(0, 16, 16);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_constant_offset_closed_form() {
        let a = Array3::from_elem((8, 8, 3), 0.4);
        let b = Array3::from_elem((8, 8, 3), 0.5);
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_brute_force() {
        let a = rand_image(1, 12, 9);
        let b = rand_image(2, 12, 9);
        let v = psnr(&a, &b, 1.0).unwrap();
        // Independent re-derivation with an explicit loop.
        let mut mse = 0.0;
        let mut n = 0.0;
        for r in 0..12 {
            for c in 0..9 {
                for k in 0..3 {
                    mse += (a[[r, c, k]] - b[[r, c, k]]).powi(2);
                    n += 1.0;
                }
            }
        }
        let expect = 10.0 * (1.0 / (mse / n)).log10();
        assert!((v - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_error_doubling_shifts_by_6db() {
        let base = Array3::from_elem((8, 8, 3), 0.5);
        let mut e1 = base.clone();
        let mut e2 = base.clone();
        e1.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * ((i % 7) as f64 - 3.0));
        e2.iter_mut().enumerate().for_each(|(i, v)| *v += 0.02 * ((i % 7) as f64 - 3.0));
        let p1 = psnr(&base, &e1, 1.0).unwrap();
        let p2 = psnr(&base, &e2, 1.0).unwrap();
        assert!((p1 - p2 - 20.0 * 2.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = rand_image(0, 8, 8);
        let b = rand_image(0, 8, 9);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = rand_image(3, 16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_below_one() {
        let a = rand_image(4, 16, 16);
        let b = a.mapv(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn ssim_too_small_errors() {
        let a = rand_image(5, 8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_symmetry() {
        let a = rand_image(6, 14, 18);
        let b = rand_image(7, 14, 18);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_naive_reference() {
        // Checkerboard vs uniform gray, scored by an independently written
        // double-loop implementation of the same definition.
        let h = 16;
        let w = 16;
        let mut a = Array3::zeros((h, w, 1));
        for r in 0..h {
            for c in 0..w {
                a[[r, c, 0]] = if (r / 8 + c / 8) % 2 == 0 { 1.0 } else { 0.0 };
            }
        }
        let b = Array3::from_elem((h, w, 1), 0.5);

        let kernel = gaussian_kernel_1d();
        let mut window = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        for (i, row) in window.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = kernel[i] * kernel[j];
            }
        }
        let c1 = 0.01f64.powi(2);
        let c2 = 0.03f64.powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=(h - SSIM_WINDOW) {
            for c0 in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wv = window[i][j];
                        let x = a[[r0 + i, c0 + j, 0]];
                        let y = b[[r0 + i, c0 + j, 0]];
                        ma += wv * x;
                        mb += wv * y;
                        saa += wv * x * x;
                        sbb += wv * y * y;
                        sab += wv * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let reference = total / count as f64;
        let got = ssim(&a, &b).unwrap();
        assert!((got - reference).abs() < 1e-6, "{got} vs {reference}");
    }

    #[test]
    fn landmark_identity() {
        let l = LandmarkSet(vec![[1.0, 2.0], [5.0, -3.0], [0.5, 0.5]]);
        let (s, t) = landmark_transform(&l, &l).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12);
    }

    #[test]
    fn landmark_pure_scale() {
        // Centroids at the origin: doubling is pure scale.
        let l1 = LandmarkSet(vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let l2 = LandmarkSet(l1.0.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect());
        let (s, t) = landmark_transform(&l1, &l2).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12);
    }

    #[test]
    fn landmark_generate_and_recover() {
        let mut rng = crate::rng::derive("landmark", 0, 0);
        for _ in 0..1000 {
            let k = rng.gen_range(2..12);
            let l1 = LandmarkSet(
                (0..k)
                    .map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)])
                    .collect(),
            );
            // Skip (vanishingly unlikely) coincident draws.
            if landmark_transform(&l1, &l1).is_err() {
                continue;
            }
            let l2 = LandmarkSet(
                l1.0.iter()
                    .map(|p| [1.37 * p[0] + 5.0, 1.37 * p[1] - 3.0])
                    .collect(),
            );
            let (s, t) = landmark_transform(&l1, &l2).unwrap();
            assert!((s - 1.37).abs() < 1e-9);
            assert!((t[0] - 5.0).abs() < 1e-9);
            assert!((t[1] + 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn landmark_degenerate_errors() {
        let l1 = LandmarkSet(vec![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]]);
        let l2 = LandmarkSet(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        match landmark_transform(&l1, &l2) {
            Err(Error::DegenerateLandmarks) => {}
            other => panic!("expected degenerate landmark error, got {other:?}"),
        }
    }

    #[test]
    fn landmark_transform_is_least_squares_optimum() {
        let mut rng = crate::rng::derive("landmark-opt", 0, 0);
        let l1 = LandmarkSet(
            (0..8)
                .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
                .collect(),
        );
        let l2 = LandmarkSet(
            (0..8)
                .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
                .collect(),
        );
        let (s, t) = landmark_transform(&l1, &l2).unwrap();
        let objective = |s: f64, t: [f64; 2]| -> f64 {
            l1.0.iter()
                .zip(l2.0.iter())
                .map(|(p, q)| {
                    (s * p[0] + t[0] - q[0]).powi(2) + (s * p[1] + t[1] - q[1]).powi(2)
                })
                .sum()
        };
        let best = objective(s, t);
        for _ in 0..200 {
            let ds = rng.gen_range(-0.1..0.1);
            let dt = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            assert!(objective(s + ds, [t[0] + dt[0], t[1] + dt[1]]) >= best - 1e-9);
        }
    }

    #[test]
    fn warp_identity_preserves_image() {
        let img = rand_image(8, 12, 12);
        let out = warp_scale_translate(&img, 1.0, [0.0, 0.0], [0.0; 3]);
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_translation_shifts_pixels() {
        let mut img = Array3::zeros((8, 8, 3));
        img[[2, 3, 0]] = 1.0;
        // x' = x + 2, y' = y + 1 moves the bright pixel to (y=3, x=5).
        let out = warp_scale_translate(&img, 1.0, [2.0, 1.0], [0.0; 3]);
        assert!((out[[3, 5, 0]] - 1.0).abs() < 1e-12);
        assert!(out[[2, 3, 0]].abs() < 1e-12);
    }
}
