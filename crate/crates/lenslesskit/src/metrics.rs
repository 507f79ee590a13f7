//! Quantitative evaluation: PSNR, SSIM, and wall-clock benchmarking.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// `10 log10(peak^2 / MSE)` in dB; identical images return infinity.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::Shape(format!(
            "psnr operands differ: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::InvalidArgument("psnr peak must be positive".into()));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter with reflected borders on one channel plane.
fn gaussian_filter(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let half = (win.len() / 2) as isize;
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut rows = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &wv) in win.iter().enumerate() {
                let cc = reflect(c as isize + t as isize - half, w as isize);
                acc += wv * plane[r * w + cc];
            }
            rows[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &wv) in win.iter().enumerate() {
                let rr = reflect(r as isize + t as isize - half, h as isize);
                acc += wv * rows[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Mean local structural similarity with a Gaussian window, computed per
/// channel and averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, params: &SsimParams) -> Result<f64> {
    let (h, w, c) = a.data().dim();
    if a.data().dim() != b.data().dim() {
        return Err(Error::Shape(format!(
            "ssim operands differ: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    if h < params.window || w < params.window {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {0}x{0} ssim window",
            params.window
        )));
    }
    let win = gaussian_window(params.window, params.sigma);
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let mut total = 0.0f64;
    for ch in 0..c {
        let ap: Vec<f64> = (0..h * w)
            .map(|i| a.data()[[i / w, i % w, ch]] as f64)
            .collect();
        let bp: Vec<f64> = (0..h * w)
            .map(|i| b.data()[[i / w, i % w, ch]] as f64)
            .collect();
        let mu_a = gaussian_filter(&ap, h, w, &win);
        let mu_b = gaussian_filter(&bp, h, w, &win);
        let aa: Vec<f64> = ap.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = bp.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = ap.iter().zip(&bp).map(|(x, y)| x * y).collect();
        let mu_aa = gaussian_filter(&aa, h, w, &win);
        let mu_bb = gaussian_filter(&bb, h, w, &win);
        let mu_ab = gaussian_filter(&ab, h, w, &win);
        let mut acc = 0.0f64;
        for i in 0..h * w {
            let va = mu_aa[i] - mu_a[i] * mu_a[i];
            let vb = mu_bb[i] - mu_b[i] * mu_b[i];
            let cov = mu_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
            acc += num / den;
        }
        total += acc / (h * w) as f64;
    }
    Ok(total / c as f64)
}

/// One benchmark measurement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub size: usize,
    pub batch: usize,
    pub repeats: usize,
    pub median_seconds: f64,
}

/// Median wall-clock of `repeats` calls after `warmup` excluded calls.
pub fn runtime_benchmark<F: FnMut()>(
    name: &str,
    size: usize,
    batch: usize,
    warmup: usize,
    repeats: usize,
    mut op: F,
) -> BenchRow {
    for _ in 0..warmup {
        op();
    }
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        op();
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median = times[times.len() / 2];
    BenchRow {
        name: name.to_string(),
        size,
        batch,
        repeats: repeats.max(1),
        median_seconds: median,
    }
}

/// Per-image evaluation entry. PSNR may be infinite (identical images), which
/// JSON cannot hold as a number; it serializes as the string `"inf"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalEntry {
    pub name: String,
    #[serde(
        serialize_with = "serialize_db",
        deserialize_with = "deserialize_db"
    )]
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(
        serialize_with = "serialize_db",
        deserialize_with = "deserialize_db"
    )]
    pub baseline_psnr_db: f64,
}

fn serialize_db<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn deserialize_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(#[allow(dead_code)] String),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::Num(v) => v,
        Raw::Str(_) => f64::INFINITY,
    })
}

/// Aggregate evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub psf_mode: String,
    pub split: String,
    pub entries: Vec<EvalEntry>,
    #[serde(
        serialize_with = "serialize_db",
        deserialize_with = "deserialize_db"
    )]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    #[serde(
        serialize_with = "serialize_db",
        deserialize_with = "deserialize_db"
    )]
    pub mean_baseline_psnr_db: f64,
    /// Out of scope for this toolkit (needs an external pretrained perceptual
    /// network); kept as a column so reports line up with common tables.
    pub lpips: Option<f64>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn from_entries(
        psf_mode: &str,
        split: &str,
        entries: Vec<EvalEntry>,
        config_fingerprint: String,
    ) -> Self {
        let n = entries.len().max(1) as f64;
        let mean_psnr_db = entries.iter().map(|e| e.psnr_db).sum::<f64>() / n;
        let mean_ssim = entries.iter().map(|e| e.ssim).sum::<f64>() / n;
        let mean_baseline_psnr_db = entries.iter().map(|e| e.baseline_psnr_db).sum::<f64>() / n;
        EvalReport {
            psf_mode: psf_mode.to_string(),
            split: split.to_string(),
            entries,
            mean_psnr_db,
            mean_ssim,
            mean_baseline_psnr_db,
            lpips: None,
            config_fingerprint,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim,baseline_psnr_db\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.name, e.psnr_db, e.ssim, e.baseline_psnr_db
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::demo_image;
    use ndarray::Array3;

    fn constant_image(n: usize, v: f32) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((n, n, 3), v)).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = demo_image(16, 0);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_constant_offsets() {
        // The 0.1 offset picks up one ulp of f32 rounding; the dB error
        // stays below 1e-6.
        let a = constant_image(8, 0.4);
        let b = constant_image(8, 0.5);
        let db = psnr(&a, &b, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-6, "{db}");
        let c = constant_image(8, 0.9);
        let db2 = psnr(&a, &c, 1.0).unwrap();
        assert!((db2 - 10.0 * (1.0f64 / 0.25).log10()).abs() < 1e-5, "{db2}");
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = constant_image(8, 0.1);
        let b = constant_image(9, 0.1);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        use rand::Rng;
        use rand::SeedableRng;
        let x = demo_image(32, 5);
        let mut prev = f64::INFINITY;
        for sigma in [0.01f32, 0.05, 0.1] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let noisy = ImageTensor::new(
                x.data()
                    .mapv(|v| (v + rng.random_range(-1.0f32..1.0) * sigma).clamp(0.0, 1.0)),
            )
            .unwrap();
            let db = psnr(&x, &noisy, 1.0).unwrap();
            assert!(db < prev, "psnr did not decrease: {db} !< {prev}");
            prev = db;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = demo_image(24, 1);
        let s = ssim(&a, &a, &SsimParams::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn ssim_symmetric() {
        let a = demo_image(24, 2);
        let b = demo_image(24, 3);
        let p = SsimParams::default();
        let s1 = ssim(&a, &b, &p).unwrap();
        let s2 = ssim(&b, &a, &p).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_binary_is_negative() {
        // Checkerboard vs its inverse: structure anti-correlates.
        let n = 24;
        let data = Array3::from_shape_fn((n, n, 1), |(i, j, _)| ((i + j) % 2) as f32);
        let a = ImageTensor::new(data.clone()).unwrap();
        let b = ImageTensor::new(data.mapv(|v| 1.0 - v)).unwrap();
        let s = ssim(&a, &b, &SsimParams::default()).unwrap();
        assert!(s < 0.0, "{s}");
    }

    #[test]
    fn ssim_approaches_one_as_perturbation_vanishes() {
        let a = demo_image(24, 4);
        let mut prev = -1.0f64;
        for eps in [0.1f32, 0.01, 0.001] {
            let b = ImageTensor::new(a.data().mapv(|v| (v + eps).min(1.0))).unwrap();
            let s = ssim(&a, &b, &SsimParams::default()).unwrap();
            assert!(s > prev);
            prev = s;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = constant_image(8, 0.5);
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
    }

    #[test]
    fn bench_single_repeat_is_finite() {
        let row = runtime_benchmark("noop", 1, 1, 0, 1, || {
            std::hint::black_box(1 + 1);
        });
        assert!(row.median_seconds.is_finite());
        assert_eq!(row.repeats, 1);
    }

    #[test]
    fn report_aggregates_and_serializes_inf() {
        let entries = vec![
            EvalEntry {
                name: "a".into(),
                psnr_db: 20.0,
                ssim: 0.9,
                baseline_psnr_db: 10.0,
            },
            EvalEntry {
                name: "b".into(),
                psnr_db: 30.0,
                ssim: 0.7,
                baseline_psnr_db: 12.0,
            },
        ];
        let r = EvalReport::from_entries("seen", "test", entries, "abc".into());
        assert!((r.mean_psnr_db - 25.0).abs() < 1e-12);
        assert!((r.mean_ssim - 0.8).abs() < 1e-12);

        let with_inf = EvalReport::from_entries(
            "seen",
            "test",
            vec![EvalEntry {
                name: "same".into(),
                psnr_db: f64::INFINITY,
                ssim: 1.0,
                baseline_psnr_db: 5.0,
            }],
            "x".into(),
        );
        let json = serde_json::to_string(&with_inf).unwrap();
        assert!(json.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert!(back.entries[0].psnr_db.is_infinite());
    }
}
