//! Point spread functions and the section-shuffle augmentation.
//!
//! A diffuser PSF is a mostly dark image with a sparse caustic pattern. New
//! PSFs are produced by cutting a seed PSF into an `rows x cols` grid of
//! equal sections and permuting them; the two auxiliary representations
//! consumed by the generators (sparse coordinate form, tile stack) live here
//! as well.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// A nonnegative single-channel blur kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    data: Array2<f32>,
    normalized: bool,
}

impl Psf {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Shape("empty PSF".into()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(
                "PSF entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Psf {
            data,
            normalized: false,
        })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Fraction of entries above 1% of the maximum; caustic PSFs sit well
    /// below 0.5.
    pub fn sparsity_fraction(&self) -> f64 {
        let max = self.data.iter().cloned().fold(0.0f32, f32::max);
        if max <= 0.0 {
            return 0.0;
        }
        let thr = 0.01 * max;
        let above = self.data.iter().filter(|&&v| v > thr).count();
        above as f64 / self.data.len() as f64
    }

    /// Scale so entries sum to one. Errors on an all-zero kernel.
    pub fn normalize(&self) -> Result<Psf> {
        let total = self.sum();
        if total <= 0.0 {
            return Err(Error::DegeneratePsf);
        }
        let inv = (1.0 / total) as f32;
        Ok(Psf {
            data: self.data.mapv(|v| v * inv),
            normalized: true,
        })
    }

    /// Area-average resample; used to bring a measured PSF to the working
    /// resolution before it enters the loop.
    pub fn resize_area(&self, new_h: usize, new_w: usize) -> Psf {
        let stacked = self.data.clone().insert_axis(ndarray::Axis(2));
        let img = ImageTensor::new(stacked).expect("psf to image");
        let resized = img.resize_area(new_h, new_w);
        let data = resized.into_data().remove_axis(ndarray::Axis(2));
        Psf {
            data,
            normalized: false,
        }
    }

    /// As a grayscale image for previews and contact sheets, max-scaled.
    pub fn to_preview(&self) -> ImageTensor {
        let max = self.data.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
        let scaled = self.data.mapv(|v| v / max).insert_axis(ndarray::Axis(2));
        ImageTensor::new(scaled).expect("psf preview")
    }
}

/// File header for the binary PSF grid format.
#[derive(Debug, Serialize, Deserialize)]
struct PsfHeader {
    height: usize,
    width: usize,
    normalized: bool,
}

/// Write as a one-line JSON header followed by row-major little-endian f32s.
pub fn save_psf(psf: &Psf, path: &Path) -> Result<()> {
    let header = PsfHeader {
        height: psf.height(),
        width: psf.width(),
        normalized: psf.is_normalized(),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for &v in psf.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_psf(path: &Path) -> Result<Psf> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing PSF header", path.display())))?;
    let header: PsfHeader = serde_json::from_slice(&bytes[..newline])?;
    let body = &bytes[newline + 1..];
    let expect = header.height * header.width * 4;
    if body.len() != expect {
        return Err(Error::Checkpoint(format!(
            "{}: PSF body holds {} bytes, expected {expect}",
            path.display(),
            body.len()
        )));
    }
    let mut values = Vec::with_capacity(header.height * header.width);
    for chunk in body.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
    }
    let data = Array2::from_shape_vec((header.height, header.width), values)
        .expect("psf grid shape");
    let mut psf = Psf::new(data)?;
    psf.normalized = header.normalized;
    Ok(psf)
}

/// Procedural caustic-like seed PSF: a handful of bright curved filaments on
/// a dark background. Stand-in for a measured diffuser PSF in demos/tests.
pub fn synthetic_caustic(size: usize, seed: u64) -> Psf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array2::<f32>::zeros((size, size));
    let strands = 6 + (size / 24);
    draw_caustic(&mut data, size, strands, &mut rng);
    Psf::new(data).expect("synthetic caustic is valid")
}

/// A caustic confined to a centered `support x support` region of a larger
/// canvas; keeps the blur local when the mask sits close to the sensor.
pub fn synthetic_caustic_embedded(canvas: usize, support: usize, seed: u64) -> Result<Psf> {
    if support == 0 || support > canvas {
        return Err(Error::InvalidArgument(format!(
            "caustic support {support} must be within the {canvas} canvas"
        )));
    }
    let inner = synthetic_caustic(support, seed);
    let mut data = Array2::<f32>::zeros((canvas, canvas));
    let off = (canvas - support) / 2;
    for ((i, j), &v) in inner.data().indexed_iter() {
        data[[off + i, off + j]] = v;
    }
    Psf::new(data)
}

fn draw_caustic(data: &mut Array2<f32>, size: usize, strands: usize, rng: &mut ChaCha8Rng) {
    for _ in 0..strands {
        // Random quadratic arc traced with a small Gaussian splat.
        let cx = rng.random_range(0.25..0.75) * size as f64;
        let cy = rng.random_range(0.25..0.75) * size as f64;
        let ax = rng.random_range(-0.4..0.4) * size as f64;
        let ay = rng.random_range(-0.4..0.4) * size as f64;
        let bend = rng.random_range(-0.6..0.6) * size as f64;
        let brightness = rng.random_range(0.4..1.0) as f32;
        let steps = size * 3;
        for s in 0..steps {
            let t = s as f64 / steps as f64 - 0.5;
            let px = cx + ax * t + bend * t * t;
            let py = cy + ay * t - bend * t * t;
            let (ix, iy) = (px.round() as isize, py.round() as isize);
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (r, c) = (iy + di, ix + dj);
                    if r >= 0 && c >= 0 && (r as usize) < size && (c as usize) < size {
                        let falloff = 1.0 / (1.0 + (di * di + dj * dj) as f32);
                        let cell = &mut data[[r as usize, c as usize]];
                        *cell = (*cell + brightness * falloff * 0.2).min(1.0);
                    }
                }
            }
        }
    }
}

/// Seed PSF cut into `rows x cols` equal sections, row-major.
#[derive(Clone, Debug)]
pub struct PsfSectionGrid {
    rows: usize,
    cols: usize,
    section_h: usize,
    section_w: usize,
    sections: Vec<Array2<f32>>,
}

impl PsfSectionGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn section_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn sections(&self) -> &[Array2<f32>] {
        &self.sections
    }

    /// Reassemble with section `perm[i]` placed at slot `i`. Pure
    /// rearrangement: the pixel multiset is bit-identical to the input grid.
    pub fn assemble(&self, perm: &Permutation) -> Result<Psf> {
        if perm.len() != self.section_count() {
            return Err(Error::PermutationSize {
                expected: self.section_count(),
                got: perm.len(),
            });
        }
        let (h, w) = (self.rows * self.section_h, self.cols * self.section_w);
        let mut data = Array2::<f32>::zeros((h, w));
        for slot in 0..self.section_count() {
            let src = &self.sections[perm.mapping()[slot]];
            let (r0, c0) = (
                (slot / self.cols) * self.section_h,
                (slot % self.cols) * self.section_w,
            );
            for i in 0..self.section_h {
                for j in 0..self.section_w {
                    data[[r0 + i, c0 + j]] = src[[i, j]];
                }
            }
        }
        Psf::new(data)
    }
}

/// Cut a PSF into `rows x cols` equal sections. Dimensions that do not divide
/// evenly are center-cropped to the largest divisible size first.
pub fn split_sections(psf: &Psf, rows: usize, cols: usize) -> Result<PsfSectionGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(
            "section grid dimensions must be positive".into(),
        ));
    }
    let (h, w) = (psf.height(), psf.width());
    let (ch, cw) = ((h / rows) * rows, (w / cols) * cols);
    if ch == 0 || cw == 0 {
        return Err(Error::Shape(format!(
            "PSF {h}x{w} too small for a {rows}x{cols} section grid"
        )));
    }
    let (r_off, c_off) = ((h - ch) / 2, (w - cw) / 2);
    let (sh, sw) = (ch / rows, cw / cols);
    let mut sections = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let mut sec = Array2::<f32>::zeros((sh, sw));
            for i in 0..sh {
                for j in 0..sw {
                    sec[[i, j]] = psf.data[[r_off + gr * sh + i, c_off + gc * sw + j]];
                }
            }
            sections.push(sec);
        }
    }
    Ok(PsfSectionGrid {
        rows,
        cols,
        section_h: sh,
        section_w: sw,
        sections,
    })
}

/// A bijection over section slots, remembered together with the seed that
/// produced it so any shuffled PSF is reproducible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
    pub seed: Option<u64>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
            seed: None,
        }
    }

    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || seen[m] {
                return Err(Error::InvalidArgument(format!(
                    "mapping {mapping:?} is not a bijection"
                )));
            }
            seen[m] = true;
        }
        Ok(Permutation {
            mapping,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }
}

/// Uniform random permutation of `n` slots, deterministic per seed.
pub fn random_permutation(n: usize, seed: u64) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::InvalidArgument("permutation of zero slots".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mapping: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        mapping.swap(i, j);
    }
    Ok(Permutation {
        mapping,
        seed: Some(seed),
    })
}

/// Shuffle then renormalize, the form consumed by the forward model (keeps
/// the DC gain identical across the PSF family).
pub fn shuffle_psf(grid: &PsfSectionGrid, perm: &Permutation) -> Result<Psf> {
    grid.assemble(perm)?.normalize()
}

/// Coordinate-list form of a thresholded PSF, padded to a fixed capacity so
/// batches stack.
#[derive(Clone, Debug)]
pub struct SparsePsf {
    /// `(row, col)` per entry; padding entries hold `(0, 0)`.
    coords: Vec<(usize, usize)>,
    /// Intensities aligned with `coords`; padding entries hold zero.
    values: Vec<f32>,
    live: usize,
    original_shape: (usize, usize),
    pad_length: usize,
}

impl SparsePsf {
    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords[..self.live]
    }

    pub fn values(&self) -> &[f32] {
        &self.values[..self.live]
    }

    pub fn padded_coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn padded_values(&self) -> &[f32] {
        &self.values
    }

    pub fn live_len(&self) -> usize {
        self.live
    }

    pub fn pad_length(&self) -> usize {
        self.pad_length
    }

    pub fn original_shape(&self) -> (usize, usize) {
        self.original_shape
    }

    pub fn from_parts(
        coords: Vec<(usize, usize)>,
        values: Vec<f32>,
        original_shape: (usize, usize),
        pad_length: usize,
    ) -> Result<Self> {
        if coords.len() != values.len() {
            return Err(Error::Shape(
                "sparse coords and values lengths differ".into(),
            ));
        }
        if coords.len() > pad_length {
            return Err(Error::PadOverflow {
                nonzeros: coords.len(),
                capacity: pad_length,
            });
        }
        let live = coords.len();
        let mut coords = coords;
        let mut values = values;
        coords.resize(pad_length, (0, 0));
        values.resize(pad_length, 0.0);
        Ok(SparsePsf {
            coords,
            values,
            live,
            original_shape,
            pad_length,
        })
    }
}

/// Default sparsify threshold: 1% of the PSF maximum.
pub fn default_threshold(psf: &Psf) -> f32 {
    0.01 * psf.data.iter().cloned().fold(0.0f32, f32::max)
}

/// Default sparse capacity: a quarter of the grid.
pub fn default_pad_length(psf: &Psf) -> usize {
    (psf.height() * psf.width()).div_ceil(4)
}

/// Extract coordinates/values of entries strictly above `threshold`,
/// row-major, padded to `pad_length`.
pub fn sparsify(psf: &Psf, threshold: f32, pad_length: usize) -> Result<SparsePsf> {
    if threshold < 0.0 {
        return Err(Error::InvalidArgument(
            "sparsify threshold must be nonnegative".into(),
        ));
    }
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for ((i, j), &v) in psf.data.indexed_iter() {
        if v > threshold {
            coords.push((i, j));
            values.push(v);
        }
    }
    if coords.len() > pad_length {
        return Err(Error::PadOverflow {
            nonzeros: coords.len(),
            capacity: pad_length,
        });
    }
    SparsePsf::from_parts(coords, values, (psf.height(), psf.width()), pad_length)
}

/// Scatter-add back onto the dense grid; duplicate coordinates accumulate.
pub fn densify(sparse: &SparsePsf) -> Result<Psf> {
    let (h, w) = sparse.original_shape;
    let mut data = Array2::<f32>::zeros((h, w));
    for (&(r, c), &v) in sparse.padded_coords().iter().zip(sparse.padded_values()) {
        if r >= h || c >= w {
            return Err(Error::CoordOutOfRange {
                row: r,
                col: c,
                height: h,
                width: w,
            });
        }
        data[[r, c]] += v;
    }
    Psf::new(data)
}

/// Row-major stack of square tiles cut from a PSF.
#[derive(Clone, Debug)]
pub struct TiledPsf {
    tiles: Vec<Array2<f32>>,
    tile_size: usize,
    grid: (usize, usize),
    original_shape: (usize, usize),
}

impl TiledPsf {
    pub fn tiles(&self) -> &[Array2<f32>] {
        &self.tiles
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Refold tiles row-major back into the full grid; exact inverse of
    /// [`unfold_psf`] on divisible shapes.
    pub fn refold(&self) -> Result<Psf> {
        let (gr, gc) = self.grid;
        let t = self.tile_size;
        let mut data = Array2::<f32>::zeros((gr * t, gc * t));
        for (idx, tile) in self.tiles.iter().enumerate() {
            let (r0, c0) = ((idx / gc) * t, (idx % gc) * t);
            for i in 0..t {
                for j in 0..t {
                    data[[r0 + i, c0 + j]] = tile[[i, j]];
                }
            }
        }
        Psf::new(data)
    }

    /// Tiles flattened as channels `[T, t, t]`, the layout the unfold encoder
    /// consumes.
    pub fn to_channel_stack(&self) -> ndarray::Array3<f32> {
        let t = self.tile_size;
        let mut out = ndarray::Array3::<f32>::zeros((self.tiles.len(), t, t));
        for (k, tile) in self.tiles.iter().enumerate() {
            for i in 0..t {
                for j in 0..t {
                    out[[k, i, j]] = tile[[i, j]];
                }
            }
        }
        out
    }

    pub fn original_shape(&self) -> (usize, usize) {
        self.original_shape
    }
}

/// Cut the PSF into contiguous `tile_size x tile_size` tiles, row-major;
/// non-divisible dimensions are center-cropped first.
pub fn unfold_psf(psf: &Psf, tile_size: usize) -> Result<TiledPsf> {
    if tile_size == 0 {
        return Err(Error::InvalidArgument("tile_size must be positive".into()));
    }
    if tile_size > psf.height() || tile_size > psf.width() {
        return Err(Error::Shape(format!(
            "tile size {tile_size} exceeds PSF {}x{}",
            psf.height(),
            psf.width()
        )));
    }
    let gr = psf.height() / tile_size;
    let gc = psf.width() / tile_size;
    let (ch, cw) = (gr * tile_size, gc * tile_size);
    let (r_off, c_off) = ((psf.height() - ch) / 2, (psf.width() - cw) / 2);
    let mut tiles = Vec::with_capacity(gr * gc);
    for tr in 0..gr {
        for tc in 0..gc {
            let mut tile = Array2::<f32>::zeros((tile_size, tile_size));
            for i in 0..tile_size {
                for j in 0..tile_size {
                    tile[[i, j]] =
                        psf.data[[r_off + tr * tile_size + i, c_off + tc * tile_size + j]];
                }
            }
            tiles.push(tile);
        }
    }
    Ok(TiledPsf {
        tiles,
        tile_size,
        grid: (gr, gc),
        original_shape: (psf.height(), psf.width()),
    })
}

/// Manifest entry describing one emitted shuffled PSF.
#[derive(Debug, Serialize, Deserialize)]
pub struct ShuffleRecord {
    pub file: String,
    pub permutation: Vec<usize>,
    pub rng_seed: u64,
}

/// Manifest for a family of shuffled PSFs so each one is reproducible.
#[derive(Debug, Serialize, Deserialize)]
pub struct ShuffleManifest {
    pub seed_psf: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub records: Vec<ShuffleRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_psf(h: usize, w: usize, v: f32) -> Psf {
        Psf::new(Array2::from_elem((h, w), v)).unwrap()
    }

    #[test]
    fn normalize_scales_proportionally() {
        let p = uniform_psf(2, 2, 0.5).normalize().unwrap();
        for &v in p.data().iter() {
            assert!((v - 0.25).abs() < 1e-7);
        }
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_delta() {
        let mut data = Array2::<f32>::zeros((3, 3));
        data[[1, 1]] = 7.0;
        let p = Psf::new(data).unwrap().normalize().unwrap();
        assert!((p.data()[[1, 1]] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn normalize_rejects_all_zero() {
        let p = uniform_psf(4, 4, 0.0);
        assert!(matches!(p.normalize(), Err(Error::DegeneratePsf)));
    }

    #[test]
    fn split_10x10_into_5x5_grid() {
        let p = synthetic_caustic(10, 1);
        let grid = split_sections(&p, 5, 5).unwrap();
        assert_eq!(grid.section_count(), 25);
        assert_eq!(grid.sections()[0].dim(), (2, 2));
    }

    #[test]
    fn split_single_section_is_input() {
        let p = synthetic_caustic(4, 2);
        let grid = split_sections(&p, 1, 1).unwrap();
        let back = grid.assemble(&Permutation::identity(1)).unwrap();
        assert_eq!(back.data(), p.data());
    }

    #[test]
    fn split_crops_non_divisible() {
        let mut data = Array2::<f32>::zeros((5, 4));
        for ((i, j), v) in data.indexed_iter_mut() {
            *v = (i * 4 + j) as f32;
        }
        let p = Psf::new(data).unwrap();
        let grid = split_sections(&p, 2, 2).unwrap();
        // 5 rows crop to 4 with offset (5-4)/2 = 0; sections are 2x2.
        assert_eq!(grid.sections()[0][[0, 0]], 0.0);
        assert_eq!(grid.sections()[1][[0, 0]], 2.0);
        assert_eq!(grid.sections()[2][[0, 0]], 8.0);
        assert_eq!(grid.sections()[3][[1, 1]], 15.0);
    }

    #[test]
    fn identity_shuffle_preserves_psf() {
        let p = synthetic_caustic(20, 3);
        let grid = split_sections(&p, 5, 5).unwrap();
        let out = grid.assemble(&Permutation::identity(25)).unwrap();
        assert_eq!(out.data(), p.data());
    }

    #[test]
    fn shuffle_preserves_sum_before_renormalization() {
        let p = synthetic_caustic(20, 4);
        let grid = split_sections(&p, 5, 5).unwrap();
        let perm = random_permutation(25, 99).unwrap();
        let out = grid.assemble(&perm).unwrap();
        assert!((out.sum() - p.sum()).abs() < 1e-4);
    }

    #[test]
    fn swap_of_marked_sections_lands_in_slots() {
        // Section 0 all ones, section 1 all zeros, rest 0.5.
        let mut data = Array2::<f32>::from_elem((4, 4), 0.5);
        for i in 0..2 {
            for j in 0..2 {
                data[[i, j]] = 1.0;
                data[[i, j + 2]] = 0.0;
            }
        }
        let p = Psf::new(data).unwrap();
        let grid = split_sections(&p, 2, 2).unwrap();
        let perm = Permutation::from_mapping(vec![1, 0, 2, 3]).unwrap();
        let out = grid.assemble(&perm).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out.data()[[i, j]], 0.0, "slot 0 now holds section 1");
                assert_eq!(out.data()[[i, j + 2]], 1.0, "slot 1 now holds section 0");
            }
        }
    }

    #[test]
    fn permutation_determinism_and_identity() {
        assert!(random_permutation(1, 0).unwrap().is_identity());
        let a = random_permutation(25, 42).unwrap();
        let b = random_permutation(25, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_uniformity_n3() {
        // All 6 permutations of 3 slots within 0.02 of 1/6 over 10k draws.
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000usize;
        for seed in 0..draws as u64 {
            let p = random_permutation(3, seed).unwrap();
            *counts.entry(p.mapping().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (perm, count) in counts {
            let freq = count as f64 / draws as f64;
            assert!(
                (freq - 1.0 / 6.0).abs() < 0.02,
                "permutation {perm:?} frequency {freq}"
            );
        }
    }

    #[test]
    fn sparsify_delta() {
        let mut data = Array2::<f32>::zeros((4, 5));
        data[[2, 3]] = 1.0;
        let p = Psf::new(data).unwrap();
        let s = sparsify(&p, 0.0, 5).unwrap();
        assert_eq!(s.coords(), &[(2, 3)]);
        assert_eq!(s.values(), &[1.0]);
        assert_eq!(s.padded_values().len(), 5);
    }

    #[test]
    fn sparsify_all_zero_fully_padded() {
        let p = uniform_psf(3, 3, 0.0);
        let s = sparsify(&p, 0.0, 4).unwrap();
        assert_eq!(s.live_len(), 0);
        assert_eq!(s.padded_coords().len(), 4);
        assert!(s.padded_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparsify_overflow_errors() {
        let p = uniform_psf(3, 3, 1.0);
        assert!(matches!(
            sparsify(&p, 0.5, 4),
            Err(Error::PadOverflow { nonzeros: 9, capacity: 4 })
        ));
    }

    #[test]
    fn sparsify_densify_matches_masked_original() {
        let p = synthetic_caustic(16, 7);
        let thr = default_threshold(&p);
        let s = sparsify(&p, thr, 16 * 16).unwrap();
        let d = densify(&s).unwrap();
        for ((i, j), &v) in p.data().indexed_iter() {
            let want = if v > thr { v } else { 0.0 };
            assert_eq!(d.data()[[i, j]], want);
        }
    }

    #[test]
    fn densify_accumulates_duplicates() {
        let s = SparsePsf::from_parts(vec![(1, 1), (1, 1)], vec![2.0, 3.0], (3, 3), 4).unwrap();
        let d = densify(&s).unwrap();
        assert_eq!(d.data()[[1, 1]], 5.0);
    }

    #[test]
    fn densify_rejects_out_of_range() {
        let s = SparsePsf::from_parts(vec![(5, 0)], vec![1.0], (3, 3), 2).unwrap();
        assert!(matches!(densify(&s), Err(Error::CoordOutOfRange { .. })));
    }

    #[test]
    fn unfold_single_tile_is_input() {
        let p = synthetic_caustic(8, 9);
        let t = unfold_psf(&p, 8).unwrap();
        assert_eq!(t.tile_count(), 1);
        assert_eq!(&t.tiles()[0], p.data());
    }

    #[test]
    fn unfold_refold_roundtrip() {
        let p = synthetic_caustic(4, 11);
        let t = unfold_psf(&p, 2).unwrap();
        assert_eq!(t.tile_count(), 4);
        let back = t.refold().unwrap();
        assert_eq!(back.data(), p.data());
    }

    #[test]
    fn psf_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.psf");
        let p = synthetic_caustic(12, 5).normalize().unwrap();
        save_psf(&p, &path).unwrap();
        let back = load_psf(&path).unwrap();
        assert_eq!(back.data(), p.data());
        assert!(back.is_normalized());
    }

    #[test]
    fn synthetic_caustic_is_sparse() {
        let p = synthetic_caustic(64, 0);
        assert!(p.sparsity_fraction() < 0.5, "{}", p.sparsity_fraction());
    }
}
