//! Latent-code traversal: enumerate a grid of codes over every latent
//! dimension, decode or generate one image per code, and tile the results
//! into a single grayscale image file, optionally probing whether outputs
//! land at positions excluded from training.

use std::path::Path;

use crate::dsprites::{centroid, centroid_to_position_label, IMAGE_PIXELS, IMAGE_SIDE, NUM_POSITIONS};
use crate::error::{Error, Result};
use crate::models::{Decoder, Generator};
use crate::tensor::Tensor;

const GUTTER_PX: usize = 2;
const GUTTER_VALUE: u8 = 128;

/// Range and step of the per-dimension sweep, applied to every code
/// dimension via nested loops.
#[derive(Debug, Clone)]
pub struct TraversalSpec {
    pub lo: f32,
    pub hi: f32,
    /// Whether `hi` itself is included in the sweep.
    pub inclusive: bool,
    pub step: f32,
    pub code_dim: usize,
}

impl TraversalSpec {
    /// The sweep from the nine-step protocol: [-2, 2] inclusive, step 0.5.
    pub fn nine_steps(code_dim: usize) -> TraversalSpec {
        TraversalSpec {
            lo: -2.0,
            hi: 2.0,
            inclusive: true,
            step: 0.5,
            code_dim,
        }
    }

    /// The coarser sweep: [-2, 2) exclusive, step 1.
    pub fn four_steps(code_dim: usize) -> TraversalSpec {
        TraversalSpec {
            lo: -2.0,
            hi: 2.0,
            inclusive: false,
            step: 1.0,
            code_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Config(format!(
                "traversal step must be > 0, got {}",
                self.step
            )));
        }
        if self.hi < self.lo || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "traversal range [{}, {}] is invalid",
                self.lo, self.hi
            )));
        }
        if self.code_dim == 0 {
            return Err(Error::Config("traversal needs code_dim >= 1".into()));
        }
        Ok(())
    }

    /// Swept values for one dimension:
    /// floor((hi - lo)/step) + 1 if inclusive, else floor((hi - lo)/step).
    pub fn values_per_dim(&self) -> Vec<f32> {
        let span = ((self.hi - self.lo) as f64 / self.step as f64).floor() as usize;
        let count = if self.inclusive { span + 1 } else { span };
        (0..count)
            .map(|i| self.lo + i as f32 * self.step)
            .collect()
    }

    pub fn total_codes(&self) -> usize {
        self.values_per_dim().len().pow(self.code_dim as u32)
    }
}

/// All code combinations in lexicographic nested-loop order, last dimension
/// fastest.
pub fn traversal_codes(spec: &TraversalSpec) -> Result<Vec<Vec<f32>>> {
    spec.validate()?;
    let values = spec.values_per_dim();
    if values.is_empty() {
        return Err(Error::Config(
            "traversal range contains no values (exclusive bound tighter than step)".into(),
        ));
    }
    let total = values.len().pow(spec.code_dim as u32);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; spec.code_dim];
    for _ in 0..total {
        out.push(idx.iter().map(|&i| values[i]).collect());
        for d in (0..spec.code_dim).rev() {
            idx[d] += 1;
            if idx[d] < values.len() {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}

/// Tiled traversal output: one 64x64 image per code, row-major, plus the
/// grid layout. Trailing cells beyond `images.len()` render blank.
#[derive(Debug, Clone)]
pub struct TraversalGrid {
    pub images: Vec<Vec<f32>>,
    pub codes: Vec<Vec<f32>>,
    pub rows: usize,
    pub cols: usize,
    /// Fixed noise vector when produced by a generator; decoders have none.
    pub noise: Option<Vec<f32>>,
}

fn grid_layout(count: usize) -> (usize, usize) {
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    (rows, cols)
}

fn assemble_grid(
    codes: Vec<Vec<f32>>,
    noise: Option<Vec<f32>>,
    mut produce: impl FnMut(&[Vec<f32>]) -> Result<Vec<Vec<f32>>>,
) -> Result<TraversalGrid> {
    let mut images = Vec::with_capacity(codes.len());
    for chunk in codes.chunks(128) {
        images.extend(produce(chunk)?);
    }
    let (rows, cols) = grid_layout(codes.len());
    Ok(TraversalGrid {
        images,
        codes,
        rows,
        cols,
        noise,
    })
}

fn codes_to_tensor(chunk: &[Vec<f32>], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(chunk.len() * dim);
    for c in chunk {
        data.extend_from_slice(c);
    }
    Tensor::new(vec![chunk.len(), dim], data)
}

fn split_images(batch: &Tensor) -> Vec<Vec<f32>> {
    batch
        .data()
        .chunks(IMAGE_PIXELS)
        .map(|c| c.to_vec())
        .collect()
}

/// Decoder-mode traversal: image i = sigmoid(decode(code i)).
pub fn render_traversal_decoder(decoder: &Decoder, spec: &TraversalSpec) -> Result<TraversalGrid> {
    if spec.code_dim != decoder.latent_dim {
        return Err(Error::ArchitectureMismatch(format!(
            "traversal code_dim {} vs decoder latent_dim {}",
            spec.code_dim, decoder.latent_dim
        )));
    }
    let codes = traversal_codes(spec)?;
    assemble_grid(codes, None, |chunk| {
        let z = codes_to_tensor(chunk, spec.code_dim)?;
        Ok(split_images(&decoder.decode(&z)?.sigmoid()?))
    })
}

/// Generator-mode traversal: one fixed noise vector is reused for every
/// code so the grid shows the code's effect in isolation.
pub fn render_traversal_generator(
    generator: &Generator,
    spec: &TraversalSpec,
    noise: &[f32],
) -> Result<TraversalGrid> {
    if spec.code_dim != generator.code_dim {
        return Err(Error::ArchitectureMismatch(format!(
            "traversal code_dim {} vs generator code_dim {}",
            spec.code_dim, generator.code_dim
        )));
    }
    if noise.len() != generator.noise_dim {
        return Err(Error::ArchitectureMismatch(format!(
            "noise length {} vs generator noise_dim {}",
            noise.len(),
            generator.noise_dim
        )));
    }
    let codes = traversal_codes(spec)?;
    assemble_grid(codes, Some(noise.to_vec()), |chunk| {
        let c = codes_to_tensor(chunk, spec.code_dim)?;
        let mut zdata = Vec::with_capacity(chunk.len() * noise.len());
        for _ in 0..chunk.len() {
            zdata.extend_from_slice(noise);
        }
        let z = Tensor::new(vec![chunk.len(), noise.len()], zdata)?;
        Ok(split_images(&generator.generate(&z, &c)?))
    })
}

/// Pixel dimensions of the assembled file for a given layout.
pub fn grid_pixel_size(rows: usize, cols: usize) -> (usize, usize) {
    (
        cols * IMAGE_SIDE + (cols - 1) * GUTTER_PX,
        rows * IMAGE_SIDE + (rows - 1) * GUTTER_PX,
    )
}

/// Flattens the grid into raw grayscale bytes: tiles at round(255 * value),
/// 2-pixel gutters at 128, missing trailing tiles at 0.
pub fn grid_pixels(grid: &TraversalGrid) -> (Vec<u8>, usize, usize) {
    let (w, h) = grid_pixel_size(grid.rows, grid.cols);
    let mut out = vec![GUTTER_VALUE; w * h];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let tile = grid.images.get(r * grid.cols + c);
            let oy = r * (IMAGE_SIDE + GUTTER_PX);
            let ox = c * (IMAGE_SIDE + GUTTER_PX);
            for iy in 0..IMAGE_SIDE {
                for ix in 0..IMAGE_SIDE {
                    let v = match tile {
                        Some(t) => (255.0 * t[iy * IMAGE_SIDE + ix]).round() as u8,
                        None => 0,
                    };
                    out[(oy + iy) * w + ox + ix] = v;
                }
            }
        }
    }
    (out, w, h)
}

/// Writes the grid as a binary PGM (P5) file. Convert with e.g.
/// `magick grid.pgm grid.png` if another format is needed.
pub fn write_grid(grid: &TraversalGrid, path: &Path) -> Result<()> {
    let (pixels, w, h) = grid_pixels(grid);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads back a binary PGM written by [`write_grid`].
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::Config("not a P5 PGM: missing header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Config("not a P5 PGM: bad header".into()))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("P5") {
        return Err(Error::Config("not a P5 PGM: bad magic".into()));
    }
    let w: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config("not a P5 PGM: bad width".into()))?;
    let h: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config("not a P5 PGM: bad height".into()))?;
    let data = bytes[header_end + 1..].to_vec();
    if data.len() != w * h {
        return Err(Error::Config(format!(
            "PGM payload {} bytes, expected {}",
            data.len(),
            w * h
        )));
    }
    Ok((data, w, h))
}

/// Companion CSV for a grid: `row,col,code_0..`; generator grids carry the
/// fixed noise vector in a leading comment.
pub fn codes_csv(grid: &TraversalGrid) -> String {
    let dim = grid.codes.first().map(|c| c.len()).unwrap_or(0);
    let mut out = String::new();
    if let Some(noise) = &grid.noise {
        let vals: Vec<String> = noise.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("# noise={}\n", vals.join(";")));
    }
    out.push_str("row,col");
    for d in 0..dim {
        out.push_str(&format!(",code_{d}"));
    }
    out.push('\n');
    for (i, code) in grid.codes.iter().enumerate() {
        out.push_str(&format!("{},{}", i / grid.cols, i % grid.cols));
        for v in code {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Where traversal outputs land relative to the positions excluded from
/// training (pos_x labels above the threshold).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeReport {
    pub threshold: usize,
    /// Excluded pos_x labels, empty when the threshold keeps everything.
    pub band: Vec<usize>,
    pub total_images: usize,
    pub blank_images: usize,
    /// Images whose foreground centroid maps to an excluded pos_x label.
    pub in_band: usize,
}

impl ProbeReport {
    pub fn to_text(&self) -> String {
        format!(
            "threshold={}\nband_width={}\ntotal_images={}\nblank_images={}\nin_band={}\n",
            self.threshold,
            self.band.len(),
            self.total_images,
            self.blank_images,
            self.in_band
        )
    }
}

/// Counts traversal images whose centroid-x falls at pos_x labels the model
/// never saw during training. Blank images are counted separately and
/// excluded from centroid statistics.
pub fn generalization_probe(grid: &TraversalGrid, threshold: usize) -> Result<ProbeReport> {
    if threshold > NUM_POSITIONS {
        return Err(Error::Config(format!(
            "threshold must be <= {NUM_POSITIONS}, got {threshold}"
        )));
    }
    let band: Vec<usize> = (threshold.saturating_add(1)..NUM_POSITIONS).collect();
    let mut blank = 0usize;
    let mut in_band = 0usize;
    for img in &grid.images {
        match centroid(img) {
            None => blank += 1,
            Some((cx, _)) => {
                let label = centroid_to_position_label(cx);
                if band.contains(&label) {
                    in_band += 1;
                }
            }
        }
    }
    Ok(ProbeReport {
        threshold,
        band,
        total_images: grid.images.len(),
        blank_images: blank,
        in_band,
    })
}
