//! Procedural regeneration of the sprite factor lattice.
//!
//! The lattice enumerates 3 shapes x 6 scales x 40 orientations x 32 x
//! positions x 32 y positions = 737,280 binary 64x64 images. Images are
//! rasterized with a center-of-pixel point-in-shape test, no anti-aliasing.
//!
//! Geometry conventions (label counts are fixed; the mappings are ours):
//! scale label s -> extent 30*(0.5 + 0.1*s) pixels; orientation label r ->
//! angle 2*pi*r/40; position label p -> centroid 16 + 32*p/31 pixels.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::rng::{mix_seed, SeededRng};
use crate::tensor::Tensor;

pub const NUM_SHAPES: usize = 3;
pub const NUM_SCALES: usize = 6;
pub const NUM_ORIENTATIONS: usize = 40;
pub const NUM_POSITIONS: usize = 32;
pub const LATTICE_SIZE: usize = NUM_SHAPES * NUM_SCALES * NUM_ORIENTATIONS * NUM_POSITIONS * NUM_POSITIONS;
pub const IMAGE_SIDE: usize = 64;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Packed 1-bit image size in bytes (row-major, MSB-first).
pub const PACKED_BYTES: usize = IMAGE_PIXELS / 8;

/// Strides for (shape, scale, orientation, pos_x, pos_y), pos_y fastest.
pub const STRIDES: [usize; 5] = [245_760, 40_960, 1_024, 32, 1];

pub const NUM_FACTORS: usize = 5;
pub const FACTOR_NAMES: [&str; 5] = ["shape", "scale", "orientation", "pos_x", "pos_y"];
pub const FACTOR_SIZES: [usize; 5] = [
    NUM_SHAPES,
    NUM_SCALES,
    NUM_ORIENTATIONS,
    NUM_POSITIONS,
    NUM_POSITIONS,
];

/// Ground-truth labels of one lattice point: 0=square, 1=ellipse, 2=heart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FactorTuple {
    pub shape: usize,
    pub scale: usize,
    pub orientation: usize,
    pub pos_x: usize,
    pub pos_y: usize,
}

impl FactorTuple {
    pub fn new(
        shape: usize,
        scale: usize,
        orientation: usize,
        pos_x: usize,
        pos_y: usize,
    ) -> Result<FactorTuple> {
        let f = FactorTuple {
            shape,
            scale,
            orientation,
            pos_x,
            pos_y,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (&v, &max)) in self.labels().iter().zip(&FACTOR_SIZES).enumerate() {
            if v >= max {
                return Err(Error::FactorOutOfRange {
                    factor: FACTOR_NAMES[i],
                    value: v,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> [usize; 5] {
        [
            self.shape,
            self.scale,
            self.orientation,
            self.pos_x,
            self.pos_y,
        ]
    }

    pub fn label(&self, factor: usize) -> usize {
        self.labels()[factor]
    }

    pub fn set_label(&mut self, factor: usize, value: usize) -> Result<()> {
        match factor {
            0 => self.shape = value,
            1 => self.scale = value,
            2 => self.orientation = value,
            3 => self.pos_x = value,
            4 => self.pos_y = value,
            _ => {
                return Err(Error::FactorOutOfRange {
                    factor: "factor axis",
                    value: factor,
                    max: NUM_FACTORS,
                })
            }
        }
        self.validate()
    }
}

/// Bijective lattice index: strides (245760, 40960, 1024, 32, 1).
pub fn factor_to_index(f: &FactorTuple) -> Result<usize> {
    f.validate()?;
    Ok(f
        .labels()
        .iter()
        .zip(&STRIDES)
        .map(|(l, s)| l * s)
        .sum())
}

pub fn index_to_factor(i: usize) -> Result<FactorTuple> {
    if i >= LATTICE_SIZE {
        return Err(Error::IndexOutOfRange(i, LATTICE_SIZE));
    }
    let mut rem = i;
    let mut labels = [0usize; 5];
    for (l, s) in labels.iter_mut().zip(&STRIDES) {
        *l = rem / s;
        rem %= s;
    }
    Ok(FactorTuple {
        shape: labels[0],
        scale: labels[1],
        orientation: labels[2],
        pos_x: labels[3],
        pos_y: labels[4],
    })
}

/// One rendered lattice point: binary pixels with their provenance labels.
#[derive(Debug, Clone)]
pub struct SpriteImage {
    pub pixels: Vec<f32>,
    pub factors: FactorTuple,
}

const BASE_EXTENT_PX: f64 = 30.0;
const CENTROID_LO: f64 = 16.0;
const CENTROID_HI: f64 = 48.0;
// sextic heart bounding box: x in [-1.138, 1.138], y in [-1.0, 1.236]
const HEART_SCALE: f64 = 2.276;
const HEART_Y_CENTER: f64 = 0.118;

fn position_to_centroid(p: usize) -> f64 {
    CENTROID_LO + (CENTROID_HI - CENTROID_LO) * p as f64 / (NUM_POSITIONS - 1) as f64
}

/// Inverse of `position_to_centroid`, clamped to valid labels.
pub fn centroid_to_position_label(c: f64) -> usize {
    let raw = (c - CENTROID_LO) * (NUM_POSITIONS - 1) as f64 / (CENTROID_HI - CENTROID_LO);
    raw.round().clamp(0.0, (NUM_POSITIONS - 1) as f64) as usize
}

fn inside_unit_shape(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u.abs() <= 0.5 && v.abs() <= 0.5,
        1 => {
            // oval: semi-axes 0.5 (u) and 0.325 (v)
            let a = u / 0.5;
            let b = v / 0.325;
            a * a + b * b <= 1.0
        }
        _ => {
            // (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, scaled to the unit box,
            // image v grows downward so flip to keep the lobes up
            let x = HEART_SCALE * u;
            let y = -HEART_SCALE * v + HEART_Y_CENTER;
            let q = x * x + y * y - 1.0;
            q * q * q - x * x * y * y * y <= 0.0
        }
    }
}

/// Deterministic binary rasterization of one lattice point.
pub fn render(f: &FactorTuple) -> Result<SpriteImage> {
    f.validate()?;
    let extent = BASE_EXTENT_PX * (0.5 + 0.1 * f.scale as f64);
    let angle = 2.0 * std::f64::consts::PI * f.orientation as f64 / NUM_ORIENTATIONS as f64;
    let (cx, cy) = (
        position_to_centroid(f.pos_x),
        position_to_centroid(f.pos_y),
    );
    let (sin, cos) = angle.sin_cos();
    let mut pixels = vec![0f32; IMAGE_PIXELS];
    for iy in 0..IMAGE_SIDE {
        let dy = (iy as f64 + 0.5) - cy;
        for ix in 0..IMAGE_SIDE {
            let dx = (ix as f64 + 0.5) - cx;
            let u = (cos * dx + sin * dy) / extent;
            let v = (-sin * dx + cos * dy) / extent;
            if inside_unit_shape(f.shape, u, v) {
                pixels[iy * IMAGE_SIDE + ix] = 1.0;
            }
        }
    }
    Ok(SpriteImage { pixels, factors: *f })
}

/// Foreground centroid in pixel coordinates; `None` for a blank image.
pub fn centroid(pixels: &[f32]) -> Option<(f64, f64)> {
    let (mut n, mut sx, mut sy) = (0f64, 0f64, 0f64);
    for iy in 0..IMAGE_SIDE {
        for ix in 0..IMAGE_SIDE {
            if pixels[iy * IMAGE_SIDE + ix] >= 0.5 {
                n += 1.0;
                sx += ix as f64 + 0.5;
                sy += iy as f64 + 0.5;
            }
        }
    }
    if n == 0.0 {
        None
    } else {
        Some((sx / n, sy / n))
    }
}

/// Per-factor selection: labels start..stop (exclusive) strided by step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorSel {
    pub start: usize,
    pub stop: usize,
    pub step: usize,
}

impl FactorSel {
    pub fn all(size: usize) -> FactorSel {
        FactorSel {
            start: 0,
            stop: size,
            step: 1,
        }
    }

    pub fn fixed(v: usize) -> FactorSel {
        FactorSel {
            start: v,
            stop: v + 1,
            step: 1,
        }
    }

    pub fn values(&self) -> Vec<usize> {
        (self.start..self.stop).step_by(self.step.max(1)).collect()
    }
}

/// Sub-lattice selection, one [`FactorSel`] per factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeSpec {
    pub sels: [FactorSel; 5],
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec {
            sels: [
                FactorSel::all(NUM_SHAPES),
                FactorSel::all(NUM_SCALES),
                FactorSel::all(NUM_ORIENTATIONS),
                FactorSel::all(NUM_POSITIONS),
                FactorSel::all(NUM_POSITIONS),
            ],
        }
    }
}

impl LatticeSpec {
    /// The 256-image desk-scale subset: one shape/scale/orientation,
    /// positions strided by 2.
    pub fn desk_256() -> LatticeSpec {
        LatticeSpec {
            sels: [
                FactorSel::fixed(0),
                FactorSel::fixed(3),
                FactorSel::fixed(0),
                FactorSel {
                    start: 0,
                    stop: NUM_POSITIONS,
                    step: 2,
                },
                FactorSel {
                    start: 0,
                    stop: NUM_POSITIONS,
                    step: 2,
                },
            ],
        }
    }

    pub fn factor_values(&self) -> [Vec<usize>; 5] {
        [
            self.sels[0].values(),
            self.sels[1].values(),
            self.sels[2].values(),
            self.sels[3].values(),
            self.sels[4].values(),
        ]
    }

    pub fn cardinality(&self) -> usize {
        self.factor_values().iter().map(|v| v.len()).product()
    }
}

/// Ordered subset of the lattice plus the iteration seed.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub indices: Vec<u32>,
    pub position_threshold: Option<usize>,
    pub shuffle_seed: u64,
}

impl DatasetView {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Seeded permutation of the view for one epoch, chunked into batches;
    /// the final short batch is kept. Pure function of (indices, seed, epoch).
    pub fn batches(&self, batch_size: usize, epoch: usize) -> Result<Vec<Vec<u32>>> {
        if self.indices.is_empty() {
            return Err(Error::EmptySelection("dataset view has no items".into()));
        }
        if batch_size == 0 {
            return Err(Error::Domain {
                op: "batches",
                msg: "batch_size must be >= 1".into(),
            });
        }
        let mut perm = self.indices.clone();
        let mut rng = SeededRng::new(mix_seed(self.shuffle_seed, epoch as u64));
        rng.shuffle(&mut perm);
        Ok(perm.chunks(batch_size).map(|c| c.to_vec()).collect())
    }
}

/// View over the sub-lattice selected by `spec`, optionally filtered to
/// pos_x <= threshold. Enumeration follows lattice order.
pub fn reduced_lattice(
    spec: &LatticeSpec,
    position_threshold: Option<usize>,
    shuffle_seed: u64,
) -> Result<DatasetView> {
    let values = spec.factor_values();
    if values.iter().any(|v| v.is_empty()) {
        return Err(Error::EmptySelection(format!("lattice spec {spec:?}")));
    }
    let mut indices = Vec::with_capacity(spec.cardinality());
    for &sh in &values[0] {
        for &sc in &values[1] {
            for &or in &values[2] {
                for &px in &values[3] {
                    if position_threshold.is_some_and(|t| px > t) {
                        continue;
                    }
                    for &py in &values[4] {
                        let f = FactorTuple::new(sh, sc, or, px, py)?;
                        indices.push(factor_to_index(&f)? as u32);
                    }
                }
            }
        }
    }
    if indices.is_empty() {
        return Err(Error::EmptySelection(
            "position threshold excludes every selected pos_x".into(),
        ));
    }
    Ok(DatasetView {
        indices,
        position_threshold,
        shuffle_seed,
    })
}

/// Full lattice filtered to pos_x <= t (0-based inclusive; t = 32 keeps all).
pub fn filter_by_threshold(t: usize, shuffle_seed: u64) -> Result<DatasetView> {
    if t > NUM_POSITIONS {
        return Err(Error::Domain {
            op: "filter_by_threshold",
            msg: format!("threshold {t} outside [0, {NUM_POSITIONS}]"),
        });
    }
    reduced_lattice(&LatticeSpec::default(), Some(t), shuffle_seed)
}

fn pack_bits(pixels: &[f32]) -> [u8; PACKED_BYTES] {
    let mut out = [0u8; PACKED_BYTES];
    for (i, &p) in pixels.iter().enumerate() {
        if p >= 0.5 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_bits(packed: &[u8], out: &mut [f32]) {
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = ((packed[i / 8] >> (7 - i % 8)) & 1) as f32;
    }
}

/// In-memory dataset: packed 1-bit images keyed by lattice index.
pub struct Dataset {
    packed: Vec<u8>,
    factors: Vec<FactorTuple>,
    by_index: HashMap<u32, usize>,
}

impl Dataset {
    /// Renders every point of a view into packed storage.
    pub fn materialize(view: &DatasetView) -> Result<Dataset> {
        let mut packed = Vec::with_capacity(view.len() * PACKED_BYTES);
        let mut factors = Vec::with_capacity(view.len());
        let mut by_index = HashMap::with_capacity(view.len());
        for (slot, &idx) in view.indices.iter().enumerate() {
            let f = index_to_factor(idx as usize)?;
            let img = render(&f)?;
            packed.extend_from_slice(&pack_bits(&img.pixels));
            factors.push(f);
            by_index.insert(idx, slot);
        }
        Ok(Dataset {
            packed,
            factors,
            by_index,
        })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn factors_of(&self, lattice_index: u32) -> Option<&FactorTuple> {
        self.by_index.get(&lattice_index).map(|&s| &self.factors[s])
    }

    /// View over this dataset's points in storage order, e.g. to iterate a
    /// cache loaded from disk.
    pub fn view(&self, shuffle_seed: u64) -> Result<DatasetView> {
        let indices = self
            .factors
            .iter()
            .map(|f| factor_to_index(f).map(|i| i as u32))
            .collect::<Result<_>>()?;
        Ok(DatasetView {
            indices,
            position_threshold: None,
            shuffle_seed,
        })
    }

    /// Assembles a batch as an N x 1 x 64 x 64 tensor in {0, 1}.
    pub fn batch_images(&self, lattice_indices: &[u32]) -> Result<Tensor> {
        let n = lattice_indices.len();
        let mut data = vec![0f32; n * IMAGE_PIXELS];
        for (bi, idx) in lattice_indices.iter().enumerate() {
            let slot = *self.by_index.get(idx).ok_or(Error::IndexOutOfRange(
                *idx as usize,
                LATTICE_SIZE,
            ))?;
            unpack_bits(
                &self.packed[slot * PACKED_BYTES..(slot + 1) * PACKED_BYTES],
                &mut data[bi * IMAGE_PIXELS..(bi + 1) * IMAGE_PIXELS],
            );
        }
        Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)
    }

    pub fn batch_factors(&self, lattice_indices: &[u32]) -> Result<Vec<FactorTuple>> {
        lattice_indices
            .iter()
            .map(|idx| {
                self.factors_of(*idx)
                    .copied()
                    .ok_or(Error::IndexOutOfRange(*idx as usize, LATTICE_SIZE))
            })
            .collect()
    }

    /// Cache file: magic "DSPR", version u32 LE, count u32 LE, then per
    /// record a 512-byte packed bitmap and five u8 factor labels.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"DSPR")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (slot, f) in self.factors.iter().enumerate() {
            w.write_all(&self.packed[slot * PACKED_BYTES..(slot + 1) * PACKED_BYTES])?;
            let l = f.labels();
            w.write_all(&[l[0] as u8, l[1] as u8, l[2] as u8, l[3] as u8, l[4] as u8])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"DSPR" {
            return Err(Error::CheckpointFormat(format!(
                "bad dataset magic {magic:?}, expected DSPR"
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != 1 {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: 1,
            });
        }
        r.read_exact(&mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        let mut packed = vec![0u8; count * PACKED_BYTES];
        let mut factors = Vec::with_capacity(count);
        let mut by_index = HashMap::with_capacity(count);
        let mut labels = [0u8; 5];
        for slot in 0..count {
            r.read_exact(&mut packed[slot * PACKED_BYTES..(slot + 1) * PACKED_BYTES])?;
            r.read_exact(&mut labels)?;
            let f = FactorTuple::new(
                labels[0] as usize,
                labels[1] as usize,
                labels[2] as usize,
                labels[3] as usize,
                labels[4] as usize,
            )?;
            by_index.insert(factor_to_index(&f)? as u32, slot);
            factors.push(f);
        }
        Ok(Dataset {
            packed,
            factors,
            by_index,
        })
    }
}
