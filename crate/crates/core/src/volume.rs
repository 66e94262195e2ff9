//! Dense 3D volumes, raw file I/O, normalization, and the block grid used for
//! training and slice-stacked inference.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("data file holds {actual} bytes, metadata implies {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("unsupported dtype/order '{0}' (expected f32le / zyx)")]
    UnsupportedDtype(String),
    #[error("bad metadata: {0}")]
    BadMeta(String),
    #[error("dimensions must be positive, got {0:?}")]
    BadDims([usize; 3]),
    #[error("voxel count {len} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], len: usize },
    #[error("non-finite voxel at index {0}")]
    NonFinite(usize),
    #[error("voxel ({0}, {1}, {2}) is not covered by any block")]
    CoverageGap(usize, usize, usize),
    #[error("image and label blocks are not aligned: {0}")]
    AlignmentMismatch(String),
    #[error("invalid block grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `W x H x D` grid of f32 voxels; linear index `(z * H + y) * W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    width: usize,
    height: usize,
    depth: usize,
    voxels: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::BadDims(dims));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::LengthMismatch {
                dims,
                len: voxels.len(),
            });
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            width: dims[0],
            height: dims[1],
            depth: dims[2],
            voxels,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![0.0; dims.iter().product()]).expect("positive dims")
    }

    /// `[W, H, D]`.
    pub fn dims(&self) -> [usize; 3] {
        [self.width, self.height, self.depth]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }

    /// The `z`-th `W x H` slice, row-major.
    pub fn slice_z(&self, z: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.voxels[z * n..(z + 1) * n]
    }
}

/// JSON sidecar of a raw volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub dtype: String,
    pub order: String,
}

impl RawMeta {
    pub fn for_dims(dims: [usize; 3]) -> Self {
        Self {
            width: dims[0],
            height: dims[1],
            depth: dims[2],
            dtype: "f32le".into(),
            order: "zyx".into(),
        }
    }
}

/// Little-endian f32 payload, x fastest.
pub fn encode_raw(v: &Volume3D) -> Vec<u8> {
    v.voxels.iter().flat_map(|f| f.to_le_bytes()).collect()
}

pub fn decode_raw(meta: &RawMeta, bytes: &[u8]) -> Result<Volume3D, VolumeError> {
    if meta.dtype != "f32le" {
        return Err(VolumeError::UnsupportedDtype(meta.dtype.clone()));
    }
    if meta.order != "zyx" {
        return Err(VolumeError::UnsupportedDtype(meta.order.clone()));
    }
    let dims = [meta.width, meta.height, meta.depth];
    let expected = dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(dims, voxels)
}

pub fn load_raw(data_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<Volume3D, VolumeError> {
    let meta_text = fs::read_to_string(meta_path)?;
    let meta: RawMeta = serde_json::from_str(&meta_text).map_err(|e| VolumeError::BadMeta(e.to_string()))?;
    let bytes = fs::read(data_path)?;
    decode_raw(&meta, &bytes)
}

pub fn save_raw(v: &Volume3D, data_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<(), VolumeError> {
    crate::io::write_atomic(data_path.as_ref(), &encode_raw(v))?;
    let meta = serde_json::to_string_pretty(&RawMeta::for_dims(v.dims())).expect("meta serializes");
    crate::io::write_atomic(meta_path.as_ref(), meta.as_bytes())?;
    Ok(())
}

/// Linear-interpolated percentile of already sorted values, `pct` in `[0, 100]`.
fn percentile_sorted(sorted: &[f32], pct: f32) -> f32 {
    let rank = (pct.clamp(0.0, 100.0) as f64 / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac) as f32
}

/// Clips to the `[lo_pct, hi_pct]` percentile range and maps it onto `[0, 1]`.
/// Volumes whose percentile range collapses map to zeros.
pub fn normalize(v: &Volume3D, lo_pct: f32, hi_pct: f32) -> Volume3D {
    let mut sorted = v.voxels.clone();
    sorted.sort_by(f32::total_cmp);
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    let mut out = v.clone();
    if hi <= lo {
        out.voxels.iter_mut().for_each(|x| *x = 0.0);
        return out;
    }
    let span = hi - lo;
    for x in &mut out.voxels {
        *x = ((x.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0);
    }
    out
}

/// Sub-volume cut from a source volume at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub origin: [usize; 3],
    pub size: [usize; 3],
    pub data: Vec<f32>,
}

impl Block {
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.size[1] + y) * self.size[0] + x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockGridSpec {
    pub block_size: [usize; 3],
    pub stride: [usize; 3],
    pub pad_value: f32,
}

impl Default for BlockGridSpec {
    fn default() -> Self {
        Self::tiling([100, 100, 5])
    }
}

impl BlockGridSpec {
    /// Non-overlapping grid of `block_size` blocks.
    pub fn tiling(block_size: [usize; 3]) -> Self {
        Self {
            block_size,
            stride: block_size,
            pad_value: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        for a in 0..3 {
            if self.block_size[a] == 0 || self.stride[a] == 0 || self.stride[a] > self.block_size[a] {
                return Err(VolumeError::BadGrid(format!(
                    "block {:?} stride {:?}",
                    self.block_size, self.stride
                )));
            }
        }
        Ok(())
    }

    /// Origins in z-major, then y, then x order.
    pub fn origins(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let axis = |a: usize| -> Vec<usize> {
            let n = dims[a].div_ceil(self.stride[a]);
            (0..n).map(|i| i * self.stride[a]).filter(|&o| o < dims[a]).collect()
        };
        let (xs, ys, zs) = (axis(0), axis(1), axis(2));
        let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }
}

/// Cuts `v` into grid blocks; parts past the volume edge hold `pad_value`.
pub fn blockify(v: &Volume3D, spec: &BlockGridSpec) -> Result<Vec<Block>, VolumeError> {
    spec.validate()?;
    let [bw, bh, bd] = spec.block_size;
    Ok(spec
        .origins(v.dims())
        .into_iter()
        .map(|origin| {
            let mut data = vec![spec.pad_value; bw * bh * bd];
            for z in 0..bd {
                let sz = origin[2] + z;
                if sz >= v.depth {
                    break;
                }
                for y in 0..bh {
                    let sy = origin[1] + y;
                    if sy >= v.height {
                        break;
                    }
                    let w = bw.min(v.width - origin[0]);
                    let src = v.index(origin[0], sy, sz);
                    let dst = (z * bh + y) * bw;
                    data[dst..dst + w].copy_from_slice(&v.voxels[src..src + w]);
                }
            }
            Block {
                origin,
                size: spec.block_size,
                data,
            }
        })
        .collect())
}

/// Reassembles block predictions into a `dims` volume.
///
/// Blocks are accumulated in sorted `(z, y, x)` origin order; voxels covered
/// more than once take the mean. Voxels covered once are copied bit-for-bit.
pub fn stitch(blocks: &[Block], dims: [usize; 3]) -> Result<Volume3D, VolumeError> {
    let [w, h, d] = dims;
    let mut order: Vec<&Block> = blocks.iter().collect();
    order.sort_by_key(|b| [b.origin[2], b.origin[1], b.origin[0]]);
    let mut acc = vec![0.0f32; w * h * d];
    let mut count = vec![0u32; w * h * d];
    for b in order {
        let [bw, bh, bd] = b.size;
        if b.data.len() != bw * bh * bd {
            return Err(VolumeError::LengthMismatch {
                dims: b.size,
                len: b.data.len(),
            });
        }
        for z in 0..bd {
            let vz = b.origin[2] + z;
            if vz >= d {
                break;
            }
            for y in 0..bh {
                let vy = b.origin[1] + y;
                if vy >= h {
                    break;
                }
                for x in 0..bw {
                    let vx = b.origin[0] + x;
                    if vx >= w {
                        break;
                    }
                    let i = (vz * h + vy) * w + vx;
                    let val = b.data[(z * bh + y) * bw + x];
                    acc[i] = if count[i] == 0 { val } else { acc[i] + val };
                    count[i] += 1;
                }
            }
        }
    }
    for (i, (&c, a)) in count.iter().zip(acc.iter_mut()).enumerate() {
        match c {
            0 => {
                let x = i % w;
                let y = (i / w) % h;
                let z = i / (w * h);
                return Err(VolumeError::CoverageGap(x, y, z));
            }
            1 => {}
            n => *a /= n as f32,
        }
    }
    Volume3D::new(dims, acc)
}

/// Fraction of voxels with label `>= threshold`.
pub fn foreground_ratio(label: &Block, threshold: f32) -> f32 {
    if label.data.is_empty() {
        return 0.0;
    }
    let fg = label.data.iter().filter(|&&v| v >= threshold).count();
    fg as f32 / label.data.len() as f32
}

/// Keeps `(image, label)` pairs whose label foreground ratio is at least `tau`.
pub fn filter_training_blocks(
    images: Vec<Block>,
    labels: Vec<Block>,
    tau: f32,
) -> Result<Vec<(Block, Block)>, VolumeError> {
    if images.len() != labels.len() {
        return Err(VolumeError::AlignmentMismatch(format!(
            "{} image blocks vs {} label blocks",
            images.len(),
            labels.len()
        )));
    }
    let mut kept = Vec::new();
    for (img, lab) in images.into_iter().zip(labels) {
        if img.origin != lab.origin || img.size != lab.size {
            return Err(VolumeError::AlignmentMismatch(format!(
                "image block at {:?} paired with label block at {:?}",
                img.origin, lab.origin
            )));
        }
        if foreground_ratio(&lab, 0.5) >= tau {
            kept.push((img, lab));
        }
    }
    Ok(kept)
}
