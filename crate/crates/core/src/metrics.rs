//! Dice and Hd95 on binary volumes, and whole-volume prediction.

use serde::{Deserialize, Serialize};

use crate::numerics::ops::sigmoid;
use crate::parallel::map_indexed;
use crate::vit::{VitConfig, VitError, VitParams};
use crate::volume::{blockify, stitch, Block, BlockGridSpec, Volume3D, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("mask dims {0:?} and {1:?} differ")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("hd95 is undefined for an empty mask")]
    EmptyMask,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] VitError),
}

/// One bit per voxel, same `(z * H + y) * W + x` layout as [`Volume3D`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self, MetricsError> {
        if dims.contains(&0) || bits.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::LengthMismatch { dims, len: bits.len() }.into());
        }
        Ok(Self { dims, bits })
    }

    /// Voxels with value `>= threshold`.
    pub fn from_volume(v: &Volume3D, threshold: f32) -> Self {
        Self {
            dims: v.dims(),
            bits: v.voxels().iter().map(|&x| x >= threshold).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn to_volume(&self) -> Volume3D {
        let v = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume3D::new(self.dims, v).expect("dims checked at construction")
    }

    /// Foreground voxels with at least one background 6-neighbour; outside the
    /// volume counts as background.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [w, h, d] = self.dims;
        let at = |x: usize, y: usize, z: usize| self.bits[(z * h + y) * w + x];
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !at(x, y, z) {
                        continue;
                    }
                    let edge = x == 0 || y == 0 || z == 0 || x + 1 == w || y + 1 == h || z + 1 == d;
                    if edge
                        || !at(x - 1, y, z)
                        || !at(x + 1, y, z)
                        || !at(x, y - 1, z)
                        || !at(x, y + 1, z)
                        || !at(x, y, z - 1)
                        || !at(x, y, z + 1)
                    {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// `2|A ∩ B| / (|A| + |B|)`, or 1 when both are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f32, MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimMismatch(a.dims, b.dims));
    }
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as u64;
        na += x as u64;
        nb += y as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok((2.0 * inter as f64 / (na + nb) as f64) as f32)
}

const FAR: i64 = i64::MAX / 4;

/// Squared distance of every voxel to the nearest `site`, by separable
/// lower envelopes of parabolas along x, then y, then z.
pub fn squared_distance_transform(dims: [usize; 3], sites: &[[usize; 3]]) -> Vec<i64> {
    let [w, h, d] = dims;
    let mut f = vec![FAR; w * h * d];
    for &[x, y, z] in sites {
        f[(z * h + y) * w + x] = 0;
    }
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut pass = |f: &mut Vec<i64>, len: usize, stride: usize, starts: &mut dyn Iterator<Item = usize>| {
        for s in starts {
            line.clear();
            line.extend((0..len).map(|i| f[s + i * stride]));
            envelope_1d(&line, &mut out);
            for (i, &v) in out.iter().enumerate() {
                f[s + i * stride] = v;
            }
        }
    };
    pass(&mut f, w, 1, &mut (0..h * d).map(|r| r * w));
    pass(
        &mut f,
        h,
        w,
        &mut (0..d).flat_map(|z| (0..w).map(move |x| z * w * h + x)),
    );
    pass(&mut f, d, w * h, &mut (0..w * h));
    f
}

fn envelope_1d(f: &[i64], out: &mut Vec<i64>) {
    let n = f.len();
    out.clear();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i] < FAR).collect();
    if sites.is_empty() {
        out.resize(n, FAR);
        return;
    }
    // Parabola q overtakes parabola v at x where
    // (x - q)^2 + f[q] = (x - v)^2 + f[v]; compared as exact fractions.
    let key = |q: usize| f[q] as i128 + (q * q) as i128;
    let overtakes_at_or_before = |q: usize, v: usize, bound: (i128, i128)| {
        // s(q, v) = (key q - key v) / (2 (q - v)) <= bound.0 / bound.1
        let num = key(q) - key(v);
        let den = 2 * (q as i128 - v as i128);
        num * bound.1 <= bound.0 * den
    };
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut starts: Vec<(i128, i128)> = Vec::with_capacity(sites.len());
    for &q in &sites {
        loop {
            let Some(&v) = hull.last() else {
                hull.push(q);
                starts.push((i128::MIN / 4, 1));
                break;
            };
            let start_v = *starts.last().expect("parallel to hull");
            if hull.len() > 1 && overtakes_at_or_before(q, v, start_v) {
                hull.pop();
                starts.pop();
                continue;
            }
            let num = key(q) - key(v);
            let den = 2 * (q as i128 - v as i128);
            hull.push(q);
            starts.push((num, den));
            break;
        }
    }
    let mut k = 0;
    for x in 0..n {
        while k + 1 < hull.len() {
            let (num, den) = starts[k + 1];
            if num <= x as i128 * den {
                k += 1;
            } else {
                break;
            }
        }
        let v = hull[k];
        let dx = x as i64 - v as i64;
        out.push(dx * dx + f[v]);
    }
}

/// Nearest-rank 95th percentile of the pooled directed surface distances
/// between `a` and `b`.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f32, MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimMismatch(a.dims, b.dims));
    }
    let (sa, sb) = (a.surface(), b.surface());
    if sa.is_empty() || sb.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let [w, h, _] = a.dims;
    let ea = squared_distance_transform(a.dims, &sa);
    let eb = squared_distance_transform(a.dims, &sb);
    let mut dist: Vec<f32> = sa
        .iter()
        .map(|&[x, y, z]| eb[(z * h + y) * w + x])
        .chain(sb.iter().map(|&[x, y, z]| ea[(z * h + y) * w + x]))
        .map(|d2| (d2 as f64).sqrt() as f32)
        .collect();
    dist.sort_by(f32::total_cmp);
    Ok(dist[nearest_rank_95(dist.len())])
}

/// Index `ceil(0.95 n) - 1`, in integer arithmetic.
pub fn nearest_rank_95(n: usize) -> usize {
    (95 * n).div_ceil(100).max(1) - 1
}

/// Dice and Hd95 of one volume; `hd95` is `None` when either mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub dice: f32,
    pub hd95: Option<f32>,
}

pub fn score(pred: &BinaryMask, gt: &BinaryMask) -> Result<VolumeScore, MetricsError> {
    let dice = dice(pred, gt)?;
    let hd95 = match hd95(pred, gt) {
        Ok(v) => Some(v),
        Err(MetricsError::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    Ok(VolumeScore { dice, hd95 })
}

/// Means over volumes. `hd95` averages the volumes where it is defined;
/// `hd95_failures` counts the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dice: f32,
    pub hd95: Option<f32>,
    pub hd95_failures: usize,
    pub volumes: Vec<VolumeScore>,
}

impl EvalResult {
    pub fn from_scores(volumes: Vec<VolumeScore>) -> Self {
        let n = volumes.len().max(1) as f64;
        let dice = (volumes.iter().map(|s| s.dice as f64).sum::<f64>() / n) as f32;
        let defined: Vec<f64> = volumes.iter().filter_map(|s| s.hd95.map(f64::from)).collect();
        let hd95 = (!defined.is_empty()).then(|| (defined.iter().sum::<f64>() / defined.len() as f64) as f32);
        Self {
            dice,
            hd95,
            hd95_failures: volumes.len() - defined.len(),
            volumes,
        }
    }
}

/// Block grid matching the model input, `[W, H, D]`.
pub fn model_grid(cfg: &VitConfig) -> BlockGridSpec {
    BlockGridSpec::tiling([cfg.img_hw.1, cfg.img_hw.0, cfg.depth])
}

/// Sigmoid probabilities for one block-sized input.
pub fn predict_block(params: &VitParams<f32>, cfg: &VitConfig, block: &Block) -> Result<Block, MetricsError> {
    let logits = params.forward(cfg, &block.data)?;
    Ok(Block {
        origin: block.origin,
        size: block.size,
        data: logits.data().iter().map(|&z| sigmoid(z)).collect(),
    })
}

/// Blockify, per-block forward and sigmoid, stitch. With a depth-1 model this
/// is slice-by-slice prediction stacked along z.
pub fn predict_volume(params: &VitParams<f32>, cfg: &VitConfig, image: &Volume3D) -> Result<Volume3D, MetricsError> {
    let blocks = blockify(image, &model_grid(cfg))?;
    let preds = map_indexed(blocks.len(), |i| predict_block(params, cfg, &blocks[i]));
    let preds = preds.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(stitch(&preds, image.dims())?)
}

/// Predicts `image`, thresholds at `threshold` and scores against `gt`.
pub fn evaluate(
    params: &VitParams<f32>,
    cfg: &VitConfig,
    image: &Volume3D,
    gt: &BinaryMask,
    threshold: f32,
) -> Result<EvalResult, MetricsError> {
    let prob = predict_volume(params, cfg, image)?;
    let pred = BinaryMask::from_volume(&prob, threshold);
    Ok(EvalResult::from_scores(vec![score(&pred, gt)?]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut bits = vec![false; dims.iter().product()];
        for &[x, y, z] in on {
            bits[(z * dims[1] + y) * dims[0] + x] = true;
        }
        BinaryMask::new(dims, bits).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask([4, 1, 1], &[[0, 0, 0], [1, 0, 0]]);
        let b = mask([4, 1, 1], &[[1, 0, 0]]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 2.0 / 3.0);
        assert_eq!(dice(&a, &mask([4, 1, 1], &[[3, 0, 0]])).unwrap(), 0.0);
        let e = mask([4, 1, 1], &[]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(matches!(
            dice(&a, &mask([2, 2, 1], &[])),
            Err(MetricsError::DimMismatch(..))
        ));
    }

    #[test]
    fn hd95_examples() {
        let a = mask([5, 2, 2], &[[0, 0, 0]]);
        let b = mask([5, 2, 2], &[[3, 0, 0]]);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        assert!(matches!(hd95(&a, &mask([5, 2, 2], &[])), Err(MetricsError::EmptyMask)));
    }

    #[test]
    fn surface_of_solid_cube_excludes_interior() {
        let all: Vec<[usize; 3]> = (0..27).map(|i| [i % 3, (i / 3) % 3, i / 9]).collect();
        let m = mask([3, 3, 3], &all);
        assert_eq!(m.surface().len(), 26);
        let m = BinaryMask::new([5, 5, 5], vec![true; 125]).unwrap();
        assert_eq!(m.surface().len(), 125 - 27);
    }

    #[test]
    fn nearest_rank_index() {
        assert_eq!(nearest_rank_95(1), 0);
        assert_eq!(nearest_rank_95(2), 1);
        assert_eq!(nearest_rank_95(20), 18);
        assert_eq!(nearest_rank_95(21), 19);
        assert_eq!(nearest_rank_95(100), 94);
        assert_eq!(nearest_rank_95(101), 95);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = Rng::new(3);
        for _ in 0..40 {
            let dims = [1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9)];
            let n_sites = rng.below(5);
            let sites: Vec<[usize; 3]> = (0..n_sites)
                .map(|_| [rng.below(dims[0]), rng.below(dims[1]), rng.below(dims[2])])
                .collect();
            let edt = squared_distance_transform(dims, &sites);
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let want = sites
                            .iter()
                            .map(|s| {
                                let d = |a: usize, b: usize| (a as i64 - b as i64).pow(2);
                                d(x, s[0]) + d(y, s[1]) + d(z, s[2])
                            })
                            .min()
                            .unwrap_or(FAR);
                        assert_eq!(edt[(z * dims[1] + y) * dims[0] + x], want);
                    }
                }
            }
        }
    }

    #[test]
    fn eval_result_means_skip_failures() {
        let r = EvalResult::from_scores(vec![
            VolumeScore {
                dice: 1.0,
                hd95: Some(2.0),
            },
            VolumeScore { dice: 0.0, hd95: None },
        ]);
        assert_eq!(r.dice, 0.5);
        assert_eq!(r.hd95, Some(2.0));
        assert_eq!(r.hd95_failures, 1);
        let json = serde_json::to_string(&VolumeScore {
            dice: 1.0,
            hd95: Some(0.0),
        })
        .unwrap();
        assert_eq!(json, r#"{"dice":1.0,"hd95":0.0}"#);
    }
}
