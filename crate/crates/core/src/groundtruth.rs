//! Label volumes from SWC morphologies, and synthetic neuron images.
//!
//! A voxel's label is driven by its scale-normalized distance
//! `s = dist / r(t)` to the nearest tapered capsule, where `r(t)` is the
//! radius interpolated at the closest point on the segment. Voxel centers sit
//! on integer coordinates.

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::swc::{CapsuleSegment, SwcMorphology, SwcNode};
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GroundTruthError {
    #[error("morphology has no nodes")]
    EmptyMorphology,
    #[error("invalid synthesis parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// 1 where `s <= 1`.
    #[default]
    Binary,
    /// `max(clamp(1 - s, 0, 1))` over all capsules.
    Soft,
}

/// Distance from `p` to the capsule axis and the radius interpolated at the
/// closest axis point.
pub fn distance_to_capsule(p: [f32; 3], seg: &CapsuleSegment) -> (f32, f32) {
    let d = sub(seg.p1, seg.p0);
    let len2 = dot(d, d);
    if len2 == 0.0 {
        let v = sub(p, seg.p0);
        return (dot(v, v).sqrt(), seg.r0.max(seg.r1));
    }
    let t = (dot(sub(p, seg.p0), d) / len2).clamp(0.0, 1.0);
    let closest = [seg.p0[0] + t * d[0], seg.p0[1] + t * d[1], seg.p0[2] + t * d[2]];
    let v = sub(p, closest);
    (dot(v, v).sqrt(), seg.r0 + t * (seg.r1 - seg.r0))
}

#[inline]
fn sub(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn dot(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Segments plus a degenerate capsule (sphere) for every root, so isolated
/// somata are rasterized too.
pub fn label_primitives(m: &SwcMorphology) -> Vec<CapsuleSegment> {
    let mut prims = m.segments();
    prims.extend(m.roots().map(|r| CapsuleSegment {
        p0: r.position(),
        p1: r.position(),
        r0: r.radius,
        r1: r.radius,
    }));
    prims
}

/// Per-primitive label contribution at scale-normalized distance `s`.
#[inline]
pub fn label_value(s: f32, mode: LabelMode) -> f32 {
    match mode {
        LabelMode::Binary => {
            if s <= 1.0 {
                1.0
            } else {
                0.0
            }
        }
        LabelMode::Soft => (1.0 - s).clamp(0.0, 1.0),
    }
}

/// Rasterizes `m` into a `dims` label volume.
///
/// Each primitive only visits voxels inside its radius-padded bounding box;
/// every voxel outside it has `s > 1` and contributes 0 in both modes.
pub fn rasterize_labels(m: &SwcMorphology, dims: [usize; 3], mode: LabelMode) -> Result<Volume3D, GroundTruthError> {
    if m.is_empty() {
        return Err(GroundTruthError::EmptyMorphology);
    }
    let mut out = Volume3D::zeros(dims);
    for prim in label_primitives(m) {
        let r = prim.r0.max(prim.r1);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let min = prim.p0[a].min(prim.p1[a]) - r - 1.0;
            let max = prim.p0[a].max(prim.p1[a]) + r + 1.0;
            if max < 0.0 || min > (dims[a] - 1) as f32 {
                empty = true;
                break;
            }
            lo[a] = min.floor().max(0.0) as usize;
            hi[a] = (max.ceil() as usize).min(dims[a] - 1);
        }
        if empty {
            continue;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let (dist, r_at) = distance_to_capsule([x as f32, y as f32, z as f32], &prim);
                    let v = label_value(dist / r_at, mode);
                    let i = out.index(x, y, z);
                    let cur = &mut out.voxels_mut()[i];
                    if v > *cur {
                        *cur = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Knobs of the synthetic neuron generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub seed: u64,
    /// `[W, H, D]`.
    pub dims: [usize; 3],
    pub n_trees: usize,
    pub steps: usize,
    pub step_len: f32,
    pub branch_prob: f32,
    /// `(min, max)`; radii taper from max at the root to min at the last step.
    pub radius_range: (f32, f32),
    pub noise_sigma: f32,
    pub psf_sigma: f32,
    pub foreground_intensity: f32,
    pub background_intensity: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [64, 64, 15],
            n_trees: 3,
            steps: 60,
            step_len: 2.0,
            branch_prob: 0.08,
            radius_range: (0.8, 2.0),
            noise_sigma: 0.1,
            psf_sigma: 0.8,
            foreground_intensity: 0.8,
            background_intensity: 0.1,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), GroundTruthError> {
        let bad = |m: &str| Err(GroundTruthError::BadParams(m.into()));
        if self.dims.contains(&0) {
            return bad("dims must be positive");
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return bad("radius_range must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return bad("branch_prob must lie in [0, 1]");
        }
        if !self.step_len.is_finite() || self.step_len <= 0.0 || self.noise_sigma < 0.0 || self.psf_sigma < 0.0 {
            return bad("step_len must be positive and sigmas non-negative");
        }
        Ok(())
    }
}

/// Seeded random-walk neuron with occasional forks.
///
/// Growth proceeds round-robin over the active tips; every step appends one
/// node, so the tree always has `steps + 1` nodes. Headings are flattened in
/// z because blocks are thin along that axis.
pub fn generate_random_tree(params: &SynthParams, tree_index: u64) -> SwcMorphology {
    let mut rng = Rng::derive(params.seed, tree_index);
    let dims = params.dims;
    let (r_min, r_max) = params.radius_range;
    let upper = |a: usize| (dims[a] - 1) as f32;
    let start: [f32; 3] = std::array::from_fn(|a| {
        let margin = 0.15 * upper(a);
        rng.uniform_range(margin as f64, (upper(a) - margin) as f64) as f32
    });
    let mut nodes = vec![SwcNode {
        id: 1,
        type_code: 3,
        x: start[0],
        y: start[1],
        z: start[2],
        radius: r_max,
        parent_id: -1,
    }];
    let mut tips: Vec<(usize, [f32; 3])> = vec![(0, random_heading(&mut rng, 1.0))];
    for step in 0..params.steps {
        let slot = step % tips.len();
        let (parent, heading) = tips[slot];
        let mut h = perturb(heading, &mut rng, 0.35);
        let p = nodes[parent].position();
        let mut pos = [0.0f32; 3];
        for a in 0..3 {
            pos[a] = p[a] + params.step_len * h[a];
            if pos[a] < 0.0 || pos[a] > upper(a) {
                h[a] = -h[a];
                pos[a] = pos[a].clamp(0.0, upper(a));
            }
        }
        let frac = (step + 1) as f32 / params.steps as f32;
        let radius = r_max - (r_max - r_min) * frac;
        nodes.push(SwcNode {
            id: nodes.len() as u64 + 1,
            type_code: 3,
            x: pos[0],
            y: pos[1],
            z: pos[2],
            radius,
            parent_id: (parent + 1) as i64,
        });
        let child = nodes.len() - 1;
        tips[slot] = (child, h);
        if (rng.uniform() as f32) < params.branch_prob {
            tips.push((child, perturb(h, &mut rng, 1.5)));
        }
    }
    SwcMorphology::new(nodes).expect("generator emits a valid tree")
}

fn random_heading(rng: &mut Rng, scale: f64) -> [f32; 3] {
    normalize3([
        (rng.normal() * scale) as f32,
        (rng.normal() * scale) as f32,
        (rng.normal() * scale * 0.3) as f32,
    ])
}

fn perturb(h: [f32; 3], rng: &mut Rng, amount: f64) -> [f32; 3] {
    let d = random_heading(rng, amount);
    let a = amount as f32;
    normalize3([h[0] + a * d[0], h[1] + a * d[1], h[2] + a * d[2] * 0.5])
}

fn normalize3(v: [f32; 3]) -> [f32; 3] {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Normalized Gaussian taps for offsets `-radius..=radius`, `radius = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| (v / sum) as f32).collect()
}

/// Mirror index with edge repeat: `-1 -> 0`, `n -> n - 1`.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(v: &Volume3D, sigma: f32) -> Volume3D {
    if sigma <= 0.0 {
        return v.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let dims = v.dims();
    let mut cur = v.clone();
    for axis in 0..3 {
        let mut next = cur.clone();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let c = [x, y, z];
                    let mut acc = 0.0f32;
                    for (ti, &w) in k.iter().enumerate() {
                        let mut q = c;
                        q[axis] = reflect(c[axis] as i64 + ti as i64 - r, dims[axis]);
                        acc += w * cur.get(q[0], q[1], q[2]);
                    }
                    next.set(x, y, z, acc);
                }
            }
        }
        cur = next;
    }
    cur
}

/// Binary mask → intensities → PSF blur → additive Gaussian noise → `[0, 1]`.
pub fn render_image(m: &SwcMorphology, params: &SynthParams) -> Volume3D {
    let mut img = if m.is_empty() {
        Volume3D::zeros(params.dims)
    } else {
        rasterize_labels(m, params.dims, LabelMode::Binary).expect("non-empty")
    };
    let (bg, fg) = (params.background_intensity, params.foreground_intensity);
    img.voxels_mut().iter_mut().for_each(|v| *v = bg + *v * (fg - bg));
    let mut img = gaussian_blur(&img, params.psf_sigma);
    if params.noise_sigma > 0.0 {
        let mut rng = Rng::derive(params.seed, NOISE_STREAM);
        for v in img.voxels_mut() {
            *v += (rng.normal() * params.noise_sigma as f64) as f32;
        }
    }
    img.voxels_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

const NOISE_STREAM: u64 = u64::MAX;

/// One synthetic training/evaluation volume.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub morphology: SwcMorphology,
    pub image: Volume3D,
    pub label: Volume3D,
}

/// Volume `index` of the dataset described by `params`: `n_trees` trees
/// merged into one forest, rendered with volume-specific noise.
pub fn synthesize(params: &SynthParams, index: u64) -> Result<SynthSample, GroundTruthError> {
    params.validate()?;
    let trees: Vec<SwcMorphology> = (0..params.n_trees as u64)
        .map(|t| generate_random_tree(params, index * params.n_trees as u64 + t))
        .collect();
    let morphology = SwcMorphology::merge(&trees);
    let label = if morphology.is_empty() {
        Volume3D::zeros(params.dims)
    } else {
        rasterize_labels(&morphology, params.dims, LabelMode::Binary)?
    };
    let volume_params = SynthParams {
        seed: Rng::derive_seed(params.seed, index),
        ..params.clone()
    };
    let image = render_image(&morphology, &volume_params);
    Ok(SynthSample {
        morphology,
        image,
        label,
    })
}
