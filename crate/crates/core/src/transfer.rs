//! Initializing a 3D segmenter from a 2D archive.
//!
//! Only the patch embedding changes shape between the two models. Its 2D
//! kernel is inflated along depth, either spread evenly (`Average`) or placed
//! on the middle slice (`Center`). Every other encoder tensor is copied, and
//! the decoder starts fresh.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::numerics::{Rng, Tensor};
use crate::vit::{interpolate_pos_embed, ModelKind, VitConfig, VitParams};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransferError {
    #[error("block depth must be at least 1, got {0}")]
    BadDepth(usize),
    #[error("channel reduction needs 3 input channels, kernel has shape {0:?}")]
    BadChannels(Vec<usize>),
    #[error("source archive lacks tensor {0:?}")]
    MissingTensor(String),
    #[error("source does not fit the target model: {0}")]
    DimMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferStrategy {
    Average,
    #[default]
    Center,
}

impl TransferStrategy {
    pub const ALL: [TransferStrategy; 2] = [TransferStrategy::Average, TransferStrategy::Center];

    pub fn as_str(self) -> &'static str {
        match self {
            TransferStrategy::Average => "average",
            TransferStrategy::Center => "center",
        }
    }
}

impl fmt::Display for TransferStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransferStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(Self::Average),
            "center" => Ok(Self::Center),
            other => Err(format!("unknown strategy {other:?} (expected average or center)")),
        }
    }
}

/// `[e, C, p, p]` to `[e, C, D, p, p]`.
///
/// `Average` writes `w2 / D` to every depth slice; `Center` writes `w2` to
/// slice `D / 2` and zeros elsewhere.
pub fn inflate_patch_embed(
    w2: &Tensor<f32>,
    depth: usize,
    strategy: TransferStrategy,
) -> Result<Tensor<f32>, TransferError> {
    if depth < 1 {
        return Err(TransferError::BadDepth(depth));
    }
    let &[e, c, ph, pw] = w2.shape() else {
        return Err(TransferError::DimMismatch(format!(
            "2D kernel must be rank 4, got {:?}",
            w2.shape()
        )));
    };
    let plane = ph * pw;
    let center = depth / 2;
    let scale = depth as f32;
    let mut out = Vec::with_capacity(w2.len() * depth);
    for src in w2.data().chunks(plane) {
        for d in 0..depth {
            match strategy {
                TransferStrategy::Average => out.extend(src.iter().map(|&v| v / scale)),
                TransferStrategy::Center if d == center => out.extend_from_slice(src),
                TransferStrategy::Center => out.extend(std::iter::repeat_n(0.0f32, plane)),
            }
        }
    }
    Ok(Tensor::new(vec![e, c, depth, ph, pw], out).expect("shape from input"))
}

/// Sums the three colour channels of an `[e, 3, p, p]` kernel into one.
pub fn reduce_input_channels(w: &Tensor<f32>) -> Result<Tensor<f32>, TransferError> {
    let &[e, 3, ph, pw] = w.shape() else {
        return Err(TransferError::BadChannels(w.shape().to_vec()));
    };
    let plane = ph * pw;
    let mut out = Vec::with_capacity(e * plane);
    for k in w.data().chunks(3 * plane) {
        out.extend((0..plane).map(|i| k[i] + k[plane + i] + k[2 * plane + i]));
    }
    Ok(Tensor::new(vec![e, 1, ph, pw], out).expect("shape from input"))
}

/// Where each tensor of a transferred model came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Copied,
    Inflated,
    Interpolated,
    Reinitialized,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Copied => "copied",
            Provenance::Inflated => "inflated",
            Provenance::Interpolated => "interpolated",
            Provenance::Reinitialized => "re-initialized",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub params: VitParams<f32>,
    /// `(canonical name, provenance)` in canonical order.
    pub provenance: Vec<(String, Provenance)>,
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// Builds a model for `cfg` from a 2D archive. See [`transfer_weights_with_provenance`].
pub fn transfer_weights(
    src: &WeightArchive,
    cfg: &VitConfig,
    strategy: TransferStrategy,
    rng: &mut Rng,
) -> Result<VitParams<f32>, TransferError> {
    Ok(transfer_weights_with_provenance(src, cfg, strategy, rng)?.params)
}

/// Builds a model for `cfg` from a 2D archive.
///
/// The embedding kernel is inflated for 3D targets (after channel reduction
/// when the source is RGB and the target single-channel) and copied for 2D
/// targets. Positional embeddings are interpolated when the token grids
/// differ. The decoder is drawn from `rng`.
pub fn transfer_weights_with_provenance(
    src: &WeightArchive,
    cfg: &VitConfig,
    strategy: TransferStrategy,
    rng: &mut Rng,
) -> Result<TransferOutcome, TransferError> {
    cfg.validate().map_err(|e| TransferError::DimMismatch(e.to_string()))?;
    let get = |name: &str| {
        src.get(name)
            .ok_or_else(|| TransferError::MissingTensor(name.to_string()))
    };
    let extra_block = format!("blocks.{}.ln1.g", cfg.layers);
    if src.contains(&extra_block) {
        return Err(TransferError::DimMismatch(format!(
            "source has more than {} encoder blocks",
            cfg.layers
        )));
    }
    let shapes = cfg.param_shapes();
    for (name, _) in &shapes {
        if !name.starts_with("decoder.") {
            get(name)?;
        }
    }

    let mut tensors = Vec::with_capacity(shapes.len());
    let mut provenance = Vec::with_capacity(shapes.len());
    for (name, want) in shapes {
        let (t, how) = match name.as_str() {
            "patch_embed.w" => {
                let w2 = get(&name)?;
                let &[e, c, ph, pw] = w2.shape() else {
                    return Err(TransferError::DimMismatch(format!(
                        "patch_embed.w must be a 2D kernel, got {:?}",
                        w2.shape()
                    )));
                };
                if e != cfg.embed_dim || ph != cfg.patch || pw != cfg.patch {
                    return Err(TransferError::DimMismatch(format!(
                        "patch_embed.w {:?} vs embed_dim {} patch {}",
                        w2.shape(),
                        cfg.embed_dim,
                        cfg.patch
                    )));
                }
                let w2 = if c == 3 && cfg.in_channels == 1 {
                    reduce_input_channels(w2)?
                } else if c == cfg.in_channels {
                    w2.clone()
                } else {
                    return Err(TransferError::DimMismatch(format!(
                        "{c} source channels for {} target channels",
                        cfg.in_channels
                    )));
                };
                match cfg.kind {
                    ModelKind::TwoD => (w2, Provenance::Copied),
                    ModelKind::ThreeD => (inflate_patch_embed(&w2, cfg.depth, strategy)?, Provenance::Inflated),
                }
            }
            "pos" => {
                let pos = get(&name)?;
                if pos.shape() == want.as_slice() {
                    (pos.clone(), Provenance::Copied)
                } else {
                    let rows = pos.shape().first().copied().unwrap_or(0);
                    let old = square_side(rows.saturating_sub(1)).ok_or_else(|| {
                        TransferError::DimMismatch(format!("source pos {:?} is not a square grid", pos.shape()))
                    })?;
                    let interp = interpolate_pos_embed(pos, (old, old), cfg.grid())
                        .map_err(|e| TransferError::DimMismatch(e.to_string()))?;
                    (interp, Provenance::Interpolated)
                }
            }
            "decoder.w" => (Tensor::trunc_normal(&want, 0.02, rng), Provenance::Reinitialized),
            "decoder.b" => (Tensor::zeros(&want), Provenance::Reinitialized),
            _ => (get(&name)?.clone(), Provenance::Copied),
        };
        if t.shape() != want.as_slice() {
            return Err(TransferError::DimMismatch(format!(
                "{name}: source {:?}, target {want:?}",
                t.shape()
            )));
        }
        tensors.push(t);
        provenance.push((name, how));
    }
    let params = VitParams::from_tensors(cfg, tensors).map_err(|e| TransferError::DimMismatch(e.to_string()))?;
    Ok(TransferOutcome { params, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::params_to_archive;
    use crate::vit::{patch_embed_2d, patch_embed_3d};

    fn rand_kernel(shape: &[usize], seed: u64) -> Tensor<f32> {
        Tensor::randn(shape, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn depth_one_is_identity() {
        let w2 = rand_kernel(&[4, 2, 3, 3], 1);
        for s in TransferStrategy::ALL {
            let w3 = inflate_patch_embed(&w2, 1, s).unwrap();
            assert_eq!(w3.shape(), &[4, 2, 1, 3, 3]);
            assert!(w3.clone().reshape(&[4, 2, 3, 3]).unwrap().bits_eq(&w2));
        }
    }

    #[test]
    fn average_of_ones_is_one_fifth() {
        let w3 = inflate_patch_embed(&Tensor::ones(&[2, 1, 2, 2]), 5, TransferStrategy::Average).unwrap();
        assert!(w3.data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn center_slice_scan() {
        let (e, c, p) = (3, 2, 4);
        let w2 = rand_kernel(&[e, c, p, p], 2);
        let w3 = inflate_patch_embed(&w2, 5, TransferStrategy::Center).unwrap();
        for j in 0..e {
            for ci in 0..c {
                for d in 0..5 {
                    for i in 0..p * p {
                        let v = w3.data()[((j * c + ci) * 5 + d) * p * p + i];
                        let src = w2.data()[(j * c + ci) * p * p + i];
                        if d == 2 {
                            assert_eq!(v.to_bits(), src.to_bits());
                        } else {
                            assert_eq!(v.to_bits(), 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn even_depth_center_is_floor_half() {
        let w3 = inflate_patch_embed(&Tensor::ones(&[1, 1, 1, 1]), 4, TransferStrategy::Center).unwrap();
        assert_eq!(w3.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn inflation_errors() {
        let w2 = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert_eq!(
            inflate_patch_embed(&w2, 0, TransferStrategy::Average),
            Err(TransferError::BadDepth(0))
        );
        assert!(matches!(
            inflate_patch_embed(&Tensor::zeros(&[2, 2]), 3, TransferStrategy::Center),
            Err(TransferError::DimMismatch(_))
        ));
    }

    #[test]
    fn channel_reduction() {
        let k = Tensor::<f32>::full(&[2, 3, 2, 2], 1.5);
        let r = reduce_input_channels(&k).unwrap();
        assert_eq!(r.shape(), &[2, 1, 2, 2]);
        assert!(r.data().iter().all(|&v| v == 4.5));
        assert!(reduce_input_channels(&Tensor::zeros(&[2, 3, 2, 2]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            reduce_input_channels(&Tensor::zeros(&[2, 1, 2, 2])),
            Err(TransferError::BadChannels(vec![2, 1, 2, 2]))
        );
    }

    // Dyadic weights and pixels keep every product and partial sum exact, so
    // the two summation orders agree bitwise.
    #[test]
    fn channel_reduction_preserves_gray_response() {
        let mut rng = Rng::new(3);
        let dyadic = |rng: &mut Rng| (rng.below(64) as f32 - 32.0) / 16.0;
        let w = Tensor::new(vec![4, 3, 2, 2], (0..48).map(|_| dyadic(&mut rng)).collect()).unwrap();
        let b = Tensor::new(vec![4], (0..4).map(|_| dyadic(&mut rng)).collect()).unwrap();
        let gray: Vec<f32> = (0..16).map(|_| dyadic(&mut rng)).collect();
        let rgb = Tensor::new(vec![3, 4, 4], [gray.clone(), gray.clone(), gray.clone()].concat()).unwrap();
        let gray = Tensor::new(vec![1, 4, 4], gray).unwrap();
        let full = patch_embed_2d(&rgb, &w, &b).unwrap();
        let reduced = patch_embed_2d(&gray, &reduce_input_channels(&w).unwrap(), &b).unwrap();
        assert!(full.bits_eq(&reduced));

        let w = rand_kernel(&[4, 3, 2, 2], 4);
        let gray_r = rand_kernel(&[1, 4, 4], 5);
        let rgb_r = Tensor::new(vec![3, 4, 4], gray_r.data().repeat(3)).unwrap();
        let full = patch_embed_2d(&rgb_r, &w, &b).unwrap();
        let reduced = patch_embed_2d(&gray_r, &reduce_input_channels(&w).unwrap(), &b).unwrap();
        for (a, r) in full.data().iter().zip(reduced.data()) {
            assert!((a - r).abs() < 1e-5);
        }
    }

    #[test]
    fn center_and_average_embeddings_match_2d() {
        let mut rng = Rng::new(6);
        let w2 = rand_kernel(&[6, 1, 2, 2], 7);
        let b = rand_kernel(&[6], 8);
        let slice = Tensor::<f32>::randn(&[1, 4, 4], 1.0, &mut rng);
        let emb2 = patch_embed_2d(&slice, &w2, &b).unwrap();

        let mut centered = vec![0.0f32; 5 * 16];
        centered[2 * 16..3 * 16].copy_from_slice(slice.data());
        let wc = inflate_patch_embed(&w2, 5, TransferStrategy::Center).unwrap();
        let emb_c = patch_embed_3d(&Tensor::new(vec![1, 5, 4, 4], centered).unwrap(), &wc, &b).unwrap();

        let wa = inflate_patch_embed(&w2, 5, TransferStrategy::Average).unwrap();
        let constant = Tensor::new(vec![1, 5, 4, 4], slice.data().repeat(5)).unwrap();
        let emb_a = patch_embed_3d(&constant, &wa, &b).unwrap();
        for ((x, c), a) in emb2.data().iter().zip(emb_c.data()).zip(emb_a.data()) {
            assert!((x - c).abs() <= 1e-5);
            assert!((x - a).abs() <= 1e-5);
        }
    }

    fn tiny(kind: ModelKind, depth: usize, hw: usize) -> VitConfig {
        VitConfig {
            kind,
            img_hw: (hw, hw),
            patch: 2,
            depth,
            in_channels: 1,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn source(seed: u64) -> WeightArchive {
        let p = VitParams::<f32>::init(&tiny(ModelKind::TwoD, 1, 4), &mut Rng::new(seed)).unwrap();
        params_to_archive(&p)
    }

    #[test]
    fn copy_path_and_provenance() {
        let src = source(9);
        let cfg = tiny(ModelKind::ThreeD, 3, 4);
        let out = transfer_weights_with_provenance(&src, &cfg, TransferStrategy::Average, &mut Rng::new(1)).unwrap();
        for ((name, how), t) in out.provenance.iter().zip(out.params.tensors()) {
            match name.as_str() {
                "patch_embed.w" => assert_eq!(*how, Provenance::Inflated),
                "decoder.w" | "decoder.b" => assert_eq!(*how, Provenance::Reinitialized),
                _ => {
                    assert_eq!(*how, Provenance::Copied);
                    assert!(t.bits_eq(src.get(name).unwrap()), "{name}");
                }
            }
        }
        assert!(out.params.decoder_b.data().iter().all(|&v| v == 0.0));
        assert!(out.params.decoder_w.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn strategy_changes_only_embedding_kernel() {
        let src = source(10);
        let cfg = tiny(ModelKind::ThreeD, 3, 4);
        let a = transfer_weights(&src, &cfg, TransferStrategy::Average, &mut Rng::new(2)).unwrap();
        let a2 = transfer_weights(&src, &cfg, TransferStrategy::Average, &mut Rng::new(2)).unwrap();
        let c = transfer_weights(&src, &cfg, TransferStrategy::Center, &mut Rng::new(2)).unwrap();
        assert_eq!(a, a2);
        for ((name, ta), tc) in a.names().iter().zip(a.tensors()).zip(c.tensors()) {
            assert_eq!(ta == tc, name != "patch_embed.w", "{name}");
        }
    }

    #[test]
    fn grid_change_interpolates_positions() {
        let src = source(11);
        let cfg = tiny(ModelKind::ThreeD, 3, 8);
        let out = transfer_weights_with_provenance(&src, &cfg, TransferStrategy::Center, &mut Rng::new(3)).unwrap();
        assert_eq!(out.params.pos.shape(), &[17, 8]);
        assert!(out.provenance.contains(&("pos".to_string(), Provenance::Interpolated)));
    }

    #[test]
    fn transfer_errors() {
        let cfg = tiny(ModelKind::ThreeD, 3, 4);
        let mut missing = WeightArchive::new();
        for (n, t) in source(12).iter() {
            if n != "blocks.1.mlp.w2" {
                missing.insert(n, t.clone()).unwrap();
            }
        }
        assert_eq!(
            transfer_weights(&missing, &cfg, TransferStrategy::Center, &mut Rng::new(0)),
            Err(TransferError::MissingTensor("blocks.1.mlp.w2".into()))
        );
        let wide = VitConfig { embed_dim: 16, ..cfg };
        assert!(matches!(
            transfer_weights(&source(12), &wide, TransferStrategy::Center, &mut Rng::new(0)),
            Err(TransferError::DimMismatch(_))
        ));
        let shallow = VitConfig { layers: 1, ..cfg };
        assert!(matches!(
            transfer_weights(&source(12), &shallow, TransferStrategy::Center, &mut Rng::new(0)),
            Err(TransferError::DimMismatch(_))
        ));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("average".parse::<TransferStrategy>(), Ok(TransferStrategy::Average));
        assert_eq!("center".parse::<TransferStrategy>(), Ok(TransferStrategy::Center));
        assert!("median".parse::<TransferStrategy>().is_err());
        assert_eq!(TransferStrategy::Center.to_string(), "center");
    }
}
