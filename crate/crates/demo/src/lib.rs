//! Browser bindings for three interactive views: a synthetic neuron scene,
//! patch-kernel inflation, and thresholded scoring of the scene image.

use neurovit::groundtruth::{synthesize, SynthParams, SynthSample};
use neurovit::metrics::{score, BinaryMask, VolumeScore};
use neurovit::numerics::{Rng, Tensor};
use neurovit::transfer::{inflate_patch_embed, TransferStrategy};
use neurovit::volume::normalize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// A rendered synthetic volume with its label.
#[wasm_bindgen]
pub struct Scene {
    sample: SynthSample,
    display: Vec<f32>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, n_trees: usize, width: usize, height: usize, depth: usize) -> Result<Scene, JsError> {
        let params = SynthParams {
            seed,
            n_trees,
            dims: [width, height, depth],
            ..SynthParams::default()
        };
        let sample = synthesize(&params, 0).map_err(js_err)?;
        let display = normalize(&sample.image, 1.0, 99.0).into_voxels();
        Ok(Scene { sample, display })
    }

    pub fn width(&self) -> usize {
        self.sample.image.width()
    }

    pub fn height(&self) -> usize {
        self.sample.image.height()
    }

    pub fn depth(&self) -> usize {
        self.sample.image.depth()
    }

    pub fn nodes(&self) -> usize {
        self.sample.morphology.len()
    }

    /// Image intensities of slice `z`, rescaled to [0, 1].
    pub fn image_slice(&self, z: usize) -> Vec<f32> {
        let n = self.width() * self.height();
        self.display[z * n..(z + 1) * n].to_vec()
    }

    pub fn label_slice(&self, z: usize) -> Vec<f32> {
        self.sample.label.slice_z(z).to_vec()
    }

    /// Thresholded display image of slice `z` as 0/1.
    pub fn mask_slice(&self, z: usize, threshold: f32) -> Vec<f32> {
        self.image_slice(z)
            .into_iter()
            .map(|v| (v >= threshold) as u8 as f32)
            .collect()
    }

    /// `{"dice":..,"hd95":..}` of the thresholded image against the label.
    pub fn score(&self, threshold: f32) -> Result<String, JsError> {
        serde_json::to_string(&self.threshold_score(threshold).map_err(js_err)?).map_err(js_err)
    }
}

impl Scene {
    pub fn threshold_score(&self, threshold: f32) -> Result<VolumeScore, neurovit::metrics::MetricsError> {
        let dims = self.sample.image.dims();
        let pred = BinaryMask::new(dims, self.display.iter().map(|&v| v >= threshold).collect())?;
        let gt = BinaryMask::from_volume(&self.sample.label, 0.5);
        score(&pred, &gt)
    }
}

/// Random `patch x patch` kernel followed by its inflation to `depth`
/// slices, flattened as `[1 + depth, patch, patch]`.
#[wasm_bindgen]
pub fn inflate_kernel(patch: usize, depth: usize, strategy: &str, seed: u64) -> Result<Vec<f32>, JsError> {
    let strategy: TransferStrategy = strategy.parse().map_err(js_err)?;
    let kernel = Tensor::<f32>::randn(&[1, 1, patch, patch], 1.0, &mut Rng::new(seed));
    let inflated = inflate_patch_embed(&kernel, depth, strategy).map_err(js_err)?;
    let mut out = kernel.data().to_vec();
    out.extend_from_slice(inflated.data());
    Ok(out)
}
