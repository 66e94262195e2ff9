//! Experiment configuration and the five-row benchmark comparing 2D and 3D
//! segmenters trained from scratch or from a pre-trained 2D archive.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::groundtruth::{synthesize, GroundTruthError, SynthParams, SynthSample};
use crate::metrics::{predict_volume, score, BinaryMask, EvalResult, MetricsError, VolumeScore};
use crate::numerics::Rng;
use crate::parallel::map_indexed;
use crate::train::{block_samples, fit, pretrain_2d, EpochStats, Sample, TrainConfig, TrainError, TrainReport};
use crate::transfer::{transfer_weights, TransferError, TransferStrategy};
use crate::vit::{ModelKind, VitConfig, VitParams};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] GroundTruthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Supervised stand-in for large-scale 2D pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Synthetic volumes sliced along z for the 2D corpus.
    pub volumes: usize,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            volumes: 24,
            train: TrainConfig {
                lr: 1e-3,
                epochs: 6,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub train_volumes: usize,
    pub test_volumes: usize,
    pub threshold: f32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            train_volumes: 3,
            test_volumes: 4,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub out_dir: Option<String>,
}

/// Everything a run needs; every field has a default so any TOML subset parses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthParams,
    /// The 3D model; the 2D model shares its encoder dimensions.
    pub model: VitConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub strategy: TransferStrategy,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthParams::default(),
            model: VitConfig {
                kind: ModelKind::ThreeD,
                img_hw: (16, 16),
                patch: 4,
                depth: 5,
                in_channels: 1,
                embed_dim: 32,
                layers: 2,
                heads: 4,
                mlp_ratio: 2,
            },
            train: TrainConfig {
                lr: 1e-3,
                epochs: 12,
                batch_size: 8,
                ..TrainConfig::default()
            },
            pretrain: PretrainConfig::default(),
            strategy: TransferStrategy::Center,
            bench: BenchConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document layered over [`ExperimentConfig::default`]:
    /// keys absent from a table keep the experiment default, not the
    /// component type's own default.
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let err = |e: String| ExperimentError::Config(e);
        let user: toml::Table = toml::from_str(s).map_err(|e| err(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| err(e.to_string()))?;
        merge_tables(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn model_2d(&self) -> VitConfig {
        self.model.to_2d()
    }

    pub fn model_3d(&self) -> VitConfig {
        self.model.to_3d(self.model.depth)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg_err = |e: String| ExperimentError::Config(e);
        self.synth.validate()?;
        self.model_3d().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.model_2d().validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.model.in_channels != 1 {
            return Err(cfg_err(
                "synthetic volumes are single-channel; model.in_channels must be 1".into(),
            ));
        }
        self.train.validate()?;
        self.pretrain.train.validate()?;
        if self.bench.train_volumes == 0 || self.bench.test_volumes == 0 {
            return Err(cfg_err("bench needs at least one train and one test volume".into()));
        }
        if self.pretrain.volumes == 0 {
            return Err(cfg_err("pretraining needs at least one volume".into()));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Synthetic corpus for one benchmark seed. Pre-training, training and test
/// volumes are disjoint indices of the same generator.
pub struct SeedData {
    pub pretrain: Vec<SynthSample>,
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData, ExperimentError> {
    let params = SynthParams {
        seed: Rng::derive_seed(cfg.synth.seed, seed),
        ..cfg.synth.clone()
    };
    let (np, nt, ne) = (cfg.pretrain.volumes, cfg.bench.train_volumes, cfg.bench.test_volumes);
    let all = map_indexed(np + nt + ne, |i| synthesize(&params, i as u64));
    let mut all = all.into_iter().collect::<Result<Vec<_>, _>>()?;
    let test = all.split_off(np + nt);
    let train = all.split_off(np);
    Ok(SeedData {
        pretrain: all,
        train,
        test,
    })
}

pub fn samples_for(volumes: &[SynthSample], model: &VitConfig, tau: f32) -> Result<Vec<Sample>, TrainError> {
    let mut out = Vec::new();
    for v in volumes {
        out.extend(block_samples(&v.image, &v.label, model, tau)?);
    }
    Ok(out)
}

/// Scores every test volume, thresholding probabilities and labels alike.
pub fn evaluate_volumes(
    params: &VitParams<f32>,
    model: &VitConfig,
    volumes: &[SynthSample],
    threshold: f32,
) -> Result<EvalResult, ExperimentError> {
    let mut scores = Vec::with_capacity(volumes.len());
    for v in volumes {
        let prob = predict_volume(params, model, &v.image)?;
        let pred = BinaryMask::from_volume(&prob, threshold);
        let gt = BinaryMask::from_volume(&v.label, 0.5);
        scores.push(score(&pred, &gt)?);
    }
    Ok(EvalResult::from_scores(scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchVariant {
    Scratch2d,
    Pretrained2d,
    Scratch3d,
    Average3d,
    Center3d,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 5] = [
        BenchVariant::Scratch2d,
        BenchVariant::Pretrained2d,
        BenchVariant::Scratch3d,
        BenchVariant::Average3d,
        BenchVariant::Center3d,
    ];

    fn is_3d(self) -> bool {
        matches!(self, Self::Scratch3d | Self::Average3d | Self::Center3d)
    }

    fn strategy(self) -> Option<TransferStrategy> {
        match self {
            Self::Average3d => Some(TransferStrategy::Average),
            Self::Center3d => Some(TransferStrategy::Center),
            _ => None,
        }
    }

    fn pretrained(self) -> bool {
        !matches!(self, Self::Scratch2d | Self::Scratch3d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub dice: f32,
    pub hd95: Option<f32>,
    pub hd95_failures: usize,
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: BenchVariant,
    pub model: String,
    pub pretrained_weights: String,
    pub transferring_strategy: String,
    pub input_depth: usize,
    pub mean_dice: f32,
    /// Mean over (seed, volume) pairs with a defined Hd95.
    pub mean_hd95: Option<f32>,
    pub hd95_failures: usize,
    pub seeds: Vec<SeedScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, v: BenchVariant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Model | Pre-trained Weights | Transferring Strategy | Input Depth | Mean Dice | Mean Hd95 |\n\
             |---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let hd = match r.mean_hd95 {
                Some(v) if r.hd95_failures == 0 => format!("{v:.3}"),
                Some(v) => format!("{v:.3} ({} empty)", r.hd95_failures),
                None => "n/a".into(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.4} | {} |",
                r.model, r.pretrained_weights, r.transferring_strategy, r.input_depth, r.mean_dice, hd
            );
        }
        s
    }
}

/// Pretrained 2D archive for one seed.
pub fn pretrain_for_seed(cfg: &ExperimentConfig, data: &SeedData, seed: u64) -> Result<WeightArchive, ExperimentError> {
    let model = cfg.model_2d();
    let slices = samples_for(&data.pretrain, &model, cfg.pretrain.train.tau)?;
    let tcfg = TrainConfig {
        seed: Rng::derive_seed(seed, 0x5052),
        ..cfg.pretrain.train
    };
    Ok(pretrain_2d(&slices, &model, &tcfg)?.0)
}

/// Starting parameters for `model`: fresh when `source` is `None`, otherwise
/// transferred from the 2D archive with `strategy`.
pub fn initial_params(
    model: &VitConfig,
    source: Option<&WeightArchive>,
    strategy: TransferStrategy,
    seed: u64,
) -> Result<VitParams<f32>, ExperimentError> {
    let mut rng = Rng::derive(seed, INIT_STREAM);
    Ok(match source {
        Some(archive) => transfer_weights(archive, model, strategy, &mut rng)?,
        None => VitParams::init(model, &mut rng).map_err(TrainError::from)?,
    })
}

const INIT_STREAM: u64 = 0x494E_4954;

/// Fits `init` on the blocks of `volumes` under the experiment's training config.
pub fn train_model(
    cfg: &ExperimentConfig,
    model: &VitConfig,
    init: VitParams<f32>,
    volumes: &[SynthSample],
    seed: u64,
    on_epoch: impl FnMut(&EpochStats, &VitParams<f32>),
) -> Result<(VitParams<f32>, TrainReport), ExperimentError> {
    let samples = samples_for(volumes, model, cfg.train.tau)?;
    let tcfg = TrainConfig { seed, ..cfg.train };
    Ok(fit(model, init, &samples, &tcfg, on_epoch)?)
}

/// Initializes, trains and evaluates one table row for one seed.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &SeedData,
    archive: &WeightArchive,
    variant: BenchVariant,
    seed: u64,
) -> Result<EvalResult, ExperimentError> {
    let model = if variant.is_3d() {
        cfg.model_3d()
    } else {
        cfg.model_2d()
    };
    let source = variant.pretrained().then_some(archive);
    let strategy = variant.strategy().unwrap_or(cfg.strategy);
    let init = initial_params(&model, source, strategy, seed)?;
    let (params, _) = train_model(cfg, &model, init, &data.train, seed, |_, _| {})?;
    evaluate_volumes(&params, &model, &data.test, cfg.bench.threshold)
}

/// Runs every row for every seed. The output depends only on `cfg` and
/// `seeds`; no timings are recorded.
pub fn run_bench(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    progress: impl Fn(&str) + Sync,
) -> Result<BenchReport, ExperimentError> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(ExperimentError::Config("bench needs at least one seed".into()));
    }
    let per_seed = map_indexed(seeds.len(), |si| -> Result<Vec<EvalResult>, ExperimentError> {
        let seed = seeds[si];
        let data = seed_data(cfg, seed)?;
        progress(&format!("seed {seed}: pre-training 2D model"));
        let archive = pretrain_for_seed(cfg, &data, seed)?;
        let rows = map_indexed(BenchVariant::ALL.len(), |vi| {
            run_variant(cfg, &data, &archive, BenchVariant::ALL[vi], seed)
        });
        progress(&format!("seed {seed}: done"));
        rows.into_iter().collect()
    });
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>, _>>()?;

    let model3 = cfg.model_3d();
    let rows = BenchVariant::ALL
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let results: Vec<&EvalResult> = per_seed.iter().map(|r| &r[vi]).collect();
            let all: Vec<VolumeScore> = results.iter().flat_map(|r| r.volumes.iter().copied()).collect();
            let pooled = EvalResult::from_scores(all);
            BenchRow {
                variant,
                model: if variant.is_3d() { "3D ViT" } else { "2D ViT" }.into(),
                pretrained_weights: if variant.pretrained() { "2D synthetic" } else { "None" }.into(),
                transferring_strategy: variant.strategy().map_or("-".into(), |s| s.to_string()),
                input_depth: if variant.is_3d() { model3.depth } else { 1 },
                mean_dice: pooled.dice,
                mean_hd95: pooled.hd95,
                hd95_failures: pooled.hd95_failures,
                seeds: seeds
                    .iter()
                    .zip(&results)
                    .map(|(&seed, r)| SeedScore {
                        seed,
                        dice: r.dice,
                        hd95: r.hd95,
                        hd95_failures: r.hd95_failures,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(BenchReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_default() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn toml_round_trip_and_partial_override() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let cfg = ExperimentConfig::from_toml_str("strategy = \"average\"\n[train]\nepochs = 7\n").unwrap();
        assert_eq!(cfg.strategy, TransferStrategy::Average);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, ExperimentConfig::default().train.batch_size);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            "[model]\npatch = 5\n",
            "[train]\nlr = -1.0\n",
            "[bench]\ntest_volumes = 0\n",
            "unknown_key = 1\n",
            "strategy = \"median\"\n",
        ] {
            assert!(
                matches!(
                    ExperimentConfig::from_toml_str(bad),
                    Err(ExperimentError::Config(_)) | Err(ExperimentError::Train(_))
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn markdown_has_table_columns() {
        let r = BenchReport {
            seeds: vec![0],
            rows: vec![BenchRow {
                variant: BenchVariant::Center3d,
                model: "3D ViT".into(),
                pretrained_weights: "2D synthetic".into(),
                transferring_strategy: "center".into(),
                input_depth: 5,
                mean_dice: 0.5,
                mean_hd95: Some(2.5),
                hd95_failures: 0,
                seeds: vec![],
            }],
        };
        let md = r.to_markdown();
        assert!(md.starts_with(
            "| Model | Pre-trained Weights | Transferring Strategy | Input Depth | Mean Dice | Mean Hd95 |"
        ));
        assert!(md.contains("| 3D ViT | 2D synthetic | center | 5 | 0.5000 | 2.500 |"));
    }
}
