use std::path::Path;

use ifrnet::baseline::IfrcsConfig;
use ifrnet::descriptor::DescriptorConfig;
use ifrnet::network::{FilterInit, NetworkConfig, PlfInit};
use ifrnet::numerics::dct_basis;
use ifrnet::sampling::{MaskOptions, MaskPattern};
use ifrnet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Dct,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlfInitKind {
    SoftThreshold,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub stages: usize,
    pub blocks: usize,
    pub filters: usize,
    pub filter_size: usize,
    pub c2_filter_size: usize,
    pub plf_points: usize,
    pub init: InitKind,
    pub plf_init: PlfInitKind,
    pub plf_threshold: f64,
    pub weight_sharing: bool,
    pub rho_init: f64,
    pub mu1_init: f64,
    pub mu2_init: f64,
    pub w2_scale: f64,
    pub random_std: f64,
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkConfig::default();
        Self {
            stages: d.stages,
            blocks: d.blocks,
            filters: d.filters,
            filter_size: d.filter_size,
            c2_filter_size: d.c2_filter_size,
            plf_points: d.plf_points,
            init: match d.init {
                FilterInit::Dct => InitKind::Dct,
                FilterInit::Random => InitKind::Random,
            },
            plf_init: match d.plf_init {
                PlfInit::SoftThreshold => PlfInitKind::SoftThreshold,
                PlfInit::Identity => PlfInitKind::Identity,
            },
            plf_threshold: d.plf_threshold,
            weight_sharing: d.weight_sharing,
            rho_init: d.rho_init,
            mu1_init: d.mu1_init,
            mu2_init: d.mu2_init,
            w2_scale: d.w2_scale,
            random_std: d.random_std,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorSection {
    pub patch_side: usize,
    pub blur_sigma: f64,
    pub blur_side: usize,
    pub v_init: f64,
}

impl Default for DescriptorSection {
    fn default() -> Self {
        let d = DescriptorConfig::default();
        Self {
            patch_side: d.patch_side,
            blur_sigma: d.blur_sigma,
            blur_side: d.blur_side,
            v_init: NetworkConfig::default().v_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            steps: d.steps,
            batch_size: d.batch_size,
            grad_clip: d.grad_clip,
            seed: d.seed,
            shuffle: d.shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub pattern: String,
    pub rate: f64,
    pub center_fraction: f64,
    pub seed: u64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            pattern: MaskPattern::Radial.to_string(),
            rate: 0.3,
            center_fraction: MaskOptions::default().center_fraction,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub rho: f64,
    pub lambda: f64,
    pub lambda_per_filter: Option<Vec<f64>>,
    pub l_r: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub filter_size: usize,
    pub v: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = IfrcsConfig::default();
        Self {
            rho: d.rho,
            lambda: d.lambda,
            lambda_per_filter: d.lambda_per_filter,
            l_r: d.l_r,
            outer_iters: d.outer_iters,
            inner_iters: d.inner_iters,
            filter_size: d.filters.kernel_side(),
            v: d.v,
        }
    }
}

/// Every tunable of a run. Missing keys take the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub descriptor: DescriptorSection,
    pub training: TrainingSection,
    pub sampling: SamplingSection,
    pub baseline: BaselineSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides every seed in the document.
    pub fn reseed(&mut self, seed: u64) {
        self.network.seed = seed;
        self.training.seed = seed;
        self.sampling.seed = seed;
    }

    pub fn network_config(&self) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            stages: n.stages,
            blocks: n.blocks,
            filters: n.filters,
            filter_size: n.filter_size,
            c2_filter_size: n.c2_filter_size,
            plf_points: n.plf_points,
            init: match n.init {
                InitKind::Dct => FilterInit::Dct,
                InitKind::Random => FilterInit::Random,
            },
            plf_init: match n.plf_init {
                PlfInitKind::SoftThreshold => PlfInit::SoftThreshold,
                PlfInitKind::Identity => PlfInit::Identity,
            },
            plf_threshold: n.plf_threshold,
            weight_sharing: n.weight_sharing,
            rho_init: n.rho_init,
            v_init: self.descriptor.v_init,
            mu1_init: n.mu1_init,
            mu2_init: n.mu2_init,
            w2_scale: n.w2_scale,
            random_std: n.random_std,
            seed: n.seed,
        }
    }

    pub fn descriptor_config(&self) -> DescriptorConfig {
        DescriptorConfig {
            patch_side: self.descriptor.patch_side,
            blur_sigma: self.descriptor.blur_sigma,
            blur_side: self.descriptor.blur_side,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            steps: t.steps,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
            seed: t.seed,
            shuffle: t.shuffle,
        }
    }

    pub fn pattern(&self) -> Result<MaskPattern, CliError> {
        Ok(self.sampling.pattern.parse()?)
    }

    pub fn mask_options(&self) -> MaskOptions {
        MaskOptions {
            center_fraction: self.sampling.center_fraction,
            ..MaskOptions::default()
        }
    }

    pub fn baseline_config(&self) -> Result<IfrcsConfig, CliError> {
        let b = &self.baseline;
        Ok(IfrcsConfig {
            rho: b.rho,
            lambda: b.lambda,
            lambda_per_filter: b.lambda_per_filter.clone(),
            l_r: b.l_r,
            outer_iters: b.outer_iters,
            inner_iters: b.inner_iters,
            filters: dct_basis(b.filter_size)?,
            v: b.v,
            dcfg: self.descriptor_config(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[network]\nstagez = 3\n").is_err());
        assert!(RunConfig::parse("[optimizer]\n").is_err());
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let cfg = RunConfig::parse("[training]\nlearning_rate = 0.01\n").unwrap();
        assert_eq!(cfg.training.learning_rate, 0.01);
        assert_eq!(cfg.training.steps, TrainConfig::default().steps);
        assert_eq!(cfg.network, NetworkSection::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.network.init = InitKind::Random;
        cfg.baseline.lambda_per_filter = Some(vec![0.1; 8]);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn library_configs_match_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.network_config(), NetworkConfig::default());
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.baseline_config().unwrap(), IfrcsConfig::default());
    }
}
