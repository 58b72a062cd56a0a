use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, LocalMode};
use crate::error::{config_err, Result};
use crate::memory::{SamplingKind, SamplingStrategy};
use crate::tdtb::MemoryWrite;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Space,
    Temporal,
}

impl BlockKind {
    pub fn tag(self) -> char {
        match self {
            BlockKind::Space => 's',
            BlockKind::Temporal => 't',
        }
    }
}

/// How space and temporal blocks are interleaved inside a stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// All space blocks first, then all temporal blocks.
    #[default]
    Split,
    /// Alternating `[s, t]` pairs.
    Factorised,
}

/// Block layout of one stage.
pub fn build_stage(scheme: Scheme, depth: usize, n_temporal: usize) -> Result<Vec<BlockKind>> {
    if n_temporal > depth {
        return config_err(format!("{n_temporal} temporal blocks do not fit in depth {depth}"));
    }
    match scheme {
        Scheme::Split => Ok(std::iter::repeat(BlockKind::Space)
            .take(depth - n_temporal)
            .chain(std::iter::repeat(BlockKind::Temporal).take(n_temporal))
            .collect()),
        Scheme::Factorised => {
            if depth % 2 != 0 || n_temporal * 2 != depth {
                return config_err(format!(
                    "factorised stages need an even depth with half temporal blocks, got depth {depth} with {n_temporal}"
                ));
            }
            Ok((0..depth)
                .map(|i| if i % 2 == 0 { BlockKind::Space } else { BlockKind::Temporal })
                .collect())
        }
    }
}

/// Named model size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: &'static str,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub plus: bool,
}

pub const VARIANTS: [VariantSpec; 6] = [
    VariantSpec { name: "T", embed_dim: 96, depths: [2, 2, 6, 2], plus: false },
    VariantSpec { name: "S", embed_dim: 96, depths: [2, 2, 18, 2], plus: false },
    VariantSpec { name: "B", embed_dim: 128, depths: [2, 2, 18, 2], plus: false },
    VariantSpec { name: "T+", embed_dim: 96, depths: [2, 2, 8, 2], plus: true },
    VariantSpec { name: "S+", embed_dim: 96, depths: [2, 2, 20, 2], plus: true },
    VariantSpec { name: "B+", embed_dim: 128, depths: [2, 2, 20, 2], plus: true },
];

pub fn variant(name: &str) -> Result<VariantSpec> {
    VARIANTS
        .iter()
        .find(|v| v.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| {
            crate::Error::Config(format!("unknown variant {name:?}; expected one of T, S, B, T+, S+, B+"))
        })
}

impl VariantSpec {
    /// Temporal blocks per stage: one per two-block stage, half of stage 3,
    /// and two more in stage 3 for the plus forms.
    pub fn temporal_counts(&self) -> [usize; 4] {
        let mut n = [0; 4];
        for (i, &d) in self.depths.iter().enumerate() {
            n[i] = if i == 2 && self.plus { (d - 2) / 2 + 2 } else { d / 2 };
        }
        n
    }
}

/// Explicitly listed stage, used instead of a named variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub dim: usize,
    pub blocks: Vec<BlockKind>,
}

fn default_variant() -> String {
    "T".into()
}
fn default_dilations() -> Vec<usize> {
    vec![4, 8, 16, 32]
}
fn seven() -> usize {
    7
}
fn default_patch() -> usize {
    4
}
fn default_in_channels() -> usize {
    3
}
fn one() -> usize {
    1
}
fn default_head_dim() -> usize {
    32
}
fn default_std() -> f64 {
    0.02
}

/// Everything needed to build a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: String,
    /// Overrides `variant`, `scheme` and `toy_scale` when present.
    #[serde(default)]
    pub stages: Option<Vec<StageSpec>>,
    #[serde(default)]
    pub scheme: Scheme,
    /// One dilation per stage.
    #[serde(default = "default_dilations")]
    pub dilations: Vec<usize>,
    #[serde(default)]
    pub sampling: SamplingKind,
    #[serde(default)]
    pub sampling_seed: u64,
    #[serde(default = "temporal_mode_default")]
    pub temporal_attention: LocalMode,
    /// Local region of temporal blocks.
    #[serde(default = "seven")]
    pub temporal_region: usize,
    /// Window size of space blocks.
    #[serde(default = "seven")]
    pub window: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Divides the embedding width and the head width.
    #[serde(default = "one")]
    pub toy_scale: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_std")]
    pub init_std: f64,
    /// Replace every temporal block by a space block.
    #[serde(default)]
    pub space_only: bool,
    #[serde(default)]
    pub memory_write: MemoryWrite,
    /// Memory capacity as a multiple of the dilation.
    #[serde(default = "one")]
    pub memory_factor: usize,
    /// Weight initialization seed.
    #[serde(default)]
    pub seed: u64,
}

fn temporal_mode_default() -> LocalMode {
    LocalMode::Window
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            stages: None,
            scheme: Scheme::Split,
            dilations: default_dilations(),
            sampling: SamplingKind::Earliest,
            sampling_seed: 0,
            temporal_attention: LocalMode::Window,
            temporal_region: 7,
            window: 7,
            patch_size: 4,
            in_channels: 3,
            toy_scale: 1,
            head_dim: 32,
            init_std: 0.02,
            space_only: false,
            memory_write: MemoryWrite::BlockInput,
            memory_factor: 1,
            seed: 0,
        }
    }
}

/// Fully resolved stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub dilation: usize,
    pub blocks: Vec<BlockKind>,
    /// Attention of the temporal blocks.
    pub attention: AttentionConfig,
    /// Attention of the space blocks.
    pub space_attention: AttentionConfig,
}

impl ModelConfig {
    /// Named variant at a given toy scale.
    pub fn variant(name: &str, toy_scale: usize) -> Self {
        Self {
            variant: name.into(),
            toy_scale,
            ..Self::default()
        }
    }

    /// Desk-scale tiny model: variant T at toy scale 8 on single-channel
    /// frames.
    pub fn toy_t() -> Self {
        Self {
            in_channels: 1,
            ..Self::variant("T", 8)
        }
    }

    pub fn sampling_strategy(&self) -> SamplingStrategy {
        SamplingStrategy::new(self.sampling, self.sampling_seed)
    }

    fn layout(&self) -> Result<Vec<(usize, Vec<BlockKind>)>> {
        if let Some(stages) = &self.stages {
            if stages.is_empty() {
                return config_err("at least one stage is required");
            }
            return Ok(stages.iter().map(|s| (s.dim, s.blocks.clone())).collect());
        }
        let v = variant(&self.variant)?;
        if self.toy_scale == 0 || v.embed_dim % self.toy_scale != 0 || self.head_dim % self.toy_scale != 0 {
            return config_err(format!(
                "toy scale {} must divide the embedding width {} and head width {}",
                self.toy_scale, v.embed_dim, self.head_dim
            ));
        }
        let c = v.embed_dim / self.toy_scale;
        let counts = v.temporal_counts();
        (0..4)
            .map(|i| Ok((c << i, build_stage(self.scheme, v.depths[i], counts[i])?)))
            .collect()
    }

    /// Resolve into per-stage configs, validating everything.
    pub fn resolve(&self) -> Result<Vec<StageConfig>> {
        let layout = self.layout()?;
        if self.dilations.len() != layout.len() {
            return config_err(format!(
                "{} dilations given for {} stages",
                self.dilations.len(),
                layout.len()
            ));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return config_err("dilations must be positive");
        }
        if self.patch_size == 0 || self.in_channels == 0 || self.memory_factor == 0 {
            return config_err("patch size, input channels and memory factor must be positive");
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return config_err("init_std must be finite and non-negative");
        }
        let head_dim = if self.stages.is_some() {
            self.head_dim
        } else {
            self.head_dim / self.toy_scale
        };
        layout
            .into_iter()
            .zip(&self.dilations)
            .map(|((dim, mut blocks), &dilation)| {
                if blocks.is_empty() {
                    return config_err("stages need at least one block");
                }
                if head_dim == 0 || dim % head_dim != 0 {
                    return config_err(format!("stage width {dim} is not a multiple of head width {head_dim}"));
                }
                if self.space_only {
                    blocks.iter_mut().for_each(|b| *b = BlockKind::Space);
                }
                let heads = dim / head_dim;
                Ok(StageConfig {
                    depth: blocks.len(),
                    dim,
                    dilation,
                    blocks,
                    attention: AttentionConfig::new(heads, head_dim, self.temporal_attention, self.temporal_region)?,
                    space_attention: AttentionConfig::new(heads, head_dim, LocalMode::Window, self.window)?,
                })
            })
            .collect()
    }
}

/// Frames a stack of blocks can see: `1 + Σ (K_t − 1)·D_t` over
/// `(K_t, D_t)` pairs.
pub fn temporal_receptive_field(blocks: &[(usize, usize)]) -> Result<usize> {
    if blocks.iter().any(|&(k, d)| k == 0 || d == 0) {
        return config_err("temporal kernel sizes and dilations must be positive");
    }
    Ok(1 + blocks.iter().map(|&(k, d)| (k - 1) * d).sum::<usize>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use BlockKind::{Space as S, Temporal as T};

    #[test]
    fn stage_layouts() {
        assert_eq!(build_stage(Scheme::Split, 6, 3).unwrap(), [S, S, S, T, T, T]);
        assert_eq!(build_stage(Scheme::Factorised, 6, 3).unwrap(), [S, T, S, T, S, T]);
        assert_eq!(build_stage(Scheme::Split, 8, 5).unwrap(), [S, S, S, T, T, T, T, T]);
        assert_eq!(build_stage(Scheme::Split, 2, 1).unwrap(), [S, T]);
        assert!(build_stage(Scheme::Split, 2, 3).is_err());
        assert!(build_stage(Scheme::Factorised, 5, 2).is_err());
        assert!(build_stage(Scheme::Factorised, 8, 5).is_err());
    }

    #[test]
    fn variant_registry() {
        let t = variant("T").unwrap();
        assert_eq!((t.embed_dim, t.depths), (96, [2, 2, 6, 2]));
        assert_eq!(variant("S").unwrap().depths, [2, 2, 18, 2]);
        assert_eq!(variant("B").unwrap().embed_dim, 128);
        for (basic, plus) in [("T", "T+"), ("S", "S+"), ("B", "B+")] {
            let (b, p) = (variant(basic).unwrap(), variant(plus).unwrap());
            assert_eq!(b.embed_dim, p.embed_dim);
            assert_eq!(p.depths[2], b.depths[2] + 2);
            assert_eq!([p.depths[0], p.depths[1], p.depths[3]], [b.depths[0], b.depths[1], b.depths[3]]);
        }
        assert_eq!(t.temporal_counts(), [1, 1, 3, 1]);
        assert_eq!(variant("T+").unwrap().temporal_counts(), [1, 1, 5, 1]);
        assert_eq!(variant("S").unwrap().temporal_counts(), [1, 1, 9, 1]);
        assert!(variant("L").is_err());
    }

    #[test]
    fn trf_formula() {
        assert_eq!(temporal_receptive_field(&[(1, 1), (1, 1), (4, 1)]).unwrap(), 4);
        assert_eq!(temporal_receptive_field(&[(2, 1), (2, 2), (2, 4)]).unwrap(), 8);
        let toy_t = [(2, 4), (2, 8), (2, 16), (2, 16), (2, 16), (2, 32)];
        assert_eq!(temporal_receptive_field(&toy_t).unwrap(), 93);
        assert!(temporal_receptive_field(&[(0, 1)]).is_err());
    }

    #[test]
    fn resolve_toy_t() {
        let stages = ModelConfig::toy_t().resolve().unwrap();
        assert_eq!(stages.iter().map(|s| s.dim).collect::<Vec<_>>(), [12, 24, 48, 96]);
        assert_eq!(stages.iter().map(|s| s.attention.num_heads).collect::<Vec<_>>(), [3, 6, 12, 24]);
        assert_eq!(stages[2].blocks, [S, S, S, T, T, T]);
        assert_eq!(stages.iter().map(|s| s.dilation).collect::<Vec<_>>(), [4, 8, 16, 32]);
    }

    #[test]
    fn resolve_errors() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.resolve().is_err()
        };
        assert!(bad(|c| c.dilations = vec![1, 2, 3]));
        assert!(bad(|c| c.dilations = vec![0, 8, 16, 32]));
        assert!(bad(|c| c.toy_scale = 5));
        assert!(bad(|c| {
            c.variant = "T+".into();
            c.scheme = Scheme::Factorised;
        }));
        assert!(bad(|c| c.variant = "X".into()));
        assert!(bad(|c| c.temporal_region = 4));
        assert!(!bad(|c| c.scheme = Scheme::Factorised));
    }

    #[test]
    fn toml_round_trip() {
        let c: ModelConfig = toml::from_str("variant = \"S+\"\nscheme = \"split\"\nsampling = \"temporal_nms\"\n").unwrap();
        assert_eq!(c.variant, "S+");
        assert_eq!(c.sampling, SamplingKind::TemporalNms);
        assert!(toml::from_str::<ModelConfig>("varient = \"T\"").is_err());
    }
}
