use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One parallel filtering branch: a filtering conv then a dimension-match conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub filter_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dm_channels: usize,
    pub dm_kernel: usize,
    pub dm_stride: usize,
}

impl BranchSpec {
    pub const fn new(filter_channels: usize, kernel: usize, stride: usize, dm_channels: usize, dm_kernel: usize, dm_stride: usize) -> Self {
        Self {
            filter_channels,
            kernel,
            stride,
            dm_channels,
            dm_kernel,
            dm_stride,
        }
    }

    pub fn decimation(&self) -> usize {
        self.stride * self.dm_stride
    }

    /// `(after filtering, after dimension match)` frame counts for `len` samples.
    pub fn lengths(&self, len: usize) -> Option<(usize, usize)> {
        let a = conv_len(len, self.kernel, self.stride)?;
        let b = conv_len(a, self.dm_kernel, self.dm_stride)?;
        Some((a, b))
    }
}

/// A downsampling block: conv output channels, kernel and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownsampleSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl DownsampleSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { channels, kernel, stride }
    }
}

/// Valid-convolution output length, `None` when the input is too short.
pub fn conv_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel && stride > 0).then(|| (len - kernel) / stride + 1)
}

fn default_dropout() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub branches: Vec<BranchSpec>,
    pub downsample_blocks: Vec<DownsampleSpec>,
    pub multilevel_aggregation: bool,
    pub tfse_enabled: bool,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// When false a first-layer kernel that is not twice its stride only warns.
    #[serde(default = "default_true")]
    pub strict_ratio: bool,
}

pub const PRESET_NAMES: [&str; 9] = [
    "yvector-1",
    "yvector-2",
    "yvector-3",
    "yvector-4",
    "yvector-5",
    "single-low",
    "single-mid",
    "single-high",
    "multi-32",
];

fn dec18_branches(ch: usize) -> Vec<BranchSpec> {
    vec![
        BranchSpec::new(ch, 12, 6, 160, 5, 3),
        BranchSpec::new(ch, 18, 9, 160, 5, 2),
        BranchSpec::new(ch, 36, 18, 192, 5, 1),
    ]
}

fn dec24_branches(ch: usize) -> Vec<BranchSpec> {
    vec![
        BranchSpec::new(ch, 16, 8, 160, 5, 3),
        BranchSpec::new(ch, 24, 12, 160, 5, 2),
        BranchSpec::new(ch, 48, 24, 192, 5, 1),
    ]
}

fn ds_chain() -> Vec<DownsampleSpec> {
    vec![
        DownsampleSpec::new(512, 5, 2),
        DownsampleSpec::new(512, 3, 2),
        DownsampleSpec::new(512, 3, 2),
    ]
}

impl EncoderConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (branches, ml, tfse) = match name {
            "yvector-1" => (dec24_branches(50), false, false),
            "yvector-2" => (dec24_branches(50), true, false),
            "yvector-3" => (dec24_branches(90), true, false),
            "yvector-4" => (dec18_branches(90), true, false),
            "yvector-5" => (dec18_branches(90), true, true),
            "single-low" => (vec![BranchSpec::new(96, 40, 20, 512, 5, 1)], true, true),
            "single-mid" => (vec![BranchSpec::new(96, 20, 10, 512, 5, 2)], true, true),
            "single-high" => (vec![BranchSpec::new(96, 10, 5, 512, 5, 4)], true, true),
            "multi-32" => (
                vec![
                    BranchSpec::new(32, 10, 5, 160, 5, 4),
                    BranchSpec::new(32, 20, 10, 160, 5, 2),
                    BranchSpec::new(32, 40, 20, 192, 5, 1),
                ],
                true,
                true,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown encoder preset {other:?}; expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(Self {
            branches,
            downsample_blocks: ds_chain(),
            multilevel_aggregation: ml,
            tfse_enabled: tfse,
            dropout_rate: default_dropout(),
            strict_ratio: true,
        })
    }

    /// Every channel count divided by `divisor`, rounded up.
    pub fn scaled(&self, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::Config("channel divisor must be positive".into()));
        }
        let d = |c: usize| c.div_ceil(divisor);
        let mut out = self.clone();
        for b in &mut out.branches {
            b.filter_channels = d(b.filter_channels);
            b.dm_channels = d(b.dm_channels);
        }
        for s in &mut out.downsample_blocks {
            s.channels = d(s.channels);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("encoder needs at least one branch".into()));
        }
        if self.downsample_blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one downsampling block".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        for (i, b) in self.branches.iter().enumerate() {
            let dims = [b.filter_channels, b.kernel, b.stride, b.dm_channels, b.dm_kernel, b.dm_stride];
            if dims.contains(&0) {
                return Err(Error::Config(format!("branch {i}: all dimensions must be positive")));
            }
            if b.kernel != 2 * b.stride {
                let msg = format!("branch {i}: kernel {} is not twice stride {}", b.kernel, b.stride);
                if self.strict_ratio {
                    return Err(Error::Config(msg));
                }
                log::warn!("{msg}");
            }
            if b.dm_kernel != 2 * b.dm_stride {
                log::debug!(
                    "branch {i}: dimension-match kernel {} with stride {} (fixed-kernel layer)",
                    b.dm_kernel,
                    b.dm_stride
                );
            }
        }
        let dec = self.branches[0].decimation();
        if let Some((i, b)) = self.branches.iter().enumerate().find(|(_, b)| b.decimation() != dec) {
            return Err(Error::Config(format!(
                "branch {i} decimates by {} but branch 0 by {dec}",
                b.decimation()
            )));
        }
        for (i, s) in self.downsample_blocks.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!("downsample block {i}: all dimensions must be positive")));
            }
        }
        if self.multilevel_aggregation {
            let c = self.downsample_blocks[0].channels;
            if self.downsample_blocks.iter().any(|s| s.channels != c) {
                log::debug!("multi-level aggregation over blocks of unequal width");
            }
        }
        Ok(())
    }

    /// Channels after branch concatenation; the first downsampling block's input width.
    pub fn concat_channels(&self) -> usize {
        self.branches.iter().map(|b| b.dm_channels).sum()
    }

    pub fn decimation(&self) -> usize {
        self.branches[0].decimation()
    }

    pub fn output_channels(&self) -> usize {
        if self.multilevel_aggregation {
            self.downsample_blocks.iter().map(|s| s.channels).sum()
        } else {
            self.downsample_blocks.last().map_or(0, |s| s.channels)
        }
    }

    /// Remaining decimation after each downsampling block, relative to the last.
    pub fn aggregation_factors(&self) -> Vec<usize> {
        let n = self.downsample_blocks.len();
        (0..n)
            .map(|i| self.downsample_blocks[i + 1..].iter().map(|s| s.stride).product())
            .collect()
    }

    /// Frame counts along the encoder for `len` input samples.
    pub fn shape_chain(&self, len: usize) -> Option<ShapeChain> {
        let branch_lengths = self
            .branches
            .iter()
            .map(|b| b.lengths(len))
            .collect::<Option<Vec<_>>>()?;
        let concat = branch_lengths.iter().map(|l| l.1).min()?;
        let mut t = concat;
        let mut downsample = Vec::new();
        for s in &self.downsample_blocks {
            t = conv_len(t, s.kernel, s.stride)?;
            downsample.push(t);
        }
        if self.multilevel_aggregation {
            let last = *downsample.last()?;
            for (&l, f) in downsample.iter().zip(self.aggregation_factors()) {
                if conv_len(l, f, f)? < last {
                    return None;
                }
            }
        }
        Some(ShapeChain {
            branch_lengths,
            concat,
            downsample,
            channels: self.output_channels(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeChain {
    /// `(filtering, dimension match)` lengths per branch.
    pub branch_lengths: Vec<(usize, usize)>,
    pub concat: usize,
    pub downsample: Vec<usize>,
    pub channels: usize,
}

impl ShapeChain {
    pub fn frames(&self) -> usize {
        *self.downsample.last().expect("at least one block")
    }
}
