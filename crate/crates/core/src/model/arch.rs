use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stage of a network. Convolutions are 3×3 with padding 1 unless noted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// conv → batchnorm → relu with `out` output channels.
    ConvBnRelu {
        out: usize,
    },
    /// 2×2 max pooling, stride 2.
    MaxPool,
    /// `relu(x + bn(conv(relu(bn(conv(x))))))`, channel count preserved.
    Residual,
    /// Concatenation of a 1×1 conv-bn-relu branch (`narrow` channels) and a
    /// 3×3 conv-bn-relu branch (`wide` channels).
    Inception {
        narrow: usize,
        wide: usize,
    },
    Flatten,
    /// Final classifier; output width is the model's class count.
    Linear,
}

impl FromStr for Block {
    type Err = Error;

    /// Parses `conv:16`, `pool`, `res`, `incep:8,16`, `flatten`, `linear`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |a: &str| {
            a.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::InvalidArgument(format!("bad channel count in block `{s}`")))
        };
        match kind.trim() {
            "conv" => Ok(Self::ConvBnRelu { out: num(arg)? }),
            "pool" => Ok(Self::MaxPool),
            "res" => Ok(Self::Residual),
            "incep" => {
                let (a, b) = arg
                    .split_once(',')
                    .ok_or_else(|| Error::InvalidArgument(format!("inception block `{s}` needs two widths")))?;
                Ok(Self::Inception {
                    narrow: num(a)?,
                    wide: num(b)?,
                })
            }
            "flatten" => Ok(Self::Flatten),
            "linear" => Ok(Self::Linear),
            other => Err(Error::UnknownBlock(other.to_string())),
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ConvBnRelu { out } => write!(f, "conv:{out}"),
            Self::MaxPool => write!(f, "pool"),
            Self::Residual => write!(f, "res"),
            Self::Inception { narrow, wide } => write!(f, "incep:{narrow},{wide}"),
            Self::Flatten => write!(f, "flatten"),
            Self::Linear => write!(f, "linear"),
        }
    }
}

/// Block list plus the block indices whose outputs are exposed as taps.
/// Tap 0 is nearest the input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub blocks: Vec<Block>,
    pub taps: Vec<usize>,
}

pub const SHIPPED: [&str; 3] = ["vgg", "resnet", "inception"];

impl Architecture {
    /// Builds from a whitespace-separated block list, e.g. `"conv:8 pool linear"`.
    pub fn parse(name: &str, blocks: &str, taps: &[usize]) -> Result<Self> {
        let blocks = blocks.split_whitespace().map(str::parse).collect::<Result<Vec<_>>>()?;
        let arch = Self {
            name: name.to_string(),
            blocks,
            taps: taps.to_vec(),
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Plain stacked convolutions: four taps.
    pub fn vgg() -> Self {
        Self::parse(
            "vgg",
            "conv:8 pool conv:16 pool conv:32 pool conv:32 pool flatten linear",
            &[0, 2, 4, 6],
        )
        .expect("shipped architecture")
    }

    /// Residual blocks: five taps.
    pub fn resnet() -> Self {
        Self::parse(
            "resnet",
            "conv:8 pool res conv:16 pool res pool conv:32 pool flatten linear",
            &[0, 2, 3, 5, 7],
        )
        .expect("shipped architecture")
    }

    /// Inception-style branch concatenation: six taps.
    pub fn inception() -> Self {
        Self::parse(
            "inception",
            "conv:8 pool incep:4,8 conv:16 pool incep:8,8 conv:24 pool incep:8,16 pool flatten linear",
            &[0, 2, 3, 5, 6, 8],
        )
        .expect("shipped architecture")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vgg" => Ok(Self::vgg()),
            "resnet" => Ok(Self::resnet()),
            "inception" => Ok(Self::inception()),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture `{other}`; shipped: {}",
                SHIPPED.join(", ")
            ))),
        }
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.last() != Some(&Block::Linear) {
            return Err(Error::InvalidArgument(format!(
                "{}: last block must be linear",
                self.name
            )));
        }
        let flatten = self.blocks.iter().position(|b| *b == Block::Flatten);
        let linear_count = self.blocks.iter().filter(|b| **b == Block::Linear).count();
        if flatten != Some(self.blocks.len() - 2) || linear_count != 1 {
            return Err(Error::InvalidArgument(format!(
                "{}: expected `... flatten linear` at the end",
                self.name
            )));
        }
        if self.blocks.first() == Some(&Block::Residual) {
            return Err(Error::InvalidArgument(format!(
                "{}: residual block cannot come first",
                self.name
            )));
        }
        if self.taps.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no taps", self.name)));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "{}: tap indices must be strictly increasing",
                self.name
            )));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t + 2 >= self.blocks.len()) {
            return Err(Error::InvalidArgument(format!(
                "{}: tap block {t} is not a convolutional stage",
                self.name
            )));
        }
        Ok(())
    }
}
