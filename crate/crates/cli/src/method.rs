use sapa_core::{bilinear_upsample, nn_upsample, pixel_shuffle, Real, Tensor, Variant};

use crate::error::{CliError, CliResult};

/// Anything the `upsample` and `bench` commands can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sapa(Variant),
    Nn,
    Bilinear,
    PixelShuffle,
}

impl Method {
    pub fn parse(s: &str) -> CliResult<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "i" | "sapa-i" => Method::Sapa(Variant::I),
            "b" | "sapa-b" => Method::Sapa(Variant::B),
            "d" | "sapa-d" => Method::Sapa(Variant::D),
            "nn" | "nearest" => Method::Nn,
            "bilinear" => Method::Bilinear,
            "pixelshuffle" | "pixel-shuffle" => Method::PixelShuffle,
            _ => {
                return Err(CliError::usage(format!(
                    "unknown variant {s:?} (expected i, b, d, nn, bilinear or pixelshuffle)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sapa(v) => v.name(),
            Method::Nn => "nn",
            Method::Bilinear => "bilinear",
            Method::PixelShuffle => "pixelshuffle",
        }
    }

    /// Runs a fixed-rule baseline; SAPA variants need more inputs.
    pub fn run_baseline<T: Real>(self, x: &Tensor<T>, s: usize) -> CliResult<Tensor<T>> {
        Ok(match self {
            Method::Nn => nn_upsample(x, s)?,
            Method::Bilinear => bilinear_upsample(x, s, false)?,
            Method::PixelShuffle => pixel_shuffle(x, s)?,
            Method::Sapa(v) => {
                return Err(CliError::usage(format!(
                    "{} is not a fixed-rule baseline",
                    v.name()
                )))
            }
        })
    }
}
