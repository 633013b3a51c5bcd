//! Analytic FLOPs and parameter counts for kernel-based dynamic upsamplers.
//!
//! Per-position expressions are kept exactly as published, including their
//! mixed multiply/add conventions; absolute FLOPs are `per-position * H * W`
//! on the low-res grid. CARAFE, IndexNet, A2U and FADE are cost rows only.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Upsampler {
    Carafe,
    IndexNetHin,
    IndexNetM2o,
    A2u,
    Fade,
    SapaI,
    SapaB,
    SapaD,
}

impl Upsampler {
    pub const ALL: [Upsampler; 8] = [
        Upsampler::Carafe,
        Upsampler::IndexNetHin,
        Upsampler::IndexNetM2o,
        Upsampler::A2u,
        Upsampler::Fade,
        Upsampler::SapaI,
        Upsampler::SapaB,
        Upsampler::SapaD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Upsampler::Carafe => "carafe",
            Upsampler::IndexNetHin => "indexnet-hin",
            Upsampler::IndexNetM2o => "indexnet-m2o",
            Upsampler::A2u => "a2u",
            Upsampler::Fade => "fade",
            Upsampler::SapaI => "sapa-i",
            Upsampler::SapaB => "sapa-b",
            Upsampler::SapaD => "sapa-d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "i" => "sapa-i",
            "b" => "sapa-b",
            "d" => "sapa-d",
            "hin" | "indexnet" => "indexnet-hin",
            "m2o" => "indexnet-m2o",
            other => other,
        };
        Upsampler::ALL
            .into_iter()
            .find(|u| u.name() == alias)
            .ok_or_else(|| config_err!("unknown upsampler {s:?}"))
    }

    /// Only the SAPA rows have an executable forward pass here.
    pub fn has_forward(self) -> bool {
        matches!(self, Upsampler::SapaI | Upsampler::SapaB | Upsampler::SapaD)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostQuery {
    pub upsampler: Upsampler,
    pub c: u64,
    pub d: u64,
    pub k: u64,
    pub s: u64,
    pub g: u64,
    pub h: u64,
    pub w: u64,
}

impl CostQuery {
    /// Published default hyper-parameters: `d = 64, K = 5` for CARAFE and
    /// FADE, `K = 3` for A2U, `d = 32, S = 9, g = 4` for SAPA (with `K = 5`
    /// windows for SAPA-I/B).
    pub fn with_defaults(upsampler: Upsampler, c: u64, h: u64, w: u64) -> Self {
        let (d, k) = match upsampler {
            Upsampler::Carafe | Upsampler::Fade => (64, 5),
            Upsampler::A2u => (64, 3),
            Upsampler::IndexNetHin | Upsampler::IndexNetM2o => (64, 5),
            Upsampler::SapaI | Upsampler::SapaB | Upsampler::SapaD => (32, 5),
        };
        Self {
            upsampler,
            c,
            d,
            k,
            s: 9,
            g: 4,
            h,
            w,
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [self.c, self.d, self.k, self.s, self.g, self.h, self.w];
        if fields.contains(&0) {
            return Err(config_err!("cost query fields must be positive: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    PointSelection,
    WeightGeneration,
    FeatureAssembly,
}

impl Step {
    pub fn label(self) -> &'static str {
        match self {
            Step::PointSelection => "I",
            Step::WeightGeneration => "II",
            Step::FeatureAssembly => "III",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCost {
    pub step: Step,
    pub flops_per_position: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub query: CostQuery,
    pub steps: Vec<StepCost>,
    pub flops_per_position: u64,
    pub flops: u64,
    pub params: u64,
    /// Total per-position FLOPs as printed in the published table. Differs
    /// from the step sum only for SAPA-D (`38Sdg` printed vs `36Sdg` summed).
    pub published_total_flops_per_position: u64,
}

impl CostReport {
    pub fn step(&self, step: Step) -> Option<&StepCost> {
        self.steps.iter().find(|s| s.step == step)
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Per-step `(flops per position, params)` rows.
fn step_rows(q: &CostQuery) -> Vec<(Step, u64, u64)> {
    let CostQuery { c, d, k, s, g, .. } = *q;
    let k2 = k * k;
    use Step::*;
    match q.upsampler {
        Upsampler::Carafe => vec![
            (WeightGeneration, c * d + 36 * k2 * d, c * d + 36 * k2 * d),
            (FeatureAssembly, 4 * k2 * c, 0),
        ],
        Upsampler::IndexNetHin => vec![
            (WeightGeneration, 32 * c * c + 8 * c, 32 * c * c + 8 * c),
            (FeatureAssembly, 4 * c, 0),
        ],
        Upsampler::IndexNetM2o => vec![
            (WeightGeneration, 68 * c * c, 68 * c * c),
            (FeatureAssembly, 4 * c, 0),
        ],
        Upsampler::A2u => vec![
            (WeightGeneration, 73 * c + 4 * k2, 4 * k2 * c + 2 * c),
            (FeatureAssembly, 4 * k2 * c, 0),
        ],
        Upsampler::Fade => vec![
            (
                WeightGeneration,
                5 * c * d + 45 * k2 * d,
                2 * c * d + 9 * k2 * d,
            ),
            (FeatureAssembly, 4 * k2 * c, 0),
        ],
        Upsampler::SapaI => vec![
            (WeightGeneration, 4 * k2 * c, 0),
            (FeatureAssembly, 4 * k2 * c, 0),
        ],
        Upsampler::SapaB => vec![
            (WeightGeneration, 5 * c * d + 4 * k2 * d, 2 * c * d),
            (FeatureAssembly, 4 * k2 * c, 0),
        ],
        Upsampler::SapaD => vec![
            (
                PointSelection,
                32 * s * d * g + 32 * s * c + 8 * s * c * g,
                8 * s * c * g,
            ),
            (
                WeightGeneration,
                5 * c * d * g + 4 * s * d * g,
                2 * c * d * g,
            ),
            (FeatureAssembly, 4 * s * c, 0),
        ],
    }
}

/// Closed-form `(flops per position, params)` totals consistent with the
/// step rows.
pub fn closed_form_totals(q: &CostQuery) -> (u64, u64) {
    let CostQuery { c, d, k, s, g, .. } = *q;
    let k2 = k * k;
    match q.upsampler {
        Upsampler::Carafe => (c * d + 36 * k2 * d + 4 * k2 * c, c * d + 36 * k2 * d),
        Upsampler::IndexNetHin => (32 * c * c + 12 * c, 32 * c * c + 8 * c),
        Upsampler::IndexNetM2o => (68 * c * c + 4 * c, 68 * c * c),
        Upsampler::A2u => (73 * c + 4 * k2 + 4 * k2 * c, 4 * k2 * c + 2 * c),
        Upsampler::Fade => (5 * c * d + 45 * k2 * d + 4 * k2 * c, 2 * c * d + 9 * k2 * d),
        Upsampler::SapaI => (8 * k2 * c, 0),
        Upsampler::SapaB => (5 * c * d + 4 * k2 * d + 4 * k2 * c, 2 * c * d),
        Upsampler::SapaD => (
            5 * c * d * g + 36 * s * d * g + 36 * s * c + 8 * s * c * g,
            2 * c * d * g + 8 * s * c * g,
        ),
    }
}

/// The total-FLOPs expression exactly as printed in the published table.
pub fn published_total_flops(q: &CostQuery) -> u64 {
    let CostQuery { c, d, s, g, .. } = *q;
    match q.upsampler {
        Upsampler::SapaD => 5 * c * d * g + 38 * s * d * g + 36 * s * c + 8 * s * c * g,
        _ => closed_form_totals(q).0,
    }
}

pub fn cost(q: &CostQuery) -> Result<CostReport> {
    q.validate()?;
    let hw = q.h * q.w;
    let steps: Vec<StepCost> = step_rows(q)
        .into_iter()
        .map(|(step, per_pos, params)| StepCost {
            step,
            flops_per_position: per_pos,
            flops: per_pos * hw,
            params,
        })
        .collect();
    let flops_per_position = steps.iter().map(|s| s.flops_per_position).sum();
    let params = steps.iter().map(|s| s.params).sum();
    Ok(CostReport {
        query: *q,
        steps,
        flops_per_position,
        flops: flops_per_position * hw,
        params,
        published_total_flops_per_position: published_total_flops(q),
    })
}

/// All eight rows at one feature shape with default hyper-parameters.
pub fn cost_table(c: u64, h: u64, w: u64) -> Result<Vec<CostReport>> {
    Upsampler::ALL
        .into_iter()
        .map(|u| cost(&CostQuery::with_defaults(u, c, h, w)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig10(u: Upsampler) -> CostReport {
        cost(&CostQuery::with_defaults(u, 256, 120, 120)).unwrap()
    }

    #[test]
    fn sapa_i_fig10() {
        let r = fig10(Upsampler::SapaI);
        assert_eq!(r.flops_per_position, 51_200);
        assert_eq!(r.flops, 737_280_000);
        assert_eq!(r.params, 0);
    }

    #[test]
    fn sapa_b_and_d_params() {
        assert_eq!(fig10(Upsampler::SapaB).params, 16_384);
        assert_eq!(fig10(Upsampler::SapaD).params, 139_264);
    }

    #[test]
    fn carafe_total() {
        let r = fig10(Upsampler::Carafe);
        assert_eq!(r.flops_per_position, 256 * 64 + 36 * 25 * 64 + 4 * 25 * 256);
        assert!(r.step(Step::PointSelection).is_none());
    }

    #[test]
    fn sapa_d_printed_total_exceeds_step_sum_by_2sdg() {
        let r = fig10(Upsampler::SapaD);
        assert_eq!(
            r.published_total_flops_per_position - r.flops_per_position,
            2 * 9 * 32 * 4
        );
        for u in Upsampler::ALL
            .into_iter()
            .filter(|&u| u != Upsampler::SapaD)
        {
            let r = fig10(u);
            assert_eq!(
                r.published_total_flops_per_position, r.flops_per_position,
                "{u:?}"
            );
        }
    }

    #[test]
    fn names_parse() {
        for u in Upsampler::ALL {
            assert_eq!(Upsampler::parse(u.name()).unwrap(), u);
        }
        assert!(Upsampler::parse("deconv").is_err());
    }

    #[test]
    fn zero_field_rejected() {
        let q = CostQuery {
            c: 0,
            ..CostQuery::with_defaults(Upsampler::SapaB, 1, 1, 1)
        };
        assert!(cost(&q).is_err());
    }
}
