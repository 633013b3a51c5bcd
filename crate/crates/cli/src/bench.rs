//! Latency benchmark over seeded random inputs.

use std::time::Instant;

use sapa_core::{cost, CostQuery, RngSpec, SapaConfig, SapaParams, Tensor, Upsampler};

use crate::error::{CliError, CliResult};
use crate::method::Method;

/// One CSV row. Timing fields are `None` for skipped variants.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub upsampler: String,
    pub shape: [usize; 4],
    pub warmup: usize,
    pub iters: usize,
    pub mean_ms: Option<f64>,
    pub std_ms: Option<f64>,
    pub gflops: Option<f64>,
    pub params: Option<u64>,
    pub status: String,
}

pub const CSV_HEADER: &str = "upsampler,shape,warmup,iters,mean_ms,std_ms,gflops,params,status";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        let opt =
            |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_default();
        let [n, c, h, w] = self.shape;
        format!(
            "{},{n}x{c}x{h}x{w},{},{},{},{},{},{},{}",
            self.upsampler,
            self.warmup,
            self.iters,
            opt(self.mean_ms, 3),
            opt(self.std_ms, 3),
            opt(self.gflops, 4),
            self.params.map(|p| p.to_string()).unwrap_or_default(),
            self.status
        )
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub shape: [usize; 4],
    pub ratio: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            shape: [1, 256, 120, 120],
            ratio: 2,
            warmup: 2,
            iters: 10,
            seed: 0,
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn analytic(u: Upsampler, opts: &BenchOptions) -> (f64, u64) {
    let [_, c, h, w] = opts.shape;
    let r =
        cost(&CostQuery::with_defaults(u, c as u64, h as u64, w as u64)).expect("positive shape");
    (r.gflops(), r.params)
}

/// Benchmarks one named variant. Names without a forward pass (the
/// cost-model-only rows) come back as skipped records.
pub fn bench_variant(name: &str, opts: &BenchOptions) -> CliResult<BenchRecord> {
    if opts.iters < 10 {
        return Err(CliError::usage(format!(
            "bench needs at least 10 timed iterations, got {}",
            opts.iters
        )));
    }
    if opts.shape.contains(&0) || opts.ratio == 0 {
        return Err(CliError::usage("bench shape and ratio must be positive"));
    }
    let mut rec = BenchRecord {
        upsampler: name.to_string(),
        shape: opts.shape,
        warmup: opts.warmup,
        iters: opts.iters,
        mean_ms: None,
        std_ms: None,
        gflops: None,
        params: None,
        status: String::from("ok"),
    };
    let method = match Method::parse(name) {
        Ok(m) => m,
        Err(_) => {
            rec.status = match Upsampler::parse(name) {
                Ok(_) => String::from("skipped (cost model only)"),
                Err(_) => String::from("skipped (unknown upsampler)"),
            };
            return Ok(rec);
        }
    };
    let [n, c, h, w] = opts.shape;
    let s = opts.ratio;
    let decoder = Tensor::<f32>::randn(opts.shape, opts.seed);
    let mut run: Box<dyn FnMut() -> CliResult<Tensor<f32>>> = match method {
        Method::Sapa(variant) => {
            let cfg = SapaConfig {
                ratio: s,
                ..SapaConfig::for_variant(variant)
            };
            let encoder = Tensor::<f32>::randn([n, c, h * s, w * s], opts.seed.wrapping_add(1));
            let params = SapaParams::init(&cfg, c, c, &RngSpec::new(opts.seed));
            let u = match variant {
                sapa_core::Variant::I => Upsampler::SapaI,
                sapa_core::Variant::B => Upsampler::SapaB,
                sapa_core::Variant::D => Upsampler::SapaD,
            };
            let (gf, p) = analytic(u, opts);
            rec.gflops = Some(gf);
            rec.params = Some(p);
            Box::new(move || Ok(sapa_core::upsample(&decoder, &encoder, &params, &cfg)?.output))
        }
        baseline => {
            rec.params = Some(0);
            Box::new(move || baseline.run_baseline(&decoder, s))
        }
    };
    for _ in 0..opts.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(opts.iters);
    for _ in 0..opts.iters {
        let t0 = Instant::now();
        let out = run()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let (mean, std) = mean_std(&times);
    rec.mean_ms = Some(mean);
    rec.std_ms = Some(std);
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn cost_only_rows_are_skipped() {
        let r = bench_variant(
            "carafe",
            &BenchOptions {
                shape: [1, 4, 4, 4],
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.status.starts_with("skipped"));
        assert_eq!(
            r.csv_row().split(',').count(),
            CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn sapa_i_gflops_at_fig10_shape() {
        let (gf, p) = analytic(Upsampler::SapaI, &BenchOptions::default());
        assert_eq!(format!("{gf:.3}"), "0.737");
        assert_eq!(p, 0);
    }
}
