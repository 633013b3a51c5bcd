//! Property checks shared by `selftest` and the acceptance suite. Each
//! returns a [`Check`] carrying its pinned tolerance in `detail`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapa_core::cost::closed_form_totals;
use sapa_core::grad::{finite_diff_check, relative_error, FdOptions, SapaGradOp};
use sapa_core::reference::{random_case, sapa_forward, CaseLimits};
use sapa_core::{
    cost, grouped_merge, grouped_split, nn_upsample, offset_generate, pixel_shuffle,
    pixel_unshuffle, upsample, CostQuery, LinearMap, OffsetDof, OffsetInit, SapaConfig, SapaParams,
    Tensor, Upsampler, Variant,
};

use crate::bench::{bench_variant, BenchOptions};
use crate::tensorfile::{Payload, TensorFile};

#[derive(Debug, Clone)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Soft checks warn instead of failing.
    pub soft: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Check {
    pub fn within_budget(&self) -> bool {
        self.elapsed <= self.budget
    }

    /// Property holds and ran inside its time budget.
    pub fn ok(&self) -> bool {
        self.passed && self.within_budget()
    }

    pub fn line(&self) -> String {
        let status = match (self.ok(), self.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        format!(
            "[{status}] {}. {} ({:.2}s / {:.0}s budget): {}",
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(id: u8, name: &'static str, budget_s: u64, f: impl FnOnce() -> (bool, String)) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = f();
    Check {
        id,
        name,
        passed,
        soft: false,
        detail,
        elapsed: t0.elapsed(),
        budget: Duration::from_secs(budget_s),
    }
}

fn randn_map(rows: usize, cols: usize, seed: u64) -> LinearMap<f64> {
    LinearMap::new(
        rows,
        cols,
        Tensor::<f64>::randn([1, 1, rows, cols], seed).into_data(),
    )
    .expect("sizes match")
}

/// Constant decoder: every kernel weight is `1/S` and the output equals
/// the constant, for `trials` random encoders per variant.
pub fn smooth_window(trials: u64) -> Check {
    timed(1, "smooth-window theorem", 5, || {
        let (mut worst_w, mut worst_o) = (0.0f64, 0.0f64);
        for variant in [Variant::I, Variant::B, Variant::D] {
            for t in 0..trials {
                let cfg = SapaConfig::for_variant(variant);
                let vals = Tensor::<f64>::randn([1, 1, 1, 8], t).into_data();
                let dec = Tensor::from_fn([1, 8, 16, 16], |_, c, _, _| vals[c]);
                let enc = Tensor::<f64>::randn([1, 8, 32, 32], 10_000 + t).map(|v| 4.0 * v);
                let mut params = SapaParams::init(&cfg, 8, 8, &sapa_core::RngSpec::new(t));
                if let Some(phi) = params.phi.as_mut() {
                    *phi = randn_map(phi.rows(), phi.cols(), 20_000 + t);
                }
                let up = match upsample(&dec, &enc, &params, &cfg) {
                    Ok(up) => up,
                    Err(e) => return (false, format!("{}: {e}", variant.name())),
                };
                let s = cfg.points() as f64;
                for w in &up.kernels.weights {
                    worst_w = worst_w.max((w - 1.0 / s).abs());
                }
                for (ch, &v) in vals.iter().enumerate() {
                    for o in up.output.plane(0, ch) {
                        worst_o = worst_o.max((o - v).abs());
                    }
                }
            }
        }
        let ok = worst_w < 1e-6 && worst_o < 1e-6;
        (ok, format!("{trials} trials x 3 variants; max |w - 1/S| = {worst_w:.1e}, max |out - x| = {worst_o:.1e} (tol 1e-6)"))
    })
}

/// Two-cluster window with the encoder point `tau * a`: the output
/// approaches `a` monotonically in `tau`.
pub fn detail_window() -> Check {
    timed(2, "detail-window theorem", 1, || {
        let a = [1.0f64, -0.5, 0.25, 0.8];
        let b = [-0.6f64, 0.9, -0.4, 0.3];
        let dec = Tensor::from_fn([1, 4, 6, 6], |_, c, _, j| if j < 3 { a[c] } else { b[c] });
        let norm_ab = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let cfg = SapaConfig {
            kernel_size: 3,
            embed_dim: 4,
            ..SapaConfig::sapa_b()
        };
        let params = SapaParams {
            mx: vec![LinearMap::identity(4)],
            my: vec![LinearMap::identity(4)],
            phi: None,
        };
        let mut errs = Vec::new();
        for tau in [1.0, 2.0, 5.0, 10.0, 20.0] {
            let enc = Tensor::from_fn([1, 4, 12, 12], |_, c, _, _| tau * a[c]);
            let out = match upsample(&dec, &enc, &params, &cfg) {
                Ok(u) => u.output,
                Err(e) => return (false, e.to_string()),
            };
            // Output (5, 5) maps to low-res (2, 2); its window spans both clusters.
            errs.push(
                (0..4)
                    .map(|c| (out.at(0, c, 5, 5) - a[c]).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
        let decreasing = errs.windows(2).all(|p| p[1] < p[0]);
        let last = errs[errs.len() - 1];
        let ok = decreasing && last < 1e-3 * norm_ab;
        let shown: Vec<String> = errs.iter().map(|e| format!("{e:.1e}")).collect();
        (
            ok,
            format!(
                "|out - a| over tau 1,2,5,10,20 = [{}]; need strictly decreasing and < {:.1e}",
                shown.join(", "),
                1e-3 * norm_ab
            ),
        )
    })
}

/// SAPA-D with a zero offset layer equals nearest-neighbour upsampling.
pub fn origin_init(configs: u64) -> Check {
    timed(3, "origin-init identity", 5, || {
        let mut worst = 0.0f64;
        for seed in 0..configs {
            for dof in [OffsetDof::One, OffsetDof::RatioSquared] {
                let mut case = random_case(Variant::D, seed, CaseLimits::ORACLE);
                case.cfg.offset_dof = dof;
                case.cfg.offset_init = OffsetInit::Origin;
                let c = case.decoder.c();
                case.params.phi = Some(LinearMap::zeros(case.cfg.offset_channels(), c));
                let out = match upsample(&case.decoder, &case.encoder, &case.params, &case.cfg) {
                    Ok(u) => u.output,
                    Err(e) => return (false, format!("seed {seed}: {e}")),
                };
                let nn = nn_upsample(&case.decoder, case.cfg.ratio).expect("valid ratio");
                worst = worst.max(out.max_abs_diff(&nn));
            }
        }
        (
            worst < 1e-6,
            format!("{configs} configs x 2 DOF; max |D - NN| = {worst:.1e} (tol 1e-6)"),
        )
    })
}

/// Optimized forwards against the naive f64 reference.
pub fn oracle(configs: u64) -> Check {
    timed(4, "oracle equivalence", 30, || {
        let mut worst = (0.0f64, "", 0u64);
        for variant in [Variant::I, Variant::B, Variant::D] {
            for seed in 0..configs {
                let case = random_case(variant, seed, CaseLimits::ORACLE);
                let fast = match upsample(&case.decoder, &case.encoder, &case.params, &case.cfg) {
                    Ok(u) => u.output,
                    Err(e) => return (false, format!("{} seed {seed}: {e}", variant.name())),
                };
                let slow = sapa_forward(&case.decoder, &case.encoder, &case.params, &case.cfg);
                let err = fast
                    .data()
                    .iter()
                    .zip(slow.data())
                    .map(|(&a, &b)| relative_error(a, b))
                    .fold(0.0, f64::max);
                if err > worst.0 || fast.dims() != slow.dims() {
                    worst = (
                        if fast.dims() == slow.dims() {
                            err
                        } else {
                            f64::INFINITY
                        },
                        variant.name(),
                        seed,
                    );
                }
            }
        }
        (
            worst.0 < 1e-5,
            format!(
                "{configs} configs x 3 variants; max rel err = {:.1e} ({} seed {}) (tol 1e-5)",
                worst.0, worst.1, worst.2
            ),
        )
    })
}

/// Analytic backward against 4-point central differences (step 1e-3).
pub fn gradients(configs: u64) -> Check {
    timed(5, "gradient correctness", 60, || {
        let mut worst = (0.0f64, "", 0u64);
        let mut failing = Vec::new();
        let (mut checked, mut skipped) = (0usize, 0usize);
        for variant in [Variant::B, Variant::D] {
            for seed in 0..configs {
                let case = random_case(variant, seed, CaseLimits::GRADIENT);
                let op = SapaGradOp {
                    cfg: case.cfg,
                    decoder: case.decoder,
                    encoder: case.encoder,
                    params: case.params,
                };
                let report = match finite_diff_check(
                    &op,
                    &FdOptions {
                        seed,
                        ..FdOptions::default()
                    },
                ) {
                    Ok(r) => r,
                    Err(e) => return (false, format!("{} seed {seed}: {e}", variant.name())),
                };
                checked += report.tensors.iter().map(|t| t.checked).sum::<usize>();
                skipped += report.tensors.iter().map(|t| t.skipped).sum::<usize>();
                if report.max_rel_err() > worst.0 {
                    worst = (report.max_rel_err(), variant.name(), seed);
                }
                if !report.passed() {
                    failing.push(format!(
                        "{} seed {seed} [{}]",
                        variant.name(),
                        report.failing().join(",")
                    ));
                }
            }
        }
        let mut detail = format!(
            "{configs} configs x {{B, D}}; {checked} entries checked, {skipped} near cell/clamp boundaries excluded; max rel err = {:.1e} ({} seed {}) (tol 1e-4)",
            worst.0, worst.1, worst.2
        );
        if !failing.is_empty() {
            detail.push_str(&format!("; failing: {}", failing.join("; ")));
        }
        (failing.is_empty(), detail)
    })
}

/// Fig.-10 spot values and step sums against closed forms.
pub fn cost_model(queries: usize) -> Check {
    timed(6, "cost-model fidelity", 5, || {
        let fig = |u| cost(&CostQuery::with_defaults(u, 256, 120, 120)).expect("valid query");
        let i = fig(Upsampler::SapaI);
        let b = fig(Upsampler::SapaB);
        let d = fig(Upsampler::SapaD);
        let spots = [
            ("SAPA-I flops/pos", i.flops_per_position, 51_200),
            ("SAPA-I flops", i.flops, 737_280_000),
            ("SAPA-I params", i.params, 0),
            ("SAPA-B params", b.params, 16_384),
            ("SAPA-D params", d.params, 139_264),
        ];
        let bad_spots: Vec<String> = spots
            .iter()
            .filter(|s| s.1 != s.2)
            .map(|s| format!("{} = {} != {}", s.0, s.1, s.2))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2023);
        let mut mismatches = 0;
        for _ in 0..queries {
            let q = CostQuery {
                upsampler: Upsampler::ALL[rng.random_range(0..8)],
                c: rng.random_range(1..=1024),
                d: rng.random_range(1..=128),
                k: 2 * rng.random_range(0..5u64) + 1,
                s: rng.random_range(1..=25),
                g: rng.random_range(1..=8),
                h: rng.random_range(1..=256),
                w: rng.random_range(1..=256),
            };
            let r = cost(&q).expect("positive query");
            let (flops, params) = closed_form_totals(&q);
            let step_sum: u64 = r.steps.iter().map(|s| s.flops).sum();
            if r.flops_per_position != flops || r.params != params || step_sum != flops * q.h * q.w
            {
                mismatches += 1;
            }
        }
        let ok = bad_spots.is_empty() && mismatches == 0;
        let mut detail = format!(
            "51,200 / 737,280,000 / 16,384 / 139,264 spot values exact; {queries} random queries, {mismatches} step-sum mismatches"
        );
        if !bad_spots.is_empty() {
            detail.push_str(&format!("; {}", bad_spots.join("; ")));
        }
        (ok, detail)
    })
}

/// DOF 1 shares offsets across the `s^2` siblings; DOF `s^2` does not.
pub fn dof_semantics(seeds: u64) -> Check {
    timed(7, "offset DOF semantics", 5, || {
        let mut shared_violations = 0;
        let mut undistinguished = Vec::new();
        for seed in 0..seeds {
            for dof in [OffsetDof::One, OffsetDof::RatioSquared] {
                let cfg = SapaConfig {
                    offset_dof: dof,
                    ..SapaConfig::sapa_d()
                };
                let dec = Tensor::<f64>::randn([1, 8, 6, 6], seed);
                let phi = randn_map(cfg.offset_channels(), 8, 500 + seed);
                let sets = match offset_generate(&dec, &phi, &cfg) {
                    Ok(f) => f.coord_sets(),
                    Err(e) => return (false, e.to_string()),
                };
                let s = cfg.ratio;
                let mut any_diff = false;
                for set in &sets[0] {
                    for li in 0..6 {
                        for lj in 0..6 {
                            let first = set.at(li * s, lj * s);
                            for k in 1..s * s {
                                let differs = set.at(li * s + k / s, lj * s + k % s) != first;
                                any_diff |= differs;
                                if dof == OffsetDof::One && differs {
                                    shared_violations += 1;
                                }
                            }
                        }
                    }
                }
                if dof == OffsetDof::RatioSquared && !any_diff {
                    undistinguished.push(seed);
                }
            }
        }
        let ok = shared_violations == 0 && undistinguished.is_empty();
        (
            ok,
            format!(
                "{seeds} seeds; DOF=1 sibling mismatches: {shared_violations}; DOF=s^2 seeds with all siblings equal: {undistinguished:?}"
            ),
        )
    })
}

fn bits_equal_f32(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn bits_equal_f64(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Pixel (un)shuffle, tensor files and grouped split/merge are bit-exact
/// inverse pairs.
pub fn round_trips() -> Check {
    timed(8, "structural round-trips", 5, || {
        let mut failures = Vec::new();
        for seed in 0..20u64 {
            let s = 1 + (seed as usize % 3);
            let x = Tensor::<f32>::randn([2, 3 * s * s, 4, 5], seed);
            let back = pixel_shuffle(&x, s).and_then(|y| pixel_unshuffle(&y, s));
            if !back.is_ok_and(|b| bits_equal_f32(b.data(), x.data())) {
                failures.push(format!("pixel shuffle seed {seed}"));
            }
            let y = Tensor::<f64>::randn([2, 4, 3, s + 2], seed);
            for g in [1, 2, 4] {
                let merged = grouped_split(&y, g).and_then(|p| grouped_merge(&p));
                if !merged.is_ok_and(|m| bits_equal_f64(m.data(), y.data())) {
                    failures.push(format!("grouped split/merge g={g}"));
                }
            }
        }
        let specials = [
            0.0,
            -0.0,
            f64::MIN_POSITIVE / 2.0,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NAN,
            1e300,
            -1.5,
        ];
        for rank in 1..=4usize {
            let dims: Vec<usize> = (0..rank).map(|k| 2 + k).collect();
            let len: usize = dims.iter().product();
            let vals: Vec<f64> = Tensor::<f64>::randn([1, 1, 1, len], rank as u64)
                .into_data()
                .into_iter()
                .enumerate()
                .map(|(i, v)| if i < specials.len() { specials[i] } else { v })
                .collect();
            for payload in [
                Payload::F64(vals.clone()),
                Payload::F32(vals.iter().map(|&v| v as f32).collect()),
            ] {
                let t = TensorFile::new(dims.clone(), payload).expect("dims match");
                let mut buf = Vec::new();
                t.write_to(&mut buf).expect("in-memory write");
                let back = TensorFile::read_from(&buf[..]).ok().flatten();
                let same = match (&t.payload, back.as_ref().map(|b| (&b.payload, &b.dims))) {
                    (Payload::F32(a), Some((Payload::F32(b), d))) => {
                        bits_equal_f32(a, b) && *d == dims
                    }
                    (Payload::F64(a), Some((Payload::F64(b), d))) => {
                        bits_equal_f64(a, b) && *d == dims
                    }
                    _ => false,
                };
                if !same {
                    failures.push(format!("tensor file rank {rank} {:?}", t.dtype()));
                }
            }
        }
        let ok = failures.is_empty();
        let detail = if ok {
            String::from("pixel shuffle/unshuffle, tensor file (f32/f64, ranks 1-4, incl. NaN/inf/-0/subnormal) and grouped split/merge all bit-exact")
        } else {
            format!("not bit-exact: {}", failures.join("; "))
        };
        (ok, detail)
    })
}

/// Soft check: SAPA-I < SAPA-B < SAPA-D mean latency.
pub fn bench_ordering(opts: &BenchOptions) -> Check {
    let mut check = timed(9, "benchmark ordering (soft)", 300, || {
        let mut means = Vec::new();
        for name in ["sapa-i", "sapa-b", "sapa-d"] {
            match bench_variant(name, opts) {
                Ok(r) => means.push((name, r.mean_ms.unwrap_or(f64::NAN))),
                Err(e) => return (false, format!("{name}: {e}")),
            }
        }
        let ok = means[0].1 < means[1].1 && means[1].1 < means[2].1;
        let shown: Vec<String> = means
            .iter()
            .map(|(n, m)| format!("{n} {m:.1} ms"))
            .collect();
        let [n, c, h, w] = opts.shape;
        (
            ok,
            format!(
                "{n}x{c}x{h}x{w}, s={}, {} iters: {}",
                opts.ratio,
                opts.iters,
                shown.join(" < ")
            ),
        )
    });
    check.soft = true;
    check
}

/// Criteria 1-8 at full size.
pub fn core_suite() -> Vec<Check> {
    vec![
        smooth_window(100),
        detail_window(),
        origin_init(50),
        oracle(50),
        gradients(50),
        cost_model(1000),
        dof_semantics(20),
        round_trips(),
    ]
}
