use sapa_core::grad::relative_error;
use sapa_core::reference::{random_case, sapa_forward, CaseLimits};
use sapa_core::{upsample, Variant};

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[test]
fn forwards_match_naive_reference() {
    for variant in [Variant::I, Variant::B, Variant::D] {
        for seed in 0..50u64 {
            let case = random_case(variant, seed, CaseLimits::ORACLE);
            let fast = upsample(&case.decoder, &case.encoder, &case.params, &case.cfg)
                .unwrap()
                .output;
            let slow = sapa_forward(&case.decoder, &case.encoder, &case.params, &case.cfg);
            assert_eq!(fast.dims(), slow.dims());
            let err = max_rel_err(fast.data(), slow.data());
            assert!(
                err < 1e-5,
                "{variant:?} seed {seed}: rel err {err:.3e} cfg {:?}",
                case.cfg
            );
        }
    }
}

#[test]
fn single_precision_tracks_the_reference() {
    for variant in [Variant::I, Variant::B, Variant::D] {
        for seed in 0..10u64 {
            let case = random_case(variant, seed, CaseLimits::ORACLE);
            let params = sapa_core::SapaParams {
                mx: case.params.mx.iter().map(|m| m.cast()).collect(),
                my: case.params.my.iter().map(|m| m.cast()).collect(),
                phi: case.params.phi.as_ref().map(|m| m.cast()),
            };
            let out = upsample(
                &case.decoder.cast::<f32>(),
                &case.encoder.cast::<f32>(),
                &params,
                &case.cfg,
            )
            .unwrap();
            let slow = sapa_forward(&case.decoder, &case.encoder, &case.params, &case.cfg);
            let out: Vec<f64> = out.output.data().iter().map(|&v| v as f64).collect();
            let diff = out
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-3, "{variant:?} seed {seed}: abs diff {diff:.3e}");
        }
    }
}
