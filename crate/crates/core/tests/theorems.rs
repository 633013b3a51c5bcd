use sapa_core::{
    nn_upsample, offset_generate, upsample, LinearMap, OffsetDof, OffsetInit, RngSpec, SapaConfig,
    SapaParams, Tensor, Variant,
};

fn constant_decoder(c: usize, h: usize, w: usize, seed: u64) -> (Tensor<f64>, Vec<f64>) {
    let vals: Vec<f64> = Tensor::<f64>::randn([1, 1, 1, c], seed).into_data();
    let v = vals.clone();
    (
        Tensor::from_fn([1, c, h, w], move |_, ch, _, _| v[ch]),
        vals,
    )
}

fn random_params(cfg: &SapaConfig, c: usize, ce: usize, seed: u64) -> SapaParams<f64> {
    let mut params = SapaParams::init(cfg, c, ce, &RngSpec::new(seed));
    if let Some(phi) = params.phi.as_mut() {
        *phi = LinearMap::seeded(phi.rows(), phi.cols(), &RngSpec::new(seed ^ 0xabc));
    }
    params
}

#[test]
fn constant_decoder_gives_uniform_kernels_and_constant_output() {
    for variant in [Variant::I, Variant::B, Variant::D] {
        for trial in 0..20u64 {
            let cfg = SapaConfig {
                embed_dim: 8,
                ..SapaConfig::for_variant(variant)
            };
            let (dec, vals) = constant_decoder(8, 8, 8, trial);
            let enc = Tensor::<f64>::randn([1, 8, 16, 16], 1000 + trial).map(|v| 3.0 * v);
            let params = random_params(&cfg, 8, 8, trial);
            let up = upsample(&dec, &enc, &params, &cfg).unwrap();
            let s = cfg.points() as f64;
            assert!(
                up.kernels
                    .weights
                    .iter()
                    .all(|w| (w - 1.0 / s).abs() < 1e-6),
                "{variant:?} trial {trial}"
            );
            for ch in 0..8 {
                assert!(up
                    .output
                    .plane(0, ch)
                    .iter()
                    .all(|v| (v - vals[ch]).abs() < 1e-6));
            }
        }
    }
}

#[test]
fn detail_window_output_converges_to_matching_cluster() {
    let a = [1.0f64, -0.5, 0.25, 0.8];
    let b = [-0.6f64, 0.9, -0.4, 0.3];
    let dec = Tensor::from_fn([1, 4, 6, 6], |_, c, _, j| if j < 3 { a[c] } else { b[c] });
    let norm_ab = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
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
    // Output (5, 5) sits on low-res (2, 2), whose window spans both clusters.
    let mut last = f64::INFINITY;
    for tau in [1.0, 2.0, 5.0, 10.0, 20.0] {
        let enc = Tensor::from_fn([1, 4, 12, 12], |_, c, _, _| tau * a[c]);
        let out = upsample(&dec, &enc, &params, &cfg).unwrap().output;
        let err = (0..4)
            .map(|c| (out.at(0, c, 5, 5) - a[c]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < last, "tau {tau}: {err} !< {last}");
        last = err;
    }
    assert!(last < 1e-3 * norm_ab);
}

#[test]
fn origin_init_equals_nearest_neighbour() {
    for seed in 0..20u64 {
        for dof in [OffsetDof::One, OffsetDof::RatioSquared] {
            let cfg = SapaConfig {
                embed_dim: 4,
                groups: 2,
                offset_dof: dof,
                ..SapaConfig::sapa_d()
            };
            let dec = Tensor::<f64>::randn([2, 4, 5, 6], seed);
            let enc = Tensor::<f64>::randn([2, 6, 10, 12], seed + 50);
            let params = SapaParams::init(&cfg, 4, 6, &RngSpec::new(seed));
            let out = upsample(&dec, &enc, &params, &cfg).unwrap().output;
            assert!(out.max_abs_diff(&nn_upsample(&dec, 2).unwrap()) < 1e-6);
        }
    }
}

#[test]
fn grid_init_with_square_points_matches_window_variant() {
    for seed in 0..10u64 {
        let k = 3;
        let d_cfg = SapaConfig {
            variant: Variant::D,
            num_points: k * k,
            kernel_size: k,
            groups: 1,
            embed_dim: 5,
            offset_dof: OffsetDof::One,
            offset_init: OffsetInit::Grid,
            ..SapaConfig::sapa_d()
        };
        let b_cfg = SapaConfig {
            variant: Variant::B,
            ..d_cfg.clone()
        };
        let dec = Tensor::<f64>::randn([1, 4, 6, 5], seed);
        let enc = Tensor::<f64>::randn([1, 3, 12, 10], seed + 7);
        let d_params = SapaParams::init(&d_cfg, 4, 3, &RngSpec::new(seed));
        let b_params = SapaParams {
            phi: None,
            ..d_params.clone()
        };
        let od = upsample(&dec, &enc, &d_params, &d_cfg).unwrap().output;
        let ob = upsample(&dec, &enc, &b_params, &b_cfg).unwrap().output;
        assert!(od.max_abs_diff(&ob) < 1e-12);
    }
}

#[test]
fn dof_one_siblings_share_coordinates() {
    for seed in 0..5u64 {
        let cfg = SapaConfig {
            offset_dof: OffsetDof::One,
            groups: 2,
            num_points: 4,
            ..SapaConfig::sapa_d()
        };
        let dec = Tensor::<f64>::randn([1, 4, 4, 4], seed);
        let phi = LinearMap::seeded(cfg.offset_channels(), 4, &RngSpec::new(seed));
        let sets = offset_generate(&dec, &phi, &cfg).unwrap().coord_sets();
        for set in &sets[0] {
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(set.at(i, j), set.at(i / 2 * 2, j / 2 * 2));
                }
            }
        }
    }
}

#[test]
fn dof_ratio_squared_siblings_differ() {
    for seed in 0..20u64 {
        let cfg = SapaConfig {
            offset_dof: OffsetDof::RatioSquared,
            num_points: 4,
            groups: 1,
            ..SapaConfig::sapa_d()
        };
        let dec = Tensor::<f64>::randn([1, 4, 4, 4], seed);
        let phi = LinearMap::seeded(cfg.offset_channels(), 4, &RngSpec::new(seed));
        let sets = offset_generate(&dec, &phi, &cfg).unwrap().coord_sets();
        let set = &sets[0][0];
        let differs = (0..4)
            .any(|li| (0..4).any(|lj| set.at(2 * li, 2 * lj) != set.at(2 * li + 1, 2 * lj + 1)));
        assert!(differs, "seed {seed}");
    }
}

#[test]
fn outputs_lie_in_convex_hull_and_weights_sum_to_one() {
    for variant in [Variant::I, Variant::B] {
        let cfg = SapaConfig {
            kernel_size: 3,
            embed_dim: 4,
            ..SapaConfig::for_variant(variant)
        };
        let dec = Tensor::<f64>::randn([1, 3, 5, 5], 11);
        let enc = Tensor::<f64>::randn([1, 3, 10, 10], 12);
        let params = random_params(&cfg, 3, 3, 5);
        let up = upsample(&dec, &enc, &params, &cfg).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let w = up.kernels.weights_at(0, i, j, 0);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for ch in 0..3 {
                    let (li, lj) = ((i / 2) as isize, (j / 2) as isize);
                    let mut window = Vec::new();
                    for u in -1..=1isize {
                        for v in -1..=1isize {
                            let r = (li + u).clamp(0, 4) as usize;
                            let c = (lj + v).clamp(0, 4) as usize;
                            window.push(dec.at(0, ch, r, c));
                        }
                    }
                    let lo = window.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let o = up.output.at(0, ch, i, j);
                    assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }
}

#[test]
fn window_variants_are_translation_equivariant_in_the_interior() {
    for variant in [Variant::I, Variant::B] {
        let cfg = SapaConfig {
            kernel_size: 3,
            embed_dim: 4,
            ..SapaConfig::for_variant(variant)
        };
        let dec = Tensor::<f64>::randn([1, 3, 9, 9], 21);
        let enc = Tensor::<f64>::randn([1, 3, 18, 18], 22);
        let shift_dec = Tensor::from_fn([1, 3, 9, 9], |b, c, i, j| {
            dec.at(b, c, (i + 1).min(8), (j + 1).min(8))
        });
        let shift_enc = Tensor::from_fn([1, 3, 18, 18], |b, c, i, j| {
            enc.at(b, c, (i + 2).min(17), (j + 2).min(17))
        });
        let params = random_params(&cfg, 3, 3, 9);
        let out = upsample(&dec, &enc, &params, &cfg).unwrap().output;
        let shifted = upsample(&shift_dec, &shift_enc, &params, &cfg)
            .unwrap()
            .output;
        // Stay two low-res cells away from every border.
        for c in 0..3 {
            for i in 4..12 {
                for j in 4..12 {
                    assert!((shifted.at(0, c, i, j) - out.at(0, c, i + 2, j + 2)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn sapa_i_rejects_mismatched_channels() {
    let dec = Tensor::<f64>::randn([1, 3, 4, 4], 0);
    let enc = Tensor::<f64>::randn([1, 5, 8, 8], 1);
    let err = sapa_core::sapa_i_forward(&dec, &enc, &SapaConfig::sapa_i()).unwrap_err();
    assert!(err.to_string().contains("inapplicable"));
}
