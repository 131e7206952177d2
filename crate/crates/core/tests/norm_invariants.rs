use normlab_core::norm::{
    bn_normalize, gn_normalize, AffineParams, BatchNormState, GroupNormConfig, Mode, NormLayer,
    NormVariant,
};
use normlab_core::tensor::group_view;
use normlab_core::{Shape4, Tensor4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape4, seed: u64, scale: f64, offset: f64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| offset + scale * rng.gen_range(-1.0..1.0))
}

fn block_mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gn_blocks_are_standardized(
        n in 1usize..4, g in prop::sample::select(vec![1usize, 2, 4]), per in 1usize..3,
        side in 2usize..5, seed in any::<u64>(), scale in 0.01f64..10.0, offset in -5.0f64..5.0,
    ) {
        let s = Shape4::new(n, g * per, side, side);
        let x = random(s, seed, scale, offset);
        let (y, _) = gn_normalize(&x, &GroupNormConfig::new(g).unwrap()).unwrap();
        let xv = group_view(x, g).unwrap();
        let yv = group_view(y, g).unwrap();
        for i in 0..n {
            for j in 0..g {
                let (_, sigma2) = block_mean_var(xv.block(i, j));
                let (m, v) = block_mean_var(yv.block(i, j));
                prop_assert!(m.abs() <= 1e-10, "mean {m}");
                let want = sigma2 / (sigma2 + 1e-5);
                prop_assert!((v - want).abs() <= 1e-8, "var {v} want {want}");
            }
        }
    }

    #[test]
    fn bn_channels_are_centred(
        n in 2usize..5, c in 1usize..6, side in 1usize..4, seed in any::<u64>(),
        scale in 0.01f64..10.0, offset in -5.0f64..5.0,
    ) {
        let s = Shape4::new(n, c, side, side);
        let x = random(s, seed, scale, offset);
        let mut st = BatchNormState::new(c);
        let (y, _) = bn_normalize(&x, &mut st).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| y.plane(i, ch).to_vec()).collect();
            let (m, _) = block_mean_var(&vals);
            prop_assert!(m.abs() <= 1e-10, "channel {ch} mean {m}");
        }
    }
}

#[test]
fn gn_output_for_a_sample_ignores_the_rest_of_the_batch() {
    let cfg = GroupNormConfig::new(2).unwrap();
    let s = Shape4::new(4, 4, 3, 3);
    let x = random(s, 1, 2.0, 0.5);
    let (full, _) = gn_normalize(&x, &cfg).unwrap();
    for i in 0..4 {
        let single = Tensor4::from_vec(
            Shape4::new(1, 4, 3, 3),
            x.data()[i * 36..(i + 1) * 36].to_vec(),
        )
        .unwrap();
        let (y, _) = gn_normalize(&single, &cfg).unwrap();
        assert_eq!(y.data(), &full.data()[i * 36..(i + 1) * 36]);
    }
    // Replacing the other samples changes nothing bit-wise either.
    let mut other = random(s, 2, 7.0, -3.0);
    other.data_mut()[..36].copy_from_slice(&x.data()[..36]);
    let (y, _) = gn_normalize(&other, &cfg).unwrap();
    assert_eq!(&y.data()[..36], &full.data()[..36]);
}

fn affine_of(c: usize, seed: u64) -> AffineParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = AffineParams::new(c);
    a.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..2.0));
    a.beta.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
    a
}

#[test]
fn extreme_gates_reduce_to_a_single_path() {
    let (c, g) = (4, 2);
    let s = Shape4::new(3, c, 4, 4);
    let x = random(s, 5, 3.0, 1.0);
    let gn = GroupNormConfig::new(g).unwrap();
    let bn = || BatchNormState::new(c);
    let a = affine_of(c, 9);

    let gn_of = |t: &Tensor4| gn_normalize(t, &gn).unwrap().0;
    let bn_of = |t: &Tensor4| bn_normalize(t, &mut bn()).unwrap().0;

    let cases = [
        (NormVariant::GnPlusGnFirst, gn_of(&x), bn_of(&gn_of(&x))),
        (NormVariant::GnPlusBnFirst, gn_of(&bn_of(&x)), bn_of(&x)),
        (NormVariant::GnPlusParallel, gn_of(&x), bn_of(&x)),
    ];
    for (variant, gn_path, bn_path) in cases {
        for (lambda, path) in [(20.0, &gn_path), (-20.0, &bn_path)] {
            let mut layer = NormLayer::new(variant, c, g).unwrap();
            layer.set_mode(Mode::Train);
            *layer.affine_mut() = a.clone();
            *layer.lambda_mut().unwrap() = lambda;
            let (y, _) = layer.forward(&x).unwrap();
            let want = a.apply(path).unwrap();
            let worst = y
                .data()
                .iter()
                .zip(want.data())
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(worst <= 1e-6, "{variant} λ={lambda}: {worst:e}");
        }
    }
}
