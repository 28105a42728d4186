use mgcd::io::images::{to_byte, to_unit};
use mgcd::io::RunConfig;
use mgcd::langevin::{run_chain_masked, LangevinConfig};
use mgcd::network::{NetworkSpec, ParamSet, Reference};
use mgcd::pyramid::{downscale, downscale_observed, upscale, GridPyramid};
use mgcd::tensor::Shape;
use mgcd::Tensor;
use proptest::prelude::*;

fn tensor(shape: Shape, values: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, values).unwrap()
}

fn image(max_side_exp: u32) -> impl Strategy<Value = (usize, Tensor<f64>)> {
    (1usize..=3, 1u32..=max_side_exp, 1usize..=3, 1usize..=2).prop_flat_map(|(d_idx, e, c, n)| {
        let d = [2usize, 3, 4][d_idx - 1];
        let side = d.pow(e);
        let shape = Shape::new(n, c, side, side);
        prop::collection::vec(-1.0f64..1.0, shape.len()).prop_map(move |v| (d, tensor(shape, v)))
    })
}

proptest! {
    #[test]
    fn downscale_inverts_upscale((d, y) in image(2)) {
        let back = downscale(&upscale(&y, d).unwrap(), d).unwrap();
        for (a, b) in back.data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pyramid_levels_share_the_mean((d, y) in image(2)) {
        let side = y.shape().h;
        let grids = (side as f64).log(d as f64).round() as usize;
        let p = GridPyramid::build(&y, d, grids).unwrap();
        for level in p.levels() {
            prop_assert!((level.mean() - y.mean()).abs() < 1e-12);
        }
        prop_assert_eq!(p.level(0).shape().h, 1);
    }

    #[test]
    fn observed_downscale_ignores_masked_values((d, y) in image(1), seed in any::<u64>()) {
        let s = y.shape();
        let mask = Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, yy, x| {
            ((seed >> ((n * 7 + yy * 3 + x) % 60)) & 1) as f64
        });
        let scrambled = Tensor::from_fn(s, |n, c, yy, x| if mask.at(n, 0, yy, x) != 0.0 { 42.0 } else { y.at(n, c, yy, x) });
        let a = downscale_observed(&y, &mask, d).unwrap();
        let b = downscale_observed(&scrambled, &mask, d).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn byte_mapping_round_trips(v in any::<u8>()) {
        prop_assert_eq!(to_byte(to_unit(v)), v);
    }

    #[test]
    fn config_text_round_trips(
        batch in 2usize..200, iters in 1usize..5000, lr in 1e-6f64..1.0, steps in 1usize..60,
        delta in 0.001f64..1.0, seed in any::<u64>(), mask in prop::option::of((1usize..8, 1usize..8)),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = batch;
        cfg.train.iterations = iters;
        cfg.train.learning_rate = lr;
        cfg.train.langevin_steps = steps;
        cfg.train.step_size = delta;
        cfg.train.seed = seed;
        cfg.train.mask = mask;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn masked_chain_never_moves_observed_pixels() {
    let spec: NetworkSpec = "1x8x8:conv4k3s1p1,bn,relu,conv4k3s2p1,relu,fc1".parse().unwrap();
    let params = ParamSet::<f32>::init(&spec, 1, 3).unwrap();
    let init = Tensor::from_fn(Shape::new(4, 1, 8, 8), |n, _, y, x| ((n + 3 * y + 5 * x) % 7) as f32 / 7.0 - 0.5);
    let mask = Tensor::from_fn(Shape::new(4, 1, 8, 8), |n, _, y, x| if (2..6).contains(&y) && x > n { 1.0 } else { 0.0 });
    let cfg = LangevinConfig { steps: 20, step_size: 0.3, seed: 9, ..Default::default() };
    let out = run_chain_masked(&params, &Reference::default(), &init, &mask, &cfg).unwrap();
    let mut moved = 0;
    for i in 0..init.len() {
        if mask.data()[i] == 0.0 {
            assert_eq!(out.data()[i].to_bits(), init.data()[i].to_bits());
        } else if out.data()[i] != init.data()[i] {
            moved += 1;
        }
    }
    assert!(moved > 0);
}
