use kfs::factorization::{DecoderBank, KfsModel, LatentCodebook};
use kfs::formats::{self, MeanEntry};
use kfs::nets::{DecoderKind, DecoderSpec};
use kfs::optim::Adam;
use kfs::Tensor;
use proptest::prelude::*;

fn model(classes: usize, codes: usize, decoders: usize, kind: DecoderKind, ch: usize, seed: u64) -> KfsModel<f32> {
    let side = if kind == DecoderKind::LowR { 8 } else { 4 };
    let spec = DecoderSpec::for_image(kind, [ch, side, side]).unwrap();
    let cb = LatentCodebook::gaussian(classes, codes, spec.code_shape, 1.0, seed).unwrap();
    KfsModel::new(cb, DecoderBank::build(&spec, decoders, seed).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn condensed_round_trips_bit_exactly(
        c in 1usize..4, m in 1usize..3, d in 1usize..3, low in any::<bool>(), rgb in any::<bool>(), seed in any::<u64>(),
    ) {
        let kind = if low { DecoderKind::LowR } else { DecoderKind::HighR };
        let k = model(c, m, d, kind, if rgb { 3 } else { 1 }, seed);
        let bytes = formats::encode_condensed(&k);
        let back = formats::decode_condensed::<f32>(&bytes).unwrap();
        prop_assert_eq!(formats::encode_condensed(&back), bytes);
        prop_assert!(formats::decode_condensed::<f64>(&formats::encode_condensed(&k)).is_err());
    }

    #[test]
    fn truncated_or_flipped_containers_error(cut in 0usize..400, flip in 0usize..400, seed in any::<u64>()) {
        let bytes = formats::encode_condensed(&model(2, 1, 1, DecoderKind::HighR, 1, seed));
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(formats::decode_condensed::<f32>(&bytes[..cut]).is_err());
        let mut b = bytes.clone();
        let i = flip % b.len();
        b[i] ^= 1;
        prop_assert!(formats::decode_condensed::<f32>(&b).is_err());
    }

    #[test]
    fn means_round_trip(c in 1usize..5, e in 1usize..9, seed in any::<u64>()) {
        let mut r = kfs::rng::stream("fmt", seed);
        let entry = MeanEntry {
            dataset_hash: [seed as u8; 32],
            cfg_digest: [7; 32],
            seed,
            counts: (0..c).map(|i| i + 1).collect(),
            means: Tensor::from_fn(&[c, e], |_| kfs::rng::normal(&mut r, 1.0)),
        };
        prop_assert_eq!(formats::decode_means(&formats::encode_means(&entry)).unwrap(), entry);
    }

    #[test]
    fn optimizer_state_round_trips(steps in 0usize..4, seed in any::<u64>()) {
        let mut p = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32);
        let q_shape = [4usize];
        let mut q = Tensor::<f32>::zeros(&q_shape);
        let mut opt = Adam::new(&[p.shape(), &q_shape], vec![0.1, 0.01]).unwrap();
        let mut r = kfs::rng::stream("fmt.adam", seed);
        for _ in 0..steps {
            let g = [Tensor::from_fn(&[3, 2], |_| kfs::rng::normal(&mut r, 1.0)), Tensor::full(&[4], 0.5)];
            opt.update(&mut [&mut p, &mut q], &g).unwrap();
        }
        prop_assert_eq!(formats::decode_adam::<f32>(&formats::encode_adam(&opt)).unwrap(), opt);
    }
}
