//! Writes seed inputs for the fuzz targets.
//!
//! `cargo run -p kfs-core --example fuzz_seeds -- fuzz/corpus`

use std::fs;
use std::path::Path;

use kfs::data::{encode_idx, encode_raw_f32};
use kfs::factorization::{DecoderBank, KfsModel, LatentCodebook};
use kfs::formats::{self, MeanEntry, Rgb8};
use kfs::nets::{DecoderKind, DecoderSpec};
use kfs::optim::Adam;
use kfs::Tensor;

fn put(root: &Path, target: &str, name: &str, bytes: &[u8]) {
    let dir = root.join(target);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root = std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into());
    let root = Path::new(&root);

    let pixels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i * 9) as u8).collect();
    put(root, "idx_images", "two_4x4", &encode_idx(&[2, 4, 4], &pixels));
    put(root, "idx_images", "one_rgb_2x2", &encode_idx(&[1, 3, 2, 2], &pixels[..12]));
    put(root, "idx_labels", "three", &encode_idx(&[3], &[0, 7, 9]));

    let mut record = vec![3u8];
    record.extend((0..3072).map(|i| (i % 251) as u8));
    put(root, "cifar10", "one_record", &record);

    let t = Tensor::<f32>::from_fn(&[2, 1, 2, 2], |i| i as f32 / 8.0);
    put(root, "raw_f32", "two_gray_2x2", &encode_raw_f32(&t));

    for (name, kind, side, ch) in [("low_r_rgb", DecoderKind::LowR, 8, 3), ("high_r_gray", DecoderKind::HighR, 4, 1)] {
        let spec = DecoderSpec::for_image(kind, [ch, side, side]).unwrap();
        let cb = LatentCodebook::<f32>::gaussian(2, 1, spec.code_shape, 1.0, 0).unwrap();
        let model = KfsModel::new(cb, DecoderBank::build(&spec, 1, 0).unwrap()).unwrap();
        put(root, "condensed", name, &formats::encode_condensed(&model));
    }

    let entry = MeanEntry {
        dataset_hash: [1; 32],
        cfg_digest: [2; 32],
        seed: 5,
        counts: vec![3, 4],
        means: Tensor::from_fn(&[2, 3], |i| i as f32),
    };
    put(root, "means", "two_by_three", &formats::encode_means(&entry));

    let mut p = Tensor::<f32>::full(&[2], 1.0);
    let mut opt = Adam::new(&[p.shape()], vec![0.1]).unwrap();
    opt.update(&mut [&mut p], &[Tensor::full(&[2], 0.5)]).unwrap();
    put(root, "optimizer_state", "one_step", &formats::encode_adam(&opt));

    let mut img = Rgb8::new(2, 2);
    img.paste(&Tensor::<f32>::from_fn(&[3, 2, 2], |i| i as f32 / 12.0), 0, 0).unwrap();
    put(root, "ppm", "rgb_2x2", &img.encode_ppm());
    put(root, "ppm", "comment", b"P6\n# c\n1 1\n255\n\x01\x02\x03");

    put(root, "config", "toy", include_bytes!("../../../configs/toy.json"));
    put(root, "config", "digits", include_bytes!("../../../configs/digits-1v8.json"));
}
