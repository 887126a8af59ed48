use super::*;
use proptest::prelude::*;

fn ramp(h: usize, w: usize) -> Tensor {
    Tensor::from_fn([3, h, w], |k| {
        let (c, i, j) = (k / (h * w), (k / w) % h, k % w);
        (0.1 * c as f32 + 0.01 * i as f32 + 0.003 * j as f32).min(1.0)
    })
}

#[test]
fn resize_pad_examples() {
    let p = resize_pad(&Tensor::zeros([3, 768, 1024]), 512).unwrap();
    assert_eq!(p.image.shape(), &[3, 512, 512]);
    assert_eq!((p.mask.height, p.mask.width), (384, 512));

    let x = ramp(512, 512);
    let p = resize_pad(&x, 512).unwrap();
    assert_eq!(p.image, x);
    assert!(p.mask.is_empty_pad());

    let p = resize_pad(&Tensor::ones([3, 128, 256]), 512).unwrap();
    assert_eq!((p.mask.height, p.mask.width), (256, 512));
    let d = p.image.data();
    assert_eq!(d[255 * 512 + 100], 1.0);
    assert_eq!(d[256 * 512 + 100], 0.0);
    assert_eq!(d[2 * 512 * 512 + 511 * 512 + 511], 0.0);

    assert!(resize_pad(&Tensor::zeros([3, 4, 4]), 0).is_err());
    assert!(resize_pad(&Tensor::zeros([4, 4]), 8).is_err());
}

#[test]
fn bilinear_matches_direct_interpolation() {
    // oracle: explicit half-pixel bilinear formula per output pixel
    let x = ramp(5, 7);
    let y = resize_bilinear(&x, 9, 4).unwrap();
    for c in 0..3 {
        for i in 0..9 {
            for j in 0..4 {
                let sy = ((i as f64 + 0.5) * 5.0 / 9.0 - 0.5).clamp(0.0, 4.0);
                let sx = ((j as f64 + 0.5) * 7.0 / 4.0 - 0.5).clamp(0.0, 6.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(4), (x0 + 1).min(6));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |a: usize, b: usize| x.data()[c * 35 + a * 7 + b] as f64;
                let want = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                assert!((y.data()[c * 36 + i * 4 + j] as f64 - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn constant_images_stay_constant_under_resize() {
    let y = resize_bilinear(&Tensor::full([3, 13, 9], 0.4), 32, 17).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
}

#[test]
fn crop_and_pad_to_multiple() {
    let x = ramp(5, 7);
    let p = pad_to_multiple(&x, 4).unwrap();
    assert_eq!(p.image.shape(), &[3, 8, 8]);
    assert_eq!(crop(&p.image, 5, 7).unwrap(), x);
    assert!(crop(&x, 6, 7).is_err());
}

#[test]
fn apply_style_examples() {
    let x = Tensor::from_slice([3, 1, 1], &[0.5f32, 0.9, 0.2]).unwrap();
    assert_eq!(apply_style(&x, &SyntheticStyle::identity("id")).unwrap(), x);
    let sq = SyntheticStyle { name: "sq".into(), gamma: 2.0, gain: [1.0; 3], lift: 0.0 };
    assert!((apply_style(&x, &sq).unwrap().data()[0] - 0.25).abs() < 1e-7);
    let hot = SyntheticStyle { name: "hot".into(), gamma: 1.0, gain: [1.2; 3], lift: 0.0 };
    assert_eq!(apply_style(&x, &hot).unwrap().data()[1], 1.0);
    let bad = SyntheticStyle { gamma: 0.0, ..sq };
    assert!(apply_style(&x, &bad).is_err());
}

#[test]
fn png_round_trip_is_exact_on_quantized_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = quantize_tensor(&synthetic_image(&mut rng, 16));
    assert_eq!(decode_png(&encode_png(&x).unwrap()).unwrap(), x);
    assert!(decode_png(b"not a png").is_err());
}

#[test]
fn synthetic_dataset_counts_and_determinism() {
    let styles = default_styles(3);
    let a = make_synthetic_dataset(500, &styles, 7).unwrap();
    assert_eq!(a.total_samples(), 1500);
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (1200, 150, 150));
    assert_eq!((a.train.sources.len(), a.val.sources.len(), a.test.sources.len()), (400, 50, 50));
    let b = make_synthetic_dataset(500, &styles, 7).unwrap();
    assert_eq!(a.manifest, b.manifest);
    for (x, y) in a.test.samples.iter().zip(&b.test.samples) {
        assert_eq!((&x.id, x.task), (&y.id, y.task));
        assert_eq!(x.target.data(), y.target.data());
        assert_eq!(x.source.data(), y.source.data());
    }
    let c = make_synthetic_dataset(500, &styles, 8).unwrap();
    assert_ne!(a.test.samples[0].source.data(), c.test.samples[0].source.data());
}

#[test]
fn synthetic_targets_follow_the_oracle() {
    let styles = default_styles(3);
    let ds = make_synthetic_dataset(10, &styles, 1).unwrap();
    for s in &ds.train.samples {
        let want = quantize_tensor(&apply_style(&s.source, &styles[s.task]).unwrap());
        assert_eq!(s.target.data(), want.data());
        assert!(s.source.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let baseline = ds.train.identity_psnr().unwrap();
    assert_eq!(baseline.len(), 3);
    assert!(baseline.iter().all(|p| p.is_finite() && *p < 100.0), "{baseline:?}");
}

#[test]
fn identity_style_baseline_is_capped() {
    let ds = make_synthetic_dataset(3, &[SyntheticStyle::identity("same")], 0).unwrap();
    assert_eq!(ds.train.identity_psnr().unwrap(), vec![100.0]);
}

#[test]
fn directory_round_trip_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let styles = default_styles(3);
    let ds = make_synthetic_dataset(10, &styles, 3).unwrap();
    ds.write(dir.path()).unwrap();
    let tasks: Vec<String> = styles.iter().map(|s| s.name.clone()).collect();
    let loaded = load_paired_dir(dir.path(), &tasks).unwrap();
    assert_eq!(loaded.len(), 30);
    let again = load_paired_dir(dir.path(), &tasks).unwrap();
    let order = |d: &Dataset| d.samples.iter().map(|s| (s.id.clone(), s.task)).collect::<Vec<_>>();
    assert_eq!(order(&loaded), order(&again));

    let test = load_split(dir.path(), Split::Test).unwrap();
    assert_eq!(test.len(), ds.test.len());
    for (a, b) in test.samples.iter().zip(&ds.test.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.target.data(), b.target.data());
    }
    assert_eq!(discover_tasks(dir.path()).unwrap(), tasks);

    let victim = dir.path().join("warm").join(format!("{}.png", loaded.samples[0].id));
    std::fs::remove_file(&victim).unwrap();
    match load_paired_dir(dir.path(), &tasks) {
        Err(Error::MissingFile(p)) => assert_eq!(p, victim),
        other => panic!("expected a missing file error, got {other:?}"),
    }
    std::fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(matches!(load_split(dir.path(), Split::Test), Err(Error::Dataset(_))));
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_png(&dir.path().join("source/a.png"), &Tensor::zeros([3, 4, 4])).unwrap();
    save_png(&dir.path().join("t/a.png"), &Tensor::zeros([3, 4, 5])).unwrap();
    assert!(matches!(load_paired_dir(dir.path(), &["t".into()]), Err(Error::Dataset(_))));
    assert!(load_paired_dir(&dir.path().join("nowhere"), &["t".into()]).is_err());
}

#[test]
fn preprocess_pads_and_records_masks() {
    let mut ds = make_synthetic_dataset(2, &default_styles(1), 0).unwrap().train;
    ds = ds.restrict_ids(&[ds.sources[0].0.clone()]);
    let p = preprocess(&ds, 32).unwrap();
    assert_eq!(p.image_shape().unwrap(), vec![3, 32, 32]);
    assert_eq!(p.samples[0].mask, PadMask { height: 32, width: 32, edge: 32 });
}

fn tiny_dataset(n: usize) -> Arc<Dataset> {
    Arc::new(make_synthetic_dataset_sized(n, &default_styles(2), 0, 8).unwrap().train)
}

#[test]
fn paired_batches_are_aligned_and_cover_each_epoch() {
    let ds = tiny_dataset(10);
    let n = ds.len();
    let s = BatchSampler::new(ds.clone(), 3, 11, SampleMode::Paired).unwrap();
    assert_eq!(s.batches_per_epoch(), n.div_ceil(3));
    let mut seen = Vec::new();
    for step in 0..s.batches_per_epoch() as u64 {
        let b = s.batch(step).unwrap();
        for (k, (id, &task)) in b.ids.iter().zip(&b.tasks).enumerate() {
            let sample = ds.samples.iter().find(|x| &x.id == id && x.task == task).unwrap();
            assert_eq!(b.source.batch_item(k).unwrap().data(), sample.source.data());
            assert_eq!(b.target.batch_item(k).unwrap().data(), sample.target.data());
        }
        seen.extend(s.indices(step).unwrap().1);
    }
    seen.sort();
    assert_eq!(seen, (0..n).collect::<Vec<_>>());
    let next_epoch: Vec<usize> = (0..s.batches_per_epoch() as u64).flat_map(|k| s.indices(k + s.batches_per_epoch() as u64).unwrap().1).collect();
    let first: Vec<usize> = (0..s.batches_per_epoch() as u64).flat_map(|k| s.indices(k).unwrap().1).collect();
    assert_ne!(first, next_epoch);
}

#[test]
fn unpaired_streams_are_independent() {
    let ds = tiny_dataset(20);
    let a = BatchSampler::new(ds.clone(), 4, 5, SampleMode::Unpaired).unwrap();
    // the source stream is unaffected by the size of the target pool
    let fewer = Arc::new(ds.restrict_tasks(&[0]).unwrap());
    let b = BatchSampler::new(fewer, 4, 5, SampleMode::Unpaired).unwrap();
    for step in 0..6 {
        assert_eq!(a.indices(step).unwrap().0, b.indices(step).unwrap().0);
    }
    let (src, tgt) = a.indices(0).unwrap();
    assert_eq!(src.len(), tgt.len());
    let batch = a.batch(0).unwrap();
    assert_eq!(batch.source.shape(), batch.target.shape());
    assert!(BatchSampler::new(ds.clone(), 0, 5, SampleMode::Paired).is_err());
    assert!(BatchSampler::new(ds.clone(), ds.len() + 1, 5, SampleMode::Paired).is_err());
    assert!(BatchSampler::new(Arc::new(Dataset::default()), 1, 5, SampleMode::Paired).is_err());
}

#[test]
fn sample_batches_is_reproducible() {
    let ds = tiny_dataset(10);
    let ids = |seed| -> Vec<Vec<String>> {
        sample_batches(ds.clone(), 4, seed, SampleMode::Paired).unwrap().take(9).map(|b| b.unwrap().ids).collect()
    };
    assert_eq!(ids(1), ids(1));
    assert_ne!(ids(1), ids(2));
}

#[test]
fn restrict_tasks_renumbers() {
    let ds = tiny_dataset(10);
    let r = ds.restrict_tasks(&[1]).unwrap();
    assert_eq!(r.tasks, vec![ds.tasks[1].clone()]);
    assert!(r.samples.iter().all(|s| s.task == 0));
    assert_eq!(r.len(), ds.len() / 2);
    assert!(ds.restrict_tasks(&[2]).is_err());
}

proptest! {
    #[test]
    fn resize_pad_preserves_aspect(h in 1usize..300, w in 1usize..300, edge in 1usize..80) {
        let p = resize_pad(&Tensor::zeros([1, h, w]), edge).unwrap();
        let (nh, nw) = (p.mask.height, p.mask.width);
        prop_assert_eq!(nh.max(nw), edge);
        prop_assert_eq!(p.image.shape(), &[1, edge, edge]);
        // the shorter edge is the rounded exact ratio
        if h >= w {
            prop_assert!((nw as f64 - w as f64 * edge as f64 / h as f64).abs() <= 0.5 + 1e-9 || nw == 1);
        } else {
            prop_assert!((nh as f64 - h as f64 * edge as f64 / w as f64).abs() <= 0.5 + 1e-9 || nh == 1);
        }
    }

    #[test]
    fn apply_style_is_monotone(a in 0.0f32..1.0, b in 0.0f32..1.0, gamma in 0.2f64..3.0,
                               gain in 0.1f64..2.0, lift in 0.0f64..0.5) {
        let s = SyntheticStyle { name: "s".into(), gamma, gain: [gain; 3], lift };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let x = Tensor::from_slice([3, 1, 2], &[lo, hi, lo, hi, lo, hi]).unwrap();
        let y = apply_style(&x, &s).unwrap();
        prop_assert!(y.data()[0] <= y.data()[1]);
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batch_indices_are_a_pure_function(len in 1usize..50, batch_frac in 0.0f64..1.0, seed in 0u64..1000, step in 0u64..200) {
        let batch = ((len as f64 * batch_frac) as usize).clamp(1, len);
        let a = batch_indices(len, batch, seed, 1, step).unwrap();
        prop_assert_eq!(&a, &batch_indices(len, batch, seed, 1, step).unwrap());
        prop_assert!(!a.is_empty() && a.len() <= batch && a.iter().all(|&i| i < len));
        let per_epoch = len.div_ceil(batch) as u64;
        let epoch = step / per_epoch;
        let mut all: Vec<usize> = (epoch * per_epoch..(epoch + 1) * per_epoch)
            .flat_map(|s| batch_indices(len, batch, seed, 1, s).unwrap()).collect();
        all.sort();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }
}
