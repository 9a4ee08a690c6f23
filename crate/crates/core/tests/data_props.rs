use attrprior::autodiff::Tensor;
use attrprior::data::{
    generate, load_frame_dataset, write_raw_video, DataError, DatasetKind, SyntheticSpec,
};
use proptest::prelude::*;

fn mean_frame_change(video: &Tensor) -> f64 {
    let s = video.shape();
    let frame = s[1] * s[2];
    let d = video.data();
    let mut total = 0.0;
    for t in 1..s[0] {
        for i in 0..frame {
            total += (d[t * frame + i] - d[(t - 1) * frame + i]).abs();
        }
    }
    total / ((s[0] - 1) * frame) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_reproducible_with_exact_class_counts(
        n in 2usize..20,
        ratio in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let mut spec = SyntheticSpec::sliding_line(n, 12, 6, 8, 0.2, seed);
        spec.positive_ratio = ratio;
        let a = generate(&spec).unwrap();
        prop_assert_eq!(&a, &generate(&spec).unwrap());
        let (neg, pos) = a.class_counts();
        prop_assert_eq!(pos, spec.positive_count());
        prop_assert_eq!(neg + pos, n);
        prop_assert_eq!(a.kind, DatasetKind::Frames);
        for v in &a.instances {
            prop_assert_eq!(v.shape(), &[8, 12, 6][..]);
            prop_assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        let blobs = generate(&SyntheticSpec::blobs(n, 5, 0.3, seed)).unwrap();
        prop_assert_eq!(blobs.kind, DatasetKind::Vectors);
        prop_assert_eq!(&blobs, &generate(&SyntheticSpec::blobs(n, 5, 0.3, seed)).unwrap());
    }

    #[test]
    fn moving_band_changes_more_between_frames_than_a_static_one(seed in any::<u64>()) {
        let ds = generate(&SyntheticSpec::sliding_line(8, 16, 8, 6, 0.01, seed)).unwrap();
        let (mut moving, mut still) = (Vec::new(), Vec::new());
        for (v, &y) in ds.instances.iter().zip(&ds.labels) {
            if y == 0 { moving.push(mean_frame_change(v)) } else { still.push(mean_frame_change(v)) }
        }
        let least_moving = moving.iter().cloned().fold(f64::INFINITY, f64::min);
        let most_still = still.iter().cloned().fold(0.0, f64::max);
        prop_assert!(least_moving > most_still);
    }
}

#[test]
fn raw_videos_round_trip_through_a_labels_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&SyntheticSpec::sliding_line(3, 12, 5, 10, 0.1, 9)).unwrap();
    let mut csv = String::from("video_id,label,relative_path\n");
    for (i, v) in ds.instances.iter().enumerate() {
        write_raw_video(&dir.path().join(format!("v{i}.bin")), v).unwrap();
        csv.push_str(&format!("{},{},v{i}.bin\n", ds.video_ids[i], ds.labels[i]));
    }
    let labels = dir.path().join("labels.csv");
    std::fs::write(&labels, csv).unwrap();
    let loaded = load_frame_dataset(dir.path(), &labels).unwrap();
    assert_eq!(loaded.instances, ds.instances);
    assert_eq!(loaded.labels, ds.labels);
    assert_eq!(loaded.video_ids, ds.video_ids);
}

#[test]
fn out_of_range_frames_are_rescaled() {
    let dir = tempfile::tempdir().unwrap();
    let video = Tensor::new(vec![1, 1, 3], vec![0.0, 127.5, 255.0]);
    write_raw_video(&dir.path().join("a.bin"), &video).unwrap();
    let labels = dir.path().join("labels.csv");
    std::fs::write(&labels, "video_id,label,relative_path\na,1,a.bin\n").unwrap();
    let loaded = load_frame_dataset(dir.path(), &labels).unwrap();
    assert_eq!(loaded.instances[0].data(), &[0.0, 0.5, 1.0]);
}

#[test]
fn bad_rows_are_reported_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let video = Tensor::zeros(&[5, 2, 2]);
    write_raw_video(&dir.path().join("a.bin"), &video).unwrap();
    let labels = dir.path().join("labels.csv");
    std::fs::write(
        &labels,
        "video_id,label,relative_path\na,1,a.bin\nb,2,a.bin\n",
    )
    .unwrap();
    match load_frame_dataset(dir.path(), &labels) {
        Err(DataError::Row { row, .. }) => assert_eq!(row, 3),
        other => panic!("expected a row error, got {other:?}"),
    }
    std::fs::write(&labels, "video_id,label,relative_path\nc,0,missing.bin\n").unwrap();
    assert!(matches!(
        load_frame_dataset(dir.path(), &labels),
        Err(DataError::Row { row: 2, .. })
    ));
}

#[test]
fn empty_labels_file_gives_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.csv");
    std::fs::write(&labels, "video_id,label,relative_path\n").unwrap();
    assert!(load_frame_dataset(dir.path(), &labels).unwrap().is_empty());
}

#[test]
fn impossible_geometry_is_rejected() {
    assert!(generate(&SyntheticSpec::sliding_line(4, 6, 6, 10, 0.1, 0)).is_err());
    assert!(generate(&SyntheticSpec::blobs(0, 3, 0.1, 0)).is_err());
}
