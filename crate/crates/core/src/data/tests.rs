use super::*;

fn spec() -> SceneSpec {
    SceneSpec::desk()
}

#[test]
fn generation_is_deterministic() {
    let s = spec();
    assert_eq!(generate_scene(&s, 17), generate_scene(&s, 17));
    assert_ne!(generate_scene(&s, 17).image, generate_scene(&s, 18).image);
    let reseeded = SceneSpec { data_seed: 8, ..spec() };
    assert_ne!(generate_scene(&s, 17).image, generate_scene(&reseeded, 17).image);
}

#[test]
fn sample_shape_and_id() {
    let sample = generate_scene(&spec(), 42);
    assert_eq!(sample.id, "000042");
    assert_eq!(sample.image.shape(), &[3, 96, 128]);
    assert!(sample.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    // Pixels are quantized to 8 bits so PPM storage is lossless.
    assert!(sample.image.data().iter().all(|&v| ((v * 255.0).round() / 255.0 - v).abs() < 1e-6));
}

#[test]
fn zero_count_range_gives_no_vehicles() {
    let s = SceneSpec { vehicle_count: (0, 0), ..spec() };
    for i in 0..20 {
        assert_eq!(generate_scene(&s, i).vehicles().count(), 0);
    }
}

#[test]
fn mean_vehicle_count_matches_range_midpoint() {
    let s = spec();
    let total: usize = (0..1000).map(|i| generate_scene(&s, i).vehicles().count()).sum();
    let mean = total as f64 / 1000.0;
    assert!((mean - 8.5).abs() <= 0.5, "mean {mean}");
}

#[test]
fn annotations_respect_generator_invariants() {
    let s = spec();
    let mut conditions = std::collections::BTreeSet::new();
    for i in 0..200 {
        let sample = generate_scene(&s, i);
        conditions.insert(sample.condition);
        let ignores: Vec<_> = sample.annotations.iter().filter(|a| a.ignore).collect();
        assert!(ignores.len() <= s.ignore_count.1);
        for a in &sample.annotations {
            assert!(a.bbox.x_min() >= 0.0 && a.bbox.y_min() >= 0.0);
            assert!(a.bbox.x_max() <= 128.0 && a.bbox.y_max() <= 96.0);
        }
        for v in sample.vehicles() {
            assert!((16.0..=40.0).contains(&v.bbox.w), "width {}", v.bbox.w);
            for r in &ignores {
                let inside = v.bbox.x_min() >= r.bbox.x_min()
                    && v.bbox.x_max() <= r.bbox.x_max()
                    && v.bbox.y_min() >= r.bbox.y_min()
                    && v.bbox.y_max() <= r.bbox.y_max();
                assert!(!inside, "vehicle inside ignore region in scene {i}");
            }
        }
    }
    assert_eq!(conditions.len(), 4);
}

#[test]
fn restricted_conditions_are_honoured() {
    let s = SceneSpec { conditions: vec![Condition::Night], ..spec() };
    assert!((0..20).all(|i| generate_scene(&s, i).condition == Condition::Night));
}

#[test]
fn spec_validation() {
    assert!(spec().validate().is_ok());
    assert!(SceneSpec { conditions: vec![], ..spec() }.validate().is_err());
    assert!(SceneSpec { occlusion_probability: 1.5, ..spec() }.validate().is_err());
    assert!(SceneSpec { vehicle_size: (16.0, 400.0), ..spec() }.validate().is_err());
}

#[test]
fn condition_text_round_trip() {
    for c in Condition::ALL {
        assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
    }
    assert!("foggy".parse::<Condition>().is_err());
}

mod ppm {
    use super::*;

    #[test]
    fn white_pixel_bytes() {
        let bytes = encode_ppm(&Tensor::full(&[3, 1, 1], 1.0));
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn random_round_trip_within_quantization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::new(vec![3, 7, 5], (0..105).map(|_| rng.random::<f32>()).collect()).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(back.shape(), img.shape());
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1.0 / 255.0, "err {err}");
    }

    #[test]
    fn generated_images_round_trip_exactly() {
        let sample = generate_scene(&spec(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_image_ppm(&path, &sample.image).unwrap();
        assert_eq!(read_image_ppm(&path).unwrap(), sample.image);
    }

    #[test]
    fn header_comments_and_small_maxval() {
        let back = decode_ppm(b"P6\n# comment\n1 1\n# more\n15\n\x0f\x00\x05").unwrap();
        assert_eq!(back.data(), &[1.0, 0.0, 5.0 / 15.0]);
    }

    #[test]
    fn malformed_inputs_are_errors() {
        let good = encode_ppm(&Tensor::full(&[3, 2, 2], 0.5));
        for cut in 0..good.len() {
            assert!(decode_ppm(&good[..cut]).is_err(), "cut {cut}");
        }
        assert!(decode_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(decode_ppm(b"P6\n0 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n1000\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\nx 1\n255\n\x00\x00\x00").is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_image_ppm(std::path::Path::new("/nonexistent.ppm")), Err(DataError::Io { .. })));
    }
}

mod csv_files {
    use super::*;
    use crate::geom::BBox;

    #[test]
    fn empty_dataset_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_annotations(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim_end(), "id,x_min,y_min,width,height,ignore,condition");
        assert!(read_annotations(&path).unwrap().is_empty());
    }

    #[test]
    fn round_trip_to_hundredths() {
        let samples: Vec<Sample> = (0..30).map(|i| generate_scene(&spec(), i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_annotations(&path, &samples).unwrap();
        let rows = read_annotations(&path).unwrap();
        let expected: Vec<_> = samples.iter().flat_map(|s| s.annotations.iter().map(move |a| (s, a))).collect();
        assert_eq!(rows.len(), expected.len());
        for (row, (s, a)) in rows.iter().zip(expected) {
            assert_eq!(row.id, s.id);
            assert_eq!(row.condition, s.condition);
            assert_eq!(row.annotation.ignore, a.ignore);
            let (p, q) = (row.annotation.bbox, a.bbox);
            for (x, y) in [(p.x_min(), q.x_min()), (p.y_min(), q.y_min()), (p.w, q.w), (p.h, q.h)] {
                assert!((x - y).abs() <= 0.005 + 1e-9);
            }
        }
    }

    #[test]
    fn ignore_flag_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "id,x_min,y_min,width,height,ignore,condition\nimg,1.00,2.00,10.50,4.00,1,rainy\n").unwrap();
        let rows = read_annotations(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].annotation.ignore);
        assert_eq!(rows[0].annotation.bbox, BBox::from_corners(1.0, 2.0, 11.5, 6.0));
        assert_eq!(rows[0].condition, Condition::Rainy);
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "id,x_min,y_min,width,height,ignore,condition\na,1,2,3,4,0,sunny\nb,1,zz,3,4,0,sunny\n").unwrap();
        match read_annotations(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "id,x_min,y_min,width,height,condition\n").unwrap();
        assert!(matches!(read_annotations(&path), Err(DataError::Parse { .. })));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let s = spec();
        let samples: Vec<Sample> = (0..6).map(|i| generate_scene(&s, i)).collect();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &s, &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.spec, s);
        assert_eq!(loaded.ids().collect::<Vec<_>>(), samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>());
        for original in &samples {
            let back = loaded.get(&original.id).unwrap();
            assert_eq!(back.image, original.image);
            assert_eq!(back.condition, original.condition);
            assert_eq!(back.annotations.len(), original.annotations.len());
        }
    }
}

mod split {
    use super::*;

    #[test]
    fn two_thirds_of_three_hundred() {
        let items: Vec<u32> = (0..300).collect();
        let (train, val) = split_dataset(&items, 2.0 / 3.0, 11);
        assert_eq!((train.len(), val.len()), (200, 100));
        let mut all: Vec<u32> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
    }

    #[test]
    fn same_seed_same_split() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(split_dataset(&items, 0.5, 3), split_dataset(&items, 0.5, 3));
        assert_ne!(split_dataset(&items, 0.5, 3), split_dataset(&items, 0.5, 4));
    }
}
