use fgaa_core::data::{format_dota, parse_dota, Annotation, DotaObject, DOTA_V1_5};
use fgaa_core::CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_annotation(seed: u64) -> Annotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(0..12);
    let objects = (0..n)
        .map(|_| {
            // three decimals, as the devkit writes them
            let quad =
                std::array::from_fn(|_| (rng.gen_range(0.0..4000.0_f64) * 1000.0).round() / 1000.0);
            DotaObject {
                quad,
                category: DOTA_V1_5[rng.gen_range(0..DOTA_V1_5.len())].to_string(),
                difficult: rng.gen_bool(0.2),
            }
        })
        .collect();
    Annotation {
        image_id: String::new(),
        objects,
        imagesource: rng.gen_bool(0.5).then(|| "GoogleEarth".to_string()),
        gsd: rng
            .gen_bool(0.5)
            .then(|| format!("{:.3}", rng.gen_range(0.1..1.0))),
    }
}

#[test]
fn hundred_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100 {
        let ann = random_annotation(seed);
        let path = dir.path().join(format!("P{seed:04}.txt"));
        std::fs::write(&path, format_dota(&ann)).unwrap();
        let back = parse_dota(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.objects.len(), ann.objects.len());
        for (a, b) in ann.objects.iter().zip(&back.objects) {
            assert_eq!(a.category, b.category);
            assert_eq!(a.difficult, b.difficult);
            for (x, y) in a.quad.iter().zip(&b.quad) {
                assert!((x - y).abs() <= 1e-3);
            }
        }
        assert_eq!(back.imagesource, ann.imagesource);
        assert_eq!(back.gsd, ann.gsd);
    }
}

#[test]
fn malformed_lines_name_line_and_token() {
    let cases: [(&str, usize, &str); 4] = [
        (
            "0 0 1 0 1 1 0 1 plane 0\n0 0 1 0 1 1 0 plane 0\n",
            2,
            "0 0 1 0 1 1 0 plane 0",
        ),
        ("imagesource:x\n\n0 0 1 0 1 q 0 1 plane 0\n", 3, "q"),
        ("0 0 1 0 1 1 0 1 plane 2\n", 1, "2"),
        (
            "0 0 1 0 1 1 0 1 plane 0\n0 0 1 0 inf 1 0 1 ship 0\n",
            2,
            "inf",
        ),
    ];
    for (text, line, token) in cases {
        match parse_dota(text) {
            Err(CoreError::Parse {
                line: l, token: t, ..
            }) => {
                assert_eq!((l, t.as_str()), (line, token), "{text:?}");
            }
            other => panic!("{text:?}: {other:?}"),
        }
    }
}
