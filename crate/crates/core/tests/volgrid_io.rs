use gpp_core::volgrid::{extract_plane, gpv_paths, load_annotated, save_annotated, save_volume, Axis, Dims, GppAnnotation, Volume};
use gpp_core::Error;
use proptest::prelude::*;

fn volume(nx: usize, ny: usize, nz: usize, voxels: Vec<i16>) -> Volume {
    Volume::new("v", Dims::new(nx, ny, nz).unwrap(), voxels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_then_load_is_identity(
        (nx, ny, nz, voxels) in (1usize..7, 1usize..7, 1usize..9).prop_flat_map(|(x, y, z)| {
            (Just(x), Just(y), Just(z), proptest::collection::vec(any::<i16>(), x * y * z))
        }),
        gppi_seed in any::<usize>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let v = volume(nx, ny, nz, voxels);
        let ann = GppAnnotation::new("v", gppi_seed % nz, "test");
        let stem = dir.path().join("vol");
        save_annotated(&v, &ann, &stem).unwrap();
        let (back, back_ann) = load_annotated(&stem).unwrap();
        prop_assert_eq!(back.voxels(), v.voxels());
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back_ann.map(|a| a.gppi), Some(ann.gppi));
    }

    #[test]
    fn axial_plane_matches_direct_indexing(
        (nx, ny, nz, voxels) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(x, y, z)| {
            (Just(x), Just(y), Just(z), proptest::collection::vec(-2000i16..4000, x * y * z))
        }),
        pick in any::<usize>(),
    ) {
        let v = volume(nx, ny, nz, voxels);
        let z = pick % nz;
        let p = extract_plane(&v, Axis::Axial, z).unwrap();
        for y in 0..ny {
            for x in 0..nx {
                prop_assert_eq!(p.at(y, x), f64::from(v.get(x, y, z)));
            }
        }
    }
}

#[test]
fn truncated_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("vol");
    save_volume(&volume(2, 2, 2, vec![1; 8]), &stem).unwrap();
    let raw = gpv_paths(&stem).1;
    let mut bytes = std::fs::read(&raw).unwrap();
    bytes.pop();
    std::fs::write(&raw, bytes).unwrap();
    assert!(matches!(load_annotated(&stem), Err(Error::PayloadLength { expected: 16, found: 15 })));
}

#[test]
fn unknown_sidecar_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("vol");
    save_volume(&volume(1, 1, 1, vec![0]), &stem).unwrap();
    let json = gpv_paths(&stem).0;
    let text = std::fs::read_to_string(&json).unwrap().replacen('{', "{\n  \"extra\": 1,", 1);
    std::fs::write(&json, text).unwrap();
    assert!(matches!(load_annotated(&stem), Err(Error::Metadata { .. })));
}

#[test]
fn missing_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_annotated(&dir.path().join("absent")).unwrap_err();
    assert!(err.is_input_error());
}

#[test]
fn annotation_outside_volume_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let v = volume(1, 1, 3, vec![0; 3]);
    let err = save_annotated(&v, &GppAnnotation::new("v", 3, "t"), &dir.path().join("v")).unwrap_err();
    assert!(matches!(err, Error::IndexOutOfRange { .. }));
}
