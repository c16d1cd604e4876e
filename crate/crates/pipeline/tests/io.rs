use std::path::{Path, PathBuf};

use noddish::error::PipelineError;
use noddish::scheme_io::{parse_bvals, parse_bvecs};
use noddish::{load_scheme, subsample_scheme, write_scheme, VolumeContainer};
use noddish_core::hcp_like_scheme;
use proptest::prelude::*;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn golden_scheme_parses_exactly() {
    let s = load_scheme(&data("golden.bvals"), &data("golden.bvecs"), 0.0396).unwrap();
    assert_eq!(s.bvalues, vec![0.0, 0.0, 1000.0, 1005.0, 2000.0, 1990.0, 3000.0]);
    let nominal: Vec<f64> = s.shells.iter().map(|sh| sh.nominal_b).collect();
    assert_eq!(nominal, vec![0.0, 1002.5, 1995.0, 3000.0]);
    let members: Vec<Vec<usize>> = s.shells.iter().map(|sh| sh.indices.clone()).collect();
    assert_eq!(members, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6]]);
    assert_eq!(s.directions[4].to_array(), [0.6, 0.8, 0.0]);
    assert_eq!(s.directions[6].to_array(), [0.0, -0.6, 0.8]);
    assert_eq!(s.tau, 0.0396);
}

fn parse_error(e: PipelineError) -> (usize, usize) {
    match e {
        PipelineError::Parse { line, column, .. } => (line, column),
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn non_unit_gradient_is_reported_with_its_column() {
    let e = load_scheme(&data("bad_norm.bvals"), &data("bad_norm.bvecs"), 0.0396).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert_eq!(parse_error(e), (1, 3));
}

#[test]
fn ragged_bvecs_are_rejected() {
    let e = load_scheme(&data("ragged.bvals"), &data("ragged.bvecs"), 0.0396).unwrap_err();
    assert_eq!(parse_error(e), (3, 3));
}

#[test]
fn malformed_text_positions() {
    let p = Path::new("x");
    assert_eq!(parse_error(parse_bvals(p, "0 1000 abc\n").unwrap_err()), (1, 3));
    assert_eq!(parse_error(parse_bvals(p, "0 1000\n2000\n").unwrap_err()), (2, 1));
    assert_eq!(parse_error(parse_bvals(p, "0 -5\n").unwrap_err()), (1, 2));
    assert_eq!(parse_error(parse_bvecs(p, "1 0\n0 1\n").unwrap_err()), (2, 1));
    assert_eq!(parse_error(parse_bvecs(p, "1 0\n0 nan\n0 0\n").unwrap_err()), (2, 2));
    assert!(parse_bvals(p, "\n   \n").is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let e = load_scheme(&data("absent.bvals"), &data("golden.bvecs"), 0.0396).unwrap_err();
    assert!(matches!(e, PipelineError::Io { .. }));
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn all_zero_bvals_form_one_shell() {
    let dir = tempfile::tempdir().unwrap();
    let (bv, bc) = (dir.path().join("z.bvals"), dir.path().join("z.bvecs"));
    std::fs::write(&bv, "0 0 0\n").unwrap();
    std::fs::write(&bc, "0 0 0\n0 0 0\n0 0 0\n").unwrap();
    let s = load_scheme(&bv, &bc, 0.0396).unwrap();
    assert_eq!(s.shells.len(), 1);
    assert!(s.shells[0].is_b0());
}

#[test]
fn scheme_round_trips_through_text() {
    let dir = tempfile::tempdir().unwrap();
    let (bv, bc) = (dir.path().join("s.bvals"), dir.path().join("s.bvecs"));
    let s = hcp_like_scheme();
    write_scheme(&s, &bv, &bc).unwrap();
    let back = load_scheme(&bv, &bc, s.tau).unwrap();
    assert_eq!(back.bvalues, s.bvalues);
    for (a, b) in back.directions.iter().zip(&s.directions).skip(18) {
        assert_eq!(a, b);
    }
    assert_eq!(back.shells.len(), 4);
}

#[test]
fn subsampling_keeps_leading_directions() {
    let s = hcp_like_scheme();
    let (sub, idx) = subsample_scheme(&s, 60, 3000.0).unwrap();
    assert_eq!(sub.n_samples(), 198);
    assert_eq!(idx.len(), 198);
    let (sub, idx) = subsample_scheme(&s, 30, 2000.0).unwrap();
    assert_eq!(sub.n_samples(), 78);
    // b=0 block, then the first 30 of the 1000 and 2000 shells.
    let expected: Vec<usize> = (0..18).chain(18..48).chain(108..138).collect();
    assert_eq!(idx, expected);
    for (k, &i) in idx.iter().enumerate() {
        assert_eq!(sub.bvalues[k], s.bvalues[i]);
        assert_eq!(sub.directions[k], s.directions[i]);
    }
    let e = subsample_scheme(&s, 91, 3000.0).unwrap_err();
    assert_eq!(e.exit_code(), 4);
    assert!(subsample_scheme(&s, 30, 500.0).is_err());
}

#[test]
fn corrupt_volumes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("v");
    VolumeContainer::new([2, 1, 1, 3], vec![0.0; 6]).unwrap().write(&stem).unwrap();
    std::fs::write(stem.with_extension("f32"), [0u8; 20]).unwrap();
    assert!(matches!(VolumeContainer::read(&stem).unwrap_err(), PipelineError::Format { .. }));
    std::fs::write(stem.with_extension("json"), "{ \"dims\": [1, 1,\n").unwrap();
    let e = VolumeContainer::read(&stem).unwrap_err();
    assert!(matches!(e, PipelineError::Parse { line: 2, .. }), "{e}");
    assert!(VolumeContainer::new([2, 2, 1, 1], vec![0.0; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn volume_round_trip_is_bit_identical(
        dims in (1usize..4, 1usize..4, 1usize..3, 1usize..5),
        bits in proptest::collection::vec(any::<u32>(), 96),
    ) {
        let (nx, ny, nz, ns) = dims;
        let n = nx * ny * nz * ns;
        let data: Vec<f32> = bits[..n].iter().map(|&b| f32::from_bits(b)).collect();
        let v = VolumeContainer::new([nx, ny, nz, ns], data).unwrap().with_provenance("a.u.", "test");
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("vol");
        v.write(&stem).unwrap();
        let back = VolumeContainer::read(&stem).unwrap();
        prop_assert_eq!(back.dims, v.dims);
        prop_assert_eq!(&back.units, &v.units);
        let a: Vec<u32> = back.data.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = v.data.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}
