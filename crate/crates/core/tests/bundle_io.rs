use std::fs;

use mars_core::bundle_io::{self, TensorBlob};
use mars_core::synth::{self, SynthConfig};

#[test]
fn synthetic_bundle_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [SynthConfig::planted(12), SynthConfig::random(12)] {
        let ep = synth::generate(&cfg);
        let path = dir.path().join(cfg.kind.to_string());
        bundle_io::write_bundle(&ep.bundle, &path).unwrap();
        let back = bundle_io::read_bundle(&path).unwrap();
        assert_eq!(back, ep.bundle);
        assert_eq!(back.validate().unwrap(), ep.bundle.validate().unwrap());
    }
}

#[test]
fn writing_twice_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ep = synth::generate(&SynthConfig::planted(4));
    ep.write(a.path()).unwrap();
    ep.write(b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path().join("bundle"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() > 8);
    for name in names {
        let x = fs::read(a.path().join("bundle").join(&name)).unwrap();
        let y = fs::read(b.path().join("bundle").join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    for f in ["proposals.txt", "gt.rle", "episode.txt"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn corrupted_tensor_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ep = synth::generate(&SynthConfig::planted(1));
    bundle_io::write_bundle(&ep.bundle, dir.path()).unwrap();

    let file = dir
        .path()
        .join(bundle_io::tensor_file_name("text_embedding"));
    let mut bytes = fs::read(&file).unwrap();
    bytes[0] = b'X';
    fs::write(&file, &bytes).unwrap();
    let err = bundle_io::read_bundle(dir.path()).unwrap_err();
    assert_eq!(err.kind(), "MagicMismatch");
    assert!(err.to_string().contains("text_embedding"));

    let nan = TensorBlob::from_f32(vec![2], vec![1.0, f32::NAN]).unwrap();
    fs::write(&file, nan.to_bytes()).unwrap();
    assert_eq!(
        bundle_io::read_bundle(dir.path()).unwrap_err().kind(),
        "NonFiniteValue"
    );

    fs::remove_file(&file).unwrap();
    assert_eq!(
        bundle_io::read_bundle(dir.path()).unwrap_err().kind(),
        "MissingTensor"
    );
}

#[test]
fn empty_support_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut ep = synth::generate(&SynthConfig::planted(2));
    let shape = ep.bundle.support_masks_patch[0].shape().to_vec();
    let n = shape.iter().product();
    ep.bundle.support_masks_patch[0] = TensorBlob::from_u8(shape, vec![0; n]).unwrap();
    assert_eq!(ep.bundle.validate().unwrap_err().kind(), "EmptySupportMask");
    bundle_io::write_bundle(&ep.bundle, dir.path()).unwrap();
    assert_eq!(
        bundle_io::read_bundle(dir.path()).unwrap_err().kind(),
        "EmptySupportMask"
    );
}
