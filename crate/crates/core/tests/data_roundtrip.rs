use capsule_ldm::datasets::{self, Layout, ToyRenderSpec};
use capsule_ldm::eval::adherence_report;
use capsule_ldm::maskpipe::{self, split_channels, Class};

#[test]
fn toy_dataset_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToyRenderSpec::default();
    let manifest = datasets::make_toy_dataset(6, dir.path(), &spec, 11, 32).unwrap();
    let loaded = datasets::load_folder(dir.path(), Layout::Paired).unwrap();
    assert_eq!(loaded.len(), 6);
    for ((id, seed), got) in manifest.entries.iter().zip(&loaded) {
        let want = datasets::toy_sample(32, &spec, *seed).unwrap();
        assert_eq!(&got.id, id);
        assert_eq!(got.image, want.image);
        assert_eq!(got.bundle, want.bundle);
    }
    let text = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(text, manifest.to_tsv());
}

#[test]
fn rendered_frames_follow_their_masks() {
    let spec = ToyRenderSpec::default();
    for seed in 0..12 {
        let s = datasets::toy_sample(48, &spec, seed).unwrap();
        let r = adherence_report(&s.image, &s.bundle.y_a).unwrap();
        assert!(r.passes(), "seed {seed}: {r:?}");
    }
}

#[test]
fn color_mask_file_roundtrip_keeps_channels() {
    let dir = tempfile::tempdir().unwrap();
    let s = datasets::toy_sample(40, &ToyRenderSpec::default(), 3).unwrap();
    let map = &s.bundle.y_a;
    let path = dir.path().join("m.png");
    maskpipe::encode_color_mask(map, &path).unwrap();
    let back = maskpipe::load_any_mask(&path).unwrap();
    assert_eq!(&back, map);
    let b = split_channels(&back);
    let total = b.y_d.count() + b.y_c.count() + b.y_f.count() + back.count(Class::Blank);
    assert_eq!(total, 40 * 40);
}
