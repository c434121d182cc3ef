//! Compares the overlay renderer against a reviewed reference image.
//! Set `GROUNDMIX_BLESS=1` to rewrite the reference after an intended change.

use std::path::PathBuf;

use groundmix::dataset::overlay;
use groundmix::imaging::{load_rgb, save_png};
use groundmix::synth::{synth_sample, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn overlay_matches_reference() {
    let sample = synth_sample("golden", 0, &SceneSpec::default(), &mut ChaCha8Rng::seed_from_u64(2024));
    let rendered = overlay(&sample);
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/overlay_golden.png");
    if std::env::var_os("GROUNDMIX_BLESS").is_some() {
        save_png(&rendered, &golden).unwrap();
    }
    let expected = load_rgb(&golden).expect("reference image missing; run with GROUNDMIX_BLESS=1");
    assert_eq!(rendered.dimensions(), expected.dimensions());
    let differing = rendered.pixels().zip(expected.pixels()).filter(|(a, b)| a != b).count();
    assert_eq!(differing, 0, "{differing} pixels differ from the reference");
}
