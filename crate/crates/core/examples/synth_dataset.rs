//! Writes a synthetic dataset: `cargo run --example synth_dataset -- OUT_DIR [N] [SEED]`.

use std::path::PathBuf;

use groundmix::synth::{synth_dataset, write_dataset, SceneSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next().map(PathBuf::from) else {
        eprintln!("usage: synth_dataset OUT_DIR [N] [SEED]");
        std::process::exit(1);
    };
    let n = args.next().map_or(10, |v| v.parse().expect("N must be an integer"));
    let seed = args.next().map_or(0, |v| v.parse().expect("SEED must be an integer"));
    let (manifest, samples) = synth_dataset(n, seed, &SceneSpec::default());
    match write_dataset(&out, &manifest, &samples) {
        Ok(path) => eprintln!("wrote {} ({} images, {} objects)", path.display(), n, manifest.box_count()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
