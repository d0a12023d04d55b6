//! Regenerates the bundled single-image dataset:
//! `cargo run -p smac-cli --example make_fixture -- fixtures/one`.

use std::path::PathBuf;

use smac_core::io;

fn main() -> Result<(), smac_core::Error> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/one".into()));
    let s = smac_core::synthetic::scene(64, 64, 1);
    for d in ["rgb", "depth", "gt"] {
        std::fs::create_dir_all(root.join(d)).expect("create fixture directories");
    }
    io::save_ppm(&root.join("rgb/scene1.ppm"), &s.rgb)?;
    io::save_pgm(&root.join("depth/scene1.pgm"), &s.depth)?;
    io::save_pgm(&root.join("gt/scene1.pgm"), &s.gt)?;
    Ok(())
}
