//! Regenerates the bundled synthetic corpus under data/. The files are
//! checked in; rerun this only when the generator changes.

use std::path::Path;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data".to_string());
    lacl::data::synth::write_bundle(Path::new(&dir), 7).expect("write bundle");
    println!("wrote bundle to {dir}/");
}
