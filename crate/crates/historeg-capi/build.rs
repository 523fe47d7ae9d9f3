use std::env;
use std::path::PathBuf;

fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let bindings = cbindgen::generate(&crate_dir).expect("header generation failed");
    let out = PathBuf::from(env::var("OUT_DIR").unwrap()).join("historeg.h");
    bindings.write_to_file(out);
    // Committed copy for consumers that do not run cargo; write_to_file leaves
    // the file untouched when the content is unchanged.
    bindings.write_to_file(crate_dir.join("include").join("historeg.h"));
}
