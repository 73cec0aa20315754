use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_root_or_default(&dir);
    match cbindgen::generate_with_config(&dir, config) {
        Ok(b) => {
            b.write_to_file(dir.join("include/guidewave.h"));
        }
        // Keep the checked-in header when the source cannot be parsed.
        Err(e) => println!("cargo:warning=cbindgen: {e}"),
    }
}
