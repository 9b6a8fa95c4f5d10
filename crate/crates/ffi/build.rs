use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("cargo sets the manifest dir"));
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = match cbindgen::Config::from_file(dir.join("cbindgen.toml")) {
        Ok(c) => c,
        Err(e) => {
            println!("cargo:warning=cbindgen config: {e}");
            return;
        }
    };
    match cbindgen::Builder::new().with_src(dir.join("src/lib.rs")).with_config(config).generate() {
        Ok(bindings) => {
            bindings.write_to_file(dir.join("include/flora.h"));
        }
        Err(e) => println!("cargo:warning=header not regenerated: {e}"),
    }
}
