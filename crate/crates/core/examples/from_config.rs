//! Drive the command-line front end from code with a bundled configuration.
//!
//! ```bash
//! cargo run --example from_config
//! ```

use std::path::Path;

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference_cell.json");
    let out = std::env::temp_dir().join("multipop-from-config");
    for cmd in ["validate", "renewal", "eigen"] {
        let args = ["multipop", cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        let code = multipop::cli::run(args);
        println!("{cmd} exited with {code}");
    }
    println!("outputs in {}", out.display());
}
