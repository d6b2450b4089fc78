use std::path::Path;
use std::process::Command;

#[test]
fn python_smoke_test() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let lib = ["so", "dylib"]
        .iter()
        .map(|ext| root.join("target/debug").join(format!("libpyhetdecomp.{ext}")))
        .find(|p| p.exists());
    let Some(lib) = lib else {
        eprintln!("skipping: shared library not built");
        return;
    };
    let Ok(out) = Command::new("python3").arg(root.join("python/smoke_test.py")).env("PYHETDECOMP_LIB", &lib).output()
    else {
        eprintln!("skipping: python3 not available");
        return;
    };
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}
