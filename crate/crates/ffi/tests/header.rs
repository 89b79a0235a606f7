use std::path::{Path, PathBuf};
use std::process::Command;

fn crate_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn header() -> PathBuf {
    crate_dir().join("include").join("lfseg.h")
}

// `cargo test` builds only the rlib, so the static library is built into a
// private target directory that survives between runs.
fn static_lib() -> Option<PathBuf> {
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).join("staticlib");
    let status = Command::new(env!("CARGO"))
        .args(["build", "--offline", "--quiet", "--lib", "--manifest-path"])
        .arg(crate_dir().join("Cargo.toml"))
        .arg("--target-dir")
        .arg(&target)
        .status()
        .ok()?;
    let lib = target.join("debug").join("liblfseg_ffi.a");
    (status.success() && lib.exists()).then_some(lib)
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok()
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(crate_dir().join("src").join("lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15, "{exports:?}");
    for name in exports {
        assert!(text.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["typedef struct LfsegCamera LfsegCamera;", "LFSEG_STATUS_PANIC = 8", "LFSEG_PLANE_FEATURE = 1"] {
        assert!(text.contains(ty), "{ty}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    for (tool, lang) in [("cc", "c"), ("c++", "c++")] {
        if !have(tool) {
            eprintln!("skipping: {tool} not found");
            continue;
        }
        let out = Command::new(tool)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(header())
            .output()
            .unwrap();
        assert!(out.status.success(), "{tool}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn c_program_links_and_runs() {
    if !have("cc") {
        eprintln!("skipping: cc not found");
        return;
    }
    let lib = static_lib().expect("static library build failed");
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(crate_dir().join("tests").join("c").join("smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
