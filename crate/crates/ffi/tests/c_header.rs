use std::env;
use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "itmn.h"

int main(void) {
    uint8_t bytes[4];
    float rgb[3];
    if (itmn_rgbe_encode(1.0f, 0.5f, 0.25f, bytes) != ITMN_STATUS_OK) return 1;
    if (bytes[0] != 128 || bytes[3] != 129) return 2;
    if (itmn_rgbe_decode(bytes, rgb) != ITMN_STATUS_OK || rgb[2] != 0.25f) return 3;
    if (itmn_rgbe_decode(NULL, rgb) != ITMN_STATUS_NULL_POINTER) return 4;
    if (itmn_last_error() == NULL || strstr(itmn_last_error(), "null") == NULL) return 5;
    ItmnGenerator *g = NULL;
    if (itmn_generator_load("/nonexistent.itmn", &g) == ITMN_STATUS_OK || g != NULL) return 6;
    if (itmn_generator_divisor() != 32) return 7;
    printf("%s\n", itmn_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    let exe = env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let cc = env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler found; skipping");
        return;
    }
    let lib = target_dir().join("libitmn_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let build = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
