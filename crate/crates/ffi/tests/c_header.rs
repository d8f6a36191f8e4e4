//! Compiles and runs a small C program against the generated header and the
//! static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include <string.h>
#include "scene_mtl.h"

int main(void) {
    double k[9];
    if (smtl_log_kernel(0.5, 1, k, 9) != SMTL_STATUS_OK) return 1;
    double sum = 0.0;
    for (int i = 0; i < 9; i++) sum += k[i];
    if (fabs(sum) > 1e-12) return 2;

    SmtlConfig *cfg = NULL;
    if (smtl_config_parse("bogus=1", &cfg) != SMTL_STATUS_CONFIG) return 3;
    if (cfg != NULL || strstr(smtl_last_error(), "bogus") == NULL) return 4;
    if (smtl_config_new("paper", "MTL_V", "UDA", &cfg) != SMTL_STATUS_OK) return 5;
    char *text = NULL;
    if (smtl_config_to_text(cfg, &text) != SMTL_STATUS_OK) return 6;
    if (strstr(text, "profile=paper") == NULL) return 7;
    smtl_string_free(text);
    smtl_config_free(cfg);
    puts("ok");
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // <target>/<profile>/deps/c_header-<hash>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links() {
    let lib = target_dir().join("libscene_mtl_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipped");
        return;
    }
    assert!(lib.exists(), "{} missing", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
