//! Compiles a C program against the generated header, links it to the shared
//! library and runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "pairwise_cl.h"

int main(void) {
    double zi[4] = {1, 0, 0, 1}, zj[4] = {1, 0.1, 0.1, 1};
    double loss = -1;
    if (pcl_pair_loss(zi, zj, 2, 2, 0.5, &loss) != PCL_STATUS_OK) return 10;
    if (!(loss > 0 && isfinite(loss))) return 11;

    if (pcl_pair_loss(zi, zj, 2, 2, -1.0, &loss) != PCL_STATUS_INVALID_ARGUMENT) return 12;
    if (pcl_last_error() == NULL) return 13;

    double a[3] = {1, 2, 3}, b[3] = {4, 5, 6}, u, p;
    int exact;
    if (pcl_mann_whitney(a, 3, b, 3, &u, &p, &exact) != PCL_STATUS_OK) return 14;
    if (fabs(p - 0.1) > 1e-12 || !exact) return 15;

    PclCheckpoint *ck = NULL;
    if (pcl_checkpoint_load("/nonexistent/x.pcl", &ck) != PCL_STATUS_IO || ck != NULL) return 16;
    pcl_checkpoint_free(NULL);
    printf("ok %.6f\n", loss);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib_dir = target_dir();
    assert!(
        lib_dir.join("libpairwise_cl_ffi.so").is_file(),
        "shared library missing in {}",
        lib_dir.display()
    );
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = tmp.path().join("main");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .args(["-lpairwise_cl_ffi", "-lm"])
        .status()
        .expect("C compiler available");
    assert!(status.success(), "compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
