fn main() {
    // ndarray's `blas` feature and ndarray-linalg's LAPACK bindings resolve their
    // symbols from system OpenBLAS, which bundles BLAS, CBLAS and LAPACK in one
    // shared object (Debian/Ubuntu: libopenblas-dev).
    println!("cargo:rustc-link-lib=dylib=openblas");
    println!("cargo:rerun-if-changed=build.rs");
}
