fn main() {
    println!("cargo::rustc-check-cfg=cfg(acceptance)");
    println!("cargo::rustc-cfg=acceptance");
}
