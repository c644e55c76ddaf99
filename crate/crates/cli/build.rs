use std::process::Command;

fn main() {
    println!("cargo:rerun-if-env-changed=GEOLOC_GIT_DESCRIBE");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
    let describe = std::env::var("GEOLOC_GIT_DESCRIBE").ok().or_else(|| {
        Command::new("git")
            .args(["describe", "--always", "--dirty", "--tags"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
    });
    println!("cargo:rustc-env=GEOLOC_GIT_DESCRIBE={}", describe.unwrap_or_else(|| "unknown".into()));
}
