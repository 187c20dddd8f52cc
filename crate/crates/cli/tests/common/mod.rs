#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_agenet"));
    c.env_remove("AGENET_DATA_ROOT").env_remove("AGENET_DEVICE").env_remove("RUST_LOG");
    c
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn agenet")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "agenet {args:?} failed ({:?}):\n{}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small gradient images named `<age>_<i>.png` whose brightness grows with age.
pub fn write_images(dir: &Path, ages: &[u32]) -> PathBuf {
    let root = dir.join("faces");
    std::fs::create_dir_all(&root).unwrap();
    for (i, &age) in ages.iter().enumerate() {
        let level = (age * 2).min(255) as u8;
        let img = RgbImage::from_fn(40, 40, |x, y| {
            Rgb([level, (x * 6) as u8 ^ level, (y * 6) as u8])
        });
        img.save(root.join(format!("{age}_0_{i:03}.png"))).unwrap();
    }
    root
}

pub fn spread_ages(n: usize) -> Vec<u32> {
    (0..n as u32).map(|i| 20 + (i % 3) * 10 + (i / 3) % 4).collect()
}

pub const TINY_CONFIG: &str = r#"
seed = 7

[model]
input_size = 32

[train]
epochs = 2
freeze_epochs = 1
batch_size = 8
eval_batch_size = 16

[hpo]
budget = 2
epoch_cap = 1
final_epochs = 2

[hpo.space]
batch_sizes = [8]
freeze_epochs = 1

[eval]
batch_size = 16

[bench]
runs = 3
warmup = 1
"#;
