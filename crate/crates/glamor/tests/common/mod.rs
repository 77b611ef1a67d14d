#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

pub fn glamor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glamor")).args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ok(args: &[&str]) -> Output {
    let o = glamor(args);
    assert!(o.status.success(), "glamor {args:?} failed: {}", stderr(&o));
    o
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A solid image with a small marker whose position depends on `mark`.
pub fn write_image(path: &Path, size: u32, color: [u8; 3], mark: u32) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let mut img = RgbImage::from_pixel(size, size, Rgb(color));
    let m = mark % (size - 2);
    for d in 0..2 {
        img.put_pixel(m + d, m, Rgb([255 - color[0], 255 - color[1], 255 - color[2]]));
    }
    img.save(path).unwrap();
}

/// Cars196 layout: each class gets `per_class` images; with `duplicates`
/// all images of a class are identical.
pub fn cars_fixture(
    root: &Path,
    train: &[&str],
    test: &[&str],
    per_class: u32,
    size: u32,
    duplicates: bool,
) -> PathBuf {
    let mut n = 0u32;
    for (split, classes) in [("train", train), ("test", test)] {
        for (ci, class) in classes.iter().enumerate() {
            let color = [
                (40 * ci as u32 + 30) as u8,
                (70 * (ci as u32 % 3) + 20) as u8,
                if split == "train" { 200 } else { 60 },
            ];
            for i in 0..per_class {
                let mark = if duplicates { ci as u32 * 3 } else { i * 5 + ci as u32 };
                write_image(&root.join(split).join(class).join(format!("img_{n:04}.png")), size, color, mark);
                n += 1;
            }
        }
    }
    root.to_path_buf()
}
