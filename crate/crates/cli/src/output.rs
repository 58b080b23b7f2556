//! Files written by `render`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use lidarfield::dataset_io::{write_scan, LearningMap, LidarScan, Pose};
use lidarfield::lidar_model::{unproject, LidarPoint, RangeImage, SensorIntrinsics};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Writes every render product into `dir` and returns the file names.
pub fn write_render(
    dir: &Path,
    img: &RangeImage,
    intr: &SensorIntrinsics,
    lm: &LearningMap,
    far: f64,
    pose: &Pose,
    t: f64,
) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut note = |name: &str| files.push(name.to_string());

    let p = dir.join("range.rimg");
    let mut w = create(&p)?;
    img.write_to(&mut w)?;
    w.flush()?;
    note("range.rimg");

    let p = dir.join("range.npy");
    let mut w = create(&p)?;
    img.write_npy(&mut w)?;
    w.flush()?;
    note("range.npy");

    let (h, wd) = (img.height as u32, img.width as u32);
    // 16-bit depth scaled so `far` maps to the top of the range.
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(wd, h, |x, y| {
        let i = img.index(y as usize, x as usize);
        let v = if img.mask[i] { (img.depth[i] as f64 / far).clamp(0.0, 1.0) * 65535.0 } else { 0.0 };
        Luma([v.round() as u16])
    });
    depth.save(dir.join("depth.png")).context("writing depth.png")?;
    note("depth.png");

    let intensity = GrayImage::from_fn(wd, h, |x, y| {
        let i = img.index(y as usize, x as usize);
        let v = if img.mask[i] { img.intensity[i].clamp(0.0, 1.0) * 255.0 } else { 0.0 };
        Luma([v.round() as u8])
    });
    intensity.save(dir.join("intensity.png")).context("writing intensity.png")?;
    note("intensity.png");

    let semantic = RgbImage::from_fn(wd, h, |x, y| {
        let i = img.index(y as usize, x as usize);
        let c = if img.mask[i] { lm.colors.get(img.label[i] as usize).copied().unwrap_or([255, 255, 255]) } else { [0, 0, 0] };
        image::Rgb(c)
    });
    semantic.save(dir.join("semantic.png")).context("writing semantic.png")?;
    note("semantic.png");

    let palette: serde_json::Map<String, serde_json::Value> = lm
        .names
        .iter()
        .zip(&lm.colors)
        .enumerate()
        .map(|(k, (n, c))| (k.to_string(), serde_json::json!({ "name": n, "color": c })))
        .collect();
    std::fs::write(dir.join("palette.json"), serde_json::to_string_pretty(&palette)? + "\n").context("writing palette.json")?;
    note("palette.json");

    let points = unproject(img, intr);
    let scan = LidarScan {
        points: points.iter().map(|p| [p.xyz[0] as f32, p.xyz[1] as f32, p.xyz[2] as f32, p.intensity]).collect(),
        raw_labels: points.iter().map(|p| lm.raw_id(p.label).unwrap_or(0)).collect(),
        labels: points.iter().map(|p| p.label).collect(),
        timestamp: t,
        pose: *pose,
    };
    write_scan(&dir.join("cloud.bin"), &dir.join("cloud.label"), &scan)?;
    note("cloud.bin");
    note("cloud.label");

    write_ply(&dir.join("cloud.ply"), &points)?;
    note("cloud.ply");
    Ok(files)
}

/// ASCII PLY in the sensor frame with intensity and training class per point.
pub fn write_ply(path: &Path, points: &[LidarPoint]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z\nproperty float intensity\nproperty uint class")?;
    writeln!(w, "end_header")?;
    for p in points {
        writeln!(w, "{} {} {} {} {}", p.xyz[0] as f32, p.xyz[1] as f32, p.xyz[2] as f32, p.intensity, p.label)?;
    }
    w.flush()?;
    Ok(())
}
