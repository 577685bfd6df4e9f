//! Dataset directories on disk.
//!
//! ```text
//! dir/cameras.csv      one row per view: index, split, size, intrinsics, pose
//! dir/meta.txt         `seed = <u64>`
//! dir/train/0000.png   8-bit preview of each training image
//! dir/train/0000.raw   exact image: width u32, height u32, then RGB f64 values
//! dir/test/...         the same for held-out views
//! dir/gt.ply           ground-truth cloud, when known
//! ```
//!
//! Loading prefers the `.raw` file and falls back to the PNG.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};

use crate::data::ply::{load_ply, save_ply};
use crate::data::{Dataset, View};
use crate::error::{Error, Result};
use crate::scene::{Camera, Image};

pub const CAMERAS_HEADER: &str =
    "index,split,width,height,fx,fy,cx,cy,r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2";

fn data_err(msg: impl Into<String>) -> Error {
    Error::Dataset(msg.into())
}

pub fn camera_row(index: usize, split: &str, c: &Camera) -> String {
    let mut fields = vec![
        index.to_string(),
        split.to_string(),
        c.width.to_string(),
        c.height.to_string(),
        c.fx.to_string(),
        c.fy.to_string(),
        c.cx.to_string(),
        c.cy.to_string(),
    ];
    for r in 0..3 {
        for col in 0..3 {
            fields.push(c.rotation[(r, col)].to_string());
        }
    }
    fields.extend((0..3).map(|k| c.translation[k].to_string()));
    fields.join(",")
}

/// Parses one `cameras.csv` row into (index, split, camera).
pub fn parse_camera_row(line: &str) -> Result<(usize, String, Camera)> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != 20 {
        return Err(data_err(format!("camera row has {} fields, expected 20: `{line}`", f.len())));
    }
    let num = |k: usize| -> Result<f64> {
        f[k].parse()
            .map_err(|_| data_err(format!("bad number `{}` in camera row", f[k])))
    };
    let int = |k: usize| -> Result<usize> {
        f[k].parse()
            .map_err(|_| data_err(format!("bad integer `{}` in camera row", f[k])))
    };
    let mut rot = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            rot[(r, c)] = num(8 + 3 * r + c)?;
        }
    }
    let t = Vector3::new(num(17)?, num(18)?, num(19)?);
    let cam = Camera::new(num(4)?, num(5)?, num(6)?, num(7)?, int(2)?, int(3)?, rot, t)?;
    Ok((int(0)?, f[1].to_string(), cam))
}

pub fn write_raw_image<W: Write>(img: &Image, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_u32::<LittleEndian>(img.width as u32)?;
    w.write_u32::<LittleEndian>(img.height as u32)?;
    for &v in &img.data {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_image<R: Read>(r: R) -> Result<Image> {
    let mut r = BufReader::new(r);
    let width = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; width * height * 3];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(|_| data_err("truncated raw image"))?;
    Image::from_data(width, height, data)
}

/// Writes an image as an 8-bit PNG (values clamped to [0, 1]).
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_data(w as usize, h as usize, data)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("train"))?;
    fs::create_dir_all(dir.join("test"))?;
    let mut cams = BufWriter::new(File::create(dir.join("cameras.csv"))?);
    writeln!(cams, "{CAMERAS_HEADER}")?;
    let mut views: Vec<(&str, &View)> = ds.train.iter().map(|v| ("train", v)).collect();
    views.extend(ds.test.iter().map(|v| ("test", v)));
    views.sort_by_key(|(_, v)| v.index);
    for (split, v) in views {
        writeln!(cams, "{}", camera_row(v.index, split, &v.camera))?;
        let stem = dir.join(split).join(format!("{:04}", v.index));
        save_png(&v.image, &stem.with_extension("png"))?;
        write_raw_image(&v.image, File::create(stem.with_extension("raw"))?)?;
    }
    cams.flush()?;
    fs::write(dir.join("meta.txt"), format!("seed = {}\n", ds.seed))?;
    if let Some(gt) = &ds.ground_truth {
        save_ply(gt, &dir.join("gt.ply"))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cams_path = dir.join("cameras.csv");
    let text = fs::read_to_string(&cams_path)
        .map_err(|e| data_err(format!("cannot read {}: {e}", cams_path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CAMERAS_HEADER) {
        return Err(data_err(format!("{} has an unexpected header", cams_path.display())));
    }
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
        ground_truth: None,
        seed: 0,
    };
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (index, split, camera) = parse_camera_row(line)?;
        if split != "train" && split != "test" {
            return Err(data_err(format!("unknown split `{split}` for view {index}")));
        }
        let stem = dir.join(&split).join(format!("{index:04}"));
        let raw = stem.with_extension("raw");
        let image = if raw.exists() {
            read_raw_image(File::open(&raw)?)?
        } else {
            load_png(&stem.with_extension("png"))?
        };
        if (image.width, image.height) != (camera.width, camera.height) {
            return Err(data_err(format!(
                "view {index}: image is {}x{} but the camera is {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        let view = View { index, camera, image };
        if split == "train" {
            ds.train.push(view);
        } else {
            ds.test.push(view);
        }
    }
    if let Ok(meta) = fs::read_to_string(dir.join("meta.txt")) {
        for line in meta.lines() {
            if let Some(("seed", v)) = line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                ds.seed = v.parse().map_err(|_| data_err(format!("bad seed `{v}` in meta.txt")))?;
            }
        }
    }
    let gt = dir.join("gt.ply");
    if gt.exists() {
        ds.ground_truth = Some(load_ply(&gt)?);
    }
    Ok(ds)
}
