//! Dataset directory I/O.
//!
//! Layout: `images/NNNN.png` (8-bit RGB), `depth_gt/NNNN.pfm` and
//! `depth_mono/NNNN.pfm` (grayscale float PFM, zero marks invalid pixels),
//! `cameras.json` (per-frame intrinsics/extrinsics), `bbox.json` (scene
//! bounds). Ground-truth depth is optional on load; the monocular map is
//! required. Indices are zero-based and zero-padded to four digits.

use crate::camera::Camera;
use crate::error::{EngineError, Result};
use crate::math::{Mat3, Vec3};
use crate::pfm;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// One posed frame with its photometric and depth data.
#[derive(Clone, Debug)]
pub struct Frame {
    pub cam: Camera,
    /// Linear RGB in [0, 1], row-major.
    pub image: Vec<[f64; 3]>,
    /// Ray-parameter distance; 0 marks invalid. Optional on load.
    pub depth_gt: Option<Vec<f64>>,
    /// Monocular depth estimate; 0 marks invalid.
    pub depth_mono: Vec<f64>,
}

/// A loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// World-to-camera rotation, row-major.
    r: [f64; 9],
    t: [f64; 3],
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    frames: Vec<CameraJson>,
}

#[derive(Serialize, Deserialize)]
struct BboxFile {
    min: [f64; 3],
    max: [f64; 3],
}

fn cam_to_json(cam: &Camera) -> CameraJson {
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            r[i * 3 + j] = cam.r.m[i][j];
        }
    }
    CameraJson {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        r,
        t: cam.t.to_array(),
        width: cam.width,
        height: cam.height,
    }
}

fn cam_from_json(j: &CameraJson) -> Result<Camera> {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            m[i][k] = j.r[i * 3 + k];
        }
    }
    let cam = Camera {
        fx: j.fx,
        fy: j.fy,
        cx: j.cx,
        cy: j.cy,
        r: Mat3 { m },
        t: Vec3::from_array(j.t),
        width: j.width,
        height: j.height,
    };
    cam.validate().map_err(EngineError::Config)?;
    Ok(cam)
}

/// Parses a cameras.json payload. Panic-free; a fuzz target.
pub fn parse_cameras(bytes: &[u8]) -> std::result::Result<Vec<Camera>, String> {
    let file: CamerasFile = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
    let mut cams = Vec::with_capacity(file.frames.len());
    for (i, j) in file.frames.iter().enumerate() {
        cams.push(cam_from_json(j).map_err(|e| format!("frame {i}: {e}"))?);
    }
    Ok(cams)
}

/// Parses a bbox.json payload. Panic-free; a fuzz target.
pub fn parse_bbox(bytes: &[u8]) -> std::result::Result<(Vec3, Vec3), String> {
    let b: BboxFile = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
    let (mn, mx) = (Vec3::from_array(b.min), Vec3::from_array(b.max));
    if !mn.is_finite() || !mx.is_finite() {
        return Err("non-finite bounding box".into());
    }
    for a in 0..3 {
        if !(mn.axis(a) < mx.axis(a)) {
            return Err("bounding box min must be strictly below max".into());
        }
    }
    Ok((mn, mx))
}

/// Writes an 8-bit RGB PNG from linear [0, 1] colors (rounded, clamped).
pub fn write_png_rgb(path: &Path, pixels: &[[f64; 3]], width: u32, height: u32) -> Result<()> {
    assert_eq!(pixels.len(), (width * height) as usize);
    let file = std::fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
    let mut data = Vec::with_capacity(pixels.len() * 3);
    for p in pixels {
        for ch in 0..3 {
            data.push((p[ch].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
}

/// Decodes an 8-bit PNG into linear [0, 1] RGB. Panic-free; a fuzz target
/// (through the underlying decoder).
pub fn parse_png_rgb(bytes: &[u8]) -> std::result::Result<(Vec<[f64; 3]>, u32, u32), String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or("image too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err("only 8-bit PNG supported".into());
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w.checked_mul(h).ok_or("image too large")?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => return Err("indexed PNG not supported".into()),
    };
    if buf.len() < n * channels {
        return Err("decoded buffer shorter than expected".into());
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let px = &buf[i * channels..(i + 1) * channels];
        let rgb = match channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        out.push([
            rgb[0] as f64 / 255.0,
            rgb[1] as f64 / 255.0,
            rgb[2] as f64 / 255.0,
        ]);
    }
    Ok((out, info.width, info.height))
}

pub fn read_png_rgb(path: &Path) -> Result<(Vec<[f64; 3]>, u32, u32)> {
    let bytes = std::fs::read(path).map_err(|e| EngineError::io(path, e))?;
    parse_png_rgb(&bytes).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
}

fn frame_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes a dataset directory (images, depths, cameras, bbox).
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for sub in ["images", "depth_gt", "depth_mono"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| EngineError::io(dir, e))?;
    }
    let mut cams = Vec::new();
    for (i, f) in ds.frames.iter().enumerate() {
        let name = frame_name(i);
        write_png_rgb(
            &dir.join("images").join(format!("{name}.png")),
            &f.image,
            f.cam.width,
            f.cam.height,
        )?;
        if let Some(gt) = &f.depth_gt {
            pfm::write_gray(
                &dir.join("depth_gt").join(format!("{name}.pfm")),
                f.cam.width as usize,
                f.cam.height as usize,
                gt,
            )?;
        }
        pfm::write_gray(
            &dir.join("depth_mono").join(format!("{name}.pfm")),
            f.cam.width as usize,
            f.cam.height as usize,
            &f.depth_mono,
        )?;
        cams.push(cam_to_json(&f.cam));
    }
    let cameras = serde_json::to_vec_pretty(&CamerasFile { frames: cams })
        .map_err(|e| EngineError::Io(e.to_string()))?;
    std::fs::write(dir.join("cameras.json"), cameras)
        .map_err(|e| EngineError::io(dir, e))?;
    let bbox = serde_json::to_vec_pretty(&BboxFile {
        min: ds.bbox_min.to_array(),
        max: ds.bbox_max.to_array(),
    })
    .map_err(|e| EngineError::Io(e.to_string()))?;
    std::fs::write(dir.join("bbox.json"), bbox).map_err(|e| EngineError::io(dir, e))?;
    Ok(())
}

fn read_depth(path: &PathBuf, cam: &Camera) -> Result<Vec<f64>> {
    let (w, h, data) = pfm::read_gray(path)?;
    if (w, h) != (cam.width as usize, cam.height as usize) {
        return Err(EngineError::Config(format!(
            "{}: depth resolution {w}x{h} does not match camera {}x{}",
            path.display(),
            cam.width,
            cam.height
        )));
    }
    if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(EngineError::Config(format!(
            "{}: depth must be finite and nonnegative",
            path.display()
        )));
    }
    Ok(data)
}

/// Loads a dataset directory. Ground-truth depth maps are optional; the
/// monocular maps and images are required for every frame in cameras.json.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cam_path = dir.join("cameras.json");
    let bytes = std::fs::read(&cam_path).map_err(|e| EngineError::io(&cam_path, e))?;
    let cams = parse_cameras(&bytes)
        .map_err(|e| EngineError::Config(format!("{}: {e}", cam_path.display())))?;
    if cams.is_empty() {
        return Err(EngineError::Config("dataset has no frames".into()));
    }
    let bbox_path = dir.join("bbox.json");
    let bytes = std::fs::read(&bbox_path).map_err(|e| EngineError::io(&bbox_path, e))?;
    let (bbox_min, bbox_max) = parse_bbox(&bytes)
        .map_err(|e| EngineError::Config(format!("{}: {e}", bbox_path.display())))?;

    let mut frames = Vec::with_capacity(cams.len());
    for (i, cam) in cams.into_iter().enumerate() {
        let name = frame_name(i);
        let img_path = dir.join("images").join(format!("{name}.png"));
        let (image, w, h) = read_png_rgb(&img_path)?;
        if (w, h) != (cam.width, cam.height) {
            return Err(EngineError::Config(format!(
                "{}: image resolution {w}x{h} does not match camera {}x{}",
                img_path.display(),
                cam.width,
                cam.height
            )));
        }
        let gt_path = dir.join("depth_gt").join(format!("{name}.pfm"));
        let depth_gt = if gt_path.exists() {
            Some(read_depth(&gt_path, &cam)?)
        } else {
            None
        };
        let mono_path = dir.join("depth_mono").join(format!("{name}.pfm"));
        let depth_mono = read_depth(&mono_path, &cam)?;
        frames.push(Frame {
            cam,
            image,
            depth_gt,
            depth_mono,
        });
    }
    Ok(Dataset {
        frames,
        bbox_min,
        bbox_max,
    })
}

/// Writes a grayscale [0, 1] image as PNG (for normal/level visualization).
pub fn write_png_gray(path: &Path, pixels: &[f64], width: u32, height: u32) -> Result<()> {
    let rgb: Vec<[f64; 3]> = pixels.iter().map(|&v| [v; 3]).collect();
    write_png_rgb(path, &rgb, width, height)
}
