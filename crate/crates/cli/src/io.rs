//! Material packs, label maps, target photos and preview images on disk.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};
use matx_core::labels::LabelMap;
use matx_core::render::{decode_normal, encode_normal, MaterialMaps};
use matx_core::Tensor;

use crate::CliError;

pub const PACK_FILES: [&str; 4] = ["albedo.png", "normal.png", "roughness.png", "specular.png"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// sRGB (IEC 61966-2-1) encoded value to linear.
pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f32) -> f32 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn open(path: &Path) -> Result<(DynamicImage, BitDepth), CliError> {
    let img = image::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let depth = if img.color().bits_per_pixel() / img.color().channel_count() as u16 > 8 {
        BitDepth::Sixteen
    } else {
        BitDepth::Eight
    };
    Ok((img, depth))
}

/// `[C,H,W]` in `[0, 1]` from the image's RGB (`channels = 3`) or luma.
fn to_tensor(img: &DynamicImage, channels: usize) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; channels * plane];
    if channels == 3 {
        for (i, p) in img.to_rgb16().pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p.0[c] as f32 / 65535.0;
            }
        }
    } else {
        for (i, p) in img.to_luma16().pixels().enumerate() {
            data[i] = p.0[0] as f32 / 65535.0;
        }
    }
    Tensor::from_vec(&[channels, h, w], data).expect("image shape")
}

/// Loads a photo or render as display-space `[3,H,W]` values.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>, CliError> {
    Ok(to_tensor(&open(path)?.0, 3))
}

pub fn load_labels(path: &Path) -> Result<LabelMap, CliError> {
    let (img, _) = open(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(CliError::input(format!(
            "{}: label maps must be single-channel 8-bit, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let g = img.to_luma8();
    LabelMap::new(g.height() as usize, g.width() as usize, g.into_raw()).map_err(CliError::input)
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<(), CliError> {
    let img = GrayImage::from_raw(
        labels.width() as u32,
        labels.height() as u32,
        labels.data().to_vec(),
    )
    .expect("label buffer");
    img.save(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Quantizes `[1|3,H,W]` values in `[0,1]` to a PNG.
pub fn save_image(t: &Tensor<f32>, depth: BitDepth, path: &Path) -> Result<(), CliError> {
    let (c, h, w) = t.chw().expect("[C,H,W] image");
    let plane = h * w;
    let q = |v: f32| (v.clamp(0.0, 1.0) * depth.max()).round();
    let d = t.data();
    let result = match (c, depth) {
        (1, BitDepth::Eight) => ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([q(d[y as usize * w + x as usize]) as u8])
        })
        .save(path),
        (1, BitDepth::Sixteen) => {
            ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
                Luma([q(d[y as usize * w + x as usize]) as u16])
            })
            .save(path)
        }
        (3, BitDepth::Eight) => ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([
                q(d[i]) as u8,
                q(d[plane + i]) as u8,
                q(d[2 * plane + i]) as u8,
            ])
        })
        .save(path),
        (3, BitDepth::Sixteen) => {
            ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb([
                    q(d[i]) as u16,
                    q(d[plane + i]) as u16,
                    q(d[2 * plane + i]) as u16,
                ])
            })
            .save(path)
        }
        _ => panic!("unsupported channel count {c}"),
    };
    result.map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Material maps plus the bit depth they were stored at.
#[derive(Clone, Debug)]
pub struct Pack {
    pub maps: MaterialMaps<f32>,
    pub depth: BitDepth,
}

pub fn load_pack(dir: &Path) -> Result<Pack, CliError> {
    if !dir.is_dir() {
        return Err(CliError::input(format!(
            "pack directory {} does not exist",
            dir.display()
        )));
    }
    let mut images = Vec::with_capacity(4);
    for name in PACK_FILES {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(CliError::input(format!(
                "pack {} is missing {name}",
                dir.display()
            )));
        }
        images.push((name, open(&path)?));
    }
    let (w0, h0) = (images[0].1 .0.width(), images[0].1 .0.height());
    for (name, (img, _)) in &images {
        if img.width() != w0 || img.height() != h0 {
            return Err(CliError::input(format!(
                "{name} is {}x{}, albedo.png is {w0}x{h0}",
                img.width(),
                img.height()
            )));
        }
    }
    if w0 != h0 || !w0.is_power_of_two() || w0 < 8 {
        return Err(CliError::input(format!(
            "pack {} is {w0}x{h0}; maps must be square with a power-of-two size of at least 8",
            dir.display()
        )));
    }
    let depth = if images.iter().any(|(_, (_, d))| *d == BitDepth::Sixteen) {
        BitDepth::Sixteen
    } else {
        BitDepth::Eight
    };
    let albedo = to_tensor(&images[0].1 .0, 3).map(srgb_to_linear);
    let normal = decode_normal(&to_tensor(&images[1].1 .0, 3)).map_err(CliError::input)?;
    let roughness = to_tensor(&images[2].1 .0, 1);
    let specular = to_tensor(&images[3].1 .0, 3).map(srgb_to_linear);
    let maps = MaterialMaps::new(albedo, normal, roughness, specular).map_err(CliError::input)?;
    Ok(Pack { maps, depth })
}

pub fn save_pack(maps: &MaterialMaps<f32>, depth: BitDepth, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    let normal = encode_normal(&maps.normal).map_err(CliError::input)?;
    save_image(
        &maps.albedo.map(linear_to_srgb),
        depth,
        &dir.join(PACK_FILES[0]),
    )?;
    save_image(&normal, depth, &dir.join(PACK_FILES[1]))?;
    save_image(&maps.roughness, depth, &dir.join(PACK_FILES[2]))?;
    save_image(
        &maps.specular.map(linear_to_srgb),
        depth,
        &dir.join(PACK_FILES[3]),
    )?;
    Ok(())
}

/// Centre square crop of `[C,H,W]` to `side × side`.
fn centre_crop<T: Copy>(
    data: &[T],
    c: usize,
    h: usize,
    w: usize,
    side_h: usize,
    side_w: usize,
) -> Vec<T> {
    let (oy, ox) = ((h - side_h) / 2, (w - side_w) / 2);
    let mut out = Vec::with_capacity(c * side_h * side_w);
    for ci in 0..c {
        for y in 0..side_h {
            let row = ci * h * w + (y + oy) * w + ox;
            out.extend_from_slice(&data[row..row + side_w]);
        }
    }
    out
}

/// A target photo with optional labels, brought to the working size.
///
/// Photos larger than `size` are centre-cropped to the largest square that
/// is a multiple of `size`, then box-downscaled to `size²`; labels follow by
/// taking the centre sample of each box. Smaller photos are centre-cropped
/// to multiples of 8.
pub fn prepare_target(
    image: Tensor<f32>,
    labels: Option<LabelMap>,
    size: usize,
) -> Result<(Tensor<f32>, Option<LabelMap>), CliError> {
    let (_, h, w) = image.chw().expect("rgb");
    if let Some(l) = &labels {
        if l.height() != h || l.width() != w {
            return Err(CliError::input(format!(
                "target labels are {}x{}, photo is {w}x{h}",
                l.width(),
                l.height()
            )));
        }
    }
    if h.min(w) > size {
        let k = h.min(w) / size;
        let side = k * size;
        let img = centre_crop(image.data(), 3, h, w, side, side);
        let mut out = vec![0.0f32; 3 * size * size];
        let inv = 1.0 / (k * k) as f32;
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = c * side * side + (y * k + dy) * side + x * k;
                        s += img[row..row + k].iter().sum::<f32>();
                    }
                    out[c * size * size + y * size + x] = s * inv;
                }
            }
        }
        let labels = labels.map(|l| {
            let crop = centre_crop(l.data(), 1, h, w, side, side);
            LabelMap::from_fn(size, size, |y, x| {
                crop[(y * k + k / 2) * side + x * k + k / 2]
            })
        });
        return Ok((
            Tensor::from_vec(&[3, size, size], out).expect("shape"),
            labels,
        ));
    }
    let (nh, nw) = (h / 8 * 8, w / 8 * 8);
    if nh == 0 || nw == 0 {
        return Err(CliError::input(format!(
            "target photo {w}x{h} is smaller than 8x8"
        )));
    }
    let img =
        Tensor::from_vec(&[3, nh, nw], centre_crop(image.data(), 3, h, w, nh, nw)).expect("shape");
    let labels = labels
        .map(|l| LabelMap::new(nh, nw, centre_crop(l.data(), 1, h, w, nh, nw)).expect("shape"));
    Ok((img, labels))
}

/// Splits `IMG[:LABELS]`. A colon followed by a path separator or drive
/// letter is not treated as a separator.
pub fn split_target(spec: &str) -> (PathBuf, Option<PathBuf>) {
    match spec.rfind(':') {
        Some(i) if i > 1 && i + 1 < spec.len() => (
            PathBuf::from(&spec[..i]),
            Some(PathBuf::from(&spec[i + 1..])),
        ),
        _ => (PathBuf::from(spec), None),
    }
}
