//! Small procedural fixtures: packs, constant-colour targets and label maps.

use std::f32::consts::TAU;
use std::path::Path;

use matx_core::labels::LabelMap;
use matx_core::prior::{GeneratorConfig, GeneratorWeights};
use matx_core::render::MaterialMaps;
use matx_core::rng::{self, Stream};
use matx_core::Tensor;
use rand::Rng;

use crate::io::{save_image, save_labels, save_pack, BitDepth};
use crate::CliError;

/// Display-space colours of the constant targets.
/// Flat target photos. Kept inside what the default light can produce: with
/// its falloff, even albedo 1 averages about 0.77 in display space.
pub const TARGETS: [(&str, [f32; 3]); 3] = [
    ("red.png", [0.75, 0.06, 0.06]),
    ("blue.png", [0.06, 0.1, 0.72]),
    ("green.png", [0.1, 0.7, 0.12]),
];

pub fn gray_pack(size: usize) -> MaterialMaps<f32> {
    MaterialMaps::constant(size, [0.5; 3], [0.0; 2], 0.5, [0.04; 3])
}

/// Running-bond bricks with mortar joints. Returns the maps and a label map
/// with 0 on bricks and 1 on mortar.
pub fn brick_pack(size: usize, seed: u64) -> (MaterialMaps<f32>, LabelMap) {
    let row_h = (size / 8).max(4);
    let brick_w = 2 * row_h;
    let joint = (row_h / 8).max(1);
    let mut rng = rng::stream(seed, Stream::Init, 300);
    let bricks_per_row = size.div_ceil(brick_w);
    let rows = size.div_ceil(row_h);
    let tint: Vec<f32> = (0..rows * bricks_per_row)
        .map(|_| rng.random_range(-0.08..0.08))
        .collect();
    let mortar = |y: usize, x: usize| {
        let row = y / row_h;
        let xs = (x + (row % 2) * brick_w / 2) % size;
        y % row_h < joint || xs % brick_w < joint
    };
    let brick_id = |y: usize, x: usize| {
        let row = y / row_h;
        let xs = (x + (row % 2) * brick_w / 2) % size;
        row * bricks_per_row + xs / brick_w
    };
    let labels = LabelMap::from_fn(size, size, |y, x| mortar(y, x) as u8);
    let plane = size * size;
    let albedo = Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i / plane, (i % plane) / size, i % size);
        if mortar(y, x) {
            [0.55, 0.53, 0.5][c]
        } else {
            ([0.45, 0.16, 0.09][c] + tint[brick_id(y, x)]).clamp(0.0, 1.0)
        }
    });
    // mortar sits lower; normals from the wrapped height gradient
    let height = |y: usize, x: usize| {
        if mortar(y % size, x % size) {
            0.0f32
        } else {
            1.0
        }
    };
    let normal = Tensor::from_fn(&[2, size, size], |i| {
        let (c, y, x) = (i / plane, (i % plane) / size, i % size);
        let (yp, xp, ym, xm) = (
            (y + 1) % size,
            (x + 1) % size,
            (y + size - 1) % size,
            (x + size - 1) % size,
        );
        let g = if c == 0 {
            height(y, xp) - height(y, xm)
        } else {
            height(ym, x) - height(yp, x)
        };
        -0.35 * g
    });
    let roughness = Tensor::from_fn(&[1, size, size], |i| {
        if mortar(i / size, i % size) {
            0.9
        } else {
            0.65
        }
    });
    let specular = Tensor::full(&[3, size, size], 0.04);
    let maps = MaterialMaps::new(albedo, normal, roughness, specular).expect("valid brick maps");
    (maps, labels)
}

/// Sum of a few wrapped sinusoids with seeded phases.
pub fn noise_pack(size: usize, seed: u64) -> MaterialMaps<f32> {
    let mut rng = rng::stream(seed, Stream::Init, 301);
    let waves: Vec<(f32, f32, f32)> = (0..6)
        .map(|_| {
            (
                rng.random_range(1..5) as f32,
                rng.random_range(1..5) as f32,
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let n = size as f32;
    let field = |y: usize, x: usize| {
        waves
            .iter()
            .map(|&(fx, fy, p)| (TAU * (fx * x as f32 + fy * y as f32) / n + p).sin())
            .sum::<f32>()
            / waves.len() as f32
    };
    let plane = size * size;
    let albedo = Tensor::from_fn(&[3, size, size], |i| {
        let v = field((i % plane) / size, i % size);
        [0.35, 0.3, 0.22][i / plane] + 0.25 * v
    });
    let normal = Tensor::from_fn(&[2, size, size], |i| {
        let (y, x) = ((i % plane) / size, i % size);
        let d = if i / plane == 0 {
            field(y, (x + 1) % size) - field(y, (x + size - 1) % size)
        } else {
            field((y + size - 1) % size, x) - field((y + 1) % size, x)
        };
        (-2.0 * d).clamp(-0.6, 0.6)
    });
    let roughness = Tensor::from_fn(&[1, size, size], |i| 0.5 + 0.3 * field(i / size, i % size));
    let specular = Tensor::full(&[3, size, size], 0.04);
    MaterialMaps::new(albedo, normal, roughness, specular).expect("valid noise maps")
}

pub fn constant_image(size: usize, rgb: [f32; 3]) -> Tensor<f32> {
    let plane = size * size;
    Tensor::from_fn(&[3, size, size], |i| rgb[i / plane])
}

/// Label 1 on the middle vertical band, label 0 on the outer quarters.
/// Both region boundaries sit inside the tile, so a sharp transition
/// between regions is never mistaken for a seam at the wrap.
pub fn split_labels(size: usize) -> LabelMap {
    LabelMap::from_fn(size, size, |_, x| {
        (size / 4..3 * size / 4).contains(&x) as u8
    })
}

/// Writes every fixture under `out`.
pub fn write_demo(out: &Path, seed: u64, size: usize) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    let mut note = |p: &Path| written.push(p.display().to_string());
    std::fs::create_dir_all(out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;

    let config = GeneratorConfig::new(size, seed).map_err(CliError::input)?;
    let generator = GeneratorWeights::<f32>::init(config).map_err(CliError::input)?;
    let path = out.join("generator.bin");
    generator.save(&path).map_err(CliError::input)?;
    note(&path);

    let gray = out.join("gray");
    save_pack(&gray_pack(size), BitDepth::Eight, &gray)?;
    save_labels(&split_labels(size), &gray.join("labels.png"))?;
    note(&gray);

    let (bricks, labels) = brick_pack(size, seed);
    let brick = out.join("brick");
    save_pack(&bricks, BitDepth::Eight, &brick)?;
    save_labels(&labels, &brick.join("labels.png"))?;
    note(&brick);

    let noise = out.join("noise");
    save_pack(&noise_pack(size, seed), BitDepth::Eight, &noise)?;
    note(&noise);

    for (name, rgb) in TARGETS {
        let path = out.join(name);
        save_image(&constant_image(size, rgb), BitDepth::Eight, &path)?;
        note(&path);
    }
    Ok(written)
}
